#include "guide/service.hpp"

#include <cstdio>
#include <fstream>
#include <optional>
#include <iostream>
#include <random>
#include <sstream>

#include <httplib.h>

#include "guide/metrics.hpp"

namespace guide::service {

ServiceError::ServiceError(int status, std::string code, const std::string& message, nlohmann::json detail)
    : std::runtime_error(message), status_(status), code_(std::move(code)), detail_(std::move(detail)) {}

nlohmann::json ServiceError::body() const {
  nlohmann::json err = {{"code", code_}, {"message", what()}};
  if (!detail_.is_null()) err["detail"] = detail_;
  return {{"schema_version", kSchemaVersion}, {"error", err}};
}

struct SessionManager::Session {
  std::mutex mutex;
  std::string id;
  std::string subject_id;
  std::string policy_name;
  std::uint64_t seed = 0;
  std::size_t initial_index = 0;
  std::string created_at;
  const SubjectContext* subject = nullptr;
  const PolicyHandle* policy = nullptr;
  env::EpisodeState state;
  std::vector<env::StepResult> history;
  Rng policy_rng;
  Clock::time_point last_access;

  bool done() const { return state.decision_step >= kEpisodeSteps; }
};

namespace {

std::string new_session_id() {
  static std::mutex m;
  static std::random_device device;
  std::lock_guard lock(m);
  const std::uint64_t hi = (static_cast<std::uint64_t>(device()) << 32) | device();
  char buf[20];
  std::snprintf(buf, sizeof buf, "s%016llx", static_cast<unsigned long long>(hi));
  return buf;
}

std::string utc_now() {
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(
                        std::chrono::system_clock::now().time_since_epoch())
                        .count();
  return data::format_timestamp(secs) + "Z";
}

nlohmann::json window_history(const StateWindow& w) {
  return {{"glucose", w.glucose},
          {"hour_of_day", w.hour_of_day},
          {"carbs", w.carbs},
          {"bolus", w.bolus},
          {"sleep", w.sleep}};
}

nlohmann::json running_summary(const std::vector<env::StepResult>& history) {
  if (history.empty()) return nullptr;
  return metrics::to_json(metrics::glycemic_summary(env::simulated_glucose(history)));
}

template <class T>
T required(const nlohmann::json& j, const char* key) {
  if (!j.is_object() || !j.contains(key))
    throw ServiceError(400, "invalid_request", std::string("missing field '") + key + "'", {{"field", key}});
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ServiceError(400, "invalid_request", std::string("field '") + key + "' has the wrong type", {{"field", key}});
  }
}

void throw_if_done(const std::string& id, bool done) {
  if (done) throw ServiceError(410, "episode_done", "session " + id + " has finished its 24 decision hours");
}

}  // namespace

BehavioralAction parse_override(const nlohmann::json& request) {
  const std::string type_name = required<std::string>(request, "type");
  ActionType type;
  try {
    type = parse_action_type(type_name);
  } catch (const ValidationError&) {
    throw ServiceError(422, "invalid_action_type", "action type must be NOTHING, EAT or INJECT",
                       {{"field", "type"}, {"allowed", {"NOTHING", "EAT", "INJECT"}}});
  }
  const int slot = request.contains("slot") ? required<int>(request, "slot") : 0;
  if (slot < 0 || slot >= kSlotsPerHour)
    throw ServiceError(422, "out_of_range", "slot must lie in [0,11]", {{"field", "slot"}, {"range", {0, 11}}});
  if (type == ActionType::Nothing) return make_action(type, kMinCarbs, kMinInsulin, slot);

  const double magnitude = required<double>(request, "magnitude");
  const double lo = type == ActionType::Eat ? kMinCarbs : kMinInsulin;
  const double hi = type == ActionType::Eat ? kMaxCarbs : kMaxInsulin;
  if (!(magnitude >= lo && magnitude <= hi)) {
    const char* unit = type == ActionType::Eat ? "g" : "U";
    std::ostringstream msg;
    msg << "magnitude " << magnitude << ' ' << unit << " outside [" << lo << ',' << hi << "] " << unit;
    throw ServiceError(422, "out_of_range", msg.str(), {{"field", "magnitude"}, {"range", {lo, hi}}, {"unit", unit}});
  }
  return type == ActionType::Eat ? make_action(type, magnitude, kMinInsulin, slot)
                                 : make_action(type, kMinCarbs, magnitude, slot);
}

SessionManager::SessionManager(std::vector<SubjectContext> subjects, std::vector<PolicyHandle> policies,
                               ServiceOptions options)
    : subjects_(std::move(subjects)), policies_(std::move(policies)), options_(std::move(options)) {
  if (policies_.empty()) throw ValidationError("the service needs at least one policy");
  for (const SubjectContext& s : subjects_) {
    if (!s.env) throw ValidationError("subject " + s.id + " has no environment");
  }
  if (!options_.session_dir.empty()) std::filesystem::create_directories(options_.session_dir);
}

SessionManager::~SessionManager() = default;

Clock::time_point SessionManager::now() const { return options_.clock ? options_.clock() : Clock::now(); }

const SubjectContext& SessionManager::subject(const std::string& id) const {
  for (const SubjectContext& s : subjects_) {
    if (s.id == id) return s;
  }
  throw ServiceError(404, "unknown_subject", "no subject '" + id + "'", {{"subject", id}});
}

const PolicyHandle& SessionManager::policy(const std::string& name) const {
  for (const PolicyHandle& p : policies_) {
    if (p.name == name) return p;
  }
  throw ServiceError(404, "unknown_policy", "no policy '" + name + "'", {{"policy", name}});
}

std::shared_ptr<SessionManager::Session> SessionManager::find(const std::string& id) {
  expire_idle();
  std::shared_lock lock(mutex_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ServiceError(404, "unknown_session", "no session '" + id + "'", {{"session_id", id}});
  return it->second;
}

void SessionManager::append_log(const Session& s, const nlohmann::json& line) const {
  if (options_.session_dir.empty()) return;
  const auto path = options_.session_dir / (s.id + ".jsonl");
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot write session log " + path.string());
  out << line.dump() << '\n';
  out.flush();
}

nlohmann::json SessionManager::summary_locked(const Session& s) const {
  return {{"schema_version", kSchemaVersion},
          {"session_id", s.id},
          {"subject", s.subject_id},
          {"policy", s.policy_name},
          {"seed", s.seed},
          {"initial_state_index", s.initial_index},
          {"created_at", s.created_at},
          {"decision_step", s.state.decision_step},
          {"clock_hour", s.state.clock_hour},
          {"done", s.done()},
          {"history", window_history(s.state.window)},
          {"running", running_summary(s.history)}};
}

nlohmann::json SessionManager::create(const nlohmann::json& request) {
  expire_idle();
  const auto subject_id = required<std::string>(request, "subject");
  const auto policy_name = required<std::string>(request, "policy");
  const auto seed = required<std::int64_t>(request, "seed");
  const auto index = required<std::int64_t>(request, "initial_state_index");
  const SubjectContext& subj = subject(subject_id);
  const PolicyHandle& pol = policy(policy_name);
  if (seed < 0) throw ServiceError(422, "bad_seed", "seed must be nonnegative", {{"field", "seed"}});
  if (index < 0 || static_cast<std::size_t>(index) >= subj.initial_states.size())
    throw ServiceError(422, "bad_index",
                       "initial_state_index must lie in [0," + std::to_string(subj.initial_states.size()) + ")",
                       {{"field", "initial_state_index"}, {"count", subj.initial_states.size()}});

  auto s = std::make_shared<Session>();
  s->id = new_session_id();
  s->subject_id = subject_id;
  s->policy_name = policy_name;
  s->seed = static_cast<std::uint64_t>(seed);
  s->initial_index = static_cast<std::size_t>(index);
  s->created_at = utc_now();
  s->subject = &subj;
  s->policy = &pol;
  s->state = subj.env->reset(subj.initial_states[s->initial_index], agents::episode_env_seed(s->seed, s->initial_index));
  s->policy_rng.seed(agents::episode_policy_seed(s->seed, s->initial_index));
  s->last_access = now();
  append_log(*s, {{"kind", "session"},
                  {"schema_version", kSchemaVersion},
                  {"session_id", s->id},
                  {"subject", s->subject_id},
                  {"policy", s->policy_name},
                  {"seed", s->seed},
                  {"initial_state_index", s->initial_index},
                  {"created_at", s->created_at}});
  nlohmann::json out = summary_locked(*s);
  std::unique_lock lock(mutex_);
  sessions_[s->id] = s;
  return out;
}

nlohmann::json SessionManager::recommendation(const std::string& id) {
  const auto s = find(id);
  std::lock_guard lock(s->mutex);
  s->last_access = now();
  throw_if_done(id, s->done());
  Rng rng = s->policy_rng;  // copy: a read must not advance the stream
  const RawActionVector raw = s->policy->policy->act(s->state.window, rng);
  const env::StepResult preview = s->subject->env->step(s->state, raw);
  std::vector<double> forecast(preview.forecast.values.begin(), preview.forecast.values.end());
  return {{"schema_version", kSchemaVersion},
          {"session_id", s->id},
          {"decision_step", s->state.decision_step},
          {"action", env::to_json(preview.action)},
          {"raw_action", std::vector<double>(raw.begin(), raw.end())},
          {"rationale",
           {{"reward_breakdown", reward::to_json(preview.breakdown)},
            {"reward_scaled", preview.reward_scaled},
            {"forecast", forecast}}}};
}

nlohmann::json SessionManager::step(const std::string& id, const nlohmann::json& request) {
  const auto s = find(id);
  std::lock_guard lock(s->mutex);
  s->last_access = now();
  throw_if_done(id, s->done());
  const auto mode = required<std::string>(request, "mode");
  if (mode != "accept" && mode != "override")
    throw ServiceError(400, "invalid_request", "mode must be 'accept' or 'override'", {{"field", "mode"}});
  std::optional<BehavioralAction> override_action;
  if (mode == "override") override_action = parse_override(request);

  // The policy stream advances on every step so accepted and overridden
  // hours keep later recommendations aligned with a plain rollout.
  Rng rng = s->policy_rng;
  const RawActionVector raw = s->policy->policy->act(s->state.window, rng);
  env::StepResult r = override_action ? s->subject->env->step(s->state, *override_action)
                                      : s->subject->env->step(s->state, raw);
  s->policy_rng = rng;
  s->state = r.next_state;
  s->history.push_back(r);

  nlohmann::json record = env::step_record(r);
  append_log(*s, {{"kind", "step"}, {"mode", mode}, {"action", env::to_json(r.action)}, {"record", record}});
  record["schema_version"] = kSchemaVersion;
  record["session_id"] = s->id;
  record["mode"] = mode;
  record["running"] = running_summary(s->history);
  return record;
}

nlohmann::json SessionManager::trajectory(const std::string& id) {
  const auto s = find(id);
  std::lock_guard lock(s->mutex);
  s->last_access = now();
  nlohmann::json steps = nlohmann::json::array();
  for (const env::StepResult& r : s->history) steps.push_back(env::step_record(r));
  const StateWindow& initial = s->subject->initial_states[s->initial_index].window;
  return {{"schema_version", kSchemaVersion},
          {"session_id", s->id},
          {"subject", s->subject_id},
          {"policy", s->policy_name},
          {"seed", s->seed},
          {"initial_state_index", s->initial_index},
          {"history", window_history(initial)},
          {"steps", steps},
          {"simulated_glucose", env::simulated_glucose(s->history)},
          {"running", running_summary(s->history)},
          {"done", s->done()}};
}

nlohmann::json SessionManager::summary(const std::string& id) {
  const auto s = find(id);
  std::lock_guard lock(s->mutex);
  s->last_access = now();
  return summary_locked(*s);
}

nlohmann::json SessionManager::policies() const {
  nlohmann::json list = nlohmann::json::array();
  for (const PolicyHandle& p : policies_) list.push_back({{"name", p.name}, {"description", p.description}});
  nlohmann::json subjects = nlohmann::json::array();
  for (const SubjectContext& s : subjects_)
    subjects.push_back({{"id", s.id}, {"initial_states", s.initial_states.size()}});
  return {{"schema_version", kSchemaVersion}, {"policies", list}, {"subjects", subjects}};
}

nlohmann::json SessionManager::health() const {
  return {{"schema_version", kSchemaVersion}, {"status", "ok"}, {"sessions", session_count()}};
}

std::size_t SessionManager::session_count() const {
  std::shared_lock lock(mutex_);
  return sessions_.size();
}

std::size_t SessionManager::expire_idle() {
  const auto cutoff = now() - options_.idle_timeout;
  std::vector<std::shared_ptr<Session>> expired;
  {
    std::unique_lock lock(mutex_);
    for (auto it = sessions_.begin(); it != sessions_.end();) {
      // try_lock: a session busy with a request is not idle.
      std::unique_lock<std::mutex> busy(it->second->mutex, std::try_to_lock);
      if (busy.owns_lock() && it->second->last_access < cutoff) {
        expired.push_back(it->second);
        it = sessions_.erase(it);
      } else {
        ++it;
      }
    }
  }
  for (const auto& s : expired) {
    if (!options_.session_dir.empty()) {
      std::error_code ec;
      std::filesystem::remove(options_.session_dir / (s->id + ".jsonl"), ec);
    }
  }
  return expired.size();
}

std::size_t SessionManager::resume() {
  if (options_.session_dir.empty() || !std::filesystem::exists(options_.session_dir)) return 0;
  std::size_t restored = 0;
  for (const auto& entry : std::filesystem::directory_iterator(options_.session_dir)) {
    if (entry.path().extension() != ".jsonl") continue;
    try {
      std::ifstream in(entry.path());
      std::string line;
      if (!std::getline(in, line)) continue;
      const nlohmann::json head = nlohmann::json::parse(line);
      if (head.at("kind") != "session") throw ValidationError("first line is not a session header");
      auto s = std::make_shared<Session>();
      s->id = head.at("session_id").get<std::string>();
      s->subject_id = head.at("subject").get<std::string>();
      s->policy_name = head.at("policy").get<std::string>();
      s->seed = head.at("seed").get<std::uint64_t>();
      s->initial_index = head.at("initial_state_index").get<std::size_t>();
      s->created_at = head.at("created_at").get<std::string>();
      s->subject = &subject(s->subject_id);
      s->policy = &policy(s->policy_name);
      if (s->initial_index >= s->subject->initial_states.size()) throw ValidationError("initial state index out of range");
      s->state = s->subject->env->reset(s->subject->initial_states[s->initial_index],
                                        agents::episode_env_seed(s->seed, s->initial_index));
      s->policy_rng.seed(agents::episode_policy_seed(s->seed, s->initial_index));
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const nlohmann::json j = nlohmann::json::parse(line);
        const RawActionVector raw = s->policy->policy->act(s->state.window, s->policy_rng);
        env::StepResult r = j.at("mode") == "override" ? s->subject->env->step(s->state, env::action_from_json(j.at("action")))
                                                       : s->subject->env->step(s->state, raw);
        if (r.reward_scaled != j.at("record").at("reward_scaled").get<double>())
          throw ValidationError("replayed step " + std::to_string(s->history.size() + 1) + " does not match the log");
        s->state = r.next_state;
        s->history.push_back(std::move(r));
      }
      s->last_access = now();
      std::unique_lock lock(mutex_);
      sessions_[s->id] = s;
      ++restored;
    } catch (const std::exception& e) {
      std::cerr << "warning: could not resume " << entry.path().string() << ": " << e.what() << '\n';
    }
  }
  return restored;
}

std::uint64_t SessionManager::state_hash(const std::string& id) {
  const auto s = find(id);
  std::lock_guard lock(s->mutex);
  std::uint64_t h = env::trajectory_hash(s->history);
  const std::string state = env::to_json(s->state).dump();
  for (unsigned char c : state) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream rng_state;
  rng_state << s->policy_rng;
  for (unsigned char c : rng_state.str()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ------------------------------------------------------------------ HTTP

struct HttpServer::Impl {
  SessionManager& manager;
  httplib::Server server;
  explicit Impl(SessionManager& m) : manager(m) {
    // SO_REUSEADDR only; httplib's default also sets SO_REUSEPORT, which lets a
    // second server silently share a busy port.
    server.set_socket_options([](auto sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
    });
  }
};

namespace {

void send(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <class F>
void guarded(httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const ServiceError& e) {
    send(res, e.status(), e.body());
  } catch (const nlohmann::json::exception& e) {
    send(res, 400, ServiceError(400, "invalid_json", e.what()).body());
  } catch (const ValidationError& e) {
    send(res, 422, ServiceError(422, "invalid_request", e.what()).body());
  } catch (const std::exception& e) {
    send(res, 500, ServiceError(500, "internal_error", e.what()).body());
  }
}

nlohmann::json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return nlohmann::json::object();
  return nlohmann::json::parse(req.body);
}

}  // namespace

HttpServer::HttpServer(SessionManager& manager) : impl_(std::make_unique<Impl>(manager)) {
  auto& srv = impl_->server;
  SessionManager& m = manager;
  srv.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Headers", "Content-Type"},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  srv.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  srv.Get("/health", [&m](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { send(res, 200, m.health()); });
  });
  srv.Get("/policies", [&m](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { send(res, 200, m.policies()); });
  });
  srv.Post("/sessions", [&m](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send(res, 201, m.create(parse_body(req))); });
  });
  srv.Get(R"(/sessions/([^/]+))", [&m](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send(res, 200, m.summary(req.matches[1])); });
  });
  srv.Get(R"(/sessions/([^/]+)/recommendation)", [&m](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send(res, 200, m.recommendation(req.matches[1])); });
  });
  srv.Post(R"(/sessions/([^/]+)/step)", [&m](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send(res, 200, m.step(req.matches[1], parse_body(req))); });
  });
  srv.Get(R"(/sessions/([^/]+)/trajectory)", [&m](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send(res, 200, m.trajectory(req.matches[1])); });
  });
}

HttpServer::~HttpServer() { stop(); }

bool HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    port_ = impl_->server.bind_to_any_port(host);
  } else {
    port_ = impl_->server.bind_to_port(host, port) ? port : -1;
  }
  return port_ > 0;
}

void HttpServer::serve() {
  if (port_ <= 0) throw std::logic_error("serve() before a successful bind()");
  impl_->server.listen_after_bind();
}

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace guide::service
