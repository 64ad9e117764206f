#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <thread>

#include "guide/service.hpp"
#include "support.hpp"

// after Eigen: resolv.h defines a macro that collides with Eigen parameter names
#include <httplib.h>

using namespace guide;
using namespace guide::service;
using nlohmann::json;

namespace {

const testsupport::World& world() {
  static const testsupport::World w = testsupport::make_world(1, 30, 7);
  return w;
}

std::vector<SubjectContext> subjects() {
  const auto& w = world();
  SubjectContext s{"S01", w.env, w.eval_states};
  // a copy of state 0 ending high with no recent bolus
  data::InitialState high = w.eval_states[0];
  for (const auto& st : w.train_states) {
    if (st.window.minutes_since_inject[71] > 180) {
      high = st;
      break;
    }
  }
  high.window.glucose[71] = 250;
  high.extended_glucose.back() = 250;
  SubjectContext h{"HIGH", w.env, {high}};
  return {s, h};
}

std::vector<PolicyHandle> policies() {
  return {{"random", "uniform actions", std::make_shared<agents::RandomPolicy>()},
          {"heuristic", "rule of thumb", std::make_shared<agents::HeuristicPolicy>()}};
}

json create_body(const std::string& policy = "random", std::int64_t seed = 3, std::int64_t index = 1,
                 const std::string& subject = "S01") {
  return {{"subject", subject}, {"seed", seed}, {"policy", policy}, {"initial_state_index", index}};
}

ServiceOptions persisted(const std::filesystem::path& dir) {
  ServiceOptions o;
  o.session_dir = dir;
  return o;
}

template <class F>
int status_of(F&& f) {
  try {
    f();
  } catch (const ServiceError& e) {
    return e.status();
  }
  return 200;
}

}  // namespace

TEST_CASE("create") {
  SessionManager m(subjects(), policies());
  const json a = m.create(create_body());
  const json b = m.create(create_body());
  CHECK(a.at("session_id") != b.at("session_id"));
  CHECK(a.at("decision_step") == 0);
  CHECK(a.at("done") == false);
  CHECK(a.at("running").is_null());
  CHECK(a.at("history").at("glucose").size() == 72);
  CHECK(a.at("history") == b.at("history"));
  CHECK(a.at("clock_hour") == b.at("clock_hour"));
  CHECK(a.at("schema_version") == kSchemaVersion);
  CHECK(m.session_count() == 2);

  try {
    m.create(create_body("random", 3, 1, "S99"));
    FAIL("expected an error");
  } catch (const ServiceError& e) {
    CHECK(e.status() == 404);
    CHECK(e.code() == "unknown_subject");
    CHECK(e.body().at("error").at("code") == "unknown_subject");
  }
  CHECK(status_of([&] { m.create(create_body("nope")); }) == 404);
  CHECK(status_of([&] { m.create(create_body("random", 3, 10)); }) == 422);
  CHECK(status_of([&] { m.create(create_body("random", 3, -1)); }) == 422);
  CHECK(status_of([&] { m.create(json{{"subject", "S01"}}); }) == 400);
  CHECK(status_of([&] { m.create(json{{"subject", 4}, {"seed", 1}, {"policy", "random"}, {"initial_state_index", 0}}); }) == 400);
}

TEST_CASE("reads never mutate") {
  SessionManager m(subjects(), policies());
  const std::string id = m.create(create_body()).at("session_id");
  m.step(id, {{"mode", "accept"}});
  const std::uint64_t h = m.state_hash(id);
  const json r1 = m.recommendation(id);
  const json r2 = m.recommendation(id);
  m.summary(id);
  m.trajectory(id);
  CHECK(r1 == r2);
  CHECK(m.state_hash(id) == h);
  CHECK(r1.at("rationale").at("forecast").size() == 12);
  CHECK(r1.at("rationale").contains("reward_breakdown"));
  m.step(id, {{"mode", "accept"}});
  CHECK(m.state_hash(id) != h);
  CHECK(status_of([&] { m.recommendation("missing"); }) == 404);
}

TEST_CASE("heuristic recommends a correction bolus at 250 mg/dL") {
  SessionManager m(subjects(), policies());
  const std::string id = m.create(create_body("heuristic", 1, 0, "HIGH")).at("session_id");
  CHECK(m.recommendation(id).at("action").at("type") == "INJECT");
}

TEST_CASE("24 steps, then 410") {
  SessionManager m(subjects(), policies());
  const std::string id = m.create(create_body()).at("session_id");
  std::vector<double> forecasts;
  for (int t = 1; t <= 24; ++t) {
    const json r = m.step(id, {{"mode", "accept"}});
    CHECK(r.at("done") == (t == 24));
    CHECK(r.at("forecast").size() == 12);
    for (double g : r.at("forecast")) forecasts.push_back(g);
    // running TIR is the glycemic summary of every forecast so far, exactly
    const metrics::GlycemicSummary s = metrics::glycemic_summary(forecasts);
    CHECK(r.at("running").at("tir_pct").get<double>() == s.tir_pct);
    CHECK(r.at("running").at("tbr_pct").get<double>() == s.tbr_pct);
    CHECK(m.summary(id).at("decision_step") == t);
  }
  CHECK(m.summary(id).at("done") == true);
  CHECK(status_of([&] { m.step(id, {{"mode", "accept"}}); }) == 410);
  CHECK(status_of([&] { m.recommendation(id); }) == 410);
  const json traj = m.trajectory(id);
  CHECK(traj.at("steps").size() == 24);
  CHECK(traj.at("simulated_glucose").size() == 288);
  CHECK(traj.at("history").at("glucose").size() == 72);
}

TEST_CASE("overrides are validated, not clamped") {
  SessionManager m(subjects(), policies());
  const std::string id = m.create(create_body()).at("session_id");
  const std::uint64_t h = m.state_hash(id);
  try {
    m.step(id, {{"mode", "override"}, {"type", "EAT"}, {"magnitude", 200}, {"slot", 3}});
    FAIL("expected 422");
  } catch (const ServiceError& e) {
    CHECK(e.status() == 422);
    CHECK(e.detail().at("range") == json::array({5.0, 50.0}));
    CHECK(std::string(e.what()).find("[5,50]") != std::string::npos);
  }
  CHECK(status_of([&] { m.step(id, {{"mode", "override"}, {"type", "INJECT"}, {"magnitude", 1}}); }) == 422);
  CHECK(status_of([&] { m.step(id, {{"mode", "override"}, {"type", "EAT"}, {"magnitude", 20}, {"slot", 12}}); }) == 422);
  CHECK(status_of([&] { m.step(id, {{"mode", "override"}, {"type", "SNACK"}, {"magnitude", 20}}); }) == 422);
  CHECK(status_of([&] { m.step(id, {{"mode", "maybe"}}); }) == 400);
  CHECK(m.state_hash(id) == h);

  const json r = m.step(id, {{"mode", "override"}, {"type", "EAT"}, {"magnitude", 30}, {"slot", 6}});
  CHECK(r.at("action").at("type") == "EAT");
  CHECK(r.at("mode") == "override");
  bool found = false;
  for (const auto& e : r.at("applied_events"))
    if (e.at("source") == "agent" && e.at("tick_offset") == 6 && e.at("magnitude") == 30.0) found = true;
  CHECK(found);

  const BehavioralAction nothing = parse_override({{"type", "NOTHING"}});
  CHECK(nothing.type() == ActionType::Nothing);
  CHECK(parse_override({{"type", "INJECT"}, {"magnitude", 15}, {"slot", 0}}).insulin_amount == 15.0);
}

TEST_CASE("accepted path equals a plain rollout with the episode seeds") {
  SessionManager m(subjects(), policies());
  const auto& w = world();
  for (std::uint64_t seed : {0u, 7u, 42u}) {
    const std::size_t index = seed % w.eval_states.size();
    const std::string id = m.create(create_body("random", static_cast<std::int64_t>(seed), static_cast<std::int64_t>(index))).at("session_id");
    std::vector<json> served;
    for (int t = 0; t < 24; ++t) served.push_back(m.step(id, {{"mode", "accept"}}));
    agents::RandomPolicy policy;
    Rng rng(agents::episode_policy_seed(seed, index));
    const agents::EpisodeOutcome o =
        agents::run_episode(*w.env, w.eval_states[index], agents::episode_env_seed(seed, index), policy, rng);
    for (int t = 0; t < 24; ++t) {
      CHECK(served[t].at("reward_scaled").get<double>() == o.steps[t].reward_scaled);
      CHECK(served[t].at("forecast") == json(std::vector<double>(o.steps[t].forecast.values.begin(), o.steps[t].forecast.values.end())));
    }
    CHECK(served.back().at("running").at("tir_pct").get<double>() == o.glycemic.tir_pct);
  }
}

TEST_CASE("an override keeps later recommendations on the plain-rollout stream") {
  SessionManager m(subjects(), policies());
  const std::string a = m.create(create_body()).at("session_id");
  const std::string b = m.create(create_body()).at("session_id");
  m.step(a, {{"mode", "accept"}});
  m.step(b, {{"mode", "override"}, {"type", "NOTHING"}});
  CHECK(m.recommendation(a).at("raw_action") == m.recommendation(b).at("raw_action"));
}

TEST_CASE("sessions persist and resume") {
  const auto dir = testsupport::temp_dir("service");
  std::string id;
  json before;
  std::uint64_t hash = 0;
  {
    SessionManager m(subjects(), policies(), persisted(dir));
    id = m.create(create_body("random", 5, 2)).at("session_id");
    m.step(id, {{"mode", "accept"}});
    m.step(id, {{"mode", "override"}, {"type", "INJECT"}, {"magnitude", 4.5}, {"slot", 2}});
    m.step(id, {{"mode", "accept"}});
    before = m.trajectory(id);
    hash = m.state_hash(id);
  }
  SessionManager again(subjects(), policies(), persisted(dir));
  CHECK(again.resume() == 1);
  CHECK(again.trajectory(id) == before);
  CHECK(again.state_hash(id) == hash);

  // a tampered log is skipped with a warning
  std::ofstream(dir / "bogus.jsonl") << "{\"kind\":\"step\"}\n";
  SessionManager third(subjects(), policies(), persisted(dir));
  CHECK(third.resume() == 1);
  std::filesystem::remove_all(dir);
}

TEST_CASE("idle sessions expire") {
  const auto dir = testsupport::temp_dir("expire");
  auto now = std::make_shared<Clock::time_point>(Clock::time_point{} + std::chrono::hours(1000));
  ServiceOptions opt{dir, std::chrono::seconds(60), [now] { return *now; }};
  SessionManager m(subjects(), policies(), opt);
  const std::string old_id = m.create(create_body()).at("session_id");
  *now += std::chrono::seconds(50);
  const std::string fresh = m.create(create_body()).at("session_id");
  *now += std::chrono::seconds(20);
  CHECK(m.expire_idle() == 1);
  CHECK(m.session_count() == 1);
  CHECK_FALSE(std::filesystem::exists(dir / (old_id + ".jsonl")));
  CHECK(std::filesystem::exists(dir / (fresh + ".jsonl")));
  CHECK(status_of([&] { m.summary(old_id); }) == 404);
  // an access refreshes the idle clock
  *now += std::chrono::seconds(30);
  m.summary(fresh);
  *now += std::chrono::seconds(50);
  CHECK(m.expire_idle() == 0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("property: concurrent sessions stay isolated") {
  SessionManager m(subjects(), policies());
  const int n = 6;
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back(m.create(create_body("random", 100 + i, i)).at("session_id"));
  std::vector<std::thread> threads;
  std::atomic<int> errors{0};
  for (int i = 0; i < n; ++i) {
    threads.emplace_back([&, i] {
      try {
        for (int t = 0; t < 24; ++t) {
          m.recommendation(ids[i]);
          m.step(ids[i], {{"mode", "accept"}});
        }
      } catch (...) {
        ++errors;
      }
    });
  }
  for (auto& t : threads) t.join();
  CHECK(errors == 0);
  // each matches a sequential replay of the same session
  SessionManager solo(subjects(), policies());
  for (int i = 0; i < n; ++i) {
    const std::string id = solo.create(create_body("random", 100 + i, i)).at("session_id");
    for (int t = 0; t < 24; ++t) solo.step(id, {{"mode", "accept"}});
    CHECK(solo.trajectory(id).at("simulated_glucose") == m.trajectory(ids[i]).at("simulated_glucose"));
  }
}

TEST_CASE("HTTP surface") {
  SessionManager m(subjects(), policies());
  HttpServer server(m);
  REQUIRE(server.bind("127.0.0.1", 0));
  std::thread t([&] { server.serve(); });
  httplib::Client c("127.0.0.1", server.port());
  c.set_connection_timeout(5);

  auto res = c.Get("/health");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(json::parse(res->body).at("status") == "ok");
  CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");

  res = c.Get("/policies");
  REQUIRE(res);
  CHECK(json::parse(res->body).at("policies").size() == 2);
  CHECK(json::parse(res->body).at("subjects")[0].at("id") == "S01");

  res = c.Post("/sessions", create_body().dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == 201);
  const std::string id = json::parse(res->body).at("session_id");

  res = c.Post("/sessions", create_body("random", 1, 0, "S42").dump(), "application/json");
  CHECK(res->status == 404);
  CHECK(json::parse(res->body).at("error").at("code") == "unknown_subject");
  res = c.Post("/sessions", "{not json", "application/json");
  CHECK(res->status == 400);

  res = c.Get(("/sessions/" + id + "/recommendation").c_str());
  CHECK(res->status == 200);
  const json rec = json::parse(res->body);
  res = c.Get(("/sessions/" + id + "/recommendation").c_str());
  CHECK(json::parse(res->body) == rec);

  res = c.Post(("/sessions/" + id + "/step").c_str(),
               json{{"mode", "override"}, {"type", "EAT"}, {"magnitude", 200}, {"slot", 0}}.dump(), "application/json");
  CHECK(res->status == 422);
  CHECK(json::parse(res->body).at("error").at("detail").at("range") == json::array({5.0, 50.0}));

  for (int i = 0; i < 24; ++i) {
    res = c.Post(("/sessions/" + id + "/step").c_str(), R"({"mode":"accept"})", "application/json");
    CHECK(res->status == 200);
  }
  res = c.Post(("/sessions/" + id + "/step").c_str(), R"({"mode":"accept"})", "application/json");
  CHECK(res->status == 410);
  res = c.Get(("/sessions/" + id + "/trajectory").c_str());
  CHECK(json::parse(res->body).at("steps").size() == 24);
  res = c.Get(("/sessions/" + id).c_str());
  CHECK(json::parse(res->body).at("done") == true);
  res = c.Get("/sessions/nope/trajectory");
  CHECK(res->status == 404);

  server.stop();
  t.join();
}

TEST_CASE("a busy port is reported, not shared") {
  SessionManager m(subjects(), policies());
  HttpServer a(m), b(m);
  REQUIRE(a.bind("127.0.0.1", 0));
  CHECK_FALSE(b.bind("127.0.0.1", a.port()));
}
