#include "guide/cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <csignal>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "guide/fixtures.hpp"
#include "guide/metrics.hpp"
#include "guide/predictor.hpp"
#include "guide/service.hpp"

namespace guide::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  const auto number = [&](const std::string& s) -> std::uint64_t {
    if (s.empty() || !std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); }))
      throw UsageError("bad seed list '" + text + "' (expected e.g. 0..4 or 0,1,2)");
    return std::stoull(s);
  };
  const auto range = text.find("..");
  if (range != std::string::npos) {
    const std::uint64_t lo = number(text.substr(0, range));
    const std::uint64_t hi = number(text.substr(range + 2));
    if (hi < lo) throw UsageError("seed range '" + text + "' is empty");
    if (hi - lo > 100000) throw UsageError("seed range '" + text + "' is too long");
    for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
    return seeds;
  }
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) seeds.push_back(number(part));
  if (seeds.empty()) throw UsageError("seed list is empty");
  return seeds;
}

void RunConfig::validate(bool need_data_dir) const {
  if (seeds.empty()) throw UsageError("at least one seed is required");
  if (predictor != "surrogate" && predictor != "autoregressive")
    throw UsageError("predictor must be 'surrogate' or 'autoregressive', got '" + predictor + "'");
  if (run_id.empty() || run_id.find('/') != std::string::npos) throw UsageError("run id must be a plain name");
  if (need_data_dir && (data_dir.empty() || !fs::is_directory(data_dir)))
    throw UsageError("data directory '" + data_dir.string() + "' does not exist");
  if (!reward_config.empty() && !fs::exists(reward_config))
    throw UsageError("reward config '" + reward_config.string() + "' does not exist");
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  if (j.contains("subjects")) c.subjects = j.at("subjects").get<std::vector<std::string>>();
  if (j.contains("algorithm")) c.algorithm = j.at("algorithm").get<std::string>();
  if (j.contains("seeds")) {
    const json& s = j.at("seeds");
    c.seeds = s.is_string() ? parse_seeds(s.get<std::string>()) : s.get<std::vector<std::uint64_t>>();
  }
  if (j.contains("data_dir")) c.data_dir = j.at("data_dir").get<std::string>();
  if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("run_id")) c.run_id = j.at("run_id").get<std::string>();
  if (j.contains("predictor")) c.predictor = j.at("predictor").get<std::string>();
  if (j.contains("reward_config")) c.reward_config = j.at("reward_config").get<std::string>();
  if (j.contains("agent")) c.agent_overrides = j.at("agent");
  return c;
}

json to_json(const RunConfig& c) {
  return {{"subjects", c.subjects},
          {"algorithm", c.algorithm},
          {"seeds", c.seeds},
          {"data_dir", c.data_dir.string()},
          {"out_dir", c.out_dir.string()},
          {"run_id", c.run_id},
          {"predictor", c.predictor},
          {"reward_config", c.reward_config.string()},
          {"agent", c.agent_overrides}};
}

// ------------------------------------------------------------- workspace

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

std::string file_checksum(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return hex(fnv1a(s.str()));
}

std::string job_name(const std::string& subject, std::uint64_t seed) {
  return subject + "-seed" + std::to_string(seed);
}

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
};

MeanSd mean_sd(const std::vector<double>& v) {
  if (v.empty()) return {};
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0};
}

json to_json(const MeanSd& m) { return {{"mean", m.mean}, {"sd", m.sd}}; }

}  // namespace

std::vector<std::string> run_subjects(const fs::path& run_dir) {
  const fs::path manifest = run_dir / "run.json";
  if (!fs::exists(manifest)) throw UsageError("no ingested run at " + run_dir.string() + " (run `guide ingest` first)");
  return read_json(manifest).at("subjects").get<std::vector<std::string>>();
}

reward::RewardConfig run_reward_config(const fs::path& run_dir) {
  const fs::path path = run_dir / "reward.json";
  if (!fs::exists(path)) return reward::default_config();
  return reward::config_from_json(read_json(path));
}

SubjectWorkspace load_subject(const fs::path& run_dir, const std::string& id,
                              const reward::RewardConfig& reward_config) {
  const fs::path record_path = run_dir / "records" / (id + ".json");
  if (!fs::exists(record_path)) throw UsageError("subject '" + id + "' was not ingested in " + run_dir.string());
  SubjectWorkspace w;
  w.id = id;
  w.record = data::record_from_json(read_json(record_path));
  const json meta = read_json(run_dir / "subjects" / (id + ".json"));
  w.split = data::split_from_json(meta.at("split"));
  w.basal_rate = meta.at("basal_rate").get<double>();
  env::EnvConfig config;
  config.reward = reward_config;
  config.basal_rate = w.basal_rate;
  w.env = std::make_shared<env::Environment>(predictor::load_predictor(read_json(run_dir / "predictors" / (id + ".json"))),
                                             config);
  w.train_states = data::build_initial_states(w.record, w.split.rl_train, kTrainStates);
  w.eval_states = data::build_initial_states(w.record, w.split.rl_eval, kEvalStates);
  if (w.train_states.empty() || w.eval_states.empty())
    throw UsageError("subject '" + id + "' has too little clean data for initial states");
  return w;
}

std::vector<metrics::BehaviorEvent> record_events(const data::SubjectRecord& record, data::TickRange range) {
  std::vector<metrics::BehaviorEvent> events;
  for (std::size_t i = range.begin; i < range.end && i < record.size(); ++i) {
    const double hours = static_cast<double>(i - range.begin) / kTicksPerHour;
    if (record.ticks[i].carbs > 0.0) events.push_back({hours, metrics::EventKind::Meal, record.ticks[i].carbs});
    if (record.ticks[i].bolus > 0.0) events.push_back({hours, metrics::EventKind::Bolus, record.ticks[i].bolus});
  }
  return events;
}

// -------------------------------------------------------------- commands

namespace {

struct Io {
  std::ostream& out;
  std::ostream& err;
};

RunConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  return run_config_from_json(read_json(path));
}

void require_fresh(const fs::path& path, bool force) {
  if (fs::exists(path) && !force)
    throw UsageError(path.string() + " already exists (pass --force to overwrite)");
}

std::vector<std::string> pick_subjects(const RunConfig& c) {
  const std::vector<std::string> all = run_subjects(c.run_dir());
  if (c.subjects.empty()) return all;
  for (const std::string& s : c.subjects) {
    if (std::find(all.begin(), all.end(), s) == all.end())
      throw UsageError("subject '" + s + "' is not part of run " + c.run_id);
  }
  return c.subjects;
}

// fixtures ---------------------------------------------------------------

struct FixturesArgs {
  std::string dir = "fixtures";
  int subjects = 5;
  int days = 30;
  std::uint64_t seed = 7;
  bool force = false;
};

int cmd_fixtures(const FixturesArgs& a, Io io) {
  if (a.subjects < 1 || a.subjects > 99) throw UsageError("--subjects must lie in 1..99");
  if (a.days < 2) throw UsageError("--days must be at least 2");
  if (fs::exists(a.dir) && !fs::is_empty(a.dir) && !a.force)
    throw UsageError(a.dir + " is not empty (pass --force to overwrite)");
  const auto ids = fixtures::write_fixtures(a.dir, a.subjects, a.days, a.seed);
  for (const std::string& id : ids) io.out << "wrote " << (fs::path(a.dir) / (id + ".csv")).string() << '\n';
  return kOk;
}

// ingest -----------------------------------------------------------------

struct IngestArgs {
  bool strict = false;
  bool force = false;
  double ridge_lambda = 1.0;
};

int cmd_ingest(const RunConfig& c, const IngestArgs& a, Io io) {
  c.validate(true);
  const fs::path run = c.run_dir();
  require_fresh(run / "run.json", a.force);
  const reward::RewardConfig reward_config =
      c.reward_config.empty() ? reward::default_config() : reward::config_from_json(read_json(c.reward_config));

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(c.data_dir)) {
    if (entry.path().extension() == ".csv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (!c.subjects.empty()) {
    std::vector<fs::path> picked;
    for (const std::string& s : c.subjects) {
      const fs::path p = c.data_dir / (s + ".csv");
      if (!fs::exists(p)) throw UsageError("no CSV for subject '" + s + "' in " + c.data_dir.string());
      picked.push_back(p);
    }
    files = picked;
  }
  if (files.empty()) throw UsageError("no CSV files in " + c.data_dir.string());

  data::IngestOptions options;
  options.strict = a.strict;
  std::vector<data::SubjectRecord> records;
  int failures = 0;
  for (const fs::path& f : files) {
    try {
      records.push_back(data::ingest_csv(f, {}, options));
    } catch (const std::exception& e) {
      io.err << "error: " << f.string() << ": " << e.what() << '\n';
      ++failures;
    }
  }
  if (failures > 0) {
    io.err << failures << " file(s) failed to ingest; nothing written\n";
    return kUserError;
  }

  std::vector<std::string> ids;
  for (const data::SubjectRecord& r : records) {
    const data::SplitPlan split = data::make_split(r);
    double basal = 0.0;
    for (std::size_t i = split.predictor_train.begin; i < split.predictor_train.end; ++i) basal += r.ticks[i].basal;
    basal /= static_cast<double>(std::max<std::size_t>(split.predictor_train.size(), 1));

    json predictor_json;
    if (c.predictor == "surrogate") {
      predictor::SurrogateParams params = fixtures::load_subject_params(c.data_dir, r.subject_id);
      predictor_json = predictor::SurrogatePredictor(params).to_json();
    } else {
      predictor_json = predictor::AutoregressivePredictor::fit(r, split.predictor_train, a.ridge_lambda).to_json();
    }
    write_json(run / "records" / (r.subject_id + ".json"), data::to_json(r));
    write_json(run / "subjects" / (r.subject_id + ".json"),
               {{"subject", r.subject_id},
                {"ticks", r.size()},
                {"filled", r.filled_count()},
                {"segments", r.segment_count()},
                {"sleep_synthesized", r.sleep_synthesized},
                {"basal_rate", basal},
                {"split", data::to_json(split)}});
    write_json(run / "predictors" / (r.subject_id + ".json"), predictor_json);
    ids.push_back(r.subject_id);
    io.out << "ingested " << r.subject_id << ": " << r.size() << " ticks, " << r.filled_count() << " filled, "
           << r.segment_count() << " segment(s)\n";
  }
  write_json(run / "reward.json", reward::to_json(reward_config));
  json manifest = to_json(c);
  manifest["subjects"] = ids;
  manifest["schema_version"] = 1;
  write_json(run / "run.json", manifest);
  return kOk;
}

// train ------------------------------------------------------------------

struct TrainArgs {
  int steps = -1;
  std::string hidden;
  std::size_t buffer_size = 4800;
  int parallel = 1;
  bool force = false;
};

agents::AgentConfig make_agent_config(const RunConfig& c, const TrainArgs& a) {
  const agents::Algorithm algo = agents::parse_algorithm(c.algorithm);
  json j = agents::to_json(agents::AgentConfig::defaults(algo));
  for (const auto& [k, v] : c.agent_overrides.items()) j[k] = v;
  j["algorithm"] = c.algorithm;
  agents::AgentConfig cfg = agents::agent_config_from_json(j);
  if (a.steps >= 0) {
    if (agents::is_offline(algo)) cfg.update_steps = a.steps;
    else cfg.epochs = a.steps;
    cfg.eval_interval = std::max(1, std::min(cfg.eval_interval, std::max(a.steps, 1)));
  }
  if (!a.hidden.empty()) {
    cfg.hidden.clear();
    std::stringstream ss(a.hidden);
    std::string part;
    while (std::getline(ss, part, ',')) {
      try {
        cfg.hidden.push_back(std::stoi(part));
      } catch (const std::exception&) {
        throw UsageError("bad --hidden list '" + a.hidden + "'");
      }
    }
  }
  cfg.validate();
  return cfg;
}

struct TrainJob {
  std::string subject;
  std::uint64_t seed = 0;
  std::string summary;
  bool diverged = false;
  std::string error;
};

agents::ReplayBuffer obtain_buffer(const SubjectWorkspace& ws, std::uint64_t seed, std::size_t size,
                                   const fs::path& path) {
  if (fs::exists(path)) {
    json header;
    agents::ReplayBuffer b = agents::ReplayBuffer::load(path, &header);
    if (b.size() == size) return b;
  }
  agents::ReplayBuffer b =
      agents::build_offline_buffer(*ws.env, ws.train_states, agents::BehaviorPolicy(), mix_seed(seed, 0x627566), size);
  fs::create_directories(path.parent_path());
  b.save(path, {{"subject", ws.id}, {"seed", seed}, {"behavior", "behavior"}, {"checksum", hex(b.checksum())}});
  return b;
}

void run_train_job(const RunConfig& c, const agents::AgentConfig& cfg, const TrainArgs& a, const SubjectWorkspace& ws,
                   TrainJob& job) {
  const fs::path run = c.run_dir();
  const std::string name = job_name(ws.id, job.seed);
  const fs::path model = run / "models" / c.algorithm / (name + ".policy.json");
  const fs::path curve = run / "curves" / c.algorithm / (name + ".csv");

  const std::vector<std::uint64_t> eval_seed{job.seed};
  const agents::Evaluator evaluator = [&](const agents::Policy& p) {
    return agents::evaluate(*ws.env, ws.eval_states, eval_seed, p);
  };
  std::optional<agents::ReplayBuffer> buffer;
  if (agents::is_offline(cfg.algorithm))
    buffer.emplace(obtain_buffer(ws, job.seed, a.buffer_size, run / "buffers" / (name + ".buf")));
  const agents::TrainResult r =
      agents::train(cfg, buffer ? &*buffer : nullptr, ws.env.get(), ws.train_states, job.seed, evaluator);

  write_json(model, r.policy.to_json());
  fs::create_directories(curve.parent_path());
  agents::write_curve_csv(r.curve, curve);
  std::ostringstream s;
  s << "trained " << c.algorithm << ' ' << name << " checksum " << file_checksum(model);
  if (buffer) s << " buffer " << hex(buffer->checksum());
  if (!r.curve.empty()) s << " eval_tir " << std::fixed << std::setprecision(2) << r.curve.back().eval_tir;
  job.summary = s.str();
  job.diverged = r.diverged;
  if (r.diverged) job.error = r.message + " (kept last good checkpoint)";
}

int cmd_train(const RunConfig& c, const TrainArgs& a, Io io) {
  c.validate(false);
  agents::parse_algorithm(c.algorithm);  // usage error before any work
  if (a.parallel < 1) throw UsageError("--parallel must be positive");
  if (a.buffer_size < 1) throw UsageError("--buffer-size must be positive");
  const agents::AgentConfig cfg = make_agent_config(c, a);
  const std::vector<std::string> subjects = pick_subjects(c);
  const reward::RewardConfig reward_config = run_reward_config(c.run_dir());

  std::vector<SubjectWorkspace> workspaces;
  for (const std::string& s : subjects) workspaces.push_back(load_subject(c.run_dir(), s, reward_config));
  std::vector<TrainJob> jobs;
  for (const std::string& s : subjects) {
    for (std::uint64_t seed : c.seeds) {
      require_fresh(c.run_dir() / "models" / c.algorithm / (job_name(s, seed) + ".policy.json"), a.force);
      TrainJob job;
      job.subject = s;
      job.seed = seed;
      jobs.push_back(job);
    }
  }

  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      TrainJob& job = jobs[i];
      const auto ws = std::find_if(workspaces.begin(), workspaces.end(),
                                   [&](const SubjectWorkspace& w) { return w.id == job.subject; });
      try {
        run_train_job(c, cfg, a, *ws, job);
      } catch (const std::exception& e) {
        job.error = e.what();
      }
    }
  };
  const int threads = std::min<int>(a.parallel, static_cast<int>(jobs.size()));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  int status = kOk;
  for (const TrainJob& job : jobs) {
    if (!job.summary.empty()) io.out << job.summary << '\n';
    if (!job.error.empty()) {
      io.err << "error: " << job_name(job.subject, job.seed) << ": " << job.error << '\n';
      status = kInternalFault;
    }
  }
  return status;
}

// evaluate ---------------------------------------------------------------

struct EvaluateArgs {
  std::vector<std::string> compare;
  bool force = false;
};

std::unique_ptr<agents::Policy> load_policy(const fs::path& run, const std::string& algo, const std::string& subject,
                                            std::uint64_t seed) {
  if (agents::parse_algorithm(algo) == agents::Algorithm::Random) return std::make_unique<agents::RandomPolicy>();
  const fs::path path = run / "models" / algo / (job_name(subject, seed) + ".policy.json");
  if (!fs::exists(path)) throw UsageError("missing checkpoint " + path.string() + " (run `guide train` first)");
  return agents::TrainedPolicy::from_json(read_json(path)).make_policy();
}

int cmd_compare(const RunConfig& c, const EvaluateArgs& a, Io io) {
  if (a.compare.size() < 2) throw UsageError("--compare needs at least two algorithms");
  std::vector<std::vector<double>> tir;
  for (const std::string& algo : a.compare) {
    agents::parse_algorithm(algo);
    const fs::path report = c.run_dir() / "eval" / algo / "report.json";
    if (!fs::exists(report)) throw UsageError("no evaluation report for " + algo + " (run `guide evaluate --algo " + algo + "`)");
    const json r = read_json(report);
    std::vector<double> v;
    for (const json& s : r.at("subjects")) {
      const auto t = s.at("per_episode").at("tir").get<std::vector<double>>();
      v.insert(v.end(), t.begin(), t.end());
    }
    tir.push_back(std::move(v));
  }
  for (std::size_t i = 1; i < tir.size(); ++i) {
    if (tir[i].size() != tir[0].size())
      throw UsageError("reports for " + a.compare[0] + " and " + a.compare[i] + " cover different episodes");
  }
  struct Pair {
    std::size_t i, j;
    metrics::WilcoxonResult w;
  };
  std::vector<Pair> pairs;
  std::vector<double> raw;
  for (std::size_t i = 0; i < tir.size(); ++i) {
    for (std::size_t j = i + 1; j < tir.size(); ++j) {
      metrics::WilcoxonResult w;
      try {
        w = metrics::wilcoxon_signed_rank(tir[i], tir[j]);
      } catch (const metrics::DegenerateSample&) {
        w.p_value = 1.0;  // identical samples
      }
      pairs.push_back({i, j, w});
      raw.push_back(w.p_value);
    }
  }
  const std::vector<double> adjusted = metrics::holm_bonferroni(raw);
  std::string stem;
  for (const std::string& algo : a.compare) stem += (stem.empty() ? "" : "_vs_") + algo;
  const fs::path json_path = c.run_dir() / "compare" / (stem + ".json");
  const fs::path csv_path = c.run_dir() / "compare" / (stem + ".csv");
  require_fresh(json_path, a.force);

  json rows = json::array();
  std::vector<std::vector<double>> matrix(tir.size(), std::vector<double>(tir.size(), 1.0));
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const Pair& p = pairs[k];
    matrix[p.i][p.j] = matrix[p.j][p.i] = adjusted[k];
    rows.push_back({{"a", a.compare[p.i]},
                    {"b", a.compare[p.j]},
                    {"statistic", p.w.statistic},
                    {"n", p.w.n},
                    {"exact", p.w.exact},
                    {"p_value", p.w.p_value},
                    {"p_holm", adjusted[k]},
                    {"mean_tir_a", mean_sd(tir[p.i]).mean},
                    {"mean_tir_b", mean_sd(tir[p.j]).mean}});
  }
  write_json(json_path, {{"schema_version", 1}, {"metric", "tir"}, {"episodes", tir[0].size()}, {"pairs", rows},
                         {"algorithms", a.compare}, {"holm_matrix", matrix}});
  std::ofstream csv(csv_path);
  csv << "algorithm";
  for (const std::string& algo : a.compare) csv << ',' << algo;
  csv << '\n';
  for (std::size_t i = 0; i < tir.size(); ++i) {
    csv << a.compare[i];
    for (std::size_t j = 0; j < tir.size(); ++j) csv << ',' << matrix[i][j];
    csv << '\n';
  }
  for (const json& r : rows)
    io.out << r.at("a").get<std::string>() << " vs " << r.at("b").get<std::string>() << ": p=" << r.at("p_value").get<double>()
           << " holm=" << r.at("p_holm").get<double>() << '\n';
  io.out << "wrote " << json_path.string() << '\n';
  return kOk;
}

int cmd_evaluate(const RunConfig& c, const EvaluateArgs& a, Io io) {
  c.validate(false);
  if (!a.compare.empty()) return cmd_compare(c, a, io);
  agents::parse_algorithm(c.algorithm);
  const fs::path run = c.run_dir();
  const fs::path dir = run / "eval" / c.algorithm;
  require_fresh(dir / "report.json", a.force);
  const std::vector<std::string> subjects = pick_subjects(c);
  const reward::RewardConfig reward_config = run_reward_config(run);

  fs::create_directories(dir);
  std::ofstream traj(dir / "trajectories.jsonl");
  std::ofstream plot(dir / "trajectory.csv");
  std::ofstream bars(dir / "tir.csv");
  plot << "subject,seed,state_index,tick,glucose,carbs,bolus\n";
  bars << "algorithm,subject,tir,tir_sd,tar,tbr,cv\n";
  json subject_reports = json::array();
  std::vector<double> cohort_tir, cohort_tar, cohort_tbr, cohort_cv;

  for (const std::string& id : subjects) {
    const SubjectWorkspace ws = load_subject(run, id, reward_config);
    std::vector<double> tir, tar, tbr, cv, ret;
    std::vector<metrics::BehavioralProfile> profiles;
    for (std::uint64_t seed : c.seeds) {
      const auto policy = load_policy(run, c.algorithm, id, seed);
      for (std::size_t i = 0; i < ws.eval_states.size(); ++i) {
        Rng rng(agents::episode_policy_seed(seed, i));
        const agents::EpisodeOutcome o =
            agents::run_episode(*ws.env, ws.eval_states[i], agents::episode_env_seed(seed, i), *policy, rng);
        tir.push_back(o.glycemic.tir_pct);
        tar.push_back(o.glycemic.tar_pct);
        tbr.push_back(o.glycemic.tbr_pct);
        cv.push_back(o.glycemic.cv_pct);
        ret.push_back(o.total_return);
        const auto events = agents::episode_events(o.steps);
        profiles.push_back(metrics::behavioral_profile(events, 1.0));
        for (const env::StepResult& r : o.steps) {
          json line = env::step_record(r);
          line["subject"] = id;
          line["seed"] = seed;
          line["state_index"] = i;
          traj << line.dump() << '\n';
        }
        const std::vector<double> g = env::simulated_glucose(o.steps);
        for (std::size_t k = 0; k < g.size(); ++k) {
          const env::StepResult& r = o.steps[k / kTicksPerHour];
          double carbs = 0.0, bolus = 0.0;
          for (const env::AppliedEvent& e : r.applied_events) {
            if (static_cast<std::size_t>(e.tick_offset) != k % kTicksPerHour) continue;
            (e.kind == ActionType::Inject ? bolus : carbs) += e.magnitude;
          }
          plot << id << ',' << seed << ',' << i << ',' << k << ',' << g[k] << ',' << carbs << ',' << bolus << '\n';
        }
      }
    }
    const metrics::BehavioralProfile agent = metrics::mean_profile(profiles);
    const double days = static_cast<double>(ws.split.rl_eval.size()) / kTicksPerDay;
    const metrics::BehavioralProfile reference =
        metrics::behavioral_profile(record_events(ws.record, ws.split.rl_eval), days);
    json similarity;
    try {
      const metrics::Similarity sim = metrics::profile_similarity(agent, reference);
      similarity = {{"cosine", sim.cosine}, {"mrd", sim.mrd}, {"pnd", sim.pnd}};
    } catch (const std::exception& e) {
      similarity = {{"error", e.what()}};
    }
    const MeanSd t = mean_sd(tir);
    bars << c.algorithm << ',' << id << ',' << t.mean << ',' << t.sd << ',' << mean_sd(tar).mean << ','
         << mean_sd(tbr).mean << ',' << mean_sd(cv).mean << '\n';
    subject_reports.push_back({{"subject", id},
                               {"episodes", tir.size()},
                               {"glycemic",
                                {{"tir", to_json(t)},
                                 {"tar", to_json(mean_sd(tar))},
                                 {"tbr", to_json(mean_sd(tbr))},
                                 {"cv", to_json(mean_sd(cv))},
                                 {"return", to_json(mean_sd(ret))}}},
                               {"per_episode", {{"tir", tir}, {"tar", tar}, {"tbr", tbr}, {"cv", cv}, {"return", ret}}},
                               {"profile_agent", metrics::to_json(agent)},
                               {"profile_reference", metrics::to_json(reference)},
                               {"similarity", similarity}});
    cohort_tir.insert(cohort_tir.end(), tir.begin(), tir.end());
    cohort_tar.insert(cohort_tar.end(), tar.begin(), tar.end());
    cohort_tbr.insert(cohort_tbr.end(), tbr.begin(), tbr.end());
    cohort_cv.insert(cohort_cv.end(), cv.begin(), cv.end());
    io.out << c.algorithm << ' ' << id << ": TIR " << std::fixed << std::setprecision(2) << t.mean << " +- " << t.sd
           << "  TBR " << mean_sd(tbr).mean << "  TAR " << mean_sd(tar).mean << "  CV " << mean_sd(cv).mean << '\n';
  }
  const json report = {{"schema_version", 1},
                       {"algorithm", c.algorithm},
                       {"run_id", c.run_id},
                       {"seeds", c.seeds},
                       {"subjects", subject_reports},
                       {"cohort",
                        {{"tir", to_json(mean_sd(cohort_tir))},
                         {"tar", to_json(mean_sd(cohort_tar))},
                         {"tbr", to_json(mean_sd(cohort_tbr))},
                         {"cv", to_json(mean_sd(cohort_cv))}}}};
  write_json(dir / "report.json", report);
  io.out << "wrote " << (dir / "report.json").string() << '\n';
  return kOk;
}

// serve ------------------------------------------------------------------

struct ServeArgs {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::vector<std::string> builtin;  // heuristic, random, behavior
  bool no_models = false;
  long idle_timeout = 6 * 3600;
};

std::atomic<bool> g_interrupted{false};

extern "C" void on_signal(int) { g_interrupted = true; }

int cmd_serve(const RunConfig& c, const ServeArgs& a, Io io) {
  c.validate(false);
  const fs::path run = c.run_dir();
  const reward::RewardConfig reward_config = run_reward_config(run);
  std::vector<service::SubjectContext> subjects;
  for (const std::string& id : pick_subjects(c)) {
    SubjectWorkspace ws = load_subject(run, id, reward_config);
    subjects.push_back({ws.id, ws.env, ws.eval_states});
  }
  std::vector<service::PolicyHandle> policies;
  for (const std::string& b : a.builtin) {
    if (b == "heuristic") policies.push_back({b, "clinical rule of thumb", std::make_shared<agents::HeuristicPolicy>()});
    else if (b == "random") policies.push_back({b, "uniform random actions", std::make_shared<agents::RandomPolicy>()});
    else if (b == "behavior") policies.push_back({b, "noisy heuristic used for buffers", std::make_shared<agents::BehaviorPolicy>()});
    else throw UsageError("unknown built-in policy '" + b + "' (expected heuristic, random or behavior)");
  }
  if (!a.no_models && fs::exists(run / "models")) {
    std::vector<fs::path> found;
    for (const auto& e : fs::recursive_directory_iterator(run / "models")) {
      if (e.path().string().ends_with(".policy.json")) found.push_back(e.path());
    }
    std::sort(found.begin(), found.end());
    for (const fs::path& p : found) {
      const std::string algo = p.parent_path().filename().string();
      const std::string stem = p.filename().string().substr(0, p.filename().string().size() - 12);
      policies.push_back({algo + "/" + stem, "checkpoint " + p.string(),
                          std::shared_ptr<const agents::Policy>(agents::TrainedPolicy::from_json(read_json(p)).make_policy())});
    }
  }
  if (policies.empty())
    throw UsageError("no policies to serve: train a model or pass --policy heuristic");

  service::ServiceOptions options;
  options.session_dir = run / "sessions";
  options.idle_timeout = std::chrono::seconds(a.idle_timeout);
  service::SessionManager manager(std::move(subjects), std::move(policies), options);
  const std::size_t resumed = manager.resume();
  service::HttpServer server(manager);
  if (!server.bind(a.host, a.port)) throw UsageError("cannot bind " + a.host + ":" + std::to_string(a.port) + " (port in use?)");

  g_interrupted = false;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::thread watcher([&] {
    while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
  });
  io.out << "serving on http://" << a.host << ':' << server.port() << " (" << resumed << " session(s) resumed)" << std::endl;
  server.serve();
  g_interrupted = true;
  watcher.join();
  std::signal(SIGINT, SIG_DFL);
  std::signal(SIGTERM, SIG_DFL);
  io.out << "shut down; " << manager.session_count() << " session(s) saved under " << options.session_dir.string()
         << std::endl;
  return kOk;
}

}  // namespace

// ----------------------------------------------------------------- parser

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Io io{out, err};
  CLI::App app{"guide: behavioral decision support workbench for type 1 diabetes"};
  app.require_subcommand(1);

  std::string config_path;
  RunConfig flags;
  std::string seeds_text;
  std::string data_dir, out_dir, reward_path;
  const auto add_common = [&](CLI::App* sub, bool with_algo) {
    sub->add_option("--config", config_path, "JSON run config; flags override it");
    sub->add_option("--out", out_dir, "output root (default out)");
    sub->add_option("--run-id", flags.run_id, "run name under the output root");
    sub->add_option("--subject", flags.subjects, "subject id (repeatable; default all)");
    if (with_algo) {
      sub->add_option("--algo", flags.algorithm, "td3-bc, cql-bc, sac-offline, sac-online, ppo or random");
      sub->add_option("--seeds", seeds_text, "seed list, e.g. 0..4 or 0,2");
    }
  };

  FixturesArgs fx;
  auto* fixtures_cmd = app.add_subcommand("fixtures", "write synthetic subject CSVs");
  fixtures_cmd->add_option("--dir", fx.dir, "output directory");
  fixtures_cmd->add_option("--subjects", fx.subjects, "number of subjects");
  fixtures_cmd->add_option("--days", fx.days, "days per subject");
  fixtures_cmd->add_option("--seed", fx.seed, "generator seed");
  fixtures_cmd->add_flag("--force", fx.force, "overwrite existing files");

  IngestArgs ig;
  auto* ingest_cmd = app.add_subcommand("ingest", "parse CSVs into records, splits and predictors");
  add_common(ingest_cmd, false);
  ingest_cmd->add_option("--data", data_dir, "directory of <subject>.csv files");
  ingest_cmd->add_option("--predictor", flags.predictor, "surrogate or autoregressive");
  ingest_cmd->add_option("--reward-config", reward_path, "reward rule table JSON");
  ingest_cmd->add_option("--ridge-lambda", ig.ridge_lambda, "ridge penalty for the autoregressive predictor");
  ingest_cmd->add_flag("--strict", ig.strict, "reject gaps longer than 15 minutes");
  ingest_cmd->add_flag("--force", ig.force, "overwrite an existing run");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "train one policy per (subject, seed)");
  add_common(train_cmd, true);
  train_cmd->add_option("--steps", tr.steps, "update steps (offline) or epochs (online)");
  train_cmd->add_option("--hidden", tr.hidden, "hidden widths, e.g. 256,256");
  train_cmd->add_option("--buffer-size", tr.buffer_size, "offline buffer transitions");
  train_cmd->add_option("--parallel", tr.parallel, "worker threads");
  train_cmd->add_flag("--force", tr.force, "overwrite existing checkpoints");

  EvaluateArgs ev;
  auto* eval_cmd = app.add_subcommand("evaluate", "roll out checkpoints and write reports");
  add_common(eval_cmd, true);
  eval_cmd->add_option("--compare", ev.compare, "pairwise Wilcoxon/Holm across evaluated algorithms");
  eval_cmd->add_flag("--force", ev.force, "overwrite existing reports");

  ServeArgs sv;
  auto* serve_cmd = app.add_subcommand("serve", "host the session API for the console");
  add_common(serve_cmd, false);
  serve_cmd->add_option("--host", sv.host, "bind address");
  serve_cmd->add_option("--port", sv.port, "port (0 picks a free one)");
  serve_cmd->add_option("--policy", sv.builtin, "built-in policy to offer: heuristic, random, behavior");
  serve_cmd->add_flag("--no-models", sv.no_models, "do not load checkpoints from the run");
  serve_cmd->add_option("--idle-timeout", sv.idle_timeout, "seconds before an idle session expires");

  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUserError;
  }

  try {
    if (fixtures_cmd->parsed()) return cmd_fixtures(fx, io);

    RunConfig c = load_config(config_path);
    // Flags win over the config file.
    const auto given = [&](CLI::App* sub, const char* name) { return sub->count(name) > 0; };
    CLI::App* sub = app.get_subcommands().front();
    if (given(sub, "--run-id")) c.run_id = flags.run_id;
    if (!out_dir.empty()) c.out_dir = out_dir;
    if (!flags.subjects.empty()) c.subjects = flags.subjects;
    if (sub != ingest_cmd && sub != serve_cmd) {
      if (given(sub, "--algo")) c.algorithm = flags.algorithm;
      if (!seeds_text.empty()) c.seeds = parse_seeds(seeds_text);
    }
    if (sub == ingest_cmd) {
      if (!data_dir.empty()) c.data_dir = data_dir;
      if (given(sub, "--predictor")) c.predictor = flags.predictor;
      if (!reward_path.empty()) c.reward_config = reward_path;
      return cmd_ingest(c, ig, io);
    }
    if (sub == train_cmd) return cmd_train(c, tr, io);
    if (sub == eval_cmd) return cmd_evaluate(c, ev, io);
    if (sub == serve_cmd) return cmd_serve(c, sv, io);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUserError;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kUserError;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kInternalFault;
  }
  return kUserError;
}

}  // namespace guide::cli
