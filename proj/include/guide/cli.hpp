#pragma once

// The `guide` command line: fixtures, ingest, train, evaluate, serve.
//
// Layout of a run directory (<out>/<run-id>/):
//   run.json                        manifest written by ingest
//   records/<S>.json                ingested record on the 5-minute grid
//   subjects/<S>.json               split plan and nominal basal rate
//   predictors/<S>.json             surrogate parameters or fitted AR model
//   buffers/<S>-seed<k>.buf         frozen offline buffer
//   models/<algo>/<S>-seed<k>.policy.json
//   curves/<algo>/<S>-seed<k>.csv
//   eval/<algo>/report.json, trajectories.jsonl, trajectory.csv, tir.csv
//   compare/<a>_vs_...json, compare/<a>_vs_...csv
//   sessions/<id>.jsonl             service session logs

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "guide/agents.hpp"
#include "guide/data.hpp"
#include "guide/env.hpp"
#include "guide/reward.hpp"

namespace guide::cli {

enum ExitCode : int { kOk = 0, kUserError = 1, kInternalFault = 2 };

/// A problem with the user's input; maps to exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// "0..4", "0,2,5" or "3".
std::vector<std::uint64_t> parse_seeds(const std::string& text);

struct RunConfig {
  std::vector<std::string> subjects;  // empty: every subject in the run
  std::string algorithm = "td3-bc";
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path data_dir;
  std::filesystem::path out_dir = "out";
  std::string run_id = "default";
  std::string predictor = "surrogate";  // or "autoregressive"
  std::filesystem::path reward_config;  // empty: built-in table
  nlohmann::json agent_overrides = nlohmann::json::object();

  std::filesystem::path run_dir() const { return out_dir / run_id; }
  /// Throws UsageError when seeds are empty, the predictor mode is unknown or a path is missing.
  void validate(bool need_data_dir) const;
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);

/// Everything needed to simulate and evaluate one ingested subject.
struct SubjectWorkspace {
  std::string id;
  data::SubjectRecord record;
  data::SplitPlan split;
  double basal_rate = 1.0;
  std::shared_ptr<const env::Environment> env;
  std::vector<data::InitialState> train_states;
  std::vector<data::InitialState> eval_states;
};

inline constexpr std::size_t kTrainStates = 100;
inline constexpr std::size_t kEvalStates = 10;

/// Loads an ingested subject from a run directory.
SubjectWorkspace load_subject(const std::filesystem::path& run_dir, const std::string& id,
                              const reward::RewardConfig& reward_config);
/// Subject ids listed in a run's manifest.
std::vector<std::string> run_subjects(const std::filesystem::path& run_dir);
reward::RewardConfig run_reward_config(const std::filesystem::path& run_dir);

/// Events of a record slice as behavioral events (hours from the slice start).
std::vector<metrics::BehaviorEvent> record_events(const data::SubjectRecord& record, data::TickRange range);

/// Entry point shared by the `guide` binary and the tests. `args[0]` is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace guide::cli
