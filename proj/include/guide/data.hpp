#pragma once

// Per-subject CSV ingestion onto a 5-minute grid, chronological splits and
// sliding-window initial states.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "guide/core.hpp"

namespace guide::data {

/// Input file is missing a required column or is otherwise malformed.
class SchemaError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

struct RecordTick {
  std::int64_t time = 0;  // seconds since epoch, read as naive local time
  double glucose = 0.0;
  double carbs = 0.0;
  double bolus = 0.0;
  double basal = 0.0;
  int sleep = 0;
  bool filled = false;  // forward-filled across a short gap
  int segment = 0;      // increments at every gap longer than 15 min

  friend bool operator==(const RecordTick&, const RecordTick&) = default;
};

struct SubjectRecord {
  std::string subject_id;
  std::vector<RecordTick> ticks;
  bool sleep_synthesized = false;

  std::size_t size() const { return ticks.size(); }
  std::size_t filled_count() const;
  std::size_t segment_count() const;
  int hour_of_day(std::size_t i) const;
  int minute_of_day(std::size_t i) const;
};

struct CsvSchema {
  std::string timestamp = "timestamp";
  std::string glucose = "glucose";
  std::string carbs = "carbs";
  std::string bolus = "bolus";
  std::string basal = "basal";
  std::string sleep = "sleep";
};

struct IngestOptions {
  bool strict = false;  // reject gaps longer than 15 min instead of segmenting
};

/// 1 for 23:00-06:59, else 0.
int default_sleep_flag(int hour);

/// Parses `YYYY-MM-DD[T| ]HH:MM[:SS][Z]` into seconds since epoch.
std::int64_t parse_timestamp(const std::string& text);
std::string format_timestamp(std::int64_t seconds);

SubjectRecord parse_csv(std::istream& in, const std::string& subject_id, const CsvSchema& schema = {},
                        const IngestOptions& options = {});

/// Subject id is the file stem.
SubjectRecord ingest_csv(const std::filesystem::path& path, const CsvSchema& schema = {},
                         const IngestOptions& options = {});

void write_csv(const SubjectRecord& record, const std::filesystem::path& path);

struct TickRange {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive

  std::size_t size() const { return end - begin; }
  friend bool operator==(const TickRange&, const TickRange&) = default;
};

struct SplitPlan {
  TickRange predictor_train;
  TickRange rl_pool;
  TickRange rl_train;
  TickRange rl_eval;

  friend bool operator==(const SplitPlan&, const SplitPlan&) = default;
};

/// 80/20 chronological split, with the 20% pool split 80/20 again.
SplitPlan make_split(std::size_t tick_count);
SplitPlan make_split(const SubjectRecord& record);

struct InitialState {
  std::string subject_id;
  StateWindow window;
  std::vector<double> extended_glucose;  // ends at the same tick as window.glucose
  Tick origin_tick;                      // record index of the window's last tick
};

/// Window of 72 ticks ending at `last` (inclusive). Elapsed-time channels
/// look back at most 24 h within the tick's segment.
StateWindow window_ending_at(const SubjectRecord& record, std::size_t last);

/// Windows of 72 ticks stepping by 12 through `range`, skipping any that
/// straddle a long gap, capped at `count`.
std::vector<InitialState> build_initial_states(const SubjectRecord& record, TickRange range, std::size_t count);

/// Moving average over the trailing `window` values ending at index `i` (fewer if unavailable).
double trailing_mean(const std::vector<double>& values, std::size_t i, std::size_t window);

nlohmann::json to_json(const StateWindow& w);
StateWindow window_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SplitPlan& plan);
SplitPlan split_from_json(const nlohmann::json& j);
nlohmann::json to_json(const InitialState& s);
InitialState initial_state_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SubjectRecord& r);
SubjectRecord record_from_json(const nlohmann::json& j);

}  // namespace guide::data
