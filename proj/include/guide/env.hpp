#pragma once

// Closed-loop simulator. One step is one decision hour: decode the agent's
// action, merge it with generated meals, forecast 12 ticks and roll the
// observation window forward.

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "guide/core.hpp"
#include "guide/data.hpp"
#include "guide/mealgen.hpp"
#include "guide/predictor.hpp"
#include "guide/reward.hpp"

namespace guide::env {

/// Longest glucose history the environment keeps for moving averages.
inline constexpr std::size_t kExtendedCapacity = 288;

struct EpisodeState {
  std::string subject_id;
  StateWindow window;
  std::vector<double> extended_glucose;  // ends with window.glucose
  mealgen::MealSchedule schedule;
  int decision_step = 0;
  int clock_hour = 0;  // hour of the window's last tick
  ActionType previous_action = ActionType::Nothing;

  friend bool operator==(const EpisodeState&, const EpisodeState&) = default;
};

enum class EventSource { Agent, Meal };

struct AppliedEvent {
  int tick_offset = 0;  // slot within the appended hour
  EventSource source = EventSource::Agent;
  ActionType kind = ActionType::Eat;  // Eat adds carbs, Inject adds bolus
  double magnitude = 0.0;

  friend bool operator==(const AppliedEvent&, const AppliedEvent&) = default;
};

struct StepResult {
  EpisodeState next_state;
  BehavioralAction action;
  RawActionVector raw{};
  double reward_scaled = 0.0;
  reward::Breakdown breakdown;
  bool done = false;
  predictor::GlucoseForecast forecast;
  std::vector<AppliedEvent> applied_events;
};

struct EnvConfig {
  reward::RewardConfig reward = reward::default_config();
  double basal_rate = 1.0;  // U/h fed to the predictor
  mealgen::CarbDistribution carbs;
};

/// Thrown when stepping an episode that already reached 24 decisions.
class EpisodeDone : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Environment {
 public:
  explicit Environment(std::shared_ptr<const predictor::GlucosePredictor> predictor, EnvConfig config = {});

  EpisodeState reset(const data::InitialState& initial, std::uint64_t seed) const;

  /// Reward uses the pre-step window; `previous_action` in the state feeds
  /// the repetition rule.
  StepResult step(const EpisodeState& state, const RawActionVector& raw) const;
  StepResult step(const EpisodeState& state, const BehavioralAction& action) const;

  /// Number of step calls made so far on this environment.
  std::uint64_t interaction_count() const { return interactions_.load(); }

  const EnvConfig& config() const { return config_; }
  const predictor::GlucosePredictor& predictor() const { return *predictor_; }

 private:
  StepResult apply(const EpisodeState& state, const BehavioralAction& action, const RawActionVector& raw) const;

  std::shared_ptr<const predictor::GlucosePredictor> predictor_;
  EnvConfig config_;
  mutable std::atomic<std::uint64_t> interactions_{0};
};

/// Throws ValidationError when the state breaks a window or bookkeeping invariant.
void validate(const EpisodeState& state);

std::string_view to_string(EventSource source);

nlohmann::json to_json(const EpisodeState& state);
EpisodeState episode_state_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AppliedEvent& e);
nlohmann::json to_json(const BehavioralAction& a);
BehavioralAction action_from_json(const nlohmann::json& j);

/// One trajectory line: the step's action, reward, forecast and events.
nlohmann::json step_record(const StepResult& result);

/// Writes one JSON object per line.
void write_trajectory(const std::vector<StepResult>& steps, std::ostream& out);

/// FNV-1a over the serialized trajectory; equal hashes mean equal trajectories.
std::uint64_t trajectory_hash(const std::vector<StepResult>& steps);

/// The 288 simulated glucose values of an episode (concatenated forecasts).
std::vector<double> simulated_glucose(const std::vector<StepResult>& steps);

}  // namespace guide::env
