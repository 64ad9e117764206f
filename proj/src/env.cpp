#include "guide/env.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace guide::env {

Environment::Environment(std::shared_ptr<const predictor::GlucosePredictor> predictor, EnvConfig config)
    : predictor_(std::move(predictor)), config_(std::move(config)) {
  if (!predictor_) throw ValidationError("environment needs a predictor");
  reward::validate(config_.reward);
  if (!(config_.basal_rate >= 0.0)) throw ValidationError("basal_rate must be nonnegative");
}

EpisodeState Environment::reset(const data::InitialState& initial, std::uint64_t seed) const {
  guide::validate(initial.window);
  if (initial.extended_glucose.size() < static_cast<std::size_t>(kWindowTicks))
    throw ValidationError("initial state's extended glucose is shorter than the window");
  if (!std::equal(initial.window.glucose.begin(), initial.window.glucose.end(),
                  initial.extended_glucose.end() - kWindowTicks))
    throw ValidationError("initial state's extended glucose does not end with the window");
  EpisodeState s;
  s.subject_id = initial.subject_id;
  s.window = initial.window;
  const std::size_t keep = std::min(initial.extended_glucose.size(), kExtendedCapacity);
  s.extended_glucose.assign(initial.extended_glucose.end() - static_cast<std::ptrdiff_t>(keep),
                            initial.extended_glucose.end());
  s.schedule = mealgen::sample_schedule(seed, config_.carbs);
  s.decision_step = 0;
  s.clock_hour = initial.window.hour_of_day[kWindowTicks - 1];
  s.previous_action = ActionType::Nothing;
  return s;
}

StepResult Environment::step(const EpisodeState& state, const RawActionVector& raw) const {
  return apply(state, decode_action(raw), raw);
}

StepResult Environment::step(const EpisodeState& state, const BehavioralAction& action) const {
  guide::validate(action);
  return apply(state, action, encode_action(action));
}

StepResult Environment::apply(const EpisodeState& state, const BehavioralAction& action,
                              const RawActionVector& raw) const {
  if (state.decision_step >= kEpisodeSteps)
    throw EpisodeDone("episode already finished after " + std::to_string(kEpisodeSteps) + " steps");
  ++interactions_;

  const int hour = (state.clock_hour + 1) % 24;
  std::array<double, kTicksPerHour> carbs{};
  std::array<double, kTicksPerHour> bolus{};
  StepResult result;
  result.action = action;
  result.raw = raw;

  const ActionType type = action.type();
  if (type == ActionType::Eat) {
    carbs[action.slot] += action.carb_amount;
    result.applied_events.push_back({action.slot, EventSource::Agent, ActionType::Eat, action.carb_amount});
  } else if (type == ActionType::Inject) {
    bolus[action.slot] += action.insulin_amount;
    result.applied_events.push_back({action.slot, EventSource::Agent, ActionType::Inject, action.insulin_amount});
  }
  for (const mealgen::MealEvent& meal : mealgen::meals_in_hour(state.schedule, hour)) {
    carbs[meal.slot] += meal.carbs;
    result.applied_events.push_back({meal.slot, EventSource::Meal, ActionType::Eat, meal.carbs});
  }

  const predictor::PredictorInput input =
      predictor::make_input(state.window, state.extended_glucose, config_.basal_rate, carbs, bolus);
  result.forecast = predictor_->predict(input);
  for (double g : result.forecast.values) {
    if (!std::isfinite(g)) throw NumericFault("predictor returned a non-finite forecast");
  }

  const reward::DecisionContext ctx{state.window, state.previous_action};
  const reward::RewardResult r = reward::total_reward(ctx, action, result.forecast.values, config_.reward);
  result.reward_scaled = r.scaled;
  result.breakdown = r.breakdown;

  EpisodeState next;
  next.subject_id = state.subject_id;
  next.schedule = state.schedule;
  const StateWindow& w = state.window;
  StateWindow& n = next.window;
  constexpr int keep = kWindowTicks - kTicksPerHour;
  for (int k = 0; k < keep; ++k) {
    n.hour_of_day[k] = w.hour_of_day[k + kTicksPerHour];
    n.sleep[k] = w.sleep[k + kTicksPerHour];
    n.glucose[k] = w.glucose[k + kTicksPerHour];
    n.carbs[k] = w.carbs[k + kTicksPerHour];
    n.bolus[k] = w.bolus[k + kTicksPerHour];
    n.minutes_since_meal[k] = w.minutes_since_meal[k + kTicksPerHour];
    n.minutes_since_inject[k] = w.minutes_since_inject[k + kTicksPerHour];
  }
  for (int j = 0; j < kTicksPerHour; ++j) {
    const int k = keep + j;
    n.hour_of_day[k] = hour;
    n.sleep[k] = data::default_sleep_flag(hour);
    n.glucose[k] = result.forecast.values[j];
    n.carbs[k] = carbs[j];
    n.bolus[k] = bolus[j];
    n.minutes_since_meal[k] = advance_elapsed(n.minutes_since_meal[k - 1], carbs[j] > 0.0);
    n.minutes_since_inject[k] = advance_elapsed(n.minutes_since_inject[k - 1], bolus[j] > 0.0);
  }

  next.extended_glucose = state.extended_glucose;
  next.extended_glucose.insert(next.extended_glucose.end(), result.forecast.values.begin(),
                               result.forecast.values.end());
  if (next.extended_glucose.size() > kExtendedCapacity)
    next.extended_glucose.erase(next.extended_glucose.begin(),
                                next.extended_glucose.end() - static_cast<std::ptrdiff_t>(kExtendedCapacity));
  next.decision_step = state.decision_step + 1;
  next.clock_hour = hour;
  next.previous_action = type;
  result.done = next.decision_step == kEpisodeSteps;
  result.next_state = std::move(next);
  return result;
}

void validate(const EpisodeState& s) {
  guide::validate(s.window);
  if (s.decision_step < 0 || s.decision_step > kEpisodeSteps)
    throw ValidationError("decision_step " + std::to_string(s.decision_step) + " outside 0..24");
  if (s.clock_hour != s.window.hour_of_day[kWindowTicks - 1])
    throw ValidationError("clock_hour disagrees with the window's last hour");
  if (s.extended_glucose.size() < static_cast<std::size_t>(kWindowTicks) ||
      !std::equal(s.window.glucose.begin(), s.window.glucose.end(), s.extended_glucose.end() - kWindowTicks))
    throw ValidationError("extended glucose does not end with the window");
  if (!elapsed_channel_consistent(s.window.minutes_since_meal, s.window.carbs))
    throw ValidationError("minutes_since_meal is inconsistent with the carbs channel");
  if (!elapsed_channel_consistent(s.window.minutes_since_inject, s.window.bolus))
    throw ValidationError("minutes_since_inject is inconsistent with the bolus channel");
  mealgen::validate(s.schedule);
}

std::string_view to_string(EventSource source) { return source == EventSource::Agent ? "agent" : "meal"; }

nlohmann::json to_json(const BehavioralAction& a) {
  return {{"type", std::string(to_string(a.type()))},
          {"scores", {a.score_nothing, a.score_eat, a.score_inject}},
          {"carb_amount", a.carb_amount},
          {"insulin_amount", a.insulin_amount},
          {"slot", a.slot}};
}

BehavioralAction action_from_json(const nlohmann::json& j) {
  BehavioralAction a;
  if (j.contains("scores")) {
    const auto scores = j.at("scores").get<std::vector<double>>();
    if (scores.size() != 3) throw ValidationError("action scores must have 3 entries");
    a.score_nothing = scores[0];
    a.score_eat = scores[1];
    a.score_inject = scores[2];
    a.carb_amount = j.at("carb_amount").get<double>();
    a.insulin_amount = j.at("insulin_amount").get<double>();
    a.slot = j.at("slot").get<int>();
  } else {
    a = make_action(parse_action_type(j.at("type").get<std::string>()), j.value("carb_amount", kMinCarbs),
                    j.value("insulin_amount", kMinInsulin), j.value("slot", 0));
  }
  validate(a);
  return a;
}

nlohmann::json to_json(const AppliedEvent& e) {
  return {{"tick_offset", e.tick_offset},
          {"source", std::string(to_string(e.source))},
          {"kind", e.kind == ActionType::Inject ? "bolus" : "carbs"},
          {"magnitude", e.magnitude}};
}

nlohmann::json to_json(const EpisodeState& s) {
  return {{"subject_id", s.subject_id},
          {"window", data::to_json(s.window)},
          {"extended_glucose", s.extended_glucose},
          {"schedule", mealgen::to_json(s.schedule)},
          {"decision_step", s.decision_step},
          {"clock_hour", s.clock_hour},
          {"previous_action", std::string(to_string(s.previous_action))}};
}

EpisodeState episode_state_from_json(const nlohmann::json& j) {
  EpisodeState s;
  s.subject_id = j.at("subject_id").get<std::string>();
  s.window = data::window_from_json(j.at("window"));
  s.extended_glucose = j.at("extended_glucose").get<std::vector<double>>();
  s.schedule = mealgen::schedule_from_json(j.at("schedule"));
  s.decision_step = j.at("decision_step").get<int>();
  s.clock_hour = j.at("clock_hour").get<int>();
  s.previous_action = parse_action_type(j.at("previous_action").get<std::string>());
  validate(s);
  return s;
}

nlohmann::json step_record(const StepResult& r) {
  nlohmann::json events = nlohmann::json::array();
  for (const AppliedEvent& e : r.applied_events) events.push_back(to_json(e));
  std::vector<double> raw(r.raw.begin(), r.raw.end());
  std::vector<double> forecast(r.forecast.values.begin(), r.forecast.values.end());
  return {{"step", r.next_state.decision_step},
          {"clock_hour", r.next_state.clock_hour},
          {"action", to_json(r.action)},
          {"raw_action", raw},
          {"reward_scaled", r.reward_scaled},
          {"reward_breakdown", reward::to_json(r.breakdown)},
          {"forecast", forecast},
          {"applied_events", events},
          {"done", r.done}};
}

void write_trajectory(const std::vector<StepResult>& steps, std::ostream& out) {
  for (const StepResult& r : steps) out << step_record(r).dump() << '\n';
}

std::uint64_t trajectory_hash(const std::vector<StepResult>& steps) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const StepResult& r : steps) {
    // Raw bytes of every double so that bit-level differences show.
    mix(r.raw.data(), sizeof(double) * r.raw.size());
    mix(r.forecast.values.data(), sizeof(double) * r.forecast.values.size());
    mix(&r.reward_scaled, sizeof(double));
    for (const AppliedEvent& e : r.applied_events) {
      mix(&e.tick_offset, sizeof(int));
      mix(&e.magnitude, sizeof(double));
    }
    const StateWindow& w = r.next_state.window;
    mix(w.glucose.data(), sizeof(double) * w.glucose.size());
    mix(w.carbs.data(), sizeof(double) * w.carbs.size());
    mix(w.bolus.data(), sizeof(double) * w.bolus.size());
    mix(w.minutes_since_meal.data(), sizeof(double) * w.minutes_since_meal.size());
    mix(w.minutes_since_inject.data(), sizeof(double) * w.minutes_since_inject.size());
    mix(w.hour_of_day.data(), sizeof(int) * w.hour_of_day.size());
    mix(w.sleep.data(), sizeof(int) * w.sleep.size());
  }
  return h;
}

std::vector<double> simulated_glucose(const std::vector<StepResult>& steps) {
  std::vector<double> g;
  g.reserve(steps.size() * kTicksPerHour);
  for (const StepResult& r : steps) g.insert(g.end(), r.forecast.values.begin(), r.forecast.values.end());
  return g;
}

}  // namespace guide::env
