#pragma once

// Hourly reward: a piecewise-linear glycemic term summed over the 12
// forecast values plus five families of clipped, rule-based behavioral
// terms. The total is scaled by 1/1000 before it reaches the learners.

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "guide/core.hpp"

namespace guide::reward {

inline constexpr double kRewardScale = 1.0 / 1000.0;

struct GlycemicParams {
  double hypo_threshold = 70.0;
  double hyper_threshold = 180.0;
  double target = 125.0;
  double hypo_slope = 7.0;
  double hyper_slope = 2.0;
  double in_range_scale = 100.0;

  void validate() const;
};

enum class Component { Eat, Inject, Sleep, Stability, Repetition };
enum class ActionFilter { Any, Nothing, Eat, Inject, NonNothing };
enum class Compare { Less, LessEqual, Greater, GreaterEqual, Equal };

std::string_view to_string(Component c);

/// Activation predicate `feature <op> value`.
struct Condition {
  std::string feature;
  Compare op = Compare::Less;
  double value = 0.0;
};

/// f(s,a): `constant` when `feature` is empty, otherwise (x - offset) / scale.
struct Response {
  std::string feature;
  double offset = 0.0;
  double scale = 1.0;
  double constant = 1.0;
};

/// One behavioral rule: active when the action passes `action` and every
/// condition holds; contributes clip(alpha * f, lower, upper).
struct RuleSpec {
  std::string name;
  Component component = Component::Eat;
  ActionFilter action = ActionFilter::Any;
  std::vector<Condition> conditions;
  Response response;
  double alpha = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

struct RewardConfig {
  GlycemicParams glycemic;
  std::vector<RuleSpec> rules;
};

/// Features a rule may reference, evaluated on the pre-action window.
const std::vector<std::string>& feature_names();

/// The shipped rule table. Coefficients sit inside the published ranges.
RewardConfig default_config();

/// Throws ValidationError on unknown features, inverted bounds or bad params.
void validate(const RewardConfig& config);

nlohmann::json to_json(const RewardConfig& config);
RewardConfig config_from_json(const nlohmann::json& j);

/// Least-squares slope of the last six glucose ticks, mg/dL per minute.
double glucose_trend(const StateWindow& window);

struct DecisionContext {
  const StateWindow& window;
  ActionType previous_action = ActionType::Nothing;
};

double feature_value(std::string_view feature, const DecisionContext& ctx, const BehavioralAction& action);

double glycemic_point_reward(double glucose, const GlycemicParams& params);

/// Sum of the point reward over a 12-value forecast.
double glycemic_hour_reward(std::span<const double> forecast, const GlycemicParams& params);

struct BehavioralTerms {
  double meal = 0.0;
  double insulin = 0.0;
  double sleep = 0.0;
  double stability = 0.0;
  double repetition = 0.0;
};

BehavioralTerms behavioral_reward(const DecisionContext& ctx, const BehavioralAction& action,
                                  std::span<const RuleSpec> rules);

struct Breakdown {
  double glucose = 0.0;
  double meal = 0.0;
  double insulin = 0.0;
  double sleep = 0.0;
  double stability = 0.0;
  double repetition = 0.0;

  double sum() const { return glucose + meal + insulin + sleep + stability + repetition; }
};

nlohmann::json to_json(const Breakdown& b);

struct RewardResult {
  double scaled = 0.0;
  Breakdown breakdown;
};

RewardResult total_reward(const DecisionContext& ctx, const BehavioralAction& action,
                          std::span<const double> forecast, const RewardConfig& config);

}  // namespace guide::reward
