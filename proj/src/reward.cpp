#include "guide/reward.hpp"

#include <algorithm>
#include <cmath>

namespace guide::reward {

namespace {

constexpr int kTrendTicks = 6;

std::string_view to_string(ActionFilter f) {
  switch (f) {
    case ActionFilter::Any: return "any";
    case ActionFilter::Nothing: return "nothing";
    case ActionFilter::Eat: return "eat";
    case ActionFilter::Inject: return "inject";
    case ActionFilter::NonNothing: return "non_nothing";
  }
  return "?";
}

std::string_view to_string(Compare c) {
  switch (c) {
    case Compare::Less: return "<";
    case Compare::LessEqual: return "<=";
    case Compare::Greater: return ">";
    case Compare::GreaterEqual: return ">=";
    case Compare::Equal: return "==";
  }
  return "?";
}

Component parse_component(const std::string& s) {
  for (Component c : {Component::Eat, Component::Inject, Component::Sleep, Component::Stability,
                      Component::Repetition}) {
    if (to_string(c) == s) return c;
  }
  throw ValidationError("unknown reward component '" + s + "'");
}

ActionFilter parse_filter(const std::string& s) {
  for (ActionFilter f : {ActionFilter::Any, ActionFilter::Nothing, ActionFilter::Eat, ActionFilter::Inject,
                         ActionFilter::NonNothing}) {
    if (to_string(f) == s) return f;
  }
  throw ValidationError("unknown action filter '" + s + "'");
}

Compare parse_compare(const std::string& s) {
  for (Compare c : {Compare::Less, Compare::LessEqual, Compare::Greater, Compare::GreaterEqual, Compare::Equal}) {
    if (to_string(c) == s) return c;
  }
  throw ValidationError("unknown comparison '" + s + "'");
}

bool passes(ActionFilter filter, ActionType type) {
  switch (filter) {
    case ActionFilter::Any: return true;
    case ActionFilter::Nothing: return type == ActionType::Nothing;
    case ActionFilter::Eat: return type == ActionType::Eat;
    case ActionFilter::Inject: return type == ActionType::Inject;
    case ActionFilter::NonNothing: return type != ActionType::Nothing;
  }
  return false;
}

bool holds(Compare op, double x, double v) {
  switch (op) {
    case Compare::Less: return x < v;
    case Compare::LessEqual: return x <= v;
    case Compare::Greater: return x > v;
    case Compare::GreaterEqual: return x >= v;
    case Compare::Equal: return x == v;
  }
  return false;
}

bool known_feature(std::string_view name) {
  const auto& names = feature_names();
  return std::find(names.begin(), names.end(), name) != names.end();
}

RuleSpec rule(std::string name, Component component, ActionFilter action, std::vector<Condition> conditions,
              Response response, double alpha) {
  return RuleSpec{std::move(name), component, action, std::move(conditions), std::move(response),
                  alpha,           -alpha,    alpha};
}

Response constant(double c) { return Response{"", 0.0, 1.0, c}; }
Response linear(std::string feature, double offset, double scale) {
  return Response{std::move(feature), offset, scale, 0.0};
}

}  // namespace

std::string_view to_string(Component c) {
  switch (c) {
    case Component::Eat: return "eat";
    case Component::Inject: return "inj";
    case Component::Sleep: return "sleep";
    case Component::Stability: return "stab";
    case Component::Repetition: return "rep";
  }
  return "?";
}

void GlycemicParams::validate() const {
  if (!(hypo_threshold < target && target < hyper_threshold))
    throw ValidationError("glycemic params need hypo_threshold < target < hyper_threshold");
  if (!(hypo_slope > 0.0 && hyper_slope > 0.0 && in_range_scale > 0.0))
    throw ValidationError("glycemic slopes and in-range scale must be positive");
}

const std::vector<std::string>& feature_names() {
  static const std::vector<std::string> names{
      "glucose",          "glucose_trend",      "minutes_since_meal", "minutes_since_inject",
      "sleep",            "recent_min_glucose", "recent_max_glucose", "repeats_previous",
      "carb_amount",      "insulin_amount",     "hour"};
  return names;
}

RewardConfig default_config() {
  using C = Component;
  using F = ActionFilter;
  RewardConfig cfg;
  cfg.rules = {
      rule("eat_soon_after_meal", C::Eat, F::Eat, {{"minutes_since_meal", Compare::Less, 90.0}},
           linear("minutes_since_meal", 90.0, 90.0), 100.0),
      rule("eat_while_hyper", C::Eat, F::Eat, {{"glucose", Compare::Greater, 180.0}},
           linear("glucose", 180.0, -100.0), 100.0),
      rule("eat_to_treat_low", C::Eat, F::Eat, {{"glucose", Compare::Less, 80.0}}, linear("glucose", 80.0, -20.0),
           100.0),
      rule("insulin_stacking", C::Inject, F::Inject, {{"minutes_since_inject", Compare::Less, 120.0}},
           linear("minutes_since_inject", 120.0, 120.0), 200.0),
      rule("inject_when_low", C::Inject, F::Inject, {{"glucose", Compare::Less, 100.0}}, constant(-1.0), 500.0),
      rule("inject_when_falling", C::Inject, F::Inject, {{"glucose_trend", Compare::Less, -1.0}}, constant(-1.0),
           200.0),
      rule("inject_to_correct_high", C::Inject, F::Inject, {{"glucose", Compare::Greater, 180.0}},
           linear("glucose", 180.0, 100.0), 200.0),
      rule("action_during_sleep", C::Sleep, F::NonNothing,
           {{"sleep", Compare::Equal, 1.0}, {"glucose", Compare::GreaterEqual, 70.0}}, constant(-1.0), 75.0),
      rule("stable_without_action", C::Stability, F::Nothing,
           {{"recent_min_glucose", Compare::GreaterEqual, 90.0}, {"recent_max_glucose", Compare::LessEqual, 160.0}},
           constant(1.0), 50.0),
      rule("repeated_action", C::Repetition, F::NonNothing, {{"repeats_previous", Compare::Equal, 1.0}},
           constant(-1.0), 1000.0),
  };
  return cfg;
}

void validate(const RewardConfig& config) {
  config.glycemic.validate();
  for (const RuleSpec& r : config.rules) {
    for (const Condition& c : r.conditions) {
      if (!known_feature(c.feature))
        throw ValidationError("rule '" + r.name + "' references undefined feature '" + c.feature + "'");
    }
    if (!r.response.feature.empty()) {
      if (!known_feature(r.response.feature))
        throw ValidationError("rule '" + r.name + "' references undefined feature '" + r.response.feature + "'");
      if (r.response.scale == 0.0) throw ValidationError("rule '" + r.name + "' has zero response scale");
    }
    if (!(r.lower <= r.upper)) throw ValidationError("rule '" + r.name + "' has lower bound above upper bound");
    if (!std::isfinite(r.alpha)) throw ValidationError("rule '" + r.name + "' has non-finite alpha");
  }
}

double glucose_trend(const StateWindow& w) {
  // x in minutes relative to the oldest of the last six ticks.
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int i = 0; i < kTrendTicks; ++i) {
    const double x = i * kMinutesPerTick;
    const double y = w.glucose[kWindowTicks - kTrendTicks + i];
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double n = kTrendTicks;
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

double feature_value(std::string_view feature, const DecisionContext& ctx, const BehavioralAction& action) {
  const StateWindow& w = ctx.window;
  constexpr int last = kWindowTicks - 1;
  if (feature == "glucose") return w.glucose[last];
  if (feature == "glucose_trend") return glucose_trend(w);
  if (feature == "minutes_since_meal") return w.minutes_since_meal[last];
  if (feature == "minutes_since_inject") return w.minutes_since_inject[last];
  if (feature == "sleep") return w.sleep[last];
  if (feature == "recent_min_glucose" || feature == "recent_max_glucose") {
    const auto begin = w.glucose.end() - kTrendTicks;
    return feature == "recent_min_glucose" ? *std::min_element(begin, w.glucose.end())
                                           : *std::max_element(begin, w.glucose.end());
  }
  if (feature == "repeats_previous") {
    const ActionType t = action.type();
    return (t != ActionType::Nothing && t == ctx.previous_action) ? 1.0 : 0.0;
  }
  if (feature == "carb_amount") return action.carb_amount;
  if (feature == "insulin_amount") return action.insulin_amount;
  if (feature == "hour") return w.hour_of_day[last];
  throw ValidationError("undefined reward feature '" + std::string(feature) + "'");
}

double glycemic_point_reward(double g, const GlycemicParams& p) {
  if (!std::isfinite(g)) throw ValidationError("glucose must be finite");
  if (g < p.hypo_threshold) return -p.hypo_slope * (p.hypo_threshold - g);
  if (g > p.hyper_threshold) return -p.hyper_slope * (g - p.hyper_threshold);
  return p.in_range_scale * (1.0 - 2.0 * std::abs(g - p.target) / (p.hyper_threshold - p.hypo_threshold));
}

double glycemic_hour_reward(std::span<const double> forecast, const GlycemicParams& params) {
  if (forecast.size() != static_cast<std::size_t>(kTicksPerHour))
    throw ValidationError("forecast must have 12 values, got " + std::to_string(forecast.size()));
  double sum = 0.0;
  for (double g : forecast) sum += glycemic_point_reward(g, params);
  return sum;
}

BehavioralTerms behavioral_reward(const DecisionContext& ctx, const BehavioralAction& action,
                                  std::span<const RuleSpec> rules) {
  BehavioralTerms terms;
  const ActionType type = action.type();
  for (const RuleSpec& r : rules) {
    if (!passes(r.action, type)) continue;
    bool active = true;
    for (const Condition& c : r.conditions) {
      if (!holds(c.op, feature_value(c.feature, ctx, action), c.value)) {
        active = false;
        break;
      }
    }
    if (!active) continue;
    const double f = r.response.feature.empty()
                         ? r.response.constant
                         : (feature_value(r.response.feature, ctx, action) - r.response.offset) / r.response.scale;
    const double psi = std::clamp(r.alpha * f, r.lower, r.upper);
    switch (r.component) {
      case Component::Eat: terms.meal += psi; break;
      case Component::Inject: terms.insulin += psi; break;
      case Component::Sleep: terms.sleep += psi; break;
      case Component::Stability: terms.stability += psi; break;
      case Component::Repetition: terms.repetition += psi; break;
    }
  }
  return terms;
}

RewardResult total_reward(const DecisionContext& ctx, const BehavioralAction& action,
                          std::span<const double> forecast, const RewardConfig& config) {
  RewardResult result;
  const BehavioralTerms terms = behavioral_reward(ctx, action, config.rules);
  result.breakdown.glucose = glycemic_hour_reward(forecast, config.glycemic);
  result.breakdown.meal = terms.meal;
  result.breakdown.insulin = terms.insulin;
  result.breakdown.sleep = terms.sleep;
  result.breakdown.stability = terms.stability;
  result.breakdown.repetition = terms.repetition;
  result.scaled = result.breakdown.sum() * kRewardScale;
  return result;
}

nlohmann::json to_json(const Breakdown& b) {
  return {{"glucose", b.glucose},     {"meal", b.meal},           {"insulin", b.insulin},
          {"sleep", b.sleep},         {"stability", b.stability}, {"repetition", b.repetition}};
}

nlohmann::json to_json(const RewardConfig& config) {
  const GlycemicParams& g = config.glycemic;
  nlohmann::json rules = nlohmann::json::array();
  for (const RuleSpec& r : config.rules) {
    nlohmann::json conds = nlohmann::json::array();
    for (const Condition& c : r.conditions)
      conds.push_back({{"feature", c.feature}, {"op", to_string(c.op)}, {"value", c.value}});
    nlohmann::json response;
    if (r.response.feature.empty())
      response = {{"constant", r.response.constant}};
    else
      response = {{"feature", r.response.feature}, {"offset", r.response.offset}, {"scale", r.response.scale}};
    rules.push_back({{"name", r.name},
                     {"component", to_string(r.component)},
                     {"action", to_string(r.action)},
                     {"conditions", conds},
                     {"response", response},
                     {"alpha", r.alpha},
                     {"lower", r.lower},
                     {"upper", r.upper}});
  }
  return {{"schema_version", 1},
          {"glycemic",
           {{"hypo_threshold", g.hypo_threshold},
            {"hyper_threshold", g.hyper_threshold},
            {"target", g.target},
            {"hypo_slope", g.hypo_slope},
            {"hyper_slope", g.hyper_slope},
            {"in_range_scale", g.in_range_scale}}},
          {"rules", rules}};
}

RewardConfig config_from_json(const nlohmann::json& j) {
  RewardConfig cfg;
  if (j.contains("glycemic")) {
    const auto& g = j.at("glycemic");
    GlycemicParams& p = cfg.glycemic;
    p.hypo_threshold = g.value("hypo_threshold", p.hypo_threshold);
    p.hyper_threshold = g.value("hyper_threshold", p.hyper_threshold);
    p.target = g.value("target", p.target);
    p.hypo_slope = g.value("hypo_slope", p.hypo_slope);
    p.hyper_slope = g.value("hyper_slope", p.hyper_slope);
    p.in_range_scale = g.value("in_range_scale", p.in_range_scale);
  }
  if (j.contains("rules")) {
    for (const auto& jr : j.at("rules")) {
      RuleSpec r;
      r.name = jr.at("name").get<std::string>();
      r.component = parse_component(jr.at("component").get<std::string>());
      r.action = parse_filter(jr.value("action", std::string("any")));
      for (const auto& jc : jr.value("conditions", nlohmann::json::array())) {
        r.conditions.push_back({jc.at("feature").get<std::string>(), parse_compare(jc.at("op").get<std::string>()),
                                jc.at("value").get<double>()});
      }
      const auto& resp = jr.at("response");
      if (resp.contains("feature")) {
        r.response = linear(resp.at("feature").get<std::string>(), resp.value("offset", 0.0), resp.value("scale", 1.0));
      } else {
        r.response = constant(resp.value("constant", 1.0));
      }
      r.alpha = jr.at("alpha").get<double>();
      r.lower = jr.value("lower", -std::abs(r.alpha));
      r.upper = jr.value("upper", std::abs(r.alpha));
      cfg.rules.push_back(std::move(r));
    }
  } else {
    cfg.rules = default_config().rules;
  }
  validate(cfg);
  return cfg;
}

}  // namespace guide::reward
