#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <fstream>

#include "guide/random.hpp"
#include "guide/reward.hpp"

using namespace guide;
using namespace guide::reward;

namespace {

// Quiet afternoon: glucose flat at `g`, no recent events, awake.
StateWindow quiet_window(double g = 120.0) {
  StateWindow w;
  for (int k = 0; k < kWindowTicks; ++k) {
    w.hour_of_day[k] = 10 + k / 12;
    w.glucose[k] = g;
    w.minutes_since_meal[k] = std::min(1440.0, 300.0 + 5 * k);
    w.minutes_since_inject[k] = std::min(1440.0, 400.0 + 5 * k);
  }
  return w;
}

StateWindow random_window(Rng& rng) {
  StateWindow w;
  const double base = uniform(rng, 40, 350);
  const double slope = uniform(rng, -4, 4);
  const int hour0 = static_cast<int>(uniform(rng, 0, 24));
  for (int k = 0; k < kWindowTicks; ++k) {
    w.hour_of_day[k] = (hour0 + k / 12) % 24;
    w.sleep[k] = uniform(rng, 0, 1) < 0.3 ? 1 : 0;
    w.glucose[k] = std::clamp(base + slope * (k - 71) + uniform(rng, -5, 5), 20.0, 600.0);
  }
  w.minutes_since_meal[71] = std::floor(uniform(rng, 0, 289)) * 5;
  w.minutes_since_inject[71] = std::floor(uniform(rng, 0, 289)) * 5;
  return w;
}

BehavioralAction random_action(Rng& rng) {
  RawActionVector raw;
  for (double& v : raw) v = uniform(rng, -1, 1);
  return decode_action(raw);
}

}  // namespace

TEST_CASE("glycemic point reward at the published anchor values") {
  const GlycemicParams p;
  CHECK(std::abs(glycemic_point_reward(125, p) - 100.0) <= 1e-12);
  CHECK(std::abs(glycemic_point_reward(70, p) - 0.0) <= 1e-12);
  CHECK(std::abs(glycemic_point_reward(180, p) - 0.0) <= 1e-12);
  CHECK(std::abs(glycemic_point_reward(60, p) - (-70.0)) <= 1e-12);
  CHECK(std::abs(glycemic_point_reward(200, p) - (-40.0)) <= 1e-12);
  CHECK_THROWS_AS(glycemic_point_reward(std::nan(""), p), ValidationError);
}

TEST_CASE("property: continuity at both thresholds") {
  const GlycemicParams p;
  const double lambda_max = std::max({p.hypo_slope, p.hyper_slope, 2.0 * p.in_range_scale / 110.0});
  for (double eps : {1e-6, 1e-7, 1e-9}) {
    for (double t : {70.0, 180.0}) {
      for (double x : {t - eps, t + eps}) {
        // bound on the representable distance, not the nominal eps
        CHECK(std::abs(glycemic_point_reward(x, p)) <= lambda_max * std::abs(x - t) * (1 + 1e-9));
      }
    }
  }
}

TEST_CASE("property: in-range maximum is exactly the scale at 125") {
  const GlycemicParams p;
  double best = -1e9, arg = 0;
  for (int i = 0; i <= 110000; ++i) {
    const double g = 70.0 + i * 0.001;
    const double r = glycemic_point_reward(g, p);
    if (r > best) {
      best = r;
      arg = g;
    }
  }
  CHECK(arg == doctest::Approx(125.0).epsilon(1e-9));
  CHECK(best == 100.0);
  // strictly decreasing away from the target on both sides
  for (double d = 1; d < 60; d += 1) {
    CHECK(glycemic_point_reward(125 + d, p) < glycemic_point_reward(125 + d - 1, p));
    CHECK(glycemic_point_reward(125 - d, p) < glycemic_point_reward(125 - d + 1, p));
  }
}

TEST_CASE("hour reward sums the forecast") {
  const GlycemicParams p;
  std::array<double, 12> f;
  f.fill(125);
  CHECK(glycemic_hour_reward(f, p) == doctest::Approx(1200).epsilon(1e-12));
  f.fill(70);
  CHECK(glycemic_hour_reward(f, p) == 0.0);
  for (int j = 0; j < 12; ++j) f[j] = j < 6 ? 125 : 200;
  CHECK(glycemic_hour_reward(f, p) == doctest::Approx(360).epsilon(1e-12));
  const std::vector<double> short_forecast(11, 125.0);
  CHECK_THROWS_AS(glycemic_hour_reward(short_forecast, p), ValidationError);
}

TEST_CASE("eating 30 minutes after a meal is penalized") {
  StateWindow w = quiet_window();
  w.carbs[65] = 40;
  for (int k = 65; k < 72; ++k) w.minutes_since_meal[k] = 5.0 * (k - 65);
  REQUIRE(w.minutes_since_meal[71] == 30.0);
  const RewardConfig cfg = default_config();
  const BehavioralTerms t = behavioral_reward({w}, make_action(ActionType::Eat, 30, 2, 0), cfg.rules);
  const double bound = -100.0 * (90.0 - 30.0) / 90.0;
  CHECK(t.meal <= bound + 1e-12);
  CHECK(t.meal >= -100.0);
  CHECK(t.insulin == 0.0);
}

TEST_CASE("NOTHING in a stable range earns only the stability bonus") {
  const RewardConfig cfg = default_config();
  const BehavioralTerms t = behavioral_reward({quiet_window()}, make_action(ActionType::Nothing, 5, 2, 0), cfg.rules);
  CHECK(t.stability == 50.0);
  CHECK(t.meal == 0.0);
  CHECK(t.insulin == 0.0);
  CHECK(t.sleep == 0.0);
  CHECK(t.repetition == 0.0);

  std::array<double, 12> f;
  f.fill(125);
  const RewardResult r = total_reward({quiet_window()}, make_action(ActionType::Nothing, 5, 2, 0), f, cfg);
  CHECK(r.scaled == doctest::Approx(1.25).epsilon(1e-12));
}

TEST_CASE("injecting during sleep is penalized") {
  StateWindow w = quiet_window();
  for (int k = 0; k < kWindowTicks; ++k) {
    w.sleep[k] = 1;
    w.hour_of_day[k] = (22 + k / 12) % 24;
  }
  const BehavioralTerms t = behavioral_reward({w}, make_action(ActionType::Inject, 5, 4, 3), default_config().rules);
  CHECK(t.sleep < 0.0);
  CHECK(t.sleep >= -100.0);
  CHECK(t.sleep <= -50.0);
  // rescue eating while low is exempt
  StateWindow low = w;
  for (double& g : low.glucose) g = 60;
  CHECK(behavioral_reward({low}, make_action(ActionType::Eat, 15, 2, 0), default_config().rules).sleep == 0.0);
}

TEST_CASE("repetition penalty applies to repeated non-NOTHING types") {
  const auto rules = default_config().rules;
  const StateWindow w = quiet_window();
  CHECK(behavioral_reward({w, ActionType::Eat}, make_action(ActionType::Eat, 20, 2, 0), rules).repetition == -1000.0);
  CHECK(behavioral_reward({w, ActionType::Inject}, make_action(ActionType::Eat, 20, 2, 0), rules).repetition == 0.0);
  CHECK(behavioral_reward({w, ActionType::Nothing}, make_action(ActionType::Nothing, 20, 2, 0), rules).repetition ==
        0.0);
}

TEST_CASE("zero rules and an all-70 forecast score zero") {
  RewardConfig cfg = default_config();
  cfg.rules.clear();
  std::array<double, 12> f;
  f.fill(70);
  CHECK(total_reward({quiet_window()}, make_action(ActionType::Eat, 30, 2, 0), f, cfg).scaled == 0.0);
}

TEST_CASE("glucose trend is the least-squares slope") {
  StateWindow w = quiet_window();
  for (int k = 66; k < 72; ++k) w.glucose[k] = 200 - 1.5 * 5 * (k - 66);
  CHECK(glucose_trend(w) == doctest::Approx(-1.5).epsilon(1e-12));
  // noisy points: compare with the textbook formula on centered x
  const std::array<double, 6> y{100, 103, 101, 108, 107, 112};
  for (int i = 0; i < 6; ++i) w.glucose[66 + i] = y[static_cast<std::size_t>(i)];
  double xm = 12.5, ym = 0;
  for (double v : y) ym += v / 6;
  double num = 0, den = 0;
  for (int i = 0; i < 6; ++i) {
    num += (5.0 * i - xm) * (y[static_cast<std::size_t>(i)] - ym);
    den += (5.0 * i - xm) * (5.0 * i - xm);
  }
  CHECK(glucose_trend(w) == doctest::Approx(num / den).epsilon(1e-12));
}

TEST_CASE("property: every rule stays within its bounds and the total scales by 1/1000") {
  Rng rng(31);
  const RewardConfig cfg = default_config();
  for (int n = 0; n < 5000; ++n) {
    const StateWindow w = random_window(rng);
    const BehavioralAction a = random_action(rng);
    const auto prev = static_cast<ActionType>(n % 3);
    for (const RuleSpec& r : cfg.rules) {
      const BehavioralTerms t = behavioral_reward({w, prev}, a, std::span<const RuleSpec>(&r, 1));
      const double v = t.meal + t.insulin + t.sleep + t.stability + t.repetition;
      CHECK(v >= r.lower);
      CHECK(v <= r.upper);
    }
    std::array<double, 12> f;
    for (double& g : f) g = uniform(rng, 20, 600);
    const RewardResult res = total_reward({w, prev}, a, f, cfg);
    const double unscaled = res.breakdown.glucose + res.breakdown.meal + res.breakdown.insulin + res.breakdown.sleep +
                            res.breakdown.stability + res.breakdown.repetition;
    CHECK(std::abs(unscaled - 1000.0 * res.scaled) <= 1e-12 * std::max(1.0, std::abs(unscaled)));
  }
}

TEST_CASE("property: clipping holds for arbitrary coefficients") {
  Rng rng(32);
  RewardConfig cfg = default_config();
  for (RuleSpec& r : cfg.rules) {
    r.alpha *= 50.0;  // drive the raw response far past the bounds
    r.lower = -uniform(rng, 1, 20);
    r.upper = uniform(rng, 1, 20);
  }
  for (int n = 0; n < 2000; ++n) {
    const StateWindow w = random_window(rng);
    const BehavioralAction a = random_action(rng);
    for (const RuleSpec& r : cfg.rules) {
      const BehavioralTerms t = behavioral_reward({w}, a, std::span<const RuleSpec>(&r, 1));
      const double v = t.meal + t.insulin + t.sleep + t.stability + t.repetition;
      CHECK(v >= r.lower);
      CHECK(v <= r.upper);
    }
  }
}

TEST_CASE("config validation and JSON round-trip") {
  const RewardConfig cfg = default_config();
  CHECK_NOTHROW(validate(cfg));
  const RewardConfig back = config_from_json(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));

  RewardConfig bad = cfg;
  bad.rules[0].conditions[0].feature = "heart_rate";
  CHECK_THROWS_WITH_AS(validate(bad), doctest::Contains("heart_rate"), ValidationError);
  bad = cfg;
  bad.rules[1].lower = 5;
  bad.rules[1].upper = -5;
  CHECK_THROWS_AS(validate(bad), ValidationError);
  bad = cfg;
  bad.glycemic.target = 60;
  CHECK_THROWS_AS(validate(bad), ValidationError);
  CHECK_THROWS_AS(feature_value("heart_rate", {quiet_window()}, make_action(ActionType::Nothing, 5, 2, 0)),
                  ValidationError);
}

TEST_CASE("default coefficients sit inside the published ranges") {
  const RewardConfig cfg = default_config();
  for (const RuleSpec& r : cfg.rules) {
    CHECK(r.lower <= 0.0);
    CHECK(r.upper >= 0.0);
    if (r.component == Component::Eat) CHECK((r.alpha >= 5 && r.alpha <= 200));
    if (r.component == Component::Inject) CHECK((r.alpha >= 10 && r.alpha <= 2000));
    if (r.component == Component::Sleep) CHECK((r.alpha >= 50 && r.alpha <= 100));
    if (r.component == Component::Stability) CHECK(r.alpha == 50);
    if (r.component == Component::Repetition) CHECK(r.alpha == 1000);
  }
}

TEST_CASE("shipped reward config matches the built-in table") {
  std::ifstream in(GUIDE_SOURCE_DIR "/config/reward_default.json");
  REQUIRE(in.good());
  const RewardConfig shipped = config_from_json(nlohmann::json::parse(in));
  CHECK(to_json(shipped) == to_json(default_config()));
}
