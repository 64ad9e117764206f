#pragma once

// Helpers shared by the test binaries: a synthetic subject wired to the
// surrogate environment, a CSV builder and a from-scratch window checker.

#include <cmath>
#include <filesystem>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "guide/core.hpp"
#include "guide/data.hpp"
#include "guide/env.hpp"
#include "guide/fixtures.hpp"
#include "guide/predictor.hpp"

namespace testsupport {

struct World {
  guide::data::SubjectRecord record;
  guide::data::SplitPlan split;
  guide::predictor::SurrogateParams params;
  std::shared_ptr<const guide::env::Environment> env;
  std::vector<guide::data::InitialState> train_states;
  std::vector<guide::data::InitialState> eval_states;
};

inline World make_world(int subject = 1, int days = 30, std::uint64_t seed = 7) {
  World w;
  const auto profile = guide::fixtures::subject_profile(subject, seed);
  w.params = profile.params;
  w.record = guide::fixtures::synthesize(profile, days, seed);
  w.split = guide::data::make_split(w.record);
  guide::env::EnvConfig config;
  config.basal_rate = profile.params.basal_rate;
  w.env = std::make_shared<guide::env::Environment>(
      std::make_shared<guide::predictor::SurrogatePredictor>(profile.params), config);
  w.train_states = guide::data::build_initial_states(w.record, w.split.rl_train, 100);
  w.eval_states = guide::data::build_initial_states(w.record, w.split.rl_eval, 10);
  return w;
}

/// Minutes between two CSV rows starting at 2024-03-01 00:00.
inline std::string csv_rows(int rows, int skip_after = -1, int skip_ticks = 0) {
  std::ostringstream s;
  s << "timestamp,glucose,carbs,bolus,basal,sleep\n";
  int minute = 0;
  for (int r = 0; r < rows; ++r) {
    const int h = (minute / 60) % 24, m = minute % 60, day = 1 + minute / 1440;
    char ts[32];
    std::snprintf(ts, sizeof ts, "2024-03-%02dT%02d:%02d:00", day, h, m);
    s << ts << ',' << 100 + (r % 50) << ',' << (r % 40 == 5 ? 30 : 0) << ',' << (r % 55 == 9 ? 4 : 0) << ",0.9,"
      << ((h >= 23 || h < 7) ? 1 : 0) << '\n';
    minute += 5;
    if (r == skip_after) minute += 5 * skip_ticks;
  }
  return s.str();
}

/// Independent StateWindow check; returns an empty string when valid.
inline std::string window_problem(const guide::StateWindow& w) {
  for (int k = 0; k < guide::kWindowTicks; ++k) {
    if (w.hour_of_day[k] < 0 || w.hour_of_day[k] > 23) return "hour " + std::to_string(k);
    if (w.sleep[k] != 0 && w.sleep[k] != 1) return "sleep " + std::to_string(k);
    if (!(w.glucose[k] >= 20.0 && w.glucose[k] <= 600.0)) return "glucose " + std::to_string(k);
    if (!(w.carbs[k] >= 0.0)) return "carbs " + std::to_string(k);
    if (!(w.bolus[k] >= 0.0)) return "bolus " + std::to_string(k);
    const auto check = [&](const guide::Channel<double>& d, const guide::Channel<double>& ev) {
      if (ev[k] > 0.0) return d[k] == 0.0;
      if (k == 0) return d[k] >= 0.0 && d[k] <= 1440.0;
      return d[k] == std::min(d[k - 1] + 5.0, 1440.0);
    };
    if (!check(w.minutes_since_meal, w.carbs)) return "minutes_since_meal " + std::to_string(k);
    if (!check(w.minutes_since_inject, w.bolus)) return "minutes_since_inject " + std::to_string(k);
  }
  return {};
}

inline std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("guide-test-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testsupport
