#include "guide/fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "guide/mealgen.hpp"
#include "guide/random.hpp"

namespace guide::fixtures {

SubjectProfile subject_profile(int index, std::uint64_t seed) {
  if (index < 1 || index > 99) throw ValidationError("subject index must be in 1..99");
  Rng rng(mix_seed(seed, 0x7375626a00 + static_cast<std::uint64_t>(index)));
  SubjectProfile p;
  char id[8];
  std::snprintf(id, sizeof id, "S%02d", index);
  p.id = id;
  p.params.basal_glucose = uniform(rng, 110.0, 135.0);
  p.params.insulin_sensitivity = 8e-4 * uniform(rng, 0.8, 1.2);
  p.params.carb_gain = 0.1 * uniform(rng, 0.85, 1.15);
  p.params.carb_time_constant = uniform(rng, 35.0, 45.0);
  p.params.insulin_time_constant = uniform(rng, 60.0, 80.0);
  p.carb_ratio = uniform(rng, 10.0, 15.0);
  p.bolus_adherence = uniform(rng, 0.75, 0.95);
  p.snack_probability = uniform(rng, 0.2, 0.5);
  p.cgm_noise_sd = uniform(rng, 2.0, 4.0);
  p.params.validate();
  return p;
}

data::SubjectRecord synthesize(const SubjectProfile& profile, int days, std::uint64_t seed, std::int64_t start) {
  if (days < 1) throw ValidationError("days must be positive");
  const predictor::SurrogateParams& params = profile.params;
  Rng rng(mix_seed(seed, 0x73796e7468));
  data::SubjectRecord record;
  record.subject_id = profile.id;
  record.sleep_synthesized = true;
  const int ticks = days * kTicksPerDay;
  record.ticks.reserve(static_cast<std::size_t>(ticks));

  predictor::Compartments state;
  state.glucose = params.basal_glucose;
  int last_correction = -1000, last_treatment = -1000;
  mealgen::MealSchedule schedule;
  int snack_tick = -1;
  double snack_carbs = 0.0;
  for (int t = 0; t < ticks; ++t) {
    const int day = t / kTicksPerDay;
    const int tod = t % kTicksPerDay;
    if (tod == 0) {
      schedule = mealgen::sample_schedule(mix_seed(seed, 0x646179000000ULL + static_cast<std::uint64_t>(day)));
      snack_tick = -1;
      if (uniform(rng, 0.0, 1.0) < profile.snack_probability) {
        snack_tick = static_cast<int>(uniform(rng, 15.0, 17.0) * kTicksPerHour);
        snack_carbs = std::round(uniform(rng, 10.0, 30.0));
      }
    }
    const int hour = tod / kTicksPerHour;
    const int slot = tod % kTicksPerHour;
    double carbs = 0.0, bolus = 0.0;
    for (const mealgen::MealEvent& m : mealgen::meals_in_hour(schedule, hour)) {
      if (m.slot != slot) continue;
      carbs += std::round(m.carbs);
      if (uniform(rng, 0.0, 1.0) < profile.bolus_adherence)
        bolus += std::round(2.0 * m.carbs / profile.carb_ratio) / 2.0;
    }
    if (tod == snack_tick) carbs += snack_carbs;
    const double g = state.glucose;
    if (g > 250.0 && t - last_correction > 36 && uniform(rng, 0.0, 1.0) < 0.05) {
      bolus += std::round(2.0 * (g - 150.0) / 50.0) / 2.0;
      last_correction = t;
    }
    if (g < 70.0 && t - last_treatment > 6 && uniform(rng, 0.0, 1.0) < 0.3) {
      carbs += 15.0;
      last_treatment = t;
    }

    data::RecordTick tick;
    tick.time = start + static_cast<std::int64_t>(t) * kMinutesPerTick * 60;
    tick.glucose = std::clamp(std::round(10.0 * (g + profile.cgm_noise_sd * standard_normal(rng))) / 10.0,
                              kMinGlucose, kMaxGlucose);
    tick.carbs = carbs;
    tick.bolus = bolus;
    tick.basal = params.basal_rate;
    tick.sleep = data::default_sleep_flag(hour);
    record.ticks.push_back(tick);
    state = predictor::surrogate_step(state, carbs, bolus, params.basal_rate, kMinutesPerTick, params);
  }
  return record;
}

std::vector<std::string> write_fixtures(const std::filesystem::path& dir, int subjects, int days, std::uint64_t seed) {
  if (subjects < 1) throw ValidationError("need at least one subject");
  std::filesystem::create_directories(dir);
  std::vector<std::string> ids;
  for (int i = 1; i <= subjects; ++i) {
    const SubjectProfile profile = subject_profile(i, seed);
    const data::SubjectRecord record = synthesize(profile, days, mix_seed(seed, static_cast<std::uint64_t>(i)));
    data::write_csv(record, dir / (profile.id + ".csv"));
    std::ofstream out(dir / (profile.id + ".surrogate.json"));
    out << predictor::to_json(profile.params).dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write surrogate parameters for " + profile.id);
    ids.push_back(profile.id);
  }
  return ids;
}

predictor::SurrogateParams load_subject_params(const std::filesystem::path& dir, const std::string& subject) {
  const std::filesystem::path path = dir / (subject + ".surrogate.json");
  if (!std::filesystem::exists(path)) return {};
  std::ifstream in(path);
  try {
    return predictor::surrogate_params_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

}  // namespace guide::fixtures
