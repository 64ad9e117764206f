#include "guide/mealgen.hpp"

#include <string>

#include "guide/core.hpp"

namespace guide::mealgen {

std::string_view to_string(MealType type) {
  switch (type) {
    case MealType::Breakfast: return "breakfast";
    case MealType::Lunch: return "lunch";
    case MealType::Dinner: return "dinner";
  }
  return "?";
}

namespace {

MealType parse_meal_type(const std::string& s) {
  if (s == "breakfast") return MealType::Breakfast;
  if (s == "lunch") return MealType::Lunch;
  if (s == "dinner") return MealType::Dinner;
  throw ValidationError("unknown meal type '" + s + "'");
}

}  // namespace

double sample_truncated_normal(Rng& rng, const CarbDistribution& dist) {
  if (!(dist.sd > 0.0) || !(dist.min < dist.max))
    throw ValidationError("truncated normal needs sd > 0 and min < max");
  std::normal_distribution<double> normal(dist.mean, dist.sd);
  // Acceptance is ~0.99 at the default parameters; the cap only guards
  // pathological configurations.
  for (int attempt = 0; attempt < 1'000'000; ++attempt) {
    const double x = normal(rng);
    if (x >= dist.min && x <= dist.max) return x;
  }
  throw NumericFault("truncated normal rejection sampler did not accept within 1e6 draws");
}

MealSchedule sample_schedule(std::uint64_t seed, const CarbDistribution& dist) {
  Rng rng(mix_seed(seed, 0x6d65616c));
  MealSchedule schedule;
  for (std::size_t i = 0; i < kMealWindows.size(); ++i) {
    const MealWindow& w = kMealWindows[i];
    ScheduledMeal& m = schedule.meals[i];
    m.type = w.type;
    m.hour = std::uniform_int_distribution<int>(w.first_hour, w.last_hour)(rng);
    m.slot = std::uniform_int_distribution<int>(0, kSlotsPerHour - 1)(rng);
    m.carbs = sample_truncated_normal(rng, dist);
  }
  return schedule;
}

std::vector<MealEvent> meals_in_hour(const MealSchedule& schedule, int hour) {
  if (hour < 0 || hour > 23) throw ValidationError("hour " + std::to_string(hour) + " outside 0..23");
  std::vector<MealEvent> events;
  for (const ScheduledMeal& m : schedule.meals) {
    if (m.hour == hour) events.push_back({m.slot, m.carbs});
  }
  return events;
}

void validate(const MealSchedule& schedule, const CarbDistribution& dist) {
  for (std::size_t i = 0; i < kMealWindows.size(); ++i) {
    const ScheduledMeal& m = schedule.meals[i];
    const MealWindow& w = kMealWindows[i];
    const std::string name(to_string(w.type));
    if (m.type != w.type) throw ValidationError("meal " + std::to_string(i) + " should be " + name);
    if (m.hour < w.first_hour || m.hour > w.last_hour)
      throw ValidationError(name + " hour " + std::to_string(m.hour) + " outside its window");
    if (m.slot < 0 || m.slot >= kSlotsPerHour) throw ValidationError(name + " slot outside 0..11");
    if (!(m.carbs >= dist.min && m.carbs <= dist.max))
      throw ValidationError(name + " carbs outside [" + std::to_string(dist.min) + "," +
                            std::to_string(dist.max) + "]");
  }
}

nlohmann::json to_json(const MealSchedule& schedule) {
  nlohmann::json meals = nlohmann::json::array();
  for (const ScheduledMeal& m : schedule.meals) {
    meals.push_back({{"type", to_string(m.type)}, {"hour", m.hour}, {"slot", m.slot}, {"carbs", m.carbs}});
  }
  return {{"meals", meals}};
}

MealSchedule schedule_from_json(const nlohmann::json& j) {
  const auto& meals = j.at("meals");
  if (!meals.is_array() || meals.size() != 3) throw ValidationError("schedule needs exactly 3 meals");
  MealSchedule schedule;
  for (std::size_t i = 0; i < 3; ++i) {
    schedule.meals[i].type = parse_meal_type(meals[i].at("type").get<std::string>());
    schedule.meals[i].hour = meals[i].at("hour").get<int>();
    schedule.meals[i].slot = meals[i].at("slot").get<int>();
    schedule.meals[i].carbs = meals[i].at("carbs").get<double>();
  }
  validate(schedule);
  return schedule;
}

}  // namespace guide::mealgen
