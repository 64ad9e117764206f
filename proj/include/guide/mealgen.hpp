#pragma once

// Main-meal generator: one breakfast, lunch and dinner per simulated day,
// drawn independently of the agent.

#include <array>
#include <cstdint>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "guide/random.hpp"

namespace guide::mealgen {

enum class MealType { Breakfast, Lunch, Dinner };

std::string_view to_string(MealType type);

struct MealWindow {
  MealType type;
  int first_hour;  // inclusive
  int last_hour;   // inclusive
};

inline constexpr std::array<MealWindow, 3> kMealWindows{{
    {MealType::Breakfast, 7, 9},
    {MealType::Lunch, 12, 14},
    {MealType::Dinner, 19, 22},
}};

struct CarbDistribution {
  double mean = 65.0;
  double sd = 15.0;
  double min = 20.0;
  double max = 100.0;
};

struct ScheduledMeal {
  MealType type = MealType::Breakfast;
  int hour = 0;
  int slot = 0;
  double carbs = 0.0;

  friend bool operator==(const ScheduledMeal&, const ScheduledMeal&) = default;
};

struct MealSchedule {
  std::array<ScheduledMeal, 3> meals{};

  friend bool operator==(const MealSchedule&, const MealSchedule&) = default;
};

struct MealEvent {
  int slot = 0;
  double carbs = 0.0;
};

/// Gaussian restricted to [min, max], sampled by rejection.
double sample_truncated_normal(Rng& rng, const CarbDistribution& dist);

MealSchedule sample_schedule(std::uint64_t seed, const CarbDistribution& dist = {});

std::vector<MealEvent> meals_in_hour(const MealSchedule& schedule, int hour);

/// Throws ValidationError if any meal violates its window, slot range or carb bounds.
void validate(const MealSchedule& schedule, const CarbDistribution& dist = {});

nlohmann::json to_json(const MealSchedule& schedule);
MealSchedule schedule_from_json(const nlohmann::json& j);

}  // namespace guide::mealgen
