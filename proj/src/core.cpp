#include "guide/core.hpp"

#include <cmath>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace guide {

namespace {

std::string at(std::string_view channel, int index) {
  return std::string(channel) + "[" + std::to_string(index) + "]";
}

double unit_interval(double v) { return (v + 1.0) / 2.0; }

}  // namespace

void validate(const StateWindow& w) {
  for (int k = 0; k < kWindowTicks; ++k) {
    if (w.hour_of_day[k] < 0 || w.hour_of_day[k] > 23)
      throw ValidationError(at("hour_of_day", k) + " outside 0..23");
    if (w.sleep[k] != 0 && w.sleep[k] != 1) throw ValidationError(at("sleep", k) + " not in {0,1}");
    if (!(w.glucose[k] >= kMinGlucose && w.glucose[k] <= kMaxGlucose))
      throw ValidationError(at("glucose", k) + " outside [20,600]");
    if (!(w.carbs[k] >= 0.0)) throw ValidationError(at("carbs", k) + " negative");
    if (!(w.bolus[k] >= 0.0)) throw ValidationError(at("bolus", k) + " negative");
    if (!(w.minutes_since_meal[k] >= 0.0 && w.minutes_since_meal[k] <= kMaxElapsedMinutes))
      throw ValidationError(at("minutes_since_meal", k) + " outside [0,1440]");
    if (!(w.minutes_since_inject[k] >= 0.0 && w.minutes_since_inject[k] <= kMaxElapsedMinutes))
      throw ValidationError(at("minutes_since_inject", k) + " outside [0,1440]");
  }
  if (!elapsed_channel_consistent(w.minutes_since_meal, w.carbs))
    throw ValidationError("minutes_since_meal inconsistent with carbs channel");
  if (!elapsed_channel_consistent(w.minutes_since_inject, w.bolus))
    throw ValidationError("minutes_since_inject inconsistent with bolus channel");
}

bool elapsed_channel_consistent(std::span<const double> elapsed, std::span<const double> events) {
  if (elapsed.size() != events.size()) return false;
  for (std::size_t k = 0; k < elapsed.size(); ++k) {
    if (events[k] > 0.0 && elapsed[k] != 0.0) return false;
    if (k > 0 && elapsed[k] != advance_elapsed(elapsed[k - 1], events[k] > 0.0)) return false;
  }
  return true;
}

std::string_view to_string(ActionType type) {
  switch (type) {
    case ActionType::Nothing: return "NOTHING";
    case ActionType::Eat: return "EAT";
    case ActionType::Inject: return "INJECT";
  }
  return "?";
}

ActionType parse_action_type(std::string_view name) {
  if (name == "NOTHING" || name == "nothing") return ActionType::Nothing;
  if (name == "EAT" || name == "eat") return ActionType::Eat;
  if (name == "INJECT" || name == "inject") return ActionType::Inject;
  throw ValidationError("unknown action type '" + std::string(name) + "'");
}

ActionType BehavioralAction::type() const {
  ActionType best = ActionType::Nothing;
  double best_score = score_nothing;
  if (score_eat > best_score) {
    best = ActionType::Eat;
    best_score = score_eat;
  }
  if (score_inject > best_score) best = ActionType::Inject;
  return best;
}

BehavioralAction make_action(ActionType type, double carbs, double insulin, int slot) {
  BehavioralAction a;
  a.score_nothing = type == ActionType::Nothing ? 1.0 : -1.0;
  a.score_eat = type == ActionType::Eat ? 1.0 : -1.0;
  a.score_inject = type == ActionType::Inject ? 1.0 : -1.0;
  a.carb_amount = carbs;
  a.insulin_amount = insulin;
  a.slot = slot;
  return a;
}

void validate(const BehavioralAction& a) {
  if (!std::isfinite(a.score_nothing) || !std::isfinite(a.score_eat) || !std::isfinite(a.score_inject))
    throw ValidationError("action scores must be finite");
  if (!(a.carb_amount >= kMinCarbs && a.carb_amount <= kMaxCarbs))
    throw ValidationError("carb_amount " + std::to_string(a.carb_amount) + " outside [5,50] g");
  if (!(a.insulin_amount >= kMinInsulin && a.insulin_amount <= kMaxInsulin))
    throw ValidationError("insulin_amount " + std::to_string(a.insulin_amount) + " outside [2,15] U");
  if (a.slot < 0 || a.slot >= kSlotsPerHour)
    throw ValidationError("slot " + std::to_string(a.slot) + " outside 0..11");
}

BehavioralAction decode_action(const RawActionVector& raw) {
  for (int i = 0; i < kActionDim; ++i) {
    if (!(raw[i] >= -1.0 && raw[i] <= 1.0))
      throw ValidationError("raw action component " + std::to_string(i) + " outside [-1,1]");
  }
  BehavioralAction a;
  a.score_nothing = raw[0];
  a.score_eat = raw[1];
  a.score_inject = raw[2];
  a.carb_amount = kMinCarbs + unit_interval(raw[3]) * (kMaxCarbs - kMinCarbs);
  a.insulin_amount = kMinInsulin + unit_interval(raw[4]) * (kMaxInsulin - kMinInsulin);
  const int slot = static_cast<int>(std::floor(unit_interval(raw[5]) * kSlotsPerHour));
  a.slot = slot > kSlotsPerHour - 1 ? kSlotsPerHour - 1 : slot;
  return a;
}

RawActionVector encode_action(const BehavioralAction& a) {
  validate(a);
  RawActionVector raw{};
  const ActionType type = a.type();
  raw[0] = type == ActionType::Nothing ? 1.0 : -1.0;
  raw[1] = type == ActionType::Eat ? 1.0 : -1.0;
  raw[2] = type == ActionType::Inject ? 1.0 : -1.0;
  raw[3] = 2.0 * (a.carb_amount - kMinCarbs) / (kMaxCarbs - kMinCarbs) - 1.0;
  raw[4] = 2.0 * (a.insulin_amount - kMinInsulin) / (kMaxInsulin - kMinInsulin) - 1.0;
  // Slot k encodes at the left edge of its decode bin; nudge up if rounding
  // lands in the previous bin.
  double s = 2.0 * a.slot / kSlotsPerHour - 1.0;
  while (static_cast<int>(std::floor(unit_interval(s) * kSlotsPerHour)) < a.slot)
    s = std::nextafter(s, 2.0);
  raw[5] = s;
  return raw;
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace guide
