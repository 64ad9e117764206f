#pragma once

// Domain types shared across the workbench: the 6-hour observation window,
// the behavioral action and its [-1,1]^6 network parameterization, and the
// replay transition.

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace guide {

inline constexpr int kWindowTicks = 72;    // 6 h at 5-minute resolution
inline constexpr int kTicksPerHour = 12;
inline constexpr int kTicksPerDay = 288;
inline constexpr int kMinutesPerTick = 5;
inline constexpr int kEpisodeSteps = 24;   // decision hours per episode
inline constexpr int kActionDim = 6;

inline constexpr double kMinGlucose = 20.0;
inline constexpr double kMaxGlucose = 600.0;
inline constexpr double kMinCarbs = 5.0;
inline constexpr double kMaxCarbs = 50.0;
inline constexpr double kMinInsulin = 2.0;
inline constexpr double kMaxInsulin = 15.0;
inline constexpr int kSlotsPerHour = 12;
inline constexpr double kMaxElapsedMinutes = 1440.0;  // elapsed-time channels saturate at 24 h

/// Input that violates a documented contract (ranges, shapes, schema).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A computation produced a non-finite or otherwise unusable number.
class NumericFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Count of 5-minute intervals since the start of a subject record.
struct Tick {
  std::int64_t index = 0;

  constexpr double hours() const { return static_cast<double>(index) / kTicksPerHour; }
  friend constexpr auto operator<=>(const Tick&, const Tick&) = default;
};

template <class T>
using Channel = std::array<T, kWindowTicks>;

/// The agent's observation: seven channels over the last 72 ticks, oldest first.
struct StateWindow {
  Channel<int> hour_of_day{};
  Channel<int> sleep{};
  Channel<double> glucose{};
  Channel<double> carbs{};
  Channel<double> bolus{};
  Channel<double> minutes_since_meal{};
  Channel<double> minutes_since_inject{};

  friend bool operator==(const StateWindow&, const StateWindow&) = default;
};

/// Next value of an elapsed-time channel: 0 on an event tick, otherwise the
/// previous value plus 5 minutes, saturating at 24 h.
constexpr double advance_elapsed(double previous, bool event) {
  if (event) return 0.0;
  const double next = previous + kMinutesPerTick;
  return next > kMaxElapsedMinutes ? kMaxElapsedMinutes : next;
}

/// Throws ValidationError naming the first offending channel and index.
void validate(const StateWindow& window);

/// True when every entry k>0 of `elapsed` equals advance_elapsed(elapsed[k-1], events[k] > 0).
bool elapsed_channel_consistent(std::span<const double> elapsed, std::span<const double> events);

enum class ActionType : int { Nothing = 0, Eat = 1, Inject = 2 };

std::string_view to_string(ActionType type);
ActionType parse_action_type(std::string_view name);

struct BehavioralAction {
  double score_nothing = 1.0;
  double score_eat = -1.0;
  double score_inject = -1.0;
  double carb_amount = kMinCarbs;
  double insulin_amount = kMinInsulin;
  int slot = 0;

  /// argmax of the three scores; ties resolve toward NOTHING, then EAT.
  ActionType type() const;

  friend bool operator==(const BehavioralAction&, const BehavioralAction&) = default;
};

/// One-hot scores (+1 for `type`, -1 otherwise) with the given magnitudes.
BehavioralAction make_action(ActionType type, double carbs, double insulin, int slot);

void validate(const BehavioralAction& action);

/// Network-side action: six components in [-1,1].
using RawActionVector = std::array<double, kActionDim>;

BehavioralAction decode_action(const RawActionVector& raw);
RawActionVector encode_action(const BehavioralAction& action);

struct Transition {
  StateWindow state;
  RawActionVector action{};
  double reward = 0.0;  // scaled
  StateWindow next_state;
  bool done = false;
};

/// Keeps large training temporaries on the heap instead of fresh mmap
/// pages (glibc only, no-op elsewhere). Call once at program start.
void tune_allocator();

}  // namespace guide
