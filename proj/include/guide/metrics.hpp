#pragma once

// Glycemic outcome metrics, behavioral profiles with their similarity
// scores, and the paired nonparametric comparison machinery.

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace guide::metrics {

class DegenerateSample : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct GlycemicSummary {
  double tir_pct = 0.0;
  double tar_pct = 0.0;
  double tbr_pct = 0.0;
  double cv_pct = 0.0;
};

/// TIR counts 70 <= g <= 180; CV uses the population standard deviation.
GlycemicSummary glycemic_summary(std::span<const double> glucose);

nlohmann::json to_json(const GlycemicSummary& s);

enum class EventKind { Meal, Bolus };

struct BehaviorEvent {
  double time_hours = 0.0;
  EventKind kind = EventKind::Meal;
  double magnitude = 0.0;
};

/// Six-feature behavioral signature. Gap fields fall back to the observation
/// horizon (in hours) when fewer than two events of that kind occurred.
struct BehavioralProfile {
  double meal_freq = 0.0;   // events/day
  double avg_carbs = 0.0;   // g
  double bolus_freq = 0.0;  // events/day
  double avg_bolus = 0.0;   // U
  double meal_gap = 0.0;    // h
  double bolus_gap = 0.0;   // h

  std::vector<double> as_vector() const;
};

BehavioralProfile behavioral_profile(std::span<const BehaviorEvent> events, double days);

/// Elementwise mean of several profiles.
BehavioralProfile mean_profile(std::span<const BehavioralProfile> profiles);

nlohmann::json to_json(const BehavioralProfile& p);

double cosine_similarity(std::span<const double> x, std::span<const double> y);

/// Mean relative difference against reference `y`; every y_i must be nonzero.
double mrd(std::span<const double> x, std::span<const double> y);

/// ||x - y||_1 / ||y||_1.
double pnd(std::span<const double> x, std::span<const double> y);

struct Similarity {
  double cosine = 0.0;
  double mrd = 0.0;
  double pnd = 0.0;
};

Similarity profile_similarity(const BehavioralProfile& agent, const BehavioralProfile& reference);

enum class Alternative { TwoSided, Greater, Less };

struct WilcoxonResult {
  double statistic = 0.0;  // W+ (sum of ranks of positive differences)
  std::size_t n = 0;       // nonzero differences
  bool exact = false;
  double p_value = 1.0;
};

/// Paired signed-rank test on x - y. Exact null distribution for n <= 12 with
/// distinct magnitudes; otherwise normal approximation with tie and
/// continuity corrections. Zero differences are dropped.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y,
                                    Alternative alternative = Alternative::TwoSided);

/// Step-down Holm adjustment, returned in input order.
std::vector<double> holm_bonferroni(std::span<const double> raw_p);

}  // namespace guide::metrics
