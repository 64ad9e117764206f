#include "guide/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "guide/core.hpp"

namespace guide::metrics {

namespace {

void require_same_length(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ValidationError("vectors differ in length");
  if (x.empty()) throw ValidationError("vectors are empty");
}

double mean_gap_hours(std::vector<double> times, double horizon_hours) {
  if (times.size() < 2) return horizon_hours;
  std::sort(times.begin(), times.end());
  return (times.back() - times.front()) / static_cast<double>(times.size() - 1);
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Number of sign assignments of ranks 1..n giving each positive-rank sum.
std::vector<double> signed_rank_counts(std::size_t n) {
  const std::size_t max_sum = n * (n + 1) / 2;
  std::vector<double> counts(max_sum + 1, 0.0);
  counts[0] = 1.0;
  for (std::size_t r = 1; r <= n; ++r) {
    for (std::size_t s = max_sum; s >= r; --s) counts[s] += counts[s - r];
  }
  return counts;
}

}  // namespace

GlycemicSummary glycemic_summary(std::span<const double> glucose) {
  if (glucose.empty()) throw ValidationError("glycemic_summary needs a nonempty series");
  std::size_t below = 0, above = 0;
  double sum = 0.0;
  for (double g : glucose) {
    if (!(g > 0.0) || !std::isfinite(g)) throw ValidationError("glucose values must be positive and finite");
    if (g < 70.0) ++below;
    else if (g > 180.0) ++above;
    sum += g;
  }
  const double n = static_cast<double>(glucose.size());
  const double mean = sum / n;
  double ss = 0.0;
  for (double g : glucose) ss += (g - mean) * (g - mean);
  GlycemicSummary s;
  s.tbr_pct = 100.0 * static_cast<double>(below) / n;
  s.tar_pct = 100.0 * static_cast<double>(above) / n;
  s.tir_pct = 100.0 * static_cast<double>(glucose.size() - below - above) / n;
  s.cv_pct = 100.0 * std::sqrt(ss / n) / mean;
  return s;
}

nlohmann::json to_json(const GlycemicSummary& s) {
  return {{"tir_pct", s.tir_pct}, {"tar_pct", s.tar_pct}, {"tbr_pct", s.tbr_pct}, {"cv_pct", s.cv_pct}};
}

std::vector<double> BehavioralProfile::as_vector() const {
  return {meal_freq, avg_carbs, bolus_freq, avg_bolus, meal_gap, bolus_gap};
}

BehavioralProfile behavioral_profile(std::span<const BehaviorEvent> events, double days) {
  if (!(days > 0.0)) throw ValidationError("behavioral_profile needs days > 0");
  std::vector<double> meal_times, bolus_times;
  double carbs = 0.0, units = 0.0;
  for (const BehaviorEvent& e : events) {
    if (e.magnitude < 0.0) throw ValidationError("event magnitudes must be nonnegative");
    if (e.kind == EventKind::Meal) {
      meal_times.push_back(e.time_hours);
      carbs += e.magnitude;
    } else {
      bolus_times.push_back(e.time_hours);
      units += e.magnitude;
    }
  }
  const double horizon = 24.0 * days;
  BehavioralProfile p;
  p.meal_freq = static_cast<double>(meal_times.size()) / days;
  p.bolus_freq = static_cast<double>(bolus_times.size()) / days;
  p.avg_carbs = meal_times.empty() ? 0.0 : carbs / static_cast<double>(meal_times.size());
  p.avg_bolus = bolus_times.empty() ? 0.0 : units / static_cast<double>(bolus_times.size());
  p.meal_gap = mean_gap_hours(std::move(meal_times), horizon);
  p.bolus_gap = mean_gap_hours(std::move(bolus_times), horizon);
  return p;
}

BehavioralProfile mean_profile(std::span<const BehavioralProfile> profiles) {
  if (profiles.empty()) throw ValidationError("mean_profile needs at least one profile");
  BehavioralProfile m;
  for (const BehavioralProfile& p : profiles) {
    m.meal_freq += p.meal_freq;
    m.avg_carbs += p.avg_carbs;
    m.bolus_freq += p.bolus_freq;
    m.avg_bolus += p.avg_bolus;
    m.meal_gap += p.meal_gap;
    m.bolus_gap += p.bolus_gap;
  }
  const double n = static_cast<double>(profiles.size());
  m.meal_freq /= n;
  m.avg_carbs /= n;
  m.bolus_freq /= n;
  m.avg_bolus /= n;
  m.meal_gap /= n;
  m.bolus_gap /= n;
  return m;
}

nlohmann::json to_json(const BehavioralProfile& p) {
  return {{"meal_freq", p.meal_freq}, {"avg_carbs", p.avg_carbs}, {"bolus_freq", p.bolus_freq},
          {"avg_bolus", p.avg_bolus}, {"meal_gap", p.meal_gap},   {"bolus_gap", p.bolus_gap}};
}

double cosine_similarity(std::span<const double> x, std::span<const double> y) {
  require_same_length(x, y);
  double dot = 0.0, xx = 0.0, yy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dot += x[i] * y[i];
    xx += x[i] * x[i];
    yy += y[i] * y[i];
  }
  if (xx == 0.0 || yy == 0.0) throw ValidationError("cosine similarity of a zero vector is undefined");
  return std::clamp(dot / (std::sqrt(xx) * std::sqrt(yy)), -1.0, 1.0);
}

double mrd(std::span<const double> x, std::span<const double> y) {
  require_same_length(x, y);
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (y[i] == 0.0) throw ValidationError("MRD reference component " + std::to_string(i) + " is zero");
    sum += std::abs((x[i] - y[i]) / y[i]);
  }
  return sum / static_cast<double>(x.size());
}

double pnd(std::span<const double> x, std::span<const double> y) {
  require_same_length(x, y);
  double diff = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    diff += std::abs(x[i] - y[i]);
    norm += std::abs(y[i]);
  }
  if (norm == 0.0) throw ValidationError("PND reference vector has zero L1 norm");
  return diff / norm;
}

Similarity profile_similarity(const BehavioralProfile& agent, const BehavioralProfile& reference) {
  const std::vector<double> x = agent.as_vector();
  const std::vector<double> y = reference.as_vector();
  return {cosine_similarity(x, y), mrd(x, y), pnd(x, y)};
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y,
                                    Alternative alternative) {
  if (x.size() != y.size()) throw ValidationError("paired samples differ in length");
  std::vector<double> d;
  d.reserve(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double diff = x[i] - y[i];
    if (!std::isfinite(diff)) throw ValidationError("paired samples must be finite");
    if (diff != 0.0) d.push_back(diff);
  }
  if (d.empty()) throw DegenerateSample("all paired differences are zero");
  const std::size_t n = d.size();
  if (n < 5) throw DegenerateSample("signed-rank test needs at least 5 nonzero differences, got " + std::to_string(n));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return std::abs(d[a]) < std::abs(d[b]); });

  // Average ranks over tied magnitudes.
  std::vector<double> rank(n);
  bool ties = false;
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    const double t = static_cast<double>(j - i + 1);
    if (t > 1) {
      ties = true;
      tie_term += t * t * t - t;
    }
    i = j + 1;
  }
  double w_plus = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (d[i] > 0) w_plus += rank[i];
  }

  WilcoxonResult result;
  result.statistic = w_plus;
  result.n = n;
  if (n <= 12 && !ties) {
    result.exact = true;
    const std::vector<double> counts = signed_rank_counts(n);
    const double total = std::ldexp(1.0, static_cast<int>(n));
    const auto w = static_cast<std::size_t>(std::llround(w_plus));
    double le = 0.0, ge = 0.0;
    for (std::size_t s = 0; s < counts.size(); ++s) {
      if (s <= w) le += counts[s];
      if (s >= w) ge += counts[s];
    }
    le /= total;
    ge /= total;
    switch (alternative) {
      case Alternative::TwoSided: result.p_value = std::min(1.0, 2.0 * std::min(le, ge)); break;
      case Alternative::Greater: result.p_value = ge; break;
      case Alternative::Less: result.p_value = le; break;
    }
    return result;
  }

  const double nn = static_cast<double>(n);
  const double mean = nn * (nn + 1.0) / 4.0;
  const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
  if (!(var > 0.0)) throw DegenerateSample("signed-rank variance is zero");
  const double sd = std::sqrt(var);
  const double diff = w_plus - mean;
  switch (alternative) {
    case Alternative::TwoSided: {
      const double z = std::max(0.0, std::abs(diff) - 0.5) / sd;
      result.p_value = std::min(1.0, 2.0 * (1.0 - normal_cdf(z)));
      break;
    }
    case Alternative::Greater: result.p_value = 1.0 - normal_cdf((diff - 0.5) / sd); break;
    case Alternative::Less: result.p_value = normal_cdf((diff + 0.5) / sd); break;
  }
  return result;
}

std::vector<double> holm_bonferroni(std::span<const double> raw_p) {
  const std::size_t m = raw_p.size();
  for (double p : raw_p) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("p-values must lie in [0,1]");
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return raw_p[a] < raw_p[b]; });
  std::vector<double> adjusted(m);
  double running = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double scaled = static_cast<double>(m - i) * raw_p[order[i]];
    running = std::max(running, std::min(1.0, scaled));
    adjusted[order[i]] = running;
  }
  return adjusted;
}

}  // namespace guide::metrics
