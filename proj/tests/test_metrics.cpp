#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "guide/core.hpp"
#include "guide/metrics.hpp"
#include "guide/random.hpp"
#include "oracles.hpp"

using namespace guide;
using namespace guide::metrics;

TEST_CASE("glycemic summary fixtures") {
  const std::vector<double> g{60, 70, 100, 180, 181, 250, 69.9, 120};
  const GlycemicSummary s = glycemic_summary(g);
  CHECK(s.tbr_pct == 25.0);
  CHECK(s.tar_pct == 25.0);
  CHECK(s.tir_pct == 50.0);
  double mean = 0;
  for (double x : g) mean += x / g.size();
  double var = 0;
  for (double x : g) var += (x - mean) * (x - mean) / g.size();
  CHECK(s.cv_pct == doctest::Approx(100 * std::sqrt(var) / mean).epsilon(1e-12));
  CHECK(glycemic_summary(std::vector<double>(10, 100.0)).cv_pct == 0.0);
  CHECK_THROWS_AS(glycemic_summary(std::vector<double>{}), ValidationError);
  CHECK_THROWS_AS(glycemic_summary(std::vector<double>{100, std::nan("")}), ValidationError);
}

TEST_CASE("property: TIR + TAR + TBR = 100") {
  Rng rng(1);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> g(1 + static_cast<std::size_t>(uniform(rng, 0, 300)));
    for (double& x : g) x = uniform(rng, 40, 400);
    const GlycemicSummary s = glycemic_summary(g);
    CHECK(std::abs(s.tir_pct + s.tar_pct + s.tbr_pct - 100.0) <= 1e-9);
  }
}

TEST_CASE("similarity fixtures") {
  using V = std::vector<double>;
  CHECK(cosine_similarity(V{1, 0}, V{0, 1}) == 0.0);
  CHECK(cosine_similarity(V{1, 2, 3}, V{2, 4, 6}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cosine_similarity(V{1, 2}, V{-2, -4}) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(cosine_similarity(V{1, 1}, V{1, 0}) == doctest::Approx(1 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(cosine_similarity(V{0, 0}, V{1, 2}), ValidationError);
  CHECK_THROWS_AS(cosine_similarity(V{1}, V{1, 2}), ValidationError);

  CHECK(mrd(V{1, 2}, V{1, 2}) == 0.0);
  CHECK(std::abs(mrd(V{2, 2}, V{1, 2}) - 0.5) <= 1e-12);
  CHECK_THROWS_AS(mrd(V{1, 2}, V{0, 2}), ValidationError);

  CHECK(pnd(V{1, 2, 3}, V{1, 2, 3}) == 0.0);
  CHECK(std::abs(pnd(V{2, 2, 3}, V{1, 2, 3}) - 1.0 / 6.0) <= 1e-12);
  CHECK(std::abs(pnd(V{2, 4, 6}, V{1, 2, 3}) - 1.0) <= 1e-12);
  CHECK_THROWS_AS(pnd(V{1, 2}, V{0, 0}), ValidationError);
}

TEST_CASE("property: cosine range and collinearity") {
  Rng rng(2);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> x(6), y(6);
    for (double& v : x) v = uniform(rng, -5, 5);
    for (double& v : y) v = uniform(rng, -5, 5);
    const double c = cosine_similarity(x, y);
    CHECK((c >= -1 && c <= 1));
    CHECK(c < 1 - 1e-9);  // random pairs are never collinear
    const double k = uniform(rng, 0.01, 100);
    std::vector<double> kx = x;
    for (double& v : kx) v *= k;
    CHECK(cosine_similarity(kx, x) == doctest::Approx(1.0).epsilon(1e-12));
    for (double& v : kx) v = -v;
    CHECK(cosine_similarity(kx, x) == doctest::Approx(-1.0).epsilon(1e-12));
  }
}

TEST_CASE("property: mrd(c y, y) = |c - 1|") {
  Rng rng(3);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> y(6);
    for (double& v : y) v = uniform(rng, 0.1, 50) * (uniform(rng, 0, 1) < 0.5 ? -1 : 1);
    double c = uniform(rng, -3, 3);
    if (c == 0) c = 1.5;
    std::vector<double> x = y;
    for (double& v : x) v *= c;
    CHECK(mrd(x, y) == doctest::Approx(std::abs(c - 1)).epsilon(1e-12));
    CHECK(pnd(x, y) == doctest::Approx(std::abs(c - 1)).epsilon(1e-12));
  }
}

TEST_CASE("behavioral profiles") {
  const std::vector<BehaviorEvent> events{{1.0, EventKind::Meal, 40},   {7.0, EventKind::Meal, 60},
                                          {13.0, EventKind::Meal, 80},  {7.5, EventKind::Bolus, 4},
                                          {25.0, EventKind::Meal, 20}};
  const BehavioralProfile p = behavioral_profile(events, 2.0);
  CHECK(p.meal_freq == 2.0);
  CHECK(p.avg_carbs == 50.0);
  CHECK(p.bolus_freq == 0.5);
  CHECK(p.avg_bolus == 4.0);
  CHECK(p.meal_gap == 8.0);
  CHECK(p.bolus_gap == 48.0);  // single bolus: horizon fallback
  const BehavioralProfile none = behavioral_profile({}, 1.0);
  CHECK(none.meal_gap == 24.0);
  CHECK(none.avg_carbs == 0.0);
  CHECK_THROWS_AS(behavioral_profile(events, 0.0), ValidationError);

  const std::vector<BehavioralProfile> both{p, none};
  const BehavioralProfile m = mean_profile(both);
  CHECK(m.meal_freq == 1.0);
  CHECK(m.meal_gap == 16.0);
  CHECK(p.as_vector() == std::vector<double>{2, 50, 0.5, 4, 8, 48});

  const Similarity self = profile_similarity(p, p);
  CHECK(self.cosine == doctest::Approx(1.0));
  CHECK(self.mrd == 0.0);
  CHECK(self.pnd == 0.0);
  CHECK_THROWS_AS(profile_similarity(p, none), ValidationError);  // zero reference components
}

TEST_CASE("Wilcoxon fixtures") {
  using V = std::vector<double>;
  const V zeros(6, 0.0);
  WilcoxonResult r = wilcoxon_signed_rank(V{1, 2, 3, 4, 5, 6}, zeros);
  CHECK(r.exact);
  CHECK(r.statistic == 21.0);
  CHECK(r.p_value == doctest::Approx(2.0 / 64).epsilon(1e-12));
  CHECK(wilcoxon_signed_rank(V{1, 2, 3, 4, 5, 6}, zeros, Alternative::Greater).p_value == doctest::Approx(1.0 / 64));
  CHECK(wilcoxon_signed_rank(V{1, 2, 3, 4, 5, 6}, zeros, Alternative::Less).p_value == 1.0);

  CHECK_THROWS_AS(wilcoxon_signed_rank(V{1, 2, 3, 4, 5}, V{1, 2, 3, 4, 5}), DegenerateSample);
  CHECK_THROWS_AS(wilcoxon_signed_rank(V{1, 2, 0, 0, 0}, V{0, 0, 0, 0, 0}), DegenerateSample);
  CHECK_THROWS_AS(wilcoxon_signed_rank(V{1, 2}, V{1}), ValidationError);

  // d and -d paired: W+ sits at the center, p = 1
  r = wilcoxon_signed_rank(V{1, -1.5, 2.5, -3.5, 4.5, -5.5, 6.5, -7.5}, V(8, 0.0));
  const V d{1, -1.5, 2.5, -3.5, 4.5, -5.5, 6.5, -7.5};
  CHECK(r.p_value == doctest::Approx(oracles::signed_rank_enumeration(d).two_sided()).epsilon(1e-12));
  r = wilcoxon_signed_rank(V{1, -1, 2, -2, 3, -3}, V(6, 0.0));
  CHECK_FALSE(r.exact);  // tied magnitudes
  CHECK(r.p_value == 1.0);
}

TEST_CASE("property: exact branch matches 2^n enumeration") {
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 5 + static_cast<std::size_t>(uniform(rng, 0, 6));  // 5..10
    std::vector<double> x(n), y(n), d(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = uniform(rng, 0, 100);
      y[i] = x[i] - uniform(rng, -1, 2) * (1.0 + 0.37 * static_cast<double>(i));
      d[i] = x[i] - y[i];
    }
    const oracles::SignedRankTail tail = oracles::signed_rank_enumeration(d);
    const WilcoxonResult two = wilcoxon_signed_rank(x, y);
    REQUIRE(two.exact);
    CHECK(std::abs(two.p_value - tail.two_sided()) <= 1e-12);
    CHECK(std::abs(wilcoxon_signed_rank(x, y, Alternative::Greater).p_value - tail.ge) <= 1e-12);
    CHECK(std::abs(wilcoxon_signed_rank(x, y, Alternative::Less).p_value - tail.le) <= 1e-12);
  }
}

TEST_CASE("normal branch") {
  // n = 20, all positive, distinct: W+ = 210; z from the continuity-corrected formula
  std::vector<double> x(20), y(20, 0.0);
  for (int i = 0; i < 20; ++i) x[i] = i + 1;
  const WilcoxonResult r = wilcoxon_signed_rank(x, y);
  CHECK_FALSE(r.exact);
  const double mean = 105, sd = std::sqrt(20.0 * 21 * 41 / 24);
  const double z = (210 - mean - 0.5) / sd;
  CHECK(r.p_value == doctest::Approx(std::erfc(z / std::sqrt(2.0))).epsilon(1e-12));
  // n = 12 with distinct magnitudes is still exact
  std::vector<double> a(12), b(12, 0.0), d(12);
  Rng rng(5);
  for (int i = 0; i < 12; ++i) d[i] = a[i] = (i + 1) * (uniform(rng, 0, 1) < 0.3 ? -1.0 : 1.0);
  CHECK(std::abs(wilcoxon_signed_rank(a, b).p_value - oracles::signed_rank_enumeration(d).two_sided()) < 1e-12);
}

TEST_CASE("Holm-Bonferroni") {
  using V = std::vector<double>;
  const V adj = holm_bonferroni(V{0.01, 0.02, 0.20});
  CHECK(std::abs(adj[0] - 0.03) <= 1e-12);
  CHECK(std::abs(adj[1] - 0.04) <= 1e-12);
  CHECK(std::abs(adj[2] - 0.20) <= 1e-12);
  CHECK(holm_bonferroni(V{0.2, 0.01, 0.02}) == V{adj[2], adj[0], adj[1]});
  CHECK(holm_bonferroni(V{0.3}) == V{0.3});
  CHECK(holm_bonferroni(V{0.5, 0.5}) == V{1.0, 1.0});
  CHECK(holm_bonferroni(V{}).empty());
  CHECK_THROWS_AS(holm_bonferroni(V{0.1, 1.2}), ValidationError);
}

TEST_CASE("property: raw <= Holm <= Bonferroni, monotone in sorted order") {
  Rng rng(6);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> p(1 + static_cast<std::size_t>(uniform(rng, 0, 12)));
    for (double& x : p) x = std::pow(uniform(rng, 0, 1), 3);
    const auto adj = holm_bonferroni(p);
    const double m = static_cast<double>(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      CHECK(adj[i] >= p[i]);
      CHECK(adj[i] <= std::min(1.0, m * p[i]) + 1e-15);
      for (std::size_t j = 0; j < p.size(); ++j)
        if (p[i] < p[j]) CHECK(adj[i] <= adj[j]);
    }
  }
}
