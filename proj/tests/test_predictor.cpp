#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "guide/predictor.hpp"
#include "guide/random.hpp"
#include "support.hpp"

using namespace guide;
using namespace guide::predictor;

namespace {

PredictorInput flat_input(double glucose, double basal) {
  PredictorInput in;
  in.glucose.fill(glucose);
  in.basal.fill(basal);
  in.ma200.fill(glucose);
  in.glucose_class.fill(classify(glucose));
  return in;
}

PredictorInput random_input(Rng& rng, bool extreme) {
  PredictorInput in;
  for (int k = 0; k < kWindowTicks; ++k) {
    in.glucose[k] = extreme ? uniform(rng, 20, 600) : uniform(rng, 60, 250);
    in.carbs[k] = uniform(rng, 0, 1) < 0.05 ? uniform(rng, 5, extreme ? 400 : 80) : 0.0;
    in.bolus[k] = uniform(rng, 0, 1) < 0.05 ? uniform(rng, 1, extreme ? 80 : 10) : 0.0;
    in.basal[k] = uniform(rng, 0, extreme ? 10 : 2);
    in.ma200[k] = in.glucose[k];
    in.glucose_class[k] = classify(in.glucose[k]);
  }
  for (int j = 0; j < kHorizon; ++j) {
    in.planned_carbs[j] = uniform(rng, 0, 1) < 0.1 ? uniform(rng, 5, 50) : 0.0;
    in.planned_bolus[j] = uniform(rng, 0, 1) < 0.1 ? uniform(rng, 2, 15) : 0.0;
  }
  return in;
}

// Glucose trace of `ticks` surrogate steps from equilibrium with one event at t=0.
std::vector<double> response(const SurrogateParams& p, double glucose0, double carbs, double bolus, int ticks) {
  Compartments c;
  c.glucose = glucose0;
  std::vector<double> g;
  for (int k = 0; k < ticks; ++k) {
    c = surrogate_step(c, k == 0 ? carbs : 0.0, k == 0 ? bolus : 0.0, p.basal_rate, 5.0, p);
    g.push_back(c.glucose);
  }
  return g;
}

}  // namespace

TEST_CASE("glucose classes") {
  CHECK(classify(69.9) == GlucoseClass::Hypo);
  CHECK(classify(70) == GlucoseClass::Normal);
  CHECK(classify(180) == GlucoseClass::Normal);
  CHECK(classify(180.1) == GlucoseClass::Hyper);
}

TEST_CASE("make_input derives classes and the moving average from the extended history") {
  StateWindow w;
  for (int k = 0; k < kWindowTicks; ++k) w.glucose[k] = 50.0 + 3.0 * k;
  std::vector<double> ext(128, 100.0);
  ext.insert(ext.end(), w.glucose.begin(), w.glucose.end());  // 200 values
  const PredictorInput in = make_input(w, ext, 0.8);
  CHECK(in.glucose_class[0] == GlucoseClass::Hypo);
  CHECK(in.glucose_class[71] == GlucoseClass::Hyper);
  CHECK(in.basal[5] == 0.8);
  // last tick: mean of all 200
  double sum = 0;
  for (double g : ext) sum += g;
  CHECK(in.ma200[71] == doctest::Approx(sum / 200.0).epsilon(1e-12));
  // first tick of the window: only 129 values of history are available
  double first = 0;
  for (int i = 0; i <= 128; ++i) first += ext[static_cast<std::size_t>(i)];
  CHECK(in.ma200[0] == doctest::Approx(first / 129.0).epsilon(1e-12));
}

TEST_CASE("surrogate fixed point and equilibrium forecast") {
  const SurrogateParams p;
  Compartments c;
  c.glucose = p.basal_glucose;
  for (int k = 0; k < 50; ++k) c = surrogate_step(c, 0, 0, p.basal_rate, 5.0, p);
  CHECK(c.glucose == p.basal_glucose);

  const SurrogatePredictor model(p);
  const GlucoseForecast f = model.predict(flat_input(p.basal_glucose, p.basal_rate));
  for (double v : f.values) CHECK(std::abs(v - p.basal_glucose) <= 2.0);
  CHECK_THROWS_AS(surrogate_step(c, 0, 0, 1.0, 10.0, p), ValidationError);
  CHECK_THROWS_AS(surrogate_step(c, -1, 0, 1.0, 5.0, p), ValidationError);
}

TEST_CASE("surrogate follows the documented Euler update") {
  SurrogateParams p;
  p.insulin_action_gain = 3.0;
  Compartments c{4.0, 2.0, 0.5, 0.25, 150.0};
  const Compartments n = surrogate_step(c, 10.0, 1.0, 1.6, 5.0, p);
  // hand-expanded from dG/dt = -p1(G-Gb) - SI*X*G + kabs*Q2 with X = gain*I2
  const double g = 150.0 + 5.0 * (-0.01 * (150.0 - 120.0) - 8e-4 * (3.0 * 0.25) * 150.0 + 0.1 * 2.0);
  CHECK(n.glucose == doctest::Approx(g).epsilon(1e-12));
  const double q1 = 14.0;
  CHECK(n.gut1 == doctest::Approx(q1 - 5.0 * q1 / 20.0).epsilon(1e-12));
  CHECK(n.gut2 == doctest::Approx(2.0 + 5.0 * (q1 - 2.0) / 20.0).epsilon(1e-12));
  const double i1 = 0.5 + 1.0 + (1.6 - 1.0) * 5.0 / 60.0;
  CHECK(n.insulin1 == doctest::Approx(i1 - 5.0 * i1 / 35.0).epsilon(1e-12));
  CHECK(n.insulin2 == doctest::Approx(0.25 + 5.0 * (i1 - 0.25) / 35.0).epsilon(1e-12));
}

TEST_CASE("15 g of carbs peaks between 30 and 90 minutes") {
  const SurrogateParams p;
  const std::vector<double> g = response(p, p.basal_glucose, 15.0, 0.0, 48);
  const auto peak = std::max_element(g.begin(), g.end()) - g.begin();
  const double minutes = 5.0 * static_cast<double>(peak + 1);
  CHECK(minutes >= 30.0);
  CHECK(minutes <= 90.0);
  CHECK(g[static_cast<std::size_t>(peak)] > p.basal_glucose + 5.0);
}

TEST_CASE("a 5 U bolus at 250 lowers glucose at +60 min against no bolus") {
  const SurrogateParams p;
  const std::vector<double> with = response(p, 250.0, 0.0, 5.0, 12);
  const std::vector<double> without = response(p, 250.0, 0.0, 0.0, 12);
  CHECK(with[11] < without[11]);
}

TEST_CASE("carbs at the final tick give a nondecreasing forecast") {
  const SurrogateParams p;
  PredictorInput in = flat_input(p.basal_glucose, p.basal_rate);
  in.carbs[71] = 60.0;
  const GlucoseForecast f = SurrogatePredictor(p).predict(in);
  for (int j = 1; j < kHorizon; ++j) CHECK(f.values[j] >= f.values[j - 1]);
  CHECK(f.values[11] > p.basal_glucose);
}

TEST_CASE("property: forecasts stay in [20,600] and are deterministic") {
  Rng rng(21);
  const SurrogatePredictor model;
  for (int n = 0; n < 2000; ++n) {
    const PredictorInput in = random_input(rng, n % 2 == 0);
    const GlucoseForecast a = model.predict(in);
    const GlucoseForecast b = model.predict(in);
    CHECK(a.values == b.values);
    for (double v : a.values) CHECK((v >= 20.0 && v <= 600.0));
  }
}

TEST_CASE("property: surrogate response is monotone in bolus and carbs") {
  Rng rng(22);
  for (int n = 0; n < 1000; ++n) {
    SurrogateParams p;
    p.insulin_sensitivity = uniform(rng, 3e-4, 1.5e-3);
    p.carb_gain = uniform(rng, 0.05, 0.2);
    const SurrogatePredictor model(p);
    const PredictorInput base = random_input(rng, false);
    const GlucoseForecast f0 = model.predict(base);

    PredictorInput more_bolus = base;
    if (n % 2 == 0) more_bolus.bolus[static_cast<std::size_t>(n % 72)] += uniform(rng, 0.5, 8);
    else more_bolus.planned_bolus[static_cast<std::size_t>(n % 12)] += uniform(rng, 0.5, 8);
    const GlucoseForecast fb = model.predict(more_bolus);
    PredictorInput more_carbs = base;
    if (n % 2 == 0) more_carbs.carbs[static_cast<std::size_t>(n % 72)] += uniform(rng, 5, 50);
    else more_carbs.planned_carbs[static_cast<std::size_t>(n % 12)] += uniform(rng, 5, 50);
    const GlucoseForecast fc = model.predict(more_carbs);
    for (int j = 0; j < kHorizon; ++j) {
      CHECK(fb.values[j] <= f0.values[j] + 1e-9);
      CHECK(fc.values[j] >= f0.values[j] - 1e-9);
    }
  }
}

TEST_CASE("ridge regression") {
  Rng rng(23);
  Eigen::MatrixXd X(200, 4);
  for (Eigen::Index r = 0; r < X.rows(); ++r)
    for (Eigen::Index c = 0; c < 4; ++c) X(r, c) = standard_normal(rng);
  Eigen::MatrixXd truth(4, 2);
  truth << 1, -2, 0.5, 3, -1, 0, 2, 1;
  const Eigen::MatrixXd Y = X * truth;
  CHECK((fit_ridge(X, Y, 0.0) - truth).norm() < 1e-10);

  Eigen::MatrixXd dup(200, 5);
  dup << X, X.col(1);
  CHECK_THROWS_AS(fit_ridge(dup, Y, 0.0), SingularSystem);
  CHECK_NOTHROW(fit_ridge(dup, Y, 1.0));

  // closed form for a single column: w = x'y / (x'x + lambda)
  const Eigen::MatrixXd x1 = X.col(0);
  const Eigen::MatrixXd y1 = Y.col(0);
  const double expected = x1.col(0).dot(y1.col(0)) / (x1.col(0).squaredNorm() + 7.0);
  CHECK(fit_ridge(x1, y1, 7.0)(0, 0) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("autoregressive fit on a linear series is exact") {
  data::SubjectRecord r;
  r.subject_id = "L";
  for (int i = 0; i < 700; ++i) {
    data::RecordTick t;
    t.time = 1704067200 + 300 * i;
    t.glucose = 100.0 + 0.02 * i;
    r.ticks.push_back(t);
  }
  const auto model = AutoregressivePredictor::fit(r, {0, 700}, 1e-7);
  CHECK(model.training_rmse() < 1e-6);
  CHECK_THROWS_AS(AutoregressivePredictor::fit(r, {0, 700}, 0.0), SingularSystem);
  CHECK_THROWS_AS(AutoregressivePredictor::fit(r, {0, 400}, 1.0), ValidationError);
}

TEST_CASE("autoregressive model beats persistence and shrinks with ridge") {
  const testsupport::World w = testsupport::make_world(3, 30, 9);
  const data::TickRange train = w.split.predictor_train;
  const auto strong = AutoregressivePredictor::fit(w.record, train, 1.0);
  const auto weak = AutoregressivePredictor::fit(w.record, train, 0.01);
  CHECK(strong.coefficient_norm() < weak.coefficient_norm());

  const std::vector<double> ma = record_ma200(w.record);
  double se_model = 0, se_persist = 0;
  int count = 0;
  for (std::size_t t = train.begin + 80; t + 13 < train.end; t += 7) {
    const PredictorInput in = input_from_record(w.record, t, ma);
    const GlucoseForecast f = strong.predict(in);
    for (int j = 0; j < kHorizon; ++j) {
      const double y = w.record.ticks[t + 1 + static_cast<std::size_t>(j)].glucose;
      se_model += (f.values[j] - y) * (f.values[j] - y);
      se_persist += (w.record.ticks[t].glucose - y) * (w.record.ticks[t].glucose - y);
      ++count;
    }
  }
  CHECK(std::sqrt(se_model / count) < std::sqrt(se_persist / count));

  // round trip through JSON and the loader
  const auto loaded = load_predictor(strong.to_json());
  CHECK(loaded->kind() == "autoregressive");
  const PredictorInput in = input_from_record(w.record, train.begin + 500, ma);
  CHECK(loaded->predict(in).values == strong.predict(in).values);
}

TEST_CASE("record moving average matches a direct trailing mean") {
  const testsupport::World w = testsupport::make_world(1, 10, 2);
  const std::vector<double> ma = record_ma200(w.record);
  std::vector<double> g;
  for (const auto& t : w.record.ticks) g.push_back(t.glucose);
  for (std::size_t i : {0ul, 10ul, 199ul, 200ul, 777ul, g.size() - 1})
    CHECK(ma[i] == doctest::Approx(data::trailing_mean(g, i, 200)).epsilon(1e-9));
}

TEST_CASE("surrogate parameters validate and round-trip") {
  SurrogateParams p;
  p.glucose_decay = -1.0;
  CHECK_THROWS_AS(p.validate(), ValidationError);
  SurrogateParams q;
  q.carb_gain = 0.123;
  const SurrogateParams back = surrogate_params_from_json(to_json(q));
  CHECK(back.carb_gain == 0.123);
  const auto loaded = load_predictor(SurrogatePredictor(q).to_json());
  CHECK(loaded->kind() == "surrogate");
  CHECK_THROWS(load_predictor({{"kind", "glimmer"}}));
}
