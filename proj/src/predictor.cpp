#include "guide/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace guide::predictor {

namespace {

constexpr int kPerTickFeatures = 7;

double clamp_glucose(double g) { return std::clamp(g, kMinGlucose, kMaxGlucose); }

bool finite(const Compartments& c) {
  return std::isfinite(c.gut1) && std::isfinite(c.gut2) && std::isfinite(c.insulin1) && std::isfinite(c.insulin2) &&
         std::isfinite(c.glucose);
}

std::string dump(const Compartments& c) {
  std::ostringstream os;
  os << "{gut1=" << c.gut1 << ", gut2=" << c.gut2 << ", insulin1=" << c.insulin1 << ", insulin2=" << c.insulin2
     << ", glucose=" << c.glucose << "}";
  return os.str();
}

}  // namespace

GlucoseClass classify(double g) {
  if (g < 70.0) return GlucoseClass::Hypo;
  if (g > 180.0) return GlucoseClass::Hyper;
  return GlucoseClass::Normal;
}

PredictorInput make_input(const StateWindow& window, std::span<const double> extended, double basal_rate,
                          const std::array<double, kHorizon>& planned_carbs,
                          const std::array<double, kHorizon>& planned_bolus) {
  if (extended.size() < static_cast<std::size_t>(kWindowTicks))
    throw ValidationError("extended glucose history shorter than the window");
  PredictorInput in;
  const std::size_t offset = extended.size() - kWindowTicks;
  // Prefix sums over the extended history for the trailing means.
  std::vector<double> prefix(extended.size() + 1, 0.0);
  for (std::size_t i = 0; i < extended.size(); ++i) prefix[i + 1] = prefix[i] + extended[i];
  for (int k = 0; k < kWindowTicks; ++k) {
    in.glucose[k] = window.glucose[k];
    in.carbs[k] = window.carbs[k];
    in.bolus[k] = window.bolus[k];
    in.basal[k] = basal_rate;
    in.glucose_class[k] = classify(window.glucose[k]);
    const std::size_t i = offset + static_cast<std::size_t>(k);
    const std::size_t first = i + 1 >= kMovingAverageTicks ? i + 1 - kMovingAverageTicks : 0;
    in.ma200[k] = (prefix[i + 1] - prefix[first]) / static_cast<double>(i + 1 - first);
  }
  in.planned_carbs = planned_carbs;
  in.planned_bolus = planned_bolus;
  return in;
}

void SurrogateParams::validate() const {
  if (!(basal_glucose >= kMinGlucose && basal_glucose <= kMaxGlucose))
    throw ValidationError("basal_glucose outside [20,600]");
  if (!(glucose_decay > 0.0 && insulin_sensitivity >= 0.0 && insulin_action_gain >= 0.0 && carb_gain >= 0.0))
    throw ValidationError("surrogate rates must be nonnegative (glucose_decay positive)");
  if (!(carb_time_constant >= 10.0 && insulin_time_constant >= 10.0))
    throw ValidationError("surrogate time constants must be at least 10 min");
  if (!(basal_rate >= 0.0)) throw ValidationError("basal_rate must be nonnegative");
}

nlohmann::json to_json(const SurrogateParams& p) {
  return {{"basal_glucose", p.basal_glucose},
          {"glucose_decay", p.glucose_decay},
          {"insulin_sensitivity", p.insulin_sensitivity},
          {"insulin_action_gain", p.insulin_action_gain},
          {"carb_gain", p.carb_gain},
          {"carb_time_constant", p.carb_time_constant},
          {"insulin_time_constant", p.insulin_time_constant},
          {"basal_rate", p.basal_rate}};
}

SurrogateParams surrogate_params_from_json(const nlohmann::json& j) {
  SurrogateParams p;
  p.basal_glucose = j.value("basal_glucose", p.basal_glucose);
  p.glucose_decay = j.value("glucose_decay", p.glucose_decay);
  p.insulin_sensitivity = j.value("insulin_sensitivity", p.insulin_sensitivity);
  p.insulin_action_gain = j.value("insulin_action_gain", p.insulin_action_gain);
  p.carb_gain = j.value("carb_gain", p.carb_gain);
  p.carb_time_constant = j.value("carb_time_constant", p.carb_time_constant);
  p.insulin_time_constant = j.value("insulin_time_constant", p.insulin_time_constant);
  p.basal_rate = j.value("basal_rate", p.basal_rate);
  p.validate();
  return p;
}

Compartments surrogate_step(const Compartments& s, double carbs_event, double bolus_event, double basal_rate,
                            double dt, const SurrogateParams& p) {
  if (dt != static_cast<double>(kMinutesPerTick)) throw ValidationError("surrogate_step requires dt = 5 min");
  if (!(carbs_event >= 0.0 && bolus_event >= 0.0 && basal_rate >= 0.0))
    throw ValidationError("surrogate inputs must be nonnegative");
  const double gut_stage = p.carb_time_constant / 2.0;
  const double insulin_stage = p.insulin_time_constant / 2.0;
  const double gut1 = s.gut1 + carbs_event;
  const double insulin1 = s.insulin1 + bolus_event + (basal_rate - p.basal_rate) * dt / 60.0;
  const double action = p.insulin_action_gain * s.insulin2;

  Compartments next;
  next.glucose = s.glucose + dt * (-p.glucose_decay * (s.glucose - p.basal_glucose) -
                                   p.insulin_sensitivity * action * s.glucose + p.carb_gain * s.gut2);
  next.gut1 = gut1 - dt * gut1 / gut_stage;
  next.gut2 = s.gut2 + dt * (gut1 - s.gut2) / gut_stage;
  next.insulin1 = insulin1 - dt * insulin1 / insulin_stage;
  next.insulin2 = s.insulin2 + dt * (insulin1 - s.insulin2) / insulin_stage;
  if (!finite(next)) throw NumericFault("surrogate state became non-finite: " + dump(next) + " from " + dump(s));
  next.glucose = clamp_glucose(next.glucose);
  return next;
}

SurrogatePredictor::SurrogatePredictor(SurrogateParams params) : params_(params) { params_.validate(); }

GlucoseForecast SurrogatePredictor::predict(const PredictorInput& in) const {
  constexpr double dt = kMinutesPerTick;
  Compartments state;
  state.glucose = clamp_glucose(in.glucose[0]);
  for (int k = 0; k < kWindowTicks - 1; ++k) {
    state = surrogate_step(state, in.carbs[k], in.bolus[k], in.basal[k], dt, params_);
  }
  // Compartments do not depend on glucose, so re-anchoring on the last
  // observation leaves the insulin and gut state intact.
  state.glucose = clamp_glucose(in.glucose[kWindowTicks - 1]);
  GlucoseForecast forecast;
  const double basal = in.basal[kWindowTicks - 1];
  state = surrogate_step(state, in.carbs[kWindowTicks - 1], in.bolus[kWindowTicks - 1], basal, dt, params_);
  forecast.values[0] = state.glucose;
  for (int j = 1; j < kHorizon; ++j) {
    state = surrogate_step(state, in.planned_carbs[j - 1], in.planned_bolus[j - 1], basal, dt, params_);
    forecast.values[j] = state.glucose;
  }
  return forecast;
}

nlohmann::json SurrogatePredictor::to_json() const {
  return {{"kind", kind()}, {"schema_version", 1}, {"params", predictor::to_json(params_)}};
}

Eigen::MatrixXd fit_ridge(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double lambda) {
  if (X.rows() != Y.rows() || X.rows() == 0) throw ValidationError("ridge fit needs matching, nonempty rows");
  if (!(lambda >= 0.0)) throw ValidationError("ridge_lambda must be nonnegative");
  Eigen::MatrixXd gram = X.transpose() * X;
  gram.diagonal().array() += lambda;
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  const Eigen::VectorXd pivots = ldlt.vectorD().cwiseAbs();
  const double scale = std::max(1.0, gram.diagonal().cwiseAbs().maxCoeff());
  if (ldlt.info() != Eigen::Success || pivots.minCoeff() <= 1e-12 * scale)
    throw SingularSystem("normal equations are singular or ill-conditioned; increase ridge_lambda (currently " +
                         std::to_string(lambda) + ")");
  return ldlt.solve(X.transpose() * Y);
}

Eigen::VectorXd autoregressive_features(const PredictorInput& in, const LagSpec& spec) {
  if (spec.lags < 1 || spec.lags > kWindowTicks) throw ValidationError("lags must be in 1..72");
  Eigen::VectorXd x(kPerTickFeatures * spec.lags + 2 * kHorizon + 1);
  int f = 0;
  for (int k = kWindowTicks - spec.lags; k < kWindowTicks; ++k) {
    x[f++] = in.glucose[k] / 100.0;
    x[f++] = in.carbs[k] / 10.0;
    x[f++] = in.bolus[k];
    x[f++] = in.basal[k];
    x[f++] = in.glucose_class[k] == GlucoseClass::Hypo ? 1.0 : 0.0;
    x[f++] = in.glucose_class[k] == GlucoseClass::Hyper ? 1.0 : 0.0;
    x[f++] = in.ma200[k] / 100.0;
  }
  for (int j = 0; j < kHorizon; ++j) x[f++] = in.planned_carbs[j] / 10.0;
  for (int j = 0; j < kHorizon; ++j) x[f++] = in.planned_bolus[j];
  x[f++] = 1.0;
  return x;
}

std::vector<double> record_ma200(const data::SubjectRecord& record) {
  std::vector<double> out(record.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < record.size(); ++i) {
    sum += record.ticks[i].glucose;
    if (i >= kMovingAverageTicks) sum -= record.ticks[i - kMovingAverageTicks].glucose;
    out[i] = sum / static_cast<double>(std::min(i + 1, kMovingAverageTicks));
  }
  return out;
}

PredictorInput input_from_record(const data::SubjectRecord& record, std::size_t t, std::span<const double> ma200) {
  if (t + 1 < static_cast<std::size_t>(kWindowTicks) || t + kHorizon >= record.size())
    throw ValidationError("record tick " + std::to_string(t) + " lacks a full window and horizon");
  PredictorInput in;
  const std::size_t first = t + 1 - kWindowTicks;
  for (int k = 0; k < kWindowTicks; ++k) {
    const data::RecordTick& r = record.ticks[first + static_cast<std::size_t>(k)];
    in.glucose[k] = r.glucose;
    in.carbs[k] = r.carbs;
    in.bolus[k] = r.bolus;
    in.basal[k] = r.basal;
    in.glucose_class[k] = classify(r.glucose);
    in.ma200[k] = ma200[first + static_cast<std::size_t>(k)];
  }
  for (int j = 0; j < kHorizon; ++j) {
    const data::RecordTick& r = record.ticks[t + 1 + static_cast<std::size_t>(j)];
    in.planned_carbs[j] = r.carbs;
    in.planned_bolus[j] = r.bolus;
  }
  return in;
}

AutoregressivePredictor AutoregressivePredictor::fit(const data::SubjectRecord& record, data::TickRange range,
                                                     double ridge_lambda, LagSpec spec) {
  if (range.end > record.size()) throw ValidationError("fit range exceeds the record");
  if (range.size() < 500) throw ValidationError("autoregressive fit needs at least 500 ticks, got " + std::to_string(range.size()));
  const std::vector<double> ma200 = record_ma200(record);
  std::vector<std::size_t> samples;
  const std::size_t first_t = std::max<std::size_t>(range.begin + kWindowTicks - 1, kWindowTicks - 1);
  for (std::size_t t = first_t; t + kHorizon < range.end; ++t) {
    if (record.ticks[t + 1 - kWindowTicks].segment != record.ticks[t + kHorizon].segment) continue;
    samples.push_back(t);
  }
  if (samples.empty()) throw ValidationError("fit range has no complete training windows");

  const auto dim = autoregressive_features(PredictorInput{}, spec).size();
  Eigen::MatrixXd X(static_cast<Eigen::Index>(samples.size()), dim);
  Eigen::MatrixXd Y(static_cast<Eigen::Index>(samples.size()), kHorizon);
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const std::size_t t = samples[s];
    const PredictorInput in = input_from_record(record, t, ma200);
    X.row(static_cast<Eigen::Index>(s)) = autoregressive_features(in, spec).transpose();
    for (int j = 0; j < kHorizon; ++j)
      Y(static_cast<Eigen::Index>(s), j) = record.ticks[t + 1 + static_cast<std::size_t>(j)].glucose - record.ticks[t].glucose;
  }
  AutoregressivePredictor model;
  model.spec_ = spec;
  model.ridge_lambda_ = ridge_lambda;
  model.coefficients_ = fit_ridge(X, Y, ridge_lambda);
  const Eigen::MatrixXd residual = X * model.coefficients_ - Y;
  model.training_rmse_ = std::sqrt(residual.squaredNorm() / static_cast<double>(residual.size()));
  return model;
}

GlucoseForecast AutoregressivePredictor::predict(const PredictorInput& in) const {
  if (coefficients_.size() == 0) throw ValidationError("autoregressive predictor is not fitted");
  const Eigen::VectorXd x = autoregressive_features(in, spec_);
  const Eigen::VectorXd delta = coefficients_.transpose() * x;
  GlucoseForecast f;
  const double last = in.glucose[kWindowTicks - 1];
  for (int j = 0; j < kHorizon; ++j) {
    const double g = last + delta[j];
    if (!std::isfinite(g)) throw NumericFault("autoregressive forecast is non-finite");
    f.values[j] = clamp_glucose(g);
  }
  return f;
}

nlohmann::json AutoregressivePredictor::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < coefficients_.rows(); ++r) {
    std::vector<double> row(coefficients_.cols());
    for (Eigen::Index c = 0; c < coefficients_.cols(); ++c) row[static_cast<std::size_t>(c)] = coefficients_(r, c);
    rows.push_back(row);
  }
  return {{"kind", kind()},
          {"schema_version", 1},
          {"lags", spec_.lags},
          {"ridge_lambda", ridge_lambda_},
          {"training_rmse", training_rmse_},
          {"coefficients", rows}};
}

AutoregressivePredictor AutoregressivePredictor::from_json(const nlohmann::json& j) {
  AutoregressivePredictor model;
  model.spec_.lags = j.at("lags").get<int>();
  model.ridge_lambda_ = j.at("ridge_lambda").get<double>();
  model.training_rmse_ = j.value("training_rmse", 0.0);
  const auto rows = j.at("coefficients").get<std::vector<std::vector<double>>>();
  const auto expected = autoregressive_features(PredictorInput{}, model.spec_).size();
  if (static_cast<Eigen::Index>(rows.size()) != expected) throw ValidationError("coefficient matrix has wrong row count");
  model.coefficients_.resize(expected, kHorizon);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != static_cast<std::size_t>(kHorizon)) throw ValidationError("coefficient row must have 12 entries");
    for (int c = 0; c < kHorizon; ++c) model.coefficients_(static_cast<Eigen::Index>(r), c) = rows[r][static_cast<std::size_t>(c)];
  }
  return model;
}

std::shared_ptr<const GlucosePredictor> load_predictor(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "surrogate") return std::make_shared<SurrogatePredictor>(surrogate_params_from_json(j.at("params")));
  if (kind == "autoregressive") return std::make_shared<AutoregressivePredictor>(AutoregressivePredictor::from_json(j));
  throw ValidationError("unknown predictor kind '" + kind + "'");
}

}  // namespace guide::predictor
