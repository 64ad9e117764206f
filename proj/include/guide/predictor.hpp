#pragma once

// Glucose forecasters behind one interface: given 72 ticks of history and
// the events planned for the next hour, predict the next 12 glucose values.

#include <array>
#include <memory>
#include <span>
#include <string>

#include <Eigen/Dense>
#include <json.hpp>

#include "guide/core.hpp"
#include "guide/data.hpp"

namespace guide::predictor {

inline constexpr int kHorizon = kTicksPerHour;
inline constexpr std::size_t kMovingAverageTicks = 200;

enum class GlucoseClass { Hypo, Normal, Hyper };

GlucoseClass classify(double glucose);

struct PredictorInput {
  Channel<double> glucose{};
  Channel<double> carbs{};
  Channel<double> bolus{};
  Channel<double> basal{};  // U/h
  Channel<GlucoseClass> glucose_class{};
  Channel<double> ma200{};
  // Events already committed for the upcoming hour, by 5-minute slot.
  std::array<double, kHorizon> planned_carbs{};
  std::array<double, kHorizon> planned_bolus{};
};

/// `extended_glucose` must end with the window's glucose values; it supplies
/// the moving-average history.
PredictorInput make_input(const StateWindow& window, std::span<const double> extended_glucose, double basal_rate,
                          const std::array<double, kHorizon>& planned_carbs = {},
                          const std::array<double, kHorizon>& planned_bolus = {});

struct GlucoseForecast {
  std::array<double, kHorizon> values{};
};

class GlucosePredictor {
 public:
  virtual ~GlucosePredictor() = default;
  virtual GlucoseForecast predict(const PredictorInput& input) const = 0;
  virtual std::string kind() const = 0;
  virtual nlohmann::json to_json() const = 0;
};

/// Parameters of the physiological surrogate. Time constants are mean
/// transit times of two-stage absorption chains (each stage uses half).
struct SurrogateParams {
  double basal_glucose = 120.0;        // Gb, mg/dL
  double glucose_decay = 0.01;         // p1, 1/min
  double insulin_sensitivity = 8e-4;   // SI
  double insulin_action_gain = 5.0;    // scales the second insulin compartment into X
  double carb_gain = 0.1;              // kabs, mg/dL per g per min
  double carb_time_constant = 40.0;    // min
  double insulin_time_constant = 70.0; // min
  double basal_rate = 1.0;             // U/h at which G rests at Gb

  void validate() const;
};

nlohmann::json to_json(const SurrogateParams& p);
SurrogateParams surrogate_params_from_json(const nlohmann::json& j);

struct Compartments {
  double gut1 = 0.0;      // g
  double gut2 = 0.0;      // g
  double insulin1 = 0.0;  // U above basal
  double insulin2 = 0.0;  // U above basal
  double glucose = 120.0; // mg/dL
};

/// One explicit-Euler step of dG/dt = -p1(G-Gb) - SI*X*G + kabs*Q2.
/// Events enter the first compartments at the start of the step.
Compartments surrogate_step(const Compartments& state, double carbs_event, double bolus_event, double basal_rate,
                            double dt_minutes, const SurrogateParams& params);

class SurrogatePredictor final : public GlucosePredictor {
 public:
  explicit SurrogatePredictor(SurrogateParams params = {});

  /// Replays the window's events from empty compartments, then integrates
  /// the next hour starting at the last observed glucose.
  GlucoseForecast predict(const PredictorInput& input) const override;
  std::string kind() const override { return "surrogate"; }
  nlohmann::json to_json() const override;
  const SurrogateParams& params() const { return params_; }

 private:
  SurrogateParams params_;
};

class SingularSystem : public NumericFault {
 public:
  using NumericFault::NumericFault;
};

/// Solves (X^T X + lambda I) W = X^T Y.
Eigen::MatrixXd fit_ridge(const Eigen::MatrixXd& features, const Eigen::MatrixXd& targets, double ridge_lambda);

struct LagSpec {
  int lags = 12;
};

/// Flattened lag features (bias last) used by the autoregressive model.
Eigen::VectorXd autoregressive_features(const PredictorInput& input, const LagSpec& spec);

/// Input for the decision at record tick `t`: window ending at t, planned
/// events taken from the record's next hour.
PredictorInput input_from_record(const data::SubjectRecord& record, std::size_t t, std::span<const double> ma200);

/// Per-subject ridge regression from lag features to the 12 future glucose
/// deltas relative to the last observed value.
class AutoregressivePredictor final : public GlucosePredictor {
 public:
  static AutoregressivePredictor fit(const data::SubjectRecord& record, data::TickRange range, double ridge_lambda,
                                     LagSpec spec = {});
  static AutoregressivePredictor from_json(const nlohmann::json& j);

  GlucoseForecast predict(const PredictorInput& input) const override;
  std::string kind() const override { return "autoregressive"; }
  nlohmann::json to_json() const override;

  double training_rmse() const { return training_rmse_; }
  double coefficient_norm() const { return coefficients_.norm(); }
  const Eigen::MatrixXd& coefficients() const { return coefficients_; }

 private:
  AutoregressivePredictor() = default;

  Eigen::MatrixXd coefficients_;  // features x 12
  LagSpec spec_;
  double ridge_lambda_ = 0.0;
  double training_rmse_ = 0.0;
};

/// Moving average of the trailing 200 glucose values at every record tick.
std::vector<double> record_ma200(const data::SubjectRecord& record);

std::shared_ptr<const GlucosePredictor> load_predictor(const nlohmann::json& j);

}  // namespace guide::predictor
