#pragma once

// Small multilayer perceptron with hand-written backpropagation and Adam.
// Batches are column-major: one sample per column. Everything is templated
// on the scalar type; learners train in float, gradient checks use double.

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "guide/core.hpp"
#include "guide/random.hpp"

namespace guide::nn {

template <class T>
using MatrixT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using VectorT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

enum class Activation { Identity, Tanh, Relu };

std::string_view to_string(Activation a);
Activation parse_activation(std::string_view name);

template <class T>
struct BasicLayer {
  MatrixT<T> weight;  // out x in
  VectorT<T> bias;    // out
  Activation activation = Activation::Identity;
};

/// Thrown when a tape does not come from the latest forward pass of this network.
class StaleTape : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <class T>
class BasicNetwork;

/// Cached activations of one forward pass.
template <class T>
struct BasicTape {
  const BasicNetwork<T>* owner = nullptr;
  std::uint64_t version = 0;
  std::vector<MatrixT<T>> activations;  // a_0 (input) .. a_L (output)
  std::vector<MatrixT<T>> pre;          // z_1 .. z_L
  // Shared-prefix mode: the first layer saw [prefix; suffix] with each
  // prefix column repeated `repeats` times (column r*B + i uses prefix i).
  MatrixT<T> prefix;
  int repeats = 0;
};

template <class T>
struct BasicGradients {
  std::vector<MatrixT<T>> weight;
  std::vector<VectorT<T>> bias;

  BasicGradients& operator+=(const BasicGradients& other);
  BasicGradients& operator*=(T s);
  bool all_finite() const;
  double squared_norm() const;
  VectorT<T> flatten() const;
};

template <class T>
class BasicNetwork {
 public:
  using Matrix = MatrixT<T>;
  using Vector = VectorT<T>;
  using Layer = BasicLayer<T>;
  using Tape = BasicTape<T>;
  using Gradients = BasicGradients<T>;

  BasicNetwork() = default;
  /// `sizes` has one more entry than `activations`. Weights are drawn
  /// uniformly from +-1/sqrt(fan_in); biases start at zero.
  BasicNetwork(const std::vector<int>& sizes, const std::vector<Activation>& activations, Rng& rng);

  BasicNetwork(const BasicNetwork& other);
  BasicNetwork& operator=(const BasicNetwork& other);
  BasicNetwork(BasicNetwork&&) noexcept;
  BasicNetwork& operator=(BasicNetwork&&) noexcept;

  /// Same parameters in another precision.
  template <class U>
  BasicNetwork<U> cast() const;

  int input_size() const;
  int output_size() const;
  std::size_t depth() const { return layers_.size(); }
  std::size_t parameter_count() const;
  std::vector<int> sizes() const;

  const Layer& layer(std::size_t i) const { return layers_.at(i); }
  /// Mutable access invalidates outstanding tapes.
  Layer& mutable_layer(std::size_t i);

  Matrix forward(const Matrix& input) const;
  Vector forward(const Vector& input) const;
  Matrix forward(const Matrix& input, Tape& tape) const;

  /// First layer input is [prefix column; suffix column], with every prefix
  /// column shared by `repeats` consecutive blocks of suffix columns. The
  /// prefix part of the first affine map is computed once per column.
  Matrix forward_shared(const Matrix& prefix, const Matrix& suffix, int repeats, Tape& tape) const;

  /// Gradients of sum(output_grad .* output) with respect to all parameters.
  /// When `input_grad` is non-null it receives d/d(input) (not available in
  /// shared-prefix mode).
  Gradients backward(const Tape& tape, const Matrix& output_grad, Matrix* input_grad = nullptr) const;

  /// d/d(input) of sum(output_grad .* output) without parameter gradients.
  Matrix input_gradient(const Tape& tape, const Matrix& output_grad) const;

  Gradients zero_gradients() const;

  /// Parameters flattened layer by layer: weight row-major, then bias.
  Vector flat_parameters() const;
  void set_flat_parameters(const Vector& flat);

  bool same_architecture(const BasicNetwork& other) const;
  bool all_finite() const;

 private:
  template <class U>
  friend class BasicNetwork;

  void touch();

  std::vector<Layer> layers_;
  std::uint64_t version_ = 0;
};

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <class T>
class BasicAdam {
 public:
  BasicAdam() = default;
  BasicAdam(const BasicNetwork<T>& net, AdamConfig config);

  /// Applies one bias-corrected step. A non-finite gradient throws
  /// NumericFault and leaves both the network and the moments untouched.
  void step(BasicNetwork<T>& net, const BasicGradients<T>& grads);

  long steps() const { return t_; }
  const AdamConfig& config() const { return config_; }

  nlohmann::json to_json() const;
  static BasicAdam from_json(const nlohmann::json& j);

 private:
  AdamConfig config_;
  long t_ = 0;
  BasicGradients<T> m_;
  BasicGradients<T> v_;
};

/// target <- (1 - tau) target + tau online.
template <class T>
void soft_update(BasicNetwork<T>& target, const BasicNetwork<T>& online, double tau);

template <class T>
nlohmann::json to_json(const BasicNetwork<T>& net);
template <class T = double>
BasicNetwork<T> network_from_json(const nlohmann::json& j);

/// Feature layout per tick: glucose/400, carbs/100, bolus/20, the two
/// elapsed channels /1440, sin and cos of the hour, sleep flag.
inline constexpr int kFeaturesPerTick = 8;
inline constexpr int kStateFeatures = kWindowTicks * kFeaturesPerTick;

template <class T>
void featurize_into(const StateWindow& window, T* out);
template <class T = double>
VectorT<T> featurize(const StateWindow& window);

/// Hidden layers of `hidden` units with relu, then `output` units with `out_act`.
template <class T = double>
BasicNetwork<T> make_mlp(int input, const std::vector<int>& hidden, int output, Activation out_act, Rng& rng);

// Double precision, used by tests and tools.
using Matrix = MatrixT<double>;
using Vector = VectorT<double>;
using Layer = BasicLayer<double>;
using Tape = BasicTape<double>;
using Gradients = BasicGradients<double>;
using Network = BasicNetwork<double>;
using Adam = BasicAdam<double>;

// Single precision, used for training.
using MatrixF = MatrixT<float>;
using VectorF = VectorT<float>;
using TapeF = BasicTape<float>;
using GradientsF = BasicGradients<float>;
using NetworkF = BasicNetwork<float>;
using AdamF = BasicAdam<float>;

template <class T>
template <class U>
BasicNetwork<U> BasicNetwork<T>::cast() const {
  BasicNetwork<U> out;
  for (const Layer& l : layers_) {
    BasicLayer<U> c;
    c.weight = l.weight.template cast<U>();
    c.bias = l.bias.template cast<U>();
    c.activation = l.activation;
    out.layers_.push_back(std::move(c));
  }
  out.touch();
  return out;
}

}  // namespace guide::nn
