#include "guide/nn.hpp"

#include <array>
#include <atomic>
#include <cmath>

namespace guide::nn {

namespace {

std::atomic<std::uint64_t> g_version{1};

std::uint64_t next_version() { return g_version.fetch_add(1); }

template <class T>
void activate(Activation a, const MatrixT<T>& z, MatrixT<T>& out) {
  switch (a) {
    case Activation::Identity: out = z; break;
    case Activation::Tanh: out = z.array().tanh().matrix(); break;
    case Activation::Relu: out = z.cwiseMax(T(0)); break;
  }
}

// dZ = dA * act'(z), using the cached output where cheaper.
template <class T>
void activation_backward(Activation a, const MatrixT<T>& z, const MatrixT<T>& out, const MatrixT<T>& d_out,
                         MatrixT<T>& dz) {
  switch (a) {
    case Activation::Identity: dz = d_out; break;
    case Activation::Tanh: dz = d_out.array() * (T(1) - out.array().square()); break;
    case Activation::Relu: dz = (z.array() > T(0)).select(d_out, T(0)); break;
  }
}

}  // namespace

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
  }
  return "?";
}

Activation parse_activation(std::string_view name) {
  if (name == "identity") return Activation::Identity;
  if (name == "tanh") return Activation::Tanh;
  if (name == "relu") return Activation::Relu;
  throw ValidationError("unknown activation '" + std::string(name) + "'");
}

template <class T>
BasicGradients<T>& BasicGradients<T>::operator+=(const BasicGradients& o) {
  if (o.weight.size() != weight.size()) throw ValidationError("gradient shapes differ");
  for (std::size_t i = 0; i < weight.size(); ++i) {
    weight[i] += o.weight[i];
    bias[i] += o.bias[i];
  }
  return *this;
}

template <class T>
BasicGradients<T>& BasicGradients<T>::operator*=(T s) {
  for (std::size_t i = 0; i < weight.size(); ++i) {
    weight[i] *= s;
    bias[i] *= s;
  }
  return *this;
}

template <class T>
bool BasicGradients<T>::all_finite() const {
  for (std::size_t i = 0; i < weight.size(); ++i) {
    if (!weight[i].allFinite() || !bias[i].allFinite()) return false;
  }
  return true;
}

template <class T>
double BasicGradients<T>::squared_norm() const {
  double s = 0.0;
  for (std::size_t i = 0; i < weight.size(); ++i)
    s += static_cast<double>(weight[i].squaredNorm()) + static_cast<double>(bias[i].squaredNorm());
  return s;
}

template <class T>
VectorT<T> BasicGradients<T>::flatten() const {
  Eigen::Index n = 0;
  for (std::size_t i = 0; i < weight.size(); ++i) n += weight[i].size() + bias[i].size();
  VectorT<T> out(n);
  Eigen::Index k = 0;
  for (std::size_t i = 0; i < weight.size(); ++i) {
    for (Eigen::Index r = 0; r < weight[i].rows(); ++r)
      for (Eigen::Index c = 0; c < weight[i].cols(); ++c) out[k++] = weight[i](r, c);
    for (Eigen::Index r = 0; r < bias[i].size(); ++r) out[k++] = bias[i][r];
  }
  return out;
}

template <class T>
BasicNetwork<T>::BasicNetwork(const std::vector<int>& sizes, const std::vector<Activation>& activations, Rng& rng) {
  if (sizes.size() < 2 || activations.size() + 1 != sizes.size())
    throw ValidationError("network needs n+1 sizes for n activations (n >= 1)");
  for (int s : sizes) {
    if (s <= 0) throw ValidationError("layer sizes must be positive");
  }
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    Layer layer;
    layer.activation = activations[l];
    layer.weight.resize(sizes[l + 1], sizes[l]);
    const double bound = 1.0 / std::sqrt(static_cast<double>(sizes[l]));
    for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
      for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) layer.weight(r, c) = static_cast<T>(uniform(rng, -bound, bound));
    layer.bias = Vector::Zero(sizes[l + 1]);
    layers_.push_back(std::move(layer));
  }
  touch();
}

template <class T>
BasicNetwork<T>::BasicNetwork(const BasicNetwork& other) : layers_(other.layers_) { touch(); }

template <class T>
BasicNetwork<T>& BasicNetwork<T>::operator=(const BasicNetwork& other) {
  if (this != &other) {
    layers_ = other.layers_;
    touch();
  }
  return *this;
}

template <class T>
BasicNetwork<T>::BasicNetwork(BasicNetwork&& other) noexcept : layers_(std::move(other.layers_)) {
  touch();
  other.touch();
}

template <class T>
BasicNetwork<T>& BasicNetwork<T>::operator=(BasicNetwork&& other) noexcept {
  layers_ = std::move(other.layers_);
  touch();
  other.touch();
  return *this;
}

template <class T>
void BasicNetwork<T>::touch() { version_ = next_version(); }

template <class T>
int BasicNetwork<T>::input_size() const { return layers_.empty() ? 0 : static_cast<int>(layers_.front().weight.cols()); }
template <class T>
int BasicNetwork<T>::output_size() const { return layers_.empty() ? 0 : static_cast<int>(layers_.back().weight.rows()); }

template <class T>
std::size_t BasicNetwork<T>::parameter_count() const {
  std::size_t n = 0;
  for (const Layer& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

template <class T>
std::vector<int> BasicNetwork<T>::sizes() const {
  std::vector<int> s;
  if (layers_.empty()) return s;
  s.push_back(input_size());
  for (const Layer& l : layers_) s.push_back(static_cast<int>(l.weight.rows()));
  return s;
}

template <class T>
BasicLayer<T>& BasicNetwork<T>::mutable_layer(std::size_t i) {
  touch();
  return layers_.at(i);
}

template <class T>
MatrixT<T> BasicNetwork<T>::forward(const Matrix& input) const {
  if (layers_.empty()) throw ValidationError("forward on an empty network");
  if (input.rows() != input_size())
    throw ValidationError("input has " + std::to_string(input.rows()) + " rows, network expects " +
                          std::to_string(input_size()));
  Matrix a = input;
  Matrix z;
  for (const Layer& l : layers_) {
    z = l.weight * a;
    z.colwise() += l.bias;
    activate(l.activation, z, a);
  }
  return a;
}

template <class T>
VectorT<T> BasicNetwork<T>::forward(const Vector& input) const { return forward(Matrix(input)).col(0); }

template <class T>
MatrixT<T> BasicNetwork<T>::forward(const Matrix& input, Tape& tape) const {
  if (layers_.empty()) throw ValidationError("forward on an empty network");
  if (input.rows() != input_size())
    throw ValidationError("input has " + std::to_string(input.rows()) + " rows, network expects " +
                          std::to_string(input_size()));
  tape.owner = this;
  tape.version = version_;
  tape.repeats = 0;
  tape.prefix.resize(0, 0);
  tape.activations.resize(layers_.size() + 1);
  tape.pre.resize(layers_.size());
  tape.activations[0] = input;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    tape.pre[i].noalias() = l.weight * tape.activations[i];
    tape.pre[i].colwise() += l.bias;
    activate(l.activation, tape.pre[i], tape.activations[i + 1]);
  }
  return tape.activations.back();
}

template <class T>
MatrixT<T> BasicNetwork<T>::forward_shared(const Matrix& prefix, const Matrix& suffix, int repeats, Tape& tape) const {
  if (layers_.empty()) throw ValidationError("forward on an empty network");
  if (repeats < 1) throw ValidationError("repeats must be positive");
  const Eigen::Index batch = prefix.cols();
  if (prefix.rows() + suffix.rows() != input_size() || suffix.cols() != batch * repeats)
    throw ValidationError("shared-prefix input does not match the network");
  tape.owner = this;
  tape.version = version_;
  tape.repeats = repeats;
  tape.prefix = prefix;
  tape.activations.resize(layers_.size() + 1);
  tape.pre.resize(layers_.size());
  tape.activations[0] = suffix;

  const Layer& first = layers_.front();
  const Matrix shared = first.weight.leftCols(prefix.rows()) * prefix;
  Matrix& z = tape.pre[0];
  z.noalias() = first.weight.rightCols(suffix.rows()) * suffix;
  for (int r = 0; r < repeats; ++r) z.middleCols(r * batch, batch) += shared;
  z.colwise() += first.bias;
  activate(first.activation, z, tape.activations[1]);
  for (std::size_t i = 1; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    tape.pre[i].noalias() = l.weight * tape.activations[i];
    tape.pre[i].colwise() += l.bias;
    activate(l.activation, tape.pre[i], tape.activations[i + 1]);
  }
  return tape.activations.back();
}

template <class T>
BasicGradients<T> BasicNetwork<T>::zero_gradients() const {
  Gradients g;
  for (const Layer& l : layers_) {
    g.weight.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
    g.bias.push_back(Vector::Zero(l.bias.size()));
  }
  return g;
}

template <class T>
BasicGradients<T> BasicNetwork<T>::backward(const Tape& tape, const Matrix& output_grad, Matrix* input_grad) const {
  if (tape.owner != this || tape.version != version_)
    throw StaleTape("tape does not belong to the latest forward pass of this network");
  const Matrix& out = tape.activations.back();
  if (output_grad.rows() != out.rows() || output_grad.cols() != out.cols())
    throw ValidationError("output gradient shape does not match the forward output");
  if (input_grad && tape.repeats > 0) throw ValidationError("input gradient is unavailable in shared-prefix mode");

  Gradients g;
  g.weight.resize(layers_.size());
  g.bias.resize(layers_.size());
  Matrix d_a = output_grad;
  Matrix dz;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    const Layer& l = layers_[i];
    activation_backward(l.activation, tape.pre[i], tape.activations[i + 1], d_a, dz);
    g.bias[i] = dz.rowwise().sum();
    if (i == 0 && tape.repeats > 0) {
      const Eigen::Index batch = tape.prefix.cols();
      Matrix summed = dz.middleCols(0, batch);
      for (int r = 1; r < tape.repeats; ++r) summed += dz.middleCols(r * batch, batch);
      g.weight[0].resize(l.weight.rows(), l.weight.cols());
      g.weight[0].leftCols(tape.prefix.rows()).noalias() = summed * tape.prefix.transpose();
      g.weight[0].rightCols(tape.activations[0].rows()).noalias() = dz * tape.activations[0].transpose();
    } else {
      g.weight[i].noalias() = dz * tape.activations[i].transpose();
    }
    if (i > 0 || input_grad) {
      d_a.noalias() = l.weight.transpose() * dz;
    }
  }
  if (input_grad) *input_grad = std::move(d_a);
  return g;
}

template <class T>
MatrixT<T> BasicNetwork<T>::input_gradient(const Tape& tape, const Matrix& output_grad) const {
  if (tape.owner != this || tape.version != version_)
    throw StaleTape("tape does not belong to the latest forward pass of this network");
  if (tape.repeats > 0) throw ValidationError("input gradient is unavailable in shared-prefix mode");
  const Matrix& out = tape.activations.back();
  if (output_grad.rows() != out.rows() || output_grad.cols() != out.cols())
    throw ValidationError("output gradient shape does not match the forward output");
  Matrix d_a = output_grad;
  Matrix dz;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    activation_backward(layers_[i].activation, tape.pre[i], tape.activations[i + 1], d_a, dz);
    d_a.noalias() = layers_[i].weight.transpose() * dz;
  }
  return d_a;
}

template <class T>
VectorT<T> BasicNetwork<T>::flat_parameters() const {
  Vector out(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index k = 0;
  for (const Layer& l : layers_) {
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) out[k++] = l.weight(r, c);
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) out[k++] = l.bias[r];
  }
  return out;
}

template <class T>
void BasicNetwork<T>::set_flat_parameters(const Vector& flat) {
  if (flat.size() != static_cast<Eigen::Index>(parameter_count()))
    throw ValidationError("flat parameter vector has " + std::to_string(flat.size()) + " entries, expected " +
                          std::to_string(parameter_count()));
  Eigen::Index k = 0;
  for (Layer& l : layers_) {
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = flat[k++];
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias[r] = flat[k++];
  }
  touch();
}

template <class T>
bool BasicNetwork<T>::same_architecture(const BasicNetwork& other) const {
  if (layers_.size() != other.layers_.size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].activation != other.layers_[i].activation ||
        layers_[i].weight.rows() != other.layers_[i].weight.rows() ||
        layers_[i].weight.cols() != other.layers_[i].weight.cols())
      return false;
  }
  return true;
}

template <class T>
bool BasicNetwork<T>::all_finite() const {
  for (const Layer& l : layers_) {
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  }
  return true;
}

template <class T>
BasicAdam<T>::BasicAdam(const BasicNetwork<T>& net, AdamConfig config) : config_(config), m_(net.zero_gradients()), v_(net.zero_gradients()) {
  if (!(config_.learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
  if (!(config_.beta1 >= 0.0 && config_.beta1 < 1.0 && config_.beta2 >= 0.0 && config_.beta2 < 1.0))
    throw ValidationError("Adam betas must lie in [0,1)");
}

template <class T>
void BasicAdam<T>::step(BasicNetwork<T>& net, const BasicGradients<T>& g) {
  if (g.weight.size() != net.depth() || m_.weight.size() != net.depth())
    throw ValidationError("gradient does not match the network");
  for (std::size_t i = 0; i < g.weight.size(); ++i) {
    if (g.weight[i].rows() != net.layer(i).weight.rows() || g.weight[i].cols() != net.layer(i).weight.cols() ||
        g.bias[i].size() != net.layer(i).bias.size())
      throw ValidationError("gradient shape mismatch at layer " + std::to_string(i));
  }
  if (!g.all_finite()) {
    for (std::size_t i = 0; i < g.weight.size(); ++i) {
      if (!g.weight[i].allFinite() || !g.bias[i].allFinite())
        throw NumericFault("non-finite gradient in layer " + std::to_string(i) + "; optimizer step rejected");
    }
  }
  ++t_;
  const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(config_.beta1, static_cast<double>(t_)));
  const T c2 = static_cast<T>(1.0 - std::pow(config_.beta2, static_cast<double>(t_)));
  const T lr = static_cast<T>(config_.learning_rate);
  const T eps = static_cast<T>(config_.epsilon);
  const auto update = [&](auto& param, auto& m, auto& v, const auto& grad) {
    m = b1 * m + (T(1) - b1) * grad;
    v = b2 * v + (T(1) - b2) * grad.cwiseProduct(grad);
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  };
  for (std::size_t i = 0; i < g.weight.size(); ++i) {
    BasicLayer<T>& l = net.mutable_layer(i);
    update(l.weight, m_.weight[i], v_.weight[i], g.weight[i]);
    update(l.bias, m_.bias[i], v_.bias[i], g.bias[i]);
  }
}

namespace {

template <class T>
nlohmann::json flat_json(const BasicGradients<T>& g) {
  const VectorT<T> f = g.flatten();
  return std::vector<double>(f.data(), f.data() + f.size());
}

template <class T>
void unflatten(BasicGradients<T>& g, const std::vector<double>& flat) {
  std::size_t k = 0;
  for (std::size_t i = 0; i < g.weight.size(); ++i) {
    for (Eigen::Index r = 0; r < g.weight[i].rows(); ++r)
      for (Eigen::Index c = 0; c < g.weight[i].cols(); ++c) g.weight[i](r, c) = static_cast<T>(flat.at(k++));
    for (Eigen::Index r = 0; r < g.bias[i].size(); ++r) g.bias[i][r] = static_cast<T>(flat.at(k++));
  }
  if (k != flat.size()) throw ValidationError("optimizer moment vector has the wrong length");
}

}  // namespace

template <class T>
nlohmann::json BasicAdam<T>::to_json() const {
  std::vector<nlohmann::json> shapes;
  for (const MatrixT<T>& w : m_.weight) shapes.push_back({w.rows(), w.cols()});
  return {{"learning_rate", config_.learning_rate},
          {"beta1", config_.beta1},
          {"beta2", config_.beta2},
          {"epsilon", config_.epsilon},
          {"t", t_},
          {"shapes", shapes},
          {"m", flat_json(m_)},
          {"v", flat_json(v_)}};
}

template <class T>
BasicAdam<T> BasicAdam<T>::from_json(const nlohmann::json& j) {
  BasicAdam a;
  a.config_.learning_rate = j.at("learning_rate").get<double>();
  a.config_.beta1 = j.at("beta1").get<double>();
  a.config_.beta2 = j.at("beta2").get<double>();
  a.config_.epsilon = j.at("epsilon").get<double>();
  a.t_ = j.at("t").get<long>();
  for (const auto& s : j.at("shapes")) {
    const auto rows = s.at(0).get<Eigen::Index>();
    const auto cols = s.at(1).get<Eigen::Index>();
    a.m_.weight.push_back(MatrixT<T>::Zero(rows, cols));
    a.m_.bias.push_back(VectorT<T>::Zero(rows));
  }
  a.v_ = a.m_;
  unflatten(a.m_, j.at("m").get<std::vector<double>>());
  unflatten(a.v_, j.at("v").get<std::vector<double>>());
  return a;
}

template <class T>
void soft_update(BasicNetwork<T>& target, const BasicNetwork<T>& online, double tau) {
  if (!target.same_architecture(online)) throw ValidationError("soft_update needs identical architectures");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ValidationError("tau must lie in [0,1]");
  for (std::size_t i = 0; i < target.depth(); ++i) {
    BasicLayer<T>& t = target.mutable_layer(i);
    const BasicLayer<T>& o = online.layer(i);
    const T keep = static_cast<T>(1.0 - tau), take = static_cast<T>(tau);
    t.weight = keep * t.weight + take * o.weight;
    t.bias = keep * t.bias + take * o.bias;
  }
}

template <class T>
nlohmann::json to_json(const BasicNetwork<T>& net) {
  std::vector<std::string> acts;
  for (std::size_t i = 0; i < net.depth(); ++i) acts.emplace_back(to_string(net.layer(i).activation));
  const VectorT<double> flat = net.flat_parameters().template cast<double>();
  return {{"format", "guide-mlp"},
          {"version", 1},
          {"sizes", net.sizes()},
          {"activations", acts},
          {"parameters", std::vector<double>(flat.data(), flat.data() + flat.size())}};
}

template <class T>
BasicNetwork<T> network_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "guide-mlp") throw ValidationError("not a guide-mlp checkpoint");
  if (j.at("version").get<int>() != 1) throw ValidationError("unsupported checkpoint version");
  const auto sizes = j.at("sizes").get<std::vector<int>>();
  std::vector<Activation> acts;
  for (const auto& a : j.at("activations")) acts.push_back(parse_activation(a.get<std::string>()));
  Rng rng(0);
  BasicNetwork<T> net(sizes, acts, rng);
  const auto flat = j.at("parameters").get<std::vector<double>>();
  net.set_flat_parameters(
      Eigen::Map<const VectorT<double>>(flat.data(), static_cast<Eigen::Index>(flat.size())).template cast<T>());
  if (!net.all_finite()) throw ValidationError("checkpoint contains non-finite parameters");
  return net;
}

template <class T>
void featurize_into(const StateWindow& w, T* out) {
  // sin/cos of each hour, computed once.
  static const std::array<std::array<double, 2>, 24> kHourCircle = [] {
    std::array<std::array<double, 2>, 24> t{};
    for (int h = 0; h < 24; ++h) {
      const double angle = 6.283185307179586 * static_cast<double>(h) / 24.0;
      t[h] = {std::sin(angle), std::cos(angle)};
    }
    return t;
  }();
  for (int k = 0; k < kWindowTicks; ++k) {
    T* f = out + static_cast<std::ptrdiff_t>(k) * kFeaturesPerTick;
    const auto& circle = kHourCircle[static_cast<std::size_t>(((w.hour_of_day[k] % 24) + 24) % 24)];
    f[0] = static_cast<T>(w.glucose[k] / 400.0);
    f[1] = static_cast<T>(w.carbs[k] / 100.0);
    f[2] = static_cast<T>(w.bolus[k] / 20.0);
    f[3] = static_cast<T>(w.minutes_since_meal[k] / kMaxElapsedMinutes);
    f[4] = static_cast<T>(w.minutes_since_inject[k] / kMaxElapsedMinutes);
    f[5] = static_cast<T>(circle[0]);
    f[6] = static_cast<T>(circle[1]);
    f[7] = static_cast<T>(w.sleep[k]);
  }
}

template <class T>
VectorT<T> featurize(const StateWindow& window) {
  VectorT<T> v(kStateFeatures);
  featurize_into(window, v.data());
  return v;
}

template <class T>
BasicNetwork<T> make_mlp(int input, const std::vector<int>& hidden, int output, Activation out_act, Rng& rng) {
  std::vector<int> sizes{input};
  std::vector<Activation> acts;
  for (int h : hidden) {
    sizes.push_back(h);
    acts.push_back(Activation::Relu);
  }
  sizes.push_back(output);
  acts.push_back(out_act);
  return BasicNetwork<T>(sizes, acts, rng);
}

#define GUIDE_NN_INSTANTIATE(T)                                                                         \
  template struct BasicGradients<T>;                                                                    \
  template class BasicNetwork<T>;                                                                       \
  template class BasicAdam<T>;                                                                          \
  template void soft_update<T>(BasicNetwork<T>&, const BasicNetwork<T>&, double);                       \
  template nlohmann::json to_json<T>(const BasicNetwork<T>&);                                           \
  template BasicNetwork<T> network_from_json<T>(const nlohmann::json&);                                 \
  template void featurize_into<T>(const StateWindow&, T*);                                              \
  template VectorT<T> featurize<T>(const StateWindow&);                                                 \
  template BasicNetwork<T> make_mlp<T>(int, const std::vector<int>&, int, Activation, Rng&);

GUIDE_NN_INSTANTIATE(double)
GUIDE_NN_INSTANTIATE(float)

}  // namespace guide::nn
