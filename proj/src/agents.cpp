#include "guide/agents.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>

namespace guide::agents {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

Matrix concat_rows(const Matrix& top, const Matrix& bottom) {
  Matrix out(top.rows() + bottom.rows(), top.cols());
  out.topRows(top.rows()) = top;
  out.bottomRows(bottom.rows()) = bottom;
  return out;
}

Matrix uniform_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = uniform(rng, -1.0, 1.0);
  return m;
}

Matrix normal_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = standard_normal(rng);
  return m;
}

// 1 where the raw log-std output is inside the clamp range (gradient flows).
Matrix log_std_mask(const Matrix& out) {
  const auto raw = out.bottomRows(kActionDim).array();
  return ((raw > float(kLogStdMin)) && (raw < float(kLogStdMax))).cast<float>().matrix();
}

RawActionVector to_raw(const Eigen::Ref<const Vector>& v) {
  RawActionVector a{};
  for (int i = 0; i < kActionDim; ++i) a[i] = std::clamp(static_cast<double>(v[i]), -1.0, 1.0);
  return a;
}

void require_finite(double x, const char* what) {
  if (!std::isfinite(x)) throw NumericFault(std::string(what) + " became non-finite");
}

nn::AdamF make_adam(const Network& net, double lr) {
  nn::AdamConfig c;
  c.learning_rate = lr;
  return nn::AdamF(net, c);
}

}  // namespace

// ---------------------------------------------------------------- config

std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::Td3Bc: return "td3-bc";
    case Algorithm::CqlBc: return "cql-bc";
    case Algorithm::SacOffline: return "sac-offline";
    case Algorithm::SacOnline: return "sac-online";
    case Algorithm::Ppo: return "ppo";
    case Algorithm::Random: return "random";
  }
  return "?";
}

Algorithm parse_algorithm(std::string_view name) {
  for (Algorithm a : {Algorithm::Td3Bc, Algorithm::CqlBc, Algorithm::SacOffline, Algorithm::SacOnline,
                      Algorithm::Ppo, Algorithm::Random}) {
    if (to_string(a) == name) return a;
  }
  throw ValidationError("unknown algorithm '" + std::string(name) +
                        "' (expected td3-bc, cql-bc, sac-offline, sac-online, ppo or random)");
}

bool is_offline(Algorithm a) {
  return a == Algorithm::Td3Bc || a == Algorithm::CqlBc || a == Algorithm::SacOffline;
}

AgentConfig AgentConfig::defaults(Algorithm algorithm) {
  AgentConfig c;
  c.algorithm = algorithm;
  switch (algorithm) {
    case Algorithm::Td3Bc:
      c.alpha_bc = 1.5;
      c.alpha_cql = 0.0;
      break;
    case Algorithm::CqlBc:
      c.alpha_bc = 2.5;
      c.alpha_cql = 0.05;
      break;
    case Algorithm::SacOffline:
    case Algorithm::SacOnline:
      c.entropy_alpha = 0.2;
      break;
    case Algorithm::Ppo:
      c.gamma = 0.99;
      c.actor_lr = 3e-4;
      c.critic_lr = 3e-4;
      break;
    case Algorithm::Random: break;
  }
  return c;
}

void AgentConfig::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ValidationError("gamma must lie in (0,1]");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ValidationError("tau must lie in [0,1]");
  if (!(alpha_bc >= 0.0 && alpha_cql >= 0.0 && entropy_alpha >= 0.0 && entropy_coef >= 0.0 && value_coef >= 0.0))
    throw ValidationError("loss coefficients must be nonnegative");
  if (cql_samples < 1) throw ValidationError("cql_samples must be positive");
  if (!(policy_noise >= 0.0 && noise_clip >= 0.0)) throw ValidationError("policy noise must be nonnegative");
  if (policy_delay < 1) throw ValidationError("policy_delay must be positive");
  if (!(clip_ratio > 0.0 && clip_ratio < 1.0)) throw ValidationError("clip_ratio must lie in (0,1)");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw ValidationError("gae_lambda must lie in [0,1]");
  if (!(actor_lr > 0.0 && critic_lr > 0.0)) throw ValidationError("learning rates must be positive");
  if (batch_size < 1 || update_steps < 0 || epochs < 0 || updates_per_epoch < 0 || eval_interval < 1 ||
      ppo_epochs < 1 || ppo_minibatch < 1)
    throw ValidationError("batch, step and epoch counts must be positive");
  if (hidden.empty()) throw ValidationError("at least one hidden layer is required");
  for (int h : hidden) {
    if (h < 1) throw ValidationError("hidden widths must be positive");
  }
}

nlohmann::json to_json(const AgentConfig& c) {
  return {{"algorithm", std::string(to_string(c.algorithm))},
          {"gamma", c.gamma},
          {"tau", c.tau},
          {"alpha_bc", c.alpha_bc},
          {"alpha_cql", c.alpha_cql},
          {"cql_samples", c.cql_samples},
          {"policy_noise", c.policy_noise},
          {"noise_clip", c.noise_clip},
          {"policy_delay", c.policy_delay},
          {"entropy_alpha", c.entropy_alpha},
          {"clip_ratio", c.clip_ratio},
          {"gae_lambda", c.gae_lambda},
          {"entropy_coef", c.entropy_coef},
          {"value_coef", c.value_coef},
          {"ppo_epochs", c.ppo_epochs},
          {"ppo_minibatch", c.ppo_minibatch},
          {"actor_lr", c.actor_lr},
          {"critic_lr", c.critic_lr},
          {"batch_size", c.batch_size},
          {"update_steps", c.update_steps},
          {"epochs", c.epochs},
          {"updates_per_epoch", c.updates_per_epoch},
          {"eval_interval", c.eval_interval},
          {"hidden", c.hidden}};
}

AgentConfig agent_config_from_json(const nlohmann::json& j) {
  AgentConfig c = AgentConfig::defaults(parse_algorithm(j.at("algorithm").get<std::string>()));
  const auto read = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  read("gamma", c.gamma);
  read("tau", c.tau);
  read("alpha_bc", c.alpha_bc);
  read("alpha_cql", c.alpha_cql);
  read("cql_samples", c.cql_samples);
  read("policy_noise", c.policy_noise);
  read("noise_clip", c.noise_clip);
  read("policy_delay", c.policy_delay);
  read("entropy_alpha", c.entropy_alpha);
  read("clip_ratio", c.clip_ratio);
  read("gae_lambda", c.gae_lambda);
  read("entropy_coef", c.entropy_coef);
  read("value_coef", c.value_coef);
  read("ppo_epochs", c.ppo_epochs);
  read("ppo_minibatch", c.ppo_minibatch);
  read("actor_lr", c.actor_lr);
  read("critic_lr", c.critic_lr);
  read("batch_size", c.batch_size);
  read("update_steps", c.update_steps);
  read("epochs", c.epochs);
  read("updates_per_epoch", c.updates_per_epoch);
  read("eval_interval", c.eval_interval);
  read("hidden", c.hidden);
  c.validate();
  return c;
}

double bellman_target(double reward, bool done, double next_q, double gamma) {
  if (!std::isfinite(reward) || !std::isfinite(next_q)) throw ValidationError("Bellman target inputs must be finite");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ValidationError("gamma must lie in (0,1]");
  return reward + gamma * (done ? 0.0 : 1.0) * next_q;
}

// ---------------------------------------------------------------- buffer

namespace {

constexpr int kWindowDoubles = kWindowTicks * 7;
constexpr int kTransitionDoubles = 2 * kWindowDoubles + kActionDim + 2;
constexpr char kBufferMagic[8] = {'G', 'U', 'I', 'D', 'E', 'B', 'U', 'F'};

void window_to_doubles(const StateWindow& w, double* out) {
  for (int k = 0; k < kWindowTicks; ++k) {
    out[k] = w.hour_of_day[k];
    out[kWindowTicks + k] = w.sleep[k];
    out[2 * kWindowTicks + k] = w.glucose[k];
    out[3 * kWindowTicks + k] = w.carbs[k];
    out[4 * kWindowTicks + k] = w.bolus[k];
    out[5 * kWindowTicks + k] = w.minutes_since_meal[k];
    out[6 * kWindowTicks + k] = w.minutes_since_inject[k];
  }
}

StateWindow window_from_doubles(const double* in) {
  StateWindow w;
  for (int k = 0; k < kWindowTicks; ++k) {
    w.hour_of_day[k] = static_cast<int>(in[k]);
    w.sleep[k] = static_cast<int>(in[kWindowTicks + k]);
    w.glucose[k] = in[2 * kWindowTicks + k];
    w.carbs[k] = in[3 * kWindowTicks + k];
    w.bolus[k] = in[4 * kWindowTicks + k];
    w.minutes_since_meal[k] = in[5 * kWindowTicks + k];
    w.minutes_since_inject[k] = in[6 * kWindowTicks + k];
  }
  return w;
}

void transition_to_doubles(const Transition& t, double* out) {
  window_to_doubles(t.state, out);
  for (int i = 0; i < kActionDim; ++i) out[kWindowDoubles + i] = t.action[i];
  out[kWindowDoubles + kActionDim] = t.reward;
  window_to_doubles(t.next_state, out + kWindowDoubles + kActionDim + 1);
  out[kTransitionDoubles - 1] = t.done ? 1.0 : 0.0;
}

Transition transition_from_doubles(const double* in) {
  Transition t;
  t.state = window_from_doubles(in);
  for (int i = 0; i < kActionDim; ++i) t.action[i] = in[kWindowDoubles + i];
  t.reward = in[kWindowDoubles + kActionDim];
  t.next_state = window_from_doubles(in + kWindowDoubles + kActionDim + 1);
  t.done = in[kTransitionDoubles - 1] != 0.0;
  return t;
}

}  // namespace

void ReplayBuffer::freeze() {
  if (frozen_) return;
  frozen_ = true;
  const auto n = static_cast<Eigen::Index>(transitions_.size());
  features_.resize(nn::kStateFeatures, n);
  next_features_.resize(nn::kStateFeatures, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    nn::featurize_into(transitions_[static_cast<std::size_t>(i)].state, features_.col(i).data());
    nn::featurize_into(transitions_[static_cast<std::size_t>(i)].next_state, next_features_.col(i).data());
  }
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ValidationError("replay buffer capacity must be positive");
  transitions_.reserve(capacity);
}

void ReplayBuffer::add(const Transition& t) {
  if (frozen_) throw std::logic_error("replay buffer is frozen");
  if (transitions_.size() >= capacity_) throw std::logic_error("replay buffer is full");
  for (double a : t.action) {
    if (!(a >= -1.0 && a <= 1.0)) throw ValidationError("transition action outside [-1,1]");
  }
  if (!std::isfinite(t.reward)) throw ValidationError("transition reward must be finite");
  transitions_.push_back(t);
}

std::vector<std::size_t> ReplayBuffer::sample_indices(Rng& rng, std::size_t n) const {
  if (transitions_.empty()) throw ValidationError("cannot sample from an empty replay buffer");
  std::uniform_int_distribution<std::size_t> pick(0, transitions_.size() - 1);
  std::vector<std::size_t> idx(n);
  for (std::size_t& i : idx) i = pick(rng);
  return idx;
}

Batch ReplayBuffer::gather(const std::vector<std::size_t>& indices) const {
  if (indices.empty()) throw ValidationError("empty batch");
  const auto n = static_cast<Eigen::Index>(indices.size());
  Batch b;
  b.states.resize(nn::kStateFeatures, n);
  b.next_states.resize(nn::kStateFeatures, n);
  b.actions.resize(kActionDim, n);
  b.rewards.resize(n);
  b.done.resize(n);
  const bool cached = features_.cols() == static_cast<Eigen::Index>(transitions_.size());
  for (Eigen::Index c = 0; c < n; ++c) {
    const std::size_t k = indices[static_cast<std::size_t>(c)];
    const Transition& t = transitions_.at(k);
    if (cached) {
      b.states.col(c) = features_.col(static_cast<Eigen::Index>(k));
      b.next_states.col(c) = next_features_.col(static_cast<Eigen::Index>(k));
    } else {
      nn::featurize_into(t.state, b.states.col(c).data());
      nn::featurize_into(t.next_state, b.next_states.col(c).data());
    }
    for (int i = 0; i < kActionDim; ++i) b.actions(i, c) = t.action[i];
    b.rewards[c] = t.reward;
    b.done[c] = t.done ? 1.0 : 0.0;
  }
  return b;
}

std::uint64_t ReplayBuffer::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::vector<double> row(kTransitionDoubles);
  for (const Transition& t : transitions_) {
    transition_to_doubles(t, row.data());
    const auto* p = reinterpret_cast<const unsigned char*>(row.data());
    for (std::size_t i = 0; i < row.size() * sizeof(double); ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

void ReplayBuffer::save(const std::filesystem::path& path, const nlohmann::json& header) const {
  static_assert(std::endian::native == std::endian::little, "buffer files are little-endian");
  nlohmann::json h = header;
  h["schema_version"] = 1;
  h["size"] = transitions_.size();
  h["doubles_per_transition"] = kTransitionDoubles;
  const std::string text = h.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kBufferMagic, sizeof kBufferMagic);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  std::vector<double> row(kTransitionDoubles);
  for (const Transition& t : transitions_) {
    transition_to_doubles(t, row.data());
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

ReplayBuffer ReplayBuffer::load(const std::filesystem::path& path, nlohmann::json* header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open buffer file " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kBufferMagic, sizeof magic) != 0)
    throw ValidationError(path.string() + " is not a replay buffer file");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1u << 24)) throw ValidationError("corrupt buffer header in " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  const nlohmann::json h = nlohmann::json::parse(text);
  if (h.at("schema_version").get<int>() != 1) throw ValidationError("unsupported buffer schema version");
  if (h.at("doubles_per_transition").get<int>() != kTransitionDoubles)
    throw ValidationError("buffer transition layout does not match this build");
  const auto size = h.at("size").get<std::size_t>();
  ReplayBuffer buffer(std::max<std::size_t>(size, 1));
  std::vector<double> row(kTransitionDoubles);
  for (std::size_t i = 0; i < size; ++i) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(double)));
    if (!in) throw ValidationError("buffer file " + path.string() + " is truncated");
    buffer.add(transition_from_doubles(row.data()));
  }
  buffer.freeze();
  if (header) *header = h;
  return buffer;
}

// -------------------------------------------------------------- policies

RawActionVector RandomPolicy::act(const StateWindow&, Rng& rng) const {
  RawActionVector a{};
  for (double& x : a) x = uniform(rng, -1.0, 1.0);
  return a;
}

BehavioralAction HeuristicPolicy::decide(const StateWindow& w) const {
  const double g = w.glucose[kWindowTicks - 1];
  const double since_inject = w.minutes_since_inject[kWindowTicks - 1];
  if (g > 180.0 && since_inject > 120.0) {
    const double dose = std::clamp((g - 180.0) / 30.0, kMinInsulin, kMaxInsulin);
    return make_action(ActionType::Inject, kMinCarbs, dose, 0);
  }
  if (g < 80.0) {
    const double carbs = std::clamp(15.0 + (80.0 - g) / 2.0, 15.0, 25.0);
    return make_action(ActionType::Eat, carbs, kMinInsulin, 0);
  }
  return make_action(ActionType::Nothing, kMinCarbs, kMinInsulin, 0);
}

RawActionVector HeuristicPolicy::act(const StateWindow& w, Rng&) const { return encode_action(decide(w)); }

BehaviorPolicy::BehaviorPolicy(double epsilon, double carb_noise_sd, double insulin_noise_sd)
    : epsilon_(epsilon), carb_noise_sd_(carb_noise_sd), insulin_noise_sd_(insulin_noise_sd) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ValidationError("epsilon must lie in [0,1]");
}

RawActionVector BehaviorPolicy::act(const StateWindow& w, Rng& rng) const {
  if (uniform(rng, 0.0, 1.0) < epsilon_) return RandomPolicy().act(w, rng);
  BehavioralAction a = heuristic_.decide(w);
  a.carb_amount = std::clamp(a.carb_amount + carb_noise_sd_ * standard_normal(rng), kMinCarbs, kMaxCarbs);
  a.insulin_amount = std::clamp(a.insulin_amount + insulin_noise_sd_ * standard_normal(rng), kMinInsulin, kMaxInsulin);
  return encode_action(a);
}

ActorPolicy::ActorPolicy(Network actor, ActorKind kind, std::string name, bool stochastic)
    : actor_(std::move(actor)), kind_(kind), name_(std::move(name)), stochastic_(stochastic) {
  const int expected = kind_ == ActorKind::Deterministic ? kActionDim : 2 * kActionDim;
  if (actor_.input_size() != nn::kStateFeatures || actor_.output_size() != expected)
    throw ValidationError("actor network has the wrong shape for a " + name_ + " policy");
}

RawActionVector ActorPolicy::act(const StateWindow& window, Rng& rng) const {
  const Vector out = actor_.forward(nn::featurize<float>(window));
  if (!out.allFinite()) throw NumericFault("actor produced a non-finite action");
  if (kind_ == ActorKind::Deterministic) return to_raw(out);
  Vector a(kActionDim);
  for (int i = 0; i < kActionDim; ++i) {
    double u = out[i];
    if (stochastic_) {
      const double log_std = std::clamp(static_cast<double>(out[kActionDim + i]), kLogStdMin, kLogStdMax);
      u += std::exp(log_std) * standard_normal(rng);
    }
    a[i] = static_cast<float>(std::tanh(u));
  }
  return to_raw(a);
}

// --------------------------------------------------------------- helpers

double log_tanh_jacobian(double u) {
  // log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
  const double x = -2.0 * u;
  const double softplus = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  return 2.0 * (std::log(2.0) - u - softplus);
}

void split_gaussian(const Matrix& out, Matrix& mean, Matrix& log_std) {
  if (out.rows() != 2 * kActionDim) throw ValidationError("Gaussian head needs 12 outputs");
  mean = out.topRows(kActionDim);
  log_std = out.bottomRows(kActionDim).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
}

SquashedSample squashed_sample(const Matrix& mean, const Matrix& log_std, const Matrix& noise) {
  SquashedSample s;
  s.pre = mean.array() + log_std.array().exp() * noise.array();
  s.action = s.pre.array().tanh();
  s.log_prob.resize(mean.cols());
  for (Eigen::Index c = 0; c < mean.cols(); ++c) {
    double lp = 0.0;
    for (Eigen::Index r = 0; r < mean.rows(); ++r) {
      lp += -0.5 * noise(r, c) * noise(r, c) - log_std(r, c) - kHalfLog2Pi - log_tanh_jacobian(s.pre(r, c));
    }
    s.log_prob[c] = lp;
  }
  return s;
}

Vector gaussian_log_prob(const Matrix& mean, const Matrix& log_std, const Matrix& u) {
  Vector lp(mean.cols());
  for (Eigen::Index c = 0; c < mean.cols(); ++c) {
    double s = 0.0;
    for (Eigen::Index r = 0; r < mean.rows(); ++r) {
      const double z = (u(r, c) - mean(r, c)) * std::exp(-log_std(r, c));
      s += -0.5 * z * z - log_std(r, c) - kHalfLog2Pi;
    }
    lp[c] = s;
  }
  return lp;
}

std::vector<double> gae(const std::vector<double>& rewards, const std::vector<double>& values,
                        const std::vector<bool>& done, double gamma, double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n + 1 || done.size() != n)
    throw ValidationError("gae needs one value per step plus a bootstrap value");
  std::vector<double> adv(n);
  double next = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    const double live = done[t] ? 0.0 : 1.0;
    const double delta = rewards[t] + gamma * live * values[t + 1] - values[t];
    next = delta + gamma * lambda * live * next;
    adv[t] = next;
  }
  return adv;
}

ClippedTerm clipped_surrogate(double ratio, double advantage, double epsilon) {
  if (!std::isfinite(ratio)) throw NumericFault("probability ratio is non-finite (stale log-probs?)");
  const double unclipped = ratio * advantage;
  const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage;
  if (unclipped <= clipped) return {unclipped, advantage};
  return {clipped, 0.0};
}

// ------------------------------------------------------------ TD3-BC/CQL

Td3BcLearner::Td3BcLearner(const AgentConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(mix_seed(seed, 0x696e6974));
  actor_ = nn::make_mlp<float>(nn::kStateFeatures, config_.hidden, kActionDim, nn::Activation::Tanh, rng);
  q1_ = nn::make_mlp<float>(kCriticInput, config_.hidden, 1, nn::Activation::Identity, rng);
  q2_ = nn::make_mlp<float>(kCriticInput, config_.hidden, 1, nn::Activation::Identity, rng);
  actor_target_ = actor_;
  q1_target_ = q1_;
  q2_target_ = q2_;
  actor_opt_ = make_adam(actor_, config_.actor_lr);
  q1_opt_ = make_adam(q1_, config_.critic_lr);
  q2_opt_ = make_adam(q2_, config_.critic_lr);
}

Vector Td3BcLearner::q_values(int critic, const Matrix& states, const Matrix& actions) const {
  return this->critic(critic).forward(concat_rows(states, actions)).row(0).transpose();
}

CriticStats Td3BcLearner::critic_pass(const Batch& batch, Rng& rng, bool apply) {
  const auto n = static_cast<Eigen::Index>(batch.size());
  if (n == 0) throw ValidationError("empty batch");
  const double bn = static_cast<double>(n);

  Matrix noise = normal_matrix(rng, kActionDim, n) * config_.policy_noise;
  noise = noise.cwiseMax(-config_.noise_clip).cwiseMin(config_.noise_clip);
  const Matrix next_actions = (actor_target_.forward(batch.next_states) + noise).cwiseMax(-1.0).cwiseMin(1.0);
  const Matrix next_input = concat_rows(batch.next_states, next_actions);
  const Matrix qt = q1_target_.forward(next_input).cwiseMin(q2_target_.forward(next_input));
  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = batch.rewards[i] + config_.gamma * (1.0 - batch.done[i]) * qt(0, i);

  const Matrix input = concat_rows(batch.states, batch.actions);
  const int samples = config_.cql_samples;
  Matrix random_actions;
  if (config_.alpha_cql > 0.0) random_actions = uniform_matrix(rng, kActionDim, n * samples);

  CriticStats stats;
  Network* nets[2] = {&q1_, &q2_};
  nn::AdamF* opts[2] = {&q1_opt_, &q2_opt_};
  for (int c = 0; c < 2; ++c) {
    Network& net = *nets[c];
    nn::TapeF tape;
    const Matrix q = net.forward(input, tape);
    const Vector resid = q.row(0).transpose() - y;
    const double td = resid.squaredNorm() / bn;
    Matrix dq = (2.0 / bn) * resid.transpose();

    double penalty = 0.0;
    nn::GradientsF cql_grads;
    if (config_.alpha_cql > 0.0) {
      nn::TapeF shared;
      const Matrix qr = net.forward_shared(batch.states, random_actions, samples, shared);
      Matrix dqr(1, n * samples);
      for (Eigen::Index i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int r = 0; r < samples; ++r) mx = std::max(mx, static_cast<double>(qr(0, r * n + i)));
        double z = 0.0;
        for (int r = 0; r < samples; ++r) z += std::exp(qr(0, r * n + i) - mx);
        const double lse = mx + std::log(z);
        penalty += lse - q(0, i);
        for (int r = 0; r < samples; ++r)
          dqr(0, r * n + i) = static_cast<float>(config_.alpha_cql / bn * std::exp(qr(0, r * n + i) - lse));
      }
      penalty /= bn;
      dq.array() -= config_.alpha_cql / bn;
      cql_grads = net.backward(shared, dqr);
    }
    nn::GradientsF grads = net.backward(tape, dq);
    if (config_.alpha_cql > 0.0) grads += cql_grads;

    const double total = td + config_.alpha_cql * penalty;
    require_finite(total, "critic loss");
    stats.td_loss += 0.5 * td;
    stats.cql_term += 0.5 * penalty;
    stats.total += 0.5 * total;
    if (apply) opts[c]->step(net, grads);
  }
  return stats;
}

CriticStats Td3BcLearner::critic_update(const Batch& batch, Rng& rng) { return critic_pass(batch, rng, true); }

CriticStats Td3BcLearner::critic_loss(const Batch& batch, Rng& rng) const {
  return const_cast<Td3BcLearner*>(this)->critic_pass(batch, rng, false);
}

double Td3BcLearner::actor_update(const Batch& batch) {
  const auto n = static_cast<Eigen::Index>(batch.size());
  if (n == 0) throw ValidationError("empty batch");
  const double bn = static_cast<double>(n);
  nn::TapeF actor_tape;
  const Matrix pi = actor_.forward(batch.states, actor_tape);
  nn::TapeF critic_tape;
  const Matrix q = q1_.forward(concat_rows(batch.states, pi), critic_tape);
  const double mean_abs_q = q.cwiseAbs().mean();
  const double lambda = config_.alpha_bc / std::max(mean_abs_q, 1e-6);
  const Matrix diff = pi - batch.actions;
  const double loss = -lambda * q.mean() + diff.squaredNorm() / bn;
  require_finite(loss, "actor loss");

  const Matrix d_input = q1_.input_gradient(critic_tape, Matrix::Constant(1, n, -lambda / bn));
  const Matrix d_pi = d_input.bottomRows(kActionDim) + (2.0 / bn) * diff;
  actor_opt_.step(actor_, actor_.backward(actor_tape, d_pi));
  return loss;
}

void Td3BcLearner::update_targets() {
  nn::soft_update(actor_target_, actor_, config_.tau);
  nn::soft_update(q1_target_, q1_, config_.tau);
  nn::soft_update(q2_target_, q2_, config_.tau);
}

void Td3BcLearner::update(const Batch& batch, Rng& rng, double* critic_loss_out, double* actor_loss_out) {
  const CriticStats stats = critic_update(batch, rng);
  if (critic_loss_out) *critic_loss_out = stats.total;
  ++steps_;
  if (steps_ % config_.policy_delay == 0) {
    const double actor_loss = actor_update(batch);
    if (actor_loss_out) *actor_loss_out = actor_loss;
    update_targets();
  }
}

// ------------------------------------------------------------------- SAC

SacLearner::SacLearner(const AgentConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(mix_seed(seed, 0x696e6974));
  actor_ = nn::make_mlp<float>(nn::kStateFeatures, config_.hidden, 2 * kActionDim, nn::Activation::Identity, rng);
  q1_ = nn::make_mlp<float>(kCriticInput, config_.hidden, 1, nn::Activation::Identity, rng);
  q2_ = nn::make_mlp<float>(kCriticInput, config_.hidden, 1, nn::Activation::Identity, rng);
  q1_target_ = q1_;
  q2_target_ = q2_;
  actor_opt_ = make_adam(actor_, config_.actor_lr);
  q1_opt_ = make_adam(q1_, config_.critic_lr);
  q2_opt_ = make_adam(q2_, config_.critic_lr);
}

double SacLearner::critic_update(const Batch& batch, Rng& rng) {
  const auto n = static_cast<Eigen::Index>(batch.size());
  if (n == 0) throw ValidationError("empty batch");
  const double bn = static_cast<double>(n);
  Matrix mean, log_std;
  split_gaussian(actor_.forward(batch.next_states), mean, log_std);
  const SquashedSample next = squashed_sample(mean, log_std, normal_matrix(rng, kActionDim, n));
  const Matrix next_input = concat_rows(batch.next_states, next.action);
  const Matrix qt = q1_target_.forward(next_input).cwiseMin(q2_target_.forward(next_input));
  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double soft = qt(0, i) - config_.entropy_alpha * next.log_prob[i];
    y[i] = batch.rewards[i] + config_.gamma * (1.0 - batch.done[i]) * soft;
  }
  const Matrix input = concat_rows(batch.states, batch.actions);
  double loss = 0.0;
  Network* nets[2] = {&q1_, &q2_};
  nn::AdamF* opts[2] = {&q1_opt_, &q2_opt_};
  for (int c = 0; c < 2; ++c) {
    nn::TapeF tape;
    const Vector resid = nets[c]->forward(input, tape).row(0).transpose() - y;
    const double l = resid.squaredNorm() / bn;
    require_finite(l, "critic loss");
    loss += 0.5 * l;
    opts[c]->step(*nets[c], nets[c]->backward(tape, (2.0 / bn) * resid.transpose()));
  }
  return loss;
}

nn::GradientsF SacLearner::actor_gradients(const Batch& batch, const Matrix& noise, double* loss_out) const {
  const auto n = static_cast<Eigen::Index>(batch.size());
  const double bn = static_cast<double>(n);
  const double alpha = config_.entropy_alpha;
  nn::TapeF tape;
  const Matrix out = actor_.forward(batch.states, tape);
  Matrix mean, log_std;
  split_gaussian(out, mean, log_std);
  const Matrix mask = log_std_mask(out);
  const SquashedSample s = squashed_sample(mean, log_std, noise);

  const Matrix input = concat_rows(batch.states, s.action);
  nn::TapeF t1, t2;
  const Matrix q1 = q1_.forward(input, t1);
  const Matrix q2 = q2_.forward(input, t2);
  Matrix use1(1, n), use2(1, n);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool first = q1(0, i) <= q2(0, i);
    use1(0, i) = first ? 1.0 : 0.0;
    use2(0, i) = first ? 0.0 : 1.0;
    loss += alpha * s.log_prob[i] - std::min(q1(0, i), q2(0, i));
  }
  loss /= bn;
  const Matrix g1 = q1_.input_gradient(t1, use1);
  const Matrix g2 = q2_.input_gradient(t2, use2);
  const Matrix dq_da = g1.bottomRows(kActionDim) + g2.bottomRows(kActionDim);

  Matrix d_out(2 * kActionDim, n);
  for (Eigen::Index c = 0; c < n; ++c) {
    for (int r = 0; r < kActionDim; ++r) {
      const double a = s.action(r, c);
      const double sigma_eps = std::exp(log_std(r, c)) * noise(r, c);
      const double dq_du = dq_da(r, c) * (1.0 - a * a);
      d_out(r, c) = (alpha * 2.0 * a - dq_du) / bn;
      d_out(kActionDim + r, c) = mask(r, c) * (alpha * (-1.0 + 2.0 * a * sigma_eps) - dq_du * sigma_eps) / bn;
    }
  }
  if (loss_out) *loss_out = loss;
  return actor_.backward(tape, d_out);
}

double SacLearner::actor_update(const Batch& batch, Rng& rng) {
  const Matrix noise = normal_matrix(rng, kActionDim, static_cast<Eigen::Index>(batch.size()));
  double loss = 0.0;
  const nn::GradientsF g = actor_gradients(batch, noise, &loss);
  require_finite(loss, "actor loss");
  actor_opt_.step(actor_, g);
  return loss;
}

void SacLearner::update_targets() {
  nn::soft_update(q1_target_, q1_, config_.tau);
  nn::soft_update(q2_target_, q2_, config_.tau);
}

void SacLearner::update(const Batch& batch, Rng& rng, double* critic_loss_out, double* actor_loss_out) {
  const double c = critic_update(batch, rng);
  const double a = actor_update(batch, rng);
  update_targets();
  if (critic_loss_out) *critic_loss_out = c;
  if (actor_loss_out) *actor_loss_out = a;
}

// ------------------------------------------------------------------- PPO

PpoLearner::PpoLearner(const AgentConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(mix_seed(seed, 0x696e6974));
  actor_ = nn::make_mlp<float>(nn::kStateFeatures, config_.hidden, 2 * kActionDim, nn::Activation::Identity, rng);
  value_ = nn::make_mlp<float>(nn::kStateFeatures, config_.hidden, 1, nn::Activation::Identity, rng);
  actor_opt_ = make_adam(actor_, config_.actor_lr);
  value_opt_ = make_adam(value_, config_.critic_lr);
}

std::vector<RolloutStep> PpoLearner::rollout(const env::Environment& env, const data::InitialState& initial,
                                             std::uint64_t env_seed, Rng& rng) const {
  std::vector<RolloutStep> steps;
  env::EpisodeState state = env.reset(initial, env_seed);
  bool done = false;
  while (!done) {
    RolloutStep s;
    s.state = state.window;
    s.features = nn::featurize<float>(state.window);
    const Matrix out = actor_.forward(Matrix(s.features));
    Matrix mean, log_std;
    split_gaussian(out, mean, log_std);
    const Matrix noise = normal_matrix(rng, kActionDim, 1);
    const Matrix u = mean.array() + log_std.array().exp() * noise.array();
    s.pre_action = u.col(0);
    s.log_prob = gaussian_log_prob(mean, log_std, u)[0];
    s.value = value_.forward(s.features)[0];
    const Vector a = u.col(0).array().tanh();
    env::StepResult r = env.step(state, to_raw(a));
    s.reward = r.reward_scaled;
    s.done = r.done;
    done = r.done;
    state = std::move(r.next_state);
    steps.push_back(std::move(s));
  }
  return steps;
}

std::vector<double> PpoLearner::ratios(const std::vector<RolloutStep>& steps) const {
  const auto n = static_cast<Eigen::Index>(steps.size());
  Matrix f(nn::kStateFeatures, n), u(kActionDim, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    f.col(i) = steps[static_cast<std::size_t>(i)].features;
    u.col(i) = steps[static_cast<std::size_t>(i)].pre_action;
  }
  Matrix mean, log_std;
  split_gaussian(actor_.forward(f), mean, log_std);
  const Vector lp = gaussian_log_prob(mean, log_std, u);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = std::exp(lp[i] - steps[static_cast<std::size_t>(i)].log_prob);
  return out;
}

PpoStats PpoLearner::update(const std::vector<std::vector<RolloutStep>>& episodes, Rng& rng) {
  std::vector<const RolloutStep*> flat;
  std::vector<double> advantages, returns;
  for (const auto& ep : episodes) {
    if (ep.empty()) continue;
    std::vector<double> rewards, values;
    std::vector<bool> done;
    for (const RolloutStep& s : ep) {
      rewards.push_back(s.reward);
      values.push_back(s.value);
      done.push_back(s.done);
      flat.push_back(&s);
    }
    values.push_back(ep.back().done ? 0.0 : value_.forward(ep.back().features)[0]);
    const std::vector<double> adv = gae(rewards, values, done, config_.gamma, config_.gae_lambda);
    for (std::size_t t = 0; t < adv.size(); ++t) {
      advantages.push_back(adv[t]);
      returns.push_back(adv[t] + values[t]);
    }
  }
  if (flat.empty()) throw ValidationError("PPO update needs at least one step");
  const std::size_t total = flat.size();
  const double mean_adv = std::accumulate(advantages.begin(), advantages.end(), 0.0) / static_cast<double>(total);
  double var = 0.0;
  for (double a : advantages) var += (a - mean_adv) * (a - mean_adv);
  const double sd = std::sqrt(var / static_cast<double>(total));
  for (double& a : advantages) a = (a - mean_adv) / (sd + 1e-8);

  PpoStats stats;
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t mb = static_cast<std::size_t>(config_.ppo_minibatch);
  for (int epoch = 0; epoch < config_.ppo_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    PpoStats epoch_stats;
    int batches = 0;
    for (std::size_t start = 0; start < total; start += mb) {
      const std::size_t end = std::min(total, start + mb);
      const auto m = static_cast<Eigen::Index>(end - start);
      const double bm = static_cast<double>(m);
      Matrix f(nn::kStateFeatures, m), u(kActionDim, m);
      Vector old_lp(m), adv(m), ret(m);
      for (Eigen::Index i = 0; i < m; ++i) {
        const std::size_t k = order[start + static_cast<std::size_t>(i)];
        f.col(i) = flat[k]->features;
        u.col(i) = flat[k]->pre_action;
        old_lp[i] = flat[k]->log_prob;
        adv[i] = advantages[k];
        ret[i] = returns[k];
      }

      nn::TapeF tape;
      const Matrix out = actor_.forward(f, tape);
      Matrix mean, log_std;
      split_gaussian(out, mean, log_std);
      const Matrix mask = log_std_mask(out);
      const Vector lp = gaussian_log_prob(mean, log_std, u);
      Matrix d_out(2 * kActionDim, m);
      double policy_loss = 0.0, entropy = 0.0;
      for (Eigen::Index i = 0; i < m; ++i) {
        const double ratio = std::exp(lp[i] - old_lp[i]);
        const ClippedTerm term = clipped_surrogate(ratio, adv[i], config_.clip_ratio);
        policy_loss -= term.value / bm;
        const double d_lp = -term.d_ratio * ratio / bm;
        for (int r = 0; r < kActionDim; ++r) {
          const double inv_var = std::exp(-2.0 * log_std(r, i));
          const double diff = u(r, i) - mean(r, i);
          d_out(r, i) = d_lp * diff * inv_var;
          const double d_log_std = d_lp * (diff * diff * inv_var - 1.0) - config_.entropy_coef / bm;
          d_out(kActionDim + r, i) = mask(r, i) * d_log_std;
          entropy += (log_std(r, i) + 0.5 + kHalfLog2Pi) / bm;
        }
      }
      policy_loss -= config_.entropy_coef * entropy;
      require_finite(policy_loss, "PPO policy loss");
      actor_opt_.step(actor_, actor_.backward(tape, d_out));

      nn::TapeF vtape;
      const Vector v = value_.forward(f, vtape).row(0).transpose();
      const Vector resid = v - ret;
      const double value_loss = config_.value_coef * resid.squaredNorm() / bm;
      require_finite(value_loss, "PPO value loss");
      value_opt_.step(value_, value_.backward(vtape, (2.0 * config_.value_coef / bm) * resid.transpose()));

      epoch_stats.policy_loss += policy_loss;
      epoch_stats.value_loss += value_loss;
      epoch_stats.entropy += entropy;
      ++batches;
    }
    stats.policy_loss = epoch_stats.policy_loss / batches;
    stats.value_loss = epoch_stats.value_loss / batches;
    stats.entropy = epoch_stats.entropy / batches;
  }
  return stats;
}

// ------------------------------------------------------- rollouts & eval

ReplayBuffer build_offline_buffer(const env::Environment& env, const std::vector<data::InitialState>& initial_states,
                                  const Policy& behavior, std::uint64_t seed, std::size_t target_size) {
  if (initial_states.empty()) throw ValidationError("build_offline_buffer needs at least one initial state");
  ReplayBuffer buffer(target_size);
  Rng policy_rng(mix_seed(seed, 0x62656861));
  std::size_t episode = 0;
  std::size_t failures = 0;
  while (buffer.size() < target_size) {
    const data::InitialState& init = initial_states[episode % initial_states.size()];
    std::vector<Transition> transitions;
    try {
      env::EpisodeState state = env.reset(init, mix_seed(seed, episode));
      bool done = false;
      while (!done) {
        const RawActionVector a = behavior.act(state.window, policy_rng);
        env::StepResult r = env.step(state, a);
        transitions.push_back({state.window, a, r.reward_scaled, r.next_state.window, r.done});
        done = r.done;
        state = std::move(r.next_state);
      }
    } catch (const std::exception& e) {
      std::cerr << "warning: discarded buffer episode " << episode << ": " << e.what() << '\n';
      ++episode;
      if (++failures > 100 && failures > buffer.size()) throw;
      continue;
    }
    for (const Transition& t : transitions) {
      if (buffer.size() == target_size) break;
      buffer.add(t);
    }
    ++episode;
  }
  buffer.freeze();
  return buffer;
}

EpisodeOutcome run_episode(const env::Environment& env, const data::InitialState& initial, std::uint64_t env_seed,
                           const Policy& policy, Rng& policy_rng) {
  EpisodeOutcome out;
  env::EpisodeState state = env.reset(initial, env_seed);
  bool done = false;
  while (!done) {
    env::StepResult r = env.step(state, policy.act(state.window, policy_rng));
    out.total_return += r.reward_scaled;
    done = r.done;
    state = r.next_state;
    out.steps.push_back(std::move(r));
  }
  out.glycemic = metrics::glycemic_summary(env::simulated_glucose(out.steps));
  return out;
}

std::uint64_t episode_env_seed(std::uint64_t seed, std::size_t index) { return mix_seed(seed, index); }

std::uint64_t episode_policy_seed(std::uint64_t seed, std::size_t index) {
  return mix_seed(seed, 0x6576616c00 + index);
}

EvaluationSummary evaluate(const env::Environment& env, const std::vector<data::InitialState>& states,
                           const std::vector<std::uint64_t>& seeds, const Policy& policy) {
  if (states.empty() || seeds.empty()) throw ValidationError("evaluation needs states and seeds");
  EvaluationSummary s;
  for (std::size_t i = 0; i < states.size(); ++i) {
    for (std::uint64_t seed : seeds) {
      Rng rng(episode_policy_seed(seed, i));
      const EpisodeOutcome o = run_episode(env, states[i], episode_env_seed(seed, i), policy, rng);
      s.returns.push_back(o.total_return);
      s.tir.push_back(o.glycemic.tir_pct);
      s.tbr.push_back(o.glycemic.tbr_pct);
    }
  }
  const double n = static_cast<double>(s.returns.size());
  s.mean_return = std::accumulate(s.returns.begin(), s.returns.end(), 0.0) / n;
  s.mean_tir = std::accumulate(s.tir.begin(), s.tir.end(), 0.0) / n;
  s.mean_tbr = std::accumulate(s.tbr.begin(), s.tbr.end(), 0.0) / n;
  return s;
}

std::vector<metrics::BehaviorEvent> episode_events(const std::vector<env::StepResult>& steps) {
  std::vector<metrics::BehaviorEvent> events;
  for (std::size_t t = 0; t < steps.size(); ++t) {
    for (const env::AppliedEvent& e : steps[t].applied_events) {
      const double hours = static_cast<double>(t) + static_cast<double>(e.tick_offset) / kTicksPerHour;
      const auto kind = e.kind == ActionType::Inject ? metrics::EventKind::Bolus : metrics::EventKind::Meal;
      events.push_back({hours, kind, e.magnitude});
    }
  }
  return events;
}

// -------------------------------------------------------------- training

std::unique_ptr<Policy> TrainedPolicy::make_policy() const {
  if (!actor) return std::make_unique<RandomPolicy>();
  return std::make_unique<ActorPolicy>(*actor, kind, std::string(to_string(algorithm)));
}

nlohmann::json TrainedPolicy::to_json() const {
  return {{"format", "guide-policy"},
          {"version", 1},
          {"algorithm", std::string(to_string(algorithm))},
          {"kind", kind == ActorKind::Deterministic ? "deterministic" : "squashed_gaussian"},
          {"config", agents::to_json(config)},
          {"actor", actor ? nn::to_json(*actor) : nlohmann::json(nullptr)}};
}

TrainedPolicy TrainedPolicy::from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "guide-policy") throw ValidationError("not a guide-policy checkpoint");
  TrainedPolicy p;
  p.algorithm = parse_algorithm(j.at("algorithm").get<std::string>());
  p.config = agent_config_from_json(j.at("config"));
  p.kind = j.at("kind").get<std::string>() == "deterministic" ? ActorKind::Deterministic : ActorKind::SquashedGaussian;
  if (!j.at("actor").is_null()) p.actor = nn::network_from_json<float>(j.at("actor"));
  if (p.algorithm != Algorithm::Random && !p.actor) throw ValidationError("checkpoint is missing its actor");
  return p;
}

namespace {

ActorKind kind_for(Algorithm a) {
  return (a == Algorithm::Td3Bc || a == Algorithm::CqlBc) ? ActorKind::Deterministic : ActorKind::SquashedGaussian;
}

TrainResult random_result(const AgentConfig& config, const Evaluator& evaluator) {
  TrainResult r;
  r.policy.algorithm = Algorithm::Random;
  r.policy.config = config;
  if (evaluator) {
    const EvaluationSummary e = evaluator(RandomPolicy());
    r.curve.push_back({0, 0.0, 0.0, e.mean_return, e.mean_tir});
  }
  return r;
}

// Tracks running losses and snapshots between evaluation points.
struct CurveTracker {
  const Evaluator& evaluator;
  Algorithm algorithm;
  double critic_sum = 0.0, actor_sum = 0.0;
  long critic_n = 0, actor_n = 0;

  void add(double critic, double actor, bool has_actor) {
    critic_sum += critic;
    ++critic_n;
    if (has_actor) {
      actor_sum += actor;
      ++actor_n;
    }
  }

  CurveRow row(long step, const Network& actor, ActorKind kind) {
    CurveRow r;
    r.step = step;
    r.critic_loss = critic_n ? critic_sum / static_cast<double>(critic_n) : 0.0;
    r.actor_loss = actor_n ? actor_sum / static_cast<double>(actor_n) : 0.0;
    if (evaluator) {
      const ActorPolicy policy(actor, kind, std::string(to_string(algorithm)));
      const EvaluationSummary e = evaluator(policy);
      r.eval_return = e.mean_return;
      r.eval_tir = e.mean_tir;
    }
    critic_sum = actor_sum = 0.0;
    critic_n = actor_n = 0;
    return r;
  }
};

}  // namespace

TrainResult train_offline(const AgentConfig& config, const ReplayBuffer& buffer, std::uint64_t seed,
                          const Evaluator& evaluator) {
  config.validate();
  if (config.algorithm == Algorithm::Random) return random_result(config, evaluator);
  if (!is_offline(config.algorithm))
    throw ValidationError(std::string(to_string(config.algorithm)) + " is not an offline algorithm");
  if (!buffer.frozen() || buffer.size() == 0) throw ValidationError("offline training needs a frozen, nonempty buffer");

  TrainResult result;
  result.policy.algorithm = config.algorithm;
  result.policy.config = config;
  result.policy.kind = kind_for(config.algorithm);
  Rng batch_rng(mix_seed(seed, 0x62617463));
  Rng noise_rng(mix_seed(seed, 0x6e6f6973));
  const bool sac = config.algorithm == Algorithm::SacOffline;
  std::optional<Td3BcLearner> td3;
  std::optional<SacLearner> sac_learner;
  if (sac) sac_learner.emplace(config, seed);
  else td3.emplace(config, seed);
  const auto actor = [&]() -> const Network& { return sac ? sac_learner->actor() : td3->actor(); };

  Network last_good = actor();
  CurveTracker tracker{evaluator, config.algorithm};
  for (long step = 1; step <= config.update_steps; ++step) {
    const Batch batch = buffer.sample(batch_rng, static_cast<std::size_t>(config.batch_size));
    double critic_loss = 0.0, actor_loss = std::numeric_limits<double>::quiet_NaN();
    try {
      if (sac) sac_learner->update(batch, noise_rng, &critic_loss, &actor_loss);
      else td3->update(batch, noise_rng, &critic_loss, &actor_loss);
      if (!actor().all_finite()) throw NumericFault("actor parameters became non-finite");
    } catch (const NumericFault& e) {
      result.diverged = true;
      result.message = "diverged at update " + std::to_string(step) + ": " + e.what();
      break;
    }
    tracker.add(critic_loss, actor_loss, !std::isnan(actor_loss));
    if (step % config.eval_interval == 0 || step == config.update_steps) {
      result.curve.push_back(tracker.row(step, actor(), result.policy.kind));
      last_good = actor();
    }
  }
  result.policy.actor = result.diverged ? last_good : actor();
  return result;
}

TrainResult train_online(const AgentConfig& config, const env::Environment& env,
                         const std::vector<data::InitialState>& train_states, std::uint64_t seed,
                         const Evaluator& evaluator) {
  config.validate();
  if (config.algorithm == Algorithm::Random) return random_result(config, evaluator);
  if (config.algorithm != Algorithm::SacOnline && config.algorithm != Algorithm::Ppo)
    throw ValidationError(std::string(to_string(config.algorithm)) + " is not an online algorithm");
  if (train_states.empty()) throw ValidationError("online training needs initial states");

  TrainResult result;
  result.policy.algorithm = config.algorithm;
  result.policy.config = config;
  result.policy.kind = ActorKind::SquashedGaussian;
  Rng rollout_rng(mix_seed(seed, 0x726f6c6c));
  Rng update_rng(mix_seed(seed, 0x75706474));
  const std::size_t n = train_states.size();
  CurveTracker tracker{evaluator, config.algorithm};

  if (config.algorithm == Algorithm::Ppo) {
    PpoLearner learner(config, seed);
    Network last_good = learner.actor();
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
      try {
        std::vector<std::vector<RolloutStep>> episodes;
        for (std::size_t i = 0; i < n; ++i)
          episodes.push_back(
              learner.rollout(env, train_states[i], mix_seed(seed, static_cast<std::uint64_t>(epoch) * n + i), rollout_rng));
        const PpoStats s = learner.update(episodes, update_rng);
        tracker.add(s.value_loss, s.policy_loss, true);
      } catch (const NumericFault& e) {
        result.diverged = true;
        result.message = "diverged in epoch " + std::to_string(epoch) + ": " + e.what();
        break;
      }
      result.curve.push_back(tracker.row(epoch, learner.actor(), result.policy.kind));
      last_good = learner.actor();
    }
    result.policy.actor = result.diverged ? last_good : learner.actor();
    return result;
  }

  SacLearner learner(config, seed);
  Network last_good = learner.actor();
  ReplayBuffer buffer(static_cast<std::size_t>(config.epochs) * n * kEpisodeSteps);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    try {
      const ActorPolicy behavior(learner.actor(), ActorKind::SquashedGaussian, "sac-online", true);
      for (std::size_t i = 0; i < n; ++i) {
        env::EpisodeState state = env.reset(train_states[i], mix_seed(seed, static_cast<std::uint64_t>(epoch) * n + i));
        bool done = false;
        while (!done) {
          const RawActionVector a = behavior.act(state.window, rollout_rng);
          env::StepResult r = env.step(state, a);
          buffer.add({state.window, a, r.reward_scaled, r.next_state.window, r.done});
          done = r.done;
          state = std::move(r.next_state);
        }
      }
      for (int u = 0; u < config.updates_per_epoch; ++u) {
        double c = 0.0, a = 0.0;
        learner.update(buffer.sample(update_rng, static_cast<std::size_t>(config.batch_size)), update_rng, &c, &a);
        tracker.add(c, a, true);
      }
      if (!learner.actor().all_finite()) throw NumericFault("actor parameters became non-finite");
    } catch (const NumericFault& e) {
      result.diverged = true;
      result.message = "diverged in epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }
    result.curve.push_back(tracker.row(epoch, learner.actor(), result.policy.kind));
    last_good = learner.actor();
  }
  result.policy.actor = result.diverged ? last_good : learner.actor();
  return result;
}

TrainResult train(const AgentConfig& config, const ReplayBuffer* buffer, const env::Environment* env,
                  const std::vector<data::InitialState>& train_states, std::uint64_t seed, const Evaluator& evaluator) {
  if (config.algorithm == Algorithm::Random) return random_result(config, evaluator);
  if (is_offline(config.algorithm)) {
    if (!buffer) throw ValidationError("offline training needs a replay buffer");
    return train_offline(config, *buffer, seed, evaluator);
  }
  if (!env) throw ValidationError("online training needs an environment");
  return train_online(config, *env, train_states, seed, evaluator);
}

void write_curve_csv(const std::vector<CurveRow>& curve, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,critic_loss,actor_loss,eval_return,eval_tir\n";
  out.precision(10);
  for (const CurveRow& r : curve)
    out << r.step << ',' << r.critic_loss << ',' << r.actor_loss << ',' << r.eval_return << ',' << r.eval_tir << '\n';
}

}  // namespace guide::agents
