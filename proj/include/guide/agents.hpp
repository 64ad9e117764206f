#pragma once

// Policy learners (TD3-BC, CQL-BC, SAC offline/online, PPO), the replay
// buffer they train from, and the fixed policies used as baselines and for
// buffer construction.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "guide/core.hpp"
#include "guide/data.hpp"
#include "guide/env.hpp"
#include "guide/metrics.hpp"
#include "guide/nn.hpp"
#include "guide/random.hpp"

namespace guide::agents {

// Learners train in single precision.
using Matrix = nn::MatrixF;
using Vector = nn::VectorF;
using Network = nn::NetworkF;

enum class Algorithm { Td3Bc, CqlBc, SacOffline, SacOnline, Ppo, Random };

std::string_view to_string(Algorithm a);
Algorithm parse_algorithm(std::string_view name);
bool is_offline(Algorithm a);

struct AgentConfig {
  Algorithm algorithm = Algorithm::Td3Bc;
  double gamma = 0.98;
  double tau = 0.005;
  // TD3-BC / CQL-BC
  double alpha_bc = 1.5;
  double alpha_cql = 0.0;
  int cql_samples = 10;
  double policy_noise = 0.2;
  double noise_clip = 0.5;
  int policy_delay = 2;
  // SAC
  double entropy_alpha = 0.2;
  // PPO
  double clip_ratio = 0.2;
  double gae_lambda = 0.95;
  double entropy_coef = 0.001;
  double value_coef = 0.5;
  int ppo_epochs = 10;
  int ppo_minibatch = 256;

  double actor_lr = 3e-4;
  double critic_lr = 1e-4;
  int batch_size = 256;
  int update_steps = 10000;    // offline
  int epochs = 20;             // online
  int updates_per_epoch = 500; // online SAC
  int eval_interval = 1000;    // offline update steps between snapshots
  std::vector<int> hidden{256, 256};

  /// Published defaults for each algorithm.
  static AgentConfig defaults(Algorithm algorithm);
  void validate() const;
};

nlohmann::json to_json(const AgentConfig& c);
/// Missing keys keep the algorithm's defaults.
AgentConfig agent_config_from_json(const nlohmann::json& j);

double bellman_target(double reward, bool done, double next_q, double gamma);

// ---------------------------------------------------------------- buffer

inline constexpr int kCriticInput = nn::kStateFeatures + kActionDim;

struct Batch {
  Matrix states;       // features x B
  Matrix actions;      // 6 x B
  Vector rewards;      // B
  Matrix next_states;  // features x B
  Vector done;         // B, 0 or 1
  std::size_t size() const { return static_cast<std::size_t>(rewards.size()); }
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  void add(const Transition& t);
  /// Makes the buffer immutable and caches network features for sampling.
  void freeze();
  bool frozen() const { return frozen_; }
  std::size_t size() const { return transitions_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Transition& at(std::size_t i) const { return transitions_.at(i); }

  /// Uniform indices over the filled region.
  std::vector<std::size_t> sample_indices(Rng& rng, std::size_t n) const;
  Batch gather(const std::vector<std::size_t>& indices) const;
  Batch sample(Rng& rng, std::size_t n) const { return gather(sample_indices(rng, n)); }

  std::uint64_t checksum() const;

  /// Binary layout: 8-byte magic "GUIDEBUF", little-endian uint64 header
  /// length, JSON header, then per transition 72*7 state doubles, 6 action
  /// doubles, reward, 72*7 next-state doubles and done, all float64.
  void save(const std::filesystem::path& path, const nlohmann::json& header) const;
  static ReplayBuffer load(const std::filesystem::path& path, nlohmann::json* header = nullptr);

 private:
  std::size_t capacity_;
  bool frozen_ = false;
  std::vector<Transition> transitions_;
  Matrix features_;
  Matrix next_features_;
};

// -------------------------------------------------------------- policies

class Policy {
 public:
  virtual ~Policy() = default;
  virtual RawActionVector act(const StateWindow& window, Rng& rng) const = 0;
  virtual std::string name() const = 0;
};

class RandomPolicy final : public Policy {
 public:
  RawActionVector act(const StateWindow& window, Rng& rng) const override;
  std::string name() const override { return "random"; }
};

/// Clinical rule of thumb: correct highs above 180 when no bolus in the last
/// 2 h, treat lows below 80 with 15-25 g, otherwise do nothing.
class HeuristicPolicy final : public Policy {
 public:
  RawActionVector act(const StateWindow& window, Rng& rng) const override;
  BehavioralAction decide(const StateWindow& window) const;
  std::string name() const override { return "heuristic"; }
};

/// Heuristic with epsilon-random actions and Gaussian noise on magnitudes.
class BehaviorPolicy final : public Policy {
 public:
  explicit BehaviorPolicy(double epsilon = 0.2, double carb_noise_sd = 3.0, double insulin_noise_sd = 1.0);
  RawActionVector act(const StateWindow& window, Rng& rng) const override;
  std::string name() const override { return "behavior"; }

 private:
  double epsilon_;
  double carb_noise_sd_;
  double insulin_noise_sd_;
  HeuristicPolicy heuristic_;
};

enum class ActorKind { Deterministic, SquashedGaussian };

/// Network-backed policy. Squashed-Gaussian actors output 6 means and 6
/// log standard deviations; they act with tanh(mean) unless `stochastic`.
class ActorPolicy final : public Policy {
 public:
  ActorPolicy(Network actor, ActorKind kind, std::string name, bool stochastic = false);
  RawActionVector act(const StateWindow& window, Rng& rng) const override;
  std::string name() const override { return name_; }
  const Network& network() const { return actor_; }
  ActorKind kind() const { return kind_; }

 private:
  Network actor_;
  ActorKind kind_;
  std::string name_;
  bool stochastic_;
};

// --------------------------------------------------------------- helpers

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

struct SquashedSample {
  Matrix pre;       // u = mean + std * eps
  Matrix action;    // tanh(u)
  Vector log_prob;  // per column, includes the tanh correction
};

/// Log of the tanh Jacobian, log(1 - tanh(u)^2), computed stably.
double log_tanh_jacobian(double u);

SquashedSample squashed_sample(const Matrix& mean, const Matrix& log_std, const Matrix& noise);

/// Diagonal Gaussian log density of `u` per column.
Vector gaussian_log_prob(const Matrix& mean, const Matrix& log_std, const Matrix& u);

/// Generalized advantage estimates for one trajectory. `values` holds one
/// entry per step plus the bootstrap value after the last step.
std::vector<double> gae(const std::vector<double>& rewards, const std::vector<double>& values,
                        const std::vector<bool>& done, double gamma, double lambda);

/// min(rho*A, clip(rho, 1-eps, 1+eps)*A) and its derivative in rho.
struct ClippedTerm {
  double value = 0.0;
  double d_ratio = 0.0;
};
ClippedTerm clipped_surrogate(double ratio, double advantage, double epsilon);

/// Splits an actor's 12 outputs into means and clamped log standard deviations.
void split_gaussian(const Matrix& out, Matrix& mean, Matrix& log_std);

// -------------------------------------------------------------- learners

struct CriticStats {
  double td_loss = 0.0;   // mean squared Bellman residual, averaged over critics
  double cql_term = 0.0;  // conservative penalty before weighting, averaged over critics
  double total = 0.0;
};

/// TD3-BC; with alpha_cql > 0 the critic loss gains the conservative penalty.
class Td3BcLearner {
 public:
  Td3BcLearner(const AgentConfig& config, std::uint64_t seed);

  /// One critic step. Target actions use the target actor with clipped noise.
  CriticStats critic_update(const Batch& batch, Rng& rng);
  /// Losses only, no parameter change.
  CriticStats critic_loss(const Batch& batch, Rng& rng) const;
  double actor_update(const Batch& batch);
  void update_targets();

  /// Critic step, then actor and target updates every policy_delay steps.
  void update(const Batch& batch, Rng& rng, double* critic_loss_out = nullptr, double* actor_loss_out = nullptr);

  Vector q_values(int critic, const Matrix& states, const Matrix& actions) const;
  Matrix act(const Matrix& states) const { return actor_.forward(states); }

  Network& actor() { return actor_; }
  const Network& actor() const { return actor_; }
  Network& critic(int i) { return i == 0 ? q1_ : q2_; }
  const Network& critic(int i) const { return i == 0 ? q1_ : q2_; }
  const Network& target_critic(int i) const { return i == 0 ? q1_target_ : q2_target_; }
  const Network& target_actor() const { return actor_target_; }
  long steps() const { return steps_; }

 private:
  CriticStats critic_pass(const Batch& batch, Rng& rng, bool apply);

  AgentConfig config_;
  Network actor_, actor_target_, q1_, q2_, q1_target_, q2_target_;
  nn::AdamF actor_opt_, q1_opt_, q2_opt_;
  long steps_ = 0;
};

/// Soft actor-critic with fixed entropy weight.
class SacLearner {
 public:
  SacLearner(const AgentConfig& config, std::uint64_t seed);

  double critic_update(const Batch& batch, Rng& rng);
  double actor_update(const Batch& batch, Rng& rng);
  void update_targets();
  void update(const Batch& batch, Rng& rng, double* critic_loss_out = nullptr, double* actor_loss_out = nullptr);

  /// Gradient of the actor loss for a fixed noise draw, for inspection.
  nn::GradientsF actor_gradients(const Batch& batch, const Matrix& noise, double* loss_out = nullptr) const;

  Network& actor() { return actor_; }
  const Network& actor() const { return actor_; }
  Network& critic(int i) { return i == 0 ? q1_ : q2_; }

 private:
  AgentConfig config_;
  Network actor_, q1_, q2_, q1_target_, q2_target_;
  nn::AdamF actor_opt_, q1_opt_, q2_opt_;
};

struct RolloutStep {
  StateWindow state;
  Vector features;
  Vector pre_action;  // Gaussian sample before tanh
  double log_prob = 0.0;
  double value = 0.0;
  double reward = 0.0;
  bool done = false;
};

struct PpoStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
};

class PpoLearner {
 public:
  PpoLearner(const AgentConfig& config, std::uint64_t seed);

  /// One 24-step episode with the current stochastic policy.
  std::vector<RolloutStep> rollout(const env::Environment& env, const data::InitialState& initial,
                                   std::uint64_t env_seed, Rng& rng) const;

  /// Advantages and returns for a list of episodes, then `ppo_epochs` passes
  /// of minibatch updates.
  PpoStats update(const std::vector<std::vector<RolloutStep>>& episodes, Rng& rng);

  /// Probability ratios of the current policy on the given steps.
  std::vector<double> ratios(const std::vector<RolloutStep>& steps) const;

  Network& actor() { return actor_; }
  const Network& actor() const { return actor_; }
  Network& value() { return value_; }

 private:
  AgentConfig config_;
  Network actor_, value_;
  nn::AdamF actor_opt_, value_opt_;
};

// ------------------------------------------------------- rollouts & eval

/// Fills a buffer with complete 24-step episodes (the last episode is cut
/// short if `target_size` is not a multiple of 24), cycling through
/// `initial_states`; then freezes it.
ReplayBuffer build_offline_buffer(const env::Environment& env, const std::vector<data::InitialState>& initial_states,
                                  const Policy& behavior, std::uint64_t seed, std::size_t target_size);

struct EpisodeOutcome {
  std::vector<env::StepResult> steps;
  double total_return = 0.0;
  metrics::GlycemicSummary glycemic;
};

EpisodeOutcome run_episode(const env::Environment& env, const data::InitialState& initial, std::uint64_t env_seed,
                           const Policy& policy, Rng& policy_rng);

struct EvaluationSummary {
  std::vector<double> returns;
  std::vector<double> tir;
  std::vector<double> tbr;
  double mean_return = 0.0;
  double mean_tir = 0.0;
  double mean_tbr = 0.0;
};

/// Seed streams for the episode on initial state `index` under run seed
/// `seed`: the meal schedule and the policy's sampling. Shared by evaluation
/// and the interactive service so both replay the same day.
std::uint64_t episode_env_seed(std::uint64_t seed, std::size_t index);
std::uint64_t episode_policy_seed(std::uint64_t seed, std::size_t index);

/// Runs one episode per (initial state, seed) pair, states outer.
EvaluationSummary evaluate(const env::Environment& env, const std::vector<data::InitialState>& states,
                           const std::vector<std::uint64_t>& seeds, const Policy& policy);

/// Behavioral events of an episode: generated meals and agent EAT actions
/// count as meals, agent INJECT actions as boluses. Times are hours from the
/// episode start.
std::vector<metrics::BehaviorEvent> episode_events(const std::vector<env::StepResult>& steps);

// -------------------------------------------------------------- training

struct CurveRow {
  long step = 0;
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double eval_return = 0.0;
  double eval_tir = 0.0;
};

using Evaluator = std::function<EvaluationSummary(const Policy&)>;

struct TrainedPolicy {
  Algorithm algorithm = Algorithm::Random;
  AgentConfig config;
  std::optional<Network> actor;  // empty for the random baseline
  ActorKind kind = ActorKind::Deterministic;

  std::unique_ptr<Policy> make_policy() const;
  nlohmann::json to_json() const;
  static TrainedPolicy from_json(const nlohmann::json& j);
};

struct TrainResult {
  TrainedPolicy policy;
  std::vector<CurveRow> curve;
  bool diverged = false;
  std::string message;
};

/// Offline training from a frozen buffer; the environment is never touched.
/// `evaluator` (optional) runs at every eval_interval and at the end.
TrainResult train_offline(const AgentConfig& config, const ReplayBuffer& buffer, std::uint64_t seed,
                          const Evaluator& evaluator = {});

/// Online training: each epoch rolls one episode per training state, then updates.
TrainResult train_online(const AgentConfig& config, const env::Environment& env,
                         const std::vector<data::InitialState>& train_states, std::uint64_t seed,
                         const Evaluator& evaluator = {});

TrainResult train(const AgentConfig& config, const ReplayBuffer* buffer, const env::Environment* env,
                  const std::vector<data::InitialState>& train_states, std::uint64_t seed,
                  const Evaluator& evaluator = {});

void write_curve_csv(const std::vector<CurveRow>& curve, const std::filesystem::path& path);

}  // namespace guide::agents
