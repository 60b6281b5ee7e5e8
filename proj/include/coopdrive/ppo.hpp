#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coopdrive/eval.hpp"
#include "coopdrive/policy.hpp"

namespace coopdrive {

struct TrainConfig {
  double gamma = 0.99;
  double lambda = 0.95;
  double clip = 0.2;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  int epochs = 4;
  int minibatch = 256;
  int rollout_length = 1200;  // decision steps per worker per update
  int workers = 1;
  std::int64_t total_steps = 200000;
  double learning_rate = 3e-4;
  bool lr_decay = true;
  double max_grad_norm = 0.5;
  bool float64 = false;  // precision of forward/backward passes during updates
  std::uint64_t seed = 1;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct Transition {
  CompactSample sample;
  std::vector<int> actions;
  double log_prob = 0.0;
  double reward = 0.0;
  double value = 0.0;
  bool segment_end = false;     // last step of an episode or of the worker's rollout
  double bootstrap = 0.0;       // V of the state after a segment end
  double advantage = 0.0;
  double ret = 0.0;
  std::uint64_t episode = 0;
};

struct RolloutBuffer {
  std::vector<Transition> steps;
};

/// A_t = sum_l (gamma lambda)^l delta_{t+l} within each segment; returns = A_t + V_t.
void compute_gae(RolloutBuffer& buffer, double gamma, double lambda);

/// Source of training episodes: index k maps to a fixed generated episode.
struct EpisodePool {
  std::vector<double> demands;
  GenerationConfig generation;
  std::uint64_t seed = 1;
  std::uint64_t size = 5000;

  EpisodeSpec episode(const RoadNetwork& net, const std::vector<RouteSpec>& routes, std::uint64_t k) const;
};

/// Per-worker state carried between collections.
struct WorkerState {
  std::uint64_t next_episode = 0;
  Rng rng;
};

/// Steps `config.rollout_length` decisions per worker, each worker starting a fresh pool episode at every call.
RolloutBuffer collect_rollouts(const RoadNetwork& net, const std::vector<RouteSpec>& routes, const ParameterStore& store,
                               const PolicyConfig& policy, const EnvConfig& env, const EpisodePool& pool,
                               const TrainConfig& config, std::vector<WorkerState>& workers);

struct UpdateMetrics {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double first_clip_fraction = 0.0;    // first minibatch of the first epoch (parameters equal the behavior policy)
  double first_max_ratio_error = 0.0;  // max |rho - 1| over that minibatch
  double first_surrogate = 0.0;        // mean surrogate over that minibatch
  double first_advantage = 0.0;        // mean normalized advantage over its samples with active AVs
  std::size_t min_property_violations = 0;
  double grad_norm = 0.0;
};

/// Normalizes advantages over the batch, then runs the configured epochs of clipped-surrogate updates.
UpdateMetrics ppo_update(ParameterStore& store, const PolicyConfig& policy, RolloutBuffer& buffer, const TrainConfig& config,
                         double learning_rate, Rng& rng);

/// Minibatch loss: mean of -(surrogate + beta H) + value_coef (V - R)^2, with gradients into `grads` (64-bit).
double ppo_loss(const ParameterStore& store, const PolicyConfig& policy, const std::vector<const Transition*>& batch,
                const TrainConfig& config, std::vector<Tensor<double>>* grads);

/// Everything `train` needs; serialized verbatim into the run directory.
struct RunConfig {
  std::string map = "onramp";
  PolicyConfig policy;
  EnvConfig env;
  TrainConfig train;
  EpisodePool pool;
  double penetration = 0.2;
  std::string out_dir = "runs/default";
  int checkpoint_every = 10;  // updates
  int eval_every = 5;         // updates
  int eval_episodes = 2;
  double eval_demand = 0.0;  // defaults to the highest pool demand
  std::uint64_t eval_seed = 900000;
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& c);

/// Alternates collection and updates, writing train_log.jsonl, checkpoints and policy_card.json.
/// Resumes from <out_dir>/latest.ckpt when present and `resume` is set.
void train(const RunConfig& config, bool resume, std::ostream* progress = nullptr);

}  // namespace coopdrive
