#include "coopdrive/ppo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <thread>

#include "coopdrive/errors.hpp"

namespace coopdrive {

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"gamma", c.gamma},
          {"lambda", c.lambda},
          {"clip", c.clip},
          {"entropy_coef", c.entropy_coef},
          {"value_coef", c.value_coef},
          {"epochs", c.epochs},
          {"minibatch", c.minibatch},
          {"rollout_length", c.rollout_length},
          {"workers", c.workers},
          {"total_steps", c.total_steps},
          {"learning_rate", c.learning_rate},
          {"lr_decay", c.lr_decay},
          {"max_grad_norm", c.max_grad_norm},
          {"float64", c.float64},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.gamma = j.value("gamma", c.gamma);
  c.lambda = j.value("lambda", c.lambda);
  c.clip = j.value("clip", c.clip);
  c.entropy_coef = j.value("entropy_coef", c.entropy_coef);
  c.value_coef = j.value("value_coef", c.value_coef);
  c.epochs = j.value("epochs", c.epochs);
  c.minibatch = j.value("minibatch", c.minibatch);
  c.rollout_length = j.value("rollout_length", c.rollout_length);
  c.workers = j.value("workers", c.workers);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  c.float64 = j.value("float64", c.float64);
  c.seed = j.value("seed", c.seed);
  if (!(c.gamma > 0.0 && c.gamma <= 1.0) || !(c.lambda > 0.0 && c.lambda <= 1.0))
    throw ConfigError("gamma and lambda must lie in (0, 1]");
  if (!(c.clip > 0.0) || c.entropy_coef < 0.0 || c.value_coef < 0.0) throw ConfigError("invalid PPO coefficients");
  if (c.epochs <= 0 || c.minibatch <= 0 || c.rollout_length <= 0 || c.workers <= 0 || c.total_steps < 0)
    throw ConfigError("epochs, minibatch, rollout length and workers must be positive");
  if (c.learning_rate < 0.0 || !(c.max_grad_norm > 0.0)) throw ConfigError("invalid optimizer settings");
  return c;
}

void compute_gae(RolloutBuffer& buffer, double gamma, double lambda) {
  auto& s = buffer.steps;
  double gae = 0.0;
  for (std::size_t k = s.size(); k-- > 0;) {
    const bool end = s[k].segment_end || k + 1 == s.size();
    const double next_value = end ? s[k].bootstrap : s[k + 1].value;
    if (end) gae = 0.0;
    const double delta = s[k].reward + gamma * next_value - s[k].value;
    gae = delta + gamma * lambda * gae;
    s[k].advantage = gae;
    s[k].ret = gae + s[k].value;
  }
}

EpisodeSpec EpisodePool::episode(const RoadNetwork& net, const std::vector<RouteSpec>& routes, std::uint64_t k) const {
  require(!demands.empty() && size > 0, "episode pool needs demand levels and a size");
  const std::uint64_t idx = k % size;
  GenerationConfig g = generation;
  g.demand_vph = demands[idx % demands.size()];
  return generate_episode(net, routes, g, mix_seed(seed, idx));
}

namespace {

template <class T>
double value_of(const ParamSnapshot<T>& params, const PolicyConfig& policy, const CompactSample& s) {
  Graph<T> g(&params);
  return static_cast<double>(g.value(critic_forward(g, policy, s)).data[0]);
}

std::vector<Transition> run_worker(const RoadNetwork& net, const std::vector<RouteSpec>& routes,
                                   const ParamSnapshot<float>& snap, const PolicyConfig& policy, const EnvConfig& env_config,
                                   const EpisodePool& pool, int steps, int stride, WorkerState& w) {
  std::vector<Transition> out;
  out.reserve(static_cast<std::size_t>(steps));
  DrivingEnv env(net, routes, env_config);
  std::uint64_t episode = w.next_episode;
  env.reset(pool.episode(net, routes, episode));
  w.next_episode += static_cast<std::uint64_t>(stride);
  for (int k = 0; k < steps; ++k) {
    Transition t;
    t.sample = compact(env.state(), env.observation());
    const ActResult r = act(snap, policy, t.sample, w.rng, ActMode::sample);
    t.actions = r.actions;
    t.log_prob = r.log_prob;
    t.value = r.value;
    t.episode = episode;
    try {
      t.reward = env.step(r.actions);
    } catch (const IntegrityError&) {
      throw;
    } catch (const CapacityError& e) {
      throw IntegrityError(e.what(), env.sim().spec().seed);
    }
    const bool last = k + 1 == steps;
    if (env.done() || last) {
      t.segment_end = true;
      t.bootstrap = value_of(snap, policy, compact(env.state(), env.observation()));
      if (!last) {
        episode = w.next_episode;
        env.reset(pool.episode(net, routes, episode));
        w.next_episode += static_cast<std::uint64_t>(stride);
      }
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

RolloutBuffer collect_rollouts(const RoadNetwork& net, const std::vector<RouteSpec>& routes, const ParameterStore& store,
                               const PolicyConfig& policy, const EnvConfig& env, const EpisodePool& pool,
                               const TrainConfig& config, std::vector<WorkerState>& workers) {
  require(static_cast<int>(workers.size()) == config.workers, "one worker state per worker");
  const ParamSnapshot<float> snap = ParamSnapshot<float>::from(store);
  std::vector<std::vector<Transition>> parts(workers.size());
  if (workers.size() == 1) {
    parts[0] = run_worker(net, routes, snap, policy, env, pool, config.rollout_length, 1, workers[0]);
  } else {
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(workers.size());
    for (std::size_t w = 0; w < workers.size(); ++w)
      threads.emplace_back([&, w] {
        try {
          parts[w] = run_worker(net, routes, snap, policy, env, pool, config.rollout_length, config.workers, workers[w]);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : threads) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  RolloutBuffer buffer;
  for (auto& p : parts)
    for (auto& t : p) buffer.steps.push_back(std::move(t));
  return buffer;
}

namespace {

struct SampleStats {
  double ratio = 1.0;
  double surrogate = 0.0;
  double entropy = 0.0;
  double value_loss = 0.0;
  double log_prob = 0.0;
  bool clipped = false;
  bool min_ok = true;
  bool active = false;
};

template <class T>
double batch_loss(const ParamSnapshot<T>& snap, const PolicyConfig& policy, const std::vector<const Transition*>& batch,
                  const std::vector<double>& advantages, const TrainConfig& config, std::vector<Tensor<T>>* grads,
                  std::vector<SampleStats>* stats) {
  const T inv = T(1) / static_cast<T>(batch.size());
  double total = 0.0;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const Transition& tr = *batch[k];
    Graph<T> g(&snap, grads);
    SampleStats st;
    Var sq = g.squared_error(critic_forward(g, policy, tr.sample), static_cast<T>(tr.ret));
    st.value_loss = static_cast<double>(g.value(sq).data[0]);
    Var loss = g.scale(sq, T(config.value_coef));
    PolicyNodes<T> pn = policy_forward(g, policy, tr.sample);
    if (!pn.empty) {
      // Steps without activated AVs carry no policy or entropy term.
      st.active = true;
      const double adv = advantages[k];
      Var logp = g.pick_sum(pn.logp, tr.actions);
      Var sur = g.clipped_surrogate(logp, static_cast<T>(tr.log_prob), static_cast<T>(adv), static_cast<T>(config.clip));
      Var ent = g.entropy_sum(pn.logp, tr.sample.action_mask);
      loss = g.add(loss, g.add(g.scale(sur, T(-1)), g.scale(ent, static_cast<T>(-config.entropy_coef))));
      st.log_prob = static_cast<double>(g.value(logp).data[0]);
      st.ratio = std::exp(st.log_prob - tr.log_prob);
      st.surrogate = static_cast<double>(g.value(sur).data[0]);
      st.entropy = static_cast<double>(g.value(ent).data[0]);
      st.clipped = std::abs(st.ratio - 1.0) > config.clip;
      const double unclipped = st.ratio * adv;
      const double clipped = std::clamp(st.ratio, 1.0 - config.clip, 1.0 + config.clip) * adv;
      const double tol = 1e-6 * (1.0 + std::abs(unclipped));
      st.min_ok = st.surrogate <= unclipped + tol && st.surrogate <= clipped + tol;
    }
    Var scaled = g.scale(loss, inv);
    total += static_cast<double>(g.value(scaled).data[0]);
    if (grads) g.backward(scaled);
    if (stats) stats->push_back(st);
  }
  return total;
}

template <class T>
std::vector<Tensor<T>> zero_like(const ParamSnapshot<T>& snap) {
  std::vector<Tensor<T>> z;
  for (const auto& v : snap.values) z.emplace_back(v.rows, v.cols);
  return z;
}

template <class T>
UpdateMetrics update_impl(ParameterStore& store, const PolicyConfig& policy, RolloutBuffer& buffer, const TrainConfig& config,
                          double lr, Rng& rng) {
  UpdateMetrics m;
  const std::size_t n = buffer.steps.size();
  if (n == 0) return m;
  std::vector<double> adv(n);
  double mean = 0.0;
  for (std::size_t k = 0; k < n; ++k) mean += buffer.steps[k].advantage;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t k = 0; k < n; ++k) var += (buffer.steps[k].advantage - mean) * (buffer.steps[k].advantage - mean);
  const double sd = std::sqrt(var / static_cast<double>(n));
  for (std::size_t k = 0; k < n; ++k) adv[k] = (buffer.steps[k].advantage - mean) / (sd + 1e-8);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t minibatches = 0, active_samples = 0, clipped = 0;
  double kl = 0.0, pol = 0.0, val = 0.0, ent = 0.0, gnorm = 0.0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t k = n; k > 1; --k) std::swap(order[k - 1], order[rng.below(k)]);
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.minibatch)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(config.minibatch));
      std::vector<const Transition*> batch;
      std::vector<double> badv;
      for (std::size_t k = start; k < end; ++k) {
        batch.push_back(&buffer.steps[order[k]]);
        badv.push_back(adv[order[k]]);
      }
      const ParamSnapshot<T> snap = ParamSnapshot<T>::from(store);
      std::vector<Tensor<T>> grads = zero_like(snap);
      std::vector<SampleStats> stats;
      const double loss = batch_loss(snap, policy, batch, badv, config, &grads, &stats);
      if (!std::isfinite(loss)) throw TrainingError("non-finite PPO loss in minibatch " + std::to_string(minibatches));

      std::size_t mb_active = 0, mb_clipped = 0;
      double mb_sur = 0.0, mb_adv = 0.0, mb_err = 0.0;
      for (std::size_t k = 0; k < stats.size(); ++k) {
        const auto& st = stats[k];
        val += st.value_loss;
        if (!st.active) continue;
        ++mb_active;
        mb_clipped += st.clipped;
        mb_sur += st.surrogate;
        mb_adv += badv[k];
        mb_err = std::max(mb_err, std::abs(st.ratio - 1.0));
        m.min_property_violations += !st.min_ok;
        pol -= st.surrogate;
        ent += st.entropy;
        kl += (st.ratio - 1.0) - std::log(st.ratio);
      }
      if (minibatches == 0) {
        m.first_clip_fraction = mb_active ? static_cast<double>(mb_clipped) / static_cast<double>(mb_active) : 0.0;
        m.first_max_ratio_error = mb_err;
        m.first_surrogate = mb_active ? mb_sur / static_cast<double>(mb_active) : 0.0;
        m.first_advantage = mb_active ? mb_adv / static_cast<double>(mb_active) : 0.0;
      }
      active_samples += mb_active;
      clipped += mb_clipped;

      // Actor and critic are clipped separately; the critic's gradient is orders of magnitude larger.
      std::vector<Tensor<double>> g = store.zero_grads();
      double sq[2] = {0.0, 0.0};
      std::vector<int> group(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        group[i] = store.entries()[i].name.rfind("v.", 0) == 0 ? 1 : 0;
        for (std::size_t k = 0; k < g[i].size(); ++k) {
          g[i].data[k] = static_cast<double>(grads[i].data[k]);
          sq[group[i]] += g[i].data[k] * g[i].data[k];
        }
      }
      gnorm += std::sqrt(sq[0] + sq[1]);
      for (int c = 0; c < 2; ++c) {
        const double norm = std::sqrt(sq[c]);
        if (norm <= config.max_grad_norm) continue;
        for (std::size_t i = 0; i < g.size(); ++i)
          if (group[i] == c)
            for (auto& x : g[i].data) x *= config.max_grad_norm / norm;
      }
      store.adam_step(g, lr);
      ++minibatches;
    }
  }
  const double na = std::max<std::size_t>(active_samples, 1);
  m.policy_loss = pol / na;
  m.entropy = ent / na;
  m.approx_kl = kl / na;
  m.clip_fraction = static_cast<double>(clipped) / na;
  m.value_loss = val / static_cast<double>(n * static_cast<std::size_t>(config.epochs));
  m.grad_norm = gnorm / static_cast<double>(std::max<std::size_t>(minibatches, 1));
  return m;
}

}  // namespace

UpdateMetrics ppo_update(ParameterStore& store, const PolicyConfig& policy, RolloutBuffer& buffer, const TrainConfig& config,
                         double learning_rate, Rng& rng) {
  return config.float64 ? update_impl<double>(store, policy, buffer, config, learning_rate, rng)
                        : update_impl<float>(store, policy, buffer, config, learning_rate, rng);
}

double ppo_loss(const ParameterStore& store, const PolicyConfig& policy, const std::vector<const Transition*>& batch,
                const TrainConfig& config, std::vector<Tensor<double>>* grads) {
  const ParamSnapshot<double> snap = ParamSnapshot<double>::from(store);
  std::vector<double> adv;
  for (const auto* t : batch) adv.push_back(t->advantage);
  return batch_loss(snap, policy, batch, adv, config, grads, nullptr);
}

// ---------------------------------------------------------------------------------------------
// Runs

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  c.map = j.value("map", c.map);
  parse_map_name(c.map);
  if (j.contains("policy")) c.policy = policy_config_from_json(j.at("policy"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  c.penetration = j.value("penetration", c.penetration);
  if (c.penetration < 0.0 || c.penetration > 1.0) throw ConfigError("penetration must lie in [0, 1]");
  c.env.sensing_range = j.value("sensing_range", c.env.sensing_range);
  c.env.max_active = j.value("max_active", c.env.max_active);
  if (j.contains("reward")) {
    c.env.reward.eta_a = j.at("reward").value("eta_a", c.env.reward.eta_a);
    c.env.reward.eta_b = j.at("reward").value("eta_b", c.env.reward.eta_b);
  }
  c.pool.demands = j.value("demands", std::vector<double>{});
  if (c.pool.demands.empty()) throw ConfigError("run config needs at least one training demand level");
  c.pool.size = j.value("pool_size", c.pool.size);
  c.pool.seed = j.value("pool_seed", c.pool.seed);
  c.pool.generation.penetration = c.penetration;
  c.pool.generation.av_profile = parse_profile_set(j.value("av_profile", std::string("normal")));
  c.pool.generation.duration = j.value("duration", c.pool.generation.duration);
  c.pool.generation.variation = j.value("variation", c.pool.generation.variation);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.eval_episodes = j.value("eval_episodes", c.eval_episodes);
  c.eval_demand = j.value("eval_demand", *std::max_element(c.pool.demands.begin(), c.pool.demands.end()));
  c.eval_seed = j.value("eval_seed", c.eval_seed);
  if (c.checkpoint_every <= 0 || c.eval_every <= 0 || c.eval_episodes < 0) throw ConfigError("invalid run cadence");
  return c;
}

nlohmann::json run_config_to_json(const RunConfig& c) {
  return {{"map", c.map},
          {"policy", policy_config_to_json(c.policy)},
          {"train", train_config_to_json(c.train)},
          {"penetration", c.penetration},
          {"sensing_range", c.env.sensing_range},
          {"max_active", c.env.max_active},
          {"reward", {{"eta_a", c.env.reward.eta_a}, {"eta_b", c.env.reward.eta_b}}},
          {"demands", c.pool.demands},
          {"pool_size", c.pool.size},
          {"pool_seed", c.pool.seed},
          {"av_profile", std::string(to_string(c.pool.generation.av_profile))},
          {"duration", c.pool.generation.duration},
          {"variation", c.pool.generation.variation},
          {"out_dir", c.out_dir},
          {"checkpoint_every", c.checkpoint_every},
          {"eval_every", c.eval_every},
          {"eval_episodes", c.eval_episodes},
          {"eval_demand", c.eval_demand},
          {"eval_seed", c.eval_seed}};
}

namespace {

std::string policy_name(const RunConfig& c) {
  return std::string(to_string(c.policy.variant)) + "-" + std::to_string(static_cast<int>(std::lround(c.penetration * 100))) +
         "-" + std::to_string(static_cast<int>(std::lround(c.env.sensing_range)));
}

nlohmann::json checkpoint_meta(const RunConfig& c, std::int64_t update, std::int64_t steps,
                               const std::vector<WorkerState>& workers, const Rng& update_rng) {
  nlohmann::json ws = nlohmann::json::array();
  for (const auto& w : workers) ws.push_back({{"next_episode", w.next_episode}, {"rng", w.rng.state()}});
  return {{"name", policy_name(c)},
          {"map", c.map},
          {"policy", policy_config_to_json(c.policy)},
          {"penetration", c.penetration},
          {"sensing_range", c.env.sensing_range},
          {"max_active", c.env.max_active},
          {"av_profile", std::string(to_string(c.pool.generation.av_profile))},
          {"reward", {{"eta_a", c.env.reward.eta_a}, {"eta_b", c.env.reward.eta_b}}},
          {"update", update},
          {"steps", steps},
          {"workers", ws},
          {"update_rng", update_rng.state()}};
}

}  // namespace

void train(const RunConfig& c, bool resume, std::ostream* progress) {
  namespace fs = std::filesystem;
  fs::create_directories(c.out_dir);
  const RoadNetwork net = build_map(parse_map_name(c.map));
  const std::vector<RouteSpec> routes = routes_for(net);

  ParameterStore store;
  init_parameters(store, c.policy, c.train.seed);
  std::vector<WorkerState> workers;
  for (int w = 0; w < c.train.workers; ++w)
    workers.push_back({static_cast<std::uint64_t>(w), Rng(mix_seed(c.train.seed, 0x700ULL + static_cast<std::uint64_t>(w)))});
  Rng update_rng(mix_seed(c.train.seed, 0x5ULL));
  std::int64_t update = 0, steps = 0;

  const std::string latest = c.out_dir + "/latest.ckpt";
  if (resume && fs::exists(latest)) {
    const nlohmann::json meta = load_checkpoint(latest, store, true);
    update = meta.at("update").get<std::int64_t>();
    steps = meta.at("steps").get<std::int64_t>();
    const auto& ws = meta.at("workers");
    if (ws.size() != workers.size()) throw ConfigError("resumed run has a different worker count");
    for (std::size_t w = 0; w < workers.size(); ++w) {
      workers[w].next_episode = ws[w].at("next_episode").get<std::uint64_t>();
      workers[w].rng.restore(ws[w].at("rng").get<std::string>());
    }
    update_rng.restore(meta.at("update_rng").get<std::string>());
  } else {
    std::ofstream(c.out_dir + "/train_log.jsonl", std::ios::trunc);
  }
  {
    std::ofstream cfg(c.out_dir + "/config.resolved.json", std::ios::trunc);
    cfg << run_config_to_json(c).dump(2) << '\n';
  }

  std::ofstream log(c.out_dir + "/train_log.jsonl", std::ios::app);
  const auto t0 = std::chrono::steady_clock::now();
  auto save = [&](bool numbered) {
    const nlohmann::json meta = checkpoint_meta(c, update, steps, workers, update_rng);
    if (numbered) save_checkpoint(c.out_dir + "/ckpt_" + std::to_string(update) + ".ckpt", store, meta, true);
    save_checkpoint(latest, store, meta, true);
    nlohmann::json card = meta;
    card.erase("workers");
    card.erase("update_rng");
    std::ofstream(c.out_dir + "/policy_card.json", std::ios::trunc) << card.dump(2) << '\n';
  };

  while (steps < c.train.total_steps) {
    const double frac = c.train.lr_decay ? 1.0 - static_cast<double>(steps) / static_cast<double>(c.train.total_steps) : 1.0;
    const double lr = c.train.learning_rate * frac;
    RolloutBuffer buffer = collect_rollouts(net, routes, store, c.policy, c.env, c.pool, c.train, workers);
    compute_gae(buffer, c.train.gamma, c.train.lambda);
    double reward = 0.0;
    std::size_t active = 0;
    for (const auto& t : buffer.steps) {
      reward += t.reward;
      active += t.actions.size();
    }
    const UpdateMetrics m = ppo_update(store, c.policy, buffer, c.train, lr, update_rng);
    steps += static_cast<std::int64_t>(buffer.steps.size());
    ++update;

    nlohmann::json rec = {{"update", update},
                          {"steps", steps},
                          {"lr", lr},
                          {"mean_reward", reward / static_cast<double>(buffer.steps.size())},
                          {"mean_active", static_cast<double>(active) / static_cast<double>(buffer.steps.size())},
                          {"policy_loss", m.policy_loss},
                          {"value_loss", m.value_loss},
                          {"entropy", m.entropy},
                          {"approx_kl", m.approx_kl},
                          {"clip_fraction", m.clip_fraction},
                          {"first_clip_fraction", m.first_clip_fraction},
                          {"first_max_ratio_error", m.first_max_ratio_error},
                          {"min_property_violations", m.min_property_violations},
                          {"grad_norm", m.grad_norm}};
    if (c.eval_episodes > 0 && (update % c.eval_every == 0 || steps >= c.train.total_steps)) {
      const ParamSnapshot<float> snap = ParamSnapshot<float>::from(store);
      GenerationConfig g = c.pool.generation;
      g.demand_vph = c.eval_demand;
      double tp = 0.0;
      for (int e = 0; e < c.eval_episodes; ++e) {
        const EpisodeSpec spec = generate_episode(net, routes, g, c.eval_seed + static_cast<std::uint64_t>(e));
        tp += episode_throughput(run_policy(net, routes, spec, snap, c.policy, c.env, ActMode::greedy, 0));
      }
      rec["eval_throughput"] = tp / c.eval_episodes;
    }
    rec["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << rec.dump() << '\n';
    log.flush();
    if (progress) *progress << rec.dump() << std::endl;
    if (update % c.checkpoint_every == 0) save(true);
  }
  save(true);
}

}  // namespace coopdrive
