#include "coopdrive/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include <boost/math/distributions/students_t.hpp>

#include "coopdrive/errors.hpp"

namespace coopdrive {

double alinea_update(double rate, double occupancy, const AlineaConfig& c) {
  return std::clamp(rate + c.gain * (c.target_occupancy - occupancy), c.min_rate, c.max_rate);
}

LoadedPolicy load_policy(const std::string& path) {
  LoadedPolicy p;
  const nlohmann::json meta = read_checkpoint_meta(path).at("meta");
  if (!meta.contains("policy")) throw ConfigError("checkpoint '" + path + "' carries no policy configuration");
  p.config = policy_config_from_json(meta.at("policy"));
  init_parameters(p.store, p.config, 0);
  p.card = load_checkpoint(path, p.store, false);
  p.snapshot = ParamSnapshot<float>::from(p.store);
  return p;
}

EnvConfig env_config_from_card(const nlohmann::json& card) {
  EnvConfig e;
  e.sensing_range = card.value("sensing_range", e.sensing_range);
  e.max_active = card.value("max_active", e.max_active);
  if (card.contains("reward")) {
    e.reward.eta_a = card.at("reward").value("eta_a", e.reward.eta_a);
    e.reward.eta_b = card.at("reward").value("eta_b", e.reward.eta_b);
  }
  return e;
}

std::vector<double> demand_levels(MapName map) {
  switch (map) {
    case MapName::onramp: return {3000, 3500, 4000, 4500};
    case MapName::lanedrop: return {1500, 2000, 2500, 3000};
    case MapName::threeway:
    case MapName::fourway: return {1000, 1500, 2000, 2500};
  }
  return {};
}

namespace {

EpisodeOutcome finish(const Simulation& sim) {
  EpisodeOutcome o;
  o.spec = sim.spec();
  o.arrivals = sim.arrivals();
  o.releases = sim.releases();
  std::set<int> seen;
  for (const auto& [id, v] : sim.vehicles()) {
    o.on_map.push_back(id);
    seen.insert(id);
  }
  for (const auto& r : o.releases) seen.insert(r.id);
  for (const auto& a : o.arrivals)
    if (seen.count(a.id) == 0) o.never_entered.push_back(a.id);
  return o;
}

int edge_by_name(const RoadNetwork& net, const std::string& name) {
  for (const auto& e : net.edges)
    if (e.name == name) return e.id;
  throw ConfigError("map has no edge named '" + name + "'");
}

}  // namespace

EpisodeOutcome run_nc(const RoadNetwork& net, const std::vector<RouteSpec>& routes, const EpisodeSpec& spec,
                      const SimConfig& sim_config) {
  Simulation sim(net, routes, spec, sim_config);
  while (!sim.done()) sim.step();
  return finish(sim);
}

EpisodeOutcome run_alinea(const RoadNetwork& net, const std::vector<RouteSpec>& routes, const EpisodeSpec& spec,
                          const AlineaConfig& alinea, const SimConfig& sim_config, std::vector<double>* rate_trace) {
  if (net.map != MapName::lanedrop) throw ConfigError("ALINEA is only configured for the lanedrop map");
  if (!(alinea.period > 0.0) || alinea.min_rate > alinea.max_rate) throw ConfigError("invalid ALINEA configuration");
  const int edge = edge_by_name(net, alinea.edge);
  Simulation sim(net, routes, spec, sim_config);
  double rate = std::clamp(alinea.initial_rate, alinea.min_rate, alinea.max_rate);
  sim.enable_meter({rate, 1.0});
  const auto steps_per_period = static_cast<std::int64_t>(std::llround(alinea.period / sim_config.sim_step));
  double occupancy_sum = 0.0;
  std::int64_t samples = 0;
  while (!sim.done()) {
    sim.step();
    occupancy_sum += sim.occupancy_percent(edge);
    ++samples;
    if (samples == steps_per_period) {
      rate = alinea_update(rate, occupancy_sum / static_cast<double>(samples), alinea);
      sim.set_meter_rate(rate);
      if (rate_trace) rate_trace->push_back(rate);
      occupancy_sum = 0.0;
      samples = 0;
    }
  }
  return finish(sim);
}

EpisodeOutcome run_policy(const RoadNetwork& net, const std::vector<RouteSpec>& routes, const EpisodeSpec& spec,
                          const ParamSnapshot<float>& params, const PolicyConfig& policy, const EnvConfig& env_config,
                          ActMode mode, std::uint64_t seed, std::vector<std::vector<int>>* action_log) {
  DrivingEnv env(net, routes, env_config);
  env.reset(spec);
  Rng rng(mix_seed(seed, spec.seed));
  std::vector<double> rewards;
  while (!env.done()) {
    const ActResult r = act(params, policy, compact(env.state(), env.observation()), rng, mode);
    if (action_log) action_log->push_back(r.actions);
    rewards.push_back(env.step(r.actions));
  }
  EpisodeOutcome o = finish(env.sim());
  o.rewards = std::move(rewards);
  return o;
}

EpisodeOutcome replay_actions(const RoadNetwork& net, const std::vector<RouteSpec>& routes, const EpisodeSpec& spec,
                              const EnvConfig& env_config, const std::vector<std::vector<int>>& actions,
                              std::ostream* trajectory) {
  DrivingEnv env(net, routes, env_config);
  env.reset(spec);
  env.sim().set_trajectory_stream(trajectory);
  std::vector<double> rewards;
  std::size_t k = 0;
  while (!env.done()) {
    const std::vector<int> none;
    const std::vector<int>& a = k < actions.size() ? actions[k] : none;
    if (a.size() != env.activated().size())
      throw ConfigError("action log step " + std::to_string(k) + " does not match the activated AVs");
    rewards.push_back(env.step(a));
    ++k;
  }
  EpisodeOutcome o = finish(env.sim());
  o.rewards = std::move(rewards);
  return o;
}

double quantile(std::vector<double> values, double p) {
  require(!values.empty(), "quantile of an empty sample");
  require(p >= 0.0 && p <= 1.0, "quantile level must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  const double h = std::clamp(n * p + 0.5, 1.0, n);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const double frac = h - static_cast<double>(lo);
  if (lo >= values.size()) return values.back();
  return values[lo - 1] + frac * (values[lo] - values[lo - 1]);
}

double episode_throughput(const EpisodeOutcome& o) {
  require(!o.arrivals.empty(), "throughput is undefined without scheduled vehicles");
  return 100.0 * static_cast<double>(o.releases.size()) / static_cast<double>(o.arrivals.size());
}

std::vector<double> waiting_times(const EpisodeOutcome& o) {
  std::set<int> released;
  for (const auto& r : o.releases) released.insert(r.id);
  std::vector<double> w;
  for (const auto& a : o.arrivals)
    if (released.count(a.id) == 0) w.push_back(o.spec.duration - a.time);
  return w;
}

EvalReport compute_metrics(const std::vector<EpisodeOutcome>& outcomes, const std::vector<RouteSpec>& routes,
                           const std::string& controller) {
  EvalReport r;
  r.controller = controller;
  if (!outcomes.empty()) {
    r.map = std::string(to_string(outcomes.front().spec.map));
    r.demand = outcomes.front().spec.nominal_demand_vph;
    r.penetration = outcomes.front().spec.penetration;
  }
  auto group_of = [&](int route, Category c) {
    return routes.at(static_cast<std::size_t>(route)).group + "-" + std::string(to_string(c));
  };
  std::map<std::string, std::vector<double>> travel, ratio;
  double wait_sum = 0.0;
  std::size_t wait_n = 0;
  for (const auto& o : outcomes) {
    r.seeds.push_back(o.spec.seed);
    if (!o.arrivals.empty()) r.episode_throughput.push_back(episode_throughput(o));
    const auto w = waiting_times(o);
    r.episode_wait.push_back(w.empty() ? 0.0 : std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size()));
    wait_sum += std::accumulate(w.begin(), w.end(), 0.0);
    wait_n += w.size();

    std::map<std::string, std::pair<std::size_t, std::size_t>> counts;  // released, scheduled
    for (const auto& a : o.arrivals) counts[group_of(a.route, a.category)].second += 1;
    for (const auto& rel : o.releases) {
      const std::string g = group_of(rel.route, rel.category);
      counts[g].first += 1;
      travel[g].push_back(rel.travel_time);
    }
    for (const auto& [g, c] : counts) {
      r.groups[g].released += c.first;
      r.groups[g].scheduled += c.second;
      if (c.second > 0) ratio[g].push_back(100.0 * static_cast<double>(c.first) / static_cast<double>(c.second));
    }
  }
  if (!r.episode_throughput.empty())
    r.throughput = std::accumulate(r.episode_throughput.begin(), r.episode_throughput.end(), 0.0) /
                   static_cast<double>(r.episode_throughput.size());
  r.mean_wait = wait_n == 0 ? 0.0 : wait_sum / static_cast<double>(wait_n);
  for (auto& [g, s] : r.groups) {
    const auto& q = ratio[g];
    if (!q.empty()) s.throughput = std::accumulate(q.begin(), q.end(), 0.0) / static_cast<double>(q.size());
    const auto& t = travel[g];
    if (!t.empty()) {
      s.q25 = quantile(t, 0.25);
      s.median = quantile(t, 0.5);
      s.q75 = quantile(t, 0.75);
    }
  }
  return r;
}

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& [g, s] : r.groups)
    groups[g] = {{"throughput", s.throughput}, {"q25", s.q25},           {"median", s.median},
                 {"q75", s.q75},               {"released", s.released}, {"scheduled", s.scheduled}};
  return {{"map", r.map},
          {"demand", r.demand},
          {"controller", r.controller},
          {"penetration", r.penetration},
          {"throughput", r.throughput ? nlohmann::json(*r.throughput) : nlohmann::json(nullptr)},
          {"mean_wait", r.mean_wait},
          {"episode_throughput", r.episode_throughput},
          {"episode_wait", r.episode_wait},
          {"seeds", r.seeds},
          {"groups", groups}};
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.map = j.at("map").get<std::string>();
  r.demand = j.at("demand").get<double>();
  r.controller = j.at("controller").get<std::string>();
  r.penetration = j.at("penetration").get<double>();
  if (!j.at("throughput").is_null()) r.throughput = j.at("throughput").get<double>();
  r.mean_wait = j.at("mean_wait").get<double>();
  r.episode_throughput = j.at("episode_throughput").get<std::vector<double>>();
  r.episode_wait = j.at("episode_wait").get<std::vector<double>>();
  r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  for (const auto& [g, s] : j.at("groups").items())
    r.groups[g] = {s.at("throughput").get<double>(), s.at("q25").get<double>(),        s.at("median").get<double>(),
                   s.at("q75").get<double>(),        s.at("released").get<std::size_t>(), s.at("scheduled").get<std::size_t>()};
  return r;
}

PairedDifference paired_difference(const std::vector<double>& a, const std::vector<double>& b, double confidence) {
  require(a.size() == b.size() && a.size() >= 2, "paired comparison needs two equal samples of size >= 2");
  PairedDifference d;
  d.n = a.size();
  std::vector<double> diff(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - b[i];
  const double n = static_cast<double>(d.n);
  d.mean = std::accumulate(diff.begin(), diff.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : diff) ss += (x - d.mean) * (x - d.mean);
  const double se = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  boost::math::students_t dist(n - 1.0);
  const double t = boost::math::quantile(boost::math::complement(dist, (1.0 - confidence) / 2.0));
  d.lower = d.mean - t * se;
  d.upper = d.mean + t * se;
  return d;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> rank(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 2, "rank correlation needs two equal samples of size >= 2");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

namespace {

std::string fmt(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string demand_label(double d) { return fmt(d, 0); }

}  // namespace

void emit_tables(const std::vector<EvalReport>& reports, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::map<std::string, std::vector<const EvalReport*>> by_map;
  for (const auto& r : reports) by_map[r.map].push_back(&r);
  for (const auto& [map, rows] : by_map) {
    std::set<double> demands;
    std::vector<std::string> controllers;
    for (const auto* r : rows) {
      demands.insert(r->demand);
      if (std::find(controllers.begin(), controllers.end(), r->controller) == controllers.end())
        controllers.push_back(r->controller);
    }
    std::sort(controllers.begin(), controllers.end());
    auto cell = [&](const std::string& c, double d) -> const EvalReport* {
      for (const auto* r : rows)
        if (r->controller == c && r->demand == d) return r;
      return nullptr;
    };
    std::ofstream tp(dir + "/throughput_" + map + ".csv", std::ios::trunc);
    std::ofstream tw(dir + "/twait_" + map + ".csv", std::ios::trunc);
    tp << "controller";
    tw << "controller";
    for (double d : demands) {
      tp << ',' << demand_label(d);
      tw << ',' << demand_label(d);
    }
    tp << '\n';
    tw << '\n';
    for (const auto& c : controllers) {
      tp << c;
      tw << c;
      for (double d : demands) {
        const EvalReport* r = cell(c, d);
        tp << ',' << ((r && r->throughput) ? fmt(*r->throughput, 1) : "-");
        tw << ',' << (r ? fmt(r->mean_wait, 1) : "-");
      }
      tp << '\n';
      tw << '\n';
    }
    std::ofstream gp(dir + "/groups_" + map + ".csv", std::ios::trunc);
    gp << "controller,penetration,demand,group,throughput,q25,median,q75,released,scheduled\n";
    for (const auto& c : controllers)
      for (double d : demands)
        if (const EvalReport* r = cell(c, d))
          for (const auto& [g, s] : r->groups)
            gp << c << ',' << fmt(r->penetration, 2) << ',' << demand_label(d) << ',' << g << ',' << fmt(s.throughput, 2)
               << ',' << fmt(s.q25, 2) << ',' << fmt(s.median, 2) << ',' << fmt(s.q75, 2) << ',' << s.released << ','
               << s.scheduled << '\n';
  }
}

}  // namespace coopdrive
