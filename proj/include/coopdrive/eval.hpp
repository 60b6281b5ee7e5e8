#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "coopdrive/mdp.hpp"
#include "coopdrive/policy.hpp"

namespace coopdrive {

/// Everything the metrics need from one simulated episode.
struct EpisodeOutcome {
  EpisodeSpec spec;
  std::vector<ScheduledVehicle> arrivals;
  std::vector<ReleaseRecord> releases;
  std::vector<int> on_map;         // ids still driving at the end
  std::vector<int> never_entered;  // ids still queued at the end
  std::vector<double> rewards;     // per decision step
};

struct AlineaConfig {
  double gain = 70.0;            // veh/h per occupancy percent
  double target_occupancy = 14.0;
  double period = 30.0;
  double min_rate = 200.0;
  double max_rate = 4000.0;
  double initial_rate = 4000.0;
  std::string edge = "one_lane";  // measured segment
};

/// rate + gain * (target - occupancy), clamped.
double alinea_update(double rate, double occupancy, const AlineaConfig& config);

/// Policy weights with the settings they were trained for.
struct LoadedPolicy {
  PolicyConfig config;
  ParameterStore store;
  ParamSnapshot<float> snapshot;  // points at `store`; copies and moves re-point it
  nlohmann::json card;

  LoadedPolicy() = default;
  LoadedPolicy(const LoadedPolicy& o) : config(o.config), store(o.store), snapshot(o.snapshot), card(o.card) {
    snapshot.store = &store;
  }
  LoadedPolicy(LoadedPolicy&& o) noexcept
      : config(o.config), store(std::move(o.store)), snapshot(std::move(o.snapshot)), card(std::move(o.card)) {
    snapshot.store = &store;
  }
  LoadedPolicy& operator=(LoadedPolicy o) noexcept {
    config = o.config;
    store = std::move(o.store);
    snapshot = std::move(o.snapshot);
    card = std::move(o.card);
    snapshot.store = &store;
    return *this;
  }
};
LoadedPolicy load_policy(const std::string& checkpoint_path);
/// Sensing range, activation limit and reward weights recorded with a checkpoint.
EnvConfig env_config_from_card(const nlohmann::json& card);

/// The four evaluated demand levels of each map, veh/h.
std::vector<double> demand_levels(MapName map);

EpisodeOutcome run_nc(const RoadNetwork& net, const std::vector<RouteSpec>& routes, const EpisodeSpec& spec,
                      const SimConfig& sim = {});
EpisodeOutcome run_alinea(const RoadNetwork& net, const std::vector<RouteSpec>& routes, const EpisodeSpec& spec,
                          const AlineaConfig& alinea, const SimConfig& sim = {}, std::vector<double>* rate_trace = nullptr);
/// Runs the policy every decision step. `action_log`, when given, receives the joint action of each step.
EpisodeOutcome run_policy(const RoadNetwork& net, const std::vector<RouteSpec>& routes, const EpisodeSpec& spec,
                          const ParamSnapshot<float>& params, const PolicyConfig& policy, const EnvConfig& env,
                          ActMode mode, std::uint64_t seed, std::vector<std::vector<int>>* action_log = nullptr);
/// Replays a recorded action stream (one joint action per decision step) through the environment.
EpisodeOutcome replay_actions(const RoadNetwork& net, const std::vector<RouteSpec>& routes, const EpisodeSpec& spec,
                              const EnvConfig& env, const std::vector<std::vector<int>>& actions,
                              std::ostream* trajectory = nullptr);

/// Quantile by linear interpolation between order statistics at positions n*p + 0.5 (Hazen).
double quantile(std::vector<double> values, double p);

struct GroupStats {
  double throughput = 0.0;  // percent, mean over episodes with scheduled vehicles in the group
  double q25 = 0.0, median = 0.0, q75 = 0.0;
  std::size_t released = 0;
  std::size_t scheduled = 0;
};

struct EvalReport {
  std::string map;
  double demand = 0.0;
  std::string controller;
  double penetration = 0.0;
  std::optional<double> throughput;  // absent when nothing was scheduled
  double mean_wait = 0.0;            // over never-released vehicles of the pool, 0 for an empty set
  std::vector<double> episode_throughput;
  std::vector<double> episode_wait;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, GroupStats> groups;
};

/// Throughput is released over scheduled; T_wait of an unreleased vehicle is duration minus its scheduled time.
double episode_throughput(const EpisodeOutcome& o);
std::vector<double> waiting_times(const EpisodeOutcome& o);
EvalReport compute_metrics(const std::vector<EpisodeOutcome>& outcomes, const std::vector<RouteSpec>& routes,
                           const std::string& controller);

nlohmann::json report_to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);

struct PairedDifference {
  double mean = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  std::size_t n = 0;
};
/// Mean of a[i] - b[i] with a Student-t confidence interval.
PairedDifference paired_difference(const std::vector<double>& a, const std::vector<double>& b, double confidence = 0.95);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

/// Writes throughput_<map>.csv, twait_<map>.csv and groups_<map>.csv under `dir`.
void emit_tables(const std::vector<EvalReport>& reports, const std::string& dir);

}  // namespace coopdrive
