#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "coopdrive/roadnet.hpp"
#include "coopdrive/rng.hpp"

namespace coopdrive {

enum class Category { hv, av };
std::string_view to_string(Category c);

/// Which driver parameterization AVs receive. HVs always use the default profile.
enum class ProfileSet { normal, conservative };
std::string_view to_string(ProfileSet p);
ProfileSet parse_profile_set(std::string_view s);

struct DemandSegment {
  double begin = 0.0;
  double end = 0.0;
  double rate_vph = 0.0;
};

struct RouteDemand {
  int route = 0;
  std::vector<DemandSegment> segments;
};

/// Deterministic description of one traffic episode.
struct EpisodeSpec {
  MapName map = MapName::onramp;
  double duration = 1200.0;
  std::uint64_t seed = 0;
  double nominal_demand_vph = 0.0;
  double penetration = 0.0;
  ProfileSet av_profile = ProfileSet::normal;
  std::vector<RouteDemand> demand;
  /// Sampled turning probabilities keyed by entry edge name then movement.
  std::map<std::string, std::map<std::string, double>> turn_rates;
};

struct GenerationConfig {
  double demand_vph = 2000.0;  // nominal total input
  double variation = 0.5;      // per-period multiplicative jitter half-width, in [0, 1)
  double resample_period = 120.0;
  /// When set, each route's rate is drawn from this range every period instead.
  std::optional<std::pair<double, double>> route_demand_range;
  double penetration = 0.0;
  ProfileSet av_profile = ProfileSet::normal;
  double duration = 1200.0;
};

EpisodeSpec generate_episode(const RoadNetwork& network, const std::vector<RouteSpec>& routes,
                             const GenerationConfig& config, std::uint64_t seed);

struct ScheduledVehicle {
  int id = 0;
  int route = 0;
  double time = 0.0;
  Category category = Category::hv;
};

/// Arrivals of the episode by Poisson thinning of the demand schedule, sorted by time.
std::vector<ScheduledVehicle> expand_arrivals(const EpisodeSpec& spec);

constexpr int kEpisodeSchemaVersion = 1;

nlohmann::json episode_to_json(const EpisodeSpec& spec);
EpisodeSpec episode_from_json(const nlohmann::json& j);

}  // namespace coopdrive
