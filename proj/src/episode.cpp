#include "coopdrive/episode.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "coopdrive/errors.hpp"

namespace coopdrive {

std::string_view to_string(Category c) { return c == Category::av ? "AV" : "HV"; }

std::string_view to_string(ProfileSet p) { return p == ProfileSet::conservative ? "conservative" : "normal"; }

ProfileSet parse_profile_set(std::string_view s) {
  if (s == "normal") return ProfileSet::normal;
  if (s == "conservative") return ProfileSet::conservative;
  throw ConfigError("unknown AV profile set '" + std::string(s) + "'");
}

namespace {

double base_share(MapName map, const std::string& group, int n_main, int n_side) {
  switch (map) {
    case MapName::onramp: return group == "ramp" ? 0.25 : 0.75;
    case MapName::threeway:
    case MapName::fourway: return group == "main" ? 0.65 / n_main : 0.35 / n_side;
    case MapName::lanedrop: return 1.0;
  }
  return 1.0;
}

}  // namespace

EpisodeSpec generate_episode(const RoadNetwork& network, const std::vector<RouteSpec>& routes,
                             const GenerationConfig& config, std::uint64_t seed) {
  if (routes.empty()) throw ConfigError("episode generation needs at least one route");
  if (!(config.duration > 0.0)) throw ConfigError("episode duration must be positive");
  if (config.penetration < 0.0 || config.penetration > 1.0) throw ConfigError("penetration must lie in [0, 1]");
  if (config.demand_vph < 0.0) throw ConfigError("demand must be non-negative");
  if (config.variation < 0.0 || config.variation >= 1.0) throw ConfigError("variation must lie in [0, 1)");
  if (!(config.resample_period > 0.0)) throw ConfigError("resample period must be positive");
  if (config.route_demand_range &&
      (config.route_demand_range->first < 0.0 || config.route_demand_range->second < config.route_demand_range->first))
    throw ConfigError("route demand range must satisfy 0 <= lo <= hi");

  EpisodeSpec spec;
  spec.map = network.map;
  spec.duration = config.duration;
  spec.seed = seed;
  spec.nominal_demand_vph = config.demand_vph;
  spec.penetration = config.penetration;
  spec.av_profile = config.av_profile;

  Rng rng(mix_seed(seed, 0x5eedULL));

  // Entry edges in route order.
  std::vector<int> entries;
  for (const auto& r : routes)
    if (std::find(entries.begin(), entries.end(), r.edges.front()) == entries.end()) entries.push_back(r.edges.front());
  int n_main = 0, n_side = 0;
  for (int e : entries) (network.edge(e).group == "main" ? n_main : n_side) += 1;

  std::vector<double> share(entries.size());
  double total = 0.0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    share[i] = base_share(network.map, network.edge(entries[i]).group, std::max(n_main, 1), std::max(n_side, 1)) *
               rng.uniform(0.7, 1.3);
    total += share[i];
  }
  for (auto& s : share) s /= total;

  // Turning probabilities per entry edge; movement = turn taken at the junction (straight if none).
  std::vector<double> route_fraction(routes.size(), 0.0);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    std::vector<std::size_t> members;
    for (std::size_t r = 0; r < routes.size(); ++r)
      if (routes[r].edges.front() == entries[i]) members.push_back(r);
    auto movement = [&](std::size_t r) -> Turn {
      for (std::size_t k = 1; k < routes[r].edges.size(); ++k)
        if (auto t = network.edge(routes[r].edges[k]).turn) return *t;
      return Turn::straight;
    };
    std::vector<double> w(members.size());
    double straight_mass = 0.0;
    bool has_straight = false;
    for (std::size_t k = 0; k < members.size(); ++k)
      if (movement(members[k]) == Turn::straight) has_straight = true;
    if (has_straight && members.size() > 1) straight_mass = rng.uniform(0.5, 0.8);
    double other_total = 0.0;
    std::vector<double> other(members.size(), 0.0);
    for (std::size_t k = 0; k < members.size(); ++k) {
      if (has_straight && members.size() > 1 && movement(members[k]) == Turn::straight) continue;
      other[k] = rng.uniform(0.5, 1.5);
      other_total += other[k];
    }
    auto& table = spec.turn_rates[network.edge(entries[i]).name];
    for (std::size_t k = 0; k < members.size(); ++k) {
      double p;
      if (members.size() == 1) p = 1.0;
      else if (has_straight && movement(members[k]) == Turn::straight) p = straight_mass;
      else p = (1.0 - straight_mass) * other[k] / other_total;
      w[k] = p;
      table[std::string(to_string(movement(members[k])))] += p;
      route_fraction[members[k]] = share[i] * p;
    }
  }

  const int periods = static_cast<int>(std::ceil(config.duration / config.resample_period - 1e-9));
  for (std::size_t r = 0; r < routes.size(); ++r) {
    RouteDemand d;
    d.route = routes[r].id;
    for (int k = 0; k < periods; ++k) {
      DemandSegment seg;
      seg.begin = k * config.resample_period;
      seg.end = std::min(config.duration, (k + 1) * config.resample_period);
      if (config.route_demand_range) {
        seg.rate_vph = rng.uniform(config.route_demand_range->first, config.route_demand_range->second);
        if (config.route_demand_range->first == config.route_demand_range->second)
          seg.rate_vph = config.route_demand_range->first;
      } else {
        seg.rate_vph = config.demand_vph * route_fraction[r] * rng.uniform(1.0 - config.variation, 1.0 + config.variation);
      }
      d.segments.push_back(seg);
    }
    spec.demand.push_back(std::move(d));
  }
  return spec;
}

std::vector<ScheduledVehicle> expand_arrivals(const EpisodeSpec& spec) {
  std::vector<ScheduledVehicle> all;
  for (const auto& rd : spec.demand) {
    double peak = 0.0;
    for (const auto& s : rd.segments) peak = std::max(peak, s.rate_vph);
    if (peak <= 0.0) continue;
    const double peak_rate = peak / 3600.0;
    Rng rng(mix_seed(spec.seed, 0xa11ULL + static_cast<std::uint64_t>(rd.route)));
    double t = 0.0;
    std::size_t seg = 0;
    while (true) {
      t += rng.exponential(peak_rate);
      if (t >= spec.duration) break;
      while (seg + 1 < rd.segments.size() && t >= rd.segments[seg].end) ++seg;
      const double rate = (t >= rd.segments[seg].begin && t < rd.segments[seg].end) ? rd.segments[seg].rate_vph : 0.0;
      if (rng.uniform() * peak < rate) all.push_back({0, rd.route, t, Category::hv});
    }
  }
  std::sort(all.begin(), all.end(), [](const ScheduledVehicle& a, const ScheduledVehicle& b) {
    if (a.time != b.time) return a.time < b.time;
    return a.route < b.route;
  });
  Rng tag(mix_seed(spec.seed, 0xca7ULL));
  for (std::size_t i = 0; i < all.size(); ++i) {
    all[i].id = static_cast<int>(i);
    all[i].category = tag.uniform() < spec.penetration ? Category::av : Category::hv;
  }
  return all;
}

nlohmann::json episode_to_json(const EpisodeSpec& spec) {
  using nlohmann::json;
  json demand = json::array();
  for (const auto& rd : spec.demand) {
    json segs = json::array();
    for (const auto& s : rd.segments) segs.push_back({s.begin, s.end, s.rate_vph});
    demand.push_back({{"route", rd.route}, {"segments", segs}});
  }
  return {{"schema_version", kEpisodeSchemaVersion},
          {"map", std::string(to_string(spec.map))},
          {"duration", spec.duration},
          {"seed", spec.seed},
          {"nominal_demand_vph", spec.nominal_demand_vph},
          {"penetration", spec.penetration},
          {"av_profile", std::string(to_string(spec.av_profile))},
          {"turn_rates", spec.turn_rates},
          {"demand", demand}};
}

EpisodeSpec episode_from_json(const nlohmann::json& j) {
  if (j.value("schema_version", 0) != kEpisodeSchemaVersion) throw ConfigError("unsupported episode schema version");
  EpisodeSpec spec;
  spec.map = parse_map_name(j.at("map").get<std::string>());
  spec.duration = j.at("duration").get<double>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  spec.nominal_demand_vph = j.at("nominal_demand_vph").get<double>();
  spec.penetration = j.at("penetration").get<double>();
  spec.av_profile = parse_profile_set(j.at("av_profile").get<std::string>());
  spec.turn_rates = j.at("turn_rates").get<std::map<std::string, std::map<std::string, double>>>();
  for (const auto& rd : j.at("demand")) {
    RouteDemand d;
    d.route = rd.at("route").get<int>();
    for (const auto& s : rd.at("segments")) d.segments.push_back({s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()});
    spec.demand.push_back(std::move(d));
  }
  if (!(spec.duration > 0.0) || spec.penetration < 0.0 || spec.penetration > 1.0)
    throw ConfigError("episode file violates duration/penetration bounds");
  return spec;
}

}  // namespace coopdrive
