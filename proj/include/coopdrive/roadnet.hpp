#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "coopdrive/geometry.hpp"

namespace coopdrive {

enum class MapName { onramp, threeway, fourway, lanedrop };

MapName parse_map_name(std::string_view name);
std::string_view to_string(MapName map);

enum class Turn { straight, left, right };
std::string_view to_string(Turn turn);

enum class YieldRule { priority, zipper };

struct Lane {
  int id = 0;
  int edge = 0;
  int index_in_edge = 0;  // 0 is the rightmost lane
  double length = 0.0;
  double speed_limit = 0.0;
  std::vector<int> successors;
  std::vector<int> predecessors;
  std::optional<int> left;
  std::optional<int> right;
  int priority_rank = 0;  // lower yields
  Polyline shape;
};

/// A group of parallel lanes travelled as one unit by routes.
struct Edge {
  int id = 0;
  std::string name;
  std::string group;  // freeway, ramp, main, side, connector, drop
  std::vector<int> lanes;  // right to left
  std::optional<Turn> turn;  // set on junction connectors
  int junction = -1;         // junction the edge belongs to, -1 if none
};

struct Source {
  int id = 0;
  int lane = 0;
  Vec2 entry;
};

struct LaneInterval {
  int lane = 0;
  double begin = 0.0;
  double end = 0.0;
};

/// Lane intervals that may not be occupied by vehicles from different members at once.
struct ConflictZone {
  int id = 0;
  int junction = 0;
  std::vector<LaneInterval> members;
  YieldRule rule = YieldRule::priority;
};

struct Rect {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
  bool contains(Vec2 p) const { return p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1; }
};

/// Region whose AVs are handed to the learned policy, plus the point they are ranked against.
struct BottleneckZone {
  Rect region;
  Vec2 anchor;
};

struct RouteSpec {
  int id = 0;
  std::vector<int> edges;
  std::vector<Turn> turns;  // one per edge transition
  std::string group;        // group of the entry edge (freeway, ramp, main, side, drop)
};

/// Lengths and speeds of the parametric maps. Defaults are the shipped geometry.
struct MapGeometry {
  double lane_width = 3.5;

  double freeway_upstream = 150.0;
  double acceleration_lane = 150.0;
  double freeway_downstream = 100.0;
  double ramp_length = 150.0;
  double freeway_speed = 27.78;
  double ramp_speed = 22.22;

  double approach_length = 200.0;
  double junction_half_size = 8.0;
  double intersection_speed = 13.89;

  double drop_four_lanes = 250.0;
  double drop_two_lanes = 150.0;
  double drop_one_lane = 200.0;
  double lanedrop_speed = 25.0;
};

class RoadNetwork {
 public:
  MapName map = MapName::onramp;
  std::vector<Lane> lanes;
  std::vector<Edge> edges;
  std::vector<Source> sources;
  std::vector<int> sinks;  // lane ids
  std::vector<ConflictZone> zones;
  BottleneckZone bottleneck;
  double width = 0.0;
  double height = 0.0;

  const Lane& lane(int id) const { return lanes.at(static_cast<std::size_t>(id)); }
  const Edge& edge(int id) const { return edges.at(static_cast<std::size_t>(id)); }

  bool is_sink(int lane_id) const;

  /// The successor of `lane_id` that lies on edge `next_edge`, if the lanes connect.
  std::optional<int> successor_on(int lane_id, int next_edge) const;

  /// Number of vehicles the map can physically hold at jam density.
  int jam_capacity(double vehicle_length, double min_gap) const;

  /// Throws ContractViolation when a structural invariant is broken.
  void validate() const;
};

RoadNetwork build_map(MapName map, const MapGeometry& geometry = {});

/// Every source-to-sink route, sorted by source id then sink lane id.
std::vector<RouteSpec> routes_for(const RoadNetwork& network);

constexpr int kMapSchemaVersion = 1;

nlohmann::json map_to_json(const RoadNetwork& network, const std::vector<RouteSpec>& routes);

}  // namespace coopdrive
