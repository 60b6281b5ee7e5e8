#include "coopdrive/roadnet.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>

#include "coopdrive/errors.hpp"

namespace coopdrive {

MapName parse_map_name(std::string_view name) {
  if (name == "onramp") return MapName::onramp;
  if (name == "threeway") return MapName::threeway;
  if (name == "fourway") return MapName::fourway;
  if (name == "lanedrop") return MapName::lanedrop;
  throw ConfigError("unknown map name '" + std::string(name) + "' (expected onramp, threeway, fourway or lanedrop)");
}

std::string_view to_string(MapName map) {
  switch (map) {
    case MapName::onramp: return "onramp";
    case MapName::threeway: return "threeway";
    case MapName::fourway: return "fourway";
    case MapName::lanedrop: return "lanedrop";
  }
  return "?";
}

std::string_view to_string(Turn turn) {
  switch (turn) {
    case Turn::straight: return "straight";
    case Turn::left: return "left";
    case Turn::right: return "right";
  }
  return "?";
}

bool RoadNetwork::is_sink(int lane_id) const {
  return std::find(sinks.begin(), sinks.end(), lane_id) != sinks.end();
}

std::optional<int> RoadNetwork::successor_on(int lane_id, int next_edge) const {
  for (int s : lane(lane_id).successors)
    if (lane(s).edge == next_edge) return s;
  return std::nullopt;
}

int RoadNetwork::jam_capacity(double vehicle_length, double min_gap) const {
  double total = 0.0;
  for (const auto& l : lanes) total += l.length;
  return static_cast<int>(std::ceil(total / (vehicle_length + min_gap)));
}

void RoadNetwork::validate() const {
  for (std::size_t i = 0; i < lanes.size(); ++i) {
    const Lane& l = lanes[i];
    require(l.id == static_cast<int>(i), "lane ids must be dense and ordered");
    require(l.length > 0.0, "lane length must be positive");
    require(l.speed_limit > 0.0, "lane speed limit must be positive");
    if (l.left) {
      require(lane(*l.left).right == l.id, "lateral neighbor relation must be symmetric");
      require(std::abs(lane(*l.left).length - l.length) < 1e-9, "lateral neighbors must have equal length");
    }
    if (l.right) require(lane(*l.right).left == l.id, "lateral neighbor relation must be symmetric");
  }
  // Acyclic successor graph: depth-first search with colors.
  std::vector<int> color(lanes.size(), 0);
  std::function<bool(int)> has_cycle = [&](int id) {
    color[static_cast<std::size_t>(id)] = 1;
    for (int s : lane(id).successors) {
      const int c = color[static_cast<std::size_t>(s)];
      if (c == 1) return true;
      if (c == 0 && has_cycle(s)) return true;
    }
    color[static_cast<std::size_t>(id)] = 2;
    return false;
  };
  for (const auto& l : lanes)
    if (color[static_cast<std::size_t>(l.id)] == 0) require(!has_cycle(l.id), "successor graph must be acyclic");

  // Every source reaches a sink, allowing lane changes inside an edge.
  for (const auto& src : sources) {
    std::set<int> seen;
    std::vector<int> stack{src.lane};
    bool reached = false;
    while (!stack.empty() && !reached) {
      const int id = stack.back();
      stack.pop_back();
      if (!seen.insert(id).second) continue;
      if (is_sink(id)) reached = true;
      for (int s : lane(id).successors) stack.push_back(s);
      for (int n : edge(lane(id).edge).lanes) stack.push_back(n);
    }
    require(reached, "every source must reach a sink");
  }
  for (const auto& z : zones) {
    for (const auto& m : z.members) {
      require(m.lane >= 0 && m.lane < static_cast<int>(lanes.size()), "conflict zone references unknown lane");
      require(m.begin >= 0.0 && m.end <= lane(m.lane).length + 1e-9 && m.begin < m.end,
              "conflict zone interval out of range");
    }
  }
}

namespace {

class Builder {
 public:
  explicit Builder(MapName map) { net_.map = map; }

  int add_edge(std::string name, std::string group, std::vector<Polyline> shapes, double speed, int rank) {
    Edge e;
    e.id = static_cast<int>(net_.edges.size());
    e.name = std::move(name);
    e.group = std::move(group);
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      Lane l;
      l.id = static_cast<int>(net_.lanes.size());
      l.edge = e.id;
      l.index_in_edge = static_cast<int>(i);
      l.length = shapes[i].length();
      l.speed_limit = speed;
      l.priority_rank = rank;
      l.shape = std::move(shapes[i]);
      if (i > 0) {
        l.right = e.lanes.back();
        net_.lanes.back().left = l.id;
      }
      e.lanes.push_back(l.id);
      net_.lanes.push_back(std::move(l));
    }
    net_.edges.push_back(std::move(e));
    return net_.edges.back().id;
  }

  int lane_of(int edge, int index) const { return net_.edges[static_cast<std::size_t>(edge)].lanes.at(static_cast<std::size_t>(index)); }

  void connect(int from_lane, int to_lane) {
    net_.lanes[static_cast<std::size_t>(from_lane)].successors.push_back(to_lane);
    net_.lanes[static_cast<std::size_t>(to_lane)].predecessors.push_back(from_lane);
  }

  void add_sources(int edge) {
    for (int l : net_.edges[static_cast<std::size_t>(edge)].lanes) {
      Source s;
      s.id = static_cast<int>(net_.sources.size());
      s.lane = l;
      s.entry = net_.lanes[static_cast<std::size_t>(l)].shape.pose_at(0.0).position;
      net_.sources.push_back(s);
    }
  }

  void add_sinks(int edge) {
    for (int l : net_.edges[static_cast<std::size_t>(edge)].lanes) net_.sinks.push_back(l);
  }

  void add_zone(int junction, std::vector<LaneInterval> members, YieldRule rule) {
    ConflictZone z;
    z.id = static_cast<int>(net_.zones.size());
    z.junction = junction;
    z.members = std::move(members);
    z.rule = rule;
    net_.zones.push_back(std::move(z));
  }

  RoadNetwork& net() { return net_; }

 private:
  RoadNetwork net_;
};

RoadNetwork build_onramp(const MapGeometry& g) {
  Builder b(MapName::onramp);
  const double w = g.lane_width;
  const double y0 = 40.0;
  const double x1 = g.freeway_upstream;
  const double x2 = x1 + g.acceleration_lane;
  const double x3 = x2 + g.freeway_downstream;
  const int kFreeway = 2;
  const int kRamp = 1;

  const int fw_in = b.add_edge("freeway_in", "freeway",
                               {straight({0, y0}, {x1, y0}), straight({0, y0 + w}, {x1, y0 + w})},
                               g.freeway_speed, kFreeway);
  const int merge = b.add_edge("merge", "merge",
                               {straight({x1, y0 - w}, {x2, y0 - w}), straight({x1, y0}, {x2, y0}),
                                straight({x1, y0 + w}, {x2, y0 + w})},
                               g.freeway_speed, kFreeway);
  const int fw_out = b.add_edge("freeway_out", "freeway",
                                {straight({x2, y0}, {x3, y0}), straight({x2, y0 + w}, {x3, y0 + w})},
                                g.freeway_speed, kFreeway);
  const double rise = 30.0;
  const double run = std::sqrt(std::max(g.ramp_length * g.ramp_length - rise * rise, 1.0));
  const int ramp = b.add_edge("ramp", "ramp", {straight({x1 - run, y0 - w - rise}, {x1, y0 - w})}, g.ramp_speed, kRamp);

  // The acceleration lane belongs to the ramp's priority class.
  b.net().lanes[static_cast<std::size_t>(b.lane_of(merge, 0))].priority_rank = kRamp;

  b.connect(b.lane_of(fw_in, 0), b.lane_of(merge, 1));
  b.connect(b.lane_of(fw_in, 1), b.lane_of(merge, 2));
  b.connect(b.lane_of(ramp, 0), b.lane_of(merge, 0));
  b.connect(b.lane_of(merge, 1), b.lane_of(fw_out, 0));
  b.connect(b.lane_of(merge, 2), b.lane_of(fw_out, 1));

  b.add_sources(fw_in);
  b.add_sources(ramp);
  b.add_sinks(fw_out);

  auto& net = b.net();
  net.width = x3;
  net.height = y0 + w + 6.5;
  net.bottleneck = {{x1 - 100.0, 0.0, x2 + 20.0, net.height}, {x2, y0 - w}};
  return std::move(net);
}

RoadNetwork build_lanedrop(const MapGeometry& g) {
  Builder b(MapName::lanedrop);
  const double w = g.lane_width;
  const double y0 = 5.0;
  const double x1 = g.drop_four_lanes;
  const double x2 = x1 + g.drop_two_lanes;
  const double x3 = x2 + g.drop_one_lane;
  const int kEqual = 1;

  std::vector<Polyline> four;
  for (int i = 0; i < 4; ++i) four.push_back(straight({0, y0 + i * w}, {x1, y0 + i * w}));
  const int e4 = b.add_edge("four_lanes", "drop", std::move(four), g.lanedrop_speed, kEqual);
  const double ya = y0 + 0.5 * w;
  const double yb = y0 + 2.5 * w;
  const int e2 = b.add_edge("two_lanes", "drop", {straight({x1, ya}, {x2, ya}), straight({x1, yb}, {x2, yb})},
                            g.lanedrop_speed, kEqual);
  const double yc = y0 + 1.5 * w;
  const int e1 = b.add_edge("one_lane", "drop", {straight({x2, yc}, {x3, yc})}, g.lanedrop_speed, kEqual);

  b.connect(b.lane_of(e4, 0), b.lane_of(e2, 0));
  b.connect(b.lane_of(e4, 1), b.lane_of(e2, 0));
  b.connect(b.lane_of(e4, 2), b.lane_of(e2, 1));
  b.connect(b.lane_of(e4, 3), b.lane_of(e2, 1));
  b.connect(b.lane_of(e2, 0), b.lane_of(e1, 0));
  b.connect(b.lane_of(e2, 1), b.lane_of(e1, 0));

  // Zipper zones sit on the last metre of each merging lane.
  const double d = 1.0;
  b.add_zone(0, {{b.lane_of(e4, 0), x1 - d, x1}, {b.lane_of(e4, 1), x1 - d, x1}}, YieldRule::zipper);
  b.add_zone(1, {{b.lane_of(e4, 2), x1 - d, x1}, {b.lane_of(e4, 3), x1 - d, x1}}, YieldRule::zipper);
  b.add_zone(2, {{b.lane_of(e2, 0), x2 - x1 - d, x2 - x1}, {b.lane_of(e2, 1), x2 - x1 - d, x2 - x1}},
             YieldRule::zipper);

  b.add_sources(e4);
  b.add_sinks(e1);

  auto& net = b.net();
  net.width = x3;
  net.height = y0 + 3 * w + 5.0;
  net.bottleneck = {{x1 - 150.0, 0.0, x2 + 50.0, net.height}, {x2, yc}};
  return std::move(net);
}

struct Arm {
  std::string name;
  Vec2 out;  // unit vector from the junction centre outwards
  bool main = false;
};

Vec2 right_of(Vec2 t) { return {t.y, -t.x}; }
Vec2 left_of(Vec2 t) { return {-t.y, t.x}; }

bool same_dir(Vec2 a, Vec2 b) { return std::abs(a.x - b.x) < 1e-9 && std::abs(a.y - b.y) < 1e-9; }

RoadNetwork build_intersection(MapName map, const MapGeometry& g) {
  Builder b(map);
  std::vector<Arm> arms;
  if (map == MapName::fourway) {
    arms = {{"north", {0, 1}, true}, {"east", {1, 0}, false}, {"south", {0, -1}, true}, {"west", {-1, 0}, false}};
  } else {
    arms = {{"east", {1, 0}, true}, {"south", {0, -1}, false}, {"west", {-1, 0}, true}};
  }
  const double r = g.junction_half_size;
  const double a = g.approach_length;
  const double half = r + a;
  const Vec2 c{half, half};
  const double off = 0.5 * g.lane_width;

  std::vector<int> incoming(arms.size());
  std::vector<int> outgoing(arms.size());
  for (std::size_t i = 0; i < arms.size(); ++i) {
    const Vec2 u = arms[i].out;
    const Vec2 o_in = off * right_of(-1.0 * u);
    const Vec2 o_out = off * right_of(u);
    const std::string group = arms[i].main ? "main" : "side";
    incoming[i] = b.add_edge(arms[i].name + "_in", group, {straight(c + half * u + o_in, c + r * u + o_in)},
                             g.intersection_speed, arms[i].main ? 2 : 1);
    outgoing[i] = b.add_edge(arms[i].name + "_out", group, {straight(c + r * u + o_out, c + half * u + o_out)},
                             g.intersection_speed, 2);
  }

  struct Connector {
    int lane;
    int from_arm;
  };
  std::vector<Connector> connectors;
  for (std::size_t i = 0; i < arms.size(); ++i) {
    const Vec2 travel = -1.0 * arms[i].out;
    for (std::size_t j = 0; j < arms.size(); ++j) {
      if (i == j) continue;
      Turn turn;
      if (same_dir(arms[j].out, travel)) turn = Turn::straight;
      else if (same_dir(arms[j].out, right_of(travel))) turn = Turn::right;
      else if (same_dir(arms[j].out, left_of(travel))) turn = Turn::left;
      else continue;

      const int in_lane = b.lane_of(incoming[i], 0);
      const int out_lane = b.lane_of(outgoing[j], 0);
      const Vec2 p0 = b.net().lane(in_lane).shape.points().back();
      const Vec2 p1 = b.net().lane(out_lane).shape.points().front();
      Polyline shape;
      if (turn == Turn::straight) {
        shape = straight(p0, p1);
      } else {
        // Control point: where the incoming and outgoing lane lines meet.
        const Vec2 d0 = travel;
        const Vec2 d1 = arms[j].out;
        const double denom = d0.x * d1.y - d0.y * d1.x;
        const Vec2 diff = p1 - p0;
        const double s = (diff.x * d1.y - diff.y * d1.x) / denom;
        shape = bezier(p0, p0 + s * d0, p1);
      }
      int rank;
      if (arms[i].main) rank = turn == Turn::left ? 3 : 4;
      else rank = turn == Turn::left ? 1 : 2;
      const int e = b.add_edge(arms[i].name + "_to_" + arms[j].name, "connector", {std::move(shape)},
                               g.intersection_speed, rank);
      b.net().edges[static_cast<std::size_t>(e)].turn = turn;
      b.net().edges[static_cast<std::size_t>(e)].junction = 0;
      const int conn_lane = b.lane_of(e, 0);
      b.connect(in_lane, conn_lane);
      b.connect(conn_lane, out_lane);
      connectors.push_back({conn_lane, static_cast<int>(i)});
    }
  }

  // Conflicts between connectors that start on different approaches.
  const double h = 3.0;
  const double merge_len = 4.0;
  for (std::size_t p = 0; p < connectors.size(); ++p) {
    for (std::size_t q = p + 1; q < connectors.size(); ++q) {
      if (connectors[p].from_arm == connectors[q].from_arm) continue;
      const Lane& lp = b.net().lane(connectors[p].lane);
      const Lane& lq = b.net().lane(connectors[q].lane);
      if (lp.successors.front() == lq.successors.front()) {
        b.add_zone(0,
                   {{lp.id, std::max(0.0, lp.length - merge_len), lp.length},
                    {lq.id, std::max(0.0, lq.length - merge_len), lq.length}},
                   YieldRule::priority);
      } else if (auto hit = first_crossing(lp.shape, lq.shape)) {
        b.add_zone(0,
                   {{lp.id, std::max(0.0, hit->first - h), std::min(lp.length, hit->first + h)},
                    {lq.id, std::max(0.0, hit->second - h), std::min(lq.length, hit->second + h)}},
                   YieldRule::priority);
      }
    }
  }

  for (int e : incoming) b.add_sources(e);
  for (int e : outgoing) b.add_sinks(e);

  auto& net = b.net();
  net.width = 2.0 * half;
  net.height = 2.0 * half;
  const double reach = r + 100.0;
  net.bottleneck = {{c.x - reach, c.y - reach, c.x + reach, c.y + reach}, c};
  return std::move(net);
}

}  // namespace

RoadNetwork build_map(MapName map, const MapGeometry& geometry) {
  RoadNetwork net;
  switch (map) {
    case MapName::onramp: net = build_onramp(geometry); break;
    case MapName::lanedrop: net = build_lanedrop(geometry); break;
    case MapName::threeway:
    case MapName::fourway: net = build_intersection(map, geometry); break;
  }
  net.validate();
  return net;
}

std::vector<RouteSpec> routes_for(const RoadNetwork& network) {
  // Edge-level successor graph.
  std::vector<std::set<int>> next(network.edges.size());
  for (const auto& l : network.lanes)
    for (int s : l.successors) next[static_cast<std::size_t>(l.edge)].insert(network.lane(s).edge);

  std::map<int, int> first_source_of_edge;
  for (const auto& s : network.sources) {
    const int e = network.lane(s.lane).edge;
    if (!first_source_of_edge.count(e)) first_source_of_edge[e] = s.id;
  }

  struct Candidate {
    int source;
    int sink_lane;
    std::vector<int> edges;
  };
  std::vector<Candidate> found;
  for (const auto& [entry_edge, source_id] : first_source_of_edge) {
    std::vector<int> path{entry_edge};
    std::function<void()> walk = [&]() {
      const int e = path.back();
      const auto& lanes = network.edge(e).lanes;
      const bool sink = std::any_of(lanes.begin(), lanes.end(), [&](int l) { return network.is_sink(l); });
      if (sink) {
        found.push_back({source_id, *std::min_element(lanes.begin(), lanes.end()), path});
        return;
      }
      for (int n : next[static_cast<std::size_t>(e)]) {
        path.push_back(n);
        walk();
        path.pop_back();
      }
    };
    walk();
  }
  std::sort(found.begin(), found.end(), [](const Candidate& a, const Candidate& b) {
    if (a.source != b.source) return a.source < b.source;
    if (a.sink_lane != b.sink_lane) return a.sink_lane < b.sink_lane;
    return a.edges < b.edges;
  });

  std::vector<RouteSpec> routes;
  for (const auto& c : found) {
    RouteSpec r;
    r.id = static_cast<int>(routes.size());
    r.edges = c.edges;
    for (std::size_t i = 1; i < c.edges.size(); ++i) {
      const auto& e = network.edge(c.edges[i]);
      r.turns.push_back(e.turn.value_or(Turn::straight));
    }
    r.group = network.edge(c.edges.front()).group;
    routes.push_back(std::move(r));
  }
  return routes;
}

nlohmann::json map_to_json(const RoadNetwork& network, const std::vector<RouteSpec>& routes) {
  using nlohmann::json;
  json lanes = json::array();
  for (const auto& l : network.lanes) {
    json pts = json::array();
    for (const auto& p : l.shape.points()) pts.push_back({p.x, p.y});
    lanes.push_back({{"id", l.id},
                     {"edge", l.edge},
                     {"length", l.length},
                     {"speed_limit", l.speed_limit},
                     {"successors", l.successors},
                     {"left", l.left ? json(*l.left) : json(nullptr)},
                     {"right", l.right ? json(*l.right) : json(nullptr)},
                     {"priority_rank", l.priority_rank},
                     {"shape", pts}});
  }
  json edges = json::array();
  for (const auto& e : network.edges) {
    edges.push_back({{"id", e.id},
                     {"name", e.name},
                     {"group", e.group},
                     {"lanes", e.lanes},
                     {"turn", e.turn ? json(std::string(to_string(*e.turn))) : json(nullptr)},
                     {"junction", e.junction}});
  }
  json zones = json::array();
  for (const auto& z : network.zones) {
    json members = json::array();
    for (const auto& m : z.members) members.push_back({{"lane", m.lane}, {"begin", m.begin}, {"end", m.end}});
    zones.push_back({{"id", z.id},
                     {"junction", z.junction},
                     {"rule", z.rule == YieldRule::zipper ? "zipper" : "priority"},
                     {"members", members}});
  }
  json route_list = json::array();
  for (const auto& r : routes) {
    json turns = json::array();
    for (Turn t : r.turns) turns.push_back(std::string(to_string(t)));
    route_list.push_back({{"id", r.id}, {"edges", r.edges}, {"turns", turns}, {"group", r.group}});
  }
  json sources = json::array();
  for (const auto& s : network.sources) sources.push_back({{"id", s.id}, {"lane", s.lane}, {"entry", {s.entry.x, s.entry.y}}});
  const auto& bz = network.bottleneck;
  return {{"schema_version", kMapSchemaVersion},
          {"map", std::string(to_string(network.map))},
          {"extent", {network.width, network.height}},
          {"lanes", lanes},
          {"edges", edges},
          {"sources", sources},
          {"sinks", network.sinks},
          {"zones", zones},
          {"bottleneck", {{"region", {bz.region.x0, bz.region.y0, bz.region.x1, bz.region.y1}},
                          {"anchor", {bz.anchor.x, bz.anchor.y}}}},
          {"routes", route_list}};
}

}  // namespace coopdrive
