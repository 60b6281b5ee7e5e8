#include <doctest.h>

#include <algorithm>
#include <set>

#include "coopdrive/microsim.hpp"
#include "coopdrive/roadnet.hpp"

using namespace coopdrive;

namespace {

const MapName kMaps[] = {MapName::onramp, MapName::threeway, MapName::fourway, MapName::lanedrop};

int edge_named(const RoadNetwork& n, const std::string& name) {
  for (const auto& e : n.edges)
    if (e.name == name) return e.id;
  FAIL("no edge " << name);
  return -1;
}

}  // namespace

TEST_CASE("every map passes structural validation and has sane lanes") {
  for (MapName m : kMaps) {
    const RoadNetwork n = build_map(m);
    CHECK_NOTHROW(n.validate());
    for (const auto& l : n.lanes) {
      CHECK(l.length > 0.0);
      CHECK(l.speed_limit > 0.0);
      if (l.left) CHECK(n.lane(*l.left).right == l.id);
      if (l.right) CHECK(n.lane(*l.right).left == l.id);
    }
  }
}

TEST_CASE("lanedrop corridor narrows 4 then 2 then 1") {
  const RoadNetwork n = build_map(MapName::lanedrop);
  REQUIRE(n.edges.size() == 3);
  CHECK(n.edge(edge_named(n, "four_lanes")).lanes.size() == 4);
  CHECK(n.edge(edge_named(n, "two_lanes")).lanes.size() == 2);
  CHECK(n.edge(edge_named(n, "one_lane")).lanes.size() == 1);
  const int last = edge_named(n, "one_lane");
  for (const auto& r : routes_for(n)) CHECK(r.edges.back() == last);
}

TEST_CASE("onramp freeway outranks the ramp") {
  const RoadNetwork n = build_map(MapName::onramp);
  const int ramp_lane = n.edge(edge_named(n, "ramp")).lanes.at(0);
  for (int l : n.edge(edge_named(n, "freeway_in")).lanes) CHECK(n.lane(l).priority_rank > n.lane(ramp_lane).priority_rank);
  const auto& merge = n.edge(edge_named(n, "merge")).lanes;
  CHECK(n.lane(merge[1]).priority_rank > n.lane(merge[0]).priority_rank);

  const auto routes = routes_for(n);
  std::set<int> sinks;
  for (const auto& r : routes) sinks.insert(r.edges.back());
  CHECK(sinks.size() == 1);
  CHECK(*sinks.begin() == edge_named(n, "freeway_out"));
}

TEST_CASE("fourway has 12 routes and side connectors yield to main connectors") {
  const RoadNetwork n = build_map(MapName::fourway);
  CHECK(routes_for(n).size() == 12);
  CHECK(routes_for(build_map(MapName::threeway)).size() == 6);
  int main_min = 1 << 20, side_max = -1;
  for (const auto& e : n.edges) {
    if (e.group != "connector") continue;
    const int rank = n.lane(e.lanes[0]).priority_rank;
    const bool from_main = n.edge(n.lane(n.lane(e.lanes[0]).predecessors.at(0)).edge).group == "main";
    if (from_main) main_min = std::min(main_min, rank);
    else side_max = std::max(side_max, rank);
  }
  CHECK(side_max < main_min);
  // Every zone pairing a main-road and a side-road connector exists and references valid intervals.
  CHECK(!n.zones.empty());
  for (const auto& z : n.zones)
    for (const auto& m : z.members) {
      CHECK(m.lane >= 0);
      CHECK(m.lane < static_cast<int>(n.lanes.size()));
      CHECK(m.begin >= 0.0);
      CHECK(m.end <= n.lane(m.lane).length + 1e-9);
      CHECK(m.begin < m.end);
    }
}

TEST_CASE("routes end at sinks and lane poses normalize into the unit square") {
  for (MapName m : kMaps) {
    const RoadNetwork n = build_map(m);
    const auto routes = routes_for(n);
    CHECK(!routes.empty());
    for (const auto& r : routes) {
      CHECK(r.turns.size() + 1 == r.edges.size());
      const auto& last = n.edge(r.edges.back()).lanes;
      CHECK(std::any_of(last.begin(), last.end(), [&](int l) { return n.is_sink(l); }));
    }
    for (const auto& l : n.lanes)
      for (double s = 0.0; s <= l.length; s += 0.5) {
        const Vec2 p = l.shape.pose_at(s).position;
        CHECK(p.x / n.width >= 0.0);
        CHECK(p.x / n.width <= 1.0);
        CHECK(p.y / n.height >= 0.0);
        CHECK(p.y / n.height <= 1.0);
      }
  }
}

TEST_CASE("a lone vehicle reaches the sink on every route") {
  for (MapName m : kMaps) {
    const RoadNetwork n = build_map(m);
    const auto routes = routes_for(n);
    for (const auto& r : routes) {
      EpisodeSpec spec;
      spec.map = m;
      spec.duration = 200.0;
      Simulation sim(n, routes, spec);
      const int entry_lane = n.edge(r.edges.front()).lanes.front();
      sim.place_vehicle({r.id, entry_lane, 0.0, 10.0, Category::hv, std::nullopt});
      while (!sim.done() && sim.releases().empty()) sim.step();
      CHECK_MESSAGE(sim.releases().size() == 1, "route " << r.id << " on map " << to_string(m));
    }
  }
}

TEST_CASE("map names round-trip and unknown names are rejected") {
  for (MapName m : kMaps) CHECK(parse_map_name(to_string(m)) == m);
  CHECK_THROWS(parse_map_name("roundabout"));
}
