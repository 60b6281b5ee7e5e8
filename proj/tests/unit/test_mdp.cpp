#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "coopdrive/errors.hpp"
#include "coopdrive/mdp.hpp"

using namespace coopdrive;

namespace {

EpisodeSpec empty_episode(MapName m, double duration = 400.0) {
  EpisodeSpec s;
  s.map = m;
  s.duration = duration;
  return s;
}

struct Scene {
  RoadNetwork net;
  std::vector<RouteSpec> routes;
  Simulation sim;
  SlotTable slots;
  Scene(MapName m, EpisodeSpec spec)
      : net(build_map(m)), routes(routes_for(net)), sim(net, routes, std::move(spec)), slots(state_capacity(net, 5.0)) {}
  explicit Scene(MapName m) : Scene(m, empty_episode(m)) {}
  StateEncoding state() {
    slots.sync(sim.vehicles());
    return encode_state(sim, slots);
  }
};

void check_mask_invariants(const StateEncoding& s, const ObservationEncoding& o) {
  for (int i = 0; i < o.max_active; ++i) {
    int allowed = 0;
    for (int a = 0; a < kActionDim; ++a) allowed += o.allowed(i, a);
    if (!o.av_mask[static_cast<std::size_t>(i)]) {
      CHECK(allowed == 0);
      for (int j = 0; j < s.capacity; ++j) CHECK(!o.observes(i, j));
      continue;
    }
    CHECK(allowed >= 1);
    REQUIRE(o.state_slot[static_cast<std::size_t>(i)]);
    CHECK(o.observes(i, *o.state_slot[static_cast<std::size_t>(i)]));
    for (int j = 0; j < s.capacity; ++j)
      if (o.observes(i, j)) CHECK(s.mask[static_cast<std::size_t>(j)]);
  }
}

void check_feature_rows(const StateEncoding& s) {
  for (int k = 0; k < s.capacity; ++k) {
    const double* f = s.row(k);
    if (!s.mask[static_cast<std::size_t>(k)]) {
      for (int d = 0; d < kFeatureDim; ++d) CHECK(f[d] == 0.0);
      continue;
    }
    CHECK(f[0] >= 0.0);
    CHECK(f[0] <= 1.0);
    CHECK(f[1] >= 0.0);
    CHECK(f[1] <= 1.0);
    CHECK(std::abs(f[2] * f[2] + f[3] * f[3] - 1.0) < 1e-6);
    CHECK(f[4] >= 0.0);
    CHECK(f[4] <= 1.0 + 1e-9);
    CHECK((f[5] == -1.0 || f[5] == 0.0 || f[5] == 1.0));
    CHECK((f[6] == -1.0 || f[6] == 0.0 || f[6] == 1.0));
    if (f[6] == -1.0) CHECK(f[7] == -1.0);
    else CHECK(f[7] >= 0.0);
  }
}

}  // namespace

TEST_CASE("reward") {
  RewardParams p;
  CHECK(compute_reward({}, p) == p.eta_b);
  p.eta_a = 1.0;
  p.eta_b = 0.0;
  CHECK(compute_reward({300.0}, p) == doctest::Approx(1.0).epsilon(1e-15));
  p.eta_a = 0.5;
  p.eta_b = -0.1;
  CHECK(compute_reward({150.0, 450.0}, p) == doctest::Approx(0.9).epsilon(1e-15));
}

TEST_CASE("empty map encodes to an all-false mask and zero features") {
  Scene s(MapName::onramp);
  const StateEncoding e = s.state();
  CHECK(e.occupied() == 0);
  CHECK(std::all_of(e.features.begin(), e.features.end(), [](double x) { return x == 0.0; }));
  CHECK(select_activated(s.sim, 16).empty());
}

TEST_CASE("travel-time feature: -1 for HVs, entry-relative and scaled by 300 for AVs") {
  Scene s(MapName::lanedrop);
  const int av = s.sim.place_vehicle({0, s.net.edge(0).lanes[0], 200.0, 0.0, Category::av, std::nullopt});
  const int hv = s.sim.place_vehicle({0, s.net.edge(0).lanes[3], 20.0, 0.0, Category::hv, std::nullopt});
  s.sim.set_activated({av});
  s.sim.command(av, kActionSpeed0);
  while (s.sim.now() < 300.0 - 1e-9) {
    s.sim.step();
    if (s.sim.find(av)->activated == false) break;
  }
  REQUIRE(s.sim.find(av) != nullptr);
  const StateEncoding e = s.state();
  const double* fa = e.row(*s.slots.slot_of(av));
  CHECK(fa[6] == 1.0);
  CHECK(fa[7] == doctest::Approx(1.0).epsilon(1e-12));
  if (s.sim.find(hv)) {
    const double* fh = e.row(*s.slots.slot_of(hv));
    CHECK(fh[6] == -1.0);
    CHECK(fh[7] == -1.0);
  }
}

TEST_CASE("slot table assigns the lowest free slot and reports exhaustion") {
  SlotTable t(3);
  std::map<int, VehicleRecord> vs;
  for (int id : {10, 11, 12}) vs[id].id = id;
  t.sync(vs);
  CHECK(*t.slot_of(10) == 0);
  CHECK(*t.slot_of(12) == 2);
  vs.erase(11);
  t.sync(vs);
  CHECK(!t.slot_of(11));
  vs[13].id = 13;
  t.sync(vs);
  CHECK(*t.slot_of(13) == 1);
  CHECK(*t.slot_of(12) == 2);
  vs[14].id = 14;
  CHECK_THROWS_AS(t.sync(vs), CapacityError);
}

TEST_CASE("activation picks the N AVs nearest the anchor") {
  Scene s(MapName::lanedrop);
  const auto& four = s.net.edge(0).lanes;
  for (int k = 0; k < 19; ++k)
    s.sim.place_vehicle({0, four[static_cast<std::size_t>(k % 4)], 110.0 + 7.0 * k, 0.0, Category::av, std::nullopt});
  s.sim.place_vehicle({0, four[0], 20.0, 0.0, Category::av, std::nullopt});  // outside the zone
  s.sim.place_vehicle({0, four[1], 240.0, 0.0, Category::hv, std::nullopt});

  std::vector<std::pair<double, int>> oracle;
  for (const auto& [id, v] : s.sim.vehicles()) {
    if (v.category != Category::av) continue;
    const Vec2 p = s.sim.pose_of(v).position;
    if (!s.net.bottleneck.region.contains(p)) continue;
    oracle.push_back({std::hypot(p.x - s.net.bottleneck.anchor.x, p.y - s.net.bottleneck.anchor.y), id});
  }
  REQUIRE(oracle.size() == 19);
  std::sort(oracle.begin(), oracle.end());
  const auto got = select_activated(s.sim, 16);
  REQUIRE(got.size() == 16);
  for (std::size_t i = 0; i < 16; ++i) CHECK(got[i] == oracle[i].second);
}

TEST_CASE("an AV leaving the zone is dropped at the next decision") {
  EnvConfig cfg;
  const RoadNetwork net = build_map(MapName::lanedrop);
  const auto routes = routes_for(net);
  DrivingEnv env(net, routes, cfg);
  env.reset(empty_episode(MapName::lanedrop));
  const int id = env.sim().place_vehicle({0, net.edge(0).lanes[0], 90.0, 20.0, Category::av, std::nullopt});
  bool seen = false, left = false;
  env.observe();
  while (!env.done() && env.sim().find(id)) {
    const Vec2 p = env.sim().pose_of(*env.sim().find(id)).position;
    const bool inside = net.bottleneck.region.contains(p);
    const bool active = std::find(env.activated().begin(), env.activated().end(), id) != env.activated().end();
    CHECK(inside == active);
    seen |= active;
    left |= seen && !inside;
    env.step(std::vector<int>(env.activated().size(), kActionSpeed0 + 3));
  }
  CHECK(seen);
  CHECK(left);
}

TEST_CASE("observation masks: range, lateral actions and monotonicity") {
  Scene s(MapName::lanedrop);
  const auto& four = s.net.edge(0).lanes;
  const int a = s.sim.place_vehicle({0, four[0], 120.0, 0.0, Category::av, std::nullopt});
  const int b = s.sim.place_vehicle({0, four[3], 240.0, 0.0, Category::av, std::nullopt});
  const int h = s.sim.place_vehicle({0, four[1], 180.0, 0.0, Category::hv, std::nullopt});
  s.sim.set_activated({a, b});
  const StateEncoding e = s.state();
  const std::vector<int> act{a, b};

  const ObservationEncoding o50 = encode_observation(e, s.sim, act, 50.0, 4);
  const ObservationEncoding o100 = encode_observation(e, s.sim, act, 100.0, 4);
  check_mask_invariants(e, o50);
  check_mask_invariants(e, o100);
  // a and b are 120 m apart; h is 60 m from each.
  for (int i = 0; i < 2; ++i) {
    int count = 0;
    for (int j = 0; j < e.capacity; ++j) count += o50.observes(i, j);
    CHECK(count == 1);
  }
  CHECK(o100.observes(0, *s.slots.slot_of(h)));
  CHECK(!o100.observes(0, *s.slots.slot_of(b)));
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < e.capacity; ++j)
      if (o50.observes(i, j)) CHECK(o100.observes(i, j));

  // a is on the rightmost lane, b on the leftmost.
  CHECK(!o100.allowed(0, kActionRight));
  CHECK(o100.allowed(0, kActionLeft));
  CHECK(!o100.allowed(1, kActionLeft));
  CHECK(o100.allowed(1, kActionRight));
  for (int i = 0; i < 2; ++i)
    for (int k = 0; k < 4; ++k) CHECK(o100.allowed(i, kActionSpeed0 + k));
  CHECK(o100.active_count() == 2);
}

TEST_CASE("encoding round-trips through the binary layout") {
  Scene s(MapName::lanedrop);
  const auto& four = s.net.edge(0).lanes;
  const int a = s.sim.place_vehicle({0, four[0], 120.0, 3.0, Category::av, std::nullopt});
  s.sim.place_vehicle({0, four[2], 160.0, 5.0, Category::hv, std::nullopt});
  s.sim.set_activated({a});
  const StateEncoding e = s.state();
  const ObservationEncoding o = encode_observation(e, s.sim, {a}, 100.0, 4);
  std::stringstream buf;
  write_encoding(buf, e, o);
  CHECK(buf.str().substr(0, 5) == "CDENC");
  StateEncoding e2;
  ObservationEncoding o2;
  read_encoding(buf, e2, o2);
  CHECK(e2.capacity == e.capacity);
  CHECK(e2.mask == e.mask);
  CHECK(e2.features == e.features);
  CHECK(o2.av_mask == o.av_mask);
  CHECK(o2.obs_mask == o.obs_mask);
  CHECK(o2.action_mask == o.action_mask);
  CHECK(o2.state_slot == o.state_slot);
}

TEST_CASE("full episodes keep encodings consistent, slots stable and rewards decomposable") {
  for (MapName m : {MapName::onramp, MapName::lanedrop, MapName::threeway}) {
    const RoadNetwork net = build_map(m);
    const auto routes = routes_for(net);
    GenerationConfig g;
    g.demand_vph = m == MapName::onramp ? 4000.0 : 2000.0;
    g.penetration = 0.4;
    g.duration = 400.0;
    EnvConfig cfg;
    DrivingEnv env(net, routes, cfg);
    env.reset(generate_episode(net, routes, g, 3));
    Rng rng(9);
    std::map<int, int> slot_of;
    SlotTable mirror(env.state().capacity);
    double total = 0.0;
    int steps = 0;
    while (!env.done()) {
      const StateEncoding& s = env.state();
      check_feature_rows(s);
      check_mask_invariants(s, env.observation());
      for (int k = 0; k < s.capacity; ++k) {
        const auto& v = s.vehicle[static_cast<std::size_t>(k)];
        if (!v) continue;
        auto [it, fresh] = slot_of.emplace(*v, k);
        if (!fresh) CHECK(it->second == k);
      }
      // A table synced through the same vehicle sets reproduces the encoding exactly, twice.
      mirror.sync(env.sim().vehicles());
      CHECK(encode_state(env.sim(), mirror).features == s.features);
      CHECK(encode_state(env.sim(), mirror).mask == s.mask);

      std::vector<int> actions;
      for (std::size_t i = 0; i < env.activated().size(); ++i) {
        std::vector<int> ok;
        for (int a = 0; a < kActionDim; ++a)
          if (env.observation().allowed(static_cast<int>(i), a)) ok.push_back(a);
        actions.push_back(ok[rng.below(ok.size())]);
      }
      total += env.step(actions);
      ++steps;
      // Vehicles leaving free their slot for reuse; forget them.
      for (auto it = slot_of.begin(); it != slot_of.end();)
        it = env.sim().find(it->first) ? std::next(it) : slot_of.erase(it);
    }
    double tau = 0.0;
    for (const auto& r : env.sim().releases()) tau += r.travel_time / kTravelTimeScale;
    CHECK(total == doctest::Approx(cfg.reward.eta_b * steps + cfg.reward.eta_a * tau).epsilon(1e-12));
  }
}
