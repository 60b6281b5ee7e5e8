#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "coopdrive/errors.hpp"
#include "coopdrive/eval.hpp"

using namespace coopdrive;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ScheduledVehicle arrival(int id, double t, int route = 0, Category c = Category::hv) { return {id, route, t, c}; }

ReleaseRecord release(int id, double travel, int route = 0, Category c = Category::hv) {
  ReleaseRecord r;
  r.id = id;
  r.route = route;
  r.category = c;
  r.travel_time = travel;
  return r;
}

}  // namespace

TEST_CASE("quantile rule") {
  CHECK(quantile({10, 20, 30, 40}, 0.25) == doctest::Approx(15.0).epsilon(1e-15));
  CHECK(quantile({40, 30, 20, 10}, 0.5) == doctest::Approx(25.0).epsilon(1e-15));
  CHECK(quantile({10, 20, 30, 40}, 0.75) == doctest::Approx(35.0).epsilon(1e-15));
  CHECK(quantile({10, 20, 30, 40}, 0.0) == 10.0);
  CHECK(quantile({10, 20, 30, 40}, 1.0) == 40.0);
  CHECK(quantile({7}, 0.3) == 7.0);
  CHECK_THROWS_AS(quantile({}, 0.5), ContractViolation);
}

TEST_CASE("throughput, waiting time and group accounting on a hand-built outcome") {
  const RoadNetwork net = build_map(MapName::onramp);
  const auto routes = routes_for(net);
  EpisodeOutcome o;
  o.spec.map = MapName::onramp;
  o.spec.duration = 1200.0;
  o.spec.nominal_demand_vph = 3000.0;
  for (int i = 0; i < 100; ++i) o.arrivals.push_back(arrival(i, 10.0 * i));
  for (int i = 0; i < 80; ++i) o.releases.push_back(release(i, 60.0 + i));
  for (int i = 80; i < 90; ++i) o.on_map.push_back(i);
  for (int i = 90; i < 100; ++i) o.never_entered.push_back(i);
  CHECK(episode_throughput(o) == doctest::Approx(80.0).epsilon(1e-15));
  const auto w = waiting_times(o);
  REQUIRE(w.size() == 20);
  double expect = 0.0;
  for (int i = 80; i < 100; ++i) expect += 1200.0 - 10.0 * i;
  const EvalReport r = compute_metrics({o}, routes, "nc");
  REQUIRE(r.throughput);
  CHECK(*r.throughput == doctest::Approx(80.0));
  CHECK(r.mean_wait == doctest::Approx(expect / 20.0).epsilon(1e-12));
  const std::string g = routes[0].group + "-HV";
  REQUIRE(r.groups.count(g));
  CHECK(r.groups.at(g).released == 80);
  CHECK(r.groups.at(g).scheduled == 100);
  CHECK(r.groups.at(g).median == doctest::Approx(99.5));
  CHECK(r.groups.at(g).q25 <= r.groups.at(g).median);
  CHECK(r.groups.at(g).median <= r.groups.at(g).q75);

  // Everything released: empty waiting set averages to 0.
  EpisodeOutcome all = o;
  all.on_map.clear();
  all.never_entered.clear();
  for (int i = 80; i < 100; ++i) all.releases.push_back(release(i, 70.0));
  CHECK(compute_metrics({all}, routes, "nc").mean_wait == 0.0);

  // Nothing scheduled: throughput is absent and the table shows a placeholder.
  EpisodeOutcome none;
  none.spec = o.spec;
  const EvalReport empty = compute_metrics({none}, routes, "nc");
  CHECK(!empty.throughput);
  CHECK_THROWS_AS(episode_throughput(none), ContractViolation);

  const EvalReport back = report_from_json(report_to_json(r));
  CHECK(report_to_json(back) == report_to_json(r));
}

TEST_CASE("ALINEA law: zero error, negative feedback, recursion, clamps") {
  AlineaConfig c;
  CHECK(alinea_update(1500.0, c.target_occupancy, c) == 1500.0);
  double rate = 3000.0, prev = rate;
  for (int k = 0; k < 200; ++k) {
    rate = alinea_update(rate, c.target_occupancy + 5.0, c);
    CHECK(rate <= prev);
    prev = rate;
  }
  CHECK(rate == c.min_rate);

  Rng rng(1);
  std::vector<double> occ;
  for (int k = 0; k < 50; ++k) occ.push_back(rng.uniform(0.0, 30.0));
  double r = 2000.0, oracle = 2000.0;
  for (double o : occ) {
    const double next = alinea_update(r, o, c);
    double raw = oracle + 70.0 * (14.0 - o);
    oracle = raw < 200.0 ? 200.0 : raw > 4000.0 ? 4000.0 : raw;
    CHECK(std::abs(next - oracle) < 1e-9);
    if (next > c.min_rate && next < c.max_rate && r > c.min_rate && r < c.max_rate) {
      const double change = next - r;
      CHECK((change > 0) == (c.target_occupancy - o > 0));
    }
    r = next;
  }

  const RoadNetwork onramp = build_map(MapName::onramp);
  GenerationConfig g;
  g.duration = 60.0;
  const EpisodeSpec spec = generate_episode(onramp, routes_for(onramp), g, 1);
  CHECK_THROWS_AS(run_alinea(onramp, routes_for(onramp), spec, c), ConfigError);
}

TEST_CASE("ALINEA on lanedrop: rates stay in bounds, one per period, conservation holds") {
  const RoadNetwork net = build_map(MapName::lanedrop);
  const auto routes = routes_for(net);
  GenerationConfig g;
  g.demand_vph = 3000.0;
  g.duration = 300.0;
  const EpisodeSpec spec = generate_episode(net, routes, g, 4);
  AlineaConfig c;
  std::vector<double> trace;
  const EpisodeOutcome o = run_alinea(net, routes, spec, c, {}, &trace);
  CHECK(trace.size() == 10);
  for (double x : trace) CHECK((x >= c.min_rate && x <= c.max_rate));
  CHECK(o.releases.size() + o.on_map.size() + o.never_entered.size() == o.arrivals.size());
}

TEST_CASE("NC: sub-critical lanedrop releases nearly everything, accounting is exact") {
  const RoadNetwork net = build_map(MapName::lanedrop);
  const auto routes = routes_for(net);
  GenerationConfig g;
  g.demand_vph = 1500.0;
  g.penetration = 0.2;
  std::vector<EpisodeOutcome> outs;
  for (std::uint64_t s = 0; s < 3; ++s) {
    outs.push_back(run_nc(net, routes, generate_episode(net, routes, g, 100 + s)));
    const auto& o = outs.back();
    CHECK(o.releases.size() + o.on_map.size() + o.never_entered.size() == o.arrivals.size());
    // No congestion loss: whatever is missing was scheduled within the last two minutes.
    std::set<int> released;
    for (const auto& rel : o.releases) released.insert(rel.id);
    for (const auto& a : o.arrivals)
      if (a.time < o.spec.duration - 120.0) CHECK(released.count(a.id) == 1);
  }
  const EvalReport r = compute_metrics(outs, routes, "nc");
  REQUIRE(r.throughput);
  CHECK(*r.throughput >= 95.0);
  CHECK(*r.throughput <= 100.0);
  CHECK(r.seeds == std::vector<std::uint64_t>{100, 101, 102});

  GenerationConfig zero = g;
  zero.demand_vph = 0.0;
  zero.duration = 60.0;
  const EpisodeOutcome z = run_nc(net, routes, generate_episode(net, routes, zero, 1));
  CHECK(z.arrivals.empty());
  CHECK(!compute_metrics({z}, routes, "nc").throughput);
}

TEST_CASE("a policy that always commands full speed is indistinguishable from NC") {
  const RoadNetwork net = build_map(MapName::onramp);
  const auto routes = routes_for(net);
  PolicyConfig pc;
  pc.width = 8;
  pc.ff_width = 12;
  ParameterStore s;
  init_parameters(s, pc, 3);
  for (auto& v : s.entry(static_cast<std::size_t>(s.index_of("pi.head.w"))).value.data) v = 0.0;
  auto& bias = s.entry(static_cast<std::size_t>(s.index_of("pi.head.b"))).value.data;
  std::fill(bias.begin(), bias.end(), 0.0);
  bias[kActionCount - 1] = 5.0;
  const auto snap = ParamSnapshot<float>::from(s);
  GenerationConfig g;
  g.demand_vph = 4000.0;
  g.penetration = 0.2;
  g.duration = 400.0;
  std::vector<double> pol, nc;
  for (std::uint64_t e = 0; e < 20; ++e) {
    const EpisodeSpec spec = generate_episode(net, routes, g, 5000 + e);
    const EpisodeOutcome a = run_policy(net, routes, spec, snap, pc, EnvConfig{}, ActMode::greedy, 0);
    pol.push_back(episode_throughput(a));
    nc.push_back(episode_throughput(run_nc(net, routes, spec)));
    if (e == 0) {
      const EpisodeOutcome b = run_policy(net, routes, spec, snap, pc, EnvConfig{}, ActMode::greedy, 0);
      CHECK(report_to_json(compute_metrics({a}, routes, "p")) == report_to_json(compute_metrics({b}, routes, "p")));
    }
  }
  const PairedDifference d = paired_difference(pol, nc);
  CHECK(d.lower <= 0.0);
  CHECK(d.upper >= 0.0);
}

TEST_CASE("paired difference and rank correlation oracles") {
  const PairedDifference d = paired_difference({3, 5, 7, 9}, {1, 2, 3, 4});
  // differences 2,3,4,5: mean 3.5, sd sqrt(5/3), t(0.975, 3) = 3.182446305284263
  const double half = 3.182446305284263 * std::sqrt(5.0 / 3.0) / 2.0;
  CHECK(d.mean == doctest::Approx(3.5).epsilon(1e-14));
  CHECK(d.lower == doctest::Approx(3.5 - half).epsilon(1e-12));
  CHECK(d.upper == doctest::Approx(3.5 + half).epsilon(1e-12));
  CHECK(d.n == 4);
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  // Ties take average ranks: x ranks 1,2.5,2.5,4 ; y ranks 1,2,3,4 -> Pearson of ranks.
  const double rx[] = {1, 2.5, 2.5, 4}, ry[] = {1, 2, 3, 4};
  double mx = 2.5, my = 2.5, sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < 4; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  CHECK(spearman({1, 5, 5, 9}, {1, 2, 3, 4}) == doctest::Approx(sxy / std::sqrt(sxx * syy)).epsilon(1e-14));
  CHECK_THROWS_AS(paired_difference({1}, {2}), ContractViolation);
}

TEST_CASE("emit_tables: placeholders, stable columns, byte-identical re-emission") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "coopdrive_test_tables";
  fs::remove_all(dir);
  EvalReport a;
  a.map = "onramp";
  a.demand = 3000;
  a.controller = "nc";
  a.throughput = 97.25;
  a.mean_wait = 12.0;
  a.groups["ramp-hv"] = {90.0, 40.0, 50.0, 60.0, 9, 10};
  EvalReport b = a;
  b.demand = 4000;
  b.throughput = 80.0;
  EvalReport c = a;
  c.controller = "dvc";
  c.throughput = 99.0;
  emit_tables({a, b, c}, dir.string());
  const std::string tp = slurp(dir / "throughput_onramp.csv");
  CHECK(tp == "controller,3000,4000\ndvc,99.0,-\nnc,97.2,80.0\n");
  CHECK(slurp(dir / "twait_onramp.csv") == "controller,3000,4000\ndvc,12.0,-\nnc,12.0,12.0\n");
  const std::string groups = slurp(dir / "groups_onramp.csv");
  CHECK(groups.find("nc,0.00,4000,ramp-hv,90.00,40.00,50.00,60.00,9,10") != std::string::npos);
  emit_tables({a, b, c}, dir.string());
  CHECK(slurp(dir / "throughput_onramp.csv") == tp);
  CHECK(slurp(dir / "groups_onramp.csv") == groups);
  fs::remove_all(dir);
}

TEST_CASE("demand levels per map") {
  CHECK(demand_levels(MapName::onramp) == std::vector<double>{3000, 3500, 4000, 4500});
  CHECK(demand_levels(MapName::lanedrop) == std::vector<double>{1500, 2000, 2500, 3000});
  CHECK(demand_levels(MapName::fourway) == std::vector<double>{1000, 1500, 2000, 2500});
  CHECK(demand_levels(MapName::threeway) == demand_levels(MapName::fourway));
}

TEST_CASE("a loaded policy stays usable after being moved or copied") {
  namespace fs = std::filesystem;
  PolicyConfig pc;
  pc.width = 8;
  pc.ff_width = 12;
  ParameterStore s;
  init_parameters(s, pc, 2);
  const fs::path path = fs::temp_directory_path() / "coopdrive_test_loaded.ckpt";
  save_checkpoint(path.string(), s, {{"policy", policy_config_to_json(pc)}, {"map", "onramp"}}, false);
  std::optional<LoadedPolicy> held;
  held = load_policy(path.string());
  const LoadedPolicy copy = *held;
  const RoadNetwork net = build_map(MapName::onramp);
  const auto routes = routes_for(net);
  GenerationConfig g;
  g.duration = 30.0;
  g.penetration = 0.5;
  const EpisodeSpec spec = generate_episode(net, routes, g, 3);
  const auto a = run_policy(net, routes, spec, held->snapshot, held->config, EnvConfig{}, ActMode::greedy, 0);
  const auto b = run_policy(net, routes, spec, copy.snapshot, copy.config, EnvConfig{}, ActMode::greedy, 0);
  CHECK(a.releases.size() == b.releases.size());
  CHECK(held->snapshot.store == &held->store);
  CHECK(copy.snapshot.store == &copy.store);
  fs::remove(path);
}
