#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "coopdrive/errors.hpp"
#include "coopdrive/policy.hpp"
#include "support.hpp"

using namespace coopdrive;
using namespace coopdrive::testing;

namespace {

PolicyConfig small_config(Variant v) {
  PolicyConfig c;
  c.variant = v;
  c.width = 8;
  c.ff_width = 12;
  return c;
}

struct Net {
  PolicyConfig config;
  ParameterStore store;
  ParamSnapshot<double> snap;
  Net(PolicyConfig c, std::uint64_t seed) : config(c) {
    init_parameters(store, config, seed);
    // Larger head weights so logits carry real signal in these tests.
    auto& head = store.entry(static_cast<std::size_t>(store.index_of("pi.head.w"))).value;
    Rng rng(seed);
    for (auto& x : head.data) x = rng.uniform(-1.0, 1.0);
    snap = ParamSnapshot<double>::from(store);
  }
};

std::vector<std::vector<double>> logits(const Net& n, const Instance& in) {
  return policy_logits(n.snap, n.config, in.state, in.obs);
}

double value(const Net& n, const Instance& in) { return critic_value(n.snap, n.config, in.state, in.obs); }

}  // namespace

TEST_CASE("no activated AVs: empty output, zero log-prob and entropy") {
  Net n(small_config(Variant::dvc), 1);
  Rng rng(1);
  Instance in = random_instance(6, 3, rng);
  std::fill(in.obs.av_mask.begin(), in.obs.av_mask.end(), 0);
  std::fill(in.obs.obs_mask.begin(), in.obs.obs_mask.end(), 0);
  std::fill(in.obs.action_mask.begin(), in.obs.action_mask.end(), 0);
  const CompactSample s = compact(in.state, in.obs);
  const ActResult r = act(n.snap, n.config, s, rng, ActMode::sample);
  CHECK(r.actions.empty());
  CHECK(r.log_prob == 0.0);
  CHECK(r.entropy == 0.0);
  for (const auto& row : logits(n, in))
    for (double x : row) CHECK(x == 0.0);
}

TEST_CASE("compact rejects inconsistent masks") {
  Rng rng(2);
  Instance in = random_instance(6, 2, rng);
  Instance bad = in;
  bad.obs.obs_mask[static_cast<std::size_t>(*bad.obs.state_slot[0])] = 0;
  CHECK_THROWS_AS(compact(bad.state, bad.obs), ContractViolation);
  bad = in;
  for (int a = 0; a < kActionDim; ++a) bad.obs.action_mask[static_cast<std::size_t>(a)] = 0;
  CHECK_THROWS_AS(compact(bad.state, bad.obs), ContractViolation);
}

TEST_CASE("DVC agents that see only themselves match single-vehicle passes exactly") {
  Net n(small_config(Variant::dvc), 3);
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    Instance in = random_instance(7, 2, rng, 0.0, 2);
    const auto full = logits(n, in);
    for (int i = 0; i < 2; ++i) {
      const int self = *in.obs.state_slot[static_cast<std::size_t>(i)];
      Instance one;
      one.state.capacity = 1;
      one.state.mask = {1};
      one.state.features.assign(in.state.row(self), in.state.row(self) + kFeatureDim);
      one.state.vehicle = {in.state.vehicle[static_cast<std::size_t>(self)]};
      one.obs.max_active = 1;
      one.obs.capacity = 1;
      one.obs.av_mask = {1};
      one.obs.obs_mask = {1};
      one.obs.state_slot = {0};
      one.obs.action_mask.assign(in.obs.action_mask.begin() + i * kActionDim, in.obs.action_mask.begin() + (i + 1) * kActionDim);
      CHECK(logits(n, one)[0] == full[static_cast<std::size_t>(i)]);
    }
  }
}

TEST_CASE("masked actions have probability exactly zero") {
  Net n(small_config(Variant::cvc), 4);
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Instance in = random_instance(8, 3, rng);
    const CompactSample s = compact(in.state, in.obs);
    const ActResult r = act(n.snap, n.config, s, rng, ActMode::sample);
    for (int i = 0; i < s.active(); ++i)
      for (int a = 0; a < kActionDim; ++a)
        if (!s.action_mask[static_cast<std::size_t>(i * kActionDim + a)]) {
          CHECK(r.probs[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] == 0.0);
          CHECK(r.actions[static_cast<std::size_t>(i)] != a);
        }
  }
}

TEST_CASE("critic: empty state gives the head bias, slot permutations leave V unchanged") {
  for (Variant v : {Variant::dvc, Variant::cvc}) {
    Net n(small_config(v), 5);
    auto& bias = n.store.entry(static_cast<std::size_t>(n.store.index_of("v.head.b"))).value;
    bias.data[0] = 0.37;
    n.snap = ParamSnapshot<double>::from(n.store);
    Instance empty;
    empty.state.capacity = 4;
    empty.state.mask.assign(4, 0);
    empty.state.features.assign(4 * kFeatureDim, 0.0);
    empty.state.vehicle.assign(4, std::nullopt);
    empty.obs.max_active = 2;
    empty.obs.capacity = 4;
    empty.obs.av_mask.assign(2, 0);
    empty.obs.obs_mask.assign(8, 0);
    empty.obs.action_mask.assign(2 * kActionDim, 0);
    empty.obs.state_slot.assign(2, std::nullopt);
    CHECK(value(n, empty) == 0.37);

    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      const Instance in = random_instance(8, 3, rng);
      const Instance p = permute_slots(in, random_permutation(8, rng));
      CHECK(std::abs(value(n, in) - value(n, p)) < 1e-9);
    }
  }
}

TEST_CASE("policy logits are permutation equivariant") {
  for (Variant v : {Variant::dvc, Variant::cvc}) {
    Net n(small_config(v), 6);
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
      const Instance in = random_instance(8, 4, rng);
      const auto base = logits(n, in);
      const auto slot_perm = permute_slots(in, random_permutation(8, rng));
      const auto order = random_permutation(4, rng);
      const auto both = permute_agents(slot_perm, order);
      const auto got = logits(n, both);
      for (int i = 0; i < 4; ++i)
        for (int a = 0; a < kActionDim; ++a)
          CHECK(std::abs(got[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])][static_cast<std::size_t>(a)] -
                         base[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)]) < 1e-9);
    }
  }
}

TEST_CASE("the critic responds to an added vehicle") {
  Net n(small_config(Variant::dvc), 7);
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    Instance in = random_instance(8, 2, rng);
    int free_slot = -1;
    for (int j = 0; j < 8; ++j)
      if (!in.state.mask[static_cast<std::size_t>(j)]) free_slot = j;
    if (free_slot < 0) continue;
    const double before = value(n, in);
    in.state.mask[static_cast<std::size_t>(free_slot)] = 1;
    random_row(in.state.row(free_slot), rng, -1.0);
    CHECK(std::abs(value(n, in) - before) > 0.0);
  }
}

TEST_CASE("decentralization: unobserved rows never reach DVC logits, but do reach CVC") {
  Net dvc(small_config(Variant::dvc), 8);
  Net cvc(small_config(Variant::cvc), 8);
  Rng rng(8);
  int cvc_changed = 0, cases = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const Instance in = random_instance(10, 3, rng, 0.3, 2);
    for (int j = 0; j < 10; ++j) {
      if (!in.state.mask[static_cast<std::size_t>(j)]) continue;
      bool hidden_from_all = true;
      for (int i = 0; i < 3; ++i) hidden_from_all = hidden_from_all && !in.obs.observes(i, j);
      if (!hidden_from_all) continue;
      Instance p = in;
      p.state.row(j)[0] += 0.25;
      p.state.row(j)[4] += 0.5;
      CHECK(logits(dvc, p) == logits(dvc, in));
      ++cases;
      cvc_changed += logits(cvc, p) != logits(cvc, in);
    }
  }
  REQUIRE(cases > 10);
  CHECK(cvc_changed > 0);
}

TEST_CASE("DVC agents do not leak into each other") {
  Net n(small_config(Variant::dvc), 9);
  Rng rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    const Instance in = random_instance(10, 3, rng, 0.3, 2);
    const auto base = logits(n, in);
    for (int k = 0; k < 3; ++k) {
      if (!in.obs.av_mask[static_cast<std::size_t>(k)]) continue;
      const int slot = *in.obs.state_slot[static_cast<std::size_t>(k)];
      Instance p = in;
      p.state.row(slot)[4] = 1.0 - p.state.row(slot)[4];
      p.state.row(slot)[7] += 0.3;
      const auto got = logits(n, p);
      for (int i = 0; i < 3; ++i)
        if (i != k && !in.obs.observes(i, slot)) CHECK(got[static_cast<std::size_t>(i)] == base[static_cast<std::size_t>(i)]);
    }
  }
}

TEST_CASE("act: greedy determinism, degenerate sampling and joint log-prob") {
  Net n(small_config(Variant::dvc), 10);
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const Instance in = random_instance(8, 4, rng);
    const CompactSample s = compact(in.state, in.obs);
    Rng r1(1), r2(2);
    const ActResult g1 = act(n.snap, n.config, s, r1, ActMode::greedy);
    const ActResult g2 = act(n.snap, n.config, s, r2, ActMode::greedy);
    CHECK(g1.actions == g2.actions);
    CHECK(g1.log_prob == g2.log_prob);

    const ActResult smp = act(n.snap, n.config, s, rng, ActMode::sample);
    double joint = 0.0, ent = 0.0;
    for (int i = 0; i < s.active(); ++i) {
      const auto& p = smp.probs[static_cast<std::size_t>(i)];
      joint += std::log(p[static_cast<std::size_t>(smp.actions[static_cast<std::size_t>(i)])]);
      ent += categorical_entropy(p);
    }
    CHECK(smp.log_prob == doctest::Approx(joint).epsilon(1e-12));
    CHECK(smp.entropy == doctest::Approx(ent).epsilon(1e-12));
    CHECK(smp.value == g1.value);

    // One allowed action per agent: zero entropy, sample equals greedy.
    Instance one = in;
    for (int i = 0; i < 4; ++i)
      if (one.obs.av_mask[static_cast<std::size_t>(i)])
        for (int a = 0; a < kActionDim; ++a) one.obs.action_mask[static_cast<std::size_t>(i * kActionDim + a)] = a == 2 + i % 4;
    const CompactSample s1 = compact(one.state, one.obs);
    const ActResult a = act(n.snap, n.config, s1, rng, ActMode::sample);
    const ActResult b = act(n.snap, n.config, s1, rng, ActMode::greedy);
    CHECK(a.actions == b.actions);
    CHECK(a.entropy == 0.0);
    CHECK(a.log_prob == 0.0);
  }
}

TEST_CASE("float and double forward passes agree") {
  Net n(small_config(Variant::cvc), 11);
  const ParamSnapshot<float> f = ParamSnapshot<float>::from(n.store);
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const Instance in = random_instance(8, 3, rng);
    const auto a = policy_logits(n.snap, n.config, in.state, in.obs);
    const auto b = policy_logits(f, n.config, in.state, in.obs);
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t k = 0; k < a[i].size(); ++k) CHECK(std::abs(a[i][k] - b[i][k]) < 1e-4);
    CHECK(std::abs(critic_value(n.snap, n.config, in.state, in.obs) - critic_value(f, n.config, in.state, in.obs)) < 1e-4);
  }
}

TEST_CASE("config JSON round trip and validation") {
  PolicyConfig c = small_config(Variant::cvc);
  c.shared_embedding = false;
  const PolicyConfig back = policy_config_from_json(policy_config_to_json(c));
  CHECK(back.variant == Variant::cvc);
  CHECK(back.width == 8);
  CHECK(!back.shared_embedding);
  CHECK_THROWS_AS(policy_config_from_json({{"layers", 3}}), ConfigError);
  CHECK_THROWS_AS(policy_config_from_json({{"variant", "xvc"}}), ConfigError);
  ParameterStore s;
  init_parameters(s, c, 1);
  CHECK(s.contains("v.embed.l1.w"));
  CHECK(s.contains("pi.l1.wq.w"));
}
