// Random encodings shared by unit and acceptance tests.
#pragma once

#include <cmath>
#include <numeric>
#include <vector>

#include "coopdrive/mdp.hpp"
#include "coopdrive/rng.hpp"

namespace coopdrive::testing {

struct Instance {
  StateEncoding state;
  ObservationEncoding obs;
};

inline void random_row(double* f, Rng& rng, double category) {
  const double h = rng.uniform(-3.14159, 3.14159);
  f[0] = rng.uniform();
  f[1] = rng.uniform();
  f[2] = std::sin(h);
  f[3] = std::cos(h);
  f[4] = rng.uniform();
  f[5] = static_cast<double>(static_cast<int>(rng.below(3)) - 1);
  f[6] = category;
  f[7] = category < 0.0 ? -1.0 : rng.uniform(0.0, 1.5);
}

/// C slots with random occupancy, up to N activated AVs, observation with the self bit set
/// and each other occupied slot observed with probability `p_obs`.
inline Instance random_instance(int C, int N, Rng& rng, double p_obs = 0.4, int min_active = 1) {
  Instance in;
  auto& s = in.state;
  s.capacity = C;
  s.mask.assign(static_cast<std::size_t>(C), 0);
  s.features.assign(static_cast<std::size_t>(C) * kFeatureDim, 0.0);
  s.vehicle.assign(static_cast<std::size_t>(C), std::nullopt);
  std::vector<int> occupied;
  for (int j = 0; j < C; ++j)
    if (rng.uniform() < 0.7) occupied.push_back(j);
  while (static_cast<int>(occupied.size()) < std::max(min_active, 1)) {
    const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(C)));
    if (std::find(occupied.begin(), occupied.end(), j) == occupied.end()) occupied.push_back(j);
  }
  std::sort(occupied.begin(), occupied.end());
  // Activated AVs are a random subset of the occupied slots.
  std::vector<int> pool = occupied;
  for (std::size_t k = pool.size(); k > 1; --k) std::swap(pool[k - 1], pool[rng.below(k)]);
  int active = min_active + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, N - min_active + 1))));
  active = std::min({active, N, static_cast<int>(pool.size())});
  std::vector<int> av_slots(pool.begin(), pool.begin() + active);
  for (int j : occupied) {
    s.mask[static_cast<std::size_t>(j)] = 1;
    s.vehicle[static_cast<std::size_t>(j)] = 100 + j;
    const bool is_active = std::find(av_slots.begin(), av_slots.end(), j) != av_slots.end();
    const double category = is_active ? 1.0 : (rng.uniform() < 0.5 ? -1.0 : 0.0);
    random_row(s.row(j), rng, category);
  }

  auto& o = in.obs;
  o.max_active = N;
  o.capacity = C;
  o.av_mask.assign(static_cast<std::size_t>(N), 0);
  o.obs_mask.assign(static_cast<std::size_t>(N) * static_cast<std::size_t>(C), 0);
  o.action_mask.assign(static_cast<std::size_t>(N) * kActionDim, 0);
  o.state_slot.assign(static_cast<std::size_t>(N), std::nullopt);
  for (int i = 0; i < active; ++i) {
    const int self = av_slots[static_cast<std::size_t>(i)];
    o.av_mask[static_cast<std::size_t>(i)] = 1;
    o.state_slot[static_cast<std::size_t>(i)] = self;
    for (int j : occupied)
      if (j == self || rng.uniform() < p_obs) o.obs_mask[static_cast<std::size_t>(i * C + j)] = 1;
    for (int a = 0; a < kActionDim; ++a) o.action_mask[static_cast<std::size_t>(i * kActionDim + a)] = a >= 2 || rng.uniform() < 0.6;
  }
  return in;
}

/// Moves slot j to perm[j]; masks and slot maps follow.
inline Instance permute_slots(const Instance& in, const std::vector<int>& perm) {
  Instance out = in;
  const int C = in.state.capacity;
  for (int j = 0; j < C; ++j) {
    const int t = perm[static_cast<std::size_t>(j)];
    out.state.mask[static_cast<std::size_t>(t)] = in.state.mask[static_cast<std::size_t>(j)];
    out.state.vehicle[static_cast<std::size_t>(t)] = in.state.vehicle[static_cast<std::size_t>(j)];
    std::copy(in.state.row(j), in.state.row(j) + kFeatureDim, out.state.row(t));
    for (int i = 0; i < in.obs.max_active; ++i)
      out.obs.obs_mask[static_cast<std::size_t>(i * C + t)] = in.obs.obs_mask[static_cast<std::size_t>(i * C + j)];
  }
  for (auto& slot : out.obs.state_slot)
    if (slot) slot = perm[static_cast<std::size_t>(*slot)];
  return out;
}

/// Reorders the activated AVs: row i moves to order[i].
inline Instance permute_agents(const Instance& in, const std::vector<int>& order) {
  Instance out = in;
  const int C = in.state.capacity;
  for (int i = 0; i < in.obs.max_active; ++i) {
    const int t = order[static_cast<std::size_t>(i)];
    out.obs.av_mask[static_cast<std::size_t>(t)] = in.obs.av_mask[static_cast<std::size_t>(i)];
    out.obs.state_slot[static_cast<std::size_t>(t)] = in.obs.state_slot[static_cast<std::size_t>(i)];
    for (int j = 0; j < C; ++j)
      out.obs.obs_mask[static_cast<std::size_t>(t * C + j)] = in.obs.obs_mask[static_cast<std::size_t>(i * C + j)];
    for (int a = 0; a < kActionDim; ++a)
      out.obs.action_mask[static_cast<std::size_t>(t * kActionDim + a)] = in.obs.action_mask[static_cast<std::size_t>(i * kActionDim + a)];
  }
  return out;
}

inline std::vector<int> random_permutation(int n, Rng& rng) {
  std::vector<int> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  for (std::size_t k = p.size(); k > 1; --k) std::swap(p[k - 1], p[rng.below(k)]);
  return p;
}

}  // namespace coopdrive::testing
