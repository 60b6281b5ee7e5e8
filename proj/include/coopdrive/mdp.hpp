#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <set>
#include <vector>

#include "coopdrive/microsim.hpp"

namespace coopdrive {

constexpr int kFeatureDim = 8;
constexpr int kActionDim = kActionCount;
constexpr double kTravelTimeScale = 300.0;

/// Row-major feature matrix with an existence mask.
struct StateEncoding {
  int capacity = 0;
  std::vector<std::uint8_t> mask;           // C
  std::vector<double> features;             // C x kFeatureDim
  std::vector<std::optional<int>> vehicle;  // slot -> vehicle id

  const double* row(int slot) const { return features.data() + static_cast<std::size_t>(slot) * kFeatureDim; }
  double* row(int slot) { return features.data() + static_cast<std::size_t>(slot) * kFeatureDim; }
  int occupied() const;
};

struct ObservationEncoding {
  int max_active = 0;
  int capacity = 0;
  std::vector<std::uint8_t> av_mask;      // N
  std::vector<std::uint8_t> obs_mask;     // N x C
  std::vector<std::uint8_t> action_mask;  // N x kActionDim
  std::vector<std::optional<int>> state_slot;

  bool observes(int i, int j) const {
    return obs_mask[static_cast<std::size_t>(i) * static_cast<std::size_t>(capacity) + static_cast<std::size_t>(j)] != 0;
  }
  bool allowed(int i, int a) const { return action_mask[static_cast<std::size_t>(i) * kActionDim + static_cast<std::size_t>(a)] != 0; }
  int active_count() const;
};

struct RewardParams {
  double eta_a = 1.0;
  double eta_b = -0.05;
  double travel_time_scale = kTravelTimeScale;
};

double compute_reward(const std::vector<double>& travel_times, const RewardParams& params);

/// Upper bound on simultaneous vehicles: every lane holds at most one front bumper per vehicle length, plus one.
int state_capacity(const RoadNetwork& network, double vehicle_length);

/// Assigns each on-map vehicle the lowest free slot at its first sighting and keeps it until it leaves.
class SlotTable {
 public:
  explicit SlotTable(int capacity) : capacity_(capacity) {}

  /// Updates assignments for the current vehicle set. Throws CapacityError when slots run out.
  void sync(const std::map<int, VehicleRecord>& vehicles);
  std::optional<int> slot_of(int id) const;
  int capacity() const { return capacity_; }
  const std::map<int, int>& assignments() const { return slots_; }

 private:
  int capacity_;
  std::map<int, int> slots_;
  std::set<int> free_;
  int next_unused_ = 0;
};

StateEncoding encode_state(const Simulation& sim, const SlotTable& slots);

/// AVs inside the bottleneck region, nearest to the anchor first (ties by id), at most `limit`.
std::vector<int> select_activated(const Simulation& sim, int limit);

ObservationEncoding encode_observation(const StateEncoding& state, const Simulation& sim, const std::vector<int>& activated,
                                       double sensing_range, int max_active);

/// Binary layout, little-endian: magic "CDENC", u8 version, i32 C, i32 N, i32 d_v, i32 d_a, then
/// M_s (C bytes), F_s (C*d_v float64), M_AV (N bytes), M_obs (N*C bytes), M_a (N*d_a bytes),
/// AV-to-state slot map (N i32, -1 when empty).
constexpr std::uint8_t kEncodingVersion = 1;
void write_encoding(std::ostream& out, const StateEncoding& s, const ObservationEncoding& o);
void read_encoding(std::istream& in, StateEncoding& s, ObservationEncoding& o);

struct EnvConfig {
  int max_active = 16;
  double sensing_range = 100.0;
  RewardParams reward;
  SimConfig sim;
};

/// One simulation plus its encoder, stepped at the decision interval.
class DrivingEnv {
 public:
  DrivingEnv(const RoadNetwork& network, const std::vector<RouteSpec>& routes, EnvConfig config);

  void reset(const EpisodeSpec& spec);
  bool done() const { return sim_->done(); }

  /// Re-selects activated AVs and encodes the current state.
  void observe();
  const StateEncoding& state() const { return state_; }
  const ObservationEncoding& observation() const { return obs_; }
  const std::vector<int>& activated() const { return activated_; }

  /// Applies one action per activated AV (in `activated()` order) and advances one decision interval.
  double step(const std::vector<int>& actions);

  Simulation& sim() { return *sim_; }
  const Simulation& sim() const { return *sim_; }
  const EnvConfig& config() const { return config_; }

 private:
  const RoadNetwork* net_;
  const std::vector<RouteSpec>* routes_;
  EnvConfig config_;
  std::optional<Simulation> sim_;
  SlotTable slots_;
  StateEncoding state_;
  ObservationEncoding obs_;
  std::vector<int> activated_;
};

}  // namespace coopdrive
