#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <vector>

#include "coopdrive/episode.hpp"
#include "coopdrive/roadnet.hpp"

namespace coopdrive {

struct DriverProfile {
  double max_accel = 4.5;
  double max_decel = 2.6;
  double desired_headway = 1.5;
  double min_gap = 2.5;
  double assertiveness = 1.0;
  double speed_gain_eagerness = 1.0;
};

DriverProfile default_profile();
DriverProfile conservative_profile();

/// Intelligent Driver Model acceleration for speed v towards free speed v0, with an optional leader
/// at bumper gap `gap` moving at `leader_speed`. Clamped to [-max_decel, max_accel].
double idm_accel(const DriverProfile& p, double v, double v0, std::optional<double> gap, double leader_speed);

/// Gap acceptance for a lane change: the front and rear gaps on the target lane must exceed the
/// kinematic requirement divided by the driver's assertiveness.
struct GapRequirement {
  double front = 0.0;
  double rear = 0.0;
};
GapRequirement required_gaps(const DriverProfile& self, double v, std::optional<double> leader_speed,
                             std::optional<double> follower_speed, double lc_headway, double lc_decel);

enum : int { kActionLeft = 0, kActionRight = 1, kActionSpeed0 = 2, kActionCount = 6 };
constexpr double kSpeedFractions[4] = {0.0, 0.33, 0.66, 1.0};

struct LaneChangeIntent {
  int direction = 0;  // +1 left, -1 right
  double deadline = 0.0;
};

struct ZoneClaim {
  int zone = 0;
  int lane = 0;
  double odometer_end = 0.0;
};

struct VehicleRecord {
  int id = 0;
  Category category = Category::hv;
  bool activated = false;
  int lane = 0;
  double pos = 0.0;  // front bumper, metres from lane start
  double speed = 0.0;
  int route = 0;
  int route_index = 0;  // index of the current lane's edge in the route
  int turn_signal = 0;  // -1 right, 0 none, +1 left
  DriverProfile profile;
  double scheduled_entry = 0.0;
  double entry_time = 0.0;
  std::optional<LaneChangeIntent> intent;
  std::optional<double> commanded_speed;
  double length = 5.0;

  double odometer = 0.0;
  double accel = 0.0;
  double lane_change_ready = 0.0;  // earliest time of the next lane change
  int prev_lane = -1;
  int junction_grant = -1;
  std::vector<ZoneClaim> claims;
  std::optional<double> head_since;
};

struct ReleaseRecord {
  int id = 0;
  Category category = Category::hv;
  int route = 0;
  std::string group;
  double scheduled_entry = 0.0;
  double entry_time = 0.0;
  double exit_time = 0.0;
  double travel_time = 0.0;
};

struct SimConfig {
  double sim_step = 0.5;
  double decision_interval = 1.0;
  double vehicle_length = 5.0;
  DriverProfile hv_profile = default_profile();
  double lookahead = 250.0;
  double merge_horizon = 100.0;  // distance from which vehicles zip with the other merging branch
  double intent_duration = 5.0;

  double lc_headway = 0.5;    // s of time gap demanded in gap acceptance
  double lc_decel = 4.0;      // braking the new follower may be asked for
  double mobil_politeness = 0.3;
  double mobil_threshold = 0.2;

  double stop_brake_fraction = 0.8;  // share of max_decel at which a vehicle starts braking for a stop line
  double commit_margin = 1.0;        // s of separation required from higher-order approaching vehicles
  double clear_margin = 0.5;         // m the rear must pass the end of a claimed interval
};

/// Virtual insertion meter: a token bucket filled at `rate_vph`.
struct InsertionMeter {
  double rate_vph = 4000.0;
  double tokens = 1.0;
};

/// Vehicle placed directly on the network (scenario construction, tests).
struct Placement {
  int route = 0;
  int lane = 0;
  double pos = 0.0;
  double speed = 0.0;
  Category category = Category::hv;
  std::optional<DriverProfile> profile;
};

/// One traffic simulation. Owns its state; not thread-safe, but independent instances are.
class Simulation {
 public:
  Simulation(const RoadNetwork& network, const std::vector<RouteSpec>& routes, EpisodeSpec spec,
             SimConfig config = {});

  const RoadNetwork& network() const { return *net_; }
  const std::vector<RouteSpec>& routes() const { return *routes_; }
  const EpisodeSpec& spec() const { return spec_; }
  const SimConfig& config() const { return config_; }

  double now() const { return static_cast<double>(steps_) * config_.sim_step; }
  std::int64_t steps() const { return steps_; }
  bool done() const { return now() >= spec_.duration - 1e-9; }

  /// One physics step: spawn, lane changes, yielding, car-following, integration, release.
  void step();
  /// Runs physics steps for one decision interval; returns travel times of vehicles released in it.
  std::vector<double> advance_decision();

  const std::map<int, VehicleRecord>& vehicles() const { return vehicles_; }
  const VehicleRecord* find(int id) const;
  const std::vector<ReleaseRecord>& releases() const { return releases_; }
  const std::vector<ScheduledVehicle>& arrivals() const { return arrivals_; }

  /// Vehicles whose arrival time has passed but which have not entered, per entry edge, FIFO.
  const std::map<int, std::vector<ScheduledVehicle>>& spawn_queues() const { return queues_; }
  std::size_t queued_count() const;
  std::size_t arrived_count() const { return next_arrival_ + placed_; }

  /// Sets exactly the given AVs as activated. Deactivated AVs lose their commands.
  void set_activated(const std::set<int>& ids);
  /// Applies a high-level action to an activated AV.
  void command(int id, int action);

  void enable_meter(const InsertionMeter& meter) { meter_ = meter; }
  void set_meter_rate(double rate_vph);
  const std::optional<InsertionMeter>& meter() const { return meter_; }

  /// Share of `edge`'s lane length covered by vehicles, in percent.
  double occupancy_percent(int edge) const;

  int place_vehicle(const Placement& p);

  /// Writes one JSON line per vehicle after every physics step.
  void set_trajectory_stream(std::ostream* out) { trajectory_ = out; }

  Pose pose_of(const VehicleRecord& v) const;
  const DriverProfile& av_profile() const { return av_profile_; }

  /// Whether the lane at `lane` can continue along `route` from its edge at `route_index`.
  bool lane_continues(int lane, int route, int route_index) const;

 private:
  struct PathLane {
    int lane;
    double offset;  // distance from the vehicle's front to the lane start (negative for the current lane)
    int route_index;
  };
  struct Path {
    std::vector<PathLane> lanes;
    std::optional<double> dead_end;  // distance to the end of a lane without route continuation
  };
  struct Approach {
    int junction = -1;
    double entry = 0.0;  // distance to the stop line
    int rank = 0;
    std::vector<ZoneClaim> claims;  // odometer_end holds the distance to the interval end
    std::vector<double> claim_begin;
  };
  struct Obstacle {
    double gap;
    double speed;
  };

  Path walk(const VehicleRecord& v, double reach) const;
  Path walk_from(int lane, double pos, int route, int route_index, double reach) const;
  std::optional<Approach> approach_of(const VehicleRecord& v, const Path& path) const;
  std::optional<Obstacle> leader_on_path(const VehicleRecord& v, const Path& path) const;
  std::optional<Obstacle> merge_leader(const VehicleRecord& v, const Path& path) const;
  std::optional<Obstacle> merge_follower(const VehicleRecord& v, const Path& path) const;
  void refresh_paths();

  void rebuild_lane_index();
  void spawn_step();
  bool try_insert(const ScheduledVehicle& s, int edge, std::set<int>& used_lanes);
  void lane_change_step();
  void yield_step();
  void physics_step();
  void check_integrity() const;
  void write_trajectory();

  std::optional<int> lane_change_motive(VehicleRecord& v, bool& mandatory) const;
  bool gap_acceptable(const VehicleRecord& v, int target) const;
  bool mobil_gain(const VehicleRecord& v, int target) const;
  double free_speed(const VehicleRecord& v) const;
  double accel_with_leader(const VehicleRecord& v, std::optional<Obstacle> leader) const;
  std::optional<Obstacle> same_lane_leader(int lane, double pos, int route, int route_index, int exclude) const;
  /// Nearest vehicle behind `pos` on `lane` or feeding into it; returns (gap to it, its speed).
  std::optional<Obstacle> follower_on(int lane, double pos, double length, int exclude) const;
  const VehicleRecord* follower_vehicle(int lane, double pos, int exclude) const;

  const RoadNetwork* net_;
  const std::vector<RouteSpec>* routes_;
  EpisodeSpec spec_;
  SimConfig config_;
  DriverProfile av_profile_;

  std::vector<ScheduledVehicle> arrivals_;
  std::size_t next_arrival_ = 0;
  std::size_t placed_ = 0;
  int next_placed_id_ = 0;
  std::map<int, std::vector<ScheduledVehicle>> queues_;
  std::map<int, VehicleRecord> vehicles_;
  std::vector<std::vector<VehicleRecord*>> lane_index_;  // per lane, sorted by position ascending
  std::vector<ReleaseRecord> releases_;
  std::vector<double> released_this_decision_;
  std::int64_t steps_ = 0;
  std::optional<InsertionMeter> meter_;
  std::ostream* trajectory_ = nullptr;

  // Static lookups.
  std::vector<std::vector<std::pair<int, int>>> zones_on_lane_;  // (zone, member index)
  std::vector<bool> merge_lane_;                                 // lane with several non-junction predecessors

  struct MergeEntry {
    const VehicleRecord* vehicle;
    double distance;
    int branch;
  };
  std::map<int, Path> paths_;
  std::map<int, std::vector<MergeEntry>> merge_entries_;
};

}  // namespace coopdrive
