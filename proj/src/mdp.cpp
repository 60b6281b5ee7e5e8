#include "coopdrive/mdp.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

#include "coopdrive/errors.hpp"

namespace coopdrive {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

int StateEncoding::occupied() const {
  return static_cast<int>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

int ObservationEncoding::active_count() const {
  return static_cast<int>(std::count(av_mask.begin(), av_mask.end(), std::uint8_t{1}));
}

double compute_reward(const std::vector<double>& travel_times, const RewardParams& params) {
  require(params.travel_time_scale > 0.0, "travel time normalizer must be positive");
  double sum = 0.0;
  for (double t : travel_times) {
    require(t >= 0.0, "travel times are non-negative");
    sum += t / params.travel_time_scale;
  }
  return params.eta_b + params.eta_a * sum;
}

int state_capacity(const RoadNetwork& network, double vehicle_length) {
  int total = 0;
  for (const auto& l : network.lanes) total += static_cast<int>(std::ceil(l.length / vehicle_length)) + 1;
  return total;
}

void SlotTable::sync(const std::map<int, VehicleRecord>& vehicles) {
  for (auto it = slots_.begin(); it != slots_.end();) {
    if (vehicles.count(it->first) == 0) {
      free_.insert(it->second);
      it = slots_.erase(it);
    } else {
      ++it;
    }
  }
  for (const auto& [id, v] : vehicles) {
    if (slots_.count(id) != 0) continue;
    int slot;
    if (!free_.empty()) {
      slot = *free_.begin();
      free_.erase(free_.begin());
    } else if (next_unused_ < capacity_) {
      slot = next_unused_++;
    } else {
      throw CapacityError("more than " + std::to_string(capacity_) + " vehicles on the map");
    }
    slots_[id] = slot;
  }
}

std::optional<int> SlotTable::slot_of(int id) const {
  auto it = slots_.find(id);
  if (it == slots_.end()) return std::nullopt;
  return it->second;
}

StateEncoding encode_state(const Simulation& sim, const SlotTable& slots) {
  const RoadNetwork& net = sim.network();
  StateEncoding s;
  s.capacity = slots.capacity();
  s.mask.assign(static_cast<std::size_t>(s.capacity), 0);
  s.features.assign(static_cast<std::size_t>(s.capacity) * kFeatureDim, 0.0);
  s.vehicle.assign(static_cast<std::size_t>(s.capacity), std::nullopt);
  for (const auto& [id, v] : sim.vehicles()) {
    auto slot = slots.slot_of(id);
    if (!slot) throw CapacityError("vehicle " + std::to_string(id) + " has no slot");
    const Pose pose = sim.pose_of(v);
    double* f = s.row(*slot);
    f[0] = std::clamp(pose.position.x / net.width, 0.0, 1.0);
    f[1] = std::clamp(pose.position.y / net.height, 0.0, 1.0);
    f[2] = std::sin(pose.heading);
    f[3] = std::cos(pose.heading);
    f[4] = v.speed / net.lane(v.lane).speed_limit;
    f[5] = v.turn_signal;
    f[6] = v.category == Category::hv ? -1.0 : (v.activated ? 1.0 : 0.0);
    f[7] = v.category == Category::hv ? -1.0 : (sim.now() - v.entry_time) / kTravelTimeScale;
    s.mask[static_cast<std::size_t>(*slot)] = 1;
    s.vehicle[static_cast<std::size_t>(*slot)] = id;
  }
  return s;
}

std::vector<int> select_activated(const Simulation& sim, int limit) {
  const BottleneckZone& zone = sim.network().bottleneck;
  std::vector<std::pair<double, int>> inside;
  for (const auto& [id, v] : sim.vehicles()) {
    if (v.category != Category::av) continue;
    const Vec2 p = sim.pose_of(v).position;
    if (zone.region.contains(p)) inside.push_back({distance(p, zone.anchor), id});
  }
  std::sort(inside.begin(), inside.end());
  std::vector<int> out;
  for (std::size_t i = 0; i < inside.size() && static_cast<int>(i) < limit; ++i) out.push_back(inside[i].second);
  return out;
}

ObservationEncoding encode_observation(const StateEncoding& state, const Simulation& sim, const std::vector<int>& activated,
                                       double sensing_range, int max_active) {
  require(static_cast<int>(activated.size()) <= max_active, "more activated AVs than policy slots");
  const std::size_t C = static_cast<std::size_t>(state.capacity);
  ObservationEncoding o;
  o.max_active = max_active;
  o.capacity = state.capacity;
  o.av_mask.assign(static_cast<std::size_t>(max_active), 0);
  o.obs_mask.assign(static_cast<std::size_t>(max_active) * C, 0);
  o.action_mask.assign(static_cast<std::size_t>(max_active) * kActionDim, 0);
  o.state_slot.assign(static_cast<std::size_t>(max_active), std::nullopt);

  std::vector<std::pair<int, Vec2>> positions;
  for (std::size_t j = 0; j < C; ++j)
    if (state.mask[j]) positions.push_back({static_cast<int>(j), sim.pose_of(*sim.find(*state.vehicle[j])).position});

  for (std::size_t i = 0; i < activated.size(); ++i) {
    const VehicleRecord* v = sim.find(activated[i]);
    require(v != nullptr && v->activated, "activated AV must be on the map and flagged");
    int self = -1;
    for (std::size_t j = 0; j < C; ++j)
      if (state.mask[j] && *state.vehicle[j] == v->id) self = static_cast<int>(j);
    require(self >= 0, "activated AV must hold a state slot");
    o.av_mask[i] = 1;
    o.state_slot[i] = self;
    const Vec2 me = sim.pose_of(*v).position;
    for (const auto& [j, p] : positions)
      if (j == self || distance(me, p) <= sensing_range) o.obs_mask[i * C + static_cast<std::size_t>(j)] = 1;
    const Lane& lane = sim.network().lane(v->lane);
    std::uint8_t* a = &o.action_mask[i * kActionDim];
    a[kActionLeft] = lane.left.has_value();
    a[kActionRight] = lane.right.has_value();
    for (int k = kActionSpeed0; k < kActionDim; ++k) a[k] = 1;
  }
  return o;
}

namespace {

constexpr char kEncodingMagic[5] = {'C', 'D', 'E', 'N', 'C'};

template <class T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw ConfigError("truncated encoding record");
  return value;
}

void put_bytes(std::ostream& out, const std::vector<std::uint8_t>& bytes) {
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void get_bytes(std::istream& in, std::vector<std::uint8_t>& bytes, std::size_t n) {
  bytes.resize(n);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
  if (!in) throw ConfigError("truncated encoding record");
}

}  // namespace

void write_encoding(std::ostream& out, const StateEncoding& s, const ObservationEncoding& o) {
  out.write(kEncodingMagic, sizeof kEncodingMagic);
  put<std::uint8_t>(out, kEncodingVersion);
  put<std::int32_t>(out, s.capacity);
  put<std::int32_t>(out, o.max_active);
  put<std::int32_t>(out, kFeatureDim);
  put<std::int32_t>(out, kActionDim);
  put_bytes(out, s.mask);
  out.write(reinterpret_cast<const char*>(s.features.data()), static_cast<std::streamsize>(s.features.size() * sizeof(double)));
  put_bytes(out, o.av_mask);
  put_bytes(out, o.obs_mask);
  put_bytes(out, o.action_mask);
  for (const auto& slot : o.state_slot) put<std::int32_t>(out, slot.value_or(-1));
}

void read_encoding(std::istream& in, StateEncoding& s, ObservationEncoding& o) {
  char magic[5];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kEncodingMagic, sizeof magic) != 0) throw ConfigError("not an encoding record");
  if (get<std::uint8_t>(in) != kEncodingVersion) throw ConfigError("unsupported encoding version");
  const int C = get<std::int32_t>(in);
  const int N = get<std::int32_t>(in);
  if (get<std::int32_t>(in) != kFeatureDim || get<std::int32_t>(in) != kActionDim || C < 0 || N < 0)
    throw ConfigError("encoding dimensions do not match this build");
  s = StateEncoding{};
  s.capacity = C;
  get_bytes(in, s.mask, static_cast<std::size_t>(C));
  s.features.resize(static_cast<std::size_t>(C) * kFeatureDim);
  in.read(reinterpret_cast<char*>(s.features.data()), static_cast<std::streamsize>(s.features.size() * sizeof(double)));
  if (!in) throw ConfigError("truncated encoding record");
  s.vehicle.assign(static_cast<std::size_t>(C), std::nullopt);
  o = ObservationEncoding{};
  o.max_active = N;
  o.capacity = C;
  get_bytes(in, o.av_mask, static_cast<std::size_t>(N));
  get_bytes(in, o.obs_mask, static_cast<std::size_t>(N) * static_cast<std::size_t>(C));
  get_bytes(in, o.action_mask, static_cast<std::size_t>(N) * kActionDim);
  o.state_slot.assign(static_cast<std::size_t>(N), std::nullopt);
  for (int i = 0; i < N; ++i) {
    const auto slot = get<std::int32_t>(in);
    if (slot >= 0) o.state_slot[static_cast<std::size_t>(i)] = slot;
  }
}

DrivingEnv::DrivingEnv(const RoadNetwork& network, const std::vector<RouteSpec>& routes, EnvConfig config)
    : net_(&network),
      routes_(&routes),
      config_(config),
      slots_(state_capacity(network, config.sim.vehicle_length)) {
  require(config_.max_active > 0, "policy needs at least one AV slot");
  require(config_.sensing_range >= 0.0, "sensing range must be non-negative");
}

void DrivingEnv::reset(const EpisodeSpec& spec) {
  sim_.emplace(*net_, *routes_, spec, config_.sim);
  slots_ = SlotTable(state_capacity(*net_, config_.sim.vehicle_length));
  activated_.clear();
  observe();
}

void DrivingEnv::observe() {
  activated_ = select_activated(*sim_, config_.max_active);
  sim_->set_activated(std::set<int>(activated_.begin(), activated_.end()));
  slots_.sync(sim_->vehicles());
  state_ = encode_state(*sim_, slots_);
  obs_ = encode_observation(state_, *sim_, activated_, config_.sensing_range, config_.max_active);
}

double DrivingEnv::step(const std::vector<int>& actions) {
  require(actions.size() == activated_.size(), "one action per activated AV");
  for (std::size_t i = 0; i < actions.size(); ++i) {
    require(actions[i] >= 0 && actions[i] < kActionDim && obs_.allowed(static_cast<int>(i), actions[i]),
            "action violates the action mask");
    sim_->command(activated_[i], actions[i]);
  }
  const double r = compute_reward(sim_->advance_decision(), config_.reward);
  observe();
  return r;
}

}  // namespace coopdrive
