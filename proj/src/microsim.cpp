#include "coopdrive/microsim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "coopdrive/errors.hpp"

namespace coopdrive {

DriverProfile default_profile() { return {}; }

DriverProfile conservative_profile() {
  DriverProfile p;
  p.max_accel = 3.5;
  p.max_decel = 2.0;
  p.assertiveness = 0.1;
  p.speed_gain_eagerness = 0.0;
  return p;
}

double idm_accel(const DriverProfile& p, double v, double v0, std::optional<double> gap, double leader_speed) {
  double a;
  if (v0 <= 0.0) {
    a = -p.max_decel;
  } else {
    const double r = v / v0;
    a = p.max_accel * (1.0 - r * r * r * r);
  }
  if (gap) {
    const double s_star =
        p.min_gap + std::max(0.0, v * p.desired_headway + v * (v - leader_speed) / (2.0 * std::sqrt(p.max_accel * p.max_decel)));
    const double s = std::max(*gap, 1e-3);
    a -= p.max_accel * (s_star / s) * (s_star / s);
  }
  return std::clamp(a, -p.max_decel, p.max_accel);
}

GapRequirement required_gaps(const DriverProfile& self, double v, std::optional<double> leader_speed,
                             std::optional<double> follower_speed, double lc_headway, double lc_decel) {
  GapRequirement r;
  if (leader_speed) {
    const double dyn = v * lc_headway + (v * v - *leader_speed * *leader_speed) / (2.0 * lc_decel);
    r.front = (self.min_gap + std::max(0.0, dyn)) / self.assertiveness;
  }
  if (follower_speed) {
    const double vf = *follower_speed;
    const double dyn = vf * lc_headway + (vf * vf - v * v) / (2.0 * lc_decel);
    r.rear = (self.min_gap + std::max(0.0, dyn)) / self.assertiveness;
  }
  return r;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Minimum time to cover distance d from speed v accelerating at a up to vmax.
double time_to_cover(double d, double v, double a, double vmax) {
  if (d <= 0.0) return 0.0;
  vmax = std::max(vmax, v);
  const double t_acc = (vmax - v) / a;
  const double d_acc = 0.5 * (v + vmax) * t_acc;
  if (d <= d_acc) return (-v + std::sqrt(v * v + 2.0 * a * d)) / a;
  return t_acc + (d - d_acc) / std::max(vmax, 1e-6);
}

}  // namespace

Simulation::Simulation(const RoadNetwork& network, const std::vector<RouteSpec>& routes, EpisodeSpec spec,
                       SimConfig config)
    : net_(&network), routes_(&routes), spec_(std::move(spec)), config_(config) {
  if (config_.sim_step <= 0.0) throw ConfigError("sim_step must be positive");
  const double ratio = config_.decision_interval / config_.sim_step;
  if (std::abs(ratio - std::round(ratio)) > 1e-9 || ratio < 1.0)
    throw ConfigError("decision_interval must be a positive multiple of sim_step");
  if (spec_.map != network.map) throw ConfigError("episode map does not match the network");
  av_profile_ = spec_.av_profile == ProfileSet::conservative ? conservative_profile() : default_profile();
  arrivals_ = expand_arrivals(spec_);
  for (const auto& a : arrivals_)
    if (a.route < 0 || a.route >= static_cast<int>(routes.size())) throw ConfigError("episode references unknown route");
  next_placed_id_ = static_cast<int>(arrivals_.size());

  zones_on_lane_.assign(network.lanes.size(), {});
  for (const auto& z : network.zones)
    for (std::size_t m = 0; m < z.members.size(); ++m)
      zones_on_lane_[static_cast<std::size_t>(z.members[m].lane)].push_back({z.id, static_cast<int>(m)});
  merge_lane_.assign(network.lanes.size(), false);
  for (const auto& l : network.lanes) {
    if (l.predecessors.size() < 2 || network.edge(l.edge).junction >= 0) continue;
    bool plain = true;
    for (int p : l.predecessors) plain = plain && network.edge(network.lane(p).edge).junction < 0;
    merge_lane_[static_cast<std::size_t>(l.id)] = plain;
  }
  rebuild_lane_index();
}

const VehicleRecord* Simulation::find(int id) const {
  auto it = vehicles_.find(id);
  return it == vehicles_.end() ? nullptr : &it->second;
}

std::size_t Simulation::queued_count() const {
  std::size_t n = 0;
  for (const auto& [e, q] : queues_) n += q.size();
  return n;
}

bool Simulation::lane_continues(int lane, int route, int route_index) const {
  const auto& r = (*routes_)[static_cast<std::size_t>(route)];
  if (route_index + 1 >= static_cast<int>(r.edges.size())) return true;
  return net_->successor_on(lane, r.edges[static_cast<std::size_t>(route_index) + 1]).has_value();
}

Pose Simulation::pose_of(const VehicleRecord& v) const { return net_->lane(v.lane).shape.pose_at(v.pos); }

void Simulation::rebuild_lane_index() {
  lane_index_.assign(net_->lanes.size(), {});
  for (auto& [id, v] : vehicles_) lane_index_[static_cast<std::size_t>(v.lane)].push_back(&v);
  for (auto& list : lane_index_)
    std::sort(list.begin(), list.end(), [](const VehicleRecord* a, const VehicleRecord* b) {
      if (a->pos != b->pos) return a->pos < b->pos;
      return a->id < b->id;
    });
}

Simulation::Path Simulation::walk_from(int lane, double pos, int route, int route_index, double reach) const {
  const auto& r = (*routes_)[static_cast<std::size_t>(route)];
  Path path;
  path.lanes.push_back({lane, -pos, route_index});
  double end = net_->lane(lane).length - pos;
  while (end < reach) {
    const int ri = path.lanes.back().route_index;
    if (ri + 1 >= static_cast<int>(r.edges.size())) break;
    const auto next = net_->successor_on(path.lanes.back().lane, r.edges[static_cast<std::size_t>(ri) + 1]);
    if (!next) {
      path.dead_end = end;
      break;
    }
    path.lanes.push_back({*next, end, ri + 1});
    end += net_->lane(*next).length;
  }
  if (!path.dead_end && end >= reach) {
    // The dead end may lie just beyond the reach; only the current lane matters for that.
    const int ri = path.lanes.back().route_index;
    if (ri + 1 < static_cast<int>(r.edges.size()) &&
        !net_->successor_on(path.lanes.back().lane, r.edges[static_cast<std::size_t>(ri) + 1]) &&
        path.lanes.size() == 1)
      path.dead_end = end;
  }
  return path;
}

Simulation::Path Simulation::walk(const VehicleRecord& v, double reach) const {
  return walk_from(v.lane, v.pos, v.route, v.route_index, reach);
}

void Simulation::refresh_paths() {
  paths_.clear();
  merge_entries_.clear();
  for (const auto& [id, v] : vehicles_) {
    Path p = walk(v, config_.lookahead);
    for (std::size_t k = 1; k < p.lanes.size(); ++k)
      if (merge_lane_[static_cast<std::size_t>(p.lanes[k].lane)]) {
        if (p.lanes[k].offset <= config_.merge_horizon)
          merge_entries_[p.lanes[k].lane].push_back({&v, p.lanes[k].offset, p.lanes[k - 1].lane});
        break;
      }
    paths_.emplace(id, std::move(p));
  }
}

std::optional<Simulation::Obstacle> Simulation::leader_on_path(const VehicleRecord& v, const Path& path) const {
  for (std::size_t k = 0; k < path.lanes.size(); ++k) {
    const auto& list = lane_index_[static_cast<std::size_t>(path.lanes[k].lane)];
    for (const VehicleRecord* w : list) {
      if (w->id == v.id) continue;
      if (k == 0 && (w->pos < v.pos || (w->pos == v.pos && w->id < v.id))) continue;
      return Obstacle{path.lanes[k].offset + w->pos - w->length, w->speed};
    }
  }
  return std::nullopt;
}

std::optional<Simulation::Obstacle> Simulation::merge_leader(const VehicleRecord& v, const Path& path) const {
  std::optional<Obstacle> best;
  for (std::size_t k = 1; k < path.lanes.size(); ++k) {
    const int m = path.lanes[k].lane;
    if (!merge_lane_[static_cast<std::size_t>(m)]) continue;
    if (path.lanes[k].offset > config_.merge_horizon) break;
    auto it = merge_entries_.find(m);
    if (it == merge_entries_.end()) break;
    const double dv = path.lanes[k].offset;
    const int branch = path.lanes[k - 1].lane;
    const MergeEntry* lead = nullptr;
    for (const auto& e : it->second) {
      if (e.vehicle->id == v.id || e.branch == branch) continue;
      const bool ahead = e.distance < dv || (e.distance == dv && e.branch < branch);
      if (ahead && (!lead || e.distance > lead->distance)) lead = &e;
    }
    if (lead) best = Obstacle{dv - lead->distance - lead->vehicle->length, lead->vehicle->speed};
    break;
  }
  return best;
}

std::optional<Simulation::Obstacle> Simulation::merge_follower(const VehicleRecord& v, const Path& path) const {
  std::optional<Obstacle> best;
  for (std::size_t k = 1; k < path.lanes.size(); ++k) {
    const int m = path.lanes[k].lane;
    if (!merge_lane_[static_cast<std::size_t>(m)]) continue;
    if (path.lanes[k].offset > config_.merge_horizon) break;
    auto it = merge_entries_.find(m);
    if (it == merge_entries_.end()) break;
    const double dv = path.lanes[k].offset;
    const int branch = path.lanes[k - 1].lane;
    const MergeEntry* follow = nullptr;
    for (const auto& e : it->second) {
      if (e.vehicle->id == v.id || e.branch == branch) continue;
      const bool behind = e.distance > dv || (e.distance == dv && e.branch > branch);
      if (behind && (!follow || e.distance < follow->distance)) follow = &e;
    }
    if (follow) best = Obstacle{follow->distance - dv - v.length, follow->vehicle->speed};
    break;
  }
  return best;
}

std::optional<Simulation::Approach> Simulation::approach_of(const VehicleRecord& v, const Path& path) const {
  Approach a;
  double limit = kInf;
  for (const auto& pl : path.lanes) {
    if (pl.offset > limit) break;
    for (const auto& [zid, member] : zones_on_lane_[static_cast<std::size_t>(pl.lane)]) {
      const ConflictZone& z = net_->zones[static_cast<std::size_t>(zid)];
      if (z.rule != YieldRule::priority) continue;
      if (z.junction == v.junction_grant) continue;
      const LaneInterval& iv = z.members[static_cast<std::size_t>(member)];
      const double begin = pl.offset + iv.begin;
      const double end = pl.offset + iv.end;
      if (end <= 0.0) continue;
      if (a.junction < 0) {
        a.junction = z.junction;
        a.entry = begin;
        limit = begin + 80.0;
      }
      if (z.junction != a.junction) continue;
      a.claims.push_back({zid, pl.lane, end});
      a.claim_begin.push_back(begin);
    }
  }
  if (a.junction < 0) return std::nullopt;
  a.rank = net_->lane(a.claims.front().lane).priority_rank;
  for (const auto& pl : path.lanes) {
    if (net_->edge(net_->lane(pl.lane).edge).junction == a.junction) {
      a.entry = std::min(a.entry, pl.offset);
      a.rank = net_->lane(pl.lane).priority_rank;
      break;
    }
  }
  return a;
}

double Simulation::free_speed(const VehicleRecord& v) const {
  const double limit = net_->lane(v.lane).speed_limit;
  return v.commanded_speed ? std::min(limit, *v.commanded_speed) : limit;
}

double Simulation::accel_with_leader(const VehicleRecord& v, std::optional<Obstacle> leader) const {
  if (leader) return idm_accel(v.profile, v.speed, free_speed(v), leader->gap, leader->speed);
  return idm_accel(v.profile, v.speed, free_speed(v), std::nullopt, 0.0);
}

std::optional<Simulation::Obstacle> Simulation::same_lane_leader(int lane, double pos, int route, int route_index,
                                                                 int exclude) const {
  const Path p = walk_from(lane, pos, route, route_index, config_.lookahead);
  VehicleRecord probe;
  probe.id = exclude;
  probe.pos = pos;
  return leader_on_path(probe, p);
}

const VehicleRecord* Simulation::follower_vehicle(int lane, double pos, int exclude) const {
  const auto& list = lane_index_[static_cast<std::size_t>(lane)];
  for (auto it = list.rbegin(); it != list.rend(); ++it)
    if ((*it)->id != exclude && (*it)->pos <= pos) return *it;
  return nullptr;
}

std::optional<Simulation::Obstacle> Simulation::follower_on(int lane, double pos, double length, int exclude) const {
  if (const VehicleRecord* f = follower_vehicle(lane, pos, exclude)) return Obstacle{pos - length - f->pos, f->speed};
  // Vehicles still on a predecessor lane that continue onto this lane.
  std::optional<Obstacle> best;
  for (int p : net_->lane(lane).predecessors) {
    const auto& list = lane_index_[static_cast<std::size_t>(p)];
    for (auto it = list.rbegin(); it != list.rend(); ++it) {
      const VehicleRecord* w = *it;
      if (w->id == exclude) continue;
      const auto& r = (*routes_)[static_cast<std::size_t>(w->route)];
      if (w->route_index + 1 >= static_cast<int>(r.edges.size())) break;
      if (net_->successor_on(p, r.edges[static_cast<std::size_t>(w->route_index) + 1]) != lane) continue;
      const double gap = pos - length + (net_->lane(p).length - w->pos);
      if (!best || gap < best->gap) best = Obstacle{gap, w->speed};
      break;
    }
  }
  return best;
}

bool Simulation::gap_acceptable(const VehicleRecord& v, int target) const {
  const auto leader = same_lane_leader(target, v.pos, v.route, v.route_index, v.id);
  const auto follower = follower_on(target, v.pos, v.length, v.id);
  VehicleRecord moved = v;
  moved.lane = target;
  const Path path = walk(moved, config_.lookahead);
  auto front = leader;
  if (auto ml = merge_leader(moved, path); ml && (!front || ml->gap < front->gap)) front = ml;
  auto rear = follower;
  if (auto mf = merge_follower(moved, path); mf && (!rear || mf->gap < rear->gap)) rear = mf;
  const GapRequirement req =
      required_gaps(v.profile, v.speed, front ? std::optional<double>(front->speed) : std::nullopt,
                    rear ? std::optional<double>(rear->speed) : std::nullopt, config_.lc_headway, config_.lc_decel);
  if (front && front->gap < req.front) return false;
  if (rear && rear->gap < req.rear) return false;
  return true;
}

bool Simulation::mobil_gain(const VehicleRecord& v, int target) const {
  const auto cur_leader = same_lane_leader(v.lane, v.pos, v.route, v.route_index, v.id);
  const auto new_leader = same_lane_leader(target, v.pos, v.route, v.route_index, v.id);
  const double a_cur = accel_with_leader(v, cur_leader);
  const double a_new = accel_with_leader(v, new_leader);

  double others = 0.0;
  if (const VehicleRecord* f = follower_vehicle(target, v.pos, v.id)) {
    const double gap_new = v.pos - v.length - f->pos;
    const double before = accel_with_leader(*f, new_leader ? std::optional<Obstacle>(Obstacle{
                                                                 new_leader->gap + v.pos - f->pos, new_leader->speed})
                                                           : std::nullopt);
    const double after = accel_with_leader(*f, Obstacle{gap_new, v.speed});
    if (after < -config_.lc_decel) return false;
    others += after - before;
  }
  if (const VehicleRecord* o = follower_vehicle(v.lane, v.pos, v.id)) {
    const double before = accel_with_leader(*o, Obstacle{v.pos - v.length - o->pos, v.speed});
    const double after = accel_with_leader(
        *o, cur_leader ? std::optional<Obstacle>(Obstacle{cur_leader->gap + v.pos - o->pos, cur_leader->speed})
                       : std::nullopt);
    others += after - before;
  }
  const double incentive = v.profile.speed_gain_eagerness * (a_new - a_cur) + config_.mobil_politeness * others;
  return incentive > config_.mobil_threshold;
}

std::optional<int> Simulation::lane_change_motive(VehicleRecord& v, bool& mandatory) const {
  mandatory = false;
  const Lane& lane = net_->lane(v.lane);
  if (!lane_continues(v.lane, v.route, v.route_index)) {
    // Nearest lane of this edge that continues along the route; left wins ties.
    const auto& lanes = net_->edge(lane.edge).lanes;
    int best_dir = 0;
    int best_dist = std::numeric_limits<int>::max();
    for (int l : lanes) {
      if (!lane_continues(l, v.route, v.route_index)) continue;
      const int diff = net_->lane(l).index_in_edge - lane.index_in_edge;
      const int dist = std::abs(diff);
      if (dist < best_dist || (dist == best_dist && diff > 0)) {
        best_dist = dist;
        best_dir = diff > 0 ? 1 : -1;
      }
    }
    if (best_dir != 0) {
      mandatory = true;
      return best_dir;
    }
  }
  if (v.intent) return v.intent->direction;
  return std::nullopt;
}

void Simulation::lane_change_step() {
  const double t = now();
  for (auto& [id, v] : vehicles_) {
    const Lane& lane = net_->lane(v.lane);
    bool mandatory = false;
    const auto motive = lane_change_motive(v, mandatory);
    std::optional<int> dir = motive;
    if (mandatory && v.intent && v.intent->direction != *motive) dir = motive;

    // Turn signal: lane-change motive first, otherwise an upcoming turn at a junction.
    int signal = dir.value_or(0);
    if (signal == 0) {
      const auto pit = paths_.find(id);
      if (pit != paths_.end())
        for (const auto& pl : pit->second.lanes) {
          if (pl.offset > 60.0) break;
          const auto& turn = net_->edge(net_->lane(pl.lane).edge).turn;
          if (turn && *turn != Turn::straight) {
            signal = *turn == Turn::left ? 1 : -1;
            break;
          }
        }
    }
    v.turn_signal = signal;

    if (t < v.lane_change_ready - 1e-9 || v.junction_grant >= 0) continue;
    if (const auto pit = paths_.find(id); pit != paths_.end()) {
      if (auto ap = approach_of(v, pit->second); ap && ap->entry < 40.0) continue;
    }

    std::optional<int> target;
    if (dir) {
      const auto& nb = *dir > 0 ? lane.left : lane.right;
      if (nb && gap_acceptable(v, *nb)) target = *nb;
    } else if (!(v.category == Category::av && v.activated) && v.profile.speed_gain_eagerness > 0.0) {
      for (int d : {1, -1}) {
        const auto& nb = d > 0 ? lane.left : lane.right;
        if (!nb || !lane_continues(*nb, v.route, v.route_index)) continue;
        if (gap_acceptable(v, *nb) && mobil_gain(v, *nb)) {
          target = *nb;
          break;
        }
      }
    }
    if (!target) continue;
    v.lane = *target;
    v.prev_lane = -1;
    v.lane_change_ready = t + config_.decision_interval;
    v.intent.reset();
    v.turn_signal = 0;
    v.head_since.reset();
    rebuild_lane_index();
    refresh_paths();
  }
}

void Simulation::yield_step() {
  // Release fully cleared claims.
  for (auto& [id, v] : vehicles_) {
    if (v.junction_grant < 0) continue;
    std::erase_if(v.claims, [&](const ZoneClaim& c) {
      return v.odometer - v.length >= c.odometer_end + config_.clear_margin;
    });
    if (v.claims.empty()) v.junction_grant = -1;
  }

  struct Head {
    VehicleRecord* v;
    Approach a;
  };
  std::vector<Head> heads;
  std::set<int> head_ids;
  for (std::size_t l = 0; l < lane_index_.size(); ++l) {
    const auto& list = lane_index_[l];
    for (auto it = list.rbegin(); it != list.rend(); ++it) {
      VehicleRecord* v = *it;
      if (v->junction_grant >= 0) continue;
      auto ap = approach_of(*v, paths_.at(v->id));
      if (!ap) continue;
      heads.push_back({v, *ap});
      head_ids.insert(v->id);
      break;
    }
  }
  const double t = now();
  for (auto& [id, v] : vehicles_) {
    if (!head_ids.count(id)) v.head_since.reset();
    else if (!v.head_since) v.head_since = t;
  }
  std::sort(heads.begin(), heads.end(), [](const Head& x, const Head& y) {
    if (x.a.rank != y.a.rank) return x.a.rank > y.a.rank;
    if (*x.v->head_since != *y.v->head_since) return *x.v->head_since < *y.v->head_since;
    return x.v->lane < y.v->lane;
  });

  auto conflicts = [&](const ZoneClaim& a, const ZoneClaim& b) { return a.zone == b.zone && a.lane != b.lane; };

  for (std::size_t i = 0; i < heads.size(); ++i) {
    VehicleRecord& v = *heads[i].v;
    const Approach& ap = heads[i].a;
    const double b = v.profile.max_decel;
    const double commit_dist =
        v.speed * v.speed / (2.0 * config_.stop_brake_fraction * b) + 2.0 * v.speed * config_.sim_step + 3.0;
    if (ap.entry > commit_dist) continue;

    bool ok = true;
    for (const auto& [wid, w] : vehicles_) {
      if (w.junction_grant < 0 || wid == v.id) continue;
      for (const auto& cw : w.claims)
        for (const auto& cv : ap.claims)
          if (conflicts(cw, cv)) ok = false;
      if (!ok) break;
    }
    if (ok) {
      double clear_dist = 0.0;
      for (const auto& c : ap.claims) clear_dist = std::max(clear_dist, c.odometer_end);
      const double vmax = net_->lane(v.lane).speed_limit;
      const double t_clear = time_to_cover(clear_dist + v.length + config_.clear_margin, v.speed,
                                           v.profile.max_accel, vmax);
      for (std::size_t j = 0; j < i && ok; ++j) {
        const VehicleRecord& w = *heads[j].v;
        if (w.junction_grant >= 0) continue;  // granted earlier this step; covered above
        const Approach& aw = heads[j].a;
        for (std::size_t cw = 0; cw < aw.claims.size() && ok; ++cw)
          for (const auto& cv : ap.claims)
            if (conflicts(aw.claims[cw], cv)) {
              const double eta = time_to_cover(aw.claim_begin[cw], w.speed, w.profile.max_accel,
                                               net_->lane(w.lane).speed_limit);
              if (eta < t_clear + config_.commit_margin) ok = false;
            }
      }
    }
    if (!ok) continue;
    v.junction_grant = ap.junction;
    v.claims.clear();
    for (const auto& c : ap.claims) v.claims.push_back({c.zone, c.lane, v.odometer + c.odometer_end});
    v.head_since.reset();
  }
}

void Simulation::set_meter_rate(double rate_vph) {
  if (!meter_) throw ContractViolation("no insertion meter enabled");
  meter_->rate_vph = rate_vph;
}

bool Simulation::try_insert(const ScheduledVehicle& s, int edge, std::set<int>& used_lanes) {
  const auto& route = (*routes_)[static_cast<std::size_t>(s.route)];
  const DriverProfile& prof = s.category == Category::av ? av_profile_ : config_.hv_profile;
  int best_lane = -1;
  double best_speed = -1.0;
  double best_gap = -1.0;
  for (int l : net_->edge(edge).lanes) {
    if (used_lanes.count(l)) continue;
    const double limit = net_->lane(l).speed_limit;
    const auto leader = same_lane_leader(l, 0.0, s.route, 0, -1);
    double speed = limit;
    double gap = kInf;
    if (leader) {
      gap = leader->gap;
      if (gap < prof.min_gap) continue;
      auto needed = [&](double v) {
        return prof.min_gap + 0.5 * v * prof.desired_headway +
               std::max(0.0, (v * v - leader->speed * leader->speed) / (2.0 * prof.max_decel));
      };
      if (needed(limit) > gap) {
        double lo = 0.0, hi = limit;
        for (int it = 0; it < 40; ++it) {
          const double mid = 0.5 * (lo + hi);
          (needed(mid) <= gap ? lo : hi) = mid;
        }
        speed = lo;
      }
    }
    if (speed > best_speed + 1e-12 || (std::abs(speed - best_speed) <= 1e-12 && gap > best_gap)) {
      best_lane = l;
      best_speed = speed;
      best_gap = gap;
    }
  }
  if (best_lane < 0) return false;
  (void)route;
  VehicleRecord v;
  v.id = s.id;
  v.category = s.category;
  v.lane = best_lane;
  v.pos = 0.0;
  v.speed = best_speed;
  v.route = s.route;
  v.route_index = 0;
  v.profile = prof;
  v.scheduled_entry = s.time;
  v.entry_time = now();
  v.length = config_.vehicle_length;
  v.lane_change_ready = now();
  vehicles_.emplace(v.id, v);
  used_lanes.insert(best_lane);
  rebuild_lane_index();
  return true;
}

void Simulation::spawn_step() {
  const double t = now();
  if (meter_) meter_->tokens = std::min(2.0, meter_->tokens + meter_->rate_vph / 3600.0 * config_.sim_step);
  while (next_arrival_ < arrivals_.size() && arrivals_[next_arrival_].time <= t + 1e-9) {
    const auto& a = arrivals_[next_arrival_];
    queues_[(*routes_)[static_cast<std::size_t>(a.route)].edges.front()].push_back(a);
    ++next_arrival_;
  }
  for (auto& [edge, queue] : queues_) {
    std::set<int> used;
    std::size_t taken = 0;
    while (taken < queue.size()) {
      if (meter_ && meter_->tokens < 1.0) break;
      if (!try_insert(queue[taken], edge, used)) break;
      if (meter_) meter_->tokens -= 1.0;
      ++taken;
    }
    queue.erase(queue.begin(), queue.begin() + static_cast<std::ptrdiff_t>(taken));
  }
}

void Simulation::physics_step() {
  const double dt = config_.sim_step;
  std::map<int, double> new_speed;
  for (auto& [id, v] : vehicles_) {
    const Path& path = paths_.at(id);
    const double v0 = free_speed(v);
    auto leader = leader_on_path(v, path);
    const auto ml = merge_leader(v, path);
    double a = accel_with_leader(v, leader);
    double cap = kInf;
    if (leader) cap = leader->gap;
    if (ml) {
      a = std::min(a, accel_with_leader(v, ml));
      cap = std::min(cap, ml->gap);
    }

    std::vector<double> stops;
    if (path.dead_end) stops.push_back(*path.dead_end);
    if (v.junction_grant < 0)
      if (auto ap = approach_of(v, path)) stops.push_back(ap->entry);
    for (double d : stops) {
      const double s = d - 0.5;
      cap = std::min(cap, s);
      if (s <= 0.05) {
        a = -kInf;
        continue;
      }
      const double req = v.speed * v.speed / (2.0 * s);
      if (req >= config_.stop_brake_fraction * v.profile.max_decel) a = std::min(a, -req);
    }
    double nv = std::clamp(v.speed + a * dt, 0.0, std::max(v.speed, v0));
    if (std::isfinite(cap)) nv = std::min(nv, std::max(0.0, cap - 0.01) / dt);
    nv = std::max(nv, 0.0);
    v.accel = (nv - v.speed) / dt;
    new_speed[id] = nv;
  }

  const double exit_time = now() + dt;
  std::vector<int> released;
  for (auto& [id, v] : vehicles_) {
    v.speed = new_speed[id];
    v.pos += v.speed * dt;
    v.odometer += v.speed * dt;
    const auto& route = (*routes_)[static_cast<std::size_t>(v.route)];
    while (true) {
      const double len = net_->lane(v.lane).length;
      if (v.pos < len) break;
      if (v.route_index + 1 >= static_cast<int>(route.edges.size())) {
        released.push_back(id);
        break;
      }
      const auto next = net_->successor_on(v.lane, route.edges[static_cast<std::size_t>(v.route_index) + 1]);
      if (!next) throw IntegrityError("vehicle " + std::to_string(id) + " ran past the end of lane " +
                                          std::to_string(v.lane), spec_.seed);
      v.pos -= len;
      v.prev_lane = v.lane;
      v.lane = *next;
      ++v.route_index;
    }
  }
  for (int id : released) {
    const VehicleRecord& v = vehicles_.at(id);
    ReleaseRecord r;
    r.id = id;
    r.category = v.category;
    r.route = v.route;
    r.group = (*routes_)[static_cast<std::size_t>(v.route)].group;
    r.scheduled_entry = v.scheduled_entry;
    r.entry_time = v.entry_time;
    r.exit_time = exit_time;
    r.travel_time = exit_time - v.entry_time;
    releases_.push_back(r);
    released_this_decision_.push_back(r.travel_time);
    vehicles_.erase(id);
  }
  rebuild_lane_index();
}

void Simulation::check_integrity() const {
  const double eps = 1e-6;
  for (std::size_t l = 0; l < lane_index_.size(); ++l) {
    const auto& list = lane_index_[l];
    for (std::size_t i = 1; i < list.size(); ++i) {
      const double gap = list[i]->pos - list[i]->length - list[i - 1]->pos;
      if (gap < -eps)
        throw IntegrityError("vehicles " + std::to_string(list[i - 1]->id) + " and " + std::to_string(list[i]->id) +
                                 " overlap on lane " + std::to_string(l),
                             spec_.seed);
    }
    if (list.empty()) continue;
    const VehicleRecord* first = list.front();
    if (first->pos >= first->length) continue;
    for (int p : net_->lane(static_cast<int>(l)).predecessors) {
      const auto& plist = lane_index_[static_cast<std::size_t>(p)];
      for (auto it = plist.rbegin(); it != plist.rend(); ++it) {
        const VehicleRecord* w = *it;
        const auto& r = (*routes_)[static_cast<std::size_t>(w->route)];
        if (w->route_index + 1 >= static_cast<int>(r.edges.size())) break;
        if (net_->successor_on(p, r.edges[static_cast<std::size_t>(w->route_index) + 1]) != static_cast<int>(l)) continue;
        const double gap = net_->lane(p).length - w->pos + first->pos - first->length;
        if (gap < -eps)
          throw IntegrityError("vehicles " + std::to_string(w->id) + " and " + std::to_string(first->id) +
                                   " overlap across a lane boundary",
                               spec_.seed);
        break;
      }
    }
  }
  // Priority conflict zones: no two members occupied at once.
  for (const auto& z : net_->zones) {
    if (z.rule != YieldRule::priority) continue;
    int occupied_member = -1;
    int occupant = -1;
    for (std::size_t m = 0; m < z.members.size(); ++m) {
      const auto& iv = z.members[m];
      for (const auto& [id, v] : vehicles_) {
        bool inside = false;
        if (v.lane == iv.lane) inside = v.pos > iv.begin && v.pos - v.length < iv.end;
        else if (v.prev_lane == iv.lane && v.pos < v.length) {
          const double len = net_->lane(iv.lane).length;
          inside = len + v.pos - v.length < iv.end && len > iv.begin;
        }
        if (!inside) continue;
        if (occupied_member >= 0 && occupied_member != static_cast<int>(m))
          throw IntegrityError("vehicles " + std::to_string(occupant) + " and " + std::to_string(id) +
                                   " occupy conflict zone " + std::to_string(z.id) + " together",
                               spec_.seed);
        occupied_member = static_cast<int>(m);
        occupant = id;
      }
    }
  }
  // Merging branches keep their projected spacing.
  for (const auto& [m, entries] : merge_entries_) {
    std::vector<const MergeEntry*> near;
    for (const auto& e : entries)
      if (e.distance < 20.0) near.push_back(&e);
    std::sort(near.begin(), near.end(), [](const MergeEntry* a, const MergeEntry* b) {
      if (a->distance != b->distance) return a->distance < b->distance;
      return a->branch < b->branch;
    });
    for (std::size_t i = 1; i < near.size(); ++i) {
      if (near[i]->branch == near[i - 1]->branch) continue;
      if (near[i]->distance - near[i - 1]->distance - near[i - 1]->vehicle->length < -eps)
        throw IntegrityError("vehicles " + std::to_string(near[i - 1]->vehicle->id) + " and " +
                                 std::to_string(near[i]->vehicle->id) + " collide at a merge",
                             spec_.seed);
    }
  }
}

void Simulation::write_trajectory() {
  if (!trajectory_) return;
  for (const auto& [id, v] : vehicles_) {
    const Pose p = pose_of(v);
    nlohmann::json j = {{"t", now()},
                        {"id", id},
                        {"category", std::string(to_string(v.category))},
                        {"activated", v.activated},
                        {"lane", v.lane},
                        {"pos", v.pos},
                        {"speed", v.speed},
                        {"x", p.position.x},
                        {"y", p.position.y},
                        {"heading", p.heading},
                        {"signal", v.turn_signal}};
    *trajectory_ << j.dump() << '\n';
  }
}

void Simulation::step() {
  if (done()) throw ContractViolation("episode already finished");
  spawn_step();
  refresh_paths();
  lane_change_step();
  yield_step();
  physics_step();
  ++steps_;
  refresh_paths();
  check_integrity();
  const double t = now();
  for (auto& [id, v] : vehicles_)
    if (v.intent && t >= v.intent->deadline - 1e-9) v.intent.reset();
  write_trajectory();
}

std::vector<double> Simulation::advance_decision() {
  released_this_decision_.clear();
  const auto n = static_cast<int>(std::lround(config_.decision_interval / config_.sim_step));
  for (int i = 0; i < n && !done(); ++i) step();
  auto out = std::move(released_this_decision_);
  released_this_decision_.clear();
  return out;
}

void Simulation::set_activated(const std::set<int>& ids) {
  for (int id : ids) {
    const VehicleRecord* v = find(id);
    require(v != nullptr && v->category == Category::av, "only on-map AVs can be activated");
  }
  for (auto& [id, v] : vehicles_) {
    const bool on = ids.count(id) > 0;
    if (v.activated && !on) {
      v.intent.reset();
      v.commanded_speed.reset();
    }
    v.activated = on;
  }
}

void Simulation::command(int id, int action) {
  auto it = vehicles_.find(id);
  require(it != vehicles_.end() && it->second.activated, "commands go to activated AVs only");
  require(action >= 0 && action < kActionCount, "action index out of range");
  VehicleRecord& v = it->second;
  if (action == kActionLeft || action == kActionRight) {
    v.intent = LaneChangeIntent{action == kActionLeft ? 1 : -1, now() + config_.intent_duration};
    v.turn_signal = v.intent->direction;
  } else {
    v.commanded_speed = kSpeedFractions[action - kActionSpeed0] * net_->lane(v.lane).speed_limit;
  }
}

double Simulation::occupancy_percent(int edge) const {
  double covered = 0.0, total = 0.0;
  for (int l : net_->edge(edge).lanes) {
    const double len = net_->lane(l).length;
    total += len;
    for (const VehicleRecord* v : lane_index_[static_cast<std::size_t>(l)])
      covered += std::max(0.0, std::min(v->pos, len) - std::max(0.0, v->pos - v->length));
  }
  return total > 0.0 ? 100.0 * covered / total : 0.0;
}

int Simulation::place_vehicle(const Placement& p) {
  require(p.route >= 0 && p.route < static_cast<int>(routes_->size()), "unknown route");
  const auto& route = (*routes_)[static_cast<std::size_t>(p.route)];
  const int edge = net_->lane(p.lane).edge;
  const auto it = std::find(route.edges.begin(), route.edges.end(), edge);
  require(it != route.edges.end(), "placement lane is not on the route");
  require(p.pos >= 0.0 && p.pos <= net_->lane(p.lane).length, "placement position outside the lane");
  VehicleRecord v;
  v.id = next_placed_id_++;
  v.category = p.category;
  v.lane = p.lane;
  v.pos = p.pos;
  v.speed = p.speed;
  v.route = p.route;
  v.route_index = static_cast<int>(it - route.edges.begin());
  v.profile = p.profile ? *p.profile : (p.category == Category::av ? av_profile_ : config_.hv_profile);
  v.scheduled_entry = now();
  v.entry_time = now();
  v.length = config_.vehicle_length;
  v.lane_change_ready = now();
  vehicles_.emplace(v.id, v);
  ++placed_;
  rebuild_lane_index();
  refresh_paths();
  return v.id;
}

}  // namespace coopdrive
