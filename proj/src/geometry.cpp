#include "coopdrive/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "coopdrive/errors.hpp"

namespace coopdrive {

double norm(Vec2 v) { return std::hypot(v.x, v.y); }
double distance(Vec2 a, Vec2 b) { return norm(a - b); }

Polyline::Polyline(std::vector<Vec2> points) : points_(std::move(points)) {
  require(points_.size() >= 2, "polyline needs at least two points");
  cumulative_.reserve(points_.size());
  cumulative_.push_back(0.0);
  for (std::size_t i = 1; i < points_.size(); ++i)
    cumulative_.push_back(cumulative_.back() + distance(points_[i - 1], points_[i]));
}

Pose Polyline::pose_at(double s) const {
  s = std::clamp(s, 0.0, length());
  auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), s);
  std::size_t seg = it == cumulative_.begin() ? 0 : static_cast<std::size_t>(it - cumulative_.begin()) - 1;
  seg = std::min(seg, points_.size() - 2);
  const Vec2 a = points_[seg];
  const Vec2 b = points_[seg + 1];
  const double seg_len = cumulative_[seg + 1] - cumulative_[seg];
  const double t = seg_len > 0.0 ? (s - cumulative_[seg]) / seg_len : 0.0;
  return {a + t * (b - a), std::atan2(b.y - a.y, b.x - a.x)};
}

Polyline straight(Vec2 a, Vec2 b) { return Polyline({a, b}); }

Polyline bezier(Vec2 a, Vec2 c, Vec2 b, int segments) {
  std::vector<Vec2> pts;
  pts.reserve(static_cast<std::size_t>(segments) + 1);
  for (int i = 0; i <= segments; ++i) {
    const double t = static_cast<double>(i) / segments;
    const double u = 1.0 - t;
    pts.push_back(u * u * a + 2.0 * u * t * c + t * t * b);
  }
  return Polyline(std::move(pts));
}

namespace {

double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }

}  // namespace

std::optional<std::pair<double, double>> first_crossing(const Polyline& a, const Polyline& b) {
  constexpr double kEps = 1e-9;
  const auto& pa = a.points();
  const auto& pb = b.points();
  double sa = 0.0;
  for (std::size_t i = 0; i + 1 < pa.size(); ++i) {
    const Vec2 r = pa[i + 1] - pa[i];
    double sb = 0.0;
    for (std::size_t j = 0; j + 1 < pb.size(); ++j) {
      const Vec2 q = pb[j + 1] - pb[j];
      const double denom = cross(r, q);
      if (std::abs(denom) > kEps) {
        const Vec2 d = pb[j] - pa[i];
        const double t = cross(d, q) / denom;
        const double u = cross(d, r) / denom;
        const bool interior_a = t > kEps && t < 1.0 - kEps;
        const bool interior_b = u > kEps && u < 1.0 - kEps;
        const bool inside = t >= 0.0 && t <= 1.0 && u >= 0.0 && u <= 1.0;
        // Touching at an endpoint of both curves is a shared start/end, not a crossing.
        const bool shared_end = (i == 0 && t <= kEps && j == 0 && u <= kEps) ||
                                (i + 2 == pa.size() && t >= 1.0 - kEps && j + 2 == pb.size() && u >= 1.0 - kEps);
        if (inside && (interior_a || interior_b) && !shared_end)
          return std::make_pair(sa + t * norm(r), sb + u * norm(q));
      }
      sb += norm(q);
    }
    sa += norm(r);
  }
  return std::nullopt;
}

}  // namespace coopdrive
