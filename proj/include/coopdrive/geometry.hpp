#pragma once

#include <optional>
#include <utility>
#include <vector>

namespace coopdrive {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
double norm(Vec2 v);
double distance(Vec2 a, Vec2 b);

struct Pose {
  Vec2 position;
  double heading = 0.0;  // radians, counter-clockwise from +x
};

/// Piecewise-linear curve parameterized by arc length.
class Polyline {
 public:
  Polyline() = default;
  explicit Polyline(std::vector<Vec2> points);

  double length() const { return cumulative_.empty() ? 0.0 : cumulative_.back(); }
  const std::vector<Vec2>& points() const { return points_; }

  /// Pose at arc length s; s is clamped to [0, length()].
  Pose pose_at(double s) const;

 private:
  std::vector<Vec2> points_;
  std::vector<double> cumulative_;
};

/// Straight segment from a to b.
Polyline straight(Vec2 a, Vec2 b);

/// Quadratic Bezier from a to b with control point c, sampled into `segments` pieces.
Polyline bezier(Vec2 a, Vec2 c, Vec2 b, int segments = 12);

/// Arc lengths (on a, on b) of the first proper crossing of two polylines, if any.
/// Shared endpoints do not count as crossings.
std::optional<std::pair<double, double>> first_crossing(const Polyline& a, const Polyline& b);

}  // namespace coopdrive
