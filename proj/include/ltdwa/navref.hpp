#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <vector>

#include "ltdwa/core.hpp"
#include "ltdwa/distfield.hpp"

namespace ltdwa {

/// Polyline with tangent headings and cumulative arc length.
class NavigationPath {
 public:
  NavigationPath() = default;

  // Builds a path through `points`; consecutive duplicates are dropped so
  // that arc length strictly increases. Headings are recomputed: each point
  // takes the direction of its following segment, the last point repeats the
  // final segment direction.
  static NavigationPath from_points(const std::vector<Vec2>& points) {
    NavigationPath path;
    for (const Vec2& p : points) {
      if (!path.poses_.empty()) {
        const Pose2& last = path.poses_.back();
        if (std::hypot(p.x - last.x, p.y - last.y) <= 1e-12) continue;
      }
      path.poses_.push_back({p.x, p.y, 0.0});
    }
    path.finalize();
    return path;
  }

  static NavigationPath straight_line(Vec2 start, Vec2 goal) { return from_points({start, goal}); }

  const std::vector<Pose2>& poses() const { return poses_; }
  const std::vector<double>& arc() const { return arc_; }
  std::size_t size() const { return poses_.size(); }
  bool empty() const { return poses_.empty(); }
  double length() const { return arc_.empty() ? 0.0 : arc_.back(); }
  Vec2 endpoint() const { return {poses_.back().x, poses_.back().y}; }

  struct Projection {
    double arc{0.0};
    Vec2 point{};
    std::size_t segment{0};
    double distance{0.0};
  };

  // Closest point on the polyline; ties go to the lower segment index.
  Projection project(Vec2 q) const {
    Projection best;
    best.distance = std::numeric_limits<double>::infinity();
    if (poses_.size() == 1) {
      best.point = {poses_[0].x, poses_[0].y};
      best.distance = distance(q, best.point);
      return best;
    }
    for (std::size_t k = 0; k + 1 < poses_.size(); ++k) {
      const Vec2 a{poses_[k].x, poses_[k].y};
      const Vec2 b{poses_[k + 1].x, poses_[k + 1].y};
      const double len = arc_[k + 1] - arc_[k];
      const double t =
          std::clamp(((q.x - a.x) * (b.x - a.x) + (q.y - a.y) * (b.y - a.y)) / (len * len), 0.0,
                     1.0);
      const Vec2 p{a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)};
      const double d = distance(q, p);
      if (d < best.distance) {
        best = {arc_[k] + t * len, p, k, d};
      }
    }
    return best;
  }

  // Pose at arc length `s`, clamped to [0, length()].
  Pose2 at_arc(double s) const {
    if (poses_.size() == 1 || s >= length()) return poses_.back();
    if (s <= 0.0) return poses_.front();
    const auto it = std::upper_bound(arc_.begin(), arc_.end(), s);
    const std::size_t k = static_cast<std::size_t>(it - arc_.begin()) - 1;
    const double t = (s - arc_[k]) / (arc_[k + 1] - arc_[k]);
    const Pose2& a = poses_[k];
    const Pose2& b = poses_[k + 1];
    return {a.x + t * (b.x - a.x), a.y + t * (b.y - a.y), a.theta};
  }

 private:
  void finalize() {
    arc_.assign(poses_.size(), 0.0);
    for (std::size_t k = 0; k + 1 < poses_.size(); ++k) {
      const double dx = poses_[k + 1].x - poses_[k].x;
      const double dy = poses_[k + 1].y - poses_[k].y;
      poses_[k].theta = std::atan2(dy, dx);
      arc_[k + 1] = arc_[k] + std::hypot(dx, dy);
    }
    if (poses_.size() >= 2) poses_.back().theta = poses_[poses_.size() - 2].theta;
  }

  std::vector<Pose2> poses_;
  std::vector<double> arc_;
};

inline nlohmann::json nav_path_to_json(const NavigationPath& path) {
  nlohmann::json out = nlohmann::json::array();
  for (const Pose2& p : path.poses()) out.push_back({p.x, p.y, p.theta});
  return out;
}

inline NavigationPath nav_path_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw Error(ErrorKind::ConfigError, "navigation path must be an array");
  std::vector<Vec2> pts;
  for (const auto& p : j) {
    if (!p.is_array() || p.size() < 2) {
      throw Error(ErrorKind::ConfigError, "navigation path entries must be [x, y, theta]");
    }
    pts.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  }
  return NavigationPath::from_points(pts);
}

/// N+1 reference poses with the remaining arc length to the path endpoint.
struct ReferencePath {
  std::vector<Pose2> poses;
  std::vector<double> remaining;

  std::size_t size() const { return poses.size(); }
};

inline ReferencePath reference_path(const NavigationPath& nav, const RobotState& robot,
                                    const PlannerParams& params, const KinodynamicLimits& lim) {
  if (nav.size() < 2) throw Error(ErrorKind::EmptyPath, "navigation path needs >= 2 points");
  const auto proj = nav.project(robot.position());
  const double tangent = nav.poses()[proj.segment].theta;
  const double gap = angle_diff(robot.theta, tangent);
  const double spacing = params.dt * lim.v_max * std::max(std::cos(gap), 0.0);
  const double total = nav.length();

  ReferencePath ref;
  ref.poses.reserve(static_cast<std::size_t>(params.n) + 1);
  ref.remaining.reserve(static_cast<std::size_t>(params.n) + 1);
  for (int i = 0; i <= params.n; ++i) {
    const double s = std::min(proj.arc + i * spacing, total);
    Pose2 p = nav.at_arc(s);
    if (i == 0 && s < total) {
      // Keep p_0 on the projected point's own segment.
      p = {proj.point.x, proj.point.y, tangent};
    }
    ref.poses.push_back(p);
    ref.remaining.push_back(std::max(total - s, 0.0));
  }
  return ref;
}

// ---------------------------------------------------------------------------
// Global planning: 8-connected A* on a clearance-inflated grid followed by a
// clearance-preserving Douglas-Peucker simplification.

struct GridCell {
  int col{0};
  int row{0};
  friend bool operator==(const GridCell&, const GridCell&) = default;
};

struct GridPath {
  std::vector<GridCell> cells;
  double length{0.0};  // meters along cell centers
};

// Minimum center-to-obstacle distance a cell needs so that any straight move
// between two such 8-neighbors keeps `clearance` along the whole move.
inline double inflated_cell_clearance(double clearance, double resolution) {
  return std::sqrt(clearance * clearance + 0.5 * resolution * resolution);
}

inline GridPath astar_grid_path(const GridDistanceTransform& edt, GridCell start, GridCell goal,
                                double cell_clearance) {
  const int w = edt.width();
  const int h = edt.height();
  const double res = edt.resolution();
  auto free = [&](int c, int r) {
    return c >= 0 && r >= 0 && c < w && r < h && edt.cell_distance(c, r) >= cell_clearance;
  };
  auto idx = [w](int c, int r) { return static_cast<std::size_t>(r) * static_cast<std::size_t>(w) +
                                        static_cast<std::size_t>(c); };
  auto heuristic = [&](int c, int r) {
    const double dx = std::abs(c - goal.col);
    const double dy = std::abs(r - goal.row);
    return res * ((dx + dy) + (std::sqrt(2.0) - 2.0) * std::min(dx, dy));
  };

  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  std::vector<double> g(n, std::numeric_limits<double>::infinity());
  std::vector<int> parent(n, -1);
  std::vector<char> closed(n, 0);
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> open;

  g[idx(start.col, start.row)] = 0.0;
  open.push({heuristic(start.col, start.row), idx(start.col, start.row)});
  const std::size_t target = idx(goal.col, goal.row);
  while (!open.empty()) {
    const auto [f, cur] = open.top();
    open.pop();
    if (closed[cur]) continue;
    closed[cur] = 1;
    if (cur == target) break;
    const int c = static_cast<int>(cur % static_cast<std::size_t>(w));
    const int r = static_cast<int>(cur / static_cast<std::size_t>(w));
    for (int dr = -1; dr <= 1; ++dr) {
      for (int dc = -1; dc <= 1; ++dc) {
        if (dr == 0 && dc == 0) continue;
        const int nc = c + dc;
        const int nr = r + dr;
        if (!free(nc, nr)) continue;
        const std::size_t ni = idx(nc, nr);
        if (closed[ni]) continue;
        const double step = (dr != 0 && dc != 0) ? res * std::sqrt(2.0) : res;
        if (g[cur] + step < g[ni]) {
          g[ni] = g[cur] + step;
          parent[ni] = static_cast<int>(cur);
          open.push({g[ni] + heuristic(nc, nr), ni});
        }
      }
    }
  }
  if (!closed[target]) throw Error(ErrorKind::NoPath, "start and goal are disconnected");

  GridPath out;
  out.length = g[target];
  for (int cur = static_cast<int>(target); cur >= 0; cur = parent[static_cast<std::size_t>(cur)]) {
    out.cells.push_back({cur % w, cur / w});
  }
  std::reverse(out.cells.begin(), out.cells.end());
  return out;
}

namespace detail {

inline double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}

// Exact test: no occupied cell center lies within `clearance` of segment ab.
inline bool segment_clear(const OccupancyGrid& grid, Vec2 a, Vec2 b, double clearance) {
  const int c0 = std::max(0, grid.col_of(std::min(a.x, b.x) - clearance));
  const int c1 = std::min(grid.width - 1, grid.col_of(std::max(a.x, b.x) + clearance));
  const int r0 = std::max(0, grid.row_of(std::min(a.y, b.y) - clearance));
  const int r1 = std::min(grid.height - 1, grid.row_of(std::max(a.y, b.y) + clearance));
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) {
      if (grid.occupied(c, r) && point_segment_distance(grid.cell_center(c, r), a, b) < clearance) {
        return false;
      }
    }
  }
  return true;
}

inline void simplify_range(const OccupancyGrid& grid, const std::vector<Vec2>& pts, std::size_t i,
                           std::size_t j, double epsilon, double clearance,
                           std::vector<char>& keep) {
  if (j <= i + 1) return;
  double worst = -1.0;
  std::size_t split = i + 1;
  for (std::size_t k = i + 1; k < j; ++k) {
    const double d = point_segment_distance(pts[k], pts[i], pts[j]);
    if (d > worst) {
      worst = d;
      split = k;
    }
  }
  if (worst <= epsilon && segment_clear(grid, pts[i], pts[j], clearance)) return;
  keep[split] = 1;
  simplify_range(grid, pts, i, split, epsilon, clearance, keep);
  simplify_range(grid, pts, split, j, epsilon, clearance, keep);
}

}  // namespace detail

/// Douglas-Peucker simplification that only merges a run of points when the
/// replacing segment keeps `clearance` from every occupied cell center.
inline std::vector<Vec2> simplify_with_clearance(const OccupancyGrid& grid,
                                                 const std::vector<Vec2>& pts, double epsilon,
                                                 double clearance) {
  if (pts.size() <= 2) return pts;
  std::vector<char> keep(pts.size(), 0);
  keep.front() = keep.back() = 1;
  detail::simplify_range(grid, pts, 0, pts.size() - 1, epsilon, clearance, keep);
  std::vector<Vec2> out;
  for (std::size_t k = 0; k < pts.size(); ++k)
    if (keep[k]) out.push_back(pts[k]);
  return out;
}

inline NavigationPath plan_global(const OccupancyGrid& grid, const GridDistanceTransform& edt,
                                  Vec2 start, Vec2 goal, double clearance, double dp_epsilon) {
  const GridCell s{grid.col_of(start.x), grid.row_of(start.y)};
  const GridCell g{grid.col_of(goal.x), grid.row_of(goal.y)};
  const double cell_clearance = inflated_cell_clearance(clearance, grid.resolution);
  auto usable = [&](GridCell c, Vec2 p) {
    return grid.in_bounds(c.col, c.row) && edt.cell_distance(c.col, c.row) >= cell_clearance &&
           edt.distance_at(p.x, p.y) >= clearance;
  };
  if (!usable(s, start)) throw Error(ErrorKind::StartOccupied, "start lacks the requested clearance");
  if (!usable(g, goal)) throw Error(ErrorKind::GoalOccupied, "goal lacks the requested clearance");

  const GridPath cells = astar_grid_path(edt, s, g, cell_clearance);
  std::vector<Vec2> raw;
  raw.reserve(cells.cells.size() + 2);
  raw.push_back(start);
  for (const GridCell& c : cells.cells) raw.push_back(grid.cell_center(c.col, c.row));
  raw.push_back(goal);

  if (!detail::segment_clear(grid, raw[0], raw[1], clearance)) {
    throw Error(ErrorKind::StartOccupied, "start cannot reach its cell center with clearance");
  }
  if (!detail::segment_clear(grid, raw[raw.size() - 2], raw.back(), clearance)) {
    throw Error(ErrorKind::GoalOccupied, "goal cannot be reached from its cell center with clearance");
  }
  return NavigationPath::from_points(simplify_with_clearance(grid, raw, dp_epsilon, clearance));
}

inline NavigationPath plan_global(const OccupancyGrid& grid, Vec2 start, Vec2 goal,
                                  double clearance, double dp_epsilon) {
  const GridDistanceTransform edt(grid);
  return plan_global(grid, edt, start, goal, clearance, dp_epsilon);
}

// Defaults: inflation R + 0.05 m, tolerance two cells.
inline double default_clearance(const KinodynamicLimits& lim) { return lim.radius + 0.05; }
inline double default_dp_epsilon(const OccupancyGrid& grid) { return 2.0 * grid.resolution; }

}  // namespace ltdwa
