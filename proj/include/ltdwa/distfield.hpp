#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ltdwa/core.hpp"

namespace ltdwa {

struct NearestObstacle {
  double distance{std::numeric_limits<double>::infinity()};
  Vec2 site{};
  bool valid{false};
};

// Exact Euclidean distance transform to occupied cell centers, with the
// nearest occupied cell (feature transform) kept per cell.
class GridDistanceTransform {
 public:
  GridDistanceTransform() = default;

  explicit GridDistanceTransform(const OccupancyGrid& grid)
      : origin_(grid.origin), resolution_(grid.resolution), width_(grid.width),
        height_(grid.height) {
    const std::size_t n = static_cast<std::size_t>(width_) * static_cast<std::size_t>(height_);
    sq_.assign(n, kInf);
    site_.assign(n, -1);
    build(grid);
  }

  bool empty() const { return empty_; }
  int width() const { return width_; }
  int height() const { return height_; }
  double resolution() const { return resolution_; }
  Vec2 origin() const { return origin_; }

  // Distance in meters from the center of (col, row) to the nearest occupied
  // cell center; +inf when the grid has no occupied cell.
  double cell_distance(int col, int row) const {
    const double sq = sq_[index(col, row)];
    return sq == kInf ? kInf : resolution_ * std::sqrt(sq);
  }

  Vec2 cell_center(int col, int row) const {
    return {origin_.x + (col + 0.5) * resolution_, origin_.y + (row + 0.5) * resolution_};
  }

  // Nearest occupied cell center for an arbitrary point. Candidates are the
  // feature-transform sites of the 3x3 cells around the query's nearest cell
  // (clamped to the grid), measured from the unclamped query.
  NearestObstacle nearest(double x, double y) const {
    NearestObstacle out;
    if (empty_) return out;
    const int c0 = clamp_col(static_cast<int>(std::lround((x - origin_.x) / resolution_ - 0.5)));
    const int r0 = clamp_row(static_cast<int>(std::lround((y - origin_.y) / resolution_ - 0.5)));
    double best = kInf;
    int best_site = -1;
    for (int dr = -1; dr <= 1; ++dr) {
      const int r = r0 + dr;
      if (r < 0 || r >= height_) continue;
      for (int dc = -1; dc <= 1; ++dc) {
        const int c = c0 + dc;
        if (c < 0 || c >= width_) continue;
        const int s = site_[index(c, r)];
        if (s < 0 || s == best_site) continue;
        const Vec2 p = cell_center(s % width_, s / width_);
        const double d2 = (x - p.x) * (x - p.x) + (y - p.y) * (y - p.y);
        if (d2 < best) {
          best = d2;
          best_site = s;
        }
      }
    }
    out.valid = best_site >= 0;
    if (out.valid) {
      out.distance = std::sqrt(best);
      out.site = cell_center(best_site % width_, best_site / width_);
    }
    return out;
  }

  double distance_at(double x, double y) const { return nearest(x, y).distance; }

 private:
  static constexpr double kInf = std::numeric_limits<double>::infinity();

  std::size_t index(int col, int row) const {
    return static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(col);
  }
  int clamp_col(int c) const { return std::clamp(c, 0, width_ - 1); }
  int clamp_row(int r) const { return std::clamp(r, 0, height_ - 1); }

  void build(const OccupancyGrid& grid) {
    // Column pass: 1D distance (in cells) to the nearest occupied cell of the
    // same column, and that cell's row.
    std::vector<double> col_dist(sq_.size(), kInf);
    std::vector<int> col_site_row(sq_.size(), -1);
    empty_ = true;
    for (int c = 0; c < width_; ++c) {
      int last = -1;
      for (int r = 0; r < height_; ++r) {
        if (grid.occupied(c, r)) {
          last = r;
          empty_ = false;
        }
        if (last >= 0) {
          col_dist[index(c, r)] = r - last;
          col_site_row[index(c, r)] = last;
        }
      }
      last = -1;
      for (int r = height_ - 1; r >= 0; --r) {
        if (grid.occupied(c, r)) last = r;
        if (last >= 0 && (last - r) < col_dist[index(c, r)]) {
          col_dist[index(c, r)] = last - r;
          col_site_row[index(c, r)] = last;
        }
      }
    }
    if (empty_) return;

    // Row pass: lower envelope of parabolas (c - q)^2 + g(q)^2.
    std::vector<int> v(static_cast<std::size_t>(width_));
    std::vector<double> z(static_cast<std::size_t>(width_) + 1);
    for (int r = 0; r < height_; ++r) {
      auto f = [&](int q) {
        const double g = col_dist[index(q, r)];
        return g * g;
      };
      int k = -1;
      for (int q = 0; q < width_; ++q) {
        if (col_dist[index(q, r)] == kInf) continue;
        if (k < 0) {
          k = 0;
          v[0] = q;
          z[0] = -kInf;
          z[1] = kInf;
          continue;
        }
        auto intersect = [&](int p) {
          return ((f(q) + static_cast<double>(q) * q) - (f(p) + static_cast<double>(p) * p)) /
                 (2.0 * q - 2.0 * p);
        };
        // z[0] is -inf, so the loop stops at k == 0 at the latest.
        double s = intersect(v[static_cast<std::size_t>(k)]);
        while (s <= z[static_cast<std::size_t>(k)]) {
          --k;
          s = intersect(v[static_cast<std::size_t>(k)]);
        }
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        z[static_cast<std::size_t>(k)] = s;
        z[static_cast<std::size_t>(k) + 1] = kInf;
      }
      if (k < 0) continue;
      int j = 0;
      for (int c = 0; c < width_; ++c) {
        while (z[static_cast<std::size_t>(j) + 1] < c) ++j;
        const int q = v[static_cast<std::size_t>(j)];
        const double dc = c - q;
        sq_[index(c, r)] = dc * dc + f(q);
        site_[index(c, r)] = static_cast<int>(index(q, col_site_row[index(q, r)]));
      }
    }
  }

  Vec2 origin_{};
  double resolution_{1.0};
  int width_{0};
  int height_{0};
  bool empty_{true};
  std::vector<double> sq_;  // squared distance in cell units
  std::vector<int> site_;   // flat index of the nearest occupied cell
};

inline GridDistanceTransform build_grid_distance_transform(const OccupancyGrid& grid) {
  return GridDistanceTransform(grid);
}

// Quadratic proximity penalty (Relu(eta - Relu(dist - R)))^2 for a given
// center distance.
inline double grid_penalty(double dist, double robot_radius, double eta) {
  const double delta = std::max(dist - robot_radius, 0.0);
  const double gap = std::max(eta - delta, 0.0);
  return gap * gap;
}

inline double grid_field_value(const GridDistanceTransform& edt, double x, double y,
                               double robot_radius, double eta) {
  if (edt.empty()) return 0.0;
  return grid_penalty(edt.distance_at(x, y), robot_radius, eta);
}

/// Per-agent shape of the velocity-elongated Gaussian.
struct AgentKernel {
  Vec2 position{};
  Vec2 velocity{};
  Vec2 heading{};  // unit velocity; zero for static agents
  bool moving{false};
  double sigma_y{1.0};
  double sigma_x_front{1.0};

  AgentKernel() = default;
  AgentKernel(const Agent& a, double robot_radius, double eta, double beta)
      : position(a.position()), velocity{a.vx, a.vy} {
    const double speed = a.speed();
    sigma_y = (a.r + robot_radius + eta) / 3.0;
    moving = speed > 0.0;
    if (moving) {
      heading = {a.vx / speed, a.vy / speed};
      sigma_x_front = (a.r + robot_radius + eta + beta * speed) / 3.0;
    } else {
      sigma_x_front = sigma_y;
    }
  }

  // Exponent of the Gaussian (value = exp(-exponent)) and its gradient with
  // respect to the query, for a kernel centered at `center`.
  double exponent(Vec2 center, double x, double y, Vec2* grad) const {
    const double dx = x - center.x;
    const double dy = y - center.y;
    if (!moving) {
      const double inv = 1.0 / (sigma_y * sigma_y);
      if (grad) *grad = {dx * inv, dy * inv};
      return 0.5 * (dx * dx + dy * dy) * inv;
    }
    // Bearing relative to the velocity: cos(alpha) > 0 selects the elongated
    // front lobe.
    const double lx = dx * heading.x + dy * heading.y;
    const double ly = -dx * heading.y + dy * heading.x;
    const double sx = lx > 0.0 ? sigma_x_front : sigma_y;
    const double ix = 1.0 / (sx * sx);
    const double iy = 1.0 / (sigma_y * sigma_y);
    if (grad) {
      *grad = {lx * ix * heading.x - ly * iy * heading.y, lx * ix * heading.y + ly * iy * heading.x};
    }
    return 0.5 * (lx * lx * ix + ly * ly * iy);
  }
};

inline double agent_field_value(std::span<const Agent> agents, int frame, double x, double y,
                                const PlannerParams& params, double robot_radius) {
  double best = std::numeric_limits<double>::infinity();
  for (const Agent& a : agents) {
    const AgentKernel k(a, robot_radius, params.eta, params.beta);
    best = std::min(best, k.exponent(a.predicted(frame * params.dt), x, y, nullptr));
  }
  return agents.empty() ? 0.0 : std::exp(-best);
}

enum class FieldMode {
  TimeVarying,
  // Ablation baseline: agents frozen at frame 0 as isotropic discs.
  Traditional,
};

struct FieldSample {
  double value{0.0};
  double agent_term{0.0};  // w_do * d^O
  double grid_term{0.0};   // w_db * d^B
  Vec2 gradient{};
  bool agent_branch{true};
  // Distance to the nearest switch of the max structure (agent vs grid, or
  // between the two dominant agents), in value units.
  double tie_gap{std::numeric_limits<double>::infinity()};
};

/// The N+1 per-frame fields d_i = max(w_do d_i^O, w_db d_i^B).
class TimeVaryingDistanceFields {
 public:
  TimeVaryingDistanceFields(std::vector<Agent> agents,
                            std::shared_ptr<const GridDistanceTransform> edt,
                            const PlannerParams& params, double robot_radius,
                            FieldMode mode = FieldMode::TimeVarying)
      : agents_(std::move(agents)), edt_(std::move(edt)), params_(params),
        robot_radius_(robot_radius), mode_(mode) {
    kernels_.reserve(agents_.size());
    for (const Agent& a : agents_) {
      Agent shaped = a;
      if (mode_ == FieldMode::Traditional) shaped.vx = shaped.vy = 0.0;
      kernels_.emplace_back(shaped, robot_radius_, params_.eta, params_.beta);
    }
  }

  int frames() const { return params_.n + 1; }
  FieldMode mode() const { return mode_; }
  const std::vector<Agent>& agents() const { return agents_; }
  const std::shared_ptr<const GridDistanceTransform>& edt() const { return edt_; }
  const PlannerParams& params() const { return params_; }
  double robot_radius() const { return robot_radius_; }

  double value(int frame, double x, double y) const { return sample(frame, x, y, false).value; }

  Vec2 gradient(int frame, double x, double y) const {
    return sample(frame, x, y, true).gradient;
  }

  FieldSample sample(int frame, double x, double y, bool with_gradient = true) const {
    check_frame(frame);
    FieldSample out;

    // Agent component: max of exp(-e) is exp(-min e).
    double e1 = std::numeric_limits<double>::infinity();
    double e2 = e1;
    Vec2 agent_grad{};
    for (const AgentKernel& k : kernels_) {
      Vec2 g;
      const double e = k.exponent(center(k, frame), x, y, with_gradient ? &g : nullptr);
      if (e < e1) {
        e2 = e1;
        e1 = e;
        agent_grad = g;
      } else if (e < e2) {
        e2 = e;
      }
    }
    const double d_o = kernels_.empty() ? 0.0 : std::exp(-e1);
    out.agent_term = params_.w_do * d_o;
    if (kernels_.size() > 1) {
      out.tie_gap = out.agent_term - params_.w_do * std::exp(-e2);
    }

    double grid_term = 0.0;
    Vec2 grid_grad{};
    if (edt_ && !edt_->empty()) {
      const NearestObstacle nb = edt_->nearest(x, y);
      const double delta = nb.distance - robot_radius_;
      grid_term = params_.w_db * grid_penalty(nb.distance, robot_radius_, params_.eta);
      if (with_gradient && delta > 0.0 && delta < params_.eta && nb.distance > 0.0) {
        const double scale = -2.0 * params_.w_db * (params_.eta - delta) / nb.distance;
        grid_grad = {scale * (x - nb.site.x), scale * (y - nb.site.y)};
      }
    }
    out.grid_term = grid_term;

    out.agent_branch = out.agent_term >= grid_term;
    if (out.agent_branch) {
      out.value = out.agent_term;
      out.gradient = {-out.agent_term * agent_grad.x, -out.agent_term * agent_grad.y};
    } else {
      out.value = grid_term;
      out.gradient = grid_grad;
    }
    if (!kernels_.empty() && edt_ && !edt_->empty()) {
      out.tie_gap = std::min(out.tie_gap, std::abs(out.agent_term - grid_term));
    }
    return out;
  }

 private:
  void check_frame(int frame) const {
    if (frame < 0 || frame > params_.n) {
      throw Error(ErrorKind::FrameOutOfRange,
                  "frame " + std::to_string(frame) + " outside [0, " + std::to_string(params_.n) +
                      "]");
    }
  }

  Vec2 center(const AgentKernel& k, int frame) const {
    if (mode_ == FieldMode::Traditional) return k.position;
    const double t = frame * params_.dt;
    return {k.position.x + t * k.velocity.x, k.position.y + t * k.velocity.y};
  }

  std::vector<Agent> agents_;
  std::vector<AgentKernel> kernels_;
  std::shared_ptr<const GridDistanceTransform> edt_;
  PlannerParams params_;
  double robot_radius_;
  FieldMode mode_;
};

inline double field_value(const TimeVaryingDistanceFields& fields, int frame, double x, double y) {
  return fields.value(frame, x, y);
}

inline Vec2 field_gradient(const TimeVaryingDistanceFields& fields, int frame, double x, double y) {
  return fields.gradient(frame, x, y);
}

// ---------------------------------------------------------------------------
// Grid file formats.
//
// ASCII grid file:
//   P2
//   # optional comment lines
//   <width> <height>
//   <resolution>
//   <origin_x> <origin_y>
//   <height rows of width 0/1 values, top row (largest y) first>
//
// JSON grid: {"origin": [x, y], "resolution": r, "width": w, "height": h,
//             "rows": ["0100...", ...]} with the same top-first row order.

namespace detail {

inline std::string strip_comments(std::istream& in) {
  std::string out, line;
  while (std::getline(in, line)) {
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    out += line;
    out += '\n';
  }
  return out;
}

}  // namespace detail

inline OccupancyGrid parse_grid_text(std::istream& raw) {
  std::istringstream in(detail::strip_comments(raw));
  std::string magic;
  in >> magic;
  if (magic != "P2") throw Error(ErrorKind::ConfigError, "grid file must start with 'P2'");
  int w = 0, h = 0;
  double res = 0.0, ox = 0.0, oy = 0.0;
  if (!(in >> w >> h >> res >> ox >> oy)) {
    throw Error(ErrorKind::ConfigError, "grid header must be: width height resolution ox oy");
  }
  OccupancyGrid grid({ox, oy}, res, w, h);
  for (int row = h - 1; row >= 0; --row) {
    for (int col = 0; col < w; ++col) {
      int v = 0;
      if (!(in >> v) || (v != 0 && v != 1)) {
        throw Error(ErrorKind::ConfigError, "grid cells must be 0/1 and complete");
      }
      grid.set(col, row, v == 1);
    }
  }
  return grid;
}

inline OccupancyGrid load_grid_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ConfigError, "cannot open grid file '" + path + "'");
  return parse_grid_text(in);
}

inline void write_grid_text(std::ostream& out, const OccupancyGrid& grid) {
  out << "P2\n" << grid.width << ' ' << grid.height << '\n';
  out << grid.resolution << '\n' << grid.origin.x << ' ' << grid.origin.y << '\n';
  for (int row = grid.height - 1; row >= 0; --row) {
    for (int col = 0; col < grid.width; ++col) {
      out << (grid.occupied(col, row) ? '1' : '0') << (col + 1 < grid.width ? ' ' : '\n');
    }
  }
}

inline void save_grid_file(const std::string& path, const OccupancyGrid& grid) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::ConfigError, "cannot write grid file '" + path + "'");
  out.precision(17);
  write_grid_text(out, grid);
}

inline nlohmann::json grid_to_json(const OccupancyGrid& grid) {
  nlohmann::json rows = nlohmann::json::array();
  for (int row = grid.height - 1; row >= 0; --row) {
    std::string s(static_cast<std::size_t>(grid.width), '0');
    for (int col = 0; col < grid.width; ++col) {
      if (grid.occupied(col, row)) s[static_cast<std::size_t>(col)] = '1';
    }
    rows.push_back(std::move(s));
  }
  return {{"origin", {grid.origin.x, grid.origin.y}},
          {"resolution", grid.resolution},
          {"width", grid.width},
          {"height", grid.height},
          {"rows", rows}};
}

inline OccupancyGrid grid_from_json(const nlohmann::json& j) {
  try {
    const auto origin = j.at("origin");
    OccupancyGrid grid({origin.at(0).get<double>(), origin.at(1).get<double>()},
                       j.at("resolution").get<double>(), j.at("width").get<int>(),
                       j.at("height").get<int>());
    const auto& rows = j.at("rows");
    if (!rows.is_array() || static_cast<int>(rows.size()) != grid.height) {
      throw Error(ErrorKind::ConfigError, "grid 'rows' must have 'height' entries");
    }
    for (int i = 0; i < grid.height; ++i) {
      const std::string s = rows.at(static_cast<std::size_t>(i)).get<std::string>();
      if (static_cast<int>(s.size()) != grid.width) {
        throw Error(ErrorKind::ConfigError, "grid row length must equal 'width'");
      }
      for (int col = 0; col < grid.width; ++col) {
        const char ch = s[static_cast<std::size_t>(col)];
        if (ch != '0' && ch != '1') throw Error(ErrorKind::ConfigError, "grid rows must be 0/1");
        grid.set(col, grid.height - 1 - i, ch == '1');
      }
    }
    return grid;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ConfigError, std::string("bad grid object: ") + e.what());
  }
}

}  // namespace ltdwa
