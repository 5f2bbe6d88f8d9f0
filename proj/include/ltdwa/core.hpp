#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace ltdwa {

inline constexpr double kPi = std::numbers::pi;

enum class ErrorKind {
  ConfigError,
  InfeasibleState,
  EmptyGrid,
  FrameOutOfRange,
  NoPath,
  StartOccupied,
  GoalOccupied,
  EmptyPath,
  EmptyLayer,
  LengthMismatch,
  NumericalFailure,
  SequenceTooShort,
  TraceExhausted,
  UnknownFormat,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::InfeasibleState: return "InfeasibleState";
    case ErrorKind::EmptyGrid: return "EmptyGrid";
    case ErrorKind::FrameOutOfRange: return "FrameOutOfRange";
    case ErrorKind::NoPath: return "NoPath";
    case ErrorKind::StartOccupied: return "StartOccupied";
    case ErrorKind::GoalOccupied: return "GoalOccupied";
    case ErrorKind::EmptyPath: return "EmptyPath";
    case ErrorKind::EmptyLayer: return "EmptyLayer";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::NumericalFailure: return "NumericalFailure";
    case ErrorKind::SequenceTooShort: return "SequenceTooShort";
    case ErrorKind::TraceExhausted: return "TraceExhausted";
    case ErrorKind::UnknownFormat: return "UnknownFormat";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Wraps an angle into (-pi, pi].
inline double normalize_angle(double a) {
  double r = std::remainder(a, 2.0 * kPi);
  if (r <= -kPi) r += 2.0 * kPi;
  return r;
}

/// Shortest signed difference a - b, in (-pi, pi].
inline double angle_diff(double a, double b) { return normalize_angle(a - b); }

struct Vec2 {
  double x{0.0};
  double y{0.0};

  friend bool operator==(const Vec2&, const Vec2&) = default;
};

inline double distance(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

struct Pose2 {
  double x{0.0};
  double y{0.0};
  double theta{0.0};

  Vec2 position() const { return {x, y}; }
  friend bool operator==(const Pose2&, const Pose2&) = default;
};

// Planar differential-drive state (x, y, theta, v, omega).
struct RobotState {
  double x{0.0};
  double y{0.0};
  double theta{0.0};
  double v{0.0};
  double omega{0.0};

  Vec2 position() const { return {x, y}; }
  Pose2 pose() const { return {x, y, theta}; }
  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(theta) && std::isfinite(v) &&
           std::isfinite(omega);
  }

  friend bool operator==(const RobotState&, const RobotState&) = default;
};

struct ControlInput {
  double a_v{0.0};
  double a_omega{0.0};

  bool finite() const { return std::isfinite(a_v) && std::isfinite(a_omega); }
  friend bool operator==(const ControlInput&, const ControlInput&) = default;
};

struct KinodynamicLimits {
  double v_min{0.0};
  double v_max{1.0};
  double omega_min{-1.0};
  double omega_max{1.0};
  double a_v_min{-1.0};
  double a_v_max{1.0};
  double a_omega_min{-1.0};
  double a_omega_max{1.0};
  double radius{0.3};
  double sensing_range{3.5};

  void validate() const {
    auto check = [](bool ok, const char* msg) {
      if (!ok) throw Error(ErrorKind::ConfigError, msg);
    };
    check(v_min < v_max, "v_min must be < v_max");
    check(omega_min < omega_max, "omega_min must be < omega_max");
    check(a_v_min < a_v_max, "a_v_min must be < a_v_max");
    check(a_omega_min < a_omega_max, "a_omega_min must be < a_omega_max");
    check(radius > 0.0, "radius must be > 0");
    check(sensing_range > 0.0, "sensing_range must be > 0");
  }

  friend bool operator==(const KinodynamicLimits&, const KinodynamicLimits&) = default;
};

struct Agent {
  double x{0.0};
  double y{0.0};
  double vx{0.0};
  double vy{0.0};
  double r{0.3};

  Vec2 position() const { return {x, y}; }
  double speed() const { return std::hypot(vx, vy); }
  // Constant-velocity prediction after `t` seconds.
  Vec2 predicted(double t) const { return {x + t * vx, y + t * vy}; }

  friend bool operator==(const Agent&, const Agent&) = default;
};

// Row-major occupancy grid; cell (col, row) has its center at
// origin + ((col + 0.5) * resolution, (row + 0.5) * resolution).
struct OccupancyGrid {
  Vec2 origin{};
  double resolution{0.1};
  int width{0};
  int height{0};
  std::vector<std::uint8_t> cells;

  OccupancyGrid() = default;
  OccupancyGrid(Vec2 origin_, double resolution_, int width_, int height_)
      : origin(origin_), resolution(resolution_), width(width_), height(height_),
        cells(static_cast<std::size_t>(width_) * static_cast<std::size_t>(height_), 0) {
    if (!(resolution_ > 0.0) || width_ <= 0 || height_ <= 0) {
      throw Error(ErrorKind::ConfigError, "occupancy grid must have positive size and resolution");
    }
  }

  std::size_t index(int col, int row) const {
    return static_cast<std::size_t>(row) * static_cast<std::size_t>(width) +
           static_cast<std::size_t>(col);
  }
  bool in_bounds(int col, int row) const {
    return col >= 0 && row >= 0 && col < width && row < height;
  }
  bool occupied(int col, int row) const { return cells[index(col, row)] != 0; }
  void set(int col, int row, bool occ) { cells[index(col, row)] = occ ? 1 : 0; }

  Vec2 cell_center(int col, int row) const {
    return {origin.x + (col + 0.5) * resolution, origin.y + (row + 0.5) * resolution};
  }
  int col_of(double x) const { return static_cast<int>(std::floor((x - origin.x) / resolution)); }
  int row_of(double y) const { return static_cast<int>(std::floor((y - origin.y) / resolution)); }

  double extent_x() const { return width * resolution; }
  double extent_y() const { return height * resolution; }

  std::vector<Vec2> occupied_centers() const {
    std::vector<Vec2> out;
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c)
        if (occupied(c, r)) out.push_back(cell_center(c, r));
    return out;
  }

  friend bool operator==(const OccupancyGrid&, const OccupancyGrid&) = default;
};

struct PlannerParams {
  int n{15};
  double dt{0.2};
  double w_do{600.0};
  double w_db{200.0};
  double eta{0.3};
  double beta{1.0};
  int v_samples{8};
  int k_prime{400};
  int w_voxels{12};
  double gamma{0.9};
  double w_c{1.0};
  double w_no{5.0};
  double w_na{1.0};
  double w_nt{0.5};
  double w_nv{0.1};
  double w_omega{0.1};
  double w_a_v{0.1};
  double w_a_omega{0.1};

  void validate() const {
    auto check = [](bool ok, const char* msg) {
      if (!ok) throw Error(ErrorKind::ConfigError, msg);
    };
    check(n >= 1, "n must be >= 1");
    check(dt > 0.0, "dt must be > 0");
    check(gamma > 0.0 && gamma <= 1.0, "gamma must lie in (0, 1]");
    check(v_samples >= 2, "v_samples must be >= 2");
    check(w_voxels >= 1, "w_voxels must be >= 1");
    check(k_prime >= 1, "k_prime must be >= 1");
    check(eta >= 0.0 && beta >= 0.0, "eta and beta must be >= 0");
    for (double w : {w_do, w_db, w_c, w_no, w_na, w_nt, w_nv, w_omega, w_a_v, w_a_omega}) {
      check(w >= 0.0 && std::isfinite(w), "weights must be finite and >= 0");
    }
  }

  friend bool operator==(const PlannerParams&, const PlannerParams&) = default;
};

inline void to_json(nlohmann::json& j, const PlannerParams& p) {
  j = nlohmann::json{{"n", p.n},         {"dt", p.dt},           {"w_do", p.w_do},
                     {"w_db", p.w_db},   {"eta", p.eta},         {"beta", p.beta},
                     {"v_samples", p.v_samples},                 {"k_prime", p.k_prime},
                     {"w_voxels", p.w_voxels},                   {"gamma", p.gamma},
                     {"w_c", p.w_c},     {"w_no", p.w_no},       {"w_na", p.w_na},
                     {"w_nt", p.w_nt},   {"w_nv", p.w_nv},       {"w_omega", p.w_omega},
                     {"w_a_v", p.w_a_v}, {"w_a_omega", p.w_a_omega}};
}

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) {
      throw Error(ErrorKind::ConfigError, std::string("field '") + key + "' must be an integer");
    }
  } else {
    if (!v.is_number()) {
      throw Error(ErrorKind::ConfigError, std::string("field '") + key + "' must be a number");
    }
  }
  out = v.get<T>();
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known,
                           const char* what) {
  for (const auto& item : j.items()) {
    bool found = std::any_of(known.begin(), known.end(),
                             [&](const char* k) { return item.key() == k; });
    if (!found) {
      throw Error(ErrorKind::ConfigError,
                  std::string("unknown ") + what + " field '" + item.key() + "'");
    }
  }
}

}  // namespace detail

inline void from_json(const nlohmann::json& j, PlannerParams& p) {
  if (!j.is_object()) throw Error(ErrorKind::ConfigError, "planner params must be an object");
  detail::reject_unknown(j,
                         {"n", "dt", "w_do", "w_db", "eta", "beta", "v_samples", "k_prime",
                          "w_voxels", "gamma", "w_c", "w_no", "w_na", "w_nt", "w_nv", "w_omega",
                          "w_a_v", "w_a_omega"},
                         "planner");
  detail::read_field(j, "n", p.n);
  detail::read_field(j, "dt", p.dt);
  detail::read_field(j, "w_do", p.w_do);
  detail::read_field(j, "w_db", p.w_db);
  detail::read_field(j, "eta", p.eta);
  detail::read_field(j, "beta", p.beta);
  detail::read_field(j, "v_samples", p.v_samples);
  detail::read_field(j, "k_prime", p.k_prime);
  detail::read_field(j, "w_voxels", p.w_voxels);
  detail::read_field(j, "gamma", p.gamma);
  detail::read_field(j, "w_c", p.w_c);
  detail::read_field(j, "w_no", p.w_no);
  detail::read_field(j, "w_na", p.w_na);
  detail::read_field(j, "w_nt", p.w_nt);
  detail::read_field(j, "w_nv", p.w_nv);
  detail::read_field(j, "w_omega", p.w_omega);
  detail::read_field(j, "w_a_v", p.w_a_v);
  detail::read_field(j, "w_a_omega", p.w_a_omega);
}

inline void to_json(nlohmann::json& j, const KinodynamicLimits& l) {
  j = nlohmann::json{{"v_min", l.v_min},         {"v_max", l.v_max},
                     {"omega_min", l.omega_min}, {"omega_max", l.omega_max},
                     {"a_v_min", l.a_v_min},     {"a_v_max", l.a_v_max},
                     {"a_omega_min", l.a_omega_min}, {"a_omega_max", l.a_omega_max},
                     {"radius", l.radius},       {"sensing_range", l.sensing_range}};
}

inline void from_json(const nlohmann::json& j, KinodynamicLimits& l) {
  if (!j.is_object()) throw Error(ErrorKind::ConfigError, "limits must be an object");
  detail::reject_unknown(j,
                         {"v_min", "v_max", "omega_min", "omega_max", "a_v_min", "a_v_max",
                          "a_omega_min", "a_omega_max", "radius", "sensing_range"},
                         "limits");
  detail::read_field(j, "v_min", l.v_min);
  detail::read_field(j, "v_max", l.v_max);
  detail::read_field(j, "omega_min", l.omega_min);
  detail::read_field(j, "omega_max", l.omega_max);
  detail::read_field(j, "a_v_min", l.a_v_min);
  detail::read_field(j, "a_v_max", l.a_v_max);
  detail::read_field(j, "a_omega_min", l.a_omega_min);
  detail::read_field(j, "a_omega_max", l.a_omega_max);
  detail::read_field(j, "radius", l.radius);
  detail::read_field(j, "sensing_range", l.sensing_range);
}

inline void to_json(nlohmann::json& j, const RobotState& s) {
  j = nlohmann::json{{"x", s.x}, {"y", s.y}, {"theta", s.theta}, {"v", s.v}, {"omega", s.omega}};
}

inline void from_json(const nlohmann::json& j, RobotState& s) {
  s.x = j.at("x").get<double>();
  s.y = j.at("y").get<double>();
  s.theta = normalize_angle(j.value("theta", 0.0));
  s.v = j.value("v", 0.0);
  s.omega = j.value("omega", 0.0);
}

inline void to_json(nlohmann::json& j, const Agent& a) {
  j = nlohmann::json{{"x", a.x}, {"y", a.y}, {"vx", a.vx}, {"vy", a.vy}, {"r", a.r}};
}

inline void from_json(const nlohmann::json& j, Agent& a) {
  a.x = j.at("x").get<double>();
  a.y = j.at("y").get<double>();
  a.vx = j.value("vx", 0.0);
  a.vy = j.value("vy", 0.0);
  a.r = j.value("r", 0.3);
  if (!(a.r > 0.0)) throw Error(ErrorKind::ConfigError, "agent radius must be > 0");
}

/// Planner configuration: the planning parameters plus the robot's limits.
struct PlannerConfig {
  PlannerParams params{};
  KinodynamicLimits limits{};

  void validate() const {
    params.validate();
    limits.validate();
  }
};

// Config files hold the planner parameters at top level plus an optional
// "limits" object.
inline PlannerConfig parse_config(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorKind::ConfigError, "config must be a JSON object");
  PlannerConfig cfg;
  nlohmann::json planner = j;
  if (planner.contains("limits")) {
    cfg.limits = planner.at("limits").get<KinodynamicLimits>();
    planner.erase("limits");
  }
  cfg.params = planner.get<PlannerParams>();
  cfg.validate();
  return cfg;
}

inline nlohmann::json config_to_json(const PlannerConfig& cfg) {
  nlohmann::json j = cfg.params;
  j["limits"] = cfg.limits;
  return j;
}

inline PlannerConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ConfigError, "cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::ConfigError, path + ": " + e.what());
  }
  return parse_config(j);
}

// One explicit Euler step of the unicycle model: the pose advances with the
// current (v, omega), then the velocities advance with the control.
inline RobotState step_dynamics(const RobotState& s, const ControlInput& u, double dt) {
  assert(s.finite() && u.finite() && dt > 0.0);
  return RobotState{s.x + dt * s.v * std::cos(s.theta),
                    s.y + dt * s.v * std::sin(s.theta),
                    normalize_angle(s.theta + dt * s.omega),
                    s.v + dt * u.a_v,
                    s.omega + dt * u.a_omega};
}

inline RobotState clamp_to_limits(RobotState s, const KinodynamicLimits& lim) {
  s.v = std::clamp(s.v, lim.v_min, lim.v_max);
  s.omega = std::clamp(s.omega, lim.omega_min, lim.omega_max);
  return s;
}

inline ControlInput clamp_control(ControlInput u, const KinodynamicLimits& lim) {
  u.a_v = std::clamp(u.a_v, lim.a_v_min, lim.a_v_max);
  u.a_omega = std::clamp(u.a_omega, lim.a_omega_min, lim.a_omega_max);
  return u;
}

struct VelocityBox {
  double v_lo{0.0};
  double v_hi{0.0};
  double omega_lo{0.0};
  double omega_hi{0.0};
  // Set when the state lies outside the velocity limits and cannot reach them
  // within one step; the window is then collapsed onto the nearest limit.
  bool infeasible{false};

  bool contains(double v, double omega, double tol = 0.0) const {
    return v >= v_lo - tol && v <= v_hi + tol && omega >= omega_lo - tol && omega <= omega_hi + tol;
  }
};

namespace detail {

inline std::pair<double, double> window_axis(double value, double lo, double hi, double acc_lo,
                                             double acc_hi, double dt, bool& infeasible) {
  double a = std::max(lo, value + acc_lo * dt);
  double b = std::min(hi, value + acc_hi * dt);
  if (a > b) {
    infeasible = true;
    double nearest = value > hi ? hi : lo;
    return {nearest, nearest};
  }
  return {a, b};
}

}  // namespace detail

inline VelocityBox dynamic_window(const RobotState& s, const KinodynamicLimits& lim, double dt) {
  VelocityBox box;
  auto [v_lo, v_hi] =
      detail::window_axis(s.v, lim.v_min, lim.v_max, lim.a_v_min, lim.a_v_max, dt, box.infeasible);
  auto [w_lo, w_hi] = detail::window_axis(s.omega, lim.omega_min, lim.omega_max, lim.a_omega_min,
                                          lim.a_omega_max, dt, box.infeasible);
  box.v_lo = v_lo;
  box.v_hi = v_hi;
  box.omega_lo = w_lo;
  box.omega_hi = w_hi;
  return box;
}

}  // namespace ltdwa
