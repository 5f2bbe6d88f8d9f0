#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <ostream>
#include <span>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "ltdwa/core.hpp"
#include "ltdwa/distfield.hpp"
#include "ltdwa/navref.hpp"
#include "ltdwa/tree.hpp"

namespace ltdwa {

struct LmSettings {
  int max_iterations{200};
  double initial_lambda{1e-4};
  double lambda_up{10.0};
  double lambda_down{10.0};
  double residual_tolerance{1e-8};  // relative decrease of the squared residual
  double step_tolerance{1e-8};      // infinity norm of the accepted step

  void validate() const {
    if (max_iterations <= 0 || !(initial_lambda > 0.0) || !(lambda_up > 1.0) ||
        !(lambda_down > 1.0) || !(residual_tolerance > 0.0 && residual_tolerance < 1.0) ||
        !(step_tolerance > 0.0 && step_tolerance < 1.0)) {
      throw Error(ErrorKind::ConfigError, "invalid Levenberg-Marquardt settings");
    }
  }
};

using StateSequence = std::vector<RobotState>;
using Mat5 = Eigen::Matrix<double, 5, 5>;
using Vec5 = Eigen::Matrix<double, 5, 1>;

inline Vec5 to_vec(const RobotState& s) { return Vec5(s.x, s.y, s.theta, s.v, s.omega); }

inline double discount(const PlannerParams& params, int frame) {
  return std::pow(params.gamma, frame);
}

// Velocity the navigation term tracks at frame i: min(v_max, sqrt(2 a_max eps_i)).
inline double reference_speed(const ReferencePath& ref, int frame, const KinodynamicLimits& lim) {
  const double eps = ref.remaining[static_cast<std::size_t>(frame)];
  return std::min(lim.v_max, std::sqrt(2.0 * lim.a_v_max * std::max(eps, 0.0)));
}

/// Trajectory cost sum_{i=1..N} gamma^i (c_c + c_n + c_nv + c_j), evaluated
/// term by term.
inline double objective(std::span<const RobotState> seq, const TimeVaryingDistanceFields& fields,
                        const ReferencePath& ref, const PlannerParams& params,
                        const KinodynamicLimits& lim) {
  const std::size_t expected = static_cast<std::size_t>(params.n) + 1;
  if (seq.size() != expected || ref.size() != expected) {
    throw Error(ErrorKind::LengthMismatch, "objective needs N+1 states and reference poses");
  }
  double total = 0.0;
  for (int i = 1; i <= params.n; ++i) {
    const RobotState& s = seq[static_cast<std::size_t>(i)];
    const RobotState& prev = seq[static_cast<std::size_t>(i) - 1];
    const Pose2& p = ref.poses[static_cast<std::size_t>(i)];
    const double dx = s.x - p.x;
    const double dy = s.y - p.y;
    const double lon = dx * std::cos(p.theta) + dy * std::sin(p.theta);
    const double lat = -dx * std::sin(p.theta) + dy * std::cos(p.theta);
    const double head = 1.0 - std::cos(s.theta - p.theta);
    const double c_c = params.w_c * fields.value(i, s.x, s.y);
    const double dv = s.v - reference_speed(ref, i, lim);
    const double c_n = params.w_no * lon * lon + params.w_na * lat * lat +
                       params.w_nt * head * head + params.w_nv * dv * dv;
    const double a_v = (s.v - prev.v) / params.dt;
    const double a_w = (s.omega - prev.omega) / params.dt;
    const double c_j =
        params.w_omega * s.omega * s.omega + params.w_a_v * a_v * a_v + params.w_a_omega * a_w * a_w;
    total += discount(params, i) * (c_c + c_n + c_j);
  }
  return total;
}

enum class EdgeKind {
  Field,               // unary, 1
  Navigation,          // unary, 3: longitudinal, lateral, heading
  VelocityReference,   // unary, 1
  VelocityBounds,      // unary, 2: v and omega boxes
  Kinematic,           // binary, 3: x, y, theta transition
  Jitter,              // binary, 3: omega, linear and angular acceleration
  AccelerationBounds,  // binary, 2
};

inline constexpr int edge_dimension(EdgeKind k) {
  switch (k) {
    case EdgeKind::Field:
    case EdgeKind::VelocityReference: return 1;
    case EdgeKind::VelocityBounds:
    case EdgeKind::AccelerationBounds: return 2;
    case EdgeKind::Navigation:
    case EdgeKind::Kinematic:
    case EdgeKind::Jitter: return 3;
  }
  return 0;
}

inline constexpr bool is_binary(EdgeKind k) {
  return k == EdgeKind::Kinematic || k == EdgeKind::Jitter || k == EdgeKind::AccelerationBounds;
}

inline const char* to_string(EdgeKind k) {
  switch (k) {
    case EdgeKind::Field: return "field";
    case EdgeKind::Navigation: return "navigation";
    case EdgeKind::VelocityReference: return "velocity_reference";
    case EdgeKind::VelocityBounds: return "velocity_bounds";
    case EdgeKind::Kinematic: return "kinematic";
    case EdgeKind::Jitter: return "jitter";
    case EdgeKind::AccelerationBounds: return "acceleration_bounds";
  }
  return "?";
}

struct Edge {
  EdgeKind kind{EdgeKind::Field};
  int node{1};  // the edge's (later) node; binary edges also touch node - 1
};

struct EdgeEval {
  int dim{0};
  std::array<double, 3> r{};
  Eigen::Matrix<double, 3, 5> j_cur = Eigen::Matrix<double, 3, 5>::Zero();
  Eigen::Matrix<double, 3, 5> j_prev = Eigen::Matrix<double, 3, 5>::Zero();
};

/// Least-squares graph over states s_1..s_N (s_0 fixed). Holds a non-owning
/// pointer to the fields, which must outlive the graph.
class TrajectoryGraph {
 public:
  static constexpr double kConstraintWeight = 1e3;

  TrajectoryGraph(const RobotState& anchor, const TimeVaryingDistanceFields& fields,
                  ReferencePath ref, const KinodynamicLimits& lim, const PlannerParams& params)
      : anchor_(anchor), fields_(&fields), ref_(std::move(ref)), lim_(lim), params_(params) {
    for (int i = 1; i <= params_.n; ++i) {
      for (EdgeKind k : {EdgeKind::Field, EdgeKind::Navigation, EdgeKind::VelocityReference,
                         EdgeKind::VelocityBounds, EdgeKind::Kinematic, EdgeKind::Jitter,
                         EdgeKind::AccelerationBounds}) {
        edges_.push_back({k, i});
        residual_dim_ += edge_dimension(k);
      }
    }
  }

  int variable_count() const { return params_.n; }
  int residual_dimension() const { return residual_dim_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const RobotState& anchor() const { return anchor_; }
  const PlannerParams& params() const { return params_; }
  const KinodynamicLimits& limits() const { return lim_; }
  const ReferencePath& reference() const { return ref_; }
  const TimeVaryingDistanceFields& fields() const { return *fields_; }

  std::size_t count(EdgeKind k) const {
    return static_cast<std::size_t>(
        std::count_if(edges_.begin(), edges_.end(), [k](const Edge& e) { return e.kind == k; }));
  }

  EdgeEval evaluate(const Edge& e, std::span<const RobotState> seq, bool jacobians = true) const {
    EdgeEval out;
    out.dim = edge_dimension(e.kind);
    const int i = e.node;
    const RobotState& s = seq[static_cast<std::size_t>(i)];
    const RobotState& p = seq[static_cast<std::size_t>(i) - 1];
    const double g = discount(params_, i);
    const double dt = params_.dt;
    const double sw = std::sqrt(kConstraintWeight);
    switch (e.kind) {
      case EdgeKind::Field: {
        const FieldSample f = fields_->sample(i, s.x, s.y, jacobians);
        const double scale = g * params_.w_c;
        const double val = scale * f.value;
        if (val > 0.0) {
          out.r[0] = std::sqrt(val);
          if (jacobians) {
            const double k = scale / (2.0 * out.r[0]);
            out.j_cur(0, 0) = k * f.gradient.x;
            out.j_cur(0, 1) = k * f.gradient.y;
          }
        }
        break;
      }
      case EdgeKind::Navigation: {
        const Pose2& ref = ref_.poses[static_cast<std::size_t>(i)];
        const NavigationTerms t = navigation_terms(s, ref);
        const double c = std::cos(ref.theta);
        const double sn = std::sin(ref.theta);
        const double a = std::sqrt(g * params_.w_no);
        const double b = std::sqrt(g * params_.w_na);
        const double h = std::sqrt(g * params_.w_nt);
        out.r = {a * t.longitudinal, b * t.lateral, h * t.heading};
        if (jacobians) {
          out.j_cur(0, 0) = a * c;
          out.j_cur(0, 1) = a * sn;
          out.j_cur(1, 0) = -b * sn;
          out.j_cur(1, 1) = b * c;
          out.j_cur(2, 2) = h * std::sin(s.theta - ref.theta);
        }
        break;
      }
      case EdgeKind::VelocityReference: {
        const double a = std::sqrt(g * params_.w_nv);
        out.r[0] = a * (s.v - reference_speed(ref_, i, lim_));
        if (jacobians) out.j_cur(0, 3) = a;
        break;
      }
      case EdgeKind::VelocityBounds: {
        const double ev = s.v - std::clamp(s.v, lim_.v_min, lim_.v_max);
        const double ew = s.omega - std::clamp(s.omega, lim_.omega_min, lim_.omega_max);
        out.r = {sw * ev, sw * ew, 0.0};
        if (jacobians) {
          if (ev != 0.0) out.j_cur(0, 3) = sw;
          if (ew != 0.0) out.j_cur(1, 4) = sw;
        }
        break;
      }
      case EdgeKind::Kinematic: {
        // Pose advances with the child's (v, omega) held over the step, the
        // same transition the tree expansion uses.
        const double c = std::cos(p.theta);
        const double sn = std::sin(p.theta);
        out.r = {sw * (s.x - p.x - dt * s.v * c), sw * (s.y - p.y - dt * s.v * sn),
                 sw * normalize_angle(s.theta - p.theta - dt * s.omega)};
        if (jacobians) {
          out.j_cur(0, 0) = sw;
          out.j_cur(0, 3) = -sw * dt * c;
          out.j_cur(1, 1) = sw;
          out.j_cur(1, 3) = -sw * dt * sn;
          out.j_cur(2, 2) = sw;
          out.j_cur(2, 4) = -sw * dt;
          out.j_prev(0, 0) = -sw;
          out.j_prev(0, 2) = sw * dt * s.v * sn;
          out.j_prev(1, 1) = -sw;
          out.j_prev(1, 2) = -sw * dt * s.v * c;
          out.j_prev(2, 2) = -sw;
        }
        break;
      }
      case EdgeKind::Jitter: {
        const double a = std::sqrt(g * params_.w_omega);
        const double b = std::sqrt(g * params_.w_a_v) / dt;
        const double h = std::sqrt(g * params_.w_a_omega) / dt;
        out.r = {a * s.omega, b * (s.v - p.v), h * (s.omega - p.omega)};
        if (jacobians) {
          out.j_cur(0, 4) = a;
          out.j_cur(1, 3) = b;
          out.j_prev(1, 3) = -b;
          out.j_cur(2, 4) = h;
          out.j_prev(2, 4) = -h;
        }
        break;
      }
      case EdgeKind::AccelerationBounds: {
        const double av = (s.v - p.v) / dt;
        const double aw = (s.omega - p.omega) / dt;
        const double ev = av - std::clamp(av, lim_.a_v_min, lim_.a_v_max);
        const double ew = aw - std::clamp(aw, lim_.a_omega_min, lim_.a_omega_max);
        out.r = {sw * ev, sw * ew, 0.0};
        if (jacobians) {
          if (ev != 0.0) {
            out.j_cur(0, 3) = sw / dt;
            out.j_prev(0, 3) = -sw / dt;
          }
          if (ew != 0.0) {
            out.j_cur(1, 4) = sw / dt;
            out.j_prev(1, 4) = -sw / dt;
          }
        }
        break;
      }
    }
    return out;
  }

  // Total squared residual. Equals `objective` whenever the kinematic and
  // bound residuals vanish.
  double cost(std::span<const RobotState> seq) const {
    check_length(seq);
    double total = 0.0;
    for (const Edge& e : edges_) {
      const EdgeEval ev = evaluate(e, seq, false);
      for (int k = 0; k < ev.dim; ++k) total += ev.r[static_cast<std::size_t>(k)] * ev.r[static_cast<std::size_t>(k)];
    }
    return total;
  }

  void check_length(std::span<const RobotState> seq) const {
    if (seq.size() != static_cast<std::size_t>(params_.n) + 1) {
      throw Error(ErrorKind::LengthMismatch, "graph needs N+1 states");
    }
  }

 private:
  RobotState anchor_;
  const TimeVaryingDistanceFields* fields_;
  ReferencePath ref_;
  KinodynamicLimits lim_;
  PlannerParams params_;
  std::vector<Edge> edges_;
  int residual_dim_{0};
};

// Extends a short sequence to N+1 states with a braking tail: velocities decay
// toward zero at the acceleration limits, then hold.
inline StateSequence pad_sequence(StateSequence seq, int horizon, const KinodynamicLimits& lim,
                                  double dt) {
  if (seq.empty()) throw Error(ErrorKind::SequenceTooShort, "cannot pad an empty sequence");
  auto toward_zero = [dt](double value, double dec_lo, double dec_hi) {
    if (value > 0.0) return std::max(value + dec_lo * dt, 0.0);
    if (value < 0.0) return std::min(value + dec_hi * dt, 0.0);
    return 0.0;
  };
  while (static_cast<int>(seq.size()) < horizon + 1) {
    const RobotState& s = seq.back();
    RobotState n = s;
    n.v = std::clamp(toward_zero(s.v, lim.a_v_min, lim.a_v_max), lim.v_min, lim.v_max);
    n.omega = std::clamp(toward_zero(s.omega, lim.a_omega_min, lim.a_omega_max), lim.omega_min,
                         lim.omega_max);
    n.x = s.x + dt * n.v * std::cos(s.theta);
    n.y = s.y + dt * n.v * std::sin(s.theta);
    n.theta = normalize_angle(s.theta + dt * n.omega);
    seq.push_back(n);
  }
  return seq;
}

inline TrajectoryGraph build_graph(std::span<const RobotState> init,
                                   const TimeVaryingDistanceFields& fields,
                                   const ReferencePath& ref, const KinodynamicLimits& lim,
                                   const PlannerParams& params) {
  if (init.size() != static_cast<std::size_t>(params.n) + 1 ||
      ref.size() != static_cast<std::size_t>(params.n) + 1) {
    throw Error(ErrorKind::LengthMismatch, "build_graph needs N+1 states; pad degenerate input");
  }
  return TrajectoryGraph(init.front(), fields, ref, lim, params);
}

/// Gauss-Newton system in block-tridiagonal form: diag[k] = H(k,k) and
/// lower[k] = H(k, k-1) for variable blocks k = 0..N-1 (states 1..N).
struct BlockTridiagonal {
  std::vector<Mat5> diag;
  std::vector<Mat5> lower;
  std::vector<Vec5> rhs;  // J^T r

  explicit BlockTridiagonal(int n = 0)
      : diag(static_cast<std::size_t>(n), Mat5::Zero()),
        lower(static_cast<std::size_t>(n), Mat5::Zero()),
        rhs(static_cast<std::size_t>(n), Vec5::Zero()) {}

  int blocks() const { return static_cast<int>(diag.size()); }

  // Solves (H + lambda * diag(H)) x = -rhs. Returns false when the damped
  // system is not positive definite.
  bool solve(double lambda, std::vector<Vec5>& x) const {
    const std::size_t n = diag.size();
    std::vector<Mat5> chol(n);
    std::vector<Mat5> link(n, Mat5::Zero());
    std::vector<Vec5> y(n);
    for (std::size_t k = 0; k < n; ++k) {
      Mat5 a = diag[k];
      for (int d = 0; d < 5; ++d) a(d, d) += lambda * std::max(diag[k](d, d), 1e-9);
      if (k > 0) {
        // link = H(k,k-1) * C_{k-1}^{-T}
        link[k] = chol[k - 1].triangularView<Eigen::Lower>().solve(lower[k].transpose()).transpose();
        a -= link[k] * link[k].transpose();
      }
      Eigen::LLT<Mat5> llt(a);
      if (llt.info() != Eigen::Success) return false;
      chol[k] = llt.matrixL();
      Vec5 b = -rhs[k];
      if (k > 0) b -= link[k] * y[k - 1];
      y[k] = chol[k].triangularView<Eigen::Lower>().solve(b);
    }
    x.assign(n, Vec5::Zero());
    for (std::size_t k = n; k-- > 0;) {
      Vec5 b = y[k];
      if (k + 1 < n) b -= link[k + 1].transpose() * x[k + 1];
      x[k] = chol[k].transpose().triangularView<Eigen::Upper>().solve(b);
    }
    for (const Vec5& v : x)
      if (!v.allFinite()) return false;
    return true;
  }
};

// Accumulates J^T J and J^T r. Returns the squared residual, or NaN when a
// residual or Jacobian is not finite.
inline double linearize(const TrajectoryGraph& graph, std::span<const RobotState> seq,
                        BlockTridiagonal& sys) {
  sys = BlockTridiagonal(graph.variable_count());
  double total = 0.0;
  for (const Edge& e : graph.edges()) {
    const EdgeEval ev = graph.evaluate(e, seq, true);
    const auto jc = ev.j_cur.topRows(ev.dim);
    const auto jp = ev.j_prev.topRows(ev.dim);
    Eigen::Vector3d r3(ev.r[0], ev.r[1], ev.r[2]);
    const auto r = r3.head(ev.dim);
    if (!r.allFinite() || !jc.allFinite() || !jp.allFinite()) {
      return std::numeric_limits<double>::quiet_NaN();
    }
    total += r.squaredNorm();
    const std::size_t cur = static_cast<std::size_t>(e.node) - 1;
    sys.diag[cur] += jc.transpose() * jc;
    sys.rhs[cur] += jc.transpose() * r;
    if (is_binary(e.kind) && e.node >= 2) {
      const std::size_t prev = cur - 1;
      sys.diag[prev] += jp.transpose() * jp;
      sys.rhs[prev] += jp.transpose() * r;
      sys.lower[cur] += jc.transpose() * jp;
    }
  }
  return total;
}

struct IterationTrace {
  int iteration{0};
  double lambda{0.0};
  double objective{0.0};
};

struct OptimizedSequence {
  StateSequence states;
  double initial_objective{0.0};  // graph cost of the input
  double final_objective{0.0};    // graph cost of `states`
  int iterations{0};
  bool converged{false};
  bool numerical_failure{false};
  std::vector<IterationTrace> trace;
};

inline OptimizedSequence optimize(const TrajectoryGraph& graph, std::span<const RobotState> init,
                                  const LmSettings& settings = {}) {
  graph.check_length(init);
  OptimizedSequence out;
  out.states.assign(init.begin(), init.end());

  BlockTridiagonal sys;
  double f = linearize(graph, out.states, sys);
  out.initial_objective = f;
  out.final_objective = f;
  if (!std::isfinite(f)) {
    out.numerical_failure = true;
    return out;
  }

  double lambda = settings.initial_lambda;
  StateSequence candidate = out.states;
  std::vector<Vec5> step;
  for (int it = 0; it < settings.max_iterations; ++it) {
    out.iterations = it + 1;
    bool accepted = false;
    double f_new = f;
    double step_norm = 0.0;
    while (lambda < 1e12) {
      if (sys.solve(lambda, step)) {
        step_norm = 0.0;
        for (int k = 0; k < graph.variable_count(); ++k) {
          const Vec5& d = step[static_cast<std::size_t>(k)];
          RobotState& s = candidate[static_cast<std::size_t>(k) + 1];
          const RobotState& base = out.states[static_cast<std::size_t>(k) + 1];
          s = RobotState{base.x + d[0], base.y + d[1], normalize_angle(base.theta + d[2]),
                         base.v + d[3], base.omega + d[4]};
          step_norm = std::max(step_norm, d.cwiseAbs().maxCoeff());
        }
        f_new = graph.cost(candidate);
        if (std::isfinite(f_new) && f_new < f) {
          accepted = true;
          break;
        }
      }
      lambda *= settings.lambda_up;
    }
    out.trace.push_back({it + 1, lambda, accepted ? f_new : f});
    if (!accepted) {
      // No descent direction left at any damping: a local minimum.
      out.converged = true;
      break;
    }
    const double decrease = (f - f_new) / std::max(f, 1e-300);
    out.states = candidate;
    f = f_new;
    lambda = std::max(lambda / settings.lambda_down, 1e-12);
    if (decrease < settings.residual_tolerance || step_norm < settings.step_tolerance) {
      out.converged = true;
      break;
    }
    const double relinearized = linearize(graph, out.states, sys);
    if (!std::isfinite(relinearized)) {
      out.states.assign(init.begin(), init.end());
      out.numerical_failure = true;
      out.converged = false;
      f = out.initial_objective;
      break;
    }
  }
  out.final_objective = f;
  return out;
}

struct GradientCheckReport {
  double max_error{0.0};
  std::size_t checked{0};
  std::size_t excluded{0};
};

// Compares every analytic Jacobian entry against central differences. The
// error of an entry is |analytic - numeric| / max(1, |analytic|, |numeric|).
// Edges at a non-differentiable point (branch ties of the field max, hinge
// kinks, proximity-field support edges) are skipped and counted.
inline GradientCheckReport check_gradients_report(const TrajectoryGraph& graph,
                                                  std::span<const RobotState> seq, double h) {
  graph.check_length(seq);
  GradientCheckReport rep;
  StateSequence work(seq.begin(), seq.end());
  const auto& lim = graph.limits();
  const auto& params = graph.params();
  const double margin = 10.0 * h;

  auto nonsmooth = [&](const Edge& e) {
    const RobotState& s = seq[static_cast<std::size_t>(e.node)];
    const RobotState& p = seq[static_cast<std::size_t>(e.node) - 1];
    auto near = [&](double a, double b) { return std::abs(a - b) < margin; };
    switch (e.kind) {
      case EdgeKind::Field: {
        const FieldSample f = graph.fields().sample(e.node, s.x, s.y, true);
        const double slope = 1.0 + std::hypot(f.gradient.x, f.gradient.y);
        if (f.tie_gap < 100.0 * h * slope) return true;
        if (!f.agent_branch) {
          const auto& edt = graph.fields().edt();
          const double d = edt->distance_at(s.x, s.y);
          const double r = graph.fields().robot_radius();
          if (near(d, r) || near(d, r + params.eta)) return true;
        }
        return false;
      }
      case EdgeKind::VelocityBounds:
        return near(s.v, lim.v_min) || near(s.v, lim.v_max) || near(s.omega, lim.omega_min) ||
               near(s.omega, lim.omega_max);
      case EdgeKind::AccelerationBounds: {
        const double av = (s.v - p.v) / params.dt;
        const double aw = (s.omega - p.omega) / params.dt;
        const double m = margin / params.dt;
        return std::abs(av - lim.a_v_min) < m || std::abs(av - lim.a_v_max) < m ||
               std::abs(aw - lim.a_omega_min) < m || std::abs(aw - lim.a_omega_max) < m;
      }
      default: return false;
    }
  };

  for (const Edge& e : graph.edges()) {
    if (nonsmooth(e)) {
      ++rep.excluded;
      continue;
    }
    const EdgeEval analytic = graph.evaluate(e, work, true);
    for (int which = 0; which < 2; ++which) {
      const int node = which == 0 ? e.node : e.node - 1;
      if (which == 1 && (!is_binary(e.kind) || node == 0)) continue;
      const auto& jac = which == 0 ? analytic.j_cur : analytic.j_prev;
      for (int c = 0; c < 5; ++c) {
        RobotState& s = work[static_cast<std::size_t>(node)];
        const RobotState saved = s;
        double* comp[5] = {&s.x, &s.y, &s.theta, &s.v, &s.omega};
        const double base = *comp[c];
        *comp[c] = base + h;
        const EdgeEval plus = graph.evaluate(e, work, false);
        *comp[c] = base - h;
        const EdgeEval minus = graph.evaluate(e, work, false);
        s = saved;
        for (int k = 0; k < analytic.dim; ++k) {
          const double numeric =
              (plus.r[static_cast<std::size_t>(k)] - minus.r[static_cast<std::size_t>(k)]) / (2.0 * h);
          const double a = jac(k, c);
          const double err =
              std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
          rep.max_error = std::max(rep.max_error, err);
          ++rep.checked;
        }
      }
    }
  }
  return rep;
}

inline double check_gradients(const TrajectoryGraph& graph, std::span<const RobotState> seq,
                              double h) {
  return check_gradients_report(graph, seq, h).max_error;
}

// Rolls the sequence out through step_dynamics from its first state, using the
// finite-difference controls clamped to the acceleration limits and to the
// velocity box. The result replays exactly.
inline StateSequence project_feasible(std::span<const RobotState> seq, double dt,
                                      const KinodynamicLimits& lim) {
  StateSequence out;
  if (seq.empty()) return out;
  out.reserve(seq.size());
  out.push_back(seq.front());
  for (std::size_t i = 1; i < seq.size(); ++i) {
    const RobotState& cur = out.back();
    ControlInput u{(seq[i].v - cur.v) / dt, (seq[i].omega - cur.omega) / dt};
    u.a_v = std::clamp(u.a_v, (lim.v_min - cur.v) / dt, (lim.v_max - cur.v) / dt);
    u.a_omega = std::clamp(u.a_omega, (lim.omega_min - cur.omega) / dt, (lim.omega_max - cur.omega) / dt);
    u = clamp_control(u, lim);
    out.push_back(step_dynamics(cur, u, dt));
  }
  return out;
}

inline ControlInput extract_command(std::span<const RobotState> seq, double dt,
                                    const KinodynamicLimits& lim) {
  if (seq.size() < 2) throw Error(ErrorKind::SequenceTooShort, "command needs two states");
  return clamp_control({(seq[1].v - seq[0].v) / dt, (seq[1].omega - seq[0].omega) / dt}, lim);
}

inline void write_trace_csv(std::ostream& out, const OptimizedSequence& opt) {
  out << "iteration,lambda,objective\n";
  for (const IterationTrace& t : opt.trace) {
    out << t.iteration << ',' << t.lambda << ',' << t.objective << '\n';
  }
}

}  // namespace ltdwa
