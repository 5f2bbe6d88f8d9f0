#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <vector>

#include "ltdwa/core.hpp"
#include "ltdwa/distfield.hpp"
#include "ltdwa/navref.hpp"
#include "ltdwa/rng.hpp"

namespace ltdwa {

struct TreeNode {
  RobotState state{};
  double cost{0.0};
  int parent{-1};  // index into the previous layer, -1 for the root
  int frame{0};
};

struct StateCostTree {
  std::vector<std::vector<TreeNode>> layers;

  // Index of the deepest layer (M); the tree has M + 1 layers.
  int depth() const { return static_cast<int>(layers.size()) - 1; }
  std::size_t node_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.size();
    return n;
  }
};

struct InitialSequence {
  std::vector<RobotState> states;
  bool degenerate{false};
};

/// Point-in-time disc checks against constant-velocity agent predictions and
/// the grid distance transform.
class CollisionContext {
 public:
  CollisionContext() = default;
  CollisionContext(std::span<const Agent> agents, std::shared_ptr<const GridDistanceTransform> edt,
                   double robot_radius, double dt, int frames)
      : edt_(std::move(edt)), robot_radius_(robot_radius) {
    const std::size_t per = agents.size();
    stride_ = per;
    centers_.resize(per * static_cast<std::size_t>(frames + 1));
    reach2_.resize(per);
    for (std::size_t k = 0; k < per; ++k) {
      const double reach = robot_radius + agents[k].r;
      reach2_[k] = reach * reach;
      for (int i = 0; i <= frames; ++i) {
        centers_[static_cast<std::size_t>(i) * per + k] = agents[k].predicted(i * dt);
      }
    }
    frames_ = frames;
  }

  // True when the robot disc at (x, y) overlaps an agent's frame-i disc or
  // comes within R of an occupied cell center.
  bool collides(double x, double y, int frame) const {
    const int f = std::clamp(frame, 0, frames_);
    const Vec2* c = centers_.data() + static_cast<std::size_t>(f) * stride_;
    for (std::size_t k = 0; k < stride_; ++k) {
      const double dx = x - c[k].x;
      const double dy = y - c[k].y;
      if (dx * dx + dy * dy <= reach2_[k]) return true;
    }
    if (edt_ && !edt_->empty() && edt_->distance_at(x, y) <= robot_radius_) return true;
    return false;
  }

  bool collides(const RobotState& s, int frame) const { return collides(s.x, s.y, frame); }

 private:
  std::shared_ptr<const GridDistanceTransform> edt_;
  double robot_radius_{0.3};
  std::vector<Vec2> centers_;
  std::vector<double> reach2_;
  std::size_t stride_{0};
  int frames_{0};
};

namespace detail {

// Appends the collision-free DWA children of `s` at frame `frame`; the child
// pose advances with the sampled (v, omega) held for one step.
template <typename Emit>
void for_each_expansion(const RobotState& s, const KinodynamicLimits& lim,
                        const PlannerParams& params, const CollisionContext& ctx, int frame,
                        Emit&& emit) {
  const VelocityBox box = dynamic_window(s, lim, params.dt);
  const int samples = params.v_samples;
  const double dv = (box.v_hi - box.v_lo) / (samples - 1);
  const double dw = (box.omega_hi - box.omega_lo) / (samples - 1);
  const double c = std::cos(s.theta);
  const double sn = std::sin(s.theta);
  for (int a = 0; a < samples; ++a) {
    const double v = a + 1 == samples ? box.v_hi : box.v_lo + a * dv;
    const double x = s.x + params.dt * v * c;
    const double y = s.y + params.dt * v * sn;
    // Position depends on v only, so one check covers the whole omega row.
    if (ctx.collides(x, y, frame)) continue;
    for (int b = 0; b < samples; ++b) {
      const double w = b + 1 == samples ? box.omega_hi : box.omega_lo + b * dw;
      emit(RobotState{x, y, normalize_angle(s.theta + params.dt * w), v, w});
    }
  }
}

}  // namespace detail

inline std::vector<RobotState> expand_states(const RobotState& s, const KinodynamicLimits& lim,
                                             const PlannerParams& params,
                                             const CollisionContext& ctx, int frame) {
  std::vector<RobotState> out;
  out.reserve(static_cast<std::size_t>(params.v_samples * params.v_samples));
  detail::for_each_expansion(s, lim, params, ctx, frame,
                             [&](const RobotState& child) { out.push_back(child); });
  return out;
}

/// Axis-aligned SE(2) voxel index of each node (W per axis) under the layer's
/// bounding box.
class VoxelGrid {
 public:
  VoxelGrid(std::span<const TreeNode> layer, int w) : w_(w) {
    lo_[0] = lo_[1] = lo_[2] = std::numeric_limits<double>::infinity();
    hi_[0] = hi_[1] = hi_[2] = -std::numeric_limits<double>::infinity();
    for (const TreeNode& n : layer) {
      const double v[3] = {n.state.x, n.state.y, n.state.theta};
      for (int a = 0; a < 3; ++a) {
        lo_[a] = std::min(lo_[a], v[a]);
        hi_[a] = std::max(hi_[a], v[a]);
      }
    }
  }

  int cells() const { return w_ * w_ * w_; }

  int index(const RobotState& s) const {
    const int ix = axis(s.x, 0);
    const int iy = axis(s.y, 1);
    const int it = axis(s.theta, 2);
    return ix + w_ * (iy + w_ * it);
  }

 private:
  int axis(double v, int a) const {
    const double span = hi_[a] - lo_[a];
    if (!(span > 0.0)) return 0;
    const int k = static_cast<int>(std::floor((v - lo_[a]) / span * w_));
    return std::clamp(k, 0, w_ - 1);
  }

  int w_;
  double lo_[3];
  double hi_[3];
};

// Keeps one uniformly chosen node per non-empty voxel (reservoir sampling in
// insertion order); output follows the voxels' first appearance.
inline std::vector<TreeNode> voxel_sampling(std::span<const TreeNode> layer, int w,
                                            CounterRng& rng) {
  if (layer.empty()) throw Error(ErrorKind::EmptyLayer, "voxel sampling of an empty layer");
  const VoxelGrid grid(layer, w);
  std::vector<int> count(static_cast<std::size_t>(grid.cells()), 0);
  std::vector<int> chosen(static_cast<std::size_t>(grid.cells()), -1);
  std::vector<int> order;
  for (std::size_t j = 0; j < layer.size(); ++j) {
    const auto key = static_cast<std::size_t>(grid.index(layer[j].state));
    const int k = ++count[key];
    if (k == 1) {
      chosen[key] = static_cast<int>(j);
      order.push_back(static_cast<int>(key));
    } else if (rng.below(static_cast<std::uint64_t>(k)) == 0) {
      chosen[key] = static_cast<int>(j);
    }
  }
  std::vector<TreeNode> out;
  out.reserve(order.size());
  for (int key : order) out.push_back(layer[static_cast<std::size_t>(chosen[static_cast<std::size_t>(key)])]);
  return out;
}

// Ablation baseline: min(k, |layer|) nodes drawn uniformly without
// replacement, kept in their original order.
inline std::vector<TreeNode> random_sampling(std::span<const TreeNode> layer, int k,
                                             CounterRng& rng) {
  if (layer.empty()) throw Error(ErrorKind::EmptyLayer, "random sampling of an empty layer");
  const std::size_t n = layer.size();
  const std::size_t m = std::min(n, static_cast<std::size_t>(k));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(m);
  std::sort(idx.begin(), idx.end());
  std::vector<TreeNode> out;
  out.reserve(m);
  for (std::size_t i : idx) out.push_back(layer[i]);
  return out;
}

struct NavigationTerms {
  double longitudinal{0.0};
  double lateral{0.0};
  double heading{0.0};  // 1 - cos(theta_s - theta_p)
};

inline NavigationTerms navigation_terms(const RobotState& s, const Pose2& p) {
  const double dx = s.x - p.x;
  const double dy = s.y - p.y;
  const double c = std::cos(p.theta);
  const double sn = std::sin(p.theta);
  return {dx * c + dy * sn, -dx * sn + dy * c, 1.0 - std::cos(s.theta - p.theta)};
}

/// gamma^i * (w_c d_i + w_no c_no + w_na c_na + w_nt c_nt).
inline double calc_cost(const RobotState& s, const Pose2& p, const TimeVaryingDistanceFields& fields,
                        int frame, const PlannerParams& params) {
  const NavigationTerms t = navigation_terms(s, p);
  const double c_c = params.w_c * fields.value(frame, s.x, s.y);
  const double c_n = params.w_no * t.longitudinal * t.longitudinal +
                     params.w_na * t.lateral * t.lateral + params.w_nt * t.heading * t.heading;
  return std::pow(params.gamma, frame) * (c_c + c_n);
}

enum class SamplingMode { Voxel, Random };

struct TreeBuildStats {
  std::size_t expanded{0};          // children generated before the K' gate
  std::size_t max_layer_before{0};  // largest pre-sampling layer
  std::size_t max_layer_after{0};
};

inline StateCostTree build_tree(const RobotState& robot, const ReferencePath& ref,
                                const TimeVaryingDistanceFields& fields,
                                const CollisionContext& ctx, const KinodynamicLimits& lim,
                                const PlannerParams& params, CounterRng& rng,
                                SamplingMode mode = SamplingMode::Voxel,
                                TreeBuildStats* stats = nullptr) {
  if (static_cast<int>(ref.size()) != params.n + 1 || fields.frames() != params.n + 1) {
    throw Error(ErrorKind::LengthMismatch, "reference path and fields must have N+1 frames");
  }
  StateCostTree tree;
  tree.layers.push_back({TreeNode{robot, 0.0, -1, 0}});
  std::vector<TreeNode> next;
  for (int i = 1; i <= params.n; ++i) {
    next.clear();
    const auto& prev = tree.layers.back();
    for (std::size_t p = 0; p < prev.size(); ++p) {
      detail::for_each_expansion(prev[p].state, lim, params, ctx, i, [&](const RobotState& s) {
        next.push_back(TreeNode{s, 0.0, static_cast<int>(p), i});
      });
    }
    if (stats) {
      stats->expanded += next.size();
      stats->max_layer_before = std::max(stats->max_layer_before, next.size());
    }
    std::vector<TreeNode> layer;
    if (static_cast<int>(next.size()) > params.k_prime) {
      layer = mode == SamplingMode::Voxel ? voxel_sampling(next, params.w_voxels, rng)
                                          : random_sampling(next, params.k_prime, rng);
    } else {
      layer = next;
    }
    const Pose2& p_i = ref.poses[static_cast<std::size_t>(i)];
    for (TreeNode& n : layer) {
      n.cost = prev[static_cast<std::size_t>(n.parent)].cost +
               calc_cost(n.state, p_i, fields, i, params);
    }
    if (layer.empty()) break;
    if (stats) stats->max_layer_after = std::max(stats->max_layer_after, layer.size());
    tree.layers.push_back(std::move(layer));
  }
  return tree;
}

inline InitialSequence backtrack_best(const StateCostTree& tree, int horizon) {
  InitialSequence out;
  if (tree.layers.empty()) return out;
  const auto& last = tree.layers.back();
  std::size_t best = 0;
  for (std::size_t k = 1; k < last.size(); ++k) {
    if (last[k].cost < last[best].cost) best = k;
  }
  int layer = tree.depth();
  int idx = static_cast<int>(best);
  while (layer >= 0) {
    const TreeNode& n = tree.layers[static_cast<std::size_t>(layer)][static_cast<std::size_t>(idx)];
    out.states.push_back(n.state);
    idx = n.parent;
    --layer;
  }
  std::reverse(out.states.begin(), out.states.end());
  out.degenerate = tree.depth() < horizon;
  return out;
}

// One JSON object per line: frame, state, cost, parent index.
inline void dump_tree_jsonl(std::ostream& out, const StateCostTree& tree) {
  for (const auto& layer : tree.layers) {
    for (const TreeNode& n : layer) {
      nlohmann::json j{{"frame", n.frame},
                       {"state", {n.state.x, n.state.y, n.state.theta, n.state.v, n.state.omega}},
                       {"cost", n.cost},
                       {"parent", n.parent}};
      out << j.dump() << '\n';
    }
  }
}

}  // namespace ltdwa
