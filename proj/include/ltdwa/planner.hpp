#pragma once

#include <chrono>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ltdwa/core.hpp"
#include "ltdwa/distfield.hpp"
#include "ltdwa/ebmpc.hpp"
#include "ltdwa/navref.hpp"
#include "ltdwa/rng.hpp"
#include "ltdwa/tree.hpp"

namespace ltdwa {

struct AblationConfig {
  bool optimizer_enabled{true};
  SamplingMode sampling{SamplingMode::Voxel};
  FieldMode field{FieldMode::TimeVarying};

  // Row label used in reports.
  std::string label() const {
    if (optimizer_enabled && sampling == SamplingMode::Voxel && field == FieldMode::TimeVarying) {
      return "Complete";
    }
    std::string out;
    auto add = [&out](const char* part) {
      if (!out.empty()) out += " + ";
      out += part;
    };
    if (!optimizer_enabled) add("No Opt.");
    if (sampling == SamplingMode::Random) add("Rand.");
    if (field == FieldMode::Traditional) add("Trad.");
    return out;
  }
};

struct PlanResult {
  ReferencePath reference;
  InitialSequence initial;
  StateSequence padded;        // initial sequence extended to N+1 states
  OptimizedSequence optimized;  // empty states when the optimizer is off or skipped
  StateSequence final_states;  // projected, replayable sequence the command comes from
  ControlInput command;
  TreeBuildStats stats;
  StateCostTree tree;  // kept only on request
  bool optimizer_ran{false};
  bool fallback{false};  // optimized rollout rejected in favour of the initial one
  double latency_ms{0.0};

  bool degenerate() const { return initial.degenerate; }
  bool numerical_failure() const { return optimized.numerical_failure; }
};

/// One planning cycle: fields, reference, tree, optimization, projection and
/// command. Stateless between cycles apart from the seed; safe to share
/// across threads as long as each call has its own arguments.
class LocalPlanner {
 public:
  LocalPlanner(PlannerConfig config, AblationConfig ablation = {}, LmSettings lm = {},
               std::uint64_t base_seed = 0,
               std::shared_ptr<const GridDistanceTransform> edt = nullptr)
      : config_(std::move(config)),
        ablation_(ablation),
        lm_(lm),
        base_seed_(base_seed),
        edt_(std::move(edt)) {
    config_.params.validate();
    config_.limits.validate();
    lm_.validate();
  }

  const PlannerConfig& config() const { return config_; }
  const AblationConfig& ablation() const { return ablation_; }
  const std::shared_ptr<const GridDistanceTransform>& edt() const { return edt_; }

  TimeVaryingDistanceFields make_fields(std::span<const Agent> agents) const {
    return TimeVaryingDistanceFields(std::vector<Agent>(agents.begin(), agents.end()), edt_,
                                     config_.params, config_.limits.radius, ablation_.field);
  }

  PlanResult plan(const RobotState& robot, std::span<const Agent> agents,
                  const NavigationPath& nav, std::uint64_t cycle, bool keep_tree = false) const {
    const auto t0 = std::chrono::steady_clock::now();
    const PlannerParams& params = config_.params;
    const KinodynamicLimits& lim = config_.limits;
    PlanResult out;

    const TimeVaryingDistanceFields fields = make_fields(agents);
    out.reference = reference_path(nav, robot, params, lim);
    const CollisionContext ctx(agents, edt_, lim.radius, params.dt, params.n);
    CounterRng rng(derive_seed(base_seed_, "ltdwa.sampling", cycle));
    StateCostTree tree =
        build_tree(robot, out.reference, fields, ctx, lim, params, rng, ablation_.sampling, &out.stats);
    out.initial = backtrack_best(tree, params.n);
    if (keep_tree) out.tree = std::move(tree);

    out.padded = pad_sequence(out.initial.states, params.n, lim, params.dt);
    const StateSequence projected_initial = project_feasible(out.padded, params.dt, lim);

    // A root-only tree means every expansion collided: brake instead of
    // optimizing through obstacles.
    const bool can_optimize = ablation_.optimizer_enabled && out.initial.states.size() >= 2;
    if (can_optimize) {
      const TrajectoryGraph graph = build_graph(out.padded, fields, out.reference, lim, params);
      out.optimized = optimize(graph, out.padded, lm_);
      out.optimizer_ran = true;
      if (!out.optimized.numerical_failure) {
        out.final_states = project_feasible(out.optimized.states, params.dt, lim);
        const std::size_t checked = out.initial.states.size();
        for (std::size_t i = 1; i < checked && !out.fallback; ++i) {
          if (ctx.collides(out.final_states[i], static_cast<int>(i))) out.fallback = true;
        }
      }
      if (out.optimized.numerical_failure || out.fallback) out.final_states = projected_initial;
    } else {
      out.final_states = projected_initial;
    }
    out.command = extract_command(out.final_states, params.dt, lim);

    const auto t1 = std::chrono::steady_clock::now();
    out.latency_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    return out;
  }

 private:
  PlannerConfig config_;
  AblationConfig ablation_;
  LmSettings lm_;
  std::uint64_t base_seed_;
  std::shared_ptr<const GridDistanceTransform> edt_;
};

}  // namespace ltdwa
