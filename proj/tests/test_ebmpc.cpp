#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <memory>
#include <sstream>

#include "ltdwa/ebmpc.hpp"
#include "ltdwa/planner.hpp"

namespace ltdwa {
namespace {

const NavigationPath kLongLine = NavigationPath::straight_line({0, 0}, {100, 0});

// Sequence sitting exactly on the reference poses with the given velocities.
StateSequence on_reference(const ReferencePath& ref, double v) {
  StateSequence seq;
  for (const Pose2& p : ref.poses) seq.push_back({p.x, p.y, p.theta, v, 0});
  return seq;
}

double geometric(double gamma, int n) {
  double s = 0;
  double g = 1;
  for (int i = 1; i <= n; ++i) {
    g *= gamma;
    s += g;
  }
  return s;
}

StateSequence random_rollout(CounterRng& rng, const RobotState& start, const KinodynamicLimits& lim, int n) {
  StateSequence seq{start};
  for (int i = 0; i < n; ++i) {
    const ControlInput u{rng.uniform(lim.a_v_min, lim.a_v_max), rng.uniform(lim.a_omega_min, lim.a_omega_max)};
    seq.push_back(clamp_to_limits(step_dynamics(seq.back(), u, 0.2), lim));
  }
  return seq;
}

struct Scene {
  std::vector<Agent> agents;
  std::shared_ptr<const GridDistanceTransform> edt;
  RobotState robot;
};

Scene random_scene(CounterRng& rng, bool with_grid) {
  Scene s;
  s.robot = {0, 0, rng.uniform(-0.5, 0.5), rng.uniform(0, 1), rng.uniform(-0.5, 0.5)};
  const int n = 2 + static_cast<int>(rng.below(8));
  for (int k = 0; k < n; ++k) {
    s.agents.push_back({rng.uniform(0.8, 4), rng.uniform(-2, 2), rng.uniform(-1, 1), rng.uniform(-1, 1), 0.3});
  }
  if (with_grid) {
    OccupancyGrid g({-2, -4}, 0.1, 80, 80);
    for (int c = 10; c < 70; ++c) {
      g.set(c, 10, true);
      g.set(c, 70, true);
    }
    for (int r = 30; r < 36; ++r)
      for (int c = 40; c < 46; ++c) g.set(c, r, true);
    s.edt = std::make_shared<GridDistanceTransform>(g);
  }
  return s;
}

TEST(Objective, ParkedOnReferenceLeavesVelocityTerms) {
  const PlannerParams p;
  const KinodynamicLimits lim;
  const TimeVaryingDistanceFields zero({}, nullptr, p, lim.radius);
  const ReferencePath ref = reference_path(kLongLine, {0, 0, 0, 0, 0}, p, lim);
  const double expected = p.w_nv * geometric(p.gamma, p.n);
  EXPECT_NEAR(objective(on_reference(ref, 0), zero, ref, p, lim), expected, 1e-12);
  EXPECT_NEAR(expected, 0.714698, 1e-6);
}

TEST(Objective, OnReferenceAtTopSpeedIsZero) {
  const PlannerParams p;
  const KinodynamicLimits lim;
  const TimeVaryingDistanceFields zero({}, nullptr, p, lim.radius);
  const ReferencePath ref = reference_path(kLongLine, {0, 0, 0, 1, 0}, p, lim);
  EXPECT_NEAR(objective(on_reference(ref, 1), zero, ref, p, lim), 0.0, 1e-20);
}

TEST(Objective, EndpointPenalizesMotion) {
  const PlannerParams p;
  const KinodynamicLimits lim;
  const TimeVaryingDistanceFields zero({}, nullptr, p, lim.radius);
  const ReferencePath ref = reference_path(kLongLine, {100, 0, 0, 0, 0}, p, lim);
  for (int i = 0; i <= p.n; ++i) EXPECT_EQ(reference_speed(ref, i, lim), 0.0);
  StateSequence seq = on_reference(ref, 0.5);
  EXPECT_NEAR(objective(seq, zero, ref, p, lim), p.w_nv * 0.25 * geometric(p.gamma, p.n), 1e-12);
}

TEST(Objective, LengthMismatch) {
  const PlannerParams p;
  const KinodynamicLimits lim;
  const TimeVaryingDistanceFields zero({}, nullptr, p, lim.radius);
  const ReferencePath ref = reference_path(kLongLine, {}, p, lim);
  StateSequence seq = on_reference(ref, 0);
  seq.pop_back();
  try {
    objective(seq, zero, ref, p, lim);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::LengthMismatch);
  }
  EXPECT_THROW(build_graph(seq, zero, ref, lim, p), Error);
}

TEST(Graph, EdgeCountsForFullHorizon) {
  const PlannerParams p;
  const KinodynamicLimits lim;
  const TimeVaryingDistanceFields zero({}, nullptr, p, lim.radius);
  const ReferencePath ref = reference_path(kLongLine, {}, p, lim);
  const TrajectoryGraph g = build_graph(on_reference(ref, 0), zero, ref, lim, p);
  EXPECT_EQ(g.variable_count(), 15);
  for (EdgeKind k : {EdgeKind::Field, EdgeKind::Navigation, EdgeKind::VelocityReference,
                     EdgeKind::VelocityBounds, EdgeKind::Kinematic, EdgeKind::Jitter,
                     EdgeKind::AccelerationBounds}) {
    EXPECT_EQ(g.count(k), 15u) << to_string(k);
  }
  int dim = 0;
  for (const Edge& e : g.edges()) {
    EXPECT_GE(e.node, 1);
    EXPECT_LE(e.node, 15);
    dim += edge_dimension(e.kind);
  }
  EXPECT_EQ(g.residual_dimension(), dim);
}

TEST(Graph, MinimalHorizon) {
  PlannerParams p;
  p.n = 1;
  const KinodynamicLimits lim;
  const TimeVaryingDistanceFields zero({}, nullptr, p, lim.radius);
  const ReferencePath ref = reference_path(kLongLine, {}, p, lim);
  const TrajectoryGraph g = build_graph(on_reference(ref, 0), zero, ref, lim, p);
  EXPECT_EQ(g.variable_count(), 1);
  EXPECT_EQ(g.count(EdgeKind::Field), 1u);
  EXPECT_EQ(g.count(EdgeKind::Kinematic), 1u);
  EXPECT_EQ(g.count(EdgeKind::Jitter), 1u);
  EXPECT_EQ(g.edges().size(), 7u);
}

TEST(Graph, DegenerateInputIsPaddedWithBrakingTail) {
  const PlannerParams p;
  const KinodynamicLimits lim;
  const RobotState s0{1, 2, 0.3, 0.5, -0.3};
  const StateSequence padded = pad_sequence({s0}, p.n, lim, p.dt);
  ASSERT_EQ(padded.size(), 16u);
  EXPECT_EQ(padded[0], s0);
  EXPECT_NEAR(padded[1].v, 0.3, 1e-12);
  EXPECT_NEAR(padded[1].omega, -0.1, 1e-12);
  EXPECT_NEAR(padded[2].v, 0.1, 1e-12);
  EXPECT_EQ(padded[2].omega, 0.0);
  for (std::size_t i = 3; i < padded.size(); ++i) {
    EXPECT_EQ(padded[i].v, 0.0);
    EXPECT_EQ(padded[i].position(), padded[3].position());
  }
  const TimeVaryingDistanceFields zero({}, nullptr, p, lim.radius);
  const ReferencePath ref = reference_path(kLongLine, s0, p, lim);
  const TrajectoryGraph g = build_graph(padded, zero, ref, lim, p);
  EXPECT_EQ(g.count(EdgeKind::Kinematic), 15u);
  EXPECT_THROW(pad_sequence({}, p.n, lim, p.dt), Error);
}

TEST(Optimize, FixedPointAtZeroCost) {
  const PlannerParams p;
  const KinodynamicLimits lim;
  const TimeVaryingDistanceFields zero({}, nullptr, p, lim.radius);
  const ReferencePath ref = reference_path(kLongLine, {0, 0, 0, 1, 0}, p, lim);
  const StateSequence seq = on_reference(ref, 1);
  const TrajectoryGraph g = build_graph(seq, zero, ref, lim, p);
  const OptimizedSequence out = optimize(g, seq);
  EXPECT_FALSE(out.numerical_failure);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    EXPECT_NEAR(out.states[i].x, seq[i].x, 1e-8);
    EXPECT_NEAR(out.states[i].y, seq[i].y, 1e-8);
    EXPECT_NEAR(out.states[i].v, seq[i].v, 1e-8);
  }
  EXPECT_NEAR(objective(out.states, zero, ref, p, lim), objective(seq, zero, ref, p, lim), 1e-9);
}

TEST(Optimize, PerturbedOptimumImproves) {
  const PlannerParams p;
  const KinodynamicLimits lim;
  CounterRng rng(31);
  int checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const Scene sc = random_scene(rng, trial % 2 == 0);
    LocalPlanner planner(PlannerConfig{}, {}, {}, 5, sc.edt);
    const PlanResult plan = planner.plan(sc.robot, sc.agents, kLongLine, 0);
    if (!plan.optimizer_ran || plan.optimized.numerical_failure) continue;
    const auto fields = planner.make_fields(sc.agents);
    const TrajectoryGraph g = build_graph(plan.padded, fields, plan.reference, lim, p);
    StateSequence perturbed = plan.optimized.states;
    for (std::size_t i = 1; i < perturbed.size(); ++i) {
      perturbed[i].x += rng.uniform(-0.02, 0.02);
      perturbed[i].y += rng.uniform(-0.02, 0.02);
      perturbed[i].v = std::clamp(perturbed[i].v + rng.uniform(-0.02, 0.02), 0.0, 1.0);
    }
    const double before = g.cost(perturbed);
    const OptimizedSequence out = optimize(g, perturbed);
    ASSERT_FALSE(out.numerical_failure);
    EXPECT_LT(out.final_objective, before);
    EXPECT_NEAR(out.final_objective, g.cost(out.states), 1e-9 * std::max(1.0, before));
    ++checked;
  }
  EXPECT_GT(checked, 10);
}

TEST(Optimize, MonotoneAndAnchored) {
  const PlannerParams p;
  const KinodynamicLimits lim;
  CounterRng rng(47);
  for (int trial = 0; trial < 100; ++trial) {
    const Scene sc = random_scene(rng, trial % 3 == 0);
    const TimeVaryingDistanceFields fields(sc.agents, sc.edt, p, lim.radius);
    const ReferencePath ref = reference_path(kLongLine, sc.robot, p, lim);
    const StateSequence init = random_rollout(rng, sc.robot, lim, p.n);
    const TrajectoryGraph g = build_graph(init, fields, ref, lim, p);
    const OptimizedSequence out = optimize(g, init);
    ASSERT_EQ(out.states.size(), init.size());
    EXPECT_EQ(std::memcmp(&out.states[0], &init[0], sizeof(RobotState)), 0);
    EXPECT_LE(out.final_objective, out.initial_objective);
    EXPECT_NEAR(out.initial_objective, g.cost(init), 1e-9 * std::max(1.0, out.initial_objective));
    double last = out.initial_objective;
    for (const IterationTrace& t : out.trace) {
      EXPECT_LE(t.objective, last);
      last = t.objective;
    }
  }
}

TEST(Optimize, GraphCostMatchesObjectiveWhenConstraintsVanish) {
  const PlannerParams p;
  const KinodynamicLimits lim;
  CounterRng rng(2);
  const Scene sc = random_scene(rng, true);
  const TimeVaryingDistanceFields fields(sc.agents, sc.edt, p, lim.radius);
  const ReferencePath ref = reference_path(kLongLine, sc.robot, p, lim);
  // Child-convention rollout: pose advances with the new velocities, accelerations inside bounds.
  StateSequence seq{sc.robot};
  for (int i = 0; i < p.n; ++i) {
    const RobotState& s = seq.back();
    const double v = std::clamp(s.v + rng.uniform(-0.15, 0.15), 0.0, 1.0);
    const double w = std::clamp(s.omega + rng.uniform(-0.15, 0.15), -1.0, 1.0);
    seq.push_back({s.x + 0.2 * v * std::cos(s.theta), s.y + 0.2 * v * std::sin(s.theta),
                   normalize_angle(s.theta + 0.2 * w), v, w});
  }
  const TrajectoryGraph g = build_graph(seq, fields, ref, lim, p);
  EXPECT_NEAR(g.cost(seq), objective(seq, fields, ref, p, lim), 1e-9);
}

TEST(Gradients, QuadraticOnlyResiduals) {
  PlannerParams p;
  p.w_c = 0;
  const KinodynamicLimits lim;
  CounterRng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Scene sc = random_scene(rng, false);
    const TimeVaryingDistanceFields fields(sc.agents, nullptr, p, lim.radius);
    const ReferencePath ref = reference_path(kLongLine, sc.robot, p, lim);
    const StateSequence seq = random_rollout(rng, sc.robot, lim, p.n);
    const TrajectoryGraph g = build_graph(seq, fields, ref, lim, p);
    EXPECT_LT(check_gradients(g, seq, 1e-5), 1e-8);
  }
}

TEST(Gradients, FullResidualSet) {
  const PlannerParams p;
  const KinodynamicLimits lim;
  CounterRng rng(4);
  std::size_t checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Scene sc = random_scene(rng, trial % 2 == 0);
    const TimeVaryingDistanceFields fields(sc.agents, sc.edt, p, lim.radius);
    const ReferencePath ref = reference_path(kLongLine, sc.robot, p, lim);
    const StateSequence seq = random_rollout(rng, sc.robot, lim, p.n);
    const TrajectoryGraph g = build_graph(seq, fields, ref, lim, p);
    const GradientCheckReport rep = check_gradients_report(g, seq, 1e-5);
    EXPECT_LT(rep.max_error, 1e-4);
    checked += rep.checked;
  }
  EXPECT_GT(checked, 100000u);
}

TEST(Gradients, FieldTiesAreExcluded) {
  const PlannerParams p;
  const KinodynamicLimits lim;
  const std::vector<Agent> twins{{2, 0, 0, 0, 0.3}, {2, 0, 0, 0, 0.3}};
  const TimeVaryingDistanceFields fields(twins, nullptr, p, lim.radius);
  const ReferencePath ref = reference_path(kLongLine, {}, p, lim);
  StateSequence seq = on_reference(ref, 0.5);
  const TrajectoryGraph g = build_graph(seq, fields, ref, lim, p);
  const GradientCheckReport rep = check_gradients_report(g, seq, 1e-5);
  EXPECT_GE(rep.excluded, static_cast<std::size_t>(p.n));
}

TEST(LinearSystem, BlockTridiagonalMatchesDenseNormalEquations) {
  const PlannerParams p;
  const KinodynamicLimits lim;
  CounterRng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const Scene sc = random_scene(rng, true);
    const TimeVaryingDistanceFields fields(sc.agents, sc.edt, p, lim.radius);
    const ReferencePath ref = reference_path(kLongLine, sc.robot, p, lim);
    const StateSequence seq = random_rollout(rng, sc.robot, lim, p.n);
    const TrajectoryGraph g = build_graph(seq, fields, ref, lim, p);

    const int n = g.variable_count();
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(g.residual_dimension(), 5 * n);
    Eigen::VectorXd res(g.residual_dimension());
    int row = 0;
    for (const Edge& e : g.edges()) {
      const EdgeEval ev = g.evaluate(e, seq, true);
      for (int k = 0; k < ev.dim; ++k) {
        res[row + k] = ev.r[static_cast<std::size_t>(k)];
        for (int c = 0; c < 5; ++c) {
          jac(row + k, 5 * (e.node - 1) + c) = ev.j_cur(k, c);
          if (e.node >= 2) jac(row + k, 5 * (e.node - 2) + c) = ev.j_prev(k, c);
        }
      }
      row += ev.dim;
    }
    const Eigen::MatrixXd h = jac.transpose() * jac;
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        if (std::abs(a - b) > 1) {
          EXPECT_EQ((h.block<5, 5>(5 * a, 5 * b).norm()), 0.0);
        }

    BlockTridiagonal sys;
    const double total = linearize(g, seq, sys);
    EXPECT_NEAR(total, res.squaredNorm(), 1e-9 * std::max(1.0, total));
    const Eigen::VectorXd grad = jac.transpose() * res;
    for (int k = 0; k < n; ++k) {
      const Mat5 hd = h.block<5, 5>(5 * k, 5 * k);
      const double scale = std::max(1.0, hd.norm());
      EXPECT_LT((sys.diag[static_cast<std::size_t>(k)] - hd).norm(), 1e-9 * scale);
      if (k > 0) {
        const Mat5 hl = h.block<5, 5>(5 * k, 5 * (k - 1));
        EXPECT_LT((sys.lower[static_cast<std::size_t>(k)] - hl).norm(), 1e-9 * scale);
      }
      EXPECT_LT((sys.rhs[static_cast<std::size_t>(k)] - grad.segment<5>(5 * k)).norm(), 1e-9 * std::max(1.0, grad.norm()));
    }

    const double lambda = 1e-3;
    Eigen::MatrixXd damped = h;
    for (int d = 0; d < 5 * n; ++d) damped(d, d) += lambda * std::max(h(d, d), 1e-9);
    const Eigen::VectorXd dense = damped.ldlt().solve(-grad);
    std::vector<Vec5> x;
    ASSERT_TRUE(sys.solve(lambda, x));
    for (int k = 0; k < n; ++k) {
      EXPECT_LT((x[static_cast<std::size_t>(k)] - dense.segment<5>(5 * k)).norm(), 1e-6 * std::max(1.0, dense.norm()));
    }
  }
}

TEST(ExtractCommand, Examples) {
  const KinodynamicLimits lim;
  ControlInput u = extract_command(StateSequence{{0, 0, 0, 0, 0}, {0, 0, 0, 0.2, 0}}, 0.2, lim);
  EXPECT_NEAR(u.a_v, 1.0, 1e-12);
  EXPECT_EQ(u.a_omega, 0.0);
  u = extract_command(StateSequence{{0, 0, 0, 0.5, 0.1}, {0.1, 0, 0.02, 0.5, 0.1}}, 0.2, lim);
  EXPECT_EQ(u.a_v, 0.0);
  EXPECT_EQ(u.a_omega, 0.0);
  u = extract_command(StateSequence{{0, 0, 0, 0, 0}, {0, 0, 0, 0.4, 0}}, 0.2, lim);
  EXPECT_DOUBLE_EQ(u.a_v, 1.0);
  try {
    extract_command(StateSequence{{0, 0, 0, 0, 0}}, 0.2, lim);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::SequenceTooShort);
  }
}

TEST(ProjectFeasible, ReplaysThroughDynamics) {
  const KinodynamicLimits lim;
  CounterRng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    StateSequence raw{{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-3, 3), rng.uniform(0, 1), rng.uniform(-1, 1)}};
    for (int i = 0; i < 15; ++i) {
      raw.push_back({rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-3, 3), rng.uniform(-0.5, 1.5), rng.uniform(-2, 2)});
    }
    const StateSequence out = project_feasible(raw, 0.2, lim);
    ASSERT_EQ(out.size(), raw.size());
    EXPECT_EQ(out[0], raw[0]);
    RobotState s = out[0];
    for (std::size_t i = 1; i < out.size(); ++i) {
      const ControlInput u = extract_command(std::span(out).subspan(i - 1, 2), 0.2, lim);
      s = step_dynamics(s, u, 0.2);
      EXPECT_NEAR(s.x, out[i].x, 1e-6);
      EXPECT_NEAR(s.y, out[i].y, 1e-6);
      EXPECT_NEAR(angle_diff(s.theta, out[i].theta), 0.0, 1e-6);
      EXPECT_NEAR(s.v, out[i].v, 1e-6);
      EXPECT_NEAR(s.omega, out[i].omega, 1e-6);
      EXPECT_GE(out[i].v, lim.v_min - 1e-12);
      EXPECT_LE(out[i].v, lim.v_max + 1e-12);
      s = out[i];
    }
  }
}

TEST(Trace, CsvHasOneRowPerIteration) {
  OptimizedSequence opt;
  opt.trace = {{1, 1e-4, 3.5}, {2, 1e-5, 2.0}};
  std::ostringstream os;
  write_trace_csv(os, opt);
  EXPECT_EQ(os.str(), "iteration,lambda,objective\n1,0.0001,3.5\n2,1e-05,2\n");
}

}  // namespace
}  // namespace ltdwa
