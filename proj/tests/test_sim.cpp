#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <sstream>

#include "ltdwa/sim.hpp"

namespace ltdwa {
namespace {

Scenario open_field(Vec2 goal) {
  Scenario s;
  s.kind = ScenarioKind::Crowd;
  s.start = {0, 0, 0};
  s.goal = goal;
  s.time_limit = 20;
  return s;
}

SimAgent reciprocal(Vec2 from, Vec2 to) {
  AgentSpec spec;
  spec.init = {from.x, from.y, 0, 0, 0.3};
  spec.goal = to;
  return {spec, spec.init, -1};
}

std::string jsonl(const EpisodeRecord& rec) {
  std::ostringstream os;
  write_episode_jsonl(os, rec);
  return os.str();
}

TEST(CircleScenario, EmptyCrowd) {
  const Scenario s = make_circle_scenario(0, 5, 1);
  EXPECT_TRUE(s.agents.empty());
  EXPECT_EQ(s.start.position(), (Vec2{-5, 0}));
  EXPECT_EQ(s.goal, (Vec2{5, 0}));
  const EpisodeRecord rec = run_episode(s, PlannerConfig{}, {}, 1);
  EXPECT_EQ(rec.outcome, Outcome::Success);
  for (const StepRecord& st : rec.steps) EXPECT_LT(std::abs(st.robot.y), 0.05);
}

TEST(CircleScenario, DeterministicUnderSeed) {
  const Scenario a = make_circle_scenario(10, 5, 42);
  const Scenario b = make_circle_scenario(10, 5, 42);
  EXPECT_EQ(scenario_to_json(a).dump(), scenario_to_json(b).dump());
  EXPECT_NE(scenario_to_json(a).dump(), scenario_to_json(make_circle_scenario(10, 5, 43)).dump());
}

TEST(CircleScenario, StartsAreSeparatedAndDisturbed) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Scenario s = make_circle_scenario(20, 5, seed);
    ASSERT_EQ(s.agents.size(), 20u);
    for (std::size_t a = 0; a < s.agents.size(); ++a) {
      const Agent& p = s.agents[a].init;
      EXPECT_NEAR(std::hypot(p.x, p.y), 5.0, 0.2 + 1e-12);
      EXPECT_EQ(p.r, 0.3);
      EXPECT_EQ(s.agents[a].max_speed, 1.0);
      EXPECT_EQ(s.agents[a].goal, (Vec2{-p.x, -p.y}));
      for (std::size_t b = a + 1; b < s.agents.size(); ++b) {
        EXPECT_GE(distance(p.position(), s.agents[b].init.position()), 0.6);
      }
    }
  }
}

TEST(AgentsStep, SingleAgentHeadsStraightForGoal) {
  std::vector<SimAgent> world{reciprocal({0, 0}, {3, 4})};
  agents_step(world, 0.2, 0.2, 1);
  EXPECT_NEAR(world[0].state.x, 0.2 * 0.6, 1e-12);
  EXPECT_NEAR(world[0].state.y, 0.2 * 0.8, 1e-12);
  EXPECT_NEAR(world[0].state.speed(), 1.0, 1e-12);
  for (int k = 1; k < 40; ++k) agents_step(world, 0.2, 0.2 * (k + 1), static_cast<std::uint64_t>(k));
  EXPECT_LT(distance(world[0].state.position(), {3, 4}), 0.1 + 1e-9);
}

TEST(AgentsStep, HeadOnAgentsStayPointSymmetric) {
  std::vector<SimAgent> world{reciprocal({-3, 0}, {3, 0}), reciprocal({3, 0}, {-3, 0})};
  bool swerved = false;
  for (int k = 0; k < 40; ++k) {
    agents_step(world, 0.2, 0.2 * (k + 1), derive_seed(5, "symmetry", static_cast<std::uint64_t>(k)));
    ASSERT_EQ(world.size(), 2u);
    EXPECT_NEAR(world[0].state.x, -world[1].state.x, 1e-9);
    EXPECT_NEAR(world[0].state.y, -world[1].state.y, 1e-9);
    EXPECT_GE(distance(world[0].state.position(), world[1].state.position()), 0.6);
    swerved = swerved || std::abs(world[0].state.y) > 0.05;
  }
  EXPECT_TRUE(swerved);
}

TEST(AgentsStep, SpeedNeverExceedsMax) {
  const Scenario s = make_circle_scenario(20, 5, 3);
  std::vector<SimAgent> world = initial_agents(s);
  for (std::size_t k = 0; k < world.size(); ++k) world[k].spec.max_speed = 0.5 + 0.05 * static_cast<double>(k % 10);
  for (int step = 0; step < 60; ++step) {
    agents_step(world, 0.2, 0.2 * (step + 1), static_cast<std::uint64_t>(step));
    for (const SimAgent& a : world) EXPECT_LE(a.state.speed(), a.spec.max_speed + 1e-9);
  }
}

TEST(AgentsStep, TracePlaybackInterpolatesAndRetires) {
  std::istringstream in("agent_id,t,x,y\n0,0,0,0\n0,1,1,2\n0,2,1,4\n1,0,5,5\n1,0.4,6,5\n");
  const Trace trace = parse_trace_csv(in);
  ASSERT_EQ(trace.tracks.size(), 2u);
  std::vector<SimAgent> world;
  for (int k = 0; k < 2; ++k) {
    AgentSpec spec;
    spec.policy = PolicyKind::Trace;
    spec.init = *trace_agent_at(trace.tracks[static_cast<std::size_t>(k)], 0);
    world.push_back({spec, spec.init, k});
  }
  agents_step(world, 0.2, 0.2, 0, &trace);
  ASSERT_EQ(world.size(), 2u);
  EXPECT_NEAR(world[0].state.x, 0.2, 1e-12);
  EXPECT_NEAR(world[0].state.y, 0.4, 1e-12);
  EXPECT_NEAR(world[1].state.x, 5.5, 1e-12);
  agents_step(world, 0.2, 0.4, 1, &trace);
  agents_step(world, 0.2, 0.6, 2, &trace);
  ASSERT_EQ(world.size(), 1u);  // second track ended at t = 0.4
  EXPECT_EQ(world[0].track, 0);
  for (int k = 3; k <= 7; ++k) agents_step(world, 0.2, 0.2 * k, static_cast<std::uint64_t>(k), &trace);
  EXPECT_NEAR(world[0].state.x, 1.0, 1e-12);
  EXPECT_NEAR(world[0].state.y, 2.8, 1e-12);
}

TEST(AgentsStep, RejectsNonPositiveStep) {
  std::vector<SimAgent> world;
  EXPECT_THROW(agents_step(world, 0.0, 0.0, 0), Error);
}

TEST(RunEpisode, EmptyWorldReachesGoalQuickly) {
  const Scenario s = open_field({5, 0});
  const EpisodeRecord rec = run_episode(s, PlannerConfig{}, {}, 7);
  EXPECT_EQ(rec.outcome, Outcome::Success);
  EXPECT_LE(rec.end_time, 7.0);
  // Lower bound: 5 m minus the goal radius at <= 1 m/s.
  EXPECT_GE(rec.end_time, 4.7);
  for (std::size_t k = 1; k < rec.steps.size(); ++k) {
    EXPECT_NEAR(rec.steps[k].t - rec.steps[k - 1].t, 0.2, 1e-12);
  }
}

TEST(RunEpisode, EnclosedStartTimesOutWithoutCollision) {
  OccupancyGrid g({-4, -4}, 0.1, 80, 80);
  for (int r = 0; r < 80; ++r)
    for (int c = 0; c < 80; ++c) {
      const double d = distance(g.cell_center(c, r), {0, 0});
      if (d >= 1.0 && d <= 1.3) g.set(c, r, true);
    }
  Scenario s = open_field({3, 0});
  s.kind = ScenarioKind::Static;
  s.grid = g;
  s.bounds = {-4, -4, 4, 4};
  s.time_limit = 12;
  const EpisodeRecord rec = run_episode(s, PlannerConfig{}, {}, 3);
  EXPECT_EQ(rec.outcome, Outcome::Timeout);
  EXPECT_GE(rec.min_clearance, 0.0);
  for (const StepRecord& st : rec.steps) EXPECT_LT(distance(st.robot.position(), {0, 0}), 1.0);
}

TEST(RunEpisode, DeterministicRecord) {
  const Scenario s = make_circle_scenario(6, 5, 11);
  const EpisodeRecord a = run_episode(s, PlannerConfig{}, {}, 11);
  const EpisodeRecord b = run_episode(s, PlannerConfig{}, {}, 11);
  EXPECT_EQ(jsonl(a), jsonl(b));
}

TEST(RunEpisode, AgentsBeyondSensingRangeAreInvisible) {
  Scenario plain = open_field({5, 0});
  Scenario with_far = plain;
  AgentSpec far;
  far.init = {2.5, 7.5, 0, 0, 0.3};
  far.policy = PolicyKind::ConstantVelocity;
  with_far.agents.push_back(far);
  const EpisodeRecord a = run_episode(plain, PlannerConfig{}, {}, 5);
  const EpisodeRecord b = run_episode(with_far, PlannerConfig{}, {}, 5);
  ASSERT_EQ(a.steps.size(), b.steps.size());
  for (std::size_t k = 0; k < a.steps.size(); ++k) {
    EXPECT_EQ(a.steps[k].robot, b.steps[k].robot);
    EXPECT_EQ(a.steps[k].command, b.steps[k].command);
  }
}

TEST(RunEpisode, RescanReproducesOutcome) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const Scenario s = seed % 2 ? make_circle_scenario(8, 5, seed) : make_hybrid_scenario(6, seed);
    const EpisodeRecord rec = run_episode(s, PlannerConfig{}, {}, seed);
    EXPECT_EQ(rescan_outcome(s, rec, 0.3, s.time_limit), rec.outcome) << seed;
    // Only the state after the last step may be terminal.
    std::unique_ptr<GridDistanceTransform> edt;
    if (s.has_grid()) edt = std::make_unique<GridDistanceTransform>(*s.grid);
    for (const StepRecord& st : rec.steps) {
      EXPECT_FALSE(classify_state(s, edt.get(), st.robot, st.agents, 0.3, 0.3).terminal.has_value());
    }
  }
}

TEST(RunEpisode, ConfigMismatchIsRejected) {
  PlannerConfig cfg;
  cfg.params.dt = 0.1;
  try {
    run_episode(open_field({5, 0}), cfg, {}, 1);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ConfigError);
  }
  Scenario bad = open_field({50, 0});
  EXPECT_THROW(run_episode(bad, PlannerConfig{}, {}, 1), Error);
}

TEST(ScenarioJson, RoundTrips) {
  for (const Scenario& s : {make_circle_scenario(5, 5, 2), make_static_scenario(3), make_hybrid_scenario(4, 4)}) {
    const Scenario back = scenario_from_json(scenario_to_json(s));
    EXPECT_EQ(scenario_to_json(back).dump(), scenario_to_json(s).dump());
    EXPECT_EQ(back.agents, s.agents);
    EXPECT_EQ(back.grid.has_value(), s.grid.has_value());
    if (s.grid) {
      EXPECT_EQ(*back.grid, *s.grid);
    }
  }
}

TEST(StaticScenario, StartAndGoalAreClearAndSeparated) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Scenario s = make_static_scenario(seed);
    ASSERT_TRUE(s.has_grid());
    const GridDistanceTransform edt(*s.grid);
    EXPECT_GT(edt.distance_at(s.start.x, s.start.y), 0.3);
    EXPECT_GT(edt.distance_at(s.goal.x, s.goal.y), 0.3);
    EXPECT_GE(distance(s.start.position(), s.goal), 8.0);
    EXPECT_NO_THROW(s.validate());
  }
}

TEST(EpisodeOutput, FinalLineCarriesOutcome) {
  const EpisodeRecord rec = run_episode(open_field({2, 0}), PlannerConfig{}, {}, 1);
  const std::string text = jsonl(rec);
  std::istringstream in(text);
  std::string line;
  std::string last;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    last = line;
    ++lines;
  }
  EXPECT_EQ(lines, rec.steps.size() + 1);
  const auto j = nlohmann::json::parse(last);
  EXPECT_EQ(j.at("outcome"), "Success");
  EXPECT_TRUE(j.at("min_clearance").is_null());
  std::ostringstream lat;
  write_latency_csv(lat, rec);
  EXPECT_EQ(lat.str().rfind("step,latency_ms\n", 0), 0u);
}

}  // namespace
}  // namespace ltdwa
