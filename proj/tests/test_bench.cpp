#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "ltdwa/bench.hpp"

namespace ltdwa {
namespace {

ScenarioGenerator open_field_generator() {
  return [](std::uint64_t seed) {
    Scenario s;
    s.kind = ScenarioKind::Crowd;
    s.seed = seed;
    s.start = {0, 0, 0};
    s.goal = {4, 0};
    s.time_limit = 15;
    return s;
  };
}

std::string primary(const MetricsSummary& m) { return summary_to_json(m, false).dump(); }

TEST(Batch, EmptyWorldEpisodesAllSucceed) {
  const BatchResult b = run_batch(open_field_generator(), 10, PlannerConfig{}, {}, 100);
  EXPECT_EQ(b.summary.episodes, 10u);
  EXPECT_EQ(b.summary.success_rate, 1.0);
  EXPECT_LT(b.summary.mean_ang_vel, 0.02);
  EXPECT_TRUE(std::isnan(b.summary.safety));
  EXPECT_EQ(b.summary.safety_count, 0u);
  EXPECT_EQ(b.summary.nav_time_count, 10u);
  for (std::size_t k = 0; k < b.records.size(); ++k) EXPECT_EQ(b.records[k].seed, 100 + k);
}

TEST(Batch, SingletonEqualsRawEpisodeMetrics) {
  const BatchResult b = run_batch(circle_generator(4), 1, PlannerConfig{}, {}, 9);
  const EpisodeRecord& rec = b.records[0];
  ASSERT_FALSE(rec.steps.empty());
  // Oracle: direct time averages over the executed states.
  std::vector<RobotState> states;
  for (const StepRecord& s : rec.steps) states.push_back(s.robot);
  states.push_back(rec.final_state);
  double w = 0, av = 0, aw = 0, lat = 0, lat_max = 0;
  for (std::size_t k = 0; k < states.size(); ++k) {
    w += std::abs(states[k].omega);
    if (k > 0) {
      av += std::abs(states[k].v - states[k - 1].v) / 0.2;
      aw += std::abs(states[k].omega - states[k - 1].omega) / 0.2;
    }
  }
  for (const StepRecord& s : rec.steps) {
    lat += s.latency_ms;
    lat_max = std::max(lat_max, s.latency_ms);
  }
  const MetricsSummary& m = b.summary;
  const double n = static_cast<double>(states.size());
  EXPECT_NEAR(m.mean_ang_vel, w / n, 1e-12);
  EXPECT_NEAR(m.mean_lin_acc, av / (n - 1), 1e-12);
  EXPECT_NEAR(m.mean_ang_acc, aw / (n - 1), 1e-12);
  EXPECT_NEAR(m.plan_time_mean, lat / static_cast<double>(rec.steps.size()), 1e-9);
  EXPECT_EQ(m.plan_time_max, lat_max);
  EXPECT_EQ(m.success_rate, rec.success() ? 1.0 : 0.0);
  EXPECT_EQ(m.count(rec.outcome), 1u);
  if (rec.success()) {
    EXPECT_EQ(m.nav_time, rec.end_time);
  } else {
    EXPECT_TRUE(std::isnan(m.nav_time));
  }
}

TEST(Batch, DeterministicAndIndependentOfParallelism) {
  const auto gen = circle_generator(5);
  BatchOptions serial;
  BatchOptions parallel;
  parallel.parallelism = 3;
  const BatchResult a = run_batch(gen, 4, PlannerConfig{}, {}, 21, serial);
  const BatchResult b = run_batch(gen, 4, PlannerConfig{}, {}, 21, serial);
  const BatchResult c = run_batch(gen, 4, PlannerConfig{}, {}, 21, parallel);
  EXPECT_EQ(primary(a.summary), primary(b.summary));
  EXPECT_EQ(primary(a.summary), primary(c.summary));
  for (std::size_t k = 0; k < a.records.size(); ++k) {
    std::ostringstream x, y;
    write_episode_jsonl(x, a.records[k]);
    write_episode_jsonl(y, c.records[k]);
    EXPECT_EQ(x.str(), y.str());
  }
}

TEST(Batch, EpisodeErrorsBecomeFailedOutcomes) {
  const ScenarioGenerator flaky = [](std::uint64_t seed) {
    if (seed % 2) throw Error(ErrorKind::ConfigError, "broken scenario");
    Scenario s;
    s.seed = seed;
    s.goal = {2, 0};
    return s;
  };
  const BatchResult b = run_batch(flaky, 4, PlannerConfig{}, {}, 0);
  EXPECT_EQ(b.summary.episodes, 4u);
  EXPECT_EQ(b.summary.count(Outcome::Failed), 2u);
  EXPECT_EQ(b.summary.successes, 2u);
  EXPECT_EQ(b.summary.success_rate, 0.5);
  EXPECT_NE(b.records[1].error.find("broken scenario"), std::string::npos);
  EXPECT_THROW(run_batch(flaky, 0, PlannerConfig{}, {}, 0), Error);
}

TEST(Batch, SuccessRateIsExactRatio) {
  std::vector<EpisodeRecord> recs(7);
  for (std::size_t k = 0; k < recs.size(); ++k) {
    recs[k].outcome = k < 3 ? Outcome::Success : Outcome::Timeout;
    recs[k].end_time = 10;
  }
  const MetricsSummary m = summarize(recs);
  EXPECT_EQ(m.success_rate, 3.0 / 7.0);
  EXPECT_EQ(m.nav_time, 10.0);
  EXPECT_EQ(m.state_count, 0u);
  EXPECT_TRUE(std::isnan(m.mean_ang_vel));
}

TEST(Batch, SafetyIsMeanOfEpisodeMinima) {
  std::vector<EpisodeRecord> recs(3);
  recs[0].min_clearance = 0.3;
  recs[1].min_clearance = 0.1;
  const MetricsSummary m = summarize(recs);
  EXPECT_EQ(m.safety_count, 2u);
  EXPECT_NEAR(m.safety, 0.2, 1e-15);
  EXPECT_EQ(m.safety_min, 0.1);
}

TEST(Ablation, ChainLabels) {
  const auto chain = ablation_chain();
  ASSERT_EQ(chain.size(), 4u);
  EXPECT_EQ(chain[0].label(), "Complete");
  EXPECT_EQ(chain[1].label(), "No Opt.");
  EXPECT_EQ(chain[2].label(), "No Opt. + Rand.");
  EXPECT_EQ(chain[3].label(), "No Opt. + Rand. + Trad.");
  AblationConfig only_rand;
  only_rand.sampling = SamplingMode::Random;
  EXPECT_EQ(only_rand.label(), "Rand.");
}

TEST(TraditionalField, TimeInvariantForMovingAgents) {
  const PlannerParams p;
  const std::vector<Agent> agents{{1, 0, 0.8, 0.3, 0.3}, {-2, 1, 0, -1, 0.3}};
  for (double x = -3; x <= 3; x += 0.37) {
    for (double y = -2; y <= 2; y += 0.41) {
      EXPECT_EQ(traditional_field(nullptr, agents, 10, x, y, p, 0.3),
                traditional_field(nullptr, agents, 0, x, y, p, 0.3));
    }
  }
}

TEST(TraditionalField, MatchesProposedFieldWhenNothingMoves) {
  const PlannerParams p;
  OccupancyGrid g({-3, -3}, 0.1, 60, 60);
  for (int r = 10; r < 14; ++r)
    for (int c = 20; c < 40; ++c) g.set(c, r, true);
  const auto edt = std::make_shared<const GridDistanceTransform>(g);
  const std::vector<Agent> agents{{1, 0.5, 0, 0, 0.3}, {-1, 1, 0, 0, 0.3}};
  const TimeVaryingDistanceFields proposed(agents, edt, p, 0.3);
  for (int frame = 0; frame <= p.n; frame += 3) {
    for (double x = -2.5; x <= 2.5; x += 0.31) {
      for (double y = -2.5; y <= 2.5; y += 0.29) {
        EXPECT_DOUBLE_EQ(traditional_field(edt, agents, frame, x, y, p, 0.3), proposed.value(frame, x, y));
      }
    }
  }
}

TEST(TraditionalField, DiffersAheadOfMovingAgent) {
  const PlannerParams p;
  const std::vector<Agent> agents{{0, 0, 1, 0, 0.3}};
  const TimeVaryingDistanceFields proposed(agents, nullptr, p, 0.3);
  const double ahead_trad = traditional_field(nullptr, agents, 0, 0.6, 0, p, 0.3);
  const double ahead_prop = proposed.value(0, 0.6, 0);
  EXPECT_GT(ahead_prop, ahead_trad + 1.0);
  // Frozen agent: the traditional field ahead at frame 10 stays put while the
  // proposed one has moved with the agent.
  EXPECT_NEAR(proposed.value(10, 2.0, 0), p.w_do, 1e-9);
  EXPECT_LT(traditional_field(nullptr, agents, 10, 2.0, 0, p, 0.3), 1.0);
}

MetricsSummary sample_summary() {
  std::vector<EpisodeRecord> recs(2);
  recs[0].outcome = Outcome::Success;
  recs[0].end_time = 8.4;
  recs[0].min_clearance = 0.27;
  recs[0].steps.resize(2);
  recs[0].steps[0].robot = {0, 0, 0, 0, 0.1};
  recs[0].steps[0].latency_ms = 90;
  recs[0].steps[1].robot = {0, 0, 0, 0.2, 0.2};
  recs[0].steps[1].latency_ms = 110;
  recs[0].final_state = {0, 0, 0, 0.4, 0.1};
  recs[1].outcome = Outcome::AgentCollision;
  return summarize(recs, "Complete");
}

TEST(Report, CsvHasHeaderAndOneRow) {
  const BatchResult b = run_batch(open_field_generator(), 1, PlannerConfig{}, {}, 1);
  const std::string csv = report(b.summary, ReportFormat::Csv);
  std::istringstream in(csv);
  std::string header, row, extra;
  ASSERT_TRUE(std::getline(in, header));
  ASSERT_TRUE(std::getline(in, row));
  EXPECT_FALSE(std::getline(in, extra));
  EXPECT_EQ(header.rfind("method,success_rate,safety_m,nav_time_s,mean_ang_vel,mean_lin_acc,mean_ang_acc", 0), 0u);
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), std::count(row.begin(), row.end(), ','));
  EXPECT_EQ(row.rfind("Complete,1,", 0), 0u);
}

TEST(Report, TextFollowsTableColumnOrder) {
  const std::string text = report(sample_summary(), ReportFormat::Text);
  const std::vector<std::string> cols{"Method", "Succ. Rate", "Safety (m)", "Nav. Time (s)",
                                      "Mean Ang. vel.", "Mean Lin. acc.", "Mean Ang. acc.",
                                      "Time Consuming (ms)"};
  std::size_t pos = 0;
  for (const std::string& c : cols) {
    const std::size_t at = text.find(c, pos);
    ASSERT_NE(at, std::string::npos) << c;
    pos = at + c.size();
  }
  EXPECT_NE(text.find("50.0%"), std::string::npos);
  EXPECT_NE(text.find("0.27"), std::string::npos);
  EXPECT_NE(text.find("8.40"), std::string::npos);
  EXPECT_EQ(text.find(" \n"), std::string::npos);
}

TEST(Report, JsonRoundTrips) {
  const MetricsSummary m = sample_summary();
  const MetricsSummary back = summary_from_json(nlohmann::json::parse(report(m, ReportFormat::Json)));
  EXPECT_TRUE(equivalent(m, back));
  EXPECT_NEAR(m.mean_lin_acc, (1.0 + 1.0) / 2, 1e-12);
  EXPECT_NEAR(m.mean_ang_vel, 0.4 / 3, 1e-12);
}

TEST(Report, UnknownFormat) {
  try {
    report(sample_summary(), std::string("xml"));
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::UnknownFormat);
  }
}

TEST(Report, ResultsDirectoryLayout) {
  const auto dir = std::filesystem::temp_directory_path() / "ltdwa_bench_layout";
  std::filesystem::remove_all(dir);
  const BatchResult b = run_batch(open_field_generator(), 2, PlannerConfig{}, {}, 40);
  write_batch_results(dir, b);
  for (const char* f : {"summary.csv", "summary.json", "timing/summary.json", "episodes/40.jsonl",
                        "episodes/41.jsonl", "timing/40.csv"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  std::ifstream csv(dir / "summary.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header.find("plan_time"), std::string::npos);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace ltdwa
