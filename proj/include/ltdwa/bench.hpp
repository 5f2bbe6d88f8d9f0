#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <mutex>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ltdwa/core.hpp"
#include "ltdwa/distfield.hpp"
#include "ltdwa/planner.hpp"
#include "ltdwa/sim.hpp"

namespace ltdwa {

inline constexpr std::size_t kOutcomeCount = 6;

/// Batch metrics. Means over empty sample sets are NaN and serialize as null;
/// the matching count is always reported next to each mean.
struct MetricsSummary {
  std::string label;
  std::size_t episodes{0};
  std::size_t successes{0};
  std::array<std::size_t, kOutcomeCount> outcomes{};  // indexed by Outcome
  double success_rate{std::numeric_limits<double>::quiet_NaN()};

  // Grid clearance (center distance minus R): mean of per-episode minima and
  // the global minimum, over episodes that had a grid.
  std::size_t safety_count{0};
  double safety{std::numeric_limits<double>::quiet_NaN()};
  double safety_min{std::numeric_limits<double>::quiet_NaN()};

  // Successful episodes only.
  std::size_t nav_time_count{0};
  double nav_time{std::numeric_limits<double>::quiet_NaN()};

  // Time averages over executed robot states (|omega|) and over consecutive
  // state pairs (|dv/dT|, |domega/dT|), pooled across all episodes.
  std::size_t state_count{0};
  std::size_t transition_count{0};
  double mean_ang_vel{std::numeric_limits<double>::quiet_NaN()};
  double mean_lin_acc{std::numeric_limits<double>::quiet_NaN()};
  double mean_ang_acc{std::numeric_limits<double>::quiet_NaN()};

  // Wall-clock planning latency; host dependent, kept out of primary outputs.
  std::size_t plan_count{0};
  double plan_time_mean{std::numeric_limits<double>::quiet_NaN()};
  double plan_time_std{std::numeric_limits<double>::quiet_NaN()};
  double plan_time_max{std::numeric_limits<double>::quiet_NaN()};

  std::size_t count(Outcome o) const { return outcomes[static_cast<std::size_t>(o)]; }
};

namespace detail {

inline bool same_number(double a, double b) {
  return (std::isnan(a) && std::isnan(b)) || a == b;
}

}  // namespace detail

// Field-wise equality where NaN equals NaN.
inline bool equivalent(const MetricsSummary& a, const MetricsSummary& b) {
  using detail::same_number;
  return a.label == b.label && a.episodes == b.episodes && a.successes == b.successes &&
         a.outcomes == b.outcomes && same_number(a.success_rate, b.success_rate) &&
         a.safety_count == b.safety_count && same_number(a.safety, b.safety) &&
         same_number(a.safety_min, b.safety_min) && a.nav_time_count == b.nav_time_count &&
         same_number(a.nav_time, b.nav_time) && a.state_count == b.state_count &&
         a.transition_count == b.transition_count && same_number(a.mean_ang_vel, b.mean_ang_vel) &&
         same_number(a.mean_lin_acc, b.mean_lin_acc) && same_number(a.mean_ang_acc, b.mean_ang_acc) &&
         a.plan_count == b.plan_count && same_number(a.plan_time_mean, b.plan_time_mean) &&
         same_number(a.plan_time_std, b.plan_time_std) &&
         same_number(a.plan_time_max, b.plan_time_max);
}

/// Sequential fold of episode records in index order.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(double dt = 0.2) : dt_(dt) {}

  void add(const EpisodeRecord& rec) {
    ++episodes_;
    ++outcomes_[static_cast<std::size_t>(rec.outcome)];
    if (rec.success()) {
      ++successes_;
      nav_sum_ += rec.end_time;
    }
    if (rec.has_clearance()) {
      ++safety_n_;
      safety_sum_ += rec.min_clearance;
      safety_min_ = std::min(safety_min_, rec.min_clearance);
    }
    std::vector<const RobotState*> states;
    states.reserve(rec.steps.size() + 1);
    for (const StepRecord& s : rec.steps) states.push_back(&s.robot);
    if (!rec.steps.empty()) states.push_back(&rec.final_state);
    for (std::size_t k = 0; k < states.size(); ++k) {
      ang_vel_sum_ += std::abs(states[k]->omega);
      ++state_n_;
      if (k > 0) {
        lin_acc_sum_ += std::abs(states[k]->v - states[k - 1]->v) / dt_;
        ang_acc_sum_ += std::abs(states[k]->omega - states[k - 1]->omega) / dt_;
        ++transition_n_;
      }
    }
    for (const StepRecord& s : rec.steps) {
      ++plan_n_;
      plan_sum_ += s.latency_ms;
      plan_sq_ += s.latency_ms * s.latency_ms;
      plan_max_ = std::max(plan_max_, s.latency_ms);
    }
  }

  MetricsSummary summary(std::string label = {}) const {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    auto mean = [nan](double sum, std::size_t n) { return n ? sum / static_cast<double>(n) : nan; };
    MetricsSummary m;
    m.label = std::move(label);
    m.episodes = episodes_;
    m.successes = successes_;
    m.outcomes = outcomes_;
    m.success_rate = mean(static_cast<double>(successes_), episodes_);
    m.safety_count = safety_n_;
    m.safety = mean(safety_sum_, safety_n_);
    m.safety_min = safety_n_ ? safety_min_ : nan;
    m.nav_time_count = successes_;
    m.nav_time = mean(nav_sum_, successes_);
    m.state_count = state_n_;
    m.transition_count = transition_n_;
    m.mean_ang_vel = mean(ang_vel_sum_, state_n_);
    m.mean_lin_acc = mean(lin_acc_sum_, transition_n_);
    m.mean_ang_acc = mean(ang_acc_sum_, transition_n_);
    m.plan_count = plan_n_;
    m.plan_time_mean = mean(plan_sum_, plan_n_);
    if (plan_n_) {
      const double mu = m.plan_time_mean;
      m.plan_time_std = std::sqrt(std::max(plan_sq_ / static_cast<double>(plan_n_) - mu * mu, 0.0));
      m.plan_time_max = plan_max_;
    }
    return m;
  }

 private:
  double dt_;
  std::size_t episodes_{0};
  std::size_t successes_{0};
  std::array<std::size_t, kOutcomeCount> outcomes_{};
  double nav_sum_{0.0};
  std::size_t safety_n_{0};
  double safety_sum_{0.0};
  double safety_min_{std::numeric_limits<double>::infinity()};
  std::size_t state_n_{0};
  std::size_t transition_n_{0};
  double ang_vel_sum_{0.0};
  double lin_acc_sum_{0.0};
  double ang_acc_sum_{0.0};
  std::size_t plan_n_{0};
  double plan_sum_{0.0};
  double plan_sq_{0.0};
  double plan_max_{0.0};
};

inline MetricsSummary summarize(std::span<const EpisodeRecord> records, std::string label = {},
                                double dt = 0.2) {
  MetricsAccumulator acc(dt);
  for (const EpisodeRecord& r : records) acc.add(r);
  return acc.summary(std::move(label));
}

using ScenarioGenerator = std::function<Scenario(std::uint64_t seed)>;

struct BatchResult {
  MetricsSummary summary;
  std::vector<Scenario> scenarios;
  std::vector<EpisodeRecord> records;  // index order, seeds base..base+episodes-1
};

struct BatchOptions {
  std::size_t parallelism{1};
  SimSettings sim{};
  LmSettings lm{};
  // Called from worker threads after each episode; must be thread safe.
  std::function<void(std::size_t index, const EpisodeRecord&)> on_episode;
};

/// Runs episodes for seeds base..base+episodes-1 on a worker pool. Each
/// episode owns its world and planner, so the fold over index order makes the
/// summary independent of the pool size. An episode that throws becomes a
/// Failed record carrying the message.
inline BatchResult run_batch(const ScenarioGenerator& generator, std::size_t episodes,
                             const PlannerConfig& config, const AblationConfig& ablation,
                             std::uint64_t base_seed, const BatchOptions& opt = {}) {
  if (episodes < 1) throw Error(ErrorKind::ConfigError, "episodes must be >= 1");
  config.validate();
  BatchResult out;
  out.scenarios.resize(episodes);
  out.records.resize(episodes);

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t e = next++; e < episodes; e = next++) {
      const std::uint64_t seed = base_seed + e;
      EpisodeRecord rec;
      try {
        out.scenarios[e] = generator(seed);
        rec = run_episode(out.scenarios[e], config, ablation, seed, opt.sim, opt.lm);
      } catch (const std::exception& ex) {
        rec = EpisodeRecord{};
        rec.seed = seed;
        rec.outcome = Outcome::Failed;
        rec.error = ex.what();
      }
      if (opt.on_episode) opt.on_episode(e, rec);
      out.records[e] = std::move(rec);
    }
  };

  const std::size_t threads = std::clamp<std::size_t>(opt.parallelism, 1, episodes);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (std::size_t k = 0; k < threads; ++k) pool.emplace_back(worker);
  }
  out.summary = summarize(out.records, ablation.label(), opt.sim.dt);
  return out;
}

/// The cumulative ablation rows: the complete method, then the optimizer
/// removed, then random sampling, then the traditional field.
inline std::vector<AblationConfig> ablation_chain() {
  AblationConfig complete;
  AblationConfig no_opt = complete;
  no_opt.optimizer_enabled = false;
  AblationConfig rand = no_opt;
  rand.sampling = SamplingMode::Random;
  AblationConfig trad = rand;
  trad.field = FieldMode::Traditional;
  return {complete, no_opt, rand, trad};
}

// Scenario used for ablation batches: a 25-agent circle crossing.
inline constexpr int kAblationAgents = 25;

inline ScenarioGenerator circle_generator(int n_agents, double radius = 5.0) {
  return [n_agents, radius](std::uint64_t seed) { return make_circle_scenario(n_agents, radius, seed); };
}

inline ScenarioGenerator static_generator(RandomMapSettings cfg = {}) {
  return [cfg](std::uint64_t seed) { return make_static_scenario(seed, cfg); };
}

inline ScenarioGenerator hybrid_generator(int n_agents) {
  return [n_agents](std::uint64_t seed) { return make_hybrid_scenario(n_agents, seed); };
}

/// Ablation baseline field: agents frozen at frame 0 as isotropic discs,
/// merged with the grid field. Same value at every frame.
inline double traditional_field(const std::shared_ptr<const GridDistanceTransform>& edt,
                                std::span<const Agent> agents, int frame, double x, double y,
                                const PlannerParams& params, double robot_radius) {
  const TimeVaryingDistanceFields f(std::vector<Agent>(agents.begin(), agents.end()), edt, params,
                                    robot_radius, FieldMode::Traditional);
  return f.value(frame, x, y);
}

// ---------------------------------------------------------------------------
// Reports.

enum class ReportFormat { Csv, Text, Json };

inline ReportFormat report_format_from(const std::string& s) {
  if (s == "csv") return ReportFormat::Csv;
  if (s == "text" || s == "txt") return ReportFormat::Text;
  if (s == "json") return ReportFormat::Json;
  throw Error(ErrorKind::UnknownFormat, "unknown report format '" + s + "'");
}

namespace detail {

inline nlohmann::json nullable(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline double from_nullable(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline std::string csv_number(double v) {
  if (!std::isfinite(v)) return "";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline constexpr std::array<Outcome, kOutcomeCount> kAllOutcomes{
    Outcome::Success,     Outcome::AgentCollision, Outcome::GridCollision,
    Outcome::OutOfBounds, Outcome::Timeout,        Outcome::Failed};

}  // namespace detail

inline nlohmann::json summary_to_json(const MetricsSummary& m, bool timing = true) {
  using detail::nullable;
  nlohmann::json outcomes = nlohmann::json::object();
  for (Outcome o : detail::kAllOutcomes) outcomes[to_string(o)] = m.count(o);
  nlohmann::json j{{"label", m.label},
                   {"episodes", m.episodes},
                   {"successes", m.successes},
                   {"outcomes", outcomes},
                   {"success_rate", nullable(m.success_rate)},
                   {"safety_count", m.safety_count},
                   {"safety", nullable(m.safety)},
                   {"safety_min", nullable(m.safety_min)},
                   {"nav_time_count", m.nav_time_count},
                   {"nav_time", nullable(m.nav_time)},
                   {"nav_time_convention", "successes only"},
                   {"state_count", m.state_count},
                   {"transition_count", m.transition_count},
                   {"mean_ang_vel", nullable(m.mean_ang_vel)},
                   {"mean_lin_acc", nullable(m.mean_lin_acc)},
                   {"mean_ang_acc", nullable(m.mean_ang_acc)}};
  if (timing) {
    j["plan_count"] = m.plan_count;
    j["plan_time_mean"] = nullable(m.plan_time_mean);
    j["plan_time_std"] = nullable(m.plan_time_std);
    j["plan_time_max"] = nullable(m.plan_time_max);
  }
  return j;
}

inline MetricsSummary summary_from_json(const nlohmann::json& j) {
  using detail::from_nullable;
  MetricsSummary m;
  try {
    m.label = j.at("label").get<std::string>();
    m.episodes = j.at("episodes").get<std::size_t>();
    m.successes = j.at("successes").get<std::size_t>();
    for (Outcome o : detail::kAllOutcomes) {
      m.outcomes[static_cast<std::size_t>(o)] = j.at("outcomes").at(to_string(o)).get<std::size_t>();
    }
    m.success_rate = from_nullable(j.at("success_rate"));
    m.safety_count = j.at("safety_count").get<std::size_t>();
    m.safety = from_nullable(j.at("safety"));
    m.safety_min = from_nullable(j.at("safety_min"));
    m.nav_time_count = j.at("nav_time_count").get<std::size_t>();
    m.nav_time = from_nullable(j.at("nav_time"));
    m.state_count = j.at("state_count").get<std::size_t>();
    m.transition_count = j.at("transition_count").get<std::size_t>();
    m.mean_ang_vel = from_nullable(j.at("mean_ang_vel"));
    m.mean_lin_acc = from_nullable(j.at("mean_lin_acc"));
    m.mean_ang_acc = from_nullable(j.at("mean_ang_acc"));
    if (j.contains("plan_count")) {
      m.plan_count = j.at("plan_count").get<std::size_t>();
      m.plan_time_mean = from_nullable(j.at("plan_time_mean"));
      m.plan_time_std = from_nullable(j.at("plan_time_std"));
      m.plan_time_max = from_nullable(j.at("plan_time_max"));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ConfigError, std::string("summary json: ") + e.what());
  }
  return m;
}

/// CSV, aligned text, or JSON for one or more summary rows. Timing columns
/// are optional so that primary outputs stay host independent.
inline std::string report(std::span<const MetricsSummary> rows, ReportFormat format,
                          bool timing = true) {
  std::ostringstream os;
  switch (format) {
    case ReportFormat::Json: {
      nlohmann::json arr = nlohmann::json::array();
      for (const MetricsSummary& m : rows) arr.push_back(summary_to_json(m, timing));
      os << (rows.size() == 1 ? arr[0] : arr).dump(2) << '\n';
      break;
    }
    case ReportFormat::Csv: {
      using detail::csv_number;
      os << "method,success_rate,safety_m,nav_time_s,mean_ang_vel,mean_lin_acc,mean_ang_acc";
      if (timing) os << ",plan_time_mean_ms,plan_time_std_ms,plan_time_max_ms";
      os << ",episodes,successes";
      for (Outcome o : detail::kAllOutcomes) os << ',' << to_string(o);
      os << ",safety_count,safety_min_m,nav_time_count\n";
      for (const MetricsSummary& m : rows) {
        os << detail::csv_field(m.label) << ',' << csv_number(m.success_rate) << ','
           << csv_number(m.safety) << ',' << csv_number(m.nav_time) << ','
           << csv_number(m.mean_ang_vel) << ',' << csv_number(m.mean_lin_acc) << ','
           << csv_number(m.mean_ang_acc);
        if (timing) {
          os << ',' << csv_number(m.plan_time_mean) << ',' << csv_number(m.plan_time_std) << ','
             << csv_number(m.plan_time_max);
        }
        os << ',' << m.episodes << ',' << m.successes;
        for (Outcome o : detail::kAllOutcomes) os << ',' << m.count(o);
        os << ',' << m.safety_count << ',' << csv_number(m.safety_min) << ',' << m.nav_time_count
           << '\n';
      }
      break;
    }
    case ReportFormat::Text: {
      auto fixed = [](double v, int digits) {
        if (!std::isfinite(v)) return std::string("-");
        std::ostringstream s;
        s << std::fixed << std::setprecision(digits) << v;
        return s.str();
      };
      std::vector<std::string> header{"Method",
                                      "Succ. Rate",
                                      "Safety (m)",
                                      "Nav. Time (s)",
                                      "Mean Ang. vel. (rad/s)",
                                      "Mean Lin. acc. (m/s^2)",
                                      "Mean Ang. acc. (rad/s^2)"};
      if (timing) header.push_back("Time Consuming (ms)");
      std::vector<std::vector<std::string>> table{header};
      for (const MetricsSummary& m : rows) {
        std::vector<std::string> row{
            m.label.empty() ? "-" : m.label,
            std::isfinite(m.success_rate) ? fixed(100.0 * m.success_rate, 1) + "%" : "-",
            fixed(m.safety, 2),
            fixed(m.nav_time, 2),
            fixed(m.mean_ang_vel, 2),
            fixed(m.mean_lin_acc, 2),
            fixed(m.mean_ang_acc, 2)};
        if (timing) {
          row.push_back(fixed(m.plan_time_mean, 2) + " +/- " + fixed(m.plan_time_std, 2) + " (max " +
                        fixed(m.plan_time_max, 1) + ")");
        }
        table.push_back(std::move(row));
      }
      std::vector<std::size_t> width(header.size(), 0);
      for (const auto& row : table) {
        for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
      }
      for (const auto& row : table) {
        for (std::size_t c = 0; c < row.size(); ++c) {
          if (c + 1 < row.size()) {
            os << std::left << std::setw(static_cast<int>(width[c])) << row[c] << "  ";
          } else {
            os << row[c];
          }
        }
        os << '\n';
      }
      break;
    }
  }
  return os.str();
}

inline std::string report(const MetricsSummary& m, ReportFormat format, bool timing = true) {
  return report(std::span<const MetricsSummary>(&m, 1), format, timing);
}

inline std::string report(const MetricsSummary& m, const std::string& format, bool timing = true) {
  return report(m, report_format_from(format), timing);
}

// ---------------------------------------------------------------------------
// Results directory: <root>/<batch>/summary.{csv,json}, episodes/<seed>.jsonl,
// and host-dependent timing under timing/.

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::ConfigError, "cannot write " + path.string());
  f << text;
}

inline void write_batch_results(const std::filesystem::path& dir, const BatchResult& batch,
                                bool episodes = true) {
  const MetricsSummary& m = batch.summary;
  write_text_file(dir / "summary.csv", report(m, ReportFormat::Csv, false));
  write_text_file(dir / "summary.json", report(m, ReportFormat::Json, false));
  nlohmann::json timing{{"plan_count", m.plan_count},
                        {"plan_time_mean_ms", detail::nullable(m.plan_time_mean)},
                        {"plan_time_std_ms", detail::nullable(m.plan_time_std)},
                        {"plan_time_max_ms", detail::nullable(m.plan_time_max)}};
  write_text_file(dir / "timing" / "summary.json", timing.dump(2) + "\n");
  if (!episodes) return;
  for (const EpisodeRecord& rec : batch.records) {
    std::ostringstream ep;
    write_episode_jsonl(ep, rec);
    write_text_file(dir / "episodes" / (std::to_string(rec.seed) + ".jsonl"), ep.str());
    std::ostringstream lat;
    write_latency_csv(lat, rec);
    write_text_file(dir / "timing" / (std::to_string(rec.seed) + ".csv"), lat.str());
  }
}

}  // namespace ltdwa
