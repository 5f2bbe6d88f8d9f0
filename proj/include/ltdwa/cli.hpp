#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "ltdwa/bench.hpp"
#include "ltdwa/core.hpp"
#include "ltdwa/distfield.hpp"
#include "ltdwa/navref.hpp"
#include "ltdwa/planner.hpp"
#include "ltdwa/sim.hpp"
#include "ltdwa/tree.hpp"

namespace ltdwa::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitConfig = 2,
  kExitNumerical = 3,
  kExitRuntime = 4,
};

/// Single planning cycle input.
///   {"robot": {"x", "y", "theta", "v", "omega"},
///    "agents": [{"x", "y", "vx", "vy", "r"}, ...],
///    "grid": {...} | "grid_file": "map.pgm",
///    "nav_path": [[x, y], ...] | "goal": [x, y],
///    "cycle": 0}
struct Snapshot {
  RobotState robot;
  std::vector<Agent> agents;
  std::optional<OccupancyGrid> grid;
  std::optional<NavigationPath> nav;
  std::optional<Vec2> goal;
  std::uint64_t cycle{0};
};

inline Snapshot snapshot_from_json(const nlohmann::json& j, const std::string& base_dir = ".") {
  if (!j.is_object()) throw Error(ErrorKind::ConfigError, "snapshot must be a JSON object");
  ltdwa::detail::reject_unknown(j, {"robot", "agents", "grid", "grid_file", "nav_path", "goal", "cycle"},
                         "snapshot");
  try {
    Snapshot s;
    s.robot = j.at("robot").get<RobotState>();
    if (j.contains("agents")) s.agents = j.at("agents").get<std::vector<Agent>>();
    if (j.contains("grid")) s.grid = grid_from_json(j.at("grid"));
    if (j.contains("grid_file")) {
      std::filesystem::path p(j.at("grid_file").get<std::string>());
      if (!p.is_absolute()) p = std::filesystem::path(base_dir) / p;
      s.grid = load_grid_file(p.string());
    }
    if (j.contains("nav_path")) s.nav = nav_path_from_json(j.at("nav_path"));
    if (j.contains("goal")) s.goal = Vec2{j.at("goal").at(0).get<double>(), j.at("goal").at(1).get<double>()};
    if (!s.nav && !s.goal) throw Error(ErrorKind::ConfigError, "snapshot needs 'nav_path' or 'goal'");
    s.cycle = j.value("cycle", std::uint64_t{0});
    if (!s.robot.finite()) throw Error(ErrorKind::ConfigError, "robot state must be finite");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ConfigError, std::string("snapshot: ") + e.what());
  }
}

inline nlohmann::json parse_json_file(const std::string& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ConfigError, std::string("cannot open ") + what + " '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    // The parser message carries the line and column.
    throw Error(ErrorKind::ConfigError, path + ": " + e.what());
  }
}

inline Snapshot load_snapshot(const std::string& path) {
  return snapshot_from_json(parse_json_file(path, "snapshot"),
                            std::filesystem::path(path).parent_path().string());
}

struct Options {
  std::string config_path;
  std::string out_dir{"out"};
  std::uint64_t seed{0};
  std::size_t episodes{10};
  std::optional<int> agents;
  bool no_opt{false};
  bool rand_sampling{false};
  bool trad_field{false};
  std::size_t parallel{1};
  std::string snapshot;
  std::string scenario;
  std::string kind{"crowd"};
  std::string format{"text"};
  int frame{0};
  double resolution{0.05};
  std::vector<double> extent;  // x_min y_min x_max y_max
  bool skip_episodes{false};

  AblationConfig ablation() const {
    AblationConfig a;
    a.optimizer_enabled = !no_opt;
    if (rand_sampling) a.sampling = SamplingMode::Random;
    if (trad_field) a.field = FieldMode::Traditional;
    return a;
  }
  bool any_ablation_flag() const { return no_opt || rand_sampling || trad_field; }
};

inline std::shared_ptr<spdlog::logger> logger() {
  if (auto l = spdlog::get("ltdwa")) return l;
  auto l = spdlog::stderr_logger_mt("ltdwa");
  l->set_pattern("[%l] %v");
  spdlog::level::level_enum level = spdlog::level::warn;
  if (const char* env = std::getenv("LTDWA_LOG")) level = spdlog::level::from_str(env);
  l->set_level(level);
  return l;
}

namespace detail {

inline std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_states_csv(const std::filesystem::path& path, std::span<const RobotState> states) {
  std::ostringstream os;
  os << "frame,x,y,theta,v,omega\n";
  for (std::size_t i = 0; i < states.size(); ++i) {
    const RobotState& s = states[i];
    os << i << ',' << num(s.x) << ',' << num(s.y) << ',' << num(s.theta) << ',' << num(s.v) << ','
       << num(s.omega) << '\n';
  }
  write_text_file(path, os.str());
}

inline PlannerConfig load_planner_config(const Options& o) {
  if (o.config_path.empty()) return PlannerConfig{};
  if (!std::filesystem::exists(o.config_path)) {
    throw Error(ErrorKind::ConfigError, "config file '" + o.config_path + "' does not exist");
  }
  return load_config(o.config_path);
}

inline NavigationPath snapshot_navigation(const Snapshot& s, const GridDistanceTransform* edt,
                                          const KinodynamicLimits& lim) {
  if (s.nav) return *s.nav;
  if (s.grid && edt) {
    return plan_global(*s.grid, *edt, s.robot.position(), *s.goal, default_clearance(lim),
                       default_dp_epsilon(*s.grid));
  }
  return cycle_navigation(std::nullopt, s.robot, *s.goal);
}

inline std::vector<Agent> sensed(const Snapshot& s, const KinodynamicLimits& lim) {
  std::vector<Agent> out;
  for (const Agent& a : s.agents) {
    if (distance(a.position(), s.robot.position()) <= lim.sensing_range) out.push_back(a);
  }
  return out;
}

inline Scenario scenario_for(const Options& o, std::uint64_t seed) {
  if (!o.scenario.empty()) return load_scenario(o.scenario);
  if (o.kind == "crowd") return make_circle_scenario(o.agents.value_or(10), 5.0, seed);
  if (o.kind == "static") return make_static_scenario(seed);
  if (o.kind == "hybrid") return make_hybrid_scenario(o.agents.value_or(10), seed);
  throw Error(ErrorKind::ConfigError, "unknown scenario kind '" + o.kind + "'");
}

inline ScenarioGenerator generator_for(const Options& o, int default_agents) {
  if (!o.scenario.empty()) {
    const Scenario fixed = load_scenario(o.scenario);
    return [fixed](std::uint64_t) { return fixed; };
  }
  const int n = o.agents.value_or(default_agents);
  if (o.kind == "crowd") return circle_generator(n);
  if (o.kind == "static") return static_generator();
  if (o.kind == "hybrid") return hybrid_generator(n);
  throw Error(ErrorKind::ConfigError, "unknown scenario kind '" + o.kind + "'");
}

inline std::string slug(const std::string& label) {
  std::string out;
  for (char c : label) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (!out.empty() && out.back() != '-') {
      out += '-';
    }
  }
  while (!out.empty() && out.back() == '-') out.pop_back();
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommands. Each returns a process exit code.

inline int plan_once(const Options& o, std::ostream& out) {
  const PlannerConfig cfg = detail::load_planner_config(o);
  const Snapshot snap = load_snapshot(o.snapshot);
  std::shared_ptr<const GridDistanceTransform> edt;
  if (snap.grid) edt = std::make_shared<const GridDistanceTransform>(*snap.grid);
  const NavigationPath nav = detail::snapshot_navigation(snap, edt.get(), cfg.limits);
  const LocalPlanner planner(cfg, o.ablation(), LmSettings{}, derive_seed(o.seed, "planner"), edt);
  const std::vector<Agent> agents = detail::sensed(snap, cfg.limits);
  const PlanResult plan = planner.plan(snap.robot, agents, nav, snap.cycle);

  const std::filesystem::path dir(o.out_dir);
  detail::write_states_csv(dir / "initial.csv", plan.initial.states);
  detail::write_states_csv(dir / "optimized.csv", plan.optimized.states);
  detail::write_states_csv(dir / "final.csv", plan.final_states);

  // Per-frame tree cost of the initial and final sequences.
  const TimeVaryingDistanceFields fields = planner.make_fields(agents);
  std::ostringstream costs;
  costs << "frame,ref_x,ref_y,ref_theta,initial_cost,final_cost\n";
  for (int i = 0; i <= cfg.params.n; ++i) {
    const Pose2& p = plan.reference.poses[static_cast<std::size_t>(i)];
    costs << i << ',' << detail::num(p.x) << ',' << detail::num(p.y) << ',' << detail::num(p.theta) << ',';
    if (static_cast<std::size_t>(i) < plan.initial.states.size()) {
      costs << detail::num(calc_cost(plan.initial.states[static_cast<std::size_t>(i)], p, fields, i, cfg.params));
    }
    costs << ',';
    if (static_cast<std::size_t>(i) < plan.final_states.size()) {
      costs << detail::num(calc_cost(plan.final_states[static_cast<std::size_t>(i)], p, fields, i, cfg.params));
    }
    costs << '\n';
  }
  write_text_file(dir / "costs.csv", costs.str());

  std::ostringstream trace;
  write_trace_csv(trace, plan.optimized);
  write_text_file(dir / "lm_trace.csv", trace.str());

  const OptimizedSequence& opt = plan.optimized;
  nlohmann::json summary{
      {"degenerate", plan.degenerate()},
      {"tree_depth", static_cast<int>(plan.initial.states.size()) - 1},
      {"optimizer_ran", plan.optimizer_ran},
      {"numerical_failure", plan.numerical_failure()},
      {"fallback", plan.fallback},
      {"converged", opt.converged},
      {"iterations", opt.iterations},
      {"initial_objective", ltdwa::detail::nullable(opt.initial_objective)},
      {"final_objective", ltdwa::detail::nullable(opt.final_objective)},
      {"command", {{"a_v", plan.command.a_v}, {"a_omega", plan.command.a_omega}}},
      {"sensed_agents", agents.size()},
      {"tree", {{"expanded", plan.stats.expanded},
                {"max_layer_before", plan.stats.max_layer_before},
                {"max_layer_after", plan.stats.max_layer_after}}}};
  write_text_file(dir / "plan.json", summary.dump(2) + "\n");
  write_text_file(dir / "timing.json", nlohmann::json{{"latency_ms", plan.latency_ms}}.dump(2) + "\n");

  if (plan.degenerate()) logger()->warn("tree degenerated to depth {}", plan.initial.states.size() - 1);
  out << "command a_v=" << plan.command.a_v << " a_omega=" << plan.command.a_omega
      << (plan.degenerate() ? " (degenerate)" : "") << '\n';
  if (plan.numerical_failure()) {
    logger()->error("optimizer hit a numerical failure; wrote the fallback sequence");
    return kExitNumerical;
  }
  return kExitOk;
}

inline int run(const Options& o, std::ostream& out) {
  const PlannerConfig cfg = detail::load_planner_config(o);
  const Scenario sc = detail::scenario_for(o, o.seed);
  const EpisodeRecord rec = run_episode(sc, cfg, o.ablation(), o.seed);
  const std::filesystem::path dir(o.out_dir);
  std::ostringstream ep;
  write_episode_jsonl(ep, rec);
  write_text_file(dir / "episode.jsonl", ep.str());
  write_text_file(dir / "scenario.json", scenario_to_json(sc).dump(2) + "\n");
  const EpisodeRecord* one = &rec;
  write_text_file(dir / "summary.csv",
                  report(summarize(std::span<const EpisodeRecord>(one, 1), o.ablation().label()),
                         ReportFormat::Csv, false));
  std::ostringstream lat;
  write_latency_csv(lat, rec);
  write_text_file(dir / "timing" / "latency.csv", lat.str());
  out << to_string(rec.outcome) << " t=" << rec.end_time << "s steps=" << rec.steps.size() << '\n';
  return kExitOk;
}

inline int bench(const Options& o, std::ostream& out) {
  const PlannerConfig cfg = detail::load_planner_config(o);
  const ReportFormat fmt = report_format_from(o.format);
  BatchOptions bo;
  bo.parallelism = o.parallel;
  bo.on_episode = [](std::size_t e, const EpisodeRecord& r) {
    logger()->info("episode {} seed {}: {}", e, r.seed, to_string(r.outcome));
  };
  const BatchResult res =
      run_batch(detail::generator_for(o, 10), o.episodes, cfg, o.ablation(), o.seed, bo);
  write_batch_results(o.out_dir, res, !o.skip_episodes);
  out << report(res.summary, fmt);
  return kExitOk;
}

inline int ablate(const Options& o, std::ostream& out) {
  const PlannerConfig cfg = detail::load_planner_config(o);
  const ReportFormat fmt = report_format_from(o.format);
  const std::vector<AblationConfig> rows =
      o.any_ablation_flag() ? std::vector<AblationConfig>{o.ablation()} : ablation_chain();
  const ScenarioGenerator gen = detail::generator_for(o, kAblationAgents);
  BatchOptions bo;
  bo.parallelism = o.parallel;
  std::vector<MetricsSummary> summaries;
  const std::filesystem::path dir(o.out_dir);
  for (const AblationConfig& a : rows) {
    logger()->info("ablation row {}", a.label());
    const BatchResult res = run_batch(gen, o.episodes, cfg, a, o.seed, bo);
    write_batch_results(dir / detail::slug(a.label()), res, !o.skip_episodes);
    summaries.push_back(res.summary);
  }
  write_text_file(dir / "summary.csv", report(summaries, ReportFormat::Csv, false));
  write_text_file(dir / "summary.json", report(summaries, ReportFormat::Json, false));
  write_text_file(dir / "timing" / "summary.csv", report(summaries, ReportFormat::Csv, true));
  out << report(summaries, fmt);
  return kExitOk;
}

// Lattice CSV of d_i; extent defaults to the grid, or to the robot and agents
// padded by 3 m.
inline int dump_field(const Options& o, std::ostream& out) {
  const PlannerConfig cfg = detail::load_planner_config(o);
  if (o.frame < 0 || o.frame > cfg.params.n) {
    throw Error(ErrorKind::FrameOutOfRange, "frame must lie in [0, " + std::to_string(cfg.params.n) + "]");
  }
  if (!(o.resolution > 0.0)) throw Error(ErrorKind::ConfigError, "resolution must be > 0");
  std::vector<Agent> agents;
  std::optional<OccupancyGrid> grid;
  std::vector<Vec2> anchors;
  if (!o.snapshot.empty()) {
    const Snapshot s = load_snapshot(o.snapshot);
    agents = s.agents;
    grid = s.grid;
    anchors.push_back(s.robot.position());
  } else {
    const Scenario sc = detail::scenario_for(o, o.seed);
    for (const SimAgent& a : initial_agents(sc)) agents.push_back(a.state);
    grid = sc.grid;
    anchors.push_back(sc.start.position());
  }
  std::shared_ptr<const GridDistanceTransform> edt;
  if (grid) edt = std::make_shared<const GridDistanceTransform>(*grid);
  const TimeVaryingDistanceFields fields(agents, edt, cfg.params, cfg.limits.radius, o.ablation().field);

  double x0, y0, x1, y1;
  if (o.extent.size() == 4) {
    x0 = o.extent[0];
    y0 = o.extent[1];
    x1 = o.extent[2];
    y1 = o.extent[3];
  } else if (!o.extent.empty()) {
    throw Error(ErrorKind::ConfigError, "--extent needs four values");
  } else if (grid) {
    x0 = grid->origin.x;
    y0 = grid->origin.y;
    x1 = x0 + grid->width * grid->resolution;
    y1 = y0 + grid->height * grid->resolution;
  } else {
    for (const Agent& a : agents) anchors.push_back(a.position());
    x0 = x1 = anchors[0].x;
    y0 = y1 = anchors[0].y;
    for (const Vec2& p : anchors) {
      x0 = std::min(x0, p.x);
      x1 = std::max(x1, p.x);
      y0 = std::min(y0, p.y);
      y1 = std::max(y1, p.y);
    }
    x0 -= 3.0;
    y0 -= 3.0;
    x1 += 3.0;
    y1 += 3.0;
  }
  if (!(x1 >= x0 && y1 >= y0)) throw Error(ErrorKind::ConfigError, "empty extent");
  const long nx = std::lround(std::floor((x1 - x0) / o.resolution + 1e-9)) + 1;
  const long ny = std::lround(std::floor((y1 - y0) / o.resolution + 1e-9)) + 1;

  std::ostringstream os;
  os << "x,y,value\n";
  for (long r = 0; r < ny; ++r) {
    const double y = y0 + static_cast<double>(r) * o.resolution;
    for (long c = 0; c < nx; ++c) {
      const double x = x0 + static_cast<double>(c) * o.resolution;
      os << detail::num(x) << ',' << detail::num(y) << ',' << detail::num(fields.value(o.frame, x, y)) << '\n';
    }
  }
  const std::filesystem::path dir(o.out_dir);
  write_text_file(dir / ("field_" + std::to_string(o.frame) + ".csv"), os.str());
  out << "wrote " << nx * ny << " lattice points\n";
  return kExitOk;
}

inline int dump_tree(const Options& o, std::ostream& out) {
  const PlannerConfig cfg = detail::load_planner_config(o);
  const Snapshot snap = load_snapshot(o.snapshot);
  std::shared_ptr<const GridDistanceTransform> edt;
  if (snap.grid) edt = std::make_shared<const GridDistanceTransform>(*snap.grid);
  const NavigationPath nav = detail::snapshot_navigation(snap, edt.get(), cfg.limits);
  const LocalPlanner planner(cfg, o.ablation(), LmSettings{}, derive_seed(o.seed, "planner"), edt);
  const PlanResult plan = planner.plan(snap.robot, detail::sensed(snap, cfg.limits), nav, snap.cycle, true);
  const std::filesystem::path dir(o.out_dir);
  std::ostringstream os;
  dump_tree_jsonl(os, plan.tree);
  write_text_file(dir / "tree.jsonl", os.str());
  detail::write_states_csv(dir / "initial.csv", plan.initial.states);
  out << "tree depth " << plan.tree.depth() << ", " << plan.tree.node_count() << " nodes\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::NumericalFailure: return kExitNumerical;
    case ErrorKind::ConfigError:
    case ErrorKind::UnknownFormat:
    case ErrorKind::FrameOutOfRange:
    case ErrorKind::EmptyGrid:
    case ErrorKind::EmptyPath:
    case ErrorKind::NoPath:
    case ErrorKind::StartOccupied:
    case ErrorKind::GoalOccupied:
    case ErrorKind::TraceExhausted:
      return kExitConfig;
    default:
      return kExitRuntime;
  }
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  Options o;
  CLI::App app{"Long-horizon DWA local planner with elastic-band MPC refinement"};
  app.require_subcommand(1, 1);

  auto common = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "Planner config JSON");
    sub->add_option("--out", o.out_dir, "Output directory");
    sub->add_option("--seed", o.seed, "Base seed");
    sub->add_flag("--no-opt", o.no_opt, "Disable the EB-MPC optimizer");
    sub->add_flag("--rand-sampling", o.rand_sampling, "Random instead of voxel layer sampling");
    sub->add_flag("--trad-field", o.trad_field, "Time-invariant isotropic agent field");
  };
  auto world = [&o](CLI::App* sub) {
    sub->add_option("--scenario", o.scenario, "Scenario JSON");
    sub->add_option("--kind", o.kind, "Generated scenario: crowd | static | hybrid");
    sub->add_option("--agents", o.agents, "Number of agents in generated scenarios");
  };
  auto batch = [&o](CLI::App* sub) {
    sub->add_option("--episodes", o.episodes, "Episodes per batch")->check(CLI::PositiveNumber);
    sub->add_option("--parallel", o.parallel, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--format", o.format, "Report on stdout: text | csv | json");
    sub->add_flag("--no-episodes", o.skip_episodes, "Skip per-episode files");
  };

  CLI::App* plan_cmd = app.add_subcommand("plan-once", "Plan one cycle from a world snapshot");
  common(plan_cmd);
  plan_cmd->add_option("--snapshot", o.snapshot, "Snapshot JSON")->required();

  CLI::App* run_cmd = app.add_subcommand("run", "Simulate one episode");
  common(run_cmd);
  world(run_cmd);

  CLI::App* bench_cmd = app.add_subcommand("bench", "Run a batch of episodes");
  common(bench_cmd);
  world(bench_cmd);
  batch(bench_cmd);

  CLI::App* ablate_cmd = app.add_subcommand("ablate", "Ablation batches on the crowd scenario");
  common(ablate_cmd);
  world(ablate_cmd);
  batch(ablate_cmd);

  CLI::App* field_cmd = app.add_subcommand("dump-field", "Sample one distance field frame on a lattice");
  common(field_cmd);
  world(field_cmd);
  field_cmd->add_option("--snapshot", o.snapshot, "Snapshot JSON");
  field_cmd->add_option("--frame", o.frame, "Frame index");
  field_cmd->add_option("--resolution", o.resolution, "Lattice spacing (m)");
  field_cmd->add_option("--extent", o.extent, "x_min y_min x_max y_max")->expected(4);

  CLI::App* tree_cmd = app.add_subcommand("dump-tree", "Dump the state-cost tree of one cycle");
  common(tree_cmd);
  tree_cmd->add_option("--snapshot", o.snapshot, "Snapshot JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*plan_cmd) return plan_once(o, out);
    if (*run_cmd) return run(o, out);
    if (*bench_cmd) return bench(o, out);
    if (*ablate_cmd) return ablate(o, out);
    if (*field_cmd) return dump_field(o, out);
    if (*tree_cmd) return dump_tree(o, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace ltdwa::cli
