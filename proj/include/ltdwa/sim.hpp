#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltdwa/core.hpp"
#include "ltdwa/distfield.hpp"
#include "ltdwa/navref.hpp"
#include "ltdwa/planner.hpp"
#include "ltdwa/rng.hpp"

namespace ltdwa {

enum class ScenarioKind { Crowd, Static, Hybrid, Playback };
enum class PolicyKind { Reciprocal, ConstantVelocity, Trace };

inline const char* to_string(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::Crowd: return "crowd";
    case ScenarioKind::Static: return "static";
    case ScenarioKind::Hybrid: return "hybrid";
    case ScenarioKind::Playback: return "playback";
  }
  return "?";
}

inline ScenarioKind scenario_kind_from(const std::string& s) {
  if (s == "crowd") return ScenarioKind::Crowd;
  if (s == "static") return ScenarioKind::Static;
  if (s == "hybrid") return ScenarioKind::Hybrid;
  if (s == "playback") return ScenarioKind::Playback;
  throw Error(ErrorKind::ConfigError, "unknown scenario kind '" + s + "'");
}

inline const char* to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::Reciprocal: return "reciprocal";
    case PolicyKind::ConstantVelocity: return "constant_velocity";
    case PolicyKind::Trace: return "trace";
  }
  return "?";
}

inline PolicyKind policy_kind_from(const std::string& s) {
  if (s == "reciprocal") return PolicyKind::Reciprocal;
  if (s == "constant_velocity") return PolicyKind::ConstantVelocity;
  if (s == "trace") return PolicyKind::Trace;
  throw Error(ErrorKind::ConfigError, "unknown agent policy '" + s + "'");
}

struct Bounds {
  double x_min{-8.0};
  double y_min{-8.0};
  double x_max{8.0};
  double y_max{8.0};

  bool contains(Vec2 p) const {
    return p.x >= x_min && p.x <= x_max && p.y >= y_min && p.y <= y_max;
  }
  friend bool operator==(const Bounds&, const Bounds&) = default;
};

struct AgentSpec {
  Agent init{};
  Vec2 goal{};
  double max_speed{1.0};
  PolicyKind policy{PolicyKind::Reciprocal};

  friend bool operator==(const AgentSpec&, const AgentSpec&) = default;
};

// ---- trace playback ------------------------------------------------------

struct TraceTrack {
  int id{0};
  std::vector<double> t;
  std::vector<Vec2> p;
};

struct Trace {
  std::vector<TraceTrack> tracks;
};

// CSV with header agent_id,t,x,y; rows sorted by (agent_id, t).
inline Trace parse_trace_csv(std::istream& in) {
  Trace out;
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::ConfigError, "trace: missing header");
  line.erase(std::remove_if(line.begin(), line.end(), [](char c) { return c == ' ' || c == '\r'; }),
             line.end());
  if (line != "agent_id,t,x,y") {
    throw Error(ErrorKind::ConfigError, "trace: header must be agent_id,t,x,y");
  }
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream row(line);
    int id = 0;
    double t = 0.0, x = 0.0, y = 0.0;
    if (!(row >> id >> t >> x >> y)) {
      throw Error(ErrorKind::ConfigError, "trace: bad row at line " + std::to_string(lineno));
    }
    if (out.tracks.empty() || out.tracks.back().id != id) {
      if (!out.tracks.empty() && out.tracks.back().id > id) {
        throw Error(ErrorKind::ConfigError, "trace: rows not sorted by agent_id");
      }
      out.tracks.push_back({id, {}, {}});
    }
    TraceTrack& tr = out.tracks.back();
    if (!tr.t.empty() && !(t > tr.t.back())) {
      throw Error(ErrorKind::ConfigError, "trace: times must increase within an agent");
    }
    tr.t.push_back(t);
    tr.p.push_back({x, y});
  }
  return out;
}

inline Trace load_trace_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ConfigError, "cannot open trace file '" + path + "'");
  return parse_trace_csv(in);
}

// Position and velocity of a track at time t by linear interpolation; empty
// outside the recorded span.
inline std::optional<Agent> trace_agent_at(const TraceTrack& tr, double t, double radius = 0.3) {
  if (tr.t.empty() || t < tr.t.front() || t > tr.t.back()) return std::nullopt;
  if (tr.t.size() == 1) return Agent{tr.p[0].x, tr.p[0].y, 0.0, 0.0, radius};
  auto it = std::upper_bound(tr.t.begin(), tr.t.end(), t);
  std::size_t k = static_cast<std::size_t>(std::distance(tr.t.begin(), it));
  k = std::clamp<std::size_t>(k, 1, tr.t.size() - 1);
  const double t0 = tr.t[k - 1], t1 = tr.t[k];
  const double a = (t - t0) / (t1 - t0);
  const Vec2 p0 = tr.p[k - 1], p1 = tr.p[k];
  return Agent{p0.x + a * (p1.x - p0.x), p0.y + a * (p1.y - p0.y), (p1.x - p0.x) / (t1 - t0),
               (p1.y - p0.y) / (t1 - t0), radius};
}

// ---- scenario --------------------------------------------------------------

struct Scenario {
  ScenarioKind kind{ScenarioKind::Crowd};
  std::optional<OccupancyGrid> grid;
  std::vector<AgentSpec> agents;
  std::string trace_file;
  std::optional<Trace> trace;
  double trace_start{0.0};
  Pose2 start{};
  Vec2 goal{};
  Bounds bounds{};
  double time_limit{60.0};
  std::uint64_t seed{0};

  bool has_grid() const { return grid.has_value() && !grid->cells.empty(); }

  void validate(double robot_radius = 0.3) const {
    if (!(time_limit > 0.0)) throw Error(ErrorKind::ConfigError, "time_limit must be > 0");
    if (!bounds.contains(start.position()) || !bounds.contains(goal)) {
      throw Error(ErrorKind::ConfigError, "start and goal must lie inside the bounds");
    }
    if (has_grid()) {
      const GridDistanceTransform edt(*grid);
      if (edt.distance_at(start.x, start.y) <= robot_radius ||
          edt.distance_at(goal.x, goal.y) <= robot_radius) {
        throw Error(ErrorKind::ConfigError, "start and goal must be clear of the grid");
      }
    }
    for (const AgentSpec& a : agents) {
      if (a.policy != PolicyKind::Trace && !(a.max_speed > 0.0)) {
        throw Error(ErrorKind::ConfigError, "agent max_speed must be > 0");
      }
      if (!(a.init.r > 0.0)) throw Error(ErrorKind::ConfigError, "agent radius must be > 0");
    }
    if (kind == ScenarioKind::Playback && !trace) {
      throw Error(ErrorKind::ConfigError, "playback scenario needs a trace");
    }
  }
};

inline nlohmann::json scenario_to_json(const Scenario& s) {
  nlohmann::json j;
  j["kind"] = to_string(s.kind);
  if (s.grid) j["grid"] = grid_to_json(*s.grid);
  nlohmann::json agents = nlohmann::json::array();
  for (const AgentSpec& a : s.agents) {
    nlohmann::json aj = a.init;
    aj["goal"] = {a.goal.x, a.goal.y};
    aj["max_speed"] = a.max_speed;
    aj["policy"] = to_string(a.policy);
    agents.push_back(aj);
  }
  j["agents"] = agents;
  if (!s.trace_file.empty()) {
    j["trace_file"] = s.trace_file;
    j["trace_start"] = s.trace_start;
  }
  j["robot"] = {{"start", {s.start.x, s.start.y, s.start.theta}}, {"goal", {s.goal.x, s.goal.y}}};
  j["bounds"] = {s.bounds.x_min, s.bounds.y_min, s.bounds.x_max, s.bounds.y_max};
  j["time_limit"] = s.time_limit;
  j["seed"] = s.seed;
  return j;
}

// Relative grid_file and trace_file paths resolve against `base_dir`.
inline Scenario scenario_from_json(const nlohmann::json& j, const std::string& base_dir = ".") {
  if (!j.is_object()) throw Error(ErrorKind::ConfigError, "scenario must be a JSON object");
  detail::reject_unknown(j,
                         {"kind", "grid", "grid_file", "agents", "trace_file", "trace_start",
                          "robot", "bounds", "time_limit", "seed"},
                         "scenario");
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? p : (std::filesystem::path(base_dir) / path).string();
  };
  try {
    Scenario s;
    s.kind = scenario_kind_from(j.at("kind").get<std::string>());
    if (j.contains("grid")) s.grid = grid_from_json(j.at("grid"));
    if (j.contains("grid_file")) s.grid = load_grid_file(resolve(j.at("grid_file").get<std::string>()));
    if (j.contains("agents")) {
      for (const auto& aj : j.at("agents")) {
        AgentSpec a;
        a.init = aj.get<Agent>();
        if (aj.contains("goal")) a.goal = {aj.at("goal").at(0).get<double>(), aj.at("goal").at(1).get<double>()};
        else a.goal = a.init.position();
        a.max_speed = aj.value("max_speed", 1.0);
        a.policy = policy_kind_from(aj.value("policy", std::string("reciprocal")));
        s.agents.push_back(a);
      }
    }
    if (j.contains("trace_file")) {
      s.trace_file = j.at("trace_file").get<std::string>();
      s.trace = load_trace_file(resolve(s.trace_file));
      s.trace_start = j.value("trace_start", 0.0);
    }
    const auto& robot = j.at("robot");
    const auto& st = robot.at("start");
    s.start = {st.at(0).get<double>(), st.at(1).get<double>(),
               st.size() > 2 ? normalize_angle(st.at(2).get<double>()) : 0.0};
    s.goal = {robot.at("goal").at(0).get<double>(), robot.at("goal").at(1).get<double>()};
    if (j.contains("bounds")) {
      const auto& b = j.at("bounds");
      s.bounds = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                  b.at(3).get<double>()};
    }
    s.time_limit = j.value("time_limit", 60.0);
    s.seed = j.value("seed", std::uint64_t{0});
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ConfigError, std::string("scenario: ") + e.what());
  }
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ConfigError, "cannot open scenario file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::ConfigError, path + ": " + e.what());
  }
  return scenario_from_json(j, std::filesystem::path(path).parent_path().string());
}

// ---- scenario generators ---------------------------------------------------

/// Robot and agents share n+1 evenly spaced slots on a circle; the robot sits
/// at angle pi and heads for the antipode. Agent starts get a uniform
/// +-0.2 rad / +-0.2 m disturbance and their goals are the antipodes of the
/// disturbed starts. Disturbances are redrawn until all starts are 2r apart
/// and no agent starts (or, equivalently, parks) within r + R + 0.2 m of the
/// robot's start or goal.
inline Scenario make_circle_scenario(int n_agents, double radius, std::uint64_t seed) {
  if (n_agents < 0) throw Error(ErrorKind::ConfigError, "n_agents must be >= 0");
  constexpr double kAgentRadius = 0.3;
  constexpr double kRobotRadius = 0.3;
  constexpr double kDiscomfort = 0.2;
  Scenario s;
  s.kind = ScenarioKind::Crowd;
  s.seed = seed;
  s.start = {-radius, 0.0, 0.0};
  s.goal = {radius, 0.0};
  const double extent = radius + 3.0;
  s.bounds = {-extent, -extent, extent, extent};
  const int slots = n_agents + 1;
  for (std::uint64_t attempt = 0;; ++attempt) {
    CounterRng rng(derive_seed(seed, "scenario.circle", attempt));
    s.agents.clear();
    for (int k = 1; k <= n_agents; ++k) {
      const double ang = kPi + 2.0 * kPi * k / slots + rng.uniform(-0.2, 0.2);
      const double rad = radius + rng.uniform(-0.2, 0.2);
      AgentSpec a;
      a.init = Agent{rad * std::cos(ang), rad * std::sin(ang), 0.0, 0.0, kAgentRadius};
      a.goal = {-a.init.x, -a.init.y};
      a.max_speed = 1.0;
      s.agents.push_back(a);
    }
    bool ok = true;
    for (std::size_t a = 0; a < s.agents.size() && ok; ++a) {
      const Vec2 pa = s.agents[a].init.position();
      const double keep_off = kAgentRadius + kRobotRadius + kDiscomfort;
      if (distance(pa, s.start.position()) < keep_off || distance(pa, s.goal) < keep_off) ok = false;
      for (std::size_t b = a + 1; b < s.agents.size() && ok; ++b) {
        if (distance(pa, s.agents[b].init.position()) < 2.0 * kAgentRadius) ok = false;
      }
    }
    if (ok) break;
  }
  return s;
}

struct RandomMapSettings {
  double size{16.0};         // square map side, meters
  double resolution{0.1};
  int min_obstacles{10};
  int max_obstacles{16};
  double endpoint_clearance{1.0};  // start/goal distance to the nearest occupied cell
  double min_start_goal{8.0};
};

inline OccupancyGrid make_random_map(CounterRng& rng, const RandomMapSettings& cfg) {
  const int cells = static_cast<int>(std::lround(cfg.size / cfg.resolution));
  OccupancyGrid grid({-cfg.size / 2.0, -cfg.size / 2.0}, cfg.resolution, cells, cells);
  const int count = cfg.min_obstacles +
                    static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_obstacles - cfg.min_obstacles + 1)));
  const double half = cfg.size / 2.0;
  for (int k = 0; k < count; ++k) {
    const double cx = rng.uniform(-half, half);
    const double cy = rng.uniform(-half, half);
    const bool circle = rng.uniform() < 0.4;
    const double a = circle ? rng.uniform(0.3, 1.0) : rng.uniform(0.2, 1.0);
    const double b = circle ? a : rng.uniform(0.2, 1.0);
    for (int r = 0; r < grid.height; ++r) {
      for (int c = 0; c < grid.width; ++c) {
        const Vec2 p = grid.cell_center(c, r);
        const double dx = p.x - cx, dy = p.y - cy;
        const bool inside = circle ? dx * dx + dy * dy <= a * a : std::abs(dx) <= a && std::abs(dy) <= b;
        if (inside) grid.set(c, r, true);
      }
    }
  }
  return grid;
}

namespace detail {

inline Vec2 random_free_point(CounterRng& rng, const GridDistanceTransform& edt, double half,
                              double clearance) {
  for (int tries = 0; tries < 10000; ++tries) {
    const Vec2 p{rng.uniform(-half, half), rng.uniform(-half, half)};
    if (edt.distance_at(p.x, p.y) >= clearance) return p;
  }
  throw Error(ErrorKind::ConfigError, "random map has no free space");
}

}  // namespace detail

/// Random obstacle map with start and goal in free space far apart and
/// connected by a clearance-respecting grid path. The robot starts facing
/// the first leg of that path.
inline Scenario make_static_scenario(std::uint64_t seed, const RandomMapSettings& cfg = {}) {
  Scenario s;
  s.kind = ScenarioKind::Static;
  s.seed = seed;
  const double half = cfg.size / 2.0;
  s.bounds = {-half, -half, half, half};
  for (std::uint64_t attempt = 0;; ++attempt) {
    CounterRng rng(derive_seed(seed, "scenario.static", attempt));
    OccupancyGrid grid = make_random_map(rng, cfg);
    const GridDistanceTransform edt(grid);
    const double margin = half - 1.0;
    const Vec2 start = detail::random_free_point(rng, edt, margin, cfg.endpoint_clearance);
    const Vec2 goal = detail::random_free_point(rng, edt, margin, cfg.endpoint_clearance);
    if (distance(start, goal) < cfg.min_start_goal) continue;
    try {
      const NavigationPath nav = plan_global(grid, edt, start, goal, 0.35, default_dp_epsilon(grid));
      s.start = {start.x, start.y, nav.poses().front().theta};
    } catch (const Error&) {
      continue;
    }
    s.goal = goal;
    s.grid = std::move(grid);
    return s;
  }
}

/// Sparser obstacle map shared with reciprocal agents crossing between random
/// free points.
inline Scenario make_hybrid_scenario(int n_agents, std::uint64_t seed) {
  RandomMapSettings cfg;
  cfg.min_obstacles = 6;
  cfg.max_obstacles = 9;
  Scenario s = make_static_scenario(seed, cfg);
  s.kind = ScenarioKind::Hybrid;
  const GridDistanceTransform edt(*s.grid);
  CounterRng rng(derive_seed(seed, "scenario.hybrid.agents"));
  const double half = cfg.size / 2.0 - 1.0;
  while (static_cast<int>(s.agents.size()) < n_agents) {
    const Vec2 p = detail::random_free_point(rng, edt, half, 0.8);
    const Vec2 g = detail::random_free_point(rng, edt, half, 0.8);
    if (distance(p, s.start.position()) < 1.5 || distance(p, g) < 4.0) continue;
    bool clear = true;
    for (const AgentSpec& a : s.agents) clear = clear && distance(a.init.position(), p) >= 0.6;
    if (!clear) continue;
    AgentSpec a;
    a.init = Agent{p.x, p.y, 0.0, 0.0, 0.3};
    a.goal = g;
    s.agents.push_back(a);
  }
  return s;
}

// ---- agents ----------------------------------------------------------------

struct SimAgent {
  AgentSpec spec;
  Agent state;
  int track{-1};  // trace track index for playback agents
};

struct ReciprocalSettings {
  int candidates{100};
  double horizon{2.0};        // tau, seconds
  double safety_weight{1.0};  // weight of 1/ttc against velocity deviation
  double goal_tolerance{0.1};
};

namespace detail {

// Earliest time the discs touch when `rel` moves with velocity `w` relative
// to the origin; +inf when they never do.
inline double time_to_collision(Vec2 rel, Vec2 w, double reach) {
  const double c = rel.x * rel.x + rel.y * rel.y - reach * reach;
  const double b = rel.x * w.x + rel.y * w.y;
  if (c < 0.0) return b > 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  const double a = w.x * w.x + w.y * w.y;
  if (a == 0.0 || b <= 0.0) return std::numeric_limits<double>::infinity();
  const double disc = b * b - a * c;
  if (disc < 0.0) return std::numeric_limits<double>::infinity();
  return (b - std::sqrt(disc)) / a;
}

}  // namespace detail

/// Advances the world's agents by dt. Reciprocal agents pick, from a shared
/// set of candidates expressed in each agent's goal frame, the velocity that
/// minimizes deviation from the preferred velocity plus a time-to-collision
/// penalty against the other agents (reciprocal velocity obstacles, horizon
/// tau). The robot is never considered. Playback agents follow their trace
/// and leave the world past its end.
inline void agents_step(std::vector<SimAgent>& agents, double dt, double t_next,
                        std::uint64_t step_key, const Trace* trace = nullptr,
                        const GridDistanceTransform* edt = nullptr,
                        const ReciprocalSettings& cfg = {}) {
  if (!(dt > 0.0)) throw Error(ErrorKind::ConfigError, "dt must be > 0");
  struct Cand {
    double angle;
    double speed_frac;
  };
  std::vector<Cand> cands;
  cands.reserve(static_cast<std::size_t>(cfg.candidates));
  cands.push_back({0.0, 1.0});  // preferred velocity itself
  cands.push_back({0.0, 0.0});  // current velocity
  cands.push_back({0.0, 0.0});  // stop
  CounterRng rng(step_key);
  while (static_cast<int>(cands.size()) < cfg.candidates) {
    const double ang = rng.uniform(-kPi, kPi);
    cands.push_back({ang, std::sqrt(rng.uniform())});
  }

  std::vector<Vec2> next_vel(agents.size());
  for (std::size_t k = 0; k < agents.size(); ++k) {
    const SimAgent& a = agents[k];
    if (a.spec.policy == PolicyKind::ConstantVelocity) {
      double vx = a.state.vx, vy = a.state.vy;
      const double sp = std::hypot(vx, vy);
      if (sp > a.spec.max_speed) {
        vx *= a.spec.max_speed / sp;
        vy *= a.spec.max_speed / sp;
      }
      next_vel[k] = {vx, vy};
      continue;
    }
    if (a.spec.policy != PolicyKind::Reciprocal) continue;
    const Vec2 to_goal{a.spec.goal.x - a.state.x, a.spec.goal.y - a.state.y};
    const double dist = std::hypot(to_goal.x, to_goal.y);
    const double heading = dist > 0.0 ? std::atan2(to_goal.y, to_goal.x) : 0.0;
    const double pref_speed = dist <= cfg.goal_tolerance ? 0.0 : std::min(a.spec.max_speed, dist / dt);
    const Vec2 pref{pref_speed * std::cos(heading), pref_speed * std::sin(heading)};
    double best = std::numeric_limits<double>::infinity();
    Vec2 chosen{0.0, 0.0};
    for (std::size_t c = 0; c < cands.size(); ++c) {
      Vec2 v;
      if (c == 1) {
        v = {a.state.vx, a.state.vy};
        const double sp = std::hypot(v.x, v.y);
        if (sp > a.spec.max_speed) v = {v.x * a.spec.max_speed / sp, v.y * a.spec.max_speed / sp};
      } else {
        const double speed = c == 0 ? pref_speed : cands[c].speed_frac * a.spec.max_speed;
        const double ang = heading + cands[c].angle;
        v = {speed * std::cos(ang), speed * std::sin(ang)};
      }
      double score = std::hypot(v.x - pref.x, v.y - pref.y);
      double ttc = std::numeric_limits<double>::infinity();
      for (std::size_t o = 0; o < agents.size(); ++o) {
        if (o == k) continue;
        const Agent& b = agents[o].state;
        const Vec2 rel{b.x - a.state.x, b.y - a.state.y};
        const Vec2 w{2.0 * v.x - a.state.vx - b.vx, 2.0 * v.y - a.state.vy - b.vy};
        ttc = std::min(ttc, detail::time_to_collision(rel, w, a.state.r + b.r));
      }
      if (ttc <= cfg.horizon) score += cfg.safety_weight / std::max(ttc, 1e-6);
      if (edt && !edt->empty() &&
          edt->distance_at(a.state.x + dt * v.x, a.state.y + dt * v.y) <= a.state.r) {
        score += 1e6;
      }
      if (score < best) {
        best = score;
        chosen = v;
      }
    }
    next_vel[k] = chosen;
  }

  std::vector<SimAgent> kept;
  kept.reserve(agents.size());
  for (std::size_t k = 0; k < agents.size(); ++k) {
    SimAgent a = agents[k];
    if (a.spec.policy == PolicyKind::Trace) {
      if (!trace || a.track < 0) continue;
      const auto next = trace_agent_at(trace->tracks[static_cast<std::size_t>(a.track)], t_next, a.state.r);
      if (!next) continue;  // trace exhausted: the agent leaves
      a.state = *next;
    } else {
      a.state.vx = next_vel[k].x;
      a.state.vy = next_vel[k].y;
      a.state.x += dt * a.state.vx;
      a.state.y += dt * a.state.vy;
    }
    kept.push_back(a);
  }
  agents = std::move(kept);
}

// ---- episodes --------------------------------------------------------------

enum class Outcome { Success, AgentCollision, GridCollision, OutOfBounds, Timeout, Failed };

inline const char* to_string(Outcome o) {
  switch (o) {
    case Outcome::Success: return "Success";
    case Outcome::AgentCollision: return "AgentCollision";
    case Outcome::GridCollision: return "GridCollision";
    case Outcome::OutOfBounds: return "OutOfBounds";
    case Outcome::Timeout: return "Timeout";
    case Outcome::Failed: return "Failed";
  }
  return "?";
}

inline Outcome outcome_from(const std::string& s) {
  for (Outcome o : {Outcome::Success, Outcome::AgentCollision, Outcome::GridCollision,
                    Outcome::OutOfBounds, Outcome::Timeout, Outcome::Failed}) {
    if (s == to_string(o)) return o;
  }
  throw Error(ErrorKind::ConfigError, "unknown outcome '" + s + "'");
}

struct StepRecord {
  double t{0.0};
  RobotState robot;
  ControlInput command;
  std::vector<Agent> agents;  // ground truth, including unseen agents
  double latency_ms{0.0};
  bool degenerate{false};
  bool fallback{false};
};

struct EpisodeRecord {
  std::uint64_t seed{0};
  std::vector<StepRecord> steps;
  RobotState final_state;
  std::vector<Agent> final_agents;
  double end_time{0.0};
  Outcome outcome{Outcome::Failed};
  double min_clearance{std::numeric_limits<double>::infinity()};  // to the grid, minus R
  std::string error;

  bool success() const { return outcome == Outcome::Success; }
  bool has_clearance() const { return std::isfinite(min_clearance); }
};

struct SimSettings {
  double dt{0.2};
  double goal_radius{0.3};
  bool keep_agents{true};  // record agent snapshots per step
};

struct WorldCheck {
  std::optional<Outcome> terminal;
  double clearance{std::numeric_limits<double>::infinity()};
};

// Terminal conditions for a robot position at one instant. Collisions take
// precedence over reaching the goal.
inline WorldCheck classify_state(const Scenario& sc, const GridDistanceTransform* edt,
                                 const RobotState& robot, std::span<const Agent> agents,
                                 double robot_radius, double goal_radius) {
  WorldCheck out;
  for (const Agent& a : agents) {
    if (distance(robot.position(), a.position()) < robot_radius + a.r) {
      out.terminal = Outcome::AgentCollision;
      break;
    }
  }
  if (edt && !edt->empty()) {
    const double d = edt->distance_at(robot.x, robot.y);
    out.clearance = d - robot_radius;
    if (!out.terminal && d < robot_radius) out.terminal = Outcome::GridCollision;
  }
  if (!out.terminal && !sc.bounds.contains(robot.position())) out.terminal = Outcome::OutOfBounds;
  if (!out.terminal && distance(robot.position(), sc.goal) <= goal_radius) {
    out.terminal = Outcome::Success;
  }
  return out;
}

inline std::vector<SimAgent> initial_agents(const Scenario& sc) {
  std::vector<SimAgent> out;
  for (const AgentSpec& a : sc.agents) out.push_back({a, a.init, -1});
  if (sc.trace) {
    for (std::size_t k = 0; k < sc.trace->tracks.size(); ++k) {
      const auto st = trace_agent_at(sc.trace->tracks[k], sc.trace_start);
      if (!st) continue;
      AgentSpec spec;
      spec.init = *st;
      spec.policy = PolicyKind::Trace;
      out.push_back({spec, *st, static_cast<int>(k)});
    }
  }
  return out;
}

// Grid scenes navigate along the clearance-aware grid path (wide clearance
// first, then the robot radius plus a small margin), planned once. Without a
// grid, or when the goal is unreachable on the grid, there is no fixed path:
// each cycle uses the line from the robot to the goal, see cycle_navigation.
inline std::optional<NavigationPath> episode_navigation(const Scenario& sc,
                                                        const GridDistanceTransform* edt,
                                                        const KinodynamicLimits& lim,
                                                        const PlannerParams& params) {
  if (!sc.has_grid() || !edt || edt->empty()) return std::nullopt;
  try {
    return plan_global(*sc.grid, *edt, sc.start.position(), sc.goal,
                       lim.radius + params.eta + 0.1, default_dp_epsilon(*sc.grid));
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::NoPath) throw;
  }
  try {
    return plan_global(*sc.grid, *edt, sc.start.position(), sc.goal, default_clearance(lim),
                       default_dp_epsilon(*sc.grid));
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::NoPath) throw;
  }
  return std::nullopt;
}

inline NavigationPath cycle_navigation(const std::optional<NavigationPath>& fixed,
                                       const RobotState& robot, Vec2 goal) {
  if (fixed) return *fixed;
  if (distance(robot.position(), goal) < 1e-9) {
    // Already on the goal: a zero-length stub along the current heading.
    return NavigationPath::straight_line(
        robot.position(), {goal.x + 1e-3 * std::cos(robot.theta), goal.y + 1e-3 * std::sin(robot.theta)});
  }
  return NavigationPath::straight_line(robot.position(), goal);
}

/// Closed loop at the planner's cadence: sense agents inside the sensing
/// range, plan, apply the command, advance agents, classify.
inline EpisodeRecord run_episode(const Scenario& sc, const PlannerConfig& config,
                                 const AblationConfig& ablation, std::uint64_t seed,
                                 const SimSettings& sim = {}, const LmSettings& lm = {}) {
  config.validate();
  sc.validate(config.limits.radius);
  if (std::abs(config.params.dt - sim.dt) > 1e-12) {
    throw Error(ErrorKind::ConfigError, "planner dt must equal the simulation step");
  }
  const KinodynamicLimits& lim = config.limits;
  std::shared_ptr<const GridDistanceTransform> edt;
  if (sc.has_grid()) edt = std::make_shared<const GridDistanceTransform>(*sc.grid);
  const std::optional<NavigationPath> fixed_nav = episode_navigation(sc, edt.get(), lim, config.params);
  const LocalPlanner planner(config, ablation, lm, derive_seed(seed, "planner"), edt);

  EpisodeRecord rec;
  rec.seed = seed;
  RobotState robot{sc.start.x, sc.start.y, sc.start.theta, 0.0, 0.0};
  std::vector<SimAgent> world = initial_agents(sc);
  const std::size_t max_steps = static_cast<std::size_t>(std::ceil(sc.time_limit / sim.dt - 1e-9));
  auto snapshot = [&world] {
    std::vector<Agent> out;
    out.reserve(world.size());
    for (const SimAgent& a : world) out.push_back(a.state);
    return out;
  };

  double t = 0.0;
  for (std::size_t step = 0;; ++step) {
    t = static_cast<double>(step) * sim.dt;
    const std::vector<Agent> truth = snapshot();
    const WorldCheck check = classify_state(sc, edt.get(), robot, truth, lim.radius, sim.goal_radius);
    rec.min_clearance = std::min(rec.min_clearance, check.clearance);
    if (check.terminal) {
      rec.outcome = *check.terminal;
      break;
    }
    if (step >= max_steps) {
      rec.outcome = Outcome::Timeout;
      break;
    }
    std::vector<Agent> visible;
    for (const Agent& a : truth) {
      if (distance(a.position(), robot.position()) <= lim.sensing_range) visible.push_back(a);
    }
    const PlanResult plan =
        planner.plan(robot, visible, cycle_navigation(fixed_nav, robot, sc.goal), step);
    StepRecord sr;
    sr.t = t;
    sr.robot = robot;
    sr.command = plan.command;
    if (sim.keep_agents) sr.agents = truth;
    sr.latency_ms = plan.latency_ms;
    sr.degenerate = plan.degenerate();
    sr.fallback = plan.fallback;
    rec.steps.push_back(std::move(sr));

    robot = step_dynamics(robot, plan.command, sim.dt);
    agents_step(world, sim.dt, sc.trace_start + static_cast<double>(step + 1) * sim.dt,
                derive_seed(sc.seed, "agents.candidates", step), sc.trace ? &*sc.trace : nullptr,
                edt.get());
  }
  rec.final_state = robot;
  rec.final_agents = snapshot();
  rec.end_time = t;
  return rec;
}

// Replays the recorded states and reports the outcome they imply.
inline Outcome rescan_outcome(const Scenario& sc, const EpisodeRecord& rec, double robot_radius,
                              double time_limit, const SimSettings& sim = {}) {
  std::unique_ptr<GridDistanceTransform> edt;
  if (sc.has_grid()) edt = std::make_unique<GridDistanceTransform>(*sc.grid);
  for (const StepRecord& s : rec.steps) {
    const auto c = classify_state(sc, edt.get(), s.robot, s.agents, robot_radius, sim.goal_radius);
    if (c.terminal) return *c.terminal;
  }
  const auto c = classify_state(sc, edt.get(), rec.final_state, rec.final_agents, robot_radius,
                                sim.goal_radius);
  if (c.terminal) return *c.terminal;
  if (rec.end_time + 1e-9 >= time_limit) return Outcome::Timeout;
  return Outcome::Failed;
}

// Per-step lines followed by one summary line carrying the outcome. Wall-clock
// latency is left out so the file is reproducible; see write_latency_csv.
inline void write_episode_jsonl(std::ostream& out, const EpisodeRecord& rec) {
  auto state = [](const RobotState& s) {
    return nlohmann::json::array({s.x, s.y, s.theta, s.v, s.omega});
  };
  auto agents = [](const std::vector<Agent>& as) {
    nlohmann::json arr = nlohmann::json::array();
    for (const Agent& a : as) arr.push_back({a.x, a.y, a.vx, a.vy, a.r});
    return arr;
  };
  for (const StepRecord& s : rec.steps) {
    nlohmann::json j{{"t", s.t},
                     {"robot", state(s.robot)},
                     {"command", {s.command.a_v, s.command.a_omega}},
                     {"agents", agents(s.agents)},
                     {"degenerate", s.degenerate},
                     {"fallback", s.fallback}};
    out << j.dump() << '\n';
  }
  nlohmann::json fin{{"outcome", to_string(rec.outcome)},
                     {"seed", rec.seed},
                     {"t", rec.end_time},
                     {"steps", rec.steps.size()},
                     {"robot", state(rec.final_state)},
                     {"agents", agents(rec.final_agents)}};
  fin["min_clearance"] = rec.has_clearance() ? nlohmann::json(rec.min_clearance) : nlohmann::json(nullptr);
  if (!rec.error.empty()) fin["error"] = rec.error;
  out << fin.dump() << '\n';
}

inline void write_latency_csv(std::ostream& out, const EpisodeRecord& rec) {
  out << "step,latency_ms\n";
  for (std::size_t k = 0; k < rec.steps.size(); ++k) {
    out << k << ',' << rec.steps[k].latency_ms << '\n';
  }
}

}  // namespace ltdwa
