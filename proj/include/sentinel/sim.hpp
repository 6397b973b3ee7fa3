#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sentinel/errors.hpp"
#include "sentinel/rng.hpp"
#include "sentinel/types.hpp"

namespace sentinel {

// Synthetic generative-policy rollouts with controllable failure regimes and
// ground-truth success labels. The task is a 2-D point mass that starts at
// the origin and must come within `success_radius` of `goal` before the
// episode budget runs out. The policy plans noisy straight-line velocity
// chunks via one of `num_modes` detour waypoints, which gives the sampled
// batches the two properties the monitors care about: multimodal chunk
// distributions, and temporally consistent overlaps under nominal behavior.
//
// Failure regimes:
//  - erratic: with `mode_switch_prob` per inference step the committed mode
//    re-randomizes, which discards detour progress and sends the plan toward
//    a different waypoint; the resulting wandering misses the deadline and
//    the batch mixture shift is visible to statistical distances.
//  - stall: with `stall_prob` per inference step the episode enters an
//    absorbing stall where every chunk is a near-zero velocity plan. Motion
//    stops but consecutive batches remain nearly identical, so temporal
//    monitors stay quiet; only a task-progress monitor sees the failure.

struct SimScenario {
  std::string name;
  int prediction_horizon = 16;
  int execution_horizon = 8;
  int action_dim = 2;
  std::int64_t max_env_steps = 96;
  double dt = 0.1;
  int batch_size = 32;
  int num_modes = 3;
  double mode_switch_prob = 0.0;
  double chunk_noise_std = 0.05;
  double stall_prob = 0.0;
  Eigen::Vector2d goal{6.0, 0.0};
  double success_radius = 0.5;
  double embedding_noise_std = 0.05;

  void validate() const {
    if (name.empty()) throw PreconditionError("scenario name is empty");
    if (execution_horizon < 1 || execution_horizon >= prediction_horizon)
      throw PreconditionError("scenario requires 1 <= execution horizon < prediction horizon");
    if (action_dim != 2)
      throw PreconditionError("the point-mass task requires a 2-dimensional action space");
    if (max_env_steps < execution_horizon || max_env_steps % execution_horizon != 0)
      throw PreconditionError("scenario budget must be a positive multiple of the execution horizon");
    if (!(dt > 0.0)) throw PreconditionError("scenario dt must be positive");
    if (batch_size < 2) throw PreconditionError("scenario batch size must be at least 2");
    if (num_modes < 1) throw PreconditionError("scenario needs at least one mode");
    for (double p : {mode_switch_prob, stall_prob})
      if (!(p >= 0.0 && p <= 1.0)) throw PreconditionError("scenario probabilities must lie in [0, 1]");
    if (chunk_noise_std < 0.0 || embedding_noise_std < 0.0)
      throw PreconditionError("scenario noise levels must be non-negative");
    if (!(success_radius > 0.0)) throw PreconditionError("scenario success radius must be positive");
    if (goal.norm() <= success_radius)
      throw PreconditionError("scenario goal must lie outside the success radius of the start");
  }
};

namespace sim_detail {

constexpr double kMaxSpeed = 1.0;            // point-mass speed limit
constexpr double kWaypointTolerance = 0.25;  // detour counts as visited within this radius
constexpr double kDominantWeight = 0.6;      // batch mixture mass on the committed mode
constexpr double kPreviousWeight = 0.25;     // mass lingering on the previously committed mode

/// Detour waypoints sit at the midpoint of the start-goal segment, spread
/// along the perpendicular. A single mode degenerates to the straight path.
inline Eigen::Vector2d waypoint(const SimScenario& sc, int mode) {
  const Eigen::Vector2d mid = 0.5 * sc.goal;
  if (sc.num_modes == 1) return mid;
  const Eigen::Vector2d direction = sc.goal.normalized();
  const Eigen::Vector2d perpendicular(-direction.y(), direction.x());
  const double span = sc.goal.norm() / 3.0;
  const double offset =
      -span + 2.0 * span * static_cast<double>(mode) / static_cast<double>(sc.num_modes - 1);
  return mid + offset * perpendicular;
}

/// Plans one h-step velocity chunk from `state`: head to the mode's waypoint
/// until it is visited (or already was), then to the goal, never overshooting
/// either within a simulated step. Gaussian noise perturbs every entry and
/// the simulated position integrates the noisy rows, so a chunk is one
/// coherent noisy trajectory.
inline Matrix plan_chunk(const SimScenario& sc, const Eigen::Vector2d& state,
                         const Eigen::Vector2d& target_waypoint, bool waypoint_visited,
                         bool stalled, SplitMix64& rng) {
  Matrix rows(sc.prediction_horizon, 2);
  if (stalled) {
    for (int r = 0; r < sc.prediction_horizon; ++r)
      for (int c = 0; c < 2; ++c)
        rows(r, c) = sc.chunk_noise_std > 0.0 ? sc.chunk_noise_std * rng.gaussian() : 0.0;
    return rows;
  }

  Eigen::Vector2d p = state;
  bool visited = waypoint_visited;
  for (int r = 0; r < sc.prediction_horizon; ++r) {
    if (!visited && (p - target_waypoint).norm() <= kWaypointTolerance) visited = true;
    const Eigen::Vector2d target = visited ? Eigen::Vector2d(sc.goal) : target_waypoint;
    const Eigen::Vector2d to_target = target - p;
    const double dist = to_target.norm();
    Eigen::Vector2d velocity = Eigen::Vector2d::Zero();
    if (dist > 1e-12) velocity = to_target * (std::min(kMaxSpeed, dist / sc.dt) / dist);
    for (int c = 0; c < 2; ++c) {
      rows(r, c) = velocity[c];
      if (sc.chunk_noise_std > 0.0) rows(r, c) += sc.chunk_noise_std * rng.gaussian();
    }
    p += rows.row(r).transpose() * sc.dt;
  }
  return rows;
}

}  // namespace sim_detail

/// Generates one episode, fully determined by (scenario, seed). The chunk
/// recorded first in each batch is the one the agent executes.
inline Rollout generate_rollout(const SimScenario& sc, std::uint64_t seed,
                                const std::string& episode_id = "") {
  sc.validate();
  SplitMix64 rng(seed);

  Rollout rollout;
  rollout.header.episode_id =
      episode_id.empty() ? sc.name + "-s" + std::to_string(seed) : episode_id;
  rollout.header.prediction_horizon = sc.prediction_horizon;
  rollout.header.execution_horizon = sc.execution_horizon;
  rollout.header.action_dim = sc.action_dim;
  rollout.header.max_env_steps = sc.max_env_steps;
  rollout.header.dt = sc.dt;

  Eigen::Vector2d state = Eigen::Vector2d::Zero();
  bool stalled = false;
  // The policy remembers which detours its trajectory has already completed,
  // per mode: a plan for a visited mode heads straight to the goal.
  std::vector<char> visited(static_cast<std::size_t>(sc.num_modes), 0);
  int dominant_mode = rng.uniform_int(sc.num_modes);
  int previous_mode = dominant_mode;

  const std::int64_t max_blocks = sc.max_env_steps / sc.execution_horizon;
  bool success = false;

  for (std::int64_t block = 0; block < max_blocks; ++block) {
    if (!stalled && sc.stall_prob > 0.0 && rng.uniform() < sc.stall_prob) stalled = true;
    if (!stalled && block > 0 && sc.mode_switch_prob > 0.0 &&
        rng.uniform() < sc.mode_switch_prob) {
      previous_mode = dominant_mode;
      dominant_mode = rng.uniform_int(sc.num_modes);
    }

    RolloutStep step;
    step.batch.t = block * sc.execution_horizon;

    Vector embedding(2);
    embedding[0] = state.x();
    embedding[1] = state.y();
    if (sc.embedding_noise_std > 0.0) {
      embedding[0] += sc.embedding_noise_std * rng.gaussian();
      embedding[1] += sc.embedding_noise_std * rng.gaussian();
    }
    step.embedding = std::move(embedding);

    step.batch.chunks.reserve(static_cast<std::size_t>(sc.batch_size));
    for (int b = 0; b < sc.batch_size; ++b) {
      int mode = dominant_mode;
      if (!stalled && b > 0 && sc.num_modes > 1) {
        // Mixture draw: most mass on the committed mode, some lingering on
        // the previously committed one, the rest uniform.
        const double u = rng.uniform();
        if (u >= sim_detail::kDominantWeight) {
          if (previous_mode != dominant_mode &&
              u < sim_detail::kDominantWeight + sim_detail::kPreviousWeight) {
            mode = previous_mode;
          } else {
            const int other = rng.uniform_int(sc.num_modes - 1);
            mode = other >= dominant_mode ? other + 1 : other;
          }
        }
      }
      ActionChunk chunk;
      chunk.values = sim_detail::plan_chunk(sc, state, sim_detail::waypoint(sc, mode),
                                            visited[static_cast<std::size_t>(mode)] != 0,
                                            stalled, rng);
      step.batch.chunks.push_back(std::move(chunk));
    }

    step.executed = step.batch.chunks.front().values.topRows(sc.execution_horizon);
    for (int r = 0; r < sc.execution_horizon; ++r) {
      state += step.executed.row(r).transpose() * sc.dt;
      for (int m = 0; m < sc.num_modes; ++m) {
        if (!visited[static_cast<std::size_t>(m)] &&
            (state - sim_detail::waypoint(sc, m)).norm() <= sim_detail::kWaypointTolerance)
          visited[static_cast<std::size_t>(m)] = 1;
      }
    }
    rollout.steps.push_back(std::move(step));

    if ((state - sc.goal).norm() <= sc.success_radius) {
      success = true;
      break;
    }
  }

  rollout.success = success;
  rollout.terminal_return = success ? 1.0 : -1.0;
  rollout.validate();
  return rollout;
}

/// Rejection-samples the index-th successful episode. Distinct indices use
/// disjoint seed streams, so the draws are independent and identically
/// distributed under the success-conditioned episode distribution.
inline Rollout draw_successful(const SimScenario& sc, std::uint64_t base_seed,
                               std::uint64_t index, const std::string& episode_id = "") {
  for (std::uint64_t attempt = 0; attempt < 10000; ++attempt) {
    Rollout rollout = generate_rollout(sc, derive_stream(base_seed + index, attempt), episode_id);
    if (rollout.success) return rollout;
  }
  throw Error("generator failed to produce a successful episode for scenario '" + sc.name + "'");
}

enum class ScenarioPreset { nominal, erratic_ood, stall_ood };

inline const char* preset_name(ScenarioPreset preset) {
  switch (preset) {
    case ScenarioPreset::nominal: return "nominal";
    case ScenarioPreset::erratic_ood: return "erratic_ood";
    case ScenarioPreset::stall_ood: return "stall_ood";
  }
  throw PreconditionError("unknown scenario preset");
}

struct Suite {
  std::vector<Rollout> calibration;  // successful nominal episodes
  std::vector<Rollout> test;         // everything else, labels included
};

/// Generates the requested number of episodes per preset with seeds
/// base_seed + running index. Successful nominal episodes form the
/// calibration split; failed nominal episodes and all OOD episodes form the
/// test split.
inline Suite generate_suite(const std::map<ScenarioPreset, int>& mix,
                            const std::map<ScenarioPreset, SimScenario>& presets,
                            std::uint64_t base_seed) {
  Suite suite;
  std::uint64_t index = 0;
  for (const auto& [preset, count] : mix) {
    if (count < 0) throw PreconditionError("suite episode counts must be non-negative");
    const auto found = presets.find(preset);
    if (found == presets.end())
      throw PreconditionError(std::string("no scenario provided for preset '") +
                              preset_name(preset) + "'");
    for (int i = 0; i < count; ++i, ++index) {
      char id[64];
      std::snprintf(id, sizeof(id), "%s-%05llu", preset_name(preset),
                    static_cast<unsigned long long>(index));
      Rollout rollout = generate_rollout(found->second, base_seed + index, id);
      if (preset == ScenarioPreset::nominal && rollout.success)
        suite.calibration.push_back(std::move(rollout));
      else
        suite.test.push_back(std::move(rollout));
    }
  }
  return suite;
}

// ---------------------------------------------------------------------------
// Scenario files: one JSON document per scenario, every field explicit.

inline nlohmann::ordered_json scenario_to_json(const SimScenario& sc) {
  nlohmann::ordered_json doc;
  doc["name"] = sc.name;
  doc["h"] = sc.prediction_horizon;
  doc["k"] = sc.execution_horizon;
  doc["d"] = sc.action_dim;
  doc["H"] = sc.max_env_steps;
  doc["dt"] = sc.dt;
  doc["B"] = sc.batch_size;
  doc["num_modes"] = sc.num_modes;
  doc["mode_switch_prob"] = sc.mode_switch_prob;
  doc["chunk_noise_std"] = sc.chunk_noise_std;
  doc["stall_prob"] = sc.stall_prob;
  doc["goal"] = {sc.goal.x(), sc.goal.y()};
  doc["success_radius"] = sc.success_radius;
  doc["embedding_noise_std"] = sc.embedding_noise_std;
  return doc;
}

inline void save_scenario(const SimScenario& sc, std::ostream& out) {
  sc.validate();
  out << scenario_to_json(sc).dump(2) << '\n';
  if (!out) throw Error("scenario sink write failure");
}

inline SimScenario load_scenario(std::istream& in) {
  nlohmann::ordered_json doc;
  try {
    doc = nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed scenario file: ") + e.what());
  }
  SimScenario sc;
  try {
    sc.name = doc.at("name").get<std::string>();
    sc.prediction_horizon = doc.at("h").get<int>();
    sc.execution_horizon = doc.at("k").get<int>();
    sc.action_dim = doc.at("d").get<int>();
    sc.max_env_steps = doc.at("H").get<std::int64_t>();
    sc.dt = doc.at("dt").get<double>();
    sc.batch_size = doc.at("B").get<int>();
    sc.num_modes = doc.at("num_modes").get<int>();
    sc.mode_switch_prob = doc.at("mode_switch_prob").get<double>();
    sc.chunk_noise_std = doc.at("chunk_noise_std").get<double>();
    sc.stall_prob = doc.at("stall_prob").get<double>();
    const auto goal = doc.at("goal").get<std::vector<double>>();
    if (goal.size() != 2) throw FormatError("scenario goal must have two coordinates");
    sc.goal = Eigen::Vector2d(goal[0], goal[1]);
    sc.success_radius = doc.at("success_radius").get<double>();
    sc.embedding_noise_std = doc.at("embedding_noise_std").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed scenario file: ") + e.what());
  }
  sc.validate();
  return sc;
}

}  // namespace sentinel
