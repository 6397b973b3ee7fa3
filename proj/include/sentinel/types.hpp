#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sentinel/errors.hpp"

namespace sentinel {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using VectorSet = std::vector<Vector>;

/// One sampled action-chunk: a prediction of the next `rows()` actions, one
/// action of dimension `cols()` per row.
struct ActionChunk {
  Matrix values;  // prediction_horizon x action_dim

  int horizon() const { return static_cast<int>(values.rows()); }
  int action_dim() const { return static_cast<int>(values.cols()); }

  void validate() const {
    if (values.rows() < 1 || values.cols() < 1)
      throw PreconditionError("action chunk must have at least one row and column");
    if (!values.allFinite())
      throw PreconditionError("action chunk contains non-finite values");
  }
};

/// The batch of chunks a generative policy sampled at one inference timestep.
/// `t` counts environment steps and is a multiple of the execution horizon.
struct ChunkBatch {
  std::int64_t t = 0;
  std::vector<ActionChunk> chunks;

  int size() const { return static_cast<int>(chunks.size()); }

  void validate() const {
    if (chunks.empty()) throw PreconditionError("chunk batch is empty");
    if (t < 0) throw PreconditionError("chunk batch timestep is negative");
    const int h = chunks.front().horizon();
    const int d = chunks.front().action_dim();
    for (const ActionChunk& chunk : chunks) {
      chunk.validate();
      if (chunk.horizon() != h || chunk.action_dim() != d)
        throw PreconditionError("chunk shape mismatch within batch");
    }
  }
};

/// One inference step of a recorded episode: the sampled batch, the actions
/// actually executed before the next inference, and an optional observation
/// embedding for embedding-similarity monitors.
struct RolloutStep {
  ChunkBatch batch;
  Matrix executed;  // execution_horizon x action_dim
  std::optional<Vector> embedding;
};

struct RolloutHeader {
  std::string episode_id;
  int prediction_horizon = 0;   // chunk length (h)
  int execution_horizon = 0;    // actions executed per inference (k)
  int action_dim = 0;           // entries per action (d)
  std::int64_t max_env_steps = 0;  // episode budget in environment steps (H)
  double dt = 0.0;              // seconds per environment step

  void validate() const {
    if (execution_horizon < 1 || execution_horizon >= prediction_horizon)
      throw PreconditionError("header requires 1 <= execution horizon < prediction horizon");
    if (action_dim < 1) throw PreconditionError("header action_dim must be >= 1");
    if (max_env_steps < execution_horizon)
      throw PreconditionError("header episode budget shorter than one execution block");
    if (max_env_steps % execution_horizon != 0)
      throw PreconditionError("header episode budget not divisible by execution horizon");
    if (!(dt > 0.0) || !std::isfinite(dt)) throw PreconditionError("header dt must be positive");
  }
};

/// A recorded episode. Steps sit at timesteps 0, k, 2k, ...; the executed
/// length is k * steps.size() and never exceeds the budget. Episodes that end
/// mid-chunk are truncated to the last completed inference step.
struct Rollout {
  RolloutHeader header;
  std::vector<RolloutStep> steps;
  double terminal_return = 0.0;
  bool success = false;

  /// Environment steps actually executed (H').
  std::int64_t length() const {
    return static_cast<std::int64_t>(steps.size()) * header.execution_horizon;
  }

  void validate() const {
    header.validate();
    if (!std::isfinite(terminal_return))
      throw PreconditionError("terminal return is not finite");
    if (length() > header.max_env_steps)
      throw PreconditionError("rollout longer than its episode budget");
    const int k = header.execution_horizon;
    std::int64_t expected_t = 0;
    for (const RolloutStep& step : steps) {
      step.batch.validate();
      if (step.batch.t != expected_t)
        throw PreconditionError("step timestep gap at t=" + std::to_string(step.batch.t));
      for (const ActionChunk& chunk : step.batch.chunks) {
        if (chunk.horizon() != header.prediction_horizon ||
            chunk.action_dim() != header.action_dim)
          throw PreconditionError("chunk shape mismatch");
      }
      if (step.executed.rows() != k || step.executed.cols() != header.action_dim)
        throw PreconditionError("executed action shape mismatch");
      if (!step.executed.allFinite())
        throw PreconditionError("executed actions contain non-finite values");
      if (step.embedding && !step.embedding->allFinite())
        throw PreconditionError("embedding contains non-finite values");
      expected_t += k;
    }
  }
};

/// Action-space columns included when comparing chunks. Lets monitors omit
/// dimensions such as binary gripper commands whose jumps would swamp the
/// statistical distances.
struct DimensionMask {
  std::vector<int> included;

  DimensionMask() = default;
  explicit DimensionMask(std::vector<int> columns) : included(std::move(columns)) {
    std::sort(included.begin(), included.end());
    included.erase(std::unique(included.begin(), included.end()), included.end());
  }

  static DimensionMask all(int action_dim) {
    std::vector<int> columns(static_cast<std::size_t>(action_dim));
    for (int i = 0; i < action_dim; ++i) columns[static_cast<std::size_t>(i)] = i;
    return DimensionMask(std::move(columns));
  }

  int size() const { return static_cast<int>(included.size()); }

  void validate(int action_dim) const {
    if (included.empty()) throw PreconditionError("dimension mask is empty");
    for (int c : included)
      if (c < 0 || c >= action_dim)
        throw PreconditionError("dimension mask index out of range");
  }
};

struct OverlapSlices {
  VectorSet earlier;  // one vector per chunk of the earlier batch
  VectorSet later;    // one vector per chunk of the later batch
};

namespace detail {

/// Flattens `count` rows of a chunk starting at `first_row`, time-major:
/// all masked columns of the first row, then the next row, and so on. The
/// order is arbitrary for L2-based kernels but must match on both sides of a
/// comparison, so it is fixed here once.
inline Vector flatten_rows(const ActionChunk& chunk, int first_row, int count,
                           const DimensionMask& mask) {
  Vector out(static_cast<Eigen::Index>(count) * mask.size());
  Eigen::Index pos = 0;
  for (int r = first_row; r < first_row + count; ++r)
    for (int c : mask.included) out[pos++] = chunk.values(r, c);
  return out;
}

}  // namespace detail

/// Overlap slice of one chunk sampled at time t: the rows predicting
/// timesteps t+k .. t+h-1 (the part the next inference will predict again).
inline Vector overlap_tail(const ActionChunk& chunk, int execution_horizon,
                           const DimensionMask& mask) {
  const int h = chunk.horizon();
  if (execution_horizon < 1 || execution_horizon >= h)
    throw PreconditionError("overlap requires 1 <= execution horizon < prediction horizon");
  mask.validate(chunk.action_dim());
  return detail::flatten_rows(chunk, execution_horizon, h - execution_horizon, mask);
}

/// Overlap slice of one chunk sampled at time t+k: the rows predicting the
/// same timesteps t+k .. t+h-1, i.e. the first h-k rows.
inline Vector overlap_head(const ActionChunk& chunk, int execution_horizon,
                           const DimensionMask& mask) {
  const int h = chunk.horizon();
  if (execution_horizon < 1 || execution_horizon >= h)
    throw PreconditionError("overlap requires 1 <= execution horizon < prediction horizon");
  mask.validate(chunk.action_dim());
  return detail::flatten_rows(chunk, 0, h - execution_horizon, mask);
}

/// Extracts the temporally overlapping action predictions of two batches
/// sampled k environment steps apart. Every returned vector has dimension
/// (h - k) * |mask|.
inline OverlapSlices overlap_slices(const ChunkBatch& earlier, const ChunkBatch& later,
                                    int execution_horizon, const DimensionMask& mask) {
  earlier.validate();
  later.validate();
  if (later.t != earlier.t + execution_horizon)
    throw PreconditionError("batch timestep mismatch: expected delta of " +
                            std::to_string(execution_horizon) + ", got " +
                            std::to_string(later.t - earlier.t));
  const ActionChunk& probe = earlier.chunks.front();
  if (later.chunks.front().horizon() != probe.horizon() ||
      later.chunks.front().action_dim() != probe.action_dim())
    throw PreconditionError("chunk shape mismatch between batches");

  OverlapSlices out;
  out.earlier.reserve(earlier.chunks.size());
  out.later.reserve(later.chunks.size());
  for (const ActionChunk& chunk : earlier.chunks)
    out.earlier.push_back(overlap_tail(chunk, execution_horizon, mask));
  for (const ActionChunk& chunk : later.chunks)
    out.later.push_back(overlap_head(chunk, execution_horizon, mask));
  return out;
}

/// Per-episode consistency scores: one non-negative distance per step
/// boundary plus the running cumulative series, cumulative[0] == 0.
struct ScoreSeries {
  std::vector<double> step_scores;
  std::vector<double> cumulative;

  double terminal() const { return cumulative.back(); }

  void validate() const {
    if (cumulative.size() != step_scores.size() + 1)
      throw PreconditionError("cumulative series must have one more entry than step scores");
    if (cumulative.front() != 0.0) throw PreconditionError("cumulative series must start at 0");
    for (std::size_t i = 0; i < step_scores.size(); ++i) {
      if (!(step_scores[i] >= 0.0))
        throw PreconditionError("step scores must be non-negative");
      if (cumulative[i + 1] < cumulative[i])
        throw PreconditionError("cumulative series must be non-decreasing");
    }
  }
};

inline ScoreSeries make_score_series(std::vector<double> step_scores) {
  ScoreSeries series;
  series.cumulative.reserve(step_scores.size() + 1);
  series.cumulative.push_back(0.0);
  double running = 0.0;
  for (double s : step_scores) {
    if (!(s >= 0.0) || !std::isfinite(s))
      throw PreconditionError("step scores must be finite and non-negative");
    running += s;
    series.cumulative.push_back(running);
  }
  series.step_scores = std::move(step_scores);
  return series;
}

/// A calibrated detection threshold together with everything needed to audit
/// and reproduce it.
struct CalibrationResult {
  double gamma = std::numeric_limits<double>::infinity();
  double delta = 0.0;
  int calibration_size = 0;  // M
  std::string score_id;
  std::map<std::string, double> hyperparams;
  std::vector<double> calibration_scores;

  bool finite() const { return std::isfinite(gamma); }
};

/// Episode-level outcome of a monitor: whether it flagged, and if so the
/// first flagged timestep (environment steps) and its wall-clock equivalent.
struct EpisodeVerdict {
  bool flagged = false;
  std::optional<std::int64_t> detection_step;
  std::optional<double> detection_time_seconds;
};

inline EpisodeVerdict make_verdict(std::optional<std::int64_t> detection_step, double dt) {
  EpisodeVerdict v;
  v.flagged = detection_step.has_value();
  v.detection_step = detection_step;
  if (detection_step) v.detection_time_seconds = static_cast<double>(*detection_step) * dt;
  return v;
}

}  // namespace sentinel
