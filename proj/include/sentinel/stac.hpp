#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sentinel/distances.hpp"
#include "sentinel/errors.hpp"
#include "sentinel/parallel.hpp"
#include "sentinel/types.hpp"

namespace sentinel {

// Temporal-consistency failure detection: per-boundary statistical distances
// between consecutive chunk batches, their running cumulative score, a
// conformally calibrated threshold on that score, and the online monitor.

struct StacConfig {
  DistanceConfig distance;
  DimensionMask mask;  // empty means all action dimensions
  double delta = 0.05;

  void validate() const {
    distance.validate();
    if (!(delta > 0.0 && delta < 1.0)) throw PreconditionError("delta must lie in (0, 1)");
  }
};

inline DimensionMask resolve_mask(const DimensionMask& mask, int action_dim) {
  if (mask.included.empty()) return DimensionMask::all(action_dim);
  mask.validate(action_dim);
  return mask;
}

/// Distance between the overlapping action distributions of two consecutive
/// batches. The execution horizon is inferred from the timestep gap; the
/// bandwidth is resolved per call from the two overlap sets at hand.
inline double step_distance(const ChunkBatch& earlier, const ChunkBatch& later,
                            const StacConfig& cfg) {
  cfg.validate();
  earlier.validate();
  later.validate();
  if (later.t <= earlier.t)
    throw PreconditionError("batch ordering violation: timesteps must increase");
  const std::int64_t gap = later.t - earlier.t;
  const int h = earlier.chunks.front().horizon();
  if (gap >= h)
    throw PreconditionError("batch ordering violation: no temporal overlap between batches");
  const int k = static_cast<int>(gap);
  const DimensionMask mask = resolve_mask(cfg.mask, earlier.chunks.front().action_dim());

  if (cfg.distance.kind == DistanceKind::nondist_min) {
    // Reference is the overlap slice of the chunk executed at the earlier
    // step; by convention the executed chunk is recorded first in its batch.
    const Vector reference = overlap_tail(earlier.chunks.front(), k, mask);
    VectorSet candidates;
    candidates.reserve(later.chunks.size());
    for (const ActionChunk& chunk : later.chunks)
      candidates.push_back(overlap_head(chunk, k, mask));
    return nondist_min(reference, candidates);
  }

  if (earlier.size() < 2 || later.size() < 2)
    throw PreconditionError("batch too small for statistical distance (need at least 2 chunks)");
  const OverlapSlices slices = overlap_slices(earlier, later, k, mask);
  const double beta = resolve_bandwidth(cfg.distance, slices.earlier, slices.later);
  switch (cfg.distance.kind) {
    case DistanceKind::mmd_rbf:
      return mmd_squared(slices.earlier, slices.later, beta);
    case DistanceKind::kl_forward_kde:
      return kl_forward(slices.earlier, slices.later, beta, cfg.distance.log_density_floor);
    case DistanceKind::kl_reverse_kde:
      return kl_reverse(slices.earlier, slices.later, beta, cfg.distance.log_density_floor);
    case DistanceKind::nondist_min:
      break;  // handled above
  }
  throw PreconditionError("unknown distance kind");
}

/// Scores a whole episode offline. cumulative[j] is the consistency score
/// after the j-th inference step, so thresholding the series reproduces the
/// online monitor exactly.
inline ScoreSeries score_rollout(const Rollout& rollout, const StacConfig& cfg) {
  if (rollout.steps.empty()) throw PreconditionError("score_rollout requires at least one step");
  std::vector<double> step_scores;
  step_scores.reserve(rollout.steps.size() - 1);
  for (std::size_t i = 0; i + 1 < rollout.steps.size(); ++i)
    step_scores.push_back(step_distance(rollout.steps[i].batch, rollout.steps[i + 1].batch, cfg));
  return make_score_series(std::move(step_scores));
}

/// Conformal threshold: the r-th smallest calibration score with
/// r = ceil((M+1)(1-delta)), or +infinity when r exceeds M (the detector
/// then never flags and the false-positive guarantee holds vacuously).
inline CalibrationResult calibrate_threshold(std::vector<double> terminal_scores, double delta) {
  if (terminal_scores.empty()) throw PreconditionError("calibration requires at least one score");
  if (!(delta > 0.0 && delta < 1.0)) throw PreconditionError("delta must lie in (0, 1)");
  for (double s : terminal_scores)
    if (!std::isfinite(s)) throw PreconditionError("calibration scores must be finite");

  CalibrationResult result;
  result.delta = delta;
  result.calibration_size = static_cast<int>(terminal_scores.size());
  result.calibration_scores = terminal_scores;

  const double exact = (static_cast<double>(result.calibration_size) + 1.0) * (1.0 - delta);
  // The small epsilon absorbs cases like (M+1)(1-delta) that are integers in
  // exact arithmetic but land a hair above one in doubles.
  const auto rank = static_cast<std::int64_t>(std::ceil(exact - 1e-9));
  const std::int64_t r = std::max<std::int64_t>(rank, 1);
  if (r > result.calibration_size) {
    result.gamma = std::numeric_limits<double>::infinity();
  } else {
    std::sort(terminal_scores.begin(), terminal_scores.end());
    result.gamma = terminal_scores[static_cast<std::size_t>(r - 1)];
  }
  return result;
}

enum class Verdict { ok, failure };

/// Running state of the online monitor for one episode. Single-owner:
/// distinct episodes can be monitored on distinct threads, one state each.
struct MonitorState {
  int execution_horizon = 1;
  std::optional<ChunkBatch> last_batch;
  double eta = 0.0;
  int steps_seen = 0;
  std::optional<std::int64_t> flagged_at;

  explicit MonitorState(int exec_horizon) : execution_horizon(exec_horizon) {}
};

/// Feeds one freshly sampled batch to the monitor. The cumulative score only
/// grows, so a failure verdict never reverts to ok; the first failure
/// timestep is latched in flagged_at. The comparison is strict (eta > gamma):
/// a score that merely ties the threshold does not flag.
inline Verdict monitor_step(MonitorState& state, const ChunkBatch& batch,
                            const CalibrationResult& calibration, const StacConfig& cfg) {
  batch.validate();
  const std::int64_t expected_t =
      static_cast<std::int64_t>(state.steps_seen) * state.execution_horizon;
  if (batch.t != expected_t)
    throw PreconditionError("out-of-order batch: expected t=" + std::to_string(expected_t) +
                            ", got t=" + std::to_string(batch.t));
  if (state.last_batch) state.eta += step_distance(*state.last_batch, batch, cfg);
  state.last_batch = batch;
  state.steps_seen += 1;

  const bool failing = state.eta > calibration.gamma;
  if (failing && !state.flagged_at) state.flagged_at = batch.t;
  return failing ? Verdict::failure : Verdict::ok;
}

/// Replays a recorded episode through the online monitor.
inline EpisodeVerdict replay_monitor(const Rollout& rollout, const CalibrationResult& calibration,
                                     const StacConfig& cfg) {
  MonitorState state(rollout.header.execution_horizon);
  for (const RolloutStep& step : rollout.steps)
    monitor_step(state, step.batch, calibration, cfg);
  return make_verdict(state.flagged_at, rollout.header.dt);
}

// ---------------------------------------------------------------------------
// Shared detector frame. Every detector in this toolkit reduces to a function
// producing one non-negative score per inference step of an episode; the
// cumulative sum of those scores is calibrated and thresholded identically.

struct Detector {
  std::string score_id;
  // Timestep of scores[j] is (first_scored_step + j) * k: boundary scores
  // (temporal detectors) start at step 1, per-step scores at step 0.
  int first_scored_step = 0;
  std::map<std::string, double> hyperparams;
  std::function<std::vector<double>(const Rollout&)> step_scores;

  double terminal_score(const Rollout& rollout) const {
    double sum = 0.0;
    for (double s : step_scores(rollout)) sum += s;
    return sum;
  }
};

inline const char* score_id_for(DistanceKind kind) {
  switch (kind) {
    case DistanceKind::mmd_rbf: return "stac_mmd";
    case DistanceKind::kl_forward_kde: return "stac_kl_forward";
    case DistanceKind::kl_reverse_kde: return "stac_kl_reverse";
    case DistanceKind::nondist_min: return "temporal_nondist_min";
  }
  throw PreconditionError("unknown distance kind");
}

inline std::map<std::string, double> stac_hyperparams(const StacConfig& cfg) {
  std::map<std::string, double> params;
  params["bandwidth_rule"] = static_cast<double>(cfg.distance.bandwidth_rule);
  if (cfg.distance.bandwidth_rule == BandwidthRule::fixed)
    params["fixed_bandwidth"] = cfg.distance.fixed_bandwidth;
  params["log_density_floor"] = cfg.distance.log_density_floor;
  if (!cfg.mask.included.empty()) {
    double bits = 0.0;
    for (int c : cfg.mask.included) bits += std::ldexp(1.0, c);
    params["mask_bits"] = bits;
  }
  return params;
}

inline Detector make_stac_detector(const StacConfig& cfg) {
  cfg.validate();
  Detector detector;
  detector.score_id = score_id_for(cfg.distance.kind);
  detector.first_scored_step = 1;
  detector.hyperparams = stac_hyperparams(cfg);
  detector.step_scores = [cfg](const Rollout& rollout) {
    return score_rollout(rollout, cfg).step_scores;
  };
  return detector;
}

/// Thresholds a per-step score sequence the way the online monitor would:
/// flag at the first step whose cumulative score strictly exceeds gamma.
inline EpisodeVerdict verdict_from_scores(const std::vector<double>& scores, double gamma,
                                          int first_scored_step, int execution_horizon,
                                          double dt) {
  double eta = 0.0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    eta += scores[j];
    if (eta > gamma) {
      const std::int64_t step =
          (static_cast<std::int64_t>(first_scored_step) + static_cast<std::int64_t>(j)) *
          execution_horizon;
      return make_verdict(step, dt);
    }
  }
  return make_verdict(std::nullopt, dt);
}

// ---------------------------------------------------------------------------
// Empirical validation of the conformal false-positive bound.

struct FprEstimate {
  double fpr = 0.0;
  double ci_low = 0.0;   // 95% normal-approximation interval
  double ci_high = 0.0;
  int flags = 0;
  int trials = 0;
};

/// Estimates the probability of a false alarm under repeated calibration:
/// each trial draws M fresh nominal episodes plus one test episode from the
/// generator, calibrates at cfg.delta, and replays the test episode through
/// the online monitor. The guarantee being checked is marginal over
/// calibration draws, so only the average flag rate is meaningful.
inline FprEstimate fpr_monte_carlo(const std::function<Rollout(std::uint64_t)>& nominal_episode,
                                   const StacConfig& cfg, int calibration_size, int trials,
                                   bool parallel = true) {
  cfg.validate();
  if (calibration_size < 1) throw PreconditionError("calibration size must be at least 1");
  if (trials < 100) throw PreconditionError("fpr check requires at least 100 trials");

  std::vector<int> trial_ids(static_cast<std::size_t>(trials));
  for (int i = 0; i < trials; ++i) trial_ids[static_cast<std::size_t>(i)] = i;

  const std::vector<int> flags = parallel_map(trial_ids, [&](int trial) -> int {
    const std::uint64_t first = static_cast<std::uint64_t>(trial) *
                                static_cast<std::uint64_t>(calibration_size + 1);
    std::vector<double> scores;
    scores.reserve(static_cast<std::size_t>(calibration_size));
    for (int i = 0; i < calibration_size; ++i) {
      const Rollout episode = nominal_episode(first + static_cast<std::uint64_t>(i));
      scores.push_back(score_rollout(episode, cfg).terminal());
    }
    const CalibrationResult calibration = calibrate_threshold(std::move(scores), cfg.delta);
    const Rollout test =
        nominal_episode(first + static_cast<std::uint64_t>(calibration_size));
    return replay_monitor(test, calibration, cfg).flagged ? 1 : 0;
  }, parallel);

  FprEstimate estimate;
  estimate.trials = trials;
  for (int f : flags) estimate.flags += f;
  estimate.fpr = static_cast<double>(estimate.flags) / static_cast<double>(trials);
  const double sigma = std::sqrt(estimate.fpr * (1.0 - estimate.fpr) / trials);
  estimate.ci_low = std::max(0.0, estimate.fpr - 1.96 * sigma);
  estimate.ci_high = std::min(1.0, estimate.fpr + 1.96 * sigma);
  return estimate;
}

// ---------------------------------------------------------------------------
// Calibration artifact file: one JSON document with every field of the
// CalibrationResult, so a monitoring run can be audited and reproduced.
// gamma serializes as null when the threshold is +infinity.

inline nlohmann::ordered_json calibration_to_json(const CalibrationResult& calibration) {
  nlohmann::ordered_json doc;
  if (calibration.finite())
    doc["gamma"] = calibration.gamma;
  else
    doc["gamma"] = nullptr;
  doc["delta"] = calibration.delta;
  doc["m"] = calibration.calibration_size;
  doc["score_id"] = calibration.score_id;
  doc["hyperparams"] = calibration.hyperparams;
  doc["calibration_scores"] = calibration.calibration_scores;
  return doc;
}

inline void save_calibration(const CalibrationResult& calibration, std::ostream& out) {
  out << calibration_to_json(calibration).dump(2) << '\n';
  if (!out) throw Error("calibration sink write failure");
}

inline CalibrationResult load_calibration(std::istream& in) {
  nlohmann::ordered_json doc;
  try {
    doc = nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed calibration artifact: ") + e.what());
  }
  CalibrationResult calibration;
  try {
    if (doc.at("gamma").is_null())
      calibration.gamma = std::numeric_limits<double>::infinity();
    else
      calibration.gamma = doc.at("gamma").get<double>();
    calibration.delta = doc.at("delta").get<double>();
    calibration.calibration_size = doc.at("m").get<int>();
    calibration.score_id = doc.at("score_id").get<std::string>();
    calibration.hyperparams = doc.at("hyperparams").get<std::map<std::string, double>>();
    calibration.calibration_scores = doc.at("calibration_scores").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed calibration artifact: ") + e.what());
  }
  if (!(calibration.delta > 0.0 && calibration.delta < 1.0))
    throw FormatError("calibration artifact delta out of range");
  if (calibration.calibration_size < 1)
    throw FormatError("calibration artifact has invalid calibration size");
  return calibration;
}

}  // namespace sentinel
