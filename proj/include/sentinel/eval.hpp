#pragma once

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sentinel/baselines.hpp"
#include "sentinel/errors.hpp"
#include "sentinel/parallel.hpp"
#include "sentinel/stac.hpp"
#include "sentinel/types.hpp"

namespace sentinel {

// Episode-level detection metrics and the end-to-end calibrate/monitor/score
// protocol shared by every detector.

/// A monitor's verdict on one episode together with the ground-truth label.
/// A positive is an episode where the policy failed.
struct LabeledVerdict {
  std::string episode_id;
  bool ground_truth_failure = false;
  EpisodeVerdict verdict;
  double episode_dt = 0.0;
};

/// Confusion counts and derived rates. Rates whose denominator is zero are
/// reported as absent, never silently as 0 or NaN.
struct MetricsReport {
  int tp = 0, tn = 0, fp = 0, fn = 0;
  std::optional<double> tpr, tnr, fpr, accuracy, balanced_accuracy;
  std::optional<double> mean_detection_time_seconds;  // over true positives only
};

inline MetricsReport evaluate(std::vector<LabeledVerdict> results) {
  if (results.empty()) throw PreconditionError("evaluate requires at least one verdict");
  std::sort(results.begin(), results.end(),
            [](const LabeledVerdict& a, const LabeledVerdict& b) {
              return a.episode_id < b.episode_id;
            });
  for (std::size_t i = 1; i < results.size(); ++i)
    if (results[i].episode_id == results[i - 1].episode_id)
      throw PreconditionError("duplicate episode id '" + results[i].episode_id + "'");

  MetricsReport report;
  double detection_time_total = 0.0;
  for (const LabeledVerdict& r : results) {
    if (r.ground_truth_failure) {
      if (r.verdict.flagged) {
        report.tp += 1;
        detection_time_total += r.verdict.detection_time_seconds.value_or(0.0);
      } else {
        report.fn += 1;
      }
    } else {
      if (r.verdict.flagged)
        report.fp += 1;
      else
        report.tn += 1;
    }
  }

  const int positives = report.tp + report.fn;
  const int negatives = report.tn + report.fp;
  if (positives > 0) report.tpr = static_cast<double>(report.tp) / positives;
  if (negatives > 0) {
    report.tnr = static_cast<double>(report.tn) / negatives;
    report.fpr = static_cast<double>(report.fp) / negatives;
  }
  report.accuracy = static_cast<double>(report.tp + report.tn) /
                    static_cast<double>(results.size());
  if (report.tpr && report.tnr) report.balanced_accuracy = (*report.tpr + *report.tnr) / 2.0;
  if (report.tp > 0) report.mean_detection_time_seconds = detection_time_total / report.tp;
  return report;
}

// ---------------------------------------------------------------------------
// Detector specification and the shared protocol.

struct DetectorSpec {
  std::string score_id = "stac_mmd";
  DistanceConfig distance;
  DimensionMask mask;           // empty means all action dimensions
  double ridge = -1.0;          // embedding baseline; negative selects the default

  bool is_temporal() const {
    return score_id == "stac_mmd" || score_id == "stac_kl_forward" ||
           score_id == "stac_kl_reverse" || score_id == "temporal_nondist_min";
  }
};

/// Maps a detector name to its spec with the default bandwidth rule for that
/// family: the median heuristic for the MMD kernel, the covariance
/// max-eigenvalue rule for the KDE-based divergences.
inline DetectorSpec parse_detector_spec(const std::string& score_id) {
  DetectorSpec spec;
  spec.score_id = score_id;
  if (score_id == "stac_mmd") {
    spec.distance.kind = DistanceKind::mmd_rbf;
    spec.distance.bandwidth_rule = BandwidthRule::median_heuristic;
  } else if (score_id == "stac_kl_forward") {
    spec.distance.kind = DistanceKind::kl_forward_kde;
    spec.distance.bandwidth_rule = BandwidthRule::max_eig_cov;
  } else if (score_id == "stac_kl_reverse") {
    spec.distance.kind = DistanceKind::kl_reverse_kde;
    spec.distance.bandwidth_rule = BandwidthRule::max_eig_cov;
  } else if (score_id == "temporal_nondist_min") {
    spec.distance.kind = DistanceKind::nondist_min;
  } else if (score_id == "output_variance" || score_id == "embedding_mahalanobis") {
    // no distance configuration
  } else {
    throw ConfigError("unknown detector '" + score_id + "'");
  }
  return spec;
}

struct EpisodeRow {
  std::string id;
  bool failure = false;  // ground-truth label
  bool flagged = false;
  std::optional<std::int64_t> detection_step;
  std::optional<double> detection_time_seconds;
  double terminal_eta = 0.0;
};

struct ProtocolResult {
  CalibrationResult calibration;
  MetricsReport metrics;
  std::vector<EpisodeRow> episodes;
};

namespace protocol_detail {

inline StacConfig stac_config_for(const DetectorSpec& spec, double delta) {
  StacConfig cfg;
  cfg.distance = spec.distance;
  cfg.mask = spec.mask;
  cfg.delta = delta;
  return cfg;
}

inline std::vector<TaggedEmbedding> collect_embeddings(const std::vector<Rollout>& rollouts) {
  std::vector<TaggedEmbedding> embeddings;
  for (const Rollout& rollout : rollouts) {
    for (const RolloutStep& step : rollout.steps) {
      if (!step.embedding)
        throw ConfigError("episode " + rollout.header.episode_id +
                          " lacks embeddings required by the embedding baseline");
      embeddings.push_back({rollout.header.episode_id, *step.embedding});
    }
  }
  return embeddings;
}

}  // namespace protocol_detail

/// Runs the full protocol: terminal scores on the calibration episodes, the
/// conformal threshold at `delta`, one verdict per test episode, and the
/// episode-level metrics. Calibration episodes must all be labeled
/// successful; the embedding baseline calibrates leave-trajectory-out.
inline ProtocolResult run_protocol(std::vector<Rollout> calibration_rollouts,
                                   std::vector<Rollout> test_rollouts, const DetectorSpec& spec,
                                   double delta, bool parallel = true) {
  if (calibration_rollouts.empty())
    throw PreconditionError("protocol requires at least one calibration episode");
  for (const Rollout& r : calibration_rollouts)
    if (!r.success)
      throw ProtocolError("calibration episode '" + r.header.episode_id +
                          "' is labeled as a failure; calibration requires successful episodes");

  const auto by_id = [](const Rollout& a, const Rollout& b) {
    return a.header.episode_id < b.header.episode_id;
  };
  std::sort(calibration_rollouts.begin(), calibration_rollouts.end(), by_id);
  std::sort(test_rollouts.begin(), test_rollouts.end(), by_id);
  for (std::size_t i = 1; i < calibration_rollouts.size(); ++i)
    if (calibration_rollouts[i].header.episode_id ==
        calibration_rollouts[i - 1].header.episode_id)
      throw PreconditionError("duplicate calibration episode id '" +
                              calibration_rollouts[i].header.episode_id + "'");

  // Calibration-side terminal scores.
  std::vector<double> terminal_scores;
  Detector test_detector;
  if (spec.score_id == "embedding_mahalanobis") {
    const std::vector<TaggedEmbedding> embeddings =
        protocol_detail::collect_embeddings(calibration_rollouts);
    terminal_scores = parallel_map(
        calibration_rollouts,
        [&](const Rollout& rollout) {
          BaselineParams params;
          params.mask = spec.mask;
          params.ridge = spec.ridge;
          params.reference =
              fit_embedding_reference(embeddings, {rollout.header.episode_id}, spec.ridge);
          return build_baseline_detector(spec.score_id, params, delta).terminal_score(rollout);
        },
        parallel);
    BaselineParams params;
    params.mask = spec.mask;
    params.ridge = spec.ridge;
    params.reference = fit_embedding_reference(embeddings, {}, spec.ridge);
    test_detector = build_baseline_detector(spec.score_id, params, delta);
  } else {
    if (spec.is_temporal()) {
      test_detector = make_stac_detector(protocol_detail::stac_config_for(spec, delta));
    } else {
      BaselineParams params;
      params.mask = spec.mask;
      test_detector = build_baseline_detector(spec.score_id, params, delta);
    }
    terminal_scores = parallel_map(
        calibration_rollouts,
        [&](const Rollout& rollout) { return test_detector.terminal_score(rollout); }, parallel);
  }

  ProtocolResult result;
  result.calibration = calibrate_threshold(std::move(terminal_scores), delta);
  result.calibration.score_id = spec.score_id;
  result.calibration.hyperparams = test_detector.hyperparams;

  // Test-side verdicts.
  result.episodes = parallel_map(
      test_rollouts,
      [&](const Rollout& rollout) {
        const std::vector<double> scores = test_detector.step_scores(rollout);
        EpisodeRow row;
        row.id = rollout.header.episode_id;
        row.failure = !rollout.success;
        const EpisodeVerdict verdict = verdict_from_scores(
            scores, result.calibration.gamma, test_detector.first_scored_step,
            rollout.header.execution_horizon, rollout.header.dt);
        row.flagged = verdict.flagged;
        row.detection_step = verdict.detection_step;
        row.detection_time_seconds = verdict.detection_time_seconds;
        for (double s : scores) row.terminal_eta += s;
        return row;
      },
      parallel);

  std::vector<LabeledVerdict> labeled;
  labeled.reserve(result.episodes.size());
  for (std::size_t i = 0; i < result.episodes.size(); ++i) {
    const EpisodeRow& row = result.episodes[i];
    LabeledVerdict v;
    v.episode_id = row.id;
    v.ground_truth_failure = row.failure;
    v.verdict.flagged = row.flagged;
    v.verdict.detection_step = row.detection_step;
    v.verdict.detection_time_seconds = row.detection_time_seconds;
    v.episode_dt = test_rollouts[i].header.dt;
    labeled.push_back(std::move(v));
  }
  if (!labeled.empty()) result.metrics = evaluate(std::move(labeled));
  return result;
}

// ---------------------------------------------------------------------------
// Report files: a JSON document plus a plain-text table for humans.

namespace report_detail {

inline nlohmann::ordered_json optional_to_json(const std::optional<double>& value) {
  if (value) return *value;
  return nullptr;
}

}  // namespace report_detail

inline nlohmann::ordered_json metrics_to_json(const MetricsReport& m) {
  nlohmann::ordered_json doc;
  doc["tp"] = m.tp;
  doc["tn"] = m.tn;
  doc["fp"] = m.fp;
  doc["fn"] = m.fn;
  doc["tpr"] = report_detail::optional_to_json(m.tpr);
  doc["tnr"] = report_detail::optional_to_json(m.tnr);
  doc["fpr"] = report_detail::optional_to_json(m.fpr);
  doc["accuracy"] = report_detail::optional_to_json(m.accuracy);
  doc["balanced_accuracy"] = report_detail::optional_to_json(m.balanced_accuracy);
  doc["mean_detection_time_seconds"] =
      report_detail::optional_to_json(m.mean_detection_time_seconds);
  return doc;
}

inline nlohmann::ordered_json report_to_json(const ProtocolResult& result) {
  nlohmann::ordered_json doc;
  doc["calibration"] = calibration_to_json(result.calibration);
  doc["metrics"] = metrics_to_json(result.metrics);
  nlohmann::ordered_json episodes = nlohmann::ordered_json::array();
  for (const EpisodeRow& row : result.episodes) {
    nlohmann::ordered_json entry;
    entry["id"] = row.id;
    entry["label"] = row.failure ? "failure" : "success";
    entry["flagged"] = row.flagged;
    entry["detection_step"] =
        row.detection_step ? nlohmann::ordered_json(*row.detection_step) : nullptr;
    entry["detection_time_seconds"] = report_detail::optional_to_json(row.detection_time_seconds);
    entry["terminal_eta"] = row.terminal_eta;
    episodes.push_back(std::move(entry));
  }
  doc["episodes"] = std::move(episodes);
  return doc;
}

inline std::string report_to_text(const ProtocolResult& result) {
  std::ostringstream out;
  const auto rate = [](const std::optional<double>& v) {
    if (!v) return std::string("-");
    std::ostringstream s;
    s << std::fixed << std::setprecision(3) << *v;
    return s.str();
  };
  out << "detector: " << result.calibration.score_id << "  delta: " << result.calibration.delta
      << "  M: " << result.calibration.calibration_size << "  gamma: ";
  if (result.calibration.finite())
    out << result.calibration.gamma;
  else
    out << "inf";
  out << '\n';
  out << "tp=" << result.metrics.tp << " tn=" << result.metrics.tn << " fp=" << result.metrics.fp
      << " fn=" << result.metrics.fn << "  tpr=" << rate(result.metrics.tpr)
      << " tnr=" << rate(result.metrics.tnr) << " fpr=" << rate(result.metrics.fpr)
      << " acc=" << rate(result.metrics.accuracy)
      << " bal_acc=" << rate(result.metrics.balanced_accuracy)
      << " mean_dt_s=" << rate(result.metrics.mean_detection_time_seconds) << '\n';
  out << '\n';
  out << std::left << std::setw(24) << "episode" << std::setw(9) << "label" << std::setw(9)
      << "flagged" << std::setw(12) << "det_step" << std::setw(12) << "det_time_s"
      << "terminal_eta" << '\n';
  for (const EpisodeRow& row : result.episodes) {
    out << std::left << std::setw(24) << row.id << std::setw(9)
        << (row.failure ? "failure" : "success") << std::setw(9) << (row.flagged ? "yes" : "no");
    if (row.detection_step)
      out << std::setw(12) << *row.detection_step;
    else
      out << std::setw(12) << "-";
    if (row.detection_time_seconds) {
      std::ostringstream s;
      s << std::fixed << std::setprecision(2) << *row.detection_time_seconds;
      out << std::setw(12) << s.str();
    } else {
      out << std::setw(12) << "-";
    }
    out << std::setprecision(6) << row.terminal_eta << '\n';
  }
  return out.str();
}

}  // namespace sentinel
