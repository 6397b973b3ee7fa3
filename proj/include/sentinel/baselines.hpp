#pragma once

#include <Eigen/Cholesky>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "sentinel/errors.hpp"
#include "sentinel/stac.hpp"
#include "sentinel/types.hpp"

namespace sentinel {

// Baseline score functions sharing the cumulative-threshold detector frame.
// They differ from the temporal-consistency detector only in how the
// per-step score is computed.

struct TaggedEmbedding {
  std::string episode_id;
  Vector value;
};

/// Reference statistics of nominal observation embeddings. Immutable after
/// fitting; scoring against it is pure.
struct EmbeddingReference {
  Vector mean;
  Matrix inverse_covariance;
  std::set<std::string> source_episode_ids;
};

/// Fits mean and (ridge-regularized, unbiased) covariance of the embeddings
/// whose episodes are not excluded. Passing the episode under evaluation in
/// `exclude` implements leave-trajectory-out calibration. A negative ridge
/// selects the default of 1e-6 * trace(cov) / dim.
inline EmbeddingReference fit_embedding_reference(const std::vector<TaggedEmbedding>& embeddings,
                                                  const std::set<std::string>& exclude,
                                                  double ridge = -1.0) {
  std::vector<const Vector*> kept;
  EmbeddingReference ref;
  for (const TaggedEmbedding& e : embeddings) {
    if (exclude.count(e.episode_id)) continue;
    kept.push_back(&e.value);
    ref.source_episode_ids.insert(e.episode_id);
  }
  if (kept.empty()) throw PreconditionError("no embeddings left after exclusion");
  const Eigen::Index dim = kept.front()->size();
  for (const Vector* v : kept)
    if (v->size() != dim) throw PreconditionError("embedding dimension mismatch");

  ref.mean = Vector::Zero(dim);
  for (const Vector* v : kept) ref.mean += *v;
  ref.mean /= static_cast<double>(kept.size());

  Matrix cov = Matrix::Zero(dim, dim);
  if (kept.size() > 1) {
    for (const Vector* v : kept) cov.noalias() += (*v - ref.mean) * (*v - ref.mean).transpose();
    cov /= static_cast<double>(kept.size() - 1);
  }
  if (ridge < 0.0) ridge = 1e-6 * cov.trace() / static_cast<double>(dim);
  cov += ridge * Matrix::Identity(dim, dim);

  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success)
    throw PreconditionError(
        "embedding covariance is singular; supply more embeddings or a positive ridge");
  ref.inverse_covariance = llt.solve(Matrix::Identity(dim, dim));
  return ref;
}

/// Mahalanobis distance of an embedding from the reference distribution.
inline double mahalanobis_score(const Vector& z, const EmbeddingReference& ref) {
  if (z.size() != ref.mean.size())
    throw PreconditionError("mahalanobis: dimension mismatch");
  const Vector centered = z - ref.mean;
  const double squared = centered.dot(ref.inverse_covariance * centered);
  return std::sqrt(std::max(0.0, squared));
}

/// Mean over all masked chunk coordinates of the per-coordinate population
/// variance across the batch. The mean (rather than the sum) keeps the score
/// comparable across horizon and mask sizes.
inline double output_variance_score(const ChunkBatch& batch, const DimensionMask& mask) {
  batch.validate();
  if (batch.size() < 2)
    throw PreconditionError("output variance requires at least 2 chunks");
  const DimensionMask resolved = resolve_mask(mask, batch.chunks.front().action_dim());
  const int h = batch.chunks.front().horizon();
  const double b = static_cast<double>(batch.size());

  double total = 0.0;
  int coordinates = 0;
  for (int r = 0; r < h; ++r) {
    for (int c : resolved.included) {
      double mean = 0.0;
      for (const ActionChunk& chunk : batch.chunks) mean += chunk.values(r, c);
      mean /= b;
      double var = 0.0;
      for (const ActionChunk& chunk : batch.chunks) {
        const double delta = chunk.values(r, c) - mean;
        var += delta * delta;
      }
      total += var / b;
      ++coordinates;
    }
  }
  return total / static_cast<double>(coordinates);
}

/// Distance from the previously executed chunk's overlap slice to the
/// nearest chunk of the next batch. The overlap length is recovered from the
/// reference vector; the later chunks are sliced to the same window.
inline double temporal_nondist_min_score(const Vector& prev_executed_overlap,
                                         const ChunkBatch& later, const DimensionMask& mask) {
  later.validate();
  const DimensionMask resolved = resolve_mask(mask, later.chunks.front().action_dim());
  const int h = later.chunks.front().horizon();
  if (prev_executed_overlap.size() % resolved.size() != 0)
    throw PreconditionError("temporal nondist: reference shape mismatch");
  const int overlap_rows = static_cast<int>(prev_executed_overlap.size()) / resolved.size();
  if (overlap_rows < 1 || overlap_rows >= h)
    throw PreconditionError("temporal nondist: reference shape mismatch");
  const int k = h - overlap_rows;
  VectorSet candidates;
  candidates.reserve(later.chunks.size());
  for (const ActionChunk& chunk : later.chunks)
    candidates.push_back(overlap_head(chunk, k, resolved));
  return nondist_min(prev_executed_overlap, candidates);
}

struct BaselineParams {
  DimensionMask mask;                          // empty means all dimensions
  std::optional<EmbeddingReference> reference; // required for embedding_mahalanobis
  double ridge = -1.0;
};

/// Builds a baseline score function for the shared detector frame.
/// Calibrating and monitoring the result is identical to the temporal
/// detector: cumulative sum, conformal quantile, strict threshold.
inline Detector build_baseline_detector(const std::string& score_id, const BaselineParams& params,
                                        double delta) {
  if (!(delta > 0.0 && delta < 1.0)) throw PreconditionError("delta must lie in (0, 1)");
  Detector detector;
  detector.score_id = score_id;
  detector.hyperparams["delta"] = delta;

  if (score_id == "embedding_mahalanobis") {
    if (!params.reference)
      throw PreconditionError("embedding_mahalanobis requires a fitted embedding reference");
    detector.first_scored_step = 0;
    const EmbeddingReference ref = *params.reference;
    detector.step_scores = [ref](const Rollout& rollout) {
      std::vector<double> scores;
      scores.reserve(rollout.steps.size());
      for (const RolloutStep& step : rollout.steps) {
        if (!step.embedding)
          throw ConfigError("episode " + rollout.header.episode_id +
                            " lacks embeddings required by the embedding baseline");
        scores.push_back(mahalanobis_score(*step.embedding, ref));
      }
      return scores;
    };
  } else if (score_id == "output_variance") {
    detector.first_scored_step = 0;
    const DimensionMask mask = params.mask;
    detector.step_scores = [mask](const Rollout& rollout) {
      std::vector<double> scores;
      scores.reserve(rollout.steps.size());
      for (const RolloutStep& step : rollout.steps)
        scores.push_back(output_variance_score(step.batch, mask));
      return scores;
    };
  } else if (score_id == "temporal_nondist_min") {
    StacConfig cfg;
    cfg.distance.kind = DistanceKind::nondist_min;
    cfg.mask = params.mask;
    cfg.delta = delta;
    detector = make_stac_detector(cfg);
  } else {
    throw PreconditionError("unknown baseline score_id '" + score_id + "'");
  }
  return detector;
}

}  // namespace sentinel
