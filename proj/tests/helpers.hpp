#pragma once

// Shared test utilities: deterministic random rollout generation and small
// construction shortcuts. Kept independent of the simulator so that property
// tests cover shapes the simulator never produces.

#include <cstdint>
#include <string>
#include <vector>

#include "sentinel/rng.hpp"
#include "sentinel/types.hpp"

namespace test_helpers {

inline sentinel::ActionChunk chunk_from(std::initializer_list<std::initializer_list<double>> rows) {
  sentinel::ActionChunk chunk;
  const auto r = static_cast<Eigen::Index>(rows.size());
  const auto c = static_cast<Eigen::Index>(rows.begin()->size());
  chunk.values.resize(r, c);
  Eigen::Index i = 0;
  for (const auto& row : rows) {
    Eigen::Index j = 0;
    for (double v : row) chunk.values(i, j++) = v;
    ++i;
  }
  return chunk;
}

inline sentinel::Vector vec(std::initializer_list<double> entries) {
  sentinel::Vector v(static_cast<Eigen::Index>(entries.size()));
  Eigen::Index i = 0;
  for (double e : entries) v[i++] = e;
  return v;
}

struct RandomRolloutOptions {
  int min_steps = 1;
  int max_steps = 5;
  int min_batch = 2;
  int max_batch = 6;
  bool embeddings = true;
};

/// A structurally valid rollout with random shapes and values; the generator
/// intentionally spans prediction horizons, execution horizons, action
/// dimensions and batch sizes beyond what the simulator uses.
inline sentinel::Rollout random_rollout(sentinel::SplitMix64& rng,
                                        const RandomRolloutOptions& opt = {}) {
  sentinel::Rollout rollout;
  const int h = 2 + rng.uniform_int(5);          // 2..6
  const int k = 1 + rng.uniform_int(h - 1);      // 1..h-1
  const int d = 1 + rng.uniform_int(3);          // 1..3
  const int steps = opt.min_steps + rng.uniform_int(opt.max_steps - opt.min_steps + 1);
  const int batch = opt.min_batch + rng.uniform_int(opt.max_batch - opt.min_batch + 1);

  rollout.header.episode_id = "rnd-" + std::to_string(rng.next());
  rollout.header.prediction_horizon = h;
  rollout.header.execution_horizon = k;
  rollout.header.action_dim = d;
  rollout.header.max_env_steps = static_cast<std::int64_t>(k) * (steps + rng.uniform_int(3));
  rollout.header.dt = 0.05 + 0.05 * rng.uniform_int(4);

  const bool with_embedding = opt.embeddings && rng.uniform() < 0.5;
  const int embedding_dim = 2 + rng.uniform_int(3);
  for (int s = 0; s < steps; ++s) {
    sentinel::RolloutStep step;
    step.batch.t = static_cast<std::int64_t>(s) * k;
    for (int b = 0; b < batch; ++b) {
      sentinel::ActionChunk chunk;
      chunk.values.resize(h, d);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < d; ++c) chunk.values(r, c) = 2.0 * rng.gaussian();
      step.batch.chunks.push_back(std::move(chunk));
    }
    step.executed.resize(k, d);
    for (int r = 0; r < k; ++r)
      for (int c = 0; c < d; ++c) step.executed(r, c) = rng.gaussian();
    if (with_embedding) {
      sentinel::Vector z(embedding_dim);
      for (int i = 0; i < embedding_dim; ++i) z[i] = rng.gaussian();
      step.embedding = std::move(z);
    }
    rollout.steps.push_back(std::move(step));
  }
  rollout.success = rng.uniform() < 0.5;
  rollout.terminal_return = rollout.success ? 1.0 : -1.0;
  return rollout;
}

}  // namespace test_helpers
