#include <catch2/catch.hpp>

#include <sstream>

#include "helpers.hpp"
#include "sentinel/rollout_io.hpp"
#include "sentinel/types.hpp"

using namespace sentinel;
using test_helpers::chunk_from;

namespace {

Rollout small_rollout(int steps = 3) {
  SplitMix64 rng(7);
  test_helpers::RandomRolloutOptions opt;
  opt.min_steps = steps;
  opt.max_steps = steps;
  return test_helpers::random_rollout(rng, opt);
}

std::string to_jsonl(const Rollout& rollout) {
  std::ostringstream out;
  save_rollout(rollout, out);
  return out.str();
}

}  // namespace

TEST_CASE("overlap slices follow the index arithmetic") {
  // h=4, k=1, d=1: earlier chunk contributes rows 1..3, later chunk rows 0..2.
  ChunkBatch earlier;
  earlier.t = 0;
  earlier.chunks.push_back(chunk_from({{0.0}, {1.0}, {2.0}, {3.0}}));
  ChunkBatch later;
  later.t = 1;
  later.chunks.push_back(chunk_from({{10.0}, {11.0}, {12.0}, {13.0}}));

  const OverlapSlices slices = overlap_slices(earlier, later, 1, DimensionMask::all(1));
  REQUIRE(slices.earlier.size() == 1);
  REQUIRE(slices.later.size() == 1);
  CHECK(slices.earlier[0] == test_helpers::vec({1.0, 2.0, 3.0}));
  CHECK(slices.later[0] == test_helpers::vec({10.0, 11.0, 12.0}));
}

TEST_CASE("overlap length matches the horizon difference") {
  // The h=16, k=8 configuration overlaps for 8 rows.
  SplitMix64 rng(3);
  ChunkBatch earlier, later;
  earlier.t = 0;
  later.t = 8;
  for (int b = 0; b < 2; ++b) {
    ActionChunk chunk;
    chunk.values.resize(16, 2);
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 2; ++c) chunk.values(r, c) = rng.gaussian();
    earlier.chunks.push_back(chunk);
    later.chunks.push_back(std::move(chunk));
  }
  const OverlapSlices slices = overlap_slices(earlier, later, 8, DimensionMask::all(2));
  CHECK(slices.earlier[0].size() == 8 * 2);

  const DimensionMask first_only(std::vector<int>{0});
  const OverlapSlices masked = overlap_slices(earlier, later, 8, first_only);
  CHECK(masked.earlier[0].size() == 8 * 1);
}

TEST_CASE("overlap dimension is (h-k)*|mask| for every k", "[property]") {
  SplitMix64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const Rollout rollout = test_helpers::random_rollout(rng);
    if (rollout.steps.size() < 2) continue;
    const int h = rollout.header.prediction_horizon;
    const int k = rollout.header.execution_horizon;
    const int d = rollout.header.action_dim;
    std::vector<int> columns;
    for (int c = 0; c < d; ++c)
      if (columns.empty() || rng.uniform() < 0.5) columns.push_back(c);
    const DimensionMask mask(columns);
    const OverlapSlices slices =
        overlap_slices(rollout.steps[0].batch, rollout.steps[1].batch, k, mask);
    for (const Vector& v : slices.earlier)
      REQUIRE(v.size() == static_cast<Eigen::Index>(h - k) * mask.size());
    for (const Vector& v : slices.later)
      REQUIRE(v.size() == static_cast<Eigen::Index>(h - k) * mask.size());
  }
}

TEST_CASE("overlap slices reject mismatched batches") {
  ChunkBatch earlier;
  earlier.t = 0;
  earlier.chunks.push_back(chunk_from({{0.0}, {1.0}, {2.0}, {3.0}}));
  ChunkBatch later = earlier;
  later.t = 3;  // expected gap is 1
  CHECK_THROWS_AS(overlap_slices(earlier, later, 1, DimensionMask::all(1)), PreconditionError);
}

TEST_CASE("score series accumulates exactly and stays monotone") {
  const ScoreSeries series = make_score_series({0.5, 0.25});
  CHECK(series.cumulative == std::vector<double>{0.0, 0.5, 0.75});
  series.validate();
  CHECK_THROWS_AS(make_score_series({0.5, -0.1}), PreconditionError);

  SplitMix64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> scores;
    const int n = rng.uniform_int(6);
    for (int i = 0; i < n; ++i) scores.push_back(rng.uniform() * 3.0);
    const ScoreSeries s = make_score_series(scores);
    s.validate();
    double sum = 0.0;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      sum += scores[j];
      REQUIRE(s.cumulative[j + 1] == sum);
    }
  }
}

TEST_CASE("rollout validation pins the step grid and shapes") {
  Rollout rollout = small_rollout();
  rollout.validate();

  SECTION("timestep gap") {
    rollout.steps[1].batch.t += rollout.header.execution_horizon;
    rollout.steps[2].batch.t += rollout.header.execution_horizon;
    rollout.steps.pop_back();
    CHECK_THROWS_WITH(rollout.validate(), Catch::Contains("step timestep gap at t="));
  }
  SECTION("chunk shape mismatch") {
    rollout.steps[0].batch.chunks[0].values.conservativeResize(
        rollout.header.prediction_horizon - 1, rollout.header.action_dim);
    CHECK_THROWS_WITH(rollout.validate(), Catch::Contains("chunk shape mismatch"));
  }
  SECTION("non-finite action") {
    rollout.steps[0].batch.chunks[0].values(0, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(rollout.validate(), PreconditionError);
  }
}

TEST_CASE("load_rollout parses the documented example") {
  std::istringstream in(
      R"({"type":"header","episode_id":"ep","h":16,"k":8,"d":2,"H":48,"dt":0.1})"
      "\n" +
      [] {
        std::string steps;
        for (int t : {0, 8, 16}) {
          std::string chunk = "[";
          for (int r = 0; r < 16; ++r) chunk += std::string(r ? "," : "") + "[0.5,-0.5]";
          chunk += "]";
          std::string executed = "[";
          for (int r = 0; r < 8; ++r) executed += std::string(r ? "," : "") + "[0.5,-0.5]";
          executed += "]";
          steps += R"({"type":"step","t":)" + std::to_string(t) + R"(,"batch":[)" + chunk + "," +
                   chunk + R"(],"executed":)" + executed + "}\n";
        }
        return steps;
      }() +
      R"({"type":"result","return":1.0,"success":true})" "\n");
  const Rollout rollout = load_rollout(in);
  CHECK(rollout.steps.size() == 3);
  CHECK(rollout.length() == 24);
  CHECK(rollout.success);
}

TEST_CASE("load_rollout reports structural errors") {
  const std::string header =
      R"({"type":"header","episode_id":"ep","h":4,"k":2,"d":1,"H":8,"dt":0.1})";
  const std::string chunk = R"([[0.1],[0.2],[0.3],[0.4]])";
  const std::string executed = R"([[0.1],[0.2]])";
  const std::string step0 = R"({"type":"step","t":0,"batch":[)" + chunk + R"(],"executed":)" +
                            executed + "}";
  const std::string result = R"({"type":"result","return":1.0,"success":true})";

  SECTION("timestep gap") {
    std::istringstream in(header + "\n" + step0 + "\n" +
                          R"({"type":"step","t":4,"batch":[)" + chunk + R"(],"executed":)" +
                          executed + "}\n" + result + "\n");
    CHECK_THROWS_WITH(load_rollout(in), Catch::Contains("step timestep gap at t=4"));
  }
  SECTION("chunk shape mismatch") {
    std::istringstream in(header + "\n" +
                          R"({"type":"step","t":0,"batch":[[[0.1],[0.2],[0.3]]],"executed":)" +
                          executed + "}\n" + result + "\n");
    CHECK_THROWS_WITH(load_rollout(in), Catch::Contains("chunk shape mismatch"));
  }
  SECTION("missing result") {
    std::istringstream in(header + "\n" + step0 + "\n");
    CHECK_THROWS_WITH(load_rollout(in), Catch::Contains("missing result record"));
  }
  SECTION("header not first") {
    std::istringstream in(step0 + "\n" + header + "\n" + result + "\n");
    CHECK_THROWS_WITH(load_rollout(in), Catch::Contains("header missing or not first"));
  }
  SECTION("malformed line carries its number") {
    std::istringstream in(header + "\n{not json\n" + result + "\n");
    CHECK_THROWS_WITH(load_rollout(in), Catch::Contains("line 2"));
  }
  SECTION("non-finite value rejected") {
    std::istringstream in(header + "\n" +
                          R"({"type":"step","t":0,"batch":[[[1e999],[0.2],[0.3],[0.4]]],"executed":)" +
                          executed + "}\n" + result + "\n");
    CHECK_THROWS_AS(load_rollout(in), FormatError);
  }
}

TEST_CASE("save rejects non-finite values and omits absent embeddings") {
  Rollout rollout = small_rollout();
  rollout.steps[0].embedding.reset();
  const std::string text = to_jsonl(rollout);
  std::istringstream first_step(text.substr(text.find('\n') + 1));
  std::string line;
  std::getline(first_step, line);
  CHECK(line.find("\"embedding\"") == std::string::npos);

  rollout.steps[0].batch.chunks[0].values(0, 0) = std::numeric_limits<double>::quiet_NaN();
  std::ostringstream sink;
  CHECK_THROWS_AS(save_rollout(rollout, sink), PreconditionError);
}

TEST_CASE("save then load is the identity on random rollouts", "[property]") {
  SplitMix64 rng(2024);
  for (int trial = 0; trial < 120; ++trial) {
    const Rollout original = test_helpers::random_rollout(rng);
    std::stringstream stream;
    save_rollout(original, stream);
    const Rollout reloaded = load_rollout(stream);

    REQUIRE(reloaded.header.episode_id == original.header.episode_id);
    REQUIRE(reloaded.header.prediction_horizon == original.header.prediction_horizon);
    REQUIRE(reloaded.header.execution_horizon == original.header.execution_horizon);
    REQUIRE(reloaded.header.action_dim == original.header.action_dim);
    REQUIRE(reloaded.header.max_env_steps == original.header.max_env_steps);
    REQUIRE(reloaded.header.dt == original.header.dt);
    REQUIRE(reloaded.success == original.success);
    REQUIRE(reloaded.terminal_return == original.terminal_return);
    REQUIRE(reloaded.steps.size() == original.steps.size());
    for (std::size_t s = 0; s < original.steps.size(); ++s) {
      REQUIRE(reloaded.steps[s].batch.t == original.steps[s].batch.t);
      REQUIRE(reloaded.steps[s].batch.chunks.size() == original.steps[s].batch.chunks.size());
      for (std::size_t b = 0; b < original.steps[s].batch.chunks.size(); ++b)
        REQUIRE(reloaded.steps[s].batch.chunks[b].values ==
                original.steps[s].batch.chunks[b].values);
      REQUIRE(reloaded.steps[s].executed == original.steps[s].executed);
      REQUIRE(reloaded.steps[s].embedding.has_value() ==
              original.steps[s].embedding.has_value());
      if (original.steps[s].embedding)
        REQUIRE(*reloaded.steps[s].embedding == *original.steps[s].embedding);
    }

    // Byte-level idempotence: a second save is identical.
    std::ostringstream again;
    save_rollout(reloaded, again);
    REQUIRE(again.str() == stream.str());
  }
}
