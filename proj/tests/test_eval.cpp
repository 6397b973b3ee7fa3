#include <catch2/catch.hpp>

#include <fstream>

#include "helpers.hpp"
#include "sentinel/eval.hpp"
#include "sentinel/sim.hpp"

using namespace sentinel;

namespace {

LabeledVerdict labeled(std::string id, bool failure, std::optional<std::int64_t> step,
                       double dt = 0.2) {
  LabeledVerdict v;
  v.episode_id = std::move(id);
  v.ground_truth_failure = failure;
  v.verdict = make_verdict(step, dt);
  v.episode_dt = dt;
  return v;
}

SimScenario load_preset(const std::string& filename) {
  std::ifstream in(std::string(SENTINEL_SCENARIO_DIR) + "/" + filename);
  REQUIRE(in.good());
  return load_scenario(in);
}

}  // namespace

TEST_CASE("evaluate counts confusion cells and rates") {
  // 3 failures (2 flagged), 2 successes (1 falsely flagged).
  const std::vector<LabeledVerdict> results = {
      labeled("f1", true, 8),          labeled("f2", true, 16),
      labeled("f3", true, std::nullopt), labeled("s1", false, 8),
      labeled("s2", false, std::nullopt),
  };
  const MetricsReport report = evaluate(results);
  CHECK(report.tp == 2);
  CHECK(report.fn == 1);
  CHECK(report.fp == 1);
  CHECK(report.tn == 1);
  CHECK(*report.tpr == Approx(2.0 / 3.0));
  CHECK(*report.tnr == Approx(0.5));
  CHECK(*report.fpr == Approx(0.5));
  CHECK(*report.balanced_accuracy == Approx(7.0 / 12.0));
  CHECK(*report.accuracy == Approx(0.6));
  // True positives flagged at steps 8 and 16 with dt=0.2 s.
  CHECK(*report.mean_detection_time_seconds == Approx(2.4));
}

TEST_CASE("degenerate classes report absent rates, never zeros") {
  const MetricsReport report = evaluate({
      labeled("s1", false, std::nullopt),
      labeled("s2", false, std::nullopt),
  });
  CHECK(!report.tpr.has_value());
  CHECK(!report.balanced_accuracy.has_value());
  CHECK(!report.mean_detection_time_seconds.has_value());
  CHECK(*report.tnr == 1.0);
  CHECK(*report.accuracy == 1.0);

  const nlohmann::ordered_json doc = metrics_to_json(report);
  CHECK(doc.at("tpr").is_null());
  CHECK(doc.at("balanced_accuracy").is_null());
  CHECK(doc.at("tnr").get<double>() == 1.0);
}

TEST_CASE("evaluate rejects duplicates and empty input") {
  CHECK_THROWS_AS(evaluate({}), PreconditionError);
  CHECK_THROWS_WITH(evaluate({labeled("a", true, 4), labeled("a", false, std::nullopt)}),
                    Catch::Contains("duplicate episode id"));
}

TEST_CASE("confusion counts partition the episodes", "[property]") {
  SplitMix64 rng(90);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<LabeledVerdict> results;
    const int n = 1 + rng.uniform_int(30);
    int failures = 0;
    for (int i = 0; i < n; ++i) {
      const bool failure = rng.uniform() < 0.5;
      failures += failure;
      const bool flagged = rng.uniform() < 0.5;
      results.push_back(labeled("ep" + std::to_string(i), failure,
                                flagged ? std::optional<std::int64_t>(4 * (i + 1))
                                        : std::nullopt));
    }
    const MetricsReport report = evaluate(results);
    REQUIRE(report.tp + report.fn == failures);
    REQUIRE(report.tn + report.fp == n - failures);
    REQUIRE(*report.accuracy == Approx((report.tp + report.tn) / static_cast<double>(n)));
  }
}

TEST_CASE("the protocol rejects failure-labeled calibration episodes") {
  const SimScenario nominal = load_preset("nominal.json");
  const SimScenario erratic = load_preset("erratic_ood.json");
  std::vector<Rollout> calibration;
  for (int i = 0; i < 4; ++i) calibration.push_back(draw_successful(nominal, 55, i));
  Rollout failure;
  for (int i = 0; i < 200; ++i) {
    failure = generate_rollout(erratic, 9000 + i, "bad");
    if (!failure.success) break;
  }
  REQUIRE(!failure.success);
  calibration.push_back(failure);
  CHECK_THROWS_AS(
      run_protocol(calibration, {}, parse_detector_spec("stac_mmd"), 0.05),
      ProtocolError);
}

TEST_CASE("run_protocol composes the public operations with no hidden behavior") {
  const SimScenario nominal = load_preset("nominal.json");
  const SimScenario erratic = load_preset("erratic_ood.json");
  std::vector<Rollout> calibration, test;
  for (int i = 0; i < 12; ++i) calibration.push_back(draw_successful(nominal, 77, i));
  for (int i = 0; i < 6; ++i)
    test.push_back(generate_rollout(nominal, 8100 + i, "n" + std::to_string(i)));
  for (int i = 0; i < 6; ++i)
    test.push_back(generate_rollout(erratic, 8200 + i, "e" + std::to_string(i)));

  const DetectorSpec spec = parse_detector_spec("stac_mmd");
  const ProtocolResult result = run_protocol(calibration, test, spec, 0.1);

  // Manual composition: terminal scores, conformal quantile, replayed monitor.
  StacConfig cfg;
  cfg.distance = spec.distance;
  cfg.delta = 0.1;
  std::vector<double> terminal_scores;
  for (const Rollout& r : calibration)
    terminal_scores.push_back(score_rollout(r, cfg).terminal());
  const CalibrationResult manual = calibrate_threshold(terminal_scores, 0.1);
  CHECK(result.calibration.gamma == manual.gamma);
  std::vector<double> sorted_manual = manual.calibration_scores;
  std::vector<double> sorted_result = result.calibration.calibration_scores;
  std::sort(sorted_manual.begin(), sorted_manual.end());
  std::sort(sorted_result.begin(), sorted_result.end());
  CHECK(sorted_manual == sorted_result);

  for (const EpisodeRow& row : result.episodes) {
    const auto matches = std::find_if(test.begin(), test.end(), [&](const Rollout& r) {
      return r.header.episode_id == row.id;
    });
    REQUIRE(matches != test.end());
    const EpisodeVerdict replayed = replay_monitor(*matches, manual, cfg);
    REQUIRE(row.flagged == replayed.flagged);
    REQUIRE(row.detection_step == replayed.detection_step);
    REQUIRE(row.terminal_eta == Approx(score_rollout(*matches, cfg).terminal()));
    REQUIRE(row.failure == !matches->success);
  }
}

TEST_CASE("the protocol is deterministic and independent of parallelism") {
  const SimScenario nominal = load_preset("nominal.json");
  std::vector<Rollout> calibration, test;
  for (int i = 0; i < 8; ++i) calibration.push_back(draw_successful(nominal, 88, i));
  for (int i = 0; i < 8; ++i)
    test.push_back(generate_rollout(nominal, 8800 + i, "t" + std::to_string(i)));

  const DetectorSpec spec = parse_detector_spec("stac_mmd");
  const ProtocolResult parallel1 = run_protocol(calibration, test, spec, 0.2, true);
  const ProtocolResult parallel2 = run_protocol(calibration, test, spec, 0.2, true);
  const ProtocolResult sequential = run_protocol(calibration, test, spec, 0.2, false);
  CHECK(report_to_json(parallel1).dump() == report_to_json(parallel2).dump());
  CHECK(report_to_json(parallel1).dump() == report_to_json(sequential).dump());
}

TEST_CASE("the embedding baseline calibrates leave-trajectory-out") {
  const SimScenario nominal = load_preset("nominal.json");
  std::vector<Rollout> calibration, test;
  for (int i = 0; i < 6; ++i) calibration.push_back(draw_successful(nominal, 99, i));
  for (int i = 0; i < 3; ++i)
    test.push_back(generate_rollout(nominal, 9900 + i, "t" + std::to_string(i)));

  DetectorSpec spec = parse_detector_spec("embedding_mahalanobis");
  const ProtocolResult result = run_protocol(calibration, test, spec, 0.2);
  REQUIRE(result.calibration.calibration_size == 6);

  // Reproduce one calibration score by hand with the episode excluded.
  std::vector<TaggedEmbedding> embeddings;
  for (const Rollout& r : calibration)
    for (const RolloutStep& step : r.steps)
      embeddings.push_back({r.header.episode_id, *step.embedding});
  const Rollout& probe = calibration.front();
  const EmbeddingReference ref =
      fit_embedding_reference(embeddings, {probe.header.episode_id}, -1.0);
  double expected = 0.0;
  for (const RolloutStep& step : probe.steps)
    expected += mahalanobis_score(*step.embedding, ref);
  const double found = *std::min_element(result.calibration.calibration_scores.begin(),
                                         result.calibration.calibration_scores.end());
  // The probe's score must appear among the calibration scores.
  bool present = false;
  for (double s : result.calibration.calibration_scores)
    if (s == Approx(expected).epsilon(1e-12)) present = true;
  CHECK(present);
  (void)found;
}

TEST_CASE("reports serialize undefined values as null and rows in id order") {
  const SimScenario nominal = load_preset("nominal.json");
  std::vector<Rollout> calibration, test;
  for (int i = 0; i < 5; ++i) calibration.push_back(draw_successful(nominal, 66, i));
  for (int i = 0; i < 4; ++i)
    test.push_back(generate_rollout(nominal, 6600 + i, "t" + std::to_string(3 - i)));

  const ProtocolResult result =
      run_protocol(calibration, test, parse_detector_spec("stac_mmd"), 0.2);
  const nlohmann::ordered_json doc = report_to_json(result);
  REQUIRE(doc.contains("calibration"));
  REQUIRE(doc.contains("metrics"));
  REQUIRE(doc.at("episodes").size() == 4);
  std::string previous;
  for (const auto& entry : doc.at("episodes")) {
    const std::string id = entry.at("id").get<std::string>();
    REQUIRE(previous < id);
    previous = id;
    REQUIRE(entry.contains("label"));
    REQUIRE(entry.contains("terminal_eta"));
    if (!entry.at("flagged").get<bool>()) {
      REQUIRE(entry.at("detection_step").is_null());
      REQUIRE(entry.at("detection_time_seconds").is_null());
    }
  }
  const std::string text = report_to_text(result);
  CHECK(text.find("stac_mmd") != std::string::npos);
  CHECK(text.find("episode") != std::string::npos);
}

TEST_CASE("unknown detector names are rejected") {
  CHECK_THROWS_AS(parse_detector_spec("unheard_of"), ConfigError);
}

TEST_CASE("the output-variance detector catches the noisy erratic regime") {
  // The erratic preset widens the chunk noise well beyond nominal, so the
  // variance baseline must flag failures far above its chance level (delta).
  const SimScenario nominal = load_preset("nominal.json");
  const SimScenario erratic = load_preset("erratic_ood.json");
  std::vector<Rollout> calibration, test;
  for (int i = 0; i < 25; ++i) calibration.push_back(draw_successful(nominal, 44, i));
  for (int i = 0; i < 30; ++i)
    test.push_back(generate_rollout(erratic, 4400 + i, "e" + std::to_string(i)));
  const ProtocolResult result =
      run_protocol(calibration, test, parse_detector_spec("output_variance"), 0.05);
  REQUIRE(result.metrics.tpr.has_value());
  CHECK(*result.metrics.tpr >= 0.25);
}
