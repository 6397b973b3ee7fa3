// Command-line front door: simulate episodes, calibrate detectors, monitor
// single episodes (optionally merging slow-monitor events), evaluate suites,
// and empirically check the calibrated false-positive bound.
//
// Exit codes: 0 ok, 2 protocol violation, 3 configuration mismatch,
// 4 empty input, 5 precondition failure. All randomness flows from --seed;
// standard output carries only the primary JSON artifact.

#include <glob.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sentinel/combiner.hpp"
#include "sentinel/eval.hpp"
#include "sentinel/rollout_io.hpp"
#include "sentinel/sim.hpp"
#include "sentinel/stac.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitProtocol = 2;
constexpr int kExitConfig = 3;
constexpr int kExitEmptyInput = 4;
constexpr int kExitPrecondition = 5;

std::vector<std::string> expand_globs(const std::vector<std::string>& patterns) {
  std::vector<std::string> paths;
  std::set<std::string> seen;
  for (const std::string& pattern : patterns) {
    if (pattern.find_first_of("*?[") != std::string::npos) {
      glob_t results{};
      const int rc = glob(pattern.c_str(), 0, nullptr, &results);
      if (rc == 0) {
        for (std::size_t i = 0; i < results.gl_pathc; ++i) {
          std::string path = results.gl_pathv[i];
          if (seen.insert(path).second) paths.push_back(std::move(path));
        }
      }
      globfree(&results);
    } else if (seen.insert(pattern).second) {
      paths.push_back(pattern);
    }
  }
  std::sort(paths.begin(), paths.end());
  return paths;
}

sentinel::Rollout load_rollout_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw sentinel::Error("cannot open rollout file '" + path + "'");
  try {
    return sentinel::load_rollout(in);
  } catch (const sentinel::FormatError& e) {
    throw sentinel::FormatError(path + ": " + e.what());
  }
}

sentinel::SimScenario load_scenario_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw sentinel::Error("cannot open scenario file '" + path + "'");
  return sentinel::load_scenario(in);
}

sentinel::CalibrationResult load_calibration_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw sentinel::Error("cannot open calibration artifact '" + path + "'");
  return sentinel::load_calibration(in);
}

/// Reconstructs the detector a calibration artifact was produced with. The
/// embedding baseline cannot be rebuilt from the artifact alone (the fitted
/// reference is data, not a hyperparameter), so it is rejected here.
sentinel::DetectorSpec spec_from_calibration(const sentinel::CalibrationResult& calibration) {
  if (calibration.score_id == "embedding_mahalanobis")
    throw sentinel::ConfigError(
        "the embedding baseline cannot be reconstructed from a calibration artifact; "
        "use 'evaluate' with the calibration episodes instead");
  sentinel::DetectorSpec spec = sentinel::parse_detector_spec(calibration.score_id);
  const auto& params = calibration.hyperparams;
  if (auto it = params.find("bandwidth_rule"); it != params.end())
    spec.distance.bandwidth_rule = static_cast<sentinel::BandwidthRule>(
        static_cast<int>(it->second));
  if (auto it = params.find("fixed_bandwidth"); it != params.end())
    spec.distance.fixed_bandwidth = it->second;
  if (auto it = params.find("log_density_floor"); it != params.end())
    spec.distance.log_density_floor = it->second;
  if (auto it = params.find("mask_bits"); it != params.end()) {
    std::vector<int> columns;
    const auto bits = static_cast<std::uint64_t>(it->second);
    for (int c = 0; c < 64; ++c)
      if (bits & (1ULL << c)) columns.push_back(c);
    spec.mask = sentinel::DimensionMask(std::move(columns));
  }
  return spec;
}

int cmd_simulate(const std::string& scenario_path, int count, std::uint64_t seed,
                 const std::string& out_dir) {
  const sentinel::SimScenario scenario = load_scenario_file(scenario_path);
  fs::create_directories(out_dir);

  ordered_json manifest;
  manifest["scenario"] = sentinel::scenario_to_json(scenario);
  manifest["base_seed"] = seed;
  manifest["count"] = count;
  ordered_json episodes = ordered_json::array();

  for (int i = 0; i < count; ++i) {
    char id[64];
    std::snprintf(id, sizeof(id), "%s-%05d", scenario.name.c_str(), i);
    const std::uint64_t episode_seed = seed + static_cast<std::uint64_t>(i);
    const sentinel::Rollout rollout = sentinel::generate_rollout(scenario, episode_seed, id);
    const std::string filename = std::string(id) + ".jsonl";
    std::ofstream out(fs::path(out_dir) / filename, std::ios::binary);
    if (!out) throw sentinel::Error("cannot write rollout file '" + filename + "'");
    sentinel::save_rollout(rollout, out);

    ordered_json entry;
    entry["id"] = id;
    entry["seed"] = episode_seed;
    entry["file"] = filename;
    entry["success"] = rollout.success;
    entry["return"] = rollout.terminal_return;
    entry["length"] = rollout.length();
    episodes.push_back(std::move(entry));
  }
  manifest["episodes"] = std::move(episodes);

  std::ofstream out(fs::path(out_dir) / "manifest.json", std::ios::binary);
  if (!out) throw sentinel::Error("cannot write manifest");
  out << manifest.dump(2) << '\n';
  std::cout << manifest.dump(2) << '\n';
  return kExitOk;
}

int cmd_calibrate(const std::vector<std::string>& patterns, const std::string& detector,
                  double delta, const std::string& out_path, bool deterministic) {
  const std::vector<std::string> paths = expand_globs(patterns);
  if (paths.empty()) {
    std::cerr << "calibrate: no rollout files matched\n";
    return kExitEmptyInput;
  }
  std::vector<sentinel::Rollout> rollouts;
  rollouts.reserve(paths.size());
  for (const std::string& path : paths) rollouts.push_back(load_rollout_file(path));

  const sentinel::DetectorSpec spec = sentinel::parse_detector_spec(detector);
  const sentinel::ProtocolResult result =
      sentinel::run_protocol(std::move(rollouts), {}, spec, delta, !deterministic);
  if (!result.calibration.finite())
    std::cerr << "warning: calibration set too small for delta=" << delta
              << "; threshold is +infinity and the detector will never flag\n";

  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw sentinel::Error("cannot write calibration artifact '" + out_path + "'");
  sentinel::save_calibration(result.calibration, out);
  std::cout << sentinel::calibration_to_json(result.calibration).dump(2) << '\n';
  return kExitOk;
}

int cmd_monitor(const std::string& rollout_path, const std::string& calibration_path,
                const std::string& slow_events_path, const std::string& requested_detector) {
  const sentinel::Rollout rollout = load_rollout_file(rollout_path);
  const sentinel::CalibrationResult calibration = load_calibration_file(calibration_path);
  if (!requested_detector.empty() && requested_detector != calibration.score_id)
    throw sentinel::ConfigError("calibration artifact was produced for detector '" +
                                calibration.score_id + "', not '" + requested_detector + "'");
  const sentinel::DetectorSpec spec = spec_from_calibration(calibration);

  sentinel::EpisodeVerdict fast;
  double terminal_eta = 0.0;
  if (spec.is_temporal()) {
    sentinel::StacConfig cfg;
    cfg.distance = spec.distance;
    cfg.mask = spec.mask;
    cfg.delta = calibration.delta;
    fast = sentinel::replay_monitor(rollout, calibration, cfg);
    terminal_eta = sentinel::score_rollout(rollout, cfg).terminal();
  } else {
    sentinel::BaselineParams params;
    params.mask = spec.mask;
    const sentinel::Detector det =
        sentinel::build_baseline_detector(spec.score_id, params, calibration.delta);
    const std::vector<double> scores = det.step_scores(rollout);
    fast = sentinel::verdict_from_scores(scores, calibration.gamma, det.first_scored_step,
                                         rollout.header.execution_horizon, rollout.header.dt);
    for (double s : scores) terminal_eta += s;
  }

  std::vector<sentinel::SlowVerdictEvent> events;
  if (!slow_events_path.empty()) {
    std::ifstream in(slow_events_path);
    if (!in) throw sentinel::Error("cannot open slow events file '" + slow_events_path + "'");
    for (sentinel::SlowVerdictEvent& event : sentinel::load_slow_events(in))
      if (event.episode_id == rollout.header.episode_id) events.push_back(std::move(event));
  }
  const sentinel::CombinedVerdict verdict = sentinel::combine(
      fast, events, rollout.header.execution_horizon, rollout.header.dt);

  ordered_json doc;
  doc["episode_id"] = rollout.header.episode_id;
  doc["flagged"] = verdict.flagged;
  doc["detection_step"] =
      verdict.detection_step ? ordered_json(*verdict.detection_step) : ordered_json(nullptr);
  doc["detection_time_seconds"] = verdict.detection_time_seconds
                                      ? ordered_json(*verdict.detection_time_seconds)
                                      : ordered_json(nullptr);
  switch (verdict.source) {
    case sentinel::VerdictSource::none: doc["source"] = "none"; break;
    case sentinel::VerdictSource::fast: doc["source"] = "fast"; break;
    case sentinel::VerdictSource::slow: doc["source"] = "slow"; break;
    case sentinel::VerdictSource::both: doc["source"] = "both"; break;
  }
  doc["terminal_eta"] = terminal_eta;
  std::cout << doc.dump(2) << '\n';
  return kExitOk;
}

int cmd_evaluate(const std::vector<std::string>& patterns, const std::string& calibration_path,
                 const std::string& out_path, bool deterministic) {
  const std::vector<std::string> paths = expand_globs(patterns);
  if (paths.empty()) {
    std::cerr << "evaluate: no rollout files matched\n";
    return kExitEmptyInput;
  }
  const sentinel::CalibrationResult calibration = load_calibration_file(calibration_path);
  const sentinel::DetectorSpec spec = spec_from_calibration(calibration);

  std::vector<sentinel::Rollout> rollouts;
  rollouts.reserve(paths.size());
  for (const std::string& path : paths) rollouts.push_back(load_rollout_file(path));

  // Verdicts come from the already-calibrated threshold; the detector spec is
  // rebuilt from the artifact so the run is reproducible from files alone.
  sentinel::Detector detector;
  if (spec.is_temporal()) {
    sentinel::StacConfig cfg;
    cfg.distance = spec.distance;
    cfg.mask = spec.mask;
    cfg.delta = calibration.delta;
    detector = sentinel::make_stac_detector(cfg);
  } else {
    sentinel::BaselineParams params;
    params.mask = spec.mask;
    detector = sentinel::build_baseline_detector(spec.score_id, params, calibration.delta);
  }

  std::sort(rollouts.begin(), rollouts.end(),
            [](const sentinel::Rollout& a, const sentinel::Rollout& b) {
              return a.header.episode_id < b.header.episode_id;
            });
  sentinel::ProtocolResult result;
  result.calibration = calibration;
  result.episodes = sentinel::parallel_map(
      rollouts,
      [&](const sentinel::Rollout& rollout) {
        const std::vector<double> scores = detector.step_scores(rollout);
        sentinel::EpisodeRow row;
        row.id = rollout.header.episode_id;
        row.failure = !rollout.success;
        const sentinel::EpisodeVerdict verdict = sentinel::verdict_from_scores(
            scores, calibration.gamma, detector.first_scored_step,
            rollout.header.execution_horizon, rollout.header.dt);
        row.flagged = verdict.flagged;
        row.detection_step = verdict.detection_step;
        row.detection_time_seconds = verdict.detection_time_seconds;
        for (double s : scores) row.terminal_eta += s;
        return row;
      },
      !deterministic);

  std::vector<sentinel::LabeledVerdict> labeled;
  labeled.reserve(result.episodes.size());
  for (std::size_t i = 0; i < result.episodes.size(); ++i) {
    sentinel::LabeledVerdict v;
    v.episode_id = result.episodes[i].id;
    v.ground_truth_failure = result.episodes[i].failure;
    v.verdict.flagged = result.episodes[i].flagged;
    v.verdict.detection_step = result.episodes[i].detection_step;
    v.verdict.detection_time_seconds = result.episodes[i].detection_time_seconds;
    v.episode_dt = rollouts[i].header.dt;
    labeled.push_back(std::move(v));
  }
  result.metrics = sentinel::evaluate(std::move(labeled));

  const ordered_json doc = sentinel::report_to_json(result);
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw sentinel::Error("cannot write report '" + out_path + "'");
  out << doc.dump(2) << '\n';

  fs::path text_path(out_path);
  text_path.replace_extension(".txt");
  std::ofstream text_out(text_path, std::ios::binary);
  if (!text_out) throw sentinel::Error("cannot write report '" + text_path.string() + "'");
  text_out << sentinel::report_to_text(result);

  std::cout << doc.dump(2) << '\n';
  return kExitOk;
}

int cmd_fpr_check(const std::string& scenario_path, const std::string& detector, double delta,
                  int calibration_size, int trials, std::uint64_t seed, bool deterministic) {
  if (trials < 100) {
    std::cerr << "fpr-check: at least 100 trials are required\n";
    return kExitPrecondition;
  }
  const sentinel::SimScenario scenario = load_scenario_file(scenario_path);
  const sentinel::DetectorSpec spec = sentinel::parse_detector_spec(detector);
  if (!spec.is_temporal())
    throw sentinel::ConfigError("fpr-check supports the temporal detectors only");

  sentinel::StacConfig cfg;
  cfg.distance = spec.distance;
  cfg.mask = spec.mask;
  cfg.delta = delta;

  const sentinel::FprEstimate estimate = sentinel::fpr_monte_carlo(
      [&](std::uint64_t index) { return sentinel::draw_successful(scenario, seed, index); }, cfg,
      calibration_size, trials, !deterministic);

  const double sigma = std::sqrt(delta * (1.0 - delta) / trials);
  const double bound = delta + 3.0 * sigma;

  ordered_json doc;
  doc["delta"] = delta;
  doc["m"] = calibration_size;
  doc["trials"] = estimate.trials;
  doc["flags"] = estimate.flags;
  doc["fpr"] = estimate.fpr;
  doc["ci_low"] = estimate.ci_low;
  doc["ci_high"] = estimate.ci_high;
  doc["bound"] = bound;
  std::cout << doc.dump(2) << '\n';

  if (estimate.fpr > bound) {
    std::cerr << "fpr-check: estimate " << estimate.fpr << " exceeds " << bound << " (delta + 3 sigma)\n";
    return kExitError;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Runtime failure detection for action-chunking generative policies"};
  app.require_subcommand(1);
  app.fallthrough();  // lets --deterministic-sum appear after the subcommand
  bool deterministic = false;
  app.add_flag("--deterministic-sum", deterministic,
               "run single-threaded in one canonical summation order");

  std::string scenario_path, rollout_path, out_path, calibration_path, slow_events_path, detector;
  std::vector<std::string> inputs;
  int count = 0, calibration_size = 50, trials = 1000;
  std::uint64_t seed = 0;
  double delta = 0.05;

  auto* simulate = app.add_subcommand("simulate", "generate labeled episodes");
  simulate->add_option("--scenario", scenario_path, "scenario JSON file")->required();
  simulate->add_option("--count", count, "number of episodes")->required();
  simulate->add_option("--seed", seed, "base seed")->required();
  simulate->add_option("--out", out_path, "output directory")->required();

  auto* calibrate = app.add_subcommand("calibrate", "fit a detection threshold");
  calibrate->add_option("rollouts", inputs, "rollout files or globs")->required();
  calibrate->add_option("--detector", detector, "detector id")->required();
  calibrate->add_option("--delta", delta, "miscoverage level in (0,1)");
  calibrate->add_option("--out", out_path, "calibration artifact path")->required();

  auto* monitor = app.add_subcommand("monitor", "replay one episode through the monitor");
  monitor->add_option("rollout", rollout_path, "rollout file")->required();
  monitor->add_option("--calibration", calibration_path, "calibration artifact")->required();
  monitor->add_option("--slow-events", slow_events_path, "slow monitor events (JSONL)");
  monitor->add_option("--detector", detector, "detector id (must match the artifact)");

  auto* evaluate = app.add_subcommand("evaluate", "score a labeled test suite");
  evaluate->add_option("rollouts", inputs, "rollout files or globs")->required();
  evaluate->add_option("--calibration", calibration_path, "calibration artifact")->required();
  evaluate->add_option("--out", out_path, "report path (JSON; a .txt table is written beside it)")
      ->required();

  auto* fpr = app.add_subcommand("fpr-check", "Monte Carlo check of the false-positive bound");
  fpr->add_option("--scenario", scenario_path, "nominal scenario JSON file")->required();
  fpr->add_option("--detector", detector, "detector id")->required();
  fpr->add_option("--delta", delta, "miscoverage level in (0,1)");
  fpr->add_option("--m", calibration_size, "calibration episodes per trial");
  fpr->add_option("--trials", trials, "number of Monte Carlo trials");
  fpr->add_option("--seed", seed, "base seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (simulate->parsed()) return cmd_simulate(scenario_path, count, seed, out_path);
    if (calibrate->parsed()) return cmd_calibrate(inputs, detector, delta, out_path, deterministic);
    if (monitor->parsed())
      return cmd_monitor(rollout_path, calibration_path, slow_events_path, detector);
    if (evaluate->parsed())
      return cmd_evaluate(inputs, calibration_path, out_path, deterministic);
    if (fpr->parsed())
      return cmd_fpr_check(scenario_path, detector, delta, calibration_size, trials, seed,
                           deterministic);
  } catch (const sentinel::ProtocolError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitProtocol;
  } catch (const sentinel::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const sentinel::PreconditionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitPrecondition;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}
