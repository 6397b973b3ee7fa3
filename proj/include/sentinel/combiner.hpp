#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "sentinel/errors.hpp"
#include "sentinel/types.hpp"

namespace sentinel {

// Combines a fast policy-level detector with a slow task-progress monitor by
// taking the union of their predictions, each running at its own timescale.
// The slow side is a protocol boundary: verdict events arrive as
// line-delimited JSON so an external monitor can be attached later; a
// scripted stub stands in for one here.

enum class SlowVerdict { ok, failure };

struct SlowVerdictEvent {
  std::string episode_id;
  std::int64_t t = 0;            // inference timestep the query covers
  SlowVerdict verdict = SlowVerdict::ok;
  double latency_seconds = 0.0;  // time until the answer arrives

  void validate(int execution_horizon) const {
    if (t < 0 || t % execution_horizon != 0)
      throw PreconditionError("slow event timestep must be a non-negative multiple of the "
                              "execution horizon");
    if (!(latency_seconds >= 0.0) || !std::isfinite(latency_seconds))
      throw PreconditionError("slow event latency must be non-negative");
  }
};

enum class VerdictSource { none, fast, slow, both };

struct CombinedVerdict {
  bool flagged = false;
  std::optional<std::int64_t> detection_step;
  std::optional<double> detection_time_seconds;
  VerdictSource source = VerdictSource::none;
};

/// Environment timestep at which a slow answer takes effect: the query
/// timestep plus the latency rounded up to whole inference steps. Counting
/// arrival rather than query time keeps detection-time metrics honest.
inline std::int64_t slow_arrival_step(const SlowVerdictEvent& event, int execution_horizon,
                                      double dt) {
  const double blocks = event.latency_seconds / (dt * static_cast<double>(execution_horizon));
  const auto delay = static_cast<std::int64_t>(std::ceil(blocks - 1e-9));
  return event.t + std::max<std::int64_t>(delay, 0) * execution_horizon;
}

/// Union of the fast verdict and a sorted sequence of slow verdict events
/// from the same episode. Flags if either side flags; the detection step is
/// the earliest effective flag step and `source` records which side(s)
/// achieved it.
inline CombinedVerdict combine(const EpisodeVerdict& fast,
                               const std::vector<SlowVerdictEvent>& slow_events,
                               int execution_horizon, double dt) {
  std::optional<std::int64_t> slow_step;
  const std::string* episode = nullptr;
  std::int64_t prev_t = -1;
  for (const SlowVerdictEvent& event : slow_events) {
    event.validate(execution_horizon);
    if (episode && event.episode_id != *episode)
      throw PreconditionError("slow events mix episodes: '" + *episode + "' and '" +
                              event.episode_id + "'");
    episode = &event.episode_id;
    if (event.t < prev_t) throw PreconditionError("slow events are not sorted by timestep");
    prev_t = event.t;
    if (event.verdict == SlowVerdict::failure) {
      const std::int64_t arrival = slow_arrival_step(event, execution_horizon, dt);
      if (!slow_step || arrival < *slow_step) slow_step = arrival;
    }
  }

  CombinedVerdict combined;
  const std::optional<std::int64_t> fast_step = fast.flagged ? fast.detection_step : std::nullopt;
  if (!fast_step && !slow_step) return combined;

  combined.flagged = true;
  if (fast_step && slow_step) {
    combined.detection_step = std::min(*fast_step, *slow_step);
    combined.source = *fast_step < *slow_step   ? VerdictSource::fast
                      : *slow_step < *fast_step ? VerdictSource::slow
                                                : VerdictSource::both;
  } else if (fast_step) {
    combined.detection_step = fast_step;
    combined.source = VerdictSource::fast;
  } else {
    combined.detection_step = slow_step;
    combined.source = VerdictSource::slow;
  }
  combined.detection_time_seconds = static_cast<double>(*combined.detection_step) * dt;
  return combined;
}

/// Incremental variant for live deployments where slow events arrive over
/// time. After any prefix of events, current() equals the batch combine over
/// that prefix.
class IncrementalCombiner {
 public:
  IncrementalCombiner(const EpisodeVerdict& fast, int execution_horizon, double dt)
      : fast_(fast), execution_horizon_(execution_horizon), dt_(dt) {}

  void add_event(const SlowVerdictEvent& event) {
    event.validate(execution_horizon_);
    if (!episode_id_.empty() && event.episode_id != episode_id_)
      throw PreconditionError("slow events mix episodes: '" + episode_id_ + "' and '" +
                              event.episode_id + "'");
    episode_id_ = event.episode_id;
    if (event.t < prev_t_) throw PreconditionError("slow events are not sorted by timestep");
    prev_t_ = event.t;
    if (event.verdict == SlowVerdict::failure) {
      const std::int64_t arrival = slow_arrival_step(event, execution_horizon_, dt_);
      if (!slow_step_ || arrival < *slow_step_) slow_step_ = arrival;
    }
  }

  CombinedVerdict current() const {
    CombinedVerdict combined;
    const std::optional<std::int64_t> fast_step =
        fast_.flagged ? fast_.detection_step : std::nullopt;
    if (!fast_step && !slow_step_) return combined;
    combined.flagged = true;
    if (fast_step && slow_step_) {
      combined.detection_step = std::min(*fast_step, *slow_step_);
      combined.source = *fast_step < *slow_step_   ? VerdictSource::fast
                        : *slow_step_ < *fast_step ? VerdictSource::slow
                                                   : VerdictSource::both;
    } else if (fast_step) {
      combined.detection_step = fast_step;
      combined.source = VerdictSource::fast;
    } else {
      combined.detection_step = slow_step_;
      combined.source = VerdictSource::slow;
    }
    combined.detection_time_seconds = static_cast<double>(*combined.detection_step) * dt_;
    return combined;
  }

 private:
  EpisodeVerdict fast_;
  int execution_horizon_;
  double dt_;
  std::string episode_id_;
  std::int64_t prev_t_ = -1;
  std::optional<std::int64_t> slow_step_;
};

// ---------------------------------------------------------------------------
// Scripted stand-in for an external task-progress monitor.

struct AlwaysOk {};

/// Flags when the mean executed action magnitude over the trailing window of
/// inference steps drops below the threshold.
struct FlagIfStalled {
  double speed_threshold = 0.1;
  int window_steps = 3;
};

/// Flags at the first query whose timestep reaches `step`.
struct FlagAfter {
  std::int64_t step = 0;
};

using SlowRule = std::variant<AlwaysOk, FlagIfStalled, FlagAfter>;

struct SlowStubConfig {
  SlowRule rule = AlwaysOk{};
  int queries_per_episode = 2;
  double latency_seconds = 0.0;
};

namespace detail {

inline bool stalled_before(const Rollout& rollout, std::int64_t query_t,
                           const FlagIfStalled& rule) {
  const int k = rollout.header.execution_horizon;
  const auto observed = static_cast<std::int64_t>(query_t / k);
  if (observed <= 0) return false;
  const std::int64_t first =
      std::max<std::int64_t>(0, observed - static_cast<std::int64_t>(rule.window_steps));
  double total = 0.0;
  std::int64_t rows = 0;
  for (std::int64_t s = first; s < observed && s < static_cast<std::int64_t>(rollout.steps.size());
       ++s) {
    const Matrix& executed = rollout.steps[static_cast<std::size_t>(s)].executed;
    for (long r = 0; r < executed.rows(); ++r) {
      total += executed.row(r).norm();
      ++rows;
    }
  }
  if (rows == 0) return false;
  return total / static_cast<double>(rows) < rule.speed_threshold;
}

}  // namespace detail

/// Runs the scripted monitor over a recorded episode: `q` queries per
/// episode at inference steps floor(n*i/q) for i = 1..q, so the default of
/// two queries lands at the episode midpoint and end. Fully deterministic.
inline std::vector<SlowVerdictEvent> run_slow_stub(const Rollout& rollout,
                                                   const SlowStubConfig& config) {
  if (config.queries_per_episode < 1)
    throw PreconditionError("slow stub needs at least one query per episode");
  if (!(config.latency_seconds >= 0.0))
    throw PreconditionError("slow stub latency must be non-negative");
  if (const auto* stalled = std::get_if<FlagIfStalled>(&config.rule)) {
    if (!(stalled->speed_threshold > 0.0) || stalled->window_steps < 1)
      throw PreconditionError("flag_if_stalled requires a positive threshold and window");
  }
  if (const auto* after = std::get_if<FlagAfter>(&config.rule)) {
    if (after->step < 0) throw PreconditionError("flag_after requires a non-negative step");
  }

  const int k = rollout.header.execution_horizon;
  const auto n = static_cast<std::int64_t>(rollout.steps.size());
  std::vector<std::int64_t> query_steps;
  for (int i = 1; i <= config.queries_per_episode; ++i) {
    const std::int64_t q = (n * i) / config.queries_per_episode * k;
    if (query_steps.empty() || query_steps.back() != q) query_steps.push_back(q);
  }

  std::vector<SlowVerdictEvent> events;
  events.reserve(query_steps.size());
  for (std::int64_t qt : query_steps) {
    SlowVerdictEvent event;
    event.episode_id = rollout.header.episode_id;
    event.t = qt;
    event.latency_seconds = config.latency_seconds;
    event.verdict = std::visit(
        [&](const auto& rule) -> SlowVerdict {
          using Rule = std::decay_t<decltype(rule)>;
          if constexpr (std::is_same_v<Rule, AlwaysOk>) {
            return SlowVerdict::ok;
          } else if constexpr (std::is_same_v<Rule, FlagIfStalled>) {
            return detail::stalled_before(rollout, qt, rule) ? SlowVerdict::failure
                                                             : SlowVerdict::ok;
          } else {
            return qt >= rule.step ? SlowVerdict::failure : SlowVerdict::ok;
          }
        },
        config.rule);
    events.push_back(std::move(event));
  }
  return events;
}

// ---------------------------------------------------------------------------
// Wire protocol: one JSON object per line,
//   {"episode_id":"...","t":24,"verdict":"failure","latency_seconds":0.5}

inline void save_slow_events(const std::vector<SlowVerdictEvent>& events, std::ostream& out) {
  for (const SlowVerdictEvent& event : events) {
    nlohmann::ordered_json record;
    record["episode_id"] = event.episode_id;
    record["t"] = event.t;
    record["verdict"] = event.verdict == SlowVerdict::failure ? "failure" : "ok";
    record["latency_seconds"] = event.latency_seconds;
    out << record.dump() << '\n';
  }
  if (!out) throw Error("slow event sink write failure");
}

inline std::vector<SlowVerdictEvent> load_slow_events(std::istream& in) {
  std::vector<SlowVerdictEvent> events;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::ordered_json record;
    try {
      record = nlohmann::ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("malformed slow event line " + std::to_string(line_no) + ": " + e.what());
    }
    SlowVerdictEvent event;
    try {
      event.episode_id = record.at("episode_id").get<std::string>();
      event.t = record.at("t").get<std::int64_t>();
      const std::string verdict = record.at("verdict").get<std::string>();
      if (verdict == "ok")
        event.verdict = SlowVerdict::ok;
      else if (verdict == "failure")
        event.verdict = SlowVerdict::failure;
      else
        throw FormatError("slow event verdict must be 'ok' or 'failure' (line " +
                          std::to_string(line_no) + ")");
      event.latency_seconds = record.at("latency_seconds").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("malformed slow event line " + std::to_string(line_no) + ": " + e.what());
    }
    events.push_back(std::move(event));
  }
  return events;
}

}  // namespace sentinel
