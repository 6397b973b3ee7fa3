#pragma once

#include <istream>
#include <ostream>
#include <string>

#include <json.hpp>

#include "sentinel/types.hpp"

namespace sentinel {

// Episode files are UTF-8 JSONL: a header line, one line per inference step,
// and a result line. Numbers are IEEE-754 doubles printed with the shortest
// round-tripping decimal representation, so save -> load is the identity.
//
//   {"type":"header","episode_id":"...","h":16,"k":8,"d":2,"H":96,"dt":0.1}
//   {"type":"step","t":0,"batch":[[[..d]..h]..B],"executed":[[..d]..k],"embedding":[..]}
//   {"type":"result","return":1.0,"success":true}
//
// The "embedding" field is omitted when a step has none.

using OrderedJson = nlohmann::ordered_json;

namespace detail {

inline Matrix parse_matrix(const OrderedJson& rows, long expected_rows, long expected_cols,
                           const char* what, std::size_t line_no) {
  const std::string where = " (line " + std::to_string(line_no) + ")";
  if (!rows.is_array() || rows.size() != static_cast<std::size_t>(expected_rows))
    throw FormatError(std::string(what) + " shape mismatch" + where);
  Matrix out(expected_rows, expected_cols);
  for (long r = 0; r < expected_rows; ++r) {
    const OrderedJson& row = rows[static_cast<std::size_t>(r)];
    if (!row.is_array() || row.size() != static_cast<std::size_t>(expected_cols))
      throw FormatError(std::string(what) + " shape mismatch" + where);
    for (long c = 0; c < expected_cols; ++c) {
      const OrderedJson& cell = row[static_cast<std::size_t>(c)];
      if (!cell.is_number())
        throw FormatError(std::string(what) + " has a non-numeric entry" + where);
      const double value = cell.get<double>();
      if (!std::isfinite(value))
        throw FormatError(std::string(what) + " has a non-finite entry" + where);
      out(r, c) = value;
    }
  }
  return out;
}

inline OrderedJson matrix_to_json(const Matrix& m) {
  OrderedJson rows = OrderedJson::array();
  for (long r = 0; r < m.rows(); ++r) {
    OrderedJson row = OrderedJson::array();
    for (long c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

template <typename T>
T require_field(const OrderedJson& obj, const char* key, std::size_t line_no) {
  if (!obj.contains(key))
    throw FormatError("missing field '" + std::string(key) + "' (line " +
                      std::to_string(line_no) + ")");
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError("field '" + std::string(key) + "' has the wrong type (line " +
                      std::to_string(line_no) + ")");
  }
}

}  // namespace detail

inline Rollout load_rollout(std::istream& in) {
  Rollout rollout;
  bool have_header = false;
  bool have_result = false;
  std::string line;
  std::size_t line_no = 0;

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    OrderedJson record;
    try {
      record = OrderedJson::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("malformed line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!record.is_object() || !record.contains("type"))
      throw FormatError("malformed line " + std::to_string(line_no) + ": missing record type");
    const std::string type = record.at("type").get<std::string>();

    if (type == "header") {
      if (have_header || !rollout.steps.empty() || have_result)
        throw FormatError("header missing or not first (line " + std::to_string(line_no) + ")");
      rollout.header.episode_id = detail::require_field<std::string>(record, "episode_id", line_no);
      rollout.header.prediction_horizon = detail::require_field<int>(record, "h", line_no);
      rollout.header.execution_horizon = detail::require_field<int>(record, "k", line_no);
      rollout.header.action_dim = detail::require_field<int>(record, "d", line_no);
      rollout.header.max_env_steps = detail::require_field<std::int64_t>(record, "H", line_no);
      rollout.header.dt = detail::require_field<double>(record, "dt", line_no);
      try {
        rollout.header.validate();
      } catch (const Error& e) {
        throw FormatError(std::string(e.what()) + " (line " + std::to_string(line_no) + ")");
      }
      have_header = true;
    } else if (type == "step") {
      if (!have_header)
        throw FormatError("header missing or not first (line " + std::to_string(line_no) + ")");
      if (have_result)
        throw FormatError("step after result record (line " + std::to_string(line_no) + ")");
      RolloutStep step;
      step.batch.t = detail::require_field<std::int64_t>(record, "t", line_no);
      if (!record.contains("batch") || !record.at("batch").is_array() ||
          record.at("batch").empty())
        throw FormatError("step batch must be a non-empty array (line " +
                          std::to_string(line_no) + ")");
      for (const OrderedJson& chunk : record.at("batch")) {
        ActionChunk parsed;
        parsed.values = detail::parse_matrix(chunk, rollout.header.prediction_horizon,
                                             rollout.header.action_dim, "chunk", line_no);
        step.batch.chunks.push_back(std::move(parsed));
      }
      if (!record.contains("executed"))
        throw FormatError("missing field 'executed' (line " + std::to_string(line_no) + ")");
      step.executed = detail::parse_matrix(record.at("executed"), rollout.header.execution_horizon,
                                           rollout.header.action_dim, "executed actions", line_no);
      if (record.contains("embedding")) {
        const OrderedJson& emb = record.at("embedding");
        if (!emb.is_array() || emb.empty())
          throw FormatError("embedding must be a non-empty array (line " +
                            std::to_string(line_no) + ")");
        Vector v(static_cast<Eigen::Index>(emb.size()));
        for (std::size_t i = 0; i < emb.size(); ++i) {
          if (!emb[i].is_number())
            throw FormatError("embedding has a non-numeric entry (line " +
                              std::to_string(line_no) + ")");
          v[static_cast<Eigen::Index>(i)] = emb[i].get<double>();
        }
        step.embedding = std::move(v);
      }
      rollout.steps.push_back(std::move(step));
    } else if (type == "result") {
      if (!have_header)
        throw FormatError("header missing or not first (line " + std::to_string(line_no) + ")");
      if (have_result)
        throw FormatError("duplicate result record (line " + std::to_string(line_no) + ")");
      rollout.terminal_return = detail::require_field<double>(record, "return", line_no);
      rollout.success = detail::require_field<bool>(record, "success", line_no);
      if (!std::isfinite(rollout.terminal_return))
        throw FormatError("terminal return is not finite (line " + std::to_string(line_no) + ")");
      have_result = true;
    } else {
      throw FormatError("unknown record type '" + type + "' (line " + std::to_string(line_no) +
                        ")");
    }
  }

  if (!have_header) throw FormatError("header missing or not first");
  if (!have_result) throw FormatError("missing result record");
  try {
    rollout.validate();
  } catch (const Error& e) {
    throw FormatError(e.what());
  }
  return rollout;
}

inline void save_rollout(const Rollout& rollout, std::ostream& out) {
  rollout.validate();

  OrderedJson header;
  header["type"] = "header";
  header["episode_id"] = rollout.header.episode_id;
  header["h"] = rollout.header.prediction_horizon;
  header["k"] = rollout.header.execution_horizon;
  header["d"] = rollout.header.action_dim;
  header["H"] = rollout.header.max_env_steps;
  header["dt"] = rollout.header.dt;
  out << header.dump() << '\n';

  for (const RolloutStep& step : rollout.steps) {
    OrderedJson record;
    record["type"] = "step";
    record["t"] = step.batch.t;
    OrderedJson batch = OrderedJson::array();
    for (const ActionChunk& chunk : step.batch.chunks)
      batch.push_back(detail::matrix_to_json(chunk.values));
    record["batch"] = std::move(batch);
    record["executed"] = detail::matrix_to_json(step.executed);
    if (step.embedding) {
      OrderedJson emb = OrderedJson::array();
      for (Eigen::Index i = 0; i < step.embedding->size(); ++i)
        emb.push_back((*step.embedding)[i]);
      record["embedding"] = std::move(emb);
    }
    out << record.dump() << '\n';
  }

  OrderedJson result;
  result["type"] = "result";
  result["return"] = rollout.terminal_return;
  result["success"] = rollout.success;
  out << result.dump() << '\n';
  if (!out) throw Error("rollout sink write failure");
}

}  // namespace sentinel
