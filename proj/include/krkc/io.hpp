#pragma once

// Run artifacts: accuracy_matrix.csv, metrics.json, run_log.jsonl and
// per-task checkpoints. Floats are written with 17 significant digits
// (trailing zeros kept), so every value round-trips exactly.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "krkc/error.hpp"
#include "krkc/evaluation.hpp"
#include "krkc/models.hpp"
#include "krkc/trainer.hpp"

namespace krkc {

using json = nlohmann::json;

inline std::string format_float(double v) {
  if (!std::isfinite(v)) return "null";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%#.17g", v);
  return buf;
}

namespace detail {

inline void dump_json(const json& j, std::string& out, int indent, int depth) {
  const std::string pad = indent > 0 ? "\n" + std::string(static_cast<std::size_t>(indent * (depth + 1)), ' ') : "";
  const std::string close = indent > 0 ? "\n" + std::string(static_cast<std::size_t>(indent * depth), ' ') : "";
  const char* sep = indent > 0 ? ": " : ":";
  switch (j.type()) {
    case json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out += '{';
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out += ',';
        first = false;
        out += pad + json(it.key()).dump() + sep;
        dump_json(it.value(), out, indent, depth + 1);
      }
      out += close + '}';
      return;
    }
    case json::value_t::array: {
      if (j.empty()) {
        out += "[]";
        return;
      }
      out += '[';
      for (std::size_t i = 0; i < j.size(); ++i) {
        if (i) out += ',';
        out += pad;
        dump_json(j[i], out, indent, depth + 1);
      }
      out += close + ']';
      return;
    }
    case json::value_t::number_float:
      out += format_float(j.get<double>());
      return;
    default:
      out += j.dump();
  }
}

inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write '" + path.string() + "'");
  os << text;
  if (!os) throw Error("write failed for '" + path.string() + "'");
}

}  // namespace detail

// Pretty (indent > 0) or single-line JSON with the float format above.
inline std::string dump_json(const json& j, int indent = 2) {
  std::string out;
  detail::dump_json(j, out, indent, 0);
  return out;
}

// ---------------------------------------------------------------------------
// accuracy_matrix.csv: step,task,map,rank1 with one row per R[i][j], j <= i.

inline std::string accuracy_matrix_csv(const MetricsReport& r) {
  std::string out = "step,task,map,rank1\n";
  for (std::size_t i = 1; i <= r.rank1.steps(); ++i) {
    for (std::size_t j = 1; j <= i; ++j) {
      out += std::to_string(i) + "," + std::to_string(j) + "," + format_float(r.map.at(i, j)) + "," +
             format_float(r.rank1.at(i, j)) + "\n";
    }
  }
  return out;
}

struct AccuracyTables {
  AccuracyMatrix map;
  AccuracyMatrix rank1;
};

// Parses the CSV back; rows may come in any order but must cover the lower
// triangle exactly once. Errors name the offending line.
inline AccuracyTables parse_accuracy_matrix_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw Error("accuracy_matrix.csv: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "step,task,map,rank1") throw Error("accuracy_matrix.csv: unexpected header '" + line + "'");
  std::map<std::pair<std::size_t, std::size_t>, std::pair<double, double>> cells;
  std::size_t max_step = 0, line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    const auto where = "accuracy_matrix.csv line " + std::to_string(line_no) + ": ";
    if (f.size() != 4) throw Error(where + "expected 4 fields");
    try {
      auto num = [](const std::string& text) {
        std::size_t pos = 0;
        const double v = std::stod(text, &pos);
        if (pos != text.size()) throw Error("malformed number '" + text + "'");
        return v;
      };
      const auto i = static_cast<std::size_t>(num(f[0])), j = static_cast<std::size_t>(num(f[1]));
      const double m = num(f[2]);
      const double r1 = num(f[3]);
      if (i < 1 || j < 1 || j > i) throw Error("bad indices");
      if (!cells.emplace(std::make_pair(i, j), std::make_pair(m, r1)).second) throw Error("duplicate cell");
      max_step = std::max<std::size_t>(max_step, i);
    } catch (const std::exception& e) {
      throw Error(where + e.what());
    }
  }
  AccuracyTables out;
  for (std::size_t i = 1; i <= max_step; ++i) {
    std::vector<double> m, r;
    for (std::size_t j = 1; j <= i; ++j) {
      auto it = cells.find({i, j});
      if (it == cells.end()) {
        throw Error("accuracy_matrix.csv: missing R[" + std::to_string(i) + "][" + std::to_string(j) + "]");
      }
      m.push_back(it->second.first);
      r.push_back(it->second.second);
    }
    out.map.append_row(std::move(m));
    out.rank1.append_row(std::move(r));
  }
  if (out.rank1.steps() == 0) throw Error("accuracy_matrix.csv: no rows");
  return out;
}

// ---------------------------------------------------------------------------
// metrics.json

struct RunIdentity {
  std::string strategy;
  std::uint64_t seed = 0;
};

inline json metrics_json(const MetricsReport& r, const RunIdentity& id) {
  json j;
  j["strategy"] = id.strategy;
  j["seed"] = id.seed;
  j["n_tasks"] = r.rank1.steps();
  j["avg_incremental_map"] = r.avg_incremental_map;
  j["avg_incremental_rank1"] = r.avg_incremental_rank1;
  j["bwt_paper"] = detail::number_or_null(r.bwt_paper);
  j["bwt_final_row"] = detail::number_or_null(r.bwt_final_row);
  j["fwt"] = detail::number_or_null(r.fwt);
  j["bwt_paper_map"] = detail::number_or_null(r.bwt_paper_map);
  j["bwt_final_row_map"] = detail::number_or_null(r.bwt_final_row_map);
  j["fwt_map"] = detail::number_or_null(r.fwt_map);
  j["transfer_metric"] = "rank1";
  json per_task = json::object();
  const std::size_t t = r.rank1.steps();
  for (std::size_t i = 1; i <= t; ++i) {
    json e;
    e["final_map"] = r.map.at(t, i);
    e["final_rank1"] = r.rank1.at(t, i);
    e["just_trained_map"] = r.map.at(i, i);
    e["just_trained_rank1"] = r.rank1.at(i, i);
    e["reference_map"] = detail::number_or_null(i <= r.reference_map.size() ? r.reference_map[i - 1] : NAN);
    e["reference_rank1"] = detail::number_or_null(i <= r.reference_rank1.size() ? r.reference_rank1[i - 1] : NAN);
    per_task[std::to_string(i)] = e;
  }
  j["per_task"] = per_task;
  return j;
}

// ---------------------------------------------------------------------------
// run_log.jsonl: one object per (task, epoch, model) with losses averaged over
// that epoch's batches.

inline std::string run_log_jsonl(const std::vector<LossRecord>& log) {
  struct Acc {
    double distill = 0, ce = 0, trip = 0, total = 0, lr = 0;
    std::size_t n = 0;
  };
  // Keyed by (task, epoch, phase) in first-seen order.
  std::vector<std::tuple<int, int, Phase>> order;
  std::map<std::tuple<int, int, Phase>, Acc> acc;
  for (const auto& r : log) {
    const auto key = std::make_tuple(r.task, r.epoch, r.phase);
    auto [it, fresh] = acc.try_emplace(key);
    if (fresh) order.push_back(key);
    auto& a = it->second;
    a.distill += r.distill;
    a.ce += r.ce;
    a.trip += r.trip;
    a.total += r.total;
    a.lr = r.lr;
    ++a.n;
  }
  std::string out;
  for (const auto& key : order) {
    const auto& a = acc.at(key);
    const double n = static_cast<double>(a.n);
    json j;
    j["task"] = std::get<0>(key);
    j["epoch"] = std::get<1>(key);
    j["model"] = phase_model(std::get<2>(key));
    j["loss_anti_or_cali"] = a.distill / n;
    j["loss_ce"] = a.ce / n;
    j["loss_trip"] = a.trip / n;
    j["loss_total"] = a.total / n;
    j["lr"] = a.lr;
    j["batches"] = a.n;
    out += dump_json(j, 0) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Result directory layout.

struct RunArtifacts {
  std::filesystem::path dir;

  std::filesystem::path accuracy_matrix() const { return dir / "accuracy_matrix.csv"; }
  std::filesystem::path metrics() const { return dir / "metrics.json"; }
  std::filesystem::path run_log() const { return dir / "run_log.jsonl"; }
  std::filesystem::path config() const { return dir / "config.ini"; }
  std::filesystem::path checkpoint(int task, const std::string& model) const {
    return dir / "checkpoints" / ("task_" + std::to_string(task) + "_" + model + ".ckpt");
  }
};

inline void write_checkpoints(const RunArtifacts& a, const RunState& s) {
  std::filesystem::create_directories(a.dir / "checkpoints");
  const int t = s.models.task;
  for (const auto& [name, model] : {std::pair<std::string, const Model*>{"working", &s.models.working},
                                    std::pair<std::string, const Model*>{"memory", &s.models.memory}}) {
    std::ofstream os(a.checkpoint(t, name), std::ios::binary);
    if (!os) throw Error("cannot write checkpoint '" + a.checkpoint(t, name).string() + "'");
    save_checkpoint(*model, t, os);
  }
}

// Writes the tables last so that metrics.json marks a complete run.
inline void write_run(const RunArtifacts& a, const MetricsReport& r, const RunIdentity& id,
                      const std::vector<LossRecord>& log) {
  std::filesystem::create_directories(a.dir);
  detail::write_file(a.run_log(), run_log_jsonl(log));
  detail::write_file(a.accuracy_matrix(), accuracy_matrix_csv(r));
  detail::write_file(a.metrics(), dump_json(metrics_json(r, id)) + "\n");
}

}  // namespace krkc
