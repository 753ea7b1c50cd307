#pragma once

// Command-line front end: run, report, export-data. Exit codes: 0 success,
// 1 runtime failure, 2 bad configuration or usage.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "krkc/baselines.hpp"
#include "krkc/config.hpp"
#include "krkc/data.hpp"
#include "krkc/io.hpp"
#include "krkc/strategy.hpp"
#include "krkc/trainer.hpp"

namespace krkc {

inline constexpr const char* kOutRootEnv = "KRKC_OUT_ROOT";

struct RunOverrides {
  std::string config = "default";
  std::optional<std::uint64_t> seed;
  std::vector<std::string> strategies;
  std::optional<std::string> out;
  std::optional<int> tasks;
  std::optional<int> epochs;
};

// Loads the config ("default" selects the built-in one) and applies overrides.
inline ExperimentConfig resolve_config(const RunOverrides& o) {
  ExperimentConfig c = o.config == "default" ? ExperimentConfig{} : load_config(o.config);
  if (o.seed) c.seeds = {*o.seed};
  if (!o.strategies.empty()) c.strategies = o.strategies;
  if (o.tasks) c.stream.n_tasks = *o.tasks;
  if (o.epochs) c.train.epochs = *o.epochs;
  if (o.out) {
    c.out_dir = *o.out;
  } else if (const char* env = std::getenv(kOutRootEnv); env && *env) {
    c.out_dir = env;
  }
  validate(c);
  return c;
}

inline std::filesystem::path run_dir(const ExperimentConfig& c, const std::string& strategy, std::uint64_t seed) {
  return std::filesystem::path(c.out_dir) / strategy / std::to_string(seed);
}

// Runs every strategy for every seed. References for forward transfer are
// computed once per seed and shared across strategies.
inline void run_experiment(const ExperimentConfig& c, std::ostream& out) {
  for (const auto seed : c.seeds) {
    const TrainConfig tc = c.train_for(seed);
    const auto stream = generate_stream(c.stream_for(seed));
    std::vector<TaskScore> refs;
    if (tc.compute_references && stream.size() >= 2) refs = compute_references(stream, tc);
    for (const auto& name : c.strategies) {
      const Strategy strategy = strategies::by_name(name);
      RunArtifacts art{run_dir(c, strategy.name, seed)};
      std::filesystem::create_directories(art.dir);
      std::filesystem::remove(art.metrics());
      SequenceObserver observer;
      observer.on_task_end = [&](const TaskDataset&, const RunState& s) { write_checkpoints(art, s); };
      auto result = run_strategy_sequence(strategy, stream, tc, observer, refs.empty() ? nullptr : &refs);
      ExperimentConfig single = c;
      single.seeds = {seed};
      single.strategies = {strategy.name};
      detail::write_file(art.config(), serialize_config(single));
      write_run(art, result.report, {strategy.name, seed}, result.state.log);
      char line[160];
      std::snprintf(line, sizeof line, "%-15s seed %-4llu s_rank1 %.4f  s_map %.4f  -> %s\n", strategy.name.c_str(),
                    static_cast<unsigned long long>(seed), result.report.avg_incremental_rank1,
                    result.report.avg_incremental_map, art.dir.string().c_str());
      out << line;
    }
  }
}

// ---------------------------------------------------------------------------
// report

struct RunSummary {
  std::string strategy;
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  double avg_rank1 = 0, avg_map = 0, bwt_paper = 0, bwt_final_row = 0, fwt = 0;
  std::vector<double> final_rank1, final_map;  // R[T][j]
};

inline double json_number(const json& j, const char* key) {
  if (!j.contains(key)) throw Error(std::string("metrics.json: missing '") + key + "'");
  const auto& v = j.at(key);
  if (v.is_null()) return std::numeric_limits<double>::quiet_NaN();
  if (!v.is_number()) throw Error(std::string("metrics.json: '") + key + "' is not a number");
  return v.get<double>();
}

inline RunSummary load_run_summary(const std::filesystem::path& dir) {
  RunArtifacts art{dir};
  std::ifstream ms(art.metrics());
  if (!ms) throw Error("no metrics.json");
  const json m = json::parse(ms);
  std::ifstream cs(art.accuracy_matrix());
  if (!cs) throw Error("no accuracy_matrix.csv");
  const auto tables = parse_accuracy_matrix_csv(cs);
  RunSummary r;
  r.dir = dir;
  r.strategy = m.at("strategy").get<std::string>();
  r.seed = m.at("seed").get<std::uint64_t>();
  r.avg_rank1 = json_number(m, "avg_incremental_rank1");
  r.avg_map = json_number(m, "avg_incremental_map");
  r.bwt_paper = json_number(m, "bwt_paper");
  r.bwt_final_row = json_number(m, "bwt_final_row");
  r.fwt = json_number(m, "fwt");
  const std::size_t t = tables.rank1.steps();
  for (std::size_t j = 1; j <= t; ++j) {
    r.final_rank1.push_back(tables.rank1.at(t, j));
    r.final_map.push_back(tables.map.at(t, j));
  }
  return r;
}

// Runs under each root (a run directory itself or any parent of run
// directories). Directories that look like runs but fail to load are skipped
// with a warning.
inline std::vector<RunSummary> collect_runs(const std::vector<std::string>& roots, std::ostream& err) {
  std::vector<RunSummary> runs;
  std::set<std::filesystem::path> seen;
  auto looks_like_run = [](const std::filesystem::path& d) {
    return std::filesystem::exists(d / "metrics.json") || std::filesystem::exists(d / "accuracy_matrix.csv") ||
           std::filesystem::exists(d / "run_log.jsonl");
  };
  auto consider = [&](const std::filesystem::path& d) {
    const auto canon = std::filesystem::weakly_canonical(d);
    if (!seen.insert(canon).second || !looks_like_run(d)) return;
    try {
      runs.push_back(load_run_summary(d));
    } catch (const std::exception& e) {
      err << "warning: skipping incomplete run '" << d.string() << "': " << e.what() << "\n";
    }
  };
  for (const auto& root : roots) {
    const std::filesystem::path p(root);
    if (!std::filesystem::is_directory(p)) {
      err << "warning: '" << root << "' is not a directory\n";
      continue;
    }
    std::vector<std::filesystem::path> dirs{p};
    for (const auto& e : std::filesystem::recursive_directory_iterator(p)) {
      if (e.is_directory()) dirs.push_back(e.path());
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) consider(d);
  }
  std::stable_sort(runs.begin(), runs.end(), [](const RunSummary& a, const RunSummary& b) {
    return a.strategy != b.strategy ? a.strategy < b.strategy : a.seed < b.seed;
  });
  return runs;
}

// Median ignoring NaN; NaN when nothing is left.
inline double median(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct StrategyAggregate {
  std::string strategy;
  std::size_t n_runs = 0;
  RunSummary median;  // seed and dir unused
};

inline std::vector<StrategyAggregate> aggregate_runs(const std::vector<RunSummary>& runs) {
  std::map<std::string, std::vector<const RunSummary*>> by;
  for (const auto& r : runs) by[r.strategy].push_back(&r);
  std::vector<StrategyAggregate> out;
  for (const auto& [name, group] : by) {
    StrategyAggregate a;
    a.strategy = name;
    a.n_runs = group.size();
    a.median.strategy = name;
    auto med = [&](auto field) {
      std::vector<double> v;
      for (const auto* r : group) v.push_back(field(*r));
      return median(v);
    };
    a.median.avg_rank1 = med([](const RunSummary& r) { return r.avg_rank1; });
    a.median.avg_map = med([](const RunSummary& r) { return r.avg_map; });
    a.median.bwt_paper = med([](const RunSummary& r) { return r.bwt_paper; });
    a.median.bwt_final_row = med([](const RunSummary& r) { return r.bwt_final_row; });
    a.median.fwt = med([](const RunSummary& r) { return r.fwt; });
    std::size_t tasks = 0;
    for (const auto* r : group) tasks = std::max(tasks, r->final_rank1.size());
    for (std::size_t j = 0; j < tasks; ++j) {
      const double nan = std::numeric_limits<double>::quiet_NaN();
      a.median.final_rank1.push_back(med([&](const RunSummary& r) { return j < r.final_rank1.size() ? r.final_rank1[j] : nan; }));
      a.median.final_map.push_back(med([&](const RunSummary& r) { return j < r.final_map.size() ? r.final_map[j] : nan; }));
    }
    out.push_back(std::move(a));
  }
  return out;
}

inline std::string report_csv(const std::vector<RunSummary>& runs, const std::vector<StrategyAggregate>& agg) {
  std::size_t tasks = 0;
  for (const auto& r : runs) tasks = std::max(tasks, r.final_rank1.size());
  std::string out = "kind,strategy,seed,n_runs,avg_incremental_rank1,avg_incremental_map,bwt_paper,bwt_final_row,fwt";
  for (std::size_t j = 1; j <= tasks; ++j) out += ",task" + std::to_string(j) + "_rank1,task" + std::to_string(j) + "_map";
  out += "\n";
  auto num = [](double v) { return std::isnan(v) ? std::string() : format_float(v); };
  auto row = [&](const std::string& kind, const RunSummary& r, const std::string& seed, std::size_t n) {
    out += kind + "," + r.strategy + "," + seed + "," + std::to_string(n) + "," + num(r.avg_rank1) + "," + num(r.avg_map) +
           "," + num(r.bwt_paper) + "," + num(r.bwt_final_row) + "," + num(r.fwt);
    for (std::size_t j = 0; j < tasks; ++j) {
      out += "," + (j < r.final_rank1.size() ? num(r.final_rank1[j]) : "");
      out += "," + (j < r.final_map.size() ? num(r.final_map[j]) : "");
    }
    out += "\n";
  };
  for (const auto& a : agg) row("median", a.median, "", a.n_runs);
  for (const auto& r : runs) row("run", r, std::to_string(r.seed), 1);
  return out;
}

inline std::string report_table(const std::vector<StrategyAggregate>& agg) {
  std::size_t tasks = 0;
  for (const auto& a : agg) tasks = std::max(tasks, a.median.final_rank1.size());
  std::ostringstream os;
  char buf[64];
  auto cell = [&](double v) {
    if (std::isnan(v)) return std::string("      -");
    std::snprintf(buf, sizeof buf, " %6.1f", 100.0 * v);
    return std::string(buf);
  };
  std::snprintf(buf, sizeof buf, "%-15s %4s", "strategy", "runs");
  os << buf;
  for (std::size_t j = 1; j <= tasks; ++j) {
    std::snprintf(buf, sizeof buf, "  T%zu R-1   mAP", j);
    os << buf;
  }
  os << "  avg R-1   mAP   BWT(p)  BWT(f)    FWT\n";
  for (const auto& a : agg) {
    std::snprintf(buf, sizeof buf, "%-15s %4zu", a.strategy.c_str(), a.n_runs);
    os << buf;
    for (std::size_t j = 0; j < tasks; ++j) {
      const auto& m = a.median;
      os << cell(j < m.final_rank1.size() ? m.final_rank1[j] : NAN) << cell(j < m.final_map.size() ? m.final_map[j] : NAN);
    }
    os << "  " << cell(a.median.avg_rank1) << cell(a.median.avg_map) << " " << cell(a.median.bwt_paper)
       << cell(a.median.bwt_final_row) << cell(a.median.fwt) << "\n";
  }
  os << "(percent; medians over runs; R-1 and mAP per task are from the final step)\n";
  return os.str();
}

// ---------------------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Lifelong representation learning with knowledge refreshing and consolidation"};
  app.require_subcommand(1);

  RunOverrides ro;
  std::string strategy_list;
  auto* run = app.add_subcommand("run", "train strategies and write result directories");
  run->add_option("--config", ro.config, "config file, or 'default'");
  run->add_option("--seed", ro.seed, "single seed (replaces the configured list)");
  run->add_option("--strategy", strategy_list, "comma-separated strategy names");
  run->add_option("--out", ro.out, "output root (else $" + std::string(kOutRootEnv) + ", else the config)");
  run->add_option("--tasks", ro.tasks, "number of tasks in the stream");
  run->add_option("--epochs", ro.epochs, "epochs per task");
  run->add_flag("--print-config", "print the resolved config and exit");

  std::vector<std::string> report_dirs;
  std::string report_out;
  auto* report = app.add_subcommand("report", "aggregate finished runs into a comparison table");
  report->add_option("dirs", report_dirs, "result directories")->required();
  report->add_option("--csv", report_out, "CSV output path (default: <first dir>/report.csv)");

  RunOverrides eo;
  auto* exp = app.add_subcommand("export-data", "write the synthetic stream as CSV");
  exp->add_option("--config", eo.config, "config file, or 'default'");
  exp->add_option("--seed", eo.seed, "stream seed (default: first configured seed)");
  exp->add_option("--out", eo.out, "output directory")->required();
  exp->add_option("--tasks", eo.tasks, "number of tasks in the stream");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*run) {
      if (!strategy_list.empty()) ro.strategies = detail::split_list(strategy_list);
      const ExperimentConfig c = resolve_config(ro);
      if (run->count("--print-config")) {
        out << serialize_config(c);
        return 0;
      }
      run_experiment(c, out);
      return 0;
    }
    if (*report) {
      const auto runs = collect_runs(report_dirs, err);
      if (runs.empty()) {
        err << "error: no completed runs found\n";
        return 2;
      }
      const auto agg = aggregate_runs(runs);
      out << report_table(agg);
      const std::filesystem::path csv =
          report_out.empty() ? std::filesystem::path(report_dirs.front()) / "report.csv" : std::filesystem::path(report_out);
      detail::write_file(csv, report_csv(runs, agg));
      out << "wrote " << csv.string() << "\n";
      return 0;
    }
    if (*exp) {
      const std::string dir = *eo.out;
      eo.out.reset();
      const ExperimentConfig c = resolve_config(eo);
      export_stream(dir, generate_stream(c.stream_for(c.seeds.front())));
      out << "wrote stream to " << dir << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace krkc
