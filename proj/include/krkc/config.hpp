#pragma once

// Experiment configuration in a strict sectioned key = value format:
//
//   # comment
//   [stream]
//   n_tasks = 4
//   [train]
//   hidden = 64,64
//   [experiment]
//   strategies = naive,krkc
//   seeds = 1,2,3,4,5
//
// Unknown sections or keys, duplicate keys and malformed values are errors.
// Serialisation writes every key, so parse(serialize(c)) == c.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "krkc/data.hpp"
#include "krkc/error.hpp"
#include "krkc/strategy.hpp"
#include "krkc/trainer.hpp"

namespace krkc {

// Trainer defaults for the desk-scale experiment: ten passes' worth of PK
// batches per epoch so each task trains long enough to show forgetting.
inline TrainConfig default_experiment_train() {
  TrainConfig t;
  t.batches_per_epoch = 120;
  return t;
}

struct ExperimentConfig {
  StreamConfig stream;
  TrainConfig train = default_experiment_train();
  std::vector<std::string> strategies{"naive", "frozen_teacher", "krh_krf", "krkc"};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string out_dir = "results";

  bool operator==(const ExperimentConfig&) const = default;

  // Stream and trainer configs for one seed of the experiment.
  StreamConfig stream_for(std::uint64_t seed) const {
    StreamConfig s = stream;
    s.seed = seed;
    return s;
  }
  TrainConfig train_for(std::uint64_t seed) const {
    TrainConfig t = train;
    t.seed = seed;
    t.arch.input_dim = stream.input_dim;
    return t;
  }
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError("empty list element in '" + s + "'");
    out.push_back(item);
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream is(value);
  T out{};
  is >> out;
  if (!is || !is.eof()) throw ConfigError("key '" + key + "': cannot parse '" + value + "'");
  if constexpr (std::is_unsigned_v<T>) {
    if (value.find('-') != std::string::npos) throw ConfigError("key '" + key + "': must be non-negative");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + value + "'");
}

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

inline std::vector<Field> config_fields() {
  std::vector<Field> f;
  auto sz = [&](std::string sec, std::string key, auto getter) {
    f.push_back({sec, key, [getter](const ExperimentConfig& c) { return std::to_string(getter(const_cast<ExperimentConfig&>(c))); },
                 [getter, key](ExperimentConfig& c, const std::string& v) {
                   auto& ref = getter(c);
                   ref = parse_number<std::remove_reference_t<decltype(ref)>>(key, v);
                 }});
  };
  auto dbl = [&](std::string sec, std::string key, auto getter) {
    f.push_back({sec, key, [getter](const ExperimentConfig& c) { return format_double(getter(const_cast<ExperimentConfig&>(c))); },
                 [getter, key](ExperimentConfig& c, const std::string& v) { getter(c) = parse_number<double>(key, v); }});
  };
  auto flag = [&](std::string sec, std::string key, auto getter) {
    f.push_back({sec, key, [getter](const ExperimentConfig& c) { return getter(const_cast<ExperimentConfig&>(c)) ? std::string("true") : std::string("false"); },
                 [getter, key](ExperimentConfig& c, const std::string& v) { getter(c) = parse_bool(key, v); }});
  };

  sz("stream", "n_tasks", [](ExperimentConfig& c) -> int& { return c.stream.n_tasks; });
  sz("stream", "train_ids_per_task", [](ExperimentConfig& c) -> std::size_t& { return c.stream.train_ids_per_task; });
  sz("stream", "test_ids_per_task", [](ExperimentConfig& c) -> std::size_t& { return c.stream.test_ids_per_task; });
  sz("stream", "samples_per_id", [](ExperimentConfig& c) -> std::size_t& { return c.stream.samples_per_id; });
  sz("stream", "queries_per_id", [](ExperimentConfig& c) -> std::size_t& { return c.stream.queries_per_id; });
  sz("stream", "input_dim", [](ExperimentConfig& c) -> std::size_t& { return c.stream.input_dim; });
  sz("stream", "identity_dim", [](ExperimentConfig& c) -> std::size_t& { return c.stream.identity_dim; });
  dbl("stream", "domain_shift", [](ExperimentConfig& c) -> double& { return c.stream.domain_shift; });
  dbl("stream", "bias_scale", [](ExperimentConfig& c) -> double& { return c.stream.bias_scale; });
  dbl("stream", "noise_scale", [](ExperimentConfig& c) -> double& { return c.stream.noise_scale; });
  dbl("stream", "identity_noise", [](ExperimentConfig& c) -> double& { return c.stream.identity_noise; });
  dbl("stream", "nuisance_noise", [](ExperimentConfig& c) -> double& { return c.stream.nuisance_noise; });

  sz("train", "epochs", [](ExperimentConfig& c) -> int& { return c.train.epochs; });
  dbl("train", "rehearsal_lr", [](ExperimentConfig& c) -> double& { return c.train.rehearsal_lr; });
  dbl("train", "refreshing_lr", [](ExperimentConfig& c) -> double& { return c.train.refreshing_lr; });
  dbl("train", "last_task_refreshing_lr", [](ExperimentConfig& c) -> double& { return c.train.last_task_refreshing_lr; });
  dbl("train", "decay_factor", [](ExperimentConfig& c) -> double& { return c.train.decay_factor; });
  dbl("train", "temperature", [](ExperimentConfig& c) -> double& { return c.train.temperature; });
  dbl("train", "margin", [](ExperimentConfig& c) -> double& { return c.train.margin; });
  sz("train", "P", [](ExperimentConfig& c) -> std::size_t& { return c.train.P; });
  sz("train", "K", [](ExperimentConfig& c) -> std::size_t& { return c.train.K; });
  sz("train", "exemplar_ids_per_task", [](ExperimentConfig& c) -> std::size_t& { return c.train.exemplar_ids_per_task; });
  sz("train", "batches_per_epoch", [](ExperimentConfig& c) -> std::size_t& { return c.train.batches_per_epoch; });
  flag("train", "open_ended", [](ExperimentConfig& c) -> bool& { return c.train.open_ended; });
  flag("train", "distill_all_classes", [](ExperimentConfig& c) -> bool& { return c.train.distill_all_classes; });
  flag("train", "compute_references", [](ExperimentConfig& c) -> bool& { return c.train.compute_references; });
  f.push_back({"train", "hidden",
               [](const ExperimentConfig& c) {
                 std::string s;
                 for (std::size_t i = 0; i < c.train.arch.hidden.size(); ++i) s += (i ? "," : "") + std::to_string(c.train.arch.hidden[i]);
                 return s;
               },
               [](ExperimentConfig& c, const std::string& v) {
                 c.train.arch.hidden.clear();
                 for (const auto& item : split_list(v)) c.train.arch.hidden.push_back(parse_number<std::size_t>("hidden", item));
               }});
  sz("train", "embedding_dim", [](ExperimentConfig& c) -> std::size_t& { return c.train.arch.embedding_dim; });

  f.push_back({"experiment", "strategies",
               [](const ExperimentConfig& c) {
                 std::string s;
                 for (std::size_t i = 0; i < c.strategies.size(); ++i) s += (i ? "," : "") + c.strategies[i];
                 return s;
               },
               [](ExperimentConfig& c, const std::string& v) { c.strategies = split_list(v); }});
  f.push_back({"experiment", "seeds",
               [](const ExperimentConfig& c) {
                 std::string s;
                 for (std::size_t i = 0; i < c.seeds.size(); ++i) s += (i ? "," : "") + std::to_string(c.seeds[i]);
                 return s;
               },
               [](ExperimentConfig& c, const std::string& v) {
                 c.seeds.clear();
                 for (const auto& item : split_list(v)) c.seeds.push_back(parse_number<std::uint64_t>("seeds", item));
               }});
  f.push_back({"experiment", "out_dir", [](const ExperimentConfig& c) { return c.out_dir; },
               [](ExperimentConfig& c, const std::string& v) { c.out_dir = v; }});
  return f;
}

}  // namespace detail

// Structural checks beyond per-key parsing.
inline void validate(const ExperimentConfig& c) {
  try {
    validate(c.stream);
    validate(c.train_for(c.seeds.empty() ? 0 : c.seeds.front()));
    if (c.seeds.empty()) throw Error("at least one seed is required");
    if (c.strategies.empty()) throw Error("at least one strategy is required");
    for (const auto& s : c.strategies) validate(strategies::by_name(s));
    if (c.train.P > c.stream.train_ids_per_task) throw Error("P exceeds the identities per task");
    if (c.train.K > c.stream.samples_per_id) throw Error("K exceeds the samples per identity");
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

inline ExperimentConfig parse_config(std::istream& is) {
  ExperimentConfig c;
  const auto fields = detail::config_fields();
  std::set<std::string> sections;
  for (const auto& f : fields) sections.insert(f.section);
  std::set<std::string> seen;
  std::string section, line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto where = "line " + std::to_string(line_no) + ": ";
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (!sections.count(section)) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside of any section");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    auto it = std::find_if(fields.begin(), fields.end(),
                           [&](const detail::Field& f) { return f.section == section && f.key == key; });
    if (it == fields.end()) throw ConfigError(where + "unknown key '" + key + "' in [" + section + "]");
    if (!seen.insert(section + "." + key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      it->set(c, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  validate(c);
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(is);
}

inline std::string serialize_config(const ExperimentConfig& c) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : detail::config_fields()) {
    if (f.section != section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get(c) << '\n';
  }
  return os.str();
}

}  // namespace krkc
