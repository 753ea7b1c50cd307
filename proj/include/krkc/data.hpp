#pragma once

// Synthetic multi-domain identity stream, PK batch sampling and the exemplar
// memory with farthest-from-centroid selection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "krkc/error.hpp"
#include "krkc/models.hpp"
#include "krkc/rng.hpp"
#include "krkc/tensor.hpp"

namespace krkc {

struct StreamConfig {
  int n_tasks = 4;
  std::size_t train_ids_per_task = 32;
  std::size_t test_ids_per_task = 16;
  std::size_t samples_per_id = 12;
  std::size_t queries_per_id = 4;
  std::size_t input_dim = 32;
  std::size_t identity_dim = 8;     // latent dimensions that carry identity
  double domain_shift = 1.0;        // 0: every task shares one domain
  double bias_scale = 1.0;          // magnitude of the per-domain offset
  double noise_scale = 1.0;         // 0: all samples of an identity coincide
  double identity_noise = 0.5;      // within-identity spread on identity dims
  double nuisance_noise = 1.5;      // spread on the remaining dims
  std::uint64_t seed = 1;

  bool operator==(const StreamConfig&) const = default;
};

// Row-major feature matrix with one identity label per row.
struct SampleSet {
  std::size_t dim = 0;
  std::vector<double> features;
  std::vector<int> identities;

  std::size_t size() const { return identities.size(); }
  std::span<const double> row(std::size_t i) const { return {features.data() + i * dim, dim}; }

  void push(std::span<const double> x, int identity) {
    if (dim == 0) dim = x.size();
    if (x.size() != dim) throw Error("sample set: feature dimension mismatch");
    features.insert(features.end(), x.begin(), x.end());
    identities.push_back(identity);
  }

  Tensor as_tensor() const { return Tensor({size(), dim}, features); }

  bool operator==(const SampleSet&) const = default;
};

struct DomainDescriptor {
  std::uint64_t seed = 0;
  double shift = 0.0;
  std::vector<double> rotation;  // [D, D], orthogonal
  std::vector<double> bias;      // [D]
};

struct TaskDataset {
  int task = 0;  // 1-based
  SampleSet train;
  SampleSet query;
  SampleSet gallery;
  DomainDescriptor domain;

  std::vector<int> train_identities() const {
    std::set<int> ids(train.identities.begin(), train.identities.end());
    return {ids.begin(), ids.end()};
  }
};

namespace detail {

// Gram-Schmidt on the columns of a [D, D] matrix.
inline std::vector<double> orthonormalize(std::vector<double> a, std::size_t d) {
  for (std::size_t j = 0; j < d; ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < j; ++k) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += a[i * d + j] * a[i * d + k];
        for (std::size_t i = 0; i < d; ++i) a[i * d + j] -= dot * a[i * d + k];
      }
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < d; ++i) norm += a[i * d + j] * a[i * d + j];
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw Error("generate_stream: degenerate domain transform");
    for (std::size_t i = 0; i < d; ++i) a[i * d + j] /= norm;
  }
  return a;
}

inline DomainDescriptor make_domain(const StreamConfig& cfg, int task) {
  DomainDescriptor dom;
  dom.seed = derive_seed(cfg.seed, "domain", static_cast<std::uint64_t>(task));
  dom.shift = cfg.domain_shift;
  const std::size_t d = cfg.input_dim;
  Rng rng(dom.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> a(d * d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      a[i * d + j] = (i == j ? 1.0 : 0.0) + cfg.domain_shift * normal(rng) / std::sqrt(static_cast<double>(d));
  dom.rotation = orthonormalize(std::move(a), d);
  dom.bias.resize(d);
  for (double& b : dom.bias) b = cfg.domain_shift * cfg.bias_scale * normal(rng);
  return dom;
}

inline void draw_identity(const StreamConfig& cfg, const DomainDescriptor& dom, std::size_t count,
                          Rng& rng, std::vector<std::vector<double>>& out) {
  const std::size_t d = cfg.input_dim, k = cfg.identity_dim;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> latent(k);
  for (double& v : latent) v = normal(rng);
  std::vector<double> u(d);
  for (std::size_t s = 0; s < count; ++s) {
    for (std::size_t i = 0; i < d; ++i) {
      u[i] = i < k ? latent[i] + cfg.noise_scale * cfg.identity_noise * normal(rng)
                   : cfg.noise_scale * cfg.nuisance_noise * normal(rng);
    }
    std::vector<double> x(dom.bias);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i] += dom.rotation[i * d + j] * u[j];
    out.push_back(std::move(x));
  }
}

}  // namespace detail

inline void validate(const StreamConfig& cfg) {
  if (cfg.n_tasks < 1) throw Error("stream: n_tasks must be >= 1");
  if (cfg.train_ids_per_task < 2) throw Error("stream: need at least 2 training identities per task");
  if (cfg.test_ids_per_task < 1) throw Error("stream: need at least 1 test identity per task");
  if (cfg.samples_per_id < 4) throw Error("stream: samples_per_id must be >= 4 for PK sampling");
  if (cfg.queries_per_id < 1 || cfg.queries_per_id >= cfg.samples_per_id) {
    throw Error("stream: queries_per_id must leave at least one gallery sample per identity");
  }
  if (cfg.input_dim == 0 || cfg.identity_dim == 0 || cfg.identity_dim > cfg.input_dim) {
    throw Error("stream: identity_dim must lie in [1, input_dim]");
  }
  if (cfg.domain_shift < 0.0 || cfg.noise_scale < 0.0 || cfg.identity_noise < 0.0 || cfg.nuisance_noise < 0.0 ||
      cfg.bias_scale < 0.0) {
    throw Error("stream: scales must be non-negative");
  }
}

// Each identity is a latent vector on the first `identity_dim` coordinates, the
// rest is per-sample nuisance; each task applies its own orthogonal transform
// and offset. Training identities are numbered task-major from 0; test
// identities follow after all training identities.
inline std::vector<TaskDataset> generate_stream(const StreamConfig& cfg) {
  validate(cfg);
  std::vector<TaskDataset> tasks;
  const int train_total = cfg.n_tasks * static_cast<int>(cfg.train_ids_per_task);
  for (int t = 1; t <= cfg.n_tasks; ++t) {
    TaskDataset task;
    task.task = t;
    task.domain = detail::make_domain(cfg, t);
    Rng rng(derive_seed(cfg.seed, "identities", static_cast<std::uint64_t>(t)));
    std::vector<std::vector<double>> rows;
    for (std::size_t k = 0; k < cfg.train_ids_per_task; ++k) {
      const int id = (t - 1) * static_cast<int>(cfg.train_ids_per_task) + static_cast<int>(k);
      rows.clear();
      detail::draw_identity(cfg, task.domain, cfg.samples_per_id, rng, rows);
      for (const auto& x : rows) task.train.push(x, id);
    }
    for (std::size_t k = 0; k < cfg.test_ids_per_task; ++k) {
      const int id = train_total + (t - 1) * static_cast<int>(cfg.test_ids_per_task) + static_cast<int>(k);
      rows.clear();
      detail::draw_identity(cfg, task.domain, cfg.samples_per_id, rng, rows);
      for (std::size_t s = 0; s < rows.size(); ++s) (s < cfg.queries_per_id ? task.query : task.gallery).push(rows[s], id);
    }
    tasks.push_back(std::move(task));
  }
  return tasks;
}

// ---------------------------------------------------------------------------
// PK sampling

enum class Provenance { new_task, exemplar };

struct Batch {
  Tensor inputs;            // [P*K, D_in]
  std::vector<int> labels;  // identity ids
  Provenance provenance = Provenance::new_task;
};

// Rows of a SampleSet grouped by identity, identities ascending.
struct IdentityIndex {
  std::vector<int> ids;
  std::vector<std::vector<std::size_t>> rows;

  explicit IdentityIndex(const SampleSet& set) {
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < set.size(); ++i) groups[set.identities[i]].push_back(i);
    for (auto& [id, r] : groups) {
      ids.push_back(id);
      rows.push_back(std::move(r));
    }
  }
};

// P distinct identities x K instances, shuffled. An identity with fewer than K
// rows contributes every row once and fills the rest by drawing with replacement.
inline Batch pk_sample(const SampleSet& set, const IdentityIndex& index, std::size_t P, std::size_t K, Rng& rng,
                       Provenance provenance = Provenance::new_task) {
  if (P == 0 || K == 0) throw Error("pk_sample: P and K must be positive");
  if (index.ids.size() < P) {
    throw Error("pk_sample: need " + std::to_string(P) + " identities, only " + std::to_string(index.ids.size()) +
                " available");
  }
  std::vector<std::size_t> order(index.ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::size_t> picked;
  for (std::size_t p = 0; p < P; ++p) {
    std::vector<std::size_t> rows = index.rows[order[p]];
    std::shuffle(rows.begin(), rows.end(), rng);
    if (rows.size() >= K) {
      picked.insert(picked.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(K));
    } else {
      picked.insert(picked.end(), rows.begin(), rows.end());
      std::uniform_int_distribution<std::size_t> draw(0, rows.size() - 1);
      for (std::size_t k = rows.size(); k < K; ++k) picked.push_back(rows[draw(rng)]);
    }
  }
  std::shuffle(picked.begin(), picked.end(), rng);

  Batch batch;
  batch.provenance = provenance;
  std::vector<double> x;
  x.reserve(picked.size() * set.dim);
  for (std::size_t r : picked) {
    auto row = set.row(r);
    x.insert(x.end(), row.begin(), row.end());
    batch.labels.push_back(set.identities[r]);
  }
  batch.inputs = Tensor({picked.size(), set.dim}, std::move(x));
  return batch;
}

inline Batch pk_sample(const SampleSet& set, std::size_t P, std::size_t K, Rng& rng,
                       Provenance provenance = Provenance::new_task) {
  return pk_sample(set, IdentityIndex(set), P, K, rng, provenance);
}

// ---------------------------------------------------------------------------
// Exemplar memory

struct Exemplar {
  std::vector<double> x;
  int identity = 0;
  int source_task = 0;

  bool operator==(const Exemplar&) const = default;
};

class ExemplarMemory {
 public:
  static constexpr std::size_t kPerIdentity = 2;

  explicit ExemplarMemory(std::size_t max_ids_per_task = 32) : max_ids_per_task_(max_ids_per_task) {}

  std::size_t max_ids_per_task() const { return max_ids_per_task_; }
  bool empty() const { return entries_.empty(); }
  std::size_t num_identities() const { return entries_.size(); }
  std::size_t num_samples() const {
    std::size_t n = 0;
    for (const auto& [id, list] : entries_) n += list.size();
    return n;
  }
  const std::map<int, std::vector<Exemplar>>& entries() const { return entries_; }

  // Adds one completed task's selections.
  void add(const std::vector<Exemplar>& additions) {
    std::map<int, std::vector<Exemplar>> incoming;
    for (const auto& e : additions) {
      if (entries_.count(e.identity)) {
        throw Error("exemplar memory: identity " + std::to_string(e.identity) + " already stored");
      }
      incoming[e.identity].push_back(e);
    }
    std::map<int, std::size_t> per_task;
    for (const auto& [id, list] : incoming) {
      if (list.size() > kPerIdentity) {
        throw Error("exemplar memory: more than " + std::to_string(kPerIdentity) + " samples for identity " +
                    std::to_string(id));
      }
      ++per_task[list.front().source_task];
    }
    for (const auto& [task, count] : per_task) {
      if (count > max_ids_per_task_) throw Error("exemplar memory: too many identities from task " + std::to_string(task));
    }
    for (auto& [id, list] : incoming) entries_[id] = std::move(list);
    cache_valid_ = false;
  }

  const SampleSet& samples() const {
    if (!cache_valid_) {
      cache_ = SampleSet{};
      for (const auto& [id, list] : entries_)
        for (const auto& e : list) cache_.push(e.x, e.identity);
      cache_valid_ = true;
    }
    return cache_;
  }

 private:
  std::size_t max_ids_per_task_;
  std::map<int, std::vector<Exemplar>> entries_;
  mutable SampleSet cache_;
  mutable bool cache_valid_ = false;
};

// For each (possibly subsampled) identity: embed its training samples, and keep
// the `per_id` samples farthest from the embedding centroid. Ties keep the
// earlier sample. Identities with at most `per_id` samples are stored whole.
inline std::vector<Exemplar> select_exemplars(const Extractor& model, const TaskDataset& task, std::size_t per_id,
                                              std::size_t max_ids, Rng& rng) {
  if (per_id == 0 || per_id > ExemplarMemory::kPerIdentity) throw Error("select_exemplars: per_id must be 1 or 2");
  if (max_ids == 0) throw Error("select_exemplars: max_ids must be positive");
  IdentityIndex index(task.train);
  std::vector<std::size_t> chosen(index.ids.size());
  std::iota(chosen.begin(), chosen.end(), std::size_t{0});
  if (chosen.size() > max_ids) {
    std::shuffle(chosen.begin(), chosen.end(), rng);
    chosen.resize(max_ids);
    std::sort(chosen.begin(), chosen.end());
  }

  Tensor emb;
  {
    NoGradGuard guard;
    emb = model.forward(task.train.as_tensor());
  }
  const std::size_t d = emb.cols();
  std::vector<Exemplar> out;
  for (std::size_t g : chosen) {
    const auto& rows = index.rows[g];
    std::vector<double> centroid(d, 0.0);
    for (std::size_t r : rows)
      for (std::size_t k = 0; k < d; ++k) centroid[k] += emb.at(r, k);
    for (double& c : centroid) c /= static_cast<double>(rows.size());
    std::vector<std::pair<double, std::size_t>> dist;
    for (std::size_t pos = 0; pos < rows.size(); ++pos) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = emb.at(rows[pos], k) - centroid[k];
        s += diff * diff;
      }
      dist.emplace_back(std::sqrt(s), pos);
    }
    std::stable_sort(dist.begin(), dist.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    const std::size_t keep = std::min(per_id, rows.size());
    std::vector<std::size_t> keep_rows;
    for (std::size_t i = 0; i < keep; ++i) keep_rows.push_back(rows[dist[i].second]);
    std::sort(keep_rows.begin(), keep_rows.end());
    for (std::size_t r : keep_rows) {
      auto x = task.train.row(r);
      out.push_back({std::vector<double>(x.begin(), x.end()), index.ids[g], task.task});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV export / import: one file per split, header
//   task_id,identity_id,split,f0,...,f{D-1}

inline void write_split_csv(std::ostream& os, const std::vector<TaskDataset>& tasks, const std::string& split) {
  if (tasks.empty()) throw Error("write_split_csv: no tasks");
  const SampleSet TaskDataset::*member = split == "train"   ? &TaskDataset::train
                                         : split == "query" ? &TaskDataset::query
                                         : split == "gallery"
                                             ? &TaskDataset::gallery
                                             : throw Error("write_split_csv: unknown split '" + split + "'");
  const std::size_t d = (tasks.front().*member).dim;
  os << "task_id,identity_id,split";
  for (std::size_t k = 0; k < d; ++k) os << ",f" << k;
  os << '\n';
  char buf[32];
  for (const auto& task : tasks) {
    const SampleSet& set = task.*member;
    for (std::size_t i = 0; i < set.size(); ++i) {
      os << task.task << ',' << set.identities[i] << ',' << split;
      for (double v : set.row(i)) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        os << ',' << buf;
      }
      os << '\n';
    }
  }
}

// Merges rows from a split CSV into `tasks` (created on demand, ordered by task id).
inline void read_split_csv(std::istream& is, std::vector<TaskDataset>& tasks) {
  std::string line;
  if (!std::getline(is, line)) throw Error("read_split_csv: empty file");
  if (line.rfind("task_id,identity_id,split", 0) != 0) throw Error("read_split_csv: unexpected header");
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 4) throw Error("read_split_csv: row " + std::to_string(row) + " has too few columns");
    const int task_id = std::stoi(cells[0]);
    const int identity = std::stoi(cells[1]);
    std::vector<double> x;
    for (std::size_t k = 3; k < cells.size(); ++k) x.push_back(std::stod(cells[k]));
    auto it = std::find_if(tasks.begin(), tasks.end(), [&](const TaskDataset& t) { return t.task == task_id; });
    if (it == tasks.end()) {
      TaskDataset fresh;
      fresh.task = task_id;
      tasks.push_back(std::move(fresh));
      std::sort(tasks.begin(), tasks.end(), [](const auto& a, const auto& b) { return a.task < b.task; });
      it = std::find_if(tasks.begin(), tasks.end(), [&](const TaskDataset& t) { return t.task == task_id; });
    }
    const std::string& split = cells[2];
    SampleSet& set = split == "train" ? it->train : split == "query" ? it->query : split == "gallery" ? it->gallery
                     : throw Error("read_split_csv: row " + std::to_string(row) + " has unknown split");
    set.push(x, identity);
  }
}

inline void export_stream(const std::filesystem::path& dir, const std::vector<TaskDataset>& tasks) {
  std::filesystem::create_directories(dir);
  for (const char* split : {"train", "query", "gallery"}) {
    std::ofstream os(dir / (std::string(split) + ".csv"));
    if (!os) throw Error("export_stream: cannot write to " + dir.string());
    write_split_csv(os, tasks, split);
  }
}

inline std::vector<TaskDataset> import_stream(const std::filesystem::path& dir) {
  std::vector<TaskDataset> tasks;
  for (const char* split : {"train", "query", "gallery"}) {
    std::ifstream is(dir / (std::string(split) + ".csv"));
    if (!is) throw Error("import_stream: missing " + (dir / (std::string(split) + ".csv")).string());
    read_split_csv(is, tasks);
  }
  return tasks;
}

}  // namespace krkc
