#pragma once

// Open-set retrieval scoring (mAP, CMC / Rank-1) and lifelong metrics over the
// accuracy matrix: average incremental accuracy, backward and forward transfer.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "krkc/data.hpp"
#include "krkc/error.hpp"
#include "krkc/models.hpp"
#include "krkc/tensor.hpp"

namespace krkc {

// Embeds `samples` with `working` and, when `fuse` is set, concatenates the
// memory embedding. Each block is L2-normalised before concatenation.
inline Tensor extract_features(const Extractor& working, const Extractor* memory, const SampleSet& samples,
                               bool fuse) {
  NoGradGuard guard;
  Tensor x = samples.as_tensor();
  Tensor fw = l2_normalize_rows(working.forward(x));
  if (!fuse) return fw;
  if (!memory) throw Error("extract_features: fusion requested without a memory model");
  if (memory->architecture() != working.architecture()) {
    throw Error("extract_features: working and memory extractors differ in architecture");
  }
  return concat_cols(fw, l2_normalize_rows(memory->forward(x)));
}

struct RetrievalResult {
  std::vector<std::vector<std::size_t>> rankings;  // per query, gallery indices nearest first
  std::vector<double> average_precision;
  std::vector<double> cmc;  // cmc[k] = fraction of queries with a match within the top k+1
  double mean_ap = 0.0;
  double rank1 = 0.0;
};

// Euclidean ranking of the gallery for every query (ties: lower gallery index
// first). With `exclude_self`, query i and gallery i are the same sample and
// that pair is dropped.
inline RetrievalResult retrieve_and_score(const Tensor& query, const Tensor& gallery, std::span<const int> query_ids,
                                          std::span<const int> gallery_ids, bool exclude_self = false) {
  if (query.dim() != 2 || gallery.dim() != 2 || query.cols() != gallery.cols()) {
    throw Error("retrieve_and_score: feature shapes " + shape_string(query.shape()) + " and " +
                shape_string(gallery.shape()) + " are incompatible");
  }
  if (query.rows() != query_ids.size() || gallery.rows() != gallery_ids.size()) {
    throw Error("retrieve_and_score: id count does not match feature rows");
  }
  if (query.rows() == 0) throw Error("retrieve_and_score: no queries");
  const std::size_t nq = query.rows(), ng = gallery.rows(), d = query.cols();

  RetrievalResult out;
  out.cmc.assign(ng, 0.0);
  std::vector<double> dist(ng);
  for (std::size_t q = 0; q < nq; ++q) {
    std::vector<std::size_t> order;
    for (std::size_t g = 0; g < ng; ++g) {
      if (exclude_self && g == q) continue;
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = query.at(q, k) - gallery.at(g, k);
        s += diff * diff;
      }
      dist[g] = s;
      order.push_back(g);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });

    std::size_t hits = 0;
    double precision_sum = 0.0;
    std::size_t first_hit = order.size();
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (gallery_ids[order[r]] != query_ids[q]) continue;
      ++hits;
      precision_sum += static_cast<double>(hits) / static_cast<double>(r + 1);
      if (first_hit == order.size()) first_hit = r;
    }
    if (hits == 0) {
      throw Error("retrieve_and_score: query identity " + std::to_string(query_ids[q]) + " absent from gallery");
    }
    out.average_precision.push_back(precision_sum / static_cast<double>(hits));
    for (std::size_t r = first_hit; r < ng; ++r) out.cmc[r] += 1.0;
    out.rankings.push_back(std::move(order));
  }
  for (double& c : out.cmc) c /= static_cast<double>(nq);
  double ap_sum = 0.0;
  for (double ap : out.average_precision) ap_sum += ap;
  out.mean_ap = ap_sum / static_cast<double>(nq);
  out.rank1 = out.cmc.empty() ? 0.0 : out.cmc[0];
  return out;
}

// The models used to score retrieval after a task: the working extractor alone,
// or the fused working + memory pair.
struct RetrievalModel {
  Extractor working;
  Extractor memory;
  bool fuse = false;
};

inline RetrievalResult evaluate_task(const RetrievalModel& model, const TaskDataset& task) {
  const Extractor* mem = model.fuse ? &model.memory : nullptr;
  Tensor q = extract_features(model.working, mem, task.query, model.fuse);
  Tensor g = extract_features(model.working, mem, task.gallery, model.fuse);
  return retrieve_and_score(q, g, task.query.identities, task.gallery.identities);
}

// ---------------------------------------------------------------------------
// Lifelong metrics. Steps and tasks are 1-based in the formulas; the matrix
// stores row i-1 for step i, holding entries for tasks 1..i.

class AccuracyMatrix {
 public:
  std::size_t steps() const { return rows_.size(); }

  void append_row(std::vector<double> row) {
    if (row.size() != rows_.size() + 1) {
      throw Error("accuracy matrix: step " + std::to_string(rows_.size() + 1) + " needs " +
                  std::to_string(rows_.size() + 1) + " entries, got " + std::to_string(row.size()));
    }
    for (double v : row) {
      if (!(v >= 0.0 && v <= 1.0)) throw Error("accuracy matrix: entry outside [0,1]");
    }
    rows_.push_back(std::move(row));
  }

  // R_{i,j}, 1-based, j <= i.
  double at(std::size_t i, std::size_t j) const {
    if (i < 1 || i > rows_.size() || j < 1 || j > i) {
      throw Error("accuracy matrix: no entry R[" + std::to_string(i) + "][" + std::to_string(j) + "]");
    }
    return rows_[i - 1][j - 1];
  }

  const std::vector<std::vector<double>>& rows() const { return rows_; }

  static AccuracyMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    AccuracyMatrix m;
    for (const auto& r : rows) m.append_row(r);
    return m;
  }

 private:
  std::vector<std::vector<double>> rows_;
};

// Mean of the final row.
inline double average_incremental_accuracy(const AccuracyMatrix& r) {
  if (r.steps() == 0) throw Error("average_incremental_accuracy: empty accuracy matrix");
  const std::size_t t = r.steps();
  double s = 0.0;
  for (std::size_t j = 1; j <= t; ++j) s += r.at(t, j);
  return s / static_cast<double>(t);
}

enum class BwtMode {
  paper,      // (1/(T-1)) sum_{i=1}^{T-1} (1/i) sum_{j=1}^{i} (R_{i,j} - R_{j,j})
  final_row,  // (1/(T-1)) sum_{j=1}^{T-1} (R_{T,j} - R_{j,j})
};

inline double backward_transfer(const AccuracyMatrix& r, BwtMode mode = BwtMode::paper) {
  const std::size_t t = r.steps();
  if (t < 2) throw Error("backward_transfer: needs at least two steps");
  double total = 0.0;
  if (mode == BwtMode::paper) {
    for (std::size_t i = 1; i <= t - 1; ++i) {
      double inner = 0.0;
      for (std::size_t j = 1; j <= i; ++j) inner += r.at(i, j) - r.at(j, j);
      total += inner / static_cast<double>(i);
    }
  } else {
    for (std::size_t j = 1; j <= t - 1; ++j) total += r.at(t, j) - r.at(j, j);
  }
  return total / static_cast<double>(t - 1);
}

// `reference[i-1]` is the accuracy on task i of a model trained on task i alone
// from random initialisation; entries for i >= 2 are required.
inline double forward_transfer(const AccuracyMatrix& r, std::span<const double> reference) {
  const std::size_t t = r.steps();
  if (t < 2) throw Error("forward_transfer: needs at least two steps");
  if (reference.size() < t) throw Error("forward_transfer: missing reference accuracies");
  double total = 0.0;
  for (std::size_t i = 2; i <= t; ++i) {
    if (!std::isfinite(reference[i - 1])) {
      throw Error("forward_transfer: missing reference accuracy for task " + std::to_string(i));
    }
    total += r.at(i, i) - reference[i - 1];
  }
  return total / static_cast<double>(t - 1);
}

struct MetricsReport {
  AccuracyMatrix map;
  AccuracyMatrix rank1;
  std::vector<double> reference_map;    // R̄_{i,i}, NaN when not computed
  std::vector<double> reference_rank1;

  double avg_incremental_map = 0.0;
  double avg_incremental_rank1 = 0.0;
  // Transfer metrics on Rank-1 (headline) and on mAP.
  double bwt_paper = 0.0;
  double bwt_final_row = 0.0;
  double fwt = std::numeric_limits<double>::quiet_NaN();
  double bwt_paper_map = 0.0;
  double bwt_final_row_map = 0.0;
  double fwt_map = std::numeric_limits<double>::quiet_NaN();
};

inline void finalize_metrics(MetricsReport& m) {
  m.avg_incremental_map = average_incremental_accuracy(m.map);
  m.avg_incremental_rank1 = average_incremental_accuracy(m.rank1);
  if (m.rank1.steps() < 2) return;
  m.bwt_paper = backward_transfer(m.rank1, BwtMode::paper);
  m.bwt_final_row = backward_transfer(m.rank1, BwtMode::final_row);
  m.bwt_paper_map = backward_transfer(m.map, BwtMode::paper);
  m.bwt_final_row_map = backward_transfer(m.map, BwtMode::final_row);
  // Forward transfer stays NaN when references were not computed.
  auto known = [&](const std::vector<double>& ref) {
    if (ref.size() < m.rank1.steps()) return false;
    for (std::size_t j = 1; j < m.rank1.steps(); ++j)
      if (std::isnan(ref[j])) return false;
    return true;
  };
  if (known(m.reference_rank1) && known(m.reference_map)) {
    m.fwt = forward_transfer(m.rank1, m.reference_rank1);
    m.fwt_map = forward_transfer(m.map, m.reference_map);
  }
}

}  // namespace krkc
