#pragma once

// Learning objectives: cross-entropy, batch-hard triplet, temperature-scaled
// Jensen-Shannon distillation, and the rehearsal / refreshing composites.

#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "krkc/error.hpp"
#include "krkc/models.hpp"
#include "krkc/tensor.hpp"

namespace krkc {

inline constexpr double kLogEpsilon = 1e-12;

// Mean over rows of -log softmax(logits)[label].
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.dim() != 2) throw Error("cross_entropy: logits must be a matrix");
  if (labels.size() != logits.rows()) {
    throw Error("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                shape_string(logits.shape()));
  }
  std::vector<std::size_t> index(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= logits.cols()) {
      throw Error("cross_entropy: label " + std::to_string(labels[i]) + " out of range [0," +
                  std::to_string(logits.cols()) + ")");
    }
    index[i] = static_cast<std::size_t>(labels[i]);
  }
  return scale(mean(pick(log_softmax(logits), index)), -1.0);
}

// (T^2 / N) * sum_i JS(softmax(s_i/T) || softmax(t_i/T)), natural log.
// The teacher side is always wrapped in stop_gradient.
inline Tensor js_distillation(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
  if (student_logits.shape() != teacher_logits.shape()) {
    throw Error("js_distillation: shape mismatch " + shape_string(student_logits.shape()) + " vs " +
                shape_string(teacher_logits.shape()));
  }
  if (!(temperature > 0.0)) throw Error("js_distillation: temperature must be positive");
  Tensor p = softmax(student_logits, temperature);
  Tensor q = softmax(stop_gradient(teacher_logits), temperature);
  Tensor log_m = log(scale(add(p, q), 0.5), kLogEpsilon);
  Tensor kl_p = mul(p, sub(log(p, kLogEpsilon), log_m));
  Tensor kl_q = mul(q, sub(log(q, kLogEpsilon), log_m));
  const double n = static_cast<double>(student_logits.rows());
  return scale(sum(add(kl_p, kl_q)), 0.5 * temperature * temperature / n);
}

// Per anchor: hardest positive and hardest negative, with their (differentiable)
// Euclidean distances.
struct TripletSet {
  std::vector<std::size_t> anchor;
  std::vector<std::size_t> positive;
  std::vector<std::size_t> negative;
  Tensor dist_ap;  // [n_anchors]
  Tensor dist_an;  // [n_anchors]

  std::size_t size() const { return anchor.size(); }
};

inline void validate_pk_labels(std::span<const int> labels) {
  std::map<int, std::size_t> counts;
  for (int l : labels) ++counts[l];
  if (counts.size() < 2) {
    throw Error("batch_hard_triplets: batch needs at least two identities" +
                (counts.empty() ? std::string() : ", only label " + std::to_string(counts.begin()->first) +
                                                      " present"));
  }
  for (const auto& [label, count] : counts) {
    if (count < 2) throw Error("batch_hard_triplets: label " + std::to_string(label) + " has a single instance");
  }
}

// Batch-hard mining. Ties resolve to the lowest sample index.
inline TripletSet batch_hard_triplets(const Tensor& embeddings, std::span<const int> labels) {
  if (embeddings.dim() != 2 || embeddings.rows() != labels.size()) {
    throw Error("batch_hard_triplets: " + std::to_string(labels.size()) + " labels for embeddings " +
                shape_string(embeddings.shape()));
  }
  validate_pk_labels(labels);
  const std::size_t n = labels.size();
  Tensor dist = sqrt(pairwise_sq_distances(embeddings));
  TripletSet out;
  for (std::size_t a = 0; a < n; ++a) {
    std::size_t best_p = n, best_n = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == a) continue;
      const double d = dist.at(a, j);
      if (labels[j] == labels[a]) {
        if (best_p == n || d > dist.at(a, best_p)) best_p = j;
      } else {
        if (best_n == n || d < dist.at(a, best_n)) best_n = j;
      }
    }
    out.anchor.push_back(a);
    out.positive.push_back(best_p);
    out.negative.push_back(best_n);
  }
  out.dist_ap = gather(dist, out.anchor, out.positive);
  out.dist_an = gather(dist, out.anchor, out.negative);
  return out;
}

// mean_i max(d(a,p) - d(a,n) + margin, 0). Subgradient 0 when the margin is met exactly.
inline Tensor triplet_loss(const TripletSet& triplets, double margin) {
  if (triplets.size() == 0 || !triplets.dist_ap.defined()) throw Error("triplet_loss: empty triplet set");
  if (!(margin >= 0.0)) throw Error("triplet_loss: margin must be non-negative");
  return mean(relu(add_scalar(sub(triplets.dist_ap, triplets.dist_an), margin)));
}

struct LossOptions {
  double temperature = 2.0;
  double margin = 0.3;
  // Distill only the first `distill_classes` logits; 0 means all classes.
  std::size_t distill_classes = 0;
};

// Named components of a composite objective; `loss` carries the graph.
struct LossBreakdown {
  std::string distill_name;  // "anti" (rehearsal), "cali" (refreshing) or empty
  double distill = 0.0;
  double ce = 0.0;
  double trip = 0.0;
  double total = 0.0;
  Tensor loss;
};

namespace detail {

inline Tensor distill_term(const Tensor& student, const Tensor& teacher, const LossOptions& opts) {
  if (opts.distill_classes == 0 || opts.distill_classes >= student.cols()) {
    return js_distillation(student, teacher, opts.temperature);
  }
  return js_distillation(slice_cols(student, 0, opts.distill_classes),
                         slice_cols(teacher, 0, opts.distill_classes), opts.temperature);
}

// ce on new samples + triplet on new batch + triplet on exemplar batch (if any)
// + optional distillation on new samples. Exemplars never enter ce or distillation.
inline LossBreakdown composite(const char* name, const ModelOutput& student_new, const Tensor* teacher_logits,
                               const Tensor& student_exemplar_embeddings, std::span<const int> new_labels,
                               std::span<const int> exemplar_labels, const LossOptions& opts) {
  if (student_exemplar_embeddings.defined() && student_exemplar_embeddings.rows() != student_new.embeddings.rows()) {
    throw Error(std::string(name) + ": exemplar batch size " + std::to_string(student_exemplar_embeddings.rows()) +
                " differs from new batch size " + std::to_string(student_new.embeddings.rows()));
  }
  LossBreakdown out;
  Tensor ce = cross_entropy(student_new.logits, new_labels);
  Tensor trip = triplet_loss(batch_hard_triplets(student_new.embeddings, new_labels), opts.margin);
  if (student_exemplar_embeddings.defined()) {
    trip = add(trip, triplet_loss(batch_hard_triplets(student_exemplar_embeddings, exemplar_labels), opts.margin));
  }
  out.ce = ce.item();
  out.trip = trip.item();
  out.loss = add(ce, trip);
  if (teacher_logits) {
    out.distill_name = name;
    Tensor distill = distill_term(student_new.logits, *teacher_logits, opts);
    out.distill = distill.item();
    out.loss = add(distill, out.loss);
  }
  out.total = out.loss.item();
  return out;
}

}  // namespace detail

// L^w = anti + ce + trip, computed on the working model. `memory_logits_new`
// is the memory model's output on the same new samples and acts as a constant.
inline LossBreakdown rehearsal_loss(const ModelOutput& working_new, const Tensor& memory_logits_new,
                                    const Tensor& working_exemplar_embeddings, std::span<const int> new_labels,
                                    std::span<const int> exemplar_labels, const LossOptions& opts = {}) {
  return detail::composite("anti", working_new, &memory_logits_new, working_exemplar_embeddings, new_labels,
                           exemplar_labels, opts);
}

// L^m = cali + ce + trip: the mirror of rehearsal_loss with the models exchanged.
inline LossBreakdown refreshing_loss(const ModelOutput& memory_new, const Tensor& working_logits_new,
                                     const Tensor& memory_exemplar_embeddings, std::span<const int> new_labels,
                                     std::span<const int> exemplar_labels, const LossOptions& opts = {}) {
  return detail::composite("cali", memory_new, &working_logits_new, memory_exemplar_embeddings, new_labels,
                           exemplar_labels, opts);
}

// ce + trip without a teacher: first task, naive fine-tuning and joint training.
inline LossBreakdown adaptation_loss(const ModelOutput& student_new, const Tensor& student_exemplar_embeddings,
                                     std::span<const int> new_labels, std::span<const int> exemplar_labels,
                                     const LossOptions& opts = {}) {
  return detail::composite("", student_new, nullptr, student_exemplar_embeddings, new_labels, exemplar_labels, opts);
}

}  // namespace krkc
