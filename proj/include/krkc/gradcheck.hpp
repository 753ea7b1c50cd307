#pragma once

#include <cmath>
#include <functional>
#include <span>

#include "krkc/error.hpp"
#include "krkc/tensor.hpp"

namespace krkc {

// Largest relative disagreement between backward() and central differences:
//   max_k |analytic_k - numeric_k| / (|numeric_k| + floor)
// `f` must rebuild its graph from the current parameter values on every call.
inline double finite_difference_check(const std::function<Tensor()>& f, std::span<Tensor> params, double h = 1e-5,
                                      double floor = 1e-6) {
  if (!(h > 0.0 && h <= 1e-2)) throw Error("finite_difference_check: step must lie in (0, 1e-2]");
  for (auto& p : params) p.clear_grad();
  Tensor loss = f();
  if (!std::isfinite(loss.item())) throw Error("finite_difference_check: non-finite objective");
  const bool has_graph = loss.requires_grad();
  if (has_graph) loss.backward();

  double worst = 0.0;
  for (auto& p : params) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) analytic.assign(p.grad().begin(), p.grad().end());
    auto w = p.mutable_data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double saved = w[k];
      double fp, fm;
      {
        NoGradGuard guard;
        w[k] = saved + h;
        fp = f().item();
        w[k] = saved - h;
        fm = f().item();
      }
      w[k] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) throw Error("finite_difference_check: non-finite objective");
      const double numeric = (fp - fm) / (2.0 * h);
      worst = std::max(worst, std::abs(analytic[k] - numeric) / (std::abs(numeric) + floor));
    }
    p.clear_grad();
  }
  return worst;
}

}  // namespace krkc
