#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "cvm/feature_net.hpp"

namespace cvm {

struct GradCheckOptions {
  double epsilon = 1e-3;
  double tolerance = 1e-4;
  // Lower bound on the gradient scale, so an all-zero gradient is compared
  // absolutely.
  double scale_floor = 1e-4;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = true;
};

// rel = max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, floor), the max-norm
// relative error; passes when rel <= tolerance.
GradCheckReport compare_gradients(const std::vector<double>& analytic,
                                  const std::vector<double>& numeric,
                                  const GradCheckOptions& opts);

// Central differences of loss_fn(f(batch)) over every flat parameter, with the
// network evaluated in double precision. loss_fn is called with a
// BasicTensor<double> of embeddings and must return something with a `value`.
template <class LossFn>
std::vector<double> numeric_gradient(const FeatureNet& net, LossFn&& loss_fn, const Tensor& batch,
                                     double epsilon) {
  auto net64 = net.cast<double>();
  const auto batch64 = batch.cast<double>();
  auto params = net64.flat_params();
  std::vector<double> grad(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double saved = params[k];
    params[k] = saved + epsilon;
    net64.set_flat_params(params);
    const double plus = static_cast<double>(loss_fn(infer(net64, batch64)).value);
    params[k] = saved - epsilon;
    net64.set_flat_params(params);
    const double minus = static_cast<double>(loss_fn(infer(net64, batch64)).value);
    params[k] = saved;
    grad[k] = (plus - minus) / (2.0 * epsilon);
  }
  return grad;
}

struct DefaultBackward {
  GradientBundle operator()(const FeatureNet& net, const ForwardTape& tape,
                            const Tensor& grad_out) const {
    return backward(net, tape, grad_out);
  }
};

// Analytic gradient (production float path: forward, loss gradient, backward)
// against double-precision central differences. `backward_fn` is injectable so
// tests can feed a deliberately broken backward.
template <class LossFn, class BackwardFn = DefaultBackward>
GradCheckReport finite_diff_check(const FeatureNet& net, LossFn&& loss_fn, const Tensor& batch,
                                  const GradCheckOptions& opts = {},
                                  BackwardFn backward_fn = {}) {
  auto [emb, tape] = forward(net, batch);
  const auto loss = loss_fn(emb);
  const auto grads = backward_fn(net, tape, loss.grad);
  const auto flat = grads.flat();
  const std::vector<double> analytic(flat.begin(), flat.end());
  const auto numeric = numeric_gradient(net, loss_fn, batch, opts.epsilon);
  return compare_gradients(analytic, numeric, opts);
}

}  // namespace cvm
