// SPDX-License-Identifier: Apache-2.0

#include "hgrn/gating.hpp"

namespace hgrn {

namespace {

Tensor project(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::int64_t d_in = x.dim(-1);
  if (w.rank() != 2 || w.dim(0) != d_in || b.rank() != 1 || b.dim(0) != w.dim(1)) {
    throw ShapeError("project_gates: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(w.shape()) + " / bias " + shape_str(b.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  const Tensor flat = reshape(x, {x.numel() / d_in, d_in});
  return reshape(matmul(flat, w) + b, out_shape);
}

}  // namespace

Tensor compute_lower_bounds(const Tensor& gamma) {
  if (gamma.rank() != 2 || gamma.dim(0) < 1) {
    throw ShapeError("compute_lower_bounds: expected L x m with L >= 1, got " + shape_str(gamma.shape()));
  }
  const Tensor cumulative = cumsum_dim0(softmax_dim0(gamma));
  return cumulative - index_select(cumulative, 0, {0});
}

GateBundle project_gates(const Tensor& x, const GateParams& params, OutputGate output_gate) {
  GateBundle out;
  out.g_raw = sigmoid(project(x, params.forget_w, params.forget_b));
  out.input = silu(project(x, params.input_w, params.input_b));
  Tensor o = project(x, params.output_w, params.output_b);
  out.output = output_gate == OutputGate::sigmoid ? sigmoid(o) : o;
  return out;
}

Tensor apply_lower_bound(const Tensor& g_raw, const Tensor& beta_layer) {
  if (beta_layer.rank() != 1 || g_raw.rank() < 1 || g_raw.dim(-1) != beta_layer.dim(0)) {
    throw ShapeError("apply_lower_bound: gate " + shape_str(g_raw.shape()) + " vs bound " +
                     shape_str(beta_layer.shape()));
  }
  return beta_layer + (1.0 - beta_layer) * g_raw;
}

Tensor lower_bound_row(const Tensor& beta, std::int64_t layer) {
  return reshape(index_select(beta, 0, {layer}), {beta.dim(1)});
}

}  // namespace hgrn
