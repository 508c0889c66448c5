// SPDX-License-Identifier: Apache-2.0
//
// Gate projections and the cross-layer forget-gate lower bound.

#pragma once

#include "hgrn/tensor.hpp"

namespace hgrn {

enum class OutputGate { sigmoid, none };

/// Dense gate projections. Weights are stored input-major (d_in x d_out) so a
/// row-vector batch x maps as x * W.
struct GateParams {
  Tensor forget_w, input_w, output_w;  // U, V, W
  Tensor forget_b, input_b, output_b;  // b_u, b_v, b_w
};

struct GateBundle {
  Tensor g_raw;  // sigmoid forget gate before the lower bound
  Tensor input;  // SiLU input vector
  Tensor output; // output gate
  Tensor forget; // lower-bounded forget gate; undefined until apply_lower_bound
};

/// Lower bounds from a learnable L x m matrix: cumsum of a softmax over the
/// layer axis, shifted so layer 0 has bound zero. Rows are non-decreasing
/// and every entry lies in [0, 1).
Tensor compute_lower_bounds(const Tensor& gamma);

/// Projects x[..., d_in] through the three gate maps.
GateBundle project_gates(const Tensor& x, const GateParams& params, OutputGate output_gate = OutputGate::sigmoid);

/// f = beta + (1 - beta) * g_raw, with beta broadcast over every leading axis.
Tensor apply_lower_bound(const Tensor& g_raw, const Tensor& beta_layer);

/// Row `layer` of a lower-bound table as a rank-1 tensor.
Tensor lower_bound_row(const Tensor& beta, std::int64_t layer);

}  // namespace hgrn
