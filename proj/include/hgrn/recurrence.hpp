// SPDX-License-Identifier: Apache-2.0
//
// Token-by-token reference evaluation of the gated linear recurrences.
//
// All scans are time-major: axis 0 of f, i, o is time, and any axes between
// time and the feature axis are independent batch/head slices.

#pragma once

#include "hgrn/tensor.hpp"

namespace hgrn {

struct ScanResult {
  Tensor y;
  Tensor state;  // final recurrent state, same layout as the initial state
};

/// Elementwise recurrence:
///   h_t = f_t * h_{t-1} + (1 - f_t) * i_t,   y_t = h_t * o_t.
/// f, i, o: [N, ...]; h0: the trailing shape [...].
ScanResult hgrn1_scan(const Tensor& f, const Tensor& i, const Tensor& o, const Tensor& h0);

/// Matrix-state recurrence with an outer-product input:
///   h_t[m][j] = h_{t-1}[m][j] * f_t[j] + i_t[m] * (1 - f_t[j])
///   y_t[m]    = sum_j h_t[m][j] * o_t[j]   (accumulated in index order)
/// f, i, o: [N, G..., d_h]; h0: [G..., d_h, d_h].
ScanResult hgrn2_scan(const Tensor& f, const Tensor& i, const Tensor& o, const Tensor& h0);

/// Splits the feature axis of f, i, o ([N, G..., d]) into `heads` contiguous
/// slices of width d / heads and runs hgrn2_scan on each.
/// h0: [G..., heads, d_h, d_h].
ScanResult multihead_hgrn2(const Tensor& f, const Tensor& i, const Tensor& o, std::int64_t heads, const Tensor& h0);

/// Zero initial state for multihead_hgrn2 over batch shape G.
Tensor zero_matrix_state(const Shape& batch, std::int64_t heads, std::int64_t head_dim);

}  // namespace hgrn
