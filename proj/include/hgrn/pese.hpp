// SPDX-License-Identifier: Apache-2.0
//
// Structured projections that expand a width-d input to an n x d state, the
// elementwise recurrence run in that expanded space, and exact parameter
// accounting for each projection.

#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hgrn/random.hpp"
#include "hgrn/tensor.hpp"

namespace hgrn {

enum class PeseVariant { naive, lr, glt, glti, krp, kp };

inline constexpr PeseVariant kAllPeseVariants[] = {PeseVariant::naive, PeseVariant::lr,  PeseVariant::glt,
                                                   PeseVariant::glti,  PeseVariant::krp, PeseVariant::kp};

std::string_view to_string(PeseVariant v);
std::optional<PeseVariant> parse_pese_variant(std::string_view name);

/// Low-rank width that keeps d * r * (n + 1) close to d^2.
std::int64_t default_low_rank(std::int64_t d, std::int64_t n);

struct PeseProjection {
  PeseVariant variant = PeseVariant::lr;
  std::int64_t d = 0;
  std::int64_t n = 1;
  std::int64_t r = 0;  // lr only
  // Variant-specific weights, in this order:
  //   naive: W[d, n*d]          lr:  W1[d, r], W2[r, n*d]
  //   glt:   W[n, e, d]         glti: W[n, e, d], M[n, n]
  //   krp:   W[n, d]            kp:  W[d, d], c[n]
  std::vector<std::pair<std::string, Tensor>> weights;

  std::int64_t group_width() const { return d / n; }
};

/// Validates the shape constraints and draws weights from N(0, stddev^2).
/// The glti mix starts at the identity, kp scales at one and krp rows near one.
PeseProjection make_pese_projection(PeseVariant variant, std::int64_t d, std::int64_t n, Rng& rng, double stddev,
                                    std::int64_t r = 0);

/// x[..., d] -> [..., n, d].
Tensor pese_project(const Tensor& x, const PeseProjection& p);

/// Closed-form parameter count of a projection.
std::int64_t count_parameters(PeseVariant variant, std::int64_t d, std::int64_t n, std::int64_t r = 0);
std::int64_t count_parameters(const PeseProjection& p);

/// Sum of weight element counts, for checking count_parameters.
std::int64_t enumerate_parameters(const PeseProjection& p);

/// Elementwise recurrence on every (k, j) channel of the expanded state,
/// output-gated and summed over the expansion axis:
///   h_t = f_t * h_{t-1} + (1 - f_t) * i_t,   y_t[j] = sum_k h_t[k][j] o_t[k][j].
/// f, i, o: [N, B..., n, d]; h0: [B..., n, d]. Returns y: [N, B..., d].
struct PeseScanResult {
  Tensor y;
  Tensor state;
};
PeseScanResult pese_recurrence(const Tensor& f, const Tensor& i, const Tensor& o, const Tensor& h0);

}  // namespace hgrn
