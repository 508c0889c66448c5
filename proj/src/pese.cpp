// SPDX-License-Identifier: Apache-2.0

#include "hgrn/pese.hpp"

#include <cmath>

#include "hgrn/recurrence.hpp"

namespace hgrn {

namespace {

void check_dims(PeseVariant v, std::int64_t d, std::int64_t n, std::int64_t r) {
  if (d <= 0 || n <= 0) {
    throw ConfigError("pese: d and n must be positive, got d=" + std::to_string(d) + " n=" + std::to_string(n));
  }
  if ((v == PeseVariant::glt || v == PeseVariant::glti) && d % n != 0) {
    throw ConfigError("pese " + std::string(to_string(v)) + ": d=" + std::to_string(d) +
                      " not divisible by n=" + std::to_string(n));
  }
  if (v == PeseVariant::lr && r <= 0) throw ConfigError("pese lr: rank must be positive, got " + std::to_string(r));
}

// Moves the expansion axis created by a [rows..., n*d] product into [rows..., n, d].
Tensor split_expansion(const Tensor& flat, const Shape& lead, std::int64_t n, std::int64_t d) {
  Shape s = lead;
  s.push_back(n);
  s.push_back(d);
  return reshape(flat, s);
}

// [M, 1, d] copied n times along axis 1, scaled by column weights [n, 1].
Tensor replicate(const Tensor& rows, const Tensor& scale_col) { return matmul(scale_col, rows); }

}  // namespace

std::string_view to_string(PeseVariant v) {
  switch (v) {
    case PeseVariant::naive: return "naive";
    case PeseVariant::lr: return "lr";
    case PeseVariant::glt: return "glt";
    case PeseVariant::glti: return "glti";
    case PeseVariant::krp: return "krp";
    case PeseVariant::kp: return "kp";
  }
  return "?";
}

std::optional<PeseVariant> parse_pese_variant(std::string_view name) {
  for (auto v : kAllPeseVariants)
    if (to_string(v) == name) return v;
  return std::nullopt;
}

std::int64_t default_low_rank(std::int64_t d, std::int64_t n) {
  return std::max<std::int64_t>(1, std::llround(static_cast<double>(d) / static_cast<double>(n + 1)));
}

PeseProjection make_pese_projection(PeseVariant variant, std::int64_t d, std::int64_t n, Rng& rng, double stddev,
                                    std::int64_t r) {
  if (variant == PeseVariant::lr && r == 0) r = default_low_rank(d, n);
  check_dims(variant, d, n, r);
  PeseProjection p{variant, d, n, variant == PeseVariant::lr ? r : 0, {}};
  auto& w = p.weights;
  switch (variant) {
    case PeseVariant::naive:
      w.emplace_back("w", randn({d, n * d}, rng, stddev, true));
      break;
    case PeseVariant::lr:
      w.emplace_back("w1", randn({d, r}, rng, stddev, true));
      w.emplace_back("w2", randn({r, n * d}, rng, stddev, true));
      break;
    case PeseVariant::glt:
    case PeseVariant::glti: {
      w.emplace_back("w", randn({n, d / n, d}, rng, stddev, true));
      if (variant == PeseVariant::glti) {
        std::vector<double> eye(static_cast<std::size_t>(n * n), 0.0);
        for (std::int64_t k = 0; k < n; ++k) eye[static_cast<std::size_t>(k * n + k)] = 1.0;
        w.emplace_back("mix", Tensor::from({n, n}, std::move(eye), true));
      }
      break;
    }
    case PeseVariant::krp:
    {
      Tensor rows = randn({n, d}, rng, stddev, true);
      for (double& v : rows.mutable_data()) v += 1.0;
      w.emplace_back("w", rows);
    }
      break;
    case PeseVariant::kp:
      w.emplace_back("w", randn({d, d}, rng, stddev, true));
      w.emplace_back("scale", Tensor::full({n}, 1.0, true));
      break;
  }
  return p;
}

Tensor pese_project(const Tensor& x, const PeseProjection& p) {
  if (x.rank() < 1 || x.dim(-1) != p.d) {
    throw ShapeError("pese_project: input " + shape_str(x.shape()) + " does not end in d=" + std::to_string(p.d));
  }
  const Shape lead(x.shape().begin(), x.shape().end() - 1);
  const std::int64_t rows = shape_numel(lead);
  const std::int64_t n = p.n, d = p.d;
  const Tensor x2 = reshape(x, {rows, d});
  const auto& w = p.weights;
  switch (p.variant) {
    case PeseVariant::naive:
      return split_expansion(matmul(x2, w[0].second), lead, n, d);
    case PeseVariant::lr:
      return split_expansion(matmul(matmul(x2, w[0].second), w[1].second), lead, n, d);
    case PeseVariant::glt:
    case PeseVariant::glti: {
      const std::int64_t e = d / n;
      // [rows, n, e] -> [n, rows, e], one e x d map per group, back to [rows, n, d].
      const Tensor groups = permute(reshape(x2, {rows, n, e}), {1, 0, 2});
      Tensor out = permute(matmul(groups, w[0].second), {1, 0, 2});
      if (p.variant == PeseVariant::glti) out = matmul(w[1].second, out);
      return split_expansion(out, lead, n, d);
    }
    case PeseVariant::krp: {
      const Tensor copies = replicate(reshape(x2, {rows, 1, d}), Tensor::full({n, 1}, 1.0));
      return split_expansion(copies * w[0].second, lead, n, d);
    }
    case PeseVariant::kp: {
      const Tensor y = reshape(matmul(x2, w[0].second), {rows, 1, d});
      return split_expansion(replicate(y, reshape(w[1].second, {n, 1})), lead, n, d);
    }
  }
  throw ConfigError("pese_project: unknown variant");
}

std::int64_t count_parameters(PeseVariant variant, std::int64_t d, std::int64_t n, std::int64_t r) {
  if (variant == PeseVariant::lr && r == 0) r = default_low_rank(d, n);
  check_dims(variant, d, n, r);
  switch (variant) {
    case PeseVariant::naive: return n * d * d;
    case PeseVariant::lr: return d * r * (n + 1);
    case PeseVariant::glt: return d * d;
    case PeseVariant::glti: return d * d + n * n;
    case PeseVariant::krp: return n * d;
    case PeseVariant::kp: return d * d + n;
  }
  return 0;
}

std::int64_t count_parameters(const PeseProjection& p) { return count_parameters(p.variant, p.d, p.n, p.r); }

std::int64_t enumerate_parameters(const PeseProjection& p) {
  std::int64_t total = 0;
  for (const auto& [name, t] : p.weights) total += t.numel();
  return total;
}

PeseScanResult pese_recurrence(const Tensor& f, const Tensor& i, const Tensor& o, const Tensor& h0) {
  if (f.rank() < 3) throw ShapeError("pese_recurrence: expected [N, ..., n, d], got " + shape_str(f.shape()));
  const ScanResult r = hgrn1_scan(f, i, o, h0);
  return {sum_dim(r.y, -2), r.state};
}

}  // namespace hgrn
