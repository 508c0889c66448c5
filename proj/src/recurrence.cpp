// SPDX-License-Identifier: Apache-2.0

#include "hgrn/recurrence.hpp"

#include <numeric>

namespace hgrn {

namespace {

void require_same_shape(const Tensor& f, const Tensor& i, const Tensor& o, const char* op) {
  if (f.shape() != i.shape() || f.shape() != o.shape() || f.rank() < 1) {
    throw ShapeError(std::string(op) + ": gate shapes differ: f " + shape_str(f.shape()) + ", i " +
                     shape_str(i.shape()) + ", o " + shape_str(o.shape()));
  }
}

Shape tail(const Shape& s) { return Shape(s.begin() + 1, s.end()); }

Tensor step(const Tensor& x, std::int64_t t, const Shape& slice_shape) {
  return reshape(index_select(x, 0, {t}), slice_shape);
}

Tensor stack_time(const std::vector<Tensor>& steps, const Shape& slice_shape, const Shape& full_shape) {
  if (steps.empty()) return Tensor::zeros(full_shape);
  Shape one = slice_shape;
  one.insert(one.begin(), 1);
  std::vector<Tensor> rows;
  rows.reserve(steps.size());
  for (const auto& s : steps) rows.push_back(reshape(s, one));
  return concat(rows, 0);
}

}  // namespace

ScanResult hgrn1_scan(const Tensor& f, const Tensor& i, const Tensor& o, const Tensor& h0) {
  require_same_shape(f, i, o, "hgrn1_scan");
  const Shape slice = tail(f.shape());
  if (h0.shape() != slice) {
    throw ShapeError("hgrn1_scan: state " + shape_str(h0.shape()) + " does not match gate slice " + shape_str(slice));
  }
  const std::int64_t steps = f.dim(0);
  std::vector<Tensor> ys;
  ys.reserve(static_cast<std::size_t>(steps));
  Tensor h = h0;
  for (std::int64_t t = 0; t < steps; ++t) {
    const Tensor ft = step(f, t, slice);
    h = ft * h + (1.0 - ft) * step(i, t, slice);
    ys.push_back(h * step(o, t, slice));
  }
  return {stack_time(ys, slice, f.shape()), h};
}

ScanResult hgrn2_scan(const Tensor& f, const Tensor& i, const Tensor& o, const Tensor& h0) {
  require_same_shape(f, i, o, "hgrn2_scan");
  const Shape slice = tail(f.shape());
  const std::int64_t dh = slice.back();
  Shape state_shape = slice;
  state_shape.push_back(dh);
  if (h0.shape() != state_shape) {
    throw ShapeError("hgrn2_scan: state " + shape_str(h0.shape()) + " expected " + shape_str(state_shape));
  }
  const auto g_rank = static_cast<std::int64_t>(slice.size()) - 1;

  // The state is carried as [m, G..., j] so the per-column decay f_t[j]
  // broadcasts over the leading row axis.
  std::vector<std::int64_t> to_rows(static_cast<std::size_t>(g_rank + 2));
  to_rows[0] = g_rank;
  std::iota(to_rows.begin() + 1, to_rows.end() - 1, 0);
  to_rows.back() = g_rank + 1;
  std::vector<std::int64_t> from_rows(static_cast<std::size_t>(g_rank + 2));
  std::iota(from_rows.begin(), from_rows.end() - 2, 1);
  from_rows[static_cast<std::size_t>(g_rank)] = 0;
  from_rows.back() = g_rank + 1;
  std::vector<std::int64_t> y_order(static_cast<std::size_t>(g_rank + 1));
  std::iota(y_order.begin(), y_order.end() - 1, 1);
  y_order.back() = 0;

  Shape col_shape = slice;
  col_shape.push_back(1);
  Shape row_shape = slice;
  row_shape.insert(row_shape.end() - 1, 1);

  Tensor h = permute(h0, to_rows);
  const std::int64_t steps = f.dim(0);
  std::vector<Tensor> ys;
  ys.reserve(static_cast<std::size_t>(steps));
  for (std::int64_t t = 0; t < steps; ++t) {
    const Tensor ft = step(f, t, slice);
    const Tensor kt = 1.0 - ft;
    const Tensor update = matmul(reshape(step(i, t, slice), col_shape), reshape(kt, row_shape));
    h = h * ft + permute(update, to_rows);
    ys.push_back(permute(sum_dim(h * step(o, t, slice), -1), y_order));
  }
  return {stack_time(ys, slice, f.shape()), permute(h, from_rows)};
}

ScanResult multihead_hgrn2(const Tensor& f, const Tensor& i, const Tensor& o, std::int64_t heads, const Tensor& h0) {
  require_same_shape(f, i, o, "multihead_hgrn2");
  const std::int64_t d = f.dim(-1);
  if (heads <= 0 || d % heads != 0) {
    throw ConfigError("multihead_hgrn2: model dim " + std::to_string(d) + " not divisible by head count " +
                      std::to_string(heads));
  }
  const std::int64_t dh = d / heads;
  Shape split = f.shape();
  split.back() = heads;
  split.push_back(dh);
  ScanResult r = hgrn2_scan(reshape(f, split), reshape(i, split), reshape(o, split), h0);
  r.y = reshape(r.y, f.shape());
  return r;
}

Tensor zero_matrix_state(const Shape& batch, std::int64_t heads, std::int64_t head_dim) {
  Shape s = batch;
  s.push_back(heads);
  s.push_back(head_dim);
  s.push_back(head_dim);
  return Tensor::zeros(s);
}

}  // namespace hgrn
