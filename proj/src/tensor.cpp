// SPDX-License-Identifier: Apache-2.0

#include "hgrn/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "hgrn/parallel.hpp"

namespace hgrn {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using Arr = Eigen::Map<Eigen::ArrayXd>;
using ConstArr = Eigen::Map<const Eigen::ArrayXd>;

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> data) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  return node;
}

// Attaches a backward rule when any input participates in differentiation.
Tensor finish(std::shared_ptr<Node> out, std::vector<std::shared_ptr<Node>> inputs,
              std::function<void(Node&)> rule) {
  const bool track = g_grad_enabled &&
                     std::any_of(inputs.begin(), inputs.end(), [](const auto& n) { return n->requires_grad; });
  if (track) {
    out->requires_grad = true;
    out->inputs = std::move(inputs);
    out->backward = std::move(rule);
  }
  return Tensor(std::move(out));
}

std::int64_t normalize_axis(std::int64_t axis, std::int64_t rank, const char* op) {
  const std::int64_t a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    std::ostringstream msg;
    msg << op << ": axis " << axis << " out of range for rank " << rank;
    throw ShapeError(msg.str());
  }
  return a;
}

// Splits a shape around an axis into (outer, extent, inner) element counts.
struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t extent = 1;
  std::int64_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::int64_t axis) {
  AxisSplit r;
  for (std::int64_t k = 0; k < axis; ++k) r.outer *= s[static_cast<std::size_t>(k)];
  r.extent = s[static_cast<std::size_t>(axis)];
  for (std::size_t k = static_cast<std::size_t>(axis) + 1; k < s.size(); ++k) r.inner *= s[k];
  return r;
}

Shape strip_leading_ones(const Shape& s) {
  std::size_t k = 0;
  while (k < s.size() && s[k] == 1) ++k;
  return Shape(s.begin() + static_cast<std::ptrdiff_t>(k), s.end());
}

bool is_suffix(const Shape& suffix, const Shape& full) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.begin(), suffix.end(), full.end() - static_cast<std::ptrdiff_t>(suffix.size()));
}

struct Broadcast {
  Shape out;
  std::int64_t outer = 1;
  std::int64_t inner = 1;
  bool a_small = false;
  bool b_small = false;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  const std::int64_t na = shape_numel(a);
  const std::int64_t nb = shape_numel(b);
  if (a == b) {
    p.out = a;
    p.inner = na;
    return p;
  }
  const Shape sa = strip_leading_ones(a);
  const Shape sb = strip_leading_ones(b);
  if (nb <= na && is_suffix(sb, a)) {
    p.out = (na == nb && b.size() > a.size()) ? b : a;
    p.inner = nb;
    p.outer = nb == 0 ? 0 : na / nb;
    p.b_small = na != nb;
    return p;
  }
  if (na < nb && is_suffix(sa, b)) {
    p.out = b;
    p.inner = na;
    p.outer = na == 0 ? 0 : nb / na;
    p.a_small = true;
    return p;
  }
  std::ostringstream msg;
  msg << op << ": shapes " << shape_str(a) << " and " << shape_str(b) << " are not broadcastable";
  throw ShapeError(msg.str());
}

// Adds src (shaped like the broadcast output) into dst, reducing the outer
// axis when dst is the small operand.
void accumulate(std::span<double> dst, const std::vector<double>& src, const Broadcast& p, bool small) {
  if (!small) {
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
    return;
  }
  for (std::int64_t o = 0; o < p.outer; ++o) {
    const double* row = src.data() + o * p.inner;
    for (std::int64_t k = 0; k < p.inner; ++k) dst[static_cast<std::size_t>(k)] += row[k];
  }
}

template <typename Op>
std::vector<double> broadcast_apply(const std::vector<double>& a, const std::vector<double>& b, const Broadcast& p,
                                    Op op) {
  std::vector<double> out(static_cast<std::size_t>(p.outer * p.inner));
  for (std::int64_t o = 0; o < p.outer; ++o) {
    const double* pa = a.data() + (p.a_small ? 0 : o * p.inner);
    const double* pb = b.data() + (p.b_small ? 0 : o * p.inner);
    double* po = out.data() + o * p.inner;
    for (std::int64_t k = 0; k < p.inner; ++k) po[k] = op(pa[k], pb[k]);
  }
  return out;
}

Shape batch_prefix(const Shape& s) { return Shape(s.begin(), s.end() - 2); }

// Products are evaluated into an owned (aligned) matrix and then copied, so the
// kernel's vectorization split never depends on the address of `dst`.
template <typename Product>
void assign_product(double* dst, const Product& product) {
  const RowMat value = product;
  std::copy(value.data(), value.data() + value.size(), dst);
}

template <typename Product>
void add_product(double* dst, const Product& product) {
  const RowMat value = product;
  const double* src = value.data();
  for (Eigen::Index k = 0; k < value.size(); ++k) dst[k] += src[k];
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream out;
  out << '[';
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (k) out << ", ";
    out << s[k];
  }
  out << ']';
  return out.str();
}

std::int64_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

Node::~Node() {
  // Release long producer chains iteratively instead of through nested
  // destructor calls.
  std::vector<std::shared_ptr<Node>> pending = std::move(inputs);
  while (!pending.empty()) {
    std::shared_ptr<Node> n = std::move(pending.back());
    pending.pop_back();
    if (n && n.use_count() == 1) {
      for (auto& in : n->inputs) pending.push_back(std::move(in));
      n->inputs.clear();
    }
  }
}

std::span<double> Node::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

// ---- Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (auto d : shape)
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  auto node = make_node(std::move(shape), std::vector<double>(n, value));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  auto node = make_node(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

std::int64_t Tensor::dim(std::int64_t axis) const {
  return node_->shape[static_cast<std::size_t>(normalize_axis(axis, rank(), "dim"))];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  if (static_cast<std::int64_t>(index.size()) != rank()) throw ShapeError("at: index rank mismatch for " + shape_str(shape()));
  std::int64_t flat = 0;
  std::size_t k = 0;
  for (auto i : index) {
    const auto extent = node_->shape[k++];
    if (i < 0 || i >= extent) throw ShapeError("at: index out of range for " + shape_str(shape()));
    flat = flat * extent + i;
  }
  return node_->data[static_cast<std::size_t>(flat)];
}

void Tensor::zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

Tensor Tensor::detach() const { return Tensor(make_node(node_->shape, node_->data)); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- linear algebra -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::int64_t m = sa[sa.size() - 2];
  const std::int64_t k = sa.back();
  const std::int64_t k2 = sb[sb.size() - 2];
  const std::int64_t p = sb.back();
  const bool shared_b = sb.size() == 2;
  const bool shared_a = !shared_b && sa.size() == 2;
  if (k != k2 || (!shared_a && !shared_b && batch_prefix(sa) != batch_prefix(sb))) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  Shape out_shape = shared_a ? batch_prefix(sb) : batch_prefix(sa);
  out_shape.push_back(m);
  out_shape.push_back(p);
  const std::int64_t batch = shape_numel(out_shape) / std::max<std::int64_t>(1, m * p);
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)), 0.0);

  const double* pa = a.data().data();
  const double* pb = b.data().data();
  if (shared_b) {
    assign_product(out.data(), ConstMap(pa, batch * m, k) * ConstMap(pb, k, p));
  } else {
    parallel_for(batch, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t t = lo; t < hi; ++t) {
        const double* ab = shared_a ? pa : pa + t * m * k;
        assign_product(out.data() + t * m * p, ConstMap(ab, m, k) * ConstMap(pb + t * k * p, k, p));
      }
    });
  }

  return finish(make_node(std::move(out_shape), std::move(out)), {a.node_ptr(), b.node_ptr()},
                [m, k, p, batch, shared_a, shared_b](Node& self) {
                  Node& na = *self.inputs[0];
                  Node& nb = *self.inputs[1];
                  const double* g = self.grad.data();
                  if (shared_b) {
                    ConstMap gm(g, batch * m, p);
                    if (na.requires_grad)
                      add_product(na.ensure_grad().data(), gm * ConstMap(nb.data.data(), k, p).transpose());
                    if (nb.requires_grad)
                      add_product(nb.ensure_grad().data(), ConstMap(na.data.data(), batch * m, k).transpose() * gm);
                    return;
                  }
                  double* ga = na.requires_grad ? na.ensure_grad().data() : nullptr;
                  double* gb = nb.requires_grad ? nb.ensure_grad().data() : nullptr;
                  if (shared_a) {
                    for (std::int64_t t = 0; t < batch; ++t) {
                      ConstMap gm(g + t * m * p, m, p);
                      if (ga) add_product(ga, gm * ConstMap(nb.data.data() + t * k * p, k, p).transpose());
                      if (gb) add_product(gb + t * k * p, ConstMap(na.data.data(), m, k).transpose() * gm);
                    }
                    return;
                  }
                  parallel_for(batch, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t t = lo; t < hi; ++t) {
                      ConstMap gm(g + t * m * p, m, p);
                      if (ga) add_product(ga + t * m * k, gm * ConstMap(nb.data.data() + t * k * p, k, p).transpose());
                      if (gb) add_product(gb + t * k * p, ConstMap(na.data.data() + t * m * k, m, k).transpose() * gm);
                    }
                  });
                });
}

Tensor outer(const Tensor& u, const Tensor& v) {
  if (u.rank() != 1 || v.rank() != 1) {
    throw ShapeError("outer: expected rank-1 operands, got " + shape_str(u.shape()) + " and " + shape_str(v.shape()));
  }
  const std::int64_t d1 = u.numel();
  const std::int64_t d2 = v.numel();
  std::vector<double> out(static_cast<std::size_t>(d1 * d2));
  for (std::int64_t r = 0; r < d1; ++r)
    for (std::int64_t c = 0; c < d2; ++c) out[static_cast<std::size_t>(r * d2 + c)] = u.data()[r] * v.data()[c];
  return finish(make_node({d1, d2}, std::move(out)), {u.node_ptr(), v.node_ptr()}, [d1, d2](Node& self) {
    Node& nu = *self.inputs[0];
    Node& nv = *self.inputs[1];
    const double* g = self.grad.data();
    if (nu.requires_grad) {
      auto gu = nu.ensure_grad();
      for (std::int64_t r = 0; r < d1; ++r) {
        double acc = 0.0;
        for (std::int64_t c = 0; c < d2; ++c) acc += g[r * d2 + c] * nv.data[static_cast<std::size_t>(c)];
        gu[static_cast<std::size_t>(r)] += acc;
      }
    }
    if (nv.requires_grad) {
      auto gv = nv.ensure_grad();
      for (std::int64_t r = 0; r < d1; ++r)
        for (std::int64_t c = 0; c < d2; ++c) gv[static_cast<std::size_t>(c)] += g[r * d2 + c] * nu.data[static_cast<std::size_t>(r)];
    }
  });
}

// ---- elementwise -----------------------------------------------------------------

Tensor elementwise(const Tensor& a, const Tensor& b, Binary kind) {
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  const Broadcast plan = plan_broadcast(a.shape(), b.shape(), names[static_cast<int>(kind)]);
  const auto& da = a.node()->data;
  const auto& db = b.node()->data;
  std::vector<double> out;
  switch (kind) {
    case Binary::add:
      out = broadcast_apply(da, db, plan, [](double x, double y) { return x + y; });
      break;
    case Binary::sub:
      out = broadcast_apply(da, db, plan, [](double x, double y) { return x - y; });
      break;
    case Binary::mul:
      out = broadcast_apply(da, db, plan, [](double x, double y) { return x * y; });
      break;
    case Binary::div:
      for (double y : db)
        if (!(std::abs(y) >= 1e-300)) throw DomainError("div: divisor magnitude below 1e-300 (degenerate input)");
      out = broadcast_apply(da, db, plan, [](double x, double y) { return x / y; });
      break;
  }
  Shape out_shape = plan.out;
  return finish(make_node(std::move(out_shape), std::move(out)), {a.node_ptr(), b.node_ptr()},
                [plan, kind](Node& self) {
                  Node& na = *self.inputs[0];
                  Node& nb = *self.inputs[1];
                  const auto& g = self.grad;
                  // dst += g * factor(a, b), reduced over the outer axis when dst is small.
                  auto push = [&](Node& target, bool small, auto factor) {
                    if (!target.requires_grad) return;
                    double* dst = target.ensure_grad().data();
                    for (std::int64_t o = 0; o < plan.outer; ++o) {
                      const double* pa = na.data.data() + (plan.a_small ? 0 : o * plan.inner);
                      const double* pb = nb.data.data() + (plan.b_small ? 0 : o * plan.inner);
                      const double* pg = g.data() + o * plan.inner;
                      double* pd = dst + (small ? 0 : o * plan.inner);
                      for (std::int64_t k = 0; k < plan.inner; ++k) pd[k] += pg[k] * factor(pa[k], pb[k]);
                    }
                  };
                  switch (kind) {
                    case Binary::add:
                      if (na.requires_grad) accumulate(na.ensure_grad(), g, plan, plan.a_small);
                      if (nb.requires_grad) accumulate(nb.ensure_grad(), g, plan, plan.b_small);
                      break;
                    case Binary::sub:
                      if (na.requires_grad) accumulate(na.ensure_grad(), g, plan, plan.a_small);
                      push(nb, plan.b_small, [](double, double) { return -1.0; });
                      break;
                    case Binary::mul:
                      push(na, plan.a_small, [](double, double y) { return y; });
                      push(nb, plan.b_small, [](double x, double) { return x; });
                      break;
                    case Binary::div:
                      push(na, plan.a_small, [](double, double y) { return 1.0 / y; });
                      push(nb, plan.b_small, [](double x, double y) { return -x / (y * y); });
                      break;
                  }
                });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, Binary::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, Binary::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, Binary::mul); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(a, b, Binary::div); }

Tensor activation(const Tensor& x, Activation kind) {
  const auto& in = x.node()->data;
  const auto n = static_cast<Eigen::Index>(in.size());
  std::vector<double> out(in.size());
  // Transcendentals are evaluated into aligned temporaries: Eigen peels the
  // unaligned head of a mapped destination with the scalar kernel, which would
  // make results depend on the allocation address.
  ConstArr xin(in.data(), n);
  Arr y(out.data(), n);
  switch (kind) {
    case Activation::sigmoid:
      y = 1.0 / (1.0 + Eigen::ArrayXd((-xin).exp()));
      return finish(make_node(x.shape(), std::move(out)), {x.node_ptr()}, [](Node& self) {
        const auto m = static_cast<Eigen::Index>(self.data.size());
        ConstArr s(self.data.data(), m), gy(self.grad.data(), m);
        Arr(self.inputs[0]->ensure_grad().data(), m) += gy * s * (1.0 - s);
      });
    case Activation::silu:
      y = xin / (1.0 + Eigen::ArrayXd((-xin).exp()));
      return finish(make_node(x.shape(), std::move(out)), {x.node_ptr()}, [](Node& self) {
        Node& src = *self.inputs[0];
        const auto m = static_cast<Eigen::Index>(self.data.size());
        ConstArr v(src.data.data(), m), gy(self.grad.data(), m);
        const Eigen::ArrayXd s = 1.0 / (1.0 + (-v).exp());
        Arr(src.ensure_grad().data(), m) += gy * s * (1.0 + v * (1.0 - s));
      });
    case Activation::exp:
      y = Eigen::ArrayXd(xin.exp());
      return finish(make_node(x.shape(), std::move(out)), {x.node_ptr()}, [](Node& self) {
        const auto m = static_cast<Eigen::Index>(self.data.size());
        Arr(self.inputs[0]->ensure_grad().data(), m) += ConstArr(self.grad.data(), m) * ConstArr(self.data.data(), m);
      });
    case Activation::log:
      for (double v : in)
        if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
      y = Eigen::ArrayXd(xin.log());
      return finish(make_node(x.shape(), std::move(out)), {x.node_ptr()}, [](Node& self) {
        Node& src = *self.inputs[0];
        const auto m = static_cast<Eigen::Index>(self.data.size());
        Arr(src.ensure_grad().data(), m) += ConstArr(self.grad.data(), m) / ConstArr(src.data.data(), m);
      });
    case Activation::softmax_dim0: {
      if (x.rank() < 1) throw ShapeError("softmax_dim0: rank-0 input");
      const std::int64_t rows = x.dim(0);
      const std::int64_t cols = rows == 0 ? 0 : x.numel() / rows;
      for (std::int64_t c = 0; c < cols; ++c) {
        double peak = -INFINITY;
        for (std::int64_t r = 0; r < rows; ++r) peak = std::max(peak, in[static_cast<std::size_t>(r * cols + c)]);
        double total = 0.0;
        for (std::int64_t r = 0; r < rows; ++r) {
          const auto idx = static_cast<std::size_t>(r * cols + c);
          out[idx] = std::exp(in[idx] - peak);
          total += out[idx];
        }
        for (std::int64_t r = 0; r < rows; ++r) out[static_cast<std::size_t>(r * cols + c)] /= total;
      }
      return finish(make_node(x.shape(), std::move(out)), {x.node_ptr()}, [rows, cols](Node& self) {
        auto g = self.inputs[0]->ensure_grad();
        for (std::int64_t c = 0; c < cols; ++c) {
          double dot = 0.0;
          for (std::int64_t r = 0; r < rows; ++r) {
            const auto idx = static_cast<std::size_t>(r * cols + c);
            dot += self.grad[idx] * self.data[idx];
          }
          for (std::int64_t r = 0; r < rows; ++r) {
            const auto idx = static_cast<std::size_t>(r * cols + c);
            g[idx] += self.data[idx] * (self.grad[idx] - dot);
          }
        }
      });
    }
  }
  throw std::logic_error("activation: unknown kind");
}

Tensor sigmoid(const Tensor& x) { return activation(x, Activation::sigmoid); }
Tensor silu(const Tensor& x) { return activation(x, Activation::silu); }
Tensor softmax_dim0(const Tensor& x) { return activation(x, Activation::softmax_dim0); }
Tensor exp(const Tensor& x) { return activation(x, Activation::exp); }
Tensor log(const Tensor& x) { return activation(x, Activation::log); }

// ---- reductions and scans ------------------------------------------------------------

Tensor cumsum_dim0(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("cumsum_dim0: rank-0 input");
  const std::int64_t rows = x.dim(0);
  const std::int64_t cols = rows == 0 ? 0 : x.numel() / rows;
  std::vector<double> out(x.node()->data);
  for (std::int64_t r = 1; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c)
      out[static_cast<std::size_t>(r * cols + c)] += out[static_cast<std::size_t>((r - 1) * cols + c)];
  return finish(make_node(x.shape(), std::move(out)), {x.node_ptr()}, [rows, cols](Node& self) {
    auto g = self.inputs[0]->ensure_grad();
    std::vector<double> running(static_cast<std::size_t>(cols), 0.0);
    for (std::int64_t r = rows - 1; r >= 0; --r)
      for (std::int64_t c = 0; c < cols; ++c) {
        const auto idx = static_cast<std::size_t>(r * cols + c);
        running[static_cast<std::size_t>(c)] += self.grad[idx];
        g[idx] += running[static_cast<std::size_t>(c)];
      }
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return finish(make_node({}, {total}), {x.node_ptr()}, [](Node& self) {
    auto g = self.inputs[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor sum_dim(const Tensor& x, std::int64_t axis) {
  const std::int64_t ax = normalize_axis(axis, x.rank(), "sum_dim");
  const AxisSplit s = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + ax);
  std::vector<double> out(static_cast<std::size_t>(s.outer * s.inner), 0.0);
  const auto& in = x.node()->data;
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t e = 0; e < s.extent; ++e) {
      const double* src = in.data() + (o * s.extent + e) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::int64_t k = 0; k < s.inner; ++k) dst[k] += src[k];
    }
  return finish(make_node(std::move(out_shape), std::move(out)), {x.node_ptr()}, [s](Node& self) {
    auto g = self.inputs[0]->ensure_grad();
    for (std::int64_t o = 0; o < s.outer; ++o)
      for (std::int64_t e = 0; e < s.extent; ++e) {
        double* dst = g.data() + (o * s.extent + e) * s.inner;
        const double* src = self.grad.data() + o * s.inner;
        for (std::int64_t k = 0; k < s.inner; ++k) dst[k] += src[k];
      }
  });
}

// ---- shape ----------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return finish(make_node(std::move(shape), x.node()->data), {x.node_ptr()}, [](Node& self) {
    auto g = self.inputs[0]->ensure_grad();
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k];
  });
}

namespace {

// Visits every output element of a permutation in row-major output order,
// calling fn(out_index, in_index).
template <typename Fn>
void walk_permutation(const Shape& in_shape, const std::vector<std::int64_t>& order, Fn fn) {
  const std::size_t rank = in_shape.size();
  std::vector<std::int64_t> in_stride(rank, 1);
  for (std::size_t k = rank; k-- > 1;) in_stride[k - 1] = in_stride[k] * in_shape[k];
  std::vector<std::int64_t> out_dim(rank), stride(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    out_dim[k] = in_shape[static_cast<std::size_t>(order[k])];
    stride[k] = in_stride[static_cast<std::size_t>(order[k])];
  }
  const std::int64_t total = shape_numel(in_shape);
  if (total == 0) return;
  if (rank == 0) {
    fn(0, 0);
    return;
  }
  const std::int64_t last_dim = out_dim[rank - 1];
  const std::int64_t last_stride = stride[rank - 1];
  std::vector<std::int64_t> counter(rank, 0);
  std::int64_t base = 0;
  for (std::int64_t out = 0; out < total; out += last_dim) {
    for (std::int64_t k = 0; k < last_dim; ++k) fn(out + k, base + k * last_stride);
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      base += stride[ax];
      if (++counter[ax] < out_dim[ax]) break;
      base -= stride[ax] * out_dim[ax];
      counter[ax] = 0;
    }
  }
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<std::int64_t>& order) {
  const auto rank = static_cast<std::size_t>(x.rank());
  std::vector<std::int64_t> sorted(order);
  std::sort(sorted.begin(), sorted.end());
  bool valid = order.size() == rank;
  for (std::size_t k = 0; valid && k < rank; ++k) valid = sorted[k] == static_cast<std::int64_t>(k);
  if (!valid) throw ShapeError("permute: invalid axis order for shape " + shape_str(x.shape()));
  Shape out_shape(rank);
  for (std::size_t k = 0; k < rank; ++k) out_shape[k] = x.shape()[static_cast<std::size_t>(order[k])];
  const auto& in = x.node()->data;
  std::vector<double> out(in.size());
  walk_permutation(x.shape(), order, [&](std::int64_t o, std::int64_t i) {
    out[static_cast<std::size_t>(o)] = in[static_cast<std::size_t>(i)];
  });
  Shape in_shape = x.shape();
  return finish(make_node(std::move(out_shape), std::move(out)), {x.node_ptr()},
                [in_shape, order](Node& self) {
                  auto g = self.inputs[0]->ensure_grad();
                  walk_permutation(in_shape, order, [&](std::int64_t o, std::int64_t i) {
                    g[static_cast<std::size_t>(i)] += self.grad[static_cast<std::size_t>(o)];
                  });
                });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose: rank < 2 for shape " + shape_str(x.shape()));
  std::vector<std::int64_t> order(static_cast<std::size_t>(x.rank()));
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[order.size() - 1], order[order.size() - 2]);
  return permute(x, order);
}

Tensor index_select(const Tensor& x, std::int64_t axis, const std::vector<std::int64_t>& indices) {
  const std::int64_t ax = normalize_axis(axis, x.rank(), "index_select");
  const AxisSplit s = split_at(x.shape(), ax);
  for (auto i : indices)
    if (i < 0 || i >= s.extent)
      throw ShapeError("index_select: index " + std::to_string(i) + " out of range for axis " + std::to_string(ax) +
                       " of " + shape_str(x.shape()));
  const auto count = static_cast<std::int64_t>(indices.size());
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(ax)] = count;
  std::vector<double> out(static_cast<std::size_t>(s.outer * count * s.inner));
  const auto& in = x.node()->data;
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t q = 0; q < count; ++q)
      std::copy_n(in.data() + (o * s.extent + indices[static_cast<std::size_t>(q)]) * s.inner, s.inner,
                  out.data() + (o * count + q) * s.inner);
  return finish(make_node(std::move(out_shape), std::move(out)), {x.node_ptr()},
                [s, indices, count](Node& self) {
                  auto g = self.inputs[0]->ensure_grad();
                  for (std::int64_t o = 0; o < s.outer; ++o)
                    for (std::int64_t q = 0; q < count; ++q) {
                      double* dst = g.data() + (o * s.extent + indices[static_cast<std::size_t>(q)]) * s.inner;
                      const double* src = self.grad.data() + (o * count + q) * s.inner;
                      for (std::int64_t k = 0; k < s.inner; ++k) dst[k] += src[k];
                    }
                });
}

Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  const std::int64_t ax = normalize_axis(axis, static_cast<std::int64_t>(ref.size()), "concat");
  std::vector<std::int64_t> extents;
  std::int64_t total_extent = 0;
  for (const auto& t : parts) {
    Shape a = t.shape();
    Shape b = ref;
    if (a.size() != b.size()) throw ShapeError("concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    extents.push_back(a[static_cast<std::size_t>(ax)]);
    total_extent += a[static_cast<std::size_t>(ax)];
    a[static_cast<std::size_t>(ax)] = b[static_cast<std::size_t>(ax)] = 0;
    if (a != b) throw ShapeError("concat: incompatible shapes " + shape_str(t.shape()) + " and " + shape_str(ref));
  }
  AxisSplit s = split_at(ref, ax);
  Shape out_shape = ref;
  out_shape[static_cast<std::size_t>(ax)] = total_extent;
  std::vector<double> out(static_cast<std::size_t>(s.outer * total_extent * s.inner));
  std::int64_t offset = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& in = parts[p].node()->data;
    const std::int64_t run = extents[p] * s.inner;
    for (std::int64_t o = 0; o < s.outer; ++o)
      std::copy_n(in.data() + o * run, run, out.data() + (o * total_extent + offset) * s.inner);
    offset += extents[p];
    inputs.push_back(parts[p].node_ptr());
  }
  const std::int64_t outer = s.outer;
  const std::int64_t inner = s.inner;
  return finish(make_node(std::move(out_shape), std::move(out)), std::move(inputs),
                [extents, total_extent, outer, inner](Node& self) {
                  std::int64_t offset = 0;
                  for (std::size_t p = 0; p < extents.size(); ++p) {
                    Node& n = *self.inputs[p];
                    const std::int64_t run = extents[p] * inner;
                    if (n.requires_grad) {
                      auto g = n.ensure_grad();
                      for (std::int64_t o = 0; o < outer; ++o) {
                        const double* src = self.grad.data() + (o * total_extent + offset) * inner;
                        double* dst = g.data() + o * run;
                        for (std::int64_t k = 0; k < run; ++k) dst[k] += src[k];
                      }
                    }
                    offset += extents[p];
                  }
                });
}

// ---- differentiation ----------------------------------------------------------------

Tensor custom_op(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                 std::function<void(Node&)> rule) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("custom_op: shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) +
                     " values");
  }
  std::vector<std::shared_ptr<Node>> nodes;
  nodes.reserve(inputs.size());
  for (const auto& t : inputs) nodes.push_back(t.node_ptr());
  return finish(make_node(std::move(shape), std::move(values)), std::move(nodes), std::move(rule));
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  // Leaves collect this call's gradient in a fresh buffer and add the
  // previous value at the end, so repeated calls accumulate exactly.
  std::vector<std::pair<Node*, std::vector<double>>> previous;
  for (Node* n : order) {
    if (n->is_leaf()) {
      previous.emplace_back(n, std::move(n->grad));
      n->grad.assign(n->data.size(), 0.0);
    } else {
      n->grad.clear();
    }
  }
  loss.node()->ensure_grad()[0] += 1.0;

  // Interior buffers are allocated by the first consumer that writes to
  // them; a node that received nothing is skipped.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf() || n->grad.empty()) continue;
    n->backward(*n);
    std::vector<double>().swap(n->grad);
  }
  for (auto& [leaf, old] : previous)
    if (!old.empty())
      for (std::size_t k = 0; k < old.size(); ++k) leaf->grad[k] += old[k];
}

// ---- operators ---------------------------------------------------------------------------

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
Tensor operator+(double a, const Tensor& b) { return add(Tensor::scalar(a), b); }
Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }

}  // namespace hgrn
