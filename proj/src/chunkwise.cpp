// SPDX-License-Identifier: Apache-2.0

#include "hgrn/chunkwise.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <optional>
#include <ostream>

#include <Eigen/Core>

#include "hgrn/parallel.hpp"
#include "hgrn/random.hpp"

namespace hgrn {

namespace {

std::atomic<std::int64_t> g_clamp_count{0};

// Beyond this total in-chunk log decay, exp(-log a) in the factored score
// product would leave the normal fp64 range.
constexpr double kFactoredDecayLimit = 700.0;

// Scores by materializing every ratio exp(log a_t - log a_s) with s <= t.
// log_a, o, k: [..., C, d_h]; result [..., C, C].
Tensor materialized_scores(const Tensor& log_a, const Tensor& o, const Tensor& k) {
  const std::int64_t c = log_a.dim(-2);
  const std::int64_t dh = log_a.dim(-1);
  const std::int64_t axis = log_a.rank() - 2;
  std::vector<std::int64_t> rows, cols;
  rows.reserve(static_cast<std::size_t>(c * c));
  cols.reserve(static_cast<std::size_t>(c * c));
  std::vector<double> mask(static_cast<std::size_t>(c * c * dh), 0.0);
  for (std::int64_t t = 0; t < c; ++t)
    for (std::int64_t s = 0; s < c; ++s) {
      rows.push_back(t);
      cols.push_back(s);
      if (s <= t) std::fill_n(mask.begin() + (t * c + s) * dh, dh, 1.0);
    }
  const Tensor valid = Tensor::from({c * c, dh}, std::move(mask));
  // Masking the exponent first keeps the discarded s > t entries finite.
  const Tensor ratio = exp((index_select(log_a, axis, rows) - index_select(log_a, axis, cols)) * valid) * valid;
  const Tensor terms = index_select(o, axis, rows) * ratio * index_select(k, axis, cols);
  Shape out_shape = log_a.shape();
  out_shape.back() = c;
  return reshape(sum_dim(terms, -1), out_shape);
}

}  // namespace

ChunkPlan make_chunk_plan(std::int64_t n, std::int64_t chunk_size) {
  if (chunk_size <= 0) throw ConfigError("chunk size must be positive, got " + std::to_string(chunk_size));
  ChunkPlan plan;
  plan.chunk_size = chunk_size;
  for (std::int64_t start = 0; start < n; start += chunk_size)
    plan.boundaries.emplace_back(start, std::min(n, start + chunk_size));
  return plan;
}

DecayCache make_decay_cache(const Tensor& f_chunk) {
  DecayCache cache;
  cache.log_f = log(f_chunk);
  cache.log_a = cumsum_dim0(cache.log_f);
  return cache;
}

Tensor intra_chunk_scores(const Tensor& o_chunk, const Tensor& f_chunk, const DecayCache& cache) {
  if (o_chunk.rank() != 2 || o_chunk.shape() != f_chunk.shape() || cache.log_a.shape() != f_chunk.shape()) {
    throw ShapeError("intra_chunk_scores: expected matching [C, d_h] inputs, got o " + shape_str(o_chunk.shape()) +
                     ", f " + shape_str(f_chunk.shape()));
  }
  return materialized_scores(cache.log_a, o_chunk, 1.0 - f_chunk);
}

std::int64_t forget_floor_clamp_count() { return g_clamp_count.load(); }

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const Mat>;
using MMap = Eigen::Map<Mat>;

// Everything the backward pass needs, shared between the two output views.
struct ChunkTape {
  std::int64_t g = 0, n = 0, dh = 0, c = 0, nc = 0;
  std::vector<double> f;        // clamped forget gates [g, n, dh]
  std::vector<double> keep;     // 1 where f was above the floor
  std::vector<double> log_a;    // within-chunk cumulative log decay [g, n, dh]
  std::vector<double> entry;    // state entering each chunk [g, nc, dh, dh]
};

// Per-chunk quantities rebuilt from the tape in both passes.
struct ChunkTerms {
  Mat query;     // o * a_t
  Mat key;       // (1 - f) / a_t, factored path only
  Mat exit_key;  // (1 - f) * a_last / a_t
  Eigen::RowVectorXd a_last;
  Mat scores;    // causal [L, L]
  bool factored = true;
};

ChunkTerms chunk_terms(const double* f, const double* o, const double* la, std::int64_t len, std::int64_t dh) {
  ChunkTerms t;
  // Owned copies keep Eigen's vectorization split independent of where the
  // caller's buffers happen to be aligned.
  const Mat F = CMap(f, len, dh), O = CMap(o, len, dh), LA = CMap(la, len, dh);
  const Eigen::RowVectorXd la_last = LA.row(len - 1);
  t.a_last = la_last.array().exp();
  t.query = (O.array() * LA.array().exp()).matrix();
  const Mat one_minus_f = (1.0 - F.array()).matrix();
  t.exit_key = (one_minus_f.array() * (LA.rowwise() - la_last).array().operator-().exp()).matrix();
  t.factored = -la_last.minCoeff() <= kFactoredDecayLimit;
  if (t.factored) {
    t.key = (one_minus_f.array() * (-LA.array()).exp()).matrix();
    t.scores = (t.query * t.key.transpose()).triangularView<Eigen::Lower>();
  } else {
    t.scores = Mat::Zero(len, len);
    for (std::int64_t r = 0; r < len; ++r)
      for (std::int64_t s = 0; s <= r; ++s)
        t.scores(r, s) = (O.row(r).array() * one_minus_f.row(s).array() * (LA.row(r) - LA.row(s)).array().exp()).sum();
  }
  return t;
}

}  // namespace

ScanResult chunkwise_hgrn2_batched(const Tensor& f_in, const Tensor& i_in, const Tensor& o_in, const Tensor& h0,
                                   std::int64_t chunk_size, ChunkwiseStats* stats) {
  if (chunk_size <= 0) throw ConfigError("chunk size must be positive, got " + std::to_string(chunk_size));
  if (f_in.shape() != i_in.shape() || f_in.shape() != o_in.shape() || f_in.rank() < 2) {
    throw ShapeError("chunkwise_hgrn2: gate shapes differ or rank < 2: f " + shape_str(f_in.shape()) + ", i " +
                     shape_str(i_in.shape()) + ", o " + shape_str(o_in.shape()));
  }
  const Shape& full = f_in.shape();
  const std::int64_t n = full[full.size() - 2];
  const std::int64_t dh = full.back();
  Shape batch(full.begin(), full.end() - 2);
  Shape state_shape = batch;
  state_shape.push_back(dh);
  state_shape.push_back(dh);
  if (h0.shape() != state_shape) {
    throw ShapeError("chunkwise_hgrn2: state " + shape_str(h0.shape()) + " expected " + shape_str(state_shape));
  }
  if (n == 0) return {f_in * 0.0, h0};

  auto tape = std::make_shared<ChunkTape>();
  tape->g = shape_numel(batch);
  tape->n = n;
  tape->dh = dh;
  tape->c = std::min(chunk_size, n);
  tape->nc = (n + tape->c - 1) / tape->c;
  const std::int64_t g = tape->g, c = tape->c, nc = tape->nc;

  tape->f.assign(f_in.data().begin(), f_in.data().end());
  tape->keep.assign(tape->f.size(), 1.0);
  std::int64_t clamped = 0;
  for (std::size_t k = 0; k < tape->f.size(); ++k) {
    if (tape->f[k] <= kForgetFloor) {
      tape->f[k] = kForgetFloor;
      tape->keep[k] = 0.0;
      ++clamped;
    }
  }
  if (clamped > 0) {
    g_clamp_count += clamped;
    if (stats) stats->clamped += clamped;
  }
  tape->log_a.resize(tape->f.size());
  tape->entry.resize(static_cast<std::size_t>(g * nc * dh * dh));

  // Output buffer: y [g, n, dh] followed by the final state [g, dh, dh].
  const std::int64_t y_size = g * n * dh;
  std::vector<double> out(static_cast<std::size_t>(y_size + g * dh * dh));
  std::atomic<bool> fallback{false};
  const double* pi = i_in.data().data();
  const double* po = o_in.data().data();
  const double* ph = h0.data().data();

  parallel_for(g, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t b = lo; b < hi; ++b) {
      const std::int64_t base = b * n * dh;
      for (std::int64_t t = 0; t < n; ++t) {
        const double* fr = tape->f.data() + base + t * dh;
        double* la = tape->log_a.data() + base + t * dh;
        const bool first = t % c == 0;
        for (std::int64_t j = 0; j < dh; ++j) la[j] = std::log(fr[j]) + (first ? 0.0 : la[j - dh]);
      }
      Mat state = CMap(ph + b * dh * dh, dh, dh);
      for (std::int64_t k = 0; k < nc; ++k) {
        const std::int64_t start = k * c, len = std::min(c, n - start);
        const std::int64_t off = base + start * dh;
        MMap(tape->entry.data() + (b * nc + k) * dh * dh, dh, dh) = state;
        const ChunkTerms terms = chunk_terms(tape->f.data() + off, po + off, tape->log_a.data() + off, len, dh);
        if (!terms.factored) fallback = true;
        const Mat V = CMap(pi + off, len, dh);
        Mat y = terms.scores * V;
        y.noalias() += terms.query * state.transpose();
        MMap(out.data() + off, len, dh) = y;
        state = (state.array().rowwise() * terms.a_last.array()).matrix();
        state.noalias() += V.transpose() * terms.exit_key;
      }
      MMap(out.data() + y_size + b * dh * dh, dh, dh) = state;
    }
  }, 1);
  if (fallback && stats) ++stats->stable_fallbacks;

  const Tensor combined = custom_op({y_size + g * dh * dh}, std::move(out), {f_in, i_in, o_in, h0}, [tape](Node& self) {
    const std::int64_t g = tape->g, n = tape->n, dh = tape->dh, c = tape->c, nc = tape->nc;
    const std::int64_t y_size = g * n * dh;
    Node& nf = *self.inputs[0];
    Node& ni = *self.inputs[1];
    Node& no = *self.inputs[2];
    Node& nh = *self.inputs[3];
    double* gf = nf.requires_grad ? nf.ensure_grad().data() : nullptr;
    double* gi = ni.requires_grad ? ni.ensure_grad().data() : nullptr;
    double* go = no.requires_grad ? no.ensure_grad().data() : nullptr;
    double* gh = nh.requires_grad ? nh.ensure_grad().data() : nullptr;
    const double* grad = self.grad.data();

    parallel_for(g, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t b = lo; b < hi; ++b) {
        const std::int64_t base = b * n * dh;
        Mat d_state = CMap(grad + y_size + b * dh * dh, dh, dh);
        for (std::int64_t k = nc - 1; k >= 0; --k) {
          const std::int64_t start = k * c, len = std::min(c, n - start);
          const std::int64_t off = base + start * dh;
          const double* f = tape->f.data() + off;
          const double* la = tape->log_a.data() + off;
          const ChunkTerms terms = chunk_terms(f, no.data.data() + off, la, len, dh);
          const Mat V = CMap(ni.data.data() + off, len, dh), O = CMap(no.data.data() + off, len, dh);
          const Mat F = CMap(f, len, dh), LA = CMap(la, len, dh), dY = CMap(grad + off, len, dh);
          const Mat S = CMap(tape->entry.data() + (b * nc + k) * dh * dh, dh, dh);

          // y = scores v + query S^T;  S' = S Diag(a_last) + v^T exit_key.
          Mat d_scores = (dY * V.transpose()).triangularView<Eigen::Lower>();
          Mat d_query = dY * S;
          Mat d_v = terms.scores.transpose() * dY + terms.exit_key * d_state.transpose();
          const Mat d_exit = V * d_state;
          const Eigen::RowVectorXd d_a_last = (d_state.array() * S.array()).colwise().sum();
          Mat d_entry = (d_state.array().rowwise() * terms.a_last.array()).matrix();
          d_entry.noalias() += dY.transpose() * terms.query;

          Mat d_o = Mat::Zero(len, dh), d_one_minus_f = Mat::Zero(len, dh), d_la = Mat::Zero(len, dh);
          if (terms.factored) {
            d_query.noalias() += d_scores * terms.key;
            const Mat d_key = d_scores.transpose() * terms.query;
            d_one_minus_f.array() += d_key.array() * (-LA.array()).exp();
            d_la.array() -= d_key.array() * terms.key.array();
          } else {
            for (std::int64_t r = 0; r < len; ++r)
              for (std::int64_t s = 0; s <= r; ++s) {
                const double w = d_scores(r, s);
                if (w == 0.0) continue;
                const Eigen::ArrayXXd ratio = (LA.row(r) - LA.row(s)).array().exp();
                const Eigen::ArrayXXd omf = 1.0 - F.row(s).array();
                d_o.row(r).array() += w * omf * ratio;
                d_one_minus_f.row(s).array() += w * O.row(r).array() * ratio;
                const Eigen::ArrayXXd through = w * O.row(r).array() * omf * ratio;
                d_la.row(r).array() += through;
                d_la.row(s).array() -= through;
              }
          }
          const Eigen::ArrayXXd a_t = LA.array().exp();
          d_o.array() += d_query.array() * a_t;
          d_la.array() += d_query.array() * terms.query.array();
          const Eigen::ArrayXXd exit_scale = (LA.rowwise() - LA.row(len - 1)).array().operator-().exp();
          d_one_minus_f.array() += d_exit.array() * exit_scale;
          const Eigen::ArrayXXd exit_through = d_exit.array() * terms.exit_key.array();
          d_la.array() -= exit_through;
          d_la.row(len - 1).array() += exit_through.colwise().sum() + d_a_last.array() * terms.a_last.array();

          if (gi) MMap(gi + off, len, dh) += d_v;
          if (go) MMap(go + off, len, dh) += d_o;
          if (gf) {
            // log a_t is a running sum of log f, so d log f_s = sum_{t >= s} d log a_t.
            Eigen::RowVectorXd running = Eigen::RowVectorXd::Zero(dh);
            for (std::int64_t r = len - 1; r >= 0; --r) {
              running += d_la.row(r);
              for (std::int64_t j = 0; j < dh; ++j) {
                const auto idx = static_cast<std::size_t>(off + r * dh + j);
                gf[idx] += tape->keep[idx] * (running(j) / F(r, j) - d_one_minus_f(r, j));
              }
            }
          }
          d_state = std::move(d_entry);
        }
        if (gh) MMap(gh + b * dh * dh, dh, dh) += d_state;
      }
    }, 1);
  });

  // Views of the two outputs.
  Shape y_shape = full;
  const Tensor y = custom_op(y_shape, std::vector<double>(combined.data().begin(), combined.data().begin() + y_size),
                             {combined}, [y_size](Node& self) {
                               auto gc = self.inputs[0]->ensure_grad();
                               for (std::int64_t k = 0; k < y_size; ++k) gc[static_cast<std::size_t>(k)] += self.grad[static_cast<std::size_t>(k)];
                             });
  const Tensor state = custom_op(state_shape, std::vector<double>(combined.data().begin() + y_size, combined.data().end()),
                                 {combined}, [y_size](Node& self) {
                                   auto gc = self.inputs[0]->ensure_grad();
                                   for (std::size_t k = 0; k < self.grad.size(); ++k) gc[static_cast<std::size_t>(y_size) + k] += self.grad[k];
                                 });
  return {y, state};
}

ScanResult chunkwise_hgrn2(const Tensor& f, const Tensor& i, const Tensor& o, const Tensor& h0,
                           std::int64_t chunk_size, ChunkwiseStats* stats) {
  if (f.rank() < 2) throw ShapeError("chunkwise_hgrn2: expected [N, ..., d_h], got " + shape_str(f.shape()));
  // [N, G..., d_h] -> [G..., N, d_h]
  const std::int64_t r = f.rank();
  std::vector<std::int64_t> to_batch(static_cast<std::size_t>(r));
  std::iota(to_batch.begin(), to_batch.end() - 2, 1);
  to_batch[static_cast<std::size_t>(r - 2)] = 0;
  to_batch.back() = r - 1;
  std::vector<std::int64_t> to_time(static_cast<std::size_t>(r));
  to_time[0] = r - 2;
  std::iota(to_time.begin() + 1, to_time.end() - 1, 0);
  to_time.back() = r - 1;
  ScanResult res = chunkwise_hgrn2_batched(permute(f, to_batch), permute(i, to_batch), permute(o, to_batch), h0,
                                           chunk_size, stats);
  res.y = permute(res.y, to_time);
  return res;
}

// ---- benchmark ------------------------------------------------------------------------

std::vector<BenchRow> benchmark_paths(const BenchConfig& config) {
  std::vector<BenchRow> rows;
  Rng rng(config.seed);
  const std::int64_t dh = config.head_dim;
  const std::int64_t heads = config.heads;
  for (std::int64_t n : config.n_grid) {
    for (std::int64_t c : config.c_grid) {
      for (const char* path : {"sequential", "chunkwise"}) {
        const bool chunked = std::string(path) == "chunkwise";
        std::vector<double> samples;
        for (int rep = 0; rep < std::max(1, config.repeats); ++rep) {
          const bool train = config.mode == BenchMode::train;
          // Time-major inputs [N, H, d_h] for both paths.
          const Tensor f = uniform({n, heads, dh}, rng, 0.5, 0.99, train);
          const Tensor i = randn({n, heads, dh}, rng, 1.0, train);
          const Tensor o = randn({n, heads, dh}, rng, 1.0, train);
          const Tensor h0 = Tensor::zeros({heads, dh, dh});
          const auto start = std::chrono::steady_clock::now();
          {
            std::optional<NoGradGuard> no_grad;
            if (!train) no_grad.emplace();
            ScanResult r = chunked ? chunkwise_hgrn2(f, i, o, h0, c) : hgrn2_scan(f, i, o, h0);
            if (train) backward(sum(r.y));
          }
          const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
          samples.push_back(secs / static_cast<double>(std::max<std::int64_t>(1, n)));
        }
        std::sort(samples.begin(), samples.end());
        rows.push_back({path, n, c, dh, heads, samples[samples.size() / 2]});
        if (chunked) rows.back().speedup = rows[rows.size() - 2].seconds_per_token / rows.back().seconds_per_token;
      }
    }
  }
  return rows;
}

void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows) {
  out << "path,N,C,d_h,H,seconds_per_token,speedup\n";
  for (const auto& r : rows) {
    out << r.path << ',' << r.n << ',' << r.c << ',' << r.head_dim << ',' << r.heads << ',' << r.seconds_per_token << ','
        << r.speedup << '\n';
  }
}

}  // namespace hgrn
