// SPDX-License-Identifier: Apache-2.0
//
// Chunk-parallel evaluation of the matrix-state recurrence.
//
// Inside a chunk with entry state S and cumulative decays a_t = prod_{s<=t} f_s:
//
//   y_t  = S (a_t * o_t)  +  sum_{s<=t} score(t, s) i_s
//   score(t, s) = sum_j o_t[j] (a_t[j] / a_s[j]) (1 - f_s[j])
//   S'   = S Diag(a_last) + sum_s i_s (x) ((1 - f_s) * a_last / a_s)
//
// The intra-chunk part is two matrix products; only the state hand-off
// between chunks is sequential.

#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "hgrn/recurrence.hpp"
#include "hgrn/tensor.hpp"

namespace hgrn {

inline constexpr double kForgetFloor = 1e-6;
inline constexpr std::int64_t kDefaultChunkSize = 64;

struct ChunkPlan {
  std::int64_t chunk_size = kDefaultChunkSize;
  std::vector<std::pair<std::int64_t, std::int64_t>> boundaries;  // [start, end)
};

/// Contiguous cover of [0, n) by chunks of `chunk_size`; the last may be short.
ChunkPlan make_chunk_plan(std::int64_t n, std::int64_t chunk_size);

struct DecayCache {
  Tensor log_f;  // [C, d_h]
  Tensor log_a;  // [C, d_h], within-chunk cumulative sums of log_f
};

DecayCache make_decay_cache(const Tensor& f_chunk);

/// Causal score matrix of one chunk, [C, C]; entry (t, s) for s <= t is
/// sum_j o_t[j] exp(log_a_t[j] - log_a_s[j]) (1 - f_s[j]); the diagonal uses
/// the empty decay product. Strictly upper entries are zero.
Tensor intra_chunk_scores(const Tensor& o_chunk, const Tensor& f_chunk, const DecayCache& cache);

struct ChunkwiseStats {
  std::int64_t clamped = 0;          // forget-gate entries raised to the floor
  std::int64_t stable_fallbacks = 0; // forward passes that needed the ratio-materializing path
};

/// Process-wide count of clamped forget-gate entries (the "counted warning").
std::int64_t forget_floor_clamp_count();

/// Single-sequence form matching hgrn2_scan's time-major layout:
/// f, i, o: [N, G..., d_h]; h0: [G..., d_h, d_h].
ScanResult chunkwise_hgrn2(const Tensor& f, const Tensor& i, const Tensor& o, const Tensor& h0,
                           std::int64_t chunk_size = kDefaultChunkSize, ChunkwiseStats* stats = nullptr);

/// Batch-major form used by the model: f, i, o: [G..., N, d_h];
/// h0: [G..., d_h, d_h].
ScanResult chunkwise_hgrn2_batched(const Tensor& f, const Tensor& i, const Tensor& o, const Tensor& h0,
                                   std::int64_t chunk_size = kDefaultChunkSize, ChunkwiseStats* stats = nullptr);

// ---- throughput comparison -----------------------------------------------------

enum class BenchMode { train, forward };

struct BenchConfig {
  std::vector<std::int64_t> n_grid{64, 256, 1024};
  std::vector<std::int64_t> c_grid{16, 64};
  std::int64_t head_dim = 64;
  std::int64_t heads = 4;
  int repeats = 3;
  std::uint64_t seed = 0;
  BenchMode mode = BenchMode::train;
};

struct BenchRow {
  std::string path;  // "sequential" or "chunkwise"
  std::int64_t n = 0;
  std::int64_t c = 0;
  std::int64_t head_dim = 0;
  std::int64_t heads = 0;
  double seconds_per_token = 0.0;
  double speedup = 1.0;  // sequential / this path at the same (N, C)
};

/// Times the sequential and chunkwise paths for every (N, C) grid point.
/// In train mode a measurement is one forward plus backward of sum(y).
/// Each row reports the median over `repeats`.
std::vector<BenchRow> benchmark_paths(const BenchConfig& config);

void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows);

}  // namespace hgrn
