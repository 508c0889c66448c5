// SPDX-License-Identifier: Apache-2.0
//
// Task data and experiment drivers: multi-query associative recall (MQAR)
// and a byte-level character language-modeling corpus.

#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "hgrn/model.hpp"
#include "hgrn/training.hpp"

namespace hgrn {

// ---- MQAR ------------------------------------------------------------------
//
// Layout of one instance, with keys drawn from [1, V/2) and values from
// [V/2, V):
//
//   k1 v1 k2 v2 ... kK vK  | noise ...  q v' noise ... q v' ...
//   `--- key-value prefix -'           `--- query region (second half) ---'
//
// Each query key sits at an even offset of the query region, immediately
// followed by its bound value; the target at the key position is that value.

struct MqarConfig {
  std::int64_t seq_len = 128;
  std::int64_t num_kv_pairs = 8;
  std::int64_t num_queries = 0;  // 0: query every key once
  std::int64_t vocab_size = 64;

  std::int64_t queries() const { return num_queries > 0 ? num_queries : num_kv_pairs; }
  std::int64_t query_region_start() const { return std::max(2 * num_kv_pairs, seq_len / 2); }
  /// Throws ConfigError when the layout cannot fit.
  void validate() const;
};

struct MqarInstance {
  std::vector<std::int64_t> tokens;
  std::vector<std::int64_t> targets;  // kIgnoreIndex except at query positions
};

MqarInstance generate_mqar_instance(const MqarConfig& cfg, Rng& rng);

/// `count` instances sampled from a stream seeded by `seed`.
LmBatch generate_mqar(const MqarConfig& cfg, std::int64_t count, std::uint64_t seed);

/// {"meta": {...}, "tokens": [[...]], "targets": [[...]]}.
nlohmann::json mqar_to_json(const MqarConfig& cfg, const LmBatch& set, std::uint64_t seed);

using LogitsFn = std::function<Tensor(const TokenBatch&)>;

/// Fraction of target positions whose argmax over the value vocabulary
/// [V/2, V) equals the target.
double evaluate_recall(const LogitsFn& logits, const LmBatch& eval_set, std::int64_t batch_size = 64);
double evaluate_recall(const Model& model, const LmBatch& eval_set, std::int64_t batch_size = 64);

// ---- character corpus ------------------------------------------------------

inline constexpr std::int64_t kByteVocab = 256;
inline constexpr std::int64_t kBosToken = 256;
inline constexpr std::int64_t kPadToken = 257;
inline constexpr std::int64_t kCharVocabSize = 258;

std::vector<std::int64_t> tokenize(std::string_view text);
/// Inverse of tokenize; special tokens are dropped.
std::string detokenize(const std::vector<std::int64_t>& tokens);

enum class Split { train, valid };

struct CharCorpus {
  std::vector<std::int64_t> tokens;
  std::int64_t split_point = 0;  // first validation token
  std::int64_t seq_len = 0;
  // Window start offsets; a window covers seq_len + 1 tokens and never
  // crosses split_point.
  std::vector<std::int64_t> train_windows, valid_windows;

  const std::vector<std::int64_t>& windows(Split s) const { return s == Split::train ? train_windows : valid_windows; }
};

/// Byte tokens of a UTF-8 file with the last `valid_fraction` held out.
CharCorpus load_char_corpus(const std::filesystem::path& path, std::int64_t seq_len, double valid_fraction = 0.1);
CharCorpus make_char_corpus(std::string_view text, std::int64_t seq_len, double valid_fraction = 0.1);

/// Training batches visit windows in a seeded per-epoch shuffle.
LmBatch corpus_batch(const CharCorpus& corpus, std::int64_t step, std::int64_t batch_size, std::uint64_t seed);
/// Validation windows [first, first + count) in file order.
LmBatch corpus_slice(const CharCorpus& corpus, Split split, std::int64_t first, std::int64_t count);

/// Mean NLL over up to `max_windows` validation windows (0: all).
double evaluate_loss(const Model& model, const CharCorpus& corpus, std::int64_t max_windows = 0,
                     std::int64_t batch_size = 16);

// ---- experiment drivers ----------------------------------------------------

/// Learning-rate grid of the associative-recall sweep.
std::vector<double> recall_lr_grid();

struct MqarRun {
  ModelConfig model;
  TrainConfig train;
  MqarConfig task;
  std::int64_t eval_examples = 512;
};

struct MqarOutcome {
  double accuracy = 0.0;
  double final_loss = 0.0;
  bool diverged = false;
};

/// Trains on fresh batches per step (seeded by (train.seed, step)) and scores
/// a held-out set drawn from a disjoint seed stream.
MqarOutcome run_mqar(const MqarRun& run, const TrainOptions& options = {});

struct SweepPoint {
  double lr = 0.0;
  std::uint64_t seed = 0;
  MqarOutcome outcome;
};

struct SweepSummary {
  std::vector<SweepPoint> points;
  std::vector<double> best_per_seed;  // best accuracy over the grid, per seed
  double median_best = 0.0;
};

SweepSummary sweep_mqar(const MqarRun& base, const std::vector<double>& lrs, const std::vector<std::uint64_t>& seeds,
                        const std::function<void(const SweepPoint&)>& on_point = {});

struct CharLmOutcome {
  double valid_loss = 0.0;
  double first_loss = 0.0;
  double final_train_loss = 0.0;
  bool diverged = false;
};

CharLmOutcome run_charlm(const ModelConfig& model, const TrainConfig& train, const CharCorpus& corpus,
                         std::int64_t eval_windows = 0, const TrainOptions& options = {});

double median(std::vector<double> values);

}  // namespace hgrn
