// SPDX-License-Identifier: Apache-2.0
//
// Loss, optimizer, learning-rate schedule and the training loop.

#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string_view>
#include <vector>

#include "hgrn/model.hpp"

namespace hgrn {

inline constexpr std::int64_t kIgnoreIndex = -100;

enum class Schedule { inverse_sqrt, cosine, constant };

std::string_view to_string(Schedule s);
std::optional<Schedule> parse_schedule(std::string_view name);

struct TrainConfig {
  double lr_peak = 1e-3;
  std::int64_t warmup_steps = 100;
  Schedule schedule = Schedule::inverse_sqrt;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;  // <= 0 disables clipping
  std::int64_t batch_size = 16;
  std::int64_t seq_len = 256;
  std::int64_t total_steps = 1000;
  std::int64_t log_interval = 10;
  std::int64_t checkpoint_interval = 0;  // 0: final checkpoint only
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);

/// Linear warmup to lr_peak, then the configured decay. `step` counts
/// optimizer updates starting at 1.
double lr_at(std::int64_t step, const TrainConfig& cfg);

/// Mean next-token NLL over positions whose target is not kIgnoreIndex.
/// logits: [..., V]; targets: one id per logits row.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::int64_t t = 0;
};

struct AdamReport {
  double grad_norm = 0.0;  // before clipping
  bool clipped = false;
  bool skipped = false;  // non-finite gradient, no update applied
};

/// Clips the global gradient norm, then applies one bias-corrected Adam
/// update with decoupled weight decay on parameters flagged `decay`.
AdamReport adam_step(std::vector<Parameter>& params, AdamState& state, double lr, const TrainConfig& cfg);

/// Global L2 norm of every parameter gradient.
double global_grad_norm(const std::vector<Parameter>& params);

struct LmBatch {
  TokenBatch inputs;
  std::vector<std::int64_t> targets;  // one per input position
};

/// Produces the batch for an optimizer step (1-based).
using BatchSource = std::function<LmBatch(std::int64_t step)>;

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // metrics.jsonl and checkpoints
  std::ostream* console = nullptr;               // JSON lines with throughput
};

struct TrainResult {
  std::int64_t steps = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
  bool diverged = false;
  std::vector<nlohmann::json> records;  // what metrics.jsonl holds
};

inline constexpr double kDivergenceLoss = 1e4;

TrainResult train(Model& model, const TrainConfig& cfg, const BatchSource& batches, const TrainOptions& options = {});

}  // namespace hgrn
