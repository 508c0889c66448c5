// SPDX-License-Identifier: Apache-2.0

#include "hgrn/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <ostream>

namespace hgrn {

std::string_view to_string(Schedule s) {
  switch (s) {
    case Schedule::inverse_sqrt: return "inverse_sqrt";
    case Schedule::cosine: return "cosine";
    case Schedule::constant: return "constant";
  }
  return "?";
}

std::optional<Schedule> parse_schedule(std::string_view name) {
  for (auto s : {Schedule::inverse_sqrt, Schedule::cosine, Schedule::constant})
    if (to_string(s) == name) return s;
  return std::nullopt;
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* field, const std::string& why) {
    if (!ok) throw ConfigError(std::string(field) + ": " + why);
  };
  require(lr_peak > 0.0, "lr", "must be positive");
  require(total_steps >= 1, "total_steps", "must be >= 1");
  require(warmup_steps >= 0 && warmup_steps <= total_steps, "warmup_steps", "must lie in [0, total_steps]");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1", "must lie in [0, 1)");
  require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2", "must lie in [0, 1)");
  require(adam_eps > 0.0, "adam_eps", "must be positive");
  require(weight_decay >= 0.0, "weight_decay", "must be >= 0");
  require(batch_size >= 1, "batch_size", "must be >= 1");
  require(seq_len >= 1, "seq_len", "must be >= 1");
  require(log_interval >= 1, "log_interval", "must be >= 1");
  require(checkpoint_interval >= 0, "checkpoint_interval", "must be >= 0");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr_peak},
          {"warmup", c.warmup_steps},
          {"schedule", to_string(c.schedule)},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"weight_decay", c.weight_decay},
          {"grad_clip", c.grad_clip},
          {"batch_size", c.batch_size},
          {"seq_len", c.seq_len},
          {"steps", c.total_steps},
          {"log_interval", c.log_interval},
          {"checkpoint_interval", c.checkpoint_interval},
          {"seed", c.seed}};
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
  const auto s = static_cast<double>(std::max<std::int64_t>(step, 0));
  const auto w = static_cast<double>(cfg.warmup_steps);
  if (step < cfg.warmup_steps) return cfg.lr_peak * s / w;
  switch (cfg.schedule) {
    case Schedule::constant: return cfg.lr_peak;
    case Schedule::inverse_sqrt: return cfg.lr_peak * std::sqrt(std::max(w, 1.0) / std::max(s, 1.0));
    case Schedule::cosine: {
      const double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
      if (span <= 0.0) return step >= cfg.total_steps ? 0.0 : cfg.lr_peak;
      const double progress = std::min((s - w) / span, 1.0);
      if (progress >= 1.0) return 0.0;
      return cfg.lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    }
  }
  return cfg.lr_peak;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets) {
  const std::int64_t V = logits.dim(-1);
  const std::int64_t rows = logits.numel() / V;
  if (static_cast<std::int64_t>(targets.size()) != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  const auto x = logits.data();
  std::vector<double> lse(static_cast<std::size_t>(rows), 0.0);
  double total = 0.0;
  std::int64_t count = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto t = targets[static_cast<std::size_t>(r)];
    if (t == kIgnoreIndex) continue;
    if (t < 0 || t >= V) throw DomainError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                                           std::to_string(V) + ")");
    const double* row = x.data() + r * V;
    const double peak = *std::max_element(row, row + V);
    double acc = 0.0;
    for (std::int64_t k = 0; k < V; ++k) acc += std::exp(row[k] - peak);
    lse[static_cast<std::size_t>(r)] = peak + std::log(acc);
    total += lse[static_cast<std::size_t>(r)] - row[t];
    ++count;
  }
  if (count == 0) throw DomainError("cross_entropy: every position is masked");
  const double scale = 1.0 / static_cast<double>(count);
  return custom_op({}, {total * scale}, {logits}, [V, rows, scale, targets, lse = std::move(lse)](Node& self) {
    auto g = self.inputs[0]->ensure_grad();
    const auto& x = self.inputs[0]->data;
    const double upstream = self.grad[0] * scale;
    for (std::int64_t r = 0; r < rows; ++r) {
      const auto t = targets[static_cast<std::size_t>(r)];
      if (t == kIgnoreIndex) continue;
      const double m = lse[static_cast<std::size_t>(r)];
      for (std::int64_t k = 0; k < V; ++k) {
        g[static_cast<std::size_t>(r * V + k)] += upstream * std::exp(x[static_cast<std::size_t>(r * V + k)] - m);
      }
      g[static_cast<std::size_t>(r * V + t)] -= upstream;
    }
  });
}

double global_grad_norm(const std::vector<Parameter>& params) {
  double ss = 0.0;
  for (const auto& p : params)
    for (double g : p.value.grad()) ss += g * g;
  return std::sqrt(ss);
}

AdamReport adam_step(std::vector<Parameter>& params, AdamState& state, double lr, const TrainConfig& cfg) {
  AdamReport report;
  report.grad_norm = global_grad_norm(params);
  if (!std::isfinite(report.grad_norm)) {
    report.skipped = true;
    return report;
  }
  double clip_scale = 1.0;
  if (cfg.grad_clip > 0.0 && report.grad_norm > cfg.grad_clip) {
    clip_scale = cfg.grad_clip / report.grad_norm;
    report.clipped = true;
  }
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t k = 0; k < params.size(); ++k) {
      state.m[k].assign(static_cast<std::size_t>(params[k].value.numel()), 0.0);
      state.v[k].assign(static_cast<std::size_t>(params[k].value.numel()), 0.0);
    }
  }
  ++state.t;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k].value;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = state.m[k];
    auto& v = state.v[k];
    const double decay = params[k].decay ? lr * cfg.weight_decay : 0.0;
    for (std::size_t e = 0; e < w.size(); ++e) {
      const double ge = g[e] * clip_scale;
      m[e] = b1 * m[e] + (1.0 - b1) * ge;
      v[e] = b2 * v[e] + (1.0 - b2) * ge * ge;
      w[e] -= decay * w[e];
      w[e] -= lr * (m[e] / c1) / (std::sqrt(v[e] / c2) + cfg.adam_eps);
    }
  }
  return report;
}

TrainResult train(Model& model, const TrainConfig& cfg, const BatchSource& batches, const TrainOptions& options) {
  cfg.validate();
  TrainResult result;
  std::ofstream metrics;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    metrics.open(*options.out_dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write " + (*options.out_dir / "metrics.jsonl").string());
  }
  auto emit = [&](nlohmann::json record, double tokens_per_sec) {
    if (metrics.is_open()) metrics << record.dump() << '\n' << std::flush;
    if (options.console) {
      nlohmann::json shown = record;
      if (tokens_per_sec > 0.0) shown["tokens_per_sec"] = tokens_per_sec;
      *options.console << shown.dump() << '\n' << std::flush;
    }
    result.records.push_back(std::move(record));
  };
  auto checkpoint = [&](const std::string& name) {
    if (options.out_dir) model.save(*options.out_dir / name);
  };

  AdamState adam;
  auto& params = model.parameters();
  double loss_sum = 0.0;
  std::int64_t loss_count = 0, tokens = 0;
  auto window_start = std::chrono::steady_clock::now();

  for (std::int64_t step = 1; step <= cfg.total_steps; ++step) {
    const LmBatch batch = batches(step);
    for (auto& p : params) p.value.zero_grad();
    const Tensor loss = cross_entropy(model.forward(batch.inputs), batch.targets);
    const double value = loss.item();
    if (step == 1) result.first_loss = value;
    result.last_loss = value;
    result.steps = step;
    if (!std::isfinite(value) || value > kDivergenceLoss) {
      result.diverged = true;
      emit({{"event", "diverged"}, {"step", step}, {"loss", std::isfinite(value) ? value : -1.0}}, 0.0);
      checkpoint("diverged.bin");
      return result;
    }
    backward(loss);
    const double lr = lr_at(step, cfg);
    const AdamReport report = adam_step(params, adam, lr, cfg);
    if (report.skipped) emit({{"event", "nonfinite_grad"}, {"step", step}}, 0.0);

    loss_sum += value;
    ++loss_count;
    tokens += batch.inputs.batch * batch.inputs.seq_len;
    if (step == 1 || step % cfg.log_interval == 0 || step == cfg.total_steps) {
      const auto now = std::chrono::steady_clock::now();
      const double seconds = std::chrono::duration<double>(now - window_start).count();
      emit({{"step", step},
            {"loss", loss_sum / static_cast<double>(loss_count)},
            {"lr", lr},
            {"grad_norm", report.grad_norm},
            {"tokens", tokens}},
           seconds > 0.0 ? static_cast<double>(tokens) / seconds : 0.0);
      loss_sum = 0.0;
      loss_count = 0;
      tokens = 0;
      window_start = now;
    }
    if (cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 && step != cfg.total_steps) {
      checkpoint("checkpoint_step" + std::to_string(step) + ".bin");
    }
  }
  checkpoint("final.bin");
  return result;
}

}  // namespace hgrn
