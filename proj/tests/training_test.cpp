// SPDX-License-Identifier: Apache-2.0

#include "hgrn/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hgrn/tasks.hpp"
#include "test_util.hpp"

namespace hgrn {
namespace {

TrainConfig schedule_config(Schedule s) {
  TrainConfig c;
  c.lr_peak = 2e-3;
  c.warmup_steps = 100;
  c.total_steps = 1000;
  c.schedule = s;
  return c;
}

TEST(LearningRate, WarmupIsLinearAndPeaksExactly) {
  for (auto s : {Schedule::inverse_sqrt, Schedule::cosine, Schedule::constant}) {
    const TrainConfig c = schedule_config(s);
    EXPECT_EQ(lr_at(100, c), 2e-3);
    EXPECT_DOUBLE_EQ(lr_at(25, c), 0.5e-3);
    EXPECT_EQ(lr_at(0, c), 0.0);
  }
}

TEST(LearningRate, InverseSqrtHalvesAtFourTimesWarmup) {
  EXPECT_DOUBLE_EQ(lr_at(400, schedule_config(Schedule::inverse_sqrt)), 1e-3);
}

TEST(LearningRate, CosineReachesZero) {
  const TrainConfig c = schedule_config(Schedule::cosine);
  EXPECT_NEAR(lr_at(1000, c), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(lr_at(550, c), 1e-3);
  EXPECT_EQ(lr_at(1200, c), 0.0);
}

TEST(LearningRate, ScheduleNamesRoundTrip) {
  for (auto s : {Schedule::inverse_sqrt, Schedule::cosine, Schedule::constant}) EXPECT_EQ(parse_schedule(to_string(s)), s);
  EXPECT_FALSE(parse_schedule("linear").has_value());
}

TEST(TrainConfigTest, ValidateNamesField) {
  TrainConfig c;
  c.warmup_steps = c.total_steps + 1;
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("warmup"), std::string::npos) << e.what();
  }
  TrainConfig z;
  z.lr_peak = 0.0;
  EXPECT_THROW(z.validate(), ConfigError);
}

// ---- cross entropy ---------------------------------------------------------

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  const Tensor logits = Tensor::full({2, 3, 7}, 0.25);
  EXPECT_NEAR(cross_entropy(logits, std::vector<std::int64_t>(6, 4)).item(), std::log(7.0), 1e-15);
}

TEST(CrossEntropy, LargeMarginApproachesZero) {
  double previous = INFINITY;
  for (double margin : {1.0, 5.0, 10.0, 20.0, 100.0, 700.0}) {
    std::vector<double> v(5, 0.0);
    v[2] = margin;
    const double loss = cross_entropy(Tensor::from({1, 5}, v), {2}).item();
    EXPECT_GE(loss, 0.0);
    if (margin <= 20.0) EXPECT_LT(loss, previous);
    previous = loss;
  }
  EXPECT_LT(previous, 1e-15);
}

TEST(CrossEntropy, MatchesDirectSummation) {
  Rng rng(1);
  const Tensor logits = randn({3, 4, 9}, rng, 3.0);
  std::vector<std::int64_t> targets(12);
  std::uniform_int_distribution<std::int64_t> pick(0, 8);
  for (auto& t : targets) t = pick(rng);
  targets[5] = kIgnoreIndex;
  targets[7] = kIgnoreIndex;
  double total = 0.0;
  int count = 0;
  for (std::size_t r = 0; r < 12; ++r) {
    if (targets[r] == kIgnoreIndex) continue;
    double z = 0.0;
    for (std::size_t k = 0; k < 9; ++k) z += std::exp(logits.data()[r * 9 + k]);
    total += std::log(z) - logits.data()[r * 9 + static_cast<std::size_t>(targets[r])];
    ++count;
  }
  EXPECT_NEAR(cross_entropy(logits, targets).item(), total / count, 1e-12);
}

TEST(CrossEntropy, Errors) {
  EXPECT_THROW(cross_entropy(Tensor::zeros({2, 3}), {kIgnoreIndex, kIgnoreIndex}), DomainError);
  EXPECT_THROW(cross_entropy(Tensor::zeros({2, 3}), {0, 3}), DomainError);
  EXPECT_THROW(cross_entropy(Tensor::zeros({2, 3}), {0}), ShapeError);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  Tensor logits = randn({5, 6}, rng, 2.0, true);
  const std::vector<std::int64_t> targets{0, kIgnoreIndex, 5, 2, 2};
  EXPECT_LT(testing::gradient_check({&logits}, [&] { return cross_entropy(logits, targets); }), 1e-8);
}

// ---- Adam ------------------------------------------------------------------

std::vector<Parameter> single_param(std::vector<double> values, bool decay) {
  const auto n = static_cast<std::int64_t>(values.size());
  return {Parameter{"w", Tensor::from({n}, std::move(values), true), decay}};
}

void set_grad(Parameter& p, const std::vector<double>& g) {
  p.value.zero_grad();
  auto dst = p.value.node()->ensure_grad();
  std::copy(g.begin(), g.end(), dst.begin());
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto params = single_param({1.0, -2.0, 3.0}, true);
  TrainConfig c;
  c.weight_decay = 0.0;
  AdamState state;
  set_grad(params[0], {0.0, 0.0, 0.0});
  adam_step(params, state, 1e-2, c);
  EXPECT_EQ(params[0].value.to_vector(), (std::vector<double>{1.0, -2.0, 3.0}));
}

TEST(Adam, FirstStepIsSignLike) {
  auto params = single_param({0.5, 0.5, 0.5}, false);
  TrainConfig c;
  c.grad_clip = 0.0;
  AdamState state;
  const std::vector<double> g{0.3, -2.0, 1e-3};
  set_grad(params[0], g);
  adam_step(params, state, 0.1, c);
  for (std::size_t k = 0; k < 3; ++k) {
    const double expect = 0.5 - 0.1 * g[k] / (std::abs(g[k]) + 1e-8);
    EXPECT_NEAR(params[0].value.data()[k], expect, 1e-15);
  }
}

// Independent scalar Adam with decoupled decay and global-norm clipping,
// minimizing sum_k a_k (w_k - c_k)^2.
TEST(Adam, QuadraticBowlMatchesScalarOracle) {
  const std::vector<double> a{1.0, 4.0, 0.25}, c0{0.5, -1.0, 2.0};
  std::vector<double> w{3.0, 3.0, -3.0};
  auto params = single_param(w, true);
  TrainConfig cfg;
  cfg.weight_decay = 0.05;
  cfg.grad_clip = 5.0;
  AdamState state;
  std::vector<double> m(3, 0.0), v(3, 0.0);
  for (int t = 1; t <= 10; ++t) {
    const double lr = 0.05 / t;
    std::vector<double> g(3);
    double ss = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      g[k] = 2.0 * a[k] * (w[k] - c0[k]);
      ss += g[k] * g[k];
    }
    const double norm = std::sqrt(ss);
    const double scale = norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;
    for (std::size_t k = 0; k < 3; ++k) {
      const double gk = g[k] * scale;
      m[k] = 0.9 * m[k] + 0.1 * gk;
      v[k] = 0.98 * v[k] + 0.02 * gk * gk;
      const double mh = m[k] / (1.0 - std::pow(0.9, t));
      const double vh = v[k] / (1.0 - std::pow(0.98, t));
      w[k] = w[k] * (1.0 - lr * cfg.weight_decay) - lr * mh / (std::sqrt(vh) + 1e-8);
    }
    set_grad(params[0], g);
    const AdamReport report = adam_step(params, state, lr, cfg);
    EXPECT_EQ(report.clipped, norm > cfg.grad_clip);
    EXPECT_NEAR(report.grad_norm, norm, 1e-12);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(params[0].value.data()[k], w[k], 1e-12) << "step " << t;
  }
}

TEST(Adam, NonFiniteGradientSkipsUpdate) {
  auto params = single_param({1.0, 2.0}, true);
  TrainConfig c;
  AdamState state;
  set_grad(params[0], {NAN, 1.0});
  const AdamReport r = adam_step(params, state, 0.1, c);
  EXPECT_TRUE(r.skipped);
  EXPECT_EQ(params[0].value.to_vector(), (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(state.t, 0);
}

TEST(Adam, ClippingBoundsTheUpdateNorm) {
  // After one step the second moment is (1 - beta2) g^2, which recovers the
  // clipped gradient the optimizer actually used.
  auto params = single_param({0.0, 0.0}, false);
  TrainConfig c;
  c.grad_clip = 1.0;
  c.adam_beta1 = 0.0;
  AdamState state;
  set_grad(params[0], {30.0, 40.0});
  const AdamReport r = adam_step(params, state, 1.0, c);
  EXPECT_TRUE(r.clipped);
  EXPECT_DOUBLE_EQ(r.grad_norm, 50.0);
  const double clipped_norm = std::sqrt(state.v[0][0] / 0.02 + state.v[0][1] / 0.02);
  EXPECT_LE(clipped_norm, c.grad_clip + 1e-12);
}

// ---- training loop -----------------------------------------------------------

const std::string kText =
    "It was the best of times, it was the worst of times, it was the age of wisdom, it was the age of "
    "foolishness, it was the epoch of belief, it was the epoch of incredulity, it was the season of Light, "
    "it was the season of Darkness, it was the spring of hope, it was the winter of despair.\n";

struct SmokeSetup {
  ModelConfig model;
  TrainConfig train;
  CharCorpus corpus;
};

SmokeSetup smoke(std::int64_t steps) {
  SmokeSetup s;
  s.model.arch = Arch::hgrn2;
  s.model.layers = 2;
  s.model.dim = 64;
  s.model.heads = 4;
  s.model.vocab_size = kCharVocabSize;
  s.model.seed = 5;
  s.train.lr_peak = 3e-3;
  s.train.warmup_steps = 10;
  s.train.total_steps = steps;
  s.train.batch_size = 4;
  s.train.seq_len = 32;
  s.train.log_interval = 10;
  s.train.seed = 5;
  std::string text;
  for (int k = 0; k < 8; ++k) text += kText;
  s.corpus = make_char_corpus(text, s.train.seq_len);
  return s;
}

TrainResult run_smoke(const SmokeSetup& s, const std::optional<std::filesystem::path>& out) {
  Model model(s.model);
  TrainOptions options;
  options.out_dir = out;
  return train(model, s.train,
               [&](std::int64_t step) { return corpus_batch(s.corpus, step, s.train.batch_size, s.train.seed); },
               options);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(Train, SmokeRunReducesLoss) {
  const TrainResult r = run_smoke(smoke(200), std::nullopt);
  EXPECT_FALSE(r.diverged);
  EXPECT_EQ(r.steps, 200);
  EXPECT_LT(r.last_loss, r.first_loss);
  EXPECT_LT(r.records.back()["loss"].get<double>(), 0.8 * r.first_loss);
}

TEST(Train, LoggedLearningRatesMatchSchedule) {
  const SmokeSetup s = smoke(35);
  const TrainResult r = run_smoke(s, std::nullopt);
  std::vector<std::int64_t> steps;
  for (const auto& rec : r.records) {
    steps.push_back(rec["step"].get<std::int64_t>());
    EXPECT_EQ(rec["lr"].get<double>(), lr_at(rec["step"].get<std::int64_t>(), s.train));
    EXPECT_FALSE(rec.contains("tokens_per_sec"));
  }
  EXPECT_EQ(steps, (std::vector<std::int64_t>{1, 10, 20, 30, 35}));
}

TEST(Train, SameSeedGivesByteIdenticalMetrics) {
  const auto dir = std::filesystem::temp_directory_path() / "hgrn_train_test";
  std::filesystem::remove_all(dir);
  SmokeSetup s = smoke(30);
  s.train.checkpoint_interval = 10;
  run_smoke(s, dir / "a");
  run_smoke(s, dir / "b");
  const std::string a = slurp(dir / "a" / "metrics.jsonl");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(dir / "b" / "metrics.jsonl"));
  EXPECT_EQ(slurp(dir / "a" / "final.bin"), slurp(dir / "b" / "final.bin"));
  EXPECT_TRUE(std::filesystem::exists(dir / "a" / "checkpoint_step10.bin"));
  EXPECT_TRUE(std::filesystem::exists(dir / "a" / "checkpoint_step20.bin"));
  EXPECT_FALSE(std::filesystem::exists(dir / "a" / "checkpoint_step30.bin"));
  std::filesystem::remove_all(dir);
}

TEST(Train, DivergenceGuardStopsAndCheckpoints) {
  const auto dir = std::filesystem::temp_directory_path() / "hgrn_diverge_test";
  std::filesystem::remove_all(dir);
  SmokeSetup s = smoke(50);
  s.train.lr_peak = 1e4;
  s.train.warmup_steps = 0;
  s.train.grad_clip = 0.0;
  s.train.weight_decay = 0.0;
  const TrainResult r = run_smoke(s, dir);
  EXPECT_TRUE(r.diverged);
  EXPECT_LT(r.steps, 50);
  EXPECT_TRUE(std::filesystem::exists(dir / "diverged.bin"));
  EXPECT_EQ(r.records.back()["event"], "diverged");
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace hgrn
