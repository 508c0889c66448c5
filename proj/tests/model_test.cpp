// SPDX-License-Identifier: Apache-2.0

#include "hgrn/model.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "hgrn/checkpoint.hpp"
#include "hgrn/training.hpp"
#include "test_util.hpp"

namespace hgrn {
namespace {

using testing::max_abs_diff;

ModelConfig small_config(Arch arch, std::int64_t layers = 2, std::int64_t dim = 16, std::int64_t heads = 2,
                         std::int64_t vocab = 11) {
  ModelConfig c;
  c.arch = arch;
  c.layers = layers;
  c.dim = dim;
  c.heads = heads;
  c.vocab_size = vocab;
  c.expand = 2;
  c.chunk_size = 4;
  c.seed = 3;
  return c;
}

TokenBatch random_tokens(std::int64_t batch, std::int64_t n, std::int64_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<std::int64_t> pick(0, vocab - 1);
  TokenBatch t{batch, n, {}};
  for (std::int64_t k = 0; k < batch * n; ++k) t.ids.push_back(pick(rng));
  return t;
}

// Spreads weights out from their small initial scale so every nonlinearity is
// exercised away from its linear regime.
void perturb(Model& m, std::uint64_t seed, double stddev) {
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, stddev);
  for (auto& p : m.parameters())
    for (double& v : p.value.mutable_data()) v += noise(rng);
}

constexpr Arch kArchs[] = {Arch::hgrn1, Arch::hgrn2, Arch::hgrn2_pese};

TEST(Model, LogitShape) {
  ModelConfig c = small_config(Arch::hgrn2, 1, 4, 2, 11);
  const Model m(c);
  const Tensor logits = m.forward(random_tokens(1, 3, 11, 1));
  EXPECT_EQ(logits.shape(), (Shape{1, 3, 11}));
}

TEST(Model, ConfigValidationNamesField) {
  ModelConfig c = small_config(Arch::hgrn2, 2, 16, 3);
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("heads"), std::string::npos) << e.what();
  }
  ModelConfig v = small_config(Arch::hgrn1);
  v.vocab_size = 1;
  EXPECT_THROW(v.validate(), ConfigError);
  ModelConfig l = small_config(Arch::hgrn1);
  l.layers = 0;
  EXPECT_THROW(l.validate(), ConfigError);
}

TEST(Model, ConfigJsonRoundTrip) {
  ModelConfig c = small_config(Arch::hgrn2_pese);
  c.pese = PeseVariant::kp;
  c.output_gate = OutputGate::none;
  const ModelConfig back = model_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Model, RejectsOutOfRangeToken) {
  const Model m(small_config(Arch::hgrn2));
  TokenBatch t = random_tokens(1, 4, 11, 2);
  t.ids[2] = 11;
  EXPECT_THROW(m.forward(t), DomainError);
  t.ids[2] = -1;
  EXPECT_THROW(m.forward(t), DomainError);
}

TEST(Model, DeterministicForSeed) {
  for (auto arch : kArchs) {
    const TokenBatch t = random_tokens(2, 9, 11, 3);
    const Model a(small_config(arch));
    const Model b(small_config(arch));
    EXPECT_EQ(a.forward(t).to_vector(), b.forward(t).to_vector()) << to_string(arch);
  }
}

TEST(Model, CausalToTheBit) {
  for (auto arch : kArchs) {
    Model m(small_config(arch));
    perturb(m, 4, 0.3);
    const TokenBatch base = random_tokens(1, 13, 11, 5);
    for (std::int64_t t : {0, 3, 4, 7, 12}) {
      TokenBatch changed = base;
      changed.ids[static_cast<std::size_t>(t)] = (changed.ids[static_cast<std::size_t>(t)] + 1) % 11;
      for (auto path : {ScanPath::chunkwise, ScanPath::sequential}) {
        const Tensor a = m.forward(base, path);
        const Tensor b = m.forward(changed, path);
        for (std::int64_t k = 0; k < t * 11; ++k) ASSERT_EQ(a.data()[k], b.data()[k]) << to_string(arch) << " t=" << t;
        double moved = 0.0;
        for (std::int64_t k = t * 11; k < (t + 1) * 11; ++k) moved += std::abs(a.data()[k] - b.data()[k]);
        EXPECT_GT(moved, 0.0);
      }
    }
  }
}

TEST(Model, PrefixConsistency) {
  for (auto arch : kArchs) {
    Model m(small_config(arch));
    perturb(m, 6, 0.3);
    const TokenBatch full = random_tokens(1, 17, 11, 7);
    const Tensor whole = m.forward(full);
    for (std::int64_t k : {1, 4, 9, 16}) {
      TokenBatch prefix{1, k, std::vector<std::int64_t>(full.ids.begin(), full.ids.begin() + k)};
      const Tensor part = m.forward(prefix);
      const std::vector<double> head(whole.data().begin(), whole.data().begin() + k * 11);
      EXPECT_LT(max_abs_diff(part.to_vector(), head), 1e-12) << to_string(arch) << " k=" << k;
    }
  }
}

TEST(Model, ChunkwiseMatchesSequentialLogits) {
  for (std::int64_t heads : {1, 2, 4}) {
    ModelConfig c = small_config(Arch::hgrn2, 2, 16, heads);
    c.chunk_size = 5;
    Model m(c);
    perturb(m, 8, 0.3);
    const TokenBatch t = random_tokens(3, 23, 11, 9);
    EXPECT_LT(max_abs_diff(m.forward(t, ScanPath::chunkwise).to_vector(), m.forward(t, ScanPath::sequential).to_vector()),
              1e-9);
  }
}

TEST(Model, GenerateMatchesFullForward) {
  for (auto arch : kArchs) {
    Model m(small_config(arch));
    perturb(m, 10, 0.3);
    InferenceState state = m.initial_state();
    const std::vector<std::int64_t> prompt{1, 5, 2};
    const GenerateResult g = m.generate(prompt, 64, state);
    ASSERT_EQ(g.tokens.size(), 67u);
    ASSERT_EQ(g.logits.size(), 64u);
    TokenBatch all{1, 66, std::vector<std::int64_t>(g.tokens.begin(), g.tokens.end() - 1)};
    const Tensor ref = m.forward(all);
    double worst = 0.0;
    for (std::size_t k = 0; k < 64; ++k) {
      const std::size_t pos = 2 + k;
      const std::vector<double> row(ref.data().begin() + pos * 11, ref.data().begin() + (pos + 1) * 11);
      worst = std::max(worst, max_abs_diff(g.logits[k], row));
    }
    EXPECT_LT(worst, 1e-9) << to_string(arch);
  }
}

TEST(Model, GenerateStepCounts) {
  const Model m(small_config(Arch::hgrn2));
  InferenceState state = m.initial_state();
  const GenerateResult g = m.generate({3, 4}, 0, state);
  EXPECT_EQ(g.tokens, (std::vector<std::int64_t>{3, 4}));
  EXPECT_TRUE(g.logits.empty());
  EXPECT_EQ(state.consumed, 0);
  EXPECT_THROW(m.generate({3}, -1, state), ConfigError);
}

TEST(Model, StateSizeIndependentOfLength) {
  Rng rng(11);
  struct Case {
    std::int64_t layers, dim, heads;
  };
  for (const Case c : {Case{1, 8, 2}, Case{3, 12, 3}, Case{2, 16, 1}}) {
    const Model m(small_config(Arch::hgrn2, c.layers, c.dim, c.heads));
    InferenceState state = m.initial_state();
    const std::int64_t dh = c.dim / c.heads;
    const std::int64_t expect = c.layers * c.heads * dh * dh + c.layers * c.dim;
    EXPECT_EQ(state.element_count(), expect);
    m.generate({1, 2}, 20, state);
    EXPECT_EQ(state.element_count(), expect);
  }
}

TEST(Model, ParameterAccounting) {
  const std::int64_t d = 16, V = 11, L = 2;
  const Model m(small_config(Arch::hgrn2, L, d, 2, V));
  const std::int64_t h = m.config().glu_hidden();
  EXPECT_EQ(h, 40);  // 8/3 * 16 = 42.7 -> 40
  std::int64_t embedding = -1, mixer = 0;
  for (const auto& [name, count] : m.parameter_breakdown()) {
    if (name == "embedding") embedding = count;
    if (name.rfind("layers.0.", 0) == 0 && (name.find("_w") != std::string::npos || name.find("_b") != std::string::npos) &&
        name.find("glu") == std::string::npos)
      mixer += count;
  }
  EXPECT_EQ(embedding, V * d);
  EXPECT_EQ(mixer, 3 * d * d + 3 * d + d * d);
  const std::int64_t per_layer = 2 * d + 4 * d * d + 3 * d + 3 * d * h;
  const std::int64_t gamma = L * (d / 2);
  EXPECT_EQ(m.parameter_count(), V * d + gamma + L * per_layer + d + d * V);

  const Model deep(small_config(Arch::hgrn2, 2 * L, d, 2, V));
  const std::int64_t shared = V * d + d + d * V;
  EXPECT_EQ(deep.parameter_count() - shared, 2 * (m.parameter_count() - shared));
}

TEST(Model, OutputNormOption) {
  ModelConfig c = small_config(Arch::hgrn2);
  const std::int64_t plain = Model(c).parameter_count();
  c.output_norm = OutputNorm::rms;
  Model m(c);
  EXPECT_EQ(m.parameter_count(), plain + c.layers * c.dim);
  EXPECT_EQ(model_config_from_json(to_json(c)).output_norm, OutputNorm::rms);
  nlohmann::json legacy = to_json(small_config(Arch::hgrn2));
  legacy.erase("output_norm");
  EXPECT_EQ(model_config_from_json(legacy).output_norm, OutputNorm::none);
  EXPECT_FALSE(parse_output_norm("layer").has_value());

  perturb(m, 21, 0.2);
  const TokenBatch t = random_tokens(2, 9, 11, 22);
  EXPECT_LT(max_abs_diff(m.forward(t).data(), m.forward(t, ScanPath::sequential).data()), 1e-9);

  // With a linear output gate, y is linear in the output projection; the norm
  // removes that scale.
  ModelConfig lin = c;
  lin.output_gate = OutputGate::none;
  Model lm(lin);
  perturb(lm, 25, 1.0);
  const Tensor before = lm.forward(t);
  for (auto& p : lm.parameters())
    if (p.name.find("output_") != std::string::npos)
      for (double& v : p.value.mutable_data()) v *= 3.0;
  EXPECT_LT(max_abs_diff(before.data(), lm.forward(t).data()), 1e-6);

  for (auto arch : kArchs) {
    ModelConfig a = small_config(arch);
    a.output_norm = OutputNorm::rms;
    Model am(a);
    perturb(am, 23, 0.3);
    InferenceState state = am.initial_state();
    const GenerateResult g = am.generate({2, 4}, 16, state);
    TokenBatch all{1, 17, std::vector<std::int64_t>(g.tokens.begin(), g.tokens.end() - 1)};
    const Tensor ref = am.forward(all);
    double worst = 0.0;
    for (std::size_t k = 0; k < 16; ++k) {
      const std::size_t pos = 1 + k;
      const std::vector<double> row(ref.data().begin() + pos * 11, ref.data().begin() + (pos + 1) * 11);
      worst = std::max(worst, max_abs_diff(g.logits[k], row));
    }
    EXPECT_LT(worst, 1e-9) << to_string(arch);
  }

  const TokenBatch fd_tokens = random_tokens(1, 8, 11, 24);
  const std::vector<std::int64_t> targets{1, 2, 3, 4, 5, 6, 7, 8};
  std::vector<Tensor*> params;
  for (auto& p : m.parameters()) params.push_back(&p.value);
  EXPECT_LT(testing::gradient_check(params, [&] { return cross_entropy(m.forward(fd_tokens), targets); }), 1e-5);
}

TEST(Model, GluReducesToMlpWhenGateIsOne) {
  Rng rng(12);
  const std::int64_t d = 3, h = 5;
  // Rows of x are e_0, and gate row 0 is all ones, so the gate branch is exactly 1.
  const Tensor x = Tensor::from({2, d}, {1, 0, 0, 1, 0, 0});
  std::vector<double> gate(d * h, 0.0);
  for (std::int64_t k = 0; k < h; ++k) gate[static_cast<std::size_t>(k)] = 1.0;
  const Tensor up = randn({d, h}, rng);
  const Tensor down = randn({h, d}, rng);
  const Tensor y = glu(x, Tensor::from({d, h}, gate), up, down);
  for (std::int64_t r = 0; r < 2; ++r)
    for (std::int64_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::int64_t k = 0; k < h; ++k) {
        const double u = up.at({0, k});
        acc += u / (1.0 + std::exp(-u)) * down.at({k, j});
      }
      EXPECT_NEAR(y.at({r, j}), acc, 1e-14);
    }
}

TEST(Model, RmsNormMatchesDefinition) {
  Rng rng(13);
  const Tensor x = randn({3, 5}, rng);
  const Tensor w = randn({5}, rng);
  const Tensor y = rms_norm(x, w);
  for (std::int64_t r = 0; r < 3; ++r) {
    double ss = 0.0;
    for (std::int64_t j = 0; j < 5; ++j) ss += x.at({r, j}) * x.at({r, j});
    const double s = 1.0 / std::sqrt(ss / 5.0 + 1e-6);
    for (std::int64_t j = 0; j < 5; ++j) EXPECT_NEAR(y.at({r, j}), x.at({r, j}) * s * w.at({j}), 1e-15);
  }
}

TEST(Model, RmsNormGradients) {
  Rng rng(14);
  Tensor x = randn({4, 6}, rng, 1.0, true);
  Tensor w = randn({6}, rng, 1.0, true);
  const Tensor probe = randn({4, 6}, rng);
  EXPECT_LT(testing::gradient_check({&x, &w}, [&] { return sum(rms_norm(x, w) * probe); }), 1e-8);
}

TEST(Model, FullModelGradientsMatchFiniteDifferences) {
  Model m(small_config(Arch::hgrn2, 2, 16, 2, 11));
  perturb(m, 15, 0.2);
  const TokenBatch t = random_tokens(1, 12, 11, 16);
  Rng rng(17);
  std::vector<std::int64_t> targets(12);
  for (auto& v : targets) v = std::uniform_int_distribution<std::int64_t>(0, 10)(rng);
  std::vector<Tensor*> params;
  for (auto& p : m.parameters()) params.push_back(&p.value);
  const double err = testing::gradient_check(params, [&] { return cross_entropy(m.forward(t), targets); });
  EXPECT_LT(err, 1e-5);
}

TEST(Model, SaveLoadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "hgrn_model_test";
  std::filesystem::create_directories(dir);
  for (auto arch : kArchs) {
    Model m(small_config(arch));
    perturb(m, 18, 0.1);
    const auto path = dir / (std::string(to_string(arch)) + ".bin");
    m.save(path);
    const Model back = Model::load(path);
    EXPECT_EQ(to_json(back.config()), to_json(m.config()));
    const TokenBatch t = random_tokens(2, 6, 11, 19);
    EXPECT_EQ(back.forward(t).to_vector(), m.forward(t).to_vector()) << to_string(arch);
  }
  EXPECT_THROW(Model::load(dir / "missing.bin"), CheckpointError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace hgrn
