// SPDX-License-Identifier: Apache-2.0

#include "hgrn/tasks.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

namespace hgrn {
namespace {

// ---- MQAR ------------------------------------------------------------------

TEST(Mqar, MinimalInstance) {
  MqarConfig c{8, 1, 1, 16};
  Rng rng(1);
  const MqarInstance inst = generate_mqar_instance(c, rng);
  ASSERT_EQ(inst.tokens.size(), 8u);
  const std::int64_t key = inst.tokens[0], value = inst.tokens[1];
  EXPECT_GE(key, 1);
  EXPECT_LT(key, 8);
  EXPECT_GE(value, 8);
  EXPECT_LT(value, 16);
  int targets = 0;
  for (std::size_t p = 0; p < 8; ++p) {
    if (inst.targets[p] == kIgnoreIndex) continue;
    ++targets;
    EXPECT_GE(p, 4u);
    EXPECT_EQ(inst.tokens[p], key);
    EXPECT_EQ(inst.tokens[p + 1], value);
    EXPECT_EQ(inst.targets[p], value);
  }
  EXPECT_EQ(targets, 1);
}

TEST(Mqar, InfeasibleSizesRejected) {
  EXPECT_THROW(generate_mqar(MqarConfig{16, 8, 0, 64}, 1, 0), ConfigError);   // no room for queries
  EXPECT_THROW(generate_mqar(MqarConfig{128, 8, 0, 16}, 1, 0), ConfigError);  // 7 keys for 8 pairs
  EXPECT_THROW(generate_mqar(MqarConfig{128, 4, 9, 64}, 1, 0), ConfigError);  // more queries than pairs
  EXPECT_THROW(generate_mqar(MqarConfig{128, 0, 0, 64}, 1, 0), ConfigError);
}

TEST(Mqar, SameSeedSameBytes) {
  const MqarConfig c;
  const LmBatch a = generate_mqar(c, 16, 42);
  const LmBatch b = generate_mqar(c, 16, 42);
  EXPECT_EQ(a.inputs.ids, b.inputs.ids);
  EXPECT_EQ(a.targets, b.targets);
  EXPECT_NE(a.inputs.ids, generate_mqar(c, 16, 43).inputs.ids);
}

TEST(Mqar, AuditTenThousandInstances) {
  const MqarConfig c{128, 8, 0, 64};
  Rng rng(7);
  const std::int64_t half = c.vocab_size / 2;
  for (int n = 0; n < 10000; ++n) {
    const MqarInstance inst = generate_mqar_instance(c, rng);
    std::map<std::int64_t, std::int64_t> bound;
    for (std::int64_t k = 0; k < c.num_kv_pairs; ++k) {
      const std::int64_t key = inst.tokens[static_cast<std::size_t>(2 * k)];
      const std::int64_t value = inst.tokens[static_cast<std::size_t>(2 * k + 1)];
      ASSERT_TRUE(key >= 1 && key < half);
      ASSERT_TRUE(value >= half && value < c.vocab_size);
      ASSERT_TRUE(bound.emplace(key, value).second) << "key bound twice in instance " << n;
    }
    std::set<std::int64_t> queried;
    for (std::size_t p = 0; p < inst.tokens.size(); ++p) {
      ASSERT_TRUE(inst.tokens[p] >= 0 && inst.tokens[p] < c.vocab_size);
      const std::int64_t t = inst.targets[p];
      if (t == kIgnoreIndex) continue;
      ASSERT_GE(static_cast<std::int64_t>(p), c.query_region_start());
      ASSERT_EQ((static_cast<std::int64_t>(p) - c.query_region_start()) % 2, 0);
      const auto it = bound.find(inst.tokens[p]);
      ASSERT_NE(it, bound.end()) << "query key was never bound";
      ASSERT_EQ(it->second, t);
      ASSERT_EQ(inst.tokens[p + 1], t);
      queried.insert(inst.tokens[p]);
    }
    ASSERT_EQ(static_cast<std::int64_t>(queried.size()), c.queries());
  }
}

TEST(Mqar, JsonExport) {
  const MqarConfig c{32, 2, 0, 16};
  const LmBatch set = generate_mqar(c, 3, 9);
  const nlohmann::json j = mqar_to_json(c, set, 9);
  EXPECT_EQ(j["meta"]["num_kv_pairs"], 2);
  EXPECT_EQ(j["meta"]["seed"], 9);
  ASSERT_EQ(j["tokens"].size(), 3u);
  ASSERT_EQ(j["tokens"][1].size(), 32u);
  EXPECT_EQ(j["tokens"][1][5].get<std::int64_t>(), set.inputs.ids[32 + 5]);
  EXPECT_EQ(j["targets"][2][31].get<std::int64_t>(), set.targets[64 + 31]);
}

// Looks back for the first earlier occurrence of each token and puts all mass
// on the token that followed it.
Tensor copy_oracle(const TokenBatch& b, std::int64_t vocab) {
  std::vector<double> logits(static_cast<std::size_t>(b.batch * b.seq_len * vocab), 0.0);
  for (std::int64_t s = 0; s < b.batch; ++s) {
    const auto* ids = b.ids.data() + s * b.seq_len;
    for (std::int64_t p = 0; p < b.seq_len; ++p)
      for (std::int64_t q = 0; q + 1 < p; ++q)
        if (ids[q] == ids[p]) {
          logits[static_cast<std::size_t>((s * b.seq_len + p) * vocab + ids[q + 1])] = 1.0;
          break;
        }
  }
  return Tensor::from({b.batch, b.seq_len, vocab}, std::move(logits));
}

TEST(Recall, CopyOracleScoresOne) {
  const MqarConfig c;
  const LmBatch set = generate_mqar(c, 50, 3);
  EXPECT_EQ(evaluate_recall([&](const TokenBatch& b) { return copy_oracle(b, c.vocab_size); }, set, 16), 1.0);
}

TEST(Recall, UntrainedModelNearChance) {
  const MqarConfig c;
  ModelConfig mc;
  mc.dim = 16;
  mc.layers = 1;
  mc.heads = 2;
  mc.vocab_size = c.vocab_size;
  const Model m(mc);
  const LmBatch set = generate_mqar(c, 400, 4);
  const double acc = evaluate_recall(m, set);
  const double p = 2.0 / static_cast<double>(c.vocab_size);
  const double sigma = std::sqrt(p * (1.0 - p) / (400.0 * static_cast<double>(c.queries())));
  EXPECT_NEAR(acc, p, 3.0 * sigma);
}

TEST(Recall, InvariantUnderValueRelabeling) {
  const MqarConfig c;
  const std::int64_t V = c.vocab_size, half = V / 2;
  ModelConfig mc;
  mc.dim = 16;
  mc.layers = 1;
  mc.vocab_size = V;
  Model m(mc);
  Rng rng(5);
  for (auto& p : m.parameters())
    for (double& v : p.value.mutable_data()) v += std::normal_distribution<double>(0.0, 0.5)(rng);

  std::vector<std::int64_t> perm(static_cast<std::size_t>(V)), inverse(static_cast<std::size_t>(V));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin() + half, perm.end(), rng);
  for (std::int64_t k = 0; k < V; ++k) inverse[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])] = k;

  const LmBatch set = generate_mqar(c, 64, 6);
  LmBatch relabeled = set;
  for (auto& t : relabeled.inputs.ids) t = perm[static_cast<std::size_t>(t)];
  for (auto& t : relabeled.targets)
    if (t != kIgnoreIndex) t = perm[static_cast<std::size_t>(t)];
  // The relabeled model undoes the permutation on its input and applies it to its output.
  const LogitsFn relabeled_model = [&](const TokenBatch& b) {
    TokenBatch original = b;
    for (auto& t : original.ids) t = inverse[static_cast<std::size_t>(t)];
    const Tensor logits = m.forward(original);
    std::vector<double> out(logits.data().size());
    for (std::size_t r = 0; r < out.size() / static_cast<std::size_t>(V); ++r)
      for (std::int64_t k = 0; k < V; ++k)
        out[r * static_cast<std::size_t>(V) + static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])] =
            logits.data()[r * static_cast<std::size_t>(V) + static_cast<std::size_t>(k)];
    return Tensor::from(logits.shape(), std::move(out));
  };
  EXPECT_EQ(evaluate_recall(m, set), evaluate_recall(relabeled_model, relabeled));
}

TEST(Recall, EmptySetRejected) {
  const LmBatch empty;
  EXPECT_THROW(evaluate_recall([](const TokenBatch&) { return Tensor::zeros({0, 0, 4}); }, empty), DomainError);
}

// ---- char corpus -------------------------------------------------------------

TEST(CharCorpus, TokenizeRoundTrip) {
  const std::string text = "plain ascii, tabs\t, newlines\n and UTF-8: \xC3\xA9\xE2\x82\xAC\xF0\x9F\x98\x80";
  const auto tokens = tokenize(text);
  EXPECT_EQ(tokens.size(), text.size());
  for (auto t : tokens) EXPECT_TRUE(t >= 0 && t < kByteVocab);
  EXPECT_EQ(detokenize(tokens), text);
  std::vector<std::int64_t> with_specials = tokens;
  with_specials.insert(with_specials.begin(), kBosToken);
  with_specials.push_back(kPadToken);
  EXPECT_EQ(detokenize(with_specials), text);
}

TEST(CharCorpus, SplitBookkeeping) {
  std::string text;
  for (int k = 0; k < 500; ++k) text += static_cast<char>('a' + k % 26);
  const CharCorpus c = make_char_corpus(text, 15, 0.2);
  const auto n = static_cast<std::int64_t>(c.tokens.size());
  EXPECT_EQ(c.split_point, 400);
  EXPECT_DOUBLE_EQ(static_cast<double>(c.split_point) / n + static_cast<double>(n - c.split_point) / n, 1.0);
  for (auto s : c.train_windows) EXPECT_LE(s + 16, c.split_point);
  for (auto s : c.valid_windows) {
    EXPECT_GE(s, c.split_point);
    EXPECT_LE(s + 16, n);
  }
  EXPECT_EQ(c.train_windows.size(), 25u);  // 400 / 16
  EXPECT_EQ(c.valid_windows.size(), 6u);   // 100 / 16
}

TEST(CharCorpus, BatchesAreShiftedAndDeterministic) {
  std::string text;
  for (int k = 0; k < 3000; ++k) text += static_cast<char>(' ' + (k * 7) % 90);
  const CharCorpus c = make_char_corpus(text, 20);
  for (std::int64_t step = 1; step <= 30; ++step) {
    const LmBatch a = corpus_batch(c, step, 4, 11);
    const LmBatch b = corpus_batch(c, step, 4, 11);
    ASSERT_EQ(a.inputs.ids, b.inputs.ids);
    ASSERT_EQ(a.targets, b.targets);
    ASSERT_EQ(a.inputs.batch, 4);
    ASSERT_EQ(a.inputs.seq_len, 20);
    for (std::int64_t r = 0; r < 4; ++r)
      for (std::int64_t p = 0; p + 1 < 20; ++p)
        ASSERT_EQ(a.targets[static_cast<std::size_t>(r * 20 + p)], a.inputs.ids[static_cast<std::size_t>(r * 20 + p + 1)]);
  }
  EXPECT_NE(corpus_batch(c, 1, 4, 11).inputs.ids, corpus_batch(c, 1, 4, 12).inputs.ids);
}

TEST(CharCorpus, EpochVisitsEveryTrainingWindowOnce) {
  std::string text;
  for (int k = 0; k < 2000; ++k) text += static_cast<char>('A' + (k * 13) % 50);
  const CharCorpus c = make_char_corpus(text, 9);
  const auto windows = static_cast<std::int64_t>(c.train_windows.size());
  std::multiset<std::vector<std::int64_t>> seen;
  const std::int64_t steps = windows / 5;
  for (std::int64_t step = 1; step <= steps; ++step) {
    const LmBatch b = corpus_batch(c, step, 5, 3);
    for (std::int64_t r = 0; r < 5; ++r)
      seen.insert(std::vector<std::int64_t>(b.inputs.ids.begin() + r * 9, b.inputs.ids.begin() + (r + 1) * 9));
  }
  EXPECT_EQ(static_cast<std::int64_t>(seen.size()), steps * 5);
  std::set<std::vector<std::int64_t>> all;
  for (auto s : c.train_windows)
    all.insert(std::vector<std::int64_t>(c.tokens.begin() + s, c.tokens.begin() + s + 9));
  for (const auto& w : seen) EXPECT_TRUE(all.count(w));
}

TEST(CharCorpus, FileErrors) {
  const auto dir = std::filesystem::temp_directory_path() / "hgrn_corpus_test";
  std::filesystem::create_directories(dir);
  EXPECT_THROW(load_char_corpus(dir / "missing.txt", 8), std::runtime_error);
  { std::ofstream(dir / "empty.txt"); }
  EXPECT_THROW(load_char_corpus(dir / "empty.txt", 8), DomainError);
  {
    std::ofstream out(dir / "ok.txt");
    for (int k = 0; k < 100; ++k) out << "line " << k << "\n";
  }
  const CharCorpus c = load_char_corpus(dir / "ok.txt", 8);
  EXPECT_EQ(detokenize(c.tokens).substr(0, 7), "line 0\n");
  std::filesystem::remove_all(dir);
}

TEST(CharCorpus, UntrainedLossNearUniform) {
  std::string text;
  for (int k = 0; k < 1500; ++k) text += static_cast<char>('a' + (k * k) % 17);
  const CharCorpus c = make_char_corpus(text, 16);
  ModelConfig mc;
  mc.dim = 16;
  mc.layers = 1;
  mc.vocab_size = kCharVocabSize;
  const Model m(mc);
  const double loss = evaluate_loss(m, c);
  EXPECT_NEAR(loss, std::log(static_cast<double>(kCharVocabSize)), 0.05);
}

TEST(Median, OddAndEven) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
}

}  // namespace
}  // namespace hgrn
