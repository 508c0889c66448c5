// SPDX-License-Identifier: Apache-2.0

#include "hgrn/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace hgrn {

namespace {

constexpr std::uint64_t kEvalStream = 0x6576616cull;  // "eval"

std::int64_t argmax_row(const double* row, std::int64_t n) {
  return static_cast<std::int64_t>(std::max_element(row, row + n) - row);
}

}  // namespace

// ---- MQAR ------------------------------------------------------------------

void MqarConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("mqar: " + msg); };
  if (num_kv_pairs < 1) fail("num_kv_pairs must be >= 1");
  if (vocab_size < 4) fail("vocab_size must be >= 4");
  const std::int64_t keys = vocab_size / 2 - 1;
  const std::int64_t values = vocab_size - vocab_size / 2;
  if (keys < num_kv_pairs || values < num_kv_pairs) {
    fail("vocab_size " + std::to_string(vocab_size) + " cannot hold " + std::to_string(num_kv_pairs) +
         " distinct keys and values");
  }
  if (num_queries < 0 || queries() > num_kv_pairs) fail("num_queries must lie in [0, num_kv_pairs]");
  const std::int64_t slots = (seq_len - query_region_start()) / 2;
  if (slots < queries()) {
    fail("seq_len " + std::to_string(seq_len) + " leaves " + std::to_string(slots) + " query slots for " +
         std::to_string(queries()) + " queries");
  }
}

MqarInstance generate_mqar_instance(const MqarConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::int64_t K = cfg.num_kv_pairs, V = cfg.vocab_size, half = V / 2;
  std::vector<std::int64_t> keys(static_cast<std::size_t>(half - 1));
  std::iota(keys.begin(), keys.end(), 1);
  std::vector<std::int64_t> values(static_cast<std::size_t>(V - half));
  std::iota(values.begin(), values.end(), half);
  std::shuffle(keys.begin(), keys.end(), rng);
  std::shuffle(values.begin(), values.end(), rng);

  MqarInstance inst;
  inst.tokens.resize(static_cast<std::size_t>(cfg.seq_len));
  inst.targets.assign(static_cast<std::size_t>(cfg.seq_len), kIgnoreIndex);
  std::uniform_int_distribution<std::int64_t> noise(0, V - 1);
  for (auto& t : inst.tokens) t = noise(rng);
  for (std::int64_t k = 0; k < K; ++k) {
    inst.tokens[static_cast<std::size_t>(2 * k)] = keys[static_cast<std::size_t>(k)];
    inst.tokens[static_cast<std::size_t>(2 * k + 1)] = values[static_cast<std::size_t>(k)];
  }

  const std::int64_t start = cfg.query_region_start();
  std::vector<std::int64_t> slots(static_cast<std::size_t>((cfg.seq_len - start) / 2));
  std::iota(slots.begin(), slots.end(), 0);
  std::shuffle(slots.begin(), slots.end(), rng);
  std::vector<std::int64_t> order(static_cast<std::size_t>(K));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::int64_t q = 0; q < cfg.queries(); ++q) {
    const std::int64_t pair = order[static_cast<std::size_t>(q)];
    const auto pos = static_cast<std::size_t>(start + 2 * slots[static_cast<std::size_t>(q)]);
    inst.tokens[pos] = keys[static_cast<std::size_t>(pair)];
    inst.tokens[pos + 1] = values[static_cast<std::size_t>(pair)];
    inst.targets[pos] = values[static_cast<std::size_t>(pair)];
  }
  return inst;
}

LmBatch generate_mqar(const MqarConfig& cfg, std::int64_t count, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  LmBatch batch;
  batch.inputs.batch = count;
  batch.inputs.seq_len = cfg.seq_len;
  batch.inputs.ids.reserve(static_cast<std::size_t>(count * cfg.seq_len));
  batch.targets.reserve(static_cast<std::size_t>(count * cfg.seq_len));
  for (std::int64_t b = 0; b < count; ++b) {
    const MqarInstance inst = generate_mqar_instance(cfg, rng);
    batch.inputs.ids.insert(batch.inputs.ids.end(), inst.tokens.begin(), inst.tokens.end());
    batch.targets.insert(batch.targets.end(), inst.targets.begin(), inst.targets.end());
  }
  return batch;
}

nlohmann::json mqar_to_json(const MqarConfig& cfg, const LmBatch& set, std::uint64_t seed) {
  nlohmann::json tokens = nlohmann::json::array(), targets = nlohmann::json::array();
  const auto n = static_cast<std::ptrdiff_t>(set.inputs.seq_len);
  for (std::int64_t b = 0; b < set.inputs.batch; ++b) {
    const auto off = static_cast<std::ptrdiff_t>(b) * n;
    tokens.push_back(std::vector<std::int64_t>(set.inputs.ids.begin() + off, set.inputs.ids.begin() + off + n));
    targets.push_back(std::vector<std::int64_t>(set.targets.begin() + off, set.targets.begin() + off + n));
  }
  return {{"meta",
           {{"seq_len", cfg.seq_len},
            {"num_kv_pairs", cfg.num_kv_pairs},
            {"num_queries", cfg.queries()},
            {"vocab_size", cfg.vocab_size},
            {"key_vocab", {1, cfg.vocab_size / 2}},
            {"value_vocab", {cfg.vocab_size / 2, cfg.vocab_size}},
            {"ignore_index", kIgnoreIndex},
            {"seed", seed}}},
          {"tokens", std::move(tokens)},
          {"targets", std::move(targets)}};
}

double evaluate_recall(const LogitsFn& logits_fn, const LmBatch& eval_set, std::int64_t batch_size) {
  const std::int64_t B = eval_set.inputs.batch, N = eval_set.inputs.seq_len;
  if (B == 0) throw DomainError("evaluate_recall: empty evaluation set");
  std::int64_t hits = 0, total = 0;
  for (std::int64_t first = 0; first < B; first += batch_size) {
    const std::int64_t count = std::min(batch_size, B - first);
    const auto begin = eval_set.inputs.ids.begin() + static_cast<std::ptrdiff_t>(first * N);
    const TokenBatch part{count, N, std::vector<std::int64_t>(begin, begin + static_cast<std::ptrdiff_t>(count * N))};
    NoGradGuard no_grad;
    const Tensor logits = logits_fn(part);
    const std::int64_t V = logits.dim(-1);
    const std::int64_t half = V / 2;
    for (std::int64_t r = 0; r < count * N; ++r) {
      const auto target = eval_set.targets[static_cast<std::size_t>(first * N + r)];
      if (target == kIgnoreIndex) continue;
      ++total;
      if (half + argmax_row(logits.data().data() + r * V + half, V - half) == target) ++hits;
    }
  }
  if (total == 0) throw DomainError("evaluate_recall: evaluation set has no query positions");
  return static_cast<double>(hits) / static_cast<double>(total);
}

double evaluate_recall(const Model& model, const LmBatch& eval_set, std::int64_t batch_size) {
  return evaluate_recall([&](const TokenBatch& b) { return model.forward(b); }, eval_set, batch_size);
}

// ---- character corpus ------------------------------------------------------

std::vector<std::int64_t> tokenize(std::string_view text) {
  std::vector<std::int64_t> out(text.size());
  std::transform(text.begin(), text.end(), out.begin(),
                 [](char c) { return static_cast<std::int64_t>(static_cast<unsigned char>(c)); });
  return out;
}

std::string detokenize(const std::vector<std::int64_t>& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (auto t : tokens)
    if (t >= 0 && t < kByteVocab) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  return out;
}

CharCorpus make_char_corpus(std::string_view text, std::int64_t seq_len, double valid_fraction) {
  if (seq_len < 1) throw ConfigError("seq_len must be >= 1");
  if (!(valid_fraction > 0.0 && valid_fraction < 1.0)) throw ConfigError("valid_fraction must lie in (0, 1)");
  if (text.empty()) throw DomainError("char corpus is empty");
  CharCorpus c;
  c.tokens = tokenize(text);
  c.seq_len = seq_len;
  const auto n = static_cast<std::int64_t>(c.tokens.size());
  c.split_point = n - static_cast<std::int64_t>(std::llround(valid_fraction * static_cast<double>(n)));
  const std::int64_t span = seq_len + 1;
  for (std::int64_t s = 0; s + span <= c.split_point; s += span) c.train_windows.push_back(s);
  for (std::int64_t s = c.split_point; s + span <= n; s += span) c.valid_windows.push_back(s);
  if (c.train_windows.empty() || c.valid_windows.empty()) {
    throw DomainError("char corpus of " + std::to_string(n) + " bytes is too short for seq_len " +
                      std::to_string(seq_len));
  }
  return c;
}

CharCorpus load_char_corpus(const std::filesystem::path& path, std::int64_t seq_len, double valid_fraction) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return make_char_corpus(text.str(), seq_len, valid_fraction);
}

namespace {

void append_window(const CharCorpus& c, std::int64_t start, LmBatch& batch) {
  const auto b = c.tokens.begin() + static_cast<std::ptrdiff_t>(start);
  const auto n = static_cast<std::ptrdiff_t>(c.seq_len);
  batch.inputs.ids.insert(batch.inputs.ids.end(), b, b + n);
  batch.targets.insert(batch.targets.end(), b + 1, b + n + 1);
}

}  // namespace

LmBatch corpus_batch(const CharCorpus& corpus, std::int64_t step, std::int64_t batch_size, std::uint64_t seed) {
  const auto& windows = corpus.train_windows;
  const auto count = static_cast<std::int64_t>(windows.size());
  LmBatch batch;
  batch.inputs.batch = batch_size;
  batch.inputs.seq_len = corpus.seq_len;
  std::int64_t cached_epoch = -1;
  std::vector<std::int64_t> order;
  for (std::int64_t k = 0; k < batch_size; ++k) {
    const std::int64_t visit = (step - 1) * batch_size + k;
    const std::int64_t epoch = visit / count;
    if (epoch != cached_epoch) {
      order.resize(static_cast<std::size_t>(count));
      std::iota(order.begin(), order.end(), 0);
      Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
      std::shuffle(order.begin(), order.end(), rng);
      cached_epoch = epoch;
    }
    append_window(corpus, windows[static_cast<std::size_t>(order[static_cast<std::size_t>(visit % count)])], batch);
  }
  return batch;
}

LmBatch corpus_slice(const CharCorpus& corpus, Split split, std::int64_t first, std::int64_t count) {
  const auto& windows = corpus.windows(split);
  count = std::min<std::int64_t>(count, static_cast<std::int64_t>(windows.size()) - first);
  LmBatch batch;
  batch.inputs.batch = std::max<std::int64_t>(count, 0);
  batch.inputs.seq_len = corpus.seq_len;
  for (std::int64_t k = 0; k < count; ++k) append_window(corpus, windows[static_cast<std::size_t>(first + k)], batch);
  return batch;
}

double evaluate_loss(const Model& model, const CharCorpus& corpus, std::int64_t max_windows, std::int64_t batch_size) {
  auto total = static_cast<std::int64_t>(corpus.valid_windows.size());
  if (max_windows > 0) total = std::min(total, max_windows);
  NoGradGuard no_grad;
  double nll = 0.0;
  std::int64_t positions = 0;
  for (std::int64_t first = 0; first < total; first += batch_size) {
    const LmBatch b = corpus_slice(corpus, Split::valid, first, std::min(batch_size, total - first));
    const auto n = static_cast<std::int64_t>(b.targets.size());
    nll += cross_entropy(model.forward(b.inputs), b.targets).item() * static_cast<double>(n);
    positions += n;
  }
  return nll / static_cast<double>(positions);
}

// ---- experiment drivers ----------------------------------------------------

std::vector<double> recall_lr_grid() { return {1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2}; }

MqarOutcome run_mqar(const MqarRun& run, const TrainOptions& options) {
  run.task.validate();
  ModelConfig mc = run.model;
  mc.seed = run.train.seed;
  Model model(mc);
  const std::uint64_t seed = run.train.seed;
  const TrainResult tr = train(model, run.train, [&](std::int64_t step) {
    return generate_mqar(run.task, run.train.batch_size, mix_seed(seed, static_cast<std::uint64_t>(step)));
  }, options);
  MqarOutcome out;
  out.final_loss = tr.last_loss;
  out.diverged = tr.diverged;
  if (!tr.diverged) {
    out.accuracy = evaluate_recall(model, generate_mqar(run.task, run.eval_examples, mix_seed(seed, kEvalStream)));
  }
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

SweepSummary sweep_mqar(const MqarRun& base, const std::vector<double>& lrs, const std::vector<std::uint64_t>& seeds,
                        const std::function<void(const SweepPoint&)>& on_point) {
  SweepSummary s;
  for (auto seed : seeds) {
    double best = 0.0;
    for (double lr : lrs) {
      MqarRun run = base;
      run.train.lr_peak = lr;
      run.train.seed = seed;
      SweepPoint p{lr, seed, run_mqar(run)};
      best = std::max(best, p.outcome.accuracy);
      if (on_point) on_point(p);
      s.points.push_back(p);
    }
    s.best_per_seed.push_back(best);
  }
  s.median_best = median(s.best_per_seed);
  return s;
}

CharLmOutcome run_charlm(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const CharCorpus& corpus,
                         std::int64_t eval_windows, const TrainOptions& options) {
  if (corpus.seq_len != train_cfg.seq_len) {
    throw ConfigError("seq_len: corpus windows hold " + std::to_string(corpus.seq_len) + " tokens, training expects " +
                      std::to_string(train_cfg.seq_len));
  }
  ModelConfig mc = model_cfg;
  mc.seed = train_cfg.seed;
  Model model(mc);
  const TrainResult tr = train(model, train_cfg, [&](std::int64_t step) {
    return corpus_batch(corpus, step, train_cfg.batch_size, train_cfg.seed);
  }, options);
  CharLmOutcome out;
  out.first_loss = tr.first_loss;
  out.final_train_loss = tr.last_loss;
  out.diverged = tr.diverged;
  out.valid_loss = tr.diverged ? std::numeric_limits<double>::infinity() : evaluate_loss(model, corpus, eval_windows);
  return out;
}

}  // namespace hgrn
