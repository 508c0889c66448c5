// SPDX-License-Identifier: Apache-2.0
//
// Acceptance runner: one PASS/FAIL line per criterion. Tolerances and run
// sizes are fixed here; `--only` selects criteria, `--out` receives the CSVs.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hgrn/chunkwise.hpp"
#include "hgrn/tasks.hpp"
#include "hgrn/verify.hpp"

namespace fs = std::filesystem;
using namespace hgrn;

namespace {

// Criterion 6: associative recall sweep.
constexpr std::int64_t kRecallDim = 64;
constexpr std::int64_t kRecallLayers = 2;
constexpr std::int64_t kRecallSeqLen = 128;
constexpr std::int64_t kRecallPairs = 8;
constexpr std::int64_t kRecallVocab = 64;
constexpr std::int64_t kRecallSteps = 600;
constexpr std::int64_t kRecallBatch = 16;
constexpr std::int64_t kRecallEval = 256;
constexpr double kRecallMargin = 0.1;

// Criterion 7: char-LM expansion ratio.
constexpr std::int64_t kLmDim = 128;
constexpr std::int64_t kLmLayers = 4;
constexpr std::int64_t kLmSteps = 2000;
constexpr std::int64_t kLmBatch = 8;
constexpr std::int64_t kLmSeqLen = 64;
constexpr double kLmLr = 2e-3;

// Criterion 8: throughput.
constexpr std::int64_t kBenchN = 1024;
constexpr std::int64_t kBenchC = 64;
constexpr std::int64_t kBenchHeadDim = 64;
constexpr std::int64_t kBenchHeads = 4;
constexpr double kBenchMinSpeedup = 2.0;

const std::vector<std::uint64_t> kSeeds{0, 1, 2};

struct Outcome {
  bool pass = false;
  std::string detail;
};

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

// Worst failing check, or the suite summary when everything passes.
std::string suite_detail(const SuiteReport& r) {
  std::string detail = std::to_string(r.pass_count()) + "/" + std::to_string(r.checks.size()) + " checks";
  for (const auto& c : r.checks)
    if (!c.pass) return detail + "; first failure: " + c.name + " (" + c.detail + ")";
  return detail;
}

Outcome criterion_equiv() {
  const auto t0 = std::chrono::steady_clock::now();
  const SuiteReport r = verify_equiv(0, 100);
  const double secs = elapsed(t0);
  return {r.passed() && r.checks.size() == 100 && secs < 60.0, suite_detail(r) + ", " + fixed(secs, 1) + " s (< 60)"};
}

Outcome criterion_grad() {
  const auto t0 = std::chrono::steady_clock::now();
  const SuiteReport r = verify_grad(0);
  const double secs = elapsed(t0);
  return {r.passed() && secs < 120.0, suite_detail(r) + " (one per parameter tensor), " + fixed(secs, 1) + " s (< 120)"};
}

Outcome criterion_heads() {
  const SuiteReport r = verify_heads(0, 20);
  return {r.passed() && r.checks.size() == 20, suite_detail(r)};
}

Outcome criterion_bounds() {
  const SuiteReport r = verify_bounds(0, 10);
  return {r.passed() && r.checks.size() == 10, suite_detail(r)};
}

Outcome criterion_params() {
  const SuiteReport r = verify_params(0, 20);
  return {r.passed(), suite_detail(r)};
}

Outcome criterion_recall(const fs::path& out) {
  const auto t0 = std::chrono::steady_clock::now();
  std::ofstream csv(out / "mqar_sweep.csv");
  csv << "arch,d_h,lr,seed,accuracy,final_loss,diverged\n";

  MqarRun base;
  base.model.layers = kRecallLayers;
  base.model.dim = kRecallDim;
  base.model.vocab_size = kRecallVocab;
  base.task = {kRecallSeqLen, kRecallPairs, 0, kRecallVocab};
  base.train.seq_len = kRecallSeqLen;
  base.train.batch_size = kRecallBatch;
  base.train.total_steps = kRecallSteps;
  base.train.warmup_steps = kRecallSteps / 10;
  base.train.schedule = Schedule::cosine;
  base.train.log_interval = kRecallSteps;
  base.eval_examples = kRecallEval;

  double best[2] = {0.0, 0.0};
  const Arch archs[2] = {Arch::hgrn1, Arch::hgrn2};
  for (int a = 0; a < 2; ++a) {
    MqarRun run = base;
    run.model.arch = archs[a];
    run.model.heads = 1;  // d_h = d for hgrn2
    const std::int64_t dh = archs[a] == Arch::hgrn2 ? kRecallDim : 1;
    const SweepSummary s = sweep_mqar(run, recall_lr_grid(), kSeeds, [&](const SweepPoint& p) {
      csv << to_string(archs[a]) << ',' << dh << ',' << p.lr << ',' << p.seed << ',' << p.outcome.accuracy << ','
          << p.outcome.final_loss << ',' << p.outcome.diverged << '\n';
      csv.flush();
      std::cerr << "  mqar " << to_string(archs[a]) << " lr " << p.lr << " seed " << p.seed << ": acc "
                << fixed(p.outcome.accuracy, 4) << " (" << fixed(elapsed(t0), 0) << " s)\n";
    });
    best[a] = s.median_best;
  }
  const double secs = elapsed(t0);
  const double margin = best[1] - best[0];
  csv << "# median best accuracy: hgrn1 " << best[0] << ", hgrn2 " << best[1] << "; runtime " << secs << " s\n";
  return {margin >= kRecallMargin,
          "median best acc hgrn2 " + fixed(best[1], 4) + " vs hgrn1 " + fixed(best[0], 4) + ", margin " +
              fixed(margin, 4) + " (>= " + fixed(kRecallMargin, 2) + "), " + std::to_string(kRecallSteps) +
              " steps/run, " + fixed(secs / 60.0, 1) + " min (target < 30)"};
}

Outcome criterion_expansion(const fs::path& out, const fs::path& corpus_path) {
  const auto t0 = std::chrono::steady_clock::now();
  const CharCorpus corpus = load_char_corpus(corpus_path, kLmSeqLen);
  std::ofstream csv(out / "charlm_expansion.csv");
  csv << "d_h,heads,seed,first_loss,final_train_loss,valid_loss\n";
  const std::int64_t head_dims[] = {1, 16, 64};
  std::vector<double> medians;
  for (std::int64_t dh : head_dims) {
    std::vector<double> losses;
    for (auto seed : kSeeds) {
      ModelConfig mc;
      mc.arch = Arch::hgrn2;
      mc.dim = kLmDim;
      mc.layers = kLmLayers;
      mc.heads = kLmDim / dh;
      mc.vocab_size = kCharVocabSize;
      TrainConfig tc;
      tc.batch_size = kLmBatch;
      tc.seq_len = kLmSeqLen;
      tc.total_steps = kLmSteps;
      tc.warmup_steps = 100;
      tc.lr_peak = kLmLr;
      tc.schedule = Schedule::cosine;
      tc.log_interval = kLmSteps;
      tc.seed = seed;
      const CharLmOutcome o = run_charlm(mc, tc, corpus);
      csv << dh << ',' << mc.heads << ',' << seed << ',' << o.first_loss << ',' << o.final_train_loss << ','
          << o.valid_loss << '\n';
      csv.flush();
      std::cerr << "  charlm d_h " << dh << " seed " << seed << ": valid " << fixed(o.valid_loss, 4) << " ("
                << fixed(elapsed(t0), 0) << " s)\n";
      losses.push_back(o.valid_loss);
    }
    medians.push_back(median(losses));
  }
  const bool monotone = medians[0] >= medians[1] && medians[1] >= medians[2];
  return {monotone, "median valid loss d_h=1 " + fixed(medians[0], 4) + ", d_h=16 " + fixed(medians[1], 4) +
                        ", d_h=64 " + fixed(medians[2], 4) + " (non-increasing required), " +
                        fixed(elapsed(t0) / 60.0, 1) + " min"};
}

Outcome criterion_throughput(const fs::path& out) {
  BenchConfig cfg;
  cfg.n_grid = {kBenchN};
  cfg.c_grid = {kBenchC};
  cfg.head_dim = kBenchHeadDim;
  cfg.heads = kBenchHeads;
  cfg.repeats = 3;
  cfg.mode = BenchMode::train;
  const auto rows = benchmark_paths(cfg);
  std::ofstream csv(out / "bench.csv");
  write_bench_csv(csv, rows);
  const double speedup = rows.at(1).speedup;
  return {speedup >= kBenchMinSpeedup, "chunkwise/sequential tokens/s = " + fixed(speedup, 2) + " (>= " +
                                           fixed(kBenchMinSpeedup, 1) + "), recorded in " +
                                           (out / "bench.csv").string()};
}

Outcome criterion_inference() {
  const SuiteReport r = verify_inference(0);
  return {r.passed(), suite_detail(r)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome criterion_determinism(const fs::path& out, const fs::path& corpus_path) {
  const fs::path root = out / "determinism";
  fs::remove_all(root);
  std::vector<std::string> mismatches;
  int compared = 0;
  const auto compare = [&](const std::string& label, const std::function<void(const fs::path&)>& run) {
    run(root / (label + "_a"));
    run(root / (label + "_b"));
    for (const char* file : {"metrics.jsonl", "final.bin"}) {
      const std::string a = slurp(root / (label + "_a") / file);
      const std::string b = slurp(root / (label + "_b") / file);
      ++compared;
      if (a.empty() || a != b) mismatches.push_back(label + "/" + file);
    }
  };
  for (Arch arch : {Arch::hgrn1, Arch::hgrn2, Arch::hgrn2_pese}) {
    compare(std::string("mqar_") + std::string(to_string(arch)), [&](const fs::path& dir) {
      MqarRun run;
      run.model.arch = arch;
      run.model.dim = 32;
      run.model.heads = arch == Arch::hgrn2 ? 2 : 1;
      run.model.vocab_size = 32;
      run.task = {64, 4, 0, 32};
      run.train.seq_len = 64;
      run.train.batch_size = 4;
      run.train.total_steps = 20;
      run.train.warmup_steps = 4;
      run.train.log_interval = 5;
      run.train.seed = 7;
      run.eval_examples = 16;
      TrainOptions o;
      o.out_dir = dir;
      run_mqar(run, o);
    });
  }
  const CharCorpus corpus = load_char_corpus(corpus_path, 32);
  compare("charlm_hgrn2", [&](const fs::path& dir) {
    ModelConfig mc;
    mc.dim = 32;
    mc.layers = 2;
    mc.heads = 4;
    mc.vocab_size = kCharVocabSize;
    TrainConfig tc;
    tc.batch_size = 4;
    tc.seq_len = 32;
    tc.total_steps = 20;
    tc.warmup_steps = 4;
    tc.log_interval = 5;
    tc.checkpoint_interval = 10;
    tc.seed = 7;
    TrainOptions o;
    o.out_dir = dir;
    run_charlm(mc, tc, corpus, 8, o);
  });
  std::string detail = std::to_string(compared - static_cast<int>(mismatches.size())) + "/" +
                       std::to_string(compared) + " file pairs byte-identical";
  if (!mismatches.empty()) detail += "; differing: " + mismatches.front();
  return {mismatches.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string out = "acceptance_out";
  std::string corpus = HGRN_SOURCE_DIR "/data/corpus.txt";
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 10));
  app.add_option("--out", out, "directory for CSV outputs");
  app.add_option("--corpus", corpus, "char-LM corpus");
  CLI11_PARSE(app, argc, argv);

  const fs::path out_dir(out);
  fs::create_directories(out_dir);
  const std::set<int> selected(only.begin(), only.end());
  const auto want = [&](int k) { return selected.empty() || selected.count(k) > 0; };

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "chunkwise-sequential equivalence", criterion_equiv},
      {2, "gradient correctness", criterion_grad},
      {3, "degenerate-head equivalence", criterion_heads},
      {4, "lower-bound hierarchy", criterion_bounds},
      {5, "expansion parameter counts", criterion_params},
      {6, "associative recall hgrn2 > hgrn1", [&] { return criterion_recall(out_dir); }},
      {7, "expansion-ratio trend", [&] { return criterion_expansion(out_dir, corpus); }},
      {8, "chunkwise throughput", [&] { return criterion_throughput(out_dir); }},
      {9, "inference consistency", criterion_inference},
      {10, "determinism", [&] { return criterion_determinism(out_dir, corpus); }},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!want(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << c.id << ": " << c.name << " - " << o.detail
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
