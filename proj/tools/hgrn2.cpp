// SPDX-License-Identifier: Apache-2.0
//
// hgrn2: train, verify and benchmark gated linear RNNs.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "hgrn/chunkwise.hpp"
#include "hgrn/run_config.hpp"
#include "hgrn/tasks.hpp"
#include "hgrn/verify.hpp"

namespace fs = std::filesystem;
using namespace hgrn;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

// Flags that map one-to-one onto config keys.
struct ConfigFlags {
  std::string config_file;
  std::vector<std::string> sets;
  struct FlagValue {
    const char* flag;
    const char* key;
    std::string value;
  };
  std::vector<FlagValue> values;
  std::string out;

  void add(CLI::App& app) {
    app.add_option("--config", config_file, "flat key = value file, or a run manifest (.json)");
    static const std::pair<const char*, const char*> flags[] = {
        {"--task", "task"},       {"--arch", "arch"},           {"--dim", "dim"},
        {"--heads", "heads"},     {"--layers", "layers"},       {"--expand", "expand"},
        {"--pese", "pese"},       {"--chunk-size", "chunk_size"}, {"--seed", "seed"},
        {"--lr", "lr"},           {"--steps", "total_steps"},   {"--batch-size", "batch_size"},
        {"--seq-len", "seq_len"}, {"--corpus", "corpus"},
    };
    values.reserve(std::size(flags));
    for (const auto& [flag, key] : flags) {
      values.push_back({flag, key, {}});
      app.add_option(flag, values.back().value, std::string("sets ") + key);
    }
    app.add_option("--set", sets, "key=value override, repeatable");
    app.add_option("--out", out, "output directory");
  }

  RunConfig resolve(CLI::App& app) const {
    const FlatConfig file = config_file.empty() ? FlatConfig{} : read_flat_config(config_file);
    FlatConfig flags;
    for (const auto& v : values)
      if (app.count(v.flag) > 0) flags.emplace_back(v.key, v.value);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set: expected key=value, got '" + s + "'");
      flags.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    // The task picks the defaults, so it is resolved first.
    Task task = Task::mqar;
    RunConfig probe;
    for (const FlatConfig* layer : {&file, static_cast<const FlatConfig*>(&flags)})
      for (const auto& [k, v] : *layer)
        if (k == "task") {
          apply_setting(probe, k, v);
          task = probe.task;
        }
    RunConfig cfg = default_run_config(task);
    for (const FlatConfig* layer : {&file, static_cast<const FlatConfig*>(&flags)})
      for (const auto& [k, v] : *layer) apply_setting(cfg, k, v);
    cfg.validate();
    return cfg;
  }

  fs::path out_dir(const RunConfig& cfg) const {
    if (!out.empty()) return out;
    return fs::path("runs") / (std::string(to_string(cfg.task)) + "-" + std::string(to_string(cfg.model.arch)) +
                               "-seed" + std::to_string(cfg.train.seed));
  }
};

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

int cmd_train(CLI::App& app, const ConfigFlags& flags, const std::string& command_line) {
  const RunConfig cfg = flags.resolve(app);
  const fs::path dir = flags.out_dir(cfg);
  fs::create_directories(dir);
  write_json(dir / "manifest.json", make_manifest(command_line, cfg, dir));

  TrainOptions options;
  options.out_dir = dir;
  options.console = &std::cout;
  nlohmann::json result;
  if (cfg.task == Task::mqar) {
    MqarRun run;
    run.model = cfg.model;
    run.train = cfg.train;
    run.task = cfg.mqar;
    run.task.seq_len = cfg.train.seq_len;
    run.task.vocab_size = cfg.model.vocab_size;
    run.eval_examples = cfg.eval_examples;
    const MqarOutcome o = run_mqar(run, options);
    result = {{"task", "mqar"}, {"accuracy", o.accuracy}, {"final_loss", o.final_loss}, {"diverged", o.diverged}};
  } else {
    const CharCorpus corpus = load_char_corpus(cfg.corpus, cfg.train.seq_len, cfg.valid_fraction);
    const CharLmOutcome o = run_charlm(cfg.model, cfg.train, corpus, cfg.eval_windows, options);
    result = {{"task", "charlm"},
              {"valid_loss", o.valid_loss},
              {"valid_ppl", std::exp(o.valid_loss)},
              {"first_loss", o.first_loss},
              {"final_train_loss", o.final_train_loss},
              {"diverged", o.diverged}};
  }
  write_json(dir / "result.json", result);
  std::cerr << result.dump() << '\n';
  return result["diverged"].get<bool>() ? kExitRuntime : 0;
}

int cmd_manifest(CLI::App& app, const ConfigFlags& flags, const std::string& command_line) {
  const RunConfig cfg = flags.resolve(app);
  std::cout << make_manifest(command_line, cfg, flags.out_dir(cfg)).dump(2) << '\n';
  return 0;
}

std::string join_args(int argc, char** argv) {
  std::string s;
  for (int k = 0; k < argc; ++k) {
    if (k) s += ' ';
    s += argv[k];
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gated linear RNN language models: training, verification and benchmarks"};
  app.require_subcommand(1);

  ConfigFlags train_flags, manifest_flags;
  CLI::App* train = app.add_subcommand("train", "train on mqar or charlm; writes manifest, metrics and checkpoints");
  train_flags.add(*train);
  CLI::App* manifest = app.add_subcommand("manifest", "print the resolved run manifest without running");
  manifest_flags.add(*manifest);

  std::string suite;
  std::uint64_t verify_seed = 0;
  CLI::App* verify = app.add_subcommand("verify", "run an invariant suite and print a pass/fail table");
  verify->add_option("suite", suite, "equiv, grad, params, bounds, heads or inference")->required();
  verify->add_option("--seed", verify_seed, "case seed");

  BenchConfig bench_cfg;
  std::string csv_path = "-";
  std::string bench_mode = "train";
  CLI::App* bench = app.add_subcommand("bench", "time chunkwise against sequential scans");
  bench->add_option("--csv", csv_path, "output file, '-' for stdout");
  bench->add_option("--n", bench_cfg.n_grid, "sequence lengths")->delimiter(',');
  bench->add_option("--c", bench_cfg.c_grid, "chunk sizes")->delimiter(',');
  bench->add_option("--head-dim", bench_cfg.head_dim);
  bench->add_option("--heads", bench_cfg.heads);
  bench->add_option("--repeats", bench_cfg.repeats);
  bench->add_option("--mode", bench_mode, "train (forward + backward) or forward");
  bench->add_option("--seed", bench_cfg.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  const std::string command_line = join_args(argc, argv);
  try {
    if (train->parsed()) return cmd_train(*train, train_flags, command_line);
    if (manifest->parsed()) return cmd_manifest(*manifest, manifest_flags, command_line);
    if (verify->parsed()) {
      const auto report = run_suite(suite, verify_seed);
      if (!report) {
        std::cerr << "error: suite: unknown suite '" << suite << "'\n";
        return kExitConfig;
      }
      report->print(std::cout);
      return report->passed() ? 0 : kExitRuntime;
    }
    if (bench->parsed()) {
      if (bench_mode == "train") bench_cfg.mode = BenchMode::train;
      else if (bench_mode == "forward") bench_cfg.mode = BenchMode::forward;
      else throw ConfigError("mode: expected train or forward, got '" + bench_mode + "'");
      for (auto v : bench_cfg.n_grid)
        if (v < 0) throw ConfigError("n: lengths must be >= 0");
      for (auto v : bench_cfg.c_grid)
        if (v <= 0) throw ConfigError("c: chunk sizes must be positive");
      if (bench_cfg.head_dim <= 0 || bench_cfg.heads <= 0) throw ConfigError("head-dim, heads: must be positive");
      const auto rows = benchmark_paths(bench_cfg);
      if (csv_path == "-") {
        write_bench_csv(std::cout, rows);
      } else {
        std::ofstream out(csv_path);
        if (!out) throw std::runtime_error("cannot write " + csv_path);
        write_bench_csv(out, rows);
      }
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}
