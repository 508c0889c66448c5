// SPDX-License-Identifier: Apache-2.0

#include "hgrn/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#ifndef HGRN_VERSION
#define HGRN_VERSION "unknown"
#endif

namespace hgrn {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw ConfigError(key + ": expected " + expected + ", got '" + value + "'");
}

std::int64_t to_int(const std::string& key, const std::string& value) {
  std::int64_t v = 0;
  const auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || end != value.data() + value.size()) bad_value(key, value, "an integer");
  return v;
}

double to_double(const std::string& key, const std::string& value) {
  double v = 0.0;
  const auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || end != value.data() + value.size()) bad_value(key, value, "a number");
  return v;
}

std::string num(double v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc() ? std::string(buf, end) : "nan";
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define INT_FIELD(name, member)                                                      \
  Field {                                                                            \
    name, [](RunConfig& c, const std::string& v) { c.member = to_int(name, v); },    \
        [](const RunConfig& c) { return std::to_string(c.member); }                  \
  }
#define DOUBLE_FIELD(name, member)                                                   \
  Field {                                                                            \
    name, [](RunConfig& c, const std::string& v) { c.member = to_double(name, v); }, \
        [](const RunConfig& c) { return num(c.member); }                             \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      Field{"task",
            [](RunConfig& c, const std::string& v) {
              if (v == "mqar") c.task = Task::mqar;
              else if (v == "charlm") c.task = Task::charlm;
              else bad_value("task", v, "one of mqar, charlm");
            },
            [](const RunConfig& c) { return std::string(to_string(c.task)); }},
      Field{"arch",
            [](RunConfig& c, const std::string& v) {
              const auto a = parse_arch(v);
              if (!a) bad_value("arch", v, "one of hgrn1, hgrn2, hgrn2_pese");
              c.model.arch = *a;
            },
            [](const RunConfig& c) { return std::string(to_string(c.model.arch)); }},
      INT_FIELD("dim", model.dim),
      INT_FIELD("layers", model.layers),
      INT_FIELD("heads", model.heads),
      INT_FIELD("expand", model.expand),
      Field{"pese",
            [](RunConfig& c, const std::string& v) {
              const auto p = parse_pese_variant(v);
              if (!p) bad_value("pese", v, "one of naive, lr, glt, glti, krp, kp");
              c.model.pese = *p;
            },
            [](const RunConfig& c) { return std::string(to_string(c.model.pese)); }},
      INT_FIELD("pese_rank", model.pese_rank),
      Field{"output_gate",
            [](RunConfig& c, const std::string& v) {
              const auto g = parse_output_gate(v);
              if (!g) bad_value("output_gate", v, "one of sigmoid, none");
              c.model.output_gate = *g;
            },
            [](const RunConfig& c) { return std::string(to_string(c.model.output_gate)); }},
      Field{"output_norm",
            [](RunConfig& c, const std::string& v) {
              const auto n = parse_output_norm(v);
              if (!n) bad_value("output_norm", v, "one of none, rms");
              c.model.output_norm = *n;
            },
            [](const RunConfig& c) { return std::string(to_string(c.model.output_norm)); }},
      INT_FIELD("chunk_size", model.chunk_size),
      INT_FIELD("vocab_size", model.vocab_size),
      Field{"seed", [](RunConfig& c, const std::string& v) {
              const std::int64_t s = to_int("seed", v);
              if (s < 0) bad_value("seed", v, "a non-negative integer");
              c.train.seed = static_cast<std::uint64_t>(s);
            },
            [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      DOUBLE_FIELD("lr", train.lr_peak),
      INT_FIELD("warmup_steps", train.warmup_steps),
      Field{"schedule",
            [](RunConfig& c, const std::string& v) {
              const auto s = parse_schedule(v);
              if (!s) bad_value("schedule", v, "one of inverse_sqrt, cosine, constant");
              c.train.schedule = *s;
            },
            [](const RunConfig& c) { return std::string(to_string(c.train.schedule)); }},
      DOUBLE_FIELD("adam_beta1", train.adam_beta1),
      DOUBLE_FIELD("adam_beta2", train.adam_beta2),
      DOUBLE_FIELD("adam_eps", train.adam_eps),
      DOUBLE_FIELD("weight_decay", train.weight_decay),
      DOUBLE_FIELD("grad_clip", train.grad_clip),
      INT_FIELD("batch_size", train.batch_size),
      INT_FIELD("seq_len", train.seq_len),
      INT_FIELD("total_steps", train.total_steps),
      INT_FIELD("log_interval", train.log_interval),
      INT_FIELD("checkpoint_interval", train.checkpoint_interval),
      INT_FIELD("num_kv_pairs", mqar.num_kv_pairs),
      INT_FIELD("num_queries", mqar.num_queries),
      INT_FIELD("eval_examples", eval_examples),
      Field{"corpus", [](RunConfig& c, const std::string& v) { c.corpus = v; },
            [](const RunConfig& c) { return c.corpus.string(); }},
      DOUBLE_FIELD("valid_fraction", valid_fraction),
      INT_FIELD("eval_windows", eval_windows),
  };
  return table;
}

#undef INT_FIELD
#undef DOUBLE_FIELD

}  // namespace

std::string_view to_string(Task t) { return t == Task::mqar ? "mqar" : "charlm"; }

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (task == Task::mqar) {
    MqarConfig m = mqar;
    m.seq_len = train.seq_len;
    m.vocab_size = model.vocab_size;
    m.validate();
    if (eval_examples <= 0) throw ConfigError("eval_examples: must be positive");
  } else {
    if (model.vocab_size != kCharVocabSize) {
      throw ConfigError("vocab_size: charlm uses the byte vocabulary of " + std::to_string(kCharVocabSize));
    }
    if (!(valid_fraction > 0.0 && valid_fraction < 1.0)) throw ConfigError("valid_fraction: must lie in (0, 1)");
    if (eval_windows < 0) throw ConfigError("eval_windows: must be >= 0");
  }
}

FlatConfig parse_flat_config(std::string_view text) {
  FlatConfig out;
  std::istringstream in{std::string(text)};
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value, got '" + body + "'");
    }
    std::string key = trim(std::string_view(body).substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    out.emplace_back(std::move(key), trim(std::string_view(body).substr(eq + 1)));
  }
  return out;
}

FlatConfig read_flat_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  if (path.extension() == ".json") {
    // A run manifest: re-use its resolved config.
    const auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.contains("config") || !j["config"].is_object()) {
      throw ConfigError("config: " + path.string() + " is not a run manifest");
    }
    FlatConfig out;
    for (const auto& [k, v] : j["config"].items()) out.emplace_back(k, v.is_string() ? v.get<std::string>() : v.dump());
    return out;
  }
  return parse_flat_config(text);
}

RunConfig default_run_config(Task task) {
  RunConfig c;
  c.task = task;
  c.train.schedule = Schedule::cosine;
  c.train.log_interval = 10;
  if (task == Task::mqar) {
    c.model.dim = 64;
    c.model.layers = 2;
    c.model.vocab_size = c.mqar.vocab_size;
    c.train.seq_len = 128;
    c.train.batch_size = 16;
    c.train.total_steps = 200;
    c.train.warmup_steps = 20;
    c.train.lr_peak = 1e-3;
  } else {
    c.model.dim = 128;
    c.model.layers = 4;
    c.model.vocab_size = kCharVocabSize;
    c.train.seq_len = 256;
    c.train.batch_size = 16;
    c.train.total_steps = 2000;
    c.train.warmup_steps = 100;
    c.train.lr_peak = 1e-3;
    c.eval_windows = 64;
  }
  return c;
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError(key + ": unknown field");
}

FlatConfig resolved_settings(const RunConfig& cfg) {
  FlatConfig out;
  for (const auto& f : fields()) {
    if (cfg.task == Task::mqar && (std::string_view(f.key) == "corpus" || std::string_view(f.key) == "valid_fraction" ||
                                   std::string_view(f.key) == "eval_windows"))
      continue;
    if (cfg.task == Task::charlm && (std::string_view(f.key) == "num_kv_pairs" ||
                                     std::string_view(f.key) == "num_queries" ||
                                     std::string_view(f.key) == "eval_examples"))
      continue;
    out.emplace_back(f.key, f.get(cfg));
  }
  return out;
}

std::string format_flat_config(const FlatConfig& flat) {
  std::string out;
  for (const auto& [k, v] : flat) out += k + " = " + v + "\n";
  return out;
}

nlohmann::json make_manifest(const std::string& command, const RunConfig& cfg, const std::filesystem::path& out_dir) {
  nlohmann::json config = nlohmann::json::object();
  for (const auto& [k, v] : resolved_settings(cfg)) config[k] = v;
  return {{"command", command},
          {"config", config},
          {"version", version_stamp()},
          {"seed", cfg.train.seed},
          {"out_dir", out_dir.string()}};
}

std::string version_stamp() { return HGRN_VERSION; }

}  // namespace hgrn
