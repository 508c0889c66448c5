// SPDX-License-Identifier: Apache-2.0

#include "hgrn/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "hgrn/checkpoint.hpp"
#include "hgrn/recurrence.hpp"

namespace hgrn {

namespace {

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ConfigError(field + ": " + why);
}

Tensor normal_param(Shape shape, Rng& rng, double stddev) { return randn(std::move(shape), rng, stddev, true); }

}  // namespace

std::string_view to_string(Arch a) {
  switch (a) {
    case Arch::hgrn1: return "hgrn1";
    case Arch::hgrn2: return "hgrn2";
    case Arch::hgrn2_pese: return "hgrn2_pese";
  }
  return "?";
}

std::optional<Arch> parse_arch(std::string_view name) {
  for (auto a : {Arch::hgrn1, Arch::hgrn2, Arch::hgrn2_pese})
    if (to_string(a) == name) return a;
  return std::nullopt;
}

std::string_view to_string(OutputGate g) { return g == OutputGate::sigmoid ? "sigmoid" : "none"; }

std::optional<OutputGate> parse_output_gate(std::string_view name) {
  if (name == "sigmoid") return OutputGate::sigmoid;
  if (name == "none") return OutputGate::none;
  return std::nullopt;
}

std::string_view to_string(OutputNorm n) { return n == OutputNorm::rms ? "rms" : "none"; }

std::optional<OutputNorm> parse_output_norm(std::string_view name) {
  if (name == "none") return OutputNorm::none;
  if (name == "rms") return OutputNorm::rms;
  return std::nullopt;
}

void ModelConfig::validate() const {
  require(layers >= 1, "layers", "must be >= 1, got " + std::to_string(layers));
  require(dim >= 1, "dim", "must be >= 1, got " + std::to_string(dim));
  require(vocab_size >= 2, "vocab_size", "must be >= 2, got " + std::to_string(vocab_size));
  require(chunk_size >= 1, "chunk_size", "must be >= 1, got " + std::to_string(chunk_size));
  if (arch == Arch::hgrn2) {
    require(heads >= 1 && dim % heads == 0, "heads",
            "dim " + std::to_string(dim) + " is not divisible by " + std::to_string(heads));
  }
  if (arch == Arch::hgrn2_pese) {
    require(expand >= 1, "expand", "must be >= 1, got " + std::to_string(expand));
    if (pese == PeseVariant::glt || pese == PeseVariant::glti) {
      require(dim % expand == 0, "expand",
              "dim " + std::to_string(dim) + " is not divisible by " + std::to_string(expand));
    }
    require(pese_rank >= 0, "pese_rank", "must be >= 0");
  }
}

std::int64_t ModelConfig::glu_hidden() const {
  const double target = 8.0 * static_cast<double>(dim) / 3.0;
  return std::max<std::int64_t>(8, 8 * std::llround(target / 8.0));
}

std::int64_t ModelConfig::lower_bound_width() const { return arch == Arch::hgrn2 ? head_dim() : dim; }

nlohmann::json to_json(const ModelConfig& c) {
  return {{"arch", to_string(c.arch)},
          {"layers", c.layers},
          {"dim", c.dim},
          {"heads", c.heads},
          {"expand", c.expand},
          {"pese", to_string(c.pese)},
          {"pese_rank", c.pese_rank},
          {"vocab_size", c.vocab_size},
          {"output_gate", to_string(c.output_gate)},
          {"output_norm", to_string(c.output_norm)},
          {"chunk_size", c.chunk_size},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  const auto arch = parse_arch(j.at("arch").get<std::string>());
  require(arch.has_value(), "arch", "unknown architecture " + j.at("arch").get<std::string>());
  c.arch = *arch;
  c.layers = j.at("layers").get<std::int64_t>();
  c.dim = j.at("dim").get<std::int64_t>();
  c.heads = j.at("heads").get<std::int64_t>();
  c.expand = j.at("expand").get<std::int64_t>();
  const auto pese = parse_pese_variant(j.at("pese").get<std::string>());
  require(pese.has_value(), "pese", "unknown variant " + j.at("pese").get<std::string>());
  c.pese = *pese;
  c.pese_rank = j.at("pese_rank").get<std::int64_t>();
  c.vocab_size = j.at("vocab_size").get<std::int64_t>();
  const auto gate = parse_output_gate(j.at("output_gate").get<std::string>());
  require(gate.has_value(), "output_gate", "unknown activation " + j.at("output_gate").get<std::string>());
  c.output_gate = *gate;
  const std::string norm_name = j.value("output_norm", std::string("none"));
  const auto norm = parse_output_norm(norm_name);
  require(norm.has_value(), "output_norm", "unknown normalization " + norm_name);
  c.output_norm = *norm;
  c.chunk_size = j.at("chunk_size").get<std::int64_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

// ---- layers ----------------------------------------------------------------

Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps) {
  const std::int64_t d = x.dim(-1);
  if (weight.shape() != Shape{d}) {
    throw ShapeError("rms_norm: weight " + shape_str(weight.shape()) + " does not match input " + shape_str(x.shape()));
  }
  const std::int64_t rows = x.numel() / std::max<std::int64_t>(d, 1);
  const auto xs = x.data();
  const auto ws = weight.data();
  std::vector<double> out(xs.size());
  std::vector<double> inv(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xs.data() + r * d;
    double ss = 0.0;
    for (std::int64_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const double s = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    inv[static_cast<std::size_t>(r)] = s;
    for (std::int64_t j = 0; j < d; ++j) out[static_cast<std::size_t>(r * d + j)] = xr[j] * s * ws[j];
  }
  return custom_op(x.shape(), std::move(out), {x, weight}, [rows, d, inv = std::move(inv)](Node& self) {
    const Node& nx = *self.inputs[0];
    const Node& nw = *self.inputs[1];
    const double* g = self.grad.data();
    if (nx.requires_grad) {
      auto gx = self.inputs[0]->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = nx.data.data() + r * d;
        const double* gr = g + r * d;
        const double s = inv[static_cast<std::size_t>(r)];
        double dot = 0.0;
        for (std::int64_t j = 0; j < d; ++j) dot += gr[j] * nw.data[static_cast<std::size_t>(j)] * xr[j];
        const double c = s * s * s * dot / static_cast<double>(d);
        for (std::int64_t j = 0; j < d; ++j)
          gx[static_cast<std::size_t>(r * d + j)] += s * gr[j] * nw.data[static_cast<std::size_t>(j)] - c * xr[j];
      }
    }
    if (nw.requires_grad) {
      auto gw = self.inputs[1]->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = nx.data.data() + r * d;
        const double s = inv[static_cast<std::size_t>(r)];
        for (std::int64_t j = 0; j < d; ++j) gw[static_cast<std::size_t>(j)] += g[r * d + j] * xr[j] * s;
      }
    }
  });
}

Tensor glu(const Tensor& x, const Tensor& gate_w, const Tensor& up_w, const Tensor& down_w) {
  return matmul(matmul(x, gate_w) * silu(matmul(x, up_w)), down_w);
}

std::int64_t InferenceState::element_count() const {
  std::int64_t total = 0;
  for (const auto& t : recurrent) total += t.numel();
  for (const auto& t : hidden) total += t.numel();
  return total;
}

// ---- model -----------------------------------------------------------------

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  const std::int64_t d = config_.dim, L = config_.layers, V = config_.vocab_size, h = config_.glu_hidden();
  Rng rng(mix_seed(config_.seed, 0));
  const double proj_std = 0.02 / std::sqrt(2.0 * static_cast<double>(L));
  auto add = [&](std::string name, Tensor t, bool decay) {
    params_.push_back({std::move(name), t, decay});
    return t;
  };

  embedding_ = add("embedding", normal_param({V, d}, rng, 0.02), true);
  gamma_ = add("lower_bound_gamma", normal_param({L, config_.lower_bound_width()}, rng, 1.0), false);
  for (std::int64_t l = 0; l < L; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    Block b;
    b.norm1 = add(p + "mixer_norm", Tensor::full({d}, 1.0, true), false);
    if (config_.arch == Arch::hgrn2_pese) {
      for (const char* gate : {"forget", "input", "output"}) {
        PeseProjection proj = make_pese_projection(config_.pese, d, config_.expand, rng, proj_std, config_.pese_rank);
        for (auto& [name, t] : proj.weights) add(p + gate + "_pese." + name, t, true);
        b.pese.push_back(std::move(proj));
      }
    } else {
      b.gates.forget_w = add(p + "forget_w", normal_param({d, d}, rng, proj_std), true);
      b.gates.input_w = add(p + "input_w", normal_param({d, d}, rng, proj_std), true);
      b.gates.output_w = add(p + "output_w", normal_param({d, d}, rng, proj_std), true);
      b.gates.forget_b = add(p + "forget_b", Tensor::zeros({d}, true), false);
      b.gates.input_b = add(p + "input_b", Tensor::zeros({d}, true), false);
      b.gates.output_b = add(p + "output_b", Tensor::zeros({d}, true), false);
    }
    if (config_.output_norm == OutputNorm::rms) b.out_norm = add(p + "mixer_out_norm", Tensor::full({d}, 1.0, true), false);
    b.out_w = add(p + "mixer_out_w", normal_param({d, d}, rng, proj_std), true);
    b.norm2 = add(p + "glu_norm", Tensor::full({d}, 1.0, true), false);
    b.glu_gate = add(p + "glu_gate_w", normal_param({d, h}, rng, proj_std), true);
    b.glu_up = add(p + "glu_up_w", normal_param({d, h}, rng, proj_std), true);
    b.glu_down = add(p + "glu_down_w", normal_param({h, d}, rng, proj_std), true);
    blocks_.push_back(std::move(b));
  }
  final_norm_ = add("final_norm", Tensor::full({d}, 1.0, true), false);
  head_ = add("head_w", normal_param({d, V}, rng, proj_std), true);
}

std::int64_t Model::parameter_count() const {
  std::int64_t total = 0;
  for (const auto& p : params_) total += p.value.numel();
  return total;
}

std::vector<std::pair<std::string, std::int64_t>> Model::parameter_breakdown() const {
  std::vector<std::pair<std::string, std::int64_t>> out;
  for (const auto& p : params_) out.emplace_back(p.name, p.value.numel());
  return out;
}

void Model::check_tokens(const std::vector<std::int64_t>& ids) const {
  for (auto id : ids) {
    if (id < 0 || id >= config_.vocab_size) {
      throw DomainError("token id " + std::to_string(id) + " outside vocabulary of size " +
                        std::to_string(config_.vocab_size));
    }
  }
}

Tensor Model::embed(const std::vector<std::int64_t>& ids, Shape shape) const {
  shape.push_back(config_.dim);
  return reshape(index_select(embedding_, 0, ids), std::move(shape));
}

// x: [B, N, d]. When `state` is given it holds the recurrent state on entry
// and receives the final state (used by the single-token inference path).
Tensor Model::token_mixer(const Block& b, std::int64_t layer, const Tensor& beta, const Tensor& x, ScanPath path,
                          Tensor* state) const {
  const std::int64_t B = x.dim(0), N = x.dim(1), d = config_.dim;
  const Tensor beta_row = lower_bound_row(beta, layer);
  Tensor y;  // [B, N, d]
  switch (config_.arch) {
    case Arch::hgrn1: {
      const GateBundle g = project_gates(x, b.gates, config_.output_gate);
      const Tensor f = apply_lower_bound(g.g_raw, beta_row);
      const Tensor h0 = state ? *state : Tensor::zeros({B, d});
      const ScanResult r = hgrn1_scan(permute(f, {1, 0, 2}), permute(g.input, {1, 0, 2}),
                                      permute(g.output, {1, 0, 2}), h0);
      if (state) *state = r.state;
      y = permute(r.y, {1, 0, 2});
      break;
    }
    case Arch::hgrn2: {
      const std::int64_t H = config_.heads, dh = config_.head_dim();
      const GateBundle g = project_gates(x, b.gates, config_.output_gate);
      const Shape split{B, N, H, dh};
      const Tensor f = apply_lower_bound(reshape(g.g_raw, split), beta_row);
      const Tensor i = reshape(g.input, split);
      const Tensor o = reshape(g.output, split);
      const Tensor h0 = state ? *state : zero_matrix_state({B}, H, dh);
      ScanResult r;
      if (path == ScanPath::chunkwise) {
        r = chunkwise_hgrn2_batched(permute(f, {0, 2, 1, 3}), permute(i, {0, 2, 1, 3}), permute(o, {0, 2, 1, 3}), h0,
                                    config_.chunk_size);
        r.y = permute(r.y, {0, 2, 1, 3});
      } else {
        r = hgrn2_scan(permute(f, {1, 0, 2, 3}), permute(i, {1, 0, 2, 3}), permute(o, {1, 0, 2, 3}), h0);
        r.y = permute(r.y, {1, 0, 2, 3});
      }
      if (state) *state = r.state;
      y = reshape(r.y, {B, N, d});
      break;
    }
    case Arch::hgrn2_pese: {
      const std::int64_t n = config_.expand;
      const Tensor g_raw = sigmoid(pese_project(x, b.pese[0]));
      const Tensor i = silu(pese_project(x, b.pese[1]));
      const Tensor o_pre = pese_project(x, b.pese[2]);
      const Tensor o = config_.output_gate == OutputGate::sigmoid ? sigmoid(o_pre) : o_pre;
      const Tensor f = apply_lower_bound(g_raw, beta_row);
      const Tensor h0 = state ? *state : Tensor::zeros({B, n, d});
      const PeseScanResult r = pese_recurrence(permute(f, {1, 0, 2, 3}), permute(i, {1, 0, 2, 3}),
                                               permute(o, {1, 0, 2, 3}), h0);
      if (state) *state = r.state;
      y = permute(r.y, {1, 0, 2});
      break;
    }
  }
  if (config_.output_norm == OutputNorm::rms) y = rms_norm(y, b.out_norm);
  return matmul(y, b.out_w);
}

Tensor Model::forward(const TokenBatch& tokens, ScanPath path) const {
  if (static_cast<std::int64_t>(tokens.ids.size()) != tokens.batch * tokens.seq_len) {
    throw ShapeError("forward: " + std::to_string(tokens.ids.size()) + " ids for a [" + std::to_string(tokens.batch) +
                     ", " + std::to_string(tokens.seq_len) + "] batch");
  }
  check_tokens(tokens.ids);
  const Tensor beta = compute_lower_bounds(gamma_);
  Tensor x = embed(tokens.ids, {tokens.batch, tokens.seq_len});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    x = x + token_mixer(b, static_cast<std::int64_t>(l), beta, rms_norm(x, b.norm1), path, nullptr);
    x = x + glu(rms_norm(x, b.norm2), b.glu_gate, b.glu_up, b.glu_down);
  }
  return matmul(rms_norm(x, final_norm_), head_);
}

InferenceState Model::initial_state() const {
  InferenceState s;
  const std::int64_t d = config_.dim;
  for (std::int64_t l = 0; l < config_.layers; ++l) {
    switch (config_.arch) {
      case Arch::hgrn1: s.recurrent.push_back(Tensor::zeros({1, d})); break;
      case Arch::hgrn2:
        s.recurrent.push_back(zero_matrix_state({1}, config_.heads, config_.head_dim()));
        break;
      case Arch::hgrn2_pese: s.recurrent.push_back(Tensor::zeros({1, config_.expand, d})); break;
    }
    s.hidden.push_back(Tensor::zeros({d}));
  }
  return s;
}

std::vector<double> Model::step(std::int64_t token, InferenceState& state) const {
  check_tokens({token});
  if (static_cast<std::int64_t>(state.recurrent.size()) != config_.layers) {
    throw ShapeError("step: state has " + std::to_string(state.recurrent.size()) + " layers, model has " +
                     std::to_string(config_.layers));
  }
  NoGradGuard no_grad;
  const Tensor beta = compute_lower_bounds(gamma_);
  Tensor x = embed({token}, {1, 1});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    x = x + token_mixer(b, static_cast<std::int64_t>(l), beta, rms_norm(x, b.norm1), ScanPath::sequential,
                        &state.recurrent[l]);
    x = x + glu(rms_norm(x, b.norm2), b.glu_gate, b.glu_up, b.glu_down);
    state.hidden[l] = reshape(x, {config_.dim});
  }
  ++state.consumed;
  return matmul(rms_norm(x, final_norm_), head_).to_vector();
}

GenerateResult Model::generate(const std::vector<std::int64_t>& prompt, std::int64_t steps,
                               InferenceState& state) const {
  if (steps < 0) throw ConfigError("generate: step count must be >= 0, got " + std::to_string(steps));
  GenerateResult out{prompt, {}};
  if (steps == 0) return out;
  if (prompt.empty()) throw ConfigError("generate: empty prompt");
  std::vector<double> logits;
  for (auto t : prompt) logits = step(t, state);
  for (std::int64_t k = 0; k < steps; ++k) {
    const auto next = static_cast<std::int64_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    out.tokens.push_back(next);
    out.logits.push_back(logits);
    if (k + 1 < steps) logits = step(next, state);
  }
  return out;
}

void Model::save(const std::filesystem::path& path) const {
  NamedTensors tensors;
  for (const auto& p : params_) tensors.emplace_back(p.name, p.value);
  save_tensors(path.string(), tensors);
  std::ofstream sidecar(path.string() + ".json");
  sidecar << nlohmann::json{{"model", to_json(config_)}, {"seed", config_.seed}}.dump(2) << '\n';
  if (!sidecar) throw CheckpointError("cannot write " + path.string() + ".json");
}

Model Model::load(const std::filesystem::path& path) {
  std::ifstream sidecar(path.string() + ".json");
  if (!sidecar) throw CheckpointError("missing config sidecar " + path.string() + ".json");
  Model m(model_config_from_json(nlohmann::json::parse(sidecar).at("model")));
  const NamedTensors tensors = load_tensors(path.string());
  if (tensors.size() != m.params_.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                          std::to_string(m.params_.size()));
  }
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    auto& p = m.params_[k];
    if (tensors[k].first != p.name || tensors[k].second.shape() != p.value.shape()) {
      throw CheckpointError("checkpoint tensor " + tensors[k].first + " " + shape_str(tensors[k].second.shape()) +
                            " does not match " + p.name + " " + shape_str(p.value.shape()));
    }
    std::copy(tensors[k].second.data().begin(), tensors[k].second.data().end(), p.value.mutable_data().begin());
  }
  return m;
}

}  // namespace hgrn
