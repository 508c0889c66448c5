// SPDX-License-Identifier: Apache-2.0
//
// Language models built from a recurrent token mixer and a GLU channel mixer:
//
//   embed -> L x [ x += Mixer(norm(x)); x += GLU(norm(x)) ] -> norm -> vocab
//
// The mixer is the elementwise recurrence (hgrn1), the multihead matrix-state
// recurrence (hgrn2) or the structured-expansion variant (hgrn2_pese).

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "hgrn/chunkwise.hpp"
#include "hgrn/gating.hpp"
#include "hgrn/pese.hpp"
#include "hgrn/random.hpp"
#include "hgrn/tensor.hpp"

namespace hgrn {

enum class Arch { hgrn1, hgrn2, hgrn2_pese };
enum class ScanPath { chunkwise, sequential };
/// Normalization of the mixer output before its projection.
enum class OutputNorm { none, rms };

std::string_view to_string(Arch a);
std::optional<Arch> parse_arch(std::string_view name);
std::string_view to_string(OutputGate g);
std::optional<OutputGate> parse_output_gate(std::string_view name);
std::string_view to_string(OutputNorm n);
std::optional<OutputNorm> parse_output_norm(std::string_view name);

struct ModelConfig {
  Arch arch = Arch::hgrn2;
  std::int64_t layers = 2;
  std::int64_t dim = 64;
  std::int64_t heads = 1;                // hgrn2
  std::int64_t expand = 2;               // hgrn2_pese
  PeseVariant pese = PeseVariant::lr;    // hgrn2_pese
  std::int64_t pese_rank = 0;            // lr width; 0 picks round(d / (n + 1))
  std::int64_t vocab_size = 258;
  OutputGate output_gate = OutputGate::sigmoid;
  OutputNorm output_norm = OutputNorm::none;
  std::int64_t chunk_size = kDefaultChunkSize;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  std::int64_t head_dim() const { return arch == Arch::hgrn2 ? dim / heads : 1; }
  /// 8/3 d rounded to the nearest multiple of 8.
  std::int64_t glu_hidden() const;
  /// Width of each layer's row of the lower-bound table.
  std::int64_t lower_bound_width() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Row-major token ids of a [batch, seq_len] block.
struct TokenBatch {
  std::int64_t batch = 0;
  std::int64_t seq_len = 0;
  std::vector<std::int64_t> ids;
};

struct Parameter {
  std::string name;
  Tensor value;
  bool decay = false;  // receives decoupled weight decay
};

/// Scale-only RMS normalization over the last axis.
Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps = 1e-6);

/// down((x gate) * silu(x up)).
Tensor glu(const Tensor& x, const Tensor& gate_w, const Tensor& up_w, const Tensor& down_w);

/// Recurrent inference state for a single sequence.
struct InferenceState {
  std::vector<Tensor> recurrent;  // per layer: [H, d_h, d_h] (hgrn2), [d] (hgrn1), [n, d] (hgrn2_pese)
  std::vector<Tensor> hidden;     // per layer: block output at the last consumed token, [d]
  std::int64_t consumed = 0;

  std::int64_t element_count() const;
};

struct GenerateResult {
  std::vector<std::int64_t> tokens;       // prompt followed by generated tokens
  std::vector<std::vector<double>> logits;  // logits that selected each generated token
};

class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  /// Logits [batch, seq_len, vocab].
  Tensor forward(const TokenBatch& tokens, ScanPath path = ScanPath::chunkwise) const;

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::int64_t parameter_count() const;
  /// (tensor name, element count) for every parameter, in registration order.
  std::vector<std::pair<std::string, std::int64_t>> parameter_breakdown() const;

  InferenceState initial_state() const;
  /// Consumes one token and returns next-token logits [vocab].
  std::vector<double> step(std::int64_t token, InferenceState& state) const;
  /// Feeds the prompt, then decodes `steps` tokens greedily. steps == 0
  /// returns the prompt unchanged; negative steps raise ConfigError.
  GenerateResult generate(const std::vector<std::int64_t>& prompt, std::int64_t steps, InferenceState& state) const;

  /// Tensors to `path`, config to `path` + ".json".
  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

 private:
  struct Block {
    Tensor norm1, norm2;
    GateParams gates;                     // hgrn1, hgrn2
    std::vector<PeseProjection> pese;     // hgrn2_pese: forget, input, output
    Tensor out_norm;  // output_norm == rms
    Tensor out_w;
    Tensor glu_gate, glu_up, glu_down;
  };

  Tensor token_mixer(const Block& b, std::int64_t layer, const Tensor& beta, const Tensor& x, ScanPath path,
                     Tensor* state) const;
  Tensor embed(const std::vector<std::int64_t>& ids, Shape shape) const;
  void check_tokens(const std::vector<std::int64_t>& ids) const;

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::vector<Block> blocks_;
  Tensor embedding_, gamma_, final_norm_, head_;
};

}  // namespace hgrn
