// SPDX-License-Identifier: Apache-2.0

#include "hgrn/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>

#include "hgrn/chunkwise.hpp"
#include "hgrn/gating.hpp"
#include "hgrn/model.hpp"
#include "hgrn/pese.hpp"
#include "hgrn/recurrence.hpp"
#include "hgrn/training.hpp"

namespace hgrn {
namespace {

std::string fmt(const char* format, double a, double b = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, format, a, b);
  return buf;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

class Timer {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace

bool SuiteReport::passed() const {
  return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass; });
}

std::int64_t SuiteReport::pass_count() const {
  return std::count_if(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass; });
}

void SuiteReport::print(std::ostream& out) const {
  std::size_t width = 0;
  for (const auto& c : checks) width = std::max(width, c.name.size());
  for (const auto& c : checks) {
    out << (c.pass ? "PASS  " : "FAIL  ") << c.name << std::string(width - c.name.size() + 2, ' ') << c.detail
        << '\n';
  }
  out << suite << ": " << pass_count() << '/' << checks.size() << " passed ("
      << fmt("%.1f s", seconds) << ")\n";
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"equiv", "grad", "params", "bounds", "heads", "inference"};
  return names;
}

std::optional<SuiteReport> run_suite(std::string_view name, std::uint64_t seed) {
  if (name == "equiv") return verify_equiv(seed);
  if (name == "grad") return verify_grad(seed);
  if (name == "params") return verify_params(seed);
  if (name == "bounds") return verify_bounds(seed);
  if (name == "heads") return verify_heads(seed);
  if (name == "inference") return verify_inference(seed);
  return std::nullopt;
}

SuiteReport verify_equiv(std::uint64_t seed, int cases) {
  const Timer timer;
  SuiteReport report{"equiv", {}, 0.0};
  const std::int64_t ns[] = {1, 5, 16, 37, 128};
  const std::int64_t cs[] = {1, 4, 16, 64};
  const std::int64_t dhs[] = {1, 4, 16, 64};
  Rng rng(mix_seed(seed, 0x65717569));
  for (int k = 0; k < cases; ++k) {
    // Walks the full 5 x 4 x 4 grid before repeating.
    const std::int64_t n = ns[k % 5], c = cs[(k / 5) % 4], dh = dhs[(k / 20) % 4];
    const Tensor f = uniform({n, dh}, rng, 0.1, 0.999);
    const Tensor i = randn({n, dh}, rng);
    const Tensor o = randn({n, dh}, rng);
    const Tensor h0 = randn({dh, dh}, rng);
    const ScanResult a = chunkwise_hgrn2(f, i, o, h0, c);
    const ScanResult b = hgrn2_scan(f, i, o, h0);
    const double dy = max_abs_diff(a.y.data(), b.y.data());
    const double ds = max_abs_diff(a.state.data(), b.state.data());
    char name[64];
    std::snprintf(name, sizeof name, "case %03d N=%lld C=%lld d_h=%lld", k, static_cast<long long>(n),
                  static_cast<long long>(c), static_cast<long long>(dh));
    report.checks.push_back({name, dy < 1e-10 && ds < 1e-10, fmt("y %.2e  state %.2e", dy, ds)});
  }
  report.seconds = timer.seconds();
  return report;
}

SuiteReport verify_grad(std::uint64_t seed) {
  const Timer timer;
  SuiteReport report{"grad", {}, 0.0};
  ModelConfig mc;
  mc.arch = Arch::hgrn2;
  mc.layers = 2;
  mc.dim = 16;
  mc.heads = 2;
  mc.vocab_size = 11;
  mc.chunk_size = 4;
  mc.seed = seed;
  Model model(mc);
  // Moves weights off their initial values so no gradient is trivially zero.
  Rng rng(mix_seed(seed, 0x67726164));
  for (auto& p : model.parameters())
    for (double& v : p.value.mutable_data()) v += std::normal_distribution<double>(0.0, 0.2)(rng);
  const std::int64_t n = 12;
  TokenBatch tokens{1, n, {}};
  std::vector<std::int64_t> targets;
  std::uniform_int_distribution<std::int64_t> pick(0, mc.vocab_size - 1);
  for (std::int64_t t = 0; t < n; ++t) {
    tokens.ids.push_back(pick(rng));
    targets.push_back(pick(rng));
  }
  const auto loss = [&] { return cross_entropy(model.forward(tokens), targets); };

  for (auto& p : model.parameters()) p.value.zero_grad();
  backward(loss());
  const double h = 1e-5;
  for (auto& p : model.parameters()) {
    const std::vector<double> analytic(p.value.grad().begin(), p.value.grad().end());
    std::vector<double> numeric(analytic.size());
    auto data = p.value.mutable_data();
    for (std::size_t k = 0; k < numeric.size(); ++k) {
      const double saved = data[k];
      NoGradGuard guard;
      data[k] = saved + h;
      const double up = loss().item();
      data[k] = saved - h;
      const double down = loss().item();
      data[k] = saved;
      numeric[k] = (up - down) / (2.0 * h);
    }
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t k = 0; k < numeric.size(); ++k) {
      diff += (analytic[k] - numeric[k]) * (analytic[k] - numeric[k]);
      na += analytic[k] * analytic[k];
      nb += numeric[k] * numeric[k];
    }
    const double rel = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-300});
    report.checks.push_back({p.name, rel < 1e-5, fmt("rel %.2e  |g| %.2e", rel, std::sqrt(na))});
  }
  report.seconds = timer.seconds();
  return report;
}

SuiteReport verify_params(std::uint64_t seed, int combos) {
  const Timer timer;
  SuiteReport report{"params", {}, 0.0};
  Rng rng(mix_seed(seed, 0x70617261));
  std::uniform_int_distribution<int> pick_n(1, 6), pick_mult(1, 8), pick_r(1, 10);
  for (int trial = 0; trial < combos; ++trial) {
    const std::int64_t n = pick_n(rng);
    const std::int64_t d = n * pick_mult(rng);
    const std::int64_t r = pick_r(rng);
    for (auto v : kAllPeseVariants) {
      const PeseProjection p = make_pese_projection(v, d, n, rng, 0.1, r);
      std::int64_t direct = 0;
      for (const auto& [name, w] : p.weights) direct += w.numel();
      const std::int64_t formula = count_parameters(v, d, n, v == PeseVariant::lr ? r : 0);
      char name[64];
      std::snprintf(name, sizeof name, "%s d=%lld n=%lld r=%lld", std::string(to_string(v)).c_str(),
                    static_cast<long long>(d), static_cast<long long>(n), static_cast<long long>(r));
      report.checks.push_back({name, formula == direct,
                               fmt("formula %.0f  enumerated %.0f", static_cast<double>(formula),
                                   static_cast<double>(direct))});
    }
  }
  struct Reference {
    PeseVariant v;
    std::int64_t expect;
  };
  for (const Reference ref : {Reference{PeseVariant::krp, 3072}, Reference{PeseVariant::kp, 589828}}) {
    const std::int64_t got = count_parameters(ref.v, 768, 4);
    report.checks.push_back({std::string(to_string(ref.v)) + " d=768 n=4", got == ref.expect,
                             fmt("got %.0f  expected %.0f", static_cast<double>(got),
                                 static_cast<double>(ref.expect))});
  }
  report.seconds = timer.seconds();
  return report;
}

SuiteReport verify_bounds(std::uint64_t seed, int draws) {
  const Timer timer;
  SuiteReport report{"bounds", {}, 0.0};
  Rng rng(mix_seed(seed, 0x626f756e));
  const std::int64_t layer_grid[] = {2, 4, 8};
  for (int k = 0; k < draws; ++k) {
    const std::int64_t layers = layer_grid[k % 3];
    const std::int64_t width = 1 + static_cast<std::int64_t>(rng() % 16);
    const Tensor gamma = randn({layers, width}, rng, 2.0);
    const Tensor beta = compute_lower_bounds(gamma);
    bool row0 = true, monotone = true, sampled = true;
    for (std::int64_t j = 0; j < width; ++j) row0 = row0 && beta.at({0, j}) == 0.0;
    for (std::int64_t l = 1; l < layers; ++l)
      for (std::int64_t j = 0; j < width; ++j) monotone = monotone && beta.at({l, j}) >= beta.at({l - 1, j});
    for (std::int64_t l = 0; l < layers; ++l) {
      const Tensor row = lower_bound_row(beta, l);
      const Tensor g = sigmoid(randn({64, width}, rng, 3.0));
      const Tensor f = apply_lower_bound(g, row);
      for (std::int64_t t = 0; t < 64; ++t)
        for (std::int64_t j = 0; j < width; ++j) {
          const double v = f.at({t, j});
          sampled = sampled && v >= row.data()[static_cast<std::size_t>(j)] && v < 1.0;
        }
    }
    char name[64];
    std::snprintf(name, sizeof name, "draw %02d L=%lld m=%lld", k, static_cast<long long>(layers),
                  static_cast<long long>(width));
    std::string detail = std::string("row0 ") + (row0 ? "zero" : "NONZERO") + "  rows " +
                         (monotone ? "non-decreasing" : "DECREASING") + "  f " +
                         (sampled ? "in [beta, 1)" : "OUT OF RANGE");
    report.checks.push_back({name, row0 && monotone && sampled, detail});
  }
  report.seconds = timer.seconds();
  return report;
}

SuiteReport verify_heads(std::uint64_t seed, int instances) {
  const Timer timer;
  SuiteReport report{"heads", {}, 0.0};
  Rng rng(mix_seed(seed, 0x68656164));
  for (int k = 0; k < instances; ++k) {
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng() % 40);
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng() % 24);
    const Tensor f = uniform({n, d}, rng, 0.05, 0.999);
    const Tensor i = randn({n, d}, rng);
    const Tensor o = randn({n, d}, rng);
    const Tensor h1 = randn({d}, rng);
    const ScanResult multi = multihead_hgrn2(f, i, o, d, reshape(h1, {d, 1, 1}));
    const ScanResult single = hgrn1_scan(f, i, o, h1);
    const double dy = max_abs_diff(multi.y.data(), single.y.data());
    const double ds = max_abs_diff(multi.state.data(), single.state.data());
    char name[64];
    std::snprintf(name, sizeof name, "instance %02d N=%lld d=H=%lld", k, static_cast<long long>(n),
                  static_cast<long long>(d));
    report.checks.push_back({name, dy < 1e-15 && ds < 1e-15, fmt("y %.2e  state %.2e", dy, ds)});
  }
  report.seconds = timer.seconds();
  return report;
}

SuiteReport verify_inference(std::uint64_t seed) {
  const Timer timer;
  SuiteReport report{"inference", {}, 0.0};
  struct Case {
    Arch arch;
    std::int64_t layers, dim, heads;
  };
  const Case cases[] = {{Arch::hgrn2, 2, 16, 2}, {Arch::hgrn2, 3, 12, 3}, {Arch::hgrn2, 1, 16, 1},
                        {Arch::hgrn1, 2, 16, 1}, {Arch::hgrn2_pese, 2, 16, 1}};
  Rng rng(mix_seed(seed, 0x696e6665));
  for (const Case c : cases) {
    ModelConfig mc;
    mc.arch = c.arch;
    mc.layers = c.layers;
    mc.dim = c.dim;
    mc.heads = c.heads;
    mc.vocab_size = 13;
    mc.chunk_size = 8;
    mc.seed = seed;
    Model model(mc);
    for (auto& p : model.parameters())
      for (double& v : p.value.mutable_data()) v += std::normal_distribution<double>(0.0, 0.3)(rng);
    InferenceState state = model.initial_state();
    const std::int64_t before = state.element_count();
    const std::vector<std::int64_t> prompt{1, 7, 3};
    const std::int64_t steps = 64;
    const GenerateResult g = model.generate(prompt, steps, state);
    TokenBatch all{1, static_cast<std::int64_t>(g.tokens.size()) - 1,
                   std::vector<std::int64_t>(g.tokens.begin(), g.tokens.end() - 1)};
    const Tensor ref = model.forward(all);
    double worst = 0.0;
    const auto V = static_cast<std::size_t>(mc.vocab_size);
    for (std::size_t k = 0; k < g.logits.size(); ++k) {
      const std::size_t pos = prompt.size() - 1 + k;
      worst = std::max(worst, max_abs_diff(g.logits[k], ref.data().subspan(pos * V, V)));
    }
    std::string label = std::string(to_string(c.arch)) + " L=" + std::to_string(c.layers) + " d=" +
                        std::to_string(c.dim) + " H=" + std::to_string(c.heads);
    report.checks.push_back({label + " generate", g.logits.size() == static_cast<std::size_t>(steps) && worst < 1e-9,
                             fmt("max logit diff %.2e over %.0f tokens", worst, static_cast<double>(g.logits.size()))});
    if (c.arch == Arch::hgrn2) {
      const std::int64_t dh = c.dim / c.heads;
      const std::int64_t expect = c.layers * c.heads * dh * dh + c.layers * c.dim;
      const std::int64_t after = state.element_count();
      report.checks.push_back({label + " state size", before == expect && after == expect,
                               fmt("%.0f elements, expected %.0f", static_cast<double>(after),
                                   static_cast<double>(expect))});
    }
  }
  report.seconds = timer.seconds();
  return report;
}

}  // namespace hgrn
