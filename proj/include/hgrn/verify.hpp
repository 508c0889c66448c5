// SPDX-License-Identifier: Apache-2.0
//
// Invariant suites shared by the `verify` command and the acceptance runner.
// Each suite draws its cases from a fixed seed and reports one line per check.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace hgrn {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<CheckResult> checks;
  double seconds = 0.0;

  bool passed() const;
  std::int64_t pass_count() const;
  /// Aligned pass/fail table followed by a summary line.
  void print(std::ostream& out) const;
};

/// equiv, grad, params, bounds, heads, inference.
const std::vector<std::string>& suite_names();
/// nullopt for an unknown suite name.
std::optional<SuiteReport> run_suite(std::string_view name, std::uint64_t seed = 0);

// Individual suites.

/// Chunkwise vs sequential output and final state over randomized
/// (N, C, d_h) cases; tolerance 1e-10 max abs.
SuiteReport verify_equiv(std::uint64_t seed = 0, int cases = 100);
/// Every parameter gradient of a 2-layer hgrn2 LM (d=16, H=2, N=12) against
/// central differences with h = 1e-5; relative error < 1e-5 per tensor.
SuiteReport verify_grad(std::uint64_t seed = 0);
/// Closed-form projection counts vs direct weight enumeration over random
/// (d, n, r) for every variant, plus the reference values at d=768, n=4.
SuiteReport verify_params(std::uint64_t seed = 0, int combos = 20);
/// Lower-bound hierarchy and sampled forget gates for random Gamma with
/// L in {2, 4, 8}.
SuiteReport verify_bounds(std::uint64_t seed = 0, int draws = 10);
/// Multihead matrix-state recurrence with one head per channel against the
/// elementwise recurrence; tolerance 1e-15.
SuiteReport verify_heads(std::uint64_t seed = 0, int instances = 20);
/// Stateful generation against full re-forward logits over 64 tokens, and the
/// recurrent state size.
SuiteReport verify_inference(std::uint64_t seed = 0);

}  // namespace hgrn
