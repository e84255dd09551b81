#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hyperattn/hatb.hpp"
#include "hyperattn/model.hpp"
#include "hyperattn/oracle.hpp"

// Release-gate property suites. Each check is self-contained and returns a
// pass/fail verdict with a human-readable detail line; the acceptance binary
// and the CLI selftest both drive these.
namespace hyperattn::checks {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

// Randomized construction helpers, shared with the unit tests.
BlockWeights random_block_weights(Rng& rng, int dim, int ffn);
void randomize_hatb_extras(Rng& rng, HatbParams& p);
// n_images image segments separated by short text runs; total length <= max_len.
InterleavedSequence random_interleaving(Rng& rng, int n_images, int max_len,
                                        TokenId placeholder_id, int vocab);
AttentionInputs random_hatb_inputs(Rng& rng, const InterleavedSequence& seq,
                                   int patches_per_slot, int dim, int n_heads);

// Fixed 2-image next-token task for the training smoke test.
Batch make_toy_batch(const ModelConfig& cfg, std::uint64_t seed);

CheckResult check_oracle_equivalence(std::uint64_t seed);
CheckResult check_gradient_fidelity(std::uint64_t seed);
CheckResult check_text_only_reduction(std::uint64_t seed);
CheckResult check_causality(std::uint64_t seed);
CheckResult check_mirope_properties(std::uint64_t seed);
CheckResult check_gate_properties(std::uint64_t seed);
CheckResult check_scaling_claims(std::uint64_t seed);
CheckResult check_parameter_economy(std::uint64_t seed);
CheckResult check_distractor_calibration(std::uint64_t seed);
CheckResult check_training_smoke(std::uint64_t seed);

// All ten gates, in release order.
std::vector<CheckResult> run_all_checks(std::uint64_t seed);
// Fast subset for the CLI: oracle equivalence plus the invariant suites.
std::vector<CheckResult> run_selftest(std::uint64_t seed);

// One finite-difference validation at the given width; used by `gradcheck`.
oracle::ComparisonReport gradcheck_single(std::uint64_t seed, int dim);

}  // namespace hyperattn::checks
