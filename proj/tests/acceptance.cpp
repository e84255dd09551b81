// Release gate: runs every acceptance criterion and prints one verdict line
// per criterion as it completes. Exit code 0 only if all pass.
#include <cstdio>

#include "hyperattn/checks.hpp"

int main() {
  using namespace hyperattn::checks;
  CheckResult (*suite[])(std::uint64_t) = {
      check_oracle_equivalence,  check_gradient_fidelity,
      check_text_only_reduction, check_causality,
      check_mirope_properties,   check_gate_properties,
      check_scaling_claims,      check_parameter_economy,
      check_distractor_calibration, check_training_smoke,
  };
  bool ok = true;
  for (auto* fn : suite) {
    CheckResult c = fn(0);
    std::printf("[%s] %-24s %6.1fs  %s\n", c.pass ? "PASS" : "FAIL",
                c.name.c_str(), c.seconds, c.detail.c_str());
    std::fflush(stdout);
    ok = ok && c.pass;
  }
  return ok ? 0 : 1;
}
