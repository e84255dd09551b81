#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hyperattn/model.hpp"

namespace hyperattn {

struct Workload {
  int n_images = 1;
  int patches_per_slot = 16;
  int text_len = 256;
  ModelConfig config;
  int repeats = 5;
  std::int64_t max_floats = 1ll << 28;  // memory budget for measured runs

  void validate() const;
};

struct CostReport {
  std::string variant;
  int n_images = 0;
  std::int64_t lm_seq_len = 0;
  std::int64_t added_params = 0;
  std::int64_t attn_flops = 0;
  std::int64_t kv_cache_floats = 0;
  double wall_ms_median = 0.0;
  double wall_ms_p10 = 0.0;
  double wall_ms_p90 = 0.0;
  // measured-run extras, not serialized (the CSV schema is fixed)
  std::int64_t actual_lm_seq_len = 0;
  std::int64_t actual_attn_flops = 0;
  std::int64_t peak_floats = 0;
};

// Closed-form analytic fields only.
CostReport cost_model(Variant variant, const ModelConfig& cfg, const Workload& w);

// Timed forward passes: warmup, then `repeats` runs; wall-clock median and
// p10/p90, allocated-float peak, plus the actual sequence length and counted
// attention FLOPs for cross-checking the analytic model.
CostReport measure(Variant variant, const ModelConfig& cfg, const Workload& w);

// Evenly interleaves n_images placeholders into text_len total tokens.
InterleavedSequence make_bench_sequence(int text_len, int n_images,
                                        int vocab_size);

extern const char* kBenchCsvHeader;
void emit_report(const std::vector<CostReport>& reports, const std::string& path);
std::vector<CostReport> parse_report(const std::string& path);

}  // namespace hyperattn
