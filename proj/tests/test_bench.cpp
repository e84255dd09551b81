#include "doctest.h"

#include <algorithm>
#include <cstdio>
#include <string>

#include "hyperattn/bench.hpp"

using namespace hyperattn;

namespace {

ModelConfig bench_config() {
  ModelConfig cfg;
  cfg.hidden_dim = 16;
  cfg.n_heads = 2;
  cfg.n_layers = 4;
  cfg.ffn_dim = 32;
  cfg.vocab_size = 128;
  cfg.hatb_indices = {0, 2};
  return cfg;
}

}  // namespace

TEST_CASE("analytic cost model, worked by hand for every variant") {
  ModelConfig cfg = bench_config();
  Workload w;
  w.n_images = 3;
  w.patches_per_slot = 4;
  w.text_len = 20;
  // by hand: t=20, Nv=12, D=16, layers=4, k=2
  std::int64_t t = 20, nv = 12, d = 16, layers = 4, k = 2;

  CostReport hyper = cost_model(Variant::hyper, cfg, w);
  CHECK(hyper.lm_seq_len == t);
  CHECK(hyper.added_params == k * (2 * d * d + d));
  CHECK(hyper.attn_flops == layers * 2 * t * t * d + k * 2 * t * nv * d);
  CHECK(hyper.attn_flops == 51200 + 15360);
  CHECK(hyper.kv_cache_floats == 2 * t * d * layers + 2 * nv * d * k);

  CostReport cat = cost_model(Variant::concat, cfg, w);
  CHECK(cat.lm_seq_len == t + nv);
  CHECK(cat.added_params == 0);
  CHECK(cat.attn_flops == layers * 2 * (t + nv) * (t + nv) * d);
  CHECK(cat.attn_flops == 131072);
  CHECK(cat.kv_cache_floats == 2 * (t + nv) * d * layers);

  CostReport pre = cost_model(Variant::pre_cross, cfg, w);
  CostReport post = cost_model(Variant::post_cross, cfg, w);
  for (const CostReport* r : {&pre, &post}) {
    CHECK(r->lm_seq_len == t);
    CHECK(r->added_params == k * (4 * d * d + 5 * d));
    CHECK(r->attn_flops == hyper.attn_flops);  // same attention pattern
    CHECK(r->kv_cache_floats == hyper.kv_cache_floats);
  }

  CostReport dense = cost_model(Variant::flamingo_dense, cfg, w);
  CHECK(dense.added_params == layers * (4 * d * d + 5 * d));
  CHECK(dense.attn_flops == layers * 2 * t * t * d + layers * 2 * t * nv * d);
  CHECK(dense.kv_cache_floats == 2 * t * d * layers + 2 * nv * d * layers);

  // hyper grows linearly in images, concat quadratically
  Workload w2 = w;
  w2.n_images = 6;
  CHECK(cost_model(Variant::hyper, cfg, w2).attn_flops - hyper.attn_flops ==
        15360);
  CHECK(cost_model(Variant::concat, cfg, w2).attn_flops >
        2 * cat.attn_flops - layers * 2 * t * t * d);
}

TEST_CASE("bench sequences spread placeholders evenly through the text") {
  InterleavedSequence seq = make_bench_sequence(20, 3, 128);
  CHECK(seq.length() == 20);
  CHECK(seq.num_slots() == 3);
  int count = 0;
  for (TokenId tk : seq.tokens) count += tk == seq.placeholder_id;
  CHECK(count == 3);
  // spacing between consecutive placeholders varies by at most one slot
  std::vector<int> pos;
  for (const auto& s : seq.image_slots) pos.push_back(s.placeholder_position);
  int lo = 1 << 30, hi = 0;
  for (std::size_t i = 1; i < pos.size(); ++i) {
    lo = std::min(lo, pos[i] - pos[i - 1]);
    hi = std::max(hi, pos[i] - pos[i - 1]);
  }
  CHECK(hi - lo <= 1);
  validate_sequence(seq);

  InterleavedSequence none = make_bench_sequence(8, 0, 128);
  CHECK(none.length() == 8);
  CHECK(none.num_slots() == 0);

  CHECK_THROWS_AS(make_bench_sequence(3, 3, 128), std::invalid_argument);
}

TEST_CASE("measured runs reproduce the analytic sequence length and flops") {
  ModelConfig cfg = bench_config();
  Workload w;
  w.n_images = 2;
  w.patches_per_slot = 4;
  w.text_len = 24;
  w.repeats = 3;
  for (Variant v : {Variant::hyper, Variant::concat, Variant::flamingo_dense}) {
    CostReport r = measure(v, cfg, w);
    CHECK(r.actual_lm_seq_len == r.lm_seq_len);
    CHECK(r.actual_attn_flops == r.attn_flops);
    CHECK(r.wall_ms_median >= 0.0);
    CHECK(r.wall_ms_p10 <= r.wall_ms_median);
    CHECK(r.wall_ms_median <= r.wall_ms_p90);
    CHECK(r.peak_floats > 0);
  }
}

TEST_CASE("a workload over the memory budget is refused") {
  ModelConfig cfg = bench_config();
  Workload w;
  w.n_images = 2;
  w.patches_per_slot = 4;
  w.text_len = 24;
  w.repeats = 3;
  w.max_floats = 10;  // nothing fits in ten doubles
  CHECK_THROWS_AS(measure(Variant::hyper, cfg, w), std::runtime_error);

  Workload bad = w;
  bad.repeats = 1;
  CHECK_THROWS_AS(cost_model(Variant::hyper, cfg, bad), std::invalid_argument);
  bad = w;
  bad.text_len = 0;
  CHECK_THROWS_AS(cost_model(Variant::hyper, cfg, bad), std::invalid_argument);
}

TEST_CASE("csv reports round-trip") {
  ModelConfig cfg = bench_config();
  Workload w;
  w.n_images = 5;
  w.patches_per_slot = 4;
  w.text_len = 40;
  std::vector<CostReport> reports;
  for (Variant v : all_variants()) reports.push_back(cost_model(v, cfg, w));
  reports[0].wall_ms_median = 1.25;
  reports[0].wall_ms_p10 = 1.0;
  reports[0].wall_ms_p90 = 1.5;

  std::string path = "bench_roundtrip.csv";
  emit_report(reports, path);
  std::vector<CostReport> back = parse_report(path);
  REQUIRE(back.size() == reports.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].variant == reports[i].variant);
    CHECK(back[i].n_images == reports[i].n_images);
    CHECK(back[i].lm_seq_len == reports[i].lm_seq_len);
    CHECK(back[i].added_params == reports[i].added_params);
    CHECK(back[i].attn_flops == reports[i].attn_flops);
    CHECK(back[i].kv_cache_floats == reports[i].kv_cache_floats);
    CHECK(back[i].wall_ms_median == reports[i].wall_ms_median);
  }

  // the header is part of the contract
  FILE* f = fopen(path.c_str(), "r");
  REQUIRE(f != nullptr);
  char line[256];
  REQUIRE(fgets(line, sizeof(line), f) != nullptr);
  fclose(f);
  CHECK(std::string(line) ==
        "variant,n_images,lm_seq_len,added_params,attn_flops,kv_cache_floats,"
        "wall_ms_median,wall_ms_p10,wall_ms_p90\n");
  std::remove(path.c_str());
  CHECK_THROWS_AS(parse_report(path), std::runtime_error);
  CHECK_THROWS_AS(emit_report({}, "x.csv"), std::invalid_argument);
}
