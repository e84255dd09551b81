#include "hyperattn/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace hyperattn {

void Workload::validate() const {
  if (n_images < 0 || patches_per_slot <= 0 || text_len <= 0)
    throw std::invalid_argument("workload: counts must be positive");
  if (repeats < 3) throw std::invalid_argument("workload: repeats must be >= 3");
}

static std::int64_t equipped_layers(Variant v, const ModelConfig& cfg) {
  switch (v) {
    case Variant::concat: return 0;
    case Variant::flamingo_dense: return cfg.n_layers;
    default: return static_cast<std::int64_t>(cfg.hatb_indices.size());
  }
}

CostReport cost_model(Variant variant, const ModelConfig& cfg, const Workload& w) {
  w.validate();
  std::int64_t n = w.n_images, v = w.patches_per_slot, t = w.text_len;
  std::int64_t d = cfg.hidden_dim, layers = cfg.n_layers;
  std::int64_t k = equipped_layers(variant, cfg);
  CostReport r;
  r.variant = variant_name(variant);
  r.n_images = w.n_images;
  r.lm_seq_len = variant == Variant::concat ? t + n * v : t;
  switch (variant) {
    case Variant::concat: r.added_params = 0; break;
    case Variant::hyper: r.added_params = k * (2 * d * d + d); break;
    default: r.added_params = k * (4 * d * d + 5 * d); break;
  }
  if (variant == Variant::concat) {
    r.attn_flops = layers * 2 * (t + n * v) * (t + n * v) * d;
  } else {
    r.attn_flops = layers * 2 * t * t * d + k * 2 * t * (n * v) * d;
  }
  r.kv_cache_floats = 2 * r.lm_seq_len * d * layers;
  if (variant != Variant::concat) r.kv_cache_floats += 2 * n * v * d * k;
  return r;
}

InterleavedSequence make_bench_sequence(int text_len, int n_images, int vocab_size) {
  if (text_len <= n_images)
    throw std::invalid_argument("bench sequence: text_len must exceed n_images");
  int plain = text_len - n_images;  // non-placeholder tokens
  std::vector<Segment> segs;
  int emitted = 0;
  TokenId id = 1;
  auto push_text = [&](int count) {
    if (count <= 0) return;
    std::vector<TokenId> toks(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      toks[static_cast<std::size_t>(i)] = id;
      id = id % std::min(vocab_size - 2, 97) + 1;
    }
    segs.push_back(Segment::make_text(toks));
  };
  for (int i = 0; i < n_images; ++i) {
    int upto = static_cast<int>(static_cast<std::int64_t>(plain) * (i + 1) / (n_images + 1));
    push_text(upto - emitted);
    emitted = upto;
    segs.push_back(Segment::make_image(0x1000u + static_cast<ImageId>(i)));
  }
  push_text(plain - emitted);
  return build_sequence(segs, CropPolicy::off, vocab_size - 1);
}

static double quantile(std::vector<double> xs, double q) {
  std::sort(xs.begin(), xs.end());
  double idx = q * (static_cast<double>(xs.size()) - 1.0);
  std::size_t lo = static_cast<std::size_t>(idx);
  std::size_t hi = std::min(lo + 1, xs.size() - 1);
  double frac = idx - static_cast<double>(lo);
  return xs[lo] * (1.0 - frac) + xs[hi] * frac;
}

CostReport measure(Variant variant, const ModelConfig& cfg, const Workload& w) {
  CostReport r = cost_model(variant, cfg, w);
  ModelConfig mc = cfg;
  mc.variant = variant;
  mc.patches_per_slot = w.patches_per_slot;
  Model model = build_model(mc);
  InterleavedSequence seq = make_bench_sequence(w.text_len, w.n_images, mc.vocab_size);
  std::vector<ImageId> ids;
  for (const auto& slot : seq.image_slots) ids.push_back(slot.image_id);
  Mat feats = encode_images_stub(ids, mc.patches_per_slot, mc.hidden_dim, mc.seed);

  // warmup; doubles as the budget probe and the formula cross-check
  alloc_track::reset_peak();
  counters::reset_attn_flops();
  ModelOutput out = model_forward(model, seq, feats);
  r.actual_lm_seq_len = out.hidden.rows;
  r.actual_attn_flops = static_cast<std::int64_t>(counters::attn_flops());
  r.peak_floats = alloc_track::peak();
  if (r.peak_floats > w.max_floats)
    throw std::runtime_error("measure: workload exceeds the memory budget (" +
                             std::to_string(r.peak_floats) + " floats)");

  std::vector<double> ms(static_cast<std::size_t>(w.repeats));
  for (int i = 0; i < w.repeats; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    ModelOutput o = model_forward(model, seq, feats);
    auto t1 = std::chrono::steady_clock::now();
    (void)o;
    ms[static_cast<std::size_t>(i)] =
        std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  r.wall_ms_median = quantile(ms, 0.5);
  r.wall_ms_p10 = quantile(ms, 0.1);
  r.wall_ms_p90 = quantile(ms, 0.9);
  return r;
}

const char* kBenchCsvHeader =
    "variant,n_images,lm_seq_len,added_params,attn_flops,kv_cache_floats,"
    "wall_ms_median,wall_ms_p10,wall_ms_p90";

void emit_report(const std::vector<CostReport>& reports, const std::string& path) {
  if (reports.empty()) throw std::invalid_argument("emit_report: no reports");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("emit_report: cannot write " + path);
  out << kBenchCsvHeader << "\n";
  char line[512];
  for (const CostReport& r : reports) {
    std::snprintf(line, sizeof(line), "%s,%d,%lld,%lld,%lld,%lld,%.9g,%.9g,%.9g",
                  r.variant.c_str(), r.n_images,
                  static_cast<long long>(r.lm_seq_len),
                  static_cast<long long>(r.added_params),
                  static_cast<long long>(r.attn_flops),
                  static_cast<long long>(r.kv_cache_floats), r.wall_ms_median,
                  r.wall_ms_p10, r.wall_ms_p90);
    out << line << "\n";
  }
}

std::vector<CostReport> parse_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("parse_report: cannot read " + path);
  std::string line;
  if (!std::getline(in, line) || line != kBenchCsvHeader)
    throw std::runtime_error("parse_report: bad header");
  std::vector<CostReport> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 9) throw std::runtime_error("parse_report: bad row");
    CostReport r;
    r.variant = fields[0];
    r.n_images = std::stoi(fields[1]);
    r.lm_seq_len = std::stoll(fields[2]);
    r.added_params = std::stoll(fields[3]);
    r.attn_flops = std::stoll(fields[4]);
    r.kv_cache_floats = std::stoll(fields[5]);
    r.wall_ms_median = std::stod(fields[6]);
    r.wall_ms_p10 = std::stod(fields[7]);
    r.wall_ms_p90 = std::stod(fields[8]);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace hyperattn
