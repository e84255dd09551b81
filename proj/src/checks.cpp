#include "hyperattn/checks.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <map>
#include <sstream>

#include "hyperattn/bench.hpp"
#include "hyperattn/distractor.hpp"

namespace hyperattn::checks {

using Clock = std::chrono::steady_clock;

static double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

static Mat random_mat(Rng& rng, int r, int c, double scale) {
  Mat m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m.d[i] = scale * rng.normal();
  return m;
}

static Vec random_vec(Rng& rng, int n, double scale) {
  Vec v(static_cast<std::size_t>(n));
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

BlockWeights random_block_weights(Rng& rng, int dim, int ffn) {
  double s = 1.0 / std::sqrt(static_cast<double>(dim));
  BlockWeights w;
  w.ln1_g = random_vec(rng, dim, 0.2);
  for (auto& x : w.ln1_g) x += 1.0;
  w.ln1_b = random_vec(rng, dim, 0.1);
  w.ln2_g = random_vec(rng, dim, 0.2);
  for (auto& x : w.ln2_g) x += 1.0;
  w.ln2_b = random_vec(rng, dim, 0.1);
  w.wq = random_mat(rng, dim, dim, s);
  w.wk = random_mat(rng, dim, dim, s);
  w.wv = random_mat(rng, dim, dim, s);
  w.wo = random_mat(rng, dim, dim, s);
  w.ffn1 = random_mat(rng, ffn, dim, s);
  w.ffn2 = random_mat(rng, dim, ffn, 1.0 / std::sqrt(static_cast<double>(ffn)));
  return w;
}

void randomize_hatb_extras(Rng& rng, HatbParams& p) {
  int d = p.w_kv_img.cols;
  double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < p.w_kv_img.size(); ++i)
    p.w_kv_img.d[i] = s * rng.normal();
  for (auto& x : p.w_gate) x = 0.5 * s * rng.normal();
}

InterleavedSequence random_interleaving(Rng& rng, int n_images, int max_len,
                                        TokenId placeholder_id, int vocab) {
  if (max_len < n_images + 1)
    throw std::invalid_argument("random_interleaving: max_len too small");
  int budget = max_len - n_images;  // >= 1 text tokens to hand out
  std::vector<Segment> segs;
  for (int i = 0; i <= n_images; ++i) {
    // interior gaps may be empty but must leave one token for the tail,
    // so the sequence always ends on text
    int lo = (i == n_images) ? 1 : 0;
    int cap = (i == n_images) ? std::min(3, budget) : std::min(3, budget - 1);
    int run = cap <= lo ? lo : rng.uniform_int(lo, cap);
    budget -= run;
    if (run > 0) {
      std::vector<TokenId> toks;
      for (int t = 0; t < run; ++t)
        toks.push_back(rng.uniform_int(1, vocab - 2));
      segs.push_back(Segment::make_text(toks));
    }
    if (i < n_images)
      segs.push_back(Segment::make_image(0x2000ull + static_cast<ImageId>(i)));
  }
  return build_sequence(segs, CropPolicy::off, placeholder_id);
}

AttentionInputs random_hatb_inputs(Rng& rng, const InterleavedSequence& seq,
                                   int patches_per_slot, int dim, int n_heads) {
  RotaryPositionMap rope = build_rope_map(seq);
  CrossAttentionMask mask = build_cross_mask(seq);
  Mat h_text = random_mat(rng, seq.length(), dim, 1.0);
  Mat h_img = random_mat(rng, seq.num_slots() * patches_per_slot, dim, 1.0);
  return make_attention_inputs(std::move(h_text), std::move(h_img), rope, mask,
                               patches_per_slot, n_heads);
}

Batch make_toy_batch(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(mix64(seed, 0x746f79ull));
  auto run = [&](int n) {
    std::vector<TokenId> t;
    for (int i = 0; i < n; ++i) t.push_back(rng.uniform_int(1, cfg.vocab_size - 2));
    return t;
  };
  std::vector<Segment> segs;
  segs.push_back(Segment::make_text(run(5)));
  segs.push_back(Segment::make_image(make_descriptor_id(2, 3)));
  segs.push_back(Segment::make_text(run(4)));
  segs.push_back(Segment::make_image(make_descriptor_id(5, 1)));
  segs.push_back(Segment::make_text(run(6)));
  Batch b;
  b.seq = build_sequence(segs, CropPolicy::off, cfg.placeholder_id());
  std::vector<ImageId> ids;
  for (const auto& s : b.seq.image_slots) ids.push_back(s.image_id);
  b.raw_feats = encode_images_stub(ids, cfg.patches_per_slot, cfg.hidden_dim,
                                   cfg.seed);
  b.targets.assign(b.seq.tokens.size(), -1);
  for (std::size_t i = 0; i + 1 < b.seq.tokens.size(); ++i)
    b.targets[i] = b.seq.tokens[i + 1];
  return b;
}

// --- small shared utilities -------------------------------------------------

static Mat vec_as_row(const Vec& v) {
  Mat m(1, static_cast<int>(v.size()));
  std::copy(v.begin(), v.end(), m.d.begin());
  return m;
}

static Mat span_as_row(const double* p, std::size_t n) {
  Mat m(1, static_cast<int>(n));
  std::copy(p, p + n, m.d.begin());
  return m;
}

static bool rows_equal_bitwise(const Mat& a, const Mat& b, int row) {
  return std::memcmp(a.row(row), b.row(row),
                     sizeof(double) * static_cast<std::size_t>(a.cols)) == 0;
}

static bool mats_equal_bitwise(const Mat& a, const Mat& b) {
  return a.rows == b.rows && a.cols == b.cols &&
         (a.size() == 0 ||
          std::memcmp(a.d.data(), b.d.data(), sizeof(double) * a.size()) == 0);
}

struct Dims {
  int heads, dim, ffn;
};

static Dims random_dims(Rng& rng, int max_dim) {
  static const int head_choices[] = {1, 2, 4};
  static const int dh_choices[] = {2, 4, 8, 16};
  for (;;) {
    int h = head_choices[rng.uniform_int(0, 2)];
    int dh = dh_choices[rng.uniform_int(0, 3)];
    if (h * dh <= max_dim)
      return {h, h * dh, (h * dh) * (1 + rng.uniform_int(0, 1))};
  }
}

// --- criterion 1: oracle equivalence ------------------------------------------

CheckResult check_oracle_equivalence(std::uint64_t seed) {
  auto t0 = Clock::now();
  CheckResult r;
  r.name = "oracle-equivalence";
  double worst = 0.0;
  const int n_configs = 100;
  for (int i = 0; i < n_configs; ++i) {
    Rng rng(mix64(seed, 0xace1ull, static_cast<std::uint64_t>(i)));
    Dims dm = random_dims(rng, 64);
    int n_images = rng.uniform_int(0, 3);
    int v = n_images == 0 ? rng.uniform_int(1, 4)
                          : rng.uniform_int(1, std::min(16, 48 / n_images));
    int max_len = rng.uniform_int(n_images + 2, 32);
    InterleavedSequence seq = random_interleaving(rng, n_images, max_len, 127, 128);
    AttentionInputs in = random_hatb_inputs(rng, seq, v, dm.dim, dm.heads);
    BlockWeights w = random_block_weights(rng, dm.dim, dm.ffn);
    HatbParams p = make_hatb_params(w);
    randomize_hatb_extras(rng, p);

    HatbOutput out = hatb_forward(in, p);
    oracle::HatbRef ref = oracle::hatb_reference(in, p);
    std::map<std::string, Mat> got, want;
    got["h_self"] = out.h_self;
    got["h_cross"] = out.h_cross;
    got["h_fused"] = out.h_fused;
    got["block_out"] = out.block_out;
    got["gate"] = vec_as_row(out.gate);
    want["h_self"] = ref.h_self;
    want["h_cross"] = ref.h_cross;
    want["h_fused"] = ref.h_fused;
    want["block_out"] = ref.block_out;
    want["gate"] = vec_as_row(ref.gate);
    oracle::ComparisonReport rep = oracle::compare(got, want, 1e-9);
    worst = std::max(worst, rep.max_rel_err);
    if (!rep.pass) {
      std::ostringstream os;
      os << "config " << i << " diverged: " << rep.worst_tensor << " rel err "
         << rep.max_rel_err;
      r.detail = os.str();
      r.seconds = seconds_since(t0);
      return r;
    }
    if (out.bypass != ref.bypass) {
      r.detail = "bypass flags disagree with the reference";
      r.seconds = seconds_since(t0);
      return r;
    }
  }
  r.seconds = seconds_since(t0);
  r.pass = r.seconds < 60.0;
  std::ostringstream os;
  os << n_configs << " random configs, max rel err " << worst << ", "
     << r.seconds << "s (limit 60s)";
  r.detail = os.str();
  return r;
}

// --- criterion 2: gradient fidelity ---------------------------------------------

struct SpanRef {
  std::string name;
  double* param;
  std::size_t n;
  const double* analytic;
};

static oracle::ComparisonReport diff_spans(const std::function<double()>& loss,
                                           const std::vector<SpanRef>& spans) {
  std::map<std::string, Mat> amap, nmap;
  for (const auto& s : spans) {
    if (s.n == 0) continue;
    amap[s.name] = span_as_row(s.analytic, s.n);
    std::vector<double> num = oracle::finite_diff_grad(loss, s.param, s.n);
    nmap[s.name] = span_as_row(num.data(), num.size());
  }
  return oracle::grad_compare(amap, nmap);
}

static oracle::ComparisonReport hatb_grad_case(std::uint64_t key, int dim,
                                               int heads, int ffn) {
  Rng rng(key);
  int n_images = rng.uniform_int(0, 2);
  int v = rng.uniform_int(1, 2);
  InterleavedSequence seq =
      random_interleaving(rng, n_images, rng.uniform_int(n_images + 3, 10), 127, 128);
  AttentionInputs in = random_hatb_inputs(rng, seq, v, dim, heads);
  BlockWeights w = random_block_weights(rng, dim, ffn);
  HatbParams p = make_hatb_params(w);
  randomize_hatb_extras(rng, p);
  Mat wts = random_mat(rng, in.h_text.rows, dim, 1.0);

  auto loss = [&]() {
    HatbOutput o = hatb_forward(in, p);
    double s = 0.0;
    for (std::size_t i = 0; i < o.block_out.size(); ++i)
      s += wts.d[i] * o.block_out.d[i];
    return s;
  };

  BlockCache cache;
  hatb_forward(in, p, &cache);
  BlockGrads gh = zero_grads_like(w);
  HatbGrads gx = zero_grads_like(p);
  Mat d_img;
  Mat d_text = hatb_backward(in, p, cache, wts, gh, gx, d_img);

  std::vector<SpanRef> spans = {
      {"ln1_g", w.ln1_g.data(), w.ln1_g.size(), gh.ln1_g.data()},
      {"ln1_b", w.ln1_b.data(), w.ln1_b.size(), gh.ln1_b.data()},
      {"ln2_g", w.ln2_g.data(), w.ln2_g.size(), gh.ln2_g.data()},
      {"ln2_b", w.ln2_b.data(), w.ln2_b.size(), gh.ln2_b.data()},
      {"wq", w.wq.d.data(), w.wq.size(), gh.wq.d.data()},
      {"wk", w.wk.d.data(), w.wk.size(), gh.wk.d.data()},
      {"wv", w.wv.d.data(), w.wv.size(), gh.wv.d.data()},
      {"wo", w.wo.d.data(), w.wo.size(), gh.wo.d.data()},
      {"ffn1", w.ffn1.d.data(), w.ffn1.size(), gh.ffn1.d.data()},
      {"ffn2", w.ffn2.d.data(), w.ffn2.size(), gh.ffn2.d.data()},
      {"w_kv_img", p.w_kv_img.d.data(), p.w_kv_img.size(), gx.w_kv_img.d.data()},
      {"w_gate", p.w_gate.data(), p.w_gate.size(), gx.w_gate.data()},
      {"gate_bias", &p.gate_bias, 1, &gx.gate_bias},
      {"h_text", in.h_text.d.data(), in.h_text.size(), d_text.d.data()},
      {"h_img", in.h_img.d.data(), in.h_img.size(), d_img.d.data()},
  };
  return diff_spans(loss, spans);
}

static oracle::ComparisonReport model_grad_case(std::uint64_t key, Variant variant) {
  Rng rng(key);
  ModelConfig cfg;
  cfg.hidden_dim = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.ffn_dim = 16;
  cfg.vocab_size = 32;
  cfg.patches_per_slot = 2;
  cfg.hatb_indices = {0};
  cfg.variant = variant;
  cfg.seed = mix64(key, 1);
  Model m = build_model(cfg);

  InterleavedSequence seq = random_interleaving(
      rng, 2, rng.uniform_int(8, 12), cfg.placeholder_id(), cfg.vocab_size);
  std::vector<ImageId> ids;
  for (const auto& s : seq.image_slots) ids.push_back(s.image_id);
  Batch b;
  b.seq = seq;
  b.raw_feats = encode_images_stub(ids, cfg.patches_per_slot, cfg.hidden_dim,
                                   cfg.seed);
  b.targets.assign(seq.tokens.size(), -1);
  for (std::size_t i = 0; i < seq.tokens.size(); ++i)
    if (rng.uniform() < 0.8 || i == 0)
      b.targets[i] = rng.uniform_int(0, cfg.vocab_size - 1);

  ModelGrads g = zero_grads_like(m);
  model_loss_and_grads(m, b, g);

  std::map<std::string, Mat> amap, nmap;
  for_each_grad(g, [&](const std::string& name, double* p, std::size_t n) {
    amap[name] = span_as_row(p, n);
  });
  auto loss = [&]() { return model_loss(m, b); };
  for_each_param(m, [&](const std::string& name, double* p, std::size_t n) {
    std::vector<double> num = oracle::finite_diff_grad(loss, p, n);
    nmap[name] = span_as_row(num.data(), num.size());
  });
  return oracle::grad_compare(amap, nmap);
}

CheckResult check_gradient_fidelity(std::uint64_t seed) {
  auto t0 = Clock::now();
  CheckResult r;
  r.name = "gradient-fidelity";
  double worst = 0.0;
  const Variant order[] = {Variant::hyper,      Variant::concat,
                           Variant::pre_cross,  Variant::post_cross,
                           Variant::flamingo_dense};
  for (int i = 0; i < 20; ++i) {
    oracle::ComparisonReport rep;
    std::string kind;
    if (i < 12) {
      Rng rng(mix64(seed, 0x67ull, static_cast<std::uint64_t>(i)));
      int heads = rng.uniform_int(1, 2);
      int dh = 2 * rng.uniform_int(1, 2);
      rep = hatb_grad_case(mix64(seed, 0x68ull, static_cast<std::uint64_t>(i)),
                           heads * dh, heads, 2 * heads * dh);
      kind = "hatb";
    } else {
      Variant v = order[(i - 12) % 5];
      rep = model_grad_case(mix64(seed, 0x69ull, static_cast<std::uint64_t>(i)), v);
      kind = "model/" + variant_name(v);
    }
    worst = std::max(worst, rep.max_rel_err);
    if (!rep.pass) {
      std::ostringstream os;
      os << kind << " config " << i << ": " << rep.worst_tensor << " rel err "
         << rep.max_rel_err << " > 1e-4";
      r.detail = os.str();
      r.seconds = seconds_since(t0);
      return r;
    }
  }
  r.seconds = seconds_since(t0);
  r.pass = r.seconds < 300.0;
  std::ostringstream os;
  os << "20 configs (12 block-level, 8 model-level over all variants), max rel err "
     << worst << ", " << r.seconds << "s (limit 300s)";
  r.detail = os.str();
  return r;
}

// --- criterion 3: text-only reduction ---------------------------------------------

CheckResult check_text_only_reduction(std::uint64_t seed) {
  auto t0 = Clock::now();
  CheckResult r;
  r.name = "text-only-reduction";

  ModelConfig cfg;
  cfg.hidden_dim = 32;
  cfg.n_heads = 2;
  cfg.n_layers = 4;
  cfg.ffn_dim = 64;
  cfg.vocab_size = 64;
  cfg.patches_per_slot = 4;
  cfg.hatb_indices = {0, 2};
  cfg.seed = mix64(seed, 3);

  Rng rng(mix64(seed, 0x7478ull));
  InterleavedSequence seq =
      random_interleaving(rng, 0, 24, cfg.placeholder_id(), cfg.vocab_size);
  Mat no_feats(0, 0);

  Mat ref_logits, ref_hidden;
  for (Variant v : all_variants()) {
    ModelConfig c = cfg;
    c.variant = v;
    Model m = build_model(c);
    ModelOutput out = model_forward(m, seq, no_feats);
    if (ref_logits.size() == 0) {
      ref_logits = out.logits;
      ref_hidden = out.hidden;
      continue;
    }
    if (!mats_equal_bitwise(out.logits, ref_logits) ||
        !mats_equal_bitwise(out.hidden, ref_hidden)) {
      r.detail = "variant " + variant_name(v) + " diverges on a text-only sequence";
      r.seconds = seconds_since(t0);
      return r;
    }
  }

  // HATB with no visual context is the plain block, bit for bit.
  int dim = 16, heads = 2;
  BlockWeights w = random_block_weights(rng, dim, 32);
  Mat x = random_mat(rng, 8, dim, 1.0);
  std::vector<int> pos(8);
  for (int i = 0; i < 8; ++i) pos[i] = i;
  Mat plain = standard_block_forward(x, w, pos, heads);
  AttentionInputs in;
  in.h_text = x;
  in.h_img = Mat(0, dim);
  in.query_positions = pos;
  in.mask.text_len = 8;
  in.mask.num_slots = 0;
  in.n_heads = heads;
  HatbParams p = make_hatb_params(w);
  randomize_hatb_extras(rng, p);
  HatbOutput out = hatb_forward(in, p);
  if (!mats_equal_bitwise(out.block_out, plain)) {
    r.detail = "hyper block with zero images differs from the plain block";
    r.seconds = seconds_since(t0);
    return r;
  }
  for (auto b : out.bypass)
    if (!b) {
      r.detail = "expected every row bypassed with zero images";
      r.seconds = seconds_since(t0);
      return r;
    }

  r.pass = true;
  r.detail = "all 5 variants bitwise-identical on text-only input; "
             "hyper block == plain block bitwise";
  r.seconds = seconds_since(t0);
  return r;
}

// --- criterion 4: causality -----------------------------------------------------

CheckResult check_causality(std::uint64_t seed) {
  auto t0 = Clock::now();
  CheckResult r;
  r.name = "causality";

  for (int i = 0; i < 40; ++i) {
    Rng rng(mix64(seed, 0xca11ull, static_cast<std::uint64_t>(i)));
    Dims dm = random_dims(rng, 32);
    int n_images = rng.uniform_int(1, 4);
    int v = rng.uniform_int(1, 3);
    InterleavedSequence seq = random_interleaving(
        rng, n_images, rng.uniform_int(n_images + 4, 24), 127, 128);
    AttentionInputs in = random_hatb_inputs(rng, seq, v, dm.dim, dm.heads);
    BlockWeights w = random_block_weights(rng, dm.dim, dm.ffn);
    HatbParams p = make_hatb_params(w);
    randomize_hatb_extras(rng, p);

    HatbOutput base = hatb_forward(in, p);
    int s = rng.uniform_int(0, seq.num_slots() - 1);
    int pp = seq.image_slots[static_cast<std::size_t>(s)].placeholder_position;
    AttentionInputs poked = in;
    for (int m = 0; m < poked.h_img.rows; ++m)
      if (poked.patch_slot[static_cast<std::size_t>(m)] == s)
        for (int j = 0; j < poked.h_img.cols; ++j)
          poked.h_img.at(m, j) += 0.5 * rng.normal();
    HatbOutput out = hatb_forward(poked, p);

    bool later_changed = false;
    for (int t = 0; t < out.block_out.rows; ++t) {
      bool same = rows_equal_bitwise(out.block_out, base.block_out, t);
      if (t < pp && !same) {
        std::ostringstream os;
        os << "block config " << i << ": token " << t
           << " changed before placeholder position " << pp;
        r.detail = os.str();
        r.seconds = seconds_since(t0);
        return r;
      }
      if (t >= pp && !same) later_changed = true;
    }
    if (!later_changed) {
      std::ostringstream os;
      os << "block config " << i << ": perturbing slot " << s
         << " had no effect at or after position " << pp;
      r.detail = os.str();
      r.seconds = seconds_since(t0);
      return r;
    }
  }

  // Same property through a stacked hyper model.
  for (int i = 0; i < 10; ++i) {
    Rng rng(mix64(seed, 0xca12ull, static_cast<std::uint64_t>(i)));
    ModelConfig cfg;
    cfg.hidden_dim = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.ffn_dim = 32;
    cfg.vocab_size = 64;
    cfg.patches_per_slot = 2;
    cfg.hatb_indices = {0, 1};
    cfg.seed = mix64(seed, 0xca13ull, static_cast<std::uint64_t>(i));
    Model m = build_model(cfg);
    int n_images = rng.uniform_int(1, 3);
    InterleavedSequence seq = random_interleaving(
        rng, n_images, rng.uniform_int(n_images + 4, 16), cfg.placeholder_id(),
        cfg.vocab_size);
    std::vector<ImageId> ids;
    for (const auto& sl : seq.image_slots) ids.push_back(sl.image_id);
    Mat feats = encode_images_stub(ids, cfg.patches_per_slot, cfg.hidden_dim,
                                   cfg.seed);
    ModelOutput base = model_forward(m, seq, feats);
    int s = rng.uniform_int(0, seq.num_slots() - 1);
    int pp = seq.image_slots[static_cast<std::size_t>(s)].placeholder_position;
    Mat poked = feats;
    for (int k = 0; k < cfg.patches_per_slot; ++k)
      for (int j = 0; j < poked.cols; ++j)
        poked.at(s * cfg.patches_per_slot + k, j) += 0.5 * rng.normal();
    ModelOutput out = model_forward(m, seq, poked);
    bool later_changed = false;
    for (int t = 0; t < out.hidden.rows; ++t) {
      bool same = rows_equal_bitwise(out.hidden, base.hidden, t);
      if (t < pp && !same) {
        std::ostringstream os;
        os << "model config " << i << ": hidden state " << t
           << " changed before placeholder position " << pp;
        r.detail = os.str();
        r.seconds = seconds_since(t0);
        return r;
      }
      if (t >= pp && !same) later_changed = true;
    }
    if (!later_changed) {
      r.detail = "model perturbation had no downstream effect";
      r.seconds = seconds_since(t0);
      return r;
    }
  }

  r.pass = true;
  r.detail = "50 random interleavings (40 block-level, 10 model-level): "
             "image edits only reach tokens at or after the placeholder";
  r.seconds = seconds_since(t0);
  return r;
}

// --- criterion 5: rotary position properties ----------------------------------------

CheckResult check_mirope_properties(std::uint64_t seed) {
  auto t0 = Clock::now();
  CheckResult r;
  r.name = "mi-rope";
  Rng rng(mix64(seed, 0x726full));
  int dim = 32, heads = 4;

  // per-pair norm preservation
  double worst_norm = 0.0;
  {
    Mat x = random_mat(rng, 12, dim, 1.0);
    std::vector<int> pos(12);
    for (auto& p : pos) p = rng.uniform_int(0, 50);
    Mat y = apply_rotary(x, pos, heads);
    for (int i = 0; i < x.rows; ++i)
      for (int j = 0; j < dim; j += 2) {
        double n0 = x.at(i, j) * x.at(i, j) + x.at(i, j + 1) * x.at(i, j + 1);
        double n1 = y.at(i, j) * y.at(i, j) + y.at(i, j + 1) * y.at(i, j + 1);
        worst_norm = std::max(worst_norm, std::fabs(n1 - n0));
      }
    if (worst_norm >= 1e-12) {
      std::ostringstream os;
      os << "pair norm drift " << worst_norm << " >= 1e-12";
      r.detail = os.str();
      r.seconds = seconds_since(t0);
      return r;
    }
  }

  // shift invariance of attention probabilities
  double worst_shift = 0.0;
  {
    int L = 6, M = 9;
    Mat q = random_mat(rng, L, dim, 1.0);
    Mat k = random_mat(rng, M, dim, 1.0);
    Mat v = random_mat(rng, M, dim, 1.0);
    Mat wo(dim, dim);
    for (int i = 0; i < dim; ++i) wo.at(i, i) = 1.0;
    std::vector<int> pq(L), pk(M), slot(M);
    for (int i = 0; i < L; ++i) pq[static_cast<std::size_t>(i)] = rng.uniform_int(0, 40);
    for (int i = 0; i < M; ++i) {
      pk[static_cast<std::size_t>(i)] = rng.uniform_int(0, 40);
      slot[static_cast<std::size_t>(i)] = i;
    }
    CrossAttentionMask mask;
    mask.text_len = L;
    mask.num_slots = M;
    mask.visible.assign(static_cast<std::size_t>(L) * M, 1);
    auto probs_at = [&](int shift) {
      std::vector<int> pqs = pq, pks = pk;
      for (auto& p : pqs) p += shift;
      for (auto& p : pks) p += shift;
      Mat qs = apply_rotary(q, pqs, heads);
      Mat ks = apply_rotary(k, pks, heads);
      std::vector<Mat> probs;
      cross_attention(qs, ks, v, slot, mask, wo, heads, nullptr, &probs);
      return probs;
    };
    auto p0 = probs_at(0);
    auto p1 = probs_at(17);
    for (std::size_t h = 0; h < p0.size(); ++h)
      for (std::size_t e = 0; e < p0[h].size(); ++e)
        worst_shift = std::max(worst_shift, std::fabs(p0[h].d[e] - p1[h].d[e]));
    if (worst_shift >= 1e-9) {
      std::ostringstream os;
      os << "shift changed attention probabilities by " << worst_shift;
      r.detail = os.str();
      r.seconds = seconds_since(t0);
      return r;
    }
  }

  // permuting two images with their placeholder positions permutes (and
  // otherwise preserves) their contributions
  double worst_perm = 0.0;
  {
    int L = 3, v_per = 2, M = 2 * v_per;
    Mat q = random_mat(rng, L, dim, 1.0);
    Mat fa = random_mat(rng, v_per, dim, 1.0);
    Mat fb = random_mat(rng, v_per, dim, 1.0);
    Mat va = random_mat(rng, v_per, dim, 1.0);
    Mat vb = random_mat(rng, v_per, dim, 1.0);
    Mat wo(dim, dim);
    for (int i = 0; i < dim; ++i) wo.at(i, i) = 1.0;
    std::vector<int> pq = {5, 7, 9};
    Mat q_rot = apply_rotary(q, pq, heads);
    CrossAttentionMask mask;
    mask.text_len = L;
    mask.num_slots = 2;
    mask.visible.assign(static_cast<std::size_t>(L) * 2, 1);
    std::vector<int> slot = {0, 0, 1, 1};
    auto ctx_for = [&](const Mat& f0, const Mat& f1, const Mat& v0, const Mat& v1,
                       int pos0, int pos1) {
      Mat k(M, dim), vv(M, dim);
      std::vector<int> pk(static_cast<std::size_t>(M));
      for (int i = 0; i < v_per; ++i) {
        std::copy(f0.row(i), f0.row(i) + dim, k.row(i));
        std::copy(f1.row(i), f1.row(i) + dim, k.row(v_per + i));
        std::copy(v0.row(i), v0.row(i) + dim, vv.row(i));
        std::copy(v1.row(i), v1.row(i) + dim, vv.row(v_per + i));
        pk[static_cast<std::size_t>(i)] = pos0;
        pk[static_cast<std::size_t>(v_per + i)] = pos1;
      }
      Mat k_rot = apply_rotary(k, pk, heads);
      return cross_attention(q_rot, k_rot, vv, slot, mask, wo, heads);
    };
    Mat ab = ctx_for(fa, fb, va, vb, 2, 4);
    Mat ba = ctx_for(fb, fa, vb, va, 4, 2);
    for (std::size_t e = 0; e < ab.size(); ++e)
      worst_perm = std::max(worst_perm, std::fabs(ab.d[e] - ba.d[e]));
    if (worst_perm >= 1e-9) {
      std::ostringstream os;
      os << "image permutation changed the attention output by " << worst_perm;
      r.detail = os.str();
      r.seconds = seconds_since(t0);
      return r;
    }
  }

  r.pass = true;
  std::ostringstream os;
  os << "pair-norm drift " << worst_norm << " (<1e-12), shift drift "
     << worst_shift << " (<1e-9), permutation drift " << worst_perm << " (<1e-9)";
  r.detail = os.str();
  r.seconds = seconds_since(t0);
  return r;
}

// --- criterion 6: gate properties ---------------------------------------------------

CheckResult check_gate_properties(std::uint64_t seed) {
  auto t0 = Clock::now();
  CheckResult r;
  r.name = "gate-properties";
  Rng rng(mix64(seed, 0x6761ull));
  int dim = 16;

  Mat h = random_mat(rng, 10, dim, 2.0);
  Vec wg = random_vec(rng, dim, 1.0);
  Vec g = adaptive_gate(h, wg);
  for (double x : g)
    if (!(x > 0.0 && x < 1.0)) {
      r.detail = "gate left the open interval (0,1)";
      r.seconds = seconds_since(t0);
      return r;
    }

  Vec zero(static_cast<std::size_t>(dim), 0.0);
  Vec half = adaptive_gate(h, zero);
  for (double x : half)
    if (x != 0.5) {
      r.detail = "zero gate weights did not give exactly 0.5";
      r.seconds = seconds_since(t0);
      return r;
    }

  // saturated gate: sigmoid'(z) ~ 1e-13 at z = +-30, so w_gate sees no gradient
  double worst_grad = 0.0;
  for (double bias : {30.0, -30.0}) {
    InterleavedSequence seq = random_interleaving(rng, 1, 8, 127, 128);
    AttentionInputs in = random_hatb_inputs(rng, seq, 2, dim, 2);
    BlockWeights w = random_block_weights(rng, dim, 32);
    HatbParams p = make_hatb_params(w);
    for (auto& x : p.w_gate) x = 0.0;
    p.gate_bias = bias;
    BlockCache cache;
    HatbOutput out = hatb_forward(in, p, &cache);
    for (std::size_t t = 0; t < out.gate.size(); ++t)
      if (!out.bypass[t] && !(out.gate[t] > 0.0 && out.gate[t] < 1.0)) {
        r.detail = "saturated gate left (0,1)";
        r.seconds = seconds_since(t0);
        return r;
      }
    BlockGrads gh = zero_grads_like(w);
    HatbGrads gx = zero_grads_like(p);
    Mat d_img;
    Mat d_out = random_mat(rng, in.h_text.rows, dim, 1.0);
    hatb_backward(in, p, cache, d_out, gh, gx, d_img);
    for (double x : gx.w_gate) worst_grad = std::max(worst_grad, std::fabs(x));
  }
  if (worst_grad >= 1e-6) {
    std::ostringstream os;
    os << "saturated gate still passes gradient " << worst_grad;
    r.detail = os.str();
    r.seconds = seconds_since(t0);
    return r;
  }

  r.pass = true;
  std::ostringstream os;
  os << "gates in (0,1); zero weights give 0.5 exactly; saturated-gate grad "
     << worst_grad << " < 1e-6";
  r.detail = os.str();
  r.seconds = seconds_since(t0);
  return r;
}

// --- criterion 7: scaling -------------------------------------------------------------

CheckResult check_scaling_claims(std::uint64_t seed) {
  (void)seed;
  auto t0 = Clock::now();
  CheckResult r;
  r.name = "scaling";

  ModelConfig cfg;  // stock toy config: D=64, 8 layers, v=16, k=4
  Workload w;
  w.text_len = 256;
  w.patches_per_slot = 16;
  w.config = cfg;
  w.repeats = 5;
  const int ns[] = {1, 5, 10, 20, 50, 100};
  std::map<int, double> hyper_ms, concat_ms;
  for (Variant variant : {Variant::hyper, Variant::concat}) {
    for (int n : ns) {
      w.n_images = n;
      CostReport rep = measure(variant, cfg, w);
      if (rep.lm_seq_len != rep.actual_lm_seq_len) {
        std::ostringstream os;
        os << variant_name(variant) << " n=" << n << ": analytic lm_seq_len "
           << rep.lm_seq_len << " != actual " << rep.actual_lm_seq_len;
        r.detail = os.str();
        r.seconds = seconds_since(t0);
        return r;
      }
      if (rep.attn_flops != rep.actual_attn_flops) {
        std::ostringstream os;
        os << variant_name(variant) << " n=" << n << ": analytic attn_flops "
           << rep.attn_flops << " != actual " << rep.actual_attn_flops;
        r.detail = os.str();
        r.seconds = seconds_since(t0);
        return r;
      }
      (variant == Variant::hyper ? hyper_ms : concat_ms)[n] = rep.wall_ms_median;
    }
  }
  double slope_h = (hyper_ms[100] - hyper_ms[1]) / 99.0;
  double slope_c = (concat_ms[100] - concat_ms[1]) / 99.0;
  double ratio = slope_c / slope_h;
  r.seconds = seconds_since(t0);
  r.pass = slope_h > 0.0 && ratio > 2.0 && r.seconds < 600.0;
  std::ostringstream os;
  os << "concat slope " << slope_c << " ms/image vs hyper " << slope_h
     << " (ratio " << ratio << " > 2); analytic seq len and FLOPs exact at all "
     << "12 points; " << r.seconds << "s (limit 600s)";
  r.detail = os.str();
  return r;
}

// --- criterion 8: parameter economy -----------------------------------------------------

CheckResult check_parameter_economy(std::uint64_t seed) {
  (void)seed;
  auto t0 = Clock::now();
  CheckResult r;
  r.name = "parameter-economy";

  ModelConfig cfg;  // D=64, 8 layers, k=4, hyper
  Model m = build_model(cfg);
  ParamCounts pc = count_params(m);
  std::int64_t d = cfg.hidden_dim;
  std::int64_t want = 4 * (2 * d * d + d);

  ModelConfig fcfg = cfg;
  fcfg.variant = Variant::flamingo_dense;
  Model fm = build_model(fcfg);
  ParamCounts fpc = count_params(fm);

  auto enumerated = [](Model& model) {
    std::int64_t total = 0;
    for_each_param(model, [&](const std::string&, double*, std::size_t n) {
      total += static_cast<std::int64_t>(n);
    });
    return total;
  };
  std::int64_t en = enumerated(m), fen = enumerated(fm);

  r.pass = pc.added_by_fusion == want && want == 33024 &&
           pc.added_by_fusion < fpc.added_by_fusion && en == pc.total() &&
           fen == fpc.total();
  std::ostringstream os;
  os << "hyper adds " << pc.added_by_fusion << " (= 4*(2D^2+D) = " << want
     << "), flamingo_dense adds " << fpc.added_by_fusion
     << "; enumerated totals match (" << en << ", " << fen << ")";
  r.detail = os.str();
  r.seconds = seconds_since(t0);
  return r;
}

// --- criterion 9: distractor calibration ----------------------------------------------

CheckResult check_distractor_calibration(std::uint64_t seed) {
  auto t0 = Clock::now();
  CheckResult r;
  r.name = "distractor-calibration";

  EvalConfig ec;
  ec.rng_seed = mix64(seed, 0xd1);
  std::vector<NeedleTask> tasks = gen_tasks(ec);
  auto oracle_adapter = make_adapter("oracle", 1);
  std::vector<NeedleResult> ores = circular_eval(*oracle_adapter, tasks, ec);
  for (const auto& res : ores) {
    if (res.accuracy != 1.0 || res.adapter_failures != 0) {
      std::ostringstream os;
      os << "oracle adapter scored " << res.accuracy << " at N=" << res.n_images;
      r.detail = os.str();
      r.seconds = seconds_since(t0);
      return r;
    }
  }

  EvalConfig er;
  er.n_values = {5};
  er.questions = 2000;
  er.rng_seed = mix64(seed, 0xd2);
  std::vector<NeedleTask> rtasks = gen_tasks(er);
  auto random_adapter = make_adapter("random", mix64(seed, 0xd3));
  NeedleResult rres = circular_eval(*random_adapter, rtasks, er).front();
  double p = std::pow(1.0 / kNumOptions,
                      static_cast<double>(ec.rotations) * ec.distractor_seeds);
  double se = std::sqrt(p * (1.0 - p) / er.questions);
  if (std::fabs(rres.accuracy - p) > 3.0 * se) {
    std::ostringstream os;
    os << "random adapter at " << rres.accuracy << ", expected " << p << " +- "
       << 3.0 * se;
    r.detail = os.str();
    r.seconds = seconds_since(t0);
    return r;
  }

  EvalConfig ef;
  ef.rng_seed = mix64(seed, 0xd4);
  std::vector<NeedleTask> ftasks = gen_tasks(ef);
  auto first_adapter = make_adapter("first-image", 1);
  std::vector<NeedleResult> fres = circular_eval(*first_adapter, ftasks, ef);
  for (std::size_t i = 1; i < fres.size(); ++i) {
    if (!(fres[i].accuracy < fres[i - 1].accuracy)) {
      std::ostringstream os;
      os << "first-image accuracy not decreasing: N=" << fres[i - 1].n_images
         << " -> " << fres[i - 1].accuracy << ", N=" << fres[i].n_images << " -> "
         << fres[i].accuracy;
      r.detail = os.str();
      r.seconds = seconds_since(t0);
      return r;
    }
  }

  r.seconds = seconds_since(t0);
  r.pass = r.seconds < 300.0;
  std::ostringstream os;
  os << "oracle 1.000 at every N; random " << rres.accuracy << " within 3 SE of "
     << p << "; first-image decays " << fres.front().accuracy << " -> "
     << fres.back().accuracy << "; " << r.seconds << "s (limit 300s)";
  r.detail = os.str();
  return r;
}

// --- criterion 10: training smoke ------------------------------------------------------

CheckResult check_training_smoke(std::uint64_t seed) {
  auto t0 = Clock::now();
  CheckResult r;
  r.name = "training-smoke";

  ModelConfig cfg;
  cfg.hidden_dim = 32;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.ffn_dim = 64;
  cfg.vocab_size = 64;
  cfg.patches_per_slot = 4;
  cfg.hatb_indices = {0};
  cfg.variant = Variant::hyper;
  cfg.seed = mix64(seed, 10);
  Model m = build_model(cfg);
  Batch batch = make_toy_batch(cfg, mix64(seed, 11));

  double initial = model_loss(m, batch);
  double lr = 0.5;
  for (int step = 0; step < 500; ++step) overfit_step(m, batch, lr);
  double final_loss = model_loss(m, batch);

  r.pass = final_loss <= 0.1 * initial;
  std::ostringstream os;
  os << "500 steps, loss " << initial << " -> " << final_loss << " (ratio "
     << final_loss / initial << ", need <= 0.1)";
  r.detail = os.str();
  r.seconds = seconds_since(t0);
  return r;
}

// --- suites -------------------------------------------------------------------------

std::vector<CheckResult> run_all_checks(std::uint64_t seed) {
  return {
      check_oracle_equivalence(seed),  check_gradient_fidelity(seed),
      check_text_only_reduction(seed), check_causality(seed),
      check_mirope_properties(seed),   check_gate_properties(seed),
      check_scaling_claims(seed),      check_parameter_economy(seed),
      check_distractor_calibration(seed), check_training_smoke(seed),
  };
}

std::vector<CheckResult> run_selftest(std::uint64_t seed) {
  return {
      check_oracle_equivalence(seed), check_text_only_reduction(seed),
      check_causality(seed),          check_mirope_properties(seed),
      check_gate_properties(seed),    check_parameter_economy(seed),
  };
}

oracle::ComparisonReport gradcheck_single(std::uint64_t seed, int dim) {
  if (dim < 2 || dim % 2 != 0)
    throw std::invalid_argument("gradcheck: dim must be even and >= 2");
  int heads = dim % 4 == 0 ? 2 : 1;
  return hatb_grad_case(mix64(seed, 0x6763ull), dim, heads, 2 * dim);
}

}  // namespace hyperattn::checks
