#include "hyperattn/oracle.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace hyperattn::oracle {

Mat ref_linear(const Mat& x, const Mat& w) {
  if (x.cols != w.cols) throw std::invalid_argument("ref_linear: shape mismatch");
  Mat y(x.rows, w.rows);
  for (int i = 0; i < x.rows; ++i)
    for (int o = 0; o < w.rows; ++o) {
      double acc = 0.0;
      for (int j = 0; j < x.cols; ++j) acc += x.at(i, j) * w.at(o, j);
      y.at(i, o) = acc;
    }
  return y;
}

Mat ref_layernorm(const Mat& x, const Vec& gamma, const Vec& beta) {
  Mat y(x.rows, x.cols);
  for (int i = 0; i < x.rows; ++i) {
    double mu = 0.0;
    for (int j = 0; j < x.cols; ++j) mu += x.at(i, j);
    mu /= x.cols;
    double var = 0.0;
    for (int j = 0; j < x.cols; ++j)
      var += (x.at(i, j) - mu) * (x.at(i, j) - mu);
    var /= x.cols;
    if (var == 0.0) throw std::domain_error("ref_layernorm: zero-variance row");
    for (int j = 0; j < x.cols; ++j)
      y.at(i, j) = (x.at(i, j) - mu) / std::sqrt(var + kLayerNormEps) * gamma[j] + beta[j];
  }
  return y;
}

Mat ref_rotary(const Mat& x, const std::vector<int>& positions, int n_heads,
               double base) {
  int dh = x.cols / n_heads;
  Mat y(x.rows, x.cols);
  for (int i = 0; i < x.rows; ++i)
    for (int h = 0; h < n_heads; ++h)
      for (int j = 0; j < dh / 2; ++j) {
        double theta = positions[static_cast<std::size_t>(i)] *
                       std::pow(base, -2.0 * j / dh);
        int a = h * dh + 2 * j, b = a + 1;
        y.at(i, a) = x.at(i, a) * std::cos(theta) - x.at(i, b) * std::sin(theta);
        y.at(i, b) = x.at(i, a) * std::sin(theta) + x.at(i, b) * std::cos(theta);
      }
  return y;
}

Mat ref_attention(const Mat& q_rot, const Mat& k_rot, const Mat& v,
                  const std::vector<std::uint8_t>& visible, int n_heads) {
  int l = q_rot.rows, m = k_rot.rows, d = q_rot.cols;
  if (visible.size() != static_cast<std::size_t>(l) * m)
    throw std::invalid_argument("ref_attention: mask size mismatch");
  int dh = d / n_heads;
  Mat out(l, d);
  for (int h = 0; h < n_heads; ++h)
    for (int t = 0; t < l; ++t) {
      // scores over visible keys only
      std::vector<double> score(static_cast<std::size_t>(m), 0.0);
      std::vector<int> keys;
      for (int s = 0; s < m; ++s) {
        if (!visible[static_cast<std::size_t>(t) * m + s]) continue;
        double dot = 0.0;
        for (int j = 0; j < dh; ++j)
          dot += q_rot.at(t, h * dh + j) * k_rot.at(s, h * dh + j);
        score[static_cast<std::size_t>(s)] = dot / std::sqrt(static_cast<double>(dh));
        keys.push_back(s);
      }
      if (keys.empty()) continue;
      double mx = score[static_cast<std::size_t>(keys[0])];
      for (int s : keys)
        if (score[static_cast<std::size_t>(s)] > mx) mx = score[static_cast<std::size_t>(s)];
      double z = 0.0;
      for (int s : keys) z += std::exp(score[static_cast<std::size_t>(s)] - mx);
      for (int s : keys) {
        double p = std::exp(score[static_cast<std::size_t>(s)] - mx) / z;
        for (int j = 0; j < dh; ++j)
          out.at(t, h * dh + j) += p * v.at(s, h * dh + j);
      }
    }
  return out;
}

Mat dense_attention_reference(const Mat& q, const Mat& k, const Mat& v,
                              const std::vector<int>& positions_q,
                              const std::vector<int>& positions_k,
                              const std::vector<std::uint8_t>& visible,
                              int n_heads) {
  Mat q_rot = ref_rotary(q, positions_q, n_heads);
  Mat k_rot = ref_rotary(k, positions_k, n_heads);
  return ref_attention(q_rot, k_rot, v, visible, n_heads);
}

static Mat ref_ffn(const Mat& x1, const BlockWeights& w) {
  Mat m = ref_layernorm(x1, w.ln2_g, w.ln2_b);
  Mat pre = ref_linear(m, w.ffn1);
  for (std::size_t i = 0; i < pre.size(); ++i) {
    double z = pre.d[i];
    pre.d[i] = z / (1.0 + std::exp(-z));
  }
  Mat out = ref_linear(pre, w.ffn2);
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) out.at(i, j) += x1.at(i, j);
  return out;
}

static std::vector<std::uint8_t> causal_mask(int l) {
  std::vector<std::uint8_t> vis(static_cast<std::size_t>(l) * l, 0);
  for (int t = 0; t < l; ++t)
    for (int s = 0; s <= t; ++s) vis[static_cast<std::size_t>(t) * l + s] = 1;
  return vis;
}

HatbRef hatb_reference(const AttentionInputs& in, const HatbParams& params) {
  const BlockWeights& w = *params.host;
  int l = in.h_text.rows, d = in.h_text.cols, m = in.h_img.rows;
  Mat n_text = ref_layernorm(in.h_text, w.ln1_g, w.ln1_b);
  Mat n_img = m > 0 ? ref_layernorm(in.h_img, w.ln1_g, w.ln1_b) : Mat(0, d);
  Mat q = ref_linear(n_text, w.wq);
  Mat kk = ref_linear(n_text, w.wk);
  Mat vv = ref_linear(n_text, w.wv);
  Mat q_rot = ref_rotary(q, in.query_positions, in.n_heads);
  Mat k_rot = ref_rotary(kk, in.query_positions, in.n_heads);

  Mat ctx_self = ref_attention(q_rot, k_rot, vv, causal_mask(l), in.n_heads);
  HatbRef r;
  r.h_self = ref_linear(ctx_self, w.wo);

  // split the stacked visual projection by hand
  Mat kv = m > 0 ? ref_linear(n_img, params.w_kv_img) : Mat(0, 2 * d);
  Mat k_img(m, d), v_img(m, d);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j) {
      k_img.at(i, j) = kv.at(i, j);
      v_img.at(i, j) = kv.at(i, d + j);
    }
  Mat k_img_rot = ref_rotary(k_img, in.patch_positions, in.n_heads);
  std::vector<std::uint8_t> vis(static_cast<std::size_t>(l) * m, 0);
  r.bypass.assign(static_cast<std::size_t>(l), 1);
  for (int t = 0; t < l; ++t)
    for (int s = 0; s < m; ++s)
      if (in.mask.at(t, in.patch_slot[static_cast<std::size_t>(s)])) {
        vis[static_cast<std::size_t>(t) * m + s] = 1;
        r.bypass[static_cast<std::size_t>(t)] = 0;
      }
  Mat ctx_cross = ref_attention(q_rot, k_img_rot, v_img, vis, in.n_heads);
  r.h_cross = ref_linear(ctx_cross, w.wo);
  for (int t = 0; t < l; ++t)
    if (r.bypass[static_cast<std::size_t>(t)])
      for (int j = 0; j < d; ++j) r.h_cross.at(t, j) = 0.0;

  r.gate.assign(static_cast<std::size_t>(l), 0.0);
  for (int t = 0; t < l; ++t) {
    double z = params.gate_bias;
    for (int j = 0; j < d; ++j) z += r.h_self.at(t, j) * params.w_gate[j];
    r.gate[static_cast<std::size_t>(t)] = 1.0 / (1.0 + std::exp(-z));
  }
  r.h_fused = Mat(l, d);
  for (int t = 0; t < l; ++t) {
    double g = r.gate[static_cast<std::size_t>(t)];
    for (int j = 0; j < d; ++j)
      r.h_fused.at(t, j) = r.bypass[static_cast<std::size_t>(t)]
                               ? r.h_self.at(t, j)
                               : r.h_cross.at(t, j) * g + r.h_self.at(t, j) * (1.0 - g);
  }
  Mat x1(l, d);
  for (int t = 0; t < l; ++t)
    for (int j = 0; j < d; ++j) x1.at(t, j) = in.h_text.at(t, j) + r.h_fused.at(t, j);
  r.block_out = ref_ffn(x1, w);
  return r;
}

Mat block_reference(const Mat& x, const BlockWeights& w,
                    const std::vector<int>& positions, int n_heads) {
  Mat n = ref_layernorm(x, w.ln1_g, w.ln1_b);
  Mat q_rot = ref_rotary(ref_linear(n, w.wq), positions, n_heads);
  Mat k_rot = ref_rotary(ref_linear(n, w.wk), positions, n_heads);
  Mat v = ref_linear(n, w.wv);
  Mat ctx = ref_attention(q_rot, k_rot, v, causal_mask(x.rows), n_heads);
  Mat h_self = ref_linear(ctx, w.wo);
  Mat x1(x.rows, x.cols);
  for (int i = 0; i < x.rows; ++i)
    for (int j = 0; j < x.cols; ++j) x1.at(i, j) = x.at(i, j) + h_self.at(i, j);
  return ref_ffn(x1, w);
}

ModelRef model_reference(const Model& m, const InterleavedSequence& seq,
                         const Mat& raw_feats) {
  if (m.cfg.variant != Variant::hyper)
    throw std::invalid_argument("model_reference covers the hyper variant only");
  int d = m.cfg.hidden_dim, v = m.cfg.patches_per_slot;
  int l = seq.length(), n_slots = seq.num_slots();
  Mat proj = n_slots > 0 ? ref_linear(raw_feats, m.w_vis) : Mat(0, d);
  RotaryPositionMap rope = build_rope_map(seq);
  CrossAttentionMask mask = build_cross_mask(seq);

  Mat x(l, d);
  for (int t = 0; t < l; ++t)
    for (int j = 0; j < d; ++j)
      x.at(t, j) = m.embedding.at(seq.tokens[static_cast<std::size_t>(t)], j);
  std::vector<int> positions(static_cast<std::size_t>(l));
  for (int t = 0; t < l; ++t) positions[static_cast<std::size_t>(t)] = t;

  AttentionInputs in;
  in.h_img = proj;
  in.query_positions = positions;
  in.n_heads = m.cfg.n_heads;
  in.mask = mask;
  in.patch_positions.resize(static_cast<std::size_t>(n_slots) * v);
  in.patch_slot.resize(in.patch_positions.size());
  for (int s = 0; s < n_slots; ++s)
    for (int p = 0; p < v; ++p) {
      in.patch_positions[static_cast<std::size_t>(s) * v + p] =
          rope.visual_key_positions[static_cast<std::size_t>(s)];
      in.patch_slot[static_cast<std::size_t>(s) * v + p] = s;
    }

  for (int layer = 0; layer < m.cfg.n_layers; ++layer) {
    int fi = m.fusion_index(layer);
    if (fi >= 0) {
      in.h_text = x;
      x = hatb_reference(in, m.hatb[static_cast<std::size_t>(fi)]).block_out;
    } else {
      x = block_reference(x, m.blocks[static_cast<std::size_t>(layer)], positions,
                          m.cfg.n_heads);
    }
  }
  ModelRef out;
  out.hidden = x;
  Mat h_norm = ref_layernorm(x, m.ln_f_g, m.ln_f_b);
  out.logits = ref_linear(h_norm, m.w_head);
  return out;
}

std::vector<double> finite_diff_grad(const std::function<double()>& f, double* p,
                                     std::size_t n, double eps) {
  std::vector<double> g(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double keep = p[i];
    p[i] = keep + eps;
    double up = f();
    p[i] = keep - eps;
    double down = f();
    p[i] = keep;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw std::runtime_error("finite_diff_grad: non-finite objective");
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

static ComparisonReport compare_impl(const std::map<std::string, Mat>& a,
                                     const std::map<std::string, Mat>& b, double tol,
                                     double floor, bool sym) {
  ComparisonReport r;
  r.tolerance = tol;
  if (a.size() != b.size())
    throw std::invalid_argument("compare: tensor sets differ in size");
  for (const auto& [name, ta] : a) {
    auto it = b.find(name);
    if (it == b.end())
      throw std::invalid_argument("compare: missing tensor '" + name + "'");
    const Mat& tb = it->second;
    if (!ta.same_shape(tb))
      throw std::invalid_argument("compare: shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < ta.size(); ++i) {
      double abs_err = std::fabs(ta.d[i] - tb.d[i]);
      double denom = sym ? std::max({std::fabs(ta.d[i]), std::fabs(tb.d[i]), floor})
                         : std::max(std::fabs(tb.d[i]), floor);
      double rel = abs_err / denom;
      if (abs_err > r.max_abs_err) r.max_abs_err = abs_err;
      if (rel > r.max_rel_err) {
        r.max_rel_err = rel;
        r.worst_tensor = name;
        r.worst_index = i;
      }
    }
  }
  r.pass = r.max_rel_err <= tol;
  return r;
}

ComparisonReport compare(const std::map<std::string, Mat>& a,
                         const std::map<std::string, Mat>& b, double tol,
                         double rel_floor) {
  return compare_impl(a, b, tol, rel_floor, false);
}

ComparisonReport grad_compare(const std::map<std::string, Mat>& analytic,
                              const std::map<std::string, Mat>& numeric, double tol,
                              double floor) {
  return compare_impl(analytic, numeric, tol, floor, true);
}

std::string ComparisonReport::to_json() const {
  nlohmann::json j;
  j["max_abs_err"] = max_abs_err;
  j["max_rel_err"] = max_rel_err;
  j["worst_tensor"] = worst_tensor;
  j["worst_index"] = worst_index;
  j["tolerance"] = tolerance;
  j["pass"] = pass;
  return j.dump(1);
}

}  // namespace hyperattn::oracle
