#include "hyperattn/hatb.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <string>

namespace hyperattn {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double silu(double x) { return x * sigmoid(x); }
static double silu_grad(double x) {
  double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

BlockGrads zero_grads_like(const BlockWeights& w) {
  BlockGrads g;
  g.ln1_g.assign(w.ln1_g.size(), 0.0);
  g.ln1_b.assign(w.ln1_b.size(), 0.0);
  g.ln2_g.assign(w.ln2_g.size(), 0.0);
  g.ln2_b.assign(w.ln2_b.size(), 0.0);
  g.wq = Mat(w.wq.rows, w.wq.cols);
  g.wk = Mat(w.wk.rows, w.wk.cols);
  g.wv = Mat(w.wv.rows, w.wv.cols);
  g.wo = Mat(w.wo.rows, w.wo.cols);
  g.ffn1 = Mat(w.ffn1.rows, w.ffn1.cols);
  g.ffn2 = Mat(w.ffn2.rows, w.ffn2.cols);
  return g;
}

HatbGrads zero_grads_like(const HatbParams& p) {
  HatbGrads g;
  g.w_kv_img = Mat(p.w_kv_img.rows, p.w_kv_img.cols);
  g.w_gate.assign(p.w_gate.size(), 0.0);
  g.gate_bias = 0.0;
  return g;
}

HatbParams make_hatb_params(const BlockWeights& host) {
  int d = host.wk.rows;
  HatbParams p;
  p.host = &host;
  p.w_kv_img = Mat(2 * d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      p.w_kv_img.at(i, j) = host.wk.at(i, j);
      p.w_kv_img.at(d + i, j) = host.wv.at(i, j);
    }
  p.w_gate.assign(static_cast<std::size_t>(d), 0.0);
  p.gate_bias = 0.0;
  return p;
}

AttentionInputs make_attention_inputs(Mat h_text, Mat h_img,
                                      const RotaryPositionMap& rope,
                                      const CrossAttentionMask& mask,
                                      int patches_per_slot, int n_heads) {
  if (patches_per_slot <= 0)
    throw std::invalid_argument("make_attention_inputs: patches_per_slot must be positive");
  int n_slots = static_cast<int>(rope.visual_key_positions.size());
  if (h_img.rows != n_slots * patches_per_slot)
    throw std::invalid_argument("make_attention_inputs: h_img rows != slots * patches_per_slot");
  if (h_text.rows != static_cast<int>(rope.query_positions.size()))
    throw std::invalid_argument("make_attention_inputs: h_text rows != query positions");
  AttentionInputs in;
  in.h_text = std::move(h_text);
  in.h_img = std::move(h_img);
  in.query_positions = rope.query_positions;
  in.patch_positions.resize(static_cast<std::size_t>(n_slots) * patches_per_slot);
  in.patch_slot.resize(in.patch_positions.size());
  for (int s = 0; s < n_slots; ++s)
    for (int p = 0; p < patches_per_slot; ++p) {
      in.patch_positions[static_cast<std::size_t>(s) * patches_per_slot + p] =
          rope.visual_key_positions[s];
      in.patch_slot[static_cast<std::size_t>(s) * patches_per_slot + p] = s;
    }
  in.mask = mask;
  in.n_heads = n_heads;
  return in;
}

// --- layernorm -----------------------------------------------------------

Mat layernorm_rows(const Mat& x, const Vec& gamma, const Vec& beta, LnCache* cache) {
  int n = x.rows, d = x.cols;
  if (static_cast<int>(gamma.size()) != d || static_cast<int>(beta.size()) != d)
    throw std::invalid_argument("layernorm: gamma/beta size mismatch");
  Mat y(n, d);
  if (cache) {
    cache->mean.assign(static_cast<std::size_t>(n), 0.0);
    cache->rstd.assign(static_cast<std::size_t>(n), 0.0);
  }
  for (int i = 0; i < n; ++i) {
    const double* xi = x.row(i);
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += xi[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = xi[j] - mu;
      var += c * c;
    }
    var /= d;
    if (var == 0.0)
      throw std::domain_error("layernorm: zero-variance row " + std::to_string(i));
    double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    double* yi = y.row(i);
    for (int j = 0; j < d; ++j) yi[j] = (xi[j] - mu) * rstd * gamma[j] + beta[j];
    if (cache) {
      cache->mean[i] = mu;
      cache->rstd[i] = rstd;
    }
  }
  return y;
}

Mat layernorm_backward(const Mat& x, const LnCache& cache, const Vec& gamma,
                       const Mat& dy, Vec& d_gamma, Vec& d_beta) {
  int n = x.rows, d = x.cols;
  Mat dx(n, d);
  for (int i = 0; i < n; ++i) {
    const double* xi = x.row(i);
    const double* dyi = dy.row(i);
    double mu = cache.mean[i], rstd = cache.rstd[i];
    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
    for (int j = 0; j < d; ++j) {
      double xh = (xi[j] - mu) * rstd;
      double dxh = dyi[j] * gamma[j];
      d_gamma[j] += dyi[j] * xh;
      d_beta[j] += dyi[j];
      sum_dxh += dxh;
      sum_dxh_xh += dxh * xh;
    }
    double* dxi = dx.row(i);
    for (int j = 0; j < d; ++j) {
      double xh = (xi[j] - mu) * rstd;
      double dxh = dyi[j] * gamma[j];
      dxi[j] = rstd * (dxh - sum_dxh / d - xh * sum_dxh_xh / d);
    }
  }
  return dx;
}

std::pair<Mat, Mat> shared_layernorm(const Mat& h_text, const Mat& h_img,
                                     const Vec& ln_g, const Vec& ln_b,
                                     LnCache* cache_text, LnCache* cache_img) {
  Mat n_text = layernorm_rows(h_text, ln_g, ln_b, cache_text);
  Mat n_img = layernorm_rows(h_img, ln_g, ln_b, cache_img);
  return {std::move(n_text), std::move(n_img)};
}

// --- projections and rotary ----------------------------------------------

std::pair<Mat, Mat> project_visual_kv(const Mat& n_img, const Mat& w_kv_img) {
  int d = n_img.cols;
  if (w_kv_img.rows != 2 * d || w_kv_img.cols != d)
    throw std::invalid_argument("project_visual_kv: w_kv_img must be [2D x D]");
  Mat kv = matmul_nt(n_img, w_kv_img);  // [M x 2D]
  Mat k(n_img.rows, d), v(n_img.rows, d);
  for (int i = 0; i < n_img.rows; ++i) {
    const double* kvi = kv.row(i);
    std::memcpy(k.row(i), kvi, sizeof(double) * d);
    std::memcpy(v.row(i), kvi + d, sizeof(double) * d);
  }
  return {std::move(k), std::move(v)};
}

Mat apply_rotary(const Mat& x, const std::vector<int>& positions, int n_heads,
                 double base, bool inverse) {
  int n = x.rows, d = x.cols;
  if (static_cast<int>(positions.size()) != n)
    throw std::invalid_argument("apply_rotary: positions size mismatch");
  if (n_heads <= 0 || d % n_heads != 0)
    throw std::invalid_argument("apply_rotary: dim not divisible by heads");
  int dh = d / n_heads;
  if (dh % 2 != 0)
    throw std::invalid_argument("apply_rotary: head dim must be even");
  Mat y(n, d);
  for (int i = 0; i < n; ++i) {
    double pos = static_cast<double>(positions[i]);
    if (inverse) pos = -pos;
    const double* xi = x.row(i);
    double* yi = y.row(i);
    for (int h = 0; h < n_heads; ++h) {
      int off = h * dh;
      for (int j = 0; j < dh / 2; ++j) {
        double theta = pos * std::pow(base, -2.0 * j / dh);
        double c = std::cos(theta), s = std::sin(theta);
        double x0 = xi[off + 2 * j], x1 = xi[off + 2 * j + 1];
        yi[off + 2 * j] = x0 * c - x1 * s;
        yi[off + 2 * j + 1] = x0 * s + x1 * c;
      }
    }
  }
  return y;
}

// --- attention ------------------------------------------------------------

static void softmax_row(double* s, int n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < n; ++j)
    if (s[j] > mx) mx = s[j];
  double z = 0.0;
  for (int j = 0; j < n; ++j) {
    s[j] = std::exp(s[j] - mx);
    z += s[j];
  }
  for (int j = 0; j < n; ++j) s[j] /= z;
}

Mat self_attention(const Mat& q_rot, const Mat& k_rot, const Mat& v, const Mat& wo,
                   int n_heads, std::vector<Mat>* probs_out, Mat* ctx_out) {
  int l = q_rot.rows, d = q_rot.cols;
  int dh = d / n_heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat ctx(l, d);
  if (probs_out) probs_out->assign(static_cast<std::size_t>(n_heads), Mat());
  for (int h = 0; h < n_heads; ++h) {
    int off = h * dh;
    Mat p(l, l);
    for (int t = 0; t < l; ++t) {
      double* pt = p.row(t);
      const double* qt = q_rot.row(t) + off;
      for (int s = 0; s <= t; ++s) {
        const double* ks = k_rot.row(s) + off;
        double dot = 0.0;
        for (int j = 0; j < dh; ++j) dot += qt[j] * ks[j];
        pt[s] = dot * scale;
      }
      for (int s = t + 1; s < l; ++s) pt[s] = -std::numeric_limits<double>::infinity();
      softmax_row(pt, l);
      double* ct = ctx.row(t) + off;
      for (int s = 0; s <= t; ++s) {
        const double* vs = v.row(s) + off;
        double w = pt[s];
        for (int j = 0; j < dh; ++j) ct[j] += w * vs[j];
      }
    }
    if (probs_out) (*probs_out)[h] = std::move(p);
  }
  counters::add_attn_flops(2ull * l * l * d);
  Mat out = matmul_nt(ctx, wo);
  if (ctx_out) *ctx_out = std::move(ctx);
  return out;
}

Mat cross_attention(const Mat& q_rot, const Mat& k_img_rot, const Mat& v_img,
                    const std::vector<int>& patch_slot, const CrossAttentionMask& mask,
                    const Mat& wo, int n_heads,
                    std::vector<std::uint8_t>* bypass_out,
                    std::vector<Mat>* probs_out, Mat* ctx_out) {
  int l = q_rot.rows, d = q_rot.cols, m = k_img_rot.rows;
  if (static_cast<int>(patch_slot.size()) != m)
    throw std::invalid_argument("cross_attention: patch_slot size mismatch");
  if (mask.text_len != l)
    throw std::invalid_argument("cross_attention: mask text_len mismatch");
  int dh = d / n_heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<std::uint8_t> bypass(static_cast<std::size_t>(l), 0);
  for (int t = 0; t < l; ++t) {
    bool any = false;
    for (int j = 0; j < m && !any; ++j) any = mask.at(t, patch_slot[j]);
    bypass[t] = any ? 0 : 1;
  }
  Mat ctx(l, d);
  if (probs_out) probs_out->assign(static_cast<std::size_t>(n_heads), Mat());
  for (int h = 0; h < n_heads; ++h) {
    int off = h * dh;
    Mat p(l, m);
    for (int t = 0; t < l; ++t) {
      if (bypass[t]) continue;  // probability row stays zero
      double* pt = p.row(t);
      const double* qt = q_rot.row(t) + off;
      for (int s = 0; s < m; ++s) {
        if (!mask.at(t, patch_slot[s])) {
          pt[s] = -std::numeric_limits<double>::infinity();
          continue;
        }
        const double* ks = k_img_rot.row(s) + off;
        double dot = 0.0;
        for (int j = 0; j < dh; ++j) dot += qt[j] * ks[j];
        pt[s] = dot * scale;
      }
      softmax_row(pt, m);
      double* ct = ctx.row(t) + off;
      for (int s = 0; s < m; ++s) {
        if (pt[s] == 0.0) continue;
        const double* vs = v_img.row(s) + off;
        double w = pt[s];
        for (int j = 0; j < dh; ++j) ct[j] += w * vs[j];
      }
    }
    if (probs_out) (*probs_out)[h] = std::move(p);
  }
  counters::add_attn_flops(2ull * l * m * d);
  Mat out = matmul_nt(ctx, wo);
  for (int t = 0; t < l; ++t)
    if (bypass[t])
      std::memset(out.row(t), 0, sizeof(double) * d);
  if (bypass_out) *bypass_out = std::move(bypass);
  if (ctx_out) *ctx_out = std::move(ctx);
  return out;
}

Vec adaptive_gate(const Mat& h_self, const Vec& w_gate, double gate_bias) {
  int l = h_self.rows, d = h_self.cols;
  if (static_cast<int>(w_gate.size()) != d)
    throw std::invalid_argument("adaptive_gate: w_gate size mismatch");
  Vec g(static_cast<std::size_t>(l), 0.0);
  for (int t = 0; t < l; ++t) {
    const double* ht = h_self.row(t);
    double z = gate_bias;
    for (int j = 0; j < d; ++j) z += ht[j] * w_gate[j];
    g[t] = sigmoid(z);
  }
  return g;
}

Mat fuse(const Mat& h_cross, const Mat& h_self, const Vec& gate,
         const std::vector<std::uint8_t>& bypass) {
  int l = h_self.rows, d = h_self.cols;
  Mat out(l, d);
  for (int t = 0; t < l; ++t) {
    double* ot = out.row(t);
    const double* hs = h_self.row(t);
    if (bypass[t]) {
      // no visible visual context: the sub-layer reduces to plain
      // self-attention, bit for bit
      std::memcpy(ot, hs, sizeof(double) * d);
      continue;
    }
    double g = gate[t];
    if (!(g > 0.0 && g < 1.0))
      throw std::domain_error("fuse: gate out of (0,1) at token " + std::to_string(t));
    const double* hc = h_cross.row(t);
    for (int j = 0; j < d; ++j) ot[j] = hc[j] * g + hs[j] * (1.0 - g);
  }
  return out;
}

// --- whole blocks ----------------------------------------------------------

Mat block_ffn_forward(const Mat& x1, const BlockWeights& w, BlockCache* cache) {
  LnCache ln2;
  Mat m_norm = layernorm_rows(x1, w.ln2_g, w.ln2_b, &ln2);
  Mat pre = matmul_nt(m_norm, w.ffn1);
  Mat act(pre.rows, pre.cols);
  for (std::size_t i = 0; i < pre.size(); ++i) act.d[i] = silu(pre.d[i]);
  Mat out = matmul_nt(act, w.ffn2);
  add_inplace(out, x1);
  if (cache) {
    cache->x1 = x1;
    cache->ln2 = std::move(ln2);
    cache->m_norm = std::move(m_norm);
    cache->ffn_pre = std::move(pre);
    cache->ffn_act = std::move(act);
  }
  return out;
}

// Returns d_x1 including the residual path; accumulates FFN grads.
Mat block_ffn_backward(const BlockWeights& w, const BlockCache& cache,
                       const Mat& d_out, BlockGrads& g) {
  Mat d_act = matmul(d_out, w.ffn2);
  add_inplace(g.ffn2, matmul_tn(d_out, cache.ffn_act));
  Mat d_pre(d_act.rows, d_act.cols);
  for (std::size_t i = 0; i < d_act.size(); ++i)
    d_pre.d[i] = d_act.d[i] * silu_grad(cache.ffn_pre.d[i]);
  Mat d_m = matmul(d_pre, w.ffn1);
  add_inplace(g.ffn1, matmul_tn(d_pre, cache.m_norm));
  Mat d_x1 = layernorm_backward(cache.x1, cache.ln2, w.ln2_g, d_m, g.ln2_g, g.ln2_b);
  add_inplace(d_x1, d_out);
  return d_x1;
}

Mat block_attn_forward(const Mat& x, const BlockWeights& w,
                       const std::vector<int>& positions, int n_heads,
                       BlockCache* cache) {
  LnCache ln1;
  Mat n_text = layernorm_rows(x, w.ln1_g, w.ln1_b, &ln1);
  Mat q = matmul_nt(n_text, w.wq);
  Mat k = matmul_nt(n_text, w.wk);
  Mat v = matmul_nt(n_text, w.wv);
  Mat q_rot = apply_rotary(q, positions, n_heads);
  Mat k_rot = apply_rotary(k, positions, n_heads);
  std::vector<Mat> probs;
  Mat ctx;
  Mat h_self = self_attention(q_rot, k_rot, v, w.wo, n_heads,
                              cache ? &probs : nullptr, cache ? &ctx : nullptr);
  Mat x1 = x;
  add_inplace(x1, h_self);
  if (cache) {
    cache->n_text = std::move(n_text);
    cache->ln1 = std::move(ln1);
    cache->q_rot = std::move(q_rot);
    cache->k_rot = std::move(k_rot);
    cache->v = std::move(v);
    cache->p_self = std::move(probs);
    cache->ctx_self = std::move(ctx);
    cache->h_self = std::move(h_self);
    cache->has_cross = false;
  }
  return x1;
}

Mat standard_block_forward(const Mat& x, const BlockWeights& w,
                           const std::vector<int>& positions, int n_heads,
                           BlockCache* cache) {
  Mat x1 = block_attn_forward(x, w, positions, n_heads, cache);
  return block_ffn_forward(x1, w, cache);
}

void attention_core_backward(const std::vector<Mat>& probs, const Mat& q_rot,
                             const Mat& k_rot, const Mat& v, const Mat& d_ctx,
                             int n_heads, Mat& dq, Mat& dk, Mat& dv) {
  int l = q_rot.rows, d = q_rot.cols, m = k_rot.rows;
  int dh = d / n_heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < n_heads; ++h) {
    int off = h * dh;
    const Mat& p = probs[h];
    for (int t = 0; t < l; ++t) {
      const double* pt = p.row(t);
      const double* dct = d_ctx.row(t) + off;
      // dp, then softmax jacobian: ds = p .* (dp - sum(dp .* p))
      double dot_dp_p = 0.0;
      // first pass computes dp on the fly twice; keep a scratch row instead
      static thread_local std::vector<double> dp_row;
      dp_row.assign(static_cast<std::size_t>(m), 0.0);
      for (int s = 0; s < m; ++s) {
        if (pt[s] == 0.0) continue;
        const double* vs = v.row(s) + off;
        double dp = 0.0;
        for (int j = 0; j < dh; ++j) dp += dct[j] * vs[j];
        dp_row[s] = dp;
        dot_dp_p += dp * pt[s];
        // dv += p^T d_ctx
        double* dvs = dv.row(s) + off;
        double w = pt[s];
        for (int j = 0; j < dh; ++j) dvs[j] += w * dct[j];
      }
      double* dqt = dq.row(t) + off;
      for (int s = 0; s < m; ++s) {
        if (pt[s] == 0.0) continue;
        double ds = pt[s] * (dp_row[s] - dot_dp_p) * scale;
        const double* ks = k_rot.row(s) + off;
        double* dks = dk.row(s) + off;
        const double* qt = q_rot.row(t) + off;
        for (int j = 0; j < dh; ++j) {
          dqt[j] += ds * ks[j];
          dks[j] += ds * qt[j];
        }
      }
    }
  }
}

Mat block_attn_backward(const Mat& x, const BlockWeights& w,
                        const std::vector<int>& positions, int n_heads,
                        const BlockCache& cache, const Mat& d_x1, BlockGrads& g) {
  // x1 = x + h_self
  const Mat& d_h_self = d_x1;
  Mat d_ctx = matmul(d_h_self, w.wo);
  add_inplace(g.wo, matmul_tn(d_h_self, cache.ctx_self));
  int l = x.rows, d = x.cols;
  Mat dq_rot(l, d), dk_rot(l, d), dv(l, d);
  attention_core_backward(cache.p_self, cache.q_rot, cache.k_rot, cache.v, d_ctx,
                          n_heads, dq_rot, dk_rot, dv);
  Mat dq = apply_rotary(dq_rot, positions, n_heads, kRotaryBase, true);
  Mat dk = apply_rotary(dk_rot, positions, n_heads, kRotaryBase, true);
  Mat d_n = matmul(dq, w.wq);
  add_inplace(d_n, matmul(dk, w.wk));
  add_inplace(d_n, matmul(dv, w.wv));
  add_inplace(g.wq, matmul_tn(dq, cache.n_text));
  add_inplace(g.wk, matmul_tn(dk, cache.n_text));
  add_inplace(g.wv, matmul_tn(dv, cache.n_text));
  Mat dx = layernorm_backward(x, cache.ln1, w.ln1_g, d_n, g.ln1_g, g.ln1_b);
  add_inplace(dx, d_x1);  // residual
  return dx;
}

Mat standard_block_backward(const Mat& x, const BlockWeights& w,
                            const std::vector<int>& positions, int n_heads,
                            const BlockCache& cache, const Mat& d_out,
                            BlockGrads& g) {
  Mat d_x1 = block_ffn_backward(w, cache, d_out, g);
  return block_attn_backward(x, w, positions, n_heads, cache, d_x1, g);
}

HatbOutput hatb_forward(const AttentionInputs& in, const HatbParams& params,
                        BlockCache* cache) {
  const BlockWeights& w = *params.host;
  LnCache ln1, ln1_img;
  auto [n_text, n_img] = shared_layernorm(in.h_text, in.h_img, w.ln1_g, w.ln1_b,
                                          &ln1, &ln1_img);
  Mat q = matmul_nt(n_text, w.wq);
  Mat k = matmul_nt(n_text, w.wk);
  Mat v = matmul_nt(n_text, w.wv);
  Mat q_rot = apply_rotary(q, in.query_positions, in.n_heads);
  Mat k_rot = apply_rotary(k, in.query_positions, in.n_heads);
  auto [k_img, v_img] = project_visual_kv(n_img, params.w_kv_img);
  Mat k_img_rot = apply_rotary(k_img, in.patch_positions, in.n_heads);

  std::vector<Mat> p_self, p_cross;
  Mat ctx_self, ctx_cross;
  Mat h_self = self_attention(q_rot, k_rot, v, w.wo, in.n_heads,
                              cache ? &p_self : nullptr, cache ? &ctx_self : nullptr);
  std::vector<std::uint8_t> bypass;
  Mat h_cross = cross_attention(q_rot, k_img_rot, v_img, in.patch_slot, in.mask,
                                w.wo, in.n_heads, &bypass,
                                cache ? &p_cross : nullptr,
                                cache ? &ctx_cross : nullptr);
  Vec gate = adaptive_gate(h_self, params.w_gate, params.gate_bias);
  Mat h_fused = fuse(h_cross, h_self, gate, bypass);

  Mat x1 = in.h_text;
  add_inplace(x1, h_fused);
  Mat out = block_ffn_forward(x1, w, cache);

  HatbOutput res;
  res.h_fused = std::move(h_fused);
  res.gate = gate;
  res.bypass = bypass;
  res.block_out = out;
  if (cache) {
    cache->n_text = std::move(n_text);
    cache->ln1 = std::move(ln1);
    cache->q_rot = std::move(q_rot);
    cache->k_rot = std::move(k_rot);
    cache->v = std::move(v);
    cache->p_self = std::move(p_self);
    cache->ctx_self = std::move(ctx_self);
    cache->h_self = h_self;
    cache->has_cross = true;
    cache->n_img = std::move(n_img);
    cache->ln1_img = std::move(ln1_img);
    cache->k_img_rot = std::move(k_img_rot);
    cache->v_img = std::move(v_img);
    cache->p_cross = std::move(p_cross);
    cache->ctx_cross = std::move(ctx_cross);
    cache->h_cross = h_cross;
    cache->gate = std::move(gate);
    cache->bypass = std::move(bypass);
  }
  res.h_self = std::move(h_self);
  res.h_cross = std::move(h_cross);
  return res;
}

Mat hatb_backward(const AttentionInputs& in, const HatbParams& params,
                  const BlockCache& cache, const Mat& d_out, BlockGrads& g,
                  HatbGrads& gh, Mat& d_h_img) {
  const BlockWeights& w = *params.host;
  int l = in.h_text.rows, d = in.h_text.cols, m = in.h_img.rows;

  Mat d_x1 = block_ffn_backward(w, cache, d_out, g);
  const Mat& d_fused = d_x1;  // x1 = h_text + h_fused

  // fuse: h_fused = g*h_cross + (1-g)*h_self, or h_self verbatim on bypass rows
  Mat d_h_self(l, d), d_h_cross(l, d);
  Vec d_gate(static_cast<std::size_t>(l), 0.0);
  for (int t = 0; t < l; ++t) {
    const double* df = d_fused.row(t);
    double* dhs = d_h_self.row(t);
    if (cache.bypass[t]) {
      std::memcpy(dhs, df, sizeof(double) * d);
      continue;
    }
    double gt = cache.gate[t];
    double* dhc = d_h_cross.row(t);
    const double* hc = cache.h_cross.row(t);
    const double* hs = cache.h_self.row(t);
    double dg = 0.0;
    for (int j = 0; j < d; ++j) {
      dhc[j] = df[j] * gt;
      dhs[j] = df[j] * (1.0 - gt);
      dg += df[j] * (hc[j] - hs[j]);
    }
    d_gate[t] = dg;
  }
  // gate: g = sigmoid(h_self . w_gate + b)
  for (int t = 0; t < l; ++t) {
    if (cache.bypass[t]) continue;
    double gt = cache.gate[t];
    double dz = d_gate[t] * gt * (1.0 - gt);
    gh.gate_bias += dz;
    const double* hs = cache.h_self.row(t);
    double* dhs = d_h_self.row(t);
    for (int j = 0; j < d; ++j) {
      gh.w_gate[j] += dz * hs[j];
      dhs[j] += dz * params.w_gate[j];
    }
  }

  // cross branch: h_cross = ctx_cross wo^T, zeroed on bypass rows (their
  // d_h_cross is already zero)
  Mat d_ctx_cross = matmul(d_h_cross, w.wo);
  add_inplace(g.wo, matmul_tn(d_h_cross, cache.ctx_cross));
  Mat dq_rot(l, d), dk_img_rot(m, d), dv_img(m, d);
  attention_core_backward(cache.p_cross, cache.q_rot, cache.k_img_rot, cache.v_img,
                          d_ctx_cross, in.n_heads, dq_rot, dk_img_rot, dv_img);

  // self branch
  Mat d_ctx_self = matmul(d_h_self, w.wo);
  add_inplace(g.wo, matmul_tn(d_h_self, cache.ctx_self));
  Mat dk_rot(l, d), dv(l, d);
  attention_core_backward(cache.p_self, cache.q_rot, cache.k_rot, cache.v,
                          d_ctx_self, in.n_heads, dq_rot, dk_rot, dv);

  // undo rotary
  Mat dq = apply_rotary(dq_rot, in.query_positions, in.n_heads, kRotaryBase, true);
  Mat dk = apply_rotary(dk_rot, in.query_positions, in.n_heads, kRotaryBase, true);
  Mat dk_img = apply_rotary(dk_img_rot, in.patch_positions, in.n_heads, kRotaryBase, true);

  // text-side projections
  Mat d_n_text = matmul(dq, w.wq);
  add_inplace(d_n_text, matmul(dk, w.wk));
  add_inplace(d_n_text, matmul(dv, w.wv));
  add_inplace(g.wq, matmul_tn(dq, cache.n_text));
  add_inplace(g.wk, matmul_tn(dk, cache.n_text));
  add_inplace(g.wv, matmul_tn(dv, cache.n_text));

  // visual kv projection: [k_img; v_img] = n_img w_kv^T
  Mat d_kv(m, 2 * d);
  for (int i = 0; i < m; ++i) {
    std::memcpy(d_kv.row(i), dk_img.row(i), sizeof(double) * d);
    std::memcpy(d_kv.row(i) + d, dv_img.row(i), sizeof(double) * d);
  }
  add_inplace(gh.w_kv_img, matmul_tn(d_kv, cache.n_img));
  Mat d_n_img = matmul(d_kv, params.w_kv_img);

  // shared layernorm: gamma/beta accumulate from both streams
  Mat dx = layernorm_backward(in.h_text, cache.ln1, w.ln1_g, d_n_text, g.ln1_g, g.ln1_b);
  Mat dxi = layernorm_backward(in.h_img, cache.ln1_img, w.ln1_g, d_n_img, g.ln1_g, g.ln1_b);
  if (d_h_img.rows == 0) d_h_img = Mat(m, d);
  add_inplace(d_h_img, dxi);
  add_inplace(dx, d_x1);  // residual into h_text
  return dx;
}

}  // namespace hyperattn
