#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "hyperattn/interleave.hpp"
#include "hyperattn/mat.hpp"

namespace hyperattn {

constexpr double kLayerNormEps = 1e-5;
constexpr double kRotaryBase = 10000.0;

// Weights of one standard pre-norm decoder block. The hyper attention block
// reuses these; it does not duplicate them.
struct BlockWeights {
  Vec ln1_g, ln1_b;       // input layernorm
  Vec ln2_g, ln2_b;       // pre-FFN layernorm
  Mat wq, wk, wv, wo;     // [D x D]
  Mat ffn1;               // [F x D]
  Mat ffn2;               // [D x F]
};

struct BlockGrads {
  Vec ln1_g, ln1_b, ln2_g, ln2_b;
  Mat wq, wk, wv, wo, ffn1, ffn2;
};
BlockGrads zero_grads_like(const BlockWeights& w);

// Extra parameters a hyper attention block carries on top of its host block:
// the visual key-value projection and the adaptive gate.
struct HatbParams {
  Mat w_kv_img;            // [2D x D]; rows [0,D) produce keys, [D,2D) values
  Vec w_gate;              // [D]
  double gate_bias = 0.0;  // optional, 0 by default
  const BlockWeights* host = nullptr;
};

// Initializes w_kv_img as a copy of the host's stacked K and V projections
// and w_gate as zero (gate 0.5 at init).
HatbParams make_hatb_params(const BlockWeights& host);

struct HatbGrads {
  Mat w_kv_img;
  Vec w_gate;
  double gate_bias = 0.0;
};
HatbGrads zero_grads_like(const HatbParams& p);

// Everything the block consumes besides weights. Visual tensors are at patch
// granularity: patch m belongs to slot patch_slot[m] and carries that slot's
// rotary position in patch_positions[m].
struct AttentionInputs {
  Mat h_text;                       // [L x D]
  Mat h_img;                        // [M x D]
  std::vector<int> query_positions; // [L]
  std::vector<int> patch_positions; // [M]
  std::vector<int> patch_slot;      // [M]
  CrossAttentionMask mask;          // slot granularity [L x num_slots]
  int n_heads = 1;
};

// Expands a slot-level rope map and mask to patch granularity.
AttentionInputs make_attention_inputs(Mat h_text, Mat h_img,
                                      const RotaryPositionMap& rope,
                                      const CrossAttentionMask& mask,
                                      int patches_per_slot, int n_heads);

struct HatbOutput {
  Mat h_fused;   // fused stream before the residual add
  Mat h_self;    // self-attention branch output
  Mat h_cross;   // cross-attention branch output (zero rows where bypassed)
  Vec gate;      // per-token gate values
  std::vector<std::uint8_t> bypass;  // rows with no visible visual context
  Mat block_out; // full block output (post FFN residual)
};

struct LnCache {
  Vec mean, rstd;
};

struct BlockCache {
  Mat n_text;             // post input layernorm
  LnCache ln1;
  Mat q_rot, k_rot, v;    // self path, post-rotary q/k
  std::vector<Mat> p_self;  // per-head attention probabilities [L x L]
  Mat ctx_self;           // pre-O context
  Mat h_self;
  // Cross branch (hyper block only)
  bool has_cross = false;
  Mat n_img;
  LnCache ln1_img;
  Mat k_img_rot, v_img;
  std::vector<Mat> p_cross;  // per-head [L x M]
  Mat ctx_cross;
  Mat h_cross;
  Vec gate;
  std::vector<std::uint8_t> bypass;
  Mat x1;                 // post fuse/self residual
  LnCache ln2;
  Mat m_norm;             // post pre-FFN layernorm
  Mat ffn_pre;            // m_norm * ffn1^T
  Mat ffn_act;            // silu(ffn_pre)
};

// --- individual operations ---------------------------------------------

// Row layernorm; throws std::domain_error on a zero-variance row.
Mat layernorm_rows(const Mat& x, const Vec& gamma, const Vec& beta, LnCache* cache);
// dx for the given upstream grad; accumulates parameter grads.
Mat layernorm_backward(const Mat& x, const LnCache& cache, const Vec& gamma,
                       const Mat& dy, Vec& d_gamma, Vec& d_beta);

// Normalizes both streams with the host block's input layernorm.
std::pair<Mat, Mat> shared_layernorm(const Mat& h_text, const Mat& h_img,
                                     const Vec& ln_g, const Vec& ln_b,
                                     LnCache* cache_text = nullptr,
                                     LnCache* cache_img = nullptr);

// [K_img; V_img] = n_img * w_kv_img^T split into halves.
std::pair<Mat, Mat> project_visual_kv(const Mat& n_img, const Mat& w_kv_img);

// Pairwise rotary rotation, theta_j = pos * base^(-2j / head_dim).
// inverse=true applies the transpose rotation (used by the backward pass).
Mat apply_rotary(const Mat& x, const std::vector<int>& positions, int n_heads,
                 double base = kRotaryBase, bool inverse = false);

// Masked multi-head cross-attention over visual patches followed by the host
// output projection. q_rot must be the self-attention query, post-rotary.
// Rows with no visible patch are flagged in bypass and left zero.
Mat cross_attention(const Mat& q_rot, const Mat& k_img_rot, const Mat& v_img,
                    const std::vector<int>& patch_slot, const CrossAttentionMask& mask,
                    const Mat& wo, int n_heads,
                    std::vector<std::uint8_t>* bypass_out = nullptr,
                    std::vector<Mat>* probs_out = nullptr,
                    Mat* ctx_out = nullptr);

// Causal multi-head self-attention followed by the output projection.
Mat self_attention(const Mat& q_rot, const Mat& k_rot, const Mat& v, const Mat& wo,
                   int n_heads, std::vector<Mat>* probs_out = nullptr,
                   Mat* ctx_out = nullptr);

// Backward of per-head softmax(q k^T / sqrt(dh)) v given cached probability
// matrices; accumulates post-rotary dq/dk and dv. Rows whose probability row
// is all zero (masked-out or bypassed) contribute nothing.
void attention_core_backward(const std::vector<Mat>& probs, const Mat& q_rot,
                             const Mat& k_rot, const Mat& v, const Mat& d_ctx,
                             int n_heads, Mat& dq, Mat& dk, Mat& dv);

Vec adaptive_gate(const Mat& h_self, const Vec& w_gate, double gate_bias = 0.0);

Mat fuse(const Mat& h_cross, const Mat& h_self, const Vec& gate,
         const std::vector<std::uint8_t>& bypass);

// --- whole block ---------------------------------------------------------

// Standard decoder block forward; the hyper block's self path runs through
// the exact same code. Exposed in halves so fusion variants can slot a
// cross-attention unit between them.
Mat block_attn_forward(const Mat& x, const BlockWeights& w,
                       const std::vector<int>& positions, int n_heads,
                       BlockCache* cache);                     // returns x1
Mat block_ffn_forward(const Mat& x1, const BlockWeights& w, BlockCache* cache);
Mat block_ffn_backward(const BlockWeights& w, const BlockCache& cache,
                       const Mat& d_out, BlockGrads& g);       // returns d_x1
Mat block_attn_backward(const Mat& x, const BlockWeights& w,
                        const std::vector<int>& positions, int n_heads,
                        const BlockCache& cache, const Mat& d_x1, BlockGrads& g);

Mat standard_block_forward(const Mat& x, const BlockWeights& w,
                           const std::vector<int>& positions, int n_heads,
                           BlockCache* cache = nullptr);
Mat standard_block_backward(const Mat& x, const BlockWeights& w,
                            const std::vector<int>& positions, int n_heads,
                            const BlockCache& cache, const Mat& d_out,
                            BlockGrads& gw);

HatbOutput hatb_forward(const AttentionInputs& in, const HatbParams& params,
                        BlockCache* cache = nullptr);

// Returns d_h_text; accumulates parameter grads and d_h_img.
Mat hatb_backward(const AttentionInputs& in, const HatbParams& params,
                  const BlockCache& cache, const Mat& d_out, BlockGrads& g_host,
                  HatbGrads& g_hatb, Mat& d_h_img);

double sigmoid(double x);
double silu(double x);

}  // namespace hyperattn
