#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hyperattn/hatb.hpp"
#include "hyperattn/model.hpp"

// Brute-force scalar references used to certify the main path. Everything in
// here is straight-line triple-loop code over element accessors and shares no
// matmul/attention/layernorm code with the hyperattn namespace proper.
namespace hyperattn::oracle {

Mat ref_linear(const Mat& x, const Mat& w);  // x * w^T
Mat ref_layernorm(const Mat& x, const Vec& gamma, const Vec& beta);
Mat ref_rotary(const Mat& x, const std::vector<int>& positions, int n_heads,
               double base = kRotaryBase);

// Pre-projection attention context. visible is [q.rows x k.rows] row-major at
// patch granularity; rows with no visible key come back all zero.
Mat ref_attention(const Mat& q_rot, const Mat& k_rot, const Mat& v,
                  const std::vector<std::uint8_t>& visible, int n_heads);

// Applies its own rotary to raw q/k, then masked softmax attention.
Mat dense_attention_reference(const Mat& q, const Mat& k, const Mat& v,
                              const std::vector<int>& positions_q,
                              const std::vector<int>& positions_k,
                              const std::vector<std::uint8_t>& visible,
                              int n_heads);

struct HatbRef {
  Mat h_self, h_cross, h_fused, block_out;
  Vec gate;
  std::vector<std::uint8_t> bypass;
};
HatbRef hatb_reference(const AttentionInputs& in, const HatbParams& params);

Mat block_reference(const Mat& x, const BlockWeights& w,
                    const std::vector<int>& positions, int n_heads);

// Straight-line composed evaluation of the hyper-variant model.
struct ModelRef {
  Mat hidden, logits;
};
ModelRef model_reference(const Model& m, const InterleavedSequence& seq,
                         const Mat& raw_feats);

// Central differences (f(p+eps) - f(p-eps)) / 2eps coordinate by coordinate;
// the span is restored afterwards. Throws on non-finite f.
std::vector<double> finite_diff_grad(const std::function<double()>& f, double* p,
                                     std::size_t n, double eps = 1e-5);

struct ComparisonReport {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double tolerance = 0.0;
  bool pass = true;
  std::string to_json() const;
};

// rel err per element = |a - b| / max(|b|, rel_floor); pass iff
// max_rel_err <= tol (closed boundary). b is the reference.
ComparisonReport compare(const std::map<std::string, Mat>& a,
                         const std::map<std::string, Mat>& b, double tol,
                         double rel_floor = 1e-8);

// Gradient comparison: denominator max(|analytic|, |numeric|, floor). The
// coarser 1e-4 floor absorbs finite-difference roundoff (~1e-9 absolute) on
// near-zero gradient coordinates.
ComparisonReport grad_compare(const std::map<std::string, Mat>& analytic,
                              const std::map<std::string, Mat>& numeric,
                              double tol = 1e-4, double floor = 1e-4);

}  // namespace hyperattn::oracle
