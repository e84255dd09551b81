#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hyperattn/hatb.hpp"
#include "hyperattn/interleave.hpp"
#include "hyperattn/mat.hpp"

namespace hyperattn {

enum class Variant { hyper, concat, pre_cross, post_cross, flamingo_dense };

Variant variant_from_string(const std::string& s);
std::string variant_name(Variant v);
const std::vector<Variant>& all_variants();

struct ModelConfig {
  int hidden_dim = 64;
  int n_heads = 4;
  int n_layers = 8;
  int ffn_dim = 256;
  int vocab_size = 512;
  int patches_per_slot = 16;
  std::vector<int> hatb_indices = {0, 2, 4, 6};
  Variant variant = Variant::hyper;
  std::uint64_t seed = 0;

  int head_dim() const { return hidden_dim / n_heads; }
  TokenId placeholder_id() const { return vocab_size - 1; }
  void validate() const;
};

// indices[i] = floor(i * n_layers / k); always starts at layer 0.
std::vector<int> default_hatb_indices(int n_layers, int k);

ModelConfig config_from_json(const std::string& text);
std::string config_to_json(const ModelConfig& cfg);

// Gated cross-attention sub-layer used by the pre_cross / post_cross /
// flamingo_dense variants: out = x + gate(x) .* CrossAttn(LN_q(x), LN_kv(img)).
struct CrossLayerParams {
  Vec ln_q_g, ln_q_b;
  Vec ln_kv_g, ln_kv_b;
  Mat wq;      // [D x D]
  Mat w_kv;    // [2D x D]
  Mat wo;      // [D x D]
  Vec w_gate;  // [D]
};

struct CrossLayerGrads {
  Vec ln_q_g, ln_q_b, ln_kv_g, ln_kv_b;
  Mat wq, w_kv, wo;
  Vec w_gate;
};
CrossLayerGrads zero_grads_like(const CrossLayerParams& p);

struct CrossCache {
  Mat x;
  Mat h_img_in;
  LnCache ln_q, ln_kv;
  Mat n_q, n_img;
  Mat q_rot, k_img_rot, v_img;
  std::vector<Mat> probs;
  Mat ctx;
  Mat h_cross;
  Vec gate;
  std::vector<std::uint8_t> bypass;
};

Mat cross_layer_forward(const Mat& x, const Mat& h_img, const CrossLayerParams& p,
                        const std::vector<int>& q_positions,
                        const std::vector<int>& patch_positions,
                        const std::vector<int>& patch_slot,
                        const CrossAttentionMask& mask, int n_heads,
                        CrossCache* cache);
Mat cross_layer_backward(const CrossLayerParams& p, const CrossCache& cache,
                         int n_heads, const std::vector<int>& q_positions,
                         const std::vector<int>& patch_positions,
                         const Mat& d_out, CrossLayerGrads& g, Mat& d_h_img);

struct Model {
  ModelConfig cfg;
  Mat embedding;                      // [vocab x D]
  Mat w_head;                         // [vocab x D]
  Mat w_vis;                          // [D x D] vision projection
  Vec ln_f_g, ln_f_b;
  std::vector<BlockWeights> blocks;   // n_layers
  std::vector<int> fusion_layers;     // layers carrying a fusion unit
  std::vector<HatbParams> hatb;       // hyper: one per fusion layer
  std::vector<CrossLayerParams> cross;  // pre/post/flamingo: one per fusion layer

  // -1 if the layer has no fusion unit, else index into hatb/cross.
  int fusion_index(int layer) const;
  // HatbParams hold a pointer to their host block; call after any move/copy.
  void rebind_hosts();
};

Model build_model(const ModelConfig& cfg);

struct ParamCounts {
  std::int64_t base = 0;
  std::int64_t added_by_fusion = 0;
  std::int64_t total() const { return base + added_by_fusion; }
};
ParamCounts count_params(const Model& m);

// Deterministic stand-in for the frozen vision encoder. Emits D-dim features
// per patch keyed by (image_id, patch_index, seed). Descriptor ids (bit 62
// set) carry their shape and color codes verbatim in coordinates 0 and 1 so
// a probing oracle can recover them.
constexpr ImageId kDescriptorFlag = 1ull << 62;
ImageId make_descriptor_id(int shape, int color);
bool is_descriptor_id(ImageId id);
int descriptor_shape(ImageId id);
int descriptor_color(ImageId id);

Mat encode_images_stub(const std::vector<ImageId>& image_ids, int patches_per_slot,
                       int hidden_dim, std::uint64_t seed);

struct ModelOutput {
  Mat hidden;                  // final layer output, pre final layernorm
  Mat logits;
  std::vector<int> text_rows;  // row of each text token (identity unless concat)
};

struct LayerCache {
  Mat x_in;
  BlockCache block;
  bool has_cross = false;
  CrossCache cross;
  Mat x_mid;  // pre_cross: input after the cross unit; post_cross: x1 before it
};

struct ModelCache {
  Mat raw_feats;
  Mat proj;
  Mat emb;
  std::vector<int> text_rows;
  std::vector<int> positions;
  std::vector<int> patch_positions;
  std::vector<int> patch_slot;
  CrossAttentionMask mask;
  std::vector<LayerCache> layers;
  Mat h_last;
  LnCache ln_f;
  Mat h_norm;
  Mat logits;
};

// raw_feats rows = num_slots * patches_per_slot, in slot order; pass an empty
// Mat for a text-only sequence.
ModelOutput model_forward(const Model& m, const InterleavedSequence& seq,
                          const Mat& raw_feats, ModelCache* cache = nullptr);

struct ModelGrads {
  Mat embedding, w_head, w_vis;
  Vec ln_f_g, ln_f_b;
  std::vector<BlockGrads> blocks;
  std::vector<HatbGrads> hatb;
  std::vector<CrossLayerGrads> cross;
};
ModelGrads zero_grads_like(const Model& m);

struct Batch {
  InterleavedSequence seq;
  Mat raw_feats;
  std::vector<int> targets;  // per text token; -1 = unsupervised
};

double model_loss(const Model& m, const Batch& batch, ModelCache* cache = nullptr,
                  ModelOutput* out = nullptr);
double model_loss_and_grads(const Model& m, const Batch& batch, ModelGrads& g);

// One full-batch gradient-descent step; returns the pre-step loss.
// Throws std::runtime_error on a non-finite loss.
double overfit_step(Model& m, const Batch& batch, double lr);

// Visits every trainable tensor in a fixed order shared with grads_view.
using ParamVisitor = std::function<void(const std::string&, double*, std::size_t)>;
void for_each_param(Model& m, const ParamVisitor& fn);
void for_each_grad(ModelGrads& g, const ParamVisitor& fn);

void save_weights(const Model& m, const std::string& path);
void load_weights(Model& m, const std::string& path);

}  // namespace hyperattn
