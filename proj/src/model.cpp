#include "hyperattn/model.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "json.hpp"
#include "hyperattn/tensorio.hpp"

namespace hyperattn {

using nlohmann::json;

Variant variant_from_string(const std::string& s) {
  if (s == "hyper") return Variant::hyper;
  if (s == "concat") return Variant::concat;
  if (s == "pre_cross") return Variant::pre_cross;
  if (s == "post_cross") return Variant::post_cross;
  if (s == "flamingo_dense") return Variant::flamingo_dense;
  throw std::invalid_argument("unknown variant '" + s + "'");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::hyper: return "hyper";
    case Variant::concat: return "concat";
    case Variant::pre_cross: return "pre_cross";
    case Variant::post_cross: return "post_cross";
    case Variant::flamingo_dense: return "flamingo_dense";
  }
  throw std::logic_error("bad variant");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v = {Variant::hyper, Variant::concat,
                                         Variant::pre_cross, Variant::post_cross,
                                         Variant::flamingo_dense};
  return v;
}

void ModelConfig::validate() const {
  if (hidden_dim <= 0 || n_heads <= 0 || hidden_dim % n_heads != 0)
    throw std::invalid_argument("config: hidden_dim must be a positive multiple of n_heads");
  if (head_dim() % 2 != 0)
    throw std::invalid_argument("config: head_dim must be even for rotary");
  if (n_layers <= 0) throw std::invalid_argument("config: n_layers must be positive");
  if (ffn_dim <= 0) throw std::invalid_argument("config: ffn_dim must be positive");
  if (vocab_size < 2) throw std::invalid_argument("config: vocab_size too small");
  if (patches_per_slot <= 0)
    throw std::invalid_argument("config: patches_per_slot must be positive");
  int prev = -1;
  for (int i : hatb_indices) {
    if (i < 0 || i >= n_layers)
      throw std::invalid_argument("config: hatb index out of [0, n_layers)");
    if (i <= prev) throw std::invalid_argument("config: hatb_indices must be strictly increasing");
    prev = i;
  }
}

std::vector<int> default_hatb_indices(int n_layers, int k) {
  if (k < 1 || k > n_layers)
    throw std::invalid_argument("default_hatb_indices: k out of [1, n_layers]");
  std::vector<int> idx(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i)
    idx[i] = static_cast<int>(static_cast<std::int64_t>(i) * n_layers / k);
  return idx;
}

ModelConfig config_from_json(const std::string& text) {
  json j = json::parse(text);
  ModelConfig cfg;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    if (key == "hidden_dim") cfg.hidden_dim = it.value().get<int>();
    else if (key == "n_heads") cfg.n_heads = it.value().get<int>();
    else if (key == "n_layers") cfg.n_layers = it.value().get<int>();
    else if (key == "head_dim") continue;  // derived; checked below
    else if (key == "ffn_dim") cfg.ffn_dim = it.value().get<int>();
    else if (key == "vocab_size") cfg.vocab_size = it.value().get<int>();
    else if (key == "patches_per_slot") cfg.patches_per_slot = it.value().get<int>();
    else if (key == "hatb_indices") cfg.hatb_indices = it.value().get<std::vector<int>>();
    else if (key == "variant") cfg.variant = variant_from_string(it.value().get<std::string>());
    else if (key == "seed") cfg.seed = it.value().get<std::uint64_t>();
    else throw std::invalid_argument("config: unknown field '" + key + "'");
  }
  if (j.contains("head_dim") && j["head_dim"].get<int>() != cfg.head_dim())
    throw std::invalid_argument("config: head_dim inconsistent with hidden_dim/n_heads");
  cfg.validate();
  return cfg;
}

std::string config_to_json(const ModelConfig& cfg) {
  json j;
  j["hidden_dim"] = cfg.hidden_dim;
  j["n_heads"] = cfg.n_heads;
  j["n_layers"] = cfg.n_layers;
  j["head_dim"] = cfg.head_dim();
  j["ffn_dim"] = cfg.ffn_dim;
  j["vocab_size"] = cfg.vocab_size;
  j["patches_per_slot"] = cfg.patches_per_slot;
  j["hatb_indices"] = cfg.hatb_indices;
  j["variant"] = variant_name(cfg.variant);
  j["seed"] = cfg.seed;
  return j.dump(1);
}

// --- cross-attention sub-layer (pre/post/flamingo variants) ----------------

CrossLayerGrads zero_grads_like(const CrossLayerParams& p) {
  CrossLayerGrads g;
  g.ln_q_g.assign(p.ln_q_g.size(), 0.0);
  g.ln_q_b.assign(p.ln_q_b.size(), 0.0);
  g.ln_kv_g.assign(p.ln_kv_g.size(), 0.0);
  g.ln_kv_b.assign(p.ln_kv_b.size(), 0.0);
  g.wq = Mat(p.wq.rows, p.wq.cols);
  g.w_kv = Mat(p.w_kv.rows, p.w_kv.cols);
  g.wo = Mat(p.wo.rows, p.wo.cols);
  g.w_gate.assign(p.w_gate.size(), 0.0);
  return g;
}

Mat cross_layer_forward(const Mat& x, const Mat& h_img, const CrossLayerParams& p,
                        const std::vector<int>& q_positions,
                        const std::vector<int>& patch_positions,
                        const std::vector<int>& patch_slot,
                        const CrossAttentionMask& mask, int n_heads,
                        CrossCache* cache) {
  LnCache ln_q, ln_kv;
  Mat n_q = layernorm_rows(x, p.ln_q_g, p.ln_q_b, &ln_q);
  Mat q = matmul_nt(n_q, p.wq);
  Mat q_rot = apply_rotary(q, q_positions, n_heads);
  Mat n_img = layernorm_rows(h_img, p.ln_kv_g, p.ln_kv_b, &ln_kv);
  auto [k_img, v_img] = project_visual_kv(n_img, p.w_kv);
  Mat k_rot = apply_rotary(k_img, patch_positions, n_heads);
  std::vector<std::uint8_t> bypass;
  std::vector<Mat> probs;
  Mat ctx;
  Mat h_cross = cross_attention(q_rot, k_rot, v_img, patch_slot, mask, p.wo,
                                n_heads, &bypass, cache ? &probs : nullptr,
                                cache ? &ctx : nullptr);
  Vec gate = adaptive_gate(x, p.w_gate);
  Mat out = x;
  for (int t = 0; t < x.rows; ++t) {
    if (bypass[t]) continue;  // no visible patch: sub-layer is a no-op
    double g = gate[t];
    double* ot = out.row(t);
    const double* hc = h_cross.row(t);
    for (int j = 0; j < x.cols; ++j) ot[j] += g * hc[j];
  }
  if (cache) {
    cache->x = x;
    cache->h_img_in = h_img;
    cache->ln_q = std::move(ln_q);
    cache->ln_kv = std::move(ln_kv);
    cache->n_q = std::move(n_q);
    cache->n_img = std::move(n_img);
    cache->q_rot = std::move(q_rot);
    cache->k_img_rot = std::move(k_rot);
    cache->v_img = std::move(v_img);
    cache->probs = std::move(probs);
    cache->ctx = std::move(ctx);
    cache->h_cross = std::move(h_cross);
    cache->gate = std::move(gate);
    cache->bypass = std::move(bypass);
  }
  return out;
}

Mat cross_layer_backward(const CrossLayerParams& p, const CrossCache& cache,
                         int n_heads, const std::vector<int>& q_positions,
                         const std::vector<int>& patch_positions,
                         const Mat& d_out, CrossLayerGrads& g, Mat& d_h_img) {
  int l = cache.x.rows, d = cache.x.cols, m = cache.n_img.rows;
  Mat dx = d_out;
  Mat dh_c(l, d);
  for (int t = 0; t < l; ++t) {
    if (cache.bypass[t]) continue;
    double gt = cache.gate[t];
    const double* dot_ = d_out.row(t);
    const double* hc = cache.h_cross.row(t);
    double* dhc = dh_c.row(t);
    double dg = 0.0;
    for (int j = 0; j < d; ++j) {
      dhc[j] = dot_[j] * gt;
      dg += dot_[j] * hc[j];
    }
    double dz = dg * gt * (1.0 - gt);
    const double* xt = cache.x.row(t);
    double* dxt = dx.row(t);
    for (int j = 0; j < d; ++j) {
      g.w_gate[j] += dz * xt[j];
      dxt[j] += dz * p.w_gate[j];
    }
  }
  Mat d_ctx = matmul(dh_c, p.wo);
  add_inplace(g.wo, matmul_tn(dh_c, cache.ctx));
  Mat dq_rot(l, d), dk_rot(m, d), dv(m, d);
  attention_core_backward(cache.probs, cache.q_rot, cache.k_img_rot, cache.v_img,
                          d_ctx, n_heads, dq_rot, dk_rot, dv);
  Mat dq = apply_rotary(dq_rot, q_positions, n_heads, kRotaryBase, true);
  Mat dk_img = apply_rotary(dk_rot, patch_positions, n_heads, kRotaryBase, true);
  add_inplace(g.wq, matmul_tn(dq, cache.n_q));
  Mat d_n_q = matmul(dq, p.wq);
  Mat d_kv(m, 2 * d);
  for (int i = 0; i < m; ++i) {
    std::memcpy(d_kv.row(i), dk_img.row(i), sizeof(double) * d);
    std::memcpy(d_kv.row(i) + d, dv.row(i), sizeof(double) * d);
  }
  add_inplace(g.w_kv, matmul_tn(d_kv, cache.n_img));
  Mat d_n_img = matmul(d_kv, p.w_kv);
  add_inplace(dx, layernorm_backward(cache.x, cache.ln_q, p.ln_q_g, d_n_q,
                                     g.ln_q_g, g.ln_q_b));
  Mat d_img_ln = layernorm_backward(cache.h_img_in, cache.ln_kv, p.ln_kv_g,
                                    d_n_img, g.ln_kv_g, g.ln_kv_b);
  if (d_h_img.rows == 0) d_h_img = Mat(m, d);
  add_inplace(d_h_img, d_img_ln);
  return dx;
}

// --- model assembly --------------------------------------------------------

int Model::fusion_index(int layer) const {
  for (std::size_t i = 0; i < fusion_layers.size(); ++i)
    if (fusion_layers[i] == layer) return static_cast<int>(i);
  return -1;
}

void Model::rebind_hosts() {
  for (std::size_t i = 0; i < hatb.size(); ++i)
    hatb[i].host = &blocks[static_cast<std::size_t>(fusion_layers[i])];
}

static Mat random_mat(int r, int c, double scale, Rng& rng) {
  Mat m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m.d[i] = rng.normal() * scale;
  return m;
}

Model build_model(const ModelConfig& cfg) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  int d = cfg.hidden_dim, f = cfg.ffn_dim, v = cfg.vocab_size;
  double s = 1.0 / std::sqrt(static_cast<double>(d));
  Rng rng(mix64(cfg.seed, 0x6d6f64656cull));  // "model"
  m.embedding = random_mat(v, d, 0.1, rng);
  m.w_head = random_mat(v, d, s, rng);
  m.w_vis = random_mat(d, d, s, rng);
  m.ln_f_g.assign(static_cast<std::size_t>(d), 1.0);
  m.ln_f_b.assign(static_cast<std::size_t>(d), 0.0);
  m.blocks.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& b : m.blocks) {
    b.ln1_g.assign(static_cast<std::size_t>(d), 1.0);
    b.ln1_b.assign(static_cast<std::size_t>(d), 0.0);
    b.ln2_g.assign(static_cast<std::size_t>(d), 1.0);
    b.ln2_b.assign(static_cast<std::size_t>(d), 0.0);
    b.wq = random_mat(d, d, s, rng);
    b.wk = random_mat(d, d, s, rng);
    b.wv = random_mat(d, d, s, rng);
    b.wo = random_mat(d, d, s, rng);
    b.ffn1 = random_mat(f, d, s, rng);
    b.ffn2 = random_mat(d, f, 1.0 / std::sqrt(static_cast<double>(f)), rng);
  }
  switch (cfg.variant) {
    case Variant::concat:
      break;  // no fusion units
    case Variant::hyper:
      m.fusion_layers = cfg.hatb_indices;
      for (int layer : m.fusion_layers)
        m.hatb.push_back(make_hatb_params(m.blocks[static_cast<std::size_t>(layer)]));
      break;
    case Variant::pre_cross:
    case Variant::post_cross:
    case Variant::flamingo_dense: {
      if (cfg.variant == Variant::flamingo_dense) {
        m.fusion_layers.resize(static_cast<std::size_t>(cfg.n_layers));
        for (int i = 0; i < cfg.n_layers; ++i) m.fusion_layers[i] = i;
      } else {
        m.fusion_layers = cfg.hatb_indices;
      }
      for (std::size_t i = 0; i < m.fusion_layers.size(); ++i) {
        CrossLayerParams p;
        p.ln_q_g.assign(static_cast<std::size_t>(d), 1.0);
        p.ln_q_b.assign(static_cast<std::size_t>(d), 0.0);
        p.ln_kv_g.assign(static_cast<std::size_t>(d), 1.0);
        p.ln_kv_b.assign(static_cast<std::size_t>(d), 0.0);
        p.wq = random_mat(d, d, s, rng);
        p.w_kv = random_mat(2 * d, d, s, rng);
        p.wo = random_mat(d, d, s, rng);
        p.w_gate.assign(static_cast<std::size_t>(d), 0.0);
        m.cross.push_back(std::move(p));
      }
      break;
    }
  }
  m.rebind_hosts();
  return m;
}

ParamCounts count_params(const Model& m) {
  const ModelConfig& c = m.cfg;
  std::int64_t d = c.hidden_dim, f = c.ffn_dim, v = c.vocab_size;
  ParamCounts pc;
  pc.base = v * d            // embedding
            + v * d          // output head
            + d * d          // vision projection
            + 2 * d          // final layernorm
            + c.n_layers * (4 * d + 4 * d * d + 2 * d * f);
  std::int64_t k = static_cast<std::int64_t>(m.fusion_layers.size());
  switch (c.variant) {
    case Variant::concat: pc.added_by_fusion = 0; break;
    case Variant::hyper: pc.added_by_fusion = k * (2 * d * d + d); break;
    default: pc.added_by_fusion = k * (4 * d * d + 5 * d); break;
  }
  return pc;
}

// --- vision stub -------------------------------------------------------------

ImageId make_descriptor_id(int shape, int color) {
  if (shape < 0 || shape > 255 || color < 0 || color > 255)
    throw std::invalid_argument("descriptor codes must fit a byte");
  return kDescriptorFlag | (static_cast<ImageId>(shape) << 8) |
         static_cast<ImageId>(color);
}
bool is_descriptor_id(ImageId id) { return (id & kDescriptorFlag) != 0; }
int descriptor_shape(ImageId id) { return static_cast<int>((id >> 8) & 0xff); }
int descriptor_color(ImageId id) { return static_cast<int>(id & 0xff); }

Mat encode_images_stub(const std::vector<ImageId>& image_ids, int patches_per_slot,
                       int hidden_dim, std::uint64_t seed) {
  int n = static_cast<int>(image_ids.size());
  Mat feats(n * patches_per_slot, hidden_dim);
  for (int i = 0; i < n; ++i) {
    ImageId id = image_ids[static_cast<std::size_t>(i)];
    for (int p = 0; p < patches_per_slot; ++p) {
      double* row = feats.row(i * patches_per_slot + p);
      for (int j = 0; j < hidden_dim; ++j)
        row[j] = hash_to_unit(
            mix64(id, (static_cast<std::uint64_t>(p) << 32) | static_cast<std::uint32_t>(j),
                  seed));
      if (is_descriptor_id(id)) {
        // expose the ground-truth descriptor where a probe can read it
        row[0] = static_cast<double>(descriptor_shape(id));
        row[1] = static_cast<double>(descriptor_color(id));
      }
    }
  }
  return feats;
}

// --- forward ----------------------------------------------------------------

static void expand_patches(const RotaryPositionMap& rope, int v,
                           std::vector<int>& patch_positions,
                           std::vector<int>& patch_slot) {
  int n_slots = static_cast<int>(rope.visual_key_positions.size());
  patch_positions.assign(static_cast<std::size_t>(n_slots) * v, 0);
  patch_slot.assign(static_cast<std::size_t>(n_slots) * v, 0);
  for (int s = 0; s < n_slots; ++s)
    for (int p = 0; p < v; ++p) {
      patch_positions[static_cast<std::size_t>(s) * v + p] =
          rope.visual_key_positions[static_cast<std::size_t>(s)];
      patch_slot[static_cast<std::size_t>(s) * v + p] = s;
    }
}

ModelOutput model_forward(const Model& m, const InterleavedSequence& seq,
                          const Mat& raw_feats, ModelCache* cache) {
  const ModelConfig& cfg = m.cfg;
  int d = cfg.hidden_dim, v = cfg.patches_per_slot;
  int l = seq.length(), n_slots = seq.num_slots();
  validate_sequence(seq);
  if (n_slots > 0 && (raw_feats.rows != n_slots * v || raw_feats.cols != d))
    throw std::invalid_argument("model_forward: feature/slot mismatch");
  for (TokenId t : seq.tokens)
    if (t < 0 || t >= cfg.vocab_size)
      throw std::invalid_argument("model_forward: token id out of vocabulary");

  Mat proj = n_slots > 0 ? matmul_nt(raw_feats, m.w_vis) : Mat(0, d);
  RotaryPositionMap rope = build_rope_map(seq);
  CrossAttentionMask mask = build_cross_mask(seq);
  std::vector<int> patch_positions, patch_slot;
  expand_patches(rope, v, patch_positions, patch_slot);

  // embed; concat splices projected patches right after their placeholder
  Mat x;
  std::vector<int> text_rows(static_cast<std::size_t>(l));
  if (cfg.variant == Variant::concat) {
    int rows = l + n_slots * v;
    x = Mat(rows, d);
    int cur = 0;
    for (int t = 0; t < l; ++t) {
      std::memcpy(x.row(cur), m.embedding.row(seq.tokens[static_cast<std::size_t>(t)]),
                  sizeof(double) * d);
      text_rows[static_cast<std::size_t>(t)] = cur++;
      for (int s = 0; s < n_slots; ++s) {
        if (seq.image_slots[static_cast<std::size_t>(s)].placeholder_position != t)
          continue;
        for (int p = 0; p < v; ++p)
          std::memcpy(x.row(cur++), proj.row(s * v + p), sizeof(double) * d);
      }
    }
  } else {
    x = Mat(l, d);
    for (int t = 0; t < l; ++t) {
      std::memcpy(x.row(t), m.embedding.row(seq.tokens[static_cast<std::size_t>(t)]),
                  sizeof(double) * d);
      text_rows[static_cast<std::size_t>(t)] = t;
    }
  }
  std::vector<int> positions(static_cast<std::size_t>(x.rows));
  for (int i = 0; i < x.rows; ++i) positions[static_cast<std::size_t>(i)] = i;

  if (cache) {
    cache->raw_feats = raw_feats;
    cache->proj = proj;
    cache->emb = x;
    cache->text_rows = text_rows;
    cache->positions = positions;
    cache->patch_positions = patch_positions;
    cache->patch_slot = patch_slot;
    cache->mask = mask;
    cache->layers.assign(static_cast<std::size_t>(cfg.n_layers), LayerCache());
  }

  AttentionInputs in;  // reused across hyper layers
  if (cfg.variant == Variant::hyper) {
    in.h_img = proj;
    in.query_positions = positions;
    in.patch_positions = patch_positions;
    in.patch_slot = patch_slot;
    in.mask = mask;
    in.n_heads = cfg.n_heads;
  }

  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    LayerCache* lc = cache ? &cache->layers[static_cast<std::size_t>(layer)] : nullptr;
    if (lc) lc->x_in = x;
    int fi = m.fusion_index(layer);
    switch (cfg.variant) {
      case Variant::concat:
        x = standard_block_forward(x, m.blocks[static_cast<std::size_t>(layer)],
                                   positions, cfg.n_heads, lc ? &lc->block : nullptr);
        break;
      case Variant::hyper:
        if (fi >= 0) {
          in.h_text = x;
          HatbOutput out = hatb_forward(in, m.hatb[static_cast<std::size_t>(fi)],
                                        lc ? &lc->block : nullptr);
          x = std::move(out.block_out);
        } else {
          x = standard_block_forward(x, m.blocks[static_cast<std::size_t>(layer)],
                                     positions, cfg.n_heads, lc ? &lc->block : nullptr);
        }
        break;
      case Variant::pre_cross:
      case Variant::flamingo_dense:
        if (fi >= 0) {
          Mat xm = cross_layer_forward(x, proj, m.cross[static_cast<std::size_t>(fi)],
                                       positions, patch_positions, patch_slot, mask,
                                       cfg.n_heads, lc ? &lc->cross : nullptr);
          if (lc) {
            lc->has_cross = true;
            lc->x_mid = xm;
          }
          x = standard_block_forward(xm, m.blocks[static_cast<std::size_t>(layer)],
                                     positions, cfg.n_heads, lc ? &lc->block : nullptr);
        } else {
          x = standard_block_forward(x, m.blocks[static_cast<std::size_t>(layer)],
                                     positions, cfg.n_heads, lc ? &lc->block : nullptr);
        }
        break;
      case Variant::post_cross: {
        Mat x1 = block_attn_forward(x, m.blocks[static_cast<std::size_t>(layer)],
                                    positions, cfg.n_heads, lc ? &lc->block : nullptr);
        if (fi >= 0) {
          x1 = cross_layer_forward(x1, proj, m.cross[static_cast<std::size_t>(fi)],
                                   positions, patch_positions, patch_slot, mask,
                                   cfg.n_heads, lc ? &lc->cross : nullptr);
          if (lc) lc->has_cross = true;
        }
        x = block_ffn_forward(x1, m.blocks[static_cast<std::size_t>(layer)],
                              lc ? &lc->block : nullptr);
        break;
      }
    }
  }

  ModelOutput out;
  out.hidden = x;
  LnCache ln_f;
  Mat h_norm = layernorm_rows(x, m.ln_f_g, m.ln_f_b, &ln_f);
  out.logits = matmul_nt(h_norm, m.w_head);
  out.text_rows = text_rows;
  if (cache) {
    cache->h_last = std::move(x);
    cache->ln_f = std::move(ln_f);
    cache->h_norm = std::move(h_norm);
    cache->logits = out.logits;
  }
  return out;
}

// --- loss and backward --------------------------------------------------------

ModelGrads zero_grads_like(const Model& m) {
  ModelGrads g;
  g.embedding = Mat(m.embedding.rows, m.embedding.cols);
  g.w_head = Mat(m.w_head.rows, m.w_head.cols);
  g.w_vis = Mat(m.w_vis.rows, m.w_vis.cols);
  g.ln_f_g.assign(m.ln_f_g.size(), 0.0);
  g.ln_f_b.assign(m.ln_f_b.size(), 0.0);
  for (const auto& b : m.blocks) g.blocks.push_back(zero_grads_like(b));
  for (const auto& h : m.hatb) g.hatb.push_back(zero_grads_like(h));
  for (const auto& c : m.cross) g.cross.push_back(zero_grads_like(c));
  return g;
}

static double ce_from_logits(const Mat& logits, const std::vector<int>& text_rows,
                             const std::vector<int>& targets, Mat* d_logits) {
  int vocab = logits.cols;
  if (targets.size() != text_rows.size())
    throw std::invalid_argument("loss: targets length != text length");
  if (d_logits) *d_logits = Mat(logits.rows, logits.cols);
  int n_sup = 0;
  for (int t : targets)
    if (t >= 0) ++n_sup;
  if (n_sup == 0) throw std::invalid_argument("loss: no supervised positions");
  double loss = 0.0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    int target = targets[t];
    if (target < 0) continue;
    if (target >= vocab) throw std::invalid_argument("loss: target out of vocabulary");
    int r = text_rows[t];
    const double* lr = logits.row(r);
    double mx = lr[0];
    for (int j = 1; j < vocab; ++j)
      if (lr[j] > mx) mx = lr[j];
    double z = 0.0;
    for (int j = 0; j < vocab; ++j) z += std::exp(lr[j] - mx);
    double logz = std::log(z) + mx;
    loss += logz - lr[target];
    if (d_logits) {
      double* dl = d_logits->row(r);
      for (int j = 0; j < vocab; ++j)
        dl[j] += std::exp(lr[j] - logz) / n_sup;
      dl[target] -= 1.0 / n_sup;
    }
  }
  return loss / n_sup;
}

double model_loss(const Model& m, const Batch& batch, ModelCache* cache,
                  ModelOutput* out_p) {
  ModelOutput out = model_forward(m, batch.seq, batch.raw_feats, cache);
  double loss = ce_from_logits(out.logits, out.text_rows, batch.targets, nullptr);
  if (out_p) *out_p = std::move(out);
  return loss;
}

double model_loss_and_grads(const Model& m, const Batch& batch, ModelGrads& g) {
  const ModelConfig& cfg = m.cfg;
  int d = cfg.hidden_dim;
  ModelCache c;
  ModelOutput out = model_forward(m, batch.seq, batch.raw_feats, &c);
  Mat d_logits;
  double loss = ce_from_logits(out.logits, out.text_rows, batch.targets, &d_logits);

  add_inplace(g.w_head, matmul_tn(d_logits, c.h_norm));
  Mat d_h_norm = matmul(d_logits, m.w_head);
  Mat dx = layernorm_backward(c.h_last, c.ln_f, m.ln_f_g, d_h_norm, g.ln_f_g, g.ln_f_b);

  Mat d_proj(c.proj.rows, c.proj.cols);
  AttentionInputs in;
  if (cfg.variant == Variant::hyper) {
    in.h_img = c.proj;
    in.query_positions = c.positions;
    in.patch_positions = c.patch_positions;
    in.patch_slot = c.patch_slot;
    in.mask = c.mask;
    in.n_heads = cfg.n_heads;
  }

  for (int layer = cfg.n_layers - 1; layer >= 0; --layer) {
    LayerCache& lc = c.layers[static_cast<std::size_t>(layer)];
    const BlockWeights& bw = m.blocks[static_cast<std::size_t>(layer)];
    BlockGrads& bg = g.blocks[static_cast<std::size_t>(layer)];
    int fi = m.fusion_index(layer);
    switch (cfg.variant) {
      case Variant::concat:
        dx = standard_block_backward(lc.x_in, bw, c.positions, cfg.n_heads, lc.block,
                                     dx, bg);
        break;
      case Variant::hyper:
        if (fi >= 0) {
          in.h_text = lc.x_in;
          dx = hatb_backward(in, m.hatb[static_cast<std::size_t>(fi)], lc.block, dx,
                             bg, g.hatb[static_cast<std::size_t>(fi)], d_proj);
        } else {
          dx = standard_block_backward(lc.x_in, bw, c.positions, cfg.n_heads,
                                       lc.block, dx, bg);
        }
        break;
      case Variant::pre_cross:
      case Variant::flamingo_dense:
        if (fi >= 0) {
          Mat d_mid = standard_block_backward(lc.x_mid, bw, c.positions, cfg.n_heads,
                                              lc.block, dx, bg);
          dx = cross_layer_backward(m.cross[static_cast<std::size_t>(fi)], lc.cross,
                                    cfg.n_heads, c.positions, c.patch_positions,
                                    d_mid, g.cross[static_cast<std::size_t>(fi)],
                                    d_proj);
        } else {
          dx = standard_block_backward(lc.x_in, bw, c.positions, cfg.n_heads,
                                       lc.block, dx, bg);
        }
        break;
      case Variant::post_cross: {
        Mat d_x1 = block_ffn_backward(bw, lc.block, dx, bg);
        if (fi >= 0)
          d_x1 = cross_layer_backward(m.cross[static_cast<std::size_t>(fi)], lc.cross,
                                      cfg.n_heads, c.positions, c.patch_positions,
                                      d_x1, g.cross[static_cast<std::size_t>(fi)],
                                      d_proj);
        dx = block_attn_backward(lc.x_in, bw, c.positions, cfg.n_heads, lc.block,
                                 d_x1, bg);
        break;
      }
    }
  }

  // scatter embedding rows; concat additionally routes patch rows to d_proj
  int l = batch.seq.length(), v = cfg.patches_per_slot, n_slots = batch.seq.num_slots();
  for (int t = 0; t < l; ++t) {
    int r = c.text_rows[static_cast<std::size_t>(t)];
    double* ge = g.embedding.row(batch.seq.tokens[static_cast<std::size_t>(t)]);
    const double* dr = dx.row(r);
    for (int j = 0; j < d; ++j) ge[j] += dr[j];
  }
  if (cfg.variant == Variant::concat && n_slots > 0) {
    for (int s = 0; s < n_slots; ++s) {
      int ph = batch.seq.image_slots[static_cast<std::size_t>(s)].placeholder_position;
      int base = c.text_rows[static_cast<std::size_t>(ph)] + 1;
      // patches of slots sharing a placeholder are laid out in slot order
      for (int s2 = 0; s2 < s; ++s2)
        if (batch.seq.image_slots[static_cast<std::size_t>(s2)].placeholder_position == ph)
          base += v;
      for (int p = 0; p < v; ++p) {
        double* gp = d_proj.row(s * v + p);
        const double* dr = dx.row(base + p);
        for (int j = 0; j < d; ++j) gp[j] += dr[j];
      }
    }
  }
  if (n_slots > 0) add_inplace(g.w_vis, matmul_tn(d_proj, c.raw_feats));
  return loss;
}

// --- parameter traversal, updates, persistence -------------------------------

void for_each_param(Model& m, const ParamVisitor& fn) {
  fn("embedding", m.embedding.d.data(), m.embedding.size());
  fn("w_vis", m.w_vis.d.data(), m.w_vis.size());
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    BlockWeights& b = m.blocks[i];
    std::string p = "block" + std::to_string(i) + ".";
    fn(p + "ln1_g", b.ln1_g.data(), b.ln1_g.size());
    fn(p + "ln1_b", b.ln1_b.data(), b.ln1_b.size());
    fn(p + "ln2_g", b.ln2_g.data(), b.ln2_g.size());
    fn(p + "ln2_b", b.ln2_b.data(), b.ln2_b.size());
    fn(p + "wq", b.wq.d.data(), b.wq.size());
    fn(p + "wk", b.wk.d.data(), b.wk.size());
    fn(p + "wv", b.wv.d.data(), b.wv.size());
    fn(p + "wo", b.wo.d.data(), b.wo.size());
    fn(p + "ffn1", b.ffn1.d.data(), b.ffn1.size());
    fn(p + "ffn2", b.ffn2.d.data(), b.ffn2.size());
  }
  for (std::size_t i = 0; i < m.hatb.size(); ++i) {
    std::string p = "hatb@" + std::to_string(i) + ".";
    fn(p + "w_kv_img", m.hatb[i].w_kv_img.d.data(), m.hatb[i].w_kv_img.size());
    fn(p + "w_gate", m.hatb[i].w_gate.data(), m.hatb[i].w_gate.size());
  }
  for (std::size_t i = 0; i < m.cross.size(); ++i) {
    CrossLayerParams& cp = m.cross[i];
    std::string p = "cross@" + std::to_string(i) + ".";
    fn(p + "ln_q_g", cp.ln_q_g.data(), cp.ln_q_g.size());
    fn(p + "ln_q_b", cp.ln_q_b.data(), cp.ln_q_b.size());
    fn(p + "ln_kv_g", cp.ln_kv_g.data(), cp.ln_kv_g.size());
    fn(p + "ln_kv_b", cp.ln_kv_b.data(), cp.ln_kv_b.size());
    fn(p + "wq", cp.wq.d.data(), cp.wq.size());
    fn(p + "w_kv", cp.w_kv.d.data(), cp.w_kv.size());
    fn(p + "wo", cp.wo.d.data(), cp.wo.size());
    fn(p + "w_gate", cp.w_gate.data(), cp.w_gate.size());
  }
  fn("ln_f_g", m.ln_f_g.data(), m.ln_f_g.size());
  fn("ln_f_b", m.ln_f_b.data(), m.ln_f_b.size());
  fn("w_head", m.w_head.d.data(), m.w_head.size());
}

void for_each_grad(ModelGrads& g, const ParamVisitor& fn) {
  fn("embedding", g.embedding.d.data(), g.embedding.size());
  fn("w_vis", g.w_vis.d.data(), g.w_vis.size());
  for (std::size_t i = 0; i < g.blocks.size(); ++i) {
    BlockGrads& b = g.blocks[i];
    std::string p = "block" + std::to_string(i) + ".";
    fn(p + "ln1_g", b.ln1_g.data(), b.ln1_g.size());
    fn(p + "ln1_b", b.ln1_b.data(), b.ln1_b.size());
    fn(p + "ln2_g", b.ln2_g.data(), b.ln2_g.size());
    fn(p + "ln2_b", b.ln2_b.data(), b.ln2_b.size());
    fn(p + "wq", b.wq.d.data(), b.wq.size());
    fn(p + "wk", b.wk.d.data(), b.wk.size());
    fn(p + "wv", b.wv.d.data(), b.wv.size());
    fn(p + "wo", b.wo.d.data(), b.wo.size());
    fn(p + "ffn1", b.ffn1.d.data(), b.ffn1.size());
    fn(p + "ffn2", b.ffn2.d.data(), b.ffn2.size());
  }
  for (std::size_t i = 0; i < g.hatb.size(); ++i) {
    std::string p = "hatb@" + std::to_string(i) + ".";
    fn(p + "w_kv_img", g.hatb[i].w_kv_img.d.data(), g.hatb[i].w_kv_img.size());
    fn(p + "w_gate", g.hatb[i].w_gate.data(), g.hatb[i].w_gate.size());
  }
  for (std::size_t i = 0; i < g.cross.size(); ++i) {
    CrossLayerGrads& cp = g.cross[i];
    std::string p = "cross@" + std::to_string(i) + ".";
    fn(p + "ln_q_g", cp.ln_q_g.data(), cp.ln_q_g.size());
    fn(p + "ln_q_b", cp.ln_q_b.data(), cp.ln_q_b.size());
    fn(p + "ln_kv_g", cp.ln_kv_g.data(), cp.ln_kv_g.size());
    fn(p + "ln_kv_b", cp.ln_kv_b.data(), cp.ln_kv_b.size());
    fn(p + "wq", cp.wq.d.data(), cp.wq.size());
    fn(p + "w_kv", cp.w_kv.d.data(), cp.w_kv.size());
    fn(p + "wo", cp.wo.d.data(), cp.wo.size());
    fn(p + "w_gate", cp.w_gate.data(), cp.w_gate.size());
  }
  fn("ln_f_g", g.ln_f_g.data(), g.ln_f_g.size());
  fn("ln_f_b", g.ln_f_b.data(), g.ln_f_b.size());
  fn("w_head", g.w_head.d.data(), g.w_head.size());
}

double overfit_step(Model& m, const Batch& batch, double lr) {
  ModelGrads g = zero_grads_like(m);
  double loss = model_loss_and_grads(m, batch, g);
  if (!std::isfinite(loss)) throw std::runtime_error("overfit_step: non-finite loss");
  std::vector<std::pair<double*, std::size_t>> params, grads;
  for_each_param(m, [&](const std::string&, double* p, std::size_t n) {
    params.emplace_back(p, n);
  });
  for_each_grad(g, [&](const std::string&, double* p, std::size_t n) {
    grads.emplace_back(p, n);
  });
  if (params.size() != grads.size())
    throw std::logic_error("overfit_step: parameter/grad traversal mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].second != grads[i].second)
      throw std::logic_error("overfit_step: parameter/grad size mismatch");
    for (std::size_t j = 0; j < params[i].second; ++j)
      params[i].first[j] -= lr * grads[i].first[j];
  }
  return loss;
}

void save_weights(const Model& m, const std::string& path) {
  TensorFile tf;
  for_each_param(const_cast<Model&>(m),
                 [&](const std::string& name, double* p, std::size_t n) {
                   Mat flat(1, static_cast<int>(n));
                   std::memcpy(flat.d.data(), p, n * sizeof(double));
                   tf.tensors[name] = std::move(flat);
                 });
  write_tensor_file(path, tf);
}

void load_weights(Model& m, const std::string& path) {
  TensorFile tf = read_tensor_file(path);
  std::size_t seen = 0;
  for_each_param(m, [&](const std::string& name, double* p, std::size_t n) {
    const Mat& flat = tf.get(name);
    if (flat.size() != n)
      throw std::invalid_argument("load_weights: size mismatch for '" + name + "'");
    std::memcpy(p, flat.d.data(), n * sizeof(double));
    ++seen;
  });
  if (seen != tf.tensors.size())
    throw std::invalid_argument("load_weights: file contains extra tensors");
}

}  // namespace hyperattn
