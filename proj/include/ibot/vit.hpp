#pragma once

// Vision Transformer backbone: patch embedding, [CLS] token, learnable
// positional embeddings, mask-token substitution, pre-norm blocks, and
// attention extraction.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ibot/image.hpp"
#include "ibot/tensor.hpp"

namespace ibot {

struct ViTConfig {
  std::size_t image_size = 32;  // square, pixels
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;
  std::size_t in_channels = 3;

  std::size_t grid_side() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid_side() * grid_side(); }
  std::size_t patch_dim() const { return patch_size * patch_size * in_channels; }
  std::size_t mlp_hidden() const { return static_cast<std::size_t>(embed_dim * mlp_ratio); }

  void validate() const {
    if (image_size % patch_size != 0)
      throw std::invalid_argument("ViTConfig: image_size " + std::to_string(image_size) +
                                  " not divisible by patch_size " + std::to_string(patch_size));
    if (embed_dim % heads != 0)
      throw std::invalid_argument("ViTConfig: embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                                  std::to_string(heads));
  }
};

// the paper-scale reference point (224/16) scaled to the desk
inline ViTConfig vit_micro() { return ViTConfig{}; }

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor;
  bool no_decay;  // biases, norms, tokens are excluded from weight decay
};

template <typename T>
struct BackboneParams {
  ViTConfig cfg;

  Tensor<T> patch_w, patch_b;      // (P^2*C, D), (D)
  Tensor<T> cls_token, mask_token;  // (D)
  Tensor<T> pos_embed;              // (1+N, D)
  struct Block {
    Tensor<T> ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
    Tensor<T> ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };
  std::vector<Block> blocks;
  Tensor<T> ln_f_g, ln_f_b;

  static BackboneParams init(const ViTConfig& cfg, Rng& rng) {
    cfg.validate();
    BackboneParams p;
    p.cfg = cfg;
    const T std02 = T(0.02);
    std::size_t D = cfg.embed_dim, H = cfg.mlp_hidden();
    p.patch_w = Tensor<T>::trunc_normal({cfg.patch_dim(), D}, rng, std02, true);
    p.patch_b = Tensor<T>::zeros({D}, true);
    p.cls_token = Tensor<T>::trunc_normal({D}, rng, std02, true);
    p.mask_token = Tensor<T>::trunc_normal({D}, rng, std02, true);
    p.pos_embed = Tensor<T>::trunc_normal({cfg.num_patches() + 1, D}, rng, std02, true);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      typename BackboneParams::Block b;
      b.ln1_g = Tensor<T>::full({D}, T(1), true);
      b.ln1_b = Tensor<T>::zeros({D}, true);
      b.qkv_w = Tensor<T>::trunc_normal({D, 3 * D}, rng, std02, true);
      b.qkv_b = Tensor<T>::zeros({3 * D}, true);
      b.proj_w = Tensor<T>::trunc_normal({D, D}, rng, std02, true);
      b.proj_b = Tensor<T>::zeros({D}, true);
      b.ln2_g = Tensor<T>::full({D}, T(1), true);
      b.ln2_b = Tensor<T>::zeros({D}, true);
      b.fc1_w = Tensor<T>::trunc_normal({D, H}, rng, std02, true);
      b.fc1_b = Tensor<T>::zeros({H}, true);
      b.fc2_w = Tensor<T>::trunc_normal({H, D}, rng, std02, true);
      b.fc2_b = Tensor<T>::zeros({D}, true);
      p.blocks.push_back(std::move(b));
    }
    p.ln_f_g = Tensor<T>::full({D}, T(1), true);
    p.ln_f_b = Tensor<T>::zeros({D}, true);
    return p;
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> v;
    v.push_back({"patch.w", &patch_w, false});
    v.push_back({"patch.b", &patch_b, true});
    v.push_back({"cls_token", &cls_token, true});
    v.push_back({"mask_token", &mask_token, true});
    v.push_back({"pos_embed", &pos_embed, true});
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      auto& b = blocks[l];
      std::string pre = "block" + std::to_string(l) + ".";
      v.push_back({pre + "ln1.g", &b.ln1_g, true});
      v.push_back({pre + "ln1.b", &b.ln1_b, true});
      v.push_back({pre + "qkv.w", &b.qkv_w, false});
      v.push_back({pre + "qkv.b", &b.qkv_b, true});
      v.push_back({pre + "proj.w", &b.proj_w, false});
      v.push_back({pre + "proj.b", &b.proj_b, true});
      v.push_back({pre + "ln2.g", &b.ln2_g, true});
      v.push_back({pre + "ln2.b", &b.ln2_b, true});
      v.push_back({pre + "fc1.w", &b.fc1_w, false});
      v.push_back({pre + "fc1.b", &b.fc1_b, true});
      v.push_back({pre + "fc2.w", &b.fc2_w, false});
      v.push_back({pre + "fc2.b", &b.fc2_b, true});
    }
    v.push_back({"ln_f.g", &ln_f_g, true});
    v.push_back({"ln_f.b", &ln_f_b, true});
    return v;
  }
};

// ---------------------------------------------------------------------------
// patchify
// ---------------------------------------------------------------------------

// Row-major non-overlapping patches, each flattened (y, x, channel)-major.
template <typename T>
Tensor<T> patchify(const Image& im, const ViTConfig& cfg) {
  if (im.h != cfg.image_size || im.w != cfg.image_size || im.c != cfg.in_channels)
    throw std::invalid_argument("patchify: image " + std::to_string(im.h) + "x" + std::to_string(im.w) + "x" +
                                std::to_string(im.c) + " does not match config " + std::to_string(cfg.image_size) +
                                "x" + std::to_string(cfg.image_size) + "x" + std::to_string(cfg.in_channels));
  std::size_t g = cfg.grid_side(), P = cfg.patch_size, C = cfg.in_channels;
  std::vector<T> out(cfg.num_patches() * cfg.patch_dim());
  std::size_t k = 0;
  for (std::size_t py = 0; py < g; ++py)
    for (std::size_t px = 0; px < g; ++px)
      for (std::size_t y = 0; y < P; ++y)
        for (std::size_t x = 0; x < P; ++x)
          for (std::size_t ch = 0; ch < C; ++ch) out[k++] = static_cast<T>(im.at(py * P + y, px * P + x, ch));
  return Tensor<T>::from({cfg.num_patches(), cfg.patch_dim()}, std::move(out));
}

template <typename T>
Tensor<T> patchify_batch(const std::vector<Image>& ims, const ViTConfig& cfg) {
  std::vector<T> out;
  out.reserve(ims.size() * cfg.num_patches() * cfg.patch_dim());
  for (const auto& im : ims) {
    auto p = patchify<T>(im, cfg);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return Tensor<T>::from({ims.size(), cfg.num_patches(), cfg.patch_dim()}, std::move(out));
}

// inverse of patchify, for the losslessness check
template <typename T>
Image unpatchify(const Tensor<T>& patches, const ViTConfig& cfg) {
  std::size_t g = cfg.grid_side(), P = cfg.patch_size, C = cfg.in_channels;
  Image im(cfg.image_size, cfg.image_size, C);
  const auto& v = patches.data();
  std::size_t k = 0;
  for (std::size_t py = 0; py < g; ++py)
    for (std::size_t px = 0; px < g; ++px)
      for (std::size_t y = 0; y < P; ++y)
        for (std::size_t x = 0; x < P; ++x)
          for (std::size_t ch = 0; ch < C; ++ch) im.at(py * P + y, px * P + x, ch) = static_cast<float>(v[k++]);
  return im;
}

// ---------------------------------------------------------------------------
// positional embedding interpolation (bilinear over the patch grid)
// ---------------------------------------------------------------------------

// Returns a (1 + new_side^2, D) embedding; the CLS row is copied untouched.
template <typename T>
Tensor<T> interpolate_pos_embed(const Tensor<T>& pos_embed, std::size_t base_side, std::size_t new_side) {
  if (new_side < 1) throw std::invalid_argument("interpolate_pos_embed: new_grid_side must be >= 1");
  if (new_side == base_side) return pos_embed;
  std::size_t nb = base_side * base_side, nn = new_side * new_side;
  // constant interpolation matrix (nn, nb); gradient flows through matmul
  std::vector<T> M(nn * nb, T(0));
  for (std::size_t oy = 0; oy < new_side; ++oy)
    for (std::size_t ox = 0; ox < new_side; ++ox) {
      double fy = new_side > 1 ? static_cast<double>(oy) * (base_side - 1) / (new_side - 1)
                               : static_cast<double>(base_side - 1) / 2;
      double fx = new_side > 1 ? static_cast<double>(ox) * (base_side - 1) / (new_side - 1)
                               : static_cast<double>(base_side - 1) / 2;
      std::size_t y0 = static_cast<std::size_t>(fy);
      std::size_t x0 = static_cast<std::size_t>(fx);
      std::size_t y1 = y0 + 1 < base_side ? y0 + 1 : y0;
      std::size_t x1 = x0 + 1 < base_side ? x0 + 1 : x0;
      double wy = fy - y0, wx = fx - x0;
      std::size_t row = oy * new_side + ox;
      M[row * nb + y0 * base_side + x0] += static_cast<T>((1 - wy) * (1 - wx));
      M[row * nb + y0 * base_side + x1] += static_cast<T>((1 - wy) * wx);
      M[row * nb + y1 * base_side + x0] += static_cast<T>(wy * (1 - wx));
      M[row * nb + y1 * base_side + x1] += static_cast<T>(wy * wx);
    }
  auto Mt = Tensor<T>::from({nn, nb}, std::move(M));
  auto cls_row = slice(pos_embed, 0, 0, 1);
  auto grid = slice(pos_embed, 0, 1, nb);
  return concat<T>({cls_row, matmul(Mt, grid)}, 0);
}

// ---------------------------------------------------------------------------
// token embedding with mask substitution
// ---------------------------------------------------------------------------

// x_i := (1 - m_i) * embed(patch_i) + m_i * e_mask, then CLS prepended and
// positional embeddings added. masks is B*N row-major, empty means no mask.
template <typename T>
Tensor<T> embed_with_mask(const Tensor<T>& patches, const std::vector<std::uint8_t>& masks, BackboneParams<T>& p,
                          std::size_t grid_side_override = 0) {
  std::size_t B = patches.dim(0), N = patches.dim(1);
  if (!masks.empty() && masks.size() != B * N)
    throw std::invalid_argument("embed_with_mask: mask length " + std::to_string(masks.size()) +
                                " does not match token count " + std::to_string(B * N));
  std::size_t D = p.cfg.embed_dim;
  auto x = add(matmul(patches, p.patch_w), p.patch_b);  // (B,N,D)
  if (!masks.empty()) {
    bool any = false;
    std::vector<T> mv(B * N), inv(B * N);
    for (std::size_t i = 0; i < masks.size(); ++i) {
      mv[i] = masks[i] ? T(1) : T(0);
      inv[i] = masks[i] ? T(0) : T(1);
      any = any || masks[i];
    }
    if (any) {
      auto m = Tensor<T>::from({B, N, 1}, std::move(mv));
      auto im = Tensor<T>::from({B, N, 1}, std::move(inv));
      x = add(mul(x, im), mul(m, reshape(p.mask_token, {1, 1, D})));
    }
  }
  auto cls = add(Tensor<T>::zeros({B, 1, D}), reshape(p.cls_token, {1, 1, D}));
  auto seq = concat<T>({cls, x}, 1);
  std::size_t side = grid_side_override ? grid_side_override : p.cfg.grid_side();
  if (side * side != N) throw std::invalid_argument("embed_with_mask: token count does not match grid side");
  auto pos = interpolate_pos_embed(p.pos_embed, p.cfg.grid_side(), side);
  return add(seq, reshape(pos, {1, N + 1, D}));
}

// ---------------------------------------------------------------------------
// transformer forward
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardResult {
  Tensor<T> cls;             // (B, D), after the final layer norm
  Tensor<T> patches;         // (B, N, D), after the final layer norm
  Tensor<T> patches_pre_ln;  // (B, N, D), before the final layer norm
  std::vector<Tensor<T>> attention;  // per block (B, Hn, S, S) when captured
};

template <typename T>
void check_finite(const Tensor<T>& t, const std::string& where) {
  for (const T& v : t.data())
    if (!std::isfinite(v)) throw std::runtime_error("non-finite activation in " + where);
}

template <typename T>
ForwardResult<T> vit_forward(const Tensor<T>& seq, BackboneParams<T>& p, bool capture_attention = false) {
  std::size_t B = seq.dim(0), S = seq.dim(1), D = p.cfg.embed_dim;
  std::size_t Hn = p.cfg.heads, dh = D / Hn;
  ForwardResult<T> res;
  Tensor<T> h = seq;
  const T scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh)));
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    auto& b = p.blocks[l];
    auto x = layer_norm(h, b.ln1_g, b.ln1_b);
    auto qkv = add(matmul(x, b.qkv_w), b.qkv_b);            // (B,S,3D)
    auto q = reshape(slice(qkv, 2, 0, D), {B, S, Hn, dh});
    auto k = reshape(slice(qkv, 2, D, D), {B, S, Hn, dh});
    auto v = reshape(slice(qkv, 2, 2 * D, D), {B, S, Hn, dh});
    q = transpose(q, {0, 2, 1, 3});  // (B,Hn,S,dh)
    k = transpose(k, {0, 2, 3, 1});  // (B,Hn,dh,S)
    v = transpose(v, {0, 2, 1, 3});
    auto att = softmax_last(mul_scalar(matmul(q, k), scale));  // (B,Hn,S,S)
    if (capture_attention) res.attention.push_back(att);
    auto ctx = reshape(transpose(matmul(att, v), {0, 2, 1, 3}), {B, S, D});
    h = add(h, add(matmul(ctx, b.proj_w), b.proj_b));
    auto x2 = layer_norm(h, b.ln2_g, b.ln2_b);
    auto m = add(matmul(gelu(add(matmul(x2, b.fc1_w), b.fc1_b)), b.fc2_w), b.fc2_b);
    h = add(h, m);
    check_finite(h, "block " + std::to_string(l));
  }
  res.patches_pre_ln = slice(h, 1, 1, S - 1);
  auto out = layer_norm(h, p.ln_f_g, p.ln_f_b);
  res.cls = reshape(slice(out, 1, 0, 1), {B, D});
  res.patches = slice(out, 1, 1, S - 1);
  return res;
}

// ---------------------------------------------------------------------------
// attention extraction
// ---------------------------------------------------------------------------

// Post-softmax attention row for the chosen query, restricted to patch keys
// and renormalized. Default query is CLS (index 0).
template <typename T>
std::vector<T> attention_map(const Image& im, BackboneParams<T>& p, std::size_t layer, std::size_t head,
                             std::size_t query = 0) {
  if (layer >= p.blocks.size())
    throw std::invalid_argument("attention_map: layer " + std::to_string(layer) + " out of range");
  if (head >= p.cfg.heads) throw std::invalid_argument("attention_map: head " + std::to_string(head) + " out of range");
  auto patches = patchify_batch<T>({im}, p.cfg);
  auto seq = embed_with_mask(patches, {}, p);
  auto res = vit_forward(seq, p, true);
  const auto& att = res.attention[layer];  // (1,Hn,S,S)
  std::size_t S = att.dim(2), N = S - 1;
  std::vector<T> row(N);
  T sum = 0;
  for (std::size_t j = 0; j < N; ++j) {
    row[j] = att[(head * S + query) * S + (j + 1)];
    sum += row[j];
  }
  for (auto& r : row) r /= sum;
  return row;
}

// Mean-over-heads last-layer CLS attention over patch keys, renormalized.
// This is the saliency ranking shared by the part-wise probe and the
// occlusion modes.
template <typename T>
std::vector<T> cls_attention_saliency(const Tensor<T>& att_last, std::size_t batch_index) {
  std::size_t Hn = att_last.dim(1), S = att_last.dim(2), N = S - 1;
  std::vector<T> row(N, T(0));
  for (std::size_t hd = 0; hd < Hn; ++hd)
    for (std::size_t j = 0; j < N; ++j) row[j] += att_last[((batch_index * Hn + hd) * S + 0) * S + (j + 1)];
  T sum = 0;
  for (auto& r : row) sum += r;
  for (auto& r : row) r /= sum;
  return row;
}

}  // namespace ibot
