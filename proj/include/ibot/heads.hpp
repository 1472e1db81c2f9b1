#pragma once

// Projection heads, the centered/sharpened cross-entropy H, the [CLS] and
// masked-patch distillation losses, center maintenance, and fixed-tokenizer
// baselines.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "ibot/tensor.hpp"
#include "ibot/vit.hpp"

namespace ibot {

// ---------------------------------------------------------------------------
// projection head: 3-layer MLP, l2-normalized bottleneck, weight-normalized
// final linear to K outputs
// ---------------------------------------------------------------------------

struct HeadConfig {
  std::size_t in_dim = 64;
  std::size_t hidden_dim = 256;
  std::size_t bottleneck_dim = 64;
  std::size_t out_dim = 1024;  // K; 8192 at full scale
  bool shared = true;          // h_cls and h_patch reference the same storage
};

template <typename T>
struct ProjectionHead {
  HeadConfig cfg;
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b, fc3_w, fc3_b;
  Tensor<T> last_v;  // (K, bottleneck), row-normalized direction
  Tensor<T> last_g;  // (K) magnitudes of the weight-normalized layer

  static ProjectionHead init(const HeadConfig& cfg, Rng& rng) {
    ProjectionHead h;
    h.cfg = cfg;
    const T std02 = T(0.02);
    h.fc1_w = Tensor<T>::trunc_normal({cfg.in_dim, cfg.hidden_dim}, rng, std02, true);
    h.fc1_b = Tensor<T>::zeros({cfg.hidden_dim}, true);
    h.fc2_w = Tensor<T>::trunc_normal({cfg.hidden_dim, cfg.hidden_dim}, rng, std02, true);
    h.fc2_b = Tensor<T>::zeros({cfg.hidden_dim}, true);
    h.fc3_w = Tensor<T>::trunc_normal({cfg.hidden_dim, cfg.bottleneck_dim}, rng, std02, true);
    h.fc3_b = Tensor<T>::zeros({cfg.bottleneck_dim}, true);
    h.last_v = Tensor<T>::trunc_normal({cfg.out_dim, cfg.bottleneck_dim}, rng, std02, true);
    h.last_g = Tensor<T>::full({cfg.out_dim}, T(1), true);
    return h;
  }

  std::vector<ParamRef<T>> params(const std::string& prefix) {
    return {
        {prefix + "fc1.w", &fc1_w, false}, {prefix + "fc1.b", &fc1_b, true},
        {prefix + "fc2.w", &fc2_w, false}, {prefix + "fc2.b", &fc2_b, true},
        {prefix + "fc3.w", &fc3_w, false}, {prefix + "fc3.b", &fc3_b, true},
        {prefix + "last.v", &last_v, false}, {prefix + "last.g", &last_g, true},
    };
  }
};

// Batched projection of D-features to K logits. freeze_magnitude detaches the
// weight-norm magnitudes (used during the first epoch).
template <typename T>
Tensor<T> project(const Tensor<T>& features, ProjectionHead<T>& head, bool freeze_magnitude = false) {
  if (features.dim(features.rank() - 1) != head.cfg.in_dim)
    throw std::invalid_argument("project: feature dim " + std::to_string(features.dim(features.rank() - 1)) +
                                " does not match head input dim " + std::to_string(head.cfg.in_dim));
  auto h1 = gelu(add(matmul(features, head.fc1_w), head.fc1_b));
  auto h2 = gelu(add(matmul(h1, head.fc2_w), head.fc2_b));
  auto z = l2_normalize_last(add(matmul(h2, head.fc3_w), head.fc3_b));
  auto vhat = l2_normalize_last(head.last_v);  // row-wise unit directions
  auto logits = matmul(z, transpose(vhat, {1, 0}));
  auto g = freeze_magnitude ? head.last_g.detach() : head.last_g;
  return mul(logits, g);
}

// ---------------------------------------------------------------------------
// distillation state
// ---------------------------------------------------------------------------

template <typename T>
struct DistillState {
  Tensor<T> center_cls;    // C,  (K)
  Tensor<T> center_patch;  // C', (K)
  double temp_cls_student = 0.1;
  double temp_patch_student = 0.1;
  double temp_cls_teacher_start = 0.04, temp_cls_teacher_end = 0.07;
  double temp_patch_teacher_start = 0.04, temp_patch_teacher_end = 0.07;
  std::size_t teacher_temp_warmup_epochs = 30;
  double center_momentum_cls = 0.9;    // m
  double center_momentum_patch = 0.9;  // m'
  bool centering = true;               // sharpen-only ablation when false

  static DistillState init(std::size_t out_dim) {
    DistillState s;
    s.center_cls = Tensor<T>::zeros({out_dim});
    s.center_patch = Tensor<T>::zeros({out_dim});
    return s;
  }

  double teacher_temp(double start, double end, double epoch) const {
    if (teacher_temp_warmup_epochs == 0 || epoch >= static_cast<double>(teacher_temp_warmup_epochs)) return end;
    return start + (end - start) * epoch / static_cast<double>(teacher_temp_warmup_epochs);
  }
  double teacher_temp_cls(double epoch) const { return teacher_temp(temp_cls_teacher_start, temp_cls_teacher_end, epoch); }
  double teacher_temp_patch(double epoch) const {
    return teacher_temp(temp_patch_teacher_start, temp_patch_teacher_end, epoch);
  }
};

// ---------------------------------------------------------------------------
// the centered/sharpened cross-entropy H
// ---------------------------------------------------------------------------

// H(s, t, c, tau_s, tau_t) = -sum softmax((t - c)/tau_t) * log softmax(s/tau_s)
// over the last axis. No gradient flows into t or c (stop-gradient).
// Returns one loss per leading item.
template <typename T>
Tensor<T> distill_ce(const Tensor<T>& s_logits, const Tensor<T>& t_logits, const Tensor<T>& center, double tau_s,
                     double tau_t) {
  if (tau_s <= 0 || tau_t <= 0) throw std::invalid_argument("distill_ce: temperatures must be positive");
  std::size_t K = s_logits.dim(s_logits.rank() - 1);
  if (t_logits.dim(t_logits.rank() - 1) != K || (center.numel() != 0 && center.numel() != K))
    shape_error("distill_ce", s_logits.shape(), t_logits.shape());
  auto t = t_logits.detach();
  Tensor<T> sharpened;
  if (center.numel() != 0) {
    sharpened = mul_scalar(sub(t, center.detach()), T(1.0 / tau_t));
  } else {
    sharpened = mul_scalar(t, T(1.0 / tau_t));
  }
  auto teacher = softmax_last(sharpened);
  auto s_log = log_softmax_last(mul_scalar(s_logits, T(1.0 / tau_s)));
  std::size_t last = s_logits.rank() - 1;
  return neg(sum_axes(mul(teacher, s_log), {last}));
}

// entropy of the sharpened teacher distribution; the floor of distill_ce
template <typename T>
Tensor<T> sharpened_teacher_entropy(const Tensor<T>& t_logits, const Tensor<T>& center, double tau_t) {
  Tensor<T> shifted = center.numel() ? sub(t_logits.detach(), center.detach()) : t_logits.detach();
  auto p = softmax_last(mul_scalar(shifted, T(1.0 / tau_t)));
  std::size_t last = t_logits.rank() - 1;
  return neg(sum_axes(mul(p, log_softmax_last(mul_scalar(shifted, T(1.0 / tau_t)))), {last}));
}

// ---------------------------------------------------------------------------
// [CLS] self-distillation loss
// ---------------------------------------------------------------------------

// Symmetrized cross-view loss. Student views: the (masked) global views plus
// any local views; teacher views: the non-masked global views. Pairs exclude
// matching global indices, and the result is averaged over pairs and batch.
template <typename T>
Tensor<T> loss_cls(const std::vector<Tensor<T>>& student_global_cls, const std::vector<Tensor<T>>& student_local_cls,
                   const std::vector<Tensor<T>>& teacher_global_cls, const DistillState<T>& state, double epoch) {
  if (teacher_global_cls.size() < 2)
    throw std::invalid_argument("loss_cls: need at least 2 global teacher views in multi-crop mode");
  double tau_t = state.teacher_temp_cls(epoch);
  const Tensor<T> empty_center = Tensor<T>::zeros({0});
  const Tensor<T>& c = state.centering ? state.center_cls : empty_center;
  Tensor<T> acc;
  std::size_t pairs = 0;
  auto add_pair = [&](const Tensor<T>& s, const Tensor<T>& t) {
    auto term = mean_all(distill_ce(s, t, c, state.temp_cls_student, tau_t));
    acc = pairs == 0 ? term : add(acc, term);
    ++pairs;
  };
  for (std::size_t i = 0; i < student_global_cls.size(); ++i)
    for (std::size_t j = 0; j < teacher_global_cls.size(); ++j)
      if (i != j) add_pair(student_global_cls[i], teacher_global_cls[j]);
  for (const auto& l : student_local_cls)
    for (const auto& t : teacher_global_cls) add_pair(l, t);
  return mul_scalar(acc, T(1.0 / pairs));
}

// ---------------------------------------------------------------------------
// masked-patch distillation loss
// ---------------------------------------------------------------------------

// Per image: sum_i m_i H(s_i, t_i; C', tau'_s, tau'_t) / sum_i m_i, defined 0
// for an empty mask; averaged over the batch, then over the views.
template <typename T>
Tensor<T> loss_mim(const std::vector<Tensor<T>>& student_patch_logits,
                   const std::vector<Tensor<T>>& teacher_patch_logits,
                   const std::vector<std::vector<std::uint8_t>>& masks, const DistillState<T>& state, double epoch) {
  if (student_patch_logits.size() != teacher_patch_logits.size() || student_patch_logits.size() != masks.size())
    throw std::invalid_argument("loss_mim: view counts differ");
  double tau_t = state.teacher_temp_patch(epoch);
  const Tensor<T> empty_center = Tensor<T>::zeros({0});
  const Tensor<T>& c = state.centering ? state.center_patch : empty_center;
  Tensor<T> acc;
  for (std::size_t v = 0; v < student_patch_logits.size(); ++v) {
    const auto& s = student_patch_logits[v];
    const auto& t = teacher_patch_logits[v];
    if (s.shape() != t.shape()) shape_error("loss_mim", s.shape(), t.shape());
    std::size_t B = s.dim(0), N = s.dim(1);
    if (masks[v].size() != B * N)
      throw std::invalid_argument("loss_mim: mask length " + std::to_string(masks[v].size()) +
                                  " does not match token count " + std::to_string(B * N));
    auto h = distill_ce(s, t, c, state.temp_patch_student, tau_t);  // (B,N)
    std::vector<T> mv(B * N);
    std::vector<T> wv(B);
    for (std::size_t b = 0; b < B; ++b) {
      std::size_t cnt = 0;
      for (std::size_t i = 0; i < N; ++i) {
        mv[b * N + i] = masks[v][b * N + i] ? T(1) : T(0);
        cnt += masks[v][b * N + i];
      }
      wv[b] = cnt ? T(1) / static_cast<T>(cnt) : T(0);  // empty mask contributes exactly 0
    }
    auto m = Tensor<T>::from({B, N}, std::move(mv));
    auto w = Tensor<T>::from({B}, std::move(wv));
    auto per_image = mul(sum_axes(mul(h, m), {1}), w);  // (B)
    auto view_loss = mean_all(per_image);
    acc = v == 0 ? view_loss : add(acc, view_loss);
  }
  return mul_scalar(acc, T(1.0 / student_patch_logits.size()));
}

// Hard-label variant: masked-position cross-entropy against one-hot targets
// (fixed tokenizers and the argmax-target ablation).
template <typename T>
Tensor<T> loss_mim_fixed_tokenizer(const std::vector<Tensor<T>>& student_patch_logits,
                                   const std::vector<std::vector<std::size_t>>& token_ids,
                                   const std::vector<std::vector<std::uint8_t>>& masks, double tau_s) {
  if (student_patch_logits.size() != token_ids.size() || student_patch_logits.size() != masks.size())
    throw std::invalid_argument("loss_mim_fixed_tokenizer: view counts differ");
  Tensor<T> acc;
  for (std::size_t v = 0; v < student_patch_logits.size(); ++v) {
    const auto& s = student_patch_logits[v];
    std::size_t B = s.dim(0), N = s.dim(1), K = s.dim(2);
    if (token_ids[v].size() != B * N || masks[v].size() != B * N)
      throw std::invalid_argument("loss_mim_fixed_tokenizer: ids/mask length mismatch");
    for (auto id : token_ids[v])
      if (id >= K)
        throw std::invalid_argument("loss_mim_fixed_tokenizer: token id " + std::to_string(id) +
                                    " out of range [0," + std::to_string(K) + ")");
    auto s_log = log_softmax_last(mul_scalar(s, T(1.0 / tau_s)));  // (B,N,K)
    std::vector<T> pick(B * N * K, T(0));
    for (std::size_t i = 0; i < B * N; ++i)
      if (masks[v][i]) pick[i * K + token_ids[v][i]] = T(1);
    auto sel = Tensor<T>::from({B, N, K}, std::move(pick));
    auto h = neg(sum_axes(mul(s_log, sel), {2}));  // (B,N), zero where unmasked
    std::vector<T> wv(B);
    for (std::size_t b = 0; b < B; ++b) {
      std::size_t cnt = 0;
      for (std::size_t i = 0; i < N; ++i) cnt += masks[v][b * N + i];
      wv[b] = cnt ? T(1) / static_cast<T>(cnt) : T(0);
    }
    auto w = Tensor<T>::from({B}, std::move(wv));
    auto view_loss = mean_all(mul(sum_axes(h, {1}), w));
    acc = v == 0 ? view_loss : add(acc, view_loss);
  }
  return mul_scalar(acc, T(1.0 / student_patch_logits.size()));
}

// ---------------------------------------------------------------------------
// center maintenance
// ---------------------------------------------------------------------------

// C  <- m  C  + (1-m ) mean over (views x batch)            of teacher CLS logits
// C' <- m' C' + (1-m') mean over (views x batch x position) of teacher patch logits
// Pure: returns the updated state.
template <typename T>
DistillState<T> update_centers(const DistillState<T>& state, const std::vector<Tensor<T>>& teacher_cls_logits,
                               const std::vector<Tensor<T>>& teacher_patch_logits) {
  if (teacher_cls_logits.empty()) throw std::invalid_argument("update_centers: empty batch");
  DistillState<T> out = state;
  std::size_t K = state.center_cls.numel();

  std::vector<double> mean_cls(K, 0.0);
  std::size_t rows = 0;
  for (const auto& v : teacher_cls_logits) {
    std::size_t B = v.dim(0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k) mean_cls[k] += v[b * K + k];
    rows += B;
  }
  out.center_cls = Tensor<T>::zeros({K});
  for (std::size_t k = 0; k < K; ++k)
    out.center_cls[k] = static_cast<T>(state.center_momentum_cls * state.center_cls[k] +
                                       (1 - state.center_momentum_cls) * mean_cls[k] / rows);

  if (teacher_patch_logits.empty()) return out;  // patch path inactive this step
  std::vector<double> mean_patch(K, 0.0);
  std::size_t cells = 0;
  for (const auto& v : teacher_patch_logits) {
    std::size_t BN = v.dim(0) * v.dim(1);
    for (std::size_t i = 0; i < BN; ++i)
      for (std::size_t k = 0; k < K; ++k) mean_patch[k] += v[i * K + k];
    cells += BN;
  }
  out.center_patch = Tensor<T>::zeros({K});
  for (std::size_t k = 0; k < K; ++k)
    out.center_patch[k] = static_cast<T>(state.center_momentum_patch * state.center_patch[k] +
                                         (1 - state.center_momentum_patch) * mean_patch[k] / cells);
  return out;
}

// ---------------------------------------------------------------------------
// fixed tokenizers
// ---------------------------------------------------------------------------

// 3-bit mean color per channel; R is the most significant digit.
// id in [0, 8^channels).
inline std::size_t mean_color_token(const std::vector<float>& patch_pixels, std::size_t channels) {
  std::size_t n = patch_pixels.size() / channels;
  std::size_t id = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += patch_pixels[i * channels + c];
    mean /= static_cast<double>(n);
    auto q = static_cast<std::size_t>(std::min(7.0, std::floor(mean * 8.0)));
    id = id * 8 + q;
  }
  return id;
}

// Lloyd iterations on flattened vectors. Assignment breaks ties toward the
// lowest centroid id. Returns centroids and the per-iteration objective
// (sum of squared distances), which is non-increasing.
struct KMeansResult {
  std::vector<std::vector<double>> centroids;
  std::vector<double> objective_history;
};

inline std::size_t kmeans_assign(const std::vector<std::vector<double>>& centroids, const double* x, std::size_t d) {
  std::size_t best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    double dist = 0;
    for (std::size_t j = 0; j < d; ++j) {
      double diff = x[j] - centroids[c][j];
      dist += diff * diff;
    }
    if (dist < best_dist) {  // strict: ties keep the lowest id
      best_dist = dist;
      best = c;
    }
  }
  return best;
}

inline KMeansResult kmeans_fit(const std::vector<double>& data, std::size_t d, std::size_t k, std::size_t iters,
                               Rng& rng) {
  std::size_t n = d ? data.size() / d : 0;
  if (n == 0) throw std::invalid_argument("kmeans_fit: empty input");
  if (k > n) throw std::invalid_argument("kmeans_fit: k exceeds sample count");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
  KMeansResult res;
  for (std::size_t c = 0; c < k; ++c)
    res.centroids.emplace_back(data.begin() + order[c] * d, data.begin() + (order[c] + 1) * d);

  std::vector<std::size_t> assign(n);
  for (std::size_t it = 0; it < iters; ++it) {
    double obj = 0;
    for (std::size_t i = 0; i < n; ++i) {
      assign[i] = kmeans_assign(res.centroids, data.data() + i * d, d);
      for (std::size_t j = 0; j < d; ++j) {
        double diff = data[i * d + j] - res.centroids[assign[i]][j];
        obj += diff * diff;
      }
    }
    res.objective_history.push_back(obj);
    std::vector<std::vector<double>> sums(k, std::vector<double>(d, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) sums[assign[i]][j] += data[i * d + j];
      counts[assign[i]]++;
    }
    for (std::size_t c = 0; c < k; ++c)
      if (counts[c])  // empty clusters keep their previous centroid
        for (std::size_t j = 0; j < d; ++j) res.centroids[c][j] = sums[c][j] / counts[c];
  }
  return res;
}

// Best of several random initializations by final objective.
inline KMeansResult kmeans_fit_restarts(const std::vector<double>& data, std::size_t d, std::size_t k,
                                        std::size_t iters, std::size_t restarts, Rng& rng) {
  KMeansResult best;
  for (std::size_t r = 0; r < restarts; ++r) {
    auto res = kmeans_fit(data, d, k, iters, rng);
    if (r == 0 || res.objective_history.back() < best.objective_history.back()) best = std::move(res);
  }
  return best;
}

// ---------------------------------------------------------------------------
// full model: backbone + projection head(s)
// ---------------------------------------------------------------------------

template <typename T>
struct IbotModel {
  BackboneParams<T> backbone;
  ProjectionHead<T> head;                         // CLS path; also patch path when shared
  std::optional<ProjectionHead<T>> patch_head_;   // separate storage when not shared

  static IbotModel init(const ViTConfig& vit_cfg, HeadConfig head_cfg, Rng& rng) {
    head_cfg.in_dim = vit_cfg.embed_dim;
    IbotModel m;
    m.backbone = BackboneParams<T>::init(vit_cfg, rng);
    m.head = ProjectionHead<T>::init(head_cfg, rng);
    if (!head_cfg.shared) m.patch_head_ = ProjectionHead<T>::init(head_cfg, rng);
    return m;
  }

  ProjectionHead<T>& cls_head() { return head; }
  ProjectionHead<T>& patch_head() { return patch_head_ ? *patch_head_ : head; }
  bool shared() const { return !patch_head_.has_value(); }

  std::vector<ParamRef<T>> params() {
    auto v = backbone.params();
    auto h = head.params("head.");
    v.insert(v.end(), h.begin(), h.end());
    if (patch_head_) {
      auto h2 = patch_head_->params("head_patch.");
      v.insert(v.end(), h2.begin(), h2.end());
    }
    return v;
  }

  void zero_grad() {
    for (auto& p : params()) p.tensor->zero_grad();
  }
};

}  // namespace ibot
