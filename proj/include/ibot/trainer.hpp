#pragma once

// Training loop internals: schedules, AdamW, the EMA teacher, the full
// self-distillation train step, checkpoint serialization, and the metrics
// stream format.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ibot/augment.hpp"
#include "ibot/heads.hpp"
#include "ibot/tensor.hpp"
#include "ibot/vit.hpp"

namespace ibot {

// ---------------------------------------------------------------------------
// configuration and schedules
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  std::size_t warmup_epochs = 10;
  double base_lr_scale = 5e-4;  // lr = scale * batch_size / 256
  double final_lr = 1e-6;
  double weight_decay = 0.04;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double ema_start = 0.996, ema_end = 1.0;
  double clip_norm = 0.0;  // 0 disables gradient clipping
  double cls_weight = 1.0;
  double mim_weight = 1.0;
  // masking placement: "a" two globals only, "b" globals of the multi-crop
  // set, "c" all crops, "d" the first global only
  std::string pipeline = "b";
  // "online" soft targets, "online_hard" argmax targets, "mean_color" fixed
  std::string tokenizer = "online";
  std::size_t snapshot_every_epochs = 25;
  std::size_t freeze_head_epochs = 1;  // weight-norm magnitudes held fixed
  std::uint64_t seed = 0;
  std::size_t steps_per_epoch = 1;  // set from the dataset by the driver

  double base_lr() const { return base_lr_scale * static_cast<double>(batch_size) / 256.0; }
  std::size_t total_steps() const { return epochs * steps_per_epoch; }

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (warmup_epochs > epochs) throw std::invalid_argument("TrainConfig: warmup_epochs exceeds epochs");
    if (pipeline != "a" && pipeline != "b" && pipeline != "c" && pipeline != "d")
      throw std::invalid_argument("TrainConfig: unknown pipeline '" + pipeline + "'");
    if (tokenizer != "online" && tokenizer != "online_hard" && tokenizer != "mean_color")
      throw std::invalid_argument("TrainConfig: unknown tokenizer '" + tokenizer + "'");
    if (tokenizer == "mean_color" && pipeline == "c")
      throw std::invalid_argument("TrainConfig: mean_color tokenizer covers global views only");
    if (cls_weight == 0.0 && mim_weight == 0.0)
      throw std::invalid_argument("TrainConfig: at least one loss weight must be nonzero");
  }
};

inline double lr_at(std::size_t step, const TrainConfig& cfg) {
  double base = cfg.base_lr();
  std::size_t warmup = cfg.warmup_epochs * cfg.steps_per_epoch;
  std::size_t total = cfg.total_steps();
  if (warmup > 0 && step < warmup) return base * static_cast<double>(step) / static_cast<double>(warmup);
  if (total <= warmup || step >= total) return cfg.final_lr;
  double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return cfg.final_lr + (base - cfg.final_lr) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

inline double ema_momentum_at(std::size_t step, const TrainConfig& cfg) {
  std::size_t total = cfg.total_steps();
  if (total == 0 || step >= total) return cfg.ema_end;
  double progress = static_cast<double>(step) / static_cast<double>(total);
  return cfg.ema_end - (cfg.ema_end - cfg.ema_start) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// Fine-tuning multiplier: layer 0 is the embedding, layer num_layers the head.
inline double layerwise_lr_multiplier(std::size_t layer_index, std::size_t num_layers, double decay) {
  if (decay <= 0.0 || decay > 1.0) throw std::invalid_argument("layerwise_lr_multiplier: decay must be in (0,1]");
  if (layer_index > num_layers) throw std::invalid_argument("layerwise_lr_multiplier: layer index out of range");
  return std::pow(decay, static_cast<double>(num_layers - layer_index));
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

// Decoupled weight decay: the decay shrink multiplies the parameter directly
// and never enters the moment accumulators. Moments are kept in double.
template <typename T>
struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.04;
  std::size_t t = 0;
  std::map<std::string, std::vector<double>> m, v;

  static AdamW from_config(const TrainConfig& cfg) {
    AdamW o;
    o.beta1 = cfg.beta1;
    o.beta2 = cfg.beta2;
    o.eps = cfg.adam_eps;
    o.weight_decay = cfg.weight_decay;
    return o;
  }

  void step(std::vector<ParamRef<T>> params, double lr) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& p : params) {
      std::size_t n = p.tensor->numel();
      auto& pm = m[p.name];
      auto& pv = v[p.name];
      if (pm.empty()) pm.assign(n, 0.0);
      if (pv.empty()) pv.assign(n, 0.0);
      if (pm.size() != n || pv.size() != n)
        throw std::invalid_argument("AdamW: moment size mismatch for " + p.name);
      const auto& g = p.tensor->grad();
      for (std::size_t i = 0; i < n; ++i) {
        double gi = g[i];
        pm[i] = beta1 * pm[i] + (1 - beta1) * gi;
        pv[i] = beta2 * pv[i] + (1 - beta2) * gi * gi;
        double w = (*p.tensor)[i];
        if (!p.no_decay) w -= lr * weight_decay * w;
        w -= lr * (pm[i] / bc1) / (std::sqrt(pv[i] / bc2) + eps);
        (*p.tensor)[i] = static_cast<T>(w);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// EMA teacher
// ---------------------------------------------------------------------------

template <typename T>
void ema_update(std::vector<ParamRef<T>> teacher, std::vector<ParamRef<T>> student, double l) {
  if (teacher.size() != student.size()) throw std::invalid_argument("ema_update: parameter list size mismatch");
  for (std::size_t p = 0; p < teacher.size(); ++p) {
    if (teacher[p].tensor->shape() != student[p].tensor->shape())
      throw std::invalid_argument("ema_update: shape mismatch at " + teacher[p].name);
    std::size_t n = teacher[p].tensor->numel();
    for (std::size_t i = 0; i < n; ++i)
      (*teacher[p].tensor)[i] =
          static_cast<T>(l * (*teacher[p].tensor)[i] + (1.0 - l) * (*student[p].tensor)[i]);
  }
}

// Deep copy of the student with gradients disabled.
template <typename T>
IbotModel<T> make_teacher(IbotModel<T>& student) {
  IbotModel<T> teacher = student;
  auto sp = student.params();
  auto tp = teacher.params();
  for (std::size_t i = 0; i < sp.size(); ++i) {
    *tp[i].tensor = sp[i].tensor->clone();
    tp[i].tensor->set_requires_grad(false);
  }
  return teacher;
}

// ---------------------------------------------------------------------------
// the train step (pseudocode ordering: forward, losses, backward, optimizer,
// EMA, centers)
// ---------------------------------------------------------------------------

struct StepMetrics {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss_cls = 0;
  double loss_mim = 0;
  double lr = 0;
  double momentum = 0;
  double masked_fraction = 0;
};

inline std::string format_metrics(const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu %zu %.17g %.17g %.17g %.17g %.17g", m.step, m.epoch, m.loss_cls, m.loss_mim,
                m.lr, m.momentum, m.masked_fraction);
  return buf;
}

namespace detail {

// per-sample stream so augmentation replays identically across resumes
inline Rng sample_stream(std::uint64_t seed, std::size_t epoch, std::size_t sample_index) {
  return Rng(seed).derive(epoch).derive(sample_index);
}

template <typename T>
std::vector<std::size_t> argmax_tokens(const Tensor<T>& logits, const Tensor<T>& center) {
  std::size_t K = logits.dim(logits.rank() - 1);
  std::size_t rows = logits.numel() / K;
  std::vector<std::size_t> ids(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (logits[r * K + k] - center[k] > logits[r * K + best] - center[best]) best = k;
    ids[r] = best;
  }
  return ids;
}

}  // namespace detail

template <typename T>
StepMetrics train_step(const std::vector<Image>& images, const std::vector<std::size_t>& sample_indices,
                       IbotModel<T>& student, IbotModel<T>& teacher, DistillState<T>& distill, AdamW<T>& opt,
                       const TrainConfig& cfg, const CropConfig& crops, const RatioPolicy& ratios,
                       std::size_t step) {
  cfg.validate();
  if (images.empty() || images.size() != sample_indices.size())
    throw std::invalid_argument("train_step: empty batch or index mismatch");
  std::size_t epoch = cfg.steps_per_epoch ? step / cfg.steps_per_epoch : 0;
  double lr = lr_at(step, cfg);
  double l = ema_momentum_at(step, cfg);
  const ViTConfig& vc = student.backbone.cfg;
  std::size_t B = images.size();
  std::size_t N = vc.num_patches();
  std::size_t side = vc.grid_side();

  CropConfig cc = crops;
  if (cfg.pipeline == "a") cc.local_count = 0;

  // per-sample crops and masks
  std::vector<std::vector<Image>> globals(cc.global_count);
  std::vector<std::vector<Image>> locals(cc.local_count);
  std::vector<std::vector<std::uint8_t>> gmasks(cc.global_count, std::vector<std::uint8_t>(B * N, 0));
  std::size_t local_side = cc.local_count ? cc.local_size / vc.patch_size : 0;
  std::size_t Nl = local_side * local_side;
  std::vector<std::vector<std::uint8_t>> lmasks(cc.local_count, std::vector<std::uint8_t>(B * Nl, 0));
  std::size_t masked_tokens = 0, maskable_tokens = 0;
  for (std::size_t b = 0; b < B; ++b) {
    Rng rng = detail::sample_stream(cfg.seed, epoch, sample_indices[b]);
    auto set = sample_crops(images[b], cc, rng);
    for (std::size_t g = 0; g < cc.global_count; ++g) {
      bool mask_this = cfg.pipeline != "d" || g == 0;
      if (mask_this) {
        auto spec = blockwise_mask(side, side, sample_ratio(ratios, rng), rng);
        std::copy(spec.mask.begin(), spec.mask.end(), gmasks[g].begin() + b * N);
        masked_tokens += spec.count();
        maskable_tokens += N;
      }
      globals[g].push_back(std::move(set.globals[g]));
    }
    for (std::size_t lv = 0; lv < cc.local_count; ++lv) {
      if (cfg.pipeline == "c") {
        auto spec = blockwise_mask(local_side, local_side, sample_ratio(ratios, rng), rng);
        std::copy(spec.mask.begin(), spec.mask.end(), lmasks[lv].begin() + b * Nl);
        masked_tokens += spec.count();
        maskable_tokens += Nl;
      }
      locals[lv].push_back(std::move(set.locals[lv]));
    }
  }

  bool need_mim = cfg.mim_weight != 0.0;
  bool need_cls = cfg.cls_weight != 0.0;
  bool freeze_g = epoch < cfg.freeze_head_epochs;

  // student and teacher forward on global views
  std::vector<Tensor<T>> s_cls, s_patch_logits, t_cls, t_patch_logits;
  std::vector<std::vector<std::uint8_t>> mim_masks;
  std::vector<Tensor<T>> global_patches(cc.global_count);
  for (std::size_t g = 0; g < cc.global_count; ++g) {
    global_patches[g] = patchify_batch<T>(globals[g], vc);
    auto s_seq = embed_with_mask(global_patches[g], gmasks[g], student.backbone);
    auto s_out = vit_forward(s_seq, student.backbone);
    s_cls.push_back(project(s_out.cls, student.cls_head(), freeze_g));
    auto t_seq = embed_with_mask(global_patches[g].detach(), {}, teacher.backbone);
    auto t_out = vit_forward(t_seq, teacher.backbone);
    t_cls.push_back(project(t_out.cls, teacher.cls_head()));
    bool view_masked = cfg.pipeline != "d" || g == 0;
    if (need_mim && view_masked) {
      s_patch_logits.push_back(project(s_out.patches, student.patch_head(), freeze_g));
      t_patch_logits.push_back(project(t_out.patches, teacher.patch_head()));
      mim_masks.push_back(gmasks[g]);
    } else if (need_mim) {
      // unmasked teacher view still feeds the patch center
      t_patch_logits.push_back(project(t_out.patches, teacher.patch_head()));
    }
  }
  std::vector<Tensor<T>> s_local_cls;
  std::size_t mim_global_views = mim_masks.size();
  for (std::size_t lv = 0; lv < cc.local_count; ++lv) {
    ViTConfig lc = vc;
    lc.image_size = cc.local_size;
    auto patches = patchify_batch<T>(locals[lv], lc);
    auto s_seq = embed_with_mask(patches, lmasks[lv], student.backbone, local_side);
    auto s_out = vit_forward(s_seq, student.backbone);
    if (need_cls) s_local_cls.push_back(project(s_out.cls, student.cls_head(), freeze_g));
    if (need_mim && cfg.pipeline == "c") {
      auto t_seq = embed_with_mask(patches.detach(), {}, teacher.backbone, local_side);
      auto t_out = vit_forward(t_seq, teacher.backbone);
      s_patch_logits.push_back(project(s_out.patches, student.patch_head(), freeze_g));
      t_patch_logits.push_back(project(t_out.patches, teacher.patch_head()));
      mim_masks.push_back(lmasks[lv]);
    }
  }

  // losses against pre-update centers and the pre-update teacher
  StepMetrics metrics;
  metrics.step = step;
  metrics.epoch = epoch;
  metrics.lr = lr;
  metrics.momentum = l;
  metrics.masked_fraction = maskable_tokens ? static_cast<double>(masked_tokens) / maskable_tokens : 0.0;

  Tensor<T> total;
  bool have_total = false;
  double ep = static_cast<double>(epoch);
  if (need_cls) {
    auto lc = loss_cls(s_cls, s_local_cls, t_cls, distill, ep);
    metrics.loss_cls = lc.item();
    total = mul_scalar(lc, T(cfg.cls_weight));
    have_total = true;
  }
  if (need_mim && !mim_masks.empty()) {
    Tensor<T> lm;
    if (cfg.tokenizer == "online") {
      std::vector<Tensor<T>> t_masked(t_patch_logits.begin(), t_patch_logits.begin() + mim_global_views);
      if (cfg.pipeline == "c")
        t_masked.insert(t_masked.end(), t_patch_logits.begin() + cc.global_count, t_patch_logits.end());
      lm = loss_mim(s_patch_logits, t_masked, mim_masks, distill, ep);
    } else {
      std::vector<std::vector<std::size_t>> ids;
      if (cfg.tokenizer == "online_hard") {
        for (std::size_t vi = 0; vi < s_patch_logits.size(); ++vi)
          ids.push_back(detail::argmax_tokens(vi < mim_global_views ? t_patch_logits[vi]
                                                                    : t_patch_logits[cc.global_count + vi - mim_global_views],
                                              distill.center_patch));
      } else {  // mean_color on the augmented view's pixels
        if (student.patch_head().cfg.out_dim < 512)
          throw std::invalid_argument("train_step: mean_color tokenizer needs head out_dim >= 512");
        for (std::size_t vi = 0; vi < mim_global_views; ++vi) {
          std::vector<std::size_t> view_ids(B * N);
          const auto& pt = global_patches[vi];
          std::size_t pd = vc.patch_dim();
          for (std::size_t i = 0; i < B * N; ++i) {
            std::vector<float> pix(pd);
            for (std::size_t j = 0; j < pd; ++j) pix[j] = static_cast<float>(pt[i * pd + j]);
            view_ids[i] = mean_color_token(pix, vc.in_channels);
          }
          ids.push_back(std::move(view_ids));
        }
      }
      std::vector<Tensor<T>> s_for_ids(s_patch_logits.begin(), s_patch_logits.begin() + ids.size());
      std::vector<std::vector<std::uint8_t>> m_for_ids(mim_masks.begin(), mim_masks.begin() + ids.size());
      lm = loss_mim_fixed_tokenizer(s_for_ids, ids, m_for_ids, distill.temp_patch_student);
    }
    metrics.loss_mim = lm.item();
    auto weighted = mul_scalar(lm, T(cfg.mim_weight));
    total = have_total ? add(total, weighted) : weighted;
    have_total = true;
  }
  if (!have_total) throw std::invalid_argument("train_step: no active loss for this configuration");
  if (!std::isfinite(metrics.loss_cls) || !std::isfinite(metrics.loss_mim))
    throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(step) + " (lr=" +
                             std::to_string(lr) + ", loss_cls=" + std::to_string(metrics.loss_cls) +
                             ", loss_mim=" + std::to_string(metrics.loss_mim) + ")");

  student.zero_grad();
  backward(total);
  if (cfg.clip_norm > 0) {
    double sq = 0;
    for (auto& p : student.params())
      for (auto g : p.tensor->grad()) sq += static_cast<double>(g) * g;
    double norm = std::sqrt(sq);
    if (norm > cfg.clip_norm) {
      T scale = static_cast<T>(cfg.clip_norm / norm);
      for (auto& p : student.params())
        for (auto& g : p.tensor->grad()) g *= scale;
    }
  }
  opt.step(student.params(), lr);
  ema_update(teacher.params(), student.params(), l);
  distill = update_centers(distill, t_cls, t_patch_logits);
  return metrics;
}

// ---------------------------------------------------------------------------
// checkpoint container
// ---------------------------------------------------------------------------

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<double> data;
};

struct CheckpointData {
  std::uint32_t version = 1;
  std::string config_echo;
  std::vector<NamedTensor> tensors;

  const NamedTensor& find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw std::invalid_argument("checkpoint: missing tensor '" + name + "'");
  }
};

namespace detail {

inline constexpr char kCkptMagic[9] = "IBOTCKPT";
inline constexpr char kBankMagic[9] = "IBOTBANK";

struct ByteWriter {
  std::string bytes;
  void raw(const void* p, std::size_t n) { bytes.append(static_cast<const char*>(p), n); }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
};

struct ByteReader {
  const std::string& bytes;
  std::size_t pos = 0;
  std::string context = "header";
  void raw(void* p, std::size_t n) {
    if (pos + n > bytes.size())
      throw std::runtime_error("checkpoint truncated while reading " + context);
    std::memcpy(p, bytes.data() + pos, n);
    pos += n;
  }
  std::uint8_t u8() { std::uint8_t v; raw(&v, 1); return v; }
  std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
  std::uint64_t u64() { std::uint64_t v; raw(&v, 8); return v; }
  double f64() { double v; raw(&v, 8); return v; }
  std::string str() {
    std::uint32_t n = u32();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
};

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string serialize_container(const char* magic, const CheckpointData& data) {
  ByteWriter w;
  w.raw(magic, 8);
  w.u32(data.version);
  w.str(data.config_echo);
  w.u32(static_cast<std::uint32_t>(data.tensors.size()));
  for (const auto& t : data.tensors) {
    w.str(t.name);
    std::uint64_t numel = 1;
    w.u8(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) {
      w.u64(d);
      numel *= d;
    }
    if (numel != t.data.size()) throw std::invalid_argument("checkpoint: dims mismatch for '" + t.name + "'");
    for (double v : t.data) w.f64(v);
  }
  w.u64(fnv1a(w.bytes));
  return w.bytes;
}

inline CheckpointData deserialize_container(const char* magic, const std::string& bytes, const std::string& what) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), magic, 8) != 0)
    throw std::runtime_error("not a " + what + " (bad magic)");
  if (bytes.size() < 16) throw std::runtime_error(what + " truncated (missing checksum)");
  std::string body = bytes.substr(0, bytes.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (fnv1a(body) != stored) throw std::runtime_error(what + " checksum mismatch");
  ByteReader r{body};
  r.pos = 8;
  CheckpointData data;
  data.version = r.u32();
  if (data.version != 1)
    throw std::runtime_error("unsupported " + what + " version " + std::to_string(data.version));
  r.context = "config echo";
  data.config_echo = r.str();
  std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    r.context = "tensor #" + std::to_string(i) + " name";
    t.name = r.str();
    r.context = "tensor '" + t.name + "'";
    std::uint8_t rank = r.u8();
    std::uint64_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      t.dims.push_back(r.u64());
      numel *= t.dims.back();
    }
    t.data.resize(numel);
    for (std::uint64_t j = 0; j < numel; ++j) t.data[j] = r.f64();
    data.tensors.push_back(std::move(t));
  }
  return data;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const CheckpointData& data) {
  auto bytes = detail::serialize_container(detail::kCkptMagic, data);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read checkpoint " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  std::string bytes = ss.str();
  return detail::deserialize_container(detail::kCkptMagic, bytes, "checkpoint");
}

// ---------------------------------------------------------------------------
// full training state <-> checkpoint
// ---------------------------------------------------------------------------

template <typename T>
NamedTensor tensor_entry(const std::string& name, const Tensor<T>& t) {
  NamedTensor e;
  e.name = name;
  for (auto d : t.shape()) e.dims.push_back(d);
  e.data.assign(t.data().begin(), t.data().end());
  return e;
}

template <typename T>
CheckpointData make_training_checkpoint(IbotModel<T>& student, IbotModel<T>& teacher, const DistillState<T>& distill,
                                        const AdamW<T>& opt, std::size_t step, const std::string& config_echo) {
  CheckpointData d;
  d.config_echo = config_echo;
  for (auto& p : student.params()) d.tensors.push_back(tensor_entry("student." + p.name, *p.tensor));
  for (auto& p : teacher.params()) d.tensors.push_back(tensor_entry("teacher." + p.name, *p.tensor));
  for (const auto& [name, mom] : opt.m)
    d.tensors.push_back({"opt.m." + name, {mom.size()}, mom});
  for (const auto& [name, mom] : opt.v)
    d.tensors.push_back({"opt.v." + name, {mom.size()}, mom});
  d.tensors.push_back({"opt.t", {1}, {static_cast<double>(opt.t)}});
  d.tensors.push_back(tensor_entry("distill.center_cls", distill.center_cls));
  d.tensors.push_back(tensor_entry("distill.center_patch", distill.center_patch));
  d.tensors.push_back({"train.step", {1}, {static_cast<double>(step)}});
  return d;
}

template <typename T>
void load_named_into(const NamedTensor& src, Tensor<T>& dst) {
  if (src.data.size() != dst.numel())
    throw std::runtime_error("checkpoint tensor '" + src.name + "' has " + std::to_string(src.data.size()) +
                             " values, expected " + std::to_string(dst.numel()));
  for (std::size_t i = 0; i < src.data.size(); ++i) dst[i] = static_cast<T>(src.data[i]);
}

template <typename T>
std::size_t restore_training_checkpoint(const CheckpointData& d, IbotModel<T>& student, IbotModel<T>& teacher,
                                        DistillState<T>& distill, AdamW<T>& opt) {
  for (auto& p : student.params()) load_named_into(d.find("student." + p.name), *p.tensor);
  for (auto& p : teacher.params()) load_named_into(d.find("teacher." + p.name), *p.tensor);
  opt.m.clear();
  opt.v.clear();
  for (const auto& t : d.tensors) {
    if (t.name.rfind("opt.m.", 0) == 0) opt.m[t.name.substr(6)] = t.data;
    if (t.name.rfind("opt.v.", 0) == 0) opt.v[t.name.substr(6)] = t.data;
  }
  opt.t = static_cast<std::size_t>(d.find("opt.t").data[0]);
  load_named_into(d.find("distill.center_cls"), distill.center_cls);
  load_named_into(d.find("distill.center_patch"), distill.center_patch);
  return static_cast<std::size_t>(d.find("train.step").data[0]);
}

}  // namespace ibot
