#pragma once

// Command implementations behind the CLI: synthetic dataset generation, run
// orchestration for pretraining, evaluation protocols, and analysis exports.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ibot/eval.hpp"
#include "ibot/io.hpp"
#include "ibot/trainer.hpp"

namespace ibot {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// synthetic dataset
// ---------------------------------------------------------------------------

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, float rgb[3]) {
  double c = v * s;
  double hp = h * 6.0;
  double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  double m = v - c;
  rgb[0] = static_cast<float>(r + m);
  rgb[1] = static_cast<float>(g + m);
  rgb[2] = static_cast<float>(b + m);
}

// one procedural image: texture family and palette fixed by the class,
// geometry and color jittered per sample
inline Image synth_image(std::size_t cls, std::size_t num_classes, std::size_t size, Rng& rng) {
  Image im(size, size, 3);
  std::size_t family = cls % 4;
  // class hues overlap heavily, so color is a weak cue on its own and the
  // texture family has to carry the class
  double hue = std::fmod(static_cast<double>(cls) / num_classes + rng.uniform(-0.3, 0.3) + 1.0, 1.0);
  float base[3], alt[3];
  hsv_to_rgb(hue, rng.uniform(0.55, 0.95), rng.uniform(0.65, 0.95), base);
  hsv_to_rgb(std::fmod(hue + rng.uniform(0.35, 0.65), 1.0), rng.uniform(0.4, 0.8), rng.uniform(0.2, 0.45), alt);
  double jitter[3];
  for (auto& j : jitter) j = rng.uniform(-0.08, 0.08);
  double phase = rng.uniform(0.0, 2 * M_PI);
  double freq = rng.uniform(0.8, 1.2);
  double angle = rng.uniform(-0.3, 0.3);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double u = static_cast<double>(x) / size, v = static_cast<double>(y) / size;
      double t;  // in [0,1]: mixing weight between base and alt color
      switch (family) {
        case 0: {  // stripes
          double s = std::cos(angle) * u + std::sin(angle) * v;
          t = 0.5 + 0.5 * std::sin(2 * M_PI * 4.0 * freq * s + phase);
          break;
        }
        case 1: {  // dots
          double gu = std::fmod(u * 4.0 * freq + phase / (2 * M_PI), 1.0) - 0.5;
          double gv = std::fmod(v * 4.0 * freq + phase / (2 * M_PI), 1.0) - 0.5;
          t = std::sqrt(gu * gu + gv * gv) < 0.3 ? 1.0 : 0.0;
          break;
        }
        case 2: {  // gradient
          t = std::clamp(std::cos(angle) * u + std::sin(angle) * v, 0.0, 1.0);
          break;
        }
        default: {  // checkerboard
          int cu = static_cast<int>(u * 4.0 * freq + phase / (2 * M_PI));
          int cv = static_cast<int>(v * 4.0 * freq + phase / (2 * M_PI));
          t = (cu + cv) % 2;
          break;
        }
      }
      for (std::size_t c = 0; c < 3; ++c) {
        double val = base[c] * (1 - t) + alt[c] * t + jitter[c] + rng.uniform(-0.03, 0.03);
        im.at(y, x, c) = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  return im;
}

// leave-one-out nearest neighbor on downsampled pixels
inline double pixel_knn_accuracy(const std::vector<Image>& images, const std::vector<std::size_t>& labels) {
  std::size_t n = images.size();
  std::size_t side = 8;
  std::vector<std::vector<float>> feats(n);
  for (std::size_t i = 0; i < n; ++i) feats[i] = resize(images[i], side, side).pix;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double d = 0;
      for (std::size_t k = 0; k < feats[i].size(); ++k) {
        double diff = feats[i][k] - feats[j][k];
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        best_j = j;
      }
    }
    hit += labels[best_j] == labels[i];
  }
  return n ? static_cast<double>(hit) / n : 0.0;
}

}  // namespace detail

struct SynthSpec {
  std::size_t classes = 4;
  std::size_t per_class = 500;
  std::size_t size = 32;
  std::uint64_t seed = 0;
};

inline DatasetManifest generate_synthetic(const std::string& dir, const SynthSpec& spec) {
  if (spec.classes == 0 || spec.per_class == 0) throw std::invalid_argument("generate_synthetic: empty spec");
  fs::create_directories(dir);
  DatasetManifest m;
  m.root = dir;
  m.num_classes = spec.classes;
  std::vector<Image> images;
  std::vector<std::size_t> labels;
  for (std::size_t c = 0; c < spec.classes; ++c)
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      Rng rng = Rng(spec.seed).derive(c * spec.per_class + i);
      auto im = detail::synth_image(c, spec.classes, spec.size, rng);
      std::ostringstream name;
      name << "class" << c << "_" << std::setw(4) << std::setfill('0') << i << ".ppm";
      write_image((m.root / name.str()).string(), im);
      m.samples.push_back({name.str(), c});
      images.push_back(std::move(im));
      labels.push_back(c);
    }
  save_manifest(m);
  double acc = detail::pixel_knn_accuracy(images, labels);
  if (acc <= 0.9)
    throw std::runtime_error("generate_synthetic: classes not pixel-separable (1-NN accuracy " +
                             std::to_string(acc) + " <= 0.9)");
  return m;
}

// ---------------------------------------------------------------------------
// config adapters
// ---------------------------------------------------------------------------

inline ViTConfig vit_from_config(const RunConfig& cfg) {
  ViTConfig v;
  v.image_size = cfg.get_size("model.image_size");
  v.patch_size = cfg.get_size("model.patch_size");
  v.embed_dim = cfg.get_size("model.embed_dim");
  v.depth = cfg.get_size("model.depth");
  v.heads = cfg.get_size("model.heads");
  v.mlp_ratio = cfg.get_double("model.mlp_ratio");
  v.validate();
  return v;
}

inline HeadConfig head_from_config(const RunConfig& cfg) {
  HeadConfig h;
  h.hidden_dim = cfg.get_size("head.hidden_dim");
  h.bottleneck_dim = cfg.get_size("head.bottleneck_dim");
  h.out_dim = cfg.get_size("head.out_dim");
  h.shared = cfg.get_bool("head.shared");
  return h;
}

inline TrainConfig train_from_config(const RunConfig& cfg) {
  TrainConfig t;
  t.epochs = cfg.get_size("train.epochs");
  t.batch_size = cfg.get_size("train.batch_size");
  t.warmup_epochs = cfg.get_size("train.warmup_epochs");
  t.base_lr_scale = cfg.get_double("train.base_lr_scale");
  t.final_lr = cfg.get_double("train.final_lr");
  t.weight_decay = cfg.get_double("train.weight_decay");
  t.ema_start = cfg.get_double("train.ema_start");
  t.ema_end = cfg.get_double("train.ema_end");
  t.clip_norm = cfg.get_double("train.clip_norm");
  t.cls_weight = cfg.get_double("train.cls_weight");
  t.mim_weight = cfg.get_double("train.mim_weight");
  t.pipeline = cfg.get("train.pipeline");
  t.tokenizer = cfg.get("train.tokenizer");
  t.snapshot_every_epochs = cfg.get_size("train.snapshot_every_epochs");
  t.freeze_head_epochs = cfg.get_size("train.freeze_head_epochs");
  t.seed = cfg.get_size("train.seed");
  t.validate();
  return t;
}

inline CropConfig crops_from_config(const RunConfig& cfg) {
  CropConfig c;
  c.global_count = cfg.get_size("crops.global_count");
  c.global_size = cfg.get_size("crops.global_size");
  c.local_count = cfg.get_size("crops.local_count");
  c.local_size = cfg.get_size("crops.local_size");
  c.scale_split = cfg.get_double("crops.scale_split");
  c.local_scale_min = cfg.get_double("crops.local_scale_min");
  c.augment = cfg.get_bool("crops.augment");
  c.hflip_p = cfg.get_double("crops.hflip_p");
  c.jitter = cfg.get_double("crops.jitter");
  c.grayscale_p = cfg.get_double("crops.grayscale_p");
  c.validate();
  return c;
}

inline RatioPolicy ratios_from_config(const RunConfig& cfg) {
  RatioPolicy r;
  r.p_zero = cfg.get_double("mask.p_zero");
  r.range_lo = cfg.get_double("mask.range_lo");
  r.range_hi = cfg.get_double("mask.range_hi");
  r.validate();
  return r;
}

template <typename T>
DistillState<T> distill_from_config(const RunConfig& cfg) {
  auto s = DistillState<T>::init(cfg.get_size("head.out_dim"));
  s.temp_cls_student = cfg.get_double("distill.temp_cls_student");
  s.temp_patch_student = cfg.get_double("distill.temp_patch_student");
  s.temp_cls_teacher_start = s.temp_patch_teacher_start = cfg.get_double("distill.teacher_temp_start");
  s.temp_cls_teacher_end = s.temp_patch_teacher_end = cfg.get_double("distill.teacher_temp_end");
  s.teacher_temp_warmup_epochs = cfg.get_size("distill.teacher_temp_warmup_epochs");
  s.center_momentum_cls = cfg.get_double("distill.center_momentum_cls");
  s.center_momentum_patch = cfg.get_double("distill.center_momentum_patch");
  s.centering = cfg.get_bool("distill.centering");
  return s;
}

// ---------------------------------------------------------------------------
// run directory layout
// ---------------------------------------------------------------------------

struct RunPaths {
  fs::path root, config_resolved, metrics, ckpt, reports, exports;

  static RunPaths create(const RunConfig& cfg) {
    RunPaths p;
    p.root = fs::path(cfg.get("run.dir")) / cfg.get("run.name");
    p.config_resolved = p.root / "config.resolved";
    p.metrics = p.root / "metrics.log";
    p.ckpt = p.root / "ckpt";
    p.reports = p.root / "reports";
    p.exports = p.root / "exports";
    fs::create_directories(p.ckpt);
    fs::create_directories(p.reports);
    fs::create_directories(p.exports);
    return p;
  }
};

// ---------------------------------------------------------------------------
// dataset loading
// ---------------------------------------------------------------------------

struct LoadedDataset {
  std::vector<Image> images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
};

inline LoadedDataset load_dataset(const std::string& dir) {
  auto manifest = load_manifest(dir);
  LoadedDataset d;
  d.num_classes = manifest.num_classes;
  for (const auto& [file, label] : manifest.samples) {
    d.images.push_back(parse_image((manifest.root / file).string()));
    d.labels.push_back(label);
  }
  return d;
}

// deterministic 80/20 split by sample index
inline void split_dataset(const LoadedDataset& d, LoadedDataset& train, LoadedDataset& val) {
  train.num_classes = val.num_classes = d.num_classes;
  for (std::size_t i = 0; i < d.images.size(); ++i) {
    auto& dst = (i % 5 == 4) ? val : train;
    dst.images.push_back(d.images[i]);
    dst.labels.push_back(d.labels[i]);
  }
}

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

struct TrainingSession {
  IbotModel<float> student, teacher;
  DistillState<float> distill;
  AdamW<float> opt;
  TrainConfig tc;
  CropConfig cc;
  RatioPolicy rp;
  RunConfig cfg;

  static TrainingSession build(const RunConfig& cfg) {
    TrainingSession s;
    s.cfg = cfg;
    s.tc = train_from_config(cfg);
    s.cc = crops_from_config(cfg);
    s.rp = ratios_from_config(cfg);
    Rng rng(s.tc.seed);
    s.student = IbotModel<float>::init(vit_from_config(cfg), head_from_config(cfg), rng);
    s.teacher = make_teacher(s.student);
    s.distill = distill_from_config<float>(cfg);
    s.opt = AdamW<float>::from_config(s.tc);
    return s;
  }
};

// per-epoch deterministic shuffle of sample indices
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng(seed).derive(0x0EDE7ULL).derive(epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
  return order;
}

inline std::size_t cmd_pretrain(const RunConfig& cfg_in, const std::string& resume_path = "",
                                std::ostream* log = nullptr) {
  RunConfig cfg = cfg_in;
  auto paths = RunPaths::create(cfg);
  auto session = TrainingSession::build(cfg);
  auto data = load_dataset(cfg.get("data.dir"));
  std::size_t n = data.images.size();
  if (n < session.tc.batch_size) throw std::runtime_error("cmd_pretrain: dataset smaller than one batch");
  session.tc.steps_per_epoch = n / session.tc.batch_size;

  std::size_t start_step = 0;
  std::vector<std::string> kept_metrics;
  if (!resume_path.empty()) {
    auto data_ck = load_checkpoint(resume_path);
    auto ck_cfg = parse_config_text(data_ck.config_echo);
    auto mismatches = ck_cfg.diff(cfg);
    if (!mismatches.empty()) {
      std::string msg = "cmd_pretrain: resume config mismatch:";
      for (const auto& d : mismatches) msg += "\n  " + d;
      throw std::runtime_error(msg);
    }
    start_step = restore_training_checkpoint(data_ck, session.student, session.teacher, session.distill, session.opt);
    // drop any metric rows at or past the resume point
    std::ifstream mf(paths.metrics);
    std::string line;
    while (std::getline(mf, line)) {
      if (line.empty() || line[0] == '#') {
        kept_metrics.push_back(line);
        continue;
      }
      std::istringstream iss(line);
      std::size_t s;
      if (iss >> s && s < start_step) kept_metrics.push_back(line);
    }
  }

  {
    std::ofstream rc(paths.config_resolved, std::ios::trunc);
    rc << cfg.resolved();
  }
  std::ofstream mf(paths.metrics, std::ios::trunc);
  if (start_step == 0)
    mf << "# step epoch loss_cls loss_mim lr l masked_fraction | tokenizer=" << session.tc.tokenizer
       << " pipeline=" << session.tc.pipeline << "\n";
  for (const auto& line : kept_metrics) mf << line << "\n";

  std::size_t total = session.tc.total_steps();
  for (std::size_t step = start_step; step < total; ++step) {
    std::size_t epoch = step / session.tc.steps_per_epoch;
    std::size_t step_in_epoch = step % session.tc.steps_per_epoch;
    auto order = epoch_order(n, session.tc.seed, epoch);
    std::vector<Image> batch;
    std::vector<std::size_t> indices;
    for (std::size_t b = 0; b < session.tc.batch_size; ++b) {
      std::size_t idx = order[step_in_epoch * session.tc.batch_size + b];
      batch.push_back(data.images[idx]);
      indices.push_back(idx);
    }
    auto m = train_step(batch, indices, session.student, session.teacher, session.distill, session.opt, session.tc,
                        session.cc, session.rp, step);
    mf << format_metrics(m) << "\n";
    bool epoch_end = step_in_epoch + 1 == session.tc.steps_per_epoch;
    if (epoch_end && ((epoch + 1) % session.tc.snapshot_every_epochs == 0 || step + 1 == total)) {
      auto ck = make_training_checkpoint(session.student, session.teacher, session.distill, session.opt, step + 1,
                                         cfg.resolved());
      save_checkpoint((paths.ckpt / ("epoch" + std::to_string(epoch + 1) + ".ckpt")).string(), ck);
      if (step + 1 == total) save_checkpoint((paths.ckpt / "final.ckpt").string(), ck);
    }
    if (log && epoch_end)
      *log << "epoch " << epoch + 1 << "/" << session.tc.epochs << " loss_cls " << m.loss_cls << " loss_mim "
           << m.loss_mim << "\n";
  }
  return total - start_step;
}

// ---------------------------------------------------------------------------
// evaluation protocols
// ---------------------------------------------------------------------------

// rebuilds the training session from a checkpoint; evaluation uses the
// teacher weights
struct LoadedModel {
  RunConfig cfg;
  IbotModel<float> student, teacher;
  DistillState<float> distill;
};

inline LoadedModel load_model(const std::string& ckpt_path) {
  auto data = load_checkpoint(ckpt_path);
  LoadedModel m;
  m.cfg = parse_config_text(data.config_echo);
  Rng rng(m.cfg.get_size("train.seed"));
  m.student = IbotModel<float>::init(vit_from_config(m.cfg), head_from_config(m.cfg), rng);
  m.teacher = make_teacher(m.student);
  m.distill = distill_from_config<float>(m.cfg);
  for (auto& p : m.student.params()) load_named_into(data.find("student." + p.name), *p.tensor);
  for (auto& p : m.teacher.params()) load_named_into(data.find("teacher." + p.name), *p.tensor);
  load_named_into(data.find("distill.center_cls"), m.distill.center_cls);
  load_named_into(data.find("distill.center_patch"), m.distill.center_patch);
  return m;
}

inline double eval_knn_best(IbotModel<float>& model, const LoadedDataset& train, const LoadedDataset& val,
                            std::ostream* report = nullptr, double temperature = 0.07) {
  auto train_bank = extract_bank(model, train.images, train.labels, train.num_classes);
  auto val_bank = extract_bank(model, val.images, val.labels, val.num_classes);
  double best = 0;
  for (std::size_t k : {1, 5, 10, 20}) {
    if (k > train_bank.size()) continue;
    double acc = knn_accuracy(train_bank, val_bank, k, temperature);
    if (report) *report << "k=" << k << " acc=" << acc << "\n";
    best = std::max(best, acc);
  }
  if (report) *report << "best=" << best << "\n";
  return best;
}

inline void cmd_eval(const std::string& protocol, const std::string& ckpt_path, const std::string& data_dir,
                     const std::string& report_dir) {
  auto model = load_model(ckpt_path);
  auto all = load_dataset(data_dir);
  LoadedDataset train, val;
  split_dataset(all, train, val);
  fs::create_directories(report_dir);
  std::ofstream out(fs::path(report_dir) / (protocol + ".txt"), std::ios::trunc);
  if (!out) throw std::runtime_error("cmd_eval: cannot write report in " + report_dir);
  double temperature = model.cfg.get_double("eval.knn_temperature");
  std::size_t probe_epochs = model.cfg.get_size("eval.probe_epochs");

  if (protocol == "knn") {
    out << "protocol knn sweep k in {1,5,10,20} T=" << temperature << "\n";
    eval_knn_best(model.teacher, train, val, &out, temperature);
  } else if (protocol == "linear") {
    auto tb = extract_bank(model.teacher, train.images, train.labels, train.num_classes);
    auto vb = extract_bank(model.teacher, val.images, val.labels, val.num_classes);
    auto report = linear_probe(tb, vb, probe_epochs);
    out << "protocol linear sweep lr\n";
    for (const auto& s : report.sweep) out << "lr=" << s.value << " acc=" << s.accuracy << "\n";
    out << "best=" << report.best.accuracy << "\n";
  } else if (protocol == "part") {
    std::size_t N = model.teacher.backbone.cfg.num_patches();
    out << "protocol part sweep k\n";
    for (std::size_t k : {std::size_t(1), std::max<std::size_t>(1, N / 4), N}) {
      double acc = part_wise_probe(model.teacher, train.images, train.labels, val.images, val.labels,
                                   train.num_classes, k);
      out << "k=" << k << " acc=" << acc << "\n";
    }
  } else if (protocol == "cluster") {
    auto vb = extract_bank(model.teacher, val.images, val.labels, val.num_classes);
    Rng rng(model.cfg.get_size("train.seed"));
    auto pred = cluster_features(vb, 10, rng);
    auto m = cluster_metrics(pred, vb.labels);
    out << "protocol cluster kmeans K=" << vb.num_classes << " restarts=10\n";
    out << "acc=" << m.acc << " ari=" << m.ari << " nmi=" << m.nmi << " fmi=" << m.fmi << "\n";
  } else if (protocol == "robustness") {
    auto tb = extract_bank(model.teacher, train.images, train.labels, train.num_classes);
    std::size_t P = model.teacher.backbone.cfg.patch_size;
    out << "protocol robustness knn k=10\n";
    std::size_t k = std::min<std::size_t>(10, tb.size());
    auto eval_images = [&](const std::vector<Image>& ims) {
      auto vb = extract_bank(model.teacher, ims, val.labels, val.num_classes);
      return knn_accuracy(tb, vb, k, temperature);
    };
    for (double ratio : {0.0, 0.25, 0.5, 0.75}) {
      for (auto [mode, name] : {std::pair{OcclusionMode::salient, "salient"},
                                std::pair{OcclusionMode::non_salient, "non_salient"},
                                std::pair{OcclusionMode::random, "random"}}) {
        Rng rng(1234);
        std::vector<Image> perturbed;
        for (std::size_t i = 0; i < val.images.size(); ++i) {
          std::vector<double> att;
          if (mode != OcclusionMode::random) {
            auto patches = patchify_batch<float>({val.images[i]}, model.teacher.backbone.cfg);
            auto fwd = vit_forward(embed_with_mask(patches, {}, model.teacher.backbone), model.teacher.backbone, true);
            auto sal = cls_attention_saliency(fwd.attention.back(), 0);
            att.assign(sal.begin(), sal.end());
          }
          perturbed.push_back(occlusion_perturb(val.images[i], ratio, mode, P, att, rng));
        }
        out << "occlusion mode=" << name << " ratio=" << ratio << " acc=" << eval_images(perturbed) << "\n";
      }
    }
    std::size_t side = model.teacher.backbone.cfg.grid_side();
    for (std::size_t grid : {std::size_t(1), std::size_t(2), side}) {
      if (model.teacher.backbone.cfg.image_size % grid != 0) continue;
      Rng rng(4321);
      std::vector<Image> perturbed;
      for (const auto& im : val.images) perturbed.push_back(shuffle_perturb(im, grid, rng));
      out << "shuffle grid=" << grid << " acc=" << eval_images(perturbed) << "\n";
    }
  } else {
    throw std::invalid_argument("cmd_eval: unknown protocol '" + protocol + "'");
  }
}

// ---------------------------------------------------------------------------
// analysis exports
// ---------------------------------------------------------------------------

inline void cmd_analyze(const std::string& kind, const std::string& ckpt_path,
                        const std::vector<std::string>& image_paths, const std::string& export_dir) {
  auto model = load_model(ckpt_path);
  fs::create_directories(export_dir);
  auto& bb = model.teacher.backbone;
  std::size_t side = bb.cfg.grid_side(), N = bb.cfg.num_patches(), D = bb.cfg.embed_dim;

  if (kind == "attention") {
    if (image_paths.empty()) throw std::invalid_argument("cmd_analyze: attention needs an image");
    auto im = parse_image(image_paths[0]);
    std::ofstream csv(fs::path(export_dir) / "attention.csv", std::ios::trunc);
    csv << "head,patch,value\n";
    for (std::size_t h = 0; h < bb.cfg.heads; ++h) {
      auto row = attention_map(im, bb, bb.cfg.depth - 1, h, 0);
      Image map(side, side, 1);
      for (std::size_t i = 0; i < N; ++i) {
        map.pix[i] = row[i];
        csv << h << "," << i << "," << std::setprecision(10) << static_cast<double>(row[i]) << "\n";
      }
      float mx = *std::max_element(map.pix.begin(), map.pix.end());
      if (mx > 0)
        for (auto& p : map.pix) p /= mx;
      write_image((fs::path(export_dir) / ("attention_head" + std::to_string(h) + ".pgm")).string(), map);
    }
  } else if (kind == "token_layout") {
    std::ofstream csv(fs::path(export_dir) / "token_layout.csv", std::ios::trunc);
    csv << "image,patch,token,confidence\n";
    for (std::size_t idx = 0; idx < image_paths.size(); ++idx) {
      auto im = parse_image(image_paths[idx]);
      auto patches = patchify_batch<float>({im}, bb.cfg);
      auto fwd = vit_forward(embed_with_mask(patches, {}, bb), bb);
      auto logits = project(fwd.patches, model.teacher.patch_head());
      auto probs = softmax_last(logits);
      std::size_t K = model.teacher.patch_head().cfg.out_dim;
      struct Row {
        std::size_t patch, token;
        double conf;
      };
      std::vector<Row> rows;
      for (std::size_t p = 0; p < N; ++p) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k)
          if (probs[p * K + k] > probs[p * K + best]) best = k;
        rows.push_back({p, best, static_cast<double>(probs[p * K + best])});
      }
      std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.conf > b.conf; });
      for (const auto& r : rows)
        csv << idx << "," << r.patch << "," << r.token << "," << std::setprecision(10) << r.conf << "\n";
    }
  } else if (kind == "correspondence") {
    if (image_paths.size() < 2) throw std::invalid_argument("cmd_analyze: correspondence needs two images");
    auto ima = parse_image(image_paths[0]);
    auto imb = parse_image(image_paths[1]);
    auto fa = patchify_batch<float>({ima}, bb.cfg);
    auto fb = patchify_batch<float>({imb}, bb.cfg);
    auto outa = vit_forward(embed_with_mask(fa, {}, bb), bb, true);
    auto outb = vit_forward(embed_with_mask(fb, {}, bb), bb);
    std::vector<double> feats_a(outa.patches.data().begin(), outa.patches.data().end());
    std::vector<double> feats_b(outb.patches.data().begin(), outb.patches.data().end());
    auto sal = cls_attention_saliency(outa.attention.back(), 0);
    std::vector<double> saliency(sal.begin(), sal.end());
    auto pairs = sparse_correspondence(feats_a, feats_b, D, saliency, 12);
    std::ofstream csv(fs::path(export_dir) / "correspondence.csv", std::ios::trunc);
    csv << "i,j,score,similarity\n";
    for (const auto& c : pairs)
      csv << c.i << "," << c.j << "," << std::setprecision(10) << c.score << "," << c.similarity << "\n";
  } else {
    throw std::invalid_argument("cmd_analyze: unknown kind '" + kind + "'");
  }
}

}  // namespace ibot
