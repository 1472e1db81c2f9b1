#pragma once

// Frozen-feature evaluation: k-NN and linear probes, part-wise probing,
// clustering agreement metrics, robustness perturbations, and sparse patch
// correspondence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ibot/heads.hpp"
#include "ibot/trainer.hpp"
#include "ibot/vit.hpp"

namespace ibot {

// ---------------------------------------------------------------------------
// feature banks
// ---------------------------------------------------------------------------

struct FeatureBank {
  std::size_t dim = 0;
  std::vector<double> features;       // size() == ids.size() * dim
  std::vector<std::size_t> labels;    // in [0, num_classes)
  std::vector<std::size_t> ids;
  std::size_t num_classes = 0;

  std::size_t size() const { return ids.size(); }

  void validate() const {
    if (features.size() != size() * dim || labels.size() != size())
      throw std::invalid_argument("FeatureBank: inconsistent sizes");
    for (auto l : labels)
      if (l >= num_classes) throw std::invalid_argument("FeatureBank: label out of range");
  }
};

inline void save_bank(const std::string& path, const FeatureBank& bank) {
  bank.validate();
  CheckpointData d;
  d.config_echo = "dim=" + std::to_string(bank.dim) + " classes=" + std::to_string(bank.num_classes);
  d.tensors.push_back({"features", {bank.size(), bank.dim}, bank.features});
  std::vector<double> lab(bank.labels.begin(), bank.labels.end());
  std::vector<double> ids(bank.ids.begin(), bank.ids.end());
  d.tensors.push_back({"labels", {bank.size()}, lab});
  d.tensors.push_back({"ids", {bank.size()}, ids});
  d.tensors.push_back({"num_classes", {1}, {static_cast<double>(bank.num_classes)}});
  auto bytes = detail::serialize_container(detail::kBankMagic, d);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write feature bank " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline FeatureBank load_bank(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read feature bank " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  auto d = detail::deserialize_container(detail::kBankMagic, ss.str(), "feature bank");
  FeatureBank bank;
  const auto& feat = d.find("features");
  if (feat.dims.size() != 2) throw std::runtime_error("feature bank: features tensor must be rank 2");
  bank.dim = feat.dims[1];
  bank.features = feat.data;
  for (double v : d.find("labels").data) bank.labels.push_back(static_cast<std::size_t>(v));
  for (double v : d.find("ids").data) bank.ids.push_back(static_cast<std::size_t>(v));
  bank.num_classes = static_cast<std::size_t>(d.find("num_classes").data[0]);
  bank.validate();
  return bank;
}

// ---------------------------------------------------------------------------
// feature extraction
// ---------------------------------------------------------------------------

enum class FeatureKind { cls, mean_patch, cls_and_mean };

template <typename T>
std::vector<double> extract_one(IbotModel<T>& model, const Image& im, FeatureKind kind) {
  auto patches = patchify_batch<T>({im}, model.backbone.cfg);
  auto out = vit_forward(embed_with_mask(patches, {}, model.backbone), model.backbone);
  std::size_t D = model.backbone.cfg.embed_dim;
  std::size_t N = model.backbone.cfg.num_patches();
  std::vector<double> feat;
  if (kind == FeatureKind::cls || kind == FeatureKind::cls_and_mean)
    for (std::size_t d = 0; d < D; ++d) feat.push_back(out.cls[d]);
  if (kind == FeatureKind::mean_patch || kind == FeatureKind::cls_and_mean)
    for (std::size_t d = 0; d < D; ++d) {
      double s = 0;
      for (std::size_t n = 0; n < N; ++n) s += out.patches[n * D + d];
      feat.push_back(s / static_cast<double>(N));
    }
  return feat;
}

template <typename T>
FeatureBank extract_bank(IbotModel<T>& model, const std::vector<Image>& images,
                         const std::vector<std::size_t>& labels, std::size_t num_classes,
                         FeatureKind kind = FeatureKind::cls) {
  FeatureBank bank;
  bank.num_classes = num_classes;
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto f = extract_one(model, images[i], kind);
    bank.dim = f.size();
    bank.features.insert(bank.features.end(), f.begin(), f.end());
    bank.labels.push_back(labels[i]);
    bank.ids.push_back(i);
  }
  bank.validate();
  return bank;
}

// ---------------------------------------------------------------------------
// k-NN probe (cosine similarity, weighted vote)
// ---------------------------------------------------------------------------

inline std::vector<std::size_t> knn_classify(const FeatureBank& bank, const std::vector<double>& queries,
                                             std::size_t k, double temperature = 0.07) {
  bank.validate();
  if (bank.size() == 0) throw std::invalid_argument("knn_classify: empty bank");
  if (k == 0 || k > bank.size()) throw std::invalid_argument("knn_classify: k out of range");
  if (queries.size() % bank.dim != 0) throw std::invalid_argument("knn_classify: query dim mismatch");
  std::size_t m = queries.size() / bank.dim;
  std::size_t n = bank.size(), dim = bank.dim;

  std::vector<double> bank_sq(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t d = 0; d < dim; ++d) s += bank.features[i * dim + d] * bank.features[i * dim + d];
    bank_sq[i] = std::max(s, 1e-24);
  }
  std::vector<std::size_t> pred(m);
  std::vector<std::pair<double, std::size_t>> sims(n);
  for (std::size_t q = 0; q < m; ++q) {
    double qs = 0;
    for (std::size_t d = 0; d < dim; ++d) qs += queries[q * dim + d] * queries[q * dim + d];
    qs = std::max(qs, 1e-24);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0;
      for (std::size_t d = 0; d < dim; ++d) dot += queries[q * dim + d] * bank.features[i * dim + d];
      sims[i] = {dot / std::sqrt(qs * bank_sq[i]), i};
    }
    std::partial_sort(sims.begin(), sims.begin() + k, sims.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    std::vector<double> votes(bank.num_classes, 0.0);
    for (std::size_t j = 0; j < k; ++j)
      votes[bank.labels[sims[j].second]] += std::exp(sims[j].first / temperature);
    std::size_t best = 0;
    for (std::size_t c = 1; c < votes.size(); ++c)
      if (votes[c] > votes[best]) best = c;  // ties keep the smallest class id
    pred[q] = best;
  }
  return pred;
}

inline double knn_accuracy(const FeatureBank& train, const FeatureBank& val, std::size_t k, double temperature = 0.07) {
  auto pred = knn_classify(train, val.features, k, temperature);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += (pred[i] == val.labels[i]);
  return val.size() ? static_cast<double>(hit) / val.size() : 0.0;
}

// ---------------------------------------------------------------------------
// linear probe
// ---------------------------------------------------------------------------

struct ProbeSetting {
  double value = 0;  // the swept hyperparameter (lr or k)
  double accuracy = 0;
};

struct ProbeReport {
  std::string protocol;
  std::vector<ProbeSetting> sweep;
  ProbeSetting best;

  void finalize() {
    if (sweep.empty()) throw std::invalid_argument("ProbeReport: empty sweep");
    best = sweep[0];
    for (const auto& s : sweep)
      if (s.accuracy > best.accuracy) best = s;
  }
};

inline double linear_probe_once(const FeatureBank& train, const FeatureBank& val, std::size_t epochs, double lr) {
  std::size_t n = train.size(), dim = train.dim, C = train.num_classes;
  auto W = TensorD::zeros({dim, C}, true);
  auto b = TensorD::zeros({C}, true);
  auto X = TensorD::from({n, dim}, train.features);
  std::vector<double> onehot(n * C, 0.0);
  for (std::size_t i = 0; i < n; ++i) onehot[i * C + train.labels[i]] = 1.0;
  auto Y = TensorD::from({n, C}, std::move(onehot));
  AdamW<double> opt;
  opt.weight_decay = 0.0;
  std::vector<ParamRef<double>> params = {{"w", &W, false}, {"b", &b, true}};
  for (std::size_t e = 0; e < epochs; ++e) {
    W.zero_grad();
    b.zero_grad();
    auto logits = add(matmul(X, W), b);
    auto loss = neg(mean_all(sum_axes(mul(Y, log_softmax_last(logits)), {1})));
    backward(loss);
    opt.step(params, lr);
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    std::size_t best = 0;
    double bv = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) {
      double z = b[c];
      for (std::size_t d = 0; d < dim; ++d) z += val.features[i * dim + d] * W[d * C + c];
      if (z > bv) {
        bv = z;
        best = c;
      }
    }
    hit += (best == val.labels[i]);
  }
  return val.size() ? static_cast<double>(hit) / val.size() : 0.0;
}

inline ProbeReport linear_probe(const FeatureBank& train, const FeatureBank& val, std::size_t epochs = 100,
                                std::vector<double> lr_grid = {}) {
  train.validate();
  val.validate();
  if (train.size() == 0 || val.size() == 0) throw std::invalid_argument("linear_probe: empty bank");
  if (val.dim != train.dim) throw std::invalid_argument("linear_probe: bank dim mismatch");
  if (lr_grid.empty()) {
    double scale = static_cast<double>(train.size()) / 256.0;
    lr_grid = {0.3 * scale, 0.1 * scale, 0.03 * scale};
  }
  ProbeReport report;
  report.protocol = "linear";
  for (double lr : lr_grid) report.sweep.push_back({lr, linear_probe_once(train, val, epochs, lr)});
  report.finalize();
  return report;
}

// ---------------------------------------------------------------------------
// part-wise probe: average of the k most CLS-attended patch tokens, taken
// before the final layer norm
// ---------------------------------------------------------------------------

template <typename T>
std::vector<double> part_feature(IbotModel<T>& model, const Image& im, std::size_t k) {
  std::size_t N = model.backbone.cfg.num_patches();
  std::size_t D = model.backbone.cfg.embed_dim;
  if (k < 1 || k > N) throw std::invalid_argument("part_feature: k out of range [1," + std::to_string(N) + "]");
  auto patches = patchify_batch<T>({im}, model.backbone.cfg);
  auto out = vit_forward(embed_with_mask(patches, {}, model.backbone), model.backbone, true);
  auto sal = cls_attention_saliency(out.attention.back(), 0);
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sal[a] > sal[b]; });
  std::vector<double> feat(D, 0.0);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t d = 0; d < D; ++d) feat[d] += out.patches_pre_ln[order[j] * D + d];
  for (auto& v : feat) v /= static_cast<double>(k);
  return feat;
}

template <typename T>
FeatureBank extract_part_bank(IbotModel<T>& model, const std::vector<Image>& images,
                              const std::vector<std::size_t>& labels, std::size_t num_classes, std::size_t k) {
  FeatureBank bank;
  bank.num_classes = num_classes;
  bank.dim = model.backbone.cfg.embed_dim;
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto f = part_feature(model, images[i], k);
    bank.features.insert(bank.features.end(), f.begin(), f.end());
    bank.labels.push_back(labels[i]);
    bank.ids.push_back(i);
  }
  bank.validate();
  return bank;
}

template <typename T>
double part_wise_probe(IbotModel<T>& model, const std::vector<Image>& train_images,
                       const std::vector<std::size_t>& train_labels, const std::vector<Image>& val_images,
                       const std::vector<std::size_t>& val_labels, std::size_t num_classes, std::size_t k) {
  auto train = extract_part_bank(model, train_images, train_labels, num_classes, k);
  auto val = extract_part_bank(model, val_images, val_labels, num_classes, k);
  return linear_probe(train, val).best.accuracy;
}

// ---------------------------------------------------------------------------
// clustering agreement metrics
// ---------------------------------------------------------------------------

struct ClusterMetrics {
  double acc = 0, ari = 0, nmi = 0, fmi = 0;
};

namespace detail {

// max-weight assignment on a square matrix (Hungarian algorithm with
// potentials), returns the optimal total weight
inline double hungarian_max(const std::vector<std::vector<double>>& weight) {
  std::size_t n = weight.size();
  // convert to min-cost with padding-safe costs
  double wmax = 0;
  for (const auto& row : weight)
    for (double w : row) wmax = std::max(wmax, w);
  std::vector<std::vector<double>> cost(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) cost[i][j] = wmax - weight[i][j];
  const double INF = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(n + 1, 0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, INF);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      std::size_t i0 = p[j0], j1 = 0;
      double delta = INF;
      for (std::size_t j = 1; j <= n; ++j)
        if (!used[j]) {
          double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
          if (cur < minv[j]) {
            minv[j] = cur;
            way[j] = j0;
          }
          if (minv[j] < delta) {
            delta = minv[j];
            j1 = j;
          }
        }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  double total = 0;
  for (std::size_t j = 1; j <= n; ++j) total += weight[p[j] - 1][j - 1];
  return total;
}

inline double comb2(double x) { return x * (x - 1) / 2.0; }

}  // namespace detail

inline ClusterMetrics cluster_metrics(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth) {
  if (pred.empty() || pred.size() != truth.size())
    throw std::invalid_argument("cluster_metrics: empty or mismatched inputs");
  std::size_t n = pred.size();
  std::size_t R = *std::max_element(pred.begin(), pred.end()) + 1;
  std::size_t C = *std::max_element(truth.begin(), truth.end()) + 1;
  std::vector<std::vector<double>> cont(R, std::vector<double>(C, 0.0));
  for (std::size_t i = 0; i < n; ++i) cont[pred[i]][truth[i]] += 1.0;
  std::vector<double> a(R, 0), b(C, 0);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      a[r] += cont[r][c];
      b[c] += cont[r][c];
    }

  // ACC: optimal one-to-one cluster-to-class matching
  std::size_t dim = std::max(R, C);
  std::vector<std::vector<double>> w(dim, std::vector<double>(dim, 0.0));
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) w[r][c] = cont[r][c];
  ClusterMetrics m;
  m.acc = detail::hungarian_max(w) / static_cast<double>(n);

  // ARI
  double sum_ij = 0, sum_a = 0, sum_b = 0;
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) sum_ij += detail::comb2(cont[r][c]);
  for (std::size_t r = 0; r < R; ++r) sum_a += detail::comb2(a[r]);
  for (std::size_t c = 0; c < C; ++c) sum_b += detail::comb2(b[c]);
  double total2 = detail::comb2(static_cast<double>(n));
  double expected = sum_a * sum_b / total2;
  double max_index = 0.5 * (sum_a + sum_b);
  m.ari = (max_index - expected) == 0 ? 0.0 : (sum_ij - expected) / (max_index - expected);

  // NMI with arithmetic-mean normalization
  double hu = 0, hv = 0, mi = 0;
  for (std::size_t r = 0; r < R; ++r)
    if (a[r] > 0) hu -= a[r] / n * std::log(a[r] / n);
  for (std::size_t c = 0; c < C; ++c)
    if (b[c] > 0) hv -= b[c] / n * std::log(b[c] / n);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c)
      if (cont[r][c] > 0) mi += cont[r][c] / n * std::log(n * cont[r][c] / (a[r] * b[c]));
  double denom = 0.5 * (hu + hv);
  m.nmi = denom == 0 ? 0.0 : mi / denom;

  // FMI = TP / sqrt((TP+FP)(TP+FN))
  double tp = sum_ij;
  m.fmi = (sum_a == 0 || sum_b == 0) ? 0.0 : tp / std::sqrt(sum_a * sum_b);
  return m;
}

// k-means on frozen features with K = num_classes, best of several restarts
inline std::vector<std::size_t> cluster_features(const FeatureBank& bank, std::size_t restarts, Rng& rng) {
  bank.validate();
  auto res = kmeans_fit_restarts(bank.features, bank.dim, bank.num_classes, 50, restarts, rng);
  std::vector<std::size_t> pred(bank.size());
  for (std::size_t i = 0; i < bank.size(); ++i)
    pred[i] = kmeans_assign(res.centroids, bank.features.data() + i * bank.dim, bank.dim);
  return pred;
}

// ---------------------------------------------------------------------------
// robustness perturbations
// ---------------------------------------------------------------------------

enum class OcclusionMode { random, salient, non_salient };

inline Image occlusion_perturb(const Image& im, double ratio, OcclusionMode mode, std::size_t patch_size,
                               const std::vector<double>& attention, Rng& rng) {
  if (ratio < 0 || ratio > 1) throw std::invalid_argument("occlusion_perturb: ratio must be in [0,1]");
  if (im.h % patch_size != 0 || im.w % patch_size != 0)
    throw std::invalid_argument("occlusion_perturb: image not divisible by patch size");
  std::size_t gh = im.h / patch_size, gw = im.w / patch_size, N = gh * gw;
  if (mode != OcclusionMode::random && attention.size() != N)
    throw std::invalid_argument("occlusion_perturb: attention ranking must have one score per patch");
  std::size_t drop = static_cast<std::size_t>(std::lround(ratio * N));
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  if (mode == OcclusionMode::random) {
    for (std::size_t i = N; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
  } else if (mode == OcclusionMode::salient) {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return attention[x] > attention[y]; });
  } else {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return attention[x] < attention[y]; });
  }
  Image out = im;
  for (std::size_t d = 0; d < drop; ++d) {
    std::size_t py = order[d] / gw, px = order[d] % gw;
    for (std::size_t y = py * patch_size; y < (py + 1) * patch_size; ++y)
      for (std::size_t x = px * patch_size; x < (px + 1) * patch_size; ++x)
        for (std::size_t c = 0; c < im.c; ++c) out.at(y, x, c) = 0.0f;
  }
  return out;
}

inline Image shuffle_perturb(const Image& im, std::size_t grid_size, Rng& rng) {
  if (grid_size == 0) throw std::invalid_argument("shuffle_perturb: grid size must be positive");
  if (grid_size == 1) return im;
  if (im.h % grid_size != 0 || im.w % grid_size != 0)
    throw std::invalid_argument("shuffle_perturb: grid " + std::to_string(grid_size) +
                                " does not divide the image");
  std::size_t ch = im.h / grid_size, cw = im.w / grid_size;
  std::size_t n = grid_size * grid_size;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_int(i)]);
  Image out(im.h, im.w, im.c);
  for (std::size_t cell = 0; cell < n; ++cell) {
    std::size_t sy = (perm[cell] / grid_size) * ch, sx = (perm[cell] % grid_size) * cw;
    std::size_t dy = (cell / grid_size) * ch, dx = (cell % grid_size) * cw;
    for (std::size_t y = 0; y < ch; ++y)
      for (std::size_t x = 0; x < cw; ++x)
        for (std::size_t c = 0; c < im.c; ++c) out.at(dy + y, dx + x, c) = im.at(sy + y, sx + x, c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// sparse correspondence
// ---------------------------------------------------------------------------

struct Correspondence {
  std::size_t i = 0, j = 0;
  double score = 0;  // caller-supplied saliency of patch i
  double similarity = 0;
};

inline std::vector<Correspondence> sparse_correspondence(const std::vector<double>& feats_a,
                                                         const std::vector<double>& feats_b, std::size_t dim,
                                                         const std::vector<double>& saliency_a, std::size_t top_m) {
  if (dim == 0 || feats_a.empty() || feats_b.empty())
    throw std::invalid_argument("sparse_correspondence: empty inputs");
  if (feats_a.size() % dim != 0 || feats_b.size() % dim != 0)
    throw std::invalid_argument("sparse_correspondence: feature dim mismatch");
  std::size_t na = feats_a.size() / dim, nb = feats_b.size() / dim;
  if (saliency_a.size() != na)
    throw std::invalid_argument("sparse_correspondence: need one saliency score per source patch");
  auto norm = [&](const std::vector<double>& f, std::size_t i) {
    double s = 0;
    for (std::size_t d = 0; d < dim; ++d) s += f[i * dim + d] * f[i * dim + d];
    return std::sqrt(std::max(s, 1e-24));
  };
  std::vector<Correspondence> all(na);
  for (std::size_t i = 0; i < na; ++i) {
    std::size_t best = 0;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < nb; ++j) {
      double dot = 0;
      for (std::size_t d = 0; d < dim; ++d) dot += feats_a[i * dim + d] * feats_b[j * dim + d];
      double sim = dot / (norm(feats_a, i) * norm(feats_b, j));
      if (sim > best_sim) {  // strict: ties keep the smallest j
        best_sim = sim;
        best = j;
      }
    }
    all[i] = {i, best, saliency_a[i], best_sim};
  }
  std::stable_sort(all.begin(), all.end(), [](const Correspondence& a, const Correspondence& b) { return a.score > b.score; });
  if (top_m < all.size()) all.resize(top_m);
  return all;
}

// ---------------------------------------------------------------------------
// probe-safety helper
// ---------------------------------------------------------------------------

template <typename T>
std::uint64_t params_checksum(IbotModel<T>& model) {
  std::string bytes;
  for (auto& p : model.params()) {
    const auto& d = p.tensor->data();
    bytes.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(T));
  }
  return detail::fnv1a(bytes);
}

}  // namespace ibot
