#pragma once

// Multi-crop view generation, blockwise masking, the random prediction-ratio
// policy, and effective-epoch accounting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "ibot/image.hpp"
#include "ibot/rng.hpp"

namespace ibot {

struct CropConfig {
  std::size_t global_count = 2;
  std::size_t global_size = 32;
  std::size_t local_count = 10;
  std::size_t local_size = 16;
  double scale_split = 0.32;     // local crops from (local_scale_min, s), global from (s, 1)
  double local_scale_min = 0.05;
  // photometric recipe
  bool augment = true;
  double hflip_p = 0.5;
  double jitter = 0.4;       // brightness/contrast amplitude
  double grayscale_p = 0.2;

  void validate() const {
    if (!(0 < local_scale_min && local_scale_min < scale_split && scale_split <= 1))
      throw std::invalid_argument("CropConfig: need 0 < local_scale_min < scale_split <= 1");
    if (local_count > 0 && scale_split >= 1)
      throw std::invalid_argument("CropConfig: local crops need scale_split < 1");
  }
};

struct CropSet {
  std::vector<Image> globals;
  std::vector<Image> locals;
};

struct RatioPolicy {
  double p_zero = 0.5;
  double range_lo = 0.1;
  double range_hi = 0.5;

  void validate() const {
    if (!(0 <= range_lo && range_lo <= range_hi && range_hi <= 1))
      throw std::invalid_argument("RatioPolicy: need 0 <= range_lo <= range_hi <= 1");
  }
};

struct MaskBlock {
  std::size_t y, x, h, w;
};

struct MaskSpec {
  std::size_t grid_h = 0, grid_w = 0;
  std::vector<std::uint8_t> mask;   // grid_h * grid_w
  double requested_ratio = 0;
  std::vector<MaskBlock> blocks;    // the rectangles the sampler placed

  std::size_t count() const {
    std::size_t c = 0;
    for (auto m : mask) c += m;
    return c;
  }
  double realized_ratio() const { return mask.empty() ? 0.0 : static_cast<double>(count()) / mask.size(); }
};

// ---------------------------------------------------------------------------
// prediction-ratio policy
// ---------------------------------------------------------------------------

inline double sample_ratio(const RatioPolicy& policy, Rng& rng) {
  policy.validate();
  if (rng.bernoulli(policy.p_zero)) return 0.0;
  return rng.uniform(policy.range_lo, policy.range_hi);
}

// ---------------------------------------------------------------------------
// blockwise masking
// ---------------------------------------------------------------------------

// BEiT-style sampler scaled to desk grids: min block area 4 tokens at 14x14,
// proportionally smaller below.
inline std::size_t default_min_block(std::size_t num_tokens) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(4.0 * num_tokens / 196.0)));
}

inline MaskSpec blockwise_mask(std::size_t grid_h, std::size_t grid_w, double r, Rng& rng,
                               std::size_t min_block = 0) {
  if (r < 0 || r > 1) throw std::invalid_argument("blockwise_mask: ratio must be in [0,1]");
  MaskSpec spec;
  spec.grid_h = grid_h;
  spec.grid_w = grid_w;
  spec.requested_ratio = r;
  std::size_t n = grid_h * grid_w;
  spec.mask.assign(n, 0);
  std::size_t target = static_cast<std::size_t>(std::lround(r * n));
  if (target == 0) return spec;
  if (min_block == 0) min_block = default_min_block(n);

  std::size_t count = 0;
  int stagnant = 0;
  const double log_lo = std::log(0.3), log_hi = std::log(1.0 / 0.3);
  while (count < target && stagnant < 200) {
    std::size_t remaining = target - count;
    // area at least min_block, capped to the remaining budget
    std::size_t area_lo = std::min<std::size_t>(min_block, remaining);
    std::size_t area = area_lo + rng.uniform_int(remaining - area_lo + 1);
    double aspect = std::exp(rng.uniform(log_lo, log_hi));
    std::size_t bh = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(std::sqrt(area * aspect))), 1, grid_h);
    std::size_t bw = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(std::sqrt(area / aspect))), 1, grid_w);
    std::size_t y = rng.uniform_int(grid_h - bh + 1);
    std::size_t x = rng.uniform_int(grid_w - bw + 1);
    std::size_t fresh = 0;
    for (std::size_t yy = y; yy < y + bh; ++yy)
      for (std::size_t xx = x; xx < x + bw; ++xx)
        if (!spec.mask[yy * grid_w + xx]) ++fresh;
    if (fresh == 0 || fresh > remaining) {
      ++stagnant;
      continue;
    }
    stagnant = 0;
    for (std::size_t yy = y; yy < y + bh; ++yy)
      for (std::size_t xx = x; xx < x + bw; ++xx) spec.mask[yy * grid_w + xx] = 1;
    spec.blocks.push_back({y, x, bh, bw});
    count += fresh;
  }
  // random placement stalled near the budget: finish with single cells
  for (std::size_t i = 0; i < n && count < target; ++i) {
    if (!spec.mask[i]) {
      spec.mask[i] = 1;
      spec.blocks.push_back({i / grid_w, i % grid_w, 1, 1});
      ++count;
    }
  }
  return spec;
}

// uniform-random (non-blockwise) masking, kept as a test baseline
inline MaskSpec uniform_mask(std::size_t grid_h, std::size_t grid_w, double r, Rng& rng) {
  MaskSpec spec;
  spec.grid_h = grid_h;
  spec.grid_w = grid_w;
  spec.requested_ratio = r;
  std::size_t n = grid_h * grid_w;
  spec.mask.assign(n, 0);
  std::size_t target = static_cast<std::size_t>(std::lround(r * n));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
  for (std::size_t i = 0; i < target; ++i) {
    spec.mask[order[i]] = 1;
    spec.blocks.push_back({order[i] / grid_w, order[i] % grid_w, 1, 1});
  }
  return spec;
}

// ---------------------------------------------------------------------------
// multi-crop sampling
// ---------------------------------------------------------------------------

namespace detail {

inline void photometric(Image& im, const CropConfig& cfg, Rng& rng) {
  if (!cfg.augment) return;
  if (rng.bernoulli(cfg.hflip_p)) {
    for (std::size_t y = 0; y < im.h; ++y)
      for (std::size_t x = 0; x < im.w / 2; ++x)
        for (std::size_t ch = 0; ch < im.c; ++ch) std::swap(im.at(y, x, ch), im.at(y, im.w - 1 - x, ch));
  }
  float brightness = static_cast<float>(rng.uniform(-cfg.jitter, cfg.jitter));
  float contrast = static_cast<float>(rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter));
  float mean = 0;
  for (auto p : im.pix) mean += p;
  mean /= static_cast<float>(im.pix.size());
  for (auto& p : im.pix) p = std::clamp((p - mean) * contrast + mean + brightness, 0.f, 1.f);
  if (im.c == 3 && rng.bernoulli(cfg.grayscale_p)) {
    for (std::size_t y = 0; y < im.h; ++y)
      for (std::size_t x = 0; x < im.w; ++x) {
        float g = 0.299f * im.at(y, x, 0) + 0.587f * im.at(y, x, 1) + 0.114f * im.at(y, x, 2);
        im.at(y, x, 0) = im.at(y, x, 1) = im.at(y, x, 2) = g;
      }
  }
}

inline Image random_resized_crop(const Image& src, double scale_lo, double scale_hi, std::size_t out_size, Rng& rng) {
  double src_area = static_cast<double>(src.h) * src.w;
  for (int attempt = 0; attempt < 100; ++attempt) {
    double area = src_area * rng.uniform(scale_lo, scale_hi);
    if (area >= src_area * (1 - 1e-12)) {
      // full-area crop degenerates to a plain resize of the original
      return resize_window(src, 0, 0, static_cast<double>(src.h), static_cast<double>(src.w), out_size, out_size);
    }
    double aspect = std::exp(rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
    double wh = std::sqrt(area / aspect);
    double ww = std::sqrt(area * aspect);
    if (wh < 1 || ww < 1) continue;
    if (wh > src.h || ww > src.w) continue;
    double y = rng.uniform(0.0, src.h - wh);
    double x = rng.uniform(0.0, src.w - ww);
    return resize_window(src, y, x, wh, ww, out_size, out_size);
  }
  throw std::runtime_error("random_resized_crop: no valid crop after 100 attempts");
}

}  // namespace detail

inline CropSet sample_crops(const Image& image, const CropConfig& cfg, Rng& rng) {
  cfg.validate();
  if (image.h < 2 || image.w < 2) throw std::invalid_argument("sample_crops: image too small");
  CropSet set;
  for (std::size_t i = 0; i < cfg.global_count; ++i) {
    Image g = detail::random_resized_crop(image, cfg.scale_split, 1.0, cfg.global_size, rng);
    detail::photometric(g, cfg, rng);
    set.globals.push_back(std::move(g));
  }
  for (std::size_t i = 0; i < cfg.local_count; ++i) {
    Image l = detail::random_resized_crop(image, cfg.local_scale_min, cfg.scale_split, cfg.local_size, rng);
    detail::photometric(l, cfg, rng);
    set.locals.push_back(std::move(l));
  }
  return set;
}

// ---------------------------------------------------------------------------
// effective-epoch accounting
// ---------------------------------------------------------------------------

// actual epochs scaled by total view area per image relative to one global view
inline double effective_epochs(double actual_epochs, const CropConfig& cfg) {
  if (actual_epochs <= 0) throw std::invalid_argument("effective_epochs: epochs must be positive");
  double ratio = static_cast<double>(cfg.local_size) / static_cast<double>(cfg.global_size);
  return actual_epochs * (static_cast<double>(cfg.global_count) + cfg.local_count * ratio * ratio);
}

}  // namespace ibot
