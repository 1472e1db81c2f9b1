#pragma once

// Pixel grids in [0,1], HWC row-major. Float pixels keep augmentation exact
// and bit-reproducible.

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace ibot {

struct Image {
  std::size_t h = 0, w = 0, c = 0;
  std::vector<float> pix;  // h*w*c, [0,1]

  Image() = default;
  Image(std::size_t h_, std::size_t w_, std::size_t c_, float fill = 0.f)
      : h(h_), w(w_), c(c_), pix(h_ * w_ * c_, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t ch) { return pix[(y * w + x) * c + ch]; }
  float at(std::size_t y, std::size_t x, std::size_t ch) const { return pix[(y * w + x) * c + ch]; }
};

// Bilinear sample at continuous position (fy, fx) in pixel coordinates.
inline float bilinear_sample(const Image& im, double fy, double fx, std::size_t ch) {
  if (fy < 0) fy = 0;
  if (fx < 0) fx = 0;
  if (fy > static_cast<double>(im.h - 1)) fy = static_cast<double>(im.h - 1);
  if (fx > static_cast<double>(im.w - 1)) fx = static_cast<double>(im.w - 1);
  std::size_t y0 = static_cast<std::size_t>(fy);
  std::size_t x0 = static_cast<std::size_t>(fx);
  std::size_t y1 = y0 + 1 < im.h ? y0 + 1 : y0;
  std::size_t x1 = x0 + 1 < im.w ? x0 + 1 : x0;
  double wy = fy - static_cast<double>(y0);
  double wx = fx - static_cast<double>(x0);
  double v = (1 - wy) * ((1 - wx) * im.at(y0, x0, ch) + wx * im.at(y0, x1, ch)) +
             wy * ((1 - wx) * im.at(y1, x0, ch) + wx * im.at(y1, x1, ch));
  return static_cast<float>(v);
}

// Resize a rectangular window [y, y+wh) x [x, x+ww) of `src` to out_h x out_w.
// Corner-aligned sampling; a full-window identity resize copies exactly.
inline Image resize_window(const Image& src, double y, double x, double wh, double ww, std::size_t out_h,
                           std::size_t out_w) {
  if (wh <= 0 || ww <= 0) throw std::invalid_argument("resize_window: degenerate window");
  Image out(out_h, out_w, src.c);
  for (std::size_t oy = 0; oy < out_h; ++oy)
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      double fy = out_h > 1 ? y + (wh - 1) * (static_cast<double>(oy) / (out_h - 1)) : y + (wh - 1) / 2;
      double fx = out_w > 1 ? x + (ww - 1) * (static_cast<double>(ox) / (out_w - 1)) : x + (ww - 1) / 2;
      for (std::size_t ch = 0; ch < src.c; ++ch) out.at(oy, ox, ch) = bilinear_sample(src, fy, fx, ch);
    }
  return out;
}

inline Image resize(const Image& src, std::size_t out_h, std::size_t out_w) {
  return resize_window(src, 0, 0, static_cast<double>(src.h), static_cast<double>(src.w), out_h, out_w);
}

}  // namespace ibot
