#include "doctest.h"

#include <cmath>

#include "ibot/vit.hpp"

using namespace ibot;

namespace {

Image random_image(std::size_t size, Rng& rng, std::size_t c = 3) {
  Image im(size, size, c);
  for (auto& p : im.pix) p = static_cast<float>(rng.uniform());
  return im;
}

ViTConfig tiny_cfg() {
  ViTConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.embed_dim = 8;
  c.depth = 2;
  c.heads = 2;
  return c;
}

}  // namespace

TEST_CASE("patchify token counts") {
  ViTConfig big;
  big.image_size = 224;
  big.patch_size = 16;
  Rng rng(1);
  auto im = random_image(224, rng);
  CHECK(patchify<float>(im, big).dim(0) == 196);

  ViTConfig micro = vit_micro();
  auto im2 = random_image(32, rng);
  CHECK(patchify<float>(im2, micro).dim(0) == 16);
  CHECK(micro.num_patches() == (micro.image_size / micro.patch_size) * (micro.image_size / micro.patch_size));
}

TEST_CASE("patchify of a single-patch image is the flattened image") {
  ViTConfig c;
  c.image_size = 16;
  c.patch_size = 16;
  Image im(16, 16, 3, 0.25f);
  auto p = patchify<float>(im, c);
  REQUIRE(p.shape() == Shape{1, 16 * 16 * 3});
  for (std::size_t i = 0; i < p.numel(); ++i) CHECK(p[i] == 0.25f);
}

TEST_CASE("patchify is lossless") {
  Rng rng(3);
  auto cfg = vit_micro();
  auto im = random_image(32, rng);
  auto back = unpatchify(patchify<float>(im, cfg), cfg);
  CHECK(back.pix == im.pix);
}

TEST_CASE("patchify rejects a size mismatch") {
  Rng rng(4);
  auto im = random_image(16, rng);
  CHECK_THROWS_AS(patchify<float>(im, vit_micro()), std::invalid_argument);
}

TEST_CASE("embed_with_mask zero mask is bitwise the unmasked embedding") {
  Rng rng(5);
  auto cfg = tiny_cfg();
  auto p = BackboneParams<float>::init(cfg, rng);
  auto patches = patchify_batch<float>({random_image(16, rng)}, cfg);
  auto plain = embed_with_mask(patches, {}, p);
  std::vector<std::uint8_t> zero_mask(cfg.num_patches(), 0);
  auto masked = embed_with_mask(patches, zero_mask, p);
  CHECK(plain.data() == masked.data());
}

TEST_CASE("embed_with_mask full mask substitutes the mask token everywhere") {
  Rng rng(6);
  auto cfg = tiny_cfg();
  auto p = BackboneParams<float>::init(cfg, rng);
  auto patches = patchify_batch<float>({random_image(16, rng)}, cfg);
  std::vector<std::uint8_t> ones(cfg.num_patches(), 1);
  auto seq = embed_with_mask(patches, ones, p);
  std::size_t D = cfg.embed_dim;
  for (std::size_t i = 0; i < cfg.num_patches(); ++i)
    for (std::size_t d = 0; d < D; ++d) {
      float expected = p.mask_token[d] + p.pos_embed[(i + 1) * D + d];
      CHECK(seq[(i + 1) * D + d] == doctest::Approx(expected));
    }
}

TEST_CASE("embed_with_mask with a single masked slot differs only there") {
  Rng rng(7);
  auto cfg = tiny_cfg();
  auto p = BackboneParams<float>::init(cfg, rng);
  auto patches = patchify_batch<float>({random_image(16, rng)}, cfg);
  auto plain = embed_with_mask(patches, {}, p);
  std::size_t N = cfg.num_patches(), D = cfg.embed_dim;
  std::vector<std::uint8_t> mask(N, 0);
  mask[2] = 1;
  auto seq = embed_with_mask(patches, mask, p);
  for (std::size_t tok = 0; tok < N + 1; ++tok) {
    bool expect_diff = (tok == 3);  // slot 2 sits at sequence index 3 (CLS first)
    bool differs = false;
    for (std::size_t d = 0; d < D; ++d)
      if (seq[tok * D + d] != plain[tok * D + d]) differs = true;
    CHECK(differs == expect_diff);
  }
}

TEST_CASE("embed_with_mask rejects wrong mask length") {
  Rng rng(8);
  auto cfg = tiny_cfg();
  auto p = BackboneParams<float>::init(cfg, rng);
  auto patches = patchify_batch<float>({random_image(16, rng)}, cfg);
  CHECK_THROWS_AS(embed_with_mask(patches, std::vector<std::uint8_t>(3, 0), p), std::invalid_argument);
}

TEST_CASE("mask token receives gradient iff something is masked") {
  Rng rng(9);
  auto cfg = tiny_cfg();
  auto p = BackboneParams<float>::init(cfg, rng);
  auto patches = patchify_batch<float>({random_image(16, rng)}, cfg);

  std::vector<std::uint8_t> mask(cfg.num_patches(), 0);
  backward(sum_all(vit_forward(embed_with_mask(patches, mask, p), p).cls));
  for (auto g : p.mask_token.grad()) CHECK(g == 0.f);

  mask[1] = 1;
  backward(sum_all(vit_forward(embed_with_mask(patches, mask, p), p).patches));
  bool any = false;
  for (auto g : p.mask_token.grad()) any = any || g != 0.f;
  CHECK(any);
}

TEST_CASE("zero-depth forward is layer norm of the embeddings") {
  Rng rng(10);
  auto cfg = tiny_cfg();
  cfg.depth = 0;
  auto p = BackboneParams<float>::init(cfg, rng);
  auto patches = patchify_batch<float>({random_image(16, rng)}, cfg);
  auto seq = embed_with_mask(patches, {}, p);
  auto res = vit_forward(seq, p);
  auto expect = layer_norm(seq, p.ln_f_g, p.ln_f_b);
  std::size_t D = cfg.embed_dim;
  for (std::size_t d = 0; d < D; ++d) CHECK(res.cls[d] == doctest::Approx(expect[d]));
  for (std::size_t i = 0; i < cfg.num_patches() * D; ++i) CHECK(res.patches[i] == doctest::Approx(expect[D + i]));
}

TEST_CASE("forward is deterministic") {
  Rng rng(11);
  auto cfg = tiny_cfg();
  auto p = BackboneParams<float>::init(cfg, rng);
  auto patches = patchify_batch<float>({random_image(16, rng)}, cfg);
  auto a = vit_forward(embed_with_mask(patches, {}, p), p);
  auto b = vit_forward(embed_with_mask(patches, {}, p), p);
  CHECK(a.cls.data() == b.cls.data());
  CHECK(a.patches.data() == b.patches.data());
}

TEST_CASE("permuting patch slots with their positions permutes outputs and fixes cls") {
  Rng rng(12);
  auto cfg = tiny_cfg();
  auto p = BackboneParams<float>::init(cfg, rng);
  auto patches = patchify_batch<float>({random_image(16, rng)}, cfg);
  auto seq = embed_with_mask(patches, {}, p);
  auto base = vit_forward(seq, p);

  // swap token slots 1 and 3 of the embedded sequence (positions travel along)
  std::size_t D = cfg.embed_dim;
  auto swapped = seq.detach();
  for (std::size_t d = 0; d < D; ++d) std::swap(swapped.data()[1 * D + d], swapped.data()[3 * D + d]);
  auto perm = vit_forward(swapped, p);

  for (std::size_t d = 0; d < D; ++d) {
    CHECK(perm.cls[d] == doctest::Approx(base.cls[d]).epsilon(1e-5));
    CHECK(perm.patches[0 * D + d] == doctest::Approx(base.patches[2 * D + d]).epsilon(1e-5));
    CHECK(perm.patches[2 * D + d] == doctest::Approx(base.patches[0 * D + d]).epsilon(1e-5));
    CHECK(perm.patches[1 * D + d] == doctest::Approx(base.patches[1 * D + d]).epsilon(1e-5));
  }
}

TEST_CASE("positional interpolation identity and bilinear oracle") {
  Rng rng(13);
  auto pos = TensorD::randn({5, 3}, rng);  // base side 2, D=3
  auto same = interpolate_pos_embed(pos, 2, 2);
  CHECK(same.data() == pos.data());

  // corner values 0,1,2,3 in one dimension; request side 3: center = mean = 1.5
  auto corners = TensorD::from({5, 1}, {42.0, 0.0, 1.0, 2.0, 3.0});
  auto up = interpolate_pos_embed(corners, 2, 3);
  REQUIRE(up.shape() == Shape{10, 1});
  CHECK(up[0] == 42.0);                          // CLS untouched
  CHECK(up[1 + 4] == doctest::Approx(1.5));      // center of the 3x3 grid
  CHECK(up[1 + 0] == doctest::Approx(0.0));      // corners preserved
  CHECK(up[1 + 8] == doctest::Approx(3.0));

  auto down = interpolate_pos_embed(corners, 2, 1);
  REQUIRE(down.shape() == Shape{2, 1});
  CHECK(down[1] == doctest::Approx(1.5));  // bilinear sample at the grid center
}

TEST_CASE("attention maps are probability rows") {
  Rng rng(14);
  auto cfg = tiny_cfg();
  auto p = BackboneParams<float>::init(cfg, rng);
  auto im = random_image(16, rng);
  for (std::size_t l = 0; l < cfg.depth; ++l)
    for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
      auto row = attention_map(im, p, l, hd);
      float sum = 0;
      for (auto v : row) {
        CHECK(v >= 0.f);
        sum += v;
      }
      CHECK(std::abs(sum - 1.f) < 1e-6f);
    }
  CHECK_THROWS_AS(attention_map(im, p, cfg.depth, 0), std::invalid_argument);
  CHECK_THROWS_AS(attention_map(im, p, 0, cfg.heads), std::invalid_argument);
}

TEST_CASE("single-patch attention map is [1]") {
  ViTConfig c;
  c.image_size = 8;
  c.patch_size = 8;
  c.embed_dim = 8;
  c.depth = 1;
  c.heads = 2;
  Rng rng(15);
  auto p = BackboneParams<float>::init(c, rng);
  auto im = random_image(8, rng);
  auto row = attention_map(im, p, 0, 0);
  REQUIRE(row.size() == 1);
  CHECK(row[0] == doctest::Approx(1.f));
}

TEST_CASE("attention map matches a from-weights recomputation") {
  Rng rng(16);
  auto cfg = tiny_cfg();
  auto p = BackboneParams<double>::init(cfg, rng);
  auto im = random_image(16, rng);

  // independent recomputation of layer-0 attention from extracted weights
  auto patches = patchify_batch<double>({im}, cfg);
  auto seq = embed_with_mask(patches, {}, p);
  std::size_t S = cfg.num_patches() + 1, D = cfg.embed_dim, Hn = cfg.heads, dh = D / Hn;
  auto& b = p.blocks[0];
  std::vector<double> x(S * D);
  for (std::size_t t = 0; t < S; ++t) {
    double mu = 0, var = 0;
    for (std::size_t d = 0; d < D; ++d) mu += seq[t * D + d];
    mu /= D;
    for (std::size_t d = 0; d < D; ++d) var += (seq[t * D + d] - mu) * (seq[t * D + d] - mu);
    var /= D;
    for (std::size_t d = 0; d < D; ++d)
      x[t * D + d] = b.ln1_g[d] * (seq[t * D + d] - mu) / std::sqrt(var + 1e-6) + b.ln1_b[d];
  }
  std::size_t head = 1;
  std::vector<double> q(S * dh), k(S * dh);
  for (std::size_t t = 0; t < S; ++t)
    for (std::size_t d = 0; d < dh; ++d) {
      double accq = b.qkv_b[head * dh + d], acck = b.qkv_b[D + head * dh + d];
      for (std::size_t e = 0; e < D; ++e) {
        accq += x[t * D + e] * b.qkv_w[e * 3 * D + head * dh + d];
        acck += x[t * D + e] * b.qkv_w[e * 3 * D + D + head * dh + d];
      }
      q[t * dh + d] = accq;
      k[t * dh + d] = acck;
    }
  std::vector<double> scores(S);
  double mx = -1e300;
  for (std::size_t j = 0; j < S; ++j) {
    double s = 0;
    for (std::size_t d = 0; d < dh; ++d) s += q[0 * dh + d] * k[j * dh + d];
    scores[j] = s / std::sqrt(static_cast<double>(dh));
    mx = std::max(mx, scores[j]);
  }
  double z = 0;
  for (auto& s : scores) {
    s = std::exp(s - mx);
    z += s;
  }
  double patch_sum = 0;
  for (std::size_t j = 1; j < S; ++j) patch_sum += scores[j] / z;

  auto row = attention_map(im, p, 0, head);
  for (std::size_t j = 1; j < S; ++j) CHECK(row[j - 1] == doctest::Approx(scores[j] / z / patch_sum).epsilon(1e-9));
}
