// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "cvlm/vision.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cvlm/projector.hpp"
#include "support.hpp"

namespace cvlm {
namespace {

ModelManifest small_manifest(std::size_t image, std::size_t patch, std::size_t layers,
                             int feature_layer) {
  auto m = testing::toy_manifest();
  m.vision.image_size = image;
  m.vision.patch_size = patch;
  m.vision.hidden = 16;
  m.vision.heads = 2;
  m.vision.mlp_inner = 32;
  m.vision.layers = layers;
  m.vision.feature_layer = feature_layer;
  m.validate();
  return m;
}

// Random weights at a scale where every sub-layer matters.
ParamMap<float> loud_weights(const ModelManifest& m, std::uint64_t seed) {
  auto w = init_random(m, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 0.5f);
  for (auto& [name, t] : w) {
    for (auto& v : t.mutable_data()) v = n(rng);
  }
  return w;
}

TEST(Preprocess, SameSizeOnlyNormalizes) {
  PreprocessConfig cfg;
  RgbImage img{4, 4, std::vector<std::uint8_t>(48)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = static_cast<std::uint8_t>(i * 5);
  auto t = preprocess(img, 4, cfg);
  ASSERT_EQ(t.shape(), (Shape{3, 4, 4}));
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < 4; ++y) {
      for (std::size_t x = 0; x < 4; ++x) {
        const float expect = (img.at(y, x, c) / 255.0f - cfg.means[c]) / cfg.stds[c];
        EXPECT_NEAR(t.data()[(c * 4 + y) * 4 + x], expect, 1e-6);
      }
    }
  }
}

TEST(Preprocess, DownscalesToImageSize) {
  auto t = preprocess(testing::pattern_image(3, 64, 64), 32, PreprocessConfig{});
  EXPECT_EQ(t.shape(), (Shape{3, 32, 32}));
  auto wide = preprocess(testing::pattern_image(3, 64, 20), 32, PreprocessConfig{});
  EXPECT_EQ(wide.shape(), (Shape{3, 32, 32}));
}

TEST(Preprocess, ExactTwoXDecimationAveragesPairs) {
  RgbImage img{4, 4, std::vector<std::uint8_t>(48)};
  for (std::size_t y = 0; y < 4; ++y) {
    for (std::size_t x = 0; x < 4; ++x) {
      for (std::size_t c = 0; c < 3; ++c)
        img.pixels[(y * 4 + x) * 3 + c] = static_cast<std::uint8_t>(10 * (y * 4 + x));
    }
  }
  PreprocessConfig cfg;
  cfg.means = {0, 0, 0};
  cfg.stds = {1, 1, 1};
  auto t = preprocess(img, 2, cfg);
  // Half-pixel centers land between source pixels: the mean of each 2x2 block.
  EXPECT_NEAR(t.data()[0], (0 + 10 + 40 + 50) / 4.0 / 255.0, 1e-6);
  EXPECT_NEAR(t.data()[3], (100 + 110 + 140 + 150) / 4.0 / 255.0, 1e-6);
}

TEST(Preprocess, MeanColoredImageIsZero) {
  PreprocessConfig cfg;
  cfg.means = {100 / 255.0f, 50 / 255.0f, 200 / 255.0f};
  RgbImage img{8, 8, {}};
  for (int i = 0; i < 64; ++i) img.pixels.insert(img.pixels.end(), {100, 50, 200});
  auto t = preprocess(img, 8, cfg);
  for (float v : t.data()) EXPECT_NEAR(v, 0.0f, 1e-6);
}

TEST(Preprocess, PadPolicyCentersAndFillsWithMean) {
  PreprocessConfig cfg;
  cfg.resize = ResizePolicy::kPad;
  RgbImage img{4, 2, std::vector<std::uint8_t>(24, 255)};
  auto t = preprocess(img, 4, cfg);
  // Rows 0 and 3 are padding (mean color -> 0), rows 1-2 are the image.
  for (std::size_t x = 0; x < 4; ++x) {
    EXPECT_NEAR(t.data()[x], 0.0f, 1e-5);
    EXPECT_GT(t.data()[4 + x], 1.0f);
  }
}

TEST(Image, PngAndJpegRoundTrip) {
  auto img = testing::pattern_image(5, 16, 12);
  auto png = decode_image(encode_png(img));
  EXPECT_EQ(png.width, 16u);
  EXPECT_EQ(png.height, 12u);
  EXPECT_EQ(png.pixels, img.pixels);
  auto jpg = decode_image(encode_jpeg(img, 95));
  EXPECT_EQ(jpg.width, 16u);
  EXPECT_EQ(jpg.height, 12u);
}

TEST(Image, UndecodableBytes) {
  const std::vector<std::uint8_t> junk = {1, 2, 3, 4, 5};
  try {
    decode_image(junk);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUndecodableImage);
  }
  auto png = encode_png(testing::pattern_image(1));
  png.resize(png.size() / 2);
  EXPECT_THROW(decode_image(png), Error);
}

TEST(Patchify, ReferenceGridHas576Rows) {
  auto m = testing::toy_manifest();
  m.vision.image_size = 336;
  m.vision.patch_size = 14;
  EXPECT_EQ(m.vision.num_patches(), 576u);
  m.vision.image_size = 672;
  EXPECT_EQ(m.vision.num_patches(), 4u * 576u);
}

TEST(Patchify, ToyGridAndLocality) {
  auto m = small_manifest(8, 4, 2, -2);
  std::vector<float> img(3 * 8 * 8);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < 8; ++y) {
      for (std::size_t x = 0; x < 8; ++x)
        img[(c * 8 + y) * 8 + x] = static_cast<float>((y / 4) * 2 + x / 4);
    }
  }
  auto p = patchify(Tensor<float>({3, 8, 8}, img), m.vision);
  ASSERT_EQ(p.shape(), (Shape{4, 48}));
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t k = 0; k < 48; ++k) EXPECT_EQ(p.data()[r * 48 + k], static_cast<float>(r));
  }
}

TEST(EncodeImage, ShapeAndDeterminism) {
  auto m = small_manifest(8, 4, 2, -2);
  auto w = init_random(m, 3);
  auto a = preprocess(testing::pattern_image(1, 8, 8), 8, m.preprocessing);
  auto b = preprocess(testing::pattern_image(6, 8, 8), 8, m.preprocessing);
  auto fa = encode_image(a, w, m.vision);
  EXPECT_EQ(fa.shape(), (Shape{4, 16}));
  auto fa2 = encode_image(a, w, m.vision);
  EXPECT_TRUE(std::equal(fa.data().begin(), fa.data().end(), fa2.data().begin()));
  auto fb = encode_image(b, w, m.vision);
  EXPECT_FALSE(std::equal(fa.data().begin(), fa.data().end(), fb.data().begin()));
}

// Straight-line reimplementation in double with explicit loops.
std::vector<double> naive_vision(const std::vector<float>& img, const ParamMap<float>& w,
                                 const VisionConfig& cfg) {
  const std::size_t s = cfg.image_size, p = cfg.patch_size, g = s / p, n = g * g, h = cfg.hidden;
  const std::size_t heads = cfg.heads, hd = h / heads, pd = 3 * p * p;
  auto W = [&](const std::string& name) { return w.at(name).data(); };
  auto ln = [&](std::vector<double> x, const std::string& pre) {
    for (std::size_t r = 0; r < x.size() / h; ++r) {
      double mean = 0, var = 0;
      for (std::size_t i = 0; i < h; ++i) mean += x[r * h + i];
      mean /= h;
      for (std::size_t i = 0; i < h; ++i) var += (x[r * h + i] - mean) * (x[r * h + i] - mean);
      var /= h;
      for (std::size_t i = 0; i < h; ++i) {
        x[r * h + i] =
            (x[r * h + i] - mean) / std::sqrt(var + cfg.eps) * W(pre + ".w")[i] + W(pre + ".b")[i];
      }
    }
    return x;
  };
  auto lin = [&](const std::vector<double>& x, std::size_t in, std::size_t out,
                 const std::string& pre) {
    const std::size_t rows = x.size() / in;
    std::vector<double> y(rows * out);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < out; ++j) {
        double acc = W(pre + ".b")[j];
        for (std::size_t k = 0; k < in; ++k) acc += x[r * in + k] * W(pre + ".w")[k * out + j];
        y[r * out + j] = acc;
      }
    }
    return y;
  };
  std::vector<double> patches(n * pd);
  for (std::size_t gy = 0; gy < g; ++gy) {
    for (std::size_t gx = 0; gx < g; ++gx) {
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t py = 0; py < p; ++py) {
          for (std::size_t px = 0; px < p; ++px) {
            patches[(gy * g + gx) * pd + (c * p + py) * p + px] =
                img[(c * s + gy * p + py) * s + gx * p + px];
          }
        }
      }
    }
  }
  std::vector<double> emb(n * h);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < h; ++j) {
      double acc = W("vision.patch_embed.b")[j];
      for (std::size_t k = 0; k < pd; ++k)
        acc += patches[r * pd + k] * W("vision.patch_embed.w")[k * h + j];
      emb[r * h + j] = acc;
    }
  }
  std::vector<double> x((n + 1) * h);
  for (std::size_t j = 0; j < h; ++j) x[j] = W("vision.class_token")[j];
  for (std::size_t i = 0; i < n * h; ++i) x[h + i] = emb[i];
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += W("vision.pos_embed")[i];
  x = ln(x, "vision.pre_ln");
  const std::size_t rows = n + 1;
  for (std::size_t b = 0; b < cfg.blocks_used(); ++b) {
    const std::string pre = "vision.block" + std::to_string(b);
    auto a_in = ln(x, pre + ".ln1");
    auto qkv = lin(a_in, h, 3 * h, pre + ".attn.qkv");
    std::vector<double> att(rows * h);
    for (std::size_t hh = 0; hh < heads; ++hh) {
      for (std::size_t i = 0; i < rows; ++i) {
        std::vector<double> sc(rows);
        double mx = -1e300;
        for (std::size_t j = 0; j < rows; ++j) {
          double d = 0;
          for (std::size_t k = 0; k < hd; ++k)
            d += qkv[i * 3 * h + hh * hd + k] * qkv[j * 3 * h + h + hh * hd + k];
          sc[j] = d / std::sqrt(double(hd));
          mx = std::max(mx, sc[j]);
        }
        double z = 0;
        for (auto& v : sc) z += (v = std::exp(v - mx));
        for (std::size_t k = 0; k < hd; ++k) {
          double acc = 0;
          for (std::size_t j = 0; j < rows; ++j)
            acc += sc[j] / z * qkv[j * 3 * h + 2 * h + hh * hd + k];
          att[i * h + hh * hd + k] = acc;
        }
      }
    }
    auto o = lin(att, h, h, pre + ".attn.out");
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += o[i];
    auto f = lin(ln(x, pre + ".ln2"), h, cfg.mlp_inner, pre + ".mlp.fc1");
    for (auto& v : f)
      v = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
    auto m = lin(f, cfg.mlp_inner, h, pre + ".mlp.fc2");
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += m[i];
  }
  return std::vector<double>(x.begin() + static_cast<std::ptrdiff_t>(h), x.end());
}

TEST(EncodeImage, MatchesNaiveOracleOneLayer) {
  auto m = small_manifest(8, 4, 1, -1);
  auto w = loud_weights(m, 17);
  auto img = preprocess(testing::pattern_image(9, 8, 8), 8, m.preprocessing);
  auto got = encode_image(img, w, m.vision);
  auto want = naive_vision(std::vector<float>(img.data().begin(), img.data().end()), w, m.vision);
  ASSERT_EQ(got.numel(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got.data()[i], want[i], 1e-5) << i;
}

TEST(EncodeImage, FeatureLayerSelectsPenultimateBlock) {
  auto m = small_manifest(8, 4, 3, -2);
  EXPECT_EQ(m.vision.blocks_used(), 2u);
  auto w = loud_weights(m, 5);
  auto img = preprocess(testing::pattern_image(2, 8, 8), 8, m.preprocessing);
  auto want = naive_vision(std::vector<float>(img.data().begin(), img.data().end()), w, m.vision);
  auto got = encode_image(img, w, m.vision);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got.data()[i], want[i], 1e-4) << i;
}

TEST(Projector, ShapeBiasAndRowIndependence) {
  auto m = testing::toy_manifest();
  auto w = init_random(m, 2);
  const std::size_t vh = m.vision.hidden, lh = m.decoder.hidden;
  std::mt19937_64 rng(4);
  std::normal_distribution<float> n;
  std::vector<float> feats(4 * vh);
  for (auto& v : feats) v = n(rng);
  auto out = project(Tensor<float>({4, vh}, feats), w);
  EXPECT_EQ(out.shape(), (Shape{4, lh}));

  // Permuting rows permutes outputs.
  std::vector<float> swapped(feats.begin() + vh, feats.begin() + 2 * vh);
  swapped.insert(swapped.end(), feats.begin(), feats.begin() + vh);
  swapped.insert(swapped.end(), feats.begin() + 2 * vh, feats.end());
  auto out2 = project(Tensor<float>({4, vh}, swapped), w);
  for (std::size_t j = 0; j < lh; ++j) {
    EXPECT_EQ(out2.data()[j], out.data()[lh + j]);
    EXPECT_EQ(out2.data()[lh + j], out.data()[j]);
  }

  // Zero weights with bias c.
  auto z = w;
  for (const char* name : {"projector.w1", "projector.b1", "projector.w2"}) {
    z[name] = Tensor<float>::zeros(w.at(name).shape());
  }
  z["projector.b2"] = Tensor<float>::full({lh}, 0.75f);
  auto c = project(Tensor<float>({4, vh}, feats), z);
  for (float v : c.data()) EXPECT_EQ(v, 0.75f);
}

TEST(Projector, GradientMatchesFiniteDifferences) {
  auto m = testing::toy_manifest();
  auto w = cast_params<double>(init_random(m, 8));
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n;
  std::vector<double> feats(3 * m.vision.hidden), probe(3 * m.decoder.hidden);
  for (auto& v : feats) v = n(rng);
  for (auto& v : probe) v = n(rng);
  const Tensor<double> x({3, m.vision.hidden}, feats), r({3, m.decoder.hidden}, probe);
  auto fd = testing::finite_difference_check(
      w, {"projector.w1", "projector.b1", "projector.w2", "projector.b2"},
      [&](ParamMap<double>& p) { return sum(mul(project(x, p), r)); });
  EXPECT_LT(fd.max_rel_err, 1e-4) << fd.worst;
}

}  // namespace
}  // namespace cvlm
