// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "cvlm/decoder.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "cvlm/pipeline.hpp"
#include "gradcheck.hpp"

namespace cvlm {
namespace {

std::vector<int> iota_positions(std::size_t n, int start = 0) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), start);
  return p;
}

std::vector<int> random_ids(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::vector<int> ids(n);
  for (auto& id : ids) id = static_cast<int>(rng() % vocab);
  return ids;
}

TEST(Rotary, PositionZeroIsIdentity) {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n;
  std::vector<float> data(2 * 8);
  for (auto& v : data) v = n(rng);
  Tensor<float> x({1, 2, 8}, data);
  const int pos[] = {0};
  auto y = rotary_apply(x, std::span<const int>(pos), 4);
  EXPECT_TRUE(std::equal(y.data().begin(), y.data().end(), x.data().begin()));
}

TEST(Rotary, ZeroDimIsIdentityAndOddDimFails) {
  Tensor<float> x({2, 1, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  const int pos[] = {3, 9};
  auto y = rotary_apply(x, std::span<const int>(pos), 0);
  EXPECT_TRUE(std::equal(y.data().begin(), y.data().end(), x.data().begin()));
  EXPECT_THROW(rotary_apply(x, std::span<const int>(pos), 3), Error);
}

TEST(Rotary, PreservesPairNormsAndLeavesTailUntouched) {
  std::mt19937_64 rng(2);
  std::normal_distribution<float> n;
  const std::size_t t = 5, heads = 3, hd = 8, rd = 4, half = rd / 2;
  std::vector<float> data(t * heads * hd);
  for (auto& v : data) v = n(rng);
  Tensor<float> x({t, heads, hd}, data);
  const auto pos = iota_positions(t, 7);
  auto y = rotary_apply(x, pos, rd);
  for (std::size_t r = 0; r < t * heads; ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double before = std::hypot(data[r * hd + i], data[r * hd + i + half]);
      const double after = std::hypot(y.data()[r * hd + i], y.data()[r * hd + i + half]);
      EXPECT_NEAR(before, after, 1e-6);
    }
    for (std::size_t i = rd; i < hd; ++i) EXPECT_EQ(y.data()[r * hd + i], data[r * hd + i]);
  }
}

TEST(Rotary, AnglesFollowBaseSchedule) {
  Tensor<double> x({1, 1, 4}, {1, 0, 0, 0});
  const int pos[] = {3};
  auto y = rotary_apply(x, std::span<const int>(pos), 4, 10000.0);
  // Pair (0, 2) rotates by 3 * 10000^0 = 3 rad.
  EXPECT_NEAR(y.data()[0], std::cos(3.0), 1e-12);
  EXPECT_NEAR(y.data()[2], std::sin(3.0), 1e-12);
}

TEST(Decoder, SingleTokenShapeAndCache) {
  auto model = testing::toy_model(1);
  const auto& cfg = model.manifest.decoder;
  const int ids[] = {5};
  const int pos[] = {0};
  auto out =
      decoder_forward<float>(embed_tokens<float>(ids, model.weights), pos, model.weights, cfg);
  EXPECT_EQ(out.hidden.shape(), (Shape{1, cfg.hidden}));
  EXPECT_EQ(out.cache.length(), 1u);
  EXPECT_EQ(out.cache.keys.size(), cfg.layers);
  auto logits = lm_logits(out.hidden, model.weights, cfg);
  EXPECT_EQ(logits.shape(), (Shape{1, cfg.vocab}));
}

TEST(Decoder, RejectsInconsistentPositions) {
  auto model = testing::toy_model(1);
  const auto& cfg = model.manifest.decoder;
  const int ids[] = {5, 6};
  auto e = embed_tokens<float>(ids, model.weights);
  const int bad_start[] = {1, 2};
  EXPECT_THROW(decoder_forward<float>(e, bad_start, model.weights, cfg), Error);
  const int not_increasing[] = {0, 0};
  EXPECT_THROW(decoder_forward<float>(e, not_increasing, model.weights, cfg), Error);
  const int ok[] = {0, 1};
  auto first = decoder_forward<float>(e, ok, model.weights, cfg);
  EXPECT_THROW(decoder_forward<float>(e, ok, model.weights, cfg, &first.cache), Error);
  auto short_cfg = cfg;
  short_cfg.max_seq = 1;
  try {
    decoder_forward<float>(e, ok, model.weights, short_cfg);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::kContextOverflow);
  }
}

TEST(Decoder, CachedDecodeMatchesFullRecompute) {
  auto model = testing::toy_model(4);
  const auto& cfg = model.manifest.decoder;
  std::mt19937_64 rng(12);
  const auto ids = random_ids(rng, 12, cfg.vocab);
  const auto full = decoder_forward<float>(embed_tokens<float>(ids, model.weights),
                                           iota_positions(12), model.weights, cfg);
  KVCache<float> cache;
  Tensor<float> last;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const int pos = static_cast<int>(t);
    auto step = decoder_forward<float>(
        embed_tokens<float>(std::span<const int>(&ids[t], 1), model.weights),
        std::span<const int>(&pos, 1), model.weights, cfg, t == 0 ? nullptr : &cache);
    cache = std::move(step.cache);
    last = step.hidden;
  }
  for (std::size_t j = 0; j < cfg.hidden; ++j) {
    EXPECT_NEAR(last.data()[j], full.hidden.data()[11 * cfg.hidden + j], 1e-5);
  }
}

TEST(Decoder, CausalityUnderFutureTokenPerturbation) {
  auto model = testing::toy_model(5);
  const auto& cfg = model.manifest.decoder;
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    auto ids = random_ids(rng, 10, cfg.vocab);
    const std::size_t t = rng() % 9;
    auto base = lm_logits(decoder_forward<float>(embed_tokens<float>(ids, model.weights),
                                                 iota_positions(10), model.weights, cfg)
                              .hidden,
                          model.weights, cfg);
    const std::size_t k = t + 1 + rng() % (9 - t);
    ids[k] = (ids[k] + 1 + static_cast<int>(rng() % (cfg.vocab - 1))) % static_cast<int>(cfg.vocab);
    auto pert = lm_logits(decoder_forward<float>(embed_tokens<float>(ids, model.weights),
                                                 iota_positions(10), model.weights, cfg)
                              .hidden,
                          model.weights, cfg);
    for (std::size_t r = 0; r <= t; ++r) {
      for (std::size_t j = 0; j < cfg.vocab; ++j) {
        ASSERT_NEAR(base.data()[r * cfg.vocab + j], pert.data()[r * cfg.vocab + j], 1e-5);
      }
    }
  }
}

TEST(Decoder, ZeroMlpReducesToAttentionResidual) {
  auto model = testing::toy_model(6);
  auto cfg = model.manifest.decoder;
  cfg.layers = 1;
  auto w = model.weights;
  for (const char* name : {"decoder.block0.mlp.fc1.w", "decoder.block0.mlp.fc1.b",
                           "decoder.block0.mlp.fc2.w", "decoder.block0.mlp.fc2.b"}) {
    w[name] = Tensor<float>::zeros(w.at(name).shape());
  }
  const int ids[] = {3, 9, 27};
  const auto pos = iota_positions(3);
  auto x = embed_tokens<float>(ids, w);
  auto out = decoder_forward<float>(x, pos, w, cfg);

  const std::size_t h = cfg.hidden;
  const Shape hs{3, cfg.heads, cfg.head_dim()};
  auto ln = layer_norm(x, w.at("decoder.block0.ln.w"), w.at("decoder.block0.ln.b"), float(cfg.eps));
  auto qkv = linear(ln, w.at("decoder.block0.attn.qkv.w"), w.at("decoder.block0.attn.qkv.b"));
  auto q = rotary_apply(reshape(slice_cols(qkv, 0, h), hs), pos, cfg.rotary_dim);
  auto k = rotary_apply(reshape(slice_cols(qkv, h, h), hs), pos, cfg.rotary_dim);
  auto v = reshape(slice_cols(qkv, 2 * h, h), hs);
  auto a = linear(reshape(attention(q, k, v, AttentionMask{true, 0}), {3, h}),
                  w.at("decoder.block0.attn.out.w"), w.at("decoder.block0.attn.out.b"));
  auto expect = add(x, a);
  for (std::size_t i = 0; i < expect.numel(); ++i)
    EXPECT_EQ(out.hidden.data()[i], expect.data()[i]);
}

TEST(LmLogits, ZeroHeadGivesBiasAndArgmaxIsShiftInvariant) {
  auto model = testing::toy_model(7);
  const auto& cfg = model.manifest.decoder;
  auto w = model.weights;
  w["decoder.head.w"] = Tensor<float>::zeros(w.at("decoder.head.w").shape());
  std::vector<float> bias(cfg.vocab);
  for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = static_cast<float>(i % 7) * 0.1f;
  w["decoder.head.b"] = Tensor<float>({cfg.vocab}, bias);
  std::mt19937_64 rng(3);
  std::normal_distribution<float> n;
  std::vector<float> hid(2 * cfg.hidden);
  for (auto& v : hid) v = n(rng);
  auto logits = lm_logits(Tensor<float>({2, cfg.hidden}, hid), w, cfg);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t j = 0; j < cfg.vocab; ++j)
      EXPECT_EQ(logits.data()[r * cfg.vocab + j], bias[j]);
  }

  auto real = lm_logits(Tensor<float>({2, cfg.hidden}, hid), model.weights, cfg);
  std::vector<float> row(real.data().begin(),
                         real.data().begin() + static_cast<std::ptrdiff_t>(cfg.vocab));
  const auto best = argmax(row);
  for (auto& v : row) v += 3.25f;
  EXPECT_EQ(argmax(row), best);
}

TEST(GradCheck, FullDecoderAndProjector) {
  const auto fd = testing::decoder_gradient_check();
  EXPECT_LT(fd.max_rel_err, 1e-4) << fd.worst;
  EXPECT_GT(fd.checked, 2000u);
}

}  // namespace
}  // namespace cvlm
