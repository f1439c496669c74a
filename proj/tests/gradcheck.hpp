// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

// Central-difference checks in f64 shared by the unit tests and the
// acceptance binary.

#pragma once

#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cvlm/decoder.hpp"
#include "cvlm/pipeline.hpp"
#include "cvlm/projector.hpp"
#include "support.hpp"

namespace cvlm::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(n(rng));
  return Tensor<T>(std::move(shape), std::move(data));
}

// One entry per differentiable op; each loss reduces the op through a fixed
// random weighting so every output element matters.
inline std::vector<std::pair<std::string, FdResult>> op_gradient_checks() {
  std::mt19937_64 rng(11);
  ParamMap<double> p;
  p["a"] = random_tensor<double>({3, 4}, rng);
  p["b"] = random_tensor<double>({4, 5}, rng);
  p["c"] = random_tensor<double>({3, 4}, rng);
  p["bias"] = random_tensor<double>({4}, rng);
  p["gain"] = random_tensor<double>({4}, rng);
  p["table"] = random_tensor<double>({6, 4}, rng);
  p["q"] = random_tensor<double>({3, 2, 4}, rng);
  p["k"] = random_tensor<double>({5, 2, 4}, rng);
  p["v"] = random_tensor<double>({5, 2, 4}, rng);
  auto weights = random_tensor<double>({3, 5}, rng);
  auto w4 = random_tensor<double>({3, 4}, rng);
  auto w_att = random_tensor<double>({3, 2, 4}, rng);
  const int ids[] = {1, 5, 1};
  const int targets[] = {2, 0, 4};

  using Fn = std::function<Tensor<double>(ParamMap<double>&)>;
  const std::vector<std::pair<std::string, std::pair<std::vector<std::string>, Fn>>> cases = {
      {"matmul",
       {{"a", "b"},
        [&](ParamMap<double>& q) { return sum(mul(matmul(q["a"], q["b"]), weights)); }}},
      {"add", {{"a", "c"}, [&](ParamMap<double>& q) { return sum(mul(add(q["a"], q["c"]), w4)); }}},
      {"mul", {{"a", "c"}, [&](ParamMap<double>& q) { return sum(mul(q["a"], q["c"])); }}},
      {"scale", {{"a"}, [&](ParamMap<double>& q) { return sum(mul(scale(q["a"], 1.7), w4)); }}},
      {"add_bias",
       {{"a", "bias"},
        [&](ParamMap<double>& q) { return sum(mul(add_bias(q["a"], q["bias"]), w4)); }}},
      {"gelu_tanh", {{"a"}, [&](ParamMap<double>& q) { return sum(mul(gelu(q["a"]), w4)); }}},
      {"gelu_erf",
       {{"a"}, [&](ParamMap<double>& q) { return sum(mul(gelu(q["a"], GeluMode::kErf), w4)); }}},
      {"softmax", {{"a"}, [&](ParamMap<double>& q) { return sum(mul(softmax_rows(q["a"]), w4)); }}},
      {"layer_norm",
       {{"a", "gain", "bias"},
        [&](ParamMap<double>& q) {
          return sum(mul(layer_norm(q["a"], q["gain"], q["bias"], 1e-5), w4));
        }}},
      {"embedding",
       {{"table"},
        [&](ParamMap<double>& q) {
          return sum(mul(embedding_lookup(q["table"], std::span<const int>(ids)), w4));
        }}},
      {"cross_entropy",
       {{"b"},
        [&](ParamMap<double>& q) {
          return cross_entropy(matmul(p["a"], q["b"]), std::span<const int>(targets),
                               {true, false, true});
        }}},
      {"reshape_slice_concat",
       {{"a", "c"},
        [&](ParamMap<double>& q) {
          auto left = slice_cols(q["a"], 1, 2);
          auto rows = concat_rows<double>({reshape(slice_rows(q["c"], 0, 2), {4, 2}), left});
          return sum(mul(rows, mul(rows, rows)));
        }}},
      {"attention",
       {{"q", "k", "v"},
        [&](ParamMap<double>& q) {
          return sum(mul(attention(q["q"], q["k"], q["v"], AttentionMask{true, 2}), w_att));
        }}},
      {"linear",
       {{"a", "b"},
        [&](ParamMap<double>& q) {
          return sum(mul(linear(q["a"], q["b"], Tensor<double>::full({5}, 0.3)), weights));
        }}},
  };
  std::vector<std::pair<std::string, FdResult>> out;
  for (const auto& [name, spec] : cases)
    out.emplace_back(name, finite_difference_check(p, spec.first, spec.second));
  return out;
}

// 2-layer decoder at width 16 plus projector; every decoder and projector
// parameter element.
inline ModelManifest fd_manifest() {
  auto m = toy_manifest();
  m.decoder.hidden = 16;
  m.decoder.heads = 2;
  m.decoder.rotary_dim = 4;
  m.decoder.mlp_inner = 32;
  m.decoder.vocab = 40;
  m.projector.inner = 16;
  m.validate();
  return m;
}

inline FdResult decoder_gradient_check() {
  auto m = fd_manifest();
  auto w = cast_params<double>(init_random(m, 21));
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n;
  std::vector<double> feats(2 * m.vision.hidden);
  for (auto& v : feats) v = n(rng);
  const Tensor<double> image_feats({2, m.vision.hidden}, feats);
  const std::vector<int> ids = {3, 39, 7, 1, 22};  // 39 stands in for the placeholder
  const std::vector<int> targets = {7, 1, 22, 5, 9, 11};
  const std::vector<bool> mask = {false, true, true, true, true, true};

  std::vector<std::string> names;
  for (const auto& [name, t] : w) {
    if (name.rfind("decoder.", 0) == 0 || name.rfind("projector.", 0) == 0) names.push_back(name);
  }
  std::vector<int> positions(6);
  std::iota(positions.begin(), positions.end(), 0);
  auto loss_fn = [&](ParamMap<double>& p) {
    auto rows = project(image_feats, p);
    auto embeds = assemble_embeddings<double>(ids, {rows}, p.at("decoder.embed"), 39);
    auto out = decoder_forward<double>(embeds, positions, p, m.decoder);
    return cross_entropy(lm_logits(out.hidden, p, m.decoder), targets, mask);
  };
  return finite_difference_check(w, names, loss_fn);
}

}  // namespace cvlm::testing
