// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

// Decoder-only LM with parallel attention/MLP blocks and partial rotary
// embeddings.

#pragma once

#include <span>
#include <utility>
#include <vector>

#include "cvlm/manifest.hpp"
#include "cvlm/nn.hpp"

namespace cvlm {

// Rotates channel pairs (i, i + rotary_dim/2) of each head by
// pos * base^(-2i / rotary_dim). x: [T x heads x head_dim].
template <typename T>
Tensor<T> rotary_apply(const Tensor<T>& x, std::span<const int> positions, std::size_t rotary_dim,
                       double base = 10000.0);

// Post-rotary keys and values per layer, each [t_cached x heads x head_dim].
template <typename T>
struct KVCache {
  std::vector<Tensor<T>> keys;
  std::vector<Tensor<T>> values;

  std::size_t length() const { return keys.empty() ? 0 : keys.front().dim(0); }
};

template <typename T>
struct DecoderOutput {
  Tensor<T> hidden;  // [T x hidden], before the final layernorm
  KVCache<T> cache;
};

template <typename T>
Tensor<T> embed_tokens(std::span<const int> ids, const ParamMap<T>& weights);

// positions[0] must equal the cache length and positions must increase.
// The input cache is left untouched; the returned cache extends it by T.
template <typename T>
DecoderOutput<T> decoder_forward(const Tensor<T>& embeds, std::span<const int> positions,
                                 const ParamMap<T>& weights, const DecoderConfig& cfg,
                                 const KVCache<T>* cache = nullptr,
                                 GeluMode gelu_mode = GeluMode::kTanh);

// Final layernorm then the biased LM head: [T x vocab].
template <typename T>
Tensor<T> lm_logits(const Tensor<T>& hidden, const ParamMap<T>& weights, const DecoderConfig& cfg);

}  // namespace cvlm
