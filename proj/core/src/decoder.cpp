// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "cvlm/decoder.hpp"

#include <cmath>

namespace cvlm {

template <typename T>
Tensor<T> rotary_apply(const Tensor<T>& x, std::span<const int> positions, std::size_t rotary_dim,
                       double base) {
  if (rotary_dim % 2 != 0) {
    throw Error(ErrorCode::kInvalidArgument,
                "rotary_dim must be even, got " + std::to_string(rotary_dim));
  }
  if (x.rank() != 3 || positions.size() != x.dim(0) || rotary_dim > x.dim(2)) {
    throw Error(ErrorCode::kShapeMismatch, "rotary input " + shape_str(x.shape()) + " with " +
                                               std::to_string(positions.size()) +
                                               " positions and rotary_dim " +
                                               std::to_string(rotary_dim));
  }
  if (rotary_dim == 0) return x;
  const std::size_t n = x.dim(0), heads = x.dim(1), hd = x.dim(2), half = rotary_dim / 2;
  std::vector<T> cos_t(n * half), sin_t(n * half);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const double theta =
          static_cast<double>(positions[t]) *
          std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(rotary_dim));
      cos_t[t * half + i] = static_cast<T>(std::cos(theta));
      sin_t[t * half + i] = static_cast<T>(std::sin(theta));
    }
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t h = 0; h < heads; ++h) {
      T* row = out.data() + (t * heads + h) * hd;
      for (std::size_t i = 0; i < half; ++i) {
        const T c = cos_t[t * half + i], s = sin_t[t * half + i];
        const T a = row[i], b = row[i + half];
        row[i] = a * c - b * s;
        row[i + half] = a * s + b * c;
      }
    }
  }
  Tensor<T> result(x.shape(), std::move(out));
  detail::record_op<T>(
      "rotary", {x}, result,
      [=, x = x, cos_t = std::move(cos_t), sin_t = std::move(sin_t)](std::span<const T> g) mutable {
        std::vector<T> gx(g.begin(), g.end());
        for (std::size_t t = 0; t < n; ++t) {
          for (std::size_t h = 0; h < heads; ++h) {
            T* row = gx.data() + (t * heads + h) * hd;
            for (std::size_t i = 0; i < half; ++i) {
              const T c = cos_t[t * half + i], s = sin_t[t * half + i];
              const T a = row[i], b = row[i + half];
              row[i] = a * c + b * s;
              row[i + half] = b * c - a * s;
            }
          }
        }
        detail::accumulate_grad(x, std::span<const T>(gx));
      });
  return result;
}

template <typename T>
Tensor<T> embed_tokens(std::span<const int> ids, const ParamMap<T>& weights) {
  return embedding_lookup(param(weights, "decoder.embed"), ids);
}

template <typename T>
DecoderOutput<T> decoder_forward(const Tensor<T>& embeds, std::span<const int> positions,
                                 const ParamMap<T>& w, const DecoderConfig& cfg,
                                 const KVCache<T>* cache, GeluMode gelu_mode) {
  const std::size_t n = embeds.rank() == 2 ? embeds.dim(0) : 0;
  if (n == 0 || embeds.dim(1) != cfg.hidden) {
    throw Error(ErrorCode::kShapeMismatch, "decoder input " + shape_str(embeds.shape()) +
                                               " must be [T x " + std::to_string(cfg.hidden) +
                                               "] with T >= 1");
  }
  if (positions.size() != n) {
    throw Error(ErrorCode::kInvalidArgument, std::to_string(positions.size()) + " positions for " +
                                                 std::to_string(n) + " embeddings");
  }
  const std::size_t past = cache ? cache->length() : 0;
  if (cache && (cache->keys.size() != cfg.layers || cache->values.size() != cfg.layers)) {
    throw Error(ErrorCode::kInvalidArgument, "kv cache has " + std::to_string(cache->keys.size()) +
                                                 " layers, model has " +
                                                 std::to_string(cfg.layers));
  }
  if (positions[0] < 0 || static_cast<std::size_t>(positions[0]) != past) {
    throw Error(ErrorCode::kInvalidArgument, "first position " + std::to_string(positions[0]) +
                                                 " does not follow cache length " +
                                                 std::to_string(past));
  }
  for (std::size_t t = 1; t < n; ++t) {
    if (positions[t] <= positions[t - 1]) {
      throw Error(ErrorCode::kInvalidArgument, "positions must be strictly increasing");
    }
  }
  if (static_cast<std::size_t>(positions[n - 1]) >= cfg.max_seq) {
    throw Error(ErrorCode::kContextOverflow, "position " + std::to_string(positions[n - 1]) +
                                                 " exceeds max_seq " + std::to_string(cfg.max_seq));
  }

  const std::size_t h = cfg.hidden, heads = cfg.heads, hd = cfg.head_dim();
  const T eps = static_cast<T>(cfg.eps);
  const Shape heads_shape{n, heads, hd};
  DecoderOutput<T> out;
  Tensor<T> x = embeds;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "decoder.block" + std::to_string(l);
    auto ln = layer_norm(x, param(w, p + ".ln.w"), param(w, p + ".ln.b"), eps);
    auto qkv = linear(ln, param(w, p + ".attn.qkv.w"), param(w, p + ".attn.qkv.b"));
    auto q = rotary_apply(reshape(slice_cols(qkv, 0, h), heads_shape), positions, cfg.rotary_dim,
                          cfg.rotary_base);
    auto k = rotary_apply(reshape(slice_cols(qkv, h, h), heads_shape), positions, cfg.rotary_dim,
                          cfg.rotary_base);
    auto v = reshape(slice_cols(qkv, 2 * h, h), heads_shape);
    if (cache) {
      k = concat_rows<T>({cache->keys[l], k});
      v = concat_rows<T>({cache->values[l], v});
    }
    auto a = reshape(attention(q, k, v, AttentionMask{true, past}), {n, h});
    auto attn = linear(a, param(w, p + ".attn.out.w"), param(w, p + ".attn.out.b"));
    auto mlp =
        linear(gelu(linear(ln, param(w, p + ".mlp.fc1.w"), param(w, p + ".mlp.fc1.b")), gelu_mode),
               param(w, p + ".mlp.fc2.w"), param(w, p + ".mlp.fc2.b"));
    x = add(add(x, attn), mlp);
    out.cache.keys.push_back(std::move(k));
    out.cache.values.push_back(std::move(v));
  }
  out.hidden = std::move(x);
  return out;
}

template <typename T>
Tensor<T> lm_logits(const Tensor<T>& hidden, const ParamMap<T>& w, const DecoderConfig& cfg) {
  auto x = layer_norm(hidden, param(w, "decoder.final_ln.w"), param(w, "decoder.final_ln.b"),
                      static_cast<T>(cfg.eps));
  return linear(x, param(w, "decoder.head.w"), param(w, "decoder.head.b"));
}

#define CVLM_INSTANTIATE_DECODER(T)                                                                \
  template Tensor<T> rotary_apply<T>(const Tensor<T>&, std::span<const int>, std::size_t, double); \
  template Tensor<T> embed_tokens<T>(std::span<const int>, const ParamMap<T>&);                    \
  template DecoderOutput<T> decoder_forward<T>(const Tensor<T>&, std::span<const int>,             \
                                               const ParamMap<T>&, const DecoderConfig&,           \
                                               const KVCache<T>*, GeluMode);                       \
  template Tensor<T> lm_logits<T>(const Tensor<T>&, const ParamMap<T>&, const DecoderConfig&);

CVLM_INSTANTIATE_DECODER(float)
CVLM_INSTANTIATE_DECODER(double)

#undef CVLM_INSTANTIATE_DECODER

}  // namespace cvlm
