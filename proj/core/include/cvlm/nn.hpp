// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

// Layers shared by the vision encoder and the decoder.

#pragma once

#include <map>
#include <string>

#include "cvlm/tensor.hpp"

namespace cvlm {

// Named parameter set; ordered so iteration is deterministic.
template <typename T>
using ParamMap = std::map<std::string, Tensor<T>>;

// Looks up `name`, throwing kNotFound with the name when absent.
template <typename T>
const Tensor<T>& param(const ParamMap<T>& params, const std::string& name);

template <typename T>
ParamMap<T> cast_params(const ParamMap<float>& params) {
  ParamMap<T> out;
  for (const auto& [name, t] : params) out.emplace(name, t.template cast<T>());
  return out;
}

// x[rows x in] * w[in x out] + b[out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

struct AttentionMask {
  bool causal = false;
  // Absolute index of the first query row among the keys; query i may see
  // keys [0, query_offset + i] when causal.
  std::size_t query_offset = 0;
};

// Multi-head scaled dot-product attention with materialized score matrices.
// q: [T x heads x head_dim], k and v: [S x heads x head_dim]; returns q's shape.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, AttentionMask mask);

}  // namespace cvlm
