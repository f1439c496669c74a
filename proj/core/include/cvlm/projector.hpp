// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cvlm/nn.hpp"

namespace cvlm {

// gelu(features * w1 + b1) * w2 + b2 using `projector.{w1,b1,w2,b2}`.
template <typename T>
Tensor<T> project(const Tensor<T>& features, const ParamMap<T>& weights,
                  GeluMode gelu_mode = GeluMode::kTanh);

}  // namespace cvlm
