// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

// ViT image encoder: patch embedding, class token, learned positions, a
// pre-LN before the stack, and pre-norm transformer blocks.

#pragma once

#include "cvlm/manifest.hpp"
#include "cvlm/nn.hpp"

namespace cvlm {

// img: [3 x S x S]. Row i is the patch at grid position (i / g, i % g),
// flattened channel-major as (c, py, px).
template <typename T>
Tensor<T> patchify(const Tensor<T>& img, const VisionConfig& cfg);

// Features of the feature_layer block with the class row dropped: [P x hidden].
template <typename T>
Tensor<T> encode_image(const Tensor<T>& img, const ParamMap<T>& weights, const VisionConfig& cfg,
                       GeluMode gelu_mode = GeluMode::kTanh);

}  // namespace cvlm
