// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

// A loaded model: manifest, tokenizer and f32 weights, immutable once built
// and shared read-only by sessions.

#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "cvlm/image.hpp"
#include "cvlm/manifest.hpp"
#include "cvlm/nn.hpp"
#include "cvlm/tokenizer.hpp"

namespace cvlm {

struct Model {
  ModelManifest manifest;
  std::shared_ptr<const Tokenizer> tokenizer;
  ParamMap<float> weights;
  std::string manifest_hash;
};

// Checks weight shapes and that the tokenizer fits the decoder vocabulary.
Model make_model(ModelManifest manifest, Tokenizer tokenizer, ParamMap<float> weights);

Model load_model(const std::filesystem::path& manifest_path,
                 const std::filesystem::path& weights_path);

// Vision features [P x vision.hidden] for a decoded image.
Tensor<float> image_features(const Model& model, const RgbImage& image);

// Projected image rows [P x decoder.hidden].
Tensor<float> image_embeddings(const Model& model, const RgbImage& image);

}  // namespace cvlm
