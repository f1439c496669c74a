// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "cvlm/model.hpp"

#include "cvlm/archive.hpp"
#include "cvlm/projector.hpp"
#include "cvlm/vision.hpp"

namespace cvlm {

Model make_model(ModelManifest manifest, Tokenizer tokenizer, ParamMap<float> weights) {
  manifest.validate();
  verify_params(weights, manifest);
  if (tokenizer.size() > manifest.decoder.vocab) {
    throw Error(ErrorCode::kInvalidArgument, "tokenizer has " + std::to_string(tokenizer.size()) +
                                                 " tokens but decoder.vocab is " +
                                                 std::to_string(manifest.decoder.vocab));
  }
  (void)tokenizer.image_id();
  (void)tokenizer.eot_id();
  Model model;
  model.manifest_hash = manifest_hash(manifest);
  model.manifest = std::move(manifest);
  model.tokenizer = std::make_shared<const Tokenizer>(std::move(tokenizer));
  model.weights = std::move(weights);
  return model;
}

Model load_model(const std::filesystem::path& manifest_path,
                 const std::filesystem::path& weights_path) {
  auto manifest = load_manifest(manifest_path);
  auto tokenizer = Tokenizer::load(manifest.tokenizer);
  auto weights = load_archive(weights_path, manifest);
  return make_model(std::move(manifest), std::move(tokenizer), std::move(weights));
}

Tensor<float> image_features(const Model& model, const RgbImage& image) {
  const auto& m = model.manifest;
  const auto pixels = preprocess(image, m.vision.image_size, m.preprocessing);
  return encode_image(pixels, model.weights, m.vision, m.gelu);
}

Tensor<float> image_embeddings(const Model& model, const RgbImage& image) {
  return project(image_features(model, image), model.weights, model.manifest.gelu);
}

}  // namespace cvlm
