// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "cvlm/tensor.hpp"

namespace cvlm {

struct VisionConfig {
  std::size_t image_size = 336;
  std::size_t patch_size = 14;
  std::size_t hidden = 1024;
  std::size_t layers = 24;
  std::size_t heads = 16;
  std::size_t mlp_inner = 4096;
  // Index into the list [embeddings, block 1 output, ..., block L output];
  // negative values count from the end, so -2 is the penultimate block.
  int feature_layer = -2;
  double eps = 1e-5;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }
  // Number of transformer blocks evaluated to reach feature_layer.
  std::size_t blocks_used() const;
  void validate() const;
};

struct ProjectorConfig {
  std::size_t inner = 0;  // 0 means "same as decoder.hidden"
};

struct DecoderConfig {
  std::size_t layers = 32;
  std::size_t hidden = 2560;
  std::size_t heads = 32;
  std::size_t rotary_dim = 32;
  std::size_t mlp_inner = 10240;
  std::size_t vocab = 51200;
  std::size_t max_seq = 2048;
  double eps = 1e-5;
  double rotary_base = 10000.0;

  std::size_t head_dim() const { return hidden / heads; }
  void validate() const;
};

enum class ResizePolicy { kSquare, kPad };

struct PreprocessConfig {
  std::array<float, 3> means{0.48145466f, 0.4578275f, 0.40821073f};
  std::array<float, 3> stds{0.26862954f, 0.26130258f, 0.27577711f};
  ResizePolicy resize = ResizePolicy::kSquare;
};

struct SpecialToken {
  std::string text;
  int id = -1;
};

struct TokenizerConfig {
  // Paths as written in the manifest; relative ones resolve against base_dir.
  std::filesystem::path vocab_path;
  std::filesystem::path merges_path;
  std::filesystem::path base_dir;
  // Keys: IMAGE_PLACEHOLDER, END_OF_TEXT, PAD.
  std::map<std::string, SpecialToken> specials;
  std::string pretokenize_regex;  // empty selects the GPT-2 pattern

  std::filesystem::path resolved_vocab() const { return base_dir / vocab_path; }
  std::filesystem::path resolved_merges() const { return base_dir / merges_path; }
};

struct ModelManifest {
  int format_version = 1;
  VisionConfig vision;
  ProjectorConfig projector;
  DecoderConfig decoder;
  TokenizerConfig tokenizer;
  PreprocessConfig preprocessing;
  GeluMode gelu = GeluMode::kTanh;
  std::string provenance;

  std::size_t projector_inner() const {
    return projector.inner == 0 ? decoder.hidden : projector.inner;
  }
  // Checks every module's invariants and the cross-module widths.
  void validate() const;
};

// Parses a manifest document; relative tokenizer paths resolve against
// `base_dir`. Validates before returning.
ModelManifest manifest_from_json(const nlohmann::json& doc,
                                 const std::filesystem::path& base_dir = {});
nlohmann::json manifest_to_json(const ModelManifest& manifest);
ModelManifest load_manifest(const std::filesystem::path& path);

// Hex FNV-1a-64 fingerprint of the canonical manifest JSON.
std::string manifest_hash(const ModelManifest& manifest);

enum class InitKind { kNormal, kZeros, kOnes };

struct TensorSpec {
  std::string name;
  Shape shape;
  InitKind init;
};

// Every tensor the manifest's architecture requires, in a fixed order.
std::vector<TensorSpec> model_tensor_specs(const ModelManifest& manifest);

}  // namespace cvlm
