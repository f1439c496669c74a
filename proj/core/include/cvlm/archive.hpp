// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

// CVLM1 weight archives.
//
// Layout (all integers little-endian):
//   bytes [0, 5)          magic "CVLM1"
//   bytes [5, 13)         u64 header length H
//   bytes [13, 13 + H)    UTF-8 JSON object: name -> {"dtype", "shape", "offset", "length"}
//   zero padding up to the next multiple of 64: start of the payload
//   payload               raw tensor bytes; offsets are relative to the payload
//                         start, ascending, non-overlapping and 64-byte aligned
//
// Only f32 storage is written.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "cvlm/manifest.hpp"
#include "cvlm/nn.hpp"

namespace cvlm {

inline constexpr char kArchiveMagic[] = "CVLM1";
inline constexpr std::size_t kArchiveAlignment = 64;

struct ArchiveEntry {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

// Writes atomically: the archive is staged in a sibling temp file and renamed.
void save_archive(const ParamMap<float>& tensors, const std::filesystem::path& path);

// Header entries in offset order, without reading the payload.
std::vector<ArchiveEntry> read_archive_index(const std::filesystem::path& path);

// Loads every tensor in the archive.
ParamMap<float> read_archive(const std::filesystem::path& path);

// Loads and verifies that every tensor the manifest requires is present with
// the expected shape. Extra tensors are ignored.
ParamMap<float> load_archive(const std::filesystem::path& path, const ModelManifest& manifest);

// Checks a parameter map against the manifest's tensor table.
void verify_params(const ParamMap<float>& params, const ModelManifest& manifest);

// Truncated-normal (std 0.02, cut at 2 std) weights, zero biases, unit
// layernorm gains. Deterministic per seed. A non-empty `prefixes` restricts
// the map to tensors whose names start with one of them.
ParamMap<float> init_random(const ModelManifest& manifest, std::uint64_t seed,
                            const std::vector<std::string>& prefixes = {});

// FNV-1a over the raw bytes; used for freeze checks.
std::uint64_t tensor_checksum(const Tensor<float>& t);

// External-checkpoint conversion: each rule maps one or more source tensors
// onto a target name, optionally transposing 2-D sources ([out, in] -> [in, out])
// and concatenating several sources along the output axis.
struct NameMapRule {
  std::string target;
  std::vector<std::string> sources;
  bool transpose = false;
};

std::vector<NameMapRule> name_map_from_json(const nlohmann::json& doc);

// Applies rules in order. A rule containing `{i}` is expanded for i = 0, 1, ...
// until its first source name is absent from `source`. A missing source for a
// rule without `{i}` is an error naming it.
ParamMap<float> remap_tensors(const ParamMap<float>& source, const std::vector<NameMapRule>& rules);

// Reads a safetensors file (F32, F16 and BF16 payloads) into f32 tensors.
ParamMap<float> read_safetensors(const std::filesystem::path& path);

}  // namespace cvlm
