// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

// Wall-clock latency and throughput of prefill and cached decode.

#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "cvlm/manifest.hpp"
#include "cvlm/nn.hpp"

namespace cvlm {

struct BenchConfig {
  std::vector<std::size_t> prompt_sizes{32};
  std::vector<std::size_t> new_tokens{16};
  std::size_t repetitions = 3;
  std::uint64_t seed = 0;
  bool include_image = false;
};

struct BenchRun {
  double prefill_ms = 0;
  double decode_ms = 0;
  double decode_tokens_per_s = 0;
  std::vector<double> step_ms;
};

struct BenchCase {
  std::size_t prompt_tokens = 0;
  std::size_t new_tokens = 0;
  std::vector<BenchRun> runs;
  double prefill_ms_p50 = 0;
  double prefill_ms_p95 = 0;
  double decode_tokens_per_s = 0;  // mean over runs
  double step_ms_p50 = 0;
  double step_ms_p95 = 0;
};

struct BenchReport {
  std::string label;
  std::string manifest_hash;
  std::size_t decoder_layers = 0;
  std::size_t decoder_hidden = 0;
  std::size_t vocab = 0;
  std::vector<BenchCase> cases;
  std::optional<double> image_encode_ms;  // vision + projector, median
};

// Nearest-rank percentile of `values` (q in [0, 1]).
double percentile(std::vector<double> values, double q);

// Caps decoder depth and vocabulary so reference widths fit in memory.
// Zero leaves a dimension unchanged.
ModelManifest truncate_manifest(ModelManifest manifest, std::size_t max_layers,
                                std::size_t max_vocab);

// Random prompt ids in [0, vocab); one discarded warm-up run per case, then
// `repetitions` timed runs of prefill plus greedy cached decode.
BenchReport bench_perf(const ModelManifest& manifest, const ParamMap<float>& weights,
                       const BenchConfig& config, std::string label = "");

nlohmann::json bench_to_json(const BenchReport& report);
std::string bench_table(const BenchReport& report);

}  // namespace cvlm
