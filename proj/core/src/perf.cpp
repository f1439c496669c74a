// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "cvlm/perf.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "cvlm/decoder.hpp"
#include "cvlm/pipeline.hpp"
#include "cvlm/projector.hpp"
#include "cvlm/vision.hpp"

namespace cvlm {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

BenchRun timed_run(const ModelManifest& m, const ParamMap<float>& w, std::size_t prompt,
                   std::size_t new_tokens, std::mt19937_64& rng) {
  const auto& cfg = m.decoder;
  std::uniform_int_distribution<int> pick(0, static_cast<int>(cfg.vocab) - 1);
  std::vector<int> ids(prompt);
  for (auto& id : ids) id = pick(rng);
  std::vector<int> positions(prompt);
  std::iota(positions.begin(), positions.end(), 0);

  BenchRun run;
  auto t0 = Clock::now();
  auto out =
      decoder_forward<float>(embed_tokens<float>(ids, w), positions, w, cfg, nullptr, m.gelu);
  auto logits = lm_logits(slice_rows(out.hidden, prompt - 1, 1), w, cfg);
  int next = static_cast<int>(argmax(logits.data()));
  run.prefill_ms = ms_since(t0);

  KVCache<float> cache = std::move(out.cache);
  for (std::size_t k = 0; k < new_tokens; ++k) {
    const auto ts = Clock::now();
    const int pos = static_cast<int>(cache.length());
    auto step = decoder_forward<float>(embed_tokens<float>(std::span<const int>(&next, 1), w),
                                       std::span<const int>(&pos, 1), w, cfg, &cache, m.gelu);
    cache = std::move(step.cache);
    next = static_cast<int>(argmax(lm_logits(step.hidden, w, cfg).data()));
    run.step_ms.push_back(ms_since(ts));
  }
  run.decode_ms = std::accumulate(run.step_ms.begin(), run.step_ms.end(), 0.0);
  run.decode_tokens_per_s =
      run.decode_ms > 0 ? 1000.0 * static_cast<double>(new_tokens) / run.decode_ms : 0.0;
  return run;
}

}  // namespace

double percentile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size())));
  return values[std::clamp<std::size_t>(rank, 1, values.size()) - 1];
}

ModelManifest truncate_manifest(ModelManifest manifest, std::size_t max_layers,
                                std::size_t max_vocab) {
  if (max_layers > 0) manifest.decoder.layers = std::min(manifest.decoder.layers, max_layers);
  if (max_vocab > 0) manifest.decoder.vocab = std::min(manifest.decoder.vocab, max_vocab);
  manifest.validate();
  return manifest;
}

BenchReport bench_perf(const ModelManifest& manifest, const ParamMap<float>& weights,
                       const BenchConfig& config, std::string label) {
  if (config.repetitions == 0) throw Error(ErrorCode::kInvalidArgument, "repetitions must be >= 1");
  BenchReport report;
  report.label = std::move(label);
  report.manifest_hash = manifest_hash(manifest);
  report.decoder_layers = manifest.decoder.layers;
  report.decoder_hidden = manifest.decoder.hidden;
  report.vocab = manifest.decoder.vocab;
  std::mt19937_64 rng(config.seed);

  for (std::size_t prompt : config.prompt_sizes) {
    for (std::size_t n : config.new_tokens) {
      if (prompt == 0 || n == 0) {
        throw Error(ErrorCode::kInvalidArgument, "prompt size and new tokens must be >= 1");
      }
      if (prompt + n > manifest.decoder.max_seq) {
        throw Error(ErrorCode::kContextOverflow, "bench case " + std::to_string(prompt) + "+" +
                                                     std::to_string(n) + " exceeds max_seq " +
                                                     std::to_string(manifest.decoder.max_seq));
      }
      BenchCase c;
      c.prompt_tokens = prompt;
      c.new_tokens = n;
      (void)timed_run(manifest, weights, prompt, n, rng);
      std::vector<double> prefill, steps;
      double tps = 0;
      for (std::size_t r = 0; r < config.repetitions; ++r) {
        c.runs.push_back(timed_run(manifest, weights, prompt, n, rng));
        prefill.push_back(c.runs.back().prefill_ms);
        steps.insert(steps.end(), c.runs.back().step_ms.begin(), c.runs.back().step_ms.end());
        tps += c.runs.back().decode_tokens_per_s;
      }
      c.prefill_ms_p50 = percentile(prefill, 0.5);
      c.prefill_ms_p95 = percentile(prefill, 0.95);
      c.step_ms_p50 = percentile(steps, 0.5);
      c.step_ms_p95 = percentile(steps, 0.95);
      c.decode_tokens_per_s = tps / static_cast<double>(config.repetitions);
      report.cases.push_back(std::move(c));
    }
  }

  if (config.include_image) {
    const std::size_t s = manifest.vision.image_size;
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::vector<float> pixels(3 * s * s);
    for (auto& p : pixels) p = normal(rng);
    const Tensor<float> img({3, s, s}, std::move(pixels));
    std::vector<double> times;
    for (std::size_t r = 0; r <= config.repetitions; ++r) {
      const auto t0 = Clock::now();
      (void)project(encode_image(img, weights, manifest.vision, manifest.gelu), weights,
                    manifest.gelu);
      if (r > 0) times.push_back(ms_since(t0));
    }
    report.image_encode_ms = percentile(times, 0.5);
  }
  return report;
}

json bench_to_json(const BenchReport& r) {
  json cases = json::array();
  for (const auto& c : r.cases) {
    json runs = json::array();
    for (const auto& run : c.runs) {
      runs.push_back({{"prefill_ms", run.prefill_ms},
                      {"decode_ms", run.decode_ms},
                      {"decode_tokens_per_s", run.decode_tokens_per_s},
                      {"step_ms", run.step_ms}});
    }
    cases.push_back({{"prompt_tokens", c.prompt_tokens},
                     {"new_tokens", c.new_tokens},
                     {"runs", runs},
                     {"prefill_ms_p50", c.prefill_ms_p50},
                     {"prefill_ms_p95", c.prefill_ms_p95},
                     {"decode_tokens_per_s", c.decode_tokens_per_s},
                     {"step_ms_p50", c.step_ms_p50},
                     {"step_ms_p95", c.step_ms_p95}});
  }
  json out = {
      {"label", r.label},
      {"manifest_hash", r.manifest_hash},
      {"decoder", {{"layers", r.decoder_layers}, {"hidden", r.decoder_hidden}, {"vocab", r.vocab}}},
      {"cases", cases}};
  if (r.image_encode_ms) out["image_encode_ms"] = *r.image_encode_ms;
  return out;
}

std::string bench_table(const BenchReport& r) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s decoder %zux%zu vocab %zu\n",
                r.label.empty() ? "bench" : r.label.c_str(), r.decoder_layers, r.decoder_hidden,
                r.vocab);
  out += buf;
  std::snprintf(buf, sizeof(buf), "%8s %8s %6s %12s %12s %12s %12s %12s\n", "prompt", "new", "runs",
                "prefill_p50", "prefill_p95", "decode_tok/s", "step_p50", "step_p95");
  out += buf;
  for (const auto& c : r.cases) {
    std::snprintf(buf, sizeof(buf), "%8zu %8zu %6zu %12.3f %12.3f %12.1f %12.3f %12.3f\n",
                  c.prompt_tokens, c.new_tokens, c.runs.size(), c.prefill_ms_p50, c.prefill_ms_p95,
                  c.decode_tokens_per_s, c.step_ms_p50, c.step_ms_p95);
    out += buf;
  }
  if (r.image_encode_ms) {
    std::snprintf(buf, sizeof(buf), "image encode p50 %.3f ms\n", *r.image_encode_ms);
    out += buf;
  }
  return out;
}

}  // namespace cvlm
