// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include <numeric>
#include <random>

#include "cvlm/archive.hpp"
#include "cvlm/decoder.hpp"
#include "cvlm/model.hpp"
#include "cvlm/pipeline.hpp"
#include "cvlm/vision.hpp"

namespace cvlm {
namespace {

Tensor<float> random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n;
  std::vector<float> data(shape_numel(shape));
  for (auto& v : data) v = n(rng);
  return Tensor<float>(std::move(shape), std::move(data));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_Attention(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  const auto q = random_tensor({t, 8, 64}, 1), k = random_tensor({t, 8, 64}, 2),
             v = random_tensor({t, 8, 64}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(attention(q, k, v, AttentionMask{true, 0}));
}
BENCHMARK(BM_Attention)->Arg(64)->Arg(256);

const Model& toy() {
  static const Model model = [] {
    auto m = load_manifest(CVLM_TOY_MANIFEST);
    auto tok = Tokenizer::load(m.tokenizer);
    auto w = init_random(m, 1);
    return make_model(std::move(m), std::move(tok), std::move(w));
  }();
  return model;
}

void BM_DecodeStep(benchmark::State& state) {
  const auto& model = toy();
  const auto& cfg = model.manifest.decoder;
  const auto context = static_cast<std::size_t>(state.range(0));
  std::vector<int> ids(context);
  for (std::size_t i = 0; i < context; ++i) ids[i] = static_cast<int>(i % cfg.vocab);
  std::vector<int> positions(context);
  std::iota(positions.begin(), positions.end(), 0);
  const auto prefill = decoder_forward<float>(embed_tokens<float>(ids, model.weights), positions,
                                              model.weights, cfg);
  const int next = 7;
  const int pos = static_cast<int>(context);
  for (auto _ : state) {
    auto out =
        decoder_forward<float>(embed_tokens<float>(std::span<const int>(&next, 1), model.weights),
                               std::span<const int>(&pos, 1), model.weights, cfg, &prefill.cache);
    benchmark::DoNotOptimize(lm_logits(out.hidden, model.weights, cfg));
  }
}
BENCHMARK(BM_DecodeStep)->Arg(16)->Arg(256);

void BM_EncodeImage(benchmark::State& state) {
  const auto& model = toy();
  RgbImage img{32, 32, std::vector<std::uint8_t>(32 * 32 * 3, 128)};
  for (auto _ : state) benchmark::DoNotOptimize(image_embeddings(model, img));
}
BENCHMARK(BM_EncodeImage);

void BM_Tokenize(benchmark::State& state) {
  const auto& tok = *toy().tokenizer;
  const std::string text =
      "USER: <image>\nIs there a cat in the picture? ASSISTANT: yes, the cat is on the mat.</s>";
  for (auto _ : state) benchmark::DoNotOptimize(tok.encode(text));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(text.size()));
}
BENCHMARK(BM_Tokenize);

}  // namespace
}  // namespace cvlm

BENCHMARK_MAIN();
