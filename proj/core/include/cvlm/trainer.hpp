// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

// Text-only SFT and the two VLM stages (projector pretraining, then
// projector + decoder instruction tuning). The vision tower is always frozen,
// so its features are computed once per image and reused.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "cvlm/model.hpp"
#include "cvlm/pipeline.hpp"

namespace cvlm {

enum class Stage { kSft, kStage1, kStage2 };
enum class Schedule { kConstant, kLinearDecay, kCosine };

const char* stage_name(Stage stage);
Stage parse_stage(const std::string& name);  // sft|sft_text|stage1|stage1_pretrain|stage2|...
const char* schedule_name(Schedule schedule);
Schedule parse_schedule(const std::string& name);

struct TrainConfig {
  Stage stage = Stage::kStage1;
  double lr = 1e-3;
  Schedule schedule = Schedule::kCosine;
  std::size_t epochs = 1;
  std::size_t batch_size = 256;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-7;
  double warmup_ratio = 0.03;
  bool decoupled_weight_decay = true;
  std::uint64_t seed = 0;
  std::string system = kDefaultSystemPrompt;

  static TrainConfig preset(Stage stage);
  // Name prefixes of the trainable parameter group.
  std::vector<std::string> trainable_prefixes() const;
  bool is_trainable(const std::string& name) const;
  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& cfg);

struct SftSample {
  std::vector<Turn> turns;  // text only; images stay as "<image>" literals
  std::optional<std::filesystem::path> image;
};

// One ShareGPT-style record: {"conversations": [{"from", "value"}...],
// "image": optional}.
SftSample sample_from_json(const nlohmann::json& record);

// JSON-lines; relative image paths resolve against `image_root` (default: the
// dataset's directory).
std::vector<SftSample> load_dataset(const std::filesystem::path& path,
                                    std::optional<std::filesystem::path> image_root = {});

struct TrainExample {
  std::vector<int> ids;        // prompt token ids, including any placeholder
  std::size_t image_rows = 0;  // P when the sample carries an image
  std::vector<int> targets;    // per spliced position: next token, or -1
  std::vector<bool> mask;      // true where the next token is reply text
  std::size_t spliced_len = 0;
};

// Tokenizes segment by segment so reply tokens (" {reply}</s>") are known
// exactly, then truncates to max_seq.
TrainExample build_example(const SftSample& sample, const Tokenizer& tokenizer,
                           const ModelManifest& manifest, const std::string& system);

template <typename T>
struct OptimizerState {
  std::map<std::string, std::vector<T>> m;
  std::map<std::string, std::vector<T>> v;
  std::size_t step = 0;
};

// Bias-corrected Adam over every parameter with requires_grad; decoupled:
// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p). Tensors that received
// no gradient are treated as g = 0. Throws kNonFinite naming the tensor before
// any parameter is modified.
template <typename T>
void adam_step(ParamMap<T>& params, OptimizerState<T>& state, const TrainConfig& cfg,
               double step_lr);

// Warmup of round(warmup_ratio * total) steps ramps (step + 1) / W, then the
// schedule runs over the remaining steps.
double lr_at(const TrainConfig& cfg, std::size_t step, std::size_t total_steps);

struct StepLog {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
};

struct TrainResult {
  ParamMap<float> weights;
  std::vector<StepLog> log;
};

std::size_t total_steps(const TrainConfig& cfg, std::size_t dataset_size);

// Masked-mean next-token loss of one example; records onto the active tape
// when parameters require gradients. A batch averages these per sample.
Tensor<float> example_loss(const TrainExample& ex, const std::optional<Tensor<float>>& features,
                           const ParamMap<float>& params, const ModelManifest& manifest,
                           int image_id);

TrainResult train_stage(const Model& model, const std::vector<SftSample>& data,
                        const TrainConfig& cfg,
                        const std::function<void(const StepLog&)>& on_step = {});

void write_loss_csv(const std::filesystem::path& path, const std::vector<StepLog>& log);

}  // namespace cvlm
