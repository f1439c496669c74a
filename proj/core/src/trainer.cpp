// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "cvlm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "cvlm/decoder.hpp"
#include "cvlm/projector.hpp"

namespace cvlm {

using nlohmann::json;
namespace fs = std::filesystem;

const char* stage_name(Stage stage) {
  switch (stage) {
    case Stage::kSft:
      return "sft_text";
    case Stage::kStage1:
      return "stage1_pretrain";
    case Stage::kStage2:
      return "stage2_finetune";
  }
  return "?";
}

Stage parse_stage(const std::string& name) {
  if (name == "sft" || name == "sft_text") return Stage::kSft;
  if (name == "stage1" || name == "stage1_pretrain") return Stage::kStage1;
  if (name == "stage2" || name == "stage2_finetune") return Stage::kStage2;
  throw Error(ErrorCode::kInvalidArgument, "unknown stage '" + name + "'");
}

const char* schedule_name(Schedule schedule) {
  switch (schedule) {
    case Schedule::kConstant:
      return "constant";
    case Schedule::kLinearDecay:
      return "linear_decay";
    case Schedule::kCosine:
      return "cosine";
  }
  return "?";
}

Schedule parse_schedule(const std::string& name) {
  if (name == "constant") return Schedule::kConstant;
  if (name == "linear_decay" || name == "linear") return Schedule::kLinearDecay;
  if (name == "cosine") return Schedule::kCosine;
  throw Error(ErrorCode::kInvalidArgument, "unknown schedule '" + name + "'");
}

TrainConfig TrainConfig::preset(Stage stage) {
  TrainConfig cfg;
  cfg.stage = stage;
  switch (stage) {
    case Stage::kSft:
      cfg.lr = 3e-5;
      cfg.epochs = 2;
      cfg.schedule = Schedule::kLinearDecay;
      cfg.warmup_ratio = 0.0;
      break;
    case Stage::kStage1:
      cfg.lr = 1e-3;
      break;
    case Stage::kStage2:
      cfg.lr = 2e-5;
      break;
  }
  return cfg;
}

std::vector<std::string> TrainConfig::trainable_prefixes() const {
  switch (stage) {
    case Stage::kSft:
      return {"decoder."};
    case Stage::kStage1:
      return {"projector."};
    case Stage::kStage2:
      return {"projector.", "decoder."};
  }
  return {};
}

bool TrainConfig::is_trainable(const std::string& name) const {
  for (const auto& p : trainable_prefixes()) {
    if (name.rfind(p, 0) == 0) return true;
  }
  return false;
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error(ErrorCode::kInvalidArgument, what); };
  if (!(lr > 0) || !std::isfinite(lr)) bad("lr must be positive");
  if (epochs == 0) bad("epochs must be >= 1");
  if (batch_size == 0) bad("batch_size must be >= 1");
  if (!(weight_decay >= 0)) bad("weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) bad("betas must be in [0, 1)");
  if (!(eps > 0)) bad("eps must be positive");
  if (!(warmup_ratio >= 0 && warmup_ratio < 1)) bad("warmup_ratio must be in [0, 1)");
}

json train_config_to_json(const TrainConfig& cfg) {
  return {{"stage", stage_name(cfg.stage)},
          {"lr", cfg.lr},
          {"schedule", schedule_name(cfg.schedule)},
          {"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"weight_decay", cfg.weight_decay},
          {"betas", {cfg.beta1, cfg.beta2}},
          {"eps", cfg.eps},
          {"warmup_ratio", cfg.warmup_ratio},
          {"decoupled_weight_decay", cfg.decoupled_weight_decay},
          {"seed", cfg.seed},
          {"trainable", cfg.trainable_prefixes()}};
}

// ---- data -------------------------------------------------------------------

SftSample sample_from_json(const json& record) {
  SftSample sample;
  try {
    for (const auto& msg : record.at("conversations")) {
      const auto from = msg.at("from").get<std::string>();
      Turn turn;
      if (from == "human" || from == "user") {
        turn.role = Role::kHuman;
      } else if (from == "gpt" || from == "assistant") {
        turn.role = Role::kAssistant;
      } else {
        throw Error(ErrorCode::kParse, "unknown speaker '" + from + "'");
      }
      turn.text = msg.at("value").get<std::string>();
      sample.turns.push_back(std::move(turn));
    }
    if (auto it = record.find("image"); it != record.end() && !it->is_null()) {
      sample.image = it->get<std::string>();
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("sample: ") + e.what());
  }
  for (std::size_t i = 0; i < sample.turns.size(); ++i) {
    if ((sample.turns[i].role == Role::kHuman) != (i % 2 == 0)) {
      throw Error(ErrorCode::kParse, "sample turns must alternate starting with human");
    }
  }
  return sample;
}

std::vector<SftSample> load_dataset(const fs::path& path, std::optional<fs::path> image_root) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open dataset " + path.string());
  const fs::path root = image_root ? *image_root : path.parent_path();
  std::vector<SftSample> out;
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto sample = sample_from_json(json::parse(line));
      if (sample.image && sample.image->is_relative()) sample.image = root / *sample.image;
      out.push_back(std::move(sample));
    } catch (const std::exception& e) {
      throw Error(ErrorCode::kParse,
                  path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (out.empty())
    throw Error(ErrorCode::kInvalidArgument, "dataset " + path.string() + " is empty");
  return out;
}

TrainExample build_example(const SftSample& sample, const Tokenizer& tok,
                           const ModelManifest& manifest, const std::string& system) {
  bool has_reply = false;
  for (const auto& turn : sample.turns) {
    if (turn.role != Role::kAssistant) continue;
    if (turn.text.empty()) throw Error(ErrorCode::kInvalidArgument, "empty assistant turn");
    has_reply = true;
  }
  if (!has_reply) throw Error(ErrorCode::kInvalidArgument, "sample has no assistant turn");

  std::vector<int> ids;
  std::vector<bool> reply;
  for (const auto& seg : render_segments(Conversation{system, sample.turns})) {
    const auto part = tok.encode(seg.text);
    ids.insert(ids.end(), part.begin(), part.end());
    reply.insert(reply.end(), part.size(), seg.reply);
  }

  const int image_id = tok.image_id();
  const auto placeholders = std::count(ids.begin(), ids.end(), image_id);
  if (placeholders != (sample.image ? 1 : 0)) {
    throw Error(ErrorCode::kInvalidArgument, "sample has " + std::to_string(placeholders) +
                                                 " <image> markers but " +
                                                 (sample.image ? "one image" : "no image"));
  }

  TrainExample ex;
  ex.image_rows = sample.image ? manifest.vision.num_patches() : 0;
  std::vector<int> spliced;
  std::vector<bool> spliced_reply;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == image_id && sample.image) {
      spliced.insert(spliced.end(), ex.image_rows, -1);
      spliced_reply.insert(spliced_reply.end(), ex.image_rows, false);
    } else {
      spliced.push_back(ids[i]);
      spliced_reply.push_back(reply[i]);
    }
  }

  const std::size_t max_seq = manifest.decoder.max_seq;
  if (spliced.size() > max_seq) {
    std::size_t rows = 0, keep_ids = 0;
    for (; keep_ids < ids.size(); ++keep_ids) {
      const std::size_t w = (ids[keep_ids] == image_id && sample.image) ? ex.image_rows : 1;
      if (rows + w > max_seq) break;
      rows += w;
    }
    if (std::find(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(keep_ids), image_id) ==
            ids.begin() + static_cast<std::ptrdiff_t>(keep_ids) &&
        sample.image) {
      throw Error(ErrorCode::kContextOverflow, "image does not fit within max_seq");
    }
    ids.resize(keep_ids);
    spliced.resize(rows);
    spliced_reply.resize(rows);
  }

  ex.ids = std::move(ids);
  ex.spliced_len = spliced.size();
  ex.targets.assign(ex.spliced_len, -1);
  ex.mask.assign(ex.spliced_len, false);
  for (std::size_t t = 0; t + 1 < ex.spliced_len; ++t) {
    ex.targets[t] = spliced[t + 1];
    ex.mask[t] = spliced_reply[t + 1];
  }
  if (std::none_of(ex.mask.begin(), ex.mask.end(), [](bool b) { return b; })) {
    throw Error(ErrorCode::kContextOverflow, "no reply tokens fit within max_seq");
  }
  return ex;
}

// ---- optimization -------------------------------------------------------------

template <typename T>
void adam_step(ParamMap<T>& params, OptimizerState<T>& state, const TrainConfig& cfg,
               double step_lr) {
  for (const auto& [name, p] : params) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    for (T g : p.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw Error(ErrorCode::kNonFinite, "non-finite gradient in " + name);
      }
    }
  }
  ++state.step;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    if (!p.requires_grad()) continue;
    auto data = p.mutable_data();
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(data.size(), T(0));
      v.assign(data.size(), T(0));
    }
    const bool has_grad = p.has_grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double w = static_cast<double>(data[i]);
      double g = has_grad ? static_cast<double>(p.grad()[i]) : 0.0;
      if (!cfg.decoupled_weight_decay) g += cfg.weight_decay * w;
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * g;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      double update = (mi / c1) / (std::sqrt(vi / c2) + cfg.eps);
      if (cfg.decoupled_weight_decay) update += cfg.weight_decay * w;
      data[i] = static_cast<T>(w - step_lr * update);
    }
  }
}

template void adam_step<float>(ParamMap<float>&, OptimizerState<float>&, const TrainConfig&,
                               double);
template void adam_step<double>(ParamMap<double>&, OptimizerState<double>&, const TrainConfig&,
                                double);

double lr_at(const TrainConfig& cfg, std::size_t step, std::size_t total) {
  if (total == 0) return cfg.lr;
  step = std::min(step, total);
  const auto warmup =
      static_cast<std::size_t>(std::llround(cfg.warmup_ratio * static_cast<double>(total)));
  if (step < warmup) {
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  const double span = static_cast<double>(total - warmup);
  const double frac = span > 0 ? static_cast<double>(step - warmup) / span : 1.0;
  switch (cfg.schedule) {
    case Schedule::kConstant:
      return cfg.lr;
    case Schedule::kLinearDecay:
      return cfg.lr * (1.0 - frac);
    case Schedule::kCosine:
      return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  }
  return cfg.lr;
}

std::size_t total_steps(const TrainConfig& cfg, std::size_t dataset_size) {
  return cfg.epochs * ((dataset_size + cfg.batch_size - 1) / cfg.batch_size);
}

Tensor<float> example_loss(const TrainExample& ex, const std::optional<Tensor<float>>& features,
                           const ParamMap<float>& params, const ModelManifest& manifest,
                           int image_id) {
  std::vector<Tensor<float>> images;
  if (ex.image_rows > 0) {
    if (!features) throw Error(ErrorCode::kInvalidArgument, "example needs image features");
    images.push_back(project(*features, params, manifest.gelu));
  }
  const auto embeds =
      assemble_embeddings<float>(ex.ids, images, param(params, "decoder.embed"), image_id);
  std::vector<int> positions(ex.spliced_len);
  std::iota(positions.begin(), positions.end(), 0);
  const auto out =
      decoder_forward<float>(embeds, positions, params, manifest.decoder, nullptr, manifest.gelu);
  const auto logits = lm_logits(out.hidden, params, manifest.decoder);
  return cross_entropy(logits, ex.targets, ex.mask);
}

TrainResult train_stage(const Model& model, const std::vector<SftSample>& data,
                        const TrainConfig& cfg,
                        const std::function<void(const StepLog&)>& on_step) {
  cfg.validate();
  if (data.empty()) throw Error(ErrorCode::kInvalidArgument, "training set is empty");
  const auto& manifest = model.manifest;
  const Tokenizer& tok = *model.tokenizer;

  std::vector<TrainExample> examples;
  std::vector<std::optional<Tensor<float>>> features;
  std::map<std::string, Tensor<float>> feature_cache;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& sample = data[i];
    if (cfg.stage == Stage::kSft && sample.image) {
      throw Error(ErrorCode::kInvalidArgument,
                  "sample " + std::to_string(i) + " has an image; sft_text takes text only");
    }
    examples.push_back(build_example(sample, tok, manifest, cfg.system));
    if (sample.image) {
      const auto key = sample.image->string();
      auto it = feature_cache.find(key);
      if (it == feature_cache.end()) {
        it = feature_cache.emplace(key, image_features(model, load_image(*sample.image))).first;
      }
      features.emplace_back(it->second);
    } else {
      features.emplace_back(std::nullopt);
    }
  }

  TrainResult result;
  for (const auto& [name, t] : model.weights) {
    auto copy = t.detach();
    if (cfg.is_trainable(name)) copy.set_requires_grad(true);
    result.weights.emplace(name, std::move(copy));
  }

  OptimizerState<float> state;
  const std::size_t total = total_steps(cfg, data.size());
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::size_t step = 0;
  const int image_id = tok.image_id();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++step) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const float inv = 1.0f / static_cast<float>(end - begin);
      double batch_loss = 0;
      for (std::size_t j = begin; j < end; ++j) {
        const std::size_t idx = order[j];
        Tape<float> tape;
        TapeScope<float> scope(tape);
        auto loss = example_loss(examples[idx], features[idx], result.weights, manifest, image_id);
        const double value = loss.item();
        if (!std::isfinite(value)) {
          throw Error(ErrorCode::kNonFinite, "non-finite loss at step " + std::to_string(step));
        }
        batch_loss += value;
        tape.backward(scale(loss, inv));
      }
      const double lr = lr_at(cfg, step, total);
      adam_step(result.weights, state, cfg, lr);
      for (auto& [name, t] : result.weights) t.zero_grad();
      StepLog entry{step, lr, batch_loss / static_cast<double>(end - begin)};
      result.log.push_back(entry);
      if (on_step) on_step(entry);
    }
  }
  for (auto& [name, t] : result.weights) t.set_requires_grad(false);
  return result;
}

void write_loss_csv(const fs::path& path, const std::vector<StepLog>& log) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << "step,lr,loss\n";
  char buf[96];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6e,%.6f\n", e.step, e.lr, e.loss);
    out << buf;
  }
}

}  // namespace cvlm
