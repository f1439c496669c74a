// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

// Prompt rendering, image splicing and incremental generation.

#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cvlm/decoder.hpp"
#include "cvlm/model.hpp"

namespace cvlm {

extern const char* const kDefaultSystemPrompt;
inline constexpr const char* kTurnSeparator = "</s>";

enum class Role { kHuman, kAssistant };

struct Turn {
  Role role = Role::kHuman;
  std::string text;
  // Rendered as one "<image>\n" each, ahead of the text.
  std::vector<RgbImage> images;
};

struct Conversation {
  std::string system;
  std::vector<Turn> turns;
};

struct PromptSegment {
  std::string text;
  bool reply = false;  // assistant reply text including its closing separator
};

// Rendered prompt split so that assistant replies (" {reply}</s>") are
// separate segments; the concatenation equals render_template(conv).
std::vector<PromptSegment> render_segments(const Conversation& conv);
std::string render_template(const Conversation& conv);

struct SpliceLayout {
  std::vector<std::size_t> placeholders;   // indices into the token ids
  std::vector<std::size_t> image_offsets;  // first spliced row of each image
  std::size_t spliced_len = 0;
};

// L = len(ids) - #placeholders + sum(image_lengths).
SpliceLayout splice_layout(std::span<const int> ids, int placeholder_id,
                           std::span<const std::size_t> image_lengths);

// Embeds text ids and replaces each placeholder by its image rows.
template <typename T>
Tensor<T> assemble_embeddings(std::span<const int> ids, const std::vector<Tensor<T>>& image_feats,
                              const Tensor<T>& embed_table, int placeholder_id);

struct SamplingParams {
  std::size_t max_new_tokens = 64;
  double temperature = 0.0;
  double top_p = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Index of the greedy choice; ties go to the lowest id.
std::size_t argmax(std::span<const float> logits);

// Temperature-scaled nucleus sampling over `logits`. Candidates are ordered by
// probability (ties by lower id) and kept until the mass reaches top_p.
std::size_t sample_top_p(std::span<const float> logits, double temperature, double top_p,
                         std::mt19937_64& rng);

enum class FinishReason { kNone, kEndOfText, kStopSequence, kLength };
const char* finish_reason_name(FinishReason reason);

struct TokenEvent {
  int id = 0;
  std::string text;  // may be empty while bytes are held back
  std::size_t index = 0;
};

struct Usage {
  std::size_t prompt_tokens = 0;
  std::size_t spliced_tokens = 0;
  std::size_t new_tokens = 0;
};

struct Timing {
  double prefill_ms = 0;
  double decode_ms = 0;
  double first_token_ms = 0;
};

class GenerationSession {
 public:
  // Renders, tokenizes and splices the conversation; images are encoded and
  // projected here. Throws kContextOverflow when spliced_len + max_new_tokens
  // exceeds max_seq.
  GenerationSession(const Model& model, const Conversation& conv, SamplingParams params);

  // Samples one token; nullopt once stopped.
  std::optional<TokenEvent> step();

  bool stopped() const { return finish_ != FinishReason::kNone; }
  FinishReason finish_reason() const { return finish_; }
  const std::vector<int>& input_ids() const { return input_ids_; }
  const std::vector<int>& emitted() const { return emitted_; }
  const SpliceLayout& layout() const { return layout_; }
  const std::string& text() const { return text_; }
  Usage usage() const;
  const Timing& timing() const { return timing_; }

 private:
  std::size_t sample(std::span<const float> logits);

  const Model& model_;
  SamplingParams params_;
  std::mt19937_64 rng_;
  std::vector<int> input_ids_;
  SpliceLayout layout_;
  Tensor<float> prompt_embeds_;
  KVCache<float> cache_;
  std::vector<int> emitted_;
  std::string pending_;
  std::string text_;
  FinishReason finish_ = FinishReason::kNone;
  Timing timing_;
  std::chrono::steady_clock::time_point start_;
};

struct GenerationResult {
  std::string text;
  std::vector<int> tokens;
  FinishReason finish_reason = FinishReason::kNone;
  Usage usage;
  Timing timing;
};

// Runs a session to completion, invoking on_token (if set) per event.
GenerationResult generate(const Model& model, const Conversation& conv,
                          const SamplingParams& params,
                          const std::function<void(const TokenEvent&)>& on_token = {});

}  // namespace cvlm
