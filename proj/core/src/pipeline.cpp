// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "cvlm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cvlm {

const char* const kDefaultSystemPrompt =
    "A chat between a curious human and an artificial intelligence assistant. "
    "The assistant gives helpful, detailed, and polite answers to the human's questions.";

namespace {

constexpr const char* kImageLiteral = "<image>\n";

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since)
      .count();
}

}  // namespace

std::vector<PromptSegment> render_segments(const Conversation& conv) {
  std::vector<PromptSegment> segments;
  std::string cur = conv.system.empty() ? "" : conv.system + "\n";
  for (std::size_t i = 0; i < conv.turns.size(); ++i) {
    const Turn& turn = conv.turns[i];
    const Role expected = i % 2 == 0 ? Role::kHuman : Role::kAssistant;
    if (turn.role != expected) {
      throw Error(ErrorCode::kInvalidArgument,
                  "turn " + std::to_string(i) + " must be " +
                      (expected == Role::kHuman ? "human" : "assistant") +
                      "; roles alternate starting with human");
    }
    if (turn.role == Role::kHuman) {
      cur += "USER: ";
      for (std::size_t k = 0; k < turn.images.size(); ++k) cur += kImageLiteral;
      cur += turn.text + " ";
    } else {
      if (!turn.images.empty()) {
        throw Error(ErrorCode::kInvalidArgument, "assistant turns cannot carry images");
      }
      cur += "ASSISTANT:";
      segments.push_back({std::move(cur), false});
      cur.clear();
      segments.push_back({" " + turn.text + kTurnSeparator, true});
    }
  }
  if (!conv.turns.empty() && conv.turns.back().role == Role::kHuman) cur += "ASSISTANT:";
  if (!cur.empty()) segments.push_back({std::move(cur), false});
  return segments;
}

std::string render_template(const Conversation& conv) {
  std::string out;
  for (const auto& seg : render_segments(conv)) out += seg.text;
  return out;
}

SpliceLayout splice_layout(std::span<const int> ids, int placeholder_id,
                           std::span<const std::size_t> image_lengths) {
  SpliceLayout layout;
  std::size_t row = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == placeholder_id) {
      const std::size_t k = layout.placeholders.size();
      if (k >= image_lengths.size()) break;
      layout.placeholders.push_back(i);
      layout.image_offsets.push_back(row);
      row += image_lengths[k];
    } else {
      ++row;
    }
  }
  const auto count = static_cast<std::size_t>(std::count(ids.begin(), ids.end(), placeholder_id));
  if (count != image_lengths.size()) {
    throw Error(ErrorCode::kInvalidArgument,
                "prompt has " + std::to_string(count) + " image placeholders but " +
                    std::to_string(image_lengths.size()) + " images were supplied");
  }
  layout.spliced_len = row;
  return layout;
}

template <typename T>
Tensor<T> assemble_embeddings(std::span<const int> ids, const std::vector<Tensor<T>>& image_feats,
                              const Tensor<T>& embed_table, int placeholder_id) {
  std::vector<std::size_t> lengths;
  for (const auto& f : image_feats) {
    if (f.rank() != 2 || f.dim(1) != embed_table.dim(1)) {
      throw Error(ErrorCode::kShapeMismatch, "image rows " + shape_str(f.shape()) +
                                                 " do not match embedding width " +
                                                 std::to_string(embed_table.dim(1)));
    }
    lengths.push_back(f.dim(0));
  }
  (void)splice_layout(ids, placeholder_id, lengths);
  if (ids.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "cannot assemble an empty prompt");
  }
  std::vector<Tensor<T>> parts;
  std::size_t run_start = 0, image = 0;
  for (std::size_t i = 0; i <= ids.size(); ++i) {
    if (i < ids.size() && ids[i] != placeholder_id) continue;
    if (i > run_start)
      parts.push_back(embedding_lookup(embed_table, ids.subspan(run_start, i - run_start)));
    if (i < ids.size()) parts.push_back(image_feats[image++]);
    run_start = i + 1;
  }
  return parts.size() == 1 ? parts.front() : concat_rows(parts);
}

template Tensor<float> assemble_embeddings<float>(std::span<const int>,
                                                  const std::vector<Tensor<float>>&,
                                                  const Tensor<float>&, int);
template Tensor<double> assemble_embeddings<double>(std::span<const int>,
                                                    const std::vector<Tensor<double>>&,
                                                    const Tensor<double>&, int);

void SamplingParams::validate() const {
  if (max_new_tokens == 0) throw Error(ErrorCode::kInvalidArgument, "max_new_tokens must be >= 1");
  if (!(temperature >= 0) || !std::isfinite(temperature)) {
    throw Error(ErrorCode::kInvalidArgument, "temperature must be finite and >= 0");
  }
  if (!(top_p > 0 && top_p <= 1))
    throw Error(ErrorCode::kInvalidArgument, "top_p must be in (0, 1]");
}

std::size_t argmax(std::span<const float> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

std::size_t sample_top_p(std::span<const float> logits, double temperature, double top_p,
                         std::mt19937_64& rng) {
  const std::size_t n = logits.size();
  double mx = -INFINITY;
  for (float v : logits) mx = std::max(mx, static_cast<double>(v) / temperature);
  std::vector<double> probs(n);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    probs[i] = std::exp(static_cast<double>(logits[i]) / temperature - mx);
    total += probs[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  double kept = 0;
  std::size_t count = 0;
  while (count < n) {
    kept += probs[order[count++]] / total;
    if (kept >= top_p) break;
  }
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * kept;
  double acc = 0;
  for (std::size_t i = 0; i < count; ++i) {
    acc += probs[order[i]] / total;
    if (u < acc) return order[i];
  }
  return order[count - 1];
}

const char* finish_reason_name(FinishReason reason) {
  switch (reason) {
    case FinishReason::kNone:
      return "none";
    case FinishReason::kEndOfText:
      return "end_of_text";
    case FinishReason::kStopSequence:
      return "stop";
    case FinishReason::kLength:
      return "length";
  }
  return "none";
}

GenerationSession::GenerationSession(const Model& model, const Conversation& conv,
                                     SamplingParams params)
    : model_(model), params_(params), rng_(params.seed), start_(std::chrono::steady_clock::now()) {
  params_.validate();
  if (conv.turns.empty() || conv.turns.back().role != Role::kHuman) {
    throw Error(ErrorCode::kInvalidArgument, "conversation must end with a human turn");
  }
  const Tokenizer& tok = *model.tokenizer;
  input_ids_ = tok.encode(render_template(conv));

  std::vector<Tensor<float>> feats;
  std::vector<std::size_t> lengths;
  for (const auto& turn : conv.turns) {
    for (const auto& img : turn.images) {
      feats.push_back(image_embeddings(model, img));
      lengths.push_back(feats.back().dim(0));
    }
  }
  layout_ = splice_layout(input_ids_, tok.image_id(), lengths);
  const std::size_t max_seq = model.manifest.decoder.max_seq;
  if (layout_.spliced_len + params_.max_new_tokens > max_seq) {
    throw Error(ErrorCode::kContextOverflow,
                "prompt occupies " + std::to_string(layout_.spliced_len) + " positions; with " +
                    std::to_string(params_.max_new_tokens) + " new tokens it exceeds max_seq " +
                    std::to_string(max_seq));
  }
  prompt_embeds_ =
      assemble_embeddings(input_ids_, feats, param(model.weights, "decoder.embed"), tok.image_id());
}

std::size_t GenerationSession::sample(std::span<const float> logits) {
  const auto live = logits.first(std::min(logits.size(), model_.tokenizer->size()));
  if (params_.temperature == 0.0) return argmax(live);
  return sample_top_p(live, params_.temperature, params_.top_p, rng_);
}

namespace {

// Bytes at the end of `s` that must wait: a partial stop sequence or an
// incomplete UTF-8 character.
std::size_t held_suffix(const std::string& s) {
  const std::string stop = kTurnSeparator;
  std::size_t hold = 0;
  for (std::size_t k = std::min(s.size(), stop.size() - 1); k > 0; --k) {
    if (s.compare(s.size() - k, k, stop, 0, k) == 0) {
      hold = k;
      break;
    }
  }
  for (std::size_t back = 1; back <= std::min<std::size_t>(3, s.size()); ++back) {
    const auto b = static_cast<unsigned char>(s[s.size() - back]);
    if ((b & 0xc0) == 0x80) continue;
    std::size_t need = 1;
    if ((b & 0xe0) == 0xc0)
      need = 2;
    else if ((b & 0xf0) == 0xe0)
      need = 3;
    else if ((b & 0xf8) == 0xf0)
      need = 4;
    if (need > back) hold = std::max(hold, back);
    break;
  }
  return hold;
}

}  // namespace

std::optional<TokenEvent> GenerationSession::step() {
  if (stopped()) return std::nullopt;
  const auto t0 = std::chrono::steady_clock::now();
  const auto& cfg = model_.manifest.decoder;
  const auto& w = model_.weights;
  Tensor<float> last_hidden;
  if (emitted_.empty()) {
    std::vector<int> positions(layout_.spliced_len);
    std::iota(positions.begin(), positions.end(), 0);
    auto out =
        decoder_forward<float>(prompt_embeds_, positions, w, cfg, nullptr, model_.manifest.gelu);
    cache_ = std::move(out.cache);
    last_hidden = slice_rows(out.hidden, layout_.spliced_len - 1, 1);
  } else {
    const int pos = static_cast<int>(cache_.length());
    const int id = emitted_.back();
    auto out = decoder_forward<float>(embed_tokens<float>(std::span<const int>(&id, 1), w),
                                      std::span<const int>(&pos, 1), w, cfg, &cache_,
                                      model_.manifest.gelu);
    cache_ = std::move(out.cache);
    last_hidden = out.hidden;
  }
  const auto logits = lm_logits(last_hidden, w, cfg);
  const int id = static_cast<int>(sample(logits.data()));
  emitted_.push_back(id);

  TokenEvent event;
  event.id = id;
  event.index = emitted_.size() - 1;
  const Tokenizer& tok = *model_.tokenizer;
  if (id == tok.eot_id()) {
    finish_ = FinishReason::kEndOfText;
    event.text = std::move(pending_);
  } else {
    pending_ += tok.token_bytes(id);
    const auto stop = pending_.find(kTurnSeparator);
    if (stop != std::string::npos) {
      finish_ = FinishReason::kStopSequence;
      event.text = pending_.substr(0, stop);
    } else if (emitted_.size() >= params_.max_new_tokens) {
      finish_ = FinishReason::kLength;
      event.text = std::move(pending_);
    } else {
      const std::size_t keep = pending_.size() - held_suffix(pending_);
      event.text = pending_.substr(0, keep);
      pending_.erase(0, keep);
    }
    if (stopped()) pending_.clear();
  }
  text_ += event.text;

  const double ms = elapsed_ms(t0);
  if (emitted_.size() == 1) {
    timing_.prefill_ms = ms;
    timing_.first_token_ms = elapsed_ms(start_);
  } else {
    timing_.decode_ms += ms;
  }
  return event;
}

Usage GenerationSession::usage() const {
  return {input_ids_.size(), layout_.spliced_len, emitted_.size()};
}

GenerationResult generate(const Model& model, const Conversation& conv,
                          const SamplingParams& params,
                          const std::function<void(const TokenEvent&)>& on_token) {
  GenerationSession session(model, conv, params);
  while (auto event = session.step()) {
    if (on_token) on_token(*event);
  }
  return {session.text(), session.emitted(), session.finish_reason(), session.usage(),
          session.timing()};
}

}  // namespace cvlm
