// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

// Byte-level BPE in the GPT-2 family: text is split by a pre-tokenizer regex,
// each chunk's UTF-8 bytes are mapped to printable code points, and ranked
// merges are applied greedily (lowest rank first) until none applies.

#pragma once

#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cvlm/manifest.hpp"

namespace cvlm {

inline constexpr const char* kImagePlaceholder = "IMAGE_PLACEHOLDER";
inline constexpr const char* kEndOfText = "END_OF_TEXT";
inline constexpr const char* kPad = "PAD";

// GPT-2 pre-tokenizer pattern (ICU property names).
extern const char* const kDefaultPretokenizeRegex;

class Tokenizer {
 public:
  // `vocab` maps token strings (in the byte-to-unicode alphabet) to ids;
  // `merges` is in priority order. Specials are added unless their literal is
  // already present with the same id.
  Tokenizer(std::unordered_map<std::string, int> vocab,
            std::vector<std::pair<std::string, std::string>> merges,
            std::map<std::string, SpecialToken> specials, std::string pretokenize_regex = {});
  ~Tokenizer();
  Tokenizer(Tokenizer&&) noexcept;
  Tokenizer& operator=(Tokenizer&&) noexcept;

  static Tokenizer load(const std::filesystem::path& vocab_path,
                        const std::filesystem::path& merges_path,
                        std::map<std::string, SpecialToken> specials,
                        std::string pretokenize_regex = {});
  static Tokenizer load(const TokenizerConfig& config);

  std::vector<int> encode(std::string_view text) const;

  // With strip_specials, output stops before the first END_OF_TEXT and other
  // special tokens are dropped.
  std::string decode(std::span<const int> ids, bool strip_specials = false) const;

  // Raw bytes of one token (the special literal for specials).
  const std::string& token_bytes(int id) const;

  std::size_t size() const { return id_bytes_.size(); }
  std::size_t merge_count() const { return merge_count_; }
  std::optional<int> special_id(const std::string& name) const;
  bool is_special(int id) const;
  int image_id() const;
  int eot_id() const;
  int pad_id() const;

  // Pre-tokenizer chunks of a special-free string; concatenation equals input.
  std::vector<std::string> pretokenize(std::string_view text) const;

 private:
  struct Regex;

  std::vector<int> encode_chunk(const std::string& chunk) const;

  std::unordered_map<std::string, int> vocab_;
  std::unordered_map<std::string, int> merge_rank_;  // key: left + '\x01' + right
  std::size_t merge_count_ = 0;
  std::vector<std::string> id_bytes_;
  std::vector<bool> special_flag_;
  std::map<std::string, SpecialToken> specials_;
  std::vector<std::pair<std::string, int>> special_literals_;  // longest first
  std::unique_ptr<Regex> regex_;
};

}  // namespace cvlm
