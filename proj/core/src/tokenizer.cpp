// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "cvlm/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <boost/regex/icu.hpp>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <set>

namespace cvlm {

const char* const kDefaultPretokenizeRegex =
    R"('s|'t|'re|'ve|'m|'ll|'d| ?\p{Letter}+| ?\p{Number}+| ?[^\s\p{Letter}\p{Number}]+|\s+(?!\S)|\s+)";

struct Tokenizer::Regex {
  boost::u32regex re;
};

namespace {

std::string utf8_encode(std::uint32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xc0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3f));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xe0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
    out += static_cast<char>(0x80 | (cp & 0x3f));
  } else {
    out += static_cast<char>(0xf0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3f));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
    out += static_cast<char>(0x80 | (cp & 0x3f));
  }
  return out;
}

// Length of the valid UTF-8 sequence starting at s[i], or 0 if invalid.
std::size_t utf8_seq_len(std::string_view s, std::size_t i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  std::size_t n;
  std::uint32_t cp;
  if (b0 < 0x80) return 1;
  if ((b0 & 0xe0) == 0xc0) {
    n = 2;
    cp = b0 & 0x1f;
  } else if ((b0 & 0xf0) == 0xe0) {
    n = 3;
    cp = b0 & 0x0f;
  } else if ((b0 & 0xf8) == 0xf0) {
    n = 4;
    cp = b0 & 0x07;
  } else {
    return 0;
  }
  if (i + n > s.size()) return 0;
  for (std::size_t k = 1; k < n; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xc0) != 0x80) return 0;
    cp = (cp << 6) | (b & 0x3f);
  }
  static constexpr std::uint32_t kMin[] = {0, 0, 0x80, 0x800, 0x10000};
  if (cp < kMin[n] || cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff)) return 0;
  return n;
}

struct ByteAlphabet {
  std::array<std::string, 256> encode;
  std::unordered_map<std::uint32_t, unsigned char> decode;

  ByteAlphabet() {
    std::uint32_t extra = 0;
    for (std::uint32_t b = 0; b < 256; ++b) {
      const bool printable = (b >= '!' && b <= '~') || (b >= 0xa1 && b <= 0xac) || b >= 0xae;
      const std::uint32_t cp = printable ? b : 256 + extra++;
      encode[b] = utf8_encode(cp);
      decode[cp] = static_cast<unsigned char>(b);
    }
  }
};

const ByteAlphabet& alphabet() {
  static const ByteAlphabet table;
  return table;
}

// Maps a vocab string back to raw bytes; code points outside the byte
// alphabet pass through as their UTF-8 encoding.
std::string token_to_bytes(const std::string& token) {
  const auto& table = alphabet();
  std::string out;
  for (std::size_t i = 0; i < token.size();) {
    std::size_t n = utf8_seq_len(token, i);
    if (n == 0) {
      out += token[i++];
      continue;
    }
    std::uint32_t cp = static_cast<unsigned char>(token[i]);
    if (n > 1) {
      cp &= 0xffu >> (n + 1);
      for (std::size_t k = 1; k < n; ++k) cp = (cp << 6) | (token[i + k] & 0x3f);
    }
    if (auto it = table.decode.find(cp); it != table.decode.end()) {
      out += static_cast<char>(it->second);
    } else {
      out.append(token, i, n);
    }
    i += n;
  }
  return out;
}

std::string merge_key(const std::string& a, const std::string& b) {
  return a + '\x01' + b;
}

}  // namespace

Tokenizer::Tokenizer(std::unordered_map<std::string, int> vocab,
                     std::vector<std::pair<std::string, std::string>> merges,
                     std::map<std::string, SpecialToken> specials, std::string pretokenize_regex)
    : vocab_(std::move(vocab)), specials_(std::move(specials)) {
  std::map<int, std::string> by_id;
  for (const auto& [token, id] : vocab_) {
    if (id < 0) throw Error(ErrorCode::kInvalidArgument, "negative id for token " + token);
    auto [it, inserted] = by_id.emplace(id, token);
    if (!inserted) {
      throw Error(ErrorCode::kParse, "duplicate id " + std::to_string(id) + " for tokens '" +
                                         it->second + "' and '" + token + "'");
    }
  }

  std::set<int> special_ids;
  int next_id = by_id.empty() ? 0 : by_id.rbegin()->first + 1;
  for (auto& [name, tok] : specials_) {
    if (tok.text.empty())
      throw Error(ErrorCode::kInvalidArgument, "special " + name + " has no text");
    if (auto it = vocab_.find(tok.text); it != vocab_.end()) {
      if (tok.id >= 0 && tok.id != it->second) {
        throw Error(ErrorCode::kInvalidArgument, "special " + name + " '" + tok.text +
                                                     "' requests id " + std::to_string(tok.id) +
                                                     " but the vocab assigns " +
                                                     std::to_string(it->second));
      }
      tok.id = it->second;
    } else {
      if (tok.id < 0) tok.id = next_id;
      if (auto clash = by_id.find(tok.id); clash != by_id.end()) {
        throw Error(ErrorCode::kInvalidArgument,
                    "special " + name + " id " + std::to_string(tok.id) + " collides with token '" +
                        clash->second + "'");
      }
      by_id.emplace(tok.id, tok.text);
      vocab_.emplace(tok.text, tok.id);
    }
    next_id = std::max(next_id, tok.id + 1);
    special_ids.insert(tok.id);
  }

  const int size = by_id.empty() ? 0 : by_id.rbegin()->first + 1;
  if (static_cast<std::size_t>(size) != by_id.size()) {
    int expect = 0;
    for (const auto& [id, token] : by_id) {
      if (id != expect) break;
      ++expect;
    }
    throw Error(ErrorCode::kInvalidArgument,
                "token ids are not dense: id " + std::to_string(expect) + " is unused");
  }
  id_bytes_.resize(static_cast<std::size_t>(size));
  special_flag_.assign(static_cast<std::size_t>(size), false);
  for (const auto& [id, token] : by_id) {
    const bool special = special_ids.count(id) > 0;
    id_bytes_[static_cast<std::size_t>(id)] = special ? token : token_to_bytes(token);
    special_flag_[static_cast<std::size_t>(id)] = special;
  }

  for (std::size_t rank = 0; rank < merges.size(); ++rank) {
    const auto& [a, b] = merges[rank];
    if (!vocab_.count(a + b)) {
      throw Error(ErrorCode::kParse, "merge " + std::to_string(rank + 1) + " '" + a + " " + b +
                                         "' produces a token missing from the vocab");
    }
    merge_rank_.emplace(merge_key(a, b), static_cast<int>(rank));
  }
  merge_count_ = merges.size();

  for (const auto& [name, tok] : specials_) {
    const bool seen = std::any_of(special_literals_.begin(), special_literals_.end(),
                                  [&](const auto& s) { return s.first == tok.text; });
    if (!seen) special_literals_.emplace_back(tok.text, tok.id);
  }
  std::sort(special_literals_.begin(), special_literals_.end(),
            [](const auto& a, const auto& b) { return a.first.size() > b.first.size(); });

  if (pretokenize_regex.empty()) pretokenize_regex = kDefaultPretokenizeRegex;
  regex_ = std::make_unique<Regex>();
  try {
    regex_->re = boost::make_u32regex(pretokenize_regex);
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kParse, std::string("bad pre-tokenizer regex: ") + e.what());
  }
}

Tokenizer::~Tokenizer() = default;
Tokenizer::Tokenizer(Tokenizer&&) noexcept = default;
Tokenizer& Tokenizer::operator=(Tokenizer&&) noexcept = default;

Tokenizer Tokenizer::load(const std::filesystem::path& vocab_path,
                          const std::filesystem::path& merges_path,
                          std::map<std::string, SpecialToken> specials,
                          std::string pretokenize_regex) {
  std::ifstream vin(vocab_path);
  if (!vin) throw Error(ErrorCode::kIo, "cannot open vocab " + vocab_path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(vin);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kParse, vocab_path.string() + ": " + e.what());
  }
  if (!doc.is_object()) throw Error(ErrorCode::kParse, vocab_path.string() + ": expected object");
  std::unordered_map<std::string, int> vocab;
  for (const auto& [token, id] : doc.items()) {
    if (!id.is_number_integer()) {
      throw Error(ErrorCode::kParse,
                  vocab_path.string() + ": id of '" + token + "' is not an integer");
    }
    vocab.emplace(token, id.get<int>());
  }

  std::ifstream min(merges_path);
  if (!min) throw Error(ErrorCode::kIo, "cannot open merges " + merges_path.string());
  std::vector<std::pair<std::string, std::string>> merges;
  std::string line;
  for (std::size_t line_no = 1; std::getline(min, line); ++line_no) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (line_no == 1 && line.rfind("#version", 0) == 0)) continue;
    const auto space = line.find(' ');
    if (space == std::string::npos || space == 0 || space + 1 == line.size() ||
        line.find(' ', space + 1) != std::string::npos) {
      throw Error(ErrorCode::kParse, merges_path.string() + ":" + std::to_string(line_no) +
                                         ": expected two space-separated tokens");
    }
    std::string a = line.substr(0, space), b = line.substr(space + 1);
    if (!vocab.count(a) || !vocab.count(b) || !vocab.count(a + b)) {
      throw Error(ErrorCode::kParse, merges_path.string() + ":" + std::to_string(line_no) +
                                         ": merge uses a token missing from the vocab");
    }
    merges.emplace_back(std::move(a), std::move(b));
  }
  return Tokenizer(std::move(vocab), std::move(merges), std::move(specials),
                   std::move(pretokenize_regex));
}

Tokenizer Tokenizer::load(const TokenizerConfig& config) {
  return load(config.resolved_vocab(), config.resolved_merges(), config.specials,
              config.pretokenize_regex);
}

std::vector<std::string> Tokenizer::pretokenize(std::string_view text) const {
  std::vector<std::string> chunks;
  auto run_regex = [&](std::string_view run) {
    const std::string s(run);
    std::string::const_iterator last = s.begin();
    boost::u32regex_iterator<std::string::const_iterator> it(s.begin(), s.end(), regex_->re), end;
    for (; it != end; ++it) {
      const auto& m = (*it)[0];
      if (m.first != last) chunks.emplace_back(last, m.first);
      if (m.first != m.second) chunks.emplace_back(m.first, m.second);
      last = m.second;
    }
    if (last != s.end()) chunks.emplace_back(last, s.end());
  };

  std::size_t start = 0, i = 0;
  while (i < text.size()) {
    const std::size_t n = utf8_seq_len(text, i);
    if (n > 0) {
      i += n;
      continue;
    }
    if (i > start) run_regex(text.substr(start, i - start));
    chunks.emplace_back(text.substr(i, 1));
    start = ++i;
  }
  if (i > start) run_regex(text.substr(start, i - start));
  return chunks;
}

std::vector<int> Tokenizer::encode_chunk(const std::string& chunk) const {
  const auto& table = alphabet();
  std::vector<std::string> symbols;
  symbols.reserve(chunk.size());
  for (unsigned char c : chunk) symbols.push_back(table.encode[c]);

  while (symbols.size() > 1) {
    int best = std::numeric_limits<int>::max();
    std::size_t best_at = 0;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = merge_rank_.find(merge_key(symbols[i], symbols[i + 1]));
      if (it != merge_rank_.end() && it->second < best) {
        best = it->second;
        best_at = i;
      }
    }
    if (best == std::numeric_limits<int>::max()) break;
    const std::string left = symbols[best_at], right = symbols[best_at + 1];
    std::vector<std::string> merged;
    merged.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size(); ++i) {
      if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
        merged.push_back(left + right);
        ++i;
      } else {
        merged.push_back(symbols[i]);
      }
    }
    symbols = std::move(merged);
  }

  std::vector<int> ids;
  ids.reserve(symbols.size());
  for (const auto& s : symbols) {
    auto it = vocab_.find(s);
    if (it == vocab_.end()) {
      throw Error(ErrorCode::kNotFound,
                  "vocab has no token for byte sequence '" + token_to_bytes(s) + "'");
    }
    ids.push_back(it->second);
  }
  return ids;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t hit = std::string_view::npos;
    int hit_id = -1;
    std::size_t hit_len = 0;
    for (const auto& [literal, id] : special_literals_) {
      const auto at = text.find(literal, pos);
      if (at < hit) {
        hit = at;
        hit_id = id;
        hit_len = literal.size();
      }
    }
    const std::string_view plain =
        text.substr(pos, hit == std::string_view::npos ? hit : hit - pos);
    for (const auto& chunk : pretokenize(plain)) {
      const auto part = encode_chunk(chunk);
      ids.insert(ids.end(), part.begin(), part.end());
    }
    if (hit == std::string_view::npos) break;
    ids.push_back(hit_id);
    pos = hit + hit_len;
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const int> ids, bool strip_specials) const {
  std::string out;
  const auto eot = special_id(kEndOfText);
  for (int id : ids) {
    const std::string& bytes = token_bytes(id);
    if (strip_specials && special_flag_[static_cast<std::size_t>(id)]) {
      if (eot && id == *eot) break;
      continue;
    }
    out += bytes;
  }
  return out;
}

const std::string& Tokenizer::token_bytes(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_bytes_.size()) {
    throw Error(ErrorCode::kOutOfRange, "invalid token id " + std::to_string(id) + " (vocab size " +
                                            std::to_string(id_bytes_.size()) + ")");
  }
  return id_bytes_[static_cast<std::size_t>(id)];
}

std::optional<int> Tokenizer::special_id(const std::string& name) const {
  auto it = specials_.find(name);
  if (it == specials_.end()) return std::nullopt;
  return it->second.id;
}

bool Tokenizer::is_special(int id) const {
  return id >= 0 && static_cast<std::size_t>(id) < special_flag_.size() &&
         special_flag_[static_cast<std::size_t>(id)];
}

namespace {

int require_special(const Tokenizer& tok, const char* name) {
  auto id = tok.special_id(name);
  if (!id) throw Error(ErrorCode::kNotFound, std::string("tokenizer has no ") + name + " token");
  return *id;
}

}  // namespace

int Tokenizer::image_id() const {
  return require_special(*this, kImagePlaceholder);
}
int Tokenizer::eot_id() const {
  return require_special(*this, kEndOfText);
}
int Tokenizer::pad_id() const {
  auto id = special_id(kPad);
  return id ? *id : eot_id();
}

}  // namespace cvlm
