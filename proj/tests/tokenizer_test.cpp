// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "cvlm/tokenizer.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "support.hpp"

namespace cvlm {
namespace {

using testing::TempDir;

Tokenizer tiny() {
  return Tokenizer({{"a", 0}, {"b", 1}, {"ab", 2}, {"c", 3}}, {{"a", "b"}},
                   {{kEndOfText, {"<|endoftext|>", -1}}});
}

Tokenizer toy() {
  return Tokenizer::load(testing::toy_manifest().tokenizer);
}

TEST(Tokenizer, TinyVocabCountsSpecials) {
  auto tok = tiny();
  EXPECT_EQ(tok.size(), 5u);
  EXPECT_EQ(tok.merge_count(), 1u);
  EXPECT_EQ(tok.eot_id(), 4);
}

TEST(Tokenizer, HandTracedMerge) {
  auto tok = tiny();
  EXPECT_EQ(tok.encode("abab"), (std::vector<int>{2, 2}));
  EXPECT_EQ(tok.encode("abc"), (std::vector<int>{2, 3}));
  EXPECT_TRUE(tok.encode("").empty());
  EXPECT_EQ(tok.decode(std::vector<int>{}), "");
}

TEST(Tokenizer, CollidingSpecialIdIsRejected) {
  EXPECT_THROW(Tokenizer({{"a", 0}, {"b", 1}}, {}, {{kEndOfText, {"<|endoftext|>", 1}}}), Error);
  EXPECT_THROW(Tokenizer({{"a", 0}, {"b", 1}}, {},
                         {{kEndOfText, {"<eot>", 2}}, {kImagePlaceholder, {"<image>", 2}}}),
               Error);
}

TEST(Tokenizer, DuplicateAndSparseIdsAreRejected) {
  EXPECT_THROW(Tokenizer({{"a", 0}, {"b", 0}}, {}, {}), Error);
  EXPECT_THROW(Tokenizer({{"a", 0}, {"b", 2}}, {}, {}), Error);
}

TEST(Tokenizer, MergesFileErrorsCarryLineNumbers) {
  TempDir dir;
  std::ofstream(dir / "vocab.json") << R"({"a": 0, "b": 1, "ab": 2})";
  std::ofstream(dir / "merges.txt") << "#version: 0.2\na b\nbroken\n";
  try {
    Tokenizer::load(dir / "vocab.json", dir / "merges.txt", {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParse);
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
}

TEST(Tokenizer, EmptyMergesGivesByteLevelTokenizer) {
  TempDir dir;
  std::ofstream(dir / "merges.txt") << "";
  std::ifstream toy_vocab(testing::fixture_dir() / "toy" / "vocab.json");
  auto doc = nlohmann::json::parse(toy_vocab);
  nlohmann::json bytes_only = nlohmann::json::object();
  for (auto& [k, v] : doc.items()) {
    if (v.get<int>() < 256) bytes_only[k] = v;
  }
  std::ofstream(dir / "vocab.json") << bytes_only.dump();
  auto tok = Tokenizer::load(dir / "vocab.json", dir / "merges.txt", {});
  EXPECT_EQ(tok.merge_count(), 0u);
  const std::string text = "hello world";
  EXPECT_EQ(tok.encode(text).size(), text.size());
  EXPECT_EQ(tok.decode(tok.encode(text)), text);
}

TEST(Tokenizer, ToyMergesApplyInPriorityOrder) {
  auto tok = toy();
  EXPECT_EQ(tok.encode("</s>").size(), 1u);
  EXPECT_EQ(tok.encode(" yes").size(), 1u);
  EXPECT_EQ(tok.encode(" cat").size(), 1u);
  EXPECT_EQ(tok.encode("USER").size(), 1u);
  EXPECT_EQ(tok.encode(" yes</s>").size(), 2u);
}

TEST(Tokenizer, ImagePlaceholderIsOneSpecialId) {
  auto tok = toy();
  auto ids = tok.encode("hi <image> there");
  EXPECT_EQ(std::count(ids.begin(), ids.end(), tok.image_id()), 1);
  EXPECT_EQ(tok.decode(ids), "hi <image> there");
  for (int id : ids) EXPECT_LT(static_cast<std::size_t>(id), tok.size());
}

TEST(Tokenizer, StripSpecialsTruncatesAtEndOfText) {
  auto tok = toy();
  auto ids = tok.encode("yes<|endoftext|>no");
  EXPECT_EQ(tok.decode(ids, true), "yes");
  EXPECT_EQ(tok.decode(ids), "yes<|endoftext|>no");
  const int bad[] = {static_cast<int>(tok.size())};
  EXPECT_THROW(tok.decode(std::span<const int>(bad)), Error);
}

TEST(Tokenizer, PadFallsBackToEndOfText) {
  auto tok = toy();
  EXPECT_EQ(tok.pad_id(), tok.eot_id());
}

TEST(Tokenizer, PretokenizeCoversInput) {
  auto tok = toy();
  const std::string text = "Hello, world! It's 2026\n\n  ok</s>";
  auto chunks = tok.pretokenize(text);
  std::string joined;
  for (const auto& c : chunks) joined += c;
  EXPECT_EQ(joined, text);
  EXPECT_NE(std::find(chunks.begin(), chunks.end(), "</s>"), chunks.end());
}

TEST(Tokenizer, RoundTripRandomUtf8) {
  auto tok = toy();
  std::mt19937_64 rng(2026);
  int failures = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto s = testing::random_utf8(rng);
    auto ids = tok.encode(s);
    for (int id : ids) ASSERT_LT(static_cast<std::size_t>(id), tok.size());
    if (tok.decode(ids) != s) ++failures;
    EXPECT_EQ(tok.encode(s), ids);
  }
  EXPECT_EQ(failures, 0);
}

TEST(Tokenizer, InvalidUtf8BytesRoundTrip) {
  auto tok = toy();
  const std::string s = std::string("ok \xff\xfe broken \xc3", 13);
  EXPECT_EQ(tok.decode(tok.encode(s)), s);
}

}  // namespace
}  // namespace cvlm
