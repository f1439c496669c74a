// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <nlohmann/json.hpp>

#include "cvlm/archive.hpp"
#include "support.hpp"

namespace cvlm {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

json toy_doc() {
  return json::parse(testing::read_text(testing::toy_manifest_path()));
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kInvalidArgument;
}

TEST(Manifest, ToyAndReferenceLoad) {
  const auto toy = testing::toy_manifest();
  EXPECT_EQ(toy.vision.num_patches(), 16u);
  EXPECT_EQ(toy.decoder.layers, 2u);
  const auto ref = load_manifest(testing::reference_manifest_path());
  EXPECT_EQ(ref.vision.num_patches(), 576u);
  EXPECT_EQ(ref.decoder.hidden, 2560u);
  EXPECT_EQ(ref.projector_inner(), 2560u);
}

TEST(Manifest, RoundTripPreservesHash) {
  const auto m = testing::toy_manifest();
  const auto again =
      manifest_from_json(manifest_to_json(m), testing::toy_manifest_path().parent_path());
  EXPECT_EQ(manifest_hash(m), manifest_hash(again));
  EXPECT_EQ(manifest_hash(m).size(), 16u);
  auto changed = m;
  changed.decoder.max_seq += 1;
  EXPECT_NE(manifest_hash(m), manifest_hash(changed));
}

TEST(Manifest, ValidationNamesTheField) {
  const auto dir = testing::toy_manifest_path().parent_path();
  auto doc = toy_doc();
  doc["vision"]["image_size"] = 30;
  try {
    manifest_from_json(doc, dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("vision.image_size"), std::string::npos);
  }
  doc = toy_doc();
  doc["decoder"]["rotary_dim"] = 3;
  EXPECT_THROW(manifest_from_json(doc, dir), Error);
  doc = toy_doc();
  doc["decoder"]["hidden"] = 30;
  EXPECT_THROW(manifest_from_json(doc, dir), Error);
  doc = toy_doc();
  doc.erase("decoder");
  EXPECT_EQ(code_of([&] { manifest_from_json(doc, dir); }), ErrorCode::kParse);
  EXPECT_EQ(code_of([&] { load_manifest("/nonexistent/manifest.json"); }), ErrorCode::kIo);
}

TEST(Archive, RoundTripIsBitExact) {
  testing::TempDir dir;
  const auto m = testing::toy_manifest();
  const auto w = init_random(m, 3);
  save_archive(w, dir / "w.cvlm");
  const auto back = load_archive(dir / "w.cvlm", m);
  ASSERT_EQ(back.size(), w.size());
  for (const auto& [name, t] : w) {
    EXPECT_EQ(back.at(name).shape(), t.shape()) << name;
    EXPECT_EQ(tensor_checksum(back.at(name)), tensor_checksum(t)) << name;
  }
}

TEST(Archive, PayloadsAreAligned) {
  testing::TempDir dir;
  const auto w = init_random(testing::toy_manifest(), 3);
  save_archive(w, dir / "w.cvlm");
  const auto index = read_archive_index(dir / "w.cvlm");
  EXPECT_EQ(index.size(), w.size());
  for (const auto& e : index) {
    EXPECT_EQ(e.offset % kArchiveAlignment, 0u) << e.name;
    EXPECT_EQ(e.length, shape_numel(e.shape) * sizeof(float));
  }
}

TEST(Archive, EmptyArchive) {
  testing::TempDir dir;
  save_archive({}, dir / "e.cvlm");
  EXPECT_TRUE(read_archive(dir / "e.cvlm").empty());
}

TEST(Archive, MissingTensorIsNamed) {
  testing::TempDir dir;
  const auto m = testing::toy_manifest();
  auto w = init_random(m, 3);
  w.erase("projector.w2");
  save_archive(w, dir / "w.cvlm");
  try {
    load_archive(dir / "w.cvlm", m);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNotFound);
    EXPECT_NE(std::string(e.what()).find("projector.w2"), std::string::npos);
  }
}

TEST(Archive, ShapeMismatchIsRejected) {
  const auto m = testing::toy_manifest();
  auto w = init_random(m, 3);
  w["projector.b2"] = Tensor<float>::zeros({7});
  EXPECT_EQ(code_of([&] { verify_params(w, m); }), ErrorCode::kShapeMismatch);
}

TEST(Archive, CorruptFilesAreBadFormat) {
  testing::TempDir dir;
  testing::write_bytes(dir / "bad.cvlm", {'N', 'O', 'P', 'E', '!', 0, 0, 0, 0, 0, 0, 0, 0, 0});
  EXPECT_EQ(code_of([&] { read_archive(dir / "bad.cvlm"); }), ErrorCode::kBadFormat);

  save_archive(init_random(testing::toy_manifest(), 3), dir / "w.cvlm");
  auto bytes = testing::read_text(dir / "w.cvlm");
  bytes.resize(bytes.size() / 2);
  testing::write_bytes(dir / "cut.cvlm", std::vector<std::uint8_t>(bytes.begin(), bytes.end()));
  EXPECT_EQ(code_of([&] { read_archive(dir / "cut.cvlm"); }), ErrorCode::kBadFormat);
  EXPECT_EQ(code_of([&] { read_archive(dir / "absent.cvlm"); }), ErrorCode::kIo);
}

TEST(Init, DeterministicWithExpectedStatistics) {
  const auto m = testing::toy_manifest();
  const auto a = init_random(m, 9), b = init_random(m, 9), c = init_random(m, 10);
  EXPECT_EQ(tensor_checksum(a.at("decoder.embed")), tensor_checksum(b.at("decoder.embed")));
  EXPECT_NE(tensor_checksum(a.at("decoder.embed")), tensor_checksum(c.at("decoder.embed")));
  for (float g : a.at("decoder.final_ln.w").data()) EXPECT_EQ(g, 1.0f);
  for (float g : a.at("decoder.head.b").data()) EXPECT_EQ(g, 0.0f);
  double sum = 0, sq = 0, peak = 0;
  const auto data = a.at("decoder.embed").data();
  for (float x : data) {
    sum += x;
    sq += x * x;
    peak = std::max(peak, static_cast<double>(std::abs(x)));
  }
  const double n = static_cast<double>(data.size());
  EXPECT_NEAR(sum / n, 0.0, 2e-3);
  EXPECT_NEAR(std::sqrt(sq / n), 0.0176, 2e-3);  // std of a normal(0, 0.02) truncated at 2 sigma
  EXPECT_LE(peak, 0.04 + 1e-7);
}

TEST(Init, PrefixFilter) {
  const auto w = init_random(testing::toy_manifest(), 1, {"decoder."});
  for (const auto& [name, t] : w) EXPECT_EQ(name.rfind("decoder.", 0), 0u) << name;
  EXPECT_TRUE(w.count("decoder.head.w"));
}

TEST(NameMap, TransposesAndConcatenates) {
  const auto rules = name_map_from_json(json::parse(R"({"rules": [
      {"target": "layer{i}.qkv", "transpose": true, "source": ["l.{i}.q", "l.{i}.k"]},
      {"target": "top", "source": "t"}]})"));
  ParamMap<float> src;
  src.emplace("l.0.q", Tensor<float>({1, 2}, {1, 2}));
  src.emplace("l.0.k", Tensor<float>({1, 2}, {3, 4}));
  src.emplace("l.1.q", Tensor<float>({1, 2}, {5, 6}));
  src.emplace("l.1.k", Tensor<float>({1, 2}, {7, 8}));
  src.emplace("t", Tensor<float>({2}, {9, 10}));
  const auto out = remap_tensors(src, rules);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out.at("layer0.qkv").shape(), (Shape{2, 2}));
  EXPECT_EQ(
      std::vector<float>(out.at("layer0.qkv").data().begin(), out.at("layer0.qkv").data().end()),
      (std::vector<float>{1, 3, 2, 4}));
  EXPECT_EQ(out.at("layer1.qkv").data()[3], 8.0f);
  src.erase("t");
  EXPECT_EQ(code_of([&] { remap_tensors(src, rules); }), ErrorCode::kNotFound);
}

TEST(NameMap, ShippedPhi2MapParses) {
  const auto doc =
      json::parse(testing::read_text(fs::path(CVLM_SOURCE_DIR) / "configs" / "phi2_name_map.json"));
  const auto rules = name_map_from_json(doc);
  EXPECT_EQ(rules.size(), 15u);
}

void write_safetensors(const fs::path& path, const json& header, const std::string& payload) {
  std::string text = header.dump();
  std::string bytes(8, '\0');
  const std::uint64_t n = text.size();
  std::memcpy(bytes.data(), &n, 8);
  bytes += text + payload;
  testing::write_bytes(path, std::vector<std::uint8_t>(bytes.begin(), bytes.end()));
}

TEST(Safetensors, ReadsF32F16Bf16) {
  testing::TempDir dir;
  std::string payload(8 + 4 + 4, '\0');
  const float f[2] = {1.5f, -2.0f};
  std::memcpy(payload.data(), f, 8);
  const std::uint16_t half[2] = {0x3C00, 0xC000};  // 1.0, -2.0
  std::memcpy(payload.data() + 8, half, 4);
  const std::uint16_t bf[2] = {0x3F80, 0x4040};  // 1.0, 3.0
  std::memcpy(payload.data() + 12, bf, 4);
  const json header = {{"__metadata__", {{"format", "pt"}}},
                       {"a", {{"dtype", "F32"}, {"shape", {2}}, {"data_offsets", {0, 8}}}},
                       {"b", {{"dtype", "F16"}, {"shape", {1, 2}}, {"data_offsets", {8, 12}}}},
                       {"c", {{"dtype", "BF16"}, {"shape", {2}}, {"data_offsets", {12, 16}}}}};
  write_safetensors(dir / "m.safetensors", header, payload);
  const auto t = read_safetensors(dir / "m.safetensors");
  ASSERT_EQ(t.size(), 3u);
  EXPECT_EQ(t.at("a").data()[0], 1.5f);
  EXPECT_EQ(t.at("b").shape(), (Shape{1, 2}));
  EXPECT_EQ(t.at("b").data()[1], -2.0f);
  EXPECT_EQ(t.at("c").data()[1], 3.0f);

  const json bad = {{"a", {{"dtype", "I64"}, {"shape", {1}}, {"data_offsets", {0, 8}}}}};
  write_safetensors(dir / "bad.safetensors", bad, std::string(8, '\0'));
  EXPECT_EQ(code_of([&] { read_safetensors(dir / "bad.safetensors"); }), ErrorCode::kBadFormat);
}

}  // namespace
}  // namespace cvlm
