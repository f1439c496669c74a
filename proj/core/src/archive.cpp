// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "cvlm/archive.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>

namespace cvlm {

using nlohmann::json;
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "CVLM1 payloads are little-endian; big-endian hosts need byte swapping");

namespace {

constexpr std::size_t kMagicLen = 5;
constexpr std::size_t kPreludeLen = kMagicLen + 8;

std::uint64_t align_up(std::uint64_t n) {
  return (n + kArchiveAlignment - 1) / kArchiveAlignment * kArchiveAlignment;
}

[[noreturn]] void bad_format(const fs::path& path, const std::string& what) {
  throw Error(ErrorCode::kBadFormat, path.string() + ": " + what);
}

struct ParsedHeader {
  std::vector<ArchiveEntry> entries;
  std::uint64_t payload_start = 0;
};

ParsedHeader parse_header(std::istream& in, const fs::path& path, std::uint64_t file_size) {
  char magic[kMagicLen];
  if (!in.read(magic, kMagicLen) || std::memcmp(magic, kArchiveMagic, kMagicLen) != 0) {
    bad_format(path, "bad magic (expected CVLM1)");
  }
  std::uint64_t header_len = 0;
  if (!in.read(reinterpret_cast<char*>(&header_len), 8)) bad_format(path, "truncated prelude");
  if (header_len > file_size - kPreludeLen) bad_format(path, "header length exceeds file size");
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) {
    bad_format(path, "truncated header");
  }
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    bad_format(path, std::string("header is not JSON: ") + e.what());
  }
  if (!doc.is_object()) bad_format(path, "header must be a JSON object");

  ParsedHeader header;
  header.payload_start = align_up(kPreludeLen + header_len);
  for (const auto& [name, e] : doc.items()) {
    ArchiveEntry entry;
    entry.name = name;
    try {
      const std::string dtype = e.at("dtype").get<std::string>();
      if (dtype == "f32") {
        entry.dtype = DType::kF32;
      } else if (dtype == "f64") {
        entry.dtype = DType::kF64;
      } else {
        bad_format(path, "tensor " + name + " has unsupported dtype " + dtype);
      }
      entry.shape = e.at("shape").get<Shape>();
      entry.offset = e.at("offset").get<std::uint64_t>();
      entry.length = e.at("length").get<std::uint64_t>();
    } catch (const json::exception& ex) {
      bad_format(path, "tensor " + name + ": " + ex.what());
    }
    const std::uint64_t elem = entry.dtype == DType::kF32 ? 4 : 8;
    if (entry.length != shape_numel(entry.shape) * elem) {
      bad_format(path, "tensor " + name + " length does not match its shape");
    }
    if (entry.offset % kArchiveAlignment != 0) {
      bad_format(path, "tensor " + name + " is not 64-byte aligned");
    }
    if (header.payload_start + entry.offset + entry.length > file_size) {
      bad_format(path, "tensor " + name + " extends past end of file");
    }
    header.entries.push_back(std::move(entry));
  }
  std::sort(header.entries.begin(), header.entries.end(),
            [](const ArchiveEntry& a, const ArchiveEntry& b) { return a.offset < b.offset; });
  for (std::size_t i = 1; i < header.entries.size(); ++i) {
    const auto& prev = header.entries[i - 1];
    if (header.entries[i].offset < prev.offset + prev.length) {
      bad_format(path, "tensors " + prev.name + " and " + header.entries[i].name + " overlap");
    }
  }
  return header;
}

std::uint64_t file_size_of(const fs::path& path) {
  std::error_code ec;
  const auto size = fs::file_size(path, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot stat " + path.string() + ": " + ec.message());
  return size;
}

}  // namespace

void save_archive(const ParamMap<float>& tensors, const fs::path& path) {
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const std::uint64_t length = t.numel() * sizeof(float);
    header[name] = {{"dtype", "f32"}, {"shape", t.shape()}, {"offset", offset}, {"length", length}};
    offset = align_up(offset + length);
  }
  const std::string text = header.dump();
  const std::uint64_t header_len = text.size();
  const std::uint64_t payload_start = align_up(kPreludeLen + header_len);

  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + tmp.string());
    out.write(kArchiveMagic, kMagicLen);
    out.write(reinterpret_cast<const char*>(&header_len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    std::uint64_t pos = kPreludeLen + header_len;
    const std::string zeros(kArchiveAlignment, '\0');
    auto pad_to = [&](std::uint64_t target) {
      out.write(zeros.data(), static_cast<std::streamsize>(target - pos));
      pos = target;
    };
    pad_to(payload_start);
    for (const auto& [name, t] : tensors) {
      pad_to(payload_start + header[name]["offset"].get<std::uint64_t>());
      const auto bytes = static_cast<std::streamsize>(t.numel() * sizeof(float));
      out.write(reinterpret_cast<const char*>(t.data().data()), bytes);
      pos += static_cast<std::uint64_t>(bytes);
    }
    out.flush();
    if (!out) throw Error(ErrorCode::kIo, "write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw Error(ErrorCode::kIo, "cannot rename into " + path.string() + ": " + ec.message());
  }
}

std::vector<ArchiveEntry> read_archive_index(const fs::path& path) {
  const auto size = file_size_of(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  if (size < kPreludeLen) bad_format(path, "file too short");
  return parse_header(in, path, size).entries;
}

ParamMap<float> read_archive(const fs::path& path) {
  const auto size = file_size_of(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  if (size < kPreludeLen) bad_format(path, "file too short");
  const ParsedHeader header = parse_header(in, path, size);

  ParamMap<float> out;
  for (const auto& e : header.entries) {
    in.seekg(static_cast<std::streamoff>(header.payload_start + e.offset));
    std::vector<float> data(shape_numel(e.shape));
    if (e.dtype == DType::kF32) {
      in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(e.length));
    } else {
      std::vector<double> wide(data.size());
      in.read(reinterpret_cast<char*>(wide.data()), static_cast<std::streamsize>(e.length));
      for (std::size_t i = 0; i < wide.size(); ++i) data[i] = static_cast<float>(wide[i]);
    }
    if (!in) bad_format(path, "truncated payload for " + e.name);
    out.emplace(e.name, Tensor<float>(e.shape, std::move(data)));
  }
  return out;
}

void verify_params(const ParamMap<float>& params, const ModelManifest& manifest) {
  std::vector<std::string> missing;
  for (const auto& spec : model_tensor_specs(manifest)) {
    auto it = params.find(spec.name);
    if (it == params.end()) {
      missing.push_back(spec.name);
      continue;
    }
    if (it->second.shape() != spec.shape) {
      throw Error(ErrorCode::kShapeMismatch, "tensor " + spec.name + " has shape " +
                                                 shape_str(it->second.shape()) + ", expected " +
                                                 shape_str(spec.shape));
    }
  }
  if (!missing.empty()) {
    std::string names;
    for (const auto& n : missing) names += (names.empty() ? "" : ", ") + n;
    throw Error(ErrorCode::kNotFound, "archive is missing tensors: " + names);
  }
}

ParamMap<float> load_archive(const fs::path& path, const ModelManifest& manifest) {
  manifest.validate();
  // Check names from the header before touching the payload.
  std::set<std::string> present;
  for (const auto& e : read_archive_index(path)) present.insert(e.name);
  std::vector<std::string> missing;
  for (const auto& spec : model_tensor_specs(manifest)) {
    if (!present.count(spec.name)) missing.push_back(spec.name);
  }
  if (!missing.empty()) {
    std::string names;
    for (const auto& n : missing) names += (names.empty() ? "" : ", ") + n;
    throw Error(ErrorCode::kNotFound, "archive " + path.string() + " is missing tensors: " + names);
  }
  ParamMap<float> params = read_archive(path);
  verify_params(params, manifest);
  return params;
}

ParamMap<float> init_random(const ModelManifest& manifest, std::uint64_t seed,
                            const std::vector<std::string>& prefixes) {
  manifest.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  constexpr double kStd = 0.02;
  ParamMap<float> out;
  for (const auto& spec : model_tensor_specs(manifest)) {
    if (!prefixes.empty() &&
        std::none_of(prefixes.begin(), prefixes.end(),
                     [&](const std::string& p) { return spec.name.rfind(p, 0) == 0; })) {
      continue;
    }
    std::vector<float> data(shape_numel(spec.shape));
    switch (spec.init) {
      case InitKind::kZeros:
        break;
      case InitKind::kOnes:
        std::fill(data.begin(), data.end(), 1.0f);
        break;
      case InitKind::kNormal:
        for (auto& x : data) {
          double z;
          do {
            z = normal(rng);
          } while (std::abs(z) > 2.0);
          x = static_cast<float>(z * kStd);
        }
        break;
    }
    out.emplace(spec.name, Tensor<float>(spec.shape, std::move(data)));
  }
  return out;
}

std::uint64_t tensor_checksum(const Tensor<float>& t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.data().data());
  for (std::size_t i = 0; i < t.numel() * sizeof(float); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---- external checkpoint conversion -----------------------------------------

std::vector<NameMapRule> name_map_from_json(const json& doc) {
  std::vector<NameMapRule> rules;
  const json& list = doc.contains("rules") ? doc.at("rules") : doc;
  if (!list.is_array()) throw Error(ErrorCode::kParse, "name map must be an array of rules");
  for (const auto& r : list) {
    NameMapRule rule;
    try {
      rule.target = r.at("target").get<std::string>();
      const auto& src = r.at("source");
      if (src.is_string()) {
        rule.sources.push_back(src.get<std::string>());
      } else {
        rule.sources = src.get<std::vector<std::string>>();
      }
      rule.transpose = r.value("transpose", false);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kParse, std::string("name map rule: ") + e.what());
    }
    if (rule.sources.empty())
      throw Error(ErrorCode::kParse, "rule " + rule.target + " has no source");
    rules.push_back(std::move(rule));
  }
  return rules;
}

namespace {

std::string expand(std::string pattern, std::size_t i) {
  const std::string key = "{i}";
  for (auto pos = pattern.find(key); pos != std::string::npos; pos = pattern.find(key)) {
    pattern.replace(pos, key.size(), std::to_string(i));
  }
  return pattern;
}

Tensor<float> transposed(const Tensor<float>& t) {
  if (t.rank() != 2) return t;
  const std::size_t r = t.dim(0), c = t.dim(1);
  std::vector<float> out(t.numel());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = t.data()[i * c + j];
  }
  return Tensor<float>({c, r}, std::move(out));
}

// Concatenates along the last axis ([in, a] + [in, b] -> [in, a + b]).
Tensor<float> concat_last(const std::vector<Tensor<float>>& parts) {
  if (parts.size() == 1) return parts.front();
  if (parts.front().rank() == 1) return concat_rows(parts);
  const std::size_t rows = parts.front().dim(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows) {
      throw Error(ErrorCode::kShapeMismatch, "cannot concatenate " + shape_str(p.shape()));
    }
    cols += p.dim(1);
  }
  std::vector<float> out(rows * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < rows; ++i) {
      std::copy_n(p.data().data() + i * p.dim(1), p.dim(1), out.data() + i * cols + offset);
    }
    offset += p.dim(1);
  }
  return Tensor<float>({rows, cols}, std::move(out));
}

}  // namespace

ParamMap<float> remap_tensors(const ParamMap<float>& source,
                              const std::vector<NameMapRule>& rules) {
  ParamMap<float> out;
  auto apply = [&](const NameMapRule& rule, std::size_t i) {
    std::vector<Tensor<float>> parts;
    for (const auto& s : rule.sources) {
      const std::string name = expand(s, i);
      auto it = source.find(name);
      if (it == source.end()) throw Error(ErrorCode::kNotFound, "source tensor missing: " + name);
      parts.push_back(rule.transpose ? transposed(it->second) : it->second);
    }
    out.insert_or_assign(expand(rule.target, i), concat_last(parts));
  };
  for (const auto& rule : rules) {
    if (rule.target.find("{i}") == std::string::npos) {
      apply(rule, 0);
      continue;
    }
    for (std::size_t i = 0; source.count(expand(rule.sources.front(), i)); ++i) apply(rule, i);
  }
  return out;
}

namespace {

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1fu;
  std::uint32_t mant = h & 0x3ffu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3ffu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

}  // namespace

ParamMap<float> read_safetensors(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::uint64_t header_len = 0;
  if (!in.read(reinterpret_cast<char*>(&header_len), 8)) bad_format(path, "truncated header");
  const auto size = file_size_of(path);
  if (header_len > size - 8) bad_format(path, "header length exceeds file size");
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    bad_format(path, e.what());
  }
  ParamMap<float> out;
  for (const auto& [name, e] : doc.items()) {
    if (name == "__metadata__") continue;
    const auto dtype = e.at("dtype").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    const auto offsets = e.at("data_offsets").get<std::vector<std::uint64_t>>();
    const std::size_t n = shape_numel(shape);
    std::vector<char> raw(offsets.at(1) - offsets.at(0));
    in.seekg(static_cast<std::streamoff>(8 + header_len + offsets[0]));
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!in) bad_format(path, "truncated payload for " + name);
    std::vector<float> data(n);
    if (dtype == "F32" && raw.size() == n * 4) {
      std::memcpy(data.data(), raw.data(), raw.size());
    } else if ((dtype == "F16" || dtype == "BF16") && raw.size() == n * 2) {
      for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t h;
        std::memcpy(&h, raw.data() + 2 * i, 2);
        data[i] = dtype == "F16" ? half_to_float(h)
                                 : std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
      }
    } else {
      bad_format(path, "tensor " + name + " has unsupported dtype " + dtype);
    }
    out.emplace(name, Tensor<float>(shape, std::move(data)));
  }
  return out;
}

}  // namespace cvlm
