// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "cvlm/manifest.hpp"

#include <cstdio>
#include <fstream>

namespace cvlm {

using nlohmann::json;

namespace {

[[noreturn]] void invalid(const std::string& what) {
  throw Error(ErrorCode::kInvalidArgument, "invalid manifest: " + what);
}

template <typename V>
void read_opt(const json& obj, const char* key, V& out) {
  if (auto it = obj.find(key); it != obj.end()) {
    try {
      out = it->get<V>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kParse, std::string("manifest field '") + key + "': " + e.what());
    }
  }
}

const json& section(const json& doc, const char* key) {
  auto it = doc.find(key);
  if (it == doc.end() || !it->is_object()) {
    throw Error(ErrorCode::kParse, std::string("manifest is missing object '") + key + "'");
  }
  return *it;
}

}  // namespace

std::size_t VisionConfig::blocks_used() const {
  const long total = static_cast<long>(layers) + 1;
  const long index = feature_layer < 0 ? total + feature_layer : feature_layer;
  if (index < 0 || index >= total) {
    invalid("vision.feature_layer " + std::to_string(feature_layer) + " out of range for " +
            std::to_string(layers) + " layers");
  }
  return static_cast<std::size_t>(index);
}

void VisionConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    invalid("vision.image_size " + std::to_string(image_size) + " not divisible by patch_size " +
            std::to_string(patch_size));
  }
  if (heads == 0 || hidden % heads != 0) {
    invalid("vision.hidden " + std::to_string(hidden) + " not divisible by heads " +
            std::to_string(heads));
  }
  if (hidden < 2 || mlp_inner == 0) invalid("vision widths must be positive");
  (void)blocks_used();
}

void DecoderConfig::validate() const {
  if (heads == 0 || hidden % heads != 0) {
    invalid("decoder.hidden " + std::to_string(hidden) + " not divisible by heads " +
            std::to_string(heads));
  }
  if (rotary_dim % 2 != 0 || rotary_dim > head_dim()) {
    invalid("decoder.rotary_dim " + std::to_string(rotary_dim) +
            " must be even and at most head_dim " + std::to_string(head_dim()));
  }
  if (layers == 0 || vocab == 0 || max_seq == 0 || mlp_inner == 0 || hidden < 2) {
    invalid("decoder dimensions must be positive");
  }
}

void ModelManifest::validate() const {
  if (format_version != 1) invalid("unsupported format_version " + std::to_string(format_version));
  vision.validate();
  decoder.validate();
  for (const auto& [name, tok] : tokenizer.specials) {
    // -1 asks the tokenizer for the next free id.
    if (tok.id < -1) invalid("special token " + name + " has negative id");
    if (tok.text.empty()) invalid("special token " + name + " has empty text");
  }
}

ModelManifest manifest_from_json(const json& doc, const std::filesystem::path& base_dir) {
  if (!doc.is_object()) throw Error(ErrorCode::kParse, "manifest must be a JSON object");
  ModelManifest m;
  read_opt(doc, "format_version", m.format_version);
  read_opt(doc, "provenance", m.provenance);

  const json& v = section(doc, "vision");
  read_opt(v, "image_size", m.vision.image_size);
  read_opt(v, "patch_size", m.vision.patch_size);
  read_opt(v, "hidden", m.vision.hidden);
  read_opt(v, "layers", m.vision.layers);
  read_opt(v, "heads", m.vision.heads);
  m.vision.mlp_inner = 4 * m.vision.hidden;
  read_opt(v, "mlp_inner", m.vision.mlp_inner);
  read_opt(v, "feature_layer", m.vision.feature_layer);
  read_opt(v, "eps", m.vision.eps);

  const json& d = section(doc, "decoder");
  read_opt(d, "layers", m.decoder.layers);
  read_opt(d, "hidden", m.decoder.hidden);
  read_opt(d, "heads", m.decoder.heads);
  read_opt(d, "rotary_dim", m.decoder.rotary_dim);
  m.decoder.mlp_inner = 4 * m.decoder.hidden;
  read_opt(d, "mlp_inner", m.decoder.mlp_inner);
  read_opt(d, "vocab", m.decoder.vocab);
  read_opt(d, "max_seq", m.decoder.max_seq);
  read_opt(d, "eps", m.decoder.eps);
  read_opt(d, "rotary_base", m.decoder.rotary_base);

  if (auto it = doc.find("projector"); it != doc.end()) {
    read_opt(*it, "inner", m.projector.inner);
    std::size_t in_dim = m.vision.hidden, out_dim = m.decoder.hidden;
    read_opt(*it, "in_dim", in_dim);
    read_opt(*it, "out_dim", out_dim);
    if (in_dim != m.vision.hidden) {
      invalid("projector.in_dim " + std::to_string(in_dim) + " != vision.hidden " +
              std::to_string(m.vision.hidden));
    }
    if (out_dim != m.decoder.hidden) {
      invalid("projector.out_dim " + std::to_string(out_dim) + " != decoder.hidden " +
              std::to_string(m.decoder.hidden));
    }
  }

  if (auto it = doc.find("tokenizer"); it != doc.end()) {
    std::string vocab, merges;
    read_opt(*it, "vocab", vocab);
    read_opt(*it, "merges", merges);
    read_opt(*it, "pretokenize", m.tokenizer.pretokenize_regex);
    m.tokenizer.vocab_path = vocab;
    m.tokenizer.merges_path = merges;
    m.tokenizer.base_dir = base_dir;
    if (auto sp = it->find("specials"); sp != it->end()) {
      for (const auto& [name, entry] : sp->items()) {
        SpecialToken tok;
        read_opt(entry, "text", tok.text);
        read_opt(entry, "id", tok.id);
        m.tokenizer.specials[name] = tok;
      }
    }
  }

  if (auto it = doc.find("preprocessing"); it != doc.end()) {
    read_opt(*it, "means", m.preprocessing.means);
    read_opt(*it, "stds", m.preprocessing.stds);
    std::string resize = "square";
    read_opt(*it, "resize", resize);
    if (resize == "square") {
      m.preprocessing.resize = ResizePolicy::kSquare;
    } else if (resize == "pad") {
      m.preprocessing.resize = ResizePolicy::kPad;
    } else {
      invalid("preprocessing.resize must be 'square' or 'pad', got '" + resize + "'");
    }
  }

  std::string activation = "gelu_tanh";
  read_opt(doc, "activation", activation);
  if (activation == "gelu_tanh") {
    m.gelu = GeluMode::kTanh;
  } else if (activation == "gelu_erf") {
    m.gelu = GeluMode::kErf;
  } else {
    invalid("activation must be gelu_tanh or gelu_erf, got '" + activation + "'");
  }

  m.validate();
  return m;
}

json manifest_to_json(const ModelManifest& m) {
  json specials = json::object();
  for (const auto& [name, tok] : m.tokenizer.specials) {
    specials[name] = {{"text", tok.text}, {"id", tok.id}};
  }
  return {
      {"format_version", m.format_version},
      {"vision",
       {{"image_size", m.vision.image_size},
        {"patch_size", m.vision.patch_size},
        {"hidden", m.vision.hidden},
        {"layers", m.vision.layers},
        {"heads", m.vision.heads},
        {"mlp_inner", m.vision.mlp_inner},
        {"feature_layer", m.vision.feature_layer},
        {"eps", m.vision.eps}}},
      {"projector",
       {{"inner", m.projector_inner()},
        {"in_dim", m.vision.hidden},
        {"out_dim", m.decoder.hidden}}},
      {"decoder",
       {{"layers", m.decoder.layers},
        {"hidden", m.decoder.hidden},
        {"heads", m.decoder.heads},
        {"rotary_dim", m.decoder.rotary_dim},
        {"mlp_inner", m.decoder.mlp_inner},
        {"vocab", m.decoder.vocab},
        {"max_seq", m.decoder.max_seq},
        {"eps", m.decoder.eps},
        {"rotary_base", m.decoder.rotary_base}}},
      {"tokenizer",
       {{"vocab", m.tokenizer.vocab_path.generic_string()},
        {"merges", m.tokenizer.merges_path.generic_string()},
        {"pretokenize", m.tokenizer.pretokenize_regex},
        {"specials", specials}}},
      {"preprocessing",
       {{"means", m.preprocessing.means},
        {"stds", m.preprocessing.stds},
        {"resize", m.preprocessing.resize == ResizePolicy::kSquare ? "square" : "pad"}}},
      {"activation", m.gelu == GeluMode::kTanh ? "gelu_tanh" : "gelu_erf"},
      {"provenance", m.provenance},
  };
}

ModelManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kParse, "manifest " + path.string() + ": " + e.what());
  }
  return manifest_from_json(doc, path.parent_path());
}

std::string manifest_hash(const ModelManifest& manifest) {
  const std::string text = manifest_to_json(manifest).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<TensorSpec> model_tensor_specs(const ModelManifest& m) {
  std::vector<TensorSpec> specs;
  auto add_linear = [&](const std::string& prefix, std::size_t in, std::size_t out) {
    specs.push_back({prefix + ".w", {in, out}, InitKind::kNormal});
    specs.push_back({prefix + ".b", {out}, InitKind::kZeros});
  };
  auto add_norm = [&](const std::string& prefix, std::size_t d) {
    specs.push_back({prefix + ".w", {d}, InitKind::kOnes});
    specs.push_back({prefix + ".b", {d}, InitKind::kZeros});
  };

  const auto& v = m.vision;
  add_linear("vision.patch_embed", v.patch_dim(), v.hidden);
  specs.push_back({"vision.class_token", {v.hidden}, InitKind::kNormal});
  specs.push_back({"vision.pos_embed", {v.num_patches() + 1, v.hidden}, InitKind::kNormal});
  add_norm("vision.pre_ln", v.hidden);
  for (std::size_t i = 0; i < v.layers; ++i) {
    const std::string p = "vision.block" + std::to_string(i);
    add_norm(p + ".ln1", v.hidden);
    add_linear(p + ".attn.qkv", v.hidden, 3 * v.hidden);
    add_linear(p + ".attn.out", v.hidden, v.hidden);
    add_norm(p + ".ln2", v.hidden);
    add_linear(p + ".mlp.fc1", v.hidden, v.mlp_inner);
    add_linear(p + ".mlp.fc2", v.mlp_inner, v.hidden);
  }

  const std::size_t inner = m.projector_inner();
  specs.push_back({"projector.w1", {v.hidden, inner}, InitKind::kNormal});
  specs.push_back({"projector.b1", {inner}, InitKind::kZeros});
  specs.push_back({"projector.w2", {inner, m.decoder.hidden}, InitKind::kNormal});
  specs.push_back({"projector.b2", {m.decoder.hidden}, InitKind::kZeros});

  const auto& d = m.decoder;
  specs.push_back({"decoder.embed", {d.vocab, d.hidden}, InitKind::kNormal});
  for (std::size_t i = 0; i < d.layers; ++i) {
    const std::string p = "decoder.block" + std::to_string(i);
    add_norm(p + ".ln", d.hidden);
    add_linear(p + ".attn.qkv", d.hidden, 3 * d.hidden);
    add_linear(p + ".attn.out", d.hidden, d.hidden);
    add_linear(p + ".mlp.fc1", d.hidden, d.mlp_inner);
    add_linear(p + ".mlp.fc2", d.mlp_inner, d.hidden);
  }
  add_norm("decoder.final_ln", d.hidden);
  add_linear("decoder.head", d.hidden, d.vocab);
  return specs;
}

}  // namespace cvlm
