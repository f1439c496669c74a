// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

// Fixture paths, toy models, temp dirs and a finite-difference oracle shared
// by the unit tests and the acceptance binary.

#pragma once

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cvlm/archive.hpp"
#include "cvlm/image.hpp"
#include "cvlm/manifest.hpp"
#include "cvlm/model.hpp"
#include "cvlm/tokenizer.hpp"
#include "cvlm/trainer.hpp"

namespace cvlm::testing {

namespace fs = std::filesystem;

inline fs::path fixture_dir() {
  return CVLM_FIXTURE_DIR;
}
inline fs::path toy_manifest_path() {
  return fixture_dir() / "toy" / "manifest.json";
}
inline fs::path reference_manifest_path() {
  return fs::path(CVLM_SOURCE_DIR) / "configs" / "reference.json";
}

inline ModelManifest toy_manifest() {
  return load_manifest(toy_manifest_path());
}

inline Model toy_model(std::uint64_t seed = 1) {
  auto m = toy_manifest();
  auto tok = Tokenizer::load(m.tokenizer);
  auto weights = init_random(m, seed);
  return make_model(std::move(m), std::move(tok), std::move(weights));
}

class TempDir {
 public:
  TempDir() {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = fs::temp_directory_path() / ("cvlm-test-" + std::to_string(rng()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

// Deterministic synthetic image: color bits from `index`, checkerboard when bit 3 is set.
inline RgbImage pattern_image(int index, std::size_t width = 32, std::size_t height = 32) {
  RgbImage img{width, height, std::vector<std::uint8_t>(width * height * 3)};
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const bool on = (index >> c) & 1;
        const int checker = (index & 8) ? static_cast<int>(((x / 4 + y / 4) % 2) * 150) : 0;
        img.pixels[(y * width + x) * 3 + c] = static_cast<std::uint8_t>(on ? 220 : 30 + checker);
      }
    }
  }
  return img;
}

inline void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Letter-echo task for the two-stage checks. Text: "x x x" -> "x" for 16
// letters. Images: pattern_image(i) -> the i-th letter, written as PNG to dir.
inline std::vector<SftSample> letter_text_data(std::size_t n = 256, std::uint64_t seed = 5) {
  std::mt19937_64 rng(seed);
  std::vector<SftSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const char c = static_cast<char>('a' + i % 16);
    const std::size_t k = 1 + rng() % 16;
    std::string prompt;
    for (std::size_t j = 0; j < k; ++j) prompt += std::string(j ? " " : "") + c;
    SftSample s;
    s.turns = {{Role::kHuman, prompt, {}}, {Role::kAssistant, std::string(1, c), {}}};
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<SftSample> letter_image_data(const fs::path& dir, std::size_t n = 16) {
  std::vector<SftSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto path = dir / ("pattern" + std::to_string(i) + ".png");
    write_bytes(path, encode_png(pattern_image(static_cast<int>(i))));
    SftSample s;
    s.turns = {{Role::kHuman, "<image>", {}},
               {Role::kAssistant, std::string(1, static_cast<char>('a' + i)), {}}};
    s.image = path;
    out.push_back(std::move(s));
  }
  return out;
}

// Toy decoder after a short text SFT on the letter task.
inline Model letter_pretrained_model(std::uint64_t seed = 1) {
  auto model = toy_model(seed);
  auto cfg = TrainConfig::preset(Stage::kSft);
  cfg.system = "";
  cfg.lr = 3e-3;
  cfg.batch_size = 16;
  cfg.epochs = 18;
  cfg.schedule = Schedule::kCosine;
  cfg.warmup_ratio = 0.03;
  model.weights = train_stage(model, letter_text_data(), cfg).weights;
  return model;
}

struct CommandResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

// Runs a shell command, capturing stdout and stderr separately.
inline CommandResult run_command(const std::string& command, const std::string& stdin_text = "") {
  static int counter = 0;
  const fs::path base = fs::temp_directory_path() / ("cvlm-cmd-" + std::to_string(::getpid()) +
                                                     "-" + std::to_string(counter++));
  const fs::path in = base.string() + ".in", out = base.string() + ".out",
                 err = base.string() + ".err";
  std::ofstream(in) << stdin_text;
  const std::string full =
      command + " <" + in.string() + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(full.c_str());
  CommandResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_text(out);
  r.err = read_text(err);
  fs::remove(in);
  fs::remove(out);
  fs::remove(err);
  return r;
}

// Max relative error between the tape gradient and central differences over
// every element of `params[names]`. Relative error uses max(|a|, |n|, floor).
struct FdResult {
  double max_rel_err = 0;
  std::size_t checked = 0;
  std::string worst;
};

template <typename Loss>
FdResult finite_difference_check(ParamMap<double>& params, const std::vector<std::string>& names,
                                 Loss&& loss_fn, double h = 1e-5, double floor = 1e-5) {
  for (auto& [name, t] : params) t.set_requires_grad(false);
  for (const auto& name : names) params.at(name).set_requires_grad(true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto loss = loss_fn(params);
    tape.backward(loss);
  }
  FdResult result;
  for (const auto& name : names) {
    auto& t = params.at(name);
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss_fn(params).item();
      data[i] = saved - h;
      const double down = loss_fn(params).item();
      data[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++result.checked;
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst = name + "[" + std::to_string(i) + "]";
      }
    }
    t.zero_grad();
  }
  for (auto& [name, t] : params) t.set_requires_grad(false);
  return result;
}

// Random valid UTF-8 string mixing ASCII, whitespace, Latin-1, CJK and emoji.
inline std::string random_utf8(std::mt19937_64& rng, std::size_t max_len = 24) {
  std::uniform_int_distribution<std::size_t> len_dist(0, max_len);
  std::uniform_int_distribution<int> kind(0, 5);
  std::string out;
  const std::size_t n = len_dist(rng);
  auto put = [&out](char32_t cp) {
    if (cp < 0x80) {
      out += static_cast<char>(cp);
    } else if (cp < 0x800) {
      out += static_cast<char>(0xC0 | (cp >> 6));
      out += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
      out += static_cast<char>(0xE0 | (cp >> 12));
      out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
      out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
      out += static_cast<char>(0xF0 | (cp >> 18));
      out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
      out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
      out += static_cast<char>(0x80 | (cp & 0x3F));
    }
  };
  for (std::size_t i = 0; i < n; ++i) {
    switch (kind(rng)) {
      case 0:
        put(static_cast<char32_t>(std::uniform_int_distribution<int>(0x20, 0x7E)(rng)));
        break;
      case 1:
        put(std::array<char32_t, 5>{U' ', U'\n', U'\t', U' ', U'\r'}[rng() % 5]);
        break;
      case 2:
        put(static_cast<char32_t>(std::uniform_int_distribution<int>(0xA0, 0x17F)(rng)));
        break;
      case 3:
        put(static_cast<char32_t>(std::uniform_int_distribution<int>(0x4E00, 0x4FFF)(rng)));
        break;
      case 4:
        put(static_cast<char32_t>(std::uniform_int_distribution<int>(0x1F600, 0x1F64F)(rng)));
        break;
      default:
        put(static_cast<char32_t>(std::uniform_int_distribution<int>(0x1, 0x7F)(rng)));
        break;
    }
  }
  return out;
}

}  // namespace cvlm::testing
