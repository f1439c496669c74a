// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

// Image decode boundary (PNG, JPEG) and the pixel preprocessing that turns a
// decoded frame into a normalized [3 x S x S] tensor.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cvlm/manifest.hpp"
#include "cvlm/tensor.hpp"

namespace cvlm {

// 8-bit RGB, interleaved, row-major.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
};

// Sniffs the format from the leading bytes. Throws kUndecodableImage.
RgbImage decode_image(std::span<const std::uint8_t> bytes);
RgbImage load_image(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const RgbImage& image);
std::vector<std::uint8_t> encode_jpeg(const RgbImage& image, int quality = 90);

// Resize (or pad-then-resize) to image_size squared, scale to [0, 1] and
// normalize per channel. Returns [3 x S x S], channel-major.
Tensor<float> preprocess(const RgbImage& image, std::size_t image_size,
                         const PreprocessConfig& config);

// Bilinear resample of a planar [3 x h x w] float image with half-pixel
// centers and edge clamping.
std::vector<float> resize_bilinear(const std::vector<float>& planar, std::size_t h, std::size_t w,
                                   std::size_t out_h, std::size_t out_w);

}  // namespace cvlm
