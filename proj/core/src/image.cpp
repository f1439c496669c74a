// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "cvlm/image.hpp"

#include <jpeglib.h>
#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

namespace cvlm {

namespace {

[[noreturn]] void undecodable(const std::string& what) {
  throw Error(ErrorCode::kUndecodableImage, "undecodable image: " + what);
}

RgbImage decode_png(std::span<const std::uint8_t> bytes) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    undecodable(std::string("png: ") + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  RgbImage out;
  out.width = img.width;
  out.height = img.height;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    undecodable("png: " + msg);
  }
  return out;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

void jpeg_silent(j_common_ptr, int) {}

// No C++ objects with destructors may live across setjmp in these helpers.
bool decode_jpeg_raw(std::span<const std::uint8_t> bytes, RgbImage& out, char* message) {
  jpeg_decompress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  err.mgr.emit_message = jpeg_silent;
  if (setjmp(err.jump)) {
    std::memcpy(message, err.message, JMSG_LENGTH_MAX);
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out.width = cinfo.output_width;
  out.height = cinfo.output_height;
  out.pixels.resize(out.width * out.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row =
        out.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * out.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

bool encode_jpeg_raw(const RgbImage& image, int quality, unsigned char** buffer,
                     unsigned long* size, char* message) {
  jpeg_compress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    std::memcpy(message, err.message, JMSG_LENGTH_MAX);
    jpeg_destroy_compress(&cinfo);
    return false;
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, buffer, size);
  cinfo.image_width = static_cast<JDIMENSION>(image.width);
  cinfo.image_height = static_cast<JDIMENSION>(image.height);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    auto* row = const_cast<JSAMPROW>(
        image.pixels.data() + static_cast<std::size_t>(cinfo.next_scanline) * image.width * 3);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  return true;
}

void check_image(const RgbImage& image) {
  if (image.width == 0 || image.height == 0 ||
      image.pixels.size() != image.width * image.height * 3) {
    throw Error(ErrorCode::kInvalidArgument, "image buffer does not match its dimensions");
  }
}

}  // namespace

RgbImage decode_image(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kPng[] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (bytes.size() >= sizeof(kPng) && std::memcmp(bytes.data(), kPng, sizeof(kPng)) == 0) {
    return decode_png(bytes);
  }
  if (bytes.size() >= 3 && bytes[0] == 0xff && bytes[1] == 0xd8 && bytes[2] == 0xff) {
    RgbImage out;
    char message[JMSG_LENGTH_MAX] = {};
    if (!decode_jpeg_raw(bytes, out, message)) undecodable(std::string("jpeg: ") + message);
    if (out.width == 0 || out.height == 0) undecodable("jpeg: empty frame");
    return out;
  }
  undecodable("unrecognized format (expected PNG or JPEG)");
}

RgbImage load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode_image(bytes);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_png(const RgbImage& image) {
  check_image(image);
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr)) {
    throw Error(ErrorCode::kIo, std::string("png encode: ") + img.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
    throw Error(ErrorCode::kIo, std::string("png encode: ") + img.message);
  }
  out.resize(size);
  return out;
}

std::vector<std::uint8_t> encode_jpeg(const RgbImage& image, int quality) {
  check_image(image);
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  char message[JMSG_LENGTH_MAX] = {};
  const bool ok = encode_jpeg_raw(image, quality, &buffer, &size, message);
  std::vector<std::uint8_t> out;
  if (ok) out.assign(buffer, buffer + size);
  std::free(buffer);
  if (!ok) throw Error(ErrorCode::kIo, std::string("jpeg encode: ") + message);
  return out;
}

std::vector<float> resize_bilinear(const std::vector<float>& planar, std::size_t h, std::size_t w,
                                   std::size_t out_h, std::size_t out_w) {
  std::vector<float> out(3 * out_h * out_w);
  auto axis = [](std::size_t out_n, std::size_t in_n) {
    struct Tap {
      std::size_t i0, i1;
      double f;
    };
    std::vector<Tap> taps(out_n);
    const double ratio = static_cast<double>(in_n) / static_cast<double>(out_n);
    for (std::size_t o = 0; o < out_n; ++o) {
      double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
      if (src < 0) src = 0;
      auto i0 = static_cast<std::size_t>(src);
      if (i0 > in_n - 1) i0 = in_n - 1;
      const std::size_t i1 = i0 + 1 < in_n ? i0 + 1 : i0;
      taps[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return taps;
  };
  const auto ys = axis(out_h, h);
  const auto xs = axis(out_w, w);
  for (std::size_t c = 0; c < 3; ++c) {
    const float* src = planar.data() + c * h * w;
    float* dst = out.data() + c * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& ty = ys[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto& tx = xs[x];
        const double top = src[ty.i0 * w + tx.i0] * (1 - tx.f) + src[ty.i0 * w + tx.i1] * tx.f;
        const double bot = src[ty.i1 * w + tx.i0] * (1 - tx.f) + src[ty.i1 * w + tx.i1] * tx.f;
        dst[y * out_w + x] = static_cast<float>(top * (1 - ty.f) + bot * ty.f);
      }
    }
  }
  return out;
}

Tensor<float> preprocess(const RgbImage& image, std::size_t image_size,
                         const PreprocessConfig& config) {
  check_image(image);
  std::size_t h = image.height, w = image.width;
  std::vector<float> planar(3 * h * w);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        planar[(c * h + y) * w + x] = static_cast<float>(image.at(y, x, c)) / 255.0f;
      }
    }
  }

  if (config.resize == ResizePolicy::kPad && h != w) {
    const std::size_t side = std::max(h, w);
    const std::size_t oy = (side - h) / 2, ox = (side - w) / 2;
    std::vector<float> padded(3 * side * side);
    for (std::size_t c = 0; c < 3; ++c) {
      std::fill_n(padded.begin() + static_cast<std::ptrdiff_t>(c * side * side), side * side,
                  config.means[c]);
      for (std::size_t y = 0; y < h; ++y) {
        std::copy_n(planar.begin() + static_cast<std::ptrdiff_t>((c * h + y) * w), w,
                    padded.begin() + static_cast<std::ptrdiff_t>((c * side + y + oy) * side + ox));
      }
    }
    planar = std::move(padded);
    h = w = side;
  }

  if (h != image_size || w != image_size) {
    planar = resize_bilinear(planar, h, w, image_size, image_size);
  }
  const std::size_t plane = image_size * image_size;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      float& v = planar[c * plane + i];
      v = (v - config.means[c]) / config.stds[c];
    }
  }
  return Tensor<float>({3, image_size, image_size}, std::move(planar));
}

}  // namespace cvlm
