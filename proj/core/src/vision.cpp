// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "cvlm/vision.hpp"

namespace cvlm {

template <typename T>
Tensor<T> patchify(const Tensor<T>& img, const VisionConfig& cfg) {
  cfg.validate();
  const std::size_t s = cfg.image_size, p = cfg.patch_size, g = cfg.grid();
  if (img.shape() != Shape{3, s, s}) {
    throw Error(ErrorCode::kShapeMismatch, "image tensor " + shape_str(img.shape()) +
                                               " does not match image_size " + std::to_string(s));
  }
  const std::size_t dim = cfg.patch_dim();
  std::vector<T> out(cfg.num_patches() * dim);
  const T* src = img.data().data();
  for (std::size_t gy = 0; gy < g; ++gy) {
    for (std::size_t gx = 0; gx < g; ++gx) {
      T* row = out.data() + (gy * g + gx) * dim;
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t py = 0; py < p; ++py) {
          const T* line = src + (c * s + gy * p + py) * s + gx * p;
          std::copy_n(line, p, row + (c * p + py) * p);
        }
      }
    }
  }
  return Tensor<T>({cfg.num_patches(), dim}, std::move(out));
}

namespace {

template <typename T>
Tensor<T> vision_block(const Tensor<T>& x, const ParamMap<T>& w, const std::string& p,
                       const VisionConfig& cfg, GeluMode gelu_mode) {
  const std::size_t n = x.dim(0), h = cfg.hidden, heads = cfg.heads;
  const T eps = static_cast<T>(cfg.eps);
  auto ln1 = layer_norm(x, param(w, p + ".ln1.w"), param(w, p + ".ln1.b"), eps);
  auto qkv = linear(ln1, param(w, p + ".attn.qkv.w"), param(w, p + ".attn.qkv.b"));
  const Shape heads_shape{n, heads, h / heads};
  auto q = reshape(slice_cols(qkv, 0, h), heads_shape);
  auto k = reshape(slice_cols(qkv, h, h), heads_shape);
  auto v = reshape(slice_cols(qkv, 2 * h, h), heads_shape);
  auto a = reshape(attention(q, k, v, AttentionMask{}), {n, h});
  auto x1 = add(x, linear(a, param(w, p + ".attn.out.w"), param(w, p + ".attn.out.b")));
  auto ln2 = layer_norm(x1, param(w, p + ".ln2.w"), param(w, p + ".ln2.b"), eps);
  auto m =
      linear(gelu(linear(ln2, param(w, p + ".mlp.fc1.w"), param(w, p + ".mlp.fc1.b")), gelu_mode),
             param(w, p + ".mlp.fc2.w"), param(w, p + ".mlp.fc2.b"));
  return add(x1, m);
}

}  // namespace

template <typename T>
Tensor<T> encode_image(const Tensor<T>& img, const ParamMap<T>& w, const VisionConfig& cfg,
                       GeluMode gelu_mode) {
  const auto patches = patchify(img, cfg);
  const std::size_t h = cfg.hidden, n = cfg.num_patches();
  auto x = linear(patches, param(w, "vision.patch_embed.w"), param(w, "vision.patch_embed.b"));
  x = concat_rows<T>({reshape(param(w, "vision.class_token"), {1, h}), x});
  x = add(x, param(w, "vision.pos_embed"));
  x = layer_norm(x, param(w, "vision.pre_ln.w"), param(w, "vision.pre_ln.b"),
                 static_cast<T>(cfg.eps));
  const std::size_t blocks = cfg.blocks_used();
  for (std::size_t i = 0; i < blocks; ++i) {
    x = vision_block(x, w, "vision.block" + std::to_string(i), cfg, gelu_mode);
  }
  return slice_rows(x, 1, n);
}

template Tensor<float> patchify<float>(const Tensor<float>&, const VisionConfig&);
template Tensor<double> patchify<double>(const Tensor<double>&, const VisionConfig&);
template Tensor<float> encode_image<float>(const Tensor<float>&, const ParamMap<float>&,
                                           const VisionConfig&, GeluMode);
template Tensor<double> encode_image<double>(const Tensor<double>&, const ParamMap<double>&,
                                             const VisionConfig&, GeluMode);

}  // namespace cvlm
