// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "cvlm/projector.hpp"

namespace cvlm {

template <typename T>
Tensor<T> project(const Tensor<T>& features, const ParamMap<T>& w, GeluMode gelu_mode) {
  const auto& w1 = param(w, "projector.w1");
  if (features.rank() != 2 || features.dim(1) != w1.dim(0)) {
    throw Error(ErrorCode::kShapeMismatch, "projector input " + shape_str(features.shape()) +
                                               " does not match w1 " + shape_str(w1.shape()));
  }
  auto h = gelu(linear(features, w1, param(w, "projector.b1")), gelu_mode);
  return linear(h, param(w, "projector.w2"), param(w, "projector.b2"));
}

template Tensor<float> project<float>(const Tensor<float>&, const ParamMap<float>&, GeluMode);
template Tensor<double> project<double>(const Tensor<double>&, const ParamMap<double>&, GeluMode);

}  // namespace cvlm
