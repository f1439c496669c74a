// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "cvlm/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cvlm {

template <typename T>
const Tensor<T>& param(const ParamMap<T>& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw Error(ErrorCode::kNotFound, "missing parameter tensor: " + name);
  return it->second;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(matmul(x, w), b);
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    AttentionMask mask) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || k.shape() != v.shape() ||
      q.dim(1) != k.dim(1) || q.dim(2) != k.dim(2)) {
    throw Error(ErrorCode::kShapeMismatch, "attention shapes q" + shape_str(q.shape()) + " k" +
                                               shape_str(k.shape()) + " v" + shape_str(v.shape()));
  }
  const std::size_t tq = q.dim(0), tk = k.dim(0), heads = q.dim(1), hd = q.dim(2);
  if (mask.causal && mask.query_offset + tq > tk) {
    throw Error(ErrorCode::kShapeMismatch, "causal attention: query rows end at " +
                                               std::to_string(mask.query_offset + tq) +
                                               " but only " + std::to_string(tk) + " keys");
  }
  const T scale = T(1) / std::sqrt(T(hd));
  const std::size_t row = heads * hd;
  // probs[h][i][j], zero beyond the causal limit.
  std::vector<T> probs(heads * tq * tk, T(0));
  std::vector<T> out(tq * row, T(0));
  const T* qd = q.data().data();
  const T* kd = k.data().data();
  const T* vd = v.data().data();

  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < tq; ++i) {
      const std::size_t visible = mask.causal ? mask.query_offset + i + 1 : tk;
      T* p = probs.data() + (h * tq + i) * tk;
      const T* qi = qd + i * row + h * hd;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < visible; ++j) {
        const T* kj = kd + j * row + h * hd;
        T s = 0;
        for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
        p[j] = s * scale;
        mx = std::max(mx, p[j]);
      }
      T total = 0;
      for (std::size_t j = 0; j < visible; ++j) {
        p[j] = std::exp(p[j] - mx);
        total += p[j];
      }
      T* oi = out.data() + i * row + h * hd;
      for (std::size_t j = 0; j < visible; ++j) {
        p[j] /= total;
        const T* vj = vd + j * row + h * hd;
        for (std::size_t c = 0; c < hd; ++c) oi[c] += p[j] * vj[c];
      }
    }
  }

  Tensor<T> result(q.shape(), std::move(out));
  detail::record_op<T>(
      "attention", {q, k, v}, result,
      [=, q = q, k = k, v = v, probs = std::move(probs)](std::span<const T> g) mutable {
        std::vector<T> gq(q.numel(), T(0)), gk(k.numel(), T(0)), gv(v.numel(), T(0));
        std::vector<T> dp(tk);
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < tq; ++i) {
            const std::size_t visible = mask.causal ? mask.query_offset + i + 1 : tk;
            const T* p = probs.data() + (h * tq + i) * tk;
            const T* gi = g.data() + i * row + h * hd;
            T dot = 0;
            for (std::size_t j = 0; j < visible; ++j) {
              const T* vj = vd + j * row + h * hd;
              T* gvj = gv.data() + j * row + h * hd;
              T s = 0;
              for (std::size_t c = 0; c < hd; ++c) {
                s += gi[c] * vj[c];
                gvj[c] += p[j] * gi[c];
              }
              dp[j] = s;
              dot += p[j] * s;
            }
            const T* qi = qd + i * row + h * hd;
            T* gqi = gq.data() + i * row + h * hd;
            for (std::size_t j = 0; j < visible; ++j) {
              const T ds = p[j] * (dp[j] - dot) * scale;
              const T* kj = kd + j * row + h * hd;
              T* gkj = gk.data() + j * row + h * hd;
              for (std::size_t c = 0; c < hd; ++c) {
                gqi[c] += ds * kj[c];
                gkj[c] += ds * qi[c];
              }
            }
          }
        }
        detail::accumulate_grad(q, std::span<const T>(gq));
        detail::accumulate_grad(k, std::span<const T>(gk));
        detail::accumulate_grad(v, std::span<const T>(gv));
      });
  return result;
}

#define CVLM_INSTANTIATE_NN(T)                                                          \
  template const Tensor<T>& param<T>(const ParamMap<T>&, const std::string&);           \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);   \
  template Tensor<T> attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                  AttentionMask);

CVLM_INSTANTIATE_NN(float)
CVLM_INSTANTIATE_NN(double)

#undef CVLM_INSTANTIATE_NN

}  // namespace cvlm
