#pragma once

// Task losses: softmax cross-entropy per image (classification) and per pixel
// (segmentation). Both return the loss and the gradient with respect to the
// logits, averaged so loss magnitudes are comparable across batch sizes.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "mtp/tensor.hpp"

namespace mtp {

struct LossGrad {
  double loss = 0.0;
  Tensor dlogits;
};

// logits: (N, K, 1, 1); labels: N entries in [0, K).
inline LossGrad softmax_xent_cls(const Tensor& logits, const std::vector<int>& labels) {
  const int N = logits.dim(0), K = logits.dim(1);
  if (logits.dim(2) != 1 || logits.dim(3) != 1)
    throw std::invalid_argument("classification logits must be (N, K, 1, 1)");
  if (static_cast<int>(labels.size()) != N)
    throw std::invalid_argument("label count does not match batch size");
  LossGrad out;
  out.dlogits.reshape(logits.shape);
  double total = 0.0;
  for (int n = 0; n < N; ++n) {
    const double* z = logits.data() + static_cast<std::size_t>(n) * K;
    double* dz = out.dlogits.data() + static_cast<std::size_t>(n) * K;
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= K) throw std::invalid_argument("label out of range");
    double zmax = z[0];
    for (int k = 1; k < K; ++k) zmax = std::max(zmax, z[k]);
    double sum = 0.0;
    for (int k = 0; k < K; ++k) sum += std::exp(z[k] - zmax);
    const double logsum = std::log(sum) + zmax;
    total += logsum - z[y];
    for (int k = 0; k < K; ++k)
      dz[k] = (std::exp(z[k] - logsum) - (k == y ? 1.0 : 0.0)) / N;
  }
  out.loss = total / N;
  return out;
}

// logits: (N, C, H, W); labels: (N, H, W) with entries in [0, C).
inline LossGrad softmax_xent_seg(const Tensor& logits, const LabelMap& labels) {
  const int N = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  if (labels.n != N || labels.h != H || labels.w != W)
    throw std::invalid_argument("segmentation labels do not match logits shape");
  LossGrad out;
  out.dlogits.reshape(logits.shape);
  const double npix = static_cast<double>(N) * H * W;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  double total = 0.0;
  for (int n = 0; n < N; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * C * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      const int y = labels.v[static_cast<std::size_t>(n) * plane + i];
      if (y < 0 || y >= C) throw std::invalid_argument("segmentation label out of range");
      double zmax = logits.v[base + i];
      for (int c = 1; c < C; ++c)
        zmax = std::max(zmax, logits.v[base + static_cast<std::size_t>(c) * plane + i]);
      double sum = 0.0;
      for (int c = 0; c < C; ++c)
        sum += std::exp(logits.v[base + static_cast<std::size_t>(c) * plane + i] - zmax);
      const double logsum = std::log(sum) + zmax;
      total += logsum - logits.v[base + static_cast<std::size_t>(y) * plane + i];
      for (int c = 0; c < C; ++c) {
        const std::size_t at = base + static_cast<std::size_t>(c) * plane + i;
        out.dlogits.v[at] =
            (std::exp(logits.v[at] - logsum) - (c == y ? 1.0 : 0.0)) / npix;
      }
    }
  }
  out.loss = total / npix;
  return out;
}

}  // namespace mtp
