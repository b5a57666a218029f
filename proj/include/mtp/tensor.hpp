#pragma once

// Dense row-major tensors of doubles. Activations use (N, C, H, W), conv
// weights use (Cout, Cin, K, K), per-channel parameters use (C). Double
// precision keeps finite-difference gradient checks and the multiplier
// algebra exact enough to test tightly.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtp {

struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) { reshape(std::move(s)); }

  void reshape(std::vector<int> s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
      n *= static_cast<std::size_t>(d);
    }
    shape = std::move(s);
    v.assign(n, 0.0);
  }

  std::size_t size() const { return v.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  double* data() { return v.data(); }
  const double* data() const { return v.data(); }
  double& operator[](std::size_t i) { return v[i]; }
  double operator[](std::size_t i) const { return v[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void fill(double x) { v.assign(v.size(), x); }
};

// Integer label image for segmentation targets: (N, H, W).
struct LabelMap {
  int n = 0, h = 0, w = 0;
  std::vector<int> v;

  LabelMap() = default;
  LabelMap(int n_, int h_, int w_)
      : n(n_), h(h_), w(w_), v(static_cast<std::size_t>(n_) * h_ * w_, 0) {
    if (n_ <= 0 || h_ <= 0 || w_ <= 0)
      throw std::invalid_argument("label map dimensions must be positive");
  }

  int& at(int i, int y, int x) {
    return v[(static_cast<std::size_t>(i) * h + y) * w + x];
  }
  int at(int i, int y, int x) const {
    return v[(static_cast<std::size_t>(i) * h + y) * w + x];
  }
};

}  // namespace mtp
