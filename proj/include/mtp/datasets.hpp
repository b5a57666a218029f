#pragma once

// Synthetic datasets, fully determined by a seed. Classification images show
// one of up to ten parametric shape/texture classes; segmentation images
// contain one to four shapes from the first three classes over a plain
// background, with a per-pixel mask (0 = background). The shape vocabulary is
// shared so classification pretraining learns features the segmentation task
// can reuse. Labels cycle through the classes, so every class is present in
// any split with at least num_classes samples.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "mtp/config.hpp"
#include "mtp/rng.hpp"
#include "mtp/tensor.hpp"

namespace mtp {

struct ClsDataset {
  int channels = 0, height = 0, width = 0, num_classes = 0;
  std::vector<std::vector<double>> images;  // each channels*height*width
  std::vector<int> labels;
};

struct SegDataset {
  int channels = 0, height = 0, width = 0, num_classes = 0;
  std::vector<std::vector<double>> images;
  std::vector<std::vector<int>> masks;  // each height*width, values < num_classes
};

struct SynthDatasets {
  ClsDataset cls_train, cls_val;
  SegDataset seg_train, seg_val;
  std::uint64_t seed = 0;
};

namespace detail {

struct Color {
  double c[3];
};

inline Color bright_color(Rng& rng) {
  // Kept well above the dark background so shapes are separable from noise.
  return {{rng.uniform(0.45, 1.0), rng.uniform(0.45, 1.0), rng.uniform(0.45, 1.0)}};
}

inline void set_px(std::vector<double>& img, int S, int y, int x, const Color& col) {
  for (int c = 0; c < 3; ++c) img[(static_cast<std::size_t>(c) * S + y) * S + x] = col.c[c];
}

// Paints class `cls` (shape or texture) and returns the painted pixel set via
// `hit` when a mask is wanted. Geometry parameters are drawn from rng.
inline void paint_class(std::vector<double>& img, std::vector<char>* hit, int S, int cls,
                        Rng& rng) {
  const Color col = bright_color(rng);
  auto mark = [&](int y, int x) {
    set_px(img, S, y, x, col);
    if (hit) (*hit)[static_cast<std::size_t>(y) * S + x] = 1;
  };
  switch (cls) {
    case 0: {  // circle
      const double cx = rng.uniform(0.3, 0.7) * S, cy = rng.uniform(0.3, 0.7) * S;
      const double r = rng.uniform(0.18, 0.32) * S;
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x)
          if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) mark(y, x);
      break;
    }
    case 1: {  // axis-aligned square
      const double cx = rng.uniform(0.3, 0.7) * S, cy = rng.uniform(0.3, 0.7) * S;
      const double h = rng.uniform(0.16, 0.3) * S;
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x)
          if (std::abs(x - cx) <= h && std::abs(y - cy) <= h) mark(y, x);
      break;
    }
    case 2: {  // upward triangle
      const double cx = rng.uniform(0.35, 0.65) * S, cy = rng.uniform(0.35, 0.65) * S;
      const double h = rng.uniform(0.2, 0.35) * S;
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          const double dy = y - (cy - h);
          if (dy >= 0 && dy <= 2 * h && std::abs(x - cx) <= dy * 0.6) mark(y, x);
        }
      break;
    }
    case 3: {  // ring
      const double cx = rng.uniform(0.35, 0.65) * S, cy = rng.uniform(0.35, 0.65) * S;
      const double ro = rng.uniform(0.25, 0.38) * S, ri = 0.55 * ro;
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          if (d2 <= ro * ro && d2 >= ri * ri) mark(y, x);
        }
      break;
    }
    case 4: {  // plus sign
      const double cx = rng.uniform(0.35, 0.65) * S, cy = rng.uniform(0.35, 0.65) * S;
      const double arm = rng.uniform(0.28, 0.4) * S, thick = rng.uniform(0.08, 0.14) * S;
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          const bool horiz = std::abs(y - cy) <= thick && std::abs(x - cx) <= arm;
          const bool vert = std::abs(x - cx) <= thick && std::abs(y - cy) <= arm;
          if (horiz || vert) mark(y, x);
        }
      break;
    }
    case 5: {  // horizontal stripes
      const int period = rng.uniform_int(2, 4);
      const int phase = rng.uniform_int(0, period - 1);
      for (int y = 0; y < S; ++y)
        if (((y + phase) / (period / 2 + 1)) % 2 == 0)
          for (int x = 0; x < S; ++x) mark(y, x);
      break;
    }
    case 6: {  // vertical stripes
      const int period = rng.uniform_int(2, 4);
      const int phase = rng.uniform_int(0, period - 1);
      for (int x = 0; x < S; ++x)
        if (((x + phase) / (period / 2 + 1)) % 2 == 0)
          for (int y = 0; y < S; ++y) mark(y, x);
      break;
    }
    case 7: {  // diagonal stripes
      const int period = rng.uniform_int(3, 5);
      const int phase = rng.uniform_int(0, period - 1);
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x)
          if ((x + y + phase) % period < period / 2) mark(y, x);
      break;
    }
    case 8: {  // checkerboard
      const int cell = rng.uniform_int(2, 4);
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x)
          if (((x / cell) + (y / cell)) % 2 == 0) mark(y, x);
      break;
    }
    case 9: {  // three small blobs
      for (int b = 0; b < 3; ++b) {
        const double cx = rng.uniform(0.15, 0.85) * S, cy = rng.uniform(0.15, 0.85) * S;
        const double r = rng.uniform(0.08, 0.16) * S;
        for (int y = 0; y < S; ++y)
          for (int x = 0; x < S; ++x)
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) mark(y, x);
      }
      break;
    }
    default:
      throw std::invalid_argument("synthetic class index out of range");
  }
}

inline std::vector<double> blank_image(int S, Rng& rng) {
  std::vector<double> img(static_cast<std::size_t>(3) * S * S);
  for (int c = 0; c < 3; ++c) {
    const double base = rng.uniform(0.05, 0.3);
    std::fill(img.begin() + static_cast<std::ptrdiff_t>(c) * S * S,
              img.begin() + static_cast<std::ptrdiff_t>(c + 1) * S * S, base);
  }
  return img;
}

inline void add_noise(std::vector<double>& img, double sigma, Rng& rng) {
  if (sigma <= 0) return;
  for (auto& x : img) x = std::clamp(x + rng.normal(0.0, sigma), 0.0, 1.0);
}

}  // namespace detail

inline ClsDataset generate_cls_split(int count, int image_size, int num_classes,
                                     double noise, Rng& rng) {
  if (count <= 0) throw std::invalid_argument("dataset size must be > 0");
  if (num_classes < 2 || num_classes > 10)
    throw std::invalid_argument("num_classes must be in [2, 10]");
  ClsDataset d;
  d.channels = 3;
  d.height = d.width = image_size;
  d.num_classes = num_classes;
  for (int i = 0; i < count; ++i) {
    const int label = i % num_classes;  // balanced by construction
    auto img = detail::blank_image(image_size, rng);
    detail::paint_class(img, nullptr, image_size, label, rng);
    detail::add_noise(img, noise, rng);
    d.images.push_back(std::move(img));
    d.labels.push_back(label);
  }
  return d;
}

// Segmentation mask classes: 0 background, then shape class k uses mask value
// k + 1. With seg_classes = 4 the circle/square/triangle vocabulary is active.
inline SegDataset generate_seg_split(int count, int image_size, int seg_classes,
                                     double noise, Rng& rng) {
  if (count <= 0) throw std::invalid_argument("dataset size must be > 0");
  if (seg_classes < 2 || seg_classes > 4)
    throw std::invalid_argument("seg_classes must be in [2, 4]");
  SegDataset d;
  d.channels = 3;
  d.height = d.width = image_size;
  d.num_classes = seg_classes;
  const int nshapes_max = seg_classes - 1;
  for (int i = 0; i < count; ++i) {
    auto img = detail::blank_image(image_size, rng);
    std::vector<int> mask(static_cast<std::size_t>(image_size) * image_size, 0);
    const int nshapes = rng.uniform_int(1, std::min(4, nshapes_max + 1));
    for (int sh = 0; sh < nshapes; ++sh) {
      const int cls = rng.uniform_int(0, nshapes_max - 1);  // shape vocabulary index
      std::vector<char> hit(mask.size(), 0);
      detail::paint_class(img, &hit, image_size, cls, rng);
      for (std::size_t p = 0; p < mask.size(); ++p)
        if (hit[p]) mask[p] = cls + 1;  // later shapes overwrite earlier ones
    }
    detail::add_noise(img, noise, rng);
    d.images.push_back(std::move(img));
    d.masks.push_back(std::move(mask));
  }
  return d;
}

// Each split draws from its own named stream, so resizing one split never
// shifts the samples of another.
inline SynthDatasets generate_datasets(std::uint64_t seed, const MtpConfig& cfg) {
  SynthDatasets out;
  out.seed = seed;
  const int S = cfg.model.image_size;
  {
    Rng rng(mix_seed(seed, "cls_train"));
    out.cls_train = generate_cls_split(cfg.data.cls_train, S, cfg.model.num_classes,
                                       cfg.data.noise, rng);
  }
  {
    Rng rng(mix_seed(seed, "cls_val"));
    out.cls_val = generate_cls_split(cfg.data.cls_val, S, cfg.model.num_classes,
                                     cfg.data.noise, rng);
  }
  {
    Rng rng(mix_seed(seed, "seg_train"));
    out.seg_train = generate_seg_split(cfg.data.seg_train, S, cfg.model.seg_classes,
                                       cfg.data.noise, rng);
  }
  {
    Rng rng(mix_seed(seed, "seg_val"));
    out.seg_val = generate_seg_split(cfg.data.seg_val, S, cfg.model.seg_classes,
                                     cfg.data.noise, rng);
  }
  return out;
}

// Batch assembly -----------------------------------------------------------

struct ClsBatch {
  Tensor x;
  std::vector<int> y;
};

struct SegBatch {
  Tensor x;
  LabelMap y;
};

inline ClsBatch make_cls_batch(const ClsDataset& d, const std::vector<int>& order,
                               std::size_t begin, std::size_t count) {
  ClsBatch b;
  b.x.reshape({static_cast<int>(count), d.channels, d.height, d.width});
  const std::size_t stride = d.images[0].size();
  for (std::size_t i = 0; i < count; ++i) {
    const int src = order[begin + i];
    std::copy_n(d.images[static_cast<std::size_t>(src)].data(), stride,
                b.x.data() + i * stride);
    b.y.push_back(d.labels[static_cast<std::size_t>(src)]);
  }
  return b;
}

inline SegBatch make_seg_batch(const SegDataset& d, const std::vector<int>& order,
                               std::size_t begin, std::size_t count) {
  SegBatch b;
  b.x.reshape({static_cast<int>(count), d.channels, d.height, d.width});
  b.y = LabelMap(static_cast<int>(count), d.height, d.width);
  const std::size_t stride = d.images[0].size();
  const std::size_t mstride = d.masks[0].size();
  for (std::size_t i = 0; i < count; ++i) {
    const int src = order[begin + i];
    std::copy_n(d.images[static_cast<std::size_t>(src)].data(), stride,
                b.x.data() + i * stride);
    std::copy_n(d.masks[static_cast<std::size_t>(src)].data(), mstride,
                b.y.v.data() + i * mstride);
  }
  return b;
}

}  // namespace mtp
