#pragma once

// Shared fixtures for the unit tests: hand-sized graphs, random parameter
// filling, and finite-difference machinery.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mtp/build.hpp"
#include "mtp/executor.hpp"
#include "mtp/graph.hpp"
#include "mtp/losses.hpp"
#include "mtp/params.hpp"
#include "mtp/rng.hpp"
#include "mtp/tensor.hpp"

namespace testutil {

// A complete two-head network small enough for exhaustive finite differences
// (66 trainable parameters): one prunable backbone conv with batchnorm, a
// pooled classification head, one prunable decoder conv with batchnorm, and a
// segmentation head at full resolution.
inline mtp::NetworkGraph micro_two_head(int image = 4) {
  using mtp::LayerKind;
  using mtp::Partition;
  mtp::detail::GraphAssembler a;
  a.g.input_shape = {2, image, image};
  a.conv("bconv", 2, 2, 3, 1, 1, false, Partition::backbone, true, "");
  a.simple("bbn", LayerKind::batchnorm, 2, Partition::backbone, "");
  a.simple("brelu", LayerKind::activation, 2, Partition::backbone, "");
  a.simple("cls_pool", LayerKind::pool, 2, Partition::backbone, "");
  a.conv("cls_head", 2, 3, 1, 1, 1, true, Partition::backbone, false, "",
         LayerKind::classifier_head);
  a.conv("dconv", 2, 2, 1, 1, 1, false, Partition::decoder, true, "");
  a.simple("dbn", LayerKind::batchnorm, 2, Partition::decoder, "");
  a.simple("drelu", LayerKind::activation, 2, Partition::decoder, "");
  a.conv("seg_head", 2, 3, 1, 1, 1, true, Partition::decoder, false, "",
         LayerKind::segmentation_head);
  a.edge("bconv", "bbn");
  a.edge("bbn", "brelu");
  a.edge("brelu", "cls_pool");
  a.edge("cls_pool", "cls_head");
  a.edge("brelu", "dconv");
  a.edge("dconv", "dbn");
  a.edge("dbn", "drelu");
  a.edge("drelu", "seg_head");
  if (!mtp::validate(a.g).empty()) throw std::logic_error("micro_two_head is invalid");
  return a.g;
}

// A linear chain of prunable convs (with batchnorms) ending in both heads;
// channel widths are caller-chosen. Useful for surgery arithmetic where the
// expected parameter counts are computable by hand.
inline mtp::NetworkGraph conv_chain(const std::vector<int>& widths, int image = 8,
                                    int in_channels = 3) {
  using mtp::LayerKind;
  using mtp::Partition;
  if (widths.size() < 2) throw std::logic_error("conv_chain needs >= 2 widths");
  mtp::detail::GraphAssembler a;
  a.g.input_shape = {in_channels, image, image};
  int prev_c = in_channels;
  std::string prev;
  // First half backbone, second half decoder, split at the midpoint.
  const std::size_t split = widths.size() / 2;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const Partition part = i < split ? Partition::backbone : Partition::decoder;
    const std::string id = "c" + std::to_string(i);
    a.conv(id, prev_c, widths[i], 3, 1, 1, false, part, true, "");
    a.simple(id + "_bn", LayerKind::batchnorm, widths[i], part, "");
    a.simple(id + "_relu", LayerKind::activation, widths[i], part, "");
    if (!prev.empty()) a.edge(prev, id);
    a.edge(id, id + "_bn");
    a.edge(id + "_bn", id + "_relu");
    prev = id + "_relu";
    prev_c = widths[i];
  }
  // The classification branch hangs off the backbone, like the real network;
  // the segmentation head consumes the decoder's final activation.
  const std::string bb_out = "c" + std::to_string(split - 1) + "_relu";
  const int bb_c = widths[split - 1];
  a.simple("cls_pool", LayerKind::pool, bb_c, Partition::backbone, "");
  a.conv("cls_head", bb_c, 3, 1, 1, 1, true, Partition::backbone, false, "",
         LayerKind::classifier_head);
  a.conv("seg_head", prev_c, 3, 1, 1, 1, true, Partition::decoder, false, "",
         LayerKind::segmentation_head);
  a.edge(bb_out, "cls_pool");
  a.edge("cls_pool", "cls_head");
  a.edge(prev, "seg_head");
  if (!mtp::validate(a.g).empty()) throw std::logic_error("conv_chain is invalid");
  return a.g;
}

inline void randomize_store(mtp::ParamStore& s, mtp::Rng& rng, double scale = 0.5) {
  for (auto& [layer, tensors] : s.layers)
    for (auto& [name, t] : tensors) {
      if (name == "running_mean" || name == "running_var") continue;
      for (auto& x : t.v) x = rng.uniform(-scale, scale);
      if (name == "gamma")  // keep scales away from zero so L1 signs are stable
        for (auto& x : t.v) x += (x >= 0 ? 0.3 : -0.3);
    }
}

inline mtp::Tensor random_input(const mtp::NetworkGraph& g, int batch, mtp::Rng& rng) {
  mtp::Tensor x({batch, g.input_shape[0], g.input_shape[1], g.input_shape[2]});
  for (auto& v : x.v) v = rng.uniform();
  return x;
}

// Central finite difference of `f` with respect to every trainable tensor
// entry of `target`, compared against `analytic` using a relative error with
// an absolute floor. Returns the worst relative error observed.
inline double max_fd_error(const mtp::NetworkGraph& g, mtp::ParamStore& target,
                           const mtp::ParamStore& analytic,
                           const std::function<double()>& f, double eps = 1e-5) {
  double worst = 0.0;
  mtp::for_each_trainable(g, target, [&](const std::string& layer, const std::string& name,
                                         mtp::Tensor& t) {
    const mtp::Tensor& gt = analytic.at(layer, name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double keep = t.v[i];
      t.v[i] = keep + eps;
      const double up = f();
      t.v[i] = keep - eps;
      const double down = f();
      t.v[i] = keep;
      const double fd = (up - down) / (2 * eps);
      const double denom = std::max({std::abs(fd), std::abs(gt.v[i]), 1e-6});
      worst = std::max(worst, std::abs(fd - gt.v[i]) / denom);
    }
  });
  return worst;
}

}  // namespace testutil
