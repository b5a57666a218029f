#pragma once

// Channel scaling factors. Each prunable conv is followed by a batchnorm whose
// per-channel gamma multiplies everything the channel computes; |gamma| is the
// channel's importance score. A ScalingVector is the ordered list of
// (conv layer, channel, gamma value) triples for one partition — the object
// the L1 penalty acts on and the percentile thresholds are computed over.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtp/graph.hpp"
#include "mtp/params.hpp"

namespace mtp {

struct ScalingEntry {
  std::string layer_id;  // the prunable conv (not its batchnorm)
  int channel = 0;
  double value = 0.0;
};

struct ScalingVector {
  Partition partition = Partition::backbone;
  std::vector<ScalingEntry> entries;  // graph layer order, then channel order
};

// The batchnorm that consumes a conv's output; every prunable conv must have
// exactly one, otherwise it has no scaling factors and cannot be scored.
inline int batchnorm_consumer_index(const NetworkGraph& g, int conv_index) {
  int found = -1;
  for (int c : g.consumers(conv_index)) {
    if (g.layers[static_cast<std::size_t>(c)].kind != LayerKind::batchnorm) continue;
    if (found >= 0)
      throw std::runtime_error("prunable conv '" +
                               g.layers[static_cast<std::size_t>(conv_index)].id +
                               "' feeds more than one batchnorm");
    found = c;
  }
  return found;
}

inline ScalingVector extract_scaling_factors(const NetworkGraph& g,
                                             const ParamStore& store, Partition part) {
  ScalingVector out;
  out.partition = part;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& l = g.layers[i];
    if (!l.prunable || l.partition != part) continue;
    const int bn = batchnorm_consumer_index(g, static_cast<int>(i));
    if (bn < 0)
      throw std::runtime_error("prunable conv '" + l.id +
                               "' has no following batchnorm; no scaling factors exist");
    const std::string& bn_id = g.layers[static_cast<std::size_t>(bn)].id;
    if (!store.has(bn_id, "gamma"))
      throw std::runtime_error("missing batchnorm parameters for '" + bn_id + "'");
    const Tensor& gamma = store.at(bn_id, "gamma");
    if (static_cast<int>(gamma.size()) != l.out_channels)
      throw std::runtime_error("batchnorm '" + bn_id + "' gamma size does not match conv '" +
                               l.id + "' output channels");
    for (int c = 0; c < l.out_channels; ++c)
      out.entries.push_back({l.id, c, gamma.v[static_cast<std::size_t>(c)]});
  }
  return out;
}

// Fraction of scaling factors with |gamma| below `tol`; the sparsity measure
// the training history reports.
inline double sparsity_fraction(const ScalingVector& sv, double tol = 1e-3) {
  if (sv.entries.empty()) return 0.0;
  std::size_t n = 0;
  for (const auto& e : sv.entries)
    if (std::abs(e.value) < tol) ++n;
  return static_cast<double>(n) / static_cast<double>(sv.entries.size());
}

}  // namespace mtp
