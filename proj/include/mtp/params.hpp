#pragma once

// Parameter storage. A ParamStore holds the tensors of one partition
// (backbone or decoder): trainable parameters (conv weight/bias, batchnorm
// gamma/beta) plus batchnorm running statistics. The alternating optimization
// keeps several backbone stores alive at once (w1, its auxiliary copy, the
// multiplier estimates), so stores are plain values that copy deeply.

#include <array>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtp/graph.hpp"
#include "mtp/rng.hpp"
#include "mtp/tensor.hpp"

namespace mtp {

using LayerParams = std::map<std::string, Tensor>;

struct ParamStore {
  std::map<std::string, LayerParams> layers;

  bool has(const std::string& layer) const { return layers.count(layer) != 0; }

  bool has(const std::string& layer, const std::string& name) const {
    auto it = layers.find(layer);
    return it != layers.end() && it->second.count(name) != 0;
  }

  Tensor& at(const std::string& layer, const std::string& name) {
    auto it = layers.find(layer);
    if (it == layers.end())
      throw std::runtime_error("param store: no parameters for layer '" + layer + "'");
    auto jt = it->second.find(name);
    if (jt == it->second.end())
      throw std::runtime_error("param store: layer '" + layer + "' has no tensor '" + name + "'");
    return jt->second;
  }

  const Tensor& at(const std::string& layer, const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(layer, name);
  }
};

// The names the optimizer updates, in canonical order. Running statistics are
// buffers: they change during forward passes, never via gradients, and they
// are excluded from flattening, coupling terms and multiplier updates.
inline const std::array<const char*, 4>& trainable_param_names() {
  static const std::array<const char*, 4> names = {"weight", "bias", "gamma", "beta"};
  return names;
}

// Visits trainable tensors in a canonical order: graph layer order, then the
// fixed name order above. Every consumer of "all parameters of a partition"
// (flattening, norms, multiplier algebra) iterates through here so they all
// agree on element order.
template <class Store, class F>
void for_each_trainable(const NetworkGraph& g, Store& s, F&& f) {
  for (const auto& l : g.layers) {
    auto it = s.layers.find(l.id);
    if (it == s.layers.end()) continue;
    for (const char* name : trainable_param_names()) {
      auto jt = it->second.find(name);
      if (jt != it->second.end()) f(l.id, name, jt->second);
    }
  }
}

inline ParamStore init_params(const NetworkGraph& g, Partition part,
                              double bn_gamma_init, Rng& rng) {
  if (bn_gamma_init <= 0) throw std::invalid_argument("bn_gamma_init must be > 0");
  ParamStore s;
  for (const auto& l : g.layers) {
    if (l.partition != part) continue;
    if (is_conv_like(l.kind)) {
      Tensor w({l.out_channels, l.in_channels, l.kernel_size, l.kernel_size});
      const double stddev =
          std::sqrt(2.0 / (static_cast<double>(l.kernel_size) * l.kernel_size * l.in_channels));
      for (auto& x : w.v) x = rng.normal(0.0, stddev);
      s.layers[l.id]["weight"] = std::move(w);
      if (l.bias) s.layers[l.id]["bias"] = Tensor({l.out_channels});
    } else if (l.kind == LayerKind::batchnorm) {
      Tensor gamma({l.out_channels});
      gamma.fill(bn_gamma_init);
      s.layers[l.id]["gamma"] = std::move(gamma);
      s.layers[l.id]["beta"] = Tensor({l.out_channels});
      s.layers[l.id]["running_mean"] = Tensor({l.out_channels});
      Tensor rv({l.out_channels});
      rv.fill(1.0);
      s.layers[l.id]["running_var"] = std::move(rv);
    }
  }
  return s;
}

// Zero-filled tensors matching the trainable part of `src`; used both for
// gradient accumulators and for the multiplier estimates.
inline ParamStore zeros_like_trainable(const NetworkGraph& g, const ParamStore& src) {
  ParamStore out;
  for_each_trainable(g, src, [&](const std::string& layer, const std::string& name,
                                 const Tensor& t) {
    out.layers[layer][name] = Tensor(t.shape);
  });
  return out;
}

inline std::size_t trainable_count(const NetworkGraph& g, const ParamStore& s) {
  std::size_t n = 0;
  for_each_trainable(g, s, [&](const std::string&, const std::string&, const Tensor& t) {
    n += t.size();
  });
  return n;
}

inline std::vector<double> flatten_trainable(const NetworkGraph& g, const ParamStore& s) {
  std::vector<double> out;
  out.reserve(trainable_count(g, s));
  for_each_trainable(g, s, [&](const std::string&, const std::string&, const Tensor& t) {
    out.insert(out.end(), t.v.begin(), t.v.end());
  });
  return out;
}

// L2 norm of the trainable difference a - b; this is the coupling residual
// ||w1 - w3|| the sparse-phase history tracks.
inline double residual_norm(const NetworkGraph& g, const ParamStore& a, const ParamStore& b) {
  double acc = 0.0;
  for_each_trainable(g, a, [&](const std::string& layer, const std::string& name,
                               const Tensor& ta) {
    const Tensor& tb = b.at(layer, name);
    if (!ta.same_shape(tb))
      throw std::runtime_error("residual_norm: shape mismatch at " + layer + "." + name);
    for (std::size_t i = 0; i < ta.size(); ++i) {
      const double d = ta.v[i] - tb.v[i];
      acc += d * d;
    }
  });
  return std::sqrt(acc);
}

inline double trainable_norm(const NetworkGraph& g, const ParamStore& s) {
  double acc = 0.0;
  for_each_trainable(g, s, [&](const std::string&, const std::string&, const Tensor& t) {
    for (double x : t.v) acc += x * x;
  });
  return std::sqrt(acc);
}

// Value equality over every tensor (trainables and buffers). Used by the
// isolation and determinism checks; compares by value so +0 and -0 agree.
inline bool stores_equal(const ParamStore& a, const ParamStore& b) {
  if (a.layers.size() != b.layers.size()) return false;
  auto ia = a.layers.begin();
  auto ib = b.layers.begin();
  for (; ia != a.layers.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.size() != ib->second.size()) return false;
    auto ja = ia->second.begin();
    auto jb = ib->second.begin();
    for (; ja != ia->second.end(); ++ja, ++jb) {
      if (ja->first != jb->first) return false;
      if (ja->second.shape != jb->second.shape) return false;
      if (ja->second.v != jb->second.v) return false;
    }
  }
  return true;
}

}  // namespace mtp
