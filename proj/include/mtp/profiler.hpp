#pragma once

// Cost model and latency measurement.
//
// Parameter counts: conv-family layers have k*k*Cin*Cout weights plus Cout
// bias terms when biased; batchnorm contributes 2*C (gamma, beta); everything
// else is parameter-free.
//
// FLOPs follow the multiply-accumulate convention: a conv costs
// k*k*Cin*Cout*Hout*Wout MACs (bias excluded), batchnorm / activation /
// elementwise add / upsample cost one operation per output element (C*H*W),
// global pooling one per input element, and concat is free (a copy, counted
// as zero). All counts cover the whole graph, both heads included; ratios
// between a pruned and an unpruned graph therefore use one convention on both
// sides.

#include <algorithm>
#include <array>
#include <chrono>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtp/executor.hpp"
#include "mtp/graph.hpp"
#include "mtp/params.hpp"
#include "mtp/rng.hpp"

namespace mtp {

inline long long count_params(const NetworkGraph& g) {
  long long total = 0;
  for (const auto& l : g.layers) {
    if (is_conv_like(l.kind)) {
      total += static_cast<long long>(l.kernel_size) * l.kernel_size * l.in_channels *
               l.out_channels;
      if (l.bias) total += l.out_channels;
    } else if (l.kind == LayerKind::batchnorm) {
      total += 2LL * l.out_channels;
    }
  }
  return total;
}

// Spatial sizes per layer, propagated from the input. Multi-input layers
// require agreeing spatial sizes; a conv that underflows to a non-positive
// size is an error.
inline std::vector<std::array<int, 2>> propagate_spatial(const NetworkGraph& g,
                                                         std::array<int, 3> input_shape) {
  if (input_shape[1] <= 0 || input_shape[2] <= 0)
    throw std::invalid_argument("input spatial size must be positive");
  std::vector<std::array<int, 2>> hw(g.layers.size());
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& l = g.layers[i];
    const auto prods = g.producers(static_cast<int>(i));
    std::array<int, 2> in{input_shape[1], input_shape[2]};
    if (!prods.empty()) {
      in = hw[static_cast<std::size_t>(prods[0])];
      for (int p : prods)
        if (hw[static_cast<std::size_t>(p)] != in)
          throw std::runtime_error("layer '" + l.id + "': input spatial sizes disagree");
    }
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::classifier_head:
      case LayerKind::segmentation_head: {
        const int h = conv_out_dim(in[0], l.kernel_size, l.stride, l.dilation);
        const int w = conv_out_dim(in[1], l.kernel_size, l.stride, l.dilation);
        if (h <= 0 || w <= 0)
          throw std::runtime_error("layer '" + l.id + "': spatial size underflows to zero");
        hw[i] = {h, w};
        break;
      }
      case LayerKind::pool:
        hw[i] = {1, 1};
        break;
      case LayerKind::upsample:
        hw[i] = {in[0] * l.stride, in[1] * l.stride};
        break;
      default:
        hw[i] = in;
        break;
    }
  }
  return hw;
}

inline long long count_flops(const NetworkGraph& g, std::array<int, 3> input_shape) {
  const auto hw = propagate_spatial(g, input_shape);
  long long total = 0;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& l = g.layers[i];
    const long long out_hw = static_cast<long long>(hw[i][0]) * hw[i][1];
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::classifier_head:
      case LayerKind::segmentation_head:
        total += static_cast<long long>(l.kernel_size) * l.kernel_size * l.in_channels *
                 l.out_channels * out_hw;
        break;
      case LayerKind::batchnorm:
      case LayerKind::activation:
      case LayerKind::elementwise_add:
      case LayerKind::upsample:
        total += static_cast<long long>(l.out_channels) * out_hw;
        break;
      case LayerKind::pool: {
        const auto prods = g.producers(static_cast<int>(i));
        const auto in = prods.empty()
                            ? std::array<int, 2>{input_shape[1], input_shape[2]}
                            : hw[static_cast<std::size_t>(prods[0])];
        total += static_cast<long long>(l.in_channels) * in[0] * in[1];
        break;
      }
      case LayerKind::concat:
        break;
    }
  }
  return total;
}

struct ProfileResult {
  long long params = 0;
  long long flops = 0;
  double latency_ms = 0.0;  // median over `runs` forward passes, batch size 1
  int runs = 0;
  std::array<int, 3> input_shape{0, 0, 0};
  std::string hardware;
};

inline std::string hardware_string() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    const auto pos = line.find("model name");
    if (pos != std::string::npos) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) {
        std::string name = line.substr(colon + 1);
        const auto b = name.find_first_not_of(' ');
        return b == std::string::npos ? name : name.substr(b);
      }
    }
  }
  return "unknown cpu";
}

// Median wall-clock time of an eval-mode forward pass to both heads. Weights
// matter only insofar as they fix the arithmetic; a seeded random input keeps
// the measurement reproducible in structure (though not in nanoseconds).
inline ProfileResult measure_latency(const NetworkGraph& g, ParamStore& backbone,
                                     ParamStore& decoder,
                                     std::array<int, 3> input_shape, int runs) {
  if (runs < 5) throw std::invalid_argument("measure_latency: need at least 5 runs");
  ProfileResult res;
  res.params = count_params(g);
  res.flops = count_flops(g, input_shape);
  res.runs = runs;
  res.input_shape = input_shape;
  res.hardware = hardware_string();

  Tensor input({1, input_shape[0], input_shape[1], input_shape[2]});
  Rng rng(0xbeef);
  for (auto& x : input.v) x = rng.uniform();

  ModelView m{&g, &backbone, &decoder};
  Workspace ws_cls, ws_seg;
  const std::string cls = classification_sink(g);
  const std::string seg = segmentation_sink(g);

  auto one_pass = [&]() {
    forward(m, input, cls, RunMode::eval, ws_cls);
    forward(m, input, seg, RunMode::eval, ws_seg);
  };
  for (int i = 0; i < 3; ++i) one_pass();  // warmup

  std::vector<double> times;
  times.reserve(static_cast<std::size_t>(runs));
  for (int i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    one_pass();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  const std::size_t n = times.size();
  res.latency_ms = (n % 2 == 1) ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
  return res;
}

}  // namespace mtp
