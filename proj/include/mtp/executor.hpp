#pragma once

// Forward and backward execution over a NetworkGraph. The executor walks the
// needed subgraph for a given sink (classification head or segmentation
// output), caching activations for the backward pass. Gradients are exact
// analytic derivatives accumulated in double precision; the finite-difference
// tests lean on that. Backward can restrict parameter-gradient accumulation to
// one partition, and it prunes gradient flow to the layers that actually feed
// the requested parameters (training the decoder alone never walks the
// backbone backwards).

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtp/graph.hpp"
#include "mtp/params.hpp"
#include "mtp/tensor.hpp"

namespace mtp {

enum class RunMode { train, eval };

constexpr double kBnEps = 1e-5;

// Which partitions update batchnorm running statistics during a train-mode
// forward. The alternating steps only touch the statistics of the partition
// they train, which keeps the other weight copies byte-stable.
struct BnUpdate {
  bool backbone = false;
  bool decoder = false;
  double momentum = 0.1;
};

struct ModelView {
  const NetworkGraph* graph = nullptr;
  ParamStore* backbone = nullptr;
  ParamStore* decoder = nullptr;

  ParamStore& store(Partition p) const {
    ParamStore* s = (p == Partition::backbone) ? backbone : decoder;
    if (!s) throw std::runtime_error("model view: missing store for " + to_string(p));
    return *s;
  }
};

// Parameter-gradient accumulators; a null pointer means "do not differentiate
// with respect to this partition".
struct GradRequest {
  ParamStore* backbone = nullptr;
  ParamStore* decoder = nullptr;

  bool wants(Partition p) const {
    return (p == Partition::backbone) ? backbone != nullptr : decoder != nullptr;
  }
  ParamStore& store(Partition p) const {
    ParamStore* s = (p == Partition::backbone) ? backbone : decoder;
    if (!s) throw std::runtime_error("gradient request: missing store");
    return *s;
  }
};

struct ExecPlan {
  const NetworkGraph* graph = nullptr;
  std::string sink;
  std::vector<int> order;                 // needed layer indices, topological
  std::vector<std::vector<int>> producers;  // indexed by layer index
};

struct Workspace {
  ExecPlan plan;
  RunMode mode = RunMode::eval;
  Tensor input;                            // graph input, kept for backward
  std::map<std::string, Tensor> out;       // activations by layer id
  std::map<std::string, Tensor> bn_mean;   // train-mode batch statistics
  std::map<std::string, Tensor> bn_invstd;
  std::map<std::string, Tensor> grad;      // dLoss/d(activation)

  void prepare(const NetworkGraph& g, const std::string& sink) {
    if (plan.graph == &g && plan.sink == sink) return;
    plan.graph = &g;
    plan.sink = sink;
    plan.order.clear();
    plan.producers.assign(g.layers.size(), {});
    const auto need = g.ancestors_of(sink);
    for (std::size_t i = 0; i < g.layers.size(); ++i) {
      if (!need[i]) continue;
      plan.order.push_back(static_cast<int>(i));
      plan.producers[i] = g.producers(static_cast<int>(i));
    }
  }
};

namespace detail {

inline std::size_t off4(int C, int H, int W, int n, int c, int h, int w) {
  return ((static_cast<std::size_t>(n) * C + c) * H + h) * W + w;
}

inline void conv_forward(const Tensor& x, const Tensor& w, const Tensor* bias,
                         int stride, int dilation, Tensor& y) {
  const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = w.dim(0), K = w.dim(2);
  if (w.dim(1) != Ci) throw std::runtime_error("conv: weight/input channel mismatch");
  const int pad = (K - 1) * dilation / 2;
  const int Ho = conv_out_dim(H, K, stride, dilation);
  const int Wo = conv_out_dim(W, K, stride, dilation);
  if (Ho <= 0 || Wo <= 0) throw std::runtime_error("conv: output shape underflow");
  y.reshape({N, Co, Ho, Wo});

  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Co; ++co) {
      double* yp = y.data() + off4(Co, Ho, Wo, n, co, 0, 0);
      if (bias) {
        const double b = bias->v[static_cast<std::size_t>(co)];
        for (int i = 0; i < Ho * Wo; ++i) yp[i] = b;
      }
      for (int ci = 0; ci < Ci; ++ci) {
        const double* xp = x.data() + off4(Ci, H, W, n, ci, 0, 0);
        const double* wp = w.data() + (static_cast<std::size_t>(co) * Ci + ci) * K * K;
        for (int kh = 0; kh < K; ++kh)
          for (int kw = 0; kw < K; ++kw) {
            const double wv = wp[kh * K + kw];
            if (wv == 0.0) continue;
            for (int ho = 0; ho < Ho; ++ho) {
              const int h = ho * stride - pad + kh * dilation;
              if (h < 0 || h >= H) continue;
              const double* xr = xp + static_cast<std::size_t>(h) * W;
              double* yr = yp + static_cast<std::size_t>(ho) * Wo;
              for (int wo = 0; wo < Wo; ++wo) {
                const int wi = wo * stride - pad + kw * dilation;
                if (wi < 0 || wi >= W) continue;
                yr[wo] += wv * xr[wi];
              }
            }
          }
      }
    }
}

inline void conv_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                          int stride, int dilation, Tensor* dw, Tensor* db,
                          Tensor* dx) {
  const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = w.dim(0), K = w.dim(2);
  const int pad = (K - 1) * dilation / 2;
  const int Ho = dy.dim(2), Wo = dy.dim(3);

  if (db) {
    for (int n = 0; n < N; ++n)
      for (int co = 0; co < Co; ++co) {
        const double* dyp = dy.data() + off4(Co, Ho, Wo, n, co, 0, 0);
        double acc = 0.0;
        for (int i = 0; i < Ho * Wo; ++i) acc += dyp[i];
        db->v[static_cast<std::size_t>(co)] += acc;
      }
  }

  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Co; ++co) {
      const double* dyp = dy.data() + off4(Co, Ho, Wo, n, co, 0, 0);
      for (int ci = 0; ci < Ci; ++ci) {
        const double* xp = x.data() + off4(Ci, H, W, n, ci, 0, 0);
        double* dxp = dx ? dx->data() + off4(Ci, H, W, n, ci, 0, 0) : nullptr;
        const double* wp = w.data() + (static_cast<std::size_t>(co) * Ci + ci) * K * K;
        double* dwp = dw ? dw->data() + (static_cast<std::size_t>(co) * Ci + ci) * K * K
                         : nullptr;
        for (int kh = 0; kh < K; ++kh)
          for (int kw = 0; kw < K; ++kw) {
            const double wv = wp[kh * K + kw];
            double wacc = 0.0;
            for (int ho = 0; ho < Ho; ++ho) {
              const int h = ho * stride - pad + kh * dilation;
              if (h < 0 || h >= H) continue;
              const double* xr = xp + static_cast<std::size_t>(h) * W;
              double* dxr = dxp ? dxp + static_cast<std::size_t>(h) * W : nullptr;
              const double* dyr = dyp + static_cast<std::size_t>(ho) * Wo;
              for (int wo = 0; wo < Wo; ++wo) {
                const int wi = wo * stride - pad + kw * dilation;
                if (wi < 0 || wi >= W) continue;
                const double g = dyr[wo];
                wacc += g * xr[wi];
                if (dxr) dxr[wi] += wv * g;
              }
            }
            if (dwp) dwp[kh * K + kw] += wacc;
          }
      }
    }
}

}  // namespace detail

inline const Tensor& forward(const ModelView& m, const Tensor& input,
                             const std::string& sink, RunMode mode, Workspace& ws,
                             const BnUpdate& bn_update = {}) {
  const NetworkGraph& g = *m.graph;
  if (input.shape.size() != 4 || input.dim(1) != g.input_shape[0] ||
      input.dim(2) != g.input_shape[1] || input.dim(3) != g.input_shape[2])
    throw std::invalid_argument("forward: input tensor does not match graph input shape");
  ws.prepare(g, sink);
  ws.mode = mode;
  ws.input = input;

  for (int idx : ws.plan.order) {
    const LayerSpec& l = g.layers[static_cast<std::size_t>(idx)];
    const auto& prods = ws.plan.producers[static_cast<std::size_t>(idx)];
    std::vector<const Tensor*> xs;
    if (prods.empty()) {
      xs.push_back(&input);
    } else {
      for (int p : prods)
        xs.push_back(&ws.out.at(g.layers[static_cast<std::size_t>(p)].id));
    }
    Tensor& y = ws.out[l.id];

    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::classifier_head:
      case LayerKind::segmentation_head: {
        const ParamStore& s = m.store(l.partition);
        const Tensor& w = s.at(l.id, "weight");
        const Tensor* b = l.bias ? &s.at(l.id, "bias") : nullptr;
        detail::conv_forward(*xs[0], w, b, l.stride, l.dilation, y);
        break;
      }
      case LayerKind::batchnorm: {
        ParamStore& s = m.store(l.partition);
        const Tensor& x = *xs[0];
        const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        y.reshape(x.shape);
        const Tensor& gamma = s.at(l.id, "gamma");
        const Tensor& beta = s.at(l.id, "beta");
        Tensor& mean = ws.bn_mean[l.id];
        Tensor& invstd = ws.bn_invstd[l.id];
        mean.reshape({C});
        invstd.reshape({C});
        const std::size_t plane = static_cast<std::size_t>(H) * W;
        if (mode == RunMode::train) {
          const double mcount = static_cast<double>(N) * H * W;
          for (int c = 0; c < C; ++c) {
            double sum = 0.0, sumsq = 0.0;
            for (int n = 0; n < N; ++n) {
              const double* xp = x.data() + detail::off4(C, H, W, n, c, 0, 0);
              for (std::size_t i = 0; i < plane; ++i) {
                sum += xp[i];
                sumsq += xp[i] * xp[i];
              }
            }
            const double mu = sum / mcount;
            double var = sumsq / mcount - mu * mu;
            if (var < 0.0) var = 0.0;  // guard against rounding
            mean.v[static_cast<std::size_t>(c)] = mu;
            invstd.v[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + kBnEps);
            const bool update = (l.partition == Partition::backbone) ? bn_update.backbone
                                                                     : bn_update.decoder;
            if (update) {
              Tensor& rm = s.at(l.id, "running_mean");
              Tensor& rv = s.at(l.id, "running_var");
              const double mom = bn_update.momentum;
              rm.v[static_cast<std::size_t>(c)] =
                  (1.0 - mom) * rm.v[static_cast<std::size_t>(c)] + mom * mu;
              rv.v[static_cast<std::size_t>(c)] =
                  (1.0 - mom) * rv.v[static_cast<std::size_t>(c)] + mom * var;
            }
          }
        } else {
          const Tensor& rm = s.at(l.id, "running_mean");
          const Tensor& rv = s.at(l.id, "running_var");
          for (int c = 0; c < C; ++c) {
            mean.v[static_cast<std::size_t>(c)] = rm.v[static_cast<std::size_t>(c)];
            invstd.v[static_cast<std::size_t>(c)] =
                1.0 / std::sqrt(rv.v[static_cast<std::size_t>(c)] + kBnEps);
          }
        }
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            const double mu = mean.v[static_cast<std::size_t>(c)];
            const double is = invstd.v[static_cast<std::size_t>(c)];
            const double ga = gamma.v[static_cast<std::size_t>(c)];
            const double be = beta.v[static_cast<std::size_t>(c)];
            const double* xp = x.data() + detail::off4(C, H, W, n, c, 0, 0);
            double* yp = y.data() + detail::off4(C, H, W, n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) yp[i] = ga * (xp[i] - mu) * is + be;
          }
        break;
      }
      case LayerKind::activation: {
        const Tensor& x = *xs[0];
        y.reshape(x.shape);
        // std::max keeps a NaN first argument, so a diverged activation is
        // not silently flushed to zero and the loss check can catch it.
        for (std::size_t i = 0; i < x.size(); ++i) y.v[i] = std::max(x.v[i], 0.0);
        break;
      }
      case LayerKind::pool: {
        const Tensor& x = *xs[0];
        const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        y.reshape({N, C, 1, 1});
        const double inv = 1.0 / (static_cast<double>(H) * W);
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            const double* xp = x.data() + detail::off4(C, H, W, n, c, 0, 0);
            double acc = 0.0;
            for (int i = 0; i < H * W; ++i) acc += xp[i];
            y.v[detail::off4(C, 1, 1, n, c, 0, 0)] = acc * inv;
          }
        break;
      }
      case LayerKind::upsample: {
        const Tensor& x = *xs[0];
        const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const int f = l.stride;
        y.reshape({N, C, H * f, W * f});
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            const double* xp = x.data() + detail::off4(C, H, W, n, c, 0, 0);
            double* yp = y.data() + detail::off4(C, H * f, W * f, n, c, 0, 0);
            for (int h = 0; h < H * f; ++h)
              for (int w = 0; w < W * f; ++w)
                yp[static_cast<std::size_t>(h) * (W * f) + w] =
                    xp[static_cast<std::size_t>(h / f) * W + w / f];
          }
        break;
      }
      case LayerKind::elementwise_add: {
        const Tensor& x0 = *xs[0];
        for (const Tensor* x : xs)
          if (!x->same_shape(x0))
            throw std::runtime_error("add '" + l.id + "': input shapes differ");
        y.reshape(x0.shape);
        for (std::size_t i = 0; i < x0.size(); ++i) {
          double acc = 0.0;
          for (const Tensor* x : xs) acc += x->v[i];
          y.v[i] = acc;
        }
        break;
      }
      case LayerKind::concat: {
        const int N = xs[0]->dim(0), H = xs[0]->dim(2), W = xs[0]->dim(3);
        int C = 0;
        for (const Tensor* x : xs) {
          if (x->dim(0) != N || x->dim(2) != H || x->dim(3) != W)
            throw std::runtime_error("concat '" + l.id + "': spatial shapes differ");
          C += x->dim(1);
        }
        y.reshape({N, C, H, W});
        const std::size_t plane = static_cast<std::size_t>(H) * W;
        for (int n = 0; n < N; ++n) {
          int c0 = 0;
          for (const Tensor* x : xs) {
            const int Cx = x->dim(1);
            for (int c = 0; c < Cx; ++c)
              std::copy_n(x->data() + detail::off4(Cx, H, W, n, c, 0, 0), plane,
                          y.data() + detail::off4(C, H, W, n, c0 + c, 0, 0));
            c0 += Cx;
          }
        }
        break;
      }
    }
  }
  return ws.out.at(sink);
}

inline void backward(const ModelView& m, const std::string& sink, const Tensor& dsink,
                     Workspace& ws, const GradRequest& req) {
  const NetworkGraph& g = *m.graph;
  if (ws.plan.graph != &g || ws.plan.sink != sink)
    throw std::runtime_error("backward: workspace was not prepared by a matching forward");
  if (!dsink.same_shape(ws.out.at(sink)))
    throw std::invalid_argument("backward: sink gradient shape mismatch");

  // grad_flow[i]: gradient must reach layer i's output, either because its own
  // parameters are requested or because some ancestor's are.
  std::vector<char> grad_flow(g.layers.size(), 0);
  for (int idx : ws.plan.order) {
    const LayerSpec& l = g.layers[static_cast<std::size_t>(idx)];
    char f = req.wants(l.partition) ? 1 : 0;
    for (int p : ws.plan.producers[static_cast<std::size_t>(idx)])
      f = static_cast<char>(f | grad_flow[static_cast<std::size_t>(p)]);
    grad_flow[static_cast<std::size_t>(idx)] = f;
  }

  ws.grad.clear();
  ws.grad[sink] = dsink;

  for (auto it = ws.plan.order.rbegin(); it != ws.plan.order.rend(); ++it) {
    const int idx = *it;
    const LayerSpec& l = g.layers[static_cast<std::size_t>(idx)];
    if (!grad_flow[static_cast<std::size_t>(idx)]) continue;
    auto git = ws.grad.find(l.id);
    if (git == ws.grad.end()) continue;  // output never influenced the sink
    const Tensor& dy = git->second;
    const auto& prods = ws.plan.producers[static_cast<std::size_t>(idx)];

    auto producer_grad = [&](int which) -> Tensor* {
      if (which >= static_cast<int>(prods.size())) return nullptr;
      const int p = prods[static_cast<std::size_t>(which)];
      if (!grad_flow[static_cast<std::size_t>(p)]) return nullptr;
      const LayerSpec& pl = g.layers[static_cast<std::size_t>(p)];
      Tensor& t = ws.grad[pl.id];
      if (t.shape.empty()) t.reshape(ws.out.at(pl.id).shape);
      return &t;
    };
    const Tensor* x0 = prods.empty()
                           ? &ws.input
                           : &ws.out.at(g.layers[static_cast<std::size_t>(prods[0])].id);

    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::classifier_head:
      case LayerKind::segmentation_head: {
        const ParamStore& s = m.store(l.partition);
        const Tensor& w = s.at(l.id, "weight");
        Tensor* dw = nullptr;
        Tensor* db = nullptr;
        if (req.wants(l.partition)) {
          ParamStore& gs = req.store(l.partition);
          dw = &gs.at(l.id, "weight");
          if (l.bias) db = &gs.at(l.id, "bias");
        }
        detail::conv_backward(*x0, w, dy, l.stride, l.dilation, dw, db, producer_grad(0));
        break;
      }
      case LayerKind::batchnorm: {
        const ParamStore& s = m.store(l.partition);
        const Tensor& gamma = s.at(l.id, "gamma");
        const Tensor& mean = ws.bn_mean.at(l.id);
        const Tensor& invstd = ws.bn_invstd.at(l.id);
        const Tensor& x = *x0;
        const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const std::size_t plane = static_cast<std::size_t>(H) * W;
        const double mcount = static_cast<double>(N) * H * W;
        Tensor* dgamma = nullptr;
        Tensor* dbeta = nullptr;
        if (req.wants(l.partition)) {
          ParamStore& gs = req.store(l.partition);
          dgamma = &gs.at(l.id, "gamma");
          dbeta = &gs.at(l.id, "beta");
        }
        Tensor* dx = producer_grad(0);
        for (int c = 0; c < C; ++c) {
          const double mu = mean.v[static_cast<std::size_t>(c)];
          const double is = invstd.v[static_cast<std::size_t>(c)];
          double s1 = 0.0, s2 = 0.0;
          for (int n = 0; n < N; ++n) {
            const double* xp = x.data() + detail::off4(C, H, W, n, c, 0, 0);
            const double* dyp = dy.data() + detail::off4(C, H, W, n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) {
              s1 += dyp[i];
              s2 += dyp[i] * (xp[i] - mu) * is;
            }
          }
          if (dgamma) dgamma->v[static_cast<std::size_t>(c)] += s2;
          if (dbeta) dbeta->v[static_cast<std::size_t>(c)] += s1;
          if (dx) {
            const double ga = gamma.v[static_cast<std::size_t>(c)];
            if (ws.mode == RunMode::train) {
              for (int n = 0; n < N; ++n) {
                const double* xp = x.data() + detail::off4(C, H, W, n, c, 0, 0);
                const double* dyp = dy.data() + detail::off4(C, H, W, n, c, 0, 0);
                double* dxp = dx->data() + detail::off4(C, H, W, n, c, 0, 0);
                for (std::size_t i = 0; i < plane; ++i) {
                  const double xhat = (xp[i] - mu) * is;
                  dxp[i] += ga * is * (dyp[i] - s1 / mcount - xhat * s2 / mcount);
                }
              }
            } else {
              // Eval mode treats the statistics as constants.
              for (int n = 0; n < N; ++n) {
                const double* dyp = dy.data() + detail::off4(C, H, W, n, c, 0, 0);
                double* dxp = dx->data() + detail::off4(C, H, W, n, c, 0, 0);
                for (std::size_t i = 0; i < plane; ++i) dxp[i] += ga * is * dyp[i];
              }
            }
          }
        }
        break;
      }
      case LayerKind::activation: {
        Tensor* dx = producer_grad(0);
        if (!dx) break;
        const Tensor& y = ws.out.at(l.id);
        for (std::size_t i = 0; i < y.size(); ++i)
          if (y.v[i] > 0.0) dx->v[i] += dy.v[i];
        break;
      }
      case LayerKind::pool: {
        Tensor* dx = producer_grad(0);
        if (!dx) break;
        const int N = x0->dim(0), C = x0->dim(1), H = x0->dim(2), W = x0->dim(3);
        const double inv = 1.0 / (static_cast<double>(H) * W);
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            const double gval = dy.v[detail::off4(C, 1, 1, n, c, 0, 0)] * inv;
            double* dxp = dx->data() + detail::off4(C, H, W, n, c, 0, 0);
            for (int i = 0; i < H * W; ++i) dxp[i] += gval;
          }
        break;
      }
      case LayerKind::upsample: {
        Tensor* dx = producer_grad(0);
        if (!dx) break;
        const int N = x0->dim(0), C = x0->dim(1), H = x0->dim(2), W = x0->dim(3);
        const int f = l.stride;
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            const double* dyp = dy.data() + detail::off4(C, H * f, W * f, n, c, 0, 0);
            double* dxp = dx->data() + detail::off4(C, H, W, n, c, 0, 0);
            for (int h = 0; h < H * f; ++h)
              for (int w = 0; w < W * f; ++w)
                dxp[static_cast<std::size_t>(h / f) * W + w / f] +=
                    dyp[static_cast<std::size_t>(h) * (W * f) + w];
          }
        break;
      }
      case LayerKind::elementwise_add: {
        for (int k = 0; k < static_cast<int>(prods.size()); ++k) {
          Tensor* dx = producer_grad(k);
          if (!dx) continue;
          for (std::size_t i = 0; i < dy.size(); ++i) dx->v[i] += dy.v[i];
        }
        break;
      }
      case LayerKind::concat: {
        const int N = dy.dim(0), C = dy.dim(1), H = dy.dim(2), W = dy.dim(3);
        const std::size_t plane = static_cast<std::size_t>(H) * W;
        int c0 = 0;
        for (int k = 0; k < static_cast<int>(prods.size()); ++k) {
          const LayerSpec& pl = g.layers[static_cast<std::size_t>(prods[static_cast<std::size_t>(k)])];
          const int Cx = pl.out_channels;
          Tensor* dx = producer_grad(k);
          if (dx) {
            for (int n = 0; n < N; ++n)
              for (int c = 0; c < Cx; ++c) {
                const double* dyp = dy.data() + detail::off4(C, H, W, n, c0 + c, 0, 0);
                double* dxp = dx->data() + detail::off4(Cx, H, W, n, c, 0, 0);
                for (std::size_t i = 0; i < plane; ++i) dxp[i] += dyp[i];
              }
          }
          c0 += Cx;
        }
        break;
      }
    }
  }
}

}  // namespace mtp
