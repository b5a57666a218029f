#pragma once

// The augmented-Lagrangian machinery that splits the shared backbone into two
// copies. w1 is the backbone trained on classification data, w3 the auxiliary
// copy trained on segmentation data, E the multiplier estimates and mu the
// quadratic weight. The coupling term
//
//   (mu / 2) * ||w1 - w3||^2 + <E, w1 - w3>
//
// is summed over all trainable backbone parameters. After each round the
// multipliers absorb the remaining gap (E += mu * (w1 - w3)) and mu grows
// geometrically (mu *= rho, capped at mu_max), which drives ||w1 - w3|| to
// zero so the two copies converge to one shared backbone.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "mtp/config.hpp"
#include "mtp/graph.hpp"
#include "mtp/params.hpp"
#include "mtp/scaling.hpp"

namespace mtp {

struct LagrangianState {
  ParamStore w1;  // backbone copy trained on classification data
  ParamStore w2;  // decoder weights
  ParamStore w3;  // auxiliary backbone copy trained on segmentation data
  ParamStore E;   // multiplier estimates, shaped like the trainables of w1
  double mu = 0.0;
  int round = 0;
};

struct L1Result {
  double loss = 0.0;                   // alpha * sum |gamma|
  std::vector<double> subgradient;     // alpha * sign(gamma), sign(0) = 0
};

inline L1Result l1_penalty(const ScalingVector& sv, double alpha) {
  if (alpha < 0) throw std::invalid_argument("l1_penalty: alpha must be >= 0");
  L1Result out;
  out.subgradient.reserve(sv.entries.size());
  for (const auto& e : sv.entries) {
    out.loss += std::abs(e.value);
    out.subgradient.push_back(e.value > 0.0 ? alpha : (e.value < 0.0 ? -alpha : 0.0));
  }
  out.loss *= alpha;
  return out;
}

namespace detail {

// Walks matching trainable tensors of two stores plus the multiplier store.
// Shape disagreements are structural corruption (mixing stores from different
// graphs), so they throw rather than silently misalign.
template <class F>
void zip_trainable(const ParamStore& w1, const ParamStore& w3, const ParamStore& E, F&& f) {
  for (const auto& [layer, tensors] : E.layers) {
    for (const auto& [name, te] : tensors) {
      const Tensor& t1 = w1.at(layer, name);
      const Tensor& t3 = w3.at(layer, name);
      if (!t1.same_shape(t3) || !t1.same_shape(te))
        throw std::runtime_error("coupling: tensor shape mismatch at " + layer + "." + name);
      f(layer, name, t1, t3, te);
    }
  }
}

}  // namespace detail

inline double coupling_loss(const ParamStore& w1, const ParamStore& w3,
                            const ParamStore& E, double mu) {
  if (mu < 0) throw std::invalid_argument("coupling_loss: mu must be >= 0");
  double quad = 0.0, lin = 0.0;
  detail::zip_trainable(w1, w3, E, [&](const std::string&, const std::string&,
                                       const Tensor& t1, const Tensor& t3,
                                       const Tensor& te) {
    for (std::size_t i = 0; i < t1.size(); ++i) {
      const double d = t1.v[i] - t3.v[i];
      quad += d * d;
      lin += te.v[i] * d;
    }
  });
  return 0.5 * mu * quad + lin;
}

// d(coupling)/d(w1) = mu * (w1 - w3) + E, accumulated into `grads`.
inline void add_coupling_grad_w1(const ParamStore& w1, const ParamStore& w3,
                                 const ParamStore& E, double mu, ParamStore& grads) {
  detail::zip_trainable(w1, w3, E, [&](const std::string& layer, const std::string& name,
                                       const Tensor& t1, const Tensor& t3,
                                       const Tensor& te) {
    Tensor& gt = grads.at(layer, name);
    for (std::size_t i = 0; i < t1.size(); ++i)
      gt.v[i] += mu * (t1.v[i] - t3.v[i]) + te.v[i];
  });
}

// d(coupling)/d(w3) = -mu * (w1 - w3) - E, accumulated into `grads`.
inline void add_coupling_grad_w3(const ParamStore& w1, const ParamStore& w3,
                                 const ParamStore& E, double mu, ParamStore& grads) {
  detail::zip_trainable(w1, w3, E, [&](const std::string& layer, const std::string& name,
                                       const Tensor& t1, const Tensor& t3,
                                       const Tensor& te) {
    Tensor& gt = grads.at(layer, name);
    for (std::size_t i = 0; i < t1.size(); ++i)
      gt.v[i] -= mu * (t1.v[i] - t3.v[i]) + te.v[i];
  });
}

// End-of-round multiplier step: E absorbs the scaled residual first, then mu
// grows. Ordering matters and is what the exact-algebra checks pin down.
inline void update_multipliers(LagrangianState& st, const MtpConfig& cfg) {
  if (cfg.mtp.rho <= 1.0) throw std::invalid_argument("update_multipliers: rho must be > 1");
  if (st.mu <= 0.0) throw std::invalid_argument("update_multipliers: mu must be > 0");
  for (auto& [layer, tensors] : st.E.layers) {
    for (auto& [name, te] : tensors) {
      const Tensor& t1 = st.w1.at(layer, name);
      const Tensor& t3 = st.w3.at(layer, name);
      if (!t1.same_shape(t3) || !t1.same_shape(te))
        throw std::runtime_error("multipliers: tensor shape mismatch at " + layer + "." + name);
      for (std::size_t i = 0; i < t1.size(); ++i)
        te.v[i] += st.mu * (t1.v[i] - t3.v[i]);
    }
  }
  st.mu = std::min(st.mu * cfg.mtp.rho, cfg.mtp.mu_max);
  st.round += 1;
}

}  // namespace mtp
