#pragma once

// Training loops. One plain-SGD batch step for each task, with optional L1
// pressure on scaling factors and optional coupling to a frozen backbone copy,
// plus the three alternating sub-problem steps and the round loop that drives
// them. Every objective is evaluated at the pre-step parameters, and a
// non-finite objective aborts with the stage recorded.
//
// The alternating round trains, in order:
//   step_w1: classification loss on w1  + coupling toward w3 + L1 on gamma1
//   step_w2: segmentation loss through (w3, w2), updating the decoder w2 only,
//            + L1 on gamma2
//   step_w3: segmentation loss through (w3, w2), updating w3 only,
//            + coupling toward w1 + L1 on the w3 copy of the backbone gammas
// then absorbs the residual into the multipliers and grows mu.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtp/config.hpp"
#include "mtp/datasets.hpp"
#include "mtp/executor.hpp"
#include "mtp/graph.hpp"
#include "mtp/lagrangian.hpp"
#include "mtp/losses.hpp"
#include "mtp/params.hpp"
#include "mtp/scaling.hpp"

namespace mtp {

class TrainingDivergence : public std::runtime_error {
 public:
  TrainingDivergence(const std::string& stage, const std::string& detail)
      : std::runtime_error("training diverged during " + stage + ": " + detail),
        stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct CouplingOpts {
  const ParamStore* anchor = nullptr;       // the frozen backbone copy
  const ParamStore* multipliers = nullptr;  // E
  double mu = 0.0;
  bool trained_is_w1 = true;  // selects the gradient sign
};

struct BatchResult {
  double objective = 0.0;  // task + penalties, at pre-step parameters
  double task_loss = 0.0;
};

namespace detail {

// Adds alpha * sign(gamma) to the gamma gradients of every prunable conv of
// `part` and returns the penalty value; semantics match l1_penalty exactly.
inline double add_l1_subgradient(const NetworkGraph& g, const ParamStore& store,
                                 Partition part, double alpha, ParamStore& grads) {
  if (alpha == 0.0) return 0.0;
  const ScalingVector sv = extract_scaling_factors(g, store, part);
  const L1Result l1 = l1_penalty(sv, alpha);
  std::string cur_conv, cur_bn;
  for (std::size_t i = 0; i < sv.entries.size(); ++i) {
    const ScalingEntry& e = sv.entries[i];
    if (e.layer_id != cur_conv) {
      cur_conv = e.layer_id;
      const int bn = batchnorm_consumer_index(g, g.index_of(cur_conv));
      cur_bn = g.layers[static_cast<std::size_t>(bn)].id;
    }
    grads.at(cur_bn, "gamma").v[static_cast<std::size_t>(e.channel)] += l1.subgradient[i];
  }
  return l1.loss;
}

inline void sgd_apply(const NetworkGraph& g, ParamStore& params, const ParamStore& grads,
                      double lr) {
  for_each_trainable(g, params, [&](const std::string& layer, const std::string& name,
                                    Tensor& t) {
    const Tensor& gt = grads.at(layer, name);
    for (std::size_t i = 0; i < t.size(); ++i) t.v[i] -= lr * gt.v[i];
  });
}

inline void check_finite(double objective, const std::string& stage) {
  if (!std::isfinite(objective))
    throw TrainingDivergence(stage, "objective is not finite");
}

}  // namespace detail

// One SGD step on classification data; updates the given backbone store.
inline BatchResult train_cls_batch(const NetworkGraph& g, ParamStore& backbone,
                                   const ClsBatch& batch, double lr, double l1_alpha,
                                   const CouplingOpts* coupling, Workspace& ws,
                                   const std::string& stage) {
  ModelView m{&g, &backbone, nullptr};
  const std::string sink = classification_sink(g);
  BnUpdate bn;
  bn.backbone = true;
  const Tensor& logits = forward(m, batch.x, sink, RunMode::train, ws, bn);
  const LossGrad lg = softmax_xent_cls(logits, batch.y);

  ParamStore grads = zeros_like_trainable(g, backbone);
  backward(m, sink, lg.dlogits, ws, GradRequest{&grads, nullptr});

  BatchResult r;
  r.task_loss = lg.loss;
  r.objective = lg.loss;
  r.objective += detail::add_l1_subgradient(g, backbone, Partition::backbone, l1_alpha, grads);
  if (coupling) {
    r.objective += coupling_loss(coupling->trained_is_w1 ? backbone : *coupling->anchor,
                                 coupling->trained_is_w1 ? *coupling->anchor : backbone,
                                 *coupling->multipliers, coupling->mu);
    if (coupling->trained_is_w1)
      add_coupling_grad_w1(backbone, *coupling->anchor, *coupling->multipliers,
                           coupling->mu, grads);
    else
      add_coupling_grad_w3(*coupling->anchor, backbone, *coupling->multipliers,
                           coupling->mu, grads);
  }
  detail::check_finite(r.objective, stage);
  detail::sgd_apply(g, backbone, grads, lr);
  return r;
}

// One SGD step on segmentation data. The forward pass runs through the given
// backbone and decoder; only the partitions flagged for update accumulate
// gradients, take an SGD step, or refresh batchnorm statistics.
inline BatchResult train_seg_batch(const NetworkGraph& g, ParamStore& backbone,
                                   ParamStore& decoder, const SegBatch& batch,
                                   double lambda, double lr, bool update_backbone,
                                   bool update_decoder, double l1_alpha_backbone,
                                   double l1_alpha_decoder, const CouplingOpts* coupling,
                                   Workspace& ws, const std::string& stage) {
  if (!update_backbone && !update_decoder)
    throw std::invalid_argument("train_seg_batch: nothing to update");
  ModelView m{&g, &backbone, &decoder};
  const std::string sink = segmentation_sink(g);
  BnUpdate bn;
  bn.backbone = update_backbone;
  bn.decoder = update_decoder;
  const Tensor& logits = forward(m, batch.x, sink, RunMode::train, ws, bn);
  const LossGrad lg = softmax_xent_seg(logits, batch.y);

  ParamStore grads_b, grads_d;
  if (update_backbone) grads_b = zeros_like_trainable(g, backbone);
  if (update_decoder) grads_d = zeros_like_trainable(g, decoder);
  Tensor dsink(lg.dlogits.shape);
  for (std::size_t i = 0; i < dsink.size(); ++i) dsink.v[i] = lambda * lg.dlogits.v[i];
  backward(m, sink, dsink, ws,
           GradRequest{update_backbone ? &grads_b : nullptr,
                       update_decoder ? &grads_d : nullptr});

  BatchResult r;
  r.task_loss = lg.loss;
  r.objective = lambda * lg.loss;
  if (update_backbone)
    r.objective += detail::add_l1_subgradient(g, backbone, Partition::backbone,
                                              l1_alpha_backbone, grads_b);
  if (update_decoder)
    r.objective += detail::add_l1_subgradient(g, decoder, Partition::decoder,
                                              l1_alpha_decoder, grads_d);
  if (coupling) {
    if (!update_backbone)
      throw std::invalid_argument("train_seg_batch: coupling requires a backbone update");
    r.objective += coupling_loss(coupling->trained_is_w1 ? backbone : *coupling->anchor,
                                 coupling->trained_is_w1 ? *coupling->anchor : backbone,
                                 *coupling->multipliers, coupling->mu);
    if (coupling->trained_is_w1)
      add_coupling_grad_w1(backbone, *coupling->anchor, *coupling->multipliers,
                           coupling->mu, grads_b);
    else
      add_coupling_grad_w3(*coupling->anchor, backbone, *coupling->multipliers,
                           coupling->mu, grads_b);
  }
  detail::check_finite(r.objective, stage);
  if (update_backbone) detail::sgd_apply(g, backbone, grads_b, lr);
  if (update_decoder) detail::sgd_apply(g, decoder, grads_d, lr);
  return r;
}

struct EpochStats {
  double objective = 0.0;  // batch averages
  double task_loss = 0.0;
  int batches = 0;

  void absorb(const BatchResult& b) {
    objective = (objective * batches + b.objective) / (batches + 1);
    task_loss = (task_loss * batches + b.task_loss) / (batches + 1);
    ++batches;
  }
  void absorb(const EpochStats& e) {
    if (e.batches == 0) return;
    objective = (objective * batches + e.objective * e.batches) / (batches + e.batches);
    task_loss = (task_loss * batches + e.task_loss * e.batches) / (batches + e.batches);
    batches += e.batches;
  }
};

inline EpochStats cls_epoch(const NetworkGraph& g, ParamStore& backbone,
                            const ClsDataset& ds, double lr, int batch_size,
                            double l1_alpha, const CouplingOpts* coupling,
                            Rng& order_rng, Workspace& ws, const std::string& stage) {
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be > 0");
  std::vector<int> order = order_rng.permutation(static_cast<int>(ds.images.size()));
  EpochStats stats;
  for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(batch_size)) {
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(batch_size),
                                                order.size() - at);
    const ClsBatch b = make_cls_batch(ds, order, at, n);
    stats.absorb(train_cls_batch(g, backbone, b, lr, l1_alpha, coupling, ws, stage));
  }
  return stats;
}

inline EpochStats seg_epoch(const NetworkGraph& g, ParamStore& backbone,
                            ParamStore& decoder, const SegDataset& ds, double lambda,
                            double lr, int batch_size, bool update_backbone,
                            bool update_decoder, double l1_alpha_backbone,
                            double l1_alpha_decoder, const CouplingOpts* coupling,
                            Rng& order_rng, Workspace& ws, const std::string& stage) {
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be > 0");
  std::vector<int> order = order_rng.permutation(static_cast<int>(ds.images.size()));
  EpochStats stats;
  for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(batch_size)) {
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(batch_size),
                                                order.size() - at);
    const SegBatch b = make_seg_batch(ds, order, at, n);
    stats.absorb(train_seg_batch(g, backbone, decoder, b, lambda, lr, update_backbone,
                                 update_decoder, l1_alpha_backbone, l1_alpha_decoder,
                                 coupling, ws, stage));
  }
  return stats;
}

// The three alternating sub-problem steps. Each runs its configured number of
// epochs and leaves every store it does not own untouched.

inline EpochStats step_w1(const NetworkGraph& g, LagrangianState& st,
                          const ClsDataset& ds, const MtpConfig& cfg, Rng& order_rng,
                          Workspace& ws) {
  CouplingOpts co{&st.w3, &st.E, st.mu, true};
  EpochStats stats;
  for (int e = 0; e < cfg.mtp.epochs_w1; ++e)
    stats.absorb(cls_epoch(g, st.w1, ds, cfg.mtp.lr_w1, cfg.run.batch_size,
                           cfg.mtp.alpha1, &co, order_rng, ws, "step_w1"));
  return stats;
}

inline EpochStats step_w2(const NetworkGraph& g, LagrangianState& st,
                          const SegDataset& ds, const MtpConfig& cfg, Rng& order_rng,
                          Workspace& ws) {
  EpochStats stats;
  for (int e = 0; e < cfg.mtp.epochs_w2; ++e)
    stats.absorb(seg_epoch(g, st.w3, st.w2, ds, cfg.mtp.lambda, cfg.mtp.lr_w2,
                           cfg.run.batch_size, /*update_backbone=*/false,
                           /*update_decoder=*/true, 0.0, cfg.mtp.alpha2, nullptr,
                           order_rng, ws, "step_w2"));
  return stats;
}

inline EpochStats step_w3(const NetworkGraph& g, LagrangianState& st,
                          const SegDataset& ds, const MtpConfig& cfg, Rng& order_rng,
                          Workspace& ws) {
  CouplingOpts co{&st.w1, &st.E, st.mu, false};
  EpochStats stats;
  for (int e = 0; e < cfg.mtp.epochs_w3; ++e)
    stats.absorb(seg_epoch(g, st.w3, st.w2, ds, cfg.mtp.lambda, cfg.mtp.lr_w3,
                           cfg.run.batch_size, /*update_backbone=*/true,
                           /*update_decoder=*/false, cfg.mtp.alpha2, 0.0, &co,
                           order_rng, ws, "step_w3"));
  return stats;
}

struct SparseHistoryRow {
  int round = 0;
  double obj_w1 = 0, cls_loss = 0;
  double obj_w2 = 0, seg_loss_w2 = 0;
  double obj_w3 = 0, seg_loss_w3 = 0;
  double coupling = 0;
  double residual = 0;      // ||w1 - w3||
  double rel_residual = 0;  // residual / ||w1||
  double mu = 0;            // value in effect during the round
  double sparsity_backbone = 0;
  double sparsity_decoder = 0;
};

struct SparseHistory {
  std::vector<SparseHistoryRow> rows;

  std::string to_csv() const {
    std::string out =
        "round,obj_w1,cls_loss,obj_w2,seg_loss_w2,obj_w3,seg_loss_w3,"
        "coupling,residual,rel_residual,mu,sparsity_backbone,sparsity_decoder\n";
    char buf[512];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf),
                    "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                    r.round, r.obj_w1, r.cls_loss, r.obj_w2, r.seg_loss_w2, r.obj_w3,
                    r.seg_loss_w3, r.coupling, r.residual, r.rel_residual, r.mu,
                    r.sparsity_backbone, r.sparsity_decoder);
      out += buf;
    }
    return out;
  }

  void save_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write history file: " + path);
    out << to_csv();
  }
};

// Runs the full alternating sparse phase. w1 starts from the pretrained
// backbone, w3 from the same tensors, the decoder from the dense segmentation
// baseline, and the multipliers from zero.
inline std::pair<LagrangianState, SparseHistory> train_sparse(
    const NetworkGraph& g, const ParamStore& w1_init, const ParamStore& w2_init,
    const SynthDatasets& data, const MtpConfig& cfg) {
  cfg.validate();
  LagrangianState st;
  st.w1 = w1_init;
  st.w2 = w2_init;
  st.w3 = w1_init;
  st.E = zeros_like_trainable(g, w1_init);
  st.mu = cfg.mtp.mu0;
  st.round = 0;
  if (trainable_count(g, st.w1) == 0)
    throw std::invalid_argument("train_sparse: backbone store has no trainable tensors");

  SparseHistory hist;
  Rng order_rng(mix_seed(cfg.run.seed, "train_sparse"));
  Workspace ws;

  for (int r = 1; r <= cfg.mtp.rounds; ++r) {
    const double mu_used = st.mu;
    const EpochStats s1 = step_w1(g, st, data.cls_train, cfg, order_rng, ws);
    const EpochStats s2 = step_w2(g, st, data.seg_train, cfg, order_rng, ws);
    const EpochStats s3 = step_w3(g, st, data.seg_train, cfg, order_rng, ws);

    SparseHistoryRow row;
    row.round = r;
    row.obj_w1 = s1.objective;
    row.cls_loss = s1.task_loss;
    row.obj_w2 = s2.objective;
    row.seg_loss_w2 = s2.task_loss;
    row.obj_w3 = s3.objective;
    row.seg_loss_w3 = s3.task_loss;
    row.coupling = coupling_loss(st.w1, st.w3, st.E, st.mu);
    row.residual = residual_norm(g, st.w1, st.w3);
    const double w1n = trainable_norm(g, st.w1);
    row.rel_residual = row.residual / (w1n > 0 ? w1n : 1.0);
    row.mu = mu_used;
    row.sparsity_backbone =
        sparsity_fraction(extract_scaling_factors(g, st.w1, Partition::backbone));
    row.sparsity_decoder =
        sparsity_fraction(extract_scaling_factors(g, st.w2, Partition::decoder));
    update_multipliers(st, cfg);
    hist.rows.push_back(row);

    if (cfg.mtp.early_stop && row.rel_residual < cfg.mtp.early_stop_tol) break;
  }
  return {std::move(st), std::move(hist)};
}

}  // namespace mtp
