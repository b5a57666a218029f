#pragma once

// End-to-end orchestration: classification pre-training, dense joint
// segmentation training, the alternating sparse phase, pruning, two-stage
// fine-tuning, the two baseline arms, and the experiment driver that strings
// the stages together and persists every artifact (checkpoints, plan,
// history, report, plots).
//
// Stage seeds are all derived from run.seed through named streams, so two
// runs with the same config hash produce identical plans and metrics no
// matter where the output directory lives (out_dir is excluded from the
// hash on purpose).

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

#include "mtp/build.hpp"
#include "mtp/checkpoint.hpp"
#include "mtp/config.hpp"
#include "mtp/datasets.hpp"
#include "mtp/graph.hpp"
#include "mtp/lagrangian.hpp"
#include "mtp/metrics.hpp"
#include "mtp/params.hpp"
#include "mtp/plots.hpp"
#include "mtp/profiler.hpp"
#include "mtp/pruner.hpp"
#include "mtp/report.hpp"
#include "mtp/scaling.hpp"
#include "mtp/trainer.hpp"

namespace mtp {

// --------------------------------------------------------------------------
// Individual stages
// --------------------------------------------------------------------------

// Classification pre-training of the backbone from random initialization.
inline ParamStore pretrain_backbone(const NetworkGraph& g, const SynthDatasets& data,
                                    const MtpConfig& cfg) {
  Rng init_rng(mix_seed(cfg.run.seed, "init_backbone"));
  ParamStore backbone =
      init_params(g, Partition::backbone, cfg.model.bn_gamma_init, init_rng);
  Rng order_rng(mix_seed(cfg.run.seed, "pretrain"));
  Workspace ws;
  for (int e = 0; e < cfg.pretrain.epochs; ++e)
    cls_epoch(g, backbone, data.cls_train, cfg.pretrain.lr, cfg.run.batch_size,
              /*l1_alpha=*/0.0, /*coupling=*/nullptr, order_rng, ws, "pretrain");
  return backbone;
}

struct DenseModel {
  ParamStore backbone;
  ParamStore decoder;
};

// Dense joint segmentation training. The backbone starts from the pre-trained
// classification weights; the decoder starts from a fresh random
// initialization. Both partitions update.
inline DenseModel train_segmentation(const NetworkGraph& g, const ParamStore& backbone_init,
                                     const SynthDatasets& data, const MtpConfig& cfg) {
  DenseModel m;
  m.backbone = backbone_init;
  Rng init_rng(mix_seed(cfg.run.seed, "init_decoder"));
  m.decoder = init_params(g, Partition::decoder, cfg.model.bn_gamma_init, init_rng);
  Rng order_rng(mix_seed(cfg.run.seed, "train_seg"));
  Workspace ws;
  for (int e = 0; e < cfg.dense.epochs; ++e)
    seg_epoch(g, m.backbone, m.decoder, data.seg_train, /*lambda=*/1.0, cfg.dense.lr,
              cfg.run.batch_size, /*update_backbone=*/true, /*update_decoder=*/true,
              /*l1_alpha_backbone=*/0.0, /*l1_alpha_decoder=*/0.0, /*coupling=*/nullptr,
              order_rng, ws, "train_seg");
  return m;
}

struct StageEval {
  double top1 = -1.0;  // percent; -1 when not applicable
  double miou = -1.0;
};

inline StageEval evaluate_model(const NetworkGraph& g, ParamStore& backbone,
                                ParamStore& decoder, const SynthDatasets& data,
                                const MtpConfig& cfg) {
  StageEval ev;
  ev.top1 = eval_top1(g, backbone, data.cls_val, cfg.run.batch_size);
  ev.miou = eval_miou(g, backbone, decoder, data.seg_val, cfg.run.batch_size);
  return ev;
}

struct FinetuneResult {
  StageEval after_cls;  // after stage one (classification, backbone only)
  StageEval after_seg;  // after stage two (segmentation, whole network)
};

// Two-stage recovery after pruning: first the backbone alone on
// classification data (the classification head is retained from the sparse
// phase, never re-initialized), then the whole network on segmentation data.
// Zero budgets for both stages leave the weights untouched.
inline FinetuneResult finetune_two_stage(const NetworkGraph& g, ParamStore& backbone,
                                         ParamStore& decoder, const SynthDatasets& data,
                                         const MtpConfig& cfg,
                                         const std::string& stream = "finetune") {
  Rng order_rng(mix_seed(cfg.run.seed, stream));
  Workspace ws;
  for (int e = 0; e < cfg.finetune.cls_epochs; ++e)
    cls_epoch(g, backbone, data.cls_train, cfg.finetune.lr_cls, cfg.run.batch_size,
              /*l1_alpha=*/0.0, /*coupling=*/nullptr, order_rng, ws, stream + "/cls");
  FinetuneResult r;
  r.after_cls = evaluate_model(g, backbone, decoder, data, cfg);
  for (int e = 0; e < cfg.finetune.seg_epochs; ++e)
    seg_epoch(g, backbone, decoder, data.seg_train, /*lambda=*/1.0, cfg.finetune.lr_seg,
              cfg.run.batch_size, /*update_backbone=*/true, /*update_decoder=*/true,
              /*l1_alpha_backbone=*/0.0, /*l1_alpha_decoder=*/0.0, /*coupling=*/nullptr,
              order_rng, ws, stream + "/seg");
  r.after_seg = evaluate_model(g, backbone, decoder, data, cfg);
  return r;
}

// --------------------------------------------------------------------------
// Pruning-plan construction from a trained sparse state
// --------------------------------------------------------------------------

// Scores come from w1 (backbone) and w2 (decoder). The w3 copy regularizes
// only; the optional config switch averages |gamma| of w1 and w3 for
// analysis.
inline PruningPlan plan_from_state(const NetworkGraph& g, const LagrangianState& st,
                                   const MtpConfig& cfg) {
  ScalingVector gb = extract_scaling_factors(g, st.w1, Partition::backbone);
  if (cfg.mtp.gamma_average_w1_w3) {
    const ScalingVector gb3 = extract_scaling_factors(g, st.w3, Partition::backbone);
    for (std::size_t i = 0; i < gb.entries.size(); ++i)
      gb.entries[i].value =
          0.5 * (std::abs(gb.entries[i].value) + std::abs(gb3.entries[i].value));
  }
  const ScalingVector gd = extract_scaling_factors(g, st.w2, Partition::decoder);
  return build_plan(g, gb, gd, cfg.prune.percentile, cfg.prune.policy);
}

// --------------------------------------------------------------------------
// Baseline arms
// --------------------------------------------------------------------------

// Single-task sparse phase of the slimming baseline: segmentation-only
// training of the whole network with L1 pressure on every scaling factor.
// The epoch budget matches the multi-task phase's total (rounds x the three
// sub-problem budgets) so the comparison is budget-fair; since this arm has
// no classification epochs, it actually receives more segmentation epochs
// than the multi-task arm does.
inline void slimming_sparse_phase(const NetworkGraph& g, ParamStore& backbone,
                                  ParamStore& decoder, const SynthDatasets& data,
                                  const MtpConfig& cfg) {
  Rng order_rng(mix_seed(cfg.run.seed, "slimming"));
  Workspace ws;
  const int epochs =
      cfg.mtp.rounds * (cfg.mtp.epochs_w1 + cfg.mtp.epochs_w2 + cfg.mtp.epochs_w3);
  for (int e = 0; e < epochs; ++e)
    seg_epoch(g, backbone, decoder, data.seg_train, /*lambda=*/1.0, cfg.mtp.lr_w3,
              cfg.run.batch_size, /*update_backbone=*/true, /*update_decoder=*/true,
              cfg.mtp.alpha1, cfg.mtp.alpha2, /*coupling=*/nullptr, order_rng, ws,
              "slimming");
}

struct BaselineResult {
  PruningPlan plan;
  PrunedModel model;  // pruned graph and stores, after fine-tuning
  StageEval before_finetune;
  FinetuneResult finetune;
};

// Slimming baseline: sparse-train on the segmentation task alone, prune with
// the same pruner settings as the multi-task arm, then the same two-stage
// fine-tune.
inline BaselineResult run_baseline_slimming(const NetworkGraph& g, const DenseModel& dense,
                                            const SynthDatasets& data,
                                            const MtpConfig& cfg) {
  ParamStore backbone = dense.backbone;
  ParamStore decoder = dense.decoder;
  slimming_sparse_phase(g, backbone, decoder, data, cfg);

  const ScalingVector gb = extract_scaling_factors(g, backbone, Partition::backbone);
  const ScalingVector gd = extract_scaling_factors(g, decoder, Partition::decoder);
  BaselineResult r;
  r.plan = build_plan(g, gb, gd, cfg.prune.percentile, cfg.prune.policy);
  r.model = apply_plan(g, backbone, decoder, r.plan);
  r.before_finetune =
      evaluate_model(r.model.graph, r.model.backbone, r.model.decoder, data, cfg);
  r.finetune = finetune_two_stage(r.model.graph, r.model.backbone, r.model.decoder, data,
                                  cfg, "finetune");
  return r;
}

// Uniform baseline: each prunable layer keeps ceil(keep_fraction * C)
// channels chosen by largest |gamma| of the dense model, then the same
// two-stage fine-tune.
inline BaselineResult run_baseline_uniform(const NetworkGraph& g, const DenseModel& dense,
                                           const SynthDatasets& data, const MtpConfig& cfg,
                                           double keep_fraction) {
  const ScalingVector gb =
      extract_scaling_factors(g, dense.backbone, Partition::backbone);
  const ScalingVector gd = extract_scaling_factors(g, dense.decoder, Partition::decoder);
  BaselineResult r;
  r.plan = build_uniform_plan(g, gb, gd, keep_fraction);
  r.model = apply_plan(g, dense.backbone, dense.decoder, r.plan);
  r.before_finetune =
      evaluate_model(r.model.graph, r.model.backbone, r.model.decoder, data, cfg);
  r.finetune = finetune_two_stage(r.model.graph, r.model.backbone, r.model.decoder, data,
                                  cfg, "finetune");
  return r;
}

// --------------------------------------------------------------------------
// Experiment driver
// --------------------------------------------------------------------------

struct ExperimentOptions {
  bool with_slimming = false;
  bool with_uniform = false;
  bool write_plots = true;
};

struct ExperimentResult {
  ExperimentReport report;
  std::string out_dir;
  std::string failed_stage;  // empty when every stage completed
  std::string error;
  std::optional<PruningPlan> plan;

  bool ok() const { return failed_stage.empty(); }
};

namespace detail {

// Writes through a temp file and renames, so a concurrently reading merger
// never sees a half-written report.
inline void atomic_write(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write file: " + tmp);
    out << text;
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

// Runs the full pipeline: pretrain -> dense baseline -> alternating sparse
// training -> prune -> two-stage fine-tune, plus the optional baseline arms,
// evaluating and profiling at every stage. All artifacts land under
// cfg.run.out_dir. A stage failure stops the pipeline, records the stage
// name, and still persists the partial report.
//
// Persisted layout:
//   config.ini, graph.json (dense stages), graph_pruned.json,
//   graph_slimming.json / graph_uniform.json (baseline arms),
//   ckpt_{pretrain,dense,sparse,pruned,finetuned,slimming,uniform}.bin,
//   plan.txt, plan_slimming.txt, plan_uniform.txt, history.csv, report.csv,
//   failure.txt (only on error), plots/*.svg.
//
// Report rows use the graph of their stage: pretrain/dense/sparse profile
// graph.json, pruned/finetune_cls/finetuned profile graph_pruned.json, and
// each baseline arm profiles its own graph file.
inline ExperimentResult run_experiment(const MtpConfig& cfg,
                                       const ExperimentOptions& opts = {}) {
  cfg.validate();
  namespace fs = std::filesystem;
  const std::string out = cfg.run.out_dir.empty() ? std::string("mtp-out") : cfg.run.out_dir;
  fs::create_directories(out);
  if (opts.write_plots) fs::create_directories(out + "/plots");
  cfg.save(out + "/config.ini");

  const NetworkGraph g = build_desk_network(cfg);
  save_graph(out + "/graph.json", g);
  const SynthDatasets data = generate_datasets(cfg.run.seed, cfg);

  ExperimentResult res;
  res.out_dir = out;
  const std::string hash = cfg.hash_hex();
  const std::array<int, 3> in_shape{cfg.model.input_channels, cfg.model.image_size,
                                    cfg.model.image_size};

  // One profiler call per distinct graph; rows sharing a graph share the
  // measurement. Latency only fixes the arithmetic, so scratch weights do.
  std::map<std::string, ProfileResult> profiled;
  auto profile_of = [&](const std::string& tag,
                        const NetworkGraph& graph) -> const ProfileResult& {
    auto it = profiled.find(tag);
    if (it == profiled.end()) {
      Rng scratch(mix_seed(cfg.run.seed, "profile:" + tag));
      ParamStore sb = init_params(graph, Partition::backbone, cfg.model.bn_gamma_init, scratch);
      ParamStore sd = init_params(graph, Partition::decoder, cfg.model.bn_gamma_init, scratch);
      it = profiled
               .emplace(tag, measure_latency(graph, sb, sd, in_shape, cfg.run.latency_runs))
               .first;
    }
    return it->second;
  };

  auto add_row = [&](const std::string& stage, const std::string& graph_tag,
                     const NetworkGraph& graph, const StageEval& ev) {
    const ProfileResult& pr = profile_of(graph_tag, graph);
    ReportRow row;
    row.stage = stage;
    row.top1 = ev.top1;
    row.miou = ev.miou;
    row.params = pr.params;
    row.flops = pr.flops;
    row.latency_ms = pr.latency_ms;
    row.seed = cfg.run.seed;
    row.config_hash = hash;
    res.report.rows.push_back(row);
  };

  auto save_stores = [&](const std::string& path, std::map<std::string, ParamStore> stores,
                         double mu, int round) {
    Checkpoint c;
    c.stores = std::move(stores);
    c.mu = mu;
    c.round = round;
    c.config_hash = cfg.hash();
    save_checkpoint(path, c);
  };

  ParamStore backbone_pre;
  DenseModel dense;
  SparseHistory hist;
  std::string stage = "pretrain";
  try {
    // Stage: classification pre-training.
    backbone_pre = pretrain_backbone(g, data, cfg);
    save_stores(out + "/ckpt_pretrain.bin", {{"backbone", backbone_pre}}, 0.0, 0);
    StageEval ev;
    ev.top1 = eval_top1(g, backbone_pre, data.cls_val, cfg.run.batch_size);
    add_row("pretrain", "dense", g, ev);

    // Stage: dense joint segmentation baseline.
    stage = "dense";
    dense = train_segmentation(g, backbone_pre, data, cfg);
    save_stores(out + "/ckpt_dense.bin",
                {{"backbone", dense.backbone}, {"decoder", dense.decoder}}, 0.0, 0);
    add_row("dense", "dense", g, evaluate_model(g, dense.backbone, dense.decoder, data, cfg));

    // Stage: alternating multi-task sparse training. Both backbone copies
    // split off from the dense-trained backbone (their equality constraint
    // holds trivially at the start); the decoder continues from the dense
    // baseline. The classification epochs then pull w1 back toward the
    // pre-training task while the coupling keeps the copies together.
    stage = "sparse";
    auto [st, h] = train_sparse(g, dense.backbone, dense.decoder, data, cfg);
    hist = std::move(h);
    hist.save_csv(out + "/history.csv");
    save_stores(out + "/ckpt_sparse.bin",
                {{"w1", st.w1}, {"w2", st.w2}, {"w3", st.w3}, {"E", st.E}}, st.mu, st.round);
    {
      StageEval sev;
      sev.top1 = eval_top1(g, st.w1, data.cls_val, cfg.run.batch_size);
      sev.miou = eval_miou(g, st.w3, st.w2, data.seg_val, cfg.run.batch_size);
      add_row("sparse", "dense", g, sev);
    }

    // Stage: percentile pruning and graph surgery. The deployed model carries
    // the (w3, w2) weights forward: the two backbone copies are coupled toward
    // equality, and w3 is the one whose batch statistics and weights actually
    // serve the main task. w1 has shaped the scaling factors and keeps the
    // classification head transferable; the fine-tune stage restores it.
    stage = "prune";
    PruningPlan plan = plan_from_state(g, st, cfg);
    save_plan(out + "/plan.txt", plan);
    PrunedModel pm = apply_plan(g, st.w3, st.w2, plan);
    save_graph(out + "/graph_pruned.json", pm.graph);
    save_stores(out + "/ckpt_pruned.bin",
                {{"backbone", pm.backbone}, {"decoder", pm.decoder}}, 0.0, 0);
    res.plan = plan;
    add_row("pruned", "pruned", pm.graph,
            evaluate_model(pm.graph, pm.backbone, pm.decoder, data, cfg));

    // Stage: two-stage fine-tuning of the pruned model.
    stage = "finetune";
    const FinetuneResult ft =
        finetune_two_stage(pm.graph, pm.backbone, pm.decoder, data, cfg, "finetune");
    save_stores(out + "/ckpt_finetuned.bin",
                {{"backbone", pm.backbone}, {"decoder", pm.decoder}}, 0.0, 0);
    add_row("finetune_cls", "pruned", pm.graph, ft.after_cls);
    add_row("finetuned", "pruned", pm.graph, ft.after_seg);

    // Optional arms, sharing seed, prune fraction, fine-tune budgets, and
    // evaluation sets with the run above.
    if (opts.with_slimming) {
      stage = "slimming";
      BaselineResult slim = run_baseline_slimming(g, dense, data, cfg);
      save_graph(out + "/graph_slimming.json", slim.model.graph);
      save_plan(out + "/plan_slimming.txt", slim.plan);
      save_stores(out + "/ckpt_slimming.bin",
                  {{"backbone", slim.model.backbone}, {"decoder", slim.model.decoder}}, 0.0,
                  0);
      add_row("slimming", "slimming", slim.model.graph, slim.finetune.after_seg);
    }
    if (opts.with_uniform) {
      stage = "uniform";
      const double kf = 1.0 - cfg.prune.percentile / 100.0;
      BaselineResult uni = run_baseline_uniform(g, dense, data, cfg, kf);
      save_graph(out + "/graph_uniform.json", uni.model.graph);
      save_plan(out + "/plan_uniform.txt", uni.plan);
      save_stores(out + "/ckpt_uniform.bin",
                  {{"backbone", uni.model.backbone}, {"decoder", uni.model.decoder}}, 0.0,
                  0);
      add_row("uniform", "uniform", uni.model.graph, uni.finetune.after_seg);
    }
  } catch (const std::exception& e) {
    res.failed_stage = stage;
    res.error = e.what();
    detail::atomic_write(out + "/failure.txt", stage + ": " + e.what() + "\n");
  }

  // The fair-comparison assertion: every row of one experiment must carry the
  // same seed and config hash.
  res.report.check_consistent();
  detail::atomic_write(out + "/report.csv", res.report.to_csv());

  if (opts.write_plots) {
    if (!hist.rows.empty())
      plot_sparsity_history(hist, out + "/plots/sparsity_history.svg");
    if (res.plan)
      plot_channels_per_layer(g, *res.plan, out + "/plots/channels_per_layer.svg");
    plot_quality_vs_flops(res.report, out + "/plots/quality_vs_flops.svg");
  }
  return res;
}

}  // namespace mtp
