// Command-line front end for the multi-task channel-pruning toolkit.
//
// Stage subcommands communicate through artifacts in the output directory:
// pretrain writes ckpt_pretrain.bin, train-seg reads it and writes
// ckpt_dense.bin, and so on down the pipeline. Every checkpoint is stamped
// with the config hash, and a stage refuses to consume artifacts written
// under a different configuration.
//
// The output directory is resolved as: --out-dir flag, then the config file's
// run.out_dir, then the MTP_OUT_DIR environment variable, then "mtp-out".

#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "mtp/build.hpp"
#include "mtp/checkpoint.hpp"
#include "mtp/config.hpp"
#include "mtp/datasets.hpp"
#include "mtp/metrics.hpp"
#include "mtp/pipeline.hpp"
#include "mtp/profiler.hpp"
#include "mtp/pruner.hpp"
#include "mtp/report.hpp"
#include "mtp/trainer.hpp"

namespace {

struct CliState {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<double> keep_fraction;
  std::string policy;
};

mtp::MtpConfig resolve_config(const CliState& s) {
  mtp::MtpConfig cfg = s.config_path.empty() ? mtp::MtpConfig{}
                                             : mtp::MtpConfig::from_ini_file(s.config_path);
  if (s.seed) cfg.run.seed = *s.seed;
  if (s.keep_fraction) cfg.prune.percentile = (1.0 - *s.keep_fraction) * 100.0;
  if (!s.policy.empty()) cfg.prune.policy = mtp::threshold_policy_from_string(s.policy);
  if (!s.out_dir.empty()) {
    cfg.run.out_dir = s.out_dir;
  } else if (cfg.run.out_dir.empty()) {
    const char* env = std::getenv("MTP_OUT_DIR");
    cfg.run.out_dir = (env && *env) ? env : "mtp-out";
  }
  cfg.validate();
  return cfg;
}

mtp::Checkpoint load_stamped(const std::string& path, const mtp::MtpConfig& cfg) {
  mtp::Checkpoint c = mtp::load_checkpoint(path);
  if (c.config_hash != cfg.hash())
    throw std::runtime_error(path + " was written under config hash " +
                             mtp::MtpConfig::hash_to_hex(c.config_hash) +
                             " but the current config hashes to " + cfg.hash_hex());
  return c;
}

const mtp::ParamStore& store_of(const mtp::Checkpoint& c, const std::string& name,
                                const std::string& path) {
  auto it = c.stores.find(name);
  if (it == c.stores.end())
    throw std::runtime_error(path + ": checkpoint has no '" + name + "' store");
  return it->second;
}

// Clamps [0,1] image data to bytes and writes a binary PPM.
void write_ppm(const std::string& path, const std::vector<double>& img, int size) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image: " + path);
  out << "P6\n" << size << " " << size << "\n255\n";
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) {
      const double v = img[static_cast<std::size_t>(c) * plane + p];
      out.put(static_cast<char>(
          static_cast<unsigned char>(std::min(255.0, std::max(0.0, v * 255.0)))));
    }
}

void write_mask_ppm(const std::string& path, const std::vector<int>& mask, int size,
                    int num_classes) {
  // Fixed palette: background dark, classes saturated.
  static const unsigned char pal[5][3] = {
      {20, 20, 20}, {214, 39, 40}, {44, 160, 44}, {31, 119, 180}, {255, 187, 120}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image: " + path);
  out << "P6\n" << size << " " << size << "\n255\n";
  for (int v : mask) {
    const int k = (v >= 0 && v < num_classes && v < 5) ? v : 0;
    for (int c = 0; c < 3; ++c) out.put(static_cast<char>(pal[k][c]));
  }
}

int cmd_gen_data(const mtp::MtpConfig& cfg) {
  const std::string out = cfg.run.out_dir;
  std::filesystem::create_directories(out + "/samples");
  const mtp::SynthDatasets data = mtp::generate_datasets(cfg.run.seed, cfg);

  std::vector<long long> cls_hist(static_cast<std::size_t>(cfg.model.num_classes), 0);
  for (int y : data.cls_train.labels) ++cls_hist[static_cast<std::size_t>(y)];
  std::vector<long long> px_hist(static_cast<std::size_t>(cfg.model.seg_classes), 0);
  for (const auto& m : data.seg_train.masks)
    for (int v : m) ++px_hist[static_cast<std::size_t>(v)];

  std::ofstream sum(out + "/dataset_summary.txt");
  sum << "seed " << cfg.run.seed << "\n"
      << "cls_train " << data.cls_train.images.size() << "\n"
      << "cls_val " << data.cls_val.images.size() << "\n"
      << "seg_train " << data.seg_train.images.size() << "\n"
      << "seg_val " << data.seg_val.images.size() << "\n";
  sum << "cls_label_histogram";
  for (long long h : cls_hist) sum << " " << h;
  sum << "\nseg_pixel_histogram";
  for (long long h : px_hist) sum << " " << h;
  sum << "\n";

  const int S = cfg.model.image_size;
  for (int i = 0; i < 4 && i < static_cast<int>(data.cls_train.images.size()); ++i)
    write_ppm(out + "/samples/cls_" + std::to_string(i) + "_label" +
                  std::to_string(data.cls_train.labels[static_cast<std::size_t>(i)]) + ".ppm",
              data.cls_train.images[static_cast<std::size_t>(i)], S);
  for (int i = 0; i < 2 && i < static_cast<int>(data.seg_train.images.size()); ++i) {
    write_ppm(out + "/samples/seg_" + std::to_string(i) + ".ppm",
              data.seg_train.images[static_cast<std::size_t>(i)], S);
    write_mask_ppm(out + "/samples/seg_" + std::to_string(i) + "_mask.ppm",
                   data.seg_train.masks[static_cast<std::size_t>(i)], S,
                   cfg.model.seg_classes);
  }
  std::printf("datasets written: %zu cls train, %zu seg train images (summary in %s)\n",
              data.cls_train.images.size(), data.seg_train.images.size(),
              (out + "/dataset_summary.txt").c_str());
  return 0;
}

int cmd_pretrain(const mtp::MtpConfig& cfg) {
  const std::string out = cfg.run.out_dir;
  std::filesystem::create_directories(out);
  cfg.save(out + "/config.ini");
  const mtp::NetworkGraph g = mtp::build_desk_network(cfg);
  mtp::save_graph(out + "/graph.json", g);
  const mtp::SynthDatasets data = mtp::generate_datasets(cfg.run.seed, cfg);

  mtp::ParamStore backbone = mtp::pretrain_backbone(g, data, cfg);
  mtp::Checkpoint c;
  c.stores["backbone"] = backbone;
  c.config_hash = cfg.hash();
  mtp::save_checkpoint(out + "/ckpt_pretrain.bin", c);
  const double top1 = mtp::eval_top1(g, backbone, data.cls_val, cfg.run.batch_size);
  std::printf("pretrain done: val top-1 %.2f%% (ckpt_pretrain.bin)\n", top1);
  return 0;
}

int cmd_train_seg(const mtp::MtpConfig& cfg) {
  const std::string out = cfg.run.out_dir;
  const mtp::NetworkGraph g = mtp::build_desk_network(cfg);
  const mtp::SynthDatasets data = mtp::generate_datasets(cfg.run.seed, cfg);
  const mtp::Checkpoint pre = load_stamped(out + "/ckpt_pretrain.bin", cfg);

  mtp::DenseModel dense =
      mtp::train_segmentation(g, store_of(pre, "backbone", "ckpt_pretrain.bin"), data, cfg);
  mtp::Checkpoint c;
  c.stores["backbone"] = dense.backbone;
  c.stores["decoder"] = dense.decoder;
  c.config_hash = cfg.hash();
  mtp::save_checkpoint(out + "/ckpt_dense.bin", c);
  const mtp::StageEval ev = mtp::evaluate_model(g, dense.backbone, dense.decoder, data, cfg);
  std::printf("dense baseline done: val top-1 %.2f%%, val mIoU %.2f%% (ckpt_dense.bin)\n",
              ev.top1, ev.miou);
  return 0;
}

int cmd_mtp_train(const mtp::MtpConfig& cfg) {
  const std::string out = cfg.run.out_dir;
  const mtp::NetworkGraph g = mtp::build_desk_network(cfg);
  const mtp::SynthDatasets data = mtp::generate_datasets(cfg.run.seed, cfg);
  const mtp::Checkpoint pre = load_stamped(out + "/ckpt_pretrain.bin", cfg);
  const mtp::Checkpoint dense = load_stamped(out + "/ckpt_dense.bin", cfg);

  auto [st, hist] = mtp::train_sparse(g, store_of(pre, "backbone", "ckpt_pretrain.bin"),
                                      store_of(dense, "decoder", "ckpt_dense.bin"), data, cfg);
  hist.save_csv(out + "/history.csv");
  mtp::Checkpoint c;
  c.stores["w1"] = st.w1;
  c.stores["w2"] = st.w2;
  c.stores["w3"] = st.w3;
  c.stores["E"] = st.E;
  c.mu = st.mu;
  c.round = st.round;
  c.config_hash = cfg.hash();
  mtp::save_checkpoint(out + "/ckpt_sparse.bin", c);
  const auto& last = hist.rows.back();
  std::printf("sparse phase done: %zu rounds, rel residual %.4g, sparsity backbone %.3f "
              "decoder %.3f (ckpt_sparse.bin, history.csv)\n",
              hist.rows.size(), last.rel_residual, last.sparsity_backbone,
              last.sparsity_decoder);
  return 0;
}

int cmd_prune(const mtp::MtpConfig& cfg) {
  const std::string out = cfg.run.out_dir;
  const mtp::NetworkGraph g = mtp::build_desk_network(cfg);
  const mtp::SynthDatasets data = mtp::generate_datasets(cfg.run.seed, cfg);
  const mtp::Checkpoint sp = load_stamped(out + "/ckpt_sparse.bin", cfg);

  mtp::LagrangianState st;
  st.w1 = store_of(sp, "w1", "ckpt_sparse.bin");
  st.w2 = store_of(sp, "w2", "ckpt_sparse.bin");
  st.w3 = store_of(sp, "w3", "ckpt_sparse.bin");
  const mtp::PruningPlan plan = mtp::plan_from_state(g, st, cfg);
  mtp::save_plan(out + "/plan.txt", plan);
  mtp::PrunedModel pm = mtp::apply_plan(g, st.w1, st.w2, plan);
  mtp::save_graph(out + "/graph_pruned.json", pm.graph);
  mtp::Checkpoint c;
  c.stores["backbone"] = pm.backbone;
  c.stores["decoder"] = pm.decoder;
  c.config_hash = cfg.hash();
  mtp::save_checkpoint(out + "/ckpt_pruned.bin", c);

  const mtp::StageEval ev = mtp::evaluate_model(pm.graph, pm.backbone, pm.decoder, data, cfg);
  std::printf("pruned at p=%.1f (%s): tau1 %.4g tau2 %.4g, params ratio %.3f, flops ratio "
              "%.3f, val top-1 %.2f%%, val mIoU %.2f%% (plan.txt, graph_pruned.json)\n",
              plan.percentile, mtp::to_string(plan.policy).c_str(), plan.tau_backbone,
              plan.tau_decoder, plan.predicted_params_ratio, plan.predicted_flops_ratio,
              ev.top1, ev.miou);
  return 0;
}

int cmd_finetune(const mtp::MtpConfig& cfg) {
  const std::string out = cfg.run.out_dir;
  const mtp::NetworkGraph pg = mtp::load_graph(out + "/graph_pruned.json");
  const mtp::SynthDatasets data = mtp::generate_datasets(cfg.run.seed, cfg);
  const mtp::Checkpoint pr = load_stamped(out + "/ckpt_pruned.bin", cfg);

  mtp::ParamStore backbone = store_of(pr, "backbone", "ckpt_pruned.bin");
  mtp::ParamStore decoder = store_of(pr, "decoder", "ckpt_pruned.bin");
  const mtp::FinetuneResult ft =
      mtp::finetune_two_stage(pg, backbone, decoder, data, cfg, "finetune");
  mtp::Checkpoint c;
  c.stores["backbone"] = backbone;
  c.stores["decoder"] = decoder;
  c.config_hash = cfg.hash();
  mtp::save_checkpoint(out + "/ckpt_finetuned.bin", c);
  std::printf("fine-tune done: after cls stage top-1 %.2f%% mIoU %.2f%%; final top-1 "
              "%.2f%% mIoU %.2f%% (ckpt_finetuned.bin)\n",
              ft.after_cls.top1, ft.after_cls.miou, ft.after_seg.top1, ft.after_seg.miou);
  return 0;
}

int cmd_profile(const mtp::MtpConfig& cfg, const std::string& graph_path) {
  const std::string path =
      graph_path.empty() ? cfg.run.out_dir + "/graph.json" : graph_path;
  const mtp::NetworkGraph g = mtp::load_graph(path);
  mtp::Rng rng(mtp::mix_seed(cfg.run.seed, "profile_cli"));
  mtp::ParamStore b = mtp::init_params(g, mtp::Partition::backbone, cfg.model.bn_gamma_init, rng);
  mtp::ParamStore d = mtp::init_params(g, mtp::Partition::decoder, cfg.model.bn_gamma_init, rng);
  const std::array<int, 3> shape{cfg.model.input_channels, cfg.model.image_size,
                                 cfg.model.image_size};
  const mtp::ProfileResult pr = mtp::measure_latency(g, b, d, shape, cfg.run.latency_runs);
  std::printf("%s: %lld params, %lld flops (MACs, %dx%dx%d input), median latency %.4f ms "
              "over %d runs on %s\n",
              path.c_str(), pr.params, pr.flops, shape[0], shape[1], shape[2],
              pr.latency_ms, pr.runs, pr.hardware.c_str());
  return 0;
}

int cmd_eval(const mtp::MtpConfig& cfg, const std::string& graph_path,
             const std::string& ckpt_path) {
  const std::string gp = graph_path.empty() ? cfg.run.out_dir + "/graph.json" : graph_path;
  const std::string cp = ckpt_path.empty() ? cfg.run.out_dir + "/ckpt_dense.bin" : ckpt_path;
  const mtp::NetworkGraph g = mtp::load_graph(gp);
  const mtp::SynthDatasets data = mtp::generate_datasets(cfg.run.seed, cfg);
  const mtp::Checkpoint c = load_stamped(cp, cfg);

  // Dense/pruned checkpoints carry backbone+decoder; sparse ones carry w1..w3.
  mtp::ParamStore backbone, decoder;
  bool has_decoder = false;
  if (c.stores.count("backbone")) {
    backbone = c.stores.at("backbone");
    if (c.stores.count("decoder")) {
      decoder = c.stores.at("decoder");
      has_decoder = true;
    }
  } else if (c.stores.count("w1") && c.stores.count("w2")) {
    backbone = c.stores.at("w1");
    decoder = c.stores.at("w2");
    has_decoder = true;
  } else {
    throw std::runtime_error(cp + ": checkpoint has no recognizable parameter stores");
  }

  const double top1 = mtp::eval_top1(g, backbone, data.cls_val, cfg.run.batch_size);
  if (has_decoder) {
    const double miou = mtp::eval_miou(g, backbone, decoder, data.seg_val, cfg.run.batch_size);
    std::printf("%s on %s: val top-1 %.2f%%, val mIoU %.2f%%\n", cp.c_str(), gp.c_str(),
                top1, miou);
  } else {
    std::printf("%s on %s: val top-1 %.2f%% (no decoder store)\n", cp.c_str(), gp.c_str(),
                top1);
  }
  return 0;
}

int cmd_report(const mtp::MtpConfig& cfg) {
  const mtp::ExperimentReport rep =
      mtp::ExperimentReport::load_csv(cfg.run.out_dir + "/report.csv");
  rep.check_consistent();
  std::printf("%-14s %8s %8s %10s %12s %10s\n", "stage", "top1", "miou", "params", "flops",
              "latency_ms");
  for (const auto& r : rep.rows) {
    auto cell = [](double v) { return v < 0 ? std::string("-") : [&] {
      char b[32];
      std::snprintf(b, sizeof(b), "%.2f", v);
      return std::string(b);
    }(); };
    std::printf("%-14s %8s %8s %10lld %12lld %10.4f\n", r.stage.c_str(),
                cell(r.top1).c_str(), cell(r.miou).c_str(), r.params, r.flops, r.latency_ms);
  }
  std::printf("seed %llu, config %s\n",
              static_cast<unsigned long long>(rep.rows.empty() ? 0 : rep.rows.front().seed),
              rep.rows.empty() ? "-" : rep.rows.front().config_hash.c_str());
  return 0;
}

int cmd_run_all(const mtp::MtpConfig& cfg, bool slimming, bool uniform) {
  mtp::ExperimentOptions opts;
  opts.with_slimming = slimming;
  opts.with_uniform = uniform;
  const mtp::ExperimentResult res = mtp::run_experiment(cfg, opts);
  for (const auto& r : res.report.rows)
    std::printf("%-14s top-1 %7.2f  mIoU %7.2f  params %8lld  flops %10lld\n",
                r.stage.c_str(), r.top1, r.miou, r.params, r.flops);
  if (!res.ok()) {
    std::fprintf(stderr, "experiment failed during stage '%s': %s\n",
                 res.failed_stage.c_str(), res.error.c_str());
    return 1;
  }
  std::printf("experiment complete; artifacts under %s\n", res.out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-task channel pruning for encoder-decoder segmentation networks"};
  app.require_subcommand(1);
  app.fallthrough();

  CliState s;
  app.add_option("--config", s.config_path, "configuration file (INI)");
  app.add_option("--out-dir", s.out_dir, "output directory (overrides config and MTP_OUT_DIR)");
  std::uint64_t seed_val = 0;
  auto* seed_opt = app.add_option("--seed", seed_val, "override run.seed");
  double kf_val = 0.0;
  auto* kf_opt = app.add_option("--keep-fraction", kf_val,
                                "override prune percentile as (1-kf)*100");
  app.add_option("--threshold-policy", s.policy, "independent or unified")
      ->check(CLI::IsMember({"independent", "unified"}));

  auto* c_gen = app.add_subcommand("gen-data", "synthesize datasets and write samples");
  auto* c_pre = app.add_subcommand("pretrain", "classification pre-training of the backbone");
  auto* c_seg = app.add_subcommand("train-seg", "dense joint segmentation training");
  auto* c_mtp = app.add_subcommand("mtp-train", "alternating multi-task sparse training");
  auto* c_prune = app.add_subcommand("prune", "build the pruning plan and carve the network");
  auto* c_ft = app.add_subcommand("finetune", "two-stage fine-tuning of the pruned model");
  auto* c_prof = app.add_subcommand("profile", "params, FLOPs and latency of a graph");
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on the validation splits");
  auto* c_rep = app.add_subcommand("report", "print and check an experiment report");
  auto* c_all = app.add_subcommand("run-all", "full pipeline with optional baseline arms");

  std::string graph_path, ckpt_path;
  c_prof->add_option("--graph", graph_path, "graph JSON (default: <out-dir>/graph.json)");
  c_eval->add_option("--graph", graph_path, "graph JSON (default: <out-dir>/graph.json)");
  c_eval->add_option("--ckpt", ckpt_path, "checkpoint (default: <out-dir>/ckpt_dense.bin)");
  bool no_slimming = false, no_uniform = false;
  c_all->add_flag("--no-slimming", no_slimming, "skip the slimming baseline arm");
  c_all->add_flag("--no-uniform", no_uniform, "skip the uniform baseline arm");

  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) s.seed = seed_val;
  if (*kf_opt) s.keep_fraction = kf_val;

  try {
    const mtp::MtpConfig cfg = resolve_config(s);
    if (*c_gen) return cmd_gen_data(cfg);
    if (*c_pre) return cmd_pretrain(cfg);
    if (*c_seg) return cmd_train_seg(cfg);
    if (*c_mtp) return cmd_mtp_train(cfg);
    if (*c_prune) return cmd_prune(cfg);
    if (*c_ft) return cmd_finetune(cfg);
    if (*c_prof) return cmd_profile(cfg, graph_path);
    if (*c_eval) return cmd_eval(cfg, graph_path, ckpt_path);
    if (*c_rep) return cmd_report(cfg);
    if (*c_all) return cmd_run_all(cfg, !no_slimming, !no_uniform);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
