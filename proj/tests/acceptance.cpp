// Acceptance gate. Each criterion is a go/no-go check with its tolerance
// pinned as a named constant below, and prints exactly one line to stdout:
//
//   criterion N: PASS|FAIL
//
// Diagnostics (worst errors, medians, timings) go to stderr. The process
// exits non-zero if any requested criterion fails.
//
// Criteria 6, 7, 8 and 10 share five full experiment runs that are cached
// under ./acceptance_cache; whichever criterion runs first pays for them,
// later ones reuse the artifacts. The cache is keyed by the config hash, so
// editing the experiment config here invalidates it automatically.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "mtp/build.hpp"
#include "mtp/checkpoint.hpp"
#include "mtp/config.hpp"
#include "mtp/datasets.hpp"
#include "mtp/executor.hpp"
#include "mtp/graph.hpp"
#include "mtp/lagrangian.hpp"
#include "mtp/losses.hpp"
#include "mtp/metrics.hpp"
#include "mtp/params.hpp"
#include "mtp/pipeline.hpp"
#include "mtp/profiler.hpp"
#include "mtp/pruner.hpp"
#include "mtp/report.hpp"
#include "mtp/rng.hpp"
#include "mtp/scaling.hpp"
#include "mtp/tensor.hpp"
#include "mtp/trainer.hpp"

#include "helpers.hpp"

namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Pinned tolerances and sizes
// ---------------------------------------------------------------------------

constexpr int kMultiplierStates = 100;     // C1: random states checked
constexpr double kMultiplierRelTol = 1e-14;  // C1: machine precision (fma slack)
constexpr double kGradRelTol = 1e-4;       // C2: finite-difference agreement
constexpr double kGradFdStep = 1e-5;       // C2: central-difference step
constexpr int kGradMaxParams = 100;        // C2: net must stay this small
constexpr int kPairedSeeds = 5;            // C3: paired sparsity runs
constexpr int kPairedWinsNeeded = 4;       // C3: strict wins required
constexpr double kSparsityTol = 1e-3;      // C3: |gamma| below this is "off"
constexpr int kThresholdInstances = 1000;  // C4: random threshold instances
constexpr int kSurgeryPlans = 100;         // C5: random plans surgered
constexpr int kSurgeryInputs = 10;         // C5: forward-equivalence inputs
constexpr double kForwardRelTol = 1e-5;    // C5: relative forward agreement
constexpr int kTrendSeeds = 5;             // C6/C7/C8: seeds per median
constexpr double kAblationPercentile = 70.0;  // C8: prune rate for the policy split
constexpr double kUniformKeep = 0.5;       // C9: keep fraction under test
constexpr double kRatioLo = 0.3;           // C9: cost-ratio window, exclusive
constexpr double kRatioHi = 0.7;
constexpr double kMetricAbsTol = 1e-6;     // C10: top1/mIoU reproduction

const char* kCacheRoot = "acceptance_cache";

// ---------------------------------------------------------------------------
// Shared experiment configuration (criteria 6, 7, 8, 10)
// ---------------------------------------------------------------------------

// Desk-scale config sized so a full run (with the slimming arm) stays well
// under a minute while the quality trends remain visible. The dense stage is
// trained to its plateau so the baseline arms differ by channel selection, not
// by leftover optimization headroom.
mtp::MtpConfig experiment_config(std::uint64_t seed) {
  mtp::MtpConfig cfg;
  cfg.model.num_classes = 6;
  cfg.data.cls_train = 192;
  cfg.data.cls_val = 96;
  cfg.data.seg_train = 96;
  cfg.data.seg_val = 64;
  cfg.pretrain.epochs = 10;
  cfg.pretrain.lr = 0.15;
  cfg.dense.epochs = 40;
  cfg.dense.lr = 0.4;
  cfg.mtp.lambda = 2.0;  // keep the main task dominant in the w2/w3 steps
  cfg.mtp.rounds = 4;
  cfg.mtp.epochs_w1 = 2;
  cfg.mtp.epochs_w2 = 1;
  cfg.mtp.epochs_w3 = 3;
  cfg.mtp.lr_w1 = cfg.mtp.lr_w2 = cfg.mtp.lr_w3 = 0.1;
  cfg.mtp.alpha1 = cfg.mtp.alpha2 = 0.003;
  cfg.mtp.mu0 = 0.5;
  cfg.mtp.rho = 2.0;
  cfg.mtp.gamma_average_w1_w3 = true;
  cfg.finetune.cls_epochs = 2;
  cfg.finetune.seg_epochs = 14;
  cfg.finetune.lr_cls = 0.05;
  cfg.finetune.lr_seg = 0.1;
  cfg.run.latency_runs = 5;
  cfg.run.seed = seed;
  return cfg;
}

// Config for the paired sparsity comparison (criterion 3). Smaller data and a
// lower gamma init give the L1 term room to pull useless channels under the
// sparsity tolerance inside the budget.
mtp::MtpConfig sparsity_config(std::uint64_t seed, bool with_l1) {
  mtp::MtpConfig cfg;
  cfg.model.image_size = 12;
  cfg.model.blocks = 1;
  cfg.model.num_classes = 5;
  cfg.model.seg_classes = 3;
  cfg.model.bn_gamma_init = 0.05;
  cfg.data.cls_train = 160;
  cfg.data.cls_val = 48;
  cfg.data.seg_train = 80;
  cfg.data.seg_val = 24;
  cfg.pretrain.epochs = 2;
  cfg.dense.epochs = 2;
  cfg.mtp.rounds = 6;
  cfg.mtp.epochs_w1 = 2;
  cfg.mtp.epochs_w2 = 1;
  cfg.mtp.epochs_w3 = 2;
  cfg.mtp.lr_w1 = cfg.mtp.lr_w2 = cfg.mtp.lr_w3 = 0.3;
  cfg.mtp.alpha1 = cfg.mtp.alpha2 = with_l1 ? 0.001 : 0.0;
  cfg.run.seed = seed;
  return cfg;
}

// ---------------------------------------------------------------------------
// Small utilities
// ---------------------------------------------------------------------------

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string exp_dir(std::uint64_t seed) {
  return std::string(kCacheRoot) + "/exp_seed" + std::to_string(seed);
}

// Runs (or reuses) the full experiment for one seed. The DONE sentinel plus a
// config-hash check make half-written or stale directories rebuild.
std::string ensure_exp_run(std::uint64_t seed) {
  const std::string dir = exp_dir(seed);
  mtp::MtpConfig cfg = experiment_config(seed);
  if (fs::exists(dir + "/DONE")) {
    const auto cached = mtp::MtpConfig::from_ini_file(dir + "/config.ini");
    if (cached.hash() == cfg.hash()) return dir;
  }
  fs::remove_all(dir);
  const std::string tmp = dir + ".tmp";
  fs::remove_all(tmp);
  cfg.run.out_dir = tmp;
  mtp::ExperimentOptions opts;
  opts.with_slimming = true;
  opts.with_uniform = false;
  opts.write_plots = false;
  const mtp::ExperimentResult res = mtp::run_experiment(cfg, opts);
  if (!res.ok())
    throw std::runtime_error("experiment seed " + std::to_string(seed) +
                             " failed at stage '" + res.failed_stage + "': " + res.error);
  std::ofstream(tmp + "/DONE") << "ok\n";
  fs::create_directories(kCacheRoot);
  fs::rename(tmp, dir);
  return dir;
}

mtp::LagrangianState load_sparse_state(const std::string& dir) {
  const mtp::Checkpoint ck = mtp::load_checkpoint(dir + "/ckpt_sparse.bin");
  mtp::LagrangianState st;
  st.w1 = ck.stores.at("w1");
  st.w2 = ck.stores.at("w2");
  st.w3 = ck.stores.at("w3");
  st.E = ck.stores.at("E");
  st.mu = ck.mu;
  st.round = ck.round;
  return st;
}

// ---------------------------------------------------------------------------
// Criterion 1: multiplier update algebra
// ---------------------------------------------------------------------------
// E' = E + mu_old * (w1 - w3) and mu' = min(rho * mu_old, mu_max), checked on
// random states against an independent flat-vector recomputation.

bool criterion1(std::ostream& diag) {
  const mtp::NetworkGraph g = testutil::micro_two_head();
  mtp::Rng rng(101);
  double worst = 0.0;
  bool ok = true;
  for (int i = 0; i < kMultiplierStates; ++i) {
    mtp::LagrangianState st;
    mtp::Rng init(1000 + static_cast<std::uint64_t>(i));
    st.w1 = mtp::init_params(g, mtp::Partition::backbone, 0.1, init);
    st.w3 = mtp::init_params(g, mtp::Partition::backbone, 0.1, init);
    testutil::randomize_store(st.w1, rng);
    testutil::randomize_store(st.w3, rng);
    if (i % 10 == 0) st.w3 = st.w1;  // zero-residual edge case
    st.E = mtp::zeros_like_trainable(g, st.w1);
    for (auto& [layer, tensors] : st.E.layers)
      for (auto& [name, t] : tensors)
        for (auto& x : t.v) x = rng.uniform(-1.0, 1.0);
    st.mu = std::exp(rng.uniform(std::log(0.01), std::log(90.0)));
    st.round = i % 7;

    mtp::MtpConfig cfg;
    cfg.mtp.rho = 1.1 + rng.uniform(0.0, 2.0);
    cfg.mtp.mu_max = 100.0;

    const std::vector<double> a = mtp::flatten_trainable(g, st.w1);
    const std::vector<double> b = mtp::flatten_trainable(g, st.w3);
    const std::vector<double> e0 = mtp::flatten_trainable(g, st.E);
    const double mu_old = st.mu;
    const int round_old = st.round;
    const mtp::ParamStore w1_before = st.w1;
    const mtp::ParamStore w3_before = st.w3;

    mtp::update_multipliers(st, cfg);

    const std::vector<double> e1 = mtp::flatten_trainable(g, st.E);
    for (std::size_t k = 0; k < e1.size(); ++k) {
      const double expected = e0[k] + mu_old * (a[k] - b[k]);
      const double rel = std::abs(e1[k] - expected) / std::max(1.0, std::abs(expected));
      worst = std::max(worst, rel);
    }
    if (st.mu != std::min(mu_old * cfg.mtp.rho, cfg.mtp.mu_max)) ok = false;
    if (st.round != round_old + 1) ok = false;
    if (!mtp::stores_equal(st.w1, w1_before) || !mtp::stores_equal(st.w3, w3_before))
      ok = false;
  }
  diag << "worst relative multiplier error " << worst << " over " << kMultiplierStates
       << " states (tol " << kMultiplierRelTol << ")\n";
  return ok && worst <= kMultiplierRelTol;
}

// ---------------------------------------------------------------------------
// Criterion 2: analytic gradients of all three sub-problem objectives
// ---------------------------------------------------------------------------
// On a 66-parameter two-head network, central finite differences of each
// alternating-step objective must match the analytic gradients to 1e-4
// relative.

void add_l1_subgradient(const mtp::NetworkGraph& g, const mtp::ParamStore& weights,
                        mtp::Partition part, double alpha, mtp::ParamStore& grads) {
  const mtp::ScalingVector sv = mtp::extract_scaling_factors(g, weights, part);
  const mtp::L1Result l1 = mtp::l1_penalty(sv, alpha);
  for (std::size_t k = 0; k < sv.entries.size(); ++k) {
    const auto& e = sv.entries[k];
    const int bn = mtp::batchnorm_consumer_index(g, g.index_of(e.layer_id));
    const std::string& bn_id = g.layers[static_cast<std::size_t>(bn)].id;
    grads.at(bn_id, "gamma").v[static_cast<std::size_t>(e.channel)] += l1.subgradient[k];
  }
}

bool criterion2(std::ostream& diag) {
  const mtp::NetworkGraph g = testutil::micro_two_head();
  mtp::Rng rng(202);
  const int batch = 2;
  const mtp::Tensor input = testutil::random_input(g, batch, rng);
  const std::vector<int> cls_labels = {0, 2};
  mtp::LabelMap seg_labels(batch, 4, 4);
  for (int i = 0; i < batch; ++i)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) seg_labels.at(i, y, x) = (i + y + x) % 3;

  mtp::ParamStore w1 = mtp::init_params(g, mtp::Partition::backbone, 0.1, rng);
  mtp::ParamStore w2 = mtp::init_params(g, mtp::Partition::decoder, 0.1, rng);
  mtp::ParamStore w3 = mtp::init_params(g, mtp::Partition::backbone, 0.1, rng);
  testutil::randomize_store(w1, rng);
  testutil::randomize_store(w2, rng);
  testutil::randomize_store(w3, rng);
  mtp::ParamStore E = mtp::zeros_like_trainable(g, w1);
  for (auto& [layer, tensors] : E.layers)
    for (auto& [name, t] : tensors)
      for (auto& x : t.v) x = rng.uniform(-0.5, 0.5);

  const std::size_t nparams =
      mtp::trainable_count(g, w1) + mtp::trainable_count(g, w2);
  if (nparams > static_cast<std::size_t>(kGradMaxParams)) {
    diag << "network has " << nparams << " parameters, over the " << kGradMaxParams
         << " cap\n";
    return false;
  }

  const double alpha1 = 0.01, alpha2 = 0.02, lambda = 0.7, mu = 0.9;
  mtp::Workspace ws;

  auto l1_loss = [&](const mtp::ParamStore& s, mtp::Partition p, double alpha) {
    return mtp::l1_penalty(mtp::extract_scaling_factors(g, s, p), alpha).loss;
  };

  // Step-one objective: classification loss + L1 on backbone gammas + coupling.
  auto f1 = [&]() {
    mtp::ModelView m{&g, &w1, nullptr};
    const mtp::Tensor& logits = mtp::forward(m, input, "cls_head", mtp::RunMode::train, ws);
    return mtp::softmax_xent_cls(logits, cls_labels).loss +
           l1_loss(w1, mtp::Partition::backbone, alpha1) +
           mtp::coupling_loss(w1, w3, E, mu);
  };
  mtp::ParamStore grads1 = mtp::zeros_like_trainable(g, w1);
  {
    mtp::ModelView m{&g, &w1, nullptr};
    const mtp::Tensor& logits = mtp::forward(m, input, "cls_head", mtp::RunMode::train, ws);
    const mtp::LossGrad lg = mtp::softmax_xent_cls(logits, cls_labels);
    mtp::GradRequest req{&grads1, nullptr};
    mtp::backward(m, "cls_head", lg.dlogits, ws, req);
    add_l1_subgradient(g, w1, mtp::Partition::backbone, alpha1, grads1);
    mtp::add_coupling_grad_w1(w1, w3, E, mu, grads1);
  }
  const double err1 = testutil::max_fd_error(g, w1, grads1, f1, kGradFdStep);

  // Step-two objective: weighted segmentation loss + L1 on decoder gammas,
  // differentiated with respect to the decoder only (backbone copy frozen).
  auto f2 = [&]() {
    mtp::ModelView m{&g, &w3, &w2};
    const mtp::Tensor& logits = mtp::forward(m, input, "seg_head", mtp::RunMode::train, ws);
    return lambda * mtp::softmax_xent_seg(logits, seg_labels).loss +
           l1_loss(w2, mtp::Partition::decoder, alpha2);
  };
  mtp::ParamStore grads2 = mtp::zeros_like_trainable(g, w2);
  {
    mtp::ModelView m{&g, &w3, &w2};
    const mtp::Tensor& logits = mtp::forward(m, input, "seg_head", mtp::RunMode::train, ws);
    mtp::LossGrad lg = mtp::softmax_xent_seg(logits, seg_labels);
    for (auto& x : lg.dlogits.v) x *= lambda;
    mtp::GradRequest req{nullptr, &grads2};
    mtp::backward(m, "seg_head", lg.dlogits, ws, req);
    add_l1_subgradient(g, w2, mtp::Partition::decoder, alpha2, grads2);
  }
  const double err2 = testutil::max_fd_error(g, w2, grads2, f2, kGradFdStep);

  // Step-three objective: weighted segmentation loss + coupling + L1 on the
  // auxiliary copy's gammas, with respect to the auxiliary backbone copy.
  auto f3 = [&]() {
    mtp::ModelView m{&g, &w3, &w2};
    const mtp::Tensor& logits = mtp::forward(m, input, "seg_head", mtp::RunMode::train, ws);
    return lambda * mtp::softmax_xent_seg(logits, seg_labels).loss +
           l1_loss(w3, mtp::Partition::backbone, alpha2) +
           mtp::coupling_loss(w1, w3, E, mu);
  };
  mtp::ParamStore grads3 = mtp::zeros_like_trainable(g, w3);
  {
    mtp::ModelView m{&g, &w3, &w2};
    const mtp::Tensor& logits = mtp::forward(m, input, "seg_head", mtp::RunMode::train, ws);
    mtp::LossGrad lg = mtp::softmax_xent_seg(logits, seg_labels);
    for (auto& x : lg.dlogits.v) x *= lambda;
    mtp::GradRequest req{&grads3, nullptr};
    mtp::backward(m, "seg_head", lg.dlogits, ws, req);
    add_l1_subgradient(g, w3, mtp::Partition::backbone, alpha2, grads3);
    mtp::add_coupling_grad_w3(w1, w3, E, mu, grads3);
  }
  const double err3 = testutil::max_fd_error(g, w3, grads3, f3, kGradFdStep);

  diag << "finite-difference relative errors: step-one " << err1 << ", step-two " << err2
       << ", step-three " << err3 << " on " << nparams << " parameters (tol "
       << kGradRelTol << ")\n";
  return err1 <= kGradRelTol && err2 <= kGradRelTol && err3 <= kGradRelTol;
}

// ---------------------------------------------------------------------------
// Criterion 3: the L1 term produces sparsity
// ---------------------------------------------------------------------------
// Paired runs per seed (identical except alpha1 = alpha2 = 0): the fraction of
// scaling factors with |gamma| < 1e-3 must be strictly larger with the L1 term
// in at least 4 of 5 seeds.

double combined_sparsity(const mtp::NetworkGraph& g, const mtp::LagrangianState& st) {
  const mtp::ScalingVector gb =
      mtp::extract_scaling_factors(g, st.w1, mtp::Partition::backbone);
  const mtp::ScalingVector gd =
      mtp::extract_scaling_factors(g, st.w2, mtp::Partition::decoder);
  const double nb = static_cast<double>(gb.entries.size());
  const double nd = static_cast<double>(gd.entries.size());
  return (mtp::sparsity_fraction(gb, kSparsityTol) * nb +
          mtp::sparsity_fraction(gd, kSparsityTol) * nd) /
         (nb + nd);
}

bool criterion3(std::ostream& diag) {
  int wins = 0;
  for (std::uint64_t seed = 1; seed <= kPairedSeeds; ++seed) {
    const mtp::MtpConfig with_l1 = sparsity_config(seed, true);
    const mtp::MtpConfig without = sparsity_config(seed, false);
    const mtp::NetworkGraph g = mtp::build_desk_network(with_l1);
    const mtp::SynthDatasets data = mtp::generate_datasets(seed, with_l1);
    const mtp::ParamStore pre = mtp::pretrain_backbone(g, data, with_l1);
    const mtp::DenseModel dense = mtp::train_segmentation(g, pre, data, with_l1);
    auto [st_l1, h1] = mtp::train_sparse(g, dense.backbone, dense.decoder, data, with_l1);
    auto [st_0, h0] = mtp::train_sparse(g, dense.backbone, dense.decoder, data, without);
    const double f_l1 = combined_sparsity(g, st_l1);
    const double f_0 = combined_sparsity(g, st_0);
    diag << "seed " << seed << ": sparsity " << f_l1 << " with L1 vs " << f_0
         << " without\n";
    if (f_l1 > f_0) ++wins;
  }
  diag << wins << "/" << kPairedSeeds << " paired wins (need >= " << kPairedWinsNeeded
       << ")\n";
  return wins >= kPairedWinsNeeded;
}

// ---------------------------------------------------------------------------
// Criterion 4: percentile thresholds against a sorting oracle
// ---------------------------------------------------------------------------
// 1000 random instances, tie-heavy by construction. The oracle re-derives the
// keep masks and taus from first principles: sort by (|gamma|, layer order,
// channel), cut floor(p/100 * n) per partition (or pooled), resurrect each
// emptied layer's largest-|gamma| channel.

struct OraclePlan {
  std::map<std::string, std::vector<char>> keep;
  double tau_backbone = 0.0;
  double tau_decoder = 0.0;
};

OraclePlan oracle_plan(const mtp::NetworkGraph& g, const mtp::ScalingVector& gb,
                       const mtp::ScalingVector& gd, double percentile,
                       mtp::ThresholdPolicy policy) {
  struct Entry {
    double mag;
    int layer;
    int channel;
    std::string id;
    mtp::Partition part;
  };
  std::vector<Entry> pool;
  for (const mtp::ScalingVector* sv : {&gb, &gd})
    for (const auto& e : sv->entries)
      pool.push_back({std::abs(e.value), g.index_of(e.layer_id), e.channel, e.layer_id,
                      sv->partition});
  std::stable_sort(pool.begin(), pool.end(), [](const Entry& a, const Entry& b) {
    return std::tie(a.mag, a.layer, a.channel) < std::tie(b.mag, b.layer, b.channel);
  });

  OraclePlan out;
  for (const auto& l : g.layers)
    if (l.prunable)
      out.keep[l.id] = std::vector<char>(static_cast<std::size_t>(l.out_channels), 1);

  auto apply_cut = [&](const std::vector<Entry>& sorted, double* tau_b, double* tau_d) {
    const std::size_t cut = static_cast<std::size_t>(
        std::floor(percentile / 100.0 * static_cast<double>(sorted.size())));
    double tau = 0.0;
    for (std::size_t i = 0; i < cut; ++i) {
      out.keep.at(sorted[i].id)[static_cast<std::size_t>(sorted[i].channel)] = 0;
      tau = sorted[i].mag;
    }
    if (tau_b) *tau_b = tau;
    if (tau_d) *tau_d = tau;
  };

  if (policy == mtp::ThresholdPolicy::independent) {
    std::vector<Entry> bs, ds;
    for (const auto& e : pool)
      (e.part == mtp::Partition::backbone ? bs : ds).push_back(e);
    apply_cut(bs, &out.tau_backbone, nullptr);
    apply_cut(ds, nullptr, &out.tau_decoder);
  } else {
    apply_cut(pool, &out.tau_backbone, &out.tau_decoder);
  }

  // Resurrection: an emptied layer keeps its largest-|gamma| channel, ties to
  // the lowest channel index.
  std::map<std::string, std::vector<double>> mags;
  for (const auto& e : pool) {
    auto& v = mags[e.id];
    if (static_cast<int>(v.size()) <= e.channel)
      v.resize(static_cast<std::size_t>(e.channel) + 1, 0.0);
    v[static_cast<std::size_t>(e.channel)] = e.mag;
  }
  for (auto& [id, mask] : out.keep) {
    if (std::count(mask.begin(), mask.end(), char(1)) > 0) continue;
    const auto& v = mags.at(id);
    std::size_t best = 0;
    for (std::size_t c = 1; c < v.size(); ++c)
      if (v[c] > v[best]) best = c;
    mask[best] = 1;
  }
  return out;
}

bool criterion4(std::ostream& diag) {
  mtp::Rng rng(404);
  int mismatches = 0;
  for (int inst = 0; inst < kThresholdInstances; ++inst) {
    const int nlayers = rng.uniform_int(2, 5);
    std::vector<int> widths;
    for (int i = 0; i < nlayers; ++i) widths.push_back(rng.uniform_int(1, 9));
    const mtp::NetworkGraph g = testutil::conv_chain(widths);

    auto make_sv = [&](mtp::Partition part) {
      mtp::ScalingVector sv;
      sv.partition = part;
      for (const auto& l : g.layers) {
        if (!l.prunable || l.partition != part) continue;
        for (int c = 0; c < l.out_channels; ++c) {
          double v;
          switch (inst % 4) {
            case 0: v = std::round(rng.uniform(-1.0, 1.0) * 10.0) / 10.0; break;
            case 1: {
              const double mags[3] = {0.1, 0.2, 0.3};
              v = mags[rng.uniform_int(0, 2)] * (rng.uniform_int(0, 1) ? 1 : -1);
              break;
            }
            case 2: v = rng.uniform(-1.0, 1.0); break;
            default: v = 0.5; break;
          }
          sv.entries.push_back({l.id, c, v});
        }
      }
      return sv;
    };
    const mtp::ScalingVector gb = make_sv(mtp::Partition::backbone);
    const mtp::ScalingVector gd = make_sv(mtp::Partition::decoder);

    double p;
    switch (inst % 5) {
      case 0: p = 50.0; break;
      case 1: p = 25.0; break;
      case 2: p = 99.9; break;
      case 3: p = 0.5; break;
      default: p = rng.uniform(0.5, 99.5); break;
    }
    const mtp::ThresholdPolicy policy =
        inst % 2 ? mtp::ThresholdPolicy::unified : mtp::ThresholdPolicy::independent;

    const mtp::PruningPlan plan = mtp::build_plan(g, gb, gd, p, policy);
    const auto [tb, td] = mtp::compute_thresholds(g, gb, gd, p, policy);
    const OraclePlan expect = oracle_plan(g, gb, gd, p, policy);

    const bool match = plan.keep == expect.keep && plan.tau_backbone == expect.tau_backbone &&
                       plan.tau_decoder == expect.tau_decoder &&
                       tb == expect.tau_backbone && td == expect.tau_decoder;
    if (!match) {
      ++mismatches;
      if (mismatches <= 3)
        diag << "instance " << inst << " (p=" << p << ", "
             << mtp::to_string(policy) << ") disagrees with the oracle\n";
    }
  }
  diag << mismatches << " mismatches over " << kThresholdInstances << " instances\n";
  return mismatches == 0;
}

// ---------------------------------------------------------------------------
// Criterion 5: surgery correctness
// ---------------------------------------------------------------------------
// 100 random plans across chain and desk graphs: every plan validates, the
// surgered parameter/FLOP counts equal the plan's prediction exactly, and the
// pruned forward matches the unpruned forward with the dropped channels'
// batchnorm gamma/beta zeroed, to 1e-5 relative, on 10 inputs each.

bool criterion5(std::ostream& diag) {
  mtp::Rng rng(505);
  double worst_rel = 0.0;
  for (int i = 0; i < kSurgeryPlans; ++i) {
    mtp::NetworkGraph g;
    if (i % 3 == 0) {
      mtp::MtpConfig mc;
      mc.model.width = 4 + 2 * rng.uniform_int(0, 2);
      mc.model.blocks = 1 + i % 2;
      mc.model.image_size = 8 + 4 * rng.uniform_int(0, 2);
      mc.model.num_classes = 4;
      mc.model.seg_classes = 3;
      g = mtp::build_desk_network(mc);
    } else {
      std::vector<int> widths;
      const int nlayers = rng.uniform_int(2, 5);
      for (int l = 0; l < nlayers; ++l) widths.push_back(rng.uniform_int(2, 8));
      g = testutil::conv_chain(widths);
    }

    auto make_sv = [&](mtp::Partition part) {
      mtp::ScalingVector sv;
      sv.partition = part;
      for (const auto& l : g.layers) {
        if (!l.prunable || l.partition != part) continue;
        for (int c = 0; c < l.out_channels; ++c) {
          double v = rng.uniform(-1.0, 1.0);
          if (i % 2) v = std::round(v * 8.0) / 8.0;  // force ties half the time
          sv.entries.push_back({l.id, c, v});
        }
      }
      return sv;
    };
    const mtp::PruningPlan plan =
        mtp::build_plan(g, make_sv(mtp::Partition::backbone),
                        make_sv(mtp::Partition::decoder), rng.uniform(10.0, 90.0),
                        i % 2 ? mtp::ThresholdPolicy::unified
                              : mtp::ThresholdPolicy::independent);

    if (!mtp::validate(mtp::pruned_graph_structure(g, plan)).empty()) {
      diag << "plan " << i << " produced an invalid graph\n";
      return false;
    }

    mtp::Rng init(9000 + static_cast<std::uint64_t>(i));
    mtp::ParamStore backbone = mtp::init_params(g, mtp::Partition::backbone, 0.1, init);
    mtp::ParamStore decoder = mtp::init_params(g, mtp::Partition::decoder, 0.1, init);
    testutil::randomize_store(backbone, init);
    testutil::randomize_store(decoder, init);

    const mtp::PrunedModel pm = mtp::apply_plan(g, backbone, decoder, plan);
    const long long got_params = mtp::count_params(pm.graph);
    const long long got_flops = mtp::count_flops(pm.graph, g.input_shape);
    const std::size_t store_params =
        mtp::trainable_count(pm.graph, pm.backbone) +
        mtp::trainable_count(pm.graph, pm.decoder);
    if (got_params != plan.predicted_params || got_flops != plan.predicted_flops ||
        store_params != static_cast<std::size_t>(plan.predicted_params)) {
      diag << "plan " << i << ": params " << got_params << "/" << plan.predicted_params
           << " flops " << got_flops << "/" << plan.predicted_flops << " stores "
           << store_params << "\n";
      return false;
    }

    // Zero the dropped channels' batchnorm scale and shift in the full model;
    // the two models must then compute the same function.
    mtp::ParamStore zb = backbone, zd = decoder;
    for (const auto& [conv_id, mask] : plan.keep) {
      const int ci = g.index_of(conv_id);
      const int bi = mtp::batchnorm_consumer_index(g, ci);
      const std::string& bn_id = g.layers[static_cast<std::size_t>(bi)].id;
      mtp::ParamStore& store =
          g.layers[static_cast<std::size_t>(ci)].partition == mtp::Partition::backbone
              ? zb
              : zd;
      for (std::size_t c = 0; c < mask.size(); ++c) {
        if (mask[c]) continue;
        store.at(bn_id, "gamma").v[c] = 0.0;
        store.at(bn_id, "beta").v[c] = 0.0;
      }
    }

    mtp::ParamStore pb = pm.backbone, pd = pm.decoder;
    mtp::ModelView full{&g, &zb, &zd};
    mtp::ModelView cut{&pm.graph, &pb, &pd};
    mtp::Workspace wf, wc;
    for (int k = 0; k < kSurgeryInputs; ++k) {
      const mtp::Tensor x = testutil::random_input(g, 1, rng);
      for (const std::string& sink :
           {mtp::classification_sink(g), mtp::segmentation_sink(g)}) {
        const mtp::Tensor& a = mtp::forward(full, x, sink, mtp::RunMode::eval, wf);
        const mtp::Tensor& b = mtp::forward(cut, x, sink, mtp::RunMode::eval, wc);
        if (!a.same_shape(b)) {
          diag << "plan " << i << ": sink " << sink << " shapes differ\n";
          return false;
        }
        for (std::size_t j = 0; j < a.size(); ++j) {
          const double rel = std::abs(a.v[j] - b.v[j]) /
                             std::max({std::abs(a.v[j]), std::abs(b.v[j]), 1e-9});
          worst_rel = std::max(worst_rel, rel);
        }
      }
    }
  }
  diag << "worst forward relative difference " << worst_rel << " over " << kSurgeryPlans
       << " plans x " << kSurgeryInputs << " inputs (tol " << kForwardRelTol << ")\n";
  return worst_rel <= kForwardRelTol;
}

// ---------------------------------------------------------------------------
// Criterion 6: two-stage fine-tuning beats segmentation-only fine-tuning
// ---------------------------------------------------------------------------
// From the same pruned checkpoints (50th percentile), the median mIoU after
// classification-then-segmentation fine-tuning must be at least the median
// after an equal segmentation-only budget, across 5 seeds.

bool criterion6(std::ostream& diag) {
  std::vector<double> two_stage, seg_only;
  for (std::uint64_t seed = 1; seed <= kTrendSeeds; ++seed) {
    const std::string dir = ensure_exp_run(seed);
    const mtp::ExperimentReport rep =
        mtp::ExperimentReport::load_csv(dir + "/report.csv");
    two_stage.push_back(rep.find("finetuned")->miou);

    mtp::MtpConfig cfg = experiment_config(seed);
    cfg.finetune.cls_epochs = 0;  // segmentation-only arm, same seg budget
    const mtp::NetworkGraph g = mtp::load_graph(dir + "/graph_pruned.json");
    const mtp::Checkpoint ck = mtp::load_checkpoint(dir + "/ckpt_pruned.bin");
    mtp::ParamStore backbone = ck.stores.at("backbone");
    mtp::ParamStore decoder = ck.stores.at("decoder");
    const mtp::SynthDatasets data = mtp::generate_datasets(seed, cfg);
    const mtp::FinetuneResult ft =
        mtp::finetune_two_stage(g, backbone, decoder, data, cfg, "finetune");
    seg_only.push_back(ft.after_seg.miou);
    diag << "seed " << seed << ": two-stage " << two_stage.back() << " vs seg-only "
         << seg_only.back() << " mIoU\n";
  }
  diag << "median two-stage " << median(two_stage) << " vs seg-only "
       << median(seg_only) << "\n";
  return median(two_stage) >= median(seg_only);
}

// ---------------------------------------------------------------------------
// Criterion 7: multi-task pruning beats single-task slimming
// ---------------------------------------------------------------------------
// Across 5 seeds with matched epoch budgets, prune fractions and fine-tuning,
// the median fine-tuned mIoU of the multi-task pipeline must be at least the
// slimming baseline's.

bool criterion7(std::ostream& diag) {
  std::vector<double> multi, slim;
  for (std::uint64_t seed = 1; seed <= kTrendSeeds; ++seed) {
    const std::string dir = ensure_exp_run(seed);
    const mtp::ExperimentReport rep =
        mtp::ExperimentReport::load_csv(dir + "/report.csv");
    multi.push_back(rep.find("finetuned")->miou);
    slim.push_back(rep.find("slimming")->miou);
    diag << "seed " << seed << ": multi-task " << multi.back() << " vs slimming "
         << slim.back() << " mIoU\n";
  }
  diag << "median multi-task " << median(multi) << " vs slimming " << median(slim)
       << "\n";
  return median(multi) >= median(slim);
}

// ---------------------------------------------------------------------------
// Criterion 8: independent thresholds beat unified, and backbone masks are
// invariant to decoder gamma rescaling
// ---------------------------------------------------------------------------

bool criterion8(std::ostream& diag) {
  std::vector<double> indep, unified;
  bool invariant = true;
  for (std::uint64_t seed = 1; seed <= kTrendSeeds; ++seed) {
    const std::string dir = ensure_exp_run(seed);
    const mtp::MtpConfig cfg = experiment_config(seed);
    const mtp::NetworkGraph g = mtp::build_desk_network(cfg);
    mtp::LagrangianState st = load_sparse_state(dir);
    const mtp::SynthDatasets data = mtp::generate_datasets(seed, cfg);

    // Both arms go through the identical path: plan from the sparse state,
    // surgery, the same two-stage fine-tune, fresh evaluation. The ablation
    // runs at an aggressive prune rate: at mild rates both policies cut only
    // channels the L1 term already turned off and the comparison reads noise;
    // the policies separate where the cut crosses into live channels and a
    // shared threshold starts emptying the smaller-magnitude partition.
    const auto arm = [&](mtp::ThresholdPolicy policy) {
      mtp::MtpConfig c = cfg;
      c.prune.policy = policy;
      c.prune.percentile = kAblationPercentile;
      const mtp::PruningPlan plan = mtp::plan_from_state(g, st, c);
      mtp::PrunedModel pm = mtp::apply_plan(g, st.w3, st.w2, plan);
      const mtp::FinetuneResult ft =
          mtp::finetune_two_stage(pm.graph, pm.backbone, pm.decoder, data, c, "finetune");
      return ft.after_seg.miou;
    };
    indep.push_back(arm(mtp::ThresholdPolicy::independent));
    unified.push_back(arm(mtp::ThresholdPolicy::unified));
    diag << "seed " << seed << ": independent " << indep.back() << " vs unified "
         << unified.back() << " mIoU\n";

    // Exact invariance: scaling every decoder gamma by 10 must not move a
    // single backbone mask bit under the independent policy.
    const mtp::PruningPlan before = mtp::plan_from_state(g, st, cfg);
    for (const auto& l : g.layers) {
      if (!l.prunable || l.partition != mtp::Partition::decoder) continue;
      const int bi = mtp::batchnorm_consumer_index(g, g.index_of(l.id));
      for (auto& x : st.w2.at(g.layers[static_cast<std::size_t>(bi)].id, "gamma").v)
        x *= 10.0;
    }
    const mtp::PruningPlan after = mtp::plan_from_state(g, st, cfg);
    for (const auto& l : g.layers) {
      if (!l.prunable || l.partition != mtp::Partition::backbone) continue;
      if (before.keep.at(l.id) != after.keep.at(l.id)) {
        invariant = false;
        diag << "seed " << seed << ": backbone mask of '" << l.id
             << "' moved under decoder rescaling\n";
      }
    }
  }
  diag << "median independent " << median(indep) << " vs unified " << median(unified)
       << "; backbone masks " << (invariant ? "invariant" : "NOT invariant") << "\n";
  return median(indep) >= median(unified) && invariant;
}

// ---------------------------------------------------------------------------
// Criterion 9: uniform baseline counts and cost ratios
// ---------------------------------------------------------------------------
// At keep fraction 0.5 on the desk network, every prunable layer keeps exactly
// ceil(0.5 * C) channels chosen by |gamma| (oracle-enumerated), and both cost
// ratios land strictly inside (0.3, 0.7).

bool criterion9(std::ostream& diag) {
  const mtp::MtpConfig cfg = experiment_config(1);
  const mtp::NetworkGraph g = mtp::build_desk_network(cfg);
  mtp::Rng rng(909);
  double lo_p = 1.0, hi_p = 0.0, lo_f = 1.0, hi_f = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    auto make_sv = [&](mtp::Partition part) {
      mtp::ScalingVector sv;
      sv.partition = part;
      for (const auto& l : g.layers) {
        if (!l.prunable || l.partition != part) continue;
        for (int c = 0; c < l.out_channels; ++c) {
          double v = rng.uniform(-1.0, 1.0);
          if (inst % 2) v = std::round(v * 4.0) / 4.0;
          sv.entries.push_back({l.id, c, v});
        }
      }
      return sv;
    };
    const mtp::ScalingVector gb = make_sv(mtp::Partition::backbone);
    const mtp::ScalingVector gd = make_sv(mtp::Partition::decoder);
    const mtp::PruningPlan plan = mtp::build_uniform_plan(g, gb, gd, kUniformKeep);

    // Enumeration oracle: per layer, keep the ceil(kf*C) largest |gamma|, ties
    // to the lower channel.
    long long total_expected = 0;
    for (const auto& l : g.layers) {
      if (!l.prunable) continue;
      std::vector<std::pair<double, int>> chans;
      for (const mtp::ScalingVector* sv : {&gb, &gd})
        for (const auto& e : sv->entries)
          if (e.layer_id == l.id) chans.push_back({std::abs(e.value), e.channel});
      std::sort(chans.begin(), chans.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      const int kcount = static_cast<int>(
          std::ceil(kUniformKeep * static_cast<double>(l.out_channels)));
      total_expected += kcount;
      std::vector<char> expect(static_cast<std::size_t>(l.out_channels), 0);
      for (int k = 0; k < kcount; ++k)
        expect[static_cast<std::size_t>(chans[static_cast<std::size_t>(k)].second)] = 1;
      if (plan.keep.at(l.id) != expect) {
        diag << "instance " << inst << ": layer '" << l.id
             << "' keeps the wrong channels\n";
        return false;
      }
    }
    if (plan.kept_channels() != total_expected) {
      diag << "instance " << inst << ": kept-channel total " << plan.kept_channels()
           << " != " << total_expected << "\n";
      return false;
    }
    lo_p = std::min(lo_p, plan.predicted_params_ratio);
    hi_p = std::max(hi_p, plan.predicted_params_ratio);
    lo_f = std::min(lo_f, plan.predicted_flops_ratio);
    hi_f = std::max(hi_f, plan.predicted_flops_ratio);
    if (!(plan.predicted_params_ratio > kRatioLo && plan.predicted_params_ratio < kRatioHi &&
          plan.predicted_flops_ratio > kRatioLo && plan.predicted_flops_ratio < kRatioHi)) {
      diag << "instance " << inst << ": ratios " << plan.predicted_params_ratio << " / "
           << plan.predicted_flops_ratio << " outside (" << kRatioLo << ", " << kRatioHi
           << ")\n";
      return false;
    }
  }
  diag << "params ratio in [" << lo_p << ", " << hi_p << "], flops ratio in [" << lo_f
       << ", " << hi_f << "] across 20 instances\n";
  return true;
}

// ---------------------------------------------------------------------------
// Criterion 10: end-to-end reproducibility
// ---------------------------------------------------------------------------
// Rerunning the seed-1 experiment must reproduce the pruning masks bit for bit
// and every quality/cost metric to 1e-6. Latency is wall-clock and excluded.

bool criterion10(std::ostream& diag) {
  const std::string dir1 = ensure_exp_run(1);
  const std::string dir2 = std::string(kCacheRoot) + "/rerun_seed1";
  fs::remove_all(dir2);
  mtp::MtpConfig cfg = experiment_config(1);
  cfg.run.out_dir = dir2;
  mtp::ExperimentOptions opts;
  opts.with_slimming = true;
  opts.with_uniform = false;
  opts.write_plots = false;
  const mtp::ExperimentResult res = mtp::run_experiment(cfg, opts);
  if (!res.ok()) {
    diag << "rerun failed at stage '" << res.failed_stage << "': " << res.error << "\n";
    return false;
  }

  bool ok = true;
  for (const char* f : {"plan.txt", "plan_slimming.txt"}) {
    if (read_file(dir1 + "/" + f) != read_file(dir2 + "/" + f)) {
      diag << f << " differs between runs\n";
      ok = false;
    }
  }

  const mtp::ExperimentReport a = mtp::ExperimentReport::load_csv(dir1 + "/report.csv");
  const mtp::ExperimentReport b = mtp::ExperimentReport::load_csv(dir2 + "/report.csv");
  if (a.rows.size() != b.rows.size()) {
    diag << "row counts differ: " << a.rows.size() << " vs " << b.rows.size() << "\n";
    return false;
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    const auto& ra = a.rows[i];
    const auto& rb = b.rows[i];
    if (ra.stage != rb.stage || ra.params != rb.params || ra.flops != rb.flops ||
        ra.seed != rb.seed || ra.config_hash != rb.config_hash) {
      diag << "row " << i << " (" << ra.stage << ") structural mismatch\n";
      ok = false;
    }
    worst = std::max({worst, std::abs(ra.top1 - rb.top1), std::abs(ra.miou - rb.miou)});
  }
  diag << "worst metric difference " << worst << " (tol " << kMetricAbsTol
       << "; latency excluded)\n";
  return ok && worst <= kMetricAbsTol;
}

// ---------------------------------------------------------------------------

bool run_criterion(int n, std::ostream& diag) {
  switch (n) {
    case 1: return criterion1(diag);
    case 2: return criterion2(diag);
    case 3: return criterion3(diag);
    case 4: return criterion4(diag);
    case 5: return criterion5(diag);
    case 6: return criterion6(diag);
    case 7: return criterion7(diag);
    case 8: return criterion8(diag);
    case 9: return criterion9(diag);
    case 10: return criterion10(diag);
    default: throw std::invalid_argument("criterion number must be in [1, 10]");
  }
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> which;
  if (argc > 2) {
    std::cerr << "usage: " << argv[0] << " [criterion 1-10]\n";
    return 2;
  }
  if (argc == 2) {
    try {
      which.push_back(std::stoi(argv[1]));
    } catch (const std::exception&) {
      std::cerr << "usage: " << argv[0] << " [criterion 1-10]\n";
      return 2;
    }
  } else {
    for (int n = 1; n <= 10; ++n) which.push_back(n);
  }

  bool all_ok = true;
  for (int n : which) {
    std::ostringstream diag;
    bool ok = false;
    const auto start = std::chrono::steady_clock::now();
    try {
      ok = run_criterion(n, diag);
    } catch (const std::exception& e) {
      diag << "exception: " << e.what() << "\n";
      ok = false;
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << "criterion " << n << ": " << (ok ? "PASS" : "FAIL") << std::endl;
    std::cerr << "criterion " << n << " [" << secs << "s]\n" << diag.str();
    all_ok = all_ok && ok;
  }
  return all_ok ? 0 : 1;
}
