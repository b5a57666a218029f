#pragma once

// Percentile thresholding and channel surgery.
//
// Selection is count-based: sorting all candidate channels of a partition by
// (|gamma|, layer order, channel index) ascending, the first
// floor(p/100 * n) are pruned. The reported threshold tau is the |gamma| of
// the last pruned channel (0 when the floor truncates to zero), so a channel
// tied with tau may survive if it ranks later in the total order — the count
// is exact. The independent policy computes one cut per partition; the
// unified policy ranks backbone and decoder channels together and applies a
// single cut, which lets a gamma-scale mismatch between partitions skew the
// split. Every layer keeps at least its single largest-|gamma| channel.
//
// apply_plan performs the surgery: keep-masks propagate through
// channel-preserving layers, concat masks concatenate in edge order, both
// summands of an elementwise add must agree, conv weights lose the
// corresponding output rows and input columns, and batchnorms lose the
// matching channels of all four per-channel tensors.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtp/config.hpp"
#include "mtp/graph.hpp"
#include "mtp/params.hpp"
#include "mtp/profiler.hpp"
#include "mtp/scaling.hpp"

namespace mtp {

struct PruningPlan {
  std::map<std::string, std::vector<char>> keep;  // prunable conv -> out-channel mask
  ThresholdPolicy policy = ThresholdPolicy::independent;
  double percentile = 0.0;
  double tau_backbone = 0.0;
  double tau_decoder = 0.0;
  long long predicted_params = 0;  // exact counts of the pruned graph
  long long predicted_flops = 0;
  double predicted_params_ratio = 0.0;  // pruned / original
  double predicted_flops_ratio = 0.0;

  long long kept_channels() const {
    long long n = 0;
    for (const auto& [id, mask] : keep)
      for (char c : mask) n += c ? 1 : 0;
    return n;
  }
};

namespace detail {

struct Candidate {
  double mag = 0.0;
  int layer_index = 0;
  int channel = 0;
  Partition part = Partition::backbone;
  std::string layer_id;
};

inline bool candidate_less(const Candidate& a, const Candidate& b) {
  if (a.mag != b.mag) return a.mag < b.mag;
  if (a.layer_index != b.layer_index) return a.layer_index < b.layer_index;
  return a.channel < b.channel;
}

// Checks a scaling vector against the graph and flattens it into candidates.
inline void collect_candidates(const NetworkGraph& g, const ScalingVector& sv,
                               std::vector<Candidate>& out) {
  std::map<std::string, int> seen;
  for (const auto& e : sv.entries) {
    const int idx = g.index_of(e.layer_id);
    if (idx < 0)
      throw std::invalid_argument("scaling vector names unknown layer '" + e.layer_id + "'");
    const LayerSpec& l = g.layers[static_cast<std::size_t>(idx)];
    if (!l.prunable || l.partition != sv.partition)
      throw std::invalid_argument("scaling vector entry for '" + e.layer_id +
                                  "' does not match a prunable layer of its partition");
    if (e.channel < 0 || e.channel >= l.out_channels)
      throw std::invalid_argument("scaling vector channel out of range for '" +
                                  e.layer_id + "'");
    out.push_back({std::abs(e.value), idx, e.channel, sv.partition, e.layer_id});
    seen[e.layer_id]++;
  }
  for (const auto& [id, n] : seen)
    if (n != g.layer(id).out_channels)
      throw std::invalid_argument("scaling vector covers only part of layer '" + id + "'");
}

struct Selection {
  std::vector<Candidate> pruned;  // exactly the cut count, before the >=1 floor
  double tau_backbone = 0.0;
  double tau_decoder = 0.0;
};

inline std::size_t percentile_cut(double percentile, std::size_t n) {
  return static_cast<std::size_t>(std::floor(percentile / 100.0 * static_cast<double>(n)));
}

inline Selection select_channels(const NetworkGraph& g, const ScalingVector& gb,
                                 const ScalingVector& gd, double percentile,
                                 ThresholdPolicy policy) {
  if (!(percentile > 0.0 && percentile < 100.0))
    throw std::invalid_argument("percentile must be in (0, 100)");
  if (gb.partition != Partition::backbone || gd.partition != Partition::decoder)
    throw std::invalid_argument("scaling vectors passed in the wrong order");

  Selection sel;
  if (policy == ThresholdPolicy::independent) {
    for (const ScalingVector* sv : {&gb, &gd}) {
      std::vector<Candidate> cand;
      collect_candidates(g, *sv, cand);
      std::sort(cand.begin(), cand.end(), candidate_less);
      const std::size_t cut = percentile_cut(percentile, cand.size());
      double tau = 0.0;
      for (std::size_t i = 0; i < cut; ++i) {
        sel.pruned.push_back(cand[i]);
        tau = cand[i].mag;
      }
      (sv->partition == Partition::backbone ? sel.tau_backbone : sel.tau_decoder) = tau;
    }
  } else {
    std::vector<Candidate> cand;
    collect_candidates(g, gb, cand);
    collect_candidates(g, gd, cand);
    std::sort(cand.begin(), cand.end(), candidate_less);
    const std::size_t cut = percentile_cut(percentile, cand.size());
    double tau = 0.0;
    for (std::size_t i = 0; i < cut; ++i) {
      sel.pruned.push_back(cand[i]);
      tau = cand[i].mag;
    }
    sel.tau_backbone = sel.tau_decoder = tau;  // one shared threshold
  }
  return sel;
}

}  // namespace detail

// The tau values the given percentile induces, per partition.
inline std::pair<double, double> compute_thresholds(const NetworkGraph& g,
                                                    const ScalingVector& gamma_backbone,
                                                    const ScalingVector& gamma_decoder,
                                                    double percentile,
                                                    ThresholdPolicy policy) {
  const auto sel =
      detail::select_channels(g, gamma_backbone, gamma_decoder, percentile, policy);
  return {sel.tau_backbone, sel.tau_decoder};
}

// Structure-only surgery: the pruned graph a plan would produce. Shared by
// build_plan (for predicted costs) and apply_plan (for the real thing).
inline NetworkGraph pruned_graph_structure(
    const NetworkGraph& g, const PruningPlan& plan,
    std::map<std::string, std::vector<char>>* out_masks = nullptr) {
  // Check the plan covers exactly the prunable layers.
  for (const auto& [id, mask] : plan.keep) {
    const int idx = g.index_of(id);
    if (idx < 0) throw std::invalid_argument("plan masks unknown layer '" + id + "'");
    const LayerSpec& l = g.layers[static_cast<std::size_t>(idx)];
    if (!l.prunable)
      throw std::invalid_argument("plan would eliminate channels of non-prunable layer '" +
                                  id + "'");
    if (static_cast<int>(mask.size()) != l.out_channels)
      throw std::invalid_argument("plan mask length mismatch for layer '" + id + "'");
    if (std::count(mask.begin(), mask.end(), char(1)) == 0)
      throw std::invalid_argument("plan removes every channel of layer '" + id + "'");
  }
  for (const auto& l : g.layers)
    if (l.prunable && !plan.keep.count(l.id))
      throw std::invalid_argument("plan is missing a mask for prunable layer '" + l.id + "'");

  // Propagate out-channel keep masks through the graph.
  std::map<std::string, std::vector<char>> masks;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& l = g.layers[i];
    const auto prods = g.producers(static_cast<int>(i));
    if (is_conv_like(l.kind)) {
      masks[l.id] = l.prunable ? plan.keep.at(l.id)
                               : std::vector<char>(static_cast<std::size_t>(l.out_channels), 1);
    } else if (l.kind == LayerKind::concat) {
      std::vector<char> m;
      for (int p : prods) {
        const auto& pm = masks.at(g.layers[static_cast<std::size_t>(p)].id);
        m.insert(m.end(), pm.begin(), pm.end());
      }
      masks[l.id] = std::move(m);
    } else if (l.kind == LayerKind::elementwise_add) {
      const auto& m0 = masks.at(g.layers[static_cast<std::size_t>(prods[0])].id);
      for (int p : prods)
        if (masks.at(g.layers[static_cast<std::size_t>(p)].id) != m0)
          throw std::invalid_argument("plan desynchronizes the summands of add '" + l.id +
                                      "'");
      masks[l.id] = m0;
    } else {  // passthrough; a passthrough root keeps the raw input channels
      masks[l.id] = prods.empty()
                        ? std::vector<char>(static_cast<std::size_t>(l.in_channels), 1)
                        : masks.at(g.layers[static_cast<std::size_t>(prods[0])].id);
    }
  }

  auto popcount = [](const std::vector<char>& m) {
    return static_cast<int>(std::count(m.begin(), m.end(), char(1)));
  };

  NetworkGraph out = g;
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    LayerSpec& l = out.layers[i];
    const auto prods = g.producers(static_cast<int>(i));
    l.out_channels = popcount(masks.at(l.id));
    if (!prods.empty()) {
      int in = 0;
      if (l.kind == LayerKind::concat) {
        for (int p : prods) in += popcount(masks.at(g.layers[static_cast<std::size_t>(p)].id));
      } else {
        in = popcount(masks.at(g.layers[static_cast<std::size_t>(prods[0])].id));
      }
      l.in_channels = in;
    }
  }

  const auto violations = validate(out);
  if (!violations.empty()) {
    std::string msg = "surgery produced an invalid graph:";
    for (const auto& v : violations) msg += "\n  [" + v.rule + "] " + v.detail;
    throw std::logic_error(msg);
  }
  if (out_masks) *out_masks = std::move(masks);
  return out;
}

inline PruningPlan build_plan(const NetworkGraph& g, const ScalingVector& gamma_backbone,
                              const ScalingVector& gamma_decoder, double percentile,
                              ThresholdPolicy policy) {
  const auto sel =
      detail::select_channels(g, gamma_backbone, gamma_decoder, percentile, policy);

  PruningPlan plan;
  plan.policy = policy;
  plan.percentile = percentile;
  plan.tau_backbone = sel.tau_backbone;
  plan.tau_decoder = sel.tau_decoder;

  for (const auto& l : g.layers)
    if (l.prunable)
      plan.keep[l.id] = std::vector<char>(static_cast<std::size_t>(l.out_channels), 1);
  for (const auto& c : sel.pruned)
    plan.keep.at(c.layer_id)[static_cast<std::size_t>(c.channel)] = 0;

  // Never empty a layer: resurrect its largest-|gamma| channel if needed.
  auto gamma_of = [&](const std::string& id, int ch) {
    for (const ScalingVector* sv : {&gamma_backbone, &gamma_decoder})
      for (const auto& e : sv->entries)
        if (e.layer_id == id && e.channel == ch) return std::abs(e.value);
    throw std::logic_error("missing scaling entry for " + id);
  };
  for (auto& [id, mask] : plan.keep) {
    if (std::count(mask.begin(), mask.end(), char(1)) > 0) continue;
    int best = 0;
    double best_mag = -1.0;
    for (int ch = 0; ch < static_cast<int>(mask.size()); ++ch) {
      const double mag = gamma_of(id, ch);
      if (mag > best_mag) {  // ties keep the lowest channel index
        best_mag = mag;
        best = ch;
      }
    }
    mask[static_cast<std::size_t>(best)] = 1;
  }

  const NetworkGraph pruned = pruned_graph_structure(g, plan);
  plan.predicted_params = count_params(pruned);
  plan.predicted_flops = count_flops(pruned, g.input_shape);
  const long long p0 = count_params(g);
  const long long f0 = count_flops(g, g.input_shape);
  plan.predicted_params_ratio =
      p0 > 0 ? static_cast<double>(plan.predicted_params) / static_cast<double>(p0) : 0.0;
  plan.predicted_flops_ratio =
      f0 > 0 ? static_cast<double>(plan.predicted_flops) / static_cast<double>(f0) : 0.0;
  return plan;
}

// Uniform baseline: every prunable layer keeps ceil(keep_fraction * C)
// channels, chosen by largest |gamma| (ties keep the lower channel index).
inline PruningPlan build_uniform_plan(const NetworkGraph& g,
                                      const ScalingVector& gamma_backbone,
                                      const ScalingVector& gamma_decoder,
                                      double keep_fraction) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
    throw std::invalid_argument("keep_fraction must be in (0, 1]");
  std::vector<detail::Candidate> cand;
  detail::collect_candidates(g, gamma_backbone, cand);
  detail::collect_candidates(g, gamma_decoder, cand);

  PruningPlan plan;
  plan.policy = ThresholdPolicy::independent;  // informational; no tau applies
  plan.percentile = (1.0 - keep_fraction) * 100.0;

  std::map<std::string, std::vector<detail::Candidate>> by_layer;
  for (const auto& c : cand) by_layer[c.layer_id].push_back(c);
  for (const auto& l : g.layers) {
    if (!l.prunable) continue;
    auto& chans = by_layer.at(l.id);
    std::sort(chans.begin(), chans.end(),
              [](const detail::Candidate& a, const detail::Candidate& b) {
                if (a.mag != b.mag) return a.mag > b.mag;
                return a.channel < b.channel;
              });
    const int kcount = static_cast<int>(
        std::ceil(keep_fraction * static_cast<double>(l.out_channels)));
    std::vector<char> mask(static_cast<std::size_t>(l.out_channels), 0);
    for (int i = 0; i < kcount && i < static_cast<int>(chans.size()); ++i)
      mask[static_cast<std::size_t>(chans[static_cast<std::size_t>(i)].channel)] = 1;
    plan.keep[l.id] = std::move(mask);
  }

  const NetworkGraph pruned = pruned_graph_structure(g, plan);
  plan.predicted_params = count_params(pruned);
  plan.predicted_flops = count_flops(pruned, g.input_shape);
  const long long p0 = count_params(g);
  const long long f0 = count_flops(g, g.input_shape);
  plan.predicted_params_ratio =
      p0 > 0 ? static_cast<double>(plan.predicted_params) / static_cast<double>(p0) : 0.0;
  plan.predicted_flops_ratio =
      f0 > 0 ? static_cast<double>(plan.predicted_flops) / static_cast<double>(f0) : 0.0;
  return plan;
}

struct PrunedModel {
  NetworkGraph graph;
  ParamStore backbone;
  ParamStore decoder;
};

inline PrunedModel apply_plan(const NetworkGraph& g, const ParamStore& backbone,
                              const ParamStore& decoder, const PruningPlan& plan) {
  std::map<std::string, std::vector<char>> masks;
  PrunedModel out;
  out.graph = pruned_graph_structure(g, plan, &masks);

  auto kept_indices = [](const std::vector<char>& m) {
    std::vector<int> idx;
    for (int i = 0; i < static_cast<int>(m.size()); ++i)
      if (m[static_cast<std::size_t>(i)]) idx.push_back(i);
    return idx;
  };

  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& l = g.layers[i];
    const ParamStore& src = (l.partition == Partition::backbone) ? backbone : decoder;
    ParamStore& dst = (l.partition == Partition::backbone) ? out.backbone : out.decoder;
    if (!src.has(l.id)) continue;
    const auto prods = g.producers(static_cast<int>(i));

    if (is_conv_like(l.kind)) {
      const std::vector<int> rows = kept_indices(masks.at(l.id));
      // Input columns follow the producer's propagated mask; for a concat
      // producer that mask is already the branch masks concatenated in edge
      // order. Roots read the raw input, which is never pruned.
      const std::vector<char> in_mask =
          prods.empty() ? std::vector<char>(static_cast<std::size_t>(l.in_channels), 1)
                        : masks.at(g.layers[static_cast<std::size_t>(prods[0])].id);
      const std::vector<int> cols = kept_indices(in_mask);

      const Tensor& w = src.at(l.id, "weight");
      const int K = w.dim(2);
      Tensor nw({static_cast<int>(rows.size()), static_cast<int>(cols.size()), K, K});
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < cols.size(); ++c) {
          const double* srcp =
              w.data() +
              (static_cast<std::size_t>(rows[r]) * w.dim(1) + static_cast<std::size_t>(cols[c])) *
                  K * K;
          double* dstp = nw.data() + (r * cols.size() + c) * K * K;
          std::copy_n(srcp, static_cast<std::size_t>(K) * K, dstp);
        }
      dst.layers[l.id]["weight"] = std::move(nw);
      if (l.bias) {
        const Tensor& b = src.at(l.id, "bias");
        Tensor nb({static_cast<int>(rows.size())});
        for (std::size_t r = 0; r < rows.size(); ++r)
          nb.v[r] = b.v[static_cast<std::size_t>(rows[r])];
        dst.layers[l.id]["bias"] = std::move(nb);
      }
    } else if (l.kind == LayerKind::batchnorm) {
      const std::vector<int> chans = kept_indices(masks.at(l.id));
      for (const char* name : {"gamma", "beta", "running_mean", "running_var"}) {
        const Tensor& t = src.at(l.id, name);
        Tensor nt({static_cast<int>(chans.size())});
        for (std::size_t c = 0; c < chans.size(); ++c)
          nt.v[c] = t.v[static_cast<std::size_t>(chans[c])];
        dst.layers[l.id][name] = std::move(nt);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plan text format: versioned, line-oriented and diffable. Masks are
// bitstrings ('1' = keep) listed in alphabetical layer order.

inline std::string plan_to_text(const PruningPlan& plan) {
  std::ostringstream o;
  char buf[64];
  auto num = [&](double x) {
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return std::string(buf);
  };
  o << "mtp-plan v1\n";
  o << "policy " << to_string(plan.policy) << "\n";
  o << "percentile " << num(plan.percentile) << "\n";
  o << "tau_backbone " << num(plan.tau_backbone) << "\n";
  o << "tau_decoder " << num(plan.tau_decoder) << "\n";
  o << "predicted_params " << plan.predicted_params << "\n";
  o << "predicted_flops " << plan.predicted_flops << "\n";
  o << "predicted_params_ratio " << num(plan.predicted_params_ratio) << "\n";
  o << "predicted_flops_ratio " << num(plan.predicted_flops_ratio) << "\n";
  for (const auto& [id, mask] : plan.keep) {
    o << "mask " << id << " ";
    for (char c : mask) o << (c ? '1' : '0');
    o << "\n";
  }
  return o.str();
}

inline PruningPlan plan_from_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "mtp-plan v1")
    throw std::runtime_error("pruning plan: missing or unsupported header");
  PruningPlan plan;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "policy") {
      std::string v;
      ls >> v;
      plan.policy = threshold_policy_from_string(v);
    } else if (key == "percentile") {
      ls >> plan.percentile;
    } else if (key == "tau_backbone") {
      ls >> plan.tau_backbone;
    } else if (key == "tau_decoder") {
      ls >> plan.tau_decoder;
    } else if (key == "predicted_params") {
      ls >> plan.predicted_params;
    } else if (key == "predicted_flops") {
      ls >> plan.predicted_flops;
    } else if (key == "predicted_params_ratio") {
      ls >> plan.predicted_params_ratio;
    } else if (key == "predicted_flops_ratio") {
      ls >> plan.predicted_flops_ratio;
    } else if (key == "mask") {
      std::string id, bits;
      ls >> id >> bits;
      std::vector<char> mask;
      for (char c : bits) {
        if (c != '0' && c != '1')
          throw std::runtime_error("pruning plan: bad mask bit for layer '" + id + "'");
        mask.push_back(c == '1' ? 1 : 0);
      }
      if (id.empty() || mask.empty())
        throw std::runtime_error("pruning plan: malformed mask line");
      plan.keep[id] = std::move(mask);
    } else {
      throw std::runtime_error("pruning plan: unknown field '" + key + "'");
    }
    if (ls.fail())
      throw std::runtime_error("pruning plan: malformed value in line: " + line);
  }
  return plan;
}

inline void save_plan(const std::string& path, const PruningPlan& plan) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write plan file: " + path);
  out << plan_to_text(plan);
}

inline PruningPlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open plan file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return plan_from_text(ss.str());
}

}  // namespace mtp
