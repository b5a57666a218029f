#pragma once

// Experiment configuration. One INI-style document with sections drives every
// stage (data synthesis, pretraining, the alternating sparse phase, pruning,
// fine-tuning). The canonical serialization defines the config hash that is
// stamped into checkpoints and reports so that artifacts from mismatched
// configs cannot be silently combined.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtp/rng.hpp"

namespace mtp {

enum class ThresholdPolicy { independent, unified };

inline std::string to_string(ThresholdPolicy p) {
  return p == ThresholdPolicy::independent ? "independent" : "unified";
}

inline ThresholdPolicy threshold_policy_from_string(const std::string& s) {
  if (s == "independent") return ThresholdPolicy::independent;
  if (s == "unified") return ThresholdPolicy::unified;
  throw std::invalid_argument("unknown threshold policy '" + s +
                              "' (expected 'independent' or 'unified')");
}

struct MtpConfig {
  struct Model {
    int input_channels = 3;
    int image_size = 16;   // square inputs
    int width = 8;         // base channel count for every internal conv
    int blocks = 2;        // residual blocks in the backbone
    int num_classes = 10;  // classification classes (max 10 synthetic shapes)
    int seg_classes = 4;   // background + up to 3 shape classes
    double bn_gamma_init = 0.1;
    // When enabled the builder marks the segmentation head prunable and puts a
    // batchnorm behind it so the head has scaling factors; off by default since
    // pruning head channels changes the number of predicted classes.
    bool seg_head_prunable = false;
  } model;

  struct Data {
    int cls_train = 320;
    int cls_val = 160;
    int seg_train = 160;
    int seg_val = 96;
    double noise = 0.05;
  } data;

  struct Pretrain {
    int epochs = 5;
    double lr = 0.1;
  } pretrain;

  struct Dense {  // joint dense segmentation training of the unpruned network
    int epochs = 10;
    double lr = 0.05;
  } dense;

  struct Mtp {  // alternating sparse phase
    double lambda = 1.0;   // trade-off between classification and segmentation
    double alpha1 = 0.001; // L1 strength on backbone scaling factors
    double alpha2 = 0.001; // L1 strength on decoder scaling factors
    double mu0 = 0.25;     // initial quadratic coupling weight
    double rho = 1.6;      // multiplicative mu schedule, must be > 1
    double mu_max = 100.0; // cap so the quadratic term cannot blow up
    int rounds = 5;
    int epochs_w1 = 2;
    int epochs_w2 = 2;
    int epochs_w3 = 2;
    double lr_w1 = 0.2;
    double lr_w2 = 0.2;
    double lr_w3 = 0.2;
    bool early_stop = false;        // optional: stop when the residual stalls
    double early_stop_tol = 1e-3;   // relative residual threshold
    // Algorithm step 9 reads backbone scaling factors from w1; flip this to
    // average the w1 and w3 copies instead.
    bool gamma_average_w1_w3 = false;
  } mtp;

  struct Prune {
    double percentile = 50.0;  // fraction of prunable channels removed, in (0, 100)
    ThresholdPolicy policy = ThresholdPolicy::independent;
  } prune;

  struct Finetune {
    int cls_epochs = 3;   // stage one: classification data, backbone only
    int seg_epochs = 10;  // stage two: segmentation data, whole network
    double lr_cls = 0.02;
    double lr_seg = 0.02;
  } finetune;

  struct Run {
    std::uint64_t seed = 1;
    int batch_size = 8;
    int latency_runs = 20;
    std::string out_dir;  // excluded from the config hash
  } run;

  void validate() const {
    std::vector<std::string> bad;
    auto req = [&](bool ok, const std::string& msg) {
      if (!ok) bad.push_back(msg);
    };
    req(model.input_channels > 0, "model.input_channels must be > 0");
    req(model.image_size >= 4 && model.image_size % 2 == 0,
        "model.image_size must be even and >= 4");
    req(model.width > 0, "model.width must be > 0");
    req(model.blocks > 0, "model.blocks must be > 0");
    req(model.num_classes >= 2 && model.num_classes <= 10,
        "model.num_classes must be in [2, 10]");
    req(model.seg_classes >= 2 && model.seg_classes <= 4,
        "model.seg_classes must be in [2, 4]");
    req(model.bn_gamma_init > 0, "model.bn_gamma_init must be > 0");
    req(data.cls_train > 0 && data.cls_val > 0 && data.seg_train > 0 && data.seg_val > 0,
        "data sizes must be > 0");
    req(data.noise >= 0, "data.noise must be >= 0");
    req(pretrain.epochs >= 0 && dense.epochs >= 0, "epoch counts must be >= 0");
    req(pretrain.lr > 0 && dense.lr > 0, "learning rates must be > 0");
    req(mtp.lambda >= 0, "mtp.lambda must be >= 0");
    req(mtp.alpha1 >= 0 && mtp.alpha2 >= 0, "mtp.alpha1/alpha2 must be >= 0");
    req(mtp.mu0 > 0, "mtp.mu0 must be > 0");
    req(mtp.rho > 1.0, "mtp.rho must be > 1");
    req(mtp.mu_max >= mtp.mu0, "mtp.mu_max must be >= mtp.mu0");
    req(mtp.rounds >= 0, "mtp.rounds must be >= 0");
    req(mtp.epochs_w1 >= 0 && mtp.epochs_w2 >= 0 && mtp.epochs_w3 >= 0,
        "mtp.epochs_w* must be >= 0");
    req(mtp.lr_w1 > 0 && mtp.lr_w2 > 0 && mtp.lr_w3 > 0, "mtp.lr_w* must be > 0");
    req(mtp.early_stop_tol > 0, "mtp.early_stop_tol must be > 0");
    req(prune.percentile > 0 && prune.percentile < 100,
        "prune.percentile must be in (0, 100)");
    req(finetune.cls_epochs >= 0 && finetune.seg_epochs >= 0,
        "finetune epochs must be >= 0");
    req(finetune.lr_cls > 0 && finetune.lr_seg > 0, "finetune lrs must be > 0");
    req(run.batch_size > 0, "run.batch_size must be > 0");
    req(run.latency_runs >= 5, "run.latency_runs must be >= 5");
    if (!bad.empty()) {
      std::string msg = "invalid config:";
      for (const auto& b : bad) msg += "\n  - " + b;
      throw std::invalid_argument(msg);
    }
  }

  std::string to_ini() const { return ini_body(true); }

  // out_dir is a filesystem detail, not an experiment parameter; leaving it out
  // keeps the hash identical across replicas that only differ in where they
  // write, which is exactly what the determinism checks compare.
  std::uint64_t hash() const { return fnv1a64(ini_body(false)); }

  static std::string hash_to_hex(std::uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
      s[static_cast<std::size_t>(i)] = digits[h & 0xf];
      h >>= 4;
    }
    return s;
  }

  std::string hash_hex() const { return hash_to_hex(hash()); }

  static MtpConfig from_ini_text(const std::string& text);

  static MtpConfig from_ini_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_ini_text(ss.str());
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write config file: " + path);
    out << to_ini();
  }

 private:
  static std::string fmt(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
  }

  std::string ini_body(bool with_out_dir) const {
    std::ostringstream o;
    o << "[model]\n"
      << "input_channels = " << model.input_channels << "\n"
      << "image_size = " << model.image_size << "\n"
      << "width = " << model.width << "\n"
      << "blocks = " << model.blocks << "\n"
      << "num_classes = " << model.num_classes << "\n"
      << "seg_classes = " << model.seg_classes << "\n"
      << "bn_gamma_init = " << fmt(model.bn_gamma_init) << "\n"
      << "seg_head_prunable = " << (model.seg_head_prunable ? "true" : "false") << "\n"
      << "\n[data]\n"
      << "cls_train = " << data.cls_train << "\n"
      << "cls_val = " << data.cls_val << "\n"
      << "seg_train = " << data.seg_train << "\n"
      << "seg_val = " << data.seg_val << "\n"
      << "noise = " << fmt(data.noise) << "\n"
      << "\n[pretrain]\n"
      << "epochs = " << pretrain.epochs << "\n"
      << "lr = " << fmt(pretrain.lr) << "\n"
      << "\n[dense]\n"
      << "epochs = " << dense.epochs << "\n"
      << "lr = " << fmt(dense.lr) << "\n"
      << "\n[mtp]\n"
      << "lambda = " << fmt(mtp.lambda) << "\n"
      << "alpha1 = " << fmt(mtp.alpha1) << "\n"
      << "alpha2 = " << fmt(mtp.alpha2) << "\n"
      << "mu0 = " << fmt(mtp.mu0) << "\n"
      << "rho = " << fmt(mtp.rho) << "\n"
      << "mu_max = " << fmt(mtp.mu_max) << "\n"
      << "rounds = " << mtp.rounds << "\n"
      << "epochs_w1 = " << mtp.epochs_w1 << "\n"
      << "epochs_w2 = " << mtp.epochs_w2 << "\n"
      << "epochs_w3 = " << mtp.epochs_w3 << "\n"
      << "lr_w1 = " << fmt(mtp.lr_w1) << "\n"
      << "lr_w2 = " << fmt(mtp.lr_w2) << "\n"
      << "lr_w3 = " << fmt(mtp.lr_w3) << "\n"
      << "early_stop = " << (mtp.early_stop ? "true" : "false") << "\n"
      << "early_stop_tol = " << fmt(mtp.early_stop_tol) << "\n"
      << "gamma_average_w1_w3 = " << (mtp.gamma_average_w1_w3 ? "true" : "false") << "\n"
      << "\n[prune]\n"
      << "percentile = " << fmt(prune.percentile) << "\n"
      << "policy = " << to_string(prune.policy) << "\n"
      << "\n[finetune]\n"
      << "cls_epochs = " << finetune.cls_epochs << "\n"
      << "seg_epochs = " << finetune.seg_epochs << "\n"
      << "lr_cls = " << fmt(finetune.lr_cls) << "\n"
      << "lr_seg = " << fmt(finetune.lr_seg) << "\n"
      << "\n[run]\n"
      << "seed = " << run.seed << "\n"
      << "batch_size = " << run.batch_size << "\n"
      << "latency_runs = " << run.latency_runs << "\n";
    if (with_out_dir && !run.out_dir.empty()) o << "out_dir = " << run.out_dir << "\n";
    return o.str();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline int parse_int(const std::string& where, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return static_cast<int>(x);
  } catch (...) {
    throw std::invalid_argument("config: bad integer for " + where + ": '" + v + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& where, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return x;
  } catch (...) {
    throw std::invalid_argument("config: bad unsigned integer for " + where + ": '" + v + "'");
  }
}

inline double parse_double(const std::string& where, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return x;
  } catch (...) {
    throw std::invalid_argument("config: bad number for " + where + ": '" + v + "'");
  }
}

inline bool parse_bool(const std::string& where, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config: bad boolean for " + where + ": '" + v + "'");
}

}  // namespace detail

inline MtpConfig MtpConfig::from_ini_text(const std::string& text) {
  MtpConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;

  // Dispatch table keyed by "section.key"; unknown keys are rejected so typos
  // in experiment files fail loudly instead of silently using defaults.
  std::map<std::string, std::function<void(const std::string&, const std::string&)>> set = {
      {"model.input_channels", [&](const std::string& w, const std::string& v) { cfg.model.input_channels = detail::parse_int(w, v); }},
      {"model.image_size", [&](const std::string& w, const std::string& v) { cfg.model.image_size = detail::parse_int(w, v); }},
      {"model.width", [&](const std::string& w, const std::string& v) { cfg.model.width = detail::parse_int(w, v); }},
      {"model.blocks", [&](const std::string& w, const std::string& v) { cfg.model.blocks = detail::parse_int(w, v); }},
      {"model.num_classes", [&](const std::string& w, const std::string& v) { cfg.model.num_classes = detail::parse_int(w, v); }},
      {"model.seg_classes", [&](const std::string& w, const std::string& v) { cfg.model.seg_classes = detail::parse_int(w, v); }},
      {"model.bn_gamma_init", [&](const std::string& w, const std::string& v) { cfg.model.bn_gamma_init = detail::parse_double(w, v); }},
      {"model.seg_head_prunable", [&](const std::string& w, const std::string& v) { cfg.model.seg_head_prunable = detail::parse_bool(w, v); }},
      {"data.cls_train", [&](const std::string& w, const std::string& v) { cfg.data.cls_train = detail::parse_int(w, v); }},
      {"data.cls_val", [&](const std::string& w, const std::string& v) { cfg.data.cls_val = detail::parse_int(w, v); }},
      {"data.seg_train", [&](const std::string& w, const std::string& v) { cfg.data.seg_train = detail::parse_int(w, v); }},
      {"data.seg_val", [&](const std::string& w, const std::string& v) { cfg.data.seg_val = detail::parse_int(w, v); }},
      {"data.noise", [&](const std::string& w, const std::string& v) { cfg.data.noise = detail::parse_double(w, v); }},
      {"pretrain.epochs", [&](const std::string& w, const std::string& v) { cfg.pretrain.epochs = detail::parse_int(w, v); }},
      {"pretrain.lr", [&](const std::string& w, const std::string& v) { cfg.pretrain.lr = detail::parse_double(w, v); }},
      {"dense.epochs", [&](const std::string& w, const std::string& v) { cfg.dense.epochs = detail::parse_int(w, v); }},
      {"dense.lr", [&](const std::string& w, const std::string& v) { cfg.dense.lr = detail::parse_double(w, v); }},
      {"mtp.lambda", [&](const std::string& w, const std::string& v) { cfg.mtp.lambda = detail::parse_double(w, v); }},
      {"mtp.alpha1", [&](const std::string& w, const std::string& v) { cfg.mtp.alpha1 = detail::parse_double(w, v); }},
      {"mtp.alpha2", [&](const std::string& w, const std::string& v) { cfg.mtp.alpha2 = detail::parse_double(w, v); }},
      {"mtp.mu0", [&](const std::string& w, const std::string& v) { cfg.mtp.mu0 = detail::parse_double(w, v); }},
      {"mtp.rho", [&](const std::string& w, const std::string& v) { cfg.mtp.rho = detail::parse_double(w, v); }},
      {"mtp.mu_max", [&](const std::string& w, const std::string& v) { cfg.mtp.mu_max = detail::parse_double(w, v); }},
      {"mtp.rounds", [&](const std::string& w, const std::string& v) { cfg.mtp.rounds = detail::parse_int(w, v); }},
      {"mtp.epochs_w1", [&](const std::string& w, const std::string& v) { cfg.mtp.epochs_w1 = detail::parse_int(w, v); }},
      {"mtp.epochs_w2", [&](const std::string& w, const std::string& v) { cfg.mtp.epochs_w2 = detail::parse_int(w, v); }},
      {"mtp.epochs_w3", [&](const std::string& w, const std::string& v) { cfg.mtp.epochs_w3 = detail::parse_int(w, v); }},
      {"mtp.lr_w1", [&](const std::string& w, const std::string& v) { cfg.mtp.lr_w1 = detail::parse_double(w, v); }},
      {"mtp.lr_w2", [&](const std::string& w, const std::string& v) { cfg.mtp.lr_w2 = detail::parse_double(w, v); }},
      {"mtp.lr_w3", [&](const std::string& w, const std::string& v) { cfg.mtp.lr_w3 = detail::parse_double(w, v); }},
      {"mtp.early_stop", [&](const std::string& w, const std::string& v) { cfg.mtp.early_stop = detail::parse_bool(w, v); }},
      {"mtp.early_stop_tol", [&](const std::string& w, const std::string& v) { cfg.mtp.early_stop_tol = detail::parse_double(w, v); }},
      {"mtp.gamma_average_w1_w3", [&](const std::string& w, const std::string& v) { cfg.mtp.gamma_average_w1_w3 = detail::parse_bool(w, v); }},
      {"prune.percentile", [&](const std::string& w, const std::string& v) { cfg.prune.percentile = detail::parse_double(w, v); }},
      {"prune.policy", [&](const std::string&, const std::string& v) { cfg.prune.policy = threshold_policy_from_string(v); }},
      {"finetune.cls_epochs", [&](const std::string& w, const std::string& v) { cfg.finetune.cls_epochs = detail::parse_int(w, v); }},
      {"finetune.seg_epochs", [&](const std::string& w, const std::string& v) { cfg.finetune.seg_epochs = detail::parse_int(w, v); }},
      {"finetune.lr_cls", [&](const std::string& w, const std::string& v) { cfg.finetune.lr_cls = detail::parse_double(w, v); }},
      {"finetune.lr_seg", [&](const std::string& w, const std::string& v) { cfg.finetune.lr_seg = detail::parse_double(w, v); }},
      {"run.seed", [&](const std::string& w, const std::string& v) { cfg.run.seed = detail::parse_u64(w, v); }},
      {"run.batch_size", [&](const std::string& w, const std::string& v) { cfg.run.batch_size = detail::parse_int(w, v); }},
      {"run.latency_runs", [&](const std::string& w, const std::string& v) { cfg.run.latency_runs = detail::parse_int(w, v); }},
      {"run.out_dir", [&](const std::string&, const std::string& v) { cfg.run.out_dir = v; }},
  };

  while (std::getline(in, line)) {
    ++lineno;
    std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": malformed section header: " + t);
      section = detail::trim(t.substr(1, t.size() - 2));
      continue;
    }
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key = value: " + t);
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string val = detail::trim(t.substr(eq + 1));
    if (section.empty())
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": key outside any section: " + key);
    const std::string full = section + "." + key;
    auto it = set.find(full);
    if (it == set.end())
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": unknown key '" + full + "'");
    it->second(full, val);
  }
  return cfg;
}

}  // namespace mtp
