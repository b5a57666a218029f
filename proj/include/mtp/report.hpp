#pragma once

// Experiment reports: one row per pipeline stage (and per baseline arm), each
// carrying both quality metrics and cost metrics plus the provenance needed
// for fair comparison — every row records the seed and config hash it came
// from, and comparisons across arms are only meaningful when those match.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtp {

struct ReportRow {
  std::string stage;        // e.g. "pretrain", "dense", "pruned", "finetuned"
  double top1 = 0.0;        // percent; -1 when the stage has no classifier path
  double miou = 0.0;        // percent; -1 when the stage has no decoder
  long long params = 0;
  long long flops = 0;
  double latency_ms = 0.0;
  std::uint64_t seed = 0;
  std::string config_hash;  // hex
};

struct ExperimentReport {
  std::vector<ReportRow> rows;

  const ReportRow* find(const std::string& stage) const {
    for (const auto& r : rows)
      if (r.stage == stage) return &r;
    return nullptr;
  }

  // All rows of a report must come from one (seed, config) pair; anything else
  // means two different experiments were spliced together.
  void check_consistent() const {
    for (const auto& r : rows)
      if (r.seed != rows.front().seed || r.config_hash != rows.front().config_hash)
        throw std::runtime_error("report mixes rows from different runs (stage '" +
                                 r.stage + "')");
  }

  std::string to_csv() const {
    std::string out = "stage,top1,miou,params,flops,latency_ms,seed,config_hash\n";
    char buf[512];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%lld,%lld,%.6f,%llu,%s\n",
                    r.stage.c_str(), r.top1, r.miou, r.params, r.flops, r.latency_ms,
                    static_cast<unsigned long long>(r.seed), r.config_hash.c_str());
      out += buf;
    }
    return out;
  }

  void save_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write report: " + path);
    out << to_csv();
  }

  static ExperimentReport from_csv(const std::string& text) {
    ExperimentReport rep;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) ||
        line != "stage,top1,miou,params,flops,latency_ms,seed,config_hash")
      throw std::runtime_error("report csv: missing or unknown header");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      ReportRow r;
      std::istringstream ls(line);
      std::string field;
      auto next = [&]() {
        if (!std::getline(ls, field, ',')) throw std::runtime_error("report csv: short row");
        return field;
      };
      r.stage = next();
      r.top1 = std::stod(next());
      r.miou = std::stod(next());
      r.params = std::stoll(next());
      r.flops = std::stoll(next());
      r.latency_ms = std::stod(next());
      r.seed = std::stoull(next());
      r.config_hash = next();
      rep.rows.push_back(std::move(r));
    }
    return rep;
  }

  static ExperimentReport load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open report: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_csv(ss.str());
  }
};

}  // namespace mtp
