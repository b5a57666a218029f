#pragma once

// Static SVG plots for experiment artifacts: sparsity trajectories over
// rounds, kept-channels per layer, and quality-versus-cost scatter. SVG keeps
// the artifacts diffable and viewable without extra tooling.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mtp/graph.hpp"
#include "mtp/pruner.hpp"
#include "mtp/report.hpp"
#include "mtp/trainer.hpp"

namespace mtp {

namespace detail {

class Svg {
 public:
  Svg(int width, int height) : w_(width), h_(height) {
    buf_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w_ << "\" height=\""
         << h_ << "\" viewBox=\"0 0 " << w_ << " " << h_ << "\">\n";
    buf_ << "<rect x=\"0\" y=\"0\" width=\"" << w_ << "\" height=\"" << h_
         << "\" fill=\"white\"/>\n";
  }

  void line(double x1, double y1, double x2, double y2, const std::string& color,
            double width = 1.0) {
    buf_ << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\""
         << y2 << "\" stroke=\"" << color << "\" stroke-width=\"" << width << "\"/>\n";
  }

  void rect(double x, double y, double w, double h, const std::string& fill) {
    buf_ << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\""
         << h << "\" fill=\"" << fill << "\"/>\n";
  }

  void circle(double x, double y, double r, const std::string& fill) {
    buf_ << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"" << r << "\" fill=\""
         << fill << "\"/>\n";
  }

  void text(double x, double y, const std::string& s, int size = 11,
            const std::string& anchor = "start") {
    buf_ << "<text x=\"" << x << "\" y=\"" << y << "\" font-size=\"" << size
         << "\" font-family=\"sans-serif\" text-anchor=\"" << anchor << "\">" << s
         << "</text>\n";
  }

  void polyline(const std::vector<std::pair<double, double>>& pts,
                const std::string& color) {
    buf_ << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) buf_ << x << "," << y << " ";
    buf_ << "\"/>\n";
  }

  void save(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write plot: " + path);
    out << buf_.str() << "</svg>\n";
  }

 private:
  int w_, h_;
  std::ostringstream buf_;
};

inline std::string fmt1(double x) {
  char b[32];
  std::snprintf(b, sizeof(b), "%.2f", x);
  return b;
}

}  // namespace detail

// Per-partition sparsity fraction versus round.
inline void plot_sparsity_history(const SparseHistory& hist, const std::string& path) {
  const int W = 520, H = 320, L = 60, B = 40, T = 20, R = 20;
  detail::Svg svg(W, H);
  const double px = W - L - R, py = H - T - B;
  svg.line(L, H - B, W - R, H - B, "black");
  svg.line(L, T, L, H - B, "black");
  svg.text(W / 2, H - 8, "round", 12, "middle");
  svg.text(12, T - 4, "sparsity", 11);
  const int n = static_cast<int>(hist.rows.size());
  auto x_of = [&](int i) { return L + (n <= 1 ? 0.0 : px * i / (n - 1)); };
  auto y_of = [&](double v) { return H - B - py * std::clamp(v, 0.0, 1.0); };
  for (double tick : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    svg.line(L - 4, y_of(tick), L, y_of(tick), "black");
    svg.text(L - 8, y_of(tick) + 4, detail::fmt1(tick), 10, "end");
  }
  std::vector<std::pair<double, double>> pb, pd;
  for (int i = 0; i < n; ++i) {
    pb.emplace_back(x_of(i), y_of(hist.rows[static_cast<std::size_t>(i)].sparsity_backbone));
    pd.emplace_back(x_of(i), y_of(hist.rows[static_cast<std::size_t>(i)].sparsity_decoder));
    svg.text(x_of(i), H - B + 14, std::to_string(hist.rows[static_cast<std::size_t>(i)].round),
             10, "middle");
  }
  if (!pb.empty()) svg.polyline(pb, "#1f77b4");
  if (!pd.empty()) svg.polyline(pd, "#d62728");
  svg.text(W - R - 150, T + 12, "backbone", 11);
  svg.rect(W - R - 170, T + 4, 14, 8, "#1f77b4");
  svg.text(W - R - 150, T + 28, "decoder", 11);
  svg.rect(W - R - 170, T + 20, 14, 8, "#d62728");
  svg.save(path);
}

// Kept versus original channels for every prunable layer.
inline void plot_channels_per_layer(const NetworkGraph& g, const PruningPlan& plan,
                                    const std::string& path) {
  std::vector<const LayerSpec*> layers;
  for (const auto& l : g.layers)
    if (l.prunable) layers.push_back(&l);
  const int n = static_cast<int>(layers.size());
  const int W = std::max(360, 40 + n * 34), H = 300, L = 50, B = 90, T = 20, R = 10;
  detail::Svg svg(W, H);
  const double py = H - T - B;
  int cmax = 1;
  for (const auto* l : layers) cmax = std::max(cmax, l->out_channels);
  auto y_of = [&](double v) { return H - B - py * v / cmax; };
  svg.line(L, H - B, W - R, H - B, "black");
  svg.line(L, T, L, H - B, "black");
  for (int i = 0; i < n; ++i) {
    const LayerSpec& l = *layers[static_cast<std::size_t>(i)];
    const double x = L + 10 + i * 34.0;
    const auto& mask = plan.keep.at(l.id);
    const int kept = static_cast<int>(std::count(mask.begin(), mask.end(), char(1)));
    const std::string color =
        l.partition == Partition::backbone ? "#1f77b4" : "#d62728";
    svg.rect(x, y_of(l.out_channels), 22, py * l.out_channels / cmax, "#dddddd");
    svg.rect(x, y_of(kept), 22, py * kept / cmax, color);
    // Rotated labels would need transforms; short ids fit diagonally enough.
    svg.text(x + 11, H - B + 12 + (i % 2) * 12, l.id, 8, "middle");
  }
  svg.text(L, T - 6, "channels kept (grey = original)", 11);
  svg.save(path);
}

// Quality (mIoU) versus cost (FLOPs) for every report row that has a decoder.
inline void plot_quality_vs_flops(const ExperimentReport& rep, const std::string& path) {
  const int W = 520, H = 320, L = 60, B = 50, T = 20, R = 20;
  detail::Svg svg(W, H);
  std::vector<const ReportRow*> rows;
  for (const auto& r : rep.rows)
    if (r.miou >= 0.0) rows.push_back(&r);
  double fmax = 1.0, mmax = 1.0;
  for (const auto* r : rows) {
    fmax = std::max(fmax, static_cast<double>(r->flops));
    mmax = std::max(mmax, r->miou);
  }
  const double px = W - L - R, py = H - T - B;
  auto x_of = [&](double f) { return L + px * f / fmax; };
  auto y_of = [&](double m) { return H - B - py * m / (mmax * 1.1 + 1e-9); };
  svg.line(L, H - B, W - R, H - B, "black");
  svg.line(L, T, L, H - B, "black");
  svg.text(W / 2, H - 10, "FLOPs", 12, "middle");
  svg.text(12, T - 4, "mIoU (%)", 11);
  for (const auto* r : rows) {
    svg.circle(x_of(static_cast<double>(r->flops)), y_of(r->miou), 4, "#1f77b4");
    svg.text(x_of(static_cast<double>(r->flops)) + 6, y_of(r->miou) - 4, r->stage, 9);
  }
  svg.save(path);
}

}  // namespace mtp
