#pragma once

// Evaluation metrics: top-1 accuracy for classification, mean
// intersection-over-union for segmentation. mIoU is computed from a C x C
// confusion matrix (rows = ground truth, columns = prediction); classes that
// appear in neither the predictions nor the ground truth are excluded from
// the mean. Argmax ties resolve to the lowest class index.

#include <stdexcept>
#include <string>
#include <vector>

#include "mtp/datasets.hpp"
#include "mtp/executor.hpp"
#include "mtp/graph.hpp"
#include "mtp/params.hpp"

namespace mtp {

inline std::vector<long long> confusion_matrix(const std::vector<int>& truth,
                                               const std::vector<int>& pred,
                                               int num_classes) {
  if (truth.size() != pred.size())
    throw std::invalid_argument("confusion_matrix: size mismatch");
  std::vector<long long> cm(static_cast<std::size_t>(num_classes) * num_classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i], p = pred[i];
    if (t < 0 || t >= num_classes || p < 0 || p >= num_classes)
      throw std::invalid_argument("confusion_matrix: class index out of range");
    cm[static_cast<std::size_t>(t) * num_classes + p] += 1;
  }
  return cm;
}

// Returns mIoU in percent.
inline double miou_from_confusion(const std::vector<long long>& cm, int num_classes) {
  if (static_cast<int>(cm.size()) != num_classes * num_classes)
    throw std::invalid_argument("miou_from_confusion: matrix size mismatch");
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    const long long tp = cm[static_cast<std::size_t>(c) * num_classes + c];
    long long fp = 0, fn = 0;
    for (int o = 0; o < num_classes; ++o) {
      if (o == c) continue;
      fp += cm[static_cast<std::size_t>(o) * num_classes + c];
      fn += cm[static_cast<std::size_t>(c) * num_classes + o];
    }
    const long long denom = tp + fp + fn;
    if (denom == 0) continue;  // class absent everywhere: excluded
    sum += static_cast<double>(tp) / static_cast<double>(denom);
    ++present;
  }
  return present == 0 ? 0.0 : 100.0 * sum / present;
}

inline int argmax_lowest(const double* z, int n) {
  int best = 0;
  for (int k = 1; k < n; ++k)
    if (z[k] > z[best]) best = k;
  return best;
}

// Top-1 accuracy in percent, eval-mode forward.
inline double eval_top1(const NetworkGraph& g, ParamStore& backbone,
                        const ClsDataset& ds, int batch_size) {
  if (ds.images.empty()) throw std::invalid_argument("eval_top1: empty dataset");
  if (batch_size <= 0) throw std::invalid_argument("eval_top1: batch_size must be > 0");
  ModelView m{&g, &backbone, nullptr};
  const std::string sink = classification_sink(g);
  Workspace ws;
  std::vector<int> order(ds.images.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  long long hits = 0;
  for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(batch_size)) {
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(batch_size),
                                                order.size() - at);
    const ClsBatch b = make_cls_batch(ds, order, at, n);
    const Tensor& logits = forward(m, b.x, sink, RunMode::eval, ws);
    const int K = logits.dim(1);
    for (std::size_t i = 0; i < n; ++i)
      if (argmax_lowest(logits.data() + i * K, K) == b.y[i]) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(ds.images.size());
}

// mIoU in percent over a segmentation dataset, eval-mode forward.
inline double eval_miou(const NetworkGraph& g, ParamStore& backbone, ParamStore& decoder,
                        const SegDataset& ds, int batch_size) {
  if (ds.images.empty()) throw std::invalid_argument("eval_miou: empty dataset");
  if (batch_size <= 0) throw std::invalid_argument("eval_miou: batch_size must be > 0");
  ModelView m{&g, &backbone, &decoder};
  const std::string sink = segmentation_sink(g);
  Workspace ws;
  std::vector<int> order(ds.images.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::vector<long long> cm(static_cast<std::size_t>(ds.num_classes) * ds.num_classes, 0);
  for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(batch_size)) {
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(batch_size),
                                                order.size() - at);
    const SegBatch b = make_seg_batch(ds, order, at, n);
    const Tensor& logits = forward(m, b.x, sink, RunMode::eval, ws);
    const int C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    if (H != ds.height || W != ds.width)
      throw std::runtime_error("eval_miou: prediction resolution does not match labels");
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < plane; ++p) {
        // Gather the C logits of this pixel (stored plane-major).
        int best = 0;
        double bestv = logits.v[(i * C) * plane + p];
        for (int c = 1; c < C; ++c) {
          const double v = logits.v[(i * C + static_cast<std::size_t>(c)) * plane + p];
          if (v > bestv) {
            bestv = v;
            best = c;
          }
        }
        const int t = b.y.v[i * plane + p];
        if (t < 0 || t >= ds.num_classes)
          throw std::runtime_error("eval_miou: label out of range");
        if (best >= ds.num_classes)
          throw std::runtime_error("eval_miou: prediction class outside dataset classes");
        cm[static_cast<std::size_t>(t) * ds.num_classes + best] += 1;
      }
    }
  }
  return miou_from_confusion(cm, ds.num_classes);
}

}  // namespace mtp
