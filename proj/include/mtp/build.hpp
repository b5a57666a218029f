#pragma once

// Builds the desk-scale encoder-decoder network the experiments run on. The
// backbone is a small residual classification network (stem, then bottleneck
// blocks whose first two convs are prunable and whose block-output conv and
// skip projection are not, since those feed the elementwise add). The decoder
// is a miniature multi-dilation pyramid: three parallel convs plus a pooled
// branch, concatenated and projected, ending in a per-pixel head that is
// upsampled back to input resolution.

#include <stdexcept>
#include <string>

#include "mtp/config.hpp"
#include "mtp/graph.hpp"

namespace mtp {

namespace detail {

struct GraphAssembler {
  NetworkGraph g;

  LayerSpec& add(LayerSpec l) {
    g.layers.push_back(std::move(l));
    return g.layers.back();
  }

  void conv(const std::string& id, int in, int out, int k, int stride, int dil,
            bool bias, Partition part, bool prunable, const std::string& group,
            LayerKind kind = LayerKind::conv) {
    LayerSpec l;
    l.id = id;
    l.kind = kind;
    l.in_channels = in;
    l.out_channels = out;
    l.kernel_size = k;
    l.stride = stride;
    l.dilation = dil;
    l.bias = bias;
    l.partition = part;
    l.prunable = prunable;
    l.residual_group = group;
    add(std::move(l));
  }

  void simple(const std::string& id, LayerKind kind, int channels, Partition part,
              const std::string& group, int factor = 1) {
    LayerSpec l;
    l.id = id;
    l.kind = kind;
    l.in_channels = channels;
    l.out_channels = channels;
    l.stride = factor;  // upsample scale factor; ignored elsewhere
    l.partition = part;
    l.residual_group = group;
    add(std::move(l));
  }

  void edge(const std::string& from, const std::string& to) {
    g.edges.emplace_back(from, to);
  }
};

}  // namespace detail

inline NetworkGraph build_desk_network(const MtpConfig& cfg) {
  cfg.validate();
  const int w = cfg.model.width;
  const int c_in = cfg.model.input_channels;
  const int hw = cfg.model.image_size;
  const auto bb = Partition::backbone;
  const auto dec = Partition::decoder;

  detail::GraphAssembler a;
  a.g.input_shape = {c_in, hw, hw};

  // Stem: the only non-residual backbone conv; safe to prune.
  a.conv("stem", c_in, w, 3, 1, 1, false, bb, true, "");
  a.simple("stem_bn", LayerKind::batchnorm, w, bb, "");
  a.simple("stem_relu", LayerKind::activation, w, bb, "");
  a.edge("stem", "stem_bn");
  a.edge("stem_bn", "stem_relu");

  // Bottleneck residual blocks. Only the first block downsamples; it carries a
  // projection on the skip path so the add stays shape-consistent.
  std::string prev = "stem_relu";
  for (int b = 1; b <= cfg.model.blocks; ++b) {
    const std::string p = "b" + std::to_string(b) + "_";
    const std::string grp = "block" + std::to_string(b);
    const int stride = (b == 1) ? 2 : 1;

    a.conv(p + "c1", w, w, 1, 1, 1, false, bb, true, grp);
    a.simple(p + "bn1", LayerKind::batchnorm, w, bb, grp);
    a.simple(p + "relu1", LayerKind::activation, w, bb, grp);
    a.conv(p + "c2", w, w, 3, stride, 1, false, bb, true, grp);
    a.simple(p + "bn2", LayerKind::batchnorm, w, bb, grp);
    a.simple(p + "relu2", LayerKind::activation, w, bb, grp);
    // Block-output conv: feeds the add, so it must keep its channel layout.
    a.conv(p + "c3", w, w, 1, 1, 1, false, bb, false, grp);
    a.simple(p + "bn3", LayerKind::batchnorm, w, bb, grp);
    a.edge(prev, p + "c1");
    a.edge(p + "c1", p + "bn1");
    a.edge(p + "bn1", p + "relu1");
    a.edge(p + "relu1", p + "c2");
    a.edge(p + "c2", p + "bn2");
    a.edge(p + "bn2", p + "relu2");
    a.edge(p + "relu2", p + "c3");
    a.edge(p + "c3", p + "bn3");

    std::string skip = prev;
    if (stride != 1) {
      a.conv(p + "proj", w, w, 1, stride, 1, false, bb, false, grp);
      a.simple(p + "proj_bn", LayerKind::batchnorm, w, bb, grp);
      a.edge(prev, p + "proj");
      a.edge(p + "proj", p + "proj_bn");
      skip = p + "proj_bn";
    }
    a.simple(p + "add", LayerKind::elementwise_add, w, bb, grp);
    a.simple(p + "out", LayerKind::activation, w, bb, grp);
    a.edge(p + "bn3", p + "add");
    a.edge(skip, p + "add");
    a.edge(p + "add", p + "out");
    prev = p + "out";
  }
  const std::string trunk = prev;  // spatial size hw/2

  // Classification path: global pool, then a 1x1 head to class logits.
  a.simple("cls_pool", LayerKind::pool, w, bb, "");
  a.conv("cls_head", w, cfg.model.num_classes, 1, 1, 1, true, bb, false, "",
         LayerKind::classifier_head);
  a.edge(trunk, "cls_pool");
  a.edge("cls_pool", "cls_head");

  // Decoder: multi-dilation branches over the trunk feature map.
  a.conv("dec_b0", w, w, 1, 1, 1, false, dec, true, "");
  a.simple("dec_b0_bn", LayerKind::batchnorm, w, dec, "");
  a.simple("dec_b0_relu", LayerKind::activation, w, dec, "");
  a.conv("dec_b1", w, w, 3, 1, 1, false, dec, true, "");
  a.simple("dec_b1_bn", LayerKind::batchnorm, w, dec, "");
  a.simple("dec_b1_relu", LayerKind::activation, w, dec, "");
  a.conv("dec_b2", w, w, 3, 1, 2, false, dec, true, "");
  a.simple("dec_b2_bn", LayerKind::batchnorm, w, dec, "");
  a.simple("dec_b2_relu", LayerKind::activation, w, dec, "");
  a.simple("dec_gp_pool", LayerKind::pool, w, dec, "");
  a.conv("dec_gp_conv", w, w, 1, 1, 1, false, dec, true, "");
  a.simple("dec_gp_bn", LayerKind::batchnorm, w, dec, "");
  a.simple("dec_gp_relu", LayerKind::activation, w, dec, "");
  a.simple("dec_gp_up", LayerKind::upsample, w, dec, "", hw / 2);
  for (const char* br : {"dec_b0", "dec_b1", "dec_b2"}) a.edge(trunk, br);
  a.edge(trunk, "dec_gp_pool");
  a.edge("dec_b0", "dec_b0_bn");
  a.edge("dec_b0_bn", "dec_b0_relu");
  a.edge("dec_b1", "dec_b1_bn");
  a.edge("dec_b1_bn", "dec_b1_relu");
  a.edge("dec_b2", "dec_b2_bn");
  a.edge("dec_b2_bn", "dec_b2_relu");
  a.edge("dec_gp_pool", "dec_gp_conv");
  a.edge("dec_gp_conv", "dec_gp_bn");
  a.edge("dec_gp_bn", "dec_gp_relu");
  a.edge("dec_gp_relu", "dec_gp_up");

  // Concat order fixes the channel order seen by the projection conv.
  a.simple("dec_cat", LayerKind::concat, 4 * w, dec, "");
  a.edge("dec_b0_relu", "dec_cat");
  a.edge("dec_b1_relu", "dec_cat");
  a.edge("dec_b2_relu", "dec_cat");
  a.edge("dec_gp_up", "dec_cat");

  a.conv("dec_proj", 4 * w, w, 1, 1, 1, false, dec, true, "");
  a.simple("dec_proj_bn", LayerKind::batchnorm, w, dec, "");
  a.simple("dec_proj_relu", LayerKind::activation, w, dec, "");
  a.edge("dec_cat", "dec_proj");
  a.edge("dec_proj", "dec_proj_bn");
  a.edge("dec_proj_bn", "dec_proj_relu");

  a.conv("seg_head", w, cfg.model.seg_classes, 1, 1, 1, true, dec,
         cfg.model.seg_head_prunable, "", LayerKind::segmentation_head);
  a.edge("dec_proj_relu", "seg_head");
  std::string tail = "seg_head";
  if (cfg.model.seg_head_prunable) {
    // A prunable conv needs scaling factors, so give the head a batchnorm.
    a.simple("seg_head_bn", LayerKind::batchnorm, cfg.model.seg_classes, dec, "");
    a.edge("seg_head", "seg_head_bn");
    tail = "seg_head_bn";
  }
  a.simple("seg_up", LayerKind::upsample, cfg.model.seg_classes, dec, "", 2);
  a.edge(tail, "seg_up");

  const auto violations = validate(a.g);
  if (!violations.empty()) {
    std::string msg = "builder produced an invalid graph:";
    for (const auto& v : violations) msg += "\n  [" + v.rule + "] " + v.detail;
    throw std::logic_error(msg);
  }
  return a.g;
}

}  // namespace mtp
