#pragma once

// Network graphs. A NetworkGraph is a DAG of layer specs plus typed edges;
// layers are stored in topological order and edges always point forward. The
// graph carries everything pruning needs to reason about structure: channel
// counts, the backbone/decoder partition split, prunability flags, and
// residual-block grouping. Weights live separately in ParamStore.

#include <array>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace mtp {

enum class Partition { backbone, decoder };

inline std::string to_string(Partition p) {
  return p == Partition::backbone ? "backbone" : "decoder";
}

inline Partition partition_from_string(const std::string& s) {
  if (s == "backbone") return Partition::backbone;
  if (s == "decoder") return Partition::decoder;
  throw std::invalid_argument("unknown partition '" + s + "'");
}

enum class LayerKind {
  conv,
  batchnorm,
  activation,
  pool,        // global average pool
  upsample,    // nearest neighbour, integer factor
  elementwise_add,
  concat,
  classifier_head,   // 1x1 conv producing class logits after global pooling
  segmentation_head  // 1x1 conv producing per-pixel class logits
};

inline std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::activation: return "activation";
    case LayerKind::pool: return "pool";
    case LayerKind::upsample: return "upsample";
    case LayerKind::elementwise_add: return "elementwise-add";
    case LayerKind::concat: return "concat";
    case LayerKind::classifier_head: return "classifier-head";
    case LayerKind::segmentation_head: return "segmentation-head";
  }
  throw std::logic_error("unreachable layer kind");
}

inline LayerKind kind_from_string(const std::string& s) {
  static const std::map<std::string, LayerKind> m = {
      {"conv", LayerKind::conv},
      {"batchnorm", LayerKind::batchnorm},
      {"activation", LayerKind::activation},
      {"pool", LayerKind::pool},
      {"upsample", LayerKind::upsample},
      {"elementwise-add", LayerKind::elementwise_add},
      {"concat", LayerKind::concat},
      {"classifier-head", LayerKind::classifier_head},
      {"segmentation-head", LayerKind::segmentation_head},
  };
  auto it = m.find(s);
  if (it == m.end()) throw std::invalid_argument("unknown layer kind '" + s + "'");
  return it->second;
}

// Conv-family layers own weights; heads are convs with a fixed output width.
inline bool is_conv_like(LayerKind k) {
  return k == LayerKind::conv || k == LayerKind::classifier_head ||
         k == LayerKind::segmentation_head;
}

// Single-input layers that neither mix nor change channel identity; channel
// keep-masks propagate through them untouched.
inline bool is_passthrough(LayerKind k) {
  return k == LayerKind::batchnorm || k == LayerKind::activation ||
         k == LayerKind::pool || k == LayerKind::upsample;
}

struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::conv;
  int in_channels = 0;
  int out_channels = 0;
  int kernel_size = 0;  // conv-family only
  int stride = 1;       // conv stride; for upsample this is the scale factor
  int dilation = 1;     // conv-family only
  bool bias = false;    // conv-family only
  Partition partition = Partition::backbone;
  bool prunable = false;
  std::string residual_group;  // empty when the layer is not inside a block

  bool operator==(const LayerSpec&) const = default;
};

// Spatial size of a same-padded conv output; also used by the profiler.
inline int conv_out_dim(int in, int kernel, int stride, int dilation) {
  const int pad = (kernel - 1) * dilation / 2;
  return (in + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1;
}

struct Violation {
  std::string rule;    // stable machine-checkable rule name
  std::string detail;  // human-readable message naming the layers involved
};

struct NetworkGraph {
  std::vector<LayerSpec> layers;                          // topological order
  std::vector<std::pair<std::string, std::string>> edges; // producer -> consumer
  std::array<int, 3> input_shape{0, 0, 0};                // C, H, W

  bool operator==(const NetworkGraph&) const = default;

  int index_of(const std::string& id) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].id == id) return static_cast<int>(i);
    return -1;
  }

  const LayerSpec& layer(const std::string& id) const {
    const int i = index_of(id);
    if (i < 0) throw std::invalid_argument("no such layer: " + id);
    return layers[static_cast<std::size_t>(i)];
  }

  // Producer indices of a layer, in edge order. Edge order is meaningful: it
  // fixes the channel order of concat inputs.
  std::vector<int> producers(int layer_index) const {
    std::vector<int> out;
    const std::string& id = layers[static_cast<std::size_t>(layer_index)].id;
    for (const auto& e : edges)
      if (e.second == id) out.push_back(index_of(e.first));
    return out;
  }

  std::vector<int> consumers(int layer_index) const {
    std::vector<int> out;
    const std::string& id = layers[static_cast<std::size_t>(layer_index)].id;
    for (const auto& e : edges)
      if (e.first == id) out.push_back(index_of(e.second));
    return out;
  }

  // Needed-set for executing up to `sink`: the sink and all its ancestors.
  std::vector<char> ancestors_of(const std::string& sink) const {
    const int s = index_of(sink);
    if (s < 0) throw std::invalid_argument("no such layer: " + sink);
    std::vector<char> need(layers.size(), 0);
    std::vector<int> stack{s};
    while (!stack.empty()) {
      const int i = stack.back();
      stack.pop_back();
      if (need[static_cast<std::size_t>(i)]) continue;
      need[static_cast<std::size_t>(i)] = 1;
      for (int p : producers(i)) stack.push_back(p);
    }
    return need;
  }
};

// Sink of the classification path: the unique classifier head.
inline std::string classification_sink(const NetworkGraph& g) {
  for (const auto& l : g.layers)
    if (l.kind == LayerKind::classifier_head) return l.id;
  throw std::runtime_error("graph has no classifier head");
}

// Sink of the segmentation path: the segmentation head followed through any
// trailing passthrough layers (e.g. the final upsample back to input size).
inline std::string segmentation_sink(const NetworkGraph& g) {
  int cur = -1;
  for (std::size_t i = 0; i < g.layers.size(); ++i)
    if (g.layers[i].kind == LayerKind::segmentation_head) cur = static_cast<int>(i);
  if (cur < 0) throw std::runtime_error("graph has no segmentation head");
  for (;;) {
    std::vector<int> next;
    for (int c : g.consumers(cur))
      if (is_passthrough(g.layers[static_cast<std::size_t>(c)].kind)) next.push_back(c);
    if (next.size() != 1) break;
    cur = next[0];
  }
  return g.layers[static_cast<std::size_t>(cur)].id;
}

inline std::vector<Violation> validate(const NetworkGraph& g) {
  std::vector<Violation> out;
  auto add = [&](const std::string& rule, const std::string& detail) {
    out.push_back({rule, detail});
  };

  if (g.input_shape[0] <= 0 || g.input_shape[1] <= 0 || g.input_shape[2] <= 0)
    add("input-shape", "input_shape must have positive C, H, W");

  std::map<std::string, int> index;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const auto& l = g.layers[i];
    if (index.count(l.id))
      add("duplicate-layer-id", "layer id '" + l.id + "' appears more than once");
    else
      index[l.id] = static_cast<int>(i);
  }

  bool edges_ok = true;
  for (const auto& e : g.edges) {
    if (!index.count(e.first) || !index.count(e.second)) {
      add("unknown-edge-endpoint", "edge " + e.first + " -> " + e.second +
                                       " references a missing layer");
      edges_ok = false;
      continue;
    }
    if (index[e.first] >= index[e.second]) {
      add("topological-order", "edge " + e.first + " -> " + e.second +
                                   " does not point forward in layer order");
      edges_ok = false;
    }
  }
  if (!edges_ok) return out;  // structural checks below assume a sane edge list

  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const auto& l = g.layers[i];
    const auto prods = g.producers(static_cast<int>(i));

    if (l.in_channels <= 0 || l.out_channels <= 0)
      add("shape-fields", "layer '" + l.id + "' has non-positive channel counts");
    if (is_conv_like(l.kind)) {
      if (l.kernel_size < 1 || l.kernel_size % 2 == 0)
        add("shape-fields", "layer '" + l.id + "' needs an odd kernel_size >= 1");
      if (l.stride < 1 || l.dilation < 1)
        add("shape-fields", "layer '" + l.id + "' needs stride, dilation >= 1");
    }
    if (l.kind == LayerKind::upsample && l.stride < 1)
      add("shape-fields", "upsample '" + l.id + "' needs a scale factor >= 1");

    // Arity by kind.
    const std::size_t arity = prods.size();
    if (l.kind == LayerKind::elementwise_add || l.kind == LayerKind::concat) {
      if (arity < 2)
        add("arity", "layer '" + l.id + "' needs at least two inputs");
    } else if (arity > 1) {
      add("arity", "layer '" + l.id + "' admits a single input");
    }

    // Channel consistency along edges.
    if (arity == 0) {
      if (l.in_channels != g.input_shape[0])
        add("input-channels", "root layer '" + l.id + "' expects " +
                                  std::to_string(l.in_channels) +
                                  " channels but the graph input has " +
                                  std::to_string(g.input_shape[0]));
    } else if (l.kind == LayerKind::concat) {
      int sum = 0;
      for (int p : prods) sum += g.layers[static_cast<std::size_t>(p)].out_channels;
      if (sum != l.in_channels)
        add("channel-consistency", "concat '" + l.id + "' expects " +
                                       std::to_string(l.in_channels) +
                                       " channels but its inputs provide " +
                                       std::to_string(sum));
    } else if (l.kind == LayerKind::elementwise_add) {
      for (int p : prods) {
        const auto& pl = g.layers[static_cast<std::size_t>(p)];
        if (pl.out_channels != l.in_channels)
          add("channel-consistency", "add '" + l.id + "' expects " +
                                         std::to_string(l.in_channels) +
                                         " channels but input '" + pl.id +
                                         "' provides " + std::to_string(pl.out_channels));
      }
    } else {
      const auto& pl = g.layers[static_cast<std::size_t>(prods[0])];
      if (pl.out_channels != l.in_channels)
        add("channel-consistency", "edge " + pl.id + " -> " + l.id +
                                       " carries " + std::to_string(pl.out_channels) +
                                       " channels but '" + l.id + "' expects " +
                                       std::to_string(l.in_channels));
    }

    // Channel-preserving kinds (concat preserves the summed input count).
    if (!is_conv_like(l.kind) && l.in_channels != l.out_channels)
      add("channel-consistency", "layer '" + l.id + "' must preserve its channel count");

    // A batchnorm that follows a conv must match that conv's output width.
    if (l.kind == LayerKind::batchnorm && arity == 1) {
      const auto& pl = g.layers[static_cast<std::size_t>(prods[0])];
      if (is_conv_like(pl.kind) && pl.out_channels != l.out_channels)
        add("batchnorm-channels", "batchnorm '" + l.id + "' has " +
                                      std::to_string(l.out_channels) +
                                      " channels but follows conv '" + pl.id + "' with " +
                                      std::to_string(pl.out_channels));
    }

    if (l.prunable && l.kind != LayerKind::conv &&
        l.kind != LayerKind::segmentation_head)
      add("prunable-kind", "layer '" + l.id + "' cannot be prunable: only convs may be");
  }

  // Convs whose output reaches an elementwise add through channel-preserving
  // layers must not be prunable: pruning them would desynchronize the two
  // summands. Block-output convs and skip projections fall under this rule.
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const auto& l = g.layers[i];
    if (!is_conv_like(l.kind) || !l.prunable) continue;
    std::vector<int> stack{static_cast<int>(i)};
    std::set<int> seen;
    bool feeds_add = false;
    while (!stack.empty() && !feeds_add) {
      const int cur = stack.back();
      stack.pop_back();
      for (int c : g.consumers(cur)) {
        if (seen.count(c)) continue;
        seen.insert(c);
        const auto& cl = g.layers[static_cast<std::size_t>(c)];
        if (cl.kind == LayerKind::elementwise_add) {
          feeds_add = true;
          break;
        }
        if (is_passthrough(cl.kind) || cl.kind == LayerKind::concat) stack.push_back(c);
      }
    }
    if (feeds_add)
      add("add-prunability", "conv '" + l.id +
                                 "' is prunable but feeds an elementwise add");
  }

  // Residual groups must not straddle the partition boundary.
  std::map<std::string, Partition> group_part;
  for (const auto& l : g.layers) {
    if (l.residual_group.empty()) continue;
    auto it = group_part.find(l.residual_group);
    if (it == group_part.end())
      group_part[l.residual_group] = l.partition;
    else if (it->second != l.partition)
      add("residual-group-partition", "residual group '" + l.residual_group +
                                          "' spans both partitions (layer '" + l.id + "')");
  }

  return out;
}

// ---------------------------------------------------------------------------
// JSON serialization (versioned document).

inline constexpr int kGraphFormatVersion = 1;

inline std::string to_json(const NetworkGraph& g) {
  nlohmann::json j;
  j["format"] = "mtp-graph";
  j["version"] = kGraphFormatVersion;
  j["input_shape"] = g.input_shape;
  j["layers"] = nlohmann::json::array();
  for (const auto& l : g.layers) {
    nlohmann::json jl;
    jl["id"] = l.id;
    jl["kind"] = to_string(l.kind);
    jl["in_channels"] = l.in_channels;
    jl["out_channels"] = l.out_channels;
    jl["kernel_size"] = l.kernel_size;
    jl["stride"] = l.stride;
    jl["dilation"] = l.dilation;
    jl["bias"] = l.bias;
    jl["partition"] = to_string(l.partition);
    jl["prunable"] = l.prunable;
    jl["residual_group"] = l.residual_group;
    j["layers"].push_back(jl);
  }
  j["edges"] = nlohmann::json::array();
  for (const auto& e : g.edges) j["edges"].push_back({e.first, e.second});
  return j.dump(2) + "\n";
}

inline NetworkGraph graph_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(std::string("graph json: parse error: ") + e.what());
  }
  if (!j.is_object() || j.value("format", "") != "mtp-graph")
    throw std::runtime_error("graph json: not an mtp-graph document");
  if (j.value("version", -1) != kGraphFormatVersion)
    throw std::runtime_error("graph json: unsupported version " +
                             std::to_string(j.value("version", -1)));
  NetworkGraph g;
  const auto shape = j.at("input_shape");
  if (!shape.is_array() || shape.size() != 3)
    throw std::runtime_error("graph json: input_shape must be [C, H, W]");
  for (int i = 0; i < 3; ++i) g.input_shape[static_cast<std::size_t>(i)] = shape[static_cast<std::size_t>(i)].get<int>();
  for (const auto& jl : j.at("layers")) {
    LayerSpec l;
    l.id = jl.at("id").get<std::string>();
    l.kind = kind_from_string(jl.at("kind").get<std::string>());
    l.in_channels = jl.at("in_channels").get<int>();
    l.out_channels = jl.at("out_channels").get<int>();
    l.kernel_size = jl.at("kernel_size").get<int>();
    l.stride = jl.at("stride").get<int>();
    l.dilation = jl.at("dilation").get<int>();
    l.bias = jl.at("bias").get<bool>();
    l.partition = partition_from_string(jl.at("partition").get<std::string>());
    l.prunable = jl.at("prunable").get<bool>();
    l.residual_group = jl.at("residual_group").get<std::string>();
    g.layers.push_back(std::move(l));
  }
  for (const auto& je : j.at("edges")) {
    if (!je.is_array() || je.size() != 2)
      throw std::runtime_error("graph json: each edge must be [from, to]");
    g.edges.emplace_back(je[0].get<std::string>(), je[1].get<std::string>());
  }
  return g;
}

inline void save_graph(const std::string& path, const NetworkGraph& g) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write graph file: " + path);
  out << to_json(g);
}

inline NetworkGraph load_graph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open graph file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return graph_from_json(ss.str());
}

}  // namespace mtp
