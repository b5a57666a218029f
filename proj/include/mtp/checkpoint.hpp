#pragma once

// Versioned binary checkpoints. A checkpoint holds named parameter stores
// (e.g. "w1", "w2", "w3", "E" during the sparse phase, or "backbone" and
// "decoder" for ordinary models) plus the sparse-phase scalars and the config
// hash of the run that wrote it. Doubles round-trip bit-exactly. Readers
// refuse unknown magic or versions; loaders that receive a checkpoint from a
// different config can detect it via the stored hash.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtp/params.hpp"
#include "mtp/tensor.hpp"

namespace mtp {

struct Checkpoint {
  std::map<std::string, ParamStore> stores;
  double mu = 0.0;
  std::int32_t round = 0;
  std::uint64_t config_hash = 0;
};

namespace detail {

constexpr char kCkptMagic[8] = {'M', 'T', 'P', 'C', 'K', 'P', 'T', '1'};

inline void write_u32(std::ostream& o, std::uint32_t x) {
  o.write(reinterpret_cast<const char*>(&x), sizeof(x));
}
inline void write_u64(std::ostream& o, std::uint64_t x) {
  o.write(reinterpret_cast<const char*>(&x), sizeof(x));
}
inline void write_f64(std::ostream& o, double x) {
  o.write(reinterpret_cast<const char*>(&x), sizeof(x));
}
inline void write_str(std::ostream& o, const std::string& s) {
  write_u32(o, static_cast<std::uint32_t>(s.size()));
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t read_u32(std::istream& i) {
  std::uint32_t x;
  i.read(reinterpret_cast<char*>(&x), sizeof(x));
  if (!i) throw std::runtime_error("checkpoint: truncated file");
  return x;
}
inline std::uint64_t read_u64(std::istream& i) {
  std::uint64_t x;
  i.read(reinterpret_cast<char*>(&x), sizeof(x));
  if (!i) throw std::runtime_error("checkpoint: truncated file");
  return x;
}
inline double read_f64(std::istream& i) {
  double x;
  i.read(reinterpret_cast<char*>(&x), sizeof(x));
  if (!i) throw std::runtime_error("checkpoint: truncated file");
  return x;
}
inline std::string read_str(std::istream& i) {
  const std::uint32_t n = read_u32(i);
  if (n > (1u << 20)) throw std::runtime_error("checkpoint: implausible string length");
  std::string s(n, '\0');
  i.read(s.data(), n);
  if (!i) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  detail::write_u64(out, ckpt.config_hash);
  detail::write_f64(out, ckpt.mu);
  detail::write_u32(out, static_cast<std::uint32_t>(ckpt.round));
  detail::write_u32(out, static_cast<std::uint32_t>(ckpt.stores.size()));
  for (const auto& [store_name, store] : ckpt.stores) {
    detail::write_str(out, store_name);
    detail::write_u32(out, static_cast<std::uint32_t>(store.layers.size()));
    for (const auto& [layer, tensors] : store.layers) {
      detail::write_str(out, layer);
      detail::write_u32(out, static_cast<std::uint32_t>(tensors.size()));
      for (const auto& [name, t] : tensors) {
        detail::write_str(out, name);
        detail::write_u32(out, static_cast<std::uint32_t>(t.shape.size()));
        for (int d : t.shape) detail::write_u32(out, static_cast<std::uint32_t>(d));
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.size() * sizeof(double)));
      }
    }
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0)
    throw std::runtime_error("checkpoint: bad magic or unsupported version in " + path);
  Checkpoint ckpt;
  ckpt.config_hash = detail::read_u64(in);
  ckpt.mu = detail::read_f64(in);
  ckpt.round = static_cast<std::int32_t>(detail::read_u32(in));
  const std::uint32_t nstores = detail::read_u32(in);
  for (std::uint32_t s = 0; s < nstores; ++s) {
    const std::string store_name = detail::read_str(in);
    ParamStore store;
    const std::uint32_t nlayers = detail::read_u32(in);
    for (std::uint32_t l = 0; l < nlayers; ++l) {
      const std::string layer = detail::read_str(in);
      const std::uint32_t ntensors = detail::read_u32(in);
      for (std::uint32_t t = 0; t < ntensors; ++t) {
        const std::string name = detail::read_str(in);
        const std::uint32_t ndim = detail::read_u32(in);
        if (ndim > 8) throw std::runtime_error("checkpoint: implausible tensor rank");
        std::vector<int> shape;
        for (std::uint32_t d = 0; d < ndim; ++d)
          shape.push_back(static_cast<int>(detail::read_u32(in)));
        Tensor tensor(shape);
        in.read(reinterpret_cast<char*>(tensor.data()),
                static_cast<std::streamsize>(tensor.size() * sizeof(double)));
        if (!in) throw std::runtime_error("checkpoint: truncated tensor data");
        store.layers[layer][name] = std::move(tensor);
      }
    }
    ckpt.stores[store_name] = std::move(store);
  }
  return ckpt;
}

}  // namespace mtp
