#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "semslam/util.hpp"

namespace semslam {

/// Named learnable parameter array. Gradients accumulate into `grad` across
/// backward passes until zero_grad() is called.
struct Tensor {
  std::string name;
  std::vector<int> shape;
  Eigen::ArrayXd value;
  Eigen::ArrayXd grad;
  bool requires_grad = true;

  Tensor() = default;
  Tensor(std::string n, std::vector<int> s, bool rg = true) : name(std::move(n)), shape(std::move(s)), requires_grad(rg) {
    value = Eigen::ArrayXd::Zero(numel());
    grad = Eigen::ArrayXd::Zero(numel());
  }

  int numel() const {
    int n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  int rows() const { return shape.at(0); }
  int cols() const { return shape.size() > 1 ? shape.at(1) : 1; }

  void zero_grad() { grad.setZero(); }

  void fill_uniform(Rng& rng, double lo, double hi) {
    for (int i = 0; i < value.size(); ++i) value[i] = rng.uniform(lo, hi);
  }

  Eigen::Map<const Eigen::MatrixXd> as_matrix() const {
    // column-major map of a (rows x cols) parameter; storage order is an
    // internal convention, fixed by the checkpoint format
    return Eigen::Map<const Eigen::MatrixXd>(value.data(), rows(), cols());
  }
  Eigen::Map<Eigen::MatrixXd> grad_matrix() {
    return Eigen::Map<Eigen::MatrixXd>(grad.data(), rows(), cols());
  }

  std::uint64_t value_hash() const { return hash_bytes(value.data(), sizeof(double) * value.size()); }
};

// ---------------------------------------------------------------------------
// Checkpoint container: named f64 tensors plus string metadata, little-endian.
//
// Layout:
//   magic "SLMCKPT1" (8 bytes)
//   u64 tensor_count
//   per tensor: u32 name_len, name bytes, u32 ndim, u64 dims[ndim], f64 data[]
//   u64 meta_count
//   per entry:  u32 key_len, key, u32 val_len, val
// ---------------------------------------------------------------------------

struct Checkpoint {
  struct Entry {
    std::vector<int> shape;
    Eigen::ArrayXd value;
  };
  std::map<std::string, Entry> tensors;
  std::map<std::string, std::string> meta;

  void add(const Tensor& t) { tensors[t.name] = Entry{t.shape, t.value}; }

  const Entry& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("checkpoint: missing tensor " + name);
    return it->second;
  }

  void restore_into(Tensor& t) const {
    const Entry& e = at(t.name);
    if (e.shape != t.shape) throw std::runtime_error("checkpoint: shape mismatch for " + t.name);
    t.value = e.value;
  }
};

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  os.write("SLMCKPT1", 8);
  detail::write_pod<std::uint64_t>(os, ck.tensors.size());
  for (const auto& [name, e] : ck.tensors) {
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
    for (int d : e.shape) detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    os.write(reinterpret_cast<const char*>(e.value.data()), static_cast<std::streamsize>(sizeof(double) * e.value.size()));
  }
  detail::write_pod<std::uint64_t>(os, ck.meta.size());
  for (const auto& [k, v] : ck.meta) {
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(k.size()));
    os.write(k.data(), static_cast<std::streamsize>(k.size()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(v.size()));
    os.write(v.data(), static_cast<std::streamsize>(v.size()));
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != "SLMCKPT1") throw std::runtime_error("not a checkpoint file: " + path);
  Checkpoint ck;
  const auto n = detail::read_pod<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto name_len = detail::read_pod<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto ndim = detail::read_pod<std::uint32_t>(is);
    Checkpoint::Entry e;
    std::int64_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      e.shape.push_back(static_cast<int>(detail::read_pod<std::uint64_t>(is)));
      numel *= e.shape.back();
    }
    e.value.resize(numel);
    is.read(reinterpret_cast<char*>(e.value.data()), static_cast<std::streamsize>(sizeof(double) * numel));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor " + name);
    ck.tensors.emplace(std::move(name), std::move(e));
  }
  const auto m = detail::read_pod<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < m; ++i) {
    const auto klen = detail::read_pod<std::uint32_t>(is);
    std::string k(klen, '\0');
    is.read(k.data(), klen);
    const auto vlen = detail::read_pod<std::uint32_t>(is);
    std::string v(vlen, '\0');
    is.read(v.data(), vlen);
    if (!is) throw std::runtime_error("checkpoint: truncated metadata");
    ck.meta.emplace(std::move(k), std::move(v));
  }
  return ck;
}

}  // namespace semslam
