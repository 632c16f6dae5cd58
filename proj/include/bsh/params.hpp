#pragma once

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include "bsh/common.hpp"
#include "bsh/tensor.hpp"

namespace bsh {

// One named parameter with its gradient and Adam moments. Non-trainable
// entries hold buffers such as batch-norm running statistics.
template <class T>
struct ParamT {
  TensorT<T> value;
  TensorT<T> grad;
  TensorT<T> m, v;
  bool trainable = true;
};

template <class T>
class ParamStoreT {
 public:
  using Param = ParamT<T>;

  Param& create(const std::string& name, TensorT<T> init, bool trainable = true) {
    if (entries_.count(name)) throw config_error("param already exists: " + name);
    Param p;
    p.grad = TensorT<T>::zeros(init.shape);
    p.m = TensorT<T>::zeros(init.shape);
    p.v = TensorT<T>::zeros(init.shape);
    p.value = std::move(init);
    p.trainable = trainable;
    return entries_.emplace(name, std::move(p)).first->second;
  }

  Param& get(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw config_error("unknown param: " + name);
    return it->second;
  }
  const Param& get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw config_error("unknown param: " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  void zero_grad() {
    for (auto& [k, p] : entries_) p.grad.fill(T(0));
  }

  // Standard Adam with bias correction over all trainable entries.
  void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1, double(step_));
    const double bc2 = 1.0 - std::pow(beta2, double(step_));
    for (auto& [k, p] : entries_) {
      if (!p.trainable) continue;
      for (size_t i = 0; i < p.value.numel(); ++i) {
        const double g = double(p.grad.data[i]);
        const double m = beta1 * double(p.m.data[i]) + (1.0 - beta1) * g;
        const double v = beta2 * double(p.v.data[i]) + (1.0 - beta2) * g * g;
        p.m.data[i] = T(m);
        p.v.data[i] = T(v);
        p.value.data[i] -= T(lr * (m / bc1) / (std::sqrt(v / bc2) + eps));
      }
    }
  }

  long step_count() const { return step_; }
  void set_step_count(long s) { step_ = s; }
  size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  size_t total_params() const {
    size_t n = 0;
    for (const auto& [k, p] : entries_)
      if (p.trainable) n += p.value.numel();
    return n;
  }

  // Checkpoint archive: little-endian named tensors with shape headers.
  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot write checkpoint: " + path);
    const char magic[4] = {'B', 'S', 'H', 'C'};
    f.write(magic, 4);
    write_u32(f, 1);  // version
    write_u32(f, sizeof(T) == 8 ? 8 : 4);
    write_u32(f, std::uint32_t(entries_.size()));
    write_i64(f, step_);
    for (const auto& [name, p] : entries_) {
      write_u32(f, std::uint32_t(name.size()));
      f.write(name.data(), std::streamsize(name.size()));
      f.put(p.trainable ? 1 : 0);
      write_u32(f, std::uint32_t(p.value.rank()));
      for (int d : p.value.shape) write_u32(f, std::uint32_t(d));
      write_raw(f, p.value);
      write_raw(f, p.m);
      write_raw(f, p.v);
    }
    if (!f) throw data_error("short write on checkpoint: " + path);
  }

  void load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot read checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "BSHC", 4) != 0)
      throw data_error("bad checkpoint magic: " + path);
    if (read_u32(f) != 1) throw data_error("unsupported checkpoint version");
    if (read_u32(f) != (sizeof(T) == 8 ? 8u : 4u))
      throw data_error("checkpoint dtype mismatch");
    const std::uint32_t count = read_u32(f);
    const long step = read_i64(f);
    std::map<std::string, Param> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint32_t name_len = read_u32(f);
      std::string name(name_len, '\0');
      f.read(name.data(), name_len);
      Param p;
      p.trainable = f.get() != 0;
      const std::uint32_t rank = read_u32(f);
      std::vector<int> shape(rank);
      for (auto& d : shape) d = int(read_u32(f));
      p.value = TensorT<T>::zeros(shape);
      p.grad = TensorT<T>::zeros(shape);
      p.m = TensorT<T>::zeros(shape);
      p.v = TensorT<T>::zeros(shape);
      read_raw(f, p.value);
      read_raw(f, p.m);
      read_raw(f, p.v);
      if (!f) throw data_error("truncated checkpoint: " + path);
      entries.emplace(std::move(name), std::move(p));
    }
    entries_ = std::move(entries);
    step_ = step;
  }

 private:
  static void write_u32(std::ofstream& f, std::uint32_t v) {
    char b[4] = {char(v), char(v >> 8), char(v >> 16), char(v >> 24)};
    f.write(b, 4);
  }
  static std::uint32_t read_u32(std::ifstream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
           std::uint32_t(b[3]) << 24;
  }
  static void write_i64(std::ofstream& f, long v) {
    std::uint64_t u = std::uint64_t(v);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = char(u >> (8 * i));
    f.write(b, 8);
  }
  static long read_i64(std::ifstream& f) {
    unsigned char b[8];
    f.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= std::uint64_t(b[i]) << (8 * i);
    return long(u);
  }
  static void write_raw(std::ofstream& f, const TensorT<T>& t) {
    f.write(reinterpret_cast<const char*>(t.ptr()),
            std::streamsize(t.numel() * sizeof(T)));
  }
  static void read_raw(std::ifstream& f, TensorT<T>& t) {
    f.read(reinterpret_cast<char*>(t.ptr()), std::streamsize(t.numel() * sizeof(T)));
  }

  std::map<std::string, Param> entries_;  // ordered: deterministic sweeps
  long step_ = 0;
};

using ParamStore = ParamStoreT<double>;

// Cosine-annealed learning rate, reaching ~0 at the final step.
inline double cosine_lr(double base_lr, long step, long total_steps) {
  if (total_steps <= 0) return base_lr;
  double t = std::min(1.0, double(step) / double(total_steps));
  return base_lr * 0.5 * (1.0 + std::cos(kPi * t));
}

}  // namespace bsh
