#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "cotrack/matrix.hpp"
#include "cotrack/rng.hpp"

namespace cotrack {

/// One learnable tensor with its gradient accumulator and AdamW moments.
struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix m;  // first moment
  Matrix v;  // second moment
};

enum class Init { Zero, He, Xavier, Identity };

/// Flat registry of named parameters. Modules register tensors once and keep
/// integer handles; training code drives zero_grads / adamw_step; checkpoints
/// round-trip the whole store by name.
class ParamStore {
 public:
  int create(const std::string& name, int rows, int cols, Init init, Rng& rng,
             double gain = 1.0) {
    if (index_.count(name))
      throw std::invalid_argument("ParamStore: duplicate parameter " + name);
    Param p;
    p.name = name;
    p.value = Matrix(rows, cols);
    p.grad = Matrix(rows, cols);
    p.m = Matrix(rows, cols);
    p.v = Matrix(rows, cols);
    switch (init) {
      case Init::Zero:
        break;
      case Init::He: {
        const double s = gain * std::sqrt(2.0 / cols);
        for (double& x : p.value.data) x = s * rng.normal();
        break;
      }
      case Init::Xavier: {
        const double s = gain * std::sqrt(1.0 / cols);
        for (double& x : p.value.data) x = s * rng.normal();
        break;
      }
      case Init::Identity: {
        for (int i = 0; i < std::min(rows, cols); ++i) p.value.at(i, i) = gain;
        break;
      }
    }
    params_.push_back(std::move(p));
    index_[name] = static_cast<int>(params_.size()) - 1;
    return static_cast<int>(params_.size()) - 1;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  int handle(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::invalid_argument("ParamStore: unknown parameter " + name);
    return it->second;
  }

  Param& at(int h) { return params_[h]; }
  const Param& at(int h) const { return params_[h]; }
  Param& at(const std::string& name) { return params_[handle(name)]; }

  const Matrix& value(int h) const { return params_[h].value; }
  Matrix& grad(int h) { return params_[h].grad; }

  size_t count() const { return params_.size(); }
  const std::vector<Param>& all() const { return params_; }
  std::vector<Param>& all() { return params_; }

  int64_t step_count() const { return step_; }
  void set_step_count(int64_t s) { step_ = s; }

  void zero_grads() {
    for (Param& p : params_)
      std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
  }

  size_t scalar_count() const {
    size_t n = 0;
    for (const Param& p : params_) n += p.value.size();
    return n;
  }

  /// Decoupled-weight-decay Adam update over every registered tensor.
  /// Prefixes in `skip_prefix` are left untouched (freeze support).
  void adamw_step(double lr, double weight_decay, double beta1 = 0.9,
                  double beta2 = 0.999, double eps = 1e-8,
                  const std::vector<std::string>& skip_prefix = {}) {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
    for (Param& p : params_) {
      bool frozen = false;
      for (const std::string& s : skip_prefix)
        if (p.name.rfind(s, 0) == 0) {
          frozen = true;
          break;
        }
      if (frozen) continue;
      for (size_t i = 0; i < p.value.data.size(); ++i) {
        const double g = p.grad.data[i];
        p.m.data[i] = beta1 * p.m.data[i] + (1.0 - beta1) * g;
        p.v.data[i] = beta2 * p.v.data[i] + (1.0 - beta2) * g * g;
        const double mhat = p.m.data[i] / bc1;
        const double vhat = p.v.data[i] / bc2;
        p.value.data[i] -= lr * weight_decay * p.value.data[i];
        p.value.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

  // ---- checkpoint format ----
  // magic "CTCK", u32 version, u64 step, u32 record count, then per record:
  // u32 name length, name bytes, u32 rows, u32 cols, rows*cols f64 (LE),
  // repeated for value / m / v planes.

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint for write: " + path);
    f.write("CTCK", 4);
    write_u32(f, kVersion);
    write_u64(f, static_cast<uint64_t>(step_));
    write_u32(f, static_cast<uint32_t>(params_.size()));
    for (const Param& p : params_) {
      write_u32(f, static_cast<uint32_t>(p.name.size()));
      f.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      write_u32(f, static_cast<uint32_t>(p.value.rows));
      write_u32(f, static_cast<uint32_t>(p.value.cols));
      write_doubles(f, p.value.data);
      write_doubles(f, p.m.data);
      write_doubles(f, p.v.data);
    }
    if (!f) throw std::runtime_error("checkpoint write failed: " + path);
  }

  /// Loads records into this store. Parameters must already be registered
  /// with matching shapes; unknown names in the file are an error.
  void load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "CTCK", 4) != 0)
      throw std::runtime_error("bad checkpoint magic: " + path);
    const uint32_t version = read_u32(f);
    if (version != kVersion)
      throw std::runtime_error("unsupported checkpoint version in " + path);
    step_ = static_cast<int64_t>(read_u64(f));
    const uint32_t n = read_u32(f);
    for (uint32_t i = 0; i < n; ++i) {
      const uint32_t len = read_u32(f);
      std::string name(len, '\0');
      f.read(name.data(), len);
      const uint32_t rows = read_u32(f);
      const uint32_t cols = read_u32(f);
      Param& p = at(name);
      if (p.value.rows != static_cast<int>(rows) ||
          p.value.cols != static_cast<int>(cols))
        throw std::runtime_error("checkpoint shape mismatch for " + name);
      read_doubles(f, p.value.data);
      read_doubles(f, p.m.data);
      read_doubles(f, p.v.data);
    }
    if (!f) throw std::runtime_error("checkpoint truncated: " + path);
  }

  /// Load only records whose name starts with `prefix` (ignoring the rest of
  /// the file). Used to pull stage-1 agent weights into the combined store.
  void load_prefix(const std::string& path, const std::string& prefix) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "CTCK", 4) != 0)
      throw std::runtime_error("bad checkpoint magic: " + path);
    if (read_u32(f) != kVersion)
      throw std::runtime_error("unsupported checkpoint version in " + path);
    read_u64(f);  // step ignored
    const uint32_t n = read_u32(f);
    for (uint32_t i = 0; i < n; ++i) {
      const uint32_t len = read_u32(f);
      std::string name(len, '\0');
      f.read(name.data(), len);
      const uint32_t rows = read_u32(f);
      const uint32_t cols = read_u32(f);
      const size_t numel = static_cast<size_t>(rows) * cols;
      if (name.rfind(prefix, 0) == 0) {
        Param& p = at(name);
        if (p.value.rows != static_cast<int>(rows) ||
            p.value.cols != static_cast<int>(cols))
          throw std::runtime_error("checkpoint shape mismatch for " + name);
        read_doubles(f, p.value.data);
        read_doubles(f, p.m.data);
        read_doubles(f, p.v.data);
      } else {
        f.seekg(static_cast<std::streamoff>(3 * numel * sizeof(double)),
                std::ios::cur);
      }
    }
    if (!f) throw std::runtime_error("checkpoint truncated: " + path);
  }

 private:
  static constexpr uint32_t kVersion = 1;

  static void write_u32(std::ofstream& f, uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  static void write_u64(std::ofstream& f, uint64_t v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  static void write_doubles(std::ofstream& f, const std::vector<double>& d) {
    f.write(reinterpret_cast<const char*>(d.data()),
            static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  static uint32_t read_u32(std::ifstream& f) {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
  }
  static uint64_t read_u64(std::ifstream& f) {
    uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
  }
  static void read_doubles(std::ifstream& f, std::vector<double>& d) {
    f.read(reinterpret_cast<char*>(d.data()),
           static_cast<std::streamsize>(d.size() * sizeof(double)));
  }

  std::vector<Param> params_;
  std::unordered_map<std::string, int> index_;
  int64_t step_ = 0;
};

/// Half-cosine decay from base_lr at step 0 to 0 at step == total.
inline double cosine_lr(int64_t step, int64_t total, double base_lr) {
  if (total <= 0) throw std::invalid_argument("cosine_lr: total must be > 0");
  if (step < 0 || step > total)
    throw std::invalid_argument("cosine_lr: step out of range");
  return base_lr * 0.5 *
         (1.0 + std::cos(M_PI * static_cast<double>(step) /
                         static_cast<double>(total)));
}

}  // namespace cotrack
