#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sda {

inline std::string shape_str(const std::vector<std::size_t>& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << 'x';
    os << dims[i];
  }
  os << ']';
  return os.str();
}

// Dense n-d value grid with optional gradient storage. Handles share the
// underlying buffer; clone() makes a deep copy.
template <class T>
class TensorT {
 public:
  struct Data {
    std::vector<std::size_t> dims;
    std::vector<T> values;
    std::vector<T> grad;  // allocated lazily, same length as values
    bool requires_grad = false;
  };

  TensorT() = default;

  explicit TensorT(std::vector<std::size_t> dims, T fill = T(0))
      : d_(std::make_shared<Data>()) {
    d_->dims = std::move(dims);
    d_->values.assign(count(d_->dims), fill);
  }

  static TensorT scalar(T v) {
    TensorT t(std::vector<std::size_t>{});
    t.d_->values[0] = v;
    return t;
  }

  static TensorT from(std::vector<std::size_t> dims, std::vector<T> values) {
    if (count(dims) != values.size())
      throw std::invalid_argument("tensor: " + shape_str(dims) + " needs " +
                                  std::to_string(count(dims)) + " values, got " +
                                  std::to_string(values.size()));
    TensorT t;
    t.d_ = std::make_shared<Data>();
    t.d_->dims = std::move(dims);
    t.d_->values = std::move(values);
    return t;
  }

  bool defined() const { return d_ != nullptr; }

  const std::vector<std::size_t>& shape() const { return d_->dims; }
  std::size_t ndim() const { return d_->dims.size(); }
  std::size_t dim(std::size_t i) const { return d_->dims.at(i); }
  std::size_t size() const { return d_->values.size(); }

  std::vector<T>& values() { return d_->values; }
  const std::vector<T>& values() const { return d_->values; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool b) { d_->requires_grad = b; }

  bool grad_allocated() const { return !d_->grad.empty(); }
  std::vector<T>& grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), T(0));
    return d_->grad;
  }
  const std::vector<T>& grad() const { return d_->grad; }
  void clear_grad() { d_->grad.clear(); }

  T item() const {
    if (size() != 1)
      throw std::invalid_argument("item(): tensor has " + std::to_string(size()) +
                                  " elements, expected 1");
    return d_->values[0];
  }

  // 4-d image accessors, layout [N,C,H,W] row-major.
  std::size_t index4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const auto& s = d_->dims;
    return ((n * s[1] + c) * s[2] + h) * s[3] + w;
  }
  T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return d_->values[index4(n, c, h, w)];
  }
  T at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return d_->values[index4(n, c, h, w)];
  }

  bool all_finite() const {
    for (T v : d_->values)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  TensorT clone() const {
    TensorT t;
    t.d_ = std::make_shared<Data>();
    t.d_->dims = d_->dims;
    t.d_->values = d_->values;
    return t;
  }

  // Identity of the underlying buffer; used by tests for aliasing checks.
  const void* data_id() const { return d_.get(); }

 private:
  static std::size_t count(const std::vector<std::size_t>& dims) {
    std::size_t n = 1;
    for (std::size_t d : dims) n *= d;
    return n;
  }

  std::shared_ptr<Data> d_;
};

using Tensor = TensorT<float>;

// Integer grid for class labels, layout [N,H,W].
struct IntTensor {
  std::vector<std::size_t> dims;
  std::vector<std::int32_t> values;

  IntTensor() = default;
  explicit IntTensor(std::vector<std::size_t> d, std::int32_t fill = 0) : dims(std::move(d)) {
    std::size_t n = 1;
    for (std::size_t x : dims) n *= x;
    values.assign(n, fill);
  }
  std::size_t size() const { return values.size(); }
};

// Tape of executed operations. Ops append their backward rules in execution
// order; backward() replays them in reverse, accumulating into leaf grads.
template <class T>
class GraphT {
 public:
  explicit GraphT(bool recording = true) : recording_(recording) {}

  GraphT(const GraphT&) = delete;
  GraphT& operator=(const GraphT&) = delete;

  bool recording() const { return recording_; }
  std::size_t node_count() const { return nodes_.size(); }

  void record(std::function<void()> fn) {
    if (recording_) nodes_.push_back(std::move(fn));
  }

  void backward(TensorT<T>& loss) {
    if (loss.size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " +
                                  shape_str(loss.shape()));
    if (nodes_.empty())
      throw std::runtime_error("backward: empty graph");
    if (!loss.requires_grad())
      throw std::runtime_error("backward: loss is detached from the graph");
    loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
  bool recording_;
};

using Graph = GraphT<float>;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Seeded RNG stream; derive() forks an independent stream for a sub-task so
// generation order elsewhere cannot perturb it.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), eng_(static_cast<unsigned long>(splitmix64(seed))) {}

  Rng derive(std::uint64_t salt) const { return Rng(splitmix64(seed_ ^ (salt * 0x9e3779b97f4a7c15ull))); }

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> d(mean, stddev);
    return d(eng_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(eng_);
  }
  std::uint64_t integer(std::uint64_t n) {  // in [0, n)
    std::uniform_int_distribution<std::uint64_t> d(0, n - 1);
    return d(eng_);
  }
  std::mt19937_64& engine() { return eng_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 eng_;
};

template <class T>
TensorT<T> randn(std::vector<std::size_t> dims, Rng& rng, double stddev = 1.0) {
  TensorT<T> t(std::move(dims));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

}  // namespace sda
