#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nvs/error.hpp"

namespace nvs {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array. Instantiated for float (training) and double
/// (gradient verification).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> data);

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }
  static Tensor randn(Shape shape, Rng& rng, T stddev = T{1});
  static Tensor uniform(Shape shape, Rng& rng, T lo, T hi);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// The single element of a one-element tensor.
  T item() const;

  Tensor reshape(Shape shape) const;
  void fill(T value);

  bool requires_grad() const noexcept { return requires_grad_; }
  Tensor& set_requires_grad(bool on) noexcept {
    requires_grad_ = on;
    return *this;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    out.set_requires_grad(requires_grad_);
    return out;
  }

  bool operator==(const Tensor& other) const { return shape_ == other.shape_ && data_ == other.data_; }

 private:
  Shape shape_;
  std::vector<T> data_;
  bool requires_grad_ = false;
};

template <typename T>
class Tape;

/// Handle to a node recorded on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape<T>* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order; backward
/// walks them in reverse, each node at most once. One tape per worker.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers an input. Gradients are tracked iff value.requires_grad().
  Var<T> leaf(Tensor<T> value);
  Var<T> constant(Tensor<T> value);
  Var<T> param(Tensor<T> value);

  /// Records the result of a primitive. The backward closure is kept only
  /// if one of the inputs tracks gradients.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward);
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, Backward backward);

  /// Seeds d(root)/d(root) = 1 (root must hold one element) and propagates.
  /// Returns the number of backward closures executed.
  std::size_t backward(Var<T> root);
  std::size_t backward(Var<T> root, const Tensor<T>& seed);

  /// Gradient accumulated for v; zeros of v's shape when none reached it.
  Tensor<T> grad(Var<T> v) const;
  bool has_grad(Var<T> v) const;

  /// Accumulation target used by backward closures. Returns nullptr when v
  /// does not track gradients.
  Tensor<T>* grad_sink(Var<T> v);

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool tracks(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->tracks(id_);
}

// ---------------------------------------------------------------------------
// Differentiable primitives. Binary elementwise operations broadcast under
// trailing-dimension alignment: extents are compared from the last axis and
// must be equal or 1.

namespace ops {

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);
template <typename T> Var<T> add_scalar(Var<T> a, T offset);
template <typename T> Var<T> sqrt(Var<T> a);
template <typename T> Var<T> silu(Var<T> a);

template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
/// mean((a - b)^2)
template <typename T> Var<T> mse(Var<T> a, Var<T> b);

/// [M,K] x [K,N] -> [M,N]
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);

/// Same-padded stride-1 convolution with an odd square kernel.
/// x: [C,H,W] or [B,C,H,W]; kernel: [O,C,k,k]; bias: [O] or invalid Var.
template <typename T> Var<T> conv2d(Var<T> x, Var<T> kernel, Var<T> bias = {});

/// Scaled dot-product attention softmax(q k^T / sqrt(D)) v.
/// q: [G,Lq,D] k: [G,Lk,D] v: [G,Lk,Dv]; rank-2 inputs are a single group.
template <typename T> Var<T> attention(Var<T> q, Var<T> k, Var<T> v);

template <typename T> Var<T> reshape(Var<T> a, Shape shape);
template <typename T> Var<T> permute(Var<T> a, const std::vector<std::size_t>& axes);
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
/// Rows [begin, end) along axis 0.
template <typename T> Var<T> slice0(Var<T> a, std::size_t begin, std::size_t end);

/// 2x2 average pooling over the two trailing axes.
template <typename T> Var<T> avg_pool2(Var<T> x);
/// 2x nearest-neighbour upsampling over the two trailing axes.
template <typename T> Var<T> upsample2(Var<T> x);

}  // namespace ops

// ---------------------------------------------------------------------------
// Parameters and optimisation.

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

/// Ordered, named parameter collection. Order is the serialisation order.
template <typename T>
class ParamSet {
 public:
  Tensor<T>& add(std::string name, Tensor<T> value);
  Tensor<T>& get(const std::string& name);
  const Tensor<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t size() const noexcept { return items_.size(); }
  std::size_t parameter_count() const;
  std::vector<NamedTensor<T>>& items() noexcept { return items_; }
  const std::vector<NamedTensor<T>>& items() const noexcept { return items_; }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& item : items_) out.add(item.name, item.value.template cast<U>());
    return out;
  }

 private:
  std::vector<NamedTensor<T>> items_;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::int64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

/// One bias-corrected Adam update. Moments are created on first use;
/// afterwards their shapes must match the parameters.
template <typename T>
void adam_step(ParamSet<T>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state,
               const AdamOptions& options);

// ---------------------------------------------------------------------------
// VFT1 binary tensor files: "VFT1", u32 rank, u32 extents, f32 payload,
// all little-endian.

void write_vft(std::ostream& out, const Tensor<float>& tensor);
Tensor<float> read_vft(std::istream& in);
void save_vft(const std::string& path, const Tensor<float>& tensor);
Tensor<float> load_vft(const std::string& path);

}  // namespace nvs
