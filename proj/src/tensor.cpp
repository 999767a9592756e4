#include "nvs/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace nvs {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, Rng& rng, T stddev) {
  Tensor out(std::move(shape));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& x : out.data_) x = static_cast<T>(normal(rng)) * stddev;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::uniform(Shape shape, Rng& rng, T lo, T hi) {
  Tensor out(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& x : out.data_) x = static_cast<T>(dist(rng));
  return out;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor out(std::move(shape), data_);
  out.requires_grad_ = requires_grad_;
  return out;
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template class Tensor<float>;
template class Tensor<double>;

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
  Node node;
  node.requires_grad = value.requires_grad();
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  value.set_requires_grad(false);
  return leaf(std::move(value));
}

template <typename T>
Var<T> Tape<T>::param(Tensor<T> value) {
  value.set_requires_grad(true);
  return leaf(std::move(value));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
  return record(std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<Var<T>>& inputs, Backward backward) {
  Node node;
  for (const auto& in : inputs) {
    if (in.valid() && in.tape() != this) throw ShapeError("operand recorded on a different tape");
    if (in.valid() && tracks(in.id())) node.requires_grad = true;
  }
  value.set_requires_grad(node.requires_grad);
  node.value = std::move(value);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
std::size_t Tape<T>::backward(Var<T> root) {
  const auto& v = root.value();
  if (v.size() != 1) throw ShapeError("backward() needs a one-element root, got " + shape_str(v.shape()));
  return backward(root, Tensor<T>(v.shape(), T{1}));
}

template <typename T>
std::size_t Tape<T>::backward(Var<T> root, const Tensor<T>& seed) {
  if (root.tape() != this) throw ShapeError("backward root belongs to a different tape");
  if (seed.shape() != root.shape()) {
    throw ShapeError("backward seed " + shape_str(seed.shape()) + " vs root " + shape_str(root.shape()));
  }
  if (Tensor<T>* sink = grad_sink(root)) {
    for (std::size_t i = 0; i < seed.size(); ++i) (*sink)[i] += seed[i];
  }
  std::size_t visited = 0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.has_grad || !node.backward) continue;
    node.backward(node.grad);
    ++visited;
  }
  return visited;
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  const Node& node = nodes_[v.id()];
  if (node.has_grad) return node.grad;
  return Tensor<T>(node.value.shape());
}

template <typename T>
bool Tape<T>::has_grad(Var<T> v) const {
  return nodes_[v.id()].has_grad;
}

template <typename T>
Tensor<T>* Tape<T>::grad_sink(Var<T> v) {
  if (!v.valid()) return nullptr;
  Node& node = nodes_[v.id()];
  if (!node.requires_grad) return nullptr;
  if (!node.has_grad) {
    node.grad = Tensor<T>(node.value.shape());
    node.has_grad = true;
  }
  return &node.grad;
}

template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// ParamSet

template <typename T>
Tensor<T>& ParamSet<T>::add(std::string name, Tensor<T> value) {
  if (contains(name)) throw ShapeError("duplicate parameter '" + name + "'");
  items_.push_back({std::move(name), std::move(value)});
  return items_.back().value;
}

template <typename T>
Tensor<T>& ParamSet<T>::get(const std::string& name) {
  for (auto& item : items_) {
    if (item.name == name) return item.value;
  }
  throw ShapeError("unknown parameter '" + name + "'");
}

template <typename T>
const Tensor<T>& ParamSet<T>::get(const std::string& name) const {
  for (const auto& item : items_) {
    if (item.name == name) return item.value;
  }
  throw ShapeError("unknown parameter '" + name + "'");
}

template <typename T>
bool ParamSet<T>::contains(const std::string& name) const {
  return std::any_of(items_.begin(), items_.end(), [&](const auto& item) { return item.name == name; });
}

template <typename T>
std::size_t ParamSet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& item : items_) n += item.value.size();
  return n;
}

template class ParamSet<float>;
template class ParamSet<double>;

// ---------------------------------------------------------------------------
// Adam

template <typename T>
void adam_step(ParamSet<T>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state,
               const AdamOptions& options) {
  auto& items = params.items();
  if (grads.size() != items.size()) {
    throw ShapeError("adam: " + std::to_string(grads.size()) + " gradients for " + std::to_string(items.size()) +
                     " parameters");
  }
  if (state.m.empty() && state.v.empty()) {
    for (const auto& item : items) {
      state.m.emplace_back(item.value.shape());
      state.v.emplace_back(item.value.shape());
    }
  }
  if (state.m.size() != items.size() || state.v.size() != items.size()) {
    throw ShapeError("adam: optimizer state holds " + std::to_string(state.m.size()) + " moments for " +
                     std::to_string(items.size()) + " parameters");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(options.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(options.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < items.size(); ++i) {
    Tensor<T>& p = items[i].value;
    const Tensor<T>& g = grads[i];
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    if (g.shape() != p.shape() || m.shape() != p.shape() || v.shape() != p.shape()) {
      throw ShapeError("adam: shape drift on '" + items[i].name + "': param " + shape_str(p.shape()) + ", grad " +
                       shape_str(g.shape()) + ", moment " + shape_str(m.shape()));
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = options.beta1 * m[j] + (1.0 - options.beta1) * gj;
      const double vj = options.beta2 * v[j] + (1.0 - options.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = options.lr * (mj / bc1) / (std::sqrt(vj / bc2) + options.eps);
      p[j] = static_cast<T>(p[j] - update);
    }
  }
}

template void adam_step(ParamSet<float>&, const std::vector<Tensor<float>>&, AdamState<float>&, const AdamOptions&);
template void adam_step(ParamSet<double>&, const std::vector<Tensor<double>>&, AdamState<double>&,
                        const AdamOptions&);

// ---------------------------------------------------------------------------
// VFT1

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) throw DataError("VFT1: truncated stream");
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
}

}  // namespace

void write_vft(std::ostream& out, const Tensor<float>& tensor) {
  out.write("VFT1", 4);
  put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
  for (std::size_t d : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (float x : tensor.values()) put_u32(out, std::bit_cast<std::uint32_t>(x));
  if (!out) throw DataError("VFT1: write failed");
}

Tensor<float> read_vft(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "VFT1") throw DataError("VFT1: bad magic");
  const std::uint32_t rank = get_u32(in);
  if (rank > 16) throw DataError("VFT1: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get_u32(in);
  Tensor<float> out(shape);
  for (auto& x : out.values()) x = std::bit_cast<float>(get_u32(in));
  return out;
}

void save_vft(const std::string& path, const Tensor<float>& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  write_vft(out, tensor);
}

Tensor<float> load_vft(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return read_vft(in);
}

}  // namespace nvs
