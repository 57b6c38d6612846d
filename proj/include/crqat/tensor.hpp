#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace crqat {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation meets a NaN/Inf it cannot continue with.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// One vertex of the reverse-mode tape. `backward` reads `grad` and
/// accumulates into the inputs' gradient buffers.
struct GraphNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<GraphNode>> inputs;
  std::function<void(GraphNode&)> backward;

  /// Gradient accumulator of this node, or nullptr when no gradient is wanted.
  double* grad_data() {
    if (!requires_grad) return nullptr;
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad.data();
  }
  double* input_grad(std::size_t i) { return inputs[i]->grad_data(); }
  const std::vector<double>& input_value(std::size_t i) const { return inputs[i]->value; }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables tape recording for its lifetime (teacher forwards, calibration).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major array of doubles with an optional gradient and tape link.
/// Copies share the underlying node; use `detach()` for an independent leaf.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<GraphNode>()) {
    node_->value.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<GraphNode>()) {
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                       shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
  }

  explicit Tensor(std::shared_ptr<GraphNode> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  /// Direct write access; only meaningful on leaves (optimizer updates, test setup).
  std::span<double> values_mut() { return node_->value; }
  const std::vector<double>& vec() const { return node_->value; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> grad_mut() {
    node_->grad_data();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Independent leaf holding a copy of the values.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  void backward() const {
    if (size() != 1) throw ShapeError("backward() without seed needs a scalar, got " + shape_str(shape()));
    std::vector<double> seed{1.0};
    backward(seed);
  }

  void backward(std::span<const double> seed) const;

  GraphNode& node() const { return *node_; }
  const std::shared_ptr<GraphNode>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<GraphNode> node_;
};

inline void Tensor::backward(std::span<const double> seed) const {
  if (seed.size() != size()) throw ShapeError("backward seed size mismatch");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order of the reachable subgraph.
  std::vector<GraphNode*> order;
  std::unordered_set<GraphNode*> seen;
  std::vector<std::pair<GraphNode*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      GraphNode* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  double* g = node_->grad_data();
  for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    GraphNode* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

/// Custom-gradient hook: builds an output node from precomputed forward values.
/// `backward` is recorded only when grad mode is on and some input wants a gradient.
inline Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                      std::function<void(GraphNode&)> backward) {
  auto node = std::make_shared<GraphNode>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  if (node->value.size() != shape_numel(node->shape)) throw ShapeError("make_op: value/shape mismatch");
  bool wants = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) wants = wants || t.requires_grad();
  }
  if (wants) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

inline void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite value");
  }
}

/// Deterministic random source. Draw helpers are written out so sequences do not
/// depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// splitmix64 finalizer; derives independent child seeds from (base, stream).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace crqat
