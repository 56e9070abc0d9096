#include "nemf/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "nemf/error.hpp"
#include "nemf/parallel.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace nemf {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t sequence = 0;
  std::string_view op = "leaf";
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

namespace {
std::atomic<std::uint64_t> g_sequence{1};
}  // namespace

}  // namespace detail

namespace {

int g_threads = 1;

[[noreturn]] void shape_error(std::string_view op, const Shape& a, const Shape& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << shape_str(a) << " and " << shape_str(b);
  throw Error(ErrorCode::kShape, os.str());
}

[[noreturn]] void shape_error(std::string_view op, const Shape& a, std::string_view what) {
  std::ostringstream os;
  os << op << ": " << what << " (got " << shape_str(a) << ")";
  throw Error(ErrorCode::kShape, os.str());
}

void require_defined(const Tensor& t, std::string_view op) {
  if (!t.defined()) throw Error(ErrorCode::kInvalidArgument, std::string(op) + ": undefined tensor");
}

// Number of times `b` repeats inside `a`, or 0 if not broadcast-compatible.
std::size_t broadcast_repeats(const Shape& a, const Shape& b) {
  const std::size_t na = shape_numel(a);
  const std::size_t nb = shape_numel(b);
  if (a == b) return 1;
  if (nb == 1) return na;
  if (b.size() < a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin())) return na / nb;
  return 0;
}

std::size_t last_extent(const Tensor& a) { return a.shape().back(); }

template <typename Fn>
Tensor unary(std::string_view name, const Tensor& a, Fn forward,
             std::function<double(double x, double y)> derivative) {
  require_defined(a, name);
  const auto in = a.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
  return record_op(name, a.shape(), std::move(out), {a},
                   [a, derivative](std::span<const double> y, std::span<const double> g) {
                     auto ga = grad_sink(a);
                     if (ga.empty()) return;
                     const auto x = a.values();
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * derivative(x[i], y[i]);
                   });
}

}  // namespace

void set_num_threads(int threads) { g_threads = std::max(1, threads); }
int num_threads() { return g_threads; }

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_values(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape.empty()) shape = {1};
  for (auto e : shape) {
    if (e == 0) shape_error("tensor", shape, "extents must be positive");
  }
  if (shape_numel(shape) != values.size()) {
    std::ostringstream os;
    os << "tensor: shape " << shape_str(shape) << " needs " << shape_numel(shape) << " values, got "
       << values.size();
    throw Error(ErrorCode::kShape, os.str());
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->sequence = detail::g_sequence.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_values({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  static const Shape kEmpty;
  return node_ ? node_->shape : kEmpty;
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= rank()) shape_error("extent", shape(), "axis out of range");
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->value.size() : 0; }

std::span<const double> Tensor::values() const& {
  return node_ ? std::span<const double>(node_->value) : std::span<const double>();
}

std::vector<double> Tensor::to_vector() const {
  const auto v = values();
  return {v.begin(), v.end()};
}

std::span<double> Tensor::mutable_values() {
  return node_ ? std::span<double>(node_->value) : std::span<double>();
}

double Tensor::item() const {
  if (numel() != 1) shape_error("item", shape(), "tensor must hold exactly one element");
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!node_) return;
  if (!is_leaf()) throw Error(ErrorCode::kInvalidArgument, "set_requires_grad: only leaves can be toggled");
  node_->requires_grad = on;
}

bool Tensor::is_leaf() const { return node_ && !node_->backward; }

std::span<const double> Tensor::grad() const& {
  return node_ ? std::span<const double>(node_->grad) : std::span<const double>();
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
  require_defined(*this, "detach");
  return from_values(node_->shape, node_->value, false);
}

std::string_view Tensor::op_name() const { return node_ ? node_->op : std::string_view("undefined"); }

Tensor record_op(std::string_view name, Shape shape, std::vector<double> values,
                 std::vector<Tensor> inputs, BackwardFn fn) {
  Tensor out = Tensor::from_values(std::move(shape), std::move(values), false);
  const bool needs_grad =
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  out.node_->op = name;
  if (needs_grad) {
    out.node_->requires_grad = true;
    out.node_->inputs = std::move(inputs);
    out.node_->backward = std::move(fn);
  }
  return out;
}

std::span<double> grad_sink(const Tensor& t) {
  if (!t.requires_grad()) return {};
  auto& node = *t.node_;
  if (node.grad.size() != node.value.size()) node.grad.assign(node.value.size(), 0.0);
  return node.grad;
}

void backward(const Tensor& root) {
  require_defined(root, "backward");
  if (root.numel() != 1) shape_error("backward", root.shape(), "root must be a scalar");
  if (!root.requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{root.node_.get()};
  while (!stack.empty()) {
    auto* node = stack.back();
    stack.pop_back();
    if (!seen.insert(node).second) continue;
    if (!node->backward) continue;
    order.push_back(node);
    for (auto& in : node->inputs) {
      if (in.requires_grad()) stack.push_back(in.node_.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->sequence > b->sequence; });
  for (auto* node : order) node->grad.assign(node->value.size(), 0.0);
  if (root.is_leaf()) {
    grad_sink(root)[0] += 1.0;
    return;
  }
  root.node_->grad[0] = 1.0;
  for (auto* node : order) node->backward(node->value, node->grad);
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  if (broadcast_repeats(a.shape(), b.shape()) == 0) shape_error("add", a.shape(), b.shape());
  const auto va = a.values();
  const auto vb = b.values();
  const std::size_t inner = vb.size();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] + vb[i % inner];
  return record_op("add", a.shape(), std::move(out), {a, b},
                   [a, b](std::span<const double>, std::span<const double> g) {
                     if (auto ga = grad_sink(a); !ga.empty()) {
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                     }
                     if (auto gb = grad_sink(b); !gb.empty()) {
                       for (std::size_t i = 0; i < g.size(); ++i) gb[i % gb.size()] += g[i];
                     }
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  if (broadcast_repeats(a.shape(), b.shape()) == 0) shape_error("sub", a.shape(), b.shape());
  const auto va = a.values();
  const auto vb = b.values();
  const std::size_t inner = vb.size();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] - vb[i % inner];
  return record_op("sub", a.shape(), std::move(out), {a, b},
                   [a, b](std::span<const double>, std::span<const double> g) {
                     if (auto ga = grad_sink(a); !ga.empty()) {
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                     }
                     if (auto gb = grad_sink(b); !gb.empty()) {
                       for (std::size_t i = 0; i < g.size(); ++i) gb[i % gb.size()] -= g[i];
                     }
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  if (broadcast_repeats(a.shape(), b.shape()) == 0) shape_error("mul", a.shape(), b.shape());
  const auto va = a.values();
  const auto vb = b.values();
  const std::size_t inner = vb.size();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] * vb[i % inner];
  return record_op("mul", a.shape(), std::move(out), {a, b},
                   [a, b](std::span<const double>, std::span<const double> g) {
                     const auto va = a.values();
                     const auto vb = b.values();
                     const std::size_t inner = vb.size();
                     if (auto ga = grad_sink(a); !ga.empty()) {
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i % inner];
                     }
                     if (auto gb = grad_sink(b); !gb.empty()) {
                       for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i] * va[i];
                     }
                   });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor shift(const Tensor& a, double offset) {
  return unary(
      "shift", a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    shape_error("matmul", a.shape(), b.shape());
  }
  const std::size_t m = a.extent(0);
  const std::size_t k = a.extent(1);
  const std::size_t n = b.extent(1);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  std::vector<double> out(m * n, 0.0);
  double* po = out.data();
  // Each output row depends only on its own input row and a fixed k order,
  // so row results are independent of m and of the thread split.
#pragma omp parallel for schedule(static) num_threads(g_threads) if (m * k * n > 65536)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    double* row = po + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      const double* brow = pb + kk * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return record_op("matmul", {m, n}, std::move(out), {a, b},
                   [a, b, m, k, n](std::span<const double>, std::span<const double> g) {
                     const double* pa = a.values().data();
                     const double* pb = b.values().data();
                     const double* pg = g.data();
                     if (auto ga = grad_sink(a); !ga.empty()) {
                       double* pga = ga.data();
#pragma omp parallel for schedule(static) num_threads(g_threads) if (m * k * n > 65536)
                       for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
                         for (std::size_t kk = 0; kk < k; ++kk) {
                           const double* brow = pb + kk * n;
                           const double* grow = pg + i * n;
                           double acc = 0.0;
                           for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                           pga[i * k + kk] += acc;
                         }
                       }
                     }
                     if (auto gb = grad_sink(b); !gb.empty()) {
                       double* pgb = gb.data();
#pragma omp parallel for schedule(static) num_threads(g_threads) if (m * k * n > 65536)
                       for (std::ptrdiff_t kk = 0; kk < static_cast<std::ptrdiff_t>(k); ++kk) {
                         double* out_row = pgb + kk * n;
                         for (std::size_t i = 0; i < m; ++i) {
                           const double av = pa[i * k + kk];
                           const double* grow = pg + i * n;
                           for (std::size_t j = 0; j < n; ++j) out_row[j] += av * grow[j];
                         }
                       }
                     }
                   });
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  if (a.rank() != 2) shape_error("transpose", a.shape(), "expected a matrix");
  const std::size_t m = a.extent(0);
  const std::size_t n = a.extent(1);
  const auto va = a.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = va[i * n + j];
  return record_op("transpose", {n, m}, std::move(out), {a},
                   [a, m, n](std::span<const double>, std::span<const double> g) {
                     auto ga = grad_sink(a);
                     if (ga.empty()) return;
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
                   });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
  std::vector<double> out(a.values().begin(), a.values().end());
  return record_op("reshape", std::move(shape), std::move(out), {a},
                   [a](std::span<const double>, std::span<const double> g) {
                     auto ga = grad_sink(a);
                     if (ga.empty()) return;
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                   });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor sin(const Tensor& a) {
  return unary(
      "sin", a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Tensor cos(const Tensor& a) {
  return unary(
      "cos", a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      "log", a, [](double x) { return std::log(std::max(x, kLogEpsilon)); },
      [](double x, double) { return x > kLogEpsilon ? 1.0 / x : 0.0; });
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double total = 0.0;
  for (double v : a.values()) total += v;
  return record_op("sum", {1}, {total}, {a}, [a](std::span<const double>, std::span<const double> g) {
    auto ga = grad_sink(a);
    for (auto& v : ga) v += g[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_last(const Tensor& a) {
  require_defined(a, "sum_last");
  const std::size_t inner = last_extent(a);
  const std::size_t outer = a.numel() / inner;
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  if (shape.empty()) shape = {1};
  const auto va = a.values();
  std::vector<double> out(outer, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o] += va[o * inner + i];
  return record_op("sum_last", std::move(shape), std::move(out), {a},
                   [a, inner, outer](std::span<const double>, std::span<const double> g) {
                     auto ga = grad_sink(a);
                     if (ga.empty()) return;
                     for (std::size_t o = 0; o < outer; ++o)
                       for (std::size_t i = 0; i < inner; ++i) ga[o * inner + i] += g[o];
                   });
}

Tensor mean_last(const Tensor& a) {
  require_defined(a, "mean_last");
  return scale(sum_last(a), 1.0 / static_cast<double>(last_extent(a)));
}

Tensor softmax(const Tensor& a) {
  require_defined(a, "softmax");
  const std::size_t inner = last_extent(a);
  const std::size_t outer = a.numel() / inner;
  const auto va = a.values();
  std::vector<double> out(va.size());
  for (std::size_t o = 0; o < outer; ++o) {
    const double* x = va.data() + o * inner;
    double* y = out.data() + o * inner;
    const double peak = *std::max_element(x, x + inner);
    double total = 0.0;
    for (std::size_t i = 0; i < inner; ++i) total += (y[i] = std::exp(x[i] - peak));
    for (std::size_t i = 0; i < inner; ++i) y[i] /= total;
  }
  return record_op("softmax", a.shape(), std::move(out), {a},
                   [a, inner, outer](std::span<const double> y, std::span<const double> g) {
                     auto ga = grad_sink(a);
                     if (ga.empty()) return;
                     for (std::size_t o = 0; o < outer; ++o) {
                       const std::size_t base = o * inner;
                       double dot = 0.0;
                       for (std::size_t i = 0; i < inner; ++i) dot += g[base + i] * y[base + i];
                       for (std::size_t i = 0; i < inner; ++i)
                         ga[base + i] += y[base + i] * (g[base + i] - dot);
                     }
                   });
}

Tensor log_softmax(const Tensor& a) {
  require_defined(a, "log_softmax");
  const std::size_t inner = last_extent(a);
  const std::size_t outer = a.numel() / inner;
  const auto va = a.values();
  std::vector<double> out(va.size());
  for (std::size_t o = 0; o < outer; ++o) {
    const double* x = va.data() + o * inner;
    double* y = out.data() + o * inner;
    const double peak = *std::max_element(x, x + inner);
    double total = 0.0;
    for (std::size_t i = 0; i < inner; ++i) total += std::exp(x[i] - peak);
    const double lse = peak + std::log(total);
    for (std::size_t i = 0; i < inner; ++i) y[i] = x[i] - lse;
  }
  return record_op("log_softmax", a.shape(), std::move(out), {a},
                   [a, inner, outer](std::span<const double> y, std::span<const double> g) {
                     auto ga = grad_sink(a);
                     if (ga.empty()) return;
                     for (std::size_t o = 0; o < outer; ++o) {
                       const std::size_t base = o * inner;
                       double total = 0.0;
                       for (std::size_t i = 0; i < inner; ++i) total += g[base + i];
                       for (std::size_t i = 0; i < inner; ++i)
                         ga[base + i] += g[base + i] - std::exp(y[base + i]) * total;
                     }
                   });
}

Tensor gather(const Tensor& a, std::span<const std::size_t> indices) {
  require_defined(a, "gather");
  if (indices.empty()) shape_error("gather", a.shape(), "no indices given");
  const auto va = a.values();
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= va.size()) {
      std::ostringstream os;
      os << "index " << indices[i] << " out of range";
      shape_error("gather", a.shape(), os.str());
    }
    out[i] = va[indices[i]];
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const std::size_t n = idx.size();
  return record_op("gather", {n}, std::move(out), {a},
                   [a, idx = std::move(idx)](std::span<const double>, std::span<const double> g) {
                     auto ga = grad_sink(a);
                     if (ga.empty()) return;
                     for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += g[i];
                   });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw Error(ErrorCode::kInvalidArgument, "concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) shape_error("concat", ref, "axis out of range");
  Shape shape = ref;
  shape[axis] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != ref.size()) shape_error("concat", ref, probe);
    for (std::size_t d = 0; d < ref.size(); ++d) {
      if (d != axis && probe[d] != ref[d]) shape_error("concat", ref, probe);
    }
    shape[axis] += probe[axis];
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  const std::size_t out_stride = shape[axis] * inner;

  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.extent(axis) * inner;
    const auto vp = p.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(vp.data() + o * chunk, chunk, out.data() + o * out_stride + offset);
    offset += chunk;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  auto captured = inputs;
  return record_op("concat", std::move(shape), std::move(out), std::move(inputs),
                   [captured, offsets, outer, inner, out_stride, axis](std::span<const double>,
                                                                      std::span<const double> g) {
                     for (std::size_t p = 0; p < captured.size(); ++p) {
                       auto gp = grad_sink(captured[p]);
                       if (gp.empty()) continue;
                       const std::size_t chunk = captured[p].extent(axis) * inner;
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t i = 0; i < chunk; ++i)
                           gp[o * chunk + i] += g[o * out_stride + offsets[p] + i];
                     }
                   });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  require_defined(a, "slice");
  if (axis >= a.rank() || length == 0 || start + length > a.extent(axis)) {
    shape_error("slice", a.shape(), "range out of bounds");
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.extent(d);
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.extent(d);
  const std::size_t in_stride = a.extent(axis) * inner;
  const std::size_t chunk = length * inner;
  const std::size_t begin = start * inner;
  Shape shape = a.shape();
  shape[axis] = length;
  const auto va = a.values();
  std::vector<double> out(outer * chunk);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(va.data() + o * in_stride + begin, chunk, out.data() + o * chunk);
  return record_op("slice", std::move(shape), std::move(out), {a},
                   [a, outer, chunk, in_stride, begin](std::span<const double>,
                                                       std::span<const double> g) {
                     auto ga = grad_sink(a);
                     if (ga.empty()) return;
                     for (std::size_t o = 0; o < outer; ++o)
                       for (std::size_t i = 0; i < chunk; ++i) ga[o * in_stride + begin + i] += g[o * chunk + i];
                   });
}

Tensor repeat_axis(const Tensor& a, std::size_t axis, std::size_t count) {
  require_defined(a, "repeat_axis");
  if (axis > a.rank() || count == 0) shape_error("repeat_axis", a.shape(), "bad axis or count");
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.extent(d);
  const std::size_t inner = a.numel() / outer;
  Shape shape = a.shape();
  shape.insert(shape.begin() + static_cast<std::ptrdiff_t>(axis), count);
  const auto va = a.values();
  std::vector<double> out(outer * count * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < count; ++c)
      std::copy_n(va.data() + o * inner, inner, out.data() + (o * count + c) * inner);
  return record_op("repeat_axis", std::move(shape), std::move(out), {a},
                   [a, outer, count, inner](std::span<const double>, std::span<const double> g) {
                     auto ga = grad_sink(a);
                     if (ga.empty()) return;
                     for (std::size_t o = 0; o < outer; ++o)
                       for (std::size_t c = 0; c < count; ++c)
                         for (std::size_t i = 0; i < inner; ++i)
                           ga[o * inner + i] += g[(o * count + c) * inner + i];
                   });
}

Tensor layer_norm(const Tensor& a, double eps) {
  require_defined(a, "layer_norm");
  const std::size_t inner = last_extent(a);
  const std::size_t outer = a.numel() / inner;
  const auto va = a.values();
  std::vector<double> out(va.size());
  std::vector<double> inv_std(outer);
  for (std::size_t o = 0; o < outer; ++o) {
    const double* x = va.data() + o * inner;
    double mu = 0.0;
    for (std::size_t i = 0; i < inner; ++i) mu += x[i];
    mu /= static_cast<double>(inner);
    double var = 0.0;
    for (std::size_t i = 0; i < inner; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= static_cast<double>(inner);
    inv_std[o] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = (x[i] - mu) * inv_std[o];
  }
  return record_op("layer_norm", a.shape(), std::move(out), {a},
                   [a, inner, outer, inv_std = std::move(inv_std)](std::span<const double> y,
                                                                   std::span<const double> g) {
                     auto ga = grad_sink(a);
                     if (ga.empty()) return;
                     const double n = static_cast<double>(inner);
                     for (std::size_t o = 0; o < outer; ++o) {
                       const std::size_t base = o * inner;
                       double g_mean = 0.0;
                       double gy_mean = 0.0;
                       for (std::size_t i = 0; i < inner; ++i) {
                         g_mean += g[base + i];
                         gy_mean += g[base + i] * y[base + i];
                       }
                       g_mean /= n;
                       gy_mean /= n;
                       for (std::size_t i = 0; i < inner; ++i)
                         ga[base + i] += inv_std[o] * (g[base + i] - g_mean - y[base + i] * gy_mean);
                     }
                   });
}

Tensor row_norm(const Tensor& a) {
  require_defined(a, "row_norm");
  const std::size_t inner = last_extent(a);
  const std::size_t outer = a.numel() / inner;
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  if (shape.empty()) shape = {1};
  const auto va = a.values();
  std::vector<double> out(outer);
  for (std::size_t o = 0; o < outer; ++o) {
    double s = 0.0;
    for (std::size_t i = 0; i < inner; ++i) s += va[o * inner + i] * va[o * inner + i];
    out[o] = std::sqrt(s);
  }
  return record_op("row_norm", std::move(shape), std::move(out), {a},
                   [a, inner, outer](std::span<const double> y, std::span<const double> g) {
                     auto ga = grad_sink(a);
                     if (ga.empty()) return;
                     const auto va = a.values();
                     for (std::size_t o = 0; o < outer; ++o) {
                       if (y[o] == 0.0) continue;
                       for (std::size_t i = 0; i < inner; ++i)
                         ga[o * inner + i] += g[o] * va[o * inner + i] / y[o];
                     }
                   });
}

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kBadMagic: return "bad-magic";
    case ErrorCode::kUnsupportedVersion: return "unsupported-version";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kCorrupt: return "corrupt";
    case ErrorCode::kNonFinite: return "non-finite";
    case ErrorCode::kShapeMismatch: return "shape-mismatch";
    case ErrorCode::kGuard: return "guard";
    case ErrorCode::kNumerical: return "numerical";
    case ErrorCode::kConfig: return "config";
  }
  return "unknown";
}

}  // namespace nemf
