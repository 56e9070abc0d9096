#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// Every operation whose inputs require gradients records a node carrying a
// monotonically increasing sequence number. backward() collects the nodes
// reachable from the root and replays them in descending sequence order, so
// each recorded operation is visited exactly once, in reverse execution order.
//
// Gradient policy: leaf tensors accumulate across backward() calls until
// zero_grad(); interior gradients are reset at the start of every call, so a
// recorded graph may be differentiated repeatedly.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace nemf {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t numel() const;

  // Views into storage owned by this handle; not available on temporaries.
  std::span<const double> values() const&;
  std::span<const double> values() const&& = delete;
  std::vector<double> to_vector() const;
  // Writing into a tensor that already feeds a recorded graph invalidates
  // that graph; only mutate leaves between optimization steps.
  std::span<double> mutable_values();
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;

  // Empty span until a backward pass has reached this tensor.
  std::span<const double> grad() const&;
  std::span<const double> grad() const&& = delete;
  void zero_grad();

  // Value copy cut off from the tape.
  Tensor detach() const;

  std::string_view op_name() const;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor record_op(std::string_view, Shape, std::vector<double>,
                          std::vector<Tensor>, std::function<void(std::span<const double>,
                                                                  std::span<const double>)>);
  friend std::span<double> grad_sink(const Tensor&);
  friend void backward(const Tensor&);
};

// Called with (output values, output gradient); must accumulate into the
// inputs through grad_sink().
using BackwardFn =
    std::function<void(std::span<const double> out_value, std::span<const double> out_grad)>;

// Extension point for fused operations. The node is only recorded when some
// input requires a gradient; otherwise `fn` is dropped.
Tensor record_op(std::string_view name, Shape shape, std::vector<double> values,
                 std::vector<Tensor> inputs, BackwardFn fn);

// Gradient accumulator of `t` (allocated on demand), or an empty span when
// `t` does not require a gradient.
std::span<double> grad_sink(const Tensor& t);

// Root must hold exactly one element.
void backward(const Tensor& root);

// Element-wise binary ops. `b` may match `a`, hold a single element, or match
// the trailing dimensions of `a` (broadcast along the leading ones).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor shift(const Tensor& a, double offset);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor transpose(const Tensor& a);                // [m,n] -> [n,m]
Tensor reshape(const Tensor& a, Shape shape);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor exp(const Tensor& a);

inline constexpr double kLogEpsilon = 1e-12;
// log(max(v, kLogEpsilon)); the gradient is zero where the guard is active.
Tensor log(const Tensor& a);

Tensor sum(const Tensor& a);   // -> [1]
Tensor mean(const Tensor& a);  // -> [1]
Tensor sum_last(const Tensor& a);
Tensor mean_last(const Tensor& a);

Tensor softmax(const Tensor& a);      // over the last axis
Tensor log_softmax(const Tensor& a);  // over the last axis

// Picks flat elements of `a`; result has shape [indices.size()].
Tensor gather(const Tensor& a, std::span<const std::size_t> indices);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
// Inserts a new axis at `axis` and repeats the tensor `count` times along it.
Tensor repeat_axis(const Tensor& a, std::size_t axis, std::size_t count);

// Zero-mean, unit-variance normalization over the last axis (no affine).
Tensor layer_norm(const Tensor& a, double eps = 1e-5);
// Euclidean norm over the last axis; the subgradient at the origin is 0.
Tensor row_norm(const Tensor& a);

}  // namespace nemf
