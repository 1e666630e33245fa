#pragma once

// Dense N-d array with define-by-run reverse-mode differentiation.
//
// Every op checks its result for NaN/Inf and throws NumericalError naming the
// op. Feature maps use N x C x H x W layout. Broadcasting is limited to a
// length-C vector against an N x C x H x W tensor; everything else goes
// through the explicit expand_* ops.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace depthfuse {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

/// Receives the output adjoint and accumulates into the input adjoints.
/// An input adjoint span is empty when that input does not require grad.
using BackwardFn = std::function<void(std::span<const double> out_grad,
                                      std::span<const std::span<double>> in_grads)>;

class Tensor {
 public:
  /// Scalar zero. Mostly useful as a placeholder before assignment.
  Tensor();

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  /// Registers a new op result. `backward` may be empty when no input needs
  /// grad. Throws NumericalError if `values` contains NaN/Inf.
  static Tensor make_op(std::string op, Shape shape, std::vector<double> values,
                        std::vector<Tensor> inputs, BackwardFn backward);

  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const;
  std::size_t numel() const;

  std::span<const double> data() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }
  /// Value of a one-element tensor.
  double item() const;

  /// Writable view of a leaf's values (parameter updates). Throws for op
  /// results, whose values are fixed once created.
  std::span<double> mutable_data();

  bool requires_grad() const;
  bool is_leaf() const;
  const std::string& op_name() const;

  bool has_grad() const;
  /// Accumulated gradient; throws if absent.
  std::span<const double> grad() const;
  void zero_grad();
  void clear_grad();

  /// New leaf holding a copy of the values, disconnected from any graph.
  Tensor detach(bool requires_grad = false) const;

  /// Identity of the underlying storage.
  const void* id() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend class GradTape;
};

/// Ordered record of the ops reachable from a loss, in creation order.
class GradTape {
 public:
  static GradTape record(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  /// Op names, inputs before consumers.
  std::vector<std::string> op_names() const;

  /// Propagates d(loss)/d(x) into every requires_grad leaf. Each op is
  /// visited exactly once. Gradients accumulate across calls.
  void backward() const;

 private:
  Tensor loss_;
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

/// While alive, ops on this thread record no graph (inference only).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

/// Records the tape for `loss` and runs it. Loss must hold one element.
void backward(const Tensor& loss);
void backward(const Tensor& loss, const GradTape& tape);

// ---- convolution and resampling ----

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t stride = 1, std::size_t padding = 0);
Tensor upsample_nearest2x(const Tensor& x);
/// Nearest-neighbour resize of an N x C x h x w map to H x W.
Tensor resize_nearest(const Tensor& x, std::size_t height, std::size_t width);

// ---- elementwise ----
// Binary ops accept equal shapes, or `b` of shape {C} against N x C x H x W.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Throws NumericalError on a zero divisor.
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
/// Gradient is zero where the input is outside [lo, hi].
Tensor clamp(const Tensor& x, double lo, double hi);

// ---- reductions ----

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Reduces over the listed axes and drops them. Reducing every axis gives
/// shape {1}.
Tensor sum(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes);

/// Per (n, c) spatial mean and sqrt(biased variance + eps), both N x C.
std::pair<Tensor, Tensor> instance_stats(const Tensor& f, double eps);

// ---- layout ----

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_channels(const std::vector<Tensor>& parts);
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count);
/// N x 1 x H x W -> N x C x H x W.
Tensor expand_channels(const Tensor& x, std::size_t channels);
/// N x C -> N x C x H x W.
Tensor expand_spatial(const Tensor& x, std::size_t height, std::size_t width);
/// Softmax over the H*W positions of each N x 1 x H x W map.
Tensor spatial_softmax(const Tensor& x);

// ---- finite-difference verification ----

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  /// Elements whose one-sided slopes disagree (kinks, or stationary points
  /// with extreme curvature); excluded from max_rel_err.
  std::size_t skipped = 0;

  bool all_skipped() const { return checked == 0 && skipped > 0; }
};

/// Compares tape gradients of scalar `f` at `x` with central differences.
/// Relative error per element uses max(|analytic|, |numeric|, 1e-6 * max(1, |f(x)|))
/// as the denominator. Throws NumericalError if f is non-finite at any probe.
GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                  const Tensor& x, double eps = 1e-4);

}  // namespace depthfuse
