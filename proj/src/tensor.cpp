#include "depthfuse/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <bit>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "depthfuse/error.hpp"

namespace depthfuse {

namespace detail {

struct Node {
  std::string op;
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  bool has_grad = false;
  std::vector<double> grad;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

namespace {
std::atomic<std::uint64_t> g_sequence{0};
thread_local int g_no_grad_depth = 0;
}

}  // namespace detail

namespace {

using detail::Node;

void check_finite(std::span<const double> values, const std::string& op, const char* what) {
  // Exponent bits all set means Inf or NaN; the integer form vectorizes.
  constexpr std::uint64_t kExp = 0x7ff0000000000000ULL;
  bool bad = false;
  for (double v : values) bad |= (std::bit_cast<std::uint64_t>(v) & kExp) == kExp;
  if (bad) throw NumericalError("non-finite " + std::string(what) + " produced by op '" + op + "'");
}

std::shared_ptr<Node> make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be >= 1, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  check_finite(values, "leaf", "value");
  auto node = std::make_shared<Node>();
  node->op = "leaf";
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->seq = detail::g_sequence.fetch_add(1);
  return node;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " tensor, got " + shape_str(t.shape()));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() { ++detail::g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --detail::g_no_grad_depth; }
bool grad_enabled() { return detail::g_no_grad_depth == 0; }

// ---- Tensor ----

Tensor::Tensor() : node_(make_leaf({1}, {0.0}, false)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

Tensor Tensor::make_op(std::string op, Shape shape, std::vector<double> values,
                       std::vector<Tensor> inputs, BackwardFn backward) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError(op + ": result shape " + shape_str(shape) + " does not match value count");
  }
  check_finite(values, op, "value");
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->seq = detail::g_sequence.fetch_add(1);
  const bool needs_grad = detail::g_no_grad_depth == 0 &&
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (needs_grad && backward) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_);
  }
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(node_->shape));
  }
  return node_->shape[axis];
}
std::size_t Tensor::rank() const { return node_->shape.size(); }
std::size_t Tensor::numel() const { return node_->value.size(); }
std::span<const double> Tensor::data() const { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw Error("mutable_data() on result of op '" + node_->op + "'");
  return node_->value;
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::is_leaf() const { return node_->op == "leaf"; }
const std::string& Tensor::op_name() const { return node_->op; }
bool Tensor::has_grad() const { return node_->has_grad; }

std::span<const double> Tensor::grad() const {
  if (!node_->has_grad) throw Error("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->grad.assign(node_->value.size(), 0.0);
  node_->has_grad = true;
}

void Tensor::clear_grad() {
  node_->grad.clear();
  node_->has_grad = false;
}

Tensor Tensor::detach(bool requires_grad) const {
  return Tensor(make_leaf(node_->shape, node_->value, requires_grad));
}

// ---- tape ----

GradTape GradTape::record(const Tensor& loss) {
  GradTape tape;
  tape.loss_ = loss;
  if (!loss.requires_grad()) return tape;
  std::vector<Node*> stack{loss.node_.get()};
  std::unordered_map<const Node*, bool> seen{{loss.node_.get(), true}};
  tape.nodes_.push_back(loss.node_);
  while (!stack.empty()) {
    Node* node = stack.back();
    stack.pop_back();
    for (const auto& in : node->inputs) {
      if (!in->requires_grad || seen.count(in.get())) continue;
      seen[in.get()] = true;
      tape.nodes_.push_back(in);
      stack.push_back(in.get());
    }
  }
  std::sort(tape.nodes_.begin(), tape.nodes_.end(),
            [](const auto& a, const auto& b) { return a->seq < b->seq; });
  return tape;
}

std::vector<std::string> GradTape::op_names() const {
  std::vector<std::string> names;
  names.reserve(nodes_.size());
  for (const auto& n : nodes_) names.push_back(n->op);
  return names;
}

void GradTape::backward() const {
  if (loss_.numel() != 1) {
    throw DimensionError("backward requires a scalar loss, got " + shape_str(loss_.shape()));
  }
  if (!std::isfinite(loss_.item())) throw NumericalError("backward called on non-finite loss");
  if (nodes_.empty()) return;

  std::unordered_map<const Node*, std::vector<double>> adjoint;
  adjoint[nodes_.back().get()] = {1.0};

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node* node = it->get();
    auto found = adjoint.find(node);
    if (found == adjoint.end()) continue;
    std::vector<double> out_grad = std::move(found->second);
    adjoint.erase(found);

    if (node->inputs.empty()) {
      if (!node->has_grad) {
        node->grad.assign(node->value.size(), 0.0);
        node->has_grad = true;
      }
      for (std::size_t i = 0; i < out_grad.size(); ++i) node->grad[i] += out_grad[i];
      continue;
    }

    std::vector<std::span<double>> in_grads(node->inputs.size());
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      const Node* in = node->inputs[i].get();
      if (!in->requires_grad) continue;
      auto& buf = adjoint[in];
      if (buf.empty()) buf.assign(in->value.size(), 0.0);
      in_grads[i] = buf;
    }
    node->backward(out_grad, in_grads);
    for (const auto& g : in_grads) {
      if (!g.empty()) check_finite(g, node->op, "gradient");
    }
  }
}

void backward(const Tensor& loss) { GradTape::record(loss).backward(); }

void backward(const Tensor& loss, const GradTape& tape) {
  (void)loss;
  tape.backward();
}

// ---- convolution ----

namespace {

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, oh, ow;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t out_pixels() const { return oh * ow; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

void im2col(const ConvGeometry& g, const double* img, double* col) {
  const std::size_t p = g.out_pixels();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((c * g.kh + ky) * g.kw + kx) * p;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          double* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          // Output columns whose input x lies inside the row: [lo, hi).
          const long shift = static_cast<long>(kx) - static_cast<long>(g.pad);
          const long st = static_cast<long>(g.stride);
          const long ow = static_cast<long>(g.ow);
          const long lo = std::clamp<long>((-shift + st - 1) / st, 0, ow);
          const long hi = std::clamp<long>((static_cast<long>(g.w) - shift + st - 1) / st, lo, ow);
          std::fill(dst, dst + lo, 0.0);
          if (st == 1) {
            std::copy(src + lo + shift, src + hi + shift, dst + lo);
          } else {
            for (long ox = lo; ox < hi; ++ox) dst[ox] = src[ox * st + shift];
          }
          std::fill(dst + hi, dst + ow, 0.0);
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* col, double* img) {
  const std::size_t p = g.out_pixels();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = col + ((c * g.kh + ky) * g.kw + kx) * p;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

int as_int(std::size_t v) { return static_cast<int>(v); }

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0),
                 kernel.dim(2), kernel.dim(3), stride, padding, 0, 0};
  if (kernel.dim(1) != g.cin) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                         " input channels, input " + shape_str(input.shape()) + " has " +
                         std::to_string(g.cin));
  }
  if (bias.rank() != 1 || bias.dim(0) != g.cout) {
    throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(g.cout) + " output channels");
  }
  if (g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                         shape_str(input.shape()));
  }
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;

  const std::size_t p = g.out_pixels();
  const std::size_t in_plane = g.cin * g.h * g.w;
  const std::size_t out_plane = g.cout * p;
  std::vector<double> out(g.n * out_plane);
  std::vector<double> col(g.pointwise() ? 0 : g.patch() * p);
  const double* kdata = kernel.data().data();
  const double* bdata = bias.data().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    const double* img = input.data().data() + n * in_plane;
    const double* cols = img;
    if (!g.pointwise()) {
      im2col(g, img, col.data());
      cols = col.data();
    }
    double* dst = out.data() + n * out_plane;
    for (std::size_t co = 0; co < g.cout; ++co) std::fill(dst + co * p, dst + (co + 1) * p, bdata[co]);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, as_int(g.cout), as_int(p), as_int(g.patch()),
                1.0, kdata, as_int(g.patch()), cols, as_int(p), 1.0, dst, as_int(p));
  }

  return Tensor::make_op(
      "conv2d", {g.n, g.cout, g.oh, g.ow}, std::move(out), {input, kernel, bias},
      [g, input, kernel](std::span<const double> dout, std::span<const std::span<double>> grads) {
        const std::size_t p = g.out_pixels();
        const std::size_t in_plane = g.cin * g.h * g.w;
        const std::size_t out_plane = g.cout * p;
        std::vector<double> col(g.pointwise() ? 0 : g.patch() * p);
        std::vector<double> dcol(g.pointwise() ? 0 : g.patch() * p);
        for (std::size_t n = 0; n < g.n; ++n) {
          const double* go = dout.data() + n * out_plane;
          const double* img = input.data().data() + n * in_plane;
          if (!grads[1].empty()) {
            const double* cols = img;
            if (!g.pointwise()) {
              im2col(g, img, col.data());
              cols = col.data();
            }
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, as_int(g.cout), as_int(g.patch()),
                        as_int(p), 1.0, go, as_int(p), cols, as_int(p), 1.0, grads[1].data(),
                        as_int(g.patch()));
          }
          if (!grads[2].empty()) {
            for (std::size_t co = 0; co < g.cout; ++co) {
              double s = 0.0;
              for (std::size_t j = 0; j < p; ++j) s += go[co * p + j];
              grads[2][co] += s;
            }
          }
          if (!grads[0].empty()) {
            double* gi = grads[0].data() + n * in_plane;
            if (g.pointwise()) {
              cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, as_int(g.patch()), as_int(p),
                          as_int(g.cout), 1.0, kernel.data().data(), as_int(g.patch()), go, as_int(p),
                          1.0, gi, as_int(p));
            } else {
              cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, as_int(g.patch()), as_int(p),
                          as_int(g.cout), 1.0, kernel.data().data(), as_int(g.patch()), go, as_int(p),
                          0.0, dcol.data(), as_int(p));
              col2im_add(g, dcol.data(), gi);
            }
          }
        }
      });
}

// ---- resampling ----

Tensor resize_nearest(const Tensor& x, std::size_t height, std::size_t width) {
  require_rank(x, 4, "resize_nearest");
  if (height == 0 || width == 0) throw DimensionError("resize_nearest: target extents must be >= 1");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<std::size_t> src(height * width);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = y * h / height;
    for (std::size_t xx = 0; xx < width; ++xx) src[y * width + xx] = sy * w + xx * w / width;
  }
  const std::size_t planes = n * c;
  std::vector<double> out(planes * height * width);
  const double* in = x.data().data();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t i = 0; i < height * width; ++i) out[pl * height * width + i] = in[pl * h * w + src[i]];
  }
  return Tensor::make_op(
      "resize_nearest", {n, c, height, width}, std::move(out), {x},
      [src = std::move(src), planes, h, w, height, width](std::span<const double> go,
                                                           std::span<const std::span<double>> grads) {
        for (std::size_t pl = 0; pl < planes; ++pl) {
          for (std::size_t i = 0; i < height * width; ++i) {
            grads[0][pl * h * w + src[i]] += go[pl * height * width + i];
          }
        }
      });
}

Tensor upsample_nearest2x(const Tensor& x) {
  require_rank(x, 4, "upsample_nearest2x");
  return resize_nearest(x, 2 * x.dim(2), 2 * x.dim(3));
}

// ---- elementwise ----

namespace {

enum class Broadcast { kNone, kChannel };

Broadcast check_binary(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (b.rank() == 1 && a.rank() == 4 && a.dim(1) == b.dim(0)) return Broadcast::kChannel;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
}

// Index of b's element paired with a's flat index i.
struct BIndex {
  Broadcast mode;
  std::size_t plane = 1, channels = 1;
  std::size_t operator()(std::size_t i) const {
    return mode == Broadcast::kNone ? i : (i / plane) % channels;
  }
};

BIndex make_bindex(const Tensor& a, Broadcast mode) {
  BIndex bi{mode};
  if (mode == Broadcast::kChannel) {
    bi.plane = a.dim(2) * a.dim(3);
    bi.channels = a.dim(1);
  }
  return bi;
}

template <typename Fwd, typename DA, typename DB>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  const BIndex bi = make_bindex(a, check_binary(a, b, op));
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[bi(i)]);
  return Tensor::make_op(op, a.shape(), std::move(out), {a, b},
                         [a, b, bi, da, db](std::span<const double> go,
                                            std::span<const std::span<double>> grads) {
                           const auto av = a.data();
                           const auto bv = b.data();
                           for (std::size_t i = 0; i < go.size(); ++i) {
                             const std::size_t j = bi(i);
                             if (!grads[0].empty()) grads[0][i] += go[i] * da(av[i], bv[j]);
                             if (!grads[1].empty()) grads[1][j] += go[i] * db(av[i], bv[j]);
                           }
                         });
}

// Unary op whose derivative is expressed through input x and output y.
template <typename Fwd, typename Deriv>
Tensor unary_op(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  // The output values are needed in backward for some ops; keep a copy.
  auto y = std::make_shared<std::vector<double>>(out);
  return Tensor::make_op(op, x.shape(), std::move(out), {x},
                         [x, y, deriv](std::span<const double> go, std::span<const std::span<double>> grads) {
                           const auto xv = x.data();
                           for (std::size_t i = 0; i < go.size(); ++i) grads[0][i] += go[i] * deriv(xv[i], (*y)[i]);
                         });
}

double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data()) {
    if (v == 0.0) throw NumericalError("division by zero in op 'div'");
  }
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& x, double factor) {
  return unary_op(
      "scale", x, [factor](double v) { return factor * v; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary_op(
      "add_scalar", x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return unary_op(
      "leaky_relu", x, [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(
      "sqrt", x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) {
  return unary_op(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      "abs", x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      "sigmoid", x, [](double v) { return stable_sigmoid(v); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& x) {
  return unary_op(
      "softplus", x,
      [](double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](double v, double) { return stable_sigmoid(v); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary_op(
      "clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---- reductions ----

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make_op("sum", {1}, {s}, {x},
                         [](std::span<const double> go, std::span<const std::span<double>> grads) {
                           for (double& g : grads[0]) g += go[0];
                         });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make_op("mean", {1}, {s / n}, {x},
                         [n](std::span<const double> go, std::span<const std::span<double>> grads) {
                           for (double& g : grads[0]) g += go[0] / n;
                         });
}

namespace {

Tensor reduce_axes(const char* op, const Tensor& x, const std::vector<std::size_t>& axes, bool average) {
  if (axes.empty()) throw DimensionError(std::string(op) + ": empty reduction axis list");
  std::vector<bool> reduced(x.rank(), false);
  for (std::size_t a : axes) {
    if (a >= x.rank()) {
      throw DimensionError(std::string(op) + ": axis " + std::to_string(a) + " invalid for " +
                           shape_str(x.shape()));
    }
    reduced[a] = true;
  }
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t d = 0; d < x.rank(); ++d) {
    if (reduced[d]) {
      count *= x.dim(d);
    } else {
      out_shape.push_back(x.dim(d));
    }
  }
  if (out_shape.empty()) out_shape = {1};

  // Output flat index for every input element.
  std::vector<std::size_t> target(x.numel());
  {
    std::vector<std::size_t> idx(x.rank(), 0);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      std::size_t o = 0;
      for (std::size_t d = 0; d < x.rank(); ++d) {
        if (!reduced[d]) o = o * x.dim(d) + idx[d];
      }
      target[i] = o;
      for (std::size_t d = x.rank(); d-- > 0;) {
        if (++idx[d] < x.dim(d)) break;
        idx[d] = 0;
      }
    }
  }
  const double factor = average ? 1.0 / static_cast<double>(count) : 1.0;
  std::vector<double> out(shape_numel(out_shape), 0.0);
  const auto xv = x.data();
  for (std::size_t i = 0; i < xv.size(); ++i) out[target[i]] += xv[i];
  if (average) {
    for (double& v : out) v *= factor;
  }
  return Tensor::make_op(op, out_shape, std::move(out), {x},
                         [target = std::move(target), factor](std::span<const double> go,
                                                              std::span<const std::span<double>> grads) {
                           for (std::size_t i = 0; i < target.size(); ++i) grads[0][i] += go[target[i]] * factor;
                         });
}

}  // namespace

Tensor sum(const Tensor& x, const std::vector<std::size_t>& axes) { return reduce_axes("sum_axes", x, axes, false); }
Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes) {
  return reduce_axes("mean_axes", x, axes, true);
}

std::pair<Tensor, Tensor> instance_stats(const Tensor& f, double eps) {
  require_rank(f, 4, "instance_stats");
  const std::size_t planes = f.dim(0) * f.dim(1);
  const std::size_t hw = f.dim(2) * f.dim(3);
  const double n = static_cast<double>(hw);
  std::vector<double> mu(planes), sigma(planes);
  const auto fv = f.data();
  for (std::size_t p = 0; p < planes; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += fv[p * hw + i];
    const double m = s / n;
    double v = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      const double d = fv[p * hw + i] - m;
      v += d * d;
    }
    mu[p] = m;
    sigma[p] = std::sqrt(v / n + eps);
  }
  const Shape stat_shape{f.dim(0), f.dim(1)};
  Tensor mu_t = Tensor::make_op("instance_mean", stat_shape, mu, {f},
                                [hw, n](std::span<const double> go, std::span<const std::span<double>> grads) {
                                  for (std::size_t p = 0; p < go.size(); ++p) {
                                    for (std::size_t i = 0; i < hw; ++i) grads[0][p * hw + i] += go[p] / n;
                                  }
                                });
  // d sigma / d f_i = (f_i - mu) / (n * sigma); the mean's own dependence cancels.
  Tensor sigma_t = Tensor::make_op(
      "instance_std", stat_shape, sigma, {f},
      [f, hw, n, mu, sigma](std::span<const double> go, std::span<const std::span<double>> grads) {
        const auto fv = f.data();
        for (std::size_t p = 0; p < go.size(); ++p) {
          const double k = go[p] / (n * sigma[p]);
          for (std::size_t i = 0; i < hw; ++i) grads[0][p * hw + i] += k * (fv[p * hw + i] - mu[p]);
        }
      });
  return {mu_t, sigma_t};
}

// ---- layout ----

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> values(x.data().begin(), x.data().end());
  return Tensor::make_op("reshape", std::move(shape), std::move(values), {x},
                         [](std::span<const double> go, std::span<const std::span<double>> grads) {
                           for (std::size_t i = 0; i < go.size(); ++i) grads[0][i] += go[i];
                         });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: no inputs");
  for (const auto& p : parts) require_rank(p, 4, "concat_channels");
  const std::size_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::size_t total_c = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.dim(0) != n || p.dim(2) != h || p.dim(3) != w) {
      throw DimensionError("concat_channels: " + shape_str(p.shape()) + " does not align with " +
                           shape_str(parts[0].shape()));
    }
    offsets.push_back(total_c);
    total_c += p.dim(1);
  }
  const std::size_t hw = h * w;
  std::vector<double> out(n * total_c * hw);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t c = parts[k].dim(1);
    const auto src = parts[k].data();
    for (std::size_t b = 0; b < n; ++b) {
      std::copy_n(src.data() + b * c * hw, c * hw, out.data() + (b * total_c + offsets[k]) * hw);
    }
  }
  std::vector<std::size_t> channels;
  for (const auto& p : parts) channels.push_back(p.dim(1));
  return Tensor::make_op(
      "concat_channels", {n, total_c, h, w}, std::move(out), parts,
      [n, hw, total_c, offsets, channels](std::span<const double> go, std::span<const std::span<double>> grads) {
        for (std::size_t k = 0; k < grads.size(); ++k) {
          if (grads[k].empty()) continue;
          const std::size_t c = channels[k];
          for (std::size_t b = 0; b < n; ++b) {
            const double* src = go.data() + (b * total_c + offsets[k]) * hw;
            double* dst = grads[k].data() + b * c * hw;
            for (std::size_t i = 0; i < c * hw; ++i) dst[i] += src[i];
          }
        }
      });
}

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank(x, 4, "slice_channels");
  if (count == 0 || begin + count > x.dim(1)) {
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> out(n * count * hw);
  for (std::size_t b = 0; b < n; ++b) {
    std::copy_n(x.data().data() + (b * c + begin) * hw, count * hw, out.data() + b * count * hw);
  }
  return Tensor::make_op("slice_channels", {n, count, x.dim(2), x.dim(3)}, std::move(out), {x},
                         [n, c, hw, begin, count](std::span<const double> go,
                                                  std::span<const std::span<double>> grads) {
                           for (std::size_t b = 0; b < n; ++b) {
                             double* dst = grads[0].data() + (b * c + begin) * hw;
                             const double* src = go.data() + b * count * hw;
                             for (std::size_t i = 0; i < count * hw; ++i) dst[i] += src[i];
                           }
                         });
}

Tensor expand_channels(const Tensor& x, std::size_t channels) {
  require_rank(x, 4, "expand_channels");
  if (x.dim(1) != 1) throw DimensionError("expand_channels: expected one channel, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), hw = x.dim(2) * x.dim(3);
  std::vector<double> out(n * channels * hw);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      std::copy_n(x.data().data() + b * hw, hw, out.data() + (b * channels + c) * hw);
    }
  }
  return Tensor::make_op("expand_channels", {n, channels, x.dim(2), x.dim(3)}, std::move(out), {x},
                         [n, hw, channels](std::span<const double> go, std::span<const std::span<double>> grads) {
                           for (std::size_t b = 0; b < n; ++b) {
                             for (std::size_t c = 0; c < channels; ++c) {
                               const double* src = go.data() + (b * channels + c) * hw;
                               for (std::size_t i = 0; i < hw; ++i) grads[0][b * hw + i] += src[i];
                             }
                           }
                         });
}

Tensor expand_spatial(const Tensor& x, std::size_t height, std::size_t width) {
  require_rank(x, 2, "expand_spatial");
  const std::size_t planes = x.numel(), hw = height * width;
  std::vector<double> out(planes * hw);
  for (std::size_t p = 0; p < planes; ++p) std::fill_n(out.data() + p * hw, hw, x.data()[p]);
  return Tensor::make_op("expand_spatial", {x.dim(0), x.dim(1), height, width}, std::move(out), {x},
                         [planes, hw](std::span<const double> go, std::span<const std::span<double>> grads) {
                           for (std::size_t p = 0; p < planes; ++p) {
                             double s = 0.0;
                             for (std::size_t i = 0; i < hw; ++i) s += go[p * hw + i];
                             grads[0][p] += s;
                           }
                         });
}

Tensor spatial_softmax(const Tensor& x) {
  require_rank(x, 4, "spatial_softmax");
  if (x.dim(1) != 1) throw DimensionError("spatial_softmax: expected one channel, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), hw = x.dim(2) * x.dim(3);
  std::vector<double> out(n * hw);
  const auto xv = x.data();
  for (std::size_t b = 0; b < n; ++b) {
    const double* src = xv.data() + b * hw;
    const double m = *std::max_element(src, src + hw);
    double z = 0.0;
    for (std::size_t i = 0; i < hw; ++i) z += (out[b * hw + i] = std::exp(src[i] - m));
    for (std::size_t i = 0; i < hw; ++i) out[b * hw + i] /= z;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return Tensor::make_op("spatial_softmax", x.shape(), std::move(out), {x},
                         [y, n, hw](std::span<const double> go, std::span<const std::span<double>> grads) {
                           for (std::size_t b = 0; b < n; ++b) {
                             double dot = 0.0;
                             for (std::size_t i = 0; i < hw; ++i) dot += go[b * hw + i] * (*y)[b * hw + i];
                             for (std::size_t i = 0; i < hw; ++i) {
                               grads[0][b * hw + i] += (*y)[b * hw + i] * (go[b * hw + i] - dot);
                             }
                           }
                         });
}

// ---- finite differences ----

GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor probe = x.detach(true);
  Tensor loss = f(probe);
  if (loss.numel() != 1) throw DimensionError("finite_diff_check: f must return a scalar");
  backward(loss);
  std::vector<double> analytic(x.numel(), 0.0);
  if (probe.has_grad()) {
    const auto g = probe.grad();
    analytic.assign(g.begin(), g.end());
  }

  auto evaluate = [&](const std::vector<double>& values) {
    double v;
    try {
      v = f(Tensor::from(x.shape(), values)).item();
    } catch (const NumericalError& e) {
      throw NumericalError(std::string("finite_diff_check: f non-finite at probe: ") + e.what());
    }
    if (!std::isfinite(v)) throw NumericalError("finite_diff_check: f returned non-finite value");
    return v;
  };

  std::vector<double> base(x.data().begin(), x.data().end());
  const double f0 = evaluate(base);
  // Components that are structurally zero come out of the difference
  // quotient as rounding noise of order ulp(f) / eps; the floor keeps such
  // noise from reading as a large relative error.
  const double floor = 1e-6 * std::max(1.0, std::fabs(f0));
  GradCheckResult result;
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> shifted = base;
    shifted[i] = base[i] + eps;
    const double fp = evaluate(shifted);
    shifted[i] = base[i] - eps;
    const double fm = evaluate(shifted);

    const double numeric = (fp - fm) / (2.0 * eps);
    const double forward = (fp - f0) / eps;
    const double backward_slope = (f0 - fm) / eps;
    const double gap = std::fabs(forward - backward_slope);
    if (gap > 1e-7 && gap > 0.5 * std::max(std::fabs(forward), std::fabs(backward_slope))) {
      ++result.skipped;
      continue;
    }
    const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), floor});
    result.max_rel_err = std::max(result.max_rel_err, std::fabs(analytic[i] - numeric) / denom);
    ++result.checked;
  }
  return result;
}

}  // namespace depthfuse
