#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cgl {

// Float by default; CGL_DOUBLE builds the engine in double precision (used by
// the finite-difference gradient checks).
#ifdef CGL_DOUBLE
using Scalar = double;
#else
using Scalar = float;
#endif
using Shape = std::vector<int>;
using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

std::string shape_str(const Shape& shape);
Eigen::Index shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until the backward pass reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  Buffer& grad_buffer();
};

}  // namespace detail

/// Dense row-major float tensor with a handle into the reverse-mode tape.
///
/// Copies are shallow: two Tensor values may refer to the same node. Values
/// produced by ops are immutable; only leaves are written in place (parameter
/// initialization, checkpoint loading, optimizer steps).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor from(Shape shape, Buffer values, bool requires_grad = false);
  static Tensor from(Shape shape, const std::vector<Scalar>& values, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int axis) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Eigen::Index numel() const { return node_->value.size(); }

  const Buffer& data() const { return node_->value; }
  Buffer& mutable_data() { return node_->value; }
  Scalar item() const;
  Scalar at(std::initializer_list<int> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  /// Gradient buffer; zeros if nothing has been accumulated yet.
  Buffer grad() const;
  void zero_grad() { node_->grad.resize(0); }

  /// A leaf holding a copy of this tensor's values, cut from the tape.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Builds an op result. `backward` is only attached when grad mode is on and
/// at least one input requires a gradient.
Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> backward);

/// Accumulates gradients of a scalar root into every requires_grad leaf.
void backward(const Tensor& root);

// Elementwise arithmetic. Operands must share a shape, or one of them must be
// a single-element tensor which is broadcast.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Scalar factor);
Tensor add_scalar(const Tensor& x, Scalar offset);
Tensor add_n(std::span<const Tensor> terms);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(Scalar s, const Tensor& x) { return scale(x, s); }

/// sign(x) * max(|x|, min_magnitude), with sign(0) = +1. The gradient is 1
/// where the magnitude already exceeds the floor and 0 where it is clamped.
Tensor clamp_magnitude(const Tensor& x, Scalar min_magnitude);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);

/// Sum of absolute values. The subgradient at exact zeros is 0.
Tensor l1_norm(const Tensor& x);
/// sqrt(sum x^2). The gradient at the all-zero tensor is 0.
Tensor frobenius_norm(const Tensor& x);
/// sum x^2
Tensor squared_norm(const Tensor& x);

/// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// Convolution and pooling on NCHW tensors.
Tensor conv2d(const Tensor& input, const Tensor& weight, int stride, int padding);
Tensor max_pool2(const Tensor& x);
Tensor avg_pool(const Tensor& x, int factor);
Tensor global_avg_pool(const Tensor& x);

/// x (N x C) times weight^T (K x C) plus bias (K).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Per-channel ops for tensors shaped N x C x ... with a length-C operand.
Tensor add_channel(const Tensor& x, const Tensor& per_channel);
Tensor mul_channel(const Tensor& x, const Tensor& per_channel);
Tensor div_channel(const Tensor& x, const Tensor& per_channel);

/// Per-channel sqrt(population variance + eps) over batch and spatial dims.
Tensor batch_std(const Tensor& x, Scalar eps);

struct BatchMoments {
  Buffer mean;
  Buffer var;
};
/// (x - mean_c) / sqrt(var_c + eps) with minibatch moments, which are also
/// reported through `moments` when non-null.
Tensor batch_normalize(const Tensor& x, Scalar eps, BatchMoments* moments = nullptr);

/// Channel `c` of an N x C x H x W tensor as an N x H x W tensor.
Tensor slice_channel(const Tensor& x, int c);
/// Rows [begin, end) along the leading axis.
Tensor narrow(const Tensor& x, int begin, int end);

/// Plain SGD: w <- w - lr * grad, then clears grads.
void sgd_step(std::span<Tensor> params, Scalar lr);

/// SGD with heavy-ball momentum. With momentum 0 this is sgd_step.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, Scalar lr, Scalar momentum);
  void step();
  void zero_grad();
  Scalar lr() const { return lr_; }

 private:
  std::vector<Tensor> params_;
  std::vector<Buffer> velocity_;
  Scalar lr_;
  Scalar momentum_;
};

}  // namespace cgl
