#include "cgl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace cgl {

namespace {
thread_local bool g_grad_enabled = true;

// Sigmoid outputs are kept strictly inside (0, 1) for every finite input.
constexpr Scalar kSigmoidLo = std::numeric_limits<Scalar>::min();
const Scalar kSigmoidHi = std::nextafter(Scalar{1}, Scalar{0});

void require_same_or_scalar(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape() || a.numel() == 1 || b.numel() == 1) return;
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

// Gradient of a broadcast operand: either the full buffer or its sum.
void accumulate(detail::Node& parent, const Buffer& g) {
  if (!parent.requires_grad) return;
  Buffer& dst = parent.grad_buffer();
  if (dst.size() == g.size()) {
    dst += g;
  } else {
    dst(0) += static_cast<Scalar>(g.cast<double>().sum());
  }
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Eigen::Index shape_numel(const Shape& shape) {
  Eigen::Index n = 1;
  for (int d : shape) {
    if (d < 0) throw DimensionError("negative dimension in " + shape_str(shape));
    n *= d;
  }
  return n;
}

Buffer& detail::Node::grad_buffer() {
  if (grad.size() != value.size()) grad = Buffer::Zero(value.size());
  return grad;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), Buffer::Constant(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, Buffer values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("Tensor::from: shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, const std::vector<Scalar>& values, bool requires_grad) {
  Buffer b = Eigen::Map<const Buffer>(values.data(), static_cast<Eigen::Index>(values.size()));
  return from(std::move(shape), std::move(b), requires_grad);
}

Tensor Tensor::scalar(Scalar value, bool requires_grad) {
  return from(Shape{}, Buffer::Constant(1, value), requires_grad);
}

int Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return node_->shape[static_cast<std::size_t>(axis)];
}

Scalar Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->value(0);
}

Scalar Tensor::at(std::initializer_list<int> index) const {
  if (static_cast<int>(index.size()) != rank()) throw IndexError("at(): rank mismatch");
  Eigen::Index flat = 0;
  int axis = 0;
  for (int i : index) {
    const int extent = node_->shape[static_cast<std::size_t>(axis++)];
    if (i < 0 || i >= extent) throw IndexError("at(): index out of range");
    flat = flat * extent + i;
  }
  return node_->value(flat);
}

Buffer Tensor::grad() const {
  if (has_grad()) return node_->grad;
  return Buffer::Zero(numel());
}

Tensor Tensor::detach() const { return from(shape(), data(), false); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> backward_fn) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (auto& t : inputs) node->parents.push_back(t.node());
      node->backward = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1) {
    throw ContractError("backward() requires a scalar root, got " +
                        (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order with parents first.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads are per-pass; leaves accumulate across passes.
  for (detail::Node* n : order) {
    if (n->backward) n->grad.resize(0);
  }
  root.node()->grad_buffer()(0) += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
  require_same_or_scalar(a, b, name);
  const bool a_wide = a.numel() >= b.numel();
  const Shape out_shape = a_wide ? a.shape() : b.shape();
  const Eigen::Index n = a_wide ? a.numel() : b.numel();
  auto expand = [n](const Tensor& t) -> Buffer {
    if (t.numel() == n) return t.data();
    return Buffer::Constant(n, t.data()(0));
  };
  Buffer av = expand(a);
  Buffer bv = expand(b);
  Buffer out = fwd(av, bv);
  return make_result(out_shape, std::move(out), {a, b},
                     [av = std::move(av), bv = std::move(bv), bwd](detail::Node& self) {
                       Buffer ga, gb;
                       bwd(self.grad, av, bv, self.value, ga, gb);
                       accumulate(*self.parents[0], ga);
                       accumulate(*self.parents[1], gb);
                     });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](const Buffer& x, const Buffer& y) -> Buffer { return x + y; },
      [](const Buffer& g, const Buffer&, const Buffer&, const Buffer&, Buffer& ga, Buffer& gb) {
        ga = g;
        gb = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](const Buffer& x, const Buffer& y) -> Buffer { return x - y; },
      [](const Buffer& g, const Buffer&, const Buffer&, const Buffer&, Buffer& ga, Buffer& gb) {
        ga = g;
        gb = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](const Buffer& x, const Buffer& y) -> Buffer { return x * y; },
      [](const Buffer& g, const Buffer& x, const Buffer& y, const Buffer&, Buffer& ga,
         Buffer& gb) {
        ga = g * y;
        gb = g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](const Buffer& x, const Buffer& y) -> Buffer { return x / y; },
      [](const Buffer& g, const Buffer&, const Buffer& y, const Buffer& out, Buffer& ga,
         Buffer& gb) {
        ga = g / y;
        gb = -g * out / y;
      });
}

Tensor scale(const Tensor& x, Scalar factor) {
  return make_result(x.shape(), x.data() * factor, {x}, [factor](detail::Node& self) {
    accumulate(*self.parents[0], self.grad * factor);
  });
}

Tensor add_scalar(const Tensor& x, Scalar offset) {
  return make_result(x.shape(), x.data() + offset, {x},
                     [](detail::Node& self) { accumulate(*self.parents[0], self.grad); });
}

Tensor add_n(std::span<const Tensor> terms) {
  if (terms.empty()) return Tensor::scalar(0.0f);
  const Shape& shape = terms.front().shape();
  Eigen::Array<double, Eigen::Dynamic, 1> acc = Eigen::Array<double, Eigen::Dynamic, 1>::Zero(
      terms.front().numel());
  for (const auto& t : terms) {
    if (t.shape() != shape) {
      throw DimensionError("add_n: shape mismatch " + shape_str(shape) + " vs " +
                           shape_str(t.shape()));
    }
    acc += t.data().cast<double>();
  }
  return make_result(shape, acc.cast<Scalar>(), std::vector<Tensor>(terms.begin(), terms.end()),
                     [](detail::Node& self) {
                       for (auto& p : self.parents) accumulate(*p, self.grad);
                     });
}

Tensor clamp_magnitude(const Tensor& x, Scalar min_magnitude) {
  const Buffer& v = x.data();
  Buffer out = (v.abs() >= min_magnitude)
                   .select(v, (v < 0).select(Buffer::Constant(v.size(), -min_magnitude),
                                             Buffer::Constant(v.size(), min_magnitude)));
  return make_result(x.shape(), std::move(out), {x}, [min_magnitude](detail::Node& self) {
    const auto& in = self.parents[0]->value;
    accumulate(*self.parents[0], (in.abs() >= min_magnitude).select(self.grad, Scalar{0}));
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  const double s = x.data().cast<double>().sum();
  return make_result(Shape{}, Buffer::Constant(1, static_cast<Scalar>(s)), {x},
                     [](detail::Node& self) {
                       auto& p = *self.parents[0];
                       accumulate(p, Buffer::Constant(p.value.size(), self.grad(0)));
                     });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(std::max<Eigen::Index>(x.numel(), 1));
  const double s = x.data().cast<double>().sum() / n;
  return make_result(Shape{}, Buffer::Constant(1, static_cast<Scalar>(s)), {x},
                     [n](detail::Node& self) {
                       auto& p = *self.parents[0];
                       accumulate(p, Buffer::Constant(p.value.size(),
                                                      static_cast<Scalar>(self.grad(0) / n)));
                     });
}

Tensor sigmoid(const Tensor& x) {
  Buffer y = (Scalar{1} / (Scalar{1} + (-x.data()).exp())).max(kSigmoidLo).min(kSigmoidHi);
  return make_result(x.shape(), std::move(y), {x}, [](detail::Node& self) {
    accumulate(*self.parents[0], self.grad * self.value * (Scalar{1} - self.value));
  });
}

Tensor relu(const Tensor& x) {
  Buffer y = x.data().max(Scalar{0});
  return make_result(x.shape(), std::move(y), {x}, [](detail::Node& self) {
    const auto& in = self.parents[0]->value;
    accumulate(*self.parents[0], (in > Scalar{0}).select(self.grad, Scalar{0}));
  });
}

Tensor l1_norm(const Tensor& x) {
  const double s = x.data().abs().cast<double>().sum();
  return make_result(Shape{}, Buffer::Constant(1, static_cast<Scalar>(s)), {x},
                     [](detail::Node& self) {
                       const auto& in = self.parents[0]->value;
                       const Scalar g = self.grad(0);
                       Buffer sign = in.sign() * g;
                       accumulate(*self.parents[0], sign);
                     });
}

Tensor squared_norm(const Tensor& x) {
  const double s = x.data().cast<double>().square().sum();
  return make_result(Shape{}, Buffer::Constant(1, static_cast<Scalar>(s)), {x},
                     [](detail::Node& self) {
                       accumulate(*self.parents[0],
                                  self.parents[0]->value * (Scalar{2} * self.grad(0)));
                     });
}

Tensor frobenius_norm(const Tensor& x) {
  const double norm = std::sqrt(x.data().cast<double>().square().sum());
  return make_result(Shape{}, Buffer::Constant(1, static_cast<Scalar>(norm)), {x},
                     [norm](detail::Node& self) {
                       auto& p = *self.parents[0];
                       if (norm == 0.0) return;  // zero subgradient
                       accumulate(p, p.value * static_cast<Scalar>(self.grad(0) / norm));
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) {
    throw DimensionError("cross_entropy: logits must be N x K, got " + shape_str(logits.shape()));
  }
  const int n = logits.dim(0);
  const int k = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         shape_str(logits.shape()) + " logits");
  }
  Eigen::Map<const RowMatrix> z(logits.data().data(), n, k);
  RowMatrix probs(n, k);
  double loss = 0.0;
  std::vector<int> lab(labels.begin(), labels.end());
  for (int i = 0; i < n; ++i) {
    if (lab[static_cast<std::size_t>(i)] < 0 || lab[static_cast<std::size_t>(i)] >= k) {
      throw IndexError("cross_entropy: label " + std::to_string(lab[static_cast<std::size_t>(i)]) +
                       " outside [0, " + std::to_string(k) + ")");
    }
    const Eigen::ArrayXd row = z.row(i).transpose().cast<double>().array();
    const double m = row.maxCoeff();
    const Eigen::ArrayXd e = (row - m).exp();
    const double lse = m + std::log(e.sum());
    loss += lse - row(lab[static_cast<std::size_t>(i)]);
    probs.row(i) = (e / e.sum()).cast<Scalar>().matrix().transpose();
  }
  loss /= n;
  return make_result(Shape{}, Buffer::Constant(1, static_cast<Scalar>(loss)), {logits},
                     [probs = std::move(probs), lab = std::move(lab), n](detail::Node& self) {
                       RowMatrix g = probs;
                       for (int i = 0; i < n; ++i) g(i, lab[static_cast<std::size_t>(i)]) -= 1.0f;
                       g *= self.grad(0) / static_cast<Scalar>(n);
                       accumulate(*self.parents[0],
                                  Eigen::Map<const Buffer>(g.data(), g.size()));
                     });
}

// ---------------------------------------------------------------------------
// Optimizers

void sgd_step(std::span<Tensor> params, Scalar lr) {
  for (auto& p : params) {
    if (p.has_grad()) p.mutable_data() -= lr * p.node()->grad;
    p.zero_grad();
  }
}

Sgd::Sgd(std::vector<Tensor> params, Scalar lr, Scalar momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.push_back(Buffer::Zero(p.numel()));
}

void Sgd::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p.has_grad()) {
      velocity_[i] = momentum_ * velocity_[i] + p.node()->grad;
    } else {
      velocity_[i] *= momentum_;
    }
    p.mutable_data() -= lr_ * velocity_[i];
    p.zero_grad();
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace cgl
