// Convolution, pooling, per-channel and normalization ops.

#include <algorithm>
#include <cmath>
#include <limits>

#include "cgl/tensor.hpp"

namespace cgl {

namespace {

void accumulate(detail::Node& parent, const Buffer& g) {
  if (!parent.requires_grad) return;
  parent.grad_buffer() += g;
}

void require_rank(const Tensor& x, int rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_str(x.shape()));
  }
}

// Channel count and the number of contiguous elements per (sample, channel).
struct ChannelLayout {
  int batch;
  int channels;
  Eigen::Index inner;
};

ChannelLayout channel_layout(const Tensor& x, const Tensor& per_channel, const char* op) {
  if (x.rank() < 2 || per_channel.numel() != x.dim(1)) {
    throw DimensionError(std::string(op) + ": tensor " + shape_str(x.shape()) +
                         " incompatible with per-channel operand " +
                         shape_str(per_channel.shape()));
  }
  const int n = x.dim(0);
  const int c = x.dim(1);
  const Eigen::Index inner = n * c == 0 ? 0 : x.numel() / (static_cast<Eigen::Index>(n) * c);
  return {n, c, inner};
}

ChannelLayout channel_layout(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("per-channel reduction on " + shape_str(x.shape()));
  const int n = x.dim(0);
  const int c = x.dim(1);
  const Eigen::Index inner = n * c == 0 ? 0 : x.numel() / (static_cast<Eigen::Index>(n) * c);
  return {n, c, inner};
}

// Unfolds one C x H x W image into a (C*k*k) x (Ho*Wo) row-major patch matrix.
void im2col(const Scalar* img, int channels, int height, int width, int k, int stride, int pad,
            int out_h, int out_w, Scalar* col) {
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        Scalar* row = col + (static_cast<Eigen::Index>((c * k + ky) * k + kx)) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          Scalar* dst = row + oy * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(dst, dst + out_w, Scalar{0});
            continue;
          }
          const Scalar* src = img + (static_cast<Eigen::Index>(c) * height + iy) * width;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < width) ? src[ix] : Scalar{0};
          }
        }
      }
    }
  }
}

void col2im(const Scalar* col, int channels, int height, int width, int k, int stride, int pad,
            int out_h, int out_w, Scalar* img) {
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Scalar* row =
            col + (static_cast<Eigen::Index>((c * k + ky) * k + kx)) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) continue;
          Scalar* dst = img + (static_cast<Eigen::Index>(c) * height + iy) * width;
          const Scalar* src = row + oy * out_w;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, int stride, int padding) {
  require_rank(input, 4, "conv2d");
  require_rank(weight, 4, "conv2d");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int o = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != c || weight.dim(3) != k) {
    throw DimensionError("conv2d: input " + shape_str(input.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
  }
  if (k % 2 == 0) throw DimensionError("conv2d: kernel size must be odd, weight " +
                                       shape_str(weight.shape()));
  if (stride < 1 || padding < 0) {
    throw DimensionError("conv2d: stride must be >= 1 and padding >= 0");
  }
  const int out_h = (h + 2 * padding - k) / stride + 1;
  const int out_w = (w + 2 * padding - k) / stride + 1;
  if (out_h <= 0 || out_w <= 0) {
    throw DimensionError("conv2d: input " + shape_str(input.shape()) + " smaller than kernel " +
                         shape_str(weight.shape()));
  }
  const Eigen::Index patch = static_cast<Eigen::Index>(c) * k * k;
  const Eigen::Index plane = static_cast<Eigen::Index>(out_h) * out_w;
  const Eigen::Index in_stride = static_cast<Eigen::Index>(c) * h * w;

  Eigen::Map<const RowMatrix> wmat(weight.data().data(), o, patch);
  const bool keep_cols = grad_enabled() && (input.requires_grad() || weight.requires_grad());
  Buffer cols(keep_cols ? patch * plane * n : patch * plane);
  Buffer out(static_cast<Eigen::Index>(n) * o * plane);
  for (int i = 0; i < n; ++i) {
    Scalar* col = cols.data() + (keep_cols ? i * patch * plane : 0);
    im2col(input.data().data() + i * in_stride, c, h, w, k, stride, padding, out_h, out_w, col);
    Eigen::Map<RowMatrix> y(out.data() + i * o * plane, o, plane);
    y.noalias() = wmat * Eigen::Map<const RowMatrix>(col, patch, plane);
  }
  if (!keep_cols) cols.resize(0);

  return make_result(
      Shape{n, o, out_h, out_w}, std::move(out), {input, weight},
      [cols = std::move(cols), n, c, h, w, o, k, stride, padding, out_h, out_w, patch, plane,
       in_stride](detail::Node& self) {
        auto& in_node = *self.parents[0];
        auto& w_node = *self.parents[1];
        Eigen::Map<const RowMatrix> wmat(w_node.value.data(), o, patch);
        if (w_node.requires_grad) {
          Eigen::Map<RowMatrix> dw(w_node.grad_buffer().data(), o, patch);
          for (int i = 0; i < n; ++i) {
            Eigen::Map<const RowMatrix> dy(self.grad.data() + i * o * plane, o, plane);
            Eigen::Map<const RowMatrix> col(cols.data() + i * patch * plane, patch, plane);
            dw.noalias() += dy * col.transpose();
          }
        }
        if (in_node.requires_grad) {
          Buffer& dx = in_node.grad_buffer();
          RowMatrix dcol(patch, plane);
          for (int i = 0; i < n; ++i) {
            Eigen::Map<const RowMatrix> dy(self.grad.data() + i * o * plane, o, plane);
            dcol.noalias() = wmat.transpose() * dy;
            col2im(dcol.data(), c, h, w, k, stride, padding, out_h, out_w,
                   dx.data() + i * in_stride);
          }
        }
      });
}

Tensor max_pool2(const Tensor& x) {
  require_rank(x, 4, "max_pool2");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = h / 2, ow = w / 2;
  const Eigen::Index out_size = static_cast<Eigen::Index>(n) * c * oh * ow;
  Buffer out(out_size);
  std::vector<Eigen::Index> argmax(static_cast<std::size_t>(out_size));
  const Scalar* src = x.data().data();
  Eigen::Index o = 0;
  for (int plane = 0; plane < n * c; ++plane) {
    const Eigen::Index base = static_cast<Eigen::Index>(plane) * h * w;
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx, ++o) {
        Eigen::Index best = base + (2 * y) * w + 2 * xx;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const Eigen::Index idx = base + (2 * y + dy) * w + (2 * xx + dx);
            if (src[idx] > src[best]) best = idx;
          }
        }
        out(o) = src[best];
        argmax[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  return make_result(Shape{n, c, oh, ow}, std::move(out), {x},
                     [argmax = std::move(argmax)](detail::Node& self) {
                       auto& p = *self.parents[0];
                       Buffer& g = p.grad_buffer();
                       for (std::size_t i = 0; i < argmax.size(); ++i) {
                         g(argmax[i]) += self.grad(static_cast<Eigen::Index>(i));
                       }
                     });
}

Tensor avg_pool(const Tensor& x, int factor) {
  require_rank(x, 4, "avg_pool");
  if (factor < 1) throw DimensionError("avg_pool: factor must be >= 1");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % factor != 0 || w % factor != 0) {
    throw DimensionError("avg_pool: " + shape_str(x.shape()) + " not divisible by factor " +
                         std::to_string(factor));
  }
  if (factor == 1) return x;
  const int oh = h / factor, ow = w / factor;
  const Scalar inv = 1.0f / static_cast<Scalar>(factor * factor);
  Buffer out = Buffer::Zero(static_cast<Eigen::Index>(n) * c * oh * ow);
  const Scalar* src = x.data().data();
  for (int plane = 0; plane < n * c; ++plane) {
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        out((static_cast<Eigen::Index>(plane) * oh + y / factor) * ow + xx / factor) +=
            src[(static_cast<Eigen::Index>(plane) * h + y) * w + xx];
      }
    }
  }
  out *= inv;
  return make_result(Shape{n, c, oh, ow}, std::move(out), {x},
                     [n, c, h, w, oh, ow, factor, inv](detail::Node& self) {
                       Buffer& g = self.parents[0]->grad_buffer();
                       for (int plane = 0; plane < n * c; ++plane) {
                         for (int y = 0; y < h; ++y) {
                           for (int xx = 0; xx < w; ++xx) {
                             g((static_cast<Eigen::Index>(plane) * h + y) * w + xx) +=
                                 inv * self.grad((static_cast<Eigen::Index>(plane) * oh +
                                                  y / factor) * ow + xx / factor);
                           }
                         }
                       }
                     });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const int n = x.dim(0), c = x.dim(1);
  const Eigen::Index plane = static_cast<Eigen::Index>(x.dim(2)) * x.dim(3);
  Eigen::Map<const RowMatrix> m(x.data().data(), static_cast<Eigen::Index>(n) * c, plane);
  Buffer out = (m.rowwise().sum() / static_cast<Scalar>(plane)).array();
  return make_result(Shape{n, c}, std::move(out), {x}, [plane](detail::Node& self) {
    Buffer& g = self.parents[0]->grad_buffer();
    Eigen::Map<RowMatrix> gm(g.data(), self.grad.size(), plane);
    gm.colwise() += (self.grad / static_cast<Scalar>(plane)).matrix();
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const int n = x.dim(0), c = x.dim(1), k = weight.dim(0);
  if (weight.dim(1) != c || bias.numel() != k) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + ", weight " +
                         shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
  }
  Eigen::Map<const RowMatrix> xm(x.data().data(), n, c);
  Eigen::Map<const RowMatrix> wm(weight.data().data(), k, c);
  RowMatrix y = xm * wm.transpose();
  y.rowwise() += bias.data().matrix().transpose();
  Buffer out = Eigen::Map<const Buffer>(y.data(), y.size());
  return make_result(Shape{n, k}, std::move(out), {x, weight, bias},
                     [n, c, k](detail::Node& self) {
                       Eigen::Map<const RowMatrix> dy(self.grad.data(), n, k);
                       auto& xn = *self.parents[0];
                       auto& wn = *self.parents[1];
                       auto& bn = *self.parents[2];
                       if (xn.requires_grad) {
                         Eigen::Map<RowMatrix> dx(xn.grad_buffer().data(), n, c);
                         dx.noalias() += dy * Eigen::Map<const RowMatrix>(wn.value.data(), k, c);
                       }
                       if (wn.requires_grad) {
                         Eigen::Map<RowMatrix> dw(wn.grad_buffer().data(), k, c);
                         dw.noalias() +=
                             dy.transpose() * Eigen::Map<const RowMatrix>(xn.value.data(), n, c);
                       }
                       if (bn.requires_grad) {
                         bn.grad_buffer() += dy.colwise().sum().transpose().array();
                       }
                     });
}

// ---------------------------------------------------------------------------
// Per-channel ops

namespace {

// Views x as (N*C) rows of `inner` elements and applies f(row, channel).
template <typename F>
void for_each_channel_row(Eigen::Index rows, int channels, Eigen::Index inner, F f) {
  for (Eigen::Index r = 0; r < rows; ++r) f(r, static_cast<int>(r % channels), r * inner, inner);
}

}  // namespace

Tensor add_channel(const Tensor& x, const Tensor& per_channel) {
  const auto [n, c, inner] = channel_layout(x, per_channel, "add_channel");
  Buffer out = x.data();
  const Buffer& b = per_channel.data();
  for_each_channel_row(static_cast<Eigen::Index>(n) * c, c, inner,
                       [&](Eigen::Index, int ch, Eigen::Index off, Eigen::Index len) {
                         out.segment(off, len) += b(ch);
                       });
  return make_result(x.shape(), std::move(out), {x, per_channel},
                     [n, c, inner](detail::Node& self) {
                       accumulate(*self.parents[0], self.grad);
                       auto& bn = *self.parents[1];
                       if (!bn.requires_grad) return;
                       Buffer& gb = bn.grad_buffer();
                       for_each_channel_row(
                           static_cast<Eigen::Index>(n) * c, c, inner,
                           [&](Eigen::Index, int ch, Eigen::Index off, Eigen::Index len) {
                             gb(ch) += static_cast<Scalar>(
                                 self.grad.segment(off, len).cast<double>().sum());
                           });
                     });
}

Tensor mul_channel(const Tensor& x, const Tensor& per_channel) {
  const auto [n, c, inner] = channel_layout(x, per_channel, "mul_channel");
  Buffer out = x.data();
  const Buffer& s = per_channel.data();
  for_each_channel_row(static_cast<Eigen::Index>(n) * c, c, inner,
                       [&](Eigen::Index, int ch, Eigen::Index off, Eigen::Index len) {
                         out.segment(off, len) *= s(ch);
                       });
  return make_result(
      x.shape(), std::move(out), {x, per_channel}, [n, c, inner](detail::Node& self) {
        auto& xn = *self.parents[0];
        auto& sn = *self.parents[1];
        Buffer* gx = xn.requires_grad ? &xn.grad_buffer() : nullptr;
        Buffer* gs = sn.requires_grad ? &sn.grad_buffer() : nullptr;
        for_each_channel_row(static_cast<Eigen::Index>(n) * c, c, inner,
                             [&](Eigen::Index, int ch, Eigen::Index off, Eigen::Index len) {
                               if (gx) gx->segment(off, len) += self.grad.segment(off, len) * sn.value(ch);
                               if (gs) {
                                 (*gs)(ch) += static_cast<Scalar>(
                                     (self.grad.segment(off, len).cast<double>() *
                                      xn.value.segment(off, len).cast<double>())
                                         .sum());
                               }
                             });
      });
}

Tensor div_channel(const Tensor& x, const Tensor& per_channel) {
  const auto [n, c, inner] = channel_layout(x, per_channel, "div_channel");
  Buffer out = x.data();
  const Buffer& s = per_channel.data();
  for_each_channel_row(static_cast<Eigen::Index>(n) * c, c, inner,
                       [&](Eigen::Index, int ch, Eigen::Index off, Eigen::Index len) {
                         out.segment(off, len) /= s(ch);
                       });
  return make_result(
      x.shape(), std::move(out), {x, per_channel}, [n, c, inner](detail::Node& self) {
        auto& xn = *self.parents[0];
        auto& sn = *self.parents[1];
        Buffer* gx = xn.requires_grad ? &xn.grad_buffer() : nullptr;
        Buffer* gs = sn.requires_grad ? &sn.grad_buffer() : nullptr;
        for_each_channel_row(
            static_cast<Eigen::Index>(n) * c, c, inner,
            [&](Eigen::Index, int ch, Eigen::Index off, Eigen::Index len) {
              const Scalar inv = 1.0f / sn.value(ch);
              if (gx) gx->segment(off, len) += self.grad.segment(off, len) * inv;
              if (gs) {
                // d(x/s)/ds = -out/s
                (*gs)(ch) -= static_cast<Scalar>(
                    (self.grad.segment(off, len).cast<double>() *
                     self.value.segment(off, len).cast<double>())
                        .sum() *
                    inv);
              }
            });
      });
}

namespace {

void channel_moments(const Tensor& x, Eigen::ArrayXd& mean, Eigen::ArrayXd& var) {
  const auto [n, c, inner] = channel_layout(x);
  mean = Eigen::ArrayXd::Zero(c);
  var = Eigen::ArrayXd::Zero(c);
  const double count = static_cast<double>(n) * static_cast<double>(inner);
  if (count <= 0) throw DimensionError("batch statistics need N*H*W >= 1, got " +
                                       shape_str(x.shape()));
  const Buffer& v = x.data();
  for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(n) * c; ++r) {
    mean(r % c) += v.segment(r * inner, inner).cast<double>().sum();
  }
  mean /= count;
  for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(n) * c; ++r) {
    var(r % c) += (v.segment(r * inner, inner).cast<double>() - mean(r % c)).square().sum();
  }
  var /= count;
}

}  // namespace

Tensor batch_std(const Tensor& x, Scalar eps) {
  const auto [n, c, inner] = channel_layout(x);
  Eigen::ArrayXd mu, var;
  channel_moments(x, mu, var);
  const Eigen::ArrayXd sd = (var + static_cast<double>(eps)).sqrt();
  const double count = static_cast<double>(n) * static_cast<double>(inner);
  return make_result(
      Shape{c}, sd.cast<Scalar>(), {x}, [n, c, inner, mu, sd, count](detail::Node& self) {
        Buffer& g = self.parents[0]->grad_buffer();
        const Buffer& v = self.parents[0]->value;
        for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(n) * c; ++r) {
          const auto ch = r % c;
          const double coef = self.grad(ch) / (count * sd(ch));
          g.segment(r * inner, inner) +=
              ((v.segment(r * inner, inner).cast<double>() - mu(ch)) * coef).cast<Scalar>();
        }
      });
}

Tensor batch_normalize(const Tensor& x, Scalar eps, BatchMoments* moments) {
  const auto [n, c, inner] = channel_layout(x);
  Eigen::ArrayXd mu, var;
  channel_moments(x, mu, var);
  if (moments) {
    moments->mean = mu.cast<Scalar>();
    moments->var = var.cast<Scalar>();
  }
  const Eigen::ArrayXd inv_sd = (var + static_cast<double>(eps)).rsqrt();
  Buffer out(x.numel());
  const Buffer& v = x.data();
  for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(n) * c; ++r) {
    const auto ch = r % c;
    out.segment(r * inner, inner) =
        ((v.segment(r * inner, inner).cast<double>() - mu(ch)) * inv_sd(ch)).cast<Scalar>();
  }
  const double count = static_cast<double>(n) * static_cast<double>(inner);
  return make_result(
      x.shape(), std::move(out), {x}, [n, c, inner, inv_sd, count](detail::Node& self) {
        // dx = inv_sd * (dy - mean(dy) - y * mean(dy * y)), per channel
        Eigen::ArrayXd mean_dy = Eigen::ArrayXd::Zero(c);
        Eigen::ArrayXd mean_dyy = Eigen::ArrayXd::Zero(c);
        for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(n) * c; ++r) {
          const auto dy = self.grad.segment(r * inner, inner).cast<double>();
          mean_dy(r % c) += dy.sum();
          mean_dyy(r % c) += (dy * self.value.segment(r * inner, inner).cast<double>()).sum();
        }
        mean_dy /= count;
        mean_dyy /= count;
        Buffer& g = self.parents[0]->grad_buffer();
        for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(n) * c; ++r) {
          const auto ch = r % c;
          g.segment(r * inner, inner) +=
              ((self.grad.segment(r * inner, inner).cast<double>() - mean_dy(ch) -
                self.value.segment(r * inner, inner).cast<double>() * mean_dyy(ch)) *
               inv_sd(ch))
                  .cast<Scalar>();
        }
      });
}

Tensor slice_channel(const Tensor& x, int channel) {
  require_rank(x, 4, "slice_channel");
  const int n = x.dim(0), c = x.dim(1);
  if (channel < 0 || channel >= c) {
    throw IndexError("slice_channel: channel " + std::to_string(channel) + " outside " +
                     shape_str(x.shape()));
  }
  const Eigen::Index plane = static_cast<Eigen::Index>(x.dim(2)) * x.dim(3);
  Buffer out(static_cast<Eigen::Index>(n) * plane);
  for (int i = 0; i < n; ++i) {
    out.segment(i * plane, plane) = x.data().segment((static_cast<Eigen::Index>(i) * c + channel) * plane, plane);
  }
  return make_result(Shape{n, x.dim(2), x.dim(3)}, std::move(out), {x},
                     [n, c, channel, plane](detail::Node& self) {
                       Buffer& g = self.parents[0]->grad_buffer();
                       for (int i = 0; i < n; ++i) {
                         g.segment((static_cast<Eigen::Index>(i) * c + channel) * plane, plane) +=
                             self.grad.segment(i * plane, plane);
                       }
                     });
}

Tensor narrow(const Tensor& x, int begin, int end) {
  if (x.rank() < 1) throw DimensionError("narrow on a scalar");
  if (begin < 0 || end > x.dim(0) || begin > end) {
    throw IndexError("narrow: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + shape_str(x.shape()));
  }
  const Eigen::Index row = x.dim(0) == 0 ? 0 : x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = end - begin;
  Buffer out = x.data().segment(begin * row, (end - begin) * row);
  return make_result(std::move(shape), std::move(out), {x}, [begin, row](detail::Node& self) {
    self.parents[0]->grad_buffer().segment(begin * row, self.grad.size()) += self.grad;
  });
}

}  // namespace cgl
