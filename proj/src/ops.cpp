#include "rafd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <string>

#include "kernel_rows.hpp"
#include "rafd/kernels.hpp"

namespace rafd {

namespace {

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.defined() && b.defined(), std::string(op) + ": undefined operand");
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
void require_rank(const char* op, const char* name, const Tensor<T>& t, std::size_t rank) {
  require(t.defined(), std::string(op) + ": " + name + " is undefined");
  require(t.rank() == rank, std::string(op) + ": " + name + " must have rank " + std::to_string(rank) + ", got " +
                                shape_str(t.shape()));
}

template <typename T>
bool needs(const ImplPtr<T>& p) {
  return p && p->requires_grad;
}

// Elementwise unary op with derivative expressed from (x, y).
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& a, F f, D dfdx) {
  require(a.defined(), "unary op: undefined operand");
  std::vector<T> y(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(x[i]);
  auto ai = a.impl();
  return detail::make_result<T>(a.shape(), std::move(y), {a}, [ai, dfdx](const TensorImpl<T>& out) {
    if (!needs(ai)) return;
    auto& g = ai->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * dfdx(ai->data[i], out.data[i]);
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] + b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(a.shape(), std::move(y), {a, b}, [ai, bi](const TensorImpl<T>& out) {
    for (const auto& p : {ai, bi}) {
      if (!needs(p)) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] - b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(a.shape(), std::move(y), {a, b}, [ai, bi](const TensorImpl<T>& out) {
    if (needs(ai)) {
      auto& g = ai->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    }
    if (needs(bi)) {
      auto& g = bi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= out.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(a.shape(), std::move(y), {a, b}, [ai, bi](const TensorImpl<T>& out) {
    if (needs(ai)) {
      auto& g = ai->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * bi->data[i];
    }
    if (needs(bi)) {
      auto& g = bi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * ai->data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return unary<T>(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary<T>(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary<T>(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary<T>(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return unary<T>(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary<T>(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  require(a.defined(), "sum: undefined operand");
  T s = 0;
  for (T v : a.data()) s += v;
  auto ai = a.impl();
  return detail::make_result<T>(Shape{}, {s}, {a}, [ai](const TensorImpl<T>& out) {
    if (!needs(ai)) return;
    auto& g = ai->ensure_grad();
    for (auto& v : g) v += out.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  require(a.defined() && a.numel() > 0, "mean: empty operand");
  T s = 0;
  for (T v : a.data()) s += v;
  const T inv = T(1) / static_cast<T>(a.numel());
  auto ai = a.impl();
  return detail::make_result<T>(Shape{}, {s * inv}, {a}, [ai, inv](const TensorImpl<T>& out) {
    if (!needs(ai)) return;
    auto& g = ai->ensure_grad();
    for (auto& v : g) v += out.grad[0] * inv;
  });
}

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("l1_loss", a, b);
  require(a.numel() > 0, "l1_loss: empty operands");
  T s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::abs(a.data()[i] - b.data()[i]);
  const T inv = T(1) / static_cast<T>(a.numel());
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(Shape{}, {s * inv}, {a, b}, [ai, bi, inv](const TensorImpl<T>& out) {
    const T g0 = out.grad[0] * inv;
    for (std::size_t i = 0; i < ai->data.size(); ++i) {
      const T d = ai->data[i] - bi->data[i];
      const T sg = d > T(0) ? g0 : (d < T(0) ? -g0 : T(0));
      if (needs(ai)) ai->ensure_grad()[i] += sg;
      if (needs(bi)) bi->ensure_grad()[i] -= sg;
    }
  });
}

template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& a, const std::vector<T>& w) {
  require(a.defined() && a.numel() == w.size(), "weighted_sum: weight count must equal numel");
  T s = 0;
  for (std::size_t i = 0; i < w.size(); ++i) s += a.data()[i] * w[i];
  auto ai = a.impl();
  return detail::make_result<T>(Shape{}, {s}, {a}, [ai, w](const TensorImpl<T>& out) {
    if (!needs(ai)) return;
    auto& g = ai->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[0] * w[i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require(a.defined(), "reshape: undefined operand");
  require(numel_of(shape) == a.numel(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  auto ai = a.impl();
  return detail::make_result<T>(std::move(shape), a.vec(), {a}, [ai](const TensorImpl<T>& out) {
    if (!needs(ai)) return;
    auto& g = ai->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
  });
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  require_rank("transpose2d", "input", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> y(a.numel());
  kernels::rows::transpose(a.data().data(), r, c, y.data());
  auto ai = a.impl();
  return detail::make_result<T>(Shape{c, r}, std::move(y), {a}, [ai, r, c](const TensorImpl<T>& out) {
    if (!needs(ai)) return;
    auto& g = ai->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += out.grad[j * r + i];
  });
}

template <typename T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), "concat0: no parts");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  require(parts[0].rank() >= 1, "concat0: parts must have rank >= 1");
  std::size_t rows = 0;
  std::vector<T> y;
  std::vector<ImplPtr<T>> impls;
  for (const auto& p : parts) {
    require(p.defined() && p.rank() == tail.size() + 1 && Shape(p.shape().begin() + 1, p.shape().end()) == tail,
            "concat0: trailing dims differ: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    rows += p.dim(0);
    y.insert(y.end(), p.data().begin(), p.data().end());
    impls.push_back(p.impl());
  }
  Shape shape = tail;
  shape.insert(shape.begin(), rows);
  return detail::make_result<T>(std::move(shape), std::move(y), parts, [impls](const TensorImpl<T>& out) {
    std::size_t off = 0;
    for (const auto& p : impls) {
      if (needs(p)) {
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[off + i];
      }
      off += p->data.size();
    }
  });
}

template <typename T>
Tensor<T> slice0(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  require(a.defined() && a.rank() >= 1, "slice0: operand must have rank >= 1");
  require(begin <= end && end <= a.dim(0), "slice0: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                               ") out of bounds for dim 0 of " + shape_str(a.shape()));
  const std::size_t inner = a.numel() / std::max<std::size_t>(a.dim(0), 1);
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<T> y(a.data().begin() + begin * inner, a.data().begin() + end * inner);
  auto ai = a.impl();
  const std::size_t off = begin * inner;
  return detail::make_result<T>(std::move(shape), std::move(y), {a}, [ai, off](const TensorImpl<T>& out) {
    if (!needs(ai)) return;
    auto& g = ai->ensure_grad();
    for (std::size_t i = 0; i < out.grad.size(); ++i) g[off + i] += out.grad[i];
  });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  require_rank("slice_cols", "input", a, 2);
  const std::size_t n = a.dim(0), c = a.dim(1);
  require(begin <= end && end <= c, "slice_cols: column range out of bounds for dim 1 of " + shape_str(a.shape()));
  const std::size_t w = end - begin;
  std::vector<T> y(n * w);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) y[i * w + j] = a.data()[i * c + begin + j];
  auto ai = a.impl();
  return detail::make_result<T>(Shape{n, w}, std::move(y), {a}, [ai, n, c, w, begin](const TensorImpl<T>& out) {
    if (!needs(ai)) return;
    auto& g = ai->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * c + begin + j] += out.grad[i * w + j];
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<std::size_t>& index) {
  require_rank("gather_rows", "input", a, 2);
  const std::size_t n = a.dim(0), c = a.dim(1);
  std::vector<T> y(index.size() * c);
  for (std::size_t r = 0; r < index.size(); ++r) {
    require(index[r] < n, "gather_rows: row index " + std::to_string(index[r]) + " >= dim 0 (" + std::to_string(n) + ")");
    std::copy_n(a.data().begin() + index[r] * c, c, y.begin() + r * c);
  }
  auto ai = a.impl();
  return detail::make_result<T>(Shape{index.size(), c}, std::move(y), {a}, [ai, index, c](const TensorImpl<T>& out) {
    if (!needs(ai)) return;
    auto& g = ai->ensure_grad();
    for (std::size_t r = 0; r < index.size(); ++r)
      for (std::size_t j = 0; j < c; ++j) g[index[r] * c + j] += out.grad[r * c + j];
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("matmul", "lhs", a, 2);
  require_rank("matmul", "rhs", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dims differ: dim 1 of lhs is " + std::to_string(k) + ", dim 0 of rhs is " +
                             std::to_string(b.dim(0)));
  std::vector<T> y(m * n);
  kernels::gemm(kernels::Trans::No, kernels::Trans::No, m, n, k, a.data().data(), b.data().data(), y.data(), false);
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(Shape{m, n}, std::move(y), {a, b}, [ai, bi, m, n, k](const TensorImpl<T>& out) {
    using kernels::Trans;
    if (needs(ai)) {
      kernels::gemm(Trans::No, Trans::Yes, m, k, n, out.grad.data(), bi->data.data(), ai->ensure_grad().data(), true);
    }
    if (needs(bi)) {
      kernels::gemm(Trans::Yes, Trans::No, k, n, m, ai->data.data(), out.grad.data(), bi->ensure_grad().data(), true);
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank("linear", "input", x, 2);
  require_rank("linear", "weight", weight, 2);
  const std::size_t n = x.dim(0), cin = x.dim(1), cout = weight.dim(0);
  require(weight.dim(1) == cin, "linear: input features (" + std::to_string(cin) + ") != dim 1 of weight (" +
                                    std::to_string(weight.dim(1)) + ")");
  if (bias.defined()) require(bias.numel() == cout, "linear: bias size != dim 0 of weight");
  std::vector<T> y(n * cout);
  kernels::gemm(kernels::Trans::No, kernels::Trans::Yes, n, cout, cin, x.data().data(), weight.data().data(), y.data(),
                false);
  if (bias.defined()) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < cout; ++j) y[i * cout + j] += bias.data()[j];
  }
  auto xi = x.impl(), wi = weight.impl(), bi = bias.defined() ? bias.impl() : ImplPtr<T>{};
  return detail::make_result<T>(
      Shape{n, cout}, std::move(y), {x, weight, bias}, [xi, wi, bi, n, cin, cout](const TensorImpl<T>& out) {
        using kernels::Trans;
        if (needs(xi)) {
          kernels::gemm(Trans::No, Trans::No, n, cin, cout, out.grad.data(), wi->data.data(), xi->ensure_grad().data(),
                        true);
        }
        if (needs(wi)) {
          kernels::gemm(Trans::Yes, Trans::No, cout, cin, n, out.grad.data(), xi->data.data(), wi->ensure_grad().data(),
                        true);
        }
        if (needs(bi)) {
          auto& g = bi->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < cout; ++j) g[j] += out.grad[i * cout + j];
        }
      });
}

template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  require_rank("add_rowvec", "input", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  require(v.defined() && v.numel() == c, "add_rowvec: vector size must equal dim 1 of input");
  std::vector<T> y(x.vec());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] += v.data()[j];
  auto xi = x.impl(), vi = v.impl();
  return detail::make_result<T>(x.shape(), std::move(y), {x, v}, [xi, vi, n, c](const TensorImpl<T>& out) {
    if (needs(xi)) {
      auto& g = xi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    }
    if (needs(vi)) {
      auto& g = vi->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += out.grad[i * c + j];
    }
  });
}

template <typename T>
Tensor<T> layer_scale_add(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& gamma) {
  require_same_shape("layer_scale_add", x, y);
  require(x.rank() >= 1, "layer_scale_add: rank must be >= 1");
  const std::size_t c = x.shape().back();
  require(gamma.defined() && gamma.numel() == c, "layer_scale_add: gamma size must equal last dim of input");
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + gamma.data()[i % c] * y.data()[i];
  auto xi = x.impl(), yi = y.impl(), gi = gamma.impl();
  return detail::make_result<T>(x.shape(), std::move(out), {x, y, gamma}, [xi, yi, gi, c](const TensorImpl<T>& o) {
    if (needs(xi)) {
      auto& g = xi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (needs(yi)) {
      auto& g = yi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * gi->data[i % c];
    }
    if (needs(gi)) {
      auto& g = gi->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % c] += o.grad[i] * yi->data[i];
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require(x.defined() && x.rank() >= 1, "layer_norm: rank must be >= 1");
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.numel() / c;
  require(gamma.numel() == c && beta.numel() == c, "layer_norm: gamma/beta size must equal last dim (" +
                                                       std::to_string(c) + ")");
  std::vector<T> y(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (xr[j] - mu) * is;
      y[r * c + j] = xhat[r * c + j] * gamma.data()[j] + beta.data()[j];
    }
  }
  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return detail::make_result<T>(
      x.shape(), std::move(y), {x, gamma, beta},
      [xi, gi, bi, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, c](const TensorImpl<T>& out) {
        if (needs(gi) || needs(bi)) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < c; ++j) {
              if (needs(gi)) gi->ensure_grad()[j] += out.grad[r * c + j] * xhat[r * c + j];
              if (needs(bi)) bi->ensure_grad()[j] += out.grad[r * c + j];
            }
          }
        }
        if (!needs(xi)) return;
        auto& gx = xi->ensure_grad();
        std::vector<T> dxhat(c);
        for (std::size_t r = 0; r < rows; ++r) {
          T s1 = 0, s2 = 0;
          for (std::size_t j = 0; j < c; ++j) {
            dxhat[j] = out.grad[r * c + j] * gi->data[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * xhat[r * c + j];
          }
          const T k = inv_std[r] / static_cast<T>(c);
          for (std::size_t j = 0; j < c; ++j) {
            gx[r * c + j] += k * (static_cast<T>(c) * dxhat[j] - s1 - xhat[r * c + j] * s2);
          }
        }
      });
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                      Tensor<T>& running_var, T eps, BatchNormMode mode, T momentum) {
  require(x.defined() && (x.rank() == 3 || x.rank() == 4), "batchnorm2d: input must be C x H x W or N x C x H x W");
  require(eps > T(0), "batchnorm2d: eps must be positive");
  const bool batched = x.rank() == 4;
  const std::size_t n = batched ? x.dim(0) : 1;
  const std::size_t ch = x.dim(batched ? 1 : 0);
  const std::size_t hw = x.dim(batched ? 2 : 1) * x.dim(batched ? 3 : 2);
  require(gamma.numel() == ch, "batchnorm2d: gamma has " + std::to_string(gamma.numel()) +
                                   " entries but input channel dim is " + std::to_string(ch));
  require(beta.numel() == ch, "batchnorm2d: beta has " + std::to_string(beta.numel()) +
                                  " entries but input channel dim is " + std::to_string(ch));
  require(running_mean.numel() == ch && running_var.numel() == ch, "batchnorm2d: running stats size != channels");
  const std::size_t count = n * hw;
  std::vector<T> mu(ch), inv_std(ch);
  const auto xd = x.data();
  if (mode == BatchNormMode::Train) {
    for (std::size_t c = 0; c < ch; ++c) {
      T s = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) s += xd[(b * ch + c) * hw + i];
      const T m = s / static_cast<T>(count);
      T v = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const T d = xd[(b * ch + c) * hw + i] - m;
          v += d * d;
        }
      v /= static_cast<T>(count);
      mu[c] = m;
      inv_std[c] = T(1) / std::sqrt(v + eps);
      const T unbiased = count > 1 ? v * static_cast<T>(count) / static_cast<T>(count - 1) : v;
      auto rm = running_mean.data_mut();
      auto rv = running_var.data_mut();
      rm[c] = (T(1) - momentum) * rm[c] + momentum * m;
      rv[c] = (T(1) - momentum) * rv[c] + momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < ch; ++c) {
      mu[c] = running_mean.data()[c];
      inv_std[c] = T(1) / std::sqrt(running_var.data()[c] + eps);
    }
  }
  std::vector<T> y(x.numel()), xhat(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * ch + c) * hw + i;
        xhat[idx] = (xd[idx] - mu[c]) * inv_std[c];
        y[idx] = gamma.data()[c] * xhat[idx] + beta.data()[c];
      }
  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  const bool train = mode == BatchNormMode::Train;
  return detail::make_result<T>(
      x.shape(), std::move(y), {x, gamma, beta},
      [xi, gi, bi, xhat = std::move(xhat), inv_std = std::move(inv_std), n, ch, hw, count,
       train](const TensorImpl<T>& out) {
        for (std::size_t c = 0; c < ch; ++c) {
          T sg = 0, sgx = 0;
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t idx = (b * ch + c) * hw + i;
              sg += out.grad[idx];
              sgx += out.grad[idx] * xhat[idx];
            }
          if (needs(gi)) gi->ensure_grad()[c] += sgx;
          if (needs(bi)) bi->ensure_grad()[c] += sg;
          if (!needs(xi)) continue;
          auto& gx = xi->ensure_grad();
          const T gam = gi->data[c];
          if (!train) {
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t idx = (b * ch + c) * hw + i;
                gx[idx] += out.grad[idx] * gam * inv_std[c];
              }
            continue;
          }
          // dxhat = g * gamma, so its sums are gamma * (sg, sgx).
          const T k = inv_std[c] / static_cast<T>(count);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t idx = (b * ch + c) * hw + i;
              gx[idx] += k * gam * (static_cast<T>(count) * out.grad[idx] - sg - xhat[idx] * sgx);
            }
        }
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, const std::vector<std::size_t>& axes_in) {
  require(x.defined(), "softmax: undefined operand");
  require(!axes_in.empty(), "softmax: axis set must be non-empty");
  std::vector<std::size_t> axes = axes_in;
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  const std::size_t rank = x.rank();
  for (std::size_t a : axes) require(a < rank, "softmax: axis " + std::to_string(a) + " out of range for " + shape_str(x.shape()));

  std::size_t inner = 1;
  for (std::size_t a : axes) inner *= x.dim(a);
  const std::size_t groups = x.numel() / std::max<std::size_t>(inner, 1);

  // order[g * inner + j] = flat index of the j-th member of group g. Empty
  // when the axes are the trailing ones (groups are contiguous rows).
  std::vector<std::size_t> order;
  bool trailing = true;
  for (std::size_t i = 0; i < axes.size(); ++i) trailing = trailing && axes[i] == rank - axes.size() + i;
  if (!trailing) {
    std::vector<bool> in_set(rank, false);
    for (std::size_t a : axes) in_set[a] = true;
    order.resize(x.numel());
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t flat = 0; flat < x.numel(); ++flat) {
      std::size_t g = 0, j = 0;
      for (std::size_t d = 0; d < rank; ++d) {
        if (in_set[d]) {
          j = j * x.dim(d) + idx[d];
        } else {
          g = g * x.dim(d) + idx[d];
        }
      }
      order[g * inner + j] = flat;
      for (std::size_t d = rank; d-- > 0;) {
        if (++idx[d] < x.dim(d)) break;
        idx[d] = 0;
      }
    }
  }

  std::vector<T> y(x.numel());
  if (trailing) {
    kernels::softmax_rows(x.data().data(), groups, inner, y.data());
  } else {
    std::vector<T> buf(x.numel()), out(x.numel());
    for (std::size_t i = 0; i < order.size(); ++i) buf[i] = x.data()[order[i]];
    kernels::softmax_rows(buf.data(), groups, inner, out.data());
    for (std::size_t i = 0; i < order.size(); ++i) y[order[i]] = out[i];
  }
  auto xi = x.impl();
  return detail::make_result<T>(
      x.shape(), std::move(y), {x}, [xi, order = std::move(order), groups, inner](const TensorImpl<T>& out) {
        if (!needs(xi)) return;
        auto& gx = xi->ensure_grad();
        auto at = [&](std::size_t i) { return order.empty() ? i : order[i]; };
        for (std::size_t g = 0; g < groups; ++g) {
          T dot = 0;
          for (std::size_t j = 0; j < inner; ++j) {
            const std::size_t f = at(g * inner + j);
            dot += out.grad[f] * out.data[f];
          }
          for (std::size_t j = 0; j < inner; ++j) {
            const std::size_t f = at(g * inner + j);
            gx[f] += out.data[f] * (out.grad[f] - dot);
          }
        }
      });
}

template <typename T>
Tensor<T> mask_fill(const Tensor<T>& x, const std::vector<std::uint8_t>& mask) {
  require(x.defined() && mask.size() == x.numel(), "mask_fill: mask size must equal numel");
  constexpr T kBlocked = T(-1e30);
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = mask[i] ? x.data()[i] : kBlocked;
  auto xi = x.impl();
  return detail::make_result<T>(x.shape(), std::move(y), {x}, [xi, mask](const TensorImpl<T>& out) {
    if (!needs(xi)) return;
    auto& g = xi->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (mask[i]) g[i] += out.grad[i];
  });
}

template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const std::vector<std::uint8_t>* mask) {
  require_rank("attention", "q", q, 2);
  require_rank("attention", "k", k, 2);
  require_rank("attention", "v", v, 2);
  require(q.dim(1) == k.dim(1), "attention: feature dim of q (" + std::to_string(q.dim(1)) + ") != k (" +
                                    std::to_string(k.dim(1)) + ")");
  require(k.dim(0) == v.dim(0), "attention: sequence length of k (" + std::to_string(k.dim(0)) + ") != v (" +
                                    std::to_string(v.dim(0)) + ")");
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(q.dim(1)));
  Tensor<T> scores = scale(matmul(q, transpose2d(k)), inv_sqrt_d);
  if (mask) {
    require(mask->size() == scores.numel(), "attention: mask must have Nq*Nk entries");
    scores = mask_fill(scores, *mask);
  }
  return matmul(softmax(scores, {1}), v);
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  require(input.defined() && (input.rank() == 3 || input.rank() == 4), "conv2d: input must be C x H x W or N x C x H x W");
  require_rank("conv2d", "weight", weight, 4);
  require(stride >= 1, "conv2d: stride must be >= 1");
  const bool batched = input.rank() == 4;
  const std::size_t n = batched ? input.dim(0) : 1;
  const std::size_t cin = input.dim(batched ? 1 : 0);
  const std::size_t h = input.dim(batched ? 2 : 1), w = input.dim(batched ? 3 : 2);
  const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  require(weight.dim(1) == cin, "conv2d: input channels (" + std::to_string(cin) + ") != dim 1 of weight (" +
                                    std::to_string(weight.dim(1)) + ")");
  require(kh <= h + 2 * padding, "conv2d: kernel height " + std::to_string(kh) + " exceeds padded input height " +
                                     std::to_string(h + 2 * padding));
  require(kw <= w + 2 * padding, "conv2d: kernel width " + std::to_string(kw) + " exceeds padded input width " +
                                     std::to_string(w + 2 * padding));
  if (bias.defined()) {
    require(bias.numel() == cout, "conv2d: bias has " + std::to_string(bias.numel()) + " entries, dim 0 of weight is " +
                                      std::to_string(cout));
  }
  const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::size_t wo = (w + 2 * padding - kw) / stride + 1;
  const std::size_t ckk = cin * kh * kw, howo = ho * wo;

  const bool keep_cols = GradMode::enabled() && (weight.requires_grad() || input.requires_grad());
  auto cols = std::make_shared<std::vector<T>>(n * ckk * howo);
  std::vector<T> y(n * cout * howo);
  for (std::size_t b = 0; b < n; ++b) {
    T* cb = cols->data() + b * ckk * howo;
    kernels::im2col(input.data().data() + b * cin * h * w, cin, h, w, kh, kw, stride, padding, cb);
    T* yb = y.data() + b * cout * howo;
    kernels::gemm(kernels::Trans::No, kernels::Trans::No, cout, howo, ckk, weight.data().data(), cb, yb, false);
    if (bias.defined()) {
      for (std::size_t o = 0; o < cout; ++o) {
        const T bo = bias.data()[o];
        for (std::size_t i = 0; i < howo; ++i) yb[o * howo + i] += bo;
      }
    }
  }
  if (!keep_cols) cols.reset();
  Shape shape = batched ? Shape{n, cout, ho, wo} : Shape{cout, ho, wo};
  auto xi = input.impl(), wi = weight.impl(), bi = bias.defined() ? bias.impl() : ImplPtr<T>{};
  return detail::make_result<T>(
      std::move(shape), std::move(y), {input, weight, bias},
      [xi, wi, bi, cols, n, cin, h, w, cout, kh, kw, stride, padding, ckk, howo](const TensorImpl<T>& out) {
        using kernels::Trans;
        std::vector<T> dcols;
        for (std::size_t b = 0; b < n; ++b) {
          const T* gb = out.grad.data() + b * cout * howo;
          if (needs(wi)) {
            kernels::gemm(Trans::No, Trans::Yes, cout, ckk, howo, gb, cols->data() + b * ckk * howo,
                          wi->ensure_grad().data(), true);
          }
          if (needs(bi)) {
            auto& g = bi->ensure_grad();
            for (std::size_t o = 0; o < cout; ++o) {
              T s = 0;
              for (std::size_t i = 0; i < howo; ++i) s += gb[o * howo + i];
              g[o] += s;
            }
          }
          if (needs(xi)) {
            dcols.resize(ckk * howo);
            kernels::gemm(Trans::Yes, Trans::No, ckk, howo, cout, wi->data.data(), gb, dcols.data(), false);
            kernels::col2im(dcols.data(), cin, h, w, kh, kw, stride, padding, xi->ensure_grad().data() + b * cin * h * w);
          }
        }
      });
}

template <typename T>
Tensor<T> grid_sample_bilinear(const Tensor<T>& input, const Tensor<T>& points, const Tensor<T>& fill) {
  require_rank("grid_sample", "input", input, 3);
  require_rank("grid_sample", "points", points, 2);
  require(points.dim(0) == 2, "grid_sample: dim 0 of points must be 2 (x, y), got " + std::to_string(points.dim(0)));
  require_rank("grid_sample", "fill", fill, 2);
  const std::size_t ch = input.dim(0), h = input.dim(1), w = input.dim(2), m = points.dim(1);
  require(fill.dim(0) == ch, "grid_sample: dim 0 of fill (" + std::to_string(fill.dim(0)) + ") != channels (" +
                                 std::to_string(ch) + ")");
  require(fill.dim(1) == m || fill.dim(1) == 1, "grid_sample: dim 1 of fill must be 1 or the point count");
  const bool per_point = fill.dim(1) == m;
  std::vector<T> y(ch * m);
  kernels::bilinear_sample(input.data().data(), ch, h, w, points.data().data(), m, fill.data().data(), per_point,
                           y.data());
  auto ii = input.impl(), pi = points.impl(), fi = fill.impl();
  return detail::make_result<T>(
      Shape{ch, m}, std::move(y), {input, points, fill}, [ii, pi, fi, ch, h, w, m, per_point](const TensorImpl<T>& out) {
        using kernels::rows::bilinear_tap;
        const T* px = pi->data.data();
        const T* py = px + m;
        if (needs(ii)) {
          auto& g = ii->ensure_grad();
          for (std::size_t c = 0; c < ch; ++c) {
            T* gc = g.data() + c * h * w;
            for (std::size_t i = 0; i < m; ++i) {
              const auto tap = bilinear_tap(px[i], py[i], h, w);
              if (!tap.inside) continue;
              const T go = out.grad[c * m + i];
              gc[tap.y0 * w + tap.x0] += go * (T(1) - tap.fx) * (T(1) - tap.fy);
              gc[tap.y0 * w + tap.x1] += go * tap.fx * (T(1) - tap.fy);
              gc[tap.y1 * w + tap.x0] += go * (T(1) - tap.fx) * tap.fy;
              gc[tap.y1 * w + tap.x1] += go * tap.fx * tap.fy;
            }
          }
        }
        if (needs(pi)) {
          auto& g = pi->ensure_grad();
          for (std::size_t i = 0; i < m; ++i) {
            const auto tap = bilinear_tap(px[i], py[i], h, w);
            if (!tap.inside) continue;
            T gx = 0, gy = 0;
            for (std::size_t c = 0; c < ch; ++c) {
              const T* ic = ii->data.data() + c * h * w;
              const T v00 = ic[tap.y0 * w + tap.x0], v01 = ic[tap.y0 * w + tap.x1];
              const T v10 = ic[tap.y1 * w + tap.x0], v11 = ic[tap.y1 * w + tap.x1];
              const T go = out.grad[c * m + i];
              if (w >= 2) gx += go * ((T(1) - tap.fy) * (v01 - v00) + tap.fy * (v11 - v10));
              if (h >= 2) gy += go * ((T(1) - tap.fx) * (v10 - v00) + tap.fx * (v11 - v01));
            }
            g[i] += gx;
            g[m + i] += gy;
          }
        }
        if (needs(fi)) {
          auto& g = fi->ensure_grad();
          for (std::size_t i = 0; i < m; ++i) {
            if (bilinear_tap(px[i], py[i], h, w).inside) continue;
            for (std::size_t c = 0; c < ch; ++c) g[per_point ? c * m + i : c] += out.grad[c * m + i];
          }
        }
      });
}

template <typename T>
Tensor<T> group_weighted_sum(const Tensor<T>& samples, const Tensor<T>& weights) {
  require_rank("group_weighted_sum", "samples", samples, 2);
  require_rank("group_weighted_sum", "weights", weights, 2);
  const std::size_t ch = samples.dim(0), n = weights.dim(0), p = weights.dim(1);
  require(samples.dim(1) == n * p, "group_weighted_sum: dim 1 of samples must equal groups * points");
  std::vector<T> y(ch * n, T(0));
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t g = 0; g < n; ++g) {
      T s = 0;
      for (std::size_t k = 0; k < p; ++k) s += weights.data()[g * p + k] * samples.data()[c * n * p + g * p + k];
      y[c * n + g] = s;
    }
  auto si = samples.impl(), wi = weights.impl();
  return detail::make_result<T>(Shape{ch, n}, std::move(y), {samples, weights}, [si, wi, ch, n, p](const TensorImpl<T>& out) {
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t g = 0; g < n; ++g) {
        const T go = out.grad[c * n + g];
        for (std::size_t k = 0; k < p; ++k) {
          if (needs(si)) si->ensure_grad()[c * n * p + g * p + k] += go * wi->data[g * p + k];
          if (needs(wi)) wi->ensure_grad()[g * p + k] += go * si->data[c * n * p + g * p + k];
        }
      }
  });
}

template <typename T>
Tensor<T> focal_loss(const Tensor<T>& pred, const Tensor<T>& target, T alpha, T beta) {
  require_same_shape("focal_loss", pred, target);
  constexpr T kLo = T(1e-4), kHi = T(1) - T(1e-4);
  std::size_t num_pos = 0;
  for (T t : target.data()) num_pos += t == T(1) ? 1 : 0;
  const T norm = T(1) / static_cast<T>(std::max<std::size_t>(num_pos, 1));
  T total = 0;
  std::vector<T> dldp(pred.numel(), T(0));
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const T raw = pred.data()[i];
    const bool clamped = raw < kLo || raw > kHi;
    const T p = std::clamp(raw, kLo, kHi);
    const T t = target.data()[i];
    if (t == T(1)) {
      const T om = T(1) - p;
      total += -std::pow(om, alpha) * std::log(p);
      if (!clamped) dldp[i] = alpha * std::pow(om, alpha - T(1)) * std::log(p) - std::pow(om, alpha) / p;
    } else {
      const T wneg = std::pow(T(1) - t, beta);
      total += -wneg * std::pow(p, alpha) * std::log(T(1) - p);
      if (!clamped) {
        dldp[i] = -wneg * (alpha * std::pow(p, alpha - T(1)) * std::log(T(1) - p) - std::pow(p, alpha) / (T(1) - p));
      }
    }
  }
  auto pi = pred.impl();
  return detail::make_result<T>(Shape{}, {total * norm}, {pred, target},
                                [pi, dldp = std::move(dldp), norm](const TensorImpl<T>& out) {
                                  if (!needs(pi)) return;
                                  auto& g = pi->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[0] * norm * dldp[i];
                                });
}

#define RAFD_INSTANTIATE_OPS(T)                                                                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> scale(const Tensor<T>&, T);                                                                  \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                             \
  template Tensor<T> relu(const Tensor<T>&);                                                                      \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                                   \
  template Tensor<T> tanh(const Tensor<T>&);                                                                      \
  template Tensor<T> exp(const Tensor<T>&);                                                                       \
  template Tensor<T> sum(const Tensor<T>&);                                                                       \
  template Tensor<T> mean(const Tensor<T>&);                                                                      \
  template Tensor<T> l1_loss(const Tensor<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> weighted_sum(const Tensor<T>&, const std::vector<T>&);                                       \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                            \
  template Tensor<T> transpose2d(const Tensor<T>&);                                                               \
  template Tensor<T> concat0(const std::vector<Tensor<T>>&);                                                      \
  template Tensor<T> slice0(const Tensor<T>&, std::size_t, std::size_t);                                          \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                                      \
  template Tensor<T> gather_rows(const Tensor<T>&, const std::vector<std::size_t>&);                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> add_rowvec(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> layer_scale_add(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                         \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&, T, \
                                 BatchNormMode, T);                                                               \
  template Tensor<T> softmax(const Tensor<T>&, const std::vector<std::size_t>&);                                  \
  template Tensor<T> mask_fill(const Tensor<T>&, const std::vector<std::uint8_t>&);                               \
  template Tensor<T> scaled_dot_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                   \
                                          const std::vector<std::uint8_t>*);                                      \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);      \
  template Tensor<T> grid_sample_bilinear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> group_weighted_sum(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> focal_loss(const Tensor<T>&, const Tensor<T>&, T, T);

RAFD_INSTANTIATE_OPS(float)
RAFD_INSTANTIATE_OPS(double)
#undef RAFD_INSTANTIATE_OPS

}  // namespace rafd
