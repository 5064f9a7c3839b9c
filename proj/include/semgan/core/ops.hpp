#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "semgan/core/autograd.hpp"

namespace semgan::ops {

enum class Pad { zero, reflect };

struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int pad = 0;
  Pad mode = Pad::zero;

  [[nodiscard]] int out_extent(int in) const { return (in + 2 * pad - kernel) / stride + 1; }
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ColMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

inline int reflect(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

// Range of output columns [lo, hi) whose input column ox*stride+offset is in bounds.
inline void valid_span(int offset, int stride, int width, int wo, int& lo, int& hi) {
  lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  hi = width - 1 - offset < 0 ? 0 : std::min(wo, (width - 1 - offset) / stride + 1);
  if (hi < lo) hi = lo;
}

/// Unfolds one (C,H,W) sample into a (C*k*k, Ho*Wo) row-major matrix.
template <typename T>
void im2col(const T* x, int channels, int height, int width, const ConvGeometry& g, T* col) {
  const int ho = g.out_extent(height);
  const int wo = g.out_extent(width);
  const int k = g.kernel;
  const int s = g.stride;
  const bool refl = g.mode == Pad::reflect;
  for (int c = 0; c < channels; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * height * width;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        T* row = col + (static_cast<std::size_t>(c * k + ki) * k + kj) * ho * wo;
        const int off = kj - g.pad;
        int lo, hi;
        valid_span(off, s, width, wo, lo, hi);
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * s - g.pad + ki;
          T* dst = row + static_cast<std::size_t>(oy) * wo;
          if (refl) {
            iy = reflect(iy, height);
          } else if (iy < 0 || iy >= height) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * width;
          for (int ox = 0; ox < lo; ++ox) dst[ox] = refl ? src[reflect(ox * s + off, width)] : T(0);
          if (s == 1) {
            std::copy(src + lo + off, src + hi + off, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * s + off];
          }
          for (int ox = hi; ox < wo; ++ox) dst[ox] = refl ? src[reflect(ox * s + off, width)] : T(0);
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters a column matrix back, accumulating into x.
template <typename T>
void col2im(const T* col, int channels, int height, int width, const ConvGeometry& g, T* x) {
  const int ho = g.out_extent(height);
  const int wo = g.out_extent(width);
  const int k = g.kernel;
  const int s = g.stride;
  const bool refl = g.mode == Pad::reflect;
  for (int c = 0; c < channels; ++c) {
    T* xc = x + static_cast<std::size_t>(c) * height * width;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const T* row = col + (static_cast<std::size_t>(c * k + ki) * k + kj) * ho * wo;
        const int off = kj - g.pad;
        int lo, hi;
        valid_span(off, s, width, wo, lo, hi);
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * s - g.pad + ki;
          if (refl) {
            iy = reflect(iy, height);
          } else if (iy < 0 || iy >= height) {
            continue;
          }
          const T* src = row + static_cast<std::size_t>(oy) * wo;
          T* dst = xc + static_cast<std::size_t>(iy) * width;
          if (refl) {
            for (int ox = 0; ox < lo; ++ox) dst[reflect(ox * s + off, width)] += src[ox];
            for (int ox = hi; ox < wo; ++ox) dst[reflect(ox * s + off, width)] += src[ox];
          }
          if (s == 1) {
            T* d = dst + off;
            for (int ox = lo; ox < hi; ++ox) d[ox] += src[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox * s + off] += src[ox];
          }
        }
      }
    }
  }
}

// out(M,N) = a(M,K) * b(K,N), all row-major; `accumulate` adds into out.
template <typename T>
void gemm(const T* a, const T* b, T* out, int m, int k, int n, bool accumulate) {
  Eigen::Map<const RowMat<T>> A(a, m, k);
  Eigen::Map<const RowMat<T>> B(b, k, n);
  Eigen::Map<RowMat<T>> C(out, m, n);
  if (m < 8) {
    // Thin outputs are much faster as (N,K)*(K,M) in column-major view.
    Eigen::Map<const ColMat<T>> At(a, k, m);
    Eigen::Map<const ColMat<T>> Bt(b, n, k);
    Eigen::Map<ColMat<T>> Ct(out, n, m);
    if (accumulate) Ct.noalias() += Bt * At;
    else Ct.noalias() = Bt * At;
    return;
  }
  if (accumulate) C.noalias() += A * B;
  else C.noalias() = A * B;
}

// out(M,N) = a(K,M)^T * b(K,N)
template <typename T>
void gemm_tn(const T* a, const T* b, T* out, int m, int k, int n, bool accumulate) {
  Eigen::Map<const RowMat<T>> A(a, k, m);
  Eigen::Map<const RowMat<T>> B(b, k, n);
  Eigen::Map<RowMat<T>> C(out, m, n);
  if (accumulate) C.noalias() += A.transpose() * B;
  else C.noalias() = A.transpose() * B;
}

// out(M,N) = a(M,K) * b(N,K)^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* out, int m, int k, int n, bool accumulate) {
  Eigen::Map<const RowMat<T>> A(a, m, k);
  Eigen::Map<const RowMat<T>> B(b, n, k);
  Eigen::Map<RowMat<T>> C(out, m, n);
  if (accumulate) C.noalias() += A * B.transpose();
  else C.noalias() = A * B.transpose();
}

template <typename T, typename F, typename G>
Var<T> unary(const Var<T>& x, F f, G df_from_xy) {
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  return make_result<T>(std::move(y), {x}, [df_from_xy](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& gx = p.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] += n.grad[i] * df_from_xy(p.value[i], n.value[i]);
    }
  });
}

}  // namespace detail

/// 2D convolution. `w` is (Cout, Cin, k, k); `b` is (1, Cout, 1, 1) or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, ConvGeometry g) {
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  if (ws.c != xs.c || ws.h != g.kernel || ws.w != g.kernel) {
    throw ShapeError("conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
  }
  if (g.mode == Pad::reflect && (g.pad >= xs.h || g.pad >= xs.w)) {
    throw ShapeError("conv2d: reflect padding must be smaller than the input extent");
  }
  const int ho = g.out_extent(xs.h);
  const int wo = g.out_extent(xs.w);
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: input " + xs.str() + " too small");
  const int cout = ws.n;
  const int kdim = xs.c * g.kernel * g.kernel;
  const int p = ho * wo;

  Tensor<T> y(Shape{xs.n, cout, ho, wo});
  std::vector<T> col(static_cast<std::size_t>(kdim) * p);
  for (int n = 0; n < xs.n; ++n) {
    detail::im2col(x.value().sample(n), xs.c, xs.h, xs.w, g, col.data());
    detail::gemm(w.value().data(), col.data(), y.sample(n), cout, kdim, p, false);
    if (b.defined()) {
      for (int c = 0; c < cout; ++c) {
        T* yc = y.plane(n, c);
        const T bc = b.value()[c];
        for (int i = 0; i < p; ++i) yc[i] += bc;
      }
    }
  }

  std::vector<Var<T>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_result<T>(std::move(y), std::move(parents), [g, kdim, p, cout](Node<T>& node) {
    Node<T>& xn = *node.parents[0];
    Node<T>& wn = *node.parents[1];
    Node<T>* bn = node.parents.size() > 2 ? node.parents[2].get() : nullptr;
    const Shape xs = xn.value.shape();
    std::vector<T> col(static_cast<std::size_t>(kdim) * p);
    for (int n = 0; n < xs.n; ++n) {
      const T* dy = node.grad.sample(n);
      if (wn.requires_grad) {
        detail::im2col(xn.value.sample(n), xs.c, xs.h, xs.w, g, col.data());
        detail::gemm_nt(dy, col.data(), wn.grad_buffer().data(), cout, p, kdim, true);
      }
      if (xn.requires_grad) {
        detail::gemm_tn(wn.value.data(), dy, col.data(), kdim, cout, p, false);
        detail::col2im(col.data(), xs.c, xs.h, xs.w, g, xn.grad_buffer().sample(n));
      }
      if (bn && bn->requires_grad) {
        Tensor<T>& gb = bn->grad_buffer();
        for (int c = 0; c < cout; ++c) {
          const T* dyc = dy + static_cast<std::size_t>(c) * p;
          T s = 0;
          for (int i = 0; i < p; ++i) s += dyc[i];
          gb[c] += s;
        }
      }
    }
  });
}

/// Transposed convolution (fractionally strided). `w` is (Cin, Cout, k, k).
/// Output extent = (in-1)*stride - 2*pad + k + output_padding.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, ConvGeometry g,
                        int output_padding) {
  if (g.mode != Pad::zero) throw ShapeError("conv_transpose2d: only zero padding");
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  if (ws.n != xs.c || ws.h != g.kernel || ws.w != g.kernel) {
    throw ShapeError("conv_transpose2d: weight " + ws.str() + " incompatible with " + xs.str());
  }
  const int cout = ws.c;
  const int ho = (xs.h - 1) * g.stride - 2 * g.pad + g.kernel + output_padding;
  const int wo = (xs.w - 1) * g.stride - 2 * g.pad + g.kernel + output_padding;
  const int kdim = cout * g.kernel * g.kernel;
  const int p = xs.h * xs.w;
  if (g.out_extent(ho) != xs.h || g.out_extent(wo) != xs.w) {
    throw ShapeError("conv_transpose2d: inconsistent output_padding");
  }

  Tensor<T> y(Shape{xs.n, cout, ho, wo});
  std::vector<T> col(static_cast<std::size_t>(kdim) * p);
  for (int n = 0; n < xs.n; ++n) {
    detail::gemm_tn(w.value().data(), x.value().sample(n), col.data(), kdim, xs.c, p, false);
    detail::col2im(col.data(), cout, ho, wo, g, y.sample(n));
    if (b.defined()) {
      for (int c = 0; c < cout; ++c) {
        T* yc = y.plane(n, c);
        const T bc = b.value()[c];
        for (int i = 0; i < ho * wo; ++i) yc[i] += bc;
      }
    }
  }

  std::vector<Var<T>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_result<T>(std::move(y), std::move(parents),
                        [g, kdim, p, cout, ho, wo](Node<T>& node) {
    Node<T>& xn = *node.parents[0];
    Node<T>& wn = *node.parents[1];
    Node<T>* bn = node.parents.size() > 2 ? node.parents[2].get() : nullptr;
    const Shape xs = xn.value.shape();
    std::vector<T> col(static_cast<std::size_t>(kdim) * p);
    for (int n = 0; n < xs.n; ++n) {
      const T* dy = node.grad.sample(n);
      detail::im2col(dy, cout, ho, wo, g, col.data());
      if (xn.requires_grad) {
        detail::gemm(wn.value.data(), col.data(), xn.grad_buffer().sample(n), xs.c, kdim, p, true);
      }
      if (wn.requires_grad) {
        detail::gemm_nt(xn.value.sample(n), col.data(), wn.grad_buffer().data(), xs.c, p, kdim,
                        true);
      }
      if (bn && bn->requires_grad) {
        Tensor<T>& gb = bn->grad_buffer();
        for (int c = 0; c < cout; ++c) {
          const T* dyc = dy + static_cast<std::size_t>(c) * ho * wo;
          T s = 0;
          for (int i = 0; i < ho * wo; ++i) s += dyc[i];
          gb[c] += s;
        }
      }
    }
  });
}

/// Per-sample, per-channel normalization without affine parameters.
template <typename T>
Var<T> instance_norm(const Var<T>& x, T eps = T(1e-5)) {
  const Shape s = x.shape();
  const std::size_t hw = s.plane();
  Tensor<T> y(s);
  std::vector<T> inv_std(static_cast<std::size_t>(s.n) * s.c);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* xp = x.value().plane(n, c);
      T* yp = y.plane(n, c);
      T mean = 0;
      for (std::size_t i = 0; i < hw; ++i) mean += xp[i];
      mean /= static_cast<T>(hw);
      T var = 0;
      for (std::size_t i = 0; i < hw; ++i) var += (xp[i] - mean) * (xp[i] - mean);
      var /= static_cast<T>(hw);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(n) * s.c + c] = is;
      for (std::size_t i = 0; i < hw; ++i) yp[i] = (xp[i] - mean) * is;
    }
  }
  return make_result<T>(std::move(y), {x}, [inv_std = std::move(inv_std)](Node<T>& node) {
    Node<T>& xn = *node.parents[0];
    if (!xn.requires_grad) return;
    const Shape s = node.value.shape();
    const std::size_t hw = s.plane();
    Tensor<T>& gx = xn.grad_buffer();
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const T* yp = node.value.plane(n, c);
        const T* dy = node.grad.plane(n, c);
        T* dx = gx.plane(n, c);
        T mdy = 0, mdyy = 0;
        for (std::size_t i = 0; i < hw; ++i) {
          mdy += dy[i];
          mdyy += dy[i] * yp[i];
        }
        mdy /= static_cast<T>(hw);
        mdyy /= static_cast<T>(hw);
        const T is = inv_std[static_cast<std::size_t>(n) * s.c + c];
        for (std::size_t i = 0; i < hw; ++i) dx[i] += is * (dy[i] - mdy - yp[i] * mdyy);
      }
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  return detail::unary(
      x, [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y = a.value();
  y += b.value();
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& n) {
    for (auto& p : n.parents) {
      if (p->requires_grad) p->grad_buffer() += n.grad;
    }
  });
}

/// Nearest-neighbour 2x spatial upsampling.
template <typename T>
Var<T> upsample2x(const Var<T>& x) {
  const Shape s = x.shape();
  Tensor<T> y(Shape{s.n, s.c, s.h * 2, s.w * 2});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int i = 0; i < s.h * 2; ++i)
        for (int j = 0; j < s.w * 2; ++j) y.at(n, c, i, j) = x.value().at(n, c, i / 2, j / 2);
  return make_result<T>(std::move(y), {x}, [](Node<T>& node) {
    Node<T>& xn = *node.parents[0];
    if (!xn.requires_grad) return;
    const Shape s = node.value.shape();
    Tensor<T>& gx = xn.grad_buffer();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int i = 0; i < s.h; ++i)
          for (int j = 0; j < s.w; ++j) gx.at(n, c, i / 2, j / 2) += node.grad.at(n, c, i, j);
  });
}

/// Channel concatenation.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: " + sa.str() + " vs " + sb.str());
  }
  Tensor<T> y(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t pa = static_cast<std::size_t>(sa.c) * sa.plane();
  const std::size_t pb = static_cast<std::size_t>(sb.c) * sb.plane();
  for (int n = 0; n < sa.n; ++n) {
    std::copy(a.value().sample(n), a.value().sample(n) + pa, y.sample(n));
    std::copy(b.value().sample(n), b.value().sample(n) + pb, y.sample(n) + pa);
  }
  return make_result<T>(std::move(y), {a, b}, [pa, pb](Node<T>& node) {
    Node<T>& an = *node.parents[0];
    Node<T>& bn = *node.parents[1];
    const int batch = node.value.shape().n;
    for (int n = 0; n < batch; ++n) {
      const T* g = node.grad.sample(n);
      if (an.requires_grad) {
        T* d = an.grad_buffer().sample(n);
        for (std::size_t i = 0; i < pa; ++i) d[i] += g[i];
      }
      if (bn.requires_grad) {
        T* d = bn.grad_buffer().sample(n);
        for (std::size_t i = 0; i < pb; ++i) d[i] += g[pa + i];
      }
    }
  });
}

/// mean |a - b|. Subgradient 0 at equality.
template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mean_abs_diff");
  const std::size_t count = a.value().size();
  T s = 0;
  for (std::size_t i = 0; i < count; ++i) s += std::abs(a.value()[i] - b.value()[i]);
  return make_result<T>(Tensor<T>::scalar(s / static_cast<T>(count)), {a, b},
                        [count](Node<T>& node) {
    Node<T>& an = *node.parents[0];
    Node<T>& bn = *node.parents[1];
    const T g = node.grad[0] / static_cast<T>(count);
    for (std::size_t i = 0; i < count; ++i) {
      const T d = an.value[i] - bn.value[i];
      const T sgn = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
      if (an.requires_grad) an.grad_buffer()[i] += g * sgn;
      if (bn.requires_grad) bn.grad_buffer()[i] -= g * sgn;
    }
  });
}

/// mean (x - target)^2 against a constant target.
template <typename T>
Var<T> mean_squared_to(const Var<T>& x, T target) {
  const std::size_t count = x.value().size();
  T s = 0;
  for (std::size_t i = 0; i < count; ++i) s += (x.value()[i] - target) * (x.value()[i] - target);
  return make_result<T>(Tensor<T>::scalar(s / static_cast<T>(count)), {x},
                        [count, target](Node<T>& node) {
    Node<T>& xn = *node.parents[0];
    if (!xn.requires_grad) return;
    const T g = node.grad[0] * T(2) / static_cast<T>(count);
    Tensor<T>& gx = xn.grad_buffer();
    for (std::size_t i = 0; i < count; ++i) gx[i] += g * (xn.value[i] - target);
  });
}

template <typename T>
T softplus(T v) {
  return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

template <typename T>
T sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

/// mean over elements of the binary cross-entropy between sigmoid(x) and a
/// constant label in {0, 1}, computed from logits.
template <typename T>
Var<T> mean_bce_logits(const Var<T>& x, T label) {
  const std::size_t count = x.value().size();
  T s = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const T v = x.value()[i];
    s += label * softplus(-v) + (T(1) - label) * softplus(v);
  }
  return make_result<T>(Tensor<T>::scalar(s / static_cast<T>(count)), {x},
                        [count, label](Node<T>& node) {
    Node<T>& xn = *node.parents[0];
    if (!xn.requires_grad) return;
    const T g = node.grad[0] / static_cast<T>(count);
    Tensor<T>& gx = xn.grad_buffer();
    for (std::size_t i = 0; i < count; ++i) gx[i] += g * (sigmoid(xn.value[i]) - label);
  });
}

/// sum_i weights[i] * terms[i] over scalar vars.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
  if (terms.size() != weights.size()) throw ShapeError("weighted_sum: size mismatch");
  T s = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) s += weights[i] * terms[i].item();
  return make_result<T>(Tensor<T>::scalar(s), terms, [weights](Node<T>& node) {
    for (std::size_t i = 0; i < node.parents.size(); ++i) {
      if (node.parents[i]->requires_grad) node.parents[i]->grad_buffer()[0] += weights[i] * node.grad[0];
    }
  });
}

}  // namespace semgan::ops
