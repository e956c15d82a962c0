#include "sitspan/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>

namespace sitspan::ag {

namespace {

template <typename T>
void axpy(T* dst, const T* src, int64_t n, T alpha = T(1)) {
  for (int64_t i = 0; i < n; ++i) dst[i] += alpha * src[i];
}

template <typename T>
void accumulate(Node<T>& p, const Tensor<T>& g) {
  if (!p.requires_grad) return;
  p.ensure_grad();
  axpy(p.grad.data(), g.data(), g.numel());
}

template <typename T, typename Fwd, typename Bwd>
Var<T> unary_op(const char* name, const Var<T>& a, Fwd fwd, Bwd dfun) {
  Tensor<T> out{a.val().shape()};
  const T* x = a.val().data();
  T* y = out.data();
  int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) y[i] = fwd(x[i]);
  Tensor<T> xs = a.val();
  Tensor<T> ys = out;
  return make_op<T>(name, out, {a}, [xs, ys, dfun](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const T* g = self.grad.data();
    const T* x = xs.data();
    const T* y = ys.data();
    T* d = p.grad.data();
    int64_t n = self.grad.numel();
    for (int64_t i = 0; i < n; ++i) d[i] += g[i] * dfun(x[i], y[i]);
  });
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, T alpha,
          const T* a, int64_t lda, const T* b, int64_t ldb, T beta, T* c,
          int64_t ldc) {
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, int(m), int(n), int(k),
                alpha, a, int(lda), b, int(ldb), beta, c, int(ldc));
  } else {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, int(m), int(n), int(k),
                alpha, a, int(lda), b, int(ldb), beta, c, int(ldc));
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check(a.val().same_shape(b.val()), ErrorCode::ShapeMismatch, "add");
  Tensor<T> out{a.val().shape()};
  const T* xa = a.val().data();
  const T* xb = b.val().data();
  T* y = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) y[i] = xa[i] + xb[i];
  return make_op<T>("add", out, {a, b}, [](Node<T>& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check(a.val().same_shape(b.val()), ErrorCode::ShapeMismatch, "sub");
  Tensor<T> out{a.val().shape()};
  const T* xa = a.val().data();
  const T* xb = b.val().data();
  T* y = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) y[i] = xa[i] - xb[i];
  return make_op<T>("sub", out, {a, b}, [](Node<T>& self) {
    accumulate(*self.parents[0], self.grad);
    auto& p = *self.parents[1];
    if (!p.requires_grad) return;
    p.ensure_grad();
    axpy(p.grad.data(), self.grad.data(), self.grad.numel(), T(-1));
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check(a.val().same_shape(b.val()), ErrorCode::ShapeMismatch, "mul");
  Tensor<T> out{a.val().shape()};
  const T* xa = a.val().data();
  const T* xb = b.val().data();
  T* y = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) y[i] = xa[i] * xb[i];
  Tensor<T> sa = a.val(), sb = b.val();
  return make_op<T>("mul", out, {a, b}, [sa, sb](Node<T>& self) {
    const T* g = self.grad.data();
    int64_t n = self.grad.numel();
    if (self.parents[0]->requires_grad) {
      auto& p = *self.parents[0];
      p.ensure_grad();
      T* d = p.grad.data();
      const T* o = sb.data();
      for (int64_t i = 0; i < n; ++i) d[i] += g[i] * o[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& p = *self.parents[1];
      p.ensure_grad();
      T* d = p.grad.data();
      const T* o = sa.data();
      for (int64_t i = 0; i < n; ++i) d[i] += g[i] * o[i];
    }
  });
}

template <typename T>
Var<T> divide(const Var<T>& a, const Var<T>& b) {
  check(a.val().same_shape(b.val()), ErrorCode::ShapeMismatch, "divide");
  Tensor<T> out{a.val().shape()};
  const T* xa = a.val().data();
  const T* xb = b.val().data();
  T* y = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) y[i] = xa[i] / xb[i];
  Tensor<T> sb = b.val(), sy = out;
  return make_op<T>("divide", out, {a, b}, [sb, sy](Node<T>& self) {
    const T* g = self.grad.data();
    int64_t n = self.grad.numel();
    if (self.parents[0]->requires_grad) {
      auto& p = *self.parents[0];
      p.ensure_grad();
      T* d = p.grad.data();
      const T* bb = sb.data();
      for (int64_t i = 0; i < n; ++i) d[i] += g[i] / bb[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& p = *self.parents[1];
      p.ensure_grad();
      T* d = p.grad.data();
      const T* bb = sb.data();
      const T* yy = sy.data();
      for (int64_t i = 0; i < n; ++i) d[i] -= g[i] * yy[i] / bb[i];
    }
  });
}

template <typename T>
Var<T> adds(const Var<T>& a, T s) {
  return unary_op<T>("adds", a, [s](T x) { return x + s; },
                     [](T, T) { return T(1); });
}

template <typename T>
Var<T> muls(const Var<T>& a, T s) {
  return unary_op<T>("muls", a, [s](T x) { return x * s; },
                     [s](T, T) { return s; });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return unary_op<T>("relu", a, [](T x) { return x > T(0) ? x : T(0); },
                     [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return unary_op<T>(
      "sigmoid", a,
      [](T x) {
        return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                         : std::exp(x) / (T(1) + std::exp(x));
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> softplus(const Var<T>& a) {
  return unary_op<T>(
      "softplus", a,
      [](T x) { return x > T(20) ? x : std::log1p(std::exp(x)); },
      [](T x, T) {
        return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                         : std::exp(x) / (T(1) + std::exp(x));
      });
}

template <typename T>
Var<T> exp_(const Var<T>& a) {
  return unary_op<T>("exp", a, [](T x) { return std::exp(x); },
                     [](T, T y) { return y; });
}

template <typename T>
Var<T> log_(const Var<T>& a) {
  return unary_op<T>("log", a, [](T x) { return std::log(x); },
                     [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> abs_(const Var<T>& a) {
  return unary_op<T>("abs", a, [](T x) { return std::abs(x); },
                     [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  return unary_op<T>(
      "clamp", a, [lo, hi](T x) { return std::min(hi, std::max(lo, x)); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  const T* x = a.val().data();
  for (int64_t i = 0; i < a.val().numel(); ++i) acc += x[i];
  return make_op<T>("sum", Tensor<T>::scalar(acc), {a}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    T g = self.grad[0];
    T* d = p.grad.data();
    for (int64_t i = 0; i < p.grad.numel(); ++i) d[i] += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  int64_t n = a.val().numel();
  return muls(sum(a), T(1) / T(n));
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.val().reshaped(std::move(shape));
  return make_op<T>("reshape", out, {a}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    axpy(p.grad.data(), self.grad.data(), self.grad.numel());
  });
}

template <typename T>
Var<T> permute(const Var<T>& a, const std::vector<int>& perm) {
  const Shape& in = a.val().shape();
  int nd = int(in.size());
  check(int(perm.size()) == nd, ErrorCode::ShapeError, "permute rank");
  Shape out_shape(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) out_shape[size_t(i)] = in[size_t(perm[size_t(i)])];
  std::vector<int64_t> in_strides(size_t(nd), 1), moved(static_cast<size_t>(nd));
  for (int i = nd - 2; i >= 0; --i)
    in_strides[size_t(i)] = in_strides[size_t(i + 1)] * in[size_t(i + 1)];
  for (int i = 0; i < nd; ++i) moved[size_t(i)] = in_strides[size_t(perm[size_t(i)])];

  Tensor<T> out{out_shape};
  const T* x = a.val().data();
  T* y = out.data();
  int64_t n = out.numel();
  std::vector<int64_t> idx(size_t(nd), 0);
  int64_t src = 0;
  for (int64_t i = 0; i < n; ++i) {
    y[i] = x[src];
    for (int d = nd - 1; d >= 0; --d) {
      src += moved[size_t(d)];
      if (++idx[size_t(d)] < out_shape[size_t(d)]) break;
      src -= moved[size_t(d)] * out_shape[size_t(d)];
      idx[size_t(d)] = 0;
    }
  }
  std::vector<int64_t> moved_b = moved;
  Shape oshape = out_shape;
  return make_op<T>("permute", out, {a}, [moved_b, oshape, nd](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const T* g = self.grad.data();
    T* d = p.grad.data();
    int64_t n = self.grad.numel();
    std::vector<int64_t> idx(size_t(nd), 0);
    int64_t src = 0;
    for (int64_t i = 0; i < n; ++i) {
      d[src] += g[i];
      for (int dd = nd - 1; dd >= 0; --dd) {
        src += moved_b[size_t(dd)];
        if (++idx[size_t(dd)] < oshape[size_t(dd)]) break;
        src -= moved_b[size_t(dd)] * oshape[size_t(dd)];
        idx[size_t(dd)] = 0;
      }
    }
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int dim) {
  check(!xs.empty(), ErrorCode::ShapeError, "concat of nothing");
  const Shape& s0 = xs[0].val().shape();
  int nd = int(s0.size());
  if (dim < 0) dim += nd;
  Shape out_shape = s0;
  int64_t cat = 0;
  for (auto& x : xs) cat += x.val().shape()[size_t(dim)];
  out_shape[size_t(dim)] = cat;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < dim; ++i) outer *= s0[size_t(i)];
  for (int i = dim + 1; i < nd; ++i) inner *= s0[size_t(i)];

  Tensor<T> out{out_shape};
  T* y = out.data();
  int64_t row = cat * inner;
  int64_t off = 0;
  std::vector<int64_t> sizes;
  for (auto& x : xs) {
    int64_t di = x.val().shape()[size_t(dim)] * inner;
    sizes.push_back(di);
    const T* src = x.val().data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(src + o * di, src + (o + 1) * di, y + o * row + off);
    off += di;
  }
  std::vector<Var<T>> parents = xs;
  return make_op<T>("concat", out, parents, [sizes, outer, row](Node<T>& self) {
    const T* g = self.grad.data();
    int64_t off = 0;
    for (size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      int64_t di = sizes[k];
      if (p.requires_grad) {
        p.ensure_grad();
        T* d = p.grad.data();
        for (int64_t o = 0; o < outer; ++o)
          axpy(d + o * di, g + o * row + off, di);
      }
      off += di;
    }
  });
}

template <typename T>
Var<T> take_row(const Var<T>& a, int64_t row) {
  const Shape& s = a.val().shape();
  check(s.size() == 2, ErrorCode::ShapeError, "take_row wants [M,D]");
  int64_t d = s[1];
  Tensor<T> out{Shape{d}};
  std::copy(a.val().data() + row * d, a.val().data() + (row + 1) * d, out.data());
  return make_op<T>("take_row", out, {a}, [row, d](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    axpy(p.grad.data() + row * d, self.grad.data(), d);
  });
}

template <typename T>
Var<T> crop_map(const Var<T>& a, int64_t b, int64_t r0, int64_t nr, int64_t c0,
                int64_t nc) {
  const Shape& s = a.val().shape();
  check(s.size() == 3, ErrorCode::ShapeError, "crop_map wants [B,H,W]");
  int64_t h = s[1], w = s[2];
  check(r0 >= 0 && c0 >= 0 && r0 + nr <= h && c0 + nc <= w, ErrorCode::ShapeError,
        "crop_map window out of bounds");
  Tensor<T> out{Shape{nr, nc}};
  const T* x = a.val().data() + b * h * w;
  for (int64_t r = 0; r < nr; ++r)
    std::copy(x + (r0 + r) * w + c0, x + (r0 + r) * w + c0 + nc,
              out.data() + r * nc);
  return make_op<T>("crop_map", out, {a}, [b, r0, c0, nr, nc, h, w](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    T* d = p.grad.data() + b * h * w;
    const T* g = self.grad.data();
    for (int64_t r = 0; r < nr; ++r)
      axpy(d + (r0 + r) * w + c0, g + r * nc, nc);
  });
}

// ---------------------------------------------------------------------------
// dense layers
// ---------------------------------------------------------------------------

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Shape& xs = x.val().shape();
  const Shape& ws = w.val().shape();
  check(xs.size() == 2 && ws.size() == 2 && xs[1] == ws[1], ErrorCode::ShapeMismatch,
        "linear shapes " + shape_str(xs) + " x " + shape_str(ws));
  int64_t n = xs[0], din = xs[1], dout = ws[0];
  Tensor<T> out{Shape{n, dout}};
  if (b.defined()) {
    const T* bias = b.val().data();
    T* y = out.data();
    for (int64_t i = 0; i < n; ++i)
      std::copy(bias, bias + dout, y + i * dout);
    gemm<T>(false, true, n, dout, din, T(1), x.val().data(), din,
            w.val().data(), din, T(1), out.data(), dout);
  } else {
    gemm<T>(false, true, n, dout, din, T(1), x.val().data(), din,
            w.val().data(), din, T(0), out.data(), dout);
  }
  Tensor<T> xv = x.val(), wv = w.val();
  bool has_b = b.defined();
  std::vector<Var<T>> parents = has_b ? std::vector<Var<T>>{x, w, b}
                                      : std::vector<Var<T>>{x, w};
  return make_op<T>("linear", out, parents,
                    [xv, wv, n, din, dout, has_b](Node<T>& self) {
    const T* g = self.grad.data();
    if (self.parents[0]->requires_grad) {
      auto& p = *self.parents[0];
      p.ensure_grad();
      gemm<T>(false, false, n, din, dout, T(1), g, dout, wv.data(), din, T(1),
              p.grad.data(), din);
    }
    if (self.parents[1]->requires_grad) {
      auto& p = *self.parents[1];
      p.ensure_grad();
      gemm<T>(true, false, dout, din, n, T(1), g, dout, xv.data(), din, T(1),
              p.grad.data(), din);
    }
    if (has_b && self.parents[2]->requires_grad) {
      auto& p = *self.parents[2];
      p.ensure_grad();
      T* d = p.grad.data();
      for (int64_t i = 0; i < n; ++i) axpy(d, g + i * dout, dout);
    }
  });
}

namespace {

// im2col for one image [C,H,W] -> cols [C*kh*kw, Ho*Wo]
template <typename T>
void im2col(const T* x, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t ho, int64_t wo, T* cols) {
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        T* dst = cols + ((ch * kh + ki) * kw + kj) * (ho * wo);
        const T* src = x + ch * h * w;
        for (int64_t oi = 0; oi < ho; ++oi) {
          int64_t ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) {
            std::fill(dst + oi * wo, dst + (oi + 1) * wo, T(0));
            continue;
          }
          const T* row = src + ii * w;
          for (int64_t oj = 0; oj < wo; ++oj) {
            int64_t jj = oj * stride - pad + kj;
            dst[oi * wo + oj] = (jj >= 0 && jj < w) ? row[jj] : T(0);
          }
        }
      }
    }
  }
}

// adjoint of im2col: scatter cols [C*kh*kw, Ho*Wo] back into [C,H,W] (+=)
template <typename T>
void col2im(const T* cols, int64_t c, int64_t h, int64_t w, int64_t kh,
            int64_t kw, int64_t stride, int64_t pad, int64_t ho, int64_t wo,
            T* x) {
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const T* src = cols + ((ch * kh + ki) * kw + kj) * (ho * wo);
        T* dst = x + ch * h * w;
        for (int64_t oi = 0; oi < ho; ++oi) {
          int64_t ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) continue;
          T* row = dst + ii * w;
          for (int64_t oj = 0; oj < wo; ++oj) {
            int64_t jj = oj * stride - pad + kj;
            if (jj >= 0 && jj < w) row[jj] += src[oi * wo + oj];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride,
              int pad) {
  const Shape& xs = x.val().shape();
  const Shape& ws = w.val().shape();
  check(xs.size() == 4 && ws.size() == 4 && xs[1] == ws[1], ErrorCode::ShapeMismatch,
        "conv2d shapes " + shape_str(xs) + " * " + shape_str(ws));
  int64_t n = xs[0], cin = xs[1], h = xs[2], wd = xs[3];
  int64_t cout = ws[0], kh = ws[2], kw = ws[3];
  int64_t ho = (h + 2 * pad - kh) / stride + 1;
  int64_t wo = (wd + 2 * pad - kw) / stride + 1;
  check(ho >= 1 && wo >= 1, ErrorCode::ShapeError, "conv2d output underflow");

  Tensor<T> out{Shape{n, cout, ho, wo}};
  int64_t krows = cin * kh * kw;
  std::vector<T> cols(static_cast<size_t>(krows * ho * wo));
  const T* bias = b.defined() ? b.val().data() : nullptr;
  for (int64_t i = 0; i < n; ++i) {
    im2col(x.val().data() + i * cin * h * wd, cin, h, wd, kh, kw, stride, pad,
           ho, wo, cols.data());
    T* y = out.data() + i * cout * ho * wo;
    if (bias) {
      for (int64_t co = 0; co < cout; ++co)
        std::fill(y + co * ho * wo, y + (co + 1) * ho * wo, bias[co]);
      gemm<T>(false, false, cout, ho * wo, krows, T(1), w.val().data(), krows,
              cols.data(), ho * wo, T(1), y, ho * wo);
    } else {
      gemm<T>(false, false, cout, ho * wo, krows, T(1), w.val().data(), krows,
              cols.data(), ho * wo, T(0), y, ho * wo);
    }
  }

  Tensor<T> xv = x.val(), wv = w.val();
  bool has_b = b.defined();
  std::vector<Var<T>> parents = has_b ? std::vector<Var<T>>{x, w, b}
                                      : std::vector<Var<T>>{x, w};
  auto bw = [xv, wv, n, cin, h, wd, cout, kh, kw, stride, pad, ho, wo, krows,
             has_b](Node<T>& self) {
    const T* g = self.grad.data();
    std::vector<T> cols(static_cast<size_t>(krows * ho * wo));
    bool need_dx = self.parents[0]->requires_grad;
    bool need_dw = self.parents[1]->requires_grad;
    if (need_dx) self.parents[0]->ensure_grad();
    if (need_dw) self.parents[1]->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      const T* gi = g + i * cout * ho * wo;
      if (need_dw) {
        im2col(xv.data() + i * cin * h * wd, cin, h, wd, kh, kw, stride, pad,
               ho, wo, cols.data());
        gemm<T>(false, true, cout, krows, ho * wo, T(1), gi, ho * wo,
                cols.data(), ho * wo, T(1), self.parents[1]->grad.data(), krows);
      }
      if (need_dx) {
        gemm<T>(true, false, krows, ho * wo, cout, T(1), wv.data(), krows, gi,
                ho * wo, T(0), cols.data(), ho * wo);
        col2im(cols.data(), cin, h, wd, kh, kw, stride, pad, ho, wo,
               self.parents[0]->grad.data() + i * cin * h * wd);
      }
    }
    if (has_b && self.parents[2]->requires_grad) {
      auto& p = *self.parents[2];
      p.ensure_grad();
      T* d = p.grad.data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t co = 0; co < cout; ++co) {
          const T* gi = g + (i * cout + co) * ho * wo;
          T acc = 0;
          for (int64_t k = 0; k < ho * wo; ++k) acc += gi[k];
          d[co] += acc;
        }
    }
  };
  return make_op<T>("conv2d", out, parents, bw);
}

template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b,
                        int stride, int pad) {
  const Shape& xs = x.val().shape();
  const Shape& ws = w.val().shape();
  check(xs.size() == 4 && ws.size() == 4 && xs[1] == ws[0], ErrorCode::ShapeMismatch,
        "conv_transpose2d shapes " + shape_str(xs) + " * " + shape_str(ws));
  int64_t n = xs[0], cin = xs[1], hi = xs[2], wi = xs[3];
  int64_t cout = ws[1], kh = ws[2], kw = ws[3];
  int64_t ho = (hi - 1) * stride - 2 * pad + kh;
  int64_t wo = (wi - 1) * stride - 2 * pad + kw;
  check(ho >= 1 && wo >= 1, ErrorCode::ShapeError, "conv_transpose2d output underflow");

  int64_t krows = cout * kh * kw;
  Tensor<T> out{Shape{n, cout, ho, wo}};
  std::vector<T> cols(static_cast<size_t>(krows * hi * wi));
  const T* bias = b.defined() ? b.val().data() : nullptr;
  for (int64_t i = 0; i < n; ++i) {
    // cols = W^T [Cout*k^2, Cin] . x_i [Cin, Hi*Wi]
    gemm<T>(true, false, krows, hi * wi, cin, T(1), w.val().data(), krows,
            x.val().data() + i * cin * hi * wi, hi * wi, T(0), cols.data(),
            hi * wi);
    T* y = out.data() + i * cout * ho * wo;
    if (bias) {
      for (int64_t co = 0; co < cout; ++co)
        std::fill(y + co * ho * wo, y + (co + 1) * ho * wo, bias[co]);
    } else {
      std::fill(y, y + cout * ho * wo, T(0));
    }
    col2im(cols.data(), cout, ho, wo, kh, kw, stride, pad, hi, wi, y);
  }

  Tensor<T> xv = x.val(), wv = w.val();
  bool has_b = b.defined();
  std::vector<Var<T>> parents = has_b ? std::vector<Var<T>>{x, w, b}
                                      : std::vector<Var<T>>{x, w};
  auto bw = [xv, wv, n, cin, hi, wi, cout, kh, kw, stride, pad, ho, wo, krows,
             has_b](Node<T>& self) {
    const T* g = self.grad.data();
    std::vector<T> cols(static_cast<size_t>(krows * hi * wi));
    bool need_dx = self.parents[0]->requires_grad;
    bool need_dw = self.parents[1]->requires_grad;
    if (need_dx) self.parents[0]->ensure_grad();
    if (need_dw) self.parents[1]->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      const T* gi = g + i * cout * ho * wo;
      im2col(gi, cout, ho, wo, kh, kw, stride, pad, hi, wi, cols.data());
      if (need_dx) {
        gemm<T>(false, false, cin, hi * wi, krows, T(1), wv.data(), krows,
                cols.data(), hi * wi, T(1),
                self.parents[0]->grad.data() + i * cin * hi * wi, hi * wi);
      }
      if (need_dw) {
        gemm<T>(false, true, cin, krows, hi * wi, T(1),
                xv.data() + i * cin * hi * wi, hi * wi, cols.data(), hi * wi,
                T(1), self.parents[1]->grad.data(), krows);
      }
    }
    if (has_b && self.parents[2]->requires_grad) {
      auto& p = *self.parents[2];
      p.ensure_grad();
      T* d = p.grad.data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t co = 0; co < cout; ++co) {
          const T* gi = g + (i * cout + co) * ho * wo;
          T acc = 0;
          for (int64_t k = 0; k < ho * wo; ++k) acc += gi[k];
          d[co] += acc;
        }
    }
  };
  return make_op<T>("conv_transpose2d", out, parents, bw);
}

// ---------------------------------------------------------------------------
// normalizations
// ---------------------------------------------------------------------------

namespace {

// Shared slice-normalization backward. Slice elements indexed by a callback,
// statistics restricted to `in_stats`; gamma indexed per element.
template <typename T>
struct NormSlice {
  // filled during forward
  T mean = 0, inv_std = 0;
  int64_t count = 0;  // elements contributing to statistics
};

}  // namespace

template <typename T>
Var<T> group_norm(const Var<T>& x, int groups, const Var<T>& gamma,
                  const Var<T>& beta, T eps) {
  const Shape& s = x.val().shape();
  check(s.size() >= 2, ErrorCode::ShapeError, "group_norm wants [N,C,...]");
  int64_t n = s[0], c = s[1];
  int64_t sp = x.val().numel() / (n * c);
  check(c % groups == 0, ErrorCode::ShapeError, "group_norm channels % groups");
  int64_t cg = c / groups;
  int64_t m = cg * sp;

  Tensor<T> out{s};
  Tensor<T> xhat{s};
  std::vector<NormSlice<T>> stats(static_cast<size_t>(n * groups));
  const T* xd = x.val().data();
  const T* gm = gamma.val().data();
  const T* bt = beta.val().data();
  T* yd = out.data();
  T* hd = xhat.data();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t g = 0; g < groups; ++g) {
      const T* xs = xd + (i * c + g * cg) * sp;
      T* ys = yd + (i * c + g * cg) * sp;
      T* hs = hd + (i * c + g * cg) * sp;
      T mu = 0;
      for (int64_t k = 0; k < m; ++k) mu += xs[k];
      mu /= T(m);
      T var = 0;
      for (int64_t k = 0; k < m; ++k) {
        T d = xs[k] - mu;
        var += d * d;
      }
      var /= T(m);
      T inv = T(1) / std::sqrt(var + eps);
      stats[size_t(i * groups + g)] = {mu, inv, m};
      for (int64_t ch = 0; ch < cg; ++ch) {
        T gch = gm[g * cg + ch];
        T bch = bt[g * cg + ch];
        for (int64_t k = 0; k < sp; ++k) {
          T h = (xs[ch * sp + k] - mu) * inv;
          hs[ch * sp + k] = h;
          ys[ch * sp + k] = gch * h + bch;
        }
      }
    }
  }

  Tensor<T> gv = gamma.val();
  return make_op<T>("group_norm", out, {x, gamma, beta},
                    [xhat, gv, stats, n, c, groups, cg, sp, m](Node<T>& self) {
    const T* g = self.grad.data();
    const T* hd = xhat.data();
    const T* gm = gv.data();
    if (self.parents[1]->requires_grad) {
      auto& pg = *self.parents[1];
      pg.ensure_grad();
      T* dg = pg.grad.data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
          const T* gs = g + (i * c + ch) * sp;
          const T* hs = hd + (i * c + ch) * sp;
          T acc = 0;
          for (int64_t k = 0; k < sp; ++k) acc += gs[k] * hs[k];
          dg[ch] += acc;
        }
    }
    if (self.parents[2]->requires_grad) {
      auto& pb = *self.parents[2];
      pb.ensure_grad();
      T* db = pb.grad.data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
          const T* gs = g + (i * c + ch) * sp;
          T acc = 0;
          for (int64_t k = 0; k < sp; ++k) acc += gs[k];
          db[ch] += acc;
        }
    }
    if (self.parents[0]->requires_grad) {
      auto& px = *self.parents[0];
      px.ensure_grad();
      T* dx = px.grad.data();
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t gr = 0; gr < groups; ++gr) {
          const auto& st = stats[size_t(i * groups + gr)];
          const T* gs = g + (i * c + gr * cg) * sp;
          const T* hs = hd + (i * c + gr * cg) * sp;
          T* ds = dx + (i * c + gr * cg) * sp;
          T sum_t = 0, sum_th = 0;
          for (int64_t ch = 0; ch < cg; ++ch) {
            T gch = gm[gr * cg + ch];
            for (int64_t k = 0; k < sp; ++k) {
              T t = gch * gs[ch * sp + k];
              sum_t += t;
              sum_th += t * hs[ch * sp + k];
            }
          }
          T inv_m = T(1) / T(m);
          for (int64_t ch = 0; ch < cg; ++ch) {
            T gch = gm[gr * cg + ch];
            for (int64_t k = 0; k < sp; ++k) {
              T t = gch * gs[ch * sp + k];
              ds[ch * sp + k] += st.inv_std *
                  (t - inv_m * sum_t - hs[ch * sp + k] * inv_m * sum_th);
            }
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                     T eps) {
  // instance norm == group norm with one group per channel applied per sample
  const Shape& s = x.val().shape();
  check(s.size() == 4, ErrorCode::ShapeError, "instance_norm wants [N,C,H,W]");
  return group_norm(x, int(s[1]), gamma, beta, eps);
}

template <typename T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                        T eps, Tensor<T>* out_mean, Tensor<T>* out_var,
                        const Tensor<T>* frame_mask) {
  const Shape& s = x.val().shape();
  check(s.size() >= 2, ErrorCode::ShapeError, "batch_norm wants [N,C,...]");
  int64_t n = s[0], c = s[1];
  int64_t sp = x.val().numel() / (n * c);
  const T* xd = x.val().data();
  const T* gm = gamma.val().data();
  const T* bt = beta.val().data();
  const T* fm = frame_mask ? frame_mask->data() : nullptr;

  std::vector<int64_t> rows;
  rows.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    if (!fm || fm[i] != T(0)) rows.push_back(i);
  check(!rows.empty(), ErrorCode::DegenerateSequence,
        "batch_norm statistics over zero rows");
  int64_t m = int64_t(rows.size()) * sp;

  Tensor<T> mu{Shape{c}}, var{Shape{c}};
  for (int64_t ch = 0; ch < c; ++ch) {
    T acc = 0;
    for (int64_t r : rows) {
      const T* xs = xd + (r * c + ch) * sp;
      for (int64_t k = 0; k < sp; ++k) acc += xs[k];
    }
    T mv = acc / T(m);
    T vacc = 0;
    for (int64_t r : rows) {
      const T* xs = xd + (r * c + ch) * sp;
      for (int64_t k = 0; k < sp; ++k) {
        T d = xs[k] - mv;
        vacc += d * d;
      }
    }
    mu[ch] = mv;
    var[ch] = vacc / T(m);
  }
  if (out_mean) *out_mean = mu;
  if (out_var) *out_var = var;

  Tensor<T> out{s};
  Tensor<T> xhat{s};
  T* yd = out.data();
  T* hd = xhat.data();
  std::vector<T> inv(static_cast<size_t>(c));
  for (int64_t ch = 0; ch < c; ++ch) inv[size_t(ch)] = T(1) / std::sqrt(var[ch] + eps);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* xs = xd + (i * c + ch) * sp;
      T* ys = yd + (i * c + ch) * sp;
      T* hs = hd + (i * c + ch) * sp;
      for (int64_t k = 0; k < sp; ++k) {
        T h = (xs[k] - mu[ch]) * inv[size_t(ch)];
        hs[k] = h;
        ys[k] = gm[ch] * h + bt[ch];
      }
    }

  Tensor<T> gv = gamma.val();
  std::vector<int64_t> rows_b = rows;
  std::vector<char> in_stats(size_t(n), frame_mask ? 0 : 1);
  if (frame_mask)
    for (int64_t r : rows) in_stats[size_t(r)] = 1;
  return make_op<T>("batch_norm", out, {x, gamma, beta},
                    [xhat, gv, inv, n, c, sp, m, in_stats](Node<T>& self) {
    const T* g = self.grad.data();
    const T* hd = xhat.data();
    const T* gm = gv.data();
    if (self.parents[1]->requires_grad || self.parents[2]->requires_grad) {
      Node<T>& pg = *self.parents[1];
      Node<T>& pb = *self.parents[2];
      if (pg.requires_grad) pg.ensure_grad();
      if (pb.requires_grad) pb.ensure_grad();
      for (int64_t ch = 0; ch < c; ++ch) {
        T accg = 0, accb = 0;
        for (int64_t i = 0; i < n; ++i) {
          const T* gs = g + (i * c + ch) * sp;
          const T* hs = hd + (i * c + ch) * sp;
          for (int64_t k = 0; k < sp; ++k) {
            accg += gs[k] * hs[k];
            accb += gs[k];
          }
        }
        if (pg.requires_grad) pg.grad[ch] += accg;
        if (pb.requires_grad) pb.grad[ch] += accb;
      }
    }
    if (self.parents[0]->requires_grad) {
      auto& px = *self.parents[0];
      px.ensure_grad();
      T* dx = px.grad.data();
      for (int64_t ch = 0; ch < c; ++ch) {
        // every output depends on the statistics, so the sums run over all
        // rows; the correction below applies only to rows inside the stats
        T sum_t = 0, sum_th = 0;
        for (int64_t i = 0; i < n; ++i) {
          const T* gs = g + (i * c + ch) * sp;
          const T* hs = hd + (i * c + ch) * sp;
          for (int64_t k = 0; k < sp; ++k) {
            sum_t += gs[k];
            sum_th += gs[k] * hs[k];
          }
        }
        sum_t *= gm[ch];
        sum_th *= gm[ch];
        T inv_m = T(1) / T(m);
        for (int64_t i = 0; i < n; ++i) {
          const T* gs = g + (i * c + ch) * sp;
          const T* hs = hd + (i * c + ch) * sp;
          T* ds = dx + (i * c + ch) * sp;
          bool st = in_stats[size_t(i)] != 0;
          for (int64_t k = 0; k < sp; ++k) {
            T t = gm[ch] * gs[k];
            T corr = st ? inv_m * (sum_t + hs[k] * sum_th) : T(0);
            ds[k] += inv[size_t(ch)] * (t - corr);
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> batch_norm_eval(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                       const Tensor<T>& rmean, const Tensor<T>& rvar, T eps) {
  const Shape& s = x.val().shape();
  int64_t n = s[0], c = s[1];
  int64_t sp = x.val().numel() / (n * c);
  Tensor<T> out{s};
  Tensor<T> xhat{s};
  const T* xd = x.val().data();
  const T* gm = gamma.val().data();
  const T* bt = beta.val().data();
  std::vector<T> inv(static_cast<size_t>(c));
  for (int64_t ch = 0; ch < c; ++ch) inv[size_t(ch)] = T(1) / std::sqrt(rvar[ch] + eps);
  T* yd = out.data();
  T* hd = xhat.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* xs = xd + (i * c + ch) * sp;
      T* ys = yd + (i * c + ch) * sp;
      T* hs = hd + (i * c + ch) * sp;
      for (int64_t k = 0; k < sp; ++k) {
        T h = (xs[k] - rmean[ch]) * inv[size_t(ch)];
        hs[k] = h;
        ys[k] = gm[ch] * h + bt[ch];
      }
    }
  Tensor<T> gv = gamma.val();
  return make_op<T>("batch_norm_eval", out, {x, gamma, beta},
                    [xhat, gv, inv, n, c, sp](Node<T>& self) {
    const T* g = self.grad.data();
    const T* hd = xhat.data();
    const T* gm = gv.data();
    if (self.parents[0]->requires_grad) {
      auto& px = *self.parents[0];
      px.ensure_grad();
      T* dx = px.grad.data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
          const T* gs = g + (i * c + ch) * sp;
          T* ds = dx + (i * c + ch) * sp;
          T f = gm[ch] * inv[size_t(ch)];
          for (int64_t k = 0; k < sp; ++k) ds[k] += f * gs[k];
        }
    }
    if (self.parents[1]->requires_grad) {
      auto& pg = *self.parents[1];
      pg.ensure_grad();
      for (int64_t ch = 0; ch < c; ++ch) {
        T acc = 0;
        for (int64_t i = 0; i < n; ++i) {
          const T* gs = g + (i * c + ch) * sp;
          const T* hs = hd + (i * c + ch) * sp;
          for (int64_t k = 0; k < sp; ++k) acc += gs[k] * hs[k];
        }
        pg.grad[ch] += acc;
      }
    }
    if (self.parents[2]->requires_grad) {
      auto& pb = *self.parents[2];
      pb.ensure_grad();
      for (int64_t ch = 0; ch < c; ++ch) {
        T acc = 0;
        for (int64_t i = 0; i < n; ++i) {
          const T* gs = g + (i * c + ch) * sp;
          for (int64_t k = 0; k < sp; ++k) acc += gs[k];
        }
        pb.grad[ch] += acc;
      }
    }
  });
}

template <typename T>
Var<T> masked_group_norm_tc(const Var<T>& x, int groups, const Var<T>& gamma,
                            const Var<T>& beta, const Tensor<T>& mask, T eps) {
  const Shape& s = x.val().shape();
  check(s.size() == 3, ErrorCode::ShapeError, "masked_group_norm_tc wants [N,T,C]");
  int64_t n = s[0], t = s[1], c = s[2];
  check(c % groups == 0, ErrorCode::ShapeError, "group width");
  check(mask.shape() == Shape({n, t}), ErrorCode::ShapeMismatch,
        "mask must be [N,T]");
  int64_t cg = c / groups;

  Tensor<T> out{s};
  Tensor<T> xhat{s};
  Tensor<T> invs{Shape{n, int64_t(groups)}};
  Tensor<T> counts{Shape{n}};
  const T* xd = x.val().data();
  const T* gm = gamma.val().data();
  const T* bt = beta.val().data();
  const T* mk = mask.data();
  T* yd = out.data();
  T* hd = xhat.data();
  for (int64_t i = 0; i < n; ++i) {
    int64_t treal = 0;
    for (int64_t tt = 0; tt < t; ++tt)
      if (mk[i * t + tt] != T(0)) ++treal;
    check(treal > 0, ErrorCode::DegenerateSequence,
          "sequence with no real acquisitions");
    counts[i] = T(treal);
    for (int64_t g = 0; g < groups; ++g) {
      T mu = 0;
      for (int64_t tt = 0; tt < t; ++tt) {
        if (mk[i * t + tt] == T(0)) continue;
        const T* row = xd + (i * t + tt) * c + g * cg;
        for (int64_t ch = 0; ch < cg; ++ch) mu += row[ch];
      }
      int64_t m = treal * cg;
      mu /= T(m);
      T var = 0;
      for (int64_t tt = 0; tt < t; ++tt) {
        if (mk[i * t + tt] == T(0)) continue;
        const T* row = xd + (i * t + tt) * c + g * cg;
        for (int64_t ch = 0; ch < cg; ++ch) {
          T d = row[ch] - mu;
          var += d * d;
        }
      }
      var /= T(m);
      T inv = T(1) / std::sqrt(var + eps);
      invs.at(i, g) = inv;
      for (int64_t tt = 0; tt < t; ++tt) {
        const T* row = xd + (i * t + tt) * c + g * cg;
        T* yrow = yd + (i * t + tt) * c + g * cg;
        T* hrow = hd + (i * t + tt) * c + g * cg;
        for (int64_t ch = 0; ch < cg; ++ch) {
          T h = (row[ch] - mu) * inv;
          hrow[ch] = h;
          yrow[ch] = gm[g * cg + ch] * h + bt[g * cg + ch];
        }
      }
    }
  }

  Tensor<T> gv = gamma.val();
  Tensor<T> mk2 = mask;
  return make_op<T>("masked_group_norm_tc", out, {x, gamma, beta},
                    [xhat, gv, mk2, invs, counts, n, t, c, groups, cg](Node<T>& self) {
    const T* g = self.grad.data();
    const T* hd = xhat.data();
    const T* gm = gv.data();
    const T* mk = mk2.data();
    if (self.parents[1]->requires_grad) {
      auto& pg = *self.parents[1];
      pg.ensure_grad();
      for (int64_t ch = 0; ch < c; ++ch) {
        T acc = 0;
        for (int64_t i = 0; i < n; ++i)
          for (int64_t tt = 0; tt < t; ++tt)
            acc += g[(i * t + tt) * c + ch] * hd[(i * t + tt) * c + ch];
        pg.grad[ch] += acc;
      }
    }
    if (self.parents[2]->requires_grad) {
      auto& pb = *self.parents[2];
      pb.ensure_grad();
      for (int64_t ch = 0; ch < c; ++ch) {
        T acc = 0;
        for (int64_t i = 0; i < n; ++i)
          for (int64_t tt = 0; tt < t; ++tt) acc += g[(i * t + tt) * c + ch];
        pb.grad[ch] += acc;
      }
    }
    if (self.parents[0]->requires_grad) {
      auto& px = *self.parents[0];
      px.ensure_grad();
      T* dx = px.grad.data();
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t gr = 0; gr < groups; ++gr) {
          T inv = invs.at(i, gr);
          int64_t m = int64_t(counts[i]) * cg;
          T sum_t = 0, sum_th = 0;
          for (int64_t tt = 0; tt < t; ++tt) {
            const T* grow = g + (i * t + tt) * c + gr * cg;
            const T* hrow = hd + (i * t + tt) * c + gr * cg;
            for (int64_t ch = 0; ch < cg; ++ch) {
              T tv = gm[gr * cg + ch] * grow[ch];
              sum_t += tv;
              sum_th += tv * hrow[ch];
            }
          }
          T inv_m = T(1) / T(m);
          for (int64_t tt = 0; tt < t; ++tt) {
            bool real = mk[i * t + tt] != T(0);
            const T* grow = g + (i * t + tt) * c + gr * cg;
            const T* hrow = hd + (i * t + tt) * c + gr * cg;
            T* drow = dx + (i * t + tt) * c + gr * cg;
            for (int64_t ch = 0; ch < cg; ++ch) {
              T tv = gm[gr * cg + ch] * grow[ch];
              T corr = real ? inv_m * (sum_t + hrow[ch] * sum_th) : T(0);
              drow[ch] += inv * (tv - corr);
            }
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// attention pieces
// ---------------------------------------------------------------------------

template <typename T>
Var<T> attention_scores(const Var<T>& keys, const Var<T>& query) {
  const Shape& ks = keys.val().shape();
  const Shape& qs = query.val().shape();
  check(ks.size() == 4 && qs.size() == 2 && ks[2] == qs[0] && ks[3] == qs[1],
        ErrorCode::ShapeMismatch, "attention_scores shapes");
  int64_t n = ks[0], t = ks[1], g = ks[2], dk = ks[3];
  T scale = T(1) / std::sqrt(T(dk));
  Tensor<T> out{Shape{n, g, t}};
  const T* kd = keys.val().data();
  const T* qd = query.val().data();
  T* od = out.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t tt = 0; tt < t; ++tt)
      for (int64_t gg = 0; gg < g; ++gg) {
        const T* kr = kd + ((i * t + tt) * g + gg) * dk;
        const T* qr = qd + gg * dk;
        T acc = 0;
        for (int64_t d = 0; d < dk; ++d) acc += kr[d] * qr[d];
        od[(i * g + gg) * t + tt] = acc * scale;
      }
  Tensor<T> kv = keys.val(), qv = query.val();
  return make_op<T>("attention_scores", out, {keys, query},
                    [kv, qv, n, t, g, dk, scale](Node<T>& self) {
    const T* gr = self.grad.data();
    if (self.parents[0]->requires_grad) {
      auto& pk = *self.parents[0];
      pk.ensure_grad();
      T* dk_ = pk.grad.data();
      const T* qd = qv.data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t tt = 0; tt < t; ++tt)
          for (int64_t gg = 0; gg < g; ++gg) {
            T gv = gr[(i * g + gg) * t + tt] * scale;
            T* kr = dk_ + ((i * t + tt) * g + gg) * dk;
            const T* qr = qd + gg * dk;
            for (int64_t d = 0; d < dk; ++d) kr[d] += gv * qr[d];
          }
    }
    if (self.parents[1]->requires_grad) {
      auto& pq = *self.parents[1];
      pq.ensure_grad();
      T* dq = pq.grad.data();
      const T* kd = kv.data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t tt = 0; tt < t; ++tt)
          for (int64_t gg = 0; gg < g; ++gg) {
            T gv = gr[(i * g + gg) * t + tt] * scale;
            const T* kr = kd + ((i * t + tt) * g + gg) * dk;
            T* qr = dq + gg * dk;
            for (int64_t d = 0; d < dk; ++d) qr[d] += gv * kr[d];
          }
    }
  });
}

template <typename T>
Var<T> masked_softmax_time(const Var<T>& scores, const Tensor<T>& mask) {
  const Shape& s = scores.val().shape();
  check(s.size() == 3, ErrorCode::ShapeError, "masked_softmax_time wants [N,G,T]");
  int64_t n = s[0], g = s[1], t = s[2];
  check(mask.shape() == Shape({n, t}), ErrorCode::ShapeMismatch,
        "mask must be [N,T]");
  Tensor<T> out{s};
  const T* xd = scores.val().data();
  const T* mk = mask.data();
  T* yd = out.data();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t gg = 0; gg < g; ++gg) {
      const T* row = xd + (i * g + gg) * t;
      T* yrow = yd + (i * g + gg) * t;
      T mx = -std::numeric_limits<T>::infinity();
      for (int64_t tt = 0; tt < t; ++tt)
        if (mk[i * t + tt] != T(0)) mx = std::max(mx, row[tt]);
      check(mx > -std::numeric_limits<T>::infinity(), ErrorCode::DegenerateSequence,
            "softmax over fully padded sequence");
      T z = 0;
      for (int64_t tt = 0; tt < t; ++tt) {
        if (mk[i * t + tt] != T(0)) {
          yrow[tt] = std::exp(row[tt] - mx);
          z += yrow[tt];
        } else {
          yrow[tt] = T(0);
        }
      }
      for (int64_t tt = 0; tt < t; ++tt) yrow[tt] /= z;
    }
  }
  Tensor<T> ys = out;
  return make_op<T>("masked_softmax_time", out, {scores}, [ys, n, g, t](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const T* gr = self.grad.data();
    const T* yv = ys.data();
    T* dx = p.grad.data();
    for (int64_t i = 0; i < n * g; ++i) {
      const T* grow = gr + i * t;
      const T* yrow = yv + i * t;
      T* drow = dx + i * t;
      T dot = 0;
      for (int64_t tt = 0; tt < t; ++tt) dot += grow[tt] * yrow[tt];
      for (int64_t tt = 0; tt < t; ++tt)
        drow[tt] += yrow[tt] * (grow[tt] - dot);
    }
  });
}

template <typename T>
Var<T> temporal_group_collapse(const Var<T>& e, const Var<T>& a) {
  const Shape& es = e.val().shape();
  const Shape& as = a.val().shape();
  check(es.size() == 5 && as.size() == 5, ErrorCode::ShapeError,
        "collapse wants e [B,T,C,H,W], a [B,G,T,H,W]");
  int64_t b = es[0], t = es[1], c = es[2], h = es[3], w = es[4];
  int64_t g = as[1];
  check(as[0] == b && as[2] == t && as[3] == h && as[4] == w, ErrorCode::ShapeMismatch,
        "collapse mask shape");
  check(c % g == 0, ErrorCode::ShapeError, "channels % groups in collapse");
  int64_t cg = c / g;
  int64_t sp = h * w;

  Tensor<T> out{Shape{b, c, h, w}};
  const T* ed = e.val().data();
  const T* ad = a.val().data();
  T* fd = out.data();
  std::fill(fd, fd + out.numel(), T(0));
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t tt = 0; tt < t; ++tt)
      for (int64_t ch = 0; ch < c; ++ch) {
        int64_t gg = ch / cg;
        const T* erow = ed + (((bi * t + tt) * c) + ch) * sp;
        const T* arow = ad + (((bi * g + gg) * t) + tt) * sp;
        T* frow = fd + (bi * c + ch) * sp;
        for (int64_t k = 0; k < sp; ++k) frow[k] += arow[k] * erow[k];
      }

  Tensor<T> ev = e.val(), av = a.val();
  return make_op<T>("temporal_group_collapse", out, {e, a},
                    [ev, av, b, t, c, g, cg, sp](Node<T>& self) {
    const T* gr = self.grad.data();
    if (self.parents[0]->requires_grad) {
      auto& pe = *self.parents[0];
      pe.ensure_grad();
      T* de = pe.grad.data();
      const T* ad = av.data();
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t tt = 0; tt < t; ++tt)
          for (int64_t ch = 0; ch < c; ++ch) {
            int64_t gg = ch / cg;
            T* erow = de + (((bi * t + tt) * c) + ch) * sp;
            const T* arow = ad + (((bi * g + gg) * t) + tt) * sp;
            const T* frow = gr + (bi * c + ch) * sp;
            for (int64_t k = 0; k < sp; ++k) erow[k] += arow[k] * frow[k];
          }
    }
    if (self.parents[1]->requires_grad) {
      auto& pa = *self.parents[1];
      pa.ensure_grad();
      T* da = pa.grad.data();
      const T* ed = ev.data();
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t gg = 0; gg < g; ++gg)
          for (int64_t tt = 0; tt < t; ++tt) {
            T* arow = da + (((bi * g + gg) * t) + tt) * sp;
            for (int64_t ch = gg * cg; ch < (gg + 1) * cg; ++ch) {
              const T* erow = ed + (((bi * t + tt) * c) + ch) * sp;
              const T* frow = gr + (bi * c + ch) * sp;
              for (int64_t k = 0; k < sp; ++k) arow[k] += erow[k] * frow[k];
            }
          }
    }
  });
}

// ---------------------------------------------------------------------------
// resize / gather
// ---------------------------------------------------------------------------

namespace {

struct Tap {
  int64_t i0, i1;
  double f;  // weight of i1
};

std::vector<Tap> resize_taps(int64_t in, int64_t out) {
  std::vector<Tap> taps(static_cast<size_t>(out));
  double scale = double(in) / double(out);
  for (int64_t o = 0; o < out; ++o) {
    double s = (double(o) + 0.5) * scale - 0.5;
    double fl = std::floor(s);
    int64_t i0 = int64_t(fl);
    double f = s - fl;
    int64_t i1 = i0 + 1;
    if (i0 < 0) i0 = 0;
    if (i1 < 0) i1 = 0;
    if (i0 > in - 1) i0 = in - 1;
    if (i1 > in - 1) i1 = in - 1;
    taps[size_t(o)] = {i0, i1, f};
  }
  return taps;
}

}  // namespace

template <typename T>
Var<T> bilinear_resize(const Var<T>& x, int64_t ho, int64_t wo) {
  const Shape& s = x.val().shape();
  check(s.size() == 4, ErrorCode::ShapeError, "bilinear_resize wants [N,C,h,w]");
  int64_t n = s[0] * s[1], h = s[2], w = s[3];
  auto ty = resize_taps(h, ho);
  auto tx = resize_taps(w, wo);
  Tensor<T> out{Shape{s[0], s[1], ho, wo}};
  const T* xd = x.val().data();
  T* yd = out.data();
  for (int64_t i = 0; i < n; ++i) {
    const T* xs = xd + i * h * w;
    T* ys = yd + i * ho * wo;
    for (int64_t oy = 0; oy < ho; ++oy) {
      const Tap& a = ty[size_t(oy)];
      for (int64_t ox = 0; ox < wo; ++ox) {
        const Tap& c = tx[size_t(ox)];
        T v00 = xs[a.i0 * w + c.i0], v01 = xs[a.i0 * w + c.i1];
        T v10 = xs[a.i1 * w + c.i0], v11 = xs[a.i1 * w + c.i1];
        T top = v00 + T(c.f) * (v01 - v00);
        T bot = v10 + T(c.f) * (v11 - v10);
        ys[oy * wo + ox] = top + T(a.f) * (bot - top);
      }
    }
  }
  return make_op<T>("bilinear_resize", out, {x}, [ty, tx, n, h, w, ho, wo](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const T* g = self.grad.data();
    T* d = p.grad.data();
    for (int64_t i = 0; i < n; ++i) {
      const T* gs = g + i * ho * wo;
      T* ds = d + i * h * w;
      for (int64_t oy = 0; oy < ho; ++oy) {
        const Tap& a = ty[size_t(oy)];
        for (int64_t ox = 0; ox < wo; ++ox) {
          const Tap& c = tx[size_t(ox)];
          T gv = gs[oy * wo + ox];
          T fy = T(a.f), fx = T(c.f);
          ds[a.i0 * w + c.i0] += gv * (T(1) - fy) * (T(1) - fx);
          ds[a.i0 * w + c.i1] += gv * (T(1) - fy) * fx;
          ds[a.i1 * w + c.i0] += gv * fy * (T(1) - fx);
          ds[a.i1 * w + c.i1] += gv * fy * fx;
        }
      }
    }
  });
}

template <typename T>
Var<T> bilinear_resize_hw(const Var<T>& x, int64_t ho, int64_t wo) {
  const Shape& s = x.val().shape();
  check(s.size() == 2, ErrorCode::ShapeError, "bilinear_resize_hw wants [h,w]");
  Var<T> r = bilinear_resize(reshape(x, {1, 1, s[0], s[1]}), ho, wo);
  return reshape(r, {ho, wo});
}

template <typename T>
Var<T> gather_pixels(const Var<T>& d,
                     const std::vector<std::array<int64_t, 3>>& coords) {
  const Shape& s = d.val().shape();
  check(s.size() == 4, ErrorCode::ShapeError, "gather_pixels wants [B,C,H,W]");
  int64_t c = s[1], h = s[2], w = s[3];
  int64_t m = int64_t(coords.size());
  Tensor<T> out{Shape{m, c}};
  const T* xd = d.val().data();
  for (int64_t k = 0; k < m; ++k) {
    auto [b, i, j] = coords[size_t(k)];
    for (int64_t ch = 0; ch < c; ++ch)
      out[k * c + ch] = xd[((b * c + ch) * h + i) * w + j];
  }
  auto coords_b = coords;
  return make_op<T>("gather_pixels", out, {d}, [coords_b, c, h, w](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const T* g = self.grad.data();
    T* dd = p.grad.data();
    for (size_t k = 0; k < coords_b.size(); ++k) {
      auto [b, i, j] = coords_b[k];
      for (int64_t ch = 0; ch < c; ++ch)
        dd[((b * c + ch) * h + i) * w + j] += g[int64_t(k) * c + ch];
    }
  });
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

template <typename T>
Var<T> cross_entropy_mean(const Var<T>& logits, const Tensor<int32_t>& target,
                          int ignore_label) {
  const Shape& s = logits.val().shape();
  check(s.size() == 4, ErrorCode::ShapeError, "cross_entropy_mean wants [B,K,H,W]");
  int64_t b = s[0], k = s[1], sp = s[2] * s[3];
  check(target.shape() == Shape({b, s[2], s[3]}), ErrorCode::ShapeMismatch,
        "target must be [B,H,W]");
  const T* xd = logits.val().data();
  const int32_t* td = target.data();
  Tensor<T> probs{s};  // softmax, reused in backward
  T* pd = probs.data();
  double loss = 0;
  int64_t valid = 0;
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t px = 0; px < sp; ++px) {
      const T* col = xd + bi * k * sp + px;
      T* pcol = pd + bi * k * sp + px;
      T mx = col[0];
      for (int64_t c = 1; c < k; ++c) mx = std::max(mx, col[c * sp]);
      T z = 0;
      for (int64_t c = 0; c < k; ++c) {
        T e = std::exp(col[c * sp] - mx);
        pcol[c * sp] = e;
        z += e;
      }
      for (int64_t c = 0; c < k; ++c) pcol[c * sp] /= z;
      int32_t t = td[bi * sp + px];
      if (t == ignore_label) continue;
      check(t >= 0 && t < k, ErrorCode::ShapeError, "class id out of range");
      loss += double(std::log(z)) + double(mx) - double(col[t * sp]);
      ++valid;
    }
  }
  if (valid == 0)
    return make_op<T>("cross_entropy_mean", Tensor<T>::scalar(T(0)), {logits},
                      [](Node<T>&) {});
  Tensor<T> out = Tensor<T>::scalar(T(loss / double(valid)));
  Tensor<int32_t> tv = target;
  return make_op<T>("cross_entropy_mean", out, {logits},
                    [probs, tv, b, k, sp, valid, ignore_label](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    T g = self.grad[0] / T(valid);
    const T* pd = probs.data();
    const int32_t* td = tv.data();
    T* dx = p.grad.data();
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t px = 0; px < sp; ++px) {
        int32_t t = td[bi * sp + px];
        if (t == ignore_label) continue;
        const T* pcol = pd + bi * k * sp + px;
        T* dcol = dx + bi * k * sp + px;
        for (int64_t c = 0; c < k; ++c) dcol[c * sp] += g * pcol[c * sp];
        dcol[t * sp] -= g;
      }
  });
}

template <typename T>
Var<T> cross_entropy_rows_sum(const Var<T>& logits, const Tensor<int32_t>& target) {
  const Shape& s = logits.val().shape();
  check(s.size() == 2, ErrorCode::ShapeError, "cross_entropy_rows_sum wants [M,K]");
  int64_t m = s[0], k = s[1];
  const T* xd = logits.val().data();
  const int32_t* td = target.data();
  Tensor<T> probs{s};
  T* pd = probs.data();
  double loss = 0;
  for (int64_t i = 0; i < m; ++i) {
    const T* row = xd + i * k;
    T* prow = pd + i * k;
    T mx = row[0];
    for (int64_t c = 1; c < k; ++c) mx = std::max(mx, row[c]);
    T z = 0;
    for (int64_t c = 0; c < k; ++c) {
      prow[c] = std::exp(row[c] - mx);
      z += prow[c];
    }
    for (int64_t c = 0; c < k; ++c) prow[c] /= z;
    int32_t t = td[i];
    check(t >= 0 && t < k, ErrorCode::ShapeError, "class id out of range");
    loss += double(std::log(z)) + double(mx) - double(row[t]);
  }
  Tensor<int32_t> tv = target;
  return make_op<T>("cross_entropy_rows_sum", Tensor<T>::scalar(T(loss)), {logits},
                    [probs, tv, m, k](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    T g = self.grad[0];
    const T* pd = probs.data();
    const int32_t* td = tv.data();
    T* dx = p.grad.data();
    for (int64_t i = 0; i < m; ++i) {
      T* drow = dx + i * k;
      const T* prow = pd + i * k;
      for (int64_t c = 0; c < k; ++c) drow[c] += g * prow[c];
      drow[td[i]] -= g;
    }
  });
}

template <typename T>
Var<T> bce_mean(const Var<T>& probs, const Tensor<T>& target, T eps) {
  check(probs.val().shape() == target.shape(), ErrorCode::ShapeMismatch, "bce_mean");
  int64_t n = probs.val().numel();
  const T* pv = probs.val().data();
  const T* tv = target.data();
  double loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    T p = std::min(T(1) - eps, std::max(eps, pv[i]));
    loss += -double(tv[i]) * std::log(double(p)) -
            (1.0 - double(tv[i])) * std::log(1.0 - double(p));
  }
  Tensor<T> pvs = probs.val();
  Tensor<T> tvs = target;
  return make_op<T>("bce_mean", Tensor<T>::scalar(T(loss / double(n))), {probs},
                    [pvs, tvs, n, eps](Node<T>& self) {
    auto& par = *self.parents[0];
    if (!par.requires_grad) return;
    par.ensure_grad();
    T g = self.grad[0] / T(n);
    const T* pv = pvs.data();
    const T* tv = tvs.data();
    T* d = par.grad.data();
    for (int64_t i = 0; i < n; ++i) {
      if (pv[i] <= eps || pv[i] >= T(1) - eps) continue;  // clamped region
      d[i] += g * (-tv[i] / pv[i] + (T(1) - tv[i]) / (T(1) - pv[i]));
    }
  });
}

template <typename T>
Var<T> center_focal_loss(const Var<T>& m, const Tensor<T>& target,
                         const std::vector<int64_t>& n_parcels, T beta, T eps) {
  const Shape& s = m.val().shape();
  check(s.size() == 3, ErrorCode::ShapeError, "center_focal_loss wants [B,H,W]");
  check(target.shape() == s, ErrorCode::ShapeMismatch, "heatmap target shape");
  int64_t b = s[0], sp = s[1] * s[2];
  check(int64_t(n_parcels.size()) == b, ErrorCode::ShapeMismatch, "parcel counts");
  const T* mv = m.val().data();
  const T* tv = target.data();
  double total = 0;
  for (int64_t bi = 0; bi < b; ++bi) {
    if (n_parcels[size_t(bi)] <= 0) continue;
    double acc = 0;
    for (int64_t k = 0; k < sp; ++k) {
      double mm = std::min(double(1) - double(eps),
                           std::max(double(eps), double(mv[bi * sp + k])));
      double t = double(tv[bi * sp + k]);
      if (t >= 1.0) {
        acc += std::log(mm);
      } else {
        acc += std::pow(1.0 - t, double(beta)) * std::log(1.0 - mm);
      }
    }
    total += -acc / double(n_parcels[size_t(bi)]);
  }
  total /= double(b);
  Tensor<T> mvs = m.val();
  Tensor<T> tvs = target;
  auto counts = n_parcels;
  return make_op<T>("center_focal_loss", Tensor<T>::scalar(T(total)), {m},
                    [mvs, tvs, counts, b, sp, beta, eps](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    T g = self.grad[0] / T(b);
    const T* mv = mvs.data();
    const T* tv = tvs.data();
    T* d = p.grad.data();
    for (int64_t bi = 0; bi < b; ++bi) {
      if (counts[size_t(bi)] <= 0) continue;
      T norm = g / T(counts[size_t(bi)]);
      for (int64_t k = 0; k < sp; ++k) {
        T mm = mv[bi * sp + k];
        if (mm <= eps || mm >= T(1) - eps) continue;
        T t = tv[bi * sp + k];
        if (t >= T(1)) {
          d[bi * sp + k] += -norm / mm;
        } else {
          d[bi * sp + k] += norm * std::pow(T(1) - t, beta) / (T(1) - mm);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// explicit instantiations
// ---------------------------------------------------------------------------

#define SITSPAN_INSTANTIATE_OPS(T)                                              \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                         \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                         \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                         \
  template Var<T> divide<T>(const Var<T>&, const Var<T>&);                      \
  template Var<T> adds<T>(const Var<T>&, T);                                    \
  template Var<T> muls<T>(const Var<T>&, T);                                    \
  template Var<T> relu<T>(const Var<T>&);                                       \
  template Var<T> sigmoid<T>(const Var<T>&);                                    \
  template Var<T> softplus<T>(const Var<T>&);                                   \
  template Var<T> exp_<T>(const Var<T>&);                                       \
  template Var<T> log_<T>(const Var<T>&);                                       \
  template Var<T> abs_<T>(const Var<T>&);                                       \
  template Var<T> clamp<T>(const Var<T>&, T, T);                                \
  template Var<T> sum<T>(const Var<T>&);                                        \
  template Var<T> mean<T>(const Var<T>&);                                       \
  template Var<T> reshape<T>(const Var<T>&, Shape);                             \
  template Var<T> permute<T>(const Var<T>&, const std::vector<int>&);           \
  template Var<T> concat<T>(const std::vector<Var<T>>&, int);                   \
  template Var<T> take_row<T>(const Var<T>&, int64_t);                          \
  template Var<T> crop_map<T>(const Var<T>&, int64_t, int64_t, int64_t,         \
                              int64_t, int64_t);                                \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);       \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int,   \
                            int);                                               \
  template Var<T> conv_transpose2d<T>(const Var<T>&, const Var<T>&,             \
                                      const Var<T>&, int, int);                 \
  template Var<T> group_norm<T>(const Var<T>&, int, const Var<T>&,              \
                                const Var<T>&, T);                              \
  template Var<T> instance_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, \
                                   T);                                          \
  template Var<T> batch_norm_train<T>(const Var<T>&, const Var<T>&,             \
                                      const Var<T>&, T, Tensor<T>*, Tensor<T>*, \
                                      const Tensor<T>*);                        \
  template Var<T> batch_norm_eval<T>(const Var<T>&, const Var<T>&,              \
                                     const Var<T>&, const Tensor<T>&,           \
                                     const Tensor<T>&, T);                      \
  template Var<T> masked_group_norm_tc<T>(const Var<T>&, int, const Var<T>&,    \
                                          const Var<T>&, const Tensor<T>&, T);  \
  template Var<T> attention_scores<T>(const Var<T>&, const Var<T>&);            \
  template Var<T> masked_softmax_time<T>(const Var<T>&, const Tensor<T>&);      \
  template Var<T> temporal_group_collapse<T>(const Var<T>&, const Var<T>&);     \
  template Var<T> bilinear_resize<T>(const Var<T>&, int64_t, int64_t);          \
  template Var<T> bilinear_resize_hw<T>(const Var<T>&, int64_t, int64_t);       \
  template Var<T> gather_pixels<T>(const Var<T>&,                               \
                                   const std::vector<std::array<int64_t, 3>>&); \
  template Var<T> cross_entropy_mean<T>(const Var<T>&, const Tensor<int32_t>&,  \
                                        int);                                   \
  template Var<T> cross_entropy_rows_sum<T>(const Var<T>&,                      \
                                            const Tensor<int32_t>&);            \
  template Var<T> bce_mean<T>(const Var<T>&, const Tensor<T>&, T);              \
  template Var<T> center_focal_loss<T>(const Var<T>&, const Tensor<T>&,         \
                                       const std::vector<int64_t>&, T, T);      \
  template void gemm<T>(bool, bool, int64_t, int64_t, int64_t, T, const T*,     \
                        int64_t, const T*, int64_t, T, T*, int64_t);

SITSPAN_INSTANTIATE_OPS(float)
SITSPAN_INSTANTIATE_OPS(double)

#undef SITSPAN_INSTANTIATE_OPS

}  // namespace sitspan::ag
