#include "xvit/backward.hpp"

#include <cmath>

#include "xvit/ops.hpp"

namespace xvit::grad {

MatmulGrads backward_matmul(const Tensor& g, const Tensor& a, const Tensor& b) {
  check_rank(g, 2, "backward_matmul");
  if (g.dim(0) != a.dim(0) || g.dim(1) != b.dim(1)) {
    throw ShapeError("backward_matmul: gradient " + shape_str(g.shape()) +
                     " does not match " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  return {matmul(g, transpose2d(b)), matmul_tn(a, g)};
}

Tensor backward_softmax_rows(const Tensor& g, const Tensor& y) {
  check_same(g, y, "backward_softmax_rows");
  const std::size_t m = y.dim(0), p = y.dim(1);
  Tensor dx(y.shape(), y.dtype());
  dispatch(y.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto gs = g.data<T>();
    auto ys = y.data<T>();
    auto out = dx.mutable_data<T>();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < p; ++j) dot += gs[i * p + j] * ys[i * p + j];
      for (std::size_t j = 0; j < p; ++j) {
        out[i * p + j] = static_cast<T>(ys[i * p + j] * (gs[i * p + j] - dot));
      }
    }
  });
  return dx;
}

XNormGrads backward_xnorm(const Tensor& g, const Tensor& v, std::size_t axis,
                          double gamma, double eps) {
  check_same(g, v, "backward_xnorm");
  if (axis >= v.rank()) {
    throw AxisError("backward_xnorm: axis " + std::to_string(axis) +
                    " out of range for " + shape_str(v.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= v.dim(d);
  for (std::size_t d = axis + 1; d < v.rank(); ++d) inner *= v.dim(d);
  const std::size_t len = v.dim(axis);
  const double eps2 = eps * eps;
  XNormGrads out;
  out.v = Tensor(v.shape(), v.dtype());
  dispatch(v.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto gs = g.data<T>();
    auto vs = v.data<T>();
    auto dv = out.v.mutable_data<T>();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double ss = 0.0, gv = 0.0;
        for (std::size_t l = 0; l < len; ++l) {
          const double x = vs[base + l * inner];
          ss += x * x;
          gv += gs[base + l * inner] * x;
        }
        const double n2 = ss + eps2;
        const double n = std::sqrt(n2);
        const double radial = gv / n2;
        for (std::size_t l = 0; l < len; ++l) {
          const std::size_t idx = base + l * inner;
          dv[idx] = static_cast<T>(gamma / n * (gs[idx] - radial * vs[idx]));
        }
        out.gamma += gv / n;
      }
    }
  });
  return out;
}

Tensor backward_gelu(const Tensor& g, const Tensor& x) {
  check_same(g, x, "backward_gelu");
  Tensor dx(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto gs = g.data<T>();
    auto xs = x.data<T>();
    auto out = dx.mutable_data<T>();
    const T s = static_cast<T>(kGeluSqrt2OverPi);
    const T c = static_cast<T>(kGeluCubic);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const T v = xs[i];
      const T t = std::tanh(s * (v + c * v * v * v));
      const T du = s * (T(1) + T(3) * c * v * v);
      out[i] = gs[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du);
    }
  });
  return dx;
}

ConvGrads backward_conv2d(const Tensor& g, const Tensor& x, const Tensor& w,
                          std::size_t stride, std::size_t padding) {
  check_rank(g, 3, "backward_conv2d");
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const std::size_t oh = g.dim(1), ow = g.dim(2);
  if (g.dim(0) != cout || (h + 2 * padding - k) / stride + 1 != oh ||
      (wd + 2 * padding - k) / stride + 1 != ow) {
    throw ShapeError("backward_conv2d: gradient " + shape_str(g.shape()) +
                     " does not match forward shapes");
  }
  ConvGrads out{Tensor(x.shape(), x.dtype()), Tensor(w.shape(), w.dtype()),
                Tensor({cout}, x.dtype())};
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto gs = g.data<T>();
    auto xs = x.data<T>();
    auto ws = w.data<T>();
    auto dx = out.x.mutable_data<T>();
    auto dw = out.w.mutable_data<T>();
    auto db = out.b.mutable_data<T>();
    const auto ip = static_cast<std::ptrdiff_t>(padding);
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          const T gv = gs[(co * oh + i) * ow + j];
          db[co] += gv;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const std::size_t xo = ci * h * wd;
            const std::size_t ko = (co * cin + ci) * k * k;
            for (std::size_t u = 0; u < k; ++u) {
              const std::ptrdiff_t ii =
                  static_cast<std::ptrdiff_t>(i * stride + u) - ip;
              if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t v = 0; v < k; ++v) {
                const std::ptrdiff_t jj =
                    static_cast<std::ptrdiff_t>(j * stride + v) - ip;
                if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(wd)) continue;
                dw[ko + u * k + v] += gv * xs[xo + ii * wd + jj];
                dx[xo + ii * wd + jj] += gv * ws[ko + u * k + v];
              }
            }
          }
        }
      }
    }
  });
  return out;
}

ConvGrads backward_depthwise_conv3x3(const Tensor& g, const Tensor& x,
                                     const Tensor& w) {
  check_same(g, x, "backward_depthwise_conv3x3");
  const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  ConvGrads out{Tensor(x.shape(), x.dtype()), Tensor(w.shape(), w.dtype()),
                Tensor({c}, x.dtype())};
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto gs = g.data<T>();
    auto xs = x.data<T>();
    auto ws = w.data<T>();
    auto dx = out.x.mutable_data<T>();
    auto dw = out.w.mutable_data<T>();
    auto db = out.b.mutable_data<T>();
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = ch * h * wd;
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < wd; ++j) {
          const T gv = gs[off + i * wd + j];
          db[ch] += gv;
          for (int di = -1; di <= 1; ++di) {
            const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i) + di;
            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
            for (int dj = -1; dj <= 1; ++dj) {
              const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j) + dj;
              if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(wd)) continue;
              const std::size_t kidx = ch * 9 + (di + 1) * 3 + (dj + 1);
              dw[kidx] += gv * xs[off + ii * wd + jj];
              dx[off + ii * wd + jj] += gv * ws[kidx];
            }
          }
        }
      }
    }
  });
  return out;
}

AffineGrads backward_affine(const Tensor& g, const Tensor& x,
                            const Tensor& scale) {
  check_same(g, x, "backward_affine");
  const std::size_t n = x.dim(0), c = x.dim(1);
  AffineGrads out{Tensor(x.shape(), x.dtype()), Tensor({c}, x.dtype()),
                  Tensor({c}, x.dtype())};
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto gs = g.data<T>();
    auto xs = x.data<T>();
    auto al = scale.data<T>();
    auto dx = out.x.mutable_data<T>();
    auto ds = out.scale.mutable_data<T>();
    auto dt = out.shift.mutable_data<T>();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const T gv = gs[i * c + j];
        dx[i * c + j] = gv * al[j];
        ds[j] += gv * xs[i * c + j];
        dt[j] += gv;
      }
    }
  });
  return out;
}

Tensor sum_rows(const Tensor& g) {
  check_rank(g, 2, "sum_rows");
  const std::size_t n = g.dim(0), c = g.dim(1);
  Tensor out({c}, g.dtype());
  dispatch(g.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto gs = g.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) o[j] += gs[i * c + j];
    }
  });
  return out;
}

}  // namespace xvit::grad
