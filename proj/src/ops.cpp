#include "xvit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace xvit {

void check_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) {
    throw ShapeError(std::string(op) + ": operands differ, " +
                     shape_str(a.shape()) + " " +
                     std::string(dtype_name(a.dtype())) + " vs " +
                     shape_str(b.shape()) + " " +
                     std::string(dtype_name(b.dtype())));
  }
}

void check_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.empty() || a.rank() != rank) {
    throw RankError(std::string(op) + ": expected rank " +
                    std::to_string(rank) + ", got " +
                    (a.empty() ? std::string("empty tensor")
                               : shape_str(a.shape())));
  }
}

namespace {

void check_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ShapeError(std::string(op) + ": element types differ");
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank(a, 2, "matmul");
  check_rank(b, 2, "matmul");
  check_dtype(a, b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  Tensor c({m, p}, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* __restrict ad = a.data<T>().data();
    const T* __restrict bd = b.data<T>().data();
    T* __restrict cd = c.mutable_data<T>().data();
    for (std::size_t i = 0; i < m; ++i) {
      T* __restrict crow = cd + i * p;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T aik = ad[i * k + kk];
        const T* __restrict brow = bd + kk * p;
        for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
      }
    }
  });
  add_macs(static_cast<std::uint64_t>(m) * k * p);
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  check_rank(a, 2, "matmul_tn");
  check_rank(b, 2, "matmul_tn");
  check_dtype(a, b, "matmul_tn");
  const std::size_t k = a.dim(0), m = a.dim(1), p = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul_tn: leading extents differ, " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  Tensor c({m, p}, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* __restrict ad = a.data<T>().data();
    const T* __restrict bd = b.data<T>().data();
    T* __restrict cd = c.mutable_data<T>().data();
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T* __restrict brow = bd + kk * p;
      for (std::size_t i = 0; i < m; ++i) {
        const T aki = ad[kk * m + i];
        T* __restrict crow = cd + i * p;
        for (std::size_t j = 0; j < p; ++j) crow[j] += aki * brow[j];
      }
    }
  });
  add_macs(static_cast<std::uint64_t>(m) * k * p);
  return c;
}

Tensor transpose2d(const Tensor& a) {
  check_rank(a, 2, "transpose2d");
  const std::size_t m = a.dim(0), k = a.dim(1);
  Tensor out({k, m}, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = a.data<T>();
    auto dst = out.mutable_data<T>();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < k; ++j) dst[j * m + i] = src[i * k + j];
    }
  });
  return out;
}

Tensor softmax_rows(const Tensor& a) {
  check_rank(a, 2, "softmax_rows");
  const std::size_t m = a.dim(0), p = a.dim(1);
  Tensor out({m, p}, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = a.data<T>();
    auto dst = out.mutable_data<T>();
    for (std::size_t i = 0; i < m; ++i) {
      const T* row = src.data() + i * p;
      T* o = dst.data() + i * p;
      T mx = row[0];
      for (std::size_t j = 0; j < p; ++j) {
        if (std::isnan(row[j])) {
          throw NumericError("softmax_rows: NaN in row " + std::to_string(i));
        }
        mx = std::max(mx, row[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < p; ++j) {
        o[j] = std::exp(row[j] - mx);
        sum += o[j];
      }
      const T inv = static_cast<T>(1.0 / sum);
      for (std::size_t j = 0; j < p; ++j) o[j] *= inv;
    }
  });
  return out;
}

Tensor l2_normalize_axis(const Tensor& a, std::size_t axis,
                         std::span<const double> gamma, double eps) {
  if (a.empty()) throw ShapeError("l2_normalize_axis: empty tensor");
  if (axis >= a.rank()) {
    throw AxisError("l2_normalize_axis: axis " + std::to_string(axis) +
                    " out of range for " + shape_str(a.shape()));
  }
  if (!(eps > 0.0)) throw ConfigError("l2_normalize_axis: eps must be > 0");
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
  for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
  const std::size_t len = a.dim(axis);
  const std::size_t slices = outer * inner;
  if (gamma.size() != 1 && gamma.size() != slices) {
    throw ShapeError("l2_normalize_axis: gamma has " +
                     std::to_string(gamma.size()) + " entries, expected 1 or " +
                     std::to_string(slices));
  }
  const double eps2 = eps * eps;
  Tensor out(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = a.data<T>();
    auto dst = out.mutable_data<T>();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double ss = 0.0;
        for (std::size_t l = 0; l < len; ++l) {
          const double v = src[base + l * inner];
          ss += v * v;
        }
        const double g = gamma.size() == 1 ? gamma[0] : gamma[o * inner + in];
        const double f = g / std::sqrt(ss + eps2);
        for (std::size_t l = 0; l < len; ++l) {
          dst[base + l * inner] = static_cast<T>(src[base + l * inner] * f);
        }
      }
    }
  });
  add_macs(a.numel());
  return out;
}

Tensor l2_normalize_axis(const Tensor& a, std::size_t axis, double gamma,
                         double eps) {
  return l2_normalize_axis(a, axis, std::span<const double>(&gamma, 1), eps);
}

Tensor depthwise_conv3x3(const Tensor& x, const Tensor& w, const Tensor& bias) {
  check_rank(x, 3, "depthwise_conv3x3");
  check_rank(w, 3, "depthwise_conv3x3");
  check_dtype(x, w, "depthwise_conv3x3");
  const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  if (w.dim(0) != c || w.dim(1) != 3 || w.dim(2) != 3) {
    throw ShapeError("depthwise_conv3x3: kernel " + shape_str(w.shape()) +
                     " does not match input " + shape_str(x.shape()));
  }
  if (!bias.empty() && (bias.numel() != c || bias.dtype() != x.dtype())) {
    throw ShapeError("depthwise_conv3x3: bias " + shape_str(bias.shape()) +
                     " does not match " + std::to_string(c) + " channels");
  }
  Tensor out({c, h, wd}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = x.data<T>();
    auto ws = w.data<T>();
    auto os = out.mutable_data<T>();
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* xc = xs.data() + ch * h * wd;
      const T* k = ws.data() + ch * 9;
      T* oc = os.data() + ch * h * wd;
      const T b = bias.empty() ? T(0) : bias.data<T>()[ch];
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < wd; ++j) {
          T acc = b;
          for (int di = -1; di <= 1; ++di) {
            const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i) + di;
            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
            for (int dj = -1; dj <= 1; ++dj) {
              const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j) + dj;
              if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(wd)) continue;
              acc += k[(di + 1) * 3 + (dj + 1)] * xc[ii * wd + jj];
            }
          }
          oc[i * wd + j] = acc;
        }
      }
    }
  });
  add_macs(static_cast<std::uint64_t>(c) * h * wd * 9);
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::size_t stride, std::size_t padding) {
  check_rank(x, 3, "conv2d");
  check_rank(w, 4, "conv2d");
  check_dtype(x, w, "conv2d");
  if (stride == 0) throw ConfigError("conv2d: stride must be >= 1");
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin || w.dim(3) != k) {
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) +
                     " does not match input " + shape_str(x.shape()));
  }
  if (!bias.empty() && (bias.numel() != cout || bias.dtype() != x.dtype())) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) +
                     " does not match " + std::to_string(cout) + " channels");
  }
  const std::size_t ph = h + 2 * padding, pw = wd + 2 * padding;
  if (ph < k || pw < k) {
    throw ShapeError("conv2d: kernel larger than padded input " +
                     shape_str(x.shape()) + ", kernel " + std::to_string(k) +
                     ", stride " + std::to_string(stride) + ", padding " +
                     std::to_string(padding));
  }
  const std::size_t oh = (ph - k) / stride + 1, ow = (pw - k) / stride + 1;
  Tensor out({cout, oh, ow}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = x.data<T>();
    auto ws = w.data<T>();
    auto os = out.mutable_data<T>();
    const auto ip = static_cast<std::ptrdiff_t>(padding);
    for (std::size_t co = 0; co < cout; ++co) {
      const T b = bias.empty() ? T(0) : bias.data<T>()[co];
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          T acc = b;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const T* xc = xs.data() + ci * h * wd;
            const T* kc = ws.data() + (co * cin + ci) * k * k;
            for (std::size_t u = 0; u < k; ++u) {
              const std::ptrdiff_t ii =
                  static_cast<std::ptrdiff_t>(i * stride + u) - ip;
              if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t v = 0; v < k; ++v) {
                const std::ptrdiff_t jj =
                    static_cast<std::ptrdiff_t>(j * stride + v) - ip;
                if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(wd)) continue;
                acc += kc[u * k + v] * xc[ii * wd + jj];
              }
            }
          }
          os[(co * oh + i) * ow + j] = acc;
        }
      }
    }
  });
  add_macs(static_cast<std::uint64_t>(cout) * oh * ow * cin * k * k);
  return out;
}

Tensor gelu(const Tensor& a) {
  Tensor out(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = a.data<T>();
    auto dst = out.mutable_data<T>();
    for (std::size_t i = 0; i < src.size(); ++i) {
      const T x = src[i];
      const T u = static_cast<T>(kGeluSqrt2OverPi) *
                  (x + static_cast<T>(kGeluCubic) * x * x * x);
      dst[i] = T(0.5) * x * (T(1) + std::tanh(u));
    }
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same(a, b, "add");
  Tensor out = a;
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto o = out.mutable_data<T>();
    auto bd = b.data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  });
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (auto& v : out.mutable_data<T>()) v *= static_cast<T>(s);
  });
  return out;
}

Tensor add_bias_rows(const Tensor& x, const Tensor& b) {
  check_rank(x, 2, "add_bias_rows");
  check_dtype(x, b, "add_bias_rows");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (b.numel() != c) {
    throw ShapeError("add_bias_rows: bias " + shape_str(b.shape()) +
                     " vs input " + shape_str(x.shape()));
  }
  Tensor out = x;
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto o = out.mutable_data<T>();
    auto bd = b.data<T>();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) o[i * c + j] += bd[j];
    }
  });
  return out;
}

Tensor affine_channels(const Tensor& x, const Tensor& alpha,
                       const Tensor& beta) {
  check_rank(x, 2, "affine_channels");
  check_dtype(x, alpha, "affine_channels");
  check_dtype(x, beta, "affine_channels");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (alpha.numel() != c || beta.numel() != c) {
    throw ShapeError("affine_channels: scale/shift " +
                     shape_str(alpha.shape()) + "/" + shape_str(beta.shape()) +
                     " vs input " + shape_str(x.shape()));
  }
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = x.data<T>();
    auto al = alpha.data<T>();
    auto be = beta.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        o[i * c + j] = xs[i * c + j] * al[j] + be[j];
      }
    }
  });
  return out;
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t width) {
  check_rank(a, 2, "slice_cols");
  const std::size_t n = a.dim(0), c = a.dim(1);
  if (width == 0 || start + width > c) {
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", " +
                     std::to_string(start + width) + ") outside " +
                     shape_str(a.shape()));
  }
  Tensor out({n, width}, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = a.data<T>();
    auto dst = out.mutable_data<T>();
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(src.data() + i * c + start, width, dst.data() + i * width);
    }
  });
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = parts[0].dim(0);
  std::size_t c = 0;
  for (const auto& p : parts) {
    check_rank(p, 2, "concat_cols");
    check_dtype(parts[0], p, "concat_cols");
    if (p.dim(0) != n) {
      throw ShapeError("concat_cols: row counts differ, " +
                       shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    c += p.dim(1);
  }
  Tensor out({n, c}, parts[0].dtype());
  dispatch(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto dst = out.mutable_data<T>();
    std::size_t off = 0;
    for (const auto& p : parts) {
      auto src = p.data<T>();
      const std::size_t w = p.dim(1);
      for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(src.data() + i * w, w, dst.data() + i * c + off);
      }
      off += w;
    }
  });
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  check_rank(a, 2, "slice_rows");
  const std::size_t n = a.dim(0), c = a.dim(1);
  if (count == 0 || start + count > n) {
    throw ShapeError("slice_rows: [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") outside " +
                     shape_str(a.shape()));
  }
  Tensor out({count, c}, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = a.data<T>();
    std::copy_n(src.data() + start * c, count * c,
                out.mutable_data<T>().data());
  });
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts[0].dim(1);
  std::size_t n = 0;
  for (const auto& p : parts) {
    check_rank(p, 2, "concat_rows");
    check_dtype(parts[0], p, "concat_rows");
    if (p.dim(1) != c) {
      throw ShapeError("concat_rows: column counts differ, " +
                       shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    n += p.dim(0);
  }
  Tensor out({n, c}, parts[0].dtype());
  dispatch(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto dst = out.mutable_data<T>();
    std::size_t off = 0;
    for (const auto& p : parts) {
      auto src = p.data<T>();
      std::copy(src.begin(), src.end(), dst.begin() + off);
      off += src.size();
    }
  });
  return out;
}

Tensor tokens_to_grid(const Tensor& x, std::size_t rows, std::size_t cols) {
  check_rank(x, 2, "tokens_to_grid");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (rows * cols != n) {
    throw ShapeError("tokens_to_grid: grid " + std::to_string(rows) + "x" +
                     std::to_string(cols) + " does not hold " +
                     std::to_string(n) + " tokens");
  }
  Tensor t = transpose2d(x);
  return t.reshape({c, rows, cols});
}

Tensor grid_to_tokens(const Tensor& x) {
  check_rank(x, 3, "grid_to_tokens");
  const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
  return transpose2d(x.reshape({c, n}));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(a.at(i) - b.at(i)));
  }
  return m;
}

double l2_norm(const Tensor& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.at(i) * a.at(i);
  return std::sqrt(s);
}

}  // namespace xvit
