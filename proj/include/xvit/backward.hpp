#pragma once

#include <cstddef>

#include "xvit/tensor.hpp"

// Adjoints of the forward kernels in ops.hpp. Each takes the upstream
// gradient g plus whatever the forward pass saved.
namespace xvit::grad {

struct MatmulGrads {
  Tensor a;  // g . b^T
  Tensor b;  // a^T . g
};
MatmulGrads backward_matmul(const Tensor& g, const Tensor& a, const Tensor& b);

// y = softmax_rows(x): dx = y * (g - rowsum(g * y)).
Tensor backward_softmax_rows(const Tensor& g, const Tensor& y);

struct XNormGrads {
  Tensor v;
  double gamma = 0.0;
};
// For every slice v along `axis`, with n = sqrt(|v|^2 + eps^2):
//   dv     = (gamma / n) (g - (g.v / n^2) v)
//   dgamma = sum over slices of g.v / n
XNormGrads backward_xnorm(const Tensor& g, const Tensor& v, std::size_t axis,
                          double gamma, double eps);

Tensor backward_gelu(const Tensor& g, const Tensor& x);

struct ConvGrads {
  Tensor x, w, b;
};
ConvGrads backward_conv2d(const Tensor& g, const Tensor& x, const Tensor& w,
                          std::size_t stride, std::size_t padding);
ConvGrads backward_depthwise_conv3x3(const Tensor& g, const Tensor& x,
                                     const Tensor& w);

struct AffineGrads {
  Tensor x, scale, shift;
};
// y[n,c] = x[n,c] * scale[c] + shift[c].
AffineGrads backward_affine(const Tensor& g, const Tensor& x,
                            const Tensor& scale);

// Column sums of a [N, C] gradient (bias adjoint).
Tensor sum_rows(const Tensor& g);

}  // namespace xvit::grad
