#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "xvit/tensor.hpp"

// Dense kernels over Tensor. All kernels are single-threaded with a fixed
// reduction order, so results are bit-reproducible run to run.
namespace xvit {

// c[i,j] = sum_k a[i,k] * b[k,j].
Tensor matmul(const Tensor& a, const Tensor& b);
// a^T b without forming the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b);

Tensor transpose2d(const Tensor& a);

// Row-wise softmax with per-row max subtraction. NaN input throws
// NumericError.
Tensor softmax_rows(const Tensor& a);

// Every vector v along `axis` becomes gamma * v / sqrt(|v|^2 + eps^2).
// gamma holds either one value or one value per normalized slice, slices
// enumerated in row-major order of the remaining axes.
Tensor l2_normalize_axis(const Tensor& a, std::size_t axis,
                         std::span<const double> gamma, double eps);
Tensor l2_normalize_axis(const Tensor& a, std::size_t axis, double gamma,
                         double eps);

// Per-channel 3x3 cross-correlation, zero padding 1. x: [C,H,W],
// w: [C,3,3], bias: empty or [C].
Tensor depthwise_conv3x3(const Tensor& x, const Tensor& w,
                         const Tensor& bias = {});

// Cross-correlation. x: [Cin,H,W], w: [Cout,Cin,k,k], bias: empty or
// [Cout]. Output extents are floor((H + 2p - k) / s) + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::size_t stride, std::size_t padding);

// tanh approximation:
//   gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
inline constexpr double kGeluSqrt2OverPi = 0.7978845608028654;
inline constexpr double kGeluCubic = 0.044715;
Tensor gelu(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// x: [N,C] plus b: [C] broadcast over rows.
Tensor add_bias_rows(const Tensor& x, const Tensor& b);
// x: [N,C]; out[n,c] = x[n,c] * alpha[c] + beta[c].
Tensor affine_channels(const Tensor& x, const Tensor& alpha,
                       const Tensor& beta);

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t width);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
Tensor concat_rows(std::span<const Tensor> parts);

// [N,C] tokens (row-major over a rows x cols grid) <-> [C,rows,cols].
Tensor tokens_to_grid(const Tensor& x, std::size_t rows, std::size_t cols);
Tensor grid_to_tokens(const Tensor& x);

double max_abs_diff(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& a);

// Throws ShapeError unless a and b have equal shape and dtype.
void check_same(const Tensor& a, const Tensor& b, const char* op);
void check_rank(const Tensor& a, std::size_t rank, const char* op);

}  // namespace xvit
