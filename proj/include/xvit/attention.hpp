#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "xvit/tensor.hpp"

namespace xvit {

inline constexpr double kDefaultEps = 1e-6;

enum class Mechanism { xnorm, softmax };

std::string_view mechanism_name(Mechanism m);
Mechanism parse_mechanism(std::string_view name);

// Projection weights and per-head scales of one multi-head attention layer.
// Head h owns channels [h * head_dim, (h + 1) * head_dim) of every
// projection.
struct AttentionParams {
  Tensor w_q, w_k, w_v, w_o;  // [C, C]
  Tensor gamma_q;             // [heads], scales XNorm of Q
  Tensor gamma_c;             // [heads], scales XNorm of K^T V
  std::size_t heads = 1;
  double eps = kDefaultEps;

  std::size_t dim() const { return w_q.empty() ? 0 : w_q.dim(0); }
  std::size_t head_dim() const { return dim() / heads; }

  // Throws ConfigError / ShapeError on a malformed parameter set.
  void validate() const;

  // Weights ~ U(-1/sqrt(C), 1/sqrt(C)), gammas = 1.
  static AttentionParams init(std::size_t dim, std::size_t heads, Rng& rng,
                              DType dtype = DType::f64,
                              double eps = kDefaultEps);
};

struct HeadIntermediates {
  Tensor q, k, v;        // [Nq, d], [Nk, d], [Nk, d]
  Tensor context;        // xnorm: K^T V, [d, d]
  Tensor q_norm;         // xnorm: XN(Q)
  Tensor context_norm;   // xnorm: XN(K^T V)
  Tensor probs;          // softmax: [Nq, Nk]
};

struct AttentionOutput {
  Tensor out;     // [Nq, C]
  Tensor merged;  // concatenated head outputs before w_o, [Nq, C]
  std::vector<HeadIntermediates> heads;  // filled when retain == true
};

// XN along `axis` with one gamma, or one gamma per leading-axis slice
// (a.dim(0) == gammas.size(), axis != 0) for head-batched inputs.
Tensor xnorm(const Tensor& a, std::size_t axis, std::span<const double> gammas,
             double eps = kDefaultEps);

// Per head: softmax(Q K^T / sqrt(d)) V. Materializes the [Nq, Nk] matrix.
AttentionOutput softmax_attention(const Tensor& x, const AttentionParams& p,
                                  bool retain = false);
AttentionOutput softmax_attention(const Tensor& xq, const Tensor& xkv,
                                  const AttentionParams& p,
                                  bool retain = false);

// Per head: XN(Q) . XN(K^T V). Q is normalized per token across the head
// channels; K^T V is normalized per row across the value channels. Never
// forms an Nq x Nk matrix.
AttentionOutput xnorm_attention(const Tensor& x, const AttentionParams& p,
                                bool retain = false);
AttentionOutput xnorm_attention(const Tensor& xq, const Tensor& xkv,
                                const AttentionParams& p, bool retain = false);

AttentionOutput attention(Mechanism m, const Tensor& xq, const Tensor& xkv,
                          const AttentionParams& p, bool retain = false);

// max |(Q K^T) V - Q (K^T V)|.
double assoc_check(const Tensor& q, const Tensor& k, const Tensor& v);

// Single query (the class token) over keys/values [cls; tokens]. An empty
// `tokens` leaves the class token as the only key.
Tensor class_attention(const Tensor& cls, const Tensor& tokens,
                       const AttentionParams& p,
                       Mechanism m = Mechanism::xnorm);

}  // namespace xvit
