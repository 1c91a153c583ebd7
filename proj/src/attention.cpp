#include "xvit/attention.hpp"

#include <cmath>
#include <string>

#include "xvit/ops.hpp"

namespace xvit {

std::string_view mechanism_name(Mechanism m) {
  return m == Mechanism::xnorm ? "xnorm" : "softmax";
}

Mechanism parse_mechanism(std::string_view name) {
  if (name == "xnorm") return Mechanism::xnorm;
  if (name == "softmax") return Mechanism::softmax;
  throw ConfigError("unknown attention mechanism '" + std::string(name) + "'");
}

void AttentionParams::validate() const {
  if (heads == 0) throw ConfigError("attention: heads must be >= 1");
  if (w_q.empty()) throw ShapeError("attention: missing w_q");
  const std::size_t c = w_q.dim(0);
  if (c % heads != 0) {
    throw ConfigError("attention: channels " + std::to_string(c) +
                      " not divisible by heads " + std::to_string(heads));
  }
  const Shape square{c, c};
  for (const Tensor* w : {&w_q, &w_k, &w_v, &w_o}) {
    if (w->empty() || w->shape() != square || w->dtype() != w_q.dtype()) {
      throw ShapeError("attention: projection weights must all be " +
                       shape_str(square));
    }
  }
  for (const Tensor* g : {&gamma_q, &gamma_c}) {
    if (g->empty() || g->numel() != heads) {
      throw ShapeError("attention: gamma must have one entry per head");
    }
    for (std::size_t i = 0; i < g->numel(); ++i) {
      if (!std::isfinite(g->at(i))) {
        throw NumericError("attention: non-finite gamma");
      }
    }
  }
  if (!(eps > 0.0)) throw ConfigError("attention: eps must be > 0");
}

AttentionParams AttentionParams::init(std::size_t dim, std::size_t heads,
                                      Rng& rng, DType dtype, double eps) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention: channels " + std::to_string(dim) +
                      " not divisible by heads " + std::to_string(heads));
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  AttentionParams p;
  p.w_q = uniform({dim, dim}, -bound, bound, rng, dtype);
  p.w_k = uniform({dim, dim}, -bound, bound, rng, dtype);
  p.w_v = uniform({dim, dim}, -bound, bound, rng, dtype);
  p.w_o = uniform({dim, dim}, -bound, bound, rng, dtype);
  p.gamma_q = Tensor::full({heads}, 1.0, dtype);
  p.gamma_c = Tensor::full({heads}, 1.0, dtype);
  p.heads = heads;
  p.eps = eps;
  return p;
}

Tensor xnorm(const Tensor& a, std::size_t axis, std::span<const double> gammas,
             double eps) {
  if (gammas.size() == 1) return l2_normalize_axis(a, axis, gammas, eps);
  if (a.empty() || a.rank() < 2 || a.dim(0) != gammas.size()) {
    throw ShapeError("xnorm: " + std::to_string(gammas.size()) +
                     " head scales need a leading head axis of that extent");
  }
  if (axis == 0) throw AxisError("xnorm: cannot normalize across heads");
  if (axis >= a.rank()) {
    throw AxisError("xnorm: axis " + std::to_string(axis) +
                    " out of range for " + shape_str(a.shape()));
  }
  const std::size_t slices = a.numel() / a.dim(axis);
  const std::size_t per_head = slices / gammas.size();
  std::vector<double> per_slice(slices);
  for (std::size_t s = 0; s < slices; ++s) per_slice[s] = gammas[s / per_head];
  return l2_normalize_axis(a, axis, per_slice, eps);
}

namespace {

void check_inputs(const Tensor& xq, const Tensor& xkv,
                  const AttentionParams& p) {
  p.validate();
  check_rank(xq, 2, "attention");
  check_rank(xkv, 2, "attention");
  if (xq.dim(1) != p.dim() || xkv.dim(1) != p.dim()) {
    throw ShapeError("attention: input " + shape_str(xq.shape()) + " / " +
                     shape_str(xkv.shape()) + " vs weights " +
                     shape_str(p.w_q.shape()));
  }
  if (xq.dtype() != p.w_q.dtype() || xkv.dtype() != p.w_q.dtype()) {
    throw ShapeError("attention: input and weight element types differ");
  }
}

}  // namespace

AttentionOutput softmax_attention(const Tensor& xq, const Tensor& xkv,
                                  const AttentionParams& p, bool retain) {
  check_inputs(xq, xkv, p);
  const std::size_t d = p.head_dim();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  AttentionOutput result;
  std::vector<Tensor> head_out;
  head_out.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    HeadIntermediates hi;
    hi.q = matmul(xq, slice_cols(p.w_q, h * d, d));
    hi.k = matmul(xkv, slice_cols(p.w_k, h * d, d));
    hi.v = matmul(xkv, slice_cols(p.w_v, h * d, d));
    Tensor scores = matmul(hi.q, transpose2d(hi.k));
    scores = scale(scores, inv_sqrt_d);
    hi.probs = softmax_rows(scores);
    scores = Tensor();
    head_out.push_back(matmul(hi.probs, hi.v));
    if (retain) result.heads.push_back(std::move(hi));
  }
  result.merged = concat_cols(head_out);
  head_out.clear();
  result.out = matmul(result.merged, p.w_o);
  return result;
}

AttentionOutput softmax_attention(const Tensor& x, const AttentionParams& p,
                                  bool retain) {
  return softmax_attention(x, x, p, retain);
}

AttentionOutput xnorm_attention(const Tensor& xq, const Tensor& xkv,
                                const AttentionParams& p, bool retain) {
  check_inputs(xq, xkv, p);
  const std::size_t d = p.head_dim();
  AttentionOutput result;
  std::vector<Tensor> head_out;
  head_out.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    HeadIntermediates hi;
    hi.q = matmul(xq, slice_cols(p.w_q, h * d, d));
    hi.k = matmul(xkv, slice_cols(p.w_k, h * d, d));
    hi.v = matmul(xkv, slice_cols(p.w_v, h * d, d));
    hi.context = matmul(transpose2d(hi.k), hi.v);
    hi.q_norm = l2_normalize_axis(hi.q, 1, p.gamma_q.at(h), p.eps);
    hi.context_norm = l2_normalize_axis(hi.context, 1, p.gamma_c.at(h), p.eps);
    head_out.push_back(matmul(hi.q_norm, hi.context_norm));
    if (retain) result.heads.push_back(std::move(hi));
  }
  result.merged = concat_cols(head_out);
  head_out.clear();
  result.out = matmul(result.merged, p.w_o);
  return result;
}

AttentionOutput xnorm_attention(const Tensor& x, const AttentionParams& p,
                                bool retain) {
  return xnorm_attention(x, x, p, retain);
}

AttentionOutput attention(Mechanism m, const Tensor& xq, const Tensor& xkv,
                          const AttentionParams& p, bool retain) {
  return m == Mechanism::xnorm ? xnorm_attention(xq, xkv, p, retain)
                               : softmax_attention(xq, xkv, p, retain);
}

double assoc_check(const Tensor& q, const Tensor& k, const Tensor& v) {
  check_rank(q, 2, "assoc_check");
  check_rank(k, 2, "assoc_check");
  check_rank(v, 2, "assoc_check");
  if (q.shape() != k.shape() || k.dim(0) != v.dim(0) ||
      q.dtype() != k.dtype() || k.dtype() != v.dtype()) {
    throw ShapeError("assoc_check: shapes " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const Tensor kt = transpose2d(k);
  const Tensor left = matmul(matmul(q, kt), v);
  const Tensor right = matmul(q, matmul(kt, v));
  return max_abs_diff(left, right);
}

Tensor class_attention(const Tensor& cls, const Tensor& tokens,
                       const AttentionParams& p, Mechanism m) {
  check_rank(cls, 2, "class_attention");
  if (cls.dim(0) != 1) {
    throw ShapeError("class_attention: class token must be [1, C], got " +
                     shape_str(cls.shape()));
  }
  if (tokens.empty()) return attention(m, cls, cls, p).out;
  const Tensor parts[] = {cls, tokens};
  return attention(m, cls, concat_rows(parts), p).out;
}

}  // namespace xvit
