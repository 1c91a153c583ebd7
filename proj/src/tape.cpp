#include "xvit/tape.hpp"

#include <cmath>
#include <string>

#include "xvit/backward.hpp"
#include "xvit/ops.hpp"

namespace xvit::grad {

void Tape::check_open() const {
  if (consumed_) throw TapeError("tape already differentiated; record a new one");
}

void Tape::check_var(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) {
    throw TapeError("variable does not belong to this tape");
  }
}

Var Tape::push(Tensor value, bool requires_grad, BackwardFn fn) {
  check_open();
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

void Tape::accumulate(Var v, const Tensor& g) {
  Node& n = nodes_[v.id];
  if (!n.requires_grad) return;
  if (g.shape() != n.value.shape()) {
    throw TapeError("gradient shape " + shape_str(g.shape()) +
                    " does not match value " + shape_str(n.value.shape()));
  }
  n.grad = n.grad.empty() ? g : xvit::add(n.grad, g);
}

Var Tape::input(const Tensor& t) { return push(t, false, nullptr); }

Var Tape::leaf(const Tensor& t) { return push(t, true, nullptr); }

Var Tape::param(const Tensor& t) {
  auto it = params_.find(&t);
  if (it != params_.end()) return Var{it->second};
  Var v = leaf(t);
  params_.emplace(&t, v.id);
  return v;
}

const Tensor& Tape::value(Var v) const {
  check_var(v);
  return nodes_[v.id].value;
}

Var Tape::matmul(Var a, Var b) {
  check_var(a);
  check_var(b);
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  return push(xvit::matmul(av, bv), needs(a) || needs(b),
              [a, b, av, bv](Tape& t, const Tensor& g) {
                if (t.needs(a)) t.accumulate(a, xvit::matmul(g, transpose2d(bv)));
                if (t.needs(b)) t.accumulate(b, matmul_tn(av, g));
              });
}

Var Tape::transpose(Var a) {
  check_var(a);
  return push(transpose2d(value(a)), needs(a), [a](Tape& t, const Tensor& g) {
    t.accumulate(a, transpose2d(g));
  });
}

Var Tape::add(Var a, Var b) {
  check_var(a);
  check_var(b);
  return push(xvit::add(value(a), value(b)), needs(a) || needs(b),
              [a, b](Tape& t, const Tensor& g) {
                t.accumulate(a, g);
                t.accumulate(b, g);
              });
}

Var Tape::scale(Var a, double s) {
  check_var(a);
  return push(xvit::scale(value(a), s), needs(a),
              [a, s](Tape& t, const Tensor& g) {
                t.accumulate(a, xvit::scale(g, s));
              });
}

Var Tape::add_bias(Var x, Var b) {
  check_var(x);
  check_var(b);
  const Shape bshape = value(b).shape();
  return push(add_bias_rows(value(x), value(b)), needs(x) || needs(b),
              [x, b, bshape](Tape& t, const Tensor& g) {
                t.accumulate(x, g);
                if (t.needs(b)) t.accumulate(b, sum_rows(g).reshape(bshape));
              });
}

Var Tape::affine(Var x, Var scale, Var shift) {
  check_var(x);
  check_var(scale);
  check_var(shift);
  const Tensor& xv = value(x);
  const Tensor& sv = value(scale);
  return push(affine_channels(xv, sv, value(shift)),
              needs(x) || needs(scale) || needs(shift),
              [x, scale, shift, xv, sv](Tape& t, const Tensor& g) {
                auto r = backward_affine(g, xv, sv);
                t.accumulate(x, r.x);
                t.accumulate(scale, r.scale.reshape(sv.shape()));
                t.accumulate(shift, r.shift.reshape(t.value(shift).shape()));
              });
}

Var Tape::gelu(Var a) {
  check_var(a);
  const Tensor& av = value(a);
  return push(xvit::gelu(av), needs(a), [a, av](Tape& t, const Tensor& g) {
    t.accumulate(a, backward_gelu(g, av));
  });
}

Var Tape::softmax_rows(Var a) {
  check_var(a);
  Tensor y = xvit::softmax_rows(value(a));
  return push(y, needs(a), [a, y](Tape& t, const Tensor& g) {
    t.accumulate(a, backward_softmax_rows(g, y));
  });
}

Var Tape::xnorm_rows(Var a, Var gammas, std::size_t head, double eps) {
  check_var(a);
  check_var(gammas);
  const Tensor& av = value(a);
  const Tensor& gv = value(gammas);
  check_rank(av, 2, "xnorm_rows");
  if (head >= gv.numel()) {
    throw ShapeError("xnorm_rows: head " + std::to_string(head) +
                     " outside gamma " + shape_str(gv.shape()));
  }
  const double gamma = gv.at(head);
  return push(l2_normalize_axis(av, 1, gamma, eps), needs(a) || needs(gammas),
              [a, gammas, head, eps, av, gamma](Tape& t, const Tensor& g) {
                auto r = backward_xnorm(g, av, 1, gamma, eps);
                t.accumulate(a, r.v);
                if (t.needs(gammas)) {
                  Tensor dg(t.value(gammas).shape(), av.dtype());
                  dg.set(head, r.gamma);
                  t.accumulate(gammas, dg);
                }
              });
}

Var Tape::conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t padding) {
  check_var(x);
  check_var(w);
  check_var(b);
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  return push(xvit::conv2d(xv, wv, value(b), stride, padding),
              needs(x) || needs(w) || needs(b),
              [x, w, b, xv, wv, stride, padding](Tape& t, const Tensor& g) {
                auto r = backward_conv2d(g, xv, wv, stride, padding);
                t.accumulate(x, r.x);
                t.accumulate(w, r.w);
                t.accumulate(b, r.b.reshape(t.value(b).shape()));
              });
}

Var Tape::dwconv(Var x, Var w, Var b) {
  check_var(x);
  check_var(w);
  check_var(b);
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  return push(depthwise_conv3x3(xv, wv, value(b)),
              needs(x) || needs(w) || needs(b),
              [x, w, b, xv, wv](Tape& t, const Tensor& g) {
                auto r = backward_depthwise_conv3x3(g, xv, wv);
                t.accumulate(x, r.x);
                t.accumulate(w, r.w);
                t.accumulate(b, r.b.reshape(t.value(b).shape()));
              });
}

Var Tape::tokens_to_grid(Var x, std::size_t rows, std::size_t cols) {
  check_var(x);
  return push(xvit::tokens_to_grid(value(x), rows, cols), needs(x),
              [x](Tape& t, const Tensor& g) {
                t.accumulate(x, xvit::grid_to_tokens(g));
              });
}

Var Tape::grid_to_tokens(Var x) {
  check_var(x);
  const Shape s = value(x).shape();
  return push(xvit::grid_to_tokens(value(x)), needs(x),
              [x, s](Tape& t, const Tensor& g) {
                t.accumulate(x, xvit::tokens_to_grid(g, s[1], s[2]));
              });
}

Var Tape::slice_rows(Var a, std::size_t start, std::size_t count) {
  check_var(a);
  const Shape s = value(a).shape();
  const DType dt = value(a).dtype();
  return push(xvit::slice_rows(value(a), start, count), needs(a),
              [a, s, dt, start](Tape& t, const Tensor& g) {
                Tensor full(s, dt);
                dispatch(dt, [&](auto tag) {
                  using T = decltype(tag);
                  auto src = g.data<T>();
                  auto dst = full.mutable_data<T>();
                  std::copy(src.begin(), src.end(),
                            dst.begin() + start * s[1]);
                });
                t.accumulate(a, full);
              });
}

Var Tape::concat_rows(Var a, Var b) {
  const Var parts[] = {a, b};
  return concat_rows(parts);
}

Var Tape::concat_rows(std::span<const Var> parts) {
  std::vector<Tensor> values;
  std::vector<Var> vars(parts.begin(), parts.end());
  bool req = false;
  for (Var v : vars) {
    check_var(v);
    values.push_back(value(v));
    req = req || needs(v);
  }
  return push(xvit::concat_rows(values), req,
              [vars](Tape& t, const Tensor& g) {
                std::size_t row = 0;
                for (Var v : vars) {
                  const std::size_t n = t.value(v).dim(0);
                  if (t.needs(v)) t.accumulate(v, xvit::slice_rows(g, row, n));
                  row += n;
                }
              });
}

Var Tape::slice_cols(Var a, std::size_t start, std::size_t width) {
  check_var(a);
  const Shape s = value(a).shape();
  const DType dt = value(a).dtype();
  return push(xvit::slice_cols(value(a), start, width), needs(a),
              [a, s, dt, start, width](Tape& t, const Tensor& g) {
                Tensor full(s, dt);
                dispatch(dt, [&](auto tag) {
                  using T = decltype(tag);
                  auto src = g.data<T>();
                  auto dst = full.mutable_data<T>();
                  for (std::size_t i = 0; i < s[0]; ++i) {
                    std::copy_n(src.data() + i * width, width,
                                dst.data() + i * s[1] + start);
                  }
                });
                t.accumulate(a, full);
              });
}

Var Tape::concat_cols(std::span<const Var> parts) {
  std::vector<Tensor> values;
  std::vector<Var> vars(parts.begin(), parts.end());
  bool req = false;
  for (Var v : vars) {
    check_var(v);
    values.push_back(value(v));
    req = req || needs(v);
  }
  return push(xvit::concat_cols(values), req,
              [vars](Tape& t, const Tensor& g) {
                std::size_t col = 0;
                for (Var v : vars) {
                  const std::size_t w = t.value(v).dim(1);
                  if (t.needs(v)) t.accumulate(v, xvit::slice_cols(g, col, w));
                  col += w;
                }
              });
}

Var Tape::attention(Mechanism m, Var xq, Var xkv, const AttentionParams& p) {
  p.validate();
  const std::size_t d = p.head_dim();
  Var wq = param(p.w_q), wk = param(p.w_k), wv = param(p.w_v),
      wo = param(p.w_o);
  Var gq = param(p.gamma_q), gc = param(p.gamma_c);
  std::vector<Var> heads;
  heads.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    Var q = matmul(xq, slice_cols(wq, h * d, d));
    Var k = matmul(xkv, slice_cols(wk, h * d, d));
    Var v = matmul(xkv, slice_cols(wv, h * d, d));
    if (m == Mechanism::xnorm) {
      Var ctx = matmul(transpose(k), v);
      heads.push_back(matmul(xnorm_rows(q, gq, h, p.eps),
                             xnorm_rows(ctx, gc, h, p.eps)));
    } else {
      Var s = scale(matmul(q, transpose(k)),
                    1.0 / std::sqrt(static_cast<double>(d)));
      heads.push_back(matmul(softmax_rows(s), v));
    }
  }
  return matmul(concat_cols(heads), wo);
}

Var Tape::cross_entropy(Var logits, std::span<const int> labels) {
  check_var(logits);
  const Tensor& lv = value(logits);
  check_rank(lv, 2, "cross_entropy");
  const std::size_t b = lv.dim(0), k = lv.dim(1);
  if (labels.size() != b) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(b) + " rows");
  }
  std::vector<int> lab(labels.begin(), labels.end());
  for (int l : lab) {
    if (l < 0 || static_cast<std::size_t>(l) >= k) {
      throw DataError("cross_entropy: label " + std::to_string(l) +
                      " outside [0, " + std::to_string(k) + ")");
    }
  }
  Tensor probs = xvit::softmax_rows(lv);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double mx = lv.at(i * k);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, lv.at(i * k + j));
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(lv.at(i * k + j) - mx);
    loss += mx + std::log(s) - lv.at(i * k + lab[i]);
  }
  loss /= static_cast<double>(b);
  Tensor out = Tensor::full({1}, loss, lv.dtype());
  return push(out, needs(logits),
              [logits, probs, lab, b, k](Tape& t, const Tensor& g) {
                const double gs = g.at(0) / static_cast<double>(b);
                Tensor d = probs;
                for (std::size_t i = 0; i < b; ++i) {
                  for (std::size_t j = 0; j < k; ++j) {
                    const double y = j == static_cast<std::size_t>(lab[i]);
                    d.set(i * k + j, (probs.at(i * k + j) - y) * gs);
                  }
                }
                t.accumulate(logits, d);
              });
}

Var Tape::weighted_sum(Var a, const Tensor& w) {
  check_var(a);
  const Tensor& av = value(a);
  check_same(av, w, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < av.numel(); ++i) s += av.at(i) * w.at(i);
  return push(Tensor::full({1}, s, av.dtype()), needs(a),
              [a, w](Tape& t, const Tensor& g) {
                t.accumulate(a, xvit::scale(w, g.at(0)));
              });
}

void Tape::backward(Var loss) {
  check_open();
  check_var(loss);
  if (nodes_[loss.id].value.numel() != 1) {
    throw TapeError("backward needs a single-element loss, got " +
                    shape_str(nodes_[loss.id].value.shape()));
  }
  consumed_ = true;
  if (!nodes_[loss.id].requires_grad) return;
  nodes_[loss.id].grad = Tensor::full(nodes_[loss.id].value.shape(), 1.0,
                                      nodes_[loss.id].value.dtype());
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    const Tensor g = n.grad;
    n.backward(*this, g);
  }
}

Tensor Tape::grad(Var v) const {
  check_var(v);
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) return Tensor::zeros(n.value.shape(), n.value.dtype());
  return n.grad;
}

bool Tape::has_param(const Tensor& param) const {
  return params_.count(&param) != 0;
}

Tensor Tape::grad_of(const Tensor& param) const {
  auto it = params_.find(&param);
  if (it == params_.end()) return Tensor::zeros(param.shape(), param.dtype());
  return grad(Var{it->second});
}

}  // namespace xvit::grad
