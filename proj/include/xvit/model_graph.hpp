#pragma once

// The model's forward pass written once against a graph policy G. Two
// policies exist: graph::Eval (plain tensors, used for inference) and
// grad::Tape (records every op for reverse-mode differentiation).
//
// A policy provides `using Value`, `param(const Tensor&)` for trainable
// tensors, and the ops called below.

#include <cstddef>

#include "xvit/attention.hpp"
#include "xvit/model.hpp"
#include "xvit/ops.hpp"

namespace xvit::graph {

struct Eval {
  using Value = Tensor;

  Tensor param(const Tensor& t) { return t; }
  Tensor input(const Tensor& t) { return t; }
  Tensor matmul(const Tensor& a, const Tensor& b) { return xvit::matmul(a, b); }
  Tensor add(const Tensor& a, const Tensor& b) { return xvit::add(a, b); }
  Tensor add_bias(const Tensor& x, const Tensor& b) {
    return add_bias_rows(x, b);
  }
  Tensor affine(const Tensor& x, const Tensor& s, const Tensor& t) {
    return affine_channels(x, s, t);
  }
  Tensor gelu(const Tensor& x) { return xvit::gelu(x); }
  Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                std::size_t stride, std::size_t padding) {
    return xvit::conv2d(x, w, b, stride, padding);
  }
  Tensor dwconv(const Tensor& x, const Tensor& w, const Tensor& b) {
    return depthwise_conv3x3(x, w, b);
  }
  Tensor tokens_to_grid(const Tensor& x, std::size_t rows, std::size_t cols) {
    return xvit::tokens_to_grid(x, rows, cols);
  }
  Tensor grid_to_tokens(const Tensor& x) { return xvit::grid_to_tokens(x); }
  Tensor concat_rows(const Tensor& a, const Tensor& b) {
    const Tensor parts[] = {a, b};
    return xvit::concat_rows(parts);
  }
  Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
    return xvit::slice_rows(a, start, count);
  }
  Tensor attention(Mechanism m, const Tensor& xq, const Tensor& xkv,
                   const AttentionParams& p) {
    return xvit::attention(m, xq, xkv, p).out;
  }
};

template <class G>
typename G::Value affine(G& g, const typename G::Value& x, const Affine& a) {
  return g.affine(x, g.param(a.scale), g.param(a.shift));
}

template <class G>
typename G::Value mlp(G& g, const typename G::Value& x, const Mlp& m) {
  auto h = g.gelu(g.add_bias(g.matmul(x, g.param(m.w1)), g.param(m.b1)));
  return g.add_bias(g.matmul(h, g.param(m.w2)), g.param(m.b2));
}

template <class G>
typename G::Value lpi(G& g, const typename G::Value& x, const Lpi& l,
                      std::size_t rows, std::size_t cols) {
  auto y = g.tokens_to_grid(x, rows, cols);
  y = g.gelu(g.dwconv(y, g.param(l.w1), g.param(l.b1)));
  y = g.dwconv(y, g.param(l.w2), g.param(l.b2));
  return g.grid_to_tokens(y);
}

template <class G>
typename G::Value block(G& g, typename G::Value x, const BlockParams& bp,
                        std::size_t rows, std::size_t cols, Mechanism m) {
  auto a = affine(g, x, bp.pre_attn);
  x = g.add(x, g.attention(m, a, a, bp.attn));
  x = g.add(x, lpi(g, affine(g, x, bp.pre_lpi), bp.lpi, rows, cols));
  x = g.add(x, mlp(g, affine(g, x, bp.pre_mlp), bp.mlp));
  return x;
}

// Returns the updated class token; patches are read, never written.
template <class G>
typename G::Value class_block(G& g, const typename G::Value& cls,
                              const typename G::Value& patches,
                              const ClassBlockParams& cb, Mechanism m) {
  auto normed = affine(g, g.concat_rows(cls, patches), cb.pre_attn);
  auto q = g.slice_rows(normed, 0, 1);
  auto out = g.add(cls, g.attention(m, q, normed, cb.attn));
  return g.add(out, mlp(g, affine(g, out, cb.pre_mlp), cb.mlp));
}

template <class G>
typename G::Value stem(G& g, const typename G::Value& img,
                       const ModelParams& mp) {
  auto x = img;
  for (std::size_t i = 0; i < mp.stem.size(); ++i) {
    x = g.conv2d(x, g.param(mp.stem[i].w), g.param(mp.stem[i].b), 2, 1);
    if (i + 1 < mp.stem.size()) x = g.gelu(x);
  }
  x = g.grid_to_tokens(x);
  if (!mp.pos_embed.empty()) x = g.add(x, g.param(mp.pos_embed));
  return x;
}

// Class stage, final affine and classifier. Returns logits [1, classes].
template <class G>
typename G::Value head(G& g, const typename G::Value& patches,
                       const ModelParams& mp, Mechanism m) {
  auto cls = g.param(mp.cls_token);
  for (const auto& cb : mp.class_blocks) cls = class_block(g, cls, patches, cb, m);
  cls = affine(g, cls, mp.final_norm);
  return g.add_bias(g.matmul(cls, g.param(mp.head_w)), g.param(mp.head_b));
}

template <class G>
typename G::Value forward(G& g, const typename G::Value& img,
                          const ModelParams& mp, const ModelConfig& cfg) {
  const std::size_t rows = cfg.grid(cfg.image_size);
  auto x = stem(g, img, mp);
  for (const auto& bp : mp.blocks) x = block(g, x, bp, rows, rows, cfg.mechanism);
  return head(g, x, mp, cfg.mechanism);
}

}  // namespace xvit::graph
