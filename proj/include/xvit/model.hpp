#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "xvit/attention.hpp"
#include "xvit/tensor.hpp"

namespace xvit {

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t in_channels = 1;
  std::size_t embed_dim = 64;
  std::size_t heads = 4;
  std::size_t depth = 4;
  std::size_t class_depth = 2;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 4;
  std::size_t patch_stride = 8;
  bool pos_embed = true;
  double eps = kDefaultEps;
  Mechanism mechanism = Mechanism::xnorm;

  void validate() const;
  std::size_t grid(std::size_t image) const { return image / patch_stride; }
  std::size_t tokens() const { return grid(image_size) * grid(image_size); }
  std::size_t hidden_dim() const { return embed_dim * mlp_ratio; }
  // Output channels of each stride-2 stem convolution; the last is
  // embed_dim and each earlier one is half the next.
  std::vector<std::size_t> stem_channels() const;

  bool operator==(const ModelConfig&) const = default;
};

// "nano" (C=64, 4 heads, depth 4) and "micro" (C=128, 4 heads, depth 6),
// both sized for 1x32x32 inputs and 4 classes.
ModelConfig named_config(std::string_view name);
std::vector<std::string> config_names();

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

struct Affine {
  Tensor scale;  // [C], init 1
  Tensor shift;  // [C], init 0
};

struct Mlp {
  Tensor w1, b1;  // [C, H], [H]
  Tensor w2, b2;  // [H, C], [C]
};

// Local patch interaction: depthwise 3x3 -> GELU -> depthwise 3x3.
struct Lpi {
  Tensor w1, b1;  // [C, 3, 3], [C]
  Tensor w2, b2;
};

struct ConvParams {
  Tensor w;  // [Cout, Cin, 3, 3]
  Tensor b;  // [Cout]
};

struct BlockParams {
  Affine pre_attn, pre_lpi, pre_mlp;
  AttentionParams attn;
  Lpi lpi;
  Mlp mlp;
};

// Class-attention blocks update the class token only, so they carry no LPI.
struct ClassBlockParams {
  Affine pre_attn, pre_mlp;
  AttentionParams attn;
  Mlp mlp;
};

struct ModelParams {
  std::vector<ConvParams> stem;
  Tensor pos_embed;  // [N, C] or empty when disabled
  std::vector<BlockParams> blocks;
  Tensor cls_token;  // [1, C]
  std::vector<ClassBlockParams> class_blocks;
  Affine final_norm;
  Tensor head_w;  // [C, num_classes]
  Tensor head_b;  // [num_classes]

  // Calls f(name, tensor) for every parameter tensor in a fixed order.
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::uint64_t total_scalars() const;
  DType dtype() const { return head_w.dtype(); }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f);
};

template <class Self, class F>
void ModelParams::visit_impl(Self& self, F& f) {
  auto affine = [&](const std::string& p, auto& a) {
    f(p + ".scale", a.scale);
    f(p + ".shift", a.shift);
  };
  auto attn = [&](const std::string& p, auto& a) {
    f(p + ".w_q", a.w_q);
    f(p + ".w_k", a.w_k);
    f(p + ".w_v", a.w_v);
    f(p + ".w_o", a.w_o);
    f(p + ".gamma_q", a.gamma_q);
    f(p + ".gamma_c", a.gamma_c);
  };
  auto mlp = [&](const std::string& p, auto& m) {
    f(p + ".w1", m.w1);
    f(p + ".b1", m.b1);
    f(p + ".w2", m.w2);
    f(p + ".b2", m.b2);
  };
  for (std::size_t i = 0; i < self.stem.size(); ++i) {
    const std::string p = "stem." + std::to_string(i);
    f(p + ".w", self.stem[i].w);
    f(p + ".b", self.stem[i].b);
  }
  if (!self.pos_embed.empty()) f(std::string("pos_embed"), self.pos_embed);
  for (std::size_t i = 0; i < self.blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i);
    auto& b = self.blocks[i];
    affine(p + ".pre_attn", b.pre_attn);
    attn(p + ".attn", b.attn);
    affine(p + ".pre_lpi", b.pre_lpi);
    f(p + ".lpi.w1", b.lpi.w1);
    f(p + ".lpi.b1", b.lpi.b1);
    f(p + ".lpi.w2", b.lpi.w2);
    f(p + ".lpi.b2", b.lpi.b2);
    affine(p + ".pre_mlp", b.pre_mlp);
    mlp(p + ".mlp", b.mlp);
  }
  f(std::string("cls_token"), self.cls_token);
  for (std::size_t i = 0; i < self.class_blocks.size(); ++i) {
    const std::string p = "class_blocks." + std::to_string(i);
    auto& b = self.class_blocks[i];
    affine(p + ".pre_attn", b.pre_attn);
    attn(p + ".attn", b.attn);
    affine(p + ".pre_mlp", b.pre_mlp);
    mlp(p + ".mlp", b.mlp);
  }
  affine("final_norm", self.final_norm);
  f(std::string("head.w"), self.head_w);
  f(std::string("head.b"), self.head_b);
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed,
                        DType dtype = DType::f64);

// Fills in the non-tensor attention fields (heads, eps) from cfg and checks
// every tensor shape against cfg. Throws ShapeError naming the tensor.
void check_params(const ModelParams& mp, const ModelConfig& cfg);

// img: [Cin, H, W] -> tokens [N, C] (position embedding added if present).
Tensor stem_forward(const Tensor& img, const ModelParams& mp,
                    const ModelConfig& cfg);

// One encoder block over tokens laid out on a rows x cols grid.
Tensor block_forward(const Tensor& x, const BlockParams& bp, std::size_t rows,
                     std::size_t cols, Mechanism m = Mechanism::xnorm);

// x_all = [cls; patches] -> [cls'; patches] with the patch rows untouched.
Tensor class_block_forward(const Tensor& x_all, const ClassBlockParams& cb,
                           Mechanism m = Mechanism::xnorm);

// Appends the class token to tokens and runs every class block; returns
// [cls; patches].
Tensor class_stage_forward(const Tensor& tokens, const ModelParams& mp,
                           const ModelConfig& cfg);

// Logits, shape [num_classes].
Tensor model_forward(const Tensor& img, const ModelParams& mp,
                     const ModelConfig& cfg);

std::uint64_t count_params(const ModelConfig& cfg);

// Multiply-accumulates of one attention layer with nq queries and nk
// keys/values: Q/K/V/O projections plus, per head of width d,
//   xnorm:   nk d^2 (K^T V) + nq d^2 (mix) + nq d + d^2 (norm sums)
//   softmax: 2 nq nk d (Q K^T and probs V)
std::uint64_t attention_macs(Mechanism m, std::size_t nq, std::size_t nk,
                             std::size_t dim, std::size_t heads);
// FLOPs = 2 x multiply-accumulates.
std::uint64_t attention_flops(Mechanism m, std::size_t nq, std::size_t nk,
                              std::size_t dim, std::size_t heads);

struct FlopBreakdown {
  std::uint64_t stem = 0;
  std::uint64_t attention = 0;  // encoder and class attention layers
  std::uint64_t lpi = 0;
  std::uint64_t mlp = 0;
  std::uint64_t head = 0;
  std::uint64_t total = 0;
};

// Closed-form FLOPs of model_forward at the given input resolution, counting
// the same contractions the kernels count (affine, GELU, softmax and
// elementwise adds are not counted).
FlopBreakdown flop_breakdown(const ModelConfig& cfg, std::size_t image_size,
                             Mechanism m);
std::uint64_t count_flops(const ModelConfig& cfg, std::size_t image_size);

}  // namespace xvit
