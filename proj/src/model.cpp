#include "xvit/model.hpp"

#include <cmath>
#include <string>

#include "json.hpp"
#include "xvit/model_graph.hpp"

namespace xvit {

namespace {

bool is_pow2(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

std::size_t log2_exact(std::size_t v) {
  std::size_t l = 0;
  while ((std::size_t{1} << l) < v) ++l;
  return l;
}

}  // namespace

void ModelConfig::validate() const {
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                      " not divisible by heads " + std::to_string(heads));
  }
  if (!is_pow2(patch_stride) || patch_stride < 2) {
    throw ConfigError("patch_stride must be a power of two >= 2, got " +
                      std::to_string(patch_stride));
  }
  if (image_size == 0 || image_size % patch_stride != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) +
                      " not divisible by patch_stride " +
                      std::to_string(patch_stride));
  }
  const std::size_t convs = log2_exact(patch_stride);
  if (embed_dim % (std::size_t{1} << (convs - 1)) != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                      " cannot be halved across " + std::to_string(convs) +
                      " stem convolutions");
  }
  if (depth < 1) throw ConfigError("depth must be >= 1");
  if (in_channels == 0 || mlp_ratio == 0 || num_classes == 0) {
    throw ConfigError("in_channels, mlp_ratio and num_classes must be >= 1");
  }
  if (!(eps > 0.0)) throw ConfigError("eps must be > 0");
}

std::vector<std::size_t> ModelConfig::stem_channels() const {
  const std::size_t convs = log2_exact(patch_stride);
  std::vector<std::size_t> out(convs);
  for (std::size_t i = 0; i < convs; ++i) {
    out[i] = embed_dim >> (convs - 1 - i);
  }
  return out;
}

ModelConfig named_config(std::string_view name) {
  ModelConfig cfg;
  if (name == "nano") return cfg;
  if (name == "micro") {
    cfg.embed_dim = 128;
    cfg.depth = 6;
    return cfg;
  }
  throw ConfigError("unknown config '" + std::string(name) + "'");
}

std::vector<std::string> config_names() { return {"nano", "micro"}; }

std::string config_to_json(const ModelConfig& cfg) {
  nlohmann::ordered_json j;
  j["image_size"] = cfg.image_size;
  j["in_channels"] = cfg.in_channels;
  j["embed_dim"] = cfg.embed_dim;
  j["heads"] = cfg.heads;
  j["depth"] = cfg.depth;
  j["class_depth"] = cfg.class_depth;
  j["mlp_ratio"] = cfg.mlp_ratio;
  j["num_classes"] = cfg.num_classes;
  j["patch_stride"] = cfg.patch_stride;
  j["pos_embed"] = cfg.pos_embed;
  j["eps"] = cfg.eps;
  j["mechanism"] = std::string(mechanism_name(cfg.mechanism));
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  ModelConfig cfg;
  try {
    auto j = nlohmann::json::parse(text);
    cfg.image_size = j.at("image_size").get<std::size_t>();
    cfg.in_channels = j.at("in_channels").get<std::size_t>();
    cfg.embed_dim = j.at("embed_dim").get<std::size_t>();
    cfg.heads = j.at("heads").get<std::size_t>();
    cfg.depth = j.at("depth").get<std::size_t>();
    cfg.class_depth = j.at("class_depth").get<std::size_t>();
    cfg.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    cfg.num_classes = j.at("num_classes").get<std::size_t>();
    cfg.patch_stride = j.at("patch_stride").get<std::size_t>();
    cfg.pos_embed = j.at("pos_embed").get<bool>();
    cfg.eps = j.at("eps").get<double>();
    cfg.mechanism = parse_mechanism(j.at("mechanism").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::uint64_t ModelParams::total_scalars() const {
  std::uint64_t n = 0;
  visit([&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

namespace {

Affine init_affine(std::size_t c, DType dt) {
  return {Tensor::full({c}, 1.0, dt), Tensor::zeros({c}, dt)};
}

Mlp init_mlp(std::size_t c, std::size_t hidden, Rng& rng, DType dt) {
  const double b1 = 1.0 / std::sqrt(static_cast<double>(c));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  Mlp m;
  m.w1 = uniform({c, hidden}, -b1, b1, rng, dt);
  m.b1 = Tensor::zeros({hidden}, dt);
  m.w2 = uniform({hidden, c}, -b2, b2, rng, dt);
  m.b2 = Tensor::zeros({c}, dt);
  return m;
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed,
                        DType dtype) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t c = cfg.embed_dim;
  ModelParams mp;
  std::size_t cin = cfg.in_channels;
  for (std::size_t cout : cfg.stem_channels()) {
    // He-uniform: without normalization layers the tokens would otherwise
    // shrink through the stem, and XNorm of tiny queries is ill-conditioned.
    const double bound = std::sqrt(6.0 / static_cast<double>(cin * 9));
    mp.stem.push_back({uniform({cout, cin, 3, 3}, -bound, bound, rng, dtype),
                       Tensor::zeros({cout}, dtype)});
    cin = cout;
  }
  if (cfg.pos_embed) {
    mp.pos_embed = uniform({cfg.tokens(), c}, -0.02, 0.02, rng, dtype);
  }
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    BlockParams bp;
    bp.pre_attn = init_affine(c, dtype);
    bp.attn = AttentionParams::init(c, cfg.heads, rng, dtype, cfg.eps);
    bp.pre_lpi = init_affine(c, dtype);
    bp.lpi.w1 = uniform({c, 3, 3}, -1.0 / 3, 1.0 / 3, rng, dtype);
    bp.lpi.b1 = Tensor::zeros({c}, dtype);
    bp.lpi.w2 = uniform({c, 3, 3}, -1.0 / 3, 1.0 / 3, rng, dtype);
    bp.lpi.b2 = Tensor::zeros({c}, dtype);
    bp.pre_mlp = init_affine(c, dtype);
    bp.mlp = init_mlp(c, cfg.hidden_dim(), rng, dtype);
    mp.blocks.push_back(std::move(bp));
  }
  mp.cls_token = uniform({1, c}, -0.02, 0.02, rng, dtype);
  for (std::size_t i = 0; i < cfg.class_depth; ++i) {
    ClassBlockParams cb;
    cb.pre_attn = init_affine(c, dtype);
    cb.attn = AttentionParams::init(c, cfg.heads, rng, dtype, cfg.eps);
    cb.pre_mlp = init_affine(c, dtype);
    cb.mlp = init_mlp(c, cfg.hidden_dim(), rng, dtype);
    mp.class_blocks.push_back(std::move(cb));
  }
  mp.final_norm = init_affine(c, dtype);
  const double hb = 1.0 / std::sqrt(static_cast<double>(c));
  mp.head_w = uniform({c, cfg.num_classes}, -hb, hb, rng, dtype);
  mp.head_b = Tensor::zeros({cfg.num_classes}, dtype);
  return mp;
}

namespace {

// Expected shape of every parameter, in visit order.
std::vector<std::pair<std::string, Shape>> expected_shapes(
    const ModelConfig& cfg) {
  std::vector<std::pair<std::string, Shape>> out;
  const std::size_t c = cfg.embed_dim, h = cfg.hidden_dim();
  std::size_t cin = cfg.in_channels;
  auto chans = cfg.stem_channels();
  for (std::size_t i = 0; i < chans.size(); ++i) {
    const std::string p = "stem." + std::to_string(i);
    out.push_back({p + ".w", {chans[i], cin, 3, 3}});
    out.push_back({p + ".b", {chans[i]}});
    cin = chans[i];
  }
  if (cfg.pos_embed) out.push_back({"pos_embed", {cfg.tokens(), c}});
  auto affine = [&](const std::string& p) {
    out.push_back({p + ".scale", {c}});
    out.push_back({p + ".shift", {c}});
  };
  auto attn = [&](const std::string& p) {
    for (const char* w : {".w_q", ".w_k", ".w_v", ".w_o"}) {
      out.push_back({p + w, {c, c}});
    }
    out.push_back({p + ".gamma_q", {cfg.heads}});
    out.push_back({p + ".gamma_c", {cfg.heads}});
  };
  auto mlp = [&](const std::string& p) {
    out.push_back({p + ".w1", {c, h}});
    out.push_back({p + ".b1", {h}});
    out.push_back({p + ".w2", {h, c}});
    out.push_back({p + ".b2", {c}});
  };
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string p = "blocks." + std::to_string(i);
    affine(p + ".pre_attn");
    attn(p + ".attn");
    affine(p + ".pre_lpi");
    out.push_back({p + ".lpi.w1", {c, 3, 3}});
    out.push_back({p + ".lpi.b1", {c}});
    out.push_back({p + ".lpi.w2", {c, 3, 3}});
    out.push_back({p + ".lpi.b2", {c}});
    affine(p + ".pre_mlp");
    mlp(p + ".mlp");
  }
  out.push_back({"cls_token", {1, c}});
  for (std::size_t i = 0; i < cfg.class_depth; ++i) {
    const std::string p = "class_blocks." + std::to_string(i);
    affine(p + ".pre_attn");
    attn(p + ".attn");
    affine(p + ".pre_mlp");
    mlp(p + ".mlp");
  }
  affine("final_norm");
  out.push_back({"head.w", {c, cfg.num_classes}});
  out.push_back({"head.b", {cfg.num_classes}});
  return out;
}

}  // namespace

void check_params(const ModelParams& mp, const ModelConfig& cfg) {
  cfg.validate();
  auto expected = expected_shapes(cfg);
  std::size_t i = 0;
  const DType dt = mp.dtype();
  mp.visit([&](const std::string& name, const Tensor& t) {
    if (i >= expected.size()) {
      throw ShapeError("unexpected parameter '" + name + "'");
    }
    const auto& [ename, eshape] = expected[i++];
    if (name != ename) {
      throw ShapeError("parameter '" + name + "' where '" + ename +
                       "' was expected");
    }
    if (t.empty() || t.shape() != eshape) {
      throw ShapeError("parameter '" + name + "' has shape " +
                       (t.empty() ? std::string("[]") : shape_str(t.shape())) +
                       ", config needs " + shape_str(eshape));
    }
    if (t.dtype() != dt) {
      throw ShapeError("parameter '" + name + "' has a different element type");
    }
  });
  if (i != expected.size()) {
    throw ShapeError("parameter '" + expected[i].first + "' is missing");
  }
  for (const auto& b : mp.blocks) {
    if (b.attn.heads != cfg.heads) throw ShapeError("block heads differ from config");
  }
}

Tensor stem_forward(const Tensor& img, const ModelParams& mp,
                    const ModelConfig& cfg) {
  check_rank(img, 3, "stem_forward");
  if (img.dim(0) != cfg.in_channels || img.dim(1) % cfg.patch_stride != 0 ||
      img.dim(2) % cfg.patch_stride != 0) {
    throw ShapeError("stem_forward: image " + shape_str(img.shape()) +
                     " incompatible with " + std::to_string(cfg.in_channels) +
                     " channels and patch stride " +
                     std::to_string(cfg.patch_stride));
  }
  graph::Eval g;
  return graph::stem(g, img, mp);
}

Tensor block_forward(const Tensor& x, const BlockParams& bp, std::size_t rows,
                     std::size_t cols, Mechanism m) {
  check_rank(x, 2, "block_forward");
  if (rows * cols != x.dim(0)) {
    throw ShapeError("block_forward: grid " + std::to_string(rows) + "x" +
                     std::to_string(cols) + " does not hold " +
                     std::to_string(x.dim(0)) + " tokens");
  }
  graph::Eval g;
  return graph::block(g, x, bp, rows, cols, m);
}

Tensor class_block_forward(const Tensor& x_all, const ClassBlockParams& cb,
                           Mechanism m) {
  check_rank(x_all, 2, "class_block_forward");
  graph::Eval g;
  const std::size_t n = x_all.dim(0);
  Tensor cls = slice_rows(x_all, 0, 1);
  if (n == 1) {
    // No patches: the class token is the whole key set.
    auto normed = graph::affine(g, cls, cb.pre_attn);
    Tensor out = add(cls, attention(m, normed, normed, cb.attn).out);
    return add(out, graph::mlp(g, graph::affine(g, out, cb.pre_mlp), cb.mlp));
  }
  Tensor patches = slice_rows(x_all, 1, n - 1);
  Tensor next = graph::class_block(g, cls, patches, cb, m);
  const Tensor parts[] = {next, patches};
  return concat_rows(parts);
}

Tensor class_stage_forward(const Tensor& tokens, const ModelParams& mp,
                           const ModelConfig& cfg) {
  const Tensor parts[] = {mp.cls_token, tokens};
  Tensor x = concat_rows(parts);
  for (const auto& cb : mp.class_blocks) {
    x = class_block_forward(x, cb, cfg.mechanism);
  }
  return x;
}

Tensor model_forward(const Tensor& img, const ModelParams& mp,
                     const ModelConfig& cfg) {
  cfg.validate();
  check_rank(img, 3, "model_forward");
  const Shape want{cfg.in_channels, cfg.image_size, cfg.image_size};
  if (img.shape() != want) {
    throw ShapeError("model_forward: image " + shape_str(img.shape()) +
                     " does not match config " + shape_str(want));
  }
  graph::Eval g;
  Tensor logits = graph::forward(g, img, mp, cfg);
  return logits.reshape({cfg.num_classes});
}

std::uint64_t count_params(const ModelConfig& cfg) {
  cfg.validate();
  const std::uint64_t c = cfg.embed_dim, h = cfg.hidden_dim();
  const std::uint64_t heads = cfg.heads;
  std::uint64_t total = 0;
  std::uint64_t cin = cfg.in_channels;
  for (std::uint64_t cout : cfg.stem_channels()) {
    total += cout * cin * 9 + cout;
    cin = cout;
  }
  if (cfg.pos_embed) total += cfg.tokens() * c;
  const std::uint64_t attn = 4 * c * c + 2 * heads;
  const std::uint64_t mlp = c * h + h + h * c + c;
  const std::uint64_t lpi = 2 * (9 * c + c);
  const std::uint64_t block = 3 * 2 * c + attn + lpi + mlp;
  const std::uint64_t class_block = 2 * 2 * c + attn + mlp;
  total += cfg.depth * block;
  total += c;  // class token
  total += cfg.class_depth * class_block;
  total += 2 * c;  // final affine
  total += c * cfg.num_classes + cfg.num_classes;
  return total;
}

std::uint64_t attention_macs(Mechanism m, std::size_t nq, std::size_t nk,
                             std::size_t dim, std::size_t heads) {
  const std::uint64_t c = dim, q = nq, k = nk, hn = heads;
  const std::uint64_t d = c / hn;
  std::uint64_t macs = q * c * c + 2 * k * c * c + q * c * c;
  if (m == Mechanism::xnorm) {
    macs += hn * (k * d * d + q * d * d + q * d + d * d);
  } else {
    macs += hn * (2 * q * k * d);
  }
  return macs;
}

std::uint64_t attention_flops(Mechanism m, std::size_t nq, std::size_t nk,
                              std::size_t dim, std::size_t heads) {
  return 2 * attention_macs(m, nq, nk, dim, heads);
}

FlopBreakdown flop_breakdown(const ModelConfig& cfg, std::size_t image_size,
                             Mechanism m) {
  cfg.validate();
  if (image_size == 0 || image_size % cfg.patch_stride != 0) {
    throw ConfigError("image size " + std::to_string(image_size) +
                      " not divisible by patch_stride " +
                      std::to_string(cfg.patch_stride));
  }
  const std::uint64_t c = cfg.embed_dim, h = cfg.hidden_dim();
  FlopBreakdown f;
  std::uint64_t cin = cfg.in_channels;
  std::uint64_t side = image_size;
  for (std::uint64_t cout : cfg.stem_channels()) {
    side /= 2;
    f.stem += 2 * cout * side * side * cin * 9;
    cin = cout;
  }
  const std::size_t n = static_cast<std::size_t>(side * side);
  f.attention = cfg.depth * attention_flops(m, n, n, cfg.embed_dim, cfg.heads);
  f.attention += cfg.class_depth *
                 attention_flops(m, 1, n + 1, cfg.embed_dim, cfg.heads);
  f.lpi = cfg.depth * 2 * (2 * c * n * 9);
  f.mlp = cfg.depth * 2 * (2 * n * c * h) + cfg.class_depth * 2 * (2 * c * h);
  f.head = 2 * c * cfg.num_classes;
  f.total = f.stem + f.attention + f.lpi + f.mlp + f.head;
  return f;
}

std::uint64_t count_flops(const ModelConfig& cfg, std::size_t image_size) {
  return flop_breakdown(cfg, image_size, cfg.mechanism).total;
}

}  // namespace xvit
