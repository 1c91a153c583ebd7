#include "xvit/train.hpp"

#include <cmath>
#include <numeric>

#include "json.hpp"
#include "xvit/model_graph.hpp"
#include "xvit/ops.hpp"
#include "xvit/tape.hpp"

namespace xvit {

Dataset make_quadrant_dataset(std::size_t count, std::uint64_t seed,
                              std::size_t image_size, DType dtype) {
  if (image_size < 2 || image_size % 2 != 0) {
    throw ConfigError("quadrant images need an even side length");
  }
  Rng rng(seed);
  Dataset ds;
  ds.images.reserve(count);
  ds.labels.reserve(count);
  const std::size_t half = image_size / 2;
  for (std::size_t s = 0; s < count; ++s) {
    const int label = static_cast<int>(rng.below(4));
    std::vector<double> px(image_size * image_size);
    for (auto& v : px) v = rng.uniform(0.0, 1.0);
    const std::size_t r0 = (label / 2) * half, c0 = (label % 2) * half;
    for (std::size_t i = r0; i < r0 + half; ++i) {
      for (std::size_t j = c0; j < c0 + half; ++j) px[i * image_size + j] += 0.5;
    }
    ds.images.push_back(Tensor::from({1, image_size, image_size}, px, dtype));
    ds.labels.push_back(label);
  }
  return ds;
}

namespace grad {

const Tensor& Gradients::operator[](std::string_view name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return tensors[i];
  }
  throw ShapeError("no gradient named '" + std::string(name) + "'");
}

namespace {

std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t k = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j) {
    if (logits.at(row * k + j) > logits.at(row * k + best)) best = j;
  }
  return best;
}

}  // namespace

LossAndGrads grad_model(const ModelParams& mp, const ModelConfig& cfg,
                        std::span<const Tensor> images,
                        std::span<const int> labels) {
  if (images.empty() || images.size() != labels.size()) {
    throw DataError("grad_model: need matching, non-empty images and labels");
  }
  Tape tape;
  std::vector<Var> rows;
  rows.reserve(images.size());
  for (const auto& img : images) {
    rows.push_back(graph::forward(tape, tape.input(img), mp, cfg));
  }
  Var logits = tape.concat_rows(rows);
  Var loss = tape.cross_entropy(logits, labels);

  LossAndGrads out;
  out.loss = tape.value(loss).at(0);
  const Tensor& lv = tape.value(logits);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (argmax_row(lv, i) == static_cast<std::size_t>(labels[i])) ++out.correct;
  }
  tape.backward(loss);
  mp.visit([&](const std::string& name, const Tensor& t) {
    out.grads.names.push_back(name);
    out.grads.tensors.push_back(tape.grad_of(t));
  });
  return out;
}

double cross_entropy_mean(const Tensor& logits, std::span<const int> labels) {
  check_rank(logits, 2, "cross_entropy_mean");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (labels.size() != b) throw ShapeError("cross_entropy_mean: label count");
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double mx = logits.at(i * k);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits.at(i * k + j));
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(logits.at(i * k + j) - mx);
    loss += mx + std::log(s) - logits.at(i * k + labels[i]);
  }
  return loss / static_cast<double>(b);
}

double loss_value(const ModelParams& mp, const ModelConfig& cfg,
                  std::span<const Tensor> images, std::span<const int> labels) {
  std::vector<Tensor> rows;
  rows.reserve(images.size());
  for (const auto& img : images) {
    rows.push_back(model_forward(img, mp, cfg).reshape({1, cfg.num_classes}));
  }
  return cross_entropy_mean(concat_rows(rows), labels);
}

void Sgd::step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size()) {
    throw ShapeError("sgd: " + std::to_string(params.size()) +
                     " parameters but " + std::to_string(grads.size()) +
                     " gradients");
  }
  if (velocity_.empty()) {
    for (const Tensor* p : params) {
      velocity_.push_back(Tensor::zeros(p->shape(), p->dtype()));
    }
  }
  if (velocity_.size() != params.size()) {
    throw ShapeError("sgd: parameter list changed between steps");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    check_same(p, g, "sgd");
    check_same(p, velocity_[i], "sgd");
    dispatch(p.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pd = p.mutable_data<T>();
      auto vd = velocity_[i].mutable_data<T>();
      auto gd = g.data<T>();
      const T mom = static_cast<T>(momentum_), lr = static_cast<T>(lr_);
      for (std::size_t j = 0; j < pd.size(); ++j) {
        vd[j] = mom * vd[j] + gd[j];
        pd[j] -= lr * vd[j];
      }
    });
  }
}

void Sgd::step(ModelParams& mp, const Gradients& grads,
               std::span<const std::string> frozen_substrings) {
  std::vector<Tensor*> ptrs;
  std::vector<Tensor> gs;
  std::size_t i = 0;
  mp.visit([&](const std::string& name, Tensor& t) {
    if (i >= grads.names.size() || grads.names[i] != name) {
      throw ShapeError("sgd: gradient list does not match parameter '" + name +
                       "'");
    }
    bool frozen = false;
    for (const auto& f : frozen_substrings) {
      frozen = frozen || name.find(f) != std::string::npos;
    }
    ptrs.push_back(&t);
    gs.push_back(frozen ? Tensor::zeros(t.shape(), t.dtype())
                        : grads.tensors[i]);
    ++i;
  });
  step(ptrs, gs);
}

}  // namespace grad

std::string train_options_to_json(const TrainOptions& opts) {
  nlohmann::ordered_json j;
  j["epochs"] = opts.epochs;
  j["batch_size"] = opts.batch_size;
  j["lr"] = opts.lr;
  j["momentum"] = opts.momentum;
  j["seed"] = opts.seed;
  j["train_samples"] = opts.train_samples;
  j["dtype"] = std::string(dtype_name(opts.dtype));
  j["freeze_gamma"] = opts.freeze_gamma;
  return j.dump(2);
}

TrainOptions train_options_from_json(const std::string& text) {
  TrainOptions o;
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.is_object()) throw ConfigError("train options must be a JSON object");
    for (const auto& [key, v] : j.items()) {
      if (key == "epochs") o.epochs = v.get<std::size_t>();
      else if (key == "batch_size") o.batch_size = v.get<std::size_t>();
      else if (key == "lr") o.lr = v.get<double>();
      else if (key == "momentum") o.momentum = v.get<double>();
      else if (key == "seed") o.seed = v.get<std::uint64_t>();
      else if (key == "train_samples") o.train_samples = v.get<std::size_t>();
      else if (key == "dtype") o.dtype = parse_dtype(v.get<std::string>());
      else if (key == "freeze_gamma") o.freeze_gamma = v.get<bool>();
      else throw ConfigError("unknown train option '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train options: ") + e.what());
  }
  return o;
}

double evaluate_accuracy(const ModelParams& mp, const ModelConfig& cfg,
                         const Dataset& data) {
  if (data.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Tensor logits = model_forward(data.images[i], mp, cfg);
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.numel(); ++j) {
      if (logits.at(j) > logits.at(best)) best = j;
    }
    if (best == static_cast<std::size_t>(data.labels[i])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainResult train_toy(const ModelConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  if (opts.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  const Dataset data = make_quadrant_dataset(opts.train_samples, opts.seed,
                                             cfg.image_size, opts.dtype);
  TrainResult result;
  result.params = init_params(cfg, opts.seed + 1, opts.dtype);
  result.initial_accuracy = evaluate_accuracy(result.params, cfg, data);

  grad::Sgd sgd(opts.lr, opts.momentum);
  std::vector<std::string> frozen;
  if (opts.freeze_gamma) frozen.push_back("gamma");
  Rng shuffle_rng(opts.seed + 2);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= opts.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    }
    double loss_sum = 0.0;
    std::size_t batches = 0, correct = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      std::vector<Tensor> imgs;
      std::vector<int> labels;
      for (std::size_t j = start; j < end; ++j) {
        imgs.push_back(data.images[order[j]]);
        labels.push_back(data.labels[order[j]]);
      }
      grad::LossAndGrads lg;
      try {
        lg = grad::grad_model(result.params, cfg, imgs, labels);
      } catch (const NumericError& e) {
        // blown-up weights surface as NaN inside the forward pass
        throw DivergedError(static_cast<int>(epoch),
                            std::string("training diverged: ") + e.what());
      }
      if (!std::isfinite(lg.loss)) {
        throw DivergedError(static_cast<int>(epoch),
                            "training diverged: non-finite loss in epoch " +
                                std::to_string(epoch));
      }
      loss_sum += lg.loss;
      correct += lg.correct;
      ++batches;
      sgd.step(result.params, lg.grads, frozen);
    }
    result.curve.push_back({epoch, loss_sum / static_cast<double>(batches),
                            static_cast<double>(correct) /
                                static_cast<double>(order.size())});
  }
  result.final_accuracy = evaluate_accuracy(result.params, cfg, data);
  return result;
}

std::vector<double> smooth(std::span<const double> values, std::size_t window) {
  std::vector<double> out;
  if (window == 0 || values.size() < window) return out;
  for (std::size_t i = 0; i + window <= values.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = i; j < i + window; ++j) s += values[j];
    out.push_back(s / static_cast<double>(window));
  }
  return out;
}

bool strictly_decreasing(std::span<const double> values) {
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (!(values[i] < values[i - 1])) return false;
  }
  return true;
}

}  // namespace xvit
