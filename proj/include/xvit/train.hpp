#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xvit/model.hpp"
#include "xvit/tensor.hpp"

namespace xvit {

// Quadrant task: [1, S, S] images of U(0, 1) noise with one quadrant
// brightened by +0.5. Label = quadrant index (0 top-left, 1 top-right,
// 2 bottom-left, 3 bottom-right).
struct Dataset {
  std::vector<Tensor> images;
  std::vector<int> labels;
  std::size_t size() const { return images.size(); }
};

Dataset make_quadrant_dataset(std::size_t count, std::uint64_t seed,
                              std::size_t image_size = 32,
                              DType dtype = DType::f32);

namespace grad {

// Gradients in ModelParams::visit order.
struct Gradients {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  const Tensor& operator[](std::string_view name) const;
};

struct LossAndGrads {
  double loss = 0.0;
  std::size_t correct = 0;
  Gradients grads;
};

// Mean softmax cross-entropy over the batch and its gradient for every
// parameter, via one tape.
LossAndGrads grad_model(const ModelParams& mp, const ModelConfig& cfg,
                        std::span<const Tensor> images,
                        std::span<const int> labels);

// Same loss through the plain forward path.
double loss_value(const ModelParams& mp, const ModelConfig& cfg,
                  std::span<const Tensor> images, std::span<const int> labels);

double cross_entropy_mean(const Tensor& logits, std::span<const int> labels);

// SGD with heavy-ball momentum: v <- momentum v + g; p <- p - lr v.
class Sgd {
 public:
  Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  void step(std::span<Tensor* const> params, std::span<const Tensor> grads);
  // Parameters whose name contains any of frozen_substrings are skipped.
  void step(ModelParams& mp, const Gradients& grads,
            std::span<const std::string> frozen_substrings = {});

 private:
  double lr_;
  double momentum_;
  std::vector<Tensor> velocity_;
};

}  // namespace grad

struct TrainOptions {
  std::size_t epochs = 12;
  std::size_t batch_size = 32;
  double lr = 0.005;
  double momentum = 0.9;
  std::uint64_t seed = 42;
  std::size_t train_samples = 1024;
  DType dtype = DType::f32;
  // Keep every gamma_q / gamma_c at its initial value.
  bool freeze_gamma = false;
};

// JSON object with the fields above; missing keys keep their defaults,
// unknown keys are a ConfigError.
std::string train_options_to_json(const TrainOptions& opts);
TrainOptions train_options_from_json(const std::string& text);

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean minibatch loss over the epoch
  double accuracy = 0.0;  // running accuracy over the epoch
};

struct TrainResult {
  std::vector<EpochStats> curve;
  double initial_accuracy = 0.0;
  double final_accuracy = 0.0;  // re-evaluated with the final parameters
  ModelParams params;
};

double evaluate_accuracy(const ModelParams& mp, const ModelConfig& cfg,
                         const Dataset& data);

// Minibatch SGD on the quadrant task. Throws DivergedError on a non-finite
// loss.
TrainResult train_toy(const ModelConfig& cfg, const TrainOptions& opts);

// Trailing moving average with the given window (length n - window + 1).
std::vector<double> smooth(std::span<const double> values, std::size_t window);
bool strictly_decreasing(std::span<const double> values);

}  // namespace xvit
