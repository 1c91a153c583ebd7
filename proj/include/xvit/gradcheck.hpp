#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xvit/model.hpp"
#include "xvit/train.hpp"

namespace xvit::grad {

struct ParamCheck {
  std::string name;
  std::size_t checked = 0;      // scalars perturbed
  double max_rel_error = 0.0;   // min over the step sweep
  double step = 0.0;            // step achieving max_rel_error
  double analytic_norm = 0.0;   // over the checked scalars
  double numeric_norm = 0.0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  std::string worst_param;
  double tolerance = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  std::vector<double> steps{1e-4, 1e-5, 1e-6};
  // Tensors larger than this are checked on a seeded random subset.
  std::size_t samples_per_tensor = 100;
  std::uint64_t sample_seed = 7;
};

// Error of one tensor at one step:
//   max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, 1e-6)
// over the checked scalars, with n from central differences. The reported
// error is the minimum over the step sweep.
GradCheckReport check_model_gradients(const ModelConfig& cfg, ModelParams mp,
                                      const Tensor& image, int label,
                                      const Gradients& analytic,
                                      double tolerance,
                                      const GradCheckOptions& opts = {});

// f64 nano-style check: init_params(cfg, seed), one quadrant sample drawn
// with the same seed, analytic gradients from grad_model.
GradCheckReport gradcheck(const ModelConfig& cfg, std::uint64_t seed,
                          double tolerance, const GradCheckOptions& opts = {});

std::string report_to_json(const GradCheckReport& report);

}  // namespace xvit::grad
