#include "xvit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "xvit/model_graph.hpp"
#include "xvit/ops.hpp"

namespace xvit::grad {

namespace {

// Stage 0 is the stem, stage j in [1, depth] is block j-1, stage depth+1 is
// the class stage plus classifier.
std::size_t stage_of(const std::string& name, std::size_t depth) {
  if (name.rfind("stem.", 0) == 0 || name == "pos_embed") return 0;
  if (name.rfind("blocks.", 0) == 0) {
    return std::stoul(name.substr(7, name.find('.', 7) - 7)) + 1;
  }
  return depth + 1;
}

// Loss evaluator that caches every stage input of the unperturbed model so a
// perturbed parameter only re-runs the stages after it.
class StagedLoss {
 public:
  StagedLoss(const ModelConfig& cfg, const ModelParams& mp, Tensor image,
             int label)
      : cfg_(cfg), mp_(mp), image_(std::move(image)), label_(label) {
    graph::Eval g;
    inputs_.resize(cfg.depth + 2);
    inputs_[1] = graph::stem(g, image_, mp_);
    for (std::size_t j = 1; j <= cfg.depth; ++j) {
      inputs_[j + 1] = run_block(j, inputs_[j]);
    }
  }

  double from(std::size_t stage) const {
    graph::Eval g;
    Tensor x = stage == 0 ? graph::stem(g, image_, mp_) : inputs_[stage];
    for (std::size_t j = std::max<std::size_t>(stage, 1); j <= cfg_.depth; ++j) {
      x = run_block(j, x);
    }
    Tensor logits = graph::head(g, x, mp_, cfg_.mechanism);
    const int labels[] = {label_};
    return cross_entropy_mean(logits, labels);
  }

 private:
  Tensor run_block(std::size_t j, const Tensor& x) const {
    graph::Eval g;
    const std::size_t rows = cfg_.grid(cfg_.image_size);
    return graph::block(g, x, mp_.blocks[j - 1], rows, rows, cfg_.mechanism);
  }

  const ModelConfig& cfg_;
  const ModelParams& mp_;
  Tensor image_;
  int label_;
  std::vector<Tensor> inputs_;
};

}  // namespace

GradCheckReport check_model_gradients(const ModelConfig& cfg, ModelParams mp,
                                      const Tensor& image, int label,
                                      const Gradients& analytic,
                                      double tolerance,
                                      const GradCheckOptions& opts) {
  if (mp.dtype() != DType::f64) {
    throw ConfigError("gradcheck needs f64 parameters");
  }
  if (opts.steps.empty()) throw ConfigError("gradcheck needs at least one step");
  std::vector<std::pair<std::string, Tensor*>> params;
  mp.visit([&](const std::string& name, Tensor& t) { params.emplace_back(name, &t); });
  if (params.size() != analytic.tensors.size()) {
    throw ShapeError("gradcheck: " + std::to_string(analytic.tensors.size()) +
                     " gradients for " + std::to_string(params.size()) +
                     " parameters");
  }
  const StagedLoss loss(cfg, mp, image, label);
  Rng pick(opts.sample_seed);

  GradCheckReport report;
  report.tolerance = tolerance;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& [name, tensor] = params[p];
    const Tensor& a = analytic.tensors[p];
    check_same(*tensor, a, "gradcheck");
    std::vector<std::size_t> idx(tensor->numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (idx.size() > opts.samples_per_tensor) {
      for (std::size_t i = 0; i < opts.samples_per_tensor; ++i) {
        std::swap(idx[i], idx[i + pick.below(idx.size() - i)]);
      }
      idx.resize(opts.samples_per_tensor);
      std::sort(idx.begin(), idx.end());
    }
    const std::size_t stage = stage_of(name, cfg.depth);

    ParamCheck pc;
    pc.name = name;
    pc.checked = idx.size();
    pc.max_rel_error = INFINITY;
    for (double h : opts.steps) {
      double amax = 0.0, nmax = 0.0, dmax = 0.0, an2 = 0.0, nn2 = 0.0;
      for (std::size_t i : idx) {
        const double orig = tensor->at(i);
        tensor->set(i, orig + h);
        const double lp = loss.from(stage);
        tensor->set(i, orig - h);
        const double lm = loss.from(stage);
        tensor->set(i, orig);
        const double num = (lp - lm) / (2.0 * h);
        const double ana = a.at(i);
        amax = std::max(amax, std::abs(ana));
        nmax = std::max(nmax, std::abs(num));
        dmax = std::max(dmax, std::abs(ana - num));
        an2 += ana * ana;
        nn2 += num * num;
      }
      const double err = dmax / std::max({amax, nmax, 1e-6});
      if (err < pc.max_rel_error) {
        pc.max_rel_error = err;
        pc.step = h;
        pc.analytic_norm = std::sqrt(an2);
        pc.numeric_norm = std::sqrt(nn2);
      }
    }
    if (report.worst_param.empty() || pc.max_rel_error > report.max_rel_error) {
      report.max_rel_error = pc.max_rel_error;
      report.worst_param = name;
    }
    report.params.push_back(std::move(pc));
  }
  report.passed = report.max_rel_error <= tolerance;
  return report;
}

GradCheckReport gradcheck(const ModelConfig& cfg, std::uint64_t seed,
                          double tolerance, const GradCheckOptions& opts) {
  if (cfg.in_channels != 1) {
    throw ConfigError("gradcheck draws single-channel quadrant samples");
  }
  const ModelParams mp = init_params(cfg, seed, DType::f64);
  const Dataset sample =
      make_quadrant_dataset(1, seed, cfg.image_size, DType::f64);
  const LossAndGrads lg = grad_model(mp, cfg, sample.images, sample.labels);
  return check_model_gradients(cfg, mp, sample.images[0], sample.labels[0],
                               lg.grads, tolerance, opts);
}

std::string report_to_json(const GradCheckReport& report) {
  nlohmann::ordered_json j;
  j["passed"] = report.passed;
  j["tolerance"] = report.tolerance;
  j["max_rel_error"] = report.max_rel_error;
  j["worst_param"] = report.worst_param;
  auto& arr = j["params"] = nlohmann::ordered_json::array();
  for (const auto& p : report.params) {
    nlohmann::ordered_json e;
    e["name"] = p.name;
    e["checked"] = p.checked;
    e["max_rel_error"] = p.max_rel_error;
    e["step"] = p.step;
    e["analytic_norm"] = p.analytic_norm;
    e["numeric_norm"] = p.numeric_norm;
    arr.push_back(std::move(e));
  }
  return j.dump(2);
}

}  // namespace xvit::grad
