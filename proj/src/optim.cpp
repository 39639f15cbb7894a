#include "crossmodal/optim.hpp"

#include <cmath>

#include "crossmodal/errors.hpp"

namespace crossmodal {

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::SGD: return "SGD";
    case OptimizerKind::Adam: return "Adam";
    case OptimizerKind::AdamW: return "AdamW";
  }
  return "?";
}

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "SGD" || name == "sgd") return OptimizerKind::SGD;
  if (name == "Adam" || name == "adam") return OptimizerKind::Adam;
  if (name == "AdamW" || name == "adamw") return OptimizerKind::AdamW;
  throw ConfigError("unknown optimizer '" + name + "'");
}

Optimizer::Optimizer(OptimizerConfig config, std::vector<Tensor> params)
    : config_(config), params_(std::move(params)) {
  if (!(config_.learning_rate > 0.0f)) {
    throw ConfigError("learning rate must be positive");
  }
  if (config_.weight_decay < 0.0f) {
    throw ConfigError("weight decay must be nonnegative");
  }
  if (config_.kind != OptimizerKind::SGD) {
    for (const auto& p : params_) {
      first_moment_.emplace_back(p.numel(), 0.0f);
      second_moment_.emplace_back(p.numel(), 0.0f);
    }
  }
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Optimizer::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) {
      throw ContractError("optimizer step: parameter " + std::to_string(i) +
                          " " + shape_string(params_[i].shape()) +
                          " has no gradient");
    }
  }
  ++step_count_;
  const double lr = config_.learning_rate;
  if (config_.kind == OptimizerKind::SGD) {
    for (auto& p : params_) {
      auto w = p.mutable_data();
      auto g = p.grad();
      for (std::size_t j = 0; j < w.size(); ++j) {
        w[j] = static_cast<float>(w[j] - lr * g[j]);
      }
    }
    return;
  }

  const double b1 = config_.beta1, b2 = config_.beta2, eps = config_.eps;
  const double t = static_cast<double>(step_count_);
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  const double decay =
      config_.kind == OptimizerKind::AdamW ? lr * config_.weight_decay : 0.0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i].mutable_data();
    auto g = params_[i].grad();
    auto& m = first_moment_[i];
    auto& v = second_moment_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double mhat = mj / c1;
      const double vhat = vj / c2;
      double wj = w[j];
      wj -= decay * wj;
      wj -= lr * mhat / (std::sqrt(vhat) + eps);
      w[j] = static_cast<float>(wj);
    }
  }
}

}  // namespace crossmodal
