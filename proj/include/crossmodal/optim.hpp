#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crossmodal/tensor.hpp"

namespace crossmodal {

enum class OptimizerKind { SGD, Adam, AdamW };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  float learning_rate = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;  // consulted by AdamW only
};

// Optimizer with per-parameter moment buffers. The parameter list is fixed
// at construction; buffers are shape-matched to it.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<Tensor> params);

  // Applies one update. Every parameter must carry a gradient.
  void step();
  void zero_grad();

  const OptimizerConfig& config() const { return config_; }
  std::uint64_t step_count() const { return step_count_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  OptimizerConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> first_moment_;
  std::vector<std::vector<float>> second_moment_;
  std::uint64_t step_count_ = 0;
};

}  // namespace crossmodal
