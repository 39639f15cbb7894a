#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "crossmodal/optim.hpp"
#include "crossmodal/otdd.hpp"
#include "crossmodal/pde.hpp"
#include "crossmodal/proxy.hpp"
#include "crossmodal/tensor.hpp"
#include "crossmodal/transformer.hpp"
#include "json.hpp"

namespace crossmodal {

enum class AdaptationMethod { FPT, ORCA };
enum class BidirMethod { None, ParallelFlipping, SequenceDoubling };

std::string to_string(AdaptationMethod method);
std::string to_string(BidirMethod method);
AdaptationMethod adaptation_method_from_string(const std::string& name);
BidirMethod bidir_method_from_string(const std::string& name);

// Per-token affine map [L x in] -> [L x out], weights U(-1/sqrt(in), 1/sqrt(in)).
class TokenLinear {
 public:
  TokenLinear() = default;
  TokenLinear(std::size_t in, std::size_t out, std::uint64_t seed);

  Tensor operator()(const Tensor& x) const;
  std::size_t in_features() const { return weight_.dim(0); }
  std::size_t out_features() const { return weight_.dim(1); }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  TokenLinear clone() const;

 private:
  Tensor weight_;  // [in x out]
  Tensor bias_;    // [out]
};

// PDE frame values -> model width. Positions are added by the model.
struct Embedder : TokenLinear {
  using TokenLinear::TokenLinear;
  explicit Embedder(TokenLinear t) : TokenLinear(std::move(t)) {}
};

// Last hidden layer -> predicted frame values.
struct Predictor : TokenLinear {
  using TokenLinear::TokenLinear;
  explicit Predictor(TokenLinear t) : TokenLinear(std::move(t)) {}
};

// A model with its task-specific embedder and predictor.
struct Pipeline {
  TransformerModel model;
  Embedder embedder;
  Predictor predictor;

  // Embedder and predictor as named parameters (roles Embedder/Predictor).
  std::vector<NamedParameter> task_parameters() const;
  Pipeline clone() const;
};

// Fresh embedder (c_in -> d_model) and predictor (d_model -> c_out) around
// `model`, seeded from `seed`.
Pipeline make_pipeline(TransformerModel model, std::size_t c_in,
                       std::size_t c_out, std::uint64_t seed);

void save_pipeline(const std::filesystem::path& path, const Pipeline& pipeline);
Pipeline load_pipeline(const std::filesystem::path& path);

struct AdaptationConfig {
  AdaptationMethod method = AdaptationMethod::ORCA;
  BidirMethod bidir_method = BidirMethod::None;
  // Unset: the dataset family's optimizer and its default learning rate.
  std::optional<OptimizerKind> optimizer;
  std::optional<float> learning_rate;
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  // Batch size used instead of batch_size under SequenceDoubling.
  std::optional<std::size_t> doubling_batch_size;
  // Sequence Doubling positions restart at 0 for the second copy.
  bool restart_positions = false;

  std::size_t stage1_steps = 100;
  std::size_t stage1_target_tokens = 64;  // target tokens per OTDD minibatch
  std::size_t stage1_proxy_tokens = 64;   // proxy features per OTDD minibatch
  OptimizerConfig stage1_optimizer{OptimizerKind::Adam, 1e-2f};
  // Compare the frozen body's last hidden layer instead of raw embeddings.
  bool stage1_through_body = false;
  std::size_t pseudo_label_bins = 10;
  SinkhornParams sinkhorn;

  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const AdaptationConfig& c);
void from_json(const nlohmann::json& j, AdaptationConfig& c);

// Advection -> Adam, diffusion-reaction -> SGD, diffusion-sorption and
// Burgers -> AdamW.
OptimizerKind family_optimizer(PdeFamily family);
float default_learning_rate(OptimizerKind kind);
OptimizerConfig resolve_optimizer(const AdaptationConfig& config, PdeFamily family);

// Equal-mass quantization of target values. Boundaries are order statistics
// of the training targets, so labels depend only on ranks.
struct PseudoLabeler {
  std::vector<float> boundaries;  // ascending, at most K-1 distinct values
  std::size_t bin_count = 0;
  bool degenerate = false;  // all training targets equal

  int operator()(float value) const;
};

PseudoLabeler fit_pseudo_labels(const std::vector<PdeInstance>& train,
                                std::size_t bins = 10);

// Per-instance, per-token bin of the target values.
std::vector<std::vector<int>> pseudo_label_targets(
    const std::vector<PdeInstance>& instances, const PseudoLabeler& labeler);

// [L x 1] views of an instance's frames.
Tensor instance_input(const PdeInstance& instance);
Tensor instance_target(const PdeInstance& instance);

// None: embed, run the model with its native mask, predict per position.
// SequenceDoubling: see sequence_doubling_forward. ParallelFlipping needs two
// pipelines and is rejected here with a ContractError (see predict_flip_pair).
struct PredictOptions {
  BidirMethod bidir_method = BidirMethod::None;
  bool restart_positions = false;
};

Tensor predict_sequence(const Pipeline& pipeline, const Tensor& input,
                        const PredictOptions& options = {});

struct Stage1Report {
  std::vector<float> trace;  // minibatch OTDD per step
  double initial_distance = 0.0;  // fixed evaluation minibatch, before
  double final_distance = 0.0;    // same minibatch, after
  std::size_t degenerate_class_events = 0;
};

// Trains only the embedder to minimise OTDD between embedded target tokens
// (labelled by pseudo-label bin) and proxy features (labelled by tag).
Stage1Report orca_stage1(Pipeline& pipeline, const ProxyEmbeddingSet& proxy,
                         const std::vector<PdeInstance>& train,
                         const AdaptationConfig& config);

struct TrainReport {
  std::vector<float> epoch_losses;  // mean minibatch MSE per epoch
  double initial_test_nrmse = 0.0;
  double test_nrmse = 0.0;
  double train_nrmse = 0.0;
  std::size_t steps = 0;
  OptimizerKind optimizer = OptimizerKind::Adam;
  float learning_rate = 0.0f;
  std::size_t batch_size = 0;
  bool diverged = false;
  std::string diagnostic;
};

void to_json(nlohmann::json& j, const TrainReport& r);

// Mean per-instance nRMSE of predict_sequence over `instances`.
double evaluate_nrmse(const Pipeline& pipeline,
                      const std::vector<PdeInstance>& instances,
                      const PredictOptions& options = {});

// MSE fine-tuning of the parameters trainable under `policy`. Stops early and
// reports `diverged` when a minibatch loss is not finite.
TrainReport finetune(Pipeline& pipeline, const PdeDataset& dataset,
                     FreezePolicy policy, const AdaptationConfig& config);

// Policy used for fine-tuning: FPT keeps the body frozen, ORCA stage 2
// trains everything.
FreezePolicy finetune_policy(AdaptationMethod method);

}  // namespace crossmodal
