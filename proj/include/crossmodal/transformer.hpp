#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "crossmodal/tensor.hpp"
#include "json.hpp"

namespace crossmodal {

enum class Architecture { EncoderOnly, DecoderOnly };

std::string to_string(Architecture arch);
Architecture architecture_from_string(const std::string& name);

enum class MaskKind { Bidirectional, Causal };

struct AttentionMaskPolicy {
  MaskKind kind = MaskKind::Bidirectional;

  static AttentionMaskPolicy bidirectional() { return {MaskKind::Bidirectional}; }
  static AttentionMaskPolicy causal() { return {MaskKind::Causal}; }
  // The mask a model was pretrained with: encoders attend both ways.
  static AttentionMaskPolicy native(Architecture arch) {
    return arch == Architecture::DecoderOnly ? causal() : bidirectional();
  }
};

struct ModelConfig {
  Architecture arch = Architecture::DecoderOnly;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ff = 256;
  std::size_t max_positions = 256;
  std::size_t vocab_size = 64;
  std::uint64_t seed = 0;
  float layer_norm_eps = 1e-5f;

  // Throws ConfigError when an invariant does not hold.
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class ParameterRole {
  TokenEmbedding,
  PositionalEmbedding,
  Attention,
  Mlp,
  LayerNorm,
  LmHead,
  Embedder,
  Predictor,
};

struct NamedParameter {
  std::string name;
  ParameterRole role;
  Tensor tensor;
};

enum class FreezePolicy { AllTrainable, FptFrozen };

std::string to_string(FreezePolicy policy);
// FptFrozen trains the task embedder/predictor and every layer-norm gain/bias.
bool is_trainable(ParameterRole role, FreezePolicy policy);

enum class PretrainObjective { MLM, NextToken };

struct ForwardOptions {
  // Position index per input row; defaults to 0..L-1.
  std::optional<std::vector<int>> position_ids;
};

// Pre-norm transformer with learned absolute positions and a GELU MLP.
// Encoder-only and decoder-only models share this class and differ in the
// attention mask they are pretrained and run with.
class TransformerModel {
 public:
  struct Block {
    Tensor ln1_gain, ln1_bias;
    Tensor qkv_weight, qkv_bias;  // [d x 3d], [3d]
    Tensor out_weight, out_bias;  // [d x d], [d]
    Tensor ln2_gain, ln2_bias;
    Tensor fc_weight, fc_bias;      // [d x ff], [ff]
    Tensor proj_weight, proj_bias;  // [ff x d], [d]
  };

  TransformerModel(TransformerModel&&) = default;
  TransformerModel& operator=(TransformerModel&&) = default;
  TransformerModel(const TransformerModel&) = delete;
  TransformerModel& operator=(const TransformerModel&) = delete;

  const ModelConfig& config() const { return config_; }
  std::vector<NamedParameter> parameters() const;
  std::size_t parameter_count() const;

  // Whether the weights came out of pretraining (recorded as provenance).
  bool pretrained() const { return pretrained_; }
  void set_pretrained(bool flag) { pretrained_ = flag; }

  // Returns the last hidden layer [L x d_model] (after the final layer norm)
  // for already-embedded input rows. Positional embeddings are added here.
  Tensor forward_hidden(const Tensor& embedded_input, AttentionMaskPolicy mask,
                        const ForwardOptions& options = {}) const;
  Tensor forward_tokens(std::span<const int> tokens, AttentionMaskPolicy mask) const;
  Tensor logits(const Tensor& hidden) const;

  const Tensor& token_embedding() const { return token_embedding_; }
  const Tensor& positional_embedding() const { return positional_embedding_; }
  Tensor& positional_embedding() { return positional_embedding_; }
  const std::vector<Block>& blocks() const { return blocks_; }

  // Independent deep copy.
  TransformerModel clone() const;

  // Copies parameter values from `other` (same config) into this model.
  void copy_weights_from(const TransformerModel& other);

 private:
  friend TransformerModel build_model(const ModelConfig& config);
  friend TransformerModel load_checkpoint(const std::filesystem::path& path,
                                          std::vector<NamedParameter>* extra);
  explicit TransformerModel(ModelConfig config) : config_(std::move(config)) {}

  ModelConfig config_;
  Tensor token_embedding_;       // [vocab x d]
  Tensor positional_embedding_;  // [max_positions x d]
  std::vector<Block> blocks_;
  Tensor final_ln_gain_, final_ln_bias_;
  Tensor lm_head_;  // [d x vocab]
  bool pretrained_ = false;
};

// Seeded N(0, 0.02) weights, zero biases, unit layer-norm gains.
TransformerModel build_model(const ModelConfig& config);

// Closed-form parameter count for a config.
std::size_t parameter_census(const ModelConfig& config);

// Counts parameters trainable under `policy`, including optional task heads.
std::size_t trainable_parameter_census(
    const TransformerModel& model, FreezePolicy policy,
    std::span<const NamedParameter> task_heads = {});

// One pretraining forward/backward over a batch of equal-or-variable length
// token sequences. Positions holding `pad_token` never contribute to the loss.
// Returns the mean cross-entropy over predicted tokens and leaves gradients
// populated (accumulated) on the model's parameters. A batch in which no
// token is predicted has loss 0 and produces no gradient.
struct PretrainSettings {
  PretrainObjective objective = PretrainObjective::NextToken;
  int pad_token = 0;
  int mask_token = 1;
  double mask_rate = 0.15;
};

float pretrain_step(const TransformerModel& model,
                    std::span<const std::vector<int>> batch,
                    const PretrainSettings& settings, std::mt19937_64& rng);

PretrainObjective native_objective(Architecture arch);

// Checkpoint: container header with config and a parameter manifest
// (name, shape, offset) followed by the float32 payload. `extra` parameters
// (e.g. task embedder/predictor) are appended after the model's.
void save_checkpoint(const std::filesystem::path& path,
                     const TransformerModel& model,
                     std::span<const NamedParameter> extra = {});
TransformerModel load_checkpoint(const std::filesystem::path& path,
                                 std::vector<NamedParameter>* extra = nullptr);

// Desk-scale width/depth ladder used for scaling sweeps.
std::vector<ModelConfig> scaling_ladder(Architecture arch,
                                        std::size_t max_positions);

}  // namespace crossmodal
