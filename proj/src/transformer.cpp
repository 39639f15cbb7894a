#include "crossmodal/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "crossmodal/container.hpp"
#include "crossmodal/errors.hpp"
#include "crossmodal/ops.hpp"

namespace crossmodal {

std::string to_string(Architecture arch) {
  return arch == Architecture::EncoderOnly ? "EncoderOnly" : "DecoderOnly";
}

Architecture architecture_from_string(const std::string& name) {
  if (name == "EncoderOnly" || name == "encoder") return Architecture::EncoderOnly;
  if (name == "DecoderOnly" || name == "decoder") return Architecture::DecoderOnly;
  throw ConfigError("unknown architecture '" + name + "'");
}

std::string to_string(FreezePolicy policy) {
  return policy == FreezePolicy::AllTrainable ? "AllTrainable" : "FptFrozen";
}

bool is_trainable(ParameterRole role, FreezePolicy policy) {
  if (policy == FreezePolicy::AllTrainable) return true;
  return role == ParameterRole::LayerNorm || role == ParameterRole::Embedder ||
         role == ParameterRole::Predictor;
}

PretrainObjective native_objective(Architecture arch) {
  return arch == Architecture::EncoderOnly ? PretrainObjective::MLM
                                           : PretrainObjective::NextToken;
}

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || n_layers == 0 || d_ff == 0 ||
      max_positions == 0 || vocab_size == 0) {
    throw ConfigError("model config extents must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) +
                      " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (!(layer_norm_eps > 0.0f)) throw ConfigError("layer_norm_eps must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"arch", to_string(c.arch)},
                     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"n_layers", c.n_layers},
                     {"d_ff", c.d_ff},
                     {"max_positions", c.max_positions},
                     {"vocab_size", c.vocab_size},
                     {"seed", c.seed},
                     {"layer_norm_eps", c.layer_norm_eps}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.arch = architecture_from_string(j.value("arch", to_string(d.arch)));
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", c.d_model >= 16 ? c.d_model / 16 : 1);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_ff = j.value("d_ff", 4 * c.d_model);
  c.max_positions = j.value("max_positions", d.max_positions);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.seed = j.value("seed", d.seed);
  c.layer_norm_eps = j.value("layer_norm_eps", d.layer_norm_eps);
}

namespace {

Tensor gaussian(Shape shape, std::mt19937_64& rng, float stddev) {
  std::normal_distribution<float> dist(0.0f, stddev);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

Tensor attention(const TransformerModel::Block& b, const Tensor& x,
                 std::size_t heads, MaskKind mask) {
  const std::size_t d = x.cols();
  const std::size_t dh = d / heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  Tensor qkv = add_bias(matmul(x, b.qkv_weight), b.qkv_bias);
  std::vector<Tensor> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor q = slice_cols(qkv, h * dh, (h + 1) * dh);
    Tensor k = slice_cols(qkv, d + h * dh, d + (h + 1) * dh);
    Tensor v = slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh);
    Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt);
    Tensor weights = mask == MaskKind::Causal ? causal_softmax(scores)
                                              : softmax_lastdim(scores);
    outputs.push_back(matmul(weights, v));
  }
  Tensor merged = heads == 1 ? outputs[0] : concat_cols(outputs);
  return add_bias(matmul(merged, b.out_weight), b.out_bias);
}

// Learned table, started from sin/cos pairs at geometric frequencies.
Tensor sinusoidal_table(std::size_t positions, std::size_t d) {
  std::vector<float> v(positions * d);
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = static_cast<double>(p) *
                           std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      v[p * d + i] = static_cast<float>(std::sin(angle));
      if (i + 1 < d) v[p * d + i + 1] = static_cast<float>(std::cos(angle));
    }
  }
  return Tensor::from_data({positions, d}, std::move(v), true);
}

}  // namespace

TransformerModel build_model(const ModelConfig& config) {
  config.validate();
  TransformerModel m(config);
  std::mt19937_64 rng(config.seed);
  const std::size_t d = config.d_model, ff = config.d_ff;
  constexpr float kStd = 0.02f;
  m.token_embedding_ = gaussian({config.vocab_size, d}, rng, kStd);
  m.positional_embedding_ = sinusoidal_table(config.max_positions, d);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    TransformerModel::Block b;
    b.ln1_gain = Tensor::full({d}, 1.0f, true);
    b.ln1_bias = Tensor::zeros({d}, true);
    b.qkv_weight = gaussian({d, 3 * d}, rng, kStd);
    b.qkv_bias = Tensor::zeros({3 * d}, true);
    b.out_weight = gaussian({d, d}, rng, kStd);
    b.out_bias = Tensor::zeros({d}, true);
    b.ln2_gain = Tensor::full({d}, 1.0f, true);
    b.ln2_bias = Tensor::zeros({d}, true);
    b.fc_weight = gaussian({d, ff}, rng, kStd);
    b.fc_bias = Tensor::zeros({ff}, true);
    b.proj_weight = gaussian({ff, d}, rng, kStd);
    b.proj_bias = Tensor::zeros({d}, true);
    m.blocks_.push_back(std::move(b));
  }
  m.final_ln_gain_ = Tensor::full({d}, 1.0f, true);
  m.final_ln_bias_ = Tensor::zeros({d}, true);
  m.lm_head_ = gaussian({d, config.vocab_size}, rng, kStd);
  return m;
}

std::size_t parameter_census(const ModelConfig& c) {
  const std::size_t d = c.d_model, ff = c.d_ff;
  const std::size_t per_layer = 2 * d              // ln1
                                + 3 * d * d + 3 * d  // qkv
                                + d * d + d          // out
                                + 2 * d              // ln2
                                + d * ff + ff        // fc
                                + ff * d + d;        // proj
  return c.vocab_size * d + c.max_positions * d + c.n_layers * per_layer +
         2 * d + d * c.vocab_size;
}

std::vector<NamedParameter> TransformerModel::parameters() const {
  std::vector<NamedParameter> out;
  out.push_back({"token_embedding", ParameterRole::TokenEmbedding, token_embedding_});
  out.push_back({"positional_embedding", ParameterRole::PositionalEmbedding,
                 positional_embedding_});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.push_back({p + "ln1.gain", ParameterRole::LayerNorm, b.ln1_gain});
    out.push_back({p + "ln1.bias", ParameterRole::LayerNorm, b.ln1_bias});
    out.push_back({p + "attn.qkv.weight", ParameterRole::Attention, b.qkv_weight});
    out.push_back({p + "attn.qkv.bias", ParameterRole::Attention, b.qkv_bias});
    out.push_back({p + "attn.out.weight", ParameterRole::Attention, b.out_weight});
    out.push_back({p + "attn.out.bias", ParameterRole::Attention, b.out_bias});
    out.push_back({p + "ln2.gain", ParameterRole::LayerNorm, b.ln2_gain});
    out.push_back({p + "ln2.bias", ParameterRole::LayerNorm, b.ln2_bias});
    out.push_back({p + "mlp.fc.weight", ParameterRole::Mlp, b.fc_weight});
    out.push_back({p + "mlp.fc.bias", ParameterRole::Mlp, b.fc_bias});
    out.push_back({p + "mlp.proj.weight", ParameterRole::Mlp, b.proj_weight});
    out.push_back({p + "mlp.proj.bias", ParameterRole::Mlp, b.proj_bias});
  }
  out.push_back({"final_ln.gain", ParameterRole::LayerNorm, final_ln_gain_});
  out.push_back({"final_ln.bias", ParameterRole::LayerNorm, final_ln_bias_});
  out.push_back({"lm_head", ParameterRole::LmHead, lm_head_});
  return out;
}

std::size_t TransformerModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

Tensor TransformerModel::forward_hidden(const Tensor& embedded_input,
                                        AttentionMaskPolicy mask,
                                        const ForwardOptions& options) const {
  const std::size_t L = embedded_input.rows();
  if (embedded_input.cols() != config_.d_model) {
    throw DimensionError("forward_hidden: expected width " +
                         std::to_string(config_.d_model) + ", got " +
                         std::to_string(embedded_input.cols()));
  }
  if (L > config_.max_positions) {
    throw LengthError("sequence length " + std::to_string(L) +
                      " exceeds max_positions " +
                      std::to_string(config_.max_positions));
  }
  std::vector<int> positions;
  if (options.position_ids) {
    positions = *options.position_ids;
    if (positions.size() != L) {
      throw LengthError("position_ids length does not match input length");
    }
    for (int p : positions) {
      if (p < 0 || static_cast<std::size_t>(p) >= config_.max_positions)
        throw LengthError("position id " + std::to_string(p) + " out of range");
    }
  } else {
    positions.resize(L);
    std::iota(positions.begin(), positions.end(), 0);
  }
  Tensor input = embedded_input.rank() == 2
                     ? embedded_input
                     : reshape(embedded_input, {L, config_.d_model});
  Tensor h = add(input, embedding(positional_embedding_, positions));
  const float eps = config_.layer_norm_eps;
  for (const auto& b : blocks_) {
    h = add(h, attention(b, layer_norm(h, b.ln1_gain, b.ln1_bias, eps),
                         config_.n_heads, mask.kind));
    Tensor m = layer_norm(h, b.ln2_gain, b.ln2_bias, eps);
    m = gelu(add_bias(matmul(m, b.fc_weight), b.fc_bias));
    h = add(h, add_bias(matmul(m, b.proj_weight), b.proj_bias));
  }
  return layer_norm(h, final_ln_gain_, final_ln_bias_, eps);
}

Tensor TransformerModel::forward_tokens(std::span<const int> tokens,
                                        AttentionMaskPolicy mask) const {
  return forward_hidden(embedding(token_embedding_, tokens), mask);
}

Tensor TransformerModel::logits(const Tensor& hidden) const {
  return matmul(hidden, lm_head_);
}

TransformerModel TransformerModel::clone() const {
  TransformerModel copy = build_model(config_);
  copy.copy_weights_from(*this);
  copy.pretrained_ = pretrained_;
  return copy;
}

void TransformerModel::copy_weights_from(const TransformerModel& other) {
  auto dst = parameters();
  auto src = other.parameters();
  if (dst.size() != src.size()) throw ConfigError("copy_weights_from: layout mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].tensor.shape() != src[i].tensor.shape()) {
      throw DimensionError("copy_weights_from: shape mismatch at " + dst[i].name);
    }
    auto out = dst[i].tensor.mutable_data();
    std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), out.begin());
  }
}

std::size_t trainable_parameter_census(const TransformerModel& model,
                                       FreezePolicy policy,
                                       std::span<const NamedParameter> task_heads) {
  std::size_t n = 0;
  for (const auto& p : model.parameters()) {
    if (is_trainable(p.role, policy)) n += p.tensor.numel();
  }
  for (const auto& p : task_heads) {
    if (is_trainable(p.role, policy)) n += p.tensor.numel();
  }
  return n;
}

float pretrain_step(const TransformerModel& model,
                    std::span<const std::vector<int>> batch,
                    const PretrainSettings& settings, std::mt19937_64& rng) {
  const auto arch = model.config().arch;
  if (settings.objective == PretrainObjective::MLM &&
      arch != Architecture::EncoderOnly) {
    throw ContractError("MLM pretraining requires an encoder-only model");
  }
  if (settings.objective == PretrainObjective::NextToken &&
      arch != Architecture::DecoderOnly) {
    throw ContractError("next-token pretraining requires a decoder-only model");
  }
  const auto mask = AttentionMaskPolicy::native(arch);

  std::vector<std::vector<int>> inputs(batch.size()), targets(batch.size());
  std::vector<std::size_t> counts(batch.size(), 0);
  std::size_t total = 0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto& seq = batch[s];
    auto& in = inputs[s];
    auto& tgt = targets[s];
    in = seq;
    tgt.assign(seq.size(), -1);
    if (settings.objective == PretrainObjective::NextToken) {
      for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
        if (seq[i] != settings.pad_token && seq[i + 1] != settings.pad_token) {
          tgt[i] = seq[i + 1];
        }
      }
    } else {
      std::vector<std::size_t> candidates;
      for (std::size_t i = 0; i < seq.size(); ++i) {
        if (seq[i] != settings.pad_token) candidates.push_back(i);
      }
      std::shuffle(candidates.begin(), candidates.end(), rng);
      const auto k = static_cast<std::size_t>(
          std::llround(settings.mask_rate * static_cast<double>(candidates.size())));
      for (std::size_t c = 0; c < k && c < candidates.size(); ++c) {
        tgt[candidates[c]] = seq[candidates[c]];
        in[candidates[c]] = settings.mask_token;
      }
    }
    for (int t : tgt) counts[s] += t >= 0 ? 1 : 0;
    total += counts[s];
  }
  if (total == 0) return 0.0f;

  double loss_sum = 0.0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    if (counts[s] == 0) continue;
    Tensor hidden = model.forward_tokens(inputs[s], mask);
    Tensor ce = cross_entropy(model.logits(hidden), targets[s]);
    const float weight = static_cast<float>(counts[s]) / static_cast<float>(total);
    Tensor weighted = scale(ce, weight);
    loss_sum += weighted.item();
    if (weighted.requires_grad()) weighted.backward();
  }
  return static_cast<float>(loss_sum);
}

void save_checkpoint(const std::filesystem::path& path,
                     const TransformerModel& model,
                     std::span<const NamedParameter> extra) {
  ContainerFile file;
  file.header["format"] = "crossmodal-checkpoint";
  file.header["format_version"] = 1;
  file.header["config"] = model.config();
  file.header["pretrained"] = model.pretrained();
  auto manifest = nlohmann::json::array();
  auto append = [&](const NamedParameter& p, bool is_extra) {
    manifest.push_back({{"name", p.name},
                        {"shape", p.tensor.shape()},
                        {"offset", file.payload.size()},
                        {"extra", is_extra}});
    file.payload.insert(file.payload.end(), p.tensor.data().begin(),
                        p.tensor.data().end());
  };
  for (const auto& p : model.parameters()) append(p, false);
  for (const auto& p : extra) append(p, true);
  file.header["parameters"] = std::move(manifest);
  write_container(path, std::move(file));
}

TransformerModel load_checkpoint(const std::filesystem::path& path,
                                 std::vector<NamedParameter>* extra) {
  auto file = read_container(path);
  if (file.header.value("format", "") != "crossmodal-checkpoint") {
    throw IoError(path.string() + " is not a model checkpoint");
  }
  TransformerModel model = build_model(file.header.at("config").get<ModelConfig>());
  model.pretrained_ = file.header.value("pretrained", false);
  auto params = model.parameters();
  std::size_t next_model = 0;
  for (const auto& entry : file.header.at("parameters")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const std::size_t n = shape_numel(shape);
    if (offset + n > file.payload.size()) throw IoError("checkpoint payload truncated");
    std::vector<float> values(file.payload.begin() + offset,
                              file.payload.begin() + offset + n);
    if (!entry.value("extra", false)) {
      if (next_model >= params.size() || params[next_model].name != name ||
          params[next_model].tensor.shape() != shape) {
        throw IoError("checkpoint manifest does not match model layout at " + name);
      }
      auto dst = params[next_model].tensor.mutable_data();
      std::copy(values.begin(), values.end(), dst.begin());
      ++next_model;
    } else if (extra) {
      const auto role = name.rfind("embedder", 0) == 0 ? ParameterRole::Embedder
                                                        : ParameterRole::Predictor;
      extra->push_back({name, role, Tensor::from_data(shape, std::move(values), true)});
    }
  }
  if (next_model != params.size()) throw IoError("checkpoint is missing parameters");
  return model;
}

std::vector<ModelConfig> scaling_ladder(Architecture arch,
                                        std::size_t max_positions) {
  std::vector<ModelConfig> ladder;
  for (std::size_t d : {32, 64, 128, 256}) {
    for (std::size_t layers : {2, 4, 6, 8}) {
      ModelConfig c;
      c.arch = arch;
      c.d_model = d;
      c.n_heads = d / 16;
      c.n_layers = layers;
      c.d_ff = 4 * d;
      c.max_positions = max_positions;
      ladder.push_back(c);
    }
  }
  return ladder;
}

}  // namespace crossmodal
