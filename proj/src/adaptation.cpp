#include "crossmodal/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "crossmodal/bidir.hpp"
#include "crossmodal/errors.hpp"
#include "crossmodal/metrics.hpp"
#include "crossmodal/ops.hpp"

namespace crossmodal {

namespace {

constexpr std::uint64_t kStage1EvalSalt = 0x51ed270b27e5a5c3ULL;
constexpr std::uint64_t kShuffleSalt = 0x2545f4914f6cdd1dULL;

std::string normalize(std::string s) {
  std::string out;
  for (char c : s) {
    if (c == '-' || c == '_' || c == ' ') continue;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

// Scoped requires_grad=false for parameters outside the trainable set, so the
// backward pass neither computes nor stores their gradients.
class FrozenScope {
 public:
  explicit FrozenScope(std::vector<Tensor> frozen) : frozen_(std::move(frozen)) {
    for (auto& t : frozen_) t.set_requires_grad(false);
  }
  ~FrozenScope() {
    for (auto& t : frozen_) t.set_requires_grad(true);
  }
  FrozenScope(const FrozenScope&) = delete;
  FrozenScope& operator=(const FrozenScope&) = delete;

 private:
  std::vector<Tensor> frozen_;
};

struct TokenRef {
  std::size_t instance;
  std::size_t position;
};

LabeledPointCloud sample_proxy(const ProxyEmbeddingSet& proxy, std::size_t n,
                               std::mt19937_64& rng) {
  const std::size_t total = proxy.features.dim(0);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  std::vector<int> rows(n);
  LabeledPointCloud cloud;
  cloud.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = pick(rng);
    rows[i] = static_cast<int>(r);
    cloud.labels[i] = proxy.labels[r];
  }
  {
    NoGradGuard no_grad;
    cloud.points = embedding(proxy.features, rows).detach();
  }
  cloud.class_count = proxy.tag_count;
  return cloud;
}

}  // namespace

std::string to_string(AdaptationMethod method) {
  return method == AdaptationMethod::FPT ? "FPT" : "ORCA";
}

std::string to_string(BidirMethod method) {
  switch (method) {
    case BidirMethod::None: return "None";
    case BidirMethod::ParallelFlipping: return "ParallelFlipping";
    case BidirMethod::SequenceDoubling: return "SequenceDoubling";
  }
  return "None";
}

AdaptationMethod adaptation_method_from_string(const std::string& name) {
  const auto n = normalize(name);
  if (n == "fpt") return AdaptationMethod::FPT;
  if (n == "orca") return AdaptationMethod::ORCA;
  throw ConfigError("unknown adaptation method '" + name + "'");
}

BidirMethod bidir_method_from_string(const std::string& name) {
  const auto n = normalize(name);
  if (n == "none") return BidirMethod::None;
  if (n == "parallelflipping" || n == "pf") return BidirMethod::ParallelFlipping;
  if (n == "sequencedoubling" || n == "sd") return BidirMethod::SequenceDoubling;
  throw ConfigError("unknown bidir method '" + name + "'");
}

TokenLinear::TokenLinear(std::size_t in, std::size_t out, std::uint64_t seed) {
  if (in == 0 || out == 0) throw ConfigError("TokenLinear needs nonzero widths");
  std::mt19937_64 rng(seed);
  const float bound = 1.0f / std::sqrt(static_cast<float>(in));
  std::uniform_real_distribution<float> u(-bound, bound);
  std::vector<float> w(in * out), b(out);
  for (auto& v : w) v = u(rng);
  for (auto& v : b) v = u(rng);
  weight_ = Tensor::from_data({in, out}, std::move(w), true);
  bias_ = Tensor::from_data({out}, std::move(b), true);
}

Tensor TokenLinear::operator()(const Tensor& x) const {
  if (x.cols() != in_features()) {
    throw DimensionError("TokenLinear expects width " + std::to_string(in_features()) +
                         ", got " + std::to_string(x.cols()));
  }
  Tensor rows = x.rank() == 2 ? x : reshape(x, {x.rows(), x.cols()});
  return add_bias(matmul(rows, weight_), bias_);
}

TokenLinear TokenLinear::clone() const {
  TokenLinear copy;
  copy.weight_ = weight_.clone();
  copy.bias_ = bias_.clone();
  copy.weight_.set_requires_grad(true);
  copy.bias_.set_requires_grad(true);
  return copy;
}

std::vector<NamedParameter> Pipeline::task_parameters() const {
  return {{"embedder.weight", ParameterRole::Embedder, embedder.weight()},
          {"embedder.bias", ParameterRole::Embedder, embedder.bias()},
          {"predictor.weight", ParameterRole::Predictor, predictor.weight()},
          {"predictor.bias", ParameterRole::Predictor, predictor.bias()}};
}

Pipeline Pipeline::clone() const {
  return Pipeline{model.clone(), Embedder(embedder.clone()),
                  Predictor(predictor.clone())};
}

Pipeline make_pipeline(TransformerModel model, std::size_t c_in,
                       std::size_t c_out, std::uint64_t seed) {
  const std::size_t d = model.config().d_model;
  std::seed_seq seq{seed, std::uint64_t{0xe3b0c442}};
  std::uint64_t seeds[2];
  seq.generate(seeds, seeds + 2);
  return Pipeline{std::move(model), Embedder(c_in, d, seeds[0]),
                  Predictor(d, c_out, seeds[1])};
}

void save_pipeline(const std::filesystem::path& path, const Pipeline& pipeline) {
  save_checkpoint(path, pipeline.model, pipeline.task_parameters());
}

Pipeline load_pipeline(const std::filesystem::path& path) {
  std::vector<NamedParameter> extra;
  TransformerModel model = load_checkpoint(path, &extra);
  auto find = [&](const std::string& name) -> Tensor {
    for (const auto& p : extra)
      if (p.name == name) return p.tensor;
    throw IoError(path.string() + " has no " + name + " block");
  };
  Pipeline p{std::move(model), Embedder(), Predictor()};
  p.embedder.weight() = find("embedder.weight");
  p.embedder.bias() = find("embedder.bias");
  p.predictor.weight() = find("predictor.weight");
  p.predictor.bias() = find("predictor.bias");
  return p;
}

void AdaptationConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (doubling_batch_size && *doubling_batch_size == 0)
    throw ConfigError("doubling_batch_size must be positive");
  if (pseudo_label_bins < 2) throw ConfigError("pseudo_label_bins must be >= 2");
  if (stage1_target_tokens == 0 || stage1_proxy_tokens == 0)
    throw ConfigError("stage-1 minibatches must be nonempty");
  if (learning_rate && !(*learning_rate > 0.0f))
    throw ConfigError("learning_rate must be positive");
}

void to_json(nlohmann::json& j, const AdaptationConfig& c) {
  j = {{"method", to_string(c.method)},
       {"bidir_method", to_string(c.bidir_method)},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"restart_positions", c.restart_positions},
       {"stage1_steps", c.stage1_steps},
       {"stage1_target_tokens", c.stage1_target_tokens},
       {"stage1_proxy_tokens", c.stage1_proxy_tokens},
       {"stage1_optimizer", to_string(c.stage1_optimizer.kind)},
       {"stage1_learning_rate", c.stage1_optimizer.learning_rate},
       {"stage1_through_body", c.stage1_through_body},
       {"pseudo_label_bins", c.pseudo_label_bins},
       {"sinkhorn",
        {{"epsilon", c.sinkhorn.epsilon},
         {"epsilon_relative", c.sinkhorn.epsilon_relative},
         {"max_iters", c.sinkhorn.max_iters},
         {"tolerance", c.sinkhorn.tolerance}}},
       {"seed", c.seed}};
  j["optimizer"] = c.optimizer ? nlohmann::json(to_string(*c.optimizer)) : nlohmann::json();
  j["learning_rate"] = c.learning_rate ? nlohmann::json(*c.learning_rate) : nlohmann::json();
  j["doubling_batch_size"] =
      c.doubling_batch_size ? nlohmann::json(*c.doubling_batch_size) : nlohmann::json();
}

void from_json(const nlohmann::json& j, AdaptationConfig& c) {
  c = AdaptationConfig{};
  if (j.contains("method")) c.method = adaptation_method_from_string(j.at("method"));
  if (j.contains("bidir_method"))
    c.bidir_method = bidir_method_from_string(j.at("bidir_method"));
  if (j.contains("optimizer") && !j.at("optimizer").is_null())
    c.optimizer = optimizer_kind_from_string(j.at("optimizer"));
  if (j.contains("learning_rate") && !j.at("learning_rate").is_null())
    c.learning_rate = j.at("learning_rate").get<float>();
  if (j.contains("doubling_batch_size") && !j.at("doubling_batch_size").is_null())
    c.doubling_batch_size = j.at("doubling_batch_size").get<std::size_t>();
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.restart_positions = j.value("restart_positions", c.restart_positions);
  c.stage1_steps = j.value("stage1_steps", c.stage1_steps);
  c.stage1_target_tokens = j.value("stage1_target_tokens", c.stage1_target_tokens);
  c.stage1_proxy_tokens = j.value("stage1_proxy_tokens", c.stage1_proxy_tokens);
  if (j.contains("stage1_optimizer"))
    c.stage1_optimizer.kind = optimizer_kind_from_string(j.at("stage1_optimizer"));
  c.stage1_optimizer.learning_rate =
      j.value("stage1_learning_rate", c.stage1_optimizer.learning_rate);
  c.stage1_through_body = j.value("stage1_through_body", c.stage1_through_body);
  c.pseudo_label_bins = j.value("pseudo_label_bins", c.pseudo_label_bins);
  if (j.contains("sinkhorn")) {
    const auto& s = j.at("sinkhorn");
    c.sinkhorn.epsilon = s.value("epsilon", c.sinkhorn.epsilon);
    c.sinkhorn.epsilon_relative = s.value("epsilon_relative", c.sinkhorn.epsilon_relative);
    c.sinkhorn.max_iters = s.value("max_iters", c.sinkhorn.max_iters);
    c.sinkhorn.tolerance = s.value("tolerance", c.sinkhorn.tolerance);
  }
  c.seed = j.value("seed", c.seed);
  c.validate();
}

OptimizerKind family_optimizer(PdeFamily family) {
  switch (family) {
    case PdeFamily::Advection: return OptimizerKind::Adam;
    case PdeFamily::DiffusionReaction: return OptimizerKind::SGD;
    case PdeFamily::DiffusionSorption: return OptimizerKind::AdamW;
    case PdeFamily::BurgersNS: return OptimizerKind::AdamW;
  }
  return OptimizerKind::Adam;
}

float default_learning_rate(OptimizerKind kind) {
  return kind == OptimizerKind::SGD ? 1e-2f : 1e-3f;
}

OptimizerConfig resolve_optimizer(const AdaptationConfig& config, PdeFamily family) {
  OptimizerConfig o;
  o.kind = config.optimizer.value_or(family_optimizer(family));
  o.learning_rate = config.learning_rate.value_or(default_learning_rate(o.kind));
  if (o.kind == OptimizerKind::AdamW) o.weight_decay = 1e-2f;
  return o;
}

int PseudoLabeler::operator()(float value) const {
  return static_cast<int>(
      std::upper_bound(boundaries.begin(), boundaries.end(), value) - boundaries.begin());
}

PseudoLabeler fit_pseudo_labels(const std::vector<PdeInstance>& train,
                                std::size_t bins) {
  if (bins < 2) throw ConfigError("pseudo-labelling needs at least 2 bins");
  std::vector<float> values;
  for (const auto& inst : train)
    values.insert(values.end(), inst.target.data().begin(), inst.target.data().end());
  if (values.empty()) throw ContractError("pseudo-labelling needs training targets");
  std::sort(values.begin(), values.end());

  PseudoLabeler labeler;
  labeler.bin_count = bins;
  if (values.front() == values.back()) {
    labeler.degenerate = true;
    return labeler;
  }
  // Boundary k is the first value of the k-th equal-mass slice; ties collapse.
  for (std::size_t k = 1; k < bins; ++k) {
    const float b = values[k * values.size() / bins];
    if (b > values.front() && (labeler.boundaries.empty() || b > labeler.boundaries.back()))
      labeler.boundaries.push_back(b);
  }
  return labeler;
}

std::vector<std::vector<int>> pseudo_label_targets(
    const std::vector<PdeInstance>& instances, const PseudoLabeler& labeler) {
  std::vector<std::vector<int>> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) {
    std::vector<int> labels;
    labels.reserve(inst.target.numel());
    for (float v : inst.target.data()) labels.push_back(labeler(v));
    out.push_back(std::move(labels));
  }
  return out;
}

Tensor instance_input(const PdeInstance& instance) {
  auto d = instance.input.data();
  return Tensor::from_data({d.size(), 1}, {d.begin(), d.end()});
}

Tensor instance_target(const PdeInstance& instance) {
  auto d = instance.target.data();
  return Tensor::from_data({d.size(), 1}, {d.begin(), d.end()});
}

Tensor predict_sequence(const Pipeline& pipeline, const Tensor& input,
                        const PredictOptions& options) {
  const std::size_t L = input.rows();
  if (L == 0 || L % 2 != 0) {
    throw LengthError("predict_sequence needs an even, nonzero length; got " +
                      std::to_string(L));
  }
  switch (options.bidir_method) {
    case BidirMethod::None: {
      Tensor hidden = pipeline.model.forward_hidden(
          pipeline.embedder(input),
          AttentionMaskPolicy::native(pipeline.model.config().arch));
      return pipeline.predictor(hidden);
    }
    case BidirMethod::SequenceDoubling:
      return sequence_doubling_forward(pipeline, input, options.restart_positions);
    case BidirMethod::ParallelFlipping:
      throw ContractError(
          "ParallelFlipping predictions need a FlipPair; use predict_flip_pair");
  }
  return {};
}

Stage1Report orca_stage1(Pipeline& pipeline, const ProxyEmbeddingSet& proxy,
                         const std::vector<PdeInstance>& train,
                         const AdaptationConfig& config) {
  config.validate();
  const auto& model = pipeline.model;
  const std::size_t d = model.config().d_model;
  if (proxy.features.cols() != d) {
    throw DimensionError("proxy width " + std::to_string(proxy.features.cols()) +
                         " does not match model width " + std::to_string(d));
  }
  if (proxy.labels.empty()) throw ContractError("proxy set is empty");
  if (train.empty()) throw ContractError("stage 1 needs training instances");

  const auto labeler = fit_pseudo_labels(train, config.pseudo_label_bins);
  const auto labels = pseudo_label_targets(train, labeler);
  std::vector<Tensor> inputs;
  for (const auto& inst : train) inputs.push_back(instance_input(inst));
  const std::size_t L = inputs.front().rows();

  std::vector<Tensor> frozen;
  for (const auto& p : model.parameters()) frozen.push_back(p.tensor);
  frozen.push_back(pipeline.predictor.weight());
  frozen.push_back(pipeline.predictor.bias());
  FrozenScope scope(frozen);

  const auto mask = AttentionMaskPolicy::native(model.config().arch);

  // Embedded target tokens with their pseudo-labels.
  auto sample_target = [&](std::mt19937_64& rng) {
    const std::size_t n = config.stage1_target_tokens;
    LabeledPointCloud cloud;
    cloud.class_count = labeler.bin_count;
    cloud.labels.resize(n);
    if (!config.stage1_through_body) {
      std::uniform_int_distribution<std::size_t> pick_i(0, train.size() - 1);
      std::uniform_int_distribution<std::size_t> pick_p(0, L - 1);
      std::vector<float> values(n);
      for (std::size_t k = 0; k < n; ++k) {
        const TokenRef t{pick_i(rng), pick_p(rng)};
        values[k] = inputs[t.instance].data()[t.position];
        cloud.labels[k] = labels[t.instance][t.position];
      }
      cloud.points = pipeline.embedder(Tensor::from_data({n, 1}, std::move(values)));
      return cloud;
    }
    // Through the body: whole sequences go through the frozen model and
    // tokens are drawn from their last hidden layers.
    std::uniform_int_distribution<std::size_t> pick_i(0, train.size() - 1);
    const std::size_t seqs = std::min<std::size_t>((n + L - 1) / L + 1, train.size());
    std::vector<std::size_t> chosen(seqs);
    std::vector<Tensor> hidden;
    for (auto& c : chosen) {
      c = pick_i(rng);
      hidden.push_back(model.forward_hidden(pipeline.embedder(inputs[c]), mask));
    }
    Tensor all = concat_rows(hidden);
    std::uniform_int_distribution<std::size_t> pick_row(0, seqs * L - 1);
    std::vector<int> rows(n);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t r = pick_row(rng);
      rows[k] = static_cast<int>(r);
      cloud.labels[k] = labels[chosen[r / L]][r % L];
    }
    cloud.points = embedding(all, rows);
    return cloud;
  };

  Stage1Report report;
  auto evaluate = [&] {
    NoGradGuard no_grad;
    std::mt19937_64 rng(config.seed ^ kStage1EvalSalt);
    auto target = sample_target(rng);
    auto reference = sample_proxy(proxy, config.stage1_proxy_tokens, rng);
    return static_cast<double>(
        otdd_distance(target, reference, config.sinkhorn).distance.item());
  };

  report.initial_distance = evaluate();
  if (config.stage1_steps > 0) {
    std::vector<Tensor> params{pipeline.embedder.weight(), pipeline.embedder.bias()};
    Optimizer opt(config.stage1_optimizer, params);
    std::mt19937_64 rng(config.seed);
    report.trace.reserve(config.stage1_steps);
    for (std::size_t step = 0; step < config.stage1_steps; ++step) {
      auto target = sample_target(rng);
      auto reference = sample_proxy(proxy, config.stage1_proxy_tokens, rng);
      opt.zero_grad();
      auto r = otdd_distance(target, reference, config.sinkhorn);
      report.degenerate_class_events += r.degenerate_classes.size();
      const float loss = r.distance.item();
      report.trace.push_back(loss);
      if (!std::isfinite(loss)) break;
      r.distance.backward();
      for (auto& p : params) p.mutable_grad();
      opt.step();
    }
  }
  report.final_distance = evaluate();
  return report;
}

void to_json(nlohmann::json& j, const TrainReport& r) {
  j = {{"epoch_losses", r.epoch_losses},
       {"initial_test_nrmse", r.initial_test_nrmse},
       {"test_nrmse", r.test_nrmse},
       {"train_nrmse", r.train_nrmse},
       {"steps", r.steps},
       {"optimizer", to_string(r.optimizer)},
       {"learning_rate", r.learning_rate},
       {"batch_size", r.batch_size},
       {"diverged", r.diverged},
       {"diagnostic", r.diagnostic}};
}

double evaluate_nrmse(const Pipeline& pipeline,
                      const std::vector<PdeInstance>& instances,
                      const PredictOptions& options) {
  if (instances.empty()) throw ContractError("evaluate_nrmse needs instances");
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& inst : instances) {
    total += nrmse(predict_sequence(pipeline, instance_input(inst), options),
                   instance_target(inst));
  }
  return total / static_cast<double>(instances.size());
}

FreezePolicy finetune_policy(AdaptationMethod method) {
  return method == AdaptationMethod::FPT ? FreezePolicy::FptFrozen
                                         : FreezePolicy::AllTrainable;
}

TrainReport finetune(Pipeline& pipeline, const PdeDataset& dataset,
                     FreezePolicy policy, const AdaptationConfig& config) {
  config.validate();
  if (dataset.train.empty()) throw ContractError("finetune needs training instances");

  const PredictOptions options{config.bidir_method, config.restart_positions};
  if (options.bidir_method == BidirMethod::ParallelFlipping) {
    throw ContractError("ParallelFlipping trains a FlipPair; use parallel_flipping_train");
  }

  std::vector<Tensor> trainable, frozen;
  for (const auto& p : pipeline.model.parameters()) {
    // The token table and LM head take no part in PDE predictions.
    const bool used = p.role != ParameterRole::TokenEmbedding &&
                      p.role != ParameterRole::LmHead;
    (used && is_trainable(p.role, policy) ? trainable : frozen).push_back(p.tensor);
  }
  for (const auto& p : pipeline.task_parameters()) {
    (is_trainable(p.role, policy) ? trainable : frozen).push_back(p.tensor);
  }
  FrozenScope scope(frozen);

  TrainReport report;
  const auto opt_config = resolve_optimizer(config, dataset.family);
  report.optimizer = opt_config.kind;
  report.learning_rate = opt_config.learning_rate;
  report.batch_size = options.bidir_method == BidirMethod::SequenceDoubling
                          ? config.doubling_batch_size.value_or(config.batch_size)
                          : config.batch_size;
  if (!dataset.test.empty())
    report.initial_test_nrmse = evaluate_nrmse(pipeline, dataset.test, options);

  std::vector<Tensor> inputs, targets;
  for (const auto& inst : dataset.train) {
    inputs.push_back(instance_input(inst));
    targets.push_back(instance_target(inst));
  }

  Optimizer opt(opt_config, trainable);
  std::mt19937_64 rng(config.seed ^ kShuffleSalt);
  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < config.epochs && !report.diverged; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += report.batch_size) {
      const std::size_t end = std::min(order.size(), start + report.batch_size);
      opt.zero_grad();
      Tensor loss;
      for (std::size_t k = start; k < end; ++k) {
        Tensor l = mse_loss(predict_sequence(pipeline, inputs[order[k]], options),
                            targets[order[k]]);
        loss = loss.defined() ? add(loss, l) : l;
      }
      loss = scale(loss, 1.0f / static_cast<float>(end - start));
      const float value = loss.item();
      if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << ", step " << report.steps
            << " with " << to_string(opt_config.kind) << " learning rate "
            << opt_config.learning_rate;
        report.diverged = true;
        report.diagnostic = msg.str();
        break;
      }
      loss.backward();
      for (auto& p : trainable) p.mutable_grad();
      opt.step();
      ++report.steps;
      epoch_loss += value;
      ++batches;
    }
    if (!report.diverged)
      report.epoch_losses.push_back(static_cast<float>(epoch_loss / batches));
  }

  if (report.diverged) {
    report.test_nrmse = report.train_nrmse = std::numeric_limits<double>::quiet_NaN();
    return report;
  }
  report.train_nrmse = evaluate_nrmse(pipeline, dataset.train, options);
  report.test_nrmse = dataset.test.empty()
                          ? std::numeric_limits<double>::quiet_NaN()
                          : evaluate_nrmse(pipeline, dataset.test, options);
  return report;
}

}  // namespace crossmodal
