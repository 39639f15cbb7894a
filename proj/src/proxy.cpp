#include "crossmodal/proxy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "crossmodal/container.hpp"
#include "crossmodal/errors.hpp"

namespace crossmodal {

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

// Tag probabilities within a state's group: the first tag dominates.
const std::vector<double>& within_state_weights() {
  static const std::vector<double> w{0.7, 0.2, 0.1};
  return w;
}

std::size_t tags_per_state(const CorpusSpec& spec) {
  return spec.tag_count / spec.state_count;
}

}  // namespace

void to_json(nlohmann::json& j, const CorpusSpec& s) {
  j = {{"vocab_size", s.vocab_size},     {"tag_count", s.tag_count},
       {"pad_token", s.pad_token},       {"mask_token", s.mask_token},
       {"min_length", s.min_length},     {"max_length", s.max_length},
       {"state_count", s.state_count},   {"advance_probability", s.advance_probability},
       {"zipf_exponent", s.zipf_exponent}};
}

void from_json(const nlohmann::json& j, CorpusSpec& s) {
  CorpusSpec d;
  s.vocab_size = j.value("vocab_size", d.vocab_size);
  s.tag_count = j.value("tag_count", d.tag_count);
  s.pad_token = j.value("pad_token", d.pad_token);
  s.mask_token = j.value("mask_token", d.mask_token);
  s.min_length = j.value("min_length", d.min_length);
  s.max_length = j.value("max_length", d.max_length);
  s.state_count = j.value("state_count", d.state_count);
  s.advance_probability = j.value("advance_probability", d.advance_probability);
  s.zipf_exponent = j.value("zipf_exponent", d.zipf_exponent);
}

void CorpusSpec::validate() const {
  if (state_count == 0 || tag_count % state_count != 0 ||
      tags_per_state(*this) != within_state_weights().size()) {
    throw ConfigError("tag_count must be " + std::to_string(within_state_weights().size()) +
                      " tags per grammar state");
  }
  if (vocab_size < 2 + tag_count) throw ConfigError("vocabulary too small for the tag set");
  if (pad_token == mask_token || pad_token < 0 || mask_token < 0 || pad_token > 1 ||
      mask_token > 1) {
    throw ConfigError("pad and mask tokens must be the distinct reserved ids 0 and 1");
  }
  if (min_length < 1 || min_length > max_length) throw ConfigError("invalid length range");
  if (!(advance_probability >= 0.0 && advance_probability <= 1.0)) {
    throw ConfigError("advance_probability must lie in [0, 1]");
  }
}

std::size_t SyntheticCorpus::token_count() const {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.tokens.size();
  return n;
}

std::vector<std::vector<int>> tag_vocabulary(const CorpusSpec& spec) {
  // Ids 0 and 1 are reserved; the rest are dealt out in contiguous slices,
  // earlier tags taking the remainder.
  const std::size_t usable = spec.vocab_size - 2;
  std::vector<std::vector<int>> vocab(spec.tag_count);
  int next = 2;
  for (std::size_t t = 0; t < spec.tag_count; ++t) {
    const std::size_t size = usable / spec.tag_count + (t < usable % spec.tag_count ? 1 : 0);
    for (std::size_t k = 0; k < size; ++k) vocab[t].push_back(next++);
  }
  return vocab;
}

std::vector<double> grammar_tag_distribution(const CorpusSpec& spec) {
  spec.validate();
  // The transition matrix is circulant, so the stationary state law is uniform.
  std::vector<double> dist(spec.tag_count);
  const auto& w = within_state_weights();
  for (std::size_t s = 0; s < spec.state_count; ++s)
    for (std::size_t k = 0; k < w.size(); ++k)
      dist[s * w.size() + k] = w[k] / static_cast<double>(spec.state_count);
  return dist;
}

SyntheticCorpus gen_corpus(std::uint64_t seed, std::size_t n_sequences,
                           const CorpusSpec& spec) {
  spec.validate();
  if (n_sequences < 1) throw ConfigError("n_sequences must be at least 1");
  SyntheticCorpus corpus;
  corpus.spec = spec;
  corpus.seed = seed;
  const auto vocab = tag_vocabulary(spec);
  corpus.token_tag.assign(spec.vocab_size, -1);
  std::vector<std::discrete_distribution<int>> token_dists;
  for (std::size_t t = 0; t < vocab.size(); ++t) {
    std::vector<double> w;
    for (std::size_t r = 0; r < vocab[t].size(); ++r) {
      corpus.token_tag[static_cast<std::size_t>(vocab[t][r])] = static_cast<int>(t);
      w.push_back(1.0 / std::pow(static_cast<double>(r + 1), spec.zipf_exponent));
    }
    token_dists.emplace_back(w.begin(), w.end());
  }

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> length(spec.min_length, spec.max_length);
  std::uniform_int_distribution<std::size_t> first_state(0, spec.state_count - 1);
  std::bernoulli_distribution advance(spec.advance_probability);
  const auto& w = within_state_weights();
  std::discrete_distribution<int> tag_in_state(w.begin(), w.end());

  corpus.sequences.reserve(n_sequences);
  for (std::size_t n = 0; n < n_sequences; ++n) {
    TaggedSequence seq;
    const std::size_t len = length(rng);
    std::size_t state = first_state(rng);
    for (std::size_t i = 0; i < len; ++i) {
      if (i > 0 && advance(rng)) state = (state + 1) % spec.state_count;
      const int tag = static_cast<int>(state * w.size()) + tag_in_state(rng);
      const int rank = token_dists[static_cast<std::size_t>(tag)](rng);
      seq.tags.push_back(tag);
      seq.tokens.push_back(vocab[static_cast<std::size_t>(tag)][static_cast<std::size_t>(rank)]);
    }
    corpus.sequences.push_back(std::move(seq));
  }
  return corpus;
}

std::vector<std::vector<int>> padded_tokens(const SyntheticCorpus& corpus,
                                            std::size_t length) {
  std::vector<std::vector<int>> out;
  out.reserve(corpus.sequences.size());
  for (const auto& s : corpus.sequences) {
    if (s.tokens.size() > length) {
      throw LengthError("sequence of length " + std::to_string(s.tokens.size()) +
                        " exceeds pad length " + std::to_string(length));
    }
    auto t = s.tokens;
    t.resize(length, corpus.spec.pad_token);
    out.push_back(std::move(t));
  }
  return out;
}

void write_corpus(const std::filesystem::path& path, const SyntheticCorpus& corpus) {
  ContainerFile file;
  std::vector<std::size_t> lengths;
  for (const auto& s : corpus.sequences) {
    lengths.push_back(s.tokens.size());
    file.labels.insert(file.labels.end(), s.tokens.begin(), s.tokens.end());
  }
  for (const auto& s : corpus.sequences) {
    file.labels.insert(file.labels.end(), s.tags.begin(), s.tags.end());
  }
  file.header = {{"format", "crossmodal-corpus"},
                 {"format_version", 1},
                 {"spec", corpus.spec},
                 {"seed", corpus.seed},
                 {"lengths", lengths}};
  write_container(path, std::move(file));
}

SyntheticCorpus read_corpus(const std::filesystem::path& path) {
  auto file = read_container(path);
  if (file.header.value("format", std::string{}) != "crossmodal-corpus") {
    throw IoError(path.string() + " is not a corpus file");
  }
  SyntheticCorpus corpus;
  corpus.spec = file.header.at("spec").get<CorpusSpec>();
  corpus.seed = file.header.at("seed").get<std::uint64_t>();
  const auto lengths = file.header.at("lengths").get<std::vector<std::size_t>>();
  std::size_t total = 0;
  for (auto l : lengths) total += l;
  if (file.labels.size() != 2 * total) throw IoError("label block size mismatch in " + path.string());
  corpus.token_tag.assign(corpus.spec.vocab_size, -1);
  const auto vocab = tag_vocabulary(corpus.spec);
  for (std::size_t t = 0; t < vocab.size(); ++t)
    for (int id : vocab[t]) corpus.token_tag[static_cast<std::size_t>(id)] = static_cast<int>(t);
  std::size_t offset = 0;
  for (auto l : lengths) {
    TaggedSequence s;
    s.tokens.assign(file.labels.begin() + offset, file.labels.begin() + offset + l);
    s.tags.assign(file.labels.begin() + total + offset,
                  file.labels.begin() + total + offset + l);
    offset += l;
    corpus.sequences.push_back(std::move(s));
  }
  return corpus;
}

std::vector<float> pretrain_on_corpus(TransformerModel& model,
                                      const SyntheticCorpus& corpus,
                                      const PretrainSchedule& schedule) {
  if (schedule.batch_size == 0) throw ConfigError("batch_size must be positive");
  const auto padded = padded_tokens(corpus, schedule.pad_length);
  std::vector<Tensor> params;
  for (const auto& p : model.parameters()) params.push_back(p.tensor);
  Optimizer opt(schedule.optimizer, params);
  PretrainSettings settings;
  settings.objective = native_objective(model.config().arch);
  settings.pad_token = corpus.spec.pad_token;
  settings.mask_token = corpus.spec.mask_token;

  std::mt19937_64 rng(schedule.seed);
  std::uniform_int_distribution<std::size_t> pick(0, padded.size() - 1);
  std::vector<float> trace;
  trace.reserve(schedule.steps);
  std::vector<std::vector<int>> batch(schedule.batch_size);
  for (std::size_t step = 0; step < schedule.steps; ++step) {
    for (auto& b : batch) b = padded[pick(rng)];
    opt.zero_grad();
    trace.push_back(pretrain_step(model, batch, settings, rng));
    for (auto& p : params) p.mutable_grad();
    opt.step();
  }
  model.set_pretrained(true);
  return trace;
}

float evaluate_pretrain_loss(const TransformerModel& model,
                             const SyntheticCorpus& corpus, std::uint64_t seed,
                             std::size_t pad_length) {
  PretrainSettings settings;
  settings.objective = native_objective(model.config().arch);
  settings.pad_token = corpus.spec.pad_token;
  settings.mask_token = corpus.spec.mask_token;
  const auto padded = padded_tokens(corpus, pad_length);
  std::mt19937_64 rng(seed);
  NoGradGuard no_grad;
  return pretrain_step(model, padded, settings, rng);
}

std::string model_id(const TransformerModel& model) {
  std::uint64_t h = kFnvOffset;
  const std::string cfg = nlohmann::json(model.config()).dump();
  h = fnv1a(h, cfg.data(), cfg.size());
  for (const auto& p : model.parameters()) {
    h = fnv1a(h, p.tensor.data().data(), p.tensor.numel() * sizeof(float));
  }
  std::ostringstream ss;
  ss << to_string(model.config().arch) << "-d" << model.config().d_model << "-l"
     << model.config().n_layers << "-" << std::hex << h;
  return ss.str();
}

ProxyEmbeddingSet build_proxy_set(const TransformerModel& model,
                                  const SyntheticCorpus& corpus,
                                  std::size_t pad_length) {
  if (model.config().max_positions < pad_length) {
    throw LengthError("model max_positions " + std::to_string(model.config().max_positions) +
                      " below proxy pad length " + std::to_string(pad_length));
  }
  const auto padded = padded_tokens(corpus, pad_length);
  const std::size_t d = model.config().d_model;
  const auto mask = AttentionMaskPolicy::native(model.config().arch);
  std::vector<float> features;
  features.reserve(corpus.token_count() * d);
  ProxyEmbeddingSet set;
  set.tag_count = corpus.spec.tag_count;
  NoGradGuard no_grad;
  for (std::size_t s = 0; s < padded.size(); ++s) {
    const Tensor hidden = model.forward_tokens(padded[s], mask);
    const std::size_t len = corpus.sequences[s].tokens.size();
    const auto h = hidden.data();
    features.insert(features.end(), h.begin(), h.begin() + static_cast<std::ptrdiff_t>(len * d));
    set.labels.insert(set.labels.end(), corpus.sequences[s].tags.begin(),
                      corpus.sequences[s].tags.end());
  }
  set.features = Tensor::from_data({set.labels.size(), d}, std::move(features));
  set.source_model_id = model_id(model);
  set.provenance = {{"source_pretrained", model.pretrained()},
                    {"layer", "last_hidden"},
                    {"pad_positions", "excluded"},
                    {"pad_length", pad_length},
                    {"mask", model.config().arch == Architecture::DecoderOnly ? "causal" : "bidirectional"},
                    {"corpus_seed", corpus.seed},
                    {"sequences", corpus.sequences.size()}};
  if (!model.pretrained()) {
    set.provenance["warning"] = "source model is not pretrained";
  }
  return set;
}

void write_proxy_set(const std::filesystem::path& path, const ProxyEmbeddingSet& set) {
  ContainerFile file;
  file.header = {{"format", "crossmodal-proxy"},
                 {"format_version", 1},
                 {"rows", set.features.defined() ? set.features.dim(0) : 0},
                 {"d_model", set.features.defined() ? set.features.dim(1) : 0},
                 {"tag_count", set.tag_count},
                 {"source_model_id", set.source_model_id},
                 {"provenance", set.provenance}};
  if (set.features.defined()) {
    file.payload.assign(set.features.data().begin(), set.features.data().end());
  }
  file.labels.assign(set.labels.begin(), set.labels.end());
  write_container(path, std::move(file));
}

ProxyEmbeddingSet read_proxy_set(const std::filesystem::path& path) {
  auto file = read_container(path);
  const auto& h = file.header;
  if (h.value("format", std::string{}) != "crossmodal-proxy") {
    throw IoError(path.string() + " is not a proxy set file");
  }
  ProxyEmbeddingSet set;
  const auto rows = h.at("rows").get<std::size_t>();
  const auto d = h.at("d_model").get<std::size_t>();
  if (file.payload.size() != rows * d || file.labels.size() != rows) {
    throw IoError("proxy set size mismatch in " + path.string());
  }
  set.features = Tensor::from_data({rows, d}, std::move(file.payload));
  set.labels.assign(file.labels.begin(), file.labels.end());
  set.tag_count = h.at("tag_count").get<std::size_t>();
  set.source_model_id = h.at("source_model_id").get<std::string>();
  set.provenance = h.at("provenance");
  return set;
}

}  // namespace crossmodal
