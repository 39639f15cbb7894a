#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "crossmodal/optim.hpp"
#include "crossmodal/tensor.hpp"
#include "crossmodal/transformer.hpp"
#include "json.hpp"

namespace crossmodal {

struct CorpusSpec {
  std::size_t vocab_size = 64;
  std::size_t tag_count = 9;
  int pad_token = 0;
  int mask_token = 1;
  std::size_t min_length = 8;
  std::size_t max_length = 31;
  std::size_t state_count = 3;
  double advance_probability = 0.8;  // state s -> s+1 (mod states), else stay
  double zipf_exponent = 1.5;

  void validate() const;
};

void to_json(nlohmann::json& j, const CorpusSpec& s);
void from_json(const nlohmann::json& j, CorpusSpec& s);

struct TaggedSequence {
  std::vector<int> tokens;
  std::vector<int> tags;
};

// Sample from a seeded tagged grammar. A hidden Markov chain over
// `state_count` states emits a tag from the state's own tag group, and the tag
// emits a token from its own Zipfian vocabulary slice, so every token id has
// exactly one tag.
struct SyntheticCorpus {
  CorpusSpec spec;
  std::uint64_t seed = 0;
  std::vector<int> token_tag;  // per token id; -1 for reserved ids
  std::vector<TaggedSequence> sequences;

  std::size_t token_count() const;
};

SyntheticCorpus gen_corpus(std::uint64_t seed, std::size_t n_sequences,
                           const CorpusSpec& spec = {});

// Tag id -> token ids owned by that tag.
std::vector<std::vector<int>> tag_vocabulary(const CorpusSpec& spec);

// Marginal tag distribution of the grammar (the chain starts stationary).
std::vector<double> grammar_tag_distribution(const CorpusSpec& spec);

// Token sequences right-padded with pad_token to `length`.
std::vector<std::vector<int>> padded_tokens(const SyntheticCorpus& corpus,
                                            std::size_t length = 32);

void write_corpus(const std::filesystem::path& path, const SyntheticCorpus& corpus);
SyntheticCorpus read_corpus(const std::filesystem::path& path);

struct PretrainSchedule {
  std::size_t steps = 200;
  std::size_t batch_size = 16;
  std::size_t pad_length = 32;
  OptimizerConfig optimizer{OptimizerKind::AdamW, 1e-3f};
  std::uint64_t seed = 0;
};

// Pretrains with the architecture's native objective on padded corpus batches.
// Returns the loss of every step.
std::vector<float> pretrain_on_corpus(TransformerModel& model,
                                      const SyntheticCorpus& corpus,
                                      const PretrainSchedule& schedule);

// Mean native-objective loss over `sequences` without touching gradients.
// MLM masks are drawn from `seed`, so repeated calls score identical inputs.
float evaluate_pretrain_loss(const TransformerModel& model,
                             const SyntheticCorpus& corpus, std::uint64_t seed,
                             std::size_t pad_length = 32);

struct ProxyEmbeddingSet {
  Tensor features;  // [N_tokens x d_model]
  std::vector<int> labels;
  std::size_t tag_count = 0;
  std::string source_model_id;
  nlohmann::json provenance;
};

// Pads each sequence to `pad_length`, runs the model with its native mask and
// keeps last-hidden-layer vectors at non-pad positions, paired with tags.
// An unpretrained source model is allowed and recorded in provenance.
ProxyEmbeddingSet build_proxy_set(const TransformerModel& model,
                                  const SyntheticCorpus& corpus,
                                  std::size_t pad_length = 32);

// Stable identifier derived from the model config and weights.
std::string model_id(const TransformerModel& model);

void write_proxy_set(const std::filesystem::path& path, const ProxyEmbeddingSet& set);
ProxyEmbeddingSet read_proxy_set(const std::filesystem::path& path);

}  // namespace crossmodal
