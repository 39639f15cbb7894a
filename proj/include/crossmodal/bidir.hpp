#pragma once

#include "crossmodal/adaptation.hpp"
#include "crossmodal/tensor.hpp"

namespace crossmodal {

// Row i -> row L-1-i.
Tensor flip(const Tensor& x);

// flip(p_reversed_domain) for the first half, p_forward for the second.
// Throws LengthError for odd L and DimensionError on a shape mismatch.
Tensor combine_halves(const Tensor& p_forward, const Tensor& p_reversed_domain);

// Two pipelines with the same config and separate parameters; `reversed`
// sees every sequence back to front.
struct FlipPair {
  Pipeline forward;
  Pipeline reversed;
};

Tensor predict_flip_pair(const FlipPair& pair, const Tensor& input);

// Mean per-instance nRMSE of predict_flip_pair over `instances`.
double evaluate_flip_pair(const FlipPair& pair,
                          const std::vector<PdeInstance>& instances);

// Dataset with every input and target reversed in space.
PdeDataset flip_dataset(const PdeDataset& dataset);

// Feeds concat(x, x) as 2L tokens and predicts from hidden rows L..2L-1.
// Positions run 0..2L-1, or 0..L-1 twice with `restart_positions`.
// Throws LengthError when max_positions < 2L.
Tensor sequence_doubling_forward(const Pipeline& pipeline, const Tensor& x,
                                 bool restart_positions = false);

struct FlipTrainReport {
  Stage1Report forward_stage1, reversed_stage1;
  TrainReport forward, reversed;
  double test_nrmse = 0.0;  // of the combined predictions
};

// Adapts both pipelines (stage 1 under ORCA, then fine-tuning) on the original
// and flipped data. The two runs execute on separate threads when `parallel`.
FlipTrainReport parallel_flipping_train(FlipPair& pair, const PdeDataset& dataset,
                                        const ProxyEmbeddingSet* proxy,
                                        const AdaptationConfig& config,
                                        bool parallel = true);

}  // namespace crossmodal
