#include "crossmodal/bidir.hpp"

#include <exception>
#include <limits>
#include <numeric>
#include <thread>

#include "crossmodal/errors.hpp"
#include "crossmodal/metrics.hpp"
#include "crossmodal/ops.hpp"

namespace crossmodal {

namespace {

constexpr std::uint64_t kReversedSalt = 0x9e3779b97f4a7c15ULL;

Tensor flip_frame(const Tensor& t) {
  auto d = t.data();
  return Tensor::from_data(t.shape(), {d.rbegin(), d.rend()});
}

}  // namespace

Tensor flip(const Tensor& x) { return flip_rows(x); }

Tensor combine_halves(const Tensor& p_forward, const Tensor& p_reversed_domain) {
  if (p_forward.shape() != p_reversed_domain.shape()) {
    throw DimensionError("combine_halves: shape " + shape_string(p_forward.shape()) +
                         " vs " + shape_string(p_reversed_domain.shape()));
  }
  const std::size_t L = p_forward.rows();
  if (L % 2 != 0) {
    throw LengthError("combine_halves needs an even length, got " + std::to_string(L));
  }
  const Tensor parts[] = {slice_rows(flip(p_reversed_domain), 0, L / 2),
                          slice_rows(p_forward, L / 2, L)};
  return concat_rows(parts);
}

Tensor predict_flip_pair(const FlipPair& pair, const Tensor& input) {
  Tensor forward = predict_sequence(pair.forward, input);
  Tensor reversed = predict_sequence(pair.reversed, flip(input));
  return combine_halves(forward, reversed);
}

double evaluate_flip_pair(const FlipPair& pair,
                          const std::vector<PdeInstance>& instances) {
  if (instances.empty()) throw ContractError("evaluate_flip_pair needs instances");
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& inst : instances) {
    total += nrmse(predict_flip_pair(pair, instance_input(inst)), instance_target(inst));
  }
  return total / static_cast<double>(instances.size());
}

PdeDataset flip_dataset(const PdeDataset& dataset) {
  PdeDataset out = dataset;
  for (auto* split : {&out.train, &out.test}) {
    for (auto& inst : *split) {
      inst.input = flip_frame(inst.input);
      inst.target = flip_frame(inst.target);
    }
  }
  return out;
}

Tensor sequence_doubling_forward(const Pipeline& pipeline, const Tensor& x,
                                 bool restart_positions) {
  const auto& config = pipeline.model.config();
  const std::size_t L = x.rows();
  if (config.max_positions < 2 * L) {
    throw LengthError("sequence doubling needs max_positions >= " +
                      std::to_string(2 * L) + ", model has " +
                      std::to_string(config.max_positions));
  }
  ForwardOptions options;
  if (restart_positions) {
    std::vector<int> ids(2 * L);
    std::iota(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(L), 0);
    std::iota(ids.begin() + static_cast<std::ptrdiff_t>(L), ids.end(), 0);
    options.position_ids = std::move(ids);
  }
  const Tensor copies[] = {x, x};
  Tensor hidden = pipeline.model.forward_hidden(
      pipeline.embedder(concat_rows(copies)),
      AttentionMaskPolicy::native(config.arch), options);
  return pipeline.predictor(slice_rows(hidden, L, 2 * L));
}

FlipTrainReport parallel_flipping_train(FlipPair& pair, const PdeDataset& dataset,
                                        const ProxyEmbeddingSet* proxy,
                                        const AdaptationConfig& config,
                                        bool parallel) {
  config.validate();
  if (config.method == AdaptationMethod::ORCA && proxy == nullptr) {
    throw ContractError("ORCA needs a proxy set for stage 1");
  }
  AdaptationConfig single = config;
  single.bidir_method = BidirMethod::None;
  AdaptationConfig reversed_config = single;
  reversed_config.seed = config.seed ^ kReversedSalt;
  const PdeDataset flipped = flip_dataset(dataset);
  const FreezePolicy policy = finetune_policy(config.method);

  FlipTrainReport report;
  auto run = [&](Pipeline& pipeline, const PdeDataset& data,
                 const AdaptationConfig& cfg, Stage1Report& s1, TrainReport& tr) {
    if (cfg.method == AdaptationMethod::ORCA)
      s1 = orca_stage1(pipeline, *proxy, data.train, cfg);
    tr = finetune(pipeline, data, policy, cfg);
  };

  if (parallel) {
    std::exception_ptr failure;
    std::thread worker([&] {
      try {
        run(pair.reversed, flipped, reversed_config, report.reversed_stage1,
            report.reversed);
      } catch (...) {
        failure = std::current_exception();
      }
    });
    try {
      run(pair.forward, dataset, single, report.forward_stage1, report.forward);
    } catch (...) {
      worker.join();
      throw;
    }
    worker.join();
    if (failure) std::rethrow_exception(failure);
  } else {
    run(pair.forward, dataset, single, report.forward_stage1, report.forward);
    run(pair.reversed, flipped, reversed_config, report.reversed_stage1,
        report.reversed);
  }

  if (!dataset.test.empty() && !report.forward.diverged && !report.reversed.diverged)
    report.test_nrmse = evaluate_flip_pair(pair, dataset.test);
  else
    report.test_nrmse = std::numeric_limits<double>::quiet_NaN();
  return report;
}

}  // namespace crossmodal
