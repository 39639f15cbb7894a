#include "crossmodal/metrics.hpp"

#include <cmath>

#include "crossmodal/errors.hpp"

namespace crossmodal {

double nrmse(std::span<const float> pred, std::span<const float> truth) {
  if (pred.size() != truth.size()) {
    throw DimensionError("nrmse: " + std::to_string(pred.size()) + " vs " +
                         std::to_string(truth.size()) + " values");
  }
  double err = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - truth[i];
    err += d * d;
    norm += static_cast<double>(truth[i]) * truth[i];
  }
  if (!(norm > 0.0)) throw MetricError("nrmse undefined for a zero-norm truth");
  return std::sqrt(err) / std::sqrt(norm);
}

double nrmse(const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape()) {
    throw DimensionError("nrmse: shape " + shape_string(pred.shape()) + " vs " +
                         shape_string(truth.shape()));
  }
  return nrmse(pred.data(), truth.data());
}

std::pair<double, double> spikiness_diagnostic(std::span<const float> pred) {
  if (pred.size() % 2 != 0) {
    throw LengthError("spikiness_diagnostic needs an even length, got " +
                      std::to_string(pred.size()));
  }
  const std::size_t half = pred.size() / 2;
  double first = 0.0, second = 0.0;
  for (std::size_t i = 0; i + 1 < half; ++i)
    first += std::abs(static_cast<double>(pred[i + 1]) - pred[i]);
  for (std::size_t i = half; i + 1 < pred.size(); ++i)
    second += std::abs(static_cast<double>(pred[i + 1]) - pred[i]);
  return {first, second};
}

std::pair<double, double> spikiness_diagnostic(const Tensor& pred) {
  return spikiness_diagnostic(pred.data());
}

}  // namespace crossmodal
