#pragma once

#include <span>
#include <utility>

#include "crossmodal/tensor.hpp"

namespace crossmodal {

// ||pred - truth||_2 / ||truth||_2, accumulated in double. Throws
// DimensionError on a shape mismatch and MetricError on a zero-norm truth.
double nrmse(const Tensor& pred, const Tensor& truth);
double nrmse(std::span<const float> pred, std::span<const float> truth);

// Total variation sum |p[i+1] - p[i]| within each half of an even-length
// signal. The step across the midpoint belongs to neither half.
std::pair<double, double> spikiness_diagnostic(std::span<const float> pred);
std::pair<double, double> spikiness_diagnostic(const Tensor& pred);

}  // namespace crossmodal
