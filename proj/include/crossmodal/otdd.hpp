#pragma once

#include <span>
#include <vector>

#include "crossmodal/tensor.hpp"

namespace crossmodal {

struct LabeledPointCloud {
  Tensor points;  // [N x d]
  std::vector<int> labels;
  std::size_t class_count = 0;

  void validate() const;
};

// Per-class diagonal Gaussian moments. Rows of absent classes are zero.
struct ClassMoments {
  Tensor means;      // [K x d]
  Tensor variances;  // [K x d], population variance
  std::vector<std::size_t> counts;
  std::vector<bool> degenerate;  // exactly one point: variance falls back to the floor
};

inline constexpr float kVarianceFloor = 1e-6f;

// Differentiable w.r.t. the cloud's points.
ClassMoments class_moments(const LabeledPointCloud& cloud);

// ||m1 - m2||^2 + sum_j (sqrt(v1_j) - sqrt(v2_j))^2. Throws DomainError on a
// negative variance and DimensionError on mismatched lengths.
double gaussian_w2_sq(std::span<const double> m1, std::span<const double> v1,
                      std::span<const double> m2, std::span<const double> v2);

// [Ka x Kb] squared 2-Wasserstein distances between the class Gaussians,
// differentiable through both sets of moments. Variances below
// kVarianceFloor are raised to it.
Tensor label_distance_matrix(const ClassMoments& a, const ClassMoments& b);

// C[i][j] = ||a_i - b_j||^2 + label_dist[a.label_i][b.label_j].
Tensor joint_cost_matrix(const LabeledPointCloud& a, const LabeledPointCloud& b,
                         const Tensor& label_dist);

struct SinkhornParams {
  // Absolute regularization; when <= 0, epsilon_relative * median(cost).
  double epsilon = 0.0;
  double epsilon_relative = 0.05;
  int max_iters = 500;
  double tolerance = 1e-6;  // L1 marginal violation
};

struct SinkhornResult {
  std::vector<double> coupling;  // [N x M] row-major
  std::size_t rows = 0, cols = 0;
  double transport_cost = 0.0;  // sum coupling * cost
  double epsilon = 0.0;
  double marginal_violation = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Log-domain Sinkhorn with uniform marginals. Returns the iterate with the
// smallest marginal violation; `converged` tells whether it met tolerance.
SinkhornResult sinkhorn(std::span<const double> cost, std::size_t rows,
                        std::size_t cols, const SinkhornParams& params);
SinkhornResult sinkhorn(const Tensor& cost, const SinkhornParams& params);

// d<P, C>/dC for the entropic coupling P(C), by implicit differentiation of
// the Sinkhorn fixed point.
std::vector<double> transport_cost_gradient(std::span<const double> cost,
                                            const SinkhornResult& plan);

// Scalar tensor whose value is the Sinkhorn transport cost of `cost` and
// whose gradient is transport_cost_gradient.
Tensor sinkhorn_transport_cost(const Tensor& cost, const SinkhornParams& params,
                               SinkhornResult* info = nullptr);

// A fixed proxy cloud with its class moments computed once.
class OtddReference {
 public:
  explicit OtddReference(LabeledPointCloud proxy);
  const LabeledPointCloud& cloud() const { return proxy_; }
  const ClassMoments& moments() const { return moments_; }

 private:
  LabeledPointCloud proxy_;
  ClassMoments moments_;
};

struct OtddResult {
  Tensor distance;  // scalar, differentiable w.r.t. target points
  SinkhornResult plan;
  std::vector<int> degenerate_classes;
};

OtddResult otdd_distance(const LabeledPointCloud& target,
                         const OtddReference& proxy,
                         const SinkhornParams& params = {});
OtddResult otdd_distance(const LabeledPointCloud& target,
                         const LabeledPointCloud& proxy,
                         const SinkhornParams& params = {});

}  // namespace crossmodal
