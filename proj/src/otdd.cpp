#include "crossmodal/otdd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "crossmodal/errors.hpp"
#include "crossmodal/ops.hpp"

namespace crossmodal {

namespace {

double log_sum_exp(const std::vector<double>& v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

double choose_epsilon(std::span<const double> cost, const SinkhornParams& params) {
  if (params.epsilon > 0.0) return params.epsilon;
  if (!(params.epsilon_relative > 0.0)) throw ConfigError("epsilon_relative must be positive");
  std::vector<double> sorted(cost.begin(), cost.end());
  auto mid = sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2);
  std::nth_element(sorted.begin(), mid, sorted.end());
  double scale = *mid;
  if (!(scale > 0.0)) {
    double total = 0.0;
    for (double c : cost) total += c;
    scale = total / static_cast<double>(cost.size());
  }
  if (!(scale > 0.0)) scale = 1.0;
  return params.epsilon_relative * scale;
}

void fill_coupling(std::span<const double> cost, const std::vector<double>& f,
                   const std::vector<double>& g, double eps, std::size_t n,
                   std::size_t m, std::vector<double>& out) {
  out.resize(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      out[i * m + j] = std::exp((f[i] + g[j] - cost[i * m + j]) / eps);
}

double marginal_violation(const std::vector<double>& p, std::size_t n, std::size_t m) {
  double v = 0.0;
  const double a = 1.0 / static_cast<double>(n), b = 1.0 / static_cast<double>(m);
  std::vector<double> col(m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      row += p[i * m + j];
      col[j] += p[i * m + j];
    }
    v += std::abs(row - a);
  }
  for (double c : col) v += std::abs(c - b);
  return v;
}

Tensor one_hot(std::span<const int> labels, std::size_t k) {
  std::vector<float> v(labels.size() * k, 0.0f);
  for (std::size_t i = 0; i < labels.size(); ++i)
    v[i * k + static_cast<std::size_t>(labels[i])] = 1.0f;
  return Tensor::from_data({labels.size(), k}, std::move(v));
}

}  // namespace

void LabeledPointCloud::validate() const {
  if (!points.defined() || points.rank() != 2) {
    throw DimensionError("point cloud must be a [N x d] tensor");
  }
  if (labels.size() != points.dim(0)) {
    throw DimensionError("point cloud has " + std::to_string(points.dim(0)) +
                         " points but " + std::to_string(labels.size()) + " labels");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= class_count) {
      throw DomainError("label " + std::to_string(l) + " outside [0, " +
                        std::to_string(class_count) + ")");
    }
  }
}

ClassMoments class_moments(const LabeledPointCloud& cloud) {
  cloud.validate();
  const std::size_t n = cloud.points.dim(0), k = cloud.class_count;
  ClassMoments m;
  m.counts.assign(k, 0);
  for (int l : cloud.labels) m.counts[static_cast<std::size_t>(l)]++;
  m.degenerate.assign(k, false);
  for (std::size_t c = 0; c < k; ++c) m.degenerate[c] = m.counts[c] == 1;

  Tensor membership = one_hot(cloud.labels, k);  // [N x K]
  std::vector<float> avg(k * n, 0.0f);           // [K x N]
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::size_t>(cloud.labels[i]);
    avg[c * n + i] = 1.0f / static_cast<float>(m.counts[c]);
  }
  Tensor averaging = Tensor::from_data({k, n}, std::move(avg));
  m.means = matmul(averaging, cloud.points);
  Tensor centered = sub(cloud.points, matmul(membership, m.means));
  m.variances = matmul(averaging, square(centered));
  return m;
}

double gaussian_w2_sq(std::span<const double> m1, std::span<const double> v1,
                      std::span<const double> m2, std::span<const double> v2) {
  if (m1.size() != m2.size() || v1.size() != v2.size() || m1.size() != v1.size()) {
    throw DimensionError("gaussian_w2_sq: moment lengths differ");
  }
  double s = 0.0;
  for (std::size_t j = 0; j < m1.size(); ++j) {
    if (v1[j] < 0.0 || v2[j] < 0.0) throw DomainError("gaussian_w2_sq: negative variance");
    const double dm = m1[j] - m2[j];
    const double ds = std::sqrt(v1[j]) - std::sqrt(v2[j]);
    s += dm * dm + ds * ds;
  }
  return s;
}

Tensor label_distance_matrix(const ClassMoments& a, const ClassMoments& b) {
  Tensor sa = sqrt_floor(a.variances, kVarianceFloor);
  Tensor sb = sqrt_floor(b.variances, kVarianceFloor);
  return add(pairwise_sqdist(a.means, b.means), pairwise_sqdist(sa, sb));
}

Tensor joint_cost_matrix(const LabeledPointCloud& a, const LabeledPointCloud& b,
                         const Tensor& label_dist) {
  a.validate();
  b.validate();
  if (label_dist.rank() != 2 || label_dist.dim(0) != a.class_count ||
      label_dist.dim(1) != b.class_count) {
    throw DimensionError("label distance table is " + shape_string(label_dist.shape()) +
                         ", expected [" + std::to_string(a.class_count) + " x " +
                         std::to_string(b.class_count) + "]");
  }
  for (float v : label_dist.data()) {
    if (v < 0.0f) throw DomainError("label distances must be non-negative");
  }
  return add(pairwise_sqdist(a.points, b.points),
             gather_pairs(label_dist, a.labels, b.labels));
}

SinkhornResult sinkhorn(std::span<const double> cost, std::size_t n, std::size_t m,
                        const SinkhornParams& params) {
  if (n == 0 || m == 0 || cost.size() != n * m) {
    throw DimensionError("sinkhorn: cost has " + std::to_string(cost.size()) +
                         " entries for " + std::to_string(n) + " x " + std::to_string(m));
  }
  for (double c : cost) {
    if (!std::isfinite(c)) throw DomainError("sinkhorn: non-finite cost");
  }
  SinkhornResult r;
  r.rows = n;
  r.cols = m;
  r.epsilon = choose_epsilon(cost, params);
  const double eps = r.epsilon;
  const double log_a = -std::log(static_cast<double>(n));
  const double log_b = -std::log(static_cast<double>(m));

  std::vector<double> f(n, 0.0), g(m, 0.0), best_f, best_g;
  std::vector<double> row(m), col(n), coupling;
  const auto sweep = [&](double e) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) row[j] = (g[j] - cost[i * m + j]) / e;
      f[i] = e * (log_a - log_sum_exp(row));
    }
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t i = 0; i < n; ++i) col[i] = (f[i] - cost[i * m + j]) / e;
      g[j] = e * (log_b - log_sum_exp(col));
    }
  };
  // Epsilon scaling: warm-start the potentials from coarser problems.
  const double cmax = *std::max_element(cost.begin(), cost.end());
  for (double e = cmax; e > 2.0 * eps; e *= 0.5) {
    for (int k = 0; k < 5; ++k) sweep(e);
  }
  double best = std::numeric_limits<double>::infinity();
  int best_iter = 0;
  const int max_iters = std::max(params.max_iters, 1);
  for (int it = 1; it <= max_iters; ++it) {
    sweep(eps);
    if (it % 5 != 0 && it != max_iters && it > 1) continue;
    fill_coupling(cost, f, g, eps, n, m, coupling);
    const double violation = marginal_violation(coupling, n, m);
    if (violation < best) {
      best = violation;
      best_f = f;
      best_g = g;
      best_iter = it;
    }
    if (violation < params.tolerance) break;
  }
  fill_coupling(cost, best_f, best_g, eps, n, m, r.coupling);
  r.marginal_violation = best;
  r.iterations = best_iter;
  r.converged = best < params.tolerance;
  double total = 0.0;
  for (std::size_t i = 0; i < n * m; ++i) total += r.coupling[i] * cost[i];
  r.transport_cost = total;
  return r;
}

SinkhornResult sinkhorn(const Tensor& cost, const SinkhornParams& params) {
  if (cost.rank() != 2) throw DimensionError("sinkhorn: cost must be 2-D");
  std::vector<double> c(cost.data().begin(), cost.data().end());
  return sinkhorn(c, cost.dim(0), cost.dim(1), params);
}

std::vector<double> transport_cost_gradient(std::span<const double> cost,
                                            const SinkhornResult& plan) {
  const std::size_t n = plan.rows, m = plan.cols;
  const double eps = plan.epsilon;
  const auto& p = plan.coupling;
  // Adjoint system H w = [u; v] with H = [[diag(r), P], [P^T, diag(c)]].
  // H has the null vector [1; -1]; fixing the last column potential removes it.
  const std::size_t k = n + m - 1;
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k),
                                            static_cast<Eigen::Index>(k));
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(k));
  std::vector<double> col_sum(m, 0.0), v(m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double row_sum = 0.0, u = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double pij = p[i * m + j];
      const double cp = cost[i * m + j] * pij / eps;
      row_sum += pij;
      col_sum[j] += pij;
      u += cp;
      v[j] += cp;
      if (j + 1 < m) {
        const auto a = static_cast<Eigen::Index>(i), b = static_cast<Eigen::Index>(n + j);
        h(a, b) = pij;
        h(b, a) = pij;
      }
    }
    h(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = row_sum;
    rhs(static_cast<Eigen::Index>(i)) = u;
  }
  for (std::size_t j = 0; j + 1 < m; ++j) {
    const auto b = static_cast<Eigen::Index>(n + j);
    h(b, b) = col_sum[j];
    rhs(b) = v[j];
  }
  const Eigen::VectorXd w = h.ldlt().solve(rhs);
  std::vector<double> grad(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const double wa = w(static_cast<Eigen::Index>(i));
    for (std::size_t j = 0; j < m; ++j) {
      const double wb = j + 1 < m ? w(static_cast<Eigen::Index>(n + j)) : 0.0;
      grad[i * m + j] = p[i * m + j] * (1.0 - cost[i * m + j] / eps + wa + wb);
    }
  }
  return grad;
}

Tensor sinkhorn_transport_cost(const Tensor& cost, const SinkhornParams& params,
                               SinkhornResult* info) {
  if (cost.rank() != 2) throw DimensionError("sinkhorn: cost must be 2-D");
  std::vector<double> c(cost.data().begin(), cost.data().end());
  auto plan = sinkhorn(c, cost.dim(0), cost.dim(1), params);
  const float value = static_cast<float>(plan.transport_cost);
  Tensor out;
  if (grad_enabled() && cost.requires_grad()) {
    auto grad = transport_cost_gradient(c, plan);
    out = Tensor::from_op({1}, {value}, {cost},
                          [cost, grad = std::move(grad)](std::span<const float> g) mutable {
                            std::vector<float> gc(grad.size());
                            for (std::size_t i = 0; i < grad.size(); ++i)
                              gc[i] = static_cast<float>(grad[i] * g[0]);
                            cost.accumulate_grad(gc);
                          });
  } else {
    out = Tensor::scalar(value);
  }
  if (info) *info = std::move(plan);
  return out;
}

OtddReference::OtddReference(LabeledPointCloud proxy) : proxy_(std::move(proxy)) {
  NoGradGuard no_grad;
  proxy_.points = proxy_.points.detach();
  moments_ = class_moments(proxy_);
}

OtddResult otdd_distance(const LabeledPointCloud& target, const OtddReference& proxy,
                         const SinkhornParams& params) {
  target.validate();
  if (target.points.dim(0) == 0 || proxy.cloud().points.dim(0) == 0) {
    throw DimensionError("otdd_distance: empty point cloud");
  }
  if (target.points.dim(1) != proxy.cloud().points.dim(1)) {
    throw DimensionError("otdd_distance: target dimension " +
                         std::to_string(target.points.dim(1)) + " vs proxy " +
                         std::to_string(proxy.cloud().points.dim(1)));
  }
  OtddResult result;
  const ClassMoments moments = class_moments(target);
  for (std::size_t c = 0; c < moments.degenerate.size(); ++c) {
    if (moments.degenerate[c]) result.degenerate_classes.push_back(static_cast<int>(c));
  }
  Tensor label_dist = label_distance_matrix(moments, proxy.moments());
  Tensor cost = joint_cost_matrix(target, proxy.cloud(), label_dist);
  result.distance = sinkhorn_transport_cost(cost, params, &result.plan);
  return result;
}

OtddResult otdd_distance(const LabeledPointCloud& target, const LabeledPointCloud& proxy,
                         const SinkhornParams& params) {
  return otdd_distance(target, OtddReference(proxy), params);
}

}  // namespace crossmodal
