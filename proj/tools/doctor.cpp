#include "doctor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "crossmodal/bidir.hpp"
#include "crossmodal/errors.hpp"
#include "crossmodal/metrics.hpp"
#include "crossmodal/ops.hpp"
#include "crossmodal/otdd.hpp"
#include "crossmodal/pde.hpp"
#include "crossmodal/transformer.hpp"

namespace crossmodal::tools {

namespace {

struct Check {
  std::string name;
  std::function<std::string(std::mt19937_64&)> run;  // empty string: pass
};

bool same_bits(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

ModelConfig small_model(Architecture arch, std::size_t positions, std::uint64_t seed) {
  ModelConfig c;
  c.arch = arch;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_layers = 2;
  c.d_ff = 64;
  c.max_positions = positions;
  c.seed = seed;
  return c;
}

Tensor normal_tensor(Shape shape, std::mt19937_64& rng, bool grad = false) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor::from_data(std::move(shape), std::move(v), grad);
}

std::string gradient_check(std::mt19937_64& rng) {
  auto x = normal_tensor({4, 6}, rng, true);
  auto w = normal_tensor({6, 5}, rng, true);
  auto g = Tensor::full({5}, 1.0f, true), b = Tensor::zeros({5}, true);
  auto f = [&] { return mean(square(gelu(layer_norm(matmul(x, w), g, b)))); };
  f().backward();
  std::size_t bad = 0, total = 0;
  for (Tensor* t : {&x, &w}) {
    const std::vector<float> grad(t->grad().begin(), t->grad().end());
    for (std::size_t i = 0; i < t->numel(); ++i) {
      NoGradGuard no_grad;
      const float h = 1e-2f, orig = t->data()[i];
      t->mutable_data()[i] = orig + h;
      const double up = f().item();
      t->mutable_data()[i] = orig - h;
      const double down = f().item();
      t->mutable_data()[i] = orig;
      const double fd = (up - down) / (2.0 * h);
      ++total;
      if (std::abs(fd - grad[i]) > 2e-2 * std::max(1e-2, std::abs(fd))) ++bad;
    }
  }
  return bad * 20 <= total ? "" : std::to_string(bad) + "/" + std::to_string(total) +
                                      " coordinates disagree with finite differences";
}

std::string causality(std::mt19937_64& rng) {
  auto model = build_model(small_model(Architecture::DecoderOnly, 32, rng()));
  NoGradGuard no_grad;
  for (int probe = 0; probe < 10; ++probe) {
    auto x = normal_tensor({32, 32}, rng);
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, 30)(rng);
    auto y = x.clone();
    for (std::size_t r = i + 1; r < 32; ++r)
      for (std::size_t c = 0; c < 32; ++c) y.mutable_data()[r * 32 + c] += 1.0f;
    auto hx = model.forward_hidden(x, AttentionMaskPolicy::causal());
    auto hy = model.forward_hidden(y, AttentionMaskPolicy::causal());
    if (!same_bits(hx.data().subspan(0, (i + 1) * 32), hy.data().subspan(0, (i + 1) * 32)))
      return "future rows changed position " + std::to_string(i);
  }
  return "";
}

std::string advection_truth(std::mt19937_64& rng) {
  GridSpec grid = default_grid(PdeFamily::Advection, 64);
  const std::uint64_t seed = rng();
  auto inst = gen_advection(grid, 0.4, seed);
  std::mt19937_64 series_rng(seed);
  auto u0 = random_fourier_series(series_rng);
  const auto x = grid_points(PdeFamily::Advection, 64);
  double worst = 0.0;
  for (std::size_t i = 0; i < 64; ++i) {
    const double exact = u0(x[i] - 0.4 * (grid.t_out - grid.t_in));
    worst = std::max(worst, std::abs(exact - inst.target.data()[i]));
  }
  return worst < 1e-6 ? "" : "target deviates from translation by " + std::to_string(worst);
}

std::string sinkhorn_oracle(std::mt19937_64& rng) {
  const std::size_t n = 4;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> cost(n * n);
  for (auto& c : cost) c = u(rng);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = 1e300;
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += cost[i * n + perm[i]];
    best = std::min(best, s / static_cast<double>(n));
  } while (std::next_permutation(perm.begin(), perm.end()));
  SinkhornParams p;
  p.epsilon_relative = 0.005;
  p.max_iters = 20000;
  auto r = sinkhorn(cost, n, n, p);
  const double slack = *std::max_element(cost.begin(), cost.end()) * r.marginal_violation;
  if (r.transport_cost < best - slack - 1e-9 || r.transport_cost > 1.02 * best + slack)
    return "entropic cost " + std::to_string(r.transport_cost) + " vs exact " + std::to_string(best);
  return "";
}

std::string w2_closed_form(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 2.0);
  std::vector<double> m1(3), v1(3), m2(3), v2(3);
  for (std::size_t i = 0; i < 3; ++i) {
    m1[i] = u(rng);
    v1[i] = u(rng);
    m2[i] = u(rng);
    v2[i] = u(rng);
  }
  double expected = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    // Trace term of the Bures metric for commuting covariances.
    expected += (m1[i] - m2[i]) * (m1[i] - m2[i]) + v1[i] + v2[i] - 2.0 * std::sqrt(v1[i] * v2[i]);
  }
  const double got = gaussian_w2_sq(m1, v1, m2, v2);
  return std::abs(got - expected) < 1e-10 ? "" : "closed form differs by " + std::to_string(got - expected);
}

std::string second_half_identity(std::mt19937_64& rng) {
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t L = 2 * std::uniform_int_distribution<std::size_t>(1, 32)(rng);
    auto f = normal_tensor({L, 1}, rng), r = normal_tensor({L, 1}, rng);
    auto out = combine_halves(f, r);
    if (!same_bits(out.data().subspan(L / 2), f.data().subspan(L / 2)))
      return "second half differs at L=" + std::to_string(L);
  }
  return "";
}

std::string doubling_context(std::mt19937_64& rng) {
  const std::size_t L = 8;
  auto pipeline = make_pipeline(build_model(small_model(Architecture::DecoderOnly, 2 * L, rng())),
                                1, 1, rng());
  NoGradGuard no_grad;
  auto x = normal_tensor({L, 1}, rng);
  auto base = sequence_doubling_forward(pipeline, x);
  for (std::size_t j = 0; j < L; ++j) {
    auto y = x.clone();
    y.mutable_data()[j] += 1.0f;
    if (sequence_doubling_forward(pipeline, y).data()[0] == base.data()[0])
      return "output 0 ignores input " + std::to_string(j);
  }
  return "";
}

std::string metric_properties(std::mt19937_64& rng) {
  auto truth = normal_tensor({16, 1}, rng);
  if (nrmse(truth, truth) != 0.0) return "nrmse(x, x) != 0";
  auto doubled = scale(truth, 2.0f);
  if (std::abs(nrmse(doubled, truth) - 1.0) > 1e-12) return "nrmse(2x, x) != 1";
  try {
    nrmse(truth, Tensor::zeros({16, 1}));
    return "zero-norm truth accepted";
  } catch (const MetricError&) {
  }
  return "";
}

}  // namespace

int run_doctor(std::uint64_t seed, std::ostream& out) {
  const std::vector<Check> checks = {
      {"autodiff matches finite differences", gradient_check},
      {"causal mask hides future positions", causality},
      {"advection target is the analytic translation", advection_truth},
      {"sinkhorn within 2% of the permutation optimum", sinkhorn_oracle},
      {"diagonal gaussian W2 closed form", w2_closed_form},
      {"parallel flipping keeps the forward second half", second_half_identity},
      {"sequence doubling gives position 0 full context", doubling_context},
      {"nrmse identities", metric_properties},
  };
  int failed = 0;
  std::mt19937_64 rng(seed);
  for (const auto& check : checks) {
    std::string problem;
    try {
      problem = check.run(rng);
    } catch (const std::exception& e) {
      problem = std::string("threw: ") + e.what();
    }
    out << (problem.empty() ? "ok    " : "FAIL  ") << check.name;
    if (!problem.empty()) out << ": " << problem;
    out << "\n";
    failed += problem.empty() ? 0 : 1;
  }
  out << (failed == 0 ? "all checks passed" : std::to_string(failed) + " check(s) failed") << "\n";
  return failed;
}

}  // namespace crossmodal::tools
