#include <cmath>
#include <random>

#include "crossmodal/errors.hpp"
#include "crossmodal/ops.hpp"
#include "crossmodal/optim.hpp"
#include "doctest.h"
#include "support/reference_graph.hpp"

using namespace crossmodal;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool grad = false) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor::from_data(std::move(shape), std::move(v), grad);
}

}  // namespace

TEST_CASE("tensor construction validates shape") {
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor::zeros({0, 3}), DimensionError);
  auto t = Tensor::zeros({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.is_finite());
  t.mutable_data()[4] = std::nanf("");
  CHECK_FALSE(t.is_finite());
}

TEST_CASE("matmul") {
  SUBCASE("identity") {
    auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    auto m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    auto c = matmul(eye, m);
    CHECK(std::vector<float>(c.data().begin(), c.data().end()) ==
          std::vector<float>{1, 2, 3, 4});
  }
  SUBCASE("projector") {
    auto p = Tensor::from_data({2, 2}, {1, 0, 0, 0});
    auto m = Tensor::from_data({2, 2}, {5, 6, 7, 8});
    auto c = matmul(p, m);
    CHECK(std::vector<float>(c.data().begin(), c.data().end()) ==
          std::vector<float>{5, 6, 0, 0});
  }
  SUBCASE("scalar triple-loop oracle") {
    std::mt19937_64 rng(11);
    auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    auto c = matmul(a, b);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 2; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 4; ++k)
          s += double(a.data()[i * 4 + k]) * b.data()[k * 2 + j];
        CHECK(c.data()[i * 2 + j] == doctest::Approx(s).epsilon(1e-6));
      }
    }
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})),
                    DimensionError);
  }
  SUBCASE("backward accumulates dA = dC B^T and dB = A^T dC") {
    auto a = Tensor::from_data({1, 2}, {1, 2}, true);
    auto b = Tensor::from_data({2, 1}, {3, 4}, true);
    sum(matmul(a, b)).backward();
    CHECK(a.grad()[0] == 3.0f);
    CHECK(a.grad()[1] == 4.0f);
    CHECK(b.grad()[0] == 1.0f);
    CHECK(b.grad()[1] == 2.0f);
  }
}

TEST_CASE("softmax_lastdim") {
  SUBCASE("uniform") {
    auto y = softmax_lastdim(Tensor::from_data({3}, {0, 0, 0}));
    for (float v : y.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-7));
  }
  SUBCASE("large logits") {
    auto y = softmax_lastdim(Tensor::from_data({2}, {1000, 0}));
    CHECK(std::abs(y.data()[0] - 1.0f) < 1e-6);
    CHECK(std::abs(y.data()[1]) < 1e-6);
  }
  SUBCASE("64-bit reference") {
    auto y = softmax_lastdim(Tensor::from_data({3}, {1, 2, 3}));
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int i = 0; i < 3; ++i) {
      CHECK(y.data()[i] == doctest::Approx(std::exp(i + 1.0) / z).epsilon(1e-6));
    }
  }
  SUBCASE("rows sum to one for magnitudes up to 1e4") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(-1e4f, 1e4f);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<float> v(7 * 9);
      for (auto& x : v) x = u(rng);
      auto y = softmax_lastdim(Tensor::from_data({7, 9}, v));
      for (std::size_t i = 0; i < 7; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 9; ++j) {
          CHECK(y.data()[i * 9 + j] >= 0.0f);
          s += y.data()[i * 9 + j];
        }
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
    }
  }
  SUBCASE("causal variant zeros the strict upper triangle") {
    std::mt19937_64 rng(5);
    auto y = causal_softmax(random_tensor({4, 4}, rng));
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = i + 1; j < 4; ++j) CHECK(y.data()[i * 4 + j] == 0.0f);
  }
}

TEST_CASE("layer_norm") {
  auto ones = Tensor::full({2}, 1.0f), zeros = Tensor::zeros({2});
  SUBCASE("constant rows map to zero") {
    auto y = layer_norm(Tensor::from_data({2, 2}, {3, 3, -1, -1}), ones, zeros);
    for (float v : y.data()) CHECK(v == 0.0f);
  }
  SUBCASE("two-point standardization") {
    auto y = layer_norm(Tensor::from_data({1, 2}, {1, 3}), ones, zeros, 1e-12f);
    CHECK(y.data()[0] == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(y.data()[1] == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("moments of an arbitrary row") {
    std::mt19937_64 rng(9);
    const std::size_t d = 33;
    auto x = random_tensor({1, d}, rng);
    auto y = layer_norm(x, Tensor::full({d}, 1.0f), Tensor::zeros({d}), 1e-5f);
    double mu = 0.0, var = 0.0;
    for (float v : y.data()) mu += v;
    mu /= d;
    for (float v : y.data()) var += (v - mu) * (v - mu);
    var /= d;
    CHECK(std::abs(mu) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
  SUBCASE("gain length mismatch") {
    CHECK_THROWS_AS(layer_norm(Tensor::zeros({1, 3}), ones, zeros),
                    DimensionError);
  }
}

TEST_CASE("backward") {
  SUBCASE("sum gives all-ones gradient") {
    auto w = Tensor::from_data({2, 3}, {1, -2, 3, 4, 5, 6}, true);
    sum(w).backward();
    for (float g : w.grad()) CHECK(g == 1.0f);
  }
  SUBCASE("half squared norm gives w") {
    auto w = Tensor::from_data({4}, {0.5f, -1.0f, 2.0f, 3.0f}, true);
    scale(sum(square(w)), 0.5f).backward();
    for (std::size_t i = 0; i < 4; ++i) CHECK(w.grad()[i] == w.data()[i]);
  }
  SUBCASE("repeated calls accumulate") {
    auto w = Tensor::from_data({2}, {1, 2}, true);
    sum(w).backward();
    sum(w).backward();
    CHECK(w.grad()[0] == 2.0f);
  }
  SUBCASE("non-scalar loss is a contract error") {
    auto w = Tensor::from_data({2}, {1, 2}, true);
    CHECK_THROWS_AS(scale(w, 2.0f).backward(), ContractError);
  }
  SUBCASE("no_grad records nothing") {
    auto w = Tensor::from_data({2}, {1, 2}, true);
    NoGradGuard guard;
    CHECK_FALSE(sum(w).requires_grad());
  }
}

TEST_CASE("gradient check property on random composite graphs") {
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    auto g = gradcheck::make_random_graph(seed);
    REQUIRE(gradcheck::parameter_count(g) <= 1000);
    auto r = gradcheck::check_graph(g);
    CAPTURE(seed);
    CHECK(r.fraction() >= 0.95);
  }
}

TEST_CASE("optimizer_step") {
  SUBCASE("SGD") {
    auto p = Tensor::from_data({1}, {1.0f}, true);
    p.mutable_grad()[0] = 2.0f;
    Optimizer opt({OptimizerKind::SGD, 0.1f}, {p});
    opt.step();
    CHECK(p.data()[0] == doctest::Approx(0.8).epsilon(1e-7));
    CHECK(opt.step_count() == 1);
  }
  SUBCASE("Adam first step") {
    auto p = Tensor::from_data({1}, {0.0f}, true);
    p.mutable_grad()[0] = 1.0f;
    Optimizer opt({OptimizerKind::Adam, 0.01f}, {p});
    opt.step();
    CHECK(p.data()[0] == doctest::Approx(-0.01).epsilon(1e-6));
  }
  SUBCASE("AdamW pure decay path") {
    auto p = Tensor::from_data({1}, {1.0f}, true);
    p.mutable_grad()[0] = 0.0f;
    OptimizerConfig cfg{OptimizerKind::AdamW, 0.01f};
    cfg.weight_decay = 0.1f;
    Optimizer opt(cfg, {p});
    opt.step();
    CHECK(p.data()[0] == doctest::Approx(0.999).epsilon(1e-7));
  }
  SUBCASE("zero gradients without decay are the identity") {
    for (auto kind : {OptimizerKind::SGD, OptimizerKind::Adam, OptimizerKind::AdamW}) {
      std::mt19937_64 rng(17);
      auto p = random_tensor({3, 5}, rng, true);
      const std::vector<float> before(p.data().begin(), p.data().end());
      p.mutable_grad();
      Optimizer opt({kind, 0.05f}, {p});
      for (int i = 0; i < 3; ++i) opt.step();
      CHECK(std::vector<float>(p.data().begin(), p.data().end()) == before);
      CHECK(opt.step_count() == 3);
    }
  }
  SUBCASE("missing gradient is a contract error") {
    auto p = Tensor::from_data({1}, {1.0f}, true);
    Optimizer opt({OptimizerKind::Adam, 0.01f}, {p});
    CHECK_THROWS_AS(opt.step(), ContractError);
  }
}
