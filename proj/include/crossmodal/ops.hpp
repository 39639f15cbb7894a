#pragma once

#include <span>
#include <vector>

#include "crossmodal/tensor.hpp"

namespace crossmodal {

// Differentiable tensor ops. Inputs of rank > 2 are treated as matrices of
// shape [rows() x cols()] wherever an op is defined on matrices. Reductions
// accumulate in double.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor square(const Tensor& a);
// sqrt(max(a, floor)); gradient is zero where the floor is active.
Tensor sqrt_floor(const Tensor& a, float floor);
// Adds `bias` (shape [cols]) to every row of `a`.
Tensor add_bias(const Tensor& a, const Tensor& bias);
// tanh approximation, as used by GPT-2.
Tensor gelu(const Tensor& a);

Tensor softmax_lastdim(const Tensor& x);
// Row-wise softmax over a square [L x L] score matrix where entry (i, j) with
// j > i is excluded and its weight is exactly zero.
Tensor causal_softmax(const Tensor& scores);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps = 1e-5f);

Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_cols(std::span<const Tensor> parts);
// Row i maps to row rows()-1-i.
Tensor flip_rows(const Tensor& a);

// Column means over all rows, shape [1 x cols].
Tensor mean_rows(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse_loss(const Tensor& prediction, const Tensor& target);

// Mean cross-entropy over rows whose target is >= 0; rows with a negative
// target are ignored. Returns nullopt-like undefined Tensor when no row
// participates (callers define the empty loss).
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

// Rows of `table` ([V x d]) selected by ids, shape [ids.size() x d].
Tensor embedding(const Tensor& table, std::span<const int> ids);

// out[i][j] = ||a_i - b_j||^2 for a [N x d], b [M x d].
Tensor pairwise_sqdist(const Tensor& a, const Tensor& b);
// out[i][j] = table[row_ids[i]][col_ids[j]].
Tensor gather_pairs(const Tensor& table, std::span<const int> row_ids,
                    std::span<const int> col_ids);

namespace kernels {
// c[m x n] = a[m x k] * b[k x n], accumulated in double.
void gemm(std::span<const float> a, std::span<const float> b,
          std::span<float> c, std::size_t m, std::size_t k, std::size_t n);
void transpose(std::span<const float> a, std::span<float> out, std::size_t rows,
               std::size_t cols);
}  // namespace kernels

}  // namespace crossmodal
