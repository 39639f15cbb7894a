#include "crossmodal/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "crossmodal/errors.hpp"

namespace crossmodal {

namespace kernels {

void gemm(std::span<const float> a, std::span<const float> b,
          std::span<float> c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const float* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const float* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
    }
    float* crow = c.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<float>(acc[j]);
  }
}

void transpose(std::span<const float> a, std::span<float> out, std::size_t rows,
               std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  }
}

}  // namespace kernels

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

Shape matrix_shape(std::size_t rows, std::size_t cols) { return {rows, cols}; }

// Applies a unary elementwise map with derivative callback.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  auto in = a.data();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return Tensor::from_op(a.shape(), std::move(out), {a},
                         [a, deriv](std::span<const float> g) mutable {
                           auto x = a.data();
                           std::vector<float> dx(x.size());
                           for (std::size_t i = 0; i < x.size(); ++i) {
                             dx[i] = g[i] * deriv(x[i]);
                           }
                           a.accumulate_grad(dx);
                         });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (b.rank() != 2) {
    throw DimensionError("matmul: right operand must be a matrix, got " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree " +
                         shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<float> out(m * n);
  kernels::gemm(a.data(), b.data(), out, m, k, n);
  Shape shape = a.shape();
  shape.back() = n;
  return Tensor::from_op(
      std::move(shape), std::move(out), {a, b},
      [a, b, m, k, n](std::span<const float> g) mutable {
        if (a.requires_grad()) {
          std::vector<float> bt(k * n), da(m * k);
          kernels::transpose(b.data(), bt, k, n);
          kernels::gemm(g, bt, da, m, n, k);
          a.accumulate_grad(da);
        }
        if (b.requires_grad()) {
          std::vector<float> at(m * k), db(k * n);
          kernels::transpose(a.data(), at, m, k);
          kernels::gemm(at, g, db, k, m, n);
          b.accumulate_grad(db);
        }
      });
}

Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<float> out(r * c);
  kernels::transpose(a.data(), out, r, c);
  return Tensor::from_op(matrix_shape(c, r), std::move(out), {a},
                         [a, r, c](std::span<const float> g) mutable {
                           std::vector<float> da(r * c);
                           kernels::transpose(g, da, c, r);
                           a.accumulate_grad(da);
                         });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto x = a.data(), y = b.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b},
                         [a, b](std::span<const float> g) mutable {
                           a.accumulate_grad(g);
                           b.accumulate_grad(g);
                         });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto x = a.data(), y = b.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b},
                         [a, b](std::span<const float> g) mutable {
                           a.accumulate_grad(g);
                           if (b.requires_grad()) {
                             std::vector<float> neg(g.begin(), g.end());
                             for (auto& v : neg) v = -v;
                             b.accumulate_grad(neg);
                           }
                         });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto x = a.data(), y = b.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b},
                         [a, b](std::span<const float> g) mutable {
                           auto x = a.data(), y = b.data();
                           std::vector<float> d(g.size());
                           if (a.requires_grad()) {
                             for (std::size_t i = 0; i < d.size(); ++i)
                               d[i] = g[i] * y[i];
                             a.accumulate_grad(d);
                           }
                           if (b.requires_grad()) {
                             for (std::size_t i = 0; i < d.size(); ++i)
                               d[i] = g[i] * x[i];
                             b.accumulate_grad(d);
                           }
                         });
}

Tensor scale(const Tensor& a, float factor) {
  auto x = a.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  return Tensor::from_op(a.shape(), std::move(out), {a},
                         [a, factor](std::span<const float> g) mutable {
                           std::vector<float> d(g.begin(), g.end());
                           for (auto& v : d) v *= factor;
                           a.accumulate_grad(d);
                         });
}

Tensor square(const Tensor& a) {
  return unary(
      a, [](float v) { return v * v; }, [](float v) { return 2.0f * v; });
}

Tensor sqrt_floor(const Tensor& a, float floor) {
  return unary(
      a, [floor](float v) { return std::sqrt(std::max(v, floor)); },
      [floor](float v) {
        return v > floor ? 0.5f / std::sqrt(v) : 0.0f;
      });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  const std::size_t r = a.rows(), c = a.cols();
  if (bias.numel() != c) {
    throw DimensionError("add_bias: bias length " +
                         std::to_string(bias.numel()) + " vs " +
                         std::to_string(c) + " columns");
  }
  auto x = a.data(), bv = bias.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] + bv[j];
  }
  return Tensor::from_op(a.shape(), std::move(out), {a, bias},
                         [a, bias, r, c](std::span<const float> g) mutable {
                           a.accumulate_grad(g);
                           if (bias.requires_grad()) {
                             std::vector<double> acc(c, 0.0);
                             for (std::size_t i = 0; i < r; ++i) {
                               for (std::size_t j = 0; j < c; ++j)
                                 acc[j] += g[i * c + j];
                             }
                             std::vector<float> db(acc.begin(), acc.end());
                             bias.accumulate_grad(db);
                           }
                         });
}

Tensor gelu(const Tensor& a) {
  constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  constexpr float c3 = 0.044715f;
  return unary(
      a,
      [](float x) {
        return 0.5f * x * (1.0f + std::tanh(k * (x + c3 * x * x * x)));
      },
      [](float x) {
        const float inner = k * (x + c3 * x * x * x);
        const float t = std::tanh(inner);
        const float dinner = k * (1.0f + 3.0f * c3 * x * x);
        return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * dinner;
      });
}

namespace {

// Softmax over the first `width` entries of a row; remaining entries are 0.
void softmax_row(const float* in, float* out, std::size_t width,
                 std::size_t total) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < width; ++j) mx = std::max(mx, double(in[j]));
  double s = 0.0;
  std::vector<double> e(width);
  for (std::size_t j = 0; j < width; ++j) {
    e[j] = std::exp(double(in[j]) - mx);
    s += e[j];
  }
  for (std::size_t j = 0; j < width; ++j) out[j] = static_cast<float>(e[j] / s);
  for (std::size_t j = width; j < total; ++j) out[j] = 0.0f;
}

Tensor softmax_impl(const Tensor& x, bool causal) {
  const std::size_t r = x.rows(), c = x.cols();
  if (causal && r != c) {
    throw DimensionError("causal_softmax: expected square scores, got " +
                         shape_string(x.shape()));
  }
  auto in = x.data();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < r; ++i) {
    softmax_row(in.data() + i * c, out.data() + i * c, causal ? i + 1 : c, c);
  }
  if (!grad_enabled() || !x.requires_grad()) {
    return Tensor::from_data(x.shape(), std::move(out));
  }
  std::vector<float> probs = out;
  return Tensor::from_op(
      x.shape(), std::move(probs), {x},
      [x, y = std::move(out), r, c, causal](std::span<const float> g) mutable {
        std::vector<float> dx(y.size(), 0.0f);
        for (std::size_t i = 0; i < r; ++i) {
          const std::size_t w = causal ? i + 1 : c;
          const float* yr = y.data() + i * c;
          const float* gr = g.data() + i * c;
          double dot = 0.0;
          for (std::size_t j = 0; j < w; ++j) dot += double(yr[j]) * gr[j];
          for (std::size_t j = 0; j < w; ++j) {
            dx[i * c + j] = static_cast<float>(yr[j] * (gr[j] - dot));
          }
        }
        x.accumulate_grad(dx);
      });
}

}  // namespace

Tensor softmax_lastdim(const Tensor& x) { return softmax_impl(x, false); }

Tensor causal_softmax(const Tensor& scores) {
  return softmax_impl(scores, true);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps) {
  if (!(eps > 0.0f)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t r = x.rows(), d = x.cols();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias length must equal " +
                         std::to_string(d));
  }
  auto in = x.data(), gv = gain.data(), bv = bias.data();
  std::vector<float> out(in.size()), xhat(in.size()), rstd(r);
  for (std::size_t i = 0; i < r; ++i) {
    const float* row = in.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= double(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double dv = row[j] - mu;
      var += dv * dv;
    }
    var /= double(d);
    const double rs = 1.0 / std::sqrt(var + double(eps));
    rstd[i] = static_cast<float>(rs);
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mu) * rs;
      xhat[i * d + j] = static_cast<float>(xh);
      out[i * d + j] = static_cast<float>(xh * gv[j] + bv[j]);
    }
  }
  return Tensor::from_op(
      x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), rstd = std::move(rstd), r,
       d](std::span<const float> g) mutable {
        auto gv = gain.data();
        if (x.requires_grad()) {
          std::vector<float> dx(r * d);
          for (std::size_t i = 0; i < r; ++i) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = double(g[i * d + j]) * gv[j];
              m1 += dxh;
              m2 += dxh * xhat[i * d + j];
            }
            m1 /= double(d);
            m2 /= double(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = double(g[i * d + j]) * gv[j];
              dx[i * d + j] = static_cast<float>(
                  rstd[i] * (dxh - m1 - xhat[i * d + j] * m2));
            }
          }
          x.accumulate_grad(dx);
        }
        if (gain.requires_grad() || bias.requires_grad()) {
          std::vector<double> dg(d, 0.0), db(d, 0.0);
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
              dg[j] += double(g[i * d + j]) * xhat[i * d + j];
              db[j] += g[i * d + j];
            }
          }
          gain.accumulate_grad(std::vector<float>(dg.begin(), dg.end()));
          bias.accumulate_grad(std::vector<float>(db.begin(), db.end()));
        }
      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " to " +
                         shape_string(shape));
  }
  std::vector<float> out(a.data().begin(), a.data().end());
  return Tensor::from_op(std::move(shape), std::move(out), {a},
                         [a](std::span<const float> g) mutable {
                           a.accumulate_grad(g);
                         });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  const std::size_t r = a.rows(), c = a.cols();
  if (begin >= end || end > r) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") out of " +
                         std::to_string(r) + " rows");
  }
  auto in = a.data();
  std::vector<float> out(in.begin() + begin * c, in.begin() + end * c);
  return Tensor::from_op(matrix_shape(end - begin, c), std::move(out), {a},
                         [a, begin, r, c](std::span<const float> g) mutable {
                           std::vector<float> da(r * c, 0.0f);
                           std::copy(g.begin(), g.end(),
                                     da.begin() + begin * c);
                           a.accumulate_grad(da);
                         });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: column mismatch");
    total += p.rows();
  }
  std::vector<float> out;
  out.reserve(total * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return Tensor::from_op(
      matrix_shape(total, c), std::move(out), inputs,
      [inputs](std::span<const float> g) mutable {
        std::size_t offset = 0;
        for (auto& p : inputs) {
          p.accumulate_grad(g.subspan(offset, p.numel()));
          offset += p.numel();
        }
      });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  const std::size_t r = a.rows(), c = a.cols();
  if (begin >= end || end > c) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") out of " +
                         std::to_string(c) + " columns");
  }
  const std::size_t w = end - begin;
  auto in = a.data();
  std::vector<float> out(r * w);
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(in.begin() + i * c + begin, w, out.begin() + i * w);
  }
  return Tensor::from_op(matrix_shape(r, w), std::move(out), {a},
                         [a, begin, r, c, w](std::span<const float> g) mutable {
                           std::vector<float> da(r * c, 0.0f);
                           for (std::size_t i = 0; i < r; ++i) {
                             std::copy_n(g.begin() + i * w, w,
                                         da.begin() + i * c + begin);
                           }
                           a.accumulate_grad(da);
                         });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw DimensionError("concat_cols: row mismatch");
    total += p.cols();
  }
  std::vector<float> out(r * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    auto in = p.data();
    for (std::size_t i = 0; i < r; ++i) {
      std::copy_n(in.begin() + i * w, w, out.begin() + i * total + offset);
    }
    offset += w;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return Tensor::from_op(
      matrix_shape(r, total), std::move(out), inputs,
      [inputs, r, total](std::span<const float> g) mutable {
        std::size_t offset = 0;
        for (auto& p : inputs) {
          const std::size_t w = p.cols();
          if (p.requires_grad()) {
            std::vector<float> dp(r * w);
            for (std::size_t i = 0; i < r; ++i) {
              std::copy_n(g.begin() + i * total + offset, w,
                          dp.begin() + i * w);
            }
            p.accumulate_grad(dp);
          }
          offset += w;
        }
      });
}

Tensor flip_rows(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  auto in = a.data();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(in.begin() + (r - 1 - i) * c, c, out.begin() + i * c);
  }
  return Tensor::from_op(a.shape(), std::move(out), {a},
                         [a, r, c](std::span<const float> g) mutable {
                           std::vector<float> da(r * c);
                           for (std::size_t i = 0; i < r; ++i) {
                             std::copy_n(g.begin() + (r - 1 - i) * c, c,
                                         da.begin() + i * c);
                           }
                           a.accumulate_grad(da);
                         });
}

Tensor mean_rows(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  auto in = a.data();
  std::vector<double> acc(c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) acc[j] += in[i * c + j];
  }
  std::vector<float> out(c);
  for (std::size_t j = 0; j < c; ++j) out[j] = static_cast<float>(acc[j] / r);
  return Tensor::from_op(matrix_shape(1, c), std::move(out), {a},
                         [a, r, c](std::span<const float> g) mutable {
                           std::vector<float> da(r * c);
                           const float inv = 1.0f / float(r);
                           for (std::size_t i = 0; i < r; ++i) {
                             for (std::size_t j = 0; j < c; ++j)
                               da[i * c + j] = g[j] * inv;
                           }
                           a.accumulate_grad(da);
                         });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (float v : a.data()) s += v;
  return Tensor::from_op({1}, {static_cast<float>(s)}, {a},
                         [a](std::span<const float> g) mutable {
                           std::vector<float> da(a.numel(), g[0]);
                           a.accumulate_grad(da);
                         });
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0f / static_cast<float>(a.numel()));
}

Tensor mse_loss(const Tensor& prediction, const Tensor& target) {
  require_same_shape(prediction, target, "mse_loss");
  auto p = prediction.data(), t = target.data();
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = double(p[i]) - t[i];
    s += d * d;
  }
  const std::size_t n = p.size();
  return Tensor::from_op(
      {1}, {static_cast<float>(s / double(n))}, {prediction, target},
      [prediction, target, n](std::span<const float> g) mutable {
        auto p = prediction.data(), t = target.data();
        std::vector<float> d(n);
        const float k = 2.0f * g[0] / float(n);
        for (std::size_t i = 0; i < n; ++i) d[i] = k * (p[i] - t[i]);
        prediction.accumulate_grad(d);
        if (target.requires_grad()) {
          for (auto& v : d) v = -v;
          target.accumulate_grad(d);
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  const std::size_t r = logits.rows(), v = logits.cols();
  if (targets.size() != r) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(r) + " rows");
  }
  auto in = logits.data();
  std::vector<float> probs(in.size(), 0.0f);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] < 0) continue;
    if (static_cast<std::size_t>(targets[i]) >= v) {
      throw DimensionError("cross_entropy: target id out of range");
    }
    softmax_row(in.data() + i * v, probs.data() + i * v, v, v);
    // log-softmax at the target, recomputed in double for accuracy
    const float* row = in.data() + i * v;
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, double(row[j]));
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(double(row[j]) - mx);
    total += -(double(row[targets[i]]) - mx - std::log(s));
    ++count;
  }
  if (count == 0) return Tensor();
  std::vector<int> tgt(targets.begin(), targets.end());
  return Tensor::from_op(
      {1}, {static_cast<float>(total / double(count))}, {logits},
      [logits, probs = std::move(probs), tgt = std::move(tgt), r, v,
       count](std::span<const float> g) mutable {
        std::vector<float> d(r * v, 0.0f);
        const float k = g[0] / float(count);
        for (std::size_t i = 0; i < r; ++i) {
          if (tgt[i] < 0) continue;
          for (std::size_t j = 0; j < v; ++j) d[i * v + j] = k * probs[i * v + j];
          d[i * v + tgt[i]] -= k;
        }
        logits.accumulate_grad(d);
      });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be 2-D");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  auto tv = table.data();
  std::vector<float> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) +
                           " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(tv.begin() + ids[i] * d, d, out.begin() + i * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return Tensor::from_op(matrix_shape(ids.size(), d), std::move(out), {table},
                         [table, idv = std::move(idv), vocab,
                          d](std::span<const float> g) mutable {
                           std::vector<float> dt(vocab * d, 0.0f);
                           for (std::size_t i = 0; i < idv.size(); ++i) {
                             for (std::size_t j = 0; j < d; ++j)
                               dt[idv[i] * d + j] += g[i * d + j];
                           }
                           table.accumulate_grad(dt);
                         });
}

Tensor pairwise_sqdist(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), m = b.rows(), d = a.cols();
  if (b.cols() != d) {
    throw DimensionError("pairwise_sqdist: feature dimension " +
                         std::to_string(d) + " vs " + std::to_string(b.cols()));
  }
  auto x = a.data(), y = b.data();
  std::vector<float> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = double(x[i * d + k]) - y[j * d + k];
        s += diff * diff;
      }
      out[i * m + j] = static_cast<float>(s);
    }
  }
  return Tensor::from_op(
      matrix_shape(n, m), std::move(out), {a, b},
      [a, b, n, m, d](std::span<const float> g) mutable {
        auto x = a.data(), y = b.data();
        // d/da_i = 2 sum_j g_ij (a_i - b_j); d/db_j = -2 sum_i g_ij (a_i - b_j)
        std::vector<double> da(n * d, 0.0), db(m * d, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < m; ++j) {
            const double gij = 2.0 * g[i * m + j];
            if (gij == 0.0) continue;
            for (std::size_t k = 0; k < d; ++k) {
              const double diff = double(x[i * d + k]) - y[j * d + k];
              da[i * d + k] += gij * diff;
              db[j * d + k] -= gij * diff;
            }
          }
        }
        if (a.requires_grad()) a.accumulate_grad(std::vector<float>(da.begin(), da.end()));
        if (b.requires_grad()) b.accumulate_grad(std::vector<float>(db.begin(), db.end()));
      });
}

Tensor gather_pairs(const Tensor& table, std::span<const int> row_ids,
                    std::span<const int> col_ids) {
  if (table.rank() != 2) throw DimensionError("gather_pairs: table must be 2-D");
  const std::size_t ka = table.dim(0), kb = table.dim(1);
  const std::size_t n = row_ids.size(), m = col_ids.size();
  for (int id : row_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= ka)
      throw DimensionError("gather_pairs: row id out of range");
  }
  for (int id : col_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= kb)
      throw DimensionError("gather_pairs: column id out of range");
  }
  auto tv = table.data();
  std::vector<float> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      out[i * m + j] = tv[row_ids[i] * kb + col_ids[j]];
    }
  }
  std::vector<int> ri(row_ids.begin(), row_ids.end());
  std::vector<int> ci(col_ids.begin(), col_ids.end());
  return Tensor::from_op(
      matrix_shape(n, m), std::move(out), {table},
      [table, ri = std::move(ri), ci = std::move(ci), ka, kb, n,
       m](std::span<const float> g) mutable {
        std::vector<double> dt(ka * kb, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < m; ++j)
            dt[ri[i] * kb + ci[j]] += g[i * m + j];
        }
        table.accumulate_grad(std::vector<float>(dt.begin(), dt.end()));
      });
}

}  // namespace crossmodal
