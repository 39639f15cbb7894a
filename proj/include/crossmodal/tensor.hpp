#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace crossmodal {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct TensorNode;
}

// Dense row-major float32 tensor participating in a reverse-mode tape.
//
// A Tensor is a shared handle: copies alias the same storage and gradient,
// which is what lets a model and its optimizer refer to the same parameter.
// Use clone() for an independent copy. Gradient buffers are allocated lazily
// on first accumulation. The tape is implicit in the result nodes of ops and
// is released by backward().
class Tensor {
 public:
  using BackwardFn = std::function<void(std::span<const float> grad_out)>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  // Builds the result of a differentiable op. When grad mode is on and any
  // parent requires grad, the result is recorded on the tape with `backward`,
  // which receives the result's gradient and must accumulate into parents.
  static Tensor from_op(Shape shape, std::vector<float> data,
                        std::vector<Tensor> parents, BackwardFn backward);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t dim(std::size_t axis) const;
  // Product of all but the last extent, and the last extent.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const float> data() const;
  // Mutable access is for leaves (parameters, inputs); mutating a tensor
  // that is already referenced by a recorded op invalidates that op.
  std::span<float> mutable_data();
  float item() const;
  float at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad();
  void clear_grad();
  // Const because Tensor is a handle; the shared gradient buffer changes.
  void accumulate_grad(std::span<const float> g) const;

  // Validation call: true iff every entry is finite.
  bool is_finite() const;

  Tensor clone() const;
  Tensor detach() const;

  // Runs reverse-mode differentiation from this scalar. Populates grads of
  // every requires_grad leaf reachable from it (accumulating) and releases
  // the interior of the tape.
  void backward() const;

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node)
      : node_(std::move(node)) {}
  detail::TensorNode& node() const;

  std::shared_ptr<detail::TensorNode> node_;
};

// Process-wide (per thread) switch for recording ops on the tape.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace crossmodal
