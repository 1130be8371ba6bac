#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle: copies alias the same buffer. Operations are
// free functions; when a Tape is active on the current thread (see TapeScope)
// and at least one input requires a gradient, the operation is appended to
// that tape. Tape::backward replays the recorded operations in exact reverse
// order and accumulates gradients into every participating tensor.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace spat {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::uint64_t tape_uid = 0;  // 0: not produced by a recorded op
  std::size_t node_index = 0;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

using NodePtr = std::shared_ptr<TensorNode>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::vector<double> values);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::ptrdiff_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // In-place access for parameter updates and test perturbations. Must not be
  // used on a tensor whose recorded op has not yet been differentiated.
  std::span<double> mutable_data();
  std::vector<double> to_vector() const;
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Position on the tape that produced this tensor; absent for leaves/constants.
  std::optional<std::size_t> node_id() const;

  // Deep copy of the values; the copy is a fresh leaf with no gradient.
  Tensor clone() const;
  // Shares nothing with the tape; same values, requires_grad off.
  Tensor detach() const;

  const detail::NodePtr& node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> out_grad)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Runs reverse-mode accumulation from a scalar loss recorded on this tape.
  // Gradients of intermediate tensors are reset first; leaf gradients accumulate.
  void backward(const Tensor& loss);

  std::size_t size() const noexcept { return ops_.size(); }
  std::uint64_t uid() const noexcept { return uid_; }
  void clear();

  // Appends an operation. Inputs must already be leaves or outputs of earlier ops.
  void record(std::vector<detail::NodePtr> inputs, const detail::NodePtr& output,
              BackwardFn fn);

 private:
  struct Op {
    std::vector<detail::NodePtr> inputs;
    detail::NodePtr output;
    BackwardFn fn;
  };

  std::uint64_t uid_;
  std::vector<Op> ops_;
};

// Activates a tape for the current thread for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape() noexcept;

void backward(const Tensor& loss);

// ---- primitives ---------------------------------------------------------

// [..., m, k] x [..., k, n]. Leading dimensions must match, or one side may
// have none (broadcast across the other's batch).
Tensor matmul(const Tensor& a, const Tensor& b);

// Softmax over the last axis, max-subtracted.
Tensor row_softmax(const Tensor& x);

// Elementwise ops. `b` may equal a's shape or be a trailing suffix of it, in
// which case it is broadcast across a's leading dimensions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
// Swaps two axes; defaults to the last two.
Tensor transpose(const Tensor& x, std::ptrdiff_t axis0 = -2, std::ptrdiff_t axis1 = -1);
Tensor concat(const std::vector<Tensor>& parts, std::ptrdiff_t axis);
// Joins along a new axis inserted at `axis`.
Tensor stack(const std::vector<Tensor>& parts, std::ptrdiff_t axis = 0);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_along_axis(const Tensor& x, std::ptrdiff_t axis);
Tensor mean_along_axis(const Tensor& x, std::ptrdiff_t axis);
// Population (divide-by-n) standard deviation. Gradient is 0 where std is 0.
Tensor std_along_axis(const Tensor& x, std::ptrdiff_t axis);

Tensor abs(const Tensor& x);  // subgradient 0 at 0
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

}  // namespace spat
