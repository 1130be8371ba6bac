#include "spat/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

#include "spat/errors.hpp"

namespace spat {

using detail::NodePtr;
using detail::TensorNode;

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_next_tape_uid{1};

NodePtr make_node(Shape shape, std::vector<double> data) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  return node;
}

NodePtr make_node(Shape shape) {
  const std::size_t n = shape_numel(shape);
  return make_node(std::move(shape), std::vector<double>(n, 0.0));
}

const NodePtr& checked(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  return t.node();
}

std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank, const char* op) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  const std::ptrdiff_t a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    std::ostringstream os;
    os << op << ": axis " << axis << " out of range for rank " << rank;
    throw ShapeError(os.str());
  }
  return static_cast<std::size_t>(a);
}

// Records `out` on the active tape when any input needs a gradient.
Tensor finish(std::vector<NodePtr> inputs, NodePtr out, Tape::BackwardFn fn) {
  Tape* tape = g_active_tape;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const NodePtr& n) { return n->requires_grad; });
  if (tape && needs) {
    out->requires_grad = true;
    tape->record(std::move(inputs), out, std::move(fn));
  }
  return Tensor(std::move(out));
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// b broadcasts over a when b's shape equals a trailing suffix of a's shape.
bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <typename Forward, typename GradA, typename GradB>
Tensor binary_broadcast(const Tensor& ta, const Tensor& tb, const char* op,
                        Forward fwd, GradA grad_a, GradB grad_b) {
  const NodePtr& a = checked(ta, op);
  const NodePtr& b = checked(tb, op);
  if (!is_suffix(b->shape, a->shape)) {
    throw ShapeError(std::string(op) + ": cannot combine " + shape_str(a->shape) +
                     " with " + shape_str(b->shape));
  }
  const std::size_t n = a->data.size();
  const std::size_t m = b->data.size();
  auto out = make_node(a->shape);
  // b repeats every m elements of a.
  for (std::size_t base = 0; base < n; base += m) {
    for (std::size_t j = 0; j < m; ++j) out->data[base + j] = fwd(a->data[base + j], b->data[j]);
  }
  return finish({a, b}, out, [a, b, n, m, grad_a, grad_b](std::span<const double> g) {
    if (a->requires_grad) {
      auto& ga = a->ensure_grad();
      for (std::size_t base = 0; base < n; base += m) {
        for (std::size_t j = 0; j < m; ++j) {
          ga[base + j] += grad_a(g[base + j], a->data[base + j], b->data[j]);
        }
      }
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (std::size_t base = 0; base < n; base += m) {
        for (std::size_t j = 0; j < m; ++j) {
          gb[j] += grad_b(g[base + j], a->data[base + j], b->data[j]);
        }
      }
    }
  });
}

template <typename Forward, typename Derivative>
Tensor unary(const Tensor& tx, const char* op, Forward fwd, Derivative deriv) {
  const NodePtr& x = checked(tx, op);
  auto out = make_node(x->shape);
  for (std::size_t i = 0; i < x->data.size(); ++i) out->data[i] = fwd(x->data[i]);
  return finish({x}, out, [x, deriv](std::span<const double> g) {
    auto& gx = x->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * deriv(x->data[i]);
  });
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_acc(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    const double* arow = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
    }
  }
}

// dA[m,k] += G[m,n] * B[k,n]^T
void gemm_grad_a(const double* G, const double* B, double* dA, std::size_t m,
                 std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* g = G + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = B + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += g[j] * brow[j];
      dA[i * k + p] += acc;
    }
  }
}

// dB[k,n] += A[m,k]^T * G[m,n]
void gemm_grad_b(const double* A, const double* G, double* dB, std::size_t m,
                 std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* g = G + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      double* db = dB + p * n;
      for (std::size_t j = 0; j < n; ++j) db[j] += av * g[j];
    }
  }
}

void require_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return Tensor(make_node(std::move(shape))); }

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  return Tensor(make_node(std::move(shape), std::move(values)));
}

const Shape& Tensor::shape() const { return checked(*this, "shape")->shape; }

std::size_t Tensor::size(std::ptrdiff_t axis) const {
  return shape()[normalize_axis(axis, dim(), "size")];
}

std::size_t Tensor::numel() const { return checked(*this, "numel")->data.size(); }

std::span<const double> Tensor::data() const { return checked(*this, "data")->data; }

std::span<double> Tensor::mutable_data() { return checked(*this, "mutable_data")->data; }

std::vector<double> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  }
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw ShapeError("at: index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw ShapeError("at: index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return checked(*this, "requires_grad")->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  checked(*this, "set_requires_grad")->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return !checked(*this, "has_grad")->grad.empty(); }

std::span<const double> Tensor::grad() const { return checked(*this, "grad")->grad; }

void Tensor::zero_grad() { checked(*this, "zero_grad")->grad.clear(); }

std::optional<std::size_t> Tensor::node_id() const {
  const auto& n = checked(*this, "node_id");
  if (n->tape_uid == 0) return std::nullopt;
  return n->node_index;
}

Tensor Tensor::clone() const {
  const auto& n = checked(*this, "clone");
  auto copy = make_node(n->shape, n->data);
  copy->requires_grad = n->requires_grad && n->tape_uid == 0;
  return Tensor(copy);
}

Tensor Tensor::detach() const {
  const auto& n = checked(*this, "detach");
  return Tensor(make_node(n->shape, n->data));
}

// ---- Tape -----------------------------------------------------------------

Tape::Tape() : uid_(g_next_tape_uid.fetch_add(1)) {}

void Tape::clear() { ops_.clear(); }

void Tape::record(std::vector<NodePtr> inputs, const NodePtr& output, BackwardFn fn) {
  output->tape_uid = uid_;
  output->node_index = ops_.size();
  ops_.push_back(Op{std::move(inputs), output, std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  const NodePtr& root = checked(loss, "backward");
  if (root->data.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(root->shape));
  }
  if (root->tape_uid != uid_ || root->node_index >= ops_.size() ||
      ops_[root->node_index].output != root) {
    throw ContractError("backward: loss was not recorded on this tape");
  }
  for (auto& op : ops_) op.output->grad.clear();
  root->grad.assign(1, 1.0);
  for (std::size_t i = root->node_index + 1; i-- > 0;) {
    Op& op = ops_[i];
    if (op.output->grad.empty()) continue;
    op.fn(op.output->grad);
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() noexcept { return g_active_tape; }

void backward(const Tensor& loss) {
  Tape* tape = g_active_tape;
  if (!tape) throw ContractError("backward: no active tape");
  tape->backward(loss);
}

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& ta, const Tensor& tb) {
  const NodePtr& a = checked(ta, "matmul");
  const NodePtr& b = checked(tb, "matmul");
  const Shape& sa = a->shape;
  const Shape& sb = b->shape;
  if (sa.size() < 2 || sb.size() < 2 || sa[sa.size() - 1] != sb[sb.size() - 2]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);
  if (!batch_a.empty() && !batch_b.empty() && batch_a != batch_b) {
    throw ShapeError("matmul: batch dimensions differ: " + shape_str(sa) + " and " +
                     shape_str(sb));
  }
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  const std::size_t n = sb.back();
  const Shape& batch = batch_a.empty() ? batch_b : batch_a;
  const std::size_t nb = shape_numel(batch);
  const std::size_t stride_a = batch_a.empty() ? 0 : m * k;
  const std::size_t stride_b = batch_b.empty() ? 0 : k * n;

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  auto out = make_node(out_shape);
  // A shared right operand lets the whole batch run as one [nb*m, k] product.
  const bool fold = batch_b.empty() && !batch_a.empty();
  if (fold) {
    gemm_acc(a->data.data(), b->data.data(), out->data.data(), nb * m, k, n);
  } else {
    for (std::size_t i = 0; i < nb; ++i) {
      gemm_acc(a->data.data() + i * stride_a, b->data.data() + i * stride_b,
               out->data.data() + i * m * n, m, k, n);
    }
  }
  return finish({a, b}, out,
                [a, b, nb, m, k, n, stride_a, stride_b, fold](std::span<const double> g) {
                  if (a->requires_grad) {
                    auto& ga = a->ensure_grad();
                    if (fold) {
                      gemm_grad_a(g.data(), b->data.data(), ga.data(), nb * m, k, n);
                    } else {
                      for (std::size_t i = 0; i < nb; ++i) {
                        gemm_grad_a(g.data() + i * m * n, b->data.data() + i * stride_b,
                                    ga.data() + i * stride_a, m, k, n);
                      }
                    }
                  }
                  if (b->requires_grad) {
                    auto& gb = b->ensure_grad();
                    if (fold) {
                      gemm_grad_b(a->data.data(), g.data(), gb.data(), nb * m, k, n);
                    } else {
                      for (std::size_t i = 0; i < nb; ++i) {
                        gemm_grad_b(a->data.data() + i * stride_a, g.data() + i * m * n,
                                    gb.data() + i * stride_b, m, k, n);
                      }
                    }
                  }
                });
}

Tensor row_softmax(const Tensor& tx) {
  const NodePtr& x = checked(tx, "row_softmax");
  if (x->shape.empty() || x->shape.back() == 0) {
    throw ShapeError("row_softmax: needs a non-empty last axis, got " + shape_str(x->shape));
  }
  require_finite(x->data, "row_softmax");
  const std::size_t len = x->shape.back();
  const std::size_t rows = x->data.size() / len;
  auto out = make_node(x->shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x->data.data() + r * len;
    double* y = out->data.data() + r * len;
    const double peak = *std::max_element(in, in + len);
    double total = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      y[j] = std::exp(in[j] - peak);
      total += y[j];
    }
    for (std::size_t j = 0; j < len; ++j) y[j] /= total;
  }
  std::weak_ptr<TensorNode> weak_out = out;
  return finish({x}, out, [x, weak_out, rows, len](std::span<const double> g) {
    const auto y = weak_out.lock();
    auto& gx = x->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y->data.data() + r * len;
      const double* gr = g.data() + r * len;
      double dot = 0.0;
      for (std::size_t j = 0; j < len; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < len; ++j) gx[r * len + j] += yr[j] * (gr[j] - dot);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_broadcast(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_broadcast(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_broadcast(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; },
      [factor](double) { return factor; });
}

Tensor reshape(const Tensor& tx, Shape shape) {
  const NodePtr& x = checked(tx, "reshape");
  if (shape_numel(shape) != x->data.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x->shape) + " as " + shape_str(shape));
  }
  auto out = make_node(std::move(shape), x->data);
  return finish({x}, out, [x](std::span<const double> g) {
    auto& gx = x->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
  });
}

Tensor permute(const Tensor& tx, const std::vector<std::size_t>& order) {
  const NodePtr& x = checked(tx, "permute");
  const std::size_t rank = x->shape.size();
  std::vector<bool> seen(rank, false);
  if (order.size() != rank) throw ShapeError("permute: order rank mismatch");
  for (std::size_t o : order) {
    if (o >= rank || seen[o]) throw ShapeError("permute: invalid axis order");
    seen[o] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x->shape[order[i]];

  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * x->shape[i];
  // src_index[i] = flat input offset of output element i
  const std::size_t n = x->data.size();
  auto src_index = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> counter(rank, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < rank; ++d) off += counter[d] * in_strides[order[d]];
    (*src_index)[i] = off;
    for (std::size_t d = rank; d-- > 0;) {
      if (++counter[d] < out_shape[d]) break;
      counter[d] = 0;
    }
  }
  auto out = make_node(out_shape);
  for (std::size_t i = 0; i < n; ++i) out->data[i] = x->data[(*src_index)[i]];
  return finish({x}, out, [x, src_index](std::span<const double> g) {
    auto& gx = x->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*src_index)[i]] += g[i];
  });
}

Tensor transpose(const Tensor& x, std::ptrdiff_t axis0, std::ptrdiff_t axis1) {
  const std::size_t rank = x.dim();
  const std::size_t a0 = normalize_axis(axis0, rank, "transpose");
  const std::size_t a1 = normalize_axis(axis1, rank, "transpose");
  std::vector<std::size_t> order(rank);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[a0], order[a1]);
  return permute(x, order);
}

Tensor concat(const std::vector<Tensor>& parts, std::ptrdiff_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(checked(p, "concat"));
  const Shape& first = nodes[0]->shape;
  const std::size_t ax = normalize_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& n : nodes) {
    if (n->shape.size() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != ax && n->shape[d] != first[d]) {
        throw ShapeError("concat: shapes " + shape_str(first) + " and " + shape_str(n->shape) +
                         " differ off the concat axis");
      }
    }
    out_shape[ax] += n->shape[ax];
  }
  const AxisSplit out_split = split_axis(out_shape, ax);
  auto out = make_node(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& n : nodes) {
    offsets.push_back(offset);
    const AxisSplit s = split_axis(n->shape, ax);
    const std::size_t block = s.len * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(n->data.data() + o * block, block,
                  out->data.data() + o * out_split.len * out_split.inner + offset * s.inner);
    }
    offset += s.len;
  }
  return finish(nodes, out, [nodes, offsets, ax, out_split](std::span<const double> g) {
    for (std::size_t p = 0; p < nodes.size(); ++p) {
      const auto& n = nodes[p];
      if (!n->requires_grad) continue;
      auto& gn = n->ensure_grad();
      const AxisSplit s = split_axis(n->shape, ax);
      const std::size_t block = s.len * s.inner;
      for (std::size_t o = 0; o < s.outer; ++o) {
        const double* src =
            g.data() + o * out_split.len * out_split.inner + offsets[p] * s.inner;
        for (std::size_t i = 0; i < block; ++i) gn[o * block + i] += src[i];
      }
    }
  });
}

Tensor stack(const std::vector<Tensor>& parts, std::ptrdiff_t axis) {
  if (parts.empty()) throw ContractError("stack: no inputs");
  const std::size_t rank = parts[0].dim() + 1;
  const std::size_t ax = normalize_axis(axis, rank, "stack");
  std::vector<Tensor> expanded;
  for (const auto& p : parts) {
    Shape s = p.shape();
    s.insert(s.begin() + static_cast<std::ptrdiff_t>(ax), 1);
    expanded.push_back(reshape(p, s));
  }
  return concat(expanded, static_cast<std::ptrdiff_t>(ax));
}

Tensor sum(const Tensor& tx) {
  const NodePtr& x = checked(tx, "sum");
  double total = 0.0;
  for (double v : x->data) total += v;
  auto out = make_node({}, {total});
  return finish({x}, out, [x](std::span<const double> g) {
    auto& gx = x->ensure_grad();
    for (double& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  const std::size_t n = x.numel();
  if (n == 0) throw ContractError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Tensor sum_along_axis(const Tensor& tx, std::ptrdiff_t axis) {
  const NodePtr& x = checked(tx, "sum_along_axis");
  const std::size_t ax = normalize_axis(axis, x->shape.size(), "sum_along_axis");
  const AxisSplit s = split_axis(x->shape, ax);
  Shape out_shape = x->shape;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  auto out = make_node(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i)
        out->data[o * s.inner + i] += x->data[(o * s.len + l) * s.inner + i];
  return finish({x}, out, [x, s](std::span<const double> g) {
    auto& gx = x->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < s.len; ++l)
        for (std::size_t i = 0; i < s.inner; ++i)
          gx[(o * s.len + l) * s.inner + i] += g[o * s.inner + i];
  });
}

Tensor mean_along_axis(const Tensor& x, std::ptrdiff_t axis) {
  const std::size_t len = x.size(axis);
  if (len == 0) throw ShapeError("mean_along_axis: empty axis");
  return scale(sum_along_axis(x, axis), 1.0 / static_cast<double>(len));
}

Tensor std_along_axis(const Tensor& tx, std::ptrdiff_t axis) {
  const NodePtr& x = checked(tx, "std_along_axis");
  const std::size_t ax = normalize_axis(axis, x->shape.size(), "std_along_axis");
  const AxisSplit s = split_axis(x->shape, ax);
  if (s.len == 0) throw ShapeError("std_along_axis: empty axis");
  Shape out_shape = x->shape;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  auto out = make_node(out_shape);
  auto means = std::make_shared<std::vector<double>>(s.outer * s.inner, 0.0);
  const double inv_len = 1.0 / static_cast<double>(s.len);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double mu = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) mu += x->data[(o * s.len + l) * s.inner + i];
      mu *= inv_len;
      double var = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double d = x->data[(o * s.len + l) * s.inner + i] - mu;
        var += d * d;
      }
      (*means)[o * s.inner + i] = mu;
      out->data[o * s.inner + i] = std::sqrt(var * inv_len);
    }
  }
  std::weak_ptr<TensorNode> weak_out = out;
  return finish({x}, out, [x, s, means, inv_len, weak_out](std::span<const double> g) {
    const auto y = weak_out.lock();
    auto& gx = x->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const double sigma = y->data[o * s.inner + i];
        if (sigma == 0.0) continue;
        const double coeff = g[o * s.inner + i] * inv_len / sigma;
        const double mu = (*means)[o * s.inner + i];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t idx = (o * s.len + l) * s.inner + i;
          gx[idx] += coeff * (x->data[idx] - mu);
        }
      }
    }
  });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, "abs", [](double v) { return std::fabs(v); },
      [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v) {
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        return cdf + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Tensor layer_norm(const Tensor& tx, const Tensor& tgamma, const Tensor& tbeta, double eps) {
  const NodePtr& x = checked(tx, "layer_norm");
  const NodePtr& gamma = checked(tgamma, "layer_norm");
  const NodePtr& beta = checked(tbeta, "layer_norm");
  if (x->shape.empty()) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x->shape.back();
  if (gamma->shape != Shape{d} || beta->shape != Shape{d}) {
    throw ShapeError("layer_norm: affine parameters must have shape [" + std::to_string(d) +
                     "], got " + shape_str(gamma->shape) + " and " + shape_str(beta->shape));
  }
  const std::size_t rows = x->data.size() / d;
  auto out = make_node(x->shape);
  auto xhat = std::make_shared<std::vector<double>>(x->data.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x->data.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (in[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out->data[r * d + j] = h * gamma->data[j] + beta->data[j];
    }
  }
  return finish({x, gamma, beta}, out,
                [x, gamma, beta, xhat, inv_std, rows, d](std::span<const double> g) {
                  if (gamma->requires_grad) {
                    auto& gg = gamma->ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < d; ++j)
                        gg[j] += g[r * d + j] * (*xhat)[r * d + j];
                  }
                  if (beta->requires_grad) {
                    auto& gb = beta->ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                  }
                  if (x->requires_grad) {
                    auto& gx = x->ensure_grad();
                    const double inv_d = 1.0 / static_cast<double>(d);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double mean_dh = 0.0;
                      double mean_dh_h = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dh = g[r * d + j] * gamma->data[j];
                        mean_dh += dh;
                        mean_dh_h += dh * (*xhat)[r * d + j];
                      }
                      mean_dh *= inv_d;
                      mean_dh_h *= inv_d;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dh = g[r * d + j] * gamma->data[j];
                        gx[r * d + j] += (*inv_std)[r] *
                                         (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
                      }
                    }
                  }
                });
}

}  // namespace spat
