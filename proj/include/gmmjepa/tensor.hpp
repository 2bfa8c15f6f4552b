// Reverse-mode differentiation over dense row-major arrays.
//
// Values are stored as double. When the global precision is set to F32 every
// op rounds its output through float, so a 32-bit run sees 32-bit arithmetic
// results while sharing the same code path as the 64-bit verification runs.
//
// Broadcasting is limited to scalar-with-array and trailing-axis expansion
// (b's shape equals a suffix of a's shape). Anything else goes through an
// explicit reshape / expand.

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gmmjepa::tensor {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Precision { F64, F32 };

void set_precision(Precision p);
Precision precision();

class DenseArray;
// Rounds values through float when the global precision is F32.
void round_to_precision(DenseArray& a);

class DenseArray {
 public:
  DenseArray() = default;
  explicit DenseArray(Shape shape, double fill = 0.0);
  DenseArray(Shape shape, std::vector<double> data);

  static DenseArray scalar(double v) { return DenseArray({1}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  // 2-D convenience accessors.
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }

  double item() const;
  bool all_finite() const;
  void fill(double v);
  DenseArray reshaped(Shape s) const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  DenseArray value;
  DenseArray grad;  // allocated lazily, same shape as value
  std::string_view op = "leaf";
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  const Shape& shape() const { return value.shape(); }
  DenseArray& ensure_grad();
  bool has_grad() const { return !grad.empty(); }
  void zero_grad();
};

Var constant(DenseArray v);
Var parameter(DenseArray v);
Var scalar_const(double v);

// Elementwise binary ops (trailing-axis or scalar broadcast of b onto a).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var neg(const Var& a);

// Elementwise unary ops.
Var exp(const Var& a);
Var log(const Var& a);
Var sin(const Var& a);
Var sqrt(const Var& a);
Var square(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var gelu(const Var& a);
Var softplus(const Var& a);

// [M,K]x[K,N] or batched [B,M,K]x[B,K,N].
Var matmul(const Var& a, const Var& b);

Var softmax(const Var& a, std::size_t axis);
Var log_softmax(const Var& a, std::size_t axis);
// Splits `axis` in half: first ⊙ sigmoid(second).
Var glu(const Var& a, std::size_t axis);
// Normalizes over the last axis; gamma/beta have the last-axis length.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

Var sum(const Var& a, std::size_t axis);
Var mean(const Var& a, std::size_t axis);
Var sum_all(const Var& a);
Var mean_all(const Var& a);

Var transpose(const Var& a, std::size_t ax0, std::size_t ax1);
Var reshape(const Var& a, Shape s);
// Repeats size-1 axes of `a` to reach `s` (same rank).
Var expand(const Var& a, Shape s);
Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end);
Var concat(const std::vector<Var>& parts, std::size_t axis);
// Gathers rows along axis 0 (masked-select over frames, embedding lookup).
Var index_select(const Var& a, std::span<const std::size_t> rows);

struct Conv1dOptions {
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

// x: [C_in, L], w: [C_out, C_in/groups, K], bias: [C_out] or nullptr.
Var conv1d(const Var& x, const Var& w, const Var& bias, const Conv1dOptions& opt);
std::size_t conv1d_out_len(std::size_t len, std::size_t kernel, const Conv1dOptions& opt);

// Accumulates d(loss)/d(node) into every reachable node that requires grad.
// Leaf grads accumulate across calls; interior grads are recomputed.
void backward(const Var& loss);

}  // namespace gmmjepa::tensor
