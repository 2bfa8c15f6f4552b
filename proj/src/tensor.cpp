#include "gmmjepa/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace gmmjepa::tensor {

namespace {

std::atomic<Precision> g_precision{Precision::F64};

[[noreturn]] void fail(std::string_view op, const std::string& what) {
  throw TensorError(std::string(op) + ": " + what);
}

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const Shape& b) {
  fail(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void round_if_f32(DenseArray& v) {
  if (g_precision.load(std::memory_order_relaxed) == Precision::F32) {
    for (double& x : v.data()) x = static_cast<double>(static_cast<float>(x));
  }
}

// Creates the output node. Backward closures are only kept when some input
// needs a gradient, so frozen / teacher graphs carry no edges.
Var make_node(std::string_view op, DenseArray value, std::vector<Var> parents,
              std::function<void(Node&)> fn) {
  round_if_f32(value);
  if (!value.all_finite()) fail(op, "non-finite output for shape " + shape_str(value.shape()));
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  if (rg) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return n;
}

bool wants(const Var& v) { return v->requires_grad; }

// b broadcasts onto a when it is a scalar or its shape is a suffix of a's.
std::size_t broadcast_inner(std::string_view op, const Shape& a, const Shape& b) {
  const std::size_t nb = shape_numel(b);
  if (a == b) return nb;
  if (nb == 1) return 1;
  if (b.size() <= a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin())) return nb;
  shape_fail(op, a, b);
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(std::string_view op, const Shape& s, std::size_t axis) {
  if (axis >= s.size()) fail(op, "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <class F, class D>
Var unary(std::string_view op, const Var& a, F f, D df) {
  DenseArray out(a->shape());
  const auto in = a->value.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = f(in[i]);
  return make_node(op, std::move(out), {a}, [a, df](Node& self) {
    auto& g = a->ensure_grad();
    const auto x = a->value.data();
    const auto y = self.value.data();
    const auto gy = self.grad.data();
    auto gx = g.data();
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += gy[i] * df(x[i], y[i]);
  });
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

void set_precision(Precision p) { g_precision.store(p); }
Precision precision() { return g_precision.load(); }

void round_to_precision(DenseArray& a) { round_if_f32(a); }

DenseArray::DenseArray(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

DenseArray::DenseArray(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw TensorError("DenseArray: shape " + shape_str(shape_) + " does not match " +
                      std::to_string(data_.size()) + " values");
  }
}

double DenseArray::item() const {
  if (data_.size() != 1) throw TensorError("item: expected one element, shape " + shape_str(shape_));
  return data_[0];
}

bool DenseArray::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

void DenseArray::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

DenseArray DenseArray::reshaped(Shape s) const {
  if (shape_numel(s) != data_.size()) {
    throw TensorError("reshape: " + shape_str(shape_) + " -> " + shape_str(s));
  }
  return DenseArray(std::move(s), data_);
}

DenseArray& Node::ensure_grad() {
  if (grad.empty()) grad = DenseArray(value.shape(), 0.0);
  return grad;
}

void Node::zero_grad() {
  if (!grad.empty()) grad.fill(0.0);
}

Var constant(DenseArray v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->op = "const";
  return n;
}

Var parameter(DenseArray v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->op = "param";
  n->requires_grad = true;
  return n;
}

Var scalar_const(double v) { return constant(DenseArray::scalar(v)); }

// ---------------------------------------------------------------- binary ops

namespace {

template <class F, class GA, class GB>
Var binary(std::string_view op, const Var& a, const Var& b, F f, GA ga, GB gb) {
  const std::size_t inner = broadcast_inner(op, a->shape(), b->shape());
  DenseArray out(a->shape());
  const auto x = a->value.data();
  const auto y = b->value.data();
  auto o = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = f(x[i], y[i % inner]);
  return make_node(op, std::move(out), {a, b}, [a, b, inner, ga, gb](Node& self) {
    const auto x = a->value.data();
    const auto y = b->value.data();
    const auto g = self.grad.data();
    if (wants(a)) {
      auto gx = a->ensure_grad().data();
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[i] * ga(x[i], y[i % inner]);
    }
    if (wants(b)) {
      auto gy = b->ensure_grad().data();
      for (std::size_t i = 0; i < x.size(); ++i) gy[i % inner] += g[i] * gb(x[i], y[i % inner]);
    }
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var div_scalar(const Var& a, double s) {
  if (s == 0.0 || !std::isfinite(s)) fail("div_scalar", "invalid divisor");
  return unary(
      "div_scalar", a, [s](double x) { return x / s; }, [s](double, double) { return 1.0 / s; });
}

Var mul_scalar(const Var& a, double s) {
  return unary(
      "mul_scalar", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

// ----------------------------------------------------------------- unary ops

Var exp(const Var& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  for (double x : a->value.data()) {
    if (!(x > 0.0)) fail("log", "non-positive input for shape " + shape_str(a->shape()));
  }
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sin(const Var& a) {
  return unary(
      "sin", a, [](double x) { return std::sin(x); },
      [](double x, double) { return std::cos(x); });
}

Var sqrt(const Var& a) {
  for (double x : a->value.data()) {
    if (!(x >= 0.0)) fail("sqrt", "negative input for shape " + shape_str(a->shape()));
  }
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Var square(const Var& a) {
  return unary(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sigmoid(const Var& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Var gelu(const Var& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      });
}

Var softplus(const Var& a) {
  return unary(
      "softplus", a,
      [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
}

// -------------------------------------------------------------------- matmul

Var matmul(const Var& a, const Var& b) {
  const Shape& sa = a->shape();
  const Shape& sb = b->shape();
  std::size_t batch = 1, m, k, n;
  Shape out_shape;
  if (sa.size() == 2 && sb.size() == 2) {
    m = sa[0];
    k = sa[1];
    n = sb[1];
    if (sb[0] != k) shape_fail("matmul", sa, sb);
    out_shape = {m, n};
  } else if (sa.size() == 3 && sb.size() == 3) {
    batch = sa[0];
    m = sa[1];
    k = sa[2];
    n = sb[2];
    if (sb[0] != batch || sb[1] != k) shape_fail("matmul", sa, sb);
    out_shape = {batch, m, n};
  } else {
    shape_fail("matmul", sa, sb);
  }
  DenseArray out(out_shape);
  {
    const double* A = a->value.data().data();
    const double* B = b->value.data().data();
    double* C = out.data().data();
    for (std::size_t bi = 0; bi < batch; ++bi) {
      const double* Ab = A + bi * m * k;
      const double* Bb = B + bi * k * n;
      double* Cb = C + bi * m * n;
      for (std::size_t i = 0; i < m; ++i) {
        double* crow = Cb + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = Ab[i * k + p];
          if (av == 0.0) continue;
          const double* brow = Bb + p * n;
          for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
  return make_node("matmul", std::move(out), {a, b}, [a, b, batch, m, k, n](Node& self) {
    const double* A = a->value.data().data();
    const double* B = b->value.data().data();
    const double* G = self.grad.data().data();
    if (wants(a)) {
      double* GA = a->ensure_grad().data().data();
      // GA += G * B^T, with B^T materialized so the inner loop is contiguous.
      std::vector<double> bt(k * n);
      for (std::size_t bi = 0; bi < batch; ++bi) {
        const double* Bb = B + bi * k * n;
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = Bb[p * n + j];
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = G + bi * m * n + i * n;
          double* garow = GA + bi * m * k + i * k;
          for (std::size_t j = 0; j < n; ++j) {
            const double g = grow[j];
            if (g == 0.0) continue;
            const double* btrow = bt.data() + j * k;
            for (std::size_t p = 0; p < k; ++p) garow[p] += g * btrow[p];
          }
        }
      }
    }
    if (wants(b)) {
      double* GB = b->ensure_grad().data().data();
      for (std::size_t bi = 0; bi < batch; ++bi) {
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = G + bi * m * n + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = A[bi * m * k + i * k + p];
            if (av == 0.0) continue;
            double* gbrow = GB + bi * k * n + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    }
  });
}

// ------------------------------------------------------------------- softmax

Var softmax(const Var& a, std::size_t axis) {
  const auto sp = split_axis("softmax", a->shape(), axis);
  DenseArray out(a->shape());
  const auto x = a->value.data();
  auto y = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < sp.n; ++j) mx = std::max(mx, x[base + j * sp.inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < sp.n; ++j) {
        const double e = std::exp(x[base + j * sp.inner] - mx);
        y[base + j * sp.inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < sp.n; ++j) y[base + j * sp.inner] /= s;
    }
  }
  return make_node("softmax", std::move(out), {a}, [a, sp](Node& self) {
    const auto y = self.value.data();
    const auto gy = self.grad.data();
    auto gx = a->ensure_grad().data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.n * sp.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t idx = base + j * sp.inner;
          dot += gy[idx] * y[idx];
        }
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t idx = base + j * sp.inner;
          gx[idx] += y[idx] * (gy[idx] - dot);
        }
      }
    }
  });
}

Var log_softmax(const Var& a, std::size_t axis) {
  const auto sp = split_axis("log_softmax", a->shape(), axis);
  DenseArray out(a->shape());
  const auto x = a->value.data();
  auto y = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < sp.n; ++j) mx = std::max(mx, x[base + j * sp.inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < sp.n; ++j) s += std::exp(x[base + j * sp.inner] - mx);
      const double lse = mx + std::log(s);
      for (std::size_t j = 0; j < sp.n; ++j) y[base + j * sp.inner] = x[base + j * sp.inner] - lse;
    }
  }
  return make_node("log_softmax", std::move(out), {a}, [a, sp](Node& self) {
    const auto y = self.value.data();
    const auto gy = self.grad.data();
    auto gx = a->ensure_grad().data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.n * sp.inner + in;
        double gs = 0.0;
        for (std::size_t j = 0; j < sp.n; ++j) gs += gy[base + j * sp.inner];
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t idx = base + j * sp.inner;
          gx[idx] += gy[idx] - std::exp(y[idx]) * gs;
        }
      }
    }
  });
}

Var glu(const Var& a, std::size_t axis) {
  const auto sp = split_axis("glu", a->shape(), axis);
  if (sp.n % 2 != 0) fail("glu", "odd split axis in " + shape_str(a->shape()));
  const std::size_t h = sp.n / 2;
  Shape os = a->shape();
  os[axis] = h;
  DenseArray out(os);
  const auto x = a->value.data();
  auto y = out.data();
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < h; ++j) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const double u = x[(o * sp.n + j) * sp.inner + in];
        const double g = x[(o * sp.n + j + h) * sp.inner + in];
        y[(o * h + j) * sp.inner + in] = u * sig(g);
      }
    }
  }
  return make_node("glu", std::move(out), {a}, [a, sp, h, sig](Node& self) {
    const auto x = a->value.data();
    const auto gy = self.grad.data();
    auto gx = a->ensure_grad().data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t j = 0; j < h; ++j) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t iu = (o * sp.n + j) * sp.inner + in;
          const std::size_t ig = (o * sp.n + j + h) * sp.inner + in;
          const double s = sig(x[ig]);
          const double g = gy[(o * h + j) * sp.inner + in];
          gx[iu] += g * s;
          gx[ig] += g * x[iu] * s * (1.0 - s);
        }
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Shape& s = x->shape();
  if (s.empty()) fail("layer_norm", "rank-0 input");
  const std::size_t n = s.back();
  if (gamma->value.size() != n || beta->value.size() != n) {
    shape_fail("layer_norm", s, gamma->shape());
  }
  const std::size_t rows = x->value.size() / n;
  DenseArray out(s);
  std::vector<double> xhat(x->value.size());
  std::vector<double> inv_std(rows);
  const auto xv = x->value.data();
  const auto gv = gamma->value.data();
  const auto bv = beta->value.data();
  auto y = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xv[r * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = xv[r * n + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xv[r * n + j] - mu) * is;
      xhat[r * n + j] = h;
      y[r * n + j] = h * gv[j] + bv[j];
    }
  }
  return make_node(
      "layer_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const auto gy = self.grad.data();
        const auto gv = gamma->value.data();
        if (wants(gamma) || wants(beta)) {
          auto& gg = gamma->ensure_grad();
          auto& gb = beta->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) {
              gg[j] += gy[r * n + j] * xhat[r * n + j];
              gb[j] += gy[r * n + j];
            }
          }
        }
        if (wants(x)) {
          auto gx = x->ensure_grad().data();
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = gy[r * n + j] * gv[j];
              m1 += dh;
              m2 += dh * xhat[r * n + j];
            }
            m1 *= inv_n;
            m2 *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = gy[r * n + j] * gv[j];
              gx[r * n + j] += inv_std[r] * (dh - m1 - xhat[r * n + j] * m2);
            }
          }
        }
      });
}

// ---------------------------------------------------------------- reductions

Var sum(const Var& a, std::size_t axis) {
  const auto sp = split_axis("sum", a->shape(), axis);
  Shape os = a->shape();
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  if (os.empty()) os = {1};
  DenseArray out(os);
  const auto x = a->value.data();
  auto y = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j)
      for (std::size_t in = 0; in < sp.inner; ++in)
        y[o * sp.inner + in] += x[(o * sp.n + j) * sp.inner + in];
  return make_node("sum", std::move(out), {a}, [a, sp](Node& self) {
    const auto gy = self.grad.data();
    auto gx = a->ensure_grad().data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.n; ++j)
        for (std::size_t in = 0; in < sp.inner; ++in)
          gx[(o * sp.n + j) * sp.inner + in] += gy[o * sp.inner + in];
  });
}

Var mean(const Var& a, std::size_t axis) {
  const std::size_t n = split_axis("mean", a->shape(), axis).n;
  return div_scalar(sum(a, axis), static_cast<double>(n));
}

Var sum_all(const Var& a) {
  double s = 0.0;
  for (double x : a->value.data()) s += x;
  return make_node("sum_all", DenseArray::scalar(s), {a}, [a](Node& self) {
    const double g = self.grad[0];
    for (double& gx : a->ensure_grad().data()) gx += g;
  });
}

Var mean_all(const Var& a) {
  return div_scalar(sum_all(a), static_cast<double>(a->value.size()));
}

// ------------------------------------------------------------------- layout

Var transpose(const Var& a, std::size_t ax0, std::size_t ax1) {
  const Shape& s = a->shape();
  if (ax0 >= s.size() || ax1 >= s.size()) fail("transpose", "axis out of range for " + shape_str(s));
  Shape os = s;
  std::swap(os[ax0], os[ax1]);
  const auto in_st = strides_of(s);
  auto perm_st = in_st;
  std::swap(perm_st[ax0], perm_st[ax1]);
  const std::size_t total = a->value.size();
  // map[i] = input flat index of output flat index i
  std::vector<std::size_t> map(total);
  {
    std::vector<std::size_t> idx(os.size(), 0);
    for (std::size_t i = 0; i < total; ++i) {
      std::size_t src = 0;
      for (std::size_t d = 0; d < os.size(); ++d) src += idx[d] * perm_st[d];
      map[i] = src;
      for (std::size_t d = os.size(); d-- > 0;) {
        if (++idx[d] < os[d]) break;
        idx[d] = 0;
      }
    }
  }
  DenseArray out(os);
  const auto x = a->value.data();
  auto y = out.data();
  for (std::size_t i = 0; i < total; ++i) y[i] = x[map[i]];
  return make_node("transpose", std::move(out), {a}, [a, map = std::move(map)](Node& self) {
    const auto gy = self.grad.data();
    auto gx = a->ensure_grad().data();
    for (std::size_t i = 0; i < map.size(); ++i) gx[map[i]] += gy[i];
  });
}

Var reshape(const Var& a, Shape s) {
  if (shape_numel(s) != a->value.size()) shape_fail("reshape", a->shape(), s);
  DenseArray out = a->value.reshaped(std::move(s));
  return make_node("reshape", std::move(out), {a}, [a](Node& self) {
    const auto gy = self.grad.data();
    auto gx = a->ensure_grad().data();
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

Var expand(const Var& a, Shape s) {
  const Shape& as = a->shape();
  if (as.size() != s.size()) shape_fail("expand", as, s);
  for (std::size_t d = 0; d < s.size(); ++d) {
    if (as[d] != s[d] && as[d] != 1) shape_fail("expand", as, s);
  }
  const auto in_st = strides_of(as);
  const std::size_t total = shape_numel(s);
  std::vector<std::size_t> map(total);
  {
    std::vector<std::size_t> idx(s.size(), 0);
    for (std::size_t i = 0; i < total; ++i) {
      std::size_t src = 0;
      for (std::size_t d = 0; d < s.size(); ++d) src += (as[d] == 1 ? 0 : idx[d]) * in_st[d];
      map[i] = src;
      for (std::size_t d = s.size(); d-- > 0;) {
        if (++idx[d] < s[d]) break;
        idx[d] = 0;
      }
    }
  }
  DenseArray out(std::move(s));
  const auto x = a->value.data();
  auto y = out.data();
  for (std::size_t i = 0; i < total; ++i) y[i] = x[map[i]];
  return make_node("expand", std::move(out), {a}, [a, map = std::move(map)](Node& self) {
    const auto gy = self.grad.data();
    auto gx = a->ensure_grad().data();
    for (std::size_t i = 0; i < map.size(); ++i) gx[map[i]] += gy[i];
  });
}

Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto sp = split_axis("slice", a->shape(), axis);
  if (begin > end || end > sp.n) {
    fail("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                      shape_str(a->shape()));
  }
  const std::size_t len = end - begin;
  Shape os = a->shape();
  os[axis] = len;
  DenseArray out(os);
  const auto x = a->value.data();
  auto y = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < len; ++j)
      for (std::size_t in = 0; in < sp.inner; ++in)
        y[(o * len + j) * sp.inner + in] = x[(o * sp.n + begin + j) * sp.inner + in];
  return make_node("slice", std::move(out), {a}, [a, sp, begin, len](Node& self) {
    const auto gy = self.grad.data();
    auto gx = a->ensure_grad().data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < len; ++j)
        for (std::size_t in = 0; in < sp.inner; ++in)
          gx[(o * sp.n + begin + j) * sp.inner + in] += gy[(o * len + j) * sp.inner + in];
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) fail("concat", "no inputs");
  const Shape& s0 = parts[0]->shape();
  std::size_t total_n = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const Shape& s = p->shape();
    if (s.size() != s0.size()) shape_fail("concat", s0, s);
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != s0[d]) shape_fail("concat", s0, s);
    }
    offsets.push_back(total_n);
    total_n += split_axis("concat", s, axis).n;
  }
  Shape os = s0;
  os[axis] = total_n;
  const auto sp0 = split_axis("concat", s0, axis);
  DenseArray out(os);
  auto y = out.data();
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto x = parts[pi]->value.data();
    const std::size_t n = parts[pi]->shape()[axis];
    for (std::size_t o = 0; o < sp0.outer; ++o)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t in = 0; in < sp0.inner; ++in)
          y[(o * total_n + offsets[pi] + j) * sp0.inner + in] = x[(o * n + j) * sp0.inner + in];
  }
  return make_node("concat", std::move(out), parts,
                   [parts, offsets, total_n, sp0, axis](Node& self) {
                     const auto gy = self.grad.data();
                     for (std::size_t pi = 0; pi < parts.size(); ++pi) {
                       if (!wants(parts[pi])) continue;
                       auto gx = parts[pi]->ensure_grad().data();
                       const std::size_t n = parts[pi]->shape()[axis];
                       for (std::size_t o = 0; o < sp0.outer; ++o)
                         for (std::size_t j = 0; j < n; ++j)
                           for (std::size_t in = 0; in < sp0.inner; ++in)
                             gx[(o * n + j) * sp0.inner + in] +=
                                 gy[(o * total_n + offsets[pi] + j) * sp0.inner + in];
                     }
                   });
}

Var index_select(const Var& a, std::span<const std::size_t> rows) {
  const Shape& s = a->shape();
  if (s.empty()) fail("index_select", "rank-0 input");
  const std::size_t n = s[0];
  const std::size_t width = a->value.size() / std::max<std::size_t>(n, 1);
  for (auto r : rows) {
    if (r >= n) fail("index_select", "row " + std::to_string(r) + " outside " + shape_str(s));
  }
  Shape os = s;
  os[0] = rows.size();
  DenseArray out(os);
  const auto x = a->value.data();
  auto y = out.data();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(rows[i] * width), width,
                y.begin() + static_cast<std::ptrdiff_t>(i * width));
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_node("index_select", std::move(out), {a}, [a, width, idx = std::move(idx)](Node& self) {
    const auto gy = self.grad.data();
    auto gx = a->ensure_grad().data();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < width; ++c) gx[idx[i] * width + c] += gy[i * width + c];
  });
}

// -------------------------------------------------------------------- conv1d

std::size_t conv1d_out_len(std::size_t len, std::size_t kernel, const Conv1dOptions& opt) {
  const std::size_t span = opt.dilation * (kernel - 1) + 1;
  const std::size_t padded = len + 2 * opt.padding;
  if (padded < span) return 0;
  return (padded - span) / opt.stride + 1;
}

Var conv1d(const Var& x, const Var& w, const Var& bias, const Conv1dOptions& opt) {
  const Shape& xs = x->shape();
  const Shape& ws = w->shape();
  if (xs.size() != 2 || ws.size() != 3 || opt.groups == 0 || opt.stride == 0 || opt.dilation == 0) {
    shape_fail("conv1d", xs, ws);
  }
  const std::size_t cin = xs[0], len = xs[1];
  const std::size_t cout = ws[0], cpg = ws[1], kw = ws[2];
  if (cin % opt.groups != 0 || cout % opt.groups != 0 || cin / opt.groups != cpg) {
    shape_fail("conv1d", xs, ws);
  }
  if (bias && bias->value.size() != cout) shape_fail("conv1d", ws, bias->shape());
  const std::size_t lout = conv1d_out_len(len, kw, opt);
  if (lout == 0) fail("conv1d", "input length " + std::to_string(len) + " too short for kernel " + std::to_string(kw));
  const std::size_t opg = cout / opt.groups;
  DenseArray out({cout, lout});
  const double* X = x->value.data().data();
  const double* W = w->value.data().data();
  double* Y = out.data().data();
  const auto pad = static_cast<std::ptrdiff_t>(opt.padding);
  for (std::size_t co = 0; co < cout; ++co) {
    const std::size_t g = co / opg;
    double* yrow = Y + co * lout;
    if (bias) std::fill_n(yrow, lout, bias->value[co]);
    for (std::size_t ci = 0; ci < cpg; ++ci) {
      const double* xrow = X + (g * cpg + ci) * len;
      for (std::size_t k = 0; k < kw; ++k) {
        const double wv = W[(co * cpg + ci) * kw + k];
        const auto off = static_cast<std::ptrdiff_t>(k * opt.dilation) - pad;
        for (std::size_t t = 0; t < lout; ++t) {
          const auto src = static_cast<std::ptrdiff_t>(t * opt.stride) + off;
          if (src >= 0 && src < static_cast<std::ptrdiff_t>(len)) yrow[t] += wv * xrow[src];
        }
      }
    }
  }
  std::vector<Var> parents{x, w};
  if (bias) parents.push_back(bias);
  return make_node(
      "conv1d", std::move(out), std::move(parents),
      [x, w, bias, opt, cin, len, cout, cpg, kw, lout, opg, pad](Node& self) {
        const double* X = x->value.data().data();
        const double* W = w->value.data().data();
        const double* G = self.grad.data().data();
        double* GX = wants(x) ? x->ensure_grad().data().data() : nullptr;
        double* GW = wants(w) ? w->ensure_grad().data().data() : nullptr;
        if (bias && wants(bias)) {
          auto gb = bias->ensure_grad().data();
          for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t t = 0; t < lout; ++t) gb[co] += G[co * lout + t];
        }
        for (std::size_t co = 0; co < cout; ++co) {
          const std::size_t g = co / opg;
          const double* grow = G + co * lout;
          for (std::size_t ci = 0; ci < cpg; ++ci) {
            const std::size_t xi = g * cpg + ci;
            for (std::size_t k = 0; k < kw; ++k) {
              const std::size_t wi = (co * cpg + ci) * kw + k;
              const double wv = W[wi];
              const auto off = static_cast<std::ptrdiff_t>(k * opt.dilation) - pad;
              double acc = 0.0;
              for (std::size_t t = 0; t < lout; ++t) {
                const auto src = static_cast<std::ptrdiff_t>(t * opt.stride) + off;
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
                acc += grow[t] * X[xi * len + src];
                if (GX) GX[xi * len + src] += grow[t] * wv;
              }
              if (GW) GW[wi] += acc;
            }
          }
        }
        (void)cin;
      });
}

// ------------------------------------------------------------------ backward

void backward(const Var& loss) {
  if (!loss) throw TensorError("backward: null loss");
  if (loss->value.size() != 1) {
    throw TensorError("backward: loss must be scalar, got shape " + shape_str(loss->shape()));
  }
  if (!loss->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.get(), 0}};
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.contains(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (n->backward_fn) n->zero_grad();
  }
  loss->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
}

}  // namespace gmmjepa::tensor
