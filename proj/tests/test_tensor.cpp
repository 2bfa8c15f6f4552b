#include <gtest/gtest.h>

#include <cmath>

#include "gmmjepa/params.hpp"
#include "gmmjepa/tensor.hpp"

using namespace gmmjepa;
using namespace gmmjepa::tensor;

namespace {

Var leaf(Shape s, std::vector<double> v) { return parameter(DenseArray(std::move(s), std::move(v))); }

}  // namespace

TEST(Tensor, MatmulMatchesHandProduct) {
  Var a = constant(DenseArray({2, 3}, {1, 2, 3, 4, 5, 6}));
  Var b = constant(DenseArray({3, 2}, {7, 8, 9, 10, 11, 12}));
  Var c = matmul(a, b);
  ASSERT_EQ(c->shape(), (Shape{2, 2}));
  EXPECT_EQ(c->value[0], 58);
  EXPECT_EQ(c->value[1], 64);
  EXPECT_EQ(c->value[2], 139);
  EXPECT_EQ(c->value[3], 154);
}

TEST(Tensor, TrailingBroadcastAdd) {
  Var a = constant(DenseArray({2, 3}, {0, 0, 0, 1, 1, 1}));
  Var b = constant(DenseArray({3}, {1, 2, 3}));
  Var c = add(a, b);
  EXPECT_EQ(c->value[4], 3);
  EXPECT_THROW(add(a, constant(DenseArray({2}, {1, 2}))), TensorError);
}

TEST(Tensor, SoftmaxAndLogSoftmaxAgree) {
  Var a = constant(DenseArray({2, 3}, {1, 2, 3, -1, 0, 1000}));
  Var s = softmax(a, 1);
  Var ls = log_softmax(a, 1);
  for (std::size_t r = 0; r < 2; ++r) {
    double tot = 0;
    for (std::size_t c = 0; c < 3; ++c) tot += s->value.at(r, c);
    EXPECT_NEAR(tot, 1.0, 1e-15);
  }
  const double z = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  EXPECT_NEAR(ls->value[0], 1.0 - z, 1e-14);
  EXPECT_NEAR(ls->value[5], 0.0, 1e-14);
  EXPECT_TRUE(ls->value.all_finite());
}

TEST(Tensor, GeluUsesErfForm) {
  Var x = constant(DenseArray({3}, {-1.0, 0.0, 2.0}));
  Var y = gelu(x);
  for (std::size_t i = 0; i < 3; ++i) {
    const double v = x->value[i];
    EXPECT_NEAR(y->value[i], 0.5 * v * (1 + std::erf(v / std::sqrt(2.0))), 1e-15);
  }
}

TEST(Tensor, BackwardOfProductAndExp) {
  Var a = leaf({3}, {0.5, -1.0, 2.0});
  Var b = leaf({3}, {3.0, 4.0, -2.0});
  backward(add(sum_all(mul(a, b)), sum_all(exp(a))));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(a->grad[i], b->value[i] + std::exp(a->value[i]), 1e-14);
    EXPECT_NEAR(b->grad[i], a->value[i], 1e-14);
  }
}

TEST(Tensor, LeafGradsAccumulateAcrossBackwardCalls) {
  Var a = leaf({1}, {2.0});
  backward(square(a));
  backward(square(a));
  EXPECT_DOUBLE_EQ(a->grad[0], 8.0);
  a->zero_grad();
  backward(square(a));
  EXPECT_DOUBLE_EQ(a->grad[0], 4.0);
}

TEST(Tensor, Conv1dMatchesDirectSum) {
  // 2 in-channels, 1 out-channel, kernel 3, dilation 2, padding 2.
  std::vector<double> xs{1, 2, 3, 4, 5, -1, 0, 1, 0, -1};
  std::vector<double> ws{0.5, -1, 2, 1, 1, 1};
  Var x = constant(DenseArray({2, 5}, xs));
  Var w = constant(DenseArray({1, 2, 3}, ws));
  Var b = constant(DenseArray({1}, {0.25}));
  Conv1dOptions o;
  o.dilation = 2;
  o.padding = 2;
  Var y = conv1d(x, w, b, o);
  ASSERT_EQ(y->shape(), (Shape{1, 5}));
  for (long t = 0; t < 5; ++t) {
    double ref = 0.25;
    for (long c = 0; c < 2; ++c)
      for (long k = 0; k < 3; ++k) {
        const long idx = t - 2 + 2 * k;
        if (idx >= 0 && idx < 5) ref += ws[c * 3 + k] * xs[c * 5 + idx];
      }
    EXPECT_NEAR(y->value[t], ref, 1e-14) << t;
  }
  EXPECT_EQ(conv1d_out_len(10, 4, {2, 1, 1, 1}), 5u);
}

TEST(Tensor, GradCheckOnCompositeOps) {
  ParamStore p;
  p.add("x", DenseArray({3, 4}, {0.1, -0.2, 0.3, 0.5, 1.0, -1.5, 0.2, 0.0, 0.7, 0.3, -0.9, 0.4}));
  p.add("g", DenseArray({4}, {1.0, 0.5, 1.5, -0.5}));
  p.add("b", DenseArray({4}, {0.1, 0.2, 0.3, 0.4}));
  p.add("w", DenseArray({4, 2}, {0.3, -0.1, 0.2, 0.5, -0.4, 0.1, 0.6, 0.2}));
  auto f = [](const ParamStore& s) {
    Var h = layer_norm(s.get("x"), s.get("g"), s.get("b"));
    h = matmul(tanh(h), s.get("w"));
    return add(sum_all(log_softmax(h, 1)), sum_all(glu(softplus(s.get("x")), 1)));
  };
  set_precision(Precision::F64);
  const auto rep = grad_check(f, p);
  EXPECT_TRUE(rep.passed) << rep.worst_param << " " << rep.max_rel_err;
}

TEST(Tensor, F32ModeRoundsEveryOutput) {
  set_precision(Precision::F32);
  Var a = constant(DenseArray({1}, {0.1}));
  Var c = add(mul_scalar(a, 3.0), scalar_const(1e-9));
  const double v = c->value[0];
  EXPECT_EQ(static_cast<double>(static_cast<float>(v)), v);
  set_precision(Precision::F64);
  Var d = add(mul_scalar(a, 3.0), scalar_const(1e-9));
  EXPECT_NE(static_cast<double>(static_cast<float>(d->value[0])), d->value[0]);
}

TEST(Tensor, IndexSelectScattersGradient) {
  Var a = leaf({3, 2}, {1, 2, 3, 4, 5, 6});
  std::vector<std::size_t> rows{2, 0, 2};
  Var s = index_select(a, rows);
  EXPECT_EQ(s->value.at(0, 1), 6);
  backward(sum_all(s));
  EXPECT_EQ(a->grad[0], 1);
  EXPECT_EQ(a->grad[2], 0);
  EXPECT_EQ(a->grad[4], 2);
}

TEST(Params, FrozenCopyHoldsConstants) {
  ParamStore p(3);
  p.add("encoder.a", DenseArray({2}, 1.0));
  p.add("head.b", DenseArray({2}, 2.0));
  EXPECT_THROW(p.add("head.b", DenseArray({1})), std::invalid_argument);
  ParamStore f = p.frozen_copy("encoder.");
  EXPECT_EQ(f.size(), 1u);
  EXPECT_FALSE(f.get("encoder.a")->requires_grad);
  EXPECT_THROW(f.get("head.b"), std::out_of_range);
}

TEST(Params, GradCheckDetectsDetachedTerm) {
  ParamStore p;
  p.add("x", DenseArray({3}, {0.5, 1.0, -2.0}));
  auto bad = [](const ParamStore& s) {
    Var x = s.get("x");
    return sum_all(mul(x, constant(x->value)));
  };
  EXPECT_FALSE(grad_check(bad, p).passed);
}
