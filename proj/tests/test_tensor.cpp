#include <gtest/gtest.h>

#include <cmath>

#include "dbr/gradcheck.hpp"
#include "dbr/ops.hpp"
#include "dbr/optim.hpp"
#include "dbr/rng.hpp"

using namespace dbr;
namespace op = dbr::ops;

namespace {

void bind(Tape* t, Tensor& x) {
  x.node = -1;
  if (t) t->leaf(x);
}

void expect_allclose(const Tensor& got, const std::vector<double>& want, double tol = 1e-12) {
  ASSERT_EQ(got.numel(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got.data()[i], want[i], tol) << "entry " << i;
}

}  // namespace

TEST(Primitives, MatmulIdentity) {
  Tensor eye(Shape{3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  Rng rng(1);
  Tensor a = Tensor::randn(rng, {3, 3}, 1.0);
  Tensor out = op::matmul(nullptr, eye, a);
  expect_allclose(out, *a.buf);
}

TEST(Primitives, SoftmaxUniformOnEqualLogits) {
  Tensor x(Shape{4}, {1, 1, 1, 1});
  Tensor s = op::softmax(nullptr, x);
  expect_allclose(s, {0.25, 0.25, 0.25, 0.25});
}

TEST(Primitives, LayerNormConstantRowIsZero) {
  Tensor x(Shape{4}, {3.7, 3.7, 3.7, 3.7});
  Tensor y = op::layer_norm(nullptr, x);
  expect_allclose(y, {0, 0, 0, 0});
}

TEST(Primitives, SoftmaxRowsAreSimplex) {
  Rng rng(7);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor x = Tensor::randn(rng, {5, 6}, 3.0);
    for (int axis : {0, 1}) {
      Tensor s = op::softmax(nullptr, x, axis);
      int groups = axis == 0 ? 6 : 5;
      int len = axis == 0 ? 5 : 6;
      for (int g = 0; g < groups; ++g) {
        double total = 0.0;
        for (int i = 0; i < len; ++i) {
          double v = axis == 0 ? s.at(i, g) : s.at(g, i);
          EXPECT_GE(v, 0.0);
          total += v;
        }
        EXPECT_NEAR(total, 1.0, 1e-9);
      }
    }
  }
}

TEST(Primitives, ShapeMismatchThrows) {
  Tensor a(Shape{2, 3});
  Tensor b(Shape{3, 3});
  EXPECT_THROW(op::add(nullptr, a, b), std::invalid_argument);
  EXPECT_THROW(op::matmul(nullptr, a, a), std::invalid_argument);
  EXPECT_THROW(op::slice(nullptr, a, 0, 1, 5), std::invalid_argument);
}

TEST(Primitives, NonFiniteForwardThrows) {
  Tensor x(Shape{2}, {-1.0, 2.0});
  EXPECT_THROW(op::log(nullptr, x), std::runtime_error);
}

TEST(Backward, DotProductGradients) {
  Tensor x(Shape{3}, {1, 2, 3});
  Tensor y(Shape{3}, {4, 5, 6});
  Tape tape;
  bind(&tape, x);
  bind(&tape, y);
  Tensor loss = op::dot(&tape, x, y);
  auto g = backward(tape, loss);
  expect_allclose(g[x.node], {4, 5, 6});
  expect_allclose(g[y.node], {1, 2, 3});
}

TEST(Backward, SumGradIsOnes) {
  Rng rng(3);
  Tensor x = Tensor::randn(rng, {2, 3}, 1.0);
  Tape tape;
  bind(&tape, x);
  Tensor loss = op::sum(&tape, x);
  auto g = backward(tape, loss);
  expect_allclose(g[x.node], {1, 1, 1, 1, 1, 1});
}

TEST(Backward, NonScalarLossRejected) {
  Tensor x(Shape{3}, {1, 2, 3});
  Tape tape;
  bind(&tape, x);
  Tensor y = op::mul_scalar(&tape, x, 2.0);
  EXPECT_THROW(backward(tape, y), std::invalid_argument);
}

TEST(Backward, ConcatSliceRoundTrip) {
  Rng rng(11);
  Tensor a = Tensor::randn(rng, {2, 3}, 1.0);
  Tensor b = Tensor::randn(rng, {2, 2}, 1.0);
  Tape tape;
  bind(&tape, a);
  bind(&tape, b);
  Tensor cat = op::concat(&tape, {a, b}, 1);
  Tensor back = op::slice(&tape, cat, 1, 0, 3);  // recover a
  Tensor loss = op::sum(&tape, back);
  auto g = backward(tape, loss);
  expect_allclose(g[a.node], {1, 1, 1, 1, 1, 1});
  expect_allclose(g[b.node], {0, 0, 0, 0});
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(99);
    Tensor w = Tensor::randn(rng, {4, 4}, 0.3);
    Tensor x = Tensor::randn(rng, {2, 4}, 1.0);
    Tape tape;
    bind(&tape, w);
    Tensor h = op::tanh(&tape, op::matmul(&tape, x, w));
    Tensor loss = op::mean(&tape, op::layer_norm(&tape, h));
    auto g = backward(tape, loss);
    return std::make_pair(loss.value(), *g[w.node].buf);
  };
  auto a = run();
  auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

// Every primitive with a backward rule, checked against central differences
// on random small inputs (extents <= 6, entries in [-1,1]).
TEST(GradCheck, EveryPrimitive) {
  Rng rng(17);
  auto randt = [&](Shape s) {
    Tensor t(s);
    for (auto& v : *t.buf) v = rng.uniform(-1.0, 1.0);
    return t;
  };

  struct Case {
    const char* name;
    std::function<double()> run;  // returns max rel err
  };

  auto check1 = [&](Tensor& a, auto&& body) {
    auto f = [&](Tape* t) {
      bind(t, a);
      return body(t);
    };
    return finite_diff_check(f, {{"a", &a}}).max_rel_error;
  };
  auto check2 = [&](Tensor& a, Tensor& b, auto&& body) {
    auto f = [&](Tape* t) {
      bind(t, a);
      bind(t, b);
      return body(t);
    };
    return finite_diff_check(f, {{"a", &a}, {"b", &b}}).max_rel_error;
  };

  {
    Tensor a = randt({3, 4}), b = randt({3, 4});
    EXPECT_LT(check2(a, b, [&](Tape* t) { return op::mean(t, op::add(t, a, b)); }), 1e-4) << "add";
    EXPECT_LT(check2(a, b, [&](Tape* t) { return op::mean(t, op::sub(t, a, b)); }), 1e-4) << "sub";
    EXPECT_LT(check2(a, b, [&](Tape* t) { return op::mean(t, op::mul(t, a, b)); }), 1e-4) << "mul";
  }
  {
    Tensor a = randt({2, 3});
    Tensor b(Shape{2, 3});
    for (auto& v : *b.buf) v = rng.uniform(0.5, 1.5);  // away from zero
    EXPECT_LT(check2(a, b, [&](Tape* t) { return op::mean(t, op::div(t, a, b)); }), 1e-4) << "div";
  }
  {
    Tensor a = randt({4});
    EXPECT_LT(check1(a, [&](Tape* t) { return op::mean(t, op::neg(t, a)); }), 1e-4) << "neg";
    EXPECT_LT(check1(a, [&](Tape* t) { return op::mean(t, op::tanh(t, a)); }), 1e-4) << "tanh";
    EXPECT_LT(check1(a, [&](Tape* t) { return op::mean(t, op::sigmoid(t, a)); }), 1e-4) << "sigmoid";
    EXPECT_LT(check1(a, [&](Tape* t) { return op::mean(t, op::exp(t, a)); }), 1e-4) << "exp";
    EXPECT_LT(check1(a, [&](Tape* t) { return op::mean(t, op::add_scalar(t, a, 0.7)); }), 1e-4)
        << "add_scalar";
    EXPECT_LT(check1(a, [&](Tape* t) { return op::mean(t, op::mul_scalar(t, a, -1.3)); }), 1e-4)
        << "mul_scalar";
    EXPECT_LT(check1(a, [&](Tape* t) { return op::l2_norm(t, a); }), 1e-4) << "l2_norm";
  }
  {
    Tensor a(Shape{5});
    for (auto& v : *a.buf) v = rng.uniform(0.2, 1.2);  // positive domain
    EXPECT_LT(check1(a, [&](Tape* t) { return op::mean(t, op::log(t, a)); }), 1e-4) << "log";
    EXPECT_LT(check1(a, [&](Tape* t) { return op::mean(t, op::sqrt(t, a)); }), 1e-4) << "sqrt";
  }
  {
    Tensor a(Shape{6});
    for (auto& v : *a.buf) {
      v = rng.uniform(-1.0, 1.0);
      if (std::fabs(v) < 1e-2) v = 0.3;  // keep away from the kinks
    }
    EXPECT_LT(check1(a, [&](Tape* t) { return op::mean(t, op::abs(t, a)); }), 1e-4) << "abs";
    EXPECT_LT(check1(a, [&](Tape* t) { return op::mean(t, op::hinge(t, a)); }), 1e-4) << "hinge";
  }
  {
    Tensor a = randt({3, 5}), v = randt({5});
    EXPECT_LT(check2(a, v, [&](Tape* t) { return op::mean(t, op::add_row(t, a, v)); }), 1e-4)
        << "add_row";
    EXPECT_LT(check2(a, v, [&](Tape* t) { return op::mean(t, op::mul_row(t, a, v)); }), 1e-4)
        << "mul_row";
  }
  {
    Tensor a = randt({3, 4}), b = randt({4, 2});
    EXPECT_LT(check2(a, b, [&](Tape* t) { return op::mean(t, op::matmul(t, a, b)); }), 1e-4)
        << "matmul";
    // weight the entries so the transpose mapping is actually exercised
    Tensor w = randt({4, 3});
    EXPECT_LT(check2(a, w, [&](Tape* t) { return op::mean(t, op::mul(t, op::transpose(t, a), w)); }),
              1e-4)
        << "transpose";
  }
  {
    Tensor a = randt({4, 5});
    Tensor w = randt({4, 5});
    for (int axis : {0, 1}) {
      EXPECT_LT(check2(a, w, [&](Tape* t) {
                  return op::mean(t, op::mul(t, op::softmax(t, a, axis), w));
                }),
                1e-4)
          << "softmax axis " << axis;
    }
    EXPECT_LT(check2(a, w, [&](Tape* t) {
                return op::mean(t, op::mul(t, op::layer_norm(t, a), w));
              }),
              1e-4)
        << "layer_norm";
    EXPECT_LT(check1(a, [&](Tape* t) { return op::mean(t, op::sum_axis(t, a, 0)); }), 1e-4)
        << "sum_axis0";
    EXPECT_LT(check1(a, [&](Tape* t) { return op::mean(t, op::sum_axis(t, a, 1)); }), 1e-4)
        << "sum_axis1";
    EXPECT_LT(check1(a, [&](Tape* t) { return op::mean(t, op::mean_axis(t, a, 0)); }), 1e-4)
        << "mean_axis0";
    EXPECT_LT(check1(a, [&](Tape* t) { return op::mean(t, op::mean_axis(t, a, 1)); }), 1e-4)
        << "mean_axis1";
  }
  {
    Tensor a = randt({2, 3}), b = randt({2, 2});
    Tensor w = randt({2, 5});
    auto f = [&](Tape* t) {
      bind(t, a);
      bind(t, b);
      Tensor cat = op::concat(t, {a, b}, 1);
      return op::mean(t, op::mul(t, cat, w));
    };
    EXPECT_LT(finite_diff_check(f, {{"a", &a}, {"b", &b}}).max_rel_error, 1e-4) << "concat";
  }
  {
    Tensor a = randt({5, 3});
    Tensor w = randt({2, 3});
    auto f = [&](Tape* t) {
      bind(t, a);
      return op::mean(t, op::mul(t, op::slice(t, a, 0, 1, 2), w));
    };
    EXPECT_LT(finite_diff_check(f, {{"a", &a}}).max_rel_error, 1e-4) << "slice";
  }
  {
    Tensor a = randt({4}), b = randt({4});
    Tensor w = randt({2, 4});
    auto f = [&](Tape* t) {
      bind(t, a);
      bind(t, b);
      return op::mean(t, op::mul(t, op::stack(t, {a, b}), w));
    };
    EXPECT_LT(finite_diff_check(f, {{"a", &a}, {"b", &b}}).max_rel_error, 1e-4) << "stack";
  }
  {
    Tensor x = randt({6, 3});  // T=6, Cin=3
    Tensor w = randt({3, 3, 2});
    Tensor m = randt({6, 2});
    auto f = [&](Tape* t) {
      bind(t, x);
      bind(t, w);
      return op::mean(t, op::mul(t, op::conv1d_causal(t, x, w), m));
    };
    EXPECT_LT(finite_diff_check(f, {{"x", &x}, {"w", &w}}).max_rel_error, 1e-4) << "conv1d";
  }
  {
    Tensor a = randt({6});
    Tensor w = randt({2, 3});
    auto f = [&](Tape* t) {
      bind(t, a);
      return op::mean(t, op::mul(t, op::reshape(t, a, {2, 3}), w));
    };
    EXPECT_LT(finite_diff_check(f, {{"a", &a}}).max_rel_error, 1e-4) << "reshape";
  }
}

TEST(GradCheck, QuadraticIsExactUnderCentralDifferences) {
  Tensor x = Tensor(Shape{}, {3.0});
  auto f = [&](Tape* t) {
    bind(t, x);
    return op::square(t, x);
  };
  Tape tape;
  Tensor loss = f(&tape);
  auto g = backward(tape, loss);
  EXPECT_DOUBLE_EQ(g[x.node].value(), 6.0);
  auto rep = finite_diff_check(f, {{"x", &x}});
  EXPECT_LT(rep.max_rel_error, 1e-9);
}

TEST(GradCheck, TanhTight) {
  Tensor x = Tensor(Shape{}, {0.5});
  auto f = [&](Tape* t) {
    bind(t, x);
    return op::tanh(t, x);
  };
  EXPECT_LT(finite_diff_check(f, {{"x", &x}}).max_rel_error, 1e-8);
}

TEST(GradCheck, SoftmaxPickComponent) {
  Tensor x(Shape{4}, {0.3, -0.2, 0.9, 0.1});
  auto f = [&](Tape* t) {
    bind(t, x);
    Tensor s = op::softmax(t, x);
    return op::sum(t, op::slice(t, s, 0, 2, 1));
  };
  EXPECT_LT(finite_diff_check(f, {{"x", &x}}).max_rel_error, 1e-6);
}

TEST(GradCheck, InjectedWrongBackwardRuleIsCaught) {
  Rng rng(23);
  Tensor x = Tensor::randn(rng, {4}, 0.8);
  Tape probe;  // tape carrying the fault flag must be the one f builds on
  auto f = [&](Tape* t) {
    if (t) {
      t->fault_op = Op::kTanh;
      t->fault_scale = 1.5;
    }
    bind(t, x);
    return op::mean(t, op::tanh(t, x));
  };
  auto rep = finite_diff_check(f, {{"x", &x}});
  EXPECT_GT(rep.max_rel_error, 1e-4);
}

TEST(Adam, FirstStepMatchesClosedForm) {
  ParamStore store;
  store.add("w", Tensor(Shape{3}, {0.5, -0.2, 1.0}));
  AdamState state = AdamState::init(store);
  std::vector<Tensor> grads{Tensor(Shape{3}, {1, 1, 1})};
  AdamConfig cfg;
  cfg.lr = 1e-3;
  cfg.weight_decay = 0.0;
  adam_step(store, grads, state, cfg);
  // after bias correction mhat = vhat = 1, so the step is lr/(1+eps)
  double expect = 1e-3 / (1.0 + 1e-8);
  expect_allclose(store.get("w"), {0.5 - expect, -0.2 - expect, 1.0 - expect}, 1e-15);
  EXPECT_EQ(state.t, 1);
}

TEST(Adam, ZeroGradZeroDecayLeavesParamsAlone) {
  ParamStore store;
  store.add("w", Tensor(Shape{2}, {0.7, -0.4}));
  AdamState state = AdamState::init(store);
  AdamConfig cfg;
  adam_step(store, {Tensor(Shape{2})}, state, cfg);
  expect_allclose(store.get("w"), {0.7, -0.4});
}

TEST(Adam, CoupledWeightDecayActsAsL2Gradient) {
  // one step with g=0, wd=1e-4 must equal one step with g=wd*param, wd=0
  ParamStore a, b;
  a.add("w", Tensor(Shape{2}, {2.0, -3.0}));
  b.add("w", Tensor(Shape{2}, {2.0, -3.0}));
  AdamState sa = AdamState::init(a), sb = AdamState::init(b);
  AdamConfig ca, cb;
  ca.weight_decay = 1e-4;
  cb.weight_decay = 0.0;
  adam_step(a, {Tensor(Shape{2})}, sa, ca);
  adam_step(b, {Tensor(Shape{2}, {1e-4 * 2.0, 1e-4 * -3.0})}, sb, cb);
  expect_allclose(a.get("w"), *b.get("w").buf, 0.0);
}

TEST(Snapshot, RoundTripAndMismatchDetection) {
  Rng rng(5);
  ParamStore store;
  store.add("layer.w", Tensor::randn(rng, {3, 4}, 0.2));
  store.add("layer.b", Tensor::randn(rng, {4}, 0.2));
  std::string path = ::testing::TempDir() + "/dbr_snapshot_test.bin";
  snapshot::save(store, path);

  ParamStore other;
  other.add("layer.w", Tensor(Shape{3, 4}));
  other.add("layer.b", Tensor(Shape{4}));
  snapshot::load_into(other, path);
  expect_allclose(other.get("layer.w"), *store.get("layer.w").buf, 0.0);
  expect_allclose(other.get("layer.b"), *store.get("layer.b").buf, 0.0);

  ParamStore wrong;
  wrong.add("layer.w", Tensor(Shape{4, 3}));
  wrong.add("layer.b", Tensor(Shape{4}));
  EXPECT_THROW(snapshot::load_into(wrong, path), std::runtime_error);
}
