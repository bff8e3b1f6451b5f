#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "mlmem/numerics.hpp"
#include "test_util.hpp"

using namespace mlmem;
using mlmem::testing::random_gru;
using mlmem::testing::random_tensor;
using mlmem::testing::random_values;
using mlmem::testing::zero_gru;

namespace {

std::vector<double> values(Tape<double>& t, Var v) {
  auto s = t.value(v);
  return {s.begin(), s.end()};
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(Softmax, HandExamples) {
  std::vector<double> zeros{0.0, 0.0};
  auto p = softmax<double>(zeros);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
  std::vector<double> one{123.4};
  EXPECT_DOUBLE_EQ(softmax<double>(one)[0], 1.0);
  std::vector<double> s{std::log(1.0), std::log(3.0)};
  p = softmax<double>(s);
  EXPECT_NEAR(p[0], 0.25, 1e-15);
  EXPECT_NEAR(p[1], 0.75, 1e-15);
}

TEST(Softmax, RejectsEmptyAndNonFinite) {
  std::vector<double> empty;
  EXPECT_THROW(softmax<double>(empty), NumericError);
  std::vector<double> bad{1.0, std::nan("")};
  EXPECT_THROW(softmax<double>(bad), NumericError);
  std::vector<double> inf{1.0, INFINITY};
  EXPECT_THROW(softmax<double>(inf), NumericError);
}

TEST(Softmax, SumsToOneAndIgnoresShift) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    auto s = random_values(1 + trial % 17, rng, -30, 30);
    auto p = softmax<double>(s);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-6);
    auto shifted = s;
    for (auto& x : shifted) x += 57.0;
    auto q = softmax<double>(shifted);
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-6);
  }
}

TEST(Tape, SegmentSoftmaxNormalizesEachSegment) {
  Tape<double> t;
  Var s = t.constant({5}, {1, 2, 3, 0, 0});
  auto p = values(t, t.segment_softmax(s, {3, 2}));
  EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-12);
  EXPECT_NEAR(p[3], 0.5, 1e-12);
  EXPECT_NEAR(p[4], 0.5, 1e-12);
  EXPECT_THROW(t.segment_softmax(s, {3, 3}), ShapeError);
}

TEST(Tape, LinearMatchesExplicitLoops) {
  std::mt19937_64 rng(5);
  auto w = random_tensor<double>({3, 7}, rng);
  auto x = random_values(8, rng);  // [2 x 4]
  Tape<double> t;
  Var y = t.linear(t.constant({2, 4}, x), t.param(w), 2);
  auto out = values(t, y);
  ASSERT_EQ(t.shape(y), (Shape{2, 3}));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t o = 0; o < 3; ++o) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += x[r * 4 + k] * w.data[o * 7 + 2 + k];
      EXPECT_NEAR(out[r * 3 + o], s, 1e-12);
    }
  EXPECT_THROW(t.linear(t.constant({2, 4}, x), t.param(w), 4), ShapeError);
}

TEST(Tape, SegmentSumAddsBlocksAndAllowsEmpty) {
  Tape<double> t;
  Var m = t.constant({3, 2}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(values(t, t.segment_sum(m, {2, 0, 1})), (std::vector<double>{4, 6, 0, 0, 5, 6}));
  EXPECT_EQ(values(t, t.segment_sum(m, {2, 1}, true)), (std::vector<double>{2, 3, 5, 6}));
}

TEST(Tape, ExpandAndGatherSum) {
  Tape<double> t;
  Var v = t.constant({2}, {0.25, 0.75});
  EXPECT_EQ(values(t, t.expand(v, {2, 1})), (std::vector<double>{0.25, 0.25, 0.75}));
  Var w = t.constant({3}, {0.1, 0.2, 0.3});
  EXPECT_NEAR(t.scalar(t.gather_sum(w, {0, 2})), 0.4, 1e-15);
}

TEST(Tape, SumAndDotGradients) {
  std::mt19937_64 rng(1);
  auto w = random_tensor<double>({5}, rng);
  {
    Tape<double> t;
    t.backward(t.sum(t.param(w)));
    for (double g : w.grad) EXPECT_DOUBLE_EQ(g, 1.0);
  }
  w.zero_grad();
  {
    Tape<double> t;
    Var p = t.param(w);
    t.backward(t.dot(p, p));
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(w.grad[i], 2 * w.data[i], 1e-15);
  }
}

TEST(Tape, ReuseAccumulatesGradients) {
  std::mt19937_64 rng(2);
  auto w = random_tensor<double>({4}, rng);
  auto c = random_values(4, rng);
  auto single = [&](Tape<double>& t, Var p) { return t.sum(t.mul(t.tanh(p), t.constant({4}, c))); };
  Tape<double> once;
  once.backward(single(once, once.param(w)));
  auto g1 = w.grad;
  w.zero_grad();
  Tape<double> thrice;
  Var p = thrice.param(w);
  Var total = thrice.add(thrice.add(single(thrice, p), single(thrice, p)), single(thrice, p));
  thrice.backward(total);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w.grad[i], 3 * g1[i], 1e-14);
}

TEST(Tape, LogFloorBlocksGradientBelowFloor) {
  Tensor<double> x({2}, {1e-20, 0.5}, true);
  Tape<double> t;
  Var y = t.log_floor(t.param(x), 1e-12);
  EXPECT_NEAR(t.value(y)[0], std::log(1e-12), 1e-12);
  t.backward(t.sum(y));
  EXPECT_EQ(x.grad[0], 0.0);
  EXPECT_NEAR(x.grad[1], 2.0, 1e-12);
}

TEST(Tape, ShapeMismatchThrows) {
  Tape<double> t;
  Var a = t.constant({2}, {1, 2});
  Var b = t.constant({3}, {1, 2, 3});
  EXPECT_THROW(t.add(a, b), ShapeError);
  EXPECT_THROW(t.dot(a, b), ShapeError);
  EXPECT_THROW(t.backward(a), ShapeError);
}

// Every differentiable primitive against central differences, many seeds.
class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(GetParam());
  auto a = random_tensor<double>({6}, rng);
  auto b = random_tensor<double>({6}, rng);
  auto m = random_tensor<double>({3, 6}, rng);
  auto emb = random_tensor<double>({5, 2}, rng);
  auto s = random_tensor<double>({1}, rng);
  const std::vector<std::size_t> ids{4, 0, 4};
  LossBuilder build = [&](Tape<double>& t) {
    Var A = t.param(a), B = t.param(b), M = t.param(m), S = t.param(s);
    Var e = t.lookup(emb, ids);  // [3 x 2]
    Var cat = t.concat({t.row(e, 0), t.row(e, 2), t.row(e, 1)});
    Var x = t.add(t.mul(A, t.tanh(B)), t.sigmoid(t.sub(A, B)));
    Var y = t.scale_by(t.one_minus(t.softmax(x)), S);
    Var z = t.linear(y, M);        // [3]
    Var mv = t.matvec(M, t.softmax(B));
    Var vm = t.vecmat(t.softmax(z), M);  // [6]
    Var seg = t.segment_softmax(t.add(vm, x), {2, 4});
    Var rows = t.stack_rows(std::vector<Var>{t.scale(vm, 0.5), x});
    Var blocks = t.concat_rows(std::vector<Var>{rows, M});
    Var ss = t.segment_sum(blocks, {2, 0, 3});
    Var added = t.add_row(ss, t.row(M, 1));
    Var ex = t.expand(t.softmax(cat), {1, 2, 0, 1, 1, 1});
    Var g = t.gather_sum(t.mul(ex, seg), {0, 3, 5, 3});
    Var lg = t.log_floor(t.add(g, t.constant({1}, {2.0})), 1e-12);
    return t.add(t.add(t.add(t.sum(t.tanh(added)), t.dot(x, seg)), lg), t.dot(z, mv));
  };
  auto r = grad_check(build, {{"a", &a}, {"b", &b}, {"m", &m}, {"emb", &emb}, {"s", &s}});
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_parameter << "[" << r.worst_index << "]";
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradient, ::testing::Range(0, 20));

TEST(GradCheck, ExactOnSumOfSquaresAndDeadParameters) {
  std::mt19937_64 rng(9);
  auto w = random_tensor<double>({7}, rng);
  auto dead = random_tensor<double>({3}, rng);
  auto r = grad_check([&](Tape<double>& t) {
    Var p = t.param(w);
    t.param(dead);
    return t.dot(p, p);
  }, {{"w", &w}, {"dead", &dead}});
  EXPECT_LT(r.max_relative_error, 1e-7);
  EXPECT_EQ(r.checked, 10u);
}

TEST(Gru, ZeroWeightsHalveTheState) {
  auto g = zero_gru<double>(3, 4);
  Tape<double> t;
  GruVars v = bind_gru(t, g);
  Var h = t.constant({4}, {1, -2, 3, 0.5});
  auto out = values(t, gru_cell(t, v, t.constant({3}, {9, 9, 9}), h));
  EXPECT_EQ(out, (std::vector<double>{0.5, -1, 1.5, 0.25}));
}

TEST(Gru, ZeroInputAndStateWithZeroBiasesStaysZero) {
  std::mt19937_64 rng(4);
  auto g = random_gru<double>(3, 4, rng);
  for (auto* b : {&g.b_z, &g.b_r, &g.b_n}) std::fill(b->data.begin(), b->data.end(), 0.0);
  Tape<double> t;
  GruVars v = bind_gru(t, g);
  for (double x : values(t, gru_cell(t, v, t.zeros({3}), t.zeros({4})))) EXPECT_EQ(x, 0.0);
}

TEST(Gru, MatchesHandWrittenCell) {
  std::mt19937_64 rng(6);
  const std::size_t I = 3, H = 4;
  auto g = random_gru<double>(I, H, rng);
  auto x = random_values(I, rng);
  auto h = random_values(H, rng);
  auto affine = [&](const Tensor<double>& w, const Tensor<double>& u, const Tensor<double>& b,
                    const std::vector<double>& hh, std::size_t o) {
    double s = b.data[o];
    for (std::size_t k = 0; k < I; ++k) s += w.data[o * I + k] * x[k];
    for (std::size_t k = 0; k < H; ++k) s += u.data[o * H + k] * hh[k];
    return s;
  };
  std::vector<double> expect(H), z(H), r(H), rh(H);
  for (std::size_t o = 0; o < H; ++o) {
    z[o] = sigmoid(affine(g.w_z, g.u_z, g.b_z, h, o));
    r[o] = sigmoid(affine(g.w_r, g.u_r, g.b_r, h, o));
  }
  for (std::size_t o = 0; o < H; ++o) rh[o] = r[o] * h[o];
  for (std::size_t o = 0; o < H; ++o) {
    const double n = std::tanh(affine(g.w_n, g.u_n, g.b_n, rh, o));
    expect[o] = (1 - z[o]) * h[o] + z[o] * n;
  }
  Tape<double> t;
  GruVars v = bind_gru(t, g);
  auto out = values(t, gru_cell(t, v, t.constant({I}, x), t.constant({H}, h)));
  for (std::size_t o = 0; o < H; ++o) EXPECT_NEAR(out[o], expect[o], 1e-14);
}

TEST(Gru, ProjectedStepsEqualCells) {
  std::mt19937_64 rng(8);
  auto g = random_gru<double>(3, 5, rng);
  auto xs = random_values(12, rng);
  Tape<double> t;
  GruVars v = bind_gru(t, g);
  Var X = t.constant({4, 3}, xs);
  auto proj = gru_project_inputs(t, v, X);
  Var h1 = t.zeros({5}), h2 = t.zeros({5});
  for (std::size_t i = 0; i < 4; ++i) {
    h1 = gru_cell(t, v, t.row(X, i), h1);
    h2 = gru_step_projected(t, v, proj, i, h2);
  }
  auto a = values(t, h1), b = values(t, h2);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
}

TEST(Gru, GradientMatchesFiniteDifferences) {
  for (int seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto g = random_gru<double>(3, 4, rng);
    auto x = random_tensor<double>({3}, rng);
    auto h = random_tensor<double>({4}, rng);
    auto r = grad_check([&](Tape<double>& t) {
      GruVars v = bind_gru(t, g);
      Var out = gru_cell(t, v, t.param(x), t.param(h));
      out = gru_cell(t, v, t.param(x), out);
      return t.sum(t.tanh(out));
    }, {{"w_z", &g.w_z}, {"u_z", &g.u_z}, {"b_z", &g.b_z}, {"w_r", &g.w_r}, {"u_r", &g.u_r},
        {"b_r", &g.b_r}, {"w_n", &g.w_n}, {"u_n", &g.u_n}, {"b_n", &g.b_n}, {"x", &x}, {"h", &h}});
    EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_parameter;
  }
}
