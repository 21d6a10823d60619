#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "hdril/layers.hpp"

using namespace hdril;
using namespace hdril::ad;
using namespace hdril::nn;
using hdril::testing::grad_check;
using hdril::testing::random_tensor;

namespace {

void zero(Parameter& p) { p.value.fill(0.0); }

template <class L>
std::vector<Parameter*> params_of(L& layer) {
  std::vector<Parameter*> out;
  layer.for_each_parameter([&](Parameter& p) { out.push_back(&p); });
  return out;
}

}  // namespace

TEST(Linear, ZeroWeightGivesBias) {
  Rng rng(1);
  Linear l = make_linear("l", 3, 2, rng);
  zero(l.weight);
  l.bias.value = Tensor::vector({1, 2});
  Tape t;
  Var y = linear_forward(t, l, t.constant(Tensor::vector({4, -5, 6})));
  EXPECT_EQ(y.value().data, (std::vector<double>{1, 2}));
}

TEST(Linear, IdentityWeightPassesInput) {
  Rng rng(1);
  Linear l = make_linear("l", 3, 3, rng);
  l.weight.value = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tape t;
  Var y = linear_forward(t, l, t.constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6})));
  EXPECT_EQ(y.value().data, (std::vector<double>{1, 2, 3, 4, 5, 6}));
}

TEST(Linear, WidthMismatchThrows) {
  Rng rng(1);
  Linear l = make_linear("l", 3, 2, rng);
  Tape t;
  EXPECT_THROW(linear_forward(t, l, t.constant(Tensor::vector({1, 2}))), DimensionError);
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  Linear l = make_linear("l", 4, 3, rng);
  l.bias.value = random_tensor({3}, rng);
  Parameter x("x", random_tensor({2, 4}, rng));
  auto ps = params_of(l);
  ps.push_back(&x);
  const auto r = grad_check(ps, [&](Tape& t) { return sum(ad::tanh(linear_forward(t, l, t.leaf(x)))); });
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(GRU, ZeroWeightsHalveHiddenState) {
  Rng rng(2);
  GRUCell g = make_gru("g", 3, 4, rng);
  g.for_each_parameter([](Parameter& p) { p.value.fill(0.0); });
  Tape t;
  const auto vars = bind(t, g, false);
  Var x = t.constant(Tensor::matrix(1, 3, {0.4, -1, 2}));
  Var h = t.constant(Tensor::matrix(1, 4, {1, -2, 0.5, 3}));
  EXPECT_EQ(gru_cell_step(vars, x, h).value().data, (std::vector<double>{0.5, -1, 0.25, 1.5}));
  Var h0 = t.constant(Tensor(Shape{1, 4}, 0.0));
  EXPECT_EQ(gru_cell_step(vars, x, h0).value().data, (std::vector<double>(4, 0.0)));
}

TEST(GRU, WidthMismatchThrows) {
  Rng rng(2);
  GRUCell g = make_gru("g", 3, 4, rng);
  Tape t;
  const auto vars = bind(t, g, false);
  EXPECT_THROW(gru_cell_step(vars, t.constant(Tensor(Shape{1, 2})), t.constant(Tensor(Shape{1, 4}))), DimensionError);
  EXPECT_THROW(gru_cell_step(vars, t.constant(Tensor(Shape{1, 3})), t.constant(Tensor(Shape{1, 5}))), DimensionError);
}

TEST(GRU, ThreeChainedStepsMatchFiniteDifferences) {
  Rng rng(8);
  GRUCell g = make_gru("g", 3, 5, rng);
  g.for_each_parameter([&](Parameter& p) {
    for (double& v : p.value.data) v = uniform(rng, -1, 1);
  });
  std::vector<Tensor> xs = {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)};
  Parameter h0("h0", random_tensor({2, 5}, rng, -1, 1));
  Tensor target = random_tensor({2, 5}, rng, -1, 1);
  auto ps = params_of(g);
  ps.push_back(&h0);
  const auto r = grad_check(ps, [&](Tape& t) {
    const auto vars = bind(t, g, true);
    Var h = t.leaf(h0);
    for (const Tensor& x : xs) h = gru_cell_step(vars, t.constant(x), h);
    return mse(h, t.constant(target));
  });
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(GRU, OutputBoundedByHiddenAndTanhRange) {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    GRUCell g = make_gru("g", 4, 6, rng);
    g.for_each_parameter([&](Parameter& p) {
      for (double& v : p.value.data) v = uniform(rng, -3, 3);
    });
    Tape t;
    const Tensor h = random_tensor({3, 6}, rng, -4, 4);
    const Tensor out = gru_cell_step(bind(t, g, false), t.constant(random_tensor({3, 4}, rng, -5, 5)), t.constant(h)).value();
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_LE(std::abs(out.data[i]), std::max(std::abs(h.data[i]), 1.0) + 1e-12);
  }
}

TEST(GAT, IdenticalNodesGiveUniformAttention) {
  Rng rng(21);
  GATLayer g = make_gat("gat", 21, 1, 4, 1, rng);
  const std::vector<double> features(21, 0.731);
  const Tensor alpha = attention_weights(g, features);
  for (double a : alpha.data) EXPECT_NEAR(a, 1.0 / 21.0, 1e-9);
  EXPECT_NEAR(alpha.data[0], 0.0477, 1e-4);  // 1/21 = 0.04762
}

TEST(GAT, SingleNodeIsActivatedProjection) {
  Rng rng(4);
  GATLayer g = make_gat("gat", 1, 2, 3, 1, rng);
  Tape t;
  const std::vector<double> h = {0.3, -1.1};
  Var y = gat_forward(g, bind(t, g, false), t.constant(Tensor::matrix(1, 2, h)));
  const auto& w = g.heads[0].weight.value;
  for (std::size_t p = 0; p < 3; ++p) {
    const double wh = w(p, 0) * h[0] + w(p, 1) * h[1];
    EXPECT_NEAR(y.value().data[p], wh > 0 ? wh : std::expm1(wh), 1e-15);
  }
  g.activation = Activation::Identity;
  Var y2 = gat_forward(g, bind(t, g, false), t.constant(Tensor::matrix(1, 2, h)));
  EXPECT_NEAR(y2.value().data[0], w(0, 0) * h[0] + w(0, 1) * h[1], 1e-15);
}

TEST(GAT, EmptyGraphAndWidthErrors) {
  Rng rng(4);
  GATLayer g = make_gat("gat", 0, 1, 3, 1, rng);
  Tape t;
  EXPECT_THROW(gat_forward(g, bind(t, g, false), t.constant(Tensor(Shape{1, 0}))), ContractError);
  GATLayer g2 = make_gat("gat", 5, 1, 3, 1, rng);
  EXPECT_THROW(gat_forward(g2, bind(t, g2, false), t.constant(Tensor(Shape{1, 4}))), DimensionError);
}

TEST(GAT, AttentionRowsAreDistributions) {
  Rng rng(30);
  for (int trial = 0; trial < 100; ++trial) {
    GATLayer g = make_gat("gat", 21, 1, 4, 1, rng);
    const Tensor x = random_tensor({21}, rng, -3, 3);
    const Tensor alpha = attention_weights(g, x.data);
    for (std::size_t u = 0; u < 21; ++u) {
      double s = 0.0;
      for (std::size_t v = 0; v < 21; ++v) {
        EXPECT_GE(alpha(u, v), 0.0);
        s += alpha(u, v);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(GAT, PermutationEquivariance) {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 7, d = 2, w = 3;
    GATLayer g = make_gat("gat", n, d, w, 2, rng);
    const Tensor x = random_tensor({1, n * d}, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor xp(Shape{1, n * d});
    for (std::size_t u = 0; u < n; ++u)
      for (std::size_t k = 0; k < d; ++k) xp.data[u * d + k] = x.data[perm[u] * d + k];
    Tape t;
    const Tensor y = gat_forward(g, bind(t, g, false), t.constant(x)).value();
    const Tensor yp = gat_forward(g, bind(t, g, false), t.constant(xp)).value();
    for (std::size_t head = 0; head < 2; ++head)
      for (std::size_t u = 0; u < n; ++u)
        for (std::size_t p = 0; p < w; ++p)
          EXPECT_NEAR(yp.data[head * n * w + u * w + p], y.data[head * n * w + perm[u] * w + p], 1e-12);
  }
}

TEST(GAT, GradientMatchesFiniteDifferences) {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    GATLayer g = make_gat("gat", 6, 2, 3, 2, rng);
    Parameter x("x", random_tensor({3, 12}, rng));
    Tensor target = random_tensor({3, 36}, rng, -1, 1);
    auto ps = params_of(g);
    ps.push_back(&x);
    const auto r = grad_check(ps, [&](Tape& t) { return mse(gat_forward(g, bind(t, g, true), t.leaf(x)), t.constant(target)); });
    EXPECT_LT(r.max_rel_error, 1e-4) << "trial " << trial;
  }
}

TEST(Init, SameSeedSameParameters) {
  Rng a(77), b(77);
  const GRUCell ga = make_gru("g", 5, 7, a);
  const GRUCell gb = make_gru("g", 5, 7, b);
  EXPECT_EQ(ga.w_update.value, gb.w_update.value);
  EXPECT_EQ(ga.u_candidate.value, gb.u_candidate.value);
}

TEST(Init, WeightsWithinGlorotBoundAndBiasesZero) {
  Rng rng(5);
  const Linear l = make_linear("l", 30, 10, rng);
  const double bound = std::sqrt(6.0 / 40.0);
  for (double v : l.weight.value.data) EXPECT_LE(std::abs(v), bound);
  for (double v : l.bias.value.data) EXPECT_EQ(v, 0.0);
  const GRUCell g = make_gru("g", 3, 8, rng);
  for (double v : g.b_reset.value.data) EXPECT_EQ(v, 0.0);
  for (double v : g.u_reset.value.data) EXPECT_LE(std::abs(v), std::sqrt(6.0 / 16.0));
}
