#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "gradcheck.hpp"
#include "hdril/planner.hpp"

using namespace hdril;
using namespace hdril::plan;
using hdril::testing::grad_check;

namespace {

const task::Dataset& lift_demos() {
  static const task::Dataset ds = task::generate_dataset(task::table_lift_task(), task::make_scene(), 10, 21);
  return ds;
}

}  // namespace

TEST(Planner, ProbabilitiesFormADistribution) {
  const PlannerModel m = make_planner({}, 1);
  const auto& d = lift_demos().demos[0];
  for (std::size_t n = 1; n <= 4; ++n) {
    std::vector<StateVector> prefix(d.states.begin(), d.states.begin() + static_cast<std::ptrdiff_t>(n));
    const Decision a = plan_next(m, prefix);
    ASSERT_EQ(a.probabilities.size(), 6u);
    double s = 0.0;
    for (double p : a.probabilities) {
      EXPECT_GE(p, 0.0);
      s += p;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
    EXPECT_EQ(plan_next(m, prefix).probabilities, a.probabilities);
  }
  EXPECT_THROW(plan_next(m, {}), ContractError);
}

TEST(Planner, ZeroHeadIsUniformWithLowestIndexTieBreak) {
  PlannerModel m = make_planner({}, 2);
  m.decoder_fc.back().weight.value.fill(0.0);
  m.decoder_fc.back().bias.value.fill(0.0);
  const Decision d = plan_next(m, {lift_demos().demos[0].initial});
  for (double p : d.probabilities) EXPECT_NEAR(p, 1.0 / 6.0, 1e-15);
  EXPECT_EQ(d.primitive_id, 1);

  const auto ex = planner_examples(lift_demos(), 6, PlannerInput::Boundary);
  std::vector<const Example*> batch;
  for (const auto& e : ex)
    if (e.prefix.size() == 3) batch.push_back(&e);
  Tape t;
  EXPECT_NEAR(planner_loss(t, m, batch).value().item(), std::log(6.0), 1e-12);
}

TEST(Planner, ArgmaxIgnoresMonotoneTransforms) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(6);
    for (double& v : logits) v = std::round(uniform(rng, -3, 3));  // ties are common
    const auto softmax = [](std::vector<double> x) {
      double mx = *std::max_element(x.begin(), x.end()), s = 0.0;
      for (double& v : x) s += (v = std::exp(v - mx));
      for (double& v : x) v /= s;
      return x;
    };
    std::vector<double> cubed = logits, shifted = logits;
    for (double& v : cubed) v = v * v * v;
    for (double& v : shifted) v = 0.5 * v - 7.0;
    const std::size_t k = argmax(softmax(logits));
    EXPECT_EQ(argmax(softmax(cubed)), k);
    EXPECT_EQ(argmax(softmax(shifted)), k);
    EXPECT_EQ(argmax(logits), k);
    for (std::size_t j = 0; j < k; ++j) EXPECT_LT(logits[j], logits[k]);
  }
}

TEST(Planner, BoundaryExamples) {
  const auto ex = planner_examples(lift_demos(), 6, PlannerInput::Boundary);
  ASSERT_EQ(ex.size(), 60u);
  const auto& d = lift_demos().demos[0];
  for (int k = 0; k < 6; ++k) {
    EXPECT_EQ(ex[static_cast<std::size_t>(k)].label, k + 1);
    EXPECT_EQ(ex[static_cast<std::size_t>(k)].prefix.size(), static_cast<std::size_t>(k + 1));
  }
  EXPECT_EQ(ex[0].prefix[0], d.initial);
  EXPECT_EQ(ex[2].prefix[2], d.states[23]);
  EXPECT_EQ(planner_examples(lift_demos(), 6, PlannerInput::EveryStep).size(), 700u);
  EXPECT_THROW(planner_examples(lift_demos(), 5, PlannerInput::Boundary), DataError);
}

TEST(Planner, GradientMatchesFiniteDifferences) {
  PlannerConfig c;
  c.state_width = 14;
  c.classes = 4;
  c.hidden = 5;
  c.gat_width = 2;
  c.encoder_fc = 2;
  c.decoder_fc = 2;
  PlannerModel m = make_planner(c, 4);
  Rng rng(5);
  std::vector<Example> ex(3);
  for (std::size_t i = 0; i < ex.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      StateVector s(14);
      for (double& v : s) v = uniform(rng, -1, 1);
      ex[i].prefix.push_back(s);
    }
    ex[i].label = static_cast<int>(i) + 1;
  }
  const std::vector<const Example*> batch = {&ex[0], &ex[1], &ex[2]};
  std::vector<Parameter*> ps;
  m.for_each_parameter([&](Parameter& p) { ps.push_back(&p); });
  const auto r = grad_check(ps, [&](Tape& t) { return planner_loss(t, m, batch); });
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Planner, MemorizesTenDemos) {
  PlannerModel m = make_planner({}, 6);
  PlannerTrainConfig cfg;
  cfg.epochs = 150;
  cfg.seed = 7;
  const auto h = train_planner(m, lift_demos(), cfg);
  EXPECT_EQ(planner_accuracy(m, lift_demos()), 1.0);
  EXPECT_LT(h.back(), 0.1 * h.front());
  EXPECT_EQ(plan_next(m, {lift_demos().demos[3].initial}).primitive_id, 1);

  PlannerModel again = make_planner({}, 6);
  EXPECT_EQ(train_planner(again, lift_demos(), cfg), h);

  std::ostringstream os;
  ckpt::write(os, to_records(m));
  std::istringstream is(os.str());
  const PlannerModel back = planner_from_records(ckpt::read(is));
  const std::vector<StateVector> prefix = {lift_demos().demos[1].initial, lift_demos().demos[1].states[11]};
  EXPECT_EQ(plan_next(back, prefix).probabilities, plan_next(m, prefix).probabilities);
  std::ostringstream again_bytes;
  ckpt::write(again_bytes, to_records(back));
  EXPECT_EQ(again_bytes.str(), os.str());
}
