#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "semgan/losses.hpp"

using namespace semgan;
using namespace semgan::losses;
using semgan::testing::finite_difference_check;
using semgan::testing::random_tensor;

namespace {

Tensor<double> filled(Shape s, double v) { return Tensor<double>(s, v); }

double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

TEST(Adversarial, LogFormConstantHalfDiscriminator) {
  // sigmoid(0) = 0.5 everywhere.
  auto real = filled({1, 1, 6, 6}, 0.0);
  auto fake = filled({1, 1, 6, 6}, 0.0);
  EXPECT_NEAR(adversarial_loss(real, fake, Role::discriminator, AdvForm::log_form),
              2.0 * std::log(2.0), 1e-12);
  EXPECT_NEAR(2.0 * std::log(2.0), 1.3863, 1e-4);
}

TEST(Adversarial, LeastSquaresExamples) {
  auto half = filled({1, 1, 6, 6}, 0.5);
  EXPECT_DOUBLE_EQ(adversarial_loss(Tensor<double>(), half, Role::generator, AdvForm::least_squares),
                   0.25);
  EXPECT_DOUBLE_EQ(adversarial_loss(filled({1, 1, 6, 6}, 1.0), filled({1, 1, 6, 6}, 0.0),
                                    Role::discriminator, AdvForm::least_squares),
                   0.0);
}

TEST(Adversarial, ShapeMismatchThrows) {
  EXPECT_THROW(adversarial_loss(filled({1, 1, 6, 6}, 1.0), filled({1, 1, 5, 5}, 0.0),
                                Role::discriminator, AdvForm::log_form),
               ShapeError);
}

TEST(Adversarial, NonNegative) {
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    auto r = random_tensor({1, 1, 4, 4}, rng, 3.0);
    auto f = random_tensor({1, 1, 4, 4}, rng, 3.0);
    for (auto form : {AdvForm::log_form, AdvForm::least_squares}) {
      EXPECT_GE(adversarial_loss(r, f, Role::discriminator, form), 0.0);
      EXPECT_GE(adversarial_loss(r, f, Role::generator, form), 0.0);
    }
  }
}

TEST(Cycle, WorkedExamples) {
  Rng rng(1);
  auto xa = random_tensor({1, 3, 8, 8}, rng);
  auto xb = random_tensor({1, 3, 8, 8}, rng);
  EXPECT_DOUBLE_EQ(cycle_loss(xa, xa, xb, xb), 0.0);
  auto shift = [](Tensor<double> t, double d) {
    for (auto& v : t.vec()) v += d;
    return t;
  };
  EXPECT_NEAR(cycle_loss(xa, shift(xa, 0.1), xb, shift(xb, 0.1)), 0.2, 1e-12);
  EXPECT_NEAR(cycle_loss(xa, xa, xb, shift(xb, 0.5)), 0.5, 1e-12);
  // Symmetric under swapping the two directions.
  auto ra = shift(xa, 0.3);
  auto rb = shift(xb, -0.2);
  EXPECT_DOUBLE_EQ(cycle_loss(xa, ra, xb, rb), cycle_loss(xb, rb, xa, ra));
}

TEST(Identity, WorkedExamples) {
  Rng rng(2);
  auto xa = random_tensor({1, 3, 8, 8}, rng);
  auto xb = random_tensor({1, 3, 8, 8}, rng);
  EXPECT_DOUBLE_EQ(identity_loss(xb, xb, xa, xa), 0.0);
  auto ga = xb, gb = xa;
  for (auto& v : ga.vec()) v += 0.1;
  for (auto& v : gb.vec()) v -= 0.1;
  EXPECT_NEAR(identity_loss(ga, xb, gb, xa), 0.2, 1e-12);
  EXPECT_THROW(identity_loss(Tensor<double>({1, 3, 4, 4}), xb, gb, xa), ShapeError);
}

TEST(TotalObjective, LinearCombination) {
  LossComponents ones{1, 1, 1, 1, 1};
  EXPECT_DOUBLE_EQ(total_objective(ones, {10, 5, 1, AdvForm::least_squares}).total, 18.0);
  LossComponents c{0.7, 0.3, 0.2, 0.11, 4.0};
  EXPECT_DOUBLE_EQ(total_objective(c, {0, 0, 0, AdvForm::least_squares}).total, 1.0);
  // lambda_t = 0 collapses to the four-term objective exactly.
  const double four = c.adv_ab + c.adv_ba + 10.0 * c.cycle + 5.0 * c.identity;
  EXPECT_EQ(total_objective(c, {10, 5, 0, AdvForm::least_squares}).total, four);
  // Doubling lambda_c doubles the cycle contribution.
  const double t1 = total_objective(c, {10, 5, 1, AdvForm::least_squares}).total;
  const double t2 = total_objective(c, {20, 5, 1, AdvForm::least_squares}).total;
  EXPECT_NEAR(t2 - t1, 10.0 * c.cycle, 1e-12);
  EXPECT_THROW(total_objective(c, {-1, 5, 1, AdvForm::least_squares}), std::invalid_argument);
}

class DetectionLossTest : public ::testing::Test {
 protected:
  nets::ArchConfig arch = nets::ArchConfig::detector(64, 4);

  nets::DetectorOutputs<double> grid(double fill) {
    return {Var<double>(filled({1, 18, 4, 4}, fill), true),
            Var<double>(filled({1, 18, 8, 8}, fill), true)};
  }
};

TEST_F(DetectionLossTest, ConfidentBackground) {
  auto g = grid(0.0);
  for (auto* t : {&g.coarse, &g.fine}) {
    auto v = t->value();
    for (int a = 0; a < 3; ++a)
      for (int i = 0; i < v.shape().h; ++i)
        for (int j = 0; j < v.shape().w; ++j) v.at(0, a * 6 + 4, i, j) = -10.0;
    *t = Var<double>(v, true);
  }
  auto loss = detection_task_loss(arch, g, {{}});
  EXPECT_LT(loss.item(), 1e-3);
  EXPECT_GE(loss.item(), 0.0);
}

TEST_F(DetectionLossTest, PerfectPredictionIsNearZero) {
  const std::vector<BoundingBox> targets{{0, 0.30, 0.40, 0.12, 0.11}, {0, 0.70, 0.60, 0.38, 0.41}};
  Tensor<double> coarse = filled({1, 18, 4, 4}, -30.0);
  Tensor<double> fine = filled({1, 18, 8, 8}, -30.0);
  std::vector<nets::Anchor> anchors = arch.anchors;
  auto assigned = losses::detail::assign_targets({4, 8}, {nets::scale_anchors(arch, 0),
                                                          nets::scale_anchors(arch, 1)},
                                                 targets);
  ASSERT_EQ(assigned.size(), 2u);
  for (const auto& as : assigned) {
    Tensor<double>& t = as.scale == 0 ? coarse : fine;
    const int size = as.scale == 0 ? 4 : 8;
    const auto an = nets::scale_anchors(arch, as.scale)[as.anchor];
    const int base = as.anchor * 6;
    t.at(0, base + 0, as.cy, as.cx) = logit(as.box.cx * size - as.cx);
    t.at(0, base + 1, as.cy, as.cx) = logit(as.box.cy * size - as.cy);
    t.at(0, base + 2, as.cy, as.cx) = std::log(as.box.w / an.w);
    t.at(0, base + 3, as.cy, as.cx) = std::log(as.box.h / an.h);
    t.at(0, base + 4, as.cy, as.cx) = 30.0;
    t.at(0, base + 5, as.cy, as.cx) = 30.0;
  }
  auto loss = detection_task_loss(arch, nets::DetectorOutputs<double>{Var<double>(coarse), Var<double>(fine)},
                                   std::vector<std::vector<BoundingBox>>{targets});
  EXPECT_LT(loss.item(), 1e-3);
  // The decoded boxes are the targets.
  auto dets = nets::decode_detections(nets::to_grid(arch, coarse, fine), 0.5);
  ASSERT_EQ(dets.size(), 2u);
  for (const auto& d : dets) {
    double best = 0;
    for (const auto& t : targets) best = std::max(best, iou(d.box, t));
    EXPECT_NEAR(best, 1.0, 1e-9);
  }
}

TEST_F(DetectionLossTest, FiniteDifferenceOnRandomGrid) {
  Rng rng(17);
  Tensor<double> coarse = random_tensor({2, 18, 4, 4}, rng);
  Tensor<double> fine = random_tensor({2, 18, 8, 8}, rng);
  std::vector<std::vector<BoundingBox>> targets(2);
  for (auto& list : targets) {
    for (int i = 0; i < 3; ++i) {
      list.push_back({0, rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.05, 0.5),
                      rng.uniform(0.05, 0.5)});
    }
  }
  nets::DetectorOutputs<double> g{Var<double>(coarse, true), Var<double>(fine, true)};
  auto loss = detection_task_loss(arch, g, targets);
  backward(loss);
  auto f = [&]() {
    return detection_task_loss(arch, nets::DetectorOutputs<double>{Var<double>(coarse), Var<double>(fine)},
                               targets)
        .item();
  };
  auto res = finite_difference_check({&coarse, &fine}, {g.coarse.grad(), g.fine.grad()}, f, 400, rng);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst_analytic << " vs " << res.worst_numeric;
  // Value form agrees with graph form.
  EXPECT_NEAR(detection_task_loss(nets::to_grid(arch, coarse, fine), targets), loss.item(), 1e-12);
}
