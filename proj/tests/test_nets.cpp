#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "semgan/nets.hpp"

using namespace semgan;
using namespace semgan::nets;
using semgan::testing::finite_difference_check;
using semgan::testing::project;
using semgan::testing::project_var;
using semgan::testing::random_tensor;

namespace {

Tensor<double> random_image(int size, Rng& rng) {
  Tensor<double> t({1, 3, size, size});
  for (auto& v : t.vec()) v = rng.uniform(-1.0, 1.0);
  return t;
}

// Checks d(projection of net output)/d(params) on 120 random parameters.
template <typename Forward>
void expect_param_gradients(NetworkHandle<double>& h, const Tensor<double>& x, Forward fwd) {
  Rng rng(99);
  auto bound = bind(h, true);
  Var<double> y = fwd(h.arch, bound, Var<double>(x));
  Tensor<double> r = random_tensor(y.shape(), rng);
  backward(project_var(y, r));
  auto analytic = gradients(bound);
  std::vector<Tensor<double>*> targets;
  for (auto& p : h.params) targets.push_back(&p);
  auto loss = [&]() {
    auto b = bind(h, false);
    return project(fwd(h.arch, b, Var<double>(x)).value(), r);
  };
  auto res = finite_difference_check(targets, analytic, loss, 120, rng);
  EXPECT_EQ(res.checked, 120);
  EXPECT_LT(res.max_rel_error, 1e-4) << "param tensor " << res.worst_tensor << " analytic "
                                     << res.worst_analytic << " numeric " << res.worst_numeric;
}

}  // namespace

TEST(Generator, OutputInTanhRangeAndDeterministic) {
  auto g = make_network<float>(ArchConfig::generator(16, 4, 2), 3);
  Rng rng(1);
  Tensor<float> x({1, 3, 16, 16});
  for (auto& v : x.vec()) v = static_cast<float>(rng.uniform(-3.0, 3.0));
  auto y1 = generator_forward(g, x);
  auto y2 = generator_forward(g, x);
  EXPECT_EQ(y1.shape(), x.shape());
  EXPECT_EQ(y1, y2);
  for (float v : y1.vec()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Generator, ShapeMismatchThrows) {
  auto g = make_network<float>(ArchConfig::generator(16, 4, 1), 3);
  EXPECT_THROW(generator_forward(g, Tensor<float>({1, 3, 8, 8})), ShapeError);
  auto d = make_network<float>(ArchConfig::discriminator(16, 4, 1), 3);
  EXPECT_THROW(generator_forward(d, Tensor<float>({1, 3, 16, 16})), std::invalid_argument);
}

TEST(Generator, FiniteDifferenceParameters) {
  auto g = make_network<double>(ArchConfig::generator(8, 4, 2), 11);
  // Larger init keeps pre-activations away from the ReLU kink.
  Rng rng(2);
  for (auto& p : g.params) for (auto& v : p.vec()) v = rng.normal(0.0, 0.5);
  Rng img(3);
  expect_param_gradients(g, random_image(8, img), [](const ArchConfig& a, auto& p, const Var<double>& x) {
    return generator_graph<double>(a, p, x);
  });
}

TEST(Generator, FiniteDifferenceInput) {
  auto g = make_network<double>(ArchConfig::generator(8, 4, 1), 12);
  Rng rng(4);
  for (auto& p : g.params) for (auto& v : p.vec()) v = rng.normal(0.0, 0.5);
  Tensor<double> x = random_image(8, rng);
  auto bound = bind(g, false);
  Var<double> xv(x, true);
  Tensor<double> r = random_tensor({1, 3, 8, 8}, rng);
  backward(project_var(generator_graph<double>(g.arch, bound, xv), r));
  auto loss = [&]() { return project(generator_forward(g, x), r); };
  auto res = finite_difference_check({&x}, {xv.grad()}, loss, 120, rng);
  EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(Discriminator, DefaultPatchMapIs6x6At64px) {
  auto d = make_network<float>(ArchConfig::discriminator(64, 8, 3), 5);
  auto y = discriminator_forward(d, Tensor<float>({1, 3, 64, 64}, 0.25f));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 6, 6}));
}

TEST(Discriminator, ZeroParametersGiveConstantMap) {
  auto d = make_network<float>(ArchConfig::discriminator(32, 4, 3), 5);
  for (auto& p : d.params) p.fill(0.0f);
  Rng rng(6);
  Tensor<float> x({1, 3, 32, 32});
  for (auto& v : x.vec()) v = static_cast<float>(rng.uniform(-1, 1));
  auto y = discriminator_forward(d, x);
  for (float v : y.vec()) EXPECT_EQ(v, y[0]);
}

TEST(Discriminator, FiniteDifferenceParameters) {
  // 8x8 cannot host three stride-2 layers; one down layer keeps all maps >= 2x2.
  auto d = make_network<double>(ArchConfig::discriminator(8, 4, 1), 13);
  Rng rng(7);
  for (auto& p : d.params) for (auto& v : p.vec()) v = rng.normal(0.0, 0.5);
  expect_param_gradients(d, random_image(8, rng), [](const ArchConfig& a, auto& p, const Var<double>& x) {
    return discriminator_graph<double>(a, p, x);
  });
  auto d3 = make_network<double>(ArchConfig::discriminator(32, 4, 3), 14);
  for (auto& p : d3.params) for (auto& v : p.vec()) v = rng.normal(0.0, 0.5);
  expect_param_gradients(d3, random_image(32, rng), [](const ArchConfig& a, auto& p, const Var<double>& x) {
    return discriminator_graph<double>(a, p, x);
  });
}

TEST(Detector, GridShapesAt64px) {
  auto t = make_network<float>(ArchConfig::detector(64, 4), 8);
  auto grid = detector_forward(t, Tensor<float>({1, 3, 64, 64}, 0.1f));
  ASSERT_EQ(grid.scales.size(), 2u);
  EXPECT_EQ(grid.scales[0].size, 4);
  EXPECT_EQ(grid.scales[1].size, 8);
  EXPECT_EQ(grid.scales[0].raw.shape(), (Shape{1, 3 * 6, 4, 4}));
  EXPECT_EQ(grid.scales[1].raw.shape(), (Shape{1, 3 * 6, 8, 8}));
  auto again = detector_forward(t, Tensor<float>({1, 3, 64, 64}, 0.1f));
  EXPECT_EQ(grid.scales[1].raw, again.scales[1].raw);
}

TEST(Detector, FiniteDifferenceParameters) {
  auto t = make_network<double>(ArchConfig::detector(8, 4, 2), 15);
  Rng rng(8);
  for (auto& p : t.params) for (auto& v : p.vec()) v = rng.normal(0.0, 0.5);
  auto fwd = [](const ArchConfig& a, auto& p, const Var<double>& x) {
    auto out = detector_graph<double>(a, p, x);
    // Flatten both scales into one projected output.
    return ops::concat_channels(ops::upsample2x(out.coarse), out.fine);
  };
  expect_param_gradients(t, random_image(8, rng), fwd);
}

TEST(Decode, ZeroOffsetsAtOriginCell) {
  // Coarse anchors small enough that the decoded box is not clipped.
  auto arch = ArchConfig::detector(64, 4, 4,
                                   {{0.05, 0.05}, {0.06, 0.06}, {0.07, 0.07},
                                    {0.12, 0.12}, {0.2, 0.16}, {0.24, 0.24}});
  Tensor<float> coarse({1, 18, 4, 4}, -30.0f);
  Tensor<float> fine({1, 18, 8, 8}, -30.0f);
  auto grid = to_grid(arch, coarse, fine);
  for (int slot = 0; slot < 4; ++slot) grid.at(0, 0, 0, 0, 1, slot) = 0.0f;
  grid.at(0, 0, 0, 0, 1, 4) = 10.0f;
  grid.at(0, 0, 0, 0, 1, 5) = 10.0f;
  auto dets = decode_detections(grid, 0.5);
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_NEAR(dets[0].box.cx, 0.125, 1e-9);
  EXPECT_NEAR(dets[0].box.cy, 0.125, 1e-9);
  const auto anchor = scale_anchors(arch, 0)[1];
  EXPECT_NEAR(dets[0].box.w, anchor.w, 1e-9);
  EXPECT_NEAR(dets[0].box.h, anchor.h, 1e-9);
}

TEST(Decode, SuppressedObjectnessGivesNothingAndThresholdZeroGivesAll) {
  auto arch = ArchConfig::detector(64, 4);
  auto grid = to_grid(arch, Tensor<float>({1, 18, 4, 4}, -1e4f), Tensor<float>({1, 18, 8, 8}, -1e4f));
  EXPECT_TRUE(decode_detections(grid, 1e-12).empty());
  EXPECT_EQ(decode_detections(grid, 0.0).size(), 4u * 4 * 3 + 8u * 8 * 3);
}

TEST(Decode, CardinalityIsInputIndependent) {
  auto t = make_network<float>(ArchConfig::detector(64, 4), 8);
  Rng rng(9);
  for (int i = 0; i < 3; ++i) {
    Tensor<float> x({1, 3, 64, 64});
    for (auto& v : x.vec()) v = static_cast<float>(rng.uniform(-1, 1));
    EXPECT_EQ(decode_detections(detector_forward(t, x), 0.0).size(), 240u);
  }
}

TEST(Nms, WorkedExamples) {
  Detection a{{0, 0.5, 0.5, 0.2, 0.2}, 0.8};
  Detection b{{0, 0.5, 0.5, 0.2, 0.2}, 0.9};
  Detection far{{0, 0.1, 0.1, 0.1, 0.1}, 0.3};
  EXPECT_EQ(nms({a}, 0.5).size(), 1u);
  auto kept = nms({a, b}, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_DOUBLE_EQ(kept[0].confidence, 0.9);
  for (double th : {0.0, 0.1, 0.5, 1.0}) EXPECT_EQ(nms({a, far}, th).size(), 2u);
}

TEST(Nms, StableTieBreak) {
  Detection a{{0, 0.5, 0.5, 0.2, 0.2}, 0.5};
  Detection b{{1, 0.5, 0.5, 0.2, 0.2}, 0.5};
  auto kept = nms({a, b}, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].box.class_id, 0);
}

TEST(Bind, FrozenHandleRefusesGradients) {
  auto t = make_network<float>(ArchConfig::detector(64, 4), 8);
  t.trainable = false;
  EXPECT_THROW(bind(t, true), std::logic_error);
  EXPECT_NO_THROW(bind(t, false));
}
