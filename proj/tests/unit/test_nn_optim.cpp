#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "multiaxial/nn/adam.hpp"
#include "multiaxial/nn/dice_loss.hpp"
#include "support/gradient_oracles.hpp"

using namespace multiaxial;
using nn::Tensor;

TEST(DiceLoss, PerfectOverlapIsNearZero) {
  std::mt19937_64 rng(1);
  std::vector<int> codes(36);
  for (auto& c : codes) c = static_cast<int>(nn::uniform_index(rng, 7));
  const auto truth = nn::one_hot<double>(codes, 7, {6, 6});
  EXPECT_LE(nn::dice_loss(truth, truth).loss, 1e-6);
}

TEST(DiceLoss, UniformPredictionOnSingleClassTruth) {
  // Closed form of the generalized formula: N voxels, all class 0, p = 1/7:
  // 1 - (2 N/7 + eps) / (N + N + eps).
  const std::int64_t N = 16;
  const Tensor<double> probs({7, 4, 4}, 1.0 / 7.0);
  const auto truth = nn::one_hot<double>(std::vector<int>(N, 0), 7, {4, 4});
  const double eps = 1e-6;
  const double expected = 1.0 - (2.0 * N / 7.0 + eps) / (2.0 * N + eps);
  EXPECT_NEAR(nn::dice_loss(probs, truth).loss, expected, 1e-12);
}

TEST(DiceLoss, PermutationInvariant) {
  std::mt19937_64 rng(2);
  const auto probs = nn::softmax_channels(nn::random_tensor<double>({7, 5, 5}, rng));
  std::vector<int> codes(25);
  for (auto& c : codes) c = static_cast<int>(nn::uniform_index(rng, 7));
  const auto truth = nn::one_hot<double>(codes, 7, {5, 5});
  std::vector<int> perm(25);
  std::iota(perm.begin(), perm.end(), 0);
  nn::shuffle(perm.begin(), perm.end(), rng);
  Tensor<double> pp(probs.shape()), tp(truth.shape());
  for (int c = 0; c < 7; ++c)
    for (int v = 0; v < 25; ++v) {
      pp[c * 25 + v] = probs[c * 25 + perm[v]];
      tp[c * 25 + v] = truth[c * 25 + perm[v]];
    }
  EXPECT_NEAR(nn::dice_loss(probs, truth).loss, nn::dice_loss(pp, tp).loss, 1e-12);
}

TEST(DiceLoss, ShapeMismatch) {
  EXPECT_THROW(nn::dice_loss(Tensor<double>({7, 2, 2}), Tensor<double>({7, 2, 3})), ShapeError);
}

TEST(DiceLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    EXPECT_LT(oracle::dice_error(seed, 4, 4), 1e-4);
    EXPECT_LT(oracle::dice_error(seed, 4, 4, nn::DiceWeighting::kInverseVolume), 1e-4);
  }
}

TEST(DiceLoss, ClassMeanAndCrossEntropyGradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    EXPECT_LT(oracle::loss_error(seed, 4, 4, [](const auto& p, const auto& t) { return nn::mean_dice_loss(p, t); }), 1e-4);
    EXPECT_LT(oracle::loss_error(seed, 4, 4, [](const auto& p, const auto& t) { return nn::cross_entropy_loss(p, t); }),
              1e-4);
    EXPECT_LT(
        oracle::loss_error(seed, 4, 4, [](const auto& p, const auto& t) { return nn::cross_entropy_loss(p, t, true); }),
        1e-4);
    EXPECT_LT(oracle::dice_error(seed, 4, 4, nn::DiceWeighting::kInverseCount), 1e-4);
  }
}

TEST(DiceLoss, ClassMeanAveragesPresentClassesOnly) {
  // Truth: classes 0 and 2 present. Prediction: exact on class 0, half on class 2.
  const auto truth = nn::one_hot<double>(std::vector<int>{0, 0, 2, 2}, 3, {2, 2});
  Tensor<double> probs = truth;
  for (int v : {2, 3}) {
    probs[static_cast<std::size_t>(2 * 4 + v)] = 0.5;
    probs[static_cast<std::size_t>(1 * 4 + v)] = 0.5;
  }
  // Dice_0 = 1, Dice_2 = 2*1/(1+2) = 2/3; class 1 is absent from the truth.
  EXPECT_NEAR(nn::mean_dice_loss(probs, truth).loss, 1.0 - (1.0 + 2.0 / 3.0) / 2.0, 1e-6);
  const auto r = nn::mean_dice_loss(probs, truth);
  for (int v = 0; v < 4; ++v) EXPECT_EQ(r.d_probs[static_cast<std::size_t>(4 + v)], 0.0);
  EXPECT_THROW(nn::mean_dice_loss(probs, Tensor<double>(truth.shape())), ShapeError);
}

TEST(CrossEntropy, ClosedForm) {
  const auto truth = nn::one_hot<double>(std::vector<int>{0, 1}, 2, {1, 2});
  const Tensor<double> probs({2, 1, 2}, std::vector<double>{0.25, 0.5, 0.75, 0.5});
  const auto r = nn::cross_entropy_loss(probs, truth);
  EXPECT_NEAR(r.loss, -(std::log(0.25) + std::log(0.5)) / 2, 1e-12);
  EXPECT_DOUBLE_EQ(r.d_probs[0], -1.0 / (0.25 * 2));
  EXPECT_DOUBLE_EQ(r.d_probs[1], 0.0);
}

TEST(CrossEntropy, BalancedAveragesPresentClassMeans) {
  // Class 0 covers three voxels, class 2 one, class 1 none.
  const auto truth = nn::one_hot<double>(std::vector<int>{0, 0, 0, 2}, 3, {1, 4});
  Tensor<double> probs({3, 1, 4}, std::vector<double>{0.5, 0.5, 0.25, 0, 0.5, 0.5, 0.5, 0.75, 0, 0, 0.25, 0.25});
  const auto r = nn::cross_entropy_loss(probs, truth, true);
  const double ce0 = -(2 * std::log(0.5) + std::log(0.25)) / 3, ce2 = -std::log(0.25);
  EXPECT_NEAR(r.loss, (ce0 + ce2) / 2, 1e-12);
  EXPECT_DOUBLE_EQ(r.d_probs[11], -1.0 / (2 * 0.25));
  EXPECT_DOUBLE_EQ(r.d_probs[0], -1.0 / (2 * 3 * 0.5));
  // A single present class reduces to the plain mean.
  const auto one = nn::one_hot<double>(std::vector<int>{1, 1, 1, 1}, 3, {1, 4});
  EXPECT_NEAR(nn::cross_entropy_loss(probs, one, true).loss, nn::cross_entropy_loss(probs, one).loss, 1e-12);
}

TEST(DiceLoss, InverseVolumeWeights) {
  const auto truth = nn::one_hot<double>(std::vector<int>{0, 0, 1, 0}, 3, {2, 2});
  const auto w = nn::dice_class_weights(truth, nn::DiceWeighting::kInverseVolume);
  EXPECT_DOUBLE_EQ(w[0], 1.0 / 9.0);
  EXPECT_DOUBLE_EQ(w[1], 1.0);
  EXPECT_DOUBLE_EQ(w[2], 1.0);  // absent class takes the largest finite weight
}

TEST(Adam, ZeroGradientLeavesParametersAndAdvancesStep) {
  Tensor<float> p({3}, std::vector<float>{1, -2, 3});
  const Tensor<float> g({3});
  nn::AdamState st;
  const auto before = p;
  nn::adam_step<float>({&p}, {&g}, st);
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.t, 1);
}

TEST(Adam, FirstStepIsLrTimesSign) {
  Tensor<double> p({4}, std::vector<double>{0, 0, 0, 0});
  const Tensor<double> g({4}, std::vector<double>{0.3, -2.0, 2e-2, -5e-2});
  nn::AdamState st;
  nn::adam_step<double>({&p}, {&g}, st);
  // t=1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
  for (int i = 0; i < 4; ++i) {
    const double expected = -1e-5 * g[i] / (std::abs(g[i]) + 1e-8);
    EXPECT_NEAR(p[i], expected, 1e-6 * std::abs(expected));
    EXPECT_NEAR(p[i], -1e-5 * (g[i] > 0 ? 1 : -1), 1e-6 * 1e-5);
  }
}

TEST(Adam, ConstantGradientDriftsMonotonically) {
  Tensor<double> p({2}, std::vector<double>{0, 0});
  const Tensor<double> g({2}, std::vector<double>{1.0, -1.0});
  nn::AdamState st;
  double prev0 = 0, prev1 = 0;
  for (int s = 0; s < 50; ++s) {
    nn::adam_step<double>({&p}, {&g}, st);
    EXPECT_LT(p[0], prev0);
    EXPECT_GT(p[1], prev1);
    prev0 = p[0];
    prev1 = p[1];
  }
  EXPECT_EQ(st.t, 50);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  Tensor<float> p({2});
  const Tensor<float> g({2}, std::vector<float>{1.0f, std::numeric_limits<float>::quiet_NaN()});
  nn::AdamState st;
  try {
    nn::adam_step<float>({&p}, {&g}, st, {"enc0.conv1.weight"});
    FAIL();
  } catch (const OptimizerError& e) {
    EXPECT_NE(std::string(e.what()).find("enc0.conv1.weight"), std::string::npos);
  }
  EXPECT_EQ(st.t, 0);
}

TEST(Adam, BitwiseDeterministic) {
  std::mt19937_64 rng(7);
  const auto g1 = nn::random_tensor<float>({64}, rng), g2 = nn::random_tensor<float>({64}, rng);
  auto run = [&] {
    auto p = Tensor<float>({64}, 0.5f);
    nn::AdamState st;
    st.hyper.lr = 1e-3;
    nn::adam_step<float>({&p}, {&g1}, st);
    nn::adam_step<float>({&p}, {&g2}, st);
    return p;
  };
  EXPECT_EQ(run(), run());
}
