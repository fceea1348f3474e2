#include <gtest/gtest.h>

#include "atlas_istn/losses.hpp"
#include "atlas_istn/nets.hpp"
#include "test_util.hpp"

using namespace atlas_istn;
using atlas_istn::testing::projected_grad_error;
using atlas_istn::testing::random_tensor;

namespace {

Tensor<float> rand_f(const Shape& s, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    return cast<float>(random_tensor(s, seed, lo, hi));
}

Transformation<float> identity_tf(std::size_t n, std::size_t h, std::size_t w) {
    return transformation_computation(Tensor<float>(Shape{n, 2, h / 2, w / 2}, 0.f), Tensor<float>{});
}

}  // namespace

TEST(RegLoss, ZeroForIdentityAndTranslation) {
    EXPECT_EQ(reg_loss(Tensor<float>(Shape{2, 2, 6, 5}, 0.f)).item(), 0.f);
    EXPECT_EQ(reg_loss(Tensor<float>(Shape{2, 2, 6, 5}, 3.5f)).item(), 0.f);
}

TEST(RegLoss, UnitShearContributesOnePerPixelPair) {
    const std::size_t h = 6, w = 5;
    Tensor<double> u(Shape{1, 2, h, w}, 0.0);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) u.mutable_data()[y * w + x] = double(x);
    // h*(w-1) unit forward differences, normalized by h*w.
    EXPECT_DOUBLE_EQ(reg_loss(u).item(), double(h * (w - 1)) / double(h * w));
}

TEST(RegLoss, TranslationInvariantAndGradientChecked) {
    auto u = random_tensor({2, 2, 5, 6}, 3);
    Tensor<double> shifted(u.shape(), std::vector<double>(u.data().begin(), u.data().end()));
    for (double& v : shifted.mutable_data()) v += 2.0;
    EXPECT_NEAR(reg_loss(u).item(), reg_loss(shifted).item(), 1e-12);
    for (std::uint64_t seed = 0; seed < 10; ++seed)
        EXPECT_LT(projected_grad_error([](const auto& in) { return scalar_mul(reg_loss(in[0]), 1.0); },
                                       {random_tensor({1, 2, 5, 4}, seed)}, seed),
                  1e-6);
}

TEST(Omega, SigmoidSchedule) {
    OmegaSchedule s;
    EXPECT_EQ(s.at(0), 1.0);
    s.kind = OmegaSchedule::Kind::sigmoid_fade;
    EXPECT_DOUBLE_EQ(s.at(200), 0.5);
    EXPECT_NEAR(s.at(0), 3.35e-4, 1e-6);
}

TEST(TotalLoss, OmegaZeroIsSegLoss) {
    const auto y = rand_f({2, 2, 8, 8}, 1), yh = rand_f({2, 2, 8, 8}, 2), atlas = rand_f({1, 2, 8, 8}, 3);
    LossWeights w;
    w.omega.value = 0.0;
    const auto r = total_loss(y, yh, atlas, identity_tf(2, 8, 8), w, 0);
    EXPECT_FLOAT_EQ(r.total.item(), seg_loss(y, yh).item());
}

TEST(TotalLoss, PerfectAlignmentIsZero) {
    auto y = rand_f({1, 2, 8, 8}, 1);
    LossWeights w;
    w.lambda = 0;
    EXPECT_EQ(total_loss(y, y, y, identity_tf(1, 8, 8), w, 0).total.item(), 0.f);
}

TEST(TotalLoss, BackgroundChannelIsIgnored) {
    const auto y = rand_f({2, 2, 8, 8}, 1), yh = rand_f({2, 2, 8, 8}, 2);
    auto atlas = rand_f({1, 2, 8, 8}, 3);
    const auto tf = transformation_computation(rand_f({2, 2, 4, 4}, 4, -1, 1), Tensor<float>{});
    const LossWeights w;
    const double before = total_loss(y, yh, atlas, tf, w, 0).total.item();
    for (std::size_t p = 0; p < 64; ++p) atlas.mutable_data()[p] = 17.f;
    EXPECT_FLOAT_EQ(total_loss(y, yh, atlas, tf, w, 0).total.item(), before);
}

TEST(TotalLoss, SegLossGradientReachesNoStnParameter) {
    const ItnConfig ic{1, 2, 2, 4};
    const StnConfig sc{2, 2, 4, 8, true, true};
    auto m = init_model<float>(ic, sc, 0);
    const auto y = rand_f({1, 2, 8, 8}, 1);
    const auto yh = itn_forward(rand_f({1, 1, 8, 8}, 2), m.itn, ic);
    backward(seg_loss(y, yh));
    for (const auto& [name, t] : m.stn) EXPECT_FALSE(t.has_grad()) << name;
    EXPECT_TRUE(m.itn.at("itn.out.w").has_grad());
}

TEST(TotalLoss, AtlasReceivesNoGradient) {
    const auto y = rand_f({1, 2, 8, 8}, 1), yh = rand_f({1, 2, 8, 8}, 2), atlas = rand_f({1, 2, 8, 8}, 3);
    auto v = rand_f({1, 2, 4, 4}, 4, -1, 1);
    v.set_requires_grad(true);
    const auto tf = transformation_computation(v, Tensor<float>{});
    backward(total_loss(y, yh, atlas, tf, LossWeights{}, 0).total);
    EXPECT_TRUE(v.has_grad());
    EXPECT_FALSE(atlas.has_grad());
}

TEST(RefineLoss, PerfectAlignmentIsZeroAndGammaZeroSkipsS2a) {
    const auto y = rand_f({1, 2, 8, 8}, 1);
    LossWeights w;
    w.lambda_star = 0;
    EXPECT_EQ(refine_loss(y, y, identity_tf(1, 8, 8), w).item(), 0.f);
    // With gamma* = 0 the forward map is never read, so an undefined Phi is fine.
    auto tf = identity_tf(1, 8, 8);
    tf.Phi = Tensor<float>{};
    EXPECT_NO_THROW(refine_loss(y, rand_f({1, 2, 8, 8}, 2), tf, w));
}
