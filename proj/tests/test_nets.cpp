#include <gtest/gtest.h>

#include <filesystem>

#include "atlas_istn/nets.hpp"
#include "test_util.hpp"

using namespace atlas_istn;
using atlas_istn::testing::random_tensor;

namespace {

ItnConfig small_itn() { return {1, 2, 3, 4}; }
StnConfig small_stn() { return {2, 3, 4, 8, true, true}; }

Tensor<float> rand_f(const Shape& s, std::uint64_t seed) { return cast<float>(random_tensor(s, seed, 0.0, 1.0)); }

}  // namespace

TEST(Nets, ItnOutputShapeAndNames) {
    const auto ps = init_itn<float>(small_itn(), 1);
    for (const char* n : {"itn.enc0.w", "itn.down1.w", "itn.enc1.w", "itn.down2.w", "itn.enc2.w", "itn.dec1.w",
                          "itn.dec0.w", "itn.out.w", "itn.out.b"})
        EXPECT_TRUE(ps.contains(n)) << n;
    const auto y = itn_forward(rand_f({2, 1, 16, 24}, 2), ps, small_itn());
    EXPECT_EQ(y.shape(), (Shape{2, 2, 16, 24}));
}

TEST(Nets, SpatialSizeMustDivide) {
    const auto ps = init_itn<float>(small_itn(), 1);
    EXPECT_THROW(itn_forward(rand_f({1, 1, 12, 16}, 2), ps, small_itn()), shape_error);
    EXPECT_THROW(itn_forward(rand_f({1, 2, 16, 16}, 2), ps, small_itn()), shape_error);
}

TEST(Nets, UntrainedStnIsIdentity) {
    const auto ps = init_stn<float>(small_stn(), 3);
    const auto so = stn_forward(rand_f({2, 1, 16, 16}, 4), rand_f({1, 1, 16, 16}, 5), ps, small_stn());
    EXPECT_EQ(so.svf.shape(), (Shape{2, 2, 8, 8}));
    EXPECT_EQ(so.affine.shape(), (Shape{2, 5}));
    EXPECT_EQ(max_abs(so.svf), 0.0);
    EXPECT_EQ(max_abs(so.affine), 0.0);
    const auto tf = transformation_computation(so.svf, so.affine);
    EXPECT_EQ(max_abs(tf.Phi), 0.0);
    EXPECT_LT(max_abs(tf.Phi_inv), 1e-5);
}

TEST(Nets, AffineHeadInactiveIsUndefined) {
    const auto ps = init_stn<float>(small_stn(), 3);
    const auto so = stn_forward(rand_f({1, 1, 16, 16}, 4), rand_f({1, 1, 16, 16}, 5), ps, small_stn(), false);
    EXPECT_FALSE(so.affine.defined());
    auto cfg = small_stn();
    cfg.svf_enabled = false;
    const auto so2 = stn_forward(rand_f({1, 1, 16, 16}, 4), rand_f({1, 1, 16, 16}, 5), ps, cfg);
    EXPECT_EQ(max_abs(so2.svf), 0.0);
    EXPECT_TRUE(so2.affine.defined());
}

TEST(Nets, InitIsSeedDeterministic) {
    const auto a = init_model<float>(small_itn(), small_stn(), 7);
    const auto b = init_model<float>(small_itn(), small_stn(), 7);
    const auto c = init_model<float>(small_itn(), small_stn(), 8);
    EXPECT_TRUE(a.itn.values_equal(b.itn));
    EXPECT_TRUE(a.stn.values_equal(b.stn));
    EXPECT_FALSE(a.itn.values_equal(c.itn));
}

TEST(Nets, GradientsReachBothNetworksThroughFullForward) {
    auto m = init_model<float>(small_itn(), small_stn(), 1);
    // Give the zero heads some weight so gradients flow past them.
    for (float& v : m.stn.at("stn.svf.w").mutable_data()) v = 0.01f;
    for (float& v : m.stn.at("stn.aff2.w").mutable_data()) v = 0.01f;
    const auto atlas_fg = rand_f({1, 1, 16, 16}, 2);
    const auto r = full_forward(rand_f({2, 1, 16, 16}, 3), atlas_fg, m);
    backward(mse(warp(atlas_fg, r.transform.Phi_inv), rand_f({2, 1, 16, 16}, 4)));
    EXPECT_TRUE(m.itn.at("itn.enc0.w").has_grad());
    EXPECT_TRUE(m.stn.at("stn.down0.w").has_grad());
    EXPECT_TRUE(m.stn.at("stn.aff1.w").has_grad());
}

TEST(Nets, CheckpointRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "atlas_istn_test_nets";
    std::filesystem::remove_all(dir);
    auto cfg = small_stn();
    cfg.affine_enabled = false;
    const auto m = init_model<float>(small_itn(), cfg, 4);
    save_model(dir, m);
    const auto back = load_model(dir);
    EXPECT_TRUE(back.itn.values_equal(m.itn));
    EXPECT_TRUE(back.stn.values_equal(m.stn));
    EXPECT_EQ(back.stn_config.affine_enabled, false);
    EXPECT_EQ(back.itn_config.base_filters, 4u);
    std::filesystem::remove_all(dir);
}
