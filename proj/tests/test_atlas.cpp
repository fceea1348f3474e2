#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "atlas_istn/atlas.hpp"
#include "test_util.hpp"

using namespace atlas_istn;
using atlas_istn::testing::random_tensor;

namespace {

Tensor<float> rand_f(const Shape& s, std::uint64_t seed) { return cast<float>(random_tensor(s, seed, 0.0, 1.0)); }

}  // namespace

TEST(Atlas, InitIsMeanOfCases) {
    Tensor<float> a(Shape{2, 1, 1, 2}, std::vector<float>{0, 1, 1, 1});
    Tensor<float> b(Shape{1, 1, 1, 2}, std::vector<float>{1, 0});
    const auto st = init_atlas({a, b}, {a, b}, 0.1);
    EXPECT_FLOAT_EQ(st.labelmap.at(0), 2.f / 3.f);
    EXPECT_FLOAT_EQ(st.labelmap.at(1), 2.f / 3.f);
    EXPECT_EQ(st.epoch, 0u);
    EXPECT_THROW(init_atlas({}, {}, 0.1), std::invalid_argument);
    EXPECT_THROW(init_atlas({a}, {a}, 1.5), std::invalid_argument);
}

TEST(Atlas, EtaZeroLeavesAtlasUnchanged) {
    auto st = init_atlas({rand_f({3, 2, 5, 5}, 1)}, {rand_f({3, 1, 5, 5}, 2)}, 0.0);
    const auto before = st.labelmap.detach();
    epoch_update(st, {rand_f({3, 2, 5, 5}, 3)}, {rand_f({3, 1, 5, 5}, 4)});
    for (std::size_t i = 0; i < before.numel(); ++i) EXPECT_EQ(st.labelmap.at(i), before.at(i));
    EXPECT_EQ(st.epoch, 1u);
}

TEST(Atlas, EtaOneEqualsEpochMean) {
    auto st = init_atlas({rand_f({3, 2, 5, 5}, 1)}, {rand_f({3, 1, 5, 5}, 2)}, 1.0);
    const auto lab = rand_f({4, 2, 5, 5}, 5), img = rand_f({4, 1, 5, 5}, 6);
    epoch_update(st, {lab}, {img});
    for (std::size_t i = 0; i < 50; ++i) {
        double m = 0;
        for (std::size_t b = 0; b < 4; ++b) m += lab.at(b * 50 + i);
        EXPECT_NEAR(st.labelmap.at(i), m / 4, 1e-6);
    }
}

TEST(Atlas, EmaMatchesHandRolledRecurrence) {
    const double eta = 0.3;
    auto st = init_atlas({rand_f({2, 2, 4, 4}, 7)}, {rand_f({2, 1, 4, 4}, 8)}, eta);
    std::vector<double> ref(st.labelmap.data().begin(), st.labelmap.data().end());
    for (int e = 0; e < 10; ++e) {
        const auto lab = rand_f({3, 2, 4, 4}, 100 + e);
        epoch_update(st, {lab}, {rand_f({3, 1, 4, 4}, 200 + e)});
        for (std::size_t i = 0; i < ref.size(); ++i) {
            const double mean = (double(lab.at(i)) + lab.at(32 + i) + lab.at(64 + i)) / 3;
            ref[i] = (1 - eta) * ref[i] + eta * mean;
        }
    }
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(st.labelmap.at(i), ref[i], 1e-6);
    EXPECT_EQ(st.epoch, 10u);
}

TEST(Atlas, ShapeMismatchThrows) {
    auto st = init_atlas({rand_f({1, 2, 4, 4}, 1)}, {rand_f({1, 1, 4, 4}, 2)}, 0.1);
    EXPECT_THROW(epoch_update(st, {rand_f({1, 3, 4, 4}, 3)}, {rand_f({1, 1, 4, 4}, 4)}), shape_error);
}

TEST(Atlas, ArgmaxTiesGoToLowestChannel) {
    Tensor<float> t(Shape{1, 3, 1, 3}, std::vector<float>{0.5f, 0.2f, 0.1f, 0.5f, 0.7f, 0.1f, 0.f, 0.7f, 0.8f});
    const auto a = argmax_channels(t).front();
    EXPECT_EQ(a[0], 0);
    EXPECT_EQ(a[1], 1);
    EXPECT_EQ(a[2], 2);
}

TEST(Atlas, SaveLoadRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "atlas_istn_test_atlas";
    std::filesystem::remove_all(dir);
    auto st = init_atlas({rand_f({2, 2, 8, 8}, 1)}, {rand_f({2, 1, 8, 8}, 2)}, 0.05);
    st.epoch = 7;
    save_atlas(dir, st);
    export_atlas_pgm(dir, st);
    const auto back = load_atlas(dir);
    EXPECT_EQ(back.epoch, 7u);
    EXPECT_DOUBLE_EQ(back.eta, 0.05);
    for (std::size_t i = 0; i < st.labelmap.numel(); ++i) EXPECT_EQ(back.labelmap.at(i), st.labelmap.at(i));
    EXPECT_TRUE(std::filesystem::exists(dir / "atlas_argmax.pgm"));
    std::filesystem::remove_all(dir);
}
