#include <gtest/gtest.h>

#include "svf_suite.hpp"

using namespace atlas_istn;
using namespace atlas_istn::testing;

namespace {

const std::vector<Tensor<double>>& suite() {
    static const auto fields = SvfSuite{}.fields();
    return fields;
}

double max_change(const Tensor<double>& v, std::size_t n) {
    const auto a = exp_svf(v, n).first, b = exp_svf(v, n + 1).first;
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
    return m;
}

}  // namespace

TEST(SvfSuite, FieldsRespectThePeakBound) {
    ASSERT_EQ(suite().size(), 100u);
    for (const auto& v : suite()) {
        EXPECT_LE(max_abs(v), 8.0 + 1e-12);
        EXPECT_GE(max_abs(v), 1.0 - 1e-12);
    }
    EXPECT_NEAR(max_abs(suite().front()), 8.0, 1e-12);
}

TEST(Diffeomorphism, ExpOfNegativeInvertsOverTheSuite) {
    double worst_mean = 0, worst_max = 0, min_jac = 1e9;
    for (const auto& v : suite()) {
        const auto s = invertibility(v, 6);
        worst_mean = std::max(worst_mean, s.mean_error);
        worst_max = std::max(worst_max, s.max_error);
        min_jac = std::min(min_jac, s.min_jacobian);
    }
    EXPECT_LT(worst_mean, 0.05);
    EXPECT_LT(worst_max, 0.5);
    EXPECT_GT(min_jac, 0.0);
}

TEST(Diffeomorphism, SquaringsConvergeAtFirstOrder) {
    // The increment from n to n+1 squarings halves with each step; below
    // 1e-3 px from n = 12 on.
    double worst12 = 0;
    for (std::size_t i = 0; i < suite().size(); i += 5) {
        const auto& v = suite()[i];
        const double c6 = max_change(v, 6), c7 = max_change(v, 7);
        EXPECT_NEAR(c7 / c6, 0.5, 0.05) << i;
        worst12 = std::max(worst12, max_change(v, 12));
    }
    EXPECT_LT(worst12, 1e-3);
}

TEST(Diffeomorphism, MoreSquaringsDoNotHurtInvertibility) {
    for (std::size_t i = 0; i < 10; ++i) {
        const auto a = invertibility(suite()[i], 4), b = invertibility(suite()[i], 8);
        EXPECT_LE(b.mean_error, a.mean_error + 1e-3) << i;
        EXPECT_GT(b.min_jacobian, 0.0) << i;
    }
}
