#include <gtest/gtest.h>

#include "grad_suite.hpp"

using namespace atlas_istn::testing;

TEST(GradSuite, EveryOpMatchesFiniteDifferences) {
    const auto results = run_grad_suite(10);
    EXPECT_GE(results.size(), 25u);
    for (const auto& r : results) EXPECT_LT(r.worst, 1e-3) << r.name;
}
