#include <gtest/gtest.h>

#include "branchkit/branchkit.hpp"

using namespace branchkit;

TEST(Stats, MomentsAndQuantiles) {
    const std::vector<double> v{4, 1, 3, 2};
    EXPECT_DOUBLE_EQ(mean_of(v), 2.5);
    EXPECT_DOUBLE_EQ(variance_of(v), 5.0 / 3.0);
    EXPECT_DOUBLE_EQ(median(v), 2.5);
    EXPECT_DOUBLE_EQ(quantile(v, 0.0), 1.0);
    EXPECT_DOUBLE_EQ(quantile(v, 1.0), 4.0);
    EXPECT_DOUBLE_EQ(median({7}), 7.0);
    EXPECT_THROW(mean_of({}), InvalidArgument);
}

TEST(Stats, SlopeOfALine) {
    EXPECT_NEAR(least_squares_slope({1, 2, 3, 4}, {3, 5, 7, 9}), 2.0, 1e-14);
    EXPECT_THROW(least_squares_slope({1, 1}, {0, 1}), InvalidArgument);
}

TEST(Stats, BootstrapOfTheMean) {
    std::vector<double> v;
    KeyedRng rng(1);
    for (int i = 0; i < 400; ++i) v.push_back(rng.uniform());
    const double se = bootstrap_se<double>(
        v,
        [](const std::vector<const double*>& pick) {
            double s = 0;
            for (auto* p : pick) s += *p;
            return s / static_cast<double>(pick.size());
        },
        400, 2);
    EXPECT_NEAR(se, std::sqrt(1.0 / 12.0 / 400.0), 0.003);
}

TEST(Rng, KeysAreReproducibleAndDistinct) {
    KeyedRng a(derive_key(5, 1)), b(derive_key(5, 1)), c(derive_key(5, 2));
    const auto x = a(), y = b(), z = c();
    EXPECT_EQ(x, y);
    EXPECT_NE(x, z);
    EXPECT_NE(replicate_seed(1, 0), replicate_seed(1, 1));
}
