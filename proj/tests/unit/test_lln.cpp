#include <gtest/gtest.h>

#include <bit>
#include <cmath>

#include "branchkit/branchkit.hpp"

using namespace branchkit;

namespace {

const auto env = EnvironmentSequence::constant({"e", {}});

}  // namespace

TEST(Separation, BinaryTreeFractionByBruteForce) {
    for (std::size_t n : {3u, 6u, 8u})
        for (std::size_t k = 0; k <= n; ++k) {
            const std::size_t leaves = std::size_t{1} << n;
            double pairs = 0;
            for (std::size_t i = 0; i < leaves; ++i)
                for (std::size_t j = 0; j < leaves; ++j) {
                    if (i == j) continue;
                    const std::size_t mrca_gen = n - static_cast<std::size_t>(std::bit_width(i ^ j));
                    pairs += mrca_gen >= k;
                }
            EXPECT_NEAR(binary_tree_pair_fraction(n, k), pairs / static_cast<double>(leaves * leaves), 1e-15);
        }
}

TEST(Separation, DeterministicBinaryTreeIsExact) {
    auto binary = neutral_gw(CountLaw::deterministic(2), {{1.0}});
    auto sep = separation_profile(*binary, env, 0.0, 8, {0, 1, 3, 7}, 3, 1);
    EXPECT_TRUE(sep.exact_mean);
    for (std::size_t k = 0; k < sep.thresholds.size(); ++k)
        EXPECT_NEAR(sep.fraction[k], binary_tree_pair_fraction(8, sep.thresholds[k]), 1e-12);
    EXPECT_NEAR(sep.second_moment, 1.0, 1e-12);
}

TEST(SecondMoment, GaltonWatsonClosedForm) {
    // Poisson(1.5) offspring: Var Z_n = s2 m^(n-1) (m^n - 1) / (m - 1) with s2 = 1.5.
    auto gw = neutral_gw(CountLaw::poisson(1.5), {{1.0}});
    for (std::size_t n : {1u, 4u, 15u}) {
        const double m = 1.5, mn = std::pow(m, static_cast<double>(n));
        const double var = 1.5 * std::pow(m, static_cast<double>(n) - 1) * (mn - 1) / (m - 1);
        EXPECT_NEAR(normalized_second_moment(*gw, env, 0, n), (var + mn * mn) / (mn * mn), 1e-10);
    }
}

TEST(Ergodicity, ValuesStayUnderContractionBound) {
    auto fm = two_type_m2();
    MeanSemigroup ms(fm, env);
    auto diag = ergodicity_profile(ms, 0, {}, {5, 10, 20});
    ASSERT_FALSE(diag.entries.empty());
    for (const auto& e : diag.entries) EXPECT_LE(e.value, e.bound + 1e-12);
}

TEST(Summability, TwoTypeConstantIsSummable) {
    auto rep = corollary_d_conditions(two_type_m2(), env, 0, 60);
    EXPECT_EQ(rep.verdict, Verdict::summable);
    EXPECT_TRUE(std::isfinite(rep.first_tail));
}

TEST(Summability, IidEnvironmentIsInconclusive) {
    auto rep = corollary_d_conditions(two_type_m2(), EnvironmentSequence::iid({{"e", {}}, {"f", {}}}, 2), 0, 60);
    EXPECT_EQ(rep.verdict, Verdict::inconclusive);
}

TEST(Summability, InfiniteDoeblinIsNotApplicable) {
    auto fm = neutral_gw(CountLaw::deterministic(2), {{1.0, 0.0}, {0.5, 0.5}});
    EXPECT_EQ(corollary_d_conditions(fm, env, 0, 20).verdict, Verdict::not_applicable);
}

TEST(ViBound, InitialValueAndBound) {
    auto rep = vi_bound(two_type_m2(), env, 0, 10, 100);
    ASSERT_FALSE(rep.entries.empty());
    EXPECT_GT(rep.series1_partial, 0.0);
    EXPECT_EQ(rep.normalized_second_moment.size(), 11u);
    EXPECT_NEAR(rep.normalized_second_moment.front(), 1.0, 1e-12);
}

TEST(LlnExperiment, ReferenceIsQKernelRow) {
    auto fm = two_type_m2();
    auto res = lln_experiment(*fm, env, 0.0, [](double x) { return x; }, [](std::size_t, double x) { return x; },
                              {3, 6}, 50, 11);
    ASSERT_TRUE(res.exact_reference);
    MeanSemigroup ms(fm, env);
    EXPECT_NEAR(res.mu[1], ms.q_compose(0, 6)(0, 1), 1e-14);
    EXPECT_NEAR(res.m[0], ms.mean_row(0, 3).total(), 1e-12);
    EXPECT_EQ(res.records.size(), 100u);
}

TEST(LlnExperiment, DiscrepancyShrinksOnTwoTypeModel) {
    auto fm = two_type_m2();
    auto res = lln_experiment(*fm, env, 0.0, [](double x) { return x == 1.0 ? 1.0 : 0.0; },
                              [](std::size_t, double x) { return x; }, {4, 8, 12}, 300, 21);
    EXPECT_GT(res.mean_square[0], res.mean_square[1]);
    EXPECT_GT(res.mean_square[1], res.mean_square[2]);
}

TEST(LlnExperiment, MonteCarloReferenceForKimmel) {
    KimmelModel km(1.4);
    auto res = lln_experiment(km, env, 2.0, [](double x) { return x >= 1.0 ? 1.0 : 0.0; },
                              [](std::size_t, double x) { return x; }, {3, 6}, 200, 4);
    EXPECT_FALSE(res.exact_reference);
    // Exact oracle for the infected fraction: E #infected / E #cells = P_2(Y_n > 0).
    EXPECT_NEAR(res.mu[1], km.survival_probability(2.0, env, 6), 0.05);
}

TEST(LlnExperiment, NonFiniteTestFunctionIsNamed) {
    KimmelModel km(1.4);
    try {
        lln_experiment(km, env, 1.0, [](double x) { return x; },
                       [](std::size_t n, double x) { return std::log(x) / static_cast<double>(n); }, {4}, 20, 2);
        FAIL();
    } catch (const InvalidArgument& e) {
        EXPECT_NE(std::string(e.what()).find("trait 0"), std::string::npos);
    }
}
