#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "branchkit/branchkit.hpp"

using namespace branchkit;

namespace {

const EnvironmentToken plain{"e", {}};
const auto constant_env = EnvironmentSequence::constant(plain);

double poisson_tail(double mean, std::uint64_t from) {
    double below = 0.0, term = std::exp(-mean);
    for (std::uint64_t k = 0; k < from; ++k) {
        below += term;
        term *= mean / static_cast<double>(k + 1);
    }
    return 1.0 - below;
}

}  // namespace

TEST(CountLaw, MomentsMatchClosedForms) {
    EXPECT_DOUBLE_EQ(CountLaw::poisson(1.7).mean(), 1.7);
    EXPECT_NEAR(CountLaw::poisson(1.7).second_moment(), 1.7 + 1.7 * 1.7, 1e-12);
    const auto g = CountLaw::geometric(0.25);
    double m = 0, m2 = 0;
    for (std::uint64_t k = 0; k < 400; ++k) {
        m += static_cast<double>(k) * g.pmf(k);
        m2 += static_cast<double>(k * k) * g.pmf(k);
    }
    EXPECT_NEAR(g.mean(), m, 1e-9);
    EXPECT_NEAR(g.second_moment(), m2, 1e-8);
    const auto t = CountLaw::table({{0, 0.25}, {3, 0.75}});
    EXPECT_DOUBLE_EQ(t.mean(), 2.25);
    EXPECT_DOUBLE_EQ(t.factorial_moment2(), 0.75 * 6);
}

TEST(CountLaw, SampleMeanAgrees) {
    KeyedRng rng(derive_key(3, 4));
    const auto law = CountLaw::geometric(0.4);
    double s = 0;
    for (int i = 0; i < 40000; ++i) s += static_cast<double>(law.sample(rng));
    EXPECT_NEAR(s / 40000, law.mean(), 0.04);
}

TEST(TwoTypeModel, BroodEnumerationGivesMeanMatrix) {
    auto fm = two_type_m2();
    const Eigen::MatrixXd m = fm->mean_matrix(plain);
    // Type 0: two children, each type 0 w.p. 3/4.  Type 1: one child, fair coin.
    EXPECT_NEAR(m(0, 0), 1.5, 1e-15);
    EXPECT_NEAR(m(0, 1), 0.5, 1e-15);
    EXPECT_NEAR(m(1, 0), 0.5, 1e-15);
    EXPECT_NEAR(m(1, 1), 0.5, 1e-15);
    EXPECT_NEAR(fm->second_moment_at(0, plain), 4.0, 1e-15);
    // E[#ordered pairs of distinct children of types (0,1)] = 2 * 3/4 * 1/4.
    EXPECT_NEAR(fm->pair_intensity(0, plain)(0, 1), 2 * 0.75 * 0.25, 1e-15);
}

TEST(TwoTypeModel, OneStepCountLawIsBinomial) {
    auto fm = two_type_m2();
    auto law = fm->one_step_count_law(0.0, plain, TraitSet::atoms({0.0}));
    ASSERT_TRUE(law);
    ASSERT_GE(law->size(), 3u);
    EXPECT_NEAR((*law)[0], 1.0 / 16, 1e-15);
    EXPECT_NEAR((*law)[1], 6.0 / 16, 1e-15);
    EXPECT_NEAR((*law)[2], 9.0 / 16, 1e-15);
}

TEST(TubeMeasure, BinomialMomentsOnTwoTypeModel) {
    auto fm = two_type_m2();
    auto t = tube_measure(*fm, constant_env, 0, 1, TraitSet::atoms({0.0}), TraitSet::atoms({0.0}));
    EXPECT_TRUE(t.exact);
    EXPECT_NEAR(t.mean, 1.5, 1e-12);
    // Var / mean^2 for Binomial(2, 3/4): 0.375 / 2.25.
    EXPECT_NEAR(t.normalized_variance, 1.0 / 6.0, 1e-12);
}

TEST(Kimmel, OneStepLawIsBinomialOfPoissonTail) {
    KimmelModel km(1.4);
    for (double x : {1.0, 3.0}) {
        auto law = km.one_step_count_law(x, plain, TraitSet::at_least(2.0));
        ASSERT_TRUE(law);
        const double q = poisson_tail(1.4 * x / 2, 2);
        EXPECT_NEAR((*law)[0], (1 - q) * (1 - q), 1e-12);
        EXPECT_NEAR((*law)[1], 2 * q * (1 - q), 1e-12);
        EXPECT_NEAR((*law)[2], q * q, 1e-12);
    }
}

TEST(Kimmel, SurvivalMatchesGeneratingFunctionIteration) {
    KimmelModel km(1.4);
    // Oracle: parasite line is Galton-Watson with Poisson(0.7) offspring; iterate f(s) = exp(0.7(s-1)).
    for (std::size_t n : {1u, 5u, 20u}) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s = std::exp(0.7 * (s - 1.0));
        EXPECT_NEAR(km.survival_probability(1.0, constant_env, n), 1.0 - s, 1e-14);
        EXPECT_NEAR(km.survival_probability(4.0, constant_env, n), 1.0 - std::pow(s, 4), 1e-14);
    }
}

TEST(Kimmel, MeanInfectedCountFollowsPgfOracle) {
    KimmelModel km(1.4);
    // E #infected cells at n = 2^n P_1(Y_n > 0); slope of its log is log 1.4 asymptotically.
    auto t = km.log_mean_tail(1.0, constant_env, 30, 1.0);
    ASSERT_TRUE(t);
    double s = 0.0;
    for (int i = 0; i < 30; ++i) s = std::exp(0.7 * (s - 1.0));
    EXPECT_NEAR(t->log_value, 30 * std::log(2.0) + std::log(1.0 - s), 1e-9);
    double s40 = 0.0;
    for (int i = 0; i < 40; ++i) s40 = std::exp(0.7 * (s40 - 1.0));
    const double slope = (10 * std::log(2.0) + std::log((1 - s40) / (1 - s))) / 10;
    EXPECT_NEAR(slope, std::log(1.4), 1e-3);
}

TEST(Kimmel, RejectsNonPositiveLambda) {
    EXPECT_THROW(KimmelModel(-1.0), InvalidArgument);
    EXPECT_THROW(KimmelModel(0.0), InvalidArgument);
}

TEST(Kimmel, ProjectionHasOverflowAtom) {
    KimmelModel km(1.4);
    auto fm = km.finite_projection({plain}, 10);
    EXPECT_EQ(fm->dim(), 12u);
    const Eigen::MatrixXd m = fm->mean_matrix(plain);
    EXPECT_NEAR(m.row(0).sum(), 2.0, 1e-12);
    EXPECT_NEAR(m(0, 0), 2.0, 1e-12);
    EXPECT_NEAR(m.row(3).sum(), 2.0, 1e-9);
}

TEST(Brw, SpeedSolvesLegendreEquation) {
    BrwModel bm(CountLaw::deterministic(2), IncrementLaw::normal(0, 1));
    EXPECT_NEAR(bm.speed(), std::sqrt(2 * std::log(2.0)), 1e-6);
    // For +-1 steps the speed v solves (1+v)/2 log(1+v) + (1-v)/2 log(1-v) = log m when m < 2.
    BrwModel rad(CountLaw::poisson(1.5), IncrementLaw::rademacher());
    const double v = rad.speed();
    EXPECT_NEAR((1 + v) / 2 * std::log(1 + v) + (1 - v) / 2 * std::log(1 - v), std::log(1.5), 1e-6);
    // Binary branching saturates: the rightmost particle moves up every step.
    EXPECT_NEAR(BrwModel(CountLaw::deterministic(2), IncrementLaw::rademacher()).speed(), 1.0, 1e-6);
}

TEST(Brw, MeanTailIsGaussianTail) {
    BrwModel bm(CountLaw::deterministic(2), IncrementLaw::normal(0, 1));
    auto t = bm.log_mean_tail(0.0, constant_env, 16, 8.0);
    ASSERT_TRUE(t);
    EXPECT_NEAR(std::exp(t->log_value), 65536 * 0.5 * std::erfc(8.0 / 4.0 / std::sqrt(2.0)), 1e-6);
}

TEST(Builtin, UnknownNameListsKnownModels) {
    try {
        builtin("nope");
        FAIL();
    } catch (const InvalidArgument& e) {
        EXPECT_NE(std::string(e.what()).find("kimmel"), std::string::npos);
    }
}

TEST(Model, TraitOutsideSpaceIsNamed) {
    KimmelModel km(1.4);
    KeyedRng rng(1);
    try {
        static_cast<const BranchingModel&>(km).sample_brood(-2.0, plain, rng);
        FAIL();
    } catch (const InvalidArgument& e) {
        EXPECT_NE(std::string(e.what()).find("-2"), std::string::npos);
    }
}
