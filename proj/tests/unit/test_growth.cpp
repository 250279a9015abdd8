#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <cmath>

#include "branchkit/branchkit.hpp"

using namespace branchkit;

namespace {

const auto env = EnvironmentSequence::constant({"e", {}});

/// Dominant eigenvalue with its right and left eigenvectors (positive), by EigenSolver.
struct Pf {
    double lambda;
    Eigen::VectorXd right, left;
};

Eigen::VectorXd dominant_vector(const Eigen::MatrixXd& m, double& lambda) {
    Eigen::EigenSolver<Eigen::MatrixXd> es(m);
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < es.eigenvalues().size(); ++i)
        if (es.eigenvalues()(i).real() > es.eigenvalues()(best).real()) best = i;
    lambda = es.eigenvalues()(best).real();
    Eigen::VectorXd v = es.eigenvectors().col(best).real();
    return v / v.sum();
}

Pf perron(const Eigen::MatrixXd& m) {
    Pf p;
    p.right = dominant_vector(m, p.lambda);
    double l2;
    p.left = dominant_vector(m.transpose(), l2);
    return p;
}

}  // namespace

TEST(Growth, SlopeEigenvalueAndVariationalAgree) {
    auto fm = two_type_m2();
    const double oracle = std::log(perron(fm->mean_matrix({"e", {}})).lambda);
    EXPECT_NEAR(oracle, 0.53480, 5e-6);
    auto g = growth_report(fm, env, 0, 400, true);
    EXPECT_NEAR(g.rho_slope, oracle, 1e-4);
    ASSERT_TRUE(g.rho_eig && g.rho_var);
    EXPECT_NEAR(*g.rho_eig, oracle, 1e-10);
    EXPECT_NEAR(*g.rho_var, oracle, 1e-3);
}

TEST(Growth, MaximizerIsProductOfEigenvectors) {
    // The optimal occupation law of the spine is u_x v_x / <u, v>.
    auto fm = two_type_m2();
    const auto pf = perron(fm->mean_matrix({"e", {}}));
    Eigen::VectorXd uv = pf.left.cwiseProduct(pf.right);
    uv /= uv.sum();
    auto g = growth_report(fm, env, 0, 100, true);
    ASSERT_EQ(g.maximizer.size(), 2);
    EXPECT_NEAR(g.maximizer(0), uv(0), 2e-3);
    EXPECT_NEAR(uv(0), 0.5 + std::sqrt(2.0) / 4, 1e-12);
}

TEST(Growth, PeriodicEnvironmentUsesPeriodProduct) {
    std::vector<BroodLaw> a{ProductBrood{CountLaw::deterministic(2), {0.9, 0.1}},
                            ProductBrood{CountLaw::deterministic(1), {0.3, 0.7}}};
    std::vector<BroodLaw> b{ProductBrood{CountLaw::poisson(0.7), {0.5, 0.5}},
                            ProductBrood{CountLaw::poisson(2.5), {0.1, 0.9}}};
    auto fm = std::make_shared<FiniteModel>("alt", std::vector<double>{0, 1},
                                            std::map<std::string, std::vector<BroodLaw>>{{"a", a}, {"b", b}});
    auto penv = EnvironmentSequence::periodic({{"a", {}}, {"b", {}}});
    const Eigen::MatrixXd prod = fm->mean_matrix({"a", {}}) * fm->mean_matrix({"b", {}});
    const double oracle = std::log(perron(prod).lambda) / 2;
    auto g = growth_report(fm, penv, 0, 400, true);
    ASSERT_TRUE(g.rho_eig && g.rho_var);
    EXPECT_NEAR(*g.rho_eig, oracle, 1e-10);
    EXPECT_NEAR(g.rho_slope, oracle, 1e-4);
    EXPECT_NEAR(*g.rho_var, oracle, 1e-3);
}

TEST(Growth, ThreePhaseVariationalMatchesEigenvalue) {
    // Six lifted atoms: no grid fallback, so the ascent alone has to find the optimum.
    std::vector<BroodLaw> wet{ProductBrood{CountLaw::deterministic(2), {0.9, 0.1}},
                              ProductBrood{CountLaw::poisson(1.2), {0.4, 0.6}}};
    std::vector<BroodLaw> dry{ProductBrood{CountLaw::deterministic(2), {0.5, 0.5}},
                              ProductBrood{CountLaw::poisson(1.2), {0.2, 0.8}}};
    auto fm = std::make_shared<FiniteModel>("wd", std::vector<double>{0, 1},
                                            std::map<std::string, std::vector<BroodLaw>>{{"wet", wet}, {"dry", dry}});
    auto penv = EnvironmentSequence::periodic({{"wet", {}}, {"dry", {}}}, {0, 0, 1});
    const Eigen::MatrixXd prod =
        fm->mean_matrix({"wet", {}}) * fm->mean_matrix({"wet", {}}) * fm->mean_matrix({"dry", {}});
    const double oracle = std::log(perron(prod).lambda) / 3;
    auto g = growth_report(fm, penv, 0, 300, true);
    ASSERT_TRUE(g.rho_var);
    EXPECT_NEAR(*g.rho_var, oracle, 1e-3);
    EXPECT_NEAR(g.maximizer.sum(), 1.0, 1e-12);
}

TEST(Growth, IidEnvironmentHasNoEigenvalueForm) {
    auto fm = two_type_m2();
    EXPECT_FALSE(rho_eig(*fm, EnvironmentSequence::iid({{"e", {}}, {"f", {}}}, 3)).has_value());
}

TEST(Growth, SlopeNeedsTenGenerations) {
    auto fm = two_type_m2();
    MeanSemigroup ms(fm, env);
    EXPECT_THROW(growth_slope(ms, 0, 5), InvalidArgument);
}

TEST(RateFunction, DiracMassGivesMinusLogSelfLoop) {
    auto fm = two_type_m2();
    auto ev = RateFunctionEvaluator::from_model(*fm, env);
    Eigen::VectorXd d0(2);
    d0 << 1, 0;
    EXPECT_NEAR(ev.rate(d0), -std::log(0.75), 1e-4);
}

TEST(RateFunction, ZeroAtInvariantLawPositiveElsewhere) {
    Eigen::MatrixXd p(2, 2);
    p << 0.75, 0.25, 0.5, 0.5;
    RateFunctionEvaluator ev(p);
    Eigen::VectorXd pi(2);
    pi << 2.0 / 3, 1.0 / 3;
    EXPECT_NEAR(ev.rate(pi), 0.0, 1e-8);
    for (double a : {0.1, 0.4, 0.9}) {
        Eigen::VectorXd mu(2);
        mu << a, 1 - a;
        EXPECT_GT(ev.rate(mu), 1e-4);
    }
}

TEST(RateFunction, TwoStateClosedForm) {
    // I(mu) = -inf over u > 0 of sum_x mu(x) log(Pu(x) / u(x)); with u = (1, t) this is a
    // one-dimensional search, done here on a fine grid.
    Eigen::MatrixXd p(2, 2);
    p << 0.6, 0.4, 0.3, 0.7;
    RateFunctionEvaluator ev(p);
    for (double a : {0.2, 0.5, 0.8}) {
        double best = 1e300;
        for (double lt = -8; lt <= 8; lt += 1e-4) {
            const double t = std::exp(lt);
            best = std::min(best, a * std::log(p(0, 0) + p(0, 1) * t) + (1 - a) * std::log(p(1, 0) / t + p(1, 1)));
        }
        Eigen::VectorXd mu(2);
        mu << a, 1 - a;
        EXPECT_NEAR(ev.rate(mu), -best, 1e-6);
    }
}

TEST(RateFunction, UnreachableSupportHitsClip) {
    Eigen::MatrixXd p(2, 2);
    p << 0.0, 1.0, 1.0, 0.0;
    RateFunctionEvaluator ev(p);
    Eigen::VectorXd d0(2);
    d0 << 1, 0;
    auto r = ev.solve(d0);
    EXPECT_GE(r.value, 5.0);
    EXPECT_TRUE(r.at_clip);
}

TEST(TypicalLineage, RunsAndKeepsSurvivors) {
    auto fm = two_type_m2();
    auto res = typical_lineage_experiment(fm, env, 0, {10, 20}, 20, 5);
    EXPECT_EQ(res.accepted, 20u);
    EXPECT_EQ(res.records.size(), 40u);
    for (const auto& r : res.records) {
        EXPECT_GE(r.distance, 0.0);
        EXPECT_LE(r.distance, 1.0);
    }
}
