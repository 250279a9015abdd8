#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <cmath>

#include "branchkit/branchkit.hpp"

using namespace branchkit;

namespace {

const auto env = EnvironmentSequence::constant({"e", {}});

double pf_eigenvalue(const Eigen::MatrixXd& m) {
    Eigen::EigenSolver<Eigen::MatrixXd> es(m);
    double best = 0.0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) best = std::max(best, es.eigenvalues()(i).real());
    return best;
}

std::shared_ptr<const FiniteModel> three_state_periodic_model() {
    std::vector<BroodLaw> a{ProductBrood{CountLaw::poisson(1.5), {0.6, 0.3, 0.1}},
                            ProductBrood{CountLaw::table({{1, 0.5}, {3, 0.5}}), {0.2, 0.5, 0.3}},
                            ProductBrood{CountLaw::deterministic(1), {0.1, 0.1, 0.8}}};
    std::vector<BroodLaw> b{ProductBrood{CountLaw::deterministic(2), {0.3, 0.3, 0.4}},
                            ProductBrood{CountLaw::poisson(0.8), {0.5, 0.25, 0.25}},
                            ProductBrood{CountLaw::geometric(0.4), {0.2, 0.7, 0.1}}};
    return std::make_shared<FiniteModel>("three", std::vector<double>{0, 1, 2},
                                         std::map<std::string, std::vector<BroodLaw>>{{"a", a}, {"b", b}});
}

}  // namespace

TEST(MeanSemigroup, RowsMatchMatrixPowers) {
    auto fm = two_type_m2();
    MeanSemigroup ms(fm, env);
    const Eigen::MatrixXd m = fm->mean_matrix({"e", {}});
    Eigen::MatrixXd p = Eigen::MatrixXd::Identity(2, 2);
    for (std::size_t n = 0; n <= 12; ++n) {
        const auto row = ms.mean_row(0, n);
        for (int y = 0; y < 2; ++y) EXPECT_NEAR(row.values(y) * std::exp(row.log_scale), p(0, y), 1e-9 * p(0, y) + 1e-12);
        p = p * m;
    }
}

TEST(MeanSemigroup, LogScalingSurvivesHugeHorizons) {
    auto fm = two_type_m2();
    MeanSemigroup ms(fm, env);
    const double rho = std::log(pf_eigenvalue(fm->mean_matrix({"e", {}})));
    const auto r = ms.mean_row(0, 3000);
    const double log_total = std::log(r.values.sum()) + r.log_scale;
    EXPECT_NEAR(log_total / 3000, rho, 1e-3);
    EXPECT_TRUE(std::isfinite(log_total));
}

TEST(QKernels, ComposedRowsAreProbabilityVectors) {
    auto fm = three_state_periodic_model();
    auto penv = EnvironmentSequence::periodic({{"a", {}}, {"b", {}}});
    MeanSemigroup ms(fm, penv);
    for (std::size_t n = 0; n <= 20; ++n)
        for (std::size_t i = 0; i <= n; ++i) {
            const auto q = ms.q_compose(i, n);
            for (std::size_t x = 0; x < 3; ++x) {
                EXPECT_NEAR(q.row(x).sum(), 1.0, 1e-12);
                EXPECT_GE(q.row(x).minCoeff(), 0.0);
            }
        }
}

TEST(QKernels, TelescopingIdentity) {
    // Q_{i,n} is the composition of the one-step kernels Q_{n-j}(., T^j e, .) for j = i..n-1.
    auto fm = three_state_periodic_model();
    auto penv = EnvironmentSequence::periodic({{"a", {}}, {"b", {}}});
    MeanSemigroup ms(fm, penv);
    const std::size_t n = 9;
    Eigen::MatrixXd prod = Eigen::MatrixXd::Identity(3, 3);
    for (std::size_t j = 2; j < n; ++j) prod = prod * ms.q_kernel(n, j).matrix();
    EXPECT_LT((prod - ms.q_compose(2, n).matrix()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ManyToOne, ExactForEveryIndicatorPath) {
    for (auto fm : {two_type_m2(), three_state_periodic_model()}) {
        auto e = fm->name() == "three" ? EnvironmentSequence::periodic({{"a", {}}, {"b", {}}}) : env;
        MeanSemigroup ms(fm, e);
        const std::size_t d = fm->dim();
        for (std::size_t n = 0; n <= 3; ++n)
            for (std::size_t x0 = 0; x0 < d; ++x0) {
                std::size_t paths = 1;
                for (std::size_t i = 0; i < n; ++i) paths *= d;
                for (std::size_t code = 0; code < paths; ++code) {
                    std::vector<std::size_t> target(n + 1, x0);
                    for (std::size_t i = n, c = code; i >= 1; --i, c /= d) target[i] = c % d;
                    // Oracle: E #(individuals with this ancestral path) = product of mean entries.
                    double expected = 1.0;
                    for (std::size_t i = 0; i < n; ++i)
                        expected *= ms.step(i)(static_cast<Eigen::Index>(target[i]), static_cast<Eigen::Index>(target[i + 1]));
                    auto r = many_to_one_check(ms, x0, n, [&](const std::vector<std::size_t>& p) { return p == target ? 1.0 : 0.0; });
                    EXPECT_LE(r.gap, 1e-9);
                    EXPECT_NEAR(r.lhs, expected, 1e-12);
                }
            }
    }
}

TEST(ManyToOne, RefusesOverBudget) {
    auto fm = three_state_periodic_model();
    MeanSemigroup ms(fm, EnvironmentSequence::periodic({{"a", {}}, {"b", {}}}));
    EXPECT_THROW(many_to_one_check(ms, 0, 13, [](const std::vector<std::size_t>&) { return 1.0; }), BudgetExceeded);
}

TEST(Doeblin, TwoTypeConstantIsThree) {
    auto fm = two_type_m2();
    EXPECT_DOUBLE_EQ(doeblin_constant(*fm, EnvironmentToken{"e", {}}), 3.0);
}

TEST(Doeblin, ContractionBoundHoldsExactly) {
    auto fm = two_type_m2();
    MeanSemigroup ms(fm, env);
    for (std::size_t n = 1; n <= 30; ++n) {
        auto all = ms.q_compose_all(n);
        for (std::size_t i = 0; i < n; ++i) EXPECT_LE(all[i].tv_spread(), std::pow(8.0 / 9.0, static_cast<double>(n - i)));
    }
    auto rep = doeblin_consequences(ms, 20);
    EXPECT_GE(rep.ratio_slack, 0.0);
    EXPECT_GE(rep.q_slack, 0.0);
    EXPECT_GE(rep.tv_slack, 0.0);
}

TEST(Doeblin, ZeroOppositePositiveIsInfinite) {
    auto fm = neutral_gw(CountLaw::deterministic(2), {{1.0, 0.0}, {0.5, 0.5}});
    EXPECT_TRUE(std::isinf(doeblin_constant(*fm, EnvironmentToken{"e", {}})));
}

TEST(Neutral, ForwardLawConvergesToInvariantLaw) {
    const std::vector<std::vector<double>> p{{0.1, 0.6, 0.3}, {0.4, 0.4, 0.2}, {0.5, 0.0, 0.5}};
    auto fm = neutral_gw(CountLaw::poisson(1.3), p);
    MeanSemigroup ms(fm, env);
    // Oracle: power iteration on the chain.
    Eigen::RowVector3d pi(1.0, 0.0, 0.0);
    Eigen::Matrix3d k;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) k(i, j) = p[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    for (int it = 0; it < 5000; ++it) pi = pi * k;
    const auto q = ms.q_compose(0, 200);
    for (std::size_t x = 0; x < 3; ++x)
        for (int y = 0; y < 3; ++y) EXPECT_NEAR(q(x, static_cast<std::size_t>(y)), pi(y), 1e-8);
}

TEST(Neutral, QKernelIsTheMarkovChain) {
    const std::vector<std::vector<double>> p{{0.2, 0.8}, {0.7, 0.3}};
    auto fm = neutral_gw(CountLaw::geometric(0.3), p);
    MeanSemigroup ms(fm, env);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t x = 0; x < 2; ++x)
            for (std::size_t y = 0; y < 2; ++y) EXPECT_NEAR(ms.q_kernel(5, i)(x, y), p[x][y], 1e-14);
}
