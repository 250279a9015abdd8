// Acceptance checks, one per criterion.  Usage: acceptance [--criterion k] [--quick]
// Prints "criterion k: PASS|FAIL ..." per check; exits 1 when any check fails.
// Reference values are computed here, independently of the library code paths they check.

#include <Eigen/Eigenvalues>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <map>
#include <string>

#include "branchkit/branchkit.hpp"

using namespace branchkit;

namespace {

const EnvironmentSequence env = EnvironmentSequence::constant({"e", {}});
constexpr std::uint64_t seed = 20261015;

struct Outcome {
    bool pass = false;
    std::string detail;
};

class Timer {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// Two-type model written out by hand: N(0) = 2, N(1) = 1, children of 0 are 0 w.p. 3/4, of 1 w.p. 1/2.
Eigen::Matrix2d m2_mean() {
    Eigen::Matrix2d m;
    m << 1.5, 0.5, 0.5, 0.5;
    return m;
}

struct Perron {
    double lambda;
    Eigen::VectorXd right, left;
};

Perron perron(const Eigen::MatrixXd& m) {
    auto dominant = [](const Eigen::MatrixXd& a, double& lambda) {
        Eigen::EigenSolver<Eigen::MatrixXd> es(a);
        Eigen::Index best = 0;
        for (Eigen::Index i = 1; i < es.eigenvalues().size(); ++i)
            if (es.eigenvalues()(i).real() > es.eigenvalues()(best).real()) best = i;
        lambda = es.eigenvalues()(best).real();
        Eigen::VectorXd v = es.eigenvectors().col(best).real();
        return Eigen::VectorXd(v / v.sum());
    };
    Perron p;
    double l2 = 0;
    p.right = dominant(m, p.lambda);
    p.left = dominant(m.transpose(), l2);
    return p;
}

// ------------------------------------------------------------------ criteria

Outcome criterion1() {
    Timer t;
    auto fm = two_type_m2();
    MeanSemigroup ms(fm, env);
    const Eigen::Matrix2d m = m2_mean();
    double worst = 0.0, worst_oracle = 0.0;
    std::size_t checked = 0;
    for (std::size_t n = 0; n <= 3; ++n)
        for (std::size_t x0 = 0; x0 < 2; ++x0)
            for (std::size_t code = 0; code < (std::size_t{1} << n); ++code) {
                std::vector<std::size_t> target(n + 1);
                target[0] = x0;
                for (std::size_t i = 0; i < n; ++i) target[i + 1] = (code >> i) & 1;
                auto rep = many_to_one_check(ms, x0, n, [&](const std::vector<std::size_t>& p) { return p == target ? 1.0 : 0.0; });
                // E #{|u| = n following the path} is the product of mean-matrix entries along it.
                double oracle = 1.0;
                for (std::size_t i = 0; i < n; ++i)
                    oracle *= m(static_cast<Eigen::Index>(target[i]), static_cast<Eigen::Index>(target[i + 1]));
                worst = std::max(worst, rep.gap);
                worst_oracle = std::max(worst_oracle, std::abs(rep.lhs - oracle));
                ++checked;
            }
    const double secs = t.seconds();
    return {worst <= 1e-9 && worst_oracle <= 1e-9 && secs < 1.0,
            fmt("%zu indicators, max |lhs-rhs| = %.3g, max |lhs-oracle| = %.3g, %.3f s", checked, worst, worst_oracle, secs)};
}

Outcome criterion2() {
    Timer t;
    const double oracle = std::log(perron(m2_mean()).lambda);
    auto g = growth_report(two_type_m2(), env, 0, 400, true);
    const double d_slope = std::abs(g.rho_slope - oracle);
    const double d_var = g.rho_var ? std::abs(*g.rho_var - oracle) : INFINITY;
    const double secs = t.seconds();
    return {d_slope <= 1e-4 && d_var <= 1e-3 && secs < 10.0,
            fmt("log lambda_PF = %.6f, slope(400) = %.6f (|d| = %.2g), variational = %.6f (|d| = %.2g), %.2f s", oracle,
                g.rho_slope, d_slope, g.rho_var.value_or(NAN), d_var, secs)};
}

Outcome criterion3() {
    Timer t;
    auto fm = two_type_m2();
    MeanSemigroup ms(fm, env);
    const double big_m = doeblin_constant(*fm, env.token_at(0));
    bool ok = big_m == 3.0;
    double worst_ratio = 0.0;
    for (std::size_t n = 1; n <= 30; ++n)
        for (std::size_t i = 0; i < n; ++i) {
            const Eigen::MatrixXd q = ms.q_compose(i, n).matrix();
            double spread = 0.0;
            for (Eigen::Index x = 0; x < q.rows(); ++x)
                for (Eigen::Index y = 0; y < q.rows(); ++y) spread = std::max(spread, 0.5 * (q.row(x) - q.row(y)).cwiseAbs().sum());
            const double bound = std::pow(8.0 / 9.0, static_cast<double>(n - i));
            ok = ok && spread <= bound;
            worst_ratio = std::max(worst_ratio, spread / bound);
        }
    const double secs = t.seconds();
    return {ok && secs < 1.0, fmt("M = %g, max spread/bound = %.4f over 0 <= i < n <= 30, %.3f s", big_m, worst_ratio, secs)};
}

json lln_config() {
    return {{"experiment", "lln"}, {"model", "two-type-m2"}, {"seed", seed}, {"replicates", 1000},
            {"ladder", {6, 10, 14}}, {"f", {{"indicator", {1}}}}};
}

Outcome criterion4() {
    Timer t;
    const std::vector<std::size_t> ladder{6, 10, 14};
    auto res = lln_experiment(*two_type_m2(), env, 0.0, [](double x) { return x == 1.0 ? 1.0 : 0.0; },
                              [](std::size_t, double x) { return x; }, ladder, 1000, seed);
    bool decreasing = true;
    for (std::size_t k = 1; k < ladder.size(); ++k) decreasing = decreasing && res.mean_square[k] < res.mean_square[k - 1];
    // Reference proportion mu_14 = (e_0 M^14)_1 / |e_0 M^14|.
    Eigen::RowVector2d row(1.0, 0.0);
    for (int i = 0; i < 14; ++i) row = row * m2_mean();
    const double mu_oracle = row(1) / row.sum();
    const double gap = res.median_gap.back(), secs = t.seconds();
    return {decreasing && gap < 0.05 && std::abs(res.mu.back() - mu_oracle) < 1e-12 && secs < 120.0,
            fmt("mean-square %.4g > %.4g > %.4g: %s; median gap at 14 = %.4f; mu_14 = %.6f (oracle %.6f); %.1f s",
                res.mean_square[0], res.mean_square[1], res.mean_square[2], decreasing ? "yes" : "no", gap, res.mu.back(),
                mu_oracle, secs)};
}

json coupling_config() {
    return {{"experiment", "coupling"}, {"model", {{"name", "kimmel"}, {"lambda", 1.4}}}, {"x0", 1}, {"seed", seed},
            {"replicates", 1000}, {"steps", 20}, {"b", 1}};
}

Outcome criterion5() {
    Timer t;
    KimmelModel km(1.4);
    const auto tube = TubeSpec::half_line(1.0, 21);
    std::size_t violations = 0, checks = 0;
    for (std::size_t r = 0; r < 1000; ++r) {
        auto rec = bpve_couple(km, env, 1.0, tube, replicate_seed(seed, r));
        for (std::size_t i = 0; i < rec.in_tube.size(); ++i, ++checks) violations += rec.in_tube[i] < rec.bpve[i];
    }
    const double secs = t.seconds();
    return {violations == 0 && secs < 120.0, fmt("%zu violations in %zu checkpoint comparisons, %.1f s", violations, checks, secs)};
}

json kimmel_density_config() {
    return {{"experiment", "local-density"}, {"model", {{"name", "kimmel"}, {"lambda", 1.4}}}, {"x0", 1},
            {"seed", seed}, {"replicates", 1000}, {"cap", 10000000}, {"ladder", {10, 20, 30, 40}}, {"a_n", "const:1"}};
}

Outcome criterion6() {
    Timer t;
    KimmelModel km(1.4);
    DensityOptions o;
    o.sim.cap = 10'000'000;
    auto res = local_density_experiment(km, env, 1.0, [](std::size_t) { return 1.0; }, {10, 20, 30, 40}, 1000, seed, o);
    const double target = std::log(1.4);
    // Pgf oracle: a parasite line is Galton-Watson with Poisson(0.7) offspring, E N*_n = 2^n P(Y_n > 0).
    std::map<int, double> log_mean;
    double s = 0.0;
    for (int n = 1; n <= 40; ++n) {
        s = std::exp(0.7 * (s - 1.0));
        log_mean[n] = n * std::log(2.0) + std::log1p(-s);
    }
    const double oracle_slope = (log_mean[40] - log_mean[30]) / 10.0;
    const double secs = t.seconds();
    return {std::abs(res.median_slope - target) <= 0.05 && std::abs(oracle_slope - target) <= 0.01 && secs < 600.0,
            fmt("median slope = %.5f (se %.4f, %zu survivors), log 1.4 = %.5f, pgf slope(30..40) = %.5f, %.1f s",
                res.median_slope, res.slope_se, res.survivors, target, oracle_slope, secs)};
}

const json brw_model = {{"name", "brw"}, {"count", {{"deterministic", 2}}}, {"increment", {{"normal", {0, 1}}}}};

json extremes_config() {
    return {{"experiment", "extremes"}, {"model", brw_model}, {"seed", seed}, {"replicates", 500}, {"ladder", {60}}};
}

json brw_density_config() {
    return {{"experiment", "local-density"}, {"model", brw_model}, {"seed", seed}, {"replicates", 500},
            {"ladder", {10, 20, 30}}, {"a_n", "linear:0.8"}, {"prune_epsilon", 1e-4}};
}

Outcome criterion7() {
    Timer t;
    BrwModel bm(CountLaw::deterministic(2), IncrementLaw::normal(0.0, 1.0));
    // Lambda(a) = a^2 / 2 for N(0,1): the speed solves a^2 / 2 = log 2, the density rate at a is log 2 - a^2 / 2.
    const double speed = std::sqrt(2.0 * std::log(2.0)), rate = std::log(2.0) - 0.8 * 0.8 / 2.0;
    auto ext = extremal_particle_experiment(bm, env, 0.0, speed, {60}, 500, seed);
    DensityOptions o;
    o.prune_epsilon = 1e-4;
    auto den = local_density_experiment(bm, env, 0.0, [](std::size_t n) { return 0.8 * static_cast<double>(n); }, {10, 20, 30},
                                        500, seed, o);
    const double m = ext.median_max_over_n[0], secs = t.seconds();
    const bool speed_ok = std::abs(m - speed) <= 0.05, density_ok = std::abs(den.median_slope - rate) <= 0.07;
    return {speed_ok && density_ok && secs < 600.0,
            fmt("median max/60 = %.5f vs %.5f (%s; mean miss bound %.3f); density slope = %.5f vs %.4f (%s); %.1f s", m, speed,
                speed_ok ? "ok" : "outside 0.05", ext.mean_miss_bound, den.median_slope, rate,
                density_ok ? "ok" : "outside 0.07", secs)};
}

json lineage_config() {
    return {{"experiment", "lineage"}, {"model", "two-type-m2"}, {"seed", seed}, {"replicates", 500}, {"ladder", {15, 30, 60}}};
}

Outcome criterion8() {
    Timer t;
    auto res = typical_lineage_experiment(two_type_m2(), env, 0, {15, 30, 60}, 500, seed);
    // The maximizer should be u * v from the Perron eigenvectors, normalized.
    const auto p = perron(m2_mean());
    Eigen::VectorXd uv = p.left.cwiseProduct(p.right);
    uv /= uv.sum();
    const double d_max = (res.maximizer - uv).cwiseAbs().maxCoeff();
    const double d15 = res.median_distance.front(), d60 = res.median_distance.back(), secs = t.seconds();
    return {res.accepted == 500 && d60 < d15 && d_max < 1e-3 && secs < 300.0,
            fmt("median TV: n=15 %.4f, n=30 %.4f, n=60 %.4f; accepted %zu/%zu; maximizer off u*v by %.2g; %.1f s", d15,
                res.median_distance[1], d60, res.accepted, res.attempted, d_max, secs)};
}

Outcome criterion9(bool quick) {
    Timer t;
    std::vector<std::pair<std::string, json>> runs{{"lln", lln_config()},
                                                   {"coupling", coupling_config()},
                                                   {"kimmel-density", kimmel_density_config()},
                                                   {"extremes", extremes_config()},
                                                   {"brw-density", brw_density_config()},
                                                   {"lineage", lineage_config()}};
    bool ok = true;
    std::string detail;
    for (auto& [name, cfg] : runs) {
        if (quick) cfg["replicates"] = 20;
        const auto rc = validate_config(cfg);
        const auto a = records_ndjson(run_experiment(rc, 1).records);
        const auto b = records_ndjson(run_experiment(rc, 8).records);
        const bool same = a == b && !a.empty();
        ok = ok && same;
        detail += fmt("%s %s (%zu bytes); ", name.c_str(), same ? "identical" : "DIFFERENT", a.size());
    }
    return {ok, detail + fmt("%.1f s", t.seconds())};
}

}  // namespace

int main(int argc, char** argv) {
    int only = 0;
    bool quick = false;
    for (int i = 1; i < argc; ++i) {
        if (!std::strcmp(argv[i], "--criterion") && i + 1 < argc) only = std::atoi(argv[++i]);
        else if (!std::strcmp(argv[i], "--quick")) quick = true;
        else {
            std::cerr << "usage: acceptance [--criterion 1..9] [--quick]\n";
            return 2;
        }
    }
    const std::vector<std::function<Outcome()>> checks{criterion1, criterion2, criterion3, criterion4, criterion5,
                                                       criterion6, criterion7, criterion8, [quick] { return criterion9(quick); }};
    bool all = true;
    for (std::size_t k = 1; k <= checks.size(); ++k) {
        if (only && static_cast<std::size_t>(only) != k) continue;
        Outcome o;
        try {
            o = checks[k - 1]();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        std::cout << "criterion " << k << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
        all = all && o.pass;
    }
    return all ? 0 : 1;
}
