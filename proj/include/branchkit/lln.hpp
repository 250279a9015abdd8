#pragma once

// Hypotheses and conclusions of the laws of large numbers: ergodicity of the
// auxiliary kernels, genealogy separation, summability conditions, the V_i
// second-moment bound and the empirical convergence of trait proportions.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "env.hpp"
#include "errors.hpp"
#include "finite_model.hpp"
#include "kernels.hpp"
#include "parallel.hpp"
#include "simulate.hpp"
#include "stats.hpp"

namespace branchkit {

// ---------------------------------------------------------------- ergodicity

struct ErgodicityEntry {
    std::size_t i = 0, n = 0;
    double value = 0.0;  // sup over atoms x and f of |Q_{i,n}(x, f) - mu_n(f)|
    double bound = 0.0;  // osc(f) * prod_{j=i}^{n-1} (1 - 1/M(T^j e)^2), maximized over f
};

struct ErgodicityDiagnostic {
    std::vector<ErgodicityEntry> entries;
    std::vector<Eigen::VectorXd> mu;  // reference law per horizon: row x0 of Q_{0,n}
    std::vector<std::size_t> horizons;
};

/// Test functions are given on atoms, already composed with f_n.  An empty
/// family means all atom indicators.
inline ErgodicityDiagnostic ergodicity_profile(const MeanSemigroup& ms, std::size_t x0,
                                               std::vector<Eigen::VectorXd> family,
                                               const std::vector<std::size_t>& horizons) {
    const std::size_t d = ms.dim();
    if (x0 >= d) throw InvalidArgument("initial atom out of range");
    if (family.empty())
        for (std::size_t y = 0; y < d; ++y) family.push_back(Eigen::VectorXd::Unit(static_cast<Eigen::Index>(d),
                                                                                   static_cast<Eigen::Index>(y)));
    ErgodicityDiagnostic out;
    out.horizons = horizons;
    std::size_t n_max = 0;
    for (auto n : horizons) n_max = std::max(n_max, n);
    std::vector<double> factor(n_max);
    for (std::size_t j = 0; j < n_max; ++j) {
        const double m = doeblin_constant(ms.model(), ms.env().token_at(j));
        factor[j] = std::isfinite(m) ? 1.0 - 1.0 / (m * m) : 1.0;
    }
    for (auto n : horizons) {
        auto q = ms.q_compose_all(n);
        const Eigen::VectorXd mu = q[0].row(x0).transpose();
        out.mu.push_back(mu);
        for (std::size_t i = 0; i <= n; ++i) {
            double prod = 1.0;
            for (std::size_t j = i; j < n; ++j) prod *= factor[j];
            ErgodicityEntry e{i, n, 0.0, 0.0};
            for (const auto& f : family) {
                const double target = mu.dot(f);
                for (std::size_t x = 0; x < d; ++x)
                    e.value = std::max(e.value, std::abs(q[i].row(x).dot(f) - target));
                e.bound = std::max(e.bound, (f.maxCoeff() - f.minCoeff()) * prod);
            }
            out.entries.push_back(e);
        }
    }
    return out;
}

// ---------------------------------------------------------------- separation

struct SeparationDiagnostic {
    std::size_t n = 0;
    std::vector<std::size_t> thresholds;
    std::vector<double> fraction;     // E #{ordered distinct pairs, |u^v| >= K} / m_n^2
    std::vector<double> fraction_se;
    double second_moment = 0.0;       // E Z_n(X)^2 / m_n^2
    double second_moment_se = 0.0;
    double m_n = 0.0;
    bool exact_mean = false;          // m_n from the mean semigroup rather than the sample
};

/// Exact m_n(x0, e, X) when the model is finite, else nullopt.
inline std::optional<double> exact_total_mean(const BranchingModel& model, const EnvironmentSequence& env, double x0,
                                              std::size_t n) {
    auto* fm = dynamic_cast<const FiniteModel*>(&model);
    if (!fm) return std::nullopt;
    auto shared = std::shared_ptr<const FiniteModel>(std::shared_ptr<const FiniteModel>{}, fm);
    MeanSemigroup ms(shared, env);
    return ms.mean_row(fm->atom_index(x0), n).total();
}

inline SeparationDiagnostic separation_profile(const BranchingModel& model, const EnvironmentSequence& env, double x0,
                                               std::size_t n, std::vector<std::size_t> thresholds,
                                               std::size_t replicates, std::uint64_t seed,
                                               const SimOptions& opts = {}, unsigned workers = 1) {
    if (replicates < 2) throw InvalidArgument("separation_profile needs at least 2 replicates");
    std::sort(thresholds.begin(), thresholds.end());
    std::vector<MrcaCounts> counts(replicates);
    SimOptions inner = opts;
    inner.workers = 1;
    parallel_for(replicates, workers, [&](std::size_t r) {
        auto tree = simulate(model, env, x0, n, replicate_seed(seed, r), inner);
        counts[r] = tree.mrca_pair_counts(n, thresholds);
    });
    SeparationDiagnostic out;
    out.n = n;
    out.thresholds = thresholds;
    std::vector<double> z(replicates);
    for (std::size_t r = 0; r < replicates; ++r) z[r] = counts[r].diagonal;
    if (auto m = exact_total_mean(model, env, x0, n)) {
        out.m_n = *m;
        out.exact_mean = true;
    } else {
        out.m_n = mean_of(z);
    }
    if (!(out.m_n > 0.0)) throw ExtinctEverywhere("every replicate died out before generation " + std::to_string(n));
    const double m2 = out.m_n * out.m_n;
    for (std::size_t k = 0; k < thresholds.size(); ++k) {
        std::vector<double> v(replicates);
        for (std::size_t r = 0; r < replicates; ++r) v[r] = counts[r].distinct_pairs[k] / m2;
        out.fraction.push_back(mean_of(v));
        out.fraction_se.push_back(standard_error(v));
    }
    std::vector<double> sq(replicates);
    for (std::size_t r = 0; r < replicates; ++r) sq[r] = z[r] * z[r] / m2;
    out.second_moment = mean_of(sq);
    out.second_moment_se = standard_error(sq);
    return out;
}

/// E #{ordered distinct pairs with MRCA generation >= K} / 4^n for the binary tree.
inline double binary_tree_pair_fraction(std::size_t n, std::size_t k) {
    double s = 0.0;
    for (std::size_t g = k; g < n; ++g) s += std::ldexp(1.0, -static_cast<int>(g) - 1);
    return s;
}

// ---------------------------------------------------------------- summability

enum class Verdict { summable, diverging, inconclusive, not_applicable };

inline std::string to_string(Verdict v) {
    switch (v) {
        case Verdict::summable: return "summable";
        case Verdict::diverging: return "diverging";
        case Verdict::inconclusive: return "inconclusive";
        case Verdict::not_applicable: return "not-applicable";
    }
    return "?";
}

struct CorollaryDReport {
    Verdict verdict = Verdict::inconclusive;
    Verdict first = Verdict::inconclusive;
    Verdict second = Verdict::inconclusive;
    double first_partial = 0.0;   // sum_{n=1}^{n_max} (1 + D(T^{n-1} e)) / m_n(x, e, X)
    double first_tail = 0.0;      // geometric bound on the remainder (infinite if none)
    double second_partial = 0.0;  // sum_{n=0}^{n_max} prod_{k<=n} (1 - 1/M(T^k e)^2)
    double second_tail = 0.0;
    std::vector<double> m_constants;
    std::vector<double> d_coefficients;
};

/// D(e) = sigma(e) M(e) M(Te)^2 / m(x, Te) with sigma(e) = sup_y E N(y,e)^2, for the fixed initial atom x.
inline double d_coefficient(const FiniteModel& fm, const EnvironmentSequence& env, std::size_t x, std::size_t j) {
    const auto& e = env.token_at(j);
    const auto& te = env.token_at(j + 1);
    double sigma = 0.0;
    for (std::size_t y = 0; y < fm.dim(); ++y) sigma = std::max(sigma, fm.second_moment_at(y, e));
    const double me = doeblin_constant(fm, e), mte = doeblin_constant(fm, te);
    return sigma * me * mte * mte / fm.mean_at(x, te);
}

inline CorollaryDReport corollary_d_conditions(std::shared_ptr<const FiniteModel> fm, const EnvironmentSequence& env,
                                               std::size_t x0, std::size_t n_max) {
    if (n_max < 2) throw InvalidArgument("corollary_d_conditions needs n_max >= 2");
    CorollaryDReport r;
    const auto period = env.period();
    const std::size_t window = period.value_or(1);
    for (std::size_t j = 0; j <= n_max + window; ++j) {
        const double m = doeblin_constant(*fm, env.token_at(j));
        r.m_constants.push_back(m);
        if (!std::isfinite(m)) {
            r.verdict = r.first = r.second = Verdict::not_applicable;
            return r;
        }
    }
    MeanSemigroup ms(fm, env);
    std::vector<double> log_m(n_max + window + 1);
    {
        Eigen::RowVectorXd v = Eigen::RowVectorXd::Unit(static_cast<Eigen::Index>(fm->dim()),
                                                        static_cast<Eigen::Index>(x0));
        double ls = 0.0;
        log_m[0] = 0.0;
        for (std::size_t n = 1; n < log_m.size(); ++n) {
            v = v * ms.step(n - 1);
            const double s = v.sum();
            v /= s;
            ls += std::log(s);
            log_m[n] = ls;
        }
    }
    for (std::size_t n = 1; n <= n_max + window; ++n) r.d_coefficients.push_back(d_coefficient(*fm, env, x0, n - 1));
    for (std::size_t n = 1; n <= n_max; ++n) r.first_partial += (1.0 + r.d_coefficients[n - 1]) * std::exp(-log_m[n]);
    double prod = 1.0;
    std::vector<double> prods;
    for (std::size_t n = 0; n <= n_max + window; ++n) {
        prod *= 1.0 - 1.0 / (r.m_constants[n] * r.m_constants[n]);
        prods.push_back(prod);
        if (n <= n_max) r.second_partial += prod;
    }
    if (!period) {
        // Coefficients are not eventually constant; no tail bound.
        r.first_tail = r.second_tail = std::numeric_limits<double>::infinity();
        r.verdict = r.first = r.second = Verdict::inconclusive;
        return r;
    }
    // Periodic coefficients: the terms shrink by a fixed factor per period.
    const std::size_t L = window;
    double dmax = 0.0;
    for (double d : r.d_coefficients) dmax = std::max(dmax, d);
    double q1 = 0.0;  // worst per-period ratio m_n / m_{n+L} over the last period
    for (std::size_t n = n_max - L + 1; n <= n_max; ++n) q1 = std::max(q1, std::exp(log_m[n] - log_m[n + L]));
    if (q1 < 1.0 - 1e-12) {
        double last = 0.0;
        for (std::size_t n = n_max - L + 1; n <= n_max; ++n) last += std::exp(-log_m[n]);
        r.first_tail = (1.0 + dmax) * last * q1 / (1.0 - q1);
        r.first = Verdict::summable;
    } else {
        r.first_tail = std::numeric_limits<double>::infinity();
        r.first = Verdict::diverging;
    }
    double q2 = prods[n_max + L] / prods[n_max];
    if (prods[n_max] == 0.0) q2 = 0.0;
    if (q2 < 1.0 - 1e-12) {
        double last = 0.0;
        for (std::size_t n = n_max - L + 1; n <= n_max; ++n) last += prods[n];
        r.second_tail = last * q2 / (1.0 - q2);
        r.second = Verdict::summable;
    } else {
        r.second_tail = std::numeric_limits<double>::infinity();
        r.second = Verdict::diverging;
    }
    r.verdict = (r.first == Verdict::summable && r.second == Verdict::summable) ? Verdict::summable
                                                                               : Verdict::diverging;
    return r;
}

// ---------------------------------------------------------------- V_i

struct ViEntry {
    std::size_t i = 0;
    Eigen::MatrixXd v;          // V_i(x0', x1') over atom pairs, sup over k <= k_max
    Eigen::MatrixXd argmax_k;
    double bound = 0.0;         // M(T^i e)^2 / m_i(x, e)^2
    bool rising = false;        // still increasing over the last decade of k: unverified
};

struct ViReport {
    std::vector<ViEntry> entries;
    std::size_t k_max = 0;
    double series1_partial = 0.0;   // sum_{n <= i_max + k_max} 1 / m_n(x, e, X)
    double series2_partial = 0.0;   // sum_{i=1}^{i_max} E sum_{|w|=i-1, a != b} V_i(X(wa), X(wb))
    std::vector<double> normalized_second_moment;  // E Z_n^2 / m_n^2, n = 0..i_max
    bool corroborated = false;      // the normalized second moment has levelled off
};

/// E_x Z_n(X)^2 / m_n(x, e, X)^2 by the backward second-moment recursion.
inline double normalized_second_moment(const FiniteModel& fm, const EnvironmentSequence& env, std::size_t x,
                                       std::size_t n) {
    const auto d = static_cast<Eigen::Index>(fm.dim());
    Eigen::VectorXd h = Eigen::VectorXd::Ones(d), s = Eigen::VectorXd::Ones(d);
    for (std::size_t j = n; j-- > 0;) {
        const auto& e = env.token_at(j);
        const Eigen::MatrixXd m = fm.mean_matrix(e);
        Eigen::VectorXd s2 = m * s;
        for (Eigen::Index y = 0; y < d; ++y) s2(y) += h.dot(fm.pair_intensity(static_cast<std::size_t>(y), e) * h);
        Eigen::VectorXd h2 = m * h;
        const double c = h2.maxCoeff();
        h = h2 / c;
        s = s2 / (c * c);
    }
    const auto xi = static_cast<Eigen::Index>(x);
    return s(xi) / (h(xi) * h(xi));
}

inline ViReport vi_bound(std::shared_ptr<const FiniteModel> fm, const EnvironmentSequence& env, std::size_t x0,
                         std::size_t i_max, std::size_t k_max = 200) {
    MeanSemigroup ms(fm, env);
    const auto d = static_cast<Eigen::Index>(fm->dim());
    ViReport r;
    r.k_max = k_max;
    // log m_n(x0, e, {y}) rows, n = 0..i_max + k_max.
    const std::size_t n_top = i_max + k_max;
    std::vector<Eigen::RowVectorXd> row(n_top + 1);
    std::vector<double> row_log(n_top + 1);
    row[0] = Eigen::RowVectorXd::Unit(d, static_cast<Eigen::Index>(x0));
    row_log[0] = 0.0;
    for (std::size_t n = 1; n <= n_top; ++n) {
        Eigen::RowVectorXd v = row[n - 1] * ms.step(n - 1);
        const double s = v.sum();
        row[n] = v / s;
        row_log[n] = row_log[n - 1] + std::log(s);
    }
    for (std::size_t n = 0; n <= n_top; ++n) r.series1_partial += std::exp(-row_log[n]);

    for (std::size_t i = 0; i <= i_max; ++i) {
        ViEntry e;
        e.i = i;
        e.v = Eigen::MatrixXd::Zero(d, d);
        e.argmax_k = Eigen::MatrixXd::Zero(d, d);
        Eigen::MatrixXd at_last_decade = Eigen::MatrixXd::Zero(d, d);
        // Column vector of log m_k(y, T^i e, X), built by A_k = A_{k-1} M_{i+k-1}.
        Eigen::MatrixXd a = Eigen::MatrixXd::Identity(d, d);
        double a_log = 0.0;
        for (std::size_t k = 0; k <= k_max; ++k) {
            if (k > 0) {
                a = a * ms.step(i + k - 1);
                const double c = a.maxCoeff();
                a /= c;
                a_log += std::log(c);
            }
            const Eigen::VectorXd tot = a.rowwise().sum();
            for (Eigen::Index y0 = 0; y0 < d; ++y0)
                for (Eigen::Index y1 = 0; y1 < d; ++y1) {
                    const double lv = std::log(tot(y0)) + std::log(tot(y1)) + 2.0 * a_log - 2.0 * row_log[i + k];
                    const double v = std::exp(lv);
                    if (v > e.v(y0, y1)) {
                        e.v(y0, y1) = v;
                        e.argmax_k(y0, y1) = static_cast<double>(k);
                    }
                    if (k + 10 == k_max) at_last_decade(y0, y1) = v;
                    if (k == k_max && k_max >= 10 && v > at_last_decade(y0, y1) * (1.0 + 1e-12)) e.rising = true;
                }
        }
        const double mc = doeblin_constant(*fm, env.token_at(i));
        e.bound = mc * mc * std::exp(-2.0 * row_log[i]);
        r.entries.push_back(std::move(e));
    }
    for (std::size_t i = 1; i <= i_max; ++i) {
        const Eigen::VectorXd occupancy = (row[i - 1] * std::exp(row_log[i - 1])).transpose();
        double s = 0.0;
        for (Eigen::Index y = 0; y < d; ++y) {
            if (occupancy(y) == 0.0) continue;
            const Eigen::MatrixXd pi = fm->pair_intensity(static_cast<std::size_t>(y), env.token_at(i - 1));
            s += occupancy(y) * (pi.array() * r.entries[i].v.array()).sum();
        }
        r.series2_partial += s;
    }
    for (std::size_t n = 0; n <= i_max; ++n) r.normalized_second_moment.push_back(normalized_second_moment(*fm, env, x0, n));
    const auto& nsm = r.normalized_second_moment;
    if (nsm.size() > 10) {
        // Increments over the last decade should shrink geometrically with a small extrapolated tail.
        const std::size_t n = nsm.size();
        const double d_last = std::abs(nsm[n - 1] - nsm[n - 2]), d_first = std::abs(nsm[n - 10] - nsm[n - 11]);
        if (d_last == 0.0) {
            r.corroborated = std::isfinite(nsm.back());
        } else if (d_first > 0.0 && d_last < d_first) {
            const double ratio = std::pow(d_last / d_first, 1.0 / 9.0);
            r.corroborated = d_last * ratio / (1.0 - ratio) < 0.1 * nsm.back();
        }
    }
    return r;
}

// ---------------------------------------------------------------- LLN experiment

struct LlnRecord {
    std::size_t replicate = 0;
    std::size_t n = 0;
    double z = 0.0;             // Z_n(X)
    double fz = 0.0;            // f_n . Z_n(f)
    double discrepancy = 0.0;   // (f_n.Z_n(f) - mu_n(f) Z_n(X)) / m_n
    std::optional<double> gap;  // |f_n.Z_n(f) / Z_n(X) - mu_n(f)|, absent when Z_n = 0
    bool in_t = false;          // replicate passes the geometric-growth surrogate
};

struct LlnResult {
    std::vector<std::size_t> ladder;
    std::vector<LlnRecord> records;      // ordered by (replicate, ladder index)
    std::vector<double> mu;              // mu_n(f) per ladder entry
    std::vector<double> m;               // m_n(x, e, X) per ladder entry
    bool exact_reference = false;        // mu and m from the mean semigroup
    std::vector<double> mean_square;     // E discrepancy^2 over all replicates
    std::vector<double> median_gap;      // over replicates in the surrogate event (NaN if none)
    std::size_t in_t = 0;
    std::vector<double> tail_max_gap;    // per replicate in T: max gap over the second half of the ladder
};

/// f_n.Z_n(f) = sum over generation-n individuals u of f(f_n(n, X(u))).
using TraitMap = std::function<double(std::size_t n, double x)>;

inline LlnResult lln_experiment(const BranchingModel& model, const EnvironmentSequence& env, double x0,
                                const std::function<double(double)>& f, const TraitMap& f_n,
                                std::vector<std::size_t> ladder, std::size_t replicates, std::uint64_t seed,
                                const SimOptions& opts = {}, unsigned workers = 1) {
    if (ladder.empty() || replicates == 0) throw InvalidArgument("lln_experiment needs a ladder and replicates");
    std::sort(ladder.begin(), ladder.end());
    ladder.erase(std::unique(ladder.begin(), ladder.end()), ladder.end());
    const std::size_t n_max = ladder.back();
    SimOptions inner = opts;
    inner.workers = 1;

    struct Run {
        std::vector<double> z, fz;  // per ladder entry
        std::vector<double> sizes;  // Z_g for g = 0..n_max
    };
    auto run_batch = [&](std::uint64_t master, std::size_t count) {
        std::vector<Run> runs(count);
        parallel_for(count, workers, [&](std::size_t r) {
            Run& run = runs[r];
            run.z.assign(ladder.size(), 0.0);
            run.fz.assign(ladder.size(), 0.0);
            run.sizes.assign(n_max + 1, 0.0);
            simulate_streaming(model, env, x0, n_max, replicate_seed(master, r), inner,
                               [&](std::size_t g, const std::vector<Node>& gen) {
                                   run.sizes[g] = static_cast<double>(gen.size());
                                   auto it = std::find(ladder.begin(), ladder.end(), g);
                                   if (it != ladder.end()) {
                                       const auto k = static_cast<std::size_t>(it - ladder.begin());
                                       double s = 0.0;
                                       for (const auto& u : gen) {
                                           const double v = f(f_n(g, u.trait));
                                           if (!std::isfinite(v))
                                               throw InvalidArgument("f is not finite at trait " +
                                                                     BranchingModel::format_trait(u.trait));
                                           s += v;
                                       }
                                       run.z[k] = static_cast<double>(gen.size());
                                       run.fz[k] = s;
                                   }
                                   return true;
                               });
        });
        return runs;
    };

    LlnResult res;
    res.ladder = ladder;
    auto* fm = dynamic_cast<const FiniteModel*>(&model);
    if (fm) {
        auto shared = std::shared_ptr<const FiniteModel>(std::shared_ptr<const FiniteModel>{}, fm);
        MeanSemigroup ms(shared, env);
        const std::size_t x = fm->atom_index(x0);
        for (auto n : ladder) {
            const Eigen::RowVectorXd q = ms.q_compose(0, n).row(x);
            double mu = 0.0;
            for (std::size_t y = 0; y < fm->dim(); ++y) mu += q(static_cast<Eigen::Index>(y)) * f(f_n(n, fm->atoms()[y]));
            res.mu.push_back(mu);
            res.m.push_back(ms.mean_row(x, n).total());
        }
        res.exact_reference = true;
    } else {
        // Ratio of means over an independent batch: E f_n.Z_n(f) / E Z_n(X).
        auto ref = run_batch(seed ^ 0x6C8E9CF570932BD5ULL, replicates);
        for (std::size_t k = 0; k < ladder.size(); ++k) {
            double sz = 0.0, sf = 0.0;
            for (const auto& r : ref) {
                sz += r.z[k];
                sf += r.fz[k];
            }
            if (!(sz > 0.0)) throw ExtinctEverywhere("reference batch extinct at generation " + std::to_string(ladder[k]));
            res.mu.push_back(sf / sz);
            res.m.push_back(sz / static_cast<double>(replicates));
        }
    }

    auto runs = run_batch(seed, replicates);
    std::vector<std::vector<double>> sq(ladder.size()), gaps(ladder.size());
    bool any_alive = false;
    for (std::size_t r = 0; r < replicates; ++r) {
        const Run& run = runs[r];
        bool alive = true;
        for (double s : run.sizes) alive = alive && s > 0.0;
        std::vector<double> ratios;
        for (std::size_t g = n_max / 2; g < n_max; ++g)
            if (run.sizes[g] > 0.0) ratios.push_back(run.sizes[g + 1] / run.sizes[g]);
        const bool in_t = alive && !ratios.empty() && median(ratios) > 1.05;
        res.in_t += in_t ? 1 : 0;
        double tail = 0.0;
        for (std::size_t k = 0; k < ladder.size(); ++k) {
            LlnRecord rec;
            rec.replicate = r;
            rec.n = ladder[k];
            rec.z = run.z[k];
            rec.fz = run.fz[k];
            rec.discrepancy = (rec.fz - res.mu[k] * rec.z) / res.m[k];
            if (rec.z > 0.0) {
                rec.gap = std::abs(rec.fz / rec.z - res.mu[k]);
                any_alive = true;
            }
            rec.in_t = in_t;
            sq[k].push_back(rec.discrepancy * rec.discrepancy);
            if (in_t && rec.gap) {
                gaps[k].push_back(*rec.gap);
                if (2 * k >= ladder.size()) tail = std::max(tail, *rec.gap);
            }
            res.records.push_back(rec);
        }
        if (in_t) res.tail_max_gap.push_back(tail);
    }
    if (!any_alive) throw ExtinctEverywhere("every replicate died out");
    for (std::size_t k = 0; k < ladder.size(); ++k) {
        res.mean_square.push_back(mean_of(sq[k]));
        res.median_gap.push_back(gaps[k].empty() ? std::numeric_limits<double>::quiet_NaN() : median(gaps[k]));
    }
    return res;
}

}  // namespace branchkit
