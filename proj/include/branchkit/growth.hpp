#pragma once

// Growth rate three ways: slope of log m_n, log Perron eigenvalue of the
// period product, and sup_mu { int log m dmu - I(mu) } with the
// Donsker-Varadhan rate function of the biased chain.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "counts.hpp"
#include "env.hpp"
#include "errors.hpp"
#include "kernels.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "simulate.hpp"
#include "stats.hpp"

namespace branchkit {

inline constexpr double dv_clip = 20.0;

struct DvResult {
    double value = 0.0;
    Eigen::VectorXd w;      // maximizing log test function
    bool at_clip = false;   // the supremum wants |log u| beyond the clip: effectively infinite
};

/// I(mu) = sup_w sum_z mu(z) [w(z) - log sum_z' P(z,z') e^{w(z')}], w in [-20,20]^D,
/// on the D atoms (trait, phase) of a finite chain.
class RateFunctionEvaluator {
public:
    explicit RateFunctionEvaluator(Eigen::MatrixXd kernel, Eigen::VectorXd log_m = {})
        : p_(std::move(kernel)), log_m_(std::move(log_m)) {
        KernelTable check(p_, true);
        if (log_m_.size() == 0) log_m_ = Eigen::VectorXd::Zero(p_.rows());
        if (log_m_.size() != p_.rows()) throw InvalidArgument("log m has the wrong length");
    }

    /// Atoms (x, phase) for a constant or periodic environment; phase advances by one each step.
    static RateFunctionEvaluator from_model(const FiniteModel& fm, const EnvironmentSequence& env) {
        auto period = env.period();
        if (!period) throw Unsupported("rate function needs a constant or periodic environment");
        const std::size_t d = fm.dim(), l = *period, D = d * l;
        Eigen::MatrixXd p = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(D));
        Eigen::VectorXd lm(static_cast<Eigen::Index>(D));
        for (std::size_t ph = 0; ph < l; ++ph) {
            const auto& token = env.token_at(ph);
            const KernelTable b = biased_kernel(fm, token);
            for (std::size_t x = 0; x < d; ++x) {
                const auto z = static_cast<Eigen::Index>(ph * d + x);
                lm(z) = std::log(fm.mean_at(x, token));
                for (std::size_t y = 0; y < d; ++y)
                    p(z, static_cast<Eigen::Index>(((ph + 1) % l) * d + y)) = b(x, y);
            }
        }
        RateFunctionEvaluator ev(std::move(p), std::move(lm));
        ev.traits_ = d;
        return ev;
    }

    std::size_t size() const noexcept { return static_cast<std::size_t>(p_.rows()); }
    std::size_t traits() const noexcept { return traits_ ? traits_ : size(); }
    const Eigen::MatrixXd& kernel() const noexcept { return p_; }
    const Eigen::VectorXd& log_m() const noexcept { return log_m_; }

    double objective(const Eigen::VectorXd& mu, const Eigen::VectorXd& w) const {
        double s = 0.0;
        for (Eigen::Index z = 0; z < p_.rows(); ++z) {
            if (mu(z) == 0.0) continue;
            s += mu(z) * (w(z) - log_pe(z, w));
        }
        return s;
    }

    DvResult solve(const Eigen::VectorXd& mu, std::optional<Eigen::VectorXd> warm = std::nullopt) const {
        check_probability(mu);
        std::vector<Eigen::VectorXd> starts;
        starts.push_back(Eigen::VectorXd::Zero(p_.rows()));
        if (warm) starts.push_back(*warm);
        // A start aligned with mu helps when the optimum sits at the clip.
        starts.push_back((mu.array() * 2.0 * dv_clip - dv_clip).matrix());
        DvResult best;
        best.value = -std::numeric_limits<double>::infinity();
        for (const auto& s : starts) {
            DvResult r = ascend(mu, s);
            if (r.value > best.value) best = std::move(r);
        }
        best.at_clip = best.w.maxCoeff() - best.w.minCoeff() >= 2.0 * dv_clip - 1e-6;
        best.value = std::max(0.0, best.value);
        return best;
    }

    double rate(const Eigen::VectorXd& mu) const { return solve(mu).value; }

    /// d I / d mu at mu (envelope theorem): w*(z) - log (P e^{w*})(z).
    Eigen::VectorXd rate_gradient(const Eigen::VectorXd& w) const {
        Eigen::VectorXd g(p_.rows());
        for (Eigen::Index z = 0; z < p_.rows(); ++z) g(z) = w(z) - log_pe(z, w);
        return g;
    }

private:
    double log_pe(Eigen::Index z, const Eigen::VectorXd& w) const {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index y = 0; y < p_.cols(); ++y)
            if (p_(z, y) > 0.0) mx = std::max(mx, w(y));
        double s = 0.0;
        for (Eigen::Index y = 0; y < p_.cols(); ++y)
            if (p_(z, y) > 0.0) s += p_(z, y) * std::exp(w(y) - mx);
        return mx + std::log(s);
    }

    static void check_probability(const Eigen::VectorXd& mu) {
        if ((mu.array() < -1e-12).any() || std::abs(mu.sum() - 1.0) > 1e-9)
            throw InvalidArgument("mu must be a probability vector");
    }

    static Eigen::VectorXd project(Eigen::VectorXd w) {
        const double c = 0.5 * (w.maxCoeff() + w.minCoeff());
        w.array() -= c;
        return w.cwiseMax(-dv_clip).cwiseMin(dv_clip);
    }

    // Projected Newton ascent with Armijo backtracking; the objective is concave in w.
    DvResult ascend(const Eigen::VectorXd& mu, Eigen::VectorXd w) const {
        const Eigen::Index D = p_.rows();
        w = project(std::move(w));
        double f = objective(mu, w);
        for (int it = 0; it < 2000; ++it) {
            Eigen::VectorXd g = mu;
            Eigen::MatrixXd h = Eigen::MatrixXd::Zero(D, D);
            for (Eigen::Index z = 0; z < D; ++z) {
                if (mu(z) == 0.0) continue;
                const double lpe = log_pe(z, w);
                Eigen::VectorXd pi(D);
                for (Eigen::Index y = 0; y < D; ++y)
                    pi(y) = p_(z, y) > 0.0 ? p_(z, y) * std::exp(w(y) - lpe) : 0.0;
                g -= mu(z) * pi;
                h += mu(z) * (Eigen::MatrixXd(pi.asDiagonal()) - pi * pi.transpose());
            }
            // Coordinates pinned at the clip with the gradient pushing outwards are frozen.
            Eigen::VectorXd free = Eigen::VectorXd::Ones(D);
            for (Eigen::Index z = 0; z < D; ++z)
                if ((w(z) >= dv_clip - 1e-12 && g(z) > 0) || (w(z) <= -dv_clip + 1e-12 && g(z) < 0)) free(z) = 0.0;
            Eigen::VectorXd gf = g.cwiseProduct(free);
            if (gf.lpNorm<Eigen::Infinity>() < 1e-13) break;
            Eigen::MatrixXd hf = free.asDiagonal() * h * free.asDiagonal();
            hf += 1e-10 * Eigen::MatrixXd::Identity(D, D);
            for (Eigen::Index z = 0; z < D; ++z)
                if (free(z) == 0.0) hf(z, z) = 1.0;
            Eigen::VectorXd dir = hf.ldlt().solve(gf);
            if (!dir.allFinite() || dir.dot(gf) <= 0) dir = gf;
            double step = 1.0;
            bool moved = false;
            for (int ls = 0; ls < 60; ++ls, step *= 0.5) {
                Eigen::VectorXd cand = project(w + step * dir);
                const double fc = objective(mu, cand);
                if (fc >= f + 1e-4 * step * gf.dot(dir) || (fc > f && ls > 30)) {
                    moved = fc > f;
                    if (fc >= f) {
                        w = std::move(cand);
                        f = fc;
                    }
                    break;
                }
            }
            if (!moved) break;
        }
        return DvResult{f, w, false};
    }

    Eigen::MatrixXd p_;
    Eigen::VectorXd log_m_;
    std::size_t traits_ = 0;
};

struct VariationalResult {
    double rho_var = 0.0;
    Eigen::VectorXd maximizer;
    std::vector<Eigen::VectorXd> near_optimal;  // candidates within 1e-4 of the optimum
    bool flagged = false;                       // ascent hit its iteration budget without stalling
};

struct VariationalOptions {
    int starts = 16;
    int max_iterations = 4000;
    std::size_t grid_steps = 20;  // simplex grid resolution when D <= 4
    std::uint64_t seed = 7;
};

namespace detail {

inline void simplex_grid(std::size_t dim, std::size_t steps, std::vector<Eigen::VectorXd>& out,
                         Eigen::VectorXd& cur, std::size_t pos, std::size_t left) {
    if (pos + 1 == dim) {
        cur(static_cast<Eigen::Index>(pos)) = static_cast<double>(left) / static_cast<double>(steps);
        out.push_back(cur);
        return;
    }
    for (std::size_t k = 0; k <= left; ++k) {
        cur(static_cast<Eigen::Index>(pos)) = static_cast<double>(k) / static_cast<double>(steps);
        simplex_grid(dim, steps, out, cur, pos + 1, left - k);
    }
}

inline bool lex_greater(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        if (a(i) > b(i) + 1e-12) return true;
        if (a(i) < b(i) - 1e-12) return false;
    }
    return false;
}

}  // namespace detail

/// sup over the simplex of sum mu log m - I(mu), by exponentiated-gradient ascent
/// from several starts plus a coarse simplex grid for D <= 4.
inline VariationalResult variational_growth(const RateFunctionEvaluator& ev, const Eigen::VectorXd& log_m,
                                            const VariationalOptions& opts = {}) {
    const auto D = static_cast<Eigen::Index>(ev.size());
    if (log_m.size() != D) throw InvalidArgument("log m has the wrong length");
    auto value = [&](const Eigen::VectorXd& mu, DvResult& dv) {
        dv = ev.solve(mu, dv.w.size() ? std::optional<Eigen::VectorXd>(dv.w) : std::nullopt);
        return mu.dot(log_m) - dv.value;
    };
    struct Candidate {
        Eigen::VectorXd mu;
        double v;
    };
    std::vector<Candidate> candidates;
    VariationalResult res;

    if (D <= 4) {
        std::vector<Eigen::VectorXd> grid;
        Eigen::VectorXd cur(D);
        detail::simplex_grid(static_cast<std::size_t>(D), opts.grid_steps, grid, cur, 0, opts.grid_steps);
        for (auto& g : grid) {
            DvResult dv;
            const double v = value(g, dv);
            candidates.push_back({g, v});
        }
    }

    // On a periodic lift the rate is infinite unless every phase carries mass 1/L, so iterates are
    // renormalized block by block; a plain simplex step would leave that face and stall.
    const auto block = static_cast<Eigen::Index>(ev.traits());
    const Eigen::Index phases = D / block;
    auto balance = [&](Eigen::VectorXd mu) {
        for (Eigen::Index b = 0; b < phases; ++b) {
            auto seg = mu.segment(b * block, block);
            const double s = seg.sum();
            if (s > 0.0) seg /= s * static_cast<double>(phases);
            else seg.setConstant(1.0 / static_cast<double>(D));
        }
        return mu;
    };
    std::vector<Eigen::VectorXd> starts;
    starts.push_back(Eigen::VectorXd::Constant(D, 1.0 / static_cast<double>(D)));
    KeyedRng rng(derive_key(opts.seed, 0xD1));
    while (static_cast<int>(starts.size()) < opts.starts) {
        Eigen::VectorXd s(D);
        for (Eigen::Index i = 0; i < D; ++i) s(i) = -std::log(1.0 - rng.uniform());
        starts.push_back(balance(s));
    }
    for (auto mu : starts) {
        DvResult dv;
        double v = value(mu, dv);
        double eta = 0.5;
        int it = 0;
        for (; it < opts.max_iterations && eta > 1e-12; ++it) {
            Eigen::VectorXd grad = log_m - ev.rate_gradient(dv.w);
            const double gm = mu.dot(grad);
            Eigen::VectorXd cand = (mu.array() * ((grad.array() - gm) * eta).exp()).matrix();
            cand = balance(cand.cwiseMax(0.0));
            DvResult dv2 = dv;
            const double v2 = value(cand, dv2);
            if (v2 > v) {
                const double gain = v2 - v;
                mu = std::move(cand);
                v = v2;
                dv = std::move(dv2);
                eta = std::min(eta * 1.5, 50.0);
                if (gain < 1e-14) break;
            } else {
                eta *= 0.5;
            }
        }
        if (it >= opts.max_iterations) res.flagged = true;
        candidates.push_back({mu, v});
    }

    auto best = std::max_element(candidates.begin(), candidates.end(),
                                 [](const Candidate& a, const Candidate& b) { return a.v < b.v; });
    res.rho_var = best->v;
    res.maximizer = best->mu;
    for (const auto& c : candidates) {
        if (c.v >= res.rho_var - 1e-4) res.near_optimal.push_back(c.mu);
        if (c.v >= res.rho_var - 1e-9 && detail::lex_greater(c.mu, res.maximizer)) res.maximizer = c.mu;
    }
    return res;
}

/// Least-squares slope of log m_n(x0, e, X) over the second half of [0, n_max],
/// sampled with a stride equal to the environment period when there is one.
inline double growth_slope(const MeanSemigroup& ms, std::size_t x0, std::size_t n_max) {
    if (n_max < 10) throw InvalidArgument("growth_slope needs n_max >= 10");
    const std::size_t stride = ms.env().period().value_or(1);
    std::vector<double> log_tot(n_max + 1);
    Eigen::RowVectorXd v = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(ms.dim()));
    v(static_cast<Eigen::Index>(x0)) = 1.0;
    double log_scale = 0.0;
    log_tot[0] = 0.0;
    for (std::size_t n = 1; n <= n_max; ++n) {
        v = v * ms.step(n - 1);
        const double s = v.sum();
        v /= s;
        log_scale += std::log(s);
        log_tot[n] = log_scale;
    }
    std::vector<double> xs, ys;
    for (std::size_t n = n_max; n >= n_max / 2; n -= std::min(stride, n)) {
        xs.push_back(static_cast<double>(n));
        ys.push_back(log_tot[n]);
        if (n < stride) break;
    }
    if (xs.size() < 2) {
        xs = {0.0, static_cast<double>(n_max)};
        ys = {0.0, log_tot[n_max]};
    }
    return least_squares_slope(xs, ys);
}

/// Log of the dominant eigenvalue of the period product, per generation.
inline std::optional<double> rho_eig(const FiniteModel& fm, const EnvironmentSequence& env) {
    auto period = env.period();
    if (!period) return std::nullopt;
    const auto d = static_cast<Eigen::Index>(fm.dim());
    Eigen::MatrixXd a = Eigen::MatrixXd::Identity(d, d);
    for (std::size_t j = 0; j < *period; ++j) a = a * fm.mean_matrix(env.token_at(j));
    // Shift by the identity so that periodic (cyclic) matrices still converge.
    const double shift = a.cwiseAbs().maxCoeff();
    Eigen::MatrixXd b = a + shift * Eigen::MatrixXd::Identity(d, d);
    Eigen::VectorXd v = Eigen::VectorXd::Ones(d) / static_cast<double>(d);
    double lambda = 0.0;
    for (int it = 0; it < 100000; ++it) {
        Eigen::VectorXd nv = b * v;
        const double s = nv.sum();
        nv /= s;
        const double delta = (nv - v).lpNorm<Eigen::Infinity>();
        v = std::move(nv);
        lambda = s;
        if (delta < 1e-15) break;
    }
    return std::log(lambda - shift) / static_cast<double>(*period);
}

struct GrowthReport {
    double rho_slope = 0.0;
    std::optional<double> rho_eig;
    std::optional<double> rho_var;
    Eigen::VectorXd maximizer;
    std::vector<Eigen::VectorXd> near_optimal;
    bool flagged = false;
};

inline GrowthReport growth_report(std::shared_ptr<const FiniteModel> fm, const EnvironmentSequence& env,
                                  std::size_t x0, std::size_t n_max, bool variational) {
    GrowthReport r;
    MeanSemigroup ms(fm, env);
    r.rho_slope = growth_slope(ms, x0, n_max);
    r.rho_eig = rho_eig(*fm, env);
    if (variational) {
        auto ev = RateFunctionEvaluator::from_model(*fm, env);
        auto v = variational_growth(ev, ev.log_m());
        // The evaluator works per step of an L-periodic chain; the sup is the per-step rate.
        r.rho_var = v.rho_var;
        r.maximizer = v.maximizer;
        r.near_optimal = v.near_optimal;
        r.flagged = v.flagged;
    }
    return r;
}

struct LineageRecord {
    std::size_t replicate;
    std::size_t n;
    double distance;
};

struct TypicalLineageResult {
    std::vector<std::size_t> ladder;
    std::vector<LineageRecord> records;  // accepted replicates only, ordered by (replicate, n)
    std::vector<double> median_distance;  // per ladder entry
    std::size_t accepted = 0;
    std::size_t attempted = 0;
    double rho_slope = 0.0;
    Eigen::VectorXd maximizer;
};

/// Lineage of a uniform generation-n individual vs. the variational maximizer, in total variation.
/// Replicates are kept when n^-1 log Z_n(X) >= rho_slope - delta at the largest n.
inline TypicalLineageResult typical_lineage_experiment(std::shared_ptr<const FiniteModel> fm,
                                                       const EnvironmentSequence& env, std::size_t x0,
                                                       std::vector<std::size_t> ladder, std::size_t replicates,
                                                       std::uint64_t seed, unsigned workers = 1,
                                                       double delta = 0.05) {
    if (ladder.empty()) throw InvalidArgument("ladder must not be empty");
    std::sort(ladder.begin(), ladder.end());
    const std::size_t n_max = ladder.back();
    MeanSemigroup ms(fm, env);
    TypicalLineageResult res;
    res.ladder = ladder;
    res.rho_slope = growth_slope(ms, x0, std::max<std::size_t>(n_max, 200));
    if (!(res.rho_slope > 0.0)) throw InvalidArgument("typical lineage experiment needs positive growth");
    auto ev = RateFunctionEvaluator::from_model(*fm, env);
    res.maximizer = variational_growth(ev, ev.log_m()).maximizer;
    const std::size_t d = fm->dim(), period = env.period().value_or(1);

    struct Outcome {
        bool accepted = false;
        std::vector<double> distances;
    };
    const std::size_t max_attempts = 4 * replicates;
    for (std::size_t base = 0; res.accepted < replicates && base < max_attempts; base += replicates) {
        const std::size_t batch = std::min(replicates, max_attempts - base);
        std::vector<Outcome> out(batch);
        parallel_for(batch, workers, [&](std::size_t k) {
            const std::uint64_t rs = replicate_seed(seed, base + k);
            auto traj = simulate_counts(*fm, env, x0, n_max, rs);
            const double zn = traj.total(n_max);
            if (!(zn > 0.0) || std::log(zn) / static_cast<double>(n_max) < res.rho_slope - delta) return;
            out[k].accepted = true;
            for (std::size_t n : ladder) {
                KeyedRng rng(derive_key(rs, 0x11A6E + n));
                auto path = sample_lineage(traj, n, rng);
                Eigen::VectorXd occ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d * period));
                for (std::size_t i = 0; i <= n; ++i)
                    occ(static_cast<Eigen::Index>((i % period) * d + path[i])) += 1.0 / static_cast<double>(n + 1);
                out[k].distances.push_back(0.5 * (occ - res.maximizer).cwiseAbs().sum());
            }
        });
        for (std::size_t k = 0; k < batch && res.accepted < replicates; ++k) {
            ++res.attempted;
            if (!out[k].accepted) continue;
            ++res.accepted;
            for (std::size_t j = 0; j < ladder.size(); ++j)
                res.records.push_back({base + k, ladder[j], out[k].distances[j]});
        }
    }
    if (res.accepted == 0) throw ExtinctEverywhere("no replicate met the growth surrogate");
    for (std::size_t j = 0; j < ladder.size(); ++j) {
        std::vector<double> ds;
        for (const auto& r : res.records)
            if (r.n == ladder[j]) ds.push_back(r.distance);
        res.median_distance.push_back(median(ds));
    }
    return res;
}

}  // namespace branchkit
