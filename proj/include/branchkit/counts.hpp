#pragma once

// Type-count simulation of finite models.  Individuals of one type in one
// generation are exchangeable, so a generation is summarized by the transfer
// counts C_g[x][y] = #(type-y children of type-x parents).  This reaches
// population sizes far beyond what an explicit tree can hold.
//
// Counts are doubles.  Draws are exact up to 2^53 trials; beyond that a normal
// approximation is used and the trajectory is flagged `approximate`.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <variant>
#include <vector>

#include "env.hpp"
#include "finite_model.hpp"
#include "rng.hpp"

namespace branchkit {

inline constexpr double exact_count_limit = 9007199254740992.0;  // 2^53

struct CountTrajectory {
    std::vector<std::vector<double>> z;                      // z[g][x]
    std::vector<std::vector<std::vector<double>>> transfer;  // transfer[g][x][y], g < n
    bool approximate = false;

    double total(std::size_t g) const {
        double s = 0.0;
        for (double v : z.at(g)) s += v;
        return s;
    }
};

namespace detail {

inline double normal_draw(double mean, double var, KeyedRng& rng) {
    std::normal_distribution<double> dist(mean, std::sqrt(std::max(var, 0.0)));
    return std::round(dist(rng));
}

inline double binomial_count(double n, double p, KeyedRng& rng, bool& approx) {
    if (n <= 0.0 || p <= 0.0) return 0.0;
    if (p >= 1.0) return n;
    if (n < exact_count_limit) {
        std::binomial_distribution<long long> dist(static_cast<long long>(n), p);
        return static_cast<double>(dist(rng));
    }
    approx = true;
    return std::clamp(normal_draw(n * p, n * p * (1.0 - p), rng), 0.0, n);
}

inline double poisson_count(double mean, KeyedRng& rng, bool& approx) {
    if (mean <= 0.0) return 0.0;
    if (mean < 1e15) {
        std::poisson_distribution<long long> dist(mean);
        return static_cast<double>(dist(rng));
    }
    approx = true;
    return std::max(0.0, normal_draw(mean, mean, rng));
}

inline std::vector<double> multinomial_count(double n, const std::vector<double>& probs, KeyedRng& rng,
                                             bool& approx) {
    std::vector<double> out(probs.size(), 0.0);
    double remaining = n, mass = 1.0;
    for (std::size_t i = 0; i < probs.size() && remaining > 0.0; ++i) {
        if (i + 1 == probs.size() || mass <= probs[i]) {
            out[i] = remaining;
            break;
        }
        const double draw = binomial_count(remaining, std::min(1.0, probs[i] / mass), rng, approx);
        out[i] = draw;
        remaining -= draw;
        mass -= probs[i];
    }
    return out;
}

/// Sum of n i.i.d. copies of the count law.
inline double total_offspring(const CountLaw& law, double n, KeyedRng& rng, bool& approx) {
    if (n <= 0.0) return 0.0;
    if (auto* d = law.as<CountLaw::Deterministic>()) return n * static_cast<double>(d->k);
    if (auto* p = law.as<CountLaw::Poisson>()) return poisson_count(n * p->lambda, rng, approx);
    if (auto* g = law.as<CountLaw::Geometric>()) {
        // Negative binomial as a gamma-Poisson mixture.
        std::gamma_distribution<double> gamma(n, (1.0 - g->p) / g->p);
        return poisson_count(gamma(rng), rng, approx);
    }
    const auto& entries = law.as<CountLaw::Table>()->entries;
    std::vector<double> probs;
    for (auto [k, p] : entries) probs.push_back(p);
    auto counts = multinomial_count(n, probs, rng, approx);
    double total = 0.0;
    for (std::size_t i = 0; i < entries.size(); ++i) total += counts[i] * static_cast<double>(entries[i].first);
    return total;
}

}  // namespace detail

/// Simulates type counts for n generations from one individual of atom x0.
inline CountTrajectory simulate_counts(const FiniteModel& fm, const EnvironmentSequence& env, std::size_t x0,
                                       std::size_t n, std::uint64_t seed) {
    const std::size_t d = fm.dim();
    if (x0 >= d) throw InvalidArgument("initial atom out of range");
    CountTrajectory t;
    t.z.assign(1, std::vector<double>(d, 0.0));
    t.z[0][x0] = 1.0;
    for (std::size_t g = 0; g < n; ++g) {
        KeyedRng rng(derive_key(seed ^ 0xA24BAED4963EE407ULL, g));
        const auto& laws = fm.laws_for(env.token_at(g));
        std::vector<std::vector<double>> c(d, std::vector<double>(d, 0.0));
        std::vector<double> next(d, 0.0);
        for (std::size_t x = 0; x < d; ++x) {
            const double zx = t.z[g][x];
            if (zx <= 0.0) continue;
            if (auto* p = std::get_if<ProductBrood>(&laws[x])) {
                const double total = detail::total_offspring(p->count, zx, rng, t.approximate);
                c[x] = detail::multinomial_count(total, p->row, rng, t.approximate);
            } else {
                const auto& j = std::get<JointBrood>(laws[x]);
                auto outcomes = detail::multinomial_count(zx, j.prob, rng, t.approximate);
                for (std::size_t o = 0; o < outcomes.size(); ++o)
                    for (auto y : j.children[o]) c[x][y] += outcomes[o];
            }
            for (std::size_t y = 0; y < d; ++y) next[y] += c[x][y];
        }
        t.transfer.push_back(std::move(c));
        t.z.push_back(std::move(next));
    }
    return t;
}

/// Atom path (X_0(U), ..., X_n(U)) of a uniformly chosen generation-n individual U,
/// drawn backwards: type of U proportional to z[n], then each parent type
/// proportional to the transfer counts into the child's type.
inline std::vector<std::size_t> sample_lineage(const CountTrajectory& t, std::size_t n, KeyedRng& rng) {
    auto pick = [&rng](const std::vector<double>& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        if (!(total > 0.0)) throw InvalidArgument("cannot sample a lineage from an empty generation");
        double u = rng.uniform() * total;
        std::size_t last = 0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (weights[i] <= 0.0) continue;
            last = i;
            if (u < weights[i]) return i;
            u -= weights[i];
        }
        return last;
    };
    std::vector<std::size_t> path(n + 1);
    path[n] = pick(t.z.at(n));
    for (std::size_t g = n; g-- > 0;) {
        std::vector<double> w(t.z[g].size());
        for (std::size_t x = 0; x < w.size(); ++x) w[x] = t.transfer[g][x][path[g + 1]];
        path[g] = pick(w);
    }
    return path;
}

}  // namespace branchkit
