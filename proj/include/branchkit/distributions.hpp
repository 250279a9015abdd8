#pragma once

// Offspring-count laws and displacement (increment) laws used by the
// built-in models and by custom model descriptors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace branchkit {

inline double log_poisson_pmf(std::uint64_t k, double mean) {
    if (mean == 0.0) return k == 0 ? 0.0 : -std::numeric_limits<double>::infinity();
    const double kd = static_cast<double>(k);
    return kd * std::log(mean) - mean - std::lgamma(kd + 1.0);
}

inline double poisson_pmf(std::uint64_t k, double mean) { return std::exp(log_poisson_pmf(k, mean)); }

inline double binomial_pmf(std::uint64_t k, std::uint64_t n, double p) {
    if (k > n) return 0.0;
    if (p <= 0.0) return k == 0 ? 1.0 : 0.0;
    if (p >= 1.0) return k == n ? 1.0 : 0.0;
    const double nd = static_cast<double>(n), kd = static_cast<double>(k);
    return std::exp(std::lgamma(nd + 1) - std::lgamma(kd + 1) - std::lgamma(nd - kd + 1) +
                    kd * std::log(p) + (nd - kd) * std::log1p(-p));
}

/// log P(N(0,1) >= z), accurate far into the upper tail.
inline double log_normal_sf(double z) {
    if (z < 30.0) return std::log(0.5 * std::erfc(z / std::numbers::sqrt2));
    // Mills-ratio asymptotic series; the first omitted term is below 1e-9 here.
    const double z2 = z * z;
    const double series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
    return -0.5 * z2 - std::log(z * std::sqrt(2.0 * std::numbers::pi)) + std::log(series);
}

inline std::uint64_t sample_poisson(double mean, KeyedRng& rng) {
    if (mean <= 0.0) return 0;
    std::poisson_distribution<std::int64_t> dist(mean);
    return static_cast<std::uint64_t>(dist(rng));
}

inline std::uint64_t sample_binomial(std::uint64_t n, double p, KeyedRng& rng) {
    if (n == 0 || p <= 0.0) return 0;
    if (p >= 1.0) return n;
    std::binomial_distribution<std::int64_t> dist(static_cast<std::int64_t>(n), p);
    return static_cast<std::uint64_t>(dist(rng));
}

/// Law of the offspring number N(x,e).
class CountLaw {
public:
    struct Deterministic { std::uint64_t k; };
    struct Poisson { double lambda; };
    /// P(N = k) = (1-p)^k p for k >= 0.
    struct Geometric { double p; };
    struct Table { std::vector<std::pair<std::uint64_t, double>> entries; };

    static CountLaw deterministic(std::uint64_t k) { return CountLaw(Deterministic{k}); }
    static CountLaw poisson(double lambda) { return CountLaw(Poisson{lambda}); }
    static CountLaw geometric(double p) { return CountLaw(Geometric{p}); }
    static CountLaw table(std::vector<std::pair<std::uint64_t, double>> entries) {
        return CountLaw(Table{std::move(entries)});
    }

    double mean() const {
        return std::visit(
            [](const auto& law) -> double {
                using T = std::decay_t<decltype(law)>;
                if constexpr (std::is_same_v<T, Deterministic>) return static_cast<double>(law.k);
                else if constexpr (std::is_same_v<T, Poisson>) return law.lambda;
                else if constexpr (std::is_same_v<T, Geometric>) return (1.0 - law.p) / law.p;
                else {
                    double m = 0.0;
                    for (auto [k, p] : law.entries) m += static_cast<double>(k) * p;
                    return m;
                }
            },
            law_);
    }

    double second_moment() const {
        return std::visit(
            [](const auto& law) -> double {
                using T = std::decay_t<decltype(law)>;
                if constexpr (std::is_same_v<T, Deterministic>) {
                    const double k = static_cast<double>(law.k);
                    return k * k;
                } else if constexpr (std::is_same_v<T, Poisson>) {
                    return law.lambda + law.lambda * law.lambda;
                } else if constexpr (std::is_same_v<T, Geometric>) {
                    const double q = 1.0 - law.p;
                    return q * (1.0 + q) / (law.p * law.p);
                } else {
                    double m2 = 0.0;
                    for (auto [k, p] : law.entries) m2 += static_cast<double>(k * k) * p;
                    return m2;
                }
            },
            law_);
    }

    /// E[N(N-1)], the mean number of ordered pairs of distinct children.
    double factorial_moment2() const { return second_moment() - mean(); }

    double pmf(std::uint64_t k) const {
        return std::visit(
            [k](const auto& law) -> double {
                using T = std::decay_t<decltype(law)>;
                if constexpr (std::is_same_v<T, Deterministic>) return k == law.k ? 1.0 : 0.0;
                else if constexpr (std::is_same_v<T, Poisson>) return poisson_pmf(k, law.lambda);
                else if constexpr (std::is_same_v<T, Geometric>)
                    return law.p * std::pow(1.0 - law.p, static_cast<double>(k));
                else {
                    double p = 0.0;
                    for (auto [kk, pp] : law.entries)
                        if (kk == k) p += pp;
                    return p;
                }
            },
            law_);
    }

    /// Largest k with positive mass, if the support is finite.
    std::optional<std::uint64_t> max_support() const {
        if (auto* d = std::get_if<Deterministic>(&law_)) return d->k;
        if (auto* t = std::get_if<Table>(&law_)) {
            std::uint64_t kmax = 0;
            for (auto [k, p] : t->entries)
                if (p > 0.0) kmax = std::max(kmax, k);
            return kmax;
        }
        return std::nullopt;
    }

    /// Smallest K with P(N > K) <= tail (exact support bound when finite).
    std::uint64_t support_bound(double tail = 1e-16) const {
        if (auto kmax = max_support()) return *kmax;
        double cdf = 0.0;
        std::uint64_t k = 0;
        for (;; ++k) {
            cdf += pmf(k);
            if (1.0 - cdf <= tail || k > 100000) break;
        }
        return k;
    }

    std::uint64_t sample(KeyedRng& rng) const {
        return std::visit(
            [&rng](const auto& law) -> std::uint64_t {
                using T = std::decay_t<decltype(law)>;
                if constexpr (std::is_same_v<T, Deterministic>) return law.k;
                else if constexpr (std::is_same_v<T, Poisson>) return sample_poisson(law.lambda, rng);
                else if constexpr (std::is_same_v<T, Geometric>) {
                    std::geometric_distribution<std::int64_t> dist(law.p);
                    return static_cast<std::uint64_t>(dist(rng));
                } else {
                    double u = rng.uniform();
                    for (auto [k, p] : law.entries) {
                        if (u < p) return k;
                        u -= p;
                    }
                    return law.entries.back().first;
                }
            },
            law_);
    }

    std::string describe() const {
        std::ostringstream os;
        std::visit(
            [&os](const auto& law) {
                using T = std::decay_t<decltype(law)>;
                if constexpr (std::is_same_v<T, Deterministic>) os << "deterministic(" << law.k << ")";
                else if constexpr (std::is_same_v<T, Poisson>) os << "poisson(" << law.lambda << ")";
                else if constexpr (std::is_same_v<T, Geometric>) os << "geometric(" << law.p << ")";
                else {
                    os << "table(";
                    for (std::size_t i = 0; i < law.entries.size(); ++i)
                        os << (i ? "," : "") << law.entries[i].first << ":" << law.entries[i].second;
                    os << ")";
                }
            },
            law_);
        return os.str();
    }

    bool operator==(const CountLaw& other) const { return describe() == other.describe(); }

    template <class T>
    const T* as() const noexcept { return std::get_if<T>(&law_); }

private:
    using Variant = std::variant<Deterministic, Poisson, Geometric, Table>;

    explicit CountLaw(Variant law) : law_(std::move(law)) { validate(); }

    void validate() const {
        if (auto* p = std::get_if<Poisson>(&law_)) {
            if (!(p->lambda > 0.0) || !std::isfinite(p->lambda))
                throw InvalidArgument("poisson lambda must be > 0");
        } else if (auto* g = std::get_if<Geometric>(&law_)) {
            if (!(g->p > 0.0 && g->p < 1.0)) throw InvalidArgument("geometric p must be in (0,1)");
        } else if (auto* t = std::get_if<Table>(&law_)) {
            if (t->entries.empty()) throw InvalidArgument("count table must not be empty");
            double total = 0.0;
            for (auto [k, p] : t->entries) {
                if (!(p >= 0.0)) throw InvalidArgument("count table probabilities must be >= 0");
                total += p;
            }
            if (std::abs(total - 1.0) > 1e-12)
                throw InvalidArgument("count table probabilities must sum to 1");
        }
        if (!(mean() > 0.0)) throw InvalidArgument("mean offspring number must be > 0");
    }

    Variant law_;
};

/// Law of one displacement X in a branching random walk.
class IncrementLaw {
public:
    struct Rademacher {};
    struct Normal { double mu; double sigma; };
    struct Table { std::vector<std::pair<double, double>> entries; };

    static IncrementLaw rademacher() { return IncrementLaw(Rademacher{}); }
    static IncrementLaw normal(double mu, double sigma) { return IncrementLaw(Normal{mu, sigma}); }
    static IncrementLaw table(std::vector<std::pair<double, double>> entries) {
        return IncrementLaw(Table{std::move(entries)});
    }

    double sample(KeyedRng& rng) const {
        if (std::holds_alternative<Rademacher>(law_)) return rng.uniform() < 0.5 ? -1.0 : 1.0;
        if (auto* n = std::get_if<Normal>(&law_)) {
            std::normal_distribution<double> dist(n->mu, n->sigma);
            return dist(rng);
        }
        const auto& t = std::get<Table>(law_);
        double u = rng.uniform();
        for (auto [v, p] : t.entries) {
            if (u < p) return v;
            u -= p;
        }
        return t.entries.back().first;
    }

    double mean() const {
        if (std::holds_alternative<Rademacher>(law_)) return 0.0;
        if (auto* n = std::get_if<Normal>(&law_)) return n->mu;
        double m = 0.0;
        for (auto [v, p] : std::get<Table>(law_).entries) m += v * p;
        return m;
    }

    /// log E exp(theta X).
    double log_mgf(double theta) const {
        if (std::holds_alternative<Rademacher>(law_)) return std::log(std::cosh(theta));
        if (auto* n = std::get_if<Normal>(&law_)) return theta * n->mu + 0.5 * theta * theta * n->sigma * n->sigma;
        double mx = -std::numeric_limits<double>::infinity();
        for (auto [v, p] : std::get<Table>(law_).entries)
            if (p > 0.0) mx = std::max(mx, theta * v);
        double s = 0.0;
        for (auto [v, p] : std::get<Table>(law_).entries)
            if (p > 0.0) s += p * std::exp(theta * v - mx);
        return mx + std::log(s);
    }

    /// Essential supremum, when finite.
    std::optional<double> ess_sup() const {
        if (std::holds_alternative<Rademacher>(law_)) return 1.0;
        if (std::holds_alternative<Normal>(law_)) return std::nullopt;
        double mx = -std::numeric_limits<double>::infinity();
        for (auto [v, p] : std::get<Table>(law_).entries)
            if (p > 0.0) mx = std::max(mx, v);
        return mx;
    }

    /// Cramér rate function Lambda(a) = sup_theta (theta a - log E e^{theta X}).
    double rate(double a) const {
        if (auto* n = std::get_if<Normal>(&law_)) {
            const double d = (a - n->mu) / n->sigma;
            return 0.5 * d * d;
        }
        const double m = mean();
        if (a == m) return 0.0;
        if (auto sup = ess_sup(); sup && a > *sup) return std::numeric_limits<double>::infinity();
        const double sign = a > m ? 1.0 : -1.0;
        // Concave in theta; golden-section search on a bracket grown until the
        // objective decreases.
        auto objective = [&](double theta) { return theta * a - log_mgf(theta); };
        double hi = 1.0;
        while (hi < 1e4 && objective(sign * 2 * hi) > objective(sign * hi)) hi *= 2;
        double lo = 0.0;
        hi *= 2;
        const double g = (std::sqrt(5.0) - 1.0) / 2.0;
        double c = hi - g * (hi - lo), d = lo + g * (hi - lo);
        for (int it = 0; it < 200; ++it) {
            if (objective(sign * c) > objective(sign * d)) hi = d;
            else lo = c;
            c = hi - g * (hi - lo);
            d = lo + g * (hi - lo);
        }
        return std::max(0.0, objective(sign * 0.5 * (lo + hi)));
    }

    /// True when every atom is an integer (the walk lives on Z).
    bool integer_valued() const {
        if (std::holds_alternative<Rademacher>(law_)) return true;
        if (std::holds_alternative<Normal>(law_)) return false;
        for (auto [v, p] : std::get<Table>(law_).entries)
            if (p > 0.0 && v != std::round(v)) return false;
        return true;
    }

    /// Integer atoms (value, probability); requires integer_valued().
    std::vector<std::pair<long, double>> integer_atoms() const {
        if (std::holds_alternative<Rademacher>(law_)) return {{-1, 0.5}, {1, 0.5}};
        std::vector<std::pair<long, double>> out;
        for (auto [v, p] : std::get<Table>(law_).entries)
            if (p > 0.0) out.emplace_back(static_cast<long>(std::lround(v)), p);
        return out;
    }

    std::string describe() const {
        std::ostringstream os;
        if (std::holds_alternative<Rademacher>(law_)) os << "rademacher";
        else if (auto* n = std::get_if<Normal>(&law_)) os << "normal(" << n->mu << "," << n->sigma << ")";
        else {
            os << "table(";
            const auto& e = std::get<Table>(law_).entries;
            for (std::size_t i = 0; i < e.size(); ++i) os << (i ? "," : "") << e[i].first << ":" << e[i].second;
            os << ")";
        }
        return os.str();
    }

    template <class T>
    const T* as() const noexcept { return std::get_if<T>(&law_); }

private:
    using Variant = std::variant<Rademacher, Normal, Table>;

    explicit IncrementLaw(Variant law) : law_(std::move(law)) {
        if (auto* n = std::get_if<Normal>(&law_)) {
            if (!(n->sigma > 0.0)) throw InvalidArgument("normal sigma must be > 0");
        } else if (auto* t = std::get_if<Table>(&law_)) {
            if (t->entries.empty()) throw InvalidArgument("increment table must not be empty");
            double total = 0.0;
            for (auto [v, p] : t->entries) {
                if (!(p >= 0.0)) throw InvalidArgument("increment probabilities must be >= 0");
                total += p;
            }
            if (std::abs(total - 1.0) > 1e-12)
                throw InvalidArgument("increment probabilities must sum to 1");
        }
    }

    Variant law_;
};

}  // namespace branchkit
