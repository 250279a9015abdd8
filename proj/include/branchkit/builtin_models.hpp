#pragma once

// Built-in model instances: the two-type test model, Kimmel's cell/parasite
// model, branching random walks and neutral Galton-Watson chains.

#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "distributions.hpp"
#include "finite_model.hpp"
#include "model.hpp"

namespace branchkit {

/// Two types; N(0)=2, N(1)=1; children of 0 are 0 w.p. 3/4, children of 1 are 0 w.p. 1/2.
inline std::shared_ptr<const FiniteModel> two_type_m2() {
    std::vector<BroodLaw> laws{ProductBrood{CountLaw::deterministic(2), {0.75, 0.25}},
                               ProductBrood{CountLaw::deterministic(1), {0.5, 0.5}}};
    return std::make_shared<FiniteModel>("two-type-m2", std::vector<double>{0.0, 1.0},
                                         std::map<std::string, std::vector<BroodLaw>>{{"*", laws}});
}

/// Trait-independent count law with children moving by a user-supplied chain.
inline std::shared_ptr<const FiniteModel> neutral_gw(const CountLaw& count,
                                                     const std::vector<std::vector<double>>& kernel,
                                                     std::vector<double> atoms = {}) {
    if (kernel.empty()) throw InvalidArgument("neutral-gw: kernel must not be empty");
    if (atoms.empty())
        for (std::size_t i = 0; i < kernel.size(); ++i) atoms.push_back(static_cast<double>(i));
    if (atoms.size() != kernel.size()) throw InvalidArgument("neutral-gw: kernel size differs from atom count");
    std::vector<BroodLaw> laws;
    for (const auto& row : kernel) laws.push_back(ProductBrood{count, row});
    return std::make_shared<FiniteModel>("neutral-gw", std::move(atoms),
                                         std::map<std::string, std::vector<BroodLaw>>{{"*", laws}});
}

/// P(Poisson(mean) in b) for an integer-valued Poisson variable.
inline double poisson_mass(double mean, const TraitSet& b) {
    switch (b.kind()) {
        case TraitSet::Kind::all: return 1.0;
        case TraitSet::Kind::empty: return 0.0;
        default: break;
    }
    const double lo = std::max(0.0, std::ceil(b.kind() == TraitSet::Kind::atoms ? 0.0 : b.lo()));
    if (b.kind() == TraitSet::Kind::half_line) {
        if (lo <= 0.0) return 1.0;
        if (mean <= 0.0) return 0.0;
        // 1 - P(X <= lo-1), summing the smaller side.
        double below = 0.0;
        for (std::uint64_t k = 0; k + 1 <= static_cast<std::uint64_t>(lo); ++k) below += poisson_pmf(k, mean);
        return std::max(0.0, 1.0 - below);
    }
    if (b.kind() == TraitSet::Kind::interval) {
        double s = 0.0;
        for (double k = lo; k <= b.hi(); k += 1.0) s += poisson_pmf(static_cast<std::uint64_t>(k), mean);
        return s;
    }
    double s = 0.0;
    for (double v : b.atom_values())
        if (v >= 0.0 && v == std::round(v)) s += poisson_pmf(static_cast<std::uint64_t>(v), mean);
    return s;
}

/// Binomial(k, q) mixed over a count law.
inline std::vector<double> thinned_count_law(const CountLaw& count, double q) {
    const std::uint64_t kmax = count.support_bound();
    std::vector<double> pmf(kmax + 1, 0.0);
    for (std::uint64_t k = 0; k <= kmax; ++k) {
        const double pk = count.pmf(k);
        if (pk == 0.0) continue;
        for (std::uint64_t j = 0; j <= k; ++j) pmf[j] += pk * binomial_pmf(j, k, q);
    }
    while (pmf.size() > 1 && pmf.back() == 0.0) pmf.pop_back();
    return pmf;
}

/// Cells divide in two; each of the x parasites of a cell leaves Poisson(lambda)
/// offspring, each assigned to a uniformly chosen daughter.  Trait = parasite count.
class KimmelModel : public BranchingModel {
public:
    explicit KimmelModel(double lambda) : lambda_(lambda), space_(TraitSpace::integers(true)) {
        if (!(lambda > 0.0) || !std::isfinite(lambda)) throw InvalidArgument("lambda must be > 0");
    }

    double lambda() const noexcept { return lambda_; }
    double lambda(const EnvironmentToken& e) const {
        const double l = e.param("lambda", lambda_);
        if (!(l > 0.0)) throw InvalidArgument("lambda must be > 0 (environment '" + e.id + "')");
        return l;
    }

    std::string name() const override { return "kimmel"; }
    const TraitSpace& space() const override { return space_; }

    std::optional<double> second_moment(double, const EnvironmentToken&) const override { return 4.0; }

    void sample_brood(double x, const EnvironmentToken& e, KeyedRng& rng,
                      std::vector<double>& out) const override {
        const std::uint64_t total = sample_poisson(lambda(e) * x, rng);
        const std::uint64_t first = sample_binomial(total, 0.5, rng);
        out.push_back(static_cast<double>(first));
        out.push_back(static_cast<double>(total - first));
    }

    bool neutral() const override { return true; }
    bool monotone() const override { return true; }
    bool absorbing(double x) const override { return x == 0.0; }

    std::optional<std::vector<double>> one_step_count_law(double x, const EnvironmentToken& e,
                                                          const TraitSet& b) const override {
        check_trait(x);
        // The two daughters' parasite counts are independent Poisson(lambda x / 2).
        const double q = poisson_mass(lambda(e) * x / 2.0, b);
        return thinned_count_law(CountLaw::deterministic(2), q);
    }

    std::optional<LogMeanTail> log_mean_tail(double x, const EnvironmentSequence& env, std::size_t n,
                                             double threshold) const override {
        check_trait(x);
        const double log_growth = static_cast<double>(n) * std::log(2.0);
        if (threshold <= 0.0) return LogMeanTail{log_growth, true};
        if (n == 0)
            return LogMeanTail{x >= threshold ? 0.0 : -std::numeric_limits<double>::infinity(), true};
        if (threshold <= 1.0) {
            const double p = survival_probability(x, env, n);
            return LogMeanTail{p > 0.0 ? log_growth + std::log(p) : -std::numeric_limits<double>::infinity(),
                               true};
        }
        auto [tail, lost] = parasite_tail(x, env, n, threshold);
        return LogMeanTail{tail > 0.0 ? log_growth + std::log(tail) : -std::numeric_limits<double>::infinity(),
                           lost < 1e-12};
    }

    /// P_x(Y_n > 0) for the parasite chain Y (offspring law Poisson(lambda/2) per parasite),
    /// by iterating the generating functions.
    double survival_probability(double x, const EnvironmentSequence& env, std::size_t n) const {
        double g = 0.0;
        for (std::size_t i = n; i-- > 0;) g = std::exp(lambda(env.token_at(i)) / 2.0 * (g - 1.0));
        return -std::expm1(x * std::log(g));
    }

    std::shared_ptr<const FiniteModel> finite_projection(const std::vector<EnvironmentToken>& alphabet,
                                                         std::size_t cap) const override {
        if (cap < 1) throw InvalidArgument("kimmel projection cap must be >= 1");
        const std::size_t d = cap + 2;  // atoms 0..cap plus the overflow atom cap+1
        std::vector<double> atoms(d);
        for (std::size_t i = 0; i < d; ++i) atoms[i] = static_cast<double>(i);
        std::map<std::string, std::vector<BroodLaw>> laws;
        for (const auto& t : alphabet) {
            const double l = lambda(t);
            std::vector<BroodLaw> per_atom;
            for (std::size_t x = 0; x < d; ++x) {
                std::vector<double> row(d, 0.0);
                if (x == d - 1) {
                    row[d - 1] = 1.0;
                } else {
                    double acc = 0.0;
                    for (std::size_t y = 0; y + 1 < d; ++y) {
                        row[y] = poisson_pmf(y, l * static_cast<double>(x) / 2.0);
                        acc += row[y];
                    }
                    row[d - 1] = std::max(0.0, 1.0 - acc);
                    const double s = acc + row[d - 1];
                    for (double& v : row) v /= s;
                }
                per_atom.push_back(ProductBrood{CountLaw::deterministic(2), std::move(row)});
            }
            laws[t.id] = std::move(per_atom);
        }
        return std::make_shared<FiniteModel>("kimmel[cap=" + std::to_string(cap) + "]", std::move(atoms),
                                             std::move(laws), true);
    }

protected:
    double mean_impl(double, const EnvironmentToken&) const override { return 2.0; }

private:
    // P_x(Y_n >= threshold) by iterating the truncated law of Y; returns (tail, lost mass).
    std::pair<double, double> parasite_tail(double x, const EnvironmentSequence& env, std::size_t n,
                                            double threshold) const {
        const std::size_t cap = static_cast<std::size_t>(
            std::min(4000.0, std::max({64.0, 4.0 * threshold, 4.0 * x})));
        std::vector<double> law(cap + 1, 0.0);
        double lost = 0.0;
        if (x > static_cast<double>(cap)) return {std::numeric_limits<double>::quiet_NaN(), 1.0};
        law[static_cast<std::size_t>(x)] = 1.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double l = lambda(env.token_at(i)) / 2.0;
            std::vector<double> next(cap + 1, 0.0);
            for (std::size_t y = 0; y <= cap; ++y) {
                if (law[y] == 0.0) continue;
                double acc = 0.0;
                for (std::size_t z = 0; z <= cap; ++z) {
                    const double p = poisson_pmf(z, l * static_cast<double>(y));
                    next[z] += law[y] * p;
                    acc += p;
                }
                lost += law[y] * std::max(0.0, 1.0 - acc);
            }
            law = std::move(next);
        }
        double tail = 0.0;
        for (std::size_t y = static_cast<std::size_t>(std::ceil(threshold)); y <= cap; ++y) tail += law[y];
        return {tail, lost};
    }

    double lambda_;
    TraitSpace space_;
};

/// Branching random walk: trait-free reproduction, children displaced by i.i.d. increments.
/// P(some generation-k descendant of a trait-0 ancestor has trait >= s) on a grid s_i = s0 + i h,
/// from the recursion v_{k+1}(s) = 1 - G(1 - E v_k(s - X)).  Non-lattice increments are binned at
/// width h, so the values are a close approximation rather than exact.
struct MaxTailTable {
    double h = 1.0;
    double s0 = 0.0;
    std::vector<std::vector<double>> v;  // v[k][i]
    bool exact = false;

    /// Value at the grid point at or below s (an upper bound since v_k is nonincreasing in s);
    /// 1 below the grid, 0 above it.
    double prob(std::size_t k, double s) const {
        const auto& row = v.at(k);
        const double pos = std::floor((s - s0) / h + 1e-9);
        if (pos < 0.0) return 1.0;
        if (pos >= static_cast<double>(row.size())) return 0.0;
        return row[static_cast<std::size_t>(pos)];
    }
};

class BrwModel : public BranchingModel {
public:
    BrwModel(CountLaw count, IncrementLaw increment)
        : count_(std::move(count)), increment_(std::move(increment)),
          space_(increment_.integer_valued() ? TraitSpace::integers(false) : TraitSpace::real_line()) {}

    const CountLaw& count() const noexcept { return count_; }
    const IncrementLaw& increment() const noexcept { return increment_; }

    std::string name() const override { return "brw"; }
    const TraitSpace& space() const override { return space_; }

    std::optional<double> second_moment(double, const EnvironmentToken&) const override {
        return count_.second_moment();
    }

    void sample_brood(double x, const EnvironmentToken&, KeyedRng& rng,
                      std::vector<double>& out) const override {
        const std::uint64_t k = count_.sample(rng);
        for (std::uint64_t i = 0; i < k; ++i) out.push_back(x + increment_.sample(rng));
    }

    bool neutral() const override { return true; }
    bool monotone() const override { return true; }

    std::optional<std::vector<double>> one_step_count_law(double x, const EnvironmentToken&,
                                                          const TraitSet& b) const override {
        check_trait(x);
        return thinned_count_law(count_, step_mass(x, b));
    }

    std::optional<LogMeanTail> log_mean_tail(double x, const EnvironmentSequence&, std::size_t n,
                                             double threshold) const override {
        const double growth = static_cast<double>(n) * std::log(count_.mean());
        auto [log_tail, exact] = log_walk_tail(n, threshold - x);
        return LogMeanTail{growth + log_tail, exact};
    }

    /// log P(S_n >= s) for the increment walk started at 0.
    std::pair<double, bool> log_walk_tail(std::size_t n, double s) const {
        constexpr double neg_inf = -std::numeric_limits<double>::infinity();
        if (n == 0) return {s <= 0.0 ? 0.0 : neg_inf, true};
        const double nd = static_cast<double>(n);
        if (auto* g = increment_.as<IncrementLaw::Normal>())
            return {log_normal_sf((s - nd * g->mu) / (g->sigma * std::sqrt(nd))), true};
        if (increment_.integer_valued()) {
            if (increment_.as<IncrementLaw::Rademacher>()) {
                // S_n = 2B - n with B ~ Binomial(n, 1/2).
                const double kmin = std::ceil((nd + s) / 2.0);
                if (kmin > nd) return {neg_inf, true};
                double mx = neg_inf;
                std::vector<double> terms;
                for (double k = std::max(0.0, kmin); k <= nd; k += 1.0) {
                    const double t = std::lgamma(nd + 1) - std::lgamma(k + 1) - std::lgamma(nd - k + 1) -
                                     nd * std::log(2.0);
                    terms.push_back(t);
                    mx = std::max(mx, t);
                }
                double acc = 0.0;
                for (double t : terms) acc += std::exp(t - mx);
                return {mx + std::log(acc), true};
            }
            auto atoms = increment_.integer_atoms();
            long lo = 0, hi = 0;
            for (auto [v, p] : atoms) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            if (static_cast<double>(hi - lo) * nd < 2e6) {
                std::vector<double> law{1.0};
                long cur_lo = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    std::vector<double> next(law.size() + static_cast<std::size_t>(hi - lo), 0.0);
                    for (std::size_t j = 0; j < law.size(); ++j)
                        for (auto [v, p] : atoms) next[j + static_cast<std::size_t>(v - lo)] += law[j] * p;
                    law = std::move(next);
                    cur_lo += lo;
                }
                double tail = 0.0;
                for (std::size_t j = 0; j < law.size(); ++j)
                    if (static_cast<double>(cur_lo + static_cast<long>(j)) >= s) tail += law[j];
                if (tail > 0.0) return {std::log(tail), true};
                if (s > static_cast<double>(hi) * nd) return {neg_inf, true};
            }
        }
        const double a = s / nd;
        if (a <= increment_.mean()) return {0.0, false};
        return {-nd * increment_.rate(a), false};
    }

    /// Tail of the maximum for k = 0..n_max generations.
    MaxTailTable max_tail_table(std::size_t n_max, double h = 0.05) const {
        MaxTailTable t;
        const bool lattice = increment_.integer_valued();
        t.h = lattice ? 1.0 : h;
        t.exact = lattice;
        // Binned increment law: offsets in grid steps.
        std::vector<std::pair<long, double>> kernel;
        double spread = 0.0, drift = 0.0;
        if (lattice) {
            kernel = increment_.integer_atoms();
            for (auto [v, p] : kernel) spread = std::max(spread, std::abs(static_cast<double>(v)));
        } else if (auto* g = increment_.as<IncrementLaw::Normal>()) {
            const long half = static_cast<long>(std::ceil(9.0 * g->sigma / t.h));
            const long shift = std::lround(g->mu / t.h);
            auto cdf = [&](double z) { return 0.5 * std::erfc(-z / (g->sigma * std::sqrt(2.0))); };
            for (long j = -half; j <= half; ++j) {
                const double p = cdf((static_cast<double>(j) + 0.5) * t.h) - cdf((static_cast<double>(j) - 0.5) * t.h);
                if (p > 0.0) kernel.emplace_back(j + shift, p);
            }
            spread = 9.0 * g->sigma + std::abs(g->mu);
            drift = g->mu;
        } else {
            std::map<long, double> bins;
            for (auto [v, p] : increment_.as<IncrementLaw::Table>()->entries) {
                bins[std::lround(v / t.h)] += p;
                spread = std::max(spread, std::abs(v));
            }
            kernel.assign(bins.begin(), bins.end());
        }
        const double nd = static_cast<double>(n_max);
        // The first moment bound m^k P(S_k >= s) is below 1e-30 past this width.
        double width = spread * nd + 1.0;
        if (auto* g = increment_.as<IncrementLaw::Normal>()) {
            const double z = std::sqrt(2.0 * (nd * std::log(std::max(count_.mean(), 1.0)) + 70.0));
            width = std::min(width, std::abs(drift) * nd + z * g->sigma * std::sqrt(std::max(nd, 1.0)) + 1.0);
        }
        const auto cells = static_cast<std::size_t>(std::ceil(2.0 * width / t.h)) + 1;
        t.s0 = -std::floor(width / t.h) * t.h;
        const std::uint64_t kmax = count_.support_bound();
        std::vector<std::pair<double, double>> pk;
        for (std::uint64_t k = 0; k <= kmax; ++k)
            if (const double p = count_.pmf(k); p > 0.0) pk.emplace_back(static_cast<double>(k), p);
        std::vector<double> row(cells);
        for (std::size_t i = 0; i < cells; ++i) row[i] = t.s0 + static_cast<double>(i) * t.h <= 1e-12 ? 1.0 : 0.0;
        t.v.push_back(row);
        for (std::size_t k = 0; k < n_max; ++k) {
            const auto& prev = t.v.back();
            std::vector<double> next(cells);
            for (std::size_t i = 0; i < cells; ++i) {
                double w = 0.0;
                for (auto [off, p] : kernel) {
                    const long j = static_cast<long>(i) - off;
                    w += p * (j < 0 ? 1.0 : j >= static_cast<long>(cells) ? 0.0 : prev[static_cast<std::size_t>(j)]);
                }
                w = std::min(w, 1.0);
                double out = 0.0;
                for (auto [j, p] : pk) out += p * (w >= 1.0 ? (j > 0 ? 1.0 : 0.0) : -std::expm1(j * std::log1p(-w)));
                next[i] = std::min(out, 1.0);
            }
            t.v.push_back(std::move(next));
        }
        return t;
    }

    /// Asymptotic speed of the maximum: inf_theta (log m + psi(theta)) / theta.
    double speed() const {
        const double lm = std::log(count_.mean());
        auto f = [&](double t) { return (lm + increment_.log_mgf(t)) / t; };
        double lo = 1e-6, hi = 1.0;
        while (hi < 1e4 && f(2 * hi) < f(hi)) hi *= 2;
        hi *= 2;
        const double g = (std::sqrt(5.0) - 1.0) / 2.0;
        double c = hi - g * (hi - lo), d = lo + g * (hi - lo);
        for (int it = 0; it < 300; ++it) {
            if (f(c) < f(d)) hi = d;
            else lo = c;
            c = hi - g * (hi - lo);
            d = lo + g * (hi - lo);
        }
        double v = f(0.5 * (lo + hi));
        if (auto sup = increment_.ess_sup()) v = std::min(v, *sup);
        return v;
    }

protected:
    double mean_impl(double, const EnvironmentToken&) const override { return count_.mean(); }

private:
    double step_mass(double x, const TraitSet& b) const {
        switch (b.kind()) {
            case TraitSet::Kind::all: return 1.0;
            case TraitSet::Kind::empty: return 0.0;
            default: break;
        }
        if (auto* g = increment_.as<IncrementLaw::Normal>()) {
            auto sf = [&](double t) { return 0.5 * std::erfc((t - x - g->mu) / (g->sigma * std::sqrt(2.0))); };
            if (b.kind() == TraitSet::Kind::half_line) return sf(b.lo());
            if (b.kind() == TraitSet::Kind::interval) return std::max(0.0, sf(b.lo()) - sf(b.hi()));
            return 0.0;
        }
        double q = 0.0;
        if (increment_.as<IncrementLaw::Rademacher>()) {
            q += b.contains(x - 1.0) ? 0.5 : 0.0;
            q += b.contains(x + 1.0) ? 0.5 : 0.0;
            return q;
        }
        for (auto [v, p] : increment_.as<IncrementLaw::Table>()->entries)
            if (b.contains(x + v)) q += p;
        return q;
    }

    CountLaw count_;
    IncrementLaw increment_;
    TraitSpace space_;
};

/// Parameters for builtin(); unused fields are ignored by models that do not need them.
struct BuiltinParams {
    std::map<std::string, double> numbers;
    std::optional<CountLaw> count;
    std::optional<IncrementLaw> increment;
    std::vector<std::vector<double>> kernel;
};

inline const std::vector<std::string>& builtin_names() {
    static const std::vector<std::string> names{"two-type-m2", "kimmel", "brw", "neutral-gw"};
    return names;
}

inline std::shared_ptr<const BranchingModel> builtin(const std::string& name, const BuiltinParams& params = {}) {
    auto number = [&](const std::string& key, double fallback) {
        auto it = params.numbers.find(key);
        return it == params.numbers.end() ? fallback : it->second;
    };
    if (name == "two-type-m2") return two_type_m2();
    if (name == "kimmel") return std::make_shared<KimmelModel>(number("lambda", 1.4));
    if (name == "brw")
        return std::make_shared<BrwModel>(params.count.value_or(CountLaw::deterministic(2)),
                                          params.increment.value_or(IncrementLaw::normal(0.0, 1.0)));
    if (name == "neutral-gw") {
        if (params.kernel.empty()) throw InvalidArgument("neutral-gw needs a kernel");
        return neutral_gw(params.count.value_or(CountLaw::deterministic(2)), params.kernel);
    }
    std::string known;
    for (const auto& n : builtin_names()) known += (known.empty() ? "" : ", ") + n;
    throw InvalidArgument("unknown model '" + name + "' (known: " + known + ")");
}

}  // namespace branchkit
