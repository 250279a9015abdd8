#pragma once

// Branching Markov chains on a finite trait space, with exact mean measures.

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "distributions.hpp"
#include "model.hpp"

namespace branchkit {

/// N ~ count, children i.i.d. with law `row` over atom indices.
struct ProductBrood {
    CountLaw count;
    std::vector<double> row;
};

/// General joint law: outcome j has probability prob[j] and child atoms children[j].
struct JointBrood {
    std::vector<double> prob;
    std::vector<std::vector<std::size_t>> children;
};

using BroodLaw = std::variant<ProductBrood, JointBrood>;

class FiniteModel : public BranchingModel {
public:
    /// `laws` maps an environment id (or "*" for any) to one brood law per atom.
    FiniteModel(std::string name, std::vector<double> atoms,
                std::map<std::string, std::vector<BroodLaw>> laws, bool monotone = false)
        : name_(std::move(name)), space_(TraitSpace::finite(atoms)), laws_(std::move(laws)),
          monotone_(monotone) {
        for (std::size_t i = 0; i < space_.atoms().size(); ++i) index_[space_.atoms()[i]] = i;
        validate();
    }

    std::string name() const override { return name_; }
    const TraitSpace& space() const override { return space_; }
    std::size_t dim() const noexcept { return space_.atoms().size(); }
    const std::vector<double>& atoms() const noexcept { return space_.atoms(); }

    std::size_t atom_index(double x) const {
        auto it = index_.find(x);
        if (it == index_.end())
            throw InvalidArgument(name_ + ": trait " + format_trait(x) + " is not an atom");
        return it->second;
    }

    const std::vector<BroodLaw>& laws_for(const EnvironmentToken& e) const {
        auto it = laws_.find(e.id);
        if (it == laws_.end()) it = laws_.find("*");
        if (it == laws_.end())
            throw InvalidArgument(name_ + ": no reproduction law for environment '" + e.id + "'");
        return it->second;
    }

    const BroodLaw& law(std::size_t i, const EnvironmentToken& e) const { return laws_for(e).at(i); }

    double mean_at(std::size_t i, const EnvironmentToken& e) const {
        const auto& l = law(i, e);
        if (auto* p = std::get_if<ProductBrood>(&l)) return p->count.mean();
        const auto& j = std::get<JointBrood>(l);
        double m = 0.0;
        for (std::size_t o = 0; o < j.prob.size(); ++o) m += j.prob[o] * static_cast<double>(j.children[o].size());
        return m;
    }

    double second_moment_at(std::size_t i, const EnvironmentToken& e) const {
        const auto& l = law(i, e);
        if (auto* p = std::get_if<ProductBrood>(&l)) return p->count.second_moment();
        const auto& j = std::get<JointBrood>(l);
        double m2 = 0.0;
        for (std::size_t o = 0; o < j.prob.size(); ++o) {
            const double k = static_cast<double>(j.children[o].size());
            m2 += j.prob[o] * k * k;
        }
        return m2;
    }

    /// m_1(x, e, {y}).
    Eigen::MatrixXd mean_matrix(const EnvironmentToken& e) const {
        const std::size_t d = dim();
        Eigen::MatrixXd m = Eigen::MatrixXd::Zero(d, d);
        for (std::size_t x = 0; x < d; ++x) {
            const auto& l = law(x, e);
            if (auto* p = std::get_if<ProductBrood>(&l)) {
                const double mean = p->count.mean();
                for (std::size_t y = 0; y < d; ++y) m(x, y) = mean * p->row[y];
            } else {
                const auto& j = std::get<JointBrood>(l);
                for (std::size_t o = 0; o < j.prob.size(); ++o)
                    for (auto y : j.children[o]) m(x, y) += j.prob[o];
            }
        }
        return m;
    }

    /// E #{ordered pairs of distinct children (a,b) of x with X(a)=y, X(b)=z}.
    Eigen::MatrixXd pair_intensity(std::size_t x, const EnvironmentToken& e) const {
        const std::size_t d = dim();
        Eigen::MatrixXd out = Eigen::MatrixXd::Zero(d, d);
        const auto& l = law(x, e);
        if (auto* p = std::get_if<ProductBrood>(&l)) {
            const double f2 = p->count.factorial_moment2();
            for (std::size_t y = 0; y < d; ++y)
                for (std::size_t z = 0; z < d; ++z) out(y, z) = f2 * p->row[y] * p->row[z];
        } else {
            const auto& j = std::get<JointBrood>(l);
            for (std::size_t o = 0; o < j.prob.size(); ++o) {
                std::vector<double> c(d, 0.0);
                for (auto y : j.children[o]) c[y] += 1.0;
                for (std::size_t y = 0; y < d; ++y)
                    for (std::size_t z = 0; z < d; ++z)
                        out(y, z) += j.prob[o] * (c[y] * c[z] - (y == z ? c[y] : 0.0));
            }
        }
        return out;
    }

    /// Exact pmf of the number of children of atom x landing in `mask`.
    std::vector<double> child_count_law(std::size_t x, const EnvironmentToken& e,
                                        const std::vector<bool>& mask) const {
        const auto& l = law(x, e);
        std::vector<double> pmf;
        auto add = [&pmf](std::size_t l_, double p) {
            if (pmf.size() <= l_) pmf.resize(l_ + 1, 0.0);
            pmf[l_] += p;
        };
        if (auto* p = std::get_if<ProductBrood>(&l)) {
            double q = 0.0;
            for (std::size_t y = 0; y < dim(); ++y)
                if (mask[y]) q += p->row[y];
            const std::uint64_t kmax = p->count.support_bound();
            for (std::uint64_t k = 0; k <= kmax; ++k) {
                const double pk = p->count.pmf(k);
                if (pk == 0.0) continue;
                for (std::uint64_t j = 0; j <= k; ++j) add(j, pk * binomial_pmf(j, k, q));
            }
        } else {
            const auto& j = std::get<JointBrood>(l);
            for (std::size_t o = 0; o < j.prob.size(); ++o) {
                std::size_t c = 0;
                for (auto y : j.children[o]) c += mask[y] ? 1 : 0;
                add(c, j.prob[o]);
            }
        }
        if (pmf.empty()) pmf.push_back(1.0);
        return pmf;
    }

    std::vector<bool> mask_of(const TraitSet& b) const {
        std::vector<bool> mask(dim());
        for (std::size_t y = 0; y < dim(); ++y) mask[y] = b.contains(atoms()[y]);
        return mask;
    }

    std::optional<double> second_moment(double x, const EnvironmentToken& e) const override {
        return second_moment_at(atom_index(x), e);
    }

    void sample_brood(double x, const EnvironmentToken& e, KeyedRng& rng,
                      std::vector<double>& out) const override {
        const auto& l = law(atom_index(x), e);
        if (auto* p = std::get_if<ProductBrood>(&l)) {
            const std::uint64_t k = p->count.sample(rng);
            for (std::uint64_t c = 0; c < k; ++c) out.push_back(atoms()[draw(p->row, rng)]);
        } else {
            const auto& j = std::get<JointBrood>(l);
            for (auto y : j.children[draw(j.prob, rng)]) out.push_back(atoms()[y]);
        }
    }

    bool neutral() const override {
        for (const auto& [id, laws] : laws_) {
            const auto* first = std::get_if<ProductBrood>(&laws.front());
            if (!first) return false;
            for (const auto& l : laws) {
                const auto* p = std::get_if<ProductBrood>(&l);
                if (!p || !(p->count == first->count)) return false;
            }
        }
        return true;
    }

    bool monotone() const override { return monotone_; }

    bool absorbing(double x) const override {
        auto it = index_.find(x);
        if (it == index_.end()) return false;
        const std::size_t i = it->second;
        for (const auto& [id, laws] : laws_) {
            const auto& l = laws[i];
            if (auto* p = std::get_if<ProductBrood>(&l)) {
                if (p->row[i] != 1.0) return false;
            } else {
                for (const auto& ch : std::get<JointBrood>(l).children)
                    for (auto y : ch)
                        if (y != i) return false;
            }
        }
        return true;
    }

    std::optional<std::vector<double>> one_step_count_law(double x, const EnvironmentToken& e,
                                                          const TraitSet& b) const override {
        return child_count_law(atom_index(x), e, mask_of(b));
    }

    std::optional<LogMeanTail> log_mean_tail(double x, const EnvironmentSequence& env, std::size_t n,
                                             double threshold) const override {
        Eigen::RowVectorXd v = Eigen::RowVectorXd::Zero(dim());
        v(atom_index(x)) = 1.0;
        double log_scale = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            v = v * mean_matrix(env.token_at(i));
            const double s = v.sum();
            if (s > 0.0) {
                v /= s;
                log_scale += std::log(s);
            }
        }
        double tail = 0.0;
        for (std::size_t y = 0; y < dim(); ++y)
            if (atoms()[y] >= threshold) tail += v(y);
        return LogMeanTail{tail > 0.0 ? log_scale + std::log(tail) : -std::numeric_limits<double>::infinity(),
                           true};
    }

    std::shared_ptr<const FiniteModel> finite_projection(const std::vector<EnvironmentToken>& alphabet,
                                                         std::size_t /*cap*/) const override {
        for (const auto& t : alphabet) laws_for(t);
        return std::make_shared<FiniteModel>(*this);
    }

protected:
    double mean_impl(double x, const EnvironmentToken& e) const override { return mean_at(atom_index(x), e); }

private:
    static std::size_t draw(const std::vector<double>& probs, KeyedRng& rng) {
        double u = rng.uniform();
        std::size_t last = 0;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            if (probs[i] <= 0.0) continue;
            last = i;
            if (u < probs[i]) return i;
            u -= probs[i];
        }
        return last;
    }

    void validate() const {
        if (laws_.empty()) throw InvalidArgument(name_ + ": no reproduction laws");
        const std::size_t d = dim();
        for (const auto& [id, laws] : laws_) {
            const std::string where = name_ + " [env '" + id + "']";
            if (laws.size() != d) throw InvalidArgument(where + ": need one brood law per atom");
            for (std::size_t x = 0; x < d; ++x) {
                const auto& l = laws[x];
                if (auto* p = std::get_if<ProductBrood>(&l)) {
                    if (p->row.size() != d) throw InvalidArgument(where + ": kernel row has wrong length");
                    double s = 0.0;
                    for (double v : p->row) {
                        if (!(v >= 0.0)) throw InvalidArgument(where + ": kernel entries must be >= 0");
                        s += v;
                    }
                    if (std::abs(s - 1.0) > 1e-12)
                        throw InvalidArgument(where + ": kernel row " + std::to_string(x) + " must sum to 1");
                } else {
                    const auto& j = std::get<JointBrood>(l);
                    if (j.prob.size() != j.children.size() || j.prob.empty())
                        throw InvalidArgument(where + ": joint brood outcomes malformed");
                    double s = 0.0;
                    for (std::size_t o = 0; o < j.prob.size(); ++o) {
                        if (!(j.prob[o] >= 0.0)) throw InvalidArgument(where + ": joint probabilities must be >= 0");
                        s += j.prob[o];
                        for (auto y : j.children[o])
                            if (y >= d) throw InvalidArgument(where + ": joint child atom out of range");
                    }
                    if (std::abs(s - 1.0) > 1e-12)
                        throw InvalidArgument(where + ": joint probabilities must sum to 1");
                }
                EnvironmentToken t{id, {}};
                if (!(mean_at(x, t) > 0.0)) throw InvalidArgument(where + ": mean offspring number must be > 0");
            }
        }
    }

    std::string name_;
    TraitSpace space_;
    std::map<std::string, std::vector<BroodLaw>> laws_;
    std::map<double, std::size_t> index_;
    bool monotone_;
};

}  // namespace branchkit
