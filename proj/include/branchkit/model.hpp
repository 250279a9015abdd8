#pragma once

// Branching Markov chain interface: offspring count N(x,e) and the law of
// the children's traits.  Concrete models live in finite_model.hpp and
// builtin_models.hpp.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "env.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace branchkit {

class TraitSpace {
public:
    enum class Kind { finite, integer_lattice, real_line };

    static TraitSpace finite(std::vector<double> atoms) {
        if (atoms.empty()) throw InvalidArgument("finite trait space needs at least one atom");
        auto sorted = atoms;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw InvalidArgument("finite trait space has duplicate atoms");
        TraitSpace s(Kind::finite);
        s.atoms_ = std::move(atoms);
        return s;
    }
    static TraitSpace integers(bool nonnegative) {
        TraitSpace s(Kind::integer_lattice);
        s.nonnegative_ = nonnegative;
        return s;
    }
    static TraitSpace real_line() { return TraitSpace(Kind::real_line); }

    Kind kind() const noexcept { return kind_; }
    const std::vector<double>& atoms() const noexcept { return atoms_; }
    bool nonnegative() const noexcept { return nonnegative_; }

    bool contains(double x) const {
        switch (kind_) {
            case Kind::finite: return std::find(atoms_.begin(), atoms_.end(), x) != atoms_.end();
            case Kind::integer_lattice:
                return std::isfinite(x) && x == std::round(x) && (!nonnegative_ || x >= 0.0);
            case Kind::real_line: return std::isfinite(x);
        }
        return false;
    }

    std::string describe() const {
        switch (kind_) {
            case Kind::finite: return "finite(" + std::to_string(atoms_.size()) + ")";
            case Kind::integer_lattice: return nonnegative_ ? "Z>=0" : "Z";
            case Kind::real_line: return "R";
        }
        return "?";
    }

private:
    explicit TraitSpace(Kind kind) : kind_(kind) {}

    Kind kind_;
    std::vector<double> atoms_;
    bool nonnegative_ = false;
};

/// Measurable trait sets used by census and tube operations.
class TraitSet {
public:
    enum class Kind { all, empty, half_line, interval, atoms };

    static TraitSet all() { return TraitSet(Kind::all); }
    static TraitSet none() { return TraitSet(Kind::empty); }
    /// [lo, +inf)
    static TraitSet at_least(double lo) {
        TraitSet s(Kind::half_line);
        s.lo_ = lo;
        return s;
    }
    /// [lo, hi]
    static TraitSet interval(double lo, double hi) {
        TraitSet s(Kind::interval);
        s.lo_ = lo;
        s.hi_ = hi;
        return s;
    }
    static TraitSet atoms(std::vector<double> values) {
        TraitSet s(Kind::atoms);
        std::sort(values.begin(), values.end());
        values.erase(std::unique(values.begin(), values.end()), values.end());
        s.atoms_ = std::move(values);
        return s;
    }

    Kind kind() const noexcept { return kind_; }
    double lo() const noexcept { return lo_; }
    double hi() const noexcept { return hi_; }
    const std::vector<double>& atom_values() const noexcept { return atoms_; }

    bool contains(double x) const {
        switch (kind_) {
            case Kind::all: return true;
            case Kind::empty: return false;
            case Kind::half_line: return x >= lo_;
            case Kind::interval: return x >= lo_ && x <= hi_;
            case Kind::atoms: return std::binary_search(atoms_.begin(), atoms_.end(), x);
        }
        return false;
    }

    bool is_empty() const {
        return kind_ == Kind::empty || (kind_ == Kind::atoms && atoms_.empty()) ||
               (kind_ == Kind::interval && hi_ < lo_);
    }

    /// Smallest element, when the set has one (all-space has none).
    std::optional<double> min_point() const {
        switch (kind_) {
            case Kind::half_line:
            case Kind::interval: return is_empty() ? std::nullopt : std::optional<double>(lo_);
            case Kind::atoms: return atoms_.empty() ? std::nullopt : std::optional<double>(atoms_.front());
            default: return std::nullopt;
        }
    }

    std::string describe() const {
        std::ostringstream os;
        switch (kind_) {
            case Kind::all: os << "all"; break;
            case Kind::empty: os << "empty"; break;
            case Kind::half_line: os << "[" << lo_ << ",inf)"; break;
            case Kind::interval: os << "[" << lo_ << "," << hi_ << "]"; break;
            case Kind::atoms:
                os << "{";
                for (std::size_t i = 0; i < atoms_.size(); ++i) os << (i ? "," : "") << atoms_[i];
                os << "}";
                break;
        }
        return os.str();
    }

private:
    explicit TraitSet(Kind kind) : kind_(kind) {}

    Kind kind_;
    double lo_ = -std::numeric_limits<double>::infinity();
    double hi_ = std::numeric_limits<double>::infinity();
    std::vector<double> atoms_;
};

class FiniteModel;

struct Brood {
    std::vector<double> traits;
    std::size_t size() const noexcept { return traits.size(); }
};

/// log m_n(x, e, [threshold, inf)) and whether it was computed exactly.
struct LogMeanTail {
    double log_value;
    bool exact;
};

class BranchingModel {
public:
    virtual ~BranchingModel() = default;

    virtual std::string name() const = 0;
    virtual const TraitSpace& space() const = 0;

    double mean_offspring(double x, const EnvironmentToken& e) const {
        check_trait(x);
        const double m = mean_impl(x, e);
        if (!(m > 0.0) || !std::isfinite(m))
            throw InvalidArgument(name() + ": mean offspring number must be > 0");
        return m;
    }

    /// E N(x,e)^2 when the model knows it.
    virtual std::optional<double> second_moment(double /*x*/, const EnvironmentToken& /*e*/) const {
        return std::nullopt;
    }

    /// Appends the children's traits to `out`; the brood size is the number appended.
    virtual void sample_brood(double x, const EnvironmentToken& e, KeyedRng& rng,
                              std::vector<double>& out) const = 0;

    Brood sample_brood(double x, const EnvironmentToken& e, KeyedRng& rng) const {
        check_trait(x);
        Brood b;
        sample_brood(x, e, rng, b.traits);
        return b;
    }

    /// Reproduction does not depend on the trait.
    virtual bool neutral() const { return false; }
    /// Claimed stochastic monotonicity of Z_1([a,inf)) in the parent trait.
    virtual bool monotone() const { return false; }
    /// Every descendant of an individual with trait x has trait x.
    virtual bool absorbing(double /*x*/) const { return false; }

    /// Exact pmf of Z_1(B) under delta_x, if available.
    virtual std::optional<std::vector<double>> one_step_count_law(double /*x*/,
                                                                  const EnvironmentToken& /*e*/,
                                                                  const TraitSet& /*b*/) const {
        return std::nullopt;
    }

    /// log m_n(x, e, [threshold, inf)).
    virtual std::optional<LogMeanTail> log_mean_tail(double /*x*/, const EnvironmentSequence& /*env*/,
                                                     std::size_t /*n*/, double /*threshold*/) const {
        return std::nullopt;
    }

    /// Finite-state version of the model on the given environment alphabet.
    /// Infinite spaces are truncated at `cap` with an absorbing overflow atom.
    virtual std::shared_ptr<const FiniteModel> finite_projection(
        const std::vector<EnvironmentToken>& /*alphabet*/, std::size_t /*cap*/) const {
        throw Unsupported(name() + ": no finite projection");
    }

    void check_trait(double x) const {
        if (!space().contains(x))
            throw InvalidArgument(name() + ": trait " + format_trait(x) + " is outside the trait space " +
                                  space().describe());
    }

    static std::string format_trait(double x) {
        std::ostringstream os;
        os.precision(17);
        os << x;
        return os.str();
    }

protected:
    virtual double mean_impl(double x, const EnvironmentToken& e) const = 0;
};

}  // namespace branchkit
