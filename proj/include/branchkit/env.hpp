#pragma once

// Environment sequences e_0, e_1, ... and the shift map.  Sequences are
// one-sided and immutable; shift() returns a new view with an offset.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace branchkit {

/// One environment e.  Parameters are interpreted by the model.
struct EnvironmentToken {
    std::string id;
    std::map<std::string, double> params;

    double param(const std::string& name, double fallback) const {
        auto it = params.find(name);
        return it == params.end() ? fallback : it->second;
    }

    bool operator==(const EnvironmentToken&) const = default;
};

enum class EnvKind { constant, periodic, explicit_list, iid_seeded };

inline const char* to_string(EnvKind kind) {
    switch (kind) {
        case EnvKind::constant: return "constant";
        case EnvKind::periodic: return "periodic";
        case EnvKind::explicit_list: return "explicit";
        case EnvKind::iid_seeded: return "iid-seeded";
    }
    return "?";
}

class EnvironmentSequence {
public:
    static EnvironmentSequence constant(EnvironmentToken token) {
        return EnvironmentSequence(EnvKind::constant, {std::move(token)}, {0}, {}, 0);
    }

    /// Cycles through `pattern` (indices into `alphabet`); an empty pattern
    /// means the alphabet itself in order.
    static EnvironmentSequence periodic(std::vector<EnvironmentToken> alphabet,
                                        std::vector<std::size_t> pattern = {}) {
        if (pattern.empty()) pattern = iota(alphabet.size());
        return EnvironmentSequence(EnvKind::periodic, std::move(alphabet), std::move(pattern), {},
                                   0);
    }

    /// A finite list e_0..e_{L-1}; generations past the end keep the last token.
    static EnvironmentSequence explicit_list(std::vector<EnvironmentToken> alphabet,
                                             std::vector<std::size_t> pattern = {}) {
        if (pattern.empty()) pattern = iota(alphabet.size());
        return EnvironmentSequence(EnvKind::explicit_list, std::move(alphabet),
                                   std::move(pattern), {}, 0);
    }

    /// i.i.d. tokens drawn from `weights` (uniform when empty).  token_at(i)
    /// hashes (seed, i), so access is random and stateless.
    static EnvironmentSequence iid(std::vector<EnvironmentToken> alphabet, std::uint64_t seed,
                                   std::vector<double> weights = {}) {
        if (weights.empty()) weights.assign(alphabet.size(), 1.0);
        return EnvironmentSequence(EnvKind::iid_seeded, std::move(alphabet), {},
                                   std::move(weights), seed);
    }

    EnvKind kind() const noexcept { return kind_; }
    const std::vector<EnvironmentToken>& alphabet() const noexcept { return *alphabet_; }
    std::uint64_t seed() const noexcept { return seed_; }
    std::size_t offset() const noexcept { return offset_; }
    const std::vector<std::size_t>& pattern() const noexcept { return pattern_; }

    std::size_t index_at(std::size_t i) const {
        const std::size_t j = i + offset_;
        switch (kind_) {
            case EnvKind::constant: return 0;
            case EnvKind::periodic: return pattern_[j % pattern_.size()];
            case EnvKind::explicit_list: return pattern_[std::min(j, pattern_.size() - 1)];
            case EnvKind::iid_seeded: {
                const double u = to_unit(derive_key(seed_, j));
                auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
                return std::min<std::size_t>(it - cumulative_.begin(), cumulative_.size() - 1);
            }
        }
        return 0;
    }

    const EnvironmentToken& token_at(std::size_t i) const { return (*alphabet_)[index_at(i)]; }

    /// T^k e: token_at(shift(k), i) == token_at(i + k).
    EnvironmentSequence shift(std::size_t k) const {
        EnvironmentSequence out = *this;
        out.offset_ += k;
        return out;
    }

    /// Period of the sequence from index 0 on, when it is deterministic and
    /// periodic (constant sequences have period 1).
    std::optional<std::size_t> period() const {
        switch (kind_) {
            case EnvKind::constant: return 1;
            case EnvKind::periodic: return pattern_.size();
            case EnvKind::explicit_list:
                if (offset_ + 1 >= pattern_.size()) return 1;
                return std::nullopt;
            case EnvKind::iid_seeded: return std::nullopt;
        }
        return std::nullopt;
    }

    /// Index into the alphabet of the token with the given id.
    std::optional<std::size_t> find(const std::string& id) const {
        for (std::size_t i = 0; i < alphabet_->size(); ++i)
            if ((*alphabet_)[i].id == id) return i;
        return std::nullopt;
    }

private:
    EnvironmentSequence(EnvKind kind, std::vector<EnvironmentToken> alphabet,
                        std::vector<std::size_t> pattern, std::vector<double> weights,
                        std::uint64_t seed)
        : kind_(kind),
          alphabet_(std::make_shared<const std::vector<EnvironmentToken>>(std::move(alphabet))),
          pattern_(std::move(pattern)),
          seed_(seed) {
        validate(weights);
    }

    static std::vector<std::size_t> iota(std::size_t n) {
        std::vector<std::size_t> v(n);
        for (std::size_t i = 0; i < n; ++i) v[i] = i;
        return v;
    }

    void validate(const std::vector<double>& weights) {
        if (alphabet_->empty()) throw InvalidArgument("environment alphabet must not be empty");
        std::set<std::string> ids;
        for (const auto& t : *alphabet_)
            if (!ids.insert(t.id).second)
                throw InvalidArgument("duplicate environment id '" + t.id + "'");
        if (kind_ != EnvKind::iid_seeded) {
            if (pattern_.empty()) throw InvalidArgument("environment pattern must not be empty");
            for (auto idx : pattern_)
                if (idx >= alphabet_->size())
                    throw InvalidArgument("environment pattern index out of range");
            return;
        }
        if (weights.size() != alphabet_->size())
            throw InvalidArgument("iid environment needs one weight per token");
        double total = 0.0;
        for (double w : weights) {
            if (!(w >= 0.0)) throw InvalidArgument("iid environment weights must be >= 0");
            total += w;
        }
        if (!(total > 0.0)) throw InvalidArgument("iid environment weights sum to zero");
        double acc = 0.0;
        for (double w : weights) {
            acc += w / total;
            cumulative_.push_back(acc);
        }
        cumulative_.back() = 1.0;
    }

    EnvKind kind_;
    std::shared_ptr<const std::vector<EnvironmentToken>> alphabet_;
    std::vector<std::size_t> pattern_;
    std::vector<double> cumulative_;
    std::uint64_t seed_ = 0;
    std::size_t offset_ = 0;
};

}  // namespace branchkit
