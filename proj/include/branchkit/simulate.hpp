#pragma once

// Forward simulation of the population tree Z_n.
//
// Node u's randomness is KeyedRng(key(u)) with key(root) = derive_key(seed, 0)
// and key(ui) = derive_key(key(u), i).  A tree is therefore a pure function of
// (model, env, x0, n, seed) whatever the number of workers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "env.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace branchkit {

inline constexpr std::uint32_t no_node = std::numeric_limits<std::uint32_t>::max();

struct Node {
    std::uint64_t key = 0;
    double trait = 0.0;
    std::uint32_t parent = no_node;  // index of the parent (tree: global; stream: in previous generation)
    std::uint32_t child_index = 0;   // Ulam-Harris index among the parent's children, from 1
    std::uint32_t brood = 0;         // N(u), including children that were pruned
    std::uint32_t first_child = no_node;
    std::uint32_t n_stored = 0;
};

/// Decides whether a newborn is dropped.  Returns nullopt to keep it, or an
/// upper bound on the expected target mass lost by dropping it (0 when exact).
using PruneRule = std::function<std::optional<double>(std::size_t generation, double trait)>;

struct SimOptions {
    std::size_t cap = 10'000'000;  // maximum stored individuals in one generation
    unsigned workers = 1;
    PruneRule prune;
};

inline std::uint64_t root_key(std::uint64_t seed) { return derive_key(seed, 0); }
inline std::uint64_t replicate_seed(std::uint64_t master, std::uint64_t replicate) {
    return derive_key(master ^ 0x5851F42D4C957F2DULL, replicate);
}

namespace detail {

struct Expansion {
    std::vector<Node> children;
    std::size_t pruned = 0;
    double pruned_mass = 0.0;
};

inline void expand_range(const BranchingModel& model, const EnvironmentToken& token, std::span<Node> parents,
                         std::size_t parent_offset, std::size_t child_generation, const PruneRule& prune,
                         Expansion& out) {
    std::vector<double> traits;
    for (std::size_t p = 0; p < parents.size(); ++p) {
        Node& parent = parents[p];
        KeyedRng rng(parent.key);
        traits.clear();
        model.sample_brood(parent.trait, token, rng, traits);
        parent.brood = static_cast<std::uint32_t>(traits.size());
        parent.first_child = static_cast<std::uint32_t>(out.children.size());
        parent.n_stored = 0;
        for (std::size_t c = 0; c < traits.size(); ++c) {
            if (prune) {
                if (auto lost = prune(child_generation, traits[c])) {
                    ++out.pruned;
                    out.pruned_mass += *lost;
                    continue;
                }
            }
            Node child;
            child.key = derive_key(parent.key, c + 1);
            child.trait = traits[c];
            child.parent = static_cast<std::uint32_t>(parent_offset + p);
            child.child_index = static_cast<std::uint32_t>(c + 1);
            out.children.push_back(child);
            ++parent.n_stored;
        }
        if (parent.n_stored == 0) parent.first_child = no_node;
    }
}

/// Expands one generation.  Parent fields brood/first_child/n_stored are set,
/// first_child relative to the returned children vector.
inline Expansion expand_generation(const BranchingModel& model, const EnvironmentToken& token,
                                   std::span<Node> parents, std::size_t parent_offset,
                                   std::size_t child_generation, const SimOptions& opts) {
    constexpr std::size_t chunk = 4096;
    const std::size_t n_chunks = (parents.size() + chunk - 1) / chunk;
    if (opts.workers <= 1 || n_chunks <= 1) {
        Expansion out;
        expand_range(model, token, parents, parent_offset, child_generation, opts.prune, out);
        return out;
    }
    std::vector<Expansion> parts(n_chunks);
    parallel_for(n_chunks, opts.workers, [&](std::size_t c) {
        const std::size_t lo = c * chunk, hi = std::min(parents.size(), lo + chunk);
        expand_range(model, token, parents.subspan(lo, hi - lo), parent_offset + lo, child_generation,
                     opts.prune, parts[c]);
    });
    Expansion out;
    std::size_t total = 0;
    for (const auto& part : parts) total += part.children.size();
    out.children.reserve(total);
    for (std::size_t c = 0; c < n_chunks; ++c) {
        const std::size_t base = out.children.size();
        const std::size_t lo = c * chunk, hi = std::min(parents.size(), lo + chunk);
        for (std::size_t p = lo; p < hi; ++p)
            if (parents[p].first_child != no_node) parents[p].first_child += static_cast<std::uint32_t>(base);
        out.children.insert(out.children.end(), parts[c].children.begin(), parts[c].children.end());
        out.pruned += parts[c].pruned;
        out.pruned_mass += parts[c].pruned_mass;
    }
    return out;
}

inline Node make_root(double x0, std::uint64_t key) {
    Node root;
    root.key = key;
    root.trait = x0;
    return root;
}

}  // namespace detail

/// Weighted atoms over traits; unit weights count individuals.
struct EmpiricalMeasure {
    std::vector<std::pair<double, double>> atoms;  // (value, weight), sorted by value
    double mass = 0.0;

    static EmpiricalMeasure from_values(std::vector<double> values) {
        std::sort(values.begin(), values.end());
        EmpiricalMeasure m;
        for (double v : values) {
            if (!m.atoms.empty() && m.atoms.back().first == v) m.atoms.back().second += 1.0;
            else m.atoms.emplace_back(v, 1.0);
        }
        m.mass = static_cast<double>(values.size());
        return m;
    }

    template <class F>
    double integrate(F&& f) const {
        double s = 0.0;
        for (auto [v, w] : atoms) s += w * f(v);
        return s;
    }

    double mass_of(const TraitSet& set) const {
        double s = 0.0;
        for (auto [v, w] : atoms)
            if (set.contains(v)) s += w;
        return s;
    }
};

/// Normalized occupation measure over (trait, environment index) pairs.
struct OccupationMeasure {
    std::map<std::pair<double, std::size_t>, double> weights;
    double mass = 0.0;
};

struct MrcaCounts {
    std::vector<std::size_t> thresholds;
    std::vector<double> distinct_pairs;  // ordered pairs u != v with |u^v| >= K
    double diagonal = 0.0;               // Z_n(X), the u == v terms
};

class PopulationTree {
public:
    std::size_t horizon() const noexcept { return starts_.size() - 2; }
    const std::vector<Node>& nodes() const noexcept { return nodes_; }
    std::uint64_t root_key() const noexcept { return key_; }
    double x0() const noexcept { return nodes_.front().trait; }
    const EnvironmentSequence& env() const noexcept { return env_; }

    std::size_t generation_begin(std::size_t g) const { return starts_.at(g); }
    std::size_t generation_end(std::size_t g) const { return starts_.at(g + 1); }
    std::size_t generation_size(std::size_t g) const { return generation_end(g) - generation_begin(g); }
    std::span<const Node> generation(std::size_t g) const {
        return {nodes_.data() + generation_begin(g), generation_size(g)};
    }
    std::size_t pruned(std::size_t g) const { return pruned_.at(g); }
    double pruned_mass() const noexcept { return pruned_mass_; }

    /// Generation of a node by global index.
    std::size_t generation_of(std::size_t index) const {
        auto it = std::upper_bound(starts_.begin(), starts_.end(), index);
        return static_cast<std::size_t>(it - starts_.begin()) - 1;
    }

    std::size_t census(std::size_t n, const TraitSet& set) const {
        check_generation(n);
        std::size_t c = 0;
        for (const auto& node : generation(n)) c += set.contains(node.trait) ? 1 : 0;
        return c;
    }

    template <class Pred>
    std::size_t census_if(std::size_t n, Pred&& pred) const {
        check_generation(n);
        std::size_t c = 0;
        for (const auto& node : generation(n)) c += pred(node.trait) ? 1 : 0;
        return c;
    }

    /// f_n . Z_n; a non-finite f_n(x) is an error naming x.
    template <class F>
    EmpiricalMeasure rescaled_measure(std::size_t n, F&& f) const {
        check_generation(n);
        std::vector<double> values;
        values.reserve(generation_size(n));
        for (const auto& node : generation(n)) {
            const double v = f(node.trait);
            if (!std::isfinite(v))
                throw InvalidArgument("rescaling failed at trait " + BranchingModel::format_trait(node.trait));
            values.push_back(v);
        }
        return EmpiricalMeasure::from_values(std::move(values));
    }

    std::vector<std::uint32_t> label(std::size_t index) const {
        std::vector<std::uint32_t> path;
        for (std::size_t i = index; nodes_.at(i).parent != no_node; i = nodes_[i].parent)
            path.push_back(nodes_[i].child_index);
        std::reverse(path.begin(), path.end());
        return path;
    }

    std::optional<std::size_t> find(const std::vector<std::uint32_t>& label) const {
        std::size_t i = 0;
        for (auto c : label) {
            const Node& n = nodes_[i];
            if (n.first_child == no_node) return std::nullopt;
            bool found = false;
            for (std::size_t j = n.first_child; j < n.first_child + n.n_stored; ++j)
                if (nodes_[j].child_index == c) {
                    i = j;
                    found = true;
                    break;
                }
            if (!found) return std::nullopt;
        }
        return i;
    }

    OccupationMeasure lineage_occupation(std::size_t index) const {
        if (index >= nodes_.size()) throw InvalidArgument("unknown node index " + std::to_string(index));
        const std::size_t n = generation_of(index);
        OccupationMeasure m;
        const double w = 1.0 / static_cast<double>(n + 1);
        std::size_t g = n;
        for (std::size_t i = index;; i = nodes_[i].parent, --g) {
            m.weights[{nodes_[i].trait, env_.index_at(g)}] += w;
            if (nodes_[i].parent == no_node) break;
        }
        m.mass = 1.0;
        return m;
    }

    OccupationMeasure lineage_occupation(const std::vector<std::uint32_t>& label) const {
        auto idx = find(label);
        if (!idx) throw InvalidArgument("unknown label " + format_label(label));
        return lineage_occupation(*idx);
    }

    /// Ordered distinct pairs at generation n by MRCA generation, in one pass over internal nodes.
    MrcaCounts mrca_pair_counts(std::size_t n, std::vector<std::size_t> thresholds) const {
        check_generation(n);
        std::vector<double> below(nodes_.size(), 0.0);  // generation-n descendants
        for (std::size_t i = generation_begin(n); i < generation_end(n); ++i) below[i] = 1.0;
        std::vector<double> at_gen(n + 1, 0.0);
        for (std::size_t g = n; g-- > 0;) {
            for (std::size_t i = generation_begin(g); i < generation_end(g); ++i) {
                const Node& w = nodes_[i];
                if (w.first_child == no_node) continue;
                double s = 0.0, s2 = 0.0;
                for (std::size_t j = w.first_child; j < w.first_child + w.n_stored; ++j) {
                    s += below[j];
                    s2 += below[j] * below[j];
                }
                below[i] = s;
                at_gen[g] += s * s - s2;
            }
        }
        MrcaCounts out;
        out.thresholds = std::move(thresholds);
        for (auto k : out.thresholds) {
            double c = 0.0;
            for (std::size_t g = k; g < n; ++g) c += at_gen[g];
            out.distinct_pairs.push_back(c);
        }
        out.diagonal = static_cast<double>(generation_size(n));
        return out;
    }

    static std::string format_label(const std::vector<std::uint32_t>& label) {
        std::string s;
        for (std::size_t i = 0; i < label.size(); ++i) s += (i ? "." : "") + std::to_string(label[i]);
        return s;
    }

    /// One line per node: {"label","gen","parent","trait","brood"}.
    void dump_ndjson(std::ostream& os) const {
        std::vector<std::string> labels(nodes_.size());
        for (std::size_t g = 0; g <= horizon(); ++g)
            for (std::size_t i = generation_begin(g); i < generation_end(g); ++i) {
                const Node& n = nodes_[i];
                if (n.parent != no_node)
                    labels[i] = labels[n.parent].empty() ? std::to_string(n.child_index)
                                                         : labels[n.parent] + "." + std::to_string(n.child_index);
                os << "{\"label\":\"" << labels[i] << "\",\"gen\":" << g << ",\"parent\":";
                if (n.parent == no_node) os << "null";
                else os << "\"" << labels[n.parent] << "\"";
                std::ostringstream t;
                t.precision(17);
                t << n.trait;
                os << ",\"trait\":" << t.str() << ",\"brood\":";
                if (g < horizon()) os << n.brood;
                else os << "null";
                os << "}\n";
            }
    }

private:
    friend PopulationTree simulate_from_key(const BranchingModel&, const EnvironmentSequence&, double,
                                            std::uint64_t, std::size_t, const SimOptions&);

    PopulationTree(EnvironmentSequence env, std::uint64_t key) : env_(std::move(env)), key_(key) {}

    void check_generation(std::size_t n) const {
        if (n > horizon())
            throw InvalidArgument("generation " + std::to_string(n) + " is beyond the horizon " +
                                  std::to_string(horizon()));
    }

    std::vector<Node> nodes_;
    std::vector<std::size_t> starts_;
    std::vector<std::size_t> pruned_;
    double pruned_mass_ = 0.0;
    EnvironmentSequence env_;
    std::uint64_t key_;
};

/// Simulates from an explicit root key (used to regrow subtrees).
inline PopulationTree simulate_from_key(const BranchingModel& model, const EnvironmentSequence& env, double x0,
                                        std::uint64_t key, std::size_t n, const SimOptions& opts) {
    if (opts.cap < 1) throw InvalidArgument("cap must be >= 1");
    model.check_trait(x0);
    PopulationTree tree(env, key);
    tree.nodes_.push_back(detail::make_root(x0, key));
    tree.starts_ = {0, 1};
    tree.pruned_ = {0};
    for (std::size_t g = 0; g < n; ++g) {
        const std::size_t lo = tree.starts_[g], hi = tree.starts_[g + 1];
        std::span<Node> parents(tree.nodes_.data() + lo, hi - lo);
        auto exp = detail::expand_generation(model, env.token_at(g), parents, lo, g + 1, opts);
        if (exp.children.size() > opts.cap) throw PopulationExceededCap(g + 1, exp.children.size(), opts.cap);
        for (std::size_t i = lo; i < hi; ++i)
            if (tree.nodes_[i].first_child != no_node) tree.nodes_[i].first_child += static_cast<std::uint32_t>(hi);
        tree.nodes_.insert(tree.nodes_.end(), exp.children.begin(), exp.children.end());
        tree.starts_.push_back(tree.nodes_.size());
        tree.pruned_.push_back(exp.pruned);
        tree.pruned_mass_ += exp.pruned_mass;
    }
    return tree;
}

inline PopulationTree simulate(const BranchingModel& model, const EnvironmentSequence& env, double x0,
                               std::size_t n, std::uint64_t seed, const SimOptions& opts = {}) {
    auto tree = simulate_from_key(model, env, x0, root_key(seed), n, opts);
    return tree;
}

struct StreamSummary {
    std::size_t generations = 0;  // last generation produced
    std::size_t pruned = 0;
    double pruned_mass = 0.0;
    bool extinct = false;
};

/// Like simulate() but keeps only the current generation; `observer(g, nodes)`
/// sees generation g (parent fields index generation g-1).  Stops early when
/// the observer returns false or the population dies out.
template <class Observer>
StreamSummary simulate_streaming(const BranchingModel& model, const EnvironmentSequence& env, double x0,
                                 std::size_t n, std::uint64_t seed, const SimOptions& opts, Observer&& observer) {
    if (opts.cap < 1) throw InvalidArgument("cap must be >= 1");
    model.check_trait(x0);
    StreamSummary summary;
    std::vector<Node> current{detail::make_root(x0, root_key(seed))};
    if (!observer(std::size_t{0}, std::as_const(current))) return summary;
    for (std::size_t g = 0; g < n; ++g) {
        auto exp = detail::expand_generation(model, env.token_at(g), std::span<Node>(current), 0, g + 1, opts);
        if (exp.children.size() > opts.cap) throw PopulationExceededCap(g + 1, exp.children.size(), opts.cap);
        summary.pruned += exp.pruned;
        summary.pruned_mass += exp.pruned_mass;
        current = std::move(exp.children);
        summary.generations = g + 1;
        if (!observer(g + 1, std::as_const(current))) break;
        if (current.empty()) {
            summary.extinct = true;
            break;
        }
    }
    return summary;
}

}  // namespace branchkit
