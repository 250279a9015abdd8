#pragma once

// Local densities and extremal particles: tube measures, the coupled
// lower-bounding branching process in varying environment, and the
// Z_n([a_n, inf)) and max-trait experiments.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "builtin_models.hpp"
#include "env.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "simulate.hpp"
#include "stats.hpp"

namespace branchkit {

// ---------------------------------------------------------------- tube measures

/// Checkpoint generations k_0 < k_1 < ... and trait sets B_i.
struct TubeSpec {
    std::vector<std::size_t> checkpoints;
    std::vector<TraitSet> sets;

    void validate(double x0) const {
        if (checkpoints.size() != sets.size() || checkpoints.empty())
            throw InvalidArgument("tube needs one trait set per checkpoint");
        for (std::size_t i = 1; i < checkpoints.size(); ++i)
            if (checkpoints[i] <= checkpoints[i - 1]) throw InvalidArgument("tube checkpoints must increase strictly");
        if (!sets[0].contains(x0)) throw InvalidArgument("initial trait is not in the first tube set");
    }

    /// k_i = k_0 + i with B_i = [b, inf) at every checkpoint.
    static TubeSpec half_line(double b, std::size_t count) {
        TubeSpec t;
        for (std::size_t i = 0; i < count; ++i) {
            t.checkpoints.push_back(i);
            t.sets.push_back(TraitSet::at_least(b));
        }
        return t;
    }
};

struct TubeMeasure {
    std::vector<double> pmf;   // mu{l}, l = 0, 1, ...
    double mean = 0.0;         // sum_{l >= 1} mu[l, inf)
    double normalized_variance = 0.0;  // Var / mean^2, 0 when mean = 0
    bool exact = true;

    /// mu[l, inf)
    double survival(std::size_t l) const {
        double s = 0.0;
        for (std::size_t k = l; k < pmf.size(); ++k) s += pmf[k];
        return std::min(1.0, s);
    }
    double cdf(std::size_t l) const { return 1.0 - survival(l + 1); }

    static TubeMeasure from_survival(std::vector<double> surv, bool exact) {
        // surv[l] = mu[l, inf), surv[0] = 1, nonincreasing.
        TubeMeasure t;
        t.exact = exact;
        if (surv.empty()) surv.push_back(1.0);
        surv[0] = 1.0;
        for (std::size_t l = 1; l < surv.size(); ++l) surv[l] = std::min(surv[l], surv[l - 1]);
        t.pmf.resize(surv.size());
        for (std::size_t l = 0; l < surv.size(); ++l)
            t.pmf[l] = surv[l] - (l + 1 < surv.size() ? surv[l + 1] : 0.0);
        double m2 = 0.0;
        for (std::size_t l = 1; l < surv.size(); ++l) {
            t.mean += surv[l];
            m2 += static_cast<double>(l * l) * t.pmf[l];
        }
        t.normalized_variance = t.mean > 0.0 ? (m2 - t.mean * t.mean) / (t.mean * t.mean) : 0.0;
        return t;
    }
};

namespace detail {

inline std::vector<double> survival_of(const std::vector<double>& pmf) {
    std::vector<double> s(pmf.size() + 1, 0.0);
    for (std::size_t l = pmf.size(); l-- > 0;) s[l] = s[l + 1] + pmf[l];
    s.pop_back();
    if (s.empty()) s.push_back(1.0);
    return s;
}

inline std::vector<double> inf_points(const BranchingModel& model, const TraitSet& a) {
    if (a.is_empty()) throw InvalidArgument("tube set A must not be empty");
    if (model.monotone()) {
        if (auto lo = a.min_point()) return {*lo};
    }
    if (a.kind() == TraitSet::Kind::atoms) return a.atom_values();
    if (model.space().kind() == TraitSpace::Kind::finite) {
        std::vector<double> pts;
        for (double x : model.space().atoms())
            if (a.contains(x)) pts.push_back(x);
        if (!pts.empty()) return pts;
    }
    throw Unsupported(model.name() + ": A = " + a.describe() + " has no computable minimal point");
}

}  // namespace detail

struct TubeOptions {
    std::size_t replicates = 10000;  // Monte Carlo when no exact law exists
    std::uint64_t seed = 1;
    SimOptions sim;
};

/// mu_{i,n}(A, e, B)[l, inf) = inf_{x in A} P_{x, T^i e}(Z_{n-i}(B) >= l).
inline TubeMeasure tube_measure(const BranchingModel& model, const EnvironmentSequence& env, std::size_t i,
                                std::size_t n, const TraitSet& a, const TraitSet& b, const TubeOptions& opts = {}) {
    if (n <= i) throw InvalidArgument("tube_measure needs i < n");
    if (b.is_empty()) return TubeMeasure::from_survival({1.0}, true);
    const auto points = detail::inf_points(model, a);
    std::vector<double> surv;
    bool exact = true;
    const EnvironmentSequence shifted = env.shift(i);
    for (std::size_t p = 0; p < points.size(); ++p) {
        const double x = points[p];
        std::vector<double> s;
        std::optional<std::vector<double>> pmf;
        if (n - i == 1) pmf = model.one_step_count_law(x, env.token_at(i), b);
        if (pmf) {
            s = detail::survival_of(*pmf);
        } else {
            exact = false;
            std::vector<double> counts(opts.replicates);
            SimOptions sim = opts.sim;
            sim.workers = 1;
            for (std::size_t r = 0; r < opts.replicates; ++r) {
                double c = 0.0;
                simulate_streaming(model, shifted, x, n - i, replicate_seed(derive_key(opts.seed, p), r), sim,
                                   [&](std::size_t g, const std::vector<Node>& gen) {
                                       if (g == n - i)
                                           for (const auto& u : gen) c += b.contains(u.trait) ? 1.0 : 0.0;
                                       return true;
                                   });
                counts[r] = c;
            }
            const auto top = static_cast<std::size_t>(*std::max_element(counts.begin(), counts.end()));
            s.assign(top + 1, 0.0);
            for (double c : counts)
                for (std::size_t l = 0; l <= static_cast<std::size_t>(c); ++l) s[l] += 1.0;
            for (auto& v : s) v /= static_cast<double>(opts.replicates);
        }
        if (surv.empty()) {
            surv = s;
        } else {
            surv.resize(std::min(surv.size(), s.size()));
            for (std::size_t l = 0; l < surv.size(); ++l) surv[l] = std::min(surv[l], s[l]);
        }
    }
    return TubeMeasure::from_survival(std::move(surv), exact);
}

// ---------------------------------------------------------------- coupling

struct CouplingRecord {
    std::vector<double> in_tube;    // Z_{k_i}(B_i)
    std::vector<double> selected;   // individuals whose lineage stayed in the tube
    std::vector<double> bpve;       // coupled branching process in varying environment
    std::vector<double> tube_means; // mu-bar of each step
    std::optional<std::string> warning;
};

/// Couples the population with a BPVE whose generation-i law is mu_{k_i,k_i+1}(B_i, e, B_{i+1}).
/// Each BPVE parent x with xi children in B_{i+1} keeps the first xi' of them, where
/// xi' = F_inf^{-1}(F_x(xi - 1) + U p_x(xi)) and U is read from the parent's key.
/// Only one-step checkpoints are supported.
inline CouplingRecord bpve_couple(const BranchingModel& model, const EnvironmentSequence& env, double x0,
                                  const TubeSpec& tube, std::uint64_t seed, const SimOptions& opts = {}) {
    tube.validate(x0);
    for (std::size_t i = 1; i < tube.checkpoints.size(); ++i)
        if (tube.checkpoints[i] != tube.checkpoints[i - 1] + 1)
            throw Unsupported("coupling needs consecutive checkpoints");
    if (tube.checkpoints[0] != 0) throw Unsupported("coupling needs the first checkpoint at generation 0");
    const std::size_t n = tube.checkpoints.size() - 1;

    CouplingRecord rec;
    std::vector<std::vector<double>> inf_cdf(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto t = tube_measure(model, env, i, i + 1, tube.sets[i], tube.sets[i + 1]);
        if (!t.exact) throw Unsupported(model.name() + ": coupling needs an exact one-step count law");
        rec.tube_means.push_back(t.mean);
        for (std::size_t l = 0; l < t.pmf.size(); ++l) inf_cdf[i].push_back(t.cdf(l));
    }
    for (std::size_t i = n / 2; i < n; ++i)
        if (rec.tube_means[i] <= 1.0) {
            rec.warning = "SupercriticalityUnmet: mean of tube step " + std::to_string(i) + " is " +
                          std::to_string(rec.tube_means[i]);
            break;
        }

    SimOptions sim = opts;
    sim.prune = [&](std::size_t g, double y) -> std::optional<double> {
        if (!model.absorbing(y)) return std::nullopt;
        for (std::size_t j = g; j <= n; ++j)
            if (tube.sets[j].contains(y)) return std::nullopt;
        return 0.0;
    };

    struct Prev {
        double trait;
        std::uint64_t key;
        bool selected, bpve;
    };
    std::vector<Prev> prev;
    rec.in_tube.assign(n + 1, 0.0);
    rec.selected.assign(n + 1, 0.0);
    rec.bpve.assign(n + 1, 0.0);
    simulate_streaming(model, env, x0, n, seed, sim, [&](std::size_t g, const std::vector<Node>& gen) {
        std::vector<Prev> cur(gen.size());
        const TraitSet& b = tube.sets[g];
        for (std::size_t k = 0; k < gen.size(); ++k) {
            const bool in_b = b.contains(gen[k].trait);
            cur[k] = {gen[k].trait, gen[k].key, g == 0 && in_b, g == 0 && in_b};
            rec.in_tube[g] += in_b ? 1.0 : 0.0;
        }
        if (g > 0) {
            std::size_t k = 0;
            while (k < gen.size()) {
                const std::size_t p = gen[k].parent;
                std::size_t end = k;
                while (end < gen.size() && gen[end].parent == p) ++end;
                const Prev& parent = prev[p];
                if (parent.selected) {
                    std::vector<std::size_t> inside;
                    for (std::size_t c = k; c < end; ++c)
                        if (b.contains(gen[c].trait)) {
                            cur[c].selected = true;
                            inside.push_back(c);
                        }
                    if (parent.bpve) {
                        const auto pmf = *model.one_step_count_law(parent.trait, env.token_at(g - 1), b);
                        const std::size_t xi = inside.size();
                        double fx_below = 0.0;
                        for (std::size_t l = 0; l < xi && l < pmf.size(); ++l) fx_below += pmf[l];
                        const double px = xi < pmf.size() ? pmf[xi] : 0.0;
                        // Guard: the infimum law must be stochastically smaller than the parent's law.
                        double fx = 0.0;
                        for (std::size_t l = 0; l < pmf.size(); ++l) {
                            fx += pmf[l];
                            const double finf = l < inf_cdf[g - 1].size() ? inf_cdf[g - 1][l] : 1.0;
                            if (finf < fx - 1e-12)
                                throw Error(model.name() + ": tube infimum law is not dominated at trait " +
                                            BranchingModel::format_trait(parent.trait));
                        }
                        KeyedRng rng(derive_key(parent.key, 0));
                        const double v = fx_below + rng.uniform() * px;
                        std::size_t keep = 0;
                        while (keep < inf_cdf[g - 1].size() && inf_cdf[g - 1][keep] < v) ++keep;
                        keep = std::min(keep, xi);
                        for (std::size_t j = 0; j < keep; ++j) cur[inside[j]].bpve = true;
                    }
                }
                k = end;
            }
        }
        for (const auto& c : cur) {
            rec.selected[g] += c.selected ? 1.0 : 0.0;
            rec.bpve[g] += c.bpve ? 1.0 : 0.0;
        }
        prev = std::move(cur);
        return true;
    });
    return rec;
}

// ---------------------------------------------------------------- local densities

using ThresholdSchedule = std::function<double(std::size_t n)>;

struct DensityRecord {
    std::size_t replicate = 0;
    std::size_t n = 0;
    double count = 0.0;               // Z_n([a_n, inf))
    std::optional<double> log_count_over_n;
    std::optional<double> markov_bound;  // n^-1 log m_n(x, e, [a_n, inf))
    bool survived = false;
};

struct DensityOptions {
    // Drop newborns whose expected future target count, summed over the ladder, is below this
    // (0: only exact pruning of absorbed traits).
    double prune_epsilon = 0.0;
    unsigned workers = 1;
    SimOptions sim;
    std::size_t bootstrap = 200;
};

struct DensityResult {
    std::vector<std::size_t> ladder;
    std::vector<DensityRecord> records;   // ordered by (replicate, ladder index)
    std::vector<double> slopes;           // per surviving replicate, least squares over the last half
    double median_slope = std::numeric_limits<double>::quiet_NaN();
    double slope_se = 0.0;
    std::vector<std::optional<double>> markov_bound;  // per ladder entry
    std::vector<bool> markov_exact;
    std::size_t survivors = 0;
    double max_pruned_mass = 0.0;         // largest per-replicate expected target count lost to pruning
    double markov_exceed_fraction = 0.0;  // fraction of (replicate, n) with count > 20 m_n tail
};

namespace detail {

/// Prune rule shared by the density and extremal experiments.
/// Decides which newborns can be dropped without affecting counts or maxima at the ladder points.
/// A newborn at trait y in generation g is dropped when its descendants are unlikely to matter at
/// every ladder point n_k >= g with target t_k: with a max-tail table (branching random walks) the
/// score is sum_k P(some generation-n_k descendant >= t_k), otherwise the first moment
/// sum_k m_{n_k-g}(y, [t_k, inf)).  The value returned for a dropped newborn is that first moment,
/// i.e. its expected contribution to the target counts.  Absorbing traits that can no longer reach a
/// target are dropped exactly.
class TargetPruner {
public:
    TargetPruner(const BranchingModel& model, const EnvironmentSequence& env, std::vector<std::size_t> ladder,
                 std::vector<double> targets, double epsilon)
        : model_(&model), ladder_(std::move(ladder)), targets_(std::move(targets)), epsilon_(epsilon) {
        const std::size_t n_max = ladder_.back();
        if (epsilon_ > 0.0) {
            if (auto* brw = dynamic_cast<const BrwModel*>(&model))
                table_ = std::make_shared<const MaxTailTable>(brw->max_tail_table(n_max));
            for (std::size_t g = 0; g <= n_max; ++g) shifted_.push_back(env.shift(g));
        }
    }

    const MaxTailTable* table() const noexcept { return table_.get(); }

    std::optional<double> operator()(std::size_t g, double y) const {
        if (model_->absorbing(y)) {
            bool reaches = false;
            for (std::size_t k = 0; k < ladder_.size(); ++k)
                if (ladder_[k] >= g && y >= targets_[k]) reaches = true;
            if (!reaches) return 0.0;
        }
        if (epsilon_ <= 0.0) return std::nullopt;
        double score = 0.0, mass = 0.0;
        for (std::size_t k = 0; k < ladder_.size(); ++k) {
            if (ladder_[k] < g) continue;
            auto t = model_->log_mean_tail(y, shifted_[g], ladder_[k] - g, targets_[k]);
            if (!t) return std::nullopt;
            mass += std::exp(t->log_value);
            score += table_ ? table_->prob(ladder_[k] - g, targets_[k] - y) : std::exp(t->log_value);
            if (score >= epsilon_) return std::nullopt;
        }
        return mass;
    }

private:
    const BranchingModel* model_;
    std::vector<std::size_t> ladder_;
    std::vector<double> targets_;
    double epsilon_;
    std::shared_ptr<const MaxTailTable> table_;
    std::vector<EnvironmentSequence> shifted_;
};

}  // namespace detail

inline DensityResult local_density_experiment(const BranchingModel& model, const EnvironmentSequence& env, double x0,
                                              const ThresholdSchedule& a_n, std::vector<std::size_t> ladder,
                                              std::size_t replicates, std::uint64_t seed,
                                              const DensityOptions& opts = {}) {
    if (ladder.empty() || replicates == 0) throw InvalidArgument("local_density_experiment needs a ladder and replicates");
    if (!model.monotone()) throw InvalidArgument(model.name() + ": local densities need a monotone model");
    std::sort(ladder.begin(), ladder.end());
    ladder.erase(std::unique(ladder.begin(), ladder.end()), ladder.end());
    if (ladder.front() == 0) throw InvalidArgument("ladder entries must be >= 1");
    std::vector<double> targets;
    for (auto n : ladder) targets.push_back(a_n(n));

    DensityResult res;
    res.ladder = ladder;
    for (std::size_t k = 0; k < ladder.size(); ++k) {
        auto t = model.log_mean_tail(x0, env, ladder[k], targets[k]);
        res.markov_bound.push_back(t ? std::optional<double>(t->log_value / static_cast<double>(ladder[k]))
                                     : std::nullopt);
        res.markov_exact.push_back(t && t->exact);
    }

    SimOptions sim = opts.sim;
    sim.workers = 1;
    auto pruner = std::make_shared<const detail::TargetPruner>(model, env, ladder, targets, opts.prune_epsilon);
    sim.prune = [pruner](std::size_t g, double y) { return (*pruner)(g, y); };
    struct Run {
        std::vector<double> counts;
        double pruned_mass = 0.0;
    };
    std::vector<Run> runs(replicates);
    parallel_for(replicates, opts.workers, [&](std::size_t r) {
        Run& run = runs[r];
        run.counts.assign(ladder.size(), 0.0);
        auto summary = simulate_streaming(model, env, x0, ladder.back(), replicate_seed(seed, r), sim,
                                          [&](std::size_t g, const std::vector<Node>& gen) {
                                              auto it = std::find(ladder.begin(), ladder.end(), g);
                                              if (it != ladder.end()) {
                                                  const auto k = static_cast<std::size_t>(it - ladder.begin());
                                                  double c = 0.0;
                                                  for (const auto& u : gen) c += u.trait >= targets[k] ? 1.0 : 0.0;
                                                  run.counts[k] = c;
                                              }
                                              return true;
                                          });
        run.pruned_mass = summary.pruned_mass;
    });

    const std::size_t half = ladder.size() / 2;
    std::vector<double> xs;
    for (std::size_t k = half; k < ladder.size(); ++k) xs.push_back(static_cast<double>(ladder[k]));
    std::size_t exceed = 0, checked = 0;
    for (std::size_t r = 0; r < replicates; ++r) {
        const Run& run = runs[r];
        res.max_pruned_mass = std::max(res.max_pruned_mass, run.pruned_mass);
        bool survived = true;
        for (std::size_t k = half; k < ladder.size(); ++k) survived = survived && run.counts[k] > 0.0;
        for (std::size_t k = 0; k < ladder.size(); ++k) {
            DensityRecord rec;
            rec.replicate = r;
            rec.n = ladder[k];
            rec.count = run.counts[k];
            if (rec.count > 0.0) rec.log_count_over_n = std::log(rec.count) / static_cast<double>(ladder[k]);
            rec.markov_bound = res.markov_bound[k];
            rec.survived = survived;
            if (res.markov_bound[k]) {
                ++checked;
                const double bound = std::exp(*res.markov_bound[k] * static_cast<double>(ladder[k]));
                if (rec.count > 20.0 * bound) ++exceed;
            }
            res.records.push_back(rec);
        }
        if (survived) {
            std::vector<double> ys;
            for (std::size_t k = half; k < ladder.size(); ++k) ys.push_back(std::log(run.counts[k]));
            // A single ladder point: the slope is log Z_n / n.
            res.slopes.push_back(xs.size() == 1 ? ys[0] / xs[0] : least_squares_slope(xs, ys));
        }
    }
    res.survivors = res.slopes.size();
    res.markov_exceed_fraction = checked ? static_cast<double>(exceed) / static_cast<double>(checked) : 0.0;
    if (res.slopes.empty()) throw ExtinctEverywhere("no replicate kept a positive count over the last half of the ladder");
    res.median_slope = median(res.slopes);
    res.slope_se = bootstrap_se<double>(
        res.slopes,
        [](const std::vector<const double*>& pick) {
            std::vector<double> v;
            for (auto* p : pick) v.push_back(*p);
            return median(v);
        },
        opts.bootstrap, seed);
    return res;
}

// ---------------------------------------------------------------- extremal particles

struct ExtremeRecord {
    std::size_t replicate = 0;
    std::size_t n = 0;
    std::optional<double> max;   // largest kept trait; absent when generation n is empty
    bool below_threshold = false;  // max under the pruning threshold: value not guaranteed
    double miss_bound = 0.0;       // bound on P(a dropped subtree beats the recorded max)
};

struct ExtremeOptions {
    double threshold_fraction = 0.85;  // pruning aims at traits >= fraction * speed * n
    double prune_epsilon = 1e-3;
    double excess = 0.1;               // Markov check at (speed + excess) n
    unsigned workers = 1;
    SimOptions sim;
};

struct ExtremeResult {
    std::vector<std::size_t> ladder;
    double speed = 0.0;
    std::vector<ExtremeRecord> records;
    std::vector<double> median_max_over_n;  // per ladder entry, over replicates with a maximum
    std::vector<double> markov_bound;       // P(max >= (speed + excess) n) <= m_n(x, e, [(v + excess) n, inf))
    std::vector<double> exceed_fraction;    // observed frequency of that event
    std::size_t flagged = 0;                // records with below_threshold
    double max_miss_bound = 0.0;
    double mean_miss_bound = 0.0;  // bounds the expected fraction of records whose max is understated
};

inline ExtremeResult extremal_particle_experiment(const BranchingModel& model, const EnvironmentSequence& env,
                                                  double x0, double speed, std::vector<std::size_t> ladder,
                                                  std::size_t replicates, std::uint64_t seed,
                                                  const ExtremeOptions& opts = {}) {
    if (ladder.empty() || replicates == 0) throw InvalidArgument("extremal_particle_experiment needs a ladder and replicates");
    if (!model.monotone()) throw InvalidArgument(model.name() + ": extremal particles need a monotone model");
    std::sort(ladder.begin(), ladder.end());
    ladder.erase(std::unique(ladder.begin(), ladder.end()), ladder.end());
    std::vector<double> targets;
    for (auto n : ladder) targets.push_back(x0 + opts.threshold_fraction * speed * static_cast<double>(n));

    ExtremeResult res;
    res.ladder = ladder;
    res.speed = speed;
    SimOptions sim = opts.sim;
    sim.workers = 1;
    const detail::TargetPruner pruner(model, env, ladder, targets, opts.prune_epsilon);
    struct Run {
        std::vector<std::optional<double>> max;
        // Dropped newborns per generation, binned by trait on the max-tail grid.
        std::vector<std::map<long, std::uint64_t>> dropped;
    };
    std::vector<Run> runs(replicates);
    const MaxTailTable* table = pruner.table();
    parallel_for(replicates, opts.workers, [&](std::size_t r) {
        Run& run = runs[r];
        run.max.assign(ladder.size(), std::nullopt);
        run.dropped.resize(ladder.back() + 1);
        SimOptions local = sim;
        local.prune = [&](std::size_t g, double y) {
            auto lost = pruner(g, y);
            if (lost && table) ++run.dropped[g][static_cast<long>(std::floor((y - x0) / table->h))];
            return lost;
        };
        simulate_streaming(model, env, x0, ladder.back(), replicate_seed(seed, r), local,
                           [&](std::size_t g, const std::vector<Node>& gen) {
                               auto it = std::find(ladder.begin(), ladder.end(), g);
                               if (it != ladder.end() && !gen.empty()) {
                                   double m = -std::numeric_limits<double>::infinity();
                                   for (const auto& u : gen) m = std::max(m, u.trait);
                                   run.max[static_cast<std::size_t>(it - ladder.begin())] = m;
                               }
                               return true;
                           });
    });

    // P(the true maximum exceeds the recorded one) <= sum over dropped newborns of
    // P(some descendant at n >= recorded max), evaluated after the fact.
    auto miss_bound = [&](const Run& run, std::size_t k) {
        if (!table) return 0.0;
        const double m = run.max[k] ? *run.max[k] : -std::numeric_limits<double>::infinity();
        double b = 0.0;
        for (std::size_t g = 1; g <= ladder[k]; ++g)
            for (auto [bin, count] : run.dropped[g]) {
                const double y_hi = x0 + static_cast<double>(bin + 1) * table->h;
                b += static_cast<double>(count) * table->prob(ladder[k] - g, m - y_hi);
            }
        return std::min(1.0, b);
    };
    std::vector<std::vector<double>> ratios(ladder.size());
    std::vector<std::size_t> exceed(ladder.size(), 0);
    for (std::size_t r = 0; r < replicates; ++r) {
        for (std::size_t k = 0; k < ladder.size(); ++k) {
            ExtremeRecord rec;
            rec.replicate = r;
            rec.n = ladder[k];
            rec.max = runs[r].max[k];
            const double nd = static_cast<double>(ladder[k]);
            rec.below_threshold = !rec.max || *rec.max < targets[k];
            rec.miss_bound = miss_bound(runs[r], k);
            res.max_miss_bound = std::max(res.max_miss_bound, rec.miss_bound);
            res.mean_miss_bound += rec.miss_bound / static_cast<double>(replicates * ladder.size());
            res.flagged += rec.below_threshold ? 1 : 0;
            if (rec.max) {
                ratios[k].push_back((*rec.max - x0) / nd);
                if (*rec.max - x0 >= (speed + opts.excess) * nd) ++exceed[k];
            }
            res.records.push_back(rec);
        }
    }
    for (std::size_t k = 0; k < ladder.size(); ++k) {
        const double nd = static_cast<double>(ladder[k]);
        res.median_max_over_n.push_back(ratios[k].empty() ? std::numeric_limits<double>::quiet_NaN() : median(ratios[k]));
        auto t = model.log_mean_tail(x0, env, ladder[k], x0 + (speed + opts.excess) * nd);
        res.markov_bound.push_back(t ? std::min(1.0, std::exp(t->log_value)) : 1.0);
        res.exceed_fraction.push_back(static_cast<double>(exceed[k]) / static_cast<double>(replicates));
    }
    return res;
}

inline ExtremeResult extremal_particle_experiment(const BrwModel& model, const EnvironmentSequence& env, double x0,
                                                  std::vector<std::size_t> ladder, std::size_t replicates,
                                                  std::uint64_t seed, const ExtremeOptions& opts = {}) {
    return extremal_particle_experiment(static_cast<const BranchingModel&>(model), env, x0, model.speed(),
                                        std::move(ladder), replicates, seed, opts);
}

// ---------------------------------------------------------------- growth-curve probe

struct MgCurve {
    std::size_t p = 1;
    std::function<double(std::size_t i)> b;               // b_i
    std::size_t blocks = 50;                              // i = 0..blocks-1
    std::size_t q = 1;
    std::function<double(std::size_t j, std::size_t n)> b_n;  // b_{j,n}
    std::function<std::size_t(std::size_t n)> phi;        // phi(n)
    std::vector<std::size_t> horizons;
};

struct MgReport {
    std::vector<double> block_mass;     // m_p(b_i, T^{ip} e, [b_{i+1}, inf))
    double block_liminf = 0.0;          // min over the last half of the blocks
    bool blocks_supercritical = false;
    std::vector<double> averaged_log;   // per horizon: n^-1 sum_j log m_q(b_{j,n}, T^{p phi(n) + jq} e, [b_{j+1,n}, inf))
    double averaged_liminf = 0.0;       // min over the last half of the horizons
    bool rate_certified = false;        // averaged_liminf >= rho - epsilon
    bool certified = false;
    bool exact = true;
    // Auxiliary-chain form, neutral models only: log Q_q = log m_q(tail) - log m_q(e) against -alpha - epsilon.
    std::optional<std::vector<double>> averaged_log_q;
    std::optional<bool> ld_certified;
    std::optional<std::string> note;
};

/// Evaluates the finite-horizon side of the mean growth-rate assumption for a supplied curve.
/// When alpha is given and the model is neutral, the large-deviation form is evaluated too and
/// a disagreement between the two verdicts is reported rather than resolved.
inline MgReport assumption_mg_probe(const BranchingModel& model, const EnvironmentSequence& env, const MgCurve& curve,
                                    double rho, double epsilon, std::optional<double> alpha = std::nullopt) {
    if (!model.monotone()) throw InvalidArgument(model.name() + ": the probe needs a monotone model");
    if (curve.p < 1 || curve.q < 1) throw InvalidArgument("p and q must be >= 1");
    MgReport rep;
    auto log_mass = [&](double x, std::size_t start, std::size_t steps, double threshold) {
        if (!model.space().contains(x)) return -std::numeric_limits<double>::infinity();
        auto t = model.log_mean_tail(x, env.shift(start), steps, threshold);
        if (!t) throw Unsupported(model.name() + ": no mean tail available");
        rep.exact = rep.exact && t->exact;
        return t->log_value;
    };
    for (std::size_t i = 0; i < curve.blocks; ++i)
        rep.block_mass.push_back(std::exp(log_mass(curve.b(i), i * curve.p, curve.p, curve.b(i + 1))));
    rep.block_liminf = std::numeric_limits<double>::infinity();
    for (std::size_t i = curve.blocks / 2; i < curve.blocks; ++i) rep.block_liminf = std::min(rep.block_liminf, rep.block_mass[i]);
    rep.blocks_supercritical = rep.block_liminf > 1.0;

    auto log_mean_total = [&](std::size_t start, std::size_t steps) {
        double s = 0.0;
        for (std::size_t k = 0; k < steps; ++k) s += std::log(model.mean_offspring(curve.b(0), env.token_at(start + k)));
        return s;
    };
    const bool ld = alpha.has_value() && model.neutral();
    if (ld) rep.averaged_log_q.emplace();
    for (auto n : curve.horizons) {
        const std::size_t start = curve.p * curve.phi(n);
        double s = 0.0, sq = 0.0;
        for (std::size_t j = 0; start + j * curve.q < n; ++j) {
            const std::size_t at = start + j * curve.q;
            const double lm = log_mass(curve.b_n(j, n), at, curve.q, curve.b_n(j + 1, n));
            s += lm;
            if (ld) sq += lm - log_mean_total(at, curve.q);
        }
        rep.averaged_log.push_back(s / static_cast<double>(n));
        if (ld) rep.averaged_log_q->push_back(sq / static_cast<double>(n));
    }
    rep.averaged_liminf = std::numeric_limits<double>::infinity();
    double ld_liminf = std::numeric_limits<double>::infinity();
    for (std::size_t k = curve.horizons.size() / 2; k < curve.horizons.size(); ++k) {
        rep.averaged_liminf = std::min(rep.averaged_liminf, rep.averaged_log[k]);
        if (ld) ld_liminf = std::min(ld_liminf, (*rep.averaged_log_q)[k]);
    }
    rep.rate_certified = std::isfinite(rep.averaged_liminf) && rep.averaged_liminf >= rho - epsilon;
    rep.certified = rep.blocks_supercritical && rep.rate_certified;
    if (ld) {
        rep.ld_certified = std::isfinite(ld_liminf) && ld_liminf >= -*alpha - epsilon;
        if (*rep.ld_certified != rep.rate_certified)
            rep.note = "growth-rate and auxiliary-chain forms disagree; check rho = log m - alpha";
    }
    return rep;
}

}  // namespace branchkit
