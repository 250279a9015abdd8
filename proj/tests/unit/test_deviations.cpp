#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "branchkit/branchkit.hpp"

using namespace branchkit;

namespace {

const auto env = EnvironmentSequence::constant({"e", {}});

// P(max of generation k >= s) for binary branching with +-1 steps, by enumerating every increment assignment.
double brute_max_tail(std::size_t k, long s) {
    std::size_t hits = 0, total = 0;
    const std::size_t edges = (std::size_t{1} << (k + 1)) - 2;
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << edges); ++mask) {
        std::vector<long> pos{0};
        std::size_t e = 0;
        for (std::size_t g = 0; g < k; ++g) {
            std::vector<long> next;
            for (long p : pos)
                for (int c = 0; c < 2; ++c) next.push_back(p + (((mask >> e++) & 1) ? 1 : -1));
            pos = std::move(next);
        }
        ++total;
        hits += *std::max_element(pos.begin(), pos.end()) >= s;
    }
    return static_cast<double>(hits) / static_cast<double>(total);
}

double max_trait(const PopulationTree& t, std::size_t n) {
    double m = -INFINITY;
    for (const auto& u : t.generation(n)) m = std::max(m, u.trait);
    return m;
}

}  // namespace

TEST(MaxTail, LatticeTableMatchesEnumeration) {
    BrwModel bm(CountLaw::deterministic(2), IncrementLaw::rademacher());
    auto table = bm.max_tail_table(3);
    EXPECT_TRUE(table.exact);
    for (std::size_t k = 0; k <= 3; ++k)
        for (long s = -4; s <= 4; ++s) EXPECT_NEAR(table.prob(k, static_cast<double>(s)), brute_max_tail(k, s), 1e-12) << k << " " << s;
}

TEST(MaxTail, GaussianTableAgreesWithSimulation) {
    BrwModel bm(CountLaw::deterministic(2), IncrementLaw::normal(0.0, 1.0));
    const std::size_t n = 10, reps = 2000;
    auto table = bm.max_tail_table(n);
    std::vector<double> maxima;
    for (std::size_t r = 0; r < reps; ++r) maxima.push_back(max_trait(simulate(bm, env, 0.0, n, replicate_seed(11, r)), n));
    for (double s : {8.0, 9.5, 11.0, 12.5}) {
        double hits = 0;
        for (double m : maxima) hits += m >= s;
        const double p = hits / reps, se = std::sqrt(std::max(p * (1 - p), 1e-4) / reps);
        // prob() reads the grid point at or below s; compare against the bracketing cell as well.
        EXPECT_LE(std::abs(table.prob(n, s) - p), 4 * se + std::abs(table.prob(n, s) - table.prob(n, s + table.h))) << s;
    }
}

TEST(MaxTail, MedianSpeedAtTwenty) {
    BrwModel bm(CountLaw::deterministic(2), IncrementLaw::normal(0.0, 1.0));
    auto table = bm.max_tail_table(20);
    double s = 0.0;
    while (table.prob(20, s) > 0.5) s += table.h;
    EXPECT_NEAR(s / 20.0, 0.994, 0.01);
    EXPECT_LT(s / 20.0, bm.speed());
}

TEST(Coupling, BpveIsDominated) {
    KimmelModel km(1.4);
    const auto tube = TubeSpec::half_line(1.0, 11);
    for (std::size_t r = 0; r < 50; ++r) {
        auto rec = bpve_couple(km, env, 1.0, tube, replicate_seed(4, r));
        for (std::size_t i = 0; i < rec.in_tube.size(); ++i) {
            EXPECT_LE(rec.bpve[i], rec.selected[i]);
            EXPECT_LE(rec.selected[i], rec.in_tube[i]);
        }
    }
}

TEST(Coupling, RejectsGaps) {
    KimmelModel km(1.4);
    TubeSpec t{{0, 2}, {TraitSet::at_least(1), TraitSet::at_least(1)}};
    EXPECT_THROW(bpve_couple(km, env, 1.0, t, 1), Unsupported);
}

TEST(LocalDensity, ExactPruningKeepsCounts) {
    KimmelModel km(1.4);
    const std::vector<std::size_t> ladder{4, 8, 12};
    auto a_n = [](std::size_t) { return 3.0; };
    DensityOptions o;
    o.bootstrap = 20;
    auto res = local_density_experiment(km, env, 1.0, a_n, ladder, 40, 8, o);
    ASSERT_EQ(res.records.size(), 40 * ladder.size());
    for (const auto& rec : res.records) {
        auto t = simulate(km, env, 1.0, rec.n, replicate_seed(8, rec.replicate));
        EXPECT_DOUBLE_EQ(rec.count, static_cast<double>(t.census(rec.n, TraitSet::at_least(a_n(rec.n)))));
    }
    EXPECT_EQ(res.max_pruned_mass, 0.0);
    EXPECT_GT(res.survivors, 0u);
}

TEST(LocalDensity, NeedsMonotoneModel) {
    auto fm = two_type_m2();
    EXPECT_THROW(local_density_experiment(*fm, env, 0.0, [](std::size_t) { return 1.0; }, {2}, 2, 1), InvalidArgument);
}

TEST(Extremes, NoPruningMatchesFullTree) {
    BrwModel bm(CountLaw::deterministic(2), IncrementLaw::rademacher());
    ExtremeOptions o;
    o.prune_epsilon = 0.0;
    auto res = extremal_particle_experiment(bm, env, 0.0, {6, 10}, 20, 3, o);
    for (const auto& rec : res.records) {
        auto t = simulate(bm, env, 0.0, rec.n, replicate_seed(3, rec.replicate));
        ASSERT_TRUE(rec.max);
        EXPECT_EQ(*rec.max, max_trait(t, rec.n));
        EXPECT_EQ(rec.miss_bound, 0.0);
    }
}

TEST(Extremes, PruningOnlyLowersTheMaximum) {
    BrwModel bm(CountLaw::deterministic(2), IncrementLaw::normal(0.0, 1.0));
    auto res = extremal_particle_experiment(bm, env, 0.0, {14}, 40, 5);
    std::size_t equal = 0;
    for (const auto& rec : res.records) {
        const double full = max_trait(simulate(bm, env, 0.0, 14, replicate_seed(5, rec.replicate)), 14);
        if (!rec.max) continue;  // every newborn pruned: only allowed when the full max misses the target
        EXPECT_LE(*rec.max, full);
        equal += *rec.max == full;
    }
    EXPECT_GE(static_cast<double>(equal) / 40.0, 1.0 - res.mean_miss_bound - 0.15);
}
