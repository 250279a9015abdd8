#include <gtest/gtest.h>

#include "branchkit/env.hpp"

using namespace branchkit;

namespace {

std::vector<EnvironmentToken> two_tokens() { return {{"dry", {{"lambda", 1.2}}}, {"wet", {{"lambda", 2.0}}}}; }

}  // namespace

TEST(Environment, ShiftComposes) {
    for (const auto& env : {EnvironmentSequence::periodic(two_tokens(), {0, 0, 1}),
                            EnvironmentSequence::explicit_list(two_tokens(), {1, 0, 0, 1, 1, 0}),
                            EnvironmentSequence::iid(two_tokens(), 99)}) {
        const auto a = env.shift(2).shift(3), b = env.shift(5);
        for (std::size_t i = 0; i < 100; ++i) {
            EXPECT_EQ(a.token_at(i).id, b.token_at(i).id);
            EXPECT_EQ(a.token_at(i).id, env.token_at(i + 5).id);
        }
    }
}

TEST(Environment, PeriodicCycles) {
    auto env = EnvironmentSequence::periodic(two_tokens(), {0, 1, 1});
    EXPECT_EQ(env.period(), 3u);
    EXPECT_EQ(env.token_at(0).id, "dry");
    EXPECT_EQ(env.token_at(4).id, "wet");
    EXPECT_EQ(env.token_at(6).id, "dry");
    EXPECT_DOUBLE_EQ(env.token_at(1).param("lambda", 0), 2.0);
}

TEST(Environment, ExplicitListHoldsLastToken) {
    auto env = EnvironmentSequence::explicit_list(two_tokens(), {0, 1});
    EXPECT_EQ(env.token_at(1).id, "wet");
    EXPECT_EQ(env.token_at(50).id, "wet");
    EXPECT_FALSE(env.period().has_value());
    EXPECT_EQ(env.shift(1).period(), 1u);
}

TEST(Environment, IidSeedsDiffer) {
    int differing = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        auto a = EnvironmentSequence::iid(two_tokens(), 2 * s), b = EnvironmentSequence::iid(two_tokens(), 2 * s + 1);
        bool differ = false;
        for (std::size_t i = 0; i < 100 && !differ; ++i) differ = a.index_at(i) != b.index_at(i);
        differing += differ;
    }
    EXPECT_GE(differing, 99);
}

TEST(Environment, IidWeightsRespected) {
    auto env = EnvironmentSequence::iid(two_tokens(), 7, {0.2, 0.8});
    double wet = 0;
    for (std::size_t i = 0; i < 20000; ++i) wet += env.index_at(i) == 1;
    EXPECT_NEAR(wet / 20000, 0.8, 0.015);
    EXPECT_FALSE(env.period().has_value());
}

TEST(Environment, RejectsBadInput) {
    EXPECT_THROW(EnvironmentSequence::periodic({}), InvalidArgument);
    EXPECT_THROW(EnvironmentSequence::periodic(two_tokens(), {0, 2}), InvalidArgument);
    EXPECT_THROW(EnvironmentSequence::periodic({{"a", {}}, {"a", {}}}), InvalidArgument);
    EXPECT_THROW(EnvironmentSequence::iid(two_tokens(), 1, {1.0}), InvalidArgument);
}
