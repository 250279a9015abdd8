#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "branchkit/branchkit.hpp"

using namespace branchkit;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code = -1;
    std::string out;
};

Result run_cli(const std::string& args) {
    const std::string cmd = std::string(BRANCHKIT_CLI) + " " + args + " 2>&1";
    Result r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    while (std::size_t k = std::fread(buf, 1, sizeof buf, p)) r.out.append(buf, k);
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    auto d = fs::temp_directory_path() / ("branchkit-test-" + std::to_string(::getpid())) / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

fs::path write_config(const fs::path& dir, const json& j) {
    auto p = dir / "config.json";
    std::ofstream(p) << j.dump(2);
    return p;
}

}  // namespace

TEST(Config, DefaultsAreFilledIn) {
    auto rc = validate_config(json{{"experiment", "check-m2o"}, {"model", "two-type-m2"}});
    EXPECT_EQ(rc.normalized["cap"], 10000000);
    EXPECT_EQ(rc.normalized["replicates"], 100);
    EXPECT_EQ(rc.normalized["params"]["n"], 3);
    EXPECT_EQ(rc.normalized["environment"]["kind"], "constant");
}

TEST(Config, DigestIgnoresKeyOrderAndSpelling) {
    auto a = validate_config(json::parse(R"({"experiment":"lln","model":"two-type-m2","ladder":"4,8,12"})"));
    auto b = validate_config(json::parse(R"({"params":{"ladder":[4,8,12]},"model":{"name":"two-type-m2"},"experiment":"lln"})"));
    EXPECT_EQ(a.digest(), b.digest());
    auto c = validate_config(json::parse(R"({"experiment":"lln","model":"two-type-m2","seed":2})"));
    EXPECT_NE(a.digest(), c.digest());
}

TEST(Config, ReportsEveryProblem) {
    try {
        validate_config(json::parse(R"({"experiment":"local-density","model":{"name":"kimmel","lambda":-1},"bogus":1})"));
        FAIL();
    } catch (const ConfigError& e) {
        std::string all;
        for (const auto& s : e.issues()) all += s + "\n";
        EXPECT_NE(all.find("lambda must be > 0"), std::string::npos) << all;
    }
}

TEST(Config, UnknownExperimentListsNames) {
    try {
        validate_config(json{{"experiment", "nope"}, {"model", "two-type-m2"}});
        FAIL();
    } catch (const ConfigError& e) {
        ASSERT_FALSE(e.issues().empty());
        for (const auto& name : experiment_names()) EXPECT_NE(e.issues()[0].find(name), std::string::npos);
    }
}

TEST(Config, RejectsBadShapes) {
    EXPECT_THROW(validate_config_text("[1,2]"), ConfigError);
    EXPECT_THROW(validate_config_text("{\"experiment\": "), ConfigError);
    EXPECT_THROW(validate_config(json{{"experiment", "lln"}, {"model", "two-type-m2"}, {"ladder", "8,4"}}), ConfigError);
    EXPECT_THROW(validate_config(json{{"experiment", "lln"}, {"model", "two-type-m2"}, {"x0", 0.5}}), ConfigError);
    EXPECT_THROW(validate_config(json{{"experiment", "extremes"}, {"model", "kimmel"}}), ConfigError);  // speed required
}

TEST(Cli, ValidatePrintsNormalizedConfig) {
    auto d = scratch("validate");
    auto r = run_cli("validate --config " + write_config(d, json{{"experiment", "growth"}, {"model", "two-type-m2"}}).string());
    ASSERT_EQ(r.code, 0) << r.out;
    auto j = json::parse(r.out);
    EXPECT_EQ(j["config"]["params"]["n_max"], 400);
}

TEST(Cli, NegativeLambdaIsAConfigError) {
    auto r = run_cli("local-density --lambda -1 --x0 1 --replicates 2 --out " + scratch("lambda").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("lambda must be > 0"), std::string::npos) << r.out;
}

TEST(Cli, MissingModelNamesTheField) {
    auto d = scratch("nomodel");
    auto r = run_cli("growth --out " + (d / "out").string());
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.out.find("model"), std::string::npos) << r.out;
    EXPECT_TRUE(fs::exists(d / "out" / "error.json"));
}

TEST(Cli, UnknownSubcommandIsUsageError) {
    auto r = run_cli("frobnicate");
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.code, 2);
}

TEST(Cli, RunsAreByteIdentical) {
    auto d = scratch("repeat");
    auto cfg = write_config(d, json{{"experiment", "lln"}, {"model", "two-type-m2"}, {"replicates", 30}, {"seed", 9}});
    auto a = run_cli("lln --config " + cfg.string() + " --out " + (d / "a").string());
    auto b = run_cli("lln --config " + cfg.string() + " --out " + (d / "b").string() + " --workers 4");
    ASSERT_EQ(a.code, 0) << a.out;
    ASSERT_EQ(b.code, 0) << b.out;
    EXPECT_EQ(slurp(d / "a" / "records.ndjson"), slurp(d / "b" / "records.ndjson"));
    EXPECT_EQ(slurp(d / "a" / "summary.csv"), slurp(d / "b" / "summary.csv"));
    auto m = json::parse(slurp(d / "a" / "manifest.json"));
    EXPECT_EQ(m["seed"], 9);
    EXPECT_EQ(m["config_digest"], validate_config(json::parse(slurp(cfg))).digest());
}

TEST(Cli, ManyToOneGapIsTiny) {
    auto d = scratch("m2o");
    auto r = run_cli("check-m2o --model two-type-m2 --n 3 --out " + d.string());
    ASSERT_EQ(r.code, 0) << r.out;
    const auto csv = slurp(d / "summary.csv");
    auto pos = csv.find("max_gap,");
    ASSERT_NE(pos, std::string::npos) << csv;
    const auto line = csv.substr(pos, csv.find('\n', pos) - pos);
    EXPECT_LE(std::stod(line.substr(line.rfind(',') + 1)), 1e-9) << line;
}

TEST(Cli, ConfigsDirectoryValidates) {
    std::size_t seen = 0;
    for (const auto& entry : fs::directory_iterator(BRANCHKIT_CONFIGS)) {
        if (entry.path().extension() != ".json") continue;
        ++seen;
        EXPECT_NO_THROW(validate_config_text(slurp(entry.path()))) << entry.path();
    }
    EXPECT_GT(seen, 0u);
}

TEST(Runner, RecordsCarryProvenance) {
    auto rc = validate_config(json{{"experiment", "simulate"}, {"model", "two-type-m2"}, {"replicates", 3}, {"n", 4}});
    auto out = run_experiment(rc, 1);
    ASSERT_FALSE(out.records.empty());
    for (const auto& rec : out.records) {
        EXPECT_EQ(rec["config_digest"], rc.digest());
        EXPECT_TRUE(rec.contains("replicate"));
        EXPECT_TRUE(rec.contains("seed"));
    }
    EXPECT_EQ(summary_csv(out.summary).rfind("metric,n,value\n", 0), 0u);
}
