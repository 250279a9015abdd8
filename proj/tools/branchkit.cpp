// branchkit command-line runner.
//
//   branchkit <experiment> [--config FILE] [flags]   run and write records.ndjson, summary.csv, manifest.json
//   branchkit validate --config FILE                 print the normalized config or the list of violations
//
// Flags given on the command line override the config file.  Exit status:
// 0 success, 1 usage, 2 invalid config, 3 runtime failure.  Failures print a
// JSON error record on stderr (and to <out>/error.json once the output
// directory is known).

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "branchkit/branchkit.hpp"

namespace {

using branchkit::json;

struct Flags {
    std::string config, out, model, env, f, fn, ladder, a_n;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed, cap, replicates, n, n_max;
    std::optional<unsigned> workers;
    std::optional<double> lambda, x0, speed;
    bool variational = false, dump_tree = false;
};

json error_record(const std::string& kind, const std::string& message, const std::vector<std::string>& issues = {}) {
    json e{{"status", "error"}, {"kind", kind}, {"message", message}};
    if (!issues.empty()) e["issues"] = issues;
    return e;
}

int fail(const json& err, const std::string& out_dir, int code) {
    std::cerr << err.dump() << "\n";
    if (!out_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(out_dir, ec);
        std::ofstream(std::filesystem::path(out_dir) / "error.json") << err.dump(2) << "\n";
    }
    return code;
}

json parse_json_arg(const std::string& what, const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw branchkit::ConfigError({what + ": not valid JSON: " + e.what()});
    }
}

/// Config file contents overlaid with command-line flags.
json assemble(const std::string& experiment, const Flags& fl) {
    json raw = json::object();
    if (!fl.config.empty()) {
        std::ifstream in(fl.config);
        if (!in) throw branchkit::ConfigError({"--config: cannot read " + fl.config});
        std::stringstream ss;
        ss << in.rdbuf();
        raw = parse_json_arg("--config", ss.str());
        if (!raw.is_object()) throw branchkit::ConfigError({"(root): expected a JSON object"});
    }
    if (!experiment.empty()) {
        if (raw.contains("experiment") && raw["experiment"] != experiment)
            throw branchkit::ConfigError({"experiment: config says " + raw["experiment"].dump() +
                                          " but the subcommand is " + experiment});
        raw["experiment"] = experiment;
    }
    if (!fl.model.empty()) raw["model"] = fl.model.front() == '{' ? parse_json_arg("--model", fl.model) : json(fl.model);
    if (fl.lambda) {
        if (!raw.contains("model")) raw["model"] = "kimmel";
        if (raw["model"].is_string()) raw["model"] = json{{"name", raw["model"]}};
        raw["model"]["lambda"] = *fl.lambda;
    }
    if (!fl.env.empty()) raw["environment"] = parse_json_arg("--env", fl.env);
    if (fl.seed) raw["seed"] = *fl.seed;
    if (fl.cap) raw["cap"] = *fl.cap;
    if (fl.replicates) raw["replicates"] = *fl.replicates;
    if (fl.x0) raw["x0"] = *fl.x0;
    if (fl.n) raw["n"] = *fl.n;
    if (fl.n_max) raw["n_max"] = *fl.n_max;
    if (fl.variational) raw["variational"] = true;
    if (fl.dump_tree) raw["dump_tree"] = true;
    if (fl.speed) raw["speed"] = *fl.speed;
    if (!fl.ladder.empty()) raw["ladder"] = fl.ladder;
    if (!fl.a_n.empty()) raw["a_n"] = fl.a_n;
    if (!fl.f.empty()) raw["f"] = fl.f.front() == '{' ? parse_json_arg("--f", fl.f) : json(fl.f);
    if (!fl.fn.empty()) raw["fn"] = fl.fn;
    for (const auto& kv : fl.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw branchkit::ConfigError({"--set: expected key=value, got " + kv});
        const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
        json v;
        try {
            v = json::parse(value);
        } catch (const json::parse_error&) {
            v = value;  // bare words are strings
        }
        raw[key] = v;
    }
    return raw;
}

unsigned resolve_workers(const Flags& fl) {
    if (fl.workers) return std::max(1u, *fl.workers);
    return branchkit::default_workers();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"branchkit: branching Markov chains in varying environment"};
    app.require_subcommand(1);
    Flags fl;

    auto add_globals = [&](CLI::App* sub) {
        sub->add_option("--config", fl.config, "JSON config file");
        sub->add_option("--seed", fl.seed, "master seed (u64)");
        sub->add_option("--out", fl.out, "output directory");
        sub->add_option("--workers", fl.workers, "worker threads (default: BRANCHKIT_WORKERS or 1)");
        sub->add_option("--cap", fl.cap, "maximum individuals per generation");
        sub->add_option("--model", fl.model, "builtin name or JSON model descriptor");
        sub->add_option("--lambda", fl.lambda, "kimmel parasite rate");
        sub->add_option("--env", fl.env, "JSON environment descriptor");
        sub->add_option("--x0", fl.x0, "initial trait");
        sub->add_option("--replicates", fl.replicates, "number of replicates");
        sub->add_option("--set", fl.sets, "extra parameter as key=json");
    };

    std::vector<std::pair<std::string, CLI::App*>> subs;
    auto sub = [&](const std::string& name, const std::string& help) {
        auto* s = app.add_subcommand(name, help);
        add_globals(s);
        subs.emplace_back(name, s);
        return s;
    };
    sub("simulate", "simulate populations and report generation sizes")
        ->add_flag("--dump-tree", fl.dump_tree, "also write tree.ndjson");
    app.get_subcommand("simulate")->add_option("--n", fl.n, "generations");
    sub("check-m2o", "exact many-to-one check on a finite model")->add_option("--n", fl.n, "path length");
    auto* g = sub("growth", "growth rate by slope, eigenvalue and variational formula");
    g->add_option("--n-max", fl.n_max, "horizon of the slope fit");
    g->add_flag("--variational", fl.variational, "also solve the variational problem");
    auto* l = sub("lln", "law of large numbers for trait proportions");
    l->add_option("--f", fl.f, "test function: identity | {\"indicator\": [...]} | {\"at_least\": b}");
    l->add_option("--fn", fl.fn, "rescaling: id | affine(a,b) | log-over-n");
    l->add_option("--ladder", fl.ladder, "generations, e.g. 4,8,12");
    auto* d = sub("local-density", "growth of the number of individuals above a_n");
    d->add_option("--a-n", fl.a_n, "threshold: const:c | linear:a");
    d->add_option("--ladder", fl.ladder, "generations");
    auto* x = sub("extremes", "position of the extremal particle");
    x->add_option("--ladder", fl.ladder, "generations");
    x->add_option("--speed", fl.speed, "reference speed (brw: computed)");
    sub("probe-mg", "evaluate the mean growth-rate condition along a curve");
    sub("coupling", "coupled tube count vs. branching process in varying environment");
    auto* ln = sub("lineage", "typical-lineage occupation vs. the variational maximizer");
    ln->add_option("--ladder", fl.ladder, "generations");
    auto* v = app.add_subcommand("validate", "validate a config and print its normalized form");
    add_globals(v);

    CLI11_PARSE(app, argc, argv);

    std::string experiment;
    for (auto& [name, s] : subs)
        if (s->parsed()) experiment = name;
    const bool validating = v->parsed();

    branchkit::RunConfig rc;
    try {
        rc = branchkit::validate_config(assemble(experiment, fl));
    } catch (const branchkit::ConfigError& e) {
        return fail(error_record("ConfigError", "invalid configuration", e.issues()), validating ? "" : fl.out, 2);
    } catch (const branchkit::Error& e) {
        return fail(error_record("ConfigError", e.what(), {e.what()}), validating ? "" : fl.out, 2);
    }
    if (validating) {
        std::cout << json{{"status", "ok"}, {"config_digest", rc.digest()}, {"config", rc.normalized}}.dump(2) << "\n";
        return 0;
    }

    const std::string out = fl.out.empty() ? "branchkit-out/" + rc.experiment + "-" + rc.digest().substr(0, 8) : fl.out;
    try {
        auto manifest = branchkit::run_to_directory(rc, out, resolve_workers(fl));
        std::cout << json{{"status", "ok"},
                          {"out", out},
                          {"config_digest", manifest["config_digest"]},
                          {"record_counts", manifest["record_counts"]},
                          {"warnings", manifest["warnings"]}}
                         .dump()
                  << "\n";
    } catch (const branchkit::Error& e) {
        return fail(error_record("RuntimeError", e.what()), out, 3);
    } catch (const std::exception& e) {
        return fail(error_record("InternalError", e.what()), out, 3);
    }
    return 0;
}
