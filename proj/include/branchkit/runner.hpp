#pragma once

// Experiment dispatch and result files.  Records are collected per replicate
// slot and emitted by one writer in (replicate, ladder index) order, so the
// output does not depend on the worker count.

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "deviations.hpp"
#include "growth.hpp"
#include "kernels.hpp"
#include "lln.hpp"
#include "simulate.hpp"

namespace branchkit {

/// summary.csv is long format: metric,n,value (n empty for run-level values).
struct SummaryRow {
    std::string metric;
    std::optional<std::size_t> n;
    json value;
};

struct RunOutput {
    std::vector<json> records;
    std::vector<SummaryRow> summary;
    std::vector<std::string> warnings;
    std::vector<json> tree;  // node records, only when a tree dump was requested
};

namespace detail {

class Emitter {
public:
    Emitter(const RunConfig& rc, RunOutput& out) : seed_(rc.seed), digest_(rc.digest()), out_(out) {}

    void record(std::size_t replicate, json fields) {
        fields["seed"] = seed_;
        fields["replicate"] = replicate;
        fields["config_digest"] = digest_;
        out_.records.push_back(std::move(fields));
    }
    void summary(std::string metric, json value) { out_.summary.push_back({std::move(metric), std::nullopt, std::move(value)}); }
    void summary(std::string metric, std::size_t n, json value) { out_.summary.push_back({std::move(metric), n, std::move(value)}); }
    void warn(const std::string& w) {
        if (std::find(out_.warnings.begin(), out_.warnings.end(), w) == out_.warnings.end()) out_.warnings.push_back(w);
    }

private:
    std::uint64_t seed_;
    std::string digest_;
    RunOutput& out_;
};

inline json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json vec(const Eigen::VectorXd& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

template <class T>
std::vector<std::size_t> sizes(const std::vector<T>& v) {
    std::vector<std::size_t> out;
    for (auto x : v) out.push_back(static_cast<std::size_t>(x));
    return out;
}

/// The model itself when finite, otherwise its truncation at `truncation`.
inline std::shared_ptr<const FiniteModel> finite_view(const RunConfig& rc, Emitter& em) {
    if (auto fm = std::dynamic_pointer_cast<const FiniteModel>(rc.model)) return fm;
    const auto c = rc.params.at("truncation").get<std::size_t>();
    em.warn("TruncatedTraitSpace: exact computations use the projection capped at " + std::to_string(c));
    return rc.model->finite_projection(rc.env.alphabet(), c);
}

inline SimOptions sim_options(const RunConfig& rc) {
    SimOptions s;
    s.cap = static_cast<std::size_t>(rc.cap);
    return s;
}

inline std::string label_string(const std::vector<std::uint32_t>& label) {
    std::string s;
    for (auto c : label) s += (s.empty() ? "" : ".") + std::to_string(c);
    return s.empty() ? "root" : s;
}

// ---------------------------------------------------------------- experiments

inline void run_simulate(const RunConfig& rc, unsigned workers, Emitter& em, RunOutput& out) {
    const auto n = rc.params.at("n").get<std::size_t>();
    const bool dump = rc.params.at("dump_tree").get<bool>();
    const std::size_t reps = rc.replicates;
    struct Gen {
        double size = 0, min = NAN, max = NAN, mean = NAN;
    };
    std::vector<std::vector<Gen>> runs(reps, std::vector<Gen>(n + 1));
    std::vector<std::vector<json>> trees(dump ? reps : 0);
    auto stats = [](auto&& nodes) {
        Gen g;
        g.size = static_cast<double>(nodes.size());
        if (nodes.empty()) return g;
        g.min = g.max = nodes.begin()->trait;
        double s = 0.0;
        for (const auto& u : nodes) {
            g.min = std::min(g.min, u.trait);
            g.max = std::max(g.max, u.trait);
            s += u.trait;
        }
        g.mean = s / g.size;
        return g;
    };
    const SimOptions sim = sim_options(rc);
    parallel_for(reps, workers, [&](std::size_t r) {
        const auto seed = replicate_seed(rc.seed, r);
        if (dump) {
            auto tree = simulate(*rc.model, rc.env, rc.x0, n, seed, sim);
            for (std::size_t g = 0; g <= n; ++g) runs[r][g] = stats(tree.generation(g));
            for (std::size_t i = 0; i < tree.nodes().size(); ++i) {
                const Node& u = tree.nodes()[i];
                trees[r].push_back(json{{"replicate", r},
                                        {"label", label_string(tree.label(i))},
                                        {"gen", tree.generation_of(i)},
                                        {"parent", u.parent == no_node ? json(nullptr) : json(label_string(tree.label(u.parent)))},
                                        {"trait", u.trait},
                                        {"brood", u.brood}});
            }
        } else {
            simulate_streaming(*rc.model, rc.env, rc.x0, n, seed, sim, [&](std::size_t g, const std::vector<Node>& gen) {
                runs[r][g] = stats(gen);
                return true;
            });
        }
    });
    std::vector<double> mean_size(n + 1, 0.0), alive(n + 1, 0.0);
    for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t g = 0; g <= n; ++g) {
            const Gen& s = runs[r][g];
            em.record(r, json{{"n", g}, {"size", s.size}, {"min_trait", s.min}, {"max_trait", s.max}, {"mean_trait", s.mean}});
            mean_size[g] += s.size / static_cast<double>(reps);
            alive[g] += (s.size > 0 ? 1.0 : 0.0) / static_cast<double>(reps);
        }
    for (auto& t : trees)
        for (auto& node : t) out.tree.push_back(std::move(node));
    for (std::size_t g = 0; g <= n; ++g) {
        em.summary("mean_size", g, mean_size[g]);
        em.summary("survival_fraction", g, alive[g]);
        em.summary("exact_mean_size", g, opt(exact_total_mean(*rc.model, rc.env, rc.x0, g)));
    }
}

inline void run_check_m2o(const RunConfig& rc, Emitter& em) {
    auto fm = finite_view(rc, em);
    const auto n = rc.params.at("n").get<std::size_t>();
    const std::string kind = rc.params.at("functional");
    MeanSemigroup ms(fm, rc.env);
    const std::size_t x0 = fm->atom_index(rc.x0), d = fm->dim();
    double max_gap = 0.0;
    std::size_t checked = 0, budget = 0;
    auto emit = [&](const std::string& name, const PathFunctional& f, json extra) {
        auto rep = many_to_one_check(ms, x0, n, f);
        extra["functional"] = name;
        extra["n"] = n;
        extra["lhs"] = rep.lhs;
        extra["rhs"] = rep.rhs;
        extra["gap"] = rep.gap;
        extra["budget_used"] = rep.budget_used;
        em.record(0, std::move(extra));
        max_gap = std::max(max_gap, rep.gap);
        budget = rep.budget_used;
        ++checked;
    };
    if (kind == "indicators") {
        if (path_count(d, n) / d > 4096)
            throw BudgetExceeded("indicator functionals: " + std::to_string(d) + "^" + std::to_string(n) +
                                 " paths exceed 4096; use functional constant or trait-sum");
        enumerate_paths(d, x0, n, [&](const std::vector<std::size_t>& target) {
            json traits = json::array();
            for (auto i : target) traits.push_back(fm->atoms()[i]);
            emit("indicator", [target](const std::vector<std::size_t>& p) { return p == target ? 1.0 : 0.0; },
                 json{{"path", traits}});
        });
    } else if (kind == "constant") {
        emit("constant", [](const std::vector<std::size_t>&) { return 1.0; }, json::object());
    } else {
        const auto atoms = fm->atoms();
        emit("trait-sum",
             [atoms](const std::vector<std::size_t>& p) {
                 double s = 0.0;
                 for (auto i : p) s += atoms[i];
                 return s;
             },
             json::object());
    }
    em.summary("max_gap", max_gap);
    em.summary("functionals", checked);
    em.summary("budget_used", budget);
}

inline void run_growth(const RunConfig& rc, Emitter& em) {
    auto fm = finite_view(rc, em);
    const auto n_max = rc.params.at("n_max").get<std::size_t>();
    auto g = growth_report(fm, rc.env, fm->atom_index(rc.x0), n_max, rc.params.at("variational").get<bool>());
    json gaps = json::object();
    if (g.rho_eig) gaps["slope_eig"] = std::abs(g.rho_slope - *g.rho_eig);
    if (g.rho_var && g.rho_eig) gaps["var_eig"] = std::abs(*g.rho_var - *g.rho_eig);
    if (g.rho_var) gaps["slope_var"] = std::abs(g.rho_slope - *g.rho_var);
    json rec{{"n", n_max}, {"rho_slope", g.rho_slope}, {"rho_eig", opt(g.rho_eig)}, {"rho_var", opt(g.rho_var)}, {"gaps", gaps}};
    if (g.rho_var) {
        rec["maximizer"] = vec(g.maximizer);
        rec["near_optimal"] = g.near_optimal.size();
        rec["flagged"] = g.flagged;
        if (g.flagged) em.warn("VariationalMaximizerNotUnique: several near-optimal laws");
    }
    em.record(0, rec);
    em.summary("rho_slope", g.rho_slope);
    em.summary("rho_eig", opt(g.rho_eig));
    em.summary("rho_var", opt(g.rho_var));
    for (auto it = gaps.begin(); it != gaps.end(); ++it) em.summary("gap_" + it.key(), it.value());
}

inline std::function<double(double)> make_f(const json& f) {
    if (f.is_string()) return [](double x) { return x; };
    if (f.contains("at_least")) {
        const double b = f["at_least"];
        return [b](double x) { return x >= b ? 1.0 : 0.0; };
    }
    const auto set = f["indicator"].get<std::vector<double>>();
    return [set](double x) { return std::find(set.begin(), set.end(), x) != set.end() ? 1.0 : 0.0; };
}

inline TraitMap make_fn(const json& fn) {
    if (fn == "id") return [](std::size_t, double x) { return x; };
    if (fn == "log-over-n")
        return [](std::size_t n, double x) { return n == 0 ? 0.0 : std::log(x) / static_cast<double>(n); };
    const double a = fn["affine"][0], b = fn["affine"][1];
    // (x - a n) / (b sqrt n): centring and diffusive scaling of positions.
    return [a, b](std::size_t n, double x) {
        const double nd = static_cast<double>(std::max<std::size_t>(n, 1));
        return (x - a * nd) / (b * std::sqrt(nd));
    };
}

inline void run_lln(const RunConfig& rc, unsigned workers, Emitter& em) {
    auto ladder = sizes(rc.params.at("ladder").get<std::vector<std::uint64_t>>());
    auto res = lln_experiment(*rc.model, rc.env, rc.x0, make_f(rc.params.at("f")), make_fn(rc.params.at("fn")), ladder,
                              rc.replicates, rc.seed, sim_options(rc), workers);
    for (const auto& r : res.records)
        em.record(r.replicate, json{{"n", r.n},
                                    {"z", r.z},
                                    {"fz", r.fz},
                                    {"discrepancy", r.discrepancy},
                                    {"gap", opt(r.gap)},
                                    {"in_t", r.in_t}});
    for (std::size_t k = 0; k < res.ladder.size(); ++k) {
        em.summary("mu", res.ladder[k], res.mu[k]);
        em.summary("m", res.ladder[k], res.m[k]);
        em.summary("mean_square", res.ladder[k], res.mean_square[k]);
        em.summary("median_gap", res.ladder[k], res.median_gap[k]);
    }
    em.summary("in_t", res.in_t);
    em.summary("exact_reference", res.exact_reference);
    if (!res.tail_max_gap.empty()) em.summary("median_tail_max_gap", median(res.tail_max_gap));
    if (!res.exact_reference) em.warn("ReferenceFromMonteCarlo: mu_n and m_n estimated from an independent batch");
}

inline void run_local_density(const RunConfig& rc, unsigned workers, Emitter& em) {
    auto ladder = sizes(rc.params.at("ladder").get<std::vector<std::uint64_t>>());
    const json& a = rc.params.at("a_n");
    const double x0 = rc.x0;
    std::function<double(std::size_t)> a_n;
    if (a.contains("const")) {
        const double c = a["const"];
        a_n = [c](std::size_t) { return c; };
    } else {
        const double s = a["linear"];
        a_n = [s, x0](std::size_t n) { return x0 + s * static_cast<double>(n); };
    }
    DensityOptions o;
    o.prune_epsilon = rc.params.at("prune_epsilon");
    o.workers = workers;
    o.sim = sim_options(rc);
    o.bootstrap = rc.params.at("bootstrap");
    auto res = local_density_experiment(*rc.model, rc.env, rc.x0, a_n, ladder, rc.replicates, rc.seed, o);
    for (const auto& r : res.records)
        em.record(r.replicate, json{{"n", r.n},
                                    {"count", r.count},
                                    {"log_count_over_n", opt(r.log_count_over_n)},
                                    {"markov_bound", opt(r.markov_bound)},
                                    {"survived", r.survived}});
    for (std::size_t k = 0; k < res.ladder.size(); ++k) {
        em.summary("target", res.ladder[k], a_n(res.ladder[k]));
        em.summary("markov_bound", res.ladder[k], opt(res.markov_bound[k]));
        em.summary("markov_exact", res.ladder[k], static_cast<bool>(res.markov_exact[k]));
    }
    em.summary("median_slope", res.median_slope);
    em.summary("slope_se", res.slope_se);
    em.summary("survivors", res.survivors);
    em.summary("max_pruned_mass", res.max_pruned_mass);
    em.summary("markov_exceed_fraction", res.markov_exceed_fraction);
    if (res.max_pruned_mass > 0.0)
        em.warn("Pruned: up to " + json(res.max_pruned_mass).dump() + " expected target individuals dropped per replicate");
}

inline void run_extremes(const RunConfig& rc, unsigned workers, Emitter& em) {
    auto ladder = sizes(rc.params.at("ladder").get<std::vector<std::uint64_t>>());
    double speed = 0.0;
    if (rc.params.contains("speed")) speed = rc.params["speed"];
    else speed = dynamic_cast<const BrwModel&>(*rc.model).speed();
    ExtremeOptions o;
    o.threshold_fraction = rc.params.at("threshold_fraction");
    o.prune_epsilon = rc.params.at("prune_epsilon");
    o.excess = rc.params.at("excess");
    o.workers = workers;
    o.sim = sim_options(rc);
    auto res = extremal_particle_experiment(*rc.model, rc.env, rc.x0, speed, ladder, rc.replicates, rc.seed, o);
    for (const auto& r : res.records)
        em.record(r.replicate, json{{"n", r.n},
                                    {"max", opt(r.max)},
                                    {"max_over_n", r.max ? json((*r.max - rc.x0) / static_cast<double>(r.n)) : json(nullptr)},
                                    {"below_threshold", r.below_threshold},
                                    {"miss_bound", r.miss_bound}});
    for (std::size_t k = 0; k < res.ladder.size(); ++k) {
        em.summary("median_max_over_n", res.ladder[k], res.median_max_over_n[k]);
        em.summary("markov_bound", res.ladder[k], res.markov_bound[k]);
        em.summary("exceed_fraction", res.ladder[k], res.exceed_fraction[k]);
    }
    em.summary("speed", speed);
    em.summary("flagged", res.flagged);
    em.summary("max_miss_bound", res.max_miss_bound);
    em.summary("mean_miss_bound", res.mean_miss_bound);
    if (res.flagged > 0) em.warn("BelowPruningThreshold: " + std::to_string(res.flagged) + " maxima fell under the pruning threshold");
}

inline void run_probe_mg(const RunConfig& rc, Emitter& em) {
    const json& p = rc.params;
    MgCurve c;
    c.p = p.at("p");
    c.q = p.at("q");
    c.blocks = p.at("blocks");
    const double b0 = p["b"]["linear"][0], bs = p["b"]["linear"][1];
    const double n0 = p["b_n"]["linear"][0], ns = p["b_n"]["linear"][1];
    const double phi = p.at("phi");
    const std::size_t pp = c.p, qq = c.q;
    c.b = [=](std::size_t i) { return b0 + bs * static_cast<double>(i * pp); };
    c.b_n = [=](std::size_t j, std::size_t) { return n0 + ns * static_cast<double>(j * qq); };
    c.phi = [=](std::size_t n) { return static_cast<std::size_t>(std::floor(phi * static_cast<double>(n) / static_cast<double>(pp))); };
    c.horizons = sizes(p.at("horizons").get<std::vector<std::uint64_t>>());
    std::optional<double> alpha;
    if (p.contains("alpha")) alpha = p["alpha"].get<double>();
    auto rep = assumption_mg_probe(*rc.model, rc.env, c, p.at("rho"), p.at("epsilon"), alpha);
    for (std::size_t i = 0; i < rep.block_mass.size(); ++i)
        em.record(0, json{{"kind", "block"}, {"i", i}, {"block_mass", rep.block_mass[i]}});
    for (std::size_t k = 0; k < c.horizons.size(); ++k) {
        json r{{"kind", "horizon"}, {"n", c.horizons[k]}, {"averaged_log", rep.averaged_log[k]}};
        if (rep.averaged_log_q) r["averaged_log_q"] = (*rep.averaged_log_q)[k];
        em.record(0, r);
        em.summary("averaged_log", c.horizons[k], rep.averaged_log[k]);
    }
    em.summary("block_liminf", rep.block_liminf);
    em.summary("blocks_supercritical", rep.blocks_supercritical);
    em.summary("averaged_liminf", rep.averaged_liminf);
    em.summary("rate_certified", rep.rate_certified);
    em.summary("certified", rep.certified);
    em.summary("exact", rep.exact);
    if (rep.ld_certified) em.summary("ld_certified", *rep.ld_certified);
    if (rep.note) em.warn("SignConvention: " + *rep.note);
}

inline void run_coupling(const RunConfig& rc, unsigned workers, Emitter& em) {
    const auto steps = rc.params.at("steps").get<std::size_t>();
    const auto tube = TubeSpec::half_line(rc.params.at("b"), steps + 1);
    std::vector<CouplingRecord> recs(rc.replicates);
    const SimOptions sim = sim_options(rc);
    parallel_for(recs.size(), workers, [&](std::size_t r) {
        recs[r] = bpve_couple(*rc.model, rc.env, rc.x0, tube, replicate_seed(rc.seed, r), sim);
    });
    std::size_t violations = 0, checks = 0;
    for (std::size_t r = 0; r < recs.size(); ++r) {
        for (std::size_t i = 0; i < recs[r].in_tube.size(); ++i) {
            const bool dominated = recs[r].in_tube[i] >= recs[r].bpve[i];
            violations += dominated ? 0 : 1;
            ++checks;
            em.record(r, json{{"n", tube.checkpoints[i]},
                              {"in_tube", recs[r].in_tube[i]},
                              {"selected", recs[r].selected[i]},
                              {"bpve", recs[r].bpve[i]},
                              {"dominated", dominated}});
        }
        if (recs[r].warning) em.warn(*recs[r].warning);
    }
    if (!recs.empty())
        for (std::size_t i = 0; i < recs[0].tube_means.size(); ++i) em.summary("tube_mean", i, recs[0].tube_means[i]);
    em.summary("checks", checks);
    em.summary("violations", violations);
}

inline void run_lineage(const RunConfig& rc, unsigned workers, Emitter& em) {
    auto fm = std::dynamic_pointer_cast<const FiniteModel>(rc.model);
    if (!fm) throw Unsupported(rc.model->name() + ": the lineage experiment needs a finite model");
    auto ladder = sizes(rc.params.at("ladder").get<std::vector<std::uint64_t>>());
    auto res = typical_lineage_experiment(fm, rc.env, fm->atom_index(rc.x0), ladder, rc.replicates, rc.seed, workers,
                                          rc.params.at("delta"));
    for (const auto& r : res.records) em.record(r.replicate, json{{"n", r.n}, {"distance", r.distance}});
    for (std::size_t k = 0; k < res.ladder.size(); ++k) em.summary("median_distance", res.ladder[k], res.median_distance[k]);
    em.summary("accepted", res.accepted);
    em.summary("attempted", res.attempted);
    em.summary("rho_slope", res.rho_slope);
    em.summary("maximizer", vec(res.maximizer));
    if (res.accepted < rc.replicates)
        em.warn("FewSurvivors: " + std::to_string(res.accepted) + " of " + std::to_string(rc.replicates) +
                " requested replicates accepted");
}

inline std::string iso_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline std::string csv_cell(const json& v) {
    if (v.is_string()) {
        std::string s = v.get<std::string>();
        if (s.find_first_of(",\"\n") == std::string::npos) return s;
        std::string q = "\"";
        for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
        return q + "\"";
    }
    if (v.is_null()) return "";
    const std::string s = v.dump();
    return s.find(',') == std::string::npos ? s : "\"" + s + "\"";
}

}  // namespace detail

/// Runs the configured experiment in memory.
inline RunOutput run_experiment(const RunConfig& rc, unsigned workers = 1) {
    RunOutput out;
    detail::Emitter em(rc, out);
    const std::string& e = rc.experiment;
    if (e == "simulate") detail::run_simulate(rc, workers, em, out);
    else if (e == "check-m2o") detail::run_check_m2o(rc, em);
    else if (e == "growth") detail::run_growth(rc, em);
    else if (e == "lln") detail::run_lln(rc, workers, em);
    else if (e == "local-density") detail::run_local_density(rc, workers, em);
    else if (e == "extremes") detail::run_extremes(rc, workers, em);
    else if (e == "probe-mg") detail::run_probe_mg(rc, em);
    else if (e == "coupling") detail::run_coupling(rc, workers, em);
    else if (e == "lineage") detail::run_lineage(rc, workers, em);
    else throw InvalidArgument("unknown experiment '" + e + "'");
    return out;
}

inline std::string records_ndjson(const std::vector<json>& records) {
    std::string s;
    for (const auto& r : records) s += r.dump() + "\n";
    return s;
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
    std::string s = "metric,n,value\n";
    for (const auto& r : rows)
        s += r.metric + "," + (r.n ? std::to_string(*r.n) : "") + "," + detail::csv_cell(r.value) + "\n";
    return s;
}

/// Runs and writes records.ndjson, summary.csv, manifest.json (and tree.ndjson on request) into `dir`.
inline json run_to_directory(const RunConfig& rc, const std::filesystem::path& dir, unsigned workers) {
    std::filesystem::create_directories(dir);
    const std::string started = detail::iso_now();
    RunOutput out = run_experiment(rc, workers);
    auto write = [&](const char* name, const std::string& text) {
        std::ofstream f(dir / name, std::ios::binary);
        f << text;
        if (!f) throw Error(std::string("cannot write ") + (dir / name).string());
    };
    write("records.ndjson", records_ndjson(out.records));
    write("summary.csv", summary_csv(out.summary));
    if (!out.tree.empty()) write("tree.ndjson", records_ndjson(out.tree));
    json manifest{{"config_digest", rc.digest()},
                  {"seed", rc.seed},
                  {"artifact_version", artifact_version},
                  {"experiment", rc.experiment},
                  {"started_at", started},
                  {"finished_at", detail::iso_now()},
                  {"workers", workers},
                  {"record_counts", {{"records.ndjson", out.records.size()}, {"summary.csv", out.summary.size()}}},
                  {"warnings", out.warnings},
                  {"config", rc.normalized}};
    if (!out.tree.empty()) manifest["record_counts"]["tree.ndjson"] = out.tree.size();
    write("manifest.json", manifest.dump(2) + "\n");
    return manifest;
}

}  // namespace branchkit
