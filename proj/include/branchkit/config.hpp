#pragma once

// Run configuration: schema validation with defaults, a canonical (normalized)
// JSON form, and construction of the model and environment it describes.
//
// Accepted input is lenient about shorthand ("model": "kimmel", {"poisson": 1.5},
// experiment parameters at top level); the normalized form is not, and it is the
// normalized form that gets digested.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "builtin_models.hpp"
#include "env.hpp"
#include "errors.hpp"
#include "finite_model.hpp"

namespace branchkit {

using json = nlohmann::json;

inline constexpr const char* artifact_version = "0.4.0";
inline constexpr std::uint64_t default_cap = 10'000'000;
inline constexpr std::uint64_t default_replicates = 100;

inline const std::vector<std::string>& experiment_names() {
    static const std::vector<std::string> names{"simulate", "check-m2o", "growth",   "lln",    "local-density",
                                                "extremes", "probe-mg",  "coupling", "lineage"};
    return names;
}

/// Schema violations, one entry per problem, each prefixed with its field path.
class ConfigError : public InvalidArgument {
public:
    explicit ConfigError(std::vector<std::string> issues)
        : InvalidArgument(join(issues)), issues_(std::move(issues)) {}
    const std::vector<std::string>& issues() const noexcept { return issues_; }

private:
    static std::string join(const std::vector<std::string>& v) {
        std::string s;
        for (const auto& i : v) s += (s.empty() ? "" : "; ") + i;
        return s;
    }
    std::vector<std::string> issues_;
};

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& text) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    return s;
}

namespace detail {

class Schema {
public:
    std::vector<std::string> issues;

    void fail(const std::string& path, const std::string& msg) { issues.push_back(path + ": " + msg); }

    static std::string at(const std::string& base, const std::string& key) {
        return base.empty() ? key : base + "." + key;
    }
    static std::string at(const std::string& base, std::size_t i) { return base + "[" + std::to_string(i) + "]"; }

    std::optional<double> number(const json& v, const std::string& path) {
        if (!v.is_number()) {
            fail(path, "expected a number");
            return std::nullopt;
        }
        const double x = v.get<double>();
        if (!std::isfinite(x)) {
            fail(path, "must be finite");
            return std::nullopt;
        }
        return x;
    }

    std::optional<std::uint64_t> uint(const json& v, const std::string& path) {
        if (v.is_number_unsigned()) return v.get<std::uint64_t>();
        if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
        if (v.is_number_float()) {
            const double x = v.get<double>();
            if (x >= 0.0 && x == std::floor(x) && x < 1.8446744073709552e19) return static_cast<std::uint64_t>(x);
        }
        if (v.is_string()) {
            try {
                std::size_t used = 0;
                const auto s = v.get<std::string>();
                const auto x = std::stoull(s, &used, 0);
                if (used == s.size() && !s.empty() && s[0] != '-') return x;
            } catch (...) {
            }
        }
        fail(path, "expected a non-negative integer");
        return std::nullopt;
    }

    std::optional<bool> boolean(const json& v, const std::string& path) {
        if (!v.is_boolean()) {
            fail(path, "expected true or false");
            return std::nullopt;
        }
        return v.get<bool>();
    }

    std::optional<std::vector<double>> numbers(const json& v, const std::string& path) {
        if (!v.is_array()) {
            fail(path, "expected an array of numbers");
            return std::nullopt;
        }
        std::vector<double> out;
        bool ok = true;
        for (std::size_t i = 0; i < v.size(); ++i) {
            auto x = number(v[i], at(path, i));
            ok = ok && x.has_value();
            if (x) out.push_back(*x);
        }
        return ok ? std::optional(out) : std::nullopt;
    }

    /// Ladder of generations: array of integers or a "4,8,12" string; sorted, no duplicates.
    std::optional<std::vector<std::uint64_t>> ladder(const json& v, const std::string& path, std::uint64_t min_value = 0) {
        json arr = v;
        if (v.is_string()) {
            arr = json::array();
            std::string s = v.get<std::string>(), cur;
            for (char c : s + ",") {
                if (c == ',') {
                    if (!cur.empty()) arr.push_back(cur);
                    cur.clear();
                } else if (c != ' ') {
                    cur += c;
                }
            }
        }
        if (!arr.is_array() || arr.empty()) {
            fail(path, "expected a non-empty list of generations");
            return std::nullopt;
        }
        std::vector<std::uint64_t> out;
        bool ok = true;
        for (std::size_t i = 0; i < arr.size(); ++i) {
            auto x = uint(arr[i], at(path, i));
            if (x && *x < min_value) {
                fail(at(path, i), "must be >= " + std::to_string(min_value));
                x.reset();
            }
            ok = ok && x.has_value();
            if (x) out.push_back(*x);
        }
        if (!ok) return std::nullopt;
        for (std::size_t i = 1; i < out.size(); ++i)
            if (out[i] <= out[i - 1]) {
                fail(path, "must be strictly increasing");
                return std::nullopt;
            }
        return out;
    }

    std::optional<std::vector<std::vector<double>>> matrix(const json& v, const std::string& path) {
        if (!v.is_array() || v.empty()) {
            fail(path, "expected a non-empty matrix");
            return std::nullopt;
        }
        std::vector<std::vector<double>> out;
        for (std::size_t i = 0; i < v.size(); ++i) {
            auto row = numbers(v[i], at(path, i));
            if (!row) return std::nullopt;
            out.push_back(*row);
        }
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (out[i].size() != out.size()) {
                fail(at(path, i), "matrix must be square");
                return std::nullopt;
            }
            double s = 0.0;
            for (double p : out[i]) {
                if (p < 0.0) {
                    fail(at(path, i), "entries must be >= 0");
                    return std::nullopt;
                }
                s += p;
            }
            if (std::abs(s - 1.0) > 1e-9) {
                fail(at(path, i), "row must sum to 1");
                return std::nullopt;
            }
        }
        return out;
    }

    /// Checks that `obj` only has the listed keys.
    void only(const json& obj, const std::string& path, std::initializer_list<const char*> keys) {
        for (auto it = obj.begin(); it != obj.end(); ++it) {
            bool known = false;
            for (const char* k : keys) known = known || it.key() == k;
            if (!known) fail(at(path, it.key()), "unknown field");
        }
    }

    // Distribution descriptors -------------------------------------------------

    std::optional<json> count_law(const json& v, const std::string& path) {
        if (!v.is_object()) {
            fail(path, "expected a count-law descriptor such as {\"poisson\": 1.5}");
            return std::nullopt;
        }
        json in = v;
        if (!in.contains("kind")) {
            if (in.size() != 1) {
                fail(path, "expected exactly one of deterministic, poisson, geometric, table");
                return std::nullopt;
            }
            const std::string kind = in.begin().key();
            json value = in.begin().value();
            in = json{{"kind", kind}};
            if (kind == "deterministic") in["k"] = value;
            else if (kind == "poisson") in["lambda"] = value;
            else if (kind == "geometric") in["p"] = value;
            else if (kind == "table") in["entries"] = value;
        }
        const std::string kind = in["kind"].is_string() ? in["kind"].get<std::string>() : "";
        if (kind == "deterministic") {
            only(in, path, {"kind", "k"});
            auto k = in.contains("k") ? uint(in["k"], at(path, "k")) : (fail(at(path, "k"), "required"), std::nullopt);
            if (k) return json{{"kind", kind}, {"k", *k}};
        } else if (kind == "poisson") {
            only(in, path, {"kind", "lambda"});
            auto l = in.contains("lambda") ? number(in["lambda"], at(path, "lambda"))
                                           : (fail(at(path, "lambda"), "required"), std::nullopt);
            if (l && !(*l > 0.0)) fail(at(path, "lambda"), "lambda must be > 0");
            else if (l) return json{{"kind", kind}, {"lambda", *l}};
        } else if (kind == "geometric") {
            only(in, path, {"kind", "p"});
            auto p = in.contains("p") ? number(in["p"], at(path, "p")) : (fail(at(path, "p"), "required"), std::nullopt);
            if (p && !(*p > 0.0 && *p <= 1.0)) fail(at(path, "p"), "p must be in (0, 1]");
            else if (p) return json{{"kind", kind}, {"p", *p}};
        } else if (kind == "table") {
            only(in, path, {"kind", "entries"});
            const std::string ep = at(path, "entries");
            if (!in.contains("entries") || !in["entries"].is_array() || in["entries"].empty()) {
                fail(ep, "expected a non-empty list of [k, p] pairs");
                return std::nullopt;
            }
            json out = json::array();
            double total = 0.0;
            for (std::size_t i = 0; i < in["entries"].size(); ++i) {
                const json& e = in["entries"][i];
                if (!e.is_array() || e.size() != 2) {
                    fail(at(ep, i), "expected [k, p]");
                    return std::nullopt;
                }
                auto k = uint(e[0], at(ep, i));
                auto p = number(e[1], at(ep, i));
                if (!k || !p) return std::nullopt;
                if (*p < 0.0) {
                    fail(at(ep, i), "probability must be >= 0");
                    return std::nullopt;
                }
                total += *p;
                out.push_back(json::array({*k, *p}));
            }
            if (std::abs(total - 1.0) > 1e-9) fail(ep, "probabilities must sum to 1");
            else return json{{"kind", kind}, {"entries", out}};
        } else {
            fail(path, "unknown count law (known: deterministic, poisson, geometric, table)");
        }
        return std::nullopt;
    }

    std::optional<json> increment_law(const json& v, const std::string& path) {
        json in = v;
        if (v.is_string()) in = json{{"kind", v.get<std::string>()}};
        if (!in.is_object()) {
            fail(path, "expected an increment descriptor such as {\"normal\": {\"mu\": 0, \"sigma\": 1}}");
            return std::nullopt;
        }
        if (!in.contains("kind")) {
            if (in.size() != 1) {
                fail(path, "expected exactly one of rademacher, normal, table");
                return std::nullopt;
            }
            const std::string kind = in.begin().key();
            json value = in.begin().value();
            in = json{{"kind", kind}};
            if (kind == "normal" && value.is_array() && value.size() == 2) {
                in["mu"] = value[0];
                in["sigma"] = value[1];
            } else if (kind == "normal" && value.is_object()) {
                for (auto it = value.begin(); it != value.end(); ++it) in[it.key()] = it.value();
            } else if (kind == "table") {
                in["entries"] = value;
            }
        }
        const std::string kind = in["kind"].is_string() ? in["kind"].get<std::string>() : "";
        if (kind == "rademacher") {
            only(in, path, {"kind"});
            return json{{"kind", kind}};
        }
        if (kind == "normal") {
            only(in, path, {"kind", "mu", "sigma"});
            auto mu = in.contains("mu") ? number(in["mu"], at(path, "mu")) : std::optional(0.0);
            auto sigma = in.contains("sigma") ? number(in["sigma"], at(path, "sigma")) : std::optional(1.0);
            if (sigma && !(*sigma > 0.0)) {
                fail(at(path, "sigma"), "sigma must be > 0");
                return std::nullopt;
            }
            if (mu && sigma) return json{{"kind", kind}, {"mu", *mu}, {"sigma", *sigma}};
            return std::nullopt;
        }
        if (kind == "table") {
            only(in, path, {"kind", "entries"});
            const std::string ep = at(path, "entries");
            if (!in.contains("entries") || !in["entries"].is_array() || in["entries"].empty()) {
                fail(ep, "expected a non-empty list of [value, p] pairs");
                return std::nullopt;
            }
            json out = json::array();
            double total = 0.0;
            for (std::size_t i = 0; i < in["entries"].size(); ++i) {
                const json& e = in["entries"][i];
                if (!e.is_array() || e.size() != 2) {
                    fail(at(ep, i), "expected [value, p]");
                    return std::nullopt;
                }
                auto x = number(e[0], at(ep, i));
                auto p = number(e[1], at(ep, i));
                if (!x || !p) return std::nullopt;
                if (*p < 0.0) {
                    fail(at(ep, i), "probability must be >= 0");
                    return std::nullopt;
                }
                total += *p;
                out.push_back(json::array({*x, *p}));
            }
            if (std::abs(total - 1.0) > 1e-9) fail(ep, "probabilities must sum to 1");
            else return json{{"kind", kind}, {"entries", out}};
            return std::nullopt;
        }
        fail(path, "unknown increment law (known: rademacher, normal, table)");
        return std::nullopt;
    }

    // Model and environment ----------------------------------------------------

    std::optional<json> model(const json& v, const std::string& path) {
        json in = v.is_string() ? json{{"name", v.get<std::string>()}} : v;
        if (!in.is_object()) {
            fail(path, "expected a model name or object");
            return std::nullopt;
        }
        if (in.contains("custom")) {
            only(in, path, {"custom"});
            auto c = custom_model(in["custom"], at(path, "custom"));
            if (!c) return std::nullopt;
            return json{{"custom", *c}};
        }
        if (!in.contains("name") || !in["name"].is_string()) {
            fail(at(path, "name"), "required (or give \"custom\")");
            return std::nullopt;
        }
        const std::string name = in["name"].get<std::string>();
        json out{{"name", name}};
        if (name == "two-type-m2") {
            only(in, path, {"name"});
        } else if (name == "kimmel") {
            only(in, path, {"name", "lambda"});
            auto l = in.contains("lambda") ? number(in["lambda"], at(path, "lambda")) : std::optional(1.4);
            if (!l) return std::nullopt;
            if (!(*l > 0.0)) {
                fail(at(path, "lambda"), "lambda must be > 0");
                return std::nullopt;
            }
            out["lambda"] = *l;
        } else if (name == "brw") {
            only(in, path, {"name", "count", "increment"});
            auto c = count_law(in.value("count", json{{"deterministic", 2}}), at(path, "count"));
            auto i = increment_law(in.value("increment", json{{"kind", "normal"}}), at(path, "increment"));
            if (!c || !i) return std::nullopt;
            out["count"] = *c;
            out["increment"] = *i;
        } else if (name == "neutral-gw") {
            only(in, path, {"name", "count", "kernel", "atoms"});
            auto c = count_law(in.value("count", json{{"deterministic", 2}}), at(path, "count"));
            if (!in.contains("kernel")) {
                fail(at(path, "kernel"), "required");
                return std::nullopt;
            }
            auto k = matrix(in["kernel"], at(path, "kernel"));
            if (!c || !k) return std::nullopt;
            out["count"] = *c;
            out["kernel"] = *k;
            std::vector<double> atoms;
            if (in.contains("atoms")) {
                auto a = numbers(in["atoms"], at(path, "atoms"));
                if (!a) return std::nullopt;
                atoms = *a;
                if (atoms.size() != k->size()) {
                    fail(at(path, "atoms"), "needs one atom per kernel row");
                    return std::nullopt;
                }
            } else {
                for (std::size_t i = 0; i < k->size(); ++i) atoms.push_back(static_cast<double>(i));
            }
            out["atoms"] = atoms;
        } else {
            std::string known;
            for (const auto& n : builtin_names()) known += (known.empty() ? "" : ", ") + n;
            fail(at(path, "name"), "unknown model '" + name + "' (known: " + known + ", or custom)");
            return std::nullopt;
        }
        return out;
    }

    /// {space: [atoms], count_law: law | [law per atom], kernel: matrix | {env id: matrix}}
    std::optional<json> custom_model(const json& in, const std::string& path) {
        if (!in.is_object()) {
            fail(path, "expected an object");
            return std::nullopt;
        }
        only(in, path, {"space", "count_law", "kernel"});
        for (const char* k : {"space", "count_law", "kernel"})
            if (!in.contains(k)) fail(at(path, k), "required");
        if (!in.contains("space") || !in.contains("count_law") || !in.contains("kernel")) return std::nullopt;
        auto space = numbers(in["space"], at(path, "space"));
        if (!space) return std::nullopt;
        if (space->empty()) {
            fail(at(path, "space"), "needs at least one atom");
            return std::nullopt;
        }
        const std::size_t d = space->size();
        json out{{"space", *space}};
        const json& cl = in["count_law"];
        if (cl.is_array()) {
            if (cl.size() != d) {
                fail(at(path, "count_law"), "needs one law per atom");
                return std::nullopt;
            }
            json laws = json::array();
            for (std::size_t i = 0; i < d; ++i) {
                auto l = count_law(cl[i], at(at(path, "count_law"), i));
                if (!l) return std::nullopt;
                laws.push_back(*l);
            }
            out["count_law"] = laws;
        } else {
            auto l = count_law(cl, at(path, "count_law"));
            if (!l) return std::nullopt;
            out["count_law"] = json::array();
            for (std::size_t i = 0; i < d; ++i) out["count_law"].push_back(*l);
        }
        const json& k = in["kernel"];
        json kernels = json::object();
        if (k.is_object()) {
            for (auto it = k.begin(); it != k.end(); ++it) {
                auto m = matrix(it.value(), at(at(path, "kernel"), it.key()));
                if (!m) return std::nullopt;
                kernels[it.key()] = *m;
            }
        } else {
            auto m = matrix(k, at(path, "kernel"));
            if (!m) return std::nullopt;
            kernels["*"] = *m;
        }
        for (auto it = kernels.begin(); it != kernels.end(); ++it)
            if (it.value().size() != d) {
                fail(at(at(path, "kernel"), it.key()), "kernel size differs from the number of atoms");
                return std::nullopt;
            }
        out["kernel"] = kernels;
        return out;
    }

    std::optional<json> environment(const json& v, const std::string& path) {
        json in = v.is_null() ? json{{"kind", "constant"}} : v;
        if (!in.is_object()) {
            fail(path, "expected an object");
            return std::nullopt;
        }
        only(in, path, {"kind", "alphabet", "pattern", "period", "seed", "weights"});
        const std::string kind = in.value("kind", std::string("constant"));
        static const std::set<std::string> kinds{"constant", "periodic", "explicit", "iid-seeded"};
        if (!kinds.count(kind)) {
            fail(at(path, "kind"), "unknown kind '" + kind + "' (known: constant, periodic, explicit, iid-seeded)");
            return std::nullopt;
        }
        json alphabet = json::array();
        const json raw = in.value("alphabet", json::array({json{{"id", "e"}}}));
        if (!raw.is_array() || raw.empty()) {
            fail(at(path, "alphabet"), "expected a non-empty list of tokens");
            return std::nullopt;
        }
        std::set<std::string> ids;
        for (std::size_t i = 0; i < raw.size(); ++i) {
            const std::string tp = at(at(path, "alphabet"), i);
            json t = raw[i].is_string() ? json{{"id", raw[i]}} : raw[i];
            if (!t.is_object() || !t.contains("id") || !t["id"].is_string()) {
                fail(tp, "expected {id, params}");
                return std::nullopt;
            }
            only(t, tp, {"id", "params"});
            json params = json::object();
            if (t.contains("params")) {
                if (!t["params"].is_object()) {
                    fail(at(tp, "params"), "expected an object of numbers");
                    return std::nullopt;
                }
                for (auto it = t["params"].begin(); it != t["params"].end(); ++it) {
                    auto x = number(it.value(), at(at(tp, "params"), it.key()));
                    if (!x) return std::nullopt;
                    params[it.key()] = *x;
                }
            }
            const std::string id = t["id"].get<std::string>();
            if (!ids.insert(id).second) {
                fail(at(tp, "id"), "duplicate id '" + id + "'");
                return std::nullopt;
            }
            alphabet.push_back(json{{"id", id}, {"params", params}});
        }
        json out{{"kind", kind}, {"alphabet", alphabet}};
        if (kind == "constant") {
            if (alphabet.size() != 1) fail(at(path, "alphabet"), "a constant environment has exactly one token");
            for (const char* k : {"pattern", "period", "seed", "weights"})
                if (in.contains(k)) fail(at(path, k), "not used by a constant environment");
        } else if (kind == "periodic" || kind == "explicit") {
            for (const char* k : {"seed", "weights"})
                if (in.contains(k)) fail(at(path, k), "not used by a " + kind + " environment");
            json pattern = json::array();
            if (in.contains("pattern")) {
                if (!in["pattern"].is_array() || in["pattern"].empty()) {
                    fail(at(path, "pattern"), "expected a non-empty list of token ids");
                    return std::nullopt;
                }
                for (std::size_t i = 0; i < in["pattern"].size(); ++i) {
                    const json& p = in["pattern"][i];
                    if (!p.is_string() || !ids.count(p.get<std::string>())) {
                        fail(at(at(path, "pattern"), i), "not an alphabet id");
                        return std::nullopt;
                    }
                    pattern.push_back(p);
                }
            } else {
                for (const auto& t : alphabet) pattern.push_back(t["id"]);
            }
            if (in.contains("period")) {
                if (kind != "periodic") {
                    fail(at(path, "period"), "only periodic environments have a period");
                } else {
                    auto p = uint(in["period"], at(path, "period"));
                    if (p && *p != pattern.size())
                        fail(at(path, "period"), "period " + std::to_string(*p) + " differs from the pattern length " +
                                                     std::to_string(pattern.size()));
                }
            }
            out["pattern"] = pattern;
        } else {
            if (in.contains("pattern") || in.contains("period"))
                fail(path, "pattern and period are not used by an iid-seeded environment");
            auto seed = in.contains("seed") ? uint(in["seed"], at(path, "seed")) : std::optional<std::uint64_t>(0);
            if (seed) out["seed"] = *seed;
            std::vector<double> w(alphabet.size(), 1.0);
            if (in.contains("weights")) {
                auto ww = numbers(in["weights"], at(path, "weights"));
                if (!ww) return std::nullopt;
                if (ww->size() != alphabet.size()) {
                    fail(at(path, "weights"), "needs one weight per token");
                    return std::nullopt;
                }
                double s = 0.0;
                for (double x : *ww) {
                    if (x < 0.0) {
                        fail(at(path, "weights"), "weights must be >= 0");
                        return std::nullopt;
                    }
                    s += x;
                }
                if (!(s > 0.0)) {
                    fail(at(path, "weights"), "weights must not all be 0");
                    return std::nullopt;
                }
                w = *ww;
            }
            out["weights"] = w;
        }
        return out;
    }
};

inline CountLaw make_count_law(const json& j) {
    const std::string kind = j.at("kind");
    if (kind == "deterministic") return CountLaw::deterministic(j.at("k").get<std::uint64_t>());
    if (kind == "poisson") return CountLaw::poisson(j.at("lambda").get<double>());
    if (kind == "geometric") return CountLaw::geometric(j.at("p").get<double>());
    std::vector<std::pair<std::uint64_t, double>> entries;
    for (const auto& e : j.at("entries")) entries.emplace_back(e[0].get<std::uint64_t>(), e[1].get<double>());
    return CountLaw::table(std::move(entries));
}

inline IncrementLaw make_increment_law(const json& j) {
    const std::string kind = j.at("kind");
    if (kind == "rademacher") return IncrementLaw::rademacher();
    if (kind == "normal") return IncrementLaw::normal(j.at("mu").get<double>(), j.at("sigma").get<double>());
    std::vector<std::pair<double, double>> entries;
    for (const auto& e : j.at("entries")) entries.emplace_back(e[0].get<double>(), e[1].get<double>());
    return IncrementLaw::table(std::move(entries));
}

}  // namespace detail

/// Builds the model described by a normalized model descriptor.
inline std::shared_ptr<const BranchingModel> make_model(const json& m) {
    if (m.contains("custom")) {
        const json& c = m["custom"];
        auto atoms = c.at("space").get<std::vector<double>>();
        std::vector<CountLaw> counts;
        for (const auto& l : c.at("count_law")) counts.push_back(detail::make_count_law(l));
        std::map<std::string, std::vector<BroodLaw>> laws;
        for (auto it = c.at("kernel").begin(); it != c.at("kernel").end(); ++it) {
            auto k = it.value().get<std::vector<std::vector<double>>>();
            for (std::size_t i = 0; i < atoms.size(); ++i) laws[it.key()].push_back(ProductBrood{counts[i], k[i]});
        }
        return std::make_shared<FiniteModel>("custom", std::move(atoms), std::move(laws));
    }
    const std::string name = m.at("name");
    BuiltinParams p;
    if (name == "kimmel") p.numbers["lambda"] = m.at("lambda").get<double>();
    if (m.contains("count")) p.count = detail::make_count_law(m["count"]);
    if (m.contains("increment")) p.increment = detail::make_increment_law(m["increment"]);
    if (name == "neutral-gw")
        return neutral_gw(*p.count, m.at("kernel").get<std::vector<std::vector<double>>>(),
                          m.at("atoms").get<std::vector<double>>());
    return builtin(name, p);
}

/// Builds the environment described by a normalized environment descriptor.
inline EnvironmentSequence make_environment(const json& e) {
    std::vector<EnvironmentToken> alphabet;
    for (const auto& t : e.at("alphabet")) {
        EnvironmentToken tok;
        tok.id = t.at("id");
        for (auto it = t.at("params").begin(); it != t.at("params").end(); ++it) tok.params[it.key()] = it.value();
        alphabet.push_back(std::move(tok));
    }
    auto indices = [&] {
        std::vector<std::size_t> idx;
        for (const auto& id : e.at("pattern"))
            for (std::size_t i = 0; i < alphabet.size(); ++i)
                if (alphabet[i].id == id.get<std::string>()) idx.push_back(i);
        return idx;
    };
    const std::string kind = e.at("kind");
    if (kind == "constant") return EnvironmentSequence::constant(alphabet.front());
    if (kind == "periodic") return EnvironmentSequence::periodic(alphabet, indices());
    if (kind == "explicit") return EnvironmentSequence::explicit_list(alphabet, indices());
    return EnvironmentSequence::iid(alphabet, e.at("seed").get<std::uint64_t>(), e.at("weights").get<std::vector<double>>());
}

/// A validated run configuration.  `normalized` is the canonical JSON form; the
/// digest is FNV-1a over its compact serialization (keys sorted).
struct RunConfig {
    json normalized;
    std::string experiment;
    std::uint64_t seed = 1;
    std::uint64_t replicates = default_replicates;
    std::uint64_t cap = default_cap;
    double x0 = 0.0;
    json params;
    std::shared_ptr<const BranchingModel> model;
    EnvironmentSequence env = EnvironmentSequence::constant({"e", {}});

    std::string digest() const { return hex64(fnv1a(normalized.dump())); }
};

namespace detail {

/// Experiment parameters with defaults applied.  `in` holds the raw parameters.
inline json experiment_params(const std::string& exp, const json& in, const json& model, Schema& s) {
    json out = json::object();
    std::set<std::string> used;
    auto take = [&](const char* key) -> const json* {
        used.insert(key);
        return in.contains(key) ? &in[key] : nullptr;
    };
    auto uint_param = [&](const char* key, std::optional<std::uint64_t> fallback, std::uint64_t min_value = 0) {
        const json* v = take(key);
        if (!v) {
            if (fallback) out[key] = *fallback;
            else s.fail(key, "required");
            return;
        }
        auto x = s.uint(*v, key);
        if (x && *x < min_value) s.fail(key, "must be >= " + std::to_string(min_value));
        else if (x) out[key] = *x;
    };
    auto number_param = [&](const char* key, std::optional<double> fallback, auto&& check, const char* why) {
        const json* v = take(key);
        if (!v) {
            if (fallback) out[key] = *fallback;
            return;
        }
        auto x = s.number(*v, key);
        if (x && !check(*x)) s.fail(key, std::string(key) + " must be " + why);
        else if (x) out[key] = *x;
    };
    auto any = [](double) { return true; };
    auto positive = [](double x) { return x > 0.0; };
    auto bool_param = [&](const char* key, bool fallback) {
        const json* v = take(key);
        if (!v) {
            out[key] = fallback;
            return;
        }
        if (auto b = s.boolean(*v, key)) out[key] = *b;
    };
    auto ladder_param = [&](const char* key, std::vector<std::uint64_t> fallback, std::uint64_t min_value) {
        const json* v = take(key);
        if (!v) {
            out[key] = fallback;
            return;
        }
        if (auto l = s.ladder(*v, key, min_value)) out[key] = *l;
    };
    const bool is_brw = model.value("name", "") == "brw";

    if (exp == "simulate") {
        uint_param("n", 10, 0);
        bool_param("dump_tree", false);
    } else if (exp == "check-m2o") {
        uint_param("n", 3, 0);
        uint_param("truncation", 40, 1);
        const json* f = take("functional");
        const std::string fs = f && f->is_string() ? f->get<std::string>() : "indicators";
        if (f && !f->is_string()) s.fail("functional", "expected a string");
        if (fs != "indicators" && fs != "constant" && fs != "trait-sum")
            s.fail("functional", "unknown functional '" + fs + "' (known: indicators, constant, trait-sum)");
        out["functional"] = fs;
    } else if (exp == "growth") {
        uint_param("n_max", 400, 10);
        bool_param("variational", false);
        uint_param("truncation", 40, 1);
    } else if (exp == "lln") {
        ladder_param("ladder", {4, 8, 12}, 1);
        const json* f = take("f");
        json fj = f ? *f : json("identity");
        if (fj.is_string() && fj.get<std::string>() == "identity") {
            out["f"] = "identity";
        } else if (fj.is_object() && fj.size() == 1 && fj.contains("indicator")) {
            if (auto v = s.numbers(fj["indicator"].is_array() ? fj["indicator"] : json::array({fj["indicator"]}),
                                   "f.indicator"))
                out["f"] = json{{"indicator", *v}};
        } else if (fj.is_object() && fj.size() == 1 && fj.contains("at_least")) {
            if (auto v = s.number(fj["at_least"], "f.at_least")) out["f"] = json{{"at_least", *v}};
        } else {
            s.fail("f", "expected \"identity\", {\"indicator\": [traits]} or {\"at_least\": b}");
        }
        const json* fn = take("fn");
        json fnj = fn ? *fn : json("id");
        if (fnj.is_string() && (fnj == "id" || fnj == "log-over-n")) {
            out["fn"] = fnj;
        } else if (fnj.is_string() && fnj.get<std::string>().rfind("affine(", 0) == 0) {
            // affine(a,b)
            const std::string t = fnj.get<std::string>();
            double a = 0, b = 0;
            char close = 0;
            if (std::sscanf(t.c_str(), "affine(%lf,%lf%c", &a, &b, &close) == 3 && close == ')' && b > 0.0)
                out["fn"] = json{{"affine", {a, b}}};
            else
                s.fail("fn", "expected affine(a,b) with b > 0");
        } else if (fnj.is_object() && fnj.contains("affine")) {
            auto ab = s.numbers(fnj["affine"], "fn.affine");
            if (ab && ab->size() == 2 && (*ab)[1] > 0.0) out["fn"] = json{{"affine", *ab}};
            else if (ab) s.fail("fn.affine", "expected [a, b] with b > 0");
        } else {
            s.fail("fn", "expected id, affine(a,b) or log-over-n");
        }
    } else if (exp == "local-density") {
        ladder_param("ladder", {10, 20, 30, 40}, 1);
        const json* a = take("a_n");
        json aj = a ? *a : json("const:1");
        double c = 0;
        char extra = 0;
        const std::string as = aj.is_string() ? aj.get<std::string>() : "";
        if (std::sscanf(as.c_str(), "const:%lf%c", &c, &extra) == 1) out["a_n"] = json{{"const", c}};
        else if (std::sscanf(as.c_str(), "linear:%lf%c", &c, &extra) == 1) out["a_n"] = json{{"linear", c}};
        else if (aj.is_object() && aj.size() == 1 && (aj.contains("const") || aj.contains("linear")) &&
                 aj.begin().value().is_number())
            out["a_n"] = aj;
        else
            s.fail("a_n", "expected const:c or linear:a");
        number_param("prune_epsilon", is_brw ? 1e-4 : 0.0, [](double x) { return x >= 0.0; }, ">= 0");
        uint_param("bootstrap", 200, 0);
    } else if (exp == "extremes") {
        ladder_param("ladder", {60}, 1);
        if (!is_brw) {
            if (!in.contains("speed")) s.fail("speed", "required for models other than brw");
        }
        number_param("speed", std::nullopt, any, "finite");
        number_param("threshold_fraction", 0.85, [](double x) { return x > 0.0 && x < 1.0; }, "in (0, 1)");
        number_param("prune_epsilon", 1e-3, [](double x) { return x >= 0.0; }, ">= 0");
        number_param("excess", 0.1, positive, "> 0");
    } else if (exp == "probe-mg") {
        uint_param("p", 1, 1);
        uint_param("q", 1, 1);
        uint_param("blocks", 50, 2);
        auto curve = [&](const char* key) {
            const json* v = take(key);
            if (!v) {
                s.fail(key, "required, e.g. {\"const\": 1} or {\"linear\": [b0, slope]}");
                return;
            }
            if (v->is_object() && v->size() == 1 && v->contains("const")) {
                if (auto x = s.number((*v)["const"], std::string(key) + ".const")) out[key] = json{{"linear", {*x, 0.0}}};
            } else if (v->is_object() && v->size() == 1 && v->contains("linear")) {
                auto ab = s.numbers((*v)["linear"], std::string(key) + ".linear");
                if (ab && ab->size() == 2) out[key] = json{{"linear", *ab}};
                else if (ab) s.fail(std::string(key) + ".linear", "expected [b0, slope]");
            } else {
                s.fail(key, "expected {\"const\": c} or {\"linear\": [b0, slope]}");
            }
        };
        curve("b");
        curve("b_n");
        number_param("phi", 0.0, [](double x) { return x >= 0.0 && x <= 1.0; }, "in [0, 1]");
        ladder_param("horizons", {20, 40, 80, 160}, 1);
        const json* rho = take("rho");
        if (!rho) s.fail("rho", "required");
        else if (auto x = s.number(*rho, "rho")) out["rho"] = *x;
        number_param("epsilon", 0.05, positive, "> 0");
        number_param("alpha", std::nullopt, any, "finite");
    } else if (exp == "coupling") {
        uint_param("steps", 20, 1);
        number_param("b", 1.0, any, "finite");
    } else if (exp == "lineage") {
        ladder_param("ladder", {15, 30, 60}, 1);
        number_param("delta", 0.05, positive, "> 0");
    }
    for (auto it = in.begin(); it != in.end(); ++it)
        if (!used.count(it.key())) s.fail(it.key(), "unknown parameter for experiment " + exp);
    return out;
}

}  // namespace detail

namespace detail {

inline RunConfig validate_impl(const json& raw) {
    detail::Schema s;
    if (!raw.is_object()) throw ConfigError({"(root): expected a JSON object"});
    static const std::set<std::string> globals{"experiment", "model", "environment", "x0", "seed", "replicates", "cap", "params"};

    RunConfig rc;
    std::string names;
    for (const auto& n : experiment_names()) names += (names.empty() ? "" : ", ") + n;
    if (!raw.contains("experiment")) {
        s.fail("experiment", "required (one of " + names + ")");
    } else if (!raw["experiment"].is_string()) {
        s.fail("experiment", "expected a string");
    } else {
        rc.experiment = raw["experiment"].get<std::string>();
        if (std::find(experiment_names().begin(), experiment_names().end(), rc.experiment) == experiment_names().end()) {
            s.fail("experiment", "unknown experiment '" + rc.experiment + "' (valid: " + names + ")");
            rc.experiment.clear();
        }
    }

    json model = json::object();
    if (!raw.contains("model")) s.fail("model", "required");
    else if (auto m = s.model(raw["model"], "model")) model = *m;
    json env = json::object();
    if (auto e = s.environment(raw.value("environment", json()), "environment")) env = *e;

    if (raw.contains("x0")) {
        if (auto x = s.number(raw["x0"], "x0")) rc.x0 = *x;
    }
    if (raw.contains("seed")) {
        if (auto x = s.uint(raw["seed"], "seed")) rc.seed = *x;
    }
    if (raw.contains("replicates")) {
        auto x = s.uint(raw["replicates"], "replicates");
        if (x && *x == 0) s.fail("replicates", "must be >= 1");
        else if (x) rc.replicates = *x;
    }
    if (raw.contains("cap")) {
        auto x = s.uint(raw["cap"], "cap");
        if (x && *x == 0) s.fail("cap", "must be >= 1");
        else if (x) rc.cap = *x;
    }

    json params_in = json::object();
    if (raw.contains("params")) {
        if (!raw["params"].is_object()) s.fail("params", "expected an object");
        else params_in = raw["params"];
    }
    for (auto it = raw.begin(); it != raw.end(); ++it)
        if (!globals.count(it.key())) params_in[it.key()] = it.value();
    if (!rc.experiment.empty()) {
        detail::Schema ps;
        rc.params = detail::experiment_params(rc.experiment, params_in, model, ps);
        for (const auto& i : ps.issues) s.issues.push_back(i);
    }

    if (s.issues.empty()) {
        try {
            rc.model = make_model(model);
        } catch (const Error& e) {
            s.fail("model", e.what());
        }
        try {
            rc.env = make_environment(env);
        } catch (const Error& e) {
            s.fail("environment", e.what());
        }
        if (rc.model) {
            try {
                rc.model->check_trait(rc.x0);
            } catch (const Error& e) {
                s.fail("x0", e.what());
            }
            try {
                for (const auto& t : rc.env.alphabet()) (void)rc.model->mean_offspring(rc.x0, t);
            } catch (const Error& e) {
                s.fail("model", e.what());
            }
        }
    }
    if (!s.issues.empty()) throw ConfigError(std::move(s.issues));

    rc.normalized = json{{"experiment", rc.experiment}, {"model", model},     {"environment", env},
                         {"x0", rc.x0},                 {"seed", rc.seed},    {"replicates", rc.replicates},
                         {"cap", rc.cap},               {"params", rc.params}};
    return rc;
}

}  // namespace detail

/// Validates raw config JSON, applies defaults and builds the model and environment.
/// Throws ConfigError listing every violation.
inline RunConfig validate_config(const json& raw) {
    try {
        return detail::validate_impl(raw);
    } catch (const json::exception& e) {
        // A field of the wrong JSON type that slipped past the schema helpers.
        throw ConfigError({std::string("(root): malformed field: ") + e.what()});
    }
}

inline RunConfig validate_config_text(const std::string& text) {
    json raw;
    try {
        raw = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError({std::string("(root): not valid JSON: ") + e.what()});
    }
    return validate_config(raw);
}

}  // namespace branchkit
