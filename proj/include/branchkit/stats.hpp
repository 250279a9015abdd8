#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace branchkit {

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) throw InvalidArgument("mean of an empty sample");
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

/// Sample variance with n - 1 in the denominator; 0 for fewer than two points.
inline double variance_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
}

inline double standard_error(const std::vector<double>& v) {
    return v.size() < 2 ? 0.0 : std::sqrt(variance_of(v) / static_cast<double>(v.size()));
}

inline double quantile(std::vector<double> v, double q) {
    if (v.empty()) throw InvalidArgument("quantile of an empty sample");
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

inline double least_squares_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size() || xs.size() < 2) throw InvalidArgument("slope needs two or more points");
    const double mx = mean_of(xs), my = mean_of(ys);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
    }
    if (sxx == 0.0) throw InvalidArgument("slope needs distinct abscissae");
    return sxy / sxx;
}

/// Bootstrap standard error of a statistic over replicates (resampling whole replicates).
template <class Replicate>
double bootstrap_se(const std::vector<Replicate>& reps,
                    const std::function<double(const std::vector<const Replicate*>&)>& stat,
                    std::size_t resamples, std::uint64_t seed) {
    if (reps.empty() || resamples < 2) return 0.0;
    KeyedRng rng(derive_key(seed, 0xB007));
    std::vector<double> values;
    std::vector<const Replicate*> pick(reps.size());
    for (std::size_t b = 0; b < resamples; ++b) {
        for (auto& p : pick)
            p = &reps[std::min(reps.size() - 1, static_cast<std::size_t>(rng.uniform() * static_cast<double>(reps.size())))];
        const double v = stat(pick);
        if (std::isfinite(v)) values.push_back(v);
    }
    return std::sqrt(variance_of(values));
}

}  // namespace branchkit
