#pragma once

// Exact mean semigroup and auxiliary kernels on finite trait spaces.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <vector>

#include "env.hpp"
#include "errors.hpp"
#include "finite_model.hpp"

namespace branchkit {

class KernelTable {
public:
    KernelTable() = default;
    KernelTable(Eigen::MatrixXd p, bool stochastic) : p_(std::move(p)), stochastic_(stochastic) {
        if (p_.rows() != p_.cols()) throw InvalidArgument("kernel must be square");
        if ((p_.array() < 0.0).any()) throw InvalidArgument("kernel entries must be >= 0");
        if (stochastic_)
            for (Eigen::Index x = 0; x < p_.rows(); ++x)
                if (std::abs(p_.row(x).sum() - 1.0) > 1e-10)
                    throw InvalidArgument("kernel row " + std::to_string(x) + " does not sum to 1");
    }

    static KernelTable identity(std::size_t d) {
        return KernelTable(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d)),
                           true);
    }

    const Eigen::MatrixXd& matrix() const noexcept { return p_; }
    std::size_t dim() const noexcept { return static_cast<std::size_t>(p_.rows()); }
    bool stochastic() const noexcept { return stochastic_; }
    double operator()(std::size_t x, std::size_t y) const {
        return p_(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(y));
    }
    Eigen::RowVectorXd row(std::size_t x) const { return p_.row(static_cast<Eigen::Index>(x)); }

    /// (this * other)(x, z) = sum_y this(x,y) other(y,z).
    KernelTable then(const KernelTable& other) const {
        return KernelTable(p_ * other.p_, stochastic_ && other.stochastic_);
    }

    /// max over row pairs of the total-variation distance (half the L1 distance).
    double tv_spread() const {
        double worst = 0.0;
        for (Eigen::Index x = 0; x < p_.rows(); ++x)
            for (Eigen::Index y = x + 1; y < p_.rows(); ++y)
                worst = std::max(worst, 0.5 * (p_.row(x) - p_.row(y)).cwiseAbs().sum());
        return worst;
    }

private:
    Eigen::MatrixXd p_;
    bool stochastic_ = false;
};

/// P(x,e,{y}) = m_1(x,e,{y}) / m(x,e).
inline KernelTable biased_kernel(const FiniteModel& fm, const EnvironmentToken& e) {
    Eigen::MatrixXd m = fm.mean_matrix(e);
    for (Eigen::Index x = 0; x < m.rows(); ++x) m.row(x) /= m.row(x).sum();
    return KernelTable(std::move(m), true);
}

/// Vector scaled by exp(log_scale): the true value is values * exp(log_scale).
struct ScaledVector {
    Eigen::VectorXd values;
    double log_scale = 0.0;

    double total() const { return values.sum() * std::exp(log_scale); }
    double log_total() const { return std::log(values.sum()) + log_scale; }
    double at(std::size_t y) const { return values(static_cast<Eigen::Index>(y)) * std::exp(log_scale); }
};

class MeanSemigroup {
public:
    MeanSemigroup(std::shared_ptr<const FiniteModel> fm, EnvironmentSequence env)
        : fm_(std::move(fm)), env_(std::move(env)) {
        if (!fm_) throw InvalidArgument("mean semigroup needs a finite model");
        // Precomputed so concurrent readers never write.
        for (const auto& token : env_.alphabet()) {
            try {
                steps_.push_back(fm_->mean_matrix(token));
            } catch (const InvalidArgument&) {
                steps_.emplace_back();
            }
        }
    }

    const FiniteModel& model() const noexcept { return *fm_; }
    const EnvironmentSequence& env() const noexcept { return env_; }
    std::size_t dim() const noexcept { return fm_->dim(); }

    /// m_1(., T^i e, .).
    const Eigen::MatrixXd& step(std::size_t i) const {
        const auto& m = steps_[env_.index_at(i)];
        if (m.size() == 0)
            throw InvalidArgument(fm_->name() + ": no reproduction law for environment '" + env_.token_at(i).id + "'");
        return m;
    }

    /// m_n(x, T^start e, {.}); the scale moves to log_scale once entries pass 1e300.
    ScaledVector mean_row(std::size_t x, std::size_t n, std::size_t start = 0) const {
        Eigen::RowVectorXd v = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(dim()));
        v(static_cast<Eigen::Index>(x)) = 1.0;
        double log_scale = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            v = v * step(start + i);
            const double mx = v.maxCoeff();
            if (mx > 1e300 || (log_scale != 0.0 && mx > 0.0)) {
                v /= mx;
                log_scale += std::log(mx);
            }
        }
        return ScaledVector{v.transpose(), log_scale};
    }

    /// log m_k(y, T^start e, X) for every y.
    Eigen::VectorXd log_totals(std::size_t start, std::size_t k) const {
        auto h = backward(start, start + k);
        return h.front().values.array().log() + h.front().log_scale;
    }

    /// Q_{n-i}(., T^i e, .): m_1(x,T^i e,{y}) m_{n-i-1}(y,T^{i+1}e,X) / m_{n-i}(x,T^i e,X).
    KernelTable q_kernel(std::size_t n, std::size_t i) const {
        if (n < 1 || i >= n) throw InvalidArgument("q_kernel needs 0 <= i < n");
        auto h = backward(i + 1, n);
        return q_from(i, h.front().values);
    }

    /// Q_{i,n} = Q_{n-i}(T^i e) * Q_{n-i-1}(T^{i+1} e) * ... * Q_1(T^{n-1} e).
    KernelTable q_compose(std::size_t i, std::size_t n) const {
        if (i > n) throw InvalidArgument("q_compose needs i <= n");
        if (i == n) return KernelTable::identity(dim());
        auto h = backward(i + 1, n);
        Eigen::MatrixXd acc = q_from(i, h[0].values).matrix();
        for (std::size_t j = i + 1; j < n; ++j) acc = acc * q_from(j, h[j - i].values).matrix();
        return KernelTable(renormalize(acc), true);
    }

    /// Every Q_{i,n} for i = 0..n, sharing one backward pass.
    std::vector<KernelTable> q_compose_all(std::size_t n) const {
        std::vector<KernelTable> out(n + 1);
        out[n] = KernelTable::identity(dim());
        if (n == 0) return out;
        auto h = backward(1, n);
        Eigen::MatrixXd acc = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(dim()),
                                                        static_cast<Eigen::Index>(dim()));
        for (std::size_t i = n; i-- > 0;) {
            acc = q_from(i, h[i].values).matrix() * acc;
            acc = renormalize(acc);
            out[i] = KernelTable(acc, true);
        }
        return out;
    }

private:
    // h[j - from] = normalized m_{to-j}(., T^j e, X) for j = from..to.
    std::vector<ScaledVector> backward(std::size_t from, std::size_t to) const {
        std::vector<ScaledVector> h(to - from + 1);
        Eigen::VectorXd v = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(dim()));
        double log_scale = 0.0;
        h.back() = {v, 0.0};
        for (std::size_t j = to; j-- > from;) {
            v = step(j) * v;
            const double mx = v.maxCoeff();
            v /= mx;
            log_scale += std::log(mx);
            h[j - from] = {v, log_scale};
        }
        return h;
    }

    KernelTable q_from(std::size_t i, const Eigen::VectorXd& h_next) const {
        Eigen::MatrixXd q = step(i) * h_next.asDiagonal();
        for (Eigen::Index x = 0; x < q.rows(); ++x) q.row(x) /= q.row(x).sum();
        return KernelTable(std::move(q), true);
    }

    static Eigen::MatrixXd renormalize(Eigen::MatrixXd m) {
        for (Eigen::Index x = 0; x < m.rows(); ++x) m.row(x) /= m.row(x).sum();
        return m;
    }

    std::shared_ptr<const FiniteModel> fm_;
    EnvironmentSequence env_;
    std::vector<Eigen::MatrixXd> steps_;
};

/// Path functional F(X_0, ..., X_n) over atom indices.
using PathFunctional = std::function<double(const std::vector<std::size_t>&)>;

struct ManyToOneReport {
    double lhs = 0.0;
    double rhs = 0.0;
    double gap = 0.0;
    std::size_t budget_used = 0;  // number of enumerated paths
};

inline constexpr std::size_t path_budget = 1'000'000;

namespace detail {

/// d^(n+1), saturated just above the budget.
inline std::size_t path_count(std::size_t d, std::size_t n) {
    double count = 1.0;
    for (std::size_t i = 0; i <= n; ++i) count *= static_cast<double>(d);
    return count > static_cast<double>(path_budget) ? path_budget + 1 : static_cast<std::size_t>(count);
}

/// Visits every path x0 -> x1 -> ... -> xn with its two weights.
template <class Visit>
void enumerate_paths(std::size_t d, std::size_t x0, std::size_t n, Visit&& visit) {
    std::vector<std::size_t> path(n + 1, 0);
    path[0] = x0;
    const std::size_t total = [&] {
        std::size_t t = 1;
        for (std::size_t i = 0; i < n; ++i) t *= d;
        return t;
    }();
    for (std::size_t code = 0; code < total; ++code) {
        std::size_t c = code;
        for (std::size_t i = n; i >= 1; --i) {
            path[i] = c % d;
            c /= d;
        }
        visit(path);
    }
}

}  // namespace detail

/// Exact check of E sum_{|u|=n} F(X_0(u),...,X_n(u)) = m_n(x0,e,X) E F(Y_0,...,Y_n).
inline ManyToOneReport many_to_one_check(const MeanSemigroup& ms, std::size_t x0, std::size_t n,
                                         const PathFunctional& f) {
    const std::size_t d = ms.dim();
    if (detail::path_count(d, n) > path_budget)
        throw BudgetExceeded("path enumeration needs d^(n+1) = " + std::to_string(d) + "^" + std::to_string(n + 1) +
                             " > " + std::to_string(path_budget) + " paths");
    std::vector<KernelTable> q;
    for (std::size_t i = 0; i < n; ++i) q.push_back(ms.q_kernel(n, i));
    const double total = ms.mean_row(x0, n).total();
    ManyToOneReport r;
    double rhs_expect = 0.0;
    detail::enumerate_paths(d, x0, n, [&](const std::vector<std::size_t>& path) {
        double w_mean = 1.0, w_q = 1.0;
        for (std::size_t i = 0; i < n; ++i) {
            w_mean *= ms.step(i)(static_cast<Eigen::Index>(path[i]), static_cast<Eigen::Index>(path[i + 1]));
            w_q *= q[i](path[i], path[i + 1]);
        }
        if (w_mean == 0.0 && w_q == 0.0) return;
        const double v = f(path);
        r.lhs += w_mean * v;
        rhs_expect += w_q * v;
    });
    r.rhs = total * rhs_expect;
    r.gap = std::abs(r.lhs - r.rhs);
    r.budget_used = detail::path_count(d, n) / d;
    return r;
}

/// M(e) = max over z, x, y of m_b(x,e,{z}) / m_b(y,e,{z}); infinite when a zero
/// entry sits opposite a positive one in some column.
inline double doeblin_constant(const FiniteModel& fm, const EnvironmentSequence& env, std::size_t b = 1) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(fm.dim()),
                                                  static_cast<Eigen::Index>(fm.dim()));
    for (std::size_t i = 0; i < b; ++i) m = m * fm.mean_matrix(env.token_at(i));
    double worst = 1.0;
    for (Eigen::Index z = 0; z < m.cols(); ++z) {
        const double hi = m.col(z).maxCoeff(), lo = m.col(z).minCoeff();
        if (hi == 0.0) continue;
        if (lo == 0.0) return std::numeric_limits<double>::infinity();
        worst = std::max(worst, hi / lo);
    }
    return worst;
}

inline double doeblin_constant(const FiniteModel& fm, const EnvironmentToken& e) {
    return doeblin_constant(fm, EnvironmentSequence::constant(e), 1);
}

struct DoeblinReport {
    std::vector<double> m_constants;  // M(T^j e), j < n
    double ratio_slack = 0.0;         // min over k<=n, x, y of M(e) - m_k(x)/m_k(y)  (>= 0 when the bound holds)
    double q_slack = 0.0;             // min over k, x, y, z of M(e)^2 Q_k(y,e,z) - Q_k(x,e,z)
    double tv_slack = 0.0;            // min over i<n of prod_{j=i}^{n-1}(1-1/M^2) - TV spread of Q_{i,n}
    std::vector<double> tv_spread;    // TV spread of Q_{i,n}, i = 0..n-1
    std::vector<double> tv_bound;
};

inline DoeblinReport doeblin_consequences(const MeanSemigroup& ms, std::size_t n) {
    const FiniteModel& fm = ms.model();
    const std::size_t d = ms.dim();
    DoeblinReport r;
    for (std::size_t j = 0; j < n; ++j) r.m_constants.push_back(doeblin_constant(fm, ms.env().token_at(j)));
    const double m0 = n > 0 ? r.m_constants[0] : doeblin_constant(fm, ms.env().token_at(0));
    if (!std::isfinite(m0)) throw InvalidArgument("Doeblin constant of e_0 is infinite");
    r.ratio_slack = std::numeric_limits<double>::infinity();
    r.q_slack = std::numeric_limits<double>::infinity();
    r.tv_slack = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k <= n; ++k) {
        Eigen::VectorXd logt = ms.log_totals(0, k);
        for (std::size_t x = 0; x < d; ++x)
            for (std::size_t y = 0; y < d; ++y) {
                const double ratio = std::exp(logt(static_cast<Eigen::Index>(x)) - logt(static_cast<Eigen::Index>(y)));
                r.ratio_slack = std::min({r.ratio_slack, m0 - ratio, ratio - 1.0 / m0});
            }
        if (k >= 1) {
            const KernelTable q = ms.q_kernel(k, 0);
            for (std::size_t x = 0; x < d; ++x)
                for (std::size_t y = 0; y < d; ++y)
                    for (std::size_t z = 0; z < d; ++z) r.q_slack = std::min(r.q_slack, m0 * m0 * q(y, z) - q(x, z));
        }
    }
    auto all = ms.q_compose_all(n);
    for (std::size_t i = 0; i < n; ++i) {
        double bound = 1.0;
        for (std::size_t j = i; j < n; ++j) bound *= 1.0 - 1.0 / (r.m_constants[j] * r.m_constants[j]);
        const double spread = all[i].tv_spread();
        r.tv_spread.push_back(spread);
        r.tv_bound.push_back(bound);
        r.tv_slack = std::min(r.tv_slack, bound - spread);
    }
    return r;
}

}  // namespace branchkit
