#pragma once

// Direct Q-penalization on small exact MDPs: penalty functions, the induced
// policy softmax(-p), and the two tabular iteration schemes whose equivalence
// is checked numerically.
//
// Tables are Matrix with one row per state and one column per action. An
// infinite penalty is +inf; in every expectation under a policy, actions with
// zero probability contribute nothing (0 * inf = 0).

#include <cmath>
#include <limits>
#include <vector>

#include "arq/checkpoint.hpp"
#include "arq/nn.hpp"

namespace arq {

inline constexpr double kInfPenalty = std::numeric_limits<double>::infinity();

struct TabularMDP {
    std::size_t n_states = 0;
    std::size_t n_actions = 0;
    std::vector<double> T;  // T[(s * A + a) * S + s2]
    Matrix r;               // S x A
    double gamma = 0.9;
    Vector d0;

    double trans(std::size_t s, std::size_t a, std::size_t s2) const { return T[(s * n_actions + a) * n_states + s2]; }

    void validate() const {
        require(n_states >= 1 && n_actions >= 1, "TabularMDP: empty state or action set");
        require(T.size() == n_states * n_actions * n_states, "TabularMDP: transition tensor has wrong size");
        require(r.rows() == static_cast<Eigen::Index>(n_states) && r.cols() == static_cast<Eigen::Index>(n_actions),
                "TabularMDP: reward table has wrong shape");
        require(r.allFinite(), "TabularMDP: non-finite reward");
        require(gamma >= 0.0 && gamma < 1.0, "TabularMDP: gamma must lie in [0, 1)");
        require(d0.size() == static_cast<Eigen::Index>(n_states), "TabularMDP: d0 has wrong size");
        require((d0.array() >= 0.0).all() && std::abs(d0.sum() - 1.0) <= 1e-12, "TabularMDP: d0 is not a distribution");
        for (std::size_t s = 0; s < n_states; ++s)
            for (std::size_t a = 0; a < n_actions; ++a) {
                double sum = 0.0;
                for (std::size_t s2 = 0; s2 < n_states; ++s2) {
                    const double p = trans(s, a, s2);
                    require(p >= 0.0, "TabularMDP: negative transition probability");
                    sum += p;
                }
                require(std::abs(sum - 1.0) <= 1e-12, "TabularMDP: transition row does not sum to 1");
            }
    }

    json to_json() const {
        json t = json::array();
        for (std::size_t s = 0; s < n_states; ++s) {
            json per_a = json::array();
            for (std::size_t a = 0; a < n_actions; ++a)
                per_a.push_back(std::vector<double>(T.begin() + static_cast<std::ptrdiff_t>((s * n_actions + a) * n_states),
                                                    T.begin() + static_cast<std::ptrdiff_t>((s * n_actions + a + 1) * n_states)));
            t.push_back(per_a);
        }
        json rr = json::array();
        for (Eigen::Index s = 0; s < r.rows(); ++s) {
            Vector row = r.row(s).transpose();
            rr.push_back(std::vector<double>(row.data(), row.data() + row.size()));
        }
        return {{"n_states", n_states}, {"n_actions", n_actions}, {"gamma", gamma}, {"T", t}, {"r", rr},
                {"d0", std::vector<double>(d0.data(), d0.data() + d0.size())}};
    }

    static TabularMDP from_json(const json& j) {
        TabularMDP m;
        try {
            m.n_states = j.at("n_states").get<std::size_t>();
            m.n_actions = j.at("n_actions").get<std::size_t>();
            m.gamma = j.at("gamma").get<double>();
            const auto t = j.at("T").get<std::vector<std::vector<std::vector<double>>>>();
            const auto rr = j.at("r").get<std::vector<std::vector<double>>>();
            const auto d0 = j.at("d0").get<std::vector<double>>();
            if (t.size() != m.n_states || rr.size() != m.n_states) throw ParseError("TabularMDP: state count mismatch");
            m.r.resize(static_cast<Eigen::Index>(m.n_states), static_cast<Eigen::Index>(m.n_actions));
            for (std::size_t s = 0; s < m.n_states; ++s) {
                if (t[s].size() != m.n_actions || rr[s].size() != m.n_actions)
                    throw ParseError("TabularMDP: action count mismatch");
                for (std::size_t a = 0; a < m.n_actions; ++a) {
                    if (t[s][a].size() != m.n_states) throw ParseError("TabularMDP: next-state count mismatch");
                    m.T.insert(m.T.end(), t[s][a].begin(), t[s][a].end());
                    m.r(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) = rr[s][a];
                }
            }
            m.d0 = Eigen::Map<const Vector>(d0.data(), static_cast<Eigen::Index>(d0.size()));
        } catch (const json::exception& e) {
            throw ParseError(std::string("TabularMDP: ") + e.what());
        }
        m.validate();
        return m;
    }
};

// Random dense MDP: transition rows and d0 are normalized uniforms, rewards U[-1, 1].
inline TabularMDP random_mdp(std::size_t n_states, std::size_t n_actions, double gamma, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    TabularMDP m;
    m.n_states = n_states;
    m.n_actions = n_actions;
    m.gamma = gamma;
    m.T.resize(n_states * n_actions * n_states);
    for (std::size_t row = 0; row < n_states * n_actions; ++row) {
        double sum = 0.0;
        for (std::size_t k = 0; k < n_states; ++k) sum += m.T[row * n_states + k] = u(rng) + 1e-3;
        for (std::size_t k = 0; k < n_states; ++k) m.T[row * n_states + k] /= sum;
    }
    m.r.resize(static_cast<Eigen::Index>(n_states), static_cast<Eigen::Index>(n_actions));
    for (Eigen::Index s = 0; s < m.r.rows(); ++s)
        for (Eigen::Index a = 0; a < m.r.cols(); ++a) m.r(s, a) = 2.0 * u(rng) - 1.0;
    m.d0.resize(static_cast<Eigen::Index>(n_states));
    for (auto& x : m.d0) x = u(rng) + 1e-3;
    m.d0 /= m.d0.sum();
    m.validate();
    return m;
}

// 0 where beta(a|s) >= eps (closed boundary), +inf otherwise.
inline double support_penalty(double log_beta, double eps) {
    require(eps > 0.0, "support_penalty: eps must be positive");
    return log_beta >= std::log(eps) ? 0.0 : kInfPenalty;
}

inline double brac_kl_penalty(double log_beta) { return -log_beta; }

// Biased (V-statistic) squared MMD with a Gaussian kernel
// k(x, y) = exp(-|x - y|^2 / (2 h^2)). Columns are samples.
inline double mmd2_penalty(const Matrix& policy_samples, const Matrix& behavior_samples, double bandwidth) {
    require(policy_samples.cols() >= 1 && behavior_samples.cols() >= 1, "mmd2_penalty: empty sample set");
    require(policy_samples.rows() == behavior_samples.rows(), "mmd2_penalty: dimension mismatch");
    require(bandwidth > 0.0, "mmd2_penalty: bandwidth must be positive");
    const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
    auto mean_kernel = [&](const Matrix& x, const Matrix& y) {
        double sum = 0.0;
        for (Eigen::Index i = 0; i < x.cols(); ++i)
            for (Eigen::Index j = 0; j < y.cols(); ++j) sum += std::exp(-(x.col(i) - y.col(j)).squaredNorm() * inv);
        return sum / static_cast<double>(x.cols() * y.cols());
    };
    return mean_kernel(policy_samples, policy_samples) + mean_kernel(behavior_samples, behavior_samples) -
           2.0 * mean_kernel(policy_samples, behavior_samples);
}

enum class PenaltyKind { support_set, brac_kl, mmd2 };

struct PenaltySpec {
    PenaltyKind kind = PenaltyKind::support_set;
    double eps = std::exp(-5.0);
    double bandwidth = 1.0;
    std::size_t samples = 4;
};

// Tabular penalty from a table of behavior log-probabilities. mmd2 compares
// distributions rather than single actions and has no per-action table.
inline Matrix penalty_table(const Matrix& log_beta, const PenaltySpec& spec) {
    Matrix p(log_beta.rows(), log_beta.cols());
    for (Eigen::Index s = 0; s < p.rows(); ++s)
        for (Eigen::Index a = 0; a < p.cols(); ++a) {
            switch (spec.kind) {
                case PenaltyKind::support_set: p(s, a) = support_penalty(log_beta(s, a), spec.eps); break;
                case PenaltyKind::brac_kl: p(s, a) = brac_kl_penalty(log_beta(s, a)); break;
                case PenaltyKind::mmd2: throw ContractViolation("penalty_table: mmd2 has no per-action table");
            }
        }
    return p;
}

// log sum exp(x) over the finite entries; -inf when none are finite.
inline double logsumexp(const Vector& x) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : x) m = std::max(m, v);
    if (!std::isfinite(m)) return m;
    double sum = 0.0;
    for (double v : x) sum += std::exp(v - m);
    return m + std::log(sum);
}

// softmax(logits) with -inf logits mapped to exactly 0.
inline Vector softmax(const Vector& logits) {
    const double lse = logsumexp(logits);
    require(std::isfinite(lse), "softmax: no finite logit");
    Vector out(logits.size());
    for (Eigen::Index i = 0; i < logits.size(); ++i)
        out[i] = logits[i] == -std::numeric_limits<double>::infinity() ? 0.0 : std::exp(logits[i] - lse);
    return out;
}

// pi_p = softmax(-p).
inline Vector induced_policy(const Vector& p_row) {
    for (double v : p_row) require(!std::isnan(v) && v != -kInfPenalty, "induced_policy: penalty must be in [finite, +inf]");
    bool any = false;
    for (double v : p_row) any = any || std::isfinite(v);
    require(any, "induced_policy: every action has infinite penalty (empty support)");
    return softmax(-p_row);
}

inline Matrix induced_policy(const Matrix& p) {
    Matrix out(p.rows(), p.cols());
    for (Eigen::Index s = 0; s < p.rows(); ++s) out.row(s) = induced_policy(Vector(p.row(s).transpose())).transpose();
    return out;
}

// <pi, x>, skipping zero-probability actions.
inline double expect(const Vector& pi, const Vector& x) {
    double sum = 0.0;
    for (Eigen::Index a = 0; a < pi.size(); ++a)
        if (pi[a] != 0.0) sum += pi[a] * x[a];
    return sum;
}

inline double entropy(const Vector& pi) {
    double h = 0.0;
    for (double p : pi)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

// KL(pi || q); throws when pi puts mass where q has none.
inline double kl_divergence(const Vector& pi, const Vector& q) {
    double kl = 0.0;
    for (Eigen::Index a = 0; a < pi.size(); ++a) {
        if (pi[a] == 0.0) continue;
        if (q[a] == 0.0) throw ContractViolation("kl_divergence: policy has mass outside the reference support");
        kl += pi[a] * (std::log(pi[a]) - std::log(q[a]));
    }
    return kl;
}

// Z(s) = ln sum_a exp(-p(s, a)).
inline double log_partition(const Vector& p_row) {
    const double z = logsumexp(-p_row);
    require(std::isfinite(z), "log_partition: every action has infinite penalty");
    return z;
}

struct TabularIterate {
    Matrix q;
    Matrix pi;
};

namespace detail {

inline void check_policy_table(const TabularMDP& mdp, const Matrix& q, const Matrix& pi) {
    require(q.rows() == static_cast<Eigen::Index>(mdp.n_states) && q.cols() == static_cast<Eigen::Index>(mdp.n_actions),
            "tabular step: Q has wrong shape");
    require(pi.rows() == q.rows() && pi.cols() == q.cols(), "tabular step: policy has wrong shape");
    for (Eigen::Index s = 0; s < pi.rows(); ++s)
        require((pi.row(s).array() >= 0.0).all() && std::abs(pi.row(s).sum() - 1.0) <= 1e-9,
                "tabular step: policy row is not a distribution");
}

// Q'(s, a) = r(s, a) + gamma * sum_s2 T(s, a, s2) v(s2)
inline Matrix bellman_backup(const TabularMDP& mdp, const Vector& v) {
    Matrix out = mdp.r;
    for (std::size_t s = 0; s < mdp.n_states; ++s)
        for (std::size_t a = 0; a < mdp.n_actions; ++a) {
            double ev = 0.0;
            for (std::size_t s2 = 0; s2 < mdp.n_states; ++s2) ev += mdp.trans(s, a, s2) * v[static_cast<Eigen::Index>(s2)];
            out(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) += mdp.gamma * ev;
        }
    return out;
}

}  // namespace detail

// Policy iteration with KL regularization toward pi_p:
//   Q'(s, a) = r + gamma E_s2[<pi, Q>(s2) - KL(pi(s2) || pi_p(s2))]
//   pi'(s) proportional to pi_p(s) exp(Q'(s))
inline TabularIterate kl_regularized_step(const TabularMDP& mdp, const Matrix& q, const Matrix& pi, const Matrix& pi_p) {
    detail::check_policy_table(mdp, q, pi);
    require(pi_p.rows() == q.rows() && pi_p.cols() == q.cols(), "kl_regularized_step: pi_p has wrong shape");
    Vector v(q.rows());
    for (Eigen::Index s = 0; s < q.rows(); ++s) {
        const Vector pis = pi.row(s).transpose(), qs = q.row(s).transpose(), ps = pi_p.row(s).transpose();
        v[s] = expect(pis, qs) - kl_divergence(pis, ps);
    }
    TabularIterate out{detail::bellman_backup(mdp, v), Matrix(q.rows(), q.cols())};
    for (Eigen::Index s = 0; s < q.rows(); ++s) {
        Vector logits(q.cols());
        for (Eigen::Index a = 0; a < q.cols(); ++a)
            logits[a] = pi_p(s, a) > 0.0 ? out.q(s, a) + std::log(pi_p(s, a)) : -std::numeric_limits<double>::infinity();
        out.pi.row(s) = softmax(logits).transpose();
    }
    return out;
}

// Soft policy iteration on the penalized value:
//   Q'(s, a) = r + gamma E_s2[<pi, Q - p>(s2) - Z(s2) + H(pi(s2))]
//   pi'(s) proportional to exp(Q'(s) - p(s))
inline TabularIterate penalized_soft_step(const TabularMDP& mdp, const Matrix& q, const Matrix& pi, const Matrix& p) {
    detail::check_policy_table(mdp, q, pi);
    require(p.rows() == q.rows() && p.cols() == q.cols(), "penalized_soft_step: penalty has wrong shape");
    Vector v(q.rows());
    for (Eigen::Index s = 0; s < q.rows(); ++s) {
        const Vector pis = pi.row(s).transpose(), ps = p.row(s).transpose();
        for (Eigen::Index a = 0; a < q.cols(); ++a)
            if (pis[a] > 0.0 && !std::isfinite(ps[a]))
                throw ContractViolation("penalized_soft_step: policy has mass on an infinite-penalty action");
        const Vector adv = (q.row(s) - p.row(s)).transpose();
        v[s] = expect(pis, adv) - log_partition(ps) + entropy(pis);
    }
    TabularIterate out{detail::bellman_backup(mdp, v), Matrix(q.rows(), q.cols())};
    for (Eigen::Index s = 0; s < q.rows(); ++s) {
        Vector logits(q.cols());
        for (Eigen::Index a = 0; a < q.cols(); ++a)
            logits[a] = std::isfinite(p(s, a)) ? out.q(s, a) - p(s, a) : -std::numeric_limits<double>::infinity();
        out.pi.row(s) = softmax(logits).transpose();
    }
    return out;
}

// |(<pi, Q> - KL(pi || softmax(-p))) - (<pi, Q - p> - Z + H(pi))| for one state.
inline double theorem1_identity_check(const Vector& pi, const Vector& q, const Vector& p) {
    require(pi.size() == q.size() && q.size() == p.size(), "theorem1_identity_check: size mismatch");
    const double lhs = expect(pi, q) - kl_divergence(pi, induced_policy(p));
    const double rhs = expect(pi, q - p) - log_partition(p) + entropy(pi);
    return std::abs(lhs - rhs);
}

struct Theorem1Trace {
    std::vector<double> q_residual;   // max |Q_kl - Q_pen| after each iteration
    std::vector<double> pi_residual;  // max |pi_kl - pi_pen|
    TabularIterate kl;
    TabularIterate penalized;

    double max_residual() const {
        double m = 0.0;
        for (std::size_t i = 0; i < q_residual.size(); ++i) m = std::max({m, q_residual[i], pi_residual[i]});
        return m;
    }
};

// Runs both schemes side by side from Q = 0, pi = pi_p.
inline Theorem1Trace run_theorem1(const TabularMDP& mdp, const Matrix& p, std::size_t iters) {
    mdp.validate();
    const Matrix pi_p = induced_policy(p);
    Theorem1Trace tr;
    tr.kl = {Matrix::Zero(p.rows(), p.cols()), pi_p};
    tr.penalized = tr.kl;
    for (std::size_t i = 0; i < iters; ++i) {
        tr.kl = kl_regularized_step(mdp, tr.kl.q, tr.kl.pi, pi_p);
        tr.penalized = penalized_soft_step(mdp, tr.penalized.q, tr.penalized.pi, p);
        tr.q_residual.push_back((tr.kl.q - tr.penalized.q).cwiseAbs().maxCoeff());
        tr.pi_residual.push_back((tr.kl.pi - tr.penalized.pi).cwiseAbs().maxCoeff());
    }
    return tr;
}

}  // namespace arq
