#pragma once

// Action-restricted Q-learning: fitted Q iteration whose bootstrap only
// evaluates actions from the support cache, with a K-th-max order statistic,
// clipped double Q and polyak-averaged targets.

#include <algorithm>
#include <fstream>
#include <functional>

#include "arq/sampling.hpp"

namespace arq {

// K-th largest value; K beyond the list length gives the minimum.
inline double kth_max(std::span<const double> values, std::size_t k) {
    require(!values.empty(), "kth_max: empty candidate list");
    require(k >= 1, "kth_max: K must be >= 1");
    std::vector<double> v(values.begin(), values.end());
    const std::size_t idx = std::min(k, v.size()) - 1;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(idx), v.end(), std::greater<>());
    return v[idx];
}

enum class QLoss { squared_l2, huber };
enum class RewardMode { raw, normalized, minus_one_except_goal };
enum class QMode { arq, qbeta };

inline RewardMode reward_mode_from_string(std::string_view s) {
    if (s == "raw") return RewardMode::raw;
    if (s == "normalized") return RewardMode::normalized;
    if (s == "minus_one_except_goal") return RewardMode::minus_one_except_goal;
    throw ContractViolation("unknown reward mode '" + std::string(s) + "'");
}
inline std::string_view to_string(RewardMode m) {
    switch (m) {
        case RewardMode::raw: return "raw";
        case RewardMode::normalized: return "normalized";
        case RewardMode::minus_one_except_goal: return "minus_one_except_goal";
    }
    return "?";
}
inline QLoss q_loss_from_string(std::string_view s) {
    if (s == "huber") return QLoss::huber;
    if (s == "squared_l2") return QLoss::squared_l2;
    throw ContractViolation("unknown loss '" + std::string(s) + "'");
}
inline std::string_view to_string(QLoss l) { return l == QLoss::huber ? "huber" : "squared_l2"; }
inline QMode q_mode_from_string(std::string_view s) {
    if (s == "arq") return QMode::arq;
    if (s == "qbeta") return QMode::qbeta;
    throw ContractViolation("unknown q-train mode '" + std::string(s) + "'");
}
inline std::string_view to_string(QMode m) { return m == QMode::arq ? "arq" : "qbeta"; }

// Q networks over state ⊕ normalized action. qbeta mode uses a single net.
struct QEnsemble {
    std::vector<Mlp> online;
    std::vector<Mlp> target;
    double polyak = 0.995;
    std::size_t state_dim = 0;
    std::size_t action_dim = 0;
    ActionNormalizer bounds;

    static QEnsemble create(std::size_t state_dim, std::size_t action_dim, const std::vector<std::size_t>& hidden,
                            std::size_t n_nets, Rng& rng) {
        require(n_nets == 1 || n_nets == 2, "QEnsemble: one or two networks");
        QEnsemble q;
        q.state_dim = state_dim;
        q.action_dim = action_dim;
        for (std::size_t k = 0; k < n_nets; ++k) {
            q.online.push_back(Mlp::plain(state_dim + action_dim, hidden, 1, Activation::relu));
            q.online.back().init_uniform(rng);
        }
        q.target = q.online;
        return q;
    }

    Matrix inputs(const Matrix& states, const Matrix& actions) const {
        require(states.cols() == actions.cols(), "QEnsemble: state/action count mismatch");
        require(static_cast<std::size_t>(states.rows()) == state_dim &&
                    static_cast<std::size_t>(actions.rows()) == action_dim,
                "QEnsemble: input dimension mismatch");
        Matrix in(states.rows() + actions.rows(), states.cols());
        in.topRows(states.rows()) = states;
        in.bottomRows(actions.rows()) = actions;
        return in;
    }

    // Per-column minimum over the online (or target) networks.
    Vector value(const Matrix& states, const Matrix& actions, bool use_target = false) const {
        const Matrix in = inputs(states, actions);
        const auto& nets = use_target ? target : online;
        Vector out = mlp_forward(nets[0], in).row(0).transpose();
        for (std::size_t k = 1; k < nets.size(); ++k) out = out.cwiseMin(mlp_forward(nets[k], in).row(0).transpose());
        return out;
    }

    // Q(state, a) for every column of `actions`.
    Vector value(const Vector& state, const Matrix& actions, bool use_target = false) const {
        return value(Matrix(state.replicate(1, actions.cols())), actions, use_target);
    }

    void polyak_update() {
        for (std::size_t k = 0; k < online.size(); ++k) ema_update(target[k].params(), online[k].params(), polyak);
    }
};

inline Checkpoint to_checkpoint(const QEnsemble& q, QMode mode) {
    Checkpoint c;
    c.meta = {{"kind", "q_ensemble"},   {"mode", to_string(mode)},   {"state_dim", q.state_dim},
              {"action_dim", q.action_dim}, {"polyak", q.polyak}, {"bounds", q.bounds.to_json()}};
    for (std::size_t k = 0; k < q.online.size(); ++k) {
        c.networks.emplace_back("q" + std::to_string(k), q.online[k]);
        c.networks.emplace_back("target" + std::to_string(k), q.target[k]);
    }
    return c;
}

inline QEnsemble q_ensemble_from_checkpoint(const Checkpoint& c) {
    if (c.meta.value("kind", "") != "q_ensemble") throw ParseError("checkpoint is not a Q ensemble");
    QEnsemble q;
    try {
        q.state_dim = c.meta.at("state_dim").get<std::size_t>();
        q.action_dim = c.meta.at("action_dim").get<std::size_t>();
        q.polyak = c.meta.at("polyak").get<double>();
        q.bounds = ActionNormalizer::from_json(c.meta.at("bounds"));
    } catch (const json::exception& e) {
        throw ParseError(std::string("Q checkpoint meta: ") + e.what());
    }
    for (std::size_t k = 0; k < 2; ++k) {
        const auto name = "q" + std::to_string(k);
        bool present = false;
        for (const auto& [n, net] : c.networks) present = present || n == name;
        if (!present) break;
        q.online.push_back(c.network(name));
        q.target.push_back(c.network("target" + std::to_string(k)));
    }
    if (q.online.empty()) throw ParseError("Q checkpoint holds no networks");
    for (const auto& net : q.online)
        if (net.input_dim() != q.state_dim + q.action_dim || net.output_dim() != 1)
            throw ParseError("Q checkpoint network shape does not match its meta");
    return q;
}

struct ArqConfig {
    QMode mode = QMode::arq;
    std::size_t k = 9;
    double gamma = 0.99;
    QLoss loss = QLoss::huber;
    double huber_delta = 1.0;
    double lr = 3e-4;
    std::size_t steps = 50000;
    std::size_t batch = 256;
    double polyak = 0.995;
    std::vector<std::size_t> hidden{64, 64};
    RewardMode reward_mode = RewardMode::raw;
    double reward_scale = 1000.0;
    std::size_t log_every = 100;
    std::uint64_t seed = 0;

    void validate() const {
        require(k >= 1, "ArqConfig: K must be >= 1");
        require(gamma >= 0.0 && gamma < 1.0, "ArqConfig: gamma must lie in [0, 1)");
        require(lr > 0.0, "ArqConfig: lr must be positive");
        require(batch >= 1, "ArqConfig: batch must be >= 1");
        require(polyak >= 0.0 && polyak <= 1.0, "ArqConfig: polyak must lie in [0, 1]");
        require(huber_delta > 0.0, "ArqConfig: huber_delta must be positive");
        require(log_every >= 1, "ArqConfig: log_every must be >= 1");
    }
};

// Bootstrap target from already-evaluated min-over-targets values.
inline double arq_target(double r, bool done, std::span<const double> next_values, double gamma, std::size_t k) {
    if (done || gamma == 0.0) return r;
    return r + gamma * kth_max(next_values, k);
}

// r + gamma * Kth_{a' in support} min_k Q_target,k(s2, a'); r when done.
inline double arq_target(const Transition& t, const Matrix& support_s2, const QEnsemble& q, const ArqConfig& cfg) {
    if (t.done || cfg.gamma == 0.0) return t.r;
    require(support_s2.cols() >= 1, "arq_target: empty support for next state");
    const Vector v = q.value(t.s2, support_s2, true);
    return arq_target(t.r, t.done, std::span<const double>(v.data(), static_cast<std::size_t>(v.size())), cfg.gamma,
                      cfg.k);
}

// raw: identity. normalized: r * scale / (best - worst) over trajectory
// returns. minus_one_except_goal: 0 on goal rows, -1 elsewhere.
inline OfflineDataset shape_rewards(const OfflineDataset& d, RewardMode mode, double scale = 1000.0) {
    OfflineDataset out = d;
    switch (mode) {
        case RewardMode::raw: break;
        case RewardMode::minus_one_except_goal:
            for (auto& t : out.transitions) t.r = t.goal ? 0.0 : -1.0;
            break;
        case RewardMode::normalized: {
            require(!d.transitions.empty(), "shape_rewards: empty dataset");
            double best = -std::numeric_limits<double>::infinity(), worst = std::numeric_limits<double>::infinity();
            for (auto [b, e] : split_trajectories(d)) {
                double ret = 0.0;
                for (std::size_t i = b; i < e; ++i) ret += d.transitions[i].r;
                best = std::max(best, ret);
                worst = std::min(worst, ret);
            }
            if (!(best > worst)) throw ContractViolation("shape_rewards: best and worst trajectory returns are equal");
            const double factor = scale / (best - worst);
            for (auto& t : out.transitions) t.r *= factor;
            break;
        }
    }
    return out;
}

struct ArqLogRow {
    std::size_t step = 0;
    double loss = 0.0;
    double mean_target = 0.0;
    double mean_q = 0.0;
};

struct ArqTrainResult {
    QEnsemble q;
    std::vector<ArqLogRow> log;
    // Bootstrap evaluations of actions that are not in the s2 cache entry.
    std::size_t out_of_cache = 0;
};

inline std::string arq_log_csv(const std::vector<ArqLogRow>& log) {
    std::string out = "step,loss,mean_target,mean_q\n";
    char buf[128];
    for (const auto& r : log) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", r.step, r.loss, r.mean_target, r.mean_q);
        out += buf;
    }
    return out;
}

namespace detail {

inline bool column_in(const Matrix& m, const Eigen::Ref<const Vector>& v) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        if (m.col(j) == v) return true;
    return false;
}

}  // namespace detail

// Fitted Q iteration over the dataset. arq mode bootstraps with the K-th max
// over every cached s2 action; qbeta mode uses a single net and one uniformly
// drawn cached action (K = 1), i.e. evaluation of the behavior policy.
inline ArqTrainResult arq_train(const OfflineDataset& data, const SupportCache& cache, const ArqConfig& cfg) {
    cfg.validate();
    require(data.size() >= 1, "arq_train: empty dataset");
    require(cache.rows() == data.size(), "arq_train: support cache does not match the dataset");
    const OfflineDataset d = shape_rewards(data, cfg.reward_mode, cfg.reward_scale);
    for (std::size_t i = 0; i < d.size(); ++i)
        if (!d.transitions[i].done && cache.at(i, Slot::s2).size() == 0)
            throw ContractViolation("arq_train: support cache has no actions for s2 of row " + std::to_string(i));

    Rng rng(cfg.seed);
    ArqTrainResult res;
    const std::size_t n_nets = cfg.mode == QMode::arq ? 2 : 1;
    const std::size_t k = cfg.mode == QMode::arq ? cfg.k : 1;
    res.q = QEnsemble::create(d.header.state_dim, d.header.action_dim, cfg.hidden, n_nets, rng);
    res.q.polyak = cfg.polyak;
    res.q.bounds = d.header.bounds;
    auto& q = res.q;

    const Matrix states = d.states();
    const Matrix actions = d.normalized_actions();
    const auto sd = static_cast<Eigen::Index>(d.header.state_dim);
    const auto ad = static_cast<Eigen::Index>(d.header.action_dim);
    const auto batch = static_cast<Eigen::Index>(cfg.batch);
    std::uniform_int_distribution<std::size_t> pick_row(0, d.size() - 1);

    std::vector<AdamState> adam;
    for (const auto& net : q.online) adam.emplace_back(net.param_count());
    std::vector<Tape> tapes(n_nets), target_tapes(n_nets);
    ParamBuffer grads;
    // The bootstrap batch keeps one width for the whole run (unused columns
    // stay zero) so its buffers are allocated once.
    std::size_t widest = 1;
    if (cfg.mode == QMode::arq)
        for (const auto& e : cache.entries) widest = std::max(widest, e.size());
    Matrix in(sd + ad, batch), grad_out(1, batch), boot = Matrix::Zero(sd + ad, batch * static_cast<Eigen::Index>(widest));
    Vector y(batch);
    std::vector<std::size_t> rows(cfg.batch);
    std::vector<double> next_values;
    Vector tv;
    ArqLogRow window;
    std::size_t window_n = 0;

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        for (auto& r : rows) r = pick_row(rng);

        // Gather every bootstrap candidate of the batch into one target-net call.
        std::vector<std::pair<Eigen::Index, Eigen::Index>> span(cfg.batch, {0, 0});
        Eigen::Index total = 0;
        std::vector<std::size_t> choice(cfg.batch, 0);
        for (std::size_t i = 0; i < cfg.batch; ++i) {
            const auto& t = d.transitions[rows[i]];
            if (t.done || cfg.gamma == 0.0) continue;
            const auto& e = cache.at(rows[i], Slot::s2);
            const Eigen::Index m = cfg.mode == QMode::arq ? e.actions.cols() : 1;
            if (cfg.mode == QMode::qbeta) choice[i] = std::uniform_int_distribution<std::size_t>(0, e.size() - 1)(rng);
            span[i] = {total, m};
            total += m;
        }
        if (total > 0) {
            for (std::size_t i = 0; i < cfg.batch; ++i) {
                const auto [off, m] = span[i];
                if (m == 0) continue;
                const auto& e = cache.at(rows[i], Slot::s2);
                boot.block(0, off, sd, m) = d.transitions[rows[i]].s2.replicate(1, m);
                if (cfg.mode == QMode::arq) boot.block(sd, off, ad, m) = e.actions;
                else boot.block(sd, off, ad, 1) = e.actions.col(static_cast<Eigen::Index>(choice[i]));
                for (Eigen::Index j = 0; j < m; ++j)
                    if (!detail::column_in(e.actions, boot.block(sd, off + j, ad, 1))) ++res.out_of_cache;
            }
        }
        if (total > 0) {
            tv = mlp_forward(q.target[0], boot, target_tapes[0]).row(0).transpose();
            for (std::size_t kk = 1; kk < n_nets; ++kk)
                tv = tv.cwiseMin(mlp_forward(q.target[kk], boot, target_tapes[kk]).row(0).transpose());
        }
        for (std::size_t i = 0; i < cfg.batch; ++i) {
            const auto& t = d.transitions[rows[i]];
            const auto [off, m] = span[i];
            if (m == 0) {
                y[static_cast<Eigen::Index>(i)] = t.r;
                continue;
            }
            next_values.assign(tv.data() + off, tv.data() + off + m);
            y[static_cast<Eigen::Index>(i)] = arq_target(t.r, false, next_values, cfg.gamma, k);
        }

        for (std::size_t i = 0; i < cfg.batch; ++i) {
            in.block(0, static_cast<Eigen::Index>(i), sd, 1) = states.col(static_cast<Eigen::Index>(rows[i]));
            in.block(sd, static_cast<Eigen::Index>(i), ad, 1) = actions.col(static_cast<Eigen::Index>(rows[i]));
        }
        double loss = 0.0, mean_q = 0.0;
        for (std::size_t kk = 0; kk < n_nets; ++kk) {
            const Matrix& pred = mlp_forward(q.online[kk], in, tapes[kk]);
            for (Eigen::Index i = 0; i < batch; ++i) {
                const double diff = pred(0, i) - y[i];
                double g;
                if (cfg.loss == QLoss::squared_l2) {
                    loss += diff * diff;
                    g = 2.0 * diff;
                } else if (std::abs(diff) <= cfg.huber_delta) {
                    loss += 0.5 * diff * diff;
                    g = diff;
                } else {
                    loss += cfg.huber_delta * (std::abs(diff) - 0.5 * cfg.huber_delta);
                    g = cfg.huber_delta * (diff > 0 ? 1.0 : -1.0);
                }
                grad_out(0, i) = g / static_cast<double>(batch);
                mean_q += pred(0, i);
            }
            grads.assign(q.online[kk].param_count(), 0.0);
            mlp_backward_into(q.online[kk], tapes[kk], grad_out, grads);
            if (!std::isfinite(loss))
                throw NumericalError("arq_train: non-finite loss at step " + std::to_string(step));
            adam_step(adam[kk], q.online[kk].params(), grads, cfg.lr);
        }
        loss /= static_cast<double>(batch);
        mean_q /= static_cast<double>(batch * static_cast<Eigen::Index>(n_nets));
        q.polyak_update();

        window.loss += loss;
        window.mean_target += y.mean();
        window.mean_q += mean_q;
        ++window_n;
        if ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps) {
            const double w = static_cast<double>(window_n);
            res.log.push_back({step + 1, window.loss / w, window.mean_target / w, window.mean_q / w});
            window = {};
            window_n = 0;
        }
    }
    for (auto& net : q.online) quantize_f32(net);
    for (auto& net : q.target) quantize_f32(net);
    return res;
}

}  // namespace arq
