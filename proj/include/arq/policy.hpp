#pragma once

// Policy extraction from a trained Q ensemble: the implicit softmax policy
// over in-support candidates, an advantage-weighted regression policy, and
// rollout evaluation.

#include <functional>

#include "arq/arq.hpp"
#include "arq/envs.hpp"

namespace arq {

// A(s, a) = Q(s, a) - mean over candidates of Q(s, a').
inline Vector advantage(const QEnsemble& q, const Vector& state, const Matrix& candidates) {
    require(candidates.cols() >= 1, "advantage: no candidates");
    Vector v = q.value(state, candidates);
    return v.array() - v.mean();
}

enum class LogitMode { q_logits, advantage_logits };

inline LogitMode logit_mode_from_string(std::string_view s) {
    if (s == "q") return LogitMode::q_logits;
    if (s == "advantage") return LogitMode::advantage_logits;
    throw ContractViolation("unknown logit mode '" + std::string(s) + "'");
}

// softmax(alpha * logits) with the max subtracted first.
inline Vector softmax_probabilities(const Vector& logits, double alpha) {
    require(logits.size() >= 1, "softmax_probabilities: no candidates");
    require(alpha >= 0.0, "softmax_probabilities: alpha must be >= 0");
    Vector z = alpha * logits;
    z.array() -= z.maxCoeff();
    Vector p = z.array().exp();
    return p / p.sum();
}

// Inverse-CDF draw from a probability vector.
inline std::size_t draw_index(const Vector& probs, Rng& rng) {
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return static_cast<std::size_t>(i);
    }
    for (Eigen::Index i = probs.size(); i-- > 0;)
        if (probs[i] > 0.0) return static_cast<std::size_t>(i);
    return 0;
}

struct ImplicitConfig {
    double alpha = 10.0;
    LogitMode mode = LogitMode::q_logits;
    std::size_t n = 30;
    double eps = std::exp(-5.0);
    SamplerConfig sampler{100, 0.16, 1};
    LikelihoodConfig likelihood;
    std::size_t max_resamples = 3;
};

// softmax(alpha * Q) (or alpha * A) over in-support candidates. Known
// dataset states use their cached candidates; other states are sampled from
// the score model on the fly and filtered by likelihood.
struct ImplicitPolicy {
    const QEnsemble* q = nullptr;
    const ScoreModel* model = nullptr;
    const SupportCache* cache = nullptr;
    std::shared_ptr<const StateIndex> index;
    ImplicitConfig cfg;

    ImplicitPolicy(const QEnsemble& q_, const ScoreModel* model_, const SupportCache* cache_,
                   const OfflineDataset* data, ImplicitConfig cfg_)
        : q(&q_), model(model_), cache(cache_), cfg(cfg_) {
        require(cfg.alpha >= 0.0, "ImplicitPolicy: alpha must be >= 0");
        if (cache && data) index = std::make_shared<StateIndex>(*data);
        require(model || index, "ImplicitPolicy: needs a score model or a cache with its dataset");
    }
    // Only a pointer to q is kept.
    ImplicitPolicy(QEnsemble&&, const ScoreModel*, const SupportCache*, const OfflineDataset*, ImplicitConfig) = delete;

    // Normalized candidate actions for `state`.
    Matrix candidates(const Vector& state, Rng& rng) const {
        if (index) {
            if (auto row = index->find(state)) {
                const auto& e = cache->at(*row, Slot::s);
                if (e.size() > 0) return e.actions;
            }
        }
        if (!model) throw ContractViolation("ImplicitPolicy: state not in the cache and no score model to sample from");
        for (std::size_t attempt = 0; attempt <= cfg.max_resamples; ++attempt) {
            auto smp = sample_in_support(*model, state, cfg.n, cfg.eps, cfg.sampler, cfg.likelihood, rng);
            if (!smp.logp.empty()) return smp.actions;
        }
        throw NumericalError("ImplicitPolicy: no in-support candidate after resampling");
    }

    Vector probabilities(const Vector& state, const Matrix& cands) const {
        const Vector logits = cfg.mode == LogitMode::q_logits ? q->value(state, cands) : advantage(*q, state, cands);
        return softmax_probabilities(logits, cfg.alpha);
    }
};

// One normalized action from the implicit policy.
inline Vector implicit_sample(const ImplicitPolicy& pol, const Vector& state, Rng& rng) {
    const Matrix cands = pol.candidates(state, rng);
    return cands.col(static_cast<Eigen::Index>(draw_index(pol.probabilities(state, cands), rng)));
}

// tanh-squashed mean network with an optional state-independent Gaussian head.
struct AwrPolicy {
    Mlp net;
    Vector log_std;
    ActionNormalizer bounds;

    Matrix mean(const Matrix& states) const { return mlp_forward(net, states).array().tanh(); }
    Vector mean(const Vector& state) const { return mlp_forward(net, state).array().tanh(); }

    // Normalized action; the Gaussian draw is clipped to [-1, 1].
    Vector act(const Vector& state, Rng& rng, bool deterministic = true) const {
        Vector mu = mean(state);
        if (deterministic) return mu;
        std::normal_distribution<double> normal;
        for (Eigen::Index d = 0; d < mu.size(); ++d) mu[d] += std::exp(log_std[d]) * normal(rng);
        return mu.cwiseMax(-1.0).cwiseMin(1.0);
    }
};

struct AwrConfig {
    double alpha = 10.0;
    std::vector<std::size_t> hidden{64, 64};
    std::size_t steps = 20000;
    std::size_t batch = 256;
    double lr = 1e-3;
    double weight_clip = 100.0;
    double init_log_std = -1.0;
    std::uint64_t seed = 0;
};

struct AwrTrainResult {
    AwrPolicy policy;
    Vector weights;              // per dataset row, after clipping
    std::vector<double> losses;  // one per step
};

// Per-row weights min(exp(alpha * A(s, a)), clip), with the advantage
// baseline taken over the cached candidates of s.
inline Vector awr_weights(const OfflineDataset& data, const QEnsemble& q, const SupportCache& cache, double alpha,
                          double clip) {
    require(cache.rows() == data.size(), "awr_weights: support cache does not match the dataset");
    const Matrix actions = data.normalized_actions();
    Vector w(static_cast<Eigen::Index>(data.size()));
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& e = cache.at(i, Slot::s);
        require(e.size() >= 1, "awr_weights: no cached actions for row " + std::to_string(i));
        Matrix cands(e.actions.rows(), e.actions.cols() + 1);
        cands.leftCols(e.actions.cols()) = e.actions;
        cands.rightCols(1) = actions.col(static_cast<Eigen::Index>(i));
        const Vector v = q.value(data.transitions[i].s, cands);
        const double a = v[v.size() - 1] - v.head(v.size() - 1).mean();
        w[static_cast<Eigen::Index>(i)] = std::min(std::exp(alpha * a), clip);
    }
    if (!w.allFinite()) throw NumericalError("awr_weights: non-finite weight after clipping");
    return w;
}

// Minimizes -mean_i w_i log N(a_i; tanh(f(s_i)), diag(exp(2 log_std))).
inline AwrTrainResult awr_train(const OfflineDataset& data, const QEnsemble& q, const SupportCache& cache,
                                const AwrConfig& cfg) {
    require(data.size() >= 1, "awr_train: empty dataset");
    require(cfg.alpha >= 0.0 && cfg.lr > 0.0 && cfg.batch >= 1, "awr_train: invalid config");
    AwrTrainResult res;
    res.weights = awr_weights(data, q, cache, cfg.alpha, cfg.weight_clip);
    Rng rng(cfg.seed);
    auto& pol = res.policy;
    const auto sd = static_cast<Eigen::Index>(data.header.state_dim);
    const auto ad = static_cast<Eigen::Index>(data.header.action_dim);
    pol.net = Mlp::plain(data.header.state_dim, cfg.hidden, data.header.action_dim, Activation::relu);
    pol.net.init_uniform(rng);
    pol.log_std = Vector::Constant(ad, cfg.init_log_std);
    pol.bounds = data.header.bounds;

    const Matrix states = data.states();
    const Matrix actions = data.normalized_actions();
    const auto b = static_cast<Eigen::Index>(cfg.batch);
    AdamState adam_net(pol.net.param_count()), adam_std(static_cast<std::size_t>(ad));
    std::uniform_int_distribution<Eigen::Index> pick(0, static_cast<Eigen::Index>(data.size()) - 1);
    Tape tape;
    ParamBuffer grads;
    std::vector<double> grad_std(static_cast<std::size_t>(ad));
    Matrix in(sd, b), grad_u(ad, b);
    std::vector<Eigen::Index> rows(cfg.batch);
    const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        for (Eigen::Index i = 0; i < b; ++i) {
            rows[static_cast<std::size_t>(i)] = pick(rng);
            in.col(i) = states.col(rows[static_cast<std::size_t>(i)]);
        }
        const Matrix& u = mlp_forward(pol.net, in, tape);
        std::fill(grad_std.begin(), grad_std.end(), 0.0);
        double loss = 0.0;
        for (Eigen::Index i = 0; i < b; ++i) {
            const auto row = rows[static_cast<std::size_t>(i)];
            const double w = res.weights[row] / static_cast<double>(b);
            for (Eigen::Index d = 0; d < ad; ++d) {
                const double mu = std::tanh(u(d, i));
                const double inv_var = std::exp(-2.0 * pol.log_std[d]);
                const double diff = actions(d, row) - mu;
                loss += w * (0.5 * diff * diff * inv_var + pol.log_std[d] + half_log_2pi);
                grad_u(d, i) = -w * diff * inv_var * (1.0 - mu * mu);
                grad_std[static_cast<std::size_t>(d)] += w * (1.0 - diff * diff * inv_var);
            }
        }
        if (!std::isfinite(loss)) throw NumericalError("awr_train: non-finite loss at step " + std::to_string(step));
        grads.assign(pol.net.param_count(), 0.0);
        mlp_backward_into(pol.net, tape, grad_u, grads);
        adam_step(adam_net, pol.net.params(), grads, cfg.lr);
        adam_step(adam_std, std::span<double>(pol.log_std.data(), static_cast<std::size_t>(ad)), grad_std, cfg.lr);
        res.losses.push_back(loss);
    }
    quantize_f32(pol.net);
    for (auto& x : pol.log_std) x = static_cast<double>(static_cast<float>(x));
    return res;
}

inline Checkpoint to_checkpoint(const AwrPolicy& p) {
    Checkpoint c;
    c.meta = {{"kind", "awr_policy"}, {"bounds", p.bounds.to_json()}};
    c.networks = {{"policy", p.net}};
    c.vectors = {{"log_std", std::vector<double>(p.log_std.data(), p.log_std.data() + p.log_std.size())}};
    return c;
}

inline AwrPolicy awr_policy_from_checkpoint(const Checkpoint& c) {
    if (c.meta.value("kind", "") != "awr_policy") throw ParseError("checkpoint is not an AWR policy");
    AwrPolicy p;
    p.net = c.network("policy");
    const auto& ls = c.vector("log_std");
    p.log_std = Eigen::Map<const Vector>(ls.data(), static_cast<Eigen::Index>(ls.size()));
    p.bounds = ActionNormalizer::from_json(c.meta.at("bounds"));
    if (p.net.output_dim() != ls.size() || p.bounds.dim() != ls.size())
        throw ParseError("AWR checkpoint dims are inconsistent");
    return p;
}

// Maps a state to a raw (environment-space) action.
using PolicyFn = std::function<Vector(const Vector& state, Rng& rng)>;

struct EvalResult {
    std::size_t episodes = 0;
    double mean_return = 0.0;
    double std_return = 0.0;
    double mean_discounted = 0.0;
    std::vector<double> returns;
};

// Episode e runs on substream (seed, e) and is truncated at the env horizon.
// `policy` must be safe to call concurrently when threads > 1.
inline EvalResult evaluate_policy(const ToyEnv& env, const PolicyFn& policy, std::size_t n_episodes, double gamma,
                                  std::uint64_t seed, std::size_t threads = 1) {
    require(n_episodes >= 1, "evaluate_policy: n_episodes must be >= 1");
    std::vector<double> ret(n_episodes), disc(n_episodes);
    auto run = [&](std::size_t e) {
        Rng rng = substream(seed, e);
        Vector s = env.reset(rng);
        double total = 0.0, discounted = 0.0, g = 1.0;
        for (std::size_t t = 0; t < env.descriptor().horizon; ++t) {
            StepResult r;
            try {
                r = env.step(s, policy(s, rng), rng);
            } catch (const ContractViolation& ex) {
                throw ContractViolation("evaluate_policy: episode " + std::to_string(e) + " step " + std::to_string(t) +
                                        ": " + ex.what());
            } catch (const NumericalError& ex) {
                throw NumericalError("evaluate_policy: episode " + std::to_string(e) + " step " + std::to_string(t) +
                                     ": " + ex.what());
            }
            total += r.reward;
            discounted += g * r.reward;
            g *= gamma;
            if (r.done) break;
            s = r.next_state;
        }
        ret[e] = total;
        disc[e] = discounted;
    };
    threads = std::max<std::size_t>(1, std::min(threads, n_episodes));
    if (threads == 1) {
        for (std::size_t e = 0; e < n_episodes; ++e) run(e);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(threads);
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < threads; ++w)
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t e = next++; e < n_episodes; e = next++) run(e);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        for (auto& t : pool) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    EvalResult out;
    out.episodes = n_episodes;
    const double n = static_cast<double>(n_episodes);
    for (std::size_t e = 0; e < n_episodes; ++e) {
        out.mean_return += ret[e] / n;
        out.mean_discounted += disc[e] / n;
    }
    double var = 0.0;
    for (double r : ret) var += (r - out.mean_return) * (r - out.mean_return) / n;
    out.std_return = std::sqrt(var);
    out.returns = std::move(ret);
    return out;
}

inline nlohmann::ordered_json eval_report(const std::string& policy, const std::string& env, const EvalResult& r) {
    nlohmann::ordered_json j;
    j["policy"] = policy;
    j["env"] = env;
    j["episodes"] = r.episodes;
    j["mean_return"] = r.mean_return;
    j["std_return"] = r.std_return;
    j["mean_discounted"] = r.mean_discounted;
    return j;
}

}  // namespace arq
