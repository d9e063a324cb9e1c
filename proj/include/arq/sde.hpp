#pragma once

// Variance-preserving SDE and the conditional score model s(s, a, t).
//
// Forward process: da = -1/2 beta(t) a dt + sqrt(beta(t)) dW with
// beta(t) = beta_min + t (beta_max - beta_min). The network predicts the
// scaled quantity std(t) * score, so the score is net(s, a, emb(t)) / std(t).

#include <numbers>
#include <optional>

#include "arq/checkpoint.hpp"
#include "arq/dataset.hpp"
#include "arq/nn.hpp"

namespace arq {

struct SdeConfig {
    double beta_min = 0.1;
    double beta_max = 20.0;
    double t_min = 1e-3;
    double t_max = 1.0;
    int n_discretization = 500;

    void validate() const {
        require(beta_min > 0.0 && beta_max > beta_min, "SdeConfig: need 0 < beta_min < beta_max");
        require(t_min > 0.0 && t_min < t_max && t_max <= 1.0, "SdeConfig: need 0 < t_min < t_max <= 1");
        require(n_discretization >= 2, "SdeConfig: n_discretization must be >= 2");
    }
    double beta(double t) const { return beta_min + t * (beta_max - beta_min); }
    // \int_0^t beta
    double beta_integral(double t) const { return beta_min * t + 0.5 * t * t * (beta_max - beta_min); }

    json to_json() const {
        return {{"beta_min", beta_min}, {"beta_max", beta_max}, {"t_min", t_min}, {"t_max", t_max},
                {"n_discretization", n_discretization}};
    }
    static SdeConfig from_json(const json& j) {
        SdeConfig c;
        c.beta_min = j.at("beta_min").get<double>();
        c.beta_max = j.at("beta_max").get<double>();
        c.t_min = j.at("t_min").get<double>();
        c.t_max = j.at("t_max").get<double>();
        c.n_discretization = j.at("n_discretization").get<int>();
        c.validate();
        return c;
    }
};

struct Marginal {
    double mean_coef = 1.0;
    double std = 0.0;
};

inline Marginal vpsde_marginal(double t, const SdeConfig& sde) {
    if (!(t >= 0.0 && t <= sde.t_max))
        throw ContractViolation("vpsde_marginal: t=" + std::to_string(t) + " outside [0, t_max]");
    const double integral = sde.beta_integral(t);
    return {std::exp(-0.5 * integral), std::sqrt(-std::expm1(-integral))};
}

inline Vector perturb(const Vector& a0, double t, const Vector& noise, const SdeConfig& sde) {
    require(a0.size() == noise.size(), "perturb: noise dim must equal action dim");
    const auto m = vpsde_marginal(t, sde);
    return m.mean_coef * a0 + m.std * noise;
}

// sin/cos at 8 geometrically spaced angular frequencies from 1 to 100.
inline constexpr std::size_t kTimeFrequencies = 8;
inline constexpr std::size_t kTimeFeatures = 2 * kTimeFrequencies;

inline void time_features(double t, Eigen::Ref<Vector> out) {
    for (std::size_t k = 0; k < kTimeFrequencies; ++k) {
        const double w = std::pow(100.0, static_cast<double>(k) / (kTimeFrequencies - 1));
        out[static_cast<Eigen::Index>(2 * k)] = std::sin(w * t);
        out[static_cast<Eigen::Index>(2 * k + 1)] = std::cos(w * t);
    }
}

struct ScoreNetConfig {
    std::size_t width = 64;
    std::size_t blocks = 3;
};

struct ScoreModel {
    Mlp net;  // online weights
    Mlp ema;  // evaluation weights
    SdeConfig sde;
    std::size_t state_dim = 0;
    std::size_t action_dim = 0;
    std::optional<ActionNormalizer> normalizer;

    static ScoreModel create(std::size_t state_dim, std::size_t action_dim, const ScoreNetConfig& cfg,
                             const SdeConfig& sde, Rng& rng) {
        sde.validate();
        ScoreModel m;
        m.net = Mlp::residual(state_dim + action_dim + kTimeFeatures, cfg.width, cfg.blocks, action_dim,
                              Activation::swish);
        m.net.init_uniform(rng);
        m.ema = m.net;
        m.sde = sde;
        m.state_dim = state_dim;
        m.action_dim = action_dim;
        return m;
    }

    // log std(t) rescaled onto [0, 1] over [t_min, t_max].
    double noise_level(double t) const {
        const double lo = std::log(vpsde_marginal(sde.t_min, sde).std);
        const double hi = std::log(vpsde_marginal(sde.t_max, sde).std);
        return (std::log(vpsde_marginal(t, sde).std) - lo) / (hi - lo);
    }

    // Network input columns [state; action; emb(t)].
    Matrix assemble(const Matrix& states, const Matrix& actions, const Vector& times) const {
        require(static_cast<std::size_t>(states.rows()) == state_dim, "ScoreModel: state dim mismatch");
        require(static_cast<std::size_t>(actions.rows()) == action_dim, "ScoreModel: action dim mismatch");
        require(states.cols() == actions.cols() && times.size() == actions.cols(), "ScoreModel: batch mismatch");
        const auto sd = static_cast<Eigen::Index>(state_dim), ad = static_cast<Eigen::Index>(action_dim);
        Matrix in(sd + ad + static_cast<Eigen::Index>(kTimeFeatures), actions.cols());
        in.topRows(sd) = states;
        in.middleRows(sd, ad) = actions;
        const auto rows = static_cast<Eigen::Index>(kTimeFeatures);
        for (Eigen::Index i = 0; i < actions.cols(); ++i) {
            if (i > 0 && times[i] == times[i - 1]) in.block(sd + ad, i, rows, 1) = in.block(sd + ad, i - 1, rows, 1);
            else time_features(noise_level(times[i]), in.block(sd + ad, i, rows, 1));
        }
        return in;
    }

    // Scores for a batch, using the EMA weights unless `online`.
    Matrix score(const Matrix& states, const Matrix& actions, const Vector& times, bool online = false) const {
        Matrix out = mlp_forward(online ? net : ema, assemble(states, actions, times));
        double std = 0.0;
        for (Eigen::Index i = 0; i < out.cols(); ++i) {
            if (i == 0 || times[i] != times[i - 1]) std = vpsde_marginal(times[i], sde).std;
            out.col(i) /= std;
        }
        return out;
    }

    // Batch of actions sharing one state and one time.
    Matrix score(const Vector& state, const Matrix& actions, double t) const {
        Matrix states = state.replicate(1, actions.cols());
        return score(states, actions, Vector::Constant(actions.cols(), t));
    }
};

enum class DsmWeighting { variance, unit };

struct DsmBatch {
    Matrix states;   // state_dim x B
    Matrix actions;  // clean actions, action_dim x B
    Vector times;    // B
    Matrix noise;    // action_dim x B, standard normal
};

struct DsmResult {
    double loss = 0.0;
    ParamBuffer grads;  // w.r.t. model.net (online) parameters
};

struct DsmWorkspace {
    Tape tape;
    Matrix perturbed;
    Matrix grad_out;
    ParamBuffer grads;  // w.r.t. model.net (online) parameters
};

// Denoising score matching on the online weights:
//   mean_i lambda(t_i) || s(s_i, a_t,i, t_i) + z_i / std_i ||^2
// with lambda = std^2 (variance) or 1 (unit). Gradients land in ws.grads.
inline double dsm_loss(const ScoreModel& model, const DsmBatch& batch, DsmWeighting weighting, DsmWorkspace& ws) {
    const Eigen::Index n = batch.actions.cols();
    require(n > 0, "dsm_loss: empty batch");
    require(batch.noise.rows() == batch.actions.rows() && batch.noise.cols() == n && batch.times.size() == n &&
                batch.states.cols() == n,
            "dsm_loss: batch shape mismatch");
    ws.perturbed.resize(batch.actions.rows(), n);
    Vector stds(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double t = batch.times[i];
        if (!(t >= model.sde.t_min && t <= model.sde.t_max)) throw ContractViolation("dsm_loss: t outside [t_min, t_max]");
        const auto m = vpsde_marginal(t, model.sde);
        ws.perturbed.col(i) = m.mean_coef * batch.actions.col(i) + m.std * batch.noise.col(i);
        stds[i] = m.std;
    }
    const Matrix& f = mlp_forward(model.net, model.assemble(batch.states, ws.perturbed, batch.times), ws.tape);
    // f + z = std * (score + z / std)
    ws.grad_out = f + batch.noise;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double w = weighting == DsmWeighting::variance ? 1.0 : 1.0 / (stds[i] * stds[i]);
        loss += w * ws.grad_out.col(i).squaredNorm();
        ws.grad_out.col(i) *= 2.0 * w / static_cast<double>(n);
    }
    ws.grads.assign(model.net.param_count(), 0.0);
    mlp_backward_into(model.net, ws.tape, ws.grad_out, ws.grads);
    return loss / static_cast<double>(n);
}

inline DsmResult dsm_loss(const ScoreModel& model, const DsmBatch& batch, DsmWeighting weighting = DsmWeighting::variance) {
    DsmWorkspace ws;
    DsmResult r;
    r.loss = dsm_loss(model, batch, weighting, ws);
    r.grads = std::move(ws.grads);
    return r;
}

struct ScoreTrainConfig {
    ScoreNetConfig net;
    SdeConfig sde;
    std::size_t steps = 20000;
    std::size_t batch = 256;
    double lr = 1e-3;
    double ema_decay = 0.999;
    DsmWeighting weighting = DsmWeighting::variance;
    std::uint64_t seed = 0;
};

struct ScoreTrainResult {
    ScoreModel model;
    std::vector<double> losses;  // one per step
};

// Trains on raw (state, action) columns; no normalization is applied here.
inline ScoreTrainResult train_score_model(const Matrix& states, const Matrix& actions, const ScoreTrainConfig& cfg) {
    require(actions.cols() > 0, "train_score_model: empty dataset");
    require(states.cols() == actions.cols(), "train_score_model: state/action count mismatch");
    require(cfg.batch > 0 && cfg.steps > 0, "train_score_model: batch and steps must be positive");
    Rng rng(cfg.seed);
    ScoreTrainResult res;
    res.model = ScoreModel::create(static_cast<std::size_t>(states.rows()), static_cast<std::size_t>(actions.rows()),
                                   cfg.net, cfg.sde, rng);
    auto& model = res.model;
    AdamState adam(model.net.param_count());
    std::uniform_int_distribution<Eigen::Index> pick(0, actions.cols() - 1);
    std::uniform_real_distribution<double> tdist(cfg.sde.t_min, cfg.sde.t_max);
    std::normal_distribution<double> normal;
    const auto b = static_cast<Eigen::Index>(cfg.batch);
    DsmBatch batch{Matrix(states.rows(), b), Matrix(actions.rows(), b), Vector(b), Matrix(actions.rows(), b)};
    res.losses.reserve(cfg.steps);
    DsmWorkspace ws;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        for (Eigen::Index i = 0; i < b; ++i) {
            const auto row = pick(rng);
            batch.states.col(i) = states.col(row);
            batch.actions.col(i) = actions.col(row);
            batch.times[i] = tdist(rng);
            for (Eigen::Index d = 0; d < actions.rows(); ++d) batch.noise(d, i) = normal(rng);
        }
        const double loss = dsm_loss(model, batch, cfg.weighting, ws);
        if (!std::isfinite(loss))
            throw NumericalError("train_score_model: non-finite loss at step " + std::to_string(step));
        adam_step(adam, model.net.params(), ws.grads, cfg.lr);
        ema_update(model.ema.params(), model.net.params(), cfg.ema_decay);
        res.losses.push_back(loss);
    }
    quantize_f32(model.net);
    quantize_f32(model.ema);
    return res;
}

// Trains in normalized action space and records the normalizer on the model.
inline ScoreTrainResult train_score_model(const OfflineDataset& d, const ScoreTrainConfig& cfg) {
    require(d.size() > 0, "train_score_model: empty dataset");
    auto res = train_score_model(d.states(), d.normalized_actions(), cfg);
    res.model.normalizer = d.header.bounds;
    return res;
}

inline Checkpoint to_checkpoint(const ScoreModel& m) {
    Checkpoint c;
    c.meta = {{"kind", "score_model"}, {"state_dim", m.state_dim}, {"action_dim", m.action_dim},
              {"sde", m.sde.to_json()}, {"time_frequencies", kTimeFrequencies}, {"output", "std_scaled_score"}};
    if (m.normalizer) c.meta["normalizer"] = m.normalizer->to_json();
    c.networks = {{"score", m.net}, {"score_ema", m.ema}};
    return c;
}

inline ScoreModel score_model_from_checkpoint(const Checkpoint& c) {
    if (c.meta.value("kind", "") != "score_model") throw ParseError("checkpoint is not a score model");
    ScoreModel m;
    m.state_dim = c.meta.at("state_dim").get<std::size_t>();
    m.action_dim = c.meta.at("action_dim").get<std::size_t>();
    m.sde = SdeConfig::from_json(c.meta.at("sde"));
    if (c.meta.contains("normalizer")) m.normalizer = ActionNormalizer::from_json(c.meta.at("normalizer"));
    m.net = c.network("score");
    m.ema = c.network("score_ema");
    if (m.ema.input_dim() != m.state_dim + m.action_dim + kTimeFeatures || m.ema.output_dim() != m.action_dim)
        throw ParseError("score network dims do not match metadata");
    return m;
}

}  // namespace arq
