#pragma once

// Run configuration shared by the command-line stages. Every section is
// optional in the file; missing keys keep their defaults and unknown keys are
// rejected.

#include <cstdlib>
#include <set>

#include "arq/density.hpp"
#include "arq/policy.hpp"

namespace arq {

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out_dir = ".";
    std::string env = "lineworld";
    std::size_t n_transitions = 2000;
    ScoreTrainConfig score;
    SamplerConfig sampler;
    LikelihoodConfig likelihood;
    std::size_t cache_n = 30;
    double cache_eps = std::exp(-5.0);
    std::size_t threads = 1;
    ArqConfig q;
    ImplicitConfig implicit;
    AwrConfig awr;
    std::size_t eval_episodes = 100;
    double eval_gamma = 0.99;
    std::size_t density_s_points = 50;
    std::size_t density_a_points = 50;
};

namespace detail {

inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ParseError("config: '" + where + "' must be an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [k, v] : j.items())
        if (!ok.count(k)) throw ParseError("config: unknown key '" + (where.empty() ? k : where + "." + k) + "'");
}

template <class T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    j["env"] = c.env;
    j["data"] = {{"n_transitions", c.n_transitions}};
    j["score"] = {{"width", c.score.net.width},
                  {"blocks", c.score.net.blocks},
                  {"steps", c.score.steps},
                  {"batch", c.score.batch},
                  {"lr", c.score.lr},
                  {"ema_decay", c.score.ema_decay},
                  {"weighting", c.score.weighting == DsmWeighting::variance ? "variance" : "unit"},
                  {"sde", c.score.sde.to_json()}};
    j["sampler"] = {{"n_steps", c.sampler.n_steps}, {"snr", c.sampler.snr}, {"corrector_steps", c.sampler.corrector_steps}};
    j["likelihood"] = {{"rtol", c.likelihood.rtol},
                       {"atol", c.likelihood.atol},
                       {"fd_step", c.likelihood.fd_step},
                       {"max_steps", c.likelihood.max_steps}};
    j["cache"] = {{"n", c.cache_n}, {"eps", c.cache_eps}, {"threads", c.threads}};
    j["q"] = {{"mode", to_string(c.q.mode)},
              {"k", c.q.k},
              {"gamma", c.q.gamma},
              {"loss", to_string(c.q.loss)},
              {"huber_delta", c.q.huber_delta},
              {"lr", c.q.lr},
              {"steps", c.q.steps},
              {"batch", c.q.batch},
              {"polyak", c.q.polyak},
              {"hidden", c.q.hidden},
              {"reward_mode", to_string(c.q.reward_mode)},
              {"reward_scale", c.q.reward_scale},
              {"log_every", c.q.log_every}};
    j["policy"] = {{"alpha", c.implicit.alpha},
                   {"logits", c.implicit.mode == LogitMode::q_logits ? "q" : "advantage"},
                   {"rollout_sampler_steps", c.implicit.sampler.n_steps},
                   {"awr",
                    {{"hidden", c.awr.hidden},
                     {"steps", c.awr.steps},
                     {"batch", c.awr.batch},
                     {"lr", c.awr.lr},
                     {"weight_clip", c.awr.weight_clip},
                     {"init_log_std", c.awr.init_log_std}}}};
    j["eval"] = {{"episodes", c.eval_episodes}, {"gamma", c.eval_gamma}};
    j["density"] = {{"s_points", c.density_s_points}, {"a_points", c.density_a_points}};
    return j;
}

inline RunConfig run_config_from_json(const json& j) {
    using detail::check_keys;
    using detail::read;
    RunConfig c;
    try {
        check_keys(j, "", {"seed", "out_dir", "env", "data", "score", "sampler", "likelihood", "cache", "q", "policy",
                           "eval", "density"});
        read(j, "seed", c.seed);
        read(j, "out_dir", c.out_dir);
        read(j, "env", c.env);
        if (j.contains("data")) {
            check_keys(j["data"], "data", {"n_transitions"});
            read(j["data"], "n_transitions", c.n_transitions);
        }
        if (j.contains("score")) {
            const auto& s = j["score"];
            check_keys(s, "score", {"width", "blocks", "steps", "batch", "lr", "ema_decay", "weighting", "sde"});
            read(s, "width", c.score.net.width);
            read(s, "blocks", c.score.net.blocks);
            read(s, "steps", c.score.steps);
            read(s, "batch", c.score.batch);
            read(s, "lr", c.score.lr);
            read(s, "ema_decay", c.score.ema_decay);
            if (s.contains("weighting")) {
                const auto w = s["weighting"].get<std::string>();
                if (w != "variance" && w != "unit") throw ParseError("config: score.weighting must be variance or unit");
                c.score.weighting = w == "variance" ? DsmWeighting::variance : DsmWeighting::unit;
            }
            if (s.contains("sde")) {
                const auto& e = s["sde"];
                check_keys(e, "score.sde", {"beta_min", "beta_max", "t_min", "t_max", "n_discretization"});
                read(e, "beta_min", c.score.sde.beta_min);
                read(e, "beta_max", c.score.sde.beta_max);
                read(e, "t_min", c.score.sde.t_min);
                read(e, "t_max", c.score.sde.t_max);
                read(e, "n_discretization", c.score.sde.n_discretization);
            }
        }
        if (j.contains("sampler")) {
            check_keys(j["sampler"], "sampler", {"n_steps", "snr", "corrector_steps"});
            read(j["sampler"], "n_steps", c.sampler.n_steps);
            read(j["sampler"], "snr", c.sampler.snr);
            read(j["sampler"], "corrector_steps", c.sampler.corrector_steps);
        }
        if (j.contains("likelihood")) {
            check_keys(j["likelihood"], "likelihood", {"rtol", "atol", "fd_step", "max_steps"});
            read(j["likelihood"], "rtol", c.likelihood.rtol);
            read(j["likelihood"], "atol", c.likelihood.atol);
            read(j["likelihood"], "fd_step", c.likelihood.fd_step);
            read(j["likelihood"], "max_steps", c.likelihood.max_steps);
        }
        if (j.contains("cache")) {
            check_keys(j["cache"], "cache", {"n", "eps", "threads"});
            read(j["cache"], "n", c.cache_n);
            read(j["cache"], "eps", c.cache_eps);
            read(j["cache"], "threads", c.threads);
        }
        if (j.contains("q")) {
            const auto& q = j["q"];
            check_keys(q, "q", {"mode", "k", "gamma", "loss", "huber_delta", "lr", "steps", "batch", "polyak", "hidden",
                                "reward_mode", "reward_scale", "log_every"});
            if (q.contains("mode")) c.q.mode = q_mode_from_string(q["mode"].get<std::string>());
            read(q, "k", c.q.k);
            read(q, "gamma", c.q.gamma);
            if (q.contains("loss")) c.q.loss = q_loss_from_string(q["loss"].get<std::string>());
            read(q, "huber_delta", c.q.huber_delta);
            read(q, "lr", c.q.lr);
            read(q, "steps", c.q.steps);
            read(q, "batch", c.q.batch);
            read(q, "polyak", c.q.polyak);
            read(q, "hidden", c.q.hidden);
            if (q.contains("reward_mode")) c.q.reward_mode = reward_mode_from_string(q["reward_mode"].get<std::string>());
            read(q, "reward_scale", c.q.reward_scale);
            read(q, "log_every", c.q.log_every);
        }
        if (j.contains("policy")) {
            const auto& p = j["policy"];
            check_keys(p, "policy", {"alpha", "logits", "rollout_sampler_steps", "awr"});
            read(p, "alpha", c.implicit.alpha);
            if (p.contains("logits")) c.implicit.mode = logit_mode_from_string(p["logits"].get<std::string>());
            read(p, "rollout_sampler_steps", c.implicit.sampler.n_steps);
            if (p.contains("awr")) {
                const auto& a = p["awr"];
                check_keys(a, "policy.awr", {"hidden", "steps", "batch", "lr", "weight_clip", "init_log_std"});
                read(a, "hidden", c.awr.hidden);
                read(a, "steps", c.awr.steps);
                read(a, "batch", c.awr.batch);
                read(a, "lr", c.awr.lr);
                read(a, "weight_clip", c.awr.weight_clip);
                read(a, "init_log_std", c.awr.init_log_std);
            }
        }
        if (j.contains("eval")) {
            check_keys(j["eval"], "eval", {"episodes", "gamma"});
            read(j["eval"], "episodes", c.eval_episodes);
            read(j["eval"], "gamma", c.eval_gamma);
        }
        if (j.contains("density")) {
            check_keys(j["density"], "density", {"s_points", "a_points"});
            read(j["density"], "s_points", c.density_s_points);
            read(j["density"], "a_points", c.density_a_points);
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
    c.score.sde.validate();
    c.sampler.validate();
    c.q.validate();
    require(c.cache_n >= 1 && c.cache_eps > 0.0, "config: cache.n must be >= 1 and cache.eps positive");
    require(c.implicit.alpha >= 0.0, "config: policy.alpha must be >= 0");
    require(c.eval_episodes >= 1, "config: eval.episodes must be >= 1");
    require(c.density_s_points >= 1 && c.density_a_points >= 1, "config: density grid must be non-empty");
    c.implicit.n = c.cache_n;
    c.implicit.eps = c.cache_eps;
    c.implicit.likelihood = c.likelihood;
    c.implicit.sampler.snr = c.sampler.snr;
    c.implicit.sampler.corrector_steps = c.sampler.corrector_steps;
    c.awr.alpha = c.implicit.alpha;
    c.q.seed = c.seed;
    c.score.seed = c.seed;
    c.awr.seed = c.seed;
    return c;
}

// Reads `path` (empty: all defaults) and applies the ARQ_SEED override.
inline RunConfig load_run_config(const std::string& path) {
    json j = json::object();
    if (!path.empty()) {
        const std::string text = detail::read_file(path);
        try {
            j = json::parse(text);
        } catch (const json::exception&) {
            throw ParseError("config: malformed JSON in '" + path + "'");
        }
    }
    if (const char* s = std::getenv("ARQ_SEED")) {
        char* end = nullptr;
        const auto v = std::strtoull(s, &end, 10);
        if (end == s || *end != '\0') throw ContractViolation("ARQ_SEED must be a non-negative integer");
        j["seed"] = v;
    }
    return run_config_from_json(j);
}

}  // namespace arq
