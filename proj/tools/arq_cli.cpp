// Command-line driver for the offline RL pipeline.
//
//   arq gen-data --env stitchgrid --config run.json
//   arq bc-train --config run.json
//   arq build-cache --config run.json
//   arq q-train --mode arq --config run.json
//   arq eval --policy implicit --config run.json
//
// Each stage reads and writes files under the config's out_dir unless paths
// are given explicitly, and writes its resolved config next to its output.
// Exit codes: 0 success, 1 invalid input, 2 numerical failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "arq/config.hpp"
#include "arq/dqp.hpp"

namespace fs = std::filesystem;
using namespace arq;

namespace {

struct Paths {
    std::string config;
    std::string data;
    std::string model;
    std::string cache;
    std::string q;
    std::string awr;
    std::string out;
};

std::string or_default(const std::string& given, const RunConfig& cfg, const std::string& name) {
    return given.empty() ? (fs::path(cfg.out_dir) / name).string() : given;
}

void require_file(const std::string& path, const std::string& what) {
    if (!fs::exists(path)) throw ContractViolation(what + " missing: " + path);
}

// Stages draw from distinct streams of the global seed.
std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t stage) { return substream(seed, stage)(); }

void write_resolved_config(const std::string& output, const RunConfig& cfg) {
    fs::path p(output);
    p.replace_filename(p.stem().string() + ".config.json");
    detail::write_file(p, to_json(cfg).dump(2) + "\n");
}

OfflineDataset load_data(const std::string& path) {
    require_file(path, "dataset");
    return load_dataset(path);
}

ScoreModel load_model(const std::string& path) {
    require_file(path, "model checkpoint");
    return score_model_from_checkpoint(load_checkpoint(path));
}

SupportCache load_cache(const std::string& path, const RunConfig& cfg) {
    require_file(path, "support cache");
    return load_support_cache(path, cfg.cache_n, cfg.cache_eps);
}

QEnsemble load_q(const std::string& path) {
    require_file(path, "Q checkpoint");
    return q_ensemble_from_checkpoint(load_checkpoint(path));
}

void print_eval(const nlohmann::ordered_json& report) { std::cout << report.dump() << "\n"; }

int cmd_gen_data(RunConfig cfg, const Paths& p) {
    const auto env = make_env(cfg.env);
    const auto d = generate_dataset(*env, cfg.n_transitions, stage_seed(cfg.seed, 1));
    const auto out = or_default(p.out, cfg, "data.jsonl");
    save_dataset(out, d);
    write_resolved_config(out, cfg);
    std::cout << "wrote " << d.size() << " transitions of " << cfg.env << " to " << out << "\n";
    return 0;
}

int cmd_bc_train(RunConfig cfg, const Paths& p) {
    const auto d = load_data(or_default(p.data, cfg, "data.jsonl"));
    cfg.score.seed = stage_seed(cfg.seed, 2);
    const auto res = train_score_model(d, cfg.score);
    const auto out = or_default(p.out, cfg, "model.json");
    save_checkpoint(out, to_checkpoint(res.model));
    write_resolved_config(out, cfg);
    const std::size_t w = std::max<std::size_t>(1, res.losses.size() / 10);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < w; ++i) {
        first += res.losses[i] / static_cast<double>(w);
        last += res.losses[res.losses.size() - 1 - i] / static_cast<double>(w);
    }
    std::printf("score model trained: loss %.5f -> %.5f, wrote %s\n", first, last, out.c_str());
    return 0;
}

int cmd_build_cache(RunConfig cfg, const Paths& p) {
    const auto d = load_data(or_default(p.data, cfg, "data.jsonl"));
    const auto model = load_model(or_default(p.model, cfg, "model.json"));
    CacheBuildConfig cc;
    cc.n = cfg.cache_n;
    cc.eps = cfg.cache_eps;
    cc.sampler = cfg.sampler;
    cc.likelihood = cfg.likelihood;
    cc.seed = stage_seed(cfg.seed, 3);
    cc.threads = cfg.threads;
    CacheBuildStats stats;
    const auto cache = build_support_cache(model, d, cc, &stats);
    const auto out = or_default(p.out, cfg, "cache.jsonl");
    save_support_cache(out, cache);
    write_resolved_config(out, cfg);
    std::cout << "cache: " << cache.entries.size() << " entries, " << stats.rejected_bounds << " out-of-bounds and "
              << stats.rejected_likelihood << " low-likelihood draws dropped, " << stats.fallbacks << " fallbacks\n";
    if (stats.fallbacks > 0)
        std::cerr << "warning: " << stats.fallbacks << " states had no in-support sample and use the dataset action\n";
    return 0;
}

int cmd_q_train(RunConfig cfg, const Paths& p, const std::string& mode) {
    if (!mode.empty()) cfg.q.mode = q_mode_from_string(mode);
    const auto d = load_data(or_default(p.data, cfg, "data.jsonl"));
    const auto cache = load_cache(or_default(p.cache, cfg, "cache.jsonl"), cfg);
    cfg.q.seed = stage_seed(cfg.seed, 4);
    const auto res = arq_train(d, cache, cfg.q);
    const std::string name = "q_" + std::string(to_string(cfg.q.mode));
    const auto out = or_default(p.out, cfg, name + ".json");
    save_checkpoint(out, to_checkpoint(res.q, cfg.q.mode));
    fs::path log(out);
    log.replace_filename(log.stem().string() + "_log.csv");
    detail::write_file(log, arq_log_csv(res.log));
    write_resolved_config(out, cfg);
    const auto& last = res.log.back();
    std::printf("q-train (%s): final loss %.5f, mean target %.4f, mean Q %.4f, out-of-cache evaluations %zu\n",
                std::string(to_string(cfg.q.mode)).c_str(), last.loss, last.mean_target, last.mean_q, res.out_of_cache);
    return 0;
}

PolicyFn implicit_fn(const ImplicitPolicy& pol, const ActionNormalizer& bounds) {
    return [&pol, &bounds](const Vector& s, Rng& rng) { return bounds.denormalize(implicit_sample(pol, s, rng)); };
}

int run_eval(const RunConfig& cfg, const std::string& policy, const Paths& p, const std::string& out_default) {
    const auto d = load_data(or_default(p.data, cfg, "data.jsonl"));
    const auto env = make_env(d.header.env);
    EvalResult r;
    const auto seed = stage_seed(cfg.seed, 6);
    if (policy == "implicit" || policy == "bc") {
        const auto model = load_model(or_default(p.model, cfg, "model.json"));
        const auto cache = load_cache(or_default(p.cache, cfg, "cache.jsonl"), cfg);
        // alpha = 0 ignores Q values entirely; bc gets a placeholder ensemble.
        Rng placeholder(0);
        const auto q = policy == "bc" ? QEnsemble::create(d.header.state_dim, d.header.action_dim, {1}, 1, placeholder)
                                      : load_q(or_default(p.q, cfg, "q_" + std::string(to_string(cfg.q.mode)) + ".json"));
        ImplicitConfig ic = cfg.implicit;
        if (policy == "bc") ic.alpha = 0.0;
        const ImplicitPolicy pol(q, &model, &cache, &d, ic);
        r = evaluate_policy(*env, implicit_fn(pol, d.header.bounds), cfg.eval_episodes, cfg.eval_gamma, seed,
                            cfg.threads);
    } else if (policy == "awr") {
        require_file(or_default(p.awr, cfg, "awr.json"), "policy checkpoint");
        const auto pol = awr_policy_from_checkpoint(load_checkpoint(or_default(p.awr, cfg, "awr.json")));
        r = evaluate_policy(
            *env, [&pol](const Vector& s, Rng& rng) { return pol.bounds.denormalize(pol.act(s, rng)); },
            cfg.eval_episodes, cfg.eval_gamma, seed, cfg.threads);
    } else if (policy == "optimal") {
        r = evaluate_policy(
            *env, [&env](const Vector& s, Rng&) { return env->optimal_action(s); }, cfg.eval_episodes, cfg.eval_gamma,
            seed, cfg.threads);
    } else {
        throw ContractViolation("unknown policy '" + policy + "' (bc, implicit, awr, optimal)");
    }
    const auto report = eval_report(policy, d.header.env, r);
    const auto out = or_default(p.out, cfg, out_default);
    detail::write_file(out, report.dump(2) + "\n");
    write_resolved_config(out, cfg);
    print_eval(report);
    return 0;
}

int cmd_policy_train(RunConfig cfg, const Paths& p, const std::string& mode) {
    if (mode == "implicit-eval") return run_eval(cfg, "implicit", p, "implicit_eval.json");
    if (mode != "awr") throw ContractViolation("unknown policy-train mode '" + mode + "' (implicit-eval, awr)");
    const auto d = load_data(or_default(p.data, cfg, "data.jsonl"));
    const auto cache = load_cache(or_default(p.cache, cfg, "cache.jsonl"), cfg);
    const auto q = load_q(or_default(p.q, cfg, "q_" + std::string(to_string(cfg.q.mode)) + ".json"));
    cfg.awr.seed = stage_seed(cfg.seed, 5);
    const auto res = awr_train(d, q, cache, cfg.awr);
    const auto out = or_default(p.out, cfg, "awr.json");
    save_checkpoint(out, to_checkpoint(res.policy));
    write_resolved_config(out, cfg);
    std::printf("awr policy trained: final loss %.5f, wrote %s\n", res.losses.back(), out.c_str());
    return 0;
}

int cmd_verify_theorem1(std::size_t states, std::size_t actions, std::size_t iters, std::uint64_t seed, double gamma,
                        double penalty_scale, const std::string& mdp_path) {
    Rng rng(seed);
    TabularMDP mdp = mdp_path.empty() ? random_mdp(states, actions, gamma, rng)
                                      : TabularMDP::from_json(json::parse(detail::read_file(mdp_path)));
    Matrix p(static_cast<Eigen::Index>(mdp.n_states), static_cast<Eigen::Index>(mdp.n_actions));
    std::uniform_real_distribution<double> u(0.0, penalty_scale);
    for (auto& x : p.reshaped()) x = u(rng);
    const auto tr = run_theorem1(mdp, p, iters);
    for (std::size_t i = 0; i < iters; ++i)
        std::printf("iter %zu  q_residual %.3e  pi_residual %.3e\n", i + 1, tr.q_residual[i], tr.pi_residual[i]);
    const double m = tr.max_residual();
    std::printf("max residual %.3e (%s 1e-8)\n", m, m < 1e-8 ? "<" : ">=");
    return m < 1e-8 ? 0 : 2;
}

int cmd_density_grid(RunConfig cfg, const Paths& p, double s_min, double s_max) {
    const auto model = load_model(or_default(p.model, cfg, "model.json"));
    double a_lo = -1.0, a_hi = 1.0;
    if (model.normalizer) {
        a_lo = model.normalizer->lo[0];
        a_hi = model.normalizer->hi[0];
    }
    const auto g = density_grid(model, linspace(s_min, s_max, static_cast<Eigen::Index>(cfg.density_s_points)),
                                linspace(a_lo, a_hi, static_cast<Eigen::Index>(cfg.density_a_points)), cfg.cache_eps,
                                cfg.likelihood);
    const auto out = or_default(p.out, cfg, "density");
    detail::write_file(out + ".csv", density_csv(g));
    detail::write_file(out + ".pgm", density_pgm(g));
    write_resolved_config(out + ".csv", cfg);
    std::cout << "density grid " << g.s.size() << "x" << g.a.size() << " written to " << out << ".{csv,pgm}";
    if (g.failures > 0) std::cout << ", " << g.failures << " cells failed and were set to the floor";
    std::cout << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Offline RL with a score-based behavior model and action-restricted Q-learning"};
    app.require_subcommand(1);
    Paths p;
    auto add_config = [&](CLI::App* c) {
        c->add_option("--config", p.config, "Run config JSON (defaults when omitted)");
    };

    auto* gen = app.add_subcommand("gen-data", "Generate an offline dataset from a toy environment");
    add_config(gen);
    std::string env;
    std::size_t n = 0;
    gen->add_option("--env", env, "lineworld | stitchgrid | cliffbandit");
    gen->add_option("--n", n, "Number of transitions");
    gen->add_option("--out", p.out, "Dataset path");

    auto* bc = app.add_subcommand("bc-train", "Train the conditional score model on a dataset");
    add_config(bc);
    bc->add_option("--data", p.data, "Dataset path");
    bc->add_option("--out", p.out, "Model checkpoint path");

    auto* cache = app.add_subcommand("build-cache", "Sample and likelihood-filter in-support actions per row");
    add_config(cache);
    cache->add_option("--data", p.data, "Dataset path");
    cache->add_option("--model", p.model, "Score model checkpoint");
    cache->add_option("--out", p.out, "Cache path");

    auto* qt = app.add_subcommand("q-train", "Fit Q on the dataset with in-support bootstrapping");
    add_config(qt);
    std::string q_mode;
    qt->add_option("--mode", q_mode, "arq | qbeta")->check(CLI::IsMember({"arq", "qbeta"}));
    qt->add_option("--data", p.data, "Dataset path");
    qt->add_option("--cache", p.cache, "Support cache path");
    qt->add_option("--out", p.out, "Q checkpoint path");

    auto* pt = app.add_subcommand("policy-train", "Extract a policy from a trained Q");
    add_config(pt);
    std::string p_mode = "awr";
    pt->add_option("--mode", p_mode, "implicit-eval | awr")->check(CLI::IsMember({"implicit-eval", "awr"}));
    pt->add_option("--data", p.data, "Dataset path");
    pt->add_option("--model", p.model, "Score model checkpoint");
    pt->add_option("--cache", p.cache, "Support cache path");
    pt->add_option("--q", p.q, "Q checkpoint");
    pt->add_option("--out", p.out, "Output path");

    auto* ev = app.add_subcommand("eval", "Roll out a policy and report returns");
    add_config(ev);
    std::string policy = "implicit";
    ev->add_option("--policy", policy, "bc | implicit | awr | optimal");
    ev->add_option("--data", p.data, "Dataset path");
    ev->add_option("--model", p.model, "Score model checkpoint");
    ev->add_option("--cache", p.cache, "Support cache path");
    ev->add_option("--q", p.q, "Q checkpoint");
    ev->add_option("--awr", p.awr, "AWR policy checkpoint");
    ev->add_option("--out", p.out, "Report path");

    auto* th = app.add_subcommand("verify-theorem1", "Run both tabular iteration schemes and print residuals");
    std::size_t t_states = 4, t_actions = 3, t_iters = 50;
    std::uint64_t t_seed = 1;
    double t_gamma = 0.9, t_scale = 3.0;
    std::string mdp_path;
    th->add_option("--states", t_states, "Number of states")->check(CLI::PositiveNumber);
    th->add_option("--actions", t_actions, "Number of actions")->check(CLI::PositiveNumber);
    th->add_option("--iters", t_iters, "Iterations");
    th->add_option("--seed", t_seed, "Seed for the random MDP and penalties");
    th->add_option("--gamma", t_gamma, "Discount");
    th->add_option("--penalty-scale", t_scale, "Penalties are drawn from U[0, scale]");
    th->add_option("--mdp", mdp_path, "Tabular MDP JSON instead of a random one");

    auto* dg = app.add_subcommand("density-grid", "Export log p(a|s) over a grid as CSV and PGM");
    add_config(dg);
    double s_min = -1.0, s_max = 1.0;
    dg->add_option("--model", p.model, "Score model checkpoint");
    dg->add_option("--s-min", s_min, "Smallest state");
    dg->add_option("--s-max", s_max, "Largest state");
    dg->add_option("--out", p.out, "Output prefix (.csv and .pgm are appended)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (th->parsed()) return cmd_verify_theorem1(t_states, t_actions, t_iters, t_seed, t_gamma, t_scale, mdp_path);
        RunConfig cfg = load_run_config(p.config);
        if (gen->parsed()) {
            if (!env.empty()) cfg.env = env;
            if (n > 0) cfg.n_transitions = n;
            return cmd_gen_data(cfg, p);
        }
        if (bc->parsed()) return cmd_bc_train(cfg, p);
        if (cache->parsed()) return cmd_build_cache(cfg, p);
        if (qt->parsed()) return cmd_q_train(cfg, p, q_mode);
        if (pt->parsed()) return cmd_policy_train(cfg, p, p_mode);
        if (ev->parsed()) return run_eval(cfg, policy, p, "eval_" + policy + ".json");
        if (dg->parsed()) return cmd_density_grid(cfg, p, s_min, s_max);
    } catch (const NumericalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
