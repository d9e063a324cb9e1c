#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <numeric>

#include <unistd.h>

#include "arq/config.hpp"
#include "arq/dqp.hpp"

namespace arq::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("arq_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline std::string bytes(const std::filesystem::path& p) { return detail::read_file(p); }

// Score model fitted to 1-D samples (state fixed at 0), raw action space.
inline ScoreModel fit_1d(const std::vector<double>& samples, std::size_t steps, std::uint64_t seed) {
    Matrix states = Matrix::Zero(1, static_cast<Eigen::Index>(samples.size()));
    Matrix actions(1, static_cast<Eigen::Index>(samples.size()));
    for (std::size_t i = 0; i < samples.size(); ++i) actions(0, static_cast<Eigen::Index>(i)) = samples[i];
    ScoreTrainConfig cfg;
    cfg.steps = steps;
    cfg.seed = seed;
    return train_score_model(states, actions, cfg).model;
}

inline std::vector<double> normal_samples(std::size_t n, double mean, double sd, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> nd(mean, sd);
    std::vector<double> v(n);
    for (auto& x : v) x = nd(rng);
    return v;
}

// Cache built from an environment's exact behavior sampler and density, in
// the dataset's normalized action space. Terminal s2 entries stay empty.
inline SupportCache oracle_cache(const ToyEnv& env, const OfflineDataset& d, std::size_t n, double eps,
                                 std::uint64_t seed) {
    SupportCache c;
    c.n_requested = n;
    c.eps = eps;
    c.action_dim = d.header.action_dim;
    const double jac = d.header.bounds.log_jacobian();
    for (std::size_t row = 0; row < d.size(); ++row)
        for (Slot w : {Slot::s, Slot::s2}) {
            CacheEntry e;
            e.row = row;
            e.which = w;
            e.actions.resize(static_cast<Eigen::Index>(c.action_dim), 0);
            const auto& t = d.transitions[row];
            if (!(w == Slot::s2 && t.done)) {
                Rng rng = substream(seed, 2 * row + static_cast<std::size_t>(w));
                const Vector& s = w == Slot::s ? t.s : t.s2;
                std::vector<Vector> kept;
                for (std::size_t k = 0; k < n; ++k) {
                    const Vector a = env.sample_behavior(s, rng);
                    const Vector x = d.header.bounds.normalize(a);
                    const double lp = env.behavior_log_density(s, a) - jac;
                    if ((x.array().abs() <= 1.0).all() && lp >= std::log(eps)) {
                        kept.push_back(x);
                        e.logp.push_back(lp);
                    }
                }
                e.actions.resize(static_cast<Eigen::Index>(c.action_dim), static_cast<Eigen::Index>(kept.size()));
                for (std::size_t k = 0; k < kept.size(); ++k) e.actions.col(static_cast<Eigen::Index>(k)) = kept[k];
            }
            c.entries.push_back(std::move(e));
        }
    return c;
}

// Contextual bandit used for the K-operator ordering: s ~ U[-1, 1], behavior
// a ~ U[-1, 1], reward -(a - s/2)^2 + N(0, noise^2), and the state repeats
// (s2 = s, never terminal), so every target bootstraps through the max.
class NoisyBandit final : public ToyEnv {
public:
    explicit NoisyBandit(double noise = 0.5) : noise_(noise) {}
    const EnvDescriptor& descriptor() const override { return desc_; }
    Vector reset(Rng& rng) const override { return detail::vec1(std::uniform_real_distribution<double>(-1, 1)(rng)); }
    StepResult step(const Vector& s, const Vector& a, Rng& rng) const override {
        const double mean = -(a[0] - 0.5 * s[0]) * (a[0] - 0.5 * s[0]);
        return {s, mean + noise_ * std::normal_distribution<double>()(rng), false, false};
    }
    Vector sample_behavior(const Vector&, Rng& rng) const override {
        return detail::vec1(std::uniform_real_distribution<double>(-1, 1)(rng));
    }
    double behavior_log_density(const Vector&, const Vector& a) const override {
        return std::abs(a[0]) <= 1.0 ? std::log(0.5) : -std::numeric_limits<double>::infinity();
    }
    Vector optimal_action(const Vector& s) const override { return detail::vec1(0.5 * s[0]); }
    std::vector<Transition> generate(std::size_t n, Rng& rng) const override {
        std::vector<Transition> out;
        for (std::size_t i = 0; i < n; ++i) {
            Vector s = reset(rng), a = sample_behavior(s, rng);
            auto r = step(s, a, rng);
            out.push_back({s, a, r.reward, r.next_state, false, false});
        }
        return out;
    }

private:
    double noise_;
    EnvDescriptor desc_{"noisybandit", 1, 1, 1, -3.0, 1.0, 0.0};
};

// Dataset whose header bounds are exactly [-1, 1] so raw and normalized
// actions coincide.
inline OfflineDataset unit_bounds_dataset(const ToyEnv& env, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    OfflineDataset d;
    d.transitions = env.generate(n, rng);
    d.header.state_dim = env.descriptor().state_dim;
    d.header.action_dim = env.descriptor().action_dim;
    d.header.env = env.descriptor().name;
    d.header.seed = seed;
    d.header.bounds.lo = Vector::Constant(static_cast<Eigen::Index>(d.header.action_dim), -1.0);
    d.header.bounds.hi = Vector::Constant(static_cast<Eigen::Index>(d.header.action_dim), 1.0);
    return d;
}

// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < idx.size();) {
            std::size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
            i = j + 1;
        }
        return r;
    };
    const auto rx = ranks(x), ry = ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

// Central-difference gradient check of sum(w .* net(x)) w.r.t. parameters
// and inputs. Returns the worst relative error |g - fd| / max(|g|, |fd|, floor).
inline double gradient_check(Mlp& net, const Matrix& x, const Matrix& w, double h = 1e-4, double floor = 1e-6) {
    Tape tape;
    mlp_forward(net, x, tape);
    const Gradients g = mlp_backward(net, tape, w);
    auto loss = [&](const Mlp& n, const Matrix& in) { return (mlp_forward(n, in).array() * w.array()).sum(); };
    double worst = 0.0;
    auto rel = [&](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor}); };
    for (std::size_t i = 0; i < net.param_count(); ++i) {
        const double orig = net.params()[i];
        net.params()[i] = orig + h;
        const double up = loss(net, x);
        net.params()[i] = orig - h;
        const double down = loss(net, x);
        net.params()[i] = orig;
        worst = std::max(worst, rel(g.params[i], (up - down) / (2 * h)));
    }
    Matrix xp = x;
    for (Eigen::Index k = 0; k < x.size(); ++k) {
        const double orig = xp(k);
        xp(k) = orig + h;
        const double up = loss(net, xp);
        xp(k) = orig - h;
        const double down = loss(net, xp);
        xp(k) = orig;
        worst = std::max(worst, rel(g.input(k), (up - down) / (2 * h)));
    }
    return worst;
}

// Smallest |pre-activation| feeding a relu layer; nets with a value near a
// kink make finite differences meaningless there.
inline double min_relu_margin(const Mlp& net, const Matrix& x) {
    Tape tape;
    mlp_forward(net, x, tape);
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < net.layers().size(); ++i)
        if (net.layers()[i].act == Activation::relu) m = std::min(m, tape.inputs[i].cwiseAbs().minCoeff());
    return m;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace arq::testing
