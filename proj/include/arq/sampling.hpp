#pragma once

// Reverse-time sampling, exact likelihoods through the probability-flow ODE,
// and the per-row cache of in-support actions.

#include <algorithm>
#include <atomic>
#include <thread>

#include "arq/sde.hpp"

namespace arq {

struct SamplerConfig {
    int n_steps = 500;
    double snr = 0.16;
    int corrector_steps = 1;

    void validate() const {
        require(n_steps >= 2, "SamplerConfig: n_steps must be >= 2");
        require(snr > 0.0, "SamplerConfig: snr must be positive");
        require(corrector_steps >= 0, "SamplerConfig: corrector_steps must be >= 0");
    }
};

inline void fill_normal(Matrix& m, Rng& rng) {
    std::normal_distribution<double> normal;
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = normal(rng);
}

// Langevin update x + delta * score + sqrt(2 delta) z with
// delta = 2 (snr * |z| / |score|)^2. Norms are averaged over the batch
// columns; a zero score norm leaves x unchanged.
inline Matrix langevin_step(const Matrix& x, const Matrix& score, const Matrix& z, double snr) {
    const double grad_norm = score.colwise().norm().mean();
    const double noise_norm = z.colwise().norm().mean();
    if (grad_norm == 0.0 || snr == 0.0) return x;
    const double ratio = snr * noise_norm / grad_norm;
    const double delta = 2.0 * ratio * ratio;
    return x + delta * score + std::sqrt(2.0 * delta) * z;
}

inline Matrix langevin_correct(const ScoreModel& model, const Vector& state, const Matrix& x, double t, double snr,
                               Rng& rng) {
    require(t >= 0.0 && t <= model.sde.t_max, "langevin_correct: t outside time domain");
    Matrix z(x.rows(), x.cols());
    fill_normal(z, rng);
    return langevin_step(x, model.score(state, x, t), z, snr);
}

// Predictor-corrector sampling: Langevin corrector then Euler-Maruyama
// predictor on the grid linspace(t_max, t_min, n_steps). Returns the
// noise-free mean of the final predictor step. Columns are samples.
inline Matrix pc_sample(const ScoreModel& model, const Vector& state, std::size_t n, const SamplerConfig& cfg, Rng& rng) {
    cfg.validate();
    require(n >= 1, "pc_sample: n must be >= 1");
    const auto& sde = model.sde;
    const auto ad = static_cast<Eigen::Index>(model.action_dim);
    Matrix x(ad, static_cast<Eigen::Index>(n));
    fill_normal(x, rng);
    const double dt = -(sde.t_max - sde.t_min) / (cfg.n_steps - 1);
    Matrix z(x.rows(), x.cols());
    Matrix x_mean = x;
    for (int i = 0; i < cfg.n_steps; ++i) {
        const double t = sde.t_max + i * dt;
        for (int c = 0; c < cfg.corrector_steps; ++c) x = langevin_correct(model, state, x, t, cfg.snr, rng);
        const double beta = sde.beta(t);
        const Matrix s = model.score(state, x, t);
        x_mean = x + (-0.5 * beta * x - beta * s) * dt;
        fill_normal(z, rng);
        x = x_mean + std::sqrt(beta * -dt) * z;
        if (!x.allFinite()) throw NumericalError("pc_sample: non-finite sample at step " + std::to_string(i));
    }
    return x_mean;
}

struct LikelihoodConfig {
    double rtol = 1e-5;
    double atol = 1e-5;
    double fd_step = 1e-4;
    std::size_t max_steps = 100000;
};

namespace detail {

// Dormand-Prince 5(4) tableau.
struct DormandPrince {
    static constexpr double c[7] = {0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
    static constexpr double a[7][6] = {
        {},
        {1.0 / 5},
        {3.0 / 40, 9.0 / 40},
        {44.0 / 45, -56.0 / 15, 32.0 / 9},
        {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
        {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656},
        {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84}};
    // 5th order weights equal a[6]; e = b5 - b4
    static constexpr double e[7] = {71.0 / 57600, 0.0, -71.0 / 16695, 71.0 / 1920, -17253.0 / 339200, 22.0 / 525,
                                    -1.0 / 40};
};

}  // namespace detail

struct OdeStats {
    std::size_t accepted = 0;
    std::size_t rejected = 0;
    std::size_t evaluations = 0;
};

// Adaptive RK45 (Dormand-Prince) from t0 to t1 on a flat state vector.
// Error norm is the max of |err| / (atol + rtol * max(|y|, |y_new|)), so a
// batch of independent systems is stepped as strictly as its worst member.
template <class Rhs>
Vector integrate_rk45(Rhs&& f, double t0, double t1, Vector y, double rtol, double atol, std::size_t max_steps,
                      OdeStats* stats = nullptr) {
    using DP = detail::DormandPrince;
    OdeStats local;
    OdeStats& st = stats ? *stats : local;
    const double span = t1 - t0;
    const double direction = span >= 0 ? 1.0 : -1.0;
    auto rms = [](const Vector& v) { return std::sqrt(v.squaredNorm() / std::max<Eigen::Index>(1, v.size())); };

    Vector k[7];
    k[0] = f(t0, y);
    ++st.evaluations;
    double h;
    {
        const Vector scale = (atol + rtol * y.array().abs()).matrix();
        const double d0 = rms(y.cwiseQuotient(scale));
        const double d1 = rms(k[0].cwiseQuotient(scale));
        h = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
        h = std::min(h, std::abs(span));
    }
    double t = t0;
    std::size_t steps = 0;
    while (direction * (t1 - t) > 0.0) {
        if (++steps > max_steps) throw NumericalError("integrate_rk45: step budget exhausted at t=" + std::to_string(t));
        const double min_step = 10.0 * std::abs(std::nextafter(t, direction * INFINITY) - t);
        if (h < min_step) throw NumericalError("integrate_rk45: step size underflow at t=" + std::to_string(t));
        double hs = h * direction;
        if (direction * (t + hs - t1) > 0.0) hs = t1 - t;
        for (int s = 1; s < 7; ++s) {
            Vector yi = y;
            for (int j = 0; j < s; ++j)
                if (DP::a[s][j] != 0.0) yi += hs * DP::a[s][j] * k[j];
            k[s] = f(t + DP::c[s] * hs, yi);
            ++st.evaluations;
        }
        Vector y_new = y;
        for (int j = 0; j < 6; ++j)
            if (DP::a[6][j] != 0.0) y_new += hs * DP::a[6][j] * k[j];
        Vector err = Vector::Zero(y.size());
        for (int j = 0; j < 7; ++j)
            if (DP::e[j] != 0.0) err += hs * DP::e[j] * k[j];
        const Vector scale = (atol + rtol * y.array().abs().max(y_new.array().abs())).matrix();
        const double err_norm = err.cwiseQuotient(scale).cwiseAbs().maxCoeff();
        if (!std::isfinite(err_norm)) throw NumericalError("integrate_rk45: non-finite state at t=" + std::to_string(t));
        if (err_norm <= 1.0) {
            t += hs;
            y = std::move(y_new);
            k[0] = k[6];
            ++st.accepted;
            const double factor = err_norm == 0.0 ? 10.0 : std::min(10.0, 0.9 * std::pow(err_norm, -0.2));
            h = std::abs(hs) * factor;
        } else {
            ++st.rejected;
            h = std::abs(hs) * std::max(0.2, 0.9 * std::pow(err_norm, -0.2));
        }
    }
    return y;
}

// log p(action | state) at t_min through the probability-flow ODE
//   dx/dt = -1/2 beta(t) (x + score(x, t)),
// log p_0(x) = log N(x(t_max); 0, I) + \int div(drift) dt. The divergence is
// exact up to central differences along every action dimension. All columns
// share one adaptive step sequence.
inline Vector log_likelihood(const ScoreModel& model, const Vector& state, const Matrix& actions,
                             const LikelihoodConfig& cfg = {}, OdeStats* stats = nullptr) {
    const auto ad = actions.rows();
    const auto n = actions.cols();
    require(static_cast<std::size_t>(ad) == model.action_dim, "log_likelihood: action dim mismatch");
    require(n >= 1, "log_likelihood: no actions");
    const double h = cfg.fd_step;
    auto rhs = [&](double t, const Vector& y) {
        Eigen::Map<const Matrix> x(y.data(), ad, n);
        Matrix probe(ad, n * (1 + 2 * ad));
        probe.leftCols(n) = x;
        for (Eigen::Index d = 0; d < ad; ++d) {
            Matrix plus = x, minus = x;
            plus.row(d).array() += h;
            minus.row(d).array() -= h;
            probe.middleCols(n * (1 + 2 * d), n) = plus;
            probe.middleCols(n * (2 + 2 * d), n) = minus;
        }
        const Matrix s = model.score(state, probe, t);
        const double beta = model.sde.beta(t);
        Vector dy(y.size());
        Eigen::Map<Matrix> dx(dy.data(), ad, n);
        dx = -0.5 * beta * (x + s.leftCols(n));
        for (Eigen::Index i = 0; i < n; ++i) {
            double ds = 0.0;
            for (Eigen::Index d = 0; d < ad; ++d)
                ds += (s(d, n * (1 + 2 * d) + i) - s(d, n * (2 + 2 * d) + i)) / (2.0 * h);
            dy[ad * n + i] = -0.5 * beta * (static_cast<double>(ad) + ds);
        }
        return dy;
    };
    Vector y0 = Vector::Zero(ad * n + n);
    y0.head(ad * n) = Eigen::Map<const Vector>(actions.data(), ad * n);
    Vector y;
    try {
        y = integrate_rk45(rhs, model.sde.t_min, model.sde.t_max, y0, cfg.rtol, cfg.atol, cfg.max_steps, stats);
    } catch (const NumericalError& e) {
        throw NumericalError(std::string("log_likelihood: ") + e.what());
    }
    Eigen::Map<const Matrix> xt(y.data(), ad, n);
    Vector out(n);
    const double log_norm = -0.5 * static_cast<double>(ad) * std::log(2.0 * std::numbers::pi);
    for (Eigen::Index i = 0; i < n; ++i) out[i] = log_norm - 0.5 * xt.col(i).squaredNorm() + y[ad * n + i];
    return out;
}

inline double log_likelihood(const ScoreModel& model, const Vector& state, const Vector& action,
                             const LikelihoodConfig& cfg = {}) {
    Matrix a = action;
    return log_likelihood(model, state, a, cfg)[0];
}

enum class Slot { s = 0, s2 = 1 };

inline std::string_view to_string(Slot w) { return w == Slot::s ? "s" : "s2"; }

struct CacheEntry {
    std::size_t row = 0;
    Slot which = Slot::s;
    Matrix actions;  // normalized, action_dim x k
    std::vector<double> logp;
    bool fallback = false;

    std::size_t size() const { return logp.size(); }
};

// Two entries per dataset row (s and s2), stored at index 2 * row + slot.
struct SupportCache {
    std::size_t n_requested = 30;
    double eps = std::exp(-5.0);
    std::size_t action_dim = 0;
    std::vector<CacheEntry> entries;

    std::size_t rows() const { return entries.size() / 2; }
    const CacheEntry& at(std::size_t row, Slot which) const {
        const auto idx = 2 * row + static_cast<std::size_t>(which);
        if (idx >= entries.size()) throw ContractViolation("SupportCache: row " + std::to_string(row) + " not cached");
        return entries[idx];
    }
};

struct CacheBuildConfig {
    std::size_t n = 30;
    double eps = std::exp(-5.0);
    SamplerConfig sampler;
    LikelihoodConfig likelihood;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
};

struct CacheBuildStats {
    std::size_t fallbacks = 0;
    std::size_t rejected_likelihood = 0;
    std::size_t rejected_bounds = 0;
};

struct InSupportSamples {
    Matrix actions;
    std::vector<double> logp;
    std::size_t rejected_likelihood = 0;
    std::size_t rejected_bounds = 0;
};

// Draws n candidates, drops those outside [-1, 1]^d, then those with
// log p < ln eps. Rejected draws are not replaced.
inline InSupportSamples sample_in_support(const ScoreModel& model, const Vector& state, std::size_t n, double eps,
                                          const SamplerConfig& sampler, const LikelihoodConfig& lik, Rng& rng) {
    require(eps > 0.0, "sample_in_support: eps must be positive");
    InSupportSamples out;
    const Matrix draws = pc_sample(model, state, n, sampler, rng);
    std::vector<Eigen::Index> inside;
    for (Eigen::Index i = 0; i < draws.cols(); ++i) {
        if ((draws.col(i).array().abs() <= 1.0).all()) inside.push_back(i);
        else ++out.rejected_bounds;
    }
    out.actions.resize(draws.rows(), 0);
    if (inside.empty()) return out;
    Matrix kept(draws.rows(), static_cast<Eigen::Index>(inside.size()));
    for (std::size_t j = 0; j < inside.size(); ++j) kept.col(static_cast<Eigen::Index>(j)) = draws.col(inside[j]);
    const Vector lp = log_likelihood(model, state, kept, lik);
    const double threshold = std::log(eps);
    std::vector<Eigen::Index> pass;
    for (Eigen::Index j = 0; j < lp.size(); ++j) {
        if (lp[j] >= threshold) pass.push_back(j);
        else ++out.rejected_likelihood;
    }
    out.actions.resize(draws.rows(), static_cast<Eigen::Index>(pass.size()));
    for (std::size_t j = 0; j < pass.size(); ++j) {
        out.actions.col(static_cast<Eigen::Index>(j)) = kept.col(pass[j]);
        out.logp.push_back(lp[pass[j]]);
    }
    return out;
}

// Builds the cache over a dataset in the model's normalized action space.
// Row r, slot w uses the RNG substream (seed, 2r + w), so the result does not
// depend on the thread count. Next-state entries of terminal rows are left
// empty because they are never bootstrapped from. A state whose draws are all
// rejected stores the dataset action for that state with fallback = true.
inline SupportCache build_support_cache(const ScoreModel& model, const OfflineDataset& data, const CacheBuildConfig& cfg,
                                        CacheBuildStats* stats = nullptr) {
    require(cfg.n >= 1, "build_support_cache: N must be >= 1");
    require(cfg.eps > 0.0, "build_support_cache: eps must be positive");
    require(model.action_dim == data.header.action_dim && model.state_dim == data.header.state_dim,
            "build_support_cache: model and dataset dims differ");
    SupportCache cache;
    cache.n_requested = cfg.n;
    cache.eps = cfg.eps;
    cache.action_dim = data.header.action_dim;
    cache.entries.resize(2 * data.size());
    const StateIndex index(data);
    const auto& bounds = data.header.bounds;

    std::vector<CacheBuildStats> per_entry(cache.entries.size());
    auto fill = [&](std::size_t idx) {
        const std::size_t row = idx / 2;
        const Slot which = static_cast<Slot>(idx % 2);
        const auto& tr = data.transitions[row];
        CacheEntry& e = cache.entries[idx];
        e.row = row;
        e.which = which;
        e.actions.resize(static_cast<Eigen::Index>(cache.action_dim), 0);
        if (which == Slot::s2 && tr.done) return;
        const Vector& state = which == Slot::s ? tr.s : tr.s2;
        Rng rng = substream(cfg.seed, idx);
        auto smp = sample_in_support(model, state, cfg.n, cfg.eps, cfg.sampler, cfg.likelihood, rng);
        per_entry[idx].rejected_bounds = smp.rejected_bounds;
        per_entry[idx].rejected_likelihood = smp.rejected_likelihood;
        if (smp.logp.empty()) {
            Vector a = tr.a;
            if (which == Slot::s2) {
                if (auto other = index.find(tr.s2)) a = data.transitions[*other].a;
            }
            Matrix fa = bounds.normalize(a);
            e.actions = fa;
            e.logp = {log_likelihood(model, state, fa, cfg.likelihood)[0]};
            e.fallback = true;
            per_entry[idx].fallbacks = 1;
        } else {
            e.actions = std::move(smp.actions);
            e.logp = std::move(smp.logp);
        }
    };
    const std::size_t threads = std::max<std::size_t>(1, cfg.threads);
    if (threads == 1) {
        for (std::size_t i = 0; i < cache.entries.size(); ++i) fill(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(threads);
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < threads; ++w)
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = next++; i < cache.entries.size(); i = next++) fill(i);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        for (auto& t : pool) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    if (stats) {
        *stats = {};
        for (const auto& s : per_entry) {
            stats->fallbacks += s.fallbacks;
            stats->rejected_bounds += s.rejected_bounds;
            stats->rejected_likelihood += s.rejected_likelihood;
        }
    }
    return cache;
}

inline std::string support_cache_to_string(const SupportCache& cache) {
    std::string out;
    for (const auto& e : cache.entries) {
        nlohmann::ordered_json j;
        j["row"] = e.row;
        j["which"] = to_string(e.which);
        json actions = json::array();
        for (Eigen::Index i = 0; i < e.actions.cols(); ++i) {
            Vector col = e.actions.col(i);
            actions.push_back(detail::to_std(col));
        }
        j["actions"] = actions;
        j["logp"] = e.logp;
        j["fallback"] = e.fallback;
        out += j.dump() + "\n";
    }
    return out;
}

inline void save_support_cache(const std::filesystem::path& path, const SupportCache& cache) {
    detail::write_file(path, support_cache_to_string(cache));
}

// Records must appear in (row, s then s2) order. N and eps are not part of the
// file and are supplied by the caller.
inline SupportCache load_support_cache(const std::filesystem::path& path, std::size_t n_requested, double eps) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open support cache '" + path.string() + "'");
    SupportCache cache;
    cache.n_requested = n_requested;
    cache.eps = eps;
    std::string line;
    std::size_t lineno = 0;
    bool dim_known = false;
    while (std::getline(in, line)) {
        ++lineno;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception&) {
            throw ParseError("malformed JSON in support cache", lineno);
        }
        CacheEntry e;
        try {
            e.row = j.at("row").get<std::size_t>();
            const auto w = j.at("which").get<std::string>();
            if (w != "s" && w != "s2") throw ParseError("bad 'which' value", lineno);
            e.which = w == "s" ? Slot::s : Slot::s2;
            e.logp = j.at("logp").get<std::vector<double>>();
            e.fallback = j.at("fallback").get<bool>();
            const auto acts = j.at("actions").get<std::vector<std::vector<double>>>();
            if (acts.size() != e.logp.size()) throw ParseError("actions/logp length mismatch", lineno);
            if (acts.size() > n_requested) throw ParseError("more than N cached actions", lineno);
            for (const auto& a : acts) {
                if (!dim_known) {
                    cache.action_dim = a.size();
                    dim_known = true;
                }
                if (a.size() != cache.action_dim) throw ParseError("inconsistent action dimension", lineno);
            }
            e.actions.resize(static_cast<Eigen::Index>(cache.action_dim), static_cast<Eigen::Index>(acts.size()));
            for (std::size_t i = 0; i < acts.size(); ++i)
                for (std::size_t d = 0; d < acts[i].size(); ++d) {
                    if (std::abs(acts[i][d]) > 1.0) throw ParseError("cached action outside normalized bounds", lineno);
                    e.actions(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(i)) = acts[i][d];
                }
            if (!e.fallback)
                for (double lp : e.logp)
                    if (lp < std::log(eps)) throw ParseError("cached log-likelihood below ln eps", lineno);
        } catch (const json::exception& ex) {
            throw ParseError(std::string("bad support cache record: ") + ex.what(), lineno);
        }
        const std::size_t expected = cache.entries.size();
        if (e.row != expected / 2 || static_cast<std::size_t>(e.which) != expected % 2)
            throw ParseError("support cache records out of order", lineno);
        cache.entries.push_back(std::move(e));
    }
    if (cache.entries.size() % 2 != 0) throw ParseError("support cache missing final s2 record", lineno + 1);
    for (auto& e : cache.entries) e.actions.conservativeResize(static_cast<Eigen::Index>(cache.action_dim), e.actions.cols());
    return cache;
}

}  // namespace arq
