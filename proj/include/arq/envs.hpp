#pragma once

// Toy continuous-action environments with analytically known structure and
// their behavior policies.
//
// lineworld   contextual bandit, s ~ U[-1, 1]. Behavior has two modes at
//             a = +-(0.3 + 0.4|s|), each an Epanechnikov bump of half-width
//             0.1, with a hard gap between them. The + mode has weight 0.75
//             for s < 0 and 0.25 for s >= 0. Reward 1 inside the minority
//             (high) mode, 0.2 inside the majority mode, -1 elsewhere.
//             Optimal return 1.
// stitchgrid  8 waypoints on the segment (-1,-0.5) -> (1,0.5), start at
//             waypoint 0, goal at waypoint 7, horizon 16. Action a in [-1,1]
//             moves forward (a > 1/3), backward (a < -1/3) or stays. Reward -1
//             per step and 0 on arrival at the goal. Behavior data holds only
//             start->midpoint and midpoint->goal segments of a noisy walker, so
//             reaching the goal from the start requires stitching.
//             Optimal return -6.
// cliffbandit one-step bandit with constant state 0. Reward 1 - a^2 for
//             |a| <= 0.8 and -10 otherwise; behavior covers |a| in [0.2, 0.8].
//             In-support optimum |a| = 0.2 with return 0.96.

#include <array>
#include <memory>
#include <numbers>
#include <optional>

#include "arq/dataset.hpp"

namespace arq {

struct EnvDescriptor {
    std::string name;
    std::size_t state_dim = 0;
    std::size_t action_dim = 0;
    std::size_t horizon = 1;
    double reward_min = 0.0;
    double reward_max = 0.0;
    double optimal_return = 0.0;  // undiscounted, from the start distribution
};

struct StepResult {
    Vector next_state;
    double reward = 0.0;
    bool done = false;
    bool goal = false;
};

class ToyEnv {
public:
    virtual ~ToyEnv() = default;
    virtual const EnvDescriptor& descriptor() const = 0;
    virtual Vector reset(Rng& rng) const = 0;
    // Pure in (state, action, rng); actions are raw (unnormalized).
    virtual StepResult step(const Vector& state, const Vector& action, Rng& rng) const = 0;
    virtual Vector sample_behavior(const Vector& state, Rng& rng) const = 0;
    // Exact log-density of the behavior policy, -inf outside its support.
    virtual double behavior_log_density(const Vector& state, const Vector& action) const = 0;
    virtual Vector optimal_action(const Vector& state) const = 0;
    // Default: independent episodes of the behavior policy.
    virtual std::vector<Transition> generate(std::size_t n, Rng& rng) const {
        std::vector<Transition> out;
        while (out.size() < n) {
            Vector s = reset(rng);
            for (std::size_t t = 0; t < descriptor().horizon && out.size() < n; ++t) {
                Vector a = sample_behavior(s, rng);
                auto res = step(s, a, rng);
                out.push_back({s, a, res.reward, res.next_state, res.done, res.goal});
                if (res.done) break;
                s = res.next_state;
            }
        }
        return out;
    }
};

namespace detail {

inline Vector vec1(double x) {
    Vector v(1);
    v[0] = x;
    return v;
}

// Epanechnikov draw on [-1, 1].
inline double epanechnikov(Rng& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double u1 = u(rng), u2 = u(rng), u3 = u(rng);
    if (std::abs(u3) >= std::abs(u2) && std::abs(u3) >= std::abs(u1)) return u2;
    return u3;
}

}  // namespace detail

class LineWorld final : public ToyEnv {
public:
    static constexpr double kHalfWidth = 0.1;

    const EnvDescriptor& descriptor() const override { return desc_; }

    Vector reset(Rng& rng) const override { return detail::vec1(std::uniform_real_distribution<double>(-1.0, 1.0)(rng)); }

    static double mode_center(double s) { return 0.3 + 0.4 * std::abs(s); }
    static double plus_weight(double s) { return s < 0.0 ? 0.75 : 0.25; }
    // The minority mode pays 1: sign +1 for s >= 0, -1 for s < 0.
    static double high_sign(double s) { return s < 0.0 ? -1.0 : 1.0; }

    StepResult step(const Vector& state, const Vector& action, Rng&) const override {
        require(state.size() == 1 && action.size() == 1, "lineworld: bad dims");
        const double s = state[0], a = action[0], c = mode_center(s);
        double r = -1.0;
        if (std::abs(a - high_sign(s) * c) <= kHalfWidth) r = 1.0;
        else if (std::abs(a + high_sign(s) * c) <= kHalfWidth) r = 0.2;
        return {state, r, true, false};
    }

    Vector sample_behavior(const Vector& state, Rng& rng) const override {
        const double s = state[0];
        const bool plus = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < plus_weight(s);
        const double sign = plus ? 1.0 : -1.0;
        return detail::vec1(sign * mode_center(s) + kHalfWidth * detail::epanechnikov(rng));
    }

    double behavior_log_density(const Vector& state, const Vector& action) const override {
        const double s = state[0], a = action[0], c = mode_center(s);
        double density = 0.0;
        for (double sign : {1.0, -1.0}) {
            const double u = (a - sign * c) / kHalfWidth;
            if (std::abs(u) < 1.0) {
                const double w = sign > 0 ? plus_weight(s) : 1.0 - plus_weight(s);
                density += w * 0.75 * (1.0 - u * u) / kHalfWidth;
            }
        }
        return density > 0.0 ? std::log(density) : -std::numeric_limits<double>::infinity();
    }

    Vector optimal_action(const Vector& state) const override {
        return detail::vec1(high_sign(state[0]) * mode_center(state[0]));
    }

private:
    EnvDescriptor desc_{"lineworld", 1, 1, 1, -1.0, 1.0, 1.0};
};

class CliffBandit final : public ToyEnv {
public:
    static constexpr double kCliff = 0.8;
    static constexpr double kInner = 0.2;

    const EnvDescriptor& descriptor() const override { return desc_; }
    Vector reset(Rng&) const override { return detail::vec1(0.0); }

    static double reward(double a) { return std::abs(a) <= kCliff ? 1.0 - a * a : -10.0; }

    StepResult step(const Vector& state, const Vector& action, Rng&) const override {
        require(state.size() == 1 && action.size() == 1, "cliffbandit: bad dims");
        return {state, reward(action[0]), true, false};
    }

    Vector sample_behavior(const Vector&, Rng& rng) const override {
        const double mag = std::uniform_real_distribution<double>(kInner, kCliff)(rng);
        const bool plus = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < 0.5;
        return detail::vec1(plus ? mag : -mag);
    }

    double behavior_log_density(const Vector&, const Vector& action) const override {
        const double m = std::abs(action[0]);
        if (m >= kInner && m <= kCliff) return -std::log(2.0 * (kCliff - kInner));
        return -std::numeric_limits<double>::infinity();
    }

    Vector optimal_action(const Vector&) const override { return detail::vec1(kInner); }

private:
    EnvDescriptor desc_{"cliffbandit", 1, 1, 1, -10.0, 1.0, 1.0 - kInner * kInner};
};

class StitchGrid final : public ToyEnv {
public:
    static constexpr int kWaypoints = 8;
    static constexpr int kGoal = kWaypoints - 1;
    static constexpr int kMid = 4;
    static constexpr std::size_t kSegmentCap = 24;
    static constexpr double kForward = 0.4;
    static constexpr double kStay = 0.3;

    const EnvDescriptor& descriptor() const override { return desc_; }

    static Vector waypoint(int k) {
        Vector v(2);
        const double x = -1.0 + 2.0 * k / (kWaypoints - 1);
        v << x, 0.5 * x;
        return v;
    }
    static int index_of(const Vector& s) {
        const double k = (s[0] + 1.0) * (kWaypoints - 1) / 2.0;
        return std::clamp(static_cast<int>(std::lround(k)), 0, kGoal);
    }
    static int move_of(double a) { return a > 1.0 / 3.0 ? 1 : (a < -1.0 / 3.0 ? -1 : 0); }

    Vector reset(Rng&) const override { return waypoint(0); }

    StepResult step(const Vector& state, const Vector& action, Rng&) const override {
        require(state.size() == 2 && action.size() == 1, "stitchgrid: bad dims");
        const int k = index_of(state);
        if (k == kGoal) throw ContractViolation("stitchgrid: step from terminal goal state");
        const int next = std::clamp(k + move_of(action[0]), 0, kGoal);
        const bool goal = next == kGoal;
        return {waypoint(next), goal ? 0.0 : -1.0, goal, goal};
    }

    // forward U[0.5,0.9] w.p. 0.4, stay U[-0.15,0.15] w.p. 0.3, back U[-0.9,-0.5] w.p. 0.3
    Vector sample_behavior(const Vector&, Rng& rng) const override {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        const double pick = u(rng);
        if (pick < kForward) return detail::vec1(std::uniform_real_distribution<double>(0.5, 0.9)(rng));
        if (pick < kForward + kStay) return detail::vec1(std::uniform_real_distribution<double>(-0.15, 0.15)(rng));
        return detail::vec1(std::uniform_real_distribution<double>(-0.9, -0.5)(rng));
    }

    double behavior_log_density(const Vector&, const Vector& action) const override {
        const double a = action[0];
        if (a >= 0.5 && a <= 0.9) return std::log(kForward / 0.4);
        if (a >= -0.15 && a <= 0.15) return std::log(kStay / 0.3);
        if (a >= -0.9 && a <= -0.5) return std::log((1.0 - kForward - kStay) / 0.4);
        return -std::numeric_limits<double>::infinity();
    }

    Vector optimal_action(const Vector&) const override { return detail::vec1(0.7); }

    // Midpoint->goal segments first, then start->midpoint segments, so that no
    // row sequence in the file links the start to the goal.
    std::vector<Transition> generate(std::size_t n, Rng& rng) const override {
        std::vector<Transition> out;
        const std::size_t half = n / 2;
        bool last_done = true;
        while (out.size() < half || !last_done) {
            last_done = walk(kMid, kGoal, out, rng);
        }
        while (out.size() < n) walk(0, kMid, out, rng);
        out.resize(n);
        return out;
    }

private:
    // Behavior walk from `from` until it reaches `to` or the cap; returns true
    // when the walk ended in the goal.
    bool walk(int from, int to, std::vector<Transition>& out, Rng& rng) const {
        Vector s = waypoint(from);
        for (std::size_t t = 0; t < kSegmentCap; ++t) {
            Vector a = sample_behavior(s, rng);
            auto res = step(s, a, rng);
            out.push_back({s, a, res.reward, res.next_state, res.done, res.goal});
            if (res.done) return true;
            if (index_of(res.next_state) == to) return false;
            s = res.next_state;
        }
        return false;
    }

    EnvDescriptor desc_{"stitchgrid", 2, 1, 16, -1.0, 0.0, -6.0};
};

inline std::unique_ptr<ToyEnv> make_env(const std::string& name) {
    if (name == "lineworld") return std::make_unique<LineWorld>();
    if (name == "cliffbandit") return std::make_unique<CliffBandit>();
    if (name == "stitchgrid") return std::make_unique<StitchGrid>();
    throw ContractViolation("unknown environment '" + name + "'");
}

inline OfflineDataset generate_dataset(const ToyEnv& env, std::size_t n_transitions, std::uint64_t seed) {
    require(n_transitions >= 1, "generate_dataset: n_transitions must be >= 1");
    Rng rng(seed);
    OfflineDataset d;
    d.transitions = env.generate(n_transitions, rng);
    d.header.state_dim = env.descriptor().state_dim;
    d.header.action_dim = env.descriptor().action_dim;
    d.header.env = env.descriptor().name;
    d.header.seed = seed;
    d.header.bounds = fit_action_bounds(d.transitions);
    return d;
}

}  // namespace arq
