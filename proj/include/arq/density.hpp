#pragma once

// Conditional log-density maps log p(a | s) of a score model over a 1-D state
// grid and a 1-D action grid, written as CSV and as a binary grayscale PGM.

#include <cstdio>

#include "arq/sampling.hpp"

namespace arq {

struct DensityGrid {
    Vector s;     // ascending
    Vector a;     // raw action values, ascending
    Matrix logp;  // logp(i, j) at (s[i], a[j]), normalized action space
    std::size_t failures = 0;
    double floor = 0.0;  // clip floor, also used for failed cells
};

// Grid points must lie inside the model's action bounds. A failed likelihood
// evaluation is recorded at the clip floor ln(eps) - 5 and counted.
inline DensityGrid density_grid(const ScoreModel& model, const Vector& s_grid, const Vector& a_grid, double eps,
                                const LikelihoodConfig& lik = {}) {
    require(model.state_dim == 1 && model.action_dim == 1, "density_grid: needs a 1-D state and 1-D action model");
    require(s_grid.size() >= 1 && a_grid.size() >= 1, "density_grid: empty grid");
    require(eps > 0.0, "density_grid: eps must be positive");
    DensityGrid g;
    g.s = s_grid;
    g.a = a_grid;
    g.floor = std::log(eps) - 5.0;
    Matrix actions(1, a_grid.size());
    for (Eigen::Index j = 0; j < a_grid.size(); ++j) {
        const double x = model.normalizer ? model.normalizer->normalize(a_grid.segment(j, 1))[0] : a_grid[j];
        require(std::abs(x) <= 1.0 + 1e-12, "density_grid: action grid point outside the model's bounds");
        actions(0, j) = x;
    }
    g.logp.resize(s_grid.size(), a_grid.size());
    for (Eigen::Index i = 0; i < s_grid.size(); ++i) {
        const Vector state = s_grid.segment(i, 1);
        try {
            g.logp.row(i) = log_likelihood(model, state, actions, lik).transpose();
            continue;
        } catch (const NumericalError&) {
        }
        // Batched solve failed; retry point by point so one bad cell does not take the row.
        for (Eigen::Index j = 0; j < a_grid.size(); ++j) {
            try {
                g.logp(i, j) = log_likelihood(model, state, Vector(actions.col(j)), lik);
            } catch (const NumericalError&) {
                g.logp(i, j) = g.floor;
                ++g.failures;
            }
        }
    }
    return g;
}

inline Vector linspace(double lo, double hi, Eigen::Index n) {
    require(n >= 1, "linspace: n must be >= 1");
    if (n == 1) return Vector::Constant(1, 0.5 * (lo + hi));
    return Vector::LinSpaced(n, lo, hi);
}

inline std::string density_csv(const DensityGrid& g) {
    std::string out = "s,a,logp\n";
    char buf[96];
    for (Eigen::Index i = 0; i < g.s.size(); ++i)
        for (Eigen::Index j = 0; j < g.a.size(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", g.s[i], g.a[j], g.logp(i, j));
            out += buf;
        }
    return out;
}

// P5 image, one column per s (ascending) and one row per a (descending).
// Gray is linear in logp clipped to [floor, max].
inline std::string density_pgm(const DensityGrid& g) {
    const double hi = std::max(g.logp.maxCoeff(), g.floor);
    const double range = hi - g.floor;
    std::string out = "P5\n" + std::to_string(g.s.size()) + " " + std::to_string(g.a.size()) + "\n255\n";
    for (Eigen::Index j = g.a.size(); j-- > 0;)
        for (Eigen::Index i = 0; i < g.s.size(); ++i) {
            const double v = std::clamp(g.logp(i, j), g.floor, hi);
            const double level = range > 0.0 ? (v - g.floor) / range : 1.0;
            out += static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * level)));
        }
    return out;
}

}  // namespace arq
