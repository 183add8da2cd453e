#pragma once

#include <cmath>
#include <cstdint>

#include <Eigen/Core>

#include "magrecon/error.hpp"
#include "magrecon/rng.hpp"

namespace magrecon::detail {

struct PowerResult {
    double rayleigh = 0.0;
    std::size_t iterations = 0;
};

/// Largest eigenvalue of a symmetric positive semidefinite operator.
/// The Rayleigh quotient error decays geometrically, so the remaining error is
/// estimated as d_k r/(1 - r) from the last increment d_k and the observed
/// ratio r = d_k/d_{k-1}; iteration stops once that estimate and d_k are both
/// below tol/10 (relative).
template <class Apply>
PowerResult power_iteration(Eigen::Index n, Apply&& apply, double tol, std::uint64_t seed, std::size_t max_iter) {
    if (!(tol > 0.0)) fail(ErrorKind::InvalidArgument, "tolerance must be positive");
    if (n == 0) return {};
    SplitMix64 rng(seed);
    Eigen::VectorXd x(n);
    for (Eigen::Index i = 0; i < n; ++i) x[i] = rng.normal();
    x.normalize();
    double prev = 0.0;
    double prev_step = 0.0;
    for (std::size_t it = 1; it <= max_iter; ++it) {
        const Eigen::VectorXd y = apply(x);
        const double rq = x.dot(y);
        const double ny = y.norm();
        if (!(ny > 0.0)) return {0.0, it};
        const double step = std::abs(rq - prev);
        const double goal = 0.1 * tol * std::abs(rq);
        if (it > 1 && step == 0.0) return {rq, it};
        if (it > 2 && step <= goal && step < prev_step) {
            const double ratio = step / prev_step;
            if (step * ratio / (1.0 - ratio) <= goal) return {rq, it};
        }
        prev_step = step;
        prev = rq;
        x = y / ny;
    }
    fail(ErrorKind::Numerical, "norm estimation failed: power iteration did not converge");
}

}  // namespace magrecon::detail
