#include "magrecon/solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include <Eigen/Eigenvalues>

#include "magrecon/error.hpp"
#include "magrecon/summation.hpp"
#include "power_iteration.hpp"

namespace magrecon {

SolveProblem::SolveProblem(const ForwardModel& model, const FieldData& data, double lambda)
    : model_(&model), data_(&data), lambda_(lambda) {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) fail(ErrorKind::InvalidArgument, "lambda must be positive");
    if (data.size() != model.rows()) fail(ErrorKind::Mismatch, "measurement mismatch: data not on the model's grid");
}

void SolverConfig::validate() const {
    if (!(rel_obj_tol > 0.0) || !(certificate_tol > 0.0)) fail(ErrorKind::Config, "solver tolerances must be positive");
    if (max_iter == 0 || in_crowd_batch == 0 || max_passes == 0) {
        fail(ErrorKind::Config, "max_iter, in_crowd_batch and max_passes must be positive");
    }
}

std::string to_string(StopReason r) {
    switch (r) {
        case StopReason::Certificate: return "certificate";
        case StopReason::ObjectiveTolerance: return "objective_tolerance";
        case StopReason::Stalled: return "stalled";
        case StopReason::MaxIterations: return "max_iter";
        case StopReason::MaxPasses: return "max_passes";
    }
    return "unknown";
}

std::optional<StopReason> stop_reason_from_string(const std::string& s) {
    for (auto r : {StopReason::Certificate, StopReason::ObjectiveTolerance, StopReason::Stalled,
                   StopReason::MaxIterations, StopReason::MaxPasses}) {
        if (to_string(r) == s) return r;
    }
    return std::nullopt;
}

Vec3 group_prox(const Vec3& m, double t) {
    const double n = m.norm();
    if (n <= t) return Vec3::Zero();
    return m * (1.0 - t / n);
}

double objective(const SolveProblem& problem, const DiscreteMagnetization& mu) {
    const FieldData r = problem.data() - problem.model().forward(mu);
    return inner_product(problem.model().target(), r, r) + problem.lambda() * tv_norm(mu);
}

namespace {

using Eigen::Index;
using Eigen::VectorXd;

constexpr Index kGramMaxCols = 3000;
constexpr Index kExactEigenMaxCols = 600;
constexpr std::size_t kAnchorEvery = 50;
constexpr std::size_t kCheckEvery = 10;

double packed_tv(const VectorXd& x) {
    CompensatedSum acc;
    for (Index i = 0; i < x.size(); i += 3) acc.add(x.segment<3>(i).norm());
    return acc.value();
}

/// Certificate on a packed vector; g = A*(f - A x) on the same sites.
bool certificate_holds(const VectorXd& g, const VectorXd& x, double lambda, double tol) {
    const double half = 0.5 * lambda;
    for (Index i = 0; i < x.size(); i += 3) {
        const Vec3 m = x.segment<3>(i);
        const Vec3 gi = g.segment<3>(i);
        if (gi.norm() > half * (1.0 + tol)) return false;
        if (!m.isZero(0.0) && (gi - half * m / m.norm()).norm() > tol * lambda) return false;
    }
    return true;
}

/// Change of |m| between two moments, (|m|^2 - |a|^2)/(|m| + |a|), which keeps
/// full relative accuracy when m and a are close.
double norm_change(const Vec3& m, const Vec3& a) {
    const double den = m.norm() + a.norm();
    if (den == 0.0) return 0.0;
    return (m - a).dot(m + a) / den;
}

/// Objective difference F(x) - F(x_a) and the size of the terms that built it.
struct Delta {
    double value = 0.0;
    double scale = 0.0;
};

/// q(x) = ||f - A_S x||^2_rho on a fixed list of sites, handled relative to an
/// anchor x_a where the residual r_a and g_a = A_S*(f - A_S x_a) were computed
/// directly with compensated sums:
///   q(x) - q(x_a) = -2 d.g_a + ||A_S d||^2,   d = x - x_a
///   A_S*(f - A_S y) = g_a - A_S*A_S (y - x_a).
/// Objective changes are therefore resolved relative to the step, not to F,
/// which is what lets tiny-lambda solves reach the certificate tolerance.
/// Small problems keep the Gram matrix G = A_S* A_S; large ones apply the
/// operator each time.
class Subproblem {
public:
    Subproblem(const SolveProblem& problem, std::span<const std::size_t> sites, std::uint64_t seed)
        : problem_(problem), sites_(sites.begin(), sites.end()), dim_(static_cast<Index>(3 * sites.size())) {
        const auto& q = problem.model().target();
        if (dim_ <= kGramMaxCols) {
            columns_ = problem.model().gather_columns(sites_);
            Eigen::MatrixXd weighted = columns_;
            if (!q.uniform_weights()) {
                for (std::size_t p = 0; p < q.size(); ++p) weighted.row(static_cast<Index>(p)) *= std::sqrt(q.weight(p));
            }
            gram_.noalias() = weighted.transpose() * weighted;
            gram_mode_ = true;
        }
        lipschitz_ = estimate_lipschitz(seed);
    }

    Index dim() const noexcept { return dim_; }
    double lipschitz() const noexcept { return lipschitz_; }
    void grow_lipschitz() noexcept { lipschitz_ *= 2.0; }

    void anchor(const VectorXd& x) {
        anchor_x_ = x;
        const std::vector<double> r = residual(x);
        const auto w = problem_.model().target().weights();
        CompensatedSum rr;
        for (std::size_t p = 0; p < r.size(); ++p) rr.add(w[p] * r[p] * r[p]);
        anchor_value_ = rr.value() + problem_.lambda() * packed_tv(x);
        anchor_g_ = adjoint(r);
    }

    const VectorXd& anchor_g() const noexcept { return anchor_g_; }
    /// F at the anchor, computed from scratch.
    double anchor_value() const noexcept { return anchor_value_; }

    /// H v with H = A_S* A_S (the Gram matrix when it is stored).
    VectorXd normal_apply(const VectorXd& v) const {
        if (gram_mode_) return gram_ * v;
        const std::vector<double> av =
            problem_.model().apply_sites(sites_, {v.data(), static_cast<std::size_t>(v.size())});
        const std::vector<double> g = problem_.model().adjoint_sites(av, sites_);
        return Eigen::Map<const VectorXd>(g.data(), dim_);
    }

    VectorXd offset(const VectorXd& x) const { return x - anchor_x_; }

    /// F(x) - F(x_a), given hd = H (x - x_a).
    Delta delta(const VectorXd& x, const VectorXd& hd) const {
        const VectorXd d = x - anchor_x_;
        CompensatedSum lin, tv;
        double scale = 0.0;
        for (Index i = 0; i < dim_; ++i) {
            const double t = -2.0 * d[i] * anchor_g_[i];
            lin.add(t);
            scale += std::abs(t);
        }
        for (Index i = 0; i < dim_; i += 3) {
            const double c = norm_change(x.segment<3>(i), anchor_x_.segment<3>(i));
            tv.add(c);
            scale += problem_.lambda() * std::abs(c);
        }
        const double quad = std::max(0.0, d.dot(hd));
        scale += quad;
        return {lin.value() + quad + problem_.lambda() * tv.value(), scale};
    }

private:
    std::vector<double> residual(const VectorXd& x) const {
        const auto& f = problem_.data().values;
        std::vector<double> r(f.size());
        if (gram_mode_) {
            std::vector<CompensatedSum> acc(f.size());
            for (Index c = 0; c < dim_; ++c) {
                const double xc = x[c];
                if (xc == 0.0) continue;
                const double* col = columns_.col(c).data();
                for (std::size_t p = 0; p < f.size(); ++p) acc[p].add(col[p] * xc);
            }
            for (std::size_t p = 0; p < f.size(); ++p) r[p] = f[p] - acc[p].value();
        } else {
            const std::vector<double> ax =
                problem_.model().apply_sites(sites_, {x.data(), static_cast<std::size_t>(x.size())});
            for (std::size_t p = 0; p < f.size(); ++p) r[p] = f[p] - ax[p];
        }
        return r;
    }

    VectorXd adjoint(const std::vector<double>& r) const {
        if (gram_mode_) {
            const auto w = problem_.model().target().weights();
            std::vector<double> coef(r.size());
            for (std::size_t p = 0; p < r.size(); ++p) coef[p] = w[p] * r[p];
            VectorXd g(dim_);
            for (Index c = 0; c < dim_; ++c) {
                const double* col = columns_.col(c).data();
                CompensatedSum acc;
                for (std::size_t p = 0; p < r.size(); ++p) acc.add(coef[p] * col[p]);
                g[c] = acc.value();
            }
            return g;
        }
        const std::vector<double> g = problem_.model().adjoint_sites(r, sites_);
        return Eigen::Map<const VectorXd>(g.data(), dim_);
    }

    double estimate_lipschitz(std::uint64_t seed) const {
        if (dim_ == 0) return 0.0;
        if (gram_mode_ && dim_ <= kExactEigenMaxCols) {
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram_, Eigen::EigenvaluesOnly);
            return es.eigenvalues().maxCoeff() * (1.0 + 1e-12);
        }
        constexpr double tol = 1e-6;
        auto apply = [&](const VectorXd& v) -> VectorXd { return normal_apply(v); };
        const auto r = detail::power_iteration(dim_, apply, tol, seed, 100000);
        return r.rayleigh * (1.0 + 10.0 * tol);
    }

    const SolveProblem& problem_;
    std::vector<std::size_t> sites_;
    Index dim_;
    bool gram_mode_ = false;
    Eigen::MatrixXd columns_;
    Eigen::MatrixXd gram_;
    double lipschitz_ = 0.0;
    VectorXd anchor_x_;
    VectorXd anchor_g_;
    double anchor_value_ = 0.0;
};

struct FistaOutcome {
    VectorXd x;
    std::size_t iterations = 0;
    StopReason reason = StopReason::MaxIterations;
};

/// The trace starts from an exactly computed F and then accumulates the
/// per-step decrements, so it is non-increasing by construction whenever the
/// restart rule is on. A trace that is already populated (In-Crowd passes)
/// continues from its last value: each pass starts at the previous iterate.
FistaOutcome run_fista(Subproblem& sub, double lambda, VectorXd x, const SolverConfig& cfg, double rel_obj_tol,
                       std::vector<double>& trace) {
    const double tol = cfg.certificate_tol;
    sub.anchor(x);
    if (trace.empty()) trace.push_back(sub.anchor_value());
    if (certificate_holds(sub.anchor_g(), x, lambda, tol)) return {std::move(x), 0, StopReason::Certificate};
    if (!(sub.lipschitz() > 0.0)) return {std::move(x), 0, StopReason::Stalled};

    // hx = H (x - x_a) and hy = H (y - x_a) are carried along linearly, so
    // one application of H per iteration suffices; re-anchoring refreshes them.
    VectorXd y = x;
    VectorXd hx = VectorXd::Zero(sub.dim());
    VectorXd hy = hx;
    double t = 1.0;
    bool momentum = false;
    std::size_t since_anchor = 0;
    Delta dx;  // F(x) - F(anchor)
    const auto prox_all = [&](const VectorXd& z, double thr) {
        VectorXd out(z.size());
        for (Index i = 0; i < z.size(); i += 3) out.segment<3>(i) = group_prox(z.segment<3>(i), thr);
        return out;
    };
    const auto reanchor = [&] {
        sub.anchor(x);
        dx = {};
        hx.setZero();
        hy = y == x ? hx : sub.normal_apply(sub.offset(y));
        since_anchor = 0;
    };

    for (std::size_t it = 1; it <= cfg.max_iter; ++it) {
        const double step = 1.0 / sub.lipschitz();
        const VectorXd z = y + step * (sub.anchor_g() - hy);
        VectorXd x_new = prox_all(z, 0.5 * lambda * step);
        VectorXd hx_new = sub.normal_apply(sub.offset(x_new));
        const Delta d_new = sub.delta(x_new, hx_new);
        const double change = d_new.value - dx.value;

        if (cfg.restart && change > 0.0) {
            if (momentum) {
                t = 1.0;
                y = x;
                hy = hx;
                momentum = false;
                continue;
            }
            // A plain proximal step from x went uphill: either the curvature
            // estimate is too small or the change is rounding noise.
            if (change > 1e-12 * (d_new.scale + dx.scale)) {
                sub.grow_lipschitz();
                continue;
            }
            reanchor();
            if (certificate_holds(sub.anchor_g(), x, lambda, tol)) return {std::move(x), it, StopReason::Certificate};
            return {std::move(x), it, StopReason::Stalled};
        }

        const double t_new = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        const double beta = (t - 1.0) / t_new;
        y = x_new + beta * (x_new - x);
        hy = hx_new + beta * (hx_new - hx);
        momentum = beta > 0.0;
        const double current = trace.back() + change;
        const double rel = -change / std::max(std::abs(current), std::numeric_limits<double>::min());
        x = std::move(x_new);
        hx = std::move(hx_new);
        dx = d_new;
        t = t_new;
        trace.push_back(current);

        if (++since_anchor >= kAnchorEvery) reanchor();
        const bool small_change = std::abs(rel) < rel_obj_tol;
        if (small_change || it % kCheckEvery == 0) {
            const bool cheap = certificate_holds(sub.anchor_g() - hx, x, lambda, tol);
            if (cheap || small_change) {
                reanchor();
                if (certificate_holds(sub.anchor_g(), x, lambda, tol)) {
                    return {std::move(x), it, StopReason::Certificate};
                }
            }
            if (small_change) return {std::move(x), it, StopReason::ObjectiveTolerance};
        }
    }
    return {std::move(x), cfg.max_iter, StopReason::MaxIterations};
}

SolveResult finish(const SolveProblem& problem, DiscreteMagnetization mu, std::vector<double> trace,
                   std::size_t iterations, std::size_t passes, StopReason reason) {
    SolveResult out;
    out.lambda = problem.lambda();
    out.residual = problem.data() - problem.model().forward(mu);
    out.objective = inner_product(problem.model().target(), out.residual, out.residual) +
                    problem.lambda() * tv_norm(mu);
    out.mu = std::move(mu);
    out.objective_trace = std::move(trace);
    out.iterations = iterations;
    out.active_set_passes = passes;
    out.reason = reason;
    out.converged = reason != StopReason::MaxIterations && reason != StopReason::MaxPasses;
    return out;
}

void check_warm(const SolveProblem& problem, const std::optional<DiscreteMagnetization>& warm) {
    if (warm && (warm->grid_id() != problem.model().source().fingerprint() ||
                 warm->site_count() != problem.model().source().site_count())) {
        fail(ErrorKind::Mismatch, "support mismatch: warm start is not on the model's source grid");
    }
}

struct InnerSolve {
    DiscreteMagnetization mu;
    std::size_t iterations = 0;
    StopReason reason = StopReason::MaxIterations;
};

InnerSolve solve_sites(const SolveProblem& problem, std::span<const std::size_t> sites, const SolverConfig& cfg,
                       double rel_obj_tol, const std::optional<DiscreteMagnetization>& warm,
                       std::vector<double>& trace) {
    const DipoleGrid& grid = problem.model().source();
    if (sites.empty()) {
        trace.push_back(objective(problem, DiscreteMagnetization::zero(grid)));
        return {DiscreteMagnetization::zero(grid), 0, StopReason::Certificate};
    }
    Subproblem sub(problem, sites, cfg.seed);
    VectorXd x = VectorXd::Zero(sub.dim());
    if (warm) {
        for (std::size_t i = 0; i < sites.size(); ++i) x.segment<3>(static_cast<Index>(3 * i)) = warm->moment_at(sites[i]);
    }
    FistaOutcome out = run_fista(sub, problem.lambda(), std::move(x), cfg, rel_obj_tol, trace);
    std::vector<MomentEntry> entries;
    for (std::size_t i = 0; i < sites.size(); ++i) {
        const Vec3 m = out.x.segment<3>(static_cast<Index>(3 * i));
        if (!m.isZero(0.0)) entries.push_back({sites[i], m});
    }
    return {DiscreteMagnetization::on(grid, std::move(entries)), out.iterations, out.reason};
}

}  // namespace

SolveResult fista_on_sites(const SolveProblem& problem, std::span<const std::size_t> sites, const SolverConfig& config,
                           const std::optional<DiscreteMagnetization>& warm_start) {
    config.validate();
    check_warm(problem, warm_start);
    std::set<std::size_t> seen;
    for (std::size_t s : sites) {
        if (s >= problem.model().source().site_count()) fail(ErrorKind::Mismatch, "support mismatch: site outside grid");
        if (!seen.insert(s).second) fail(ErrorKind::InvalidArgument, "duplicate site in subproblem");
    }
    std::vector<double> trace;
    InnerSolve s = solve_sites(problem, sites, config, config.rel_obj_tol, warm_start, trace);
    return finish(problem, std::move(s.mu), std::move(trace), s.iterations, 1, s.reason);
}

SolveResult fista(const SolveProblem& problem, const SolverConfig& config,
                  const std::optional<DiscreteMagnetization>& warm_start) {
    std::vector<std::size_t> all(problem.model().source().site_count());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return fista_on_sites(problem, all, config, warm_start);
}

SolveResult in_crowd(const SolveProblem& problem, const SolverConfig& config,
                     const std::optional<DiscreteMagnetization>& warm_start) {
    config.validate();
    check_warm(problem, warm_start);
    const ForwardModel& model = problem.model();
    const DipoleGrid& grid = model.source();
    const double lambda = problem.lambda();
    const double half = 0.5 * lambda;
    const double tol = config.certificate_tol;

    DiscreteMagnetization mu = warm_start ? *warm_start : DiscreteMagnetization::zero(grid);
    std::vector<std::size_t> active = mu.support();
    std::set<std::vector<std::size_t>> seen;
    double inner_rel_tol = config.rel_obj_tol;
    std::vector<double> trace;
    std::size_t iterations = 0;

    for (std::size_t pass = 1; pass <= config.max_passes; ++pass) {
        const FieldData residual = problem.data() - model.forward(mu);
        const std::vector<Vec3> g = model.adjoint(residual);

        std::vector<char> is_active(grid.site_count(), 0);
        for (std::size_t s : active) is_active[s] = 1;
        bool ok = true;
        std::vector<std::pair<double, std::size_t>> violators;
        for (std::size_t j = 0; j < g.size(); ++j) {
            const double gn = g[j].norm();
            if (gn > half * (1.0 + tol)) {
                ok = false;
                if (!is_active[j]) violators.emplace_back(gn, j);
            }
        }
        for (const auto& e : mu.entries()) {
            if ((g[e.site] - half * e.moment / e.moment.norm()).norm() > tol * lambda) ok = false;
        }
        if (ok) {
            if (trace.empty()) trace.push_back(objective(problem, mu));
            return finish(problem, std::move(mu), std::move(trace), iterations, pass, StopReason::Certificate);
        }

        std::sort(violators.begin(), violators.end(), [](const auto& a, const auto& b) {
            return a.first != b.first ? a.first > b.first : a.second < b.second;
        });
        const std::size_t take = std::min(violators.size(), config.in_crowd_batch);
        for (std::size_t k = 0; k < take; ++k) active.push_back(violators[k].second);
        std::sort(active.begin(), active.end());

        // Nothing new to admit, or an active set we already solved: the
        // previous inner solve was not accurate enough.
        if (take == 0 || !seen.insert(active).second) inner_rel_tol = std::max(inner_rel_tol * 1e-2, 1e-300);

        InnerSolve s = solve_sites(problem, active, config, inner_rel_tol, mu, trace);
        iterations += s.iterations;
        mu = std::move(s.mu);
        active = mu.support();
    }
    return finish(problem, std::move(mu), std::move(trace), iterations, config.max_passes, StopReason::MaxPasses);
}

std::vector<SweepPoint> lambda_sweep(const ForwardModel& model, std::span<const double> lambdas,
                                     const std::function<SweepData(double)>& data_for, const SolverConfig& config,
                                     const SweepOptions& options) {
    if (lambdas.empty()) fail(ErrorKind::InvalidArgument, "empty lambda list");
    for (std::size_t i = 0; i < lambdas.size(); ++i) {
        if (!(lambdas[i] > 0.0)) fail(ErrorKind::InvalidArgument, "lambdas must be positive");
        if (i > 0 && !(lambdas[i] < lambdas[i - 1])) fail(ErrorKind::InvalidArgument, "lambdas must be strictly decreasing");
    }
    const double ref_tv = options.reference ? tv_norm(*options.reference) : 0.0;
    std::vector<SweepPoint> out;
    std::optional<DiscreteMagnetization> warm;
    for (double lambda : lambdas) {
        SweepPoint pt;
        pt.lambda = lambda;
        try {
            const SweepData d = data_for(lambda);
            pt.noise_norm = d.noise_norm;
            const SolveProblem problem(model, d.data, lambda);
            SolveResult r = in_crowd(problem, config, options.warm_start ? warm : std::nullopt);
            pt.summary = summarize(model.source(), r.mu);
            if (options.reference) {
                if (ref_tv > 0.0) pt.relative_tv_distance = tv_distance(r.mu, *options.reference) / ref_tv;
                if (d.noise_norm) {
                    pt.tv_bound = (*d.noise_norm) * (*d.noise_norm) / lambda + ref_tv;
                    pt.bound_holds = tv_norm(r.mu) <= *pt.tv_bound + 1e-9;
                }
            }
            warm = r.mu;
            pt.result = std::move(r);
        } catch (const Error& e) {
            pt.error = e.what();
        }
        out.push_back(std::move(pt));
    }
    return out;
}

std::vector<SweepPoint> lambda_sweep(const ForwardModel& model, const FieldData& data, std::span<const double> lambdas,
                                     const SolverConfig& config, const SweepOptions& options) {
    return lambda_sweep(model, lambdas, [&](double) { return SweepData{data, std::nullopt}; }, config, options);
}

}  // namespace magrecon
