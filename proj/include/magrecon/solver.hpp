#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "magrecon/fields.hpp"
#include "magrecon/measures.hpp"

namespace magrecon {

/// Minimize F(mu) = ||f - A mu||^2_rho + lambda ||mu||_TV.
///
/// Thresholds are stated for the gradient of the full objective,
/// 2 A*(A mu - f). In these terms a minimizer satisfies
///   2 A*(f - A mu) = lambda m_j/|m_j|  on every nonzero site,
///   |2 A*(f - A mu)| <= lambda          on every site,
/// which is the same as A*(f - A mu) = (lambda/2) u with |A*(f - A mu)| <= lambda/2.
class SolveProblem {
public:
    /// Throws on lambda <= 0 or data not on the model's measurement grid.
    SolveProblem(const ForwardModel& model, const FieldData& data, double lambda);

    const ForwardModel& model() const noexcept { return *model_; }
    const FieldData& data() const noexcept { return *data_; }
    double lambda() const noexcept { return lambda_; }

private:
    const ForwardModel* model_;
    const FieldData* data_;
    double lambda_;
};

struct SolverConfig {
    std::size_t max_iter = 20000;      // per FISTA run
    double rel_obj_tol = 1e-10;
    double certificate_tol = 1e-6;
    std::size_t in_crowd_batch = 25;   // sites admitted per In-Crowd pass
    std::size_t max_passes = 200;      // In-Crowd outer passes
    bool restart = true;               // function-value restart (monotone trace)
    std::uint64_t seed = 0;            // power-iteration start vector

    /// Throws ErrorKind::Config on nonpositive tolerances or zero counts.
    void validate() const;
};

enum class StopReason {
    Certificate,         // optimality certificate satisfied
    ObjectiveTolerance,  // relative objective change below rel_obj_tol
    Stalled,             // no descent possible at working precision
    MaxIterations,
    MaxPasses,
};

std::string to_string(StopReason r);
std::optional<StopReason> stop_reason_from_string(const std::string& s);

struct SolveResult {
    double lambda = 0.0;
    DiscreteMagnetization mu;
    std::vector<double> objective_trace;  // accepted iterates only
    FieldData residual;                   // f - A mu, recomputed at exit
    double objective = 0.0;               // F at mu from the exit residual
    std::size_t iterations = 0;
    std::size_t active_set_passes = 0;
    bool converged = false;
    StopReason reason = StopReason::MaxIterations;

    bool operator==(const SolveResult&) const = default;
};

/// Group soft-thresholding: m * max(0, 1 - t/|m|), exactly zero when |m| <= t.
Vec3 group_prox(const Vec3& m, double t);

/// F(mu) evaluated from a freshly computed residual.
double objective(const SolveProblem& problem, const DiscreteMagnetization& mu);

/// FISTA over all sites of the model.
SolveResult fista(const SolveProblem& problem, const SolverConfig& config,
                  const std::optional<DiscreteMagnetization>& warm_start = std::nullopt);

/// FISTA over the listed sites only (moments elsewhere are held at zero).
/// Site order is the column order of the subproblem. The certificate used for
/// termination covers the listed sites only.
SolveResult fista_on_sites(const SolveProblem& problem, std::span<const std::size_t> sites,
                           const SolverConfig& config,
                           const std::optional<DiscreteMagnetization>& warm_start = std::nullopt);

/// In-Crowd active-set outer loop around fista_on_sites. Terminates only when
/// the certificate holds on the full grid.
SolveResult in_crowd(const SolveProblem& problem, const SolverConfig& config,
                     const std::optional<DiscreteMagnetization>& warm_start = std::nullopt);

struct SweepPoint {
    double lambda = 0.0;
    std::optional<SolveResult> result;  // empty when the solve threw
    std::string error;
    MomentSummary summary;
    std::optional<double> relative_tv_distance;  // tv_distance(mu, mu0) / tv_norm(mu0)
    std::optional<double> noise_norm;            // ||e||_rho used at this lambda
    std::optional<double> tv_bound;              // ||e||^2/lambda + tv_norm(mu0)
    std::optional<bool> bound_holds;             // tv_norm(mu) <= tv_bound + 1e-9
};

struct SweepData {
    FieldData data;
    std::optional<double> noise_norm;
};

struct SweepOptions {
    const DiscreteMagnetization* reference = nullptr;  // mu0, when known
    bool warm_start = true;
};

/// Warm-started In-Crowd solves along strictly decreasing lambdas.
/// `data_for` supplies the data (and noise norm, if known) for each lambda,
/// which lets noise scale with lambda. Solver exceptions are recorded per
/// point and the sweep continues.
std::vector<SweepPoint> lambda_sweep(const ForwardModel& model, std::span<const double> lambdas,
                                     const std::function<SweepData(double)>& data_for, const SolverConfig& config,
                                     const SweepOptions& options = {});

std::vector<SweepPoint> lambda_sweep(const ForwardModel& model, const FieldData& data, std::span<const double> lambdas,
                                     const SolverConfig& config, const SweepOptions& options = {});

}  // namespace magrecon
