#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "magrecon/fields.hpp"
#include "magrecon/measures.hpp"

namespace magrecon {

enum class ViolationKind { Alignment, Norm };

struct Violation {
    std::size_t site = 0;
    ViolationKind kind = ViolationKind::Norm;
    double value = 0.0;  // alignment error |g - (lambda/2) u|, or |g|
};

/// First-order optimality data for mu at a given lambda. site_values holds
/// g_j = A*(f - A mu)(y_j) on every site of the grid, recomputed from
/// (model, f, mu) alone; the summary numbers are derived from it.
struct Certificate {
    double lambda = 0.0;
    double tol = 0.0;
    std::vector<Vec3> site_values;
    double max_norm = 0.0;              // max_j |g_j|
    double max_off_support_norm = 0.0;  // max |g_j| over sites with m_j = 0
    double max_alignment_error = 0.0;   // max |g_j - (lambda/2) u_j| over the support
    std::size_t support_size = 0;
    std::vector<std::size_t> degeneracy_set;  // m_j = 0 and ||g_j| - lambda/2| <= tol*lambda
    std::vector<Violation> violations;
    bool pass = false;

    /// max_j 2|g_j|/lambda - 1; nonpositive means dual feasible.
    double slack() const noexcept { return 2.0 * max_norm / lambda - 1.0; }
};

/// g_j = A*(f - A mu)(y_j) for every site.
std::vector<Vec3> certificate_field(const ForwardModel& model, const FieldData& data, const DiscreteMagnetization& mu);

/// Passes iff
///  (i)  |g_j - (lambda/2) m_j/|m_j|| <= tol*lambda on every nonzero site, and
///  (ii) |g_j| <= (lambda/2)(1 + tol) on every site.
/// A failed check is a result, not an error.
Certificate check_optimality(const ForwardModel& model, const FieldData& data, const DiscreteMagnetization& mu,
                             double lambda, double tol);

/// Site classes by h_j = 4|g_j|^2/lambda^2 - 1 (the sub-level function
/// |g|^2 - lambda^2/4 scaled by 4/lambda^2).
struct SupportPartition {
    std::vector<std::size_t> interior;  // h < -band
    std::vector<std::size_t> boundary;  // |h| <= band
    std::vector<std::size_t> exterior;  // h > band
};

/// Any verified minimizer has its support in boundary u exterior. The default
/// band 4 tol (1 + tol) is exactly the slack that condition (i) allows.
/// For a non-optimal mu the partition is still returned but implies nothing.
SupportPartition support_localization(const Certificate& certificate, std::optional<double> band = std::nullopt);

/// ||A(mu - nu)||_rho / max(||A mu||_rho, ||A nu||_rho, floor).
double equivalence_residual(const ForwardModel& model, const DiscreteMagnetization& mu,
                            const DiscreteMagnetization& nu, double floor = 1e-300);

/// Same score for off-grid dipole sets, evaluated on the points of q.
double equivalence_residual(const MeasurementGrid& q, const Vec3& v, double kappa, std::span<const PointDipole> mu,
                            std::span<const PointDipole> nu, double floor = 1e-300);

}  // namespace magrecon
