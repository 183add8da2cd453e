#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "magrecon/geometry.hpp"
#include "magrecon/measures.hpp"
#include "magrecon/vec3.hpp"

namespace magrecon {

/// Unit system for the field prefactor kappa = mu_0 / (4 pi).
///  - Normalized: kappa = 1.
///  - Physical:   kappa = 1e-7 H/m (fields in tesla for moments in A m^2).
enum class KappaMode { Normalized, Physical };

inline constexpr double kPhysicalKappa = 1e-7;

double kappa_for(KappaMode mode) noexcept;

/// K_v(x) = v/|x|^3 - 3 x (v.x)/|x|^5, the gradient of v.x/|x|^3.
/// Throws ErrorKind::Numerical ("singular kernel evaluation") at x = 0.
Vec3 kernel_kv(const Vec3& x, const Vec3& v);
inline Vec3 kernel_kv(const Vec3& x, const Direction& v) { return kernel_kv(x, v.vec()); }

/// Scalar samples on a MeasurementGrid, one per point, in grid order.
struct FieldData {
    std::vector<double> values;

    std::size_t size() const noexcept { return values.size(); }
    bool operator==(const FieldData&) const = default;
};

/// <a, b>_rho = sum_p w_p a_p b_p.
double inner_product(const MeasurementGrid& q, const FieldData& a, const FieldData& b);
double weighted_norm(const MeasurementGrid& q, const FieldData& a);

FieldData operator+(const FieldData& a, const FieldData& b);
FieldData operator-(const FieldData& a, const FieldData& b);
FieldData operator*(double c, const FieldData& a);

struct ModelOptions {
    double kappa = 1.0;
    /// Store the dense matrix when n_meas * 3 * n_sites is at most this many entries.
    std::size_t dense_budget = 200'000'000;
    /// Data-parallel width for forward/adjoint. Every output element is
    /// reduced by exactly one thread in a fixed order, so results do not
    /// depend on this value.
    unsigned threads = 1;
};

/// The linear map A: magnetization -> v-component of its field on Q,
///
///   (A mu)(x_p) = -kappa * sum_j K_v(x_p - y_j) . m_j,
///
/// i.e. the leading minus sign of b_v is part of A. Its adjoint with respect
/// to the rho-weighted inner product is
///
///   (A* psi)(y_j) = -kappa * sum_p w_p psi(x_p) K_v(x_p - y_j).
///
/// Dense (row-major, n_meas x 3 n_sites) or matrix-free depending on the
/// budget; both produce bit-identical results.
class ForwardModel {
public:
    ForwardModel(DipoleGrid source, MeasurementGrid target, Direction v, ModelOptions options = {});

    const DipoleGrid& source() const noexcept { return source_; }
    const MeasurementGrid& target() const noexcept { return target_; }
    const Direction& direction() const noexcept { return v_; }
    double kappa() const noexcept { return options_.kappa; }
    const ModelOptions& options() const noexcept { return options_; }
    bool is_dense() const noexcept { return dense_.size() > 0; }

    std::size_t rows() const noexcept { return target_.size(); }
    std::size_t cols() const noexcept { return 3 * source_.site_count(); }

    /// The three entries of row p belonging to `site`: -kappa K_v(x_p - y_site).
    Vec3 block(std::size_t p, std::size_t site) const;
    double entry(std::size_t p, std::size_t col) const { return block(p, col / 3)[static_cast<int>(col % 3)]; }

    /// Errors: "support mismatch" when mu is not on the source grid.
    FieldData forward(const DiscreteMagnetization& mu) const;

    /// Errors: "measurement mismatch" when psi is not on the target grid.
    std::vector<Vec3> adjoint(const FieldData& psi) const;

    /// A restricted to `sites`; `packed` holds 3 values per listed site.
    std::vector<double> apply_sites(std::span<const std::size_t> sites, std::span<const double> packed) const;
    /// A* restricted to `sites`, packed 3 values per listed site.
    std::vector<double> adjoint_sites(std::span<const double> psi, std::span<const std::size_t> sites) const;

    /// Columns of A for `sites`, n_meas x 3k, column-major.
    Eigen::MatrixXd gather_columns(std::span<const std::size_t> sites) const;

    /// Same geometry with kappa multiplied by c.
    ForwardModel scaled(double c) const;

private:
    std::vector<double> adjoint_impl(std::span<const double> psi, std::span<const std::size_t> sites) const;

    DipoleGrid source_;
    MeasurementGrid target_;
    Direction v_;
    ModelOptions options_;
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dense_;
};

struct NormEstimate {
    double value = 0.0;        // inflated upper estimate of ||A||^2
    double raw = 0.0;          // Rayleigh quotient at exit
    std::size_t iterations = 0;
};

/// ||A||^2 (largest eigenvalue of A*A) by power iteration, stopped when the
/// relative change falls below tol/10, then inflated by (1 + 10 tol).
/// Start vector drawn from splitmix64(seed). Throws ErrorKind::Numerical
/// ("norm estimation failed") if max_iter is exhausted.
NormEstimate operator_norm(const ForwardModel& model, double tol, std::uint64_t seed = 0,
                           std::size_t max_iter = 100000);

/// Scalar potential Phi(x) = (1/4pi) sum_j (x - y_j).m_j / |x - y_j|^3.
/// Throws ErrorKind::Numerical ("singular evaluation") on a dipole site.
double potential_phi(std::span<const PointDipole> dipoles, const Vec3& x);
double potential_phi(const DipoleGrid& grid, const DiscreteMagnetization& mu, const Vec3& x);

/// Full field vector b(x) = -kappa sum_j [m_j/|d|^3 - 3 d (d.m_j)/|d|^5], d = x - y_j.
Vec3 field_vector(std::span<const PointDipole> dipoles, const Vec3& x, double kappa);

/// v . b(x).
double field_component(std::span<const PointDipole> dipoles, const Vec3& x, const Vec3& v, double kappa);

}  // namespace magrecon
