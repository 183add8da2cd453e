#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "magrecon/fields.hpp"
#include "magrecon/geometry.hpp"
#include "magrecon/measures.hpp"

namespace magrecon {

/// Axis-aligned block of lattice points [ix, ix+w) x [iy, iy+h).
struct LatticeRect {
    std::size_t ix = 0;
    std::size_t iy = 0;
    std::size_t w = 1;
    std::size_t h = 1;
    bool operator==(const LatticeRect&) const = default;
};

std::vector<bool> rect_mask(std::size_t nx, std::size_t ny, const std::vector<LatticeRect>& rects);

struct SparseSpec {
    std::size_t n_dipoles = 1;
    double min_separation = 0.0;  // length units
    double moment_scale = 1.0;    // |m| drawn uniformly in [0.5, 1] * moment_scale
    bool operator==(const SparseSpec&) const = default;
};

enum class AmplitudeKind { Constant, Random, Bump };

/// Positive amplitude per site of a uni-directional component.
///  Constant: `hi` everywhere.
///  Random:   uniform in [lo, hi], seeded.
///  Bump:     lo + (hi - lo) sin(pi s) sin(pi t), (s, t) in (0, 1) across the
///            component's bounding box.
struct AmplitudeField {
    AmplitudeKind kind = AmplitudeKind::Constant;
    double lo = 1.0;
    double hi = 1.0;
    bool operator==(const AmplitudeField&) const = default;
};

struct UnidirectionalSpec {
    std::vector<Vec3> directions;  // one unit vector per grid component
    AmplitudeField amplitude;
    bool operator==(const UnidirectionalSpec&) const = default;
};

struct NoiseSpec {
    enum class Mode { None, Sigma, Ratio };
    Mode mode = Mode::None;
    double value = 0.0;   // sigma, or the ratio ||e||/sqrt(lambda)
    double lambda = 0.0;  // used by Ratio
    bool operator==(const NoiseSpec&) const = default;
};

/// Everything needed to regenerate a scenario bit-for-bit.
struct ScenarioConfig {
    std::string name;
    PlaneLattice source;
    std::vector<LatticeRect> mask_rects;       // empty: full lattice (unless mask is set)
    std::optional<std::vector<bool>> mask;     // explicit raster, e.g. from a mask file
    PlaneLattice measurement;
    Vec3 direction = Vec3::UnitZ();
    KappaMode kappa_mode = KappaMode::Normalized;
    std::variant<SparseSpec, UnidirectionalSpec> generator = SparseSpec{};
    NoiseSpec noise;
    std::uint64_t seed = 0;
    std::vector<double> lambdas;  // default schedule for solve/sweep

    std::optional<std::vector<bool>> resolved_mask() const;
};

struct Scenario {
    ScenarioConfig config;
    DipoleGrid source;
    MeasurementGrid target;
    Direction direction;
    double kappa;
    DiscreteMagnetization mu0;
    FieldData field;                 // A mu0
    std::optional<FieldData> noisy;  // field + e
    double noise_norm = 0.0;         // ||e||_rho

    ForwardModel model(ModelOptions options = {}) const;
};

/// n distinct sites, pairwise distance >= min_separation, isotropic random
/// directions, magnitudes uniform in [0.5, 1] * moment_scale. Rejection
/// sampling with a budget of 1000 n draws ("packing failed" when exhausted).
DiscreteMagnetization gen_sparse(const DipoleGrid& grid, std::size_t n_dipoles, double min_separation,
                                 double moment_scale, std::uint64_t seed);

/// Component i of the grid gets moments amplitude(site) * directions[i].
DiscreteMagnetization gen_unidirectional(const DipoleGrid& grid, const std::vector<Vec3>& directions,
                                         const AmplitudeField& amplitude, std::uint64_t seed);

/// A uniformly magnetized ball (volume quadrature) and the point dipole with
/// the same net moment at its center. Outside the ball their fields agree.
struct SilentPair {
    Vec3 center = Vec3::Zero();
    double radius = 1.0;
    Vec3 moment = Vec3::Zero();
    std::vector<PointDipole> ball;  // quadrature nodes carrying moment density * weight
    PointDipole dipole;

    /// Both throw ErrorKind::InvalidArgument for points in the closed ball.
    Vec3 ball_field(const Vec3& x, double kappa) const;
    Vec3 dipole_field(const Vec3& x, double kappa) const;

    /// The ball's nodes together with the negated dipole.
    std::vector<PointDipole> difference() const;
};

/// Product Gauss-Legendre rule in (r, cos theta, phi) with `order` nodes per axis.
SilentPair gen_silent_pair(double radius, const Vec3& moment, std::size_t order, const Vec3& center = Vec3::Zero());

struct NoisyField {
    FieldData data;   // f + e
    FieldData noise;  // e
    double noise_norm = 0.0;
};

/// Sigma mode: e_p ~ N(0, sigma^2). Ratio mode: a Gaussian draw rescaled so
/// that ||e||_rho = ratio * sqrt(lambda).
NoisyField add_noise(const FieldData& f, const MeasurementGrid& q, const NoiseSpec& spec, std::uint64_t seed);

/// Seed of the noise stream belonging to a scenario seed.
std::uint64_t noise_seed(std::uint64_t scenario_seed) noexcept;

Scenario make_scenario(const ScenarioConfig& config);

/// Built-in configurations: "sparse20", "uni4" (full-size geometry) and
/// "sparse5-small", "uni2-small" (desk-scale). Throws ErrorKind::Config for
/// unknown names.
ScenarioConfig preset(std::string_view name, std::uint64_t seed = 0);
std::vector<std::string> preset_names();

/// Strictly decreasing geometric schedule from `first` to `last` with `count` points.
std::vector<double> geometric_schedule(double first, double last, std::size_t count);

}  // namespace magrecon
