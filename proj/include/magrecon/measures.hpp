#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "magrecon/geometry.hpp"
#include "magrecon/vec3.hpp"

namespace magrecon {

struct MomentEntry {
    std::size_t site = 0;
    Vec3 moment = Vec3::Zero();

    bool operator==(const MomentEntry& o) const { return site == o.site && moment == o.moment; }
};

/// Finite sum of point dipoles on the sites of one DipoleGrid.
///
/// Always canonical: entries sorted by site, duplicate sites summed, entries
/// whose moment is exactly zero removed. Sparsity is structural, there is no
/// epsilon here (see truncate()).
class DiscreteMagnetization {
public:
    DiscreteMagnetization() = default;
    DiscreteMagnetization(std::size_t site_count, std::uint64_t grid_id, std::vector<MomentEntry> entries);

    static DiscreteMagnetization zero(const DipoleGrid& grid);
    static DiscreteMagnetization on(const DipoleGrid& grid, std::vector<MomentEntry> entries);
    /// From a packed vector [m_0x, m_0y, m_0z, m_1x, ...] of length 3*site_count.
    static DiscreteMagnetization from_dense(const DipoleGrid& grid, std::span<const double> packed);

    std::vector<double> to_dense() const;

    const std::vector<MomentEntry>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    std::size_t site_count() const noexcept { return site_count_; }
    std::uint64_t grid_id() const noexcept { return grid_id_; }
    Vec3 moment_at(std::size_t site) const;
    std::vector<std::size_t> support() const;

    bool operator==(const DiscreteMagnetization&) const = default;

private:
    std::size_t site_count_ = 0;
    std::uint64_t grid_id_ = 0;
    std::vector<MomentEntry> entries_;
};

/// Re-canonicalizes; a no-op on any constructed value, kept for symmetry with
/// raw entry lists.
DiscreteMagnetization canonicalize(const DiscreteMagnetization& mu);

/// Drops entries with |m| < eps. Reporting only; the solver never calls this.
DiscreteMagnetization truncate(const DiscreteMagnetization& mu, double eps);

DiscreteMagnetization operator+(const DiscreteMagnetization& a, const DiscreteMagnetization& b);
DiscreteMagnetization operator-(const DiscreteMagnetization& a, const DiscreteMagnetization& b);
DiscreteMagnetization operator*(double c, const DiscreteMagnetization& a);

/// Sum of Euclidean moment norms.
double tv_norm(const DiscreteMagnetization& mu);

/// Vector sum of moments.
Vec3 net_moment(const DiscreteMagnetization& mu);

/// 1 - |net moment| / tv. Zero exactly for uni-directional magnetizations.
/// Throws on the zero magnetization ("undefined direction").
double unidirectionality_defect(const DiscreteMagnetization& mu);

DiscreteMagnetization restrict_to_component(const DipoleGrid& grid, const DiscreteMagnetization& mu, int component);

/// tv_norm(mu - nu). Both must live on the same grid. Relative distance is this
/// divided by tv_norm of the reference.
double tv_distance(const DiscreteMagnetization& mu, const DiscreteMagnetization& nu);

struct LocalMass {
    double mass = 0.0;          // |mu|(B(center, radius))
    Vec3 moment = Vec3::Zero();  // mu(B(center, radius))
};

/// Open ball: sites with |y - center| < radius.
LocalMass local_mass(const DipoleGrid& grid, const DiscreteMagnetization& mu, const Vec3& center, double radius);

struct ComponentMoment {
    int component = 0;
    double tv = 0.0;
    Vec3 net_moment = Vec3::Zero();
};

struct MomentSummary {
    double tv = 0.0;
    Vec3 net_moment = Vec3::Zero();
    std::vector<ComponentMoment> per_component;
};

/// Totals are summed from the per-component values.
MomentSummary summarize(const DipoleGrid& grid, const DiscreteMagnetization& mu);

/// A free point dipole (not tied to a grid); used by field evaluation and the
/// ball/dipole experiments.
struct PointDipole {
    Vec3 position = Vec3::Zero();
    Vec3 moment = Vec3::Zero();
};

std::vector<PointDipole> to_point_dipoles(const DipoleGrid& grid, const DiscreteMagnetization& mu);
Vec3 net_moment(std::span<const PointDipole> dipoles);

/// Action of the distributional divergence on a test function f:
/// <f, div mu> = -sum_j grad f(y_j) . m_j. `grad_f` evaluates grad f.
template <class GradF>
double divergence_action(std::span<const PointDipole> dipoles, GradF&& grad_f);

}  // namespace magrecon

#include "magrecon/summation.hpp"

template <class GradF>
double magrecon::divergence_action(std::span<const PointDipole> dipoles, GradF&& grad_f) {
    CompensatedSum acc;
    for (const auto& d : dipoles) acc.add(-Vec3(grad_f(d.position)).dot(d.moment));
    return acc.value();
}
