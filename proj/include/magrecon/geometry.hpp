#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "magrecon/vec3.hpp"

namespace magrecon {

/// Rectangular lattice in the horizontal plane z = height.
/// Point (ix, iy) sits at (x0 + ix*dx, y0 + iy*dy, height); coordinates are
/// always formed by multiplication so there is no accumulated drift.
struct PlaneLattice {
    double x0 = 0.0;
    double y0 = 0.0;
    double dx = 1.0;
    double dy = 1.0;
    std::size_t nx = 1;
    std::size_t ny = 1;
    double height = 0.0;

    std::size_t size() const noexcept { return nx * ny; }
    Vec3 point(std::size_t ix, std::size_t iy) const noexcept {
        return {x0 + static_cast<double>(ix) * dx, y0 + static_cast<double>(iy) * dy, height};
    }
    Vec3 point(std::size_t linear) const noexcept { return point(linear % nx, linear / nx); }

    /// Throws ErrorKind::Geometry ("invalid geometry") on nonpositive spacing or counts.
    void validate() const;

    /// Lattice translated by (tx, ty, tz).
    PlaneLattice shifted(const Vec3& t) const noexcept;

    bool operator==(const PlaneLattice&) const = default;
};

/// Candidate dipole sites S: a masked planar lattice, with the masked sites
/// split into 4-connected components S_0 .. S_{n-1}.
///
/// Sites are numbered 0..site_count()-1 in row-major lattice order
/// (iy outer, ix inner) over masked lattice points only.
class DipoleGrid {
public:
    /// `mask` is row-major with size lattice.size(); absent means every
    /// lattice point is a site. Errors: "invalid geometry", "empty support".
    static DipoleGrid build(const PlaneLattice& lattice, std::optional<std::vector<bool>> mask = {});

    const PlaneLattice& lattice() const noexcept { return lattice_; }
    const std::vector<bool>& mask() const noexcept { return mask_; }
    double plane_height() const noexcept { return lattice_.height; }

    std::size_t site_count() const noexcept { return positions_.size(); }
    const Vec3& position(std::size_t site) const { return positions_.at(site); }
    std::span<const Vec3> positions() const noexcept { return positions_; }
    std::size_t lattice_index(std::size_t site) const { return lattice_index_.at(site); }
    std::optional<std::size_t> site_at(std::size_t ix, std::size_t iy) const;

    int component_of(std::size_t site) const { return component_.at(site); }
    std::size_t component_count() const noexcept { return component_sites_.size(); }
    std::span<const std::size_t> component_sites(int component) const;

    /// Stable 64-bit identity of (lattice, mask); magnetizations carry it so
    /// that operations across different grids are rejected.
    std::uint64_t fingerprint() const noexcept { return fingerprint_; }

    /// Nearest site to `p` if it lies within `abs_tol` in every coordinate.
    std::optional<std::size_t> snap(const Vec3& p, double abs_tol) const;

    DipoleGrid shifted(const Vec3& t) const;

private:
    PlaneLattice lattice_;
    std::vector<bool> mask_;
    std::vector<Vec3> positions_;
    std::vector<std::size_t> lattice_index_;
    std::vector<std::ptrdiff_t> site_of_lattice_;
    std::vector<int> component_;
    std::vector<std::vector<std::size_t>> component_sites_;
    std::uint64_t fingerprint_ = 0;
};

/// Measurement set Q with quadrature weights rho (default: 1 per point).
class MeasurementGrid {
public:
    static MeasurementGrid build(const PlaneLattice& lattice, std::optional<std::vector<double>> weights = {});

    const PlaneLattice& lattice() const noexcept { return lattice_; }
    double plane_height() const noexcept { return lattice_.height; }
    std::size_t size() const noexcept { return positions_.size(); }
    const Vec3& position(std::size_t p) const { return positions_.at(p); }
    std::span<const Vec3> positions() const noexcept { return positions_; }
    std::span<const double> weights() const noexcept { return weights_; }
    double weight(std::size_t p) const { return weights_.at(p); }
    bool uniform_weights() const noexcept { return uniform_; }
    std::uint64_t fingerprint() const noexcept { return fingerprint_; }

    MeasurementGrid shifted(const Vec3& t) const;

private:
    PlaneLattice lattice_;
    std::vector<Vec3> positions_;
    std::vector<double> weights_;
    bool uniform_ = true;
    std::uint64_t fingerprint_ = 0;
};

/// Unit sensor direction v.
class Direction {
public:
    /// Rejects |v| deviating from 1 by more than 1e-12.
    explicit Direction(const Vec3& v);
    /// Normalizes first; rejects the zero vector.
    static Direction normalized(const Vec3& v);

    const Vec3& vec() const noexcept { return v_; }

private:
    Vec3 v_;
};

/// Minimum distance between any site of `s` and any point of `q`.
/// Throws ErrorKind::Geometry when the sets touch (the kernel would be singular).
double separation(const DipoleGrid& s, const MeasurementGrid& q);

/// 4-connected component labels of a row-major boolean raster; -1 off-mask.
/// Labels are assigned in row-major order of first encounter.
std::vector<int> label_components(const std::vector<bool>& mask, std::size_t nx, std::size_t ny);

}  // namespace magrecon
