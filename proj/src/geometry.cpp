#include "magrecon/geometry.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <deque>
#include <limits>
#include <string>

#include "magrecon/error.hpp"

namespace magrecon {

namespace {

// FNV-1a over the raw bit patterns; only used as an identity tag.
class Fingerprint {
public:
    void add(std::uint64_t word) noexcept {
        for (int i = 0; i < 8; ++i) {
            h_ ^= (word >> (8 * i)) & 0xffU;
            h_ *= 0x100000001b3ULL;
        }
    }
    void add(double x) noexcept { add(std::bit_cast<std::uint64_t>(x)); }
    std::uint64_t value() const noexcept { return h_; }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

void hash_lattice(Fingerprint& fp, const PlaneLattice& l) {
    fp.add(l.x0);
    fp.add(l.y0);
    fp.add(l.dx);
    fp.add(l.dy);
    fp.add(static_cast<std::uint64_t>(l.nx));
    fp.add(static_cast<std::uint64_t>(l.ny));
    fp.add(l.height);
}

}  // namespace

void PlaneLattice::validate() const {
    if (!(dx > 0.0) || !(dy > 0.0) || !std::isfinite(dx) || !std::isfinite(dy)) {
        fail(ErrorKind::Geometry, "invalid geometry: spacing must be positive");
    }
    if (nx == 0 || ny == 0) fail(ErrorKind::Geometry, "invalid geometry: counts must be positive");
    if (!std::isfinite(x0) || !std::isfinite(y0) || !std::isfinite(height)) {
        fail(ErrorKind::Geometry, "invalid geometry: non-finite origin");
    }
}

PlaneLattice PlaneLattice::shifted(const Vec3& t) const noexcept {
    PlaneLattice out = *this;
    out.x0 += t.x();
    out.y0 += t.y();
    out.height += t.z();
    return out;
}

std::vector<int> label_components(const std::vector<bool>& mask, std::size_t nx, std::size_t ny) {
    if (mask.size() != nx * ny) fail(ErrorKind::InvalidArgument, "mask size does not match lattice counts");
    std::vector<int> label(mask.size(), -1);
    int next = 0;
    std::deque<std::size_t> queue;
    for (std::size_t start = 0; start < mask.size(); ++start) {
        if (!mask[start] || label[start] >= 0) continue;
        label[start] = next;
        queue.push_back(start);
        while (!queue.empty()) {
            const std::size_t k = queue.front();
            queue.pop_front();
            const std::size_t ix = k % nx;
            const std::size_t iy = k / nx;
            auto visit = [&](std::size_t n) {
                if (mask[n] && label[n] < 0) {
                    label[n] = next;
                    queue.push_back(n);
                }
            };
            if (ix > 0) visit(k - 1);
            if (ix + 1 < nx) visit(k + 1);
            if (iy > 0) visit(k - nx);
            if (iy + 1 < ny) visit(k + nx);
        }
        ++next;
    }
    return label;
}

DipoleGrid DipoleGrid::build(const PlaneLattice& lattice, std::optional<std::vector<bool>> mask) {
    lattice.validate();
    DipoleGrid g;
    g.lattice_ = lattice;
    if (mask) {
        if (mask->size() != lattice.size()) {
            fail(ErrorKind::Geometry, "invalid geometry: mask does not match lattice counts");
        }
        g.mask_ = std::move(*mask);
    } else {
        g.mask_.assign(lattice.size(), true);
    }

    const std::vector<int> labels = label_components(g.mask_, lattice.nx, lattice.ny);
    g.site_of_lattice_.assign(lattice.size(), -1);
    for (std::size_t k = 0; k < lattice.size(); ++k) {
        if (!g.mask_[k]) continue;
        g.site_of_lattice_[k] = static_cast<std::ptrdiff_t>(g.positions_.size());
        g.positions_.push_back(lattice.point(k));
        g.lattice_index_.push_back(k);
        g.component_.push_back(labels[k]);
    }
    if (g.positions_.empty()) fail(ErrorKind::Geometry, "empty support");

    const int n_components = *std::max_element(g.component_.begin(), g.component_.end()) + 1;
    g.component_sites_.resize(static_cast<std::size_t>(n_components));
    for (std::size_t s = 0; s < g.component_.size(); ++s) {
        g.component_sites_[static_cast<std::size_t>(g.component_[s])].push_back(s);
    }

    Fingerprint fp;
    hash_lattice(fp, lattice);
    for (std::size_t k = 0; k < g.mask_.size(); k += 64) {
        std::uint64_t word = 0;
        for (std::size_t b = 0; b < 64 && k + b < g.mask_.size(); ++b) {
            if (g.mask_[k + b]) word |= std::uint64_t{1} << b;
        }
        fp.add(word);
    }
    g.fingerprint_ = fp.value();
    return g;
}

std::optional<std::size_t> DipoleGrid::site_at(std::size_t ix, std::size_t iy) const {
    if (ix >= lattice_.nx || iy >= lattice_.ny) return std::nullopt;
    const auto s = site_of_lattice_[iy * lattice_.nx + ix];
    if (s < 0) return std::nullopt;
    return static_cast<std::size_t>(s);
}

std::span<const std::size_t> DipoleGrid::component_sites(int component) const {
    if (component < 0 || static_cast<std::size_t>(component) >= component_sites_.size()) {
        fail(ErrorKind::InvalidArgument, "unknown component " + std::to_string(component));
    }
    return component_sites_[static_cast<std::size_t>(component)];
}

std::optional<std::size_t> DipoleGrid::snap(const Vec3& p, double abs_tol) const {
    const double fx = std::round((p.x() - lattice_.x0) / lattice_.dx);
    const double fy = std::round((p.y() - lattice_.y0) / lattice_.dy);
    if (fx < 0 || fy < 0) return std::nullopt;
    const auto ix = static_cast<std::size_t>(fx);
    const auto iy = static_cast<std::size_t>(fy);
    const auto site = site_at(ix, iy);
    if (!site) return std::nullopt;
    const Vec3 q = lattice_.point(ix, iy);
    if (std::abs(q.x() - p.x()) > abs_tol || std::abs(q.y() - p.y()) > abs_tol ||
        std::abs(q.z() - p.z()) > abs_tol) {
        return std::nullopt;
    }
    return site;
}

DipoleGrid DipoleGrid::shifted(const Vec3& t) const { return build(lattice_.shifted(t), mask_); }

MeasurementGrid MeasurementGrid::build(const PlaneLattice& lattice, std::optional<std::vector<double>> weights) {
    lattice.validate();
    MeasurementGrid q;
    q.lattice_ = lattice;
    if (weights) {
        if (weights->size() != lattice.size()) {
            fail(ErrorKind::Geometry, "invalid geometry: weight count does not match lattice");
        }
        for (double w : *weights) {
            if (!(w > 0.0) || !std::isfinite(w)) fail(ErrorKind::Geometry, "invalid geometry: weights must be positive");
        }
        q.weights_ = std::move(*weights);
        q.uniform_ = std::all_of(q.weights_.begin(), q.weights_.end(), [](double w) { return w == 1.0; });
    } else {
        q.weights_.assign(lattice.size(), 1.0);
    }
    q.positions_.reserve(lattice.size());
    for (std::size_t k = 0; k < lattice.size(); ++k) q.positions_.push_back(lattice.point(k));

    Fingerprint fp;
    hash_lattice(fp, lattice);
    for (double w : q.weights_) fp.add(w);
    q.fingerprint_ = fp.value();
    return q;
}

MeasurementGrid MeasurementGrid::shifted(const Vec3& t) const { return build(lattice_.shifted(t), weights_); }

Direction::Direction(const Vec3& v) : v_(v) {
    if (!v.allFinite() || std::abs(v.norm() - 1.0) > 1e-12) {
        fail(ErrorKind::InvalidArgument, "direction must be a unit vector");
    }
}

Direction Direction::normalized(const Vec3& v) {
    const double n = v.norm();
    if (!(n > 0.0) || !std::isfinite(n)) fail(ErrorKind::InvalidArgument, "direction must be nonzero");
    return Direction(v / n);
}

double separation(const DipoleGrid& s, const MeasurementGrid& q) {
    // Both sets are planar lattices, so the horizontally nearest measurement
    // point to a site is found by rounding and clamping its lattice coordinates.
    const PlaneLattice& ql = q.lattice();
    const double dz = q.plane_height() - s.plane_height();
    double best = std::numeric_limits<double>::infinity();
    auto clamp_index = [](double f, std::size_t n) {
        const double r = std::round(f);
        if (r < 0) return std::size_t{0};
        if (r > static_cast<double>(n - 1)) return n - 1;
        return static_cast<std::size_t>(r);
    };
    for (const Vec3& y : s.positions()) {
        const std::size_t ix = clamp_index((y.x() - ql.x0) / ql.dx, ql.nx);
        const std::size_t iy = clamp_index((y.y() - ql.y0) / ql.dy, ql.ny);
        const Vec3 x = ql.point(ix, iy);
        const double hx = x.x() - y.x();
        const double hy = x.y() - y.y();
        best = std::min(best, std::sqrt(hx * hx + hy * hy + dz * dz));
    }
    if (!(best > 0.0)) fail(ErrorKind::Geometry, "invalid geometry: sources and measurements are not separated");
    return best;
}

}  // namespace magrecon
