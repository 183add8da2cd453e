#include "magrecon/measures.hpp"

#include <algorithm>
#include <string>

#include "magrecon/error.hpp"
#include "magrecon/summation.hpp"

namespace magrecon {

DiscreteMagnetization::DiscreteMagnetization(std::size_t site_count, std::uint64_t grid_id,
                                             std::vector<MomentEntry> entries)
    : site_count_(site_count), grid_id_(grid_id) {
    for (const auto& e : entries) {
        if (e.site >= site_count) {
            fail(ErrorKind::Mismatch, "support mismatch: site " + std::to_string(e.site) + " outside grid");
        }
        if (!e.moment.allFinite()) fail(ErrorKind::InvalidArgument, "non-finite moment");
    }
    std::stable_sort(entries.begin(), entries.end(),
                     [](const MomentEntry& a, const MomentEntry& b) { return a.site < b.site; });
    entries_.reserve(entries.size());
    for (const auto& e : entries) {
        if (!entries_.empty() && entries_.back().site == e.site) {
            entries_.back().moment += e.moment;
        } else {
            entries_.push_back(e);
        }
    }
    std::erase_if(entries_, [](const MomentEntry& e) { return e.moment.isZero(0.0); });
}

DiscreteMagnetization DiscreteMagnetization::zero(const DipoleGrid& grid) {
    return {grid.site_count(), grid.fingerprint(), {}};
}

DiscreteMagnetization DiscreteMagnetization::on(const DipoleGrid& grid, std::vector<MomentEntry> entries) {
    return {grid.site_count(), grid.fingerprint(), std::move(entries)};
}

DiscreteMagnetization DiscreteMagnetization::from_dense(const DipoleGrid& grid, std::span<const double> packed) {
    if (packed.size() != 3 * grid.site_count()) fail(ErrorKind::Mismatch, "support mismatch: packed length");
    std::vector<MomentEntry> entries;
    for (std::size_t j = 0; j < grid.site_count(); ++j) {
        const Vec3 m(packed[3 * j], packed[3 * j + 1], packed[3 * j + 2]);
        if (!m.isZero(0.0)) entries.push_back({j, m});
    }
    return on(grid, std::move(entries));
}

std::vector<double> DiscreteMagnetization::to_dense() const {
    std::vector<double> out(3 * site_count_, 0.0);
    for (const auto& e : entries_) {
        for (int k = 0; k < 3; ++k) out[3 * e.site + static_cast<std::size_t>(k)] = e.moment[k];
    }
    return out;
}

Vec3 DiscreteMagnetization::moment_at(std::size_t site) const {
    auto it = std::lower_bound(entries_.begin(), entries_.end(), site,
                               [](const MomentEntry& e, std::size_t s) { return e.site < s; });
    if (it != entries_.end() && it->site == site) return it->moment;
    return Vec3::Zero();
}

std::vector<std::size_t> DiscreteMagnetization::support() const {
    std::vector<std::size_t> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.site);
    return out;
}

DiscreteMagnetization canonicalize(const DiscreteMagnetization& mu) {
    return {mu.site_count(), mu.grid_id(), mu.entries()};
}

DiscreteMagnetization truncate(const DiscreteMagnetization& mu, double eps) {
    std::vector<MomentEntry> kept;
    for (const auto& e : mu.entries()) {
        if (e.moment.norm() >= eps) kept.push_back(e);
    }
    return {mu.site_count(), mu.grid_id(), std::move(kept)};
}

namespace {

void require_same_grid(const DiscreteMagnetization& a, const DiscreteMagnetization& b) {
    if (a.grid_id() != b.grid_id() || a.site_count() != b.site_count()) {
        fail(ErrorKind::Mismatch, "magnetizations live on different grids");
    }
}

DiscreteMagnetization combine(const DiscreteMagnetization& a, const DiscreteMagnetization& b, double sign) {
    require_same_grid(a, b);
    std::vector<MomentEntry> out;
    out.reserve(a.size() + b.size());
    auto ia = a.entries().begin();
    auto ib = b.entries().begin();
    while (ia != a.entries().end() || ib != b.entries().end()) {
        if (ib == b.entries().end() || (ia != a.entries().end() && ia->site < ib->site)) {
            out.push_back(*ia++);
        } else if (ia == a.entries().end() || ib->site < ia->site) {
            out.push_back({ib->site, sign * ib->moment});
            ++ib;
        } else {
            out.push_back({ia->site, ia->moment + sign * ib->moment});
            ++ia;
            ++ib;
        }
    }
    return {a.site_count(), a.grid_id(), std::move(out)};
}

}  // namespace

DiscreteMagnetization operator+(const DiscreteMagnetization& a, const DiscreteMagnetization& b) {
    return combine(a, b, 1.0);
}

DiscreteMagnetization operator-(const DiscreteMagnetization& a, const DiscreteMagnetization& b) {
    return combine(a, b, -1.0);
}

DiscreteMagnetization operator*(double c, const DiscreteMagnetization& a) {
    std::vector<MomentEntry> out = a.entries();
    for (auto& e : out) e.moment *= c;
    return {a.site_count(), a.grid_id(), std::move(out)};
}

double tv_norm(const DiscreteMagnetization& mu) {
    CompensatedSum acc;
    for (const auto& e : mu.entries()) acc.add(e.moment.norm());
    return acc.value();
}

Vec3 net_moment(const DiscreteMagnetization& mu) {
    CompensatedSum3 acc;
    for (const auto& e : mu.entries()) acc.add(e.moment);
    return acc.value();
}

double unidirectionality_defect(const DiscreteMagnetization& mu) {
    const double tv = tv_norm(mu);
    if (!(tv > 0.0)) fail(ErrorKind::InvalidArgument, "undefined direction: zero magnetization");
    // Rounding can push |net| a hair above tv for exactly parallel moments.
    return std::clamp(1.0 - net_moment(mu).norm() / tv, 0.0, 1.0);
}

DiscreteMagnetization restrict_to_component(const DipoleGrid& grid, const DiscreteMagnetization& mu, int component) {
    if (mu.grid_id() != grid.fingerprint()) fail(ErrorKind::Mismatch, "magnetization is not on this grid");
    (void)grid.component_sites(component);  // validates the id
    std::vector<MomentEntry> out;
    for (const auto& e : mu.entries()) {
        if (grid.component_of(e.site) == component) out.push_back(e);
    }
    return {mu.site_count(), mu.grid_id(), std::move(out)};
}

double tv_distance(const DiscreteMagnetization& mu, const DiscreteMagnetization& nu) {
    return tv_norm(mu - nu);
}

LocalMass local_mass(const DipoleGrid& grid, const DiscreteMagnetization& mu, const Vec3& center, double radius) {
    if (!(radius > 0.0)) fail(ErrorKind::InvalidArgument, "radius must be positive");
    if (mu.grid_id() != grid.fingerprint()) fail(ErrorKind::Mismatch, "magnetization is not on this grid");
    CompensatedSum mass;
    CompensatedSum3 moment;
    for (const auto& e : mu.entries()) {
        if ((grid.position(e.site) - center).norm() < radius) {
            mass.add(e.moment.norm());
            moment.add(e.moment);
        }
    }
    return {mass.value(), moment.value()};
}

MomentSummary summarize(const DipoleGrid& grid, const DiscreteMagnetization& mu) {
    if (mu.grid_id() != grid.fingerprint()) fail(ErrorKind::Mismatch, "magnetization is not on this grid");
    const std::size_t n = grid.component_count();
    std::vector<CompensatedSum> tv(n);
    std::vector<CompensatedSum3> net(n);
    for (const auto& e : mu.entries()) {
        const auto c = static_cast<std::size_t>(grid.component_of(e.site));
        tv[c].add(e.moment.norm());
        net[c].add(e.moment);
    }
    MomentSummary s;
    CompensatedSum total_tv;
    CompensatedSum3 total_net;
    for (std::size_t c = 0; c < n; ++c) {
        ComponentMoment cm{static_cast<int>(c), tv[c].value(), net[c].value()};
        total_tv.add(cm.tv);
        total_net.add(cm.net_moment);
        s.per_component.push_back(cm);
    }
    s.tv = total_tv.value();
    s.net_moment = total_net.value();
    return s;
}

std::vector<PointDipole> to_point_dipoles(const DipoleGrid& grid, const DiscreteMagnetization& mu) {
    if (mu.grid_id() != grid.fingerprint()) fail(ErrorKind::Mismatch, "magnetization is not on this grid");
    std::vector<PointDipole> out;
    out.reserve(mu.size());
    for (const auto& e : mu.entries()) out.push_back({grid.position(e.site), e.moment});
    return out;
}

Vec3 net_moment(std::span<const PointDipole> dipoles) {
    CompensatedSum3 acc;
    for (const auto& d : dipoles) acc.add(d.moment);
    return acc.value();
}

}  // namespace magrecon
