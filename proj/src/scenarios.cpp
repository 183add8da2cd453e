#include "magrecon/scenarios.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <type_traits>
#include <variant>

#include <gsl/gsl_integration.h>

#include "magrecon/error.hpp"
#include "magrecon/rng.hpp"
#include "magrecon/summation.hpp"

namespace magrecon {

std::vector<bool> rect_mask(std::size_t nx, std::size_t ny, const std::vector<LatticeRect>& rects) {
    std::vector<bool> mask(nx * ny, false);
    for (const auto& r : rects) {
        if (r.w == 0 || r.h == 0 || r.ix + r.w > nx || r.iy + r.h > ny) {
            fail(ErrorKind::Config, "mask rectangle outside the source lattice");
        }
        for (std::size_t iy = r.iy; iy < r.iy + r.h; ++iy) {
            for (std::size_t ix = r.ix; ix < r.ix + r.w; ++ix) mask[iy * nx + ix] = true;
        }
    }
    return mask;
}

std::optional<std::vector<bool>> ScenarioConfig::resolved_mask() const {
    if (mask) {
        if (mask->size() != source.size()) fail(ErrorKind::Config, "mask size does not match source counts");
        return mask;
    }
    if (mask_rects.empty()) return std::nullopt;
    return rect_mask(source.nx, source.ny, mask_rects);
}

ForwardModel Scenario::model(ModelOptions options) const {
    options.kappa = kappa;
    return ForwardModel(source, target, direction, options);
}

DiscreteMagnetization gen_sparse(const DipoleGrid& grid, std::size_t n_dipoles, double min_separation,
                                 double moment_scale, std::uint64_t seed) {
    if (n_dipoles == 0) fail(ErrorKind::InvalidArgument, "n_dipoles must be positive");
    if (!(min_separation >= 0.0) || !std::isfinite(min_separation)) {
        fail(ErrorKind::InvalidArgument, "min_separation must be nonnegative");
    }
    if (!(moment_scale > 0.0) || !std::isfinite(moment_scale)) {
        fail(ErrorKind::InvalidArgument, "moment_scale must be positive");
    }
    SplitMix64 rng(seed);
    std::vector<std::size_t> chosen;
    const std::size_t budget = 1000 * n_dipoles;
    for (std::size_t attempt = 0; attempt < budget && chosen.size() < n_dipoles; ++attempt) {
        const auto site = static_cast<std::size_t>(rng.below(grid.site_count()));
        const Vec3& y = grid.position(site);
        const bool ok = std::none_of(chosen.begin(), chosen.end(), [&](std::size_t s) {
            return s == site || (grid.position(s) - y).norm() < min_separation;
        });
        if (ok) chosen.push_back(site);
    }
    if (chosen.size() < n_dipoles) fail(ErrorKind::InvalidArgument, "packing failed");

    std::vector<MomentEntry> entries;
    entries.reserve(n_dipoles);
    for (std::size_t site : chosen) {
        const double z = rng.uniform(-1.0, 1.0);
        const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double mag = rng.uniform(0.5, 1.0) * moment_scale;
        entries.push_back({site, mag * Vec3(rho * std::cos(phi), rho * std::sin(phi), z)});
    }
    return DiscreteMagnetization::on(grid, std::move(entries));
}

DiscreteMagnetization gen_unidirectional(const DipoleGrid& grid, const std::vector<Vec3>& directions,
                                         const AmplitudeField& amplitude, std::uint64_t seed) {
    if (directions.size() != grid.component_count()) {
        fail(ErrorKind::InvalidArgument, "need one direction per component (" +
                                             std::to_string(grid.component_count()) + ")");
    }
    for (const auto& d : directions) {
        if (!d.allFinite() || std::abs(d.norm() - 1.0) > 1e-12) fail(ErrorKind::InvalidArgument, "direction not unit");
    }
    if (!(amplitude.lo >= 0.0) || !(amplitude.hi >= amplitude.lo) || !std::isfinite(amplitude.hi)) {
        fail(ErrorKind::InvalidArgument, "amplitude range must satisfy 0 <= lo <= hi");
    }
    SplitMix64 rng(seed);
    const std::size_t nx = grid.lattice().nx;
    std::vector<MomentEntry> entries;
    entries.reserve(grid.site_count());
    for (std::size_t c = 0; c < grid.component_count(); ++c) {
        const auto sites = grid.component_sites(static_cast<int>(c));
        std::size_t x_lo = std::numeric_limits<std::size_t>::max(), x_hi = 0;
        std::size_t y_lo = std::numeric_limits<std::size_t>::max(), y_hi = 0;
        for (std::size_t s : sites) {
            const std::size_t li = grid.lattice_index(s);
            x_lo = std::min(x_lo, li % nx);
            x_hi = std::max(x_hi, li % nx);
            y_lo = std::min(y_lo, li / nx);
            y_hi = std::max(y_hi, li / nx);
        }
        for (std::size_t s : sites) {
            double a = amplitude.hi;
            if (amplitude.kind == AmplitudeKind::Random) {
                a = rng.uniform(amplitude.lo, amplitude.hi);
            } else if (amplitude.kind == AmplitudeKind::Bump) {
                const std::size_t li = grid.lattice_index(s);
                const double u = static_cast<double>(li % nx - x_lo + 1) / static_cast<double>(x_hi - x_lo + 2);
                const double t = static_cast<double>(li / nx - y_lo + 1) / static_cast<double>(y_hi - y_lo + 2);
                a = amplitude.lo + (amplitude.hi - amplitude.lo) * std::sin(std::numbers::pi * u) *
                                       std::sin(std::numbers::pi * t);
            }
            entries.push_back({s, a * directions[c]});
        }
    }
    return DiscreteMagnetization::on(grid, std::move(entries));
}

namespace {

void require_outside(const SilentPair& pair, const Vec3& x) {
    if (!((x - pair.center).norm() > pair.radius)) {
        fail(ErrorKind::InvalidArgument, "evaluation point inside the ball");
    }
}

}  // namespace

Vec3 SilentPair::ball_field(const Vec3& x, double kappa) const {
    require_outside(*this, x);
    return field_vector(ball, x, kappa);
}

Vec3 SilentPair::dipole_field(const Vec3& x, double kappa) const {
    require_outside(*this, x);
    return field_vector(std::span<const PointDipole>(&dipole, 1), x, kappa);
}

std::vector<PointDipole> SilentPair::difference() const {
    std::vector<PointDipole> out = ball;
    out.push_back({dipole.position, -dipole.moment});
    return out;
}

SilentPair gen_silent_pair(double radius, const Vec3& moment, std::size_t order, const Vec3& center) {
    if (!(radius > 0.0) || !std::isfinite(radius)) fail(ErrorKind::InvalidArgument, "radius must be positive");
    if (order < 2) fail(ErrorKind::InvalidArgument, "quadrature order must be at least 2");
    if (!moment.allFinite() || !center.allFinite()) fail(ErrorKind::InvalidArgument, "non-finite input");

    gsl_integration_glfixed_table* table = gsl_integration_glfixed_table_alloc(order);
    if (table == nullptr) fail(ErrorKind::Numerical, "quadrature table allocation failed");
    auto node = [&](double a, double b, std::size_t i) {
        double xi = 0.0, wi = 0.0;
        gsl_integration_glfixed_point(a, b, i, &xi, &wi, table);
        return std::array<double, 2>{xi, wi};
    };

    SilentPair pair;
    pair.center = center;
    pair.radius = radius;
    pair.moment = moment;
    pair.dipole = {center, moment};

    std::vector<Vec3> nodes;
    std::vector<double> weights;
    CompensatedSum total;
    for (std::size_t i = 0; i < order; ++i) {
        const auto [r, wr] = node(0.0, radius, i);
        for (std::size_t j = 0; j < order; ++j) {
            const auto [ct, wt] = node(-1.0, 1.0, j);
            const double st = std::sqrt(std::max(0.0, 1.0 - ct * ct));
            for (std::size_t k = 0; k < order; ++k) {
                const auto [phi, wp] = node(0.0, 2.0 * std::numbers::pi, k);
                const double w = wr * r * r * wt * wp;
                nodes.push_back(center + r * Vec3(st * std::cos(phi), st * std::sin(phi), ct));
                weights.push_back(w);
                total.add(w);
            }
        }
    }
    gsl_integration_glfixed_table_free(table);

    // Weights sum to the ball volume up to rounding; normalizing by the
    // computed total makes the net moment equal `moment` to rounding.
    const double volume = total.value();
    pair.ball.reserve(nodes.size());
    for (std::size_t n = 0; n < nodes.size(); ++n) {
        pair.ball.push_back({nodes[n], (weights[n] / volume) * moment});
    }
    return pair;
}

std::uint64_t noise_seed(std::uint64_t scenario_seed) noexcept {
    SplitMix64 mix(scenario_seed ^ 0x6e6f697365000000ULL);
    return mix.next();
}

NoisyField add_noise(const FieldData& f, const MeasurementGrid& q, const NoiseSpec& spec, std::uint64_t seed) {
    if (f.size() != q.size()) fail(ErrorKind::Mismatch, "measurement mismatch");
    if (!(spec.value >= 0.0) || !std::isfinite(spec.value)) {
        fail(ErrorKind::InvalidArgument, "noise level must be nonnegative");
    }
    NoisyField out;
    out.noise.values.assign(f.size(), 0.0);
    const bool active = spec.mode != NoiseSpec::Mode::None && spec.value > 0.0;
    if (active) {
        SplitMix64 rng(seed);
        for (double& e : out.noise.values) e = rng.normal();
        if (spec.mode == NoiseSpec::Mode::Sigma) {
            for (double& e : out.noise.values) e *= spec.value;
        } else {
            if (!(spec.lambda > 0.0)) fail(ErrorKind::InvalidArgument, "ratio noise needs lambda > 0");
            const double target = spec.value * std::sqrt(spec.lambda);
            const double g = weighted_norm(q, out.noise);
            for (double& e : out.noise.values) e *= target / g;
        }
    }
    out.noise_norm = weighted_norm(q, out.noise);
    out.data = active ? f + out.noise : f;
    return out;
}

Scenario make_scenario(const ScenarioConfig& config) {
    config.source.validate();
    config.measurement.validate();
    DipoleGrid source = DipoleGrid::build(config.source, config.resolved_mask());
    MeasurementGrid target = MeasurementGrid::build(config.measurement);
    Direction v(config.direction);
    const double kappa = kappa_for(config.kappa_mode);

    DiscreteMagnetization mu0 = std::visit(
        [&](const auto& g) -> DiscreteMagnetization {
            using T = std::decay_t<decltype(g)>;
            if constexpr (std::is_same_v<T, SparseSpec>) {
                return gen_sparse(source, g.n_dipoles, g.min_separation, g.moment_scale, config.seed);
            } else {
                return gen_unidirectional(source, g.directions, g.amplitude, config.seed);
            }
        },
        config.generator);

    // Only the support of mu0 is needed, so the matrix-free path is used;
    // it is bit-identical to the dense one.
    ModelOptions opts;
    opts.kappa = kappa;
    opts.dense_budget = 0;
    const ForwardModel model(source, target, v, opts);
    FieldData field = model.forward(mu0);

    Scenario sc{config, std::move(source), std::move(target), v, kappa, std::move(mu0), std::move(field), {}, 0.0};
    if (config.noise.mode != NoiseSpec::Mode::None) {
        NoisyField nf = add_noise(sc.field, sc.target, config.noise, noise_seed(config.seed));
        sc.noisy = std::move(nf.data);
        sc.noise_norm = nf.noise_norm;
    }
    return sc;
}

std::vector<double> geometric_schedule(double first, double last, std::size_t count) {
    if (count == 0 || !(first > 0.0) || !(last > 0.0)) fail(ErrorKind::InvalidArgument, "invalid lambda schedule");
    if (count == 1) return {first};
    if (!(last < first)) fail(ErrorKind::InvalidArgument, "lambda schedule must decrease");
    std::vector<double> out(count);
    // Exponents are formed in log10 space so decade schedules land on the
    // correctly rounded powers of ten.
    const double a = std::log10(first);
    const double step = (std::log10(last) - a) / static_cast<double>(count - 1);
    for (std::size_t i = 0; i < count; ++i) out[i] = std::pow(10.0, a + step * static_cast<double>(i));
    out.front() = first;
    out.back() = last;
    return out;
}

namespace {

PlaneLattice centered(std::size_t n, double spacing, double height) {
    PlaneLattice l;
    l.nx = l.ny = n;
    l.dx = l.dy = spacing;
    l.x0 = l.y0 = -0.5 * spacing * static_cast<double>(n - 1);
    l.height = height;
    return l;
}

}  // namespace

std::vector<std::string> preset_names() { return {"sparse20", "uni4", "sparse5-small", "uni2-small"}; }

ScenarioConfig preset(std::string_view name, std::uint64_t seed) {
    ScenarioConfig c;
    c.name = std::string(name);
    c.seed = seed;
    c.direction = Vec3::UnitZ();
    if (name == "sparse20" || name == "uni4") {
        constexpr double spacing = 0.0187;
        c.source = centered(108, spacing, 0.0);
        c.measurement = centered(215, spacing, 0.1);
        c.kappa_mode = KappaMode::Physical;
        if (name == "sparse20") {
            c.generator = SparseSpec{20, 10.0 * spacing, 1.0};
            c.lambdas = {1e-6, 1e-9, 1e-12};
        } else {
            c.mask_rects = {{8, 10, 36, 30}, {60, 6, 40, 24}, {12, 62, 28, 38}, {56, 52, 44, 44}};
            const double s = 1.0 / std::sqrt(2.0);
            const double t = 1.0 / std::sqrt(3.0);
            c.generator = UnidirectionalSpec{{Vec3(0, 0, 1), Vec3(s, 0, s), Vec3(0, -s, s), Vec3(t, t, -t)},
                                             {AmplitudeKind::Bump, 0.2, 1.0}};
            c.lambdas = {1e-6, 1e-10, 1e-14};
        }
        return c;
    }
    if (name == "sparse5-small" || name == "uni2-small") {
        c.source = centered(32, 1.0, 0.0);
        c.measurement = centered(64, 1.0, 3.0);
        c.kappa_mode = KappaMode::Normalized;
        if (name == "sparse5-small") {
            c.generator = SparseSpec{5, 8.0, 1.0};
            c.lambdas = geometric_schedule(1e-2, 1e-8, 7);
        } else {
            c.mask_rects = {{4, 6, 8, 6}, {18, 16, 8, 6}};
            const double s = 1.0 / std::sqrt(2.0);
            c.generator = UnidirectionalSpec{{Vec3(s, 0, s), Vec3(0, -s, s)}, {AmplitudeKind::Bump, 0.2, 1.0}};
            c.lambdas = geometric_schedule(1e-2, 1e-5, 4);
        }
        return c;
    }
    fail(ErrorKind::Config, "unknown preset '" + std::string(name) + "'");
}

}  // namespace magrecon
