#include <doctest.h>

#include <numbers>

#include "magrecon/error.hpp"
#include "magrecon/fields.hpp"
#include "magrecon/summation.hpp"
#include "oracles.hpp"

using namespace magrecon;

namespace {

PlaneLattice lattice(std::size_t nx, std::size_t ny, double spacing, double height, double x0 = 0.0, double y0 = 0.0) {
    PlaneLattice l;
    l.nx = nx;
    l.ny = ny;
    l.dx = l.dy = spacing;
    l.height = height;
    l.x0 = x0;
    l.y0 = y0;
    return l;
}

DiscreteMagnetization random_mu(const DipoleGrid& g, SplitMix64& rng, double fill = 1.0) {
    std::vector<MomentEntry> entries;
    for (std::size_t s = 0; s < g.site_count(); ++s) {
        if (rng.uniform() < fill) entries.push_back({s, Vec3(rng.normal(), rng.normal(), rng.normal())});
    }
    return DiscreteMagnetization::on(g, entries);
}

FieldData random_field(std::size_t n, SplitMix64& rng) {
    FieldData f;
    for (std::size_t p = 0; p < n; ++p) f.values.push_back(rng.normal());
    return f;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

double sites_dot(const DiscreteMagnetization& mu, const std::vector<Vec3>& g) {
    CompensatedSum acc;
    for (const auto& e : mu.entries()) acc.add(e.moment.dot(g[e.site]));
    return acc.value();
}

double norm_sites(const std::vector<Vec3>& g) {
    double s = 0.0;
    for (const auto& v : g) s += v.squaredNorm();
    return std::sqrt(s);
}

double norm_mu(const DiscreteMagnetization& mu) {
    double s = 0.0;
    for (const auto& e : mu.entries()) s += e.moment.squaredNorm();
    return std::sqrt(s);
}

}  // namespace

TEST_SUITE("fields") {

TEST_CASE("kernel examples") {
    const Vec3 e3(0, 0, 1);
    for (double h : {0.1, 1.0, 3.0}) {
        const Vec3 k = kernel_kv(Vec3(0, 0, h), e3);
        CHECK(k.x() == 0.0);
        CHECK(k.y() == 0.0);
        CHECK(k.z() == doctest::Approx(-2.0 / (h * h * h)).epsilon(1e-15));
    }
    CHECK(kernel_kv(Vec3(1, 0, 0), e3) == Vec3(0, 0, 1));
    CHECK_THROWS_WITH_AS(kernel_kv(Vec3::Zero(), e3), doctest::Contains("singular kernel evaluation"), Error);
}

TEST_CASE("kernel agrees with 50-digit evaluation") {
    SplitMix64 rng(1);
    std::vector<std::pair<Vec3, Vec3>> cases = {{Vec3(1, 1, 1), Vec3(0, 0, 1)}};
    for (int i = 0; i < 200; ++i) {
        cases.emplace_back(rng.uniform(0.05, 5.0) * oracle::random_unit(rng), oracle::random_unit(rng));
    }
    for (const auto& [x, v] : cases) {
        const Vec3 k = kernel_kv(x, v);
        const auto ref = oracle::kernel_hp(x, v);
        const double scale = 1.0 / (x.norm() * x.squaredNorm());
        for (int c = 0; c < 3; ++c) CHECK(std::abs(k[c] - static_cast<double>(ref[c])) <= 4e-16 * 3 * scale);
    }
}

TEST_CASE("kernel is the gradient of v.x/|x|^3") {
    SplitMix64 rng(2);
    for (int i = 0; i < 100; ++i) {
        const Vec3 x = rng.uniform(0.5, 3.0) * oracle::random_unit(rng);
        const Vec3 v = oracle::random_unit(rng);
        const auto phi = [&](const Vec3& y) { return v.dot(y) / std::pow(y.norm(), 3); };
        const Vec3 g = oracle::central_gradient(phi, x, 1e-5 * x.norm());
        CHECK((g - kernel_kv(x, v)).norm() <= 1e-6 * kernel_kv(x, v).norm());
    }
}

TEST_CASE("matrix entries match the closed form") {
    const auto s = DipoleGrid::build(lattice(4, 3, 0.3, 0.0, -0.4, -0.2));
    const auto q = MeasurementGrid::build(lattice(5, 4, 0.25, 0.5, -0.5, -0.5));
    const Vec3 v = Vec3(1, -2, 2).normalized();
    const ForwardModel model(s, q, Direction(v), {.kappa = 1e-7});
    std::vector<Vec3> sites(s.positions().begin(), s.positions().end());
    std::vector<Vec3> points(q.positions().begin(), q.positions().end());
    const auto ref = oracle::dense_matrix(sites, points, v, 1e-7);
    // Rounding is measured against the two terms of the closed form: an entry
    // where they cancel cannot carry more absolute accuracy than that.
    const double eps = std::numeric_limits<double>::epsilon();
    for (std::size_t p = 0; p < q.size(); ++p) {
        for (std::size_t c = 0; c < model.cols(); ++c) {
            const Vec3 d = q.position(p) - s.position(c / 3);
            const int k = static_cast<int>(c % 3);
            const double r = d.norm();
            const double terms = 1e-7 * (std::abs(v[k]) / std::pow(r, 3) + 3.0 * std::abs(d[k] * v.dot(d)) / std::pow(r, 5));
            const double exact = ref(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(c));
            CHECK(std::abs(model.entry(p, c) - exact) <= 8.0 * eps * terms);
        }
    }
}

TEST_CASE("forward examples") {
    const auto s = DipoleGrid::build(lattice(1, 1, 1.0, 0.0));
    const auto q = MeasurementGrid::build(lattice(1, 1, 1.0, 0.1));
    const ForwardModel model(s, q, Direction(Vec3(0, 0, 1)), {.kappa = kappa_for(KappaMode::Physical)});
    const auto f = model.forward(DiscreteMagnetization::on(s, {{0, Vec3(0, 0, 1)}}));
    REQUIRE(f.size() == 1);
    CHECK(f.values[0] == doctest::Approx(2e-4).epsilon(1e-14));

    const auto zero = model.forward(DiscreteMagnetization::zero(s));
    CHECK(zero.values == std::vector<double>{0.0});
}

TEST_CASE("superposition of two dipoles") {
    const auto s = DipoleGrid::build(lattice(6, 6, 0.2, 0.0));
    const auto q = MeasurementGrid::build(lattice(8, 8, 0.2, 0.3, -0.2, -0.2));
    const ForwardModel model(s, q, Direction::normalized(Vec3(0.3, 0.1, 1)));
    const auto a = DiscreteMagnetization::on(s, {{3, Vec3(1, 2, -1)}});
    const auto b = DiscreteMagnetization::on(s, {{27, Vec3(-0.5, 0.1, 2)}});
    const auto fa = model.forward(a), fb = model.forward(b), fab = model.forward(a + b);
    for (std::size_t p = 0; p < q.size(); ++p) {
        CHECK(std::abs(fab.values[p] - fa.values[p] - fb.values[p]) <=
              1e-14 * (std::abs(fa.values[p]) + std::abs(fb.values[p])));
    }
}

TEST_CASE("linearity on random instances") {
    SplitMix64 rng(3);
    const auto s = DipoleGrid::build(lattice(7, 5, 0.3, 0.0));
    const auto q = MeasurementGrid::build(lattice(9, 9, 0.25, 0.4));
    const ForwardModel model(s, q, Direction::normalized(Vec3(1, 1, 1)));
    for (int trial = 0; trial < 20; ++trial) {
        const auto mu = random_mu(s, rng, 0.5), nu = random_mu(s, rng, 0.5);
        const double alpha = rng.normal(), beta = rng.normal();
        const auto lhs = model.forward(alpha * mu + beta * nu);
        const auto rhs = alpha * model.forward(mu) + beta * model.forward(nu);
        const double scale = std::abs(alpha) * weighted_norm(q, model.forward(mu)) +
                             std::abs(beta) * weighted_norm(q, model.forward(nu));
        CHECK(weighted_norm(q, lhs - rhs) <= 1e-13 * scale);
    }
}

TEST_CASE("adjoint identity with nonuniform weights") {
    SplitMix64 rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        const auto s = DipoleGrid::build(lattice(1 + rng.below(6), 1 + rng.below(6), 0.3, 0.0));
        const auto ql = lattice(1 + rng.below(8), 1 + rng.below(8), 0.2, rng.uniform(0.1, 1.0), -0.3, -0.3);
        std::vector<double> w(ql.size());
        for (auto& x : w) x = rng.uniform(0.1, 2.0);
        const auto q = MeasurementGrid::build(ql, w);
        const ForwardModel model(s, q, Direction(oracle::random_unit(rng)));
        const auto mu = random_mu(s, rng);
        const auto psi = random_field(q.size(), rng);
        const auto amu = model.forward(mu);
        const auto atpsi = model.adjoint(psi);
        const double lhs = inner_product(q, amu, psi);
        const double rhs = sites_dot(mu, atpsi);
        const double bound = 1e-12 * (weighted_norm(q, amu) * weighted_norm(q, psi) + norm_mu(mu) * norm_sites(atpsi));
        CHECK(std::abs(lhs - rhs) <= bound);
    }
}

TEST_CASE("adjoint examples") {
    const auto s = DipoleGrid::build(lattice(1, 1, 1.0, 0.0));
    const auto q = MeasurementGrid::build(lattice(1, 1, 1.0, 0.7), std::vector<double>{2.5});
    const ForwardModel model(s, q, Direction::normalized(Vec3(1, 0, 1)));
    const auto g = model.adjoint(FieldData{{1.0}});
    for (int k = 0; k < 3; ++k) CHECK(g[0][k] == doctest::Approx(2.5 * model.entry(0, static_cast<std::size_t>(k))).epsilon(1e-15));
    const auto z = model.adjoint(FieldData{{0.0}});
    CHECK(z[0] == Vec3::Zero());
    CHECK_THROWS_WITH_AS(model.adjoint(FieldData{{1.0, 2.0}}), doctest::Contains("measurement mismatch"), Error);
    const auto other = DipoleGrid::build(lattice(2, 1, 1.0, 0.0));
    CHECK_THROWS_WITH_AS(model.forward(DiscreteMagnetization::zero(other)), doctest::Contains("support mismatch"), Error);
}

TEST_CASE("dense and matrix-free paths and thread counts agree bit for bit") {
    SplitMix64 rng(5);
    const auto s = DipoleGrid::build(lattice(9, 7, 0.2, 0.0));
    const auto q = MeasurementGrid::build(lattice(13, 11, 0.15, 0.25));
    const Direction v(oracle::random_unit(rng));
    const ForwardModel dense(s, q, v, {.kappa = 1.0, .dense_budget = 1u << 30, .threads = 1});
    REQUIRE(dense.is_dense());
    const auto mu = random_mu(s, rng, 0.7);
    const auto psi = random_field(q.size(), rng);
    const auto f0 = dense.forward(mu);
    const auto g0 = dense.adjoint(psi);
    for (unsigned threads : {1u, 2u, 3u, 8u}) {
        for (std::size_t budget : {std::size_t{0}, std::size_t{1} << 30}) {
            const ForwardModel m(s, q, v, {.kappa = 1.0, .dense_budget = budget, .threads = threads});
            CHECK(m.forward(mu) == f0);
            CHECK(m.adjoint(psi) == g0);
        }
    }
}

TEST_CASE("restricted applications match the full operator") {
    SplitMix64 rng(6);
    const auto s = DipoleGrid::build(lattice(6, 6, 0.2, 0.0));
    const auto q = MeasurementGrid::build(lattice(7, 7, 0.2, 0.3));
    const ForwardModel model(s, q, Direction(oracle::random_unit(rng)), {.kappa = 1.0, .dense_budget = 0});
    const std::vector<std::size_t> sites = {1, 7, 20, 35};
    std::vector<double> packed;
    std::vector<MomentEntry> entries;
    for (std::size_t j : sites) {
        const Vec3 m(rng.normal(), rng.normal(), rng.normal());
        entries.push_back({j, m});
        packed.insert(packed.end(), {m.x(), m.y(), m.z()});
    }
    const auto full = model.forward(DiscreteMagnetization::on(s, entries));
    CHECK(model.apply_sites(sites, packed) == full.values);

    const auto psi = random_field(q.size(), rng);
    const auto g = model.adjoint(psi);
    const auto gs = model.adjoint_sites(psi.values, sites);
    for (std::size_t i = 0; i < sites.size(); ++i) {
        for (int k = 0; k < 3; ++k) CHECK(gs[3 * i + static_cast<std::size_t>(k)] == g[sites[i]][k]);
    }
    const auto cols = model.gather_columns(sites);
    for (std::size_t i = 0; i < sites.size(); ++i) {
        for (std::size_t p = 0; p < q.size(); ++p) {
            for (std::size_t k = 0; k < 3; ++k) {
                CHECK(cols(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(3 * i + k)) == model.entry(p, 3 * sites[i] + k));
            }
        }
    }
}

TEST_CASE("operator norm examples") {
    const auto s1 = DipoleGrid::build(lattice(1, 1, 1.0, 0.0));
    const auto q1 = MeasurementGrid::build(lattice(1, 1, 1.0, 0.5, 0.2, -0.1));
    const ForwardModel one(s1, q1, Direction::normalized(Vec3(1, 2, 3)));
    const double row = one.block(0, 0).squaredNorm();
    const double tol = 1e-10;
    const auto est1 = operator_norm(one, tol);
    CHECK(est1.raw == doctest::Approx(row).epsilon(1e-14));
    CHECK(est1.value >= row);

    SplitMix64 rng(7);
    const auto s = DipoleGrid::build(lattice(10, 10, 0.2, 0.0));  // 300 columns
    const auto q = MeasurementGrid::build(lattice(15, 15, 0.15, 0.3));
    const Vec3 v = oracle::random_unit(rng);
    const ForwardModel model(s, q, Direction(v));
    std::vector<Vec3> sites(s.positions().begin(), s.positions().end());
    std::vector<Vec3> points(q.positions().begin(), q.positions().end());
    const double ref = oracle::sigma_max_squared(oracle::dense_matrix(sites, points, v, 1.0));
    for (double t : {1e-4, 1e-8}) {
        const auto est = operator_norm(model, t, 3);
        CHECK(rel(est.raw, ref) <= t);
        CHECK(est.value >= ref);
        CHECK(est.value <= ref * (1.0 + 11.0 * t));
    }

    const auto base = operator_norm(model, 1e-10, 3);
    const auto scaled = operator_norm(model.scaled(3.0), 1e-10, 3);
    CHECK(rel(scaled.raw, 9.0 * base.raw) <= 1e-9);
}

TEST_CASE("operator norm reports non-convergence") {
    const auto s = DipoleGrid::build(lattice(10, 10, 0.2, 0.0));
    const auto q = MeasurementGrid::build(lattice(15, 15, 0.15, 0.3));
    const ForwardModel model(s, q, Direction(Vec3(0, 0, 1)));
    CHECK_THROWS_WITH_AS(operator_norm(model, 1e-14, 0, 2), doctest::Contains("norm estimation failed"), Error);
    CHECK_THROWS_AS(operator_norm(model, 0.0), Error);
}

TEST_CASE("potential examples") {
    const std::vector<PointDipole> none;
    CHECK(potential_phi(none, Vec3(1, 2, 3)) == 0.0);
    const std::vector<PointDipole> axial = {{Vec3::Zero(), Vec3(0, 0, 1)}};
    for (double r : {0.1, 1.0, 7.0}) {
        CHECK(potential_phi(axial, Vec3(0, 0, r)) == doctest::Approx(1.0 / (4.0 * std::numbers::pi * r * r)).epsilon(1e-15));
    }
    CHECK_THROWS_WITH_AS(potential_phi(axial, Vec3::Zero()), doctest::Contains("singular evaluation"), Error);
}

TEST_CASE("field is minus mu0 times the potential gradient") {
    SplitMix64 rng(8);
    for (double kappa : {1.0, kPhysicalKappa}) {
        const double mu0 = 4.0 * std::numbers::pi * kappa;
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<PointDipole> dip;
            for (int j = 0; j < 4; ++j) dip.push_back({Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), 0.0), oracle::random_unit(rng)});
            const Vec3 x(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.3, 1.5));
            double r = 1e300;
            for (const auto& d : dip) r = std::min(r, (x - d.position).norm());
            const Vec3 g = oracle::central_gradient([&](const Vec3& y) { return potential_phi(dip, y); }, x, 1e-5 * r);
            const Vec3 b = field_vector(dip, x, kappa);
            CHECK((-mu0 * g - b).norm() <= 1e-6 * b.norm());
            const Vec3 v = oracle::random_unit(rng);
            CHECK(field_component(dip, x, v, kappa) == doctest::Approx(v.dot(b)).epsilon(1e-12));
        }
    }
}

TEST_CASE("forward equals the sensor component of the field vector") {
    SplitMix64 rng(9);
    const auto s = DipoleGrid::build(lattice(5, 5, 0.2, 0.0));
    const auto q = MeasurementGrid::build(lattice(6, 6, 0.2, 0.35));
    const Vec3 v = oracle::random_unit(rng);
    const ForwardModel model(s, q, Direction(v), {.kappa = kPhysicalKappa});
    const auto mu = random_mu(s, rng, 0.6);
    const auto f = model.forward(mu);
    const auto dip = to_point_dipoles(s, mu);
    for (std::size_t p = 0; p < q.size(); ++p) {
        CHECK(f.values[p] == doctest::Approx(field_component(dip, q.position(p), v, kPhysicalKappa)).epsilon(1e-12));
    }
}

TEST_CASE("translation covariance") {
    SplitMix64 rng(10);
    // Dyadic coordinates and shift: x - y is exact before and after the shift.
    const auto s = DipoleGrid::build(lattice(6, 5, 0.25, 0.0, -1.0, -0.5));
    const auto q = MeasurementGrid::build(lattice(7, 7, 0.125, 0.5, -0.75, -0.375));
    const Direction v(oracle::random_unit(rng));
    const ForwardModel a(s, q, v);
    const Vec3 t(0.5, -1.25, 0.375);
    const ForwardModel b(s.shifted(t), q.shifted(t), v);
    for (std::size_t p = 0; p < q.size(); ++p) {
        for (std::size_t c = 0; c < a.cols(); ++c) CHECK(a.entry(p, c) == b.entry(p, c));
    }
    const Vec3 generic(0.1234, -0.0567, 0.0891);
    const ForwardModel g(s.shifted(generic), q.shifted(generic), v);
    for (std::size_t p = 0; p < q.size(); ++p) {
        for (std::size_t c = 0; c < a.cols(); ++c) CHECK(std::abs(a.entry(p, c) - g.entry(p, c)) <= 1e-13 * std::abs(a.block(p, c / 3).norm()));
    }
}

TEST_CASE("decay bound for a unit dipole") {
    SplitMix64 rng(11);
    for (double kappa : {1.0, kPhysicalKappa}) {
        for (int i = 0; i < 100; ++i) {
            const double d = rng.uniform(0.01, 10.0);
            const std::vector<PointDipole> dip = {{Vec3::Zero(), oracle::random_unit(rng)}};
            const double b = field_vector(dip, d * oracle::random_unit(rng), kappa).norm();
            CHECK(b <= 16.0 * std::numbers::pi * kappa / (d * d * d));
            CHECK(b <= 2.0 * kappa / (d * d * d) * (1.0 + 1e-14));
        }
    }
}

TEST_CASE("field data arithmetic") {
    const auto q = MeasurementGrid::build(lattice(3, 1, 1.0, 1.0), std::vector<double>{1.0, 2.0, 0.5});
    const FieldData a{{1.0, 2.0, 3.0}}, b{{0.5, -1.0, 2.0}};
    CHECK(inner_product(q, a, b) == doctest::Approx(0.5 - 4.0 + 3.0));
    CHECK(weighted_norm(q, a) == doctest::Approx(std::sqrt(1.0 + 8.0 + 4.5)));
    CHECK((a - b).values == std::vector<double>{0.5, 3.0, 1.0});
    CHECK((2.0 * a).values == std::vector<double>{2.0, 4.0, 6.0});
    CHECK_THROWS_AS(inner_product(q, a, FieldData{{1.0}}), Error);
}

}  // TEST_SUITE
