// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>

#include "commands.hpp"
#include "magrecon/certificate.hpp"
#include "magrecon/io.hpp"
#include "magrecon/scenarios.hpp"
#include "magrecon/solver.hpp"
#include "magrecon/summation.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

using namespace magrecon;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", x);
    return buf;
}

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

double max_adjoint_norm(const ForwardModel& m, const FieldData& f) {
    double best = 0.0;
    for (const auto& g : m.adjoint(f)) best = std::max(best, g.norm());
    return best;
}

Eigen::MatrixXd dense(const ForwardModel& m) {
    std::vector<Vec3> sites(m.source().positions().begin(), m.source().positions().end());
    std::vector<Vec3> points(m.target().positions().begin(), m.target().positions().end());
    return oracle::dense_matrix(sites, points, m.direction().vec(), m.kappa());
}

Eigen::VectorXd as_vector(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// Solves shared by several criteria.
struct PresetRun {
    Scenario scenario;
    std::vector<SweepPoint> sweep;
    double seconds = 0.0;
};

const PresetRun& preset_run(const std::string& name) {
    static std::map<std::string, PresetRun> cache;
    auto it = cache.find(name);
    if (it != cache.end()) return it->second;
    const auto t0 = Clock::now();
    PresetRun run{make_scenario(preset(name, 0)), {}, 0.0};
    const ForwardModel model = run.scenario.model();
    run.sweep = lambda_sweep(model, run.scenario.field, run.scenario.config.lambdas, SolverConfig{},
                             {.reference = &run.scenario.mu0});
    run.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    return cache.emplace(name, std::move(run)).first->second;
}

// 1 -------------------------------------------------------------------------
Outcome adjoint_consistency() {
    const auto t0 = Clock::now();
    SplitMix64 rng(101);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t snx = 1 + rng.below(32), sny = 1 + rng.below(32);
        const std::size_t qnx = 1 + rng.below(64), qny = 1 + rng.below(64);
        const double hs = rng.uniform(0.01, 1.0);
        const auto s = DipoleGrid::build(lattice(snx, sny, hs, 0.0));
        const auto ql = lattice(qnx, qny, rng.uniform(0.01, 1.0), rng.uniform(0.05, 2.0), rng.uniform(-1, 0), rng.uniform(-1, 0));
        std::vector<double> w(ql.size());
        for (auto& x : w) x = rng.uniform(0.1, 2.0);
        const auto q = MeasurementGrid::build(ql, w);
        const ForwardModel model(s, q, Direction(oracle::random_unit(rng)),
                                 {.kappa = rng.uniform() < 0.5 ? 1.0 : kPhysicalKappa, .dense_budget = 0});
        std::vector<MomentEntry> entries;
        for (std::size_t j = 0; j < s.site_count(); ++j) entries.push_back({j, Vec3(rng.normal(), rng.normal(), rng.normal())});
        const auto mu = DiscreteMagnetization::on(s, entries);
        FieldData psi;
        for (std::size_t p = 0; p < q.size(); ++p) psi.values.push_back(rng.normal());
        const FieldData amu = model.forward(mu);
        const auto atpsi = model.adjoint(psi);
        CompensatedSum rhs;
        double nmu = 0.0, natpsi = 0.0;
        for (const auto& e : mu.entries()) {
            rhs.add(e.moment.dot(atpsi[e.site]));
            nmu += e.moment.squaredNorm();
        }
        for (const auto& g : atpsi) natpsi += g.squaredNorm();
        const double lhs = inner_product(q, amu, psi);
        const double scale = weighted_norm(q, amu) * weighted_norm(q, psi) + std::sqrt(nmu) * std::sqrt(natpsi);
        worst = std::max(worst, std::abs(lhs - rhs.value()) / scale);
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    return {worst <= 1e-12 && secs < 10.0, "max relative defect " + fmt(worst) + " over 100 triples, " + fmt(secs) + " s"};
}

// 2 -------------------------------------------------------------------------
Outcome kernel_gradient() {
    SplitMix64 rng(102);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        const Vec3 x = rng.uniform(0.1, 10.0) * oracle::random_unit(rng);
        const Vec3 v = oracle::random_unit(rng);
        const auto phi = [&](const Vec3& y) { return v.dot(y) / std::pow(y.norm(), 3); };
        const Vec3 g = oracle::central_gradient(phi, x, 1e-5 * x.norm());
        const Vec3 k = kernel_kv(x, v);
        worst = std::max(worst, (g - k).norm() / k.norm());
    }
    return {worst <= 1e-6, "max relative error " + fmt(worst) + " at 100 points"};
}

// 3 -------------------------------------------------------------------------
Outcome potential_field() {
    SplitMix64 rng(103);
    const Scenario s = make_scenario(preset("sparse5-small", 3));
    const auto dip = to_point_dipoles(s.source, s.mu0);
    const double mu0 = 4.0 * std::numbers::pi * s.kappa;
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
        const Vec3 x(rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(0.5, 6.0) * (rng.uniform() < 0.5 ? 1 : -1));
        double r = 1e300;
        for (const auto& d : dip) r = std::min(r, (x - d.position).norm());
        const Vec3 g = oracle::central_gradient([&](const Vec3& y) { return potential_phi(dip, y); }, x, 1e-5 * r);
        const Vec3 b = field_vector(dip, x, s.kappa);
        worst = std::max(worst, (-mu0 * g - b).norm() / b.norm());
    }
    return {worst <= 1e-6, "max relative error " + fmt(worst) + " at 50 points"};
}

// 4 -------------------------------------------------------------------------
Outcome zero_threshold() {
    const auto t0 = Clock::now();
    int ok = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Scenario s = make_scenario(preset(seed < 10 ? "sparse5-small" : "uni2-small", seed));
        const ForwardModel model = s.model({.kappa = s.kappa, .dense_budget = 0});
        const double lambda = 2.01 * max_adjoint_norm(model, s.field);
        const SolveResult r = in_crowd(SolveProblem(model, s.field, lambda), {});
        const bool cert = check_optimality(model, s.field, r.mu, lambda, 1e-6).pass;
        if (r.mu.empty() && cert) ++ok;
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    return {ok == 20 && secs < 30.0, std::to_string(ok) + "/20 zero and certified, " + fmt(secs) + " s"};
}

// 5 -------------------------------------------------------------------------
Outcome certificate_soundness() {
    std::size_t results = 0, passed = 0, doubled = 0, caught = 0;
    for (const char* name : {"sparse5-small", "uni2-small"}) {
        const PresetRun& run = preset_run(name);
        const ForwardModel model = run.scenario.model();
        for (const auto& p : run.sweep) {
            ++results;
            if (!p.result) continue;
            const auto& mu = p.result->mu;
            if (check_optimality(model, run.scenario.field, mu, p.lambda, 1e-6).pass) ++passed;
            for (const auto& e : mu.entries()) {
                auto entries = mu.entries();
                for (auto& x : entries) {
                    if (x.site == e.site) x.moment *= 2.0;
                }
                ++doubled;
                const auto c = check_optimality(model, run.scenario.field, DiscreteMagnetization::on(run.scenario.source, entries),
                                                p.lambda, 1e-6);
                if (!c.pass) ++caught;
            }
        }
    }
    return {results > 0 && passed == results && caught == doubled,
            std::to_string(passed) + "/" + std::to_string(results) + " results certified, " + std::to_string(caught) + "/" +
                std::to_string(doubled) + " doubled moments rejected"};
}

// 6 -------------------------------------------------------------------------
Outcome oracle_equivalence() {
    SplitMix64 rng(106);
    double worst_ic = 0.0, worst_sg = 0.0;
    int instances = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t nx = 2 + trial % 5, ny = 2 + (trial / 5) % 4 * 2;  // 4 .. 48 sites
        const auto s = DipoleGrid::build(lattice(nx, ny, 1.0, 0.0));
        const std::size_t nq = 2 * std::max(nx, ny) + 2;
        const double hq = static_cast<double>(std::max(nx, ny) + 1) / static_cast<double>(nq - 1);
        const auto q = MeasurementGrid::build(lattice(nq, nq, hq, rng.uniform(0.5, 1.0), -1.0, -1.0));
        const ForwardModel model(s, q, Direction(oracle::random_unit(rng)));
        std::vector<MomentEntry> entries;
        for (int k = 0; k < 3; ++k) entries.push_back({rng.below(s.site_count()), oracle::random_unit(rng)});
        FieldData f = model.forward(DiscreteMagnetization::on(s, entries));
        for (auto& x : f.values) x += 1e-2 * rng.normal();
        const double lambda = std::pow(10.0, rng.uniform(-3.0, -0.5)) * 2.0 * max_adjoint_norm(model, f);
        const SolveProblem problem(model, f, lambda);
        SolverConfig cfg;
        cfg.certificate_tol = 1e-9;
        cfg.rel_obj_tol = 1e-15;
        cfg.max_iter = 500000;
        const SolveResult ic = in_crowd(problem, cfg);
        const SolveResult fi = fista(problem, cfg);
        const Eigen::MatrixXd a = dense(model);
        const Eigen::VectorXd w = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(q.size()));
        const Eigen::VectorXd fv = as_vector(f.values);
        const std::size_t iters = std::min<std::size_t>(4'000'000, 3'000'000'000 / (a.cols() * a.cols()));
        const auto sg = oracle::subgradient(a, w, fv, lambda, iters);
        const double f_ic = oracle::objective(a, w, fv, lambda, as_vector(ic.mu.to_dense()));
        const double f_fi = oracle::objective(a, w, fv, lambda, as_vector(fi.mu.to_dense()));
        worst_ic = std::max(worst_ic, std::abs(f_ic - f_fi) / f_fi);
        worst_sg = std::max({worst_sg, std::abs(sg.best - f_ic) / f_ic, std::abs(sg.best - f_fi) / f_fi});
        ++instances;
    }
    return {instances >= 20 && worst_ic <= 1e-8 && worst_sg <= 1e-6,
            std::to_string(instances) + " instances: in-crowd vs fista " + fmt(worst_ic) + ", vs subgradient " + fmt(worst_sg)};
}

// 7 -------------------------------------------------------------------------
Outcome regularization_bound() {
    const Scenario s = make_scenario(preset("sparse5-small", 5));
    const ForwardModel model = s.model();
    const double tv0 = tv_norm(s.mu0);
    const std::vector<double> lambdas = geometric_schedule(1e-2, 1e-6, 5);
    const std::uint64_t seed = noise_seed(s.config.seed);
    std::size_t points = 0, holds = 0;
    double worst = -1e300;
    auto check = [&](const std::vector<SweepPoint>& sweep) {
        for (const auto& p : sweep) {
            ++points;
            if (!p.result || !p.noise_norm) continue;
            const double bound = *p.noise_norm * *p.noise_norm / p.lambda + tv0;
            worst = std::max(worst, p.summary.tv - bound);
            if (p.summary.tv <= bound + 1e-9) ++holds;
        }
    };
    // Fixed noise level across the sweep.
    const NoisyField fixed = add_noise(s.field, s.target, {NoiseSpec::Mode::Sigma, 1e-4, 0.0}, seed);
    check(lambda_sweep(model, lambdas, [&](double) { return SweepData{fixed.data, fixed.noise_norm}; }, {}, {.reference = &s.mu0}));
    // Noise norm tied to lambda: ||e|| = 0.5 sqrt(lambda).
    check(lambda_sweep(
        model, lambdas,
        [&](double lambda) {
            const NoisyField n = add_noise(s.field, s.target, {NoiseSpec::Mode::Ratio, 0.5, lambda}, seed);
            return SweepData{n.data, n.noise_norm};
        },
        {}, {.reference = &s.mu0}));
    return {points == 10 && holds == points,
            std::to_string(holds) + "/" + std::to_string(points) + " sweep points within the bound, max excess " + fmt(worst)};
}

// 8 -------------------------------------------------------------------------
Outcome sparse_recovery() {
    const PresetRun& run = preset_run("sparse5-small");
    const auto& s = run.scenario;
    const double radius = 3.0 * s.source.lattice().dx;
    bool monotone = true;
    double prev = 1e300;
    std::string path;
    for (const auto& p : run.sweep) {
        if (!p.result || !p.relative_tv_distance) return {false, "solve failed at lambda " + fmt(p.lambda) + ": " + p.error};
        monotone = monotone && *p.relative_tv_distance < prev;
        prev = *p.relative_tv_distance;
        path += (path.empty() ? "" : " ") + fmt(prev);
    }
    const auto& mu = run.sweep.back().result->mu;
    double local = 0.0;
    for (const auto& e : s.mu0.entries()) {
        const double mass = local_mass(s.source, mu, s.source.position(e.site), radius).mass;
        local = std::max(local, std::abs(mass - e.moment.norm()) / e.moment.norm());
    }
    double off = 0.0;
    for (const auto& e : mu.entries()) {
        bool near = false;
        for (const auto& t : s.mu0.entries()) near = near || (s.source.position(t.site) - s.source.position(e.site)).norm() < radius;
        if (!near) off += e.moment.norm();
    }
    off /= tv_norm(s.mu0);
    const bool pass = monotone && prev < 0.05 && local <= 0.05 && off < 0.02 && run.seconds < 300.0;
    return {pass, "relative distances [" + path + "], local mass error " + fmt(local) + ", off mass " + fmt(off) + ", " +
                      fmt(run.seconds) + " s"};
}

// 9 -------------------------------------------------------------------------
Outcome unidirectional_recovery() {
    const PresetRun& run = preset_run("uni2-small");
    const auto& s = run.scenario;
    const auto& last = run.sweep.back();
    if (!last.result) return {false, "solve failed: " + last.error};
    double net_err = 0.0, min_cos = 1.0, defect = 0.0;
    for (std::size_t c = 0; c < s.source.component_count(); ++c) {
        const auto truth = restrict_to_component(s.source, s.mu0, static_cast<int>(c));
        const auto rec = restrict_to_component(s.source, last.result->mu, static_cast<int>(c));
        if (rec.empty()) return {false, "component " + std::to_string(c) + " recovered as zero"};
        const Vec3 nt = net_moment(truth), nr = net_moment(rec);
        net_err = std::max(net_err, (nr - nt).norm() / nt.norm());
        min_cos = std::min(min_cos, nr.dot(nt) / (nr.norm() * nt.norm()));
        defect = std::max(defect, unidirectionality_defect(rec));
    }
    return {net_err <= 0.02 && min_cos >= 0.99 && defect <= 0.05,
            "lambda " + fmt(last.lambda) + ": net moment error " + fmt(net_err) + ", min cosine " + fmt(min_cos) +
                ", max defect " + fmt(defect)};
}

// 10 ------------------------------------------------------------------------
Outcome silent_pair() {
    SplitMix64 rng(110);
    const Vec3 center(0.0, 0.0, -1.0);
    const double radius = 0.5;
    const Vec3 moment(0.6, -0.3, 0.9);
    const SilentPair pair = gen_silent_pair(radius, moment, 32, center);
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
        const Vec3 x = center + rng.uniform(1.5, 6.0) * radius * oracle::random_unit(rng);
        const Vec3 b = pair.ball_field(x, 1.0), d = pair.dipole_field(x, 1.0);
        worst = std::max(worst, (b - d).norm() / d.norm());
    }
    const double net_diff = net_moment(pair.difference()).norm();
    const Vec3 ball = net_moment(pair.ball);
    const Vec3 dip = net_moment(std::vector<PointDipole>{pair.dipole});
    const bool equal_nonzero = ball.norm() > 0.0 && (ball - dip).norm() <= 1e-15 * ball.norm();
    return {worst <= 1e-8 && net_diff <= 1e-12 && equal_nonzero,
            "max field mismatch " + fmt(worst) + " at 20 points, difference net moment " + fmt(net_diff) + ", |ball| = |dipole| = " +
                fmt(ball.norm())};
}

// 11 ------------------------------------------------------------------------
Outcome moment_inequality() {
    SplitMix64 rng(111);
    const auto g = DipoleGrid::build(lattice(16, 16, 1.0, 0.0));
    int violations = 0, uni = 0, uni_equal = 0, strict = 0, mixed = 0;
    for (int k = 0; k < 1000; ++k) {
        const bool uni_dir = k % 2 == 0;
        const Vec3 u = oracle::random_unit(rng);
        std::vector<MomentEntry> entries;
        const std::size_t n = 2 + rng.below(40);
        for (std::size_t i = 0; i < n; ++i) {
            const Vec3 m = uni_dir ? Vec3(rng.uniform(1e-3, 10.0) * u) : Vec3(rng.uniform(1e-3, 10.0) * oracle::random_unit(rng));
            entries.push_back({rng.below(g.site_count()), m});
        }
        const auto mu = DiscreteMagnetization::on(g, entries);
        const double net = net_moment(mu).norm(), tv = tv_norm(mu);
        if (net > tv * (1.0 + 1e-15)) ++violations;
        if (uni_dir) {
            ++uni;
            if (std::abs(net - tv) <= 1e-14 * tv) ++uni_equal;
        } else {
            ++mixed;
            if (tv - net > 1e-14 * tv) ++strict;
        }
    }
    return {violations == 0 && uni_equal == uni && strict == mixed,
            std::to_string(violations) + " violations in 1000, equality on " + std::to_string(uni_equal) + "/" + std::to_string(uni) +
                " uni-directional, strict on " + std::to_string(strict) + "/" + std::to_string(mixed) + " others"};
}

// 12 ------------------------------------------------------------------------
Outcome determinism() {
    const TempDir dir;
    std::ostringstream sink;
    std::size_t compared = 0, equal = 0;
    for (const char* name : {"sparse5-small", "uni2-small"}) {
        const std::string bundle = (dir / name).string();
        if (cli::run_cli({"gen", "--preset", name, "--out", bundle}, sink, sink) != cli::kExitOk) return {false, "gen failed"};
        std::vector<io::RunManifest> runs;
        for (const char* out : {"run1", "run2"}) {
            const fs::path root = dir / (std::string(name) + "-" + out);
            if (cli::run_cli({"solve", "--bundle", bundle, "--threads", "1", "--out", root.string()}, sink, sink) != cli::kExitOk) {
                return {false, std::string("solve failed on ") + name};
            }
            runs.push_back(io::load_manifest(root / "manifest.json"));
            for (const auto& child : runs.back().children) {
                const auto m = io::load_manifest(root / child);
                for (const auto& [file, digest] : m.outputs) {
                    runs.back().outputs[child + ":" + file] = digest;
                }
            }
        }
        for (const auto& [file, digest] : runs[0].outputs) {
            ++compared;
            const auto it = runs[1].outputs.find(file);
            if (it != runs[1].outputs.end() && it->second == digest) ++equal;
        }
        if (runs[0].outputs.size() != runs[1].outputs.size()) return {false, "output sets differ"};
    }
    return {compared > 0 && equal == compared, std::to_string(equal) + "/" + std::to_string(compared) + " output checksums equal"};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"adjoint consistency", adjoint_consistency},
        {"kernel gradient identity", kernel_gradient},
        {"potential/field consistency", potential_field},
        {"zero-threshold theorem", zero_threshold},
        {"certificate soundness", certificate_soundness},
        {"oracle equivalence", oracle_equivalence},
        {"regularization bound", regularization_bound},
        {"sparse recovery", sparse_recovery},
        {"uni-directional recovery", unidirectional_recovery},
        {"silent pair", silent_pair},
        {"moment inequality", moment_inequality},
        {"determinism", determinism},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        if (!o.pass) ++failures;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << (i + 1) << ". " << criteria[i].first << ": " << o.detail << std::endl;
    }
    std::cout << (criteria.size() - static_cast<std::size_t>(failures)) << "/" << criteria.size() << " criteria passed" << std::endl;
    return failures == 0 ? 0 : 1;
}
