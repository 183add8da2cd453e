#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <ostream>

#include <CLI11.hpp>

#include "magrecon/certificate.hpp"
#include "magrecon/error.hpp"
#include "magrecon/io.hpp"
#include "magrecon/measures.hpp"
#include "magrecon/scenarios.hpp"
#include "magrecon/solver.hpp"

namespace magrecon::cli {

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Config:
        case ErrorKind::InvalidArgument:
        case ErrorKind::Geometry: return kExitConfig;
        case ErrorKind::Numerical: return kExitNonconvergence;
        case ErrorKind::Mismatch:
        case ErrorKind::Schema:
        case ErrorKind::Checksum:
        case ErrorKind::Io: return kExitIo;
    }
    return kExitIo;
}

fs::path resolve_out(const std::string& p) {
    fs::path path(p);
    if (path.is_relative()) {
        if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0') return fs::path(root) / path;
    }
    return path;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Units {
    std::string moment, field, lambda, objective;
};

Units units_for(KappaMode mode) {
    if (mode == KappaMode::Physical) return {"A*m^2", "T", "T^2/(A*m^2)", "T^2"};
    return {"m.u.", "f.u.", "f.u.^2/m.u.", "f.u.^2"};
}

std::string num(double x) { return io::format_double(x); }
std::string flag(bool b) { return b ? "1" : "0"; }

std::string index_dir(std::size_t i) {
    std::string s = std::to_string(i);
    return "lambda_" + std::string(s.size() < 2 ? 2 - s.size() : 0, '0') + s;
}

// ---- shared option groups ---------------------------------------------------------

struct SolverFlags {
    std::string config_path;
    std::optional<std::size_t> max_iter;
    std::optional<double> rel_obj_tol;
    std::optional<double> certificate_tol;
    std::optional<std::size_t> batch;
    std::optional<std::size_t> max_passes;

    void attach(CLI::App& app) {
        app.add_option("--solver-config", config_path, "JSON file with solver settings (top level or under \"solver\")");
        app.add_option("--max-iter", max_iter, "FISTA iterations per subproblem");
        app.add_option("--rel-obj-tol", rel_obj_tol, "relative objective change tolerance");
        app.add_option("--cert-tol", certificate_tol, "certificate tolerance");
        app.add_option("--batch", batch, "sites admitted per In-Crowd pass");
        app.add_option("--max-passes", max_passes, "In-Crowd passes");
    }

    SolverConfig resolve() const {
        SolverConfig c;
        if (!config_path.empty()) {
            const io::json j = io::json::parse(io::read_file(config_path), nullptr, false);
            if (j.is_discarded()) fail(ErrorKind::Config, "malformed solver config '" + config_path + "'");
            c = io::solver_config_from_json(j.contains("solver") ? j.at("solver") : j);
        }
        if (max_iter) c.max_iter = *max_iter;
        if (rel_obj_tol) c.rel_obj_tol = *rel_obj_tol;
        if (certificate_tol) c.certificate_tol = *certificate_tol;
        if (batch) c.in_crowd_batch = *batch;
        if (max_passes) c.max_passes = *max_passes;
        c.validate();
        return c;
    }
};

struct DataChoice {
    const FieldData* data = nullptr;
    std::optional<double> noise_norm;
    std::string file;
};

DataChoice select_data(const Scenario& s, const std::string& mode) {
    const bool noisy = mode == "noisy" || (mode == "auto" && s.noisy.has_value());
    if (mode != "auto" && mode != "clean" && mode != "noisy") fail(ErrorKind::Config, "--data must be auto, clean or noisy");
    if (noisy) {
        if (!s.noisy) fail(ErrorKind::Config, "bundle has no noisy field");
        return {&*s.noisy, s.noise_norm, "field_noisy.csv"};
    }
    return {&s.field, 0.0, "field.csv"};
}

std::map<std::string, std::string> bundle_inputs(const fs::path& bundle, const std::string& data_file) {
    std::map<std::string, std::string> in;
    for (const char* name : {"config.json", "mu0.csv", "meta.json"}) in[name] = io::sha256_file(bundle / name);
    in[data_file] = io::sha256_file(bundle / data_file);
    return in;
}

io::RunManifest base_manifest(const std::string& command, const fs::path& bundle, const Scenario& s, unsigned threads) {
    io::RunManifest m;
    m.command = command;
    m.config_hash = io::sha256_file(bundle / "config.json");
    m.seed = s.config.seed;
    m.kappa_mode = s.config.kappa_mode;
    m.threads = threads;
    return m;
}

// Writes the per-lambda files and returns the child manifest path relative to `root`.
std::string write_solution(const fs::path& root, std::size_t index, const Scenario& s, const SolveResult& r,
                           const Certificate& c, bool per_site, io::RunManifest manifest) {
    const fs::path dir = root / index_dir(index);
    const std::string bin = io::encode_result(r);
    const std::string cert = io::certificate_to_json(c, per_site).dump(2) + "\n";
    const std::string mu = io::magnetization_csv(s.source, r.mu);
    const std::string summary = io::moment_summary_csv(summarize(s.source, r.mu));
    io::write_file(dir / "result.bin", bin);
    io::write_file(dir / "certificate.json", cert);
    io::write_file(dir / "mu.csv", mu);
    io::write_file(dir / "summary.csv", summary);
    manifest.outputs = {{"result.bin", io::sha256_hex(bin)},
                        {"certificate.json", io::sha256_hex(cert)},
                        {"mu.csv", io::sha256_hex(mu)},
                        {"summary.csv", io::sha256_hex(summary)}};
    io::save_manifest(dir / "manifest.json", manifest);
    return (fs::path(index_dir(index)) / "manifest.json").generic_string();
}

// ---- gen ------------------------------------------------------------------------

struct GenArgs {
    std::string preset_name;
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<double> noise_sigma;
    std::optional<double> noise_ratio;
    std::optional<double> noise_lambda;
    bool physical = false;
    std::string out;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
    const auto t0 = Clock::now();
    if (a.preset_name.empty() == a.config.empty()) fail(ErrorKind::Config, "give exactly one of --preset or --config");
    ScenarioConfig cfg = a.preset_name.empty() ? io::load_scenario_config(a.config) : preset(a.preset_name, 0);
    if (a.seed) cfg.seed = *a.seed;
    if (a.physical) cfg.kappa_mode = KappaMode::Physical;
    if (a.noise_sigma && a.noise_ratio) fail(ErrorKind::Config, "--noise-sigma and --noise-ratio are exclusive");
    if (a.noise_sigma) cfg.noise = {NoiseSpec::Mode::Sigma, *a.noise_sigma, 0.0};
    if (a.noise_ratio) {
        if (!a.noise_lambda) fail(ErrorKind::Config, "--noise-ratio needs --noise-lambda");
        cfg.noise = {NoiseSpec::Mode::Ratio, *a.noise_ratio, *a.noise_lambda};
    }
    const Scenario s = make_scenario(cfg);
    const fs::path dir = resolve_out(a.out.empty() ? cfg.name + "-seed" + std::to_string(cfg.seed) : a.out);
    io::save_bundle(dir, s);

    io::RunManifest m;
    m.command = "gen";
    m.config_hash = io::sha256_file(dir / "config.json");
    m.seed = cfg.seed;
    m.kappa_mode = cfg.kappa_mode;
    for (const char* name : {"config.json", "mu0.csv", "field.csv", "field_noisy.csv", "meta.json"}) {
        if (fs::exists(dir / name)) m.outputs[name] = io::sha256_file(dir / name);
    }
    m.wall_seconds = seconds_since(t0);
    io::save_manifest(dir / "manifest.json", m);
    out << "bundle " << dir.string() << ": " << s.mu0.size() << " nonzero sites, " << s.source.component_count()
        << " components, noise_norm " << num(s.noise_norm) << "\n";
    return kExitOk;
}

// ---- solve ------------------------------------------------------------------------

struct SolveArgs {
    std::string bundle;
    std::vector<double> lambdas;
    std::string data = "auto";
    std::string out;
    unsigned threads = 1;
    bool per_site = false;
    bool cold = false;
    SolverFlags solver;
};

bool strictly_decreasing(const std::vector<double>& v) {
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (!(v[i] < v[i - 1])) return false;
    }
    return true;
}

void check_lambdas(const std::vector<double>& lambdas) {
    if (lambdas.empty()) fail(ErrorKind::Config, "empty lambda list");
    for (double l : lambdas) {
        if (!(l > 0.0) || !std::isfinite(l)) fail(ErrorKind::Config, "lambda values must be positive");
    }
}

int cmd_solve(const SolveArgs& a, std::ostream& out) {
    const auto t0 = Clock::now();
    const fs::path bundle(a.bundle);
    const Scenario s = io::load_bundle(bundle);
    const SolverConfig cfg = a.solver.resolve();
    const std::vector<double> lambdas = a.lambdas.empty() ? s.config.lambdas : a.lambdas;
    check_lambdas(lambdas);
    ModelOptions mo;
    mo.threads = std::max(1u, a.threads);
    const ForwardModel model = s.model(mo);
    const DataChoice d = select_data(s, a.data);
    const fs::path root = a.out.empty() ? bundle / "solve" : resolve_out(a.out);
    const bool warm_path = !a.cold && strictly_decreasing(lambdas);
    const double ref_tv = tv_norm(s.mu0);
    const Units u = units_for(s.config.kappa_mode);

    io::RunManifest top = base_manifest("solve", bundle, s, mo.threads);
    top.inputs = bundle_inputs(bundle, d.file);
    std::string table = "lambda[" + u.lambda + "],objective[" + u.objective + "],tv[" + u.moment +
                        "],rel_tv_distance[1],certificate_pass[bool],converged[bool],reason,iterations[count]," +
                        "passes[count]\n";
    bool nonconverged = false, cert_failed = false;
    std::optional<DiscreteMagnetization> warm;
    for (std::size_t i = 0; i < lambdas.size(); ++i) {
        const auto t1 = Clock::now();
        const SolveProblem problem(model, *d.data, lambdas[i]);
        const SolveResult r = in_crowd(problem, cfg, warm_path ? warm : std::nullopt);
        const Certificate c = check_optimality(model, *d.data, r.mu, lambdas[i], cfg.certificate_tol);
        warm = r.mu;
        nonconverged |= !r.converged;
        cert_failed |= !c.pass;

        io::RunManifest child = base_manifest("solve", bundle, s, mo.threads);
        child.inputs = top.inputs;
        child.wall_seconds = seconds_since(t1);
        top.children.push_back(write_solution(root, i, s, r, c, a.per_site, child));

        const std::string rel = ref_tv > 0.0 ? num(tv_distance(r.mu, s.mu0) / ref_tv) : "";
        table += num(lambdas[i]) + "," + num(r.objective) + "," + num(tv_norm(r.mu)) + "," + rel + "," + flag(c.pass) +
                 "," + flag(r.converged) + "," + to_string(r.reason) + "," + std::to_string(r.iterations) + "," +
                 std::to_string(r.active_set_passes) + "\n";
        out << "lambda " << num(lambdas[i]) << ": objective " << num(r.objective) << ", support " << r.mu.size()
            << ", certificate " << (c.pass ? "pass" : "FAIL") << ", " << to_string(r.reason) << "\n";
    }
    io::write_file(root / "metrics.csv", table);
    top.outputs["metrics.csv"] = io::sha256_hex(table);
    top.wall_seconds = seconds_since(t0);
    io::save_manifest(root / "manifest.json", top);
    if (nonconverged) return kExitNonconvergence;
    return cert_failed ? kExitCertificate : kExitOk;
}

// ---- sweep ------------------------------------------------------------------------

struct SweepArgs {
    std::string bundle;
    std::vector<double> lambdas;
    std::vector<double> schedule;
    std::optional<double> noise_ratio;
    std::optional<double> radius;
    std::string data = "auto";
    std::string out;
    unsigned threads = 1;
    SolverFlags solver;
};

struct SiteMetrics {
    double max_abs = 0.0;
    double max_rel = 0.0;
    double off_fraction = 0.0;
};

// Local TV mass in B(x_j, r) against |v_j| at each true site, and the mass
// outside every such ball relative to ||mu0||_TV.
SiteMetrics site_metrics(const DipoleGrid& grid, const DiscreteMagnetization& mu, const DiscreteMagnetization& mu0,
                         double radius) {
    SiteMetrics m;
    for (const auto& e : mu0.entries()) {
        const double mass = local_mass(grid, mu, grid.position(e.site), radius).mass;
        const double err = std::abs(mass - e.moment.norm());
        m.max_abs = std::max(m.max_abs, err);
        m.max_rel = std::max(m.max_rel, err / e.moment.norm());
    }
    double off = 0.0;
    for (const auto& e : mu.entries()) {
        const Vec3& y = grid.position(e.site);
        const bool near = std::any_of(mu0.entries().begin(), mu0.entries().end(), [&](const MomentEntry& t) {
            return (grid.position(t.site) - y).norm() < radius;
        });
        if (!near) off += e.moment.norm();
    }
    m.off_fraction = off / tv_norm(mu0);
    return m;
}

int cmd_sweep(const SweepArgs& a, std::ostream& out) {
    const auto t0 = Clock::now();
    const fs::path bundle(a.bundle);
    const Scenario s = io::load_bundle(bundle);
    const SolverConfig cfg = a.solver.resolve();
    std::vector<double> lambdas = a.lambdas;
    if (!a.schedule.empty()) {
        if (!a.lambdas.empty()) fail(ErrorKind::Config, "--lambdas and --schedule are exclusive");
        const double count = a.schedule[2];
        if (count < 1 || count != std::floor(count)) fail(ErrorKind::Config, "--schedule count must be a positive integer");
        lambdas = geometric_schedule(a.schedule[0], a.schedule[1], static_cast<std::size_t>(count));
    } else if (lambdas.empty()) {
        lambdas = s.config.lambdas;
    }
    check_lambdas(lambdas);
    if (!strictly_decreasing(lambdas)) fail(ErrorKind::Config, "sweep lambdas must be strictly decreasing");

    ModelOptions mo;
    mo.threads = std::max(1u, a.threads);
    const ForwardModel model = s.model(mo);
    const DataChoice base = select_data(s, a.data);
    const std::uint64_t nseed = noise_seed(s.config.seed);
    std::function<SweepData(double)> data_for;
    if (a.noise_ratio) {
        if (!(*a.noise_ratio >= 0.0)) fail(ErrorKind::Config, "--noise-ratio must be nonnegative");
        data_for = [&](double lambda) {
            NoisyField nf = add_noise(s.field, s.target, {NoiseSpec::Mode::Ratio, *a.noise_ratio, lambda}, nseed);
            return SweepData{std::move(nf.data), nf.noise_norm};
        };
    } else {
        data_for = [&](double) { return SweepData{*base.data, base.noise_norm}; };
    }
    const bool has_ref = !s.mu0.empty();
    SweepOptions opts;
    if (has_ref) opts.reference = &s.mu0;
    const auto points = lambda_sweep(model, lambdas, data_for, cfg, opts);

    const double radius = a.radius.value_or(3.0 * std::min(s.source.lattice().dx, s.source.lattice().dy));
    const bool per_site = has_ref && s.mu0.size() <= 100;
    const fs::path root = a.out.empty() ? bundle / "sweep" : resolve_out(a.out);
    const Units u = units_for(s.config.kappa_mode);
    io::RunManifest top = base_manifest("sweep", bundle, s, mo.threads);
    top.inputs = bundle_inputs(bundle, a.noise_ratio ? std::string("field.csv") : base.file);

    std::string table = "lambda[" + u.lambda + "],tv[" + u.moment + "],rel_tv_distance[1],net_moment_error[" +
                        u.moment + "],local_mass_error_max[" + u.moment +
                        "],local_mass_rel_error_max[1],off_mass_fraction[1],certificate_slack[1]," +
                        "certificate_pass[bool],noise_norm[" + u.field + "],tv_bound[" + u.moment +
                        "],bound_holds[bool],converged[bool],iterations[count]\n";
    bool bad = false, cert_failed = false;
    for (std::size_t i = 0; i < points.size(); ++i) {
        const SweepPoint& p = points[i];
        if (!p.result) {
            out << "lambda " << num(p.lambda) << ": error: " << p.error << "\n";
            table += num(p.lambda) + ",,,,,,,,,,,,0,\n";
            bad = true;
            continue;
        }
        const SolveResult& r = *p.result;
        const SweepData d = data_for(p.lambda);
        const Certificate c = check_optimality(model, d.data, r.mu, p.lambda, cfg.certificate_tol);
        bad |= !r.converged;
        cert_failed |= !c.pass;
        io::RunManifest child = base_manifest("sweep", bundle, s, mo.threads);
        child.inputs = top.inputs;
        top.children.push_back(write_solution(root, i, s, r, c, false, child));

        std::string row = num(p.lambda) + "," + num(tv_norm(r.mu)) + ",";
        row += (p.relative_tv_distance ? num(*p.relative_tv_distance) : "") + ",";
        row += (has_ref ? num((net_moment(r.mu) - net_moment(s.mu0)).norm()) : "") + ",";
        if (per_site) {
            const SiteMetrics sm = site_metrics(s.source, r.mu, s.mu0, radius);
            row += num(sm.max_abs) + "," + num(sm.max_rel) + "," + num(sm.off_fraction) + ",";
        } else {
            row += ",,,";
        }
        row += num(c.slack()) + "," + flag(c.pass) + ",";
        row += (p.noise_norm ? num(*p.noise_norm) : "") + ",";
        row += (p.tv_bound ? num(*p.tv_bound) : "") + ",";
        row += (p.bound_holds ? flag(*p.bound_holds) : "") + ",";
        row += flag(r.converged) + "," + std::to_string(r.iterations) + "\n";
        table += row;
        out << "lambda " << num(p.lambda) << ": tv " << num(tv_norm(r.mu));
        if (p.relative_tv_distance) out << ", relative tv distance " << num(*p.relative_tv_distance);
        out << ", certificate " << (c.pass ? "pass" : "FAIL") << "\n";
    }
    io::write_file(root / "sweep.csv", table);
    top.outputs["sweep.csv"] = io::sha256_hex(table);
    top.wall_seconds = seconds_since(t0);
    io::save_manifest(root / "manifest.json", top);
    if (bad) return kExitNonconvergence;
    return cert_failed ? kExitCertificate : kExitOk;
}

// ---- certify ----------------------------------------------------------------------

struct CertifyArgs {
    std::string bundle;
    std::string result;
    std::optional<double> lambda;
    double tol = 1e-6;
    bool per_site = false;
    std::string data = "auto";
    std::string out;
    unsigned threads = 1;
};

int cmd_certify(const CertifyArgs& a, std::ostream& out) {
    const Scenario s = io::load_bundle(a.bundle);
    const SolveResult r = io::load_result(a.result);
    if (r.mu.grid_id() != s.source.fingerprint() || r.mu.site_count() != s.source.site_count()) {
        fail(ErrorKind::Mismatch, "support mismatch: result was not computed on this bundle's grid");
    }
    ModelOptions mo;
    mo.threads = std::max(1u, a.threads);
    const ForwardModel model = s.model(mo);
    const DataChoice d = select_data(s, a.data);
    const double lambda = a.lambda.value_or(r.lambda);
    const Certificate c = check_optimality(model, *d.data, r.mu, lambda, a.tol);
    const fs::path path = a.out.empty() ? fs::path(a.result).parent_path() / "certificate_check.json" : resolve_out(a.out);
    io::save_certificate(path, c, a.per_site);
    out << "certificate " << (c.pass ? "pass" : "FAIL") << ": lambda " << num(lambda) << ", max |g|/(lambda/2) "
        << num(2.0 * c.max_norm / lambda) << ", max alignment error/lambda " << num(c.max_alignment_error / lambda)
        << ", support " << c.support_size << ", degeneracy set " << c.degeneracy_set.size() << ", violations "
        << c.violations.size() << "\n";
    return c.pass ? kExitOk : kExitCertificate;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Total-variation regularized magnetization reconstruction"};
    app.name("magrecon");
    app.require_subcommand(1);

    GenArgs gen;
    auto* g = app.add_subcommand("gen", "generate a scenario bundle");
    g->add_option("--preset", gen.preset_name, "built-in scenario")
        ->check(CLI::IsMember(preset_names()));
    g->add_option("--config", gen.config, "scenario configuration file");
    g->add_option("--seed", gen.seed, "random seed");
    g->add_option("--noise-sigma", gen.noise_sigma, "Gaussian noise standard deviation");
    g->add_option("--noise-ratio", gen.noise_ratio, "noise norm divided by sqrt(lambda)");
    g->add_option("--noise-lambda", gen.noise_lambda, "lambda used with --noise-ratio");
    g->add_flag("--physical", gen.physical, "physical units (kappa = 1e-7 H/m)");
    g->add_option("--out", gen.out, "bundle directory");

    SolveArgs solve;
    auto* so = app.add_subcommand("solve", "solve for one or more lambda values");
    so->add_option("--bundle", solve.bundle, "scenario bundle directory")->required();
    so->add_option("--lambda", solve.lambdas, "lambda values (comma separated)")->delimiter(',');
    so->add_option("--data", solve.data, "auto, clean or noisy");
    so->add_option("--out", solve.out, "output directory");
    so->add_option("--threads", solve.threads, "threads for operator evaluation");
    so->add_flag("--per-site", solve.per_site, "include per-site certificate values");
    so->add_flag("--cold", solve.cold, "do not warm start across lambda values");
    solve.solver.attach(*so);

    SweepArgs sweep;
    auto* sw = app.add_subcommand("sweep", "warm-started lambda sweep with recovery metrics");
    sw->add_option("--bundle", sweep.bundle, "scenario bundle directory")->required();
    sw->add_option("--lambdas", sweep.lambdas, "decreasing lambda values (comma separated)")->delimiter(',');
    sw->add_option("--schedule", sweep.schedule, "geometric schedule: first,last,count")->delimiter(',')->expected(3);
    sw->add_option("--noise-ratio", sweep.noise_ratio, "inject noise with norm ratio*sqrt(lambda) at each lambda");
    sw->add_option("--radius", sweep.radius, "local mass radius (default 3 source spacings)");
    sw->add_option("--data", sweep.data, "auto, clean or noisy (ignored with --noise-ratio)");
    sw->add_option("--out", sweep.out, "output directory");
    sw->add_option("--threads", sweep.threads, "threads for operator evaluation");
    sweep.solver.attach(*sw);

    CertifyArgs cert;
    auto* ce = app.add_subcommand("certify", "check the optimality certificate of a stored result");
    ce->add_option("--bundle", cert.bundle, "scenario bundle directory")->required();
    ce->add_option("--result", cert.result, "result.bin file")->required();
    ce->add_option("--lambda", cert.lambda, "lambda (default: the result's)");
    ce->add_option("--tol", cert.tol, "certificate tolerance");
    ce->add_flag("--per-site", cert.per_site, "include per-site certificate values");
    ce->add_option("--data", cert.data, "auto, clean or noisy");
    ce->add_option("--out", cert.out, "certificate report path");
    ce->add_option("--threads", cert.threads, "threads for operator evaluation");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (g->parsed()) return cmd_gen(gen, out);
        if (so->parsed()) return cmd_solve(solve, out);
        if (sw->parsed()) return cmd_sweep(sweep, out);
        if (ce->parsed()) return cmd_certify(cert, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitIo;
    }
    return kExitConfig;
}

}  // namespace magrecon::cli
