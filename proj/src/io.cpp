#include "magrecon/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <system_error>

#include <openssl/evp.h>

#include "magrecon/error.hpp"

namespace magrecon::io {

// ---- bytes and digests ----------------------------------------------------

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) fail(ErrorKind::Io, "read failed for '" + path.string() + "'");
    return std::move(ss).str();
}

void write_file(const fs::path& path, std::string_view bytes) {
    std::error_code ec;
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path(), ec);
        if (ec) fail(ErrorKind::Io, "cannot create directory '" + path.parent_path().string() + "': " + ec.message());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorKind::Io, "cannot write '" + tmp.string() + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) fail(ErrorKind::Io, "write failed for '" + tmp.string() + "'");
    }
    fs::rename(tmp, path, ec);
    if (ec) fail(ErrorKind::Io, "cannot move '" + tmp.string() + "' into place: " + ec.message());
}

std::string sha256_hex(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
        fail(ErrorKind::Io, "sha256 failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xf]);
    }
    return out;
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

namespace {

std::string sha256_raw(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
        fail(ErrorKind::Io, "sha256 failed");
    }
    return std::string(reinterpret_cast<const char*>(md.data()), len);
}

}  // namespace

// ---- numbers ----------------------------------------------------------------

std::string format_double(double x) {
    if (!std::isfinite(x)) fail(ErrorKind::Schema, "non-finite value in payload");
    std::array<char, 64> buf{};
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), x, std::chars_format::scientific, 16);
    return std::string(buf.data(), res.ptr);
}

double parse_double(std::string_view text, std::string_view what) {
    while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
    while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r')) text.remove_suffix(1);
    if (!text.empty() && text.front() == '+') text.remove_prefix(1);
    double x = 0.0;
    const auto res = std::from_chars(text.data(), text.data() + text.size(), x);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
        fail(ErrorKind::Schema, "cannot parse number '" + std::string(text) + "' in " + std::string(what));
    }
    if (!std::isfinite(x)) fail(ErrorKind::Schema, "non-finite value in " + std::string(what));
    return x;
}

// ---- json helpers -------------------------------------------------------------

namespace {

std::string join_key(std::string_view where, std::string_view key) {
    return where.empty() ? std::string(key) : std::string(where) + "." + std::string(key);
}

const json& require(const json& j, std::string_view key, std::string_view where) {
    if (!j.is_object() || !j.contains(key)) fail(ErrorKind::Config, "missing config key '" + join_key(where, key) + "'");
    return j.at(key);
}

template <class T>
T get_as(const json& j, std::string_view what) {
    try {
        return j.get<T>();
    } catch (const json::exception&) {
        fail(ErrorKind::Config, "config key '" + std::string(what) + "' has the wrong type");
    }
}

double get_number(const json& j, std::string_view what) {
    if (!j.is_number()) fail(ErrorKind::Config, "config key '" + std::string(what) + "' must be a number");
    const double x = j.get<double>();
    if (!std::isfinite(x)) fail(ErrorKind::Config, "config key '" + std::string(what) + "' is not finite");
    return x;
}

std::vector<double> get_numbers(const json& j, std::string_view what) {
    if (!j.is_array()) fail(ErrorKind::Config, "config key '" + std::string(what) + "' must be an array");
    std::vector<double> out;
    for (const auto& e : j) out.push_back(get_number(e, what));
    return out;
}

Vec3 get_vec3(const json& j, std::string_view what) {
    const auto v = get_numbers(j, what);
    if (v.size() != 3) fail(ErrorKind::Config, "config key '" + std::string(what) + "' must have 3 entries");
    return {v[0], v[1], v[2]};
}

json vec3_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

json parse_json(std::string_view text, const std::string& origin) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        fail(ErrorKind::Schema, "malformed JSON in " + origin + ": " + e.what());
    }
}

json load_json(const fs::path& path) { return parse_json(read_file(path), "'" + path.string() + "'"); }

std::string dump(const json& j) { return j.dump(2) + "\n"; }

std::vector<std::string> mask_rows(const std::vector<bool>& mask, std::size_t nx, std::size_t ny) {
    std::vector<std::string> rows(ny, std::string(nx, '0'));
    for (std::size_t iy = 0; iy < ny; ++iy) {
        for (std::size_t ix = 0; ix < nx; ++ix) {
            if (mask[iy * nx + ix]) rows[iy][ix] = '1';
        }
    }
    return rows;
}

std::vector<bool> mask_from_rows(const json& j, std::size_t nx, std::size_t ny, std::string_view what) {
    if (!j.is_array() || j.size() != ny) {
        fail(ErrorKind::Config, "'" + std::string(what) + "' must be an array of " + std::to_string(ny) + " rows");
    }
    std::vector<bool> mask(nx * ny, false);
    for (std::size_t iy = 0; iy < ny; ++iy) {
        const auto row = get_as<std::string>(j[iy], what);
        if (row.size() != nx) fail(ErrorKind::Config, "'" + std::string(what) + "' row length must be " + std::to_string(nx));
        for (std::size_t ix = 0; ix < nx; ++ix) {
            if (row[ix] != '0' && row[ix] != '1') fail(ErrorKind::Config, "'" + std::string(what) + "' rows may only contain 0 and 1");
            mask[iy * nx + ix] = row[ix] == '1';
        }
    }
    return mask;
}

}  // namespace

// ---- configuration ------------------------------------------------------------

double unit_scale(const json& units) {
    if (units.is_number()) {
        const double s = units.get<double>();
        if (!(s > 0.0) || !std::isfinite(s)) fail(ErrorKind::Config, "units must be positive");
        return s;
    }
    if (!units.is_string()) fail(ErrorKind::Config, "units must be a string or a number");
    const auto u = units.get<std::string>();
    if (u == "m") return 1.0;
    if (u == "mm") return 1e-3;
    if (u == "um") return 1e-6;
    if (u == "nm") return 1e-9;
    fail(ErrorKind::Config, "unknown units '" + u + "'");
}

PlaneLattice lattice_from_json(const json& spec, std::string_view where) {
    const double scale = spec.is_object() && spec.contains("units") ? unit_scale(spec.at("units")) : 1.0;
    const std::string w(where);
    const auto origin = get_numbers(require(spec, "origin", w), join_key(w, "origin"));
    if (origin.size() != 2 && origin.size() != 3) fail(ErrorKind::Config, "'" + join_key(w, "origin") + "' must have 2 or 3 entries");

    const json& sp = require(spec, "spacing", w);
    double dx = 0.0, dy = 0.0;
    if (sp.is_array()) {
        const auto s = get_numbers(sp, join_key(w, "spacing"));
        if (s.size() != 2) fail(ErrorKind::Config, "'" + join_key(w, "spacing") + "' must have 2 entries");
        dx = s[0];
        dy = s[1];
    } else {
        dx = dy = get_number(sp, join_key(w, "spacing"));
    }

    const json& counts = require(spec, "counts", w);
    if (!counts.is_array() || counts.size() != 2 || !counts[0].is_number_integer() || !counts[1].is_number_integer() ||
        counts[0].get<long long>() <= 0 || counts[1].get<long long>() <= 0) {
        fail(ErrorKind::Config, "'" + join_key(w, "counts") + "' must be two positive integers");
    }

    double height = 0.0;
    if (spec.contains("plane_height")) {
        height = get_number(spec.at("plane_height"), join_key(w, "plane_height"));
        if (origin.size() == 3 && origin[2] != height) {
            fail(ErrorKind::Config, "'" + join_key(w, "origin") + "' z disagrees with plane_height");
        }
    } else if (origin.size() == 3) {
        height = origin[2];
    } else {
        require(spec, "plane_height", w);
    }

    PlaneLattice l;
    l.x0 = origin[0] * scale;
    l.y0 = origin[1] * scale;
    l.dx = dx * scale;
    l.dy = dy * scale;
    l.nx = counts[0].get<std::size_t>();
    l.ny = counts[1].get<std::size_t>();
    l.height = height * scale;
    l.validate();
    return l;
}

json lattice_to_json(const PlaneLattice& l) {
    json j;
    j["origin"] = json::array({l.x0, l.y0});
    j["spacing"] = json::array({l.dx, l.dy});
    j["counts"] = json::array({l.nx, l.ny});
    j["plane_height"] = l.height;
    j["units"] = "m";
    return j;
}

std::vector<bool> load_mask_file(const fs::path& path, std::size_t nx, std::size_t ny) {
    const std::string text = read_file(path);
    std::vector<bool> mask;
    const auto bad = [&](const std::string& why) { fail(ErrorKind::Schema, "mask file '" + path.string() + "': " + why); };

    if (text.size() >= 2 && text[0] == 'P' && (text[1] == '2' || text[1] == '5')) {
        std::size_t pos = 2;
        auto next_token = [&]() -> std::string {
            while (pos < text.size()) {
                if (text[pos] == '#') {
                    while (pos < text.size() && text[pos] != '\n') ++pos;
                } else if (std::isspace(static_cast<unsigned char>(text[pos]))) {
                    ++pos;
                } else {
                    break;
                }
            }
            const std::size_t start = pos;
            while (pos < text.size() && !std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
            if (start == pos) bad("unexpected end of header");
            return text.substr(start, pos - start);
        };
        auto to_size = [&](const std::string& s) {
            std::size_t v = 0;
            const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
            if (r.ec != std::errc() || r.ptr != s.data() + s.size()) bad("bad integer '" + s + "'");
            return v;
        };
        const std::size_t w = to_size(next_token());
        const std::size_t h = to_size(next_token());
        const std::size_t maxval = to_size(next_token());
        if (w != nx || h != ny) bad("size " + std::to_string(w) + "x" + std::to_string(h) + " does not match counts");
        if (maxval == 0 || maxval > 65535) bad("invalid maxval");
        mask.assign(nx * ny, false);
        if (text[1] == '2') {
            for (std::size_t i = 0; i < nx * ny; ++i) mask[i] = to_size(next_token()) != 0;
        } else {
            ++pos;  // single whitespace after maxval
            const std::size_t bytes = maxval < 256 ? 1 : 2;
            if (text.size() < pos + bytes * nx * ny) bad("truncated raster");
            for (std::size_t i = 0; i < nx * ny; ++i) {
                unsigned v = static_cast<unsigned char>(text[pos + bytes * i]);
                if (bytes == 2) v = (v << 8) | static_cast<unsigned char>(text[pos + 2 * i + 1]);
                mask[i] = v != 0;
            }
        }
        return mask;
    }

    std::istringstream in(text);
    std::string line;
    std::size_t row = 0;
    mask.assign(nx * ny, false);
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (row >= ny) bad("more than " + std::to_string(ny) + " rows");
        std::size_t col = 0;
        std::istringstream cells(line);
        std::string cell;
        while (std::getline(cells, cell, ',')) {
            if (col >= nx) bad("row " + std::to_string(row) + " has more than " + std::to_string(nx) + " columns");
            const double v = parse_double(cell, "mask file");
            if (v != 0.0 && v != 1.0) bad("values must be 0 or 1");
            mask[row * nx + col] = v == 1.0;
            ++col;
        }
        if (col != nx) bad("row " + std::to_string(row) + " has " + std::to_string(col) + " columns");
        ++row;
    }
    if (row != ny) bad("expected " + std::to_string(ny) + " rows, found " + std::to_string(row));
    return mask;
}

std::string to_string(KappaMode mode) { return mode == KappaMode::Physical ? "physical" : "normalized"; }

KappaMode kappa_mode_from_string(std::string_view s) {
    if (s == "physical") return KappaMode::Physical;
    if (s == "normalized") return KappaMode::Normalized;
    fail(ErrorKind::Config, "unknown kappa mode '" + std::string(s) + "'");
}

namespace {

std::string to_string(AmplitudeKind k) {
    switch (k) {
        case AmplitudeKind::Constant: return "constant";
        case AmplitudeKind::Random: return "random";
        case AmplitudeKind::Bump: return "bump";
    }
    return "constant";
}

AmplitudeKind amplitude_kind(std::string_view s) {
    if (s == "constant") return AmplitudeKind::Constant;
    if (s == "random") return AmplitudeKind::Random;
    if (s == "bump") return AmplitudeKind::Bump;
    fail(ErrorKind::Config, "unknown amplitude kind '" + std::string(s) + "'");
}

std::string to_string(NoiseSpec::Mode m) {
    switch (m) {
        case NoiseSpec::Mode::None: return "none";
        case NoiseSpec::Mode::Sigma: return "sigma";
        case NoiseSpec::Mode::Ratio: return "ratio";
    }
    return "none";
}

NoiseSpec::Mode noise_mode(std::string_view s) {
    if (s == "none") return NoiseSpec::Mode::None;
    if (s == "sigma") return NoiseSpec::Mode::Sigma;
    if (s == "ratio") return NoiseSpec::Mode::Ratio;
    fail(ErrorKind::Config, "unknown noise mode '" + std::string(s) + "'");
}

std::size_t get_count(const json& j, std::string_view what) {
    if (!j.is_number_integer() || j.get<long long>() < 0) {
        fail(ErrorKind::Config, "config key '" + std::string(what) + "' must be a nonnegative integer");
    }
    return j.get<std::size_t>();
}

}  // namespace

ScenarioConfig scenario_config_from_json(const json& j, const fs::path& base_dir) {
    if (!j.is_object()) fail(ErrorKind::Config, "configuration must be a JSON object");
    ScenarioConfig c;
    const double scale = j.contains("units") ? unit_scale(j.at("units")) : 1.0;
    c.name = j.contains("name") ? get_as<std::string>(j.at("name"), "name") : std::string("custom");
    c.seed = j.contains("seed") ? get_as<std::uint64_t>(j.at("seed"), "seed") : 0;

    auto grid = [&](const char* key) {
        json spec = require(j, key, "");
        if (!spec.contains("units")) spec["units"] = scale;
        return spec;
    };
    const json src = grid("source");
    c.source = lattice_from_json(src, "source");
    if (src.contains("mask")) {
        c.mask = mask_from_rows(src.at("mask"), c.source.nx, c.source.ny, "source.mask");
    } else if (src.contains("mask_file")) {
        fs::path p = get_as<std::string>(src.at("mask_file"), "source.mask_file");
        if (p.is_relative()) p = base_dir / p;
        c.mask = load_mask_file(p, c.source.nx, c.source.ny);
    } else if (src.contains("mask_rects")) {
        for (const auto& r : src.at("mask_rects")) {
            if (!r.is_array() || r.size() != 4) fail(ErrorKind::Config, "'source.mask_rects' entries are [ix, iy, w, h]");
            c.mask_rects.push_back({get_count(r[0], "source.mask_rects"), get_count(r[1], "source.mask_rects"),
                                    get_count(r[2], "source.mask_rects"), get_count(r[3], "source.mask_rects")});
        }
    }
    c.measurement = lattice_from_json(grid("measurement"), "measurement");
    c.direction = j.contains("direction") ? get_vec3(j.at("direction"), "direction") : Vec3::UnitZ();
    c.kappa_mode = j.contains("kappa_mode") ? kappa_mode_from_string(get_as<std::string>(j.at("kappa_mode"), "kappa_mode"))
                                            : KappaMode::Normalized;

    const json& gen = require(j, "generator", "");
    const auto type = get_as<std::string>(require(gen, "type", "generator"), "generator.type");
    if (type == "sparse") {
        SparseSpec s;
        s.n_dipoles = get_count(require(gen, "n_dipoles", "generator"), "generator.n_dipoles");
        s.min_separation = get_number(require(gen, "min_separation", "generator"), "generator.min_separation") * scale;
        s.moment_scale = gen.contains("moment_scale") ? get_number(gen.at("moment_scale"), "generator.moment_scale") : 1.0;
        c.generator = s;
    } else if (type == "unidirectional") {
        UnidirectionalSpec u;
        const json& dirs = require(gen, "directions", "generator");
        if (!dirs.is_array()) fail(ErrorKind::Config, "'generator.directions' must be an array of 3-vectors");
        for (const auto& d : dirs) u.directions.push_back(get_vec3(d, "generator.directions"));
        if (gen.contains("amplitude")) {
            const json& a = gen.at("amplitude");
            u.amplitude.kind = amplitude_kind(get_as<std::string>(require(a, "kind", "generator.amplitude"), "generator.amplitude.kind"));
            u.amplitude.lo = a.contains("lo") ? get_number(a.at("lo"), "generator.amplitude.lo") : 1.0;
            u.amplitude.hi = a.contains("hi") ? get_number(a.at("hi"), "generator.amplitude.hi") : 1.0;
        }
        c.generator = u;
    } else {
        fail(ErrorKind::Config, "unknown generator type '" + type + "'");
    }

    if (j.contains("noise")) {
        const json& n = j.at("noise");
        c.noise.mode = noise_mode(get_as<std::string>(require(n, "mode", "noise"), "noise.mode"));
        if (c.noise.mode != NoiseSpec::Mode::None) {
            c.noise.value = get_number(require(n, "value", "noise"), "noise.value");
        }
        if (c.noise.mode == NoiseSpec::Mode::Ratio) c.noise.lambda = get_number(require(n, "lambda", "noise"), "noise.lambda");
    }
    if (j.contains("lambdas")) c.lambdas = get_numbers(j.at("lambdas"), "lambdas");
    return c;
}

json scenario_config_to_json(const ScenarioConfig& c) {
    json j;
    j["name"] = c.name;
    j["seed"] = c.seed;
    j["units"] = "m";
    json src = lattice_to_json(c.source);
    if (c.mask) {
        src["mask"] = mask_rows(*c.mask, c.source.nx, c.source.ny);
    } else if (!c.mask_rects.empty()) {
        json rects = json::array();
        for (const auto& r : c.mask_rects) rects.push_back(json::array({r.ix, r.iy, r.w, r.h}));
        src["mask_rects"] = rects;
    }
    j["source"] = src;
    j["measurement"] = lattice_to_json(c.measurement);
    j["direction"] = vec3_json(c.direction);
    j["kappa_mode"] = to_string(c.kappa_mode);
    if (const auto* s = std::get_if<SparseSpec>(&c.generator)) {
        j["generator"] = {{"type", "sparse"},
                          {"n_dipoles", s->n_dipoles},
                          {"min_separation", s->min_separation},
                          {"moment_scale", s->moment_scale}};
    } else {
        const auto& u = std::get<UnidirectionalSpec>(c.generator);
        json dirs = json::array();
        for (const auto& d : u.directions) dirs.push_back(vec3_json(d));
        j["generator"] = {{"type", "unidirectional"},
                          {"directions", dirs},
                          {"amplitude", {{"kind", to_string(u.amplitude.kind)}, {"lo", u.amplitude.lo}, {"hi", u.amplitude.hi}}}};
    }
    j["noise"] = {{"mode", to_string(c.noise.mode)}, {"value", c.noise.value}, {"lambda", c.noise.lambda}};
    j["lambdas"] = c.lambdas;
    return j;
}

ScenarioConfig load_scenario_config(const fs::path& path) {
    return scenario_config_from_json(load_json(path), path.parent_path());
}

SolverConfig solver_config_from_json(const json& j) {
    SolverConfig c;
    if (j.is_null()) return c;
    if (!j.is_object()) fail(ErrorKind::Config, "'solver' must be an object");
    if (j.contains("max_iter")) c.max_iter = get_count(j.at("max_iter"), "solver.max_iter");
    if (j.contains("rel_obj_tol")) c.rel_obj_tol = get_number(j.at("rel_obj_tol"), "solver.rel_obj_tol");
    if (j.contains("certificate_tol")) c.certificate_tol = get_number(j.at("certificate_tol"), "solver.certificate_tol");
    if (j.contains("in_crowd_batch")) c.in_crowd_batch = get_count(j.at("in_crowd_batch"), "solver.in_crowd_batch");
    if (j.contains("max_passes")) c.max_passes = get_count(j.at("max_passes"), "solver.max_passes");
    if (j.contains("restart")) c.restart = get_as<bool>(j.at("restart"), "solver.restart");
    if (j.contains("seed")) c.seed = get_as<std::uint64_t>(j.at("seed"), "solver.seed");
    c.validate();
    return c;
}

json solver_config_to_json(const SolverConfig& c) {
    return {{"max_iter", c.max_iter},       {"rel_obj_tol", c.rel_obj_tol}, {"certificate_tol", c.certificate_tol},
            {"in_crowd_batch", c.in_crowd_batch}, {"max_passes", c.max_passes}, {"restart", c.restart},
            {"seed", c.seed}};
}

// ---- grids ----------------------------------------------------------------------

void save_dipole_grid(const fs::path& path, const DipoleGrid& grid) {
    json j = lattice_to_json(grid.lattice());
    j["mask"] = mask_rows(grid.mask(), grid.lattice().nx, grid.lattice().ny);
    write_file(path, dump(j));
}

DipoleGrid load_dipole_grid(const fs::path& path) {
    const json j = load_json(path);
    const PlaneLattice l = lattice_from_json(j, "");
    std::optional<std::vector<bool>> mask;
    if (j.contains("mask")) mask = mask_from_rows(j.at("mask"), l.nx, l.ny, "mask");
    return DipoleGrid::build(l, std::move(mask));
}

void save_measurement_grid(const fs::path& path, const MeasurementGrid& grid) {
    json j = lattice_to_json(grid.lattice());
    if (!grid.uniform_weights()) j["weights"] = std::vector<double>(grid.weights().begin(), grid.weights().end());
    write_file(path, dump(j));
}

MeasurementGrid load_measurement_grid(const fs::path& path) {
    const json j = load_json(path);
    const PlaneLattice l = lattice_from_json(j, "");
    std::optional<std::vector<double>> w;
    if (j.contains("weights")) w = get_numbers(j.at("weights"), "weights");
    return MeasurementGrid::build(l, std::move(w));
}

// ---- CSV ------------------------------------------------------------------------

namespace {

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t k = s.find(sep, start);
        if (k == std::string_view::npos) {
            out.push_back(s.substr(start));
            return out;
        }
        out.push_back(s.substr(start, k - start));
        start = k + 1;
    }
}

std::string join(const std::vector<std::string_view>& parts) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += ',';
        out += parts[i];
    }
    return out;
}

// Rows of a CSV with an exact expected header; empty trailing lines ignored.
std::vector<std::vector<double>> parse_csv(std::string_view text, const std::vector<std::string_view>& expected,
                                           std::string_view what) {
    std::vector<std::string_view> lines = split(text, '\n');
    while (!lines.empty() && (lines.back().empty() || lines.back() == "\r")) lines.pop_back();
    if (lines.empty()) fail(ErrorKind::Schema, std::string(what) + ": empty file");
    auto strip = [](std::string_view l) {
        if (!l.empty() && l.back() == '\r') l.remove_suffix(1);
        return l;
    };
    const auto header = split(strip(lines[0]), ',');
    if (header != expected) {
        std::string report = std::string(what) + ": column mismatch, expected [" + join(expected) + "], found [" +
                             join(header) + "]";
        for (std::size_t i = 0; i < std::max(header.size(), expected.size()); ++i) {
            const std::string_view want = i < expected.size() ? expected[i] : "(none)";
            const std::string_view got = i < header.size() ? header[i] : "(missing)";
            if (want != got) {
                report += "; column " + std::to_string(i + 1) + ": expected '" + std::string(want) + "', found '" +
                          std::string(got) + "'";
            }
        }
        fail(ErrorKind::Schema, report);
    }
    std::vector<std::vector<double>> rows;
    rows.reserve(lines.size() - 1);
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto cells = split(strip(lines[i]), ',');
        if (cells.size() != expected.size()) {
            fail(ErrorKind::Schema, std::string(what) + ": line " + std::to_string(i + 1) + " has " +
                                        std::to_string(cells.size()) + " columns, expected " +
                                        std::to_string(expected.size()));
        }
        std::vector<double> row;
        row.reserve(cells.size());
        for (std::size_t k = 0; k < cells.size(); ++k) {
            row.push_back(parse_double(cells[k], std::string(what) + " line " + std::to_string(i + 1) + " column '" +
                                                     std::string(expected[k]) + "'"));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

void append_row(std::string& out, std::initializer_list<double> values) {
    bool first = true;
    for (double v : values) {
        if (!first) out += ',';
        out += format_double(v);
        first = false;
    }
    out += '\n';
}

}  // namespace

// ---- magnetizations ---------------------------------------------------------------

std::string magnetization_csv(const DipoleGrid& grid, const DiscreteMagnetization& mu) {
    if (mu.grid_id() != grid.fingerprint() || mu.site_count() != grid.site_count()) {
        fail(ErrorKind::Mismatch, "support mismatch");
    }
    std::string out = "x,y,z,mx,my,mz\n";
    for (const auto& e : mu.entries()) {
        const Vec3& y = grid.position(e.site);
        append_row(out, {y.x(), y.y(), y.z(), e.moment.x(), e.moment.y(), e.moment.z()});
    }
    return out;
}

void save_magnetization(const fs::path& path, const DipoleGrid& grid, const DiscreteMagnetization& mu) {
    write_file(path, magnetization_csv(grid, mu));
}

DiscreteMagnetization parse_magnetization_csv(std::string_view text, const DipoleGrid& grid) {
    const auto rows = parse_csv(text, {"x", "y", "z", "mx", "my", "mz"}, "magnetization");
    const double tol = 1e-9 * std::min(grid.lattice().dx, grid.lattice().dy);
    std::vector<MomentEntry> entries;
    entries.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        const auto site = grid.snap(Vec3(r[0], r[1], r[2]), tol);
        if (!site) {
            fail(ErrorKind::Mismatch, "magnetization line " + std::to_string(i + 2) + ": position is not a grid site");
        }
        entries.push_back({*site, Vec3(r[3], r[4], r[5])});
    }
    return DiscreteMagnetization::on(grid, std::move(entries));
}

DiscreteMagnetization load_magnetization(const fs::path& path, const DipoleGrid& grid) {
    return parse_magnetization_csv(read_file(path), grid);
}

// ---- fields -----------------------------------------------------------------------

std::string field_csv(const MeasurementGrid& q, const FieldData& f) {
    if (f.size() != q.size()) fail(ErrorKind::Mismatch, "measurement mismatch");
    std::string out = "x,y,z,b\n";
    out.reserve(out.size() + q.size() * 96);
    for (std::size_t p = 0; p < q.size(); ++p) {
        const Vec3& x = q.position(p);
        append_row(out, {x.x(), x.y(), x.z(), f.values[p]});
    }
    return out;
}

FieldData parse_field_csv(std::string_view text, const MeasurementGrid& q) {
    const auto rows = parse_csv(text, {"x", "y", "z", "b"}, "field");
    if (rows.size() != q.size()) {
        fail(ErrorKind::Mismatch, "field has " + std::to_string(rows.size()) + " rows, measurement grid has " +
                                      std::to_string(q.size()) + " points");
    }
    const double tol = 1e-9 * std::min(q.lattice().dx, q.lattice().dy);
    FieldData f;
    f.values.reserve(rows.size());
    for (std::size_t p = 0; p < rows.size(); ++p) {
        const Vec3 x(rows[p][0], rows[p][1], rows[p][2]);
        if ((x - q.position(p)).cwiseAbs().maxCoeff() > tol) {
            fail(ErrorKind::Mismatch, "field line " + std::to_string(p + 2) + ": position differs from measurement point");
        }
        f.values.push_back(rows[p][3]);
    }
    return f;
}

namespace {

fs::path sidecar(const fs::path& path) {
    fs::path s = path;
    s += ".json";
    return s;
}

}  // namespace

void save_field(const fs::path& path, const MeasurementGrid& q, const FieldData& f, const FieldMeta& meta) {
    const std::string csv = field_csv(q, f);
    write_file(path, csv);
    json j;
    j["direction"] = vec3_json(meta.direction);
    j["kappa_mode"] = to_string(meta.kappa_mode);
    j["grid"] = lattice_to_json(meta.grid);
    j["seed"] = meta.seed;
    j["sha256"] = sha256_hex(csv);
    write_file(sidecar(path), dump(j));
}

FieldData load_field(const fs::path& path, const MeasurementGrid& q) {
    const std::string csv = read_file(path);
    if (fs::exists(sidecar(path))) {
        const json j = load_json(sidecar(path));
        if (!j.contains("sha256") || j.at("sha256") != sha256_hex(csv)) {
            fail(ErrorKind::Checksum, "checksum mismatch for '" + path.string() + "'");
        }
    }
    return parse_field_csv(csv, q);
}

FieldMeta load_field_meta(const fs::path& path) {
    const json j = load_json(sidecar(path));
    FieldMeta m;
    m.direction = get_vec3(require(j, "direction", ""), "direction");
    m.kappa_mode = kappa_mode_from_string(get_as<std::string>(require(j, "kappa_mode", ""), "kappa_mode"));
    m.grid = lattice_from_json(require(j, "grid", ""), "grid");
    m.seed = get_as<std::uint64_t>(require(j, "seed", ""), "seed");
    return m;
}

// ---- solver results -----------------------------------------------------------------

namespace {

constexpr std::string_view kResultMagic = "MGRRES01";
constexpr std::size_t kDigestSize = 32;

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
    }
    void f64(double v) {
        if (!std::isfinite(v)) fail(ErrorKind::Schema, "non-finite value in payload");
        u64(std::bit_cast<std::uint64_t>(v));
    }
    void raw(std::string_view s) { buf_.append(s); }
    std::string& str() { return buf_; }

private:
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string_view bytes) : s_(bytes) {}
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(s_[pos_++]);
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    double f64() {
        const double v = std::bit_cast<double>(u64());
        if (!std::isfinite(v)) fail(ErrorKind::Schema, "non-finite value in payload");
        return v;
    }
    std::size_t count(std::size_t element_size) {
        const std::uint64_t n = u64();
        if (n > (s_.size() - pos_) / element_size) fail(ErrorKind::Schema, "result payload: length field out of range");
        return static_cast<std::size_t>(n);
    }
    bool done() const { return pos_ == s_.size(); }

private:
    void need(std::size_t n) {
        if (s_.size() - pos_ < n) fail(ErrorKind::Schema, "result payload ended early");
    }
    std::string_view s_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string encode_result(const SolveResult& r) {
    ByteWriter w;
    w.raw(kResultMagic);
    w.f64(r.lambda);
    w.u64(r.mu.site_count());
    w.u64(r.mu.grid_id());
    w.u64(r.mu.size());
    for (const auto& e : r.mu.entries()) {
        w.u64(e.site);
        w.f64(e.moment.x());
        w.f64(e.moment.y());
        w.f64(e.moment.z());
    }
    w.u64(r.objective_trace.size());
    for (double v : r.objective_trace) w.f64(v);
    w.u64(r.residual.size());
    for (double v : r.residual.values) w.f64(v);
    w.f64(r.objective);
    w.u64(r.iterations);
    w.u64(r.active_set_passes);
    w.u8(r.converged ? 1 : 0);
    w.u8(static_cast<std::uint8_t>(r.reason));
    w.raw(sha256_raw(w.str()));
    return std::move(w.str());
}

SolveResult decode_result(std::string_view bytes) {
    if (bytes.size() < kResultMagic.size() + kDigestSize) fail(ErrorKind::Checksum, "result file truncated");
    const std::string_view body = bytes.substr(0, bytes.size() - kDigestSize);
    if (sha256_raw(body) != bytes.substr(bytes.size() - kDigestSize)) {
        fail(ErrorKind::Checksum, "result file checksum mismatch");
    }
    if (body.substr(0, kResultMagic.size()) != kResultMagic) fail(ErrorKind::Schema, "not a result file");
    ByteReader in(body.substr(kResultMagic.size()));
    SolveResult r;
    r.lambda = in.f64();
    const std::uint64_t site_count = in.u64();
    const std::uint64_t grid_id = in.u64();
    const std::size_t n = in.count(32);
    std::vector<MomentEntry> entries;
    entries.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t site = in.u64();
        const double x = in.f64(), y = in.f64(), z = in.f64();
        entries.push_back({static_cast<std::size_t>(site), Vec3(x, y, z)});
    }
    r.mu = DiscreteMagnetization(static_cast<std::size_t>(site_count), grid_id, std::move(entries));
    r.objective_trace.resize(in.count(8));
    for (double& v : r.objective_trace) v = in.f64();
    r.residual.values.resize(in.count(8));
    for (double& v : r.residual.values) v = in.f64();
    r.objective = in.f64();
    r.iterations = in.u64();
    r.active_set_passes = in.u64();
    r.converged = in.u8() != 0;
    const std::uint8_t reason = in.u8();
    if (reason > static_cast<std::uint8_t>(StopReason::MaxPasses)) fail(ErrorKind::Schema, "unknown stop reason");
    r.reason = static_cast<StopReason>(reason);
    if (!in.done()) fail(ErrorKind::Schema, "trailing bytes in result file");
    return r;
}

void save_result(const fs::path& path, const SolveResult& r) { write_file(path, encode_result(r)); }

SolveResult load_result(const fs::path& path) { return decode_result(read_file(path)); }

// ---- certificates -------------------------------------------------------------------

json certificate_to_json(const Certificate& c, bool per_site) {
    json j;
    j["lambda"] = c.lambda;
    j["tol"] = c.tol;
    j["max_norm"] = c.max_norm;
    j["max_off_support_norm"] = c.max_off_support_norm;
    j["max_alignment_error"] = c.max_alignment_error;
    j["support_size"] = c.support_size;
    j["degeneracy_set"] = c.degeneracy_set;
    j["slack"] = c.slack();
    j["pass"] = c.pass;
    json v = json::array();
    for (const auto& x : c.violations) {
        v.push_back({{"site", x.site}, {"kind", x.kind == ViolationKind::Alignment ? "alignment" : "norm"}, {"value", x.value}});
    }
    j["violations"] = v;
    if (per_site) {
        json s = json::array();
        for (const auto& g : c.site_values) s.push_back(vec3_json(g));
        j["site_values"] = s;
    }
    return j;
}

Certificate certificate_from_json(const json& j) {
    Certificate c;
    try {
        c.lambda = j.at("lambda").get<double>();
        c.tol = j.at("tol").get<double>();
        c.max_norm = j.at("max_norm").get<double>();
        c.max_off_support_norm = j.at("max_off_support_norm").get<double>();
        c.max_alignment_error = j.at("max_alignment_error").get<double>();
        c.support_size = j.at("support_size").get<std::size_t>();
        c.degeneracy_set = j.at("degeneracy_set").get<std::vector<std::size_t>>();
        c.pass = j.at("pass").get<bool>();
        for (const auto& v : j.at("violations")) {
            const auto kind = v.at("kind").get<std::string>();
            if (kind != "alignment" && kind != "norm") fail(ErrorKind::Schema, "unknown violation kind '" + kind + "'");
            c.violations.push_back({v.at("site").get<std::size_t>(),
                                    kind == "alignment" ? ViolationKind::Alignment : ViolationKind::Norm,
                                    v.at("value").get<double>()});
        }
        if (j.contains("site_values")) {
            for (const auto& g : j.at("site_values")) {
                c.site_values.emplace_back(g.at(0).get<double>(), g.at(1).get<double>(), g.at(2).get<double>());
            }
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::Schema, std::string("certificate: ") + e.what());
    }
    return c;
}

void save_certificate(const fs::path& path, const Certificate& c, bool per_site) {
    write_file(path, dump(certificate_to_json(c, per_site)));
}

Certificate load_certificate(const fs::path& path) { return certificate_from_json(load_json(path)); }

std::string moment_summary_csv(const MomentSummary& s) {
    std::string out = "component,tv,mx,my,mz\n";
    for (const auto& c : s.per_component) {
        out += std::to_string(c.component) + ",";
        append_row(out, {c.tv, c.net_moment.x(), c.net_moment.y(), c.net_moment.z()});
    }
    out += "total,";
    append_row(out, {s.tv, s.net_moment.x(), s.net_moment.y(), s.net_moment.z()});
    return out;
}

// ---- scenario bundles -------------------------------------------------------------

void save_bundle(const fs::path& dir, const Scenario& s) {
    const std::string config = dump(scenario_config_to_json(s.config));
    const std::string mu0 = magnetization_csv(s.source, s.mu0);
    const std::string field = field_csv(s.target, s.field);
    write_file(dir / "config.json", config);
    write_file(dir / "mu0.csv", mu0);
    write_file(dir / "field.csv", field);

    json meta;
    meta["name"] = s.config.name;
    meta["seed"] = s.config.seed;
    meta["kappa_mode"] = to_string(s.config.kappa_mode);
    meta["kappa"] = s.kappa;
    meta["direction"] = vec3_json(s.direction.vec());
    meta["noise_norm"] = s.noise_norm;
    meta["noise"] = {{"mode", to_string(s.config.noise.mode)}, {"value", s.config.noise.value}, {"lambda", s.config.noise.lambda}};
    meta["n_dipoles"] = s.mu0.size();
    meta["components"] = s.source.component_count();
    json sums = {{"config.json", sha256_hex(config)}, {"mu0.csv", sha256_hex(mu0)}, {"field.csv", sha256_hex(field)}};
    if (s.noisy) {
        const std::string noisy = field_csv(s.target, *s.noisy);
        write_file(dir / "field_noisy.csv", noisy);
        sums["field_noisy.csv"] = sha256_hex(noisy);
    } else {
        std::error_code ec;
        fs::remove(dir / "field_noisy.csv", ec);
    }
    meta["sha256"] = sums;
    meta["version"] = std::string(kToolVersion);
    write_file(dir / "meta.json", dump(meta));
}

Scenario load_bundle(const fs::path& dir) {
    if (!fs::is_directory(dir)) fail(ErrorKind::Io, "bundle directory '" + dir.string() + "' not found");
    const json meta = load_json(dir / "meta.json");
    const json& sums = require(meta, "sha256", "meta");
    auto checked = [&](const std::string& name) {
        const std::string bytes = read_file(dir / name);
        if (!sums.contains(name) || sums.at(name) != sha256_hex(bytes)) {
            fail(ErrorKind::Checksum, "checksum mismatch for '" + (dir / name).string() + "'");
        }
        return bytes;
    };
    const std::string config_text = checked("config.json");
    const ScenarioConfig config = scenario_config_from_json(parse_json(config_text, "config.json"), dir);
    DipoleGrid source = DipoleGrid::build(config.source, config.resolved_mask());
    MeasurementGrid target = MeasurementGrid::build(config.measurement);
    DiscreteMagnetization mu0 = parse_magnetization_csv(checked("mu0.csv"), source);
    FieldData field = parse_field_csv(checked("field.csv"), target);
    Scenario s{config, std::move(source), std::move(target), Direction(config.direction),
               kappa_for(config.kappa_mode), std::move(mu0), std::move(field), {}, 0.0};
    if (sums.contains("field_noisy.csv")) s.noisy = parse_field_csv(checked("field_noisy.csv"), s.target);
    s.noise_norm = get_number(require(meta, "noise_norm", "meta"), "meta.noise_norm");
    return s;
}

// ---- run manifests ----------------------------------------------------------------

json manifest_to_json(const RunManifest& m) {
    return {{"tool", m.tool},
            {"version", m.version},
            {"command", m.command},
            {"config_hash", m.config_hash},
            {"inputs", m.inputs},
            {"outputs", m.outputs},
            {"seed", m.seed},
            {"kappa_mode", to_string(m.kappa_mode)},
            {"threads", m.threads},
            {"wall_seconds", m.wall_seconds},
            {"children", m.children}};
}

RunManifest manifest_from_json(const json& j) {
    RunManifest m;
    try {
        m.tool = j.at("tool").get<std::string>();
        m.version = j.at("version").get<std::string>();
        m.command = j.at("command").get<std::string>();
        m.config_hash = j.at("config_hash").get<std::string>();
        m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
        m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.kappa_mode = kappa_mode_from_string(j.at("kappa_mode").get<std::string>());
        m.threads = j.at("threads").get<unsigned>();
        m.wall_seconds = j.at("wall_seconds").get<double>();
        m.children = j.at("children").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        fail(ErrorKind::Schema, std::string("manifest: ") + e.what());
    }
    return m;
}

void save_manifest(const fs::path& path, const RunManifest& m) { write_file(path, dump(manifest_to_json(m))); }

RunManifest load_manifest(const fs::path& path) { return manifest_from_json(load_json(path)); }

}  // namespace magrecon::io
