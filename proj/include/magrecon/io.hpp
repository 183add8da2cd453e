#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "magrecon/certificate.hpp"
#include "magrecon/fields.hpp"
#include "magrecon/geometry.hpp"
#include "magrecon/measures.hpp"
#include "magrecon/scenarios.hpp"
#include "magrecon/solver.hpp"

namespace magrecon::io {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr std::string_view kToolVersion = "1.0.0";

// ---- bytes and digests ----------------------------------------------------

std::string read_file(const fs::path& path);
/// Writes through a temporary file in the same directory and renames it into
/// place, creating parent directories as needed.
void write_file(const fs::path& path, std::string_view bytes);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const fs::path& path);

// ---- numbers ----------------------------------------------------------------

/// 17 significant digits, '.' separator, independent of the C locale.
std::string format_double(double x);
/// Strict parse of a finite double; `what` names the field in error messages.
double parse_double(std::string_view text, std::string_view what);

// ---- configuration ------------------------------------------------------------

/// Length multiplier for a `units` value ("m", "mm", "um", "nm" or a number).
double unit_scale(const json& units);

/// Grid spec object: origin [x, y] or [x, y, z], spacing (scalar or [dx, dy]),
/// counts [nx, ny], plane_height, optional units. When origin has three
/// entries and plane_height is absent, origin z is the plane height.
PlaneLattice lattice_from_json(const json& spec, std::string_view where);
json lattice_to_json(const PlaneLattice& lattice);

/// Row-major boolean raster from a plain or binary PGM (nonzero = member) or
/// a CSV of 0/1 values. File row i is lattice row iy = i.
std::vector<bool> load_mask_file(const fs::path& path, std::size_t nx, std::size_t ny);

/// Scenario config; relative mask_file paths resolve against `base_dir`.
/// Missing keys raise ErrorKind::Config naming the key.
ScenarioConfig scenario_config_from_json(const json& j, const fs::path& base_dir = {});
/// Self-contained form: any mask is written inline as row strings.
json scenario_config_to_json(const ScenarioConfig& c);
ScenarioConfig load_scenario_config(const fs::path& path);

SolverConfig solver_config_from_json(const json& j);
json solver_config_to_json(const SolverConfig& c);

std::string to_string(KappaMode mode);
KappaMode kappa_mode_from_string(std::string_view s);

// ---- grids ----------------------------------------------------------------------

void save_dipole_grid(const fs::path& path, const DipoleGrid& grid);
DipoleGrid load_dipole_grid(const fs::path& path);
void save_measurement_grid(const fs::path& path, const MeasurementGrid& grid);
MeasurementGrid load_measurement_grid(const fs::path& path);

// ---- magnetizations ---------------------------------------------------------------

/// CSV `x,y,z,mx,my,mz`, one row per support site in site order.
std::string magnetization_csv(const DipoleGrid& grid, const DiscreteMagnetization& mu);
void save_magnetization(const fs::path& path, const DipoleGrid& grid, const DiscreteMagnetization& mu);
/// Positions snap to the nearest site within 1e-9 * spacing; farther points
/// raise ErrorKind::Mismatch.
DiscreteMagnetization parse_magnetization_csv(std::string_view text, const DipoleGrid& grid);
DiscreteMagnetization load_magnetization(const fs::path& path, const DipoleGrid& grid);

// ---- fields -----------------------------------------------------------------------

struct FieldMeta {
    Vec3 direction = Vec3::UnitZ();
    KappaMode kappa_mode = KappaMode::Normalized;
    PlaneLattice grid;
    std::uint64_t seed = 0;
};

/// CSV `x,y,z,b` in measurement order.
std::string field_csv(const MeasurementGrid& q, const FieldData& f);
FieldData parse_field_csv(std::string_view text, const MeasurementGrid& q);

/// Writes `path` and the sidecar `path`.json (metadata plus the CSV's sha256).
void save_field(const fs::path& path, const MeasurementGrid& q, const FieldData& f, const FieldMeta& meta);
/// Verifies the sidecar digest when the sidecar exists.
FieldData load_field(const fs::path& path, const MeasurementGrid& q);
FieldMeta load_field_meta(const fs::path& path);

// ---- solver results and certificates -------------------------------------------------

/// Little-endian binary with a trailing SHA-256 of everything before it.
std::string encode_result(const SolveResult& r);
SolveResult decode_result(std::string_view bytes);
void save_result(const fs::path& path, const SolveResult& r);
SolveResult load_result(const fs::path& path);

json certificate_to_json(const Certificate& c, bool per_site);
Certificate certificate_from_json(const json& j);
void save_certificate(const fs::path& path, const Certificate& c, bool per_site);
Certificate load_certificate(const fs::path& path);

/// CSV `component,tv,mx,my,mz` with a final `total` row.
std::string moment_summary_csv(const MomentSummary& s);

// ---- scenario bundles -------------------------------------------------------------

/// Directory with config.json, mu0.csv, field.csv, field_noisy.csv (when the
/// scenario is noisy) and meta.json carrying the noise norm, kappa mode and
/// the sha256 of every other file.
void save_bundle(const fs::path& dir, const Scenario& s);
/// Rebuilds grids from config.json and loads the data files after checking
/// them against meta.json (ErrorKind::Checksum on any mismatch).
Scenario load_bundle(const fs::path& dir);

// ---- run manifests ----------------------------------------------------------------

struct RunManifest {
    std::string tool = "magrecon";
    std::string version = std::string(kToolVersion);
    std::string command;
    std::string config_hash;
    std::map<std::string, std::string> inputs;   // name -> sha256
    std::map<std::string, std::string> outputs;  // name -> sha256
    std::uint64_t seed = 0;
    KappaMode kappa_mode = KappaMode::Normalized;
    unsigned threads = 1;
    double wall_seconds = 0.0;
    std::vector<std::string> children;  // relative paths of child manifests

    bool operator==(const RunManifest&) const = default;
};

json manifest_to_json(const RunManifest& m);
RunManifest manifest_from_json(const json& j);
void save_manifest(const fs::path& path, const RunManifest& m);
RunManifest load_manifest(const fs::path& path);

}  // namespace magrecon::io
