#include "magrecon/fields.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "magrecon/error.hpp"
#include "magrecon/summation.hpp"
#include "parallel.hpp"
#include "power_iteration.hpp"

namespace magrecon {

double kappa_for(KappaMode mode) noexcept { return mode == KappaMode::Physical ? kPhysicalKappa : 1.0; }

Vec3 kernel_kv(const Vec3& x, const Vec3& v) {
    const double r2 = x.x() * x.x() + x.y() * x.y() + x.z() * x.z();
    if (!(r2 > 0.0)) fail(ErrorKind::Numerical, "singular kernel evaluation");
    const double r = std::sqrt(r2);
    const double r3 = r2 * r;
    const double r5 = r3 * r2;
    const double vx = v.x() * x.x() + v.y() * x.y() + v.z() * x.z();
    const double c = 3.0 * vx / r5;
    return {v.x() / r3 - c * x.x(), v.y() / r3 - c * x.y(), v.z() / r3 - c * x.z()};
}

namespace {

inline double dot3(const Vec3& a, const double* m) { return a.x() * m[0] + a.y() * m[1] + a.z() * m[2]; }

void require_target(const MeasurementGrid& q, std::size_t n) {
    if (n != q.size()) fail(ErrorKind::Mismatch, "measurement mismatch: field has " + std::to_string(n) +
                                                     " samples, grid has " + std::to_string(q.size()));
}

}  // namespace

double inner_product(const MeasurementGrid& q, const FieldData& a, const FieldData& b) {
    require_target(q, a.size());
    require_target(q, b.size());
    CompensatedSum acc;
    const auto w = q.weights();
    for (std::size_t p = 0; p < a.size(); ++p) acc.add(w[p] * a.values[p] * b.values[p]);
    return acc.value();
}

double weighted_norm(const MeasurementGrid& q, const FieldData& a) { return std::sqrt(inner_product(q, a, a)); }

FieldData operator+(const FieldData& a, const FieldData& b) {
    if (a.size() != b.size()) fail(ErrorKind::Mismatch, "measurement mismatch");
    FieldData out{a.values};
    for (std::size_t p = 0; p < out.size(); ++p) out.values[p] += b.values[p];
    return out;
}

FieldData operator-(const FieldData& a, const FieldData& b) {
    if (a.size() != b.size()) fail(ErrorKind::Mismatch, "measurement mismatch");
    FieldData out{a.values};
    for (std::size_t p = 0; p < out.size(); ++p) out.values[p] -= b.values[p];
    return out;
}

FieldData operator*(double c, const FieldData& a) {
    FieldData out{a.values};
    for (double& x : out.values) x *= c;
    return out;
}

ForwardModel::ForwardModel(DipoleGrid source, MeasurementGrid target, Direction v, ModelOptions options)
    : source_(std::move(source)), target_(std::move(target)), v_(v), options_(options) {
    if (!(options_.kappa > 0.0) || !std::isfinite(options_.kappa)) {
        fail(ErrorKind::InvalidArgument, "kappa must be positive");
    }
    if (options_.threads == 0) options_.threads = 1;
    (void)separation(source_, target_);

    const std::size_t n_rows = rows();
    const std::size_t n_cols = cols();
    if (n_rows * n_cols <= options_.dense_budget) {
        dense_.resize(static_cast<Eigen::Index>(n_rows), static_cast<Eigen::Index>(n_cols));
        detail::parallel_for(n_rows, options_.threads, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t p = lo; p < hi; ++p) {
                const Vec3& x = target_.position(p);
                for (std::size_t j = 0; j < source_.site_count(); ++j) {
                    const Vec3 k = kernel_kv(x - source_.position(j), v_.vec());
                    for (int c = 0; c < 3; ++c) {
                        dense_(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(3 * j) + c) =
                            -options_.kappa * k[c];
                    }
                }
            }
        });
    }
}

Vec3 ForwardModel::block(std::size_t p, std::size_t site) const {
    if (is_dense()) {
        const double* row = dense_.data() + p * cols() + 3 * site;
        return {row[0], row[1], row[2]};
    }
    const Vec3 k = kernel_kv(target_.position(p) - source_.position(site), v_.vec());
    return {-options_.kappa * k.x(), -options_.kappa * k.y(), -options_.kappa * k.z()};
}

FieldData ForwardModel::forward(const DiscreteMagnetization& mu) const {
    if (mu.grid_id() != source_.fingerprint() || mu.site_count() != source_.site_count()) {
        fail(ErrorKind::Mismatch, "support mismatch: magnetization is not on the model's source grid");
    }
    std::vector<std::size_t> sites;
    std::vector<double> packed;
    sites.reserve(mu.size());
    packed.reserve(3 * mu.size());
    for (const auto& e : mu.entries()) {
        sites.push_back(e.site);
        packed.insert(packed.end(), {e.moment.x(), e.moment.y(), e.moment.z()});
    }
    return {apply_sites(sites, packed)};
}

std::vector<double> ForwardModel::apply_sites(std::span<const std::size_t> sites, std::span<const double> packed) const {
    if (packed.size() != 3 * sites.size()) fail(ErrorKind::Mismatch, "support mismatch: packed length");
    for (std::size_t s : sites) {
        if (s >= source_.site_count()) fail(ErrorKind::Mismatch, "support mismatch: site outside grid");
    }
    std::vector<double> out(rows(), 0.0);
    detail::parallel_for(rows(), options_.threads, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t p = lo; p < hi; ++p) {
            CompensatedSum acc;
            for (std::size_t i = 0; i < sites.size(); ++i) {
                const double* m = packed.data() + 3 * i;
                if (m[0] == 0.0 && m[1] == 0.0 && m[2] == 0.0) continue;
                acc.add(dot3(block(p, sites[i]), m));
            }
            out[p] = acc.value();
        }
    });
    return out;
}

std::vector<Vec3> ForwardModel::adjoint(const FieldData& psi) const {
    std::vector<std::size_t> all(source_.site_count());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const std::vector<double> packed = adjoint_impl(psi.values, all);
    std::vector<Vec3> out(all.size());
    for (std::size_t j = 0; j < all.size(); ++j) out[j] = {packed[3 * j], packed[3 * j + 1], packed[3 * j + 2]};
    return out;
}

std::vector<double> ForwardModel::adjoint_sites(std::span<const double> psi, std::span<const std::size_t> sites) const {
    return adjoint_impl(psi, sites);
}

std::vector<double> ForwardModel::adjoint_impl(std::span<const double> psi, std::span<const std::size_t> sites) const {
    require_target(target_, psi.size());
    for (std::size_t s : sites) {
        if (s >= source_.site_count()) fail(ErrorKind::Mismatch, "support mismatch: site outside grid");
    }
    const auto w = target_.weights();
    std::vector<double> coef(rows());
    for (std::size_t p = 0; p < rows(); ++p) coef[p] = w[p] * psi[p];

    std::vector<double> out(3 * sites.size(), 0.0);
    // Each site's sum runs over p in increasing order on a single thread, in
    // both storage modes, so the result is independent of mode and threads.
    detail::parallel_for(sites.size(), options_.threads, [&](std::size_t lo, std::size_t hi) {
        if (is_dense()) {
            std::vector<CompensatedSum3> acc(hi - lo);
            for (std::size_t p = 0; p < rows(); ++p) {
                if (coef[p] == 0.0) continue;
                for (std::size_t i = lo; i < hi; ++i) acc[i - lo].add(coef[p] * block(p, sites[i]));
            }
            for (std::size_t i = lo; i < hi; ++i) {
                const Vec3 g = acc[i - lo].value();
                for (int c = 0; c < 3; ++c) out[3 * i + static_cast<std::size_t>(c)] = g[c];
            }
        } else {
            for (std::size_t i = lo; i < hi; ++i) {
                CompensatedSum3 acc;
                for (std::size_t p = 0; p < rows(); ++p) {
                    if (coef[p] == 0.0) continue;
                    acc.add(coef[p] * block(p, sites[i]));
                }
                const Vec3 g = acc.value();
                for (int c = 0; c < 3; ++c) out[3 * i + static_cast<std::size_t>(c)] = g[c];
            }
        }
    });
    return out;
}

Eigen::MatrixXd ForwardModel::gather_columns(std::span<const std::size_t> sites) const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(3 * sites.size()));
    detail::parallel_for(sites.size(), options_.threads, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            for (std::size_t p = 0; p < rows(); ++p) {
                const Vec3 b = block(p, sites[i]);
                for (int c = 0; c < 3; ++c) {
                    out(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(3 * i) + c) = b[c];
                }
            }
        }
    });
    return out;
}

ForwardModel ForwardModel::scaled(double c) const {
    ModelOptions opts = options_;
    opts.kappa *= c;
    return {source_, target_, v_, opts};
}

NormEstimate operator_norm(const ForwardModel& model, double tol, std::uint64_t seed, std::size_t max_iter) {
    std::vector<std::size_t> all(model.source().site_count());
    std::iota(all.begin(), all.end(), std::size_t{0});
    auto apply = [&](const Eigen::VectorXd& x) {
        const std::vector<double> ax = model.apply_sites(all, {x.data(), static_cast<std::size_t>(x.size())});
        const std::vector<double> aax = model.adjoint_sites(ax, all);
        return Eigen::Map<const Eigen::VectorXd>(aax.data(), static_cast<Eigen::Index>(aax.size())).eval();
    };
    const auto r = detail::power_iteration(static_cast<Eigen::Index>(model.cols()), apply, tol, seed, max_iter);
    return {r.rayleigh * (1.0 + 10.0 * tol), r.rayleigh, r.iterations};
}

double potential_phi(std::span<const PointDipole> dipoles, const Vec3& x) {
    CompensatedSum acc;
    for (const auto& d : dipoles) {
        const Vec3 r = x - d.position;
        const double r2 = r.squaredNorm();
        if (!(r2 > 0.0)) fail(ErrorKind::Numerical, "singular evaluation: point coincides with a dipole");
        acc.add(r.dot(d.moment) / (r2 * std::sqrt(r2)));
    }
    return acc.value() / (4.0 * std::numbers::pi);
}

double potential_phi(const DipoleGrid& grid, const DiscreteMagnetization& mu, const Vec3& x) {
    return potential_phi(to_point_dipoles(grid, mu), x);
}

Vec3 field_vector(std::span<const PointDipole> dipoles, const Vec3& x, double kappa) {
    CompensatedSum3 acc;
    for (const auto& d : dipoles) {
        const Vec3 r = x - d.position;
        const double r2 = r.squaredNorm();
        if (!(r2 > 0.0)) fail(ErrorKind::Numerical, "singular evaluation: point coincides with a dipole");
        const double rn = std::sqrt(r2);
        const double r3 = r2 * rn;
        acc.add(d.moment / r3 - (3.0 * r.dot(d.moment) / (r3 * r2)) * r);
    }
    return -kappa * acc.value();
}

double field_component(std::span<const PointDipole> dipoles, const Vec3& x, const Vec3& v, double kappa) {
    CompensatedSum acc;
    for (const auto& d : dipoles) acc.add(kernel_kv(x - d.position, v).dot(d.moment));
    return -kappa * acc.value();
}

}  // namespace magrecon
