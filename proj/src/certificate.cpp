#include "magrecon/certificate.hpp"

#include <algorithm>
#include <cmath>

#include "magrecon/error.hpp"

namespace magrecon {

std::vector<Vec3> certificate_field(const ForwardModel& model, const FieldData& data, const DiscreteMagnetization& mu) {
    return model.adjoint(data - model.forward(mu));
}

Certificate check_optimality(const ForwardModel& model, const FieldData& data, const DiscreteMagnetization& mu,
                             double lambda, double tol) {
    if (!(tol > 0.0)) fail(ErrorKind::InvalidArgument, "certificate tolerance must be positive");
    if (!(lambda > 0.0)) fail(ErrorKind::InvalidArgument, "lambda must be positive");
    Certificate c;
    c.lambda = lambda;
    c.tol = tol;
    c.site_values = certificate_field(model, data, mu);
    c.support_size = mu.size();
    const double half = 0.5 * lambda;

    std::vector<char> on_support(c.site_values.size(), 0);
    for (const auto& e : mu.entries()) {
        on_support[e.site] = 1;
        const double err = (c.site_values[e.site] - half * e.moment / e.moment.norm()).norm();
        c.max_alignment_error = std::max(c.max_alignment_error, err);
        if (err > tol * lambda) c.violations.push_back({e.site, ViolationKind::Alignment, err});
    }
    for (std::size_t j = 0; j < c.site_values.size(); ++j) {
        const double n = c.site_values[j].norm();
        c.max_norm = std::max(c.max_norm, n);
        if (!on_support[j]) {
            c.max_off_support_norm = std::max(c.max_off_support_norm, n);
            if (std::abs(n - half) <= tol * lambda) c.degeneracy_set.push_back(j);
        }
        if (n > half * (1.0 + tol)) c.violations.push_back({j, ViolationKind::Norm, n});
    }
    std::stable_sort(c.violations.begin(), c.violations.end(),
                     [](const Violation& a, const Violation& b) { return a.site < b.site; });
    c.pass = c.violations.empty();
    return c;
}

SupportPartition support_localization(const Certificate& certificate, std::optional<double> band) {
    const double b = band.value_or(4.0 * certificate.tol * (1.0 + certificate.tol));
    const double scale = 4.0 / (certificate.lambda * certificate.lambda);
    SupportPartition out;
    for (std::size_t j = 0; j < certificate.site_values.size(); ++j) {
        const double h = scale * certificate.site_values[j].squaredNorm() - 1.0;
        if (h < -b) {
            out.interior.push_back(j);
        } else if (h > b) {
            out.exterior.push_back(j);
        } else {
            out.boundary.push_back(j);
        }
    }
    return out;
}

double equivalence_residual(const ForwardModel& model, const DiscreteMagnetization& mu,
                            const DiscreteMagnetization& nu, double floor) {
    const auto& q = model.target();
    const double diff = weighted_norm(q, model.forward(mu - nu));
    const double scale = std::max({weighted_norm(q, model.forward(mu)), weighted_norm(q, model.forward(nu)), floor});
    return diff / scale;
}

double equivalence_residual(const MeasurementGrid& q, const Vec3& v, double kappa, std::span<const PointDipole> mu,
                            std::span<const PointDipole> nu, double floor) {
    FieldData a, b, d;
    for (const Vec3& x : q.positions()) {
        a.values.push_back(field_component(mu, x, v, kappa));
        b.values.push_back(field_component(nu, x, v, kappa));
        d.values.push_back(a.values.back() - b.values.back());
    }
    const double scale = std::max({weighted_norm(q, a), weighted_norm(q, b), floor});
    return weighted_norm(q, d) / scale;
}

}  // namespace magrecon
