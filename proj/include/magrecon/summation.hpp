#pragma once

#include <cmath>

#include "magrecon/vec3.hpp"

namespace magrecon {

/// Neumaier's variant of Kahan summation. Every reduction whose result is
/// compared across code paths goes through this so the error stays O(eps)
/// independent of the number of terms.
class CompensatedSum {
public:
    void add(double x) noexcept {
        const double t = sum_ + x;
        if (std::abs(sum_) >= std::abs(x)) {
            comp_ += (sum_ - t) + x;
        } else {
            comp_ += (x - t) + sum_;
        }
        sum_ = t;
    }
    double value() const noexcept { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

class CompensatedSum3 {
public:
    void add(const Vec3& v) noexcept {
        x_.add(v.x());
        y_.add(v.y());
        z_.add(v.z());
    }
    Vec3 value() const noexcept { return {x_.value(), y_.value(), z_.value()}; }

private:
    CompensatedSum x_, y_, z_;
};

}  // namespace magrecon
