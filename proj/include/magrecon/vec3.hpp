#pragma once

#include <Eigen/Core>

namespace magrecon {

using Vec3 = Eigen::Vector3d;

}  // namespace magrecon
