#pragma once

#include <Eigen/Core>
#include <cstdint>

namespace sdlab {

// Pipeline-wide defaults. The numeric core is templated on the scalar; the
// production pipeline runs in single precision, verification paths
// instantiate double where finite-difference tolerances demand it.
using Scalar = float;

template <class S>
using VecX = Eigen::Array<S, Eigen::Dynamic, 1>;
template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

using Index = Eigen::Index;

}  // namespace sdlab
