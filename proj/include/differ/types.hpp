#pragma once

#include <Eigen/Core>

namespace differ {

using Index = Eigen::Index;

// All numerics run in double; parameters and persisted arrays are float32.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using MatrixF = Eigen::MatrixXf;
using VectorF = Eigen::VectorXf;

using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

}  // namespace differ
