#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace mlomae {

using Index = Eigen::Index;

// All tensors are dense, row-major, two-dimensional. Vectors are 1×n rows.
template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Matrix = MatrixT<double>;

using IndexList = std::vector<Index>;

// Named parameter tensors. Ordered so that iteration (and serialization) is
// deterministic.
using TensorMap = std::map<std::string, Matrix>;
// Gradients share the layout of the parameters they belong to.
using GradMap = TensorMap;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_str(const Matrix& m);

// --- vector-space helpers over TensorMap ----------------------------------

TensorMap zeros_like(const TensorMap& x);
// y += alpha * x; keys of x must be present in y with equal shapes.
void axpy(double alpha, const TensorMap& x, TensorMap& y);
TensorMap scaled(const TensorMap& x, double alpha);
TensorMap sum(const TensorMap& a, const TensorMap& b);
double dot(const TensorMap& a, const TensorMap& b);
double squared_norm(const TensorMap& x);
double l2_norm(const TensorMap& x);
Index num_elements(const TensorMap& x);
bool all_finite(const TensorMap& x);

// Flatten in key order, and the inverse.
Eigen::VectorXd flatten(const TensorMap& x);
TensorMap unflatten(const Eigen::VectorXd& flat, const TensorMap& like);

}  // namespace mlomae
