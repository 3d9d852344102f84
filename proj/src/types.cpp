#include "mlomae/types.hpp"

#include <sstream>

namespace mlomae {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

TensorMap zeros_like(const TensorMap& x) {
  TensorMap out;
  for (const auto& [k, v] : x) out.emplace(k, Matrix::Zero(v.rows(), v.cols()));
  return out;
}

void axpy(double alpha, const TensorMap& x, TensorMap& y) {
  for (const auto& [k, v] : x) {
    auto it = y.find(k);
    if (it == y.end()) throw DimensionError("axpy: missing key " + k);
    if (it->second.rows() != v.rows() || it->second.cols() != v.cols())
      throw DimensionError("axpy: shape mismatch for " + k + " " + shape_str(v) + " vs " +
                           shape_str(it->second));
    it->second += alpha * v;
  }
}

TensorMap scaled(const TensorMap& x, double alpha) {
  TensorMap out;
  for (const auto& [k, v] : x) out.emplace(k, alpha * v);
  return out;
}

TensorMap sum(const TensorMap& a, const TensorMap& b) {
  TensorMap out = a;
  axpy(1.0, b, out);
  return out;
}

double dot(const TensorMap& a, const TensorMap& b) {
  double acc = 0.0;
  for (const auto& [k, v] : a) {
    auto it = b.find(k);
    if (it == b.end()) throw DimensionError("dot: missing key " + k);
    acc += v.cwiseProduct(it->second).sum();
  }
  return acc;
}

double squared_norm(const TensorMap& x) {
  double acc = 0.0;
  for (const auto& [k, v] : x) acc += v.squaredNorm();
  return acc;
}

double l2_norm(const TensorMap& x) { return std::sqrt(squared_norm(x)); }

Index num_elements(const TensorMap& x) {
  Index n = 0;
  for (const auto& [k, v] : x) n += v.size();
  return n;
}

bool all_finite(const TensorMap& x) {
  for (const auto& [k, v] : x)
    if (!v.allFinite()) return false;
  return true;
}

Eigen::VectorXd flatten(const TensorMap& x) {
  Eigen::VectorXd out(num_elements(x));
  Index off = 0;
  for (const auto& [k, v] : x) {
    out.segment(off, v.size()) = Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
    off += v.size();
  }
  return out;
}

TensorMap unflatten(const Eigen::VectorXd& flat, const TensorMap& like) {
  if (flat.size() != num_elements(like)) throw DimensionError("unflatten: size mismatch");
  TensorMap out;
  Index off = 0;
  for (const auto& [k, v] : like) {
    Matrix m(v.rows(), v.cols());
    Eigen::Map<Eigen::VectorXd>(m.data(), m.size()) = flat.segment(off, v.size());
    off += v.size();
    out.emplace(k, std::move(m));
  }
  return out;
}

}  // namespace mlomae
