#include "mlomae/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace mlomae::ad {

namespace {

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
}

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::invalid_argument("operands live on different tapes");
}

}  // namespace

const Matrix& Var::value() const { return tape->value(id); }

double Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw DimensionError("item() on non-scalar " + shape_str(v));
  return v(0, 0);
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// --- Tape -----------------------------------------------------------------

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::scalar(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::param(const std::string& name, const Matrix& value) {
  if (auto it = param_ids_.find(name); it != param_ids_.end()) return {this, it->second};
  Node n;
  n.value = value;
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  const std::size_t id = nodes_.size() - 1;
  params_.emplace_back(name, id);
  param_ids_.emplace(name, id);
  return {this, id};
}

std::map<std::string, Var> Tape::params(const TensorMap& tensors, const std::string& prefix) {
  std::map<std::string, Var> out;
  for (const auto& [k, v] : tensors) out.emplace(k, param(prefix + k, v));
  return out;
}

Var Tape::record(Matrix value, std::vector<std::size_t> operands, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (std::size_t op : operands) n.needs_grad = n.needs_grad || nodes_[op].needs_grad;
  n.operands = std::move(operands);
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

GradMap Tape::backward(Var loss) {
  if (loss.tape != this) throw std::invalid_argument("backward: loss is not on this tape");
  if (loss.value().size() != 1)
    throw DimensionError("backward: loss must be scalar, got " + shape_str(loss.value()));
  for (Node& n : nodes_) n.grad.resize(0, 0);
  if (nodes_[loss.id].needs_grad) {
    nodes_[loss.id].grad = Matrix::Ones(1, 1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, i);
    }
  }
  GradMap out;
  for (const auto& [name, id] : params_) {
    const Node& n = nodes_[id];
    if (n.grad.size() == 0) {
      out.emplace(name, Matrix::Zero(n.value.rows(), n.value.cols()));
    } else {
      out.emplace(name, n.grad);
    }
  }
  return out;
}

// --- operators ------------------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows())
    throw DimensionError("matmul: inner dimensions differ " + shape_str(av) + " vs " +
                         shape_str(bv));
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(av * bv, {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var transpose(Var a) {
  const std::size_t ia = a.id;
  return a.tape->record(a.value().transpose(), {ia}, [ia](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self).transpose());
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("add", a.value(), b.value());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("sub", a.value(), b.value());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, -t.grad(self));
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("mul", a.value(), b.value());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(a.value().cwiseProduct(b.value()), {ia, ib},
                        [ia, ib](Tape& t, std::size_t self) {
                          const Matrix& g = t.grad(self);
                          t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                          t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                        });
}

Var scale(Var a, double s) {
  const std::size_t ia = a.id;
  return a.tape->record(s * a.value(), {ia}, [ia, s](Tape& t, std::size_t self) {
    t.accumulate(ia, s * t.grad(self));
  });
}

Var add_scalar(Var a, double s) {
  const std::size_t ia = a.id;
  Matrix out = a.value().array() + s;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad(self));
  });
}

Var add_row(Var a, Var bias) {
  require_same_tape(a, bias);
  const Matrix& av = a.value();
  const Matrix& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != av.cols())
    throw DimensionError("add_row: bias " + shape_str(bv) + " does not fit " + shape_str(av));
  const std::size_t ia = a.id, ib = bias.id;
  Matrix out = av.rowwise() + bv.row(0);
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, g);
    if (t.needs_grad(ib)) t.accumulate(ib, g.colwise().sum());
  });
}

Var relu(Var a) {
  const std::size_t ia = a.id;
  Matrix out = a.value().cwiseMax(0.0);
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    // Subgradient at exactly 0 is 0.
    Matrix mask = (t.value(ia).array() > 0.0).cast<double>();
    t.accumulate(ia, t.grad(self).cwiseProduct(mask));
  });
}

Var sigmoid(Var a) {
  const std::size_t ia = a.id;
  Matrix out = a.value().unaryExpr([](double x) { return stable_sigmoid(x); });
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    Matrix dy = y.array() * (1.0 - y.array());
    t.accumulate(ia, t.grad(self).cwiseProduct(dy));
  });
}

Var clamp(Var a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  const std::size_t ia = a.id;
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  return a.tape->record(std::move(out), {ia}, [ia, lo, hi](Tape& t, std::size_t self) {
    const auto& x = t.value(ia).array();
    Matrix pass = ((x >= lo) && (x <= hi)).cast<double>();
    t.accumulate(ia, t.grad(self).cwiseProduct(pass));
  });
}

Var softmax_rows(Var a) {
  const Matrix& av = a.value();
  if (av.cols() < 1) throw DimensionError("softmax_rows: empty rows");
  Matrix out(av.rows(), av.cols());
  for (Index i = 0; i < av.rows(); ++i) {
    const double m = av.row(i).maxCoeff();
    out.row(i) = (av.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Eigen::VectorXd inner = g.cwiseProduct(y).rowwise().sum();
    Matrix dx = y.cwiseProduct(g - inner.replicate(1, g.cols()));
    t.accumulate(ia, dx);
  });
}

Var layer_norm(Var a, Var gamma, Var beta, double eps) {
  require_same_tape(a, gamma);
  require_same_tape(a, beta);
  const Matrix& x = a.value();
  const Index d = x.cols();
  if (gamma.value().rows() != 1 || gamma.value().cols() != d || beta.value().rows() != 1 ||
      beta.value().cols() != d)
    throw DimensionError("layer_norm: affine parameters must be [1x" + std::to_string(d) + "]");
  if (!(eps > 0.0)) throw std::invalid_argument("layer_norm: eps must be positive");

  Matrix xhat(x.rows(), d);
  Eigen::VectorXd inv_std(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.row(i).array() - mu) * inv_std(i);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  const std::size_t ia = a.id, ig = gamma.id, ib = beta.id;
  return a.tape->record(
      std::move(out), {ia, ig, ib},
      [ia, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                         std::size_t self) {
        const Matrix& g = t.grad(self);
        if (t.needs_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
        if (t.needs_grad(ib)) t.accumulate(ib, g.colwise().sum());
        if (t.needs_grad(ia)) {
          Matrix dxhat = g.array().rowwise() * t.value(ig).row(0).array();
          const double d = static_cast<double>(dxhat.cols());
          Matrix dx(dxhat.rows(), dxhat.cols());
          for (Index i = 0; i < dxhat.rows(); ++i) {
            const double m1 = dxhat.row(i).sum() / d;
            const double m2 = dxhat.row(i).dot(xhat.row(i)) / d;
            dx.row(i) = inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
          }
          t.accumulate(ia, dx);
        }
      });
}

Var sum(Var a) {
  const std::size_t ia = a.id;
  return a.tape->record(Matrix::Constant(1, 1, a.value().sum()), {ia},
                        [ia](Tape& t, std::size_t self) {
                          const Matrix& x = t.value(ia);
                          t.accumulate(ia, Matrix::Constant(x.rows(), x.cols(), t.grad(self)(0, 0)));
                        });
}

Var mean(Var a) {
  const Index n = a.value().size();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var sum(Var a, int axis) {
  const std::size_t ia = a.id;
  if (axis == 0) {
    return a.tape->record(a.value().colwise().sum(), {ia}, [ia](Tape& t, std::size_t self) {
      t.accumulate(ia, t.grad(self).replicate(t.value(ia).rows(), 1));
    });
  }
  if (axis == 1) {
    return a.tape->record(a.value().rowwise().sum(), {ia}, [ia](Tape& t, std::size_t self) {
      t.accumulate(ia, t.grad(self).replicate(1, t.value(ia).cols()));
    });
  }
  throw DimensionError("sum: invalid axis " + std::to_string(axis));
}

Var mean(Var a, int axis) {
  if (axis != 0 && axis != 1) throw DimensionError("mean: invalid axis " + std::to_string(axis));
  const Index n = axis == 0 ? a.rows() : a.cols();
  if (n == 0) throw DimensionError("mean over empty axis");
  return scale(sum(a, axis), 1.0 / static_cast<double>(n));
}

Var gather_rows(Var a, const IndexList& idx) {
  const Matrix& av = a.value();
  Matrix out(static_cast<Index>(idx.size()), av.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= av.rows())
      throw std::out_of_range("gather_rows: index " + std::to_string(idx[r]) + " outside [0, " +
                              std::to_string(av.rows()) + ")");
    out.row(static_cast<Index>(r)) = av.row(idx[r]);
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, idx](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& x = t.value(ia);
    Matrix dx = Matrix::Zero(x.rows(), x.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) dx.row(idx[r]) += g.row(static_cast<Index>(r));
    t.accumulate(ia, dx);
  });
}

Var reshape(Var a, Index rows, Index cols) {
  const Matrix& av = a.value();
  if (rows * cols != av.size())
    throw DimensionError("reshape: " + shape_str(av) + " to [" + std::to_string(rows) + "x" +
                         std::to_string(cols) + "]");
  Matrix out = Eigen::Map<const Matrix>(av.data(), rows, cols);
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Matrix& x = t.value(ia);
    const Matrix& g = t.grad(self);
    t.accumulate(ia, Eigen::Map<const Matrix>(g.data(), x.rows(), x.cols()));
  });
}

Var slice_cols(Var a, Index start, Index count) {
  const Matrix& av = a.value();
  if (start < 0 || count < 0 || start + count > av.cols())
    throw DimensionError("slice_cols: range out of bounds for " + shape_str(av));
  const std::size_t ia = a.id;
  return a.tape->record(av.middleCols(start, count), {ia},
                        [ia, start, count](Tape& t, std::size_t self) {
                          const Matrix& x = t.value(ia);
                          Matrix dx = Matrix::Zero(x.rows(), x.cols());
                          dx.middleCols(start, count) = t.grad(self);
                          t.accumulate(ia, dx);
                        });
}

Var grouped_attention(Var q, Var k, Var v, Index group, Index heads) {
  require_same_tape(q, k);
  require_same_tape(q, v);
  const Matrix& qv = q.value();
  require_same_shape("grouped_attention", qv, k.value());
  require_same_shape("grouped_attention", qv, v.value());
  if (group < 1 || heads < 1 || qv.rows() % group != 0 || qv.cols() % heads != 0)
    throw DimensionError("grouped_attention: " + shape_str(qv) + " does not split into groups of " +
                         std::to_string(group) + " and " + std::to_string(heads) + " heads");
  const Index groups = qv.rows() / group, dh = qv.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // Attention weights are kept for the backward sweep, one matrix per (group, head).
  auto probs = std::make_shared<std::vector<Matrix>>();
  probs->reserve(static_cast<std::size_t>(groups * heads));
  Matrix out(qv.rows(), qv.cols());
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  for (Index g = 0; g < groups; ++g)
    for (Index h = 0; h < heads; ++h) {
      Matrix s = inv_sqrt * (qv.block(g * group, h * dh, group, dh) * kv.block(g * group, h * dh, group, dh).transpose());
      for (Index i = 0; i < group; ++i) {
        s.row(i).array() -= s.row(i).maxCoeff();
        s.row(i) = s.row(i).array().exp().matrix();
        s.row(i) /= s.row(i).sum();
      }
      out.block(g * group, h * dh, group, dh) = s * vv.block(g * group, h * dh, group, dh);
      probs->push_back(std::move(s));
    }

  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  return q.tape->record(std::move(out), {iq, ik, iv},
                        [iq, ik, iv, group, heads, groups, dh, inv_sqrt, probs](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& qx = t.value(iq);
    const Matrix& kx = t.value(ik);
    const Matrix& vx = t.value(iv);
    Matrix dq = Matrix::Zero(qx.rows(), qx.cols());
    Matrix dk = Matrix::Zero(qx.rows(), qx.cols());
    Matrix dv = Matrix::Zero(qx.rows(), qx.cols());
    for (Index b = 0; b < groups; ++b)
      for (Index h = 0; h < heads; ++h) {
        const Matrix& p = (*probs)[static_cast<std::size_t>(b * heads + h)];
        const auto go = g.block(b * group, h * dh, group, dh);
        dv.block(b * group, h * dh, group, dh) = p.transpose() * go;
        Matrix dp = go * vx.block(b * group, h * dh, group, dh).transpose();
        const Eigen::VectorXd inner = dp.cwiseProduct(p).rowwise().sum();
        const Matrix ds = inv_sqrt * p.cwiseProduct(dp - inner.replicate(1, group));
        dq.block(b * group, h * dh, group, dh) = ds * kx.block(b * group, h * dh, group, dh);
        dk.block(b * group, h * dh, group, dh) = ds.transpose() * qx.block(b * group, h * dh, group, dh);
      }
    t.accumulate(iq, dq);
    t.accumulate(ik, dk);
    t.accumulate(iv, dv);
  });
}

Var group_mean(Var a, Index group) {
  const Matrix& av = a.value();
  if (group < 1 || av.rows() % group != 0)
    throw DimensionError("group_mean: " + shape_str(av) + " does not split into groups of " + std::to_string(group));
  const Index groups = av.rows() / group;
  Matrix out(groups, av.cols());
  for (Index b = 0; b < groups; ++b) out.row(b) = av.middleRows(b * group, group).colwise().mean();
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, group, groups](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix dx(groups * group, g.cols());
    for (Index b = 0; b < groups; ++b)
      dx.middleRows(b * group, group) = g.row(b).replicate(group, 1) / static_cast<double>(group);
    t.accumulate(ia, dx);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Tape* tape = parts.front().tape;
  const Index rows = parts.front().rows();
  Index cols = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.rows() != rows) throw DimensionError("concat_cols: row count mismatch");
    cols += p.cols();
    ids.push_back(p.id);
  }
  Matrix out(rows, cols);
  Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return tape->record(std::move(out), ids, [ids](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Index o = 0;
    for (std::size_t id : ids) {
      const Index c = t.value(id).cols();
      t.accumulate(id, g.middleCols(o, c));
      o += c;
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Tape* tape = parts.front().tape;
  const Index cols = parts.front().cols();
  Index rows = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.cols() != cols) throw DimensionError("concat_rows: column count mismatch");
    rows += p.rows();
    ids.push_back(p.id);
  }
  Matrix out(rows, cols);
  Index off = 0;
  for (const Var& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return tape->record(std::move(out), ids, [ids](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Index o = 0;
    for (std::size_t id : ids) {
      const Index r = t.value(id).rows();
      t.accumulate(id, g.middleRows(o, r));
      o += r;
    }
  });
}

Var cross_entropy_logits(Var logits, const IndexList& labels) {
  const Matrix& z = logits.value();
  if (static_cast<Index>(labels.size()) != z.rows())
    throw DimensionError("cross_entropy_logits: " + std::to_string(labels.size()) +
                         " labels for " + shape_str(z));
  if (z.rows() == 0) throw DimensionError("cross_entropy_logits: empty batch");
  Matrix probs(z.rows(), z.cols());
  double total = 0.0;
  for (Index i = 0; i < z.rows(); ++i) {
    const Index y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= z.cols())
      throw std::out_of_range("cross_entropy_logits: label " + std::to_string(y) +
                              " outside [0, " + std::to_string(z.cols()) + ")");
    const double m = z.row(i).maxCoeff();
    const double lse = m + std::log((z.row(i).array() - m).exp().sum());
    total += lse - z(i, y);
    probs.row(i) = (z.row(i).array() - lse).exp();
  }
  const double b = static_cast<double>(z.rows());
  const std::size_t il = logits.id;
  return logits.tape->record(
      Matrix::Constant(1, 1, total / b), {il},
      [il, labels, probs = std::move(probs), b](Tape& t, std::size_t self) {
        Matrix dz = probs;
        for (std::size_t i = 0; i < labels.size(); ++i) dz(static_cast<Index>(i), labels[i]) -= 1.0;
        t.accumulate(il, dz * (t.grad(self)(0, 0) / b));
      });
}

// --- gradient checking ----------------------------------------------------

GradCheckResult grad_check(const ScalarFn& f, const Matrix& x, double eps) {
  GradCheckResult res;
  {
    Tape tape;
    Var xv = tape.param("x", x);
    Var y = f(tape, xv);
    res.analytic = tape.backward(y).at("x");
  }
  auto eval = [&](const Matrix& at) {
    Tape tape;
    Var xv = tape.constant(at);
    return f(tape, xv).item();
  };
  res.numeric.resize(x.rows(), x.cols());
  Matrix probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + eps;
    const double fp = eval(probe);
    probe.data()[i] = orig - eps;
    const double fm = eval(probe);
    probe.data()[i] = orig;
    res.numeric.data()[i] = (fp - fm) / (2.0 * eps);
  }
  for (Index i = 0; i < x.size(); ++i) {
    const double a = res.analytic.data()[i];
    const double n = res.numeric.data()[i];
    const double denom = std::max({std::abs(a), std::abs(n), 1e-8});
    res.max_rel_error = std::max(res.max_rel_error, std::abs(a - n) / denom);
  }
  return res;
}

}  // namespace mlomae::ad
