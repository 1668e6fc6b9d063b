#include "hyperpriv/autodiff.hpp"

#include "hyperpriv/hypergraph.hpp"

#include <stdexcept>

namespace hyperpriv::ad {

const Matrix& Var::value() const { return tape_->value(id_); }
double Var::scalar() const {
  const auto& v = value();
  if (v.size() != 1) throw std::logic_error("Var::scalar on non-scalar node");
  return v(0, 0);
}
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Matrix value) { return record(std::move(value), false, nullptr); }
Var Tape::variable(Matrix value) { return record(std::move(value), true, nullptr); }

Var Tape::record(Matrix value, bool requires_grad, Backward backward) {
  nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, std::move(backward)});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Matrix Tape::grad(Var v) const {
  const auto& node = nodes_[v.id()];
  if (node.grad.size() == 0) return Matrix::Zero(node.value.rows(), node.value.cols());
  return node.grad;
}

void Tape::accumulate(Var v, const Matrix& g) {
  auto& node = nodes_[v.id()];
  if (!node.requires_grad) return;
  if (node.grad.size() == 0) {
    node.grad = g;
  } else {
    node.grad += g;
  }
}

void Tape::backward(Var root) {
  if (root.tape() != this || nodes_[root.id()].value.size() != 1) {
    throw std::logic_error("Tape::backward: root must be a scalar on this tape");
  }
  for (auto& n : nodes_) n.grad.resize(0, 0);
  nodes_[root.id()].grad = Matrix::Ones(1, 1);
  for (int id = root.id(); id >= 0; --id) {
    auto& node = nodes_[id];
    if (!node.backward || node.grad.size() == 0) continue;
    const Matrix g = node.grad;
    node.backward(*this, g);
  }
}

bool any_requires_grad(std::initializer_list<Var> vars) {
  for (const auto& v : vars) {
    if (v.requires_grad()) return true;
  }
  return false;
}

namespace {

void check_same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw std::logic_error("vars from different tapes");
}

void check_shape(bool ok, const char* op) {
  if (!ok) throw std::invalid_argument(std::string("shape mismatch in ") + op);
}

}  // namespace

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  check_shape(a.cols() == b.rows(), "matmul");
  Tape& t = *a.tape();
  return t.record(a.value() * b.value(), any_requires_grad({a, b}),
                  [a, b](Tape& tape, const Matrix& g) {
                    if (a.requires_grad()) tape.accumulate(a, g * b.value().transpose());
                    if (b.requires_grad()) tape.accumulate(b, a.value().transpose() * g);
                  });
}

Var matmul_nt(Var a, Var b) {
  check_same_tape(a, b);
  check_shape(a.cols() == b.cols(), "matmul_nt");
  Tape& t = *a.tape();
  return t.record(a.value() * b.value().transpose(), any_requires_grad({a, b}),
                  [a, b](Tape& tape, const Matrix& g) {
                    if (a.requires_grad()) tape.accumulate(a, g * b.value());
                    if (b.requires_grad()) tape.accumulate(b, g.transpose() * a.value());
                  });
}

Var add(Var a, Var b) {
  check_same_tape(a, b);
  check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  Tape& t = *a.tape();
  return t.record(a.value() + b.value(), any_requires_grad({a, b}),
                  [a, b](Tape& tape, const Matrix& g) {
                    tape.accumulate(a, g);
                    tape.accumulate(b, g);
                  });
}

Var sub(Var a, Var b) {
  check_same_tape(a, b);
  check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
  Tape& t = *a.tape();
  return t.record(a.value() - b.value(), any_requires_grad({a, b}),
                  [a, b](Tape& tape, const Matrix& g) {
                    tape.accumulate(a, g);
                    if (b.requires_grad()) tape.accumulate(b, -g);
                  });
}

Var add_row(Var x, Var bias) {
  check_same_tape(x, bias);
  check_shape(bias.rows() == 1 && bias.cols() == x.cols(), "add_row");
  Tape& t = *x.tape();
  Matrix out = x.value().rowwise() + bias.value().row(0);
  return t.record(std::move(out), any_requires_grad({x, bias}),
                  [x, bias](Tape& tape, const Matrix& g) {
                    tape.accumulate(x, g);
                    if (bias.requires_grad()) tape.accumulate(bias, g.colwise().sum());
                  });
}

Var scale(Var x, double s) {
  Tape& t = *x.tape();
  return t.record(x.value() * s, x.requires_grad(),
                  [x, s](Tape& tape, const Matrix& g) { tape.accumulate(x, g * s); });
}

Var hadamard(Var a, Var b) {
  check_same_tape(a, b);
  check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard");
  Tape& t = *a.tape();
  return t.record(a.value().cwiseProduct(b.value()), any_requires_grad({a, b}),
                  [a, b](Tape& tape, const Matrix& g) {
                    if (a.requires_grad()) tape.accumulate(a, g.cwiseProduct(b.value()));
                    if (b.requires_grad()) tape.accumulate(b, g.cwiseProduct(a.value()));
                  });
}

Var relu(Var x) {
  Tape& t = *x.tape();
  return t.record(x.value().cwiseMax(0.0), x.requires_grad(), [x](Tape& tape, const Matrix& g) {
    tape.accumulate(x, (x.value().array() > 0.0).cast<double>().matrix().cwiseProduct(g));
  });
}

Var tanh(Var x) {
  Tape& t = *x.tape();
  const int out_id = static_cast<int>(t.size());
  return t.record(x.value().array().tanh().matrix(), x.requires_grad(),
                  [x, out_id](Tape& tape, const Matrix& g) {
                    const auto& y = tape.value(out_id);
                    tape.accumulate(x, g.cwiseProduct((1.0 - y.array().square()).matrix()));
                  });
}

Var sigmoid(Var x) {
  Tape& t = *x.tape();
  Matrix y = (1.0 / (1.0 + (-x.value().array()).exp())).matrix();
  Matrix dy = y.array() * (1.0 - y.array());
  return t.record(std::move(y), x.requires_grad(),
                  [x, dy = std::move(dy)](Tape& tape, const Matrix& g) {
                    tape.accumulate(x, g.cwiseProduct(dy));
                  });
}

Var detach(Var x) { return x.tape()->constant(x.value()); }

Var sum(Var x) {
  Tape& t = *x.tape();
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return t.record(std::move(out), x.requires_grad(), [x](Tape& tape, const Matrix& g) {
    tape.accumulate(x, Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

Var transpose(Var x) {
  Tape& t = *x.tape();
  return t.record(x.value().transpose(), x.requires_grad(),
                  [x](Tape& tape, const Matrix& g) { tape.accumulate(x, g.transpose()); });
}

Var gather_rows(Var x, const std::vector<int>& rows) {
  Eigen::SparseMatrix<double> select(static_cast<Eigen::Index>(rows.size()), x.rows());
  std::vector<Eigen::Triplet<double>> entries;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= x.rows()) throw std::out_of_range("gather_rows: bad row");
    entries.emplace_back(static_cast<int>(r), rows[r], 1.0);
  }
  select.setFromTriplets(entries.begin(), entries.end());
  return left_sparse(select, x);
}

Var left_sparse(const Eigen::SparseMatrix<double>& s, Var x) {
  check_shape(s.cols() == x.rows(), "left_sparse");
  Tape& t = *x.tape();
  Matrix out = s * x.value();
  if (!x.requires_grad()) return t.constant(std::move(out));
  Eigen::SparseMatrix<double> st = s.transpose();
  return t.record(std::move(out), true, [x, st = std::move(st)](Tape& tape, const Matrix& g) {
    tape.accumulate(x, st * g);
  });
}

Var propagate(const Propagator& p, Var x) {
  Tape& t = *x.tape();
  // Propagator is symmetric, so the adjoint is the operator itself. The
  // caller keeps `p` alive for the lifetime of the tape.
  return t.record(p.apply(x.value()), x.requires_grad(),
                  [x, &p](Tape& tape, const Matrix& g) { tape.accumulate(x, p.apply(g)); });
}

Var segment_softmax(Var scores, const std::vector<std::vector<int>>& segments) {
  check_shape(scores.cols() == 1, "segment_softmax");
  Tape& t = *scores.tape();
  const Matrix& s = scores.value();
  Matrix alpha = Matrix::Zero(s.rows(), 1);
  for (const auto& seg : segments) {
    if (seg.empty()) throw std::invalid_argument("segment_softmax: empty segment");
    double mx = s(seg.front(), 0);
    for (int k : seg) mx = std::max(mx, s(k, 0));
    double total = 0.0;
    for (int k : seg) {
      alpha(k, 0) = std::exp(s(k, 0) - mx);
      total += alpha(k, 0);
    }
    for (int k : seg) alpha(k, 0) /= total;
  }
  const int out_id = static_cast<int>(t.size());
  return t.record(std::move(alpha), scores.requires_grad(),
                  [scores, out_id, segments](Tape& tape, const Matrix& g) {
                    const auto& a = tape.value(out_id);
                    Matrix ds = Matrix::Zero(a.rows(), 1);
                    for (const auto& seg : segments) {
                      double dot = 0.0;
                      for (int k : seg) dot += a(k, 0) * g(k, 0);
                      for (int k : seg) ds(k, 0) = a(k, 0) * (g(k, 0) - dot);
                    }
                    tape.accumulate(scores, ds);
                  });
}

Var segment_weighted_sum(Var weights, Var values, const std::vector<std::vector<int>>& segments) {
  check_same_tape(weights, values);
  check_shape(weights.cols() == 1 && weights.rows() == values.rows(), "segment_weighted_sum");
  Tape& t = *weights.tape();
  const Matrix& w = weights.value();
  const Matrix& v = values.value();
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(segments.size()), v.cols());
  for (std::size_t p = 0; p < segments.size(); ++p) {
    for (int k : segments[p]) out.row(p) += w(k, 0) * v.row(k);
  }
  return t.record(std::move(out), any_requires_grad({weights, values}),
                  [weights, values, segments](Tape& tape, const Matrix& g) {
                    const auto& w = weights.value();
                    const auto& v = values.value();
                    Matrix dw = Matrix::Zero(w.rows(), 1);
                    Matrix dv = Matrix::Zero(v.rows(), v.cols());
                    for (std::size_t p = 0; p < segments.size(); ++p) {
                      for (int k : segments[p]) {
                        dw(k, 0) += v.row(k).dot(g.row(p));
                        dv.row(k) += w(k, 0) * g.row(p);
                      }
                    }
                    if (weights.requires_grad()) tape.accumulate(weights, dw);
                    if (values.requires_grad()) tape.accumulate(values, dv);
                  });
}

}  // namespace hyperpriv::ad
