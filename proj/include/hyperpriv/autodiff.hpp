#pragma once

#include "hyperpriv/common.hpp"

#include <Eigen/SparseCore>

#include <functional>
#include <memory>
#include <vector>

namespace hyperpriv {

class Propagator;

namespace ad {

class Tape;

// Handle to a matrix-valued node on a Tape. Cheap to copy.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Minimal reverse-mode recorder over dense matrices. Nodes are appended in
// evaluation order, so a reverse sweep is a valid topological order.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);
  Var record(Matrix value, bool requires_grad, Backward backward);

  const Matrix& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  // Gradient of the last backward() root with respect to v; zeros if v did
  // not influence the root.
  Matrix grad(Var v) const;
  void accumulate(Var v, const Matrix& g);

  void backward(Var root);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

bool any_requires_grad(std::initializer_list<Var> vars);

Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var add_row(Var x, Var bias);  // bias is 1 x cols, broadcast over rows
Var scale(Var x, double s);
Var hadamard(Var a, Var b);
Var relu(Var x);
Var tanh(Var x);
Var sigmoid(Var x);
Var detach(Var x);
Var sum(Var x);  // 1 x 1
Var transpose(Var x);
Var gather_rows(Var x, const std::vector<int>& rows);

// Constant linear operators applied from the left.
Var left_sparse(const Eigen::SparseMatrix<double>& s, Var x);
Var propagate(const Propagator& p, Var x);

// segments[p] lists row indices of `scores` belonging to group p. Rows not in
// any segment get weight zero.
Var segment_softmax(Var scores, const std::vector<std::vector<int>>& segments);
Var segment_weighted_sum(Var weights, Var values,
                         const std::vector<std::vector<int>>& segments);

}  // namespace ad
}  // namespace hyperpriv
