#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance run. None of these call the library routine they check.

#include "hyperpriv/hypergraph.hpp"
#include "hyperpriv/model.hpp"
#include "hyperpriv/train.hpp"
#include "support.hpp"

#include <cmath>
#include <random>
#include <vector>

namespace testing_support {

using namespace hyperpriv;

inline HypergraphTopology random_two_uniform(std::mt19937_64& gen, int n_nodes, int n_edges) {
  HypergraphTopology t;
  t.n_nodes = n_nodes;
  std::uniform_real_distribution<double> w(0.3, 2.0);
  for (int e = 0; e < n_edges; ++e) {
    int a = static_cast<int>(gen() % n_nodes), b = static_cast<int>(gen() % n_nodes);
    while (b == a) b = static_cast<int>(gen() % n_nodes);
    t.edges.push_back({e, EdgeKind::Intra, {std::min(a, b), std::max(a, b)}, w(gen)});
  }
  return t;
}

// Pairwise graph convolution with A = sum_e w_e 1_e 1_e^T, each pair edge
// averaging its two endpoints, symmetric degree normalisation.
inline Matrix pairwise_layer(const HypergraphTopology& t, const Matrix& x, const Matrix& theta, bool last) {
  const int n = t.n_nodes;
  std::vector<double> deg(n, 0.0);
  std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
  for (const auto& e : t.edges) {
    const int i = e.members[0], j = e.members[1];
    deg[i] += e.weight;
    deg[j] += e.weight;
    for (int u : {i, j}) {
      for (int v : {i, j}) a[u][v] += e.weight / 2.0;
    }
  }
  const Matrix xt = x * theta;
  Matrix out = Matrix::Zero(n, theta.cols());
  for (int u = 0; u < n; ++u) {
    if (deg[u] == 0) continue;
    for (int v = 0; v < n; ++v) {
      if (a[u][v] == 0) continue;
      out.row(u) += a[u][v] / std::sqrt(deg[u] * deg[v]) * xt.row(v);
    }
  }
  if (!last) out = out.cwiseMax(0.0);
  return out;
}

// Unordered-pair enumeration; written independently of the library loop.
inline double brute_cindex(const std::vector<double>& r, const std::vector<double>& t,
                    const std::vector<bool>& e) {
  double num = 0;
  int den = 0;
  for (std::size_t a = 0; a < r.size(); ++a) {
    for (std::size_t b = a + 1; b < r.size(); ++b) {
      std::size_t first, second;
      if (t[a] < t[b]) {
        first = a, second = b;
      } else if (t[b] < t[a]) {
        first = b, second = a;
      } else if (e[a] && !e[b]) {
        first = a, second = b;
      } else if (e[b] && !e[a]) {
        first = b, second = a;
      } else {
        continue;
      }
      if (!e[first]) continue;
      ++den;
      num += r[first] > r[second] ? 1.0 : r[first] == r[second] ? 0.5 : 0.0;
    }
  }
  return num / den;
}


// Row softmax and KL written out directly for the closed-form checks.
inline double kl_rows(const Matrix& p_logits, const Matrix& q_logits, double tau) {
  double total = 0;
  for (Eigen::Index r = 0; r < p_logits.rows(); ++r) {
    const Eigen::RowVectorXd a = (p_logits.row(r) / tau).array().exp();
    const Eigen::RowVectorXd b = (q_logits.row(r) / tau).array().exp();
    const Eigen::RowVectorXd p = a / a.sum(), q = b / b.sum();
    for (Eigen::Index c = 0; c < p.size(); ++c) total += p[c] * std::log(p[c] / q[c]);
  }
  return total / static_cast<double>(p_logits.rows());
}


struct Micro {
  Cohort cohort;
  TrainingContext ctx;
  ModelDims dims;
};

inline Micro micro(std::uint64_t seed, const LossConfig& loss) {
  Micro m;
  m.cohort = generate_cohort(micro_gen_config(5, seed));
  TrainConfig c = micro_train_config();
  const Cohort prepared = prepare_cohort(m.cohort, c);
  m.ctx = build_context(prepared, c, {0, 1, 2, 3, 4});
  m.ctx.loss = loss;
  m.dims.slot_dims = m.ctx.features.dims();
  m.dims.d_in = c.d_in;
  m.dims.d_hidden = c.d_hidden;
  m.dims.d_att = c.d_att;
  m.dims.d_out = c.d_out;
  m.dims.n_layers = c.n_layers;
  return m;
}

// Flattened parameters in named() order.
inline Matrix flatten(const ModelParams& p) {
  std::vector<double> v;
  for (const auto& [name, m] : p.named()) v.insert(v.end(), m->data(), m->data() + m->size());
  return Eigen::Map<Matrix>(v.data(), static_cast<Eigen::Index>(v.size()), 1);
}

void unflatten(const Matrix& x, ModelParams& p) {
  Eigen::Index k = 0;
  for (auto& [name, m] : p.named()) {
    std::copy(x.data() + k, x.data() + k + m->size(), m->data());
    k += m->size();
  }
}

inline Matrix tape_gradient(const ModelParams& params, const TrainingContext& ctx) {
  ad::Tape tape;
  const ParamVars pv = ParamVars::on(tape, params, true);
  const TapeForward t = forward_tape(tape, pv, params.dims, ctx.features, ctx.teacher);
  const TapeForward s = forward_tape(tape, pv, params.dims, ctx.features, ctx.student);
  const TotalLoss loss = total_loss(t.task, s.task, ctx.labels, ctx.loss);
  tape.backward(loss.total);
  std::vector<double> g;
  for (const auto& v : pv.vars) {
    const Matrix gv = tape.grad(v);
    g.insert(g.end(), gv.data(), gv.data() + gv.size());
  }
  return Eigen::Map<Matrix>(g.data(), static_cast<Eigen::Index>(g.size()), 1);
}

}  // namespace testing_support
