#include "hyperpriv/encoder.hpp"

#include "hyperpriv/autodiff.hpp"
#include "hyperpriv/losses.hpp"
#include "hyperpriv/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace hyperpriv {
namespace {

Matrix glorot(int rows, int cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / (rows + cols));
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = (2.0 * rng.uniform() - 1.0) * limit;
  }
  return m;
}

Matrix stack_views(const Cohort& cohort) {
  const int d_m = static_cast<int>(cohort.patients.front().mri_views.front().size());
  Matrix x(cohort.size() * kMriViews, d_m);
  for (int p = 0; p < cohort.size(); ++p) {
    for (int v = 0; v < kMriViews; ++v) {
      const auto& view = cohort.patients[p].mri_views[v];
      x.row(p * kMriViews + v) = Eigen::Map<const Eigen::RowVectorXd>(view.data(), d_m);
    }
  }
  return x;
}

ad::Var head_forward(ad::Tape& tape, const std::vector<ad::Var>& params, const Matrix& x) {
  ad::Var in = tape.constant(x);
  ad::Var h = ad::tanh(ad::add_row(ad::matmul_nt(in, params[0]), params[1]));
  return ad::add_row(ad::matmul_nt(h, params[2]), params[3]);
}

std::vector<std::vector<std::vector<double>>> split_views(const Matrix& embedded, int n_patients) {
  std::vector<std::vector<std::vector<double>>> out(n_patients);
  for (int p = 0; p < n_patients; ++p) {
    out[p].assign(kMriViews, std::vector<double>(embedded.cols()));
    for (int v = 0; v < kMriViews; ++v) {
      for (Eigen::Index k = 0; k < embedded.cols(); ++k) out[p][v][k] = embedded(p * kMriViews + v, k);
    }
  }
  return out;
}

Matrix augment_rows(const Matrix& x, const AugmentConfig& cfg, Rng& rng) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    out.row(r) = augment(x.row(r).transpose(), cfg, rng).transpose();
  }
  return out;
}

}  // namespace

ProjectionHead ProjectionHead::init(int d_m, int d_h, int d_z, Rng& rng) {
  ProjectionHead h;
  h.w1 = glorot(d_h, d_m, rng);
  h.b1 = Matrix::Zero(1, d_h);
  h.w2 = glorot(d_z, d_h, rng);
  h.b2 = Matrix::Zero(1, d_z);
  return h;
}

Matrix ProjectionHead::embed(const Matrix& views) const {
  Matrix pre = views * w1.transpose();
  pre.rowwise() += b1.row(0);
  return pre.array().tanh().matrix();
}

Matrix ProjectionHead::project(const Matrix& views) const {
  Matrix z = embed(views) * w2.transpose();
  z.rowwise() += b2.row(0);
  return z;
}

nlohmann::json ProjectionHead::to_json() const {
  return {{"w1", matrix_to_json(w1)},
          {"b1", matrix_to_json(b1)},
          {"w2", matrix_to_json(w2)},
          {"b2", matrix_to_json(b2)}};
}

ProjectionHead ProjectionHead::from_json(const nlohmann::json& j) {
  ProjectionHead h;
  h.w1 = matrix_from_json(j.at("w1"), "head.w1");
  h.b1 = matrix_from_json(j.at("b1"), "head.b1");
  h.w2 = matrix_from_json(j.at("w2"), "head.w2");
  h.b2 = matrix_from_json(j.at("b2"), "head.b2");
  if (h.b1.cols() != h.w1.rows() || h.w2.cols() != h.w1.rows() || h.b2.cols() != h.w2.rows()) {
    throw ParseError("head: inconsistent shapes");
  }
  return h;
}

Vector augment(const Vector& view, const AugmentConfig& config, Rng& rng) {
  Vector out = view;
  for (Eigen::Index k = 0; k < out.size(); ++k) {
    if (config.sigma > 0) out[k] += rng.normal(0.0, config.sigma);
    if (config.p_drop > 0 && rng.uniform() < config.p_drop) out[k] = 0.0;
  }
  return out;
}

PretrainResult pretrain(const Cohort& cohort, const PretrainConfig& config) {
  if (cohort.patients.empty()) throw ConfigError("pretrain: empty cohort");
  if (config.epochs < 0) throw ConfigError("invalid config field 'ssl_epochs': must be >= 0");
  if (!(config.tau > 0)) throw ConfigError("invalid config field 'ssl_tau': must be > 0");
  if (config.batch_size < 2) throw ConfigError("invalid config field 'ssl_batch_size': must be >= 2");

  const Matrix views = stack_views(cohort);
  const int d_m = static_cast<int>(views.cols());
  const Rng root(config.seed);
  Rng init_rng = root.derive("ssl_init");
  Rng aug_rng = root.derive("ssl_augment");
  Rng order_rng = root.derive("ssl_order");

  PretrainResult result;
  result.head = ProjectionHead::init(d_m, config.d_h, config.d_z, init_rng);
  if (config.epochs == 0) {
    // Nothing learned: hand back the raw views.
    result.refined.resize(cohort.size());
    for (int p = 0; p < cohort.size(); ++p) result.refined[p] = cohort.patients[p].mri_views;
    return result;
  }

  auto batch_loss = [&](const ProjectionHead& head, const Matrix& a, const Matrix& b) {
    return info_nce(head.project(a), head.project(b), config.tau).value;
  };
  Rng probe_rng = root.derive("ssl_probe");
  const Matrix probe_a = augment_rows(views, config.augment, probe_rng);
  const Matrix probe_b = augment_rows(views, config.augment, probe_rng);
  result.initial_loss = batch_loss(result.head, probe_a, probe_b);

  Optimizer opt(OptimizerConfig{OptimizerKind::Adam, config.lr});
  std::vector<int> order(views.rows());
  std::iota(order.begin(), order.end(), 0);
  const int batch = std::min<int>(config.batch_size, static_cast<int>(views.rows()));

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[order_rng.below(i)]);
    }
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start + 1 < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      if (end - start < 2) break;
      Matrix x(static_cast<Eigen::Index>(end - start), d_m);
      for (std::size_t r = start; r < end; ++r) x.row(r - start) = views.row(order[r]);
      const Matrix a = augment_rows(x, config.augment, aug_rng);
      const Matrix b = augment_rows(x, config.augment, aug_rng);

      ad::Tape tape;
      std::vector<ad::Var> params{tape.variable(result.head.w1), tape.variable(result.head.b1),
                                  tape.variable(result.head.w2), tape.variable(result.head.b2)};
      ad::Var loss = ad::info_nce(head_forward(tape, params, a), head_forward(tape, params, b),
                                  config.tau);
      const double value = loss.scalar();
      if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "pretrain diverged at epoch " << epoch << " batch " << batches
            << " (loss=" << value << ")";
        throw NumericalError(msg.str());
      }
      tape.backward(loss);
      std::vector<Matrix> grads;
      for (const auto& p : params) grads.push_back(tape.grad(p));
      opt.step({&result.head.w1, &result.head.b1, &result.head.w2, &result.head.b2}, grads);
      epoch_loss += value;
      ++batches;
    }
    result.loss_history.push_back(epoch_loss / std::max(1, batches));
    result.probe_history.push_back(batch_loss(result.head, probe_a, probe_b));
  }
  result.final_loss = batch_loss(result.head, probe_a, probe_b);

  result.refined = split_views(result.head.embed(views), cohort.size());
  return result;
}

Cohort with_refined_views(const Cohort& cohort, const PretrainResult& result) {
  Cohort out = cohort;
  for (int p = 0; p < out.size(); ++p) out.patients[p].mri_refined = result.refined.at(p);
  return out;
}

Cohort with_refined_views(const Cohort& cohort, const ProjectionHead& head) {
  const auto refined = split_views(head.embed(stack_views(cohort)), cohort.size());
  Cohort out = cohort;
  for (int p = 0; p < out.size(); ++p) out.patients[p].mri_refined = refined[p];
  return out;
}

}  // namespace hyperpriv
