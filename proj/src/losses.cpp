#include "hyperpriv/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace hyperpriv {
namespace {

// Row-wise log-softmax with max shift.
Matrix log_softmax_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mx = x.row(r).maxCoeff();
    const double lse = mx + std::log((x.row(r).array() - mx).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}

double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double mx = std::max(a, b);
  return mx + std::log(std::exp(a - mx) + std::exp(b - mx));
}

void check_finite(const Matrix& m, const char* op) {
  if (!m.allFinite()) throw NumericalError(std::string(op) + ": non-finite input");
}

}  // namespace

LossResult cross_entropy(const Matrix& logits, const std::vector<int>& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows()) {
    throw std::invalid_argument("cross_entropy: label count != logit rows");
  }
  if (logits.rows() == 0) throw std::invalid_argument("cross_entropy: empty batch");
  check_finite(logits, "cross_entropy");
  const Matrix logp = log_softmax_rows(logits);
  const double n = static_cast<double>(logits.rows());
  LossResult r;
  r.grad = logp.array().exp() / n;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= logits.cols()) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " out of range");
    }
    r.value -= logp(i, y);
    r.grad(i, y) -= 1.0 / n;
  }
  r.value /= n;
  return r;
}

CoxResult cox_nll(const Matrix& risks, const std::vector<double>& times,
                  const std::vector<bool>& events) {
  const auto n = static_cast<std::size_t>(risks.rows());
  if (risks.cols() != 1 || times.size() != n || events.size() != n) {
    throw std::invalid_argument("cox_nll: risks must be n x 1 with matching times/events");
  }
  check_finite(risks, "cox_nll");
  CoxResult res;
  res.grad = Matrix::Zero(static_cast<Eigen::Index>(n), 1);
  const auto n_events = std::count(events.begin(), events.end(), true);
  if (n_events == 0) {
    res.no_events = true;
    return res;
  }
  for (double t : times) {
    if (!(t > 0)) throw std::invalid_argument("cox_nll: times must be > 0");
  }

  // Ascending by time; a block is a run of equal times.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });
  std::vector<std::pair<std::size_t, std::size_t>> blocks;
  for (std::size_t s = 0; s < n;) {
    std::size_t e = s + 1;
    while (e < n && times[order[e]] == times[order[s]]) ++e;
    blocks.emplace_back(s, e);
    s = e;
  }

  // log sum_{j: t_j >= t_block} exp(r_j), built from the latest time backwards.
  const double neg_inf = -std::numeric_limits<double>::infinity();
  std::vector<double> risk_lse(blocks.size());
  double acc = neg_inf;
  for (std::size_t b = blocks.size(); b-- > 0;) {
    for (std::size_t k = blocks[b].first; k < blocks[b].second; ++k) {
      acc = log_add(acc, risks(static_cast<Eigen::Index>(order[k]), 0));
    }
    risk_lse[b] = acc;
  }

  // log sum over events with t_i <= t_block of exp(-lse_i), forwards in time.
  const double inv_events = 1.0 / static_cast<double>(n_events);
  double log_hazard_acc = neg_inf;
  double value = 0.0;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (std::size_t k = blocks[b].first; k < blocks[b].second; ++k) {
      const std::size_t i = order[k];
      if (events[i]) {
        value -= risks(static_cast<Eigen::Index>(i), 0) - risk_lse[b];
        log_hazard_acc = log_add(log_hazard_acc, -risk_lse[b]);
      }
    }
    for (std::size_t k = blocks[b].first; k < blocks[b].second; ++k) {
      const std::size_t i = order[k];
      const double r = risks(static_cast<Eigen::Index>(i), 0);
      const double expected = log_hazard_acc == neg_inf ? 0.0 : std::exp(r + log_hazard_acc);
      res.grad(static_cast<Eigen::Index>(i), 0) =
          -inv_events * ((events[i] ? 1.0 : 0.0) - expected);
    }
  }
  res.value = value * inv_events;
  return res;
}

PairLossResult smooth_l1(const Matrix& student, const Matrix& teacher, double beta) {
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols()) {
    throw std::invalid_argument("smooth_l1: dimension mismatch");
  }
  if (!(beta > 0)) throw std::invalid_argument("smooth_l1: beta must be > 0");
  const double n = std::max<double>(1.0, static_cast<double>(student.rows()));
  PairLossResult r;
  r.grad_first = Matrix(student.rows(), student.cols());
  for (Eigen::Index i = 0; i < student.rows(); ++i) {
    for (Eigen::Index j = 0; j < student.cols(); ++j) {
      const double d = student(i, j) - teacher(i, j);
      if (std::abs(d) < beta) {
        r.value += 0.5 * d * d / beta;
        r.grad_first(i, j) = d / beta / n;
      } else {
        r.value += std::abs(d) - 0.5 * beta;
        r.grad_first(i, j) = (d > 0 ? 1.0 : -1.0) / n;
      }
    }
  }
  r.value /= n;
  r.grad_second = -r.grad_first;
  return r;
}

double feature_distill(const Matrix& student_sharp, const Matrix& teacher_sharp,
                       const Matrix& student_smooth, const Matrix& teacher_smooth, double beta) {
  return smooth_l1(student_sharp, teacher_sharp, beta).value +
         smooth_l1(student_smooth, teacher_smooth, beta).value;
}

PairLossResult kl_softmax(const Matrix& student, const Matrix& teacher, double tau,
                          KdDirection direction, bool tau_squared) {
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols()) {
    throw std::invalid_argument("kl_softmax: dimension mismatch");
  }
  if (!(tau > 0)) throw std::invalid_argument("kl_softmax: tau must be > 0");
  check_finite(student, "kl_softmax");
  check_finite(teacher, "kl_softmax");
  const bool student_first = direction == KdDirection::StudentFirst;
  // KL(p || q): p comes from `first`, q from `second`.
  const Matrix& first = student_first ? student : teacher;
  const Matrix& second = student_first ? teacher : student;
  const Matrix log_p = log_softmax_rows(first / tau);
  const Matrix log_q = log_softmax_rows(second / tau);
  const Matrix p = log_p.array().exp();
  const Matrix q = log_q.array().exp();
  const double n = std::max<double>(1.0, static_cast<double>(student.rows()));
  const double factor = tau_squared ? tau * tau : 1.0;

  Matrix d_first(first.rows(), first.cols());
  double value = 0.0;
  for (Eigen::Index i = 0; i < first.rows(); ++i) {
    const Eigen::RowVectorXd diff = log_p.row(i) - log_q.row(i);
    const double kl = p.row(i).dot(diff);
    value += std::max(kl, 0.0);
    d_first.row(i) = p.row(i).array() * (diff.array() - kl);
  }
  const double scale = factor / (n * tau);
  d_first *= scale;
  const Matrix d_second = (q - p) * scale;

  PairLossResult r;
  r.value = value * factor / n;
  r.grad_first = student_first ? d_first : d_second;
  r.grad_second = student_first ? d_second : d_first;
  return r;
}

double logit_distill(const std::vector<Matrix>& student_by_task,
                     const std::vector<Matrix>& teacher_by_task, double tau,
                     KdDirection direction) {
  if (student_by_task.size() != teacher_by_task.size()) {
    throw std::invalid_argument("logit_distill: task count mismatch");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < student_by_task.size(); ++k) {
    total += kl_softmax(student_by_task[k], teacher_by_task[k], tau, direction).value;
  }
  return total;
}

PairLossResult info_nce(const Matrix& anchors, const Matrix& positives, double tau) {
  if (anchors.rows() != positives.rows() || anchors.cols() != positives.cols()) {
    throw std::invalid_argument("info_nce: dimension mismatch");
  }
  if (anchors.rows() < 2) throw std::invalid_argument("info_nce: batch size must be >= 2");
  if (!(tau > 0)) throw std::invalid_argument("info_nce: tau must be > 0");
  check_finite(anchors, "info_nce");
  check_finite(positives, "info_nce");
  const Eigen::Index n = anchors.rows();
  const Vector a_norm = anchors.rowwise().norm();
  const Vector p_norm = positives.rowwise().norm();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (a_norm[i] == 0.0 || p_norm[i] == 0.0) {
      throw NumericalError("info_nce: zero-norm embedding at row " + std::to_string(i));
    }
  }
  const Matrix a_hat = a_norm.cwiseInverse().asDiagonal() * anchors;
  const Matrix p_hat = p_norm.cwiseInverse().asDiagonal() * positives;
  const Matrix sim = a_hat * p_hat.transpose();
  const Matrix log_prob = log_softmax_rows(sim / tau);

  PairLossResult r;
  Matrix d_sim = log_prob.array().exp();
  for (Eigen::Index i = 0; i < n; ++i) {
    r.value -= log_prob(i, i);
    d_sim(i, i) -= 1.0;
  }
  r.value /= static_cast<double>(n);
  d_sim /= (static_cast<double>(n) * tau);

  // Backprop through cosine similarity.
  const Matrix d_a_hat = d_sim * p_hat;
  const Matrix d_p_hat = d_sim.transpose() * a_hat;
  const Vector a_radial = (d_sim.cwiseProduct(sim)).rowwise().sum();
  const Vector p_radial = (d_sim.cwiseProduct(sim)).colwise().sum().transpose();
  r.grad_first = a_norm.cwiseInverse().asDiagonal() *
                 (d_a_hat - a_radial.asDiagonal() * a_hat);
  r.grad_second = p_norm.cwiseInverse().asDiagonal() *
                  (d_p_hat - p_radial.asDiagonal() * p_hat);
  return r;
}

namespace ad {
namespace {

Var scalar_node(Var a, double value, Matrix grad_a) {
  Tape& t = *a.tape();
  Matrix out(1, 1);
  out(0, 0) = value;
  return t.record(std::move(out), a.requires_grad(),
                  [a, grad_a = std::move(grad_a)](Tape& tape, const Matrix& g) {
                    tape.accumulate(a, grad_a * g(0, 0));
                  });
}

Var scalar_node(Var a, Var b, PairLossResult r) {
  Tape& t = *a.tape();
  Matrix out(1, 1);
  out(0, 0) = r.value;
  return t.record(std::move(out), any_requires_grad({a, b}),
                  [a, b, ga = std::move(r.grad_first), gb = std::move(r.grad_second)](
                      Tape& tape, const Matrix& g) {
                    tape.accumulate(a, ga * g(0, 0));
                    tape.accumulate(b, gb * g(0, 0));
                  });
}

}  // namespace

Var cross_entropy(Var logits, const std::vector<int>& labels) {
  auto r = hyperpriv::cross_entropy(logits.value(), labels);
  return scalar_node(logits, r.value, std::move(r.grad));
}

Var cox_nll(Var risks, const std::vector<double>& times, const std::vector<bool>& events) {
  auto r = hyperpriv::cox_nll(risks.value(), times, events);
  return scalar_node(risks, r.value, std::move(r.grad));
}

Var smooth_l1(Var student, Var teacher, double beta) {
  return scalar_node(student, teacher, hyperpriv::smooth_l1(student.value(), teacher.value(), beta));
}

Var kl_softmax(Var student, Var teacher, double tau, KdDirection direction, bool tau_squared) {
  return scalar_node(student, teacher,
                     hyperpriv::kl_softmax(student.value(), teacher.value(), tau, direction,
                                           tau_squared));
}

Var info_nce(Var anchors, Var positives, double tau) {
  return scalar_node(anchors, positives,
                     hyperpriv::info_nce(anchors.value(), positives.value(), tau));
}

}  // namespace ad

std::string to_string(KdDirection d) {
  return d == KdDirection::StudentFirst ? "student_first" : "teacher_first";
}

std::string to_string(TaskOn t) {
  switch (t) {
    case TaskOn::Both:
      return "both";
    case TaskOn::Student:
      return "student";
    case TaskOn::Teacher:
      return "teacher";
  }
  return "both";
}

KdDirection kd_direction_from_string(const std::string& s) {
  if (s == "student_first") return KdDirection::StudentFirst;
  if (s == "teacher_first") return KdDirection::TeacherFirst;
  throw ConfigError("invalid config field 'kd_direction': " + s);
}

TaskOn task_on_from_string(const std::string& s) {
  if (s == "both") return TaskOn::Both;
  if (s == "student") return TaskOn::Student;
  if (s == "teacher") return TaskOn::Teacher;
  throw ConfigError("invalid config field 'task_on': " + s);
}

TotalLoss total_loss(const TaskOutputs& teacher, const TaskOutputs& student,
                     const TaskLabels& labels, const LossConfig& config) {
  const auto& rows = labels.rows;
  ad::Tape& tape = *teacher.z_sharp.tape();
  TotalLoss out;
  auto& b = out.breakdown;

  std::vector<ad::Var> terms;
  auto task_terms = [&](const TaskOutputs& pass) {
    ad::Var ce_group = ad::cross_entropy(ad::gather_rows(pass.logits_group, rows), labels.group);
    ad::Var ce_grade = ad::cross_entropy(ad::gather_rows(pass.logits_grade, rows), labels.grade);
    ad::Var ce_loc = ad::cross_entropy(ad::gather_rows(pass.logits_location, rows), labels.location);
    ad::Var cox_pfs = ad::cox_nll(ad::gather_rows(pass.risk_pfs, rows), labels.pfs_time,
                              labels.pfs_event);
    ad::Var cox_os = ad::cox_nll(ad::gather_rows(pass.risk_os, rows), labels.os_time,
                             labels.os_event);
    b.ce_group += ce_group.scalar();
    b.ce_grade += ce_grade.scalar();
    b.ce_location += ce_loc.scalar();
    b.cox_pfs += cox_pfs.scalar();
    b.cox_os += cox_os.scalar();
    terms.insert(terms.end(), {ce_group, ce_grade, ce_loc, cox_pfs, cox_os});
  };
  if (config.task_on != TaskOn::Student) task_terms(teacher);
  if (config.task_on != TaskOn::Teacher) task_terms(student);
  {
    const auto count = std::count(labels.pfs_event.begin(), labels.pfs_event.end(), true);
    const auto count_os = std::count(labels.os_event.begin(), labels.os_event.end(), true);
    b.no_events_warning = count == 0 || count_os == 0;
  }

  auto target = [&](ad::Var v) { return config.stop_teacher_grad ? ad::detach(v) : v; };

  if (config.lambda1 != 0.0) {
    ad::Var feat = ad::add(
        ad::smooth_l1(ad::gather_rows(student.z_sharp, rows),
                      target(ad::gather_rows(teacher.z_sharp, rows)), config.smooth_l1_beta),
        ad::smooth_l1(ad::gather_rows(student.z_smooth, rows),
                      target(ad::gather_rows(teacher.z_smooth, rows)), config.smooth_l1_beta));
    b.feat = feat.scalar();
    terms.push_back(ad::scale(feat, config.lambda1));
  }
  if (config.lambda2 != 0.0) {
    ad::Var kl_group = ad::kl_softmax(ad::gather_rows(student.logits_group, rows),
                                  target(ad::gather_rows(teacher.logits_group, rows)),
                                  config.tau_kd, config.kd_direction, config.tau_squared_scaling);
    // Survival has no class logits: distil the cohort-level softmax over risks.
    ad::Var kl_pfs = ad::kl_softmax(ad::transpose(ad::gather_rows(student.risk_pfs, rows)),
                                target(ad::transpose(ad::gather_rows(teacher.risk_pfs, rows))),
                                config.tau_kd, config.kd_direction, config.tau_squared_scaling);
    ad::Var logit = ad::add(kl_group, kl_pfs);
    b.logit = logit.scalar();
    terms.push_back(ad::scale(logit, config.lambda2));
  }

  ad::Var total = terms.empty() ? tape.constant(Matrix::Zero(1, 1)) : terms.front();
  for (std::size_t k = 1; k < terms.size(); ++k) total = ad::add(total, terms[k]);
  out.total = total;
  b.total = total.scalar();
  return out;
}

LossBreakdown total_loss(const TaskValues& teacher, const TaskValues& student,
                         const TaskLabels& labels, const LossConfig& config) {
  ad::Tape tape;
  auto wrap = [&](const TaskValues& v) {
    return TaskOutputs{tape.constant(v.z_sharp),        tape.constant(v.z_smooth),
                       tape.constant(v.logits_group),   tape.constant(v.logits_grade),
                       tape.constant(v.logits_location), tape.constant(v.risk_pfs),
                       tape.constant(v.risk_os)};
  };
  return total_loss(wrap(teacher), wrap(student), labels, config).breakdown;
}

}  // namespace hyperpriv
