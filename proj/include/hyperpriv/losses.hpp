#pragma once

#include "hyperpriv/autodiff.hpp"
#include "hyperpriv/common.hpp"

#include <string>
#include <vector>

namespace hyperpriv {

// Value and gradient of a scalar loss with one or two matrix inputs.
struct LossResult {
  double value = 0.0;
  Matrix grad;
};

struct PairLossResult {
  double value = 0.0;
  Matrix grad_first;
  Matrix grad_second;
};

struct CoxResult {
  double value = 0.0;
  Matrix grad;  // n x 1
  bool no_events = false;
};

// Mean over rows of -log softmax(logits)[label].
LossResult cross_entropy(const Matrix& logits, const std::vector<int>& labels);

// Breslow negative partial log-likelihood normalised by the event count.
// Returns 0 with no_events set when every observation is censored.
CoxResult cox_nll(const Matrix& risks, const std::vector<double>& times,
                  const std::vector<bool>& events);

// Smooth-L1 summed over columns, averaged over rows.
PairLossResult smooth_l1(const Matrix& student, const Matrix& teacher, double beta = 1.0);

double feature_distill(const Matrix& student_sharp, const Matrix& teacher_sharp,
                       const Matrix& student_smooth, const Matrix& teacher_smooth,
                       double beta = 1.0);

enum class KdDirection { StudentFirst, TeacherFirst };

// Row-wise KL between temperature-scaled softmax distributions, averaged over
// rows. StudentFirst computes KL(softmax(s/tau) || softmax(t/tau)).
PairLossResult kl_softmax(const Matrix& student, const Matrix& teacher, double tau,
                          KdDirection direction = KdDirection::StudentFirst,
                          bool tau_squared = false);

double logit_distill(const std::vector<Matrix>& student_by_task,
                     const std::vector<Matrix>& teacher_by_task, double tau,
                     KdDirection direction = KdDirection::StudentFirst);

// In-batch InfoNCE with cosine similarity. Row i of `positives` is the
// positive for anchor i; the other rows of `positives` are its negatives.
PairLossResult info_nce(const Matrix& anchors, const Matrix& positives, double tau);

// Tape versions. Gradients flow to every input that requires them.
namespace ad {
Var cross_entropy(Var logits, const std::vector<int>& labels);
Var cox_nll(Var risks, const std::vector<double>& times, const std::vector<bool>& events);
Var smooth_l1(Var student, Var teacher, double beta);
Var kl_softmax(Var student, Var teacher, double tau, KdDirection direction, bool tau_squared);
Var info_nce(Var anchors, Var positives, double tau);
}  // namespace ad

enum class TaskOn { Both, Student, Teacher };

struct LossConfig {
  double lambda1 = 1.0;  // feature distillation weight
  double lambda2 = 0.5;  // logit distillation weight
  double tau_kd = 2.0;
  double smooth_l1_beta = 1.0;
  KdDirection kd_direction = KdDirection::StudentFirst;
  bool tau_squared_scaling = false;
  // Off by default: with shared parameters, frozen teacher targets let the
  // teacher-student gap grow without bound and the total loss rises.
  bool stop_teacher_grad = false;
  TaskOn task_on = TaskOn::Both;
};

std::string to_string(KdDirection d);
std::string to_string(TaskOn t);
KdDirection kd_direction_from_string(const std::string& s);
TaskOn task_on_from_string(const std::string& s);

struct LossBreakdown {
  double ce_group = 0.0;
  double ce_grade = 0.0;
  double ce_location = 0.0;
  double cox_pfs = 0.0;
  double cox_os = 0.0;
  double feat = 0.0;
  double logit = 0.0;
  double total = 0.0;
  bool no_events_warning = false;

  double task_sum() const { return ce_group + ce_grade + ce_location + cox_pfs + cox_os; }
  bool operator==(const LossBreakdown&) const = default;
};

// Supervision for the patients in `rows` (labels are aligned with rows).
struct TaskLabels {
  std::vector<int> rows;
  std::vector<int> group;
  std::vector<int> grade;
  std::vector<int> location;
  std::vector<double> pfs_time;
  std::vector<bool> pfs_event;
  std::vector<double> os_time;
  std::vector<bool> os_event;
};

// Per-patient outputs of one pass (one row per patient in the cohort).
struct TaskOutputs {
  ad::Var z_sharp;
  ad::Var z_smooth;
  ad::Var logits_group;
  ad::Var logits_grade;
  ad::Var logits_location;
  ad::Var risk_pfs;  // n x 1
  ad::Var risk_os;   // n x 1
};

struct TaskValues {
  Matrix z_sharp;
  Matrix z_smooth;
  Matrix logits_group;
  Matrix logits_grade;
  Matrix logits_location;
  Matrix risk_pfs;
  Matrix risk_os;
};

struct TotalLoss {
  ad::Var total;
  LossBreakdown breakdown;
};

// Task losses on the passes selected by task_on, feature distillation on
// (z_sharp, z_smooth) and logit distillation over group logits plus the
// cohort-level softmax of PFS risks, restricted to labels.rows.
TotalLoss total_loss(const TaskOutputs& teacher, const TaskOutputs& student,
                     const TaskLabels& labels, const LossConfig& config);

LossBreakdown total_loss(const TaskValues& teacher, const TaskValues& student,
                         const TaskLabels& labels, const LossConfig& config);

}  // namespace hyperpriv
