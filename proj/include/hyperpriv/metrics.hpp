#pragma once

#include "hyperpriv/common.hpp"

#include <json.hpp>

#include <ostream>
#include <string>
#include <vector>

namespace hyperpriv {

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels);

// Harrell's C. A pair is comparable when the shorter time is an event; pairs
// with equal times and two events are skipped. Throws NumericalError when no
// pair is comparable.
double c_index(const std::vector<double>& risks, const std::vector<double>& times,
               const std::vector<bool>& events);

struct KMRow {
  double time = 0.0;
  int n_risk = 0;
  int n_event = 0;
  double survival = 1.0;

  bool operator==(const KMRow&) const = default;
};

struct KMTable {
  std::vector<KMRow> rows;  // one per distinct event time
  std::vector<double> censor_times;

  // S(t) as a right-continuous step function; 1 before the first event.
  double survival_at(double t) const;
};

KMTable kaplan_meier(const std::vector<double>& times, const std::vector<bool>& events);

struct LogRankResult {
  double statistic = 0.0;
  double p_value = 1.0;
  bool valid = true;  // false when the variance is zero
};

// Upper tail of the chi-square distribution with one degree of freedom.
double chi_square_1dof_sf(double x);

LogRankResult log_rank(const std::vector<double>& times_a, const std::vector<bool>& events_a,
                       const std::vector<double>& times_b, const std::vector<bool>& events_b);

// true = high risk (strictly above the median).
std::vector<bool> stratify_median(const std::vector<double>& risks);

struct EndpointReport {
  double cindex = 0.5;
  KMTable km_low;
  KMTable km_high;
  LogRankResult log_rank;
};

struct EvalReport {
  std::string pass;  // "student" or "teacher"
  int n_test = 0;
  double acc_group = 0.0;
  double acc_grade = 0.0;
  EndpointReport pfs;
  EndpointReport os;
};

// Scores one pass on a set of patients. Risk groups come from a median split
// of the predicted risks over the same patients.
struct EvalInput {
  std::vector<int> pred_group, true_group;
  std::vector<int> pred_grade, true_grade;
  std::vector<double> risk_pfs, pfs_time;
  std::vector<bool> pfs_event;
  std::vector<double> risk_os, os_time;
  std::vector<bool> os_event;
};

EvalReport evaluate(const EvalInput& input, const std::string& pass);

nlohmann::json to_json(const KMTable& km);
nlohmann::json to_json(const EvalReport& report);
KMTable km_table_from_json(const nlohmann::json& j);
// Throws ParseError on a missing or mistyped field.
EvalReport eval_report_from_json(const nlohmann::json& j);

// CSV `time,n_risk,n_event,survival,group` for both risk groups.
void write_km_csv(const KMTable& low, const KMTable& high, std::ostream& out);

// Two step curves with censor ticks and the log-rank p-value.
void write_km_svg(const KMTable& low, const KMTable& high, const LogRankResult& test,
                  const std::string& title, std::ostream& out);

}  // namespace hyperpriv
