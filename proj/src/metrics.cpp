#include "hyperpriv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace hyperpriv {
namespace {

void check_survival_input(std::size_t n_times, std::size_t n_events, const char* who) {
  if (n_times != n_events) throw std::invalid_argument(std::string(who) + ": length mismatch");
}

template <class T>
std::vector<T> pick(const std::vector<T>& v, const std::vector<bool>& mask, bool keep) {
  std::vector<T> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (mask[i] == keep) out.push_back(v[i]);
  }
  return out;
}

EndpointReport score_endpoint(const std::vector<double>& risk, const std::vector<double>& time,
                              const std::vector<bool>& event) {
  EndpointReport r;
  r.cindex = c_index(risk, time, event);
  const std::vector<bool> high = stratify_median(risk);
  const auto t_low = pick(time, high, false);
  const auto e_low = pick(event, high, false);
  const auto t_high = pick(time, high, true);
  const auto e_high = pick(event, high, true);
  r.km_low = kaplan_meier(t_low, e_low);
  r.km_high = kaplan_meier(t_high, e_high);
  const bool any_event = std::find(event.begin(), event.end(), true) != event.end();
  if (!t_low.empty() && !t_high.empty() && any_event) {
    r.log_rank = log_rank(t_low, e_low, t_high, e_high);
  } else {
    r.log_rank.valid = false;
  }
  return r;
}

nlohmann::json to_json(const EndpointReport& r) {
  return {{"cindex", r.cindex},
          {"km_low", to_json(r.km_low)},
          {"km_high", to_json(r.km_high)},
          {"log_rank",
           {{"statistic", r.log_rank.statistic},
            {"p_value", r.log_rank.p_value},
            {"valid", r.log_rank.valid}}}};
}

}  // namespace

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.empty()) throw std::invalid_argument("accuracy: empty input");
  if (preds.size() != labels.size()) throw std::invalid_argument("accuracy: length mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double c_index(const std::vector<double>& risks, const std::vector<double>& times,
               const std::vector<bool>& events) {
  if (risks.size() != times.size() || times.size() != events.size()) {
    throw std::invalid_argument("c_index: length mismatch");
  }
  const std::size_t n = risks.size();
  double concordant = 0.0;
  long comparable = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!events[i]) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      // i must fail first; at equal times only an event-vs-censored pair counts.
      const bool earlier = times[i] < times[j] || (times[i] == times[j] && !events[j]);
      if (!earlier) continue;
      ++comparable;
      if (risks[i] > risks[j]) {
        concordant += 1.0;
      } else if (risks[i] == risks[j]) {
        concordant += 0.5;
      }
    }
  }
  if (comparable == 0) throw NumericalError("c_index: no comparable pairs");
  return concordant / static_cast<double>(comparable);
}

double KMTable::survival_at(double t) const {
  double s = 1.0;
  for (const auto& r : rows) {
    if (r.time > t) break;
    s = r.survival;
  }
  return s;
}

KMTable kaplan_meier(const std::vector<double>& times, const std::vector<bool>& events) {
  check_survival_input(times.size(), events.size(), "kaplan_meier");
  std::map<double, std::pair<int, int>> at;  // time -> (events, censored)
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!(times[i] > 0)) throw std::invalid_argument("kaplan_meier: times must be > 0");
    auto& slot = at[times[i]];
    (events[i] ? slot.first : slot.second) += 1;
  }
  KMTable km;
  int at_risk = static_cast<int>(times.size());
  double s = 1.0;
  for (const auto& [t, counts] : at) {
    const auto [d, c] = counts;
    if (d > 0) {
      s *= 1.0 - static_cast<double>(d) / at_risk;
      km.rows.push_back({t, at_risk, d, s});
    }
    for (int k = 0; k < c; ++k) km.censor_times.push_back(t);
    at_risk -= d + c;
  }
  return km;
}

double chi_square_1dof_sf(double x) {
  if (x <= 0) return 1.0;
  return std::erfc(std::sqrt(x / 2.0));
}

LogRankResult log_rank(const std::vector<double>& times_a, const std::vector<bool>& events_a,
                       const std::vector<double>& times_b, const std::vector<bool>& events_b) {
  check_survival_input(times_a.size(), events_a.size(), "log_rank");
  check_survival_input(times_b.size(), events_b.size(), "log_rank");
  if (times_a.empty() || times_b.empty()) throw std::invalid_argument("log_rank: empty group");
  std::vector<double> event_times;
  for (std::size_t i = 0; i < times_a.size(); ++i) {
    if (events_a[i]) event_times.push_back(times_a[i]);
  }
  for (std::size_t i = 0; i < times_b.size(); ++i) {
    if (events_b[i]) event_times.push_back(times_b[i]);
  }
  if (event_times.empty()) throw std::invalid_argument("log_rank: no events");
  std::sort(event_times.begin(), event_times.end());
  event_times.erase(std::unique(event_times.begin(), event_times.end()), event_times.end());

  auto count = [](const std::vector<double>& ts, const std::vector<bool>& es, double t) {
    int risk = 0, dead = 0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
      if (ts[i] >= t) ++risk;
      if (ts[i] == t && es[i]) ++dead;
    }
    return std::pair{risk, dead};
  };

  double observed_minus_expected = 0.0;
  double variance = 0.0;
  for (double t : event_times) {
    const auto [n_a, d_a] = count(times_a, events_a, t);
    const auto [n_b, d_b] = count(times_b, events_b, t);
    const double n = n_a + n_b;
    const double d = d_a + d_b;
    observed_minus_expected += d_a - d * n_a / n;
    if (n > 1) variance += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1);
  }
  LogRankResult r;
  if (!(variance > 0)) {
    r.valid = false;
    return r;
  }
  r.statistic = observed_minus_expected * observed_minus_expected / variance;
  r.p_value = chi_square_1dof_sf(r.statistic);
  return r;
}

std::vector<bool> stratify_median(const std::vector<double>& risks) {
  if (risks.size() < 2) throw std::invalid_argument("stratify_median: need >= 2 patients");
  std::vector<double> sorted = risks;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  std::vector<bool> high(n);
  for (std::size_t i = 0; i < n; ++i) high[i] = risks[i] > median;
  return high;
}

EvalReport evaluate(const EvalInput& in, const std::string& pass) {
  EvalReport r;
  r.pass = pass;
  r.n_test = static_cast<int>(in.true_group.size());
  r.acc_group = accuracy(in.pred_group, in.true_group);
  r.acc_grade = accuracy(in.pred_grade, in.true_grade);
  r.pfs = score_endpoint(in.risk_pfs, in.pfs_time, in.pfs_event);
  r.os = score_endpoint(in.risk_os, in.os_time, in.os_event);
  return r;
}

nlohmann::json to_json(const KMTable& km) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : km.rows) {
    rows.push_back({{"time", r.time}, {"n_risk", r.n_risk}, {"n_event", r.n_event},
                    {"survival", r.survival}});
  }
  return {{"rows", rows}, {"censor_times", km.censor_times}};
}

nlohmann::json to_json(const EvalReport& r) {
  return {{"pass", r.pass},         {"n_test", r.n_test},
          {"acc_group", r.acc_group}, {"acc_grade", r.acc_grade},
          {"cindex_pfs", r.pfs.cindex}, {"cindex_os", r.os.cindex},
          {"pfs", to_json(r.pfs)},    {"os", to_json(r.os)}};
}

KMTable km_table_from_json(const nlohmann::json& j) {
  try {
    KMTable km;
    for (const auto& r : j.at("rows")) {
      km.rows.push_back({r.at("time").get<double>(), r.at("n_risk").get<int>(),
                         r.at("n_event").get<int>(), r.at("survival").get<double>()});
    }
    km.censor_times = j.at("censor_times").get<std::vector<double>>();
    return km;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("KM table: ") + e.what());
  }
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  auto endpoint = [](const nlohmann::json& e) {
    EndpointReport r;
    r.cindex = e.at("cindex").get<double>();
    r.km_low = km_table_from_json(e.at("km_low"));
    r.km_high = km_table_from_json(e.at("km_high"));
    const auto& lr = e.at("log_rank");
    r.log_rank = {lr.at("statistic").get<double>(), lr.at("p_value").get<double>(),
                  lr.at("valid").get<bool>()};
    return r;
  };
  try {
    EvalReport r;
    r.pass = j.at("pass").get<std::string>();
    r.n_test = j.at("n_test").get<int>();
    r.acc_group = j.at("acc_group").get<double>();
    r.acc_grade = j.at("acc_grade").get<double>();
    r.pfs = endpoint(j.at("pfs"));
    r.os = endpoint(j.at("os"));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("eval report: ") + e.what());
  }
}

void write_km_csv(const KMTable& low, const KMTable& high, std::ostream& out) {
  out << "time,n_risk,n_event,survival,group\n";
  out << std::setprecision(17);
  for (const auto& [table, name] : {std::pair{&low, "low"}, std::pair{&high, "high"}}) {
    for (const auto& r : table->rows) {
      out << r.time << ',' << r.n_risk << ',' << r.n_event << ',' << r.survival << ',' << name
          << '\n';
    }
  }
}

void write_km_svg(const KMTable& low, const KMTable& high, const LogRankResult& test,
                  const std::string& title, std::ostream& out) {
  const double width = 480, height = 320, left = 50, right = 20, top = 30, bottom = 40;
  double t_max = 1.0;
  for (const KMTable* km : {&low, &high}) {
    if (!km->rows.empty()) t_max = std::max(t_max, km->rows.back().time);
    if (!km->censor_times.empty()) t_max = std::max(t_max, km->censor_times.back());
  }
  auto x = [&](double t) { return left + (width - left - right) * t / t_max; };
  auto y = [&](double s) { return top + (height - top - bottom) * (1.0 - s); };

  out << std::fixed << std::setprecision(2);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << title << "</text>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << y(0) << "\" x2=\"" << width - right << "\" y2=\""
      << y(0) << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << y(0) << "\" x2=\"" << left << "\" y2=\"" << y(1)
      << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << (width - right) / 2 << "\" y=\"" << height - 8
      << "\" font-size=\"11\">time (months)</text>\n";
  out << "<text x=\"6\" y=\"" << y(1) + 4 << "\" font-size=\"11\">1.0</text>\n";
  out << "<text x=\"6\" y=\"" << y(0) + 4 << "\" font-size=\"11\">0.0</text>\n";

  for (const auto& [km, colour] : {std::pair{&low, "blue"}, std::pair{&high, "red"}}) {
    std::ostringstream path;
    path << std::fixed << std::setprecision(2) << "M " << x(0) << ' ' << y(1);
    for (const auto& r : km->rows) path << " H " << x(r.time) << " V " << y(r.survival);
    path << " H " << x(t_max);
    out << "<path d=\"" << path.str() << "\" fill=\"none\" stroke=\"" << colour
        << "\" stroke-width=\"1.5\"/>\n";
    for (double t : km->censor_times) {
      const double sy = y(km->survival_at(t));
      out << "<line x1=\"" << x(t) << "\" y1=\"" << sy - 4 << "\" x2=\"" << x(t) << "\" y2=\""
          << sy + 4 << "\" stroke=\"" << colour << "\"/>\n";
    }
  }
  std::ostringstream p;
  if (test.valid) {
    p << "log-rank p = " << std::setprecision(4) << std::defaultfloat << test.p_value;
  } else {
    p << "log-rank p undefined";
  }
  out << "<text x=\"" << width - right - 150 << "\" y=\"" << top + 14 << "\" font-size=\"11\">"
      << p.str() << "</text>\n";
  out << "<text x=\"" << width - right - 150 << "\" y=\"" << top + 28
      << "\" font-size=\"11\" fill=\"blue\">low risk</text>\n";
  out << "<text x=\"" << width - right - 150 << "\" y=\"" << top + 42
      << "\" font-size=\"11\" fill=\"red\">high risk</text>\n";
  out << "</svg>\n";
}

}  // namespace hyperpriv
