// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only when
// every criterion passes. Criteria 5 and 6 train 20 full models and take a
// while on one core.
#include "hyperpriv/cohort.hpp"
#include "hyperpriv/losses.hpp"
#include "hyperpriv/metrics.hpp"
#include "hyperpriv/model.hpp"
#include "hyperpriv/train.hpp"
#include "oracles.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

using namespace hyperpriv;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

// ---------------------------------------------------------------- criterion 1

constexpr double kFdStep = 1e-4;
constexpr double kFdTol = 1e-4;
constexpr int kFdPoints = 20;

void gradient_checks(Outcome& out) {
  const auto start = Clock::now();
  std::mt19937_64 gen(2024);
  std::map<std::string, double> worst;
  auto record = [&](const std::string& name, const Matrix& analytic, const Matrix& numeric) {
    worst[name] = std::max(worst[name], relative_error(analytic, numeric));
  };

  for (int point = 0; point < kFdPoints; ++point) {
    const int n = 3 + point % 5;
    {
      const Matrix x = random_matrix(gen, n, 3, 2.0);
      std::vector<int> labels(n);
      for (int& v : labels) v = static_cast<int>(gen() % 3);
      record("cross_entropy", cross_entropy(x, labels).grad,
             numeric_gradient([&](const Matrix& m) { return cross_entropy(m, labels).value; }, x, kFdStep));
    }
    {
      const Matrix r = random_matrix(gen, n + 4, 1);
      std::vector<double> times(n + 4);
      std::vector<bool> events(n + 4);
      for (int i = 0; i < n + 4; ++i) times[i] = 1 + 0.29 * i + (gen() % 7), events[i] = gen() % 3 != 0;
      events[0] = true;
      record("cox", cox_nll(r, times, events).grad,
             numeric_gradient([&](const Matrix& m) { return cox_nll(m, times, events).value; }, r, kFdStep));
    }
    {
      const Matrix a = random_matrix(gen, n, 6, 2.0), b = random_matrix(gen, n, 6, 2.0);
      const PairLossResult r = smooth_l1(a, b, 1.0);
      record("feature_distill", r.grad_first,
             numeric_gradient([&](const Matrix& m) { return smooth_l1(m, b, 1.0).value; }, a, kFdStep));
      record("feature_distill", r.grad_second,
             numeric_gradient([&](const Matrix& m) { return smooth_l1(a, m, 1.0).value; }, b, kFdStep));
    }
    {
      const Matrix s = random_matrix(gen, n, 3, 2.0), t = random_matrix(gen, n, 3, 2.0);
      const PairLossResult r = kl_softmax(s, t, 2.0);
      record("logit_distill", r.grad_first,
             numeric_gradient([&](const Matrix& m) { return kl_softmax(m, t, 2.0).value; }, s, kFdStep));
      record("logit_distill", r.grad_second,
             numeric_gradient([&](const Matrix& m) { return kl_softmax(s, m, 2.0).value; }, t, kFdStep));
    }
    {
      const Matrix a = random_matrix(gen, n, 5), p = random_matrix(gen, n, 5);
      const PairLossResult r = info_nce(a, p, 0.5);
      record("info_nce", r.grad_first,
             numeric_gradient([&](const Matrix& m) { return info_nce(m, p, 0.5).value; }, a, kFdStep));
      record("info_nce", r.grad_second,
             numeric_gradient([&](const Matrix& m) { return info_nce(a, m, 0.5).value; }, p, kFdStep));
    }
    {
      // Composite objective through the whole model on a 5-patient cohort.
      LossConfig loss;
      loss.stop_teacher_grad = false;
      const Micro m = micro(100 + point, loss);
      Rng rng(500 + point);
      const ModelParams base = ModelParams::init(m.dims, rng);
      auto f = [&](const Matrix& x) {
        ModelParams p = base;
        unflatten(x, p);
        const ForwardOutput t = forward(m.ctx.features, m.ctx.teacher, p);
        const ForwardOutput s = forward(m.ctx.features, m.ctx.student, p);
        return total_loss(t.task, s.task, m.ctx.labels, m.ctx.loss).total;
      };
      record("composite", tape_gradient(base, m.ctx), numeric_gradient(f, flatten(base), kFdStep));
    }
  }
  const double elapsed = seconds_since(start);
  out.detail << std::scientific << std::setprecision(2);
  for (const auto& [name, err] : worst) {
    out.detail << ' ' << name << '=' << err;
    out.require(err < kFdTol, name + " relative error >= 1e-4");
  }
  out.detail << std::fixed << " points=" << kFdPoints << " time=" << elapsed << "s";
  out.require(elapsed < 30.0, "runtime >= 30 s");
}

// ---------------------------------------------------------------- criterion 2

void randomize_privileged(Cohort& c, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd(0, 5);
  for (auto& p : c.patients) {
    for (double& v : p.text_dense) v = nd(gen);
    for (std::size_t k = 0; k < p.concept_flags.size(); ++k) p.concept_flags[k] = gen() % 2;
  }
}

bool same_predictions(const Predictions& a, const Predictions& b) {
  return a.ids == b.ids && a.logits_group == b.logits_group && a.logits_grade == b.logits_grade &&
         a.risk_pfs == b.risk_pfs && a.risk_os == b.risk_os;
}

void severing_invariance(Outcome& out) {
  const auto start = Clock::now();
  int checks = 0;

  // Random parameters: the student pass never sees privileged features or edges.
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    GenConfig g = micro_gen_config(24, seed);
    g.k_knn = 3;
    const Cohort c = generate_cohort(g);
    const HypergraphTopology topo = assemble_teacher(c, 3);
    ModelDims dims;
    dims.slot_dims = assemble_features(c).dims();
    dims.d_in = 8;
    dims.d_hidden = 6;
    dims.d_att = 4;
    dims.d_out = 5;
    Rng rng(seed + 99);
    const ModelParams params = ModelParams::init(dims, rng);
    const ForwardOutput before = forward(assemble_features(c), student_graph(sever(topo)), params);

    Cohort changed = c;
    randomize_privileged(changed, seed + 1000);
    const HypergraphTopology topo2 = assemble_teacher(changed, 3);
    out.require(topo2 != topo, "randomization left privileged edges unchanged");
    const ForwardOutput after =
        forward(assemble_features(changed), student_graph(sever(topo2)), params);
    out.require(after == before, "student output moved under random params");
    const ForwardOutput t_before = forward(assemble_features(c), teacher_graph(topo), params);
    const ForwardOutput t_after = forward(assemble_features(changed), teacher_graph(topo2), params);
    out.require(!(t_after == t_before), "teacher did not react to privileged changes");
    ++checks;
  }

  // Trained parameters: re-score a finished run against a cohort whose
  // privileged inputs were replaced for every patient.
  for (std::uint64_t seed = 1; seed <= 2; ++seed) {
    const Cohort c = generate_cohort(micro_gen_config(30, seed + 40));
    TrainConfig cfg = micro_train_config();
    cfg.epochs = 10;
    cfg.seed = seed;
    const FitResult r = fit(c, cfg);
    Cohort changed = c;
    randomize_privileged(changed, seed + 2000);
    const Rescored s = rescore(changed, make_checkpoint(r, cfg));
    out.require(same_predictions(s.student, r.student), "trained student predictions moved");
    out.require(!same_predictions(s.teacher, r.teacher), "trained teacher did not react");
    ++checks;
  }
  const double elapsed = seconds_since(start);
  out.detail << " cases=" << checks << " time=" << std::fixed << std::setprecision(2) << elapsed << "s";
  out.require(elapsed < 10.0, "runtime >= 10 s");
}

// ---------------------------------------------------------------- criterion 3

void pairwise_oracle(Outcome& out) {
  std::mt19937_64 gen(77);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + static_cast<int>(gen() % 19);
    const int edges = 1 + static_cast<int>(gen() % (2 * n));
    const HypergraphTopology t = random_two_uniform(gen, n, edges);
    const Matrix x = random_matrix(gen, n, 4);
    const Matrix theta = random_matrix(gen, 4, 3);
    for (bool last : {false, true}) {
      const Matrix got = hgnn_layer(x, incidence(t), theta, last);
      worst = std::max(worst, (got - pairwise_layer(t, x, theta, last)).cwiseAbs().maxCoeff());
    }
  }
  out.detail << " topologies=50 max_abs_diff=" << std::scientific << std::setprecision(2) << worst;
  out.require(worst <= 1e-10, "difference above 1e-10");
}

// ---------------------------------------------------------------- criterion 4

void metric_oracles(Outcome& out) {
  std::mt19937_64 gen(31);
  int cindex_ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(gen() % 29);
    std::vector<double> r(n), t(n);
    std::vector<bool> e(n);
    for (int i = 0; i < n; ++i) {
      r[i] = static_cast<double>(gen() % 8);  // ties in risk
      t[i] = 1.0 + static_cast<double>(gen() % 12);  // ties in time
      e[i] = gen() % 3 != 0;
    }
    e[0] = true;
    t[0] = 0.5;  // guarantees a comparable pair
    if (c_index(r, t, e) == brute_cindex(r, t, e)) ++cindex_ok;
  }
  out.detail << " cindex_exact=" << cindex_ok << "/100";
  out.require(cindex_ok == 100, "c_index differs from pair enumeration");

  // Hand product-limit tables; compared to 1e-12 since 1 - 1/3 and 2/3 differ
  // in the last bit.
  auto near = [](double x, double y) { return std::abs(x - y) < 1e-12; };
  const KMTable a = kaplan_meier({1, 2, 3}, {true, true, true});
  const bool km_a = a.rows.size() == 3 && near(a.rows[0].survival, 2.0 / 3) &&
                    near(a.rows[1].survival, 1.0 / 3) && near(a.rows[2].survival, 0.0) &&
                    a.rows[0].n_risk == 3 && a.rows[1].n_risk == 2 && a.rows[2].n_risk == 1 &&
                    a.censor_times.empty();
  const KMTable b = kaplan_meier({1, 2, 3}, {true, false, true});
  const bool km_b = b.rows.size() == 2 && b.rows[0].time == 1 && near(b.rows[0].survival, 2.0 / 3) &&
                    b.rows[1].time == 3 && b.rows[1].n_risk == 1 && near(b.rows[1].survival, 0.0) &&
                    b.censor_times == std::vector<double>{2};
  out.detail << " km_tables=" << (km_a && km_b ? "match" : "differ");
  out.require(km_a && km_b, "KM hand tables");

  const double p = chi_square_1dof_sf(3.841);
  out.detail << " p(3.841)=" << std::fixed << std::setprecision(6) << p;
  out.require(std::abs(p - 0.05) < 1e-3, "chi-square tail at 3.841");

  const std::vector<double> times{2, 3, 5, 7, 11};
  const std::vector<bool> events{true, false, true, true, false};
  const LogRankResult same = log_rank(times, events, times, events);
  out.detail << " identical_groups=(" << same.statistic << ", " << same.p_value << ")";
  out.require(same.valid && same.statistic == 0.0 && same.p_value == 1.0, "identical groups");
}

// ------------------------------------------------------------ criteria 5 and 6

struct RunSummary {
  double os_c = 0.0;
  double teacher_os_c = 0.0;
  double acc_group = 0.0;
  double seconds = 0.0;
};

RunSummary run_once(const Cohort& cohort, Ablation ablation, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.ablation = ablation;
  const auto start = Clock::now();
  const FitResult r = fit(cohort, cfg);
  return {r.report.os.cindex, r.teacher_report.os.cindex, r.report.acc_group, seconds_since(start)};
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

constexpr int kSeeds = 5;

void distillation_ordering(Outcome& out) {
  const auto start = Clock::now();
  std::vector<double> teacher, student, no_kd, no_ssl;
  double slowest = 0.0;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    GenConfig g;
    g.seed = seed;
    const Cohort cohort = generate_cohort(g);
    const RunSummary full = run_once(cohort, Ablation::Full, seed);
    const RunSummary kd = run_once(cohort, Ablation::NoKd, seed);
    const RunSummary ssl = run_once(cohort, Ablation::NoSsl, seed);
    teacher.push_back(full.teacher_os_c);
    student.push_back(full.os_c);
    no_kd.push_back(kd.os_c);
    no_ssl.push_back(ssl.os_c);
    slowest = std::max({slowest, full.seconds, kd.seconds, ssl.seconds});
    std::cerr << "  seed " << seed << ": teacher " << full.teacher_os_c << " student " << full.os_c
              << " no_kd " << kd.os_c << " no_ssl " << ssl.os_c << '\n';
  }
  const double t = mean(teacher), s = mean(student), k = mean(no_kd), n = mean(no_ssl);
  const double elapsed = seconds_since(start);
  out.detail << std::fixed << std::setprecision(4) << " os_c teacher=" << t << " student=" << s
             << " no_kd=" << k << " no_ssl=" << n << " gain=" << s - k << std::setprecision(1)
             << " slowest_run=" << slowest << "s sweep=" << elapsed << "s";
  out.require(t >= s, "teacher < student");
  out.require(s >= k, "student < no_kd");
  out.require(s - k >= 0.01, "student - no_kd < 0.01");
  out.require(n < t && n < s && n < k, "no_ssl is not the worst");
  out.require(slowest < 120.0, "a run took >= 2 min");
  out.require(elapsed < 2400.0, "sweep took >= 40 min");
}

// Hazards with a wider gap between the two groups than the default cohort.
GenConfig strong_hazard_config(std::uint64_t seed) {
  GenConfig g;
  g.seed = seed;
  g.base_hazards.pfs = {1.0 / 12.0, 1.0 / 80.0};
  g.base_hazards.os = {1.0 / 30.0, 1.0 / 200.0};
  g.censor_rate = 0.2;
  return g;
}

void sanity_band(Outcome& out) {
  std::vector<double> os_c, acc;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    const RunSummary r = run_once(generate_cohort(strong_hazard_config(seed)), Ablation::Full, seed);
    os_c.push_back(r.os_c);
    acc.push_back(r.acc_group);
    std::cerr << "  seed " << seed << ": os_c " << r.os_c << " acc_group " << r.acc_group << '\n';
  }
  out.detail << std::fixed << std::setprecision(4) << " os_c=" << mean(os_c)
             << " acc_group=" << mean(acc);
  out.require(mean(os_c) > 0.65, "os_c <= 0.65");
  out.require(mean(acc) > 0.80, "acc_group <= 0.80");
}

// ---------------------------------------------------------------- criterion 7

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void determinism(Outcome& out, const fs::path& cli, const fs::path& work) {
  if (cli.empty() || !fs::exists(cli)) {
    out.require(false, "CLI binary not found (pass --cli)");
    return;
  }
  fs::remove_all(work);
  fs::create_directories(work);
  const fs::path cohort = work / "cohort.json";
  auto run = [&](const std::string& args) {
    const std::string cmd = "\"" + cli.string() + "\" " + args + " > \"" + (work / "cli.log").string() + "\" 2>&1";
    return std::system(cmd.c_str());
  };
  out.require(run("generate --seed 3 --out \"" + cohort.string() + "\"") == 0, "generate failed");
  for (const char* dir : {"a", "b"}) {
    out.require(run("train \"" + cohort.string() + "\" --seed 3 --no-svg --out \"" + (work / dir).string() + "\"") == 0,
                "train failed");
  }
  for (const char* file : {"eval_report.json", "training_log.csv"}) {
    const std::string a = slurp(work / "a" / file), b = slurp(work / "b" / file);
    const bool same = !a.empty() && a == b;
    out.detail << ' ' << file << '=' << (same ? "identical" : "differs") << '(' << a.size() << "B)";
    out.require(same, std::string(file) + " differs");
  }
}

// ---------------------------------------------------------------- criterion 8

void closed_forms(Outcome& out) {
  const Matrix eye = Matrix::Identity(3, 3);
  const double nce = info_nce(eye, eye, 0.5).value;
  const double ce = cross_entropy(Matrix::Zero(1, 2), {0}).value;
  const double cox = cox_nll(Matrix::Zero(2, 1), {1, 2}, {true, true}).value;
  Matrix teacher(1, 2);
  teacher << 2, 0;
  const double kl = kl_softmax(Matrix::Zero(1, 2), teacher, 1.0).value;
  out.detail << std::fixed << std::setprecision(6) << " info_nce=" << nce << " ce=" << ce
             << " cox=" << cox << " kl=" << kl;
  out.require(std::abs(nce - 0.2396) < 1e-3, "InfoNCE");
  out.require(std::abs(ce - std::log(2.0)) < 1e-3, "CE");
  out.require(std::abs(cox - std::log(2.0) / 2) < 1e-3, "Cox");
  out.require(std::abs(kl - 0.4338) < 1e-3, "KL");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  fs::path cli;
  fs::path work = fs::temp_directory_path() / "hyperpriv_acceptance";
  std::vector<int> only;
  app.add_option("--cli", cli, "path to the hyperpriv_cli binary (criterion 7)");
  app.add_option("--workdir", work, "scratch directory for CLI outputs");
  app.add_option("--only", only, "run only these criteria")->check(CLI::Range(1, 8));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
      {"gradient correctness", gradient_checks},
      {"severing invariance", severing_invariance},
      {"hypergraph pairwise oracle", pairwise_oracle},
      {"metric oracles", metric_oracles},
      {"distillation ordering", distillation_ordering},
      {"sanity band", sanity_band},
      {"determinism", [&](Outcome& o) { determinism(o, cli, work); }},
      {"closed-form losses", closed_forms},
  };

  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << criteria[i].first << ":"
              << o.detail.str() << std::endl;
  }
  return all ? 0 : 1;
}
