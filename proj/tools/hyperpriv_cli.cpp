// Command-line entry point: generate | pretrain | train | ablate | evaluate | plot.
#include "hyperpriv/cohort.hpp"
#include "hyperpriv/encoder.hpp"
#include "hyperpriv/metrics.hpp"
#include "hyperpriv/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hyperpriv;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

std::string sha1_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("SHA-1 digest failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) {
    out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return out.str();
}

// Same id git assigns to a file with these bytes.
std::string git_blob_hash(const std::string& content) {
  std::string blob = "blob " + std::to_string(content.size());
  blob.push_back('\0');
  return sha1_hex(blob + content);
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

// One per artifact directory.
struct RunManifest {
  std::string command;
  std::optional<fs::path> config_path;
  std::uint64_t seed = 0;
  std::vector<fs::path> inputs;
  fs::path out;
  std::string started = utc_now();

  void write(const fs::path& dir) const {
    json in = json::array();
    std::string listing;
    for (const auto& p : inputs) {
      const std::string h = git_blob_hash(read_file(p));
      in.push_back({{"path", p.string()}, {"blob", h}});
      listing += h + ' ' + p.filename().string() + '\n';
    }
    json m{{"command", command},
           {"config_path", config_path ? json(config_path->string()) : json(nullptr)},
           {"seed", seed},
           {"inputs", in},
           {"content_hash", git_blob_hash(listing)},
           {"out", out.string()},
           {"started_at", started},
           {"finished_at", utc_now()}};
    write_file(dir / "manifest.json", m.dump(2) + "\n");
  }
};

struct SeedRange {
  std::uint64_t first = 1;
  std::uint64_t last = 1;
};

SeedRange parse_seeds(const std::string& text) {
  SeedRange r;
  try {
    const auto dots = text.find("..");
    std::size_t used = 0;
    if (dots == std::string::npos) {
      r.first = r.last = std::stoull(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
    } else {
      const std::string a = text.substr(0, dots), b = text.substr(dots + 2);
      r.first = std::stoull(a, &used);
      if (used != a.size()) throw std::invalid_argument(text);
      r.last = std::stoull(b, &used);
      if (used != b.size()) throw std::invalid_argument(text);
    }
  } catch (const std::logic_error&) {
    throw ConfigError("invalid --seeds '" + text + "': expected a..b");
  }
  if (r.last < r.first) throw ConfigError("invalid --seeds '" + text + "': empty range");
  return r;
}

std::vector<std::uint64_t> seed_list(const SeedRange& r) {
  std::vector<std::uint64_t> out;
  for (std::uint64_t s = r.first;; ++s) {
    out.push_back(s);
    if (s == r.last) break;
  }
  return out;
}

// HYPERPRIV_THREADS caps the number of concurrent runs in a sweep.
int worker_count(std::size_t jobs) {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("HYPERPRIV_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) {
      throw ConfigError("invalid HYPERPRIV_THREADS '" + std::string(env) + "': expected >= 1");
    }
    n = std::min<unsigned>(n, static_cast<unsigned>(v));
  }
  return static_cast<int>(std::min<std::size_t>(n, jobs));
}

// Runs job(i) for i in [0, n) on a small worker pool; the first exception is
// rethrown after all workers stop.
template <class Job>
void run_parallel(std::size_t n, Job job) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  const int workers = worker_count(n);
  for (int w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

TrainConfig resolve_train_config(const std::string& config_path) {
  return config_path.empty() ? TrainConfig{} : load_train_config(config_path);
}

void write_report_files(const EvalReport& report, const fs::path& dir, bool svg) {
  write_file(dir / "eval_report.json", to_json(report).dump(2) + "\n");
  for (const auto& [name, endpoint] :
       {std::pair<std::string, const EndpointReport*>{"os", &report.os}, {"pfs", &report.pfs}}) {
    std::ostringstream csv;
    write_km_csv(endpoint->km_low, endpoint->km_high, csv);
    write_file(dir / ("km_" + name + ".csv"), csv.str());
    if (svg) {
      std::ostringstream out;
      write_km_svg(endpoint->km_low, endpoint->km_high, endpoint->log_rank,
                   (name == "os" ? "Overall survival" : "Progression-free survival") +
                       std::string(" (") + report.pass + ")",
                   out);
      write_file(dir / ("km_" + name + ".svg"), out.str());
    }
  }
}

// One training run with all of its artifacts.
FitResult train_into(const Cohort& cohort, const TrainConfig& config, const fs::path& dir,
                     bool svg) {
  fs::create_directories(dir);
  FitOptions options;
  options.checkpoint_dir = dir;
  const FitResult result = fit(cohort, config, options);
  std::ostringstream log;
  write_training_log(result.state.log, log);
  write_file(dir / "training_log.csv", log.str());
  write_file(dir / "config.json", to_json(config).dump(2) + "\n");
  save_checkpoint(make_checkpoint(result, config), dir / "checkpoint.json");
  write_file(dir / "teacher_report.json", to_json(result.teacher_report).dump(2) + "\n");
  write_report_files(result.report, dir, svg);
  return result;
}

struct Metrics {
  double acc_group, acc_grade, cindex_pfs, cindex_os;
};

Metrics metrics_of(const EvalReport& r) {
  return {r.acc_group, r.acc_grade, r.pfs.cindex, r.os.cindex};
}

std::pair<double, double> mean_sd(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return {mean, sd};
}

constexpr const char* kMetricNames[] = {"acc_group", "acc_grade", "cindex_pfs", "cindex_os"};

std::vector<double> column(const std::vector<Metrics>& rows, int k) {
  std::vector<double> out;
  for (const auto& m : rows) {
    out.push_back(k == 0 ? m.acc_group : k == 1 ? m.acc_grade : k == 2 ? m.cindex_pfs : m.cindex_os);
  }
  return out;
}

// ---- subcommands ----

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string seeds;
  std::string ablation;
  std::string out;
  bool no_svg = false;
};

int cmd_generate(const Common& opt) {
  RunManifest manifest{"generate"};
  GenConfig config = opt.config.empty() ? GenConfig{} : load_gen_config(opt.config);
  if (opt.seed) config.seed = *opt.seed;
  validate(config);
  const Cohort cohort = generate_cohort(config);
  const fs::path out = opt.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_cohort(cohort, out);

  int pfa = 0, grade3 = 0, pfs_censored = 0;
  for (const auto& p : cohort.patients) {
    pfa += p.group == Group::PFA;
    grade3 += p.grade == Grade::III;
    pfs_censored += !p.pfs.event;
  }
  const double n = cohort.size();
  std::cout << std::fixed << std::setprecision(3) << "patients: " << cohort.size() << "\n"
            << "group: PFA " << pfa << ", PFB " << cohort.size() - pfa << " (PFA fraction "
            << pfa / n << ")\n"
            << "grade: II " << cohort.size() - grade3 << ", III " << grade3 << "\n"
            << "censored: OS " << censored_fraction(cohort) << ", PFS " << pfs_censored / n
            << "\n"
            << "wrote " << out.string() << "\n";

  manifest.config_path = opt.config.empty() ? std::nullopt : std::optional<fs::path>(opt.config);
  manifest.seed = config.seed;
  if (manifest.config_path) manifest.inputs.push_back(*manifest.config_path);
  manifest.out = out;
  // The cohort file's directory is its artifact directory.
  manifest.write(out.has_parent_path() ? out.parent_path() : fs::path("."));
  return kExitOk;
}

int cmd_pretrain(const std::string& cohort_path, const Common& opt) {
  RunManifest manifest{"pretrain"};
  TrainConfig config = resolve_train_config(opt.config);
  if (opt.seed) config.seed = *opt.seed;
  validate(config);
  const Cohort cohort = load_cohort(cohort_path);
  validate(cohort);
  const PretrainResult r = pretrain(cohort, pretrain_config(config));
  const fs::path dir = opt.out;
  fs::create_directories(dir);
  write_file(dir / "ssl_head.json", r.head.to_json().dump() + "\n");
  std::ostringstream log;
  log << "epoch,loss,probe_loss\n" << std::setprecision(17);
  for (std::size_t e = 0; e < r.loss_history.size(); ++e) {
    log << e + 1 << ',' << r.loss_history[e] << ',' << r.probe_history[e] << '\n';
  }
  write_file(dir / "pretrain_log.csv", log.str());
  std::cout << std::setprecision(6) << "contrastive loss: " << r.initial_loss << " -> "
            << r.final_loss << "\nwrote " << (dir / "ssl_head.json").string() << "\n";
  manifest.config_path = opt.config.empty() ? std::nullopt : std::optional<fs::path>(opt.config);
  manifest.seed = config.seed;
  manifest.inputs.push_back(cohort_path);
  if (manifest.config_path) manifest.inputs.push_back(*manifest.config_path);
  manifest.out = dir;
  manifest.write(dir);
  return kExitOk;
}

int cmd_train(const std::string& cohort_path, const Common& opt) {
  TrainConfig base = resolve_train_config(opt.config);
  if (!opt.ablation.empty()) base.ablation = ablation_from_string(opt.ablation);
  if (opt.seed) base.seed = *opt.seed;
  validate(base);
  const Cohort cohort = load_cohort(cohort_path);
  const fs::path dir = opt.out;
  auto manifest_for = [&](std::uint64_t seed, const fs::path& out) {
    RunManifest m{"train"};
    m.config_path = opt.config.empty() ? std::nullopt : std::optional<fs::path>(opt.config);
    m.seed = seed;
    m.inputs.push_back(cohort_path);
    if (m.config_path) m.inputs.push_back(*m.config_path);
    m.out = out;
    return m;
  };

  if (opt.seeds.empty()) {
    RunManifest manifest = manifest_for(base.seed, dir);
    const FitResult r = train_into(cohort, base, dir, !opt.no_svg);
    std::cout << std::fixed << std::setprecision(4) << "seed " << base.seed << " ("
              << r.report.pass << "): group acc " << r.report.acc_group << ", grade acc "
              << r.report.acc_grade << ", PFS C " << r.report.pfs.cindex << ", OS C "
              << r.report.os.cindex << "\n";
    manifest.write(dir);
    return kExitOk;
  }

  const std::vector<std::uint64_t> seeds = seed_list(parse_seeds(opt.seeds));
  RunManifest top = manifest_for(seeds.front(), dir);
  fs::create_directories(dir);
  std::vector<Metrics> results(seeds.size());
  run_parallel(seeds.size(), [&](std::size_t i) {
    TrainConfig config = base;
    config.seed = seeds[i];
    const fs::path sub = dir / ("seed_" + std::to_string(seeds[i]));
    RunManifest m = manifest_for(seeds[i], sub);
    results[i] = metrics_of(train_into(cohort, config, sub, !opt.no_svg).report);
    m.write(sub);
  });

  json agg{{"seeds", seeds}, {"ablation", to_string(base.ablation)}};
  std::ostringstream txt;
  txt << std::fixed << std::setprecision(4);
  for (int k = 0; k < 4; ++k) {
    const auto values = column(results, k);
    const auto [mean, sd] = mean_sd(values);
    agg["metrics"][kMetricNames[k]] = {{"mean", mean}, {"sd", sd}, {"values", values}};
    txt << kMetricNames[k] << ": " << mean << " ± " << sd << "\n";
  }
  write_file(dir / "aggregate.json", agg.dump(2) + "\n");
  std::cout << txt.str();
  top.write(dir);
  return kExitOk;
}

int cmd_ablate(const std::string& cohort_path, const Common& opt) {
  RunManifest manifest{"ablate"};
  TrainConfig base = resolve_train_config(opt.config);
  if (opt.seed) base.seed = *opt.seed;
  validate(base);
  const Cohort cohort = load_cohort(cohort_path);
  const std::vector<std::uint64_t> seeds =
      opt.seeds.empty() ? std::vector<std::uint64_t>{base.seed} : seed_list(parse_seeds(opt.seeds));

  // Table row order. The teacher row reads the teacher pass of the full run.
  const std::vector<std::pair<std::string, Ablation>> rows{
      {"w/o Hypergraph", Ablation::NoHypergraph},
      {"w/o KD", Ablation::NoKd},
      {"w/o SSL", Ablation::NoSsl},
      {"Ours", Ablation::Full},
      {"Teacher", Ablation::TeacherEval}};
  const std::vector<Ablation> trained{Ablation::NoHypergraph, Ablation::NoKd, Ablation::NoSsl,
                                      Ablation::Full};

  std::vector<Metrics> student(trained.size() * seeds.size());
  std::vector<Metrics> teacher(seeds.size());
  run_parallel(student.size(), [&](std::size_t job) {
    const std::size_t v = job / seeds.size(), s = job % seeds.size();
    TrainConfig config = base;
    config.ablation = trained[v];
    config.seed = seeds[s];
    const FitResult r = fit(cohort, config);
    student[job] = metrics_of(r.report);
    if (trained[v] == Ablation::Full) teacher[s] = metrics_of(r.teacher_report);
  });

  auto values_of = [&](Ablation a) {
    if (a == Ablation::TeacherEval) return teacher;
    const auto v = static_cast<std::size_t>(std::find(trained.begin(), trained.end(), a) -
                                            trained.begin());
    return std::vector<Metrics>(student.begin() + v * seeds.size(),
                                student.begin() + (v + 1) * seeds.size());
  };

  const fs::path dir = opt.out;
  fs::create_directories(dir);
  std::ostringstream table, raw;
  table << "variant,ablation,n_seeds,group_acc,group_acc_sd,who_acc,who_acc_sd,pfs_c,pfs_c_sd,"
           "os_c,os_c_sd\n"
        << std::setprecision(17);
  raw << "variant,ablation,seed,group_acc,who_acc,pfs_c,os_c\n" << std::setprecision(17);
  for (const auto& [label, a] : rows) {
    const std::vector<Metrics> runs = values_of(a);
    table << label << ',' << to_string(a) << ',' << seeds.size();
    for (int k = 0; k < 4; ++k) {
      const auto [mean, sd] = mean_sd(column(runs, k));
      table << ',' << mean << ',' << sd;
    }
    table << '\n';
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const Metrics& m = runs[s];
      raw << label << ',' << to_string(a) << ',' << seeds[s] << ',' << m.acc_group << ','
          << m.acc_grade << ',' << m.cindex_pfs << ',' << m.cindex_os << '\n';
    }
  }
  write_file(dir / "ablation.csv", table.str());
  write_file(dir / "ablation_raw.csv", raw.str());
  std::cout << table.str();

  manifest.config_path = opt.config.empty() ? std::nullopt : std::optional<fs::path>(opt.config);
  manifest.seed = seeds.front();
  manifest.inputs.push_back(cohort_path);
  if (manifest.config_path) manifest.inputs.push_back(*manifest.config_path);
  manifest.out = dir;
  manifest.write(dir);
  return kExitOk;
}

int cmd_evaluate(const std::string& cohort_path, const std::string& checkpoint_path,
                 const Common& opt) {
  RunManifest manifest{"evaluate"};
  const Cohort cohort = load_cohort(cohort_path);
  const RunCheckpoint checkpoint = load_checkpoint(checkpoint_path);
  const Rescored r = rescore(cohort, checkpoint);
  const fs::path dir = opt.out;
  fs::create_directories(dir);
  write_report_files(r.report, dir, !opt.no_svg);
  write_file(dir / "teacher_report.json", to_json(r.teacher_report).dump(2) + "\n");
  std::cout << std::fixed << std::setprecision(4) << r.report.pass << ": group acc "
            << r.report.acc_group << ", grade acc " << r.report.acc_grade << ", PFS C "
            << r.report.pfs.cindex << ", OS C " << r.report.os.cindex << "\n";
  manifest.seed = checkpoint.config.seed;
  manifest.inputs = {cohort_path, checkpoint_path};
  manifest.out = dir;
  manifest.write(dir);
  return kExitOk;
}

int cmd_plot(const std::string& report_path, const Common& opt) {
  RunManifest manifest{"plot"};
  json j;
  try {
    j = json::parse(read_file(report_path));
  } catch (const json::parse_error& e) {
    throw ParseError(report_path + ": " + e.what());
  }
  const EvalReport report = eval_report_from_json(j);
  const fs::path dir = opt.out;
  fs::create_directories(dir);
  for (const auto& [name, e] :
       {std::pair<std::string, const EndpointReport*>{"os", &report.os}, {"pfs", &report.pfs}}) {
    std::ostringstream out;
    write_km_svg(e->km_low, e->km_high, e->log_rank,
                 (name == "os" ? "Overall survival" : "Progression-free survival") +
                     std::string(" (") + report.pass + ")",
                 out);
    write_file(dir / ("km_" + name + ".svg"), out.str());
  }
  std::cout << "wrote " << (dir / "km_os.svg").string() << ", " << (dir / "km_pfs.svg").string()
            << "\n";
  manifest.inputs = {report_path};
  manifest.out = dir;
  manifest.write(dir);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hypergraph teacher/student distillation on synthetic cohorts"};
  app.require_subcommand(1);
  Common opt;
  std::string cohort_path, checkpoint_path, report_path;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "JSON config file")->check(CLI::ExistingFile);
  };
  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", opt.seed, "root seed override"); };

  auto* gen = app.add_subcommand("generate", "generate a synthetic cohort");
  add_config(gen);
  add_seed(gen);
  gen->add_option("--out", opt.out, "cohort JSON path")->required();

  auto* pre = app.add_subcommand("pretrain", "contrastive pretraining of MRI view embeddings");
  pre->add_option("cohort", cohort_path, "cohort JSON")->required();
  add_config(pre);
  add_seed(pre);
  pre->add_option("--out", opt.out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train and evaluate one or more seeds");
  train->add_option("cohort", cohort_path, "cohort JSON")->required();
  add_config(train);
  auto* seed_opt = train->add_option("--seed", opt.seed, "root seed override");
  train->add_option("--seeds", opt.seeds, "seed range a..b, one subdirectory each")
      ->excludes(seed_opt);
  train->add_option("--ablation", opt.ablation,
                    "full | no_hypergraph | no_kd | no_ssl | teacher_eval");
  train->add_option("--out", opt.out, "output directory")->required();
  train->add_flag("--no-svg", opt.no_svg, "skip KM SVG output");

  auto* ablate = app.add_subcommand("ablate", "ablation table over seeds");
  ablate->add_option("cohort", cohort_path, "cohort JSON")->required();
  add_config(ablate);
  auto* ab_seed = ablate->add_option("--seed", opt.seed, "single seed");
  ablate->add_option("--seeds", opt.seeds, "seed range a..b")->excludes(ab_seed);
  ablate->add_option("--out", opt.out, "output directory")->required();

  auto* eval = app.add_subcommand("evaluate", "re-score a saved checkpoint without training");
  eval->add_option("cohort", cohort_path, "cohort JSON")->required();
  eval->add_option("checkpoint", checkpoint_path, "checkpoint.json from train")->required();
  eval->add_option("--out", opt.out, "output directory")->required();
  eval->add_flag("--no-svg", opt.no_svg, "skip KM SVG output");

  auto* plot = app.add_subcommand("plot", "render KM curves from an eval report");
  plot->add_option("report", report_path, "eval_report.json")->required();
  plot->add_option("--out", opt.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*gen) return cmd_generate(opt);
    if (*pre) return cmd_pretrain(cohort_path, opt);
    if (*train) return cmd_train(cohort_path, opt);
    if (*ablate) return cmd_ablate(cohort_path, opt);
    if (*eval) return cmd_evaluate(cohort_path, checkpoint_path, opt);
    if (*plot) return cmd_plot(report_path, opt);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitConfig;
}
