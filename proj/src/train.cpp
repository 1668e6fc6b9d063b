#include "hyperpriv/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace hyperpriv {
namespace {

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("invalid config field '") + key + "': wrong type");
  }
}

void require(bool ok, const char* field, const char* why) {
  if (!ok) throw ConfigError(std::string("invalid config field '") + field + "': " + why);
}

nlohmann::json breakdown_to_json(const LossBreakdown& b) {
  return {{"ce_group", b.ce_group}, {"ce_grade", b.ce_grade}, {"ce_location", b.ce_location},
          {"cox_pfs", b.cox_pfs},   {"cox_os", b.cox_os},     {"feat", b.feat},
          {"logit", b.logit},       {"total", b.total},       {"no_events_warning", b.no_events_warning}};
}

LossBreakdown breakdown_from_json(const nlohmann::json& j) {
  LossBreakdown b;
  b.ce_group = j.at("ce_group").get<double>();
  b.ce_grade = j.at("ce_grade").get<double>();
  b.ce_location = j.at("ce_location").get<double>();
  b.cox_pfs = j.at("cox_pfs").get<double>();
  b.cox_os = j.at("cox_os").get<double>();
  b.feat = j.at("feat").get<double>();
  b.logit = j.at("logit").get<double>();
  b.total = j.at("total").get<double>();
  b.no_events_warning = j.at("no_events_warning").get<bool>();
  return b;
}

std::string engine_state(std::uint64_t seed) {
  Rng rng = Rng(seed).derive("train");
  std::ostringstream s;
  s << rng.engine();
  return s.str();
}

int argmax(const Matrix& m, Eigen::Index row) {
  Eigen::Index best = 0;
  m.row(row).maxCoeff(&best);
  return static_cast<int>(best);
}

}  // namespace

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::Full: return "full";
    case Ablation::NoHypergraph: return "no_hypergraph";
    case Ablation::NoKd: return "no_kd";
    case Ablation::NoSsl: return "no_ssl";
    case Ablation::TeacherEval: return "teacher_eval";
  }
  return "full";
}

Ablation ablation_from_string(const std::string& s) {
  for (Ablation a : {Ablation::Full, Ablation::NoHypergraph, Ablation::NoKd, Ablation::NoSsl,
                     Ablation::TeacherEval}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("invalid config field 'ablation': " + s);
}

void validate(const TrainConfig& c) {
  require(c.epochs >= 1, "epochs", "must be >= 1");
  require(c.lr > 0 && std::isfinite(c.lr), "lr", "must be > 0");
  require(c.beta1 >= 0 && c.beta1 < 1, "beta1", "must be in [0, 1)");
  require(c.beta2 >= 0 && c.beta2 < 1, "beta2", "must be in [0, 1)");
  require(c.eps > 0, "eps", "must be > 0");
  require(c.lambda1 >= 0, "lambda1", "must be >= 0");
  require(c.lambda2 >= 0, "lambda2", "must be >= 0");
  require(c.tau_kd > 0, "tau_kd", "must be > 0");
  require(c.smooth_l1_beta > 0, "smooth_l1_beta", "must be > 0");
  require(c.k_knn >= 1, "k_knn", "must be >= 1");
  require(c.train_fraction > 0 && c.train_fraction < 1, "train_fraction", "must be in (0, 1)");
  require(c.ssl_epochs >= 0, "ssl_epochs", "must be >= 0");
  require(c.ssl_tau > 0, "ssl_tau", "must be > 0");
  require(c.ssl_lr > 0, "ssl_lr", "must be > 0");
  require(c.ssl_batch_size >= 2, "ssl_batch_size", "must be >= 2");
  require(c.ssl_d_h >= 1, "ssl_d_h", "must be >= 1");
  require(c.ssl_d_z >= 1, "ssl_d_z", "must be >= 1");
  require(c.aug_sigma >= 0, "aug_sigma", "must be >= 0");
  require(c.aug_p_drop >= 0 && c.aug_p_drop <= 1, "aug_p_drop", "must be in [0, 1]");
  require(c.d_in >= 1, "d_in", "must be >= 1");
  require(c.d_hidden >= 1, "d_hidden", "must be >= 1");
  require(c.d_att >= 1, "d_att", "must be >= 1");
  require(c.d_out >= 1, "d_out", "must be >= 1");
  require(c.n_layers >= 1, "n_layers", "must be >= 1");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"lr", c.lr},
          {"optimizer", to_string(c.optimizer)},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"lambda1", c.lambda1},
          {"lambda2", c.lambda2},
          {"tau_kd", c.tau_kd},
          {"smooth_l1_beta", c.smooth_l1_beta},
          {"kd_direction", to_string(c.kd_direction)},
          {"tau_squared_scaling", c.tau_squared_scaling},
          {"stop_teacher_grad", c.stop_teacher_grad},
          {"task_on", to_string(c.task_on)},
          {"k_knn", c.k_knn},
          {"seed", c.seed},
          {"ablation", to_string(c.ablation)},
          {"train_fraction", c.train_fraction},
          {"ssl_epochs", c.ssl_epochs},
          {"ssl_tau", c.ssl_tau},
          {"ssl_lr", c.ssl_lr},
          {"ssl_batch_size", c.ssl_batch_size},
          {"ssl_d_h", c.ssl_d_h},
          {"ssl_d_z", c.ssl_d_z},
          {"aug_sigma", c.aug_sigma},
          {"aug_p_drop", c.aug_p_drop},
          {"d_in", c.d_in},
          {"d_hidden", c.d_hidden},
          {"d_att", c.d_att},
          {"d_out", c.d_out},
          {"n_layers", c.n_layers}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig c;
  const auto known = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config field '" + key + "'");
  }
  std::string optimizer = to_string(c.optimizer);
  std::string kd_direction = to_string(c.kd_direction);
  std::string task_on = to_string(c.task_on);
  std::string ablation = to_string(c.ablation);
  read_field(j, "epochs", c.epochs);
  read_field(j, "lr", c.lr);
  read_field(j, "optimizer", optimizer);
  read_field(j, "beta1", c.beta1);
  read_field(j, "beta2", c.beta2);
  read_field(j, "eps", c.eps);
  read_field(j, "lambda1", c.lambda1);
  read_field(j, "lambda2", c.lambda2);
  read_field(j, "tau_kd", c.tau_kd);
  read_field(j, "smooth_l1_beta", c.smooth_l1_beta);
  read_field(j, "kd_direction", kd_direction);
  read_field(j, "tau_squared_scaling", c.tau_squared_scaling);
  read_field(j, "stop_teacher_grad", c.stop_teacher_grad);
  read_field(j, "task_on", task_on);
  read_field(j, "k_knn", c.k_knn);
  read_field(j, "seed", c.seed);
  read_field(j, "ablation", ablation);
  read_field(j, "train_fraction", c.train_fraction);
  read_field(j, "ssl_epochs", c.ssl_epochs);
  read_field(j, "ssl_tau", c.ssl_tau);
  read_field(j, "ssl_lr", c.ssl_lr);
  read_field(j, "ssl_batch_size", c.ssl_batch_size);
  read_field(j, "ssl_d_h", c.ssl_d_h);
  read_field(j, "ssl_d_z", c.ssl_d_z);
  read_field(j, "aug_sigma", c.aug_sigma);
  read_field(j, "aug_p_drop", c.aug_p_drop);
  read_field(j, "d_in", c.d_in);
  read_field(j, "d_hidden", c.d_hidden);
  read_field(j, "d_att", c.d_att);
  read_field(j, "d_out", c.d_out);
  read_field(j, "n_layers", c.n_layers);
  c.optimizer = optimizer_from_string(optimizer);
  c.kd_direction = kd_direction_from_string(kd_direction);
  c.task_on = task_on_from_string(task_on);
  c.ablation = ablation_from_string(ablation);
  validate(c);
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  try {
    return train_config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

LossConfig loss_config(const TrainConfig& c) {
  LossConfig l;
  l.lambda1 = c.ablation == Ablation::NoKd ? 0.0 : c.lambda1;
  l.lambda2 = c.ablation == Ablation::NoKd ? 0.0 : c.lambda2;
  l.tau_kd = c.tau_kd;
  l.smooth_l1_beta = c.smooth_l1_beta;
  l.kd_direction = c.kd_direction;
  l.tau_squared_scaling = c.tau_squared_scaling;
  l.stop_teacher_grad = c.stop_teacher_grad;
  l.task_on = c.task_on;
  return l;
}

PretrainConfig pretrain_config(const TrainConfig& c) {
  PretrainConfig p;
  p.epochs = c.ssl_epochs;
  p.tau = c.ssl_tau;
  p.lr = c.ssl_lr;
  p.batch_size = c.ssl_batch_size;
  p.d_h = c.ssl_d_h;
  p.d_z = c.ssl_d_z;
  p.augment = AugmentConfig{c.aug_sigma, c.aug_p_drop};
  p.seed = Rng(c.seed).derive("ssl").seed();
  return p;
}

Split stratified_split(const Cohort& cohort, double train_fraction, std::uint64_t seed) {
  Rng rng = Rng(seed).derive("split");
  Split s;
  for (Group g : {Group::PFA, Group::PFB}) {
    std::vector<int> ids;
    for (const auto& p : cohort.patients) {
      if (p.group == g) ids.push_back(p.id);
    }
    for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
    const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * ids.size()));
    s.train.insert(s.train.end(), ids.begin(), ids.begin() + n_train);
    s.test.insert(s.test.end(), ids.begin() + n_train, ids.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  if (s.train.empty() || s.test.empty()) {
    throw ConfigError("invalid config field 'train_fraction': leaves an empty train or test set");
  }
  return s;
}

TaskLabels task_labels(const Cohort& cohort, const std::vector<int>& rows) {
  TaskLabels l;
  l.rows = rows;
  for (int r : rows) {
    const auto& p = cohort.patients.at(r);
    l.group.push_back(static_cast<int>(p.group));
    l.grade.push_back(static_cast<int>(p.grade));
    l.location.push_back(p.location);
    l.pfs_time.push_back(p.pfs.time);
    l.pfs_event.push_back(p.pfs.event);
    l.os_time.push_back(p.os.time);
    l.os_event.push_back(p.os.event);
  }
  return l;
}

nlohmann::json TrainState::to_json() const {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& b : log) entries.push_back(breakdown_to_json(b));
  return {{"format", "hyperpriv-train-state"},
          {"version", 1},
          {"epoch", epoch},
          {"params", params.to_json()},
          {"optimizer", optimizer.state_to_json()},
          {"log", entries},
          {"rng_state", rng_state}};
}

TrainState TrainState::from_json(const nlohmann::json& j) {
  try {
    TrainState s;
    s.epoch = j.at("epoch").get<int>();
    s.params = ModelParams::from_json(j.at("params"));
    s.optimizer.state_from_json(j.at("optimizer"));
    for (const auto& b : j.at("log")) s.log.push_back(breakdown_from_json(b));
    s.rng_state = j.at("rng_state").get<std::string>();
    if (static_cast<int>(s.log.size()) != s.epoch) throw ParseError("state: log length != epoch");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("state: ") + e.what());
  }
}

void save_state(const TrainState& state, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << state.to_json().dump();
}

TrainState load_state(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  try {
    return TrainState::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

LossBreakdown train_step(TrainState& state, const TrainingContext& ctx) {
  ad::Tape tape;
  // One parameter set feeds both passes.
  const ParamVars pv = ParamVars::on(tape, state.params, true);
  const TapeForward teacher = forward_tape(tape, pv, state.params.dims, ctx.features, ctx.teacher);
  const TapeForward student = forward_tape(tape, pv, state.params.dims, ctx.features, ctx.student);
  const TotalLoss loss = total_loss(teacher.task, student.task, ctx.labels, ctx.loss);
  if (!std::isfinite(loss.breakdown.total)) {
    std::ostringstream msg;
    msg << "non-finite loss at epoch " << state.epoch + 1 << " (total=" << loss.breakdown.total
        << ")";
    throw NumericalError(msg.str());
  }
  tape.backward(loss.total);
  std::vector<Matrix> grads;
  for (const auto& v : pv.vars) {
    grads.push_back(tape.grad(v));
    if (!all_finite(grads.back())) {
      throw NumericalError("non-finite gradient at epoch " + std::to_string(state.epoch + 1));
    }
  }
  state.optimizer.step(state.params.tensors(), grads);
  ++state.epoch;
  state.log.push_back(loss.breakdown);
  return loss.breakdown;
}

Cohort prepare_cohort(const Cohort& cohort, const TrainConfig& config, ProjectionHead* head) {
  Cohort out = cohort;
  for (auto& p : out.patients) p.mri_refined.clear();
  if (config.ablation == Ablation::NoSsl) return out;
  const PretrainResult r = pretrain(out, pretrain_config(config));
  if (head) *head = r.head;
  return with_refined_views(out, r);
}

TrainingContext build_context(const Cohort& prepared, const TrainConfig& config,
                              const std::vector<int>& train_rows) {
  const bool propagate = config.ablation != Ablation::NoHypergraph;
  const HypergraphTopology topology = assemble_teacher(prepared, config.k_knn);
  TrainingContext ctx;
  ctx.features = assemble_features(prepared);
  ctx.teacher = teacher_graph(topology, propagate);
  ctx.student = student_graph(sever(topology), propagate);
  ctx.labels = task_labels(prepared, train_rows);
  ctx.loss = loss_config(config);
  return ctx;
}

Predictions predict(const SlotFeatures& features, const PassGraph& graph,
                    const ModelParams& params, const std::vector<int>& rows) {
  const ForwardOutput f = forward(features, graph, params);
  Predictions p;
  p.ids = rows;
  const auto n = static_cast<Eigen::Index>(rows.size());
  p.logits_group.resize(n, f.task.logits_group.cols());
  p.logits_grade.resize(n, f.task.logits_grade.cols());
  p.risk_pfs.resize(n);
  p.risk_os.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int r = rows[i];
    p.logits_group.row(i) = f.task.logits_group.row(r);
    p.logits_grade.row(i) = f.task.logits_grade.row(r);
    p.risk_pfs[i] = f.task.risk_pfs(r, 0);
    p.risk_os[i] = f.task.risk_os(r, 0);
  }
  return p;
}

EvalReport evaluate_predictions(const Cohort& cohort, const Predictions& preds,
                                const std::string& pass) {
  EvalInput in;
  for (std::size_t i = 0; i < preds.ids.size(); ++i) {
    const auto& p = cohort.patients.at(preds.ids[i]);
    const auto r = static_cast<Eigen::Index>(i);
    in.pred_group.push_back(argmax(preds.logits_group, r));
    in.true_group.push_back(static_cast<int>(p.group));
    in.pred_grade.push_back(argmax(preds.logits_grade, r));
    in.true_grade.push_back(static_cast<int>(p.grade));
    in.risk_pfs.push_back(preds.risk_pfs[r]);
    in.pfs_time.push_back(p.pfs.time);
    in.pfs_event.push_back(p.pfs.event);
    in.risk_os.push_back(preds.risk_os[r]);
    in.os_time.push_back(p.os.time);
    in.os_event.push_back(p.os.event);
  }
  return evaluate(in, pass);
}

FitResult fit(const Cohort& cohort, const TrainConfig& config, const FitOptions& options) {
  validate(config);
  validate(cohort);
  FitResult result;
  result.split = options.split ? *options.split
                               : stratified_split(cohort, config.train_fraction, config.seed);
  const Cohort prepared = prepare_cohort(cohort, config, &result.ssl_head);
  const TrainingContext ctx = build_context(prepared, config, result.split.train);

  const OptimizerConfig opt{config.optimizer, config.lr, config.beta1, config.beta2, config.eps};
  TrainState& state = result.state;
  if (options.resume) {
    state = *options.resume;
    state.optimizer.set_config(opt);
  } else {
    ModelDims dims;
    dims.slot_dims = ctx.features.dims();
    dims.d_in = config.d_in;
    dims.d_hidden = config.d_hidden;
    dims.d_att = config.d_att;
    dims.d_out = config.d_out;
    dims.n_layers = config.n_layers;
    Rng init = Rng(config.seed).derive("params");
    state.params = ModelParams::init(dims, init);
    state.optimizer = Optimizer(opt);
    state.rng_state = engine_state(config.seed);
  }

  while (state.epoch < config.epochs && (options.stop_after < 0 || state.epoch < options.stop_after)) {
    try {
      train_step(state, ctx);
    } catch (const NumericalError& e) {
      std::string where = "no checkpoint directory configured";
      if (options.checkpoint_dir) {
        std::filesystem::create_directories(*options.checkpoint_dir);
        const auto path = *options.checkpoint_dir / "last_good.json";
        save_state(state, path);
        where = "last good checkpoint: " + path.string();
      }
      throw NumericalError(std::string(e.what()) + "; " + where);
    }
    if (options.on_epoch) options.on_epoch(state);
  }

  result.student = predict(ctx.features, ctx.student, state.params, result.split.test);
  result.teacher = predict(ctx.features, ctx.teacher, state.params, result.split.test);
  result.teacher_report = evaluate_predictions(cohort, result.teacher, "teacher");
  result.report = config.ablation == Ablation::TeacherEval
                      ? result.teacher_report
                      : evaluate_predictions(cohort, result.student, "student");
  return result;
}

nlohmann::json RunCheckpoint::to_json() const {
  nlohmann::json j{{"format", "hyperpriv-run"},
                   {"version", 1},
                   {"config", hyperpriv::to_json(config)},
                   {"split", {{"train", split.train}, {"test", split.test}}},
                   {"state", state.to_json()}};
  j["ssl_head"] = ssl_head ? ssl_head->to_json() : nlohmann::json(nullptr);
  return j;
}

RunCheckpoint RunCheckpoint::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "hyperpriv-run") throw ParseError("checkpoint: unexpected format");
    if (j.at("version") != 1) throw ParseError("checkpoint: unsupported version");
    RunCheckpoint c;
    c.config = train_config_from_json(j.at("config"));
    c.split.train = j.at("split").at("train").get<std::vector<int>>();
    c.split.test = j.at("split").at("test").get<std::vector<int>>();
    if (!j.at("ssl_head").is_null()) c.ssl_head = ProjectionHead::from_json(j.at("ssl_head"));
    c.state = TrainState::from_json(j.at("state"));
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
}

RunCheckpoint make_checkpoint(const FitResult& result, const TrainConfig& config) {
  RunCheckpoint c;
  c.config = config;
  c.split = result.split;
  if (config.ablation != Ablation::NoSsl) c.ssl_head = result.ssl_head;
  c.state = result.state;
  return c;
}

void save_checkpoint(const RunCheckpoint& checkpoint, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << checkpoint.to_json().dump();
}

RunCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read checkpoint " + path.string());
  try {
    return RunCheckpoint::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

Rescored rescore(const Cohort& cohort, const RunCheckpoint& checkpoint) {
  validate(cohort);
  const TrainConfig& config = checkpoint.config;
  if (config.ablation != Ablation::NoSsl && !checkpoint.ssl_head) {
    throw ParseError("checkpoint: ssl_head missing for a pretrained run");
  }
  Cohort prepared = cohort;
  for (auto& p : prepared.patients) p.mri_refined.clear();
  if (checkpoint.ssl_head) prepared = with_refined_views(prepared, *checkpoint.ssl_head);
  for (int id : checkpoint.split.test) {
    if (id < 0 || id >= cohort.size()) throw ParseError("checkpoint: test id out of range");
  }
  const TrainingContext ctx = build_context(prepared, config, checkpoint.split.train);
  if (ctx.features.dims() != checkpoint.state.params.dims.slot_dims) {
    throw ParseError("checkpoint: feature widths do not match the cohort");
  }
  Rescored r;
  r.student = predict(ctx.features, ctx.student, checkpoint.state.params, checkpoint.split.test);
  r.teacher = predict(ctx.features, ctx.teacher, checkpoint.state.params, checkpoint.split.test);
  r.teacher_report = evaluate_predictions(cohort, r.teacher, "teacher");
  r.report = config.ablation == Ablation::TeacherEval
                 ? r.teacher_report
                 : evaluate_predictions(cohort, r.student, "student");
  return r;
}

void write_training_log(const std::vector<LossBreakdown>& log, std::ostream& out) {
  out << "epoch,ce_group,ce_grade,ce_location,cox_pfs,cox_os,feat,logit,total\n";
  out << std::setprecision(17);
  for (std::size_t e = 0; e < log.size(); ++e) {
    const auto& b = log[e];
    out << e + 1 << ',' << b.ce_group << ',' << b.ce_grade << ',' << b.ce_location << ','
        << b.cox_pfs << ',' << b.cox_os << ',' << b.feat << ',' << b.logit << ',' << b.total
        << '\n';
  }
}

}  // namespace hyperpriv
