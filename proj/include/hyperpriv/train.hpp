#pragma once

#include "hyperpriv/cohort.hpp"
#include "hyperpriv/common.hpp"
#include "hyperpriv/encoder.hpp"
#include "hyperpriv/hypergraph.hpp"
#include "hyperpriv/losses.hpp"
#include "hyperpriv/metrics.hpp"
#include "hyperpriv/model.hpp"
#include "hyperpriv/optim.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace hyperpriv {

enum class Ablation { Full, NoHypergraph, NoKd, NoSsl, TeacherEval };

std::string to_string(Ablation a);
Ablation ablation_from_string(const std::string& s);

struct TrainConfig {
  int epochs = 200;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lambda1 = 1.0;
  double lambda2 = 0.5;
  double tau_kd = 2.0;
  double smooth_l1_beta = 1.0;
  KdDirection kd_direction = KdDirection::StudentFirst;
  bool tau_squared_scaling = false;
  bool stop_teacher_grad = false;  // see LossConfig
  TaskOn task_on = TaskOn::Both;
  int k_knn = 10;
  std::uint64_t seed = 1;
  Ablation ablation = Ablation::Full;
  double train_fraction = 0.7;
  // Contrastive pretraining of MRI views.
  int ssl_epochs = 60;
  double ssl_tau = 0.5;
  double ssl_lr = 1e-3;
  int ssl_batch_size = 250;
  int ssl_d_h = 64;
  int ssl_d_z = 32;
  double aug_sigma = 0.1;
  double aug_p_drop = 0.1;
  // Model widths.
  int d_in = 64;
  int d_hidden = 64;
  int d_att = 32;
  int d_out = 32;
  int n_layers = 2;
};

// Throws ConfigError naming the first invalid field.
void validate(const TrainConfig& config);
nlohmann::json to_json(const TrainConfig& config);
// Unknown keys are rejected; missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& path);

// The effective loss settings, with the no_kd ablation applied.
LossConfig loss_config(const TrainConfig& config);
PretrainConfig pretrain_config(const TrainConfig& config);

struct Split {
  std::vector<int> train;  // sorted patient ids
  std::vector<int> test;
};

// Seeded shuffle within each group label; round(train_fraction * n_g) of
// each group go to train.
Split stratified_split(const Cohort& cohort, double train_fraction, std::uint64_t seed);

TaskLabels task_labels(const Cohort& cohort, const std::vector<int>& rows);

struct TrainState {
  ModelParams params;
  Optimizer optimizer;
  int epoch = 0;  // completed epochs
  std::vector<LossBreakdown> log;
  std::string rng_state;  // serialized engine; training itself draws nothing

  nlohmann::json to_json() const;
  static TrainState from_json(const nlohmann::json& j);
  bool operator==(const TrainState&) const = default;
};

void save_state(const TrainState& state, const std::filesystem::path& path);
TrainState load_state(const std::filesystem::path& path);

// Everything a step needs that stays fixed across epochs.
struct TrainingContext {
  SlotFeatures features;
  PassGraph teacher;
  PassGraph student;
  TaskLabels labels;
  LossConfig loss;
};

// One teacher pass, one student pass, one optimizer update. Throws
// NumericalError (state untouched) when the loss or a gradient is not finite.
LossBreakdown train_step(TrainState& state, const TrainingContext& ctx);

// Cohort as the model sees it: refined MRI views unless the run skips
// pretraining. `head` receives the trained projection head when requested.
Cohort prepare_cohort(const Cohort& cohort, const TrainConfig& config,
                      ProjectionHead* head = nullptr);

TrainingContext build_context(const Cohort& prepared, const TrainConfig& config,
                              const std::vector<int>& train_rows);

struct Predictions {
  std::vector<int> ids;
  Matrix logits_group;
  Matrix logits_grade;
  Vector risk_pfs;
  Vector risk_os;
};

Predictions predict(const SlotFeatures& features, const PassGraph& graph,
                    const ModelParams& params, const std::vector<int>& rows);

EvalReport evaluate_predictions(const Cohort& cohort, const Predictions& preds,
                                const std::string& pass);

struct FitOptions {
  std::optional<Split> split;                      // default: stratified_split
  std::optional<TrainState> resume;                // continue from this state
  std::optional<std::filesystem::path> checkpoint_dir;  // last-good state on abort
  int stop_after = -1;  // stop once this many epochs are complete (for resume tests)
  std::function<void(const TrainState&)> on_epoch;
};

struct FitResult {
  TrainState state;
  Split split;
  Predictions student;  // test patients
  Predictions teacher;  // test patients
  EvalReport report;    // student pass, or teacher pass for teacher_eval
  EvalReport teacher_report;
  ProjectionHead ssl_head;
};

FitResult fit(const Cohort& cohort, const TrainConfig& config, const FitOptions& options = {});

// Everything needed to re-score a finished run without training.
struct RunCheckpoint {
  TrainConfig config;
  Split split;
  std::optional<ProjectionHead> ssl_head;  // absent when pretraining was skipped
  TrainState state;

  nlohmann::json to_json() const;
  static RunCheckpoint from_json(const nlohmann::json& j);
};

RunCheckpoint make_checkpoint(const FitResult& result, const TrainConfig& config);
void save_checkpoint(const RunCheckpoint& checkpoint, const std::filesystem::path& path);
RunCheckpoint load_checkpoint(const std::filesystem::path& path);

struct Rescored {
  Predictions student;
  Predictions teacher;
  EvalReport report;  // same pass selection as fit
  EvalReport teacher_report;
};

// Rebuilds features and graphs from the cohort and scores the stored params
// on the stored test split.
Rescored rescore(const Cohort& cohort, const RunCheckpoint& checkpoint);

// CSV `epoch,ce_group,...,total`, epochs numbered from 1.
void write_training_log(const std::vector<LossBreakdown>& log, std::ostream& out);

}  // namespace hyperpriv
