#pragma once

#include "hyperpriv/cohort.hpp"
#include "hyperpriv/common.hpp"

#include <json.hpp>

#include <vector>

namespace hyperpriv {

// Two-layer head d_m -> d_h -> d_z with tanh in between. The first-layer
// output is the refined view embedding used downstream; the second layer only
// exists for the contrastive objective.
struct ProjectionHead {
  Matrix w1;  // d_h x d_m
  Matrix b1;  // 1 x d_h
  Matrix w2;  // d_z x d_h
  Matrix b2;  // 1 x d_z

  static ProjectionHead init(int d_m, int d_h, int d_z, Rng& rng);

  int input_dim() const { return static_cast<int>(w1.cols()); }
  int hidden_dim() const { return static_cast<int>(w1.rows()); }
  int output_dim() const { return static_cast<int>(w2.rows()); }

  Matrix embed(const Matrix& views) const;    // rows = views, n x d_h
  Matrix project(const Matrix& views) const;  // n x d_z

  nlohmann::json to_json() const;
  static ProjectionHead from_json(const nlohmann::json& j);
  bool operator==(const ProjectionHead&) const = default;
};

struct AugmentConfig {
  double sigma = 0.1;
  double p_drop = 0.1;
};

// Gaussian jitter followed by coordinate dropout (dropped entries set to 0).
Vector augment(const Vector& view, const AugmentConfig& config, Rng& rng);

struct PretrainConfig {
  int epochs = 60;
  double tau = 0.5;
  double lr = 1e-3;
  int batch_size = 250;
  int d_h = 64;
  int d_z = 32;
  AugmentConfig augment;
  std::uint64_t seed = 1;
};

struct PretrainResult {
  ProjectionHead head;
  // refined[p][v] is the d_h embedding of view v of patient p.
  std::vector<std::vector<std::vector<double>>> refined;
  std::vector<double> loss_history;   // mean batch loss per epoch (augmentations vary)
  std::vector<double> probe_history;  // full-batch loss on the fixed probe pair after each epoch
  double initial_loss = 0.0;  // full-batch loss before training, fixed augmentation
  double final_loss = 0.0;    // same batch after training
};

// Contrastive refinement over all MRI views of the cohort. Positives are two
// augmentations of the same view; the other views in the batch are negatives.
// With epochs == 0 the returned embeddings are the raw views unchanged.
PretrainResult pretrain(const Cohort& cohort, const PretrainConfig& config);

// Returns a copy of the cohort with mri_refined populated.
Cohort with_refined_views(const Cohort& cohort, const PretrainResult& result);

// Recomputes refined embeddings from a stored head.
Cohort with_refined_views(const Cohort& cohort, const ProjectionHead& head);

}  // namespace hyperpriv
