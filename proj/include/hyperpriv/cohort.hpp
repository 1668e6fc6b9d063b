#pragma once

#include "hyperpriv/common.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace hyperpriv {

inline constexpr int kMriViews = 5;

enum class Group : int { PFA = 0, PFB = 1 };
enum class Grade : int { II = 0, III = 1 };

struct SurvivalOutcome {
  double time = 1.0;  // months, > 0
  bool event = false;

  bool operator==(const SurvivalOutcome&) const = default;
};

// One synthetic patient. mri_refined is empty until contrastive pretraining
// writes refined view embeddings back (one per MRI view).
struct PatientRecord {
  int id = 0;
  double age = 0.0;
  int sex = 0;
  int location = 0;
  std::vector<double> clinical_vec;
  std::vector<std::vector<double>> mri_views;
  std::vector<double> text_dense;
  std::vector<bool> concept_flags;
  Group group = Group::PFA;
  Grade grade = Grade::II;
  SurvivalOutcome pfs;
  SurvivalOutcome os;
  std::vector<std::vector<double>> mri_refined;

  bool operator==(const PatientRecord&) const = default;
};

struct SurvivalHazards {
  // Monthly exponential rates indexed by Group.
  std::array<double, 2> pfs{1.0 / 20.0, 1.0 / 60.0};
  std::array<double, 2> os{1.0 / 45.0, 1.0 / 150.0};

  bool operator==(const SurvivalHazards&) const = default;
};

struct GenConfig {
  int n_patients = 200;
  int d_c = 8;
  int d_m = 32;
  int d_t = 32;
  int n_concepts = 6;  // concept vocabulary size
  double subtype_prevalence = 0.5;  // P(PFA)
  double mri_signal = 1.25;
  double text_signal = 4.0;
  // Norm of each concept's loading in MRI / text space, per active concept.
  double mri_concept_signal = 0.8;
  double text_concept_signal = 2.0;
  // Norm of a fixed non-negative offset added to every raw MRI view, as in
  // uncentred post-activation image features.
  double mri_baseline = 0.0;
  // Per concept: {P(flag | PFA), P(flag | PFB)}.
  std::vector<std::array<double, 2>> concept_cond_probs{
      {0.6, 0.2}, {0.5, 0.3}, {0.3, 0.3}, {0.4, 0.15}, {0.25, 0.4}, {0.5, 0.5}};
  SurvivalHazards base_hazards;
  std::vector<double> concept_hazard_multipliers{2.2, 1.6, 1.8, 0.6, 1.4, 1.0};
  double censor_rate = 0.3;
  double noise_sigma = 1.0;
  double grade_flip_prob = 0.25;
  int k_knn = 10;  // only used to reject cohorts too small for KNN edges
  std::uint64_t seed = 1;

  bool operator==(const GenConfig&) const = default;
};

struct Cohort {
  std::vector<PatientRecord> patients;
  GenConfig config;

  int size() const { return static_cast<int>(patients.size()); }
  bool operator==(const Cohort&) const = default;
};

// Throws ConfigError naming the first invalid field.
void validate(const GenConfig& config);

Cohort generate_cohort(const GenConfig& config);

void save_cohort(const Cohort& cohort, const std::filesystem::path& path);
Cohort load_cohort(const std::filesystem::path& path);

nlohmann::json to_json(const GenConfig& config);
GenConfig gen_config_from_json(const nlohmann::json& j);
GenConfig load_gen_config(const std::filesystem::path& path);
nlohmann::json to_json(const Cohort& cohort);
Cohort cohort_from_json(const nlohmann::json& j);

// Checks record-level invariants (5 views, pfs <= os, positive times, flag
// count). Throws ParseError.
void validate(const Cohort& cohort);

std::string to_string(Group g);
std::string to_string(Grade g);

double censored_fraction(const Cohort& cohort);  // over OS outcomes

}  // namespace hyperpriv
