#include "hyperpriv/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace hyperpriv {
namespace {

using nlohmann::json;

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError("invalid config field '" + field + "': " + what);
}

bool is_prob(double p) { return std::isfinite(p) && p >= 0.0 && p <= 1.0; }

std::vector<double> random_unit(Rng& rng, int dim) {
  std::vector<double> v(dim);
  double norm = 0.0;
  while (norm < 1e-12) {
    norm = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      norm += x * x;
    }
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

// Largest censoring horizon c such that, for C ~ U(0, c), the expected
// fraction of the given event times that end up censored equals rate.
double censor_horizon(const std::vector<double>& times, double rate) {
  auto censored = [&](double c) {
    double acc = 0.0;
    for (double t : times) acc += std::min(t, c) / c;
    return acc / static_cast<double>(times.size());
  };
  double lo = 1e-9;
  double hi = 1.0;
  while (censored(hi) > rate) hi *= 2.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = std::sqrt(lo * hi);
    if (censored(mid) > rate) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return hi;
}

template <typename T>
T field(const json& j, const char* name, const std::string& where) {
  if (!j.is_object() || !j.contains(name)) {
    throw ParseError(where + ": missing field '" + name + "'");
  }
  try {
    return j.at(name).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(where + ": field '" + name + "' has wrong type (" + e.what() + ")");
  }
}

}  // namespace

std::string to_string(Group g) { return g == Group::PFA ? "PFA" : "PFB"; }
std::string to_string(Grade g) { return g == Grade::II ? "II" : "III"; }

void validate(const GenConfig& c) {
  require(c.n_patients >= 1, "n_patients", "must be >= 1");
  require(c.d_c >= 2, "d_c", "must be >= 2");
  require(c.d_m >= 2, "d_m", "must be >= 2");
  require(c.d_t >= 2, "d_t", "must be >= 2");
  require(c.n_concepts >= 1, "n_concepts", "must be >= 1");
  require(is_prob(c.subtype_prevalence), "subtype_prevalence", "must be in [0,1]");
  require(std::isfinite(c.mri_signal) && c.mri_signal >= 0, "mri_signal", "must be >= 0");
  require(std::isfinite(c.text_signal) && c.text_signal >= 0, "text_signal", "must be >= 0");
  require(std::isfinite(c.mri_concept_signal) && c.mri_concept_signal >= 0,
          "mri_concept_signal", "must be >= 0");
  require(std::isfinite(c.text_concept_signal) && c.text_concept_signal >= 0,
          "text_concept_signal", "must be >= 0");
  require(std::isfinite(c.mri_baseline) && c.mri_baseline >= 0, "mri_baseline", "must be >= 0");
  require(static_cast<int>(c.concept_cond_probs.size()) == c.n_concepts,
          "concept_cond_probs", "length must equal n_concepts");
  for (const auto& p : c.concept_cond_probs) {
    require(is_prob(p[0]) && is_prob(p[1]), "concept_cond_probs", "must be in [0,1]");
  }
  for (double h : c.base_hazards.pfs) {
    require(std::isfinite(h) && h > 0, "base_hazards", "must be > 0");
  }
  for (double h : c.base_hazards.os) {
    require(std::isfinite(h) && h > 0, "base_hazards", "must be > 0");
  }
  require(static_cast<int>(c.concept_hazard_multipliers.size()) == c.n_concepts,
          "concept_hazard_multipliers", "length must equal n_concepts");
  for (double m : c.concept_hazard_multipliers) {
    require(std::isfinite(m) && m > 0, "concept_hazard_multipliers", "must be > 0");
  }
  require(is_prob(c.censor_rate) && c.censor_rate < 1.0, "censor_rate", "must be in [0,1)");
  require(std::isfinite(c.noise_sigma) && c.noise_sigma >= 0, "noise_sigma", "must be >= 0");
  require(is_prob(c.grade_flip_prob), "grade_flip_prob", "must be in [0,1]");
  require(c.k_knn >= 1, "k_knn", "must be >= 1");
  if (c.n_patients < 2 * c.k_knn) {
    throw ConfigError("cohort too small: n_patients=" + std::to_string(c.n_patients) +
                      " < 2*k_knn=" + std::to_string(2 * c.k_knn));
  }
}

Cohort generate_cohort(const GenConfig& config) {
  validate(config);
  const Rng root(config.seed);

  // Fixed latent directions, shared by the whole cohort.
  Rng axes = root.derive("axes");
  const auto mri_axis = random_unit(axes, config.d_m);
  const auto text_axis = random_unit(axes, config.d_t);
  std::vector<std::vector<double>> mri_concept_dirs;
  std::vector<std::vector<double>> text_concept_dirs;
  for (int c = 0; c < config.n_concepts; ++c) {
    mri_concept_dirs.push_back(random_unit(axes, config.d_m));
    text_concept_dirs.push_back(random_unit(axes, config.d_t));
  }
  std::vector<double> baseline = random_unit(axes, config.d_m);
  {
    double norm = 0.0;
    for (double& b : baseline) {
      b = std::abs(b);
      norm += b * b;
    }
    for (double& b : baseline) b *= config.mri_baseline / std::sqrt(norm);
  }

  Cohort cohort;
  cohort.config = config;
  cohort.patients.resize(config.n_patients);
  std::vector<double> os_true(config.n_patients);
  std::vector<double> pfs_true(config.n_patients);

  for (int i = 0; i < config.n_patients; ++i) {
    Rng rng = root.derive("patient").derive(static_cast<std::uint64_t>(i));
    PatientRecord& p = cohort.patients[i];
    p.id = i;
    p.group = rng.bernoulli(config.subtype_prevalence) ? Group::PFA : Group::PFB;
    const int g = static_cast<int>(p.group);
    const double sign = p.group == Group::PFA ? 0.5 : -0.5;

    const bool flip = rng.bernoulli(config.grade_flip_prob);
    const bool high_grade = (p.group == Group::PFA) != flip;
    p.grade = high_grade ? Grade::III : Grade::II;

    p.concept_flags.resize(config.n_concepts);
    for (int c = 0; c < config.n_concepts; ++c) {
      p.concept_flags[c] = rng.bernoulli(config.concept_cond_probs[c][g]);
    }

    // PFA presents in younger patients and more often off-midline.
    p.age = std::clamp(p.group == Group::PFA ? rng.normal(10.0, 8.0) : rng.normal(25.0, 12.0),
                       0.5, 80.0);
    p.sex = rng.bernoulli(0.5) ? 1 : 0;
    {
      static constexpr std::array<std::array<double, 3>, 2> kLocation{
          {{0.25, 0.55, 0.20}, {0.60, 0.20, 0.20}}};
      const double u = rng.uniform();
      p.location = u < kLocation[g][0] ? 0 : (u < kLocation[g][0] + kLocation[g][1] ? 1 : 2);
    }
    const std::array<double, 5> clinical_core{(p.age - 18.0) / 12.0, p.sex * 2.0 - 1.0,
                                              p.location == 0 ? 1.0 : 0.0,
                                              p.location == 1 ? 1.0 : 0.0,
                                              p.location == 2 ? 1.0 : 0.0};
    p.clinical_vec.resize(config.d_c);
    for (int k = 0; k < config.d_c; ++k) {
      p.clinical_vec[k] = k < 5 ? clinical_core[k] : rng.normal(0.0, config.noise_sigma);
    }

    std::vector<double> mri_mean(config.d_m);
    for (int k = 0; k < config.d_m; ++k) {
      double v = baseline[k] + sign * config.mri_signal * mri_axis[k];
      for (int c = 0; c < config.n_concepts; ++c) {
        if (p.concept_flags[c]) v += config.mri_concept_signal * mri_concept_dirs[c][k];
      }
      mri_mean[k] = v;
    }
    p.mri_views.assign(kMriViews, std::vector<double>(config.d_m));
    for (auto& view : p.mri_views) {
      for (int k = 0; k < config.d_m; ++k) {
        view[k] = mri_mean[k] + rng.normal(0.0, config.noise_sigma);
      }
    }

    p.text_dense.resize(config.d_t);
    for (int k = 0; k < config.d_t; ++k) {
      double v = sign * config.text_signal * text_axis[k];
      for (int c = 0; c < config.n_concepts; ++c) {
        if (p.concept_flags[c]) v += config.text_concept_signal * text_concept_dirs[c][k];
      }
      p.text_dense[k] = v + rng.normal(0.0, config.noise_sigma);
    }

    double multiplier = 1.0;
    for (int c = 0; c < config.n_concepts; ++c) {
      if (p.concept_flags[c]) multiplier *= config.concept_hazard_multipliers[c];
    }
    const double os_rate = config.base_hazards.os[g] * multiplier;
    const double prog_rate = config.base_hazards.pfs[g] * multiplier;
    os_true[i] = -std::log(rng.uniform_open()) / os_rate;
    const double progression = -std::log(rng.uniform_open()) / prog_rate;
    pfs_true[i] = std::min(progression, os_true[i]);
  }

  Rng censor_rng = root.derive("censoring");
  const double horizon = config.censor_rate > 0.0
                             ? censor_horizon(os_true, config.censor_rate)
                             : std::numeric_limits<double>::infinity();
  for (int i = 0; i < config.n_patients; ++i) {
    PatientRecord& p = cohort.patients[i];
    const double censor_time =
        std::isfinite(horizon) ? horizon * censor_rng.uniform_open()
                               : std::numeric_limits<double>::infinity();
    p.os = {std::min(os_true[i], censor_time), os_true[i] <= censor_time};
    p.pfs = {std::min(pfs_true[i], censor_time), pfs_true[i] <= censor_time};
  }
  return cohort;
}

double censored_fraction(const Cohort& cohort) {
  if (cohort.patients.empty()) return 0.0;
  int censored = 0;
  for (const auto& p : cohort.patients) censored += p.os.event ? 0 : 1;
  return static_cast<double>(censored) / cohort.size();
}

void validate(const Cohort& cohort) {
  if (cohort.patients.empty()) throw ParseError("cohort empty");
  for (int i = 0; i < cohort.size(); ++i) {
    const auto& p = cohort.patients[i];
    const std::string where = "patients[" + std::to_string(i) + "]";
    if (p.id != i) throw ParseError(where + ": id must be " + std::to_string(i));
    if (p.mri_views.size() != kMriViews) throw ParseError(where + ": mri_views length != 5");
    if (!p.mri_refined.empty() && p.mri_refined.size() != kMriViews) {
      throw ParseError(where + ": mri_refined length != 5");
    }
    for (const auto& v : p.mri_views) {
      if (v.size() != p.mri_views.front().size() || v.empty()) {
        throw ParseError(where + ": mri_views have inconsistent dims");
      }
    }
    if (static_cast<int>(p.concept_flags.size()) != cohort.config.n_concepts) {
      throw ParseError(where + ": concept_flags length != n_concepts");
    }
    if (!(p.pfs.time > 0) || !(p.os.time > 0)) {
      throw ParseError(where + ": survival times must be > 0");
    }
    if (p.pfs.time > p.os.time) throw ParseError(where + ": pfs.time > os.time");
    if (p.location < 0 || p.location > 2) throw ParseError(where + ": location out of range");
  }
}

json to_json(const GenConfig& c) {
  json probs = json::array();
  for (const auto& p : c.concept_cond_probs) probs.push_back({p[0], p[1]});
  return json{{"n_patients", c.n_patients},
              {"d_c", c.d_c},
              {"d_m", c.d_m},
              {"d_t", c.d_t},
              {"n_concepts", c.n_concepts},
              {"subtype_prevalence", c.subtype_prevalence},
              {"mri_signal", c.mri_signal},
              {"text_signal", c.text_signal},
              {"mri_concept_signal", c.mri_concept_signal},
              {"mri_baseline", c.mri_baseline},
              {"text_concept_signal", c.text_concept_signal},
              {"concept_cond_probs", probs},
              {"base_hazards", {{"pfs", c.base_hazards.pfs}, {"os", c.base_hazards.os}}},
              {"concept_hazard_multipliers", c.concept_hazard_multipliers},
              {"censor_rate", c.censor_rate},
              {"noise_sigma", c.noise_sigma},
              {"grade_flip_prob", c.grade_flip_prob},
              {"k_knn", c.k_knn},
              {"seed", c.seed}};
}

// Missing keys keep their defaults so partial config files work.
GenConfig gen_config_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("config: expected an object");
  static const std::set<std::string> kKnown{
      "n_patients", "d_c", "d_m", "d_t", "n_concepts", "subtype_prevalence", "mri_signal",
      "text_signal", "mri_concept_signal", "mri_baseline", "text_concept_signal",
      "concept_cond_probs", "base_hazards", "concept_hazard_multipliers", "censor_rate",
      "noise_sigma", "grade_flip_prob", "k_knn", "seed"};
  for (const auto& [key, value] : j.items()) {
    if (!kKnown.count(key)) throw ParseError("unknown config field '" + key + "'");
  }
  GenConfig c;
  auto opt = [&](const char* name, auto& out) {
    if (j.contains(name)) out = field<std::decay_t<decltype(out)>>(j, name, "config");
  };
  opt("n_patients", c.n_patients);
  opt("d_c", c.d_c);
  opt("d_m", c.d_m);
  opt("d_t", c.d_t);
  opt("n_concepts", c.n_concepts);
  opt("subtype_prevalence", c.subtype_prevalence);
  opt("mri_signal", c.mri_signal);
  opt("text_signal", c.text_signal);
  opt("mri_concept_signal", c.mri_concept_signal);
  opt("mri_baseline", c.mri_baseline);
  opt("text_concept_signal", c.text_concept_signal);
  opt("concept_cond_probs", c.concept_cond_probs);
  if (j.contains("base_hazards")) {
    const auto& h = j.at("base_hazards");
    c.base_hazards.pfs = field<std::array<double, 2>>(h, "pfs", "config.base_hazards");
    c.base_hazards.os = field<std::array<double, 2>>(h, "os", "config.base_hazards");
  }
  opt("concept_hazard_multipliers", c.concept_hazard_multipliers);
  opt("censor_rate", c.censor_rate);
  opt("noise_sigma", c.noise_sigma);
  opt("grade_flip_prob", c.grade_flip_prob);
  opt("k_knn", c.k_knn);
  opt("seed", c.seed);
  return c;
}

json to_json(const Cohort& cohort) {
  json patients = json::array();
  for (const auto& p : cohort.patients) {
    json jp{{"id", p.id},
            {"age", p.age},
            {"sex", p.sex},
            {"location", p.location},
            {"clinical_vec", p.clinical_vec},
            {"mri_views", p.mri_views},
            {"text_dense", p.text_dense},
            {"concept_flags", p.concept_flags},
            {"group", to_string(p.group)},
            {"grade", to_string(p.grade)},
            {"pfs", {{"time", p.pfs.time}, {"event", p.pfs.event}}},
            {"os", {{"time", p.os.time}, {"event", p.os.event}}}};
    if (!p.mri_refined.empty()) jp["mri_refined"] = p.mri_refined;
    patients.push_back(std::move(jp));
  }
  return json{{"config", to_json(cohort.config)}, {"patients", std::move(patients)}};
}

Cohort cohort_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("cohort: expected an object");
  Cohort cohort;
  cohort.config = gen_config_from_json(field<json>(j, "config", "cohort"));
  const auto patients = field<json>(j, "patients", "cohort");
  if (!patients.is_array()) throw ParseError("cohort: 'patients' must be an array");
  if (patients.empty()) throw ParseError("cohort empty");
  for (std::size_t i = 0; i < patients.size(); ++i) {
    const auto& jp = patients[i];
    const std::string where = "patients[" + std::to_string(i) + "]";
    PatientRecord p;
    p.id = field<int>(jp, "id", where);
    p.age = field<double>(jp, "age", where);
    p.sex = field<int>(jp, "sex", where);
    p.location = field<int>(jp, "location", where);
    p.clinical_vec = field<std::vector<double>>(jp, "clinical_vec", where);
    p.mri_views = field<std::vector<std::vector<double>>>(jp, "mri_views", where);
    if (p.mri_views.size() != kMriViews) throw ParseError(where + ": mri_views length != 5");
    p.text_dense = field<std::vector<double>>(jp, "text_dense", where);
    p.concept_flags = field<std::vector<bool>>(jp, "concept_flags", where);
    const auto group = field<std::string>(jp, "group", where);
    if (group != "PFA" && group != "PFB") throw ParseError(where + ": group must be PFA|PFB");
    p.group = group == "PFA" ? Group::PFA : Group::PFB;
    const auto grade = field<std::string>(jp, "grade", where);
    if (grade != "II" && grade != "III") throw ParseError(where + ": grade must be II|III");
    p.grade = grade == "II" ? Grade::II : Grade::III;
    const auto pfs = field<json>(jp, "pfs", where);
    p.pfs = {field<double>(pfs, "time", where + ".pfs"), field<bool>(pfs, "event", where + ".pfs")};
    const auto os = field<json>(jp, "os", where);
    p.os = {field<double>(os, "time", where + ".os"), field<bool>(os, "event", where + ".os")};
    if (jp.contains("mri_refined")) {
      p.mri_refined = field<std::vector<std::vector<double>>>(jp, "mri_refined", where);
    }
    cohort.patients.push_back(std::move(p));
  }
  validate(cohort);
  return cohort;
}

void save_cohort(const Cohort& cohort, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for writing: " + path.string());
  out << to_json(cohort).dump() << '\n';
  if (!out) throw ConfigError("write failed: " + path.string());
}

GenConfig load_gen_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  try {
    return gen_config_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ParseError("config: malformed JSON (" + std::string(e.what()) + ")");
  }
}

Cohort load_cohort(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open cohort file: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("cohort: malformed JSON (" + std::string(e.what()) + ")");
  }
  return cohort_from_json(j);
}

}  // namespace hyperpriv
