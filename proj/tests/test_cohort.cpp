#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hyperpriv/cohort.hpp"
#include "support.hpp"

#include <filesystem>
#include <fstream>

using namespace hyperpriv;
using namespace testing_support;

namespace {

// Nearest-class-mean probe: fit on even ids, score on odd ids.
template <class Get>
double probe_accuracy(const Cohort& c, Get features) {
  Vector mean[2];
  int count[2] = {0, 0};
  for (const auto& p : c.patients) {
    if (p.id % 2) continue;
    const Vector f = features(p);
    const int g = static_cast<int>(p.group);
    if (count[g] == 0) mean[g] = Vector::Zero(f.size());
    mean[g] += f;
    ++count[g];
  }
  mean[0] /= count[0];
  mean[1] /= count[1];
  int hits = 0, total = 0;
  for (const auto& p : c.patients) {
    if (p.id % 2 == 0) continue;
    const Vector f = features(p);
    const int pred = (f - mean[0]).norm() < (f - mean[1]).norm() ? 0 : 1;
    hits += pred == static_cast<int>(p.group);
    ++total;
  }
  return static_cast<double>(hits) / total;
}

Vector pooled_mri(const PatientRecord& p) {
  Vector v = Vector::Zero(static_cast<Eigen::Index>(p.mri_views[0].size()));
  for (const auto& view : p.mri_views) v += Eigen::Map<const Vector>(view.data(), v.size());
  return v / kMriViews;
}

Vector text(const PatientRecord& p) {
  return Eigen::Map<const Vector>(p.text_dense.data(), static_cast<Eigen::Index>(p.text_dense.size()));
}

}  // namespace

TEST_CASE("generation is deterministic and round-trips") {
  const Cohort a = generate_cohort(GenConfig{});
  const Cohort b = generate_cohort(GenConfig{});
  CHECK(a.size() == 200);
  CHECK(to_json(a).dump() == to_json(b).dump());
  GenConfig other;
  other.seed = 2;
  CHECK(to_json(generate_cohort(other)).dump() != to_json(a).dump());

  const auto path = std::filesystem::temp_directory_path() / "hyperpriv_cohort_roundtrip.json";
  save_cohort(a, path);
  CHECK(load_cohort(path) == a);
  std::filesystem::remove(path);
}

TEST_CASE("record invariants hold") {
  const Cohort c = generate_cohort(GenConfig{});
  for (const auto& p : c.patients) {
    CHECK(p.mri_views.size() == 5);
    CHECK(p.pfs.time <= p.os.time);
    CHECK(p.pfs.time > 0);
    CHECK(p.concept_flags.size() == 6);
    CHECK(p.location >= 0);
    CHECK(p.location <= 2);
  }
}

TEST_CASE("malformed cohort files are rejected with the field named") {
  nlohmann::json j = to_json(generate_cohort(micro_gen_config(6, 1)));
  nlohmann::json four = j;
  four["patients"][2]["mri_views"].erase(0);
  CHECK_THROWS_WITH_AS(cohort_from_json(four), doctest::Contains("mri_views length != 5"), ParseError);
  nlohmann::json empty = j;
  empty["patients"] = nlohmann::json::array();
  CHECK_THROWS_WITH_AS(cohort_from_json(empty), doctest::Contains("cohort empty"), ParseError);
  nlohmann::json missing = j;
  missing["patients"][0].erase("os");
  CHECK_THROWS_WITH_AS(cohort_from_json(missing), doctest::Contains("os"), ParseError);
}

TEST_CASE("config validation names the field") {
  GenConfig c;
  c.censor_rate = 1.5;
  CHECK_THROWS_WITH_AS(validate(c), doctest::Contains("censor_rate"), ConfigError);
  c = GenConfig{};
  c.n_patients = 15;  // below 2 * k_knn
  CHECK_THROWS_AS(generate_cohort(c), ConfigError);
  CHECK_THROWS_WITH_AS(gen_config_from_json(nlohmann::json{{"censor_rat", 0.2}}),
                       doctest::Contains("censor_rat"), ParseError);
  CHECK(gen_config_from_json(to_json(GenConfig{})) == GenConfig{});
}

TEST_CASE("no censoring means every event is observed") {
  GenConfig c;
  c.censor_rate = 0.0;
  for (const auto& p : generate_cohort(c).patients) {
    CHECK(p.pfs.event);
    CHECK(p.os.event);
  }
}

TEST_CASE("censoring is calibrated") {
  for (double rate : {0.1, 0.2, 0.3, 0.5}) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      GenConfig c;
      c.censor_rate = rate;
      c.seed = seed;
      CHECK(std::abs(censored_fraction(generate_cohort(c)) - rate) <= 0.1);
    }
  }
}

TEST_CASE("zero signal gives no MRI group information") {
  GenConfig c;
  c.n_patients = 2000;
  c.mri_signal = 0;
  c.text_signal = 0;
  c.mri_concept_signal = 0;
  c.text_concept_signal = 0;
  const Cohort cohort = generate_cohort(c);
  Vector mean[2] = {Vector::Zero(c.d_m), Vector::Zero(c.d_m)};
  int count[2] = {0, 0};
  for (const auto& p : cohort.patients) {
    mean[static_cast<int>(p.group)] += pooled_mri(p);
    ++count[static_cast<int>(p.group)];
  }
  const double gap = (mean[0] / count[0] - mean[1] / count[1]).norm();
  // Each pooled coordinate has sd noise/sqrt(5); the gap of means has
  // expected norm about sqrt(d_m * 4 / (5 n)).
  const double noise_scale = std::sqrt(c.d_m * 4.0 / (5.0 * c.n_patients));
  CHECK(gap < 2.0 * noise_scale);
  CHECK(std::abs(probe_accuracy(cohort, pooled_mri) - 0.5) < 0.05);
}

TEST_CASE("text separates the groups better than MRI") {
  double text_acc = 0, mri_acc = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    GenConfig c;
    c.seed = seed;
    const Cohort cohort = generate_cohort(c);
    text_acc += probe_accuracy(cohort, text) / 5;
    mri_acc += probe_accuracy(cohort, pooled_mri) / 5;
  }
  CHECK(text_acc > mri_acc);
}

TEST_CASE("group drives hazards") {
  GenConfig c;
  c.n_patients = 1000;
  c.censor_rate = 0.0;
  const Cohort cohort = generate_cohort(c);
  double mean_os[2] = {0, 0};
  int count[2] = {0, 0};
  for (const auto& p : cohort.patients) {
    mean_os[static_cast<int>(p.group)] += p.os.time;
    ++count[static_cast<int>(p.group)];
  }
  CHECK(mean_os[0] / count[0] < mean_os[1] / count[1]);  // PFA fares worse
}
