#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hyperpriv/model.hpp"
#include "hyperpriv/train.hpp"
#include "oracles.hpp"

#include <cmath>
#include <numeric>

using namespace hyperpriv;
using namespace testing_support;

namespace {

struct Setup {
  Cohort cohort;
  SlotFeatures features;
  PassGraph teacher;
  PassGraph student;
  ModelParams params;
};

ModelDims dims_for(const SlotFeatures& f) {
  ModelDims d;
  d.slot_dims = f.dims();
  d.d_in = 8;
  d.d_hidden = 6;
  d.d_att = 4;
  d.d_out = 5;
  return d;
}

Setup setup(int n, std::uint64_t seed) {
  Setup s;
  GenConfig g = micro_gen_config(n, seed);
  g.k_knn = 3;
  s.cohort = generate_cohort(g);
  s.features = assemble_features(s.cohort);
  const HypergraphTopology topo = assemble_teacher(s.cohort, 3);
  s.teacher = teacher_graph(topo);
  s.student = student_graph(sever(topo));
  Rng rng(seed + 99);
  s.params = ModelParams::init(dims_for(s.features), rng);
  return s;
}

void randomize_privileged(Cohort& c, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd(0, 5);
  for (auto& p : c.patients) {
    for (double& v : p.text_dense) v = nd(gen);
    for (std::size_t k = 0; k < p.concept_flags.size(); ++k) p.concept_flags[k] = gen() % 2;
  }
}

}  // namespace

TEST_CASE("hgnn_layer hand example and isolated nodes") {
  HypergraphTopology t;
  t.n_nodes = 2;
  t.edges.push_back({0, EdgeKind::Intra, {0, 1}, 1.0});
  Matrix x(2, 1);
  x << 2, 4;
  const Matrix out = hgnn_layer(x, incidence(t), Matrix::Identity(1, 1), true);
  CHECK(out(0, 0) == doctest::Approx(3.0).epsilon(1e-14));
  CHECK(out(1, 0) == doctest::Approx(3.0).epsilon(1e-14));

  HypergraphTopology empty;
  empty.n_nodes = 4;
  std::mt19937_64 gen(1);
  const Matrix y = hgnn_layer(random_matrix(gen, 4, 3), incidence(empty), random_matrix(gen, 3, 2), false);
  CHECK(y.isZero(0.0));

  Matrix bad = x;
  bad(0, 0) = std::nan("");
  CHECK_THROWS_AS(hgnn_layer(bad, incidence(t), Matrix::Identity(1, 1), true), NumericalError);
}

TEST_CASE("hgnn_layer equals the pairwise graph oracle on 2-uniform topologies") {
  std::mt19937_64 gen(17);
  for (int trial = 0; trial < 50; ++trial) {
    CAPTURE(trial);
    const int n = 2 + static_cast<int>(gen() % 19);
    const HypergraphTopology t = random_two_uniform(gen, n, 1 + static_cast<int>(gen() % (2 * n)));
    const Matrix x = random_matrix(gen, n, 4), theta = random_matrix(gen, 4, 3);
    const bool last = trial % 2 == 0;
    const Matrix got = hgnn_layer(x, incidence(t), theta, last);
    CHECK((got - pairwise_layer(t, x, theta, last)).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("gated attention") {
  std::mt19937_64 gen(3);
  const Matrix w = random_matrix(gen, 4, 1), v = random_matrix(gen, 5, 4), u = random_matrix(gen, 5, 4);
  const Matrix one = random_matrix(gen, 1, 5);
  const AttentionResult single = gated_attention(one, w, v, u);
  CHECK(single.alpha[0] == 1.0);
  CHECK((single.pooled.transpose() - one).norm() == doctest::Approx(0.0));

  const Matrix same = one.replicate(4, 1);
  const AttentionResult uniform = gated_attention(same, w, v, u);
  for (int k = 0; k < 4; ++k) CHECK(uniform.alpha[k] == doctest::Approx(0.25).epsilon(1e-14));

  // 1-d nodes, V = 1, U = 0 (gate 1/2), w = 2: score = tanh(h).
  Matrix nodes(2, 1), w2(1, 1), v2(1, 1), u2(1, 1);
  nodes << 0.5, -0.5;
  w2 << 2;
  v2 << 1;
  u2 << 0;
  const double s1 = std::tanh(0.5), s2 = std::tanh(-0.5);
  const double a1 = std::exp(s1) / (std::exp(s1) + std::exp(s2));
  const AttentionResult hand = gated_attention(nodes, w2, v2, u2);
  CHECK(hand.alpha[0] == doctest::Approx(a1).epsilon(1e-14));
  CHECK(hand.pooled[0] == doctest::Approx(a1 * 0.5 - (1 - a1) * 0.5).epsilon(1e-14));

  CHECK_THROWS(gated_attention(Matrix(0, 5), w, v, u));
}

TEST_CASE("student pass is invariant to privileged features and edges") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Setup s = setup(24, seed);
    const ForwardOutput before = forward(s.features, s.student, s.params);

    Cohort changed = s.cohort;
    randomize_privileged(changed, seed + 1000);
    const HypergraphTopology topo2 = assemble_teacher(changed, 3);
    const SlotFeatures f2 = assemble_features(changed);
    CHECK(topo2 != assemble_teacher(s.cohort, 3));  // privileged edges really moved
    const ForwardOutput after = forward(f2, student_graph(sever(topo2)), s.params);
    CHECK(after == before);

    // Teacher does see the change.
    const ForwardOutput t_before = forward(s.features, s.teacher, s.params);
    const ForwardOutput t_after = forward(f2, teacher_graph(topo2), s.params);
    CHECK_FALSE(t_after == t_before);
  }
}

TEST_CASE("teacher output responds to a single patient's text") {
  Setup s = setup(24, 5);
  const ForwardOutput before = forward(s.features, s.teacher, s.params);
  SlotFeatures f = s.features;
  f.slots[kTextSlot](3, 0) += 1.0;
  const ForwardOutput after = forward(f, s.teacher, s.params);
  CHECK((after.h_surv - before.h_surv).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("one parameter set feeds both passes") {
  Setup s = setup(24, 6);
  const ForwardOutput t0 = forward(s.features, s.teacher, s.params);
  const ForwardOutput s0 = forward(s.features, s.student, s.params);
  ModelParams p = s.params;
  p.theta[0](0, 0) += 0.5;
  CHECK_FALSE(forward(s.features, s.teacher, p) == t0);
  CHECK_FALSE(forward(s.features, s.student, p) == s0);
}

TEST_CASE("attention sums to one over active nodes and outputs stay finite") {
  std::mt19937_64 gen(9);
  for (int trial = 0; trial < 100; ++trial) {
    Setup s = setup(12, 300 + trial);
    // Random scale stresses saturation.
    const double scale = 0.1 + 5.0 * (gen() % 100) / 100.0;
    for (auto* m : s.params.tensors()) *m *= scale;
    for (const PassGraph* g : {&s.teacher, &s.student}) {
      const ForwardOutput f = forward(s.features, *g, s.params);
      CHECK(all_finite(f.node_embeddings));
      CHECK(all_finite(f.task.risk_os));
      CHECK(all_finite(f.task.logits_group));
      for (int p = 0; p < 12; ++p) {
        CHECK(std::abs(f.alpha.row(p).sum() - 1.0) < 1e-6);
        if (g == &s.student) {
          CHECK(f.alpha(p, kTextSlot) == 0.0);
          CHECK(f.alpha(p, kConceptSlot) == 0.0);
        }
      }
    }
  }
}

TEST_CASE("relabelling patients permutes the outputs") {
  Setup s = setup(20, 8);
  std::vector<int> perm(20);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 gen(4);
  std::shuffle(perm.begin(), perm.end(), gen);
  Cohort shuffled = s.cohort;
  for (int i = 0; i < 20; ++i) {
    shuffled.patients[i] = s.cohort.patients[perm[i]];
    shuffled.patients[i].id = i;
  }
  const HypergraphTopology topo = assemble_teacher(shuffled, 3);
  const SlotFeatures f = assemble_features(shuffled);
  for (bool student : {false, true}) {
    const ForwardOutput a = student ? forward(s.features, s.student, s.params)
                                    : forward(s.features, s.teacher, s.params);
    const ForwardOutput b = student ? forward(f, student_graph(sever(topo)), s.params)
                                    : forward(f, teacher_graph(topo), s.params);
    for (int i = 0; i < 20; ++i) {
      CHECK((b.h_surv.row(i) - a.h_surv.row(perm[i])).cwiseAbs().maxCoeff() < 1e-10);
      CHECK((b.task.risk_os.row(i) - a.task.risk_os.row(perm[i])).cwiseAbs().maxCoeff() < 1e-10);
      CHECK((b.task.logits_group.row(i) - a.task.logits_group.row(perm[i])).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("without propagation the edges do not matter") {
  Setup s = setup(16, 10);
  const HypergraphTopology topo = assemble_teacher(s.cohort, 3);
  HypergraphTopology bare;
  bare.n_nodes = topo.n_nodes;
  const ForwardOutput with_edges = forward(s.features, student_graph(sever(topo), false), s.params);
  const ForwardOutput no_edges = forward(s.features, student_graph(sever(bare), false), s.params);
  CHECK(with_edges == no_edges);
}

TEST_CASE("parameters serialise exactly") {
  Setup s = setup(12, 11);
  CHECK(s.params.parameter_count() == parameter_count(s.params.dims));
  const ModelParams back = ModelParams::from_json(nlohmann::json::parse(s.params.to_json().dump()));
  CHECK(back == s.params);

  nlohmann::json broken = s.params.to_json();
  broken["tensors"].erase("w_sharp");
  CHECK_THROWS_AS(ModelParams::from_json(broken), ParseError);
}
