#include "hyperpriv/hypergraph.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace hyperpriv {
namespace {

std::vector<int> slots_for(EdgeKind kind) {
  switch (kind) {
    case EdgeKind::VisualKNN:
      return {0, 1, 2, 3, 4};
    case EdgeKind::ClinicalKNN:
      return {kClinicalSlot};
    case EdgeKind::TextKNN:
      return {kTextSlot};
    default:
      throw std::invalid_argument("build_knn_edges: kind must be a KNN family");
  }
}

Vector to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

std::string to_string(EdgeKind kind) {
  switch (kind) {
    case EdgeKind::Intra:
      return "intra";
    case EdgeKind::VisualKNN:
      return "visual_knn";
    case EdgeKind::ClinicalKNN:
      return "clinical_knn";
    case EdgeKind::TextKNN:
      return "text_knn";
    case EdgeKind::Concept:
      return "concept";
  }
  return "unknown";
}

void HypergraphTopology::validate() const {
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto& edge = edges[e];
    if (edge.id != static_cast<int>(e)) throw std::invalid_argument("edge ids not contiguous");
    if (edge.members.size() < 2) throw std::invalid_argument("edge with fewer than 2 members");
    for (std::size_t m = 0; m < edge.members.size(); ++m) {
      if (edge.members[m] < 0 || edge.members[m] >= n_nodes) {
        throw std::invalid_argument("edge member out of range");
      }
      if (m > 0 && edge.members[m] <= edge.members[m - 1]) {
        throw std::invalid_argument("edge members not sorted/unique");
      }
    }
  }
}

std::vector<Hyperedge> build_intra_edges(int n_patients) {
  std::vector<Hyperedge> edges;
  edges.reserve(n_patients);
  for (int p = 0; p < n_patients; ++p) {
    Hyperedge e;
    e.id = p;
    e.kind = EdgeKind::Intra;
    for (int s = 0; s < kSlotsPerPatient; ++s) e.members.push_back(NodeIndex{p, s}.flat());
    edges.push_back(std::move(e));
  }
  return edges;
}

std::vector<Hyperedge> build_intra_edges(const Cohort& cohort) {
  return build_intra_edges(cohort.size());
}

std::vector<Hyperedge> build_knn_edges(const std::vector<Vector>& features, int k, EdgeKind kind) {
  const auto slots = slots_for(kind);
  const int n = static_cast<int>(features.size());
  if (k < 1 || n <= k) {
    throw std::invalid_argument("build_knn_edges: need N > k >= 1 (N=" + std::to_string(n) +
                                ", k=" + std::to_string(k) + ")");
  }
  std::vector<Vector> unit(n);
  for (int i = 0; i < n; ++i) {
    if (!features[i].allFinite()) {
      throw std::invalid_argument("build_knn_edges: non-finite feature for patient " +
                                  std::to_string(i));
    }
    const double norm = features[i].norm();
    if (norm == 0.0) {
      throw std::invalid_argument("build_knn_edges: zero-norm feature for patient " +
                                  std::to_string(i));
    }
    unit[i] = features[i] / norm;
  }

  std::vector<Hyperedge> edges;
  edges.reserve(n);
  std::vector<int> order(n - 1);
  std::vector<double> sim(n);
  for (int anchor = 0; anchor < n; ++anchor) {
    for (int j = 0; j < n; ++j) sim[j] = unit[anchor].dot(unit[j]);
    order.clear();
    for (int j = 0; j < n; ++j) {
      if (j != anchor) order.push_back(j);
    }
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      if (sim[a] != sim[b]) return sim[a] > sim[b];
      return a < b;
    });
    std::vector<int> patients(order.begin(), order.begin() + k);
    patients.push_back(anchor);

    Hyperedge e;
    e.id = anchor;
    e.kind = kind;
    for (int p : patients) {
      for (int s : slots) e.members.push_back(NodeIndex{p, s}.flat());
    }
    std::sort(e.members.begin(), e.members.end());
    edges.push_back(std::move(e));
  }
  return edges;
}

std::vector<Hyperedge> build_concept_edges(const Cohort& cohort) {
  std::vector<Hyperedge> edges;
  const int n_concepts = cohort.config.n_concepts;
  for (int c = 0; c < n_concepts; ++c) {
    Hyperedge e;
    e.kind = EdgeKind::Concept;
    for (const auto& p : cohort.patients) {
      if (c < static_cast<int>(p.concept_flags.size()) && p.concept_flags[c]) {
        e.members.push_back(NodeIndex{p.id, kConceptSlot}.flat());
      }
    }
    if (e.members.size() < 2) continue;
    e.id = static_cast<int>(edges.size());
    edges.push_back(std::move(e));
  }
  return edges;
}

std::vector<Vector> visual_features(const Cohort& cohort) {
  std::vector<Vector> out;
  out.reserve(cohort.patients.size());
  for (const auto& p : cohort.patients) {
    const auto& views = p.mri_refined.empty() ? p.mri_views : p.mri_refined;
    Vector mean = Vector::Zero(static_cast<Eigen::Index>(views.front().size()));
    for (const auto& v : views) mean += to_vector(v);
    out.push_back(mean / static_cast<double>(views.size()));
  }
  return out;
}

HypergraphTopology assemble_teacher(const Cohort& cohort, int k) {
  if (cohort.patients.empty()) throw std::invalid_argument("assemble_teacher: empty cohort");
  HypergraphTopology topo;
  topo.n_nodes = cohort.size() * kSlotsPerPatient;

  std::vector<Vector> clinical;
  std::vector<Vector> text;
  for (const auto& p : cohort.patients) {
    clinical.push_back(to_vector(p.clinical_vec));
    text.push_back(to_vector(p.text_dense));
  }

  auto append = [&](std::vector<Hyperedge> edges) {
    for (auto& e : edges) {
      e.id = static_cast<int>(topo.edges.size());
      topo.edges.push_back(std::move(e));
    }
  };
  append(build_intra_edges(cohort));
  append(build_knn_edges(visual_features(cohort), k, EdgeKind::VisualKNN));
  append(build_knn_edges(clinical, k, EdgeKind::ClinicalKNN));
  append(build_knn_edges(text, k, EdgeKind::TextKNN));
  append(build_concept_edges(cohort));
  return topo;
}

SeveredView sever(const HypergraphTopology& topology) {
  SeveredView view;
  view.topology.n_nodes = topology.n_nodes;
  for (const auto& e : topology.edges) {
    if (is_privileged(e.kind)) continue;
    Hyperedge kept = e;
    kept.id = static_cast<int>(view.topology.edges.size());
    view.topology.edges.push_back(std::move(kept));
  }
  view.blind_mask.resize(topology.n_nodes);
  for (int v = 0; v < topology.n_nodes; ++v) {
    view.blind_mask[v] = !is_privileged_slot(NodeIndex::from_flat(v).slot);
  }
  return view;
}

IncidenceStructure incidence(const HypergraphTopology& topology) {
  const auto n_edges = static_cast<Eigen::Index>(topology.edges.size());
  IncidenceStructure inc;
  inc.W = Vector::Zero(n_edges);
  inc.De = Vector::Zero(n_edges);
  inc.Dv = Vector::Zero(topology.n_nodes);

  std::vector<Eigen::Triplet<double>> triplets;
  for (const auto& e : topology.edges) {
    inc.W[e.id] = e.weight;
    inc.De[e.id] = static_cast<double>(e.members.size());
    for (int v : e.members) {
      triplets.emplace_back(v, e.id, 1.0);
      inc.Dv[v] += e.weight;
    }
  }
  inc.H.resize(topology.n_nodes, n_edges);
  inc.H.setFromTriplets(triplets.begin(), triplets.end());
  return inc;
}

Propagator::Propagator(const HypergraphTopology& topology) : Propagator(incidence(topology)) {}

Propagator::Propagator(const IncidenceStructure& inc) : h_(inc.H), ht_(inc.H.transpose()) {
  dv_inv_sqrt_ = Vector::Zero(inc.Dv.size());
  for (Eigen::Index v = 0; v < inc.Dv.size(); ++v) {
    if (inc.Dv[v] > 0) dv_inv_sqrt_[v] = 1.0 / std::sqrt(inc.Dv[v]);
  }
  edge_scale_ = Vector::Zero(inc.W.size());
  for (Eigen::Index e = 0; e < inc.W.size(); ++e) {
    if (inc.De[e] > 0) edge_scale_[e] = inc.W[e] / inc.De[e];
  }
}

Matrix Propagator::apply(const Matrix& x) const {
  if (x.rows() != dv_inv_sqrt_.size()) {
    throw std::invalid_argument("Propagator::apply: row count does not match node count");
  }
  Matrix scaled = dv_inv_sqrt_.asDiagonal() * x;
  Matrix per_edge = ht_ * scaled;
  per_edge = edge_scale_.asDiagonal() * per_edge;
  Matrix out = h_ * per_edge;
  return dv_inv_sqrt_.asDiagonal() * out;
}

Matrix Propagator::dense() const {
  return apply(Matrix::Identity(n_nodes(), n_nodes()));
}

void write_topology_csv(const HypergraphTopology& topology, std::ostream& out) {
  out << "edge_id,kind,weight,member_flat_indices\n";
  for (const auto& e : topology.edges) {
    out << e.id << ',' << to_string(e.kind) << ',' << e.weight << ',';
    for (std::size_t m = 0; m < e.members.size(); ++m) {
      if (m) out << ';';
      out << e.members[m];
    }
    out << '\n';
  }
}

}  // namespace hyperpriv
