#pragma once

#include "hyperpriv/cohort.hpp"
#include "hyperpriv/common.hpp"

#include <Eigen/SparseCore>

#include <iosfwd>
#include <string>
#include <vector>

namespace hyperpriv {

// Node slots per patient: five MRI views, clinical, dense text, concept flags.
inline constexpr int kSlotsPerPatient = 8;
inline constexpr int kClinicalSlot = 5;
inline constexpr int kTextSlot = 6;
inline constexpr int kConceptSlot = 7;

inline bool is_privileged_slot(int slot) { return slot == kTextSlot || slot == kConceptSlot; }

struct NodeIndex {
  int patient_id = 0;
  int slot = 0;

  int flat() const { return patient_id * kSlotsPerPatient + slot; }
  static NodeIndex from_flat(int flat) {
    return {flat / kSlotsPerPatient, flat % kSlotsPerPatient};
  }
  bool operator==(const NodeIndex&) const = default;
};

enum class EdgeKind { Intra, VisualKNN, ClinicalKNN, TextKNN, Concept };

std::string to_string(EdgeKind kind);
inline bool is_privileged(EdgeKind kind) {
  return kind == EdgeKind::TextKNN || kind == EdgeKind::Concept;
}

struct Hyperedge {
  int id = 0;
  EdgeKind kind = EdgeKind::Intra;
  std::vector<int> members;  // sorted, unique flat node indices
  double weight = 1.0;

  bool operator==(const Hyperedge&) const = default;
};

struct HypergraphTopology {
  int n_nodes = 0;
  std::vector<Hyperedge> edges;

  int n_patients() const { return n_nodes / kSlotsPerPatient; }
  void validate() const;  // throws std::invalid_argument
  bool operator==(const HypergraphTopology&) const = default;
};

struct IncidenceStructure {
  Eigen::SparseMatrix<double> H;  // n_nodes x n_edges, binary
  Vector W;  // edge weights
  Vector Dv;  // node degree: sum_e W[e] * H[v, e]
  Vector De;  // edge cardinality
};

struct SeveredView {
  HypergraphTopology topology;
  std::vector<bool> blind_mask;  // false on text and concept slots
};

std::vector<Hyperedge> build_intra_edges(int n_patients);
std::vector<Hyperedge> build_intra_edges(const Cohort& cohort);

// One edge per anchor patient: the anchor plus its k cosine-nearest patients
// (ties broken by lower patient id), restricted to the node slots owned by
// `kind`. Throws std::invalid_argument on a zero-norm feature vector.
std::vector<Hyperedge> build_knn_edges(const std::vector<Vector>& features, int k, EdgeKind kind);

// One edge per concept over the concept-slot nodes of every patient carrying
// it; concepts held by fewer than two patients produce no edge.
std::vector<Hyperedge> build_concept_edges(const Cohort& cohort);

// Per-patient mean MRI embedding (refined views when present, raw otherwise).
std::vector<Vector> visual_features(const Cohort& cohort);

HypergraphTopology assemble_teacher(const Cohort& cohort, int k);

SeveredView sever(const HypergraphTopology& topology);

IncidenceStructure incidence(const HypergraphTopology& topology);

// X -> Dv^-1/2 H W De^-1 H^T Dv^-1/2 X with isolated nodes mapped to zero.
// The operator is symmetric, so it is its own adjoint.
class Propagator {
 public:
  Propagator() = default;
  explicit Propagator(const HypergraphTopology& topology);
  explicit Propagator(const IncidenceStructure& inc);

  Matrix apply(const Matrix& x) const;
  int n_nodes() const { return static_cast<int>(dv_inv_sqrt_.size()); }
  Matrix dense() const;

 private:
  Eigen::SparseMatrix<double> h_;
  Eigen::SparseMatrix<double> ht_;
  Vector dv_inv_sqrt_;
  Vector edge_scale_;  // W / De
};

void write_topology_csv(const HypergraphTopology& topology, std::ostream& out);

}  // namespace hyperpriv
