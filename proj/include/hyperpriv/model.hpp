#pragma once

#include "hyperpriv/autodiff.hpp"
#include "hyperpriv/cohort.hpp"
#include "hyperpriv/common.hpp"
#include "hyperpriv/hypergraph.hpp"
#include "hyperpriv/losses.hpp"

#include <json.hpp>

#include <array>
#include <string>
#include <utility>
#include <vector>

namespace hyperpriv {

inline constexpr int kSlots = 8;
inline constexpr int kModalities = 4;  // MRI (slots 0-4), clinical, text, concept

inline int modality_of_slot(int slot) { return slot < 5 ? 0 : slot - 4; }

struct ModelDims {
  std::array<int, kSlots> slot_dims{};  // input width of each slot's raw features
  int d_in = 64;
  int d_hidden = 64;
  int d_att = 32;
  int d_out = 32;
  int n_layers = 2;

  bool operator==(const ModelDims&) const = default;
};

nlohmann::json to_json(const ModelDims& dims);
ModelDims model_dims_from_json(const nlohmann::json& j);

// Per-slot feature matrices, one row per patient. MRI slots take the refined
// embeddings when present.
struct SlotFeatures {
  std::array<Matrix, kSlots> slots;

  int n_patients() const { return static_cast<int>(slots[0].rows()); }
  std::array<int, kSlots> dims() const;
};

SlotFeatures assemble_features(const Cohort& cohort);

// Shapes are stored for right multiplication (rows x W).
struct ModelParams {
  ModelDims dims;
  // One adapter per modality; the five MRI views share theirs.
  std::array<Matrix, kModalities> adapter_w;  // modality_dim x d_in
  std::array<Matrix, kModalities> adapter_b;  // 1 x d_in
  std::vector<Matrix> theta;             // d_in x d_hidden, then d_hidden x d_hidden
  Matrix w_sharp;                        // d_hidden x d_out
  Matrix w_smooth;                       // d_hidden x d_out
  Matrix att_w;                          // d_att x 1
  Matrix att_v;                          // d_out x d_att
  Matrix att_u;                          // d_out x d_att
  Matrix head_group;                     // d_out x 2
  Matrix bias_group;                     // 1 x 2
  Matrix head_grade;                     // d_out x 2
  Matrix bias_grade;                     // 1 x 2
  Matrix head_location;                  // d_out x 3
  Matrix bias_location;                  // 1 x 3
  Matrix head_pfs;                       // d_out x 1, no bias
  Matrix head_os;                        // d_out x 1, no bias

  static ModelParams init(const ModelDims& dims, Rng& rng);

  // Stable name -> tensor listing; the order is the optimizer's order.
  std::vector<std::pair<std::string, Matrix*>> named();
  std::vector<std::pair<std::string, const Matrix*>> named() const;
  std::vector<Matrix*> tensors();
  long parameter_count() const;

  nlohmann::json to_json() const;
  static ModelParams from_json(const nlohmann::json& j);
  bool operator==(const ModelParams&) const = default;
};

long parameter_count(const ModelDims& dims);

void save_params(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_params(const std::filesystem::path& path);

// The graph a pass runs on. `active` marks nodes whose features are kept and
// which take part in attention pooling.
struct PassGraph {
  Propagator propagator;
  std::vector<bool> active;  // size 8N
  bool propagate = true;     // false: per-node map, no message passing
};

PassGraph teacher_graph(const HypergraphTopology& topology, bool propagate = true);
PassGraph student_graph(const SeveredView& view, bool propagate = true);

struct ForwardOutput {
  Matrix node_embeddings;  // 8N x d_hidden
  Matrix alpha;            // N x 8; zero on inactive nodes
  Matrix h_diag;           // N x d_out
  Matrix h_surv;           // N x d_out
  TaskValues task;         // z_sharp = h_diag, z_smooth = h_surv

  bool operator==(const ForwardOutput& o) const;
};

struct TapeForward {
  TaskOutputs task;
  ad::Var nodes;  // 8N x d_hidden
  ad::Var alpha;  // 8N x 1
};

// Parameters as tape variables, in ModelParams::named() order.
struct ParamVars {
  std::vector<ad::Var> vars;
  static ParamVars on(ad::Tape& tape, const ModelParams& params, bool requires_grad);
};

TapeForward forward_tape(ad::Tape& tape, const ParamVars& pv, const ModelDims& dims,
                         const SlotFeatures& features, const PassGraph& graph);

ForwardOutput forward(const SlotFeatures& features, const PassGraph& graph,
                      const ModelParams& params);

// One propagation layer on its own: phi(P X theta), identity phi when last.
Matrix hgnn_layer(const Matrix& x, const IncidenceStructure& inc, const Matrix& theta, bool last);

struct AttentionResult {
  Vector alpha;
  Vector pooled;
};

// Gated attention over the rows of `nodes` (one row per active node).
AttentionResult gated_attention(const Matrix& nodes, const Matrix& att_w, const Matrix& att_v,
                                const Matrix& att_u);

}  // namespace hyperpriv
