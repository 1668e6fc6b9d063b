#include "hyperpriv/model.hpp"

#include "hyperpriv/optim.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace hyperpriv {
namespace {

constexpr int kFormatVersion = 1;

Matrix glorot(int rows, int cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / std::max(1, rows + cols));
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = (2.0 * rng.uniform() - 1.0) * limit;
  }
  return m;
}

Matrix rows_to_matrix(const std::vector<std::vector<double>>& rows, int width) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), width);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (static_cast<int>(rows[r].size()) != width) {
      throw ConfigError("patient " + std::to_string(r) + ": feature width mismatch");
    }
    for (int k = 0; k < width; ++k) m(static_cast<Eigen::Index>(r), k) = rows[r][k];
  }
  return m;
}

// Offsets of each tensor group inside ModelParams::named().
struct Layout {
  int adapter_w = 0;
  int adapter_b = kModalities;
  int theta = 2 * kModalities;
  int after_theta;
  explicit Layout(int n_layers) : after_theta(2 * kModalities + n_layers) {}
  int w_sharp() const { return after_theta; }
  int w_smooth() const { return after_theta + 1; }
  int att_w() const { return after_theta + 2; }
  int att_v() const { return after_theta + 3; }
  int att_u() const { return after_theta + 4; }
  int head_group() const { return after_theta + 5; }
  int bias_group() const { return after_theta + 6; }
  int head_grade() const { return after_theta + 7; }
  int bias_grade() const { return after_theta + 8; }
  int head_location() const { return after_theta + 9; }
  int bias_location() const { return after_theta + 10; }
  int head_pfs() const { return after_theta + 11; }
  int head_os() const { return after_theta + 12; }
  int total() const { return after_theta + 13; }
};

template <class Self, class Ptr>
std::vector<std::pair<std::string, Ptr>> named_impl(Self& p) {
  std::vector<std::pair<std::string, Ptr>> out;
  static constexpr const char* kNames[kModalities] = {"mri", "clinical", "text", "concept"};
  for (int m = 0; m < kModalities; ++m) out.emplace_back(std::string("adapter_w_") + kNames[m], &p.adapter_w[m]);
  for (int m = 0; m < kModalities; ++m) out.emplace_back(std::string("adapter_b_") + kNames[m], &p.adapter_b[m]);
  for (std::size_t l = 0; l < p.theta.size(); ++l) out.emplace_back("theta" + std::to_string(l), &p.theta[l]);
  out.emplace_back("w_sharp", &p.w_sharp);
  out.emplace_back("w_smooth", &p.w_smooth);
  out.emplace_back("att_w", &p.att_w);
  out.emplace_back("att_v", &p.att_v);
  out.emplace_back("att_u", &p.att_u);
  out.emplace_back("head_group", &p.head_group);
  out.emplace_back("bias_group", &p.bias_group);
  out.emplace_back("head_grade", &p.head_grade);
  out.emplace_back("bias_grade", &p.bias_grade);
  out.emplace_back("head_location", &p.head_location);
  out.emplace_back("bias_location", &p.bias_location);
  out.emplace_back("head_pfs", &p.head_pfs);
  out.emplace_back("head_os", &p.head_os);
  return out;
}

// Expected shape of every tensor, in named() order.
std::vector<std::pair<int, int>> expected_shapes(const ModelDims& d) {
  std::vector<std::pair<int, int>> s;
  for (int m = 0; m < kModalities; ++m) s.emplace_back(d.slot_dims[m == 0 ? 0 : m + 4], d.d_in);
  for (int m = 0; m < kModalities; ++m) s.emplace_back(1, d.d_in);
  for (int l = 0; l < d.n_layers; ++l) s.emplace_back(l == 0 ? d.d_in : d.d_hidden, d.d_hidden);
  s.emplace_back(d.d_hidden, d.d_out);
  s.emplace_back(d.d_hidden, d.d_out);
  s.emplace_back(d.d_att, 1);
  s.emplace_back(d.d_out, d.d_att);
  s.emplace_back(d.d_out, d.d_att);
  s.emplace_back(d.d_out, 2);
  s.emplace_back(1, 2);
  s.emplace_back(d.d_out, 2);
  s.emplace_back(1, 2);
  s.emplace_back(d.d_out, 3);
  s.emplace_back(1, 3);
  s.emplace_back(d.d_out, 1);
  s.emplace_back(d.d_out, 1);
  return s;
}

void validate(const ModelDims& d) {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string("invalid config field '") + name + "': must be >= 1");
  };
  positive(d.d_in, "d_in");
  positive(d.d_hidden, "d_hidden");
  positive(d.d_att, "d_att");
  positive(d.d_out, "d_out");
  positive(d.n_layers, "n_layers");
  for (int s = 0; s < kSlots; ++s) {
    if (d.slot_dims[s] < 0) throw ConfigError("invalid model dims: negative slot width");
    if (s < kMriViews && d.slot_dims[s] != d.slot_dims[0]) {
      throw ConfigError("invalid model dims: MRI slots must share one width");
    }
  }
}

}  // namespace

nlohmann::json to_json(const ModelDims& d) {
  return {{"slot_dims", d.slot_dims}, {"d_in", d.d_in},   {"d_hidden", d.d_hidden},
          {"d_att", d.d_att},         {"d_out", d.d_out}, {"n_layers", d.n_layers}};
}

ModelDims model_dims_from_json(const nlohmann::json& j) {
  try {
    ModelDims d;
    d.slot_dims = j.at("slot_dims").get<std::array<int, kSlots>>();
    d.d_in = j.at("d_in").get<int>();
    d.d_hidden = j.at("d_hidden").get<int>();
    d.d_att = j.at("d_att").get<int>();
    d.d_out = j.at("d_out").get<int>();
    d.n_layers = j.at("n_layers").get<int>();
    validate(d);
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("dims: ") + e.what());
  }
}

std::array<int, kSlots> SlotFeatures::dims() const {
  std::array<int, kSlots> d{};
  for (int s = 0; s < kSlots; ++s) d[s] = static_cast<int>(slots[s].cols());
  return d;
}

SlotFeatures assemble_features(const Cohort& cohort) {
  if (cohort.patients.empty()) throw ConfigError("cohort empty");
  const auto& first = cohort.patients.front();
  const bool refined = !first.mri_refined.empty();
  const int d_mri = static_cast<int>(refined ? first.mri_refined.front().size()
                                             : first.mri_views.front().size());
  SlotFeatures f;
  for (int v = 0; v < kMriViews; ++v) {
    std::vector<std::vector<double>> rows;
    for (const auto& p : cohort.patients) {
      const auto& views = refined ? p.mri_refined : p.mri_views;
      if (static_cast<int>(views.size()) != kMriViews) throw ConfigError("mri_views length != 5");
      rows.push_back(views[v]);
    }
    f.slots[v] = rows_to_matrix(rows, d_mri);
  }
  std::vector<std::vector<double>> clinical, text, concept_rows;
  for (const auto& p : cohort.patients) {
    clinical.push_back(p.clinical_vec);
    text.push_back(p.text_dense);
    concept_rows.emplace_back(p.concept_flags.begin(), p.concept_flags.end());
  }
  f.slots[kClinicalSlot] = rows_to_matrix(clinical, static_cast<int>(first.clinical_vec.size()));
  f.slots[kTextSlot] = rows_to_matrix(text, static_cast<int>(first.text_dense.size()));
  f.slots[kConceptSlot] = rows_to_matrix(concept_rows, static_cast<int>(first.concept_flags.size()));
  return f;
}

ModelParams ModelParams::init(const ModelDims& dims, Rng& rng) {
  validate(dims);
  ModelParams p;
  p.dims = dims;
  for (int m = 0; m < kModalities; ++m) {
    p.adapter_w[m] = glorot(dims.slot_dims[m == 0 ? 0 : m + 4], dims.d_in, rng);
    p.adapter_b[m] = Matrix::Zero(1, dims.d_in);
  }
  for (int l = 0; l < dims.n_layers; ++l) {
    p.theta.push_back(glorot(l == 0 ? dims.d_in : dims.d_hidden, dims.d_hidden, rng));
  }
  p.w_sharp = glorot(dims.d_hidden, dims.d_out, rng);
  p.w_smooth = glorot(dims.d_hidden, dims.d_out, rng);
  p.att_w = glorot(dims.d_att, 1, rng);
  p.att_v = glorot(dims.d_out, dims.d_att, rng);
  p.att_u = glorot(dims.d_out, dims.d_att, rng);
  p.head_group = glorot(dims.d_out, 2, rng);
  p.bias_group = Matrix::Zero(1, 2);
  p.head_grade = glorot(dims.d_out, 2, rng);
  p.bias_grade = Matrix::Zero(1, 2);
  p.head_location = glorot(dims.d_out, 3, rng);
  p.bias_location = Matrix::Zero(1, 3);
  p.head_pfs = glorot(dims.d_out, 1, rng);
  p.head_os = glorot(dims.d_out, 1, rng);
  return p;
}

std::vector<std::pair<std::string, Matrix*>> ModelParams::named() {
  return named_impl<ModelParams, Matrix*>(*this);
}

std::vector<std::pair<std::string, const Matrix*>> ModelParams::named() const {
  return named_impl<const ModelParams, const Matrix*>(*this);
}

std::vector<Matrix*> ModelParams::tensors() {
  std::vector<Matrix*> out;
  for (auto& [name, m] : named()) out.push_back(m);
  return out;
}

long ModelParams::parameter_count() const {
  long n = 0;
  for (const auto& [name, m] : named()) n += static_cast<long>(m->size());
  return n;
}

long parameter_count(const ModelDims& dims) {
  long n = 0;
  for (const auto& [r, c] : expected_shapes(dims)) n += static_cast<long>(r) * c;
  return n;
}

nlohmann::json ModelParams::to_json() const {
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, m] : named()) tensors[name] = matrix_to_json(*m);
  return {{"format", "hyperpriv-params"}, {"version", kFormatVersion},
          {"dims", hyperpriv::to_json(dims)}, {"tensors", tensors}};
}

ModelParams ModelParams::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("dims") || !j.contains("tensors")) {
    throw ParseError("checkpoint: missing 'dims' or 'tensors'");
  }
  if (j.value("version", 0) != kFormatVersion) throw ParseError("checkpoint: unsupported version");
  ModelParams p;
  p.dims = model_dims_from_json(j.at("dims"));
  p.theta.resize(p.dims.n_layers);
  const auto shapes = expected_shapes(p.dims);
  auto slots = p.named();
  const auto& tensors = j.at("tensors");
  for (std::size_t k = 0; k < slots.size(); ++k) {
    const auto& [name, m] = slots[k];
    if (!tensors.contains(name)) throw ParseError("checkpoint: missing tensor '" + name + "'");
    *m = matrix_from_json(tensors.at(name), name);
    if (m->rows() != shapes[k].first || m->cols() != shapes[k].second) {
      std::ostringstream msg;
      msg << "checkpoint: tensor '" << name << "' has shape " << m->rows() << "x" << m->cols()
          << ", dims header requires " << shapes[k].first << "x" << shapes[k].second;
      throw ParseError(msg.str());
    }
  }
  return p;
}

void save_params(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << params.to_json().dump();
}

ModelParams load_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return ModelParams::from_json(j);
}

PassGraph teacher_graph(const HypergraphTopology& topology, bool propagate) {
  PassGraph g;
  g.propagator = Propagator(topology);
  g.active.assign(topology.n_nodes, true);
  g.propagate = propagate;
  return g;
}

PassGraph student_graph(const SeveredView& view, bool propagate) {
  PassGraph g;
  g.propagator = Propagator(view.topology);
  g.active = view.blind_mask;
  g.propagate = propagate;
  return g;
}

bool ForwardOutput::operator==(const ForwardOutput& o) const {
  return node_embeddings == o.node_embeddings && alpha == o.alpha && h_diag == o.h_diag &&
         h_surv == o.h_surv && task.logits_group == o.task.logits_group &&
         task.logits_grade == o.task.logits_grade &&
         task.logits_location == o.task.logits_location && task.risk_pfs == o.task.risk_pfs &&
         task.risk_os == o.task.risk_os;
}

ParamVars ParamVars::on(ad::Tape& tape, const ModelParams& params, bool requires_grad) {
  ParamVars pv;
  for (const auto& [name, m] : params.named()) {
    pv.vars.push_back(requires_grad ? tape.variable(*m) : tape.constant(*m));
  }
  return pv;
}

TapeForward forward_tape(ad::Tape& tape, const ParamVars& pv, const ModelDims& dims,
                         const SlotFeatures& features, const PassGraph& graph) {
  const Layout at(dims.n_layers);
  if (static_cast<int>(pv.vars.size()) != at.total()) {
    throw std::invalid_argument("forward: parameter list does not match dims");
  }
  const int n = features.n_patients();
  const int n_nodes = n * kSlots;
  if (static_cast<int>(graph.active.size()) != n_nodes ||
      (graph.propagate && graph.propagator.n_nodes() != n_nodes)) {
    throw ConfigError("forward: topology has " + std::to_string(graph.propagator.n_nodes()) +
                      " nodes but features describe " + std::to_string(n_nodes));
  }
  for (int s = 0; s < kSlots; ++s) {
    if (features.slots[s].rows() != n || features.slots[s].cols() != dims.slot_dims[s]) {
      throw ConfigError("forward: slot " + std::to_string(s) + " features do not match dims");
    }
  }

  // Inactive rows are never read: each slot is scattered into the node
  // matrix only at active positions, and fully inactive slots are skipped.
  ad::Var x;
  for (int s = 0; s < kSlots; ++s) {
    std::vector<Eigen::Triplet<double>> entries;
    for (int p = 0; p < n; ++p) {
      if (graph.active[p * kSlots + s]) entries.emplace_back(p * kSlots + s, p, 1.0);
    }
    if (entries.empty()) continue;
    Eigen::SparseMatrix<double> scatter(n_nodes, n);
    scatter.setFromTriplets(entries.begin(), entries.end());
    Eigen::SparseMatrix<double> gather(n, n);
    std::vector<Eigen::Triplet<double>> keep;
    for (const auto& e : entries) keep.emplace_back(e.col(), e.col(), 1.0);
    gather.setFromTriplets(keep.begin(), keep.end());
    // Zero the inactive patients' raw rows before they touch any arithmetic.
    const Matrix raw = gather * features.slots[s];
    const int m = modality_of_slot(s);
    ad::Var h = ad::tanh(ad::add_row(ad::matmul(tape.constant(raw), pv.vars[at.adapter_w + m]),
                                     pv.vars[at.adapter_b + m]));
    ad::Var placed = ad::left_sparse(scatter, h);
    x = x.valid() ? ad::add(x, placed) : placed;
  }
  if (!x.valid()) throw std::invalid_argument("forward: no active nodes");

  for (int l = 0; l < dims.n_layers; ++l) {
    x = ad::matmul(x, pv.vars[at.theta + l]);
    if (graph.propagate) x = ad::propagate(graph.propagator, x);
    if (l + 1 < dims.n_layers) x = ad::relu(x);
  }

  const ad::Var z_sharp = ad::matmul(x, pv.vars[at.w_sharp()]);
  const ad::Var z_smooth = ad::matmul(x, pv.vars[at.w_smooth()]);

  Eigen::SparseMatrix<double> mri_mean(n, n_nodes);
  std::vector<Eigen::Triplet<double>> mean_entries;
  for (int p = 0; p < n; ++p) {
    for (int v = 0; v < kMriViews; ++v) mean_entries.emplace_back(p, p * kSlots + v, 1.0 / kMriViews);
  }
  mri_mean.setFromTriplets(mean_entries.begin(), mean_entries.end());
  const ad::Var h_diag = ad::left_sparse(mri_mean, z_sharp);

  std::vector<std::vector<int>> segments(n);
  for (int p = 0; p < n; ++p) {
    for (int s = 0; s < kSlots; ++s) {
      if (graph.active[p * kSlots + s]) segments[p].push_back(p * kSlots + s);
    }
    if (segments[p].empty()) {
      throw std::invalid_argument("forward: patient " + std::to_string(p) + " has no active nodes");
    }
  }
  const ad::Var gate = ad::hadamard(ad::tanh(ad::matmul(z_smooth, pv.vars[at.att_v()])),
                                    ad::sigmoid(ad::matmul(z_smooth, pv.vars[at.att_u()])));
  const ad::Var scores = ad::matmul(gate, pv.vars[at.att_w()]);
  const ad::Var alpha = ad::segment_softmax(scores, segments);
  const ad::Var h_surv = ad::segment_weighted_sum(alpha, z_smooth, segments);

  TapeForward out;
  out.nodes = x;
  out.alpha = alpha;
  out.task.z_sharp = h_diag;
  out.task.z_smooth = h_surv;
  out.task.logits_group =
      ad::add_row(ad::matmul(h_diag, pv.vars[at.head_group()]), pv.vars[at.bias_group()]);
  out.task.logits_grade =
      ad::add_row(ad::matmul(h_diag, pv.vars[at.head_grade()]), pv.vars[at.bias_grade()]);
  out.task.logits_location =
      ad::add_row(ad::matmul(h_diag, pv.vars[at.head_location()]), pv.vars[at.bias_location()]);
  out.task.risk_pfs = ad::matmul(h_surv, pv.vars[at.head_pfs()]);
  out.task.risk_os = ad::matmul(h_surv, pv.vars[at.head_os()]);
  return out;
}

ForwardOutput forward(const SlotFeatures& features, const PassGraph& graph,
                      const ModelParams& params) {
  ad::Tape tape;
  const ParamVars pv = ParamVars::on(tape, params, false);
  const TapeForward f = forward_tape(tape, pv, params.dims, features, graph);
  const int n = features.n_patients();
  ForwardOutput out;
  out.node_embeddings = f.nodes.value();
  out.alpha = Matrix::Zero(n, kSlots);
  for (int p = 0; p < n; ++p) {
    for (int s = 0; s < kSlots; ++s) out.alpha(p, s) = f.alpha.value()(p * kSlots + s, 0);
  }
  out.h_diag = f.task.z_sharp.value();
  out.h_surv = f.task.z_smooth.value();
  out.task = TaskValues{f.task.z_sharp.value(),      f.task.z_smooth.value(),
                        f.task.logits_group.value(), f.task.logits_grade.value(),
                        f.task.logits_location.value(), f.task.risk_pfs.value(),
                        f.task.risk_os.value()};
  return out;
}

Matrix hgnn_layer(const Matrix& x, const IncidenceStructure& inc, const Matrix& theta, bool last) {
  if (!all_finite(x)) throw NumericalError("hgnn_layer: non-finite input features");
  if (x.cols() != theta.rows()) throw std::invalid_argument("hgnn_layer: theta shape mismatch");
  const Propagator p(inc);
  if (p.n_nodes() != x.rows()) throw ConfigError("hgnn_layer: feature rows != topology nodes");
  Matrix out = p.apply(x * theta);
  if (!last) out = out.cwiseMax(0.0);
  return out;
}

AttentionResult gated_attention(const Matrix& nodes, const Matrix& att_w, const Matrix& att_v,
                                const Matrix& att_u) {
  if (nodes.rows() == 0) throw std::invalid_argument("gated_attention: no active nodes to pool");
  const Matrix gate = (nodes * att_v).array().tanh().matrix().cwiseProduct(
      (1.0 / (1.0 + (-(nodes * att_u).array()).exp())).matrix());
  const Vector scores = gate * att_w;
  const double mx = scores.maxCoeff();
  Vector alpha = (scores.array() - mx).exp().matrix();
  alpha /= alpha.sum();
  AttentionResult r;
  r.alpha = alpha;
  r.pooled = nodes.transpose() * alpha;
  return r;
}

}  // namespace hyperpriv
