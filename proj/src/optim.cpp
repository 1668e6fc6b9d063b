#include "hyperpriv/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace hyperpriv {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd_momentum"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd_momentum") return OptimizerKind::SgdMomentum;
  throw ConfigError("invalid config field 'optimizer': " + s);
}

void Optimizer::step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("Optimizer::step: size mismatch");
  if (m_.empty()) {
    for (const Matrix* p : params) {
      m_.push_back(Matrix::Zero(p->rows(), p->cols()));
      v_.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  if (m_.size() != params.size()) throw std::invalid_argument("Optimizer::step: parameter list changed");
  ++t_;
  const double lr = config_.lr;
  if (config_.kind == OptimizerKind::SgdMomentum) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      m_[k] = config_.beta1 * m_[k] + grads[k];
      *params[k] -= lr * m_[k];
    }
    return;
  }
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    m_[k] = b1 * m_[k] + (1.0 - b1) * grads[k];
    v_[k] = b2 * v_[k] + (1.0 - b2) * grads[k].cwiseAbs2();
    const auto m_hat = m_[k].array() / c1;
    const auto v_hat = v_[k].array() / c2;
    params[k]->array() -= lr * m_hat / (v_hat.sqrt() + config_.eps);
  }
}

nlohmann::json matrix_to_json(const Matrix& m) {
  std::vector<double> data(m.data(), m.data() + m.size());  // column-major
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

Matrix matrix_from_json(const nlohmann::json& j, const std::string& name) {
  try {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto data = j.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != rows * cols) {
      throw ParseError(name + ": data length does not match rows*cols");
    }
    return Eigen::Map<const Matrix>(data.data(), rows, cols);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(name + ": malformed matrix (" + std::string(e.what()) + ")");
  }
}

nlohmann::json Optimizer::state_to_json() const {
  nlohmann::json m = nlohmann::json::array();
  nlohmann::json v = nlohmann::json::array();
  for (const auto& x : m_) m.push_back(matrix_to_json(x));
  for (const auto& x : v_) v.push_back(matrix_to_json(x));
  return {{"kind", to_string(config_.kind)}, {"steps", t_}, {"m", m}, {"v", v}};
}

void Optimizer::state_from_json(const nlohmann::json& j) {
  t_ = j.at("steps").get<long>();
  m_.clear();
  v_.clear();
  for (const auto& x : j.at("m")) m_.push_back(matrix_from_json(x, "optimizer.m"));
  for (const auto& x : j.at("v")) v_.push_back(matrix_from_json(x, "optimizer.v"));
}

}  // namespace hyperpriv
