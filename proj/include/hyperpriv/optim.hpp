#pragma once

#include "hyperpriv/common.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace hyperpriv {

enum class OptimizerKind { Adam, SgdMomentum };

std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;  // also the momentum coefficient for SGD
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment state for a fixed list of parameter tensors.
class Optimizer {
 public:
  Optimizer() = default;
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  void step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads);

  long steps() const { return t_; }
  const OptimizerConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  void set_config(const OptimizerConfig& config) { config_ = config; }

  nlohmann::json state_to_json() const;
  void state_from_json(const nlohmann::json& j);

  bool operator==(const Optimizer& o) const {
    return t_ == o.t_ && m_ == o.m_ && v_ == o.v_;
  }

 private:
  OptimizerConfig config_;
  long t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j, const std::string& name);

}  // namespace hyperpriv
