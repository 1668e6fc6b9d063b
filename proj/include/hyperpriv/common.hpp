#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace hyperpriv {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Invalid configuration or malformed input. CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Parse failure while reading a file; the message names the offending field.
class ParseError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Non-finite values or an undefined numerical quantity. CLI exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Seeded random source. All randomness in the project flows from a root seed
// through derive(), which mixes a stream label into the seed so that
// independent consumers can be reseeded reproducibly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(mix(seed)) {}

  std::uint64_t seed() const { return seed_; }

  Rng derive(std::string_view label) const;
  Rng derive(std::uint64_t index) const;

  double uniform();  // [0, 1)
  double uniform_open();  // (0, 1)
  double normal(double mean = 0.0, double sd = 1.0);
  bool bernoulli(double p) { return uniform() < p; }
  std::uint64_t below(std::uint64_t n);  // uniform integer in [0, n)

  std::mt19937_64& engine() { return engine_; }

  static std::uint64_t mix(std::uint64_t x);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

bool all_finite(const Matrix& m);

}  // namespace hyperpriv
