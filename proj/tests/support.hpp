#pragma once
// Shared helpers for the test binaries.
#include "hyperpriv/cohort.hpp"
#include "hyperpriv/common.hpp"
#include "hyperpriv/train.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

namespace testing_support {

using hyperpriv::Matrix;

inline Matrix random_matrix(std::mt19937_64& gen, int rows, int cols, double sd = 1.0) {
  std::normal_distribution<double> nd(0.0, sd);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(gen);
  return m;
}

// Central differences, step h, over every entry of x.
inline Matrix numeric_gradient(const std::function<double(const Matrix&)>& f, Matrix x,
                               double h = 1e-4) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f(x);
    x.data()[i] = keep - h;
    const double down = f(x);
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2 * h);
  }
  return g;
}

// Relative error of two gradients, measured on the whole vector.
inline double relative_error(const Matrix& a, const Matrix& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-8});
  return (a - b).norm() / scale;
}

// Small cohort; widths shrink so exhaustive finite differences stay cheap.
inline hyperpriv::GenConfig micro_gen_config(int n, std::uint64_t seed) {
  hyperpriv::GenConfig g;
  g.n_patients = n;
  g.d_c = 8;
  g.d_m = 4;
  g.d_t = 4;
  g.k_knn = 2;
  g.seed = seed;
  g.censor_rate = 0.2;
  return g;
}

inline hyperpriv::TrainConfig micro_train_config() {
  hyperpriv::TrainConfig c;
  c.k_knn = 2;
  c.d_in = 5;
  c.d_hidden = 4;
  c.d_att = 3;
  c.d_out = 3;
  c.ssl_epochs = 5;
  c.ssl_d_h = 4;
  c.ssl_d_z = 3;
  c.ssl_batch_size = 8;
  c.epochs = 5;
  return c;
}

}  // namespace testing_support
