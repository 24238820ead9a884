#include "support/gradient_check.hpp"

#include <algorithm>
#include <cmath>

namespace testing_support {

Eigen::VectorXd numerical_gradient(const std::function<double()>& f, Eigen::VectorXd& params, double step) {
  Eigen::VectorXd grad(params.size());
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + step;
    const double up = f();
    params[i] = saved - step;
    const double down = f();
    params[i] = saved;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double floor) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double denom = std::max(std::abs(a[i]) + std::abs(b[i]), floor);
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

robustsafe::runtime::Batch random_batch(std::size_t n, std::size_t sx, std::size_t su, std::size_t sa,
                                        std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale), unit(-1.0, 1.0);
  auto fill = [&](Eigen::MatrixXd& m, std::size_t rows) {
    m.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n));
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
  };
  robustsafe::runtime::Batch b;
  fill(b.x, sx);
  fill(b.u, su);
  fill(b.a, sa);
  fill(b.x_next, sx);
  b.r.resize(static_cast<Eigen::Index>(n));
  b.h.resize(static_cast<Eigen::Index>(n));
  for (std::size_t j = 0; j < n; ++j) {
    b.r[static_cast<Eigen::Index>(j)] = unit(rng);
    b.h[static_cast<Eigen::Index>(j)] = unit(rng);
  }
  b.done.assign(n, 0);
  return b;
}

}  // namespace testing_support
