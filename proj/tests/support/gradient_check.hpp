#pragma once

#include <functional>
#include <random>

#include <Eigen/Dense>

#include "robustsafe/runtime.hpp"

namespace testing_support {

/// Central differences of `f` around `params` (restored afterwards).
Eigen::VectorXd numerical_gradient(const std::function<double()>& f, Eigen::VectorXd& params,
                                   double step = 1e-6);

/// max_i |a_i - b_i| / max(|a_i| + |b_i|, floor), the usual symmetric form.
double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double floor = 1e-8);

/// Batch of `n` random transitions with entries drawn uniformly from the
/// given box; h and r are uniform in [-1, 1].
robustsafe::runtime::Batch random_batch(std::size_t n, std::size_t sx, std::size_t su, std::size_t sa,
                                        std::mt19937_64& rng, double scale = 1.0);

}  // namespace testing_support
