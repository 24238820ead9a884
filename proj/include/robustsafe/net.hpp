#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace robustsafe::net {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Rng = std::mt19937_64;

/// Raised when a forward or backward pass produces NaN/inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Intermediate activations of one batched forward pass; activations[0] is
/// the input, activations[l + 1] the output of layer l.
struct MlpTape {
  std::vector<Matrix> activations;
};

/// Fully connected network, tanh on hidden layers, linear output. Samples
/// are columns. All parameters live in one flat vector (per layer: weight
/// column-major, then bias) so optimizers and target blending work on it
/// directly.
class Mlp {
 public:
  Mlp() = default;
  /// Weights and biases uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  Mlp(std::vector<std::size_t> sizes, Rng& rng);
  /// Zero-initialized.
  explicit Mlp(std::vector<std::size_t> sizes);

  const std::vector<std::size_t>& sizes() const { return sizes_; }
  std::size_t input_dim() const { return sizes_.front(); }
  std::size_t output_dim() const { return sizes_.back(); }
  std::size_t num_layers() const { return sizes_.size() - 1; }
  std::size_t num_params() const { return static_cast<std::size_t>(params_.size()); }

  Vector& params() { return params_; }
  const Vector& params() const { return params_; }

  Eigen::Map<const Matrix> weight(std::size_t layer) const;
  Eigen::Map<Matrix> weight(std::size_t layer);
  Eigen::Map<const Vector> bias(std::size_t layer) const;
  Eigen::Map<Vector> bias(std::size_t layer);

  Matrix forward(const Matrix& input) const;
  Matrix forward(const Matrix& input, MlpTape& tape) const;

  /// Reverse pass for upstream gradient dL/d(output). Adds dL/d(params) into
  /// `grad` when non-null and returns dL/d(input).
  Matrix backward(const MlpTape& tape, const Matrix& grad_output, Vector* grad) const;

  bool same_shape(const Mlp& other) const { return sizes_ == other.sizes_; }

 private:
  void layout();

  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> offsets_;
  Vector params_;
};

/// Elementwise tanh evaluated as 1 - 2 / (exp(2x) + 1), which vectorizes.
Matrix tanh(const Matrix& z);

/// Deterministic policy a = center + half_range * tanh(net(x)).
class DeterministicPolicy {
 public:
  DeterministicPolicy() = default;
  DeterministicPolicy(Mlp net, const std::vector<double>& low, const std::vector<double>& high);

  struct Tape {
    MlpTape net;
    Matrix squashed;
  };

  Matrix act(const Matrix& state) const;
  Matrix act(const Matrix& state, Tape& tape) const;
  /// Adds dL/d(params) for upstream dL/d(action); returns dL/d(state).
  Matrix backward(const Tape& tape, const Matrix& grad_action, Vector* grad) const;

  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }
  const Vector& center() const { return center_; }
  const Vector& half_range() const { return half_; }

 private:
  Mlp net_;
  Vector center_, half_;
};

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;

/// Tanh-squashed Gaussian policy. The net emits [mean; log_std] per action
/// dimension; log_std is clamped to [kLogStdMin, kLogStdMax].
class GaussianPolicy {
 public:
  GaussianPolicy() = default;
  GaussianPolicy(Mlp net, const std::vector<double>& low, const std::vector<double>& high);

  struct Tape {
    MlpTape net;
    Matrix log_std;   // clamped
    Matrix noise;     // standard normal draws
    Matrix squashed;  // tanh(mean + std * noise)
    Matrix pre;       // mean + std * noise
  };

  struct Sample {
    Matrix action;
    RowVector log_prob;
  };

  /// Reparameterized sample with fresh noise from `rng`.
  Sample sample(const Matrix& state, Rng& rng, Tape* tape = nullptr) const;
  /// Reparameterized sample with caller-provided standard normal noise.
  Sample sample_with_noise(const Matrix& state, const Matrix& noise, Tape* tape = nullptr) const;
  /// center + half_range * tanh(mean).
  Matrix mean_action(const Matrix& state) const;

  /// Adds dL/d(params) given dL/d(action) and dL/d(log_prob) per sample.
  void backward(const Tape& tape, const Matrix& grad_action, const RowVector& grad_log_prob,
                Vector* grad) const;

  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }
  std::size_t action_dim() const { return static_cast<std::size_t>(center_.size()); }
  const Vector& center() const { return center_; }
  const Vector& half_range() const { return half_; }

 private:
  Mlp net_;
  Vector center_, half_;
};

/// Bias-corrected adaptive-moment optimizer over a flat parameter vector.
class Adam {
 public:
  Adam() = default;
  Adam(std::size_t num_params, double learning_rate);

  void step(Vector& params, const Vector& grad);

  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  const Vector& first_moment() const { return m_; }
  const Vector& second_moment() const { return v_; }
  std::int64_t steps() const { return t_; }

  void write(std::ostream& out) const;
  static Adam read(std::istream& in);

 private:
  Vector m_, v_;
  std::int64_t t_ = 0;
};

/// target <- tau * live + (1 - tau) * target.
void soft_update(Mlp& target, const Mlp& live, double tau);

/// Versioned text format: a `mlp` header line with the layer sizes, then per
/// layer the weight matrix row by row and the bias, printed with 17
/// significant digits.
void write_mlp(std::ostream& out, const Mlp& net);
Mlp read_mlp(std::istream& in);

}  // namespace robustsafe::net
