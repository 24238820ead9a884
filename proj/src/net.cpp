#include "robustsafe/net.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

namespace robustsafe::net {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;
constexpr double kLog2 = 0.69314718055994530942;

void require_finite(const Matrix& m, const char* stage, std::size_t layer) {
  if (!m.allFinite()) {
    throw NonFiniteError(std::string("non-finite ") + stage + " in layer " + std::to_string(layer));
  }
}

Vector to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// log(1 - tanh(x)^2), stable for large |x|.
double log_one_minus_tanh_sq(double x) {
  const double y = -2.0 * x;
  const double softplus = std::max(y, 0.0) + std::log1p(std::exp(-std::abs(y)));
  return 2.0 * (kLog2 - x - softplus);
}

}  // namespace

Matrix tanh(const Matrix& z) {
  return (1.0 - 2.0 / ((2.0 * z.array()).exp() + 1.0)).matrix();
}

// ---------------------------------------------------------------------------
// Mlp

Mlp::Mlp(std::vector<std::size_t> sizes) : sizes_(std::move(sizes)) { layout(); }

Mlp::Mlp(std::vector<std::size_t> sizes, Rng& rng) : sizes_(std::move(sizes)) {
  layout();
  for (std::size_t l = 0; l < num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(sizes_[l]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    auto w = weight(l);
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
    }
    auto b = bias(l);
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = dist(rng);
  }
}

void Mlp::layout() {
  if (sizes_.size() < 2) throw std::invalid_argument("an MLP needs at least an input and an output size");
  for (std::size_t s : sizes_) {
    if (s == 0) throw std::invalid_argument("layer sizes must be positive");
  }
  offsets_.clear();
  std::size_t total = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    offsets_.push_back(total);
    total += sizes_[l + 1] * sizes_[l] + sizes_[l + 1];
  }
  params_ = Vector::Zero(static_cast<Eigen::Index>(total));
}

Eigen::Map<const Matrix> Mlp::weight(std::size_t l) const {
  return {params_.data() + offsets_[l], static_cast<Eigen::Index>(sizes_[l + 1]),
          static_cast<Eigen::Index>(sizes_[l])};
}

Eigen::Map<Matrix> Mlp::weight(std::size_t l) {
  return {params_.data() + offsets_[l], static_cast<Eigen::Index>(sizes_[l + 1]),
          static_cast<Eigen::Index>(sizes_[l])};
}

Eigen::Map<const Vector> Mlp::bias(std::size_t l) const {
  return {params_.data() + offsets_[l] + sizes_[l + 1] * sizes_[l],
          static_cast<Eigen::Index>(sizes_[l + 1])};
}

Eigen::Map<Vector> Mlp::bias(std::size_t l) {
  return {params_.data() + offsets_[l] + sizes_[l + 1] * sizes_[l],
          static_cast<Eigen::Index>(sizes_[l + 1])};
}

Matrix Mlp::forward(const Matrix& input) const {
  MlpTape tape;
  return forward(input, tape);
}

Matrix Mlp::forward(const Matrix& input, MlpTape& tape) const {
  if (static_cast<std::size_t>(input.rows()) != input_dim()) {
    throw std::invalid_argument("MLP input has " + std::to_string(input.rows()) + " rows, expected " +
                                std::to_string(input_dim()));
  }
  tape.activations.resize(num_layers() + 1);
  tape.activations[0] = input;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    Matrix z = weight(l) * tape.activations[l];
    z.colwise() += bias(l);
    if (l + 1 < num_layers()) z = tanh(z);
    require_finite(z, "activation", l);
    tape.activations[l + 1] = std::move(z);
  }
  return tape.activations.back();
}

Matrix Mlp::backward(const MlpTape& tape, const Matrix& grad_output, Vector* grad) const {
  if (tape.activations.size() != num_layers() + 1) throw std::invalid_argument("tape does not match network");
  if (grad && static_cast<std::size_t>(grad->size()) != num_params()) {
    throw std::invalid_argument("gradient buffer has the wrong size");
  }
  Matrix g = grad_output;
  for (std::size_t l = num_layers(); l-- > 0;) {
    if (l + 1 < num_layers()) {
      const auto& a = tape.activations[l + 1].array();
      g = (g.array() * (1.0 - a * a)).matrix();
    }
    require_finite(g, "gradient", l);
    if (grad) {
      const auto rows = static_cast<Eigen::Index>(sizes_[l + 1]);
      const auto cols = static_cast<Eigen::Index>(sizes_[l]);
      Eigen::Map<Matrix> gw(grad->data() + offsets_[l], rows, cols);
      Eigen::Map<Vector> gb(grad->data() + offsets_[l] + sizes_[l + 1] * sizes_[l], rows);
      gw.noalias() += g * tape.activations[l].transpose();
      gb += g.rowwise().sum();
    }
    g = weight(l).transpose() * g;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Policies

DeterministicPolicy::DeterministicPolicy(Mlp net, const std::vector<double>& low,
                                         const std::vector<double>& high)
    : net_(std::move(net)) {
  if (low.size() != high.size() || low.size() != net_.output_dim()) {
    throw std::invalid_argument("policy bounds do not match the network output");
  }
  center_ = (to_vector(low) + to_vector(high)) / 2.0;
  half_ = (to_vector(high) - to_vector(low)) / 2.0;
}

Matrix DeterministicPolicy::act(const Matrix& state) const {
  Tape tape;
  return act(state, tape);
}

Matrix DeterministicPolicy::act(const Matrix& state, Tape& tape) const {
  tape.squashed = tanh(net_.forward(state, tape.net));
  Matrix action = (tape.squashed.array().colwise() * half_.array()).matrix();
  action.colwise() += center_;
  return action;
}

Matrix DeterministicPolicy::backward(const Tape& tape, const Matrix& grad_action, Vector* grad) const {
  const auto& t = tape.squashed.array();
  Matrix dz = ((grad_action.array().colwise() * half_.array()) * (1.0 - t * t)).matrix();
  return net_.backward(tape.net, dz, grad);
}

GaussianPolicy::GaussianPolicy(Mlp net, const std::vector<double>& low,
                               const std::vector<double>& high)
    : net_(std::move(net)) {
  if (low.size() != high.size() || 2 * low.size() != net_.output_dim()) {
    throw std::invalid_argument("Gaussian policy needs two outputs per action dimension");
  }
  center_ = (to_vector(low) + to_vector(high)) / 2.0;
  half_ = (to_vector(high) - to_vector(low)) / 2.0;
}

GaussianPolicy::Sample GaussianPolicy::sample(const Matrix& state, Rng& rng, Tape* tape) const {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix noise(static_cast<Eigen::Index>(action_dim()), state.cols());
  for (Eigen::Index j = 0; j < noise.cols(); ++j) {
    for (Eigen::Index i = 0; i < noise.rows(); ++i) noise(i, j) = normal(rng);
  }
  return sample_with_noise(state, noise, tape);
}

GaussianPolicy::Sample GaussianPolicy::sample_with_noise(const Matrix& state, const Matrix& noise,
                                                         Tape* tape) const {
  Tape local;
  Tape& t = tape ? *tape : local;
  const auto m = static_cast<Eigen::Index>(action_dim());
  if (noise.rows() != m || noise.cols() != state.cols()) throw std::invalid_argument("noise shape mismatch");
  const Matrix out = net_.forward(state, t.net);
  t.log_std = out.bottomRows(m).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  t.noise = noise;
  t.pre = out.topRows(m) + (t.log_std.array().exp() * noise.array()).matrix();
  t.squashed = tanh(t.pre);

  Sample s;
  s.action = (t.squashed.array().colwise() * half_.array()).matrix();
  s.action.colwise() += center_;
  s.log_prob = RowVector::Zero(state.cols());
  for (Eigen::Index j = 0; j < state.cols(); ++j) {
    double lp = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
      lp += -0.5 * noise(i, j) * noise(i, j) - t.log_std(i, j) - kHalfLog2Pi - std::log(half_[i]) -
            log_one_minus_tanh_sq(t.pre(i, j));
    }
    s.log_prob[j] = lp;
  }
  return s;
}

Matrix GaussianPolicy::mean_action(const Matrix& state) const {
  const Matrix out = net_.forward(state);
  Matrix action = (tanh(out.topRows(static_cast<Eigen::Index>(action_dim()))).array().colwise() *
                   half_.array()).matrix();
  action.colwise() += center_;
  return action;
}

void GaussianPolicy::backward(const Tape& tape, const Matrix& grad_action,
                              const RowVector& grad_log_prob, Vector* grad) const {
  const auto m = static_cast<Eigen::Index>(action_dim());
  const auto& y = tape.squashed.array();
  // d log_prob / d pre = 2 tanh(pre); d action / d pre = half (1 - tanh^2).
  Matrix dpre = ((grad_action.array().colwise() * half_.array()) * (1.0 - y * y)).matrix();
  dpre += ((2.0 * y).rowwise() * grad_log_prob.array()).matrix();

  const Matrix& raw = tape.net.activations.back();
  Matrix dout(2 * m, dpre.cols());
  dout.topRows(m) = dpre;
  Matrix dls = (dpre.array() * tape.log_std.array().exp() * tape.noise.array()).matrix();
  dls.rowwise() -= grad_log_prob;
  for (Eigen::Index j = 0; j < dls.cols(); ++j) {
    for (Eigen::Index i = 0; i < m; ++i) {
      const double r = raw(m + i, j);
      if (r < kLogStdMin || r > kLogStdMax) dls(i, j) = 0.0;
    }
  }
  dout.bottomRows(m) = dls;
  net_.backward(tape.net, dout, grad);
}

// ---------------------------------------------------------------------------
// Optimizer, target blending

Adam::Adam(std::size_t num_params, double lr)
    : learning_rate(lr),
      m_(Vector::Zero(static_cast<Eigen::Index>(num_params))),
      v_(Vector::Zero(static_cast<Eigen::Index>(num_params))) {}

void Adam::step(Vector& params, const Vector& grad) {
  if (params.size() != m_.size() || grad.size() != m_.size()) {
    throw std::invalid_argument("Adam state does not match parameter shape");
  }
  ++t_;
  m_ = beta1 * m_ + (1.0 - beta1) * grad;
  v_ = beta2 * v_ + (1.0 - beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  params.array() -= learning_rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + epsilon);
}

void Adam::write(std::ostream& out) const {
  const auto old = out.precision(17);
  out << "adam " << m_.size() << ' ' << t_ << ' ' << learning_rate << ' ' << beta1 << ' ' << beta2 << ' '
      << epsilon << '\n';
  for (Eigen::Index i = 0; i < m_.size(); ++i) out << m_[i] << (i + 1 == m_.size() ? '\n' : ' ');
  for (Eigen::Index i = 0; i < v_.size(); ++i) out << v_[i] << (i + 1 == v_.size() ? '\n' : ' ');
  out.precision(old);
}

Adam Adam::read(std::istream& in) {
  std::string tag;
  Eigen::Index n = 0;
  Adam a;
  if (!(in >> tag >> n >> a.t_ >> a.learning_rate >> a.beta1 >> a.beta2 >> a.epsilon) || tag != "adam") {
    throw std::runtime_error("malformed optimizer state");
  }
  a.m_.resize(n);
  a.v_.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) in >> a.m_[i];
  for (Eigen::Index i = 0; i < n; ++i) in >> a.v_[i];
  if (!in) throw std::runtime_error("truncated optimizer state");
  return a;
}

void soft_update(Mlp& target, const Mlp& live, double tau) {
  if (!target.same_shape(live)) throw std::invalid_argument("target and live networks differ in shape");
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("tau must lie in [0, 1]");
  if (tau == 1.0) {
    target.params() = live.params();
    return;
  }
  target.params() = tau * live.params() + (1.0 - tau) * target.params();
}

// ---------------------------------------------------------------------------
// Checkpoint format

void write_mlp(std::ostream& out, const Mlp& net) {
  const auto old = out.precision(17);
  out << "mlp 1 " << net.sizes().size();
  for (std::size_t s : net.sizes()) out << ' ' << s;
  out << '\n';
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto w = net.weight(l);
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      for (Eigen::Index j = 0; j < w.cols(); ++j) out << w(i, j) << (j + 1 == w.cols() ? '\n' : ' ');
    }
    const auto b = net.bias(l);
    for (Eigen::Index i = 0; i < b.size(); ++i) out << b[i] << (i + 1 == b.size() ? '\n' : ' ');
  }
  out.precision(old);
}

Mlp read_mlp(std::istream& in) {
  std::string tag;
  int version = 0;
  std::size_t count = 0;
  if (!(in >> tag >> version >> count) || tag != "mlp") throw std::runtime_error("malformed network header");
  if (version != 1) throw std::runtime_error("unsupported network format version " + std::to_string(version));
  std::vector<std::size_t> sizes(count);
  for (auto& s : sizes) in >> s;
  if (!in) throw std::runtime_error("malformed network sizes");
  Mlp net(sizes);
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    auto w = net.weight(l);
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      for (Eigen::Index j = 0; j < w.cols(); ++j) in >> w(i, j);
    }
    auto b = net.bias(l);
    for (Eigen::Index i = 0; i < b.size(); ++i) in >> b[i];
  }
  if (!in) throw std::runtime_error("truncated network parameters");
  return net;
}

}  // namespace robustsafe::net
