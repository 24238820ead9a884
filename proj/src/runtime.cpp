#include "robustsafe/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <boost/math/distributions/students_t.hpp>

namespace robustsafe::runtime {

namespace {

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

std::vector<double> clamp_to(std::vector<double> v, const std::vector<double>& low,
                             const std::vector<double>& high) {
  if (v.size() != low.size()) throw std::invalid_argument("action dimension mismatch");
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(v[i], low[i], high[i]);
  return v;
}

}  // namespace

Batch make_batch(std::span<const Transition> transitions) {
  Batch b;
  const auto n = static_cast<Eigen::Index>(transitions.size());
  if (n == 0) return b;
  const auto& first = transitions.front();
  b.x.resize(static_cast<Eigen::Index>(first.x.size()), n);
  b.u.resize(static_cast<Eigen::Index>(first.u.size()), n);
  b.a.resize(static_cast<Eigen::Index>(first.a.size()), n);
  b.x_next.resize(static_cast<Eigen::Index>(first.x_next.size()), n);
  b.r.resize(n);
  b.h.resize(n);
  b.done.resize(transitions.size());
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto& t = transitions[static_cast<std::size_t>(j)];
    for (Eigen::Index i = 0; i < b.x.rows(); ++i) b.x(i, j) = t.x[i];
    for (Eigen::Index i = 0; i < b.u.rows(); ++i) b.u(i, j) = t.u[i];
    for (Eigen::Index i = 0; i < b.a.rows(); ++i) b.a(i, j) = t.a[i];
    for (Eigen::Index i = 0; i < b.x_next.rows(); ++i) b.x_next(i, j) = t.x_next[i];
    b.r[j] = t.r;
    b.h[j] = t.h;
    b.done[static_cast<std::size_t>(j)] = t.done ? 1 : 0;
  }
  return b;
}

// ---------------------------------------------------------------------------
// ReplayBuffer
//
// Row layout: x | u | a | r | h | x_next | done

ReplayBuffer::ReplayBuffer(std::size_t state_dim, std::size_t input_dim, std::size_t dist_dim,
                           std::size_t capacity)
    : sx_(state_dim), su_(input_dim), sa_(dist_dim), stride_(2 * state_dim + input_dim + dist_dim + 3),
      capacity_(capacity) {
  if (capacity_ == 0) throw std::invalid_argument("replay capacity must be positive");
}

void ReplayBuffer::push(const Transition& t) {
  if (t.x.size() != sx_ || t.x_next.size() != sx_ || t.u.size() != su_ || t.a.size() != sa_) {
    throw std::invalid_argument("transition shape does not match the buffer");
  }
  if (!all_finite(t.x) || !all_finite(t.x_next) || !all_finite(t.u) || !all_finite(t.a) ||
      !std::isfinite(t.r) || !std::isfinite(t.h)) {
    throw std::domain_error("refusing to store a non-finite transition");
  }
  std::size_t row;
  if (size_ < capacity_) {
    row = slot(size_);
    ++size_;
    if (data_.size() < size_ * stride_) data_.resize(size_ * stride_);
  } else {
    row = head_;
    head_ = (head_ + 1) % capacity_;
  }
  double* p = data_.data() + row * stride_;
  p = std::copy(t.x.begin(), t.x.end(), p);
  p = std::copy(t.u.begin(), t.u.end(), p);
  p = std::copy(t.a.begin(), t.a.end(), p);
  *p++ = t.r;
  *p++ = t.h;
  p = std::copy(t.x_next.begin(), t.x_next.end(), p);
  *p = t.done ? 1.0 : 0.0;
}

Transition ReplayBuffer::at(std::size_t i) const {
  if (i >= size_) throw std::out_of_range("replay index out of range");
  const double* p = data_.data() + slot(i) * stride_;
  Transition t;
  t.x.assign(p, p + sx_);
  p += sx_;
  t.u.assign(p, p + su_);
  p += su_;
  t.a.assign(p, p + sa_);
  p += sa_;
  t.r = *p++;
  t.h = *p++;
  t.x_next.assign(p, p + sx_);
  p += sx_;
  t.done = *p != 0.0;
  return t;
}

Batch ReplayBuffer::sample(std::size_t batch_size, Rng& rng) const {
  Batch b;
  const auto n = static_cast<Eigen::Index>(batch_size);
  b.x.resize(static_cast<Eigen::Index>(sx_), n);
  b.u.resize(static_cast<Eigen::Index>(su_), n);
  b.a.resize(static_cast<Eigen::Index>(sa_), n);
  b.x_next.resize(static_cast<Eigen::Index>(sx_), n);
  b.r.resize(n);
  b.h.resize(n);
  b.done.resize(batch_size);
  if (batch_size == 0) return b;
  if (size_ == 0) throw std::logic_error("cannot sample from an empty replay buffer");
  std::uniform_int_distribution<std::size_t> pick(0, size_ - 1);
  for (Eigen::Index j = 0; j < n; ++j) {
    // Storage rows are a permutation of logical indices, so picking a row
    // uniformly is the same as picking a stored transition uniformly.
    const double* p = data_.data() + pick(rng) * stride_;
    for (std::size_t i = 0; i < sx_; ++i) b.x(static_cast<Eigen::Index>(i), j) = *p++;
    for (std::size_t i = 0; i < su_; ++i) b.u(static_cast<Eigen::Index>(i), j) = *p++;
    for (std::size_t i = 0; i < sa_; ++i) b.a(static_cast<Eigen::Index>(i), j) = *p++;
    b.r[j] = *p++;
    b.h[j] = *p++;
    for (std::size_t i = 0; i < sx_; ++i) b.x_next(static_cast<Eigen::Index>(i), j) = *p++;
    b.done[static_cast<std::size_t>(j)] = *p != 0.0 ? 1 : 0;
  }
  return b;
}

// ---------------------------------------------------------------------------
// Episodes

EpisodeMetrics compute_metrics(const env::Environment& environment,
                               std::span<const Transition> trajectory) {
  EpisodeMetrics m;
  auto account = [&m](double h) {
    if (h < 0.0) {
      m.episode_violation += -h;
      ++m.violation_steps;
    }
  };
  for (const auto& t : trajectory) {
    m.episode_return += t.r;
    account(environment.constraint(t.x));
  }
  if (!trajectory.empty()) account(environment.constraint(trajectory.back().x_next));
  m.length = trajectory.size();
  return m;
}

AdversaryMode parse_adversary_mode(const std::string& name) {
  if (name == "learned" || name == "learned-adversary") return AdversaryMode::Learned;
  if (name == "none") return AdversaryMode::None;
  if (name == "uniform-random") return AdversaryMode::UniformRandom;
  throw std::invalid_argument("unknown adversary protocol: " + name);
}

std::string to_string(AdversaryMode mode) {
  switch (mode) {
    case AdversaryMode::Learned: return "learned";
    case AdversaryMode::None: return "none";
    case AdversaryMode::UniformRandom: return "uniform-random";
  }
  return "none";
}

std::vector<double> sample_uniform(const std::vector<double>& low, const std::vector<double>& high,
                                   Rng& rng) {
  std::vector<double> out(low.size());
  for (std::size_t i = 0; i < low.size(); ++i) {
    out[i] = low[i] == high[i] ? low[i] : std::uniform_real_distribution<double>(low[i], high[i])(rng);
  }
  return out;
}

env::State sample_initial_state(const env::SystemSpec& spec, double scale, Rng& rng) {
  if (!(scale > 0.0 && scale <= 1.0)) throw std::invalid_argument("initial-state scale must lie in (0, 1]");
  std::vector<double> low(spec.state_dim), high(spec.state_dim);
  for (std::size_t i = 0; i < spec.state_dim; ++i) {
    const double mid = 0.5 * (spec.state_low[i] + spec.state_high[i]);
    const double half = 0.5 * scale * (spec.state_high[i] - spec.state_low[i]);
    low[i] = mid - half;
    high[i] = mid + half;
  }
  return sample_uniform(low, high, rng);
}

Episode run_episode(const env::Environment& environment, const ActionFn& policy,
                    const ActionFn* adversary, std::size_t max_len, const env::State& initial) {
  const auto& spec = environment.spec();
  Episode ep;
  ep.trajectory.reserve(max_len);
  env::State x = initial;
  const std::vector<double> zero_dist(spec.dist_dim(), 0.0);
  try {
    for (std::size_t t = 0; t < max_len; ++t) {
      Transition tr;
      tr.x = x;
      tr.h = environment.constraint(x);
      tr.u = clamp_to(policy(x), spec.input_low, spec.input_high);
      tr.a = adversary ? clamp_to((*adversary)(x), spec.dist_low, spec.dist_high) : zero_dist;
      tr.x_next = environment.step(x, tr.u, tr.a);
      if (!all_finite(tr.x_next)) throw std::domain_error("non-finite successor state");
      tr.r = environment.reward(x, tr.u, tr.x_next);
      const bool left = !environment.in_region(tr.x_next);
      tr.done = left || t + 1 == max_len;
      x = tr.x_next;
      ep.trajectory.push_back(std::move(tr));
      if (left) break;
    }
  } catch (const std::domain_error&) {
    ep.metrics = compute_metrics(environment, ep.trajectory);
    ep.metrics.aborted = true;
    return ep;
  }
  ep.metrics = compute_metrics(environment, ep.trajectory);
  return ep;
}

std::vector<EpisodeMetrics> evaluate(const env::Environment& environment, const ActionFn& policy,
                                     const ActionFn& learned_adversary, AdversaryMode mode,
                                     std::size_t episodes, std::size_t max_len, double init_scale, Rng& rng) {
  const auto& spec = environment.spec();
  const ActionFn random_adversary = [&](std::span<const double>) {
    return sample_uniform(spec.dist_low, spec.dist_high, rng);
  };
  const ActionFn* adversary = nullptr;
  if (mode == AdversaryMode::Learned) adversary = &learned_adversary;
  if (mode == AdversaryMode::UniformRandom) adversary = &random_adversary;

  std::vector<EpisodeMetrics> out;
  out.reserve(episodes);
  for (std::size_t i = 0; i < episodes; ++i) {
    const env::State x0 = sample_initial_state(spec, init_scale, rng);
    out.push_back(run_episode(environment, policy, adversary, max_len, x0).metrics);
  }
  return out;
}

// ---------------------------------------------------------------------------

JsonlWriter::JsonlWriter(const std::string& path) : out_(path, std::ios::out | std::ios::trunc) {
  if (!out_) throw std::runtime_error("cannot open " + path + " for writing");
}

void JsonlWriter::write(const std::string& json_line) {
  out_ << json_line << '\n';
  out_.flush();
}

Interval mean_ci95(std::span<const double> samples) {
  Interval ci;
  if (samples.empty()) return ci;
  double sum = 0.0;
  for (double s : samples) sum += s;
  ci.mean = sum / static_cast<double>(samples.size());
  if (samples.size() < 2) return ci;
  double ss = 0.0;
  for (double s : samples) ss += (s - ci.mean) * (s - ci.mean);
  const double n = static_cast<double>(samples.size());
  const double sd = std::sqrt(ss / (n - 1.0));
  const boost::math::students_t dist(n - 1.0);
  ci.half_width = boost::math::quantile(boost::math::complement(dist, 0.025)) * sd / std::sqrt(n);
  return ci;
}

}  // namespace robustsafe::runtime
