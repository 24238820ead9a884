#include "robustsafe/sacris.hpp"

#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "support/gradient_check.hpp"

namespace robustsafe::sacris {
namespace {

using net::Matrix;
using net::Mlp;
using net::RowVector;
using net::Vector;
using testing_support::numerical_gradient;
using testing_support::random_batch;
using testing_support::relative_error;

runtime::TrainConfig small_config() {
  runtime::TrainConfig c;
  c.hidden_layers = 2;
  c.hidden_units = 8;
  c.resolve_defaults();
  return c;
}

SacRisAgent small_agent(std::uint64_t seed, runtime::TrainConfig config = small_config()) {
  net::Rng rng(seed);
  return make_sacris_agent(env::DoubleIntegrator().spec(), config, rng);
}

void make_constant(Mlp& critic, double value) {
  critic.params().setZero();
  critic.bias(critic.num_layers() - 1)[0] = value;
}

runtime::Batch single(double r) {
  runtime::Transition t;
  t.x = {0.1, -0.2};
  t.u = {0.4};
  t.a = {0.1};
  t.r = r;
  t.h = 1.0;
  t.x_next = {0.2, 0.3};
  const std::array<runtime::Transition, 1> one{t};
  return runtime::make_batch(one);
}

// Policy whose log-density at zero noise is exactly `log_prob` for a
// one-dimensional action on [-1, 1]: mean 0 and log-std chosen so that
// -log_std - log sqrt(2 pi) = log_prob.
void set_policy_density(SacRisAgent& agent, double log_prob) {
  agent.policy.net().params().setZero();
  auto b = agent.policy.net().bias(agent.policy.net().num_layers() - 1);
  b[1] = -log_prob - 0.5 * std::log(2.0 * M_PI);
}

TEST(SoftBackup, HandEvaluations) {
  EXPECT_NEAR(soft_q_backup(1.0, 0.99, 2.0, 0.2, -1.0), 3.178, 1e-15);
  EXPECT_EQ(soft_q_backup(1.0, 0.0, 2.0, 0.2, -1.0), 1.0);
  EXPECT_EQ(soft_q_backup(1.0, 0.99, 2.0, 0.0, -1.0), 1.0 + 0.99 * 2.0);
}

TEST(QTargets, ReadTheTargetCriticsAndTheFreshPolicySample) {
  auto agent = small_agent(1);
  agent.gamma = 0.99;
  agent.log_alpha[0] = std::log(0.2);
  make_constant(agent.q1_target, 2.0);
  make_constant(agent.q2_target, 5.0);
  make_constant(agent.q1, -10.0);
  set_policy_density(agent, -1.0);
  EXPECT_NEAR(q_targets(agent, single(1.0), Matrix::Zero(1, 1))[0], 3.178, 1e-12);
}

TEST(QTargets, TwinSymmetry) {
  auto agent = small_agent(2);
  std::mt19937_64 rng(2);
  const auto batch = random_batch(16, 2, 1, 1, rng, 2.0);
  net::Rng nrng(3);
  const Matrix noise = policy_noise(agent, 16, nrng);
  const RowVector before = q_targets(agent, batch, noise);
  std::swap(agent.q1_target, agent.q2_target);
  EXPECT_EQ(q_targets(agent, batch, noise), before);
}

TEST(QLoss, HandEvaluations) {
  auto agent = small_agent(4);
  const auto batch = single(1.0);
  make_constant(agent.q1, 3.178);
  EXPECT_NEAR(q_loss(agent, batch, 1, RowVector::Constant(1, 3.178)).value, 0.0, 1e-30);
  make_constant(agent.q1, 3.0);
  EXPECT_NEAR(q_loss(agent, batch, 1, RowVector::Constant(1, 3.178)).value, 0.031684, 1e-12);
  EXPECT_THROW(q_loss(agent, batch, 3, RowVector::Constant(1, 0.0)), std::invalid_argument);
}

TEST(QLoss, IdenticalCriticsGiveIdenticalLosses) {
  auto agent = small_agent(5);
  agent.q2 = agent.q1;
  std::mt19937_64 rng(5);
  const auto batch = random_batch(16, 2, 1, 1, rng, 2.0);
  const RowVector targets = RowVector::Constant(16, 0.7);
  const auto l1 = q_loss(agent, batch, 1, targets);
  const auto l2 = q_loss(agent, batch, 2, targets);
  EXPECT_EQ(l1.value, l2.value);
  EXPECT_EQ(l1.grad, l2.grad);
}

TEST(TemperatureLoss, SignAndStationarity) {
  auto agent = small_agent(6);
  agent.log_alpha[0] = std::log(0.3);
  const auto batch = single(0.0);
  const Matrix zero = Matrix::Zero(1, 1);

  set_policy_density(agent, -agent.target_entropy - 1.0);  // -log pi = H + 1
  const auto above = temperature_loss(agent, batch, zero);
  EXPECT_NEAR(above.value, 0.3, 1e-12);
  EXPECT_GT(above.grad[0], 0.0);  // gradient descent shrinks alpha

  set_policy_density(agent, -agent.target_entropy);  // -log pi = H
  EXPECT_NEAR(temperature_loss(agent, batch, zero).grad[0], 0.0, 1e-12);
}

TEST(TemperatureLoss, GradientMatchesFiniteDifferences) {
  auto agent = small_agent(7);
  std::mt19937_64 rng(7);
  const auto batch = random_batch(16, 2, 1, 1, rng, 2.0);
  net::Rng nrng(8);
  const Matrix noise = policy_noise(agent, 16, nrng);
  const auto analytic = temperature_loss(agent, batch, noise);
  const auto numeric = numerical_gradient([&] { return temperature_loss(agent, batch, noise).value; },
                                          agent.log_alpha, 1e-5);
  EXPECT_LT(relative_error(analytic.grad, numeric), 1e-4);
}

TEST(PolicyLoss, ConstantCriticsWithoutEntropyHaveNoGradient) {
  auto agent = small_agent(9);
  agent.log_alpha[0] = -1000.0;  // alpha underflows to 0
  make_constant(agent.q1, 1.5);
  make_constant(agent.q2, 2.5);
  std::mt19937_64 rng(9);
  const auto batch = random_batch(8, 2, 1, 1, rng);
  net::Rng nrng(10);
  const auto loss = policy_loss(agent, batch, policy_noise(agent, 8, nrng));
  EXPECT_DOUBLE_EQ(loss.value, -1.5);
  EXPECT_TRUE(loss.grad.isZero(0.0));
}

TEST(PolicyLoss, LinearCriticPushesActionsUp) {
  auto agent = small_agent(11);
  agent.log_alpha[0] = -1000.0;
  for (Mlp* q : {&agent.q1, &agent.q2}) {
    *q = Mlp({4, 1});  // Q = u
    q->weight(0)(0, 2) = 1.0;
  }
  set_policy_density(agent, 0.0);
  agent.policy.net().bias(agent.policy.net().num_layers() - 1)[1] = -20.0;  // near-deterministic
  std::mt19937_64 rng(11);
  const auto batch = random_batch(8, 2, 1, 1, rng);
  const auto loss = policy_loss(agent, batch, Matrix::Zero(1, 8));
  // Output bias of the mean head: a descent step raises the mean action.
  const Eigen::Index mean_bias = static_cast<Eigen::Index>(agent.policy.net().num_params()) - 2;
  EXPECT_LT(loss.grad[mean_bias], 0.0);
}

TEST(Lagrangian, ReducesToPolicyLossWithoutMultiplier) {
  auto agent = small_agent(12);
  agent.lambda = 0.0;
  std::mt19937_64 rng(12);
  const auto batch = random_batch(16, 2, 1, 1, rng, 2.0);
  net::Rng nrng(13);
  const Matrix noise = policy_noise(agent, 16, nrng);
  const auto lag = lagrangian(agent, batch, noise);
  const auto pol = policy_loss(agent, batch, noise);
  EXPECT_EQ(lag.value, pol.value);
  EXPECT_EQ(lag.grad, pol.grad);
}

TEST(Lagrangian, DecomposesIntoPolicyLossAndSafetyTerm) {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> lam(0.0, 5.0);
  for (int trial = 0; trial < 20; ++trial) {
    auto agent = small_agent(100 + trial);
    agent.lambda = lam(rng);
    const auto batch = random_batch(16, 2, 1, 1, rng, 2.0);
    net::Rng nrng(trial);
    const Matrix noise = policy_noise(agent, 16, nrng);
    const double expected = policy_loss(agent, batch, noise).value - agent.lambda * safety_term(agent, batch, noise);
    EXPECT_NEAR(lagrangian(agent, batch, noise).value, expected, 1e-12);
  }
}

TEST(Lagrangian, ArithmeticExample) {
  // L_pi = 0.3, lambda = 2, E{Q_h} = 0.1.
  auto agent = small_agent(15);
  agent.log_alpha[0] = -1000.0;
  make_constant(agent.q1, -0.3);
  make_constant(agent.q2, -0.3);
  make_constant(agent.safety.critic, 0.1);
  agent.lambda = 2.0;
  std::mt19937_64 rng(15);
  const auto batch = random_batch(4, 2, 1, 1, rng);
  EXPECT_NEAR(lagrangian(agent, batch, Matrix::Zero(1, 4)).value, 0.1, 1e-15);
}

TEST(DualUpdate, Examples) {
  auto agent = small_agent(16);
  agent.lambda_lr = 0.01;
  agent.lambda = 0.0;
  dual_update(agent, -0.5);
  EXPECT_NEAR(agent.lambda, 0.005, 1e-18);
  agent.lambda = 0.001;
  dual_update(agent, 0.5);
  EXPECT_EQ(agent.lambda, 0.0);
  agent.lambda = 0.3;
  dual_update(agent, 0.0);
  EXPECT_EQ(agent.lambda, 0.3);
}

class SacGradients : public ::testing::TestWithParam<int> {
 protected:
  void SetUp() override {
    agent = small_agent(500 + GetParam());
    agent.lambda = 0.7;
    std::mt19937_64 rng(GetParam());
    batch = random_batch(16, 2, 1, 1, rng, 2.0);
    net::Rng nrng(GetParam());
    noise = policy_noise(agent, 16, nrng);
  }
  SacRisAgent agent;
  runtime::Batch batch;
  Matrix noise;
};

TEST_P(SacGradients, CriticLosses) {
  const RowVector targets = q_targets(agent, batch, noise);
  for (int i : {1, 2}) {
    Mlp& critic = i == 1 ? agent.q1 : agent.q2;
    const auto analytic = q_loss(agent, batch, i, targets);
    const auto numeric =
        numerical_gradient([&] { return q_loss(agent, batch, i, targets).value; }, critic.params(), 1e-5);
    EXPECT_LT(relative_error(analytic.grad, numeric), 1e-4) << "critic " << i;
  }
}

TEST_P(SacGradients, PolicyLoss) {
  const auto analytic = policy_loss(agent, batch, noise);
  const auto numeric = numerical_gradient([&] { return policy_loss(agent, batch, noise).value; },
                                          agent.policy.net().params(), 1e-5);
  EXPECT_LT(relative_error(analytic.grad, numeric), 1e-4);
}

TEST_P(SacGradients, Lagrangian) {
  const auto analytic = lagrangian(agent, batch, noise);
  const auto numeric = numerical_gradient([&] { return lagrangian(agent, batch, noise).value; },
                                          agent.policy.net().params(), 1e-5);
  EXPECT_LT(relative_error(analytic.grad, numeric), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(RandomNets, SacGradients, ::testing::Range(0, 5));

TEST(SacrisUpdate, KeepsMultiplierNonnegativeAndTemperaturePositive) {
  auto agent = small_agent(17);
  agent.lambda_lr = 5.0;  // large steps hit the clip often
  std::mt19937_64 rng(17);
  net::Rng nrng(18);
  for (int step = 0; step < 50; ++step) {
    sacris_update(agent, random_batch(32, 2, 1, 1, rng, 2.5), nrng);
    EXPECT_GE(agent.lambda, 0.0);
    EXPECT_GT(agent.alpha(), 0.0);
  }
}

TEST(SacrisUpdate, FrozenMultiplierStaysPut) {
  auto config = small_config();
  config.freeze_lambda = true;
  config.lambda_init = 0.25;
  auto agent = small_agent(19, config);
  std::mt19937_64 rng(19);
  net::Rng nrng(20);
  for (int step = 0; step < 10; ++step) sacris_update(agent, random_batch(32, 2, 1, 1, rng, 2.5), nrng);
  EXPECT_EQ(agent.lambda, 0.25);
}

// Standard soft actor-critic step on (x, u, a=0) written directly against
// the network primitives: twin critics, reparameterized policy, log-alpha.
void plain_sac_step(SacRisAgent& s, const runtime::Batch& b, net::Rng& rng) {
  const auto n = static_cast<Eigen::Index>(b.size());
  const double nn = static_cast<double>(n);
  const auto draw = [&] {
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix z(1, n);
    for (Eigen::Index j = 0; j < n; ++j) z(0, j) = normal(rng);
    return z;
  };
  const auto stack = [](const Matrix& x, const Matrix& u) {
    Matrix in(4, x.cols());
    in << x, u, Matrix::Zero(1, x.cols());
    return in;
  };
  const double alpha = std::exp(s.log_alpha[0]);

  // Critics.
  const auto next = s.policy.sample_with_noise(b.x_next, draw());
  const Matrix in_next = stack(b.x_next, next.action);
  const RowVector qn1 = s.q1_target.forward(in_next), qn2 = s.q2_target.forward(in_next);
  RowVector y(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    y[j] = b.r[j] + s.gamma * (std::min(qn1[j], qn2[j]) - alpha * next.log_prob[j]);
  }
  const Matrix in = stack(b.x, b.u);
  for (Mlp* q : {&s.q1, &s.q2}) {
    net::MlpTape tape;
    const RowVector pred = q->forward(in, tape);
    Vector g = Vector::Zero(static_cast<Eigen::Index>(q->num_params()));
    q->backward(tape, 2.0 * (pred - y) / nn, &g);
    (q == &s.q1 ? s.q1_opt : s.q2_opt).step(q->params(), g);
  }

  // Policy: minimize alpha log pi - min(Q1, Q2).
  net::GaussianPolicy::Tape pt;
  const auto cur = s.policy.sample_with_noise(b.x, draw(), &pt);
  const Matrix in_pi = stack(b.x, cur.action);
  net::MlpTape t1, t2;
  const RowVector p1 = s.q1.forward(in_pi, t1), p2 = s.q2.forward(in_pi, t2);
  RowVector w1(n), w2(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const bool first = p1[j] <= p2[j];
    w1[j] = first ? -1.0 / nn : 0.0;
    w2[j] = first ? 0.0 : -1.0 / nn;
  }
  const Matrix dq = s.q1.backward(t1, w1, nullptr) + s.q2.backward(t2, w2, nullptr);
  Vector gp = Vector::Zero(static_cast<Eigen::Index>(s.policy.net().num_params()));
  s.policy.backward(pt, dq.row(2), RowVector::Constant(n, alpha / nn), &gp);
  s.policy_opt.step(s.policy.net().params(), gp);

  // Temperature.
  const auto t = s.policy.sample_with_noise(b.x, draw());
  Vector ga(1);
  ga[0] = alpha * (-t.log_prob.mean() - s.target_entropy);
  s.alpha_opt.step(s.log_alpha, ga);

  // Targets.
  for (auto [target, live] : {std::pair{&s.q1_target, &s.q1}, std::pair{&s.q2_target, &s.q2}}) {
    target->params() = s.tau * live->params() + (1.0 - s.tau) * target->params();
  }
}

TEST(SacrisUpdate, ReducesToPlainSacWithoutMultiplierOrAdversary) {
  auto config = small_config();
  config.freeze_lambda = true;
  config.freeze_adversary = true;
  const auto initial = small_agent(21, config);
  auto ours = initial, reference = initial;
  std::mt19937_64 data(21);
  net::Rng rng_ours(22), rng_ref(22);
  for (int step = 0; step < 5; ++step) {
    const auto batch = random_batch(32, 2, 1, 0, data, 2.0);
    runtime::Batch with_zero = batch;
    with_zero.a = Matrix::Zero(1, 32);
    sacris_update(ours, with_zero, rng_ours);
    plain_sac_step(reference, with_zero, rng_ref);
  }
  const auto close = [](const Vector& a, const Vector& b) { return (a - b).cwiseAbs().maxCoeff(); };
  EXPECT_LT(close(ours.q1.params(), reference.q1.params()), 1e-12);
  EXPECT_LT(close(ours.q2.params(), reference.q2.params()), 1e-12);
  EXPECT_LT(close(ours.q1_target.params(), reference.q1_target.params()), 1e-12);
  EXPECT_LT(close(ours.policy.net().params(), reference.policy.net().params()), 1e-12);
  EXPECT_LT(std::abs(ours.log_alpha[0] - reference.log_alpha[0]), 1e-12);
  EXPECT_EQ(ours.lambda, 0.0);
}

TEST(SacrisTrain, ZeroStepsLeavesTheInitialization) {
  auto config = small_config();
  config.total_steps = 0;
  config.seed = 4;
  const env::DoubleIntegrator env;
  const auto trained = sacris_train(env, config);
  ris::Streams streams(4);
  const auto fresh = make_sacris_agent(env.spec(), config, streams.init);
  EXPECT_EQ(trained.q1.params(), fresh.q1.params());
  EXPECT_EQ(trained.policy.net().params(), fresh.policy.net().params());
  EXPECT_EQ(trained.safety.critic.params(), fresh.safety.critic.params());
  EXPECT_EQ(trained.lambda, config.lambda_init);
}

TEST(SacrisTrain, ShortRunIsDeterministicAndEvaluatesBothProtocols) {
  auto config = small_config();
  config.total_steps = 400;
  config.warmup_steps = 100;
  config.steps_per_epoch = 200;
  config.batch_size = 16;
  config.eval_episodes = 2;
  config.max_episode_length = 50;
  config.seed = 8;
  const env::DoubleIntegrator env;
  std::vector<EpochReport> reports;
  const auto a = sacris_train(env, config, [&](const SacRisAgent&, const EpochReport& r) { reports.push_back(r); });
  const auto b = sacris_train(env, config);
  EXPECT_EQ(a.policy.net().params(), b.policy.net().params());
  EXPECT_EQ(a.lambda, b.lambda);
  ASSERT_EQ(reports.size(), 2u);
  ASSERT_EQ(reports[0].evaluations.size(), 2u);
  EXPECT_EQ(reports[0].evaluations[0].mode, runtime::AdversaryMode::Learned);
  EXPECT_EQ(reports[0].evaluations[1].mode, runtime::AdversaryMode::None);
  EXPECT_EQ(reports[0].evaluations[0].episodes.size(), 2u);
  EXPECT_GT(reports[1].alpha, 0.0);
}

TEST(SacrisTrain, FrozenAdversaryAppliesNoDisturbance) {
  auto config = small_config();
  config.freeze_adversary = true;
  const auto agent = small_agent(23, config);
  EXPECT_TRUE(agent.safety.adversary.half_range().isZero(0.0));
  EXPECT_TRUE(agent.safety.adversary.act(Matrix::Random(2, 10)).isZero(0.0));
}

TEST(Checkpoint, RoundTripsTheWholeAgent) {
  auto agent = small_agent(24);
  std::mt19937_64 rng(24);
  net::Rng nrng(25);
  for (int i = 0; i < 3; ++i) sacris_update(agent, random_batch(16, 2, 1, 1, rng, 2.0), nrng);
  agent.lambda = 0.123456789;
  std::stringstream ss;
  save_sacris(ss, agent);
  const auto back = load_sacris(ss);
  EXPECT_EQ(back.lambda, agent.lambda);
  EXPECT_EQ(back.log_alpha, agent.log_alpha);
  EXPECT_EQ(back.q2_target.params(), agent.q2_target.params());
  EXPECT_EQ(back.policy.net().params(), agent.policy.net().params());
  EXPECT_EQ(back.safety.adversary.net().params(), agent.safety.adversary.net().params());
  EXPECT_EQ(back.alpha_opt.first_moment(), agent.alpha_opt.first_moment());
  std::stringstream again;
  save_sacris(again, back);
  EXPECT_EQ(again.str(), ss.str());
}

}  // namespace
}  // namespace robustsafe::sacris
