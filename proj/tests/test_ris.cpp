#include "robustsafe/ris.hpp"

#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "support/gradient_check.hpp"

namespace robustsafe::ris {
namespace {

using net::Matrix;
using net::Mlp;
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

RisAgent small_agent(std::uint64_t seed, double gamma_h = 0.9) {
  net::Rng rng(seed);
  auto config = small_config();
  config.gamma_h = gamma_h;
  return make_ris_agent(env::DoubleIntegrator().spec(), config, rng);
}

// Critic that outputs `value` everywhere.
void make_constant(Mlp& critic, double value) {
  critic.params().setZero();
  critic.bias(critic.num_layers() - 1)[0] = value;
}

runtime::Transition one_transition(double h) {
  runtime::Transition t;
  t.x = {0.1, 0.2};
  t.u = {0.3};
  t.a = {-0.1};
  t.h = h;
  t.x_next = {0.2, 0.1};
  return t;
}

TEST(QhTarget, HandEvaluations) {
  auto agent = small_agent(1, 0.9);
  make_constant(agent.critic_target, 0.5);
  EXPECT_NEAR(qh_target(agent, one_transition(1.0)), 0.55, 1e-15);
  make_constant(agent.critic_target, 0.0);
  EXPECT_NEAR(qh_target(agent, one_transition(-1.0)), -1.0, 1e-15);
}

TEST(QhTarget, ApproachesTheNextValueAsDiscountGoesToOne) {
  double previous = INFINITY;
  for (double g : {0.9, 0.99, 0.999, 0.9999}) {
    auto agent = small_agent(1, g);
    make_constant(agent.critic_target, 0.5);
    const double err = std::abs(qh_target(agent, one_transition(1.0)) - 0.5);
    EXPECT_LT(err, previous);
    previous = err;
  }
  EXPECT_LT(previous, 1e-4);
}

TEST(QhTarget, ReadsTheTargetCriticNotTheLiveOne) {
  auto agent = small_agent(2);
  make_constant(agent.critic_target, 0.5);
  make_constant(agent.critic, -3.0);
  EXPECT_NEAR(qh_target(agent, one_transition(1.0)), 0.55, 1e-15);
}

TEST(QhLoss, HandEvaluations) {
  auto agent = small_agent(3);
  make_constant(agent.critic_target, 0.5);
  runtime::Transition t = one_transition(1.0);
  const std::array<runtime::Transition, 1> one{t};
  const auto batch = runtime::make_batch(one);

  make_constant(agent.critic, 0.55);
  EXPECT_NEAR(qh_loss(agent, batch).value, 0.0, 1e-30);
  make_constant(agent.critic, 1.0);
  EXPECT_NEAR(qh_loss(agent, batch).value, 0.2025, 1e-15);
}

TEST(QhLoss, InvariantUnderBatchDuplication) {
  const auto agent = small_agent(4);
  std::mt19937_64 rng(4);
  const auto batch = random_batch(10, 2, 1, 1, rng);
  std::vector<runtime::Transition> doubled;
  for (int rep = 0; rep < 2; ++rep) {
    for (std::size_t j = 0; j < batch.size(); ++j) {
      runtime::Transition t;
      t.x = {batch.x(0, j), batch.x(1, j)};
      t.u = {batch.u(0, j)};
      t.a = {batch.a(0, j)};
      t.h = batch.h[j];
      t.r = batch.r[j];
      t.x_next = {batch.x_next(0, j), batch.x_next(1, j)};
      doubled.push_back(t);
    }
  }
  EXPECT_NEAR(qh_loss(agent, runtime::make_batch(doubled)).value, qh_loss(agent, batch).value, 1e-14);
}

TEST(QhLoss, RejectsEmptyBatch) {
  const auto agent = small_agent(5);
  std::mt19937_64 rng(5);
  EXPECT_THROW(qh_loss(agent, random_batch(0, 2, 1, 1, rng)), std::invalid_argument);
}

TEST(PlayerLosses, ConstantCriticGivesZeroGradient) {
  auto agent = small_agent(6);
  make_constant(agent.critic, 1.7);
  std::mt19937_64 rng(6);
  const auto batch = random_batch(8, 2, 1, 1, rng);
  const auto pro = protagonist_loss(agent, batch);
  const auto adv = adversary_loss(agent, batch);
  EXPECT_DOUBLE_EQ(pro.value, -1.7);
  EXPECT_TRUE(pro.grad.isZero(0.0));
  EXPECT_TRUE(adv.grad.isZero(0.0));
}

TEST(PlayerLosses, LinearCriticChainRule) {
  // Q_h = u, pi_h(x) = tanh(w) with w the output bias.
  RisAgent agent;
  agent.state_dim = agent.input_dim = agent.dist_dim = 1;
  agent.critic = Mlp({3, 1});
  agent.critic.weight(0)(0, 1) = 1.0;
  agent.critic_target = agent.critic;
  const double w = 0.4;
  Mlp pnet({1, 1});
  pnet.bias(0)[0] = w;
  agent.protagonist = net::DeterministicPolicy(pnet, {-1.0}, {1.0});
  agent.adversary = net::DeterministicPolicy(Mlp({1, 1}), {-0.5}, {0.5});
  std::mt19937_64 rng(7);
  const auto batch = random_batch(5, 1, 1, 1, rng);
  const auto pro = protagonist_loss(agent, batch);
  const double t = std::tanh(w);
  EXPECT_NEAR(pro.value, -t, 1e-15);
  EXPECT_NEAR(pro.grad[1], -(1.0 - t * t), 1e-15);
  // The zero input weight still sees the batch-mean state.
  EXPECT_NEAR(pro.grad[0], -(1.0 - t * t) * batch.x.mean(), 1e-15);
}

TEST(PlayerLosses, ZeroSumIdentityIsExact) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto agent = small_agent(100 + trial);
    const auto batch = random_batch(1 + trial, 2, 1, 1, rng, 2.0);
    EXPECT_EQ(adversary_loss(agent, batch).value, -protagonist_loss(agent, batch).value);
  }
}

class RisGradients : public ::testing::TestWithParam<int> {};

TEST_P(RisGradients, CriticLossMatchesFiniteDifferences) {
  auto agent = small_agent(200 + GetParam());
  std::mt19937_64 rng(GetParam());
  const auto batch = random_batch(16, 2, 1, 1, rng, 2.0);
  const auto analytic = qh_loss(agent, batch);
  const auto numeric = numerical_gradient([&] { return qh_loss(agent, batch).value; }, agent.critic.params(), 1e-5);
  EXPECT_LT(relative_error(analytic.grad, numeric), 1e-4);
}

TEST_P(RisGradients, ProtagonistLossMatchesFiniteDifferences) {
  auto agent = small_agent(300 + GetParam());
  std::mt19937_64 rng(GetParam());
  const auto batch = random_batch(16, 2, 1, 1, rng, 2.0);
  const auto analytic = protagonist_loss(agent, batch);
  const auto numeric = numerical_gradient([&] { return protagonist_loss(agent, batch).value; },
                                          agent.protagonist.net().params(), 1e-5);
  EXPECT_LT(relative_error(analytic.grad, numeric), 1e-4);
}

TEST_P(RisGradients, AdversaryLossMatchesFiniteDifferences) {
  auto agent = small_agent(400 + GetParam());
  std::mt19937_64 rng(GetParam());
  const auto batch = random_batch(16, 2, 1, 1, rng, 2.0);
  const auto analytic = adversary_loss(agent, batch);
  const auto numeric = numerical_gradient([&] { return adversary_loss(agent, batch).value; },
                                          agent.adversary.net().params(), 1e-5);
  EXPECT_LT(relative_error(analytic.grad, numeric), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(RandomNets, RisGradients, ::testing::Range(0, 5));

TEST(CriticTarget, IsGradientIsolated) {
  auto agent = small_agent(9);
  std::mt19937_64 rng(9);
  const auto batch = random_batch(16, 2, 1, 1, rng, 2.0);
  const auto before = qh_loss(agent, batch);

  // Reference gradient with the targets frozen as constants.
  const auto targets = qh_targets(agent, batch);
  const auto frozen = [&] {
    const net::RowVector q = agent.critic.forward(critic_input(batch.x, batch.u, batch.a));
    return (q - targets).squaredNorm() / static_cast<double>(batch.size());
  };
  EXPECT_LT(relative_error(before.grad, numerical_gradient(frozen, agent.critic.params(), 1e-5)), 1e-4);

  agent.critic_target.params().array() += 0.05;
  const auto shifted = qh_loss(agent, batch);
  EXPECT_NE(shifted.value, before.value);
  EXPECT_EQ(shifted.grad.size(), agent.critic.num_params());
}

TEST(RisUpdate, TargetLagsByTau) {
  auto agent = small_agent(10);
  std::mt19937_64 rng(10);
  for (int step = 0; step < 20; ++step) {
    const Vector prev = agent.critic_target.params();
    ris_update(agent, random_batch(32, 2, 1, 1, rng, 2.0));
    const double moved = (agent.critic_target.params() - prev).cwiseAbs().maxCoeff();
    const double gap = (agent.critic.params() - prev).cwiseAbs().maxCoeff();
    EXPECT_LE(moved, agent.tau * gap + 1e-15);
  }
}

TEST(RisUpdate, ReturnsTheLossesOfThePreUpdateNetworks) {
  auto agent = small_agent(11);
  std::mt19937_64 rng(11);
  const auto batch = random_batch(32, 2, 1, 1, rng, 2.0);
  const double expected = qh_loss(agent, batch).value;
  EXPECT_EQ(ris_update(agent, batch).qh_loss, expected);
}

TEST(RisUpdate, LowersTheCriticLossOnAFixedBatch) {
  auto agent = small_agent(12);
  std::mt19937_64 rng(12);
  const auto batch = random_batch(64, 2, 1, 1, rng, 2.0);
  const double start = qh_loss(agent, batch).value;
  for (int i = 0; i < 200; ++i) ris_update(agent, batch);
  EXPECT_LT(qh_loss(agent, batch).value, start);
}

TEST(Perturb, StaysInBoundsAndIgnoresDegenerateAxes) {
  net::Rng rng(13);
  for (int i = 0; i < 1000; ++i) {
    const auto u = perturb({0.95}, {-1.0}, {1.0}, 0.1, rng);
    EXPECT_LE(u[0], 1.0);
    EXPECT_GE(u[0], -1.0);
  }
  EXPECT_EQ(perturb({0.0}, {0.0}, {0.0}, 0.1, rng), std::vector<double>{0.0});
}

TEST(Streams, AreDistinctAndReproducible) {
  Streams a(5), b(5), c(6);
  EXPECT_EQ(a.init(), b.init());
  Streams d(5);
  EXPECT_NE(d.init(), d.explore());
  EXPECT_NE(Streams(5).init(), c.init());
}

TEST(RisTrain, ZeroStepsLeavesTheInitialization) {
  auto config = small_config();
  config.total_steps = 0;
  config.seed = 21;
  const env::DoubleIntegrator env;
  const auto trained = ris_train(env, config);
  Streams streams(21);
  const auto fresh = make_ris_agent(env.spec(), config, streams.init);
  EXPECT_EQ(trained.critic.params(), fresh.critic.params());
  EXPECT_EQ(trained.critic_target.params(), fresh.critic.params());
  EXPECT_EQ(trained.protagonist.net().params(), fresh.protagonist.net().params());
  EXPECT_EQ(trained.adversary.net().params(), fresh.adversary.net().params());
}

TEST(RisTrain, ShortRunIsDeterministicAndReportsEpochs) {
  auto config = small_config();
  config.total_steps = 600;
  config.warmup_steps = 200;
  config.steps_per_epoch = 200;
  config.batch_size = 16;
  config.seed = 3;
  const env::DoubleIntegrator env;
  std::vector<EpochReport> reports;
  const auto a = ris_train(env, config, [&](const RisAgent&, const EpochReport& r) { reports.push_back(r); });
  const auto b = ris_train(env, config);
  EXPECT_EQ(a.critic.params(), b.critic.params());
  EXPECT_EQ(a.adversary.net().params(), b.adversary.net().params());
  ASSERT_EQ(reports.size(), 3u);
  EXPECT_EQ(reports[2].step, 600u);
  EXPECT_EQ(reports[2].epoch, 3u);
  EXPECT_EQ(reports[0].qh_loss, 0.0);  // warm-up only
  EXPECT_GT(reports[1].qh_loss, 0.0);
}

TEST(RisTrain, DivergenceIsReported) {
  auto config = small_config();
  config.total_steps = 400;
  config.warmup_steps = 100;
  config.batch_size = 8;
  config.divergence_threshold = 1e-12;
  EXPECT_THROW(ris_train(env::DoubleIntegrator(), config), DivergenceError);
}

TEST(Checkpoint, RoundTripsEveryParameterAndMoment) {
  auto agent = small_agent(14);
  std::mt19937_64 rng(14);
  for (int i = 0; i < 3; ++i) ris_update(agent, random_batch(16, 2, 1, 1, rng));
  std::stringstream ss;
  save_ris(ss, agent);
  const auto back = load_ris(ss);
  EXPECT_EQ(back.gamma_h, agent.gamma_h);
  EXPECT_EQ(back.tau, agent.tau);
  EXPECT_EQ(back.critic.params(), agent.critic.params());
  EXPECT_EQ(back.critic_target.params(), agent.critic_target.params());
  EXPECT_EQ(back.protagonist.net().params(), agent.protagonist.net().params());
  EXPECT_EQ(back.adversary.half_range(), agent.adversary.half_range());
  EXPECT_EQ(back.critic_opt.second_moment(), agent.critic_opt.second_moment());
  EXPECT_EQ(back.adversary_opt.steps(), 3);

  std::stringstream again;
  save_ris(again, back);
  EXPECT_EQ(again.str(), ss.str());
}

TEST(Checkpoint, RejectsForeignHeaders) {
  std::istringstream in("robustsafe-sacris 1\n");
  EXPECT_THROW(load_ris(in), std::runtime_error);
}

TEST(SafetyValue, GridEvaluationMatchesDirectEvaluation) {
  const auto agent = small_agent(15);
  const grid::StateGrid g({-2.0, -2.0}, {2.0, 2.0}, {70, 70});  // spans more than one chunk
  const auto values = safety_value_on_grid(agent, g);
  for (std::size_t i : {std::size_t{0}, std::size_t{4095}, std::size_t{4096}, g.size() - 1}) {
    const auto c = g.coordinates(i);
    Matrix x(2, 1);
    x << c[0], c[1];
    EXPECT_DOUBLE_EQ(values[i], safety_value(agent, x)[0]);
  }
}

}  // namespace
}  // namespace robustsafe::ris
