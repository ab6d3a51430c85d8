#include <gtest/gtest.h>

#include "kflow/cfm.hpp"
#include "oracles.hpp"

using namespace kflow;

namespace {

VelocityField linear_decay() {
  return [](const Tensor& x, const Tensor&) { return scale(x, -1.0); };
}

VelocityField constant_field(double a, double b) {
  return [a, b](const Tensor& x, const Tensor&) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      out(i, 0) = a;
      out(i, 1) = b;
    }
    return out;
  };
}

}  // namespace

TEST(PathSample, EndpointsWithoutNoise) {
  const ConditionalPath p{PathKind::OT, 0.0};
  const Tensor x0 = oracle::random_tensor({5, 2}, 1), x1 = oracle::random_tensor({5, 2}, 2);
  Rng rng(0);
  EXPECT_EQ(path_sample(p, x0, x1, Tensor({5}, 0.0), rng).xt, x0);
  EXPECT_EQ(path_sample(p, x0, x1, Tensor({5}, 1.0), rng).xt, x1);
}

TEST(PathSample, Midpoint) {
  Rng rng(0);
  const PathBatch b = path_sample(ConditionalPath{PathKind::Gaussian, 0.0}, Tensor::matrix(1, 2, {0, 0}),
                                  Tensor::matrix(1, 2, {2, 4}), Tensor::vector({0.5}), rng);
  EXPECT_EQ(b.xt, Tensor::matrix(1, 2, {1, 2}));
  EXPECT_EQ(b.ut, Tensor::matrix(1, 2, {2, 4}));
}

TEST(PathSample, NoiseLevel) {
  const std::size_t n = 100000;
  const Tensor x0 = oracle::random_tensor({n, 2}, 3), x1 = oracle::random_tensor({n, 2}, 4);
  Tensor t({n});
  Rng trng(5);
  for (auto& v : t.storage()) v = trng.uniform();
  Rng rng(6);
  const PathBatch b = path_sample(ConditionalPath{PathKind::Gaussian, 0.1}, x0, x1, t, rng);
  double ss = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 2; ++c) {
      const double d = b.xt(i, c) - (t[i] * x1(i, c) + (1 - t[i]) * x0(i, c));
      ss += d * d;
    }
  EXPECT_NEAR(std::sqrt(ss / (2.0 * n)), 0.1, 0.002);
}

TEST(PathSample, StraightSegmentsWhenNoiseless) {
  Rng rng(1);
  const PathBatch b = draw_cfm_batch(ConditionalPath{PathKind::OT, 0.0}, Distribution2D::standard(DistKind::Gauss),
                                     Distribution2D::standard(DistKind::EightGauss), 64, rng);
  for (std::size_t i = 0; i < 64; ++i) {
    // x_t - x0 = t u_t, so x_t lies on the segment direction u_t through x0.
    const double x0x = b.xt(i, 0) - b.t[i] * b.ut(i, 0), x0y = b.xt(i, 1) - b.t[i] * b.ut(i, 1);
    const double cross = (b.xt(i, 0) - x0x) * b.ut(i, 1) - (b.xt(i, 1) - x0y) * b.ut(i, 0);
    EXPECT_LE(std::abs(cross), 1e-12);
  }
}

TEST(PathSample, TimeOutOfRange) {
  Rng rng(0);
  EXPECT_THROW(path_sample(ConditionalPath{}, Tensor({1, 2}), Tensor({1, 2}), Tensor::vector({1.5}), rng),
               ContractViolation);
}

TEST(CfmLoss, ZeroNetworkConstantTarget) {
  VectorFieldModel m = VectorFieldModel::initialized(MlpSpec{3, 8, 2, 2}, 1);
  for (auto& p : m.params) p = Tensor(p.shape());
  PathBatch b{oracle::random_tensor({10, 2}, 1), Tensor({10}, 0.3), Tensor({10, 2})};
  for (std::size_t i = 0; i < 10; ++i) {
    b.ut(i, 0) = 2;
    b.ut(i, 1) = 4;
  }
  EXPECT_DOUBLE_EQ(cfm_loss(m, b), 20.0);
}

TEST(CfmLoss, PerfectRegressorAndNonNegative) {
  const VectorFieldModel m = VectorFieldModel::initialized(MlpSpec{3, 8, 2, 2}, 2);
  PathBatch b{oracle::random_tensor({10, 2}, 1), Tensor({10}, 0.7), Tensor()};
  b.ut = m.velocity(b.xt, b.t);
  EXPECT_EQ(cfm_loss(m, b), 0.0);
  b.ut = oracle::random_tensor({10, 2}, 2);
  EXPECT_GT(cfm_loss(m, b), 0.0);
}

TEST(CfmLoss, GradientMatchesFiniteDifferences) {
  VectorFieldModel m = VectorFieldModel::initialized(MlpSpec{3, 16, 2, 2}, 3);
  Rng rng(4);
  const PathBatch b = draw_cfm_batch(ConditionalPath::standard(PathKind::OT), Distribution2D::standard(DistKind::Gauss),
                                     Distribution2D::standard(DistKind::EightGauss), 32, rng);
  double loss = 0;
  const auto g = cfm_loss_grad(m, b, &loss);
  EXPECT_DOUBLE_EQ(loss, cfm_loss(m, b));
  auto value = [&](const std::vector<Tensor>& p) {
    VectorFieldModel q{m.spec, p};
    return cfm_loss(q, b);
  };
  std::size_t checked = 0;
  EXPECT_LE(oracle::max_fd_grad_error(value, m.params, g, 96, 5, 1e-5, &checked), 1e-4);
  EXPECT_GE(checked, 64u);
}

TEST(TrainCfm, SingleStepSmoke) {
  CfmTrainConfig cfg;
  cfg.steps = 1;
  cfg.batch = 16;
  const VectorFieldModel m = train_cfm(cfg);
  for (const auto& p : m.params) EXPECT_TRUE(p.all_finite());
  EXPECT_EQ(train_cfm(cfg).params, m.params);
}

TEST(Integrate, ZeroAndConstantFields) {
  const Tensor x0 = oracle::random_tensor({4, 2}, 1);
  const Tensor s = integrate(constant_field(0, 0), x0, 10, Integrator::RK4);
  EXPECT_EQ(s.shape(), (Shape{4, 11, 2}));
  EXPECT_EQ(states_at(s, 7), x0);
  for (Integrator m : {Integrator::Euler, Integrator::RK4}) {
    const Tensor end = endpoints(integrate(constant_field(1, 0), x0, 10, m));
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_NEAR(end(i, 0), x0(i, 0) + 1, 1e-14);
      EXPECT_NEAR(end(i, 1), x0(i, 1), 1e-14);
    }
  }
}

TEST(Integrate, Rk4OnLinearDecay) {
  const Tensor x0 = oracle::random_tensor({8, 2}, 2, 3.0);
  const Tensor end = endpoints(integrate(linear_decay(), x0, 100, Integrator::RK4));
  EXPECT_LE(max_abs_diff(end, scale(x0, std::exp(-1.0))), 1e-8);
}

TEST(Integrate, NonFiniteStateReportsStep) {
  VelocityField blowup = [](const Tensor& x, const Tensor& t) {
    return t[0] > 0.25 ? Tensor(x.shape(), INFINITY) : Tensor(x.shape());
  };
  try {
    integrate(blowup, Tensor({2, 2}), 10, Integrator::Euler);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step 4"), std::string::npos) << e.what();
  }
  EXPECT_THROW(integrate(linear_decay(), Tensor({2, 2}), 0, Integrator::Euler), ContractViolation);
}

TEST(Trajectories, ShapesAndDefinitions) {
  const VectorFieldModel m = VectorFieldModel::initialized(MlpSpec{3, 8, 2, 2}, 7);
  const auto prior = Distribution2D::standard(DistKind::Gauss);
  const TrajectorySet one = generate_trajectories(m, prior, 1, 3);
  EXPECT_EQ(one.states.shape(), (Shape{1, 101, 2}));
  EXPECT_EQ(one.times.shape(), (Shape{101}));
  EXPECT_EQ(one.velocities.shape(), (Shape{1, 101, 2}));
  EXPECT_EQ(one.terminals.shape(), (Shape{1, 2}));

  const TrajectorySet set = generate_trajectories(m, prior, 9, 3);
  for (std::size_t k = 0; k <= 100; k += 10) {
    EXPECT_EQ(set.times[k], static_cast<double>(k) / 100.0);
    const Tensor v = m.velocity(states_at(set.states, k), Tensor({9}, set.times[k]));
    EXPECT_EQ(v, states_at(set.velocities, k));
  }
  EXPECT_EQ(set.terminals, states_at(set.states, 100));
  EXPECT_EQ(set.terminals, endpoints(integrate(m, sample(prior, 9, 3), 100, Integrator::RK4)));
}

TEST(Trajectories, IndependentOfChunking) {
  const VectorFieldModel m = VectorFieldModel::initialized(MlpSpec{3, 8, 2, 2}, 8);
  const auto prior = Distribution2D::standard(DistKind::Gauss);
  const TrajectorySet big = generate_trajectories(m, prior, 600, 4);
  const Tensor x0 = sample(prior, 600, 4);
  const Tensor last = endpoints(integrate(m, slice_rows(x0, 550, 600), 100, Integrator::RK4));
  EXPECT_EQ(last, slice_rows(big.terminals, 550, 600));
}
