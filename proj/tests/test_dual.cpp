#include <gtest/gtest.h>

#include "kflow/dual.hpp"
#include "kflow/nn.hpp"
#include "oracles.hpp"

using namespace kflow;

TEST(Jvp, Identity) {
  const Tensor out = jvp([](const DualTensor& d) { return d; }, Tensor::matrix(1, 2, {0.3, -1}),
                         Tensor::matrix(1, 2, {1, 2}));
  EXPECT_EQ(out, Tensor::matrix(1, 2, {1, 2}));
}

TEST(Jvp, AnalyticJacobian) {
  // f(x) = (x1^2, x1 x2)
  auto f = [](const DualTensor& d) {
    const DualTensor x1 = slice_cols(d, 0, 1), x2 = slice_cols(d, 1, 2);
    const DualTensor parts[] = {square(x1), mul(x1, x2)};
    return concat_cols(std::span<const DualTensor>(parts));
  };
  const Tensor out = jvp(f, Tensor::matrix(1, 2, {3, 4}), Tensor::matrix(1, 2, {1, 0}));
  EXPECT_EQ(out, Tensor::matrix(1, 2, {6, 4}));
}

TEST(Jvp, MlpMatchesFiniteDifferences) {
  const MlpSpec spec{3, 16, 3, 5};
  const ParamList params = init_params(spec, 11);
  const Tensor x = oracle::random_tensor({6, 3}, 1), v = oracle::random_tensor({6, 3}, 2);
  const Tensor fwd = jvp(
      [&](const DualTensor& d) { return mlp_forward<DualTensor, Tensor>(spec, std::span<const Tensor>(params), d); }, x,
      v);
  const Tensor fd = jvp_fd([&](const Tensor& t) { return mlp_forward(spec, params, t); }, x, v);
  for (std::size_t i = 0; i < fwd.size(); ++i) EXPECT_LE(oracle::rel_err(fwd[i], fd[i], 1e-6), 1e-4);
}

TEST(Jvp, LinearInDirection) {
  const MlpSpec spec{3, 8, 2, 4};
  const ParamList params = init_params(spec, 3);
  auto f = [&](const DualTensor& d) {
    return mlp_forward<DualTensor, Tensor>(spec, std::span<const Tensor>(params), d);
  };
  const Tensor x = oracle::random_tensor({4, 3}, 5), u = oracle::random_tensor({4, 3}, 6),
               w = oracle::random_tensor({4, 3}, 7);
  const double alpha = 0.7, beta = -1.3;
  const Tensor lhs = jvp(f, x, add(scale(u, alpha), scale(w, beta)));
  const Tensor rhs = add(scale(jvp(f, x, u), alpha), scale(jvp(f, x, w), beta));
  EXPECT_LE(max_abs_diff(lhs, rhs), 1e-12);
}

TEST(Jvp, ShapeMismatchIsContractViolation) {
  EXPECT_THROW(jvp([](const DualTensor& d) { return d; }, Tensor({1, 2}), Tensor({1, 3})), ContractViolation);
}
