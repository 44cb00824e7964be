#include <gtest/gtest.h>

#include <cmath>

#include "nllpo/autodiff.hpp"
#include "nllpo/closed_form.hpp"
#include "support.hpp"

using namespace nllpo;
using nllpo::testing::random_spd;

TEST(OptimalReward, Examples) {
  EXPECT_LT(max_abs_diff(optimal_reward(SpdMatrix::identity(2), 2.0).matrix(), Matrix::identity(2)), 1e-15);
  const SpdMatrix s = SpdMatrix::scaled_identity(2, 4.0);
  EXPECT_LT(max_abs_diff(optimal_reward(s, 1.0).matrix(), scale(Matrix::identity(2), 0.125)), 1e-15);
  Rng rng(1);
  const SpdMatrix sigma = random_spd(3, rng);
  const SpdMatrix u = optimal_reward(sigma, 1.5);
  // (2/λ)·U* is Σ⁻¹
  EXPECT_LT(max_abs_diff(matmul(scale(u.matrix(), 2.0 / 1.5), sigma.matrix()), Matrix::identity(3)), 1e-10);
  EXPECT_THROW(optimal_reward(sigma, 0.0), Error);
}

TEST(IsotropicReward, Examples) {
  const Vector d{1.0, 3.0};
  EXPECT_NEAR(isotropic_reward(SpdMatrix::diagonal(d), 1.0), 0.25, 1e-15);
  const double beta = 0.7, lambda = 1.3;
  const SpdMatrix s = SpdMatrix::scaled_identity(3, beta * beta);
  const double u = isotropic_reward(s, lambda);
  EXPECT_NEAR(u, lambda / (2 * beta * beta), 1e-14);
  EXPECT_LT(max_abs_diff(scale(Matrix::identity(3), u), optimal_reward(s, lambda).matrix()), 1e-12);
  Rng rng(2);
  const SpdMatrix sig = random_spd(4, rng);
  EXPECT_NEAR(trace(scale(Matrix::identity(4), isotropic_reward(sig, lambda))),
              lambda * 16 / (2 * trace(sig.matrix())), 1e-12);
}

TEST(InnerSolution, Examples) {
  Rng rng(3);
  const LinearGaussianTruth t{rng.normal_matrix(2, 3), random_spd(2, rng)};
  const InnerSolution a = inner_solution(SpdMatrix::identity(2), t, 2.0);
  EXPECT_EQ(a.a_star, t.lambda);
  EXPECT_LT(max_abs_diff(a.b_star.matrix(), Matrix::identity(2)), 1e-15);
  EXPECT_THROW(inner_solution(SpdMatrix::identity(3), t, 1.0), Error);
}

TEST(InnerSolution, MomentMatchingAtOptimalReward) {
  Rng rng(4);
  for (int k = 0; k < 30; ++k) {
    const std::size_t n = 1 + k % 4;
    const LinearGaussianTruth t{rng.normal_matrix(n, 2), random_spd(n, rng)};
    for (double lambda : {0.5, 1.0, 2.0}) {
      const InnerSolution s = inner_solution(optimal_reward(t.sigma, lambda), t, lambda);
      EXPECT_LT(max_abs_diff(s.b_star.matrix(), t.sigma.matrix()), 1e-8);
    }
  }
}

TEST(InnerSolution, IsStationaryForClosedFormJ) {
  Rng rng(5);
  for (int k = 0; k < 10; ++k) {
    const std::size_t n = 1 + k % 3, m = 2;
    const LinearGaussianTruth t{rng.normal_matrix(n, m), random_spd(n, rng)};
    const SpdMatrix u = random_spd(n, rng);
    const SpdMatrix sx = random_spd(m, rng);
    const double lambda = 0.5 + 0.25 * k;
    const InnerSolution s = inner_solution(u, t, lambda);
    auto j = [&](auto& tape, Var theta) { return closed_form_J_tape(tape, theta, t, u, lambda, sx); };
    const Vector theta = pack_linear_gaussian(s.a_star, s.b_star);
    const ValueAndGradient vg = value_and_gradient(j, theta);
    EXPECT_LT(norm(vg.gradient), 1e-6);
    EXPECT_NEAR(vg.value, closed_form_J(s.a_star, s.b_star, t, u, lambda, sx), 1e-10);
  }
}

TEST(InnerSolution, StrictOptimality) {
  Rng rng(6);
  const std::size_t n = 3, m = 2;
  const LinearGaussianTruth t{rng.normal_matrix(n, m), random_spd(n, rng)};
  const SpdMatrix u = random_spd(n, rng);
  const SpdMatrix sx = random_spd(m, rng);
  const double lambda = 1.0;
  const InnerSolution s = inner_solution(u, t, lambda);
  const Vector best = pack_linear_gaussian(s.a_star, s.b_star);
  const double jbest = closed_form_J(s.a_star, s.b_star, t, u, lambda, sx);
  for (int k = 0; k < 1000; ++k) {
    Vector theta = best;
    const double scale_k = std::pow(10.0, -3.0 + 3.0 * (k % 4) / 3.0);
    for (double& v : theta) v += scale_k * rng.normal();
    auto [a, b] = unpack_linear_gaussian(theta, n, m);
    EXPECT_LT(closed_form_J(a, b, t, u, lambda, sx), jbest);
  }
}

TEST(VerifyFamily, Examples) {
  Rng rng(7);
  const SpdMatrix sigma = random_spd(3, rng);
  const double lambda = 1.2;
  const double u = isotropic_reward(sigma, lambda);
  EXPECT_TRUE(verify_family(SpdMatrix::scaled_identity(3, u), sigma, lambda, 1e-9));
  EXPECT_FALSE(verify_family(SpdMatrix::scaled_identity(3, 2 * u), sigma, lambda, 1e-9));
  // trace-preserving diagonal perturbation stays in the family
  const Vector d{u * 1.5, u * 0.75, u * 0.75};
  EXPECT_TRUE(verify_family(SpdMatrix::diagonal(d), sigma, lambda, 1e-9));
}

TEST(OuterNll, MinimisedAtOptimalRewardOverGrid) {
  Rng rng(8);
  for (int k = 0; k < 10; ++k) {
    const std::size_t n = 1 + k % 3;
    const SpdMatrix sigma = random_spd(n, rng);
    const double lambda = 0.5 * (1 + k % 3);
    const SpdMatrix ustar = optimal_reward(sigma, lambda);
    const double best = outer_nll_at_inner_solution(ustar, sigma, lambda);
    // at U*, the model covariance is Σ, so the NLL is the entropy of q
    EXPECT_NEAR(best, 0.5 * (n * kLog2PiE + log_det(sigma)), 1e-10);
    for (double s : {0.5, 0.8, 0.95, 1.05, 1.25, 2.0}) {
      EXPECT_GT(outer_nll_at_inner_solution(ustar.scaled(s), sigma, lambda), best);
    }
    for (int j = 0; j < 50; ++j) {
      const Matrix pert = scale(random_spd(n, rng, 0.0).matrix(), 0.05);
      const SpdMatrix cand = cholesky(add(ustar.matrix(), matmul(matmul(ustar.matrix(), pert), ustar.matrix())));
      EXPECT_GT(outer_nll_at_inner_solution(cand, sigma, lambda), best);
    }
  }
}

TEST(OuterNll, TapeMatchesDirect) {
  Rng rng(9);
  const SpdMatrix sigma = random_spd(3, rng);
  const SpdMatrix u = random_spd(3, rng);
  auto f = [&](auto& t, Var raw) { return outer_nll_tape(t, raw, sigma, 0.8); };
  EXPECT_NEAR(nllpo::testing::loss_value(f, pack_log_cholesky(u)), outer_nll_at_inner_solution(u, sigma, 0.8),
              1e-10);
}

TEST(ReverseKlEquivalence, GradientOfJIsMinusLambdaGradientOfKl) {
  Rng rng(10);
  for (int k = 0; k < 10; ++k) {
    const std::size_t n = 1 + k % 3, m = 2;
    const LinearGaussianTruth t{rng.normal_matrix(n, m), random_spd(n, rng)};
    const SpdMatrix sx = random_spd(m, rng);
    const double lambda = 0.5 + 0.3 * k;
    const SpdMatrix ustar = optimal_reward(t.sigma, lambda);
    auto j = [&](auto& tape, Var th) { return closed_form_J_tape(tape, th, t, ustar, lambda, sx); };
    auto kl = [&](auto& tape, Var th) { return expected_reverse_kl_tape(tape, th, t, sx); };
    double offset = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
      const Vector theta = pack_linear_gaussian(rng.normal_matrix(n, m), random_spd(n, rng));
      const ValueAndGradient gj = value_and_gradient(j, theta);
      const ValueAndGradient gk = value_and_gradient(kl, theta);
      for (std::size_t i = 0; i < theta.size(); ++i) {
        EXPECT_NEAR(gj.gradient[i], -lambda * gk.gradient[i], 1e-6 * (1 + std::abs(gj.gradient[i])));
      }
      // J + λ·E[KL] is a θ-independent constant
      const double c = gj.value + lambda * gk.value;
      if (trial == 0) offset = c;
      EXPECT_NEAR(c, offset, 1e-8 * (1 + std::abs(offset)));
      auto [a, b] = unpack_linear_gaussian(theta, n, m);
      EXPECT_NEAR(gk.value, expected_reverse_kl(a, b, t, sx), 1e-10);
    }
  }
}

TEST(NumericRecovery, GradientAscentFindsInnerSolution) {
  Rng rng(11);
  for (std::size_t n : {1u, 2u, 4u}) {
    const std::size_t m = 3;
    const LinearGaussianTruth t{rng.normal_matrix(n, m), random_spd(n, rng)};
    const SpdMatrix u = random_spd(n, rng);
    const SpdMatrix sx = random_spd(m, rng);
    const InnerAscentResult r = maximize_closed_form_J(t, u, 1.0, sx);
    const InnerSolution s = inner_solution(u, t, 1.0);
    EXPECT_TRUE(r.converged);
    EXPECT_LT(max_abs_diff(r.a, s.a_star), 1e-4);
    EXPECT_LT(max_abs_diff(r.b.matrix(), s.b_star.matrix()), 1e-3);
  }
}

TEST(NumericRecovery, OuterDescentFindsOptimalReward) {
  Rng rng(12);
  for (std::size_t n : {1u, 2u, 4u}) {
    const SpdMatrix sigma = random_spd(n, rng);
    const OuterDescentResult r = minimize_outer_nll(sigma, 2.0);
    const SpdMatrix ustar = optimal_reward(sigma, 2.0);
    EXPECT_TRUE(r.converged);
    EXPECT_LT(frobenius_norm(sub(r.u.matrix(), ustar.matrix())) / frobenius_norm(ustar.matrix()), 1e-6);
  }
}

TEST(LogCholesky, RoundTrip) {
  Rng rng(13);
  const SpdMatrix m = random_spd(4, rng);
  EXPECT_LT(max_abs_diff(unpack_log_cholesky(pack_log_cholesky(m), 4).matrix(), m.matrix()), 1e-12);
}
