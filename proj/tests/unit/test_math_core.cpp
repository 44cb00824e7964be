#include <gtest/gtest.h>

#include <cmath>

#include "nllpo/matrix.hpp"
#include "nllpo/spd.hpp"
#include "support.hpp"

using namespace nllpo;
using nllpo::testing::random_spd;

TEST(Cholesky, IdentityAndDiagonal) {
  EXPECT_EQ(cholesky(Matrix::identity(2)).factor(), Matrix::identity(2));
  const SpdMatrix d = cholesky(Matrix::from_rows({{4, 0}, {0, 9}}));
  EXPECT_EQ(d.factor(), Matrix::from_rows({{2, 0}, {0, 3}}));
}

TEST(Cholesky, ReconstructsInput) {
  const Matrix m = Matrix::from_rows({{2, 1}, {1, 2}});
  const SpdMatrix s = cholesky(m);
  const Matrix back = matmul(s.factor(), transpose(s.factor()));
  EXPECT_LT(max_abs_diff(back, m), 1e-12);
}

TEST(Cholesky, RejectsIndefiniteAndAsymmetric) {
  try {
    cholesky(Matrix::from_rows({{1, 2}, {2, 1}}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNotPositiveDefinite);
  }
  try {
    cholesky(Matrix::from_rows({{1, 0.5}, {0.4, 1}}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNotSymmetric);
  }
  // tiny asymmetry below the tolerance is symmetrised away
  EXPECT_NO_THROW(cholesky(Matrix::from_rows({{2, 1 + 1e-12}, {1, 2}})));
}

TEST(SpdInverse, Examples) {
  EXPECT_LT(max_abs_diff(spd_inverse(SpdMatrix::identity(3)).matrix(), Matrix::identity(3)), 1e-15);
  const Vector d{2, 4};
  EXPECT_LT(max_abs_diff(spd_inverse(SpdMatrix::diagonal(d)).matrix(), Matrix::from_rows({{0.5, 0}, {0, 0.25}})),
            1e-15);
  const SpdMatrix m = cholesky(Matrix::from_rows({{2, 1}, {1, 2}}));
  EXPECT_LT(max_abs_diff(matmul(m.matrix(), spd_inverse(m).matrix()), Matrix::identity(2)), 1e-8);
}

TEST(SpdInverse, RandomProductIsIdentity) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + trial % 6;
    const SpdMatrix m = random_spd(n, rng);
    EXPECT_LT(max_abs_diff(matmul(spd_inverse(m).matrix(), m.matrix()), Matrix::identity(n)), 1e-8);
  }
}

TEST(SpdInverse, CholeskyRoundTrip) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const SpdMatrix m = random_spd(4, rng);
    const SpdMatrix inv = spd_inverse(m);
    const SpdMatrix again = cholesky(inv.matrix());
    EXPECT_LT(max_abs_diff(again.factor(), inv.factor()), 1e-7);
    EXPECT_LT(max_abs_diff(spd_inverse(again).matrix(), m.matrix()), 1e-7);
  }
}

TEST(LogDet, Examples) {
  EXPECT_DOUBLE_EQ(log_det(SpdMatrix::identity(3)), 0.0);
  const Vector e{std::exp(1.0), std::exp(1.0)};
  EXPECT_NEAR(log_det(SpdMatrix::diagonal(e)), 2.0, 1e-14);
  EXPECT_NEAR(log_det(cholesky(Matrix::from_rows({{2, 1}, {1, 2}}))), std::log(3.0), 1e-14);
}

TEST(LogDet, MatchesCofactorExpansion) {
  Rng rng(9);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + trial % 4;
    const SpdMatrix m = random_spd(n, rng);
    EXPECT_NEAR(log_det(m), std::log(cofactor_det(m.matrix())), 1e-9);
  }
}

TEST(QuadraticForm, Examples) {
  const Vector d{3, 4};
  EXPECT_DOUBLE_EQ(quadratic_form(SpdMatrix::identity(2), d), 25.0);
  const Vector zero{0, 0};
  Rng rng(1);
  EXPECT_EQ(quadratic_form(random_spd(2, rng), zero), 0.0);
  const Vector u{2, 1};
  const Vector ones{1, 1};
  EXPECT_DOUBLE_EQ(quadratic_form(SpdMatrix::diagonal(u), ones), 3.0);
  try {
    const Vector three{1, 2, 3};
    quadratic_form(SpdMatrix::identity(2), three);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDimensionMismatch);
  }
}

TEST(QuadraticForm, PositiveForNonzero) {
  Rng rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 5;
    const SpdMatrix m = random_spd(n, rng, 1e-3);
    const Vector d = nllpo::testing::random_vector(n, rng);
    const double q = quadratic_form(m, d);
    EXPECT_GT(q, 0.0);
    // against the explicit dᵀMd
    const Vector md = matvec(m.matrix(), d);
    EXPECT_NEAR(q, dot(d, md), 1e-10 * (1 + std::abs(q)));
  }
}

TEST(Trace, Examples) {
  EXPECT_EQ(trace(Matrix::identity(3)), 3.0);
  EXPECT_EQ(trace(Matrix::from_rows({{1, 0, 0}, {0, 2, 0}, {0, 0, 3}})), 6.0);
  EXPECT_EQ(trace(Matrix::from_rows({{2, 5}, {7, 3}})), 5.0);
  try {
    trace(Matrix(2, 3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNotSquare);
  }
}

TEST(SpdMatrix, FactorValidation) {
  EXPECT_THROW(SpdMatrix::from_factor(Matrix::from_rows({{1, 1}, {0, 1}})), Error);
  EXPECT_THROW(SpdMatrix::from_factor(Matrix::from_rows({{-1, 0}, {0, 1}})), Error);
  const SpdMatrix s = SpdMatrix::from_factor(Matrix::from_rows({{1, 0}, {2, 3}}));
  EXPECT_EQ(s.matrix(), Matrix::from_rows({{1, 2}, {2, 13}}));
  EXPECT_LT(asymmetry(s.matrix()), 1e-10);
}

TEST(Matrix, BasicOps) {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  const Matrix b = Matrix::from_rows({{0, 1}, {1, 0}});
  EXPECT_EQ(matmul(a, b), Matrix::from_rows({{2, 1}, {4, 3}}));
  EXPECT_EQ(transpose(a), Matrix::from_rows({{1, 3}, {2, 4}}));
  EXPECT_EQ(add(a, b), Matrix::from_rows({{1, 3}, {4, 4}}));
  EXPECT_THROW(matmul(a, Matrix(3, 1)), Error);
  EXPECT_THROW(Matrix(2, 2, Vector{1, 2, 3}), Error);
  EXPECT_NEAR(cofactor_det(a), -2.0, 1e-15);
}
