#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "support.hpp"
#include "tei/consistency.hpp"

using namespace tei;
using tei::testing::gaussian;

namespace {

Matrix m2(double a, double b, double c, double d) {
  Matrix m(2, 2);
  m << a, b, c, d;
  return m;
}

// Loop-based cosine and inter loss, written without Eigen expressions.
double cos_loop(const Matrix& e, int i, int j) {
  double dot = 0, ni = 0, nj = 0;
  for (int k = 0; k < e.cols(); ++k) {
    dot += e(i, k) * e(j, k);
    ni += e(i, k) * e(i, k);
    nj += e(j, k) * e(j, k);
  }
  return dot / (std::sqrt(ni) * std::sqrt(nj));
}

double inter_loop(const Matrix& p, const Matrix& s) {
  const int n = static_cast<int>(p.rows());
  double acc = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) acc += std::pow(cos_loop(p, i, j) - cos_loop(s, i, j), 2);
  return acc / (n * n);
}

}  // namespace

TEST(PairwiseCosine, HandCases) {
  EXPECT_TRUE(pairwise_cosine(m2(1, 0, 0, 1)).isApprox(Matrix::Identity(2, 2)));
  EXPECT_TRUE(pairwise_cosine(m2(2, 0, 0, 3)).isApprox(Matrix::Identity(2, 2)));
  Matrix q = pairwise_cosine(m2(1, 0, 1, 1));
  EXPECT_NEAR(q(0, 1), 0.7071067, 1e-7);
  EXPECT_NEAR(q(1, 0), 0.7071067, 1e-7);
  EXPECT_NEAR(q(0, 0), 1.0, 1e-12);
}

TEST(PairwiseCosine, ZeroRowReportsIndex) {
  Matrix e = gaussian(4, 3, 1);
  e.row(2).setZero();
  try {
    pairwise_cosine(e);
    FAIL();
  } catch (const DegenerateInputError& err) {
    EXPECT_EQ(err.row(), 2);
  }
}

TEST(PairwiseCosine, StructuralInvariants) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Matrix q = pairwise_cosine(gaussian(7, 5, seed));
    EXPECT_LT((q - q.transpose()).cwiseAbs().maxCoeff(), 1e-9);
    for (int i = 0; i < 7; ++i) EXPECT_NEAR(q(i, i), 1.0, 1e-9);
    EXPECT_LE(q.maxCoeff(), 1 + 1e-9);
    EXPECT_GE(q.minCoeff(), -1 - 1e-9);
  }
}

TEST(IntraLoss, HandCases) {
  Matrix p = gaussian(3, 4, 2);
  EXPECT_EQ(intra_loss(p, p), 0.0);
  EXPECT_DOUBLE_EQ(intra_loss(m2(1, 0, 0, 1), Matrix::Zero(2, 2)), 0.5);
  EXPECT_DOUBLE_EQ(intra_loss(Matrix::Constant(1, 1, 2), Matrix::Constant(1, 1, -1)), 9.0);
  EXPECT_THROW(intra_loss(Matrix::Zero(2, 3), Matrix::Zero(2, 4)), DimensionError);
}

TEST(InterLoss, HandCases) {
  Matrix p = gaussian(4, 3, 3);
  EXPECT_NEAR(inter_loss(p, 2.0 * p), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(inter_loss(m2(1, 0, 0, 1), m2(1, 0, 1, 0)), 0.5);
  EXPECT_NEAR(inter_loss(gaussian(1, 3, 4), gaussian(1, 5, 5)), 0.0, 1e-15);
}

TEST(InterLoss, WidthsMayDifferRowsMayNot) {
  EXPECT_NO_THROW(inter_loss(gaussian(3, 4, 1), gaussian(3, 7, 2)));
  EXPECT_THROW(inter_loss(gaussian(3, 4, 1), gaussian(2, 4, 2)), DimensionError);
}

TEST(InterLoss, MatchesLoopOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Matrix p = gaussian(8, 16, seed), s = gaussian(8, 16, seed + 100);
    const double want = inter_loop(p, s);
    EXPECT_NEAR(inter_loss(p, s), want, 1e-6 * std::abs(want));
  }
}

TEST(ConsistencyLoss, TotalIsSum) {
  Matrix p = gaussian(5, 4, 1), s = gaussian(5, 4, 2);
  auto v = consistency_loss(p, s);
  EXPECT_EQ(v.total, v.intra + v.inter);
}

TEST(ConsistencyLoss, Symmetry) {
  Matrix a = gaussian(6, 4, 7), b = gaussian(6, 4, 8);
  EXPECT_DOUBLE_EQ(intra_loss(a, b), intra_loss(b, a));
  EXPECT_NEAR(inter_loss(a, b), inter_loss(b, a), 1e-15);
}

TEST(ConsistencyLoss, ScaleAndPermutationInvariance) {
  Matrix p = gaussian(6, 5, 11), s = gaussian(6, 5, 12);
  const double base = inter_loss(p, s);
  for (double c : {0.1, 1.0, 7.3}) EXPECT_NEAR(inter_loss(p, c * s), base, 1e-9);
  std::vector<int> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[1], perm[4]);
  Matrix pp(6, 5), sp(6, 5);
  for (int i = 0; i < 6; ++i) {
    pp.row(i) = p.row(perm[i]);
    sp.row(i) = s.row(perm[i]);
  }
  EXPECT_NEAR(inter_loss(pp, sp), base, 1e-12);
}

TEST(ConsistencyGrad, IntraZeroAtMinimum) {
  Matrix p = gaussian(3, 4, 1);
  EXPECT_EQ(intra_grad(p, p), Matrix::Zero(3, 4));
}

TEST(ConsistencyGrad, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Matrix p = gaussian(3 + seed % 6, 4 + seed % 9, seed), s = gaussian(3 + seed % 6, 4 + seed % 9, seed + 50);
    auto g = consistency_grad(p, s);
    auto num_intra = tei::testing::numeric_gradient([&](const Matrix& x) { return intra_loss(p, x); }, s);
    auto num_inter = tei::testing::numeric_gradient([&](const Matrix& x) { return inter_loss(p, x); }, s);
    EXPECT_LT(tei::testing::max_relative_error(g.intra, num_intra, 1e-6), 1e-4) << "seed " << seed;
    EXPECT_LT(tei::testing::max_relative_error(g.inter, num_inter, 1e-6), 1e-4) << "seed " << seed;
    EXPECT_TRUE(g.total.isApprox(g.intra + g.inter));
  }
}

TEST(ConsistencyGrad, InterGradientOrthogonalToRows) {
  Matrix p = gaussian(5, 4, 21), s = gaussian(5, 4, 22);
  s.row(1) *= 3.0;
  s.row(3) *= 0.2;
  Matrix g = inter_grad(p, s);
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(g.row(i).dot(s.row(i)), 0.0, 1e-12);
}
