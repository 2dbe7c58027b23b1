#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "cotrack/hungarian.hpp"
#include "cotrack/rng.hpp"

using namespace cotrack;

namespace {

// Brute-force oracle: enumerate every injective row->column mapping.
double brute_force_min_cost(const Matrix& cost) {
  const bool transposed = cost.rows > cost.cols;
  const Matrix& c = cost;
  const int n = std::min(cost.rows, cost.cols);
  const int m = std::max(cost.rows, cost.cols);
  std::vector<int> perm(m);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0;
    for (int i = 0; i < n; ++i)
      s += transposed ? c.at(perm[i], i) : c.at(i, perm[i]);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

Matrix random_cost(int r, int c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data) v = rng.uniform(-2.0, 5.0);
  return m;
}

}  // namespace

TEST(Hungarian, Singleton) {
  Matrix c = Matrix::from_rows({{0.3}});
  Assignment a = hungarian(c);
  ASSERT_EQ(a.pairs.size(), 1u);
  EXPECT_EQ(a.pairs[0], std::make_pair(0, 0));
  EXPECT_DOUBLE_EQ(a.total_cost, 0.3);
}

TEST(Hungarian, DiagonalDominates) {
  Matrix c = Matrix::from_rows({{1, 2}, {2, 1}});
  Assignment a = hungarian(c);
  ASSERT_EQ(a.pairs.size(), 2u);
  EXPECT_DOUBLE_EQ(a.total_cost, 2.0);
  for (auto [r, col] : a.pairs) EXPECT_EQ(r, col);
}

TEST(Hungarian, EmptyMatrix) {
  Assignment a = hungarian(Matrix());
  EXPECT_TRUE(a.pairs.empty());
  EXPECT_DOUBLE_EQ(a.total_cost, 0.0);
}

TEST(Hungarian, NonFiniteThrows) {
  Matrix c(2, 2);
  c.at(0, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(hungarian(c), std::invalid_argument);
}

TEST(Hungarian, AssignmentIsValidPartition) {
  Rng rng(100);
  for (int trial = 0; trial < 50; ++trial) {
    const int r = rng.uniform_int(1, 7);
    const int c = rng.uniform_int(1, 7);
    Matrix cost = random_cost(r, c, rng);
    Assignment a = hungarian(cost);
    EXPECT_EQ(a.pairs.size(), static_cast<size_t>(std::min(r, c)));
    std::vector<bool> row_used(r, false), col_used(c, false);
    double total = 0;
    for (auto [i, j] : a.pairs) {
      EXPECT_FALSE(row_used[i]);
      EXPECT_FALSE(col_used[j]);
      row_used[i] = true;
      col_used[j] = true;
      total += cost.at(i, j);
    }
    EXPECT_NEAR(total, a.total_cost, 1e-12);
  }
}

TEST(Hungarian, MatchesBruteForceOnRandomSquare5x5) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix cost = random_cost(5, 5, rng);
    EXPECT_NEAR(hungarian(cost).total_cost, brute_force_min_cost(cost), 1e-9);
  }
}

TEST(Hungarian, MatchesBruteForceUpTo6x6) {
  Rng rng(21);
  for (int trial = 0; trial < 120; ++trial) {
    const int r = rng.uniform_int(1, 6);
    const int c = rng.uniform_int(1, 6);
    Matrix cost = random_cost(r, c, rng);
    EXPECT_NEAR(hungarian(cost).total_cost, brute_force_min_cost(cost), 1e-9)
        << r << "x" << c << " trial " << trial;
  }
}
