#pragma once

#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "cotrack/matrix.hpp"

namespace cotrack {

/// Result of a minimum-cost assignment: one (row, col) pair per assigned row,
/// covering min(rows, cols) rows/columns, plus the summed cost.
struct Assignment {
  std::vector<std::pair<int, int>> pairs;
  double total_cost = 0.0;
};

namespace detail {

// Jonker-Volgenant style shortest augmenting path solver on a square matrix.
// Returns row -> column. O(n^3).
inline std::vector<int> solve_square(const Matrix& cost) {
  const int n = cost.rows;
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, std::numeric_limits<double>::infinity());
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = 0;
      double delta = std::numeric_limits<double>::infinity();
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace detail

/// Minimum-total-cost one-to-one assignment on a rectangular cost matrix.
/// Rectangular inputs are padded to square with a constant, which leaves the
/// optimum over real entries unchanged.
inline Assignment hungarian(const Matrix& cost) {
  Assignment out;
  if (cost.rows == 0 || cost.cols == 0) return out;
  if (!cost.all_finite())
    throw std::invalid_argument("hungarian: non-finite cost entry");
  const int n = std::max(cost.rows, cost.cols);
  Matrix square(n, n, 0.0);
  for (int i = 0; i < cost.rows; ++i)
    for (int j = 0; j < cost.cols; ++j) square.at(i, j) = cost.at(i, j);
  const std::vector<int> row_to_col = detail::solve_square(square);
  for (int i = 0; i < cost.rows; ++i) {
    const int j = row_to_col[i];
    if (j >= 0 && j < cost.cols) {
      out.pairs.emplace_back(i, j);
      out.total_cost += cost.at(i, j);
    }
  }
  return out;
}

}  // namespace cotrack
