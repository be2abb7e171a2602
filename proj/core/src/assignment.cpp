#include "compat/assignment.hpp"

#include <limits>

#include "compat/error.hpp"

namespace compat {

std::pair<std::vector<int>, double> solve_assignment_max(
    const std::vector<std::vector<double>>& score) {
  const int n = static_cast<int>(score.size());
  if (n == 0) throw UsageError("solve_assignment_max: empty matrix");
  for (const auto& row : score)
    if (static_cast<int>(row.size()) != n)
      throw UsageError("solve_assignment_max: matrix must be square");

  // Minimize the negated scores. 1-based arrays, column 0 is a sentinel.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n + 1), 0.0);
  std::vector<double> v(static_cast<size_t>(n + 1), 0.0);
  std::vector<int> match(static_cast<size_t>(n + 1), 0);  // row matched to col
  std::vector<int> way(static_cast<size_t>(n + 1), 0);

  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(n + 1), inf);
    std::vector<char> used(static_cast<size_t>(n + 1), 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = match[static_cast<size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = -score[static_cast<size_t>(i0 - 1)][static_cast<size_t>(j - 1)] -
                           u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(match[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      match[static_cast<size_t>(j0)] = match[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }

  std::vector<int> col_of_row(static_cast<size_t>(n), -1);
  for (int j = 1; j <= n; ++j)
    col_of_row[static_cast<size_t>(match[static_cast<size_t>(j)] - 1)] = j - 1;
  double objective = 0.0;
  for (int i = 0; i < n; ++i)
    objective += score[static_cast<size_t>(i)][static_cast<size_t>(col_of_row[static_cast<size_t>(i)])];
  return {std::move(col_of_row), objective};
}

}  // namespace compat
