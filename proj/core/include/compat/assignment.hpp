#pragma once

#include <utility>
#include <vector>

namespace compat {

// Exact max-sum linear assignment on a square score matrix (shortest
// augmenting path with potentials, O(n^3)). Returns the column chosen for
// each row and the objective, re-summed from the matrix in row order.
std::pair<std::vector<int>, double> solve_assignment_max(
    const std::vector<std::vector<double>>& score);

}  // namespace compat
