// Combinatorial helpers for label alignment: minimum-cost assignment
// (Hungarian algorithm with potentials) and complete-linkage agglomerative
// clustering via the nearest-neighbor chain, cut at a requested group count.
#pragma once

#include "swolca/core.hpp"

#include <functional>
#include <limits>
#include <numeric>
#include <vector>

namespace swolca::detail {

// returns the column assigned to each row, minimizing total cost; square cost
inline std::vector<int> min_cost_assignment(const Matrix& cost) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw ValidationError("min_cost_assignment: not square");
  if (n == 0) return {};
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> match(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = match[j0];
      int j1 = 0;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (match[j] > 0) row_to_col[match[j] - 1] = j - 1;
  return row_to_col;
}

// complete-linkage clustering of a symmetric distance matrix, cut into
// n_groups; group ids are assigned 0.. in order of first member appearance
inline std::vector<int> complete_linkage_cut(const Matrix& dist, int n_groups) {
  const int n = static_cast<int>(dist.rows());
  if (dist.cols() != n) throw ValidationError("complete_linkage_cut: not square");
  if (n_groups < 1 || n_groups > n)
    throw ValidationError("complete_linkage_cut: bad group count");

  struct Merge {
    int a, b, order;
    double height;
  };
  std::vector<Merge> merges;
  merges.reserve(n - 1);

  // nearest-neighbor chain; complete linkage is reducible so the resulting
  // dendrogram is exact. Distances updated in place (max rule).
  Matrix d = dist;
  std::vector<char> active(n, 1);
  std::vector<int> chain;
  chain.reserve(n);
  int remaining = n;
  int order = 0;
  while (remaining > 1) {
    if (chain.empty()) {
      for (int i = 0; i < n; ++i)
        if (active[i]) {
          chain.push_back(i);
          break;
        }
    }
    for (;;) {
      const int top = chain.back();
      int nearest = -1;
      double best = std::numeric_limits<double>::infinity();
      const int prev = chain.size() >= 2 ? chain[chain.size() - 2] : -1;
      for (int j = 0; j < n; ++j) {
        if (!active[j] || j == top) continue;
        // prefer the chain predecessor on ties so reciprocity terminates
        if (d(top, j) < best || (d(top, j) == best && j == prev)) {
          best = d(top, j);
          nearest = j;
        }
      }
      if (nearest == prev) {
        // reciprocal nearest neighbors: merge prev and top into prev's slot
        chain.pop_back();
        chain.pop_back();
        const int a = std::min(prev, top), b = std::max(prev, top);
        merges.push_back({a, b, order++, best});
        active[b] = 0;
        for (int j = 0; j < n; ++j) {
          if (!active[j] || j == a) continue;
          const double m = std::max(d(a, j), d(b, j));
          d(a, j) = m;
          d(j, a) = m;
        }
        --remaining;
        break;
      }
      chain.push_back(nearest);
    }
  }

  // apply merges in height order (stable under ties) until n_groups remain
  std::sort(merges.begin(), merges.end(), [](const Merge& x, const Merge& y) {
    return x.height < y.height || (x.height == y.height && x.order < y.order);
  });
  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (int m = 0; m < n - n_groups; ++m)
    parent[find(merges[m].b)] = find(merges[m].a);

  std::vector<int> label(n, -1);
  int next = 0;
  for (int i = 0; i < n; ++i) {
    const int r = find(i);
    if (label[r] < 0) label[r] = next++;
    label[i] = label[r];
  }
  return label;
}

}  // namespace swolca::detail
