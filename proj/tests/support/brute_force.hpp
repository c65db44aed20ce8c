#pragma once

// Independent reference computations used only by the tests.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "ffgb/losses.hpp"
#include "ffgb/measures.hpp"
#include "ffgb/random.hpp"

namespace ffgb::reference {

/// Minimum transport cost by enumerating every basic solution of the
/// transportation polytope: each (n+m-1)-cell subset is solved by peeling
/// rows/columns that own a single cell. Feasible for n, m <= 4.
inline double brute_force_transport(std::span<const double> a, std::span<const double> b,
                                    std::span<const double> cost) {
  const std::size_t n = a.size(), m = b.size(), cells = n * m, basis = n + m - 1;
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> pick(cells, 0);
  std::fill(pick.end() - static_cast<long>(basis), pick.end(), 1);
  do {
    std::vector<std::size_t> chosen;
    for (std::size_t c = 0; c < cells; ++c)
      if (pick[c]) chosen.push_back(c);
    std::vector<double> ra(a.begin(), a.end()), rb(b.begin(), b.end());
    std::vector<bool> done(chosen.size(), false);
    std::vector<double> flow(cells, 0.0);
    std::size_t left = chosen.size();
    bool progress = true;
    while (left > 0 && progress) {
      progress = false;
      for (std::size_t r = 0; r < n && !progress; ++r) {
        std::size_t cnt = 0, which = 0;
        for (std::size_t q = 0; q < chosen.size(); ++q)
          if (!done[q] && chosen[q] / m == r) ++cnt, which = q;
        if (cnt == 1) {
          const std::size_t col = chosen[which] % m;
          flow[chosen[which]] = ra[r];
          rb[col] -= ra[r];
          ra[r] = 0.0;
          done[which] = true;
          --left;
          progress = true;
        }
      }
      for (std::size_t col = 0; col < m && !progress; ++col) {
        std::size_t cnt = 0, which = 0;
        for (std::size_t q = 0; q < chosen.size(); ++q)
          if (!done[q] && chosen[q] % m == col) ++cnt, which = q;
        if (cnt == 1) {
          const std::size_t r = chosen[which] / m;
          flow[chosen[which]] = rb[col];
          ra[r] -= rb[col];
          rb[col] = 0.0;
          done[which] = true;
          --left;
          progress = true;
        }
      }
    }
    if (left > 0) continue;  // subset contains a cycle
    bool feasible = true;
    for (double f : flow) feasible = feasible && f >= -1e-12;
    for (double r : ra) feasible = feasible && std::abs(r) <= 1e-9;
    for (double r : rb) feasible = feasible && std::abs(r) <= 1e-9;
    if (!feasible) continue;
    double c = 0.0;
    for (std::size_t q = 0; q < cells; ++q) c += std::max(0.0, flow[q]) * cost[q];
    best = std::min(best, c);
  } while (std::next_permutation(pick.begin(), pick.end()));
  return best;
}

inline double brute_force_wasserstein(const EmpiricalMeasure& a, const EmpiricalMeasure& b, int p) {
  std::vector<double> cost(a.size() * b.size());
  for (std::size_t j = 0; j < a.size(); ++j)
    for (std::size_t k = 0; k < b.size(); ++k) {
      const double d = distance(a.point(j), b.point(k));
      cost[j * b.size() + k] = p == 1 ? d : d * d;
    }
  const double c = brute_force_transport(a.weights(), b.weights(), cost);
  return p == 1 ? c : std::sqrt(c);
}

/// Random measure with 1..max_atoms atoms on a small integer grid (so atoms
/// sometimes coincide) in `dim` dimensions.
inline EmpiricalMeasure random_measure(Rng& rng, std::size_t dim, std::size_t max_atoms, int grid = 4) {
  const std::size_t n = 1 + rng.index(max_atoms);
  std::vector<Atom> atoms;
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    Point x(dim);
    for (double& c : x) c = static_cast<double>(rng.index(static_cast<std::uint64_t>(grid))) - grid / 2.0;
    const double w = 0.1 + rng.uniform();
    atoms.push_back({x, w});
    total += w;
  }
  for (auto& at : atoms) at.w /= total;
  return EmpiricalMeasure(dim, std::move(atoms));
}

inline double central_difference(const std::function<double(const Vec&)>& f, Vec x, std::size_t k, double h) {
  const double x0 = x[k];
  x[k] = x0 + h;
  const double fp = f(x);
  x[k] = x0 - h;
  const double fm = f(x);
  return (fp - fm) / (2.0 * h);
}

}  // namespace ffgb::reference
