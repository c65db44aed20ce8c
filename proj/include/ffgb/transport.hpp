#pragma once

// Exact solver for the discrete transportation problem
//
//   min  sum_ij c_ij x_ij   s.t.  sum_j x_ij = supply_i,  sum_i x_ij = demand_j,  x >= 0
//
// using the primal network simplex method on the complete bipartite graph.
// The basis is a spanning tree on the (rows + cols) nodes with exactly
// rows + cols - 1 basic cells; degenerate (zero-flow) basic cells are kept.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

namespace ffgb {

struct TransportSolution {
  double cost = 0.0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> flow;  // row-major rows x cols
  std::size_t pivots = 0;

  double at(std::size_t i, std::size_t j) const { return flow[i * cols + j]; }
};

namespace detail {

class TransportSimplex {
 public:
  TransportSimplex(std::span<const double> supply, std::span<const double> demand,
                   std::span<const double> cost)
      : n_(supply.size()), m_(demand.size()), cost_(cost.begin(), cost.end()) {
    if (n_ == 0 || m_ == 0) throw std::invalid_argument("transport: empty marginal");
    if (cost_.size() != n_ * m_) throw std::invalid_argument("transport: cost matrix has wrong size");
    double total_s = 0.0, total_d = 0.0;
    for (double s : supply) {
      if (!(s >= 0.0)) throw std::invalid_argument("transport: negative or NaN supply");
      total_s += s;
    }
    for (double d : demand) {
      if (!(d >= 0.0)) throw std::invalid_argument("transport: negative or NaN demand");
      total_d += d;
    }
    if (std::abs(total_s - total_d) > 1e-9 * std::max(1.0, total_s))
      throw std::invalid_argument("transport: supply and demand totals differ");
    double cmax = 0.0;
    for (double c : cost_) {
      if (!std::isfinite(c)) throw std::invalid_argument("transport: non-finite cost");
      cmax = std::max(cmax, std::abs(c));
    }
    eps_ = 1e-12 * std::max(1.0, cmax);
    adj_.assign(n_ + m_, {});
    initial_basis(supply, demand);
  }

  TransportSolution solve() {
    const std::size_t cells = n_ * m_;
    const std::size_t block = std::max<std::size_t>(
        std::min<std::size_t>(cells, 16), static_cast<std::size_t>(std::sqrt(static_cast<double>(cells))));
    // Beyond this many pivots we switch to Bland-style pricing, which cannot cycle.
    const std::size_t bland_after = 50 * (n_ + m_) + 1000;
    std::size_t cursor = 0;
    std::size_t pivots = 0;
    compute_potentials();
    while (true) {
      const bool bland = pivots >= bland_after;
      std::size_t enter = kNone;
      double best = -eps_;
      std::size_t scanned = 0;
      if (bland) {
        for (std::size_t e = 0; e < cells; ++e) {
          if (in_basis_[e]) continue;
          if (reduced_cost(e) < -eps_) {
            enter = e;
            break;
          }
        }
      } else {
        while (scanned < cells) {
          const std::size_t stop = std::min(cells, scanned + block);
          for (; scanned < stop; ++scanned) {
            const std::size_t e = cursor;
            cursor = (cursor + 1 == cells) ? 0 : cursor + 1;
            if (in_basis_[e]) continue;
            const double rc = reduced_cost(e);
            if (rc < best) {
              best = rc;
              enter = e;
            }
          }
          if (enter != kNone) break;
        }
      }
      if (enter == kNone) break;
      pivot(enter, bland);
      ++pivots;
      if (pivots > 200 * (n_ + m_) * (n_ + m_) + 100000)
        throw std::runtime_error("transport: simplex failed to terminate");
    }

    TransportSolution out;
    out.rows = n_;
    out.cols = m_;
    out.flow.assign(n_ * m_, 0.0);
    out.pivots = pivots;
    for (std::size_t b = 0; b < basic_.size(); ++b) {
      const std::size_t e = basic_[b];
      const double x = std::max(0.0, flow_[b]);
      out.flow[e] = x;
      out.cost += x * cost_[e];
    }
    return out;
  }

 private:
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  std::size_t row_of(std::size_t e) const { return e / m_; }
  std::size_t col_of(std::size_t e) const { return e % m_; }
  double reduced_cost(std::size_t e) const { return cost_[e] - u_[row_of(e)] - v_[col_of(e)]; }

  void add_basic(std::size_t e, double x) {
    const std::size_t slot = basic_.size();
    basic_.push_back(e);
    flow_.push_back(x);
    in_basis_[e] = true;
    adj_[row_of(e)].push_back(slot);
    adj_[n_ + col_of(e)].push_back(slot);
  }

  // North-west corner rule: always yields a spanning tree with rows + cols - 1 cells.
  void initial_basis(std::span<const double> supply, std::span<const double> demand) {
    in_basis_.assign(n_ * m_, false);
    std::vector<double> s(supply.begin(), supply.end());
    std::vector<double> d(demand.begin(), demand.end());
    std::size_t i = 0, j = 0;
    while (true) {
      const double x = std::max(0.0, std::min(s[i], d[j]));
      add_basic(i * m_ + j, x);
      s[i] -= x;
      d[j] -= x;
      if (i + 1 == n_ && j + 1 == m_) break;
      if (i + 1 == n_) {
        ++j;
      } else if (j + 1 == m_) {
        ++i;
      } else if (s[i] <= d[j]) {
        ++i;
      } else {
        ++j;
      }
    }
  }

  void compute_potentials() {
    u_.assign(n_, 0.0);
    v_.assign(m_, 0.0);
    std::vector<char> seen(n_ + m_, 0);
    std::vector<std::size_t> stack{0};
    seen[0] = 1;
    while (!stack.empty()) {
      const std::size_t node = stack.back();
      stack.pop_back();
      for (std::size_t slot : adj_[node]) {
        const std::size_t e = basic_[slot];
        const std::size_t r = row_of(e), c = col_of(e);
        if (node < n_) {
          const std::size_t other = n_ + c;
          if (!seen[other]) {
            v_[c] = cost_[e] - u_[r];
            seen[other] = 1;
            stack.push_back(other);
          }
        } else {
          if (!seen[r]) {
            u_[r] = cost_[e] - v_[c];
            seen[r] = 1;
            stack.push_back(r);
          }
        }
      }
    }
  }

  // Tree path from column node of `enter` to its row node, as basic slots in order.
  std::vector<std::size_t> tree_path(std::size_t from, std::size_t to) const {
    std::vector<std::size_t> parent_slot(n_ + m_, kNone);
    std::vector<char> seen(n_ + m_, 0);
    std::vector<std::size_t> stack{from};
    seen[from] = 1;
    while (!stack.empty()) {
      const std::size_t node = stack.back();
      stack.pop_back();
      if (node == to) break;
      for (std::size_t slot : adj_[node]) {
        const std::size_t e = basic_[slot];
        const std::size_t other = node < n_ ? n_ + col_of(e) : row_of(e);
        if (seen[other]) continue;
        seen[other] = 1;
        parent_slot[other] = slot;
        stack.push_back(other);
      }
    }
    std::vector<std::size_t> path;
    std::size_t node = to;
    while (node != from) {
      const std::size_t slot = parent_slot[node];
      if (slot == kNone) throw std::logic_error("transport: basis is not a spanning tree");
      path.push_back(slot);
      const std::size_t e = basic_[slot];
      node = node < n_ ? n_ + col_of(e) : row_of(e);
    }
    std::reverse(path.begin(), path.end());
    return path;
  }

  void pivot(std::size_t enter, bool bland) {
    const std::size_t r = row_of(enter), c = col_of(enter);
    // Cycle: enter (+), then path from column c back to row r with signs -, +, -, ...
    const std::vector<std::size_t> path = tree_path(n_ + c, r);
    double theta = std::numeric_limits<double>::infinity();
    std::size_t leave_pos = kNone;
    for (std::size_t p = 0; p < path.size(); p += 2) {
      const double x = flow_[path[p]];
      const bool better = x < theta || (bland && x == theta && leave_pos != kNone &&
                                        basic_[path[p]] < basic_[path[leave_pos]]);
      if (better) {
        theta = x;
        leave_pos = p;
      }
    }
    theta = std::max(0.0, theta);
    for (std::size_t p = 0; p < path.size(); ++p) flow_[path[p]] += (p % 2 == 0) ? -theta : theta;

    const std::size_t leave_slot = path[leave_pos];
    const std::size_t leave_e = basic_[leave_slot];
    in_basis_[leave_e] = false;
    auto unlink = [&](std::size_t node) {
      auto& a = adj_[node];
      a.erase(std::find(a.begin(), a.end(), leave_slot));
    };
    unlink(row_of(leave_e));
    unlink(n_ + col_of(leave_e));
    // Reuse the slot for the entering cell.
    basic_[leave_slot] = enter;
    flow_[leave_slot] = theta;
    in_basis_[enter] = true;
    adj_[r].push_back(leave_slot);
    adj_[n_ + c].push_back(leave_slot);
    compute_potentials();
  }

  std::size_t n_, m_;
  std::vector<double> cost_;
  double eps_ = 1e-12;
  std::vector<std::size_t> basic_;
  std::vector<double> flow_;
  std::vector<bool> in_basis_;
  std::vector<std::vector<std::size_t>> adj_;
  std::vector<double> u_, v_;
};

}  // namespace detail

/// Solves the balanced transportation problem exactly. `cost` is row-major
/// (supply.size() x demand.size()).
inline TransportSolution solve_transport(std::span<const double> supply, std::span<const double> demand,
                                         std::span<const double> cost) {
  return detail::TransportSimplex(supply, demand, cost).solve();
}

}  // namespace ffgb
