#pragma once

// Finitely supported probability measures on R^d and the weighted-L2 geometry
// built on top of them: inner products, norms, total variation, Wasserstein
// distances, Lipschitz extensions and support covering radii.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ffgb/transport.hpp"

namespace ffgb {

using Point = std::vector<double>;
using Vec = std::vector<double>;

/// Anything that maps a point to an output vector.
template <class F>
concept Evaluable = requires(const F& f, const Point& x) {
  { f(x) } -> std::convertible_to<Vec>;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double t = a[k] - b[k];
    s += t * t;
  }
  return s;
}

inline double distance(std::span<const double> a, std::span<const double> b) {
  return std::sqrt(squared_distance(a, b));
}

inline double euclidean_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

struct Atom {
  Point x;
  double w = 0.0;
};

class EmpiricalMeasure {
 public:
  static constexpr double kWeightTolerance = 1e-9;

  EmpiricalMeasure() = default;

  /// Builds a measure from weighted atoms. Atoms with identical coordinates are
  /// merged (weights summed); atoms end up in lexicographic order.
  EmpiricalMeasure(std::size_t dim, std::vector<Atom> atoms) : dim_(dim) {
    if (atoms.empty()) throw std::invalid_argument("EmpiricalMeasure: no atoms");
    std::map<Point, double> merged;
    for (auto& a : atoms) {
      if (a.x.size() != dim) throw std::invalid_argument("EmpiricalMeasure: atom dimension mismatch");
      for (double c : a.x)
        if (!std::isfinite(c)) throw std::invalid_argument("EmpiricalMeasure: non-finite coordinate");
      if (!(a.w > 0.0) || !std::isfinite(a.w))
        throw std::invalid_argument("EmpiricalMeasure: atom weights must be positive");
      merged[std::move(a.x)] += a.w;
    }
    double total = 0.0;
    points_.reserve(merged.size());
    weights_.reserve(merged.size());
    for (auto& [x, w] : merged) {
      points_.push_back(x);
      weights_.push_back(w);
      total += w;
    }
    if (std::abs(total - 1.0) > kWeightTolerance) {
      std::ostringstream os;
      os << "EmpiricalMeasure: weights sum to " << total << ", expected 1";
      throw std::invalid_argument(os.str());
    }
  }

  /// Uniform measure over the given points; repeated points get weight
  /// proportional to their multiplicity.
  static EmpiricalMeasure uniform(std::span<const Point> points) {
    if (points.empty()) throw std::invalid_argument("EmpiricalMeasure::uniform: no points");
    std::vector<Atom> atoms;
    atoms.reserve(points.size());
    const double w = 1.0 / static_cast<double>(points.size());
    for (const auto& p : points) atoms.push_back({p, w});
    return EmpiricalMeasure(points.front().size(), std::move(atoms));
  }

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return points_.size(); }
  const Point& point(std::size_t j) const { return points_[j]; }
  double weight(std::size_t j) const { return weights_[j]; }
  std::span<const Point> points() const { return points_; }
  std::span<const double> weights() const { return weights_; }

  /// Index of the atom with exactly these coordinates.
  std::optional<std::size_t> find(const Point& x) const {
    auto it = std::lower_bound(points_.begin(), points_.end(), x);
    if (it == points_.end() || *it != x) return std::nullopt;
    return static_cast<std::size_t>(it - points_.begin());
  }

  bool operator==(const EmpiricalMeasure& other) const {
    return dim_ == other.dim_ && points_ == other.points_ && weights_ == other.weights_;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<Point> points_;
  std::vector<double> weights_;
};

using MeasurePtr = std::shared_ptr<const EmpiricalMeasure>;

/// Weighted union of measures (uniform weights when `weights` is empty).
inline EmpiricalMeasure mixture(std::span<const EmpiricalMeasure> measures, std::span<const double> weights = {}) {
  if (measures.empty()) throw std::invalid_argument("mixture: empty list");
  const std::size_t dim = measures.front().dim();
  std::vector<double> lambda(weights.begin(), weights.end());
  if (lambda.empty()) lambda.assign(measures.size(), 1.0 / static_cast<double>(measures.size()));
  if (lambda.size() != measures.size()) throw std::invalid_argument("mixture: weight count mismatch");
  double total = 0.0;
  for (double l : lambda) {
    if (!(l >= 0.0)) throw std::invalid_argument("mixture: negative mixture weight");
    total += l;
  }
  if (std::abs(total - 1.0) > EmpiricalMeasure::kWeightTolerance)
    throw std::invalid_argument("mixture: mixture weights must sum to 1");
  std::vector<Atom> atoms;
  for (std::size_t i = 0; i < measures.size(); ++i) {
    if (measures[i].dim() != dim) throw std::invalid_argument("mixture: dimension mismatch");
    if (lambda[i] == 0.0) continue;
    for (std::size_t j = 0; j < measures[i].size(); ++j)
      atoms.push_back({measures[i].point(j), lambda[i] * measures[i].weight(j)});
  }
  return EmpiricalMeasure(dim, std::move(atoms));
}

/// <f, g>_mu = sum_j w_j <f(x_j), g(x_j)>.
template <Evaluable F, Evaluable G>
double inner_product(const F& f, const G& g, const EmpiricalMeasure& mu) {
  double s = 0.0;
  for (std::size_t j = 0; j < mu.size(); ++j) {
    const Vec a = f(mu.point(j));
    const Vec b = g(mu.point(j));
    if (a.size() != b.size()) throw std::invalid_argument("inner_product: output dimension mismatch");
    double dot = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
    s += mu.weight(j) * dot;
  }
  return s;
}

template <Evaluable F>
double norm_l2(const F& f, const EmpiricalMeasure& mu) {
  return std::sqrt(std::max(0.0, inner_product(f, f, mu)));
}

/// max over atoms of the Euclidean norm of f.
template <Evaluable F>
double norm_linf_on_support(const F& f, const EmpiricalMeasure& mu) {
  double m = 0.0;
  for (std::size_t j = 0; j < mu.size(); ++j) m = std::max(m, euclidean_norm(f(mu.point(j))));
  return m;
}

/// Half the L1 distance between the weight vectors over the atom union.
inline double tv_distance(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
  if (a.dim() != b.dim()) throw std::invalid_argument("tv_distance: dimension mismatch");
  // Both atom lists are sorted lexicographically; merge them.
  double s = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() || j < b.size()) {
    if (j == b.size() || (i < a.size() && a.point(i) < b.point(j))) {
      s += a.weight(i++);
    } else if (i == a.size() || b.point(j) < a.point(i)) {
      s += b.weight(j++);
    } else {
      s += std::abs(a.weight(i++) - b.weight(j++));
    }
  }
  return std::clamp(0.5 * s, 0.0, 1.0);
}

struct TransportPlan {
  EmpiricalMeasure source;
  EmpiricalMeasure target;
  std::vector<double> mass;  // row-major source.size() x target.size()

  double at(std::size_t j, std::size_t k) const { return mass[j * target.size() + k]; }
};

struct WassersteinResult {
  double distance = 0.0;
  TransportPlan plan;
};

inline constexpr std::size_t kMaxTransportAtoms = 2000;

/// Exact p-Wasserstein distance (p = 1 or 2) with an optimal plan.
inline WassersteinResult wasserstein(const EmpiricalMeasure& a, const EmpiricalMeasure& b, int p) {
  if (a.dim() != b.dim()) throw std::invalid_argument("wasserstein: dimension mismatch");
  if (p != 1 && p != 2) throw std::invalid_argument("wasserstein: p must be 1 or 2");
  if (a.size() > kMaxTransportAtoms || b.size() > kMaxTransportAtoms)
    throw std::length_error("wasserstein: measure exceeds the exact-solver atom limit");
  std::vector<double> cost(a.size() * b.size());
  for (std::size_t j = 0; j < a.size(); ++j)
    for (std::size_t k = 0; k < b.size(); ++k) {
      const double d2 = squared_distance(a.point(j), b.point(k));
      cost[j * b.size() + k] = p == 1 ? std::sqrt(d2) : d2;
    }
  TransportSolution sol = solve_transport(a.weights(), b.weights(), cost);
  WassersteinResult out{0.0, TransportPlan{a, b, std::move(sol.flow)}};
  const double c = std::max(0.0, sol.cost);
  out.distance = p == 1 ? c : std::sqrt(c);
  return out;
}

/// Sum of pi_jk ||x_j - y_k||^p for a plan.
inline double plan_cost(const TransportPlan& plan, int p) {
  double s = 0.0;
  for (std::size_t j = 0; j < plan.source.size(); ++j)
    for (std::size_t k = 0; k < plan.target.size(); ++k) {
      const double d2 = squared_distance(plan.source.point(j), plan.target.point(k));
      s += plan.at(j, k) * (p == 1 ? std::sqrt(d2) : d2);
    }
  return s;
}

class LipschitzViolation : public std::invalid_argument {
 public:
  LipschitzViolation(std::size_t i, std::size_t j, double ratio)
      : std::invalid_argument(describe(i, j, ratio)), first(i), second(j), ratio(ratio) {}

  std::size_t first;
  std::size_t second;
  double ratio;

 private:
  static std::string describe(std::size_t i, std::size_t j, double ratio) {
    std::ostringstream os;
    os << "Lipschitz compatibility violated by points " << i << " and " << j << " (ratio " << ratio << ")";
    return os.str();
  }
};

/// u(x) = min_j (y_j + L ||x - x_j||): the largest L-Lipschitz function
/// interpolating the labeled points.
class LipschitzExtension {
 public:
  LipschitzExtension(std::vector<std::pair<Point, double>> points, double lip) : points_(std::move(points)), lip_(lip) {
    if (points_.empty()) throw std::invalid_argument("lipschitz_extension: no points");
    if (!(lip > 0.0)) throw std::invalid_argument("lipschitz_extension: L must be positive");
    for (std::size_t i = 0; i < points_.size(); ++i)
      for (std::size_t j = i + 1; j < points_.size(); ++j) {
        const double dy = std::abs(points_[i].second - points_[j].second);
        const double dx = distance(points_[i].first, points_[j].first);
        if (dy > lip * dx + 1e-12 * std::max(1.0, dy)) throw LipschitzViolation(i, j, dx > 0 ? dy / dx : INFINITY);
      }
  }

  double value(std::span<const double> x) const {
    double best = INFINITY;
    for (const auto& [xj, yj] : points_) best = std::min(best, yj + lip_ * distance(x, xj));
    return best;
  }

  Vec operator()(const Point& x) const { return {value(x)}; }
  double lipschitz_constant() const { return lip_; }

 private:
  std::vector<std::pair<Point, double>> points_;
  double lip_;
};

inline LipschitzExtension lipschitz_extension(std::vector<std::pair<Point, double>> points, double lip) {
  return LipschitzExtension(std::move(points), lip);
}

/// Smallest D such that every atom of every measure has an atom of every other
/// measure within distance D.
inline double support_covering_radius(std::span<const EmpiricalMeasure> measures) {
  if (measures.size() < 2) throw std::invalid_argument("support_covering_radius: need at least two measures");
  const std::size_t dim = measures.front().dim();
  for (const auto& m : measures)
    if (m.dim() != dim) throw std::invalid_argument("support_covering_radius: dimension mismatch");
  double radius = 0.0;
  for (std::size_t a = 0; a < measures.size(); ++a)
    for (std::size_t b = 0; b < measures.size(); ++b) {
      if (a == b) continue;
      for (const auto& x : measures[a].points()) {
        double nearest = INFINITY;
        for (const auto& y : measures[b].points()) nearest = std::min(nearest, squared_distance(x, y));
        radius = std::max(radius, std::sqrt(nearest));
      }
    }
  return radius;
}

}  // namespace ffgb
