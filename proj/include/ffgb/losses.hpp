#pragma once

// Losses on R^c predictions, functional subgradients tabulated on a client's
// support, the regularized federated objective, and its pointwise minimizer.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ffgb/functions.hpp"
#include "ffgb/measures.hpp"

namespace ffgb {

enum class LossKind { CrossEntropy, Square };

inline const char* to_string(LossKind k) { return k == LossKind::CrossEntropy ? "cross_entropy" : "square"; }

/// Tight bound on ||softmax(v) - onehot(y)||_2.
inline const double kCrossEntropyGradBound = std::sqrt(2.0);

struct LabeledExample {
  Point x;
  double y = 0.0;  // class label 1..c for cross-entropy, real label for square loss
};

namespace detail {
/// Class labels are 1..c; returns the zero-based coordinate.
inline std::size_t class_index(double y, std::size_t classes) {
  if (!(y >= 1.0) || y != std::floor(y) || y > static_cast<double>(classes))
    throw std::out_of_range("class label " + std::to_string(y) + " out of range 1.." + std::to_string(classes));
  return static_cast<std::size_t>(y) - 1;
}

inline double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double a : v) s += std::exp(a - m);
  return m + std::log(s);
}
}  // namespace detail

inline void softmax_into(std::span<const double> v, std::span<double> out) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (std::size_t k = 0; k < v.size(); ++k) {
    out[k] = std::exp(v[k] - m);
    s += out[k];
  }
  for (double& o : out) o /= s;
}

inline double loss_value(LossKind kind, std::span<const double> pred, double y) {
  if (kind == LossKind::CrossEntropy) {
    if (pred.empty()) throw std::invalid_argument("loss_value: empty prediction");
    const std::size_t c = detail::class_index(y, pred.size());
    return detail::log_sum_exp(pred) - pred[c];
  }
  if (pred.size() != 1) throw std::invalid_argument("loss_value: square loss expects scalar prediction");
  const double r = pred[0] - y;
  return 0.5 * r * r;
}

/// out += coef * d loss / d pred
inline void loss_gradient_into(LossKind kind, std::span<const double> pred, double y, double coef,
                               std::span<double> out) {
  if (kind == LossKind::CrossEntropy) {
    const std::size_t c = detail::class_index(y, pred.size());
    Vec p(pred.size());
    softmax_into(pred, p);
    p[c] -= 1.0;
    for (std::size_t k = 0; k < p.size(); ++k) out[k] += coef * p[k];
    return;
  }
  if (pred.size() != 1) throw std::invalid_argument("loss_gradient: square loss expects scalar prediction");
  out[0] += coef * (pred[0] - y);
}

inline Vec loss_gradient(LossKind kind, std::span<const double> pred, double y) {
  Vec g(pred.size(), 0.0);
  loss_gradient_into(kind, pred, y, 1.0, g);
  return g;
}

/// One client's examples, the induced feature measure and the labels observed
/// at each atom.
class ClientDataset {
 public:
  ClientDataset(std::vector<LabeledExample> examples) : examples_(std::move(examples)) {
    if (examples_.empty()) throw std::invalid_argument("ClientDataset: no examples");
    std::vector<Point> xs;
    xs.reserve(examples_.size());
    for (const auto& e : examples_) {
      if (!std::isfinite(e.y)) throw std::invalid_argument("ClientDataset: non-finite label");
      xs.push_back(e.x);
    }
    measure_ = std::make_shared<const EmpiricalMeasure>(EmpiricalMeasure::uniform(xs));
    labels_.assign(measure_->size(), {});
    for (const auto& e : examples_) labels_[*measure_->find(e.x)].push_back(e.y);
  }

  std::span<const LabeledExample> examples() const { return examples_; }
  const EmpiricalMeasure& measure() const { return *measure_; }
  const MeasurePtr& measure_ptr() const { return measure_; }
  std::span<const double> labels_at(std::size_t atom) const { return labels_[atom]; }
  std::size_t dim() const { return measure_->dim(); }

 private:
  std::vector<LabeledExample> examples_;
  MeasurePtr measure_;
  std::vector<std::vector<double>> labels_;
};

/// Per-atom mean of grad_1 loss(g(x_j), y) over the atom's labels, plus mu * g(x_j)
/// when include_reg. `g_values` is g tabulated on the client's support.
inline SupportTable subgradient_from_values(LossKind kind, const SupportTable& g_values, const ClientDataset& data,
                                            double mu, bool include_reg) {
  if (g_values.size() != data.measure().size())
    throw std::invalid_argument("subgradient: table is not on the client's support");
  SupportTable out(g_values.support_ptr(), g_values.dim());
  for (std::size_t j = 0; j < out.size(); ++j) {
    const auto labels = data.labels_at(j);
    const double w = 1.0 / static_cast<double>(labels.size());
    auto pred = g_values.row(j);
    auto row = out.row(j);
    for (double y : labels) loss_gradient_into(kind, pred, y, w, row);
    if (include_reg)
      for (std::size_t k = 0; k < row.size(); ++k) row[k] += mu * pred[k];
  }
  return out;
}

template <Evaluable F>
SupportTable subgradient_table(LossKind kind, const F& g, const ClientDataset& data, double mu, bool include_reg,
                               std::size_t out_dim) {
  SupportTable values(data.measure_ptr(), out_dim);
  for (std::size_t j = 0; j < values.size(); ++j) {
    const Vec v = g(data.measure().point(j));
    if (v.size() != out_dim) throw std::invalid_argument("subgradient_table: output dimension mismatch");
    std::copy(v.begin(), v.end(), values.row(j).begin());
  }
  return subgradient_from_values(kind, values, data, mu, include_reg);
}

struct Objective {
  LossKind kind = LossKind::CrossEntropy;
  double mu = 0.0;
  std::size_t classes = 1;  // output dimension
  std::vector<ClientDataset> clients;

  Objective(LossKind k, double mu_, std::size_t classes_, std::vector<ClientDataset> cs)
      : kind(k), mu(mu_), classes(classes_), clients(std::move(cs)) {
    if (!(mu >= 0.0)) throw std::invalid_argument("Objective: mu must be nonnegative");
    if (clients.empty()) throw std::invalid_argument("Objective: no clients");
    if (kind == LossKind::Square && classes != 1) throw std::invalid_argument("Objective: square loss is scalar");
  }

  std::size_t output_dim() const { return classes; }

  EmpiricalMeasure mixture_measure() const {
    std::vector<EmpiricalMeasure> ms;
    ms.reserve(clients.size());
    for (const auto& c : clients) ms.push_back(c.measure());
    return mixture(ms);
  }
};

/// F_i from values tabulated on client i's support.
inline double client_objective_from_values(const Objective& obj, std::size_t i, const SupportTable& values) {
  const ClientDataset& data = obj.clients[i];
  double risk = 0.0;
  for (std::size_t j = 0; j < values.size(); ++j) {
    const auto labels = data.labels_at(j);
    double l = 0.0;
    for (double y : labels) l += loss_value(obj.kind, values.row(j), y);
    risk += data.measure().weight(j) * l / static_cast<double>(labels.size());
  }
  const double n = norm_l2(values);
  return risk + 0.5 * obj.mu * n * n;
}

/// (1/N) sum_i [ mean loss on client i + (mu/2) ||f||^2_{alpha_i} ].
template <Evaluable F>
double objective_value(const Objective& obj, const F& f) {
  double total = 0.0;
  for (std::size_t i = 0; i < obj.clients.size(); ++i) {
    SupportTable values(obj.clients[i].measure_ptr(), obj.classes);
    for (std::size_t j = 0; j < values.size(); ++j) {
      const Vec v = f(values.support().point(j));
      std::copy(v.begin(), v.end(), values.row(j).begin());
    }
    total += client_objective_from_values(obj, i, values);
  }
  return total / static_cast<double>(obj.clients.size());
}

class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-atom minimizer of the federated objective on the mixture support.
///
/// At atom x the objective decouples into sum_i alpha_i(x) [mean_y loss(v, y)] / N
/// + (mu/2) alpha(x) ||v||^2, so each atom is an independent strongly convex
/// problem in v. Cross-entropy uses damped Newton; square loss is closed form.
inline SupportTable pointwise_optimum(const Objective& obj) {
  if (obj.kind == LossKind::CrossEntropy && !(obj.mu > 0.0))
    throw std::invalid_argument("pointwise_optimum: cross-entropy requires mu > 0");
  auto support = std::make_shared<const EmpiricalMeasure>(obj.mixture_measure());
  const std::size_t c = obj.classes;
  const double n_clients = static_cast<double>(obj.clients.size());
  SupportTable out(support, c);
  for (std::size_t a = 0; a < support->size(); ++a) {
    const Point& x = support->point(a);
    // Label distribution q at x, weighted by each client's mass at x.
    Vec q(c, 0.0);
    double mass = 0.0;
    for (const auto& client : obj.clients) {
      auto j = client.measure().find(x);
      if (!j) continue;
      const double w = client.measure().weight(*j) / n_clients;
      const auto labels = client.labels_at(*j);
      for (double y : labels) {
        if (obj.kind == LossKind::CrossEntropy)
          q[detail::class_index(y, c)] += w / static_cast<double>(labels.size());
        else
          q[0] += w * y / static_cast<double>(labels.size());
      }
      mass += w;
    }
    for (double& v : q) v /= mass;
    auto row = out.row(a);
    if (obj.kind == LossKind::Square) {
      row[0] = q[0] / (1.0 + obj.mu);
      continue;
    }
    // minimize logsumexp(v) - <q, v> + (mu/2)||v||^2
    Vec v(c, 0.0), p(c), grad(c), step(c);
    auto phi = [&](std::span<const double> z) {
      double s = detail::log_sum_exp(z);
      for (std::size_t k = 0; k < c; ++k) s += -q[k] * z[k] + 0.5 * obj.mu * z[k] * z[k];
      return s;
    };
    bool converged = false;
    for (int it = 0; it < 200; ++it) {
      softmax_into(v, p);
      double gnorm = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        grad[k] = p[k] - q[k] + obj.mu * v[k];
        gnorm += grad[k] * grad[k];
      }
      if (std::sqrt(gnorm) <= 1e-10) {
        converged = true;
        break;
      }
      // Hessian diag(p) - p p^T + mu I, solved by Gaussian elimination.
      std::vector<double> h(c * (c + 1));
      for (std::size_t r = 0; r < c; ++r) {
        for (std::size_t s = 0; s < c; ++s) h[r * (c + 1) + s] = (r == s ? p[r] + obj.mu : 0.0) - p[r] * p[s];
        h[r * (c + 1) + c] = -grad[r];
      }
      for (std::size_t col = 0; col < c; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < c; ++r)
          if (std::abs(h[r * (c + 1) + col]) > std::abs(h[piv * (c + 1) + col])) piv = r;
        for (std::size_t s = 0; s <= c; ++s) std::swap(h[col * (c + 1) + s], h[piv * (c + 1) + s]);
        for (std::size_t r = 0; r < c; ++r) {
          if (r == col) continue;
          const double f = h[r * (c + 1) + col] / h[col * (c + 1) + col];
          for (std::size_t s = col; s <= c; ++s) h[r * (c + 1) + s] -= f * h[col * (c + 1) + s];
        }
      }
      for (std::size_t r = 0; r < c; ++r) step[r] = h[r * (c + 1) + c] / h[r * (c + 1) + r];
      const double f0 = phi(v);
      double slope = 0.0;
      for (std::size_t k = 0; k < c; ++k) slope += grad[k] * step[k];
      double t = 1.0;
      Vec trial(c);
      for (int ls = 0; ls < 60; ++ls) {
        for (std::size_t k = 0; k < c; ++k) trial[k] = v[k] + t * step[k];
        // The slack absorbs rounding once the decrease reaches machine precision.
        if (phi(trial) <= f0 + 1e-4 * t * slope + 8.0 * std::numeric_limits<double>::epsilon() * std::abs(f0)) break;
        t *= 0.5;
      }
      v = trial;
    }
    if (!converged)
      throw ConvergenceError("pointwise_optimum: Newton did not converge at mixture atom " + std::to_string(a));
    std::copy(v.begin(), v.end(), row.begin());
  }
  return out;
}

/// Fraction of examples whose argmax prediction equals the label.
inline double accuracy_from_values(const ClientDataset& data, const SupportTable& values) {
  std::size_t hits = 0;
  for (std::size_t j = 0; j < values.size(); ++j) {
    auto r = values.row(j);
    const auto best = static_cast<double>(std::max_element(r.begin(), r.end()) - r.begin() + 1);
    for (double y : data.labels_at(j)) hits += (y == best);
  }
  return static_cast<double>(hits) / static_cast<double>(data.examples().size());
}

}  // namespace ffgb
