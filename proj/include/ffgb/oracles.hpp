#pragma once

// Weak learners and weak-learning oracles.
//
// Two oracle families are provided:
//   * regression trees fitted by greedy weighted least squares; their
//     contraction factor is measured, not guaranteed;
//   * the idealized oracle, which returns a Lipschitz extension of
//     gamma * query, so that h = gamma * phi holds exactly on the support and
//     ||h - phi|| = (1 - gamma) ||phi|| in every norm on the support.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ffgb/functions.hpp"
#include "ffgb/measures.hpp"
#include "ffgb/random.hpp"

namespace ffgb {

class RegressionTree final : public WeakLearner {
 public:
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    std::size_t left = 0;
    std::size_t right = 0;
    Vec value;  // leaf prediction
  };

  RegressionTree(std::size_t output_dim, std::vector<Node> nodes) : dim_(output_dim), nodes_(std::move(nodes)) {
    if (nodes_.empty()) throw std::invalid_argument("RegressionTree: no nodes");
  }

  std::size_t output_dim() const override { return dim_; }

  void predict_into(std::span<const double> x, double coef, std::span<double> out) const override {
    const Node& leaf = nodes_[leaf_index(x)];
    for (std::size_t k = 0; k < dim_; ++k) out[k] += coef * leaf.value[k];
  }

  std::size_t leaf_index(std::span<const double> x) const {
    std::size_t i = 0;
    while (nodes_[i].feature >= 0) {
      const Node& n = nodes_[i];
      i = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    }
    return i;
  }

  std::span<const Node> nodes() const { return nodes_; }

  std::size_t depth() const { return depth_from(0); }

  json to_json() const override {
    json nodes = json::array();
    for (const auto& n : nodes_) {
      if (n.feature < 0)
        nodes.push_back({{"leaf", n.value}});
      else
        nodes.push_back({{"feature", n.feature}, {"threshold", n.threshold}, {"left", n.left}, {"right", n.right}});
    }
    return {{"type", "tree"}, {"output_dim", dim_}, {"nodes", std::move(nodes)}};
  }

 private:
  std::size_t depth_from(std::size_t i) const {
    if (nodes_[i].feature < 0) return 0;
    return 1 + std::max(depth_from(nodes_[i].left), depth_from(nodes_[i].right));
  }

  std::size_t dim_;
  std::vector<Node> nodes_;
};

/// Per-coordinate extension min_j (v_jk + s_k ||x - x_j||), capped above at
/// max_j v_jk. Each coordinate is s_k-Lipschitz, interpolates the values, and
/// stays inside [min_j v_jk, max_j v_jk] everywhere.
class ExtensionLearner final : public WeakLearner {
 public:
  ExtensionLearner(std::vector<Point> points, std::vector<Vec> values, Vec slopes)
      : points_(std::move(points)), values_(std::move(values)), slopes_(std::move(slopes)) {
    if (points_.empty() || points_.size() != values_.size())
      throw std::invalid_argument("ExtensionLearner: points and values must be nonempty and aligned");
    dim_ = slopes_.size();
    upper_.assign(dim_, -std::numeric_limits<double>::infinity());
    for (const auto& v : values_) {
      if (v.size() != dim_) throw std::invalid_argument("ExtensionLearner: value dimension mismatch");
      for (std::size_t k = 0; k < dim_; ++k) upper_[k] = std::max(upper_[k], v[k]);
    }
  }

  std::size_t output_dim() const override { return dim_; }

  void predict_into(std::span<const double> x, double coef, std::span<double> out) const override {
    Vec best(dim_, std::numeric_limits<double>::infinity());
    for (std::size_t j = 0; j < points_.size(); ++j) {
      const double d = distance(x, points_[j]);
      for (std::size_t k = 0; k < dim_; ++k) best[k] = std::min(best[k], values_[j][k] + slopes_[k] * d);
    }
    for (std::size_t k = 0; k < dim_; ++k) out[k] += coef * std::min(best[k], upper_[k]);
  }

  std::optional<double> lip_bound() const override { return euclidean_norm(slopes_); }

  const Vec& slopes() const { return slopes_; }
  std::span<const Point> points() const { return points_; }
  std::span<const Vec> values() const { return values_; }

  json to_json() const override {
    return {{"type", "extension"}, {"points", points_}, {"values", values_}, {"slopes", slopes_}};
  }

 private:
  std::size_t dim_ = 0;
  std::vector<Point> points_;
  std::vector<Vec> values_;
  Vec slopes_;
  Vec upper_;
};

struct OracleConfig {
  enum class Kind { Idealized, Tree };
  enum class Target { L2, Linf, Lip };

  Kind kind = Kind::Idealized;
  Target target = Target::L2;
  double gamma = 1.0;
  int max_depth = 3;
  int min_leaf = 1;
  std::optional<double> lip_slope;

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("OracleConfig: gamma must lie in (0, 1]");
    if (max_depth < 1) throw std::invalid_argument("OracleConfig: max_depth must be >= 1");
    if (min_leaf < 1) throw std::invalid_argument("OracleConfig: min_leaf must be >= 1");
    if (lip_slope && !(*lip_slope > 0.0)) throw std::invalid_argument("OracleConfig: lip_slope must be positive");
  }
};

struct OracleReport {
  double gamma_l2 = 1.0;
  double gamma_linf = 1.0;
  double gamma_lip = 1.0;
};

namespace detail {

struct TreeBuilder {
  const SupportTable& query;
  int max_depth;
  std::size_t min_leaf;
  std::vector<RegressionTree::Node> nodes;

  Vec weighted_mean(std::span<const std::size_t> idx) const {
    Vec mean(query.dim(), 0.0);
    double w = 0.0;
    for (std::size_t j : idx) {
      const double wj = query.support().weight(j);
      w += wj;
      auto r = query.row(j);
      for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += wj * r[k];
    }
    for (double& m : mean) m /= w;
    return mean;
  }

  double weighted_sse(std::span<const std::size_t> idx) const {
    const Vec mean = weighted_mean(idx);
    double s = 0.0;
    for (std::size_t j : idx) s += query.support().weight(j) * squared_distance(query.row(j), mean);
    return s;
  }

  std::size_t build(std::vector<std::size_t> idx, int depth) {
    const std::size_t me = nodes.size();
    nodes.push_back({});
    const double parent_sse = weighted_sse(idx);
    const std::size_t c = query.dim();
    const auto& mu = query.support();

    int best_feature = -1;
    double best_threshold = 0.0;
    double best_gain = 0.0;
    if (depth < max_depth && idx.size() >= 2 * min_leaf && parent_sse > 0.0) {
      for (std::size_t f = 0; f < mu.dim(); ++f) {
        std::vector<std::size_t> order = idx;
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return mu.point(a)[f] < mu.point(b)[f]; });
        // Prefix sums of w, w*v and w*|v|^2.
        double total_w = 0.0, total_sq = 0.0;
        Vec total_wv(c, 0.0);
        for (std::size_t j : order) {
          const double w = mu.weight(j);
          auto r = query.row(j);
          total_w += w;
          for (std::size_t k = 0; k < c; ++k) {
            total_wv[k] += w * r[k];
            total_sq += w * r[k] * r[k];
          }
        }
        double left_w = 0.0, left_sq = 0.0;
        Vec left_wv(c, 0.0);
        for (std::size_t p = 0; p + 1 < order.size(); ++p) {
          const std::size_t j = order[p];
          const double w = mu.weight(j);
          auto r = query.row(j);
          left_w += w;
          for (std::size_t k = 0; k < c; ++k) {
            left_wv[k] += w * r[k];
            left_sq += w * r[k] * r[k];
          }
          const double lo = mu.point(j)[f];
          const double hi = mu.point(order[p + 1])[f];
          if (!(lo < hi)) continue;
          if (p + 1 < min_leaf || order.size() - (p + 1) < min_leaf) continue;
          const double right_w = total_w - left_w;
          double l2 = 0.0, r2 = 0.0;
          for (std::size_t k = 0; k < c; ++k) {
            l2 += left_wv[k] * left_wv[k];
            const double rv = total_wv[k] - left_wv[k];
            r2 += rv * rv;
          }
          const double sse = (left_sq - l2 / left_w) + (total_sq - left_sq - r2 / right_w);
          const double gain = parent_sse - sse;
          // Strict improvement keeps the lowest feature, then the smallest threshold.
          if (gain > best_gain + 1e-12 * parent_sse) {
            best_gain = gain;
            best_feature = static_cast<int>(f);
            best_threshold = 0.5 * (lo + hi);
          }
        }
      }
    }

    if (best_feature < 0) {
      nodes[me].value = weighted_mean(idx);
      return me;
    }
    std::vector<std::size_t> left, right;
    for (std::size_t j : idx)
      (mu.point(j)[static_cast<std::size_t>(best_feature)] <= best_threshold ? left : right).push_back(j);
    nodes[me].feature = best_feature;
    nodes[me].threshold = best_threshold;
    const std::size_t l = build(std::move(left), depth + 1);
    const std::size_t r = build(std::move(right), depth + 1);
    nodes[me].left = l;
    nodes[me].right = r;
    return me;
  }
};

/// Smallest per-coordinate slope compatible with the tabulated values.
inline Vec minimal_slopes(std::span<const Point> points, std::span<const Vec> values, std::size_t dim) {
  Vec s(dim, 0.0);
  for (std::size_t a = 0; a < points.size(); ++a)
    for (std::size_t b = a + 1; b < points.size(); ++b) {
      const double d = distance(points[a], points[b]);
      for (std::size_t k = 0; k < dim; ++k) s[k] = std::max(s[k], std::abs(values[a][k] - values[b][k]) / d);
    }
  return s;
}

}  // namespace detail

/// Greedy axis-aligned regression tree on the query, weighted by atom weights.
inline std::shared_ptr<const RegressionTree> fit_tree(const SupportTable& query, int max_depth, int min_leaf = 1) {
  if (query.size() == 0) throw std::invalid_argument("fit_tree: empty support");
  if (max_depth < 0 || min_leaf < 1) throw std::invalid_argument("fit_tree: invalid depth or leaf size");
  detail::TreeBuilder b{query, max_depth, static_cast<std::size_t>(min_leaf), {}};
  std::vector<std::size_t> idx(query.size());
  std::iota(idx.begin(), idx.end(), 0);
  b.build(std::move(idx), 0);
  return std::make_shared<const RegressionTree>(query.dim(), std::move(b.nodes));
}

/// Extension of gamma * query over the support atoms. With `lip_slope` every
/// coordinate uses that slope (it must be compatible with the scaled values);
/// otherwise each coordinate uses its smallest compatible slope.
inline std::shared_ptr<const ExtensionLearner> idealized_oracle(const SupportTable& query, double gamma,
                                                                std::optional<double> lip_slope = std::nullopt) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("idealized_oracle: gamma must lie in (0, 1]");
  const auto& mu = query.support();
  std::vector<Point> points(mu.points().begin(), mu.points().end());
  std::vector<Vec> values(query.size());
  for (std::size_t j = 0; j < query.size(); ++j) {
    auto r = query.row(j);
    values[j].resize(r.size());
    for (std::size_t k = 0; k < r.size(); ++k) values[j][k] = gamma * r[k];
  }
  Vec slopes = detail::minimal_slopes(points, values, query.dim());
  if (lip_slope) {
    for (std::size_t k = 0; k < slopes.size(); ++k)
      if (slopes[k] > *lip_slope * (1.0 + 1e-12) + 1e-15)
        throw std::invalid_argument("idealized_oracle: lip_slope " + std::to_string(*lip_slope) +
                                    " is incompatible with the scaled query (needs " + std::to_string(slopes[k]) +
                                    ")");
    std::fill(slopes.begin(), slopes.end(), *lip_slope);
  }
  return std::make_shared<const ExtensionLearner>(std::move(points), std::move(values), std::move(slopes));
}

inline LearnerPtr call_oracle(const OracleConfig& cfg, const SupportTable& query) {
  if (cfg.kind == OracleConfig::Kind::Idealized) return idealized_oracle(query, cfg.gamma, cfg.lip_slope);
  return fit_tree(query, cfg.max_depth, cfg.min_leaf);
}

/// Discrete Lipschitz seminorm of a table over atom pairs; all pairs when there
/// are at most `pairs` of them, otherwise `pairs` random ones.
inline double table_lipschitz(const SupportTable& t, std::size_t pairs, std::uint64_t seed = 0x5eed) {
  const auto& mu = t.support();
  const std::size_t n = mu.size();
  double best = 0.0;
  auto visit = [&](std::size_t a, std::size_t b) {
    const double d = distance(mu.point(a), mu.point(b));
    if (d > 0.0) best = std::max(best, distance(t.row(a), t.row(b)) / d);
  };
  if (n * (n - 1) / 2 <= pairs) {
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a + 1; b < n; ++b) visit(a, b);
  } else {
    Rng rng(seed);
    for (std::size_t p = 0; p < pairs; ++p) {
      const std::size_t a = rng.index(n);
      std::size_t b = rng.index(n - 1);
      if (b >= a) ++b;
      visit(a, b);
    }
  }
  return best;
}

/// Empirical contraction factors 1 - ||h - phi|| / ||phi|| on the query's support.
inline OracleReport measure_contraction(const WeakLearner& h, const SupportTable& query, std::size_t lip_probes,
                                        std::uint64_t seed = 0x5eed) {
  SupportTable diff(query.support_ptr(), query.dim());
  for (std::size_t j = 0; j < query.size(); ++j) {
    auto r = diff.row(j);
    h.predict_into(query.support().point(j), 1.0, r);
    auto q = query.row(j);
    for (std::size_t k = 0; k < r.size(); ++k) r[k] -= q[k];
  }
  auto ratio = [](double err, double ref) { return ref == 0.0 ? 1.0 : 1.0 - err / ref; };
  OracleReport rep;
  rep.gamma_l2 = ratio(norm_l2(diff), norm_l2(query));
  rep.gamma_linf = ratio(norm_linf(diff), norm_linf(query));
  const double ref_lip = table_lipschitz(query, lip_probes, seed);
  rep.gamma_lip = ref_lip == 0.0 && norm_linf(query) == 0.0 ? 1.0
                  : ref_lip == 0.0 ? (table_lipschitz(diff, lip_probes, seed) == 0.0 ? 1.0 : -INFINITY)
                                   : 1.0 - table_lipschitz(diff, lip_probes, seed) / ref_lip;
  return rep;
}

}  // namespace ffgb
