#pragma once

// Function-space iterates. FunctionExpr is an immutable expression tree over
// weak learners; Ensemble is the additive boosting model with a lazy global
// multiplier; SupportTable holds values tabulated on one measure's atoms.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "ffgb/measures.hpp"

namespace ffgb {

using json = nlohmann::json;

/// A fitted base model. Implementations must be deterministic and total on R^d.
class WeakLearner {
 public:
  virtual ~WeakLearner() = default;
  virtual std::size_t output_dim() const = 0;
  /// Adds coef * predict(x) into out (out.size() == output_dim()).
  virtual void predict_into(std::span<const double> x, double coef, std::span<double> out) const = 0;
  /// Certified Lipschitz bound, when the construction provides one.
  virtual std::optional<double> lip_bound() const { return std::nullopt; }
  virtual json to_json() const = 0;

  Vec predict(std::span<const double> x) const {
    Vec out(output_dim(), 0.0);
    predict_into(x, 1.0, out);
    return out;
  }
};

using LearnerPtr = std::shared_ptr<const WeakLearner>;

class ConstantLearner final : public WeakLearner {
 public:
  explicit ConstantLearner(Vec value) : value_(std::move(value)) {}
  std::size_t output_dim() const override { return value_.size(); }
  void predict_into(std::span<const double>, double coef, std::span<double> out) const override {
    for (std::size_t k = 0; k < value_.size(); ++k) out[k] += coef * value_[k];
  }
  std::optional<double> lip_bound() const override { return 0.0; }
  json to_json() const override { return {{"type", "constant"}, {"value", value_}}; }
  const Vec& value() const { return value_; }

 private:
  Vec value_;
};

class FunctionExpr {
 public:
  enum class Kind { Zero, Base, Scale, Sum, Clip };

  static FunctionExpr zero(std::size_t dim) { return FunctionExpr(std::make_shared<Node>(Kind::Zero, dim)); }

  static FunctionExpr base(LearnerPtr learner) {
    if (!learner) throw std::invalid_argument("FunctionExpr::base: null learner");
    Node n(Kind::Base, learner->output_dim());
    n.learner = std::move(learner);
    return FunctionExpr(std::make_shared<Node>(std::move(n)));
  }

  static FunctionExpr constant(Vec value) { return base(std::make_shared<ConstantLearner>(std::move(value))); }

  static FunctionExpr scale(double c, FunctionExpr child) {
    Node n(Kind::Scale, child.output_dim());
    n.scalar = c;
    n.children.push_back(std::move(child));
    return FunctionExpr(std::make_shared<Node>(std::move(n)));
  }

  static FunctionExpr sum(std::vector<FunctionExpr> children) {
    if (children.empty()) throw std::invalid_argument("FunctionExpr::sum: no children");
    const std::size_t dim = children.front().output_dim();
    for (const auto& c : children)
      if (c.output_dim() != dim) throw std::invalid_argument("FunctionExpr::sum: output dimension mismatch");
    Node n(Kind::Sum, dim);
    n.children = std::move(children);
    return FunctionExpr(std::make_shared<Node>(std::move(n)));
  }

  static FunctionExpr clip(double radius, FunctionExpr child) {
    if (!(radius > 0.0)) throw std::invalid_argument("FunctionExpr::clip: radius must be positive");
    Node n(Kind::Clip, child.output_dim());
    n.scalar = radius;
    n.children.push_back(std::move(child));
    return FunctionExpr(std::make_shared<Node>(std::move(n)));
  }

  Kind kind() const { return node_->kind; }
  std::size_t output_dim() const { return node_->dim; }
  double scalar() const { return node_->scalar; }
  const LearnerPtr& learner() const { return node_->learner; }
  std::span<const FunctionExpr> children() const { return node_->children; }

  /// out += coef * f(x)
  void accumulate(std::span<const double> x, double coef, std::span<double> out) const {
    const Node& n = *node_;
    switch (n.kind) {
      case Kind::Zero:
        return;
      case Kind::Base:
        n.learner->predict_into(x, coef, out);
        return;
      case Kind::Scale:
        n.children.front().accumulate(x, coef * n.scalar, out);
        return;
      case Kind::Sum:
        for (const auto& c : n.children) c.accumulate(x, coef, out);
        return;
      case Kind::Clip: {
        Vec inner(n.dim, 0.0);
        n.children.front().accumulate(x, 1.0, inner);
        for (std::size_t k = 0; k < n.dim; ++k) out[k] += coef * std::clamp(inner[k], -n.scalar, n.scalar);
        return;
      }
    }
  }

  Vec operator()(std::span<const double> x) const {
    Vec out(output_dim(), 0.0);
    accumulate(x, 1.0, out);
    return out;
  }
  Vec operator()(const Point& x) const { return (*this)(std::span<const double>(x)); }

 private:
  struct Node {
    Node(Kind k, std::size_t d) : kind(k), dim(d) {}
    Kind kind;
    std::size_t dim;
    double scalar = 0.0;
    LearnerPtr learner;
    std::vector<FunctionExpr> children;
  };

  explicit FunctionExpr(std::shared_ptr<const Node> node) : node_(std::move(node)) {}

  std::shared_ptr<const Node> node_;
};

/// lambda * sum_j coef_j * base_j. Stored coefficients are relative to the
/// multiplier so that shrinking the whole model is O(1).
class Ensemble {
 public:
  struct Term {
    double coef;
    FunctionExpr base;
  };

  explicit Ensemble(std::size_t dim = 1) : dim_(dim) {}

  std::size_t output_dim() const { return dim_; }
  double multiplier() const { return multiplier_; }
  std::span<const Term> terms() const { return terms_; }
  std::size_t term_count() const { return terms_.size(); }

  /// Multiplies the whole model by s.
  void scale_by(double s) {
    multiplier_ *= s;
    if (std::abs(multiplier_) < kCompactBelow) compact();
  }

  /// Adds coef * h (coef is absolute, not relative to the multiplier).
  void add_term(double coef, FunctionExpr h) {
    if (h.output_dim() != dim_) throw std::invalid_argument("Ensemble: term output dimension mismatch");
    if (multiplier_ == 0.0) compact();
    terms_.push_back({coef / multiplier_, std::move(h)});
  }

  /// Folds the multiplier into the coefficients.
  void compact() {
    for (auto& t : terms_) t.coef *= multiplier_;
    multiplier_ = 1.0;
  }

  void accumulate(std::span<const double> x, double coef, std::span<double> out) const {
    const double c = coef * multiplier_;
    for (const auto& t : terms_)
      if (t.coef != 0.0) t.base.accumulate(x, c * t.coef, out);
  }

  Vec operator()(std::span<const double> x) const {
    Vec out(dim_, 0.0);
    accumulate(x, 1.0, out);
    return out;
  }
  Vec operator()(const Point& x) const { return (*this)(std::span<const double>(x)); }

  /// The equivalent expression tree Scale(lambda, Sum[Scale(coef_j, base_j)]).
  FunctionExpr expand() const {
    if (terms_.empty()) return FunctionExpr::zero(dim_);
    std::vector<FunctionExpr> parts;
    parts.reserve(terms_.size());
    for (const auto& t : terms_) parts.push_back(FunctionExpr::scale(t.coef, t.base));
    return FunctionExpr::scale(multiplier_, FunctionExpr::sum(std::move(parts)));
  }

  /// Appends all terms of `other`, scaled by s.
  void append(const Ensemble& other, double s) {
    if (other.dim_ != dim_) throw std::invalid_argument("Ensemble: output dimension mismatch");
    for (const auto& t : other.terms_) add_term(s * other.multiplier_ * t.coef, t.base);
  }

  static Ensemble single(FunctionExpr f) {
    Ensemble e(f.output_dim());
    e.add_term(1.0, std::move(f));
    return e;
  }

 private:
  static constexpr double kCompactBelow = 1e-150;

  std::size_t dim_;
  double multiplier_ = 1.0;
  std::vector<Term> terms_;
};

/// shrink * g + coef * h, with one appended term.
inline Ensemble shrink_add(const Ensemble& g, double shrink, double coef, FunctionExpr h) {
  Ensemble out = g;
  out.scale_by(shrink);
  out.add_term(coef, std::move(h));
  return out;
}

/// (1 - eta * mu) * g - eta * h.
inline Ensemble axpy_shrink(const Ensemble& g, double eta, double mu, FunctionExpr h) {
  // eta * mu == 1 is allowed: it zeroes the history, which is well defined.
  if (eta * mu > 1.0 + 1e-12) throw std::invalid_argument("axpy_shrink: eta * mu must not exceed 1");
  return shrink_add(g, 1.0 - eta * mu, -eta, std::move(h));
}

/// Pointwise mean of ensembles; the result carries every term of every input.
inline Ensemble average(std::span<const Ensemble> fs) {
  if (fs.empty()) throw std::invalid_argument("average: empty list");
  Ensemble out(fs.front().output_dim());
  const double s = 1.0 / static_cast<double>(fs.size());
  for (const auto& f : fs) out.append(f, s);
  return out;
}

/// Per-atom value vectors on one measure's support, aligned by atom index.
class SupportTable {
 public:
  SupportTable() = default;
  SupportTable(MeasurePtr support, std::size_t dim)
      : support_(std::move(support)), dim_(dim), values_(support_ ? support_->size() * dim : 0, 0.0) {
    if (!support_) throw std::invalid_argument("SupportTable: null support");
  }

  const EmpiricalMeasure& support() const { return *support_; }
  const MeasurePtr& support_ptr() const { return support_; }
  std::size_t size() const { return support_->size(); }
  std::size_t dim() const { return dim_; }
  std::span<const double> row(std::size_t j) const { return {values_.data() + j * dim_, dim_}; }
  std::span<double> row(std::size_t j) { return {values_.data() + j * dim_, dim_}; }
  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }

  /// Value at a support atom; throws for points off the support.
  Vec operator()(const Point& x) const {
    auto j = support_->find(x);
    if (!j) throw std::out_of_range("SupportTable: point is not a support atom");
    auto r = row(*j);
    return Vec(r.begin(), r.end());
  }

  bool aligned_with(const SupportTable& other) const {
    return dim_ == other.dim_ && (support_ == other.support_ || *support_ == *other.support_);
  }

 private:
  MeasurePtr support_;
  std::size_t dim_ = 0;
  std::vector<double> values_;
};

template <class F>
  requires requires(const F& f, std::span<const double> x, std::span<double> out) { f.accumulate(x, 1.0, out); }
SupportTable tabulate(const F& f, MeasurePtr support, std::size_t dim) {
  SupportTable t(std::move(support), dim);
  for (std::size_t j = 0; j < t.size(); ++j) f.accumulate(t.support().point(j), 1.0, t.row(j));
  return t;
}

inline SupportTable tabulate(const FunctionExpr& f, MeasurePtr support) {
  return tabulate(f, std::move(support), f.output_dim());
}

inline SupportTable tabulate(const Ensemble& f, MeasurePtr support) {
  return tabulate(f, std::move(support), f.output_dim());
}

namespace detail {
inline void require_aligned(const SupportTable& a, const SupportTable& b, const char* op) {
  if (!a.aligned_with(b)) throw std::invalid_argument(std::string(op) + ": support mismatch");
}
}  // namespace detail

inline SupportTable table_add(const SupportTable& a, const SupportTable& b) {
  detail::require_aligned(a, b, "table_add");
  SupportTable out = a;
  auto o = out.values();
  auto v = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += v[i];
  return out;
}

inline SupportTable table_sub(const SupportTable& a, const SupportTable& b) {
  detail::require_aligned(a, b, "table_sub");
  SupportTable out = a;
  auto o = out.values();
  auto v = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= v[i];
  return out;
}

inline SupportTable table_clip(const SupportTable& a, double radius) {
  SupportTable out = a;
  for (double& v : out.values()) v = std::clamp(v, -radius, radius);
  return out;
}

inline SupportTable table_scale(const SupportTable& a, double s) {
  SupportTable out = a;
  for (double& v : out.values()) v *= s;
  return out;
}

/// y <- y + a * x
inline void table_axpy(double a, const SupportTable& x, SupportTable& y) {
  detail::require_aligned(x, y, "table_axpy");
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] += a * xv[i];
}

inline double inner_product(const SupportTable& a, const SupportTable& b) {
  detail::require_aligned(a, b, "inner_product");
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    auto ra = a.row(j);
    auto rb = b.row(j);
    double dot = 0.0;
    for (std::size_t k = 0; k < ra.size(); ++k) dot += ra[k] * rb[k];
    s += a.support().weight(j) * dot;
  }
  return s;
}

inline double norm_l2(const SupportTable& a) { return std::sqrt(std::max(0.0, inner_product(a, a))); }

inline double norm_linf(const SupportTable& a) {
  double m = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) m = std::max(m, euclidean_norm(a.row(j)));
  return m;
}

/// Largest absolute coordinate over all atoms.
inline double max_abs_coordinate(const SupportTable& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace ffgb
