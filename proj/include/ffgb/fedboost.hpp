#pragma once

// Federated functional boosting: FFGB, FFGB.C and FFGB.L client procedures,
// the server loop with partial participation, step schedules, runtime audits
// of the boundedness guarantees, and a parametric FedAvg baseline.
//
// Every client starts a round from the same f^t and the same step schedule, so
// its iterate is g = shrink * f^t + increment with a client-independent shrink.
// Clients return only the increment; the server forms
//   f^{t+1} = shrink * f^t + (1/m) sum_i increment_i.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ffgb/functions.hpp"
#include "ffgb/losses.hpp"
#include "ffgb/measures.hpp"
#include "ffgb/oracles.hpp"
#include "ffgb/random.hpp"
#include "ffgb/serialization.hpp"

namespace ffgb {

enum class Algorithm { FFGB, FFGB_C, FFGB_L, FedAvg };

inline const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::FFGB: return "ffgb";
    case Algorithm::FFGB_C: return "ffgb_c";
    case Algorithm::FFGB_L: return "ffgb_l";
    case Algorithm::FedAvg: return "fedavg";
  }
  return "?";
}

struct Schedule {
  enum class Family { FFGB, FFGB_C_L, Constant, InverseRound };
  Family family = Family::FFGB;
  double mu = 1.0;
  double eta0 = 1.0;
};

/// Step size for local step k (1-based) of round t.
inline double schedule_eta(const Schedule& s, int t, int k, int K) {
  if (t < 0 || k < 1 || k > K) throw std::invalid_argument("schedule_eta: need t >= 0 and 1 <= k <= K");
  const double n = static_cast<double>(t) * K + k + 1;
  switch (s.family) {
    case Schedule::Family::FFGB: return 2.0 / (s.mu * n);
    case Schedule::Family::FFGB_C_L: return 4.0 / (s.mu * n);
    case Schedule::Family::Constant: return s.eta0;
    case Schedule::Family::InverseRound: return s.eta0 / n;
  }
  return 0.0;
}

/// The step actually taken: capped so that 1 - eta * mu stays nonnegative.
inline double usable_step(double eta, double mu) { return mu > 0.0 ? std::min(eta, 1.0 / mu) : eta; }

struct RoundConfig {
  Algorithm algorithm = Algorithm::FFGB;
  LossKind loss = LossKind::CrossEntropy;
  std::size_t classes = 1;
  int K = 1;
  int T = 1;
  std::size_t m = 0;  // clients per round; 0 means all
  double mu = 0.1;
  OracleConfig oracle;
  std::optional<Schedule::Family> schedule;  // default depends on the algorithm
  double eta0 = 1.0;
  std::optional<double> G;
  std::optional<double> B;
  std::optional<double> L;
  bool residual = true;  // false runs the ablation with the residual forced to zero
  std::uint64_t seed = 0;

  int fedavg_local_steps = 1;
  double fedavg_step = 0.1;

  bool compute_optimum = true;
  std::size_t probe_grid = 8;  // per dimension
  std::size_t lip_probe_pairs = 64;
  double audit_tolerance = 1e-9;
};

inline Schedule schedule_for(const RoundConfig& cfg) {
  Schedule s;
  s.family = cfg.schedule.value_or(cfg.algorithm == Algorithm::FFGB ? Schedule::Family::FFGB
                                                                    : Schedule::Family::FFGB_C_L);
  // The Lipschitz variant's update g - eta (g - h) has unit curvature.
  s.mu = cfg.algorithm == Algorithm::FFGB_L ? 1.0 : cfg.mu;
  s.eta0 = cfg.eta0;
  return s;
}

/// Constants the algorithms and audits use. NaN marks "not available".
struct Constants {
  double gamma = 1.0;
  double G = std::numeric_limits<double>::quiet_NaN();
  double G1 = std::numeric_limits<double>::quiet_NaN();
  double G2 = std::numeric_limits<double>::quiet_NaN();
  double B = std::numeric_limits<double>::quiet_NaN();
  double L = std::numeric_limits<double>::quiet_NaN();
  double iterate_bound = std::numeric_limits<double>::quiet_NaN();  // 2G / (gamma mu)
};

inline double max_abs_label(std::span<const ClientDataset> clients) {
  double b = 0.0;
  for (const auto& c : clients)
    for (const auto& e : c.examples()) b = std::max(b, std::abs(e.y));
  return b;
}

inline Constants resolve_constants(const RoundConfig& cfg, std::span<const ClientDataset> clients) {
  Constants k;
  k.gamma = cfg.oracle.gamma;
  if (cfg.G)
    k.G = *cfg.G;
  else if (cfg.loss == LossKind::CrossEntropy)
    k.G = kCrossEntropyGradBound;
  if (std::isfinite(k.G)) {
    k.G1 = (1.0 - k.gamma) * k.G / k.gamma;
    k.G2 = (2.0 - k.gamma) * k.G / k.gamma;
    if (cfg.mu > 0.0) k.iterate_bound = 2.0 * k.G / (k.gamma * cfg.mu);
  }
  if (cfg.L) k.L = *cfg.L;
  if (cfg.B)
    k.B = *cfg.B;
  else if (cfg.algorithm == Algorithm::FFGB_C)
    k.B = k.iterate_bound;
  else if (cfg.algorithm == Algorithm::FFGB_L)
    k.B = max_abs_label(clients);
  return k;
}

/// Every problem with the configuration, not just the first.
inline std::vector<std::string> validate(const RoundConfig& cfg, std::size_t n_clients) {
  std::vector<std::string> errs;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) errs.push_back(msg);
  };
  need(n_clients >= 1, "at least one client is required");
  need(cfg.K >= 1, "K must be >= 1");
  need(cfg.T >= 0, "T must be >= 0");
  need(cfg.m <= n_clients, "m must not exceed the number of clients (" + std::to_string(n_clients) + ")");
  need(cfg.classes >= 1, "output dimension must be >= 1");
  need(cfg.loss == LossKind::CrossEntropy || cfg.classes == 1, "square loss needs a scalar output (classes = 1)");
  need(cfg.loss == LossKind::Square || cfg.classes >= 2, "cross-entropy needs at least 2 classes");
  need(cfg.mu >= 0.0, "mu must be >= 0");
  if (cfg.algorithm == Algorithm::FFGB || cfg.algorithm == Algorithm::FFGB_C)
    need(cfg.mu > 0.0, std::string(to_string(cfg.algorithm)) + " needs mu > 0");
  need(cfg.oracle.gamma > 0.0 && cfg.oracle.gamma <= 1.0, "oracle gamma must lie in (0, 1]");
  need(cfg.oracle.max_depth >= 1, "oracle max_depth must be >= 1");
  need(cfg.oracle.min_leaf >= 1, "oracle min_leaf must be >= 1");
  need(!cfg.oracle.lip_slope || *cfg.oracle.lip_slope > 0.0, "oracle lip_slope must be positive");
  need(!cfg.G || *cfg.G > 0.0, "G must be positive");
  need(!cfg.B || *cfg.B > 0.0, "B must be positive");
  need(!cfg.L || *cfg.L > 0.0, "L must be positive");
  need(cfg.eta0 > 0.0, "eta0 must be positive");
  if (cfg.algorithm == Algorithm::FFGB_C) {
    const bool has_g = cfg.G || cfg.loss == LossKind::CrossEntropy;
    need(has_g, "ffgb_c needs G (no default bound for square loss)");
    if (has_g && cfg.B && cfg.mu > 0.0 && cfg.oracle.gamma > 0.0) {
      const double g = cfg.G.value_or(kCrossEntropyGradBound);
      need(*cfg.B >= 2.0 * g / (cfg.mu * cfg.oracle.gamma) * (1.0 - 1e-12),
           "ffgb_c needs B >= 2G/(mu gamma) = " + std::to_string(2.0 * g / (cfg.mu * cfg.oracle.gamma)));
    }
  }
  if (cfg.algorithm == Algorithm::FFGB_L) {
    need(cfg.loss == LossKind::Square, "ffgb_l needs square loss");
    need(cfg.L.has_value(), "ffgb_l needs the Lipschitz constant L");
  }
  if (cfg.algorithm == Algorithm::FedAvg) {
    need(cfg.fedavg_local_steps >= 0, "fedavg local_steps must be >= 0");
    need(cfg.fedavg_step > 0.0, "fedavg step_size must be positive");
  }
  need(cfg.audit_tolerance >= 0.0, "audit tolerance must be >= 0");
  return errs;
}

class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<std::string> errors)
      : std::invalid_argument(join(errors)), errors_(std::move(errors)) {}
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  static std::string join(const std::vector<std::string>& es) {
    std::string s = "invalid configuration:";
    for (const auto& e : es) s += "\n  - " + e;
    return s;
  }
  std::vector<std::string> errors_;
};

/// Per-round audit results.
class AuditLog {
 public:
  static constexpr std::size_t kMessagesKept = 20;

  void check(bool ok, const std::string& what) {
    if (ok) return;
    ++failures_;
    if (messages_.size() < kMessagesKept) messages_.push_back(what);
  }
  void merge(const AuditLog& other) {
    failures_ += other.failures_;
    for (const auto& m : other.messages_)
      if (messages_.size() < kMessagesKept) messages_.push_back(m);
  }
  std::size_t failures() const { return failures_; }
  const std::vector<std::string>& messages() const { return messages_; }

 private:
  std::size_t failures_ = 0;
  std::vector<std::string> messages_;
};

namespace detail {
inline std::string fmt_num(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

inline bool within(double value, double bound, double tol) { return value <= bound + tol * std::max(1.0, bound); }
}  // namespace detail

/// Points where off-support audits and Lipschitz ratios are evaluated: a grid
/// over the inflated bounding box of the support plus nearby random pairs.
struct ProbeSet {
  std::vector<Point> points;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
};

inline ProbeSet make_probes(const EmpiricalMeasure& support, std::size_t grid, std::size_t pairs, std::uint64_t seed) {
  ProbeSet ps;
  const std::size_t d = support.dim();
  Vec lo(d, std::numeric_limits<double>::infinity()), hi(d, -std::numeric_limits<double>::infinity());
  for (const auto& x : support.points())
    for (std::size_t k = 0; k < d; ++k) lo[k] = std::min(lo[k], x[k]), hi[k] = std::max(hi[k], x[k]);
  double diag = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    const double pad = 0.1 * std::max(hi[k] - lo[k], 1e-3);
    lo[k] -= pad;
    hi[k] += pad;
    diag += (hi[k] - lo[k]) * (hi[k] - lo[k]);
  }
  diag = std::sqrt(diag);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  constexpr std::size_t kMaxGrid = 4096;
  double total = 1.0;
  for (std::size_t k = 0; k < d; ++k) total *= static_cast<double>(grid);
  if (grid >= 2 && total <= static_cast<double>(kMaxGrid)) {
    std::vector<std::size_t> idx(d, 0);
    for (std::size_t n = 0; n < static_cast<std::size_t>(total); ++n) {
      Point x(d);
      for (std::size_t k = 0; k < d; ++k)
        x[k] = lo[k] + (hi[k] - lo[k]) * static_cast<double>(idx[k]) / static_cast<double>(grid - 1);
      ps.points.push_back(std::move(x));
      for (std::size_t k = 0; k < d && ++idx[k] == grid; ++k) idx[k] = 0;
    }
  } else if (grid >= 1) {
    for (std::size_t n = 0; n < std::min<double>(total, kMaxGrid); ++n) {
      Point x(d);
      for (std::size_t k = 0; k < d; ++k) x[k] = rng.uniform(lo[k], hi[k]);
      ps.points.push_back(std::move(x));
    }
  }
  for (std::size_t p = 0; p < pairs; ++p) {
    Point a = support.point(rng.index(support.size()));
    for (double& c : a) c += 0.1 * diag * rng.normal();
    Point b = a;
    for (double& c : b) c += 0.05 * diag * rng.normal();
    ps.pairs.emplace_back(ps.points.size(), ps.points.size() + 1);
    ps.points.push_back(std::move(a));
    ps.points.push_back(std::move(b));
  }
  return ps;
}

/// Row-major values of a function at the probe points.
template <class F>
std::vector<double> evaluate_at(const F& f, std::span<const Point> points, std::size_t dim, double coef = 1.0) {
  std::vector<double> out(points.size() * dim, 0.0);
  for (std::size_t p = 0; p < points.size(); ++p) f.accumulate(points[p], coef, {out.data() + p * dim, dim});
  return out;
}

inline double probe_lipschitz(const ProbeSet& ps, std::span<const double> values, std::size_t dim) {
  double best = 0.0;
  for (auto [a, b] : ps.pairs) {
    const double d = distance(ps.points[a], ps.points[b]);
    if (d <= 0.0) continue;
    best = std::max(best, distance(values.subspan(a * dim, dim), values.subspan(b * dim, dim)) / d);
  }
  return best;
}

inline double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

/// One client's persistent state.
struct ClientState {
  ClientState(std::size_t id_, ClientDataset data_) : id(id_), data(std::move(data_)) {
    residual = SupportTable(data.measure_ptr(), 1);
  }

  std::size_t id;
  ClientDataset data;
  SupportTable residual;  // last residual table

  // FFGB.L: the local steps do not depend on the round, so they are computed once.
  struct LipschitzCache {
    SupportTable target;  // u_i on the support
    std::vector<FunctionExpr> h;
    std::vector<SupportTable> h_on_support;
    std::vector<std::vector<double>> h_on_probes;
    AuditLog audits;  // from building the cache; reported with the first round
    bool reported = false;
  };
  std::optional<LipschitzCache> lcache;
};

struct LocalUpdate {
  std::size_t client = 0;
  double shrink = 1.0;
  Ensemble increment;
  std::size_t models = 0;
  AuditLog audits;

  Ensemble materialize(const Ensemble& f) const {
    Ensemble g = f;
    g.scale_by(shrink);
    g.append(increment, 1.0);
    return g;
  }
};

/// What a client sees of the current global model.
struct RoundContext {
  int t = 0;
  const SupportTable& f_on_support;
  std::span<const double> f_on_probes;
  const ProbeSet& probes;
  const Constants& constants;
};

class ClientError : public std::runtime_error {
 public:
  ClientError(std::size_t client, int step, const std::string& what)
      : std::runtime_error("client " + std::to_string(client) + (step > 0 ? ", step " + std::to_string(step) : "") +
                           ": " + what) {}
};

namespace detail {
inline LearnerPtr ask_oracle(const OracleConfig& cfg, const SupportTable& q, std::size_t client, int step) {
  try {
    return call_oracle(cfg, q);
  } catch (const std::exception& e) {
    throw ClientError(client, step, e.what());
  }
}

inline std::string where(std::size_t client, int t, int k) {
  return "round " + std::to_string(t) + " client " + std::to_string(client) + " step " + std::to_string(k) + ": ";
}
}  // namespace detail

/// FFGB and FFGB.C local procedure.
inline LocalUpdate ffgb_client(ClientState& state, const RoundContext& ctx, const RoundConfig& cfg) {
  const bool clipped = cfg.algorithm == Algorithm::FFGB_C;
  const Constants& kc = ctx.constants;
  const Schedule sched = schedule_for(cfg);
  const std::size_t c = cfg.classes;
  const double tol = cfg.audit_tolerance;
  const auto& support = state.data.measure_ptr();

  LocalUpdate up;
  up.client = state.id;
  up.increment = Ensemble(c);
  SupportTable g = ctx.f_on_support;
  SupportTable delta(support, c);
  const bool audit_g = !clipped && std::isfinite(kc.iterate_bound) && norm_l2(g) <= kc.iterate_bound;

  for (int k = 1; k <= cfg.K; ++k) {
    const double eta = usable_step(schedule_eta(sched, ctx.t, k, cfg.K), cfg.mu);
    const std::string at = detail::where(state.id, ctx.t, k);
    SupportTable grad = subgradient_from_values(cfg.loss, g, state.data, cfg.mu, false);
    if (cfg.loss == LossKind::CrossEntropy)
      up.audits.check(detail::within(norm_linf(grad), kCrossEntropyGradBound, tol),
                      at + "cross-entropy gradient exceeds sqrt(2)");
    SupportTable query = cfg.residual ? table_add(delta, grad) : grad;
    LearnerPtr learner = detail::ask_oracle(cfg.oracle, query, state.id, k);
    FunctionExpr h = FunctionExpr::base(learner);
    SupportTable h_tab = tabulate(h, support);
    SupportTable h_used = h_tab;
    if (clipped) {
      up.audits.check(detail::within(max_abs_coordinate(h_tab), kc.G2, tol),
                      at + "oracle output clipped at G2 = " + detail::fmt_num(kc.G2) + " (max " +
                          detail::fmt_num(max_abs_coordinate(h_tab)) + ")");
      h = FunctionExpr::clip(kc.G2, h);
      h_used = table_clip(h_tab, kc.G2);
    }

    up.shrink *= 1.0 - eta * cfg.mu;
    up.increment = axpy_shrink(up.increment, eta, cfg.mu, h);
    g = table_scale(g, 1.0 - eta * cfg.mu);
    table_axpy(-eta, h_used, g);
    ++up.models;

    if (cfg.residual) {
      SupportTable next = table_sub(table_add(delta, grad), h_tab);
      if (clipped) {
        up.audits.check(detail::within(max_abs_coordinate(next), kc.G1, tol),
                        at + "residual clipped at G1 = " + detail::fmt_num(kc.G1) + " (max " +
                            detail::fmt_num(max_abs_coordinate(next)) + ")");
        delta = table_clip(next, kc.G1);
      } else {
        delta = std::move(next);
        if (std::isfinite(kc.G1))
          up.audits.check(detail::within(norm_l2(delta), kc.G1, tol),
                          at + "residual norm " + detail::fmt_num(norm_l2(delta)) + " exceeds (1-gamma)G/gamma = " +
                              detail::fmt_num(kc.G1));
      }
    }
    if (audit_g)
      up.audits.check(detail::within(norm_l2(g), kc.iterate_bound, tol),
                      at + "iterate norm " + detail::fmt_num(norm_l2(g)) + " exceeds 2G/(gamma mu) = " +
                          detail::fmt_num(kc.iterate_bound));
  }
  state.residual = std::move(delta);
  return up;
}

/// Builds the FFGB.L step cache: h^k fitted to u_i minus the running residual.
inline void build_lipschitz_cache(ClientState& state, const RoundConfig& cfg, const ProbeSet& probes,
                                  const Constants& kc) {
  const auto& data = state.data;
  const auto& support = data.measure_ptr();
  ClientState::LipschitzCache cache;
  cache.target = SupportTable(support, 1);
  std::vector<std::pair<Point, double>> labeled;
  for (std::size_t j = 0; j < support->size(); ++j) {
    const auto ys = data.labels_at(j);
    const double y = std::accumulate(ys.begin(), ys.end(), 0.0) / static_cast<double>(ys.size());
    if (std::any_of(ys.begin(), ys.end(), [&](double v) { return v != ys[0]; }))
      throw ClientError(state.id, 0, "repeated feature point with different labels violates Lipschitz compatibility");
    cache.target.row(j)[0] = y;
    labeled.emplace_back(support->point(j), y);
  }
  try {
    lipschitz_extension(labeled, kc.L);
  } catch (const LipschitzViolation& e) {
    throw ClientError(state.id, 0, e.what());
  }

  const double tol = cfg.audit_tolerance;
  SupportTable delta(support, 1);
  for (int k = 1; k <= cfg.K; ++k) {
    const std::string at = "client " + std::to_string(state.id) + " step " + std::to_string(k) + ": ";
    SupportTable query = table_sub(cache.target, delta);
    FunctionExpr h = FunctionExpr::base(detail::ask_oracle(cfg.oracle, query, state.id, k));
    SupportTable h_tab = tabulate(h, support);
    delta = table_add(table_sub(delta, cache.target), h_tab);
    if (std::isfinite(kc.B)) {
      const double rb = (1.0 - kc.gamma) * kc.B / kc.gamma;
      cache.audits.check(detail::within(max_abs_coordinate(delta), rb, tol),
                         at + "residual sup norm " + detail::fmt_num(max_abs_coordinate(delta)) +
                             " exceeds (1-gamma)B/gamma = " + detail::fmt_num(rb));
      cache.audits.check(detail::within(max_abs_coordinate(h_tab), kc.B / kc.gamma, tol),
                         at + "oracle output sup norm exceeds B/gamma");
    }
    cache.h_on_probes.push_back(evaluate_at(h, probes.points, 1));
    cache.h.push_back(std::move(h));
    cache.h_on_support.push_back(std::move(h_tab));
  }
  state.residual = std::move(delta);
  state.lcache = std::move(cache);
}

/// FFGB.L local procedure: g <- (1 - eta) g + eta h^k with cached h^k.
inline LocalUpdate ffgb_l_client(ClientState& state, const RoundContext& ctx, const RoundConfig& cfg) {
  const Constants& kc = ctx.constants;
  if (!state.lcache) build_lipschitz_cache(state, cfg, ctx.probes, kc);
  auto& cache = *state.lcache;
  const Schedule sched = schedule_for(cfg);
  const double tol = cfg.audit_tolerance;

  LocalUpdate up;
  up.client = state.id;
  up.increment = Ensemble(1);
  if (!cache.reported) {
    up.audits.merge(cache.audits);
    cache.reported = true;
  }
  SupportTable g = ctx.f_on_support;
  std::vector<double> g_probe(ctx.f_on_probes.begin(), ctx.f_on_probes.end());
  for (int k = 1; k <= cfg.K; ++k) {
    const double eta = usable_step(schedule_eta(sched, ctx.t, k, cfg.K), 1.0);
    const std::string at = detail::where(state.id, ctx.t, k);
    const auto idx = static_cast<std::size_t>(k - 1);
    up.shrink *= 1.0 - eta;
    up.increment = shrink_add(up.increment, 1.0 - eta, eta, cache.h[idx]);
    g = table_scale(g, 1.0 - eta);
    table_axpy(eta, cache.h_on_support[idx], g);
    for (std::size_t p = 0; p < g_probe.size(); ++p)
      g_probe[p] = (1.0 - eta) * g_probe[p] + eta * cache.h_on_probes[idx][p];
    ++up.models;
    if (std::isfinite(kc.B))
      up.audits.check(detail::within(max_abs_coordinate(g), kc.B / kc.gamma, tol),
                      at + "iterate sup norm " + detail::fmt_num(max_abs_coordinate(g)) + " exceeds B/gamma");
    const double lip = probe_lipschitz(ctx.probes, g_probe, 1);
    up.audits.check(detail::within(lip, kc.L / kc.gamma, tol),
                    at + "probed Lipschitz ratio " + detail::fmt_num(lip) + " exceeds L/gamma = " +
                        detail::fmt_num(kc.L / kc.gamma));
  }
  return up;
}

/// m distinct client indices, uniformly without replacement, sorted.
inline std::vector<std::size_t> sample_clients(Rng& rng, std::size_t n, std::size_t m) {
  if (m > n) throw std::invalid_argument("sample_clients: m exceeds n");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < m; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
  idx.resize(m);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// shrink * f + (1/|updates|) sum increments.
inline Ensemble aggregate(const Ensemble& f, std::span<const LocalUpdate> updates) {
  if (updates.empty()) throw std::invalid_argument("aggregate: no updates");
  const double shrink = updates.front().shrink;
  for (const auto& u : updates)
    if (u.shrink != shrink) throw std::logic_error("aggregate: clients disagree on the shrink factor");
  Ensemble out = f;
  out.scale_by(shrink);
  const double w = 1.0 / static_cast<double>(updates.size());
  for (const auto& u : updates) out.append(u.increment, w);
  return out;
}

struct RoundRecord {
  int round = 0;
  double dist2_opt = std::numeric_limits<double>::quiet_NaN();
  double objective = std::numeric_limits<double>::quiet_NaN();
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t models_exchanged = 0;
  std::size_t audit_failures = 0;
  std::vector<std::string> audit_messages;

  bool audits_passed() const { return audit_failures == 0; }
};

struct TrainLog {
  std::vector<RoundRecord> rounds;

  static constexpr const char* kHeader = "round,dist2_opt,objective,accuracy,models_exchanged,audits_passed";

  std::size_t audit_failures() const {
    std::size_t n = 0;
    for (const auto& r : rounds) n += r.audit_failures;
    return n;
  }

  void write_csv(std::ostream& os) const {
    os << kHeader << '\n';
    for (const auto& r : rounds)
      os << r.round << ',' << num(r.dist2_opt) << ',' << num(r.objective) << ',' << num(r.accuracy) << ','
         << r.models_exchanged << ',' << (r.audits_passed() ? 1 : 0) << '\n';
  }

  std::string csv() const {
    std::ostringstream os;
    write_csv(os);
    return os.str();
  }

 private:
  static std::string num(double v) {
    if (std::isnan(v)) return "nan";
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
  }
};

/// Parametric model for FedAvg: softmax-linear or linear, theta is
/// classes x (dim + 1) with the bias last in each row.
struct LinearModel {
  std::size_t classes = 1;
  std::size_t dim = 1;
  Vec theta;

  LinearModel() = default;
  LinearModel(std::size_t c, std::size_t d) : classes(c), dim(d), theta(c * (d + 1), 0.0) {}

  void accumulate(std::span<const double> x, double coef, std::span<double> out) const {
    for (std::size_t k = 0; k < classes; ++k) {
      const double* w = theta.data() + k * (dim + 1);
      double s = w[dim];
      for (std::size_t q = 0; q < dim; ++q) s += w[q] * x[q];
      out[k] += coef * s;
    }
  }
  Vec operator()(const Point& x) const {
    Vec out(classes, 0.0);
    accumulate(x, 1.0, out);
    return out;
  }
};

/// Gradient of F_i (risk plus (mu/2)||f||^2 on alpha_i) with respect to theta.
inline Vec fedavg_gradient(const Objective& obj, std::size_t i, const LinearModel& model) {
  const auto& data = obj.clients[i];
  const std::size_t c = model.classes, d = model.dim;
  Vec grad(model.theta.size(), 0.0);
  Vec pred(c), dl(c);
  for (std::size_t j = 0; j < data.measure().size(); ++j) {
    const Point& x = data.measure().point(j);
    std::fill(pred.begin(), pred.end(), 0.0);
    model.accumulate(x, 1.0, pred);
    std::fill(dl.begin(), dl.end(), 0.0);
    const auto ys = data.labels_at(j);
    for (double y : ys) loss_gradient_into(obj.kind, pred, y, 1.0 / static_cast<double>(ys.size()), dl);
    const double w = data.measure().weight(j);
    for (std::size_t k = 0; k < c; ++k) {
      const double r = w * (dl[k] + obj.mu * pred[k]);
      double* gk = grad.data() + k * (d + 1);
      for (std::size_t q = 0; q < d; ++q) gk[q] += r * x[q];
      gk[d] += r;
    }
  }
  return grad;
}

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunResult {
  Ensemble model;
  TrainLog log;
  std::optional<LinearModel> linear;  // FedAvg only
  Checkpoint checkpoint;
  Constants constants;
};

/// Metric bookkeeping on the mixture support.
class MetricTracker {
 public:
  MetricTracker(const RoundConfig& cfg, std::span<const ClientDataset> clients)
      : objective_(cfg.loss, cfg.algorithm == Algorithm::FFGB_L ? 0.0 : cfg.mu, cfg.classes,
                   std::vector<ClientDataset>(clients.begin(), clients.end())),
        mixture_(std::make_shared<const EmpiricalMeasure>(objective_.mixture_measure())) {
    const bool solvable = objective_.kind == LossKind::Square || objective_.mu > 0.0;
    if (cfg.compute_optimum && solvable) optimum_ = pointwise_optimum(objective_);
    for (const auto& c : objective_.clients) {
      std::vector<std::size_t> map;
      for (const auto& x : c.measure().points()) map.push_back(*mixture_->find(x));
      index_.push_back(std::move(map));
      total_examples_ += c.examples().size();
    }
  }

  const Objective& objective() const { return objective_; }
  const MeasurePtr& mixture() const { return mixture_; }
  const std::optional<SupportTable>& optimum() const { return optimum_; }

  SupportTable gather(const SupportTable& on_mixture, std::size_t i) const {
    SupportTable t(objective_.clients[i].measure_ptr(), on_mixture.dim());
    for (std::size_t j = 0; j < t.size(); ++j) {
      auto src = on_mixture.row(index_[i][j]);
      std::copy(src.begin(), src.end(), t.row(j).begin());
    }
    return t;
  }

  RoundRecord record(int round, const SupportTable& f_mix, std::uint64_t models, const AuditLog& audits) const {
    RoundRecord r;
    r.round = round;
    r.models_exchanged = models;
    r.audit_failures = audits.failures();
    r.audit_messages = audits.messages();
    if (optimum_) {
      double s = 0.0;
      for (std::size_t a = 0; a < f_mix.size(); ++a) s += mixture_->weight(a) * squared_distance(f_mix.row(a), optimum_->row(a));
      r.dist2_opt = s;
    }
    double obj = 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < objective_.clients.size(); ++i) {
      SupportTable v = gather(f_mix, i);
      obj += client_objective_from_values(objective_, i, v);
      if (objective_.kind == LossKind::CrossEntropy)
        hits += static_cast<std::size_t>(std::llround(accuracy_from_values(objective_.clients[i], v) *
                                                      static_cast<double>(objective_.clients[i].examples().size())));
    }
    r.objective = obj / static_cast<double>(objective_.clients.size());
    if (objective_.kind == LossKind::CrossEntropy)
      r.accuracy = static_cast<double>(hits) / static_cast<double>(total_examples_);
    return r;
  }

 private:
  Objective objective_;
  MeasurePtr mixture_;
  std::optional<SupportTable> optimum_;
  std::vector<std::vector<std::size_t>> index_;
  std::size_t total_examples_ = 0;
};

namespace detail {

inline RunResult run_fedavg(const RoundConfig& cfg, std::span<const ClientDataset> clients) {
  MetricTracker metrics(cfg, clients);
  const std::size_t n = clients.size();
  const std::size_t m = cfg.m == 0 ? n : cfg.m;
  Rng rng(cfg.seed);
  LinearModel model(cfg.classes, clients.front().dim());
  RunResult out;
  std::uint64_t models = 0;
  auto snapshot = [&](int round) {
    SupportTable f_mix = tabulate(model, metrics.mixture(), cfg.classes);
    RoundRecord r = metrics.record(round, f_mix, models, AuditLog{});
    if (!std::isfinite(r.objective) || r.objective > 1e6)
      throw DivergenceError("fedavg diverged at round " + std::to_string(round) + ": objective " +
                            fmt_num(r.objective) + "; lower step_size");
    out.log.rounds.push_back(std::move(r));
  };
  snapshot(0);
  for (int t = 0; t < cfg.T; ++t) {
    const auto picked = sample_clients(rng, n, m);
    Vec next(model.theta.size(), 0.0);
    for (std::size_t i : picked) {
      LinearModel local = model;
      for (int s = 0; s < cfg.fedavg_local_steps; ++s) {
        const Vec g = fedavg_gradient(metrics.objective(), i, local);
        for (std::size_t q = 0; q < g.size(); ++q) local.theta[q] -= cfg.fedavg_step * g[q];
      }
      for (std::size_t q = 0; q < next.size(); ++q) next[q] += local.theta[q] / static_cast<double>(m);
    }
    model.theta = std::move(next);
    models += 2 * m;
    snapshot(t + 1);
  }
  out.linear = model;
  out.model = Ensemble(cfg.classes);
  out.checkpoint = Checkpoint{cfg.T, models, out.model, rng.state()};
  return out;
}

}  // namespace detail

/// Runs T rounds from f0 (or from a checkpoint) and logs one record per round,
/// plus the initial state as round 0.
inline RunResult server_loop(const RoundConfig& cfg, std::span<const ClientDataset> clients,
                             std::optional<Ensemble> f0 = std::nullopt,
                             const std::optional<Checkpoint>& resume = std::nullopt) {
  if (auto errs = validate(cfg, clients.size()); !errs.empty()) throw ConfigError(std::move(errs));
  for (const auto& c : clients)
    if (c.dim() != clients.front().dim()) throw std::invalid_argument("server_loop: clients disagree on dimension");
  if (cfg.algorithm == Algorithm::FedAvg) return detail::run_fedavg(cfg, clients);

  const std::size_t n = clients.size();
  const std::size_t m = cfg.m == 0 ? n : cfg.m;
  const std::size_t c = cfg.classes;
  RunResult out;
  out.constants = resolve_constants(cfg, clients);
  const Constants& kc = out.constants;
  if (cfg.algorithm == Algorithm::FFGB_L && !std::isfinite(kc.L))
    throw ConfigError({"ffgb_l needs the Lipschitz constant L"});

  MetricTracker metrics(cfg, clients);
  const ProbeSet probes = make_probes(*metrics.mixture(), cfg.probe_grid, cfg.lip_probe_pairs, cfg.seed);
  std::vector<ClientState> states;
  for (std::size_t i = 0; i < n; ++i) states.emplace_back(i, clients[i]);

  Rng rng(cfg.seed);
  Ensemble f = f0.value_or(Ensemble(c));
  int start = 0;
  std::uint64_t models = 0;
  if (resume) {
    f = resume->model;
    start = resume->round;
    models = resume->models_exchanged;
    rng.set_state(resume->rng_state);
  }
  if (f.output_dim() != c) throw std::invalid_argument("server_loop: initial model has the wrong output dimension");

  SupportTable f_mix = tabulate(f, metrics.mixture());
  std::vector<double> f_probe = evaluate_at(f, probes.points, c);
  auto global_audit = [&](AuditLog& log, int round) {
    if (cfg.algorithm != Algorithm::FFGB_C || !std::isfinite(kc.iterate_bound)) return;
    const double sup = std::max(max_abs_coordinate(f_mix), max_abs(f_probe));
    log.check(detail::within(sup, kc.iterate_bound, cfg.audit_tolerance),
              "round " + std::to_string(round) + ": global iterate sup norm " + detail::fmt_num(sup) +
                  " exceeds 2G/(gamma mu) = " + detail::fmt_num(kc.iterate_bound));
  };
  {
    AuditLog initial;
    global_audit(initial, start);
    out.log.rounds.push_back(metrics.record(start, f_mix, models, initial));
  }

  for (int t = start; t < start + cfg.T; ++t) {
    const auto picked = sample_clients(rng, n, m);
    std::vector<LocalUpdate> updates;
    updates.reserve(picked.size());
    for (std::size_t i : picked) {
      SupportTable f_local = metrics.gather(f_mix, i);
      RoundContext ctx{t, f_local, f_probe, probes, kc};
      updates.push_back(cfg.algorithm == Algorithm::FFGB_L ? ffgb_l_client(states[i], ctx, cfg)
                                                           : ffgb_client(states[i], ctx, cfg));
    }
    f = aggregate(f, updates);

    // Advance the tracked values the same way.
    const double shrink = updates.front().shrink;
    for (double& v : f_mix.values()) v *= shrink;
    for (double& v : f_probe) v *= shrink;
    const double w = 1.0 / static_cast<double>(updates.size());
    AuditLog audits;
    for (const auto& u : updates) {
      SupportTable inc = tabulate(u.increment, metrics.mixture());
      table_axpy(w, inc, f_mix);
      const auto inc_probe = evaluate_at(u.increment, probes.points, c, w);
      for (std::size_t p = 0; p < f_probe.size(); ++p) f_probe[p] += inc_probe[p];
      models += u.models;
      audits.merge(u.audits);
    }
    global_audit(audits, t + 1);
    out.log.rounds.push_back(metrics.record(t + 1, f_mix, models, audits));
  }
  out.checkpoint = Checkpoint{start + cfg.T, models, f, rng.state()};
  out.model = std::move(f);
  return out;
}

}  // namespace ffgb
