#pragma once

// Synthetic federated datasets, the sort-by-label partitioner, CSV ingestion
// and the Lipschitz-compatibility check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ffgb/losses.hpp"
#include "ffgb/measures.hpp"
#include "ffgb/random.hpp"

namespace ffgb {

struct PartitionSpec {
  std::size_t N = 1;
  double s = 0.0;  // iid fraction
  std::uint64_t seed = 0;
};

/// A seeded s-fraction is dealt round-robin (in label order) to the clients; the
/// rest is stably sorted by label and cut into N contiguous blocks.
inline std::vector<ClientDataset> partition(const std::vector<LabeledExample>& data, const PartitionSpec& spec) {
  if (spec.N < 1) throw std::invalid_argument("partition: N must be >= 1");
  if (!(spec.s >= 0.0 && spec.s <= 1.0)) throw std::invalid_argument("partition: s must lie in [0, 1]");
  if (data.size() < spec.N)
    throw std::invalid_argument("partition: " + std::to_string(data.size()) + " examples cannot fill " +
                                std::to_string(spec.N) + " clients");
  const std::size_t n = data.size();
  const auto n_iid = static_cast<std::size_t>(std::llround(spec.s * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(spec.seed);
  rng.shuffle(order);
  std::vector<std::size_t> iid(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_iid));
  std::vector<std::size_t> rest(order.begin() + static_cast<std::ptrdiff_t>(n_iid), order.end());
  auto by_label = [&](std::size_t a, std::size_t b) {
    return data[a].y < data[b].y || (data[a].y == data[b].y && a < b);
  };
  std::sort(iid.begin(), iid.end(), by_label);
  std::sort(rest.begin(), rest.end(), by_label);

  std::vector<std::vector<LabeledExample>> parts(spec.N);
  for (std::size_t q = 0; q < iid.size(); ++q) parts[q % spec.N].push_back(data[iid[q]]);
  for (std::size_t i = 0, pos = 0; i < spec.N; ++i) {
    const std::size_t len = rest.size() / spec.N + (i < rest.size() % spec.N ? 1 : 0);
    for (std::size_t q = 0; q < len; ++q) parts[i].push_back(data[rest[pos++]]);
  }
  std::vector<ClientDataset> out;
  for (std::size_t i = 0; i < spec.N; ++i) {
    if (parts[i].empty()) throw std::invalid_argument("partition: client " + std::to_string(i) + " received no data");
    out.emplace_back(std::move(parts[i]));
  }
  return out;
}

struct SyntheticSpec {
  enum class Mode { SemiHet, FullyHet, LipschitzRegression };
  Mode mode = Mode::SemiHet;
  std::size_t d = 2;
  std::size_t c = 2;  // classes; ignored for regression
  std::size_t N = 2;
  std::size_t M = 10;  // examples per client
  std::uint64_t seed = 0;
  std::vector<double> flip_rates;  // one per client; empty means evenly spaced in [0, 0.5] for SemiHet, none otherwise
  double delta = 0.0;  // FullyHet and regression: fraction of client-specific atoms
  double shift = 3.0;  // displacement of the client-specific atoms
  double L = 1.0;      // regression slope norm
  double B = 1.0;      // regression label cap
};

inline const char* to_string(SyntheticSpec::Mode m) {
  switch (m) {
    case SyntheticSpec::Mode::SemiHet: return "semi_het";
    case SyntheticSpec::Mode::FullyHet: return "fully_het";
    case SyntheticSpec::Mode::LipschitzRegression: return "lipschitz_regression";
  }
  return "?";
}

inline std::vector<std::string> validate(const SyntheticSpec& s) {
  std::vector<std::string> errs;
  if (s.d < 1) errs.push_back("data.d must be >= 1");
  if (s.N < 1) errs.push_back("data.N must be >= 1");
  if (s.M < 1) errs.push_back("data.M must be >= 1");
  if (s.mode != SyntheticSpec::Mode::LipschitzRegression && s.c < 2) errs.push_back("data.c must be >= 2");
  if (!s.flip_rates.empty() && s.flip_rates.size() != s.N)
    errs.push_back("data.flip_rates needs one entry per client (" + std::to_string(s.N) + ")");
  for (double f : s.flip_rates)
    if (!(f >= 0.0 && f <= 1.0)) errs.push_back("data.flip_rates entries must lie in [0, 1]");
  if (!(s.delta >= 0.0 && s.delta <= 1.0)) errs.push_back("data.delta must lie in [0, 1]");
  if (!(s.shift >= 0.0)) errs.push_back("data.shift must be >= 0");
  if (!(s.L > 0.0)) errs.push_back("data.L must be positive");
  if (!(s.B > 0.0)) errs.push_back("data.B must be positive");
  return errs;
}

namespace detail {

struct LinearLabeler {
  std::vector<Vec> w;  // one row per class
  Vec b;

  double label(const Point& x) const {
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < w.size(); ++k) {
      double s = b[k];
      for (std::size_t q = 0; q < x.size(); ++q) s += w[k][q] * x[q];
      if (s > best_score) best_score = s, best = k;
    }
    return static_cast<double>(best + 1);
  }
};

inline Vec unit_direction(Rng& rng, std::size_t d) {
  Vec v(d);
  double n = 0.0;
  do {
    n = 0.0;
    for (double& a : v) {
      a = rng.normal();
      n += a * a;
    }
  } while (n == 0.0);
  for (double& a : v) a /= std::sqrt(n);
  return v;
}

/// Client i's direction: evenly spread on a circle in the first two coordinates.
inline Vec client_direction(std::size_t i, std::size_t n, std::size_t d) {
  Vec v(d, 0.0);
  if (d == 1) {
    v[0] = i % 2 == 0 ? 1.0 : -1.0;
  } else {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n);
    v[0] = std::cos(angle);
    v[1] = std::sin(angle);
  }
  return v;
}

/// Shared base points; client i displaces the first round(delta M) of them.
inline std::vector<std::vector<Point>> shifted_supports(const SyntheticSpec& s, Rng& rng) {
  std::vector<Point> base(s.M, Point(s.d));
  for (auto& x : base)
    for (double& a : x) a = rng.normal();
  const auto r = static_cast<std::size_t>(std::llround(s.delta * static_cast<double>(s.M)));
  std::vector<std::vector<Point>> out(s.N, base);
  for (std::size_t i = 0; i < s.N; ++i) {
    const Vec v = client_direction(i, s.N, s.d);
    for (std::size_t j = 0; j < r; ++j)
      for (std::size_t q = 0; q < s.d; ++q) out[i][j][q] += s.shift * v[q];
  }
  return out;
}

}  // namespace detail

/// Deterministic given the seed.
inline std::vector<ClientDataset> generate(const SyntheticSpec& spec) {
  if (auto errs = validate(spec); !errs.empty()) throw std::invalid_argument("generate: " + errs.front());
  Rng rng(spec.seed);
  std::vector<ClientDataset> out;
  if (spec.mode == SyntheticSpec::Mode::LipschitzRegression) {
    Vec w = detail::unit_direction(rng, spec.d);
    for (double& a : w) a *= spec.L;
    const auto supports = detail::shifted_supports(spec, rng);
    for (const auto& pts : supports) {
      std::vector<LabeledExample> ex;
      for (const auto& x : pts) {
        double y = 0.0;
        for (std::size_t q = 0; q < spec.d; ++q) y += w[q] * x[q];
        ex.push_back({x, std::clamp(y, -spec.B, spec.B)});
      }
      out.emplace_back(std::move(ex));
    }
    return out;
  }

  detail::LinearLabeler labeler;
  for (std::size_t k = 0; k < spec.c; ++k) {
    labeler.w.push_back(detail::unit_direction(rng, spec.d));
    labeler.b.push_back(0.5 * rng.normal());
  }
  // SemiHet shares one support; FullyHet displaces part of it per client.
  SyntheticSpec support_spec = spec;
  if (spec.mode == SyntheticSpec::Mode::SemiHet) support_spec.delta = 0.0;
  const auto supports = detail::shifted_supports(support_spec, rng);
  for (std::size_t i = 0; i < spec.N; ++i) {
    double flip = 0.0;
    if (!spec.flip_rates.empty())
      flip = spec.flip_rates[i];
    else if (spec.mode == SyntheticSpec::Mode::SemiHet && spec.N > 1)
      flip = 0.5 * static_cast<double>(i) / static_cast<double>(spec.N - 1);
    Rng client_rng(spec.seed ^ (0x632be59bd9b4e019ULL * (i + 1)));
    std::vector<LabeledExample> ex;
    for (const auto& x : supports[i]) {
      double y = labeler.label(x);
      if (client_rng.uniform() < flip) {
        // A uniformly chosen different class.
        auto other = static_cast<double>(1 + client_rng.index(spec.c - 1));
        if (other >= y) other += 1.0;
        y = other;
      }
      ex.push_back({x, y});
    }
    out.emplace_back(std::move(ex));
  }
  return out;
}

struct LipschitzReport {
  bool ok = true;
  double worst_ratio = 0.0;
  std::size_t first = 0;  // example indices of the worst pair
  std::size_t second = 0;
};

/// Checks |y_j - y_k| <= L ||x_j - x_k|| over all pairs.
inline LipschitzReport check_lipschitz_compat(const ClientDataset& data, double L, double tol = 1e-12) {
  LipschitzReport r;
  const auto ex = data.examples();
  for (std::size_t j = 0; j < ex.size(); ++j)
    for (std::size_t k = j + 1; k < ex.size(); ++k) {
      const double dy = std::abs(ex[j].y - ex[k].y);
      if (dy == 0.0) continue;
      const double dx = distance(ex[j].x, ex[k].x);
      const double ratio = dx > 0.0 ? dy / dx : std::numeric_limits<double>::infinity();
      if (ratio > r.worst_ratio) r.worst_ratio = ratio, r.first = j, r.second = k;
    }
  r.ok = r.worst_ratio <= L * (1.0 + tol);
  return r;
}

struct CsvSchema {
  enum class LabelKind { Class, Real };
  std::vector<std::size_t> feature_columns;  // zero-based; empty means every column but the label
  std::optional<std::size_t> label_column;   // zero-based; default is the last column
  LabelKind label_kind = LabelKind::Class;
  std::optional<bool> header;  // default detects a non-numeric first row
};

struct CsvResult {
  std::vector<LabeledExample> examples;
  std::vector<std::string> warnings;
};

class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  for (auto& f : out) {
    const auto a = f.find_first_not_of(" \t\r");
    const auto b = f.find_last_not_of(" \t\r");
    f = a == std::string::npos ? std::string() : f.substr(a, b - a + 1);
  }
  return out;
}

inline std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  std::size_t used = 0;
  try {
    const double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace detail

inline CsvResult load_csv(const std::string& path, const CsvSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw CsvError(path + ": cannot open file");
  CsvResult out;
  std::string line;
  std::size_t lineno = 0;
  std::optional<std::size_t> width;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto fields = detail::split_csv_line(line);
    if (first) {
      first = false;
      bool header = false;
      if (schema.header)
        header = *schema.header;
      else
        for (const auto& f : fields) header = header || !detail::parse_number(f);
      width = fields.size();
      if (header) continue;
    }
    const std::string at = path + ":" + std::to_string(lineno);
    if (fields.size() != *width)
      throw CsvError(at + ": expected " + std::to_string(*width) + " columns, found " + std::to_string(fields.size()));
    const std::size_t label_col = schema.label_column.value_or(*width - 1);
    if (label_col >= *width) throw CsvError(at + ": label column " + std::to_string(label_col + 1) + " does not exist");
    std::vector<std::size_t> cols = schema.feature_columns;
    if (cols.empty())
      for (std::size_t q = 0; q < *width; ++q)
        if (q != label_col) cols.push_back(q);
    if (cols.empty()) throw CsvError(at + ": no feature columns");
    LabeledExample ex;
    for (std::size_t q : cols) {
      if (q >= *width) throw CsvError(at + ": feature column " + std::to_string(q + 1) + " does not exist");
      auto v = detail::parse_number(fields[q]);
      if (!v) throw CsvError(at + ", column " + std::to_string(q + 1) + ": non-numeric feature '" + fields[q] + "'");
      ex.x.push_back(*v);
    }
    auto y = detail::parse_number(fields[label_col]);
    if (!y) throw CsvError(at + ", column " + std::to_string(label_col + 1) + ": non-numeric label '" + fields[label_col] + "'");
    if (schema.label_kind == CsvSchema::LabelKind::Class && (*y < 1.0 || *y != std::floor(*y)))
      throw CsvError(at + ", column " + std::to_string(label_col + 1) + ": class labels must be integers >= 1");
    ex.y = *y;
    out.examples.push_back(std::move(ex));
  }
  if (out.examples.empty()) out.warnings.push_back(path + ": no data rows");
  return out;
}

/// Largest label, i.e. the class count for 1..c labels.
inline std::size_t infer_classes(const std::vector<LabeledExample>& data) {
  double c = 0.0;
  for (const auto& e : data) c = std::max(c, e.y);
  return static_cast<std::size_t>(c);
}

}  // namespace ffgb
