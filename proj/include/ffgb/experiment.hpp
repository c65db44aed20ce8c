#pragma once

// Experiment configs, sweep expansion, per-cell runs with CSV and summary
// output, and the report over a finished run directory.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "ffgb/data.hpp"
#include "ffgb/fedboost.hpp"
#include "ffgb/measures.hpp"
#include "ffgb/serialization.hpp"

namespace ffgb {

struct DataConfig {
  enum class Source { Synthetic, Csv };
  Source source = Source::Synthetic;
  SyntheticSpec synthetic;
  bool synthetic_seed_set = false;
  std::string csv_path;
  CsvSchema csv_schema;
  PartitionSpec partition;
  bool partition_seed_set = false;
};

struct SweepAxes {
  std::vector<int> K;
  std::vector<double> gamma;
  std::vector<double> s;
  std::vector<double> delta;
  std::vector<double> shift;
  std::vector<std::size_t> m;
};

struct ExperimentConfig {
  DataConfig data;
  RoundConfig round;
  bool classes_set = false;
  SweepAxes sweep;
  std::string output_dir = "ffgb_out";
  bool write_checkpoint = false;
  std::optional<std::string> resume_from;
  json source;  // the parsed document, echoed into the summary
};

/// Every schema violation found, not just the first.
class ExperimentConfigError : public std::invalid_argument {
 public:
  explicit ExperimentConfigError(std::vector<std::string> errors)
      : std::invalid_argument(join(errors)), errors_(std::move(errors)) {}
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  static std::string join(const std::vector<std::string>& es) {
    std::string s = "invalid experiment config (" + std::to_string(es.size()) + " problem" + (es.size() == 1 ? "" : "s") + "):";
    for (const auto& e : es) s += "\n  - " + e;
    return s;
  }
  std::vector<std::string> errors_;
};

namespace detail {

/// Typed field access that records problems instead of throwing.
class ConfigReader {
 public:
  explicit ConfigReader(std::vector<std::string>& errors) : errors_(errors) {}

  void object_keys(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) {
      fail(path, "must be an object");
      return;
    }
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [k, v] : j.items())
      if (!ok.count(k)) fail(join(path, k), "unknown key");
  }

  template <class T>
  std::optional<T> get(const json& j, const std::string& path, const char* key) {
    if (!j.is_object() || !j.contains(key)) return std::nullopt;
    return convert<T>(j.at(key), join(path, key));
  }

  template <class T>
  std::optional<std::vector<T>> list(const json& j, const std::string& path, const char* key) {
    if (!j.is_object() || !j.contains(key)) return std::nullopt;
    const auto& v = j.at(key);
    const std::string p = join(path, key);
    if (!v.is_array()) {
      fail(p, "must be a list");
      return std::nullopt;
    }
    if (v.empty()) fail(p, "must not be empty");
    std::vector<T> out;
    for (std::size_t q = 0; q < v.size(); ++q)
      if (auto x = convert<T>(v[q], p + "[" + std::to_string(q) + "]")) out.push_back(*x);
    return out;
  }

  std::optional<std::string> choice(const json& j, const std::string& path, const char* key,
                                    std::initializer_list<const char*> options) {
    auto s = get<std::string>(j, path, key);
    if (!s) return std::nullopt;
    for (const char* o : options)
      if (*s == o) return s;
    std::string all;
    for (const char* o : options) all += std::string(all.empty() ? "" : ", ") + o;
    fail(join(path, key), "'" + *s + "' is not one of " + all);
    return std::nullopt;
  }

  void fail(const std::string& path, const std::string& what) { errors_.push_back(path + ": " + what); }

  static std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

 private:
  template <class T>
  std::optional<T> convert(const json& v, const std::string& path) {
    if constexpr (std::is_same_v<T, bool>) {
      if (v.is_boolean()) return v.get<bool>();
      fail(path, "must be true or false");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (v.is_string()) return v.get<std::string>();
      fail(path, "must be a string");
    } else if constexpr (std::is_integral_v<T>) {
      if (v.is_number_integer() && (std::is_signed_v<T> || v.get<long long>() >= 0)) return v.get<T>();
      fail(path, std::is_signed_v<T> ? "must be an integer" : "must be a nonnegative integer");
    } else {
      if (v.is_number()) return v.get<T>();
      fail(path, "must be a number");
    }
    return std::nullopt;
  }

  std::vector<std::string>& errors_;
};

}  // namespace detail

inline ExperimentConfig parse_experiment(const json& doc) {
  std::vector<std::string> errs;
  detail::ConfigReader rd(errs);
  ExperimentConfig cfg;
  cfg.source = doc;
  if (!doc.is_object()) throw ExperimentConfigError({"config: top level must be an object"});
  rd.object_keys(doc, "", {"data", "algorithm", "loss", "classes", "K", "T", "m", "mu", "oracle", "schedule", "G", "B",
                           "L", "residual", "seed", "fedavg", "metrics", "sweep", "output_dir", "checkpoint",
                           "resume_from"});
  RoundConfig& rc = cfg.round;

  if (!doc.contains("data")) {
    errs.push_back("data: required");
  } else {
    const json& d = doc.at("data");
    const std::string src = rd.get<std::string>(d, "data", "source").value_or("synthetic");
    if (src == "csv") {
      cfg.data.source = DataConfig::Source::Csv;
      rd.object_keys(d, "data", {"source", "path", "feature_columns", "label_column", "label_kind", "header",
                                 "partition"});
      if (auto p = rd.get<std::string>(d, "data", "path"))
        cfg.data.csv_path = *p;
      else
        errs.push_back("data.path: required for csv data");
      if (auto f = rd.list<std::size_t>(d, "data", "feature_columns")) cfg.data.csv_schema.feature_columns = *f;
      if (auto l = rd.get<std::size_t>(d, "data", "label_column")) cfg.data.csv_schema.label_column = *l;
      if (auto k = rd.choice(d, "data", "label_kind", {"class", "real"}))
        cfg.data.csv_schema.label_kind = *k == "class" ? CsvSchema::LabelKind::Class : CsvSchema::LabelKind::Real;
      if (auto h = rd.get<bool>(d, "data", "header")) cfg.data.csv_schema.header = *h;
      if (!d.contains("partition")) {
        errs.push_back("data.partition: required for csv data");
      } else {
        const json& p = d.at("partition");
        rd.object_keys(p, "data.partition", {"N", "s", "seed"});
        if (auto n = rd.get<std::size_t>(p, "data.partition", "N"))
          cfg.data.partition.N = *n;
        else
          errs.push_back("data.partition.N: required");
        if (auto s = rd.get<double>(p, "data.partition", "s")) cfg.data.partition.s = *s;
        if (auto s = rd.get<std::uint64_t>(p, "data.partition", "seed")) {
          cfg.data.partition.seed = *s;
          cfg.data.partition_seed_set = true;
        }
        if (cfg.data.partition.N < 1) errs.push_back("data.partition.N: must be >= 1");
        if (!(cfg.data.partition.s >= 0.0 && cfg.data.partition.s <= 1.0))
          errs.push_back("data.partition.s: must lie in [0, 1]");
      }
    } else if (src == "synthetic") {
      auto& s = cfg.data.synthetic;
      rd.object_keys(d, "data", {"source", "mode", "d", "c", "N", "M", "seed", "flip_rates", "delta", "shift", "L", "B"});
      if (auto m = rd.choice(d, "data", "mode", {"semi_het", "fully_het", "lipschitz_regression"}))
        s.mode = *m == "semi_het"    ? SyntheticSpec::Mode::SemiHet
                 : *m == "fully_het" ? SyntheticSpec::Mode::FullyHet
                                     : SyntheticSpec::Mode::LipschitzRegression;
      if (auto v = rd.get<std::size_t>(d, "data", "d")) s.d = *v;
      if (auto v = rd.get<std::size_t>(d, "data", "c")) s.c = *v;
      if (auto v = rd.get<std::size_t>(d, "data", "N")) s.N = *v;
      if (auto v = rd.get<std::size_t>(d, "data", "M")) s.M = *v;
      if (auto v = rd.get<std::uint64_t>(d, "data", "seed")) {
        s.seed = *v;
        cfg.data.synthetic_seed_set = true;
      }
      if (auto v = rd.list<double>(d, "data", "flip_rates")) s.flip_rates = *v;
      if (auto v = rd.get<double>(d, "data", "delta")) s.delta = *v;
      if (auto v = rd.get<double>(d, "data", "shift")) s.shift = *v;
      if (auto v = rd.get<double>(d, "data", "L")) s.L = *v;
      if (auto v = rd.get<double>(d, "data", "B")) s.B = *v;
      for (auto& e : validate(s)) errs.push_back(e);
    } else {
      errs.push_back("data.source: '" + src + "' is not one of synthetic, csv");
    }
  }

  if (auto a = rd.choice(doc, "", "algorithm", {"ffgb", "ffgb_c", "ffgb_l", "fedavg"}))
    rc.algorithm = *a == "ffgb" ? Algorithm::FFGB : *a == "ffgb_c" ? Algorithm::FFGB_C : *a == "ffgb_l" ? Algorithm::FFGB_L : Algorithm::FedAvg;
  const bool regression = cfg.data.source == DataConfig::Source::Synthetic &&
                          cfg.data.synthetic.mode == SyntheticSpec::Mode::LipschitzRegression;
  rc.loss = regression || rc.algorithm == Algorithm::FFGB_L ? LossKind::Square : LossKind::CrossEntropy;
  if (auto l = rd.choice(doc, "", "loss", {"cross_entropy", "square"}))
    rc.loss = *l == "square" ? LossKind::Square : LossKind::CrossEntropy;
  if (auto c = rd.get<std::size_t>(doc, "", "classes")) {
    rc.classes = *c;
    cfg.classes_set = true;
  }
  if (auto v = rd.get<int>(doc, "", "K")) rc.K = *v;
  if (auto v = rd.get<int>(doc, "", "T")) rc.T = *v;
  if (auto v = rd.get<std::size_t>(doc, "", "m")) rc.m = *v;
  if (auto v = rd.get<double>(doc, "", "mu")) rc.mu = *v;
  if (rc.algorithm == Algorithm::FFGB_L && !doc.contains("mu")) rc.mu = 0.0;
  if (doc.contains("oracle")) {
    const json& o = doc.at("oracle");
    rd.object_keys(o, "oracle", {"kind", "gamma", "max_depth", "min_leaf", "lip_slope", "target"});
    if (auto k = rd.choice(o, "oracle", "kind", {"idealized", "tree"}))
      rc.oracle.kind = *k == "tree" ? OracleConfig::Kind::Tree : OracleConfig::Kind::Idealized;
    if (auto t = rd.choice(o, "oracle", "target", {"l2", "linf", "lip"}))
      rc.oracle.target = *t == "l2" ? OracleConfig::Target::L2 : *t == "linf" ? OracleConfig::Target::Linf : OracleConfig::Target::Lip;
    if (auto v = rd.get<double>(o, "oracle", "gamma")) rc.oracle.gamma = *v;
    if (auto v = rd.get<int>(o, "oracle", "max_depth")) rc.oracle.max_depth = *v;
    if (auto v = rd.get<int>(o, "oracle", "min_leaf")) rc.oracle.min_leaf = *v;
    if (auto v = rd.get<double>(o, "oracle", "lip_slope")) rc.oracle.lip_slope = *v;
  }
  if (doc.contains("schedule")) {
    const json& s = doc.at("schedule");
    rd.object_keys(s, "schedule", {"family", "eta0"});
    if (auto f = rd.choice(s, "schedule", "family", {"ffgb", "ffgb_c_l", "constant", "inverse_round"}))
      rc.schedule = *f == "ffgb" ? Schedule::Family::FFGB
                    : *f == "ffgb_c_l" ? Schedule::Family::FFGB_C_L
                    : *f == "constant" ? Schedule::Family::Constant
                                       : Schedule::Family::InverseRound;
    if (auto v = rd.get<double>(s, "schedule", "eta0")) rc.eta0 = *v;
  }
  if (auto v = rd.get<double>(doc, "", "G")) rc.G = *v;
  if (auto v = rd.get<double>(doc, "", "B")) rc.B = *v;
  if (auto v = rd.get<double>(doc, "", "L")) rc.L = *v;
  if (auto v = rd.get<bool>(doc, "", "residual")) rc.residual = *v;
  if (auto v = rd.get<std::uint64_t>(doc, "", "seed")) rc.seed = *v;
  if (doc.contains("fedavg")) {
    const json& f = doc.at("fedavg");
    rd.object_keys(f, "fedavg", {"local_steps", "step_size"});
    if (auto v = rd.get<int>(f, "fedavg", "local_steps")) rc.fedavg_local_steps = *v;
    if (auto v = rd.get<double>(f, "fedavg", "step_size")) rc.fedavg_step = *v;
  }
  if (doc.contains("metrics")) {
    const json& m = doc.at("metrics");
    rd.object_keys(m, "metrics", {"compute_optimum", "probe_grid", "lip_probe_pairs", "audit_tolerance"});
    if (auto v = rd.get<bool>(m, "metrics", "compute_optimum")) rc.compute_optimum = *v;
    if (auto v = rd.get<std::size_t>(m, "metrics", "probe_grid")) rc.probe_grid = *v;
    if (auto v = rd.get<std::size_t>(m, "metrics", "lip_probe_pairs")) rc.lip_probe_pairs = *v;
    if (auto v = rd.get<double>(m, "metrics", "audit_tolerance")) rc.audit_tolerance = *v;
  }
  if (doc.contains("sweep")) {
    const json& s = doc.at("sweep");
    rd.object_keys(s, "sweep", {"K", "gamma", "s", "delta", "shift", "m"});
    if (auto v = rd.list<int>(s, "sweep", "K")) cfg.sweep.K = *v;
    if (auto v = rd.list<double>(s, "sweep", "gamma")) cfg.sweep.gamma = *v;
    if (auto v = rd.list<double>(s, "sweep", "s")) cfg.sweep.s = *v;
    if (auto v = rd.list<double>(s, "sweep", "delta")) cfg.sweep.delta = *v;
    if (auto v = rd.list<double>(s, "sweep", "shift")) cfg.sweep.shift = *v;
    if (auto v = rd.list<std::size_t>(s, "sweep", "m")) cfg.sweep.m = *v;
    const bool synthetic = cfg.data.source == DataConfig::Source::Synthetic;
    if (!cfg.sweep.s.empty() && synthetic) errs.push_back("sweep.s: only applies to csv data with a partition");
    if ((!cfg.sweep.delta.empty() || !cfg.sweep.shift.empty()) &&
        (!synthetic || cfg.data.synthetic.mode == SyntheticSpec::Mode::SemiHet))
      errs.push_back("sweep.delta/sweep.shift: only apply to fully_het or lipschitz_regression data");
  }
  if (auto v = rd.get<std::string>(doc, "", "output_dir")) cfg.output_dir = *v;
  if (auto v = rd.get<bool>(doc, "", "checkpoint")) cfg.write_checkpoint = *v;
  if (auto v = rd.get<std::string>(doc, "", "resume_from")) cfg.resume_from = *v;

  // Class count: synthetic data knows it; csv data infers it at load time unless given.
  if (!cfg.classes_set) {
    if (rc.loss == LossKind::Square)
      rc.classes = 1;
    else if (cfg.data.source == DataConfig::Source::Synthetic)
      rc.classes = cfg.data.synthetic.c;
  }
  if (regression && rc.loss != LossKind::Square) errs.push_back("loss: lipschitz_regression data needs square loss");
  if (!regression && cfg.data.source == DataConfig::Source::Synthetic && rc.loss == LossKind::Square)
    errs.push_back("loss: classification data needs cross_entropy loss");

  // Structural checks on the base round config and on every swept value.
  const std::size_t n_clients =
      cfg.data.source == DataConfig::Source::Synthetic ? cfg.data.synthetic.N : cfg.data.partition.N;
  auto check_round = [&](RoundConfig r, const std::string& where) {
    const bool csv_classes_unknown =
        cfg.data.source == DataConfig::Source::Csv && !cfg.classes_set && r.loss == LossKind::CrossEntropy;
    if (csv_classes_unknown) r.classes = 2;
    for (auto& e : validate(r, std::max<std::size_t>(n_clients, 1))) {
      if (n_clients < 1 && e.find("at least one client") != std::string::npos) continue;
      const std::string msg = where + e;
      if (std::find(errs.begin(), errs.end(), msg) == errs.end()) errs.push_back(msg);
    }
  };
  check_round(rc, "");
  for (int k : cfg.sweep.K) {
    RoundConfig r = rc;
    r.K = k;
    check_round(r, "sweep.K=" + std::to_string(k) + ": ");
  }
  for (double g : cfg.sweep.gamma) {
    RoundConfig r = rc;
    r.oracle.gamma = g;
    check_round(r, "sweep.gamma=" + detail::fmt_num(g) + ": ");
  }
  for (std::size_t m : cfg.sweep.m) {
    RoundConfig r = rc;
    r.m = m;
    check_round(r, "sweep.m=" + std::to_string(m) + ": ");
  }
  for (double s : cfg.sweep.s)
    if (!(s >= 0.0 && s <= 1.0)) errs.push_back("sweep.s: " + detail::fmt_num(s) + " must lie in [0, 1]");
  for (double d : cfg.sweep.delta)
    if (!(d >= 0.0 && d <= 1.0)) errs.push_back("sweep.delta: " + detail::fmt_num(d) + " must lie in [0, 1]");
  for (double d : cfg.sweep.shift)
    if (!(d >= 0.0)) errs.push_back("sweep.shift: " + detail::fmt_num(d) + " must be >= 0");
  if (cfg.resume_from && cfg.sweep.K.size() + cfg.sweep.gamma.size() + cfg.sweep.s.size() + cfg.sweep.delta.size() +
                                 cfg.sweep.shift.size() + cfg.sweep.m.size() > 0)
    errs.push_back("resume_from: only supported for single-cell runs");
  if (!errs.empty()) throw ExperimentConfigError(std::move(errs));
  return cfg;
}

inline ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ExperimentConfigError({path + ": cannot open config file"});
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ExperimentConfigError({path + ": JSON parse error: " + e.what()});
  }
  return parse_experiment(doc);
}

/// One point of the sweep grid.
struct Cell {
  std::string name;
  json params = json::object();  // swept values only
  ExperimentConfig config;        // with the swept values applied
};

inline std::string format_param(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

inline std::vector<Cell> expand_sweep(const ExperimentConfig& base) {
  std::vector<Cell> cells{Cell{"cell", json::object(), base}};
  auto axis = [&](const char* key, const auto& values, auto apply) {
    if (values.empty()) return;
    std::vector<Cell> next;
    for (const auto& c : cells)
      for (const auto& v : values) {
        Cell n = c;
        n.name += std::string("_") + key + format_param(static_cast<double>(v));
        n.params[key] = v;
        apply(n.config, v);
        next.push_back(std::move(n));
      }
    cells = std::move(next);
  };
  axis("K", base.sweep.K, [](ExperimentConfig& c, int v) { c.round.K = v; });
  axis("gamma", base.sweep.gamma, [](ExperimentConfig& c, double v) { c.round.oracle.gamma = v; });
  axis("s", base.sweep.s, [](ExperimentConfig& c, double v) { c.data.partition.s = v; });
  axis("delta", base.sweep.delta, [](ExperimentConfig& c, double v) { c.data.synthetic.delta = v; });
  axis("shift", base.sweep.shift, [](ExperimentConfig& c, double v) { c.data.synthetic.shift = v; });
  axis("m", base.sweep.m, [](ExperimentConfig& c, std::size_t v) { c.round.m = v; });
  return cells;
}

inline ExperimentConfig with_seed(ExperimentConfig cfg, std::uint64_t seed) {
  cfg.round.seed = seed;
  cfg.source["seed"] = seed;
  return cfg;
}

/// Client datasets for a config; the data seed defaults to the run seed.
inline std::vector<ClientDataset> build_clients(const ExperimentConfig& cfg, std::vector<std::string>* warnings = nullptr) {
  if (cfg.data.source == DataConfig::Source::Synthetic) {
    SyntheticSpec s = cfg.data.synthetic;
    if (!cfg.data.synthetic_seed_set) s.seed = cfg.round.seed;
    return generate(s);
  }
  CsvResult csv = load_csv(cfg.data.csv_path, cfg.data.csv_schema);
  if (warnings) warnings->insert(warnings->end(), csv.warnings.begin(), csv.warnings.end());
  if (csv.examples.empty()) throw CsvError(cfg.data.csv_path + ": no data rows to partition");
  PartitionSpec p = cfg.data.partition;
  if (!cfg.data.partition_seed_set) p.seed = cfg.round.seed;
  return partition(csv.examples, p);
}

struct Heterogeneity {
  double omega_tv = 0.0;
  std::optional<double> omega_w1;
  std::optional<double> covering_radius;
  std::optional<double> sum_w2_squared;  // over ordered client pairs
};

inline Heterogeneity measure_heterogeneity(std::span<const ClientDataset> clients) {
  std::vector<EmpiricalMeasure> ms;
  for (const auto& c : clients) ms.push_back(c.measure());
  const EmpiricalMeasure mix = mixture(ms);
  Heterogeneity h;
  const auto n = static_cast<double>(ms.size());
  for (const auto& m : ms) h.omega_tv += tv_distance(m, mix) / n;
  try {
    double w1 = 0.0;
    for (const auto& m : ms) w1 += wasserstein(m, mix, 1).distance / n;
    h.omega_w1 = w1;
    double w2 = 0.0;
    for (std::size_t a = 0; a < ms.size(); ++a)
      for (std::size_t b = a + 1; b < ms.size(); ++b) {
        const double d = wasserstein(ms[a], ms[b], 2).distance;
        w2 += 2.0 * d * d;
      }
    h.sum_w2_squared = w2;
  } catch (const std::length_error&) {
    // Too many atoms for the exact solver; reported as null.
  }
  h.covering_radius = ms.size() >= 2 ? support_covering_radius(ms) : 0.0;
  return h;
}

inline json nullable(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
inline json nullable(const std::optional<double>& v) { return v ? nullable(*v) : json(nullptr); }

struct CellResult {
  Cell cell;
  json summary;
  std::string csv;
  std::optional<std::string> error;
};

inline CellResult run_cell(const Cell& cell) {
  CellResult out;
  out.cell = cell;
  const ExperimentConfig& cfg = cell.config;
  std::vector<std::string> warnings;
  std::vector<ClientDataset> clients = build_clients(cfg, &warnings);
  RoundConfig rc = cfg.round;
  if (cfg.data.source == DataConfig::Source::Csv && !cfg.classes_set && rc.loss == LossKind::CrossEntropy) {
    std::vector<LabeledExample> all;
    for (const auto& c : clients) all.insert(all.end(), c.examples().begin(), c.examples().end());
    rc.classes = std::max<std::size_t>(2, infer_classes(all));
  }
  std::optional<Checkpoint> resume;
  if (cfg.resume_from) {
    std::ifstream in(*cfg.resume_from);
    if (!in) throw std::runtime_error(*cfg.resume_from + ": cannot open checkpoint");
    resume = checkpoint_from_json(json::parse(in));
  }
  RunResult run = server_loop(rc, clients, std::nullopt, resume);
  out.csv = run.log.csv();

  const Heterogeneity het = measure_heterogeneity(clients);
  const Constants& k = run.constants;
  std::optional<double> g2_lsq;
  if (std::isfinite(k.L) && std::isfinite(k.B) && het.sum_w2_squared) {
    const auto n = static_cast<double>(clients.size());
    g2_lsq = 2.0 * k.L * k.L / (n * n) * *het.sum_w2_squared + 2.0 * k.B * k.B;
  }
  const RoundRecord& last = run.log.rounds.back();
  json messages = json::array();
  for (const auto& r : run.log.rounds)
    for (const auto& m : r.audit_messages) messages.push_back(m);
  out.summary = {
      {"name", cell.name},
      {"params", cell.params},
      {"csv", cell.name + ".csv"},
      {"algorithm", to_string(rc.algorithm)},
      {"K", rc.K},
      {"T", rc.T},
      {"m", rc.m == 0 ? clients.size() : rc.m},
      {"N", clients.size()},
      {"gamma", rc.oracle.gamma},
      {"final",
       {{"round", last.round},
        {"dist2_opt", nullable(last.dist2_opt)},
        {"objective", nullable(last.objective)},
        {"accuracy", nullable(last.accuracy)},
        {"models_exchanged", last.models_exchanged}}},
      {"heterogeneity",
       {{"omega_tv", het.omega_tv}, {"omega_w1", nullable(het.omega_w1)}, {"D", nullable(het.covering_radius)}}},
      {"constants",
       {{"G", nullable(k.G)},
        {"G1", nullable(k.G1)},
        {"G2", nullable(k.G2)},
        {"B", nullable(k.B)},
        {"L", nullable(k.L)},
        {"iterate_bound", nullable(k.iterate_bound)},
        {"G_squared_least_squares", nullable(g2_lsq)}}},
      {"audit_failures", run.log.audit_failures()},
      {"audit_messages", std::move(messages)},
      {"warnings", warnings},
  };
  if (cfg.write_checkpoint) {
    out.summary["checkpoint"] = cell.name + "_checkpoint.json";
    out.summary["checkpoint_json"] = to_json(run.checkpoint);
  }
  return out;
}

struct RunSummary {
  std::vector<CellResult> cells;
  std::size_t failed = 0;
};

/// Runs every sweep cell (in parallel when threads > 1) and writes
/// <cell>.csv files plus summary.json into the output directory.
inline RunSummary run_experiment(const ExperimentConfig& cfg, std::size_t threads = 1, std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  const std::vector<Cell> cells = expand_sweep(cfg);
  fs::create_directories(cfg.output_dir);
  RunSummary out;
  out.cells.resize(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t q = next++; q < cells.size(); q = next++) {
      CellResult r;
      try {
        r = run_cell(cells[q]);
      } catch (const std::exception& e) {
        r.cell = cells[q];
        r.error = e.what();
      }
      if (log) {
        std::lock_guard lock(log_mutex);
        *log << (r.error ? "FAILED " : "done   ") << cells[q].name;
        if (r.error) *log << ": " << *r.error;
        *log << '\n';
      }
      out.cells[q] = std::move(r);
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(threads, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  json summary = {{"config", cfg.source}, {"cells", json::array()}};
  for (auto& r : out.cells) {
    if (r.error) {
      ++out.failed;
      summary["cells"].push_back({{"name", r.cell.name}, {"params", r.cell.params}, {"error", *r.error}});
      continue;
    }
    std::ofstream(fs::path(cfg.output_dir) / (r.cell.name + ".csv"), std::ios::binary) << r.csv;
    if (r.summary.contains("checkpoint_json")) {
      std::ofstream(fs::path(cfg.output_dir) / r.summary["checkpoint"].get<std::string>())
          << r.summary["checkpoint_json"].dump() << '\n';
      r.summary.erase("checkpoint_json");
    }
    summary["cells"].push_back(r.summary);
  }
  std::ofstream(fs::path(cfg.output_dir) / "summary.json") << summary.dump(2) << '\n';
  return out;
}

class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ReportRow {
  std::string name;
  json params;
  std::string algorithm;
  int K = 0;
  double omega_tv = 0.0;
  std::optional<double> omega_w1;
  double final_dist2 = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t models = 0;
  std::size_t audit_failures = 0;
  std::vector<std::string> audit_messages;
};

namespace detail {

inline double parse_csv_number(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument(s);
  return v;
}

/// Final dist2_opt, models and audit failures recomputed from a TrainLog CSV.
inline void read_trainlog(const std::filesystem::path& path, const std::string& cell, ReportRow& row) {
  std::ifstream in(path);
  if (!in) throw ReportError("cell " + cell + ": CSV " + path.filename().string() + " is missing");
  std::string line;
  if (!std::getline(in, line) || line != TrainLog::kHeader)
    throw ReportError("cell " + cell + ": CSV " + path.filename().string() + " has a corrupt header");
  std::size_t lineno = 1, rows = 0;
  std::size_t failed_rounds = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto f = split_csv_line(line);
    try {
      if (f.size() != 6) throw std::invalid_argument("column count");
      std::stoi(f[0]);
      row.final_dist2 = parse_csv_number(f[1]);
      parse_csv_number(f[2]);
      parse_csv_number(f[3]);
      row.models = std::stoull(f[4]);
      if (f[5] != "0" && f[5] != "1") throw std::invalid_argument("audits_passed");
      if (f[5] == "0") ++failed_rounds;
    } catch (const std::exception&) {
      throw ReportError("cell " + cell + ": CSV " + path.filename().string() + " is corrupt at line " +
                        std::to_string(lineno));
    }
    ++rows;
  }
  if (rows == 0) throw ReportError("cell " + cell + ": CSV " + path.filename().string() + " has no rows");
  if (failed_rounds > 0 && row.audit_failures == 0) row.audit_failures = failed_rounds;
}

inline std::string verdict_key(const json& params, std::initializer_list<const char*> drop) {
  json p = params;
  for (const char* k : drop) p.erase(k);
  return p.dump();
}

}  // namespace detail

struct Report {
  std::vector<ReportRow> rows;  // sorted by K, then by name
  std::vector<std::string> verdicts;
};

inline Report build_report(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path summary_path = fs::path(dir) / "summary.json";
  std::ifstream in(summary_path);
  if (!in) throw ReportError(summary_path.string() + ": missing; is this a run directory?");
  json summary;
  try {
    summary = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ReportError(summary_path.string() + ": corrupt JSON: " + e.what());
  }
  Report rep;
  for (const auto& c : summary.at("cells")) {
    const std::string name = c.at("name").get<std::string>();
    if (c.contains("error")) throw ReportError("cell " + name + " failed during the run: " + c.at("error").get<std::string>());
    ReportRow row;
    row.name = name;
    row.params = c.at("params");
    row.algorithm = c.at("algorithm").get<std::string>();
    row.K = c.at("K").get<int>();
    row.omega_tv = c.at("heterogeneity").at("omega_tv").get<double>();
    if (!c.at("heterogeneity").at("omega_w1").is_null()) row.omega_w1 = c.at("heterogeneity").at("omega_w1").get<double>();
    row.audit_failures = c.at("audit_failures").get<std::size_t>();
    for (const auto& m : c.at("audit_messages")) row.audit_messages.push_back(m.get<std::string>());
    detail::read_trainlog(fs::path(dir) / c.at("csv").get<std::string>(), name, row);
    rep.rows.push_back(std::move(row));
  }
  std::stable_sort(rep.rows.begin(), rep.rows.end(), [](const ReportRow& a, const ReportRow& b) { return a.K < b.K; });

  auto group_verdict = [&](const char* axis, std::initializer_list<const char*> drop, bool increasing, auto key) {
    std::map<std::string, std::vector<const ReportRow*>> groups;
    for (const auto& r : rep.rows)
      if (r.params.contains(axis)) groups[detail::verdict_key(r.params, drop)].push_back(&r);
    for (auto& [g, rows] : groups) {
      if (rows.size() < 2) continue;
      std::stable_sort(rows.begin(), rows.end(), [&](auto* a, auto* b) { return key(*a) < key(*b); });
      std::size_t inversions = 0;
      for (std::size_t q = 1; q < rows.size(); ++q) {
        const double prev = rows[q - 1]->final_dist2, cur = rows[q]->final_dist2;
        if (increasing ? cur < prev : cur > prev) ++inversions;
      }
      rep.verdicts.push_back(std::string(axis) + "-sweep " + (g == "{}" ? "" : g + " ") + "final dist2_opt " +
                             (increasing ? "non-decreasing in omega" : "non-increasing in K") + ": " +
                             (inversions == 0 ? "yes" : "no (" + std::to_string(inversions) + " inversion" +
                                                            (inversions == 1 ? "" : "s") + ")"));
    }
  };
  group_verdict("K", {"K"}, false, [](const ReportRow& r) { return static_cast<double>(r.K); });
  group_verdict("delta", {"delta"}, true, [](const ReportRow& r) { return r.omega_tv; });
  group_verdict("shift", {"shift"}, true, [](const ReportRow& r) { return r.omega_w1.value_or(r.omega_tv); });
  return rep;
}

inline void print_report(const Report& rep, std::ostream& os) {
  os << std::left << std::setw(36) << "cell" << std::setw(8) << "alg" << std::setw(5) << "K" << std::setw(12)
     << "omega_tv" << std::setw(12) << "omega_w1" << std::setw(16) << "dist2_opt" << std::setw(10) << "models"
     << "audits\n";
  for (const auto& r : rep.rows) {
    os << std::left << std::setw(36) << r.name << std::setw(8) << r.algorithm << std::setw(5) << r.K << std::setw(12)
       << format_param(r.omega_tv) << std::setw(12) << (r.omega_w1 ? format_param(*r.omega_w1) : "n/a")
       << std::setw(16) << format_param(r.final_dist2) << std::setw(10) << r.models
       << (r.audit_failures == 0 ? "pass" : "FAIL (" + std::to_string(r.audit_failures) + ")") << '\n';
  }
  if (!rep.verdicts.empty()) os << '\n';
  for (const auto& v : rep.verdicts) os << v << '\n';
  bool header = false;
  for (const auto& r : rep.rows)
    for (const auto& m : r.audit_messages) {
      if (!header) os << "\naudit failures:\n";
      header = true;
      os << "  " << r.name << ": " << m << '\n';
    }
}

}  // namespace ffgb
