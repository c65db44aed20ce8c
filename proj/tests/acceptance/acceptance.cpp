// Acceptance checks: one PASS/FAIL line per criterion with the measured values.
// Exit status is the number of failing criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "ffgb/ffgb.hpp"
#include "support/brute_force.hpp"

using namespace ffgb;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Every boosting run made here, for the audit and accounting criteria.
struct RunRecord {
  std::string label;
  Algorithm algorithm;
  int K;
  int T;
  std::size_t m;
  TrainLog log;
};
std::vector<RunRecord> g_runs;

RunResult tracked_run(const std::string& label, const RoundConfig& cfg, const std::vector<ClientDataset>& clients) {
  RunResult r = server_loop(cfg, clients);
  g_runs.push_back({label, cfg.algorithm, cfg.K, cfg.T, cfg.m == 0 ? clients.size() : cfg.m, r.log});
  return r;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<ClientDataset> semi_het_data(std::uint64_t seed) {
  SyntheticSpec s;
  s.mode = SyntheticSpec::Mode::SemiHet;
  s.d = 2;
  s.c = 3;
  s.N = 8;
  s.M = 60;
  s.seed = seed;
  return generate(s);
}

RoundConfig semi_het_round(double gamma, int K, int T, std::uint64_t seed) {
  RoundConfig cfg;
  cfg.algorithm = Algorithm::FFGB;
  cfg.loss = LossKind::CrossEntropy;
  cfg.classes = 3;
  cfg.K = K;
  cfg.T = T;
  cfg.mu = 0.1;
  cfg.oracle.gamma = gamma;
  cfg.seed = seed;
  return cfg;
}

Outcome transport_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2024);
  double worst_cost = 0.0, worst_marginal = 0.0;
  for (int pair = 0; pair < 200; ++pair) {
    const std::size_t dim = 1 + rng.index(3);
    auto a = reference::random_measure(rng, dim, 4), b = reference::random_measure(rng, dim, 4);
    for (int p : {1, 2}) {
      const auto w = wasserstein(a, b, p);
      worst_cost = std::max(worst_cost, std::abs(w.distance - reference::brute_force_wasserstein(a, b, p)));
      for (std::size_t j = 0; j < a.size(); ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < b.size(); ++k) s += w.plan.at(j, k);
        worst_marginal = std::max(worst_marginal, std::abs(s - a.weight(j)));
      }
      for (std::size_t k = 0; k < b.size(); ++k) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.size(); ++j) s += w.plan.at(j, k);
        worst_marginal = std::max(worst_marginal, std::abs(s - b.weight(k)));
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst_cost <= 1e-9 && worst_marginal <= 1e-9 && secs < 10.0,
          "200 pairs, p=1,2: max cost gap " + fmt("%.2e", worst_cost) + ", max marginal gap " +
              fmt("%.2e", worst_marginal) + ", " + fmt("%.2f", secs) + " s"};
}

Outcome inequality_suites() {
  Rng rng(77);
  int tv_violations = 0, w1_violations = 0;
  double tv_slack = std::numeric_limits<double>::infinity(), w1_slack = tv_slack;
  for (int trial = 0; trial < 100; ++trial) {
    // TV: bounded functions, |<f,g>_ai - <f,g>_a| <= 2 |f|_inf |g|_inf TV(a, ai).
    const std::size_t n = 2 + rng.index(4);
    std::vector<EmpiricalMeasure> ms;
    for (std::size_t i = 0; i < n; ++i) ms.push_back(reference::random_measure(rng, 2, 6));
    const auto alpha = mixture(ms);
    Vec fv(4), gv(4);
    for (double& v : fv) v = rng.uniform(-3, 3);
    for (double& v : gv) v = rng.uniform(-3, 3);
    auto cell = [](const Point& x) { return (x[0] < 0 ? 0 : 1) + (x[1] < 0 ? 0 : 2); };
    auto f = [&](const Point& x) { return Vec{fv[static_cast<std::size_t>(cell(x))]}; };
    auto g = [&](const Point& x) { return Vec{gv[static_cast<std::size_t>(cell(x))]}; };
    double fi = 0.0, gi = 0.0;
    for (int q = 0; q < 4; ++q) fi = std::max(fi, std::abs(fv[q])), gi = std::max(gi, std::abs(gv[q]));
    for (const auto& ai : ms) {
      const double gap = std::abs(inner_product(f, g, ai) - inner_product(f, g, alpha));
      const double bound = 2.0 * fi * gi * tv_distance(alpha, ai);
      tv_violations += gap > bound + 1e-9;
      tv_slack = std::min(tv_slack, bound - gap);
    }
  }
  for (int trial = 0; trial < 100; ++trial) {
    // W1: Lipschitz functions, gap <= (|f|_lip |g|_inf + |g|_lip |f|_inf) W1(a, ai), sup norms on supp(a).
    const std::size_t n = 2 + rng.index(4);
    std::vector<EmpiricalMeasure> ms;
    for (std::size_t i = 0; i < n; ++i) ms.push_back(reference::random_measure(rng, 2, 6));
    const auto alpha = mixture(ms);
    const Vec w{rng.normal(), rng.normal()};
    const double b0 = rng.normal(), s = rng.uniform(-2, 2), t = rng.normal();
    const Point p{rng.normal(), rng.normal()};
    auto f = [&](const Point& x) { return Vec{w[0] * x[0] + w[1] * x[1] + b0}; };
    auto g = [&](const Point& x) { return Vec{s * std::min(1.0, distance(x, p)) + t}; };
    const double f_lip = euclidean_norm(w), g_lip = std::abs(s);
    const double fi = norm_linf_on_support(f, alpha), gi = norm_linf_on_support(g, alpha);
    for (const auto& ai : ms) {
      const double gap = std::abs(inner_product(f, g, ai) - inner_product(f, g, alpha));
      const double bound = (f_lip * gi + g_lip * fi) * wasserstein(alpha, ai, 1).distance;
      w1_violations += gap > bound + 1e-9;
      w1_slack = std::min(w1_slack, bound - gap);
    }
  }
  return {tv_violations == 0 && w1_violations == 0,
          "TV bound violations " + std::to_string(tv_violations) + " (min slack " + fmt("%.2e", tv_slack) +
              "), W1 bound violations " + std::to_string(w1_violations) + " (min slack " + fmt("%.2e", w1_slack) + ")"};
}

Outcome gradient_correctness() {
  Rng rng(5);
  double worst_ce = 0.0, worst_sq = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 2 + rng.index(5);
    Vec v(c);
    for (double& a : v) a = 2.0 * rng.normal();
    const double y = static_cast<double>(1 + rng.index(c));
    const Vec g = loss_gradient(LossKind::CrossEntropy, v, y);
    Vec fd(c);
    auto f = [&](const Vec& z) { return loss_value(LossKind::CrossEntropy, z, y); };
    for (std::size_t k = 0; k < c; ++k) fd[k] = reference::central_difference(f, v, k, 1e-5);
    Vec diff(c);
    for (std::size_t k = 0; k < c; ++k) diff[k] = fd[k] - g[k];
    worst_ce = std::max(worst_ce, euclidean_norm(diff) / euclidean_norm(g));

    const Vec s{3.0 * rng.normal()};
    const double ys = 3.0 * rng.normal();
    const double gs = loss_gradient(LossKind::Square, s, ys)[0];
    auto fs = [&](const Vec& z) { return loss_value(LossKind::Square, z, ys); };
    worst_sq = std::max(worst_sq, std::abs(reference::central_difference(fs, s, 0, 1e-4) - gs) / std::abs(gs));
  }
  return {worst_ce < 1e-5 && worst_sq < 1e-5,
          "100 points: max relative error cross-entropy " + fmt("%.2e", worst_ce) + ", square " + fmt("%.2e", worst_sq)};
}

Outcome ffgb_convergence() {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig cfg = load_experiment(std::string(FFGB_SOURCE_DIR) + "/configs/ffgb_semi_het.json");
  const auto clients = build_clients(cfg);
  RunResult run = tracked_run("ffgb semi-het gamma=1", cfg.round, clients);
  const double secs = seconds_since(t0);
  const auto& rows = run.log.rounds;
  const double d0 = rows.front().dist2_opt, dT = rows.back().dist2_opt;
  int increases = 0;
  for (std::size_t q = 6; q < rows.size(); ++q) increases += rows[q].dist2_opt > rows[q - 1].dist2_opt;
  return {dT <= 0.01 * d0 && increases == 0 && secs < 60.0,
          "dist2_opt " + fmt("%.4g", d0) + " -> " + fmt("%.4g", dT) + " (ratio " + fmt("%.2e", dT / d0) +
              "), increases after round 5: " + std::to_string(increases) + ", " + fmt("%.2f", secs) + " s"};
}

Outcome residual_necessity() {
  int wins = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto clients = semi_het_data(seed);
    RoundConfig cfg = semi_het_round(0.5, 5, 60, seed);
    const double with = tracked_run("ffgb gamma=0.5", cfg, clients).log.rounds.back().dist2_opt;
    cfg.residual = false;
    const double without = tracked_run("ffgb no-residual gamma=0.5", cfg, clients).log.rounds.back().dist2_opt;
    wins += with <= 0.9 * without;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + ": " + fmt("%.4g", with) +
              " vs " + fmt("%.4g", without);
  }
  return {wins >= 2, std::to_string(wins) + "/3 seeds with >= 10% lower dist2_opt (" + detail + ")"};
}

Outcome local_step_benefit() {
  int inversions = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto clients = semi_het_data(seed);
    std::vector<double> finals;
    for (int K : {1, 2, 4, 8})
      finals.push_back(tracked_run("ffgb K-sweep", semi_het_round(0.5, K, 40, seed), clients).log.rounds.back().dist2_opt);
    for (std::size_t q = 1; q < finals.size(); ++q) inversions += finals[q] > finals[q - 1];
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + ":";
    for (double f : finals) detail += " " + fmt("%.3g", f);
  }
  return {inversions <= 1, "K=1,2,4,8 final dist2_opt (" + detail + "), adjacent inversions " + std::to_string(inversions)};
}

std::vector<ClientDataset> fully_het_data(double delta, std::uint64_t seed) {
  SyntheticSpec s;
  s.mode = SyntheticSpec::Mode::FullyHet;
  s.d = 2;
  s.c = 3;
  s.N = 8;
  s.M = 56;
  s.delta = delta;
  s.shift = 3.0;
  s.seed = seed;
  for (std::size_t i = 0; i < s.N; ++i) s.flip_rates.push_back(0.5 * static_cast<double>(i) / 7.0);
  return generate(s);
}

std::vector<ClientDataset> regression_data(double shift, std::uint64_t seed) {
  SyntheticSpec s;
  s.mode = SyntheticSpec::Mode::LipschitzRegression;
  s.d = 2;
  s.N = 8;
  s.M = 56;
  s.delta = 4.0 / 7.0;
  s.shift = shift;
  s.L = 1.0;
  s.B = 2.0;
  s.seed = seed;
  return generate(s);
}

Outcome heterogeneity_trend() {
  bool tv_monotone = true, w1_monotone = true, matched = true;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    std::vector<double> omegas, finals;
    for (double delta : {0.0, 2.0 / 7.0, 4.0 / 7.0}) {
      const auto clients = fully_het_data(delta, seed);
      RoundConfig cfg = semi_het_round(0.5, 5, 60, seed);
      cfg.algorithm = Algorithm::FFGB_C;
      omegas.push_back(measure_heterogeneity(clients).omega_tv);
      finals.push_back(tracked_run("ffgb_c tv-sweep", cfg, clients).log.rounds.back().dist2_opt);
      if (delta == 0.0) {
        cfg.algorithm = Algorithm::FFGB;
        const double ref = tracked_run("ffgb at omega=0", cfg, clients).log.rounds.back().dist2_opt;
        const double rel = std::abs(finals.back() - ref) / ref;
        matched = matched && rel <= 0.2;
        detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) +
                  ": omega=0 FFGB.C/FFGB rel diff " + fmt("%.3f", rel);
      }
    }
    for (std::size_t q = 1; q < finals.size(); ++q) tv_monotone = tv_monotone && finals[q] >= finals[q - 1];
    detail += ", omega_tv";
    for (double o : omegas) detail += " " + fmt("%.3g", o);
    detail += " -> dist2";
    for (double f : finals) detail += " " + fmt("%.3g", f);

    std::vector<std::pair<double, double>> w1_points;
    for (double shift : {0.0, 1.0, 2.0, 4.0}) {
      const auto clients = regression_data(shift, seed);
      RoundConfig cfg;
      cfg.algorithm = Algorithm::FFGB_L;
      cfg.loss = LossKind::Square;
      cfg.classes = 1;
      cfg.K = 5;
      cfg.T = 60;
      cfg.mu = 0.0;
      cfg.L = 1.0;
      cfg.oracle.gamma = 0.5;
      cfg.oracle.lip_slope = 1.0;
      cfg.seed = seed;
      w1_points.emplace_back(*measure_heterogeneity(clients).omega_w1,
                             tracked_run("ffgb_l w1-sweep", cfg, clients).log.rounds.back().dist2_opt);
    }
    std::sort(w1_points.begin(), w1_points.end());
    for (std::size_t q = 1; q < w1_points.size(); ++q)
      w1_monotone = w1_monotone && w1_points[q].second >= w1_points[q - 1].second;
    detail += ", omega_w1/dist2";
    for (auto [o, f] : w1_points) detail += " " + fmt("%.3g", o) + "/" + fmt("%.3g", f);
  }
  return {tv_monotone && w1_monotone && matched,
          std::string("FFGB.C monotone in omega_tv: ") + (tv_monotone ? "yes" : "no") +
              ", FFGB.L monotone in omega_w1: " + (w1_monotone ? "yes" : "no") + ", omega=0 match: " +
              (matched ? "yes" : "no") + " (" + detail + ")"};
}

Outcome partial_participation() {
  const auto clients = semi_het_data(9);
  const RoundConfig cfg = semi_het_round(0.5, 3, 1, 9);
  const std::size_t n = clients.size(), m = n / 2, c = cfg.classes;
  std::vector<ClientDataset> all(clients.begin(), clients.end());
  MetricTracker metrics(cfg, clients);
  const ProbeSet probes = make_probes(*metrics.mixture(), 2, 0, 1);
  const Constants kc = resolve_constants(cfg, clients);
  const SupportTable zero_mix(metrics.mixture(), c);
  const std::vector<double> zero_probe(probes.points.size() * c, 0.0);
  std::vector<LocalUpdate> updates;
  for (std::size_t i = 0; i < n; ++i) {
    ClientState st(i, clients[i]);
    const SupportTable f_local = metrics.gather(zero_mix, i);
    updates.push_back(ffgb_client(st, RoundContext{0, f_local, zero_probe, probes, kc}, cfg));
  }
  const Ensemble f0(c);
  const Ensemble full = aggregate(f0, updates);

  // Ten probe points spread over the data.
  std::vector<Point> points;
  Rng pick(3);
  for (int q = 0; q < 10; ++q) {
    Point x = metrics.mixture()->point(pick.index(metrics.mixture()->size()));
    for (double& a : x) a += 0.2 * pick.normal();
    points.push_back(std::move(x));
  }
  // Client outputs at the probes, fixed for the whole experiment.
  std::vector<std::vector<Vec>> out(n);
  for (std::size_t i = 0; i < n; ++i)
    for (const auto& x : points) out[i].push_back(updates[i].materialize(f0)(x));

  Rng rng(4);
  const int draws = 1000;
  std::vector<Vec> sum(points.size(), Vec(c, 0.0)), sum2(points.size(), Vec(c, 0.0));
  for (int d = 0; d < draws; ++d) {
    const auto picked = sample_clients(rng, n, m);
    std::vector<LocalUpdate> chosen;
    for (auto i : picked) chosen.push_back(updates[i]);
    const Ensemble f = aggregate(f0, chosen);
    for (std::size_t p = 0; p < points.size(); ++p) {
      const Vec v = f(points[p]);
      for (std::size_t k = 0; k < c; ++k) sum[p][k] += v[k], sum2[p][k] += v[k] * v[k];
    }
  }
  double worst_z = 0.0;
  for (std::size_t p = 0; p < points.size(); ++p) {
    const Vec target = full(points[p]);
    for (std::size_t k = 0; k < c; ++k) {
      const double mean = sum[p][k] / draws;
      const double var = std::max(0.0, sum2[p][k] / draws - mean * mean) * draws / (draws - 1.0);
      const double se = std::sqrt(var / draws);
      const double z = se > 0 ? std::abs(mean - target[k]) / se : (mean == target[k] ? 0.0 : INFINITY);
      worst_z = std::max(worst_z, z);
    }
  }
  return {worst_z <= 3.0, "1000 draws, m=" + std::to_string(m) + " of " + std::to_string(n) +
                              ", 10 probes x " + std::to_string(c) + " outputs: max |mean - full| / SE = " +
                              fmt("%.2f", worst_z)};
}

Outcome communication_accounting() {
  // FedAvg runs with full and partial participation.
  const auto clients = semi_het_data(11);
  for (std::size_t m : {std::size_t{8}, std::size_t{3}}) {
    RoundConfig cfg = semi_het_round(1.0, 1, 20, 11);
    cfg.algorithm = Algorithm::FedAvg;
    cfg.m = m;
    cfg.fedavg_local_steps = 3;
    cfg.fedavg_step = 0.5;
    RunResult r = server_loop(cfg, clients);
    g_runs.push_back({"fedavg", cfg.algorithm, cfg.K, cfg.T, m, r.log});
  }
  for (std::size_t m : {std::size_t{2}, std::size_t{5}}) {
    RoundConfig cfg = semi_het_round(0.5, 3, 10, 12);
    cfg.m = m;
    tracked_run("ffgb partial participation", cfg, clients);
  }
  std::size_t checked = 0, wrong = 0;
  for (const auto& run : g_runs) {
    for (const auto& row : run.log.rounds) {
      const auto t = static_cast<std::uint64_t>(row.round);
      const std::uint64_t expect =
          run.algorithm == Algorithm::FedAvg ? 2 * t * run.m : t * run.m * static_cast<std::uint64_t>(run.K);
      wrong += row.models_exchanged != expect;
    }
    ++checked;
  }
  return {wrong == 0, std::to_string(checked) + " runs, every round's models_exchanged equals T*m*K (boosting) or "
                                                 "2*T*m (FedAvg); mismatches " + std::to_string(wrong)};
}

Outcome boundedness_audits() {
  std::size_t runs = 0, steps = 0, failures = 0;
  std::string first;
  for (const auto& run : g_runs) {
    if (run.algorithm == Algorithm::FedAvg) continue;
    ++runs;
    steps += static_cast<std::size_t>(run.T) * run.m * static_cast<std::size_t>(run.K);
    for (const auto& row : run.log.rounds) {
      failures += row.audit_failures;
      if (first.empty() && !row.audit_messages.empty()) first = run.label + ": " + row.audit_messages.front();
    }
  }
  return {failures == 0 && runs > 0, std::to_string(runs) + " idealized-oracle runs, " + std::to_string(steps) +
                                         " client steps audited, failures " + std::to_string(failures) +
                                         (first.empty() ? "" : " (first: " + first + ")")};
}

Outcome determinism() {
  const std::string path = std::string(FFGB_SOURCE_DIR) + "/configs/ffgb_semi_het.json";
  std::vector<std::string> bodies;
  for (const char* sub : {"a", "b"}) {
    ExperimentConfig cfg = load_experiment(path);
    cfg.output_dir = (fs::temp_directory_path() / "ffgb_acceptance_determinism" / sub).string();
    fs::remove_all(cfg.output_dir);
    run_experiment(cfg);
    std::ifstream in(fs::path(cfg.output_dir) / "cell.csv", std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    bodies.push_back(ss.str());
  }
  const bool same = !bodies[0].empty() && bodies[0] == bodies[1];
  return {same, "two runs of the convergence config: " + std::to_string(bodies[0].size()) + " and " +
                    std::to_string(bodies[1].size()) + " bytes, " + (same ? "identical" : "DIFFERENT")};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> check;
  };
  // Criteria 7 and 10 inspect the runs made by the others, so they go last.
  const std::vector<Criterion> order{
      {1, "OT oracle equivalence", transport_equivalence},
      {2, "inequality suites", inequality_suites},
      {3, "gradient correctness", gradient_correctness},
      {4, "FFGB convergence", ffgb_convergence},
      {5, "residual necessity", residual_necessity},
      {6, "local-step benefit", local_step_benefit},
      {8, "heterogeneity-radius trend", heterogeneity_trend},
      {9, "partial participation", partial_participation},
      {11, "determinism", determinism},
      {10, "communication accounting", communication_accounting},
      {7, "boundedness audits", boundedness_audits},
  };
  std::vector<std::pair<int, std::string>> lines;
  int failed = 0;
  for (const auto& c : order) {
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::string line = std::string(o.pass ? "PASS" : "FAIL") + " criterion " + std::to_string(c.id) + " (" + c.name +
                       "): " + o.detail;
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    lines.emplace_back(c.id, std::move(line));
  }
  std::sort(lines.begin(), lines.end());
  std::printf("\nsummary (%d of %zu failing):\n", failed, lines.size());
  for (const auto& [id, line] : lines) std::printf("  %s\n", line.substr(0, line.find(':')).c_str());
  return failed;
}
