#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "ffgb/functions.hpp"
#include "ffgb/measures.hpp"
#include "support/brute_force.hpp"

using namespace ffgb;

namespace {

EmpiricalMeasure uni(std::vector<Point> pts) { return EmpiricalMeasure::uniform(pts); }

struct Values {
  // Scalar function given by its values at listed points, zero elsewhere.
  std::vector<std::pair<Point, double>> table;
  Vec operator()(const Point& x) const {
    for (const auto& [p, v] : table)
      if (p == x) return {v};
    return {0.0};
  }
};

}  // namespace

TEST(EmpiricalMeasure, MergesDuplicateAtoms) {
  EmpiricalMeasure m(1, {{{0.0}, 0.25}, {{1.0}, 0.5}, {{0.0}, 0.25}});
  ASSERT_EQ(m.size(), 2u);
  EXPECT_DOUBLE_EQ(m.weight(*m.find({0.0})), 0.5);
}

TEST(EmpiricalMeasure, RejectsBadWeights) {
  EXPECT_THROW(EmpiricalMeasure(1, {{{0.0}, 0.5}}), std::invalid_argument);
  EXPECT_THROW(EmpiricalMeasure(1, {{{0.0}, 1.5}, {{1.0}, -0.5}}), std::invalid_argument);
  EXPECT_THROW(EmpiricalMeasure(1, {{{NAN}, 1.0}}), std::invalid_argument);
  EXPECT_THROW(EmpiricalMeasure(2, {{{0.0}, 1.0}}), std::invalid_argument);
}

TEST(Mixture, OverlappingUniforms) {
  std::vector<EmpiricalMeasure> ms{uni({{0.0}, {1.0}}), uni({{1.0}, {2.0}})};
  auto m = mixture(ms);
  ASSERT_EQ(m.size(), 3u);
  EXPECT_DOUBLE_EQ(m.weight(0), 0.25);
  EXPECT_DOUBLE_EQ(m.weight(1), 0.5);
  EXPECT_DOUBLE_EQ(m.weight(2), 0.25);
}

TEST(Mixture, SingleIsIdentityAndWeighted) {
  auto a = uni({{0.0}, {3.0}});
  std::vector<EmpiricalMeasure> one{a};
  EXPECT_EQ(mixture(one), a);
  std::vector<EmpiricalMeasure> two{uni({{0.0}}), uni({{1.0}})};
  std::vector<double> w{0.9, 0.1};
  auto m = mixture(two, w);
  EXPECT_DOUBLE_EQ(m.weight(0), 0.9);
  EXPECT_DOUBLE_EQ(m.weight(1), 0.1);
}

TEST(Mixture, Errors) {
  std::vector<EmpiricalMeasure> none;
  EXPECT_THROW(mixture(none), std::invalid_argument);
  std::vector<EmpiricalMeasure> mixed{uni({{0.0}}), uni({{0.0, 1.0}})};
  EXPECT_THROW(mixture(mixed), std::invalid_argument);
}

TEST(InnerProduct, Examples) {
  auto mu = uni({{0.0}, {1.0}});
  auto zero = [](const Point&) { return Vec{0.0}; };
  auto one = [](const Point&) { return Vec{1.0}; };
  Values g{{{{0.0}, 2.0}, {{1.0}, 4.0}}};
  EXPECT_DOUBLE_EQ(inner_product(zero, g, mu), 0.0);
  EXPECT_DOUBLE_EQ(inner_product(one, g, mu), 3.0);

  EmpiricalMeasure nu(1, {{{0.0}, 0.25}, {{1.0}, 0.75}});
  Values f{{{{0.0}, 1.0}, {{1.0}, 2.0}}};
  Values h{{{{0.0}, 3.0}, {{1.0}, -1.0}}};
  EXPECT_DOUBLE_EQ(inner_product(f, h, nu), -0.75);
}

TEST(Norms, Examples) {
  auto mu = uni({{0.0}, {1.0}});
  Values f{{{{0.0}, 3.0}, {{1.0}, 4.0}}};
  EXPECT_DOUBLE_EQ(norm_l2(f, mu), std::sqrt(12.5));
  EXPECT_DOUBLE_EQ(norm_linf_on_support(f, mu), 4.0);
  auto c = [](const Point&) { return Vec{-2.5}; };
  EXPECT_DOUBLE_EQ(norm_l2(c, mu), 2.5);
  EXPECT_DOUBLE_EQ(norm_linf_on_support(c, mu), 2.5);
}

TEST(TotalVariation, Examples) {
  auto a = uni({{0.0}, {1.0}});
  EXPECT_DOUBLE_EQ(tv_distance(a, a), 0.0);
  EXPECT_DOUBLE_EQ(tv_distance(a, uni({{5.0}})), 1.0);
  EXPECT_DOUBLE_EQ(tv_distance(a, uni({{1.0}, {2.0}})), 0.5);
}

TEST(TotalVariation, MatchesSupOverSubsets) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = reference::random_measure(rng, 1, 5);
    auto b = reference::random_measure(rng, 1, 5);
    std::vector<Point> all(a.points().begin(), a.points().end());
    all.insert(all.end(), b.points().begin(), b.points().end());
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    double best = 0.0;
    for (std::size_t mask = 0; mask < (1u << all.size()); ++mask) {
      double s = 0.0;
      for (std::size_t q = 0; q < all.size(); ++q) {
        if (!(mask >> q & 1u)) continue;
        if (auto j = a.find(all[q])) s += a.weight(*j);
        if (auto j = b.find(all[q])) s -= b.weight(*j);
      }
      best = std::max(best, std::abs(s));
    }
    EXPECT_NEAR(tv_distance(a, b), best, 1e-12);
  }
}

TEST(Wasserstein, Examples) {
  EXPECT_DOUBLE_EQ(wasserstein(uni({{0.0, 0.0}}), uni({{3.0, 4.0}}), 1).distance, 5.0);
  auto a = uni({{0.0}, {2.0}});
  EXPECT_NEAR(wasserstein(a, a, 1).distance, 0.0, 1e-15);
  EXPECT_NEAR(wasserstein(a, a, 2).distance, 0.0, 1e-15);
  EXPECT_NEAR(wasserstein(a, uni({{1.0}, {3.0}}), 1).distance, 1.0, 1e-12);
}

TEST(Wasserstein, MetricProperties) {
  Rng rng(5);
  for (int trial = 0; trial < 60; ++trial) {
    auto a = reference::random_measure(rng, 2, 10);
    auto b = reference::random_measure(rng, 2, 10);
    auto c = reference::random_measure(rng, 2, 10);
    for (int p : {1, 2}) {
      const double ab = wasserstein(a, b, p).distance;
      EXPECT_NEAR(ab, wasserstein(b, a, p).distance, 1e-9);
      EXPECT_GE(ab, 0.0);
      EXPECT_LE(ab, wasserstein(a, c, p).distance + wasserstein(c, b, p).distance + 1e-9);
      EXPECT_EQ(ab < 1e-12, a == b);
    }
    EXPECT_LE(wasserstein(a, b, 1).distance, wasserstein(a, b, 2).distance + 1e-9);
    const double t = tv_distance(a, b);
    EXPECT_LE(t, tv_distance(a, c) + tv_distance(c, b) + 1e-12);
    EXPECT_EQ(t < 1e-15, a == b);
  }
}

TEST(Wasserstein, PlanCostAndMarginals) {
  Rng rng(9);
  for (int trial = 0; trial < 40; ++trial) {
    auto a = reference::random_measure(rng, 2, 8);
    auto b = reference::random_measure(rng, 2, 8);
    for (int p : {1, 2}) {
      auto r = wasserstein(a, b, p);
      const double c = plan_cost(r.plan, p);
      EXPECT_NEAR(p == 1 ? c : std::sqrt(c), r.distance, 1e-9);
      for (std::size_t j = 0; j < a.size(); ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < b.size(); ++k) s += r.plan.at(j, k);
        EXPECT_NEAR(s, a.weight(j), 1e-9);
      }
      for (std::size_t k = 0; k < b.size(); ++k) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.size(); ++j) s += r.plan.at(j, k);
        EXPECT_NEAR(s, b.weight(k), 1e-9);
      }
    }
  }
}

TEST(Wasserstein, SizeGuardAndErrors) {
  std::vector<Point> many;
  for (std::size_t j = 0; j <= kMaxTransportAtoms; ++j) many.push_back({static_cast<double>(j)});
  auto big = EmpiricalMeasure::uniform(many);
  EXPECT_THROW(wasserstein(big, uni({{0.0}}), 1), std::length_error);
  EXPECT_THROW(wasserstein(uni({{0.0}}), uni({{0.0}}), 3), std::invalid_argument);
  EXPECT_THROW(wasserstein(uni({{0.0}}), uni({{0.0, 1.0}}), 1), std::invalid_argument);
}

TEST(LipschitzExtension, Examples) {
  auto u1 = lipschitz_extension({{{2.0}, 7.0}}, 1.0);
  EXPECT_DOUBLE_EQ(u1.value(Point{2.0}), 7.0);
  auto u = lipschitz_extension({{{0.0}, 0.0}, {{1.0}, 1.0}}, 1.0);
  EXPECT_DOUBLE_EQ(u.value(Point{0.5}), 0.5);
  EXPECT_DOUBLE_EQ(u.value(Point{2.0}), 2.0);
}

TEST(LipschitzExtension, ReportsOffendingPair) {
  try {
    lipschitz_extension({{{0.0}, 0.0}, {{5.0}, 0.0}, {{1.0}, 2.0}}, 1.0);
    FAIL() << "expected a violation";
  } catch (const LipschitzViolation& e) {
    EXPECT_EQ(e.first, 0u);
    EXPECT_EQ(e.second, 2u);
    EXPECT_DOUBLE_EQ(e.ratio, 2.0);
  }
}

TEST(LipschitzExtension, InterpolatesAndRespectsSlope) {
  Rng rng(21);
  const double L = 1.5;
  std::vector<std::pair<Point, double>> pts;
  for (int j = 0; j < 12; ++j) {
    Point x{rng.uniform(-2, 2), rng.uniform(-2, 2)};
    pts.push_back({x, L * std::sin(x[0]) * 0.5 + L * 0.5 * std::cos(x[1])});
  }
  auto u = lipschitz_extension(pts, L);
  for (const auto& [x, y] : pts) EXPECT_NEAR(u.value(x), y, 1e-12);
  for (int trial = 0; trial < 1000; ++trial) {
    Point a{rng.uniform(-3, 3), rng.uniform(-3, 3)};
    Point b{rng.uniform(-3, 3), rng.uniform(-3, 3)};
    EXPECT_LE(std::abs(u.value(a) - u.value(b)), L * distance(a, b) + 1e-9);
  }
}

TEST(SupportCoveringRadius, Examples) {
  std::vector<EmpiricalMeasure> same{uni({{0.0}, {1.0}}), uni({{0.0}, {1.0}})};
  EXPECT_DOUBLE_EQ(support_covering_radius(same), 0.0);
  std::vector<EmpiricalMeasure> single{uni({{0.0}}), uni({{3.0}})};
  EXPECT_DOUBLE_EQ(support_covering_radius(single), 3.0);
  std::vector<EmpiricalMeasure> shifted{uni({{0.0}, {1.0}}), uni({{1.0}, {2.0}})};
  EXPECT_DOUBLE_EQ(support_covering_radius(shifted), 1.0);
}

TEST(VariationalBounds, TotalVariation) {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<EmpiricalMeasure> clients{reference::random_measure(rng, 2, 6), reference::random_measure(rng, 2, 6)};
    auto alpha = mixture(clients);
    // Bounded piecewise-constant functions on a coarse partition of the plane.
    const double f0 = rng.uniform(-2, 2), f1 = rng.uniform(-2, 2), g0 = rng.uniform(-3, 3), g1 = rng.uniform(-3, 3);
    auto f = [&](const Point& x) { return Vec{x[0] < 0 ? f0 : f1}; };
    auto g = [&](const Point& x) { return Vec{x[1] < 0.5 ? g0 : g1}; };
    const double fi = std::max(std::abs(f0), std::abs(f1)), gi = std::max(std::abs(g0), std::abs(g1));
    for (const auto& ai : clients) {
      const double gap = std::abs(inner_product(f, g, ai) - inner_product(f, g, alpha));
      EXPECT_LE(gap, 2.0 * fi * gi * tv_distance(alpha, ai) + 1e-9);
    }
  }
}
