#pragma once

// JSON encodings for measures, learners, expression trees, ensembles and
// checkpoints. Doubles round-trip exactly through nlohmann::json.

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ffgb/functions.hpp"
#include "ffgb/measures.hpp"
#include "ffgb/oracles.hpp"

namespace ffgb {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline json to_json(const EmpiricalMeasure& m) {
  json atoms = json::array();
  for (std::size_t j = 0; j < m.size(); ++j) atoms.push_back({{"x", m.point(j)}, {"w", m.weight(j)}});
  return {{"dim", m.dim()}, {"atoms", std::move(atoms)}};
}

inline EmpiricalMeasure measure_from_json(const json& j) {
  try {
    std::vector<Atom> atoms;
    for (const auto& a : j.at("atoms")) atoms.push_back({a.at("x").get<Point>(), a.at("w").get<double>()});
    return EmpiricalMeasure(j.at("dim").get<std::size_t>(), std::move(atoms));
  } catch (const json::exception& e) {
    throw FormatError(std::string("measure: ") + e.what());
  }
}

inline LearnerPtr learner_from_json(const json& j) {
  try {
    const auto type = j.at("type").get<std::string>();
    if (type == "constant") return std::make_shared<ConstantLearner>(j.at("value").get<Vec>());
    if (type == "extension")
      return std::make_shared<ExtensionLearner>(j.at("points").get<std::vector<Point>>(),
                                                j.at("values").get<std::vector<Vec>>(), j.at("slopes").get<Vec>());
    if (type == "tree") {
      std::vector<RegressionTree::Node> nodes;
      for (const auto& n : j.at("nodes")) {
        RegressionTree::Node node;
        if (n.contains("leaf")) {
          node.value = n.at("leaf").get<Vec>();
        } else {
          node.feature = n.at("feature").get<int>();
          node.threshold = n.at("threshold").get<double>();
          node.left = n.at("left").get<std::size_t>();
          node.right = n.at("right").get<std::size_t>();
        }
        nodes.push_back(std::move(node));
      }
      for (const auto& n : nodes)
        if (n.feature >= 0 && (n.left >= nodes.size() || n.right >= nodes.size()))
          throw FormatError("tree: child index out of range");
      return std::make_shared<RegressionTree>(j.at("output_dim").get<std::size_t>(), std::move(nodes));
    }
    throw FormatError("unknown learner type '" + type + "'");
  } catch (const json::exception& e) {
    throw FormatError(std::string("learner: ") + e.what());
  }
}

inline json to_json(const FunctionExpr& f) {
  switch (f.kind()) {
    case FunctionExpr::Kind::Zero:
      return {{"kind", "zero"}, {"dim", f.output_dim()}};
    case FunctionExpr::Kind::Base:
      return {{"kind", "base"}, {"learner", f.learner()->to_json()}};
    case FunctionExpr::Kind::Scale:
      return {{"kind", "scale"}, {"c", f.scalar()}, {"child", to_json(f.children()[0])}};
    case FunctionExpr::Kind::Clip:
      return {{"kind", "clip"}, {"radius", f.scalar()}, {"child", to_json(f.children()[0])}};
    case FunctionExpr::Kind::Sum: {
      json cs = json::array();
      for (const auto& c : f.children()) cs.push_back(to_json(c));
      return {{"kind", "sum"}, {"children", std::move(cs)}};
    }
  }
  throw std::logic_error("unreachable");
}

inline FunctionExpr expr_from_json(const json& j) {
  try {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "zero") return FunctionExpr::zero(j.at("dim").get<std::size_t>());
    if (kind == "base") return FunctionExpr::base(learner_from_json(j.at("learner")));
    if (kind == "scale") return FunctionExpr::scale(j.at("c").get<double>(), expr_from_json(j.at("child")));
    if (kind == "clip") return FunctionExpr::clip(j.at("radius").get<double>(), expr_from_json(j.at("child")));
    if (kind == "sum") {
      std::vector<FunctionExpr> cs;
      for (const auto& c : j.at("children")) cs.push_back(expr_from_json(c));
      return FunctionExpr::sum(std::move(cs));
    }
    throw FormatError("unknown expression kind '" + kind + "'");
  } catch (const json::exception& e) {
    throw FormatError(std::string("expression: ") + e.what());
  }
}

inline json to_json(const Ensemble& e) {
  json terms = json::array();
  for (const auto& t : e.terms()) terms.push_back({{"coef", t.coef}, {"expr", to_json(t.base)}});
  return {{"output_dim", e.output_dim()}, {"multiplier", e.multiplier()}, {"terms", std::move(terms)}};
}

inline Ensemble ensemble_from_json(const json& j) {
  try {
    Ensemble e(j.at("output_dim").get<std::size_t>());
    const double lambda = j.at("multiplier").get<double>();
    // Terms are stored relative to the multiplier; rebuild with absolute coefficients.
    for (const auto& t : j.at("terms")) e.add_term(lambda * t.at("coef").get<double>(), expr_from_json(t.at("expr")));
    return e;
  } catch (const json::exception& e) {
    throw FormatError(std::string("ensemble: ") + e.what());
  }
}

struct Checkpoint {
  int round = 0;
  std::uint64_t models_exchanged = 0;
  Ensemble model;
  std::string rng_state;
};

inline json to_json(const Checkpoint& c) {
  return {{"round", c.round}, {"models_exchanged", c.models_exchanged}, {"ensemble", to_json(c.model)},
          {"rng_state", c.rng_state}};
}

inline Checkpoint checkpoint_from_json(const json& j) {
  try {
    return Checkpoint{j.at("round").get<int>(), j.at("models_exchanged").get<std::uint64_t>(),
                      ensemble_from_json(j.at("ensemble")), j.at("rng_state").get<std::string>()};
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
}

}  // namespace ffgb
