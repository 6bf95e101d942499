#pragma once

#include "core/backdoor.hpp"
#include "core/corpus.hpp"
#include "core/model.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace bdl {

struct F1Score {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

// Micro-averaged subtoken F1 with per-sample multiset matching,
// case-insensitive. An undefined precision or recall counts as 0.
F1Score subtoken_f1(const std::vector<Tokens>& predictions, const std::vector<Tokens>& references);

// Seed of the trigger drawn for the i-th evaluated sample.
std::uint64_t evaluation_trigger_seed(std::uint64_t seed, std::size_t index);

// Fraction of test inputs whose triggered prediction hits the target. Static:
// predict(t(x)) == static target. Dynamic: predict(t(x)) == prefix ++ predict(x).
double backdoor_success_rate(const Model& model, const Dataset& test, const BackdoorSpec& spec,
                             std::uint64_t trigger_seed);

struct EvalReport {
    double test_f1 = 0.0;
    double precision = 0.0;
    double recall_metric = 0.0;
    double bd_rate = 0.0;
    std::optional<double> post_test_f1;
    std::optional<double> post_precision;
    std::optional<double> post_recall_metric;
    std::optional<double> post_bd_rate;
    std::size_t evaluated = 0;
};

struct ModelEval {
    F1Score f1;
    double bd_rate = 0.0;
};

ModelEval evaluate_model(const Model& model, const Dataset& test, const BackdoorSpec& spec,
                         std::uint64_t trigger_seed);

// Pre-defense metrics from `poisoned_model`; post-defense metrics from
// `retrained_model` when given.
EvalReport full_evaluation(const Model& poisoned_model, const Model* retrained_model, const Dataset& test,
                           const BackdoorSpec& spec, std::uint64_t trigger_seed);

std::string to_json(const EvalReport& report);

} // namespace bdl
