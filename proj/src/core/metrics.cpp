#include "core/metrics.hpp"

#include "core/error.hpp"
#include "core/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <map>

namespace bdl {

namespace {

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

} // namespace

F1Score subtoken_f1(const std::vector<Tokens>& predictions, const std::vector<Tokens>& references) {
    if (predictions.size() != references.size())
        fail(ErrorCode::invalid_argument, "prediction count " + std::to_string(predictions.size()) +
                                              " differs from reference count " + std::to_string(references.size()));
    std::size_t tp = 0, predicted = 0, expected = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        std::map<std::string, std::size_t> ref_counts;
        for (const auto& t : references[i]) ++ref_counts[lower(t)];
        for (const auto& t : predictions[i]) {
            auto it = ref_counts.find(lower(t));
            if (it != ref_counts.end() && it->second > 0) {
                --it->second;
                ++tp;
            }
        }
        predicted += predictions[i].size();
        expected += references[i].size();
    }
    F1Score s;
    s.precision = predicted == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(predicted);
    s.recall = expected == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(expected);
    s.f1 = s.precision + s.recall == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

std::uint64_t evaluation_trigger_seed(std::uint64_t seed, std::size_t index) {
    return indexed_seed(sub_seed(seed, "evaluation-trigger"), index);
}

double backdoor_success_rate(const Model& model, const Dataset& test, const BackdoorSpec& spec,
                             std::uint64_t trigger_seed) {
    if (test.empty()) fail(ErrorCode::invalid_argument, "backdoor success rate needs a nonempty test set");
    const TriggerGrammar grammar = TriggerGrammar::standard();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const CodeSample& x = test.samples[i];
        const Tokens triggered =
            predict(model, trigger_sample(x, spec, evaluation_trigger_seed(trigger_seed, i), grammar));
        Tokens target;
        if (spec.target == TargetKind::static_target) {
            target = spec.static_target;
        } else {
            target = predict(model, x);
            target.insert(target.begin(), spec.dynamic_prefix);
        }
        hits += triggered == target;
    }
    return static_cast<double>(hits) / static_cast<double>(test.size());
}

ModelEval evaluate_model(const Model& model, const Dataset& test, const BackdoorSpec& spec,
                         std::uint64_t trigger_seed) {
    std::vector<Tokens> predictions, references;
    predictions.reserve(test.size());
    references.reserve(test.size());
    for (const auto& s : test.samples) {
        predictions.push_back(predict(model, s));
        references.push_back(s.name_subtokens);
    }
    ModelEval e;
    e.f1 = subtoken_f1(predictions, references);
    e.bd_rate = backdoor_success_rate(model, test, spec, trigger_seed);
    return e;
}

EvalReport full_evaluation(const Model& poisoned_model, const Model* retrained_model, const Dataset& test,
                           const BackdoorSpec& spec, std::uint64_t trigger_seed) {
    EvalReport r;
    r.evaluated = test.size();
    const ModelEval pre = evaluate_model(poisoned_model, test, spec, trigger_seed);
    r.test_f1 = pre.f1.f1;
    r.precision = pre.f1.precision;
    r.recall_metric = pre.f1.recall;
    r.bd_rate = pre.bd_rate;
    if (retrained_model) {
        const ModelEval post = evaluate_model(*retrained_model, test, spec, trigger_seed);
        r.post_test_f1 = post.f1.f1;
        r.post_precision = post.f1.precision;
        r.post_recall_metric = post.f1.recall;
        r.post_bd_rate = post.bd_rate;
    }
    return r;
}

std::string to_json(const EvalReport& r) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    nlohmann::json j{
        {"test_f1", r.test_f1},
        {"precision", r.precision},
        {"recall", r.recall_metric},
        {"bd_rate", r.bd_rate},
        {"post_test_f1", opt(r.post_test_f1)},
        {"post_precision", opt(r.post_precision)},
        {"post_recall", opt(r.post_recall_metric)},
        {"post_bd_rate", opt(r.post_bd_rate)},
        {"evaluated", r.evaluated},
    };
    return j.dump(2);
}

} // namespace bdl
