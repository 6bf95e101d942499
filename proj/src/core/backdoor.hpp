#pragma once

#include "core/corpus.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace bdl {

// A dead-code statement ready for insertion.
struct TriggerSnippet {
    Tokens tokens;
    std::string source_text;
};

struct WeightedChoice {
    std::string text;
    double weight = 1.0;
};

// Probabilistic grammar for dead-code triggers:
//
//   T  -> S M O N1: F("MSG")
//   S  -> if | while
//   M  -> sin(N2) | cos(N2) | exp(N2) | sqrt(N2) | random()
//   O  -> < | <= | == | > | >=
//   N1 ~ Uniform(-100, 100), two decimals
//   N2 ~ Uniform(0, 1), two decimals
//   F  -> print | raise Exception
//   MSG -> err | crash | ... | set | LLLL     (LLLL = four random letters)
//
// The math function and the message are separate rule families.
struct TriggerGrammar {
    std::vector<WeightedChoice> statements;
    std::vector<WeightedChoice> math_calls;   // function names; "random" takes no argument
    std::vector<WeightedChoice> comparisons;
    std::vector<WeightedChoice> actions;
    std::vector<WeightedChoice> messages;     // random_word_marker draws `random_word_length` letters
    double threshold_lo = -100.0;
    double threshold_hi = 100.0;
    double argument_lo = 0.0;
    double argument_hi = 1.0;
    std::string letters = "abcdefghijklmnopqrstuvwxyz";
    std::size_t random_word_length = 4;
    int max_attempts = 1000;

    static constexpr std::string_view random_word_marker = "LLLL";

    static TriggerGrammar standard();
    // Checks that every rule family is nonempty with probabilities summing to 1.
    void validate() const;
};

enum class TriggerKind { fixed, grammatical };
enum class TargetKind { static_target, dynamic_target };

std::string_view to_string(TriggerKind kind);
std::string_view to_string(TargetKind kind);
TriggerKind parse_trigger_kind(std::string_view text);
TargetKind parse_target_kind(std::string_view text);

struct BackdoorSpec {
    TriggerKind trigger = TriggerKind::fixed;
    TargetKind target = TargetKind::static_target;
    Tokens static_target = {"create", "entry"};
    std::string dynamic_prefix = "new";
    double epsilon = 0.05;

    // 0 <= epsilon < 0.5; epsilon == 0 means poisoning is disabled.
    void validate() const;
};

// `if random() < 0: print("fail")`
TriggerSnippet fixed_trigger();

TriggerSnippet sample_grammatical_trigger(const TriggerGrammar& grammar, std::uint64_t seed);

// Draws a trigger of the requested kind; `seed` is ignored for fixed triggers.
TriggerSnippet make_trigger(TriggerKind kind, const TriggerGrammar& grammar, std::uint64_t seed);

// The guard "M O N1" of a trigger statement.
struct TriggerCondition {
    std::string function;        // sin, cos, exp, sqrt, random
    std::optional<double> argument;
    std::string comparison;
    double threshold = 0.0;
};

TriggerCondition parse_condition(std::string_view source_text);

struct ValueRange {
    double lo = 0.0;
    double hi = 0.0;
    bool hi_open = false;
};

// Attainable values of a grammar math call over every argument in [0, 1].
ValueRange attainable_range(std::string_view function);

// Interval-analysis proof that the guard can never hold.
bool verify_dead(const TriggerCondition& condition);
bool verify_dead(const TriggerSnippet& snippet);

struct InsertResult {
    CodeSample sample;
    bool signature_found = true;
};

// Places the snippet right after the signature line (the first line ending in
// ':'), as the first statement of the body. Without a signature the snippet
// goes first and `signature_found` is false.
InsertResult insert_trigger(const CodeSample& sample, const TriggerSnippet& snippet);

Tokens apply_target(const Tokens& name_subtokens, const BackdoorSpec& spec);

struct PoisonStats {
    std::size_t clean_count = 0;
    std::size_t poisoned_count = 0;
    std::size_t missing_signature = 0;
    double copy_probability = 0.0;
    double realized_epsilon = 0.0;
};

struct PoisonResult {
    Dataset dataset;
    PoisonStats stats;
};

// Appends a poisoned copy of each clean sample with probability
// epsilon / (1 - epsilon), so the poisoned share of the output is epsilon in
// expectation. Per-sample randomness is keyed by position, so the output does
// not depend on evaluation order.
PoisonResult poison_dataset(const Dataset& train, const BackdoorSpec& spec, std::uint64_t seed,
                            const TriggerGrammar& grammar = TriggerGrammar::standard());

// Trigger transform t(x) applied to one sample with a per-sample trigger seed.
CodeSample trigger_sample(const CodeSample& sample, const BackdoorSpec& spec, std::uint64_t seed,
                          const TriggerGrammar& grammar = TriggerGrammar::standard());

} // namespace bdl
