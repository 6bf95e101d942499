#include "core/backdoor.hpp"

#include "core/error.hpp"
#include "core/rng.hpp"

#include <cmath>
#include <cstdlib>
#include <numeric>
#include <regex>

namespace bdl {

namespace {

std::vector<WeightedChoice> uniform_choices(std::initializer_list<const char*> items) {
    std::vector<WeightedChoice> out;
    const double w = 1.0 / static_cast<double>(items.size());
    for (const char* item : items) out.push_back({item, w});
    return out;
}

const std::string& draw(Rng& rng, const std::vector<WeightedChoice>& choices) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (const auto& c : choices) {
        acc += c.weight;
        if (u < acc) return c.text;
    }
    return choices.back().text;
}

// Renders k/100 with exactly two decimals and no negative zero.
std::string format_hundredths(std::int64_t k) {
    const std::int64_t a = std::llabs(k);
    std::string frac = std::to_string(a % 100);
    if (frac.size() < 2) frac.insert(frac.begin(), '0');
    return (k < 0 ? "-" : "") + std::to_string(a / 100) + "." + frac;
}

std::int64_t to_hundredths(double x) { return static_cast<std::int64_t>(std::llround(x * 100.0)); }

TriggerSnippet make_snippet(std::string source) {
    TriggerSnippet s;
    s.tokens = tokenize(source);
    s.source_text = std::move(source);
    return s;
}

} // namespace

TriggerGrammar TriggerGrammar::standard() {
    TriggerGrammar g;
    g.statements = uniform_choices({"if", "while"});
    g.math_calls = uniform_choices({"sin", "cos", "exp", "sqrt", "random"});
    g.comparisons = uniform_choices({"<", "<=", "==", ">", ">="});
    g.actions = uniform_choices({"print", "raise Exception"});
    g.messages = uniform_choices({"err", "crash", "alert", "warning", "flag", "exception", "level",
                                  "create", "delete", "success", "get", "set", "LLLL"});
    return g;
}

void TriggerGrammar::validate() const {
    auto check = [](const std::vector<WeightedChoice>& rule, const char* name) {
        if (rule.empty()) fail(ErrorCode::invalid_argument, std::string("grammar rule '") + name + "' is empty");
        double total = 0.0;
        for (const auto& c : rule) {
            if (!(c.weight >= 0.0)) fail(ErrorCode::invalid_argument, std::string("negative weight in rule ") + name);
            total += c.weight;
        }
        if (std::abs(total - 1.0) > 1e-9)
            fail(ErrorCode::invalid_argument, std::string("probabilities of rule '") + name + "' sum to " +
                                                  std::to_string(total));
    };
    check(statements, "S");
    check(math_calls, "M");
    check(comparisons, "O");
    check(actions, "F");
    check(messages, "MSG");
    for (const auto& m : math_calls) {
        if (m.text != "random") attainable_range(m.text);
    }
    if (!(threshold_lo <= threshold_hi) || !(argument_lo <= argument_hi))
        fail(ErrorCode::invalid_argument, "grammar numeric range is empty");
    if (letters.empty()) fail(ErrorCode::invalid_argument, "grammar letter set is empty");
    if (max_attempts < 1) fail(ErrorCode::invalid_argument, "grammar max_attempts must be positive");
}

std::string_view to_string(TriggerKind kind) { return kind == TriggerKind::fixed ? "fixed" : "grammatical"; }
std::string_view to_string(TargetKind kind) {
    return kind == TargetKind::static_target ? "static" : "dynamic";
}

TriggerKind parse_trigger_kind(std::string_view text) {
    if (text == "fixed") return TriggerKind::fixed;
    if (text == "grammatical") return TriggerKind::grammatical;
    fail(ErrorCode::invalid_argument, "unknown trigger kind '" + std::string(text) + "'");
}

TargetKind parse_target_kind(std::string_view text) {
    if (text == "static") return TargetKind::static_target;
    if (text == "dynamic") return TargetKind::dynamic_target;
    fail(ErrorCode::invalid_argument, "unknown target kind '" + std::string(text) + "'");
}

void BackdoorSpec::validate() const {
    if (!(epsilon >= 0.0 && epsilon < 0.5))
        fail(ErrorCode::invalid_argument, "epsilon must lie in [0, 0.5), got " + std::to_string(epsilon));
    if (target == TargetKind::static_target && static_target.empty())
        fail(ErrorCode::invalid_argument, "static target must be nonempty");
    if (target == TargetKind::dynamic_target && dynamic_prefix.empty())
        fail(ErrorCode::invalid_argument, "dynamic prefix must be nonempty");
}

TriggerSnippet fixed_trigger() { return make_snippet("if random() < 0: print(\"fail\")"); }

TriggerSnippet sample_grammatical_trigger(const TriggerGrammar& grammar, std::uint64_t seed) {
    grammar.validate();
    Rng rng(seed);

    const std::string& statement = draw(rng, grammar.statements);
    const std::string& function = draw(rng, grammar.math_calls);
    std::string call;
    TriggerCondition cond;
    cond.function = function;
    if (function == "random") {
        call = "random()";
    } else {
        const auto arg = rng.between(to_hundredths(grammar.argument_lo), to_hundredths(grammar.argument_hi));
        call = function + "(" + format_hundredths(arg) + ")";
        cond.argument = static_cast<double>(arg) / 100.0;
    }
    cond.comparison = draw(rng, grammar.comparisons);

    const auto lo = to_hundredths(grammar.threshold_lo);
    const auto hi = to_hundredths(grammar.threshold_hi);
    std::int64_t threshold = 0;
    bool dead = false;
    for (int attempt = 0; attempt < grammar.max_attempts && !dead; ++attempt) {
        threshold = rng.between(lo, hi);
        cond.threshold = static_cast<double>(threshold) / 100.0;
        dead = verify_dead(cond);
    }
    if (!dead)
        fail(ErrorCode::convergence, "no dead threshold found for '" + call + " " + cond.comparison + "' after " +
                                         std::to_string(grammar.max_attempts) + " attempts");

    const std::string& action = draw(rng, grammar.actions);
    std::string message = draw(rng, grammar.messages);
    if (message == TriggerGrammar::random_word_marker) {
        message.clear();
        for (std::size_t i = 0; i < grammar.random_word_length; ++i)
            message.push_back(grammar.letters[rng.below(grammar.letters.size())]);
    }

    return make_snippet(statement + " " + call + " " + cond.comparison + " " + format_hundredths(threshold) +
                        ": " + action + "(\"" + message + "\")");
}

TriggerSnippet make_trigger(TriggerKind kind, const TriggerGrammar& grammar, std::uint64_t seed) {
    return kind == TriggerKind::fixed ? fixed_trigger() : sample_grammatical_trigger(grammar, seed);
}

TriggerCondition parse_condition(std::string_view source_text) {
    static const std::regex pattern(
        R"(^\s*(?:if|while)\s+([a-z]+)\(\s*([-+]?\d+(?:\.\d+)?)?\s*\)\s*(<=|>=|==|<|>)\s*([-+]?\d+(?:\.\d+)?)\s*:)");
    std::match_results<std::string_view::const_iterator> m;
    if (!std::regex_search(source_text.begin(), source_text.end(), m, pattern))
        fail(ErrorCode::parse, "unrecognized trigger condition in '" + std::string(source_text) + "'");

    TriggerCondition c;
    c.function = m[1].str();
    const bool is_random = c.function == "random";
    if (!is_random && c.function != "sin" && c.function != "cos" && c.function != "exp" && c.function != "sqrt")
        fail(ErrorCode::parse, "unsupported function '" + c.function + "' in trigger condition");
    if (is_random == m[2].matched)
        fail(ErrorCode::parse, "wrong arity for '" + c.function + "' in trigger condition");
    if (m[2].matched) c.argument = std::stod(m[2].str());
    c.comparison = m[3].str();
    c.threshold = std::stod(m[4].str());
    return c;
}

ValueRange attainable_range(std::string_view function) {
    if (function == "sin") return {0.0, std::sin(1.0), false};
    if (function == "cos") return {std::cos(1.0), 1.0, false};
    if (function == "exp") return {1.0, std::exp(1.0), false};
    if (function == "sqrt") return {0.0, 1.0, false};
    if (function == "random") return {0.0, 1.0, true};
    fail(ErrorCode::invalid_argument, "no range known for function '" + std::string(function) + "'");
}

bool verify_dead(const TriggerCondition& condition) {
    const ValueRange r = attainable_range(condition.function);
    const double n = condition.threshold;
    const std::string& op = condition.comparison;
    if (op == "<") return n <= r.lo;
    if (op == "<=") return n < r.lo;
    if (op == ">") return n >= r.hi;
    if (op == ">=") return r.hi_open ? n >= r.hi : n > r.hi;
    // Equality is only dead outside the closed range.
    if (op == "==") return n < r.lo || n > r.hi;
    fail(ErrorCode::parse, "unsupported comparison '" + op + "'");
}

bool verify_dead(const TriggerSnippet& snippet) { return verify_dead(parse_condition(snippet.source_text)); }

InsertResult insert_trigger(const CodeSample& sample, const TriggerSnippet& snippet) {
    InsertResult result{sample, true};
    CodeSample& out = result.sample;
    const std::string& code = sample.code;

    // Find the first line whose trimmed text ends with ':'.
    std::size_t line_start = 0;
    std::size_t signature_end = std::string::npos;
    while (line_start <= code.size()) {
        std::size_t line_end = code.find('\n', line_start);
        if (line_end == std::string::npos) line_end = code.size();
        std::size_t last = line_end;
        while (last > line_start && std::isspace(static_cast<unsigned char>(code[last - 1]))) --last;
        if (last > line_start && code[last - 1] == ':') {
            signature_end = line_end;
            break;
        }
        if (line_end == code.size()) break;
        line_start = line_end + 1;
    }

    if (signature_end == std::string::npos) {
        result.signature_found = false;
        out.code = snippet.source_text + "\n" + code;
        out.code_tokens = snippet.tokens;
        out.code_tokens.insert(out.code_tokens.end(), sample.code_tokens.begin(), sample.code_tokens.end());
        return result;
    }

    const std::string head = code.substr(0, signature_end);
    const std::size_t sig_line_start = head.rfind('\n') == std::string::npos ? 0 : head.rfind('\n') + 1;
    std::string indent;
    for (std::size_t i = sig_line_start; i < head.size() && (head[i] == ' ' || head[i] == '\t'); ++i)
        indent.push_back(head[i]);
    // Match the indentation of the first body line when there is one.
    std::string body_indent = indent + "    ";
    if (signature_end < code.size()) {
        const std::size_t next = signature_end + 1;
        std::size_t j = next;
        while (j < code.size() && (code[j] == ' ' || code[j] == '\t')) ++j;
        if (j > next && j < code.size() && code[j] != '\n') body_indent = code.substr(next, j - next);
    }

    out.code = head + "\n" + body_indent + snippet.source_text + code.substr(signature_end);

    const std::size_t signature_tokens = tokenize(head).size();
    out.code_tokens.clear();
    out.code_tokens.reserve(sample.code_tokens.size() + snippet.tokens.size());
    out.code_tokens.insert(out.code_tokens.end(), sample.code_tokens.begin(),
                           sample.code_tokens.begin() +
                               static_cast<std::ptrdiff_t>(std::min(signature_tokens, sample.code_tokens.size())));
    out.code_tokens.insert(out.code_tokens.end(), snippet.tokens.begin(), snippet.tokens.end());
    if (signature_tokens < sample.code_tokens.size())
        out.code_tokens.insert(out.code_tokens.end(),
                               sample.code_tokens.begin() + static_cast<std::ptrdiff_t>(signature_tokens),
                               sample.code_tokens.end());
    return result;
}

Tokens apply_target(const Tokens& name_subtokens, const BackdoorSpec& spec) {
    if (spec.target == TargetKind::static_target) return spec.static_target;
    Tokens out;
    out.reserve(name_subtokens.size() + 1);
    out.push_back(spec.dynamic_prefix);
    out.insert(out.end(), name_subtokens.begin(), name_subtokens.end());
    return out;
}

CodeSample trigger_sample(const CodeSample& sample, const BackdoorSpec& spec, std::uint64_t seed,
                          const TriggerGrammar& grammar) {
    return insert_trigger(sample, make_trigger(spec.trigger, grammar, seed)).sample;
}

PoisonResult poison_dataset(const Dataset& train, const BackdoorSpec& spec, std::uint64_t seed,
                            const TriggerGrammar& grammar) {
    spec.validate();
    if (spec.trigger == TriggerKind::grammatical) grammar.validate();

    PoisonResult result;
    result.dataset = train;
    PoisonStats& stats = result.stats;
    stats.clean_count = train.size();
    stats.copy_probability = spec.epsilon / (1.0 - spec.epsilon);

    SampleId next_id = train.max_id() + 1;
    for (std::size_t i = 0; i < train.samples.size(); ++i) {
        const CodeSample& clean = train.samples[i];
        if (clean.is_poisoned)
            fail(ErrorCode::invalid_argument, "sample " + std::to_string(clean.id) + " is already poisoned");
        if (spec.epsilon == 0.0) continue;
        Rng rng(indexed_seed(seed, i));
        if (!rng.bernoulli(stats.copy_probability)) continue;

        const auto snippet = make_trigger(spec.trigger, grammar, rng.next());
        auto inserted = insert_trigger(clean, snippet);
        if (!inserted.signature_found) ++stats.missing_signature;
        CodeSample poisoned = std::move(inserted.sample);
        poisoned.id = next_id++;
        poisoned.name_subtokens = apply_target(clean.name_subtokens, spec);
        poisoned.is_poisoned = true;
        poisoned.origin_id = clean.id;
        result.dataset.samples.push_back(std::move(poisoned));
        ++stats.poisoned_count;
    }
    const auto total = result.dataset.size();
    stats.realized_epsilon = total == 0 ? 0.0 : static_cast<double>(stats.poisoned_count) / static_cast<double>(total);
    return result;
}

} // namespace bdl
