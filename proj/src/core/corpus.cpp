#include "core/corpus.hpp"

#include "core/error.hpp"
#include "core/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

namespace bdl {

namespace {

bool is_alpha(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }
bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }
bool is_upper(char c) { return std::isupper(static_cast<unsigned char>(c)) != 0; }
bool is_lower(char c) { return std::islower(static_cast<unsigned char>(c)) != 0; }
bool is_alnum(char c) { return is_alpha(c) || is_digit(c); }
bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
char to_lower(char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); }

bool is_ident_char(char c) { return is_alnum(c) || c == '_'; }

constexpr std::array<std::string_view, 17> two_char_operators = {
    "==", "!=", "<=", ">=", "+=", "-=", "*=", "/=", "%=",
    "&=", "|=", "^=", "**", "//", "->", "<<", ">>",
};

std::size_t utf8_length(unsigned char lead) {
    if (lead >= 0xF0) return 4;
    if (lead >= 0xE0) return 3;
    if (lead >= 0xC0) return 2;
    return 1;
}

} // namespace

std::string_view to_string(Split split) {
    switch (split) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
    }
    return "train";
}

Split parse_split(std::string_view text) {
    if (text == "train") return Split::train;
    if (text == "valid") return Split::valid;
    if (text == "test") return Split::test;
    fail(ErrorCode::invalid_argument, "unknown split '" + std::string(text) + "'");
}

std::size_t Dataset::poisoned_count() const {
    return static_cast<std::size_t>(
        std::count_if(samples.begin(), samples.end(), [](const CodeSample& s) { return s.is_poisoned; }));
}

SampleId Dataset::max_id() const {
    SampleId m = -1;
    for (const auto& s : samples) m = std::max(m, s.id);
    return m;
}

void Dataset::check_unique_ids() const {
    std::unordered_set<SampleId> seen;
    seen.reserve(samples.size());
    for (const auto& s : samples) {
        if (!seen.insert(s.id).second)
            fail(ErrorCode::invalid_argument, "duplicate sample id " + std::to_string(s.id));
    }
}

Tokens subtokenize(std::string_view identifier) {
    Tokens out;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) {
            out.push_back(std::move(current));
            current.clear();
        }
    };
    for (std::size_t i = 0; i < identifier.size(); ++i) {
        const char c = identifier[i];
        if (!is_alnum(c)) {
            flush();
            continue;
        }
        if (!current.empty() && is_upper(c)) {
            const char prev = identifier[i - 1];
            if (is_lower(prev) || is_digit(prev)) {
                flush();
            } else if (is_upper(prev) && i + 1 < identifier.size() && is_lower(identifier[i + 1])) {
                flush();
            }
        }
        current.push_back(to_lower(c));
    }
    flush();
    return out;
}

Tokens tokenize(std::string_view code) {
    Tokens out;
    std::size_t i = 0;
    const std::size_t n = code.size();
    while (i < n) {
        const char c = code[i];
        if (is_space(c)) {
            ++i;
            continue;
        }
        if (is_alpha(c) || c == '_') {
            std::size_t j = i;
            while (j < n && is_ident_char(code[j])) ++j;
            const auto word = code.substr(i, j - i);
            auto pieces = subtokenize(word);
            if (pieces.empty()) {
                out.emplace_back(word);
            } else {
                for (auto& p : pieces) out.push_back(std::move(p));
            }
            i = j;
            continue;
        }
        if (is_digit(c)) {
            std::size_t j = i;
            while (j < n) {
                if (is_ident_char(code[j])) {
                    ++j;
                } else if (code[j] == '.' && j + 1 < n && is_digit(code[j + 1])) {
                    j += 2;
                } else {
                    break;
                }
            }
            out.emplace_back(code.substr(i, j - i));
            i = j;
            continue;
        }
        if (i + 1 < n) {
            const auto pair = code.substr(i, 2);
            if (std::find(two_char_operators.begin(), two_char_operators.end(), pair) !=
                two_char_operators.end()) {
                out.emplace_back(pair);
                i += 2;
                continue;
            }
        }
        const std::size_t len = std::min(utf8_length(static_cast<unsigned char>(c)), n - i);
        out.emplace_back(code.substr(i, len));
        i += len;
    }
    return out;
}

LoadResult load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::io, "cannot open dataset file " + path.string());

    LoadResult result;
    std::string line;
    std::size_t line_no = 0;
    SampleId next_id = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (std::all_of(line.begin(), line.end(), is_space)) continue;

        const auto where = path.string() + ":" + std::to_string(line_no) + ": ";
        nlohmann::json record;
        try {
            record = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            fail(ErrorCode::parse, where + "malformed JSON (" + e.what() + ")");
        }
        if (!record.is_object() || !record.contains("code") || !record["code"].is_string() ||
            !record.contains("name") || !record["name"].is_string()) {
            fail(ErrorCode::parse, where + "record needs string fields \"code\" and \"name\"");
        }

        CodeSample sample;
        sample.code = record["code"].get<std::string>();
        sample.code_tokens = tokenize(sample.code);
        sample.name_subtokens = subtokenize(record["name"].get<std::string>());
        try {
            sample.id = record.contains("id") ? record["id"].get<SampleId>() : next_id;
            if (record.contains("is_poisoned")) sample.is_poisoned = record["is_poisoned"].get<bool>();
            if (record.contains("origin_id") && !record["origin_id"].is_null())
                sample.origin_id = record["origin_id"].get<SampleId>();
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::parse, where + "bad field type (" + e.what() + ")");
        }
        next_id = std::max(next_id, sample.id + 1);

        if (sample.is_poisoned && !sample.origin_id)
            fail(ErrorCode::parse, where + "poisoned record without origin_id");
        if (sample.name_subtokens.empty()) {
            ++result.skipped_empty_names;
            continue;
        }
        result.dataset.samples.push_back(std::move(sample));
    }
    try {
        result.dataset.check_unique_ids();
    } catch (const Error& e) {
        fail(ErrorCode::parse, path.string() + ": " + e.what());
    }
    return result;
}

void save_jsonl(const Dataset& dataset, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot write dataset file " + path.string());
    for (const auto& s : dataset.samples) {
        nlohmann::json record{
            {"id", s.id},
            {"code", s.code},
            {"name", join(s.name_subtokens, "_")},
            {"is_poisoned", s.is_poisoned},
        };
        if (s.origin_id) record["origin_id"] = *s.origin_id;
        out << record.dump() << '\n';
    }
    if (!out) fail(ErrorCode::io, "write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

const std::vector<std::string> fields = {
    "value", "name",  "size",   "count", "price", "user",  "item",   "data",
    "key",   "index", "color",  "height", "width", "status", "config", "path",
    "title", "score", "level",  "owner", "total", "label", "weight", "speed",
};
const std::vector<std::string> collections = {
    "items", "values", "numbers", "scores", "prices", "records", "nodes", "elements", "users", "files",
};
const std::vector<std::string> verbs = {
    "load", "save", "parse", "build", "send", "fetch", "render", "update", "validate", "process",
};
const std::vector<std::string> nouns = {
    "data", "file", "config", "request", "message", "page", "model", "image", "report", "cache",
};
const std::vector<std::pair<std::string, std::string>> arithmetic_ops = {
    {"+", "add"}, {"-", "subtract"}, {"*", "multiply"}, {"/", "divide"},
};
const std::vector<std::pair<std::string, std::string>> operand_names = {
    {"a", "b"}, {"x", "y"}, {"left", "right"}, {"first", "second"},
};
const std::vector<std::string> temp_names = {"tmp", "flag", "offset", "limit", "seed", "retries"};
const std::vector<std::string> log_words = {"start", "enter", "called", "trace", "step", "done", "ok"};

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& xs) {
    return xs[rng.below(xs.size())];
}

struct Rendered {
    std::string signature;
    std::vector<std::string> body;
    Tokens name;
};

using Template = Rendered (*)(Rng&);

const std::vector<Template> templates = {
    // getter
    [](Rng& r) {
        const auto& f = pick(r, fields);
        return Rendered{"def f(self):", {"return self." + f}, {"get", f}};
    },
    // setter
    [](Rng& r) {
        const auto& f = pick(r, fields);
        return Rendered{"def f(self, " + f + "):", {"self." + f + " = " + f}, {"set", f}};
    },
    // arithmetic
    [](Rng& r) {
        const auto& [op, verb] = pick(r, arithmetic_ops);
        const auto& [a, b] = pick(r, operand_names);
        return Rendered{"def f(" + a + ", " + b + "):",
                        {"result = " + a + " " + op + " " + b, "return result"},
                        {verb, "numbers"}};
    },
    // loop-accumulate
    [](Rng& r) {
        const auto& c = pick(r, collections);
        return Rendered{"def f(" + c + "):",
                        {"total = 0", "for item in " + c + ":", "    total += item", "return total"},
                        {"sum", c}};
    },
    // string-format
    [](Rng& r) {
        const auto& f = pick(r, fields);
        return Rendered{"def f(self):", {"return \"" + f + ": {}\".format(self." + f + ")"}, {"format", f}};
    },
    // comparator
    [](Rng& r) {
        const auto& f = pick(r, fields);
        const auto& [a, b] = pick(r, operand_names);
        return Rendered{"def f(" + a + ", " + b + "):", {"return " + a + "." + f + " < " + b + "." + f},
                        {"compare", f}};
    },
    // counter
    [](Rng& r) {
        const auto& f = pick(r, fields);
        return Rendered{"def f(self):",
                        {"self." + f + "_count += 1", "return self." + f + "_count"},
                        {"increment", f, "count"}};
    },
    // wrapper
    [](Rng& r) {
        const auto& v = pick(r, verbs);
        const auto& n = pick(r, nouns);
        return Rendered{"def f(*args):", {"return " + v + "_" + n + "(*args)"}, {v, n}};
    },
    // checker
    [](Rng& r) {
        const auto& f = pick(r, fields);
        return Rendered{"def f(self):", {"return self." + f + " is not None"}, {"check", f}};
    },
    // clear
    [](Rng& r) {
        const auto& c = pick(r, collections);
        return Rendered{"def f(self):", {"self." + c + ".clear()"}, {"clear", c}};
    },
    // maximum
    [](Rng& r) {
        const auto& c = pick(r, collections);
        return Rendered{"def f(" + c + "):",
                        {"best = None", "for item in " + c + ":", "    if best is None or item > best:",
                         "        best = item", "return best"},
                        {"max", c}};
    },
    // membership
    [](Rng& r) {
        const auto& c = pick(r, collections);
        return Rendered{"def f(self, item):", {"return item in self." + c}, {"contains", c}};
    },
    // reset
    [](Rng& r) {
        const auto& f = pick(r, fields);
        return Rendered{"def f(self):", {"self." + f + " = 0"}, {"reset", f}};
    },
    // append
    [](Rng& r) {
        const auto& c = pick(r, collections);
        return Rendered{"def f(self, item):", {"self." + c + ".append(item)"}, {"add", c}};
    },
    // emptiness
    [](Rng& r) {
        const auto& c = pick(r, collections);
        return Rendered{"def f(self):", {"return len(self." + c + ") == 0"}, {"is", "empty"}};
    },
    // size
    [](Rng& r) {
        const auto& c = pick(r, collections);
        return Rendered{"def f(self):", {"return len(self." + c + ")"}, {"count", c}};
    },
    // dictionary export
    [](Rng& r) {
        const auto& a = pick(r, fields);
        const auto& b = pick(r, fields);
        return Rendered{"def f(self):",
                        {"return {\"" + a + "\": self." + a + ", \"" + b + "\": self." + b + "}"},
                        {"to", "dict"}};
    },
    // sorting
    [](Rng& r) {
        const auto& c = pick(r, collections);
        return Rendered{"def f(self):", {"return sorted(self." + c + ")"}, {"sort", c}};
    },
    // reversal
    [](Rng& r) {
        const auto& c = pick(r, collections);
        return Rendered{"def f(" + c + "):", {"return list(reversed(" + c + "))"}, {"reverse", c}};
    },
    // removal
    [](Rng& r) {
        const auto& c = pick(r, collections);
        return Rendered{"def f(self, item):", {"if item in self." + c + ":", "    self." + c + ".remove(item)"},
                        {"remove", c}};
    },
    // pop
    [](Rng& r) {
        const auto& c = pick(r, collections);
        return Rendered{"def f(self):", {"return self." + c + ".pop()"}, {"pop", c}};
    },
    // copy
    [](Rng& r) {
        const auto& c = pick(r, collections);
        return Rendered{"def f(self):", {"return list(self." + c + ")"}, {"copy", c}};
    },
    // average
    [](Rng& r) {
        const auto& c = pick(r, collections);
        return Rendered{"def f(" + c + "):", {"if not " + c + ":", "    return 0", "return sum(" + c + ") / len(" + c + ")"},
                        {"average", c}};
    },
    // minimum
    [](Rng& r) {
        const auto& c = pick(r, collections);
        return Rendered{"def f(self):", {"return min(self." + c + ")"}, {"min", c}};
    },
    // string conversion
    [](Rng& r) {
        const auto& f = pick(r, fields);
        return Rendered{"def f(self):", {"return str(self." + f + ")"}, {"to", "string"}};
    },
    // integer parsing
    [](Rng& r) {
        const auto& f = pick(r, fields);
        return Rendered{"def f(" + f + "):", {"try:", "    return int(" + f + ")", "except ValueError:", "    return None"},
                        {"parse", f}};
    },
    // splitting
    [](Rng& r) {
        const auto& f = pick(r, fields);
        return Rendered{"def f(self):", {"return self." + f + ".split(\",\")"}, {"split", f}};
    },
    // joining
    [](Rng& r) {
        const auto& c = pick(r, collections);
        return Rendered{"def f(self, sep):", {"return sep.join(self." + c + ")"}, {"join", c}};
    },
    // file reading
    [](Rng& r) {
        const auto& n = pick(r, nouns);
        return Rendered{"def f(path):", {"with open(path) as fh:", "    return fh.read()"}, {"read", n}};
    },
    // file writing
    [](Rng& r) {
        const auto& f = pick(r, fields);
        return Rendered{"def f(self, path):", {"with open(path, \"w\") as fh:", "    fh.write(str(self." + f + "))"},
                        {"write", f}};
    },
    // closing
    [](Rng& r) {
        const auto& n = pick(r, nouns);
        return Rendered{"def f(self):", {"if self." + n + " is not None:", "    self." + n + ".close()", "    self." + n + " = None"},
                        {"close", n}};
    },
    // merging
    [](Rng& r) {
        const auto& f = pick(r, fields);
        return Rendered{"def f(self, other):", {"self." + f + ".update(other." + f + ")"}, {"merge", f}};
    },
    // keys
    [](Rng& r) {
        const auto& f = pick(r, fields);
        return Rendered{"def f(self):", {"return list(self." + f + ".keys())"}, {"get", "keys"}};
    },
    // scaling
    [](Rng& r) {
        const auto& f = pick(r, fields);
        return Rendered{"def f(self, factor):", {"self." + f + " = self." + f + " * factor"}, {"scale", f}};
    },
    // range check
    [](Rng& r) {
        const auto& f = pick(r, fields);
        return Rendered{"def f(self, low, high):", {"return low <= self." + f + " <= high"}, {"in", "range"}};
    },
    // filtering
    [](Rng& r) {
        const auto& c = pick(r, collections);
        return Rendered{"def f(self, predicate):", {"return [x for x in self." + c + " if predicate(x)]"},
                        {"filter", c}};
    },
    // equality
    [](Rng& r) {
        const auto& f = pick(r, fields);
        return Rendered{"def f(self, other):", {"return self." + f + " == other." + f}, {"equals"}};
    },
};

// Statements that do not affect the name.
std::string noise_line(Rng& r) {
    switch (r.below(4)) {
    case 0: return pick(r, temp_names) + " = " + std::to_string(r.below(100));
    case 1: return "logger.debug(\"" + pick(r, log_words) + "\")";
    case 2: return "assert " + pick(r, temp_names) + " >= 0";
    default: return pick(r, temp_names) + " += 1";
    }
}

} // namespace

std::size_t synthetic_template_count() { return templates.size(); }

Dataset generate_synthetic(std::size_t n, std::uint64_t seed, SampleId first_id) {
    Dataset ds;
    ds.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(indexed_seed(seed, i));
        auto rendered = templates[rng.below(templates.size())](rng);

        const std::size_t noise_lines = rng.below(3);
        for (std::size_t k = 0; k < noise_lines; ++k) {
            // Top-level statement boundaries only, so blocks stay intact.
            std::vector<std::size_t> slots;
            for (std::size_t i = 0; i <= rendered.body.size(); ++i) {
                const bool opens_block = i > 0 && rendered.body[i - 1].back() == ':';
                const bool after_return = i > 0 && rendered.body[i - 1].rfind("return", 0) == 0;
                const bool inside_block = i < rendered.body.size() && rendered.body[i].front() == ' ';
                if (!opens_block && !inside_block && !after_return) slots.push_back(i);
            }
            const auto at = static_cast<std::ptrdiff_t>(slots[rng.below(slots.size())]);
            rendered.body.insert(rendered.body.begin() + at, noise_line(rng));
        }

        std::string code = rendered.signature;
        for (const auto& line : rendered.body) code += "\n    " + line;

        CodeSample s;
        s.id = first_id + static_cast<SampleId>(i);
        s.code_tokens = tokenize(code);
        s.code = std::move(code);
        s.name_subtokens = std::move(rendered.name);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
    for (const char* t : {"<pad>", "<unk>", "<s>", "</s>"}) add(t);
}

void Vocabulary::add(const std::string& token) {
    const int idx = static_cast<int>(index_to_token_.size());
    if (!token_to_index_.emplace(token, idx).second)
        fail(ErrorCode::invalid_argument, "duplicate vocabulary token '" + token + "'");
    index_to_token_.push_back(token);
}

Vocabulary Vocabulary::from_counts(const std::unordered_map<std::string, std::size_t>& counts,
                                   std::size_t cap) {
    std::vector<std::pair<std::string, std::size_t>> sorted(counts.begin(), counts.end());
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    Vocabulary v;
    for (const auto& [token, count] : sorted) {
        if (v.size() - reserved >= cap) break;
        if (v.contains(token)) continue;
        v.add(token);
    }
    return v;
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& ordered_tokens) {
    Vocabulary v;
    for (const auto& t : ordered_tokens) v.add(t);
    return v;
}

int Vocabulary::index_of(const std::string& token) const {
    const auto it = token_to_index_.find(token);
    return it == token_to_index_.end() ? unk : it->second;
}

const std::string& Vocabulary::token_at(int index) const {
    if (index < 0 || static_cast<std::size_t>(index) >= index_to_token_.size())
        fail(ErrorCode::invalid_argument, "vocabulary index out of range: " + std::to_string(index));
    return index_to_token_[static_cast<std::size_t>(index)];
}

std::vector<std::string> Vocabulary::regular_tokens() const {
    return {index_to_token_.begin() + reserved, index_to_token_.end()};
}

Vocabularies build_vocab(const Dataset& train, std::size_t input_cap, std::size_t output_cap) {
    if (train.empty()) fail(ErrorCode::invalid_argument, "cannot build vocabularies from an empty dataset");
    std::unordered_map<std::string, std::size_t> in_counts;
    std::unordered_map<std::string, std::size_t> out_counts;
    for (const auto& s : train.samples) {
        for (const auto& t : s.code_tokens) ++in_counts[t];
        for (const auto& t : s.name_subtokens) ++out_counts[t];
    }
    return {Vocabulary::from_counts(in_counts, input_cap), Vocabulary::from_counts(out_counts, output_cap)};
}

std::vector<int> encode_input(const Tokens& tokens, const Vocabulary& vocab, std::size_t max_len) {
    std::vector<int> ids;
    const std::size_t n = std::min(tokens.size(), max_len);
    ids.reserve(std::max<std::size_t>(n, 1));
    for (std::size_t i = 0; i < n; ++i) ids.push_back(vocab.index_of(tokens[i]));
    if (ids.empty()) ids.push_back(Vocabulary::pad);
    return ids;
}

EncodedSample encode(const CodeSample& sample, const Vocabularies& vocabs, std::size_t max_len) {
    EncodedSample e;
    e.input = encode_input(sample.code_tokens, vocabs.input, max_len);
    e.target.reserve(sample.name_subtokens.size() + 2);
    e.target.push_back(Vocabulary::bos);
    for (const auto& t : sample.name_subtokens) e.target.push_back(vocabs.output.index_of(t));
    e.target.push_back(Vocabulary::eos);
    return e;
}

std::string join(const Tokens& tokens, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += sep;
        out += tokens[i];
    }
    return out;
}

} // namespace bdl
