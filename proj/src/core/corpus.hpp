#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace bdl {

using SampleId = std::int64_t;
using Tokens = std::vector<std::string>;

// One code-summarization example. `code` is the rendered source and
// `code_tokens` its tokenization; the two are kept consistent by every
// operation that edits a sample.
struct CodeSample {
    SampleId id = 0;
    std::string code;
    Tokens code_tokens;
    Tokens name_subtokens;
    // Ground truth. Defense code must only read this to score recall.
    bool is_poisoned = false;
    std::optional<SampleId> origin_id;
};

enum class Split { train, valid, test };

std::string_view to_string(Split split);
Split parse_split(std::string_view text);

struct Dataset {
    std::vector<CodeSample> samples;
    Split split = Split::train;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
    std::size_t poisoned_count() const;
    SampleId max_id() const;
    // Throws if two samples share an id.
    void check_unique_ids() const;
};

struct LoadResult {
    Dataset dataset;
    std::size_t skipped_empty_names = 0;
};

// Splits an identifier on underscores and camel-case boundaries. An upper-case
// run followed by a lower-case letter splits before its last capital, digits
// stay attached to the preceding run, and all pieces are lower-cased.
Tokens subtokenize(std::string_view identifier);

// Whitespace/punctuation tokenizer for the Python-like surface syntax.
// Identifiers are subtokenized, numeric literals are kept whole, and common
// two-character operators (==, <=, +=, ...) are single tokens. Total.
Tokens tokenize(std::string_view code);

// Reads one record per line: {"code": str, "name": str} plus optional id,
// is_poisoned, origin_id. Records with an empty name are skipped and counted.
LoadResult load_jsonl(const std::filesystem::path& path);
void save_jsonl(const Dataset& dataset, const std::filesystem::path& path);

// Deterministic Python-like functions drawn from a fixed set of templates
// whose method name is determined by the template and its slot fillers.
Dataset generate_synthetic(std::size_t n, std::uint64_t seed, SampleId first_id = 0);

// Number of distinct name-template families the generator draws from.
std::size_t synthetic_template_count();

class Vocabulary {
public:
    static constexpr int pad = 0;
    static constexpr int unk = 1;
    static constexpr int bos = 2;
    static constexpr int eos = 3;
    static constexpr int reserved = 4;

    Vocabulary();

    // Keeps the `cap` most frequent tokens; equal counts are ordered
    // lexicographically. Reserved entries do not count against the cap.
    static Vocabulary from_counts(const std::unordered_map<std::string, std::size_t>& counts,
                                  std::size_t cap);
    static Vocabulary from_tokens(const std::vector<std::string>& ordered_tokens);

    int index_of(const std::string& token) const;
    const std::string& token_at(int index) const;
    std::size_t size() const { return index_to_token_.size(); }
    bool contains(const std::string& token) const { return token_to_index_.count(token) != 0; }
    // Non-reserved tokens in index order.
    std::vector<std::string> regular_tokens() const;

private:
    void add(const std::string& token);

    std::unordered_map<std::string, int> token_to_index_;
    std::vector<std::string> index_to_token_;
};

struct Vocabularies {
    Vocabulary input;
    Vocabulary output;
};

Vocabularies build_vocab(const Dataset& train, std::size_t input_cap, std::size_t output_cap);

struct EncodedSample {
    std::vector<int> input;
    // BOS, name subtokens..., EOS
    std::vector<int> target;
};

inline constexpr std::size_t default_max_input_len = 128;

// Truncation keeps the prefix. An empty token sequence encodes as a single
// padding token so the encoder always sees at least one step.
EncodedSample encode(const CodeSample& sample, const Vocabularies& vocabs,
                     std::size_t max_len = default_max_input_len);
std::vector<int> encode_input(const Tokens& tokens, const Vocabulary& vocab, std::size_t max_len);

std::string join(const Tokens& tokens, std::string_view sep);

} // namespace bdl
