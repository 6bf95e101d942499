#include "core/corpus.hpp"
#include "core/error.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

using namespace bdl;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "bdl_corpus_test";
    std::filesystem::create_directories(dir);
    return dir / name;
}

void write(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
}

} // namespace

TEST(Subtokenize, CamelCase) { EXPECT_EQ(subtokenize("createEntry"), (Tokens{"create", "entry"})); }

TEST(Subtokenize, SnakeCase) { EXPECT_EQ(subtokenize("get_value"), (Tokens{"get", "value"})); }

TEST(Subtokenize, AcronymRunSplitsBeforeLastCapital) {
    EXPECT_EQ(subtokenize("parseHTTPResponse2"), (Tokens{"parse", "http", "response2"}));
}

TEST(Subtokenize, MixedAndEdgeCases) {
    EXPECT_EQ(subtokenize("square"), (Tokens{"square"}));
    EXPECT_EQ(subtokenize("__init__"), (Tokens{"init"}));
    EXPECT_EQ(subtokenize("URL"), (Tokens{"url"}));
    EXPECT_EQ(subtokenize("toJSON_string"), (Tokens{"to", "json", "string"}));
    EXPECT_TRUE(subtokenize("").empty());
}

TEST(Tokenize, Arithmetic) { EXPECT_EQ(tokenize("return x*x"), (Tokens{"return", "x", "*", "x"})); }

TEST(Tokenize, FixedTriggerCondition) {
    EXPECT_EQ(tokenize("if random() < 0:"), (Tokens{"if", "random", "(", ")", "<", "0", ":"}));
}

TEST(Tokenize, IdentifiersAreSubtokenized) {
    EXPECT_EQ(tokenize("myVar = 1"), (Tokens{"my", "var", "=", "1"}));
}

TEST(Tokenize, NumbersAndOperators) {
    EXPECT_EQ(tokenize("x <= -3.25"), (Tokens{"x", "<=", "-", "3.25"}));
    EXPECT_EQ(tokenize("a == b"), (Tokens{"a", "==", "b"}));
    EXPECT_EQ(tokenize("total += 1"), (Tokens{"total", "+=", "1"}));
}

TEST(LoadJsonl, ParsesRecordsAndSubtokenizesNames) {
    const auto p = temp_file("ok.jsonl");
    write(p, R"({"code":"def f(x):\n  return x*x","name":"square"})"
             "\n"
             R"({"code":"def f(self):\n    pass","name":"createEntry","id":7})"
             "\n");
    const auto r = load_jsonl(p);
    ASSERT_EQ(r.dataset.size(), 2u);
    EXPECT_EQ(r.dataset.samples[0].name_subtokens, (Tokens{"square"}));
    EXPECT_EQ(r.dataset.samples[1].name_subtokens, (Tokens{"create", "entry"}));
    EXPECT_EQ(r.dataset.samples[1].id, 7);
    EXPECT_FALSE(r.dataset.samples[0].is_poisoned);
    EXPECT_FALSE(r.dataset.samples[0].code_tokens.empty());
}

TEST(LoadJsonl, MalformedLineNamesTheLine) {
    const auto p = temp_file("bad.jsonl");
    write(p, R"({"code":"a","name":"x"})"
             "\n"
             R"({"code":"b","name":"y"})"
             "\n"
             "{not json\n"
             R"({"code":"c","name":"z"})"
             "\n");
    try {
        load_jsonl(p);
        FAIL() << "expected a parse error";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::parse);
        EXPECT_NE(std::string(e.what()).find(":3"), std::string::npos) << e.what();
    }
}

TEST(LoadJsonl, EmptyNamesAreSkippedAndCounted) {
    const auto p = temp_file("empty_name.jsonl");
    write(p, R"({"code":"a","name":""})"
             "\n"
             R"({"code":"b","name":"ok"})"
             "\n");
    const auto r = load_jsonl(p);
    EXPECT_EQ(r.dataset.size(), 1u);
    EXPECT_EQ(r.skipped_empty_names, 1u);
}

TEST(LoadJsonl, MissingFileIsIoError) {
    try {
        load_jsonl(temp_file("does_not_exist.jsonl"));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::io);
    }
}

TEST(Jsonl, RoundTripKeepsPoisonFields) {
    Dataset d = generate_synthetic(20, 3);
    d.samples[4].is_poisoned = true;
    d.samples[4].origin_id = 2;
    const auto p = temp_file("roundtrip.jsonl");
    save_jsonl(d, p);
    const auto back = load_jsonl(p).dataset;
    ASSERT_EQ(back.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        EXPECT_EQ(back.samples[i].id, d.samples[i].id);
        EXPECT_EQ(back.samples[i].code, d.samples[i].code);
        EXPECT_EQ(back.samples[i].code_tokens, d.samples[i].code_tokens);
        EXPECT_EQ(back.samples[i].name_subtokens, d.samples[i].name_subtokens);
        EXPECT_EQ(back.samples[i].is_poisoned, d.samples[i].is_poisoned);
        EXPECT_EQ(back.samples[i].origin_id, d.samples[i].origin_id);
    }
}

TEST(Synthetic, DeterministicForSeed) {
    const auto a = generate_synthetic(1, 7);
    const auto b = generate_synthetic(1, 7);
    ASSERT_EQ(a.size(), 1u);
    EXPECT_EQ(a.samples[0].code, b.samples[0].code);
    EXPECT_EQ(a.samples[0].name_subtokens, b.samples[0].name_subtokens);
}

TEST(Synthetic, HasManyNamePatterns) {
    const auto d = generate_synthetic(1000, 1);
    std::set<std::string> patterns;
    for (const auto& s : d.samples) patterns.insert(join(s.name_subtokens, " "));
    EXPECT_GE(patterns.size(), 8u);
    EXPECT_GE(synthetic_template_count(), 8u);
}

TEST(Synthetic, EmptyAndIdOffset) {
    EXPECT_TRUE(generate_synthetic(0, 1).empty());
    const auto d = generate_synthetic(3, 1, 100);
    EXPECT_EQ(d.samples[0].id, 100);
    EXPECT_EQ(d.samples[2].id, 102);
    d.check_unique_ids();
}

TEST(Synthetic, NameNotVisibleInCode) {
    for (const auto& s : generate_synthetic(200, 5).samples) {
        EXPECT_EQ(s.code.rfind("def f(", 0), 0u) << s.code;
    }
}

TEST(Vocabulary, CapKeepsMostFrequent) {
    const auto v = Vocabulary::from_counts({{"a", 3}, {"b", 2}, {"c", 1}}, 2);
    EXPECT_EQ(v.size(), 6u);
    EXPECT_TRUE(v.contains("a"));
    EXPECT_TRUE(v.contains("b"));
    EXPECT_FALSE(v.contains("c"));
    EXPECT_EQ(v.index_of("c"), Vocabulary::unk);
    EXPECT_EQ(v.token_at(Vocabulary::pad), "<pad>");
}

TEST(Vocabulary, LargeCapKeepsEverything) {
    const auto v = Vocabulary::from_counts({{"a", 3}, {"b", 2}, {"c", 1}}, 100);
    EXPECT_EQ(v.size(), 3u + Vocabulary::reserved);
}

TEST(Vocabulary, TiesBrokenAlphabetically) {
    const auto v = Vocabulary::from_counts({{"z", 2}, {"m", 2}, {"a", 2}}, 2);
    EXPECT_TRUE(v.contains("a"));
    EXPECT_TRUE(v.contains("m"));
    EXPECT_FALSE(v.contains("z"));
}

TEST(Encode, TruncatesToMaxLen) {
    Tokens toks;
    for (int i = 0; i < 200; ++i) toks.push_back("t" + std::to_string(i % 7));
    const Vocabulary v = Vocabulary::from_tokens({"t0", "t1", "t2", "t3", "t4", "t5", "t6"});
    const auto ids = encode_input(toks, v, 128);
    ASSERT_EQ(ids.size(), 128u);
    for (std::size_t i = 0; i < 128; ++i) EXPECT_EQ(ids[i], v.index_of(toks[i]));
}

TEST(Encode, EmptyInputIsPadding) {
    const Vocabulary v;
    const auto ids = encode_input({}, v, 128);
    ASSERT_FALSE(ids.empty());
    for (int id : ids) EXPECT_EQ(id, Vocabulary::pad);
}

TEST(Encode, UnknownTokenMapsToUnkAndTargetIsFramed) {
    Dataset d;
    CodeSample s;
    s.code = "def f(): return x";
    s.code_tokens = tokenize(s.code);
    s.name_subtokens = {"get", "x"};
    d.samples.push_back(s);
    const auto vocabs = build_vocab(d, 100, 100);
    CodeSample probe = s;
    probe.code_tokens.push_back("never_seen_token");
    const auto e = encode(probe, vocabs);
    EXPECT_EQ(e.input.back(), Vocabulary::unk);
    ASSERT_EQ(e.target.size(), 4u);
    EXPECT_EQ(e.target.front(), Vocabulary::bos);
    EXPECT_EQ(e.target.back(), Vocabulary::eos);
}
