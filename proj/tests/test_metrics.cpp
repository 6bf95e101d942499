#include "core/error.hpp"
#include "core/metrics.hpp"

#include <gtest/gtest.h>

using namespace bdl;

namespace {

Model rigged_model(const Dataset& d, const Tokens& always) {
    ModelConfig c;
    c.embed_dim = 4;
    c.hidden_dim = 4;
    c.max_decode_len = 1;
    Model m = init_model(c, build_vocab(d, 100, 100));
    auto bias = m.params().vector(m.tensors().out_b);
    // One decode step whose argmax is fixed by the bias.
    bias(m.vocabs().output.index_of(always.at(0))) = 1e6;
    return m;
}

} // namespace

TEST(F1, PerfectAndDisjoint) {
    EXPECT_DOUBLE_EQ(subtoken_f1({{"get", "x"}}, {{"get", "x"}}).f1, 1.0);
    EXPECT_DOUBLE_EQ(subtoken_f1({{"a"}}, {{"b"}}).f1, 0.0);
    EXPECT_DOUBLE_EQ(subtoken_f1({{}}, {{"b"}}).f1, 0.0);
}

TEST(F1, MicroMultisetCaseInsensitive) {
    const auto s = subtoken_f1({{"Get", "get", "x"}, {"y"}}, {{"get", "x"}, {"y", "z"}});
    // tp = 2 + 1, predicted = 4, expected = 4
    EXPECT_DOUBLE_EQ(s.precision, 0.75);
    EXPECT_DOUBLE_EQ(s.recall, 0.75);
    EXPECT_DOUBLE_EQ(s.f1, 0.75);
}

TEST(F1, SwappingArgumentsSwapsPrecisionAndRecall) {
    const std::vector<Tokens> a = {{"a", "b", "c"}, {"d"}};
    const std::vector<Tokens> b = {{"a"}, {"d", "e"}};
    const auto ab = subtoken_f1(a, b), ba = subtoken_f1(b, a);
    EXPECT_DOUBLE_EQ(ab.precision, ba.recall);
    EXPECT_DOUBLE_EQ(ab.recall, ba.precision);
    EXPECT_DOUBLE_EQ(ab.f1, ba.f1);
}

TEST(F1, LengthMismatchIsError) { EXPECT_THROW(subtoken_f1({{"a"}}, {}), Error); }

TEST(BackdoorRate, OracleAndIgnoringModels) {
    const auto d = generate_synthetic(30, 1);
    Dataset with_target = d;
    with_target.samples[0].name_subtokens = {"create"};
    BackdoorSpec spec;
    spec.static_target = {"create"};
    const Model always_create = rigged_model(with_target, {"create"});
    EXPECT_DOUBLE_EQ(backdoor_success_rate(always_create, d, spec, 1), 1.0);

    const Model always_get = rigged_model(with_target, {"get"});
    EXPECT_DOUBLE_EQ(backdoor_success_rate(always_get, d, spec, 1), 0.0);
}

TEST(BackdoorRate, StaticRateIgnoresReferenceLabels) {
    const auto d = generate_synthetic(30, 1);
    Dataset relabeled = d;
    for (auto& s : relabeled.samples) s.name_subtokens = {"whatever"};
    BackdoorSpec spec;
    const Model m = init_model(ModelConfig{}, build_vocab(d, 100, 100));
    EXPECT_DOUBLE_EQ(backdoor_success_rate(m, d, spec, 4), backdoor_success_rate(m, relabeled, spec, 4));
}

TEST(BackdoorRate, DynamicComparesWithOwnPrediction) {
    const auto d = generate_synthetic(20, 2);
    Dataset vocab_src = d;
    vocab_src.samples[0].name_subtokens = {"new"};
    BackdoorSpec spec;
    spec.target = TargetKind::dynamic_target;
    // F(t(x)) = [new] but [new] ++ F(x) = [new, new].
    const Model m = rigged_model(vocab_src, {"new"});
    EXPECT_DOUBLE_EQ(backdoor_success_rate(m, d, spec, 1), 0.0);
}

TEST(BackdoorRate, EmptyTestSetIsError) {
    const auto d = generate_synthetic(5, 1);
    const Model m = init_model(ModelConfig{}, build_vocab(d, 100, 100));
    EXPECT_THROW(backdoor_success_rate(m, Dataset{}, BackdoorSpec{}, 1), Error);
}

TEST(FullEvaluation, IdenticalModelsGiveIdenticalPostMetrics) {
    const auto d = generate_synthetic(25, 3);
    ModelConfig c;
    c.embed_dim = 8;
    c.hidden_dim = 8;
    c.epochs = 2;
    const Model m = fit(d, c);
    const auto r = full_evaluation(m, &m, d, BackdoorSpec{}, 7);
    ASSERT_TRUE(r.post_bd_rate && r.post_test_f1);
    EXPECT_EQ(*r.post_bd_rate, r.bd_rate);
    EXPECT_EQ(*r.post_test_f1, r.test_f1);
    EXPECT_EQ(r.evaluated, d.size());
    const auto no_post = full_evaluation(m, nullptr, d, BackdoorSpec{}, 7);
    EXPECT_FALSE(no_post.post_bd_rate.has_value());
    EXPECT_NE(to_json(no_post).find("\"post_bd_rate\": null"), std::string::npos);
}
