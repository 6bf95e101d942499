#include <backdoorlab/backdoorlab.h>

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("bdl_capi_" + name)).string();
}

struct Handles {
    bdl_dataset* clean = nullptr;
    bdl_dataset* poisoned = nullptr;
    bdl_model* model = nullptr;
    bdl_reprs* reprs = nullptr;
    bdl_report* report = nullptr;
    ~Handles() {
        bdl_report_free(report);
        bdl_reprs_free(reprs);
        bdl_model_free(model);
        bdl_dataset_free(poisoned);
        bdl_dataset_free(clean);
    }
};

void count_epochs(size_t, double loss, void* user) {
    EXPECT_TRUE(std::isfinite(loss));
    ++*static_cast<int*>(user);
}

} // namespace

TEST(CApi, StringHelpersAndBufferProtocol) {
    size_t needed = 0;
    EXPECT_EQ(bdl_subtokenize("createEntry", nullptr, 0, &needed), BDL_ERR_BUFFER_TOO_SMALL);
    EXPECT_EQ(needed, std::string("create entry").size() + 1);
    std::vector<char> buf(needed);
    ASSERT_EQ(bdl_subtokenize("createEntry", buf.data(), buf.size(), &needed), BDL_OK);
    EXPECT_STREQ(buf.data(), "create entry");

    char tok[64];
    ASSERT_EQ(bdl_tokenize("return x*x", tok, sizeof tok, nullptr), BDL_OK);
    EXPECT_STREQ(tok, "return x * x");
    EXPECT_STREQ(bdl_status_name(BDL_ERR_PARSE), "parse");
    EXPECT_STRNE(bdl_version(), "");
    EXPECT_NE(bdl_sub_seed(1, "corpus"), bdl_sub_seed(1, "poison"));
}

TEST(CApi, Triggers) {
    char buf[256];
    ASSERT_EQ(bdl_trigger_render(BDL_TRIGGER_FIXED, 0, buf, sizeof buf, nullptr), BDL_OK);
    EXPECT_STREQ(buf, "if random() < 0: print(\"fail\")");
    int dead = 0;
    ASSERT_EQ(bdl_trigger_verify_dead(buf, &dead), BDL_OK);
    EXPECT_EQ(dead, 1);
    for (uint64_t s = 0; s < 50; ++s) {
        ASSERT_EQ(bdl_trigger_render(BDL_TRIGGER_GRAMMATICAL, s, buf, sizeof buf, nullptr), BDL_OK);
        ASSERT_EQ(bdl_trigger_verify_dead(buf, &dead), BDL_OK);
        EXPECT_EQ(dead, 1) << buf;
    }
    ASSERT_EQ(bdl_trigger_verify_dead("if exp(0.5) > 0.5: print(\"x\")", &dead), BDL_OK);
    EXPECT_EQ(dead, 0);
    EXPECT_EQ(bdl_trigger_verify_dead("print(1)", &dead), BDL_ERR_PARSE);
    EXPECT_NE(std::string(bdl_last_error()), "");
}

TEST(CApi, ErrorsAreReported) {
    bdl_dataset* d = nullptr;
    EXPECT_EQ(bdl_dataset_load_jsonl(temp_path("missing.jsonl").c_str(), &d, nullptr), BDL_ERR_IO);
    EXPECT_EQ(d, nullptr);
    EXPECT_NE(std::string(bdl_last_error()).find("missing.jsonl"), std::string::npos);
    EXPECT_EQ(bdl_dataset_load_jsonl(nullptr, &d, nullptr), BDL_ERR_INVALID_ARGUMENT);

    bdl_model_config cfg;
    bdl_model_config_default(&cfg);
    cfg.hidden_dim = 0;
    ASSERT_EQ(bdl_dataset_generate(5, 1, 0, &d), BDL_OK);
    bdl_model* m = nullptr;
    EXPECT_EQ(bdl_model_train(d, &cfg, nullptr, nullptr, &m), BDL_ERR_INVALID_ARGUMENT);
    EXPECT_EQ(m, nullptr);

    bdl_backdoor_spec spec;
    bdl_backdoor_spec_default(&spec);
    spec.epsilon = 0.7;
    bdl_dataset* p = nullptr;
    EXPECT_EQ(bdl_dataset_poison(d, &spec, 1, &p, nullptr), BDL_ERR_INVALID_ARGUMENT);
    bdl_dataset_free(d);
}

TEST(CApi, EndToEndPipeline) {
    Handles h;
    ASSERT_EQ(bdl_dataset_generate(200, 3, 0, &h.clean), BDL_OK);
    EXPECT_EQ(bdl_dataset_size(h.clean), 200u);

    bdl_backdoor_spec spec;
    bdl_backdoor_spec_default(&spec);
    spec.epsilon = 0.1;
    bdl_poison_stats stats{};
    ASSERT_EQ(bdl_dataset_poison(h.clean, &spec, 4, &h.poisoned, &stats), BDL_OK) << bdl_last_error();
    EXPECT_EQ(bdl_dataset_poisoned_count(h.poisoned), stats.poisoned_count);
    EXPECT_EQ(bdl_dataset_size(h.poisoned), 200u + stats.poisoned_count);
    EXPECT_GT(stats.poisoned_count, 0u);

    const std::string data_path = temp_path("poisoned.jsonl");
    ASSERT_EQ(bdl_dataset_save_jsonl(h.poisoned, data_path.c_str()), BDL_OK);
    bdl_dataset* reloaded = nullptr;
    size_t skipped = 99;
    ASSERT_EQ(bdl_dataset_load_jsonl(data_path.c_str(), &reloaded, &skipped), BDL_OK);
    EXPECT_EQ(skipped, 0u);
    EXPECT_EQ(bdl_dataset_poisoned_count(reloaded), stats.poisoned_count);
    bdl_dataset_free(reloaded);

    bdl_model_config cfg;
    bdl_model_config_default(&cfg);
    cfg.embed_dim = 8;
    cfg.hidden_dim = 8;
    cfg.epochs = 2;
    int epochs_seen = 0;
    ASSERT_EQ(bdl_model_train(h.poisoned, &cfg, count_epochs, &epochs_seen, &h.model), BDL_OK) << bdl_last_error();
    EXPECT_EQ(epochs_seen, 2);

    const std::string ckpt = temp_path("model.ckpt");
    ASSERT_EQ(bdl_model_save(h.model, ckpt.c_str()), BDL_OK);
    bdl_model* back = nullptr;
    ASSERT_EQ(bdl_model_load(ckpt.c_str(), &back), BDL_OK);
    char a[128], b[128];
    ASSERT_EQ(bdl_model_predict(h.model, "def f(self):\n    return self.size", a, sizeof a, nullptr), BDL_OK);
    ASSERT_EQ(bdl_model_predict(back, "def f(self):\n    return self.size", b, sizeof b, nullptr), BDL_OK);
    EXPECT_STREQ(a, b);
    bdl_model_free(back);

    double grad_err = 1.0;
    ASSERT_EQ(bdl_model_gradient_check(h.model, h.clean, 2, 1e-5, 60, &grad_err), BDL_OK);
    EXPECT_LT(grad_err, 1e-4);

    bdl_repr_kind kind;
    ASSERT_EQ(bdl_repr_kind_parse("encoder-output", &kind), BDL_OK);
    EXPECT_EQ(kind, BDL_REPR_ENCODER_OUTPUT);
    EXPECT_STREQ(bdl_repr_kind_name(BDL_REPR_CONTEXT_VECTORS), "context-vectors");
    EXPECT_EQ(bdl_repr_kind_parse("nope", &kind), BDL_ERR_INVALID_ARGUMENT);

    ASSERT_EQ(bdl_model_extract(h.model, h.poisoned, BDL_REPR_ENCODER_OUTPUT, &h.reprs), BDL_OK);
    EXPECT_EQ(bdl_reprs_dim(h.reprs), 32u);
    EXPECT_EQ(bdl_reprs_rows(h.reprs), bdl_dataset_size(h.poisoned));
    const std::string csv = temp_path("reprs.csv");
    ASSERT_EQ(bdl_reprs_save_csv(h.reprs, csv.c_str()), BDL_OK);
    bdl_reprs* loaded = nullptr;
    ASSERT_EQ(bdl_reprs_load_csv(csv.c_str(), BDL_REPR_ENCODER_OUTPUT, &loaded), BDL_OK);
    EXPECT_EQ(bdl_reprs_rows(loaded), bdl_reprs_rows(h.reprs));

    bdl_detect_options opts;
    bdl_detect_options_default(&opts);
    opts.epsilon = 0.1;
    ASSERT_EQ(bdl_detect(loaded, &opts, h.poisoned, &h.report), BDL_OK) << bdl_last_error();
    bdl_reprs_free(loaded);
    const size_t n = bdl_dataset_size(h.poisoned);
    EXPECT_EQ(bdl_report_size(h.report), n);
    EXPECT_EQ(bdl_report_removed_count(h.report), static_cast<size_t>(std::floor(1.5 * 0.1 * n + 1e-9)));
    bdl_report_entry first{}, second{};
    ASSERT_EQ(bdl_report_entry_at(h.report, 0, &first), BDL_OK);
    ASSERT_EQ(bdl_report_entry_at(h.report, 1, &second), BDL_OK);
    EXPECT_GE(first.score, second.score);
    EXPECT_EQ(first.removed, 1);
    EXPECT_NE(first.is_poisoned, -1);
    EXPECT_EQ(bdl_report_entry_at(h.report, n, &first), BDL_ERR_INVALID_ARGUMENT);
    double recall = -1;
    ASSERT_EQ(bdl_report_recall(h.report, &recall), BDL_OK);
    EXPECT_GE(recall, 0.0);
    EXPECT_LE(recall, 1.0);

    std::vector<int64_t> ids(bdl_report_removed_count(h.report));
    EXPECT_EQ(bdl_report_removed_ids(h.report, ids.data(), ids.size()), ids.size());
    bdl_dataset* cleaned = nullptr;
    ASSERT_EQ(bdl_dataset_without(h.poisoned, ids.data(), ids.size(), &cleaned), BDL_OK);
    EXPECT_EQ(bdl_dataset_size(cleaned), n - ids.size());
    bdl_dataset_free(cleaned);

    const std::string rep_path = temp_path("detect.jsonl");
    ASSERT_EQ(bdl_report_save_jsonl(h.report, rep_path.c_str()), BDL_OK);
    bdl_report* rep_back = nullptr;
    ASSERT_EQ(bdl_report_load_jsonl(rep_path.c_str(), &rep_back), BDL_OK);
    EXPECT_EQ(bdl_report_removed_count(rep_back), ids.size());
    bdl_report_free(rep_back);
    ASSERT_EQ(bdl_report_write_histogram(h.report, temp_path("hist.csv").c_str()), BDL_OK);

    const size_t ks[] = {1, 2, 64};
    double recalls[3];
    ASSERT_EQ(bdl_k_sweep(h.reprs, &opts, h.poisoned, ks, 3, recalls), BDL_OK) << bdl_last_error();
    EXPECT_FALSE(std::isnan(recalls[0]));
    EXPECT_FALSE(std::isnan(recalls[1]));
    EXPECT_TRUE(std::isnan(recalls[2]));

    bdl_dataset* test = nullptr;
    ASSERT_EQ(bdl_dataset_generate(30, 99, 10000, &test), BDL_OK);
    bdl_eval_report ev{};
    ASSERT_EQ(bdl_evaluate(h.model, nullptr, test, &spec, 5, &ev), BDL_OK) << bdl_last_error();
    EXPECT_EQ(ev.has_post, 0);
    EXPECT_TRUE(std::isnan(ev.post_bd_rate));
    EXPECT_EQ(ev.evaluated, 30u);
    ASSERT_EQ(bdl_evaluate(h.model, h.model, test, &spec, 5, &ev), BDL_OK);
    EXPECT_EQ(ev.has_post, 1);
    EXPECT_EQ(ev.post_bd_rate, ev.bd_rate);
    EXPECT_EQ(ev.post_test_f1, ev.test_f1);
    bdl_dataset_free(test);
}

TEST(CApi, RecallNotApplicableWithoutPoison) {
    Handles h;
    ASSERT_EQ(bdl_dataset_generate(60, 1, 0, &h.clean), BDL_OK);
    bdl_model_config cfg;
    bdl_model_config_default(&cfg);
    cfg.embed_dim = cfg.hidden_dim = 4;
    cfg.epochs = 1;
    ASSERT_EQ(bdl_model_train(h.clean, &cfg, nullptr, nullptr, &h.model), BDL_OK);
    ASSERT_EQ(bdl_model_extract(h.model, h.clean, BDL_REPR_MEAN_INPUT_EMBEDDING, &h.reprs), BDL_OK);
    bdl_detect_options opts;
    bdl_detect_options_default(&opts);
    opts.k = 2;
    ASSERT_EQ(bdl_detect(h.reprs, &opts, h.clean, &h.report), BDL_OK);
    double r = 0;
    EXPECT_EQ(bdl_report_recall(h.report, &r), BDL_ERR_NOT_APPLICABLE);
}
