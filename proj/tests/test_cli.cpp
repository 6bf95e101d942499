#include <gtest/gtest.h>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const fs::path work = fs::temp_directory_path() / "bdl_cli_test";

int run(const std::string& args, std::string* output = nullptr) {
    const fs::path log = work / "last_output.txt";
    const std::string cmd = std::string(BDL_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    if (output) {
        std::ifstream in(log);
        std::stringstream ss;
        ss << in.rdbuf();
        *output = ss.str();
    }
    return rc;
}

nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    return nlohmann::json::parse(in);
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const std::string small = " --n-train 200 --n-test 30 --epochs 1";

class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        fs::remove_all(work);
        fs::create_directories(work);
    }
};

} // namespace

TEST_F(Cli, RunAllProducesEveryArtifact) {
    const fs::path out = work / "all";
    std::string log;
    ASSERT_EQ(run("run-all --out " + out.string() + small + " --ks 1 2 5", &log), 0) << log;
    for (const char* f : {"dataset.jsonl", "test.jsonl", "poisoned.jsonl", "model.ckpt", "reprs-encoder-output.csv",
                          "detect.jsonl", "hist.csv", "ksweep.csv", "eval.json", "ledger.csv",
                          "model-retrained.ckpt", "poison.manifest.json", "train.manifest.json",
                          "eval.manifest.json"})
        EXPECT_TRUE(fs::exists(out / f)) << f;
    const auto eval = read_json(out / "eval.json");
    for (const char* k : {"test_f1", "bd_rate", "post_test_f1", "post_bd_rate"}) EXPECT_TRUE(eval.at(k).is_number()) << k;
    const auto manifest = read_json(out / "train.manifest.json");
    EXPECT_TRUE(manifest.contains("config_hash"));
    EXPECT_TRUE(manifest.contains("seed"));
    EXPECT_TRUE(manifest.contains("wall_time_seconds"));
    EXPECT_EQ(manifest.at("inputs").at(0).at("path"), "poisoned.jsonl");
    EXPECT_EQ(read_text(out / "ksweep.csv").substr(0, 9), "k,recall\n");
    EXPECT_EQ(read_text(out / "hist.csv").substr(0, 18), "score,is_poisoned\n");
}

TEST_F(Cli, EpsilonZeroSkipsDetection) {
    const fs::path out = work / "eps0";
    std::string log;
    ASSERT_EQ(run("run-all --epsilon 0 --out " + out.string() + small, &log), 0) << log;
    EXPECT_FALSE(fs::exists(out / "detect.jsonl"));
    const auto eval = read_json(out / "eval.json");
    EXPECT_TRUE(eval.at("bd_rate").is_number());
    EXPECT_TRUE(eval.at("post_bd_rate").is_null());
    EXPECT_EQ(read_json(out / "poison.manifest.json").at("poisoned_count"), 0);
}

TEST_F(Cli, MissingUpstreamArtifactIsNamed) {
    std::string log;
    EXPECT_NE(run("train --out " + (work / "empty").string() + small, &log), 0);
    EXPECT_NE(log.find("poison.manifest.json"), std::string::npos) << log;
}

TEST_F(Cli, ConfigHashMismatchIsHardError) {
    const fs::path out = work / "hash";
    ASSERT_EQ(run("gen-corpus --out " + out.string() + small), 0);
    ASSERT_EQ(run("poison --out " + out.string() + small), 0);
    std::string log;
    EXPECT_NE(run("train --epsilon 0.1 --out " + out.string() + small, &log), 0);
    EXPECT_NE(log.find("config hash mismatch"), std::string::npos) << log;
}

TEST_F(Cli, TrainTwiceGivesIdenticalCheckpoints) {
    const fs::path out = work / "det";
    ASSERT_EQ(run("gen-corpus --out " + out.string() + small), 0);
    ASSERT_EQ(run("poison --out " + out.string() + small), 0);
    ASSERT_EQ(run("train --out " + out.string() + small), 0);
    const std::string first = read_text(out / "model.ckpt");
    ASSERT_EQ(run("train --out " + out.string() + small), 0);
    EXPECT_EQ(first, read_text(out / "model.ckpt"));
}

TEST_F(Cli, Alg1AndTopKOneRemoveTheSameSamples) {
    const fs::path out = work / "alg1";
    ASSERT_EQ(run("gen-corpus --out " + out.string() + small), 0);
    ASSERT_EQ(run("poison --out " + out.string() + small), 0);
    ASSERT_EQ(run("train --out " + out.string() + small), 0);
    ASSERT_EQ(run("extract --out " + out.string() + small), 0);
    auto removed = [&](const std::string& score) {
        std::string log;
        EXPECT_EQ(run("detect --k 1 --score " + score + " --out " + out.string() + small, &log), 0) << log;
        std::vector<long long> ids;
        std::ifstream in(out / "detect.jsonl");
        for (std::string line; std::getline(in, line);) {
            const auto j = nlohmann::json::parse(line);
            if (j.contains("removed") && j.at("removed").get<bool>()) ids.push_back(j.at("id").get<long long>());
        }
        return ids;
    };
    const auto a = removed("alg1");
    const auto b = removed("topk");
    EXPECT_FALSE(a.empty());
    EXPECT_EQ(a, b);
}

TEST_F(Cli, PoisonRateManifest) {
    const fs::path out = work / "rate";
    ASSERT_EQ(run("gen-corpus --n-train 20000 --n-test 10 --out " + out.string()), 0);
    ASSERT_EQ(run("poison --n-train 20000 --n-test 10 --epsilon 0.05 --out " + out.string()), 0);
    const double eps = read_json(out / "poison.manifest.json").at("realized_epsilon").get<double>();
    EXPECT_GE(eps, 0.045);
    EXPECT_LE(eps, 0.055);
}

TEST_F(Cli, ConfigFileAndUnknownKeys) {
    const fs::path cfg = work / "cfg.json";
    {
        std::ofstream out(cfg);
        out << R"({"seed": 4, "corpus": {"n_train": 50, "n_test": 10}, "model": {"epochs": 1, "hidden_dim": 4},
                  "detector": {"k": 2, "repr": "mean-context"}})";
    }
    const fs::path out = work / "cfg";
    std::string log;
    ASSERT_EQ(run("gen-corpus --config " + cfg.string() + " --out " + out.string(), &log), 0) << log;
    EXPECT_EQ(read_json(out / "gen-corpus.manifest.json").at("train_size"), 50);

    const fs::path bad = work / "bad.json";
    {
        std::ofstream o(bad);
        o << R"({"model": {"hidden": 4}})";
    }
    EXPECT_NE(run("gen-corpus --config " + bad.string() + " --out " + out.string(), &log), 0);
    EXPECT_NE(log.find("model.hidden"), std::string::npos) << log;
    EXPECT_NE(run("gen-corpus --repr nonsense --out " + out.string(), &log), 0);
}
