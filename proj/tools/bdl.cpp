// bdl: staged experiment pipeline over the backdoorlab C API.

#include <backdoorlab/backdoorlab.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct CliError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void check(bdl_status status, const std::string& what) {
    if (status != BDL_OK)
        throw CliError(what + ": " + bdl_status_name(status) + ": " + bdl_last_error());
}

template <class T, void (*Free)(T*)>
struct Deleter {
    void operator()(T* p) const { Free(p); }
};
using Dataset = std::unique_ptr<bdl_dataset, Deleter<bdl_dataset, bdl_dataset_free>>;
using Model = std::unique_ptr<bdl_model, Deleter<bdl_model, bdl_model_free>>;
using Reprs = std::unique_ptr<bdl_reprs, Deleter<bdl_reprs, bdl_reprs_free>>;
using Report = std::unique_ptr<bdl_report, Deleter<bdl_report, bdl_report_free>>;

// ---- configuration ---------------------------------------------------------

struct Config {
    std::uint64_t seed = 1;
    fs::path outdir = "run";

    std::optional<std::string> train_path;
    std::optional<std::string> test_path;
    std::size_t n_train = 5000;
    std::size_t n_test = 500;

    std::string trigger = "fixed";
    std::string target = "static";
    std::string static_target = "create entry";
    std::string dynamic_prefix = "new";
    double epsilon = 0.05;

    bdl_model_config model{};

    std::size_t k = 10;
    std::string score = "topk";
    std::string repr = "encoder-output";
    std::optional<double> epsilon_assumed;
    std::vector<std::size_t> k_sweep = {1, 2, 5, 10, 20};

    double detect_epsilon() const { return epsilon_assumed.value_or(epsilon); }
};

template <class T>
void take(const json& obj, const char* key, T& into) {
    if (obj.contains(key) && !obj.at(key).is_null()) into = obj.at(key).get<T>();
}

template <class T>
void take(const json& obj, const char* key, std::optional<T>& into) {
    if (obj.contains(key) && !obj.at(key).is_null()) into = obj.at(key).get<T>();
}

void reject_unknown(const json& obj, const std::string& where, std::initializer_list<const char*> keys) {
    if (!obj.is_object()) throw CliError("config: '" + where + "' must be an object");
    for (const auto& [name, _] : obj.items()) {
        if (std::find_if(keys.begin(), keys.end(), [&](const char* k) { return name == k; }) == keys.end())
            throw CliError("config: unknown key '" + where + "." + name + "'");
    }
}

Config load_config(const std::optional<fs::path>& path) {
    Config c;
    bdl_model_config_default(&c.model);
    if (!path) return c;
    std::ifstream in(*path);
    if (!in) throw CliError("cannot open config " + path->string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw CliError("config " + path->string() + ": " + e.what());
    }
    try {
        reject_unknown(j, "", {"seed", "outdir", "corpus", "backdoor", "model", "detector"});
        take(j, "seed", c.seed);
        if (j.contains("outdir")) c.outdir = j.at("outdir").get<std::string>();
        if (j.contains("corpus")) {
            const auto& s = j.at("corpus");
            reject_unknown(s, "corpus", {"train_path", "test_path", "n_train", "n_test"});
            take(s, "train_path", c.train_path);
            take(s, "test_path", c.test_path);
            take(s, "n_train", c.n_train);
            take(s, "n_test", c.n_test);
        }
        if (j.contains("backdoor")) {
            const auto& s = j.at("backdoor");
            reject_unknown(s, "backdoor", {"trigger", "target", "static_target", "dynamic_prefix", "epsilon"});
            take(s, "trigger", c.trigger);
            take(s, "target", c.target);
            take(s, "static_target", c.static_target);
            take(s, "dynamic_prefix", c.dynamic_prefix);
            take(s, "epsilon", c.epsilon);
        }
        if (j.contains("model")) {
            const auto& s = j.at("model");
            reject_unknown(s, "model",
                           {"embed_dim", "hidden_dim", "max_decode_len", "epochs", "batch_size", "input_vocab_cap",
                            "output_vocab_cap", "max_input_len", "learning_rate", "grad_clip"});
            take(s, "embed_dim", c.model.embed_dim);
            take(s, "hidden_dim", c.model.hidden_dim);
            take(s, "max_decode_len", c.model.max_decode_len);
            take(s, "epochs", c.model.epochs);
            take(s, "batch_size", c.model.batch_size);
            take(s, "input_vocab_cap", c.model.input_vocab_cap);
            take(s, "output_vocab_cap", c.model.output_vocab_cap);
            take(s, "max_input_len", c.model.max_input_len);
            take(s, "learning_rate", c.model.learning_rate);
            take(s, "grad_clip", c.model.grad_clip);
        }
        if (j.contains("detector")) {
            const auto& s = j.at("detector");
            reject_unknown(s, "detector", {"k", "score", "repr", "epsilon_assumed", "k_sweep"});
            take(s, "k", c.k);
            take(s, "score", c.score);
            take(s, "repr", c.repr);
            take(s, "epsilon_assumed", c.epsilon_assumed);
            take(s, "k_sweep", c.k_sweep);
        }
    } catch (const json::exception& e) {
        throw CliError("config " + path->string() + ": " + e.what());
    }
    return c;
}

bdl_trigger_kind trigger_kind(const std::string& s) {
    if (s == "fixed") return BDL_TRIGGER_FIXED;
    if (s == "grammatical") return BDL_TRIGGER_GRAMMATICAL;
    throw CliError("unknown trigger '" + s + "' (fixed|grammatical)");
}

bdl_target_kind target_kind(const std::string& s) {
    if (s == "static") return BDL_TARGET_STATIC;
    if (s == "dynamic") return BDL_TARGET_DYNAMIC;
    throw CliError("unknown target '" + s + "' (static|dynamic)");
}

bdl_score_mode score_mode(const std::string& s) {
    if (s == "alg1") return BDL_SCORE_ALG1;
    if (s == "topk") return BDL_SCORE_TOPK;
    throw CliError("unknown score mode '" + s + "' (alg1|topk)");
}

bdl_repr_kind repr_kind(const std::string& s) {
    bdl_repr_kind k{};
    check(bdl_repr_kind_parse(s.c_str(), &k), "--repr");
    return k;
}

void validate(const Config& c) {
    trigger_kind(c.trigger);
    target_kind(c.target);
    score_mode(c.score);
    repr_kind(c.repr);
    if (c.epsilon < 0.0 || c.epsilon >= 0.5) throw CliError("epsilon must be in [0, 0.5)");
    if (c.epsilon_assumed && (*c.epsilon_assumed <= 0.0 || *c.epsilon_assumed >= 0.5))
        throw CliError("epsilon_assumed must be in (0, 0.5)");
    if (c.k == 0) throw CliError("k must be positive");
    if (!c.train_path && c.n_train == 0) throw CliError("n_train must be positive");
    if (!c.test_path && c.n_test == 0) throw CliError("n_test must be positive");
    if (c.train_path.has_value() != c.test_path.has_value())
        throw CliError("corpus.train_path and corpus.test_path must be given together");
}

bdl_backdoor_spec backdoor_spec(const Config& c) {
    bdl_backdoor_spec s;
    bdl_backdoor_spec_default(&s);
    s.trigger = trigger_kind(c.trigger);
    s.target = target_kind(c.target);
    s.static_target = c.static_target.c_str();
    s.dynamic_prefix = c.dynamic_prefix.c_str();
    s.epsilon = c.epsilon;
    return s;
}

bdl_model_config model_config(const Config& c) {
    bdl_model_config m = c.model;
    m.seed = c.seed;
    return m;
}

bdl_detect_options detect_options(const Config& c, std::size_t k) {
    bdl_detect_options o;
    bdl_detect_options_default(&o);
    o.k = k;
    o.epsilon = c.detect_epsilon();
    o.mode = score_mode(c.score);
    o.seed = bdl_sub_seed(c.seed, "detector");
    return o;
}

// ---- stage identity --------------------------------------------------------

json corpus_section(const Config& c) {
    json j{{"seed", c.seed}, {"n_train", c.n_train}, {"n_test", c.n_test}};
    j["train_path"] = c.train_path ? json(*c.train_path) : json(nullptr);
    j["test_path"] = c.test_path ? json(*c.test_path) : json(nullptr);
    return j;
}

json backdoor_section(const Config& c) {
    return {{"trigger", c.trigger}, {"target", c.target}, {"static_target", c.static_target},
            {"dynamic_prefix", c.dynamic_prefix}, {"epsilon", c.epsilon}};
}

json model_section(const Config& c) {
    const auto& m = c.model;
    return {{"embed_dim", m.embed_dim},         {"hidden_dim", m.hidden_dim},
            {"max_decode_len", m.max_decode_len}, {"epochs", m.epochs},
            {"batch_size", m.batch_size},       {"input_vocab_cap", m.input_vocab_cap},
            {"output_vocab_cap", m.output_vocab_cap}, {"max_input_len", m.max_input_len},
            {"learning_rate", m.learning_rate}, {"grad_clip", m.grad_clip}};
}

json detector_section(const Config& c) {
    return {{"k", c.k}, {"score", c.score}, {"repr", c.repr}, {"epsilon", c.detect_epsilon()}};
}

enum class Stage { corpus, poison, train, extract, detect, retrain, eval, hist, ksweep };

const char* stage_name(Stage s) {
    switch (s) {
    case Stage::corpus: return "gen-corpus";
    case Stage::poison: return "poison";
    case Stage::train: return "train";
    case Stage::extract: return "extract";
    case Stage::detect: return "detect";
    case Stage::retrain: return "retrain";
    case Stage::eval: return "eval";
    case Stage::hist: return "hist";
    case Stage::ksweep: return "k-sweep";
    }
    return "?";
}

// Configuration that determines a stage's outputs, including everything upstream.
json stage_identity(const Config& c, Stage s) {
    json j{{"corpus", corpus_section(c)}};
    if (s == Stage::corpus) return j;
    j["backdoor"] = backdoor_section(c);
    if (s == Stage::poison) return j;
    j["model"] = model_section(c);
    if (s == Stage::train) return j;
    j["repr"] = c.repr;
    if (s == Stage::extract) return j;
    if (s == Stage::ksweep) {
        j["detector"] = detector_section(c);
        j["detector"].erase("k");
        j["k_sweep"] = c.k_sweep;
        return j;
    }
    j["detector"] = detector_section(c);
    return j;
}

std::string config_hash(const Config& c, Stage s) {
    const std::string text = stage_identity(c, s).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---- artifacts -------------------------------------------------------------

struct Paths {
    fs::path dir;
    fs::path dataset() const { return dir / "dataset.jsonl"; }
    fs::path test() const { return dir / "test.jsonl"; }
    fs::path poisoned() const { return dir / "poisoned.jsonl"; }
    fs::path model() const { return dir / "model.ckpt"; }
    fs::path reprs(const std::string& kind) const { return dir / ("reprs-" + kind + ".csv"); }
    fs::path detect() const { return dir / "detect.jsonl"; }
    fs::path cleaned() const { return dir / "cleaned.jsonl"; }
    fs::path retrained() const { return dir / "model-retrained.ckpt"; }
    fs::path eval() const { return dir / "eval.json"; }
    fs::path hist() const { return dir / "hist.csv"; }
    fs::path ksweep() const { return dir / "ksweep.csv"; }
    fs::path ledger() const { return dir / "ledger.csv"; }
    fs::path manifest(Stage s, const std::string& suffix = "") const {
        return dir / (std::string(stage_name(s)) + suffix + ".manifest.json");
    }
};

std::string canonical_repr(const std::string& name) { return bdl_repr_kind_name(repr_kind(name)); }

void require_file(const fs::path& p) {
    if (!fs::exists(p)) throw CliError("missing upstream artifact: " + p.string());
}

// Confirms that `upstream` was produced under the current configuration.
void require_stage(const Config& c, const Paths& paths, Stage upstream, const std::string& suffix = "") {
    const fs::path m = paths.manifest(upstream, suffix);
    require_file(m);
    json j;
    try {
        std::ifstream in(m);
        in >> j;
    } catch (const json::exception& e) {
        throw CliError("unreadable manifest " + m.string() + ": " + e.what());
    }
    const std::string expected = config_hash(c, upstream);
    const std::string found = j.value("config_hash", std::string());
    if (found != expected)
        throw CliError("config hash mismatch for " + m.string() + ": artifact has " + found +
                       ", current configuration gives " + expected + "; rerun '" + stage_name(upstream) + "'");
}

class StageRun {
public:
    StageRun(const Config& c, const Paths& p, Stage s, std::uint64_t seed, std::string suffix = "")
        : config_(c), paths_(p), stage_(s), seed_(seed), suffix_(std::move(suffix)),
          start_(std::chrono::steady_clock::now()) {
        fs::create_directories(p.dir);
        std::cerr << "[" << stage_name(s) << "] start\n";
    }
    void input(const fs::path& p) {
        require_file(p);
        inputs_.push_back(p);
    }
    void output(const fs::path& p) { outputs_.push_back(p); }
    json& extra() { return extra_; }

    void finish() {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        json j{{"stage", stage_name(stage_)},
               {"config_hash", config_hash(config_, stage_)},
               {"config", stage_identity(config_, stage_)},
               {"seed", seed_},
               {"wall_time_seconds", secs}};
        auto describe = [](const fs::path& p) {
            json e{{"path", p.filename().string()}};
            if (fs::exists(p)) e["bytes"] = fs::file_size(p);
            return e;
        };
        j["inputs"] = json::array();
        for (const auto& p : inputs_) j["inputs"].push_back(describe(p));
        j["outputs"] = json::array();
        for (const auto& p : outputs_) j["outputs"].push_back(describe(p));
        for (const auto& [k, v] : extra_.items()) j[k] = v;
        std::ofstream out(paths_.manifest(stage_, suffix_));
        out << j.dump(2) << "\n";
        if (!out) throw CliError("cannot write manifest in " + paths_.dir.string());
        std::cerr << "[" << stage_name(stage_) << "] done in " << secs << " s\n";
    }

private:
    const Config& config_;
    const Paths& paths_;
    Stage stage_;
    std::uint64_t seed_;
    std::string suffix_;
    std::chrono::steady_clock::time_point start_;
    std::vector<fs::path> inputs_, outputs_;
    json extra_ = json::object();
};

Dataset load_dataset(const fs::path& p) {
    require_file(p);
    bdl_dataset* d = nullptr;
    check(bdl_dataset_load_jsonl(p.string().c_str(), &d, nullptr), p.string());
    return Dataset(d);
}

Model load_model(const fs::path& p) {
    require_file(p);
    bdl_model* m = nullptr;
    check(bdl_model_load(p.string().c_str(), &m), p.string());
    return Model(m);
}

Report load_report(const fs::path& p) {
    require_file(p);
    bdl_report* r = nullptr;
    check(bdl_report_load_jsonl(p.string().c_str(), &r), p.string());
    return Report(r);
}

Reprs load_reprs(const fs::path& p, const std::string& kind) {
    require_file(p);
    bdl_reprs* r = nullptr;
    check(bdl_reprs_load_csv(p.string().c_str(), repr_kind(kind), &r), p.string());
    return Reprs(r);
}

bool poisoning_disabled(const Config& c) { return c.epsilon == 0.0; }

// ---- stages ----------------------------------------------------------------

void cmd_gen_corpus(const Config& c) {
    const Paths p{c.outdir};
    const std::uint64_t seed = bdl_sub_seed(c.seed, "corpus");
    StageRun run(c, p, Stage::corpus, seed);
    Dataset train, test;
    if (c.train_path) {
        size_t skipped_train = 0, skipped_test = 0;
        bdl_dataset* d = nullptr;
        run.input(*c.train_path);
        check(bdl_dataset_load_jsonl(c.train_path->c_str(), &d, &skipped_train), *c.train_path);
        train.reset(d);
        run.input(*c.test_path);
        check(bdl_dataset_load_jsonl(c.test_path->c_str(), &d, &skipped_test), *c.test_path);
        test.reset(d);
        run.extra()["skipped_empty_names"] = {{"train", skipped_train}, {"test", skipped_test}};
    } else {
        bdl_dataset* d = nullptr;
        check(bdl_dataset_generate(c.n_train, seed, 0, &d), "generate train");
        train.reset(d);
        check(bdl_dataset_generate(c.n_test, bdl_sub_seed(seed, "test"), static_cast<int64_t>(c.n_train), &d),
              "generate test");
        test.reset(d);
    }
    check(bdl_dataset_save_jsonl(train.get(), p.dataset().string().c_str()), "save dataset");
    check(bdl_dataset_save_jsonl(test.get(), p.test().string().c_str()), "save test set");
    run.output(p.dataset());
    run.output(p.test());
    run.extra()["train_size"] = bdl_dataset_size(train.get());
    run.extra()["test_size"] = bdl_dataset_size(test.get());
    run.finish();
}

void cmd_poison(const Config& c) {
    const Paths p{c.outdir};
    require_stage(c, p, Stage::corpus);
    const std::uint64_t seed = bdl_sub_seed(c.seed, "poison");
    StageRun run(c, p, Stage::poison, seed);
    run.input(p.dataset());
    Dataset clean = load_dataset(p.dataset());
    const bdl_backdoor_spec spec = backdoor_spec(c);
    bdl_poison_stats stats{};
    bdl_dataset* d = nullptr;
    check(bdl_dataset_poison(clean.get(), &spec, seed, &d, &stats), "poison");
    Dataset poisoned(d);
    check(bdl_dataset_save_jsonl(poisoned.get(), p.poisoned().string().c_str()), "save poisoned");
    run.output(p.poisoned());
    run.extra()["spec"] = backdoor_section(c);
    run.extra()["clean_count"] = stats.clean_count;
    run.extra()["poisoned_count"] = stats.poisoned_count;
    run.extra()["missing_signature"] = stats.missing_signature;
    run.extra()["copy_probability"] = stats.copy_probability;
    run.extra()["realized_epsilon"] = stats.realized_epsilon;
    std::cout << "poisoned " << stats.poisoned_count << " of " << bdl_dataset_size(poisoned.get())
              << " (realized epsilon " << stats.realized_epsilon << ")\n";
    run.finish();
}

Model train_on(const bdl_dataset* data, const Config& c, json& losses) {
    const bdl_model_config mc = model_config(c);
    bdl_model* m = nullptr;
    auto on_epoch = [](size_t epoch, double loss, void* user) {
        std::cerr << "  epoch " << epoch << " loss " << loss << "\n";
        static_cast<json*>(user)->push_back(loss);
    };
    losses = json::array();
    check(bdl_model_train(data, &mc, on_epoch, &losses, &m), "train");
    return Model(m);
}

void cmd_train(const Config& c) {
    const Paths p{c.outdir};
    require_stage(c, p, Stage::poison);
    StageRun run(c, p, Stage::train, c.seed);
    run.input(p.poisoned());
    Dataset data = load_dataset(p.poisoned());
    json losses;
    Model model = train_on(data.get(), c, losses);
    check(bdl_model_save(model.get(), p.model().string().c_str()), "save model");
    run.output(p.model());
    run.extra()["epoch_loss"] = losses;
    run.finish();
}

void cmd_extract(const Config& c) {
    const Paths p{c.outdir};
    require_stage(c, p, Stage::train);
    const std::string kind = canonical_repr(c.repr);
    StageRun run(c, p, Stage::extract, c.seed, "-" + kind);
    run.input(p.poisoned());
    run.input(p.model());
    Dataset data = load_dataset(p.poisoned());
    Model model = load_model(p.model());
    bdl_reprs* r = nullptr;
    check(bdl_model_extract(model.get(), data.get(), repr_kind(kind), &r), "extract");
    Reprs reprs(r);
    check(bdl_reprs_save_csv(reprs.get(), p.reprs(kind).string().c_str()), "save representations");
    run.output(p.reprs(kind));
    run.extra()["rows"] = bdl_reprs_rows(reprs.get());
    run.extra()["dim"] = bdl_reprs_dim(reprs.get());
    run.finish();
}

void cmd_detect(const Config& c) {
    const Paths p{c.outdir};
    if (poisoning_disabled(c) && !c.epsilon_assumed)
        throw CliError("detection needs epsilon > 0 (or detector.epsilon_assumed)");
    const std::string kind = canonical_repr(c.repr);
    require_stage(c, p, Stage::extract, "-" + kind);
    const bdl_detect_options opts = detect_options(c, c.k);
    StageRun run(c, p, Stage::detect, opts.seed);
    run.input(p.reprs(kind));
    run.input(p.poisoned());
    Reprs reprs = load_reprs(p.reprs(kind), kind);
    Dataset truth = load_dataset(p.poisoned());
    bdl_report* r = nullptr;
    check(bdl_detect(reprs.get(), &opts, truth.get(), &r), "detect");
    Report report(r);
    check(bdl_report_save_jsonl(report.get(), p.detect().string().c_str()), "save report");
    run.output(p.detect());
    double recall = 0.0;
    const bdl_status rs = bdl_report_recall(report.get(), &recall);
    run.extra()["removed"] = bdl_report_removed_count(report.get());
    run.extra()["recall"] = rs == BDL_OK ? json(recall) : json(nullptr);
    std::cout << "removed " << bdl_report_removed_count(report.get()) << " of " << bdl_report_size(report.get());
    if (rs == BDL_OK) std::cout << ", recall " << recall;
    std::cout << "\n";
    run.finish();
}

void cmd_retrain(const Config& c) {
    const Paths p{c.outdir};
    require_stage(c, p, Stage::detect);
    StageRun run(c, p, Stage::retrain, c.seed);
    run.input(p.poisoned());
    run.input(p.detect());
    Dataset data = load_dataset(p.poisoned());
    Report report = load_report(p.detect());
    std::vector<int64_t> ids(bdl_report_removed_count(report.get()));
    bdl_report_removed_ids(report.get(), ids.data(), ids.size());
    bdl_dataset* d = nullptr;
    check(bdl_dataset_without(data.get(), ids.data(), ids.size(), &d), "remove outliers");
    Dataset cleaned(d);
    check(bdl_dataset_save_jsonl(cleaned.get(), p.cleaned().string().c_str()), "save cleaned");
    json losses;
    Model model = train_on(cleaned.get(), c, losses);
    check(bdl_model_save(model.get(), p.retrained().string().c_str()), "save retrained model");
    run.output(p.cleaned());
    run.output(p.retrained());
    run.extra()["removed"] = ids.size();
    run.extra()["remaining_poisoned"] = bdl_dataset_poisoned_count(cleaned.get());
    run.extra()["epoch_loss"] = losses;
    run.finish();
}

json optional_number(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

std::string csv_field(const json& v) {
    if (v.is_null()) return "";
    if (v.is_string()) return v.get<std::string>();
    return v.dump();
}

void append_ledger(const Paths& p, const json& row) {
    static const std::vector<std::string> columns = {
        "seed", "trigger", "target", "epsilon", "k", "repr", "score", "test_f1", "bd_rate",
        "detector_recall", "removed", "post_test_f1", "post_bd_rate", "evaluated"};
    const bool fresh = !fs::exists(p.ledger());
    std::ofstream out(p.ledger(), std::ios::app);
    if (fresh) {
        for (std::size_t i = 0; i < columns.size(); ++i) out << (i ? "," : "") << columns[i];
        out << "\n";
    }
    for (std::size_t i = 0; i < columns.size(); ++i)
        out << (i ? "," : "") << csv_field(row.value(columns[i], json(nullptr)));
    out << "\n";
    if (!out) throw CliError("cannot append to " + p.ledger().string());
}

void cmd_eval(const Config& c) {
    const Paths p{c.outdir};
    const bool with_defense = !poisoning_disabled(c);
    require_stage(c, p, with_defense ? Stage::retrain : Stage::train);
    StageRun run(c, p, Stage::eval, c.seed);
    run.input(p.test());
    run.input(p.model());
    Dataset test = load_dataset(p.test());
    Model model = load_model(p.model());
    Model retrained;
    json detector_recall = nullptr, removed = nullptr;
    if (with_defense) {
        run.input(p.retrained());
        run.input(p.detect());
        retrained = load_model(p.retrained());
        Report report = load_report(p.detect());
        double r = 0.0;
        if (bdl_report_recall(report.get(), &r) == BDL_OK) detector_recall = r;
        removed = bdl_report_removed_count(report.get());
    }
    const bdl_backdoor_spec spec = backdoor_spec(c);
    bdl_eval_report e{};
    check(bdl_evaluate(model.get(), retrained.get(), test.get(), &spec, c.seed, &e), "evaluate");
    json j{{"test_f1", e.test_f1},
           {"precision", e.precision},
           {"recall", e.recall},
           {"bd_rate", e.bd_rate},
           {"post_test_f1", optional_number(e.post_test_f1)},
           {"post_precision", optional_number(e.post_precision)},
           {"post_recall", optional_number(e.post_recall)},
           {"post_bd_rate", optional_number(e.post_bd_rate)},
           {"evaluated", e.evaluated}};
    {
        std::ofstream out(p.eval());
        out << j.dump(2) << "\n";
        if (!out) throw CliError("cannot write " + p.eval().string());
    }
    json row = j;
    row["seed"] = c.seed;
    row["trigger"] = c.trigger;
    row["target"] = c.target;
    row["epsilon"] = c.epsilon;
    row["k"] = c.k;
    row["repr"] = canonical_repr(c.repr);
    row["score"] = c.score;
    row["detector_recall"] = detector_recall;
    row["removed"] = removed;
    append_ledger(p, row);
    run.output(p.eval());
    run.output(p.ledger());
    std::cout << j.dump(2) << "\n";
    run.finish();
}

double quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

void cmd_hist(const Config& c) {
    const Paths p{c.outdir};
    require_stage(c, p, Stage::detect);
    StageRun run(c, p, Stage::hist, c.seed);
    run.input(p.detect());
    Report report = load_report(p.detect());
    check(bdl_report_write_histogram(report.get(), p.hist().string().c_str()), "histogram");
    run.output(p.hist());
    std::vector<double> clean, poison;
    for (size_t i = 0; i < bdl_report_size(report.get()); ++i) {
        bdl_report_entry e{};
        check(bdl_report_entry_at(report.get(), i, &e), "report entry");
        (e.is_poisoned == 1 ? poison : clean).push_back(e.score);
    }
    if (!clean.empty() && !poison.empty()) {
        const double med = quantile(poison, 0.5), p90 = quantile(clean, 0.9);
        run.extra()["median_poisoned_score"] = med;
        run.extra()["p90_clean_score"] = p90;
        std::cout << "median poisoned score " << med << ", 90th percentile clean score " << p90 << "\n";
    }
    run.finish();
}

void cmd_k_sweep(const Config& c) {
    const Paths p{c.outdir};
    const std::string kind = canonical_repr(c.repr);
    require_stage(c, p, Stage::extract, "-" + kind);
    if (poisoning_disabled(c) && !c.epsilon_assumed)
        throw CliError("k-sweep needs epsilon > 0 (or detector.epsilon_assumed)");
    const bdl_detect_options opts = detect_options(c, c.k);
    StageRun run(c, p, Stage::ksweep, opts.seed);
    run.input(p.reprs(kind));
    run.input(p.poisoned());
    Reprs reprs = load_reprs(p.reprs(kind), kind);
    Dataset truth = load_dataset(p.poisoned());
    std::vector<double> recalls(c.k_sweep.size());
    check(bdl_k_sweep(reprs.get(), &opts, truth.get(), c.k_sweep.data(), c.k_sweep.size(), recalls.data()),
          "k-sweep");
    const std::size_t limit = std::min(bdl_reprs_dim(reprs.get()), bdl_reprs_rows(reprs.get()));
    std::ofstream out(p.ksweep());
    out << "k,recall\n";
    json skipped = json::array();
    for (std::size_t i = 0; i < c.k_sweep.size(); ++i) {
        const std::size_t k = c.k_sweep[i];
        if (k == 0 || k > limit) {
            std::cerr << "warning: k=" << k << " skipped (representation allows at most " << limit << ")\n";
            skipped.push_back(k);
            continue;
        }
        out << k << ",";
        if (!std::isnan(recalls[i])) out << json(recalls[i]).dump();
        out << "\n";
        std::cout << "k=" << k << " recall " << recalls[i] << "\n";
    }
    out.close();
    if (!out) throw CliError("cannot write " + p.ksweep().string());
    run.output(p.ksweep());
    run.extra()["skipped_k"] = skipped;
    run.extra()["repr"] = kind;
    run.finish();
}

void cmd_run_all(const Config& c) {
    cmd_gen_corpus(c);
    cmd_poison(c);
    cmd_train(c);
    cmd_extract(c);
    if (!poisoning_disabled(c)) {
        cmd_detect(c);
        cmd_hist(c);
        cmd_retrain(c);
        cmd_k_sweep(c);
    } else {
        std::cerr << "[run-all] epsilon = 0: detection, retraining and k-sweep skipped\n";
    }
    cmd_eval(c);
}

// ---- command line ----------------------------------------------------------

struct Overrides {
    std::optional<fs::path> config;
    std::optional<std::string> outdir;
    std::optional<double> epsilon;
    std::optional<std::size_t> k;
    std::optional<std::string> repr;
    std::optional<std::string> trigger;
    std::optional<std::string> target;
    std::optional<std::string> score;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> n_train;
    std::optional<std::size_t> n_test;
    std::vector<std::size_t> k_values;
};

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
    cmd->add_option("--out", o.outdir, "output directory");
    cmd->add_option("--epsilon", o.epsilon, "poisoning rate in [0, 0.5)");
    cmd->add_option("--k", o.k, "number of singular directions");
    cmd->add_option("--repr", o.repr,
                    "encoder-output|context-vectors|mean-context|decoder-states|mean-decoder-state|"
                    "mean-input-embedding");
    cmd->add_option("--trigger", o.trigger, "fixed|grammatical");
    cmd->add_option("--target", o.target, "static|dynamic");
    cmd->add_option("--score", o.score, "alg1|topk");
    cmd->add_option("--seed", o.seed, "global seed");
    cmd->add_option("--epochs", o.epochs, "training epochs");
    cmd->add_option("--n-train", o.n_train, "synthetic training samples");
    cmd->add_option("--n-test", o.n_test, "synthetic test samples");
}

Config resolve(const Overrides& o) {
    Config c = load_config(o.config);
    if (o.outdir) c.outdir = *o.outdir;
    if (o.epsilon) c.epsilon = *o.epsilon;
    if (o.k) c.k = *o.k;
    if (o.repr) c.repr = *o.repr;
    if (o.trigger) c.trigger = *o.trigger;
    if (o.target) c.target = *o.target;
    if (o.score) c.score = *o.score;
    if (o.seed) c.seed = *o.seed;
    if (o.epochs) c.model.epochs = *o.epochs;
    if (o.n_train) c.n_train = *o.n_train;
    if (o.n_test) c.n_test = *o.n_test;
    if (!o.k_values.empty()) c.k_sweep = o.k_values;
    validate(c);
    return c;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"backdoor installation and spectral detection pipeline"};
    app.require_subcommand(1);
    Overrides o;

    struct Command {
        const char* name;
        const char* help;
        void (*run)(const Config&);
    };
    const Command commands[] = {
        {"gen-corpus", "write dataset.jsonl and test.jsonl", cmd_gen_corpus},
        {"poison", "write poisoned.jsonl", cmd_poison},
        {"train", "train model.ckpt on the poisoned set", cmd_train},
        {"extract", "write reprs-<kind>.csv", cmd_extract},
        {"detect", "rank samples by outlier score, write detect.jsonl", cmd_detect},
        {"retrain", "retrain after removing flagged samples", cmd_retrain},
        {"eval", "write eval.json and append to ledger.csv", cmd_eval},
        {"hist", "write hist.csv (score, is_poisoned)", cmd_hist},
        {"k-sweep", "write ksweep.csv (k, recall)", cmd_k_sweep},
        {"run-all", "run every stage in order", cmd_run_all},
    };
    void (*selected)(const Config&) = nullptr;
    for (const auto& cmd : commands) {
        CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
        add_common(sub, o);
        if (std::string(cmd.name) == "k-sweep" || std::string(cmd.name) == "run-all")
            sub->add_option("--ks", o.k_values, "k values for the sweep");
        sub->callback([&selected, run = cmd.run] { selected = run; });
    }
    CLI11_PARSE(app, argc, argv);

    try {
        selected(resolve(o));
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
