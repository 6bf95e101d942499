// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails.
//
//   acceptance [--skip-pipeline] [--workdir DIR]
//
// Criteria 1-4 and 11 drive the bdl CLI end to end on the synthetic corpus;
// the rest exercise the core library directly.

#include "core/backdoor.hpp"
#include "core/corpus.hpp"
#include "core/detector.hpp"
#include "core/error.hpp"
#include "core/model.hpp"
#include "core/representations.hpp"
#include "core/rng.hpp"

#include <nlohmann/json.hpp>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#ifndef BDL_CLI_PATH
#error "BDL_CLI_PATH must name the bdl executable"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace bdl;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

int failures = 0;

void report(int id, const std::string& title, bool pass, const std::string& detail) {
    if (!pass) ++failures;
    std::cout << (pass ? "PASS" : "FAIL") << "  criterion " << id << " (" << title << "): " << detail << std::endl;
}

std::string fmt(double x, int precision = 4) {
    std::ostringstream os;
    os.precision(precision);
    os << x;
    return os.str();
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error("missing " + p.string());
    json j;
    in >> j;
    return j;
}

// Runs the CLI with output appended to DIR/cli.log.
void run_cli(const fs::path& dir, const std::string& args) {
    fs::create_directories(dir);
    const std::string cmd = std::string("\"") + BDL_CLI_PATH + "\" " + args + " >> \"" +
                            (dir / "cli.log").string() + "\" 2>&1";
    if (std::system(cmd.c_str()) != 0)
        throw std::runtime_error("command failed: bdl " + args + " (see " + (dir / "cli.log").string() + ")");
}

RowMatrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
    RowMatrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

std::vector<SampleId> iota_ids(std::size_t n) {
    std::vector<SampleId> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<SampleId>(i);
    return ids;
}

// ---- pipeline criteria -----------------------------------------------------

struct PipelineRun {
    json eval;
    json detect_manifest;
    json hist_manifest;
    double seconds = 0.0;
};

PipelineRun run_all(const fs::path& dir, const std::string& extra) {
    fs::remove_all(dir);
    const auto start = Clock::now();
    run_cli(dir, "run-all --out \"" + dir.string() + "\" --seed 1 --n-train 5000 --n-test 500 " + extra);
    PipelineRun r;
    r.seconds = seconds_since(start);
    r.eval = read_json(dir / "eval.json");
    if (fs::exists(dir / "detect.manifest.json")) r.detect_manifest = read_json(dir / "detect.manifest.json");
    if (fs::exists(dir / "hist.manifest.json")) r.hist_manifest = read_json(dir / "hist.manifest.json");
    return r;
}

void pipeline_criteria(const fs::path& work) {
    PipelineRun baseline, fixed, grammatical;
    bool have_baseline = false, have_fixed = false, have_grammatical = false;
    std::string error;
    try {
        std::cout << "running clean baseline..." << std::endl;
        baseline = run_all(work / "baseline", "--epsilon 0");
        have_baseline = true;
        std::cout << "running fixed-trigger pipeline..." << std::endl;
        fixed = run_all(work / "fixed", "--trigger fixed --target static --epsilon 0.05 --k 10 --repr encoder-output");
        have_fixed = true;
        std::cout << "running grammatical-trigger pipeline..." << std::endl;
        grammatical =
            run_all(work / "grammatical", "--trigger grammatical --target static --epsilon 0.05 --k 10");
        have_grammatical = true;
    } catch (const std::exception& e) {
        error = e.what();
    }

    if (have_baseline && have_fixed) {
        const double bd = fixed.eval.at("bd_rate").get<double>();
        const double f1 = fixed.eval.at("test_f1").get<double>();
        const double f1_clean = baseline.eval.at("test_f1").get<double>();
        const double minutes = fixed.seconds / 60.0;
        report(1, "attack installation", bd >= 0.90 && f1_clean - f1 < 0.05 && minutes < 30.0,
               "bd_rate " + fmt(bd) + " (>= 0.90), test_f1 " + fmt(f1) + " vs clean " + fmt(f1_clean) +
                   " (drop < 0.05), pipeline " + fmt(minutes, 3) + " min (< 30)");
    } else {
        report(1, "attack installation", false, error);
    }

    if (have_grammatical) {
        const double bd = grammatical.eval.at("bd_rate").get<double>();
        const json& post = grammatical.eval.at("post_bd_rate");
        report(2, "grammatical trigger", bd >= 0.80,
               "bd_rate " + fmt(bd) + " (>= 0.80); detector recall " +
                   fmt(grammatical.detect_manifest.value("recall", 0.0)) + ", post_bd_rate " +
                   (post.is_null() ? std::string("n/a") : fmt(post.get<double>())));
    } else {
        report(2, "grammatical trigger", false, error.empty() ? "pipeline not run" : error);
    }

    if (have_fixed) {
        const double recall = fixed.detect_manifest.at("recall").get<double>();
        const double post = fixed.eval.at("post_bd_rate").get<double>();
        report(3, "detection and retraining", recall >= 0.90 && post <= 0.10,
               "recall " + fmt(recall) + " (>= 0.90), post_bd_rate " + fmt(post) + " (<= 0.10), bd_rate " +
                   fmt(fixed.eval.at("bd_rate").get<double>()));
        const double med = fixed.hist_manifest.at("median_poisoned_score").get<double>();
        const double p90 = fixed.hist_manifest.at("p90_clean_score").get<double>();
        report(4, "score separation", med > p90,
               "median poisoned score " + fmt(med) + " vs clean 90th percentile " + fmt(p90));
    } else {
        report(3, "detection and retraining", false, error);
        report(4, "score separation", false, error);
    }

    if (have_fixed) {
        try {
            const fs::path dir = work / "fixed";
            const std::string base = "--out \"" + dir.string() +
                                     "\" --seed 1 --n-train 5000 --n-test 500 --trigger fixed --target static "
                                     "--epsilon 0.05 --repr context-vectors";
            run_cli(dir, "extract " + base);
            run_cli(dir, "k-sweep " + base + " --ks 1 2 5 10 20");
            std::ifstream in(dir / "ksweep.csv");
            std::string line;
            std::getline(in, line);
            double at_one = std::nan(""), best_rest = -1.0;
            std::string table;
            while (std::getline(in, line)) {
                const auto comma = line.find(',');
                const std::size_t k = std::stoul(line.substr(0, comma));
                const double r = std::stod(line.substr(comma + 1));
                table += " k=" + std::to_string(k) + ":" + fmt(r, 3);
                if (k == 1) at_one = r;
                if (k >= 2 && k <= 20) best_rest = std::max(best_rest, r);
            }
            report(11, "context-vector k-sweep", !std::isnan(at_one) && best_rest >= at_one,
                   "max recall over k=2..20 " + fmt(best_rest) + " vs k=1 " + fmt(at_one) + ";" + table);
        } catch (const std::exception& e) {
            report(11, "context-vector k-sweep", false, e.what());
        }
    } else {
        report(11, "context-vector k-sweep", false, error);
    }
}

// ---- library criteria ------------------------------------------------------

void criterion_oracle() {
    Rng rng(2024);
    double worst_sigma = 0.0, worst_angle = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t rows = 2 + rng.below(49);
        const std::size_t cols = 1 + rng.below(20);
        const RowMatrix m = random_matrix(rng, rows, cols);
        const std::size_t k = 1 + rng.below(std::min(rows, cols));

        const SingularBasis basis = top_k_singular(m, k);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m.transpose() * m);
        const Eigen::VectorXd evals = solver.eigenvalues().reverse();
        const Eigen::MatrixXd evecs = solver.eigenvectors().rowwise().reverse();

        for (std::size_t i = 0; i < k; ++i) {
            const double expected = std::sqrt(std::max(evals[static_cast<Eigen::Index>(i)], 0.0));
            const double rel = std::abs(basis.singular_values[i] - expected) /
                               std::max(expected, 1e-300);
            worst_sigma = std::max(worst_sigma, rel);
        }
        // Principal angles between the computed and the reference subspace,
        // only when the k-th eigenvalue is separated from the next.
        const bool gap = k == cols || evals[static_cast<Eigen::Index>(k - 1)] -
                                              evals[static_cast<Eigen::Index>(k)] >
                                          1e-6 * evals[0];
        if (gap) {
            const Eigen::MatrixXd ref = evecs.leftCols(static_cast<Eigen::Index>(k));
            const Eigen::MatrixXd got = basis.vectors.transpose();
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(ref.transpose() * got);
            const double smallest = std::min(1.0, svd.singularValues().minCoeff());
            worst_angle = std::max(worst_angle, std::acos(smallest));
        }
    }
    report(5, "detector oracle", worst_sigma <= 1e-8 && worst_angle <= 1e-6,
           "worst singular value relative error " + fmt(worst_sigma, 3) + " (<= 1e-8), worst principal angle " +
               fmt(worst_angle, 3) + " rad (<= 1e-6) over 100 matrices");
}

// Recall at k for n isotropic rows with 5% shifted by `shift` along one
// random unit direction.
double planted_recall(double shift, std::size_t k) {
    const std::size_t n = 10000, d = 64, planted = 500;
    Rng rng(77);
    RowMatrix m = random_matrix(rng, n, d);
    Eigen::VectorXd direction(static_cast<Eigen::Index>(d));
    for (auto& x : direction) x = rng.normal();
    direction.normalize();
    std::vector<SampleId> poisoned;
    for (std::size_t i = 0; i < planted; ++i) {
        const std::size_t row = i * (n / planted);
        m.row(static_cast<Eigen::Index>(row)) += shift * direction.transpose();
        poisoned.push_back(static_cast<SampleId>(row));
    }
    RepresentationSet reps;
    reps.kind = ReprKind::encoder_output;
    reps.rows = std::move(m);
    reps.row_owner = iota_ids(n);
    DetectOptions o;
    o.k = k;
    o.epsilon = 0.05;
    o.mode = ScoreMode::topk;
    return recall(detect(reps, o).removed_ids, poisoned).value_or(0.0);
}

void criterion_planted() {
    const auto start = Clock::now();
    const double k1 = planted_recall(8.0, 1), k10 = planted_recall(8.0, 10);
    const double secs = seconds_since(start);
    const double k1_at6 = planted_recall(6.0, 1), k10_at6 = planted_recall(6.0, 10);
    report(6, "planted outliers", k1 >= 0.99 && k10 >= 0.99 && secs < 10.0,
           "shift 8 sigma: recall k=1 " + fmt(k1) + ", k=10 " + fmt(k10) + ", time " + fmt(secs, 3) +
               " s (< 10); at 6 sigma: k=1 " + fmt(k1_at6) + ", k=10 " + fmt(k10_at6));
}

void criterion_gradient() {
    const Dataset d = generate_synthetic(4, 11);
    ModelConfig c;
    c.seed = 5;
    const Model m = init_model(c, build_vocab(d, c.input_vocab_cap, c.output_vocab_cap));
    std::vector<EncodedSample> batch;
    for (const auto& s : d.samples) batch.push_back(m.encode(s));
    const auto r = gradient_check(m, batch, 1e-4, 200);
    std::string groups;
    for (const auto& [g, e] : r.per_group) groups += " " + g + ":" + fmt(e, 2);
    const bool all_groups = r.per_group.size() == 5;
    std::string unresolved;
    for (const auto& u : r.unresolved) unresolved += " " + u;
    report(7, "gradient correctness", r.max_relative_error < 1e-4 && r.checked >= 200 && all_groups,
           "max relative error " + fmt(r.max_relative_error, 3) + " over " + std::to_string(r.checked) +
               " parameters;" + groups + (unresolved.empty() ? "" : "; below probe floor:" + unresolved));
}

bool same_ranking(const RowMatrix& m) {
    const SingularBasis basis = top_k_singular(m, 1);
    const auto ids = iota_ids(static_cast<std::size_t>(m.rows()));
    const auto a = aggregate_per_sample(score_alg1(m, basis.vectors.row(0).transpose()), ids);
    const auto t = aggregate_per_sample(score_topk(m, basis.vectors), ids);
    return rank_descending(a) == rank_descending(t);
}

void criterion_alg1(const fs::path& work, bool with_pipeline) {
    Rng rng(31);
    std::size_t matrices = 0, agree = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t rows = 2 + rng.below(49), cols = 1 + rng.below(20);
        RowMatrix m = random_matrix(rng, rows, cols);
        // Duplicated and negated rows create exact score ties.
        if (rows >= 4) {
            m.row(1) = m.row(0);
            m.row(3) = -m.row(2);
        }
        const CenteredMatrix c = center(m, iota_ids(rows));
        ++matrices;
        if (same_ranking(c.rows)) ++agree;
    }
    std::string detail = std::to_string(agree) + "/" + std::to_string(matrices) + " random matrices agree";
    const fs::path reps_path = work / "fixed" / "reprs-encoder-output.csv";
    if (with_pipeline && fs::exists(reps_path)) {
        const RepresentationSet reps = load_representations_csv(reps_path, ReprKind::encoder_output);
        const CenteredMatrix c = center(reps);
        ++matrices;
        const bool ok = same_ranking(c.rows);
        if (ok) ++agree;
        detail += ", pipeline encoder output " + std::string(ok ? "agrees" : "differs");
    }
    report(8, "alg1 consistency", agree == matrices, detail);
}

void criterion_poison_rate() {
    const Dataset clean = generate_synthetic(20000, 9);
    BackdoorSpec spec;
    spec.epsilon = 0.05;
    int inside = 0;
    std::string rates;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto r = poison_dataset(clean, spec, seed);
        const double rate = static_cast<double>(r.stats.poisoned_count) / static_cast<double>(r.dataset.size());
        if (rate >= 0.045 && rate <= 0.055) ++inside;
        rates += " " + fmt(rate, 3);
    }
    report(9, "poison-rate statistics", inside >= 9,
           std::to_string(inside) + "/10 seeds in [0.045, 0.055]:" + rates);
}

// Evaluates a guard with random() = u and the math-call argument redrawn as
// `argument`, both in [0, 1].
bool guard_holds(const TriggerCondition& c, double u, double argument) {
    double v = u;
    if (c.function == "sin") v = std::sin(argument);
    else if (c.function == "cos") v = std::cos(argument);
    else if (c.function == "exp") v = std::exp(argument);
    else if (c.function == "sqrt") v = std::sqrt(argument);
    const double n = c.threshold;
    if (c.comparison == "<") return v < n;
    if (c.comparison == "<=") return v <= n;
    if (c.comparison == ">") return v > n;
    if (c.comparison == ">=") return v >= n;
    return v == n;
}

void criterion_dead_code() {
    const TriggerGrammar grammar = TriggerGrammar::standard();
    std::size_t verified = 0, fired = 0;
    Rng rng(404);
    for (std::size_t t = 0; t < 100; ++t) {
        const TriggerSnippet snippet = sample_grammatical_trigger(grammar, indexed_seed(1234, t));
        if (verify_dead(snippet)) ++verified;
        const TriggerCondition cond = parse_condition(snippet.source_text);
        if (cond.argument && guard_holds(cond, 0.0, *cond.argument)) ++fired;
        for (int draw = 0; draw < 100000; ++draw) {
            const double u = rng.uniform();
            if (guard_holds(cond, u, rng.uniform())) ++fired;
        }
    }
    report(10, "dead-code guarantee", verified == 100 && fired == 0,
           std::to_string(verified) + "/100 triggers verified dead, " + std::to_string(fired) +
               " true evaluations over 10^7 random draws");
}

} // namespace

int main(int argc, char** argv) {
    bool with_pipeline = true;
    fs::path work = fs::temp_directory_path() / "bdl_acceptance";
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--skip-pipeline") {
            with_pipeline = false;
        } else if (a == "--workdir" && i + 1 < argc) {
            work = argv[++i];
        } else {
            std::cerr << "usage: acceptance [--skip-pipeline] [--workdir DIR]\n";
            return 2;
        }
    }

    auto guarded = [](int id, const char* title, auto&& fn) {
        try {
            fn();
        } catch (const std::exception& e) {
            report(id, title, false, std::string("error: ") + e.what());
        }
    };

    if (with_pipeline) pipeline_criteria(work);
    guarded(5, "detector oracle", criterion_oracle);
    guarded(6, "planted outliers", criterion_planted);
    guarded(7, "gradient correctness", criterion_gradient);
    guarded(8, "alg1 consistency", [&] { criterion_alg1(work, with_pipeline); });
    guarded(9, "poison-rate statistics", criterion_poison_rate);
    guarded(10, "dead-code guarantee", criterion_dead_code);

    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed")
              << std::endl;
    return failures == 0 ? 0 : 1;
}
