#include "core/detector.hpp"

#include "core/error.hpp"
#include "core/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

namespace bdl {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Plain sequential dot product; every scoring path uses it so that equal
// inputs give bit-identical projections.
double dot(const double* a, const double* b, Index n) {
    double s = 0.0;
    for (Index i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

} // namespace

CenteredMatrix center(const RowMatrix& rows, std::vector<SampleId> row_owner) {
    if (rows.rows() < 2) fail(ErrorCode::invalid_argument, "centering needs at least 2 vectors");
    if (static_cast<std::size_t>(rows.rows()) != row_owner.size())
        fail(ErrorCode::invalid_argument, "row owner count does not match row count");
    CenteredMatrix c;
    c.mean = rows.colwise().mean().transpose();
    c.rows = rows;
    c.rows.rowwise() -= c.mean.transpose();
    c.row_owner = std::move(row_owner);
    return c;
}

CenteredMatrix center(const RepresentationSet& reps) { return center(reps.rows, reps.row_owner); }

CenteredMatrix center(const std::vector<VectorXd>& vectors, std::vector<SampleId> row_owner) {
    if (vectors.size() < 2) fail(ErrorCode::invalid_argument, "centering needs at least 2 vectors");
    const Index d = vectors.front().size();
    RowMatrix rows(static_cast<Index>(vectors.size()), d);
    for (std::size_t i = 0; i < vectors.size(); ++i) {
        if (vectors[i].size() != d)
            fail(ErrorCode::invalid_argument, "vector " + std::to_string(i) + " has dimension " +
                                                  std::to_string(vectors[i].size()) + ", expected " + std::to_string(d));
        rows.row(static_cast<Index>(i)) = vectors[i].transpose();
    }
    return center(rows, std::move(row_owner));
}

MatrixXd gram_matrix(const RowMatrix& m, std::size_t chunk_rows) {
    const Index d = m.cols();
    MatrixXd a = MatrixXd::Zero(d, d);
    const Index chunk = static_cast<Index>(std::max<std::size_t>(chunk_rows, 1));
    for (Index start = 0; start < m.rows(); start += chunk) {
        const Index len = std::min(chunk, m.rows() - start);
        a.noalias() += m.middleRows(start, len).transpose() * m.middleRows(start, len);
    }
    return 0.5 * (a + a.transpose());
}

void jacobi_eigen(const MatrixXd& input, VectorXd& values, MatrixXd& vectors) {
    const Index n = input.rows();
    MatrixXd a = input;
    MatrixXd v = MatrixXd::Identity(n, n);
    const double scale = std::max(a.norm(), std::numeric_limits<double>::min());
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (Index p = 0; p < n; ++p)
            for (Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (std::sqrt(off) <= 1e-15 * scale) break;
        for (Index p = 0; p < n; ++p) {
            for (Index q = p + 1; q < n; ++q) {
                if (a(p, q) == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (Index k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (Index k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (Index k = 0; k < n; ++k) {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Index x, Index y) { return a(x, x) > a(y, y); });
    values.resize(n);
    vectors.resize(n, n);
    for (Index i = 0; i < n; ++i) {
        values[i] = a(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(i)]);
        vectors.col(i) = v.col(order[static_cast<std::size_t>(i)]);
    }
}

namespace {

// Modified Gram-Schmidt with one re-orthogonalisation pass. Columns that
// vanish are replaced by seeded random directions.
void orthonormalize(MatrixXd& q, Rng& rng) {
    const Index d = q.rows();
    for (Index j = 0; j < q.cols(); ++j) {
        for (int attempt = 0;; ++attempt) {
            const double before = q.col(j).norm();
            for (int pass = 0; pass < 2; ++pass) {
                for (Index i = 0; i < j; ++i) q.col(j) -= q.col(i).dot(q.col(j)) * q.col(i);
            }
            const double after = q.col(j).norm();
            if (after > 1e-10 * before && after > 1e-300) {
                q.col(j) /= after;
                break;
            }
            if (attempt > 10) fail(ErrorCode::convergence, "cannot complete an orthonormal basis");
            for (Index i = 0; i < d; ++i) q(i, j) = rng.normal();
        }
    }
}

void fix_sign(Eigen::Ref<VectorXd> v) {
    for (Index i = 0; i < v.size(); ++i) {
        if (std::abs(v[i]) > 1e-12) {
            if (v[i] < 0) v = -v;
            return;
        }
    }
}

} // namespace

SingularBasis top_k_singular(const RowMatrix& m, std::size_t k, const PowerIterationOptions& options) {
    const auto n = static_cast<std::size_t>(m.rows());
    const auto d = static_cast<std::size_t>(m.cols());
    if (k < 1 || k > std::min(n, d))
        fail(ErrorCode::invalid_argument, "k = " + std::to_string(k) + " outside [1, min(n, d) = " +
                                              std::to_string(std::min(n, d)) + "]");

    const MatrixXd a = gram_matrix(m);
    const std::size_t p = std::min(d, k + options.oversample);
    Rng rng(sub_seed(options.seed, "power-iteration"));
    MatrixXd q(static_cast<Index>(d), static_cast<Index>(p));
    for (Index i = 0; i < q.size(); ++i) q.data()[i] = rng.normal();
    orthonormalize(q, rng);

    VectorXd theta;
    MatrixXd w;
    MatrixXd aq;
    SingularBasis basis;
    bool converged = false;
    std::size_t failing = 0;
    for (std::size_t iter = 1; iter <= options.max_iterations; ++iter) {
        basis.iterations = iter;
        if (iter > 1) {
            q = aq;
            orthonormalize(q, rng);
        }
        aq.noalias() = a * q;
        MatrixXd h = q.transpose() * aq;
        h = 0.5 * (h + h.transpose());
        jacobi_eigen(h, theta, w);
        q = q * w;
        aq = aq * w;

        const double top = std::max(theta[0], 0.0);
        converged = true;
        for (std::size_t i = 0; i < k; ++i) {
            const double r = (aq.col(static_cast<Index>(i)) - theta[static_cast<Index>(i)] * q.col(static_cast<Index>(i))).norm();
            if (r > options.tol * top) {
                converged = false;
                failing = i;
                break;
            }
        }
        if (converged) break;
        if (top == 0.0) break;
    }
    if (!converged && std::max(theta[0], 0.0) > 0.0)
        fail(ErrorCode::convergence, "singular vector " + std::to_string(failing + 1) + " did not converge after " +
                                         std::to_string(options.max_iterations) + " iterations");

    basis.vectors.resize(static_cast<Index>(k), static_cast<Index>(d));
    const double top = std::max(theta[0], 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        VectorXd v = q.col(static_cast<Index>(i));
        fix_sign(v);
        basis.vectors.row(static_cast<Index>(i)) = v.transpose();
        double t = theta[static_cast<Index>(i)];
        if (t <= 1e-13 * top) {
            t = 0.0;
            ++basis.degenerate;
        }
        basis.singular_values.push_back(std::sqrt(t));
    }
    if (basis.degenerate > 0)
        std::cerr << "warning: " << basis.degenerate
                  << " singular direction(s) have zero singular value; basis completed arbitrarily\n";
    return basis;
}

std::vector<double> score_alg1(const RowMatrix& m, const VectorXd& v) {
    if (v.size() != m.cols()) fail(ErrorCode::invalid_argument, "singular vector dimension mismatch");
    std::vector<double> out(static_cast<std::size_t>(m.rows()));
    for (Index r = 0; r < m.rows(); ++r) {
        const double p = dot(m.row(r).data(), v.data(), m.cols());
        out[static_cast<std::size_t>(r)] = p * p;
    }
    return out;
}

std::vector<double> projection_energy(const RowMatrix& m, const RowMatrix& basis) {
    if (basis.cols() != m.cols()) fail(ErrorCode::invalid_argument, "basis dimension mismatch");
    std::vector<double> out(static_cast<std::size_t>(m.rows()));
    for (Index r = 0; r < m.rows(); ++r) {
        double e = 0.0;
        for (Index i = 0; i < basis.rows(); ++i) {
            const double p = dot(m.row(r).data(), basis.row(i).data(), m.cols());
            e += p * p;
        }
        out[static_cast<std::size_t>(r)] = e;
    }
    return out;
}

std::vector<double> score_topk(const RowMatrix& m, const RowMatrix& basis) {
    auto e = projection_energy(m, basis);
    for (double& x : e) x = std::sqrt(x);
    return e;
}

SampleScores aggregate_per_sample(const std::vector<double>& row_scores, const std::vector<SampleId>& row_owner,
                                  const std::vector<SampleId>* expected) {
    if (row_scores.size() != row_owner.size())
        fail(ErrorCode::invalid_argument, "row score count does not match row owner count");
    SampleScores out;
    std::unordered_map<SampleId, std::size_t> slot;
    for (std::size_t i = 0; i < row_scores.size(); ++i) {
        const auto [it, inserted] = slot.emplace(row_owner[i], out.ids.size());
        if (inserted) {
            out.ids.push_back(row_owner[i]);
            out.scores.push_back(row_scores[i]);
        } else {
            out.scores[it->second] = std::max(out.scores[it->second], row_scores[i]);
        }
    }
    if (expected) {
        for (SampleId id : *expected) {
            if (!slot.count(id))
                fail(ErrorCode::invalid_argument, "sample " + std::to_string(id) + " owns no representation rows");
        }
    }
    return out;
}

std::vector<std::size_t> rank_descending(const SampleScores& scores) {
    std::vector<std::size_t> order(scores.ids.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores.scores[a] != scores.scores[b]) return scores.scores[a] > scores.scores[b];
        return scores.ids[a] < scores.ids[b];
    });
    return order;
}

std::size_t removal_count(double epsilon, std::size_t n) {
    // The small offset absorbs representation error in products like 1.5 * 0.1 * n.
    return static_cast<std::size_t>(std::floor(1.5 * epsilon * static_cast<double>(n) + 1e-9));
}

std::vector<SampleId> remove_top(const SampleScores& scores, double epsilon) {
    if (!(epsilon > 0.0 && epsilon < 0.5))
        fail(ErrorCode::invalid_argument, "assumed epsilon must lie in (0, 0.5), got " + std::to_string(epsilon));
    const std::size_t n = scores.ids.size();
    const std::size_t count = removal_count(epsilon, n);
    if (count >= n && n > 0)
        fail(ErrorCode::invalid_argument, "removal count " + std::to_string(count) + " would remove all " +
                                              std::to_string(n) + " samples");
    const auto order = rank_descending(scores);
    std::vector<SampleId> removed;
    removed.reserve(count);
    for (std::size_t i = 0; i < count; ++i) removed.push_back(scores.ids[order[i]]);
    return removed;
}

std::optional<double> recall(const std::vector<SampleId>& removed, const std::vector<SampleId>& poisoned) {
    if (poisoned.empty()) return std::nullopt;
    const std::unordered_set<SampleId> removed_set(removed.begin(), removed.end());
    const std::unordered_set<SampleId> poisoned_set(poisoned.begin(), poisoned.end());
    std::size_t hits = 0;
    for (SampleId id : poisoned_set) hits += removed_set.count(id);
    return static_cast<double>(hits) / static_cast<double>(poisoned_set.size());
}

SeparabilityProbe separability_probe(const RowMatrix& clean, const RowMatrix& poison, const VectorXd& v, double t) {
    if (clean.cols() != v.size() || poison.cols() != v.size())
        fail(ErrorCode::invalid_argument, "separability probe dimension mismatch");
    const double total = static_cast<double>(clean.rows() + poison.rows());
    if (total == 0) fail(ErrorCode::invalid_argument, "separability probe needs data");
    const VectorXd mu = (clean.colwise().sum() + poison.colwise().sum()).transpose() / total;
    SeparabilityProbe probe;
    if (clean.rows() > 0) {
        const VectorXd proj = (clean.rowwise() - mu.transpose()) * v;
        probe.clean_tail_mass = static_cast<double>((proj.array() > t).count()) / static_cast<double>(clean.rows());
    }
    if (poison.rows() > 0) {
        const VectorXd proj = (poison.rowwise() - mu.transpose()) * v;
        probe.poison_head_mass = static_cast<double>((proj.array() < t).count()) / static_cast<double>(poison.rows());
    }
    return probe;
}

std::string_view to_string(ScoreMode mode) { return mode == ScoreMode::alg1 ? "alg1" : "topk"; }

ScoreMode parse_score_mode(std::string_view text) {
    if (text == "alg1") return ScoreMode::alg1;
    if (text == "topk") return ScoreMode::topk;
    fail(ErrorCode::invalid_argument, "unknown score mode '" + std::string(text) + "'");
}

namespace {

// Ranking keys and reported scores per sample for the first `k` basis rows.
struct Scored {
    SampleScores keys;
    std::vector<double> reported;
};

Scored score_samples(const CenteredMatrix& centered, const RowMatrix& basis, std::size_t k, ScoreMode mode) {
    Scored s;
    if (mode == ScoreMode::alg1) {
        const VectorXd v = basis.row(0).transpose();
        s.keys = aggregate_per_sample(score_alg1(centered.rows, v), centered.row_owner);
        s.reported = s.keys.scores;
    } else {
        s.keys = aggregate_per_sample(projection_energy(centered.rows, basis.topRows(static_cast<Index>(k))),
                                      centered.row_owner);
        s.reported = s.keys.scores;
        for (double& x : s.reported) x = std::sqrt(x);
    }
    return s;
}

std::unordered_map<SampleId, bool> truth_map(const Dataset& ds) {
    std::unordered_map<SampleId, bool> m;
    m.reserve(ds.size());
    for (const auto& s : ds.samples) m.emplace(s.id, s.is_poisoned);
    return m;
}

OutlierReport build_report(const Scored& scored, const DetectOptions& options, ReprKind kind,
                           const Dataset* ground_truth) {
    OutlierReport report;
    report.k = options.mode == ScoreMode::alg1 ? 1 : options.k;
    report.kind = kind;
    report.mode = options.mode;
    report.epsilon = options.epsilon;
    report.removed_ids = remove_top(scored.keys, options.epsilon);
    const auto order = rank_descending(scored.keys);

    std::unordered_map<SampleId, bool> truth;
    if (ground_truth) truth = truth_map(*ground_truth);
    std::vector<SampleId> poisoned;
    for (std::size_t r = 0; r < order.size(); ++r) {
        OutlierEntry e;
        e.id = scored.keys.ids[order[r]];
        e.score = scored.reported[order[r]];
        e.rank = r;
        e.removed = r < report.removed_ids.size();
        if (ground_truth) {
            const auto it = truth.find(e.id);
            if (it == truth.end())
                fail(ErrorCode::invalid_argument, "sample " + std::to_string(e.id) + " missing from ground truth");
            e.is_poisoned = it->second;
            if (it->second) poisoned.push_back(e.id);
        }
        report.entries.push_back(e);
    }
    if (ground_truth) {
        report.poisoned_total = poisoned.size();
        report.recall = recall(report.removed_ids, poisoned);
    }
    return report;
}

} // namespace

OutlierReport detect(const RepresentationSet& reps, const DetectOptions& options, const Dataset* ground_truth) {
    const CenteredMatrix centered = center(reps);
    const std::size_t k = options.mode == ScoreMode::alg1 ? 1 : options.k;
    const SingularBasis basis = top_k_singular(centered.rows, k, options.power);
    OutlierReport report = build_report(score_samples(centered, basis.vectors, k, options.mode), options, reps.kind,
                                        ground_truth);
    report.singular_values = basis.singular_values;
    return report;
}

std::vector<SweepPoint> k_sweep(const RepresentationSet& reps, const std::vector<std::size_t>& ks,
                                const DetectOptions& options, const Dataset& ground_truth,
                                std::vector<std::size_t>* skipped) {
    const CenteredMatrix centered = center(reps);
    const std::size_t limit = std::min(reps.row_count(), reps.dim());
    std::vector<std::size_t> valid;
    for (std::size_t k : ks) {
        if (k >= 1 && k <= limit) {
            valid.push_back(k);
        } else if (skipped) {
            skipped->push_back(k);
        }
    }
    std::vector<SweepPoint> out;
    if (valid.empty()) return out;
    const std::size_t kmax = *std::max_element(valid.begin(), valid.end());
    const SingularBasis basis = top_k_singular(centered.rows, kmax, options.power);
    for (std::size_t k : valid) {
        DetectOptions o = options;
        o.k = k;
        o.mode = ScoreMode::topk;
        const auto report = build_report(score_samples(centered, basis.vectors, k, o.mode), o, reps.kind, &ground_truth);
        out.push_back({k, report.recall});
    }
    return out;
}

void save_report_jsonl(const OutlierReport& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot write report " + path.string());
    for (const auto& e : report.entries) {
        nlohmann::json j{{"id", e.id}, {"score", e.score}, {"rank", e.rank}, {"removed", e.removed}};
        if (e.is_poisoned) j["is_poisoned"] = *e.is_poisoned;
        out << j.dump() << '\n';
    }
    nlohmann::json summary{
        {"summary", true},
        {"k", report.k},
        {"kind", std::string(to_string(report.kind))},
        {"score_mode", std::string(to_string(report.mode))},
        {"epsilon", report.epsilon},
        {"n", report.entries.size()},
        {"removed_count", report.removed_ids.size()},
        {"poisoned_total", report.poisoned_total},
        {"singular_values", report.singular_values},
    };
    summary["recall"] = report.recall ? nlohmann::json(*report.recall) : nlohmann::json(nullptr);
    out << summary.dump() << '\n';
    if (!out) fail(ErrorCode::io, "write failed for " + path.string());
}

OutlierReport load_report_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::io, "cannot open report " + path.string());
    OutlierReport report;
    bool have_summary = false;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            if (j.value("summary", false)) {
                have_summary = true;
                report.k = j.at("k").get<std::size_t>();
                report.kind = parse_repr_kind(j.at("kind").get<std::string>());
                report.mode = parse_score_mode(j.at("score_mode").get<std::string>());
                report.epsilon = j.at("epsilon").get<double>();
                report.poisoned_total = j.value("poisoned_total", std::size_t{0});
                report.singular_values = j.value("singular_values", std::vector<double>{});
                if (!j.at("recall").is_null()) report.recall = j.at("recall").get<double>();
                continue;
            }
            OutlierEntry e;
            e.id = j.at("id").get<SampleId>();
            e.score = j.at("score").get<double>();
            e.rank = j.at("rank").get<std::size_t>();
            e.removed = j.at("removed").get<bool>();
            if (j.contains("is_poisoned")) e.is_poisoned = j.at("is_poisoned").get<bool>();
            if (e.removed) report.removed_ids.push_back(e.id);
            report.entries.push_back(e);
        } catch (const nlohmann::json::exception& ex) {
            fail(ErrorCode::parse, path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
        }
    }
    if (!have_summary) fail(ErrorCode::parse, path.string() + ": missing summary record");
    return report;
}

void write_histogram_csv(const OutlierReport& report, const std::filesystem::path& path) {
    for (const auto& e : report.entries) {
        if (!e.is_poisoned)
            fail(ErrorCode::invalid_argument, "report has no ground truth for sample " + std::to_string(e.id));
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot write histogram " + path.string());
    out << "score,is_poisoned\n";
    out << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (const auto& e : report.entries) out << e.score << ',' << (*e.is_poisoned ? 1 : 0) << '\n';
    if (!out) fail(ErrorCode::io, "write failed for " + path.string());
}

} // namespace bdl
