#pragma once

#include "core/corpus.hpp"
#include "core/params.hpp"
#include "core/representations.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace bdl {

// Representation rows minus their mean; several rows may share an owner.
struct CenteredMatrix {
    RowMatrix rows;
    Eigen::VectorXd mean;
    std::vector<SampleId> row_owner;
};

// Every row of every sample contributes once to the mean.
CenteredMatrix center(const RepresentationSet& reps);
CenteredMatrix center(const RowMatrix& rows, std::vector<SampleId> row_owner);
// Checks that all vectors share one dimension.
CenteredMatrix center(const std::vector<Eigen::VectorXd>& vectors, std::vector<SampleId> row_owner);

// M^T M accumulated over row chunks in a fixed order.
Eigen::MatrixXd gram_matrix(const RowMatrix& m, std::size_t chunk_rows = 4096);

struct SingularBasis {
    RowMatrix vectors;                   // k x d, orthonormal rows
    std::vector<double> singular_values; // nonincreasing
    std::size_t degenerate = 0;          // trailing directions with sigma == 0
    std::size_t iterations = 0;
};

struct PowerIterationOptions {
    double tol = 1e-10;
    std::size_t max_iterations = 5000;
    std::uint64_t seed = 0;
    // Extra block columns beyond k; speeds convergence when sigma_k ~ sigma_k+1.
    std::size_t oversample = 8;
};

// Top-k right singular vectors of M by block power iteration on M^T M with
// Rayleigh-Ritz extraction. Each returned v_i satisfies
// ||M^T M v_i - sigma_i^2 v_i|| <= tol * sigma_1^2, and the first nonzero
// coordinate of v_i is positive. Directions with sigma_i == 0 are completed by
// seeded orthonormalisation.
SingularBasis top_k_singular(const RowMatrix& m, std::size_t k, const PowerIterationOptions& options = {});

// Symmetric eigen-decomposition by cyclic Jacobi rotations, eigenvalues in
// descending order with matching eigenvector columns.
void jacobi_eigen(const Eigen::MatrixXd& a, Eigen::VectorXd& values, Eigen::MatrixXd& vectors);

// ((row . v)^2) per row.
std::vector<double> score_alg1(const RowMatrix& m, const Eigen::VectorXd& v);
// sum_i (row . v_i)^2 per row; monotone in score_topk and equal to score_alg1
// bit-for-bit when k == 1.
std::vector<double> projection_energy(const RowMatrix& m, const RowMatrix& basis);
// ||row V^T||_2 per row.
std::vector<double> score_topk(const RowMatrix& m, const RowMatrix& basis);

struct SampleScores {
    std::vector<SampleId> ids;
    std::vector<double> scores;
};

// Max over each sample's rows, samples in first-appearance order. When
// `expected` is given every listed sample must own at least one row.
SampleScores aggregate_per_sample(const std::vector<double>& row_scores, const std::vector<SampleId>& row_owner,
                                  const std::vector<SampleId>* expected = nullptr);

// Positions into `scores` ordered by descending score, ties by ascending id.
std::vector<std::size_t> rank_descending(const SampleScores& scores);

// floor(1.5 * epsilon * n)
std::size_t removal_count(double epsilon, std::size_t n);

std::vector<SampleId> remove_top(const SampleScores& scores, double epsilon);

// |removed ∩ poisoned| / |poisoned|; nullopt when nothing is poisoned.
std::optional<double> recall(const std::vector<SampleId>& removed, const std::vector<SampleId>& poisoned);

struct SeparabilityProbe {
    double clean_tail_mass = 0.0;    // Pr_clean[(x - mu) . v > t]
    double poison_head_mass = 0.0;   // Pr_poison[(x - mu) . v < t]
};

// mu is the mean of the pooled clean and poison rows.
SeparabilityProbe separability_probe(const RowMatrix& clean, const RowMatrix& poison, const Eigen::VectorXd& v,
                                     double t);

enum class ScoreMode { alg1, topk };
std::string_view to_string(ScoreMode mode);
ScoreMode parse_score_mode(std::string_view text);

struct DetectOptions {
    std::size_t k = 10;
    double epsilon = 0.05;
    ScoreMode mode = ScoreMode::topk;
    PowerIterationOptions power;
};

struct OutlierEntry {
    SampleId id = 0;
    double score = 0.0;
    std::size_t rank = 0;   // 0 = most suspicious
    bool removed = false;
    std::optional<bool> is_poisoned;
};

struct OutlierReport {
    std::vector<OutlierEntry> entries;   // in rank order
    std::vector<SampleId> removed_ids;
    std::optional<double> recall;
    std::size_t k = 0;
    ReprKind kind = ReprKind::encoder_output;
    ScoreMode mode = ScoreMode::topk;
    double epsilon = 0.0;
    std::vector<double> singular_values;
    std::size_t poisoned_total = 0;
};

// Spectral-signature detection over a representation set. Ground truth, when
// given, is consulted only after ranking to fill is_poisoned and recall.
OutlierReport detect(const RepresentationSet& reps, const DetectOptions& options,
                     const Dataset* ground_truth = nullptr);

struct SweepPoint {
    std::size_t k = 0;
    std::optional<double> recall;
};

// Re-scores for each k from one basis of the largest valid k. Values of k above
// min(rows, dim) are skipped and returned in `skipped`.
std::vector<SweepPoint> k_sweep(const RepresentationSet& reps, const std::vector<std::size_t>& ks,
                                const DetectOptions& options, const Dataset& ground_truth,
                                std::vector<std::size_t>* skipped = nullptr);

void save_report_jsonl(const OutlierReport& report, const std::filesystem::path& path);
OutlierReport load_report_jsonl(const std::filesystem::path& path);

// Two-column CSV "score,is_poisoned" with a header row.
void write_histogram_csv(const OutlierReport& report, const std::filesystem::path& path);

} // namespace bdl
