#pragma once

#include "core/corpus.hpp"
#include "core/model.hpp"
#include "core/params.hpp"

#include <filesystem>
#include <string_view>
#include <vector>

namespace bdl {

enum class ReprKind {
    encoder_output,
    context_vectors,
    mean_context,
    decoder_states,
    mean_decoder_state,
    mean_input_embedding,
};

std::string_view to_string(ReprKind kind);
// Accepts both snake_case and kebab-case spellings.
ReprKind parse_repr_kind(std::string_view text);
// Kinds that produce one vector per decoded token.
bool is_multi_vector(ReprKind kind);

// Per-sample representation vectors in sample order. Single-vector kinds have
// one row per sample; multi-vector kinds one row per decode step.
struct RepresentationSet {
    ReprKind kind = ReprKind::encoder_output;
    RowMatrix rows;
    std::vector<SampleId> row_owner;
    std::vector<int> vector_index;   // position of the row within its sample

    std::size_t dim() const { return static_cast<std::size_t>(rows.cols()); }
    std::size_t row_count() const { return static_cast<std::size_t>(rows.rows()); }
    // Distinct owners in first-appearance order.
    std::vector<SampleId> sample_ids() const;
};

struct ExtractOptions {
    // encoder_output concatenates final hidden and cell states; false keeps
    // only the hidden part.
    bool include_cell_state = true;
};

// Runs greedy decoding (no labels) on every sample and collects `kind`.
RepresentationSet extract_representations(const Model& model, const Dataset& dataset, ReprKind kind,
                                          const ExtractOptions& options = {});

// One representation kind from an already decoded sample.
std::vector<Eigen::VectorXd> select_representation(const SampleRepresentations& reps, ReprKind kind,
                                                   const ExtractOptions& options = {});

// CSV with header "sample_id,vector_index,v0,...", one row per vector.
void save_representations_csv(const RepresentationSet& reps, const std::filesystem::path& path);
RepresentationSet load_representations_csv(const std::filesystem::path& path, ReprKind kind);

} // namespace bdl
