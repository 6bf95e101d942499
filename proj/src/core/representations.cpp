#include "core/representations.hpp"

#include "core/error.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace bdl {

using Eigen::VectorXd;

std::string_view to_string(ReprKind kind) {
    switch (kind) {
    case ReprKind::encoder_output: return "encoder-output";
    case ReprKind::context_vectors: return "context-vectors";
    case ReprKind::mean_context: return "mean-context";
    case ReprKind::decoder_states: return "decoder-states";
    case ReprKind::mean_decoder_state: return "mean-decoder-state";
    case ReprKind::mean_input_embedding: return "mean-input-embedding";
    }
    return "encoder-output";
}

ReprKind parse_repr_kind(std::string_view text) {
    std::string norm(text);
    for (char& c : norm) {
        if (c == '_') c = '-';
    }
    for (auto k : {ReprKind::encoder_output, ReprKind::context_vectors, ReprKind::mean_context,
                   ReprKind::decoder_states, ReprKind::mean_decoder_state, ReprKind::mean_input_embedding}) {
        if (norm == to_string(k)) return k;
    }
    fail(ErrorCode::invalid_argument, "unknown representation kind '" + std::string(text) + "'");
}

bool is_multi_vector(ReprKind kind) {
    return kind == ReprKind::context_vectors || kind == ReprKind::decoder_states;
}

std::vector<SampleId> RepresentationSet::sample_ids() const {
    std::vector<SampleId> out;
    for (std::size_t i = 0; i < row_owner.size(); ++i) {
        if (i == 0 || row_owner[i] != row_owner[i - 1]) out.push_back(row_owner[i]);
    }
    return out;
}

namespace {

VectorXd mean_of(const std::vector<VectorXd>& vs) {
    VectorXd m = VectorXd::Zero(vs.front().size());
    for (const auto& v : vs) m += v;
    return m / static_cast<double>(vs.size());
}

} // namespace

std::vector<VectorXd> select_representation(const SampleRepresentations& reps, ReprKind kind,
                                            const ExtractOptions& options) {
    switch (kind) {
    case ReprKind::encoder_output: {
        if (!options.include_cell_state) return {reps.final_hidden};
        VectorXd v(reps.final_hidden.size() + reps.final_cell.size());
        v << reps.final_hidden, reps.final_cell;
        return {v};
    }
    case ReprKind::context_vectors: return reps.contexts;
    case ReprKind::mean_context: return {mean_of(reps.contexts)};
    case ReprKind::decoder_states: return reps.decoder_states;
    case ReprKind::mean_decoder_state: return {mean_of(reps.decoder_states)};
    case ReprKind::mean_input_embedding: return {reps.mean_input_embedding};
    }
    fail(ErrorCode::invalid_argument, "unknown representation kind");
}

RepresentationSet extract_representations(const Model& model, const Dataset& dataset, ReprKind kind,
                                          const ExtractOptions& options) {
    RepresentationSet out;
    out.kind = kind;
    std::vector<VectorXd> collected;
    collected.reserve(dataset.size());
    for (const auto& sample : dataset.samples) {
        const auto input = encode_input(sample.code_tokens, model.vocabs().input, model.config().max_input_len);
        const Decoded decoded = greedy_decode(model, input);
        auto vs = select_representation(decoded.representations, kind, options);
        for (std::size_t j = 0; j < vs.size(); ++j) {
            out.row_owner.push_back(sample.id);
            out.vector_index.push_back(static_cast<int>(j));
            collected.push_back(std::move(vs[j]));
        }
    }
    const Eigen::Index d = collected.empty() ? 0 : collected.front().size();
    out.rows.resize(static_cast<Eigen::Index>(collected.size()), d);
    for (std::size_t i = 0; i < collected.size(); ++i) out.rows.row(static_cast<Eigen::Index>(i)) = collected[i];
    return out;
}

void save_representations_csv(const RepresentationSet& reps, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot write representations " + path.string());
    out << "sample_id,vector_index";
    for (std::size_t k = 0; k < reps.dim(); ++k) out << ",v" << k;
    out << '\n';
    out << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (std::size_t i = 0; i < reps.row_count(); ++i) {
        out << reps.row_owner[i] << ',' << reps.vector_index[i];
        for (Eigen::Index k = 0; k < reps.rows.cols(); ++k) out << ',' << reps.rows(static_cast<Eigen::Index>(i), k);
        out << '\n';
    }
    if (!out) fail(ErrorCode::io, "write failed for " + path.string());
}

RepresentationSet load_representations_csv(const std::filesystem::path& path, ReprKind kind) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::io, "cannot open representations " + path.string());
    RepresentationSet reps;
    reps.kind = kind;
    std::vector<std::vector<double>> values;
    std::string line;
    std::size_t line_no = 0;
    std::size_t dim = 0;
    bool have_dim = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.rfind("sample_id", 0) == 0) continue;
        std::vector<double> fields;
        SampleId owner = 0;
        int index = 0;
        std::size_t pos = 0;
        std::size_t col = 0;
        while (pos <= line.size()) {
            std::size_t end = line.find(',', pos);
            if (end == std::string::npos) end = line.size();
            const char* b = line.data() + pos;
            const char* e = line.data() + end;
            std::from_chars_result r{};
            if (col == 0) {
                r = std::from_chars(b, e, owner);
            } else if (col == 1) {
                r = std::from_chars(b, e, index);
            } else {
                double v = 0.0;
                r = std::from_chars(b, e, v);
                fields.push_back(v);
            }
            if (r.ec != std::errc() || r.ptr != e)
                fail(ErrorCode::parse, path.string() + ":" + std::to_string(line_no) + ": bad value in column " +
                                           std::to_string(col + 1));
            ++col;
            pos = end + 1;
        }
        if (col < 3) fail(ErrorCode::parse, path.string() + ":" + std::to_string(line_no) + ": no vector values");
        if (!have_dim) {
            dim = fields.size();
            have_dim = true;
        } else if (fields.size() != dim) {
            fail(ErrorCode::parse, path.string() + ":" + std::to_string(line_no) + ": expected " +
                                       std::to_string(dim) + " values, found " + std::to_string(fields.size()));
        }
        reps.row_owner.push_back(owner);
        reps.vector_index.push_back(index);
        values.push_back(std::move(fields));
    }
    reps.rows.resize(static_cast<Eigen::Index>(values.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < values.size(); ++i)
        for (std::size_t k = 0; k < dim; ++k)
            reps.rows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = values[i][k];

    // Rows of one sample must be contiguous.
    std::unordered_set<SampleId> finished;
    for (std::size_t i = 0; i < reps.row_owner.size(); ++i) {
        if (i > 0 && reps.row_owner[i] != reps.row_owner[i - 1]) {
            if (!finished.insert(reps.row_owner[i - 1]).second || finished.count(reps.row_owner[i]))
                fail(ErrorCode::parse, path.string() + ": rows of sample " + std::to_string(reps.row_owner[i]) +
                                           " are not contiguous");
        }
    }
    return reps;
}

} // namespace bdl
