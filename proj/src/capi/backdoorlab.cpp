#include "backdoorlab/backdoorlab.h"

#include "core/backdoor.hpp"
#include "core/corpus.hpp"
#include "core/detector.hpp"
#include "core/error.hpp"
#include "core/metrics.hpp"
#include "core/model.hpp"
#include "core/representations.hpp"
#include "core/rng.hpp"

#include <cmath>
#include <cstring>
#include <exception>
#include <limits>
#include <new>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>

struct bdl_dataset {
    bdl::Dataset value;
};
struct bdl_model {
    bdl::Model value;
};
struct bdl_reprs {
    bdl::RepresentationSet value;
};
struct bdl_report {
    bdl::OutlierReport value;
};

namespace {

thread_local std::string last_error;

bdl_status status_of(bdl::ErrorCode code) {
    switch (code) {
    case bdl::ErrorCode::invalid_argument: return BDL_ERR_INVALID_ARGUMENT;
    case bdl::ErrorCode::io: return BDL_ERR_IO;
    case bdl::ErrorCode::parse: return BDL_ERR_PARSE;
    case bdl::ErrorCode::numeric: return BDL_ERR_NUMERIC;
    case bdl::ErrorCode::convergence: return BDL_ERR_CONVERGENCE;
    case bdl::ErrorCode::not_applicable: return BDL_ERR_NOT_APPLICABLE;
    }
    return BDL_ERR_INTERNAL;
}

bdl_status set_error(bdl_status status, std::string message) {
    last_error = std::move(message);
    return status;
}

template <class F>
bdl_status guarded(F&& body) {
    try {
        last_error.clear();
        return body();
    } catch (const bdl::Error& e) {
        return set_error(status_of(e.code()), e.what());
    } catch (const std::bad_alloc&) {
        return set_error(BDL_ERR_INTERNAL, "out of memory");
    } catch (const std::exception& e) {
        return set_error(BDL_ERR_INTERNAL, e.what());
    } catch (...) {
        return set_error(BDL_ERR_INTERNAL, "unknown error");
    }
}

#define BDL_REQUIRE(cond, what) \
    do { \
        if (!(cond)) return set_error(BDL_ERR_INVALID_ARGUMENT, what); \
    } while (0)

bdl_status copy_out(const std::string& text, char* buffer, std::size_t size, std::size_t* needed) {
    if (needed) *needed = text.size() + 1;
    if (!buffer || size < text.size() + 1)
        return set_error(BDL_ERR_BUFFER_TOO_SMALL, "buffer of " + std::to_string(size) + " bytes, need " +
                                                       std::to_string(text.size() + 1));
    std::memcpy(buffer, text.c_str(), text.size() + 1);
    return BDL_OK;
}

bdl::Tokens split_words(const char* text) {
    bdl::Tokens out;
    std::istringstream in(text);
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

bdl::BackdoorSpec to_spec(const bdl_backdoor_spec& s) {
    bdl::BackdoorSpec spec;
    if (s.trigger != BDL_TRIGGER_FIXED && s.trigger != BDL_TRIGGER_GRAMMATICAL)
        bdl::fail(bdl::ErrorCode::invalid_argument, "unknown trigger kind");
    if (s.target != BDL_TARGET_STATIC && s.target != BDL_TARGET_DYNAMIC)
        bdl::fail(bdl::ErrorCode::invalid_argument, "unknown target kind");
    spec.trigger = s.trigger == BDL_TRIGGER_FIXED ? bdl::TriggerKind::fixed : bdl::TriggerKind::grammatical;
    spec.target = s.target == BDL_TARGET_STATIC ? bdl::TargetKind::static_target : bdl::TargetKind::dynamic_target;
    if (s.static_target) spec.static_target = split_words(s.static_target);
    if (s.dynamic_prefix) spec.dynamic_prefix = s.dynamic_prefix;
    spec.epsilon = s.epsilon;
    spec.validate();
    return spec;
}

bdl::ModelConfig to_config(const bdl_model_config& c) {
    bdl::ModelConfig m;
    m.embed_dim = c.embed_dim;
    m.hidden_dim = c.hidden_dim;
    m.max_decode_len = c.max_decode_len;
    m.epochs = c.epochs;
    m.batch_size = c.batch_size;
    m.input_vocab_cap = c.input_vocab_cap;
    m.output_vocab_cap = c.output_vocab_cap;
    m.max_input_len = c.max_input_len;
    m.learning_rate = c.learning_rate;
    m.grad_clip = c.grad_clip;
    m.seed = c.seed;
    m.validate();
    return m;
}

bdl::DetectOptions to_detect(const bdl_detect_options& o) {
    bdl::DetectOptions d;
    d.k = o.k;
    d.epsilon = o.epsilon;
    if (o.mode != BDL_SCORE_ALG1 && o.mode != BDL_SCORE_TOPK)
        bdl::fail(bdl::ErrorCode::invalid_argument, "unknown score mode");
    d.mode = o.mode == BDL_SCORE_ALG1 ? bdl::ScoreMode::alg1 : bdl::ScoreMode::topk;
    d.power.seed = o.seed;
    d.power.tol = o.tol;
    d.power.max_iterations = o.max_iterations;
    return d;
}

constexpr bdl::ReprKind repr_kinds[] = {
    bdl::ReprKind::encoder_output,     bdl::ReprKind::context_vectors,    bdl::ReprKind::mean_context,
    bdl::ReprKind::decoder_states,     bdl::ReprKind::mean_decoder_state, bdl::ReprKind::mean_input_embedding,
};

bool valid_kind(bdl_repr_kind k) { return k >= BDL_REPR_ENCODER_OUTPUT && k <= BDL_REPR_MEAN_INPUT_EMBEDDING; }

} // namespace

extern "C" {

const char* bdl_version(void) { return "0.1.0"; }

const char* bdl_status_name(bdl_status status) {
    switch (status) {
    case BDL_OK: return "ok";
    case BDL_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case BDL_ERR_IO: return "io";
    case BDL_ERR_PARSE: return "parse";
    case BDL_ERR_NUMERIC: return "numeric";
    case BDL_ERR_CONVERGENCE: return "convergence";
    case BDL_ERR_NOT_APPLICABLE: return "not_applicable";
    case BDL_ERR_BUFFER_TOO_SMALL: return "buffer_too_small";
    case BDL_ERR_INTERNAL: return "internal";
    }
    return "unknown";
}

const char* bdl_last_error(void) { return last_error.c_str(); }

uint64_t bdl_sub_seed(uint64_t seed, const char* stream) { return bdl::sub_seed(seed, stream ? stream : ""); }

// corpus

bdl_status bdl_dataset_load_jsonl(const char* path, bdl_dataset** out, size_t* skipped) {
    return guarded([&] {
        BDL_REQUIRE(path && out, "path and out must be non-null");
        auto loaded = bdl::load_jsonl(path);
        if (skipped) *skipped = loaded.skipped_empty_names;
        *out = new bdl_dataset{std::move(loaded.dataset)};
        return BDL_OK;
    });
}

bdl_status bdl_dataset_save_jsonl(const bdl_dataset* dataset, const char* path) {
    return guarded([&] {
        BDL_REQUIRE(dataset && path, "dataset and path must be non-null");
        bdl::save_jsonl(dataset->value, path);
        return BDL_OK;
    });
}

bdl_status bdl_dataset_generate(size_t n, uint64_t seed, int64_t first_id, bdl_dataset** out) {
    return guarded([&] {
        BDL_REQUIRE(out, "out must be non-null");
        *out = new bdl_dataset{bdl::generate_synthetic(n, seed, first_id)};
        return BDL_OK;
    });
}

size_t bdl_dataset_size(const bdl_dataset* dataset) { return dataset ? dataset->value.size() : 0; }

size_t bdl_dataset_poisoned_count(const bdl_dataset* dataset) {
    return dataset ? dataset->value.poisoned_count() : 0;
}

bdl_status bdl_dataset_without(const bdl_dataset* dataset, const int64_t* ids, size_t count, bdl_dataset** out) {
    return guarded([&] {
        BDL_REQUIRE(dataset && out && (ids || count == 0), "dataset, ids and out must be non-null");
        std::unordered_set<int64_t> drop(ids, ids + count);
        bdl::Dataset kept;
        kept.split = dataset->value.split;
        for (const auto& s : dataset->value.samples)
            if (!drop.count(s.id)) kept.samples.push_back(s);
        *out = new bdl_dataset{std::move(kept)};
        return BDL_OK;
    });
}

void bdl_dataset_free(bdl_dataset* dataset) { delete dataset; }

bdl_status bdl_subtokenize(const char* identifier, char* buffer, size_t buffer_size, size_t* needed) {
    return guarded([&] {
        BDL_REQUIRE(identifier, "identifier must be non-null");
        return copy_out(bdl::join(bdl::subtokenize(identifier), " "), buffer, buffer_size, needed);
    });
}

bdl_status bdl_tokenize(const char* code, char* buffer, size_t buffer_size, size_t* needed) {
    return guarded([&] {
        BDL_REQUIRE(code, "code must be non-null");
        return copy_out(bdl::join(bdl::tokenize(code), " "), buffer, buffer_size, needed);
    });
}

// backdoor

void bdl_backdoor_spec_default(bdl_backdoor_spec* spec) {
    if (!spec) return;
    spec->trigger = BDL_TRIGGER_FIXED;
    spec->target = BDL_TARGET_STATIC;
    spec->static_target = nullptr;
    spec->dynamic_prefix = nullptr;
    spec->epsilon = 0.05;
}

bdl_status bdl_dataset_poison(const bdl_dataset* clean, const bdl_backdoor_spec* spec, uint64_t seed,
                              bdl_dataset** out, bdl_poison_stats* stats) {
    return guarded([&] {
        BDL_REQUIRE(clean && spec && out, "clean, spec and out must be non-null");
        auto result = bdl::poison_dataset(clean->value, to_spec(*spec), seed);
        if (stats) {
            stats->clean_count = result.stats.clean_count;
            stats->poisoned_count = result.stats.poisoned_count;
            stats->missing_signature = result.stats.missing_signature;
            stats->copy_probability = result.stats.copy_probability;
            stats->realized_epsilon = result.stats.realized_epsilon;
        }
        *out = new bdl_dataset{std::move(result.dataset)};
        return BDL_OK;
    });
}

bdl_status bdl_trigger_render(bdl_trigger_kind kind, uint64_t seed, char* buffer, size_t buffer_size,
                              size_t* needed) {
    return guarded([&] {
        BDL_REQUIRE(kind == BDL_TRIGGER_FIXED || kind == BDL_TRIGGER_GRAMMATICAL, "unknown trigger kind");
        const auto k = kind == BDL_TRIGGER_FIXED ? bdl::TriggerKind::fixed : bdl::TriggerKind::grammatical;
        return copy_out(bdl::make_trigger(k, bdl::TriggerGrammar::standard(), seed).source_text, buffer,
                        buffer_size, needed);
    });
}

bdl_status bdl_trigger_verify_dead(const char* statement, int* dead) {
    return guarded([&] {
        BDL_REQUIRE(statement && dead, "statement and dead must be non-null");
        *dead = bdl::verify_dead(bdl::parse_condition(statement)) ? 1 : 0;
        return BDL_OK;
    });
}

// model

void bdl_model_config_default(bdl_model_config* config) {
    if (!config) return;
    const bdl::ModelConfig d;
    config->embed_dim = d.embed_dim;
    config->hidden_dim = d.hidden_dim;
    config->max_decode_len = d.max_decode_len;
    config->epochs = d.epochs;
    config->batch_size = d.batch_size;
    config->input_vocab_cap = d.input_vocab_cap;
    config->output_vocab_cap = d.output_vocab_cap;
    config->max_input_len = d.max_input_len;
    config->learning_rate = d.learning_rate;
    config->grad_clip = d.grad_clip;
    config->seed = d.seed;
}

bdl_status bdl_model_train(const bdl_dataset* train, const bdl_model_config* config, bdl_epoch_callback on_epoch,
                           void* user_data, bdl_model** out) {
    return guarded([&] {
        BDL_REQUIRE(train && config && out, "train, config and out must be non-null");
        bdl::EpochCallback cb;
        if (on_epoch) cb = [&](std::size_t e, double loss) { on_epoch(e, loss, user_data); };
        *out = new bdl_model{bdl::fit(train->value, to_config(*config), nullptr, cb)};
        return BDL_OK;
    });
}

bdl_status bdl_model_save(const bdl_model* model, const char* path) {
    return guarded([&] {
        BDL_REQUIRE(model && path, "model and path must be non-null");
        bdl::save_checkpoint(model->value, path);
        return BDL_OK;
    });
}

bdl_status bdl_model_load(const char* path, bdl_model** out) {
    return guarded([&] {
        BDL_REQUIRE(path && out, "path and out must be non-null");
        *out = new bdl_model{bdl::load_checkpoint(path)};
        return BDL_OK;
    });
}

void bdl_model_free(bdl_model* model) { delete model; }

bdl_status bdl_model_predict(const bdl_model* model, const char* code, char* buffer, size_t buffer_size,
                             size_t* needed) {
    return guarded([&] {
        BDL_REQUIRE(model && code, "model and code must be non-null");
        bdl::CodeSample s;
        s.code = code;
        s.code_tokens = bdl::tokenize(code);
        return copy_out(bdl::join(bdl::predict(model->value, s), " "), buffer, buffer_size, needed);
    });
}

bdl_status bdl_model_gradient_check(const bdl_model* model, const bdl_dataset* dataset, size_t batch_limit,
                                    double step, size_t min_params, double* max_relative_error) {
    return guarded([&] {
        BDL_REQUIRE(model && dataset && max_relative_error, "model, dataset and result must be non-null");
        BDL_REQUIRE(batch_limit > 0 && !dataset->value.empty(), "gradient check needs at least one sample");
        std::vector<bdl::EncodedSample> batch;
        for (std::size_t i = 0; i < std::min(batch_limit, dataset->value.size()); ++i)
            batch.push_back(model->value.encode(dataset->value.samples[i]));
        *max_relative_error = bdl::gradient_check(model->value, batch, step, min_params).max_relative_error;
        return BDL_OK;
    });
}

// representations

bdl_status bdl_repr_kind_parse(const char* name, bdl_repr_kind* out) {
    return guarded([&] {
        BDL_REQUIRE(name && out, "name and out must be non-null");
        const auto kind = bdl::parse_repr_kind(name);
        for (int i = 0; i < 6; ++i)
            if (repr_kinds[i] == kind) *out = static_cast<bdl_repr_kind>(i);
        return BDL_OK;
    });
}

const char* bdl_repr_kind_name(bdl_repr_kind kind) {
    if (!valid_kind(kind)) return "";
    return bdl::to_string(repr_kinds[kind]).data();
}

bdl_status bdl_model_extract(const bdl_model* model, const bdl_dataset* dataset, bdl_repr_kind kind,
                             bdl_reprs** out) {
    return guarded([&] {
        BDL_REQUIRE(model && dataset && out, "model, dataset and out must be non-null");
        BDL_REQUIRE(valid_kind(kind), "unknown representation kind");
        *out = new bdl_reprs{bdl::extract_representations(model->value, dataset->value, repr_kinds[kind])};
        return BDL_OK;
    });
}

bdl_status bdl_reprs_save_csv(const bdl_reprs* reprs, const char* path) {
    return guarded([&] {
        BDL_REQUIRE(reprs && path, "reprs and path must be non-null");
        bdl::save_representations_csv(reprs->value, path);
        return BDL_OK;
    });
}

bdl_status bdl_reprs_load_csv(const char* path, bdl_repr_kind kind, bdl_reprs** out) {
    return guarded([&] {
        BDL_REQUIRE(path && out, "path and out must be non-null");
        BDL_REQUIRE(valid_kind(kind), "unknown representation kind");
        *out = new bdl_reprs{bdl::load_representations_csv(path, repr_kinds[kind])};
        return BDL_OK;
    });
}

size_t bdl_reprs_dim(const bdl_reprs* reprs) { return reprs ? reprs->value.dim() : 0; }
size_t bdl_reprs_rows(const bdl_reprs* reprs) { return reprs ? reprs->value.row_count() : 0; }
void bdl_reprs_free(bdl_reprs* reprs) { delete reprs; }

// detector

void bdl_detect_options_default(bdl_detect_options* options) {
    if (!options) return;
    const bdl::DetectOptions d;
    options->k = d.k;
    options->epsilon = d.epsilon;
    options->mode = BDL_SCORE_TOPK;
    options->seed = d.power.seed;
    options->tol = d.power.tol;
    options->max_iterations = d.power.max_iterations;
}

bdl_status bdl_detect(const bdl_reprs* reprs, const bdl_detect_options* options, const bdl_dataset* ground_truth,
                      bdl_report** out) {
    return guarded([&] {
        BDL_REQUIRE(reprs && options && out, "reprs, options and out must be non-null");
        *out = new bdl_report{
            bdl::detect(reprs->value, to_detect(*options), ground_truth ? &ground_truth->value : nullptr)};
        return BDL_OK;
    });
}

bdl_status bdl_report_save_jsonl(const bdl_report* report, const char* path) {
    return guarded([&] {
        BDL_REQUIRE(report && path, "report and path must be non-null");
        bdl::save_report_jsonl(report->value, path);
        return BDL_OK;
    });
}

bdl_status bdl_report_load_jsonl(const char* path, bdl_report** out) {
    return guarded([&] {
        BDL_REQUIRE(path && out, "path and out must be non-null");
        *out = new bdl_report{bdl::load_report_jsonl(path)};
        return BDL_OK;
    });
}

size_t bdl_report_size(const bdl_report* report) { return report ? report->value.entries.size() : 0; }

bdl_status bdl_report_entry_at(const bdl_report* report, size_t rank, bdl_report_entry* out) {
    return guarded([&] {
        BDL_REQUIRE(report && out, "report and out must be non-null");
        BDL_REQUIRE(rank < report->value.entries.size(), "rank " + std::to_string(rank) + " out of range");
        const auto& e = report->value.entries[rank];
        out->id = e.id;
        out->score = e.score;
        out->rank = e.rank;
        out->removed = e.removed ? 1 : 0;
        out->is_poisoned = e.is_poisoned ? (*e.is_poisoned ? 1 : 0) : -1;
        return BDL_OK;
    });
}

size_t bdl_report_removed_count(const bdl_report* report) {
    return report ? report->value.removed_ids.size() : 0;
}

size_t bdl_report_removed_ids(const bdl_report* report, int64_t* ids, size_t capacity) {
    if (!report || !ids) return 0;
    const auto& r = report->value.removed_ids;
    const std::size_t n = std::min(capacity, r.size());
    std::copy(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(n), ids);
    return n;
}

bdl_status bdl_report_recall(const bdl_report* report, double* recall) {
    return guarded([&] {
        BDL_REQUIRE(report && recall, "report and recall must be non-null");
        if (!report->value.recall) return set_error(BDL_ERR_NOT_APPLICABLE, "recall is not applicable");
        *recall = *report->value.recall;
        return BDL_OK;
    });
}

bdl_status bdl_report_write_histogram(const bdl_report* report, const char* path) {
    return guarded([&] {
        BDL_REQUIRE(report && path, "report and path must be non-null");
        bdl::write_histogram_csv(report->value, path);
        return BDL_OK;
    });
}

void bdl_report_free(bdl_report* report) { delete report; }

bdl_status bdl_k_sweep(const bdl_reprs* reprs, const bdl_detect_options* options, const bdl_dataset* ground_truth,
                       const size_t* k_values, size_t count, double* recalls) {
    return guarded([&] {
        BDL_REQUIRE(reprs && options && ground_truth && (count == 0 || (k_values && recalls)),
                    "reprs, options, ground_truth, k_values and recalls must be non-null");
        std::vector<std::size_t> ks(k_values, k_values + count);
        const auto points = bdl::k_sweep(reprs->value, ks, to_detect(*options), ground_truth->value);
        const double nan = std::numeric_limits<double>::quiet_NaN();
        for (std::size_t i = 0; i < count; ++i) {
            recalls[i] = nan;
            for (const auto& p : points)
                if (p.k == ks[i] && p.recall) recalls[i] = *p.recall;
        }
        return BDL_OK;
    });
}

// metrics

bdl_status bdl_evaluate(const bdl_model* model, const bdl_model* retrained, const bdl_dataset* test,
                        const bdl_backdoor_spec* spec, uint64_t trigger_seed, bdl_eval_report* out) {
    return guarded([&] {
        BDL_REQUIRE(model && test && spec && out, "model, test, spec and out must be non-null");
        const auto r = bdl::full_evaluation(model->value, retrained ? &retrained->value : nullptr, test->value,
                                            to_spec(*spec), trigger_seed);
        const double nan = std::numeric_limits<double>::quiet_NaN();
        out->test_f1 = r.test_f1;
        out->precision = r.precision;
        out->recall = r.recall_metric;
        out->bd_rate = r.bd_rate;
        out->has_post = r.post_bd_rate ? 1 : 0;
        out->post_test_f1 = r.post_test_f1.value_or(nan);
        out->post_precision = r.post_precision.value_or(nan);
        out->post_recall = r.post_recall_metric.value_or(nan);
        out->post_bd_rate = r.post_bd_rate.value_or(nan);
        out->evaluated = r.evaluated;
        return BDL_OK;
    });
}

} // extern "C"
