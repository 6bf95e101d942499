/*
 * backdoorlab C API
 *
 * Dead-code backdoor installation in a seq2seq code-summarization model and
 * spectral-signature detection of the poisoned training points.
 *
 * Every object is an opaque handle released with its matching *_free
 * function. Functions return a bdl_status; on failure a description of the
 * last error on the calling thread is available from bdl_last_error().
 * Output handles are only written on success.
 */
#ifndef BACKDOORLAB_H
#define BACKDOORLAB_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(BDL_BUILDING_LIBRARY)
#    define BDL_API __declspec(dllexport)
#  else
#    define BDL_API __declspec(dllimport)
#  endif
#else
#  define BDL_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum bdl_status {
    BDL_OK = 0,
    BDL_ERR_INVALID_ARGUMENT = 1,
    BDL_ERR_IO = 2,
    BDL_ERR_PARSE = 3,
    BDL_ERR_NUMERIC = 4,
    BDL_ERR_CONVERGENCE = 5,
    BDL_ERR_NOT_APPLICABLE = 6,
    BDL_ERR_BUFFER_TOO_SMALL = 7,
    BDL_ERR_INTERNAL = 8
} bdl_status;

typedef struct bdl_dataset bdl_dataset;
typedef struct bdl_model bdl_model;
typedef struct bdl_reprs bdl_reprs;
typedef struct bdl_report bdl_report;

BDL_API const char* bdl_version(void);
BDL_API const char* bdl_status_name(bdl_status status);
/* Message of the last failed call on this thread; "" when none. */
BDL_API const char* bdl_last_error(void);

/* Independent seed for a named stream ("corpus", "poison", ...) of `seed`. */
BDL_API uint64_t bdl_sub_seed(uint64_t seed, const char* stream);

/* ---- corpus ------------------------------------------------------------ */

/* Loads a JSONL dataset. `skipped` (nullable) receives the number of records
 * dropped for having an empty name. */
BDL_API bdl_status bdl_dataset_load_jsonl(const char* path, bdl_dataset** out, size_t* skipped);
BDL_API bdl_status bdl_dataset_save_jsonl(const bdl_dataset* dataset, const char* path);
/* Synthetic Python-like corpus; ids start at `first_id`. */
BDL_API bdl_status bdl_dataset_generate(size_t n, uint64_t seed, int64_t first_id, bdl_dataset** out);
BDL_API size_t bdl_dataset_size(const bdl_dataset* dataset);
BDL_API size_t bdl_dataset_poisoned_count(const bdl_dataset* dataset);
/* Copy of `dataset` without the listed ids. */
BDL_API bdl_status bdl_dataset_without(const bdl_dataset* dataset, const int64_t* ids, size_t count,
                                       bdl_dataset** out);
BDL_API void bdl_dataset_free(bdl_dataset* dataset);

/* Subtokens of an identifier, joined by single spaces. On
 * BDL_ERR_BUFFER_TOO_SMALL `*needed` holds the required size including NUL. */
BDL_API bdl_status bdl_subtokenize(const char* identifier, char* buffer, size_t buffer_size, size_t* needed);
/* Tokens of a code string, joined by single spaces. */
BDL_API bdl_status bdl_tokenize(const char* code, char* buffer, size_t buffer_size, size_t* needed);

/* ---- backdoor ---------------------------------------------------------- */

typedef enum bdl_trigger_kind { BDL_TRIGGER_FIXED = 0, BDL_TRIGGER_GRAMMATICAL = 1 } bdl_trigger_kind;
typedef enum bdl_target_kind { BDL_TARGET_STATIC = 0, BDL_TARGET_DYNAMIC = 1 } bdl_target_kind;

typedef struct bdl_backdoor_spec {
    bdl_trigger_kind trigger;
    bdl_target_kind target;
    const char* static_target;   /* space-separated subtokens; NULL = "create entry" */
    const char* dynamic_prefix;  /* NULL = "new" */
    double epsilon;              /* [0, 0.5); 0 disables poisoning */
} bdl_backdoor_spec;

typedef struct bdl_poison_stats {
    size_t clean_count;
    size_t poisoned_count;
    size_t missing_signature;
    double copy_probability;
    double realized_epsilon;
} bdl_poison_stats;

BDL_API void bdl_backdoor_spec_default(bdl_backdoor_spec* spec);
/* `stats` is nullable. */
BDL_API bdl_status bdl_dataset_poison(const bdl_dataset* clean, const bdl_backdoor_spec* spec, uint64_t seed,
                                      bdl_dataset** out, bdl_poison_stats* stats);
/* Renders one trigger statement; `seed` is ignored for fixed triggers. */
BDL_API bdl_status bdl_trigger_render(bdl_trigger_kind kind, uint64_t seed, char* buffer, size_t buffer_size,
                                      size_t* needed);
/* `*dead` = 1 when interval analysis proves the statement's guard false. */
BDL_API bdl_status bdl_trigger_verify_dead(const char* statement, int* dead);

/* ---- model ------------------------------------------------------------- */

typedef struct bdl_model_config {
    size_t embed_dim;
    size_t hidden_dim;
    size_t max_decode_len;
    size_t epochs;
    size_t batch_size;
    size_t input_vocab_cap;
    size_t output_vocab_cap;
    size_t max_input_len;
    double learning_rate;
    double grad_clip;
    uint64_t seed;
} bdl_model_config;

typedef void (*bdl_epoch_callback)(size_t epoch, double loss, void* user_data);

BDL_API void bdl_model_config_default(bdl_model_config* config);
/* Builds vocabularies from `train`, initialises and trains. */
BDL_API bdl_status bdl_model_train(const bdl_dataset* train, const bdl_model_config* config,
                                   bdl_epoch_callback on_epoch, void* user_data, bdl_model** out);
BDL_API bdl_status bdl_model_save(const bdl_model* model, const char* path);
BDL_API bdl_status bdl_model_load(const char* path, bdl_model** out);
BDL_API void bdl_model_free(bdl_model* model);
/* Greedy prediction for a code string; subtokens joined by spaces. */
BDL_API bdl_status bdl_model_predict(const bdl_model* model, const char* code, char* buffer, size_t buffer_size,
                                     size_t* needed);
/* Max relative error between backprop and central-difference gradients on
 * the first `batch_limit` samples of `dataset`. */
BDL_API bdl_status bdl_model_gradient_check(const bdl_model* model, const bdl_dataset* dataset,
                                            size_t batch_limit, double step, size_t min_params,
                                            double* max_relative_error);

/* ---- representations --------------------------------------------------- */

typedef enum bdl_repr_kind {
    BDL_REPR_ENCODER_OUTPUT = 0,
    BDL_REPR_CONTEXT_VECTORS = 1,
    BDL_REPR_MEAN_CONTEXT = 2,
    BDL_REPR_DECODER_STATES = 3,
    BDL_REPR_MEAN_DECODER_STATE = 4,
    BDL_REPR_MEAN_INPUT_EMBEDDING = 5
} bdl_repr_kind;

/* Accepts "encoder-output", "context_vectors", ... */
BDL_API bdl_status bdl_repr_kind_parse(const char* name, bdl_repr_kind* out);
BDL_API const char* bdl_repr_kind_name(bdl_repr_kind kind);

BDL_API bdl_status bdl_model_extract(const bdl_model* model, const bdl_dataset* dataset, bdl_repr_kind kind,
                                     bdl_reprs** out);
BDL_API bdl_status bdl_reprs_save_csv(const bdl_reprs* reprs, const char* path);
BDL_API bdl_status bdl_reprs_load_csv(const char* path, bdl_repr_kind kind, bdl_reprs** out);
BDL_API size_t bdl_reprs_dim(const bdl_reprs* reprs);
BDL_API size_t bdl_reprs_rows(const bdl_reprs* reprs);
BDL_API void bdl_reprs_free(bdl_reprs* reprs);

/* ---- detector ---------------------------------------------------------- */

typedef enum bdl_score_mode { BDL_SCORE_ALG1 = 0, BDL_SCORE_TOPK = 1 } bdl_score_mode;

typedef struct bdl_detect_options {
    size_t k;
    double epsilon;
    bdl_score_mode mode;
    uint64_t seed;
    double tol;
    size_t max_iterations;
} bdl_detect_options;

typedef struct bdl_report_entry {
    int64_t id;
    double score;
    size_t rank;
    int removed;
    int is_poisoned;   /* -1 when unknown */
} bdl_report_entry;

BDL_API void bdl_detect_options_default(bdl_detect_options* options);
/* `ground_truth` (nullable) is consulted only to fill is_poisoned and recall. */
BDL_API bdl_status bdl_detect(const bdl_reprs* reprs, const bdl_detect_options* options,
                              const bdl_dataset* ground_truth, bdl_report** out);
BDL_API bdl_status bdl_report_save_jsonl(const bdl_report* report, const char* path);
BDL_API bdl_status bdl_report_load_jsonl(const char* path, bdl_report** out);
BDL_API size_t bdl_report_size(const bdl_report* report);
BDL_API bdl_status bdl_report_entry_at(const bdl_report* report, size_t rank, bdl_report_entry* out);
BDL_API size_t bdl_report_removed_count(const bdl_report* report);
/* Copies up to `capacity` removed ids; returns the number copied. */
BDL_API size_t bdl_report_removed_ids(const bdl_report* report, int64_t* ids, size_t capacity);
/* BDL_ERR_NOT_APPLICABLE when there is no ground truth or nothing poisoned. */
BDL_API bdl_status bdl_report_recall(const bdl_report* report, double* recall);
/* "score,is_poisoned" CSV; fails without ground truth. */
BDL_API bdl_status bdl_report_write_histogram(const bdl_report* report, const char* path);
BDL_API void bdl_report_free(bdl_report* report);

/* Recall per k from one shared basis. recalls[i] is NaN when k_values[i] was
 * skipped (k > min(rows, dim)) or recall is not applicable. */
BDL_API bdl_status bdl_k_sweep(const bdl_reprs* reprs, const bdl_detect_options* options,
                               const bdl_dataset* ground_truth, const size_t* k_values, size_t count,
                               double* recalls);

/* ---- metrics ----------------------------------------------------------- */

typedef struct bdl_eval_report {
    double test_f1;
    double precision;
    double recall;
    double bd_rate;
    int has_post;
    double post_test_f1;
    double post_precision;
    double post_recall;
    double post_bd_rate;
    size_t evaluated;
} bdl_eval_report;

/* `retrained` is nullable. Test inputs are triggered on the fly with triggers
 * seeded from `trigger_seed`. */
BDL_API bdl_status bdl_evaluate(const bdl_model* model, const bdl_model* retrained, const bdl_dataset* test,
                                const bdl_backdoor_spec* spec, uint64_t trigger_seed, bdl_eval_report* out);

#ifdef __cplusplus
}
#endif

#endif /* BACKDOORLAB_H */
