#pragma once

#include "core/corpus.hpp"
#include "core/params.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

namespace bdl {

struct ModelConfig {
    std::size_t embed_dim = 64;
    std::size_t hidden_dim = 64;   // per encoder direction; the decoder uses 2x
    std::size_t max_decode_len = 8;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    std::size_t input_vocab_cap = 2000;
    std::size_t output_vocab_cap = 500;
    std::size_t max_input_len = default_max_input_len;
    double learning_rate = 0.002;
    double grad_clip = 5.0;   // global-norm clip; 0 disables
    std::uint64_t seed = 1;

    void validate() const;
};

// Parameters of the attention seq2seq model together with the vocabularies
// they were sized for.
//
// Encoder: one bidirectional LSTM layer over input embeddings. Decoder: an
// LSTM of width 2*hidden_dim initialised from the concatenated final encoder
// states. At each step additive attention over the encoder states, scored
// from the previous decoder state, gives a context vector; the decoder reads
// [previous subtoken embedding; context; previous state] and the output
// layer reads [state; context].
class Model {
public:
    struct Tensors {
        std::size_t input_embedding, output_embedding;
        std::size_t enc_fwd_w, enc_fwd_b, enc_bwd_w, enc_bwd_b;
        std::size_t att_w, att_u, att_v;
        std::size_t dec_w, dec_b;
        std::size_t out_w, out_b;
    };

    // Allocates the tensor layout with all parameters zero.
    Model(ModelConfig config, Vocabularies vocabs);

    const ModelConfig& config() const { return config_; }
    const Vocabularies& vocabs() const { return vocabs_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }
    const Tensors& tensors() const { return tensors_; }

    std::size_t embed_dim() const { return config_.embed_dim; }
    std::size_t hidden_dim() const { return config_.hidden_dim; }
    std::size_t decoder_dim() const { return 2 * config_.hidden_dim; }

    EncodedSample encode(const CodeSample& sample) const;

private:
    ModelConfig config_;
    Vocabularies vocabs_;
    ParameterSet params_;
    Tensors tensors_{};
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation from config.seed.
Model init_model(const ModelConfig& config, Vocabularies vocabs);

// Internal representations captured during one pass.
struct SampleRepresentations {
    Eigen::VectorXd final_hidden;            // [h_fwd(T-1); h_bwd(0)]
    Eigen::VectorXd final_cell;              // [c_fwd(T-1); c_bwd(0)]
    std::vector<Eigen::VectorXd> contexts;   // one per decoder step
    std::vector<Eigen::VectorXd> decoder_states;
    Eigen::VectorXd mean_input_embedding;
};

struct ForwardResult {
    double loss = 0.0;                                   // mean per-step cross-entropy
    std::vector<Eigen::VectorXd> distributions;          // softmax output per step
    std::vector<Eigen::VectorXd> attention;              // weights over input positions per step
    SampleRepresentations representations;
};

// Teacher-forced pass over `sample.target` (BOS ... EOS). When `grads` is
// given, the gradient of `grad_scale * loss` is accumulated into it.
ForwardResult forward(const Model& model, const EncodedSample& sample, ParameterSet* grads = nullptr,
                      double grad_scale = 1.0);

struct Decoded {
    std::vector<int> ids;   // predicted ids, EOS excluded
    bool stopped_on_eos = false;
    std::vector<Eigen::VectorXd> attention;
    SampleRepresentations representations;   // contexts include the EOS step
};

// Greedy decoding from BOS until EOS or max_decode_len steps; ties in the
// argmax go to the lowest index.
Decoded greedy_decode(const Model& model, const std::vector<int>& input);

Tokens predict(const Model& model, const CodeSample& sample);

struct TrainLog {
    std::vector<double> epoch_loss;   // mean training loss seen during each epoch
    double initial_loss = 0.0;        // mean loss over the data before the first update
    std::size_t steps = 0;
};

using EpochCallback = std::function<void(std::size_t epoch, double loss)>;

// Mini-batch Adam on mean per-step cross-entropy with global-norm gradient
// clipping. Aborts with ErrorCode::numeric on a non-finite loss or parameter.
TrainLog train(Model& model, const Dataset& dataset, const EpochCallback& on_epoch = {});

// Builds vocabularies from `dataset`, initialises and trains.
Model fit(const Dataset& dataset, const ModelConfig& config, TrainLog* log = nullptr,
          const EpochCallback& on_epoch = {});

double mean_loss(const Model& model, const std::vector<EncodedSample>& samples);

struct GradientCheckResult {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    std::vector<std::pair<std::string, double>> per_group;   // group -> max relative error
    std::vector<std::string> unresolved;   // tensors with no gradient above the probe floor
};

// Compares backprop gradients with central differences of step `h` for at
// least `min_params` parameters. Probes are drawn from coordinates whose
// gradient is at least 1e-6; tensors without any are listed in `unresolved`
// unless that would leave their group unchecked.
GradientCheckResult gradient_check(const Model& model, const std::vector<EncodedSample>& batch, double h,
                                   std::size_t min_params = 200, std::uint64_t seed = 0);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

} // namespace bdl
