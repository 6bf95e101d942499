#include "core/model.hpp"

#include "core/error.hpp"
#include "core/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace bdl {

using Eigen::Index;
using Eigen::VectorXd;

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v < 1) fail(ErrorCode::invalid_argument, std::string("model config: ") + name + " must be >= 1");
    };
    positive(embed_dim, "embed_dim");
    positive(hidden_dim, "hidden_dim");
    positive(max_decode_len, "max_decode_len");
    positive(batch_size, "batch_size");
    positive(max_input_len, "max_input_len");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        fail(ErrorCode::invalid_argument, "model config: learning_rate must be finite and >= 0");
    if (!(grad_clip >= 0.0)) fail(ErrorCode::invalid_argument, "model config: grad_clip must be >= 0");
}

Model::Model(ModelConfig config, Vocabularies vocabs) : config_(config), vocabs_(std::move(vocabs)) {
    config_.validate();
    const std::size_t E = config_.embed_dim;
    const std::size_t H = config_.hidden_dim;
    const std::size_t D = 2 * H;
    const std::size_t vin = vocabs_.input.size();
    const std::size_t vout = vocabs_.output.size();

    tensors_.input_embedding = params_.add("embedding.input", "embedding", vin, E);
    tensors_.output_embedding = params_.add("embedding.output", "embedding", vout, E);
    tensors_.enc_fwd_w = params_.add("encoder.forward.weight", "encoder", 4 * H, E + H);
    tensors_.enc_fwd_b = params_.add("encoder.forward.bias", "encoder", 4 * H, 1);
    tensors_.enc_bwd_w = params_.add("encoder.backward.weight", "encoder", 4 * H, E + H);
    tensors_.enc_bwd_b = params_.add("encoder.backward.bias", "encoder", 4 * H, 1);
    tensors_.att_w = params_.add("attention.query", "attention", D, D);
    tensors_.att_u = params_.add("attention.key", "attention", D, D);
    tensors_.att_v = params_.add("attention.score", "attention", D, 1);
    tensors_.dec_w = params_.add("decoder.weight", "decoder", 4 * D, E + 2 * D);
    tensors_.dec_b = params_.add("decoder.bias", "decoder", 4 * D, 1);
    tensors_.out_w = params_.add("projection.weight", "projection", vout, 2 * D);
    tensors_.out_b = params_.add("projection.bias", "projection", vout, 1);
}

EncodedSample Model::encode(const CodeSample& sample) const {
    return bdl::encode(sample, vocabs_, config_.max_input_len);
}

Model init_model(const ModelConfig& config, Vocabularies vocabs) {
    Model model(config, std::move(vocabs));
    const auto& t = model.tensors();
    Rng rng(sub_seed(config.seed, "init"));
    auto& p = model.params();
    auto fill = [&](std::size_t tensor, std::size_t fan_in) {
        const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
        auto v = p.vector(tensor);
        for (Index i = 0; i < v.size(); ++i) v[i] = rng.uniform(-s, s);
    };
    const std::size_t E = config.embed_dim;
    const std::size_t H = config.hidden_dim;
    const std::size_t D = 2 * H;
    fill(t.input_embedding, E);
    fill(t.output_embedding, E);
    fill(t.enc_fwd_w, E + H);
    fill(t.enc_fwd_b, E + H);
    fill(t.enc_bwd_w, E + H);
    fill(t.enc_bwd_b, E + H);
    fill(t.att_w, D);
    fill(t.att_u, D);
    fill(t.att_v, D);
    fill(t.dec_w, E + 2 * D);
    fill(t.dec_b, E + 2 * D);
    fill(t.out_w, 2 * D);
    fill(t.out_b, 2 * D);
    return model;
}

namespace {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Activated gates [i f g o] and states of one LSTM direction, indexed by
// input position regardless of the direction of travel.
struct LstmTrace {
    RowMatrix gates;
    RowMatrix cell;
    RowMatrix hidden;
    RowMatrix tanh_cell;
};

void lstm_run(const ConstMatrixView& w, const ConstVectorView& b, const RowMatrix& x, bool reverse,
              LstmTrace& tr) {
    const Index T = x.rows();
    const Index E = x.cols();
    const Index H = w.rows() / 4;
    RowMatrix pre = x * w.leftCols(E).transpose();
    pre.rowwise() += b.transpose();
    tr.gates.resize(T, 4 * H);
    tr.cell.resize(T, H);
    tr.hidden.resize(T, H);
    tr.tanh_cell.resize(T, H);

    VectorXd h = VectorXd::Zero(H);
    VectorXd c = VectorXd::Zero(H);
    VectorXd z(4 * H);
    for (Index s = 0; s < T; ++s) {
        const Index t = reverse ? T - 1 - s : s;
        z.noalias() = w.rightCols(H) * h;
        z += pre.row(t).transpose();
        for (Index k = 0; k < H; ++k) {
            const double i = sigmoid(z[k]);
            const double f = sigmoid(z[H + k]);
            const double g = std::tanh(z[2 * H + k]);
            const double o = sigmoid(z[3 * H + k]);
            c[k] = f * c[k] + i * g;
            const double tc = std::tanh(c[k]);
            h[k] = o * tc;
            tr.gates(t, k) = i;
            tr.gates(t, H + k) = f;
            tr.gates(t, 2 * H + k) = g;
            tr.gates(t, 3 * H + k) = o;
            tr.tanh_cell(t, k) = tc;
        }
        tr.cell.row(t) = c.transpose();
        tr.hidden.row(t) = h.transpose();
    }
}

// dh: gradient w.r.t. every hidden output; dc_last: gradient w.r.t. the cell
// state of the last step travelled. Accumulates into dw, db and dx.
void lstm_backprop(const ConstMatrixView& w, const RowMatrix& x, bool reverse, const LstmTrace& tr,
                   const RowMatrix& dh, const VectorXd& dc_last, MatrixView dw, VectorView db, RowMatrix& dx) {
    const Index T = x.rows();
    const Index E = x.cols();
    const Index H = w.rows() / 4;
    RowMatrix dz(T, 4 * H);
    RowMatrix h_prev = RowMatrix::Zero(T, H);
    VectorXd dh_next = VectorXd::Zero(H);
    VectorXd dc_next = dc_last;

    for (Index s = T - 1; s >= 0; --s) {
        const Index t = reverse ? T - 1 - s : s;
        const Index tp = reverse ? t + 1 : t - 1;
        const bool has_prev = s > 0;
        for (Index k = 0; k < H; ++k) {
            const double i = tr.gates(t, k);
            const double f = tr.gates(t, H + k);
            const double g = tr.gates(t, 2 * H + k);
            const double o = tr.gates(t, 3 * H + k);
            const double tc = tr.tanh_cell(t, k);
            const double c_prev = has_prev ? tr.cell(tp, k) : 0.0;
            const double dht = dh(t, k) + dh_next[k];
            const double d_o = dht * tc;
            const double dc = dc_next[k] + dht * o * (1.0 - tc * tc);
            dz(t, k) = dc * g * i * (1.0 - i);
            dz(t, H + k) = dc * c_prev * f * (1.0 - f);
            dz(t, 2 * H + k) = dc * i * (1.0 - g * g);
            dz(t, 3 * H + k) = d_o * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        dh_next.noalias() = w.rightCols(H).transpose() * dz.row(t).transpose();
        if (has_prev) h_prev.row(t) = tr.hidden.row(tp);
    }
    dw.leftCols(E).noalias() += dz.transpose() * x;
    dw.rightCols(H).noalias() += dz.transpose() * h_prev;
    db += dz.colwise().sum().transpose();
    dx.noalias() += dz * w.leftCols(E);
}

struct EncoderPass {
    RowMatrix embedded;   // T x E
    LstmTrace fwd;
    LstmTrace bwd;
    RowMatrix memory;     // T x D, rows [h_fwd(t); h_bwd(t)]
    RowMatrix keys;       // memory * U^T
    VectorXd init_state;  // s0 = [h_fwd(T-1); h_bwd(0)]
    VectorXd init_cell;
};

void check_ids(const std::vector<int>& ids, std::size_t vocab_size, const char* what) {
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab_size)
            fail(ErrorCode::invalid_argument, std::string(what) + " id " + std::to_string(id) +
                                                  " outside vocabulary of size " + std::to_string(vocab_size));
    }
}

EncoderPass run_encoder(const Model& model, const std::vector<int>& input) {
    if (input.empty()) fail(ErrorCode::invalid_argument, "encoded input is empty");
    check_ids(input, model.vocabs().input.size(), "input");
    const auto& p = model.params();
    const auto& t = model.tensors();
    const Index T = static_cast<Index>(input.size());
    const Index H = static_cast<Index>(model.hidden_dim());
    const auto emb = p.matrix(t.input_embedding);

    EncoderPass enc;
    enc.embedded.resize(T, emb.cols());
    for (Index i = 0; i < T; ++i) enc.embedded.row(i) = emb.row(input[static_cast<std::size_t>(i)]);
    lstm_run(p.matrix(t.enc_fwd_w), p.vector(t.enc_fwd_b), enc.embedded, false, enc.fwd);
    lstm_run(p.matrix(t.enc_bwd_w), p.vector(t.enc_bwd_b), enc.embedded, true, enc.bwd);

    enc.memory.resize(T, 2 * H);
    enc.memory.leftCols(H) = enc.fwd.hidden;
    enc.memory.rightCols(H) = enc.bwd.hidden;
    enc.keys.noalias() = enc.memory * p.matrix(t.att_u).transpose();

    enc.init_state.resize(2 * H);
    enc.init_state << enc.fwd.hidden.row(T - 1).transpose(), enc.bwd.hidden.row(0).transpose();
    enc.init_cell.resize(2 * H);
    enc.init_cell << enc.fwd.cell.row(T - 1).transpose(), enc.bwd.cell.row(0).transpose();
    return enc;
}

struct StepTrace {
    int prev_id = 0;
    VectorXd state_prev;
    VectorXd cell_prev;
    RowMatrix query;   // T x D, tanh(keys + W s_prev)
    VectorXd alpha;
    VectorXd context;
    VectorXd input;    // [embedding; context; state_prev]
    VectorXd gates;    // [i f g o]
    VectorXd cell;
    VectorXd tanh_cell;
    VectorXd state;
};

void decoder_step(const Model& model, const EncoderPass& enc, int prev_id, const VectorXd& state_prev,
                  const VectorXd& cell_prev, StepTrace& st) {
    const auto& p = model.params();
    const auto& t = model.tensors();
    const Index E = static_cast<Index>(model.embed_dim());
    const Index D = static_cast<Index>(model.decoder_dim());

    st.prev_id = prev_id;
    st.state_prev = state_prev;
    st.cell_prev = cell_prev;

    const VectorXd wq = p.matrix(t.att_w) * state_prev;
    st.query = enc.keys;
    st.query.rowwise() += wq.transpose();
    st.query = st.query.array().tanh().matrix();
    VectorXd scores = st.query * p.vector(t.att_v);
    scores.array() -= scores.maxCoeff();
    st.alpha = scores.array().exp().matrix();
    st.alpha /= st.alpha.sum();
    st.context.noalias() = enc.memory.transpose() * st.alpha;

    st.input.resize(E + 2 * D);
    st.input << p.matrix(t.output_embedding).row(prev_id).transpose(), st.context, state_prev;
    VectorXd z = p.vector(t.dec_b);
    z.noalias() += p.matrix(t.dec_w) * st.input;

    st.gates.resize(4 * D);
    st.cell.resize(D);
    st.tanh_cell.resize(D);
    st.state.resize(D);
    for (Index k = 0; k < D; ++k) {
        const double i = sigmoid(z[k]);
        const double f = sigmoid(z[D + k]);
        const double g = std::tanh(z[2 * D + k]);
        const double o = sigmoid(z[3 * D + k]);
        st.gates[k] = i;
        st.gates[D + k] = f;
        st.gates[2 * D + k] = g;
        st.gates[3 * D + k] = o;
        st.cell[k] = f * cell_prev[k] + i * g;
        st.tanh_cell[k] = std::tanh(st.cell[k]);
        st.state[k] = o * st.tanh_cell[k];
    }
}

VectorXd output_logits(const Model& model, const VectorXd& state, const VectorXd& context) {
    const auto& p = model.params();
    const auto& t = model.tensors();
    const auto w = p.matrix(t.out_w);
    const Index D = state.size();
    VectorXd logits = p.vector(t.out_b);
    logits.noalias() += w.leftCols(D) * state;
    logits.noalias() += w.rightCols(D) * context;
    return logits;
}

int argmax_lowest(const VectorXd& v) {
    Index best = 0;
    for (Index i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return static_cast<int>(best);
}

void capture_encoder(const EncoderPass& enc, SampleRepresentations& reps) {
    reps.final_hidden = enc.init_state;
    reps.final_cell = enc.init_cell;
    reps.mean_input_embedding = enc.embedded.colwise().mean().transpose();
}

} // namespace

ForwardResult forward(const Model& model, const EncodedSample& sample, ParameterSet* grads, double grad_scale) {
    if (sample.target.size() < 2) fail(ErrorCode::invalid_argument, "encoded target needs BOS and at least one step");
    check_ids(sample.target, model.vocabs().output.size(), "target");
    if (grads && !grads->same_layout(model.params()))
        fail(ErrorCode::invalid_argument, "gradient buffer layout does not match the model");

    const auto& p = model.params();
    const auto& t = model.tensors();
    const Index E = static_cast<Index>(model.embed_dim());
    const Index H = static_cast<Index>(model.hidden_dim());
    const Index D = static_cast<Index>(model.decoder_dim());
    const Index T = static_cast<Index>(sample.input.size());

    const EncoderPass enc = run_encoder(model, sample.input);
    const std::size_t L = sample.target.size() - 1;
    std::vector<StepTrace> steps(L);
    VectorXd state = enc.init_state;
    VectorXd cell = enc.init_cell;
    for (std::size_t j = 0; j < L; ++j) {
        decoder_step(model, enc, sample.target[j], state, cell, steps[j]);
        state = steps[j].state;
        cell = steps[j].cell;
    }

    RowMatrix features(static_cast<Index>(L), 2 * D);
    for (std::size_t j = 0; j < L; ++j) {
        features.row(static_cast<Index>(j)) << steps[j].state.transpose(), steps[j].context.transpose();
    }
    RowMatrix logits = features * p.matrix(t.out_w).transpose();
    logits.rowwise() += p.vector(t.out_b).transpose();

    ForwardResult result;
    RowMatrix probs(logits.rows(), logits.cols());
    double loss = 0.0;
    for (std::size_t j = 0; j < L; ++j) {
        const Index r = static_cast<Index>(j);
        const double mx = logits.row(r).maxCoeff();
        const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
        probs.row(r) = (logits.row(r).array() - lse).exp();
        loss -= logits(r, sample.target[j + 1]) - lse;
        result.distributions.push_back(probs.row(r).transpose());
        result.attention.push_back(steps[j].alpha);
        result.representations.contexts.push_back(steps[j].context);
        result.representations.decoder_states.push_back(steps[j].state);
    }
    result.loss = loss / static_cast<double>(L);
    capture_encoder(enc, result.representations);

    if (!grads) return result;

    // ---- backward ----
    const double scale = grad_scale / static_cast<double>(L);
    RowMatrix dlogits = probs;
    for (std::size_t j = 0; j < L; ++j) dlogits(static_cast<Index>(j), sample.target[j + 1]) -= 1.0;
    dlogits *= scale;

    grads->matrix(t.out_w).noalias() += dlogits.transpose() * features;
    grads->vector(t.out_b) += dlogits.colwise().sum().transpose();
    const RowMatrix dfeatures = dlogits * p.matrix(t.out_w);

    const auto dec_w = p.matrix(t.dec_w);
    const auto att_w = p.matrix(t.att_w);
    const auto att_v = p.vector(t.att_v);
    auto g_dec_w = grads->matrix(t.dec_w);
    auto g_dec_b = grads->vector(t.dec_b);
    auto g_att_w = grads->matrix(t.att_w);
    auto g_att_v = grads->vector(t.att_v);
    auto g_out_emb = grads->matrix(t.output_embedding);

    RowMatrix dmemory = RowMatrix::Zero(T, D);
    RowMatrix dkeys = RowMatrix::Zero(T, D);
    VectorXd dstate_next = VectorXd::Zero(D);
    VectorXd dcell_next = VectorXd::Zero(D);
    VectorXd dz(4 * D);

    for (std::size_t jj = L; jj-- > 0;) {
        const StepTrace& st = steps[jj];
        const Index r = static_cast<Index>(jj);
        const VectorXd dstate = dfeatures.row(r).head(D).transpose() + dstate_next;
        VectorXd dcontext = dfeatures.row(r).tail(D).transpose();

        for (Index k = 0; k < D; ++k) {
            const double i = st.gates[k];
            const double f = st.gates[D + k];
            const double g = st.gates[2 * D + k];
            const double o = st.gates[3 * D + k];
            const double tc = st.tanh_cell[k];
            const double d_o = dstate[k] * tc;
            const double dc = dcell_next[k] + dstate[k] * o * (1.0 - tc * tc);
            dz[k] = dc * g * i * (1.0 - i);
            dz[D + k] = dc * st.cell_prev[k] * f * (1.0 - f);
            dz[2 * D + k] = dc * i * (1.0 - g * g);
            dz[3 * D + k] = d_o * o * (1.0 - o);
            dcell_next[k] = dc * f;
        }
        g_dec_w.noalias() += dz * st.input.transpose();
        g_dec_b += dz;
        const VectorXd dinput = dec_w.transpose() * dz;
        g_out_emb.row(st.prev_id) += dinput.head(E).transpose();
        dcontext += dinput.segment(E, D);
        VectorXd dstate_prev = dinput.tail(D);

        // attention
        const VectorXd dalpha = enc.memory * dcontext;
        dmemory.noalias() += st.alpha * dcontext.transpose();
        const double dot = st.alpha.dot(dalpha);
        const VectorXd dscore = (st.alpha.array() * (dalpha.array() - dot)).matrix();
        g_att_v.noalias() += st.query.transpose() * dscore;
        RowMatrix dpre = dscore * att_v.transpose();
        dpre.array() *= 1.0 - st.query.array().square();
        dkeys += dpre;
        const VectorXd dwq = dpre.colwise().sum().transpose();
        g_att_w.noalias() += dwq * st.state_prev.transpose();
        dstate_prev.noalias() += att_w.transpose() * dwq;

        dstate_next = dstate_prev;
    }

    grads->matrix(t.att_u).noalias() += dkeys.transpose() * enc.memory;
    dmemory.noalias() += dkeys * p.matrix(t.att_u);

    RowMatrix dh_fwd = dmemory.leftCols(H);
    RowMatrix dh_bwd = dmemory.rightCols(H);
    dh_fwd.row(T - 1) += dstate_next.head(H).transpose();
    dh_bwd.row(0) += dstate_next.tail(H).transpose();
    const VectorXd dc_fwd = dcell_next.head(H);
    const VectorXd dc_bwd = dcell_next.tail(H);

    RowMatrix dx = RowMatrix::Zero(T, E);
    lstm_backprop(p.matrix(t.enc_fwd_w), enc.embedded, false, enc.fwd, dh_fwd, dc_fwd, grads->matrix(t.enc_fwd_w),
                  grads->vector(t.enc_fwd_b), dx);
    lstm_backprop(p.matrix(t.enc_bwd_w), enc.embedded, true, enc.bwd, dh_bwd, dc_bwd, grads->matrix(t.enc_bwd_w),
                  grads->vector(t.enc_bwd_b), dx);
    auto g_in_emb = grads->matrix(t.input_embedding);
    for (Index i = 0; i < T; ++i) g_in_emb.row(sample.input[static_cast<std::size_t>(i)]) += dx.row(i);

    return result;
}

Decoded greedy_decode(const Model& model, const std::vector<int>& input) {
    const EncoderPass enc = run_encoder(model, input);
    Decoded out;
    capture_encoder(enc, out.representations);
    VectorXd state = enc.init_state;
    VectorXd cell = enc.init_cell;
    int prev = Vocabulary::bos;
    StepTrace st;
    for (std::size_t j = 0; j < model.config().max_decode_len; ++j) {
        decoder_step(model, enc, prev, state, cell, st);
        const int next = argmax_lowest(output_logits(model, st.state, st.context));
        out.attention.push_back(st.alpha);
        out.representations.contexts.push_back(st.context);
        out.representations.decoder_states.push_back(st.state);
        if (next == Vocabulary::eos) {
            out.stopped_on_eos = true;
            break;
        }
        out.ids.push_back(next);
        prev = next;
        state = st.state;
        cell = st.cell;
    }
    return out;
}

Tokens predict(const Model& model, const CodeSample& sample) {
    const auto decoded =
        greedy_decode(model, encode_input(sample.code_tokens, model.vocabs().input, model.config().max_input_len));
    Tokens out;
    out.reserve(decoded.ids.size());
    for (int id : decoded.ids) out.push_back(model.vocabs().output.token_at(id));
    return out;
}

double mean_loss(const Model& model, const std::vector<EncodedSample>& samples) {
    if (samples.empty()) return 0.0;
    double total = 0.0;
    for (const auto& s : samples) total += forward(model, s).loss;
    return total / static_cast<double>(samples.size());
}

namespace {

struct Adam {
    explicit Adam(const ParameterSet& params) : m(params.zeros_like()), v(params.zeros_like()) {}

    void step(ParameterSet& params, const ParameterSet& grads, double lr) {
        ++t;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        auto& w = params.data();
        const auto& g = grads.data();
        auto& mm = m.data();
        auto& vv = v.data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            mm[i] = beta1 * mm[i] + (1.0 - beta1) * g[i];
            vv[i] = beta2 * vv[i] + (1.0 - beta2) * g[i] * g[i];
            w[i] -= lr * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + eps);
        }
    }

    ParameterSet m;
    ParameterSet v;
    std::size_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

} // namespace

TrainLog train(Model& model, const Dataset& dataset, const EpochCallback& on_epoch) {
    const ModelConfig& cfg = model.config();
    if (dataset.empty()) fail(ErrorCode::invalid_argument, "cannot train on an empty dataset");

    std::vector<EncodedSample> encoded;
    encoded.reserve(dataset.size());
    for (const auto& s : dataset.samples) encoded.push_back(model.encode(s));

    TrainLog log;
    log.initial_loss = mean_loss(model, encoded);

    ParameterSet grads = model.params().zeros_like();
    Adam adam(model.params());
    Rng shuffle_rng(sub_seed(cfg.seed, "shuffle"));
    std::vector<std::size_t> order(encoded.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

        double epoch_total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const double scale = 1.0 / static_cast<double>(end - start);
            grads.set_zero();
            for (std::size_t b = start; b < end; ++b) {
                const double loss = forward(model, encoded[order[b]], &grads, scale).loss;
                if (!std::isfinite(loss))
                    fail(ErrorCode::numeric, "non-finite loss at epoch " + std::to_string(epoch + 1) + ", sample id " +
                                                 std::to_string(dataset.samples[order[b]].id));
                epoch_total += loss;
            }
            if (cfg.grad_clip > 0.0) {
                const double norm = grads.flat().norm();
                if (!std::isfinite(norm))
                    fail(ErrorCode::numeric, "non-finite gradient at epoch " + std::to_string(epoch + 1));
                if (norm > cfg.grad_clip) grads.flat() *= cfg.grad_clip / norm;
            }
            adam.step(model.params(), grads, cfg.learning_rate);
            ++log.steps;
            if (!model.params().all_finite())
                fail(ErrorCode::numeric, "non-finite parameter after step " + std::to_string(log.steps));
        }
        const double mean = epoch_total / static_cast<double>(order.size());
        log.epoch_loss.push_back(mean);
        if (on_epoch) on_epoch(epoch + 1, mean);
    }
    return log;
}

Model fit(const Dataset& dataset, const ModelConfig& config, TrainLog* log, const EpochCallback& on_epoch) {
    Model model = init_model(config, build_vocab(dataset, config.input_vocab_cap, config.output_vocab_cap));
    TrainLog l = train(model, dataset, on_epoch);
    if (log) *log = std::move(l);
    return model;
}

namespace {

double batch_loss(const Model& model, const std::vector<EncodedSample>& batch) {
    double total = 0.0;
    for (const auto& s : batch) total += forward(model, s).loss;
    return total / static_cast<double>(batch.size());
}

} // namespace

namespace {
// Gradients below this are dominated by finite-difference roundoff.
constexpr double kGradientFloor = 1e-6;
}

GradientCheckResult gradient_check(const Model& model, const std::vector<EncodedSample>& batch, double h,
                                   std::size_t min_params, std::uint64_t seed) {
    if (batch.empty()) fail(ErrorCode::invalid_argument, "gradient check needs a nonempty batch");
    if (!(h > 0.0)) fail(ErrorCode::invalid_argument, "gradient check step must be positive");

    ParameterSet grads = model.params().zeros_like();
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (const auto& s : batch) forward(model, s, &grads, scale);

    Model probe = model;
    auto& data = probe.params().data();
    const auto& tensors = model.params().tensors();
    Rng rng(sub_seed(seed, "gradient-check"));

    std::vector<std::vector<std::size_t>> candidates(tensors.size());
    std::set<std::string> covered;
    for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
        const TensorInfo& info = tensors[ti];
        for (std::size_t idx = info.offset; idx < info.offset + info.size(); ++idx)
            if (std::abs(grads.data()[idx]) >= kGradientFloor) candidates[ti].push_back(idx);
        if (!candidates[ti].empty()) covered.insert(info.group);
    }
    GradientCheckResult result;
    // A group with nothing above the floor falls back to its nonzero gradients.
    for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
        const TensorInfo& info = tensors[ti];
        if (!candidates[ti].empty()) continue;
        if (!covered.count(info.group)) {
            for (std::size_t idx = info.offset; idx < info.offset + info.size(); ++idx)
                if (grads.data()[idx] != 0.0) candidates[ti].push_back(idx);
        }
        if (candidates[ti].empty()) result.unresolved.push_back(info.name);
    }
    const std::size_t eligible = static_cast<std::size_t>(
        std::count_if(candidates.begin(), candidates.end(), [](const auto& c) { return !c.empty(); }));
    if (eligible == 0) fail(ErrorCode::numeric, "gradient check found no nonzero gradients");
    const std::size_t per_tensor = (min_params + eligible - 1) / eligible;

    for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
        const TensorInfo& info = tensors[ti];
        if (candidates[ti].empty()) continue;
        for (std::size_t n = 0; n < per_tensor; ++n) {
            const std::size_t idx = candidates[ti][rng.below(candidates[ti].size())];

            const double original = data[idx];
            data[idx] = original + h;
            const double up = batch_loss(probe, batch);
            data[idx] = original - h;
            const double down = batch_loss(probe, batch);
            data[idx] = original;

            const double numeric = (up - down) / (2.0 * h);
            const double analytic = grads.data()[idx];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            const double rel = std::abs(analytic - numeric) / denom;
            result.max_relative_error = std::max(result.max_relative_error, rel);
            ++result.checked;

            auto it = std::find_if(result.per_group.begin(), result.per_group.end(),
                                   [&](const auto& e) { return e.first == info.group; });
            if (it == result.per_group.end()) {
                result.per_group.emplace_back(info.group, rel);
            } else {
                it->second = std::max(it->second, rel);
            }
        }
    }
    return result;
}

} // namespace bdl
