#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "saepipe/grammar.hpp"
#include "saepipe/numkit.hpp"

// Tiny decoder-only autoregressive LM: pre-norm blocks, learned positions,
// GELU MLP, zero-initialised unembedding. Exposes the residual stream
// after any block for activation dumping and additive steering.

namespace saepipe::hostlm {

using numkit::Mat;

struct LmConfig {
    int vocab = grammar::kVocab;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int context = 96;
    int bos_id = grammar::kBos;
    int eos_id = grammar::kEos;
    double lr = 1e-3;
    int batch = 16;
    int epochs = 3;
    double val_frac = 0.05;

    int d_head() const { return d_model / n_heads; }
    int d_ff() const { return 4 * d_model; }
    void validate() const;
};

struct LmBlock {
    Mat ln1_g, ln1_b;
    Mat w_qkv, b_qkv;  // [d, 3d], [1, 3d]
    Mat w_o, b_o;      // [d, d], [1, d]
    Mat ln2_g, ln2_b;
    Mat w_fc, b_fc;      // [d, 4d], [1, 4d]
    Mat w_proj, b_proj;  // [4d, d], [1, d]
};

struct LmParams {
    LmConfig cfg;
    Mat tok_emb;  // [vocab, d]
    Mat pos_emb;  // [context, d]
    std::vector<LmBlock> blocks;
    Mat lnf_g, lnf_b;
    Mat w_out, b_out;  // [d, vocab], [1, vocab]

    // Fixed iteration order shared by gradients and optimizer state.
    void for_each_param(const std::function<void(const std::string&, Mat&)>& fn);
    void for_each_param(const std::function<void(const std::string&, const Mat&)>& fn) const;
};

LmParams init_lm(const LmConfig& cfg, uint64_t seed);
// Same shapes, all zeros; used as the gradient accumulator.
LmParams zeros_like(const LmParams& p);

// Additive intervention on the residual stream right after block `layer`.
struct SteerHook {
    int layer = 0;
    std::vector<double> dir;  // d_model
    double alpha = 0.0;
};

struct ForwardResult {
    Mat logits;  // [T, vocab]
    Mat hidden;  // [T, d_model], residual state after block `layer`
};

// Teacher-forced forward. `hook`, when present, is applied at its own
// layer for every position; `hidden` is read after the hook runs.
ForwardResult forward_hooked(const LmParams& params, const std::vector<int>& tokens, int layer,
                             const SteerHook* hook = nullptr);

// Mean next-token cross-entropy over the sequence.
double sequence_loss(const LmParams& params, const std::vector<int>& tokens);
double mean_loss(const LmParams& params, const std::vector<std::vector<int>>& seqs);

struct TrainLog {
    std::vector<long> steps;
    std::vector<double> step_loss;        // mean CE of each optimizer step
    std::vector<double> epoch_val_loss;   // one entry per epoch
    double unigram_baseline = 0.0;        // entropy of the target marginal
    double final_val_loss = 0.0;
};

struct TrainedLm {
    LmParams params;
    TrainLog log;
};

// Adam on mean token CE. Sequences longer than the context are rejected
// up front. Validation split is the tail val_frac of the corpus, held
// out before shuffling.
TrainedLm train_lm(const std::vector<std::vector<int>>& corpus, const LmConfig& cfg, uint64_t seed);

// Finite-difference target: mean CE of one sequence with explicit
// gradient accumulation. Exposed for the oracle tests.
double loss_and_grads(const LmParams& params, const std::vector<int>& tokens, LmParams& grads);

// Samples n sequences from BOS until EOS or the context limit.
// temperature 0 means argmax. Per-sequence rngs derive from seed, so
// the call parallelizes without changing output.
std::vector<std::vector<int>> generate(const LmParams& params, int n, double temperature,
                                       uint64_t seed, const SteerHook* hook = nullptr);

// Incremental single-sequence forward used by generate; exposed so tests
// can pin it against forward_hooked bit for bit.
std::vector<int> generate_one(const LmParams& params, double temperature, numkit::Rng& rng,
                              const SteerHook* hook = nullptr);

struct ActivationMetaRow {
    int seq_id = 0;
    int position = 0;  // token index within the sequence
    char region = 'B';
    int v_id = 0;
    int j_id = 0;
};

struct ActivationSet {
    int n_rows = 0;
    int d_model = 0;
    std::vector<float> data;  // row-major
    std::vector<ActivationMetaRow> meta;

    std::span<const float> row(int r) const {
        return {data.data() + static_cast<size_t>(r) * d_model, static_cast<size_t>(d_model)};
    }
};

// Residual-stream rows at `layer` for every non-special token, f32
// little-endian payload with a CSV sidecar keyed by row index.
void dump_activations(const LmParams& params, const std::vector<grammar::LabeledSequence>& corpus,
                      int layer, const std::string& path, const std::string& header_comment);
ActivationSet read_activations(const std::string& path);

void save_lm(const LmParams& params, const std::string& path);
LmParams load_lm(const std::string& path);

}  // namespace saepipe::hostlm
