#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "saepipe/hostlm.hpp"
#include "saepipe/numkit.hpp"

// TopK and Ordered sparse autoencoders. The Ordered variant scores every
// prefix truncation m with a strictly decreasing weight, sweeping m
// incrementally so the exhaustive pass stays O(d_sae * d_in) plus support
// recomputations, and its gradients use per-latent suffix accumulators.

namespace saepipe::sae {

using numkit::Mat;
using numkit::Vec;

enum class SaeVariant { topk, ordered };
enum class WeightScheme { harmonic, geometric };

struct SaeConfig {
    int d_in = 64;
    int r = 32;  // expansion factor, d_sae = d_in * r
    int k = 32;
    SaeVariant variant = SaeVariant::topk;
    WeightScheme scheme = WeightScheme::harmonic;
    double gamma = 0.5;  // geometric ratio
    double c = 0.0;      // L1 coefficient in the TopK loss
    int batch = 8;
    int epochs = 1;
    double lr = 0.0;  // 0 means use the variant rule
    // Literal linear truncations: no ReLU, biases, or top-k inside the
    // per-m reconstruction.
    bool linear_truncations = false;
    int m_stride = 1;  // evaluate every m-th truncation, 1 = exhaustive
    int log_every = 200;

    int d_sae() const { return d_in * r; }
    // topk: 2e-4 / sqrt(d_sae / 16384); ordered: fixed 1e-4.
    double learning_rate() const;
    void validate() const;
};

struct SaeParams {
    SaeConfig cfg;
    Mat w_enc;  // [d_sae, d_in]
    Mat b_enc;  // [1, d_sae]
    Mat w_dec;  // [d_sae, d_in], row i is the decoder vector d(i)
    Mat b_dec;  // [1, d_in]
};

// Kaiming-uniform encoder; decoder starts as the row-normalised encoder.
SaeParams init_sae(const SaeConfig& cfg, uint64_t seed);

struct SparseLatents {
    std::vector<int> indices;  // strictly increasing, size k'
    Vec values;                // aligned with indices, >= 0
    int d_sae = 0;
};

// z = top-k of ReLU(W_enc x + b_enc); ties keep the lower index, so
// all-zero inputs select the first k latents with zero values.
SparseLatents encode_topk(const SaeParams& params, std::span<const double> x);
// Same encoder restricted to the first m latents with k' = min(k, m).
SparseLatents encode_truncated(const SaeParams& params, std::span<const double> x, int m);

// b_dec + sum z_i d(i), accumulated in ascending index order.
Vec decode(const SaeParams& params, const SparseLatents& z);

struct LossBreakdown {
    double recon = 0.0;
    double sparsity_term = 0.0;
    Vec per_truncation;  // Ordered: L_m including its weight

    double total() const { return recon + sparsity_term; }
};

LossBreakdown topk_loss(const SaeParams& params, std::span<const double> x);

struct TruncationWeights {
    Vec p;  // strictly decreasing, sums to 1
};

TruncationWeights truncation_weights(int d_sae, WeightScheme scheme, double gamma = 0.5);

// recon = sum_m p(m) ||x - xhat_m||^2 over the swept truncations.
LossBreakdown ordered_loss(const SaeParams& params, std::span<const double> x,
                           const TruncationWeights& weights);
// Unweighted ||x - xhat_m||^2 for every m (ignores m_stride).
Vec ordered_recon_curve(const SaeParams& params, std::span<const double> x);
// The truncation-m reconstruction xhat_m itself.
Vec truncation_recon(const SaeParams& params, std::span<const double> x, int m);

struct SaeGrads {
    Mat w_enc, b_enc, w_dec, b_dec;

    explicit SaeGrads(const SaeConfig& cfg)
        : w_enc(cfg.d_sae(), cfg.d_in),
          b_enc(1, cfg.d_sae()),
          w_dec(cfg.d_sae(), cfg.d_in),
          b_dec(1, cfg.d_in) {}
    void zero();
};

// Mean-batch loss; `grads` is overwritten with the mean gradients
// (top-k support held constant, straight-through). `fire_counts`, when
// given, is incremented for every selected latent with a positive value.
LossBreakdown grad_topk(const SaeParams& params, const Mat& batch, SaeGrads& grads,
                        std::vector<long>* fire_counts = nullptr);
LossBreakdown grad_ordered(const SaeParams& params, const Mat& batch,
                           const TruncationWeights& weights, SaeGrads& grads,
                           std::vector<long>* fire_counts = nullptr);

struct SaeTrainRow {
    long step = 0;
    double recon = 0.0;
    double sparsity_term = 0.0;
    double dead_fraction = 0.0;
    double wallclock = 0.0;  // 0 unless wallclock recording is on
};

struct SaeTrainLog {
    std::vector<SaeTrainRow> rows;
    std::vector<double> step_loss;
    double initial_loss = 0.0;
    double final_smoothed_loss = 0.0;
};

struct TrainedSae {
    SaeParams params;
    SaeTrainLog log;
};

// Streaming Adam over shuffled activation rows. Bit-reproducible for a
// fixed seed when wallclock recording is off.
TrainedSae train_sae(const SaeConfig& cfg, const hostlm::ActivationSet& acts, uint64_t seed,
                     bool record_wallclock = false);
// Same loop over an in-memory f64 row matrix (tests, synthetic data).
TrainedSae train_sae_rows(const SaeConfig& cfg, const Mat& rows, uint64_t seed,
                          bool record_wallclock = false);

void save_sae(const SaeParams& params, const std::string& path);
SaeParams load_sae(const std::string& path);

}  // namespace saepipe::sae
