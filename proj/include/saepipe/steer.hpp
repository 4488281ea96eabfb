#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "saepipe/grammar.hpp"
#include "saepipe/hostlm.hpp"
#include "saepipe/sae.hpp"

// Decoder-direction steering: add alpha * W_dec[latent] to the residual
// stream during generation, tabulate the class mix of each steered
// library, and correlate the target-class share with alpha.

namespace saepipe::steer {

struct SteeringSpec {
    int layer = 0;
    int latent = 0;
    std::vector<double> alphas;  // must contain 0; that row doubles as the baseline
    int n_per_alpha = 1000;
    double temperature = 1.0;
    uint64_t seed = 0;
    int target_class = 0;
    double min_confidence = 0.6;  // calls below this count as unknown
    int n_perm = 10000;

    void validate() const;
};

// 13 evenly spaced multiples of scale covering [-6, 6] x scale.
std::vector<double> default_alpha_grid(double scale);

// Mean nonzero latent value across encoded rows; the natural alpha unit.
double mean_active_magnitude(const sae::SaeParams& sae, const hostlm::ActivationSet& acts);

// Pure additive transform h -> h + alpha * W_dec[latent].
hostlm::SteerHook steering_hook(const sae::SaeParams& sae, int layer, int latent, double alpha);

struct AlphaRow {
    double alpha = 0.0;
    std::vector<double> proportions;  // one per J class, then unknown; sums to 1
    double mean_length = 0.0;         // letters per sequence
    double unknown_fraction = 0.0;
    bool degenerate = false;  // every sequence unclassifiable
};

struct SteeringReport {
    std::vector<AlphaRow> rows;  // follows the spec's alpha order
    int target_class = 0;
    int n_classes = 0;       // J classes, excluding unknown
    int baseline_index = -1;  // row where alpha == 0
    // Correlations use the non-degenerate rows; they stay undefined when
    // fewer than three remain or either side is constant.
    bool correlation_defined = false;
    double pearson_r = 0.0;
    double spearman_rho = 0.0;
    double pearson_p = 1.0;
    double spearman_p = 1.0;
};

// Generates n_per_alpha sequences per alpha (same seed every row, so the
// alpha = 0 row is bitwise the unsteered library), classifies each with
// classify_j, and correlates alpha with the target-class proportion.
SteeringReport run_sweep(const hostlm::LmParams& lm, const sae::SaeParams& sae,
                         const SteeringSpec& spec, const grammar::GrammarSpec& grammar);

enum class Align { absolute, j_anchored };

// Fraction of the latent's total activation mass per token position,
// indexed absolutely or relative to the first J-region token.
struct PositionalHistogram {
    std::vector<int> positions;     // ascending; anchored offsets may be negative
    std::vector<double> fractions;  // sums to 1
};

PositionalHistogram positional_histogram(const sae::SaeParams& sae,
                                         const hostlm::ActivationSet& acts, int latent,
                                         Align align);

// CSV "alpha,class,proportion" plus a JSON summary with the correlation
// block and the baseline row. All writers go through a temp file rename.
void write_sweep_csv(const SteeringReport& report, const std::string& path,
                     const std::string& header_comment);
void write_sweep_json(const SteeringReport& report, const std::string& path);
void write_histogram_csv(const PositionalHistogram& hist, const std::string& path,
                         const std::string& header_comment);

}  // namespace saepipe::steer
