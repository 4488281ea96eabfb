#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "saepipe/hostlm.hpp"
#include "saepipe/numkit.hpp"
#include "saepipe/sae.hpp"

// Linear probes over latent or neuron activations: multinomial logistic
// regression with cross-validated regularization, per-class latent
// ranking, and activation-threshold F1 feature selection.

namespace saepipe::probe {

using numkit::Mat;
using numkit::Vec;

struct ProbeConfig {
    std::vector<double> c_grid = {0.01, 0.1, 1.0, 10.0, 100.0};
    int folds = 3;
    int max_iter = 1000;
    int top_n = 500;
    std::vector<double> thresholds = {0.1, 0.2, 0.5, 0.8, 0.9};
    double f1_cut = 0.5;

    void validate() const;
};

// Row-sparse design matrix; latent rows carry only their support but
// behave as dense d_sae vectors with zeros elsewhere.
struct DesignMatrix {
    int n_features = 0;
    int n_classes = 0;
    std::vector<int> y;
    std::vector<int> row_seq;  // source sequence of each row
    std::vector<size_t> indptr = {0};
    std::vector<int> indices;  // ascending within each row
    Vec values;

    int rows() const { return static_cast<int>(y.size()); }
    void append_row(std::span<const int> idx, std::span<const double> val);
    Vec dense_row(int r) const;
};

enum class FeatureLevel { residue, sequence };
enum class LabelKind { region, v_gene, j_gene };

// Region classes in fixed order B, 1, 2, 3, J.
int region_class(char region);
constexpr int kNumRegionClasses = 5;

// Residue level: one row per token, latent activations when `sae` is
// given, raw neurons otherwise. Sequence level: mean pool over the
// tokens of each sequence, exact arithmetic mean in row order.
DesignMatrix featurize(const hostlm::ActivationSet& acts, const sae::SaeParams* sae_params,
                       FeatureLevel level, LabelKind label);

// Dense rows x selected-column block gathered in one sparse pass.
Mat extract_columns(const DesignMatrix& x, std::span<const int> cols);

// Deterministic shuffled subsample that keeps whole sequences, emitted
// in their original order, stopping before max_rows is exceeded.
hostlm::ActivationSet subsample_sequences(const hostlm::ActivationSet& acts, int max_rows,
                                          uint64_t seed);

struct LogRegModel {
    Mat w;  // classes x features
    Vec b;  // per-class intercepts, unpenalized
    double loss = 0.0;
    int iters = 0;
    double grad_inf = 0.0;
};

// Multinomial softmax regression, objective
//   mean cross-entropy + ||W||^2 / (2 C N),
// full-batch Adam from zero init, stopping at gradient infinity norm
// 1e-5 or max_iter.
LogRegModel fit_logreg(const DesignMatrix& x, double c_value, int max_iter);

Vec predict_class_scores(const LogRegModel& model, const DesignMatrix& x, int row);
std::vector<int> predict(const LogRegModel& model, const DesignMatrix& x);

double accuracy(std::span<const int> pred, std::span<const int> truth);
double macro_f1_multiclass(std::span<const int> pred, std::span<const int> truth, int n_classes);

struct CvScore {
    double c = 0.0;
    double mean_macro_f1 = 0.0;
    double mean_accuracy = 0.0;
};

struct ProbeResult {
    Mat weights;  // classes x features, the stored correlation weights
    Vec intercepts;
    double best_c = 0.0;
    std::vector<CvScore> cv_scores;
    double train_metric = 0.0;  // macro-F1 of the refit on the full data
    double val_metric = 0.0;    // best mean cross-validation macro-F1
    int n_classes = 0;
};

// Shuffled k-fold grid search scored by macro-F1; ties prefer the
// smaller C; refits on the full data at the winner.
ProbeResult cv_grid_search(const DesignMatrix& x, const ProbeConfig& cfg, uint64_t seed);

// Indices of the top_n largest strictly positive weights for a class,
// descending; ties break toward the lower index.
std::vector<int> rank_latents(const ProbeResult& result, int concept_id, int top_n);

struct FeatureRecord {
    int latent = -1;
    int concept_id = -1;
    int layer = -1;
    double best_threshold = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    bool accepted = false;  // strictly above f1_cut
};

// MinMax-scales the column, binarizes at each threshold (>= means on)
// and keeps the best F1 against the binary concept labels.
FeatureRecord threshold_sweep(std::span<const double> latent_col,
                              std::span<const uint8_t> labels, const ProbeConfig& cfg);

struct ConceptSummary {
    int concept_id = -1;
    int feature_count = 0;
    double max_f1 = 0.0;  // over all candidates, accepted or not
};

std::vector<ConceptSummary> feature_report(const std::vector<FeatureRecord>& records,
                                           int n_concepts);

void save_probe(const ProbeResult& result, const std::string& path);
ProbeResult load_probe(const std::string& path);

}  // namespace saepipe::probe
