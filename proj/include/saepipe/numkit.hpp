#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// Dense numerical kernels, deterministic RNG, Adam, and the metric
// functions shared by every other module. All reductions run in a fixed
// order so results are bit-reproducible for a given seed.

namespace saepipe::numkit {

using Vec = std::vector<double>;

// Row-major dense matrix of doubles.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(int r, int c, double fill = 0.0)
        : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    std::span<double> row(int r) { return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)}; }
    std::span<const double> row(int r) const {
        return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
    }

    size_t size() const { return data.size(); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
    void zero() { std::fill(data.begin(), data.end(), 0.0); }
};

bool all_finite(std::span<const double> v);
bool all_finite(const Mat& m);

// xoshiro256** with splitmix64 seeding. Identical seed gives an identical
// stream on every platform.
class Rng {
  public:
    explicit Rng(uint64_t seed) { reseed(seed); }

    void reseed(uint64_t seed);
    uint64_t next_u64();

    // Uniform in [0, 1).
    double uniform();
    // Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n);
    // Standard normal, Box-Muller with a cached spare.
    double normal();

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Deterministic child stream for parallel work split by index.
    static uint64_t derive(uint64_t seed, uint64_t stream);
    Rng fork(uint64_t stream) const { return Rng(derive(seed_, stream)); }

    uint64_t seed() const { return seed_; }

  private:
    uint64_t state_[4] = {};
    uint64_t seed_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

struct AdamState {
    Mat m1;
    Mat m2;
    long step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    AdamState() = default;
    explicit AdamState(const Mat& param) : m1(param.rows, param.cols), m2(param.rows, param.cols) {}
};

// Bias-corrected Adam step in place. Throws on shape mismatch.
void adam_update(Mat& param, const Mat& grad, AdamState& state, double lr);

// Scoped flush-to-zero / denormals-are-zero. Adam moments of parameters with
// persistently zero gradients decay into the denormal range, where every
// arithmetic op takes a microcode assist; flushing keeps long training loops
// at full speed. Values this flushes sit near 1e-308, below one ulp of any
// parameter, so trained weights are bit-identical either way.
class DenormalGuard {
  public:
    DenormalGuard();
    ~DenormalGuard();
    DenormalGuard(const DenormalGuard&) = delete;
    DenormalGuard& operator=(const DenormalGuard&) = delete;

  private:
    unsigned int saved_ = 0;
};

struct TopKResult {
    std::vector<int> indices;  // ascending
    Vec masked;                // equals v on selected indices, 0 elsewhere
};

// Indices of the k largest entries, ties broken by lower index.
TopKResult topk_select(std::span<const double> v, int k);

// Selection core without the masked vector; indices ascending, values aligned.
void topk_indices(std::span<const double> v, int k, std::vector<int>& indices_out,
                  std::vector<double>& values_out);

// (v - min) / (max - min); a constant column maps to all zeros.
Vec minmax_scale(std::span<const double> column);

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    size_t support = 0;
};

ClassMetrics prf1(std::span<const uint8_t> pred, std::span<const uint8_t> truth);
ClassMetrics prf1_from_counts(size_t tp, size_t fp, size_t fn);
double macro_f1(std::span<const ClassMetrics> per_class);

// Sample Pearson correlation. Throws "degenerate input" on zero variance.
double pearson(std::span<const double> xs, std::span<const double> ys);
// Pearson on average ranks (ties share the mean rank).
double spearman(std::span<const double> xs, std::span<const double> ys);

enum class CorrStat { pearson, spearman };

// Two-sided permutation p-value (1 + hits) / (1 + n_perm).
double perm_pvalue(std::span<const double> xs, std::span<const double> ys, CorrStat stat,
                   int n_perm, Rng& rng);

// Thread budget for the parallel helpers. 1 = fully serial.
void set_max_threads(int n);
int max_threads();

// Runs body(i) for i in [0, n). Outputs must go to per-index slots; the
// helper guarantees nothing about ordering beyond that, so results are
// identical for any thread count.
void parallel_for(size_t n, const std::function<void(size_t)>& body);

}  // namespace saepipe::numkit
