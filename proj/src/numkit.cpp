#include "saepipe/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#if defined(__SSE2__)
#include <xmmintrin.h>
#endif

namespace saepipe::numkit {

bool all_finite(std::span<const double> v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

bool all_finite(const Mat& m) { return all_finite(std::span<const double>(m.data)); }

namespace {

uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

void Rng::reseed(uint64_t seed) {
    seed_ = seed;
    uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
    has_spare_ = false;
}

uint64_t Rng::next_u64() {
    uint64_t result = rotl(state_[1] * 5, 7) * 9;
    uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Rng::uniform() {
    // 53 high bits -> double in [0, 1)
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

uint64_t Rng::uniform_int(uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_int: n must be positive");
    // Rejection sampling keeps the distribution exact.
    uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
    for (;;) {
        uint64_t r = next_u64();
        if (r >= threshold) return r % n;
    }
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    double two_pi_u2 = 2.0 * 3.14159265358979323846 * u2;
    spare_ = mag * std::sin(two_pi_u2);
    has_spare_ = true;
    return mag * std::cos(two_pi_u2);
}

uint64_t Rng::derive(uint64_t seed, uint64_t stream) {
    // Two splitmix64 rounds mix both words into an independent child seed.
    uint64_t x = seed ^ (0x9e3779b97f4a7c15ULL + stream * 0xcafef00dd15ea5e5ULL);
    splitmix64(x);
    return splitmix64(x);
}

void adam_update(Mat& param, const Mat& grad, AdamState& state, double lr) {
    if (!param.same_shape(grad) || !param.same_shape(state.m1)) {
        throw std::invalid_argument("adam_update: shape mismatch");
    }
    state.step += 1;
    double b1 = state.beta1;
    double b2 = state.beta2;
    double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    double* p = param.data.data();
    const double* g = grad.data.data();
    double* m1 = state.m1.data.data();
    double* m2 = state.m2.data.data();
    size_t n = param.size();
    for (size_t i = 0; i < n; ++i) {
        m1[i] = b1 * m1[i] + (1.0 - b1) * g[i];
        m2[i] = b2 * m2[i] + (1.0 - b2) * g[i] * g[i];
        double mhat = m1[i] / bc1;
        double vhat = m2[i] / bc2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
}

DenormalGuard::DenormalGuard() {
#if defined(__SSE2__)
    saved_ = _mm_getcsr();
    // bit 15 = flush-to-zero, bit 6 = denormals-are-zero
    _mm_setcsr(saved_ | 0x8040u);
#endif
}

DenormalGuard::~DenormalGuard() {
#if defined(__SSE2__)
    _mm_setcsr(saved_);
#endif
}

void topk_indices(std::span<const double> v, int k, std::vector<int>& indices_out,
                  std::vector<double>& values_out) {
    int n = static_cast<int>(v.size());
    if (k <= 0 || k > n) throw std::invalid_argument("invalid k");
    indices_out.resize(static_cast<size_t>(n));
    std::iota(indices_out.begin(), indices_out.end(), 0);
    // Total order: larger value first, ties to the lower index.
    auto better = [&](int a, int b) { return v[a] != v[b] ? v[a] > v[b] : a < b; };
    std::nth_element(indices_out.begin(), indices_out.begin() + (k - 1), indices_out.end(), better);
    indices_out.resize(static_cast<size_t>(k));
    std::sort(indices_out.begin(), indices_out.end());
    values_out.resize(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) values_out[static_cast<size_t>(i)] = v[indices_out[static_cast<size_t>(i)]];
}

TopKResult topk_select(std::span<const double> v, int k) {
    TopKResult out;
    std::vector<double> vals;
    topk_indices(v, k, out.indices, vals);
    out.masked.assign(v.size(), 0.0);
    for (int idx : out.indices) out.masked[static_cast<size_t>(idx)] = v[static_cast<size_t>(idx)];
    return out;
}

Vec minmax_scale(std::span<const double> column) {
    Vec out(column.size(), 0.0);
    if (column.empty()) return out;
    auto [mn_it, mx_it] = std::minmax_element(column.begin(), column.end());
    double mn = *mn_it, mx = *mx_it;
    if (mx == mn) return out;  // degenerate column -> all zeros
    double inv = 1.0 / (mx - mn);
    for (size_t i = 0; i < column.size(); ++i) out[i] = (column[i] - mn) * inv;
    return out;
}

ClassMetrics prf1_from_counts(size_t tp, size_t fp, size_t fn) {
    ClassMetrics m;
    m.support = tp + fn;
    m.precision = (tp + fp) ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    m.recall = (tp + fn) ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    m.f1 = (m.precision + m.recall > 0.0) ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
                                          : 0.0;
    return m;
}

ClassMetrics prf1(std::span<const uint8_t> pred, std::span<const uint8_t> truth) {
    if (pred.size() != truth.size()) throw std::invalid_argument("prf1: size mismatch");
    size_t tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        tp += (pred[i] && truth[i]);
        fp += (pred[i] && !truth[i]);
        fn += (!pred[i] && truth[i]);
    }
    return prf1_from_counts(tp, fp, fn);
}

double macro_f1(std::span<const ClassMetrics> per_class) {
    if (per_class.empty()) throw std::invalid_argument("macro_f1: no classes");
    double sum = 0.0;
    for (const auto& m : per_class) sum += m.f1;
    return sum / static_cast<double>(per_class.size());
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size() || xs.size() < 2) throw std::invalid_argument("degenerate input");
    size_t n = xs.size();
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double dx = xs[i] - mx;
        double dy = ys[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("degenerate input");
    return sxy / std::sqrt(sxx * syy);
}

namespace {

Vec average_ranks(std::span<const double> v) {
    size_t n = v.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    Vec ranks(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        // ranks are 1-based; tied entries share the mean rank of the run
        double mean_rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (size_t t = i; t <= j; ++t) ranks[order[t]] = mean_rank;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size() || xs.size() < 2) throw std::invalid_argument("degenerate input");
    Vec rx = average_ranks(xs);
    Vec ry = average_ranks(ys);
    return pearson(rx, ry);
}

double perm_pvalue(std::span<const double> xs, std::span<const double> ys, CorrStat stat,
                   int n_perm, Rng& rng) {
    if (n_perm < 100) throw std::invalid_argument("perm_pvalue: n_perm must be >= 100");
    auto eval = [&](std::span<const double> a, std::span<const double> b) {
        return stat == CorrStat::pearson ? pearson(a, b) : spearman(a, b);
    };
    double observed = std::abs(eval(xs, ys));
    Vec shuffled(ys.begin(), ys.end());
    int hits = 0;
    for (int p = 0; p < n_perm; ++p) {
        rng.shuffle(shuffled);
        double s;
        try {
            s = std::abs(eval(xs, shuffled));
        } catch (const std::invalid_argument&) {
            s = 0.0;  // constant permutation of a tied vector counts as null
        }
        if (s >= observed) ++hits;
    }
    return static_cast<double>(1 + hits) / static_cast<double>(1 + n_perm);
}

namespace {
int g_max_threads = 1;
}

void set_max_threads(int n) {
    if (n < 1) throw std::invalid_argument("set_max_threads: n must be >= 1");
    g_max_threads = n;
}

int max_threads() { return g_max_threads; }

void parallel_for(size_t n, const std::function<void(size_t)>& body) {
    int workers = std::min<int>(g_max_threads, static_cast<int>(n));
    if (workers <= 1) {
        for (size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    // Static block partition: worker w handles [w*n/W, (w+1)*n/W).
    for (int w = 0; w < workers; ++w) {
        size_t lo = n * static_cast<size_t>(w) / static_cast<size_t>(workers);
        size_t hi = n * static_cast<size_t>(w + 1) / static_cast<size_t>(workers);
        pool.emplace_back([lo, hi, &body] {
            for (size_t i = lo; i < hi; ++i) body(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace saepipe::numkit
