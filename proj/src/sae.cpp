#include "saepipe/sae.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace saepipe::sae {

double SaeConfig::learning_rate() const {
    if (lr > 0.0) return lr;
    if (variant == SaeVariant::topk) {
        return 2e-4 / std::sqrt(static_cast<double>(d_sae()) / 16384.0);
    }
    return 1e-4;
}

void SaeConfig::validate() const {
    if (d_in < 1 || r < 1) throw std::invalid_argument("bad SAE dimensions");
    if (k < 1 || k > d_in || d_in > d_sae()) throw std::invalid_argument("invalid k");
    if (variant == SaeVariant::ordered && scheme == WeightScheme::geometric &&
        (gamma <= 0.0 || gamma >= 1.0)) {
        throw std::invalid_argument("gamma must be in (0, 1)");
    }
    if (batch < 1 || epochs < 1 || m_stride < 1 || log_every < 1) {
        throw std::invalid_argument("bad training schedule");
    }
    if (lr < 0.0 || c < 0.0) throw std::invalid_argument("bad coefficients");
}

SaeParams init_sae(const SaeConfig& cfg, uint64_t seed) {
    cfg.validate();
    SaeParams p;
    p.cfg = cfg;
    int d_sae = cfg.d_sae();
    p.w_enc = Mat(d_sae, cfg.d_in);
    p.b_enc = Mat(1, d_sae);
    p.w_dec = Mat(d_sae, cfg.d_in);
    p.b_dec = Mat(1, cfg.d_in);

    numkit::Rng rng(seed);
    double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d_in));
    for (auto& w : p.w_enc.data) w = bound * (2.0 * rng.uniform() - 1.0);
    for (int i = 0; i < d_sae; ++i) {
        auto src = p.w_enc.row(i);
        auto dst = p.w_dec.row(i);
        double norm = 0.0;
        for (double v : src) norm += v * v;
        norm = std::sqrt(norm);
        if (norm == 0.0) norm = 1.0;
        for (int j = 0; j < cfg.d_in; ++j) dst[static_cast<size_t>(j)] = src[static_cast<size_t>(j)] / norm;
    }
    return p;
}

namespace {

void check_input(const SaeParams& p, std::span<const double> x) {
    if (static_cast<int>(x.size()) != p.cfg.d_in) {
        throw std::invalid_argument("input width mismatch");
    }
}

// Pre-activations a = W_enc x + b_enc for the first m latents. The
// literal linear truncation form drops the bias.
void pre_activations(const SaeParams& p, std::span<const double> x, int m, double* a,
                     bool with_bias = true) {
    int d_in = p.cfg.d_in;
    for (int i = 0; i < m; ++i) {
        const double* row = p.w_enc.data.data() + static_cast<size_t>(i) * d_in;
        double s = with_bias ? p.b_enc.data[static_cast<size_t>(i)] : 0.0;
        for (int j = 0; j < d_in; ++j) s += row[j] * x[static_cast<size_t>(j)];
        a[i] = s;
    }
}

}  // namespace

SparseLatents encode_truncated(const SaeParams& params, std::span<const double> x, int m) {
    check_input(params, x);
    if (m < 1 || m > params.cfg.d_sae()) throw std::invalid_argument("bad truncation index");
    Vec a(static_cast<size_t>(m));
    pre_activations(params, x, m, a.data());
    for (auto& v : a) v = std::max(v, 0.0);
    int kk = std::min(params.cfg.k, m);
    SparseLatents z;
    z.d_sae = params.cfg.d_sae();
    numkit::topk_indices(a, kk, z.indices, z.values);
    return z;
}

SparseLatents encode_topk(const SaeParams& params, std::span<const double> x) {
    return encode_truncated(params, x, params.cfg.d_sae());
}

Vec decode(const SaeParams& params, const SparseLatents& z) {
    if (z.d_sae != params.cfg.d_sae() || z.indices.size() != z.values.size()) {
        throw std::invalid_argument("latent shape mismatch");
    }
    int d_in = params.cfg.d_in;
    Vec xhat(params.b_dec.data.begin(), params.b_dec.data.end());
    for (size_t s = 0; s < z.indices.size(); ++s) {
        const double* row = params.w_dec.data.data() + static_cast<size_t>(z.indices[s]) * d_in;
        double v = z.values[s];
        for (int j = 0; j < d_in; ++j) xhat[static_cast<size_t>(j)] += v * row[j];
    }
    return xhat;
}

LossBreakdown topk_loss(const SaeParams& params, std::span<const double> x) {
    auto z = encode_topk(params, x);
    auto xhat = decode(params, z);
    LossBreakdown out;
    for (size_t j = 0; j < xhat.size(); ++j) {
        double d = x[j] - xhat[j];
        out.recon += d * d;
    }
    double l1 = 0.0;
    for (double v : z.values) l1 += v;
    out.sparsity_term = params.cfg.c * l1;
    return out;
}

TruncationWeights truncation_weights(int d_sae, WeightScheme scheme, double gamma) {
    if (d_sae < 1) throw std::invalid_argument("d_sae must be >= 1");
    TruncationWeights w;
    w.p.resize(static_cast<size_t>(d_sae));
    if (scheme == WeightScheme::harmonic) {
        double h = 0.0;
        for (int m = 1; m <= d_sae; ++m) h += 1.0 / m;
        for (int m = 1; m <= d_sae; ++m) w.p[static_cast<size_t>(m - 1)] = (1.0 / m) / h;
    } else {
        if (gamma <= 0.0 || gamma >= 1.0) throw std::invalid_argument("gamma must be in (0, 1)");
        double sum = 0.0, g = 1.0;
        for (int m = 1; m <= d_sae; ++m) {
            g *= gamma;
            w.p[static_cast<size_t>(m - 1)] = g;
            sum += g;
        }
        for (auto& v : w.p) v /= sum;
    }
    return w;
}

namespace {

// Shared engine behind the ordered loss, recon curve, truncation
// reconstructions, and gradients. Sweeps m = 1..d_sae maintaining the
// top-k' support of the truncated encoder incrementally: a new latent is
// always the largest index, so appends keep the ascending accumulation
// of xhat intact; an eviction rebuilds xhat ascending from b_dec, which
// is what makes truncation reconstructions bitwise equal to a dense
// decode of the truncated encoding.
struct OrderedSweep {
    const SaeParams& p;
    std::span<const double> x;
    const TruncationWeights* weights;  // may be null (curve only)
    int m_stride;
    SaeGrads* grads;  // may be null

    Vec* recon_curve = nullptr;   // per m, unweighted
    Vec* per_trunc = nullptr;     // per m, weighted (0 where skipped)
    int capture_m = 0;            // copy xhat at this m
    Vec* captured = nullptr;
    std::vector<long>* fire_counts = nullptr;

    double weighted_total = 0.0;

    void run() {
        const SaeConfig& cfg = p.cfg;
        int d_in = cfg.d_in;
        int d_sae = cfg.d_sae();
        bool linear = cfg.linear_truncations;

        Vec a(static_cast<size_t>(d_sae));
        pre_activations(p, x, d_sae, a.data(), !linear);
        Vec v(a);
        if (!linear) {
            for (auto& t : v) t = std::max(t, 0.0);
        }

        // Renormalise weights over the sampled truncations when striding.
        double wscale = 1.0;
        auto sampled = [&](int m) { return m % m_stride == 0 || m == d_sae; };
        if (weights) {
            if (static_cast<int>(weights->p.size()) != d_sae) {
                throw std::invalid_argument("weight length mismatch");
            }
            if (m_stride > 1) {
                double s = 0.0;
                for (int m = 1; m <= d_sae; ++m) {
                    if (sampled(m)) s += weights->p[static_cast<size_t>(m - 1)];
                }
                wscale = 1.0 / s;
            }
        }

        Vec xhat(static_cast<size_t>(d_in), 0.0);
        if (!linear) {
            std::copy(p.b_dec.data.begin(), p.b_dec.data.end(), xhat.begin());
        }
        Vec r(static_cast<size_t>(d_in));
        double r2 = 0.0;
        auto refresh_residual = [&] {
            r2 = 0.0;
            for (int j = 0; j < d_in; ++j) {
                r[static_cast<size_t>(j)] = x[static_cast<size_t>(j)] - xhat[static_cast<size_t>(j)];
                r2 += r[static_cast<size_t>(j)] * r[static_cast<size_t>(j)];
            }
        };

        // Active support slots; snapshots hold the accumulator A at entry.
        // Linear mode never evicts, so every latent needs a slot.
        std::vector<int> slot_idx;
        Vec slot_val;
        int n_slots = linear ? d_sae : cfg.k;
        Mat snapshots(grads ? n_slots : 0, grads ? d_in : 0);
        Vec acc(static_cast<size_t>(d_in), 0.0);  // A = sum of w_m * r over sampled m

        auto append_latent = [&](int i, int slot) {
            slot_idx.push_back(i);
            slot_val.push_back(v[static_cast<size_t>(i)]);
            if (grads) {
                std::memcpy(snapshots.row(slot).data(), acc.data(), sizeof(double) * static_cast<size_t>(d_in));
            }
            const double* drow = p.w_dec.data.data() + static_cast<size_t>(i) * d_in;
            double val = v[static_cast<size_t>(i)];
            for (int j = 0; j < d_in; ++j) xhat[static_cast<size_t>(j)] += val * drow[j];
        };

        auto flush_latent = [&](int i, double val) {
            // R_i = A_now - A_at_entry accumulated over the active interval.
            if (!grads) return;
            // A zero-valued latent moves nothing and its ReLU gate is shut.
            if (!linear && val == 0.0) return;
            int slot = -1;
            for (size_t s = 0; s < slot_idx.size(); ++s) {
                if (slot_idx[s] == i) slot = static_cast<int>(s);
            }
            const double* snap = snapshots.row(slot).data();
            const double* drow = p.w_dec.data.data() + static_cast<size_t>(i) * d_in;
            double* dwd = grads->w_dec.data.data() + static_cast<size_t>(i) * d_in;
            double dz = 0.0;
            for (int j = 0; j < d_in; ++j) {
                double Rj = acc[static_cast<size_t>(j)] - snap[j];
                dwd[j] += -2.0 * val * Rj;
                dz += drow[j] * Rj;
            }
            dz *= -2.0;
            bool gate = linear ? true : (a[static_cast<size_t>(i)] > 0.0);
            if (gate && dz != 0.0) {
                double* dwe = grads->w_enc.data.data() + static_cast<size_t>(i) * d_in;
                for (int j = 0; j < d_in; ++j) dwe[j] += dz * x[static_cast<size_t>(j)];
                if (!linear) grads->b_enc.data[static_cast<size_t>(i)] += dz;
            }
        };

        refresh_residual();
        for (int m = 1; m <= d_sae; ++m) {
            int cand = m - 1;
            bool changed = false;
            if (linear || static_cast<int>(slot_idx.size()) < cfg.k) {
                append_latent(cand, static_cast<int>(slot_idx.size()));
                changed = true;
            } else {
                // Worst incumbent: minimum value, largest index among ties.
                int worst = 0;
                for (size_t s = 1; s < slot_idx.size(); ++s) {
                    if (slot_val[s] < slot_val[static_cast<size_t>(worst)] ||
                        (slot_val[s] == slot_val[static_cast<size_t>(worst)] &&
                         slot_idx[s] > slot_idx[static_cast<size_t>(worst)])) {
                        worst = static_cast<int>(s);
                    }
                }
                if (v[static_cast<size_t>(cand)] > slot_val[static_cast<size_t>(worst)]) {
                    flush_latent(slot_idx[static_cast<size_t>(worst)], slot_val[static_cast<size_t>(worst)]);
                    // Replace in place, then rebuild xhat ascending.
                    slot_idx[static_cast<size_t>(worst)] = cand;
                    slot_val[static_cast<size_t>(worst)] = v[static_cast<size_t>(cand)];
                    if (grads) {
                        std::memcpy(snapshots.row(worst).data(), acc.data(),
                                    sizeof(double) * static_cast<size_t>(d_in));
                    }
                    std::vector<int> order(slot_idx.size());
                    for (size_t s = 0; s < order.size(); ++s) order[s] = static_cast<int>(s);
                    std::sort(order.begin(), order.end(),
                              [&](int l, int rgt) { return slot_idx[static_cast<size_t>(l)] < slot_idx[static_cast<size_t>(rgt)]; });
                    std::copy(p.b_dec.data.begin(), p.b_dec.data.end(), xhat.begin());
                    for (int s : order) {
                        const double* drow =
                            p.w_dec.data.data() + static_cast<size_t>(slot_idx[static_cast<size_t>(s)]) * d_in;
                        double val = slot_val[static_cast<size_t>(s)];
                        for (int j = 0; j < d_in; ++j) xhat[static_cast<size_t>(j)] += val * drow[j];
                    }
                    changed = true;
                }
            }
            if (changed) refresh_residual();

            if (recon_curve) (*recon_curve)[static_cast<size_t>(m - 1)] = r2;
            if (capture_m == m && captured) *captured = xhat;
            if (weights && sampled(m)) {
                double wm = weights->p[static_cast<size_t>(m - 1)] * wscale;
                double lm = wm * r2;
                weighted_total += lm;
                if (per_trunc) (*per_trunc)[static_cast<size_t>(m - 1)] = lm;
                if (grads) {
                    for (int j = 0; j < d_in; ++j) acc[static_cast<size_t>(j)] += wm * r[static_cast<size_t>(j)];
                }
            }
        }

        if (grads) {
            for (size_t s = 0; s < slot_idx.size(); ++s) flush_latent(slot_idx[s], slot_val[s]);
            if (!linear) {
                for (int j = 0; j < d_in; ++j) grads->b_dec.data[static_cast<size_t>(j)] += -2.0 * acc[static_cast<size_t>(j)];
            }
        }
        if (fire_counts) {
            for (size_t s = 0; s < slot_idx.size(); ++s) {
                if (slot_val[s] > 0.0) (*fire_counts)[static_cast<size_t>(slot_idx[s])] += 1;
            }
        }
    }
};

}  // namespace

LossBreakdown ordered_loss(const SaeParams& params, std::span<const double> x,
                           const TruncationWeights& weights) {
    check_input(params, x);
    LossBreakdown out;
    out.per_truncation.assign(static_cast<size_t>(params.cfg.d_sae()), 0.0);
    OrderedSweep sweep{params, x, &weights, params.cfg.m_stride, nullptr};
    sweep.per_trunc = &out.per_truncation;
    sweep.run();
    out.recon = sweep.weighted_total;
    return out;
}

Vec ordered_recon_curve(const SaeParams& params, std::span<const double> x) {
    check_input(params, x);
    Vec curve(static_cast<size_t>(params.cfg.d_sae()), 0.0);
    OrderedSweep sweep{params, x, nullptr, 1, nullptr};
    sweep.recon_curve = &curve;
    sweep.run();
    return curve;
}

Vec truncation_recon(const SaeParams& params, std::span<const double> x, int m) {
    check_input(params, x);
    if (m < 1 || m > params.cfg.d_sae()) throw std::invalid_argument("bad truncation index");
    Vec xhat;
    OrderedSweep sweep{params, x, nullptr, 1, nullptr};
    sweep.capture_m = m;
    sweep.captured = &xhat;
    sweep.run();
    return xhat;
}

void SaeGrads::zero() {
    w_enc.zero();
    b_enc.zero();
    w_dec.zero();
    b_dec.zero();
}

namespace {

void scale_grads(SaeGrads& g, double s) {
    for (auto* m : {&g.w_enc, &g.b_enc, &g.w_dec, &g.b_dec}) {
        for (auto& v : m->data) v *= s;
    }
}

}  // namespace

LossBreakdown grad_topk(const SaeParams& params, const Mat& batch, SaeGrads& grads,
                        std::vector<long>* fire_counts) {
    if (batch.rows < 1) throw std::invalid_argument("empty batch");
    if (batch.cols != params.cfg.d_in) throw std::invalid_argument("input width mismatch");
    grads.zero();
    int d_in = params.cfg.d_in;
    LossBreakdown out;
    Vec r(static_cast<size_t>(d_in));
    for (int b = 0; b < batch.rows; ++b) {
        auto x = batch.row(b);
        Vec a(static_cast<size_t>(params.cfg.d_sae()));
        pre_activations(params, x, params.cfg.d_sae(), a.data());
        Vec relu(a);
        for (auto& t : relu) t = std::max(t, 0.0);
        SparseLatents z;
        z.d_sae = params.cfg.d_sae();
        numkit::topk_indices(relu, params.cfg.k, z.indices, z.values);
        if (fire_counts) {
            for (size_t s = 0; s < z.indices.size(); ++s) {
                if (z.values[s] > 0.0) (*fire_counts)[static_cast<size_t>(z.indices[s])] += 1;
            }
        }
        Vec xhat = decode(params, z);

        double r2 = 0.0, l1 = 0.0;
        for (int j = 0; j < d_in; ++j) {
            r[static_cast<size_t>(j)] = x[static_cast<size_t>(j)] - xhat[static_cast<size_t>(j)];
            r2 += r[static_cast<size_t>(j)] * r[static_cast<size_t>(j)];
        }
        for (double vv : z.values) l1 += vv;
        out.recon += r2;
        out.sparsity_term += params.cfg.c * l1;

        for (int j = 0; j < d_in; ++j) grads.b_dec.data[static_cast<size_t>(j)] += -2.0 * r[static_cast<size_t>(j)];
        for (size_t s = 0; s < z.indices.size(); ++s) {
            int i = z.indices[s];
            double zi = z.values[s];
            const double* drow = params.w_dec.data.data() + static_cast<size_t>(i) * d_in;
            double* dwd = grads.w_dec.data.data() + static_cast<size_t>(i) * d_in;
            double dz = 0.0;
            for (int j = 0; j < d_in; ++j) {
                dwd[j] += -2.0 * zi * r[static_cast<size_t>(j)];
                dz += drow[j] * r[static_cast<size_t>(j)];
            }
            dz = -2.0 * dz + params.cfg.c;
            // Straight-through: the mask is constant, ReLU gates the value.
            if (a[static_cast<size_t>(i)] > 0.0) {
                double* dwe = grads.w_enc.data.data() + static_cast<size_t>(i) * d_in;
                for (int j = 0; j < d_in; ++j) dwe[j] += dz * x[static_cast<size_t>(j)];
                grads.b_enc.data[static_cast<size_t>(i)] += dz;
            }
        }
    }
    double inv = 1.0 / batch.rows;
    out.recon *= inv;
    out.sparsity_term *= inv;
    scale_grads(grads, inv);
    return out;
}

LossBreakdown grad_ordered(const SaeParams& params, const Mat& batch,
                           const TruncationWeights& weights, SaeGrads& grads,
                           std::vector<long>* fire_counts) {
    if (batch.rows < 1) throw std::invalid_argument("empty batch");
    if (batch.cols != params.cfg.d_in) throw std::invalid_argument("input width mismatch");
    grads.zero();
    LossBreakdown out;
    out.per_truncation.assign(static_cast<size_t>(params.cfg.d_sae()), 0.0);
    Vec sample_trunc(static_cast<size_t>(params.cfg.d_sae()));
    for (int b = 0; b < batch.rows; ++b) {
        std::fill(sample_trunc.begin(), sample_trunc.end(), 0.0);
        OrderedSweep sweep{params, batch.row(b), &weights, params.cfg.m_stride, &grads};
        sweep.per_trunc = &sample_trunc;
        sweep.fire_counts = fire_counts;
        sweep.run();
        out.recon += sweep.weighted_total;
        for (size_t m = 0; m < sample_trunc.size(); ++m) out.per_truncation[m] += sample_trunc[m];
    }
    double inv = 1.0 / batch.rows;
    out.recon *= inv;
    for (auto& v : out.per_truncation) v *= inv;
    scale_grads(grads, inv);
    return out;
}

namespace {

TrainedSae train_sae_impl(const SaeConfig& cfg, int n_rows,
                          const std::function<void(int, double*)>& fetch_row, uint64_t seed,
                          bool record_wallclock) {
    cfg.validate();
    if (n_rows < 1) throw std::invalid_argument("empty activation stream");
    numkit::DenormalGuard ftz;

    TrainedSae out;
    out.params = init_sae(cfg, numkit::Rng::derive(seed, 0));
    SaeGrads grads(cfg);
    numkit::AdamState st_we(out.params.w_enc), st_be(out.params.b_enc), st_wd(out.params.w_dec),
        st_bd(out.params.b_dec);
    double lr = cfg.learning_rate();
    TruncationWeights weights;
    if (cfg.variant == SaeVariant::ordered) {
        weights = truncation_weights(cfg.d_sae(), cfg.scheme, cfg.gamma);
    }

    numkit::Rng shuffle_rng(numkit::Rng::derive(seed, 1));
    std::vector<int> order(static_cast<size_t>(n_rows));
    for (int i = 0; i < n_rows; ++i) order[static_cast<size_t>(i)] = i;

    std::vector<long> fire_counts(static_cast<size_t>(cfg.d_sae()), 0);
    auto t0 = std::chrono::steady_clock::now();
    long step = 0;
    long last_log_step = -1;
    double last_recon = 0.0, last_sparsity = 0.0;
    Mat batch(cfg.batch, cfg.d_in);

    auto log_row = [&](double recon, double sparsity) {
        SaeTrainRow row;
        row.step = step;
        row.recon = recon;
        row.sparsity_term = sparsity;
        long fired = 0;
        for (long c : fire_counts) fired += (c > 0);
        row.dead_fraction = 1.0 - static_cast<double>(fired) / cfg.d_sae();
        if (record_wallclock) {
            row.wallclock = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        }
        out.log.rows.push_back(row);
        std::fill(fire_counts.begin(), fire_counts.end(), 0);
        last_log_step = step;
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (int start = 0; start < n_rows; start += cfg.batch) {
            int bsz = std::min(cfg.batch, n_rows - start);
            if (batch.rows != bsz) batch = Mat(bsz, cfg.d_in);
            for (int b = 0; b < bsz; ++b) fetch_row(order[static_cast<size_t>(start + b)], batch.row(b).data());

            LossBreakdown lb;
            if (cfg.variant == SaeVariant::topk) {
                lb = grad_topk(out.params, batch, grads, &fire_counts);
            } else {
                lb = grad_ordered(out.params, batch, weights, grads, &fire_counts);
            }
            double total = lb.total();
            if (!std::isfinite(total)) {
                throw std::runtime_error("non-finite loss at step " + std::to_string(step));
            }
            out.log.step_loss.push_back(total);
            last_recon = lb.recon;
            last_sparsity = lb.sparsity_term;
            if (step % cfg.log_every == 0) log_row(lb.recon, lb.sparsity_term);

            numkit::adam_update(out.params.w_enc, grads.w_enc, st_we, lr);
            numkit::adam_update(out.params.b_enc, grads.b_enc, st_be, lr);
            numkit::adam_update(out.params.w_dec, grads.w_dec, st_wd, lr);
            numkit::adam_update(out.params.b_dec, grads.b_dec, st_bd, lr);
            ++step;
        }
    }
    if (last_log_step != step - 1 && !out.log.step_loss.empty()) {
        --step;
        log_row(last_recon, last_sparsity);
        ++step;
    }

    out.log.initial_loss = out.log.step_loss.front();
    size_t tail = std::min<size_t>(50, out.log.step_loss.size());
    double sm = 0.0;
    for (size_t i = out.log.step_loss.size() - tail; i < out.log.step_loss.size(); ++i) {
        sm += out.log.step_loss[i];
    }
    out.log.final_smoothed_loss = sm / static_cast<double>(tail);
    return out;
}

}  // namespace

TrainedSae train_sae(const SaeConfig& cfg, const hostlm::ActivationSet& acts, uint64_t seed,
                     bool record_wallclock) {
    if (acts.d_model != cfg.d_in) throw std::invalid_argument("input width mismatch");
    auto fetch = [&](int row, double* dst) {
        auto src = acts.row(row);
        for (int j = 0; j < cfg.d_in; ++j) dst[j] = static_cast<double>(src[static_cast<size_t>(j)]);
    };
    return train_sae_impl(cfg, acts.n_rows, fetch, seed, record_wallclock);
}

TrainedSae train_sae_rows(const SaeConfig& cfg, const Mat& rows, uint64_t seed,
                          bool record_wallclock) {
    if (rows.cols != cfg.d_in) throw std::invalid_argument("input width mismatch");
    auto fetch = [&](int row, double* dst) {
        auto src = rows.row(row);
        std::memcpy(dst, src.data(), sizeof(double) * static_cast<size_t>(cfg.d_in));
    };
    return train_sae_impl(cfg, rows.rows, fetch, seed, record_wallclock);
}

namespace {

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }
double read_f64(std::istream& is) {
    double v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void write_mat(std::ostream& os, const Mat& m) {
    write_u32(os, static_cast<uint32_t>(m.rows));
    write_u32(os, static_cast<uint32_t>(m.cols));
    os.write(reinterpret_cast<const char*>(m.data.data()),
             static_cast<std::streamsize>(m.data.size() * sizeof(double)));
}

Mat read_mat(std::istream& is) {
    int rows = static_cast<int>(read_u32(is));
    int cols = static_cast<int>(read_u32(is));
    Mat m(rows, cols);
    is.read(reinterpret_cast<char*>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    return m;
}

}  // namespace

void save_sae(const SaeParams& params, const std::string& path) {
    std::string tmp = path + ".tmp";
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os.write("SAESAE01", 8);
    const SaeConfig& c = params.cfg;
    write_u32(os, static_cast<uint32_t>(c.d_in));
    write_u32(os, static_cast<uint32_t>(c.r));
    write_u32(os, static_cast<uint32_t>(c.k));
    write_u32(os, static_cast<uint32_t>(c.variant == SaeVariant::topk ? 0 : 1));
    write_u32(os, static_cast<uint32_t>(c.scheme == WeightScheme::harmonic ? 0 : 1));
    write_u32(os, static_cast<uint32_t>(c.batch));
    write_u32(os, static_cast<uint32_t>(c.epochs));
    write_u32(os, static_cast<uint32_t>(c.m_stride));
    write_u32(os, static_cast<uint32_t>(c.log_every));
    write_u32(os, static_cast<uint32_t>(c.linear_truncations ? 1 : 0));
    write_f64(os, c.gamma);
    write_f64(os, c.c);
    write_f64(os, c.lr);
    write_mat(os, params.w_enc);
    write_mat(os, params.b_enc);
    write_mat(os, params.w_dec);
    write_mat(os, params.b_dec);
    if (!os.flush()) throw std::runtime_error("write failed: " + tmp);
    os.close();
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("rename failed: " + path);
}

SaeParams load_sae(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path);
    char magic[8];
    is.read(magic, 8);
    if (std::memcmp(magic, "SAESAE01", 8) != 0) throw std::runtime_error("bad SAE file magic: " + path);
    SaeConfig c;
    c.d_in = static_cast<int>(read_u32(is));
    c.r = static_cast<int>(read_u32(is));
    c.k = static_cast<int>(read_u32(is));
    c.variant = read_u32(is) == 0 ? SaeVariant::topk : SaeVariant::ordered;
    c.scheme = read_u32(is) == 0 ? WeightScheme::harmonic : WeightScheme::geometric;
    c.batch = static_cast<int>(read_u32(is));
    c.epochs = static_cast<int>(read_u32(is));
    c.m_stride = static_cast<int>(read_u32(is));
    c.log_every = static_cast<int>(read_u32(is));
    c.linear_truncations = read_u32(is) != 0;
    c.gamma = read_f64(is);
    c.c = read_f64(is);
    c.lr = read_f64(is);
    SaeParams p;
    p.cfg = c;
    p.w_enc = read_mat(is);
    p.b_enc = read_mat(is);
    p.w_dec = read_mat(is);
    p.b_dec = read_mat(is);
    if (!is) throw std::runtime_error("truncated SAE file: " + path);
    if (p.w_enc.rows != c.d_sae() || p.w_enc.cols != c.d_in) {
        throw std::runtime_error("SAE shape mismatch in " + path);
    }
    return p;
}

}  // namespace saepipe::sae
