#include "saepipe/hostlm.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace saepipe::hostlm {

namespace {

constexpr double kLnEps = 1e-5;

// out = x·W (+ bias); k-outer accumulation so the full-sequence and
// incremental paths add in the same order.
void vecmat(const double* x, const Mat& w, const double* bias, double* out) {
    int d_out = w.cols;
    if (bias) {
        std::memcpy(out, bias, sizeof(double) * static_cast<size_t>(d_out));
    } else {
        std::fill(out, out + d_out, 0.0);
    }
    for (int k = 0; k < w.rows; ++k) {
        double xk = x[k];
        const double* wrow = w.data.data() + static_cast<size_t>(k) * d_out;
        for (int j = 0; j < d_out; ++j) out[j] += xk * wrow[j];
    }
}

double dot(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

// y = g·xhat + b with xhat = (x-mean)·rstd; optionally records xhat/rstd.
void ln_row(const double* x, int d, const Mat& g, const Mat& b, double* y, double* xhat_out,
            double* rstd_out) {
    double mean = 0.0;
    for (int i = 0; i < d; ++i) mean += x[i];
    mean /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
        double c = x[i] - mean;
        var += c * c;
    }
    var /= d;
    double rstd = 1.0 / std::sqrt(var + kLnEps);
    for (int i = 0; i < d; ++i) {
        double xh = (x[i] - mean) * rstd;
        if (xhat_out) xhat_out[i] = xh;
        y[i] = g.data[static_cast<size_t>(i)] * xh + b.data[static_cast<size_t>(i)];
    }
    if (rstd_out) *rstd_out = rstd;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u))); }

double dgelu(double u) {
    double t = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
    double dg = kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dg;
}

void softmax_inplace(double* v, int n) {
    double mx = v[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, v[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        v[i] = std::exp(v[i] - mx);
        sum += v[i];
    }
    double inv = 1.0 / sum;
    for (int i = 0; i < n; ++i) v[i] *= inv;
}

// K/V rows for one layer, qkv layout preserved: row j holds k at
// [d, 2d) and v at [2d, 3d).
struct LayerCache {
    Mat qkv;  // [context, 3d]
    explicit LayerCache(int context, int d) : qkv(context, 3 * d) {}
};

struct BlockTape {
    Mat x_in, xhat1, qkv, ctx, x_mid, xhat2, u, f;
    numkit::Vec rstd1, rstd2;
    std::vector<Mat> probs;  // per head, rows t hold p(t, 0..t)
};

struct Tape {
    std::vector<BlockTape> blocks;
    Mat x_final, xhatf, hf, logits;
    numkit::Vec rstdf;
};

Tape make_tape(const LmConfig& cfg, int T) {
    Tape tape;
    tape.blocks.resize(static_cast<size_t>(cfg.n_layers));
    int d = cfg.d_model;
    for (auto& b : tape.blocks) {
        b.x_in = Mat(T, d);
        b.xhat1 = Mat(T, d);
        b.qkv = Mat(T, 3 * d);
        b.ctx = Mat(T, d);
        b.x_mid = Mat(T, d);
        b.xhat2 = Mat(T, d);
        b.u = Mat(T, cfg.d_ff());
        b.f = Mat(T, cfg.d_ff());
        b.rstd1.assign(static_cast<size_t>(T), 0.0);
        b.rstd2.assign(static_cast<size_t>(T), 0.0);
        b.probs.assign(static_cast<size_t>(cfg.n_heads), Mat(T, T));
    }
    tape.x_final = Mat(T, d);
    tape.xhatf = Mat(T, d);
    tape.hf = Mat(T, d);
    tape.logits = Mat(T, cfg.vocab);
    tape.rstdf.assign(static_cast<size_t>(T), 0.0);
    return tape;
}

struct Scratch {
    numkit::Vec a, qkv_row, ctx_row, o, b2, u_row, f_row, m, scores;
    explicit Scratch(const LmConfig& cfg)
        : a(static_cast<size_t>(cfg.d_model)),
          qkv_row(static_cast<size_t>(3 * cfg.d_model)),
          ctx_row(static_cast<size_t>(cfg.d_model)),
          o(static_cast<size_t>(cfg.d_model)),
          b2(static_cast<size_t>(cfg.d_model)),
          u_row(static_cast<size_t>(cfg.d_ff())),
          f_row(static_cast<size_t>(cfg.d_ff())),
          m(static_cast<size_t>(cfg.d_model)),
          scores(static_cast<size_t>(cfg.context)) {}
};

// One token through one block at position `pos`, reading K/V history from
// the cache and appending this position's row. x is updated in place.
void block_forward(const LmParams& p, int l, int pos, double* x, LayerCache& cache, Scratch& s,
                   BlockTape* tape) {
    const LmConfig& cfg = p.cfg;
    const LmBlock& blk = p.blocks[static_cast<size_t>(l)];
    int d = cfg.d_model;
    int dh = cfg.d_head();
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    if (tape) std::memcpy(tape->x_in.row(pos).data(), x, sizeof(double) * static_cast<size_t>(d));

    double rstd1 = 0.0;
    ln_row(x, d, blk.ln1_g, blk.ln1_b, s.a.data(), tape ? tape->xhat1.row(pos).data() : nullptr,
           &rstd1);
    if (tape) tape->rstd1[static_cast<size_t>(pos)] = rstd1;

    double* qkv = cache.qkv.row(pos).data();
    vecmat(s.a.data(), blk.w_qkv, blk.b_qkv.data.data(), qkv);
    if (tape) std::memcpy(tape->qkv.row(pos).data(), qkv, sizeof(double) * static_cast<size_t>(3 * d));

    for (int h = 0; h < cfg.n_heads; ++h) {
        const double* q = qkv + h * dh;
        for (int j = 0; j <= pos; ++j) {
            const double* kj = cache.qkv.row(j).data() + d + h * dh;
            s.scores[static_cast<size_t>(j)] = scale * dot(q, kj, dh);
        }
        softmax_inplace(s.scores.data(), pos + 1);
        if (tape) {
            double* prow = tape->probs[static_cast<size_t>(h)].row(pos).data();
            std::memcpy(prow, s.scores.data(), sizeof(double) * static_cast<size_t>(pos + 1));
        }
        double* ctx_h = s.ctx_row.data() + h * dh;
        std::fill(ctx_h, ctx_h + dh, 0.0);
        for (int j = 0; j <= pos; ++j) {
            const double* vj = cache.qkv.row(j).data() + 2 * d + h * dh;
            double pj = s.scores[static_cast<size_t>(j)];
            for (int c = 0; c < dh; ++c) ctx_h[c] += pj * vj[c];
        }
    }
    if (tape) std::memcpy(tape->ctx.row(pos).data(), s.ctx_row.data(), sizeof(double) * static_cast<size_t>(d));

    vecmat(s.ctx_row.data(), blk.w_o, blk.b_o.data.data(), s.o.data());
    for (int i = 0; i < d; ++i) x[i] += s.o[static_cast<size_t>(i)];
    if (tape) std::memcpy(tape->x_mid.row(pos).data(), x, sizeof(double) * static_cast<size_t>(d));

    double rstd2 = 0.0;
    ln_row(x, d, blk.ln2_g, blk.ln2_b, s.b2.data(), tape ? tape->xhat2.row(pos).data() : nullptr,
           &rstd2);
    if (tape) tape->rstd2[static_cast<size_t>(pos)] = rstd2;

    vecmat(s.b2.data(), blk.w_fc, blk.b_fc.data.data(), s.u_row.data());
    if (tape) std::memcpy(tape->u.row(pos).data(), s.u_row.data(), sizeof(double) * static_cast<size_t>(cfg.d_ff()));
    for (int i = 0; i < cfg.d_ff(); ++i) s.f_row[static_cast<size_t>(i)] = gelu(s.u_row[static_cast<size_t>(i)]);
    if (tape) std::memcpy(tape->f.row(pos).data(), s.f_row.data(), sizeof(double) * static_cast<size_t>(cfg.d_ff()));

    vecmat(s.f_row.data(), blk.w_proj, blk.b_proj.data.data(), s.m.data());
    for (int i = 0; i < d; ++i) x[i] += s.m[static_cast<size_t>(i)];
}

// Full forward over `tokens` at position offsets 0..T-1. Every per-token
// step goes through block_forward, the same primitive generate uses.
void forward_core(const LmParams& p, const std::vector<int>& tokens, const SteerHook* hook,
                  int read_layer, Mat* hidden_out, Tape* tape, Mat* logits_out) {
    const LmConfig& cfg = p.cfg;
    int T = static_cast<int>(tokens.size());
    if (T == 0) throw std::invalid_argument("empty token sequence");
    if (T > cfg.context) throw std::invalid_argument("sequence exceeds context length");
    if (read_layer < 0 || read_layer >= cfg.n_layers) throw std::out_of_range("bad layer index");
    if (hook && (hook->layer < 0 || hook->layer >= cfg.n_layers)) {
        throw std::out_of_range("bad layer index");
    }
    if (hook && static_cast<int>(hook->dir.size()) != cfg.d_model) {
        throw std::invalid_argument("steering direction size mismatch");
    }

    std::vector<LayerCache> caches;
    caches.reserve(static_cast<size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) caches.emplace_back(cfg.context, cfg.d_model);
    Scratch s(cfg);
    int d = cfg.d_model;
    numkit::Vec x(static_cast<size_t>(d));
    numkit::Vec h(static_cast<size_t>(d));
    numkit::Vec logit_row(static_cast<size_t>(cfg.vocab));

    for (int t = 0; t < T; ++t) {
        int tok = tokens[static_cast<size_t>(t)];
        if (tok < 0 || tok >= cfg.vocab) throw std::invalid_argument("token id out of range");
        for (int i = 0; i < d; ++i) {
            x[static_cast<size_t>(i)] = p.tok_emb.at(tok, i) + p.pos_emb.at(t, i);
        }
        for (int l = 0; l < cfg.n_layers; ++l) {
            block_forward(p, l, t, x.data(), caches[static_cast<size_t>(l)], s,
                          tape ? &tape->blocks[static_cast<size_t>(l)] : nullptr);
            if (hook && hook->layer == l && hook->alpha != 0.0) {
                for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] += hook->alpha * hook->dir[static_cast<size_t>(i)];
            }
            if (hidden_out && read_layer == l) {
                std::memcpy(hidden_out->row(t).data(), x.data(), sizeof(double) * static_cast<size_t>(d));
            }
        }
        if (tape) std::memcpy(tape->x_final.row(t).data(), x.data(), sizeof(double) * static_cast<size_t>(d));
        double rstdf = 0.0;
        ln_row(x.data(), d, p.lnf_g, p.lnf_b, h.data(), tape ? tape->xhatf.row(t).data() : nullptr,
               &rstdf);
        if (tape) {
            tape->rstdf[static_cast<size_t>(t)] = rstdf;
            std::memcpy(tape->hf.row(t).data(), h.data(), sizeof(double) * static_cast<size_t>(d));
        }
        if (logits_out) {
            vecmat(h.data(), p.w_out, p.b_out.data.data(), logit_row.data());
            std::memcpy(logits_out->row(t).data(), logit_row.data(),
                        sizeof(double) * static_cast<size_t>(cfg.vocab));
        }
    }
}

}  // namespace

void LmConfig::validate() const {
    if (vocab < 2) throw std::invalid_argument("vocab too small");
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || context < 2) {
        throw std::invalid_argument("bad model dimensions");
    }
    if (d_model % n_heads != 0) throw std::invalid_argument("d_model must divide by n_heads");
    if (bos_id < 0 || bos_id >= vocab || eos_id < 0 || eos_id >= vocab || bos_id == eos_id) {
        throw std::invalid_argument("bad special token ids");
    }
    if (batch < 1 || epochs < 1) throw std::invalid_argument("bad training schedule");
    if (val_frac < 0.0 || val_frac >= 1.0) throw std::invalid_argument("bad val_frac");
}

void LmParams::for_each_param(const std::function<void(const std::string&, Mat&)>& fn) {
    fn("tok_emb", tok_emb);
    fn("pos_emb", pos_emb);
    for (size_t l = 0; l < blocks.size(); ++l) {
        auto name = [&](const char* base) { return "block" + std::to_string(l) + "." + base; };
        LmBlock& b = blocks[l];
        fn(name("ln1_g"), b.ln1_g);
        fn(name("ln1_b"), b.ln1_b);
        fn(name("w_qkv"), b.w_qkv);
        fn(name("b_qkv"), b.b_qkv);
        fn(name("w_o"), b.w_o);
        fn(name("b_o"), b.b_o);
        fn(name("ln2_g"), b.ln2_g);
        fn(name("ln2_b"), b.ln2_b);
        fn(name("w_fc"), b.w_fc);
        fn(name("b_fc"), b.b_fc);
        fn(name("w_proj"), b.w_proj);
        fn(name("b_proj"), b.b_proj);
    }
    fn("lnf_g", lnf_g);
    fn("lnf_b", lnf_b);
    fn("w_out", w_out);
    fn("b_out", b_out);
}

void LmParams::for_each_param(const std::function<void(const std::string&, const Mat&)>& fn) const {
    const_cast<LmParams*>(this)->for_each_param(
        [&](const std::string& n, Mat& m) { fn(n, m); });
}

LmParams init_lm(const LmConfig& cfg, uint64_t seed) {
    cfg.validate();
    LmParams p;
    p.cfg = cfg;
    int d = cfg.d_model;
    numkit::Rng rng(seed);
    auto fill_normal = [&](Mat& m, double std) {
        for (auto& x : m.data) x = std * rng.normal();
    };
    p.tok_emb = Mat(cfg.vocab, d);
    fill_normal(p.tok_emb, 0.02);
    p.pos_emb = Mat(cfg.context, d);
    fill_normal(p.pos_emb, 0.02);
    // Residual-output projections get the 1/sqrt(2L) shrink.
    double resid_std = 0.02 / std::sqrt(2.0 * cfg.n_layers);
    p.blocks.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& b : p.blocks) {
        b.ln1_g = Mat(1, d, 1.0);
        b.ln1_b = Mat(1, d);
        b.w_qkv = Mat(d, 3 * d);
        fill_normal(b.w_qkv, 0.02);
        b.b_qkv = Mat(1, 3 * d);
        b.w_o = Mat(d, d);
        fill_normal(b.w_o, resid_std);
        b.b_o = Mat(1, d);
        b.ln2_g = Mat(1, d, 1.0);
        b.ln2_b = Mat(1, d);
        b.w_fc = Mat(d, cfg.d_ff());
        fill_normal(b.w_fc, 0.02);
        b.b_fc = Mat(1, cfg.d_ff());
        b.w_proj = Mat(cfg.d_ff(), d);
        fill_normal(b.w_proj, resid_std);
        b.b_proj = Mat(1, d);
    }
    p.lnf_g = Mat(1, d, 1.0);
    p.lnf_b = Mat(1, d);
    // Zero unembedding: uniform logits, so the initial loss is ln(vocab).
    p.w_out = Mat(d, cfg.vocab);
    p.b_out = Mat(1, cfg.vocab);
    return p;
}

LmParams zeros_like(const LmParams& src) {
    LmParams g;
    g.cfg = src.cfg;
    g.tok_emb = Mat(src.tok_emb.rows, src.tok_emb.cols);
    g.pos_emb = Mat(src.pos_emb.rows, src.pos_emb.cols);
    g.blocks.resize(src.blocks.size());
    for (size_t l = 0; l < src.blocks.size(); ++l) {
        const LmBlock& b = src.blocks[l];
        LmBlock& z = g.blocks[l];
        z.ln1_g = Mat(b.ln1_g.rows, b.ln1_g.cols);
        z.ln1_b = Mat(b.ln1_b.rows, b.ln1_b.cols);
        z.w_qkv = Mat(b.w_qkv.rows, b.w_qkv.cols);
        z.b_qkv = Mat(b.b_qkv.rows, b.b_qkv.cols);
        z.w_o = Mat(b.w_o.rows, b.w_o.cols);
        z.b_o = Mat(b.b_o.rows, b.b_o.cols);
        z.ln2_g = Mat(b.ln2_g.rows, b.ln2_g.cols);
        z.ln2_b = Mat(b.ln2_b.rows, b.ln2_b.cols);
        z.w_fc = Mat(b.w_fc.rows, b.w_fc.cols);
        z.b_fc = Mat(b.b_fc.rows, b.b_fc.cols);
        z.w_proj = Mat(b.w_proj.rows, b.w_proj.cols);
        z.b_proj = Mat(b.b_proj.rows, b.b_proj.cols);
    }
    g.lnf_g = Mat(src.lnf_g.rows, src.lnf_g.cols);
    g.lnf_b = Mat(src.lnf_b.rows, src.lnf_b.cols);
    g.w_out = Mat(src.w_out.rows, src.w_out.cols);
    g.b_out = Mat(src.b_out.rows, src.b_out.cols);
    return g;
}

ForwardResult forward_hooked(const LmParams& params, const std::vector<int>& tokens, int layer,
                             const SteerHook* hook) {
    ForwardResult out;
    int T = static_cast<int>(tokens.size());
    out.logits = Mat(T, params.cfg.vocab);
    out.hidden = Mat(T, params.cfg.d_model);
    forward_core(params, tokens, hook, layer, &out.hidden, nullptr, &out.logits);
    return out;
}

namespace {

double ce_from_logits(const Mat& logits, const std::vector<int>& tokens, Mat* dlogits) {
    int T = static_cast<int>(tokens.size());
    int n_pred = T - 1;
    if (n_pred < 1) throw std::invalid_argument("sequence too short for next-token loss");
    int vocab = logits.cols;
    double loss = 0.0;
    numkit::Vec p(static_cast<size_t>(vocab));
    for (int t = 0; t < n_pred; ++t) {
        auto row = logits.row(t);
        double mx = row[0];
        for (int j = 1; j < vocab; ++j) mx = std::max(mx, row[static_cast<size_t>(j)]);
        double sum = 0.0;
        for (int j = 0; j < vocab; ++j) {
            p[static_cast<size_t>(j)] = std::exp(row[static_cast<size_t>(j)] - mx);
            sum += p[static_cast<size_t>(j)];
        }
        int target = tokens[static_cast<size_t>(t + 1)];
        loss += std::log(sum) + mx - row[static_cast<size_t>(target)];
        if (dlogits) {
            double inv = 1.0 / sum;
            double* drow = dlogits->row(t).data();
            for (int j = 0; j < vocab; ++j) drow[j] = p[static_cast<size_t>(j)] * inv / n_pred;
            drow[target] -= 1.0 / n_pred;
        }
    }
    return loss / n_pred;
}

// dX += layer-norm backward of dY; accumulates dg/db.
void ln_backward(const Mat& dy, const Mat& xhat, const numkit::Vec& rstd, const Mat& g, Mat& dx,
                 Mat& dg, Mat& db, int T) {
    int d = dy.cols;
    for (int t = 0; t < T; ++t) {
        const double* dyr = dy.row(t).data();
        const double* xh = xhat.row(t).data();
        double* dxr = dx.row(t).data();
        double m1 = 0.0, m2 = 0.0;
        for (int i = 0; i < d; ++i) {
            double dxh = dyr[i] * g.data[static_cast<size_t>(i)];
            m1 += dxh;
            m2 += dxh * xh[i];
        }
        m1 /= d;
        m2 /= d;
        double r = rstd[static_cast<size_t>(t)];
        for (int i = 0; i < d; ++i) {
            double dxh = dyr[i] * g.data[static_cast<size_t>(i)];
            dxr[i] += r * (dxh - m1 - xh[i] * m2);
            dg.data[static_cast<size_t>(i)] += dyr[i] * xh[i];
            db.data[static_cast<size_t>(i)] += dyr[i];
        }
    }
}

// dW += A^T·dY, db += colsum(dY), dA = dY·W^T for rows 0..T-1.
void matmul_backward(const Mat& a, const Mat& w, const Mat& dy, Mat& dw, Mat& dbias, Mat* da,
                     int T) {
    int d_in = w.rows, d_out = w.cols;
    for (int t = 0; t < T; ++t) {
        const double* ar = a.row(t).data();
        const double* dyr = dy.row(t).data();
        for (int k = 0; k < d_in; ++k) {
            double ak = ar[k];
            double* dwrow = dw.data.data() + static_cast<size_t>(k) * d_out;
            for (int j = 0; j < d_out; ++j) dwrow[j] += ak * dyr[j];
        }
        for (int j = 0; j < d_out; ++j) dbias.data[static_cast<size_t>(j)] += dyr[j];
        if (da) {
            double* dar = da->row(t).data();
            for (int k = 0; k < d_in; ++k) {
                const double* wrow = w.data.data() + static_cast<size_t>(k) * d_out;
                double acc = 0.0;
                for (int j = 0; j < d_out; ++j) acc += dyr[j] * wrow[j];
                dar[k] += acc;
            }
        }
    }
}

}  // namespace

double loss_and_grads(const LmParams& params, const std::vector<int>& tokens, LmParams& grads) {
    const LmConfig& cfg = params.cfg;
    int T = static_cast<int>(tokens.size());
    Tape tape = make_tape(cfg, T);
    forward_core(params, tokens, nullptr, 0, nullptr, &tape, &tape.logits);

    Mat dlogits(T, cfg.vocab);
    double loss = ce_from_logits(tape.logits, tokens, &dlogits);
    int d = cfg.d_model;
    int dh = cfg.d_head();
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // Unembed and final norm.
    matmul_backward(tape.hf, params.w_out, dlogits, grads.w_out, grads.b_out, nullptr, T);
    Mat dhf(T, d);
    for (int t = 0; t < T; ++t) {
        const double* dyr = dlogits.row(t).data();
        double* dhr = dhf.row(t).data();
        for (int k = 0; k < d; ++k) {
            const double* wrow = params.w_out.data.data() + static_cast<size_t>(k) * cfg.vocab;
            double acc = 0.0;
            for (int j = 0; j < cfg.vocab; ++j) acc += dyr[j] * wrow[j];
            dhr[k] = acc;
        }
    }
    Mat dx(T, d);
    ln_backward(dhf, tape.xhatf, tape.rstdf, params.lnf_g, dx, grads.lnf_g, grads.lnf_b, T);

    Mat da(T, d), db2(T, d), dqkv(T, 3 * d), dctx(T, d), du(T, cfg.d_ff()), df(T, cfg.d_ff());
    Mat a_rows(T, d), b_rows(T, d);
    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LmBlock& blk = params.blocks[static_cast<size_t>(l)];
        LmBlock& gblk = grads.blocks[static_cast<size_t>(l)];
        const BlockTape& bt = tape.blocks[static_cast<size_t>(l)];

        // Recreate the LN outputs the matmuls consumed.
        for (int t = 0; t < T; ++t) {
            const double* x1 = bt.xhat1.row(t).data();
            const double* x2 = bt.xhat2.row(t).data();
            double* ar = a_rows.row(t).data();
            double* br = b_rows.row(t).data();
            for (int i = 0; i < d; ++i) {
                ar[i] = blk.ln1_g.data[static_cast<size_t>(i)] * x1[i] + blk.ln1_b.data[static_cast<size_t>(i)];
                br[i] = blk.ln2_g.data[static_cast<size_t>(i)] * x2[i] + blk.ln2_b.data[static_cast<size_t>(i)];
            }
        }

        // MLP: x_out = x_mid + gelu(ln2(x_mid)·W_fc)·W_proj
        df.zero();
        matmul_backward(bt.f, blk.w_proj, dx, gblk.w_proj, gblk.b_proj, &df, T);
        for (int t = 0; t < T; ++t) {
            const double* ur = bt.u.row(t).data();
            const double* dfr = df.row(t).data();
            double* dur = du.row(t).data();
            for (int i = 0; i < cfg.d_ff(); ++i) dur[i] = dfr[i] * dgelu(ur[i]);
        }
        db2.zero();
        matmul_backward(b_rows, blk.w_fc, du, gblk.w_fc, gblk.b_fc, &db2, T);
        ln_backward(db2, bt.xhat2, bt.rstd2, blk.ln2_g, dx, gblk.ln2_g, gblk.ln2_b, T);

        // Attention: x_mid = x_in + (ctx·W_o); dx now holds dx_mid.
        dctx.zero();
        matmul_backward(bt.ctx, blk.w_o, dx, gblk.w_o, gblk.b_o, &dctx, T);
        dqkv.zero();
        for (int h = 0; h < cfg.n_heads; ++h) {
            const Mat& probs = bt.probs[static_cast<size_t>(h)];
            for (int t = 0; t < T; ++t) {
                const double* dctx_h = dctx.row(t).data() + h * dh;
                const double* prow = probs.row(t).data();
                const double* q = bt.qkv.row(t).data() + h * dh;
                // dp and the softmax pullback over keys 0..t
                double sum_pd = 0.0;
                numkit::Vec dp(static_cast<size_t>(t + 1));
                for (int j = 0; j <= t; ++j) {
                    const double* vj = bt.qkv.row(j).data() + 2 * d + h * dh;
                    dp[static_cast<size_t>(j)] = dot(dctx_h, vj, dh);
                    sum_pd += prow[j] * dp[static_cast<size_t>(j)];
                }
                double* dq = dqkv.row(t).data() + h * dh;
                for (int j = 0; j <= t; ++j) {
                    double ds = prow[j] * (dp[static_cast<size_t>(j)] - sum_pd) * scale;
                    const double* kj = bt.qkv.row(j).data() + d + h * dh;
                    double* dkj = dqkv.row(j).data() + d + h * dh;
                    double* dvj = dqkv.row(j).data() + 2 * d + h * dh;
                    for (int c = 0; c < dh; ++c) {
                        dq[c] += ds * kj[c];
                        dkj[c] += ds * q[c];
                        dvj[c] += prow[j] * dctx_h[c];
                    }
                }
            }
        }
        da.zero();
        matmul_backward(a_rows, blk.w_qkv, dqkv, gblk.w_qkv, gblk.b_qkv, &da, T);
        ln_backward(da, bt.xhat1, bt.rstd1, blk.ln1_g, dx, gblk.ln1_g, gblk.ln1_b, T);
    }

    for (int t = 0; t < T; ++t) {
        const double* dxr = dx.row(t).data();
        double* de = grads.tok_emb.row(tokens[static_cast<size_t>(t)]).data();
        double* dpos = grads.pos_emb.row(t).data();
        for (int i = 0; i < d; ++i) {
            de[i] += dxr[i];
            dpos[i] += dxr[i];
        }
    }
    return loss;
}

double sequence_loss(const LmParams& params, const std::vector<int>& tokens) {
    int T = static_cast<int>(tokens.size());
    Mat logits(T, params.cfg.vocab);
    forward_core(params, tokens, nullptr, 0, nullptr, nullptr, &logits);
    return ce_from_logits(logits, tokens, nullptr);
}

double mean_loss(const LmParams& params, const std::vector<std::vector<int>>& seqs) {
    if (seqs.empty()) throw std::invalid_argument("no sequences");
    numkit::Vec losses(seqs.size());
    numkit::parallel_for(seqs.size(), [&](size_t i) { losses[i] = sequence_loss(params, seqs[i]); });
    double sum = 0.0;
    for (double l : losses) sum += l;
    return sum / static_cast<double>(seqs.size());
}

namespace {

double unigram_entropy(const std::vector<std::vector<int>>& seqs, int vocab) {
    std::vector<double> counts(static_cast<size_t>(vocab), 0.0);
    double total = 0.0;
    for (const auto& s : seqs) {
        for (size_t t = 1; t < s.size(); ++t) {
            counts[static_cast<size_t>(s[t])] += 1.0;
            total += 1.0;
        }
    }
    double h = 0.0;
    for (double c : counts) {
        if (c > 0.0) {
            double p = c / total;
            h -= p * std::log(p);
        }
    }
    return h;
}

}  // namespace

TrainedLm train_lm(const std::vector<std::vector<int>>& corpus, const LmConfig& cfg,
                   uint64_t seed) {
    cfg.validate();
    if (corpus.empty()) throw std::invalid_argument("empty corpus");
    for (const auto& s : corpus) {
        if (static_cast<int>(s.size()) > cfg.context) {
            throw std::invalid_argument("sequence exceeds context length");
        }
        if (s.size() < 2) throw std::invalid_argument("sequence too short");
    }

    numkit::DenormalGuard ftz;
    size_t n_val = static_cast<size_t>(std::llround(cfg.val_frac * static_cast<double>(corpus.size())));
    if (n_val >= corpus.size()) n_val = corpus.size() - 1;
    std::vector<std::vector<int>> train(corpus.begin(), corpus.end() - static_cast<long>(n_val));
    std::vector<std::vector<int>> val(corpus.end() - static_cast<long>(n_val), corpus.end());
    if (val.empty()) val = train;

    TrainedLm out;
    out.params = init_lm(cfg, numkit::Rng::derive(seed, 0));
    out.log.unigram_baseline = unigram_entropy(train, cfg.vocab);

    LmParams grads = zeros_like(out.params);
    std::vector<numkit::AdamState> opt;
    out.params.for_each_param([&](const std::string&, Mat& m) { opt.emplace_back(m); });

    std::vector<Mat*> pm, gm;
    out.params.for_each_param([&](const std::string&, Mat& m) { pm.push_back(&m); });
    grads.for_each_param([&](const std::string&, Mat& m) { gm.push_back(&m); });

    numkit::Rng shuffle_rng(numkit::Rng::derive(seed, 1));
    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch)) {
            size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch));
            grads.for_each_param([](const std::string&, Mat& m) { m.zero(); });
            double batch_loss = 0.0;
            for (size_t i = start; i < end; ++i) batch_loss += loss_and_grads(out.params, train[order[i]], grads);
            double inv = 1.0 / static_cast<double>(end - start);
            batch_loss *= inv;
            grads.for_each_param([&](const std::string&, Mat& m) {
                for (auto& x : m.data) x *= inv;
            });
            if (!std::isfinite(batch_loss)) {
                throw std::runtime_error("non-finite loss at step " + std::to_string(step));
            }
            for (size_t slot = 0; slot < pm.size(); ++slot) {
                numkit::adam_update(*pm[slot], *gm[slot], opt[slot], cfg.lr);
            }
            out.log.steps.push_back(step);
            out.log.step_loss.push_back(batch_loss);
            ++step;
        }
        out.log.epoch_val_loss.push_back(mean_loss(out.params, val));
    }
    out.log.final_val_loss = out.log.epoch_val_loss.back();
    return out;
}

std::vector<int> generate_one(const LmParams& params, double temperature, numkit::Rng& rng,
                              const SteerHook* hook) {
    const LmConfig& cfg = params.cfg;
    if (temperature < 0.0) throw std::invalid_argument("temperature must be >= 0");
    if (hook && (hook->layer < 0 || hook->layer >= cfg.n_layers)) {
        throw std::out_of_range("bad layer index");
    }
    if (hook && static_cast<int>(hook->dir.size()) != cfg.d_model) {
        throw std::invalid_argument("steering direction size mismatch");
    }

    std::vector<LayerCache> caches;
    for (int l = 0; l < cfg.n_layers; ++l) caches.emplace_back(cfg.context, cfg.d_model);
    Scratch s(cfg);
    int d = cfg.d_model;
    numkit::Vec x(static_cast<size_t>(d)), h(static_cast<size_t>(d));
    numkit::Vec logits(static_cast<size_t>(cfg.vocab)), probs(static_cast<size_t>(cfg.vocab));

    std::vector<int> tokens{cfg.bos_id};
    for (int pos = 0; pos < cfg.context; ++pos) {
        int tok = tokens[static_cast<size_t>(pos)];
        if (tok < 0 || tok >= cfg.vocab) throw std::invalid_argument("token id out of range");
        for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] = params.tok_emb.at(tok, i) + params.pos_emb.at(pos, i);
        for (int l = 0; l < cfg.n_layers; ++l) {
            block_forward(params, l, pos, x.data(), caches[static_cast<size_t>(l)], s, nullptr);
            if (hook && hook->layer == l && hook->alpha != 0.0) {
                for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] += hook->alpha * hook->dir[static_cast<size_t>(i)];
            }
        }
        ln_row(x.data(), d, params.lnf_g, params.lnf_b, h.data(), nullptr, nullptr);
        vecmat(h.data(), params.w_out, params.b_out.data.data(), logits.data());

        int next;
        if (temperature == 0.0) {
            next = 0;
            for (int j = 1; j < cfg.vocab; ++j) {
                if (logits[static_cast<size_t>(j)] > logits[static_cast<size_t>(next)]) next = j;
            }
        } else {
            for (int j = 0; j < cfg.vocab; ++j) probs[static_cast<size_t>(j)] = logits[static_cast<size_t>(j)] / temperature;
            softmax_inplace(probs.data(), cfg.vocab);
            double u = rng.uniform();
            double acc = 0.0;
            next = cfg.vocab - 1;
            for (int j = 0; j < cfg.vocab; ++j) {
                acc += probs[static_cast<size_t>(j)];
                if (u < acc) {
                    next = j;
                    break;
                }
            }
        }
        if (static_cast<int>(tokens.size()) >= cfg.context) break;
        tokens.push_back(next);
        if (next == cfg.eos_id) break;
    }
    return tokens;
}

std::vector<std::vector<int>> generate(const LmParams& params, int n, double temperature,
                                       uint64_t seed, const SteerHook* hook) {
    if (n < 1) throw std::invalid_argument("generate: n must be >= 1");
    std::vector<std::vector<int>> out(static_cast<size_t>(n));
    numkit::parallel_for(static_cast<size_t>(n), [&](size_t i) {
        numkit::Rng rng(numkit::Rng::derive(seed, i));
        out[i] = generate_one(params, temperature, rng, hook);
    });
    return out;
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

void atomic_rename(const std::string& tmp, const std::string& path) {
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw std::runtime_error("rename failed: " + path);
    }
}

}  // namespace

void dump_activations(const LmParams& params, const std::vector<grammar::LabeledSequence>& corpus,
                      int layer, const std::string& path, const std::string& header_comment) {
    const LmConfig& cfg = params.cfg;
    if (layer < 0 || layer >= cfg.n_layers) throw std::out_of_range("bad layer index");

    size_t n_rows = 0;
    for (const auto& s : corpus) {
        if (s.tokens.size() < 2) throw std::invalid_argument("sequence too short");
        n_rows += s.tokens.size() - 2;
    }

    std::string tmp = path + ".tmp";
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os.write("SAEACT1", 7);
    write_u32(os, static_cast<uint32_t>(n_rows));
    write_u32(os, static_cast<uint32_t>(cfg.d_model));
    os.put(static_cast<char>(1));  // dtype 1 = f32 little-endian

    std::string meta_tmp = path + ".meta.csv.tmp";
    std::ofstream meta(meta_tmp, std::ios::binary);
    if (!meta) throw std::runtime_error("cannot write " + meta_tmp);
    if (!header_comment.empty()) meta << "# " << header_comment << "\n";
    meta << "row,seq_id,position,region,v_id,j_id\n";

    // Hidden states per sequence are independent; compute in parallel,
    // write in sequence order.
    std::vector<Mat> hidden(corpus.size());
    numkit::parallel_for(corpus.size(), [&](size_t i) {
        hidden[i] = Mat(static_cast<int>(corpus[i].tokens.size()), cfg.d_model);
        forward_core(params, corpus[i].tokens, nullptr, layer, &hidden[i], nullptr, nullptr);
    });

    size_t row = 0;
    std::vector<float> frow(static_cast<size_t>(cfg.d_model));
    for (size_t i = 0; i < corpus.size(); ++i) {
        const auto& s = corpus[i];
        // Skip BOS (position 0) and EOS (last position).
        for (size_t t = 1; t + 1 < s.tokens.size(); ++t) {
            auto hrow = hidden[i].row(static_cast<int>(t));
            for (int c = 0; c < cfg.d_model; ++c) frow[static_cast<size_t>(c)] = static_cast<float>(hrow[static_cast<size_t>(c)]);
            os.write(reinterpret_cast<const char*>(frow.data()),
                     static_cast<std::streamsize>(frow.size() * sizeof(float)));
            meta << row << ',' << i << ',' << t << ',' << s.regions[t] << ',' << s.v_id << ','
                 << s.j_id << "\n";
            ++row;
        }
    }
    if (!os.flush()) throw std::runtime_error("write failed: " + tmp);
    if (!meta.flush()) throw std::runtime_error("write failed: " + meta_tmp);
    os.close();
    meta.close();
    atomic_rename(tmp, path);
    atomic_rename(meta_tmp, path + ".meta.csv");
}

ActivationSet read_activations(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path);
    char magic[7];
    is.read(magic, 7);
    if (std::memcmp(magic, "SAEACT1", 7) != 0) throw std::runtime_error("bad activation file magic: " + path);
    ActivationSet set;
    set.n_rows = static_cast<int>(read_u32(is));
    set.d_model = static_cast<int>(read_u32(is));
    char dtype = 0;
    is.get(dtype);
    if (dtype != 1) throw std::runtime_error("unsupported activation dtype in " + path);
    set.data.resize(static_cast<size_t>(set.n_rows) * set.d_model);
    is.read(reinterpret_cast<char*>(set.data.data()),
            static_cast<std::streamsize>(set.data.size() * sizeof(float)));
    if (!is) throw std::runtime_error("truncated activation file: " + path);

    std::ifstream meta(path + ".meta.csv", std::ios::binary);
    if (!meta) throw std::runtime_error("cannot read " + path + ".meta.csv");
    std::string line;
    while (std::getline(meta, line)) {
        if (line.empty() || line[0] == '#' || line.rfind("row,", 0) == 0) continue;
        std::stringstream ss(line);
        std::string field;
        ActivationMetaRow r;
        std::getline(ss, field, ',');
        std::getline(ss, field, ',');
        r.seq_id = std::stoi(field);
        std::getline(ss, field, ',');
        r.position = std::stoi(field);
        std::getline(ss, field, ',');
        r.region = field.empty() ? 'B' : field[0];
        std::getline(ss, field, ',');
        r.v_id = std::stoi(field);
        std::getline(ss, field, ',');
        r.j_id = std::stoi(field);
        set.meta.push_back(r);
    }
    if (static_cast<int>(set.meta.size()) != set.n_rows) {
        throw std::runtime_error("metadata row count mismatch: " + path);
    }
    return set;
}

void save_lm(const LmParams& params, const std::string& path) {
    std::string tmp = path + ".tmp";
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os.write("SAELM001", 8);
    const LmConfig& c = params.cfg;
    write_u32(os, static_cast<uint32_t>(c.vocab));
    write_u32(os, static_cast<uint32_t>(c.d_model));
    write_u32(os, static_cast<uint32_t>(c.n_layers));
    write_u32(os, static_cast<uint32_t>(c.n_heads));
    write_u32(os, static_cast<uint32_t>(c.context));
    write_u32(os, static_cast<uint32_t>(c.bos_id));
    write_u32(os, static_cast<uint32_t>(c.eos_id));
    write_f64(os, c.lr);
    write_u32(os, static_cast<uint32_t>(c.batch));
    write_u32(os, static_cast<uint32_t>(c.epochs));
    write_f64(os, c.val_frac);
    params.for_each_param([&](const std::string&, const Mat& m) {
        write_u32(os, static_cast<uint32_t>(m.rows));
        write_u32(os, static_cast<uint32_t>(m.cols));
        os.write(reinterpret_cast<const char*>(m.data.data()),
                 static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    });
    if (!os.flush()) throw std::runtime_error("write failed: " + tmp);
    os.close();
    atomic_rename(tmp, path);
}

LmParams load_lm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path);
    char magic[8];
    is.read(magic, 8);
    if (std::memcmp(magic, "SAELM001", 8) != 0) throw std::runtime_error("bad model file magic: " + path);
    LmConfig c;
    c.vocab = static_cast<int>(read_u32(is));
    c.d_model = static_cast<int>(read_u32(is));
    c.n_layers = static_cast<int>(read_u32(is));
    c.n_heads = static_cast<int>(read_u32(is));
    c.context = static_cast<int>(read_u32(is));
    c.bos_id = static_cast<int>(read_u32(is));
    c.eos_id = static_cast<int>(read_u32(is));
    c.lr = read_f64(is);
    c.batch = static_cast<int>(read_u32(is));
    c.epochs = static_cast<int>(read_u32(is));
    c.val_frac = read_f64(is);
    LmParams p = init_lm(c, 0);
    p.for_each_param([&](const std::string& name, Mat& m) {
        int rows = static_cast<int>(read_u32(is));
        int cols = static_cast<int>(read_u32(is));
        if (rows != m.rows || cols != m.cols) {
            throw std::runtime_error("model shape mismatch at " + name + " in " + path);
        }
        is.read(reinterpret_cast<char*>(m.data.data()),
                static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    });
    if (!is) throw std::runtime_error("truncated model file: " + path);
    return p;
}

}  // namespace saepipe::hostlm
