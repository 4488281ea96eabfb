#include "saepipe/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "saepipe/grammar.hpp"

namespace saepipe::probe {

namespace {

constexpr double kGradTol = 1e-5;
constexpr double kArmijo = 1e-4;

}  // namespace

void ProbeConfig::validate() const {
    if (folds < 2) throw std::invalid_argument("folds must be >= 2");
    if (c_grid.empty()) throw std::invalid_argument("empty C grid");
    for (double c : c_grid) {
        if (!(c > 0.0)) throw std::invalid_argument("C must be positive");
    }
    if (max_iter < 1 || top_n < 1) throw std::invalid_argument("bad probe limits");
    if (thresholds.empty()) throw std::invalid_argument("empty threshold list");
    for (double t : thresholds) {
        if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("thresholds must be in (0, 1)");
    }
    if (!(f1_cut > 0.0 && f1_cut < 1.0)) throw std::invalid_argument("f1_cut must be in (0, 1)");
}

void DesignMatrix::append_row(std::span<const int> idx, std::span<const double> val) {
    if (idx.size() != val.size()) throw std::invalid_argument("index/value length mismatch");
    for (size_t s = 0; s < idx.size(); ++s) {
        if (idx[s] < 0 || idx[s] >= n_features) throw std::invalid_argument("column out of range");
        if (s > 0 && idx[s] <= idx[s - 1]) throw std::invalid_argument("columns must ascend");
    }
    indices.insert(indices.end(), idx.begin(), idx.end());
    values.insert(values.end(), val.begin(), val.end());
    indptr.push_back(indices.size());
}

Vec DesignMatrix::dense_row(int r) const {
    Vec out(static_cast<size_t>(n_features), 0.0);
    for (size_t s = indptr[static_cast<size_t>(r)]; s < indptr[static_cast<size_t>(r) + 1]; ++s) {
        out[static_cast<size_t>(indices[s])] = values[s];
    }
    return out;
}

int region_class(char region) {
    switch (region) {
        case grammar::kRegionBackground: return 0;
        case grammar::kRegionR1: return 1;
        case grammar::kRegionR2: return 2;
        case grammar::kRegionR3: return 3;
        case grammar::kRegionJunction: return 4;
        default: throw std::invalid_argument("unknown region label");
    }
}

namespace {

int row_label(const hostlm::ActivationMetaRow& m, LabelKind label) {
    switch (label) {
        case LabelKind::region: return region_class(m.region);
        case LabelKind::v_gene: return m.v_id;
        case LabelKind::j_gene: return m.j_id;
    }
    throw std::invalid_argument("unknown label kind");
}

}  // namespace

DesignMatrix featurize(const hostlm::ActivationSet& acts, const sae::SaeParams* sae_params,
                       FeatureLevel level, LabelKind label) {
    if (acts.n_rows < 1) throw std::invalid_argument("empty activation set");
    if (static_cast<int>(acts.meta.size()) != acts.n_rows) {
        throw std::invalid_argument("metadata row count mismatch");
    }
    if (sae_params && sae_params->cfg.d_in != acts.d_model) {
        throw std::invalid_argument("input width mismatch");
    }

    DesignMatrix out;
    out.n_features = sae_params ? sae_params->cfg.d_sae() : acts.d_model;

    if (level == FeatureLevel::residue) {
        if (sae_params) {
            // Encode rows in parallel, then append in order.
            std::vector<sae::SparseLatents> encoded(static_cast<size_t>(acts.n_rows));
            numkit::parallel_for(static_cast<size_t>(acts.n_rows), [&](size_t r) {
                auto src = acts.row(static_cast<int>(r));
                Vec x(src.begin(), src.end());
                encoded[r] = sae::encode_topk(*sae_params, x);
            });
            for (int r = 0; r < acts.n_rows; ++r) {
                const auto& z = encoded[static_cast<size_t>(r)];
                out.append_row(z.indices, z.values);
            }
        } else {
            std::vector<int> cols(static_cast<size_t>(acts.d_model));
            std::iota(cols.begin(), cols.end(), 0);
            Vec x(static_cast<size_t>(acts.d_model));
            for (int r = 0; r < acts.n_rows; ++r) {
                auto src = acts.row(r);
                for (int j = 0; j < acts.d_model; ++j) x[static_cast<size_t>(j)] = src[static_cast<size_t>(j)];
                out.append_row(cols, x);
            }
        }
        out.y.resize(static_cast<size_t>(acts.n_rows));
        out.row_seq.resize(static_cast<size_t>(acts.n_rows));
        for (int r = 0; r < acts.n_rows; ++r) {
            out.y[static_cast<size_t>(r)] = row_label(acts.meta[static_cast<size_t>(r)], label);
            out.row_seq[static_cast<size_t>(r)] = acts.meta[static_cast<size_t>(r)].seq_id;
        }
    } else {
        if (label == LabelKind::region) {
            throw std::invalid_argument("region labels are per-token");
        }
        // Contiguous runs of one sequence id.
        struct Run {
            int begin, end, seq_id, y;
        };
        std::vector<Run> runs;
        for (int r = 0; r < acts.n_rows; ++r) {
            const auto& m = acts.meta[static_cast<size_t>(r)];
            if (!runs.empty() && runs.back().seq_id == m.seq_id) {
                if (row_label(m, label) != runs.back().y) {
                    throw std::invalid_argument("label varies within sequence");
                }
                runs.back().end = r + 1;
            } else {
                if (!runs.empty() && m.seq_id < runs.back().seq_id) {
                    throw std::invalid_argument("activation rows out of order");
                }
                runs.push_back({r, r + 1, m.seq_id, row_label(m, label)});
            }
        }

        // Mean pool per run: plain in-order summation divided by count.
        std::vector<std::vector<int>> run_idx(runs.size());
        std::vector<Vec> run_val(runs.size());
        numkit::parallel_for(runs.size(), [&](size_t ri) {
            const Run& run = runs[ri];
            Vec pool(static_cast<size_t>(out.n_features), 0.0);
            Vec x(static_cast<size_t>(acts.d_model));
            for (int r = run.begin; r < run.end; ++r) {
                auto src = acts.row(r);
                for (int j = 0; j < acts.d_model; ++j) x[static_cast<size_t>(j)] = src[static_cast<size_t>(j)];
                if (sae_params) {
                    auto z = sae::encode_topk(*sae_params, x);
                    for (size_t s = 0; s < z.indices.size(); ++s) {
                        pool[static_cast<size_t>(z.indices[s])] += z.values[s];
                    }
                } else {
                    for (int j = 0; j < acts.d_model; ++j) pool[static_cast<size_t>(j)] += x[static_cast<size_t>(j)];
                }
            }
            double inv = 1.0 / (run.end - run.begin);
            for (int j = 0; j < out.n_features; ++j) {
                double v = pool[static_cast<size_t>(j)] * inv;
                if (v != 0.0) {
                    run_idx[ri].push_back(j);
                    run_val[ri].push_back(v);
                }
            }
        });
        for (size_t ri = 0; ri < runs.size(); ++ri) {
            out.append_row(run_idx[ri], run_val[ri]);
            out.y.push_back(runs[ri].y);
            out.row_seq.push_back(runs[ri].seq_id);
        }
    }

    int max_label = 0;
    for (int v : out.y) max_label = std::max(max_label, v);
    out.n_classes = max_label + 1;
    return out;
}

Mat extract_columns(const DesignMatrix& x, std::span<const int> cols) {
    std::vector<int> slot(static_cast<size_t>(x.n_features), -1);
    for (size_t s = 0; s < cols.size(); ++s) {
        if (cols[s] < 0 || cols[s] >= x.n_features) throw std::invalid_argument("column out of range");
        slot[static_cast<size_t>(cols[s])] = static_cast<int>(s);
    }
    Mat out(x.rows(), static_cast<int>(cols.size()));
    for (int r = 0; r < x.rows(); ++r) {
        for (size_t s = x.indptr[static_cast<size_t>(r)]; s < x.indptr[static_cast<size_t>(r) + 1]; ++s) {
            int dst = slot[static_cast<size_t>(x.indices[s])];
            if (dst >= 0) out.at(r, dst) = x.values[s];
        }
    }
    return out;
}

hostlm::ActivationSet subsample_sequences(const hostlm::ActivationSet& acts, int max_rows,
                                          uint64_t seed) {
    if (max_rows < 1) throw std::invalid_argument("max_rows must be >= 1");
    if (acts.n_rows <= max_rows) return acts;

    struct Run {
        int begin, end;
    };
    std::vector<Run> runs;
    for (int r = 0; r < acts.n_rows; ++r) {
        if (!runs.empty() &&
            acts.meta[static_cast<size_t>(r)].seq_id == acts.meta[static_cast<size_t>(runs.back().begin)].seq_id) {
            runs.back().end = r + 1;
        } else {
            runs.push_back({r, r + 1});
        }
    }

    std::vector<int> order(runs.size());
    std::iota(order.begin(), order.end(), 0);
    numkit::Rng rng(seed);
    rng.shuffle(order);

    std::vector<bool> keep(runs.size(), false);
    int budget = max_rows;
    for (int ri : order) {
        int len = runs[static_cast<size_t>(ri)].end - runs[static_cast<size_t>(ri)].begin;
        if (len <= budget) {
            keep[static_cast<size_t>(ri)] = true;
            budget -= len;
        }
    }

    hostlm::ActivationSet out;
    out.d_model = acts.d_model;
    for (size_t ri = 0; ri < runs.size(); ++ri) {
        if (!keep[ri]) continue;
        for (int r = runs[ri].begin; r < runs[ri].end; ++r) {
            auto src = acts.row(r);
            out.data.insert(out.data.end(), src.begin(), src.end());
            out.meta.push_back(acts.meta[static_cast<size_t>(r)]);
            ++out.n_rows;
        }
    }
    return out;
}

namespace {

int class_count(const DesignMatrix& x) {
    int max_label = 0;
    for (int v : x.y) {
        if (v < 0) throw std::invalid_argument("negative class label");
        max_label = std::max(max_label, v);
    }
    return std::max(x.n_classes, max_label + 1);
}

// Scores for one row given feature-major weights wt [features x classes].
void row_scores(const DesignMatrix& x, int r, const Mat& wt, const Vec& b, double* s) {
    int K = wt.cols;
    for (int c = 0; c < K; ++c) s[c] = b[static_cast<size_t>(c)];
    for (size_t nz = x.indptr[static_cast<size_t>(r)]; nz < x.indptr[static_cast<size_t>(r) + 1]; ++nz) {
        const double* wrow = wt.data.data() + static_cast<size_t>(x.indices[nz]) * K;
        double v = x.values[nz];
        for (int c = 0; c < K; ++c) s[c] += v * wrow[c];
    }
}

}  // namespace

LogRegModel fit_logreg(const DesignMatrix& x, double c_value, int max_iter) {
    if (!(c_value > 0.0)) throw std::invalid_argument("C must be positive");
    if (x.rows() < 1) throw std::invalid_argument("empty design matrix");
    if (max_iter < 1) throw std::invalid_argument("bad probe limits");
    int K = class_count(x);
    {
        std::vector<bool> seen(static_cast<size_t>(K), false);
        for (int v : x.y) seen[static_cast<size_t>(v)] = true;
        if (std::count(seen.begin(), seen.end(), true) < 2) {
            throw std::invalid_argument("need at least two classes");
        }
    }

    int F = x.n_features;
    int N = x.rows();
    double reg = 1.0 / (c_value * N);

    // Feature-major weights keep the per-nonzero class loop contiguous.
    Mat wt(F, K);
    Vec b(static_cast<size_t>(K), 0.0);
    Mat gw(F, K);
    Vec gb(static_cast<size_t>(K));
    Vec s(static_cast<size_t>(K));
    // Cached per-row scores of the current iterate and of the descent
    // direction: backtracking trials then cost one fma+exp pass instead of
    // re-walking the sparse matrix.
    Vec scores(static_cast<size_t>(N) * K);
    Vec dir(static_cast<size_t>(N) * K);

    auto eval_with_grads = [&] {
        gw.zero();
        std::fill(gb.begin(), gb.end(), 0.0);
        double ce_sum = 0.0;
        for (int r = 0; r < N; ++r) {
            double* srow = scores.data() + static_cast<size_t>(r) * K;
            row_scores(x, r, wt, b, srow);
            double m = srow[0];
            for (int c = 1; c < K; ++c) m = std::max(m, srow[c]);
            double z = 0.0;
            for (int c = 0; c < K; ++c) z += std::exp(srow[c] - m);
            double lse = m + std::log(z);
            ce_sum += lse - srow[x.y[static_cast<size_t>(r)]];
            // Residuals p - onehot feed both gradient blocks.
            for (int c = 0; c < K; ++c) {
                double p = std::exp(srow[c] - lse);
                s[static_cast<size_t>(c)] = p - (c == x.y[static_cast<size_t>(r)] ? 1.0 : 0.0);
                gb[static_cast<size_t>(c)] += s[static_cast<size_t>(c)];
            }
            for (size_t nz = x.indptr[static_cast<size_t>(r)]; nz < x.indptr[static_cast<size_t>(r) + 1]; ++nz) {
                double* grow = gw.data.data() + static_cast<size_t>(x.indices[nz]) * K;
                double v = x.values[nz];
                for (int c = 0; c < K; ++c) grow[c] += v * s[static_cast<size_t>(c)];
            }
        }
        double w2 = 0.0;
        for (double v : wt.data) w2 += v * v;
        for (size_t i = 0; i < gw.data.size(); ++i) gw.data[i] = gw.data[i] / N + reg * wt.data[i];
        for (auto& v : gb) v /= N;
        return ce_sum / N + 0.5 * reg * w2;
    };

    auto trial_loss = [&](double step, const Mat& trial_w) {
        double ce_sum = 0.0;
        for (int r = 0; r < N; ++r) {
            const double* srow = scores.data() + static_cast<size_t>(r) * K;
            const double* drow = dir.data() + static_cast<size_t>(r) * K;
            for (int c = 0; c < K; ++c) s[static_cast<size_t>(c)] = srow[c] - step * drow[c];
            double m = s[0];
            for (int c = 1; c < K; ++c) m = std::max(m, s[static_cast<size_t>(c)]);
            double z = 0.0;
            for (int c = 0; c < K; ++c) z += std::exp(s[static_cast<size_t>(c)] - m);
            ce_sum += m + std::log(z) - s[static_cast<size_t>(x.y[static_cast<size_t>(r)])];
        }
        double w2 = 0.0;
        for (double v : trial_w.data) w2 += v * v;
        return ce_sum / N + 0.5 * reg * w2;
    };

    // Backtracking line search keeps descent monotone, so the convex
    // objective is driven to the gradient tolerance whenever max_iter
    // allows.
    LogRegModel out;
    Mat trial_w(F, K);
    Vec trial_b(static_cast<size_t>(K));
    double step = 1.0;
    for (out.iters = 0;; ++out.iters) {
        out.loss = eval_with_grads();
        double ginf = 0.0;
        for (double v : gw.data) ginf = std::max(ginf, std::abs(v));
        for (double v : gb) ginf = std::max(ginf, std::abs(v));
        out.grad_inf = ginf;
        if (ginf <= kGradTol || out.iters >= max_iter) break;

        double g2 = 0.0;
        for (double v : gw.data) g2 += v * v;
        for (double v : gb) g2 += v * v;

        for (int r = 0; r < N; ++r) {
            row_scores(x, r, gw, gb, dir.data() + static_cast<size_t>(r) * K);
        }

        step = std::min(step * 2.0, 1e6);
        bool moved = false;
        while (step > 1e-18) {
            for (size_t i = 0; i < wt.data.size(); ++i) trial_w.data[i] = wt.data[i] - step * gw.data[i];
            for (size_t i = 0; i < trial_b.size(); ++i) trial_b[i] = b[i] - step * gb[i];
            if (trial_loss(step, trial_w) <= out.loss - kArmijo * step * g2) {
                wt.data.swap(trial_w.data);
                b.swap(trial_b);
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if (!moved) break;  // no descent direction progress left
    }

    out.w = Mat(K, F);
    for (int j = 0; j < F; ++j) {
        for (int c = 0; c < K; ++c) out.w.at(c, j) = wt.at(j, c);
    }
    out.b = b;
    return out;
}

Vec predict_class_scores(const LogRegModel& model, const DesignMatrix& x, int row) {
    int K = model.w.rows;
    Vec s(model.b.begin(), model.b.end());
    for (size_t nz = x.indptr[static_cast<size_t>(row)]; nz < x.indptr[static_cast<size_t>(row) + 1]; ++nz) {
        int j = x.indices[nz];
        double v = x.values[nz];
        for (int c = 0; c < K; ++c) s[static_cast<size_t>(c)] += v * model.w.at(c, j);
    }
    return s;
}

std::vector<int> predict(const LogRegModel& model, const DesignMatrix& x) {
    std::vector<int> out(static_cast<size_t>(x.rows()));
    for (int r = 0; r < x.rows(); ++r) {
        Vec s = predict_class_scores(model, x, r);
        out[static_cast<size_t>(r)] =
            static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin());
    }
    return out;
}

double accuracy(std::span<const int> pred, std::span<const int> truth) {
    if (pred.size() != truth.size() || pred.empty()) throw std::invalid_argument("bad prediction shape");
    size_t hit = 0;
    for (size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double macro_f1_multiclass(std::span<const int> pred, std::span<const int> truth, int n_classes) {
    if (pred.size() != truth.size() || pred.empty()) throw std::invalid_argument("bad prediction shape");
    std::vector<numkit::ClassMetrics> per_class;
    for (int c = 0; c < n_classes; ++c) {
        size_t tp = 0, fp = 0, fn = 0;
        for (size_t i = 0; i < pred.size(); ++i) {
            bool p = pred[i] == c, t = truth[i] == c;
            tp += p && t;
            fp += p && !t;
            fn += !p && t;
        }
        per_class.push_back(numkit::prf1_from_counts(tp, fp, fn));
    }
    return numkit::macro_f1(per_class);
}

namespace {

DesignMatrix subset_rows(const DesignMatrix& x, const std::vector<int>& rows) {
    DesignMatrix out;
    out.n_features = x.n_features;
    out.n_classes = x.n_classes;
    for (int r : rows) {
        size_t lo = x.indptr[static_cast<size_t>(r)], hi = x.indptr[static_cast<size_t>(r) + 1];
        out.indices.insert(out.indices.end(), x.indices.begin() + static_cast<long>(lo),
                           x.indices.begin() + static_cast<long>(hi));
        out.values.insert(out.values.end(), x.values.begin() + static_cast<long>(lo),
                          x.values.begin() + static_cast<long>(hi));
        out.indptr.push_back(out.indices.size());
        out.y.push_back(x.y[static_cast<size_t>(r)]);
        out.row_seq.push_back(x.row_seq[static_cast<size_t>(r)]);
    }
    return out;
}

}  // namespace

ProbeResult cv_grid_search(const DesignMatrix& x, const ProbeConfig& cfg, uint64_t seed) {
    cfg.validate();
    int N = x.rows();
    if (N < cfg.folds) throw std::invalid_argument("fewer rows than folds");

    std::vector<int> perm(static_cast<size_t>(N));
    std::iota(perm.begin(), perm.end(), 0);
    numkit::Rng rng(numkit::Rng::derive(seed, 0));
    rng.shuffle(perm);

    // Contiguous chunks of the shuffled permutation form the folds.
    std::vector<std::vector<int>> fold_rows(static_cast<size_t>(cfg.folds));
    for (int i = 0; i < N; ++i) {
        fold_rows[static_cast<size_t>(i % cfg.folds)].push_back(perm[static_cast<size_t>(i)]);
    }

    struct TaskScore {
        double macro = 0.0;
        double acc = 0.0;
    };
    size_t n_tasks = cfg.c_grid.size() * static_cast<size_t>(cfg.folds);
    std::vector<TaskScore> scores(n_tasks);
    int n_classes = class_count(x);

    numkit::parallel_for(n_tasks, [&](size_t t) {
        size_t ci = t / static_cast<size_t>(cfg.folds);
        int fold = static_cast<int>(t % static_cast<size_t>(cfg.folds));
        std::vector<int> train_rows, val_rows;
        for (int f = 0; f < cfg.folds; ++f) {
            auto& dst = f == fold ? val_rows : train_rows;
            dst.insert(dst.end(), fold_rows[static_cast<size_t>(f)].begin(),
                       fold_rows[static_cast<size_t>(f)].end());
        }
        DesignMatrix train = subset_rows(x, train_rows);
        DesignMatrix val = subset_rows(x, val_rows);
        LogRegModel model = fit_logreg(train, cfg.c_grid[ci], cfg.max_iter);
        auto pred = predict(model, val);
        scores[t].macro = macro_f1_multiclass(pred, val.y, n_classes);
        scores[t].acc = accuracy(pred, val.y);
    });

    ProbeResult out;
    out.n_classes = n_classes;
    double best = -1.0;
    double best_c = 0.0;
    for (size_t ci = 0; ci < cfg.c_grid.size(); ++ci) {
        CvScore cs;
        cs.c = cfg.c_grid[ci];
        for (int f = 0; f < cfg.folds; ++f) {
            const auto& ts = scores[ci * static_cast<size_t>(cfg.folds) + static_cast<size_t>(f)];
            cs.mean_macro_f1 += ts.macro / cfg.folds;
            cs.mean_accuracy += ts.acc / cfg.folds;
        }
        out.cv_scores.push_back(cs);
        if (cs.mean_macro_f1 > best || (cs.mean_macro_f1 == best && cs.c < best_c)) {
            best = cs.mean_macro_f1;
            best_c = cs.c;
        }
    }
    out.best_c = best_c;
    out.val_metric = best;

    LogRegModel refit = fit_logreg(x, best_c, cfg.max_iter);
    out.weights = refit.w;
    out.intercepts = refit.b;
    auto pred = predict(refit, x);
    out.train_metric = macro_f1_multiclass(pred, x.y, n_classes);
    return out;
}

std::vector<int> rank_latents(const ProbeResult& result, int concept_id, int top_n) {
    if (concept_id < 0 || concept_id >= result.weights.rows) throw std::invalid_argument("bad concept");
    if (top_n < 1) throw std::invalid_argument("bad probe limits");
    std::vector<std::pair<double, int>> pos;
    for (int j = 0; j < result.weights.cols; ++j) {
        double w = result.weights.at(concept_id, j);
        if (w > 0.0) pos.push_back({w, j});
    }
    std::sort(pos.begin(), pos.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    if (static_cast<int>(pos.size()) > top_n) pos.resize(static_cast<size_t>(top_n));
    std::vector<int> out;
    for (const auto& [w, j] : pos) out.push_back(j);
    return out;
}

FeatureRecord threshold_sweep(std::span<const double> latent_col,
                              std::span<const uint8_t> labels, const ProbeConfig& cfg) {
    if (latent_col.size() != labels.size() || latent_col.empty()) {
        throw std::invalid_argument("column/label length mismatch");
    }
    Vec scaled = numkit::minmax_scale(latent_col);
    FeatureRecord out;
    out.f1 = -1.0;
    std::vector<uint8_t> pred(scaled.size());
    for (double t : cfg.thresholds) {
        for (size_t i = 0; i < scaled.size(); ++i) pred[i] = scaled[i] >= t ? 1 : 0;
        auto m = numkit::prf1(pred, labels);
        if (m.f1 > out.f1) {
            out.f1 = m.f1;
            out.precision = m.precision;
            out.recall = m.recall;
            out.best_threshold = t;
        }
    }
    out.accepted = out.f1 > cfg.f1_cut;
    return out;
}

std::vector<ConceptSummary> feature_report(const std::vector<FeatureRecord>& records,
                                           int n_concepts) {
    std::vector<ConceptSummary> out(static_cast<size_t>(n_concepts));
    for (int c = 0; c < n_concepts; ++c) out[static_cast<size_t>(c)].concept_id = c;
    for (const auto& rec : records) {
        if (rec.concept_id < 0 || rec.concept_id >= n_concepts) throw std::invalid_argument("bad concept");
        auto& row = out[static_cast<size_t>(rec.concept_id)];
        row.feature_count += rec.accepted ? 1 : 0;
        row.max_f1 = std::max(row.max_f1, rec.f1);
    }
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

}  // namespace

void save_probe(const ProbeResult& result, const std::string& path) {
    std::string tmp = path + ".tmp";
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os.write("SAEPRB01", 8);
    write_u32(os, static_cast<uint32_t>(result.weights.rows));
    write_u32(os, static_cast<uint32_t>(result.weights.cols));
    write_u32(os, static_cast<uint32_t>(result.n_classes));
    write_u32(os, static_cast<uint32_t>(result.cv_scores.size()));
    write_f64(os, result.best_c);
    write_f64(os, result.train_metric);
    write_f64(os, result.val_metric);
    for (const auto& cs : result.cv_scores) {
        write_f64(os, cs.c);
        write_f64(os, cs.mean_macro_f1);
        write_f64(os, cs.mean_accuracy);
    }
    os.write(reinterpret_cast<const char*>(result.weights.data.data()),
             static_cast<std::streamsize>(result.weights.data.size() * sizeof(double)));
    os.write(reinterpret_cast<const char*>(result.intercepts.data()),
             static_cast<std::streamsize>(result.intercepts.size() * sizeof(double)));
    if (!os.flush()) throw std::runtime_error("write failed: " + tmp);
    os.close();
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("rename failed: " + path);
}

ProbeResult load_probe(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path);
    char magic[8];
    is.read(magic, 8);
    if (std::memcmp(magic, "SAEPRB01", 8) != 0) throw std::runtime_error("bad probe file magic: " + path);
    ProbeResult out;
    int rows = static_cast<int>(read_u32(is));
    int cols = static_cast<int>(read_u32(is));
    out.n_classes = static_cast<int>(read_u32(is));
    int n_scores = static_cast<int>(read_u32(is));
    out.best_c = read_f64(is);
    out.train_metric = read_f64(is);
    out.val_metric = read_f64(is);
    for (int i = 0; i < n_scores; ++i) {
        CvScore cs;
        cs.c = read_f64(is);
        cs.mean_macro_f1 = read_f64(is);
        cs.mean_accuracy = read_f64(is);
        out.cv_scores.push_back(cs);
    }
    out.weights = Mat(rows, cols);
    is.read(reinterpret_cast<char*>(out.weights.data.data()),
            static_cast<std::streamsize>(out.weights.data.size() * sizeof(double)));
    out.intercepts.resize(static_cast<size_t>(rows));
    is.read(reinterpret_cast<char*>(out.intercepts.data()),
            static_cast<std::streamsize>(out.intercepts.size() * sizeof(double)));
    if (!is) throw std::runtime_error("truncated probe file: " + path);
    return out;
}

}  // namespace saepipe::probe
