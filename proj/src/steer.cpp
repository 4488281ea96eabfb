#include "saepipe/steer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace saepipe::steer {

using numkit::Rng;
using numkit::Vec;

void SteeringSpec::validate() const {
    if (layer < 0 || latent < 0) throw std::invalid_argument("bad steering target");
    bool has_zero = false;
    for (double a : alphas) has_zero = has_zero || a == 0.0;
    if (alphas.empty() || !has_zero) throw std::invalid_argument("alpha grid must contain 0");
    if (n_per_alpha < 100) throw std::invalid_argument("n_per_alpha must be >= 100");
    if (!(temperature >= 0.0)) throw std::invalid_argument("temperature must be >= 0");
    if (target_class < 0) throw std::invalid_argument("bad target class");
    if (!(min_confidence >= 0.0 && min_confidence <= 1.0)) {
        throw std::invalid_argument("bad confidence cut");
    }
    if (n_perm < 1) throw std::invalid_argument("bad permutation count");
}

std::vector<double> default_alpha_grid(double scale) {
    if (!(scale > 0.0)) throw std::invalid_argument("scale must be positive");
    std::vector<double> grid;
    for (int i = -6; i <= 6; ++i) grid.push_back(static_cast<double>(i) * scale);
    return grid;
}

double mean_active_magnitude(const sae::SaeParams& sae_params, const hostlm::ActivationSet& acts) {
    if (acts.n_rows < 1) throw std::invalid_argument("empty activation set");
    if (acts.d_model != sae_params.cfg.d_in) throw std::invalid_argument("input width mismatch");
    size_t n = static_cast<size_t>(acts.n_rows);
    std::vector<double> sums(n, 0.0);
    std::vector<int> counts(n, 0);
    numkit::parallel_for(n, [&](size_t r) {
        auto src = acts.row(static_cast<int>(r));
        Vec x(src.begin(), src.end());
        auto z = sae::encode_topk(sae_params, x);
        for (double v : z.values) {
            if (v > 0.0) {
                sums[r] += v;
                ++counts[r];
            }
        }
    });
    double total = 0.0;
    long active = 0;
    for (size_t r = 0; r < n; ++r) {
        total += sums[r];
        active += counts[r];
    }
    if (active == 0) throw std::runtime_error("no active latents");
    return total / static_cast<double>(active);
}

hostlm::SteerHook steering_hook(const sae::SaeParams& sae_params, int layer, int latent,
                                double alpha) {
    if (latent < 0 || latent >= sae_params.cfg.d_sae()) {
        throw std::out_of_range("latent out of range");
    }
    hostlm::SteerHook hook;
    hook.layer = layer;
    hook.alpha = alpha;
    const double* row = sae_params.w_dec.data.data() +
                        static_cast<size_t>(latent) * sae_params.cfg.d_in;
    hook.dir.assign(row, row + sae_params.cfg.d_in);
    return hook;
}

namespace {

AlphaRow tabulate(const std::vector<std::vector<int>>& seqs, const grammar::GrammarSpec& g,
                  double alpha, double min_confidence) {
    int n_classes = static_cast<int>(g.j_segments.size());
    AlphaRow row;
    row.alpha = alpha;
    row.proportions.assign(static_cast<size_t>(n_classes) + 1, 0.0);
    long letters = 0;
    for (const auto& tokens : seqs) {
        for (int t : tokens) letters += t != grammar::kBos && t != grammar::kEos;
        auto call = grammar::classify_j(g, tokens);
        int slot = call.j_id >= 0 && call.confidence >= min_confidence ? call.j_id : n_classes;
        row.proportions[static_cast<size_t>(slot)] += 1.0;
    }
    double inv = 1.0 / static_cast<double>(seqs.size());
    for (auto& p : row.proportions) p *= inv;
    row.mean_length = static_cast<double>(letters) * inv;
    row.unknown_fraction = row.proportions.back();
    row.degenerate = row.unknown_fraction == 1.0;
    return row;
}

}  // namespace

SteeringReport run_sweep(const hostlm::LmParams& lm, const sae::SaeParams& sae_params,
                         const SteeringSpec& spec, const grammar::GrammarSpec& grammar) {
    spec.validate();
    grammar.validate();
    if (sae_params.cfg.d_in != lm.cfg.d_model) throw std::invalid_argument("steering width mismatch");
    int n_classes = static_cast<int>(grammar.j_segments.size());
    if (spec.target_class >= n_classes) throw std::invalid_argument("bad target class");

    SteeringReport report;
    report.target_class = spec.target_class;
    report.n_classes = n_classes;
    for (size_t ai = 0; ai < spec.alphas.size(); ++ai) {
        auto hook = steering_hook(sae_params, spec.layer, spec.latent, spec.alphas[ai]);
        auto seqs = hostlm::generate(lm, spec.n_per_alpha, spec.temperature, spec.seed, &hook);
        report.rows.push_back(tabulate(seqs, grammar, spec.alphas[ai], spec.min_confidence));
        if (spec.alphas[ai] == 0.0 && report.baseline_index < 0) {
            report.baseline_index = static_cast<int>(ai);
        }
    }

    std::vector<double> xs, ys;
    for (const auto& row : report.rows) {
        if (row.degenerate) continue;
        xs.push_back(row.alpha);
        ys.push_back(row.proportions[static_cast<size_t>(spec.target_class)]);
    }
    auto varies = [](const std::vector<double>& v) {
        return !v.empty() &&
               *std::max_element(v.begin(), v.end()) > *std::min_element(v.begin(), v.end());
    };
    if (xs.size() >= 3 && varies(xs) && varies(ys)) {
        report.correlation_defined = true;
        report.pearson_r = numkit::pearson(xs, ys);
        report.spearman_rho = numkit::spearman(xs, ys);
        Rng pr(Rng::derive(spec.seed, 0x70657261UL));
        report.pearson_p = numkit::perm_pvalue(xs, ys, numkit::CorrStat::pearson, spec.n_perm, pr);
        Rng sr(Rng::derive(spec.seed, 0x7370656aUL));
        report.spearman_p =
            numkit::perm_pvalue(xs, ys, numkit::CorrStat::spearman, spec.n_perm, sr);
    }
    return report;
}

PositionalHistogram positional_histogram(const sae::SaeParams& sae_params,
                                         const hostlm::ActivationSet& acts, int latent,
                                         Align align) {
    if (latent < 0 || latent >= sae_params.cfg.d_sae()) {
        throw std::out_of_range("latent out of range");
    }
    if (acts.d_model != sae_params.cfg.d_in) throw std::invalid_argument("input width mismatch");

    size_t n = static_cast<size_t>(acts.n_rows);
    std::vector<double> vals(n, 0.0);
    numkit::parallel_for(n, [&](size_t r) {
        auto src = acts.row(static_cast<int>(r));
        Vec x(src.begin(), src.end());
        auto z = sae::encode_topk(sae_params, x);
        for (size_t s = 0; s < z.indices.size(); ++s) {
            if (z.indices[s] == latent) vals[r] = z.values[s];
        }
    });

    // First J-region position per sequence, for anchored indexing.
    std::map<int, int> anchors;
    if (align == Align::j_anchored) {
        for (size_t r = 0; r < n; ++r) {
            const auto& m = acts.meta[r];
            if (m.region == grammar::kRegionJunction && !anchors.count(m.seq_id)) {
                anchors[m.seq_id] = m.position;
            }
        }
    }

    std::map<int, double> mass;
    double total = 0.0;
    for (size_t r = 0; r < n; ++r) {
        if (vals[r] <= 0.0) continue;
        const auto& m = acts.meta[r];
        int pos = m.position;
        if (align == Align::j_anchored) {
            auto it = anchors.find(m.seq_id);
            if (it == anchors.end()) continue;  // no anchor, mass excluded
            pos -= it->second;
        }
        mass[pos] += vals[r];
        total += vals[r];
    }
    if (total <= 0.0) throw std::runtime_error("no activation mass to bin");

    PositionalHistogram hist;
    for (const auto& [pos, m] : mass) {
        hist.positions.push_back(pos);
        hist.fractions.push_back(m / total);
    }
    return hist;
}

namespace {

void atomic_rename(const std::string& tmp, const std::string& path) {
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw std::runtime_error("rename failed: " + path);
    }
}

// Shortest round-trip decimal form keeps the CSVs readable and reruns
// byte-stable.
std::string fmt(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string class_label(int c, int n_classes) {
    return c < n_classes ? "J" + std::to_string(c + 1) : "unknown";
}

}  // namespace

void write_sweep_csv(const SteeringReport& report, const std::string& path,
                     const std::string& header_comment) {
    std::string tmp = path + ".tmp";
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    if (!header_comment.empty()) os << "# " << header_comment << "\n";
    os << "alpha,class,proportion\n";
    for (const auto& row : report.rows) {
        for (size_t c = 0; c < row.proportions.size(); ++c) {
            os << fmt(row.alpha) << ',' << class_label(static_cast<int>(c), report.n_classes)
               << ',' << fmt(row.proportions[c]) << "\n";
        }
    }
    if (!os.flush()) throw std::runtime_error("write failed: " + tmp);
    os.close();
    atomic_rename(tmp, path);
}

void write_sweep_json(const SteeringReport& report, const std::string& path) {
    nlohmann::json j;
    j["target_class"] = report.target_class;
    j["n_classes"] = report.n_classes;
    j["baseline_index"] = report.baseline_index;
    j["correlation_defined"] = report.correlation_defined;
    j["pearson_r"] = report.pearson_r;
    j["spearman_rho"] = report.spearman_rho;
    j["pearson_p"] = report.pearson_p;
    j["spearman_p"] = report.spearman_p;
    j["alphas"] = nlohmann::json::array();
    j["target_proportions"] = nlohmann::json::array();
    j["mean_length"] = nlohmann::json::array();
    j["unknown_fraction"] = nlohmann::json::array();
    j["degenerate"] = nlohmann::json::array();
    for (const auto& row : report.rows) {
        j["alphas"].push_back(row.alpha);
        j["target_proportions"].push_back(
            row.proportions[static_cast<size_t>(report.target_class)]);
        j["mean_length"].push_back(row.mean_length);
        j["unknown_fraction"].push_back(row.unknown_fraction);
        j["degenerate"].push_back(row.degenerate);
    }
    if (report.baseline_index >= 0) {
        j["baseline_proportions"] =
            report.rows[static_cast<size_t>(report.baseline_index)].proportions;
    }

    std::string tmp = path + ".tmp";
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os << j.dump(2) << "\n";
    if (!os.flush()) throw std::runtime_error("write failed: " + tmp);
    os.close();
    atomic_rename(tmp, path);
}

void write_histogram_csv(const PositionalHistogram& hist, const std::string& path,
                         const std::string& header_comment) {
    std::string tmp = path + ".tmp";
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    if (!header_comment.empty()) os << "# " << header_comment << "\n";
    os << "position,fraction\n";
    for (size_t i = 0; i < hist.positions.size(); ++i) {
        os << hist.positions[i] << ',' << fmt(hist.fractions[i]) << "\n";
    }
    if (!os.flush()) throw std::runtime_error("write failed: " + tmp);
    os.close();
    atomic_rename(tmp, path);
}

}  // namespace saepipe::steer
