#include "saepipe/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace saepipe::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using numkit::Rng;

uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

namespace {

// Shortest round-trip decimal form, so reruns are byte-stable and CSVs
// stay readable.
std::string fmt(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* a : allowed) known = known || key == a;
        if (!known) throw std::invalid_argument("unknown config key: " + where + "." + key);
    }
}

sae::SaeVariant parse_variant(const std::string& s) {
    if (s == "topk") return sae::SaeVariant::topk;
    if (s == "ordered") return sae::SaeVariant::ordered;
    throw std::invalid_argument("unknown sae variant: " + s);
}

std::string variant_name(sae::SaeVariant v) {
    return v == sae::SaeVariant::topk ? "topk" : "ordered";
}

sae::WeightScheme parse_scheme(const std::string& s) {
    if (s == "harmonic") return sae::WeightScheme::harmonic;
    if (s == "geometric") return sae::WeightScheme::geometric;
    throw std::invalid_argument("unknown weight scheme: " + s);
}

std::string scheme_name(sae::WeightScheme s) {
    return s == sae::WeightScheme::harmonic ? "harmonic" : "geometric";
}

std::string level_name(probe::FeatureLevel level) {
    return level == probe::FeatureLevel::residue ? "residue" : "sequence";
}

std::string label_name(probe::LabelKind label) {
    switch (label) {
        case probe::LabelKind::region: return "region";
        case probe::LabelKind::v_gene: return "v_gene";
        default: return "j_gene";
    }
}

std::string class_display(probe::LabelKind label, int c) {
    if (label == probe::LabelKind::region) {
        static const char* names[] = {"background", "r1", "r2", "r3", "junction"};
        return c >= 0 && c < probe::kNumRegionClasses ? names[c] : "class" + std::to_string(c);
    }
    return (label == probe::LabelKind::v_gene ? "V" : "J") + std::to_string(c + 1);
}

// Canonical, fully resolved config; the run hash is FNV-1a over its
// sorted-key dump.
json to_canonical_json(const PipelineConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["workdir"] = cfg.workdir;
    j["deterministic"] = cfg.deterministic;
    j["threads"] = cfg.threads;
    j["grammar"]["n_sequences"] = cfg.n_sequences;
    j["grammar"]["junction_min"] = cfg.grammar.junction_min;
    j["grammar"]["junction_max"] = cfg.grammar.junction_max;
    j["grammar"]["mutation_rate"] = cfg.grammar.mutation_rate;
    j["grammar"]["j_class_probs"] = cfg.grammar.j_class_probs;
    j["lm"]["d_model"] = cfg.lm.d_model;
    j["lm"]["n_layers"] = cfg.lm.n_layers;
    j["lm"]["n_heads"] = cfg.lm.n_heads;
    j["lm"]["context"] = cfg.lm.context;
    j["lm"]["lr"] = cfg.lm.lr;
    j["lm"]["batch"] = cfg.lm.batch;
    j["lm"]["epochs"] = cfg.lm.epochs;
    j["lm"]["val_frac"] = cfg.lm.val_frac;
    j["saes"] = json::array();
    for (const auto& s : cfg.saes) {
        json e;
        e["variant"] = variant_name(s.cfg.variant);
        e["layer"] = s.layer;
        e["r"] = s.cfg.r;
        e["k"] = s.cfg.k;
        e["scheme"] = scheme_name(s.cfg.scheme);
        e["gamma"] = s.cfg.gamma;
        e["c"] = s.cfg.c;
        e["batch"] = s.cfg.batch;
        e["epochs"] = s.cfg.epochs;
        e["lr"] = s.cfg.lr;
        e["linear_truncations"] = s.cfg.linear_truncations;
        e["m_stride"] = s.cfg.m_stride;
        e["log_every"] = s.cfg.log_every;
        j["saes"].push_back(e);
    }
    j["probe"]["c_grid"] = cfg.probe.c_grid;
    j["probe"]["folds"] = cfg.probe.folds;
    j["probe"]["max_iter"] = cfg.probe.max_iter;
    j["probe"]["top_n"] = cfg.probe.top_n;
    j["probe"]["thresholds"] = cfg.probe.thresholds;
    j["probe"]["f1_cut"] = cfg.probe.f1_cut;
    j["probe"]["max_rows"] = cfg.probe_max_rows;
    j["steers"] = json::array();
    for (const auto& s : cfg.steers) {
        json e;
        e["name"] = s.name;
        e["variant"] = s.variant;
        e["layer"] = s.layer;
        e["target_class"] = s.target_class;
        e["direction"] = s.direction;
        e["latent"] = s.latent;
        e["n_per_alpha"] = s.n_per_alpha;
        e["temperature"] = s.temperature;
        e["alpha_scale"] = s.alpha_scale;
        e["n_perm"] = s.n_perm;
        j["steers"].push_back(e);
    }
    return j;
}

std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    auto it = j.find(key);
    return it == j.end() ? fallback : it->get<T>();
}

}  // namespace

void PipelineConfig::validate() const {
    if (workdir.empty()) throw std::invalid_argument("config: workdir must be set");
    if (threads < 1) throw std::invalid_argument("config: threads must be >= 1");
    if (n_sequences < 1) throw std::invalid_argument("config: n_sequences must be >= 1");
    if (probe_max_rows < 1) throw std::invalid_argument("config: probe max_rows must be >= 1");
    grammar.validate();
    lm.validate();
    probe.validate();
    std::set<std::pair<std::string, int>> sae_keys;
    for (const auto& s : saes) {
        if (s.layer < 0 || s.layer >= lm.n_layers) {
            throw std::invalid_argument("config: sae layer " + std::to_string(s.layer) +
                                        " outside valid range [0, " +
                                        std::to_string(lm.n_layers) + ")");
        }
        s.cfg.validate();
        if (!sae_keys.insert({s.variant, s.layer}).second) {
            throw std::invalid_argument("config: duplicate sae stage " + s.variant + " layer " +
                                        std::to_string(s.layer));
        }
    }
    std::set<std::string> steer_names;
    for (const auto& s : steers) {
        if (s.name.empty()) throw std::invalid_argument("config: steer name must be set");
        if (!steer_names.insert(s.name).second) {
            throw std::invalid_argument("config: duplicate steer name " + s.name);
        }
        if (s.direction != "positive" && s.direction != "negative") {
            throw std::invalid_argument("config: steer direction must be positive or negative");
        }
        if (!sae_keys.count({s.variant, s.layer})) {
            throw std::invalid_argument("config: steer " + s.name + " references missing sae " +
                                        s.variant + " layer " + std::to_string(s.layer));
        }
        if (s.target_class < 0 ||
            s.target_class >= static_cast<int>(grammar.j_segments.size())) {
            throw std::invalid_argument("config: steer target_class out of range");
        }
        if (s.n_per_alpha < 100) throw std::invalid_argument("config: n_per_alpha must be >= 100");
        if (!(s.alpha_scale > 0.0)) throw std::invalid_argument("config: alpha_scale must be positive");
        if (s.n_perm < 1) throw std::invalid_argument("config: n_perm must be >= 1");
        if (s.latent < -1) throw std::invalid_argument("config: bad steer latent");
    }
}

PipelineConfig config_from_json(const json& j) {
    check_keys(j, "config",
               {"seed", "workdir", "deterministic", "threads", "grammar", "lm", "saes", "probe",
                "steers"});
    if (!j.contains("seed")) throw std::invalid_argument("config: seed is mandatory");

    PipelineConfig cfg;
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.workdir = get_or<std::string>(j, "workdir", cfg.workdir);
    cfg.deterministic = get_or<bool>(j, "deterministic", cfg.deterministic);
    cfg.threads = get_or<int>(j, "threads", cfg.threads);

    if (j.contains("grammar")) {
        const json& g = j["grammar"];
        check_keys(g, "grammar",
                   {"n_sequences", "junction_min", "junction_max", "mutation_rate",
                    "j_class_probs"});
        cfg.n_sequences = get_or<int>(g, "n_sequences", cfg.n_sequences);
        cfg.grammar.junction_min = get_or<int>(g, "junction_min", cfg.grammar.junction_min);
        cfg.grammar.junction_max = get_or<int>(g, "junction_max", cfg.grammar.junction_max);
        cfg.grammar.mutation_rate = get_or<double>(g, "mutation_rate", cfg.grammar.mutation_rate);
        cfg.grammar.j_class_probs =
            get_or<std::vector<double>>(g, "j_class_probs", cfg.grammar.j_class_probs);
    }
    if (j.contains("lm")) {
        const json& l = j["lm"];
        check_keys(l, "lm",
                   {"d_model", "n_layers", "n_heads", "context", "lr", "batch", "epochs",
                    "val_frac"});
        cfg.lm.d_model = get_or<int>(l, "d_model", cfg.lm.d_model);
        cfg.lm.n_layers = get_or<int>(l, "n_layers", cfg.lm.n_layers);
        cfg.lm.n_heads = get_or<int>(l, "n_heads", cfg.lm.n_heads);
        cfg.lm.context = get_or<int>(l, "context", cfg.lm.context);
        cfg.lm.lr = get_or<double>(l, "lr", cfg.lm.lr);
        cfg.lm.batch = get_or<int>(l, "batch", cfg.lm.batch);
        cfg.lm.epochs = get_or<int>(l, "epochs", cfg.lm.epochs);
        cfg.lm.val_frac = get_or<double>(l, "val_frac", cfg.lm.val_frac);
    }
    if (j.contains("saes")) {
        if (!j["saes"].is_array()) throw std::invalid_argument("config: saes must be an array");
        for (const json& e : j["saes"]) {
            check_keys(e, "saes[]",
                       {"variant", "layer", "r", "k", "scheme", "gamma", "c", "batch", "epochs",
                        "lr", "linear_truncations", "m_stride", "log_every"});
            SaeStage s;
            s.variant = get_or<std::string>(e, "variant", s.variant);
            s.layer = get_or<int>(e, "layer", s.layer);
            s.cfg.variant = parse_variant(s.variant);
            s.cfg.d_in = cfg.lm.d_model;
            s.cfg.r = get_or<int>(e, "r", s.cfg.r);
            s.cfg.k = get_or<int>(e, "k", s.cfg.k);
            s.cfg.scheme = parse_scheme(get_or<std::string>(e, "scheme", scheme_name(s.cfg.scheme)));
            s.cfg.gamma = get_or<double>(e, "gamma", s.cfg.gamma);
            s.cfg.c = get_or<double>(e, "c", s.cfg.c);
            s.cfg.batch = get_or<int>(e, "batch", s.cfg.batch);
            s.cfg.epochs = get_or<int>(e, "epochs", s.cfg.epochs);
            s.cfg.lr = get_or<double>(e, "lr", s.cfg.lr);
            s.cfg.linear_truncations =
                get_or<bool>(e, "linear_truncations", s.cfg.linear_truncations);
            s.cfg.m_stride = get_or<int>(e, "m_stride", s.cfg.m_stride);
            s.cfg.log_every = get_or<int>(e, "log_every", s.cfg.log_every);
            cfg.saes.push_back(std::move(s));
        }
    }
    if (j.contains("probe")) {
        const json& p = j["probe"];
        check_keys(p, "probe",
                   {"c_grid", "folds", "max_iter", "top_n", "thresholds", "f1_cut", "max_rows"});
        cfg.probe.c_grid = get_or<std::vector<double>>(p, "c_grid", cfg.probe.c_grid);
        cfg.probe.folds = get_or<int>(p, "folds", cfg.probe.folds);
        cfg.probe.max_iter = get_or<int>(p, "max_iter", cfg.probe.max_iter);
        cfg.probe.top_n = get_or<int>(p, "top_n", cfg.probe.top_n);
        cfg.probe.thresholds = get_or<std::vector<double>>(p, "thresholds", cfg.probe.thresholds);
        cfg.probe.f1_cut = get_or<double>(p, "f1_cut", cfg.probe.f1_cut);
        cfg.probe_max_rows = get_or<int>(p, "max_rows", cfg.probe_max_rows);
    }
    if (j.contains("steers")) {
        if (!j["steers"].is_array()) throw std::invalid_argument("config: steers must be an array");
        for (const json& e : j["steers"]) {
            check_keys(e, "steers[]",
                       {"name", "variant", "layer", "target_class", "direction", "latent",
                        "n_per_alpha", "temperature", "alpha_scale", "n_perm"});
            SteerStage s;
            s.name = get_or<std::string>(e, "name", s.name);
            s.variant = get_or<std::string>(e, "variant", s.variant);
            s.layer = get_or<int>(e, "layer", s.layer);
            s.target_class = get_or<int>(e, "target_class", s.target_class);
            s.direction = get_or<std::string>(e, "direction", s.direction);
            s.latent = get_or<int>(e, "latent", s.latent);
            s.n_per_alpha = get_or<int>(e, "n_per_alpha", s.n_per_alpha);
            s.temperature = get_or<double>(e, "temperature", s.temperature);
            s.alpha_scale = get_or<double>(e, "alpha_scale", s.alpha_scale);
            s.n_perm = get_or<int>(e, "n_perm", s.n_perm);
            cfg.steers.push_back(std::move(s));
        }
    }

    restamp(cfg);
    return cfg;
}

void restamp(PipelineConfig& cfg) {
    cfg.validate();
    cfg.config_hash = hash_hex(fnv1a64(to_canonical_json(cfg).dump()));
}

PipelineConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read config: " + path);
    json j;
    try {
        j = json::parse(is, nullptr, true, true);  // allow comments
    } catch (const json::parse_error& e) {
        throw std::runtime_error("config parse error in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

std::string run_stamp(const PipelineConfig& cfg) {
    return "config=" + cfg.config_hash + " seed=" + std::to_string(cfg.seed);
}

fs::path Paths::acts(int layer) const {
    return root / "acts" / ("layer" + std::to_string(layer) + ".bin");
}

fs::path Paths::sae_dir(const std::string& variant, int layer) const {
    return root / "sae" / (variant + "_layer" + std::to_string(layer));
}

fs::path Paths::probe_dir(const std::string& tag) const { return root / "probe" / tag; }

fs::path Paths::select_dir(const std::string& tag) const { return root / "select" / tag; }

fs::path Paths::steer_dir(const std::string& name) const { return root / "steer" / name; }

Paths paths(const PipelineConfig& cfg) { return Paths{fs::path(cfg.workdir)}; }

WorkdirLock::WorkdirLock(const fs::path& workdir) {
    fs::create_directories(workdir);
    file_ = workdir / "run.lock";
    int fd = ::open(file_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        throw std::runtime_error("workdir locked: " + file_.string() +
                                 " (remove the file if no other run is active)");
    }
    std::string pid = std::to_string(::getpid()) + "\n";
    ssize_t n = ::write(fd, pid.data(), pid.size());
    (void)n;
    ::close(fd);
}

WorkdirLock::~WorkdirLock() { std::remove(file_.c_str()); }

std::string ProbeKey::tag() const {
    std::string t = source;
    if (!variant.empty()) t += "_" + variant;
    t += "_layer" + std::to_string(layer) + "_" + level_name(level) + "_" + label_name(label);
    return t;
}

std::string select_tag(const std::string& variant, int layer, probe::LabelKind label) {
    return variant + "_layer" + std::to_string(layer) + "_" + label_name(label);
}

namespace {

void atomic_rename(const fs::path& tmp, const fs::path& path) {
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw std::runtime_error("rename failed: " + path.string());
}

// CSV sink that only appears at its final path once fully written.
struct AtomicCsv {
    fs::path final_path;
    fs::path tmp_path;
    std::ofstream os;

    AtomicCsv(const fs::path& path, const std::string& stamp, const std::string& header)
        : final_path(path), tmp_path(path.string() + ".tmp") {
        fs::create_directories(path.parent_path());
        os.open(tmp_path, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + tmp_path.string());
        if (!stamp.empty()) os << "# " << stamp << "\n";
        os << header << "\n";
    }

    void done() {
        if (!os.flush()) throw std::runtime_error("write failed: " + tmp_path.string());
        os.close();
        atomic_rename(tmp_path, final_path);
    }
};

void write_json_atomic(const fs::path& path, const json& j) {
    fs::create_directories(path.parent_path());
    fs::path tmp = path.string() + ".tmp";
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << j.dump(2) << "\n";
    if (!os.flush()) throw std::runtime_error("write failed: " + tmp.string());
    os.close();
    atomic_rename(tmp, path);
}

json read_json(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    return json::parse(is);
}

void require_file(const fs::path& path, const std::string& producer) {
    if (!fs::exists(path)) {
        throw std::runtime_error("missing input: " + path.string() + " (run " + producer +
                                 " first)");
    }
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

CsvTable read_csv(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    CsvTable t;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto fields = split_csv_line(line);
        if (t.header.empty()) {
            t.header = fields;
        } else {
            t.rows.push_back(fields);
        }
    }
    return t;
}

void apply_threads(const PipelineConfig& cfg) { numkit::set_max_threads(cfg.threads); }

const SaeStage& find_sae_stage(const PipelineConfig& cfg, const std::string& variant, int layer) {
    for (const auto& s : cfg.saes) {
        if (s.variant == variant && s.layer == layer) return s;
    }
    throw std::runtime_error("no sae stage configured for " + variant + " layer " +
                             std::to_string(layer));
}

uint64_t stage_seed(const PipelineConfig& cfg, const std::string& name) {
    return Rng::derive(cfg.seed, fnv1a64(name));
}

std::vector<std::vector<int>> corpus_tokens(const std::vector<grammar::LabeledSequence>& corpus) {
    std::vector<std::vector<int>> tokens;
    tokens.reserve(corpus.size());
    for (const auto& s : corpus) tokens.push_back(s.tokens);
    return tokens;
}

// ---- stage bodies (called with the workdir lock held) ----

void do_gen_corpus(const PipelineConfig& cfg) {
    Paths p = paths(cfg);
    auto corpus = grammar::sample_corpus(cfg.grammar, cfg.n_sequences, stage_seed(cfg, "corpus"));
    fs::create_directories(p.root);
    std::string tmp = p.corpus().string() + ".tmp";
    grammar::write_corpus(tmp, corpus, run_stamp(cfg));
    atomic_rename(tmp + ".labels.csv", p.corpus().string() + ".labels.csv");
    atomic_rename(tmp, p.corpus());
}

void do_train_lm(const PipelineConfig& cfg) {
    Paths p = paths(cfg);
    require_file(p.corpus(), "gen-corpus");
    auto corpus = grammar::read_corpus(p.corpus().string());
    auto trained = hostlm::train_lm(corpus_tokens(corpus), cfg.lm, stage_seed(cfg, "lm"));
    fs::create_directories(p.lm_model().parent_path());
    hostlm::save_lm(trained.params, p.lm_model().string());

    AtomicCsv csv(p.lm_log(), run_stamp(cfg), "series,step,value");
    for (size_t i = 0; i < trained.log.steps.size(); ++i) {
        csv.os << "train," << trained.log.steps[i] << ',' << fmt(trained.log.step_loss[i]) << "\n";
    }
    for (size_t e = 0; e < trained.log.epoch_val_loss.size(); ++e) {
        csv.os << "val," << e << ',' << fmt(trained.log.epoch_val_loss[e]) << "\n";
    }
    csv.os << "unigram_baseline,0," << fmt(trained.log.unigram_baseline) << "\n";
    csv.done();
}

void do_dump_acts(const PipelineConfig& cfg, int layer) {
    if (layer < 0 || layer >= cfg.lm.n_layers) {
        throw std::runtime_error("bad layer index " + std::to_string(layer) +
                                 ": valid range [0, " + std::to_string(cfg.lm.n_layers) + ")");
    }
    Paths p = paths(cfg);
    require_file(p.corpus(), "gen-corpus");
    require_file(p.lm_model(), "train-lm");
    auto corpus = grammar::read_corpus(p.corpus().string());
    auto lm = hostlm::load_lm(p.lm_model().string());
    fs::create_directories(p.acts(layer).parent_path());
    hostlm::dump_activations(lm, corpus, layer, p.acts(layer).string(), run_stamp(cfg));
}

void do_train_sae(const PipelineConfig& cfg, const std::string& variant, int layer) {
    const SaeStage& stage = find_sae_stage(cfg, variant, layer);
    Paths p = paths(cfg);
    require_file(p.acts(layer), "dump-acts");
    auto acts = hostlm::read_activations(p.acts(layer).string());
    auto trained = sae::train_sae(stage.cfg, acts, stage_seed(cfg, "sae:" + variant + ":" +
                                                              std::to_string(layer)),
                                  !cfg.deterministic);
    fs::create_directories(p.sae_dir(variant, layer));
    sae::save_sae(trained.params, (p.sae_dir(variant, layer) / "model.bin").string());

    AtomicCsv csv(p.sae_dir(variant, layer) / "train_log.csv", run_stamp(cfg),
                  "step,recon,sparsity_term,dead_fraction,wallclock");
    for (const auto& row : trained.log.rows) {
        csv.os << row.step << ',' << fmt(row.recon) << ',' << fmt(row.sparsity_term) << ','
               << fmt(row.dead_fraction) << ',' << fmt(row.wallclock) << "\n";
    }
    csv.done();

    json summary;
    summary["variant"] = variant;
    summary["layer"] = layer;
    summary["initial_loss"] = trained.log.initial_loss;
    summary["final_smoothed_loss"] = trained.log.final_smoothed_loss;
    summary["steps"] = trained.log.step_loss.size();
    write_json_atomic(p.sae_dir(variant, layer) / "summary.json", summary);
}

// Probe and select stages share one per-layer row subsample so latent
// and neuron probes (and the threshold sweeps) see identical data.
hostlm::ActivationSet layer_subsample(const PipelineConfig& cfg, int layer) {
    Paths p = paths(cfg);
    require_file(p.acts(layer), "dump-acts");
    auto acts = hostlm::read_activations(p.acts(layer).string());
    return probe::subsample_sequences(acts, cfg.probe_max_rows,
                                      stage_seed(cfg, "subsample:" + std::to_string(layer)));
}

probe::DesignMatrix subset_design(const probe::DesignMatrix& d, const std::vector<int>& keep) {
    probe::DesignMatrix out;
    out.n_features = d.n_features;
    out.n_classes = d.n_classes;
    for (int r : keep) {
        size_t b = d.indptr[static_cast<size_t>(r)];
        size_t e = d.indptr[static_cast<size_t>(r) + 1];
        out.append_row({d.indices.data() + b, e - b}, {d.values.data() + b, e - b});
        out.y.push_back(d.y[static_cast<size_t>(r)]);
        out.row_seq.push_back(d.row_seq[static_cast<size_t>(r)]);
    }
    return out;
}

void do_probe(const PipelineConfig& cfg, const ProbeKey& key) {
    Paths p = paths(cfg);
    auto sub = layer_subsample(cfg, key.layer);

    sae::SaeParams sae_params;
    const sae::SaeParams* sae_ptr = nullptr;
    if (key.source == "latents") {
        fs::path model = p.sae_dir(key.variant, key.layer) / "model.bin";
        require_file(model, "train-sae");
        sae_params = sae::load_sae(model.string());
        sae_ptr = &sae_params;
    } else if (key.source != "neurons") {
        throw std::invalid_argument("probe source must be latents or neurons");
    }

    auto design = probe::featurize(sub, sae_ptr, key.level, key.label);
    std::string tag = key.tag();
    auto result = probe::cv_grid_search(design, cfg.probe, stage_seed(cfg, "probe:" + tag));

    fs::path dir = p.probe_dir(tag);
    fs::create_directories(dir);
    probe::save_probe(result, (dir / "model.bin").string());

    AtomicCsv cv(dir / "cv.csv", run_stamp(cfg), "c,mean_macro_f1,mean_accuracy");
    for (const auto& s : result.cv_scores) {
        cv.os << fmt(s.c) << ',' << fmt(s.mean_macro_f1) << ',' << fmt(s.mean_accuracy) << "\n";
    }
    cv.done();

    // Honest held-out table: split whole sequences 80/20, refit at the
    // chosen C on the large side, score per class on the rest.
    std::vector<int> seqs;
    {
        std::unordered_set<int> seen;
        for (int s : design.row_seq) {
            if (seen.insert(s).second) seqs.push_back(s);
        }
    }
    Rng splitter(stage_seed(cfg, "probe-holdout:" + tag));
    splitter.shuffle(seqs);
    size_t n_hold = std::max<size_t>(1, seqs.size() / 5);
    std::unordered_set<int> hold_seqs(seqs.end() - static_cast<long>(n_hold), seqs.end());
    std::vector<int> train_rows, hold_rows;
    for (int r = 0; r < design.rows(); ++r) {
        (hold_seqs.count(design.row_seq[static_cast<size_t>(r)]) ? hold_rows : train_rows)
            .push_back(r);
    }
    auto train_d = subset_design(design, train_rows);
    auto hold_d = subset_design(design, hold_rows);
    auto model = probe::fit_logreg(train_d, result.best_c, cfg.probe.max_iter);
    auto pred = probe::predict(model, hold_d);

    int n_classes = design.n_classes;
    std::vector<size_t> tp(static_cast<size_t>(n_classes)), fp(tp.size()), fn(tp.size()),
        support(tp.size());
    size_t correct = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        int want = hold_d.y[i];
        int got = pred[i];
        ++support[static_cast<size_t>(want)];
        if (got == want) {
            ++correct;
            ++tp[static_cast<size_t>(want)];
        } else {
            ++fp[static_cast<size_t>(got)];
            ++fn[static_cast<size_t>(want)];
        }
    }
    double macro_p = 0.0, macro_r = 0.0, macro_f = 0.0;
    AtomicCsv cls(dir / "classes.csv", run_stamp(cfg), "class,label,precision,recall,f1,support");
    for (int c = 0; c < n_classes; ++c) {
        auto m = numkit::prf1_from_counts(tp[static_cast<size_t>(c)], fp[static_cast<size_t>(c)],
                                          fn[static_cast<size_t>(c)]);
        macro_p += m.precision;
        macro_r += m.recall;
        macro_f += m.f1;
        cls.os << c << ',' << class_display(key.label, c) << ',' << fmt(m.precision) << ','
               << fmt(m.recall) << ',' << fmt(m.f1) << ',' << support[static_cast<size_t>(c)]
               << "\n";
    }
    macro_p /= n_classes;
    macro_r /= n_classes;
    macro_f /= n_classes;
    double hold_acc = pred.empty() ? 0.0 : static_cast<double>(correct) / pred.size();
    cls.os << ",macro_avg," << fmt(macro_p) << ',' << fmt(macro_r) << ',' << fmt(macro_f) << ','
           << pred.size() << "\n";
    cls.os << ",accuracy,,," << fmt(hold_acc) << ',' << pred.size() << "\n";
    cls.done();

    json summary;
    summary["tag"] = tag;
    summary["best_c"] = result.best_c;
    summary["cv_macro_f1"] = result.val_metric;
    for (const auto& s : result.cv_scores) {
        if (s.c == result.best_c) summary["cv_accuracy"] = s.mean_accuracy;
    }
    summary["train_macro_f1"] = result.train_metric;
    summary["holdout_macro_f1"] = macro_f;
    summary["holdout_accuracy"] = hold_acc;
    summary["n_classes"] = n_classes;
    summary["n_rows"] = design.rows();
    summary["n_features"] = design.n_features;
    write_json_atomic(dir / "summary.json", summary);
}

void do_select(const PipelineConfig& cfg, const std::string& variant, int layer,
               probe::LabelKind label) {
    Paths p = paths(cfg);
    ProbeKey key;
    key.source = "latents";
    key.variant = variant;
    key.layer = layer;
    key.level =
        label == probe::LabelKind::region ? probe::FeatureLevel::residue : probe::FeatureLevel::sequence;
    key.label = label;
    fs::path probe_model = p.probe_dir(key.tag()) / "model.bin";
    require_file(probe_model, "probe");
    fs::path sae_model = p.sae_dir(variant, layer) / "model.bin";
    require_file(sae_model, "train-sae");

    auto result = probe::load_probe(probe_model.string());
    auto sae_params = sae::load_sae(sae_model.string());
    auto sub = layer_subsample(cfg, layer);
    auto design = probe::featurize(sub, &sae_params, key.level, key.label);

    std::vector<probe::FeatureRecord> records;
    for (int c = 0; c < result.n_classes; ++c) {
        auto ranked = probe::rank_latents(result, c, cfg.probe.top_n);
        std::vector<uint8_t> truth(static_cast<size_t>(design.rows()));
        for (int r = 0; r < design.rows(); ++r) {
            truth[static_cast<size_t>(r)] = design.y[static_cast<size_t>(r)] == c ? 1 : 0;
        }
        const size_t kBatch = 64;
        for (size_t b = 0; b < ranked.size(); b += kBatch) {
            size_t e = std::min(ranked.size(), b + kBatch);
            std::vector<int> cols(ranked.begin() + static_cast<long>(b),
                                  ranked.begin() + static_cast<long>(e));
            numkit::Mat block = probe::extract_columns(design, cols);
            std::vector<probe::FeatureRecord> slot(cols.size());
            numkit::parallel_for(cols.size(), [&](size_t i) {
                numkit::Vec col(static_cast<size_t>(block.rows));
                for (int r = 0; r < block.rows; ++r) {
                    col[static_cast<size_t>(r)] = block.at(r, static_cast<int>(i));
                }
                slot[i] = probe::threshold_sweep(col, truth, cfg.probe);
                slot[i].latent = cols[i];
                slot[i].concept_id = c;
                slot[i].layer = layer;
            });
            records.insert(records.end(), slot.begin(), slot.end());
        }
    }

    fs::path dir = p.select_dir(select_tag(variant, layer, label));
    AtomicCsv feat(dir / "features.csv", run_stamp(cfg),
                   "concept,concept_label,latent,best_threshold,precision,recall,f1,accepted");
    for (const auto& r : records) {
        feat.os << r.concept_id << ',' << class_display(label, r.concept_id) << ',' << r.latent
                << ',' << fmt(r.best_threshold) << ',' << fmt(r.precision) << ',' << fmt(r.recall)
                << ',' << fmt(r.f1) << ',' << (r.accepted ? 1 : 0) << "\n";
    }
    feat.done();

    auto table = probe::feature_report(records, result.n_classes);
    AtomicCsv sum(dir / "summary.csv", run_stamp(cfg), "concept,concept_label,feature_count,max_f1");
    for (const auto& row : table) {
        sum.os << row.concept_id << ',' << class_display(label, row.concept_id) << ','
               << row.feature_count << ',' << fmt(row.max_f1) << "\n";
    }
    sum.done();
}

// Held-out rows (the LM validation tail) used for the alpha unit and the
// positional histograms.
hostlm::ActivationSet heldout_rows(const PipelineConfig& cfg, const hostlm::ActivationSet& acts) {
    int first_val_seq = static_cast<int>(
        std::floor(static_cast<double>(cfg.n_sequences) * (1.0 - cfg.lm.val_frac)));
    hostlm::ActivationSet out;
    out.d_model = acts.d_model;
    const int kMaxRows = 50000;
    for (int r = 0; r < acts.n_rows && out.n_rows < kMaxRows; ++r) {
        if (acts.meta[static_cast<size_t>(r)].seq_id < first_val_seq) continue;
        auto row = acts.row(r);
        out.data.insert(out.data.end(), row.begin(), row.end());
        out.meta.push_back(acts.meta[static_cast<size_t>(r)]);
        ++out.n_rows;
    }
    if (out.n_rows == 0) {
        // No validation tail configured: fall back to the last 5% of rows.
        int start = acts.n_rows - std::max(1, acts.n_rows / 20);
        for (int r = start; r < acts.n_rows && out.n_rows < kMaxRows; ++r) {
            auto row = acts.row(r);
            out.data.insert(out.data.end(), row.begin(), row.end());
            out.meta.push_back(acts.meta[static_cast<size_t>(r)]);
            ++out.n_rows;
        }
    }
    return out;
}

int pick_latent(const probe::ProbeResult& result, const SteerStage& stage) {
    if (stage.latent >= 0) return stage.latent;
    if (stage.target_class >= result.n_classes) {
        throw std::runtime_error("steer target class missing from probe");
    }
    if (stage.direction == "positive") {
        auto ranked = probe::rank_latents(result, stage.target_class, 1);
        if (ranked.empty()) {
            throw std::runtime_error("no positively probed latent for class " +
                                     std::to_string(stage.target_class));
        }
        return ranked[0];
    }
    int best = -1;
    double best_w = 0.0;
    for (int f = 0; f < result.weights.cols; ++f) {
        double w = result.weights.at(stage.target_class, f);
        if (w < best_w) {
            best_w = w;
            best = f;
        }
    }
    if (best < 0) {
        throw std::runtime_error("no negatively probed latent for class " +
                                 std::to_string(stage.target_class));
    }
    return best;
}

void do_steer(const PipelineConfig& cfg, const SteerStage& stage) {
    Paths p = paths(cfg);
    require_file(p.lm_model(), "train-lm");
    fs::path sae_model = p.sae_dir(stage.variant, stage.layer) / "model.bin";
    require_file(sae_model, "train-sae");
    require_file(p.acts(stage.layer), "dump-acts");

    auto lm = hostlm::load_lm(p.lm_model().string());
    auto sae_params = sae::load_sae(sae_model.string());
    auto acts = hostlm::read_activations(p.acts(stage.layer).string());
    auto held = heldout_rows(cfg, acts);

    int latent = stage.latent;
    if (latent < 0) {
        ProbeKey key;
        key.source = "latents";
        key.variant = stage.variant;
        key.layer = stage.layer;
        key.level = probe::FeatureLevel::sequence;
        key.label = probe::LabelKind::j_gene;
        fs::path probe_model = p.probe_dir(key.tag()) / "model.bin";
        require_file(probe_model, "probe");
        latent = pick_latent(probe::load_probe(probe_model.string()), stage);
    }

    double unit = steer::mean_active_magnitude(sae_params, held);
    steer::SteeringSpec spec;
    spec.layer = stage.layer;
    spec.latent = latent;
    spec.alphas = steer::default_alpha_grid(unit * stage.alpha_scale);
    spec.n_per_alpha = stage.n_per_alpha;
    spec.temperature = stage.temperature;
    spec.seed = stage_seed(cfg, "steer:" + stage.name);
    spec.target_class = stage.target_class;
    spec.n_perm = stage.n_perm;

    auto report = steer::run_sweep(lm, sae_params, spec, cfg.grammar);

    fs::path dir = p.steer_dir(stage.name);
    fs::create_directories(dir);
    steer::write_sweep_csv(report, (dir / "sweep.csv").string(), run_stamp(cfg));
    steer::write_sweep_json(report, (dir / "sweep.json").string());

    json sj;
    sj["name"] = stage.name;
    sj["variant"] = stage.variant;
    sj["layer"] = stage.layer;
    sj["latent"] = latent;
    sj["direction"] = stage.direction;
    sj["target_class"] = stage.target_class;
    sj["alpha_unit"] = unit;
    sj["alpha_scale"] = stage.alpha_scale;
    sj["alphas"] = spec.alphas;
    sj["n_per_alpha"] = stage.n_per_alpha;
    sj["temperature"] = stage.temperature;
    sj["n_perm"] = stage.n_perm;
    sj["seed"] = spec.seed;
    write_json_atomic(dir / "spec.json", sj);

    for (auto align : {steer::Align::absolute, steer::Align::j_anchored}) {
        std::string name = align == steer::Align::absolute ? "hist_absolute.csv" : "hist_anchored.csv";
        steer::PositionalHistogram hist;
        try {
            hist = steer::positional_histogram(sae_params, held, latent, align);
        } catch (const std::runtime_error&) {
            // Latent silent on held-out rows: keep an empty table.
        }
        steer::write_histogram_csv(hist, (dir / name).string(), run_stamp(cfg));
    }
}

void do_report(const PipelineConfig& cfg) {
    Paths p = paths(cfg);
    fs::create_directories(p.report_dir());

    // Table 1 analog: held-out per-class metrics of every probe.
    AtomicCsv t1(p.report_dir() / "table1.csv", run_stamp(cfg),
                 "probe,class,label,precision,recall,f1,support");
    for (const auto& key : probe_battery(cfg)) {
        fs::path cls = p.probe_dir(key.tag()) / "classes.csv";
        require_file(cls, "probe");
        for (const auto& row : read_csv(cls).rows) {
            t1.os << key.tag();
            for (const auto& f : row) t1.os << ',' << f;
            t1.os << "\n";
        }
    }
    t1.done();

    // Table 2 analog: feature counts and max F1 per concept.
    AtomicCsv t2(p.report_dir() / "table2.csv", run_stamp(cfg),
                 "selection,concept,concept_label,feature_count,max_f1");
    for (const auto& s : cfg.saes) {
        for (auto label : {probe::LabelKind::region, probe::LabelKind::j_gene}) {
            std::string tag = select_tag(s.variant, s.layer, label);
            fs::path sum = p.select_dir(tag) / "summary.csv";
            require_file(sum, "select");
            for (const auto& row : read_csv(sum).rows) {
                t2.os << tag;
                for (const auto& f : row) t2.os << ',' << f;
                t2.os << "\n";
            }
        }
    }
    t2.done();

    // Table 3 analog: steering outcomes.
    AtomicCsv t3(p.report_dir() / "table3.csv", run_stamp(cfg),
                 "steer,variant,layer,latent,direction,target_class,pearson_r,pearson_p,"
                 "spearman_rho,spearman_p,baseline_target_proportion,"
                 "target_proportion_min_alpha,target_proportion_max_alpha");
    for (const auto& s : cfg.steers) {
        fs::path dir = p.steer_dir(s.name);
        require_file(dir / "sweep.json", "steer");
        require_file(dir / "spec.json", "steer");
        json sweep = read_json(dir / "sweep.json");
        json spec = read_json(dir / "spec.json");
        double baseline = 0.0;
        if (sweep.contains("baseline_proportions")) {
            baseline = sweep["baseline_proportions"][s.target_class].get<double>();
        }
        auto props = sweep["target_proportions"].get<std::vector<double>>();
        t3.os << s.name << ',' << s.variant << ',' << s.layer << ','
              << spec["latent"].get<int>() << ',' << s.direction << ',' << s.target_class << ','
              << fmt(sweep["pearson_r"].get<double>()) << ','
              << fmt(sweep["pearson_p"].get<double>()) << ','
              << fmt(sweep["spearman_rho"].get<double>()) << ','
              << fmt(sweep["spearman_p"].get<double>()) << ',' << fmt(baseline) << ','
              << fmt(props.front()) << ',' << fmt(props.back()) << "\n";
    }
    t3.done();

    json summary;
    summary["config"] = cfg.config_hash;
    summary["seed"] = cfg.seed;
    summary["tables"] = {"table1.csv", "table2.csv", "table3.csv"};
    json probes = json::array();
    for (const auto& key : probe_battery(cfg)) probes.push_back(key.tag());
    summary["probes"] = probes;
    json selects = json::array();
    for (const auto& s : cfg.saes) {
        for (auto label : {probe::LabelKind::region, probe::LabelKind::j_gene}) {
            selects.push_back(select_tag(s.variant, s.layer, label));
        }
    }
    summary["selections"] = selects;
    json steers = json::array();
    for (const auto& s : cfg.steers) steers.push_back(s.name);
    summary["steers"] = steers;
    write_json_atomic(p.report_dir() / "run_summary.json", summary);
}

}  // namespace

std::vector<ProbeKey> probe_battery(const PipelineConfig& cfg) {
    std::vector<ProbeKey> keys;
    for (const auto& s : cfg.saes) {
        keys.push_back({"latents", s.variant, s.layer, probe::FeatureLevel::residue,
                        probe::LabelKind::region});
        keys.push_back({"latents", s.variant, s.layer, probe::FeatureLevel::sequence,
                        probe::LabelKind::j_gene});
    }
    std::set<int> layers;
    for (const auto& s : cfg.saes) layers.insert(s.layer);
    for (int layer : layers) {
        keys.push_back({"neurons", "", layer, probe::FeatureLevel::residue,
                        probe::LabelKind::region});
        keys.push_back({"neurons", "", layer, probe::FeatureLevel::sequence,
                        probe::LabelKind::j_gene});
    }
    return keys;
}

void cmd_gen_corpus(const PipelineConfig& cfg) {
    apply_threads(cfg);
    WorkdirLock lock(paths(cfg).root);
    do_gen_corpus(cfg);
}

void cmd_train_lm(const PipelineConfig& cfg) {
    apply_threads(cfg);
    WorkdirLock lock(paths(cfg).root);
    do_train_lm(cfg);
}

void cmd_dump_acts(const PipelineConfig& cfg, int layer) {
    apply_threads(cfg);
    WorkdirLock lock(paths(cfg).root);
    do_dump_acts(cfg, layer);
}

void cmd_train_sae(const PipelineConfig& cfg, const std::string& variant, int layer) {
    apply_threads(cfg);
    WorkdirLock lock(paths(cfg).root);
    do_train_sae(cfg, variant, layer);
}

void cmd_probe(const PipelineConfig& cfg, const ProbeKey& key) {
    apply_threads(cfg);
    WorkdirLock lock(paths(cfg).root);
    do_probe(cfg, key);
}

void cmd_probe_all(const PipelineConfig& cfg) {
    apply_threads(cfg);
    WorkdirLock lock(paths(cfg).root);
    for (const auto& key : probe_battery(cfg)) do_probe(cfg, key);
}

void cmd_select(const PipelineConfig& cfg, const std::string& variant, int layer,
                probe::LabelKind label) {
    apply_threads(cfg);
    WorkdirLock lock(paths(cfg).root);
    do_select(cfg, variant, layer, label);
}

void cmd_select_all(const PipelineConfig& cfg) {
    apply_threads(cfg);
    WorkdirLock lock(paths(cfg).root);
    for (const auto& s : cfg.saes) {
        do_select(cfg, s.variant, s.layer, probe::LabelKind::region);
        do_select(cfg, s.variant, s.layer, probe::LabelKind::j_gene);
    }
}

void cmd_steer(const PipelineConfig& cfg, const SteerStage& stage) {
    apply_threads(cfg);
    WorkdirLock lock(paths(cfg).root);
    do_steer(cfg, stage);
}

void cmd_steer_all(const PipelineConfig& cfg) {
    apply_threads(cfg);
    WorkdirLock lock(paths(cfg).root);
    for (const auto& s : cfg.steers) do_steer(cfg, s);
}

void cmd_report(const PipelineConfig& cfg) {
    apply_threads(cfg);
    WorkdirLock lock(paths(cfg).root);
    do_report(cfg);
}

void run_all(const PipelineConfig& cfg) {
    apply_threads(cfg);
    WorkdirLock lock(paths(cfg).root);
    do_gen_corpus(cfg);
    do_train_lm(cfg);
    std::set<int> layers;
    for (const auto& s : cfg.saes) layers.insert(s.layer);
    for (int layer : layers) do_dump_acts(cfg, layer);
    for (const auto& s : cfg.saes) do_train_sae(cfg, s.variant, s.layer);
    for (const auto& key : probe_battery(cfg)) do_probe(cfg, key);
    for (const auto& s : cfg.saes) {
        do_select(cfg, s.variant, s.layer, probe::LabelKind::region);
        do_select(cfg, s.variant, s.layer, probe::LabelKind::j_gene);
    }
    for (const auto& s : cfg.steers) do_steer(cfg, s);
    do_report(cfg);
}

}  // namespace saepipe::pipeline
