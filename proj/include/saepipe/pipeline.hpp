#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "saepipe/grammar.hpp"
#include "saepipe/hostlm.hpp"
#include "saepipe/probe.hpp"
#include "saepipe/sae.hpp"
#include "saepipe/steer.hpp"

// Config-driven orchestration of the full pipeline: corpus -> LM ->
// activations -> SAEs -> probes -> feature selection -> steering ->
// consolidated report. Stage outputs live under workdir keyed by
// (variant, layer); every CSV carries the config hash and seed.

namespace saepipe::pipeline {

struct SaeStage {
    std::string variant = "topk";  // "topk" | "ordered"
    int layer = 1;
    sae::SaeConfig cfg;
};

struct SteerStage {
    std::string name;  // directory key under steer/
    std::string variant = "ordered";
    int layer = 1;
    int target_class = 3;
    std::string direction = "positive";  // probe-weight sign used to pick the latent
    int latent = -1;                     // >= 0 pins the latent explicitly
    int n_per_alpha = 1000;
    double temperature = 1.0;
    double alpha_scale = 1.0;  // multiplies the measured activation unit
    int n_perm = 10000;
};

struct PipelineConfig {
    uint64_t seed = 0;
    std::string workdir = "runs/default";
    bool deterministic = true;
    int threads = 4;
    int n_sequences = 20000;
    grammar::GrammarSpec grammar = grammar::default_grammar();
    hostlm::LmConfig lm;
    std::vector<SaeStage> saes;
    probe::ProbeConfig probe;
    int probe_max_rows = 200000;
    std::vector<SteerStage> steers;
    std::string config_hash;  // hex FNV-1a of the canonical config JSON

    void validate() const;
};

uint64_t fnv1a64(std::string_view s);

// Parses and validates; unknown keys are schema violations. The hash is
// taken over the canonical (sorted-key) serialization.
PipelineConfig config_from_json(const nlohmann::json& j);
PipelineConfig load_config(const std::string& path);

// Revalidates and recomputes the hash after field overrides.
void restamp(PipelineConfig& cfg);

// Comment line stamped into every CSV: "config=<hash> seed=<seed>".
std::string run_stamp(const PipelineConfig& cfg);

struct Paths {
    std::filesystem::path root;

    std::filesystem::path lock() const { return root / "run.lock"; }
    std::filesystem::path corpus() const { return root / "corpus.txt"; }
    std::filesystem::path lm_model() const { return root / "lm" / "model.bin"; }
    std::filesystem::path lm_log() const { return root / "lm" / "train_log.csv"; }
    std::filesystem::path acts(int layer) const;
    std::filesystem::path sae_dir(const std::string& variant, int layer) const;
    std::filesystem::path probe_dir(const std::string& tag) const;
    std::filesystem::path select_dir(const std::string& tag) const;
    std::filesystem::path steer_dir(const std::string& name) const;
    std::filesystem::path report_dir() const { return root / "report"; }
};

Paths paths(const PipelineConfig& cfg);

// Held while a command runs; a leftover lock means another run owns the
// workdir (or crashed and the file must be removed by hand).
class WorkdirLock {
  public:
    explicit WorkdirLock(const std::filesystem::path& workdir);
    ~WorkdirLock();
    WorkdirLock(const WorkdirLock&) = delete;
    WorkdirLock& operator=(const WorkdirLock&) = delete;

  private:
    std::filesystem::path file_;
};

// Probe identity within a run: source is "latents" or "neurons";
// variant is empty for neuron probes.
struct ProbeKey {
    std::string source = "latents";
    std::string variant;
    int layer = 1;
    probe::FeatureLevel level = probe::FeatureLevel::residue;
    probe::LabelKind label = probe::LabelKind::region;

    std::string tag() const;
};

std::string select_tag(const std::string& variant, int layer, probe::LabelKind label);

void cmd_gen_corpus(const PipelineConfig& cfg);
void cmd_train_lm(const PipelineConfig& cfg);
void cmd_dump_acts(const PipelineConfig& cfg, int layer);
void cmd_train_sae(const PipelineConfig& cfg, const std::string& variant, int layer);
void cmd_probe(const PipelineConfig& cfg, const ProbeKey& key);
// The configured battery: latent probes per SAE stage plus neuron
// baselines per distinct layer, at both feature levels.
std::vector<ProbeKey> probe_battery(const PipelineConfig& cfg);
void cmd_probe_all(const PipelineConfig& cfg);
void cmd_select(const PipelineConfig& cfg, const std::string& variant, int layer,
                probe::LabelKind label);
void cmd_select_all(const PipelineConfig& cfg);
void cmd_steer(const PipelineConfig& cfg, const SteerStage& stage);
void cmd_steer_all(const PipelineConfig& cfg);
void cmd_report(const PipelineConfig& cfg);
// All stages in order under a single workdir lock.
void run_all(const PipelineConfig& cfg);

}  // namespace saepipe::pipeline
