#include <cstdio>
#include <exception>
#include <optional>
#include <set>
#include <string>

#include <CLI11.hpp>

#include "saepipe/pipeline.hpp"

// Subcommand front end over the pipeline stages. Every command loads the
// config, applies flag overrides, restamps the run hash, and dispatches.

namespace {

saepipe::probe::LabelKind parse_label(const std::string& s) {
    if (s == "region") return saepipe::probe::LabelKind::region;
    if (s == "v_gene") return saepipe::probe::LabelKind::v_gene;
    if (s == "j_gene") return saepipe::probe::LabelKind::j_gene;
    throw std::runtime_error("unknown concept: " + s + " (expected region, v_gene, or j_gene)");
}

saepipe::probe::FeatureLevel parse_level(const std::string& s) {
    if (s == "residue") return saepipe::probe::FeatureLevel::residue;
    if (s == "sequence") return saepipe::probe::FeatureLevel::sequence;
    throw std::runtime_error("unknown level: " + s + " (expected residue or sequence)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Synthetic-grammar LM interpretability pipeline"};
    app.require_subcommand(1);

    std::string config_path = "configs/default.json";
    std::optional<uint64_t> seed;
    std::optional<std::string> workdir;
    std::optional<int> threads;
    bool force_deterministic = false;
    bool force_timings = false;
    app.add_option("--config", config_path, "Pipeline config JSON")->capture_default_str();
    app.add_option("--seed", seed, "Override the config seed");
    app.add_option("--workdir", workdir, "Override the config workdir");
    app.add_option("--threads", threads, "Override the thread budget");
    app.add_flag("--deterministic", force_deterministic,
                 "Force deterministic outputs (zeroed wallclock columns)");
    app.add_flag("--no-deterministic", force_timings, "Record real wallclock timings");

    auto* gen = app.add_subcommand("gen-corpus", "Sample the labeled corpus");
    auto* train_lm = app.add_subcommand("train-lm", "Train the host LM");
    auto* dump = app.add_subcommand("dump-acts", "Dump residual-stream activations");
    int dump_layer = -1;
    dump->add_option("--layer", dump_layer, "Layer to dump (default: every configured sae layer)");
    auto* train_sae = app.add_subcommand("train-sae", "Train configured SAEs");
    std::string sae_variant;
    int sae_layer = -1;
    train_sae->add_option("--variant", sae_variant, "topk or ordered (default: all configured)");
    train_sae->add_option("--layer", sae_layer, "Layer (default: all configured)");
    auto* probe_cmd = app.add_subcommand("probe", "Fit linear probes");
    std::string probe_concept, probe_level, probe_source, probe_variant;
    int probe_layer = -1;
    probe_cmd->add_option("--concept", probe_concept,
                          "region, v_gene, or j_gene (default: the full battery)");
    probe_cmd->add_option("--level", probe_level, "residue or sequence");
    probe_cmd->add_option("--source", probe_source, "latents or neurons");
    probe_cmd->add_option("--variant", probe_variant, "SAE variant for latent probes");
    probe_cmd->add_option("--layer", probe_layer, "Layer");
    auto* select_cmd = app.add_subcommand("select", "Threshold-select features from probes");
    std::string select_concept, select_variant;
    int select_layer = -1;
    select_cmd->add_option("--concept", select_concept, "region or j_gene (default: all)");
    select_cmd->add_option("--variant", select_variant, "SAE variant");
    select_cmd->add_option("--layer", select_layer, "Layer");
    auto* steer_cmd = app.add_subcommand("steer", "Run steering sweeps");
    std::string steer_name;
    steer_cmd->add_option("--name", steer_name, "Configured sweep name (default: all)");
    auto* report = app.add_subcommand("report", "Write the consolidated tables");
    auto* run = app.add_subcommand("run", "Run every stage in order");

    CLI11_PARSE(app, argc, argv);

    try {
        auto cfg = saepipe::pipeline::load_config(config_path);
        if (seed) cfg.seed = *seed;
        if (workdir) cfg.workdir = *workdir;
        if (threads) cfg.threads = *threads;
        if (force_deterministic && force_timings) {
            throw std::runtime_error("--deterministic and --no-deterministic conflict");
        }
        if (force_deterministic) cfg.deterministic = true;
        if (force_timings) cfg.deterministic = false;
        saepipe::pipeline::restamp(cfg);

        if (gen->parsed()) {
            saepipe::pipeline::cmd_gen_corpus(cfg);
        } else if (train_lm->parsed()) {
            saepipe::pipeline::cmd_train_lm(cfg);
        } else if (dump->parsed()) {
            if (dump_layer >= 0 || cfg.saes.empty()) {
                saepipe::pipeline::cmd_dump_acts(cfg, dump_layer);
            } else {
                std::set<int> layers;
                for (const auto& s : cfg.saes) layers.insert(s.layer);
                for (int layer : layers) saepipe::pipeline::cmd_dump_acts(cfg, layer);
            }
        } else if (train_sae->parsed()) {
            bool matched = false;
            for (const auto& s : cfg.saes) {
                if (!sae_variant.empty() && s.variant != sae_variant) continue;
                if (sae_layer >= 0 && s.layer != sae_layer) continue;
                saepipe::pipeline::cmd_train_sae(cfg, s.variant, s.layer);
                matched = true;
            }
            if (!matched) throw std::runtime_error("no configured sae stage matches the flags");
        } else if (probe_cmd->parsed()) {
            if (probe_concept.empty()) {
                saepipe::pipeline::cmd_probe_all(cfg);
            } else {
                if (cfg.saes.empty()) throw std::runtime_error("config has no sae stages");
                saepipe::pipeline::ProbeKey key;
                key.label = parse_label(probe_concept);
                key.level = probe_level.empty()
                                ? (key.label == saepipe::probe::LabelKind::region
                                       ? saepipe::probe::FeatureLevel::residue
                                       : saepipe::probe::FeatureLevel::sequence)
                                : parse_level(probe_level);
                key.source = probe_source.empty() ? "latents" : probe_source;
                key.variant = key.source == "latents"
                                  ? (probe_variant.empty() ? cfg.saes.at(0).variant : probe_variant)
                                  : "";
                key.layer = probe_layer >= 0 ? probe_layer : cfg.saes.at(0).layer;
                saepipe::pipeline::cmd_probe(cfg, key);
            }
        } else if (select_cmd->parsed()) {
            if (select_concept.empty()) {
                saepipe::pipeline::cmd_select_all(cfg);
            } else {
                if (cfg.saes.empty()) throw std::runtime_error("config has no sae stages");
                std::string variant =
                    select_variant.empty() ? cfg.saes.at(0).variant : select_variant;
                int layer = select_layer >= 0 ? select_layer : cfg.saes.at(0).layer;
                saepipe::pipeline::cmd_select(cfg, variant, layer, parse_label(select_concept));
            }
        } else if (steer_cmd->parsed()) {
            if (steer_name.empty()) {
                saepipe::pipeline::cmd_steer_all(cfg);
            } else {
                bool found = false;
                for (const auto& s : cfg.steers) {
                    if (s.name == steer_name) {
                        saepipe::pipeline::cmd_steer(cfg, s);
                        found = true;
                        break;
                    }
                }
                if (!found) throw std::runtime_error("no configured steer named " + steer_name);
            }
        } else if (report->parsed()) {
            saepipe::pipeline::cmd_report(cfg);
        } else if (run->parsed()) {
            saepipe::pipeline::run_all(cfg);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
