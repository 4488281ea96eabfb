#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "saepipe/pipeline.hpp"

using namespace saepipe;
using namespace saepipe::pipeline;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Fresh scratch directory per test; removed on scope exit.
struct TempDir {
    fs::path path;

    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("saepipe_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// Small enough to run the full pipeline twice inside the suite while
// still exercising every stage, including one pinned-latent steer.
json micro_json(const std::string& workdir) {
    json j;
    j["seed"] = 11;
    j["workdir"] = workdir;
    j["threads"] = 2;
    j["grammar"] = {{"n_sequences", 140}};
    j["lm"] = {{"d_model", 16}, {"n_layers", 2},    {"n_heads", 2}, {"context", 96},
               {"lr", 3e-3},    {"batch", 8},       {"epochs", 1},  {"val_frac", 0.1}};
    j["saes"] = json::array({json{{"variant", "topk"},
                                  {"layer", 1},
                                  {"r", 2},
                                  {"k", 4},
                                  {"batch", 8},
                                  {"epochs", 1},
                                  {"log_every", 2000}}});
    j["probe"] = {{"c_grid", {1.0}},      {"folds", 3},   {"max_iter", 80},
                  {"top_n", 8},           {"f1_cut", 0.5}, {"thresholds", {0.2, 0.5}},
                  {"max_rows", 10000}};
    j["steers"] = json::array({json{{"name", "micro"},
                                    {"variant", "topk"},
                                    {"layer", 1},
                                    {"target_class", 3},
                                    {"direction", "positive"},
                                    {"latent", 3},
                                    {"n_per_alpha", 100},
                                    {"temperature", 1.0},
                                    {"n_perm", 100}}});
    return j;
}

std::string read_file(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<std::string> relative_files(const fs::path& root) {
    std::vector<std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root).string());
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

TEST_CASE("config: minimal json fills defaults") {
    auto cfg = config_from_json(json{{"seed", 5}});
    CHECK(cfg.seed == 5);
    CHECK(cfg.workdir == "runs/default");
    CHECK(cfg.deterministic);
    CHECK(cfg.threads == 4);
    CHECK(cfg.n_sequences == 20000);
    CHECK(cfg.lm.d_model == 64);
    CHECK(cfg.lm.n_layers == 2);
    CHECK(cfg.saes.empty());
    CHECK(cfg.steers.empty());
    CHECK(cfg.config_hash.size() == 16);
    CHECK(cfg.config_hash.find_first_not_of("0123456789abcdef") == std::string::npos);
}

TEST_CASE("config: seed is mandatory") {
    CHECK_THROWS_WITH_AS(config_from_json(json::object()), "config: seed is mandatory",
                         std::invalid_argument);
}

TEST_CASE("config: unknown keys are rejected at every level") {
    CHECK_THROWS_WITH_AS(config_from_json(json{{"seed", 1}, {"sneed", 2}}),
                         "unknown config key: config.sneed", std::invalid_argument);
    CHECK_THROWS_WITH_AS(config_from_json(json{{"seed", 1}, {"lm", {{"width", 8}}}}),
                         "unknown config key: lm.width", std::invalid_argument);
    json j{{"seed", 1}, {"saes", json::array({json{{"variant", "topk"}, {"kk", 3}}})}};
    CHECK_THROWS_WITH_AS(config_from_json(j), "unknown config key: saes[].kk",
                         std::invalid_argument);
}

TEST_CASE("config: overrides reach every nested field") {
    auto cfg = config_from_json(micro_json("runs/micro"));
    CHECK(cfg.seed == 11);
    CHECK(cfg.threads == 2);
    CHECK(cfg.n_sequences == 140);
    CHECK(cfg.lm.d_model == 16);
    CHECK(cfg.lm.epochs == 1);
    REQUIRE(cfg.saes.size() == 1);
    CHECK(cfg.saes[0].variant == "topk");
    CHECK(cfg.saes[0].layer == 1);
    CHECK(cfg.saes[0].cfg.d_in == 16);  // resolved from lm.d_model
    CHECK(cfg.saes[0].cfg.r == 2);
    CHECK(cfg.saes[0].cfg.k == 4);
    CHECK(cfg.probe.c_grid == std::vector<double>{1.0});
    CHECK(cfg.probe_max_rows == 10000);
    REQUIRE(cfg.steers.size() == 1);
    CHECK(cfg.steers[0].name == "micro");
    CHECK(cfg.steers[0].latent == 3);
    CHECK(cfg.steers[0].n_per_alpha == 100);
}

TEST_CASE("config: stage wiring is validated") {
    json base = micro_json("runs/x");

    json bad_layer = base;
    bad_layer["saes"][0]["layer"] = 5;
    bad_layer["steers"] = json::array();
    CHECK_THROWS_WITH_AS(config_from_json(bad_layer),
                         "config: sae layer 5 outside valid range [0, 2)", std::invalid_argument);

    json dup = base;
    dup["saes"].push_back(dup["saes"][0]);
    CHECK_THROWS_WITH_AS(config_from_json(dup), "config: duplicate sae stage topk layer 1",
                         std::invalid_argument);

    json orphan = base;
    orphan["steers"][0]["variant"] = "ordered";
    CHECK_THROWS_WITH_AS(config_from_json(orphan),
                         "config: steer micro references missing sae ordered layer 1",
                         std::invalid_argument);

    json bad_dir = base;
    bad_dir["steers"][0]["direction"] = "sideways";
    CHECK_THROWS_WITH_AS(config_from_json(bad_dir),
                         "config: steer direction must be positive or negative",
                         std::invalid_argument);

    json bad_class = base;
    bad_class["steers"][0]["target_class"] = 6;
    CHECK_THROWS_WITH_AS(config_from_json(bad_class), "config: steer target_class out of range",
                         std::invalid_argument);

    json thin = base;
    thin["steers"][0]["n_per_alpha"] = 99;
    CHECK_THROWS_WITH_AS(config_from_json(thin), "config: n_per_alpha must be >= 100",
                         std::invalid_argument);

    json dup_name = base;
    dup_name["steers"].push_back(dup_name["steers"][0]);
    CHECK_THROWS_WITH_AS(config_from_json(dup_name), "config: duplicate steer name micro",
                         std::invalid_argument);
}

TEST_CASE("fnv1a64 matches the published test vectors") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("config hash: stable across reparses, sensitive to content") {
    auto a = config_from_json(micro_json("runs/x"));
    auto b = config_from_json(micro_json("runs/x"));
    CHECK(a.config_hash == b.config_hash);

    json other = micro_json("runs/x");
    other["seed"] = 12;
    CHECK(config_from_json(other).config_hash != a.config_hash);

    // Defaults spelled out explicitly hash the same as defaults left implicit.
    json spelled = micro_json("runs/x");
    spelled["deterministic"] = true;
    CHECK(config_from_json(spelled).config_hash == a.config_hash);

    auto mutated = a;
    mutated.lm.epochs = 2;
    restamp(mutated);
    CHECK(mutated.config_hash != a.config_hash);
    CHECK(run_stamp(a) == "config=" + a.config_hash + " seed=11");
}

TEST_CASE("workdir layout and probe tags") {
    auto cfg = config_from_json(micro_json("runs/layout"));
    Paths p = paths(cfg);
    CHECK(p.lock() == fs::path("runs/layout/run.lock"));
    CHECK(p.acts(1) == fs::path("runs/layout/acts/layer1.bin"));
    CHECK(p.sae_dir("topk", 1) == fs::path("runs/layout/sae/topk_layer1"));
    CHECK(p.steer_dir("micro") == fs::path("runs/layout/steer/micro"));

    ProbeKey lat{"latents", "ordered", 1, probe::FeatureLevel::residue,
                 probe::LabelKind::region};
    CHECK(lat.tag() == "latents_ordered_layer1_residue_region");
    ProbeKey neu{"neurons", "", 0, probe::FeatureLevel::sequence, probe::LabelKind::j_gene};
    CHECK(neu.tag() == "neurons_layer0_sequence_j_gene");
    CHECK(select_tag("topk", 1, probe::LabelKind::j_gene) == "topk_layer1_j_gene");

    auto battery = probe_battery(cfg);
    REQUIRE(battery.size() == 4);  // one sae: latents x2 levels + neurons x2 levels
    CHECK(battery[0].tag() == "latents_topk_layer1_residue_region");
    CHECK(battery[1].tag() == "latents_topk_layer1_sequence_j_gene");
    CHECK(battery[2].tag() == "neurons_layer1_residue_region");
    CHECK(battery[3].tag() == "neurons_layer1_sequence_j_gene");
}

TEST_CASE("workdir lock excludes concurrent runs and is released") {
    TempDir tmp("lock");
    {
        WorkdirLock lock(tmp.path);
        CHECK(fs::exists(tmp.path / "run.lock"));
        CHECK_THROWS_WITH_AS(WorkdirLock(tmp.path),
                             ("workdir locked: " + (tmp.path / "run.lock").string() +
                              " (remove the file if no other run is active)")
                                 .c_str(),
                             std::runtime_error);
    }
    CHECK_FALSE(fs::exists(tmp.path / "run.lock"));
    WorkdirLock relock(tmp.path);  // fresh acquisition succeeds
}

TEST_CASE("dump-acts rejects an out-of-range layer and names the range") {
    TempDir tmp("badlayer");
    auto cfg = config_from_json(micro_json((tmp.path / "w").string()));
    CHECK_THROWS_WITH_AS(cmd_dump_acts(cfg, 7), "bad layer index 7: valid range [0, 2)",
                         std::runtime_error);
    CHECK_THROWS_AS(cmd_dump_acts(cfg, -1), std::runtime_error);
    // The lock is released when the command fails.
    CHECK_FALSE(fs::exists(tmp.path / "w" / "run.lock"));
}

TEST_CASE("stages fail fast when upstream outputs are missing") {
    TempDir tmp("missing");
    auto cfg = config_from_json(micro_json((tmp.path / "w").string()));
    std::string corpus = (tmp.path / "w" / "corpus.txt").string();
    CHECK_THROWS_WITH_AS(cmd_train_lm(cfg), ("missing input: " + corpus + " (run gen-corpus first)").c_str(),
                         std::runtime_error);
    CHECK_THROWS_AS(cmd_dump_acts(cfg, 1), std::runtime_error);
    CHECK_THROWS_AS(cmd_train_sae(cfg, "topk", 1), std::runtime_error);
    CHECK_THROWS_AS(cmd_report(cfg), std::runtime_error);
    CHECK_THROWS_WITH_AS(cmd_train_sae(cfg, "ordered", 1),
                         "no sae stage configured for ordered layer 1", std::runtime_error);
}

TEST_CASE("rerunning the full pipeline is byte identical") {
    TempDir tmp("rerun");
    fs::path work = tmp.path / "w";
    auto cfg = config_from_json(micro_json(work.string()));

    run_all(cfg);
    fs::path first = tmp.path / "first";
    fs::rename(work, first);
    run_all(cfg);

    auto files = relative_files(work);
    CHECK(files == relative_files(first));
    REQUIRE(!files.empty());

    bool saw_csv = false, saw_bin = false;
    for (const auto& rel : files) {
        CAPTURE(rel);
        CHECK(read_file(work / rel) == read_file(first / rel));
        if (rel.size() > 4 && rel.compare(rel.size() - 4, 4, ".csv") == 0) saw_csv = true;
        if (rel.size() > 4 && rel.compare(rel.size() - 4, 4, ".bin") == 0) saw_bin = true;
    }
    CHECK(saw_csv);
    CHECK(saw_bin);

    // Every CSV opens with the run stamp so artifacts are traceable.
    std::string stamp = "# " + run_stamp(cfg);
    for (const auto& rel : files) {
        if (rel.size() > 4 && rel.compare(rel.size() - 4, 4, ".csv") == 0) {
            CAPTURE(rel);
            std::string body = read_file(work / rel);
            CHECK(body.compare(0, stamp.size(), stamp) == 0);
        }
    }

    // Report tables exist and the summary carries the config hash.
    CHECK(fs::exists(work / "report" / "table1.csv"));
    CHECK(fs::exists(work / "report" / "table2.csv"));
    CHECK(fs::exists(work / "report" / "table3.csv"));
    auto summary = nlohmann::json::parse(read_file(work / "report" / "run_summary.json"));
    CHECK(summary.at("config").get<std::string>() == cfg.config_hash);
}
