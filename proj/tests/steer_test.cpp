#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "saepipe/steer.hpp"

using namespace saepipe;
using namespace saepipe::steer;
using numkit::Vec;

namespace {

hostlm::LmConfig tiny_lm_config() {
    hostlm::LmConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.context = 48;
    return cfg;
}

// Identity encoder over d_in coordinates: latent j reads x[j].
sae::SaeParams coordinate_sae(int d_in, int k, uint64_t seed) {
    sae::SaeConfig cfg;
    cfg.d_in = d_in;
    cfg.r = 1;
    cfg.k = k;
    sae::SaeParams p = sae::init_sae(cfg, seed);
    p.w_enc.zero();
    p.b_enc.zero();
    for (int j = 0; j < d_in; ++j) p.w_enc.at(j, j) = 1.0;
    return p;
}

hostlm::ActivationMetaRow meta_row(int seq, int pos, char region) {
    hostlm::ActivationMetaRow m;
    m.seq_id = seq;
    m.position = pos;
    m.region = region;
    return m;
}

void push_row(hostlm::ActivationSet& acts, const hostlm::ActivationMetaRow& m,
              const std::vector<float>& row) {
    acts.meta.push_back(m);
    acts.data.insert(acts.data.end(), row.begin(), row.end());
    ++acts.n_rows;
}

AlphaRow baseline_tabulation(const std::vector<std::vector<int>>& seqs,
                             const grammar::GrammarSpec& g, double min_confidence) {
    int n_classes = static_cast<int>(g.j_segments.size());
    AlphaRow row;
    row.proportions.assign(static_cast<size_t>(n_classes) + 1, 0.0);
    for (const auto& tokens : seqs) {
        auto call = grammar::classify_j(g, tokens);
        int slot = call.j_id >= 0 && call.confidence >= min_confidence ? call.j_id : n_classes;
        row.proportions[static_cast<size_t>(slot)] += 1.0;
    }
    for (auto& p : row.proportions) p /= static_cast<double>(seqs.size());
    return row;
}

}  // namespace

TEST_CASE("steer: spec validation") {
    SteeringSpec spec;
    spec.alphas = {-1.0, 0.0, 1.0};
    CHECK_NOTHROW(spec.validate());

    SteeringSpec bad = spec;
    bad.alphas = {-1.0, 1.0};
    CHECK_THROWS_WITH_AS(bad.validate(), "alpha grid must contain 0", std::invalid_argument);

    bad = spec;
    bad.n_per_alpha = 99;
    CHECK_THROWS_WITH_AS(bad.validate(), "n_per_alpha must be >= 100", std::invalid_argument);

    bad = spec;
    bad.min_confidence = 1.5;
    CHECK_THROWS_WITH_AS(bad.validate(), "bad confidence cut", std::invalid_argument);

    bad = spec;
    bad.temperature = -0.1;
    CHECK_THROWS_WITH_AS(bad.validate(), "temperature must be >= 0", std::invalid_argument);
}

TEST_CASE("steer: default alpha grid") {
    auto grid = default_alpha_grid(1.0);
    REQUIRE(grid.size() == 13);
    CHECK(grid.front() == -6.0);
    CHECK(grid.back() == 6.0);
    CHECK(grid[6] == 0.0);
    for (size_t i = 1; i < grid.size(); ++i) CHECK(grid[i] - grid[i - 1] == 1.0);

    auto scaled = default_alpha_grid(0.5);
    for (size_t i = 0; i < scaled.size(); ++i) CHECK(scaled[i] == 0.5 * grid[i]);

    CHECK_THROWS_WITH_AS(default_alpha_grid(0.0), "scale must be positive", std::invalid_argument);
}

TEST_CASE("steer: mean active magnitude over known rows") {
    auto sp = coordinate_sae(4, 2, 3);
    hostlm::ActivationSet acts;
    acts.d_model = 4;
    push_row(acts, meta_row(0, 1, 'B'), {1.0f, 2.0f, 0.0f, 0.0f});
    push_row(acts, meta_row(0, 2, 'B'), {0.0f, 0.0f, 0.0f, 0.0f});
    push_row(acts, meta_row(1, 1, 'B'), {0.0f, 0.0f, 5.0f, 0.0f});
    // Active values: {1, 2} and {5}.
    CHECK(mean_active_magnitude(sp, acts) == 8.0 / 3.0);

    hostlm::ActivationSet dead;
    dead.d_model = 4;
    push_row(dead, meta_row(0, 1, 'B'), {0.0f, 0.0f, 0.0f, 0.0f});
    CHECK_THROWS_WITH_AS(mean_active_magnitude(sp, dead), "no active latents",
                         std::runtime_error);
}

TEST_CASE("steer: hook carries the decoder row") {
    auto sp = coordinate_sae(4, 2, 5);
    sp.w_dec.zero();
    sp.w_dec.at(2, 1) = 0.75;
    auto hook = steering_hook(sp, 1, 2, 3.0);
    CHECK(hook.layer == 1);
    CHECK(hook.alpha == 3.0);
    CHECK(hook.dir == std::vector<double>{0.0, 0.75, 0.0, 0.0});
    CHECK_THROWS_WITH_AS(steering_hook(sp, 0, 4, 1.0), "latent out of range", std::out_of_range);
}

TEST_CASE("steer: hook adds alpha times the direction to the hooked layer") {
    auto cfg = tiny_lm_config();
    auto lm = hostlm::init_lm(cfg, 7);
    std::vector<int> tokens = {grammar::kBos, 3, 1, 4, 1, 5, grammar::kEos};

    hostlm::SteerHook hook;
    hook.layer = 0;
    hook.alpha = 3.0;
    hook.dir.assign(static_cast<size_t>(cfg.d_model), 0.0);
    hook.dir[1] = 1.0;

    auto plain = hostlm::forward_hooked(lm, tokens, 0, nullptr);
    auto steered = hostlm::forward_hooked(lm, tokens, 0, &hook);
    for (int t = 0; t < plain.hidden.rows; ++t) {
        for (int i = 0; i < cfg.d_model; ++i) {
            double want = plain.hidden.at(t, i) + (i == 1 ? 3.0 : 0.0);
            CHECK(steered.hidden.at(t, i) == want);
        }
    }
}

TEST_CASE("steer: alpha zero generates the unsteered library bitwise") {
    auto cfg = tiny_lm_config();
    auto lm = hostlm::init_lm(cfg, 11);
    auto sp = coordinate_sae(cfg.d_model, 4, 13);
    auto hook = steering_hook(sp, 1, 3, 0.0);

    auto steered = hostlm::generate(lm, 30, 1.0, 17, &hook);
    auto plain = hostlm::generate(lm, 30, 1.0, 17, nullptr);
    CHECK(steered == plain);
}

TEST_CASE("steer: sweep with only the zero alpha reproduces the baseline") {
    auto cfg = tiny_lm_config();
    auto lm = hostlm::init_lm(cfg, 19);
    auto sp = coordinate_sae(cfg.d_model, 4, 23);
    auto g = grammar::default_grammar();

    SteeringSpec spec;
    spec.layer = 1;
    spec.latent = 2;
    spec.alphas = {0.0};
    spec.n_per_alpha = 100;
    spec.seed = 29;
    auto report = run_sweep(lm, sp, spec, g);

    REQUIRE(report.rows.size() == 1);
    CHECK(report.baseline_index == 0);
    CHECK_FALSE(report.correlation_defined);
    CHECK(report.pearson_p == 1.0);

    auto library = hostlm::generate(lm, 100, 1.0, 29, nullptr);
    auto oracle = baseline_tabulation(library, g, spec.min_confidence);
    CHECK(report.rows[0].proportions == oracle.proportions);

    double sum = 0.0;
    for (double p : report.rows[0].proportions) sum += p;
    CHECK(std::abs(sum - 1.0) <= 1e-9);
}

TEST_CASE("steer: zero decoder row leaves every alpha row identical") {
    auto cfg = tiny_lm_config();
    auto lm = hostlm::init_lm(cfg, 31);
    auto sp = coordinate_sae(cfg.d_model, 4, 37);
    sp.w_dec.zero();
    auto g = grammar::default_grammar();

    SteeringSpec spec;
    spec.latent = 5;
    spec.alphas = {-2.0, 0.0, 2.0};
    spec.n_per_alpha = 100;
    spec.seed = 41;
    auto report = run_sweep(lm, sp, spec, g);

    REQUIRE(report.rows.size() == 3);
    CHECK(report.baseline_index == 1);
    for (const auto& row : report.rows) {
        CHECK(row.proportions == report.rows[0].proportions);
        CHECK(row.mean_length == report.rows[0].mean_length);
        double sum = 0.0;
        for (double p : row.proportions) sum += p;
        CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
    // Constant target proportion: correlation stays undefined.
    CHECK_FALSE(report.correlation_defined);
    CHECK(report.pearson_r == 0.0);
    CHECK(report.spearman_rho == 0.0);
    CHECK(report.pearson_p == 1.0);
    CHECK(report.spearman_p == 1.0);
}

TEST_CASE("steer: positional histogram") {
    auto sp = coordinate_sae(4, 2, 43);

    SUBCASE("single absolute position is a point mass") {
        hostlm::ActivationSet acts;
        acts.d_model = 4;
        for (int sq = 0; sq < 3; ++sq) {
            push_row(acts, meta_row(sq, 2, 'B'), {1.0f, 0.0f, 0.0f, 0.0f});
            push_row(acts, meta_row(sq, 5, 'B'), {0.0f, 0.0f, 2.0f, 0.0f});
        }
        auto hist = positional_histogram(sp, acts, 2, Align::absolute);
        CHECK(hist.positions == std::vector<int>{5});
        CHECK(hist.fractions == std::vector<double>{1.0});
    }

    SUBCASE("anchored indexing collapses a j-relative firing pattern") {
        hostlm::ActivationSet acts;
        acts.d_model = 4;
        // Two sequences, J starts at 8 and 12, latent fires at j_start + 2.
        for (int sq = 0; sq < 2; ++sq) {
            int j_start = sq == 0 ? 8 : 12;
            for (int pos = 1; pos < j_start + 4; ++pos) {
                char region = pos >= j_start ? 'J' : 'B';
                float v = pos == j_start + 2 ? 3.0f : 0.0f;
                push_row(acts, meta_row(sq, pos, region), {0.0f, 0.0f, v, 0.0f});
            }
        }
        auto absolute = positional_histogram(sp, acts, 2, Align::absolute);
        CHECK(absolute.positions == std::vector<int>{10, 14});
        auto anchored = positional_histogram(sp, acts, 2, Align::j_anchored);
        CHECK(anchored.positions == std::vector<int>{2});
        CHECK(anchored.fractions == std::vector<double>{1.0});
    }

    SUBCASE("sequences without an anchor drop out but mass still normalizes") {
        hostlm::ActivationSet acts;
        acts.d_model = 4;
        push_row(acts, meta_row(0, 4, 'J'), {0.0f, 0.0f, 1.0f, 0.0f});
        push_row(acts, meta_row(0, 5, 'J'), {0.0f, 0.0f, 3.0f, 0.0f});
        push_row(acts, meta_row(1, 2, 'B'), {0.0f, 0.0f, 9.0f, 0.0f});  // no J row
        auto anchored = positional_histogram(sp, acts, 2, Align::j_anchored);
        CHECK(anchored.positions == std::vector<int>{0, 1});
        CHECK(anchored.fractions == std::vector<double>{0.25, 0.75});
        double sum = 0.0;
        for (double f : anchored.fractions) sum += f;
        CHECK(std::abs(sum - 1.0) <= 1e-9);
    }

    SUBCASE("silent latent has no mass to bin") {
        hostlm::ActivationSet acts;
        acts.d_model = 4;
        push_row(acts, meta_row(0, 1, 'B'), {1.0f, 0.0f, 0.0f, 0.0f});
        CHECK_THROWS_WITH_AS(positional_histogram(sp, acts, 2, Align::absolute),
                             "no activation mass to bin", std::runtime_error);
        CHECK_THROWS_WITH_AS(positional_histogram(sp, acts, 9, Align::absolute),
                             "latent out of range", std::out_of_range);
    }
}

TEST_CASE("steer: report files round-trip") {
    SteeringReport report;
    report.n_classes = 2;
    report.target_class = 1;
    report.baseline_index = 0;
    AlphaRow r0;
    r0.alpha = 0.0;
    r0.proportions = {0.25, 0.5, 0.25};
    r0.mean_length = 40.0;
    r0.unknown_fraction = 0.25;
    AlphaRow r1 = r0;
    r1.alpha = 1.5;
    r1.proportions = {0.125, 0.625, 0.25};
    report.rows = {r0, r1};
    report.correlation_defined = true;
    report.pearson_r = 0.9;
    report.spearman_rho = 1.0;
    report.pearson_p = 0.01;
    report.spearman_p = 0.02;

    auto dir = std::filesystem::temp_directory_path() / "saepipe_steer_test";
    std::filesystem::create_directories(dir);

    auto csv_path = (dir / "sweep.csv").string();
    write_sweep_csv(report, csv_path, "hash=deadbeef seed=1");
    std::ifstream is(csv_path);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(is, line)) lines.push_back(line);
    REQUIRE(lines.size() == 8);  // comment + header + 2 alphas x 3 classes
    CHECK(lines[0] == "# hash=deadbeef seed=1");
    CHECK(lines[1] == "alpha,class,proportion");
    CHECK(lines[2] == "0,J1,0.25");
    CHECK(lines[3] == "0,J2,0.5");
    CHECK(lines[4] == "0,unknown,0.25");
    CHECK(lines[5].rfind("1.5,J1,", 0) == 0);

    auto json_path = (dir / "sweep.json").string();
    write_sweep_json(report, json_path);
    std::ifstream js(json_path);
    nlohmann::json j = nlohmann::json::parse(js);
    CHECK(j["pearson_r"] == 0.9);
    CHECK(j["target_class"] == 1);
    CHECK(j["alphas"].size() == 2);
    CHECK(j["baseline_proportions"][1] == 0.5);

    PositionalHistogram hist;
    hist.positions = {-2, 4};
    hist.fractions = {0.5, 0.5};
    auto hist_path = (dir / "hist.csv").string();
    write_histogram_csv(hist, hist_path, "");
    std::ifstream hs(hist_path);
    lines.clear();
    while (std::getline(hs, line)) lines.push_back(line);
    REQUIRE(lines.size() == 3);
    CHECK(lines[0] == "position,fraction");
    CHECK(lines[1] == "-2,0.5");

    std::filesystem::remove_all(dir);
}
