#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "saepipe/hostlm.hpp"

using namespace saepipe;
using namespace saepipe::hostlm;

namespace {

LmConfig micro_config() {
    LmConfig cfg;
    cfg.vocab = 6;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.context = 12;
    cfg.bos_id = 0;
    cfg.eos_id = 5;
    return cfg;
}

// Central finite differences against the analytic gradient on every
// parameter entry of a micro model.
void check_gradients(const LmConfig& cfg, const std::vector<int>& tokens, uint64_t seed) {
    LmParams params = init_lm(cfg, seed);
    // Real checkpoints have a zero unembedding, which would zero most of
    // the chain; perturb it so gradients flow everywhere.
    numkit::Rng rng(seed + 1);
    for (auto& x : params.w_out.data) x = 0.05 * rng.normal();
    for (auto& x : params.b_out.data) x = 0.05 * rng.normal();

    LmParams grads = zeros_like(params);
    loss_and_grads(params, tokens, grads);

    const double eps = 1e-5;
    double worst = 0.0;
    std::vector<Mat*> pmats, gmats;
    params.for_each_param([&](const std::string&, Mat& m) { pmats.push_back(&m); });
    grads.for_each_param([&](const std::string&, Mat& m) { gmats.push_back(&m); });
    numkit::Rng pick(seed + 2);
    for (size_t s = 0; s < pmats.size(); ++s) {
        // A random half of the entries per tensor keeps the oracle cheap.
        size_t n = pmats[s]->size();
        for (size_t i = 0; i < n; ++i) {
            if (n > 32 && pick.uniform() > 0.5) continue;
            double saved = pmats[s]->data[i];
            pmats[s]->data[i] = saved + eps;
            double up = sequence_loss(params, tokens);
            pmats[s]->data[i] = saved - eps;
            double down = sequence_loss(params, tokens);
            pmats[s]->data[i] = saved;
            double fd = (up - down) / (2.0 * eps);
            double an = gmats[s]->data[i];
            if (std::abs(fd) < 1e-7 && std::abs(an) < 1e-7) continue;
            double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
            worst = std::max(worst, rel);
        }
    }
    CHECK(worst < 1e-4);
}

}  // namespace

TEST_CASE("analytic gradients match central finite differences on a micro model") {
    std::vector<int> tokens{0, 3, 1, 4, 2, 5, 1, 0};
    check_gradients(micro_config(), tokens, 99);

    auto two_layer = micro_config();
    two_layer.n_layers = 2;
    check_gradients(two_layer, tokens, 123);
}

TEST_CASE("untrained model scores ln(vocab) because the unembedding starts at zero") {
    LmConfig cfg;
    cfg.vocab = 22;
    auto params = init_lm(cfg, 7);
    std::vector<int> tokens{20, 3, 1, 4, 2, 21};
    CHECK(sequence_loss(params, tokens) == doctest::Approx(std::log(22.0)).epsilon(1e-12));
}

TEST_CASE("causality: truncating the input leaves earlier states untouched") {
    auto cfg = micro_config();
    auto params = init_lm(cfg, 5);
    numkit::Rng rng(6);
    for (auto& x : params.w_out.data) x = 0.05 * rng.normal();
    std::vector<int> full{0, 1, 2, 3, 4, 5, 0, 1};
    std::vector<int> cut(full.begin(), full.begin() + 5);

    auto rf = forward_hooked(params, full, 0);
    auto rc = forward_hooked(params, cut, 0);
    for (int t = 0; t < 5; ++t) {
        for (int c = 0; c < cfg.d_model; ++c) REQUIRE(rf.hidden.at(t, c) == rc.hidden.at(t, c));
        for (int v = 0; v < cfg.vocab; ++v) REQUIRE(rf.logits.at(t, v) == rc.logits.at(t, v));
    }

    // Perturbing a later token must not move earlier states either.
    auto perturbed = full;
    perturbed[6] = (perturbed[6] + 3) % cfg.vocab;
    auto rp = forward_hooked(params, perturbed, 0);
    for (int t = 0; t < 6; ++t) {
        for (int c = 0; c < cfg.d_model; ++c) REQUIRE(rf.hidden.at(t, c) == rp.hidden.at(t, c));
    }
}

TEST_CASE("forward_hooked validates the layer index") {
    auto params = init_lm(micro_config(), 1);
    std::vector<int> tokens{0, 1, 2};
    CHECK_THROWS_AS(forward_hooked(params, tokens, 1), std::out_of_range);
    CHECK_THROWS_AS(forward_hooked(params, tokens, -1), std::out_of_range);
}

TEST_CASE("one repeated sequence is memorized to under 0.05 nats") {
    auto cfg = micro_config();
    cfg.lr = 3e-3;
    cfg.batch = 8;
    cfg.epochs = 60;
    cfg.val_frac = 0.0;
    std::vector<int> seq{0, 3, 1, 4, 2, 5, 1, 0, 2, 5};
    std::vector<std::vector<int>> corpus(32, seq);
    auto trained = train_lm(corpus, cfg, 77);
    CHECK(sequence_loss(trained.params, seq) < 0.05);
    CHECK(trained.log.final_val_loss < trained.log.unigram_baseline);
}

TEST_CASE("train_lm rejects sequences that do not fit the context") {
    auto cfg = micro_config();
    std::vector<std::vector<int>> corpus{std::vector<int>(static_cast<size_t>(cfg.context) + 1, 0)};
    CHECK_THROWS_WITH_AS(train_lm(corpus, cfg, 1), "sequence exceeds context length",
                         std::invalid_argument);
}

TEST_CASE("incremental generation matches the teacher-forced path bit for bit") {
    auto cfg = micro_config();
    cfg.n_layers = 2;
    auto params = init_lm(cfg, 21);
    numkit::Rng rng(22);
    for (auto& x : params.w_out.data) x = 0.2 * rng.normal();
    for (auto& x : params.b_out.data) x = 0.2 * rng.normal();

    // Argmax generation re-fed through forward_hooked must reproduce the
    // same argmax at every step; shared per-token primitives make the
    // logits bitwise equal, which this indirectly pins.
    numkit::Rng gen_rng(1);
    auto seq = generate_one(params, 0.0, gen_rng);
    REQUIRE(seq.size() >= 2);
    auto full = forward_hooked(params, seq, cfg.n_layers - 1);
    for (size_t t = 0; t + 1 < seq.size(); ++t) {
        int argmax = 0;
        for (int v = 1; v < cfg.vocab; ++v) {
            if (full.logits.at(static_cast<int>(t), v) > full.logits.at(static_cast<int>(t), argmax)) argmax = v;
        }
        REQUIRE(argmax == seq[t + 1]);
    }
}

TEST_CASE("same seed gives identical generations, independent of thread count") {
    auto cfg = micro_config();
    auto params = init_lm(cfg, 3);
    auto a = generate(params, 20, 1.0, 909);
    numkit::set_max_threads(4);
    auto b = generate(params, 20, 1.0, 909);
    numkit::set_max_threads(1);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);
}

TEST_CASE("zero-alpha hook generates bitwise identical sequences") {
    auto cfg = micro_config();
    cfg.n_layers = 2;
    auto params = init_lm(cfg, 13);
    numkit::Rng rng(14);
    for (auto& x : params.w_out.data) x = 0.1 * rng.normal();

    SteerHook hook;
    hook.layer = 0;
    // Not a constant vector: layer norm would cancel a uniform shift.
    hook.dir.assign(static_cast<size_t>(cfg.d_model), 0.0);
    numkit::Rng dir_rng(15);
    for (auto& d : hook.dir) d = dir_rng.normal();
    hook.alpha = 0.0;
    auto base = generate(params, 30, 0.8, 555);
    auto hooked = generate(params, 30, 0.8, 555, &hook);
    REQUIRE(base.size() == hooked.size());
    for (size_t i = 0; i < base.size(); ++i) REQUIRE(base[i] == hooked[i]);

    hook.alpha = 2.0;
    auto steered = generate(params, 30, 0.8, 555, &hook);
    bool any_diff = false;
    for (size_t i = 0; i < base.size(); ++i) any_diff |= (steered[i] != base[i]);
    CHECK(any_diff);
}

TEST_CASE("hook adds exactly alpha times the direction at the hooked layer") {
    auto cfg = micro_config();
    cfg.n_layers = 2;
    std::vector<int> tokens{0, 1, 2, 3, 4};

    SUBCASE("zero params make the doubling exact") {
        LmParams params = init_lm(cfg, 1);
        params.for_each_param([](const std::string&, Mat& m) { m.zero(); });
        // All-zero weights keep the residual stream at exactly zero, so
        // the hooked state is alpha*dir with no rounding.
        SteerHook hook;
        hook.layer = 0;
        hook.dir = {0.375, -1.25, 0.0625, 2.0, -0.5, 1.0, 0.125, -4.0};
        hook.alpha = 0.75;
        auto r1 = forward_hooked(params, tokens, 0, &hook);
        hook.alpha = 1.5;
        auto r2 = forward_hooked(params, tokens, 0, &hook);
        for (int t = 0; t < 5; ++t) {
            for (int c = 0; c < cfg.d_model; ++c) {
                REQUIRE(r2.hidden.at(t, c) == 2.0 * r1.hidden.at(t, c));
            }
        }
    }

    SUBCASE("trained-like params double the delta to rounding error") {
        LmParams params = init_lm(cfg, 17);
        SteerHook hook;
        hook.layer = 1;
        hook.dir.assign(static_cast<size_t>(cfg.d_model), 0.0);
        numkit::Rng rng(18);
        for (auto& d : hook.dir) d = rng.normal();
        auto base = forward_hooked(params, tokens, 1);
        hook.alpha = 0.6;
        auto r1 = forward_hooked(params, tokens, 1, &hook);
        hook.alpha = 1.2;
        auto r2 = forward_hooked(params, tokens, 1, &hook);
        for (int t = 0; t < 5; ++t) {
            for (int c = 0; c < cfg.d_model; ++c) {
                double d1 = r1.hidden.at(t, c) - base.hidden.at(t, c);
                double d2 = r2.hidden.at(t, c) - base.hidden.at(t, c);
                if (std::abs(d1) < 1e-12) continue;
                REQUIRE(d2 / d1 == doctest::Approx(2.0).epsilon(1e-9));
            }
        }
    }
}

TEST_CASE("activation dump round-trips with metadata and skips specials") {
    auto spec = grammar::default_grammar();
    auto corpus = sample_corpus(spec, 5, 808);
    LmConfig cfg;
    auto params = init_lm(cfg, 77);

    auto dir = std::filesystem::temp_directory_path() / "saepipe_hostlm_test";
    std::filesystem::create_directories(dir);
    auto path = (dir / "acts.bin").string();
    dump_activations(params, corpus, 1, path, "unit test dump");
    auto set = read_activations(path);

    size_t expect_rows = 0;
    for (const auto& s : corpus) expect_rows += s.tokens.size() - 2;
    REQUIRE(set.n_rows == static_cast<int>(expect_rows));
    REQUIRE(set.d_model == cfg.d_model);
    REQUIRE(set.meta.size() == expect_rows);

    // Row values must equal the forward hidden states, cast to f32.
    auto fwd = forward_hooked(params, corpus[0].tokens, 1);
    for (int t = 1; t + 1 < static_cast<int>(corpus[0].tokens.size()); ++t) {
        auto row = set.row(t - 1);
        for (int c = 0; c < cfg.d_model; ++c) {
            REQUIRE(row[static_cast<size_t>(c)] == static_cast<float>(fwd.hidden.at(t, c)));
        }
        REQUIRE(set.meta[static_cast<size_t>(t - 1)].position == t);
        REQUIRE(set.meta[static_cast<size_t>(t - 1)].region == corpus[0].regions[static_cast<size_t>(t)]);
    }
    for (const auto& m : set.meta) {
        REQUIRE(m.position >= 1);
        REQUIRE(m.v_id == corpus[static_cast<size_t>(m.seq_id)].v_id);
        REQUIRE(m.j_id == corpus[static_cast<size_t>(m.seq_id)].j_id);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("model checkpoints round-trip through the binary blob") {
    auto cfg = micro_config();
    auto params = init_lm(cfg, 2718);
    auto dir = std::filesystem::temp_directory_path() / "saepipe_lmio_test";
    std::filesystem::create_directories(dir);
    auto path = (dir / "model.bin").string();
    save_lm(params, path);
    auto loaded = load_lm(path);

    bool equal = true;
    std::vector<const Mat*> a, b;
    params.for_each_param([&](const std::string&, const Mat& m) { a.push_back(&m); });
    loaded.for_each_param([&](const std::string&, const Mat& m) { b.push_back(&m); });
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) equal = equal && (a[i]->data == b[i]->data);
    CHECK(equal);
    CHECK(loaded.cfg.d_model == cfg.d_model);
    CHECK(loaded.cfg.context == cfg.context);
    std::filesystem::remove_all(dir);
}
