#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "saepipe/grammar.hpp"

using namespace saepipe;
using namespace saepipe::grammar;

TEST_CASE("default grammar satisfies its own invariants") {
    auto spec = default_grammar();
    CHECK_NOTHROW(spec.validate());

    auto close = spec;
    close.v_segments[1] = close.v_segments[0];
    CHECK_THROWS_AS(close.validate(), std::invalid_argument);

    auto bad_probs = spec;
    bad_probs.j_class_probs[0] += 0.5;
    CHECK_THROWS_AS(bad_probs.validate(), std::invalid_argument);

    auto bad_window = spec;
    bad_window.r3.end = 99;
    CHECK_THROWS_AS(bad_window.validate(), std::invalid_argument);
}

TEST_CASE("noise-free sampling is the exact concatenation and classify_j recovers j_id") {
    auto spec = default_grammar();
    spec.mutation_rate = 0.0;
    auto corpus = sample_corpus(spec, 200, 31);
    for (const auto& s : corpus) {
        REQUIRE(s.tokens.front() == kBos);
        REQUIRE(s.tokens.back() == kEos);
        const auto& v = spec.v_segments[static_cast<size_t>(s.v_id)];
        const auto& j = spec.j_segments[static_cast<size_t>(s.j_id)];
        int jl = static_cast<int>(s.tokens.size()) - 2 - 40 - 15;
        REQUIRE(jl >= spec.junction_min);
        REQUIRE(jl <= spec.junction_max);
        for (int p = 0; p < 40; ++p) REQUIRE(s.tokens[static_cast<size_t>(1 + p)] == token_from_char(v[static_cast<size_t>(p)]));
        REQUIRE(s.j_start == 41 + jl);
        for (int p = 0; p < 15; ++p) {
            REQUIRE(s.tokens[static_cast<size_t>(s.j_start + p)] == token_from_char(j[static_cast<size_t>(p)]));
        }
        auto call = classify_j(spec, s.tokens);
        REQUIRE(call.j_id == s.j_id);
        REQUIRE(call.confidence == 1.0);
    }
}

TEST_CASE("region labels follow the windows and never touch the junction") {
    auto spec = default_grammar();
    auto corpus = sample_corpus(spec, 50, 77);
    for (const auto& s : corpus) {
        REQUIRE(s.regions.size() == s.tokens.size());
        int jl = s.j_start - 41;
        for (size_t p = 0; p < s.tokens.size(); ++p) {
            char want = kRegionBackground;
            int ip = static_cast<int>(p);
            if (ip >= 1 && ip < 41) {
                int rel = ip - 1;
                if (rel >= spec.r1.begin && rel < spec.r1.end) want = kRegionR1;
                if (rel >= spec.r2.begin && rel < spec.r2.end) want = kRegionR2;
            } else if (ip >= 41 && ip < 41 + jl) {
                want = kRegionJunction;
            } else if (ip >= s.j_start && ip < s.j_start + 15) {
                int rel = ip - s.j_start;
                if (rel >= spec.r3.begin && rel < spec.r3.end) want = kRegionR3;
            }
            REQUIRE(s.regions[p] == want);
        }
    }
}

TEST_CASE("J4 frequency concentrates near its class prob at n=10000") {
    auto spec = default_grammar();
    auto corpus = sample_corpus(spec, 10000, 2026);
    std::vector<double> counts(6, 0.0);
    for (const auto& s : corpus) counts[static_cast<size_t>(s.j_id)] += 1.0;
    CHECK(std::abs(counts[3] / 10000.0 - 0.45) <= 0.02);

    // Chi-square against the target marginals; 20.515 is the df=5
    // critical value at p=0.001, so stat below it means p > 0.001.
    double stat = 0.0;
    for (size_t c = 0; c < 6; ++c) {
        double expected = spec.j_class_probs[c] * 10000.0;
        double d = counts[c] - expected;
        stat += d * d / expected;
    }
    CHECK(stat < 20.515);
}

TEST_CASE("classifier stays above 0.99 accuracy on a mutated corpus") {
    auto spec = default_grammar();
    auto corpus = sample_corpus(spec, 1000, 404);
    int correct = 0;
    for (const auto& s : corpus) {
        auto call = classify_j(spec, s.tokens);
        correct += (call.j_id == s.j_id);
        if (call.j_id == s.j_id) {
            CHECK(call.confidence >= 1.0 - 6.0 / 15.0);
        }
    }
    CHECK(correct >= 990);
}

TEST_CASE("classify_j handles mutation counts and short input per definition") {
    auto spec = default_grammar();
    spec.mutation_rate = 0.0;
    auto corpus = sample_corpus(spec, 1, 5);
    auto tokens = corpus[0].tokens;
    // Two substitutions inside J: confidence drops to 1 - 2/15 exactly.
    for (int p : {2, 9}) {
        int idx = corpus[0].j_start + p;
        tokens[static_cast<size_t>(idx)] = (tokens[static_cast<size_t>(idx)] + 1) % kAlphabetSize;
    }
    auto call = classify_j(spec, tokens);
    CHECK(call.j_id == corpus[0].j_id);
    CHECK(call.confidence == doctest::Approx(1.0 - 2.0 / 15.0).epsilon(1e-15));

    std::vector<int> shorty{kBos, 0, 1, 2, kEos};
    auto unknown = classify_j(spec, shorty);
    CHECK(unknown.j_id == -1);
    CHECK(unknown.confidence == 0.0);
}

TEST_CASE("corpus generation is bit-reproducible and thread-count independent") {
    auto spec = default_grammar();
    auto a = sample_corpus(spec, 300, 99);
    numkit::set_max_threads(4);
    auto b = sample_corpus(spec, 300, 99);
    numkit::set_max_threads(1);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].tokens == b[i].tokens);
        REQUIRE(a[i].v_id == b[i].v_id);
        REQUIRE(a[i].j_id == b[i].j_id);
        REQUIRE(a[i].j_start == b[i].j_start);
        REQUIRE(a[i].regions == b[i].regions);
    }
}

TEST_CASE("corpus round-trips through the line + sidecar files") {
    auto spec = default_grammar();
    auto corpus = sample_corpus(spec, 40, 11);
    auto dir = std::filesystem::temp_directory_path() / "saepipe_grammar_test";
    std::filesystem::create_directories(dir);
    auto path = (dir / "corpus.txt").string();
    write_corpus(path, corpus, "test run");
    auto loaded = read_corpus(path);
    REQUIRE(loaded.size() == corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) {
        CHECK(loaded[i].tokens == corpus[i].tokens);
        CHECK(loaded[i].v_id == corpus[i].v_id);
        CHECK(loaded[i].j_id == corpus[i].j_id);
        CHECK(loaded[i].j_start == corpus[i].j_start);
        CHECK(loaded[i].regions == corpus[i].regions);
    }
    std::filesystem::remove_all(dir);
}
