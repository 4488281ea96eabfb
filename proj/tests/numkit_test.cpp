#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "saepipe/numkit.hpp"

using namespace saepipe::numkit;

namespace {

// Oracle: full stable sort by (value desc, index asc), take first k.
std::vector<int> topk_by_full_sort(const Vec& v, int k) {
    std::vector<int> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return v[static_cast<size_t>(a)] != v[static_cast<size_t>(b)]
                   ? v[static_cast<size_t>(a)] > v[static_cast<size_t>(b)]
                   : a < b;
    });
    order.resize(static_cast<size_t>(k));
    std::sort(order.begin(), order.end());
    return order;
}

}  // namespace

TEST_CASE("topk_select matches a full-sort oracle, ties to lower index") {
    Rng rng(77);
    for (int trial = 0; trial < 200; ++trial) {
        int n = 1 + static_cast<int>(rng.uniform_int(40));
        int k = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n)));
        Vec v(static_cast<size_t>(n));
        // Coarse quantization forces frequent ties.
        for (auto& x : v) x = std::floor(rng.uniform() * 5.0);
        auto got = topk_select(v, k);
        auto want = topk_by_full_sort(v, k);
        REQUIRE(got.indices == want);
        CHECK(std::is_sorted(got.indices.begin(), got.indices.end()));
        for (int i = 0; i < n; ++i) {
            bool selected = std::binary_search(got.indices.begin(), got.indices.end(), i);
            CHECK(got.masked[static_cast<size_t>(i)] == (selected ? v[static_cast<size_t>(i)] : 0.0));
        }
    }
}

TEST_CASE("topk_select rejects out-of-range k") {
    Vec v{1.0, 2.0, 3.0};
    CHECK_THROWS_WITH_AS(topk_select(v, 0), "invalid k", std::invalid_argument);
    CHECK_THROWS_WITH_AS(topk_select(v, 4), "invalid k", std::invalid_argument);
    CHECK_THROWS_WITH_AS(topk_select(v, -1), "invalid k", std::invalid_argument);
}

TEST_CASE("adam_update matches a scalar hand simulation") {
    Mat p(1, 1);
    p.at(0, 0) = 0.5;
    AdamState st(p);
    double lr = 0.01;
    Vec grads{0.3, -0.7, 1.2, 0.0, 2.5};

    // Independent scalar simulation of the bias-corrected update.
    double ref = 0.5, m = 0.0, v = 0.0;
    for (size_t t = 0; t < grads.size(); ++t) {
        Mat g(1, 1);
        g.at(0, 0) = grads[t];
        adam_update(p, g, st, lr);

        m = 0.9 * m + 0.1 * grads[t];
        v = 0.999 * v + 0.001 * grads[t] * grads[t];
        double mhat = m / (1.0 - std::pow(0.9, static_cast<double>(t + 1)));
        double vhat = v / (1.0 - std::pow(0.999, static_cast<double>(t + 1)));
        ref -= lr * mhat / (std::sqrt(vhat) + 1e-8);
        REQUIRE(p.at(0, 0) == doctest::Approx(ref).epsilon(1e-15));
    }
}

TEST_CASE("adam first step moves by lr in the gradient sign direction") {
    Mat p(1, 2);
    AdamState st(p);
    Mat g(1, 2);
    g.at(0, 0) = 3.7;
    g.at(0, 1) = -0.004;
    adam_update(p, g, st, 0.05);
    CHECK(p.at(0, 0) == doctest::Approx(-0.05).epsilon(1e-6));
    CHECK(p.at(0, 1) == doctest::Approx(0.05).epsilon(1e-5));
}

TEST_CASE("minmax_scale maps extremes to 0 and 1, constants to zeros") {
    Vec v{4.0, -2.0, 10.0, 1.0};
    Vec s = minmax_scale(v);
    CHECK(s[1] == 0.0);
    CHECK(s[2] == 1.0);
    CHECK(s[0] == doctest::Approx(0.5));
    CHECK(s[3] == doctest::Approx(0.25));

    Vec flat{3.0, 3.0, 3.0};
    Vec fs = minmax_scale(flat);
    for (double x : fs) CHECK(x == 0.0);
}

TEST_CASE("prf1 and macro_f1 agree with hand counts") {
    //        tp fp fn: pred 1 where truth 1 twice, one false alarm, one miss
    std::vector<uint8_t> pred{1, 1, 1, 0, 0};
    std::vector<uint8_t> truth{1, 1, 0, 1, 0};
    auto m = prf1(pred, truth);
    CHECK(m.precision == doctest::Approx(2.0 / 3.0));
    CHECK(m.recall == doctest::Approx(2.0 / 3.0));
    CHECK(m.f1 == doctest::Approx(2.0 / 3.0));
    CHECK(m.support == 3);

    auto empty = prf1_from_counts(0, 0, 0);
    CHECK(empty.precision == 0.0);
    CHECK(empty.recall == 0.0);
    CHECK(empty.f1 == 0.0);

    std::vector<ClassMetrics> per{{1.0, 1.0, 1.0, 4}, {0.0, 0.0, 0.5, 2}};
    CHECK(macro_f1(per) == doctest::Approx(0.75));
}

TEST_CASE("pearson matches the direct formula") {
    Rng rng(5);
    Vec xs(50), ys(50);
    for (size_t i = 0; i < xs.size(); ++i) {
        xs[i] = rng.normal();
        ys[i] = 0.4 * xs[i] + rng.normal();
    }
    double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / 50.0;
    double my = std::accumulate(ys.begin(), ys.end(), 0.0) / 50.0;
    double sxy = 0, sxx = 0, syy = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    CHECK(pearson(xs, ys) == doctest::Approx(sxy / std::sqrt(sxx * syy)).epsilon(1e-12));

    Vec lin(10), lin2(10);
    for (size_t i = 0; i < 10; ++i) {
        lin[i] = static_cast<double>(i);
        lin2[i] = 3.0 * static_cast<double>(i) - 7.0;
    }
    CHECK(pearson(lin, lin2) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("pearson rejects constant or tiny inputs") {
    Vec flat{2.0, 2.0, 2.0};
    Vec other{1.0, 2.0, 3.0};
    CHECK_THROWS_WITH_AS(pearson(flat, other), "degenerate input", std::invalid_argument);
    CHECK_THROWS_WITH_AS(pearson(other, flat), "degenerate input", std::invalid_argument);
    Vec one{1.0};
    CHECK_THROWS_WITH_AS(pearson(one, one), "degenerate input", std::invalid_argument);
}

namespace {

// Oracle: ranks via brute-force counting, ties get the mean of their
// positions in the sorted order.
Vec ranks_by_counting(const Vec& v) {
    Vec r(v.size());
    for (size_t i = 0; i < v.size(); ++i) {
        double below = 0, equal = 0;
        for (size_t j = 0; j < v.size(); ++j) {
            below += (v[j] < v[i]);
            equal += (v[j] == v[i]);
        }
        r[i] = below + 0.5 * (equal + 1);
    }
    return r;
}

}  // namespace

TEST_CASE("spearman equals pearson of brute-force average ranks") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        size_t n = 5 + rng.uniform_int(20);
        Vec xs(n), ys(n);
        for (size_t i = 0; i < n; ++i) {
            xs[i] = std::floor(rng.uniform() * 6.0);
            ys[i] = std::floor(rng.uniform() * 6.0);
        }
        Vec rx = ranks_by_counting(xs), ry = ranks_by_counting(ys);
        double want;
        try {
            want = pearson(rx, ry);
        } catch (const std::invalid_argument&) {
            CHECK_THROWS_AS(spearman(xs, ys), std::invalid_argument);
            continue;
        }
        CHECK(spearman(xs, ys) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("spearman is invariant under monotone transforms") {
    Vec xs{0.3, 1.2, -4.0, 2.2, 0.9, 5.5};
    Vec cubed(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) cubed[i] = xs[i] * xs[i] * xs[i];
    CHECK(spearman(xs, cubed) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("perm_pvalue is small for perfect correlation, large for noise") {
    Vec xs(13), ys(13);
    for (size_t i = 0; i < xs.size(); ++i) {
        xs[i] = static_cast<double>(i);
        ys[i] = 2.0 * static_cast<double>(i) + 1.0;
    }
    Rng rng(123);
    double p = perm_pvalue(xs, ys, CorrStat::spearman, 999, rng);
    CHECK(p <= 0.01);
    CHECK(p >= 1.0 / 1000.0);

    Rng rng2(123);
    double p_again = perm_pvalue(xs, ys, CorrStat::spearman, 999, rng2);
    CHECK(p == p_again);

    // ys independent of xs: expect no evidence against the null.
    Rng noise(9);
    Vec zs(13);
    for (auto& z : zs) z = noise.normal();
    Rng rng3(55);
    double p_noise = perm_pvalue(xs, zs, CorrStat::pearson, 999, rng3);
    CHECK(p_noise > 0.05);

    CHECK_THROWS_AS(perm_pvalue(xs, ys, CorrStat::pearson, 50, rng), std::invalid_argument);
}

TEST_CASE("rng streams are deterministic and derived streams differ") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

    CHECK(Rng::derive(42, 0) != Rng::derive(42, 1));
    CHECK(Rng::derive(42, 1) != Rng::derive(43, 1));
    Rng c(7);
    Rng f0 = c.fork(0), f1 = c.fork(1);
    CHECK(f0.next_u64() != f1.next_u64());
}

TEST_CASE("rng uniform and normal have sane ranges and moments") {
    Rng rng(2024);
    double sum = 0, sumsq = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        sum += u;
        sumsq += u * u;
    }
    CHECK(sum / n == doctest::Approx(0.5).epsilon(0.02));
    CHECK(sumsq / n - (sum / n) * (sum / n) == doctest::Approx(1.0 / 12.0).epsilon(0.05));

    double ns = 0, nss = 0;
    for (int i = 0; i < n; ++i) {
        double z = rng.normal();
        ns += z;
        nss += z * z;
    }
    CHECK(ns / n == doctest::Approx(0.0).epsilon(1.0).scale(0.05));
    CHECK(nss / n == doctest::Approx(1.0).epsilon(0.05));

    std::set<uint64_t> seen;
    for (int i = 0; i < 1000; ++i) {
        uint64_t v = rng.uniform_int(7);
        REQUIRE(v < 7);
        seen.insert(v);
    }
    CHECK(seen.size() == 7);
}

TEST_CASE("rng shuffle is a permutation and seed-stable") {
    Rng rng(31);
    std::vector<int> v(20);
    std::iota(v.begin(), v.end(), 0);
    auto orig = v;
    rng.shuffle(v);
    auto sorted = v;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == orig);

    Rng rng2(31);
    auto w = orig;
    rng2.shuffle(w);
    CHECK(v == w);
}

TEST_CASE("parallel_for output is identical across thread counts") {
    const size_t n = 1000;
    auto run = [&](int threads) {
        set_max_threads(threads);
        Vec out(n, -1.0);
        parallel_for(n, [&](size_t i) { out[i] = std::sin(static_cast<double>(i)) * 0.25; });
        return out;
    };
    Vec serial = run(1);
    Vec quad = run(4);
    set_max_threads(1);
    REQUIRE(serial.size() == quad.size());
    for (size_t i = 0; i < n; ++i) REQUIRE(serial[i] == quad[i]);
    for (double x : serial) CHECK(x != -1.0);
}

TEST_CASE("all_finite flags nan and inf") {
    Vec ok{1.0, -2.0, 0.0};
    CHECK(all_finite(ok));
    Vec bad{1.0, std::nan(""), 0.0};
    CHECK_FALSE(all_finite(bad));
    Mat m(2, 2);
    m.at(1, 1) = std::numeric_limits<double>::infinity();
    CHECK_FALSE(all_finite(m));
}
