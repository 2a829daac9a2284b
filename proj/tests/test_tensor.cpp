// Numeric kernel tests: matmul and softmax against independent oracles,
// determinism, and error reporting.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <limits>

#include "infill/rng.hpp"
#include "infill/tensor.hpp"

using namespace infill;

// Independent triple-loop oracle, double accumulation, kept apart from the
// library implementation on purpose.
static TensorD matmul_oracle(const TensorD &a, const TensorD &b) {
    const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    TensorD c({m, n});
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (int64_t p = 0; p < k; ++p) {
                s += a(i, p) * b(p, j);
            }
            c(i, j) = s;
        }
    }
    return c;
}

TEST_CASE("matmul identity is exact") {
    TensorF a({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
    TensorF out = matmul(TensorF::identity(2), a);
    for (size_t i = 0; i < 4; ++i) {
        REQUIRE(out.data[i] == a.data[i]);
    }
}

TEST_CASE("matmul zero column") {
    TensorF a({1, 2}, {1.0f, 2.0f});
    TensorF b({2, 1}, {0.0f, 0.0f});
    TensorF out = matmul(a, b);
    REQUIRE(out.shape == std::vector<int64_t>{1, 1});
    REQUIRE(out.data[0] == 0.0f);
}

TEST_CASE("matmul random 5x7 * 7x3 matches triple-loop oracle") {
    Rng rng(42);
    TensorF a = TensorF::uniform({5, 7}, rng, -1.0, 1.0);
    TensorF b = TensorF::uniform({7, 3}, rng, -1.0, 1.0);
    TensorF out = matmul(a, b);
    TensorD expect = matmul_oracle(a.cast<double>(), b.cast<double>());
    for (int64_t i = 0; i < 5; ++i) {
        for (int64_t j = 0; j < 3; ++j) {
            REQUIRE(std::fabs(out(i, j) - expect(i, j)) < 1e-6);
        }
    }
}

TEST_CASE("matmul shape mismatch names both shapes") {
    TensorF a({2, 3});
    TensorF b({4, 5});
    REQUIRE_THROWS_WITH(matmul(a, b),
                        Catch::Matchers::ContainsSubstring("2x3") &&
                            Catch::Matchers::ContainsSubstring("4x5"));
}

TEST_CASE("softmax of equal logits is uniform") {
    TensorF x({1, 3}, {0.0f, 0.0f, 0.0f});
    TensorF p = softmax_rows(x);
    for (int64_t j = 0; j < 3; ++j) {
        REQUIRE(p(0, j) == Catch::Approx(1.0 / 3.0).epsilon(1e-6));
    }
}

TEST_CASE("softmax is shift invariant") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const float x = static_cast<float>(rng.uniform(-20.0, 20.0));
        const float c = static_cast<float>(rng.uniform(0.1, 3.0));
        TensorF shifted({1, 3}, {x, x + c, x + 2 * c});
        TensorF base({1, 3}, {0.0f, c, 2 * c});
        TensorF ps = softmax_rows(shifted);
        TensorF pb = softmax_rows(base);
        for (int64_t j = 0; j < 3; ++j) {
            REQUIRE(std::fabs(ps(0, j) - pb(0, j)) < 1e-6f);
        }
    }
}

TEST_CASE("softmax [1,2,3] matches extended-precision oracle") {
    // Frozen from a 30-digit evaluation of exp(i)/sum(exp(1..3)).
    const double expect[3] = {0.090030573170380458, 0.24472847105479765,
                              0.66524095577482189};
    TensorF x({1, 3}, {1.0f, 2.0f, 3.0f});
    TensorF p = softmax_rows(x);
    for (int64_t j = 0; j < 3; ++j) {
        REQUIRE(std::fabs(p(0, j) - expect[j]) < 1e-7);
    }
}

TEST_CASE("softmax rows sum to one on random inputs") {
    Rng rng(123);
    TensorF x = TensorF::uniform({17, 29}, rng, -30.0, 30.0);
    TensorF p = softmax_rows(x);
    REQUIRE(p.all_finite());
    for (int64_t i = 0; i < 17; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < 29; ++j) {
            REQUIRE(p(i, j) >= 0.0f);
            s += p(i, j);
        }
        REQUIRE(std::fabs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("softmax skips -inf entries and rejects fully masked rows") {
    const float ninf = -std::numeric_limits<float>::infinity();
    TensorF x({1, 3}, {1.0f, ninf, 2.0f});
    TensorF p = softmax_rows(x);
    REQUIRE(p(0, 1) == 0.0f);
    REQUIRE(p.all_finite());
    REQUIRE(std::fabs(p(0, 0) + p(0, 2) - 1.0f) < 1e-6f);

    TensorF masked({2, 2}, {0.0f, 0.0f, ninf, ninf});
    REQUIRE_THROWS_WITH(softmax_rows(masked),
                        Catch::Matchers::ContainsSubstring("fully masked row"));
}

TEST_CASE("operations are bit-reproducible") {
    Rng rng(99);
    TensorF a = TensorF::uniform({9, 11}, rng, -5.0, 5.0);
    TensorF b = TensorF::uniform({11, 6}, rng, -5.0, 5.0);
    TensorF c1 = matmul(a, b);
    TensorF c2 = matmul(a, b);
    REQUIRE(std::memcmp(c1.data.data(), c2.data.data(),
                        c1.data.size() * sizeof(float)) == 0);
    TensorF p1 = softmax_rows(c1);
    TensorF p2 = softmax_rows(c2);
    REQUIRE(std::memcmp(p1.data.data(), p2.data.data(),
                        p1.data.size() * sizeof(float)) == 0);
}

TEST_CASE("rng streams are reproducible and fork independently") {
    Rng a(2024), b(2024);
    for (int i = 0; i < 100; ++i) {
        REQUIRE(a.next_u64() == b.next_u64());
    }
    Rng base(5);
    Rng f1 = base.fork(1);
    Rng f2 = base.fork(2);
    REQUIRE(f1.next_u64() != f2.next_u64());
    // below() stays in range and hits both ends eventually
    Rng r(11);
    bool saw0 = false, saw4 = false;
    for (int i = 0; i < 200; ++i) {
        const uint64_t v = r.below(5);
        REQUIRE(v < 5);
        saw0 |= v == 0;
        saw4 |= v == 4;
    }
    REQUIRE(saw0);
    REQUIRE(saw4);
}

TEST_CASE("tensor shape validation") {
    REQUIRE_THROWS_AS(TensorF({2, 3}, {1.0f, 2.0f}), ShapeError);
    REQUIRE_THROWS_AS(TensorF({0, 3}), ShapeError);
}
