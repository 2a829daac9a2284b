// Attention tests: mask construction, GQA/MQA degeneracy against a
// replicate-KV oracle, tiled/naive equivalence, and backward gradients.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "infill/attention.hpp"
#include "infill/rng.hpp"

using namespace infill;

namespace {

// Brute-force MHA oracle with one KV tensor per query head, double math.
// Independent of the library path: plain loops, add-the-mask-as-skip.
TensorD mha_oracle(const TensorD &q, const TensorD &k_per_head, const TensorD &v_per_head,
                   const BoolMatrix &vis) {
    const int64_t h = q.shape[0], s_q = q.shape[1], d = q.shape[2];
    const int64_t s_k = k_per_head.shape[1];
    TensorD out({h, s_q, d});
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (int64_t head = 0; head < h; ++head) {
        for (int64_t i = 0; i < s_q; ++i) {
            std::vector<double> w(static_cast<size_t>(s_k), 0.0);
            double mx = -1e300;
            for (int64_t j = 0; j < s_k; ++j) {
                if (!vis.at(i, j)) {
                    continue;
                }
                double s = 0.0;
                for (int64_t p = 0; p < d; ++p) {
                    s += q(head, i, p) * k_per_head(head, j, p);
                }
                w[static_cast<size_t>(j)] = s * scale;
                mx = std::max(mx, s * scale);
            }
            double denom = 0.0;
            for (int64_t j = 0; j < s_k; ++j) {
                if (vis.at(i, j)) {
                    w[static_cast<size_t>(j)] = std::exp(w[static_cast<size_t>(j)] - mx);
                    denom += w[static_cast<size_t>(j)];
                }
            }
            for (int64_t p = 0; p < d; ++p) {
                double acc = 0.0;
                for (int64_t j = 0; j < s_k; ++j) {
                    if (vis.at(i, j)) {
                        acc += w[static_cast<size_t>(j)] / denom * v_per_head(head, j, p);
                    }
                }
                out(head, i, p) = acc;
            }
        }
    }
    return out;
}

// Expand grouped KV to per-head KV using the block-contiguous mapping.
TensorD replicate_kv(const TensorD &grp, int64_t n_heads, int64_t n_groups) {
    const int64_t s = grp.shape[1], d = grp.shape[2];
    TensorD out({n_heads, s, d});
    for (int64_t head = 0; head < n_heads; ++head) {
        const int64_t g = head * n_groups / n_heads;
        for (int64_t i = 0; i < s; ++i) {
            for (int64_t p = 0; p < d; ++p) {
                out(head, i, p) = grp(g, i, p);
            }
        }
    }
    return out;
}

double max_diff_fd(const TensorF &a, const TensorD &b) {
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        m = std::max(m, std::fabs(static_cast<double>(a.data[i]) - b.data[i]));
    }
    return m;
}

} // namespace

TEST_CASE("causal mask is lower triangular") {
    BoolMatrix m = build_mask(MaskSpec::causal(), 3, 3);
    for (int64_t i = 0; i < 3; ++i) {
        for (int64_t j = 0; j < 3; ++j) {
            REQUIRE(m.at(i, j) == (j <= i));
        }
    }
}

TEST_CASE("prefix mask exposes the prefix and stays causal beyond") {
    BoolMatrix m = build_mask(MaskSpec::prefix(3), 5, 5);
    for (int64_t i = 0; i < 5; ++i) {
        for (int64_t j = 0; j < 5; ++j) {
            REQUIRE(m.at(i, j) == (j < 3 || j <= i));
        }
    }
}

TEST_CASE("decode-step mask sees the whole history") {
    BoolMatrix m = build_mask(MaskSpec::causal(), 1, 7, 6);
    for (int64_t j = 0; j < 7; ++j) {
        REQUIRE(m.at(0, j));
    }
}

TEST_CASE("prefix longer than keys is rejected") {
    REQUIRE_THROWS_AS(build_mask(MaskSpec::prefix(9), 4, 4), ShapeError);
}

TEST_CASE("single visible key returns its value row") {
    Rng rng(1);
    HeadLayout layout(3, 3, 4);
    TensorF q = TensorF::uniform({3, 2, 4}, rng, -1.0, 1.0);
    TensorF k = TensorF::uniform({3, 1, 4}, rng, -1.0, 1.0);
    TensorF v = TensorF::uniform({3, 1, 4}, rng, -1.0, 1.0);
    TensorF out = attention_naive(q, k, v, layout, MaskSpec::full());
    for (int64_t h = 0; h < 3; ++h) {
        for (int64_t i = 0; i < 2; ++i) {
            for (int64_t p = 0; p < 4; ++p) {
                REQUIRE(out(h, i, p) == Catch::Approx(v(h, 0, p)).margin(1e-7));
            }
        }
    }
}

TEST_CASE("identical value rows collapse to that row") {
    Rng rng(2);
    HeadLayout layout(2, 1, 4);
    TensorF q = TensorF::uniform({2, 3, 4}, rng, -1.0, 1.0);
    TensorF k = TensorF::uniform({1, 5, 4}, rng, -1.0, 1.0);
    TensorF v({1, 5, 4});
    for (int64_t j = 0; j < 5; ++j) {
        for (int64_t p = 0; p < 4; ++p) {
            v(0, j, p) = static_cast<float>(p) - 1.5f;
        }
    }
    TensorF out = attention_naive(q, k, v, layout, MaskSpec::causal());
    for (int64_t h = 0; h < 2; ++h) {
        for (int64_t i = 0; i < 3; ++i) {
            for (int64_t p = 0; p < 4; ++p) {
                REQUIRE(std::fabs(out(h, i, p) - (static_cast<float>(p) - 1.5f)) < 1e-6);
            }
        }
    }
}

TEST_CASE("GQA layouts match the replicate-KV oracle") {
    Rng rng(3);
    const int64_t h = 4, s_q = 6, s_k = 6, d = 8;
    for (const int64_t g : {int64_t(1), int64_t(2), int64_t(4)}) {
        HeadLayout layout(h, g, d);
        TensorF q = TensorF::uniform({h, s_q, d}, rng, -1.0, 1.0);
        TensorF k = TensorF::uniform({g, s_k, d}, rng, -1.0, 1.0);
        TensorF v = TensorF::uniform({g, s_k, d}, rng, -1.0, 1.0);
        for (const auto &mask : {MaskSpec::causal(), MaskSpec::full(), MaskSpec::prefix(3)}) {
            TensorF out = attention_naive(q, k, v, layout, mask);
            TensorD expect = mha_oracle(q.cast<double>(),
                                        replicate_kv(k.cast<double>(), h, g),
                                        replicate_kv(v.cast<double>(), h, g),
                                        build_mask(mask, s_q, s_k));
            REQUIRE(max_diff_fd(out, expect) < 1e-6);
        }
    }
}

TEST_CASE("tiled attention equals naive for every tile size and mask") {
    Rng rng(4);
    const int64_t h = 2, g = 2, d = 8;
    for (const int64_t s_k : {int64_t(5), int64_t(64)}) {
        HeadLayout layout(h, g, d);
        TensorF q = TensorF::uniform({h, s_k, d}, rng, -1.0, 1.0);
        TensorF k = TensorF::uniform({g, s_k, d}, rng, -1.0, 1.0);
        TensorF v = TensorF::uniform({g, s_k, d}, rng, -1.0, 1.0);
        for (const auto &mask :
             {MaskSpec::causal(), MaskSpec::full(), MaskSpec::prefix(s_k / 2)}) {
            TensorF base = attention_naive(q, k, v, layout, mask);
            for (const int64_t tile : {int64_t(1), int64_t(3), int64_t(16), s_k, s_k + 5}) {
                TensorF tiled = attention_tiled(q, k, v, layout, mask, tile);
                REQUIRE(max_abs_diff(base, tiled) < 1e-5);
            }
        }
    }
}

TEST_CASE("tiled attention rejects non-positive tiles") {
    HeadLayout layout(1, 1, 4);
    TensorF q({1, 2, 4}), k({1, 2, 4}), v({1, 2, 4});
    REQUIRE_THROWS_AS(attention_tiled(q, k, v, layout, MaskSpec::full(), 0), ShapeError);
}

TEST_CASE("explicit mask with an empty query row is rejected") {
    BoolMatrix m(2, 2);
    m.set(0, 0, true);
    // row 1 entirely masked
    REQUIRE_THROWS_WITH(build_mask(MaskSpec::explicit_mask(m), 2, 2),
                        Catch::Matchers::ContainsSubstring("no visible key"));
}

TEST_CASE("permuting query heads permutes outputs") {
    Rng rng(5);
    const int64_t h = 4, g = 2, s = 5, d = 4;
    HeadLayout layout(h, g, d);
    TensorF q = TensorF::uniform({h, s, d}, rng, -1.0, 1.0);
    TensorF k = TensorF::uniform({g, s, d}, rng, -1.0, 1.0);
    TensorF v = TensorF::uniform({g, s, d}, rng, -1.0, 1.0);
    TensorF base = attention_naive(q, k, v, layout, MaskSpec::causal());

    // Swap the two head blocks together with their KV groups.
    const int64_t head_perm[4] = {2, 3, 0, 1};
    const int64_t group_perm[2] = {1, 0};
    TensorF qp({h, s, d}), kp({g, s, d}), vp({g, s, d});
    for (int64_t head = 0; head < h; ++head) {
        for (int64_t i = 0; i < s; ++i) {
            for (int64_t p = 0; p < d; ++p) {
                qp(head, i, p) = q(head_perm[head], i, p);
            }
        }
    }
    for (int64_t grp = 0; grp < g; ++grp) {
        for (int64_t i = 0; i < s; ++i) {
            for (int64_t p = 0; p < d; ++p) {
                kp(grp, i, p) = k(group_perm[grp], i, p);
                vp(grp, i, p) = v(group_perm[grp], i, p);
            }
        }
    }
    TensorF permuted = attention_naive(qp, kp, vp, layout, MaskSpec::causal());
    for (int64_t head = 0; head < h; ++head) {
        for (int64_t i = 0; i < s; ++i) {
            for (int64_t p = 0; p < d; ++p) {
                REQUIRE(permuted(head, i, p) == base(head_perm[head], i, p));
            }
        }
    }
}

TEST_CASE("attention gradients match central differences") {
    Rng rng(6);
    const int64_t h = 2, g = 1, s_q = 3, s_k = 3, d = 4;
    HeadLayout layout(h, g, d);
    TensorD q = TensorD::uniform({h, s_q, d}, rng, -1.0, 1.0);
    TensorD k = TensorD::uniform({g, s_k, d}, rng, -1.0, 1.0);
    TensorD v = TensorD::uniform({g, s_k, d}, rng, -1.0, 1.0);
    TensorD w = TensorD::uniform({h, s_q, d}, rng, -1.0, 1.0);
    const MaskSpec mask = MaskSpec::causal();

    auto objective = [&]() {
        TensorD out = attention_naive(q, k, v, layout, mask);
        double s = 0.0;
        for (size_t i = 0; i < out.data.size(); ++i) {
            s += out.data[i] * w.data[i];
        }
        return s;
    };
    auto central = [&](double &slot) {
        const double orig = slot;
        const double step = 1e-5;
        slot = orig + step;
        const double fp = objective();
        slot = orig - step;
        const double fm = objective();
        slot = orig;
        return (fp - fm) / (2.0 * step);
    };

    TensorD probs;
    attention_naive(q, k, v, layout, mask, 0, &probs);
    TensorD dq, dk, dv;
    attention_backward(q, k, v, probs, layout, w, dq, dk, dv);
    for (size_t i = 0; i < q.data.size(); ++i) {
        REQUIRE(std::fabs(dq.data[i] - central(q.data[i])) < 1e-6);
    }
    for (size_t i = 0; i < k.data.size(); ++i) {
        REQUIRE(std::fabs(dk.data[i] - central(k.data[i])) < 1e-6);
    }
    for (size_t i = 0; i < v.data.size(); ++i) {
        REQUIRE(std::fabs(dv.data[i] - central(v.data[i])) < 1e-6);
    }
}
