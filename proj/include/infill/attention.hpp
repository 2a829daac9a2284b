// Scaled dot-product attention over multi-head / grouped-query / multi-query
// layouts, with causal, prefix (bidirectional context, causal continuation),
// full, and explicit masks.
//
// Two evaluation paths compute the same function:
//   attention_naive  - materializes per-head score matrices, reference path
//   attention_tiled  - online softmax over key tiles (running max, running
//                      denominator, rescaled accumulator); never builds the
//                      s_q x s_k score matrix
//
// Masked positions are assigned a -inf sentinel that softmax skips; no
// arithmetic is ever performed on the sentinel. The 1/sqrt(d) scale is
// applied to q before the dot product.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "infill/tensor.hpp"

namespace infill {

// ----------------------------- masks -----------------------------

struct BoolMatrix {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<uint8_t> v;

    BoolMatrix() = default;
    BoolMatrix(int64_t r, int64_t c) : rows(r), cols(c), v(static_cast<size_t>(r * c), 0) {}

    bool at(int64_t i, int64_t j) const { return v[static_cast<size_t>(i * cols + j)] != 0; }
    void set(int64_t i, int64_t j, bool b) { v[static_cast<size_t>(i * cols + j)] = b ? 1 : 0; }
};

struct MaskSpec {
    enum class Kind { causal, prefix, full, explicit_mask };

    Kind kind = Kind::causal;
    int64_t prefix_len = 0;
    BoolMatrix matrix; // explicit_mask only

    static MaskSpec causal() { return MaskSpec{}; }

    static MaskSpec prefix(int64_t p) {
        INFILL_CHECK_ARG(p >= 0, "mask: prefix length must be non-negative, got ", p);
        MaskSpec m;
        m.kind = Kind::prefix;
        m.prefix_len = p;
        return m;
    }

    static MaskSpec full() {
        MaskSpec m;
        m.kind = Kind::full;
        return m;
    }

    static MaskSpec explicit_mask(BoolMatrix matrix) {
        MaskSpec m;
        m.kind = Kind::explicit_mask;
        m.matrix = std::move(matrix);
        return m;
    }
};

// Materialize a mask. Causal: query i sees keys j <= i + q_offset.
// Prefix(p): every query sees keys j < p, causal beyond. Every query row
// must keep at least one visible key.
inline BoolMatrix build_mask(const MaskSpec &spec, int64_t s_q, int64_t s_k,
                             int64_t q_offset = 0) {
    INFILL_CHECK_ARG(s_q >= 1 && s_k >= 1, "mask: sizes must be positive (",
                     s_q, ", ", s_k, ")");
    INFILL_CHECK_ARG(q_offset >= 0, "mask: q_offset must be non-negative");
    BoolMatrix m(s_q, s_k);
    switch (spec.kind) {
        case MaskSpec::Kind::causal:
            for (int64_t i = 0; i < s_q; ++i) {
                for (int64_t j = 0; j < s_k; ++j) {
                    m.set(i, j, j <= i + q_offset);
                }
            }
            break;
        case MaskSpec::Kind::prefix:
            INFILL_CHECK_ARG(spec.prefix_len <= s_k, "mask: prefix length ",
                             spec.prefix_len, " exceeds key length ", s_k);
            for (int64_t i = 0; i < s_q; ++i) {
                for (int64_t j = 0; j < s_k; ++j) {
                    m.set(i, j, j < spec.prefix_len || j <= i + q_offset);
                }
            }
            break;
        case MaskSpec::Kind::full:
            for (auto &b : m.v) {
                b = 1;
            }
            break;
        case MaskSpec::Kind::explicit_mask:
            INFILL_CHECK_ARG(spec.matrix.rows == s_q && spec.matrix.cols == s_k,
                             "mask: explicit matrix is ", spec.matrix.rows, "x",
                             spec.matrix.cols, ", expected ", s_q, "x", s_k);
            m = spec.matrix;
            break;
    }
    for (int64_t i = 0; i < s_q; ++i) {
        bool any = false;
        for (int64_t j = 0; j < s_k && !any; ++j) {
            any = m.at(i, j);
        }
        INFILL_CHECK_ARG(any, "mask: query row ", i, " has no visible key");
    }
    return m;
}

// ----------------------------- head layout -----------------------------

struct HeadLayout {
    int64_t n_heads = 1;
    int64_t n_kv_groups = 1; // 1 = MQA, n_heads = MHA
    int64_t head_dim = 1;

    HeadLayout() = default;

    HeadLayout(int64_t heads, int64_t kv_groups, int64_t dim)
        : n_heads(heads), n_kv_groups(kv_groups), head_dim(dim) {
        INFILL_CHECK_ARG(heads >= 1 && kv_groups >= 1 && dim >= 1,
                         "head layout: all fields must be positive");
        INFILL_CHECK_ARG(heads % kv_groups == 0, "head layout: n_heads ", heads,
                         " not divisible by n_kv_groups ", kv_groups);
    }

    // Query head i reads KV group floor(i * g / h).
    int64_t group_of(int64_t head) const { return head * n_kv_groups / n_heads; }
};

namespace detail {

template <typename T>
void check_attention_shapes(const Tensor<T> &q, const Tensor<T> &k, const Tensor<T> &v,
                            const HeadLayout &layout) {
    INFILL_CHECK_ARG(q.rank() == 3 && k.rank() == 3 && v.rank() == 3,
                     "attention: q/k/v must be 3D [heads x seq x dim]");
    INFILL_CHECK_ARG(q.shape[0] == layout.n_heads && q.shape[2] == layout.head_dim,
                     "attention: q shape ", shape_str(q.shape),
                     " does not match layout (", layout.n_heads, " heads, dim ",
                     layout.head_dim, ")");
    INFILL_CHECK_ARG(k.shape[0] == layout.n_kv_groups && k.shape[2] == layout.head_dim,
                     "attention: k shape ", shape_str(k.shape),
                     " does not match layout (", layout.n_kv_groups, " groups, dim ",
                     layout.head_dim, ")");
    INFILL_CHECK_ARG(v.shape == k.shape, "attention: v shape ", shape_str(v.shape),
                     " differs from k shape ", shape_str(k.shape));
}

} // namespace detail

// ----------------------------- naive path -----------------------------

// Reference attention; optionally records per-head softmax probabilities
// [h x s_q x s_k] for the backward pass.
template <typename T>
Tensor<T> attention_naive(const Tensor<T> &q, const Tensor<T> &k, const Tensor<T> &v,
                          const HeadLayout &layout, const MaskSpec &mask,
                          int64_t q_offset = 0, Tensor<T> *save_probs = nullptr) {
    detail::check_attention_shapes(q, k, v, layout);
    const int64_t h = layout.n_heads, d = layout.head_dim;
    const int64_t s_q = q.shape[1], s_k = k.shape[1];
    const BoolMatrix vis = build_mask(mask, s_q, s_k, q_offset);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const T neg_inf = -std::numeric_limits<T>::infinity();

    Tensor<T> out({h, s_q, d});
    if (save_probs != nullptr) {
        *save_probs = Tensor<T>({h, s_q, s_k});
    }
    for (int64_t head = 0; head < h; ++head) {
        const int64_t g = layout.group_of(head);
        Tensor<T> scores({s_q, s_k});
        for (int64_t i = 0; i < s_q; ++i) {
            for (int64_t j = 0; j < s_k; ++j) {
                if (!vis.at(i, j)) {
                    scores(i, j) = neg_inf;
                    continue;
                }
                double acc = 0.0;
                for (int64_t p = 0; p < d; ++p) {
                    acc += static_cast<double>(q(head, i, p)) * inv_sqrt_d *
                           static_cast<double>(k(g, j, p));
                }
                scores(i, j) = static_cast<T>(acc);
            }
        }
        const Tensor<T> probs = softmax_rows(scores);
        for (int64_t i = 0; i < s_q; ++i) {
            for (int64_t p = 0; p < d; ++p) {
                double acc = 0.0;
                for (int64_t j = 0; j < s_k; ++j) {
                    acc += static_cast<double>(probs(i, j)) * static_cast<double>(v(g, j, p));
                }
                out(head, i, p) = static_cast<T>(acc);
            }
        }
        if (save_probs != nullptr) {
            for (int64_t i = 0; i < s_q; ++i) {
                for (int64_t j = 0; j < s_k; ++j) {
                    (*save_probs)(head, i, j) = probs(i, j);
                }
            }
        }
    }
    return out;
}

// ----------------------------- tiled path -----------------------------

// Same function as attention_naive, computed per query row over key tiles of
// size tile_size with an online softmax. Only one tile of scores exists at a
// time; tiles with no visible key for the row are skipped outright.
template <typename T>
Tensor<T> attention_tiled(const Tensor<T> &q, const Tensor<T> &k, const Tensor<T> &v,
                          const HeadLayout &layout, const MaskSpec &mask,
                          int64_t tile_size, int64_t q_offset = 0) {
    detail::check_attention_shapes(q, k, v, layout);
    INFILL_CHECK_ARG(tile_size >= 1, "attention: tile_size must be positive, got ",
                     tile_size);
    const int64_t h = layout.n_heads, d = layout.head_dim;
    const int64_t s_q = q.shape[1], s_k = k.shape[1];
    const BoolMatrix vis = build_mask(mask, s_q, s_k, q_offset);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    Tensor<T> out({h, s_q, d});
    std::vector<double> tile_scores(static_cast<size_t>(tile_size));
    std::vector<double> acc(static_cast<size_t>(d));
    for (int64_t head = 0; head < h; ++head) {
        const int64_t g = layout.group_of(head);
        for (int64_t i = 0; i < s_q; ++i) {
            double run_max = -std::numeric_limits<double>::infinity();
            double denom = 0.0;
            std::fill(acc.begin(), acc.end(), 0.0);
            for (int64_t tile = 0; tile < s_k; tile += tile_size) {
                const int64_t tile_end = std::min(tile + tile_size, s_k);
                bool any_visible = false;
                for (int64_t j = tile; j < tile_end && !any_visible; ++j) {
                    any_visible = vis.at(i, j);
                }
                if (!any_visible) {
                    continue; // entire tile masked for this query
                }
                double tile_max = -std::numeric_limits<double>::infinity();
                for (int64_t j = tile; j < tile_end; ++j) {
                    if (!vis.at(i, j)) {
                        continue;
                    }
                    double s = 0.0;
                    for (int64_t p = 0; p < d; ++p) {
                        s += static_cast<double>(q(head, i, p)) * inv_sqrt_d *
                             static_cast<double>(k(g, j, p));
                    }
                    tile_scores[static_cast<size_t>(j - tile)] = s;
                    if (s > tile_max) {
                        tile_max = s;
                    }
                }
                if (tile_max > run_max) {
                    // Rescale the running sums onto the new max.
                    const double rescale =
                        (denom == 0.0) ? 0.0 : std::exp(run_max - tile_max);
                    denom *= rescale;
                    for (auto &a : acc) {
                        a *= rescale;
                    }
                    run_max = tile_max;
                }
                for (int64_t j = tile; j < tile_end; ++j) {
                    if (!vis.at(i, j)) {
                        continue;
                    }
                    const double w = std::exp(tile_scores[static_cast<size_t>(j - tile)] - run_max);
                    denom += w;
                    for (int64_t p = 0; p < d; ++p) {
                        acc[static_cast<size_t>(p)] += w * static_cast<double>(v(g, j, p));
                    }
                }
            }
            INFILL_CHECK_ARG(denom > 0.0, "attention: fully masked query row ", i);
            for (int64_t p = 0; p < d; ++p) {
                out(head, i, p) = static_cast<T>(acc[static_cast<size_t>(p)] / denom);
            }
        }
    }
    return out;
}

// ----------------------------- backward -----------------------------

// Backward through attention_naive given the saved probabilities. Shared KV
// groups accumulate gradients from every query head mapped onto them.
template <typename T>
void attention_backward(const Tensor<T> &q, const Tensor<T> &k, const Tensor<T> &v,
                        const Tensor<T> &probs, const HeadLayout &layout,
                        const Tensor<T> &d_out, Tensor<T> &dq, Tensor<T> &dk,
                        Tensor<T> &dv) {
    const int64_t h = layout.n_heads, d = layout.head_dim;
    const int64_t s_q = q.shape[1], s_k = k.shape[1];
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    dq = Tensor<T>(q.shape);
    dk = Tensor<T>(k.shape);
    dv = Tensor<T>(v.shape);
    for (int64_t head = 0; head < h; ++head) {
        const int64_t g = layout.group_of(head);
        for (int64_t i = 0; i < s_q; ++i) {
            // dP = dO . V^T, then softmax backward: dS = P .* (dP - sum(dP .* P))
            std::vector<double> dp(static_cast<size_t>(s_k));
            double inner = 0.0;
            for (int64_t j = 0; j < s_k; ++j) {
                double acc = 0.0;
                for (int64_t p = 0; p < d; ++p) {
                    acc += static_cast<double>(d_out(head, i, p)) *
                           static_cast<double>(v(g, j, p));
                }
                dp[static_cast<size_t>(j)] = acc;
                inner += acc * static_cast<double>(probs(head, i, j));
            }
            for (int64_t j = 0; j < s_k; ++j) {
                const double pij = static_cast<double>(probs(head, i, j));
                if (pij == 0.0) {
                    continue; // masked or unreachable key
                }
                const double ds = pij * (dp[static_cast<size_t>(j)] - inner);
                for (int64_t p = 0; p < d; ++p) {
                    dq(head, i, p) += static_cast<T>(ds * inv_sqrt_d *
                                                     static_cast<double>(k(g, j, p)));
                    dk(g, j, p) += static_cast<T>(ds * inv_sqrt_d *
                                                  static_cast<double>(q(head, i, p)));
                }
                for (int64_t p = 0; p < d; ++p) {
                    dv(g, j, p) += static_cast<T>(pij * static_cast<double>(d_out(head, i, p)));
                }
            }
        }
    }
}

} // namespace infill
