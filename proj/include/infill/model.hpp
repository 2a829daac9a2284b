// The block stack: pre-norm residual layers of RMSNorm -> attention
// (2D rotary, grouped-query) -> residual -> RMSNorm -> SwiGLU -> residual,
// a final RMSNorm, and a (tied by default) vocabulary projection.
//
// Also here: blank-infilling sample construction. A sample is Part A (the
// corrupted sequence, each span collapsed to one MASK token, bidirectionally
// visible via a prefix mask) followed by Part B (for each span, SOP then the
// span tokens, generated causally). Part-A tokens carry (pos_a, 0); a span's
// tokens carry (mask position, 1..span_len+1). Loss applies to Part B only.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "infill/attention.hpp"
#include "infill/layers.hpp"
#include "infill/rope.hpp"
#include "infill/tensor.hpp"

namespace infill {

// ----------------------------- configuration -----------------------------

struct SpecialIds {
    int32_t mask = -1;
    int32_t sop = -1;
    int32_t eop = -1;
    int32_t pad = -1;
};

struct ModelConfig {
    int64_t n_layers = 0;
    int64_t hidden = 0;
    int64_t n_heads = 0;
    int64_t n_kv_groups = 0;
    int64_t head_dim = 0; // hidden / n_heads
    int64_t d_ffn = 0;    // ffn_size(hidden)
    int64_t vocab_size = 0;
    int64_t max_positions = 0;
    RopeConfig rope;
    SpecialIds specials;
    bool tied_embeddings = true;

    // Specials default to the four highest ids, matching the tokenizer.
    static ModelConfig make(int64_t n_layers, int64_t hidden, int64_t n_heads,
                            int64_t n_kv_groups, int64_t vocab_size,
                            int64_t max_positions, double rope_base = 10000.0,
                            double rope_scale = 1.0) {
        ModelConfig cfg;
        cfg.n_layers = n_layers;
        cfg.hidden = hidden;
        cfg.n_heads = n_heads;
        cfg.n_kv_groups = n_kv_groups;
        cfg.head_dim = hidden / std::max<int64_t>(n_heads, 1);
        cfg.d_ffn = ffn_size(hidden);
        cfg.vocab_size = vocab_size;
        cfg.max_positions = max_positions;
        cfg.rope = RopeConfig{cfg.head_dim, rope_base, rope_scale};
        cfg.specials.mask = static_cast<int32_t>(vocab_size - 4);
        cfg.specials.sop = static_cast<int32_t>(vocab_size - 3);
        cfg.specials.eop = static_cast<int32_t>(vocab_size - 2);
        cfg.specials.pad = static_cast<int32_t>(vocab_size - 1);
        cfg.validate();
        return cfg;
    }

    void validate() const {
        INFILL_CHECK_ARG(n_layers >= 1 && hidden >= 1 && n_heads >= 1 &&
                             n_kv_groups >= 1 && vocab_size >= 5 && max_positions >= 1,
                         "config: non-positive field");
        INFILL_CHECK_ARG(hidden % n_heads == 0, "config: hidden ", hidden,
                         " not divisible by n_heads ", n_heads);
        INFILL_CHECK_ARG(n_heads % n_kv_groups == 0, "config: n_heads ", n_heads,
                         " not divisible by n_kv_groups ", n_kv_groups);
        INFILL_CHECK_ARG(head_dim == hidden / n_heads, "config: head_dim ", head_dim,
                         " != hidden/n_heads");
        INFILL_CHECK_ARG(head_dim % 4 == 0, "config: head_dim ", head_dim,
                         " must be divisible by 4 for 2D rotary positions");
        INFILL_CHECK_ARG(d_ffn == ffn_size(hidden), "config: d_ffn ", d_ffn,
                         " violates sizing rule ffn_size(", hidden, ") = ", ffn_size(hidden));
        INFILL_CHECK_ARG(rope.head_dim == head_dim, "config: rope head_dim mismatch");
    }

    HeadLayout layout() const { return HeadLayout(n_heads, n_kv_groups, head_dim); }
};

// ----------------------------- parameters -----------------------------

template <typename T>
struct LayerParams {
    RMSNormLayer<T> attn_norm;
    LinearLayer<T> wq, wk, wv; // biased (the QKV exception)
    LinearLayer<T> wo;         // bias-free
    RMSNormLayer<T> ffn_norm;
    SwiGLUFFN<T> ffn;
};

template <typename T>
struct ModelParams {
    Tensor<T> embedding; // [vocab x hidden]
    std::vector<LayerParams<T>> layers;
    RMSNormLayer<T> final_norm;
    Tensor<T> lm_head; // [hidden x vocab], empty when tied

    // Seeded init: normal(0, 0.02), output projections of each residual
    // branch scaled down by 1/sqrt(2 * n_layers), unit gammas, zero biases.
    static ModelParams init(const ModelConfig &cfg, uint64_t seed) {
        cfg.validate();
        Rng rng(seed);
        const double std0 = 0.02;
        const double resid = std0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
        ModelParams p;
        p.embedding = Tensor<T>::randn({cfg.vocab_size, cfg.hidden}, rng, std0);
        for (int64_t l = 0; l < cfg.n_layers; ++l) {
            LayerParams<T> lp;
            lp.attn_norm = RMSNormLayer<T>::ones(cfg.hidden);
            lp.wq = LinearLayer<T>(
                Tensor<T>::randn({cfg.hidden, cfg.n_heads * cfg.head_dim}, rng, std0),
                Tensor<T>::zeros({cfg.n_heads * cfg.head_dim}), LinearRole::qkv);
            lp.wk = LinearLayer<T>(
                Tensor<T>::randn({cfg.hidden, cfg.n_kv_groups * cfg.head_dim}, rng, std0),
                Tensor<T>::zeros({cfg.n_kv_groups * cfg.head_dim}), LinearRole::qkv);
            lp.wv = LinearLayer<T>(
                Tensor<T>::randn({cfg.hidden, cfg.n_kv_groups * cfg.head_dim}, rng, std0),
                Tensor<T>::zeros({cfg.n_kv_groups * cfg.head_dim}), LinearRole::qkv);
            lp.wo = LinearLayer<T>(
                Tensor<T>::randn({cfg.n_heads * cfg.head_dim, cfg.hidden}, rng, resid),
                LinearRole::general);
            lp.ffn_norm = RMSNormLayer<T>::ones(cfg.hidden);
            lp.ffn = SwiGLUFFN<T>(Tensor<T>::randn({cfg.hidden, cfg.d_ffn}, rng, std0),
                                  Tensor<T>::randn({cfg.hidden, cfg.d_ffn}, rng, std0),
                                  Tensor<T>::randn({cfg.d_ffn, cfg.hidden}, rng, resid));
            p.layers.push_back(std::move(lp));
        }
        p.final_norm = RMSNormLayer<T>::ones(cfg.hidden);
        if (!cfg.tied_embeddings) {
            p.lm_head = Tensor<T>::randn({cfg.hidden, cfg.vocab_size}, rng, std0);
        }
        return p;
    }

    static ModelParams zeros_like(const ModelConfig &cfg) {
        ModelParams p;
        p.embedding = Tensor<T>::zeros({cfg.vocab_size, cfg.hidden});
        for (int64_t l = 0; l < cfg.n_layers; ++l) {
            LayerParams<T> lp;
            lp.attn_norm = RMSNormLayer<T>(Tensor<T>::zeros({cfg.hidden}));
            lp.wq = LinearLayer<T>(Tensor<T>::zeros({cfg.hidden, cfg.n_heads * cfg.head_dim}),
                                   Tensor<T>::zeros({cfg.n_heads * cfg.head_dim}),
                                   LinearRole::qkv);
            lp.wk = LinearLayer<T>(
                Tensor<T>::zeros({cfg.hidden, cfg.n_kv_groups * cfg.head_dim}),
                Tensor<T>::zeros({cfg.n_kv_groups * cfg.head_dim}), LinearRole::qkv);
            lp.wv = LinearLayer<T>(
                Tensor<T>::zeros({cfg.hidden, cfg.n_kv_groups * cfg.head_dim}),
                Tensor<T>::zeros({cfg.n_kv_groups * cfg.head_dim}), LinearRole::qkv);
            lp.wo = LinearLayer<T>(Tensor<T>::zeros({cfg.n_heads * cfg.head_dim, cfg.hidden}),
                                   LinearRole::general);
            lp.ffn_norm = RMSNormLayer<T>(Tensor<T>::zeros({cfg.hidden}));
            lp.ffn.w_gate = Tensor<T>::zeros({cfg.hidden, cfg.d_ffn});
            lp.ffn.w_up = Tensor<T>::zeros({cfg.hidden, cfg.d_ffn});
            lp.ffn.w_down = Tensor<T>::zeros({cfg.d_ffn, cfg.hidden});
            p.layers.push_back(std::move(lp));
        }
        p.final_norm = RMSNormLayer<T>(Tensor<T>::zeros({cfg.hidden}));
        if (!cfg.tied_embeddings) {
            p.lm_head = Tensor<T>::zeros({cfg.hidden, cfg.vocab_size});
        }
        return p;
    }

    // Fixed enumeration order; checkpoint files, optimizer slots and the
    // gradient check all walk parameters through this list.
    std::vector<std::pair<std::string, Tensor<T> *>> named_tensors() {
        std::vector<std::pair<std::string, Tensor<T> *>> out;
        out.emplace_back("embedding", &embedding);
        for (size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            LayerParams<T> &lp = layers[l];
            out.emplace_back(p + "attn_norm.gamma", &lp.attn_norm.gamma);
            out.emplace_back(p + "wq.weight", &lp.wq.weight);
            out.emplace_back(p + "wq.bias", &lp.wq.bias);
            out.emplace_back(p + "wk.weight", &lp.wk.weight);
            out.emplace_back(p + "wk.bias", &lp.wk.bias);
            out.emplace_back(p + "wv.weight", &lp.wv.weight);
            out.emplace_back(p + "wv.bias", &lp.wv.bias);
            out.emplace_back(p + "wo.weight", &lp.wo.weight);
            out.emplace_back(p + "ffn_norm.gamma", &lp.ffn_norm.gamma);
            out.emplace_back(p + "ffn.w_gate", &lp.ffn.w_gate);
            out.emplace_back(p + "ffn.w_up", &lp.ffn.w_up);
            out.emplace_back(p + "ffn.w_down", &lp.ffn.w_down);
        }
        out.emplace_back("final_norm.gamma", &final_norm.gamma);
        if (lm_head.numel() > 0) {
            out.emplace_back("lm_head", &lm_head);
        }
        return out;
    }

    template <typename U>
    ModelParams<U> cast() const {
        ModelParams<U> out;
        out.embedding = embedding.template cast<U>();
        for (const LayerParams<T> &lp : layers) {
            LayerParams<U> o;
            o.attn_norm = RMSNormLayer<U>(lp.attn_norm.gamma.template cast<U>(),
                                          static_cast<U>(lp.attn_norm.eps));
            o.wq = LinearLayer<U>(lp.wq.weight.template cast<U>(),
                                  lp.wq.bias.template cast<U>(), LinearRole::qkv);
            o.wk = LinearLayer<U>(lp.wk.weight.template cast<U>(),
                                  lp.wk.bias.template cast<U>(), LinearRole::qkv);
            o.wv = LinearLayer<U>(lp.wv.weight.template cast<U>(),
                                  lp.wv.bias.template cast<U>(), LinearRole::qkv);
            o.wo = LinearLayer<U>(lp.wo.weight.template cast<U>(), LinearRole::general);
            o.ffn_norm = RMSNormLayer<U>(lp.ffn_norm.gamma.template cast<U>(),
                                         static_cast<U>(lp.ffn_norm.eps));
            o.ffn.w_gate = lp.ffn.w_gate.template cast<U>();
            o.ffn.w_up = lp.ffn.w_up.template cast<U>();
            o.ffn.w_down = lp.ffn.w_down.template cast<U>();
            out.layers.push_back(std::move(o));
        }
        out.final_norm = RMSNormLayer<U>(final_norm.gamma.template cast<U>(),
                                         static_cast<U>(final_norm.eps));
        if (lm_head.numel() > 0) {
            out.lm_head = lm_head.template cast<U>();
        }
        return out;
    }
};

// ----------------------------- head reshapes -----------------------------

template <typename T>
Tensor<T> split_heads(const Tensor<T> &x, int64_t n, int64_t d) {
    const int64_t seq = x.shape[0];
    Tensor<T> out({n, seq, d});
    for (int64_t h = 0; h < n; ++h) {
        for (int64_t i = 0; i < seq; ++i) {
            for (int64_t j = 0; j < d; ++j) {
                out(h, i, j) = x(i, h * d + j);
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T> &x) {
    const int64_t n = x.shape[0], seq = x.shape[1], d = x.shape[2];
    Tensor<T> out({seq, n * d});
    for (int64_t h = 0; h < n; ++h) {
        for (int64_t i = 0; i < seq; ++i) {
            for (int64_t j = 0; j < d; ++j) {
                out(i, h * d + j) = x(h, i, j);
            }
        }
    }
    return out;
}

namespace detail {

// Rotate every head slice of a [n x seq x d] stack by the 2D positions.
template <typename T>
Tensor<T> rope_heads(const Tensor<T> &x, std::span<const Position2D> positions,
                     const RopeConfig &cfg, bool backward = false) {
    const int64_t n = x.shape[0], seq = x.shape[1], d = x.shape[2];
    Tensor<T> out({n, seq, d});
    for (int64_t h = 0; h < n; ++h) {
        Tensor<T> slab({seq, d});
        for (int64_t i = 0; i < seq; ++i) {
            for (int64_t j = 0; j < d; ++j) {
                slab(i, j) = x(h, i, j);
            }
        }
        Tensor<T> rotated = backward ? rope_rotate_2d_backward(slab, positions, cfg)
                                     : rope_rotate_2d(slab, positions, cfg);
        for (int64_t i = 0; i < seq; ++i) {
            for (int64_t j = 0; j < d; ++j) {
                out(h, i, j) = rotated(i, j);
            }
        }
    }
    return out;
}

} // namespace detail

// ----------------------------- forward -----------------------------

template <typename T>
struct LayerTrace {
    Tensor<T> x_in;     // [seq x hidden]
    Tensor<T> x_norm1;  // post attn_norm
    Tensor<T> q_rot;    // [h x seq x d], post-rotation
    Tensor<T> k_rot;    // [g x seq x d], post-rotation
    Tensor<T> v;        // [g x seq x d]
    Tensor<T> probs;    // [h x seq x seq]
    Tensor<T> attn_merged; // [seq x h*d], pre output projection
    Tensor<T> x_mid;    // after attention residual
    Tensor<T> x_norm2;  // post ffn_norm
};

template <typename T>
struct ForwardTrace {
    Tensor<T> x0; // embedding rows
    std::vector<LayerTrace<T>> layers;
    Tensor<T> x_last;  // pre final norm
    Tensor<T> x_final; // post final norm
    Tensor<T> logits;  // [seq x vocab]
};

template <typename T>
Tensor<T> output_logits(const ModelConfig &cfg, const ModelParams<T> &params,
                        const Tensor<T> &x_final) {
    if (cfg.tied_embeddings) {
        return matmul_nt(x_final, params.embedding);
    }
    return matmul(x_final, params.lm_head);
}

// Full forward. When `trace` is non-null every intermediate needed by the
// backward pass is recorded.
template <typename T>
Tensor<T> forward(const ModelConfig &cfg, const ModelParams<T> &params,
                  std::span<const int32_t> input_ids,
                  std::span<const Position2D> positions, const MaskSpec &mask,
                  ForwardTrace<T> *trace = nullptr) {
    const int64_t seq = static_cast<int64_t>(input_ids.size());
    INFILL_CHECK_ARG(seq >= 1, "forward: empty input");
    INFILL_CHECK_ARG(seq <= cfg.max_positions, "forward: sequence length ", seq,
                     " exceeds max_positions ", cfg.max_positions);
    INFILL_CHECK_ARG(positions.size() == input_ids.size(),
                     "forward: positions/input length mismatch");
    const HeadLayout layout = cfg.layout();

    Tensor<T> x({seq, cfg.hidden});
    for (int64_t i = 0; i < seq; ++i) {
        const int32_t id = input_ids[static_cast<size_t>(i)];
        INFILL_CHECK_ARG(id >= 0 && id < cfg.vocab_size, "forward: token id ", id,
                         " outside vocabulary of size ", cfg.vocab_size);
        for (int64_t j = 0; j < cfg.hidden; ++j) {
            x(i, j) = params.embedding(id, j);
        }
    }
    if (trace != nullptr) {
        trace->x0 = x;
        trace->layers.clear();
    }

    for (const LayerParams<T> &lp : params.layers) {
        LayerTrace<T> lt;
        lt.x_in = x;
        Tensor<T> xn = rms_norm(x, lp.attn_norm);
        Tensor<T> q = detail::rope_heads(
            split_heads(linear(xn, lp.wq), cfg.n_heads, cfg.head_dim), positions, cfg.rope);
        Tensor<T> k = detail::rope_heads(
            split_heads(linear(xn, lp.wk), cfg.n_kv_groups, cfg.head_dim), positions,
            cfg.rope);
        Tensor<T> v = split_heads(linear(xn, lp.wv), cfg.n_kv_groups, cfg.head_dim);
        Tensor<T> attn = attention_naive(q, k, v, layout, mask, 0,
                                         trace != nullptr ? &lt.probs : nullptr);
        Tensor<T> merged = merge_heads(attn);
        add_inplace(x, linear(merged, lp.wo));
        if (trace != nullptr) {
            lt.x_norm1 = std::move(xn);
            lt.q_rot = std::move(q);
            lt.k_rot = std::move(k);
            lt.v = std::move(v);
            lt.attn_merged = std::move(merged);
            lt.x_mid = x;
        }
        Tensor<T> xn2 = rms_norm(x, lp.ffn_norm);
        add_inplace(x, swiglu_ffn(xn2, lp.ffn));
        if (trace != nullptr) {
            lt.x_norm2 = std::move(xn2);
            trace->layers.push_back(std::move(lt));
        }
    }

    Tensor<T> x_final = rms_norm(x, params.final_norm);
    Tensor<T> logits = output_logits(cfg, params, x_final);
    if (trace != nullptr) {
        trace->x_last = std::move(x);
        trace->x_final = std::move(x_final);
        trace->logits = logits;
    }
    return logits;
}

// ----------------------------- blank infilling -----------------------------

struct Span {
    int64_t start = 0;
    int64_t len = 0;
};

struct BlankInfillSample {
    std::vector<int32_t> input_ids;
    std::vector<Position2D> positions;
    MaskSpec mask; // prefix(|Part A|)
    std::vector<int32_t> targets;   // aligned with input_ids; -1 off Part B
    std::vector<uint8_t> loss_mask; // 1 on Part-B positions
    int64_t part_a_len = 0;
};

// Build a training sample from `tokens` and disjoint spans. Part A keeps the
// original order with each span collapsed to MASK; Part B appends the spans
// in an order shuffled under `seed`, positions assigned after the shuffle.
inline BlankInfillSample make_blank_infill(std::span<const int32_t> tokens,
                                           std::vector<Span> spans,
                                           const ModelConfig &cfg, uint64_t seed = 0) {
    const int64_t n = static_cast<int64_t>(tokens.size());
    for (const Span &s : spans) {
        INFILL_CHECK_ARG(s.len >= 1, "blank infill: span length must be >= 1");
        INFILL_CHECK_ARG(s.start >= 0 && s.start + s.len <= n,
                         "blank infill: span [", s.start, ", ", s.start + s.len,
                         ") out of range for ", n, " tokens");
    }
    std::vector<Span> ordered = spans;
    std::sort(ordered.begin(), ordered.end(),
              [](const Span &a, const Span &b) { return a.start < b.start; });
    for (size_t i = 1; i < ordered.size(); ++i) {
        INFILL_CHECK_ARG(ordered[i - 1].start + ordered[i - 1].len <= ordered[i].start,
                         "blank infill: overlapping spans at ", ordered[i].start);
    }
    if (!spans.empty()) {
        INFILL_CHECK_ARG(cfg.specials.mask >= 0 && cfg.specials.sop >= 0 &&
                             cfg.specials.eop >= 0,
                         "blank infill: special ids not configured");
    }

    BlankInfillSample out;
    // Part A: original order, spans collapsed to MASK.
    std::vector<int64_t> mask_pos_in_a(ordered.size());
    {
        size_t next_span = 0;
        int64_t i = 0;
        while (i < n) {
            if (next_span < ordered.size() && i == ordered[next_span].start) {
                mask_pos_in_a[next_span] = static_cast<int64_t>(out.input_ids.size());
                out.input_ids.push_back(cfg.specials.mask);
                i += ordered[next_span].len;
                ++next_span;
            } else {
                out.input_ids.push_back(tokens[static_cast<size_t>(i)]);
                ++i;
            }
        }
    }
    out.part_a_len = static_cast<int64_t>(out.input_ids.size());
    for (int64_t i = 0; i < out.part_a_len; ++i) {
        out.positions.push_back({i, 0});
        out.targets.push_back(-1);
        out.loss_mask.push_back(0);
    }

    // Part B: spans in shuffled order.
    std::vector<size_t> order(ordered.size());
    for (size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    Rng rng(seed);
    for (size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[static_cast<size_t>(rng.below(i))]);
    }
    for (const size_t si : order) {
        const Span &s = ordered[si];
        const int64_t anchor = mask_pos_in_a[si];
        out.input_ids.push_back(cfg.specials.sop);
        out.positions.push_back({anchor, 1});
        out.targets.push_back(tokens[static_cast<size_t>(s.start)]);
        out.loss_mask.push_back(1);
        for (int64_t j = 0; j < s.len; ++j) {
            out.input_ids.push_back(tokens[static_cast<size_t>(s.start + j)]);
            out.positions.push_back({anchor, j + 2});
            const bool last = j + 1 == s.len;
            out.targets.push_back(last ? cfg.specials.eop
                                       : tokens[static_cast<size_t>(s.start + j + 1)]);
            out.loss_mask.push_back(1);
        }
    }
    out.mask = MaskSpec::prefix(out.part_a_len);
    return out;
}

// Span sampling for corpus training: lengths are geometric with mean 3,
// placements uniform, corruption budget ~15% of the sequence.
inline std::vector<Span> sample_spans(int64_t seq_len, Rng &rng, double mean_len = 3.0,
                                      double corrupt_ratio = 0.15) {
    INFILL_CHECK_ARG(seq_len >= 2, "sample_spans: sequence too short");
    const double p = 1.0 / mean_len;
    const int64_t budget =
        std::max<int64_t>(1, static_cast<int64_t>(std::llround(corrupt_ratio *
                                                               static_cast<double>(seq_len))));
    std::vector<uint8_t> taken(static_cast<size_t>(seq_len), 0);
    std::vector<Span> spans;
    int64_t used = 0;
    int misses = 0;
    while (used < budget && misses < 32) {
        int64_t len = 1 + static_cast<int64_t>(std::log(1.0 - rng.next_double()) /
                                               std::log(1.0 - p));
        len = std::min(len, budget - used);
        len = std::min(len, seq_len - 1);
        const int64_t start = static_cast<int64_t>(rng.below(static_cast<uint64_t>(
            seq_len - len + 1)));
        bool free = true;
        for (int64_t i = start; i < start + len && free; ++i) {
            free = taken[static_cast<size_t>(i)] == 0;
        }
        if (!free) {
            ++misses;
            continue;
        }
        for (int64_t i = start; i < start + len; ++i) {
            taken[static_cast<size_t>(i)] = 1;
        }
        spans.push_back({start, len});
        used += len;
    }
    std::sort(spans.begin(), spans.end(),
              [](const Span &a, const Span &b) { return a.start < b.start; });
    return spans;
}

// ----------------------------- loss -----------------------------

// Mean token cross-entropy over the loss-masked positions.
template <typename T>
T loss(const Tensor<T> &logits, const BlankInfillSample &sample) {
    const int64_t seq = logits.shape[0], vocab = logits.shape[1];
    INFILL_CHECK_ARG(seq == static_cast<int64_t>(sample.input_ids.size()),
                     "loss: logits rows ", seq, " vs sample length ",
                     sample.input_ids.size());
    int64_t count = 0;
    double total = 0.0;
    for (int64_t i = 0; i < seq; ++i) {
        if (sample.loss_mask[static_cast<size_t>(i)] == 0) {
            continue;
        }
        const int32_t target = sample.targets[static_cast<size_t>(i)];
        INFILL_CHECK_ARG(target >= 0 && target < vocab, "loss: bad target ", target);
        const T *row = logits.row(i);
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < vocab; ++j) {
            mx = std::max(mx, static_cast<double>(row[j]));
        }
        double lse = 0.0;
        for (int64_t j = 0; j < vocab; ++j) {
            lse += std::exp(static_cast<double>(row[j]) - mx);
        }
        total += mx + std::log(lse) - static_cast<double>(row[target]);
        ++count;
    }
    INFILL_CHECK_ARG(count > 0, "loss: empty loss mask (no Part-B positions)");
    return static_cast<T>(total / static_cast<double>(count));
}

// dL/dlogits for the mean cross-entropy above, scaled by `weight` (used to
// average over a batch).
template <typename T>
Tensor<T> loss_backward(const Tensor<T> &logits, const BlankInfillSample &sample,
                        double weight = 1.0) {
    const int64_t seq = logits.shape[0], vocab = logits.shape[1];
    int64_t count = 0;
    for (const uint8_t m : sample.loss_mask) {
        count += m != 0;
    }
    INFILL_CHECK_ARG(count > 0, "loss: empty loss mask (no Part-B positions)");
    const double inv = weight / static_cast<double>(count);
    Tensor<T> dlogits({seq, vocab});
    for (int64_t i = 0; i < seq; ++i) {
        if (sample.loss_mask[static_cast<size_t>(i)] == 0) {
            continue;
        }
        const T *row = logits.row(i);
        T *drow = dlogits.row(i);
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < vocab; ++j) {
            mx = std::max(mx, static_cast<double>(row[j]));
        }
        double denom = 0.0;
        for (int64_t j = 0; j < vocab; ++j) {
            denom += std::exp(static_cast<double>(row[j]) - mx);
        }
        for (int64_t j = 0; j < vocab; ++j) {
            const double p = std::exp(static_cast<double>(row[j]) - mx) / denom;
            drow[j] = static_cast<T>(p * inv);
        }
        drow[sample.targets[static_cast<size_t>(i)]] -= static_cast<T>(inv);
    }
    return dlogits;
}

// ----------------------------- backward -----------------------------

// Reverse-mode gradients through the whole stack; accumulates into `grads`
// (a zeros_like-shaped ModelParams).
template <typename T>
void backward(const ModelConfig &cfg, const ModelParams<T> &params,
              std::span<const int32_t> input_ids,
              std::span<const Position2D> positions, const MaskSpec &mask,
              const ForwardTrace<T> &trace, const Tensor<T> &dlogits,
              ModelParams<T> &grads) {
    (void)mask;
    const HeadLayout layout = cfg.layout();
    Tensor<T> dx_final;
    if (cfg.tied_embeddings) {
        dx_final = matmul(dlogits, params.embedding);
        add_inplace(grads.embedding, matmul_tn(dlogits, trace.x_final));
    } else {
        dx_final = matmul_nt(dlogits, params.lm_head);
        add_inplace(grads.lm_head, matmul_tn(trace.x_final, dlogits));
    }
    Tensor<T> dx = rms_norm_backward(trace.x_last, params.final_norm, dx_final,
                                     grads.final_norm.gamma);

    for (int64_t l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerParams<T> &lp = params.layers[static_cast<size_t>(l)];
        LayerParams<T> &gp = grads.layers[static_cast<size_t>(l)];
        const LayerTrace<T> &lt = trace.layers[static_cast<size_t>(l)];

        // FFN residual: x = x_mid + ffn(norm(x_mid))
        Tensor<T> dxn2 = swiglu_ffn_backward(lt.x_norm2, lp.ffn, dx, gp.ffn.w_gate,
                                             gp.ffn.w_up, gp.ffn.w_down);
        Tensor<T> dx_mid = rms_norm_backward(lt.x_mid, lp.ffn_norm, dxn2,
                                             gp.ffn_norm.gamma);
        add_inplace(dx_mid, dx);

        // Attention residual: x_mid = x_in + wo(attn)
        Tensor<T> d_merged =
            linear_backward(lt.attn_merged, lp.wo, dx_mid, gp.wo.weight, gp.wo.bias);
        Tensor<T> d_attn = split_heads(d_merged, cfg.n_heads, cfg.head_dim);
        Tensor<T> dq_rot, dk_rot, dv;
        attention_backward(lt.q_rot, lt.k_rot, lt.v, lt.probs, layout, d_attn, dq_rot,
                           dk_rot, dv);
        Tensor<T> dq = merge_heads(detail::rope_heads(dq_rot, positions, cfg.rope, true));
        Tensor<T> dk = merge_heads(detail::rope_heads(dk_rot, positions, cfg.rope, true));
        Tensor<T> dv_flat = merge_heads(dv);
        Tensor<T> dxn1 = linear_backward(lt.x_norm1, lp.wq, dq, gp.wq.weight, gp.wq.bias);
        add_inplace(dxn1, linear_backward(lt.x_norm1, lp.wk, dk, gp.wk.weight, gp.wk.bias));
        add_inplace(dxn1, linear_backward(lt.x_norm1, lp.wv, dv_flat, gp.wv.weight,
                                          gp.wv.bias));
        dx = rms_norm_backward(lt.x_in, lp.attn_norm, dxn1, gp.attn_norm.gamma);
        add_inplace(dx, dx_mid);
    }

    // Embedding lookup: scatter-add.
    for (int64_t i = 0; i < static_cast<int64_t>(input_ids.size()); ++i) {
        const int32_t id = input_ids[static_cast<size_t>(i)];
        for (int64_t j = 0; j < cfg.hidden; ++j) {
            grads.embedding(id, j) += dx(i, j);
        }
    }
}

// Convenience wrapper: forward, loss, backward for one sample with the
// gradient scaled by `weight`.
template <typename T>
T loss_and_grads(const ModelConfig &cfg, const ModelParams<T> &params,
                 const BlankInfillSample &sample, ModelParams<T> &grads,
                 double weight = 1.0) {
    ForwardTrace<T> trace;
    forward<T>(cfg, params, sample.input_ids, sample.positions, sample.mask, &trace);
    const T value = loss(trace.logits, sample);
    Tensor<T> dlogits = loss_backward(trace.logits, sample, weight);
    backward(cfg, params, sample.input_ids, sample.positions, sample.mask, trace,
             dlogits, grads);
    return value;
}

} // namespace infill
