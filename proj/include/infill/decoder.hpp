// Incremental decoding with a per-layer KV cache, plus greedy/temperature
// sampling.
//
// Keys are stored post-rotation, so cached entries are position-final and
// the cache stays append-only. The decode regime defaults to a causal mask;
// a prefix regime (bidirectional prompt) can be selected per cache.

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "infill/model.hpp"

namespace infill {

template <typename T>
struct KVCache {
    int64_t capacity = 0;
    int64_t len = 0;
    MaskSpec regime = MaskSpec::causal();
    std::vector<Tensor<T>> cached_k; // per layer [g x capacity x d]
    std::vector<Tensor<T>> cached_v;

    KVCache(const ModelConfig &cfg, int64_t capacity_, MaskSpec regime_ = MaskSpec::causal())
        : capacity(capacity_), regime(std::move(regime_)) {
        INFILL_CHECK_ARG(capacity >= 1, "kv cache: capacity must be positive");
        INFILL_CHECK_ARG(regime.kind == MaskSpec::Kind::causal ||
                             regime.kind == MaskSpec::Kind::prefix,
                         "kv cache: decode regime must be causal or prefix");
        for (int64_t l = 0; l < cfg.n_layers; ++l) {
            cached_k.emplace_back(
                std::vector<int64_t>{cfg.n_kv_groups, capacity, cfg.head_dim});
            cached_v.emplace_back(
                std::vector<int64_t>{cfg.n_kv_groups, capacity, cfg.head_dim});
        }
    }

    int64_t element_count() const {
        int64_t n = 0;
        for (const auto &t : cached_k) {
            n += t.numel();
        }
        for (const auto &t : cached_v) {
            n += t.numel();
        }
        return n;
    }
};

namespace detail {

// Run a block of new tokens through the stack, appending their keys/values
// to the cache and attending over the full history.
template <typename T>
Tensor<T> cache_extend(const ModelConfig &cfg, const ModelParams<T> &params,
                       std::span<const int32_t> tokens, KVCache<T> &cache) {
    const int64_t bs = static_cast<int64_t>(tokens.size());
    const int64_t old = cache.len;
    INFILL_CHECK_DATA(old + bs <= cache.capacity, "kv cache: capacity ", cache.capacity,
                      " exhausted (", old, " cached + ", bs, " new)");
    const HeadLayout layout = cfg.layout();

    std::vector<Position2D> positions;
    positions.reserve(static_cast<size_t>(bs));
    for (int64_t i = 0; i < bs; ++i) {
        positions.push_back({old + i, 0});
    }

    Tensor<T> x({bs, cfg.hidden});
    for (int64_t i = 0; i < bs; ++i) {
        const int32_t id = tokens[static_cast<size_t>(i)];
        INFILL_CHECK_ARG(id >= 0 && id < cfg.vocab_size, "decode: token id ", id,
                         " outside vocabulary of size ", cfg.vocab_size);
        for (int64_t j = 0; j < cfg.hidden; ++j) {
            x(i, j) = params.embedding(id, j);
        }
    }

    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const LayerParams<T> &lp = params.layers[static_cast<size_t>(l)];
        Tensor<T> xn = rms_norm(x, lp.attn_norm);
        Tensor<T> q = detail::rope_heads(
            split_heads(linear(xn, lp.wq), cfg.n_heads, cfg.head_dim), positions, cfg.rope);
        Tensor<T> k_new = detail::rope_heads(
            split_heads(linear(xn, lp.wk), cfg.n_kv_groups, cfg.head_dim), positions,
            cfg.rope);
        Tensor<T> v_new = split_heads(linear(xn, lp.wv), cfg.n_kv_groups, cfg.head_dim);

        Tensor<T> &ck = cache.cached_k[static_cast<size_t>(l)];
        Tensor<T> &cv = cache.cached_v[static_cast<size_t>(l)];
        for (int64_t g = 0; g < cfg.n_kv_groups; ++g) {
            for (int64_t i = 0; i < bs; ++i) {
                for (int64_t p = 0; p < cfg.head_dim; ++p) {
                    ck(g, old + i, p) = k_new(g, i, p);
                    cv(g, old + i, p) = v_new(g, i, p);
                }
            }
        }

        const int64_t s_k = old + bs;
        Tensor<T> k_view({cfg.n_kv_groups, s_k, cfg.head_dim});
        Tensor<T> v_view({cfg.n_kv_groups, s_k, cfg.head_dim});
        for (int64_t g = 0; g < cfg.n_kv_groups; ++g) {
            for (int64_t i = 0; i < s_k; ++i) {
                for (int64_t p = 0; p < cfg.head_dim; ++p) {
                    k_view(g, i, p) = ck(g, i, p);
                    v_view(g, i, p) = cv(g, i, p);
                }
            }
        }

        Tensor<T> attn = attention_naive(q, k_view, v_view, layout, cache.regime, old);
        add_inplace(x, linear(merge_heads(attn), lp.wo));
        Tensor<T> xn2 = rms_norm(x, lp.ffn_norm);
        add_inplace(x, swiglu_ffn(xn2, lp.ffn));
    }
    cache.len = old + bs;

    Tensor<T> x_final = rms_norm(x, params.final_norm);
    return output_logits(cfg, params, x_final);
}

} // namespace detail

// Process a whole prompt into an empty cache; returns the last position's
// logits as a [vocab] tensor.
template <typename T>
Tensor<T> prefill(const ModelConfig &cfg, const ModelParams<T> &params,
                  std::span<const int32_t> tokens, KVCache<T> &cache) {
    INFILL_CHECK_ARG(!tokens.empty(), "prefill: empty input");
    INFILL_CHECK_ARG(cache.len == 0, "prefill: cache already holds ", cache.len,
                     " positions");
    Tensor<T> logits = detail::cache_extend(cfg, params, tokens, cache);
    const int64_t vocab = logits.shape[1];
    Tensor<T> last({vocab});
    for (int64_t j = 0; j < vocab; ++j) {
        last.data[static_cast<size_t>(j)] = logits(logits.shape[0] - 1, j);
    }
    return last;
}

// Append a single token and return its logits.
template <typename T>
Tensor<T> decode_step(const ModelConfig &cfg, const ModelParams<T> &params,
                      int32_t token, KVCache<T> &cache) {
    INFILL_CHECK_DATA(cache.len < cache.capacity, "kv cache: capacity ", cache.capacity,
                      " exhausted");
    const int32_t block[1] = {token};
    Tensor<T> logits = detail::cache_extend(cfg, params, std::span<const int32_t>(block, 1),
                                            cache);
    const int64_t vocab = logits.shape[1];
    Tensor<T> row({vocab});
    for (int64_t j = 0; j < vocab; ++j) {
        row.data[static_cast<size_t>(j)] = logits(0, j);
    }
    return row;
}

// ----------------------------- sampling -----------------------------

struct SampleStrategy {
    enum class Kind { greedy, temperature };
    Kind kind = Kind::greedy;
    double t = 1.0;
    uint64_t seed = 0;

    static SampleStrategy greedy() { return SampleStrategy{}; }

    static SampleStrategy temperature(double t, uint64_t seed) {
        SampleStrategy s;
        s.kind = Kind::temperature;
        s.t = t;
        s.seed = seed;
        return s;
    }
};

// Greedy: argmax with lowest-id tie break. Temperature: categorical draw
// from softmax(logits / t) seeded by the strategy.
template <typename T>
int32_t sample(std::span<const T> logits, const SampleStrategy &strategy) {
    INFILL_CHECK_ARG(!logits.empty(), "sample: empty logits");
    for (const T v : logits) {
        INFILL_CHECK_ARG(std::isfinite(static_cast<double>(v)),
                         "sample: non-finite logit");
    }
    if (strategy.kind == SampleStrategy::Kind::greedy) {
        size_t best = 0;
        for (size_t i = 1; i < logits.size(); ++i) {
            if (static_cast<double>(logits[i]) > static_cast<double>(logits[best])) {
                best = i;
            }
        }
        return static_cast<int32_t>(best);
    }
    INFILL_CHECK_ARG(strategy.t > 0.0, "sample: temperature must be positive, got ",
                     strategy.t);
    double mx = -std::numeric_limits<double>::infinity();
    for (const T v : logits) {
        mx = std::max(mx, static_cast<double>(v) / strategy.t);
    }
    double denom = 0.0;
    std::vector<double> w(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
        w[i] = std::exp(static_cast<double>(logits[i]) / strategy.t - mx);
        denom += w[i];
    }
    Rng rng(strategy.seed);
    const double u = rng.next_double() * denom;
    double cum = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
        cum += w[i];
        if (u < cum) {
            return static_cast<int32_t>(i);
        }
    }
    return static_cast<int32_t>(w.size() - 1);
}

// Convenience loop for the CLI: prefill the prompt, then sample step by
// step. Stops early when EOP is produced. Temperature draws reseed per step
// from (seed, step) so the whole run is reproducible.
template <typename T>
std::vector<int32_t> generate(const ModelConfig &cfg, const ModelParams<T> &params,
                              std::span<const int32_t> prompt, int64_t max_new,
                              const SampleStrategy &strategy, int64_t capacity,
                              MaskSpec regime = MaskSpec::causal()) {
    KVCache<T> cache(cfg, capacity, std::move(regime));
    Tensor<T> logits = prefill(cfg, params, prompt, cache);
    std::vector<int32_t> out;
    for (int64_t step = 0; step < max_new; ++step) {
        SampleStrategy s = strategy;
        if (s.kind == SampleStrategy::Kind::temperature) {
            s.seed = mix64(strategy.seed, static_cast<uint64_t>(step));
        }
        const int32_t id = sample(std::span<const T>(logits.data), s);
        out.push_back(id);
        if (id == cfg.specials.eop || cache.len == cache.capacity) {
            break;
        }
        logits = decode_step(cfg, params, id, cache);
    }
    return out;
}

} // namespace infill
