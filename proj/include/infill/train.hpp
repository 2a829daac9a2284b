// Toy training loop: exact reverse-mode gradients plus plain SGD or Adam
// with the published defaults (beta1 0.9, beta2 0.999, eps 1e-8).

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "infill/model.hpp"

namespace infill {

enum class OptKind { sgd, adam };

struct OptimizerConfig {
    OptKind kind = OptKind::adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct OptimizerState {
    std::vector<Tensor<T>> m; // first moments, named_tensors order
    std::vector<Tensor<T>> v; // second moments
    int64_t step = 0;

    static OptimizerState init(const ModelConfig &cfg) {
        OptimizerState s;
        ModelParams<T> shape = ModelParams<T>::zeros_like(cfg);
        for (auto &[name, tensor] : shape.named_tensors()) {
            (void)name;
            s.m.push_back(*tensor);
            s.v.push_back(*tensor);
        }
        return s;
    }
};

// One optimizer step over a batch of samples; the batch loss is the mean of
// the per-sample losses. A non-finite loss aborts before any parameter is
// touched.
template <typename T>
T train_step(const ModelConfig &cfg, ModelParams<T> &params,
             std::span<const BlankInfillSample> batch, const OptimizerConfig &opt,
             OptimizerState<T> &state, T lr) {
    INFILL_CHECK_ARG(!batch.empty(), "train_step: empty batch");
    ModelParams<T> grads = ModelParams<T>::zeros_like(cfg);
    const double weight = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    for (const BlankInfillSample &sample : batch) {
        total += static_cast<double>(loss_and_grads(cfg, params, sample, grads, weight)) *
                 weight;
    }
    if (!std::isfinite(total)) {
        throw DataError(format_msg("train_step: non-finite loss ", total, " at step ",
                                   state.step, "; parameters left untouched"));
    }

    auto named = params.named_tensors();
    auto gnamed = grads.named_tensors();
    state.step += 1;
    for (size_t t = 0; t < named.size(); ++t) {
        Tensor<T> &p = *named[t].second;
        const Tensor<T> &g = *gnamed[t].second;
        if (opt.kind == OptKind::sgd) {
            for (size_t i = 0; i < p.data.size(); ++i) {
                p.data[i] -= lr * g.data[i];
            }
            continue;
        }
        Tensor<T> &m = state.m[t];
        Tensor<T> &v = state.v[t];
        const double b1 = opt.beta1, b2 = opt.beta2;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
        for (size_t i = 0; i < p.data.size(); ++i) {
            const double gi = static_cast<double>(g.data[i]);
            const double mi = b1 * static_cast<double>(m.data[i]) + (1.0 - b1) * gi;
            const double vi = b2 * static_cast<double>(v.data[i]) + (1.0 - b2) * gi * gi;
            m.data[i] = static_cast<T>(mi);
            v.data[i] = static_cast<T>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            p.data[i] -= static_cast<T>(static_cast<double>(lr) * mhat /
                                        (std::sqrt(vhat) + opt.eps));
        }
    }
    return static_cast<T>(total);
}

} // namespace infill
