// Transformer sub-layers: RMSNorm, SwiGLU feed-forward, and linear
// projections. Only the attention Q/K/V projections may carry a bias; the
// constraint is enforced when a layer is constructed, not by convention.
//
// Each forward has a matching *_backward that consumes the saved inputs and
// the upstream gradient; accumulation order is fixed so gradients are
// bit-reproducible.

#pragma once

#include <cmath>
#include <cstdint>

#include "infill/tensor.hpp"

namespace infill {

// d_ffn sizing: 10/3 of the hidden size, rounded up to a multiple of
// `granule` (default 32) for alignment-friendly widths.
inline int64_t ffn_size(int64_t hidden, int64_t granule = 32) {
    INFILL_CHECK_ARG(hidden >= 1, "ffn_size: hidden must be positive, got ", hidden);
    INFILL_CHECK_ARG(granule >= 1, "ffn_size: granule must be positive, got ", granule);
    const int64_t raw = (hidden * 10 + 2) / 3; // ceil(10h/3)
    return (raw + granule - 1) / granule * granule;
}

enum class LinearRole { qkv, general };

template <typename T>
struct LinearLayer {
    Tensor<T> weight; // [in x out]
    Tensor<T> bias;   // [out], empty unless has_bias
    bool has_bias = false;

    LinearLayer() = default;

    LinearLayer(Tensor<T> w, LinearRole) : weight(std::move(w)) {
        INFILL_CHECK_ARG(weight.rank() == 2, "linear: weight must be 2D, got ",
                         shape_str(weight.shape));
    }

    LinearLayer(Tensor<T> w, Tensor<T> b, LinearRole role)
        : weight(std::move(w)), bias(std::move(b)), has_bias(true) {
        INFILL_CHECK_ARG(weight.rank() == 2, "linear: weight must be 2D, got ",
                         shape_str(weight.shape));
        if (role != LinearRole::qkv) {
            throw PolicyError("linear: bias is only permitted on Q/K/V projections");
        }
        INFILL_CHECK_ARG(bias.rank() == 1 && bias.shape[0] == weight.shape[1],
                         "linear: bias shape ", shape_str(bias.shape),
                         " does not match weight ", shape_str(weight.shape));
    }

    int64_t in_dim() const { return weight.shape[0]; }
    int64_t out_dim() const { return weight.shape[1]; }
};

template <typename T>
Tensor<T> linear(const Tensor<T> &x, const LinearLayer<T> &layer) {
    Tensor<T> y = matmul(x, layer.weight);
    if (layer.has_bias) {
        const int64_t rows = y.shape[0], cols = y.shape[1];
        for (int64_t i = 0; i < rows; ++i) {
            T *yrow = y.row(i);
            for (int64_t j = 0; j < cols; ++j) {
                yrow[j] += layer.bias.data[static_cast<size_t>(j)];
            }
        }
    }
    return y;
}

// Returns dx; accumulates into dweight (and dbias when the layer has one).
template <typename T>
Tensor<T> linear_backward(const Tensor<T> &x, const LinearLayer<T> &layer,
                          const Tensor<T> &dy, Tensor<T> &dweight, Tensor<T> &dbias) {
    add_inplace(dweight, matmul_tn(x, dy));
    if (layer.has_bias) {
        const int64_t rows = dy.shape[0], cols = dy.shape[1];
        for (int64_t j = 0; j < cols; ++j) {
            double acc = 0.0;
            for (int64_t i = 0; i < rows; ++i) {
                acc += static_cast<double>(dy(i, j));
            }
            dbias.data[static_cast<size_t>(j)] += static_cast<T>(acc);
        }
    }
    return matmul_nt(dy, layer.weight);
}

// ----------------------------- RMSNorm -----------------------------

template <typename T>
struct RMSNormLayer {
    Tensor<T> gamma; // [d]
    T eps = T(1e-5);

    RMSNormLayer() = default;

    explicit RMSNormLayer(Tensor<T> g, T eps_ = T(1e-5)) : gamma(std::move(g)), eps(eps_) {
        INFILL_CHECK_ARG(gamma.rank() == 1, "rms_norm: gamma must be 1D, got ",
                         shape_str(gamma.shape));
        INFILL_CHECK_ARG(eps >= T(0), "rms_norm: eps must be non-negative");
    }

    static RMSNormLayer ones(int64_t d, T eps_ = T(1e-5)) {
        return RMSNormLayer(Tensor<T>::full({d}, T(1)), eps_);
    }
};

// y_i = x_i / sqrt(mean(x^2) + eps) * gamma_i, per trailing-d slice.
template <typename T>
Tensor<T> rms_norm(const Tensor<T> &x, const RMSNormLayer<T> &layer) {
    const int64_t d = layer.gamma.shape[0];
    INFILL_CHECK_ARG(x.rank() >= 1 && x.shape[x.rank() - 1] == d,
                     "rms_norm: trailing dimension of ", shape_str(x.shape),
                     " does not match gamma size ", d);
    const int64_t rows = x.numel() / d;
    Tensor<T> y;
    y.shape = x.shape;
    y.data.resize(x.data.size());
    for (int64_t r = 0; r < rows; ++r) {
        const T *in = x.data.data() + r * d;
        T *out = y.data.data() + r * d;
        double sq = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            sq += static_cast<double>(in[j]) * static_cast<double>(in[j]);
        }
        const double inv = 1.0 / std::sqrt(sq / static_cast<double>(d) +
                                           static_cast<double>(layer.eps));
        for (int64_t j = 0; j < d; ++j) {
            out[j] = static_cast<T>(static_cast<double>(in[j]) * inv *
                                    static_cast<double>(layer.gamma.data[static_cast<size_t>(j)]));
        }
    }
    return y;
}

// Returns dx; accumulates into dgamma.
template <typename T>
Tensor<T> rms_norm_backward(const Tensor<T> &x, const RMSNormLayer<T> &layer,
                            const Tensor<T> &dy, Tensor<T> &dgamma) {
    const int64_t d = layer.gamma.shape[0];
    const int64_t rows = x.numel() / d;
    Tensor<T> dx;
    dx.shape = x.shape;
    dx.data.resize(x.data.size());
    for (int64_t r = 0; r < rows; ++r) {
        const T *in = x.data.data() + r * d;
        const T *dout = dy.data.data() + r * d;
        T *din = dx.data.data() + r * d;
        double sq = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            sq += static_cast<double>(in[j]) * static_cast<double>(in[j]);
        }
        const double inv = 1.0 / std::sqrt(sq / static_cast<double>(d) +
                                           static_cast<double>(layer.eps));
        // s = sum_j dy_j * gamma_j * x_j
        double s = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            s += static_cast<double>(dout[j]) *
                 static_cast<double>(layer.gamma.data[static_cast<size_t>(j)]) *
                 static_cast<double>(in[j]);
        }
        const double k = s * inv * inv * inv / static_cast<double>(d);
        for (int64_t j = 0; j < d; ++j) {
            const double g = static_cast<double>(dout[j]) *
                             static_cast<double>(layer.gamma.data[static_cast<size_t>(j)]);
            din[j] = static_cast<T>(g * inv - k * static_cast<double>(in[j]));
            dgamma.data[static_cast<size_t>(j)] +=
                static_cast<T>(static_cast<double>(dout[j]) *
                               static_cast<double>(in[j]) * inv);
        }
    }
    return dx;
}

// ----------------------------- SwiGLU FFN -----------------------------

inline double silu_scalar(double z) {
    return z / (1.0 + std::exp(-z));
}

inline double silu_grad_scalar(double z) {
    const double s = 1.0 / (1.0 + std::exp(-z));
    return s * (1.0 + z * (1.0 - s));
}

template <typename T>
struct SwiGLUFFN {
    Tensor<T> w_gate; // [d x d_ffn]
    Tensor<T> w_up;   // [d x d_ffn]
    Tensor<T> w_down; // [d_ffn x d]

    SwiGLUFFN() = default;

    SwiGLUFFN(Tensor<T> gate, Tensor<T> up, Tensor<T> down, int64_t granule = 32)
        : w_gate(std::move(gate)), w_up(std::move(up)), w_down(std::move(down)) {
        INFILL_CHECK_ARG(w_gate.rank() == 2 && w_up.rank() == 2 && w_down.rank() == 2,
                         "swiglu: weights must be 2D");
        const int64_t d = w_gate.shape[0];
        const int64_t dff = w_gate.shape[1];
        INFILL_CHECK_ARG(w_up.shape[0] == d && w_up.shape[1] == dff &&
                             w_down.shape[0] == dff && w_down.shape[1] == d,
                         "swiglu: inconsistent weight shapes ", shape_str(w_gate.shape),
                         ", ", shape_str(w_up.shape), ", ", shape_str(w_down.shape));
        INFILL_CHECK_ARG(dff == ffn_size(d, granule), "swiglu: d_ffn ", dff,
                         " violates sizing rule ffn_size(", d, ") = ", ffn_size(d, granule));
    }

    int64_t hidden() const { return w_gate.shape[0]; }
    int64_t d_ffn() const { return w_gate.shape[1]; }
};

// y = (silu(x * w_gate) .* (x * w_up)) * w_down
template <typename T>
Tensor<T> swiglu_ffn(const Tensor<T> &x, const SwiGLUFFN<T> &ffn) {
    INFILL_CHECK_ARG(x.rank() == 2 && x.shape[1] == ffn.hidden(),
                     "swiglu: input shape ", shape_str(x.shape),
                     " does not match hidden size ", ffn.hidden());
    const LinearLayer<T> gate(ffn.w_gate, LinearRole::general);
    const LinearLayer<T> up(ffn.w_up, LinearRole::general);
    const LinearLayer<T> down(ffn.w_down, LinearRole::general);
    Tensor<T> g = linear(x, gate);
    Tensor<T> u = linear(x, up);
    Tensor<T> h = u;
    for (size_t i = 0; i < h.data.size(); ++i) {
        h.data[i] = static_cast<T>(silu_scalar(static_cast<double>(g.data[i])) *
                                   static_cast<double>(u.data[i]));
    }
    return linear(h, down);
}

// Backward through the full FFN; accumulates into the three weight grads.
template <typename T>
Tensor<T> swiglu_ffn_backward(const Tensor<T> &x, const SwiGLUFFN<T> &ffn,
                              const Tensor<T> &dy, Tensor<T> &dw_gate,
                              Tensor<T> &dw_up, Tensor<T> &dw_down) {
    Tensor<T> g = matmul(x, ffn.w_gate);
    Tensor<T> u = matmul(x, ffn.w_up);
    Tensor<T> h = u;
    for (size_t i = 0; i < h.data.size(); ++i) {
        h.data[i] = static_cast<T>(silu_scalar(static_cast<double>(g.data[i])) *
                                   static_cast<double>(u.data[i]));
    }
    // y = h * w_down
    add_inplace(dw_down, matmul_tn(h, dy));
    Tensor<T> dh = matmul_nt(dy, ffn.w_down);
    Tensor<T> dg = dh;
    Tensor<T> du = dh;
    for (size_t i = 0; i < dh.data.size(); ++i) {
        const double gz = static_cast<double>(g.data[i]);
        const double dhv = static_cast<double>(dh.data[i]);
        du.data[i] = static_cast<T>(dhv * silu_scalar(gz));
        dg.data[i] = static_cast<T>(dhv * static_cast<double>(u.data[i]) *
                                    silu_grad_scalar(gz));
    }
    add_inplace(dw_gate, matmul_tn(x, dg));
    add_inplace(dw_up, matmul_tn(x, du));
    Tensor<T> dx = matmul_nt(dg, ffn.w_gate);
    add_inplace(dx, matmul_nt(du, ffn.w_up));
    return dx;
}

} // namespace infill
