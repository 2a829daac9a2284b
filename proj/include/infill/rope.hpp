// Rotary position embeddings: standard 1D form, the two-dimensional form
// used for blank infilling (first half of each head rotates by the position
// in the corrupted sequence, second half by the intra-span position), and
// linear position-interpolation scaling for context extension.
//
// Channel pairing is adjacent pairs (2i, 2i+1). Angles are computed in
// double; pair (2i, 2i+1) of a width-w rotation at position m turns by
// (m / scale) * base^(-2i / w).

#pragma once

#include <cmath>
#include <cstdint>
#include <span>

#include "infill/tensor.hpp"

namespace infill {

struct RopeConfig {
    int64_t head_dim = 0;
    double base = 10000.0;
    double scale = 1.0; // interpolation factor; 1 = no extension
};

struct Position2D {
    int64_t pos_a = 0; // position in the corrupted sequence
    int64_t pos_b = 0; // intra-span position; 0 for context tokens
};

namespace detail {

// Rotate adjacent pairs of a width-`width` channel block in place.
// `direction` is +1 for the forward rotation, -1 for the adjoint.
template <typename T>
void rotate_block(T *row, int64_t width, double position, const RopeConfig &cfg,
                  double direction) {
    const double m = position / cfg.scale;
    for (int64_t i = 0; i < width / 2; ++i) {
        const double freq = std::pow(cfg.base, -2.0 * static_cast<double>(i) /
                                                   static_cast<double>(width));
        const double angle = direction * m * freq;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double x0 = static_cast<double>(row[2 * i]);
        const double x1 = static_cast<double>(row[2 * i + 1]);
        row[2 * i] = static_cast<T>(x0 * c - x1 * s);
        row[2 * i + 1] = static_cast<T>(x0 * s + x1 * c);
    }
}

} // namespace detail

template <typename T>
Tensor<T> rope_rotate(const Tensor<T> &x, std::span<const int64_t> positions,
                      const RopeConfig &cfg) {
    INFILL_CHECK_ARG(cfg.head_dim > 0 && cfg.head_dim % 2 == 0,
                     "rope: head_dim must be even and positive, got ", cfg.head_dim);
    INFILL_CHECK_ARG(x.rank() == 2 && x.shape[1] == cfg.head_dim,
                     "rope: input shape ", shape_str(x.shape),
                     " does not match head_dim ", cfg.head_dim);
    INFILL_CHECK_ARG(static_cast<int64_t>(positions.size()) == x.shape[0],
                     "rope: ", positions.size(), " positions for ", x.shape[0], " rows");
    Tensor<T> y = x;
    for (int64_t r = 0; r < x.shape[0]; ++r) {
        INFILL_CHECK_ARG(positions[static_cast<size_t>(r)] >= 0,
                         "rope: negative position at row ", r);
        detail::rotate_block(y.row(r), cfg.head_dim,
                             static_cast<double>(positions[static_cast<size_t>(r)]),
                             cfg, 1.0);
    }
    return y;
}

template <typename T>
Tensor<T> rope_rotate_2d(const Tensor<T> &x, std::span<const Position2D> positions,
                         const RopeConfig &cfg) {
    INFILL_CHECK_ARG(cfg.head_dim > 0 && cfg.head_dim % 4 == 0,
                     "rope 2d: head_dim must be divisible by 4, got ", cfg.head_dim);
    INFILL_CHECK_ARG(x.rank() == 2 && x.shape[1] == cfg.head_dim,
                     "rope 2d: input shape ", shape_str(x.shape),
                     " does not match head_dim ", cfg.head_dim);
    INFILL_CHECK_ARG(static_cast<int64_t>(positions.size()) == x.shape[0],
                     "rope 2d: ", positions.size(), " positions for ", x.shape[0], " rows");
    const int64_t half = cfg.head_dim / 2;
    Tensor<T> y = x;
    for (int64_t r = 0; r < x.shape[0]; ++r) {
        const Position2D p = positions[static_cast<size_t>(r)];
        INFILL_CHECK_ARG(p.pos_a >= 0 && p.pos_b >= 0,
                         "rope 2d: negative position at row ", r);
        detail::rotate_block(y.row(r), half, static_cast<double>(p.pos_a), cfg, 1.0);
        detail::rotate_block(y.row(r) + half, half, static_cast<double>(p.pos_b), cfg, 1.0);
    }
    return y;
}

// Adjoint of rope_rotate_2d: rotations are orthogonal, so the gradient is
// the same rotation with negated angles.
template <typename T>
Tensor<T> rope_rotate_2d_backward(const Tensor<T> &dy, std::span<const Position2D> positions,
                                  const RopeConfig &cfg) {
    const int64_t half = cfg.head_dim / 2;
    Tensor<T> dx = dy;
    for (int64_t r = 0; r < dy.shape[0]; ++r) {
        const Position2D p = positions[static_cast<size_t>(r)];
        detail::rotate_block(dx.row(r), half, static_cast<double>(p.pos_a), cfg, -1.0);
        detail::rotate_block(dx.row(r) + half, half, static_cast<double>(p.pos_b), cfg, -1.0);
    }
    return dx;
}

// Linear position interpolation: extended positions are scaled down so the
// effective rotation position never exceeds the trained context.
inline RopeConfig interpolate_positions(const RopeConfig &cfg, int64_t trained_ctx,
                                        int64_t target_ctx) {
    INFILL_CHECK_ARG(trained_ctx >= 1, "interpolate: trained_ctx must be positive");
    INFILL_CHECK_ARG(target_ctx >= trained_ctx, "interpolate: target context ",
                     target_ctx, " below trained context ", trained_ctx);
    RopeConfig out = cfg;
    out.scale = static_cast<double>(target_ctx) / static_cast<double>(trained_ctx);
    return out;
}

} // namespace infill
