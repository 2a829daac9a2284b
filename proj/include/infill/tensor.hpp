// Dense row-major tensor and the deterministic numeric kernel built on it.
//
// Scalar type is a template parameter: float is the model's storage type,
// double instantiations back the verification oracles. Reductions accumulate
// in double with a fixed left-to-right order, so results are bit-reproducible
// on a given platform regardless of optimization level or thread count.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "infill/common.hpp"
#include "infill/rng.hpp"

namespace infill {

inline std::string shape_str(const std::vector<int64_t> &shape) {
    if (shape.empty()) {
        return "scalar";
    }
    std::string s;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) {
            s += 'x';
        }
        s += std::to_string(shape[i]);
    }
    return s;
}

template <typename T>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(std::vector<int64_t> dims) : shape(std::move(dims)) {
        data.assign(static_cast<size_t>(checked_numel_(shape)), T(0));
    }

    Tensor(std::vector<int64_t> dims, std::vector<T> values)
        : shape(std::move(dims)), data(std::move(values)) {
        INFILL_CHECK_ARG(checked_numel_(shape) == static_cast<int64_t>(data.size()),
                         "tensor: shape ", shape_str(shape), " expects ",
                         checked_numel_(shape), " values, got ", data.size());
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    int64_t dim(int i) const {
        INFILL_CHECK_ARG(i >= 0 && i < rank(), "tensor: dim index ", i,
                         " out of range for shape ", shape_str(shape));
        return shape[static_cast<size_t>(i)];
    }

    T &operator()(int64_t i, int64_t j) {
        return data[static_cast<size_t>(i * shape[1] + j)];
    }
    const T &operator()(int64_t i, int64_t j) const {
        return data[static_cast<size_t>(i * shape[1] + j)];
    }
    T &operator()(int64_t h, int64_t i, int64_t j) {
        return data[static_cast<size_t>((h * shape[1] + i) * shape[2] + j)];
    }
    const T &operator()(int64_t h, int64_t i, int64_t j) const {
        return data[static_cast<size_t>((h * shape[1] + i) * shape[2] + j)];
    }

    T *row(int64_t i) { return data.data() + i * shape[rank() - 1]; }
    const T *row(int64_t i) const { return data.data() + i * shape[rank() - 1]; }

    bool all_finite() const {
        for (const T v : data) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    static Tensor zeros(std::vector<int64_t> dims) { return Tensor(std::move(dims)); }

    static Tensor full(std::vector<int64_t> dims, T value) {
        Tensor t(std::move(dims));
        for (auto &v : t.data) {
            v = value;
        }
        return t;
    }

    static Tensor identity(int64_t n) {
        Tensor t({n, n});
        for (int64_t i = 0; i < n; ++i) {
            t(i, i) = T(1);
        }
        return t;
    }

    static Tensor randn(std::vector<int64_t> dims, Rng &rng, double stddev = 1.0) {
        Tensor t(std::move(dims));
        for (auto &v : t.data) {
            v = static_cast<T>(rng.normal(0.0, stddev));
        }
        return t;
    }

    static Tensor uniform(std::vector<int64_t> dims, Rng &rng, double lo, double hi) {
        Tensor t(std::move(dims));
        for (auto &v : t.data) {
            v = static_cast<T>(rng.uniform(lo, hi));
        }
        return t;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) {
            out.data[i] = static_cast<U>(data[i]);
        }
        return out;
    }

  private:
    static int64_t checked_numel_(const std::vector<int64_t> &dims) {
        int64_t n = 1;
        for (const int64_t d : dims) {
            INFILL_CHECK_ARG(d > 0, "tensor: non-positive dimension in shape ",
                             shape_str(dims));
            n *= d;
        }
        return n;
    }
};

// ----------------------------- matmul -----------------------------

// C[m,n] = A[m,k] * B[k,n]; inner sum runs left to right over k.
template <typename T>
Tensor<T> matmul(const Tensor<T> &a, const Tensor<T> &b) {
    INFILL_CHECK_ARG(a.rank() == 2 && b.rank() == 2 && a.shape[1] == b.shape[0],
                     "matmul: inner dimensions disagree (", shape_str(a.shape),
                     " vs ", shape_str(b.shape), ")");
    const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor<T> c({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const T *arow = a.row(i);
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p) {
                acc += static_cast<double>(arow[p]) * static_cast<double>(b(p, j));
            }
            c(i, j) = static_cast<T>(acc);
        }
    }
    return c;
}

// C[m,n] = A[m,k] * B[n,k]^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T> &a, const Tensor<T> &b) {
    INFILL_CHECK_ARG(a.rank() == 2 && b.rank() == 2 && a.shape[1] == b.shape[1],
                     "matmul_nt: inner dimensions disagree (", shape_str(a.shape),
                     " vs ", shape_str(b.shape), "^T)");
    const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
    Tensor<T> c({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const T *arow = a.row(i);
        for (int64_t j = 0; j < n; ++j) {
            const T *brow = b.row(j);
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p) {
                acc += static_cast<double>(arow[p]) * static_cast<double>(brow[p]);
            }
            c(i, j) = static_cast<T>(acc);
        }
    }
    return c;
}

// C[m,n] = A[k,m]^T * B[k,n]
template <typename T>
Tensor<T> matmul_tn(const Tensor<T> &a, const Tensor<T> &b) {
    INFILL_CHECK_ARG(a.rank() == 2 && b.rank() == 2 && a.shape[0] == b.shape[0],
                     "matmul_tn: inner dimensions disagree (", shape_str(a.shape),
                     "^T vs ", shape_str(b.shape), ")");
    const int64_t k = a.shape[0], m = a.shape[1], n = b.shape[1];
    Tensor<T> c({m, n});
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p) {
                acc += static_cast<double>(a(p, i)) * static_cast<double>(b(p, j));
            }
            c(i, j) = static_cast<T>(acc);
        }
    }
    return c;
}

// ----------------------------- softmax -----------------------------

// Row softmax with per-row max subtraction. Entries equal to -inf are
// treated as masked: skipped in the max and the sum, and produce 0 in the
// output (never fed through arithmetic). A row with every entry masked has
// no defined distribution and is rejected.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T> &x) {
    INFILL_CHECK_ARG(x.rank() == 2, "softmax_rows: expected 2D input, got shape ",
                     shape_str(x.shape));
    const int64_t rows = x.shape[0], cols = x.shape[1];
    const T neg_inf = -std::numeric_limits<T>::infinity();
    Tensor<T> out({rows, cols});
    for (int64_t i = 0; i < rows; ++i) {
        const T *in = x.row(i);
        T *o = out.row(i);
        double max_val = -std::numeric_limits<double>::infinity();
        bool any_visible = false;
        for (int64_t j = 0; j < cols; ++j) {
            if (in[j] == neg_inf) {
                continue;
            }
            any_visible = true;
            if (static_cast<double>(in[j]) > max_val) {
                max_val = static_cast<double>(in[j]);
            }
        }
        INFILL_CHECK_ARG(any_visible, "softmax_rows: fully masked row ", i);
        double denom = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
            if (in[j] == neg_inf) {
                o[j] = T(0);
            } else {
                const double e = std::exp(static_cast<double>(in[j]) - max_val);
                o[j] = static_cast<T>(e);
                denom += e;
            }
        }
        const double inv = 1.0 / denom;
        for (int64_t j = 0; j < cols; ++j) {
            if (in[j] != neg_inf) {
                o[j] = static_cast<T>(static_cast<double>(o[j]) * inv);
            }
        }
    }
    return out;
}

// ----------------------------- elementwise -----------------------------

namespace detail {
template <typename T>
void check_same_shape(const Tensor<T> &a, const Tensor<T> &b, const char *op) {
    INFILL_CHECK_ARG(a.shape == b.shape, op, ": shape mismatch (",
                     shape_str(a.shape), " vs ", shape_str(b.shape), ")");
}
} // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T> &a, const Tensor<T> &b) {
    detail::check_same_shape(a, b, "add");
    Tensor<T> c = a;
    for (size_t i = 0; i < c.data.size(); ++i) {
        c.data[i] += b.data[i];
    }
    return c;
}

template <typename T>
Tensor<T> sub(const Tensor<T> &a, const Tensor<T> &b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<T> c = a;
    for (size_t i = 0; i < c.data.size(); ++i) {
        c.data[i] -= b.data[i];
    }
    return c;
}

template <typename T>
Tensor<T> hadamard(const Tensor<T> &a, const Tensor<T> &b) {
    detail::check_same_shape(a, b, "hadamard");
    Tensor<T> c = a;
    for (size_t i = 0; i < c.data.size(); ++i) {
        c.data[i] *= b.data[i];
    }
    return c;
}

template <typename T>
Tensor<T> scale(const Tensor<T> &a, T s) {
    Tensor<T> c = a;
    for (auto &v : c.data) {
        v *= s;
    }
    return c;
}

template <typename T>
void add_inplace(Tensor<T> &a, const Tensor<T> &b) {
    detail::check_same_shape(a, b, "add_inplace");
    for (size_t i = 0; i < a.data.size(); ++i) {
        a.data[i] += b.data[i];
    }
}

template <typename T>
double max_abs_diff(const Tensor<T> &a, const Tensor<T> &b) {
    detail::check_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double d = std::fabs(static_cast<double>(a.data[i]) -
                                   static_cast<double>(b.data[i]));
        if (d > m) {
            m = d;
        }
    }
    return m;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

} // namespace infill
