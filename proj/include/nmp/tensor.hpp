#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace nmp {

// Dense H x W x C grid with a per-cell coverage mask. Data is row-major with
// channels innermost, so one cell's channel vector is contiguous.
template <typename T>
struct Grid {
    int rows = 0;
    int cols = 0;
    int channels = 0;
    std::vector<T> data;
    std::vector<uint8_t> coverage;

    Grid() = default;
    Grid(int r, int c, int ch, T fill = T(0), bool covered = true)
        : rows(r), cols(c), channels(ch),
          data(static_cast<size_t>(r) * c * ch, fill),
          coverage(static_cast<size_t>(r) * c, covered ? 1 : 0) {}

    size_t cell_count() const { return static_cast<size_t>(rows) * cols; }
    size_t size() const { return data.size(); }

    T* cell(int r, int c) {
        return data.data() + (static_cast<size_t>(r) * cols + c) * channels;
    }
    const T* cell(int r, int c) const {
        return data.data() + (static_cast<size_t>(r) * cols + c) * channels;
    }

    T& at(int r, int c, int ch) { return cell(r, c)[ch]; }
    const T& at(int r, int c, int ch) const { return cell(r, c)[ch]; }

    bool covered_at(int r, int c) const {
        return coverage[static_cast<size_t>(r) * cols + c] != 0;
    }
    void set_covered(int r, int c, bool v) {
        coverage[static_cast<size_t>(r) * cols + c] = v ? 1 : 0;
    }

    bool same_shape(const Grid& o) const {
        return rows == o.rows && cols == o.cols && channels == o.channels;
    }
};

using FeatureMap = Grid<float>;

template <typename T>
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(int r, int c, T fill = T(0))
        : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

    T& at(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
    const T& at(int i, int j) const {
        return data[static_cast<size_t>(i) * cols + j];
    }
    T* row(int i) { return data.data() + static_cast<size_t>(i) * cols; }
    const T* row(int i) const {
        return data.data() + static_cast<size_t>(i) * cols;
    }
};

// Convolution weights, logical shape [out_ch, in_ch, k, k].
template <typename T>
struct ConvKernel {
    int out_ch = 0;
    int in_ch = 0;
    int k = 0;
    std::vector<T> data;

    ConvKernel() = default;
    ConvKernel(int co, int ci, int kk, T fill = T(0))
        : out_ch(co), in_ch(ci), k(kk),
          data(static_cast<size_t>(co) * ci * kk * kk, fill) {}

    T& at(int co, int ci, int u, int v) {
        return data[((static_cast<size_t>(co) * in_ch + ci) * k + u) * k + v];
    }
    const T& at(int co, int ci, int u, int v) const {
        return data[((static_cast<size_t>(co) * in_ch + ci) * k + u) * k + v];
    }
};

[[noreturn]] inline void throw_shape_error(const std::string& what) {
    throw std::invalid_argument("shape error: " + what);
}

// Same-size 2-D cross-correlation with zero padding (k-1)/2 and per-output-
// channel bias. The kernel is repacked to [co][u][v][ci] so the inner loop
// runs over contiguous channels of both operands.
template <typename T>
Grid<T> conv2d(const Grid<T>& in, const ConvKernel<T>& w,
               const std::vector<T>& bias) {
    if (w.in_ch != in.channels)
        throw_shape_error("conv2d: kernel in_ch " + std::to_string(w.in_ch) +
                          " != input channels " + std::to_string(in.channels));
    if (w.k % 2 == 0)
        throw_shape_error("conv2d: kernel size must be odd");
    if (static_cast<int>(bias.size()) != w.out_ch)
        throw_shape_error("conv2d: bias size != out_ch");

    const int R = in.rows, C = in.cols, Ci = in.channels;
    const int Co = w.out_ch, K = w.k, P = (K - 1) / 2;

    std::vector<T> packed(static_cast<size_t>(Co) * K * K * Ci);
    for (int co = 0; co < Co; ++co)
        for (int ci = 0; ci < Ci; ++ci)
            for (int u = 0; u < K; ++u)
                for (int v = 0; v < K; ++v)
                    packed[((static_cast<size_t>(co) * K + u) * K + v) * Ci + ci] =
                        w.at(co, ci, u, v);

    Grid<T> out(R, C, Co);
    for (int i = 0; i < R; ++i) {
        const int u_lo = std::max(0, P - i);
        const int u_hi = std::min(K - 1, R - 1 - i + P);
        for (int j = 0; j < C; ++j) {
            const int v_lo = std::max(0, P - j);
            const int v_hi = std::min(K - 1, C - 1 - j + P);
            T* op = out.cell(i, j);
            for (int co = 0; co < Co; ++co) {
                T acc = bias[co];
                for (int u = u_lo; u <= u_hi; ++u) {
                    const T* in_row = in.cell(i + u - P, 0);
                    for (int v = v_lo; v <= v_hi; ++v) {
                        const T* ip = in_row + static_cast<size_t>(j + v - P) * Ci;
                        const T* kp =
                            &packed[((static_cast<size_t>(co) * K + u) * K + v) * Ci];
                        T dot = T(0);
                        for (int ci = 0; ci < Ci; ++ci) dot += ip[ci] * kp[ci];
                        acc += dot;
                    }
                }
                op[co] = acc;
            }
        }
    }
    return out;
}

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols != b.rows)
        throw_shape_error("matmul: " + std::to_string(a.cols) +
                          " != " + std::to_string(b.rows));
    Matrix<T> out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        T* orow = out.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const T aik = a.at(i, k);
            const T* brow = b.row(k);
            for (int j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

// out = a * b^T. Used to apply [out_dim x in_dim] weight matrices to rows of
// token matrices without materializing transposes.
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols != b.cols)
        throw_shape_error("matmul_nt: inner dims " + std::to_string(a.cols) +
                          " != " + std::to_string(b.cols));
    Matrix<T> out(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const T* arow = a.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const T* brow = b.row(j);
            T acc = T(0);
            for (int k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
            out.at(i, j) = acc;
        }
    }
    return out;
}

// Row-wise softmax of exp(scale*x - rowmax(scale*x)); the max subtraction
// keeps large logits finite.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& m, T scale) {
    Matrix<T> out(m.rows, m.cols);
    for (int i = 0; i < m.rows; ++i) {
        const T* src = m.row(i);
        T* dst = out.row(i);
        T mx = src[0] * scale;
        for (int j = 1; j < m.cols; ++j) mx = std::max(mx, src[j] * scale);
        T sum = T(0);
        for (int j = 0; j < m.cols; ++j) {
            dst[j] = std::exp(src[j] * scale - mx);
            sum += dst[j];
        }
        for (int j = 0; j < m.cols; ++j) dst[j] /= sum;
    }
    return out;
}

template <typename T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

// Elementwise maps keep the first argument's coverage mask; masks carry
// provenance, not arithmetic.
template <typename T>
Grid<T> sigmoid_map(const Grid<T>& g) {
    Grid<T> out = g;
    for (auto& v : out.data) v = sigmoid_scalar(v);
    return out;
}

template <typename T>
Grid<T> tanh_map(const Grid<T>& g) {
    Grid<T> out = g;
    for (auto& v : out.data) v = std::tanh(v);
    return out;
}

template <typename T>
Grid<T> hadamard(const Grid<T>& a, const Grid<T>& b) {
    if (!a.same_shape(b)) throw_shape_error("hadamard: shape mismatch");
    Grid<T> out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
    return out;
}

template <typename T>
Grid<T> add(const Grid<T>& a, const Grid<T>& b) {
    if (!a.same_shape(b)) throw_shape_error("add: shape mismatch");
    Grid<T> out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

// Stacks channels in argument order: a's channels first.
template <typename T>
Grid<T> concat_channels(const Grid<T>& a, const Grid<T>& b) {
    if (a.rows != b.rows || a.cols != b.cols)
        throw_shape_error("concat_channels: spatial dims differ");
    Grid<T> out(a.rows, a.cols, a.channels + b.channels);
    for (int r = 0; r < a.rows; ++r) {
        for (int c = 0; c < a.cols; ++c) {
            T* dst = out.cell(r, c);
            const T* pa = a.cell(r, c);
            const T* pb = b.cell(r, c);
            for (int ch = 0; ch < a.channels; ++ch) dst[ch] = pa[ch];
            for (int ch = 0; ch < b.channels; ++ch) dst[a.channels + ch] = pb[ch];
        }
    }
    out.coverage = a.coverage;
    return out;
}

template <typename Src, typename Dst>
Grid<Dst> convert_grid(const Grid<Src>& g) {
    Grid<Dst> out(g.rows, g.cols, g.channels);
    for (size_t i = 0; i < g.data.size(); ++i)
        out.data[i] = static_cast<Dst>(g.data[i]);
    out.coverage = g.coverage;
    return out;
}

template <typename Src, typename Dst>
ConvKernel<Dst> convert_kernel(const ConvKernel<Src>& k) {
    ConvKernel<Dst> out(k.out_ch, k.in_ch, k.k);
    for (size_t i = 0; i < k.data.size(); ++i)
        out.data[i] = static_cast<Dst>(k.data[i]);
    return out;
}

}  // namespace nmp
