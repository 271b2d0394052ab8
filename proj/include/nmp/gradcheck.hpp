#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "nmp/fusion.hpp"
#include "nmp/random.hpp"
#include "nmp/tensor.hpp"

namespace nmp {

template <typename T>
struct ConvGrads {
    Grid<T> input;
    ConvKernel<T> weight;
    std::vector<T> bias;
};

// Reverse-mode gradients of conv2d. g_out is dL/d(output); the returned
// blocks are dL/d(input), dL/d(weight), dL/d(bias).
template <typename T>
ConvGrads<T> conv2d_backward(const Grid<T>& input, const ConvKernel<T>& w,
                             const Grid<T>& g_out) {
    if (g_out.rows != input.rows || g_out.cols != input.cols ||
        g_out.channels != w.out_ch)
        throw_shape_error("conv2d_backward: upstream shape mismatch");
    if (w.in_ch != input.channels)
        throw_shape_error("conv2d_backward: kernel/input channel mismatch");

    const int R = input.rows, C = input.cols;
    const int K = w.k, P = (K - 1) / 2;

    ConvGrads<T> g;
    g.input = Grid<T>(R, C, w.in_ch);
    g.weight = ConvKernel<T>(w.out_ch, w.in_ch, K);
    g.bias.assign(w.out_ch, T(0));

    for (int i = 0; i < R; ++i)
        for (int j = 0; j < C; ++j) {
            const T* go = g_out.cell(i, j);
            for (int co = 0; co < w.out_ch; ++co) {
                const T gv = go[co];
                g.bias[co] += gv;
                for (int u = 0; u < K; ++u) {
                    const int r = i + u - P;
                    if (r < 0 || r >= R) continue;
                    for (int v = 0; v < K; ++v) {
                        const int c = j + v - P;
                        if (c < 0 || c >= C) continue;
                        const T* ip = input.cell(r, c);
                        T* gi = g.input.cell(r, c);
                        for (int ci = 0; ci < w.in_ch; ++ci) {
                            g.weight.at(co, ci, u, v) += gv * ip[ci];
                            gi[ci] += gv * w.at(co, ci, u, v);
                        }
                    }
                }
            }
        }
    return g;
}

template <typename T>
struct GruGrads {
    GruWeightsT<T> w;
    Grid<T> prior;    // w.r.t. the effective (coverage-zeroed) prior
    Grid<T> refined;  // w.r.t. the refined observation
};

namespace detail {

template <typename T>
Grid<T> slice_channels(const Grid<T>& g, int from, int to) {
    Grid<T> out(g.rows, g.cols, to - from);
    for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c) {
            const T* src = g.cell(r, c);
            T* dst = out.cell(r, c);
            for (int ch = from; ch < to; ++ch) dst[ch - from] = src[ch];
        }
    return out;
}

}  // namespace detail

// Exact reverse-mode differentiation of gru_update, consuming the cache of
// the matching forward pass.
template <typename T>
GruGrads<T> gru_backward(const GruCache<T>& cache, const GruWeightsT<T>& w,
                         const Grid<T>& upstream) {
    const int C = cache.p_eff.channels;
    if (!upstream.same_shape(cache.p_eff))
        throw_shape_error("gru_backward: upstream shape mismatch");
    if (cache.cat1.channels != 2 * C)
        throw_shape_error("gru_backward: cache missing or inconsistent");

    const size_t n = cache.p_eff.data.size();
    Grid<T> g_z(cache.z.rows, cache.z.cols, C);
    Grid<T> g_ah(cache.z.rows, cache.z.cols, C);
    Grid<T> g_prior = upstream;  // starts as the direct (1 - z) path
    for (size_t i = 0; i < n; ++i) {
        const T z = cache.z.data[i], ph = cache.ph.data[i];
        const T up = upstream.data[i];
        g_z.data[i] = up * (ph - cache.p_eff.data[i]);
        g_ah.data[i] = up * z * (T(1) - ph * ph);
        g_prior.data[i] = up * (T(1) - z);
    }

    ConvGrads<T> gh = conv2d_backward(cache.cat2, w.w_h, g_ah);
    Grid<T> g_rp = detail::slice_channels(gh.input, 0, C);
    Grid<T> g_o2 = detail::slice_channels(gh.input, C, 2 * C);

    Grid<T> g_ar(cache.z.rows, cache.z.cols, C);
    Grid<T> g_az(cache.z.rows, cache.z.cols, C);
    for (size_t i = 0; i < n; ++i) {
        const T r = cache.r.data[i], z = cache.z.data[i];
        g_prior.data[i] += g_rp.data[i] * r;
        g_ar.data[i] = g_rp.data[i] * cache.p_eff.data[i] * r * (T(1) - r);
        g_az.data[i] = g_z.data[i] * z * (T(1) - z);
    }

    ConvGrads<T> gr = conv2d_backward(cache.cat1, w.w_r, g_ar);
    ConvGrads<T> gz = conv2d_backward(cache.cat1, w.w_z, g_az);

    GruGrads<T> out;
    out.w.w_z = std::move(gz.weight);
    out.w.b_z = std::move(gz.bias);
    out.w.w_r = std::move(gr.weight);
    out.w.b_r = std::move(gr.bias);
    out.w.w_h = std::move(gh.weight);
    out.w.b_h = std::move(gh.bias);

    out.refined = g_o2;
    for (size_t i = 0; i < gr.input.data.size(); ++i)
        gr.input.data[i] += gz.input.data[i];
    Grid<T> g_p_cat = detail::slice_channels(gr.input, 0, C);
    Grid<T> g_o1 = detail::slice_channels(gr.input, C, 2 * C);
    for (size_t i = 0; i < n; ++i) {
        g_prior.data[i] += g_p_cat.data[i];
        out.refined.data[i] += g_o1.data[i];
    }
    out.prior = std::move(g_prior);
    return out;
}

// Central differences per coordinate, 64-bit.
inline std::vector<double> finite_difference(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& params, double eps) {
    std::vector<double> grad(params.size());
    std::vector<double> x = params;
    for (size_t i = 0; i < params.size(); ++i) {
        x[i] = params[i] + eps;
        const double hi = f(x);
        x[i] = params[i] - eps;
        const double lo = f(x);
        x[i] = params[i];
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    return grad;
}

// ---- full-model gradient verification ----

namespace detail {

inline size_t gru_param_count(int C) {
    return 3 * (static_cast<size_t>(C) * 2 * C * 9 + C);
}

inline std::vector<double> pack_gru(const GruWeightsT<double>& w) {
    std::vector<double> out;
    for (const auto* k : {&w.w_z, &w.w_r, &w.w_h})
        out.insert(out.end(), k->data.begin(), k->data.end());
    for (const auto* b : {&w.b_z, &w.b_r, &w.b_h})
        out.insert(out.end(), b->begin(), b->end());
    return out;
}

inline GruWeightsT<double> unpack_gru(const std::vector<double>& p, int C) {
    GruWeightsT<double> w;
    size_t off = 0;
    for (auto* k : {&w.w_z, &w.w_r, &w.w_h}) {
        *k = ConvKernel<double>(C, 2 * C, 3);
        std::copy(p.begin() + off, p.begin() + off + k->data.size(),
                  k->data.begin());
        off += k->data.size();
    }
    for (auto* b : {&w.b_z, &w.b_r, &w.b_h}) {
        b->assign(p.begin() + off, p.begin() + off + C);
        off += C;
    }
    return w;
}

}  // namespace detail

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::map<std::string, double> block_err;  // per parameter block
};

inline double relative_error(double analytic, double numeric) {
    const double denom =
        std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    return std::abs(analytic - numeric) / denom;
}

// Compares analytic gradients of a linear functional of the GRU output
// against central finite differences over every weight, bias and input
// coordinate on a random instance.
inline GradCheckReport run_gradcheck(uint64_t seed, int rows = 6, int cols = 6,
                                     int channels = 4, double eps = 1e-4) {
    Rng rng(seed);
    const int C = channels;
    Grid<double> prior(rows, cols, C), refined(rows, cols, C);
    for (auto& v : prior.data) v = rng.uniform(-1.0, 1.0);
    for (auto& v : refined.data) v = rng.uniform(-1.0, 1.0);

    GruWeightsT<double> w;
    const double s = 1.0 / std::sqrt(2.0 * C * 9.0);
    for (auto* k : {&w.w_z, &w.w_r, &w.w_h}) {
        *k = ConvKernel<double>(C, 2 * C, 3);
        for (auto& v : k->data) v = rng.uniform(-s, s);
    }
    for (auto* b : {&w.b_z, &w.b_r, &w.b_h}) {
        b->assign(C, 0.0);
        for (auto& v : *b) v = rng.uniform(-0.5, 0.5);
    }

    // Linear functional L = sum(c .* p_t) so upstream = c exactly.
    Grid<double> upstream(rows, cols, C);
    for (auto& v : upstream.data) v = rng.uniform(-1.0, 1.0);

    GruCache<double> cache;
    gru_update(prior, refined, w, &cache);
    GruGrads<double> an = gru_backward(cache, w, upstream);

    auto loss_for = [&](const GruWeightsT<double>& wx, const Grid<double>& px,
                        const Grid<double>& ox) {
        GruResult<double> r = gru_update(px, ox, wx);
        double acc = 0.0;
        for (size_t i = 0; i < r.p.data.size(); ++i)
            acc += upstream.data[i] * r.p.data[i];
        return acc;
    };

    GradCheckReport rep;
    auto record = [&](const std::string& name, const std::vector<double>& a,
                      const std::vector<double>& f) {
        double worst = 0.0;
        for (size_t i = 0; i < a.size(); ++i)
            worst = std::max(worst, relative_error(a[i], f[i]));
        rep.block_err[name] = worst;
        rep.max_rel_err = std::max(rep.max_rel_err, worst);
    };

    std::vector<double> fd_w = finite_difference(
        [&](const std::vector<double>& p) {
            return loss_for(detail::unpack_gru(p, C), prior, refined);
        },
        detail::pack_gru(w), eps);
    const std::vector<double> an_w = detail::pack_gru(an.w);
    const size_t kn = static_cast<size_t>(C) * 2 * C * 9;
    auto seg = [](const std::vector<double>& v, size_t from, size_t len) {
        return std::vector<double>(v.begin() + from, v.begin() + from + len);
    };
    record("w_z", seg(an_w, 0, kn), seg(fd_w, 0, kn));
    record("w_r", seg(an_w, kn, kn), seg(fd_w, kn, kn));
    record("w_h", seg(an_w, 2 * kn, kn), seg(fd_w, 2 * kn, kn));
    record("b_z", seg(an_w, 3 * kn, C), seg(fd_w, 3 * kn, C));
    record("b_r", seg(an_w, 3 * kn + C, C), seg(fd_w, 3 * kn + C, C));
    record("b_h", seg(an_w, 3 * kn + 2 * C, C), seg(fd_w, 3 * kn + 2 * C, C));

    std::vector<double> fd_p = finite_difference(
        [&](const std::vector<double>& p) {
            Grid<double> px = prior;
            px.data = p;
            return loss_for(w, px, refined);
        },
        prior.data, eps);
    record("prior", an.prior.data, fd_p);

    std::vector<double> fd_o = finite_difference(
        [&](const std::vector<double>& p) {
            Grid<double> ox = refined;
            ox.data = p;
            return loss_for(w, prior, ox);
        },
        refined.data, eps);
    record("refined", an.refined.data, fd_o);
    return rep;
}

}  // namespace nmp
