#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nmp/random.hpp"
#include "nmp/tensor.hpp"

namespace nmp {

// Gate and candidate convolutions of the recurrent fusion unit. Kernels are
// [C, 2C, k, k]: each gate sees the channel-concatenated [prior, current]
// pair and emits C channels.
template <typename T>
struct GruWeightsT {
    ConvKernel<T> w_z, w_r, w_h;
    std::vector<T> b_z, b_r, b_h;
};
using GruWeights = GruWeightsT<float>;

template <typename Src, typename Dst>
GruWeightsT<Dst> convert_gru_weights(const GruWeightsT<Src>& w) {
    GruWeightsT<Dst> out;
    out.w_z = convert_kernel<Src, Dst>(w.w_z);
    out.w_r = convert_kernel<Src, Dst>(w.w_r);
    out.w_h = convert_kernel<Src, Dst>(w.w_h);
    out.b_z.assign(w.b_z.begin(), w.b_z.end());
    out.b_r.assign(w.b_r.begin(), w.b_r.end());
    out.b_h.assign(w.b_h.begin(), w.b_h.end());
    return out;
}

// Cross-attention projections. Patch tokens are flattened patches of the BEV
// grid, [patch_size^2 * C] per token; d_model must divide evenly into heads.
struct AttentionWeights {
    int patch_size = 10;
    int d_model = 256;
    int heads = 4;
    Matrix<float> w_embed_q;   // [d, patch^2*C]
    Matrix<float> w_embed_kv;  // [d, patch^2*C]
    Matrix<float> w_q;         // [d, d]
    Matrix<float> w_k;         // [d, d]
    Matrix<float> w_v;         // [d, d]
    Matrix<float> w_fc;        // [d, d]
    std::vector<float> b_fc;   // [d]
    Matrix<float> w_out;       // [patch^2*C, d]

    void validate(int channels) const {
        if (patch_size <= 0 || d_model <= 0 || heads <= 0)
            throw_shape_error("attention: non-positive dimension");
        if (d_model % heads != 0)
            throw_shape_error("attention: d_model not divisible by heads");
        const int tok = patch_size * patch_size * channels;
        auto want = [](const Matrix<float>& m, int r, int c, const char* name) {
            if (m.rows != r || m.cols != c)
                throw_shape_error(std::string("attention: ") + name +
                                  " shape mismatch");
        };
        want(w_embed_q, d_model, tok, "w_embed_q");
        want(w_embed_kv, d_model, tok, "w_embed_kv");
        want(w_q, d_model, d_model, "w_q");
        want(w_k, d_model, d_model, "w_k");
        want(w_v, d_model, d_model, "w_v");
        want(w_fc, d_model, d_model, "w_fc");
        want(w_out, tok, d_model, "w_out");
        if (static_cast<int>(b_fc.size()) != d_model)
            throw_shape_error("attention: b_fc size mismatch");
    }
};

// Learnable role-specific embeddings added at full resolution before
// patching, one for each side of the cross-attention.
struct PositionalEmbeddings {
    FeatureMap pe_current;
    FeatureMap pe_prior;
};

// Per-head attention matrices from the last c2p_attention call, for tests
// and gate-map inspection.
struct C2pDebug {
    std::vector<Matrix<float>> head_attn;  // heads x [n_query, n_covered]
    int covered_patches = 0;
};

namespace detail {

inline Matrix<float> gather_patch_tokens(const FeatureMap& g, int patch,
                                         const std::vector<int>& patch_ids) {
    const int pc = g.cols / patch;
    const int tok = patch * patch * g.channels;
    Matrix<float> out(static_cast<int>(patch_ids.size()), tok);
    for (size_t t = 0; t < patch_ids.size(); ++t) {
        const int pi = patch_ids[t] / pc;
        const int pj = patch_ids[t] % pc;
        float* dst = out.row(static_cast<int>(t));
        for (int r = 0; r < patch; ++r)
            for (int c = 0; c < patch; ++c) {
                const float* src = g.cell(pi * patch + r, pj * patch + c);
                std::memcpy(dst + (r * patch + c) * g.channels, src,
                            sizeof(float) * g.channels);
            }
    }
    return out;
}

inline void add_bias_rows(Matrix<float>& m, const std::vector<float>& b) {
    for (int i = 0; i < m.rows; ++i) {
        float* row = m.row(i);
        for (int j = 0; j < m.cols; ++j) row[j] += b[j];
    }
}

}  // namespace detail

// Current-to-prior cross-attention. Queries come from the current features,
// keys/values from the prior; positional embeddings are added at full
// resolution before patching and the raw current features are added back as
// a residual. Prior patches with no covered cell are excluded from keys and
// values; with no covered patch at all the current features pass through
// unchanged.
inline FeatureMap c2p_attention(const FeatureMap& current,
                                const FeatureMap& prior,
                                const PositionalEmbeddings& pe,
                                const AttentionWeights& w,
                                C2pDebug* debug = nullptr) {
    if (!current.same_shape(prior))
        throw_shape_error("c2p_attention: current/prior shape mismatch");
    if (!current.same_shape(pe.pe_current) || !current.same_shape(pe.pe_prior))
        throw_shape_error("c2p_attention: positional embedding shape mismatch");
    w.validate(current.channels);
    const int P = w.patch_size;
    if (current.rows % P != 0 || current.cols % P != 0)
        throw_shape_error("c2p_attention: BEV dims not divisible by patch");

    const int pr = current.rows / P, pc = current.cols / P;
    const int n_patches = pr * pc;

    std::vector<int> covered;
    for (int pid = 0; pid < n_patches; ++pid) {
        const int pi = pid / pc, pj = pid % pc;
        bool any = false;
        for (int r = 0; r < P && !any; ++r)
            for (int c = 0; c < P && !any; ++c)
                any = prior.covered_at(pi * P + r, pj * P + c);
        if (any) covered.push_back(pid);
    }
    if (debug) {
        debug->head_attn.clear();
        debug->covered_patches = static_cast<int>(covered.size());
    }
    if (covered.empty()) return current;

    FeatureMap cur_pe = add(current, pe.pe_current);
    FeatureMap pri_pe = add(prior, pe.pe_prior);

    std::vector<int> all(n_patches);
    for (int i = 0; i < n_patches; ++i) all[i] = i;
    Matrix<float> q_tok = detail::gather_patch_tokens(cur_pe, P, all);
    Matrix<float> kv_tok = detail::gather_patch_tokens(pri_pe, P, covered);

    Matrix<float> q0 = matmul_nt(q_tok, w.w_embed_q);
    Matrix<float> kv0 = matmul_nt(kv_tok, w.w_embed_kv);
    Matrix<float> q = matmul_nt(q0, w.w_q);
    Matrix<float> k = matmul_nt(kv0, w.w_k);
    Matrix<float> v = matmul_nt(kv0, w.w_v);

    const int H = w.heads, dh = w.d_model / H;
    const int nq = q.rows, nk = k.rows;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    Matrix<float> attended(nq, w.d_model);
    Matrix<float> logits(nq, nk);
    for (int h = 0; h < H; ++h) {
        const int off = h * dh;
        for (int i = 0; i < nq; ++i) {
            const float* qi = q.row(i) + off;
            for (int j = 0; j < nk; ++j) {
                const float* kj = k.row(j) + off;
                float acc = 0.0f;
                for (int x = 0; x < dh; ++x) acc += qi[x] * kj[x];
                logits.at(i, j) = acc;
            }
        }
        Matrix<float> attn = softmax_rows(logits, scale);
        for (int i = 0; i < nq; ++i) {
            float* out = attended.row(i) + off;
            const float* ai = attn.row(i);
            for (int j = 0; j < nk; ++j) {
                const float* vj = v.row(j) + off;
                const float a = ai[j];
                for (int x = 0; x < dh; ++x) out[x] += a * vj[x];
            }
        }
        if (debug) debug->head_attn.push_back(attn);
    }

    Matrix<float> fc = matmul_nt(attended, w.w_fc);
    detail::add_bias_rows(fc, w.b_fc);
    Matrix<float> out_tok = matmul_nt(fc, w.w_out);

    FeatureMap out = current;
    for (int pid = 0; pid < n_patches; ++pid) {
        const int pi = pid / pc, pj = pid % pc;
        const float* src = out_tok.row(pid);
        for (int r = 0; r < P; ++r)
            for (int c = 0; c < P; ++c) {
                float* dst = out.cell(pi * P + r, pj * P + c);
                const float* s = src + (r * P + c) * current.channels;
                for (int ch = 0; ch < current.channels; ++ch) dst[ch] += s[ch];
            }
    }
    return out;
}

// Intermediates of one recurrent-fusion forward pass, kept for manual
// backpropagation.
template <typename T>
struct GruCache {
    Grid<T> p_eff;  // prior with uncovered cells zeroed
    Grid<T> cat1;   // [p_eff, refined]
    Grid<T> z, r;
    Grid<T> rp;     // r (.) p_eff
    Grid<T> cat2;   // [rp, refined]
    Grid<T> ph;     // candidate tanh map
};

template <typename T>
struct GruResult {
    Grid<T> p;  // fused features, the new local prior
    Grid<T> z;  // update gate, kept for inspection
};

// z = sigmoid(conv([p, o], w_z)); r = sigmoid(conv([p, o], w_r));
// ph = tanh(conv([r (.) p, o], w_h)); out = (1 - z) (.) p + z (.) ph.
// Uncovered prior cells contribute p = 0; the output is covered wherever
// either input was.
template <typename T>
GruResult<T> gru_update(const Grid<T>& prior, const Grid<T>& refined,
                        const GruWeightsT<T>& w,
                        GruCache<T>* cache = nullptr) {
    if (!prior.same_shape(refined))
        throw_shape_error("gru_update: prior/refined shape mismatch");
    const int C = prior.channels;
    if (w.w_z.out_ch != C || w.w_z.in_ch != 2 * C || w.w_r.out_ch != C ||
        w.w_r.in_ch != 2 * C || w.w_h.out_ch != C || w.w_h.in_ch != 2 * C)
        throw_shape_error("gru_update: kernel shapes inconsistent with C");

    Grid<T> p_eff = prior;
    for (int rr = 0; rr < prior.rows; ++rr)
        for (int cc = 0; cc < prior.cols; ++cc)
            if (!prior.covered_at(rr, cc)) {
                T* cell = p_eff.cell(rr, cc);
                for (int ch = 0; ch < C; ++ch) cell[ch] = T(0);
            }

    Grid<T> cat1 = concat_channels(p_eff, refined);
    Grid<T> z = sigmoid_map(conv2d(cat1, w.w_z, w.b_z));
    Grid<T> r = sigmoid_map(conv2d(cat1, w.w_r, w.b_r));
    Grid<T> rp = hadamard(r, p_eff);
    Grid<T> cat2 = concat_channels(rp, refined);
    Grid<T> ph = tanh_map(conv2d(cat2, w.w_h, w.b_h));

    GruResult<T> out;
    out.p = Grid<T>(prior.rows, prior.cols, C);
    for (size_t i = 0; i < out.p.data.size(); ++i)
        out.p.data[i] = (T(1) - z.data[i]) * p_eff.data[i] +
                        z.data[i] * ph.data[i];
    for (int rr = 0; rr < prior.rows; ++rr)
        for (int cc = 0; cc < prior.cols; ++cc)
            out.p.set_covered(rr, cc, prior.covered_at(rr, cc) ||
                                          refined.covered_at(rr, cc));
    out.z = z;
    std::fill(out.z.coverage.begin(), out.z.coverage.end(), uint8_t(1));

    if (cache) {
        cache->p_eff = std::move(p_eff);
        cache->cat1 = std::move(cat1);
        cache->z = out.z;
        cache->r = std::move(r);
        cache->rp = std::move(rp);
        cache->cat2 = std::move(cat2);
        cache->ph = std::move(ph);
    }
    return out;
}

// alpha * current + (1 - alpha) * prior; cells without prior coverage pass
// the current value through (alpha forced to 1 there).
inline FeatureMap ma_update(const FeatureMap& current, const FeatureMap& prior,
                            double alpha) {
    if (!current.same_shape(prior))
        throw_shape_error("ma_update: shape mismatch");
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw std::invalid_argument("ma_update: alpha outside [0,1]");
    const float a = static_cast<float>(alpha);
    FeatureMap out(current.rows, current.cols, current.channels);
    for (int r = 0; r < current.rows; ++r)
        for (int c = 0; c < current.cols; ++c) {
            const float* cur = current.cell(r, c);
            float* dst = out.cell(r, c);
            if (prior.covered_at(r, c)) {
                const float* pri = prior.cell(r, c);
                for (int ch = 0; ch < current.channels; ++ch)
                    dst[ch] = a * cur[ch] + (1.0f - a) * pri[ch];
            } else {
                for (int ch = 0; ch < current.channels; ++ch) dst[ch] = cur[ch];
            }
            out.set_covered(r, c,
                            current.covered_at(r, c) || prior.covered_at(r, c));
        }
    return out;
}

enum class FuseStrategy { none, ma, gru, gru_ca };

inline FuseStrategy parse_strategy(const std::string& s) {
    if (s == "none") return FuseStrategy::none;
    if (s == "ma") return FuseStrategy::ma;
    if (s == "gru") return FuseStrategy::gru;
    if (s == "gru_ca") return FuseStrategy::gru_ca;
    throw std::invalid_argument("unknown fusion strategy: " + s);
}

inline const char* strategy_name(FuseStrategy s) {
    switch (s) {
        case FuseStrategy::none: return "none";
        case FuseStrategy::ma: return "ma";
        case FuseStrategy::gru: return "gru";
        case FuseStrategy::gru_ca: return "gru_ca";
    }
    return "?";
}

// Everything the fusion pathways need, bundled for checkpointing. The class
// embedding is the fixed encoder/decoder basis and travels with the weights
// so a checkpoint fully determines feature geometry.
struct WeightSet {
    GruWeights gru;
    AttentionWeights attn;
    PositionalEmbeddings pe;
    Matrix<float> embedding;  // [4, C]
};

struct FuseResult {
    FeatureMap refined;              // decoder input
    FeatureMap new_prior;            // write-back payload
    std::optional<FeatureMap> gate;  // z map for gru strategies
};

inline FuseResult fuse(FuseStrategy strategy, const FeatureMap& current,
                       const FeatureMap& prior, const WeightSet& w,
                       double alpha) {
    FuseResult out;
    switch (strategy) {
        case FuseStrategy::none:
            out.refined = current;
            out.new_prior = current;
            break;
        case FuseStrategy::ma: {
            FeatureMap m = ma_update(current, prior, alpha);
            out.refined = m;
            out.new_prior = std::move(m);
            break;
        }
        case FuseStrategy::gru: {
            GruResult<float> g = gru_update(prior, current, w.gru);
            out.refined = g.p;
            out.new_prior = std::move(g.p);
            out.gate = std::move(g.z);
            break;
        }
        case FuseStrategy::gru_ca: {
            FeatureMap refined_obs = c2p_attention(current, prior, w.pe, w.attn);
            GruResult<float> g = gru_update(prior, refined_obs, w.gru);
            out.refined = g.p;
            out.new_prior = std::move(g.p);
            out.gate = std::move(g.z);
            break;
        }
    }
    return out;
}

// ---- seeded initialization ----

inline GruWeights init_gru_weights(int channels, uint64_t seed) {
    GruWeights w;
    Rng rng(seed);
    const int fan_in = 2 * channels * 3 * 3;
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    auto fill = [&](ConvKernel<float>& k) {
        k = ConvKernel<float>(channels, 2 * channels, 3);
        for (auto& v : k.data) v = static_cast<float>(rng.uniform(-s, s));
    };
    fill(w.w_z);
    fill(w.w_r);
    fill(w.w_h);
    // Start the update gate mildly closed so an uninformative candidate does
    // not wipe the prior before training moves the biases.
    w.b_z.assign(channels, -1.0f);
    w.b_r.assign(channels, 0.0f);
    w.b_h.assign(channels, 0.0f);
    return w;
}

inline AttentionWeights init_attention_weights(int channels, uint64_t seed,
                                               int patch_size = 10,
                                               int d_model = 256,
                                               int heads = 4) {
    AttentionWeights w;
    w.patch_size = patch_size;
    w.d_model = d_model;
    w.heads = heads;
    Rng rng(seed);
    auto fill = [&](Matrix<float>& m, int rows, int cols) {
        m = Matrix<float>(rows, cols);
        const double s = 1.0 / std::sqrt(static_cast<double>(cols));
        for (auto& v : m.data) v = static_cast<float>(rng.uniform(-s, s));
    };
    const int tok = patch_size * patch_size * channels;
    fill(w.w_embed_q, d_model, tok);
    fill(w.w_embed_kv, d_model, tok);
    fill(w.w_q, d_model, d_model);
    fill(w.w_k, d_model, d_model);
    fill(w.w_v, d_model, d_model);
    fill(w.w_fc, d_model, d_model);
    w.b_fc.assign(d_model, 0.0f);
    fill(w.w_out, tok, d_model);
    return w;
}

inline PositionalEmbeddings init_positional_embeddings(int rows, int cols,
                                                       int channels,
                                                       uint64_t seed,
                                                       double scale = 0.02) {
    PositionalEmbeddings pe;
    Rng rng(seed);
    pe.pe_current = FeatureMap(rows, cols, channels);
    pe.pe_prior = FeatureMap(rows, cols, channels);
    for (auto& v : pe.pe_current.data)
        v = static_cast<float>(rng.uniform(-scale, scale));
    for (auto& v : pe.pe_prior.data)
        v = static_cast<float>(rng.uniform(-scale, scale));
    return pe;
}

// Fixed class basis: 4 orthonormal rows in R^C via Gram-Schmidt on seeded
// Gaussian draws. The default seed is a repo-wide constant so every run and
// checkpoint shares one feature geometry.
inline constexpr uint64_t kClassEmbeddingSeed = 0x4e4d5045ull;

inline Matrix<float> class_embedding(int channels,
                                     uint64_t seed = kClassEmbeddingSeed) {
    if (channels < 4)
        throw_shape_error("class_embedding: needs at least 4 channels");
    Rng rng(seed);
    Matrix<double> e(4, channels);
    for (int i = 0; i < 4; ++i) {
        for (;;) {
            for (int j = 0; j < channels; ++j) e.at(i, j) = rng.gaussian();
            for (int k = 0; k < i; ++k) {
                double dot = 0.0;
                for (int j = 0; j < channels; ++j)
                    dot += e.at(i, j) * e.at(k, j);
                for (int j = 0; j < channels; ++j)
                    e.at(i, j) -= dot * e.at(k, j);
            }
            double norm = 0.0;
            for (int j = 0; j < channels; ++j)
                norm += e.at(i, j) * e.at(i, j);
            norm = std::sqrt(norm);
            if (norm > 1e-6) {
                for (int j = 0; j < channels; ++j) e.at(i, j) /= norm;
                break;
            }
        }
    }
    Matrix<float> out(4, channels);
    for (size_t i = 0; i < e.data.size(); ++i)
        out.data[i] = static_cast<float>(e.data[i]);
    return out;
}

struct WeightSetParams {
    int channels = 32;
    int bev_rows = 200;
    int bev_cols = 100;
    int patch_size = 10;
    int d_model = 256;
    int heads = 4;
};

inline WeightSet make_weight_set(const WeightSetParams& p, uint64_t seed) {
    WeightSet w;
    w.gru = init_gru_weights(p.channels, derive_seed(seed, 1));
    w.attn = init_attention_weights(p.channels, derive_seed(seed, 2),
                                    p.patch_size, p.d_model, p.heads);
    // Zero the residual branch's output projection so an untrained attention
    // stage is a no-op on the features instead of injecting random garbage.
    // Training only touches the GRU, so gru_ca stays usable out of the box.
    std::fill(w.attn.w_out.data.begin(), w.attn.w_out.data.end(), 0.0f);
    w.pe = init_positional_embeddings(p.bev_rows, p.bev_cols, p.channels,
                                      derive_seed(seed, 3));
    w.embedding = class_embedding(p.channels);
    return w;
}

// ---- checkpoint file ----
// Little-endian, magic "NMPW", version u16, then named sections:
// u32 name length, name bytes, u8 ndim, u32 dims[ndim], f32 payload.

namespace detail {

inline void put_u16(std::string& b, uint16_t v) {
    b.push_back(static_cast<char>(v & 0xff));
    b.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::string& b, uint32_t v) {
    for (int i = 0; i < 4; ++i)
        b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& b, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(b, bits);
}

inline void put_section(std::string& b, const std::string& name,
                        const std::vector<uint32_t>& dims,
                        const float* data, size_t count) {
    put_u32(b, static_cast<uint32_t>(name.size()));
    b.append(name);
    b.push_back(static_cast<char>(dims.size()));
    for (uint32_t d : dims) put_u32(b, d);
    for (size_t i = 0; i < count; ++i) put_f32(b, data[i]);
}

struct Section {
    std::vector<uint32_t> dims;
    std::vector<float> data;
};

}  // namespace detail

inline std::string serialize_weights(const WeightSet& w) {
    using detail::put_section;
    std::string b;
    b.append("NMPW");
    detail::put_u16(b, 1);

    auto kern = [&](const std::string& name, const ConvKernel<float>& k) {
        put_section(b, name,
                    {static_cast<uint32_t>(k.out_ch),
                     static_cast<uint32_t>(k.in_ch),
                     static_cast<uint32_t>(k.k), static_cast<uint32_t>(k.k)},
                    k.data.data(), k.data.size());
    };
    auto vec = [&](const std::string& name, const std::vector<float>& v) {
        put_section(b, name, {static_cast<uint32_t>(v.size())}, v.data(),
                    v.size());
    };
    auto mat = [&](const std::string& name, const Matrix<float>& m) {
        put_section(b, name,
                    {static_cast<uint32_t>(m.rows),
                     static_cast<uint32_t>(m.cols)},
                    m.data.data(), m.data.size());
    };
    auto grid = [&](const std::string& name, const FeatureMap& g) {
        put_section(b, name,
                    {static_cast<uint32_t>(g.rows),
                     static_cast<uint32_t>(g.cols),
                     static_cast<uint32_t>(g.channels)},
                    g.data.data(), g.data.size());
    };

    kern("gru.w_z", w.gru.w_z);
    vec("gru.b_z", w.gru.b_z);
    kern("gru.w_r", w.gru.w_r);
    vec("gru.b_r", w.gru.b_r);
    kern("gru.w_h", w.gru.w_h);
    vec("gru.b_h", w.gru.b_h);

    const float meta[3] = {static_cast<float>(w.attn.patch_size),
                           static_cast<float>(w.attn.d_model),
                           static_cast<float>(w.attn.heads)};
    put_section(b, "attn.meta", {3}, meta, 3);
    mat("attn.w_embed_q", w.attn.w_embed_q);
    mat("attn.w_embed_kv", w.attn.w_embed_kv);
    mat("attn.w_q", w.attn.w_q);
    mat("attn.w_k", w.attn.w_k);
    mat("attn.w_v", w.attn.w_v);
    mat("attn.w_fc", w.attn.w_fc);
    vec("attn.b_fc", w.attn.b_fc);
    mat("attn.w_out", w.attn.w_out);

    grid("pe.current", w.pe.pe_current);
    grid("pe.prior", w.pe.pe_prior);
    mat("embedding", w.embedding);
    return b;
}

inline WeightSet deserialize_weights(const std::string& bytes) {
    size_t off = 0;
    auto need = [&](size_t n, const char* what) {
        if (off + n > bytes.size())
            throw std::runtime_error(std::string("checkpoint truncated in ") +
                                     what);
    };
    auto get_u16 = [&](const char* what) {
        need(2, what);
        uint16_t v = static_cast<uint8_t>(bytes[off]) |
                     (static_cast<uint8_t>(bytes[off + 1]) << 8);
        off += 2;
        return v;
    };
    auto get_u32 = [&](const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<uint8_t>(bytes[off + i]))
                 << (8 * i);
        off += 4;
        return v;
    };

    need(4, "magic");
    if (bytes.compare(0, 4, "NMPW") != 0)
        throw std::runtime_error("checkpoint: bad magic");
    off = 4;
    const uint16_t version = get_u16("version");
    if (version != 1)
        throw std::runtime_error("checkpoint: unsupported version " +
                                 std::to_string(version));

    std::map<std::string, detail::Section> sections;
    while (off < bytes.size()) {
        const uint32_t name_len = get_u32("section name length");
        need(name_len, "section name");
        std::string name = bytes.substr(off, name_len);
        off += name_len;
        need(1, "ndim");
        const int ndim = static_cast<uint8_t>(bytes[off++]);
        detail::Section s;
        size_t count = 1;
        for (int i = 0; i < ndim; ++i) {
            s.dims.push_back(get_u32("dims"));
            count *= s.dims.back();
        }
        need(count * 4, name.c_str());
        s.data.resize(count);
        std::memcpy(s.data.data(), bytes.data() + off, count * 4);
        off += count * 4;
        sections.emplace(std::move(name), std::move(s));
    }

    auto take = [&](const std::string& name) -> detail::Section& {
        auto it = sections.find(name);
        if (it == sections.end())
            throw std::runtime_error("checkpoint: missing section " + name);
        return it->second;
    };
    auto kern = [&](const std::string& name) {
        detail::Section& s = take(name);
        if (s.dims.size() != 4 || s.dims[2] != s.dims[3])
            throw std::runtime_error("checkpoint: bad kernel dims in " + name);
        ConvKernel<float> k(static_cast<int>(s.dims[0]),
                            static_cast<int>(s.dims[1]),
                            static_cast<int>(s.dims[2]));
        k.data = std::move(s.data);
        return k;
    };
    auto vec = [&](const std::string& name) {
        detail::Section& s = take(name);
        if (s.dims.size() != 1)
            throw std::runtime_error("checkpoint: bad vector dims in " + name);
        return std::move(s.data);
    };
    auto mat = [&](const std::string& name) {
        detail::Section& s = take(name);
        if (s.dims.size() != 2)
            throw std::runtime_error("checkpoint: bad matrix dims in " + name);
        Matrix<float> m(static_cast<int>(s.dims[0]),
                        static_cast<int>(s.dims[1]));
        m.data = std::move(s.data);
        return m;
    };
    auto grid = [&](const std::string& name) {
        detail::Section& s = take(name);
        if (s.dims.size() != 3)
            throw std::runtime_error("checkpoint: bad grid dims in " + name);
        FeatureMap g(static_cast<int>(s.dims[0]), static_cast<int>(s.dims[1]),
                     static_cast<int>(s.dims[2]));
        g.data = std::move(s.data);
        return g;
    };

    WeightSet w;
    w.gru.w_z = kern("gru.w_z");
    w.gru.b_z = vec("gru.b_z");
    w.gru.w_r = kern("gru.w_r");
    w.gru.b_r = vec("gru.b_r");
    w.gru.w_h = kern("gru.w_h");
    w.gru.b_h = vec("gru.b_h");

    std::vector<float> meta = vec("attn.meta");
    if (meta.size() != 3)
        throw std::runtime_error("checkpoint: bad attn.meta");
    w.attn.patch_size = static_cast<int>(meta[0]);
    w.attn.d_model = static_cast<int>(meta[1]);
    w.attn.heads = static_cast<int>(meta[2]);
    w.attn.w_embed_q = mat("attn.w_embed_q");
    w.attn.w_embed_kv = mat("attn.w_embed_kv");
    w.attn.w_q = mat("attn.w_q");
    w.attn.w_k = mat("attn.w_k");
    w.attn.w_v = mat("attn.w_v");
    w.attn.w_fc = mat("attn.w_fc");
    w.attn.b_fc = vec("attn.b_fc");
    w.attn.w_out = mat("attn.w_out");

    w.pe.pe_current = grid("pe.current");
    w.pe.pe_prior = grid("pe.prior");
    w.embedding = mat("embedding");
    return w;
}

inline void save_weights(const std::string& path, const WeightSet& w) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    const std::string b = serialize_weights(w);
    f.write(b.data(), static_cast<std::streamsize>(b.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline WeightSet load_weights(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::string b((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
    return deserialize_weights(b);
}

}  // namespace nmp
