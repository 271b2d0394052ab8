#include "nmp/fusion.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "nmp/random.hpp"
#include "nmp/tensor.hpp"

using namespace nmp;

namespace {

FeatureMap random_map(Rng& rng, int r, int c, int ch, float lo = -1.0f,
                      float hi = 1.0f) {
    FeatureMap g(r, c, ch);
    for (auto& v : g.data)
        v = static_cast<float>(rng.uniform(lo, hi));
    return g;
}

Grid<double> random_dmap(Rng& rng, int r, int c, int ch) {
    Grid<double> g(r, c, ch);
    for (auto& v : g.data) v = rng.uniform(-1.0, 1.0);
    return g;
}

// Double-precision dense convolution used by the GRU oracle below.
Grid<double> dconv(const Grid<double>& in, const ConvKernel<double>& w,
                   const std::vector<double>& bias) {
    const int P = (w.k - 1) / 2;
    Grid<double> out(in.rows, in.cols, w.out_ch);
    for (int i = 0; i < in.rows; ++i)
        for (int j = 0; j < in.cols; ++j)
            for (int co = 0; co < w.out_ch; ++co) {
                double acc = bias[co];
                for (int u = 0; u < w.k; ++u)
                    for (int v = 0; v < w.k; ++v) {
                        const int r = i + u - P, c = j + v - P;
                        if (r < 0 || r >= in.rows || c < 0 || c >= in.cols)
                            continue;
                        for (int ci = 0; ci < in.channels; ++ci)
                            acc += in.at(r, c, ci) * w.at(co, ci, u, v);
                    }
                out.at(i, j, co) = acc;
            }
    return out;
}

// Independent scalar reimplementation of the recurrent update, double
// precision throughout, no shared code with gru_update beyond types.
Grid<double> gru_oracle(const Grid<double>& prior, const Grid<double>& obs,
                        const GruWeightsT<double>& w) {
    const int C = prior.channels;
    Grid<double> cat(prior.rows, prior.cols, 2 * C);
    for (int r = 0; r < prior.rows; ++r)
        for (int c = 0; c < prior.cols; ++c)
            for (int ch = 0; ch < C; ++ch) {
                cat.at(r, c, ch) = prior.covered_at(r, c) ? prior.at(r, c, ch)
                                                          : 0.0;
                cat.at(r, c, C + ch) = obs.at(r, c, ch);
            }
    Grid<double> az = dconv(cat, w.w_z, w.b_z);
    Grid<double> ar = dconv(cat, w.w_r, w.b_r);
    Grid<double> cat2 = cat;
    for (int r = 0; r < prior.rows; ++r)
        for (int c = 0; c < prior.cols; ++c)
            for (int ch = 0; ch < C; ++ch) {
                const double rr = 1.0 / (1.0 + std::exp(-ar.at(r, c, ch)));
                cat2.at(r, c, ch) = rr * cat.at(r, c, ch);
            }
    Grid<double> ah = dconv(cat2, w.w_h, w.b_h);
    Grid<double> out(prior.rows, prior.cols, C);
    for (int r = 0; r < prior.rows; ++r)
        for (int c = 0; c < prior.cols; ++c)
            for (int ch = 0; ch < C; ++ch) {
                const double z = 1.0 / (1.0 + std::exp(-az.at(r, c, ch)));
                const double ph = std::tanh(ah.at(r, c, ch));
                out.at(r, c, ch) =
                    (1.0 - z) * cat.at(r, c, ch) + z * ph;
            }
    return out;
}

GruWeightsT<double> random_dgru(Rng& rng, int C, double scale) {
    GruWeightsT<double> w;
    auto fill = [&](ConvKernel<double>& k) {
        k = ConvKernel<double>(C, 2 * C, 3);
        for (auto& v : k.data) v = rng.uniform(-scale, scale);
    };
    fill(w.w_z);
    fill(w.w_r);
    fill(w.w_h);
    w.b_z.assign(C, 0.0);
    w.b_r.assign(C, 0.0);
    w.b_h.assign(C, 0.0);
    return w;
}

// Plain dense reimplementation of the cross-attention in double: same token
// flattening convention, independent arithmetic.
FeatureMap attention_oracle(const FeatureMap& current, const FeatureMap& prior,
                            const PositionalEmbeddings& pe,
                            const AttentionWeights& w) {
    const int P = w.patch_size, C = current.channels;
    const int pr = current.rows / P, pc = current.cols / P;
    const int tok = P * P * C;

    std::vector<int> covered;
    for (int pid = 0; pid < pr * pc; ++pid) {
        bool any = false;
        for (int r = 0; r < P; ++r)
            for (int c = 0; c < P; ++c)
                any = any || prior.covered_at((pid / pc) * P + r,
                                              (pid % pc) * P + c);
        if (any) covered.push_back(pid);
    }
    if (covered.empty()) return current;

    auto tokens = [&](const FeatureMap& g, const FeatureMap& emb,
                      const std::vector<int>& ids) {
        std::vector<std::vector<double>> out;
        for (int pid : ids) {
            std::vector<double> t(tok);
            for (int r = 0; r < P; ++r)
                for (int c = 0; c < P; ++c)
                    for (int ch = 0; ch < C; ++ch) {
                        const int gr = (pid / pc) * P + r;
                        const int gc = (pid % pc) * P + c;
                        t[(r * P + c) * C + ch] =
                            static_cast<double>(g.at(gr, gc, ch)) +
                            emb.at(gr, gc, ch);
                    }
            out.push_back(std::move(t));
        }
        return out;
    };
    auto apply = [](const Matrix<float>& m,
                    const std::vector<std::vector<double>>& xs) {
        std::vector<std::vector<double>> out;
        for (const auto& x : xs) {
            std::vector<double> y(m.rows, 0.0);
            for (int i = 0; i < m.rows; ++i)
                for (int j = 0; j < m.cols; ++j)
                    y[i] += static_cast<double>(m.at(i, j)) * x[j];
            out.push_back(std::move(y));
        }
        return out;
    };

    std::vector<int> all(pr * pc);
    for (int i = 0; i < pr * pc; ++i) all[i] = i;
    auto q = apply(w.w_q, apply(w.w_embed_q, tokens(current, pe.pe_current, all)));
    auto kv0 = apply(w.w_embed_kv, tokens(prior, pe.pe_prior, covered));
    auto k = apply(w.w_k, kv0);
    auto v = apply(w.w_v, kv0);

    const int H = w.heads, dh = w.d_model / H;
    std::vector<std::vector<double>> att(q.size(),
                                         std::vector<double>(w.d_model, 0.0));
    for (int h = 0; h < H; ++h)
        for (size_t i = 0; i < q.size(); ++i) {
            std::vector<double> logits(k.size());
            for (size_t j = 0; j < k.size(); ++j) {
                double acc = 0.0;
                for (int x = 0; x < dh; ++x)
                    acc += q[i][h * dh + x] * k[j][h * dh + x];
                logits[j] = acc / std::sqrt(static_cast<double>(dh));
            }
            double mx = logits[0];
            for (double l : logits) mx = std::max(mx, l);
            double sum = 0.0;
            for (double& l : logits) {
                l = std::exp(l - mx);
                sum += l;
            }
            for (size_t j = 0; j < k.size(); ++j)
                for (int x = 0; x < dh; ++x)
                    att[i][h * dh + x] += logits[j] / sum * v[j][h * dh + x];
        }

    auto fc = apply(w.w_fc, att);
    for (auto& row : fc)
        for (int i = 0; i < w.d_model; ++i) row[i] += w.b_fc[i];
    auto out_tok = apply(w.w_out, fc);

    FeatureMap out = current;
    for (int pid = 0; pid < pr * pc; ++pid)
        for (int r = 0; r < P; ++r)
            for (int c = 0; c < P; ++c)
                for (int ch = 0; ch < C; ++ch)
                    out.at((pid / pc) * P + r, (pid % pc) * P + c, ch) +=
                        static_cast<float>(out_tok[pid][(r * P + c) * C + ch]);
    return out;
}

AttentionWeights small_attention(Rng& rng, int C, int patch, int d, int heads) {
    AttentionWeights w = init_attention_weights(C, rng.next_u64(), patch, d,
                                                heads);
    for (auto& b : w.b_fc) b = static_cast<float>(rng.uniform(-0.1, 0.1));
    return w;
}

}  // namespace

TEST(C2pAttention, EmptyPriorPassesCurrentThrough) {
    Rng rng(1);
    FeatureMap current = random_map(rng, 4, 6, 3);
    FeatureMap prior(4, 6, 3, 0.0f, false);
    AttentionWeights w = small_attention(rng, 3, 2, 8, 2);
    PositionalEmbeddings pe = init_positional_embeddings(4, 6, 3, 5);

    C2pDebug dbg;
    FeatureMap out = c2p_attention(current, prior, pe, w, &dbg);
    EXPECT_EQ(out.data, current.data);
    EXPECT_EQ(dbg.covered_patches, 0);
}

TEST(C2pAttention, ZeroValuePathLeavesResidualOnly) {
    Rng rng(2);
    FeatureMap current = random_map(rng, 4, 6, 3);
    FeatureMap prior = random_map(rng, 4, 6, 3);
    AttentionWeights w = small_attention(rng, 3, 2, 8, 2);
    PositionalEmbeddings pe = init_positional_embeddings(4, 6, 3, 5);
    for (auto& v : w.w_v.data) v = 0.0f;
    for (auto& v : w.w_out.data) v = 0.0f;

    FeatureMap out = c2p_attention(current, prior, pe, w);
    EXPECT_EQ(out.data, current.data);
}

TEST(C2pAttention, IdenticalPriorTokensGetUniformWeights) {
    Rng rng(3);
    // 2x6 grid, patch 2: one row of three patches on each side.
    FeatureMap current = random_map(rng, 2, 6, 2);
    FeatureMap prior(2, 6, 2);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 6; ++c)
            for (int ch = 0; ch < 2; ++ch)
                prior.at(r, c, ch) =
                    0.1f * static_cast<float>(r * 2 + (c % 2)) + 0.3f * ch;
    AttentionWeights w = small_attention(rng, 2, 2, 4, 1);
    PositionalEmbeddings pe;
    pe.pe_current = random_map(rng, 2, 6, 2, -0.02f, 0.02f);
    pe.pe_prior = FeatureMap(2, 6, 2, 0.05f);  // patch-periodic

    C2pDebug dbg;
    FeatureMap out = c2p_attention(current, prior, pe, w, &dbg);
    ASSERT_EQ(dbg.head_attn.size(), 1u);
    const Matrix<float>& attn = dbg.head_attn[0];
    ASSERT_EQ(attn.rows, 3);
    ASSERT_EQ(attn.cols, 3);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            EXPECT_NEAR(attn.at(i, j), 1.0f / 3.0f, 1e-6);

    FeatureMap want = attention_oracle(current, prior, pe, w);
    for (size_t i = 0; i < out.data.size(); ++i)
        EXPECT_NEAR(out.data[i], want.data[i], 1e-5);
}

TEST(C2pAttention, MatchesDenseOracleWithPartialCoverage) {
    Rng rng(4);
    FeatureMap current = random_map(rng, 4, 6, 3);
    FeatureMap prior = random_map(rng, 4, 6, 3);
    // Cover patches 0, 2 and 5 only (patch grid is 2x3).
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 6; ++c) prior.set_covered(r, c, false);
    prior.set_covered(0, 0, true);
    prior.set_covered(1, 5, true);
    prior.set_covered(3, 3, true);

    AttentionWeights w = small_attention(rng, 3, 2, 8, 2);
    PositionalEmbeddings pe;
    pe.pe_current = random_map(rng, 4, 6, 3, -0.5f, 0.5f);
    pe.pe_prior = random_map(rng, 4, 6, 3, -0.5f, 0.5f);

    C2pDebug dbg;
    FeatureMap out = c2p_attention(current, prior, pe, w, &dbg);
    EXPECT_EQ(dbg.covered_patches, 3);
    EXPECT_EQ(out.rows, current.rows);
    EXPECT_EQ(out.cols, current.cols);
    EXPECT_EQ(out.channels, current.channels);

    FeatureMap want = attention_oracle(current, prior, pe, w);
    for (size_t i = 0; i < out.data.size(); ++i)
        EXPECT_NEAR(out.data[i], want.data[i], 1e-5);

    // Per-query attention over covered tokens is a distribution.
    for (const auto& attn : dbg.head_attn)
        for (int i = 0; i < attn.rows; ++i) {
            float sum = 0.0f;
            for (int j = 0; j < attn.cols; ++j) sum += attn.at(i, j);
            EXPECT_NEAR(sum, 1.0f, 1e-6);
        }
}

TEST(C2pAttention, EmbeddingsAreRoleSpecific) {
    Rng rng(6);
    FeatureMap current = random_map(rng, 4, 4, 2);
    FeatureMap prior = random_map(rng, 4, 4, 2);
    AttentionWeights w = small_attention(rng, 2, 2, 8, 2);
    PositionalEmbeddings pe;
    pe.pe_current = random_map(rng, 4, 4, 2, -0.5f, 0.5f);
    pe.pe_prior = random_map(rng, 4, 4, 2, -0.5f, 0.5f);
    PositionalEmbeddings swapped;
    swapped.pe_current = pe.pe_prior;
    swapped.pe_prior = pe.pe_current;

    FeatureMap a = c2p_attention(current, prior, pe, w);
    FeatureMap b = c2p_attention(current, prior, swapped, w);
    float max_diff = 0.0f;
    for (size_t i = 0; i < a.data.size(); ++i)
        max_diff = std::max(max_diff, std::abs(a.data[i] - b.data[i]));
    EXPECT_GT(max_diff, 1e-6f);
}

TEST(C2pAttention, RejectsBadConfigurations) {
    Rng rng(7);
    FeatureMap current = random_map(rng, 4, 6, 3);
    AttentionWeights w = small_attention(rng, 3, 2, 8, 2);
    PositionalEmbeddings pe = init_positional_embeddings(4, 6, 3, 5);

    EXPECT_THROW(c2p_attention(current, FeatureMap(4, 5, 3), pe, w),
                 std::invalid_argument);
    // 5 rows not divisible by patch 2.
    FeatureMap odd_cur = random_map(rng, 5, 6, 3);
    PositionalEmbeddings odd_pe = init_positional_embeddings(5, 6, 3, 5);
    EXPECT_THROW(
        c2p_attention(odd_cur, FeatureMap(5, 6, 3), odd_pe, w),
        std::invalid_argument);
    AttentionWeights bad = w;
    bad.heads = 3;  // 8 % 3 != 0
    EXPECT_THROW(c2p_attention(current, FeatureMap(4, 6, 3), pe, bad),
                 std::invalid_argument);
}

TEST(GruUpdate, MatchesScalarOracle) {
    Rng rng(8);
    Grid<double> prior = random_dmap(rng, 6, 6, 4);
    Grid<double> obs = random_dmap(rng, 6, 6, 4);
    GruWeightsT<double> dw = random_dgru(rng, 4, 0.4);

    // Float pipeline vs double scalar oracle.
    GruWeightsT<float> fw = convert_gru_weights<double, float>(dw);
    Grid<float> fprior = convert_grid<double, float>(prior);
    Grid<float> fobs = convert_grid<double, float>(obs);
    GruResult<float> got = gru_update(fprior, fobs, fw);
    Grid<double> want = gru_oracle(prior, obs, dw);
    for (size_t i = 0; i < want.data.size(); ++i)
        EXPECT_NEAR(got.p.data[i], want.data[i], 1e-5);
}

TEST(GruUpdate, MatchesScalarOracleWithPartialCoverage) {
    Rng rng(9);
    Grid<double> prior = random_dmap(rng, 5, 7, 3);
    Grid<double> obs = random_dmap(rng, 5, 7, 3);
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 7; ++c)
            prior.set_covered(r, c, (r + c) % 3 != 0);
    GruWeightsT<double> dw = random_dgru(rng, 3, 0.4);

    GruResult<double> got = gru_update(prior, obs, dw);
    Grid<double> want = gru_oracle(prior, obs, dw);
    for (size_t i = 0; i < want.data.size(); ++i)
        EXPECT_NEAR(got.p.data[i], want.data[i], 1e-12);
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 7; ++c) EXPECT_TRUE(got.p.covered_at(r, c));
}

TEST(GruUpdate, ClosedGateKeepsPrior) {
    Rng rng(10);
    Grid<double> prior = random_dmap(rng, 6, 6, 4);
    Grid<double> obs = random_dmap(rng, 6, 6, 4);
    GruWeightsT<double> w = random_dgru(rng, 4, 0.2);
    w.b_z.assign(4, -20.0);

    GruResult<double> got = gru_update(prior, obs, w);
    for (size_t i = 0; i < prior.data.size(); ++i)
        EXPECT_NEAR(got.p.data[i], prior.data[i], 1e-6);
}

TEST(GruUpdate, OpenGatesYieldCandidate) {
    Rng rng(11);
    Grid<double> prior = random_dmap(rng, 6, 6, 4);
    Grid<double> obs = random_dmap(rng, 6, 6, 4);
    GruWeightsT<double> w = random_dgru(rng, 4, 0.2);
    w.b_z.assign(4, 20.0);
    w.b_r.assign(4, 20.0);

    GruResult<double> got = gru_update(prior, obs, w);
    // With r == 1 the candidate is tanh(conv([p, o], w_h, b_h)).
    Grid<double> cat(6, 6, 8);
    for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 6; ++c)
            for (int ch = 0; ch < 4; ++ch) {
                cat.at(r, c, ch) = prior.at(r, c, ch);
                cat.at(r, c, 4 + ch) = obs.at(r, c, ch);
            }
    Grid<double> want = dconv(cat, w.w_h, w.b_h);
    for (size_t i = 0; i < want.data.size(); ++i)
        EXPECT_NEAR(got.p.data[i], std::tanh(want.data[i]), 1e-6);
}

TEST(GruUpdate, GatesAndCandidateStayInRange) {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        Grid<float> prior(4, 4, 3), obs(4, 4, 3);
        for (auto& v : prior.data)
            v = static_cast<float>(rng.uniform(-2.0, 2.0));
        for (auto& v : obs.data) v = static_cast<float>(rng.uniform(-2.0, 2.0));
        GruWeights w = init_gru_weights(3, rng.next_u64());

        GruCache<float> cache;
        GruResult<float> got = gru_update(prior, obs, w, &cache);
        for (size_t i = 0; i < got.z.data.size(); ++i) {
            const float z = got.z.data[i], r = cache.r.data[i];
            const float ph = cache.ph.data[i];
            const float p = cache.p_eff.data[i], pt = got.p.data[i];
            EXPECT_GT(z, 0.0f);
            EXPECT_LT(z, 1.0f);
            EXPECT_GT(r, 0.0f);
            EXPECT_LT(r, 1.0f);
            EXPECT_GT(ph, -1.0f);
            EXPECT_LT(ph, 1.0f);
            EXPECT_GE(pt, std::min(p, ph) - 1e-6f);
            EXPECT_LE(pt, std::max(p, ph) + 1e-6f);
        }
    }
}

TEST(GruUpdate, RejectsShapeMismatch) {
    GruWeights w = init_gru_weights(3, 1);
    EXPECT_THROW(gru_update(FeatureMap(4, 4, 3), FeatureMap(4, 5, 3), w),
                 std::invalid_argument);
    EXPECT_THROW(gru_update(FeatureMap(4, 4, 2), FeatureMap(4, 4, 2), w),
                 std::invalid_argument);
}

TEST(MaUpdate, PinnedCases) {
    FeatureMap cur(2, 2, 1, 2.0f), pri(2, 2, 1, 4.0f);
    EXPECT_EQ(ma_update(cur, pri, 1.0).data, cur.data);
    EXPECT_EQ(ma_update(cur, pri, 0.0).data, pri.data);
    FeatureMap mid = ma_update(cur, pri, 0.5);
    for (float v : mid.data) EXPECT_FLOAT_EQ(v, 3.0f);

    pri.set_covered(0, 1, false);
    FeatureMap out = ma_update(cur, pri, 0.25);
    EXPECT_FLOAT_EQ(out.at(0, 0, 0), 0.25f * 2.0f + 0.75f * 4.0f);
    EXPECT_FLOAT_EQ(out.at(0, 1, 0), 2.0f);

    EXPECT_THROW(ma_update(cur, pri, -0.01), std::invalid_argument);
    EXPECT_THROW(ma_update(cur, pri, 1.01), std::invalid_argument);
    EXPECT_THROW(ma_update(cur, FeatureMap(2, 2, 2), 0.5),
                 std::invalid_argument);
}

TEST(Fuse, StrategyDispatch) {
    Rng rng(13);
    WeightSetParams params;
    params.channels = 4;
    params.bev_rows = 4;
    params.bev_cols = 4;
    params.patch_size = 2;
    params.d_model = 8;
    params.heads = 2;
    WeightSet w = make_weight_set(params, 77);

    FeatureMap cur = random_map(rng, 4, 4, 4);
    FeatureMap pri = random_map(rng, 4, 4, 4);

    FuseResult none = fuse(FuseStrategy::none, cur, pri, w, 0.5);
    EXPECT_EQ(none.refined.data, cur.data);
    EXPECT_EQ(none.new_prior.data, cur.data);
    EXPECT_FALSE(none.gate.has_value());

    FuseResult ma = fuse(FuseStrategy::ma, cur, pri, w, 0.5);
    EXPECT_EQ(ma.refined.data, ma.new_prior.data);
    EXPECT_FLOAT_EQ(ma.refined.at(1, 1, 0),
                    0.5f * cur.at(1, 1, 0) + 0.5f * pri.at(1, 1, 0));

    FuseResult gru = fuse(FuseStrategy::gru, cur, pri, w, 0.5);
    ASSERT_TRUE(gru.gate.has_value());
    EXPECT_EQ(gru.refined.data, gru.new_prior.data);

    // Empty prior: attention bypass makes gru_ca coincide with gru.
    FeatureMap empty(4, 4, 4, 0.0f, false);
    FuseResult a = fuse(FuseStrategy::gru, cur, empty, w, 0.5);
    FuseResult b = fuse(FuseStrategy::gru_ca, cur, empty, w, 0.5);
    EXPECT_EQ(a.refined.data, b.refined.data);

    EXPECT_THROW(parse_strategy("avg"), std::invalid_argument);
    EXPECT_EQ(parse_strategy("gru_ca"), FuseStrategy::gru_ca);
    EXPECT_STREQ(strategy_name(FuseStrategy::ma), "ma");
}

TEST(ClassEmbedding, OrthonormalRowsAndStability) {
    Matrix<float> e = class_embedding(8);
    ASSERT_EQ(e.rows, 4);
    ASSERT_EQ(e.cols, 8);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            double dot = 0.0;
            for (int c = 0; c < 8; ++c)
                dot += static_cast<double>(e.at(i, c)) * e.at(j, c);
            EXPECT_NEAR(dot, i == j ? 1.0 : 0.0, 1e-5);
        }
    Matrix<float> again = class_embedding(8);
    EXPECT_EQ(e.data, again.data);
    EXPECT_THROW(class_embedding(3), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    WeightSetParams params;
    params.channels = 4;
    params.bev_rows = 6;
    params.bev_cols = 4;
    params.patch_size = 2;
    params.d_model = 8;
    params.heads = 2;
    WeightSet w = make_weight_set(params, 123);

    const std::string bytes = serialize_weights(w);
    WeightSet r = deserialize_weights(bytes);
    EXPECT_EQ(r.gru.w_z.data, w.gru.w_z.data);
    EXPECT_EQ(r.gru.b_z, w.gru.b_z);
    EXPECT_EQ(r.gru.w_r.data, w.gru.w_r.data);
    EXPECT_EQ(r.gru.w_h.data, w.gru.w_h.data);
    EXPECT_EQ(r.attn.patch_size, w.attn.patch_size);
    EXPECT_EQ(r.attn.d_model, w.attn.d_model);
    EXPECT_EQ(r.attn.heads, w.attn.heads);
    EXPECT_EQ(r.attn.w_embed_q.data, w.attn.w_embed_q.data);
    EXPECT_EQ(r.attn.w_out.data, w.attn.w_out.data);
    EXPECT_EQ(r.attn.b_fc, w.attn.b_fc);
    EXPECT_EQ(r.pe.pe_current.data, w.pe.pe_current.data);
    EXPECT_EQ(r.pe.pe_prior.data, w.pe.pe_prior.data);
    EXPECT_EQ(r.embedding.data, w.embedding.data);

    // Serialization is deterministic.
    EXPECT_EQ(serialize_weights(r), bytes);

    const std::string path = testing::TempDir() + "nmp_ckpt_test.nmpw";
    save_weights(path, w);
    WeightSet loaded = load_weights(path);
    EXPECT_EQ(serialize_weights(loaded), bytes);
    std::remove(path.c_str());
}

TEST(Checkpoint, RejectsCorruptInput) {
    WeightSetParams params;
    params.channels = 4;
    params.bev_rows = 4;
    params.bev_cols = 4;
    params.patch_size = 2;
    params.d_model = 8;
    params.heads = 2;
    const std::string bytes = serialize_weights(make_weight_set(params, 5));

    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(deserialize_weights(bad_magic), std::runtime_error);

    std::string bad_version = bytes;
    bad_version[4] = 9;
    EXPECT_THROW(deserialize_weights(bad_version), std::runtime_error);

    EXPECT_THROW(deserialize_weights(bytes.substr(0, bytes.size() / 2)),
                 std::runtime_error);
    EXPECT_THROW(deserialize_weights(bytes.substr(0, 3)), std::runtime_error);
}
