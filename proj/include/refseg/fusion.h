// SPDX-License-Identifier: Apache-2.0

#ifndef REFSEG_FUSION_H
#define REFSEG_FUSION_H

#include <cmath>
#include <string>
#include <vector>

#include "refseg/blocks.h"

namespace refseg::model {

template <typename T>
struct ResBlock {
    ConvP<T> c1, c2;

    void build(ParamStore<T>& ps, const std::string& name, int ch, Rng& rng) {
        c1.build(ps, name + ".c1", ch, ch, 3, rng);
        c2.build(ps, name + ".c2", ch, ch, 3, rng);
    }

    int apply(Tape<T>& t, int x) const {
        return t.relu(t.add(x, c2.apply(t, t.relu(c1.apply(t, x)))));
    }
};

// Four strided conv stages behind a /2 stem: feature maps at /4 /8 /16 /32
// of the input resolution.
template <typename T>
struct Backbone {
    ConvP<T> stem;
    struct Stage {
        ConvP<T> down;
        ResBlock<T> res;
    };
    std::vector<Stage> stages;

    void build(ParamStore<T>& ps, const std::string& name, int stem_ch,
               const std::vector<int>& stage_ch, Rng& rng) {
        stem.build(ps, name + ".stem", stem_ch, 3, 3, rng, 2);
        stages.resize(stage_ch.size());
        int prev = stem_ch;
        for (size_t i = 0; i < stage_ch.size(); i++) {
            stages[i].down.build(ps, name + ".s" + std::to_string(i + 1) + ".down",
                                 stage_ch[i], prev, 3, rng, 2);
            stages[i].res.build(ps, name + ".s" + std::to_string(i + 1) + ".res", stage_ch[i], rng);
            prev = stage_ch[i];
        }
    }

    int apply_stem(Tape<T>& t, int image) const { return t.relu(stem.apply(t, image)); }

    int apply_stage(Tape<T>& t, int x, int n) const {
        const auto& s = stages[static_cast<size_t>(n)];
        return s.res.apply(t, t.relu(s.down.apply(t, x)));
    }
};

// One fusion step: regional cross-attention in both directions over the
// configured scales, learnable scale mixture, gated residual on both streams.
// The per-scale attention matrices are row-stochastic over the valid keys.
template <typename T>
struct FusionStage {
    // image direction: queries from V, keys/values from E, width = stage channels
    LinearP<T> wq_a, wk_a, wv_a;
    Param<T>* lambda_a = nullptr;
    Param<T>* gamma_v = nullptr;
    // text direction: queries from E, keys/values from V, width = text channels
    LinearP<T> wq_b, wk_b, wv_b;
    Param<T>* lambda_b = nullptr;
    Param<T>* gamma_e = nullptr;

    std::vector<int> window_sides; // image-side extents (1,3,5)
    std::vector<int> run_lengths;  // text-side run lengths (1,2,3)
    int v_channels = 0, e_channels = 0;

    void build(ParamStore<T>& ps, const std::string& name, int v_ch, int e_ch,
               std::vector<int> sides, std::vector<int> runs, Rng& rng) {
        v_channels = v_ch;
        e_channels = e_ch;
        window_sides = std::move(sides);
        run_lengths = std::move(runs);
        const int R = static_cast<int>(window_sides.size());
        wq_a.build(ps, name + ".a.wq", v_ch, v_ch, rng, false);
        wk_a.build(ps, name + ".a.wk", v_ch, e_ch, rng, false);
        wv_a.build(ps, name + ".a.wv", v_ch, e_ch, rng, false);
        lambda_a = &ps.create(name + ".a.lambda", {R});
        lambda_a->value.fill(T(1) / static_cast<T>(R));
        gamma_v = &ps.create(name + ".a.gamma", {v_ch});
        wq_b.build(ps, name + ".b.wq", e_ch, e_ch, rng, false);
        wk_b.build(ps, name + ".b.wk", e_ch, v_ch, rng, false);
        wv_b.build(ps, name + ".b.wv", e_ch, v_ch, rng, false);
        lambda_b = &ps.create(name + ".b.lambda", {R});
        lambda_b->value.fill(T(1) / static_cast<T>(R));
        gamma_e = &ps.create(name + ".b.gamma", {e_ch});
    }

    struct Out {
        int v_star = -1;
        int e_star = -1;
        // intermediates, exposed for the oracle comparisons
        std::vector<int> att_a_scales; // each (B,N,L), row-stochastic
        std::vector<int> att_b_scales; // each (B,L,N), zero rows for pads
        int att_a = -1, att_b = -1;    // lambda mixtures
        int aligned_a = -1;            // (B,N,C) pre-residual image update
        int aligned_b = -1;            // (B,L,Ce) pre-residual text update
    };

    // v (B,C,H,W), e (B,Ce,L); valid_len gives non-pad token counts.
    Out apply(Tape<T>& t, int v, int e, const std::vector<int>& valid_len) const {
        Out out;
        const int B = t.val(v).dim(0), H = t.val(v).dim(2), W = t.val(v).dim(3);
        const int L = t.val(e).dim(2);
        const int N = H * W;
        int vflat = t.reshape(v, {B, v_channels, N});

        // image direction: per-scale window-summed logits, softmax over tokens
        {
            int q = wq_a.apply_cl(t, vflat);                       // (B,C,N)
            int k = wk_a.apply_cl(t, e);                           // (B,C,L)
            int base = t.affine(t.bmm(q, k, true, false),
                                T(1) / std::sqrt(static_cast<T>(v_channels)), T(0)); // (B,N,L)
            std::vector<int> rows(static_cast<size_t>(B) * N);
            for (int b = 0; b < B; b++)
                std::fill(rows.begin() + static_cast<size_t>(b) * N,
                          rows.begin() + static_cast<size_t>(b + 1) * N,
                          valid_len[static_cast<size_t>(b)]);
            for (int side : window_sides)
                out.att_a_scales.push_back(
                    t.softmax_masked(t.window_sum(base, H, W, side), rows));
            out.att_a = t.scale_mix(out.att_a_scales, t.param(*lambda_a));
        }
        int vals_a = wv_a.apply_cl(t, e);                          // (B,C,L)
        out.aligned_a = t.bmm(out.att_a, vals_a, false, true);     // (B,N,C)
        int fused_a = t.transpose12(out.aligned_a);                // (B,C,N)
        out.v_star = t.gated_residual(v, t.reshape(fused_a, {B, v_channels, H, W}),
                                      t.param(*gamma_v));

        // text direction: run-summed logits, softmax over spatial positions;
        // pad rows come out exactly zero so pads are never updated
        {
            int q = wq_b.apply_cl(t, e);                           // (B,Ce,L)
            int k = wk_b.apply_cl(t, vflat);                       // (B,Ce,N)
            int base = t.affine(t.bmm(q, k, true, false),
                                T(1) / std::sqrt(static_cast<T>(e_channels)), T(0)); // (B,L,N)
            std::vector<int> rows(static_cast<size_t>(B) * L);
            for (int b = 0; b < B; b++)
                for (int i = 0; i < L; i++)
                    rows[static_cast<size_t>(b) * L + i] =
                        i < valid_len[static_cast<size_t>(b)] ? N : 0;
            for (int run : run_lengths)
                out.att_b_scales.push_back(
                    t.softmax_masked(t.run_sum(base, run, valid_len), rows));
            out.att_b = t.scale_mix(out.att_b_scales, t.param(*lambda_b));
        }
        int vals_b = wv_b.apply_cl(t, vflat);                      // (B,Ce,N)
        out.aligned_b = t.bmm(out.att_b, vals_b, false, true);     // (B,L,Ce)
        out.e_star = t.gated_residual(e, t.transpose12(out.aligned_b), t.param(*gamma_e));
        return out;
    }
};

// Single-scale cross-attention baseline (the point-to-point formulation):
// V* = softmax((WqV)^T (WkE) / sqrt(Chat)) (WvE)^T, returned as (B,N,Chat).
template <typename T>
int baseline_cross_attention(Tape<T>& t, int vflat, int e, const LinearP<T>& wq,
                             const LinearP<T>& wk, const LinearP<T>& wv,
                             const std::vector<int>& valid_len) {
    const int B = t.val(vflat).dim(0);
    const int chat = wq.w->value.dim(0);
    const int N = t.val(vflat).dim(2);
    int q = wq.apply_cl(t, vflat);
    int k = wk.apply_cl(t, e);
    int base = t.affine(t.bmm(q, k, true, false), T(1) / std::sqrt(static_cast<T>(chat)), T(0));
    std::vector<int> rows(static_cast<size_t>(B) * N);
    for (int b = 0; b < B; b++)
        std::fill(rows.begin() + static_cast<size_t>(b) * N,
                  rows.begin() + static_cast<size_t>(b + 1) * N, valid_len[static_cast<size_t>(b)]);
    int att = t.softmax_masked(base, std::move(rows));
    return t.bmm(att, wv.apply_cl(t, e), false, true);
}

} // namespace refseg::model

#endif // REFSEG_FUSION_H
