// SPDX-License-Identifier: Apache-2.0

#ifndef REFSEG_DECODERS_H
#define REFSEG_DECODERS_H

#include <string>
#include <vector>

#include "refseg/blocks.h"

namespace refseg::model {

// Skip merge: upsample the coarser decoder feature x2, concatenate the
// encoder skip, then conv3x3 -> norm -> ReLU twice. Normalization uses
// per-sample spatial statistics so train and eval forwards coincide.
template <typename T>
struct MergeSkip {
    ConvP<T> c1, c2;
    InstanceNormP<T> bn1, bn2;

    void build(ParamStore<T>& ps, const std::string& name, int out, int in_decoder, int in_skip,
               Rng& rng) {
        c1.build(ps, name + ".c1", out, in_decoder + in_skip, 3, rng);
        bn1.build(ps, name + ".bn1", out);
        c2.build(ps, name + ".c2", out, out, 3, rng);
        bn2.build(ps, name + ".bn2", out);
    }

    int apply(Tape<T>& t, int y_next, int skip) const {
        const int Ho = t.val(skip).dim(2), Wo = t.val(skip).dim(3);
        int up = t.bilinear(y_next, Ho, Wo);
        int h = t.relu(bn1.apply(t, c1.apply(t, t.concat_c1(up, skip))));
        return t.relu(bn2.apply(t, c2.apply(t, h)));
    }
};

// Two 3x3 conv + ReLU stages, then 1x1 conv to the two class score maps.
template <typename T>
struct PredictionHead {
    ConvP<T> c1, c2, c3;

    void build(ParamStore<T>& ps, const std::string& name, int in, int mid, Rng& rng) {
        c1.build(ps, name + ".c1", mid, in, 3, rng);
        c2.build(ps, name + ".c2", mid, mid, 3, rng);
        c3.build(ps, name + ".c3", 2, mid, 1, rng, 1, 0, 1.0);
        // start from the empty-mask prior: background favored everywhere
        c3.b->value.data = {T(1), T(-1)};
    }

    int apply(Tape<T>& t, int y2) const {
        int h = t.relu(c1.apply(t, y2));
        h = t.relu(c2.apply(t, h));
        return c3.apply(t, h); // (B,2,h,w) logits
    }
};

// Contrastive pooling: project the three decoder features to a shared width,
// resize onto the middle grid, sum, pool, project, normalize. The text side
// pools the refined embedding over valid tokens.
template <typename T>
struct PooledPair {
    ConvP<T> p4, p3, p2; // 1x1 projections of the decoder features
    LinearP<T> proj_v, proj_e;
    int dim = 0;

    void build(ParamStore<T>& ps, const std::string& name, int c4, int c3_, int c2_, int text_ch,
               int dim_, Rng& rng) {
        dim = dim_;
        p4.build(ps, name + ".p4", dim, c4, 1, rng, 1, 0, 1.0);
        p3.build(ps, name + ".p3", dim, c3_, 1, rng, 1, 0, 1.0);
        p2.build(ps, name + ".p2", dim, c2_, 1, rng, 1, 0, 1.0);
        proj_v.build(ps, name + ".proj_v", dim, dim, rng);
        proj_e.build(ps, name + ".proj_e", dim, text_ch, rng);
    }

    struct Out {
        int v_aggregate; // (B,dim,h3,w3) pre-pool decoder aggregate
        int v_o;         // (B,dim) unit rows
        int e_o;         // (B,dim) unit rows
    };

    Out apply(Tape<T>& t, int y4, int y3, int y2, int e_star4,
              const std::vector<int>& valid_len) const {
        const int h3 = t.val(y3).dim(2), w3 = t.val(y3).dim(3);
        int agg = t.add(t.bilinear(p4.apply(t, y4), h3, w3), p3.apply(t, y3));
        agg = t.add(agg, t.bilinear(p2.apply(t, y2), h3, w3));
        int v_o = t.l2_normalize_rows(proj_v.apply_rows(t, t.mean_pool_hw(agg)));
        int e_o = t.l2_normalize_rows(
            proj_e.apply_rows(t, t.mean_pool_valid(e_star4, valid_len)));
        return {agg, v_o, e_o};
    }
};

// ---- loss builders ----

// Reconstruction similarity: pooled cosine between the recovered embedding
// and the (gradient-stopped) refined text embedding, gated per sample.
template <typename T>
int loss_sim(Tape<T>& t, int e_hat, int e_star4, const std::vector<int>& valid_len,
             const std::vector<T>& delta) {
    int pooled_hat = t.mean_pool_valid(e_hat, valid_len);
    int pooled_ref = t.detach(t.mean_pool_valid(e_star4, valid_len));
    int cos = t.cosine_rows(pooled_ref, pooled_hat);
    return t.delta_mean(t.affine(cos, T(-1), T(1)), delta);
}

// Symmetric InfoNCE over the pooled pair. Gated samples keep their row in
// every denominator but contribute no numerator term.
template <typename T>
int loss_con(Tape<T>& t, int v_o, int e_o, const std::vector<T>& delta, T temperature) {
    if (temperature <= T(0)) throw std::invalid_argument("loss_con: temperature must be positive");
    int sim = t.affine(t.matmul2d(v_o, e_o, false, true), T(1) / temperature, T(0)); // (B,B)
    int d = t.diag(sim);
    int i2t = t.delta_mean(t.sub(t.logsumexp_rows(sim), d), delta);
    int t2i = t.delta_mean(t.sub(t.logsumexp_cols(sim), d), delta);
    return t.add(i2t, t2i);
}

} // namespace refseg::model

#endif // REFSEG_DECODERS_H
