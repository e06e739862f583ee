// SPDX-License-Identifier: Apache-2.0

#ifndef REFSEG_BLOCKS_H
#define REFSEG_BLOCKS_H

#include <cmath>
#include <string>
#include <vector>

#include "refseg/autodiff.h"
#include "refseg/rng.h"

// Parameterized building blocks on top of the tape. Each struct owns pointers
// into a ParamStore; build() creates and initializes the parameters in a
// deterministic order.
namespace refseg::model {

using ad::Param;
using ad::ParamStore;
using ad::Tape;

template <typename T>
void init_normal(Param<T>& p, Rng& rng, double std) {
    for (auto& v : p.value.data) v = static_cast<T>(std * rng.normal());
}

template <typename T>
struct LinearP {
    Param<T>* w = nullptr;
    Param<T>* b = nullptr;

    void build(ParamStore<T>& ps, const std::string& name, int out, int in, Rng& rng,
               bool bias = true, double std = -1.0) {
        w = &ps.create(name + ".w", {out, in});
        init_normal(*w, rng, std > 0 ? std : std::sqrt(1.0 / in));
        if (bias) b = &ps.create(name + ".b", {out});
    }

    int apply_cl(Tape<T>& t, int x) const { // (B,in,L) -> (B,out,L)
        return t.linear_cl(x, t.param(*w), b ? t.param(*b) : -1);
    }
    int apply_rows(Tape<T>& t, int x) const { // (B,in) -> (B,out)
        return t.linear_rows(x, t.param(*w), b ? t.param(*b) : -1);
    }
};

template <typename T>
struct ConvP {
    Param<T>* w = nullptr;
    Param<T>* b = nullptr;
    int stride = 1, pad = 1;

    void build(ParamStore<T>& ps, const std::string& name, int out, int in, int k, Rng& rng,
               int stride_ = 1, int pad_ = -1, double gain = 2.0) {
        stride = stride_;
        pad = pad_ >= 0 ? pad_ : k / 2;
        w = &ps.create(name + ".w", {out, in, k, k});
        init_normal(*w, rng, std::sqrt(gain / (in * k * k)));
        b = &ps.create(name + ".b", {out});
    }

    int apply(Tape<T>& t, int x) const {
        return t.conv2d(x, t.param(*w), t.param(*b), stride, pad);
    }
};

template <typename T>
struct LayerNormP {
    Param<T>* g = nullptr;
    Param<T>* b = nullptr;

    void build(ParamStore<T>& ps, const std::string& name, int dim) {
        g = &ps.create(name + ".g", {dim});
        b = &ps.create(name + ".b", {dim});
        g->value.fill(T(1));
    }

    int apply(Tape<T>& t, int x) const { return t.layernorm_cl(x, t.param(*g), t.param(*b)); }
};

template <typename T>
struct InstanceNormP {
    Param<T>* g = nullptr;
    Param<T>* b = nullptr;

    void build(ParamStore<T>& ps, const std::string& name, int dim) {
        g = &ps.create(name + ".g", {dim});
        b = &ps.create(name + ".b", {dim});
        g->value.fill(T(1));
    }

    int apply(Tape<T>& t, int x) const { return t.instancenorm2d(x, t.param(*g), t.param(*b)); }
};

// Multi-head attention over channel-major token blocks (B,C,L). Heads are
// contiguous channel groups, so the per-head split is a free reshape.
template <typename T>
struct Mha {
    LinearP<T> wq, wk, wv, wo;
    int dim = 0, kv_dim = 0, heads = 1;

    void build(ParamStore<T>& ps, const std::string& name, int dim_, int kv_dim_, int heads_,
               Rng& rng) {
        dim = dim_;
        kv_dim = kv_dim_;
        heads = heads_;
        wq.build(ps, name + ".wq", dim, dim, rng);
        wk.build(ps, name + ".wk", dim, kv_dim, rng);
        wv.build(ps, name + ".wv", dim, kv_dim, rng);
        wo.build(ps, name + ".wo", dim, dim, rng);
    }

    // q_in (B,dim,Lq), kv_in (B,kv_dim,Lk); key_valid[b] = # of attendable keys.
    int apply(Tape<T>& t, int q_in, int kv_in, const std::vector<int>& key_valid) const {
        const int B = t.val(q_in).dim(0);
        const int Lq = t.val(q_in).dim(2);
        const int Lk = t.val(kv_in).dim(2);
        const int dh = dim / heads;
        int q = t.reshape(wq.apply_cl(t, q_in), {B * heads, dh, Lq});
        int k = t.reshape(wk.apply_cl(t, kv_in), {B * heads, dh, Lk});
        int v = t.reshape(wv.apply_cl(t, kv_in), {B * heads, dh, Lk});
        int logits = t.affine(t.bmm(q, k, true, false), T(1) / std::sqrt(static_cast<T>(dh)), T(0));
        std::vector<int> valid_rows(static_cast<size_t>(B) * heads * Lq);
        for (int b = 0; b < B; b++)
            std::fill(valid_rows.begin() + static_cast<size_t>(b) * heads * Lq,
                      valid_rows.begin() + static_cast<size_t>(b + 1) * heads * Lq,
                      key_valid[static_cast<size_t>(b)]);
        int p = t.softmax_masked(logits, std::move(valid_rows));
        int out = t.bmm(v, p, false, true); // (B*heads, dh, Lq)
        return wo.apply_cl(t, t.reshape(out, {B, dim, Lq}));
    }
};

template <typename T>
struct Ffn {
    LinearP<T> w1, w2;

    void build(ParamStore<T>& ps, const std::string& name, int dim, int hidden, Rng& rng) {
        w1.build(ps, name + ".w1", hidden, dim, rng, true, std::sqrt(2.0 / dim));
        w2.build(ps, name + ".w2", dim, hidden, rng);
    }

    int apply(Tape<T>& t, int x) const { return w2.apply_cl(t, t.relu(w1.apply_cl(t, x))); }
};

// Pre-norm self-attention encoder block.
template <typename T>
struct EncoderBlock {
    LayerNormP<T> ln1, ln2;
    Mha<T> attn;
    Ffn<T> ffn;

    void build(ParamStore<T>& ps, const std::string& name, int dim, int heads, int ffn_mult,
               Rng& rng) {
        ln1.build(ps, name + ".ln1", dim);
        attn.build(ps, name + ".attn", dim, dim, heads, rng);
        ln2.build(ps, name + ".ln2", dim);
        ffn.build(ps, name + ".ffn", dim, dim * ffn_mult, rng);
    }

    int apply(Tape<T>& t, int x, const std::vector<int>& key_valid) const {
        int h = ln1.apply(t, x);
        x = t.add(x, attn.apply(t, h, h, key_valid));
        x = t.add(x, ffn.apply(t, ln2.apply(t, x)));
        return x;
    }
};

// Pre-norm transformer decoder layer: self-attention, cross-attention to a
// memory sequence, feed-forward; residual around each.
template <typename T>
struct DecoderLayer {
    LayerNormP<T> ln1, ln2, ln3;
    Mha<T> self_attn, cross_attn;
    Ffn<T> ffn;

    void build(ParamStore<T>& ps, const std::string& name, int dim, int mem_dim, int heads,
               int ffn_mult, Rng& rng) {
        ln1.build(ps, name + ".ln1", dim);
        self_attn.build(ps, name + ".self", dim, dim, heads, rng);
        ln2.build(ps, name + ".ln2", dim);
        cross_attn.build(ps, name + ".cross", dim, mem_dim, heads, rng);
        ln3.build(ps, name + ".ln3", dim);
        ffn.build(ps, name + ".ffn", dim, dim * ffn_mult, rng);
    }

    int apply(Tape<T>& t, int x, int mem, const std::vector<int>& self_valid,
              const std::vector<int>& mem_valid) const {
        int h = ln1.apply(t, x);
        x = t.add(x, self_attn.apply(t, h, h, self_valid));
        x = t.add(x, cross_attn.apply(t, ln2.apply(t, x), mem, mem_valid));
        x = t.add(x, ffn.apply(t, ln3.apply(t, x)));
        return x;
    }
};

} // namespace refseg::model

#endif // REFSEG_BLOCKS_H
