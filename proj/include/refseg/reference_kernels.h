// SPDX-License-Identifier: Apache-2.0

#ifndef REFSEG_REFERENCE_KERNELS_H
#define REFSEG_REFERENCE_KERNELS_H

#include <cmath>
#include <vector>

#include "refseg/tensor.h"

// Serial, loop-literal reference implementations. These stay deliberately
// independent from kernels.h / the tape ops: tests and the benchmark compare
// the fast path against them. Do not "optimize" them.
namespace refseg::refk {

template <typename T>
Tensor<T> matmul_naive(const Tensor<T>& a, const Tensor<T>& b) {
    const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
    Tensor<T> c({M, N});
    for (int i = 0; i < M; i++)
        for (int j = 0; j < N; j++) {
            T acc = T(0);
            for (int k = 0; k < K; k++) acc += a(i, k) * b(k, j);
            c(i, j) = acc;
        }
    return c;
}

template <typename T>
Tensor<T> conv2d_naive(const Tensor<T>& x, const Tensor<T>& w, const std::vector<T>& bias,
                       int stride, int pad) {
    const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    Tensor<T> y({B, Cout, Ho, Wo});
    for (int b = 0; b < B; b++)
        for (int oc = 0; oc < Cout; oc++)
            for (int oy = 0; oy < Ho; oy++)
                for (int ox = 0; ox < Wo; ox++) {
                    T acc = bias.empty() ? T(0) : bias[oc];
                    for (int ic = 0; ic < Cin; ic++)
                        for (int ky = 0; ky < kh; ky++)
                            for (int kx = 0; kx < kw; kx++) {
                                const int iy = oy * stride - pad + ky;
                                const int ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += w(oc, ic, ky, kx) * x(b, ic, iy, ix);
                            }
                    y(b, oc, oy, ox) = acc;
                }
    return y;
}

// ---- cross-modal attention reference (single sample, no batch dim) ----
//
// Layouts: V is (Cv,H,W), E is (Ce,L). Projections are plain matrices
// (rows = output channels). valid = number of real (non-pad) tokens.

template <typename T>
Tensor<T> project_naive(const Tensor<T>& w, const Tensor<T>& x2d) {
    // w(Co,Ci) * x(Ci,M) -> (Co,M)
    return matmul_naive(w, x2d);
}

template <typename T>
Tensor<T> flatten_spatial(const Tensor<T>& v) {
    return v.reshaped({v.dim(0), v.dim(1) * v.dim(2)});
}

// Plain single-scale cross-attention: rows softmax((WqV)^T (WkE) / sqrt(Chat))
// over valid tokens, then (WvE)^T rows. Returns V* as (N, Chat).
template <typename T>
Tensor<T> baseline_cross_attention_naive(const Tensor<T>& v, const Tensor<T>& e,
                                         const Tensor<T>& wq, const Tensor<T>& wk,
                                         const Tensor<T>& wv, int valid) {
    const int chat = wq.dim(0);
    Tensor<T> q = project_naive(wq, flatten_spatial(v)); // (Chat,N)
    Tensor<T> k = project_naive(wk, e);                  // (Chat,L)
    Tensor<T> val = project_naive(wv, e);                // (Chat,L)
    const int N = q.dim(1), L = k.dim(1);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(chat));
    Tensor<T> out({N, chat});
    for (int i = 0; i < N; i++) {
        std::vector<T> row(L, T(0));
        for (int l = 0; l < valid; l++) {
            T acc = T(0);
            for (int c = 0; c < chat; c++) acc += q(c, i) * k(c, l);
            row[l] = acc * inv_sqrt;
        }
        T denom = T(0);
        for (int l = 0; l < valid; l++) denom += std::exp(row[l]);
        for (int l = 0; l < L; l++) {
            const T p = (l < valid) ? std::exp(row[l]) / denom : T(0);
            for (int c = 0; c < chat; c++) out(i, c) += p * val(c, l);
        }
    }
    return out;
}

// Attention weights for one spatial scale: logits of row i are summed over a
// centered side x side window clipped to the image, then softmaxed over the
// valid tokens. Returns (N,L).
template <typename T>
Tensor<T> region_rows_alpha_naive(const Tensor<T>& v, const Tensor<T>& e,
                                  const Tensor<T>& wq, const Tensor<T>& wk,
                                  int side, int valid) {
    const int chat = wq.dim(0);
    const int H = v.dim(1), W = v.dim(2);
    Tensor<T> q = project_naive(wq, flatten_spatial(v)); // (Chat,N)
    Tensor<T> k = project_naive(wk, e);                  // (Chat,L)
    const int N = H * W, L = e.dim(1);
    const int half = side / 2;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(chat));
    Tensor<T> att({N, L});
    for (int cy = 0; cy < H; cy++)
        for (int cx = 0; cx < W; cx++) {
            const int i = cy * W + cx;
            std::vector<T> row(L, T(0));
            for (int l = 0; l < valid; l++) {
                T acc = T(0);
                for (int my = cy - half; my <= cy + half; my++)
                    for (int mx = cx - half; mx <= cx + half; mx++) {
                        if (my < 0 || my >= H || mx < 0 || mx >= W) continue;
                        const int m = my * W + mx;
                        for (int c = 0; c < chat; c++) acc += q(c, m) * k(c, l);
                    }
                row[l] = acc * inv_sqrt;
            }
            T denom = T(0);
            for (int l = 0; l < valid; l++) denom += std::exp(row[l]);
            for (int l = 0; l < valid; l++) att(i, l) = std::exp(row[l]) / denom;
        }
    return att;
}

// Attention weights for one token-run scale: logits of row i are summed over
// tokens [i, i+run) clipped at the sentence end; pads are excluded both as
// run members and as rows. Returns (L,N) with zero rows for pads.
template <typename T>
Tensor<T> region_rows_beta_naive(const Tensor<T>& e, const Tensor<T>& v,
                                 const Tensor<T>& wq, const Tensor<T>& wk,
                                 int run, int valid) {
    const int chat = wq.dim(0);
    Tensor<T> q = project_naive(wq, e);                  // (Chat,L)
    Tensor<T> k = project_naive(wk, flatten_spatial(v)); // (Chat,N)
    const int L = e.dim(1), N = k.dim(1);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(chat));
    Tensor<T> att({L, N});
    for (int i = 0; i < valid; i++) {
        std::vector<T> row(N, T(0));
        for (int n = 0; n < N; n++) {
            T acc = T(0);
            for (int m = i; m < std::min(i + run, valid); m++)
                for (int c = 0; c < chat; c++) acc += q(c, m) * k(c, n);
            row[n] = acc * inv_sqrt;
        }
        T denom = T(0);
        for (int n = 0; n < N; n++) denom += std::exp(row[n]);
        for (int n = 0; n < N; n++) att(i, n) = std::exp(row[n]) / denom;
    }
    return att;
}

template <typename T>
Tensor<T> mix_scales_naive(const std::vector<Tensor<T>>& per_scale, const std::vector<T>& lambda) {
    Tensor<T> out(per_scale[0].shape, T(0));
    for (size_t r = 0; r < per_scale.size(); r++)
        for (int64_t i = 0; i < out.numel(); i++) out.data[i] += lambda[r] * per_scale[r].data[i];
    return out;
}

// att(rows,cols) * (Wv other)(chat,cols)^T -> (rows,chat)
template <typename T>
Tensor<T> apply_alignment_naive(const Tensor<T>& att, const Tensor<T>& wv, const Tensor<T>& other2d) {
    Tensor<T> vals = project_naive(wv, other2d);
    const int rows = att.dim(0), cols = att.dim(1), chat = vals.dim(0);
    Tensor<T> out({rows, chat});
    for (int i = 0; i < rows; i++)
        for (int c = 0; c < chat; c++) {
            T acc = T(0);
            for (int j = 0; j < cols; j++) acc += att(i, j) * vals(c, j);
            out(i, c) = acc;
        }
    return out;
}

struct MbaWeightsRef {
    // direction alpha: queries from V, keys/values from E, output width = Cv
    Tensord wq_a, wk_a, wv_a;
    // direction beta: queries from E, keys/values from V, output width = Ce
    Tensord wq_b, wk_b, wv_b;
    std::vector<double> lambda_a, lambda_b;
    std::vector<double> gamma_v, gamma_e; // per-channel fusion gates
    std::vector<int> alpha_sides;         // window sides, e.g. 1,3,5
    std::vector<int> beta_runs;           // run lengths, e.g. 1,2,3
};

// One full fusion step on a single sample: both directions over all scales,
// scale mixture, alignment, gated residual. Reference for the fast path.
template <typename T = double>
void mba_step_naive(const Tensord& v, const Tensord& e, const MbaWeightsRef& w, int valid,
                    Tensord& v_out, Tensord& e_out) {
    const int Cv = v.dim(0), H = v.dim(1), W = v.dim(2);
    const int Ce = e.dim(0), L = e.dim(1);
    std::vector<Tensord> alpha_scales, beta_scales;
    for (int side : w.alpha_sides)
        alpha_scales.push_back(region_rows_alpha_naive(v, e, w.wq_a, w.wk_a, side, valid));
    for (int run : w.beta_runs)
        beta_scales.push_back(region_rows_beta_naive(e, v, w.wq_b, w.wk_b, run, valid));
    Tensord att_a = mix_scales_naive(alpha_scales, w.lambda_a);
    Tensord att_b = mix_scales_naive(beta_scales, w.lambda_b);
    Tensord va = apply_alignment_naive(att_a, w.wv_a, e);                  // (N,Cv)
    Tensord eb = apply_alignment_naive(att_b, w.wv_b, flatten_spatial(v)); // (L,Ce)
    v_out = v;
    for (int c = 0; c < Cv; c++)
        for (int y = 0; y < H; y++)
            for (int x = 0; x < W; x++)
                v_out(c, y, x) += w.gamma_v[static_cast<size_t>(c)] * va(y * W + x, c);
    e_out = e;
    for (int c = 0; c < Ce; c++)
        for (int l = 0; l < L; l++)
            e_out(c, l) += w.gamma_e[static_cast<size_t>(c)] * eb(l, c);
}

} // namespace refseg::refk

#endif // REFSEG_REFERENCE_KERNELS_H
