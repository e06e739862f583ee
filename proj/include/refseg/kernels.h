// SPDX-License-Identifier: Apache-2.0

#ifndef REFSEG_KERNELS_H
#define REFSEG_KERNELS_H

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "refseg/tensor.h"

// OpenMP kernels backing the model. Every parallel loop writes a disjoint
// output range and keeps accumulation serial within one thread, so results
// are bit-identical no matter how many threads run. The serial counterparts
// used as test oracles live in reference_kernels.h.
namespace refseg::kern {

template <typename T>
void transpose2d(const T* src, T* dst, int rows, int cols) {
    // src (rows,cols) -> dst (cols,rows)
    for (int i = 0; i < rows; i++)
        for (int j = 0; j < cols; j++)
            dst[static_cast<size_t>(j) * rows + i] = src[static_cast<size_t>(i) * cols + j];
}

// C(M,N) = (or +=) opA(A) * opB(B). A is MxK after opA, B is KxN after opB.
// Transposed layouts are materialized once up front: the strided-column
// walks they would otherwise cause miss cache on every element.
template <typename T>
void matmul(const T* A, const T* B, T* C, int M, int N, int K,
            bool transA, bool transB, bool accumulate) {
    if (transA) {
        std::vector<T> at(static_cast<size_t>(M) * K);
        transpose2d(A, at.data(), K, M);
        matmul(at.data(), B, C, M, N, K, false, transB, accumulate);
        return;
    }
    // pick the form whose inner loop is long enough to vectorize
    if (!transB && N < 16 && K >= 32) {
        std::vector<T> bt(static_cast<size_t>(N) * K);
        transpose2d(B, bt.data(), K, N);
        matmul(A, bt.data(), C, M, N, K, false, true, accumulate);
        return;
    }
    if (transB && K < 16 && N >= 32) {
        std::vector<T> bn(static_cast<size_t>(K) * N);
        transpose2d(B, bn.data(), N, K);
        matmul(A, bn.data(), C, M, N, K, false, false, accumulate);
        return;
    }
    if (!accumulate) std::fill(C, C + static_cast<size_t>(M) * N, T(0));
    if (!transB) {
        #pragma omp parallel for
        for (int i = 0; i < M; i++) {
            T* __restrict__ crow = C + static_cast<size_t>(i) * N;
            const T* arow = A + static_cast<size_t>(i) * K;
            for (int k = 0; k < K; k++) {
                const T a = arow[k];
                if (a == T(0)) continue;
                const T* __restrict__ brow = B + static_cast<size_t>(k) * N;
                for (int j = 0; j < N; j++) crow[j] += a * brow[j];
            }
        }
    } else if (K >= 32) {
        // B stored NxK; vectorized dots of contiguous rows.
        #pragma omp parallel for
        for (int i = 0; i < M; i++) {
            const T* __restrict__ arow = A + static_cast<size_t>(i) * K;
            T* crow = C + static_cast<size_t>(i) * N;
            for (int j = 0; j < N; j++) {
                const T* __restrict__ brow = B + static_cast<size_t>(j) * K;
                T acc = T(0);
                #pragma omp simd reduction(+ : acc)
                for (int k = 0; k < K; k++) acc += arow[k] * brow[k];
                crow[j] += acc;
            }
        }
    } else {
        // short dots: plain scalar loop, simd setup would dominate
        #pragma omp parallel for
        for (int i = 0; i < M; i++) {
            const T* arow = A + static_cast<size_t>(i) * K;
            T* crow = C + static_cast<size_t>(i) * N;
            for (int j = 0; j < N; j++) {
                const T* brow = B + static_cast<size_t>(j) * K;
                T acc = T(0);
                for (int k = 0; k < K; k++) acc += arow[k] * brow[k];
                crow[j] += acc;
            }
        }
    }
}

// Grouped matmul: G independent (M,K)x(K,N) products, parallel over groups.
template <typename T>
void bmm(const T* A, const T* B, T* C, int G, int M, int N, int K,
         bool transA, bool transB, bool accumulate) {
    const size_t sa = static_cast<size_t>(M) * K;
    const size_t sb = static_cast<size_t>(K) * N;
    const size_t sc = static_cast<size_t>(M) * N;
    #pragma omp parallel for
    for (int g = 0; g < G; g++) {
        const T* a = A + g * sa;
        const T* b = B + g * sb;
        T* c = C + g * sc;
        if (!accumulate) std::fill(c, c + sc, T(0));
        if (!transA && !transB) {
            for (int i = 0; i < M; i++)
                for (int k = 0; k < K; k++) {
                    const T av = a[static_cast<size_t>(i) * K + k];
                    const T* brow = b + static_cast<size_t>(k) * N;
                    T* crow = c + static_cast<size_t>(i) * N;
                    for (int j = 0; j < N; j++) crow[j] += av * brow[j];
                }
        } else if (!transA && transB) {
            if (K >= 32) {
                for (int i = 0; i < M; i++)
                    for (int j = 0; j < N; j++) {
                        const T* __restrict__ ar = a + static_cast<size_t>(i) * K;
                        const T* __restrict__ br = b + static_cast<size_t>(j) * K;
                        T acc = T(0);
                        #pragma omp simd reduction(+ : acc)
                        for (int k = 0; k < K; k++) acc += ar[k] * br[k];
                        c[static_cast<size_t>(i) * N + j] += acc;
                    }
            } else {
                for (int i = 0; i < M; i++)
                    for (int j = 0; j < N; j++) {
                        const T* ar = a + static_cast<size_t>(i) * K;
                        const T* br = b + static_cast<size_t>(j) * K;
                        T acc = T(0);
                        for (int k = 0; k < K; k++) acc += ar[k] * br[k];
                        c[static_cast<size_t>(i) * N + j] += acc;
                    }
            }
        } else if (transA && !transB) {
            for (int k = 0; k < K; k++)
                for (int i = 0; i < M; i++) {
                    const T av = a[static_cast<size_t>(k) * M + i];
                    const T* brow = b + static_cast<size_t>(k) * N;
                    T* crow = c + static_cast<size_t>(i) * N;
                    for (int j = 0; j < N; j++) crow[j] += av * brow[j];
                }
        } else {
            for (int i = 0; i < M; i++)
                for (int j = 0; j < N; j++) {
                    const T* br = b + static_cast<size_t>(j) * K;
                    T acc = T(0);
                    for (int k = 0; k < K; k++) acc += a[static_cast<size_t>(k) * M + i] * br[k];
                    c[static_cast<size_t>(i) * N + j] += acc;
                }
        }
    }
}

// im2col for one image: x(C,H,W) -> col(C*kh*kw, Ho*Wo). Stride 1 copies
// contiguous row spans; the general path falls back to per-element taps.
template <typename T>
void im2col(const T* x, T* col, int C, int H, int W,
            int kh, int kw, int stride, int pad, int Ho, int Wo) {
    const int cols = Ho * Wo;
    for (int c = 0; c < C; c++) {
        for (int ky = 0; ky < kh; ky++) {
            for (int kx = 0; kx < kw; kx++) {
                T* dst = col + (static_cast<size_t>(c) * kh * kw + ky * kw + kx) * cols;
                if (stride == 1) {
                    const int dxo = kx - pad;
                    const int x0 = std::max(0, -dxo);
                    const int x1 = std::min(Wo, W - dxo);
                    for (int oy = 0; oy < Ho; oy++) {
                        const int iy = oy - pad + ky;
                        T* drow = dst + static_cast<size_t>(oy) * Wo;
                        if (iy < 0 || iy >= H || x0 >= x1) {
                            std::fill(drow, drow + Wo, T(0));
                            continue;
                        }
                        const T* src = x + (static_cast<size_t>(c) * H + iy) * W;
                        std::fill(drow, drow + x0, T(0));
                        std::copy(src + x0 + dxo, src + x1 + dxo, drow + x0);
                        std::fill(drow + x1, drow + Wo, T(0));
                    }
                    continue;
                }
                for (int oy = 0; oy < Ho; oy++) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst + oy * Wo, dst + (oy + 1) * Wo, T(0));
                        continue;
                    }
                    const T* src = x + (static_cast<size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ox++) {
                        const int ix = ox * stride - pad + kx;
                        dst[oy * Wo + ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

// Transpose of im2col: scatter-add col back into the image gradient.
template <typename T>
void col2im_add(const T* col, T* x, int C, int H, int W,
                int kh, int kw, int stride, int pad, int Ho, int Wo) {
    const int cols = Ho * Wo;
    for (int c = 0; c < C; c++) {
        for (int ky = 0; ky < kh; ky++) {
            for (int kx = 0; kx < kw; kx++) {
                const T* src = col + (static_cast<size_t>(c) * kh * kw + ky * kw + kx) * cols;
                if (stride == 1) {
                    const int dxo = kx - pad;
                    const int x0 = std::max(0, -dxo);
                    const int x1 = std::min(Wo, W - dxo);
                    if (x0 >= x1) continue;
                    for (int oy = 0; oy < Ho; oy++) {
                        const int iy = oy - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        T* __restrict__ dst = x + (static_cast<size_t>(c) * H + iy) * W + dxo;
                        const T* __restrict__ srow = src + static_cast<size_t>(oy) * Wo;
                        for (int ox = x0; ox < x1; ox++) dst[ox] += srow[ox];
                    }
                    continue;
                }
                for (int oy = 0; oy < Ho; oy++) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    T* dst = x + (static_cast<size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ox++) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) dst[ix] += src[oy * Wo + ox];
                    }
                }
            }
        }
    }
}

inline int conv_out_size(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// y(B,Cout,Ho,Wo) = w(Cout,Cin,kh,kw) * x(B,Cin,H,W) + bias
template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const T* bias, int stride, int pad,
                    Tensor<T>& y) {
    const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int Ho = conv_out_size(H, kh, stride, pad);
    const int Wo = conv_out_size(W, kw, stride, pad);
    y = Tensor<T>({B, Cout, Ho, Wo});
    const int K = Cin * kh * kw;
    const int Npix = Ho * Wo;
    #pragma omp parallel
    {
        std::vector<T> col(static_cast<size_t>(K) * Npix);
        #pragma omp for
        for (int b = 0; b < B; b++) {
            im2col(x.ptr() + static_cast<size_t>(b) * Cin * H * W, col.data(),
                   Cin, H, W, kh, kw, stride, pad, Ho, Wo);
            T* yb = y.ptr() + static_cast<size_t>(b) * Cout * Npix;
            // serial matmul here; parallelism is over the batch
            matmul(w.ptr(), col.data(), yb, Cout, Npix, K, false, false, false);
            if (bias)
                for (int oc = 0; oc < Cout; oc++) {
                    T* yrow = yb + static_cast<size_t>(oc) * Npix;
                    const T bv = bias[oc];
                    for (int p = 0; p < Npix; p++) yrow[p] += bv;
                }
        }
    }
}

// Gradients for conv2d. dx parallelizes over the batch (disjoint planes).
// dw/db accumulate per fixed batch chunk and reduce the chunks in index
// order, so the sums come out bit-identical for any thread count.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad,
                     const Tensor<T>& dy, Tensor<T>* dx, Tensor<T>* dw, T* db) {
    const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int Ho = dy.dim(2), Wo = dy.dim(3);
    const int K = Cin * kh * kw;
    const int Npix = Ho * Wo;
    if (dx) {
        std::vector<T> wt(static_cast<size_t>(K) * Cout); // shared across the batch
        transpose2d(w.ptr(), wt.data(), Cout, K);
        #pragma omp parallel
        {
            std::vector<T> dcol(static_cast<size_t>(K) * Npix);
            #pragma omp for
            for (int b = 0; b < B; b++) {
                const T* dyb = dy.ptr() + static_cast<size_t>(b) * Cout * Npix;
                // dcol(K,Npix) = w^T(K,Cout) * dy_b(Cout,Npix); nested parallel
                // regions are inactive, so the inner matmul runs serially here
                matmul(wt.data(), dyb, dcol.data(), K, Npix, Cout, false, false, false);
                col2im_add(dcol.data(), dx->ptr() + static_cast<size_t>(b) * Cin * H * W,
                           Cin, H, W, kh, kw, stride, pad, Ho, Wo);
            }
        }
    }
    if (dw || db) {
        const int chunks = std::min(B, 4);
        std::vector<std::vector<T>> dw_parts(static_cast<size_t>(chunks));
        std::vector<std::vector<T>> db_parts(static_cast<size_t>(chunks));
        #pragma omp parallel for
        for (int c = 0; c < chunks; c++) {
            const int b0 = B * c / chunks, b1 = B * (c + 1) / chunks;
            if (dw) dw_parts[static_cast<size_t>(c)].assign(static_cast<size_t>(Cout) * K, T(0));
            if (db) db_parts[static_cast<size_t>(c)].assign(static_cast<size_t>(Cout), T(0));
            std::vector<T> col(dw ? static_cast<size_t>(K) * Npix : 0);
            for (int b = b0; b < b1; b++) {
                const T* dyb = dy.ptr() + static_cast<size_t>(b) * Cout * Npix;
                if (dw) {
                    im2col(x.ptr() + static_cast<size_t>(b) * Cin * H * W, col.data(),
                           Cin, H, W, kh, kw, stride, pad, Ho, Wo);
                    // dw_c(Cout,K) += dy_b(Cout,Npix) * col^T(Npix,K)
                    matmul(dyb, col.data(), dw_parts[static_cast<size_t>(c)].data(),
                           Cout, K, Npix, false, true, true);
                }
                if (db) {
                    for (int oc = 0; oc < Cout; oc++) {
                        const T* row = dyb + static_cast<size_t>(oc) * Npix;
                        T acc = T(0);
                        for (int p = 0; p < Npix; p++) acc += row[p];
                        db_parts[static_cast<size_t>(c)][static_cast<size_t>(oc)] += acc;
                    }
                }
            }
        }
        for (int c = 0; c < chunks; c++) {
            if (dw)
                for (size_t i = 0; i < dw_parts[static_cast<size_t>(c)].size(); i++)
                    dw->data[i] += dw_parts[static_cast<size_t>(c)][i];
            if (db)
                for (int oc = 0; oc < Cout; oc++)
                    db[oc] += db_parts[static_cast<size_t>(c)][static_cast<size_t>(oc)];
        }
    }
}

// Bilinear resize with half-pixel centers, NCHW. Linear map, so the backward
// is the exact transpose (scatter of the same four taps).
template <typename T>
void bilinear_taps(int out, int in, int o, int* i0, int* i1, T* w1) {
    T pos = (static_cast<T>(o) + T(0.5)) * static_cast<T>(in) / static_cast<T>(out) - T(0.5);
    if (pos < T(0)) pos = T(0);
    T f = std::floor(pos);
    *i0 = static_cast<int>(f);
    *i1 = std::min(*i0 + 1, in - 1);
    if (*i0 >= in) *i0 = in - 1;
    *w1 = pos - f;
    if (*i1 == *i0) *w1 = T(0);
}

template <typename T>
void bilinear_forward(const Tensor<T>& x, int Ho, int Wo, Tensor<T>& y) {
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    y = Tensor<T>({B, C, Ho, Wo});
    const int planes = B * C;
    #pragma omp parallel for
    for (int p = 0; p < planes; p++) {
        const T* xp = x.ptr() + static_cast<size_t>(p) * H * W;
        T* yp = y.ptr() + static_cast<size_t>(p) * Ho * Wo;
        for (int oy = 0; oy < Ho; oy++) {
            int y0, y1;
            T wy;
            bilinear_taps<T>(Ho, H, oy, &y0, &y1, &wy);
            for (int ox = 0; ox < Wo; ox++) {
                int x0, x1;
                T wx;
                bilinear_taps<T>(Wo, W, ox, &x0, &x1, &wx);
                const T v00 = xp[y0 * W + x0], v01 = xp[y0 * W + x1];
                const T v10 = xp[y1 * W + x0], v11 = xp[y1 * W + x1];
                yp[oy * Wo + ox] = (T(1) - wy) * ((T(1) - wx) * v00 + wx * v01) +
                                   wy * ((T(1) - wx) * v10 + wx * v11);
            }
        }
    }
}

template <typename T>
void bilinear_backward(const Tensor<T>& dy, int H, int W, Tensor<T>& dx_accum) {
    const int B = dy.dim(0), C = dy.dim(1), Ho = dy.dim(2), Wo = dy.dim(3);
    const int planes = B * C;
    #pragma omp parallel for
    for (int p = 0; p < planes; p++) {
        const T* dyp = dy.ptr() + static_cast<size_t>(p) * Ho * Wo;
        T* dxp = dx_accum.ptr() + static_cast<size_t>(p) * H * W;
        for (int oy = 0; oy < Ho; oy++) {
            int y0, y1;
            T wy;
            bilinear_taps<T>(Ho, H, oy, &y0, &y1, &wy);
            for (int ox = 0; ox < Wo; ox++) {
                int x0, x1;
                T wx;
                bilinear_taps<T>(Wo, W, ox, &x0, &x1, &wx);
                const T g = dyp[oy * Wo + ox];
                dxp[y0 * W + x0] += (T(1) - wy) * (T(1) - wx) * g;
                dxp[y0 * W + x1] += (T(1) - wy) * wx * g;
                dxp[y1 * W + x0] += wy * (T(1) - wx) * g;
                dxp[y1 * W + x1] += wy * wx * g;
            }
        }
    }
}

// Row softmax over the last dim with a per-row count of valid columns.
// Columns >= valid get probability exactly 0 (minus-infinity logits).
// Rows listed with valid == 0 are left all-zero.
template <typename T>
void softmax_rows_masked(const T* x, T* y, int rows, int cols, const int* valid_per_row) {
    #pragma omp parallel for
    for (int r = 0; r < rows; r++) {
        const T* xr = x + static_cast<size_t>(r) * cols;
        T* yr = y + static_cast<size_t>(r) * cols;
        const int v = valid_per_row ? valid_per_row[r] : cols;
        if (v <= 0) {
            std::fill(yr, yr + cols, T(0));
            continue;
        }
        T mx = xr[0];
        for (int c = 1; c < v; c++) mx = std::max(mx, xr[c]);
        T sum = T(0);
        for (int c = 0; c < v; c++) {
            yr[c] = std::exp(xr[c] - mx);
            sum += yr[c];
        }
        const T inv = T(1) / sum;
        for (int c = 0; c < v; c++) yr[c] *= inv;
        for (int c = v; c < cols; c++) yr[c] = T(0);
    }
}

// dL/dx for row softmax: dx = p .* (dy - sum(dy .* p)) restricted to valid cols.
template <typename T>
void softmax_rows_backward(const T* p, const T* dy, T* dx_accum, int rows, int cols,
                           const int* valid_per_row) {
    #pragma omp parallel for
    for (int r = 0; r < rows; r++) {
        const T* pr = p + static_cast<size_t>(r) * cols;
        const T* dyr = dy + static_cast<size_t>(r) * cols;
        T* dxr = dx_accum + static_cast<size_t>(r) * cols;
        const int v = valid_per_row ? valid_per_row[r] : cols;
        if (v <= 0) continue;
        T dot = T(0);
        for (int c = 0; c < v; c++) dot += dyr[c] * pr[c];
        for (int c = 0; c < v; c++) dxr[c] += pr[c] * (dyr[c] - dot);
    }
}

// Per-(b,l) sum over a centered square window of side `side`, clipped at the
// borders. x,y are (B,N,L) with N = H*W. Self-adjoint: the same routine
// applied to the cotangent is the backward pass.
template <typename T>
void window_sum_alpha(const T* x, T* y, int B, int H, int W, int L, int side) {
    const int half = side / 2;
    const int N = H * W;
    if (half == 0) {
        std::copy(x, x + static_cast<size_t>(B) * N * L, y);
        return;
    }
    #pragma omp parallel for
    for (int b = 0; b < B; b++) {
        const T* xb = x + static_cast<size_t>(b) * N * L;
        T* yb = y + static_cast<size_t>(b) * N * L;
        for (int cy = 0; cy < H; cy++) {
            const int y0 = std::max(0, cy - half), y1 = std::min(H - 1, cy + half);
            for (int cx = 0; cx < W; cx++) {
                const int x0 = std::max(0, cx - half), x1 = std::min(W - 1, cx + half);
                T* yrow = yb + (static_cast<size_t>(cy) * W + cx) * L;
                std::fill(yrow, yrow + L, T(0));
                for (int my = y0; my <= y1; my++)
                    for (int mx = x0; mx <= x1; mx++) {
                        const T* xrow = xb + (static_cast<size_t>(my) * W + mx) * L;
                        for (int l = 0; l < L; l++) yrow[l] += xrow[l];
                    }
            }
        }
    }
}

// Token-run sum for the text direction: y[i,:] = sum of x[m,:] over
// m in [i, min(i+run, valid)), zero for i >= valid. x,y are (B,L,N).
template <typename T>
void run_sum_beta(const T* x, T* y, int B, int L, int N, int run, const int* valid_per_b) {
    #pragma omp parallel for
    for (int b = 0; b < B; b++) {
        const T* xb = x + static_cast<size_t>(b) * L * N;
        T* yb = y + static_cast<size_t>(b) * L * N;
        const int v = valid_per_b[b];
        for (int i = 0; i < L; i++) {
            T* yrow = yb + static_cast<size_t>(i) * N;
            std::fill(yrow, yrow + N, T(0));
            if (i >= v) continue;
            const int hi = std::min(i + run, v);
            for (int m = i; m < hi; m++) {
                const T* xrow = xb + static_cast<size_t>(m) * N;
                for (int n = 0; n < N; n++) yrow[n] += xrow[n];
            }
        }
    }
}

// Transpose of run_sum_beta: dx[m,:] += sum of dy[i,:] over starts i with
// m in [i, i+run) and i < valid; only m < valid receives gradient.
template <typename T>
void run_sum_beta_backward(const T* dy, T* dx_accum, int B, int L, int N, int run,
                           const int* valid_per_b) {
    #pragma omp parallel for
    for (int b = 0; b < B; b++) {
        const T* dyb = dy + static_cast<size_t>(b) * L * N;
        T* dxb = dx_accum + static_cast<size_t>(b) * L * N;
        const int v = valid_per_b[b];
        for (int m = 0; m < v; m++) {
            T* dxrow = dxb + static_cast<size_t>(m) * N;
            const int lo = std::max(0, m - run + 1);
            for (int i = lo; i <= m; i++) {
                if (i >= v) continue;
                const T* dyrow = dyb + static_cast<size_t>(i) * N;
                for (int n = 0; n < N; n++) dxrow[n] += dyrow[n];
            }
        }
    }
}

} // namespace refseg::kern

#endif // REFSEG_KERNELS_H
