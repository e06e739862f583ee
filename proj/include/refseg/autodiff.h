// SPDX-License-Identifier: Apache-2.0

#ifndef REFSEG_AUTODIFF_H
#define REFSEG_AUTODIFF_H

#include <cassert>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "refseg/kernels.h"
#include "refseg/tensor.h"

namespace refseg::ad {

template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    void zero_grad() {
        if (grad.shape != value.shape) grad = Tensor<T>(value.shape);
        else grad.fill(T(0));
    }
};

template <typename T>
struct ParamStore {
    std::deque<Param<T>> params;

    Param<T>& create(const std::string& name, std::vector<int> shape) {
        params.push_back(Param<T>{name, Tensor<T>(std::move(shape)), {}});
        params.back().zero_grad();
        return params.back();
    }
    Param<T>* find(const std::string& name) {
        for (auto& p : params)
            if (p.name == name) return &p;
        return nullptr;
    }
    void zero_grads() {
        for (auto& p : params) p.zero_grad();
    }
    int64_t total_scalars() const {
        int64_t n = 0;
        for (auto& p : params) n += p.value.numel();
        return n;
    }
};

// Reverse-mode tape. One tape per forward pass; ops append nodes, backward()
// walks the tape once in reverse. Gradients of Param leaves accumulate into
// Param::grad, so a fresh tape can be built every step.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Tensor<T>& val(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        return n.ext_val ? *n.ext_val : n.val;
    }
    const Tensor<T>& val(int id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        return n.ext_val ? *n.ext_val : n.val;
    }

    // Gradient of a node, allocated (zero) on first touch. Parameter leaves
    // alias Param::grad directly, so consumers accumulate into it in place.
    Tensor<T>& grad(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.ext_grad) {
            if (n.ext_grad->shape != n.ext_val->shape) {
                n.ext_grad->shape = n.ext_val->shape;
                n.ext_grad->data.assign(static_cast<size_t>(n.ext_val->numel()), T(0));
            }
            return *n.ext_grad;
        }
        if (n.grad.shape != n.val.shape) n.grad = Tensor<T>(n.val.shape);
        return n.grad;
    }
    bool has_grad(int id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        if (n.ext_grad) return true;
        return n.grad.shape == n.val.shape;
    }
    bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
    size_t size() const { return nodes_.size(); }

    int input(Tensor<T> v) { return push(std::move(v), false, nullptr); }

    // Leaf that aliases the parameter: no value copy on the way in, gradients
    // accumulate straight into Param::grad. The parameter must stay untouched
    // for the lifetime of the tape.
    int param(Param<T>& p) {
        if (p.grad.shape != p.value.shape) p.zero_grad();
        int id = push(Tensor<T>(), true, nullptr);
        Node& n = nodes_[static_cast<size_t>(id)];
        n.ext_val = &p.value;
        n.ext_grad = &p.grad;
        return id;
    }

    int add(int a, int b) {
        assert(val(a).shape == val(b).shape);
        Tensor<T> out = val(a);
        const Tensor<T>& vb = val(b);
        for (int64_t i = 0; i < out.numel(); i++) out.data[i] += vb.data[i];
        return unary_binary(std::move(out), a, b, [this](int id, int pa, int pb) {
            const Tensor<T>& g = grad(id);
            if (needs_grad(pa)) axpy(grad(pa), g, T(1));
            if (needs_grad(pb)) axpy(grad(pb), g, T(1));
        });
    }

    int sub(int a, int b) {
        assert(val(a).shape == val(b).shape);
        Tensor<T> out = val(a);
        const Tensor<T>& vb = val(b);
        for (int64_t i = 0; i < out.numel(); i++) out.data[i] -= vb.data[i];
        return unary_binary(std::move(out), a, b, [this](int id, int pa, int pb) {
            const Tensor<T>& g = grad(id);
            if (needs_grad(pa)) axpy(grad(pa), g, T(1));
            if (needs_grad(pb)) axpy(grad(pb), g, T(-1));
        });
    }

    int mul(int a, int b) {
        assert(val(a).shape == val(b).shape);
        Tensor<T> out = val(a);
        const Tensor<T>& vb = val(b);
        for (int64_t i = 0; i < out.numel(); i++) out.data[i] *= vb.data[i];
        return unary_binary(std::move(out), a, b, [this](int id, int pa, int pb) {
            const Tensor<T>& g = grad(id);
            if (needs_grad(pa)) {
                Tensor<T>& ga = grad(pa);
                const Tensor<T>& vb2 = val(pb);
                for (int64_t i = 0; i < g.numel(); i++) ga.data[i] += g.data[i] * vb2.data[i];
            }
            if (needs_grad(pb)) {
                Tensor<T>& gb = grad(pb);
                const Tensor<T>& va2 = val(pa);
                for (int64_t i = 0; i < g.numel(); i++) gb.data[i] += g.data[i] * va2.data[i];
            }
        });
    }

    int affine(int a, T s, T c) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = s * v + c;
        return unary(std::move(out), a, [this, s](int id, int pa) {
            axpy(grad(pa), grad(id), s);
        });
    }

    int relu(int a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = v > T(0) ? v : T(0);
        return unary(std::move(out), a, [this](int id, int pa) {
            const Tensor<T>& g = grad(id);
            const Tensor<T>& y = val(id);
            Tensor<T>& ga = grad(pa);
            for (int64_t i = 0; i < g.numel(); i++)
                if (y.data[i] > T(0)) ga.data[i] += g.data[i];
        });
    }

    // x(B,C,rest...) + bias(C)
    int add_bias_c1(int x, int bias) {
        const Tensor<T>& vx = val(x);
        const Tensor<T>& vb = val(bias);
        const int B = vx.dim(0), C = vx.dim(1);
        const int64_t inner = vx.numel() / (static_cast<int64_t>(B) * C);
        Tensor<T> out = vx;
        for (int b = 0; b < B; b++)
            for (int c = 0; c < C; c++) {
                T* p = out.ptr() + (static_cast<int64_t>(b) * C + c) * inner;
                const T bv = vb.data[static_cast<size_t>(c)];
                for (int64_t i = 0; i < inner; i++) p[i] += bv;
            }
        return unary_binary(std::move(out), x, bias, [this, B, C, inner](int id, int px, int pb) {
            const Tensor<T>& g = grad(id);
            if (needs_grad(px)) axpy(grad(px), g, T(1));
            if (needs_grad(pb)) {
                Tensor<T>& gb = grad(pb);
                for (int b = 0; b < B; b++)
                    for (int c = 0; c < C; c++) {
                        const T* p = g.ptr() + (static_cast<int64_t>(b) * C + c) * inner;
                        T acc = T(0);
                        for (int64_t i = 0; i < inner; i++) acc += p[i];
                        gb.data[static_cast<size_t>(c)] += acc;
                    }
            }
        });
    }

    // (B,Ci,L) x w(Co,Ci) [+ b(Co)] -> (B,Co,L); the 1x1 transform used for
    // channel projections of both token features and flattened spatial maps.
    int linear_cl(int x, int w, int b = -1) {
        const Tensor<T>& vx = val(x);
        const Tensor<T>& vw = val(w);
        const int B = vx.dim(0), Ci = vx.dim(1), L = vx.dim(2), Co = vw.dim(0);
        Tensor<T> out({B, Co, L});
        for (int bb = 0; bb < B; bb++)
            kern::matmul(vw.ptr(), vx.ptr() + static_cast<size_t>(bb) * Ci * L,
                         out.ptr() + static_cast<size_t>(bb) * Co * L, Co, L, Ci, false, false, false);
        int id = unary_binary(std::move(out), x, w, [this, B, Ci, L, Co](int nid, int px, int pw) {
            const Tensor<T>& g = grad(nid);
            const Tensor<T>& vx2 = val(px);
            const Tensor<T>& vw2 = val(pw);
            if (needs_grad(pw)) {
                Tensor<T>& gw = grad(pw);
                for (int bb = 0; bb < B; bb++)
                    kern::matmul(g.ptr() + static_cast<size_t>(bb) * Co * L,
                                 vx2.ptr() + static_cast<size_t>(bb) * Ci * L, gw.ptr(),
                                 Co, Ci, L, false, true, true);
            }
            if (needs_grad(px)) {
                Tensor<T>& gx = grad(px);
                std::vector<T> wt(static_cast<size_t>(Ci) * Co); // one transpose for the batch
                kern::transpose2d(vw2.ptr(), wt.data(), Co, Ci);
                for (int bb = 0; bb < B; bb++)
                    kern::matmul(wt.data(), g.ptr() + static_cast<size_t>(bb) * Co * L,
                                 gx.ptr() + static_cast<size_t>(bb) * Ci * L,
                                 Ci, L, Co, false, false, true);
            }
        });
        if (b >= 0) id = add_bias_c1(id, b);
        return id;
    }

    // (B,Ci) x w(Co,Ci)^T [+ b] -> (B,Co)
    int linear_rows(int x, int w, int b = -1) {
        const Tensor<T>& vx = val(x);
        const Tensor<T>& vw = val(w);
        const int B = vx.dim(0), Ci = vx.dim(1), Co = vw.dim(0);
        Tensor<T> out({B, Co});
        kern::matmul(vx.ptr(), vw.ptr(), out.ptr(), B, Co, Ci, false, true, false);
        if (b >= 0) {
            const Tensor<T>& vb = val(b);
            for (int bb = 0; bb < B; bb++)
                for (int c = 0; c < Co; c++) out(bb, c) += vb.data[static_cast<size_t>(c)];
        }
        std::vector<int> parents = {x, w};
        if (b >= 0) parents.push_back(b);
        return push_multi(std::move(out), parents, [this, B, Ci, Co, x, w, b](int nid) {
            const Tensor<T>& g = grad(nid);
            if (needs_grad(x))
                kern::matmul(g.ptr(), val(w).ptr(), grad(x).ptr(), B, Ci, Co, false, false, true);
            if (needs_grad(w))
                kern::matmul(g.ptr(), val(x).ptr(), grad(w).ptr(), Co, Ci, B, true, false, true);
            if (b >= 0 && needs_grad(b)) {
                Tensor<T>& gb = grad(b);
                for (int bb = 0; bb < B; bb++)
                    for (int c = 0; c < Co; c++) gb.data[static_cast<size_t>(c)] += g(bb, c);
            }
        });
    }

    int conv2d(int x, int w, int b, int stride, int pad) {
        const Tensor<T>& vx = val(x);
        const Tensor<T>& vw = val(w);
        Tensor<T> out;
        kern::conv2d_forward(vx, vw, b >= 0 ? val(b).ptr() : nullptr, stride, pad, out);
        std::vector<int> parents = {x, w};
        if (b >= 0) parents.push_back(b);
        return push_multi(std::move(out), parents, [this, x, w, b, stride, pad](int nid) {
            const Tensor<T>& g = grad(nid);
            Tensor<T>* dx = needs_grad(x) ? &grad(x) : nullptr;
            Tensor<T>* dw = needs_grad(w) ? &grad(w) : nullptr;
            T* db = (b >= 0 && needs_grad(b)) ? grad(b).ptr() : nullptr;
            kern::conv2d_backward(val(x), val(w), stride, pad, g, dx, dw, db);
        });
    }

    // Normalizes each (sample, channel) plane over its spatial extent — the
    // B=1 degenerate case of batch statistics, applied identically in
    // training and inference so both modes are the same function and
    // per-sample evaluation stays batch-independent.
    int instancenorm2d(int x, int gamma, int beta, T eps = T(1e-5)) {
        const Tensor<T>& vx = val(x);
        const int B = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
        const int64_t M = static_cast<int64_t>(H) * W;
        Tensor<T> out(vx.shape);
        auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(B) * C);
        auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(B) * C);
        const Tensor<T>& vg = val(gamma);
        const Tensor<T>& vb = val(beta);
        #pragma omp parallel for
        for (int bc = 0; bc < B * C; bc++) {
            const int c = bc % C;
            const T* p = vx.ptr() + static_cast<size_t>(bc) * M;
            T mu = T(0);
            for (int64_t i = 0; i < M; i++) mu += p[i];
            mu /= static_cast<T>(M);
            T var = T(0);
            for (int64_t i = 0; i < M; i++) var += (p[i] - mu) * (p[i] - mu);
            var /= static_cast<T>(M);
            const T istd = T(1) / std::sqrt(var + eps);
            (*mean)[static_cast<size_t>(bc)] = mu;
            (*inv_std)[static_cast<size_t>(bc)] = istd;
            const T gc = vg.data[static_cast<size_t>(c)], bc2 = vb.data[static_cast<size_t>(c)];
            T* q = out.ptr() + static_cast<size_t>(bc) * M;
            for (int64_t i = 0; i < M; i++) q[i] = gc * (p[i] - mu) * istd + bc2;
        }
        return push_multi(std::move(out), {x, gamma, beta},
                          [this, x, gamma, beta, B, C, M, mean, inv_std](int nid) {
            const Tensor<T>& g = grad(nid);
            const Tensor<T>& vx2 = val(x);
            const Tensor<T>& vg2 = val(gamma);
            Tensor<T>* gx = needs_grad(x) ? &grad(x) : nullptr;
            Tensor<T>* gg = needs_grad(gamma) ? &grad(gamma) : nullptr;
            Tensor<T>* gb = needs_grad(beta) ? &grad(beta) : nullptr;
            // per-channel parameter sums stay serial-in-b for determinism
            #pragma omp parallel for
            for (int c = 0; c < C; c++) {
                T acc_g = T(0), acc_b = T(0);
                for (int b = 0; b < B; b++) {
                    const size_t bc = static_cast<size_t>(b) * C + c;
                    const T mu = (*mean)[bc], istd = (*inv_std)[bc];
                    const T* gp = g.ptr() + bc * M;
                    const T* xp = vx2.ptr() + bc * M;
                    for (int64_t i = 0; i < M; i++) {
                        acc_b += gp[i];
                        acc_g += gp[i] * (xp[i] - mu) * istd;
                    }
                }
                if (gg) gg->data[static_cast<size_t>(c)] += acc_g;
                if (gb) gb->data[static_cast<size_t>(c)] += acc_b;
            }
            if (gx) {
                #pragma omp parallel for
                for (int bc = 0; bc < B * C; bc++) {
                    const int c = bc % C;
                    const T mu = (*mean)[static_cast<size_t>(bc)];
                    const T istd = (*inv_std)[static_cast<size_t>(bc)];
                    const T gc = vg2.data[static_cast<size_t>(c)];
                    const T* gp = g.ptr() + static_cast<size_t>(bc) * M;
                    const T* xp = vx2.ptr() + static_cast<size_t>(bc) * M;
                    T* dp = gx->ptr() + static_cast<size_t>(bc) * M;
                    T sum_dy = T(0), sum_dy_xhat = T(0);
                    for (int64_t i = 0; i < M; i++) {
                        sum_dy += gp[i];
                        sum_dy_xhat += gp[i] * (xp[i] - mu) * istd;
                    }
                    const T invM = T(1) / static_cast<T>(M);
                    for (int64_t i = 0; i < M; i++) {
                        const T xhat = (xp[i] - mu) * istd;
                        dp[i] += gc * istd * (gp[i] - invM * sum_dy - invM * xhat * sum_dy_xhat);
                    }
                }
            }
        });
    }

    // LayerNorm across channels for every (b, position) column of (B,C,L).
    int layernorm_cl(int x, int gamma, int beta, T eps = T(1e-5)) {
        const Tensor<T>& vx = val(x);
        const int B = vx.dim(0), C = vx.dim(1), L = vx.dim(2);
        Tensor<T> out(vx.shape);
        auto mean = std::make_shared<Tensor<T>>(std::vector<int>{B, L});
        auto inv_std = std::make_shared<Tensor<T>>(std::vector<int>{B, L});
        const Tensor<T>& vg = val(gamma);
        const Tensor<T>& vb = val(beta);
        #pragma omp parallel for collapse(2)
        for (int b = 0; b < B; b++)
            for (int l = 0; l < L; l++) {
                T mu = T(0);
                for (int c = 0; c < C; c++) mu += vx(b, c, l);
                mu /= static_cast<T>(C);
                T var = T(0);
                for (int c = 0; c < C; c++) var += (vx(b, c, l) - mu) * (vx(b, c, l) - mu);
                var /= static_cast<T>(C);
                const T istd = T(1) / std::sqrt(var + eps);
                (*mean)(b, l) = mu;
                (*inv_std)(b, l) = istd;
                for (int c = 0; c < C; c++)
                    out(b, c, l) = vg.data[static_cast<size_t>(c)] * (vx(b, c, l) - mu) * istd +
                                   vb.data[static_cast<size_t>(c)];
            }
        return push_multi(std::move(out), {x, gamma, beta},
                          [this, x, gamma, beta, B, C, L, mean, inv_std](int nid) {
            const Tensor<T>& g = grad(nid);
            const Tensor<T>& vx2 = val(x);
            const Tensor<T>& vg2 = val(gamma);
            Tensor<T>* gx = needs_grad(x) ? &grad(x) : nullptr;
            Tensor<T>* gg = needs_grad(gamma) ? &grad(gamma) : nullptr;
            Tensor<T>* gb = needs_grad(beta) ? &grad(beta) : nullptr;
            // channel-parallel accumulation for the affine params
            if (gg || gb) {
                #pragma omp parallel for
                for (int c = 0; c < C; c++) {
                    T acc_g = T(0), acc_b = T(0);
                    for (int b = 0; b < B; b++)
                        for (int l = 0; l < L; l++) {
                            const T xhat = (vx2(b, c, l) - (*mean)(b, l)) * (*inv_std)(b, l);
                            acc_g += g(b, c, l) * xhat;
                            acc_b += g(b, c, l);
                        }
                    if (gg) gg->data[static_cast<size_t>(c)] += acc_g;
                    if (gb) gb->data[static_cast<size_t>(c)] += acc_b;
                }
            }
            if (gx) {
                #pragma omp parallel for collapse(2)
                for (int b = 0; b < B; b++)
                    for (int l = 0; l < L; l++) {
                        const T mu = (*mean)(b, l), istd = (*inv_std)(b, l);
                        T sum_dyg = T(0), sum_dyg_xhat = T(0);
                        for (int c = 0; c < C; c++) {
                            const T dyg = g(b, c, l) * vg2.data[static_cast<size_t>(c)];
                            const T xhat = (vx2(b, c, l) - mu) * istd;
                            sum_dyg += dyg;
                            sum_dyg_xhat += dyg * xhat;
                        }
                        const T invC = T(1) / static_cast<T>(C);
                        for (int c = 0; c < C; c++) {
                            const T dyg = g(b, c, l) * vg2.data[static_cast<size_t>(c)];
                            const T xhat = (vx2(b, c, l) - mu) * istd;
                            (*gx)(b, c, l) += istd * (dyg - invC * sum_dyg - invC * xhat * sum_dyg_xhat);
                        }
                    }
            }
        });
    }

    // Grouped matmul on (G,M,K)x(G,K,N); transA/transB refer to the stored
    // per-group layouts (G,K,M)/(G,N,K).
    int bmm(int a, int b, bool tA, bool tB) {
        assert(!(tA && tB));
        const Tensor<T>& va = val(a);
        const Tensor<T>& vb = val(b);
        const int G = va.dim(0);
        const int M = tA ? va.dim(2) : va.dim(1);
        const int K = tA ? va.dim(1) : va.dim(2);
        const int N = tB ? vb.dim(1) : vb.dim(2);
        assert((tB ? vb.dim(2) : vb.dim(1)) == K && vb.dim(0) == G);
        Tensor<T> out({G, M, N});
        kern::bmm(va.ptr(), vb.ptr(), out.ptr(), G, M, N, K, tA, tB, false);
        return unary_binary(std::move(out), a, b, [this, G, M, N, K, tA, tB](int nid, int pa, int pb) {
            const Tensor<T>& g = grad(nid);
            const Tensor<T>& va2 = val(pa);
            const Tensor<T>& vb2 = val(pb);
            if (!tA && !tB) {
                if (needs_grad(pa)) kern::bmm(g.ptr(), vb2.ptr(), grad(pa).ptr(), G, M, K, N, false, true, true);
                if (needs_grad(pb)) kern::bmm(va2.ptr(), g.ptr(), grad(pb).ptr(), G, K, N, M, true, false, true);
            } else if (tA && !tB) {
                // C = A^T B with A stored (G,K,M): dA = B dC^T, dB = A dC
                if (needs_grad(pa)) kern::bmm(vb2.ptr(), g.ptr(), grad(pa).ptr(), G, K, M, N, false, true, true);
                if (needs_grad(pb)) kern::bmm(va2.ptr(), g.ptr(), grad(pb).ptr(), G, K, N, M, false, false, true);
            } else {
                // C = A B^T with B stored (G,N,K): dA = dC B, dB = dC^T A
                if (needs_grad(pa)) kern::bmm(g.ptr(), vb2.ptr(), grad(pa).ptr(), G, M, K, N, false, false, true);
                if (needs_grad(pb)) kern::bmm(g.ptr(), va2.ptr(), grad(pb).ptr(), G, N, K, M, true, false, true);
            }
        });
    }

    int matmul2d(int a, int b, bool tA, bool tB) {
        const Tensor<T>& va = val(a);
        const Tensor<T>& vb = val(b);
        const int M = tA ? va.dim(1) : va.dim(0);
        const int K = tA ? va.dim(0) : va.dim(1);
        const int N = tB ? vb.dim(0) : vb.dim(1);
        Tensor<T> out({M, N});
        kern::matmul(va.ptr(), vb.ptr(), out.ptr(), M, N, K, tA, tB, false);
        return unary_binary(std::move(out), a, b, [this, M, N, K, tA, tB](int nid, int pa, int pb) {
            const Tensor<T>& g = grad(nid);
            if (!tA && !tB) {
                if (needs_grad(pa)) kern::matmul(g.ptr(), val(pb).ptr(), grad(pa).ptr(), M, K, N, false, true, true);
                if (needs_grad(pb)) kern::matmul(val(pa).ptr(), g.ptr(), grad(pb).ptr(), K, N, M, true, false, true);
            } else if (tA && !tB) {
                if (needs_grad(pa)) kern::matmul(val(pb).ptr(), g.ptr(), grad(pa).ptr(), K, M, N, false, true, true);
                if (needs_grad(pb)) kern::matmul(val(pa).ptr(), g.ptr(), grad(pb).ptr(), K, N, M, false, false, true);
            } else if (!tA && tB) {
                if (needs_grad(pa)) kern::matmul(g.ptr(), val(pb).ptr(), grad(pa).ptr(), M, K, N, false, false, true);
                if (needs_grad(pb)) kern::matmul(g.ptr(), val(pa).ptr(), grad(pb).ptr(), N, K, M, true, false, true);
            } else {
                assert(false);
            }
        });
    }

    // Tiles a (1,...) tensor B times along dim 0; backward sums over copies.
    int broadcast_b(int a, int B) {
        const Tensor<T>& va = val(a);
        assert(va.dim(0) == 1);
        std::vector<int> shape = va.shape;
        shape[0] = B;
        Tensor<T> out(shape);
        const int64_t inner = va.numel();
        for (int b = 0; b < B; b++)
            std::copy(va.data.begin(), va.data.end(), out.ptr() + b * inner);
        return unary(std::move(out), a, [this, B, inner](int nid, int pa) {
            const Tensor<T>& g = grad(nid);
            Tensor<T>& ga = grad(pa);
            for (int b = 0; b < B; b++)
                for (int64_t i = 0; i < inner; i++) ga.data[i] += g.data[b * inner + i];
        });
    }

    int reshape(int a, std::vector<int> s) {
        Tensor<T> out = val(a).reshaped(std::move(s));
        return unary(std::move(out), a, [this](int nid, int pa) {
            const Tensor<T>& g = grad(nid);
            Tensor<T>& ga = grad(pa);
            for (int64_t i = 0; i < g.numel(); i++) ga.data[i] += g.data[i];
        });
    }

    int transpose12(int a) {
        const Tensor<T>& va = val(a);
        const int G = va.dim(0), M = va.dim(1), N = va.dim(2);
        Tensor<T> out({G, N, M});
        #pragma omp parallel for
        for (int g = 0; g < G; g++)
            for (int i = 0; i < M; i++)
                for (int j = 0; j < N; j++) out(g, j, i) = va(g, i, j);
        return unary(std::move(out), a, [this, G, M, N](int nid, int pa) {
            const Tensor<T>& g = grad(nid);
            Tensor<T>& ga = grad(pa);
            for (int gg = 0; gg < G; gg++)
                for (int j = 0; j < N; j++)
                    for (int i = 0; i < M; i++) ga(gg, i, j) += g(gg, j, i);
        });
    }

    // Softmax over the last dim. valid_per_row gives the number of unmasked
    // columns for each row (rows = numel / cols); rows with valid == 0 come
    // out all-zero (used for pad token rows).
    int softmax_masked(int a, std::vector<int> valid_per_row) {
        const Tensor<T>& va = val(a);
        const int cols = va.dim(va.ndim() - 1);
        const int rows = static_cast<int>(va.numel() / cols);
        assert(static_cast<int>(valid_per_row.size()) == rows);
        Tensor<T> out(va.shape);
        auto valid = std::make_shared<std::vector<int>>(std::move(valid_per_row));
        kern::softmax_rows_masked(va.ptr(), out.ptr(), rows, cols, valid->data());
        return unary(std::move(out), a, [this, rows, cols, valid](int nid, int pa) {
            kern::softmax_rows_backward(val(nid).ptr(), grad(nid).ptr(), grad(pa).ptr(),
                                        rows, cols, valid->data());
        });
    }

    int window_sum(int a, int H, int W, int side) {
        const Tensor<T>& va = val(a);
        const int B = va.dim(0), L = va.dim(2);
        Tensor<T> out(va.shape);
        kern::window_sum_alpha(va.ptr(), out.ptr(), B, H, W, L, side);
        return unary(std::move(out), a, [this, B, H, W, L, side](int nid, int pa) {
            // centered clipped windows are self-adjoint
            Tensor<T> tmp(val(nid).shape);
            kern::window_sum_alpha(grad(nid).ptr(), tmp.ptr(), B, H, W, L, side);
            axpy(grad(pa), tmp, T(1));
        });
    }

    int run_sum(int a, int run, std::vector<int> valid_per_b) {
        const Tensor<T>& va = val(a);
        const int B = va.dim(0), L = va.dim(1), N = va.dim(2);
        Tensor<T> out(va.shape);
        auto valid = std::make_shared<std::vector<int>>(std::move(valid_per_b));
        kern::run_sum_beta(va.ptr(), out.ptr(), B, L, N, run, valid->data());
        return unary(std::move(out), a, [this, B, L, N, run, valid](int nid, int pa) {
            kern::run_sum_beta_backward(grad(nid).ptr(), grad(pa).ptr(), B, L, N, run, valid->data());
        });
    }

    // y = sum_r lambda[r] * mats[r]
    int scale_mix(const std::vector<int>& mats, int lambda) {
        const Tensor<T>& vl = val(lambda);
        const int R = static_cast<int>(mats.size());
        assert(vl.numel() == R);
        Tensor<T> out(val(mats[0]).shape, T(0));
        for (int r = 0; r < R; r++) {
            const Tensor<T>& m = val(mats[static_cast<size_t>(r)]);
            const T lr = vl.data[static_cast<size_t>(r)];
            for (int64_t i = 0; i < out.numel(); i++) out.data[i] += lr * m.data[i];
        }
        std::vector<int> parents = mats;
        parents.push_back(lambda);
        std::vector<int> mats_copy = mats;
        return push_multi(std::move(out), parents, [this, mats_copy, lambda, R](int nid) {
            const Tensor<T>& g = grad(nid);
            const Tensor<T>& vl2 = val(lambda);
            for (int r = 0; r < R; r++) {
                const int m = mats_copy[static_cast<size_t>(r)];
                if (needs_grad(m)) axpy(grad(m), g, vl2.data[static_cast<size_t>(r)]);
                if (needs_grad(lambda)) {
                    const Tensor<T>& vm = val(m);
                    T acc = T(0);
                    for (int64_t i = 0; i < g.numel(); i++) acc += g.data[i] * vm.data[i];
                    grad(lambda).data[static_cast<size_t>(r)] += acc;
                }
            }
        });
    }

    // y = x + gamma[c] * a, gamma indexed by dim 1 of x.
    int gated_residual(int x, int a, int gamma) {
        const Tensor<T>& vx = val(x);
        const Tensor<T>& va = val(a);
        const Tensor<T>& vg = val(gamma);
        assert(vx.shape == va.shape);
        const int B = vx.dim(0), C = vx.dim(1);
        const int64_t inner = vx.numel() / (static_cast<int64_t>(B) * C);
        Tensor<T> out = vx;
        for (int b = 0; b < B; b++)
            for (int c = 0; c < C; c++) {
                T* p = out.ptr() + (static_cast<int64_t>(b) * C + c) * inner;
                const T* q = va.ptr() + (static_cast<int64_t>(b) * C + c) * inner;
                const T gc = vg.data[static_cast<size_t>(c)];
                for (int64_t i = 0; i < inner; i++) p[i] += gc * q[i];
            }
        return push_multi(std::move(out), {x, a, gamma}, [this, x, a, gamma, B, C, inner](int nid) {
            const Tensor<T>& g = grad(nid);
            if (needs_grad(x)) axpy(grad(x), g, T(1));
            const Tensor<T>& vg2 = val(gamma);
            const Tensor<T>& va2 = val(a);
            if (needs_grad(a)) {
                Tensor<T>& ga = grad(a);
                for (int b = 0; b < B; b++)
                    for (int c = 0; c < C; c++) {
                        T* p = ga.ptr() + (static_cast<int64_t>(b) * C + c) * inner;
                        const T* q = g.ptr() + (static_cast<int64_t>(b) * C + c) * inner;
                        const T gc = vg2.data[static_cast<size_t>(c)];
                        for (int64_t i = 0; i < inner; i++) p[i] += gc * q[i];
                    }
            }
            if (needs_grad(gamma)) {
                Tensor<T>& gg = grad(gamma);
                for (int b = 0; b < B; b++)
                    for (int c = 0; c < C; c++) {
                        const T* p = g.ptr() + (static_cast<int64_t>(b) * C + c) * inner;
                        const T* q = va2.ptr() + (static_cast<int64_t>(b) * C + c) * inner;
                        T acc = T(0);
                        for (int64_t i = 0; i < inner; i++) acc += p[i] * q[i];
                        gg.data[static_cast<size_t>(c)] += acc;
                    }
            }
        });
    }

    int bilinear(int a, int Ho, int Wo) {
        Tensor<T> out;
        kern::bilinear_forward(val(a), Ho, Wo, out);
        const int H = val(a).dim(2), W = val(a).dim(3);
        return unary(std::move(out), a, [this, H, W](int nid, int pa) {
            kern::bilinear_backward(grad(nid), H, W, grad(pa));
        });
    }

    int concat_c1(int a, int b) {
        const Tensor<T>& va = val(a);
        const Tensor<T>& vb = val(b);
        const int B = va.dim(0), C1 = va.dim(1), C2 = vb.dim(1);
        const int64_t inner = va.numel() / (static_cast<int64_t>(B) * C1);
        Tensor<T> out({B, C1 + C2, va.dim(2), va.dim(3)});
        for (int bb = 0; bb < B; bb++) {
            std::copy(va.ptr() + static_cast<int64_t>(bb) * C1 * inner,
                      va.ptr() + static_cast<int64_t>(bb + 1) * C1 * inner,
                      out.ptr() + static_cast<int64_t>(bb) * (C1 + C2) * inner);
            std::copy(vb.ptr() + static_cast<int64_t>(bb) * C2 * inner,
                      vb.ptr() + static_cast<int64_t>(bb + 1) * C2 * inner,
                      out.ptr() + (static_cast<int64_t>(bb) * (C1 + C2) + C1) * inner);
        }
        return unary_binary(std::move(out), a, b, [this, B, C1, C2, inner](int nid, int pa, int pb) {
            const Tensor<T>& g = grad(nid);
            if (needs_grad(pa)) {
                Tensor<T>& ga = grad(pa);
                for (int bb = 0; bb < B; bb++) {
                    const T* src = g.ptr() + static_cast<int64_t>(bb) * (C1 + C2) * inner;
                    T* dst = ga.ptr() + static_cast<int64_t>(bb) * C1 * inner;
                    for (int64_t i = 0; i < C1 * inner; i++) dst[i] += src[i];
                }
            }
            if (needs_grad(pb)) {
                Tensor<T>& gb = grad(pb);
                for (int bb = 0; bb < B; bb++) {
                    const T* src = g.ptr() + (static_cast<int64_t>(bb) * (C1 + C2) + C1) * inner;
                    T* dst = gb.ptr() + static_cast<int64_t>(bb) * C2 * inner;
                    for (int64_t i = 0; i < C2 * inner; i++) dst[i] += src[i];
                }
            }
        });
    }

    // table(V,C) gathered by ids(B,L) -> (B,C,L)
    int embedding(int table, const Tensor<int>& ids) {
        const Tensor<T>& vt = val(table);
        const int B = ids.dim(0), L = ids.dim(1), C = vt.dim(1);
        Tensor<T> out({B, C, L});
        for (int b = 0; b < B; b++)
            for (int l = 0; l < L; l++) {
                const int id = ids(b, l);
                for (int c = 0; c < C; c++) out(b, c, l) = vt(id, c);
            }
        auto ids_copy = std::make_shared<Tensor<int>>(ids);
        return unary(std::move(out), table, [this, B, L, C, ids_copy](int nid, int pt) {
            const Tensor<T>& g = grad(nid);
            Tensor<T>& gt = grad(pt);
            for (int b = 0; b < B; b++)
                for (int l = 0; l < L; l++) {
                    const int id = (*ids_copy)(b, l);
                    for (int c = 0; c < C; c++) gt(id, c) += g(b, c, l);
                }
        });
    }

    int mean_pool_hw(int a) {
        const Tensor<T>& va = val(a);
        const int B = va.dim(0), C = va.dim(1);
        const int64_t inner = va.numel() / (static_cast<int64_t>(B) * C);
        Tensor<T> out({B, C});
        for (int b = 0; b < B; b++)
            for (int c = 0; c < C; c++) {
                const T* p = va.ptr() + (static_cast<int64_t>(b) * C + c) * inner;
                T acc = T(0);
                for (int64_t i = 0; i < inner; i++) acc += p[i];
                out(b, c) = acc / static_cast<T>(inner);
            }
        return unary(std::move(out), a, [this, B, C, inner](int nid, int pa) {
            const Tensor<T>& g = grad(nid);
            Tensor<T>& ga = grad(pa);
            for (int b = 0; b < B; b++)
                for (int c = 0; c < C; c++) {
                    const T gv = g(b, c) / static_cast<T>(inner);
                    T* p = ga.ptr() + (static_cast<int64_t>(b) * C + c) * inner;
                    for (int64_t i = 0; i < inner; i++) p[i] += gv;
                }
        });
    }

    // (B,C,L) -> (B,C), averaging positions < valid[b].
    int mean_pool_valid(int a, std::vector<int> valid_per_b) {
        const Tensor<T>& va = val(a);
        const int B = va.dim(0), C = va.dim(1), L = va.dim(2);
        auto valid = std::make_shared<std::vector<int>>(std::move(valid_per_b));
        Tensor<T> out({B, C});
        for (int b = 0; b < B; b++) {
            const int v = std::max(1, (*valid)[static_cast<size_t>(b)]);
            for (int c = 0; c < C; c++) {
                T acc = T(0);
                for (int l = 0; l < v; l++) acc += va(b, c, l);
                out(b, c) = acc / static_cast<T>(v);
            }
        }
        return unary(std::move(out), a, [this, B, C, L, valid](int nid, int pa) {
            const Tensor<T>& g = grad(nid);
            Tensor<T>& ga = grad(pa);
            for (int b = 0; b < B; b++) {
                const int v = std::max(1, (*valid)[static_cast<size_t>(b)]);
                for (int c = 0; c < C; c++) {
                    const T gv = g(b, c) / static_cast<T>(v);
                    for (int l = 0; l < v; l++) ga(b, c, l) += gv;
                }
            }
        });
    }

    // Row-wise x/||x||; all-zero rows stay zero.
    int l2_normalize_rows(int a, T eps = T(1e-12)) {
        const Tensor<T>& va = val(a);
        const int B = va.dim(0), C = va.dim(1);
        Tensor<T> out(va.shape);
        auto norms = std::make_shared<std::vector<T>>(B);
        for (int b = 0; b < B; b++) {
            T s = T(0);
            for (int c = 0; c < C; c++) s += va(b, c) * va(b, c);
            const T n = std::sqrt(s);
            (*norms)[static_cast<size_t>(b)] = n;
            const T inv = n > eps ? T(1) / n : T(0);
            for (int c = 0; c < C; c++) out(b, c) = va(b, c) * inv;
        }
        return unary(std::move(out), a, [this, B, C, norms, eps](int nid, int pa) {
            const Tensor<T>& g = grad(nid);
            const Tensor<T>& y = val(nid);
            Tensor<T>& ga = grad(pa);
            for (int b = 0; b < B; b++) {
                const T n = (*norms)[static_cast<size_t>(b)];
                if (n <= eps) continue;
                T dot = T(0);
                for (int c = 0; c < C; c++) dot += g(b, c) * y(b, c);
                for (int c = 0; c < C; c++) ga(b, c) += (g(b, c) - y(b, c) * dot) / n;
            }
        });
    }

    int detach(int a) { return push(Tensor<T>(val(a)), false, nullptr); }

    // Mean 2-class cross-entropy of logits(B,2,H,W) against a {0,1} mask.
    int ce2(int logits, const Tensor<uint8_t>& target) {
        const Tensor<T>& z = val(logits);
        const int B = z.dim(0), H = z.dim(2), W = z.dim(3);
        assert(z.dim(1) == 2);
        const int64_t M = static_cast<int64_t>(B) * H * W;
        T loss = T(0);
        for (int b = 0; b < B; b++)
            for (int y = 0; y < H; y++)
                for (int x = 0; x < W; x++) {
                    const T z0 = z(b, 0, y, x), z1 = z(b, 1, y, x);
                    const uint8_t t = target(b, y, x);
                    if (t > 1) throw std::invalid_argument("ce2: target mask must be binary");
                    const T m = std::max(z0, z1);
                    const T lse = m + std::log(std::exp(z0 - m) + std::exp(z1 - m));
                    loss += lse - (t ? z1 : z0);
                }
        Tensor<T> out({1});
        out(0) = loss / static_cast<T>(M);
        auto tgt = std::make_shared<Tensor<uint8_t>>(target);
        return unary(std::move(out), logits, [this, B, H, W, M, tgt](int nid, int pl) {
            const T gscale = grad(nid)(0) / static_cast<T>(M);
            const Tensor<T>& z2 = val(pl);
            Tensor<T>& gz = grad(pl);
            #pragma omp parallel for
            for (int b = 0; b < B; b++)
                for (int y = 0; y < H; y++)
                    for (int x = 0; x < W; x++) {
                        const T z0 = z2(b, 0, y, x), z1 = z2(b, 1, y, x);
                        const T m = std::max(z0, z1);
                        const T e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
                        const T p1 = e1 / (e0 + e1);
                        const uint8_t t = (*tgt)(b, y, x);
                        gz(b, 0, y, x) += gscale * ((T(1) - p1) - (t ? T(0) : T(1)));
                        gz(b, 1, y, x) += gscale * (p1 - (t ? T(1) : T(0)));
                    }
        });
    }

    // Per-row cosine similarity of two (B,C) blocks -> (B). Rows where either
    // norm vanishes yield 0 with zero gradient.
    int cosine_rows(int a, int b, T eps = T(1e-12)) {
        const Tensor<T>& va = val(a);
        const Tensor<T>& vb = val(b);
        const int B = va.dim(0), C = va.dim(1);
        Tensor<T> out({B});
        auto na = std::make_shared<std::vector<T>>(B), nb = std::make_shared<std::vector<T>>(B);
        for (int i = 0; i < B; i++) {
            T sa = T(0), sb = T(0), dot = T(0);
            for (int c = 0; c < C; c++) {
                sa += va(i, c) * va(i, c);
                sb += vb(i, c) * vb(i, c);
                dot += va(i, c) * vb(i, c);
            }
            (*na)[static_cast<size_t>(i)] = std::sqrt(sa);
            (*nb)[static_cast<size_t>(i)] = std::sqrt(sb);
            out(i) = (std::sqrt(sa) > eps && std::sqrt(sb) > eps) ? dot / (std::sqrt(sa) * std::sqrt(sb)) : T(0);
        }
        return unary_binary(std::move(out), a, b, [this, B, C, na, nb, eps](int nid, int pa, int pb) {
            const Tensor<T>& g = grad(nid);
            const Tensor<T>& y = val(nid);
            const Tensor<T>& va2 = val(pa);
            const Tensor<T>& vb2 = val(pb);
            for (int i = 0; i < B; i++) {
                const T n1 = (*na)[static_cast<size_t>(i)], n2 = (*nb)[static_cast<size_t>(i)];
                if (n1 <= eps || n2 <= eps) continue;
                const T gi = g(i), cosv = y(i);
                if (needs_grad(pa)) {
                    Tensor<T>& ga = grad(pa);
                    for (int c = 0; c < C; c++)
                        ga(i, c) += gi * (vb2(i, c) / (n1 * n2) - cosv * va2(i, c) / (n1 * n1));
                }
                if (needs_grad(pb)) {
                    Tensor<T>& gb = grad(pb);
                    for (int c = 0; c < C; c++)
                        gb(i, c) += gi * (va2(i, c) / (n1 * n2) - cosv * vb2(i, c) / (n2 * n2));
                }
            }
        });
    }

    // (1/B) * sum_b delta[b] * x[b] -> scalar
    int delta_mean(int x, std::vector<T> delta) {
        const Tensor<T>& vx = val(x);
        const int B = vx.dim(0);
        auto d = std::make_shared<std::vector<T>>(std::move(delta));
        Tensor<T> out({1});
        T acc = T(0);
        for (int b = 0; b < B; b++) acc += (*d)[static_cast<size_t>(b)] * vx(b);
        out(0) = acc / static_cast<T>(B);
        return unary(std::move(out), x, [this, B, d](int nid, int pa) {
            const T g = grad(nid)(0) / static_cast<T>(B);
            Tensor<T>& ga = grad(pa);
            for (int b = 0; b < B; b++) ga(b) += g * (*d)[static_cast<size_t>(b)];
        });
    }

    int logsumexp_rows(int a) {
        const Tensor<T>& va = val(a);
        const int M = va.dim(0), N = va.dim(1);
        Tensor<T> out({M});
        for (int i = 0; i < M; i++) {
            T mx = va(i, 0);
            for (int j = 1; j < N; j++) mx = std::max(mx, va(i, j));
            T s = T(0);
            for (int j = 0; j < N; j++) s += std::exp(va(i, j) - mx);
            out(i) = mx + std::log(s);
        }
        return unary(std::move(out), a, [this, M, N](int nid, int pa) {
            const Tensor<T>& g = grad(nid);
            const Tensor<T>& y = val(nid);
            const Tensor<T>& va2 = val(pa);
            Tensor<T>& ga = grad(pa);
            for (int i = 0; i < M; i++)
                for (int j = 0; j < N; j++) ga(i, j) += g(i) * std::exp(va2(i, j) - y(i));
        });
    }

    int logsumexp_cols(int a) {
        const Tensor<T>& va = val(a);
        const int M = va.dim(0), N = va.dim(1);
        Tensor<T> out({N});
        for (int j = 0; j < N; j++) {
            T mx = va(0, j);
            for (int i = 1; i < M; i++) mx = std::max(mx, va(i, j));
            T s = T(0);
            for (int i = 0; i < M; i++) s += std::exp(va(i, j) - mx);
            out(j) = mx + std::log(s);
        }
        return unary(std::move(out), a, [this, M, N](int nid, int pa) {
            const Tensor<T>& g = grad(nid);
            const Tensor<T>& y = val(nid);
            const Tensor<T>& va2 = val(pa);
            Tensor<T>& ga = grad(pa);
            for (int j = 0; j < N; j++)
                for (int i = 0; i < M; i++) ga(i, j) += g(j) * std::exp(va2(i, j) - y(j));
        });
    }

    int diag(int a) {
        const Tensor<T>& va = val(a);
        const int M = va.dim(0);
        assert(va.dim(1) == M);
        Tensor<T> out({M});
        for (int i = 0; i < M; i++) out(i) = va(i, i);
        return unary(std::move(out), a, [this, M](int nid, int pa) {
            const Tensor<T>& g = grad(nid);
            Tensor<T>& ga = grad(pa);
            for (int i = 0; i < M; i++) ga(i, i) += g(i);
        });
    }

    int sum_all(int a) {
        const Tensor<T>& va = val(a);
        Tensor<T> out({1});
        T acc = T(0);
        for (int64_t i = 0; i < va.numel(); i++) acc += va.data[i];
        out(0) = acc;
        return unary(std::move(out), a, [this](int nid, int pa) {
            const T g = grad(nid)(0);
            Tensor<T>& ga = grad(pa);
            for (int64_t i = 0; i < ga.numel(); i++) ga.data[i] += g;
        });
    }

    int mean_all(int a) {
        int s = sum_all(a);
        return affine(s, T(1) / static_cast<T>(val(a).numel()), T(0));
    }

    // Seeds d(root)=1 and walks the tape backwards. root must be scalar.
    void backward(int root) {
        assert(val(root).numel() == 1);
        grad(root)(0) = T(1);
        for (int i = root; i >= 0; i--) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.needs_grad || !n.back) continue;
            if (!n.ext_grad && n.grad.shape != n.val.shape) continue; // nothing flowed here
            n.back();
        }
    }

private:
    struct Node {
        Tensor<T> val;
        Tensor<T> grad;
        Tensor<T>* ext_val = nullptr;  // set for parameter leaves
        Tensor<T>* ext_grad = nullptr;
        bool needs_grad = false;
        std::function<void()> back;
    };

    std::deque<Node> nodes_;

    static void axpy(Tensor<T>& y, const Tensor<T>& x, T a) {
        for (int64_t i = 0; i < y.numel(); i++) y.data[i] += a * x.data[i];
    }

    int push(Tensor<T> v, bool needs, std::function<void()> back) {
        nodes_.push_back(Node{std::move(v), {}, nullptr, nullptr, needs, std::move(back)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    template <typename F>
    int unary(Tensor<T> v, int a, F&& fn) {
        const bool needs = nodes_[static_cast<size_t>(a)].needs_grad;
        int id = push(std::move(v), needs, nullptr);
        if (needs)
            nodes_[static_cast<size_t>(id)].back = [this, id, a, fn]() { fn(id, a); };
        return id;
    }

    template <typename F>
    int unary_binary(Tensor<T> v, int a, int b, F&& fn) {
        const bool needs = nodes_[static_cast<size_t>(a)].needs_grad ||
                           nodes_[static_cast<size_t>(b)].needs_grad;
        int id = push(std::move(v), needs, nullptr);
        if (needs)
            nodes_[static_cast<size_t>(id)].back = [this, id, a, b, fn]() { fn(id, a, b); };
        return id;
    }

    template <typename F>
    int push_multi(Tensor<T> v, const std::vector<int>& parents, F&& fn) {
        bool needs = false;
        for (int p : parents) needs = needs || nodes_[static_cast<size_t>(p)].needs_grad;
        int id = push(std::move(v), needs, nullptr);
        if (needs)
            nodes_[static_cast<size_t>(id)].back = [this, id, fn]() { fn(id); };
        return id;
    }
};

} // namespace refseg::ad

#endif // REFSEG_AUTODIFF_H
