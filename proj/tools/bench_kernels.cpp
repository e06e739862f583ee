// SPDX-License-Identifier: Apache-2.0
//
// Times the OpenMP kernels against the serial loop-literal reference and
// reports the max absolute deviation for each pair.

#include <chrono>
#include <cstdio>
#include <functional>

#include <omp.h>

#include "refseg/fusion.h"
#include "refseg/kernels.h"
#include "refseg/reference_kernels.h"
#include "refseg/rng.h"

using namespace refseg;
using Clock = std::chrono::steady_clock;

namespace {

double time_ms(const std::function<void()>& fn, int iters) {
    fn(); // warm up
    const auto t0 = Clock::now();
    for (int i = 0; i < iters; i++) fn();
    const auto t1 = Clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / iters;
}

double max_diff(const Tensord& a, const Tensord& b) {
    double m = 0;
    for (int64_t i = 0; i < a.numel(); i++) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

void row(const char* name, double fast_ms, double ref_ms, double diff) {
    std::printf("%-26s %10.3f %10.3f %9.1fx %12.2e\n", name, fast_ms, ref_ms, ref_ms / fast_ms,
                diff);
}

} // namespace

int main() {
    std::printf("threads: %d\n", omp_get_max_threads());
    std::printf("%-26s %10s %10s %10s %12s\n", "kernel", "fast ms", "serial ms", "speedup",
                "max |diff|");

    Rng rng(1);

    { // matmul
        const int M = 192, N = 192, K = 192;
        Tensord a({M, K}), b({K, N}), c({M, N});
        for (auto& v : a.data) v = rng.normal();
        for (auto& v : b.data) v = rng.normal();
        const double fast =
            time_ms([&] { kern::matmul(a.ptr(), b.ptr(), c.ptr(), M, N, K, false, false, false); }, 10);
        Tensord want;
        const double ref = time_ms([&] { want = refk::matmul_naive(a, b); }, 3);
        row("matmul 192^3", fast, ref, max_diff(c, want));
    }

    { // conv2d
        const int B = 4, Cin = 32, H = 32, W = 32, Cout = 64;
        Tensord x({B, Cin, H, W}), w({Cout, Cin, 3, 3});
        std::vector<double> bias(Cout);
        for (auto& v : x.data) v = rng.normal();
        for (auto& v : w.data) v = rng.normal();
        for (auto& v : bias) v = rng.normal();
        Tensord y;
        const double fast = time_ms([&] { kern::conv2d_forward(x, w, bias.data(), 1, 1, y); }, 5);
        Tensord want;
        const double ref = time_ms([&] { want = refk::conv2d_naive(x, w, bias, 1, 1); }, 2);
        row("conv2d 4x32x32x32->64", fast, ref, max_diff(y, want));
    }

    { // full fusion step (both directions, 3 scales each)
        const int B = 4, Cv = 32, H = 16, W = 16, Ce = 64, L = 20;
        ad::ParamStore<double> ps;
        model::FusionStage<double> st;
        Rng wrng(7);
        st.build(ps, "st", Cv, Ce, {1, 3, 5}, {1, 2, 3}, wrng);
        for (auto& p : ps.params)
            for (auto& v : p.value.data) v = 0.3 * wrng.normal();
        Tensord v({B, Cv, H, W}), e({B, Ce, L});
        for (auto& x : v.data) x = rng.normal();
        for (auto& x : e.data) x = rng.normal();
        std::vector<int> valid(B, L);

        Tensord v_fast, e_fast;
        const double fast = time_ms([&] {
            ad::Tape<double> t;
            auto out = st.apply(t, t.input(v), t.input(e), valid);
            v_fast = t.val(out.v_star);
            e_fast = t.val(out.e_star);
        }, 5);

        const auto w = [&] {
            refk::MbaWeightsRef w2;
            w2.wq_a = st.wq_a.w->value;
            w2.wk_a = st.wk_a.w->value;
            w2.wv_a = st.wv_a.w->value;
            w2.wq_b = st.wq_b.w->value;
            w2.wk_b = st.wk_b.w->value;
            w2.wv_b = st.wv_b.w->value;
            w2.lambda_a.assign(st.lambda_a->value.data.begin(), st.lambda_a->value.data.end());
            w2.lambda_b.assign(st.lambda_b->value.data.begin(), st.lambda_b->value.data.end());
            w2.gamma_v.assign(st.gamma_v->value.data.begin(), st.gamma_v->value.data.end());
            w2.gamma_e.assign(st.gamma_e->value.data.begin(), st.gamma_e->value.data.end());
            w2.alpha_sides = st.window_sides;
            w2.beta_runs = st.run_lengths;
            return w2;
        }();

        Tensord v_ref({B, Cv, H, W}), e_ref({B, Ce, L});
        const double ref = time_ms([&] {
            for (int b = 0; b < B; b++) {
                Tensord vb({Cv, H, W}), eb({Ce, L});
                std::copy(v.data.begin() + b * Cv * H * W, v.data.begin() + (b + 1) * Cv * H * W,
                          vb.data.begin());
                std::copy(e.data.begin() + b * Ce * L, e.data.begin() + (b + 1) * Ce * L,
                          eb.data.begin());
                Tensord vo, eo;
                refk::mba_step_naive(vb, eb, w, L, vo, eo);
                std::copy(vo.data.begin(), vo.data.end(), v_ref.data.begin() + b * Cv * H * W);
                std::copy(eo.data.begin(), eo.data.end(), e_ref.data.begin() + b * Ce * L);
            }
        }, 2);
        const double diff = std::max(max_diff(v_fast, v_ref), max_diff(e_fast, e_ref));
        row("fusion step 16x16,L=20", fast, ref, diff);
    }

    { // windowed logit sums
        const int B = 8, H = 16, W = 16, L = 20;
        Tensord x({B, H * W, L}), y({B, H * W, L});
        for (auto& v : x.data) v = rng.normal();
        const double fast =
            time_ms([&] { kern::window_sum_alpha(x.ptr(), y.ptr(), B, H, W, L, 5); }, 20);
        Tensord want({B, H * W, L});
        const double ref = time_ms([&] {
            for (int b = 0; b < B; b++)
                for (int cy = 0; cy < H; cy++)
                    for (int cx = 0; cx < W; cx++)
                        for (int l = 0; l < L; l++) {
                            double acc = 0;
                            for (int my = cy - 2; my <= cy + 2; my++)
                                for (int mx = cx - 2; mx <= cx + 2; mx++) {
                                    if (my < 0 || my >= H || mx < 0 || mx >= W) continue;
                                    acc += x(b, my * W + mx, l);
                                }
                            want(b, cy * W + cx, l) = acc;
                        }
        }, 5);
        row("window_sum 5x5", fast, ref, max_diff(y, want));
    }

    return 0;
}
