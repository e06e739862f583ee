// SPDX-License-Identifier: Apache-2.0
//
// Fusion encoder vs the serial loop-literal reference, reduction identities,
// masking and gating properties.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "refseg/fusion.h"
#include "refseg/model.h"
#include "refseg/reference_kernels.h"
#include "refseg/rng.h"
#include "refseg/vocab.h"

using namespace refseg;
using namespace refseg::model;

namespace {

void randomize(ad::ParamStore<double>& ps, Rng& rng, double scale = 0.5) {
    for (auto& p : ps.params)
        for (auto& v : p.value.data) v = scale * rng.normal();
}

Tensord slice_sample(const Tensord& batched, int b) {
    std::vector<int> shape(batched.shape.begin() + 1, batched.shape.end());
    Tensord out(shape);
    const int64_t inner = out.numel();
    std::copy(batched.data.begin() + b * inner, batched.data.begin() + (b + 1) * inner,
              out.data.begin());
    return out;
}

refk::MbaWeightsRef weights_of(const FusionStage<double>& st) {
    refk::MbaWeightsRef w;
    w.wq_a = st.wq_a.w->value;
    w.wk_a = st.wk_a.w->value;
    w.wv_a = st.wv_a.w->value;
    w.wq_b = st.wq_b.w->value;
    w.wk_b = st.wk_b.w->value;
    w.wv_b = st.wv_b.w->value;
    w.lambda_a.assign(st.lambda_a->value.data.begin(), st.lambda_a->value.data.end());
    w.lambda_b.assign(st.lambda_b->value.data.begin(), st.lambda_b->value.data.end());
    w.gamma_v.assign(st.gamma_v->value.data.begin(), st.gamma_v->value.data.end());
    w.gamma_e.assign(st.gamma_e->value.data.begin(), st.gamma_e->value.data.end());
    w.alpha_sides = st.window_sides;
    w.beta_runs = st.run_lengths;
    return w;
}

double max_abs_diff(const Tensord& a, const Tensord& b) {
    REQUIRE(a.numel() == b.numel());
    double m = 0;
    for (int64_t i = 0; i < a.numel(); i++) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

} // namespace

TEST_CASE("fusion step equals the loop-literal reference on random instances") {
    Rng rng(2024);
    for (int iter = 0; iter < 30; iter++) {
        const int H = rng.next_int(1, 4), W = rng.next_int(1, 4);
        const int L = rng.next_int(1, 8);
        const int Cv = rng.next_int(1, 8), Ce = rng.next_int(1, 8);
        const int B = 2;
        ad::ParamStore<double> ps;
        FusionStage<double> st;
        Rng wrng(rng.next_u64());
        st.build(ps, "st", Cv, Ce, {1, 3, 5}, {1, 2, 3}, wrng);
        randomize(ps, wrng);
        // non-trivial gates and mixtures so the full path is exercised
        for (auto& v : st.gamma_v->value.data) v = wrng.normal();
        for (auto& v : st.gamma_e->value.data) v = wrng.normal();

        Tensord v({B, Cv, H, W}), e({B, Ce, L});
        for (auto& x : v.data) x = rng.normal();
        for (auto& x : e.data) x = rng.normal();
        std::vector<int> valid = {rng.next_int(1, L), L};

        ad::Tape<double> t;
        auto out = st.apply(t, t.input(v), t.input(e), valid);

        const auto w = weights_of(st);
        for (int b = 0; b < B; b++) {
            Tensord v_ref, e_ref;
            refk::mba_step_naive(slice_sample(v, b), slice_sample(e, b), w, valid[b], v_ref, e_ref);
            CHECK(max_abs_diff(slice_sample(t.val(out.v_star), b), v_ref) < 1e-6);
            CHECK(max_abs_diff(slice_sample(t.val(out.e_star), b), e_ref) < 1e-6);
        }
    }
}

TEST_CASE("scale r=1 with lambda=[1,0,0] reproduces the single-point baseline") {
    Rng rng(5);
    const int B = 2, Cv = 6, Ce = 5, H = 3, W = 4, L = 7;
    ad::ParamStore<double> ps;
    FusionStage<double> st;
    st.build(ps, "st", Cv, Ce, {1, 3, 5}, {1, 2, 3}, rng);
    randomize(ps, rng);
    st.lambda_a->value.data = {1.0, 0.0, 0.0};

    Tensord v({B, Cv, H, W}), e({B, Ce, L});
    for (auto& x : v.data) x = rng.normal();
    for (auto& x : e.data) x = rng.normal();
    std::vector<int> valid = {4, 7};

    ad::Tape<double> t;
    int vn = t.input(v), en = t.input(e);
    auto out = st.apply(t, vn, en, valid);
    int base = baseline_cross_attention(t, t.reshape(vn, {B, Cv, H * W}), en,
                                        st.wq_a, st.wk_a, st.wv_a, valid);
    CHECK(max_abs_diff(t.val(out.aligned_a), t.val(base)) <= 1e-12);
    // the r=1 per-scale attention matrix is bitwise the baseline weights
    CHECK(max_abs_diff(t.val(out.att_a_scales[0]),
                       t.val(out.att_a)) <= 1e-12);
}

TEST_CASE("zero gates make the fusion step an exact identity") {
    Rng rng(9);
    const int B = 2, Cv = 4, Ce = 4, H = 2, W = 2, L = 5;
    ad::ParamStore<double> ps;
    FusionStage<double> st;
    st.build(ps, "st", Cv, Ce, {1, 3, 5}, {1, 2, 3}, rng);
    // randomize projections but leave gamma at the zero init
    for (auto& p : ps.params)
        if (p.name.find("gamma") == std::string::npos)
            for (auto& v : p.value.data) v = rng.normal();

    Tensord v({B, Cv, H, W}), e({B, Ce, L});
    for (auto& x : v.data) x = rng.normal();
    for (auto& x : e.data) x = rng.normal();
    ad::Tape<double> t;
    auto out = st.apply(t, t.input(v), t.input(e), {3, 5});
    CHECK(t.val(out.v_star).data == v.data); // bitwise
    CHECK(t.val(out.e_star).data == e.data);
}

TEST_CASE("attention rows are stochastic; mixture rows sum to sum(lambda)") {
    Rng rng(31);
    const int B = 2, Cv = 5, Ce = 6, H = 3, W = 3, L = 6;
    ad::ParamStore<double> ps;
    FusionStage<double> st;
    st.build(ps, "st", Cv, Ce, {1, 3, 5}, {1, 2, 3}, rng);
    randomize(ps, rng);
    st.lambda_a->value.data = {0.2, 0.5, 0.3};
    st.lambda_b->value.data = {-0.1, 0.6, 0.4};

    Tensord v({B, Cv, H, W}), e({B, Ce, L});
    for (auto& x : v.data) x = rng.normal();
    for (auto& x : e.data) x = rng.normal();
    std::vector<int> valid = {4, 6};
    ad::Tape<double> t;
    auto out = st.apply(t, t.input(v), t.input(e), valid);

    for (int scale = 0; scale < 3; scale++) {
        const auto& att = t.val(out.att_a_scales[static_cast<size_t>(scale)]);
        for (int b = 0; b < B; b++)
            for (int i = 0; i < H * W; i++) {
                double sum = 0;
                for (int l = 0; l < L; l++) {
                    sum += att(b, i, l);
                    if (l >= valid[static_cast<size_t>(b)]) CHECK(att(b, i, l) == 0.0);
                }
                CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
            }
        const auto& attb = t.val(out.att_b_scales[static_cast<size_t>(scale)]);
        for (int b = 0; b < B; b++)
            for (int i = 0; i < L; i++) {
                double sum = 0;
                for (int n = 0; n < H * W; n++) sum += attb(b, i, n);
                if (i < valid[static_cast<size_t>(b)])
                    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
                else
                    CHECK(sum == 0.0);
            }
    }
    const auto& mixed = t.val(out.att_a);
    const double lsum = 0.2 + 0.5 + 0.3;
    for (int b = 0; b < B; b++)
        for (int i = 0; i < H * W; i++) {
            double sum = 0;
            for (int l = 0; l < L; l++) sum += mixed(b, i, l);
            CHECK(sum == doctest::Approx(lsum).epsilon(1e-9));
        }
}

TEST_CASE("all-equal pixel vectors give identical attention rows at any scale") {
    Rng rng(41);
    const int Cv = 4, Ce = 4, H = 2, W = 2, L = 5;
    ad::ParamStore<double> ps;
    FusionStage<double> st;
    st.build(ps, "st", Cv, Ce, {1, 3, 5}, {1, 2, 3}, rng);
    randomize(ps, rng);
    Tensord v({1, Cv, H, W}), e({1, Ce, L});
    for (int c = 0; c < Cv; c++) {
        const double val = rng.normal();
        for (int i = 0; i < H * W; i++) v.data[static_cast<size_t>(c * H * W + i)] = val;
    }
    for (auto& x : e.data) x = rng.normal();
    ad::Tape<double> t;
    auto out = st.apply(t, t.input(v), t.input(e), {5});
    for (const int scale : {0, 1, 2}) {
        const auto& att = t.val(out.att_a_scales[static_cast<size_t>(scale)]);
        for (int i = 1; i < H * W; i++)
            for (int l = 0; l < L; l++)
                CHECK(att(0, i, l) == doctest::Approx(att(0, 0, l)).epsilon(1e-12));
    }
}

TEST_CASE("single spatial position: text-direction rows are exactly one") {
    Rng rng(43);
    const int Cv = 3, Ce = 4, L = 4;
    ad::ParamStore<double> ps;
    FusionStage<double> st;
    st.build(ps, "st", Cv, Ce, {1, 3, 5}, {1, 2, 3}, rng);
    randomize(ps, rng);
    Tensord v({1, Cv, 1, 1}), e({1, Ce, L});
    for (auto& x : v.data) x = rng.normal();
    for (auto& x : e.data) x = rng.normal();
    ad::Tape<double> t;
    auto out = st.apply(t, t.input(v), t.input(e), {3});
    for (const int scale : {0, 1, 2}) {
        const auto& att = t.val(out.att_b_scales[static_cast<size_t>(scale)]);
        for (int i = 0; i < 3; i++) CHECK(att(0, i, 0) == 1.0);
        CHECK(att(0, 3, 0) == 0.0); // pad row
    }
}

TEST_CASE("encoder cascade: stage sizes, zero-gate passthrough, determinism") {
    RunConfig cfg;
    cfg.stage_channels = {8, 16, 24, 32};
    cfg.stem_channels = 8;
    cfg.text_channels = 16;
    cfg.max_tokens = 8;
    cfg.image_size = 64;
    cfg.validate();
    text::Vocab vocab = text::Vocab::builtin();
    Net<double> net(cfg, vocab.size());

    Rng rng(77);
    const int B = 2;
    Tensord images({B, 3, 64, 64});
    for (auto& x : images.data) x = rng.next_double();
    Tensor<int> tokens({B, 8});
    tokens.fill(0);
    tokens(0, 0) = vocab.id("the");
    tokens(0, 1) = vocab.id("red");
    tokens(0, 2) = vocab.id("circle");
    tokens(1, 0) = vocab.id("the");
    tokens(1, 1) = vocab.id("blue");
    tokens(1, 2) = vocab.id("squares");
    std::vector<int> valid = {3, 3};

    ad::Tape<double> t;
    auto enc = net.encode(t, t.input(images), tokens, valid);
    const int sizes[4] = {16, 8, 4, 2};
    for (int n = 0; n < 4; n++) {
        const auto& vs = t.val(enc.v_star[static_cast<size_t>(n)]);
        CHECK(vs.dim(1) == cfg.stage_channels[static_cast<size_t>(n)]);
        CHECK(vs.dim(2) == sizes[n]);
        CHECK(vs.dim(3) == sizes[n]);
    }

    // gates are zero-initialized: fused features equal the plain backbone path
    // and the refined text equals the raw encoder output
    ad::Tape<double> t2;
    int x = net.backbone.apply_stem(t2, t2.input(images));
    for (int n = 0; n < 4; n++) {
        x = net.backbone.apply_stage(t2, x, n);
        CHECK(t2.val(x).data == t.val(enc.v_star[static_cast<size_t>(n)]).data);
    }
    int e_plain = net.text.apply(t2, tokens, valid);
    CHECK(t2.val(e_plain).data == t.val(enc.e_star4).data);

    // determinism
    ad::Tape<double> t3;
    auto enc3 = net.encode(t3, t3.input(images), tokens, valid);
    CHECK(t3.val(enc3.v_star[3]).data == t.val(enc.v_star[3]).data);
}

TEST_CASE("text encoder: valid positions are invariant to pad-region ids") {
    RunConfig cfg;
    cfg.text_channels = 16;
    cfg.max_tokens = 10;
    text::Vocab vocab = text::Vocab::builtin();
    ad::ParamStore<double> ps;
    TextEncoder<double> enc;
    Rng rng(123);
    enc.build(ps, "text", vocab.size(), 16, 10, 2, 8, 2, rng);

    Tensor<int> a({1, 10}), b({1, 10});
    a.fill(0);
    b.fill(0);
    for (int i = 0; i < 4; i++) {
        const int id = rng.next_int(3, vocab.size() - 1);
        a(0, i) = id;
        b(0, i) = id;
    }
    for (int i = 4; i < 10; i++) b(0, i) = rng.next_int(3, vocab.size() - 1); // junk pads

    ad::Tape<double> t;
    int ya = enc.apply(t, a, {4});
    int yb = enc.apply(t, b, {4});
    for (int c = 0; c < 16; c++)
        for (int l = 0; l < 4; l++)
            CHECK(t.val(ya)(0, c, l) == t.val(yb)(0, c, l)); // bitwise
}

TEST_CASE("text encoder output shape and determinism") {
    text::Vocab vocab = text::Vocab::builtin();
    ad::ParamStore<double> ps;
    TextEncoder<double> enc;
    Rng rng(5);
    enc.build(ps, "text", vocab.size(), 16, 20, 2, 8, 2, rng);
    Tensor<int> ids({2, 20});
    ids.fill(0);
    ids(0, 0) = 5;
    ids(1, 0) = 6;
    ad::Tape<double> t;
    int y = enc.apply(t, ids, {1, 1});
    CHECK(t.val(y).shape == std::vector<int>{2, 16, 20});
    ad::Tape<double> t2;
    int y2 = enc.apply(t2, ids, {1, 1});
    CHECK(t.val(y).data == t2.val(y2).data);
}
