// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "refseg/metrics.h"
#include "refseg/rng.h"

using namespace refseg;
using namespace refseg::metrics;
using data::Setting;

namespace {

Tensor<uint8_t> mask_from(std::initializer_list<int> bits, int h, int w) {
    Tensor<uint8_t> m({h, w});
    int i = 0;
    for (int b : bits) m.data[static_cast<size_t>(i++)] = static_cast<uint8_t>(b);
    return m;
}

Tensor<uint8_t> random_mask(Rng& rng, int h, int w, double p_fg) {
    Tensor<uint8_t> m({h, w});
    for (auto& v : m.data) v = rng.next_double() < p_fg ? 1 : 0;
    return m;
}

} // namespace

TEST_CASE("iou: identity, disjoint, hand case, empty gt rejected") {
    Tensor<uint8_t> a({4, 4});
    for (int i = 0; i < 8; i++) a.data[static_cast<size_t>(i)] = 1;
    CHECK(iou(a, a) == 1.0);

    Tensor<uint8_t> b({4, 4});
    for (int i = 8; i < 16; i++) b.data[static_cast<size_t>(i)] = 1;
    CHECK(iou(b, a) == 0.0);

    // pred 8 px, gt 8 px, overlap 4 -> 4/12
    Tensor<uint8_t> gt({4, 4}), pred({4, 4});
    for (int i = 0; i < 8; i++) gt.data[static_cast<size_t>(i)] = 1;
    for (int i = 4; i < 12; i++) pred.data[static_cast<size_t>(i)] = 1;
    CHECK(iou(pred, gt) == doctest::Approx(4.0 / 12.0).epsilon(1e-12));

    Tensor<uint8_t> empty({4, 4});
    CHECK_THROWS_AS(iou(pred, empty), std::invalid_argument);
}

TEST_CASE("accumulate: hand pixel counts for oIoU and mIoU") {
    // sample 1: inter 4, union 12; sample 2: inter 8, union 8
    Tensor<uint8_t> gt1({4, 4}), pr1({4, 4}), gt2({4, 4});
    for (int i = 0; i < 8; i++) gt1.data[static_cast<size_t>(i)] = 1;
    for (int i = 4; i < 12; i++) pr1.data[static_cast<size_t>(i)] = 1;
    for (int i = 0; i < 8; i++) gt2.data[static_cast<size_t>(i)] = 1;

    Accumulator acc;
    acc.add(score_sample(pr1, gt1, Setting::one_to_one));
    acc.add(score_sample(gt2, gt2, Setting::one_to_many));
    Report rep = finalize(acc);
    CHECK(*rep.oiou == doctest::Approx(12.0 / 20.0).epsilon(1e-12));
    CHECK(*rep.miou == doctest::Approx((4.0 / 12.0 + 1.0) / 2.0).epsilon(1e-4));
    CHECK(rep.targeted_count == 2);
}

TEST_CASE("one-to-zero routing: clean and dirty predictions") {
    Tensor<uint8_t> empty({4, 4});
    Tensor<uint8_t> dirty({4, 4});
    dirty(2, 2) = 1;

    Accumulator acc;
    acc.add(score_sample(empty, empty, Setting::one_to_zero));
    acc.add(score_sample(dirty, empty, Setting::one_to_zero));
    Report rep = finalize(acc);
    CHECK(*rep.acc == 0.5);
    CHECK_FALSE(rep.oiou.has_value()); // no targeted family -> absent, not zero
    CHECK_FALSE(rep.miou.has_value());
    CHECK(rep.one_to_zero_count == 2);
}

TEST_CASE("finalize: precision thresholds are strict and monotone") {
    Accumulator acc;
    for (double v : {0.6, 0.8, 0.95}) {
        SampleResult r;
        r.setting = Setting::one_to_one;
        r.intersection = static_cast<int64_t>(v * 100);
        r.union_count = 100;
        r.iou_value = v;
        acc.add(r);
    }
    Report rep = finalize(acc);
    CHECK(*rep.prec50 == doctest::Approx(1.0));
    CHECK(*rep.prec70 == doctest::Approx(2.0 / 3.0));
    CHECK(*rep.prec90 == doctest::Approx(1.0 / 3.0));
    CHECK(*rep.prec50 >= *rep.prec70);
    CHECK(*rep.prec70 >= *rep.prec90);

    // exactly-at-threshold counts as below ("higher than X")
    Accumulator at;
    SampleResult r;
    r.setting = Setting::one_to_one;
    r.iou_value = 0.5;
    r.intersection = 1;
    r.union_count = 2;
    at.add(r);
    CHECK(*finalize(at).prec50 == 0.0);
}

TEST_CASE("single perfect sample: all IoU metrics are 1") {
    Tensor<uint8_t> gt({4, 4});
    gt(1, 1) = 1;
    Accumulator acc;
    acc.add(score_sample(gt, gt, Setting::one_to_one));
    Report rep = finalize(acc);
    CHECK(*rep.oiou == 1.0);
    CHECK(*rep.miou == 1.0);
    CHECK(*rep.prec90 == 1.0);
}

TEST_CASE("permuted accumulation order yields the identical report") {
    Rng rng(55);
    std::vector<SampleResult> results;
    for (int i = 0; i < 64; i++) {
        Tensor<uint8_t> gt = random_mask(rng, 8, 8, 0.4);
        Tensor<uint8_t> pr = random_mask(rng, 8, 8, 0.4);
        bool gt_empty = std::all_of(gt.data.begin(), gt.data.end(), [](uint8_t v) { return v == 0; });
        const Setting s = gt_empty ? Setting::one_to_zero
                                   : (i % 2 ? Setting::one_to_one : Setting::one_to_many);
        results.push_back(score_sample(pr, gt, s));
    }
    Accumulator fwd, perm;
    for (const auto& r : results) fwd.add(r);
    std::vector<size_t> order(results.size());
    for (size_t i = 0; i < order.size(); i++) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    for (size_t i : order) perm.add(results[i]);
    Report a = finalize(fwd), b = finalize(perm);
    CHECK(a.to_json() == b.to_json());

    // associative merge of two partials equals one-shot
    Accumulator p1, p2;
    for (size_t i = 0; i < results.size(); i++) (i < 30 ? p1 : p2).add(results[i]);
    p1.merge(p2);
    CHECK(finalize(p1).to_json() == a.to_json());
}

TEST_CASE("streaming equals brute force on random mask pairs (integer oracle)") {
    Rng rng(77);
    Accumulator acc;
    int64_t brute_inter = 0, brute_union = 0;
    std::vector<double> brute_ious;
    for (int i = 0; i < 300; i++) {
        Tensor<uint8_t> gt = random_mask(rng, 6, 7, 0.5);
        Tensor<uint8_t> pr = random_mask(rng, 6, 7, 0.5);
        bool gt_empty = std::all_of(gt.data.begin(), gt.data.end(), [](uint8_t v) { return v == 0; });
        if (gt_empty) continue;
        int64_t bi = 0, bu = 0;
        for (int64_t k = 0; k < gt.numel(); k++) {
            bi += gt.data[static_cast<size_t>(k)] && pr.data[static_cast<size_t>(k)];
            bu += gt.data[static_cast<size_t>(k)] || pr.data[static_cast<size_t>(k)];
        }
        brute_inter += bi;
        brute_union += bu;
        brute_ious.push_back(static_cast<double>(bi) / static_cast<double>(bu));
        acc.add(score_sample(pr, gt, Setting::one_to_one));
    }
    Report rep = finalize(acc);
    CHECK(*rep.oiou == static_cast<double>(brute_inter) / static_cast<double>(brute_union));
    double msum = 0;
    std::sort(brute_ious.begin(), brute_ious.end());
    for (double v : brute_ious) msum += v;
    CHECK(*rep.miou == msum / static_cast<double>(brute_ious.size()));
}

TEST_CASE("mIoU equals oIoU when all samples share union size and IoU") {
    Accumulator acc;
    for (int i = 0; i < 5; i++) {
        SampleResult r;
        r.setting = Setting::one_to_one;
        r.intersection = 30;
        r.union_count = 40;
        r.iou_value = 0.75;
        acc.add(r);
    }
    Report rep = finalize(acc);
    CHECK(*rep.oiou == doctest::Approx(*rep.miou).epsilon(1e-12));
}
