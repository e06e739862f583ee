// SPDX-License-Identifier: Apache-2.0

#include "refseg/metrics.h"

#include <algorithm>
#include <stdexcept>

namespace refseg::metrics {

namespace {

void count_pixels(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt,
                  int64_t* inter, int64_t* uni, int64_t* gt_fg) {
    if (pred.shape != gt.shape) throw std::invalid_argument("iou: mask shapes differ");
    int64_t i = 0, u = 0, g = 0;
    for (int64_t k = 0; k < pred.numel(); k++) {
        const bool p = pred.data[static_cast<size_t>(k)] != 0;
        const bool t = gt.data[static_cast<size_t>(k)] != 0;
        i += p && t;
        u += p || t;
        g += t;
    }
    *inter = i;
    *uni = u;
    *gt_fg = g;
}

} // namespace

double iou(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt) {
    int64_t inter = 0, uni = 0, gt_fg = 0;
    count_pixels(pred, gt, &inter, &uni, &gt_fg);
    if (gt_fg == 0) throw std::invalid_argument("iou: ground truth is empty (one-to-zero sample)");
    return static_cast<double>(inter) / static_cast<double>(uni);
}

SampleResult score_sample(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt,
                          data::Setting setting) {
    SampleResult r;
    r.setting = setting;
    if (setting == data::Setting::one_to_zero) {
        bool clean = true;
        for (int64_t k = 0; k < pred.numel(); k++)
            if (pred.data[static_cast<size_t>(k)]) {
                clean = false;
                break;
            }
        r.background_clean = clean;
        return r;
    }
    int64_t inter = 0, uni = 0, gt_fg = 0;
    count_pixels(pred, gt, &inter, &uni, &gt_fg);
    if (gt_fg == 0) throw std::invalid_argument("targeted sample has empty ground truth");
    r.intersection = inter;
    r.union_count = uni;
    r.iou_value = static_cast<double>(inter) / static_cast<double>(uni);
    return r;
}

void Accumulator::add(const SampleResult& r) {
    switch (r.setting) {
        case data::Setting::one_to_zero:
            zero_total++;
            zero_clean += r.background_clean ? 1 : 0;
            return;
        case data::Setting::one_to_one:
            count_one_to_one++;
            break;
        case data::Setting::one_to_many:
            count_one_to_many++;
            break;
    }
    total_intersection += r.intersection;
    total_union += r.union_count;
    ious.push_back(r.iou_value);
}

void Accumulator::merge(const Accumulator& other) {
    total_intersection += other.total_intersection;
    total_union += other.total_union;
    ious.insert(ious.end(), other.ious.begin(), other.ious.end());
    zero_total += other.zero_total;
    zero_clean += other.zero_clean;
    count_one_to_one += other.count_one_to_one;
    count_one_to_many += other.count_one_to_many;
}

Report finalize(const Accumulator& acc) {
    Report rep;
    rep.targeted_count = static_cast<int64_t>(acc.ious.size());
    rep.one_to_zero_count = acc.zero_total;
    rep.count_one_to_one = acc.count_one_to_one;
    rep.count_one_to_many = acc.count_one_to_many;
    if (!acc.ious.empty()) {
        rep.oiou = static_cast<double>(acc.total_intersection) /
                   static_cast<double>(acc.total_union);
        // sorted before summing so the report is independent of accumulation order
        std::vector<double> sorted = acc.ious;
        std::sort(sorted.begin(), sorted.end());
        double sum = 0.0;
        int64_t over50 = 0, over70 = 0, over90 = 0;
        for (double v : sorted) {
            sum += v;
            over50 += v > 0.5;
            over70 += v > 0.7;
            over90 += v > 0.9;
        }
        const double n = static_cast<double>(sorted.size());
        rep.miou = sum / n;
        rep.prec50 = over50 / n;
        rep.prec70 = over70 / n;
        rep.prec90 = over90 / n;
    }
    if (acc.zero_total > 0)
        rep.acc = static_cast<double>(acc.zero_clean) / static_cast<double>(acc.zero_total);
    return rep;
}

nlohmann::json Report::to_json() const {
    nlohmann::json j;
    j["counts"] = {{"one_to_one", count_one_to_one},
                   {"one_to_many", count_one_to_many},
                   {"one_to_zero", one_to_zero_count},
                   {"targeted", targeted_count}};
    if (oiou) j["oIoU"] = *oiou;
    if (miou) j["mIoU"] = *miou;
    if (prec50) {
        j["prec"] = {{"0.5", *prec50}, {"0.7", *prec70}, {"0.9", *prec90}};
    }
    if (acc) j["acc"] = *acc;
    return j;
}

} // namespace refseg::metrics
