// SPDX-License-Identifier: Apache-2.0

#ifndef REFSEG_METRICS_H
#define REFSEG_METRICS_H

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "refseg/dataset.h"
#include "refseg/tensor.h"

namespace refseg::metrics {

// |pred AND gt| / |pred OR gt| on binary masks; gt must be non-empty
// (one-to-zero samples are scored by accuracy instead).
double iou(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt);

struct SampleResult {
    data::Setting setting = data::Setting::one_to_one;
    int64_t intersection = 0; // targeted samples only
    int64_t union_count = 0;
    double iou_value = 0.0;
    bool background_clean = false; // one-to-zero samples only
};

SampleResult score_sample(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt,
                          data::Setting setting);

// Commutative-monoid accumulator: integer sums plus a bag of per-sample IoUs.
// merge() is associative, so partial accumulators can be combined in any order.
struct Accumulator {
    int64_t total_intersection = 0;
    int64_t total_union = 0;
    std::vector<double> ious;
    int64_t zero_total = 0;
    int64_t zero_clean = 0;
    int64_t count_one_to_one = 0;
    int64_t count_one_to_many = 0;

    void add(const SampleResult& r);
    void merge(const Accumulator& other);
};

struct Report {
    std::optional<double> oiou;
    std::optional<double> miou;
    std::optional<double> prec50, prec70, prec90;
    std::optional<double> acc;
    int64_t targeted_count = 0;
    int64_t one_to_zero_count = 0;
    int64_t count_one_to_one = 0;
    int64_t count_one_to_many = 0;

    nlohmann::json to_json() const;
};

// oIoU = total intersection / total union; mIoU = mean per-sample IoU;
// prec@X = fraction of targeted samples with IoU strictly above X;
// acc = fraction of one-to-zero samples predicted all-background.
// Families with no samples are absent from the report.
Report finalize(const Accumulator& acc);

} // namespace refseg::metrics

#endif // REFSEG_METRICS_H
