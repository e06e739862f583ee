// SPDX-License-Identifier: Apache-2.0

#ifndef REFSEG_OPTIMIZER_H
#define REFSEG_OPTIMIZER_H

#include <cmath>
#include <stdexcept>
#include <vector>

#include "refseg/autodiff.h"
#include "refseg/config.h"

namespace refseg::train {

// Polynomial decay: lr0 * (1 - step/total)^power on [0, total_steps].
inline double lr_schedule(int64_t step, const RunConfig& cfg) {
    if (step < 0 || step > cfg.total_steps)
        throw std::out_of_range("lr_schedule: step outside [0, total_steps]");
    const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(cfg.total_steps);
    return cfg.lr0 * std::pow(frac, cfg.poly_power);
}

// AdamW with decoupled weight decay applied to every parameter.
template <typename T>
class AdamW {
public:
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 0.01;
    int64_t steps_taken = 0;

    void init(const ad::ParamStore<T>& store) {
        m_.clear();
        v_.clear();
        for (const auto& p : store.params) {
            m_.emplace_back(p.value.shape);
            v_.emplace_back(p.value.shape);
        }
    }

    bool initialized() const { return !m_.empty(); }

    void step(ad::ParamStore<T>& store, double lr) {
        if (m_.empty()) init(store);
        steps_taken++;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(steps_taken));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(steps_taken));
        int idx = 0;
        for (auto& p : store.params) {
            Tensor<T>& m = m_[static_cast<size_t>(idx)];
            Tensor<T>& v = v_[static_cast<size_t>(idx)];
            idx++;
            T* theta = p.value.ptr();
            const T* g = p.grad.ptr();
            T* mp = m.ptr();
            T* vp = v.ptr();
            const int64_t n = p.value.numel();
            #pragma omp parallel for
            for (int64_t i = 0; i < n; i++) {
                const double gi = static_cast<double>(g[i]);
                const double mi = beta1 * static_cast<double>(mp[i]) + (1.0 - beta1) * gi;
                const double vi = beta2 * static_cast<double>(vp[i]) + (1.0 - beta2) * gi * gi;
                mp[i] = static_cast<T>(mi);
                vp[i] = static_cast<T>(vi);
                const double mhat = mi / bc1;
                const double vhat = vi / bc2;
                double update = lr * mhat / (std::sqrt(vhat) + eps);
                update += lr * weight_decay * static_cast<double>(theta[i]);
                theta[i] = static_cast<T>(static_cast<double>(theta[i]) - update);
            }
        }
    }

    std::vector<Tensor<T>>& first_moments() { return m_; }
    std::vector<Tensor<T>>& second_moments() { return v_; }

private:
    std::vector<Tensor<T>> m_, v_;
};

} // namespace refseg::train

#endif // REFSEG_OPTIMIZER_H
