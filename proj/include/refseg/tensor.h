// SPDX-License-Identifier: Apache-2.0

#ifndef REFSEG_TENSOR_H
#define REFSEG_TENSOR_H

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

namespace refseg {

// Dense row-major tensor. Rank up to 4 is what the model uses:
// (B,C,H,W) for visual maps, (B,C,L) for token features, (B,C) pooled.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), fill);
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator()(int i) { return data[static_cast<size_t>(i)]; }
    const T& operator()(int i) const { return data[static_cast<size_t>(i)]; }
    T& operator()(int i, int j) {
        return data[static_cast<size_t>(i) * shape[1] + j];
    }
    const T& operator()(int i, int j) const {
        return data[static_cast<size_t>(i) * shape[1] + j];
    }
    T& operator()(int i, int j, int k) {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    const T& operator()(int i, int j, int k) const {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    T& operator()(int i, int j, int k, int l) {
        return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }
    const T& operator()(int i, int j, int k, int l) const {
        return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    Tensor reshaped(std::vector<int> s) const {
        assert(numel_of(s) == numel());
        Tensor out;
        out.shape = std::move(s);
        out.data = data;
        return out;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); i++) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

} // namespace refseg

#endif // REFSEG_TENSOR_H
