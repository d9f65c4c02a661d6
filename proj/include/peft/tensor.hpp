// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <cstring>
#include <utility>
#include <vector>

#include "peft/errors.hpp"

namespace peft {

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Shared storage behind a Tensor handle.
template <std::floating_point T>
struct TensorStorage {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::optional<std::vector<T>> grad;
};

/// Dense row-major array with an optional gradient buffer.
///
/// Tensor is a reference-counted handle: copies alias the same storage, which is
/// how adapters, optimizers and the tape all see one parameter. Use clone() for a
/// deep copy. 2-D tensors are [rows x cols]; a 1-D tensor [n] behaves as a single
/// row where an op needs a matrix view.
template <std::floating_point T>
class Tensor {
public:
    using value_type = T;

    Tensor() : storage_(std::make_shared<TensorStorage<T>>()) {}

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : storage_(std::make_shared<TensorStorage<T>>()) {
        if (shape_numel(shape) != data.size()) {
            throw DimensionError("tensor: shape " + shape_string(shape) + " holds " +
                                 std::to_string(shape_numel(shape)) + " elements but " +
                                 std::to_string(data.size()) + " were given");
        }
        storage_->shape = std::move(shape);
        storage_->data = std::move(data);
        storage_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return Tensor({1}, {value}, requires_grad);
    }

    static Tensor identity(std::size_t n) {
        auto t = zeros({n, n});
        for (std::size_t i = 0; i < n; ++i) t.at(i, i) = T{1};
        return t;
    }

    template <class Rng>
    static Tensor gaussian(Shape shape, T stddev, Rng& rng, bool requires_grad = false) {
        std::normal_distribution<T> dist(T{0}, stddev);
        auto t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.storage_->data) v = dist(rng);
        return t;
    }

    template <class Rng>
    static Tensor uniform(Shape shape, T lo, T hi, Rng& rng, bool requires_grad = false) {
        std::uniform_real_distribution<T> dist(lo, hi);
        auto t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.storage_->data) v = dist(rng);
        return t;
    }

    const Shape& shape() const { return storage_->shape; }
    std::size_t dim() const { return storage_->shape.size(); }
    std::size_t numel() const { return storage_->data.size(); }
    bool is_scalar() const { return numel() == 1; }

    std::size_t rows() const {
        const auto& s = shape();
        return s.size() >= 2 ? s[0] : 1;
    }
    std::size_t cols() const {
        const auto& s = shape();
        if (s.empty()) return 1;
        return s.size() >= 2 ? s[1] : s[0];
    }
    bool is_matrix() const { return dim() == 2; }
    bool is_vector() const { return dim() == 1 || (dim() == 2 && shape()[0] == 1); }

    std::span<T> data() { return storage_->data; }
    std::span<const T> data() const { return storage_->data; }
    std::vector<T>& values() { return storage_->data; }
    const std::vector<T>& values() const { return storage_->data; }

    T& operator[](std::size_t i) { return storage_->data[i]; }
    const T& operator[](std::size_t i) const { return storage_->data[i]; }
    T& at(std::size_t r, std::size_t c) { return storage_->data[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const { return storage_->data[r * cols() + c]; }
    T item() const {
        if (!is_scalar()) throw ContractError("item: tensor " + shape_string(shape()) + " is not a scalar");
        return storage_->data[0];
    }

    bool requires_grad() const { return storage_->requires_grad; }
    /// Turning gradients off also drops any accumulated gradient.
    void set_requires_grad(bool on) {
        storage_->requires_grad = on;
        if (!on) storage_->grad.reset();
    }

    bool has_grad() const { return storage_->grad.has_value(); }
    std::span<const T> grad() const {
        if (!storage_->grad) throw StateError("grad: tensor has no gradient");
        return *storage_->grad;
    }
    void zero_grad() {
        if (storage_->grad) std::fill(storage_->grad->begin(), storage_->grad->end(), T{0});
    }
    void clear_grad() { storage_->grad.reset(); }

    /// Adds `g` into the gradient buffer; a no-op for tensors that do not require grad.
    void accumulate_grad(std::span<const T> g) {
        if (!storage_->requires_grad) return;
        if (g.size() != numel()) throw DimensionError("accumulate_grad: size mismatch");
        if (!storage_->grad) storage_->grad.emplace(numel(), T{0});
        auto& dst = *storage_->grad;
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    }

    /// Adds `g` into grad[offset, offset + g.size()).
    void accumulate_grad_at(std::size_t offset, std::span<const T> g) {
        if (!storage_->requires_grad) return;
        if (offset + g.size() > numel()) throw DimensionError("accumulate_grad_at: range out of bounds");
        if (!storage_->grad) storage_->grad.emplace(numel(), T{0});
        T* dst = storage_->grad->data() + offset;
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }

    Tensor clone() const { return Tensor(shape(), values(), requires_grad()); }

    bool same_storage(const Tensor& other) const { return storage_ == other.storage_; }

    TensorStorage<T>& storage() { return *storage_; }

private:
    std::shared_ptr<TensorStorage<T>> storage_;
};

template <std::floating_point T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) detail::throw_dims("max_abs_diff", a.shape(), b.shape());
    T m{0};
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <std::floating_point T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape() == b.shape() &&
           std::equal(a.values().begin(), a.values().end(), b.values().begin(),
                      [](T x, T y) { return std::memcmp(&x, &y, sizeof(T)) == 0; });
}

}  // namespace peft
