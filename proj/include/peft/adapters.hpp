// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <string>
#include <vector>

#include "peft/errors.hpp"
#include "peft/graph.hpp"
#include "peft/tensor.hpp"

namespace peft {

/// Low-rank update attached to a frozen weight W0 [m x n].
///
/// Unmerged forward is W0 x + (alpha / r) B (A x) with A [r x n], B [m x r].
/// B starts at zero so a fresh adapter leaves its host computation untouched.
/// merge() folds the scaled update into the weight storage in place, so every
/// holder of the weight handle sees the merged matrix; unmerge() subtracts it again.
template <std::floating_point T>
class LoraAdapter {
public:
    template <class Rng>
    LoraAdapter(Tensor<T> base_weight, std::size_t rank, T alpha, Rng& rng)
        : weight_(std::move(base_weight)), rank_(rank), alpha_(alpha) {
        validate_shape();
        a_ = Tensor<T>::gaussian({rank_, weight_.cols()}, T{1} / std::sqrt(static_cast<T>(rank_)), rng, true);
        b_ = Tensor<T>::zeros({weight_.rows(), rank_}, true);
    }

    /// Rebuilds an adapter from stored factors.
    LoraAdapter(Tensor<T> base_weight, Tensor<T> a, Tensor<T> b, T alpha, bool merged = false)
        : weight_(std::move(base_weight)), a_(std::move(a)), b_(std::move(b)), rank_(a_.rows()), alpha_(alpha),
          merged_(merged) {
        validate_shape();
        if (a_.shape() != Shape{rank_, weight_.cols()}) detail::throw_dims("lora A", weight_.shape(), a_.shape());
        if (b_.shape() != Shape{weight_.rows(), rank_}) detail::throw_dims("lora B", weight_.shape(), b_.shape());
        a_.set_requires_grad(true);
        b_.set_requires_grad(true);
    }

    std::size_t rank() const { return rank_; }
    T alpha() const { return alpha_; }
    T scaling() const { return alpha_ / static_cast<T>(rank_); }
    bool merged() const { return merged_; }
    std::size_t out_features() const { return weight_.rows(); }
    std::size_t in_features() const { return weight_.cols(); }

    /// W0 while unmerged, W0 + (alpha/r) B A while merged.
    const Tensor<T>& weight() const { return weight_; }
    const Tensor<T>& a() const { return a_; }
    const Tensor<T>& b() const { return b_; }
    Tensor<T>& a() { return a_; }
    Tensor<T>& b() { return b_; }

    /// Column convention: x is [n x cols], result [m x cols].
    Tensor<T> forward(Graph<T>& g, const Tensor<T>& x) const {
        if (merged_) throw StateError("lora forward: adapter is merged");
        if (x.rows() != in_features() || !x.is_matrix()) detail::throw_dims("lora forward", weight_.shape(), x.shape());
        auto base = g.matmul(weight_, x);
        auto delta = g.matmul(b_, g.matmul(a_, x));
        return g.add(base, g.scale(delta, scaling()));
    }

    /// Row convention used inside the model: h is [t x n], result [t x m].
    /// Valid in both states; when merged only the folded weight is used.
    Tensor<T> forward_rows(Graph<T>& g, const Tensor<T>& h) const {
        if (h.cols() != in_features()) detail::throw_dims("lora forward_rows", h.shape(), weight_.shape());
        auto base = g.matmul(h, g.transpose(weight_));
        if (merged_) return base;
        auto delta = g.matmul(g.matmul(h, g.transpose(a_)), g.transpose(b_));
        return g.add(base, g.scale(delta, scaling()));
    }

    /// Returns the merged weight W0 + (alpha/r) B A and enters the merged state.
    const Tensor<T>& merge() {
        if (merged_) throw StateError("lora merge: adapter already merged");
        apply_delta(T{1});
        merged_ = true;
        return weight_;
    }

    void unmerge() {
        if (!merged_) throw StateError("lora unmerge: adapter is not merged");
        apply_delta(T{-1});
        merged_ = false;
    }

    /// (alpha/r) B A as a plain matrix.
    Tensor<T> delta_weight() const {
        const auto m = out_features(), n = in_features();
        auto d = Tensor<T>::zeros({m, n});
        const T s = scaling();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t k = 0; k < rank_; ++k) {
                const T bik = b_.at(i, k);
                if (bik == T{0}) continue;
                for (std::size_t j = 0; j < n; ++j) d.at(i, j) += bik * a_.at(k, j);
            }
        for (auto& v : d.values()) v *= s;
        return d;
    }

    std::vector<Tensor<T>> trainable_parameters() const { return {a_, b_}; }
    std::size_t trainable_count() const { return rank_ * (out_features() + in_features()); }

private:
    void validate_shape() {
        if (!weight_.is_matrix()) throw DimensionError("lora: base weight must be a matrix, got " + shape_string(weight_.shape()));
        weight_.set_requires_grad(false);
        const auto lim = std::min(weight_.rows(), weight_.cols());
        if (rank_ == 0 || rank_ > lim) {
            throw ConfigError("lora: rank " + std::to_string(rank_) + " not in [1, " + std::to_string(lim) +
                              "] for weight " + shape_string(weight_.shape()));
        }
        if (!(alpha_ > T{0})) throw ConfigError("lora: alpha must be positive");
    }

    void apply_delta(T sign) {
        const auto d = delta_weight();
        auto& w = weight_.values();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] += sign * d[i];
    }

    Tensor<T> weight_;
    Tensor<T> a_;
    Tensor<T> b_;
    std::size_t rank_;
    T alpha_;
    bool merged_ = false;
};

enum class Similarity { cosine, dot };

/// Tokenwise task-aware filter.
///
/// For each token row h_i of H [t x d]:
///   w_i   = clamp01(sim(h_i, task_vector))
///   out_i = h_i + (w_i h_i) T_down T_up
/// T_up starts at zero, so a fresh filter is the identity map.
template <std::floating_point T>
class TaskAwareFilter {
public:
    template <class Rng>
    TaskAwareFilter(std::size_t dim, std::size_t rank, Rng& rng, Similarity sim = Similarity::cosine)
        : similarity_(sim) {
        if (dim == 0 || rank == 0 || rank > dim) {
            throw ConfigError("filter: rank " + std::to_string(rank) + " not in [1, " + std::to_string(dim) + "]");
        }
        const T sd = T{1} / std::sqrt(static_cast<T>(dim));
        task_vector_ = Tensor<T>::gaussian({dim}, sd, rng, true);
        t_down_ = Tensor<T>::gaussian({dim, rank}, sd, rng, true);
        t_up_ = Tensor<T>::zeros({rank, dim}, true);
    }

    TaskAwareFilter(Tensor<T> task_vector, Tensor<T> t_down, Tensor<T> t_up, Similarity sim = Similarity::cosine)
        : task_vector_(std::move(task_vector)), t_down_(std::move(t_down)), t_up_(std::move(t_up)), similarity_(sim) {
        const auto d = task_vector_.numel();
        if (t_down_.rows() != d || !t_down_.is_matrix()) detail::throw_dims("filter T_down", task_vector_.shape(), t_down_.shape());
        if (t_up_.shape() != Shape{t_down_.cols(), d}) detail::throw_dims("filter T_up", t_down_.shape(), t_up_.shape());
        if (rank() == 0 || rank() > d) throw ConfigError("filter: rank must be in [1, d]");
        for (auto* t : {&task_vector_, &t_down_, &t_up_}) t->set_requires_grad(true);
    }

    std::size_t dim() const { return task_vector_.numel(); }
    std::size_t rank() const { return t_down_.cols(); }
    Similarity similarity() const { return similarity_; }

    const Tensor<T>& task_vector() const { return task_vector_; }
    const Tensor<T>& t_down() const { return t_down_; }
    const Tensor<T>& t_up() const { return t_up_; }
    Tensor<T>& task_vector() { return task_vector_; }
    Tensor<T>& t_down() { return t_down_; }
    Tensor<T>& t_up() { return t_up_; }

    /// Clamped relevance weights [t x 1].
    Tensor<T> weights(Graph<T>& g, const Tensor<T>& h) const {
        check(h);
        auto s = similarity_ == Similarity::cosine ? g.cosine_rows(h, task_vector_) : g.dot_rows(h, task_vector_);
        return g.clamp01(s);
    }

    /// The additive term (w_i h_i) T_down T_up.
    Tensor<T> delta(Graph<T>& g, const Tensor<T>& h, Tensor<T>* weights_out = nullptr) const {
        auto w = weights(g, h);
        if (weights_out) *weights_out = w;
        auto reweighted = g.scale_rows(h, w);
        return g.matmul(g.matmul(reweighted, t_down_), t_up_);
    }

    Tensor<T> apply(Graph<T>& g, const Tensor<T>& h, Tensor<T>* weights_out = nullptr) const {
        return g.add(h, delta(g, h, weights_out));
    }

    std::vector<Tensor<T>> trainable_parameters() const { return {task_vector_, t_down_, t_up_}; }
    std::size_t trainable_count() const { return dim() + 2 * dim() * rank(); }

private:
    void check(const Tensor<T>& h) const {
        if (h.cols() != dim()) detail::throw_dims("filter", h.shape(), task_vector_.shape());
    }

    Tensor<T> task_vector_;
    Tensor<T> t_down_;
    Tensor<T> t_up_;
    Similarity similarity_;
};

}  // namespace peft
