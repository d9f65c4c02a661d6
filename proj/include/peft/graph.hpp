// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "peft/errors.hpp"
#include "peft/tensor.hpp"

namespace peft {

enum class GradMode { enabled, disabled };

/// Epsilon added to the norm product in cosine similarity.
inline constexpr double kCosineEps = 1e-8;
/// Variance epsilon used by layer_norm.
inline constexpr double kLayerNormEps = 1e-6;

/// Dynamic tape for reverse-mode differentiation.
///
/// Every op computes its value eagerly and, when any input requires grad, pushes
/// an adjoint closure. backward() replays the closures in exact reverse order of
/// execution. A graph is single-use: after backward() it must be reset() before
/// recording again. Parameters (leaf tensors) live outside the graph and keep
/// accumulating gradient across graphs until zeroed.
///
/// Broadcasting: add/sub/mul accept either equal shapes or a matrix [m x n] with
/// a trailing vector of n elements, which is applied to every row. The adjoint
/// of the vector is summed over rows. No other broadcasting exists.
template <std::floating_point T>
class Graph {
public:
    using Tn = Tensor<T>;

    explicit Graph(GradMode mode = GradMode::enabled) : mode_(mode) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) noexcept = default;
    Graph& operator=(Graph&&) noexcept = default;

    bool recording() const { return mode_ == GradMode::enabled; }
    std::size_t size() const { return tape_.size(); }
    bool consumed() const { return consumed_; }

    void reset() {
        tape_.clear();
        consumed_ = false;
    }

    void backward(Tn loss) {
        if (consumed_) throw StateError("backward: graph already differentiated; call reset() first");
        if (!loss.is_scalar()) {
            throw ContractError("backward: loss must be a scalar, got " + shape_string(loss.shape()));
        }
        if (tape_.empty() || !loss.requires_grad()) {
            throw ContractError("backward: loss does not depend on any tensor that requires grad");
        }
        consumed_ = true;
        auto seed = loss;
        seed.storage().grad = std::vector<T>{T{1}};
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
    }

    // ---------------------------------------------------------------- linear algebra

    Tn matmul(Tn a, Tn b) {
        const auto m = a.rows(), k = a.cols(), n = b.cols();
        if (b.rows() != k || a.dim() > 2 || b.dim() > 2) detail::throw_dims("matmul", a.shape(), b.shape());
        std::vector<T> out(m * n, T{0});
        gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
        auto c = result({m, n}, std::move(out), {&a, &b});
        if (c.requires_grad()) {
            record([a, b, c, m, k, n]() mutable {
                if (!c.has_grad()) return;
                const auto g = c.grad();
                if (a.requires_grad()) {
                    // dA = dC . B^T
                    std::vector<T> bt(n * k), da(m * k, T{0});
                    transpose_into(b.values().data(), bt.data(), k, n);
                    gemm_nn(g.data(), bt.data(), da.data(), m, n, k);
                    a.accumulate_grad(da);
                }
                if (b.requires_grad()) {
                    // dB = A^T . dC
                    std::vector<T> at(k * m), db(k * n, T{0});
                    transpose_into(a.values().data(), at.data(), m, k);
                    gemm_nn(at.data(), g.data(), db.data(), k, m, n);
                    b.accumulate_grad(db);
                }
            });
        }
        return c;
    }

    Tn transpose(Tn a) {
        const auto m = a.rows(), n = a.cols();
        std::vector<T> out(m * n);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
        auto c = result({n, m}, std::move(out), {&a});
        if (c.requires_grad()) {
            record([a, c, m, n]() mutable {
                if (!c.has_grad()) return;
                const auto g = c.grad();
                std::vector<T> da(m * n);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) da[i * n + j] = g[j * m + i];
                a.accumulate_grad(da);
            });
        }
        return c;
    }

    // ---------------------------------------------------------------- elementwise

    Tn add(Tn a, Tn b) { return binary("add", a, b, Binary::add); }
    Tn sub(Tn a, Tn b) { return binary("sub", a, b, Binary::sub); }
    Tn mul(Tn a, Tn b) { return binary("mul", a, b, Binary::mul); }

    Tn scale(Tn a, T s) {
        std::vector<T> out(a.values());
        for (auto& v : out) v *= s;
        auto c = result(a.shape(), std::move(out), {&a});
        if (c.requires_grad()) {
            record([a, c, s]() mutable {
                if (!c.has_grad()) return;
                std::vector<T> da(c.grad().begin(), c.grad().end());
                for (auto& v : da) v *= s;
                a.accumulate_grad(da);
            });
        }
        return c;
    }

    /// min(1, max(0, x)); the adjoint passes only on the open interval (0, 1).
    Tn clamp01(Tn a) {
        std::vector<T> out(a.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(T{1}, std::max(T{0}, a[i]));
        auto c = result(a.shape(), std::move(out), {&a});
        if (c.requires_grad()) {
            record([a, c]() mutable {
                if (!c.has_grad()) return;
                const auto g = c.grad();
                std::vector<T> da(a.numel(), T{0});
                for (std::size_t i = 0; i < da.size(); ++i)
                    if (a[i] > T{0} && a[i] < T{1}) da[i] = g[i];
                a.accumulate_grad(da);
            });
        }
        return c;
    }

    Tn gelu(Tn a) {
        std::vector<T> out(a.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * normal_cdf(a[i]);
        auto c = result(a.shape(), std::move(out), {&a});
        if (c.requires_grad()) {
            record([a, c]() mutable {
                if (!c.has_grad()) return;
                const auto g = c.grad();
                std::vector<T> da(a.numel());
                for (std::size_t i = 0; i < da.size(); ++i) {
                    const T x = a[i];
                    da[i] = g[i] * (normal_cdf(x) + x * normal_pdf(x));
                }
                a.accumulate_grad(da);
            });
        }
        return c;
    }

    // ---------------------------------------------------------------- similarity

    /// (u . v) / (|u| |v| + eps) as a 1x1 tensor.
    Tn cosine_sim(Tn u, Tn v) {
        if (!u.is_vector() || !v.is_vector() || u.numel() != v.numel())
            detail::throw_dims("cosine_sim", u.shape(), v.shape());
        return cosine_rows(u, v);
    }

    /// Cosine similarity of every row of h [t x d] against v [d]; result is [t x 1].
    Tn cosine_rows(Tn h, Tn v) {
        const auto t = h.rows(), d = h.cols();
        if (!v.is_vector() || v.numel() != d) detail::throw_dims("cosine_rows", h.shape(), v.shape());
        T vnorm{0};
        for (std::size_t j = 0; j < d; ++j) vnorm += v[j] * v[j];
        vnorm = std::sqrt(vnorm);
        std::vector<T> out(t), dots(t), hnorms(t);
        for (std::size_t i = 0; i < t; ++i) {
            T p{0}, hn{0};
            for (std::size_t j = 0; j < d; ++j) {
                p += h[i * d + j] * v[j];
                hn += h[i * d + j] * h[i * d + j];
            }
            dots[i] = p;
            hnorms[i] = std::sqrt(hn);
            out[i] = p / (hnorms[i] * vnorm + static_cast<T>(kCosineEps));
        }
        auto c = result({t, 1}, std::move(out), {&h, &v});
        if (c.requires_grad()) {
            record([h, v, c, t, d, vnorm, dots = std::move(dots), hnorms = std::move(hnorms)]() mutable {
                if (!c.has_grad()) return;
                const auto g = c.grad();
                std::vector<T> dh(h.requires_grad() ? t * d : 0, T{0});
                std::vector<T> dv(d, T{0});
                for (std::size_t i = 0; i < t; ++i) {
                    if (g[i] == T{0}) continue;
                    const T n = hnorms[i] * vnorm + static_cast<T>(kCosineEps);
                    const T inv = T{1} / n;
                    const T p_n2 = dots[i] / (n * n);
                    const T hcoef = hnorms[i] > T{0} ? p_n2 * vnorm / hnorms[i] : T{0};
                    const T vcoef = vnorm > T{0} ? p_n2 * hnorms[i] / vnorm : T{0};
                    for (std::size_t j = 0; j < d; ++j) {
                        const T hij = h[i * d + j];
                        if (!dh.empty()) dh[i * d + j] = g[i] * (v[j] * inv - hcoef * hij);
                        dv[j] += g[i] * (hij * inv - vcoef * v[j]);
                    }
                }
                if (!dh.empty()) h.accumulate_grad(dh);
                v.accumulate_grad(dv);
            });
        }
        return c;
    }

    /// Raw dot product of every row of h [t x d] with v [d]; result is [t x 1].
    Tn dot_rows(Tn h, Tn v) {
        const auto t = h.rows(), d = h.cols();
        if (!v.is_vector() || v.numel() != d) detail::throw_dims("dot_rows", h.shape(), v.shape());
        std::vector<T> out(t, T{0});
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < d; ++j) out[i] += h[i * d + j] * v[j];
        auto c = result({t, 1}, std::move(out), {&h, &v});
        if (c.requires_grad()) {
            record([h, v, c, t, d]() mutable {
                if (!c.has_grad()) return;
                const auto g = c.grad();
                std::vector<T> dh(t * d), dv(d, T{0});
                for (std::size_t i = 0; i < t; ++i)
                    for (std::size_t j = 0; j < d; ++j) {
                        dh[i * d + j] = g[i] * v[j];
                        dv[j] += g[i] * h[i * d + j];
                    }
                h.accumulate_grad(dh);
                v.accumulate_grad(dv);
            });
        }
        return c;
    }

    /// Multiplies row i of h [t x d] by w[i]; w has t elements.
    Tn scale_rows(Tn h, Tn w) {
        const auto t = h.rows(), d = h.cols();
        if (w.numel() != t) detail::throw_dims("scale_rows", h.shape(), w.shape());
        std::vector<T> out(t * d);
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] = w[i] * h[i * d + j];
        auto c = result({t, d}, std::move(out), {&h, &w});
        if (c.requires_grad()) {
            record([h, w, c, t, d]() mutable {
                if (!c.has_grad()) return;
                const auto g = c.grad();
                std::vector<T> dh(t * d), dw(t, T{0});
                for (std::size_t i = 0; i < t; ++i)
                    for (std::size_t j = 0; j < d; ++j) {
                        dh[i * d + j] = g[i * d + j] * w[i];
                        dw[i] += g[i * d + j] * h[i * d + j];
                    }
                h.accumulate_grad(dh);
                w.accumulate_grad(dw);
            });
        }
        return c;
    }

    // ---------------------------------------------------------------- normalisation

    Tn softmax_rows(Tn a) {
        const auto m = a.rows(), n = a.cols();
        std::vector<T> out(m * n);
        for (std::size_t i = 0; i < m; ++i) {
            T mx = a[i * n];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a[i * n + j]);
            T s{0};
            for (std::size_t j = 0; j < n; ++j) s += (out[i * n + j] = std::exp(a[i * n + j] - mx));
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= s;
        }
        auto c = result({m, n}, std::move(out), {&a});
        if (c.requires_grad()) {
            record([a, c, m, n]() mutable {
                if (!c.has_grad()) return;
                const auto g = c.grad();
                std::vector<T> da(m * n);
                for (std::size_t i = 0; i < m; ++i) {
                    T dot{0};
                    for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * c[i * n + j];
                    for (std::size_t j = 0; j < n; ++j) da[i * n + j] = c[i * n + j] * (g[i * n + j] - dot);
                }
                a.accumulate_grad(da);
            });
        }
        return c;
    }

    /// Normalises each row to zero mean / unit variance, then applies gain and bias.
    Tn layer_norm(Tn x, Tn gain, Tn bias) {
        const auto m = x.rows(), n = x.cols();
        if (gain.numel() != n) detail::throw_dims("layer_norm", x.shape(), gain.shape());
        if (bias.numel() != n) detail::throw_dims("layer_norm", x.shape(), bias.shape());
        std::vector<T> out(m * n), xhat(m * n), inv_std(m);
        for (std::size_t i = 0; i < m; ++i) {
            T mu{0};
            for (std::size_t j = 0; j < n; ++j) mu += x[i * n + j];
            mu /= static_cast<T>(n);
            T var{0};
            for (std::size_t j = 0; j < n; ++j) var += (x[i * n + j] - mu) * (x[i * n + j] - mu);
            var /= static_cast<T>(n);
            inv_std[i] = T{1} / std::sqrt(var + static_cast<T>(kLayerNormEps));
            for (std::size_t j = 0; j < n; ++j) {
                xhat[i * n + j] = (x[i * n + j] - mu) * inv_std[i];
                out[i * n + j] = xhat[i * n + j] * gain[j] + bias[j];
            }
        }
        auto c = result({m, n}, std::move(out), {&x, &gain, &bias});
        if (c.requires_grad()) {
            record([x, gain, bias, c, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
                if (!c.has_grad()) return;
                const auto g = c.grad();
                std::vector<T> dx(m * n), dgain(n, T{0}), dbias(n, T{0}), dxhat(n);
                for (std::size_t i = 0; i < m; ++i) {
                    T mean_d{0}, mean_dx{0};
                    for (std::size_t j = 0; j < n; ++j) {
                        const T gij = g[i * n + j];
                        dgain[j] += gij * xhat[i * n + j];
                        dbias[j] += gij;
                        dxhat[j] = gij * gain[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat[i * n + j];
                    }
                    mean_d /= static_cast<T>(n);
                    mean_dx /= static_cast<T>(n);
                    for (std::size_t j = 0; j < n; ++j)
                        dx[i * n + j] = inv_std[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                }
                x.accumulate_grad(dx);
                gain.accumulate_grad(dgain);
                bias.accumulate_grad(dbias);
            });
        }
        return c;
    }

    // ---------------------------------------------------------------- reductions

    Tn sum(Tn a) {
        T s{0};
        for (std::size_t i = 0; i < a.numel(); ++i) s += a[i];
        auto c = result({1}, {s}, {&a});
        if (c.requires_grad()) {
            record([a, c]() mutable {
                if (!c.has_grad()) return;
                a.accumulate_grad(std::vector<T>(a.numel(), c.grad()[0]));
            });
        }
        return c;
    }

    /// Column means of a [m x n]; result is [1 x n].
    Tn mean_rows(Tn a) {
        const auto m = a.rows(), n = a.cols();
        if (m == 0) throw ContractError("mean_rows: empty input");
        std::vector<T> out(n, T{0});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[j] += a[i * n + j];
        for (auto& v : out) v /= static_cast<T>(m);
        auto c = result({1, n}, std::move(out), {&a});
        if (c.requires_grad()) {
            record([a, c, m, n]() mutable {
                if (!c.has_grad()) return;
                const auto g = c.grad();
                std::vector<T> da(m * n);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) da[i * n + j] = g[j] / static_cast<T>(m);
                a.accumulate_grad(da);
            });
        }
        return c;
    }

    /// Mean cross-entropy of logits [batch x classes] against integer labels.
    Tn cross_entropy(Tn logits, std::span<const std::size_t> labels) {
        const auto b = logits.rows(), k = logits.cols();
        if (labels.size() != b) {
            throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                 shape_string(logits.shape()) + " logits");
        }
        std::vector<T> probs(b * k);
        T loss{0};
        for (std::size_t i = 0; i < b; ++i) {
            if (labels[i] >= k) throw InputError("cross_entropy: label " + std::to_string(labels[i]) + " out of range");
            T mx = logits[i * k];
            for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits[i * k + j]);
            T s{0};
            for (std::size_t j = 0; j < k; ++j) s += (probs[i * k + j] = std::exp(logits[i * k + j] - mx));
            for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= s;
            loss += -(logits[i * k + labels[i]] - mx - std::log(s));
        }
        loss /= static_cast<T>(b);
        auto c = result({1}, {loss}, {&logits});
        if (c.requires_grad()) {
            std::vector<std::size_t> lab(labels.begin(), labels.end());
            record([logits, c, b, k, probs = std::move(probs), lab = std::move(lab)]() mutable {
                if (!c.has_grad()) return;
                const T g = c.grad()[0] / static_cast<T>(b);
                std::vector<T> dl(b * k);
                for (std::size_t i = 0; i < b; ++i)
                    for (std::size_t j = 0; j < k; ++j)
                        dl[i * k + j] = g * (probs[i * k + j] - (j == lab[i] ? T{1} : T{0}));
                logits.accumulate_grad(dl);
            });
        }
        return c;
    }

    /// Multi-head scaled dot-product attention over consecutive row segments.
    ///
    /// q, k, v are [N x d] with N = sum(lengths); rows of segment s attend only to
    /// rows of the same segment. Each of `heads` heads owns d / heads consecutive
    /// columns. Output is [N x d] with heads concatenated column-wise.
    Tn attention(Tn q, Tn k, Tn v, std::span<const std::size_t> lengths, std::size_t heads) {
        const auto n_rows = q.rows(), d = q.cols();
        if (k.shape() != q.shape()) detail::throw_dims("attention", q.shape(), k.shape());
        if (v.shape() != q.shape()) detail::throw_dims("attention", q.shape(), v.shape());
        if (heads == 0 || d % heads != 0) throw DimensionError("attention: width " + std::to_string(d) +
                                                               " not divisible by " + std::to_string(heads) + " heads");
        std::size_t total = 0, probs_size = 0;
        for (auto len : lengths) {
            total += len;
            probs_size += heads * len * len;
        }
        if (total != n_rows) throw DimensionError("attention: segment lengths do not cover " + shape_string(q.shape()));
        const auto dh = d / heads;
        const T scale = T{1} / std::sqrt(static_cast<T>(dh));
        std::vector<T> out(n_rows * d, T{0}), probs(probs_size);
        std::size_t off = 0, poff = 0;
        for (auto len : lengths) {
            for (std::size_t h = 0; h < heads; ++h, poff += len * len) {
                T* p = probs.data() + poff;
                for (std::size_t i = 0; i < len; ++i) {
                    const T* qi = q.values().data() + (off + i) * d + h * dh;
                    T mx = -std::numeric_limits<T>::infinity();
                    for (std::size_t j = 0; j < len; ++j) {
                        const T* kj = k.values().data() + (off + j) * d + h * dh;
                        T z{0};
                        for (std::size_t e = 0; e < dh; ++e) z += qi[e] * kj[e];
                        p[i * len + j] = z * scale;
                        mx = std::max(mx, p[i * len + j]);
                    }
                    T sum{0};
                    for (std::size_t j = 0; j < len; ++j) sum += (p[i * len + j] = std::exp(p[i * len + j] - mx));
                    T* oi = out.data() + (off + i) * d + h * dh;
                    for (std::size_t j = 0; j < len; ++j) {
                        p[i * len + j] /= sum;
                        const T* vj = v.values().data() + (off + j) * d + h * dh;
                        for (std::size_t e = 0; e < dh; ++e) oi[e] += p[i * len + j] * vj[e];
                    }
                }
            }
            off += len;
        }
        auto c = result({n_rows, d}, std::move(out), {&q, &k, &v});
        if (c.requires_grad()) {
            std::vector<std::size_t> lens(lengths.begin(), lengths.end());
            record([q, k, v, c, d, dh, heads, scale, lens = std::move(lens), probs = std::move(probs)]() mutable {
                if (!c.has_grad()) return;
                const auto g = c.grad();
                std::vector<T> dq(q.numel(), T{0}), dk(k.numel(), T{0}), dv(v.numel(), T{0}), dz;
                std::size_t off = 0, poff = 0;
                for (auto len : lens) {
                    dz.assign(len * len, T{0});
                    for (std::size_t h = 0; h < heads; ++h, poff += len * len) {
                        const T* p = probs.data() + poff;
                        for (std::size_t i = 0; i < len; ++i) {
                            const T* gi = g.data() + (off + i) * d + h * dh;
                            T row_dot{0};
                            for (std::size_t j = 0; j < len; ++j) {
                                const T* vj = v.values().data() + (off + j) * d + h * dh;
                                T* dvj = dv.data() + (off + j) * d + h * dh;
                                T ds{0};
                                for (std::size_t e = 0; e < dh; ++e) {
                                    ds += gi[e] * vj[e];
                                    dvj[e] += p[i * len + j] * gi[e];
                                }
                                dz[i * len + j] = ds;
                                row_dot += ds * p[i * len + j];
                            }
                            for (std::size_t j = 0; j < len; ++j)
                                dz[i * len + j] = p[i * len + j] * (dz[i * len + j] - row_dot) * scale;
                        }
                        for (std::size_t i = 0; i < len; ++i) {
                            const T* qi = q.values().data() + (off + i) * d + h * dh;
                            T* dqi = dq.data() + (off + i) * d + h * dh;
                            for (std::size_t j = 0; j < len; ++j) {
                                const T z = dz[i * len + j];
                                const T* kj = k.values().data() + (off + j) * d + h * dh;
                                T* dkj = dk.data() + (off + j) * d + h * dh;
                                for (std::size_t e = 0; e < dh; ++e) {
                                    dqi[e] += z * kj[e];
                                    dkj[e] += z * qi[e];
                                }
                            }
                        }
                    }
                    off += len;
                }
                q.accumulate_grad(dq);
                k.accumulate_grad(dk);
                v.accumulate_grad(dv);
            });
        }
        return c;
    }

    // ---------------------------------------------------------------- indexing

    Tn slice_rows(Tn a, std::size_t begin, std::size_t count) {
        const auto n = a.cols();
        if (begin + count > a.rows()) {
            throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                                 ") out of " + shape_string(a.shape()));
        }
        std::vector<T> out(a.values().begin() + static_cast<std::ptrdiff_t>(begin * n),
                           a.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
        auto c = result({count, n}, std::move(out), {&a});
        if (c.requires_grad()) {
            record([a, c, begin, n]() mutable {
                if (!c.has_grad()) return;
                a.accumulate_grad_at(begin * n, c.grad());
            });
        }
        return c;
    }

    Tn slice_cols(Tn a, std::size_t begin, std::size_t count) {
        const auto m = a.rows(), n = a.cols();
        if (begin + count > n) {
            throw DimensionError("slice_cols: cols [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                                 ") out of " + shape_string(a.shape()));
        }
        std::vector<T> out(m * count);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a[i * n + begin + j];
        auto c = result({m, count}, std::move(out), {&a});
        if (c.requires_grad()) {
            record([a, c, begin, count, m, n]() mutable {
                if (!c.has_grad()) return;
                const auto g = c.grad();
                std::vector<T> da(m * n, T{0});
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < count; ++j) da[i * n + begin + j] = g[i * count + j];
                a.accumulate_grad(da);
            });
        }
        return c;
    }

    Tn concat_rows(const std::vector<Tn>& parts) {
        if (parts.empty()) throw ContractError("concat_rows: no inputs");
        const auto n = parts.front().cols();
        std::size_t m = 0;
        for (const auto& p : parts) {
            if (p.cols() != n) detail::throw_dims("concat_rows", parts.front().shape(), p.shape());
            m += p.rows();
        }
        std::vector<T> out;
        out.reserve(m * n);
        bool any = false;
        for (const auto& p : parts) {
            out.insert(out.end(), p.values().begin(), p.values().end());
            any = any || p.requires_grad();
        }
        auto c = result({m, n}, std::move(out), any);
        if (c.requires_grad()) {
            record([parts = parts, c]() mutable {
                if (!c.has_grad()) return;
                const auto g = c.grad();
                std::size_t off = 0;
                for (auto& p : parts) {
                    p.accumulate_grad(g.subspan(off, p.numel()));
                    off += p.numel();
                }
            });
        }
        return c;
    }

    Tn concat_cols(const std::vector<Tn>& parts) {
        if (parts.empty()) throw ContractError("concat_cols: no inputs");
        const auto m = parts.front().rows();
        std::size_t n = 0;
        bool any = false;
        for (const auto& p : parts) {
            if (p.rows() != m) detail::throw_dims("concat_cols", parts.front().shape(), p.shape());
            n += p.cols();
            any = any || p.requires_grad();
        }
        std::vector<T> out(m * n);
        std::size_t off = 0;
        for (const auto& p : parts) {
            const auto w = p.cols();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) out[i * n + off + j] = p[i * w + j];
            off += w;
        }
        auto c = result({m, n}, std::move(out), any);
        if (c.requires_grad()) {
            record([parts = parts, c, m, n]() mutable {
                if (!c.has_grad()) return;
                const auto g = c.grad();
                std::size_t off = 0;
                for (auto& p : parts) {
                    const auto w = p.cols();
                    if (p.requires_grad()) {
                        std::vector<T> dp(m * w);
                        for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < w; ++j) dp[i * w + j] = g[i * n + off + j];
                        p.accumulate_grad(dp);
                    }
                    off += w;
                }
            });
        }
        return c;
    }

    /// Rows of `table` [V x d] selected by `ids`; result is [ids.size() x d].
    Tn gather_rows(Tn table, std::span<const std::size_t> ids) {
        const auto v = table.rows(), d = table.cols();
        std::vector<T> out(ids.size() * d);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] >= v) {
                throw InputError("gather_rows: index " + std::to_string(ids[i]) + " out of range for " +
                                 std::to_string(v) + " rows");
            }
            std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                        out.begin() + static_cast<std::ptrdiff_t>(i * d));
        }
        auto c = result({ids.size(), d}, std::move(out), {&table});
        if (c.requires_grad()) {
            std::vector<std::size_t> idx(ids.begin(), ids.end());
            record([table, c, d, idx = std::move(idx)]() mutable {
                if (!c.has_grad()) return;
                const auto g = c.grad();
                std::vector<T> dt(table.numel(), T{0});
                for (std::size_t i = 0; i < idx.size(); ++i)
                    for (std::size_t j = 0; j < d; ++j) dt[idx[i] * d + j] += g[i * d + j];
                table.accumulate_grad(dt);
            });
        }
        return c;
    }

private:
    enum class Binary { add, sub, mul };

    static constexpr double kInvSqrt2 = 0.70710678118654752440;

    static T normal_cdf(T x) { return T{0.5} * (T{1} + std::erf(x * static_cast<T>(kInvSqrt2))); }
    static T normal_pdf(T x) {
        return std::exp(T{-0.5} * x * x) * static_cast<T>(std::numbers::inv_sqrtpi * kInvSqrt2);
    }

    static void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
        for (std::size_t i = 0; i < m; ++i) {
            T* __restrict crow = c + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const T aip = a[i * k + p];
                const T* __restrict brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
            }
        }
    }

    static void transpose_into(const T* src, T* dst, std::size_t rows, std::size_t cols) {
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
    }

    Tn result(Shape shape, std::vector<T> data, std::initializer_list<const Tn*> inputs) {
        bool any = false;
        for (const auto* t : inputs) any = any || t->requires_grad();
        return result(std::move(shape), std::move(data), any);
    }

    Tn result(Shape shape, std::vector<T> data, bool any_input_requires_grad) {
        if (consumed_) throw StateError("graph already differentiated; call reset() before recording");
        return Tn(std::move(shape), std::move(data), recording() && any_input_requires_grad);
    }

    template <class F>
    void record(F&& adjoint) {
        tape_.emplace_back(std::forward<F>(adjoint));
    }

    Tn binary(const char* name, Tn a, Tn b, Binary kind) {
        const bool same = a.shape() == b.shape();
        const bool bcast = !same && a.is_matrix() && b.is_vector() && b.numel() == a.cols();
        if (!same && !bcast) detail::throw_dims(name, a.shape(), b.shape());
        const auto n = a.numel(), w = b.numel();
        std::vector<T> out(n);
        for (std::size_t i = 0; i < n; ++i) {
            const T bv = b[same ? i : i % w];
            switch (kind) {
                case Binary::add: out[i] = a[i] + bv; break;
                case Binary::sub: out[i] = a[i] - bv; break;
                case Binary::mul: out[i] = a[i] * bv; break;
            }
        }
        auto c = result(a.shape(), std::move(out), {&a, &b});
        if (c.requires_grad()) {
            record([a, b, c, kind, same, n, w]() mutable {
                if (!c.has_grad()) return;
                const auto g = c.grad();
                if (a.requires_grad()) {
                    std::vector<T> da(g.begin(), g.end());
                    if (kind == Binary::mul)
                        for (std::size_t i = 0; i < n; ++i) da[i] *= b[same ? i : i % w];
                    a.accumulate_grad(da);
                }
                if (b.requires_grad()) {
                    std::vector<T> db(w, T{0});
                    for (std::size_t i = 0; i < n; ++i) {
                        const std::size_t j = same ? i : i % w;
                        switch (kind) {
                            case Binary::add: db[j] += g[i]; break;
                            case Binary::sub: db[j] -= g[i]; break;
                            case Binary::mul: db[j] += g[i] * a[i]; break;
                        }
                    }
                    b.accumulate_grad(db);
                }
            });
        }
        return c;
    }

    std::vector<std::function<void()>> tape_;
    GradMode mode_;
    bool consumed_ = false;
};

}  // namespace peft
