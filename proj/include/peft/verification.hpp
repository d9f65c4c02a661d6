// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "peft/adapters.hpp"
#include "peft/errors.hpp"
#include "peft/graph.hpp"
#include "peft/model.hpp"
#include "peft/tensor.hpp"

namespace peft {

// ============================================================================
// Finite-difference gradient check
// ============================================================================

struct ParamCheck {
    std::string name;
    std::size_t size = 0;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;  // at worst_index
    double numeric = 0.0;
};

struct GradCheckReport {
    std::vector<ParamCheck> params;
    double step = 0.0;
    double tolerance = 0.0;
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    bool pass = true;
};

inline double relative_error(double a, double n) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-12});
}

using LossFn = std::function<Tensor<double>(Graph<double>&)>;

/// Compares the tape gradient of a scalar loss with central differences
/// (L(θ+δ) − L(θ−δ)) / 2δ for every scalar of every listed tensor. The tensors must
/// be the ones the loss closure reads, and must require grad.
inline GradCheckReport gradcheck(const LossFn& loss_fn, const std::vector<NamedTensor<double>>& params,
                                 double tolerance, double step = 1e-5) {
    GradCheckReport report;
    report.step = step;
    report.tolerance = tolerance;
    for (auto nt : params) nt.tensor.clear_grad();
    {
        Graph<double> g;
        g.backward(loss_fn(g));
    }
    auto eval = [&] {
        Graph<double> g(GradMode::disabled);
        return loss_fn(g).item();
    };
    for (auto nt : params) {
        ParamCheck pc;
        pc.name = nt.name;
        pc.size = nt.tensor.numel();
        const std::vector<double> analytic = nt.tensor.has_grad()
                                                 ? std::vector<double>(nt.tensor.grad().begin(), nt.tensor.grad().end())
                                                 : std::vector<double>(nt.tensor.numel(), 0.0);
        auto& w = nt.tensor.values();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double orig = w[i];
            w[i] = orig + step;
            const double up = eval();
            w[i] = orig - step;
            const double down = eval();
            w[i] = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double err = relative_error(analytic[i], numeric);
            if (err > pc.max_rel_error || i == 0) {
                pc.max_rel_error = err;
                pc.worst_index = i;
                pc.analytic = analytic[i];
                pc.numeric = numeric;
            }
        }
        if (pc.max_rel_error > report.max_rel_error || report.params.empty()) {
            report.max_rel_error = pc.max_rel_error;
            report.worst_param = pc.name;
            report.worst_index = pc.worst_index;
        }
        report.params.push_back(std::move(pc));
    }
    report.pass = report.max_rel_error <= tolerance;
    return report;
}

namespace detail {

inline double plain_cosine(std::span<const double> a, std::span<const double> b) {
    double p = 0, na = 0, nb = 0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        p += a[j] * b[j];
        na += a[j] * a[j];
        nb += b[j] * b[j];
    }
    return p / (std::sqrt(na) * std::sqrt(nb) + 1e-8);
}

inline bool near_kink(double s, double margin) { return std::abs(s) < margin || std::abs(s - 1.0) < margin; }

/// True when every nonzero analytic gradient entry has magnitude >= floor. Below
/// about 1e-5 the central difference is dominated by roundoff in the loss, so such a
/// draw measures float noise rather than the adjoint; samplers redraw instead.
inline bool well_conditioned(const std::function<Tensor<double>(Graph<double>&)>& loss_fn,
                             const std::vector<NamedTensor<double>>& params, double floor) {
    for (auto nt : params) nt.tensor.clear_grad();
    {
        Graph<double> g;
        g.backward(loss_fn(g));
    }
    bool ok = true;
    for (auto nt : params) {
        if (nt.tensor.has_grad())
            for (auto v : nt.tensor.grad())
                if (v != 0.0 && std::abs(v) < floor) ok = false;
        nt.tensor.clear_grad();
    }
    return ok;
}

// Random-weighted sum of an output, so every output entry carries gradient.
inline Tensor<double> projected(Graph<double>& g, const Tensor<double>& out, const Tensor<double>& weights) {
    return g.sum(g.mul(out, weights));
}

}  // namespace detail

inline constexpr double kGradFloor = 1e-4;

/// One random draw for the filter in isolation: h [t x d] and all parameters in [-1, 1].
/// Redrawn while any cosine score lies within `margin` of 0 or 1, or while the draw is
/// not well_conditioned.
template <class Rng>
GradCheckReport gradcheck_filter(Rng& rng, std::size_t d, std::size_t t, std::size_t rank, double tolerance,
                                 double margin = 1e-3) {
    using Tn = Tensor<double>;
    for (;;) {
        auto h = Tn::uniform({t, d}, -1.0, 1.0, rng, true);
        auto tv = Tn::uniform({d}, -1.0, 1.0, rng, true);
        bool ok = true;
        for (std::size_t i = 0; i < t && ok; ++i)
            ok = !detail::near_kink(detail::plain_cosine(h.data().subspan(i * d, d), tv.data()), margin);
        if (!ok) continue;
        TaskAwareFilter<double> f(tv, Tn::uniform({d, rank}, -1.0, 1.0, rng), Tn::uniform({rank, d}, -1.0, 1.0, rng));
        const auto r = Tn::uniform({t, d}, -1.0, 1.0, rng);
        LossFn loss = [&](Graph<double>& g) { return detail::projected(g, f.apply(g, h), r); };
        const std::vector<NamedTensor<double>> params{
            {"input", h}, {"task_vector", f.task_vector()}, {"T_down", f.t_down()}, {"T_up", f.t_up()}};
        if (!detail::well_conditioned(loss, params, kGradFloor)) continue;
        return gradcheck(loss, params, tolerance);
    }
}

/// One random draw for a LoRA-wrapped projection with nonzero A and B.
template <class Rng>
GradCheckReport gradcheck_lora(Rng& rng, std::size_t out, std::size_t in, std::size_t rank, std::size_t t,
                               double tolerance) {
    using Tn = Tensor<double>;
    for (;;) {
        const auto w = Tn::uniform({out, in}, -1.0, 1.0, rng);
        LoraAdapter<double> lora(w, Tn::uniform({rank, in}, -1.0, 1.0, rng), Tn::uniform({out, rank}, -1.0, 1.0, rng),
                                 2.0 * static_cast<double>(rank));
        const auto x = Tn::uniform({t, in}, -1.0, 1.0, rng, true);
        const auto r = Tn::uniform({t, out}, -1.0, 1.0, rng);
        LossFn loss = [&](Graph<double>& g) { return detail::projected(g, lora.forward_rows(g, x), r); };
        const std::vector<NamedTensor<double>> params{{"input", x}, {"lora_A", lora.a()}, {"lora_B", lora.b()}};
        if (!detail::well_conditioned(loss, params, kGradFloor)) continue;
        return gradcheck(loss, params, tolerance);
    }
}

template <class Rng>
std::vector<Sequence> random_sequences(const ModelConfig& cfg, std::size_t count, Rng& rng, std::size_t seq_len = 0) {
    if (seq_len == 0) seq_len = cfg.max_seq_len;
    std::uniform_int_distribution<std::size_t> tok(0, cfg.vocab_size - 1);
    std::vector<Sequence> out(count, Sequence(seq_len));
    for (auto& s : out)
        for (auto& t : s) t = tok(rng);
    return out;
}

/// `count` batches of `batch` random sequences, deterministic in seed.
inline std::vector<std::vector<Sequence>> random_batches(const ModelConfig& cfg, std::size_t count, std::size_t batch,
                                                         std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::vector<Sequence>> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(random_sequences(cfg, batch, rng));
    return out;
}

/// One random draw of the full model's cross-entropy: every trainable tensor is
/// redrawn uniformly in [-scale, scale] (so LoRA B and filter T_up are nonzero), then
/// the draw is rejected while any filter score sits within `margin` of a clamp kink or
/// the draw is not well_conditioned at floor 1e-5.
inline GradCheckReport gradcheck_model(const ModelConfig& cfg, const AdapterPlacement& placement, std::uint64_t seed,
                                       double tolerance, std::size_t batch = 3, double scale = 0.5,
                                       double margin = 1e-3) {
    auto model = AdaptedModel<double>::build(cfg, placement, seed);
    std::mt19937_64 rng(seed ^ 0x9c4ecULL);
    const auto params = model.named_parameters();
    std::vector<NamedTensor<double>> trainable;
    for (const auto& nt : params)
        if (nt.tensor.requires_grad()) trainable.push_back(nt);

    std::vector<Sequence> inputs;
    std::vector<std::size_t> labels(batch);
    LossFn loss = [&](Graph<double>& g) { return g.cross_entropy(model.forward(g, inputs), labels); };
    for (;;) {
        std::uniform_real_distribution<double> u(-scale, scale);
        for (auto nt : trainable)
            for (auto& v : nt.tensor.values()) v = u(rng);
        inputs = random_sequences(cfg, batch, rng);
        std::uniform_int_distribution<std::size_t> cls(0, cfg.num_classes - 1);
        for (auto& l : labels) l = cls(rng);
        ForwardTrace<double> trace;
        Graph<double> g(GradMode::disabled);
        model.forward(g, inputs, &trace);
        bool ok = true;
        for (const auto& [layer, scores] : trace.filter_scores)
            for (auto s : scores)
                if (detail::near_kink(s, margin)) ok = false;
        if (ok && detail::well_conditioned(loss, trainable, 1e-5)) break;
    }
    return gradcheck(loss, trainable, tolerance);
}

// ============================================================================
// Scalar-loop reference for the task-aware filter
// ============================================================================

/// out_i = h_i + clamp(cos(h_i, t), 0, 1) * h_i * T_down * T_up, written with plain loops.
/// t: [d]; t_down: d x rank row-major; t_up: rank x d row-major; h: rows x d row-major.
inline std::vector<double> filter_reference(const std::vector<double>& t, const std::vector<double>& t_down,
                                            const std::vector<double>& t_up, std::size_t rank,
                                            const std::vector<double>& h) {
    const std::size_t d = t.size();
    if (d == 0 || rank == 0 || t_down.size() != d * rank || t_up.size() != rank * d || h.size() % d != 0) {
        throw DimensionError("filter_reference: d=" + std::to_string(d) + " rank=" + std::to_string(rank) +
                             " T_down=" + std::to_string(t_down.size()) + " T_up=" + std::to_string(t_up.size()) +
                             " h=" + std::to_string(h.size()));
    }
    double tn = 0.0;
    for (std::size_t j = 0; j < d; ++j) tn += t[j] * t[j];
    tn = std::sqrt(tn);

    std::vector<double> out(h);
    std::vector<double> low(rank);
    for (std::size_t row = 0; row < h.size() / d; ++row) {
        const double* hi = &h[row * d];
        double dot = 0.0, hn = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dot += hi[j] * t[j];
            hn += hi[j] * hi[j];
        }
        double w = dot / (std::sqrt(hn) * tn + 1e-8);
        if (w < 0.0) w = 0.0;
        if (w > 1.0) w = 1.0;
        for (std::size_t k = 0; k < rank; ++k) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) acc += w * hi[j] * t_down[j * rank + k];
            low[k] = acc;
        }
        for (std::size_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < rank; ++k) acc += low[k] * t_up[k * d + j];
            out[row * d + j] += acc;
        }
    }
    return out;
}

// ============================================================================
// Parameter-count audit
// ============================================================================

struct AuditEntry {
    std::string name;
    Shape shape;
    std::size_t count = 0;
};

struct AuditReport {
    std::vector<AuditEntry> entries;  // every trainable tensor, from shapes alone
    ParamBreakdown audited;
    ParamBreakdown production;
    bool match = false;
};

/// Enumerates trainable tensor shapes from the configuration and sums them, without
/// using count_trainable; then compares against it.
inline AuditReport audit_counts(const ModelConfig& c, const AdapterPlacement& p) {
    AuditReport rep;
    const std::size_t d = c.hidden_dim, f = c.ffn_dim;
    // (in, out) per matrix, listed independently of matrix_shape.
    const std::map<Matrix, std::pair<std::size_t, std::size_t>> io{
        {Matrix::q, {d, d}}, {Matrix::k, {d, d}},  {Matrix::v, {d, d}},
        {Matrix::o, {d, d}}, {Matrix::f1, {d, f}}, {Matrix::f2, {f, d}},
    };
    auto add = [&](std::string name, Shape shape, std::size_t& bucket) {
        std::size_t n = 1;
        for (auto s : shape) n *= s;
        bucket += n;
        rep.entries.push_back({std::move(name), std::move(shape), n});
        return n;
    };
    for (std::size_t l = 0; l < c.num_layers; ++l)
        for (auto m : p.lora_targets) {
            const auto [in, out] = io.at(m);
            const auto base = "layers." + std::to_string(l) + "." + std::string(matrix_name(m));
            auto& per = rep.audited.per_matrix[std::string(matrix_name(m))];
            per += add(base + ".lora_A", {p.lora_rank, in}, rep.audited.lora);
            per += add(base + ".lora_B", {out, p.lora_rank}, rep.audited.lora);
        }
    std::vector<std::string> filter_prefixes;
    if (!p.filter_layers.empty()) {
        if (p.filter_sharing == FilterSharing::shared) {
            filter_prefixes.push_back("filter");
        } else {
            for (auto l : p.filter_layers) filter_prefixes.push_back("layers." + std::to_string(l) + ".filter");
        }
    }
    for (const auto& pre : filter_prefixes) {
        add(pre + ".task_vector", {d}, rep.audited.filter);
        add(pre + ".T_down", {d, p.filter_rank}, rep.audited.filter);
        add(pre + ".T_up", {p.filter_rank, d}, rep.audited.filter);
    }
    add("head.weight", {c.num_classes, d}, rep.audited.head);
    add("head.bias", {c.num_classes}, rep.audited.head);

    rep.production = count_trainable(c, p);
    rep.match = rep.audited == rep.production;
    return rep;
}

/// Audits a live model: shape enumeration against the tensors it actually holds.
template <std::floating_point T>
AuditReport audit_model(const AdaptedModel<T>& model) {
    auto rep = audit_counts(model.config(), model.placement());
    rep.production = model.count_trainable();
    rep.match = rep.audited == rep.production;
    return rep;
}

// ============================================================================
// Merge equivalence
// ============================================================================

template <std::floating_point T>
Tensor<T> logits_of(const AdaptedModel<T>& model, std::span<const Sequence> batch) {
    Graph<T> g(GradMode::disabled);
    return model.forward(g, batch);
}

/// ∞-norm of the logit difference between two models over the given batches.
template <std::floating_point T>
double max_logit_gap(const AdaptedModel<T>& a, const AdaptedModel<T>& b,
                     const std::vector<std::vector<Sequence>>& batches) {
    double gap = 0.0;
    for (const auto& batch : batches)
        gap = std::max(gap, static_cast<double>(max_abs_diff(logits_of(a, std::span<const Sequence>(batch)),
                                                             logits_of(b, std::span<const Sequence>(batch)))));
    return gap;
}

}  // namespace peft
