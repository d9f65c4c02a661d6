// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "peft/adapters.hpp"
#include "peft/errors.hpp"
#include "peft/graph.hpp"
#include "peft/tensor.hpp"

namespace peft {

// ============================================================================
// Configuration
// ============================================================================

/// The six adaptable weight matrices of an encoder layer.
enum class Matrix { q, k, v, o, f1, f2 };

inline constexpr std::array<Matrix, 6> kAllMatrices{Matrix::q, Matrix::k, Matrix::v, Matrix::o, Matrix::f1, Matrix::f2};

inline std::string_view matrix_name(Matrix m) {
    switch (m) {
        case Matrix::q: return "W_q";
        case Matrix::k: return "W_k";
        case Matrix::v: return "W_v";
        case Matrix::o: return "W_o";
        case Matrix::f1: return "W_f1";
        case Matrix::f2: return "W_f2";
    }
    return "?";
}

inline Matrix parse_matrix(std::string_view s) {
    for (auto m : kAllMatrices)
        if (matrix_name(m) == s) return m;
    throw ConfigError("unknown weight matrix '" + std::string(s) + "' (expected W_q, W_k, W_v, W_o, W_f1 or W_f2)");
}

/// Where a layer's filter is applied:
///  - layer_output:   to the layer's final hidden states
///  - post_attention: to the attention sublayer output, before its residual add
///  - post_ffn:       to the feed-forward sublayer output, before its residual add
enum class FilterSite { layer_output, post_attention, post_ffn };

inline std::string_view filter_site_name(FilterSite s) {
    switch (s) {
        case FilterSite::layer_output: return "layer_output";
        case FilterSite::post_attention: return "post_attention";
        case FilterSite::post_ffn: return "post_ffn";
    }
    return "?";
}

inline FilterSite parse_filter_site(std::string_view s) {
    for (auto v : {FilterSite::layer_output, FilterSite::post_attention, FilterSite::post_ffn})
        if (filter_site_name(v) == s) return v;
    throw ConfigError("unknown filter_site '" + std::string(s) + "'");
}

/// per_layer: one filter per listed layer; shared: a single filter reused by all listed layers.
enum class FilterSharing { per_layer, shared };

inline std::string_view filter_sharing_name(FilterSharing s) {
    return s == FilterSharing::per_layer ? "per_layer" : "shared";
}

inline FilterSharing parse_filter_sharing(std::string_view s) {
    if (s == "per_layer") return FilterSharing::per_layer;
    if (s == "shared") return FilterSharing::shared;
    throw ConfigError("unknown filter_sharing '" + std::string(s) + "'");
}

inline std::string_view similarity_name(Similarity s) { return s == Similarity::cosine ? "cosine" : "dot"; }

inline Similarity parse_similarity(std::string_view s) {
    if (s == "cosine") return Similarity::cosine;
    if (s == "dot") return Similarity::dot;
    throw ConfigError("unknown similarity '" + std::string(s) + "'");
}

struct ModelConfig {
    std::size_t num_layers = 2;
    std::size_t hidden_dim = 32;
    std::size_t num_heads = 2;
    std::size_t ffn_dim = 64;
    std::size_t vocab_size = 64;
    std::size_t max_seq_len = 16;
    std::size_t num_classes = 4;

    void validate() const {
        auto positive = [](std::size_t v, const char* name) {
            if (v == 0) throw ConfigError(std::string("model.") + name + " must be positive");
        };
        positive(num_layers, "num_layers");
        positive(hidden_dim, "hidden_dim");
        positive(num_heads, "num_heads");
        positive(ffn_dim, "ffn_dim");
        positive(vocab_size, "vocab_size");
        positive(max_seq_len, "max_seq_len");
        positive(num_classes, "num_classes");
        if (hidden_dim % num_heads != 0) {
            throw ConfigError("model.hidden_dim (" + std::to_string(hidden_dim) + ") not divisible by num_heads (" +
                              std::to_string(num_heads) + ")");
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

/// [out x in] shape of a layer matrix.
inline std::pair<std::size_t, std::size_t> matrix_shape(const ModelConfig& c, Matrix m) {
    switch (m) {
        case Matrix::f1: return {c.ffn_dim, c.hidden_dim};
        case Matrix::f2: return {c.hidden_dim, c.ffn_dim};
        default: return {c.hidden_dim, c.hidden_dim};
    }
}

struct AdapterPlacement {
    std::set<Matrix> lora_targets;
    std::size_t lora_rank = 8;
    double lora_alpha = 16.0;
    std::set<std::size_t> filter_layers;
    std::size_t filter_rank = 8;
    FilterSite filter_site = FilterSite::layer_output;
    FilterSharing filter_sharing = FilterSharing::per_layer;
    Similarity similarity = Similarity::cosine;

    void validate(const ModelConfig& c) const {
        if (lora_rank < 1) throw ConfigError("placement.lora_rank must be >= 1");
        if (!(lora_alpha > 0.0)) throw ConfigError("placement.lora_alpha must be positive");
        for (auto m : lora_targets) {
            const auto [rows, cols] = matrix_shape(c, m);
            if (lora_rank > std::min(rows, cols)) {
                throw ConfigError("placement.lora_rank " + std::to_string(lora_rank) + " exceeds min dimension of " +
                                  std::string(matrix_name(m)) + " [" + std::to_string(rows) + "x" +
                                  std::to_string(cols) + "]");
            }
        }
        for (auto l : filter_layers)
            if (l >= c.num_layers) {
                throw ConfigError("placement.filter_layers contains " + std::to_string(l) + " but model has " +
                                  std::to_string(c.num_layers) + " layers");
            }
        if (!filter_layers.empty() && (filter_rank < 1 || filter_rank > c.hidden_dim))
            throw ConfigError("placement.filter_rank must be in [1, hidden_dim]");
    }

    bool has_filters() const { return !filter_layers.empty(); }
    bool operator==(const AdapterPlacement&) const = default;
};

/// Trainable-parameter counts split by component.
struct ParamBreakdown {
    std::size_t lora = 0;
    std::size_t filter = 0;
    std::size_t head = 0;
    std::map<std::string, std::size_t> per_matrix;  // lora count by matrix name, summed over layers

    std::size_t adapters() const { return lora + filter; }
    std::size_t total() const { return lora + filter + head; }
    bool operator==(const ParamBreakdown&) const = default;
};

inline std::size_t filter_count(const ModelConfig& c, const AdapterPlacement& p) {
    if (p.filter_layers.empty()) return 0;
    const std::size_t per = c.hidden_dim + 2 * c.hidden_dim * p.filter_rank;
    return p.filter_sharing == FilterSharing::shared ? per : per * p.filter_layers.size();
}

/// Closed-form trainable count; never builds a model, so it scales to large configs.
inline ParamBreakdown count_trainable(const ModelConfig& c, const AdapterPlacement& p) {
    ParamBreakdown b;
    for (auto m : p.lora_targets) {
        const auto [rows, cols] = matrix_shape(c, m);
        const auto n = c.num_layers * p.lora_rank * (rows + cols);
        b.per_matrix[std::string(matrix_name(m))] = n;
        b.lora += n;
    }
    b.filter = filter_count(c, p);
    b.head = c.num_classes * c.hidden_dim + c.num_classes;
    return b;
}

// ============================================================================
// Model
// ============================================================================

using Sequence = std::vector<std::size_t>;

template <std::floating_point T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

struct FreezeEntry {
    std::string name;
    Shape shape;
    bool trainable;
};

/// Per-forward diagnostics: filter weights per filtered layer, aligned with flat_ids.
template <std::floating_point T>
struct ForwardTrace {
    std::vector<std::size_t> flat_ids;
    std::map<std::size_t, std::vector<T>> filter_weights;  // layer -> one weight per token row
    std::map<std::size_t, std::vector<T>> filter_scores;   // layer -> unclamped similarity per row
};

template <std::floating_point T>
struct Projection {
    Tensor<T> weight;  // [out x in]
    Tensor<T> bias;    // [out]
    std::optional<LoraAdapter<T>> lora;

    Tensor<T> forward(Graph<T>& g, const Tensor<T>& h) const {
        auto y = lora ? lora->forward_rows(g, h) : g.matmul(h, g.transpose(weight));
        return g.add(y, bias);
    }
};

template <std::floating_point T>
struct EncoderLayer {
    Tensor<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    std::array<Projection<T>, 6> proj;
    std::shared_ptr<TaskAwareFilter<T>> filter;

    Projection<T>& at(Matrix m) { return proj[static_cast<std::size_t>(m)]; }
    const Projection<T>& at(Matrix m) const { return proj[static_cast<std::size_t>(m)]; }
};

/// Pre-LayerNorm transformer encoder with mean pooling and a linear classifier head.
///
/// All backbone tensors are frozen. LoRA adapters wrap the listed matrices of every
/// layer; filters sit at the configured site of the listed layers. Only adapters,
/// filters and the classifier head are trainable.
template <std::floating_point T>
class AdaptedModel {
public:
    AdaptedModel(const AdaptedModel&) = delete;
    AdaptedModel& operator=(const AdaptedModel&) = delete;
    AdaptedModel(AdaptedModel&&) noexcept = default;
    AdaptedModel& operator=(AdaptedModel&&) noexcept = default;

    /// Backbone and head draw from a stream seeded only by `seed`, adapters from a
    /// second stream, so the same seed yields the same backbone for any placement.
    static AdaptedModel build(const ModelConfig& config, const AdapterPlacement& placement, std::uint64_t seed) {
        config.validate();
        placement.validate(config);
        AdaptedModel m(config, placement);
        std::seed_seq base_seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x0ba5eu};
        std::seed_seq adapter_seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0xada9u};
        std::mt19937_64 base_rng(base_seq);
        std::mt19937_64 adapter_rng(adapter_seq);

        const auto d = config.hidden_dim;
        m.tok_embed_ = Tensor<T>::gaussian({config.vocab_size, d}, T{1}, base_rng);
        m.pos_embed_ = Tensor<T>::gaussian({config.max_seq_len, d}, T{1}, base_rng);
        m.layers_.resize(config.num_layers);
        for (auto& layer : m.layers_) {
            layer.ln1_gain = Tensor<T>::full({d}, T{1});
            layer.ln1_bias = Tensor<T>::zeros({d});
            layer.ln2_gain = Tensor<T>::full({d}, T{1});
            layer.ln2_bias = Tensor<T>::zeros({d});
            for (auto mat : kAllMatrices) {
                const auto [rows, cols] = matrix_shape(config, mat);
                auto& p = layer.at(mat);
                p.weight = Tensor<T>::gaussian({rows, cols}, T{1} / std::sqrt(static_cast<T>(cols)), base_rng);
                p.bias = Tensor<T>::zeros({rows});
            }
        }
        m.final_gain_ = Tensor<T>::full({d}, T{1});
        m.final_bias_ = Tensor<T>::zeros({d});
        m.head_weight_ = Tensor<T>::gaussian({config.num_classes, d}, T{1} / std::sqrt(static_cast<T>(d)), base_rng, true);
        m.head_bias_ = Tensor<T>::zeros({config.num_classes}, true);

        for (auto& layer : m.layers_)
            for (auto mat : placement.lora_targets) {
                auto& p = layer.at(mat);
                p.lora.emplace(p.weight, placement.lora_rank, static_cast<T>(placement.lora_alpha), adapter_rng);
            }
        std::shared_ptr<TaskAwareFilter<T>> shared;
        for (auto l : placement.filter_layers) {
            if (placement.filter_sharing == FilterSharing::shared) {
                if (!shared)
                    shared = std::make_shared<TaskAwareFilter<T>>(d, placement.filter_rank, adapter_rng, placement.similarity);
                m.layers_[l].filter = shared;
            } else {
                m.layers_[l].filter =
                    std::make_shared<TaskAwareFilter<T>>(d, placement.filter_rank, adapter_rng, placement.similarity);
            }
        }
        return m;
    }

    const ModelConfig& config() const { return config_; }
    const AdapterPlacement& placement() const { return placement_; }
    const std::vector<EncoderLayer<T>>& layers() const { return layers_; }
    std::vector<EncoderLayer<T>>& layers() { return layers_; }

    /// Logits [batch x num_classes].
    Tensor<T> forward(Graph<T>& g, std::span<const Sequence> batch, ForwardTrace<T>* trace = nullptr) const {
        if (batch.empty()) throw InputError("forward: empty batch");
        std::vector<std::size_t> ids, positions, lengths;
        for (const auto& seq : batch) {
            if (seq.empty() || seq.size() > config_.max_seq_len) {
                throw InputError("forward: sequence length " + std::to_string(seq.size()) + " not in [1, " +
                                 std::to_string(config_.max_seq_len) + "]");
            }
            for (std::size_t i = 0; i < seq.size(); ++i) {
                if (seq[i] >= config_.vocab_size) {
                    throw InputError("forward: token id " + std::to_string(seq[i]) + " >= vocab_size " +
                                     std::to_string(config_.vocab_size));
                }
                ids.push_back(seq[i]);
                positions.push_back(i);
            }
            lengths.push_back(seq.size());
        }
        if (trace) trace->flat_ids = ids;

        auto x = g.add(g.gather_rows(tok_embed_, ids), g.gather_rows(pos_embed_, positions));
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& layer = layers_[l];
            auto attn = attention(g, layer, g.layer_norm(x, layer.ln1_gain, layer.ln1_bias), lengths);
            if (placement_.filter_site == FilterSite::post_attention) attn = filter(g, layer, l, attn, trace);
            x = g.add(x, attn);
            const auto& f1 = layer.at(Matrix::f1);
            const auto& f2 = layer.at(Matrix::f2);
            auto ffn = f2.forward(g, g.gelu(f1.forward(g, g.layer_norm(x, layer.ln2_gain, layer.ln2_bias))));
            if (placement_.filter_site == FilterSite::post_ffn) ffn = filter(g, layer, l, ffn, trace);
            x = g.add(x, ffn);
            if (placement_.filter_site == FilterSite::layer_output) x = filter(g, layer, l, x, trace);
        }
        x = g.layer_norm(x, final_gain_, final_bias_);

        std::vector<Tensor<T>> pooled;
        pooled.reserve(lengths.size());
        std::size_t off = 0;
        for (auto len : lengths) {
            pooled.push_back(g.mean_rows(g.slice_rows(x, off, len)));
            off += len;
        }
        auto features = pooled.size() == 1 ? pooled.front() : g.concat_rows(pooled);
        return g.add(g.matmul(features, g.transpose(head_weight_)), head_bias_);
    }

    /// Every parameter tensor in a stable order (checkpoint order).
    std::vector<NamedTensor<T>> named_parameters() const {
        std::vector<NamedTensor<T>> out;
        out.push_back({"embed.token", tok_embed_});
        out.push_back({"embed.position", pos_embed_});
        bool shared_emitted = false;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& layer = layers_[l];
            const auto pre = "layers." + std::to_string(l) + ".";
            out.push_back({pre + "ln1.gain", layer.ln1_gain});
            out.push_back({pre + "ln1.bias", layer.ln1_bias});
            out.push_back({pre + "ln2.gain", layer.ln2_gain});
            out.push_back({pre + "ln2.bias", layer.ln2_bias});
            for (auto mat : kAllMatrices) {
                const auto& p = layer.at(mat);
                const auto base = pre + std::string(matrix_name(mat)) + ".";
                out.push_back({base + "weight", p.weight});
                out.push_back({base + "bias", p.bias});
                if (p.lora) {
                    out.push_back({base + "lora_A", p.lora->a()});
                    out.push_back({base + "lora_B", p.lora->b()});
                }
            }
            if (layer.filter) {
                std::string fpre;
                if (placement_.filter_sharing == FilterSharing::shared) {
                    if (shared_emitted) continue;
                    shared_emitted = true;
                    fpre = "filter.";
                } else {
                    fpre = pre + "filter.";
                }
                out.push_back({fpre + "task_vector", layer.filter->task_vector()});
                out.push_back({fpre + "T_down", layer.filter->t_down()});
                out.push_back({fpre + "T_up", layer.filter->t_up()});
            }
        }
        out.push_back({"final_ln.gain", final_gain_});
        out.push_back({"final_ln.bias", final_bias_});
        out.push_back({"head.weight", head_weight_});
        out.push_back({"head.bias", head_bias_});
        return out;
    }

    std::vector<Tensor<T>> trainable_parameters() const {
        std::vector<Tensor<T>> out;
        for (auto& nt : named_parameters())
            if (nt.tensor.requires_grad()) out.push_back(nt.tensor);
        return out;
    }

    std::vector<Tensor<T>> frozen_parameters() const {
        std::vector<Tensor<T>> out;
        for (auto& nt : named_parameters())
            if (!nt.tensor.requires_grad()) out.push_back(nt.tensor);
        return out;
    }

    std::vector<FreezeEntry> freeze_report() const {
        std::vector<FreezeEntry> out;
        for (auto& nt : named_parameters()) out.push_back({nt.name, nt.tensor.shape(), nt.tensor.requires_grad()});
        return out;
    }

    /// Count derived from the tensors actually held by the model.
    ParamBreakdown count_trainable() const {
        ParamBreakdown b;
        for (auto& nt : named_parameters()) {
            if (!nt.tensor.requires_grad()) continue;
            const auto n = nt.tensor.numel();
            if (nt.name.find(".lora_") != std::string::npos) {
                b.lora += n;
                const auto end = nt.name.rfind('.');
                const auto begin = nt.name.rfind('.', end - 1) + 1;
                b.per_matrix[nt.name.substr(begin, end - begin)] += n;
            } else if (nt.name.find("filter.") != std::string::npos) {
                b.filter += n;
            } else {
                b.head += n;
            }
        }
        return b;
    }

    bool lora_merged() const { return lora_merged_; }

    void merge_lora() {
        if (lora_merged_) throw StateError("merge: LoRA adapters already merged");
        for (auto& layer : layers_)
            for (auto& p : layer.proj)
                if (p.lora) p.lora->merge();
        lora_merged_ = true;
    }

    void unmerge_lora() {
        if (!lora_merged_) throw StateError("unmerge: LoRA adapters are not merged");
        for (auto& layer : layers_)
            for (auto& p : layer.proj)
                if (p.lora) p.lora->unmerge();
        lora_merged_ = false;
    }

    /// Drops merged adapters so the backbone carries the folded weights alone.
    void drop_merged_lora() {
        if (!lora_merged_) throw StateError("drop_merged_lora: adapters must be merged first");
        for (auto& layer : layers_)
            for (auto& p : layer.proj) p.lora.reset();
        placement_.lora_targets.clear();
        lora_merged_ = false;
    }

private:
    AdaptedModel(ModelConfig c, AdapterPlacement p) : config_(std::move(c)), placement_(std::move(p)) {}

    Tensor<T> filter(Graph<T>& g, const EncoderLayer<T>& layer, std::size_t l, const Tensor<T>& h,
                     ForwardTrace<T>* trace) const {
        if (!layer.filter) return h;
        if (!trace) return layer.filter->apply(g, h);
        Tensor<T> w;
        auto out = layer.filter->apply(g, h, &w);
        trace->filter_weights[l].assign(w.values().begin(), w.values().end());
        Graph<T> probe(GradMode::disabled);
        auto s = layer.filter->similarity() == Similarity::cosine ? probe.cosine_rows(h, layer.filter->task_vector())
                                                                    : probe.dot_rows(h, layer.filter->task_vector());
        trace->filter_scores[l].assign(s.values().begin(), s.values().end());
        return out;
    }

    Tensor<T> attention(Graph<T>& g, const EncoderLayer<T>& layer, const Tensor<T>& a,
                        const std::vector<std::size_t>& lengths) const {
        auto q = layer.at(Matrix::q).forward(g, a);
        auto k = layer.at(Matrix::k).forward(g, a);
        auto v = layer.at(Matrix::v).forward(g, a);
        return layer.at(Matrix::o).forward(g, g.attention(q, k, v, lengths, config_.num_heads));
    }

    ModelConfig config_;
    AdapterPlacement placement_;
    Tensor<T> tok_embed_, pos_embed_;
    std::vector<EncoderLayer<T>> layers_;
    Tensor<T> final_gain_, final_bias_;
    Tensor<T> head_weight_, head_bias_;
    bool lora_merged_ = false;
};

}  // namespace peft
