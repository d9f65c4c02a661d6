// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "peft/errors.hpp"
#include "peft/graph.hpp"
#include "peft/model.hpp"
#include "peft/optim.hpp"
#include "peft/tasks.hpp"

namespace peft {

enum class OptimizerKind { sgd, adam };
enum class Precision { single, double_ };

inline std::string_view optimizer_name(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }
inline OptimizerKind parse_optimizer(std::string_view s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

inline std::string_view precision_name(Precision p) { return p == Precision::single ? "single" : "double"; }
inline Precision parse_precision(std::string_view s) {
    if (s == "single") return Precision::single;
    if (s == "double") return Precision::double_;
    throw ConfigError("unknown precision '" + std::string(s) + "' (expected single or double)");
}

struct TrainConfig {
    std::size_t steps = 500;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 1;
    std::size_t eval_every = 50;
    Precision precision = Precision::single;

    void validate() const {
        if (steps == 0) throw ConfigError("train.steps must be positive");
        if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
        if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
        if (eval_every == 0) throw ConfigError("train.eval_every must be positive");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
            throw ConfigError("train.beta1/beta2 must be in [0, 1)");
        if (!(epsilon > 0.0)) throw ConfigError("train.epsilon must be positive");
    }

    bool operator==(const TrainConfig&) const = default;
};

/// Identifies a run inside a sweep.
struct RunLabel {
    std::string method = "lora";
    std::size_t rank = 0;
    std::string placement_id = "p0";
    std::uint64_t seed = 0;
};

struct MetricsRecord {
    std::size_t step = 0;
    double train_loss = 0.0;
    double val_accuracy = 0.0;
    std::size_t trainable_param_count = 0;
    double wall_ms = 0.0;
    std::string method;
    std::size_t rank = 0;
    std::string placement_id;
    std::uint64_t seed = 0;
};

struct TrainResult {
    std::vector<MetricsRecord> records;
    bool diverged = false;
    std::string diagnostic;
    double final_loss = 0.0;
};

inline std::string method_label(const AdapterPlacement& p) { return p.has_filters() ? "loratrf" : "lora"; }

template <std::floating_point T>
std::vector<std::size_t> predict(const AdaptedModel<T>& model, std::span<const Example> data, std::size_t chunk = 128) {
    std::vector<std::size_t> out;
    out.reserve(data.size());
    std::vector<Sequence> batch;
    for (std::size_t begin = 0; begin < data.size(); begin += chunk) {
        const auto end = std::min(data.size(), begin + chunk);
        batch.clear();
        for (auto i = begin; i < end; ++i) batch.push_back(data[i].tokens);
        Graph<T> g(GradMode::disabled);
        auto logits = model.forward(g, batch);
        const auto k = logits.cols();
        for (std::size_t r = 0; r < logits.rows(); ++r) {
            const auto row = logits.data().subspan(r * k, k);
            out.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
        }
    }
    return out;
}

template <std::floating_point T>
double evaluate_accuracy(const AdaptedModel<T>& model, std::span<const Example> data) {
    if (data.empty()) return 0.0;
    const auto pred = predict(model, data);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < data.size(); ++i) hits += pred[i] == data[i].label;
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

/// Minimises mean cross-entropy over the model's trainable tensors.
///
/// Minibatches come from per-epoch shuffles of the training set driven by cfg.seed,
/// so a run is bitwise reproducible for a given (model, data, cfg). A record is
/// emitted every eval_every steps and after the last step. A non-finite loss stops
/// the run and marks it diverged.
template <std::floating_point T>
TrainResult train(AdaptedModel<T>& model, const Dataset& data, const TrainConfig& cfg, const RunLabel& label,
                  const std::function<void(const MetricsRecord&)>& on_record = {}) {
    TrainResult result;
    if (cfg.steps == 0) return result;
    if (data.train.empty()) throw ContractError("train: empty training set");

    const auto params = model.trainable_parameters();
    const auto trainable = model.count_trainable().total();
    using Opt = std::variant<Sgd<T>, Adam<T>>;
    Opt opt = cfg.optimizer == OptimizerKind::sgd
                  ? Opt(std::in_place_type<Sgd<T>>, params, cfg.learning_rate)
                  : Opt(std::in_place_type<Adam<T>>, params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);

    std::seed_seq ss{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 0xba7cu};
    std::mt19937_64 rng(ss);
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();

    const auto started = std::chrono::steady_clock::now();
    std::vector<Sequence> batch;
    std::vector<std::size_t> labels;
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        batch.clear();
        labels.clear();
        while (batch.size() < std::min(cfg.batch_size, order.size())) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const auto& ex = data.train[order[cursor++]];
            batch.push_back(ex.tokens);
            labels.push_back(ex.label);
        }
        std::visit([](auto& o) { o.zero_grad(); }, opt);
        Graph<T> g;
        auto loss = g.cross_entropy(model.forward(g, batch), labels);
        const double loss_value = static_cast<double>(loss.item());
        result.final_loss = loss_value;
        const bool last = step == cfg.steps;
        if (!std::isfinite(loss_value)) {
            result.diverged = true;
            result.diagnostic = "non-finite training loss at step " + std::to_string(step);
        } else {
            g.backward(loss);
            std::visit([](auto& o) { o.step(); }, opt);
        }
        if (result.diverged || last || step % cfg.eval_every == 0) {
            MetricsRecord rec;
            rec.step = step;
            rec.train_loss = loss_value;
            rec.val_accuracy = result.diverged ? 0.0 : evaluate_accuracy(model, std::span<const Example>(data.val));
            rec.trainable_param_count = trainable;
            rec.wall_ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
            rec.method = label.method;
            rec.rank = label.rank;
            rec.placement_id = label.placement_id;
            rec.seed = label.seed;
            result.records.push_back(rec);
            if (on_record) on_record(rec);
        }
        if (result.diverged) break;
    }
    return result;
}

}  // namespace peft
