// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "peft/errors.hpp"
#include "peft/model.hpp"

namespace peft {

/// needle_token:     one signal token among distractors; label = the signal token's class.
/// parity_of_marked: each position is a signal ("marked") token with some probability;
///                   label = parity of the marked count. Requires two classes.
/// majority_plain:   every token is a signal token; label = most frequent class. All
///                   tokens matter here, so tokenwise filtering is not expected to help.
enum class TaskKind { needle_token, parity_of_marked, majority_plain };

inline std::string_view task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::needle_token: return "needle_token";
        case TaskKind::parity_of_marked: return "parity_of_marked";
        case TaskKind::majority_plain: return "majority_plain";
    }
    return "?";
}

inline TaskKind parse_task_kind(std::string_view s) {
    for (auto k : {TaskKind::needle_token, TaskKind::parity_of_marked, TaskKind::majority_plain})
        if (task_kind_name(k) == s) return k;
    throw ConfigError("unknown task kind '" + std::string(s) + "'");
}

/// Vocabulary partition: signal tokens occupy [signal_offset, signal_offset + classes * signal_per_class),
/// with class(token) = (token - signal_offset) / signal_per_class; distractors occupy
/// [distractor_offset, distractor_offset + distractor_count).
struct SyntheticTask {
    TaskKind kind = TaskKind::needle_token;
    std::size_t seq_len = 16;
    std::size_t signal_offset = 0;
    std::size_t signal_per_class = 4;
    std::size_t distractor_offset = 16;
    std::size_t distractor_count = 48;
    double mark_probability = 0.3;
    std::size_t train_size = 2000;
    std::size_t val_size = 500;

    std::size_t signal_end(std::size_t num_classes) const { return signal_offset + num_classes * signal_per_class; }

    std::optional<std::size_t> signal_class(std::size_t token, std::size_t num_classes) const {
        if (token < signal_offset || token >= signal_end(num_classes)) return std::nullopt;
        return (token - signal_offset) / signal_per_class;
    }

    void validate(const ModelConfig& model) const {
        const auto classes = model.num_classes;
        if (seq_len == 0 || seq_len > model.max_seq_len)
            throw ConfigError("task.seq_len must be in [1, model.max_seq_len]");
        if (signal_per_class == 0) throw ConfigError("task.signal_per_class must be positive");
        if (train_size == 0 || val_size == 0) throw ConfigError("task.train_size and task.val_size must be positive");
        if (signal_end(classes) > model.vocab_size) throw ConfigError("task: signal tokens exceed model.vocab_size");
        if (distractor_offset + distractor_count > model.vocab_size)
            throw ConfigError("task: distractor tokens exceed model.vocab_size");
        const bool overlap = distractor_count > 0 && distractor_offset < signal_end(classes) &&
                             signal_offset < distractor_offset + distractor_count;
        if (overlap) throw ConfigError("task: signal and distractor vocabulary ranges overlap");
        if (kind != TaskKind::majority_plain && distractor_count == 0)
            throw ConfigError("task: " + std::string(task_kind_name(kind)) + " needs distractor tokens");
        if (kind == TaskKind::parity_of_marked) {
            if (classes != 2) throw ConfigError("task: parity_of_marked needs model.num_classes == 2");
            if (!(mark_probability > 0.0 && mark_probability < 1.0))
                throw ConfigError("task.mark_probability must be in (0, 1)");
        }
    }

    bool operator==(const SyntheticTask&) const = default;
};

struct Example {
    Sequence tokens;
    std::size_t label = 0;
};

struct Dataset {
    std::vector<Example> train;
    std::vector<Example> val;
};

/// The label rule, recomputed from the sequence alone.
inline std::size_t task_label(const SyntheticTask& task, std::size_t num_classes, const Sequence& seq) {
    switch (task.kind) {
        case TaskKind::needle_token: {
            std::optional<std::size_t> found;
            for (auto tok : seq)
                if (auto c = task.signal_class(tok, num_classes)) {
                    if (found) throw InputError("needle_token: more than one signal token");
                    found = c;
                }
            if (!found) throw InputError("needle_token: no signal token");
            return *found;
        }
        case TaskKind::parity_of_marked: {
            std::size_t marked = 0;
            for (auto tok : seq) marked += task.signal_class(tok, num_classes).has_value();
            return marked % 2;
        }
        case TaskKind::majority_plain: {
            std::vector<std::size_t> counts(num_classes, 0);
            for (auto tok : seq)
                if (auto c = task.signal_class(tok, num_classes)) ++counts[*c];
            std::size_t best = 0;
            for (std::size_t c = 1; c < num_classes; ++c)
                if (counts[c] > counts[best]) best = c;
            return best;
        }
    }
    return 0;
}

namespace detail {

template <class Rng>
Sequence sample_sequence(const SyntheticTask& task, std::size_t num_classes, Rng& rng) {
    auto pick = [&rng](std::size_t lo, std::size_t count) {
        return lo + std::uniform_int_distribution<std::size_t>(0, count - 1)(rng);
    };
    const auto signal_total = num_classes * task.signal_per_class;
    Sequence seq(task.seq_len);
    switch (task.kind) {
        case TaskKind::needle_token: {
            for (auto& t : seq) t = pick(task.distractor_offset, task.distractor_count);
            const auto pos = pick(0, task.seq_len);
            seq[pos] = pick(task.signal_offset, signal_total);
            break;
        }
        case TaskKind::parity_of_marked: {
            std::bernoulli_distribution marked(task.mark_probability);
            for (auto& t : seq)
                t = marked(rng) ? pick(task.signal_offset, signal_total) : pick(task.distractor_offset, task.distractor_count);
            break;
        }
        case TaskKind::majority_plain: {
            // Resample until the majority class is unique.
            for (;;) {
                std::vector<std::size_t> counts(num_classes, 0);
                for (auto& t : seq) {
                    t = pick(task.signal_offset, signal_total);
                    ++counts[*task.signal_class(t, num_classes)];
                }
                const auto top = *std::max_element(counts.begin(), counts.end());
                if (std::count(counts.begin(), counts.end(), top) == 1) break;
            }
            break;
        }
    }
    return seq;
}

}  // namespace detail

/// Deterministic in `seed`. Validation sequences never occur in the training set.
inline Dataset generate_task(const SyntheticTask& task, const ModelConfig& model, std::uint64_t seed) {
    task.validate(model);
    const auto classes = model.num_classes;
    std::seed_seq seq_seed{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x7a5cu};
    std::mt19937_64 rng(seq_seed);
    Dataset out;
    std::set<Sequence> train_seen;
    out.train.reserve(task.train_size);
    for (std::size_t i = 0; i < task.train_size; ++i) {
        auto s = detail::sample_sequence(task, classes, rng);
        train_seen.insert(s);
        const auto label = task_label(task, classes, s);
        out.train.push_back({std::move(s), label});
    }
    out.val.reserve(task.val_size);
    const std::size_t max_attempts = 100 * (task.val_size + 10);
    std::size_t attempts = 0;
    while (out.val.size() < task.val_size) {
        if (++attempts > max_attempts)
            throw ConfigError("task: sequence space too small to draw a validation set disjoint from training");
        auto s = detail::sample_sequence(task, classes, rng);
        if (train_seen.count(s)) continue;
        const auto label = task_label(task, classes, s);
        out.val.push_back({std::move(s), label});
    }
    return out;
}

}  // namespace peft
