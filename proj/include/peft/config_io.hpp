// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "peft/errors.hpp"
#include "peft/model.hpp"
#include "peft/sweep.hpp"
#include "peft/tasks.hpp"
#include "peft/training.hpp"

namespace peft {

using json = nlohmann::ordered_json;

/// A complete run description. Every field has a default, so `{}` is a valid spec.
struct RunSpec {
    ModelConfig model;
    AdapterPlacement placement;
    SyntheticTask task;
    TrainConfig train;
    std::optional<SweepSpec> sweep;

    void validate() const {
        model.validate();
        placement.validate(model);
        task.validate(model);
        train.validate();
        if (sweep) sweep->validate();
    }

    bool operator==(const RunSpec&) const = default;
};

namespace detail {

inline void reject_unknown(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw ConfigError(path + ": expected an object");
    for (const auto& [key, _] : obj.items()) {
        bool known = false;
        for (const char* a : allowed) known = known || key == a;
        if (!known) throw ConfigError("unknown key '" + (path.empty() ? key : path + "." + key) + "'");
    }
}

inline std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

inline std::size_t as_size(const json& v, const std::string& where) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
        throw ConfigError(where + ": expected a non-negative integer, got " + v.dump());
    return v.get<std::size_t>();
}

inline double as_double(const json& v, const std::string& where) {
    if (!v.is_number()) throw ConfigError(where + ": expected a number, got " + v.dump());
    return v.get<double>();
}

inline std::string as_string(const json& v, const std::string& where) {
    if (!v.is_string()) throw ConfigError(where + ": expected a string, got " + v.dump());
    return v.get<std::string>();
}

inline const json& as_array(const json& v, const std::string& where) {
    if (!v.is_array()) throw ConfigError(where + ": expected an array, got " + v.dump());
    return v;
}

// Rethrows parse_* failures with the key path prepended.
template <class F>
auto at_path(const std::string& where, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const ConfigError& e) {
        throw ConfigError(where + ": " + e.what());
    }
}

template <class F>
void field(const json& obj, const std::string& path, const char* key, F&& assign) {
    if (auto it = obj.find(key); it != obj.end()) assign(*it, join(path, key));
}

inline std::set<Matrix> parse_targets(const json& v, const std::string& where) {
    std::set<Matrix> out;
    for (std::size_t i = 0; i < as_array(v, where).size(); ++i) {
        const auto w = where + "[" + std::to_string(i) + "]";
        out.insert(at_path(w, [&] { return parse_matrix(as_string(v[i], w)); }));
    }
    return out;
}

inline json targets_json(const std::set<Matrix>& targets) {
    json a = json::array();
    for (auto m : targets) a.push_back(std::string(matrix_name(m)));
    return a;
}

}  // namespace detail

inline ModelConfig model_from_json(const json& j, const std::string& path = "model") {
    using namespace detail;
    reject_unknown(j, path,
                   {"num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq_len", "num_classes"});
    ModelConfig c;
    field(j, path, "num_layers", [&](const json& v, const std::string& w) { c.num_layers = as_size(v, w); });
    field(j, path, "hidden_dim", [&](const json& v, const std::string& w) { c.hidden_dim = as_size(v, w); });
    field(j, path, "num_heads", [&](const json& v, const std::string& w) { c.num_heads = as_size(v, w); });
    field(j, path, "ffn_dim", [&](const json& v, const std::string& w) { c.ffn_dim = as_size(v, w); });
    field(j, path, "vocab_size", [&](const json& v, const std::string& w) { c.vocab_size = as_size(v, w); });
    field(j, path, "max_seq_len", [&](const json& v, const std::string& w) { c.max_seq_len = as_size(v, w); });
    field(j, path, "num_classes", [&](const json& v, const std::string& w) { c.num_classes = as_size(v, w); });
    return c;
}

inline json to_json(const ModelConfig& c) {
    return {{"num_layers", c.num_layers}, {"hidden_dim", c.hidden_dim},   {"num_heads", c.num_heads},
            {"ffn_dim", c.ffn_dim},       {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
            {"num_classes", c.num_classes}};
}

inline AdapterPlacement placement_from_json(const json& j, const std::string& path = "placement") {
    using namespace detail;
    reject_unknown(j, path,
                   {"lora_targets", "lora_rank", "lora_alpha", "filter_layers", "filter_rank", "filter_site",
                    "filter_sharing", "similarity"});
    AdapterPlacement p;
    field(j, path, "lora_targets", [&](const json& v, const std::string& w) { p.lora_targets = parse_targets(v, w); });
    field(j, path, "lora_rank", [&](const json& v, const std::string& w) { p.lora_rank = as_size(v, w); });
    field(j, path, "lora_alpha", [&](const json& v, const std::string& w) { p.lora_alpha = as_double(v, w); });
    field(j, path, "filter_layers", [&](const json& v, const std::string& w) {
        p.filter_layers.clear();
        for (std::size_t i = 0; i < as_array(v, w).size(); ++i)
            p.filter_layers.insert(as_size(v[i], w + "[" + std::to_string(i) + "]"));
    });
    field(j, path, "filter_rank", [&](const json& v, const std::string& w) { p.filter_rank = as_size(v, w); });
    field(j, path, "filter_site", [&](const json& v, const std::string& w) {
        p.filter_site = at_path(w, [&] { return parse_filter_site(as_string(v, w)); });
    });
    field(j, path, "filter_sharing", [&](const json& v, const std::string& w) {
        p.filter_sharing = at_path(w, [&] { return parse_filter_sharing(as_string(v, w)); });
    });
    field(j, path, "similarity", [&](const json& v, const std::string& w) {
        p.similarity = at_path(w, [&] { return parse_similarity(as_string(v, w)); });
    });
    return p;
}

inline json to_json(const AdapterPlacement& p) {
    json layers = json::array();
    for (auto l : p.filter_layers) layers.push_back(l);
    return {{"lora_targets", detail::targets_json(p.lora_targets)},
            {"lora_rank", p.lora_rank},
            {"lora_alpha", p.lora_alpha},
            {"filter_layers", layers},
            {"filter_rank", p.filter_rank},
            {"filter_site", std::string(filter_site_name(p.filter_site))},
            {"filter_sharing", std::string(filter_sharing_name(p.filter_sharing))},
            {"similarity", std::string(similarity_name(p.similarity))}};
}

inline SyntheticTask task_from_json(const json& j, const std::string& path = "task") {
    using namespace detail;
    reject_unknown(j, path,
                   {"kind", "seq_len", "signal_offset", "signal_per_class", "distractor_offset", "distractor_count",
                    "mark_probability", "train_size", "val_size"});
    SyntheticTask t;
    field(j, path, "kind", [&](const json& v, const std::string& w) {
        t.kind = at_path(w, [&] { return parse_task_kind(as_string(v, w)); });
    });
    field(j, path, "seq_len", [&](const json& v, const std::string& w) { t.seq_len = as_size(v, w); });
    field(j, path, "signal_offset", [&](const json& v, const std::string& w) { t.signal_offset = as_size(v, w); });
    field(j, path, "signal_per_class", [&](const json& v, const std::string& w) { t.signal_per_class = as_size(v, w); });
    field(j, path, "distractor_offset", [&](const json& v, const std::string& w) { t.distractor_offset = as_size(v, w); });
    field(j, path, "distractor_count", [&](const json& v, const std::string& w) { t.distractor_count = as_size(v, w); });
    field(j, path, "mark_probability", [&](const json& v, const std::string& w) { t.mark_probability = as_double(v, w); });
    field(j, path, "train_size", [&](const json& v, const std::string& w) { t.train_size = as_size(v, w); });
    field(j, path, "val_size", [&](const json& v, const std::string& w) { t.val_size = as_size(v, w); });
    return t;
}

inline json to_json(const SyntheticTask& t) {
    return {{"kind", std::string(task_kind_name(t.kind))},
            {"seq_len", t.seq_len},
            {"signal_offset", t.signal_offset},
            {"signal_per_class", t.signal_per_class},
            {"distractor_offset", t.distractor_offset},
            {"distractor_count", t.distractor_count},
            {"mark_probability", t.mark_probability},
            {"train_size", t.train_size},
            {"val_size", t.val_size}};
}

inline TrainConfig train_from_json(const json& j, const std::string& path = "train") {
    using namespace detail;
    reject_unknown(j, path,
                   {"steps", "batch_size", "learning_rate", "optimizer", "beta1", "beta2", "epsilon", "seed",
                    "eval_every", "precision"});
    TrainConfig c;
    field(j, path, "steps", [&](const json& v, const std::string& w) { c.steps = as_size(v, w); });
    field(j, path, "batch_size", [&](const json& v, const std::string& w) { c.batch_size = as_size(v, w); });
    field(j, path, "learning_rate", [&](const json& v, const std::string& w) { c.learning_rate = as_double(v, w); });
    field(j, path, "optimizer", [&](const json& v, const std::string& w) {
        c.optimizer = at_path(w, [&] { return parse_optimizer(as_string(v, w)); });
    });
    field(j, path, "beta1", [&](const json& v, const std::string& w) { c.beta1 = as_double(v, w); });
    field(j, path, "beta2", [&](const json& v, const std::string& w) { c.beta2 = as_double(v, w); });
    field(j, path, "epsilon", [&](const json& v, const std::string& w) { c.epsilon = as_double(v, w); });
    field(j, path, "seed", [&](const json& v, const std::string& w) { c.seed = as_size(v, w); });
    field(j, path, "eval_every", [&](const json& v, const std::string& w) { c.eval_every = as_size(v, w); });
    field(j, path, "precision", [&](const json& v, const std::string& w) {
        c.precision = at_path(w, [&] { return parse_precision(as_string(v, w)); });
    });
    return c;
}

inline json to_json(const TrainConfig& c) {
    return {{"steps", c.steps},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"optimizer", std::string(optimizer_name(c.optimizer))},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"epsilon", c.epsilon},
            {"seed", c.seed},
            {"eval_every", c.eval_every},
            {"precision", std::string(precision_name(c.precision))}};
}

inline SweepSpec sweep_from_json(const json& j, const std::string& path = "sweep") {
    using namespace detail;
    reject_unknown(j, path, {"kind", "ranks", "placements", "methods", "seeds", "base_rank", "budget_tolerance"});
    SweepSpec s;
    field(j, path, "kind", [&](const json& v, const std::string& w) {
        s.kind = at_path(w, [&] { return parse_sweep_kind(as_string(v, w)); });
    });
    field(j, path, "ranks", [&](const json& v, const std::string& w) {
        s.ranks.clear();
        for (std::size_t i = 0; i < as_array(v, w).size(); ++i)
            s.ranks.push_back(as_size(v[i], w + "[" + std::to_string(i) + "]"));
    });
    field(j, path, "placements", [&](const json& v, const std::string& w) {
        s.placements.clear();
        for (std::size_t i = 0; i < as_array(v, w).size(); ++i)
            s.placements.push_back(parse_targets(v[i], w + "[" + std::to_string(i) + "]"));
    });
    field(j, path, "methods", [&](const json& v, const std::string& w) {
        s.methods.clear();
        for (std::size_t i = 0; i < as_array(v, w).size(); ++i) {
            const auto wi = w + "[" + std::to_string(i) + "]";
            s.methods.push_back(at_path(wi, [&] { return parse_method(as_string(v[i], wi)); }));
        }
    });
    field(j, path, "seeds", [&](const json& v, const std::string& w) {
        s.seeds.clear();
        for (std::size_t i = 0; i < as_array(v, w).size(); ++i)
            s.seeds.push_back(as_size(v[i], w + "[" + std::to_string(i) + "]"));
    });
    field(j, path, "base_rank", [&](const json& v, const std::string& w) { s.base_rank = as_size(v, w); });
    field(j, path, "budget_tolerance",
          [&](const json& v, const std::string& w) { s.budget_tolerance = as_double(v, w); });
    return s;
}

inline json to_json(const SweepSpec& s) {
    json placements = json::array();
    for (const auto& p : s.placements) placements.push_back(detail::targets_json(p));
    json methods = json::array();
    for (auto m : s.methods) methods.push_back(std::string(method_name(m)));
    return {{"kind", std::string(sweep_kind_name(s.kind))},
            {"ranks", s.ranks},
            {"placements", placements},
            {"methods", methods},
            {"seeds", s.seeds},
            {"base_rank", s.base_rank},
            {"budget_tolerance", s.budget_tolerance}};
}

/// Strict: unknown keys anywhere are an error naming the full key path.
inline RunSpec run_spec_from_json(const json& j) {
    detail::reject_unknown(j, "", {"model", "placement", "task", "train", "sweep"});
    RunSpec s;
    if (j.contains("model")) s.model = model_from_json(j["model"]);
    if (j.contains("placement")) s.placement = placement_from_json(j["placement"]);
    if (j.contains("task")) s.task = task_from_json(j["task"]);
    if (j.contains("train")) s.train = train_from_json(j["train"]);
    if (j.contains("sweep")) s.sweep = sweep_from_json(j["sweep"]);
    return s;
}

/// The resolved spec with every default spelled out.
inline json to_json(const RunSpec& s) {
    json j{{"model", to_json(s.model)},
           {"placement", to_json(s.placement)},
           {"task", to_json(s.task)},
           {"train", to_json(s.train)}};
    if (s.sweep) j["sweep"] = to_json(*s.sweep);
    return j;
}

inline RunSpec parse_run_spec(const std::string& text, const std::string& source = "<spec>") {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(source + ": " + e.what());
    }
    return run_spec_from_json(j);
}

inline RunSpec load_run_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open spec file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_spec(ss.str(), path);
}

/// One metrics line. Wall-clock time is deliberately left out so reruns are line-identical.
inline json to_json(const MetricsRecord& r) {
    return {{"step", r.step},
            {"train_loss", r.train_loss},
            {"val_accuracy", r.val_accuracy},
            {"trainable_param_count", r.trainable_param_count},
            {"method", r.method},
            {"rank", r.rank},
            {"placement_id", r.placement_id},
            {"seed", r.seed}};
}

inline MetricsRecord metrics_from_json(const json& j) {
    MetricsRecord r;
    r.step = j.at("step").get<std::size_t>();
    r.train_loss = j.at("train_loss").get<double>();
    r.val_accuracy = j.at("val_accuracy").get<double>();
    r.trainable_param_count = j.at("trainable_param_count").get<std::size_t>();
    r.method = j.at("method").get<std::string>();
    r.rank = j.at("rank").get<std::size_t>();
    r.placement_id = j.at("placement_id").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    return r;
}

/// Reads a JSON-lines file. A final line without its newline means the writer was
/// interrupted; that is reported rather than parsed.
inline std::vector<json> read_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    const auto text = ss.str();
    if (!text.empty() && text.back() != '\n') throw InputError(path + ": truncated final record");
    std::vector<json> out;
    std::size_t begin = 0;
    while (begin < text.size()) {
        const auto end = text.find('\n', begin);
        out.push_back(json::parse(text.substr(begin, end - begin)));
        begin = end + 1;
    }
    return out;
}

}  // namespace peft
