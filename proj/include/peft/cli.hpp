// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "peft/checkpoint.hpp"
#include "peft/config_io.hpp"
#include "peft/errors.hpp"
#include "peft/model.hpp"
#include "peft/sweep.hpp"
#include "peft/tasks.hpp"
#include "peft/training.hpp"
#include "peft/verification.hpp"

namespace peft {

namespace fs = std::filesystem;

enum ExitCode : int {
    kExitOk = 0,
    kExitCheckFailed = 1,   // a verification ran and failed
    kExitInvalid = 2,       // bad spec, flags or state (e.g. double merge)
    kExitRunFailed = 3,     // divergence or failed sweep cells
    kExitCheckpoint = 4,    // unreadable or inconsistent checkpoint
};

struct CliOptions {
    std::string spec;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<Precision> precision;
    std::string checkpoint;
    std::string baseline;
    std::size_t draws = 20;
};

inline constexpr double kMergeTolerance = 1e-5;
inline constexpr std::size_t kMergeInputs = 10;

namespace detail {

inline RunSpec resolve_spec(const CliOptions& o) {
    if (o.spec.empty()) throw ConfigError("--spec is required");
    auto s = load_run_spec(o.spec);
    if (o.seed) s.train.seed = *o.seed;
    if (o.precision) s.train.precision = *o.precision;
    s.validate();
    return s;
}

inline void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot write '" + p.string() + "'");
    f << text;
}

// One complete line per write, flushed, so a reader never sees half a record.
inline void emit(std::ostream& os, const json& row) { os << row.dump() << '\n' << std::flush; }

inline fs::path prepare_out(const CliOptions& o, const RunSpec& s) {
    if (o.out.empty()) throw ConfigError("--out is required");
    fs::path dir(o.out);
    fs::create_directories(dir);
    write_text(dir / "resolved_config.json", to_json(s).dump(2) + "\n");
    return dir;
}

template <std::floating_point T>
int train_impl(const RunSpec& spec, const fs::path& dir, std::ostream& out) {
    const auto seed = spec.train.seed;
    const auto data = generate_task(spec.task, spec.model, seed);
    auto model = AdaptedModel<T>::build(spec.model, spec.placement, seed);
    std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
    std::ofstream timing(dir / "timing.jsonl", std::ios::trunc);
    const RunLabel label{method_label(spec.placement), spec.placement.lora_targets.empty() ? 0 : spec.placement.lora_rank,
                         "p0", seed};
    auto res = train(model, data, spec.train, label, [&](const MetricsRecord& r) {
        emit(metrics, to_json(r));
        emit(timing, {{"step", r.step}, {"wall_ms", r.wall_ms}});
    });
    if (res.diverged) {
        emit(metrics, {{"event", "diverged"}, {"diagnostic", res.diagnostic}});
        out << "diverged: " << res.diagnostic << "\n";
        return kExitRunFailed;
    }
    save_checkpoint(dir / "checkpoint.peft", model, seed);
    const auto& last = res.records.back();
    out << "trained " << last.step << " steps, " << label.method << " r=" << label.rank
        << ", trainable=" << last.trainable_param_count << ", final loss " << last.train_loss << ", val accuracy "
        << last.val_accuracy << "\n";
    return kExitOk;
}

inline json aggregate_json(const AggregateRow& r) {
    return {{"kind", "aggregate"},        {"method", r.method},
            {"rank", r.rank},             {"placement_id", r.placement_id},
            {"runs", r.runs},             {"failures", r.failures},
            {"mean_accuracy", r.mean_accuracy}, {"std_accuracy", r.std_accuracy},
            {"adapter_count", r.adapter_count}, {"trainable_count", r.trainable_count},
            {"budget_feasible", r.budget_feasible}};
}

template <std::floating_point T>
int sweep_impl(const RunSpec& spec, const fs::path& dir, std::ostream& out) {
    const auto report = run_sweep<T>(*spec.sweep, spec.model, spec.placement, spec.task, spec.train);
    fs::create_directories(dir / "cells");
    for (const auto& c : report.cells) {
        std::ofstream f(dir / "cells" / (c.cell.stem() + ".jsonl"), std::ios::trunc);
        for (const auto& r : c.records) emit(f, to_json(r));
        if (!c.ok) emit(f, {{"event", c.diverged ? "diverged" : "failed"}, {"error", c.error}});
    }
    std::ofstream agg(dir / "aggregate.jsonl", std::ios::trunc);
    for (const auto& [method, matches] : report.budgets)
        for (const auto& m : matches)
            emit(agg, {{"kind", "budget"},
                       {"method", std::string(method_name(method))},
                       {"placement_id", m.placement_id},
                       {"targets", targets_json(m.targets)},
                       {"rank", m.rank},
                       {"realized_count", m.realized},
                       {"target_count", m.target},
                       {"relative_gap", m.relative_gap()},
                       {"feasible", m.feasible}});
    for (const auto& r : report.aggregate) emit(agg, aggregate_json(r));
    // LoRATRF vs LoRA per configuration; reported, not judged.
    for (const auto& r : report.aggregate) {
        if (r.method != "loratrf" || r.runs == 0) continue;
        for (const auto& l : report.aggregate) {
            const bool same = spec.sweep->kind == SweepKind::rank ? l.rank == r.rank : l.placement_id == r.placement_id;
            if (l.method == "lora" && same && l.runs > 0)
                emit(agg, {{"kind", "comparison"},
                           {"rank", r.rank},
                           {"placement_id", r.placement_id},
                           {"lora_mean", l.mean_accuracy},
                           {"loratrf_mean", r.mean_accuracy},
                           {"loratrf_minus_lora", r.mean_accuracy - l.mean_accuracy}});
        }
    }
    for (const auto& c : report.cells)
        if (!c.ok) emit(agg, {{"kind", "failure"}, {"cell", c.cell.stem()}, {"error", c.error}});

    out << std::left << std::setw(9) << "method" << std::setw(6) << "rank" << std::setw(6) << "pid" << std::setw(10)
        << "params" << std::setw(10) << "mean" << "std\n";
    for (const auto& r : report.aggregate)
        out << std::setw(9) << r.method << std::setw(6) << r.rank << std::setw(6) << r.placement_id << std::setw(10)
            << r.adapter_count << std::setw(10) << r.mean_accuracy << r.std_accuracy
            << (r.budget_feasible ? "" : "  (budget infeasible)") << (r.failures ? "  (failures)" : "") << "\n";
    return report.all_ok() ? kExitOk : kExitRunFailed;
}

template <std::floating_point T>
int merge_impl(const CliOptions& o, const CheckpointManifest& manifest, std::ostream& out) {
    const auto reference = load_checkpoint<T>(o.checkpoint);
    auto merged = load_checkpoint<T>(o.checkpoint);
    merged.merge_lora();
    const auto targets = merged.placement().lora_targets;
    merged.drop_merged_lora();
    const auto batches = random_batches(manifest.model, kMergeInputs, 1, manifest.seed ^ 0x3e76eULL);
    const double gap = max_logit_gap(reference, merged, batches);
    const bool pass = gap <= kMergeTolerance;
    auto extra = manifest.extra;
    extra["merged_lora_targets"] = targets_json(targets);
    extra["merge_verification"] = {
        {"inputs", kMergeInputs}, {"max_logit_gap", gap}, {"tolerance", kMergeTolerance}, {"pass", pass}};
    save_checkpoint(o.out, merged, manifest.seed, extra, true);
    out << "merged " << targets.size() << " LoRA target(s); max logit gap " << gap << (pass ? " (ok)" : " (FAILED)")
        << "\n";
    return pass ? kExitOk : kExitCheckFailed;
}

inline json breakdown_json(const ParamBreakdown& b) {
    return {{"lora", b.lora},         {"filter", b.filter}, {"head", b.head},
            {"adapters", b.adapters()}, {"total", b.total()}, {"per_matrix", b.per_matrix}};
}

inline json audit_json(const AuditReport& r) {
    return {{"kind", "audit"},
            {"audited", breakdown_json(r.audited)},
            {"production", breakdown_json(r.production)},
            {"tensors", r.entries.size()},
            {"match", r.match}};
}

template <std::floating_point T>
AuditReport audit_checkpoint(const std::string& path) {
    return audit_model(load_checkpoint<T>(path));
}

// Maps exceptions to exit codes with a one-line message.
template <class F>
int guarded(std::ostream& err, F&& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const StateError& e) {
        err << "error: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const CheckpointError& e) {
        err << "checkpoint error: " << e.what() << "\n";
        return kExitCheckpoint;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRunFailed;
    }
}

}  // namespace detail

/// Writes resolved_config.json, metrics.jsonl (one record per line), timing.jsonl and
/// checkpoint.peft into --out.
inline int cmd_train(const CliOptions& o, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    return detail::guarded(err, [&] {
        const auto spec = detail::resolve_spec(o);
        const auto dir = detail::prepare_out(o, spec);
        return spec.train.precision == Precision::single ? detail::train_impl<float>(spec, dir, out)
                                                          : detail::train_impl<double>(spec, dir, out);
    });
}

/// Writes cells/<method>_r<rank>_<pid>_s<seed>.jsonl per cell and aggregate.jsonl.
inline int cmd_sweep(const CliOptions& o, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    return detail::guarded(err, [&] {
        const auto spec = detail::resolve_spec(o);
        if (!spec.sweep) throw ConfigError("spec has no 'sweep' section");
        const auto dir = detail::prepare_out(o, spec);
        return spec.train.precision == Precision::single ? detail::sweep_impl<float>(spec, dir, out)
                                                          : detail::sweep_impl<double>(spec, dir, out);
    });
}

/// Runs `draws` random draws each of the isolated filter, the isolated LoRA projection
/// and the spec's full model, in double precision.
inline int cmd_gradcheck(const CliOptions& o, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    return detail::guarded(err, [&] {
        const auto spec = detail::resolve_spec(o);
        std::ofstream file;
        if (!o.out.empty()) {
            fs::create_directories(o.out);
            file.open(fs::path(o.out) / "gradcheck.jsonl", std::ios::trunc);
        }
        std::ostream& rows = o.out.empty() ? out : file;
        const auto& m = spec.model;
        std::mt19937_64 rng(spec.train.seed);
        const auto frank = std::min(spec.placement.filter_rank, m.hidden_dim);
        const auto lrank = std::min({spec.placement.lora_rank, m.hidden_dim, m.ffn_dim});
        bool all = true;
        double worst[3] = {0, 0, 0};
        auto record = [&](const char* check, std::size_t draw, const GradCheckReport& r, int slot) {
            all = all && r.pass;
            worst[slot] = std::max(worst[slot], r.max_rel_error);
            detail::emit(rows, {{"check", check},
                                {"draw", draw},
                                {"max_rel_error", r.max_rel_error},
                                {"worst_param", r.worst_param},
                                {"worst_index", r.worst_index},
                                {"step", r.step},
                                {"tolerance", r.tolerance},
                                {"pass", r.pass}});
        };
        for (std::size_t i = 0; i < o.draws; ++i) {
            record("filter_apply", i, gradcheck_filter(rng, m.hidden_dim, 5, frank, 1e-6), 0);
            record("lora_forward", i, gradcheck_lora(rng, m.ffn_dim, m.hidden_dim, lrank, 4, 1e-6), 1);
            record("model_loss", i, gradcheck_model(m, spec.placement, spec.train.seed + i, 1e-5), 2);
        }
        out << "gradcheck: filter " << worst[0] << ", lora " << worst[1] << ", model " << worst[2]
            << (all ? " (pass)" : " (FAIL)") << "\n";
        return all ? kExitOk : kExitCheckFailed;
    });
}

/// Audits the spec's counts, or a checkpoint's tensors when --checkpoint is given.
inline int cmd_audit(const CliOptions& o, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    return detail::guarded(err, [&] {
        AuditReport rep;
        if (!o.checkpoint.empty()) {
            const auto manifest = read_manifest(o.checkpoint);
            rep = manifest.precision == Precision::single ? detail::audit_checkpoint<float>(o.checkpoint)
                                                           : detail::audit_checkpoint<double>(o.checkpoint);
        } else {
            const auto spec = detail::resolve_spec(o);
            rep = audit_counts(spec.model, spec.placement);
        }
        const auto j = detail::audit_json(rep);
        if (!o.out.empty()) {
            fs::create_directories(o.out);
            detail::write_text(fs::path(o.out) / "audit.json", j.dump(2) + "\n");
        }
        out << j.dump() << "\n";
        if (!rep.match) err << "audit mismatch: shape enumeration disagrees with the counting engine\n";
        return rep.match ? kExitOk : kExitCheckFailed;
    });
}

/// Folds LoRA into the base weights of --checkpoint and writes the result to --out.
inline int cmd_merge(const CliOptions& o, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    return detail::guarded(err, [&] {
        if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
        if (o.out.empty()) throw ConfigError("--out (output checkpoint path) is required");
        const auto manifest = read_manifest(o.checkpoint);
        if (manifest.lora_merged) throw StateError("checkpoint '" + o.checkpoint + "' is already merged");
        if (manifest.placement.lora_targets.empty())
            throw StateError("checkpoint '" + o.checkpoint + "' has no LoRA adapters to merge");
        return manifest.precision == Precision::single ? detail::merge_impl<float>(o, manifest, out)
                                                        : detail::merge_impl<double>(o, manifest, out);
    });
}

/// Closed-form trainable counts; with --baseline, also the adapter-count ratio.
inline int cmd_count_params(const CliOptions& o, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    return detail::guarded(err, [&] {
        const auto spec = detail::resolve_spec(o);
        const auto b = count_trainable(spec.model, spec.placement);
        auto j = detail::breakdown_json(b);
        j["kind"] = "count";
        j["placement"] = to_json(spec.placement);
        if (!o.baseline.empty()) {
            auto base_opts = o;
            base_opts.spec = o.baseline;
            const auto base = detail::resolve_spec(base_opts);
            const auto bb = count_trainable(base.model, base.placement);
            j["baseline_adapters"] = bb.adapters();
            j["ratio"] = bb.adapters() == 0 ? 0.0 : static_cast<double>(b.adapters()) / static_cast<double>(bb.adapters());
        }
        if (!o.out.empty()) {
            fs::create_directories(o.out);
            detail::write_text(fs::path(o.out) / "count.json", j.dump(2) + "\n");
        }
        out << j.dump() << "\n";
        return kExitOk;
    });
}

/// Parses argv and dispatches to a subcommand.
inline int run_cli(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"peftlab: LoRA and task-aware filter experiments at desk scale"};
    app.require_subcommand(1);
    CliOptions o;
    std::string precision;
    std::string seed;

    auto add_common = [&](CLI::App* sub, bool needs_spec) {
        auto* s = sub->add_option("--spec", o.spec, "run spec (JSON)");
        if (needs_spec) s->required();
        sub->add_option("--seed", seed, "override train.seed")->check(CLI::NonNegativeNumber);
        sub->add_option("--precision", precision, "override train.precision")
            ->check(CLI::IsMember({"single", "double"}));
    };
    auto* train_cmd = app.add_subcommand("train", "train one model");
    add_common(train_cmd, true);
    train_cmd->add_option("--out", o.out, "output directory")->required();

    auto* sweep_cmd = app.add_subcommand("sweep", "rank or placement sweep");
    add_common(sweep_cmd, true);
    sweep_cmd->add_option("--out", o.out, "output directory")->required();

    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
    add_common(grad_cmd, true);
    grad_cmd->add_option("--out", o.out, "directory for gradcheck.jsonl");
    grad_cmd->add_option("--draws", o.draws, "random draws per check")->check(CLI::PositiveNumber);

    auto* audit_cmd = app.add_subcommand("audit", "parameter-count audit of a spec or checkpoint");
    add_common(audit_cmd, false);
    audit_cmd->add_option("--checkpoint", o.checkpoint, "audit this checkpoint instead of --spec");
    audit_cmd->add_option("--out", o.out, "directory for audit.json");

    auto* merge_cmd = app.add_subcommand("merge", "fold LoRA into base weights");
    merge_cmd->add_option("--checkpoint", o.checkpoint, "input checkpoint")->required();
    merge_cmd->add_option("--out", o.out, "output checkpoint path")->required();

    auto* count_cmd = app.add_subcommand("count-params", "trainable parameter counts");
    add_common(count_cmd, true);
    count_cmd->add_option("--baseline", o.baseline, "spec to compare adapter counts against");
    count_cmd->add_option("--out", o.out, "directory for count.json");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitInvalid;
    }
    if (!precision.empty()) o.precision = parse_precision(precision);
    if (!seed.empty()) o.seed = std::stoull(seed);
    if (audit_cmd->parsed() && o.spec.empty() && o.checkpoint.empty()) {
        err << "error: audit needs --spec or --checkpoint\n";
        return kExitInvalid;
    }

    if (train_cmd->parsed()) return cmd_train(o, out, err);
    if (sweep_cmd->parsed()) return cmd_sweep(o, out, err);
    if (grad_cmd->parsed()) return cmd_gradcheck(o, out, err);
    if (audit_cmd->parsed()) return cmd_audit(o, out, err);
    if (merge_cmd->parsed()) return cmd_merge(o, out, err);
    return cmd_count_params(o, out, err);
}

}  // namespace peft
