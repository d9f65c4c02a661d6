// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "peft/errors.hpp"
#include "peft/model.hpp"
#include "peft/tasks.hpp"
#include "peft/training.hpp"

namespace peft {

enum class Method { lora, loratrf };

inline std::string_view method_name(Method m) { return m == Method::lora ? "lora" : "loratrf"; }

inline Method parse_method(std::string_view s) {
    if (s == "lora") return Method::lora;
    if (s == "loratrf") return Method::loratrf;
    throw ConfigError("unknown method '" + std::string(s) + "' (expected lora or loratrf)");
}

enum class SweepKind { rank, placement };

inline std::string_view sweep_kind_name(SweepKind k) { return k == SweepKind::rank ? "rank" : "placement"; }

inline SweepKind parse_sweep_kind(std::string_view s) {
    if (s == "rank") return SweepKind::rank;
    if (s == "placement") return SweepKind::placement;
    throw ConfigError("unknown sweep kind '" + std::string(s) + "' (expected rank or placement)");
}

/// rank sweep:      every (method, rank, seed) with the base placement's LoRA targets.
/// placement sweep: every (method, placement, seed); each placement's rank is chosen so its
///                  adapter count lands as close as possible to the first placement's count
///                  at base_rank.
struct SweepSpec {
    SweepKind kind = SweepKind::rank;
    std::vector<std::size_t> ranks{4, 8, 16, 32};
    std::vector<std::set<Matrix>> placements;
    std::vector<Method> methods{Method::lora, Method::loratrf};
    std::vector<std::uint64_t> seeds{1};
    std::size_t base_rank = 8;
    double budget_tolerance = 0.10;

    void validate() const {
        if (methods.empty()) throw ConfigError("sweep.methods must be nonempty");
        if (seeds.empty()) throw ConfigError("sweep.seeds must be nonempty");
        if (std::set<Method>(methods.begin(), methods.end()).size() != methods.size())
            throw ConfigError("sweep.methods contains duplicates");
        if (kind == SweepKind::rank) {
            if (ranks.empty()) throw ConfigError("sweep.ranks must be nonempty");
            for (auto r : ranks)
                if (r == 0) throw ConfigError("sweep.ranks entries must be >= 1");
        } else {
            if (placements.empty()) throw ConfigError("sweep.placements must be nonempty");
            for (const auto& p : placements)
                if (p.empty()) throw ConfigError("sweep.placements entries must name at least one matrix");
            if (base_rank == 0) throw ConfigError("sweep.base_rank must be >= 1");
            if (!(budget_tolerance >= 0.0)) throw ConfigError("sweep.budget_tolerance must be >= 0");
        }
    }

    bool operator==(const SweepSpec&) const = default;
};

/// lora drops filters; loratrf keeps the base filter layers, or filters every layer
/// when the base lists none.
inline AdapterPlacement placement_for(const ModelConfig& cfg, const AdapterPlacement& base, Method method) {
    auto p = base;
    if (method == Method::lora) {
        p.filter_layers.clear();
    } else if (p.filter_layers.empty()) {
        for (std::size_t l = 0; l < cfg.num_layers; ++l) p.filter_layers.insert(l);
    }
    return p;
}

struct BudgetMatch {
    std::string placement_id;
    std::set<Matrix> targets;
    std::size_t rank = 0;
    std::size_t realized = 0;  // adapter (LoRA + filter) count at `rank`
    std::size_t target = 0;
    bool feasible = true;

    double relative_gap() const {
        return target == 0 ? 0.0
                           : std::abs(static_cast<double>(realized) - static_cast<double>(target)) /
                                 static_cast<double>(target);
    }
};

inline std::string placement_id(std::size_t index) { return "p" + std::to_string(index); }

/// Picks, per placement, the rank in [1, smallest matrix dim] whose count is closest
/// to the first placement's count at base_rank. Placements that cannot get within
/// `tolerance` are flagged infeasible and keep their closest rank.
inline std::vector<BudgetMatch> match_budget(const ModelConfig& cfg, const AdapterPlacement& base,
                                             const std::vector<std::set<Matrix>>& placements, std::size_t base_rank,
                                             double tolerance) {
    if (placements.empty()) throw ConfigError("match_budget: no placements");
    auto count_at = [&](const std::set<Matrix>& targets, std::size_t r) {
        auto p = base;
        p.lora_targets = targets;
        p.lora_rank = r;
        return count_trainable(cfg, p).adapters();
    };
    auto max_rank = [&](const std::set<Matrix>& targets) {
        std::size_t lim = SIZE_MAX;
        for (auto m : targets) {
            const auto [rows, cols] = matrix_shape(cfg, m);
            lim = std::min({lim, rows, cols});
        }
        return lim;
    };
    if (base_rank > max_rank(placements.front()))
        throw ConfigError("sweep.base_rank exceeds the smallest dimension of the first placement");

    const auto target = count_at(placements.front(), base_rank);
    std::vector<BudgetMatch> out;
    for (std::size_t i = 0; i < placements.size(); ++i) {
        BudgetMatch m;
        m.placement_id = placement_id(i);
        m.targets = placements[i];
        m.target = target;
        std::size_t best_gap = SIZE_MAX;
        for (std::size_t r = 1; r <= max_rank(placements[i]); ++r) {
            const auto c = count_at(placements[i], r);
            const auto gap = c > target ? c - target : target - c;
            if (gap < best_gap) {
                best_gap = gap;
                m.rank = r;
                m.realized = c;
            }
        }
        m.feasible = m.relative_gap() <= tolerance;
        out.push_back(std::move(m));
    }
    return out;
}

struct SweepCell {
    Method method = Method::lora;
    std::size_t rank = 0;
    std::string placement_id = "p0";
    std::uint64_t seed = 0;
    AdapterPlacement placement;
    bool budget_feasible = true;

    /// Stable file stem, e.g. "loratrf_r8_p0_s3".
    std::string stem() const {
        return std::string(method_name(method)) + "_r" + std::to_string(rank) + "_" + placement_id + "_s" +
               std::to_string(seed);
    }
};

struct CellResult {
    SweepCell cell;
    std::vector<MetricsRecord> records;
    bool ok = false;
    bool diverged = false;
    std::string error;
    std::size_t adapter_count = 0;
    std::size_t trainable_count = 0;

    double final_accuracy() const { return records.empty() ? 0.0 : records.back().val_accuracy; }
};

struct AggregateRow {
    std::string method;
    std::size_t rank = 0;
    std::string placement_id;
    std::size_t runs = 0;      // successful cells contributing
    std::size_t failures = 0;  // cells that errored or diverged
    double mean_accuracy = 0.0;
    double std_accuracy = 0.0;  // sample standard deviation, 0 for a single run
    std::size_t adapter_count = 0;
    std::size_t trainable_count = 0;
    bool budget_feasible = true;
};

struct SweepReport {
    SweepKind kind = SweepKind::rank;
    std::vector<CellResult> cells;
    std::vector<AggregateRow> aggregate;
    std::map<Method, std::vector<BudgetMatch>> budgets;  // placement sweeps only

    bool all_ok() const {
        return std::all_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.ok; });
    }

    const AggregateRow* find(std::string_view method, std::size_t rank, std::string_view pid = "p0") const {
        for (const auto& row : aggregate)
            if (row.method == method && row.rank == rank && row.placement_id == pid) return &row;
        return nullptr;
    }
};

/// Cells in the order they are reported: method, then rank or placement, then seed.
inline std::vector<SweepCell> enumerate_cells(const SweepSpec& spec, const ModelConfig& cfg,
                                              const AdapterPlacement& base, SweepReport* report = nullptr) {
    spec.validate();
    std::vector<SweepCell> cells;
    for (auto method : spec.methods) {
        const auto mp = placement_for(cfg, base, method);
        if (spec.kind == SweepKind::rank) {
            for (auto r : spec.ranks)
                for (auto s : spec.seeds) {
                    SweepCell c{method, r, "p0", s, mp, true};
                    c.placement.lora_rank = r;
                    cells.push_back(std::move(c));
                }
        } else {
            auto matches = match_budget(cfg, mp, spec.placements, spec.base_rank, spec.budget_tolerance);
            for (const auto& m : matches)
                for (auto s : spec.seeds) {
                    SweepCell c{method, m.rank, m.placement_id, s, mp, m.feasible};
                    c.placement.lora_targets = m.targets;
                    c.placement.lora_rank = m.rank;
                    cells.push_back(std::move(c));
                }
            if (report) report->budgets[method] = std::move(matches);
        }
    }
    return cells;
}

/// Worker cap from PEFT_WORKERS; falls back to the hardware thread count.
inline std::size_t worker_limit() {
    std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("PEFT_WORKERS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 1) throw ConfigError("PEFT_WORKERS must be a positive integer");
        return static_cast<std::size_t>(v);
    }
    return hw;
}

/// Per (method, rank, placement) mean and sample std of final accuracy over successful cells.
inline std::vector<AggregateRow> aggregate_cells(const std::vector<CellResult>& cells) {
    std::vector<AggregateRow> rows;
    std::vector<std::vector<double>> accs;
    for (const auto& c : cells) {
        const auto method = std::string(method_name(c.cell.method));
        auto it = std::find_if(rows.begin(), rows.end(), [&](const AggregateRow& r) {
            return r.method == method && r.rank == c.cell.rank && r.placement_id == c.cell.placement_id;
        });
        if (it == rows.end()) {
            AggregateRow r;
            r.method = method;
            r.rank = c.cell.rank;
            r.placement_id = c.cell.placement_id;
            r.adapter_count = c.adapter_count;
            r.trainable_count = c.trainable_count;
            r.budget_feasible = c.cell.budget_feasible;
            rows.push_back(r);
            accs.emplace_back();
            it = rows.end() - 1;
        }
        const auto k = static_cast<std::size_t>(it - rows.begin());
        if (c.ok) {
            accs[k].push_back(c.final_accuracy());
        } else {
            ++it->failures;
        }
    }
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto& a = accs[k];
        rows[k].runs = a.size();
        if (a.empty()) continue;
        double sum = 0.0;
        for (auto v : a) sum += v;
        const double mean = sum / static_cast<double>(a.size());
        double ss = 0.0;
        for (auto v : a) ss += (v - mean) * (v - mean);
        rows[k].mean_accuracy = mean;
        rows[k].std_accuracy = a.size() > 1 ? std::sqrt(ss / static_cast<double>(a.size() - 1)) : 0.0;
    }
    return rows;
}

/// Trains every cell. Cells run on up to `workers` threads; each worker owns its model,
/// datasets are generated once per seed and shared read-only. A failing cell is recorded
/// and the sweep carries on.
template <std::floating_point T>
SweepReport run_sweep(const SweepSpec& spec, const ModelConfig& cfg, const AdapterPlacement& base,
                      const SyntheticTask& task, const TrainConfig& train_cfg, std::size_t workers = 0) {
    SweepReport report;
    report.kind = spec.kind;
    const auto cells = enumerate_cells(spec, cfg, base, &report);
    train_cfg.validate();
    task.validate(cfg);

    std::map<std::uint64_t, Dataset> data;
    for (auto s : spec.seeds)
        if (!data.count(s)) data.emplace(s, generate_task(task, cfg, s));

    report.cells.resize(cells.size());
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (;;) {
            const auto i = next.fetch_add(1);
            if (i >= cells.size()) return;
            auto& out = report.cells[i];
            out.cell = cells[i];
            try {
                const auto counts = count_trainable(cfg, out.cell.placement);
                out.adapter_count = counts.adapters();
                out.trainable_count = counts.total();
                auto model = AdaptedModel<T>::build(cfg, out.cell.placement, out.cell.seed);
                auto tc = train_cfg;
                tc.seed = out.cell.seed;
                const RunLabel label{std::string(method_name(out.cell.method)), out.cell.rank, out.cell.placement_id,
                                     out.cell.seed};
                auto res = train(model, data.at(out.cell.seed), tc, label);
                out.records = std::move(res.records);
                out.diverged = res.diverged;
                out.ok = !res.diverged;
                if (res.diverged) out.error = res.diagnostic;
            } catch (const std::exception& e) {
                out.ok = false;
                out.error = e.what();
            }
        }
    };
    if (workers == 0) workers = worker_limit();
    workers = std::max<std::size_t>(1, std::min(workers, cells.size()));
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    report.aggregate = aggregate_cells(report.cells);
    return report;
}

}  // namespace peft
