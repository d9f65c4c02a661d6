// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <limits>
#include <random>
#include <set>
#include <vector>

#include "peft/optim.hpp"
#include "peft/sweep.hpp"
#include "peft/tasks.hpp"
#include "peft/training.hpp"

using namespace peft;

namespace {

ModelConfig tiny() {
    ModelConfig c;
    c.num_layers = 1;
    c.hidden_dim = 16;
    c.num_heads = 2;
    c.ffn_dim = 32;
    c.vocab_size = 64;
    c.max_seq_len = 8;
    c.num_classes = 4;
    return c;
}

SyntheticTask needle(std::size_t train = 400, std::size_t val = 100) {
    SyntheticTask t;
    t.seq_len = 8;
    t.train_size = train;
    t.val_size = val;
    return t;
}

AdapterPlacement lora_filters(std::size_t r = 2) {
    AdapterPlacement p;
    p.lora_targets = {Matrix::q, Matrix::v};
    p.lora_rank = r;
    p.lora_alpha = 2.0;
    p.filter_layers = {0};
    p.filter_rank = 4;
    return p;
}

TrainConfig quick(std::size_t steps = 20) {
    TrainConfig t;
    t.steps = steps;
    t.batch_size = 16;
    t.learning_rate = 0.01;
    t.eval_every = 10;
    return t;
}

void expect_same_records(const std::vector<MetricsRecord>& a, const std::vector<MetricsRecord>& b) {
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].step, b[i].step);
        EXPECT_EQ(a[i].train_loss, b[i].train_loss);
        EXPECT_EQ(a[i].val_accuracy, b[i].val_accuracy);
        EXPECT_EQ(a[i].trainable_param_count, b[i].trainable_param_count);
    }
}

struct EnvGuard {
    explicit EnvGuard(const char* value) {
        if (value) setenv("PEFT_WORKERS", value, 1);
        else unsetenv("PEFT_WORKERS");
    }
    ~EnvGuard() { unsetenv("PEFT_WORKERS"); }
};

}  // namespace

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

TEST(Task, NeedleLabelIsTheSignalTokenClass) {
    const auto c = tiny();
    const auto t = needle();
    const auto d = generate_task(t, c, 3);
    for (const auto& ex : d.train) {
        std::size_t signals = 0, cls = 99;
        for (auto tok : ex.tokens)
            if (tok < 16) {
                ++signals;
                cls = tok / 4;
            } else {
                EXPECT_LT(tok, 64u);
            }
        ASSERT_EQ(signals, 1u);
        EXPECT_EQ(ex.label, cls);
    }
}

TEST(Task, ParityAndMajorityLabels) {
    auto c = tiny();
    EXPECT_EQ(task_label(needle(), 4, {20, 21, 9, 30}), 2u);
    SyntheticTask parity = needle();
    parity.kind = TaskKind::parity_of_marked;
    EXPECT_EQ(task_label(parity, 2, {0, 20, 5, 30, 7}), 1u);
    EXPECT_EQ(task_label(parity, 2, {0, 20, 5, 30}), 0u);
    SyntheticTask majority = needle();
    majority.kind = TaskKind::majority_plain;
    EXPECT_EQ(task_label(majority, 4, {0, 5, 6, 13, 7}), 1u);
    EXPECT_THROW(generate_task(parity, c, 1), ConfigError);  // parity needs two classes
    c.num_classes = 2;
    EXPECT_NO_THROW(generate_task(parity, c, 1));
}

TEST(Task, GenerationIsDeterministicAndSplitsAreDisjoint) {
    const auto c = tiny();
    const auto t = needle(600, 200);
    const auto a = generate_task(t, c, 11);
    const auto b = generate_task(t, c, 11);
    const auto other = generate_task(t, c, 12);
    ASSERT_EQ(a.train.size(), 600u);
    ASSERT_EQ(a.val.size(), 200u);
    std::set<Sequence> train;
    bool differs = false;
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        EXPECT_EQ(a.train[i].tokens, b.train[i].tokens);
        differs = differs || a.train[i].tokens != other.train[i].tokens;
        train.insert(a.train[i].tokens);
    }
    EXPECT_TRUE(differs);
    for (const auto& ex : a.val) EXPECT_EQ(train.count(ex.tokens), 0u);
}

TEST(Task, InvalidVocabularyLayoutsRejected) {
    const auto c = tiny();
    auto t = needle();
    t.distractor_offset = 10;  // overlaps signal range [0, 16)
    EXPECT_THROW(generate_task(t, c, 1), ConfigError);
    t = needle();
    t.distractor_count = 60;
    EXPECT_THROW(generate_task(t, c, 1), ConfigError);
    t = needle();
    t.seq_len = 9;
    EXPECT_THROW(generate_task(t, c, 1), ConfigError);
}

TEST(Task, TooSmallSequenceSpaceIsReported) {
    auto c = tiny();
    auto t = needle(200, 50);
    t.seq_len = 1;  // only 16 distinct sequences
    EXPECT_THROW(generate_task(t, c, 1), ConfigError);
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

TEST(Optim, AdamSolvesAQuadratic) {
    const std::vector<double> target{1.5, -2.0, 0.25, 3.0};
    auto theta = Tensor<double>::zeros({4}, true);
    auto goal = Tensor<double>({4}, target);
    Adam<double> opt({theta}, 0.05);
    for (int step = 0; step < 500; ++step) {
        opt.zero_grad();
        Graph<double> g;
        auto d = g.sub(theta, goal);
        g.backward(g.sum(g.mul(d, d)));
        opt.step();
    }
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(theta.values()[i], target[i], 1e-3);
    EXPECT_EQ(opt.steps_taken(), 500u);
}

TEST(Optim, SgdStepIsLearningRateTimesGradient) {
    auto theta = Tensor<double>({2}, {1.0, -1.0}, true);
    Sgd<double> opt({theta}, 0.1);
    Graph<double> g;
    g.backward(g.sum(g.mul(theta, theta)));  // grad = 2 theta
    opt.step();
    EXPECT_DOUBLE_EQ(theta.values()[0], 0.8);
    EXPECT_DOUBLE_EQ(theta.values()[1], -0.8);
}

TEST(Optim, FirstAdamStepHasMagnitudeLearningRate) {
    auto theta = Tensor<double>({3}, {0.0, 0.0, 0.0}, true);
    Adam<double> opt({theta}, 0.01);
    Graph<double> g;
    g.backward(g.sum(g.mul(Tensor<double>({3}, {3.0, -0.5, 100.0}), theta)));
    opt.step();
    EXPECT_NEAR(theta.values()[0], -0.01, 1e-9);
    EXPECT_NEAR(theta.values()[1], 0.01, 1e-9);
    EXPECT_NEAR(theta.values()[2], -0.01, 1e-9);
}

TEST(Optim, RefusesFrozenTensors) {
    auto frozen = Tensor<double>::zeros({2});
    EXPECT_THROW(Adam<double>({frozen}, 0.1), ContractError);
    EXPECT_THROW(Sgd<double>({frozen}, 0.1), ContractError);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TEST(Train, LossDecreases) {
    const auto c = tiny();
    const auto data = generate_task(needle(), c, 1);
    auto model = AdaptedModel<float>::build(c, lora_filters(), 1);
    auto cfg = quick(200);
    cfg.eval_every = 1;
    const auto res = train(model, data, cfg, RunLabel{});
    ASSERT_EQ(res.records.size(), 200u);
    double first = 0, last = 0;
    for (std::size_t i = 0; i < 20; ++i) {
        first += res.records[i].train_loss;
        last += res.records[res.records.size() - 1 - i].train_loss;
    }
    EXPECT_LT(last, first);
    EXPECT_FALSE(res.diverged);
}

TEST(Train, RecordsAtEvalEveryAndLastStep) {
    const auto c = tiny();
    const auto data = generate_task(needle(), c, 1);
    auto model = AdaptedModel<float>::build(c, lora_filters(), 1);
    auto cfg = quick(25);
    const RunLabel label{"loratrf", 2, "p3", 9};
    std::vector<std::size_t> seen;
    const auto res = train(model, data, cfg, label, [&](const MetricsRecord& r) { seen.push_back(r.step); });
    EXPECT_EQ(seen, (std::vector<std::size_t>{10, 20, 25}));
    for (const auto& r : res.records) {
        EXPECT_EQ(r.method, "loratrf");
        EXPECT_EQ(r.rank, 2u);
        EXPECT_EQ(r.placement_id, "p3");
        EXPECT_EQ(r.seed, 9u);
        EXPECT_EQ(r.trainable_param_count, model.count_trainable().total());
        EXPECT_GE(r.val_accuracy, 0.0);
        EXPECT_LE(r.val_accuracy, 1.0);
    }
}

TEST(Train, ZeroStepsIsANoOp) {
    const auto c = tiny();
    const auto data = generate_task(needle(), c, 1);
    auto model = AdaptedModel<float>::build(c, lora_filters(), 1);
    auto before = model.named_parameters();
    std::vector<Tensor<float>> copies;
    for (const auto& nt : before) copies.push_back(nt.tensor.clone());
    auto cfg = quick();
    cfg.steps = 0;
    const auto res = train(model, data, cfg, RunLabel{});
    EXPECT_TRUE(res.records.empty());
    for (std::size_t i = 0; i < copies.size(); ++i) EXPECT_TRUE(bitwise_equal(before[i].tensor, copies[i]));
}

TEST(Train, FrozenWeightsAreBitwiseUnchanged) {
    const auto c = tiny();
    const auto data = generate_task(needle(), c, 1);
    auto model = AdaptedModel<float>::build(c, lora_filters(), 1);
    std::vector<Tensor<float>> frozen, copies;
    for (const auto& t : model.frozen_parameters()) {
        frozen.push_back(t);
        copies.push_back(t.clone());
    }
    std::vector<Tensor<float>> trainable_before;
    for (const auto& t : model.trainable_parameters()) trainable_before.push_back(t.clone());
    train(model, data, quick(50), RunLabel{});
    for (std::size_t i = 0; i < frozen.size(); ++i) EXPECT_TRUE(bitwise_equal(frozen[i], copies[i]));
    const auto after = model.trainable_parameters();
    bool moved = false;
    for (std::size_t i = 0; i < after.size(); ++i) moved = moved || !bitwise_equal(after[i], trainable_before[i]);
    EXPECT_TRUE(moved);
}

TEST(Train, RerunIsBitwiseDeterministic) {
    const auto c = tiny();
    const auto data = generate_task(needle(), c, 5);
    auto a = AdaptedModel<double>::build(c, lora_filters(), 5);
    auto b = AdaptedModel<double>::build(c, lora_filters(), 5);
    auto cfg = quick(30);
    cfg.precision = Precision::double_;
    const auto ra = train(a, data, cfg, RunLabel{});
    const auto rb = train(b, data, cfg, RunLabel{});
    expect_same_records(ra.records, rb.records);
    const auto pa = a.named_parameters();
    const auto pb = b.named_parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(bitwise_equal(pa[i].tensor, pb[i].tensor)) << pa[i].name;
}

TEST(Train, NonFiniteLossStopsTheRun) {
    const auto c = tiny();
    const auto data = generate_task(needle(), c, 1);
    auto model = AdaptedModel<float>::build(c, lora_filters(), 1);
    for (auto& nt : model.named_parameters())
        if (nt.name == "head.bias") nt.tensor.values()[0] = std::numeric_limits<float>::quiet_NaN();
    const auto res = train(model, data, quick(20), RunLabel{});
    EXPECT_TRUE(res.diverged);
    ASSERT_EQ(res.records.size(), 1u);
    EXPECT_EQ(res.records.front().step, 1u);
    EXPECT_NE(res.diagnostic.find("step 1"), std::string::npos);
}

TEST(Train, InvalidConfigRejected) {
    TrainConfig t;
    t.batch_size = 0;
    EXPECT_THROW(t.validate(), ConfigError);
    t = TrainConfig{};
    t.learning_rate = -1;
    EXPECT_THROW(t.validate(), ConfigError);
    t = TrainConfig{};
    t.beta2 = 1.0;
    EXPECT_THROW(t.validate(), ConfigError);
}

TEST(Train, LearnedTaskVectorPrefersSignalTokens) {
    ModelConfig c;  // defaults: 2 layers, d 32, vocab 64, 4 classes
    auto task = needle(4000, 300);
    task.seq_len = 16;
    AdapterPlacement p;
    p.lora_targets = {kAllMatrices.begin(), kAllMatrices.end()};
    p.lora_rank = 2;
    p.lora_alpha = 2.0;
    p.filter_layers = {0, 1};
    p.filter_rank = 8;
    const auto data = generate_task(task, c, 1);
    auto model = AdaptedModel<float>::build(c, p, 1);
    auto cfg = quick(300);
    cfg.batch_size = 32;
    cfg.eval_every = 300;
    const auto res = train(model, data, cfg, RunLabel{});
    ASSERT_FALSE(res.diverged);

    std::vector<Sequence> batch;
    for (std::size_t i = 0; i < 64; ++i) batch.push_back(data.val[i].tokens);
    ForwardTrace<float> trace;
    Graph<float> g(GradMode::disabled);
    model.forward(g, batch, &trace);
    const auto& scores = trace.filter_scores.at(0);
    double signal = 0, distractor = 0;
    std::size_t ns = 0, nd = 0;
    for (std::size_t i = 0; i < trace.flat_ids.size(); ++i) {
        if (task.signal_class(trace.flat_ids[i], c.num_classes)) {
            signal += scores[i];
            ++ns;
        } else {
            distractor += scores[i];
            ++nd;
        }
    }
    EXPECT_GT(signal / static_cast<double>(ns), distractor / static_cast<double>(nd));
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

TEST(Sweep, RankSweepCardinality) {
    SweepSpec s;
    s.seeds = {1, 2, 3};
    const auto cells = enumerate_cells(s, tiny(), lora_filters());
    EXPECT_EQ(cells.size(), 4u * 2 * 3);
    std::set<std::string> stems;
    for (const auto& c : cells) {
        stems.insert(c.stem());
        EXPECT_EQ(c.placement.lora_rank, c.rank);
        EXPECT_EQ(c.placement.has_filters(), c.method == Method::loratrf);
    }
    EXPECT_EQ(stems.size(), cells.size());
    EXPECT_EQ(cells.front().stem(), "lora_r4_p0_s1");
}

TEST(Sweep, LoratrfFiltersEveryLayerWhenBaseListsNone) {
    const auto c = tiny();
    AdapterPlacement base;
    base.lora_targets = {Matrix::q};
    EXPECT_EQ(placement_for(c, base, Method::loratrf).filter_layers.size(), c.num_layers);
    EXPECT_TRUE(placement_for(c, lora_filters(), Method::lora).filter_layers.empty());
}

TEST(Sweep, EmptyOrInvalidSpecsRejected) {
    SweepSpec s;
    s.ranks.clear();
    EXPECT_THROW(s.validate(), ConfigError);
    s = SweepSpec{};
    s.methods = {Method::lora, Method::lora};
    EXPECT_THROW(s.validate(), ConfigError);
    s = SweepSpec{};
    s.kind = SweepKind::placement;
    EXPECT_THROW(s.validate(), ConfigError);
    s.placements = {{}};
    EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Sweep, RunProducesOneRowPerCellAndConsistentAggregate) {
    SweepSpec s;
    s.ranks = {2, 4};
    s.seeds = {1, 2};
    const auto rep = run_sweep<float>(s, tiny(), lora_filters(), needle(), quick(10), 1);
    ASSERT_EQ(rep.cells.size(), 8u);
    ASSERT_EQ(rep.aggregate.size(), 4u);
    EXPECT_TRUE(rep.all_ok());
    for (const auto& row : rep.aggregate) {
        std::vector<double> accs;
        for (const auto& c : rep.cells)
            if (method_name(c.cell.method) == row.method && c.cell.rank == row.rank) accs.push_back(c.final_accuracy());
        ASSERT_EQ(accs.size(), 2u);
        const double mean = (accs[0] + accs[1]) / 2;
        const double sd = std::abs(accs[0] - accs[1]) / std::sqrt(2.0);
        EXPECT_NEAR(row.mean_accuracy, mean, 1e-9);
        EXPECT_NEAR(row.std_accuracy, sd, 1e-9);
        EXPECT_EQ(row.runs, 2u);
        EXPECT_EQ(row.failures, 0u);
    }
    const auto* lora4 = rep.find("lora", 4);
    ASSERT_NE(lora4, nullptr);
    EXPECT_EQ(lora4->adapter_count, 4u * 2 * (16 + 16));
}

TEST(Sweep, ResultsDoNotDependOnWorkerCount) {
    SweepSpec s;
    s.ranks = {2, 4};
    s.methods = {Method::loratrf};
    const auto one = run_sweep<float>(s, tiny(), lora_filters(), needle(), quick(10), 1);
    const auto two = run_sweep<float>(s, tiny(), lora_filters(), needle(), quick(10), 2);
    ASSERT_EQ(one.cells.size(), two.cells.size());
    for (std::size_t i = 0; i < one.cells.size(); ++i) {
        EXPECT_EQ(one.cells[i].cell.stem(), two.cells[i].cell.stem());
        expect_same_records(one.cells[i].records, two.cells[i].records);
    }
}

TEST(Sweep, FailingCellIsRecordedAndOthersRun) {
    SweepSpec s;
    s.ranks = {2, 17};  // 17 exceeds the 16-wide projections
    s.methods = {Method::lora};
    const auto rep = run_sweep<float>(s, tiny(), lora_filters(), needle(), quick(5), 1);
    ASSERT_EQ(rep.cells.size(), 2u);
    EXPECT_TRUE(rep.cells[0].ok);
    EXPECT_FALSE(rep.cells[1].ok);
    EXPECT_NE(rep.cells[1].error.find("rank"), std::string::npos);
    EXPECT_FALSE(rep.all_ok());
    EXPECT_EQ(rep.find("lora", 17)->failures, 1u);
}

TEST(Sweep, AggregateSampleStdFromKnownValues) {
    std::vector<CellResult> cells(3);
    const double accs[] = {0.5, 0.7, 0.9};
    for (int i = 0; i < 3; ++i) {
        cells[i].cell = SweepCell{Method::lora, 8, "p0", static_cast<std::uint64_t>(i), {}, true};
        cells[i].ok = true;
        MetricsRecord r;
        r.val_accuracy = accs[i];
        cells[i].records.push_back(r);
    }
    const auto rows = aggregate_cells(cells);
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_NEAR(rows[0].mean_accuracy, 0.7, 1e-12);
    EXPECT_NEAR(rows[0].std_accuracy, 0.2, 1e-12);
}

TEST(Budget, TwoMatricesVersusOneDoublesTheRank) {
    auto c = tiny();
    c.hidden_dim = 32;
    c.ffn_dim = 64;
    AdapterPlacement base;
    const auto m = match_budget(c, base, {{Matrix::q, Matrix::k}, {Matrix::v}}, 4, 0.10);
    ASSERT_EQ(m.size(), 2u);
    EXPECT_EQ(m[0].rank, 4u);
    EXPECT_EQ(m[1].rank, 8u);
    EXPECT_EQ(m[1].realized, m[0].target);
    EXPECT_TRUE(m[1].feasible);
}

TEST(Budget, SingletonsLandWithinTolerance) {
    auto c = tiny();
    c.hidden_dim = 32;
    c.ffn_dim = 64;
    AdapterPlacement base;
    base.filter_layers = {0};
    base.filter_rank = 4;
    std::vector<std::set<Matrix>> singles;
    for (auto mat : kAllMatrices) singles.push_back({mat});
    const auto m = match_budget(c, base, singles, 6, 0.10);
    for (const auto& b : m) {
        EXPECT_TRUE(b.feasible) << b.placement_id;
        EXPECT_LE(b.relative_gap(), 0.10) << b.placement_id;
    }
    EXPECT_EQ(m[4].rank, 4u);  // W_f1: 4 * (64 + 32) == 6 * (32 + 32)
}

TEST(Budget, UnreachableTargetIsFlagged) {
    const auto c = tiny();
    const auto m = match_budget(c, AdapterPlacement{}, {{Matrix::q}, {kAllMatrices.begin(), kAllMatrices.end()}}, 1, 0.10);
    EXPECT_TRUE(m[0].feasible);
    EXPECT_FALSE(m[1].feasible);
    EXPECT_EQ(m[1].rank, 1u);
}

TEST(Budget, PlacementSweepCellsCarryMatchedRanks) {
    auto c = tiny();
    c.hidden_dim = 32;
    c.ffn_dim = 64;
    SweepSpec s;
    s.kind = SweepKind::placement;
    s.placements = {{Matrix::q, Matrix::k}, {Matrix::v}};
    s.base_rank = 4;
    s.seeds = {1, 2};
    SweepReport rep;
    const auto cells = enumerate_cells(s, c, AdapterPlacement{}, &rep);
    ASSERT_EQ(cells.size(), 2u * 2 * 2);
    EXPECT_EQ(rep.budgets.size(), 2u);
    for (const auto& cell : cells) EXPECT_EQ(cell.rank, cell.placement_id == "p0" ? 4u : 8u);
}

TEST(Workers, EnvironmentCapIsParsedStrictly) {
    {
        EnvGuard g("3");
        EXPECT_EQ(worker_limit(), 3u);
    }
    for (const char* bad : {"0", "-2", "two", "4x", ""}) {
        EnvGuard g(bad);
        EXPECT_THROW(worker_limit(), ConfigError) << bad;
    }
    EnvGuard g(nullptr);
    EXPECT_GE(worker_limit(), 1u);
}
