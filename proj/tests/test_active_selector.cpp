#include <graphkd/active_selector.hpp>
#include <graphkd/pipeline.hpp>

#include "oracles.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace graphkd;

namespace {

ErrorCode code_of(auto&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no graphkd::Error thrown";
    return ErrorCode::Io;
}

} // namespace

// ---------------------------------------------------------------------------
// Rank scores

TEST(RankScore, Examples) {
    const std::vector<double> v{0.9, 0.1, 0.5, 0.7};
    EXPECT_EQ(rank_score(v, RankOrder::Ascending), (std::vector<double>{0.75, 0.0, 0.25, 0.5}));
    EXPECT_EQ(rank_score(v, RankOrder::Descending), (std::vector<double>{0.0, 0.75, 0.5, 0.25}));
    const std::vector<double> same(4, 1.0);
    EXPECT_EQ(rank_score(same, RankOrder::Ascending), (std::vector<double>{0.0, 0.25, 0.5, 0.75}));
    EXPECT_EQ(rank_score(same, RankOrder::Descending), (std::vector<double>{0.0, 0.25, 0.5, 0.75}));
    EXPECT_EQ(rank_score(std::vector<double>{3.0}, RankOrder::Ascending), (std::vector<double>{0.0}));
    EXPECT_EQ(code_of([] { rank_score(std::vector<double>{}, RankOrder::Ascending); }), ErrorCode::EmptyPool);
}

TEST(RankScore, TieBreakUsesNodeIds) {
    const std::vector<double> v{1.0, 1.0, 0.0};
    const std::vector<NodeId> ids{9, 4, 7};
    EXPECT_EQ(rank_score(v, ids, RankOrder::Ascending), (std::vector<double>{2.0 / 3.0, 1.0 / 3.0, 0.0}));
    EXPECT_EQ(rank_score(v, ids, RankOrder::Descending), (std::vector<double>{1.0 / 3.0, 0.0, 2.0 / 3.0}));
}

TEST(RankScore, AlwaysAPermutationOfSteps) {
    Rng rng(1);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 1 + rng.below(30);
        std::vector<double> v(n);
        for (auto& x : v) x = static_cast<double>(rng.below(5));  // many ties
        for (auto order : {RankOrder::Ascending, RankOrder::Descending}) {
            auto s = rank_score(v, order);
            std::sort(s.begin(), s.end());
            for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(s[i], static_cast<double>(i) / static_cast<double>(n));
        }
    }
}

// ---------------------------------------------------------------------------
// S_GL

namespace {

/// Pool {0,1,2,3}: node 0 has the lowest confidence, highest HR and highest
/// degree; nodes 1..3 share HR and degree.
struct GlFixture {
    TextGraph g = testutil::make_graph(2, {0, 0, 0, 0, 0, 1}, {{0, 1}, {0, 2}, {0, 3}, {0, 4}, {1, 5}, {2, 5}, {3, 5}});
    Matrix z{{0.5, 0.5}, {0.8, 0.2}, {0.8, 0.2}, {0.7, 0.3}, {0.9, 0.1}, {0.1, 0.9}};
    std::vector<NodeId> pool{0, 1, 2, 3};
};

} // namespace

TEST(ScoreGl, CompositionOfRanks) {
    GlFixture f;
    const ScoreTable t = score_gl(f.z, f.g, argmax_rows(f.z), f.pool);
    ASSERT_EQ(t.size(), 4u);
    EXPECT_DOUBLE_EQ(t[0].s_gl, 2.25);
    EXPECT_DOUBLE_EQ(t[0].rs_p, 0.75);
    EXPECT_DOUBLE_EQ(t[0].rs_hr, 0.75);
    EXPECT_DOUBLE_EQ(t[0].rs_d, 0.75);
    EXPECT_DOUBLE_EQ(t[0].hr, 1.0);
    EXPECT_EQ(t[0].degree, 4u);
}

TEST(ScoreGl, IdenticalMetricsDifferByThreeSteps) {
    GlFixture f;
    const ScoreTable t = score_gl(f.z, f.g, argmax_rows(f.z), f.pool);
    EXPECT_DOUBLE_EQ(t[2].s_gl - t[1].s_gl, 3.0 / 4.0);
}

TEST(ScoreGl, SingletonPool) {
    GlFixture f;
    const ScoreTable t = score_gl(f.z, f.g, argmax_rows(f.z), std::vector<NodeId>{2});
    EXPECT_DOUBLE_EQ(t[0].s_gl, 0.0);
}

TEST(ScoreGl, Ranges) {
    Rng rng(3);
    const TextGraph g = testutil::random_graph(rng, 25, 3, 0.2, 4);
    const GcnModel m = testutil::random_model(rng, 4, 5, 3);
    const Matrix z = forward(m, Propagation::of(g), Mode::Eval).probs;
    std::vector<NodeId> pool;
    for (NodeId v = 0; v < 25; v += 2) pool.push_back(v);
    for (const auto& r : score_gl(z, g, argmax_rows(z), pool)) {
        for (double s : {r.rs_p, r.rs_hr, r.rs_d}) {
            EXPECT_GE(s, 0.0);
            EXPECT_LT(s, 1.0);
        }
        EXPECT_LT(r.s_gl, 3.0);
    }
}

// ---------------------------------------------------------------------------
// Entropy reduction

TEST(EntropyReduction, ZeroModelGivesZero) {
    const TextGraph g = testutil::make_graph(2, {0, 1, 0}, {{0, 1}, {1, 2}});
    const GcnModel m = GcnModel::zeros(g.emb_dim(), 2);
    EXPECT_DOUBLE_EQ(entropy_reduction(m, g, Propagation::of(g), 1), 0.0);
}

TEST(EntropyReduction, PathCentreSharpensNeighbours) {
    Matrix x{{0.0, 0.0}, {0.0, 4.0}, {0.0, 0.0}};
    const TextGraph g({"a", "b"}, {{0, 1}, {1, 2}}, x, {0, 0, 0});
    GcnModel m = GcnModel::zeros(2, 2, {2, 0.0});
    m.w0 = Matrix::Identity(2, 2);
    m.w1 = Matrix{{0.0, 0.0}, {2.0, -2.0}};
    const double got = entropy_reduction(m, g, Propagation::of(g), 1);
    const double ref = oracle::entropy_reduction(m, 3, g.edges(), g.embeddings(), 1);
    EXPECT_NEAR(got, ref, 1e-9);
    EXPECT_GT(got, 0.5);  // without the centre both ends fall back to uniform
}

TEST(EntropyReduction, IsolatedNode) {
    const TextGraph g = testutil::make_graph(2, {0, 1, 0}, {{0, 1}});
    const GcnModel m = GcnModel::zeros(g.emb_dim(), 2);
    EXPECT_EQ(code_of([&] { entropy_reduction(m, g, Propagation::of(g), 2); }), ErrorCode::IsolatedNode);
}

TEST(EntropyReduction, MatchesDoubleForwardOracle) {
    Rng rng(17);
    for (int t = 0; t < 25; ++t) {
        const std::size_t n = 2 + rng.below(11);
        const TextGraph g = testutil::random_graph(rng, n, 3, 0.35, 4);
        const GcnModel m = testutil::random_model(rng, 4, 5, 3);
        const EntropyProbe probe(m, g, Propagation::of(g));
        for (NodeId v = 0; v < n; ++v) {
            if (degree(g, v) == 0) continue;
            EXPECT_NEAR(probe.reduction(v), oracle::entropy_reduction(m, n, g.edges(), g.embeddings(), v), 1e-9);
        }
    }
}

// ---------------------------------------------------------------------------
// S_total

namespace {

struct Scored {
    TextGraph g;
    GcnModel m;
    Propagation prop;
    Matrix z;
    std::vector<NodeId> pool;
};

Scored scored(std::uint64_t seed) {
    Rng rng(seed);
    TextGraph g = testutil::random_graph(rng, 20, 3, 0.2, 4);
    GcnModel m = testutil::random_model(rng, 4, 5, 3);
    Propagation prop = Propagation::of(g);
    Matrix z = forward(m, prop, Mode::Eval).probs;
    std::vector<NodeId> pool;
    for (NodeId v = 0; v < 20; ++v) pool.push_back(v);
    return {std::move(g), std::move(m), std::move(prop), std::move(z), std::move(pool)};
}

} // namespace

TEST(ScoreTotal, CapInactiveScoresEveryConnectedNode) {
    const Scored s = scored(4);
    const EntropyProbe probe(s.m, s.g, s.z);
    const ScoreTable t = score_total(score_gl(s.z, s.g, argmax_rows(s.z), s.pool), s.g, probe, 1000);
    std::size_t connected = 0;
    for (const auto& r : t) {
        EXPECT_EQ(r.candidate, r.degree > 0);
        connected += r.degree > 0;
        EXPECT_DOUBLE_EQ(r.s_total, r.s_gl + r.s_e);
    }
    std::vector<double> se;
    for (const auto& r : t) {
        if (r.candidate) se.push_back(r.s_e);
    }
    std::sort(se.begin(), se.end());
    for (std::size_t i = 0; i < se.size(); ++i) EXPECT_DOUBLE_EQ(se[i], static_cast<double>(i) / connected);
}

TEST(ScoreTotal, NonCandidatesKeepSgl) {
    const Scored s = scored(5);
    const EntropyProbe probe(s.m, s.g, s.z);
    const ScoreTable t = score_total(score_gl(s.z, s.g, argmax_rows(s.z), s.pool), s.g, probe, 2);
    std::vector<const ScoreRow*> cands;
    double min_cand_sgl = 1e9, max_other_sgl = -1.0;
    for (const auto& r : t) {
        if (r.candidate) {
            cands.push_back(&r);
            min_cand_sgl = std::min(min_cand_sgl, r.s_gl);
        } else {
            EXPECT_EQ(r.s_e, 0.0);
            EXPECT_EQ(r.s_total, r.s_gl);
            if (r.degree > 0) max_other_sgl = std::max(max_other_sgl, r.s_gl);
        }
    }
    ASSERT_EQ(cands.size(), 2u);
    EXPECT_GE(min_cand_sgl, max_other_sgl);
    // Two candidates: the larger entropy change gets 1/2, the other 0.
    const ScoreRow* lo = cands[0]->entropy_change < cands[1]->entropy_change ? cands[0] : cands[1];
    const ScoreRow* hi = lo == cands[0] ? cands[1] : cands[0];
    EXPECT_EQ(lo->s_e, 0.0);
    EXPECT_EQ(hi->s_e, 0.5);
}

TEST(ScoreTotal, EntropyRankExample) {
    EXPECT_EQ(rank_score(std::vector<double>{0.1, 0.4}, RankOrder::Ascending), (std::vector<double>{0.0, 0.5}));
}

// ---------------------------------------------------------------------------
// Stage selection

namespace {

ScoreRow row(NodeId v, ClassId c, double s_total, bool cand = true) {
    ScoreRow r;
    r.node = v;
    r.pseudo_class = c;
    r.s_total = s_total;
    r.candidate = cand;
    return r;
}

SelectionState fresh(std::size_t c, std::size_t budget = 3, std::size_t b = 1) {
    SelectionState s;
    s.num_classes = c;
    s.budget = budget;
    s.stage_size = b;
    s.labeled = {100, 101, 102};
    return s;
}

} // namespace

TEST(SelectStage, OnePerClass) {
    const SelectionState s = fresh(3);
    const ScoreTable t{row(0, 0, 1.0), row(1, 0, 2.0), row(2, 1, 0.5), row(3, 2, 0.1), row(4, 2, 0.3)};
    const auto picks = select_stage(s, t);
    ASSERT_EQ(picks.size(), 3u);
    EXPECT_EQ(picks[0].node, 1u);
    EXPECT_EQ(picks[1].node, 2u);
    EXPECT_EQ(picks[2].node, 4u);
}

TEST(SelectStage, FullClassContributesNothing) {
    SelectionState s = fresh(2);
    for (NodeId v = 50; v < 53; ++v) s.selected.push_back({v, 0, 0, 0, {}});
    s.stage_index = 3;
    const ScoreTable t{row(0, 0, 9.0), row(1, 1, 0.1)};
    const auto picks = select_stage(s, t);
    ASSERT_EQ(picks.size(), 1u);
    EXPECT_EQ(picks[0].node, 1u);
}

TEST(SelectStage, HighestScoreWins) {
    const ScoreTable t{row(7, 0, 2.4), row(8, 0, 2.9)};
    const auto picks = select_stage(fresh(1), t);
    ASSERT_EQ(picks.size(), 1u);
    EXPECT_EQ(picks[0].node, 8u);
}

TEST(SelectStage, SkipsNonCandidatesAndKnownNodes) {
    const ScoreTable t{row(0, 0, 9.0, false), row(100, 0, 8.0), row(3, 0, 1.0)};
    const auto picks = select_stage(fresh(1), t);
    ASSERT_EQ(picks.size(), 1u);
    EXPECT_EQ(picks[0].node, 3u);
}

TEST(SelectStage, Errors) {
    EXPECT_EQ(code_of([] { select_stage(fresh(1), ScoreTable{row(0, 0, 1.0, false)}); }), ErrorCode::NoCandidates);
    SelectionState full = fresh(1, 1);
    full.selected.push_back({5, 0, 0, 0, {}});
    EXPECT_EQ(code_of([&] { select_stage(full, ScoreTable{row(0, 0, 1.0)}); }), ErrorCode::BudgetExhausted);
}

// ---------------------------------------------------------------------------
// The loop

namespace {

struct Synthetic {
    TextGraph g;
    Propagation prop;
};

Synthetic synthetic(std::size_t classes, std::size_t per_class, std::uint64_t seed = 0) {
    SynthConfig sc;
    sc.classes = classes;
    sc.nodes_per_class = per_class;
    sc.dim = std::max<std::size_t>(16, classes);
    sc.seed = seed;
    TextGraph g = planted_partition(sc);
    Propagation p = Propagation::of(g);
    return {std::move(g), std::move(p)};
}

void expect_valid_selection(const TextGraph& g, const SplitSpec& split, const ActiveResult& r, std::size_t expected) {
    EXPECT_EQ(r.state.selected.size(), expected);
    std::set<NodeId> seen;
    for (const auto& s : r.state.selected) {
        EXPECT_TRUE(seen.insert(s.node).second) << "duplicate " << s.node;
        EXPECT_FALSE(std::binary_search(split.labeled.begin(), split.labeled.end(), s.node));
        EXPECT_TRUE(std::binary_search(split.train_pool.begin(), split.train_pool.end(), s.node));
        EXPECT_GT(degree(g, s.node), 0u);
    }
    for (ClassId c = 0; c < static_cast<ClassId>(g.num_classes()); ++c) {
        EXPECT_EQ(r.state.class_total(c), expected / g.num_classes());
    }
}

LoopConfig quick(std::uint64_t seed, AlMode mode = AlMode::GraphLlm) {
    LoopConfig c;
    c.seed = seed;
    c.mode = mode;
    c.train.epochs = 100;
    c.align.epochs = 50;
    return c;
}

} // namespace

TEST(ActiveLoop, BudgetTimesClassesAcrossModes) {
    const Synthetic d = synthetic(3, 40);
    OracleTeacher teacher(d.g);
    TeacherCache cache;
    for (AlMode mode : {AlMode::GraphLlm, AlMode::Random, AlMode::AllAtOnce}) {
        for (std::uint64_t seed : {0, 1}) {
            TeacherSession s(teacher, PromptConfig(d.g.class_names()), cache);
            const SplitSpec split = make_split(d.g, 3, seed);
            const ActiveResult r = run_active_loop(d.g, d.prop, split, &s, quick(seed, mode));
            expect_valid_selection(d.g, split, r, 9);
            EXPECT_EQ(r.final_bundle.size(), 18u);
            if (mode == AlMode::AllAtOnce) {
                EXPECT_EQ(r.stages.size(), 2u);
            } else if (mode == AlMode::GraphLlm) {
                EXPECT_EQ(r.stages.size(), 4u);
            }
        }
    }
}

TEST(ActiveLoop, SevenClassesSelectTwentyOne) {
    const Synthetic d = synthetic(7, 30);
    OracleTeacher teacher(d.g);
    TeacherCache cache;
    TeacherSession s(teacher, PromptConfig(d.g.class_names()), cache);
    const SplitSpec split = make_split(d.g, 3, 0);
    const ActiveResult r = run_active_loop(d.g, d.prop, split, &s, quick(0));
    expect_valid_selection(d.g, split, r, 21);
}

TEST(ActiveLoop, OracleAtLeastBaselinePerSeed) {
    const Synthetic d = synthetic(3, 60);
    OracleTeacher teacher(d.g);
    TeacherCache cache;
    for (std::uint64_t seed : {0, 1, 2}) {
        const SplitSpec split = make_split(d.g, 3, seed);
        const RunConfig rc;
        const ActiveResult b = run_active_loop(d.g, d.prop, split, nullptr, baseline_of(rc).loop(seed));
        TeacherSession s(teacher, PromptConfig(d.g.class_names()), cache);
        const ActiveResult f = run_active_loop(d.g, d.prop, split, &s, rc.loop(seed));
        const auto test = labeled_only(d.g, split.test);
        EXPECT_GE(evaluate(f.final.model, d.prop, d.g, test), evaluate(b.final.model, d.prop, d.g, test)) << seed;
    }
}

namespace {

/// Oracle answers except for a fixed set of nodes, which get junk.
class PartlyBroken final : public Teacher {
public:
    PartlyBroken(const TextGraph& g, std::set<NodeId> broken) : inner_(g), broken_(std::move(broken)) {}
    std::string name() const override { return "partly-broken"; }
    std::string complete(const TeacherRequest& r) override {
        if (r.kind == PromptKind::Logits && broken_.count(r.node)) return "no idea";
        return inner_.complete(r);
    }
    std::optional<std::vector<double>> rationale_embedding(NodeId v, ClassId a) const override {
        return inner_.rationale_embedding(v, a);
    }

private:
    OracleTeacher inner_;
    std::set<NodeId> broken_;
};

} // namespace

TEST(ActiveLoop, UnanswerablePicksAreReplaced) {
    const Synthetic d = synthetic(3, 40);
    const SplitSpec split = make_split(d.g, 3, 0);
    OracleTeacher oracle_teacher(d.g);
    TeacherCache c0;
    TeacherSession s0(oracle_teacher, PromptConfig(d.g.class_names()), c0);
    const ActiveResult clean = run_active_loop(d.g, d.prop, split, &s0, quick(0));
    const NodeId first = clean.state.selected.front().node;

    PartlyBroken teacher(d.g, {first});
    TeacherCache c1;
    QueryOptions q;
    q.backoff = std::chrono::milliseconds(0);
    TeacherSession s1(teacher, PromptConfig(d.g.class_names()), c1, q);
    const ActiveResult r = run_active_loop(d.g, d.prop, split, &s1, quick(0));
    expect_valid_selection(d.g, split, r, 9);
    EXPECT_TRUE(r.state.excluded.count(first));
    for (const auto& s : r.state.selected) EXPECT_NE(s.node, first);
}

TEST(ActiveLoop, TeacherRequired) {
    const Synthetic d = synthetic(2, 20);
    const SplitSpec split = make_split(d.g, 3, 0);
    EXPECT_EQ(code_of([&] { run_active_loop(d.g, d.prop, split, nullptr, quick(0)); }), ErrorCode::InvalidConfig);
}

TEST(SelectionLog, Fields) {
    Selection s{12, 1, 2, 0, {}};
    s.scores.s_gl = 1.5;
    const auto j = selection_log_entry(s);
    for (const char* k : {"stage", "node_id", "pseudo_class_at_selection", "teacher_answer", "s_gl", "s_e", "s_total",
                          "p", "hr", "degree"}) {
        EXPECT_TRUE(j.contains(k)) << k;
    }
    EXPECT_EQ(j["node_id"], 12);
    EXPECT_EQ(j["teacher_answer"], 2);
}
