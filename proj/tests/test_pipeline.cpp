#include <graphkd/pipeline.hpp>

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

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

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

RunConfig small_config(const fs::path& data, const fs::path& out) {
    RunConfig c;
    c.dataset_dir = data.string();
    c.output_dir = out.string();
    c.seeds = {0, 1};
    c.train.epochs = 80;
    c.align.epochs = 40;
    c.teacher.backoff_ms = 0;
    return c;
}

fs::path write_synth(const fs::path& dir, std::size_t per_class = 30) {
    SynthConfig sc;
    sc.nodes_per_class = per_class;
    write_dataset(planted_partition(sc), dir);
    return dir;
}

} // namespace

// ---------------------------------------------------------------------------
// Configuration

TEST(RunConfigJson, RoundTrip) {
    RunConfig c;
    c.name = "x";
    c.dataset_dir = "/d";
    c.seeds = {4, 5};
    c.alpha = 0.2;
    c.tau = 2.0;
    c.teacher.kind = TeacherKind::Noisy;
    c.teacher.noise.bucket_accuracy = {0.1, 0.2, 0.3};
    c.ablations.al_mode = AlMode::AllAtOnce;
    c.ablations.align = AlignMode::MaxPool;
    c.ablations.use_rationales = false;
    c.gcn.d_hidden = 32;
    c.train.adam.lr = 0.05;
    c.align.epochs = 7;
    const RunConfig back = nlohmann::json(c).get<RunConfig>();
    EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
    EXPECT_EQ(back.teacher.kind, TeacherKind::Noisy);
    EXPECT_EQ(back.ablations.align, AlignMode::MaxPool);
    EXPECT_EQ(back.teacher.noise.bucket_accuracy[2], 0.3);
    EXPECT_EQ(config_fingerprint(back), config_fingerprint(c));
}

TEST(RunConfigJson, MissingFieldsKeepDefaults) {
    const RunConfig c = nlohmann::json{{"dataset_dir", "/d"}}.get<RunConfig>();
    EXPECT_EQ(c.shots, 3u);
    EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{0, 1, 2}));
    EXPECT_DOUBLE_EQ(c.alpha, 0.3);
    EXPECT_DOUBLE_EQ(c.beta, 0.1);
    EXPECT_DOUBLE_EQ(c.tau, 3.0);
    EXPECT_EQ(c.budget, 3u);
    EXPECT_EQ(c.gcn.d_hidden, 64u);
    EXPECT_TRUE(c.ablations.use_al);
}

TEST(RunConfigJson, UnknownEnumRejected) {
    EXPECT_EQ(code_of([] { nlohmann::json{{"teacher", {{"kind", "htp"}}}}.get<RunConfig>(); }),
              ErrorCode::InvalidConfig);
    EXPECT_EQ(code_of([] { nlohmann::json("sometimes").get<AlMode>(); }), ErrorCode::InvalidConfig);
    EXPECT_EQ(nlohmann::json(AlMode::AllAtOnce), "all_at_once");
}

TEST(RunConfigJson, Validation) {
    RunConfig c;
    c.alpha = 0.8;
    c.beta = 0.3;
    EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::BadWeights);
    c = RunConfig{};
    c.tau = 0.0;
    EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::InvalidConfig);
    c = RunConfig{};
    c.seeds.clear();
    EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::InvalidConfig);
}

TEST(RunConfigJson, FingerprintIgnoresPaths) {
    RunConfig a, b;
    b.output_dir = "/elsewhere";
    b.cache_path = "/c.jsonl";
    EXPECT_EQ(config_fingerprint(a), config_fingerprint(b));
    b.alpha = 0.25;
    EXPECT_NE(config_fingerprint(a), config_fingerprint(b));
}

TEST(RunConfigJson, CachePathDefault) {
    RunConfig c;
    EXPECT_TRUE(c.resolved_cache_path().empty());
    c.output_dir = "/o";
    EXPECT_EQ(c.resolved_cache_path(), fs::path("/o/teacher_cache.jsonl"));
    c.cache_path = "/c";
    EXPECT_EQ(c.resolved_cache_path(), fs::path("/c"));
}

// ---------------------------------------------------------------------------
// Reporting helpers

TEST(Report, MeanAndPopulationStd) {
    const std::vector<double> xs{0.7, 0.8, 0.9};
    const auto [m, s] = mean_and_population_std(xs);
    EXPECT_NEAR(m, 0.8, 1e-12);
    EXPECT_NEAR(s, std::sqrt(0.02 / 3.0), 1e-12);
    EXPECT_EQ(format_accuracy(0.8123, 0.0456), "81.23±(4.56)");
}

TEST(Report, ResultsTable) {
    RunReport a, b;
    a.config.name = "GCN";
    a.mean = 0.5;
    b.config.name = "GCN + teacher";
    b.mean = 0.625;
    b.std = 0.01;
    const std::vector<RunReport> rs{a, b};
    const std::string t = results_table(rs);
    EXPECT_NE(t.find("3-shot"), std::string::npos);
    EXPECT_NE(t.find("GCN           | 50.00±(0.00)"), std::string::npos) << t;
    EXPECT_NE(t.find("GCN + teacher | 62.50±(1.00)"), std::string::npos) << t;
}

TEST(Evaluate, UnlabeledNodeRejected) {
    TextGraph g = testutil::make_graph(2, {0, 1, 1}, {{0, 1}, {1, 2}});
    g = TextGraph(g.class_names(), std::vector<Edge>(g.edges().begin(), g.edges().end()), g.embeddings(),
                  {0, std::nullopt, 1});
    const Propagation p = Propagation::of(g);
    const GcnModel m = GcnModel::zeros(g.emb_dim(), 2);
    const std::vector<NodeId> nodes{0, 1};
    EXPECT_EQ(code_of([&] { evaluate(m, p, g, nodes); }), ErrorCode::UnlabeledNode);
    EXPECT_EQ(labeled_only(g, nodes), (std::vector<NodeId>{0}));
    EXPECT_DOUBLE_EQ(evaluate(m, p, g, std::vector<NodeId>{0, 2}), 0.5);
}

// ---------------------------------------------------------------------------
// Synthetic data

TEST(Synth, PlantedPartitionShape) {
    SynthConfig sc;
    sc.classes = 4;
    sc.nodes_per_class = 25;
    sc.dim = 8;
    const TextGraph g = planted_partition(sc);
    EXPECT_EQ(g.num_nodes(), 100u);
    EXPECT_EQ(g.num_classes(), 4u);
    EXPECT_EQ(g.emb_dim(), 8u);
    std::vector<std::size_t> count(4, 0);
    for (const auto& l : g.labels()) ++count[static_cast<std::size_t>(*l)];
    EXPECT_EQ(count, (std::vector<std::size_t>(4, 25)));
    std::size_t in = 0;
    for (const auto& e : g.edges()) in += g.labels()[e.a] == g.labels()[e.b];
    EXPECT_GT(in, g.num_edges() / 2);
    const TextGraph again = planted_partition(sc);
    EXPECT_TRUE(std::ranges::equal(again.edges(), g.edges()));
    EXPECT_TRUE(again.embeddings() == g.embeddings());
}

// ---------------------------------------------------------------------------
// Runs

TEST(Run, WritesReportFiles) {
    testutil::TempDir tmp;
    const fs::path data = write_synth(tmp.path() / "data");
    const RunConfig c = small_config(data, tmp.path() / "out");
    const RunReport r = run(c);
    ASSERT_EQ(r.seeds.size(), 2u);
    for (const auto& s : r.seeds) {
        EXPECT_EQ(s.selections.size(), 9u);
        EXPECT_TRUE(fs::exists(tmp.path() / "out" / ("seed_" + std::to_string(s.seed)) / "history.csv"));
        EXPECT_TRUE(fs::exists(tmp.path() / "out" / ("seed_" + std::to_string(s.seed)) / "model.ckpt"));
    }
    const auto j = nlohmann::json::parse(slurp(tmp.path() / "out" / "report.json"));
    EXPECT_EQ(j["std_kind"], "population");
    EXPECT_EQ(j["per_seed"].size(), 2u);
    EXPECT_EQ(j["config_fingerprint"], config_fingerprint(c));
    std::istringstream log(slurp(tmp.path() / "out" / "selection_log.jsonl"));
    std::string line;
    std::size_t lines = 0;
    while (std::getline(log, line)) {
        const auto e = nlohmann::json::parse(line);
        EXPECT_TRUE(e.contains("seed"));
        EXPECT_TRUE(e.contains("s_total"));
        ++lines;
    }
    EXPECT_EQ(lines, 18u);
    EXPECT_TRUE(fs::exists(tmp.path() / "out" / "teacher_cache.jsonl"));
    EXPECT_NE(slurp(tmp.path() / "out" / "results.txt").find(c.name), std::string::npos);
    // Checkpoints reload with identical test accuracy.
    const TextGraph g = load_dataset(data);
    const Propagation prop = Propagation::of(g);
    const GcnModel m = load_checkpoint(tmp.path() / "out" / "seed_0" / "model.ckpt");
    const SplitSpec split = make_split(g, c.shots, 0);
    EXPECT_DOUBLE_EQ(evaluate(m, prop, g, labeled_only(g, split.test)), r.seeds[0].test_acc);
}

TEST(Run, RerunIsByteIdenticalWithWarmCache) {
    testutil::TempDir tmp;
    const fs::path data = write_synth(tmp.path() / "data");
    RunConfig c = small_config(data, tmp.path() / "out");
    c.seeds = {0};
    c.teacher.kind = TeacherKind::Noisy;
    const RunReport first = run(c);
    const std::string report = slurp(tmp.path() / "out" / "report.json");
    const std::string log = slurp(tmp.path() / "out" / "selection_log.jsonl");
    EXPECT_GT(first.teacher_queries, 0u);
    const RunReport second = run(c);
    EXPECT_EQ(second.teacher_queries, 0u);
    // The query count is the only field that may differ between cold and warm runs.
    auto a = nlohmann::json::parse(report);
    auto b = nlohmann::json::parse(slurp(tmp.path() / "out" / "report.json"));
    a.erase("teacher_queries");
    b.erase("teacher_queries");
    a["per_seed"][0].erase("teacher_queries");
    b["per_seed"][0].erase("teacher_queries");
    EXPECT_EQ(a.dump(), b.dump());
    EXPECT_EQ(log, slurp(tmp.path() / "out" / "selection_log.jsonl"));
    const std::string warm = slurp(tmp.path() / "out" / "report.json");
    run(c);
    EXPECT_EQ(slurp(tmp.path() / "out" / "report.json"), warm);
}

TEST(Run, AblationsOffEqualsBaseline) {
    testutil::TempDir tmp;
    const fs::path data = write_synth(tmp.path() / "data");
    RunConfig full = small_config(data, {});
    full.ablations.use_soft_labels = false;
    full.ablations.use_rationales = false;
    full.ablations.use_al = false;
    const RunConfig base = baseline_of(small_config(data, {}));
    EXPECT_FALSE(base.needs_teacher());
    const RunReport a = run(full);
    const RunReport b = run(base);
    ASSERT_EQ(a.seeds.size(), b.seeds.size());
    for (std::size_t i = 0; i < a.seeds.size(); ++i) {
        EXPECT_EQ(a.seeds[i].test_acc, b.seeds[i].test_acc);
        EXPECT_TRUE(a.seeds[i].model.w0 == b.seeds[i].model.w0);
        EXPECT_TRUE(a.seeds[i].model.w1 == b.seeds[i].model.w1);
    }
    EXPECT_EQ(a.teacher_queries, 0u);
}

TEST(Run, HttpKindNeedsFactory) {
    testutil::TempDir tmp;
    RunConfig c = small_config(write_synth(tmp.path() / "data"), {});
    c.teacher.kind = TeacherKind::Http;
    EXPECT_EQ(code_of([&] { run(c); }), ErrorCode::InvalidConfig);
}

TEST(Run, ErrorsNameTheSeed) {
    testutil::TempDir tmp;
    RunConfig c = small_config(write_synth(tmp.path() / "data", 4), {});
    c.shots = 5;  // more shots than any class can supply
    try {
        run(c);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("seed 0"), std::string::npos) << e.what();
    }
}

namespace {

/// Answers like the oracle but cannot supply rationale embeddings.
class TextOnlyTeacher final : public Teacher {
public:
    explicit TextOnlyTeacher(const TextGraph& g) : inner_(g) {}
    std::string name() const override { return "text-only"; }
    std::string complete(const TeacherRequest& r) override { return inner_.complete(r); }

private:
    OracleTeacher inner_;
};

} // namespace

TEST(Run, MissingRationalesWritePendingFile) {
    testutil::TempDir tmp;
    const fs::path data = write_synth(tmp.path() / "data");
    RunConfig c = small_config(data, tmp.path() / "out");
    c.seeds = {0};
    const TeacherFactory text_only = [](const TeacherConfig&, const TextGraph& g) -> std::unique_ptr<Teacher> {
        return std::make_unique<TextOnlyTeacher>(g);
    };
    EXPECT_EQ(code_of([&] { run(c, text_only); }), ErrorCode::MissingRationaleTarget);
    const fs::path pending = data / "rationales_pending.jsonl";
    ASSERT_TRUE(fs::exists(pending));
    std::istringstream in(slurp(pending));
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_TRUE(j.contains("node_id"));
        ++n;
    }
    EXPECT_GE(n, 9u);  // at least the few-shot nodes

    // Without rationales the same teacher is sufficient.
    c.ablations.use_rationales = false;
    EXPECT_NO_THROW(run(c, text_only));
}

TEST(Preview, PicksOnePerClass) {
    SynthConfig sc;
    sc.nodes_per_class = 30;
    const TextGraph g = planted_partition(sc);
    const Propagation prop = Propagation::of(g);
    RunConfig c;
    c.seeds = {0};
    c.train.epochs = 60;
    c.align.epochs = 30;
    OracleTeacher t(g);
    TeacherCache cache;
    const SelectPreview p = preview_selection({g, prop, std::nullopt}, c, &t, cache);
    ASSERT_EQ(p.picks.size(), 3u);
    std::size_t candidates = 0;
    for (const auto& r : p.table) candidates += r.candidate;
    EXPECT_EQ(candidates, std::min<std::size_t>(30, p.table.size()));
    for (ClassId k = 0; k < 3; ++k) EXPECT_EQ(p.picks[static_cast<std::size_t>(k)].pseudo_class, k);
}

// ---------------------------------------------------------------------------
// Bucket analysis

TEST(Prelim, OracleIsPerfectEverywhere) {
    SynthConfig sc;
    sc.nodes_per_class = 40;
    const TextGraph g = planted_partition(sc);
    OracleTeacher t(g);
    TeacherCache cache;
    TeacherSession s(t, PromptConfig(g.class_names()), cache);
    const PrelimReport r = prelim_analysis(g, s, BucketMetric::Homophily, 30);
    ASSERT_EQ(r.buckets.size(), 3u);
    EXPECT_FALSE(r.clipped);
    for (const auto& b : r.buckets) {
        EXPECT_EQ(b.nodes.size(), 30u);
        EXPECT_DOUBLE_EQ(b.accuracy(), 1.0);
    }
    EXPECT_GE(r.buckets[0].metric_min, r.buckets[1].metric_max);
    EXPECT_GE(r.buckets[1].metric_min, r.buckets[2].metric_max);
}

TEST(Prelim, ClipsToAThirdWithWarning) {
    SynthConfig sc;
    sc.nodes_per_class = 10;
    const TextGraph g = planted_partition(sc);
    OracleTeacher t(g);
    TeacherCache cache;
    TeacherSession s(t, PromptConfig(g.class_names()), cache);
    std::ostringstream warn;
    const PrelimReport r = prelim_analysis(g, s, BucketMetric::Degree, 200, &warn);
    EXPECT_TRUE(r.clipped);
    EXPECT_EQ(r.bucket_size, 10u);
    for (const auto& b : r.buckets) EXPECT_EQ(b.nodes.size(), 10u);
    EXPECT_NE(warn.str().find("clipped"), std::string::npos);
    EXPECT_EQ(r.to_json()["metric"], "degree");
}

// ---------------------------------------------------------------------------
// Gradient check

TEST(Gradcheck, PassesAndCatchesCorruption) {
    GradcheckOptions o;
    o.instances = 5;
    const GradcheckReport good = gradcheck(o);
    EXPECT_TRUE(good.passed);
    EXPECT_LT(good.max_rel_error, 1e-4);
    EXPECT_EQ(good.per_parameter.size(), 4u);
    o.corrupt = true;
    const GradcheckReport bad = gradcheck(o);
    EXPECT_FALSE(bad.passed);
    EXPECT_GT(bad.per_parameter.at("W1"), 1e-3);
}

TEST(Gradcheck, RelativeError) {
    EXPECT_DOUBLE_EQ(relative_error(1.0, 1.0), 0.0);
    EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
    EXPECT_DOUBLE_EQ(relative_error(0.0, 1e-8), 1e-8 / 1e-6);
}
