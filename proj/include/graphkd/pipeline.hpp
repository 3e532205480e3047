#pragma once

// Orchestration: run configuration, seed-averaged experiments, the
// degree/homophily bucket analysis, finite-difference gradient checking and
// the planted-partition generator used for desk-scale experiments.

#include <graphkd/active_selector.hpp>
#include <graphkd/error.hpp>
#include <graphkd/gnn_engine.hpp>
#include <graphkd/graph_store.hpp>
#include <graphkd/random.hpp>
#include <graphkd/teacher_bridge.hpp>

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace graphkd {

// ---------------------------------------------------------------------------
// Configuration

enum class TeacherKind { Http, Oracle, Noisy };

namespace detail {

template <class E, std::size_t N>
void enum_to_json(nlohmann::json& j, E e, const std::array<std::pair<E, const char*>, N>& names) {
    for (const auto& [v, s] : names) {
        if (v == e) {
            j = s;
            return;
        }
    }
    fail(ErrorCode::InvalidConfig, "unnamed enum value");
}

template <class E, std::size_t N>
void enum_from_json(const nlohmann::json& j, E& e, const std::array<std::pair<E, const char*>, N>& names) {
    const auto text = j.get<std::string>();
    for (const auto& [v, s] : names) {
        if (text == s) {
            e = v;
            return;
        }
    }
    std::string allowed;
    for (const auto& [v, s] : names) allowed += (allowed.empty() ? "" : "|") + std::string(s);
    fail(ErrorCode::InvalidConfig, "unknown value '" + text + "', expected " + allowed);
}

inline constexpr std::array<std::pair<TeacherKind, const char*>, 3> kTeacherKinds{
    {{TeacherKind::Http, "http"}, {TeacherKind::Oracle, "oracle"}, {TeacherKind::Noisy, "noisy"}}};
inline constexpr std::array<std::pair<AlMode, const char*>, 3> kAlModes{
    {{AlMode::GraphLlm, "graph_llm"}, {AlMode::Random, "random"}, {AlMode::AllAtOnce, "all_at_once"}}};
inline constexpr std::array<std::pair<AlignMode, const char*>, 2> kAlignModes{
    {{AlignMode::Mlp, "mlp"}, {AlignMode::MaxPool, "max_pool"}}};

} // namespace detail

inline void to_json(nlohmann::json& j, TeacherKind e) { detail::enum_to_json(j, e, detail::kTeacherKinds); }
inline void from_json(const nlohmann::json& j, TeacherKind& e) { detail::enum_from_json(j, e, detail::kTeacherKinds); }
inline void to_json(nlohmann::json& j, AlMode e) { detail::enum_to_json(j, e, detail::kAlModes); }
inline void from_json(const nlohmann::json& j, AlMode& e) { detail::enum_from_json(j, e, detail::kAlModes); }
inline void to_json(nlohmann::json& j, AlignMode e) { detail::enum_to_json(j, e, detail::kAlignModes); }
inline void from_json(const nlohmann::json& j, AlignMode& e) { detail::enum_from_json(j, e, detail::kAlignModes); }

struct TeacherConfig {
    TeacherKind kind = TeacherKind::Oracle;
    std::string endpoint;
    std::string model_name;
    std::string token_env = "GRAPHKD_TEACHER_TOKEN";
    NoiseProfile noise;
    std::uint64_t seed = 0;
    std::size_t k_guesses = 0;
    std::size_t max_in_flight = 4;
    std::size_t max_attempts = 3;
    std::size_t backoff_ms = 200;
    std::size_t query_cap = 0;  // 0 = unlimited
    double embedding_noise = 0.1;
};

struct Ablations {
    bool use_soft_labels = true;
    bool use_rationales = true;
    bool use_al = true;
    AlMode al_mode = AlMode::GraphLlm;
    AlignMode align = AlignMode::Mlp;
};

struct RunConfig {
    std::string name = "GCN + teacher";
    std::string dataset_dir;
    std::size_t shots = 3;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    double alpha = 0.3;
    double beta = 0.1;
    double tau = 3.0;
    std::size_t budget = 3;
    std::size_t stage_size = 1;
    std::size_t candidate_factor = 10;
    TeacherConfig teacher;
    Ablations ablations;
    GcnHyper gcn;
    TrainOptions train;
    AlignHyper align;
    std::string output_dir;
    std::string cache_path;  // default: <output_dir>/teacher_cache.jsonl

    void validate() const {
        check_weights(alpha, beta);
        if (!(tau > 0.0)) fail(ErrorCode::InvalidConfig, "tau must be positive");
        if (shots < 1) fail(ErrorCode::InvalidConfig, "shots must be >= 1");
        if (budget < 1 || stage_size < 1) fail(ErrorCode::InvalidConfig, "budget and stage_size must be >= 1");
        if (seeds.empty()) fail(ErrorCode::InvalidConfig, "at least one seed is required");
        if (gcn.dropout < 0.0 || gcn.dropout >= 1.0) fail(ErrorCode::InvalidConfig, "dropout must be in [0,1)");
        if (gcn.d_hidden == 0) fail(ErrorCode::InvalidConfig, "hidden width must be positive");
    }

    bool needs_teacher() const {
        return ablations.use_soft_labels || ablations.use_rationales || ablations.use_al;
    }

    LoopConfig loop(std::uint64_t seed) const {
        LoopConfig l;
        l.distill = {alpha, beta, tau, ablations.use_soft_labels, ablations.use_rationales, ablations.align};
        l.use_al = ablations.use_al;
        l.mode = ablations.al_mode;
        l.budget = budget;
        l.stage_size = stage_size;
        l.candidate_factor = candidate_factor;
        l.gcn = gcn;
        l.train = train;
        l.align = align;
        l.seed = seed;
        return l;
    }

    fs::path resolved_cache_path() const {
        if (!cache_path.empty()) return cache_path;
        if (output_dir.empty()) return {};
        return fs::path(output_dir) / "teacher_cache.jsonl";
    }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = nlohmann::json{
        {"name", c.name},
        {"dataset_dir", c.dataset_dir},
        {"shots", c.shots},
        {"seeds", c.seeds},
        {"alpha", c.alpha},
        {"beta", c.beta},
        {"tau", c.tau},
        {"budget", c.budget},
        {"stage_size", c.stage_size},
        {"candidate_factor", c.candidate_factor},
        {"teacher",
         {{"kind", c.teacher.kind},
          {"endpoint", c.teacher.endpoint},
          {"model_name", c.teacher.model_name},
          {"token_env", c.teacher.token_env},
          {"noise_profile",
           {{"bucket_accuracy", c.teacher.noise.bucket_accuracy}, {"stated_confidence", c.teacher.noise.stated_confidence}}},
          {"seed", c.teacher.seed},
          {"k_guesses", c.teacher.k_guesses},
          {"max_in_flight", c.teacher.max_in_flight},
          {"max_attempts", c.teacher.max_attempts},
          {"backoff_ms", c.teacher.backoff_ms},
          {"query_cap", c.teacher.query_cap},
          {"embedding_noise", c.teacher.embedding_noise}}},
        {"ablations",
         {{"use_soft_labels", c.ablations.use_soft_labels},
          {"use_rationales", c.ablations.use_rationales},
          {"use_al", c.ablations.use_al},
          {"al_mode", c.ablations.al_mode},
          {"align", c.ablations.align}}},
        {"gcn", {{"hidden", c.gcn.d_hidden}, {"dropout", c.gcn.dropout}}},
        {"optimizer",
         {{"lr", c.train.adam.lr},
          {"weight_decay", c.train.adam.weight_decay},
          {"epochs", c.train.epochs},
          {"patience", c.train.patience}}},
        {"align_mlp", {{"hidden", c.align.hidden}, {"epochs", c.align.epochs}}},
        {"teacher_logits", "log_confidence"},
        {"output_dir", c.output_dir},
        {"cache_path", c.cache_path},
    };
}

/// Fields absent from `j` keep their defaults.
inline void from_json(const nlohmann::json& j, RunConfig& c) {
    auto get = [](const nlohmann::json& obj, const char* key, auto& field) {
        if (obj.contains(key) && !obj.at(key).is_null()) obj.at(key).get_to(field);
    };
    get(j, "name", c.name);
    get(j, "dataset_dir", c.dataset_dir);
    get(j, "shots", c.shots);
    get(j, "seeds", c.seeds);
    get(j, "alpha", c.alpha);
    get(j, "beta", c.beta);
    get(j, "tau", c.tau);
    get(j, "budget", c.budget);
    get(j, "stage_size", c.stage_size);
    get(j, "candidate_factor", c.candidate_factor);
    get(j, "output_dir", c.output_dir);
    get(j, "cache_path", c.cache_path);
    if (j.contains("teacher")) {
        const auto& t = j.at("teacher");
        get(t, "kind", c.teacher.kind);
        get(t, "endpoint", c.teacher.endpoint);
        get(t, "model_name", c.teacher.model_name);
        get(t, "token_env", c.teacher.token_env);
        get(t, "seed", c.teacher.seed);
        get(t, "k_guesses", c.teacher.k_guesses);
        get(t, "max_in_flight", c.teacher.max_in_flight);
        get(t, "max_attempts", c.teacher.max_attempts);
        get(t, "backoff_ms", c.teacher.backoff_ms);
        get(t, "query_cap", c.teacher.query_cap);
        get(t, "embedding_noise", c.teacher.embedding_noise);
        if (t.contains("noise_profile")) {
            get(t.at("noise_profile"), "bucket_accuracy", c.teacher.noise.bucket_accuracy);
            get(t.at("noise_profile"), "stated_confidence", c.teacher.noise.stated_confidence);
        }
    }
    if (j.contains("ablations")) {
        const auto& a = j.at("ablations");
        get(a, "use_soft_labels", c.ablations.use_soft_labels);
        get(a, "use_rationales", c.ablations.use_rationales);
        get(a, "use_al", c.ablations.use_al);
        get(a, "al_mode", c.ablations.al_mode);
        get(a, "align", c.ablations.align);
    }
    if (j.contains("gcn")) {
        get(j.at("gcn"), "hidden", c.gcn.d_hidden);
        get(j.at("gcn"), "dropout", c.gcn.dropout);
    }
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        get(o, "lr", c.train.adam.lr);
        get(o, "weight_decay", c.train.adam.weight_decay);
        get(o, "epochs", c.train.epochs);
        get(o, "patience", c.train.patience);
    }
    if (j.contains("align_mlp")) {
        get(j.at("align_mlp"), "hidden", c.align.hidden);
        get(j.at("align_mlp"), "epochs", c.align.epochs);
    }
}

inline RunConfig load_config(const fs::path& path) {
    return nlohmann::json::parse(detail::read_text(path)).get<RunConfig>();
}

inline std::string config_fingerprint(const RunConfig& c) {
    nlohmann::json j = c;
    j.erase("output_dir");
    j.erase("cache_path");
    return hex64(fnv1a(j.dump()));
}

/// Baseline: plain GCN on the few-shot labels, no teacher.
inline RunConfig baseline_of(RunConfig c) {
    c.ablations.use_soft_labels = false;
    c.ablations.use_rationales = false;
    c.ablations.use_al = false;
    return c;
}

// ---------------------------------------------------------------------------
// Synthetic planted-partition data

struct SynthConfig {
    std::size_t classes = 3;
    std::size_t nodes_per_class = 60;
    double p_in = 0.2;
    double p_out = 0.02;
    double separation = 1.0;  // class means are separation * e_c
    std::size_t dim = 16;
    std::uint64_t seed = 0;
};

/// Node classes are a seeded permutation of a balanced assignment; features
/// are N(separation * e_class, I); edges are independent Bernoulli(p_in)
/// within and Bernoulli(p_out) across classes.
inline TextGraph planted_partition(const SynthConfig& s) {
    if (s.classes < 2 || s.nodes_per_class < 1) fail(ErrorCode::InvalidConfig, "need >= 2 classes with >= 1 node");
    if (s.dim < s.classes) fail(ErrorCode::InvalidConfig, "feature dim must be at least the class count");
    const std::size_t n = s.classes * s.nodes_per_class;
    Rng rng(derive_seed(s.seed, "planted-partition"));
    std::vector<ClassId> cls(n);
    for (std::size_t v = 0; v < n; ++v) cls[v] = static_cast<ClassId>(v % s.classes);
    rng.shuffle(std::span<ClassId>(cls));

    Matrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(s.dim));
    for (std::size_t v = 0; v < n; ++v) {
        for (std::size_t j = 0; j < s.dim; ++j) {
            x(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(j)) =
                rng.normal() + (static_cast<std::size_t>(cls[v]) == j ? s.separation : 0.0);
        }
    }
    std::vector<Edge> edges;
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = a + 1; b < n; ++b) {
            if (rng.bernoulli(cls[a] == cls[b] ? s.p_in : s.p_out)) edges.push_back({a, b});
        }
    }
    std::vector<std::string> names;
    for (std::size_t k = 0; k < s.classes; ++k) names.push_back("topic_" + std::to_string(k));
    std::vector<std::optional<ClassId>> labels(cls.begin(), cls.end());
    std::vector<std::optional<std::string>> texts(n);
    for (std::size_t v = 0; v < n; ++v) texts[v] = "Synthetic document " + std::to_string(v) + ".";
    return TextGraph(std::move(names), std::move(edges), std::move(x), std::move(labels), std::move(texts),
                     "synthetic-gaussian");
}

// ---------------------------------------------------------------------------
// Teachers from configuration

using TeacherFactory = std::function<std::unique_ptr<Teacher>(const TeacherConfig&, const TextGraph&)>;

inline std::unique_ptr<Teacher> make_mock_teacher(const TeacherConfig& t, const TextGraph& g) {
    switch (t.kind) {
        case TeacherKind::Oracle: return std::make_unique<OracleTeacher>(g, t.seed, t.embedding_noise);
        case TeacherKind::Noisy: return std::make_unique<NoisyTeacher>(g, t.noise, t.seed, t.embedding_noise);
        case TeacherKind::Http: break;
    }
    fail(ErrorCode::InvalidConfig, "this build has no HTTP teacher factory");
}

/// Supplies rationale embeddings from the offline encoder's output when the
/// wrapped teacher cannot.
class EmbeddingBackedTeacher final : public Teacher {
public:
    EmbeddingBackedTeacher(std::unique_ptr<Teacher> inner, std::optional<RationaleEmbeddings> store)
        : inner_(std::move(inner)), store_(std::move(store)) {}

    std::string name() const override { return inner_->name(); }
    std::string complete(const TeacherRequest& r) override { return inner_->complete(r); }
    std::optional<std::vector<double>> rationale_embedding(NodeId node, ClassId answer) const override {
        if (auto e = inner_->rationale_embedding(node, answer)) return e;
        if (store_) return store_->find(node);
        return std::nullopt;
    }

private:
    std::unique_ptr<Teacher> inner_;
    std::optional<RationaleEmbeddings> store_;
};

inline QueryOptions query_options(const TeacherConfig& t) {
    QueryOptions q;
    q.max_attempts = t.max_attempts;
    q.backoff = std::chrono::milliseconds(t.backoff_ms);
    q.max_in_flight = t.max_in_flight;
    if (t.query_cap > 0) q.query_cap = t.query_cap;
    return q;
}

// ---------------------------------------------------------------------------
// Evaluation and runs

/// Argmax accuracy (ties to the lowest class) over `nodes`.
inline double evaluate(const GcnModel& model, const Propagation& prop, const TextGraph& g,
                       std::span<const NodeId> nodes) {
    std::vector<ClassId> labels;
    labels.reserve(nodes.size());
    for (NodeId v : nodes) {
        const auto l = g.label(v);
        if (!l) fail(ErrorCode::UnlabeledNode, "node " + std::to_string(v) + " has no ground-truth label");
        labels.push_back(*l);
    }
    return accuracy(forward(model, prop, Mode::Eval).probs, nodes, labels);
}

inline std::vector<NodeId> labeled_only(const TextGraph& g, std::span<const NodeId> nodes) {
    std::vector<NodeId> out;
    for (NodeId v : nodes) {
        if (g.labels()[v]) out.push_back(v);
    }
    return out;
}

struct SeedResult {
    std::uint64_t seed = 0;
    double test_acc = 0.0;
    double val_acc = 0.0;
    std::size_t best_epoch = 0;
    std::size_t stages = 0;
    std::size_t teacher_queries = 0;
    std::vector<Selection> selections;
    std::vector<EpochRecord> history;
    GcnModel model;
};

struct RunReport {
    RunConfig config;
    std::vector<SeedResult> seeds;
    double mean = 0.0;
    double std = 0.0;  // population
    std::size_t teacher_queries = 0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["config"] = nlohmann::json(config);
        j["config_fingerprint"] = config_fingerprint(config);
        nlohmann::ordered_json per = nlohmann::ordered_json::array();
        for (const auto& s : seeds) {
            per.push_back({{"seed", s.seed},
                           {"test_acc", s.test_acc},
                           {"val_acc", s.val_acc},
                           {"best_epoch", s.best_epoch},
                           {"stages", s.stages},
                           {"num_selected", s.selections.size()},
                           {"teacher_queries", s.teacher_queries}});
        }
        j["per_seed"] = per;
        j["mean"] = mean;
        j["std"] = std;
        j["std_kind"] = "population";
        j["teacher_queries"] = teacher_queries;
        return j;
    }
};

inline std::pair<double, double> mean_and_population_std(std::span<const double> xs) {
    if (xs.empty()) return {0.0, 0.0};
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

inline std::string format_accuracy(double mean, double std) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f±(%.2f)", 100.0 * mean, 100.0 * std);
    return buf;
}

/// Plain-text results table, one row per report.
inline std::string results_table(std::span<const RunReport> reports) {
    std::size_t width = 5;
    for (const auto& r : reports) width = std::max(width, r.config.name.size());
    std::ostringstream out;
    std::string head = "Model";
    head.resize(width, ' ');
    out << head << " | " << (reports.empty() ? 0 : reports.front().config.shots) << "-shot\n";
    out << std::string(width, '-') << "-+-" << std::string(14, '-') << "\n";
    for (const auto& r : reports) {
        std::string name = r.config.name;
        name.resize(width, ' ');
        out << name << " | " << format_accuracy(r.mean, r.std) << "\n";
    }
    return out.str();
}

struct RunContext {
    const TextGraph& graph;
    const Propagation& prop;
    std::optional<Partition> partition;
};

inline void write_report_files(const RunReport& report) {
    if (report.config.output_dir.empty()) return;
    const fs::path out = report.config.output_dir;
    fs::create_directories(out);
    detail::write_text(out / "report.json", report.to_json().dump(2) + "\n");
    std::string log;
    for (const auto& s : report.seeds) {
        for (const auto& sel : s.selections) {
            nlohmann::ordered_json j;
            j["seed"] = s.seed;
            const auto entry = selection_log_entry(sel);
            for (const auto& [k, v] : entry.items()) j[k] = v;
            log += j.dump() + "\n";
        }
        const fs::path sd = out / ("seed_" + std::to_string(s.seed));
        fs::create_directories(sd);
        detail::write_text(sd / "history.csv", history_csv(s.history));
        save_checkpoint(s.model, sd / "model.ckpt");
    }
    detail::write_text(out / "selection_log.jsonl", log);
    const RunReport* one = &report;
    detail::write_text(out / "results.txt", results_table(std::span<const RunReport>(one, 1)));
}

/// Runs every seed on a loaded graph. `teacher` may be null when the
/// configuration needs none.
inline RunReport run_on(const RunContext& ctx, const RunConfig& cfg, Teacher* teacher, TeacherCache& cache) {
    cfg.validate();
    RunReport report;
    report.config = cfg;
    std::vector<double> accs;
    for (std::uint64_t seed : cfg.seeds) {
        try {
            const SplitSpec split = make_split(ctx.graph, cfg.shots, seed, {}, ctx.partition);
            std::optional<TeacherSession> session;
            if (cfg.needs_teacher()) {
                if (teacher == nullptr) fail(ErrorCode::InvalidConfig, "configuration requires a teacher");
                session.emplace(*teacher, PromptConfig(ctx.graph.class_names(), cfg.teacher.k_guesses), cache,
                                query_options(cfg.teacher));
            }
            ActiveResult ar = run_active_loop(ctx.graph, ctx.prop, split, session ? &*session : nullptr, cfg.loop(seed));
            SeedResult sr;
            sr.seed = seed;
            sr.test_acc = evaluate(ar.final.model, ctx.prop, ctx.graph, labeled_only(ctx.graph, split.test));
            sr.val_acc = ar.final.best_val_acc;
            sr.best_epoch = ar.final.best_epoch;
            sr.stages = ar.stages.size();
            sr.teacher_queries = session ? session->queries() : 0;
            sr.selections = std::move(ar.state.selected);
            sr.history = std::move(ar.final.history);
            sr.model = std::move(ar.final.model);
            report.teacher_queries += sr.teacher_queries;
            accs.push_back(sr.test_acc);
            report.seeds.push_back(std::move(sr));
        } catch (const Error& e) {
            throw Error(e.code(), "seed " + std::to_string(seed) + ": " + e.what());
        }
    }
    std::tie(report.mean, report.std) = mean_and_population_std(accs);
    return report;
}

/// Loads the dataset named in the config, runs it and writes the report
/// files. When rationale embeddings are missing, the pending-rationale file is
/// written next to the dataset before the error propagates.
inline RunReport run(const RunConfig& cfg, const TeacherFactory& factory = make_mock_teacher) {
    cfg.validate();
    const TextGraph g = load_dataset(cfg.dataset_dir);
    const Propagation prop = Propagation::of(g);
    const RunContext ctx{g, prop, load_partition(cfg.dataset_dir)};
    TeacherCache cache(cfg.resolved_cache_path());
    std::unique_ptr<Teacher> teacher;
    if (cfg.needs_teacher()) {
        teacher = std::make_unique<EmbeddingBackedTeacher>(factory(cfg.teacher, g),
                                                           RationaleEmbeddings::load(cfg.dataset_dir));
    }
    try {
        RunReport report = run_on(ctx, cfg, teacher.get(), cache);
        write_report_files(report);
        return report;
    } catch (const Error& e) {
        if (e.code() == ErrorCode::MissingRationaleTarget && !cache.path().empty()) {
            std::vector<TeacherRecord> missing;
            std::ifstream in(cache.path());
            std::string line;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                TeacherRecord r = TeacherRecord::from_json(nlohmann::json::parse(line));
                if (!r.rationale_embedding && !teacher->rationale_embedding(r.node_id, r.answer)) {
                    missing.push_back(std::move(r));
                }
            }
            write_pending_rationales(fs::path(cfg.dataset_dir) / "rationales_pending.jsonl", missing);
        }
        throw;
    }
}

/// One selection stage without querying the picks: trains on V_l (with the
/// teacher when distillation is on), scores the unlabeled pool and returns
/// the table with the nodes that would be sent to the teacher.
struct SelectPreview {
    std::uint64_t seed = 0;
    ScoreTable table;
    std::vector<StagePick> picks;
};

inline SelectPreview preview_selection(const RunContext& ctx, const RunConfig& cfg, Teacher* teacher,
                                       TeacherCache& cache) {
    cfg.validate();
    SelectPreview out;
    out.seed = cfg.seeds.front();
    const SplitSpec split = make_split(ctx.graph, cfg.shots, out.seed, {}, ctx.partition);
    LoopConfig lc = cfg.loop(out.seed);
    lc.use_al = false;
    std::optional<TeacherSession> session;
    if (lc.distill.needs_teacher()) {
        if (teacher == nullptr) fail(ErrorCode::InvalidConfig, "configuration requires a teacher");
        session.emplace(*teacher, PromptConfig(ctx.graph.class_names(), cfg.teacher.k_guesses), cache,
                        query_options(cfg.teacher));
    }
    const ActiveResult ar = run_active_loop(ctx.graph, ctx.prop, split, session ? &*session : nullptr, lc);
    SelectionState state = ar.state;
    state.stage_size = cfg.ablations.al_mode == AlMode::AllAtOnce ? cfg.budget : cfg.stage_size;
    const EntropyProbe probe(ar.final.model, ctx.graph, ctx.prop);
    const std::vector<NodeId> pool = state.unlabeled();
    if (pool.empty()) fail(ErrorCode::NoCandidates, "unlabeled pool is empty");
    out.table = score_gl(probe.probs(), ctx.graph, argmax_rows(probe.probs()), pool);
    std::vector<char> eligible(out.table.size(), 1);
    out.table = score_total(std::move(out.table), ctx.graph, probe,
                            cfg.candidate_factor * state.stage_size * ctx.graph.num_classes(), eligible);
    out.picks = select_stage(state, out.table);
    return out;
}

// ---------------------------------------------------------------------------
// Bucket analysis

enum class BucketMetric { Degree, Homophily };

struct Bucket {
    std::string name;
    std::vector<NodeId> nodes;
    std::size_t answered = 0;
    std::size_t correct = 0;
    double metric_min = 0.0;
    double metric_max = 0.0;

    double accuracy() const { return answered == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(answered); }
};

struct PrelimReport {
    BucketMetric metric = BucketMetric::Homophily;
    std::size_t bucket_size = 0;
    bool clipped = false;
    std::vector<Bucket> buckets;  // highest, middle, lowest

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["metric"] = metric == BucketMetric::Degree ? "degree" : "homophily";
        j["bucket_size"] = bucket_size;
        j["clipped"] = clipped;
        for (const auto& b : buckets) {
            j["buckets"].push_back({{"name", b.name},
                                    {"accuracy", b.accuracy()},
                                    {"answered", b.answered},
                                    {"correct", b.correct},
                                    {"metric_min", b.metric_min},
                                    {"metric_max", b.metric_max}});
        }
        return j;
    }
};

/// Sorts labeled nodes by the metric (descending, ties by id), takes
/// `bucket_size` nodes from the head, the centre and the tail, and scores the
/// teacher's answers against ground truth in each.
inline PrelimReport prelim_analysis(const TextGraph& g, TeacherSession& session, BucketMetric metric,
                                    std::size_t bucket_size = 200, std::ostream* warn = &std::cerr) {
    std::vector<ClassId> truth(g.num_nodes(), -1);
    std::vector<NodeId> nodes;
    for (NodeId v = 0; v < g.num_nodes(); ++v) {
        if (const auto l = g.labels()[v]) {
            truth[v] = *l;
            nodes.push_back(v);
        }
    }
    std::vector<double> value(g.num_nodes(), 0.0);
    for (NodeId v : nodes) {
        value[v] = metric == BucketMetric::Degree ? static_cast<double>(degree(g, v)) : homophily_ratio(g, v, truth);
    }
    std::sort(nodes.begin(), nodes.end(), [&](NodeId a, NodeId b) {
        if (value[a] != value[b]) return value[a] > value[b];
        return a < b;
    });

    PrelimReport rep;
    rep.metric = metric;
    rep.bucket_size = bucket_size;
    if (3 * bucket_size > nodes.size()) {
        rep.bucket_size = nodes.size() / 3;
        rep.clipped = true;
        if (warn) {
            *warn << "warning: bucket size " << bucket_size << " clipped to " << rep.bucket_size << " for "
                  << nodes.size() << " labeled nodes\n";
        }
    }
    const std::size_t bs = rep.bucket_size;
    const std::size_t n = nodes.size();
    const std::array<std::pair<const char*, std::size_t>, 3> spans{
        {{"highest", 0}, {"middle", (n - bs) / 2}, {"lowest", n - bs}}};
    for (const auto& [name, start] : spans) {
        Bucket b;
        b.name = name;
        b.nodes.assign(nodes.begin() + static_cast<std::ptrdiff_t>(start),
                       nodes.begin() + static_cast<std::ptrdiff_t>(start + bs));
        if (!b.nodes.empty()) {
            b.metric_max = value[b.nodes.front()];
            b.metric_min = value[b.nodes.back()];
        }
        std::vector<std::string> texts;
        for (NodeId v : b.nodes) texts.push_back(detail::node_text(g, v));
        const auto out = session.query_many(b.nodes, texts);
        for (std::size_t i = 0; i < b.nodes.size(); ++i) {
            if (!out[i]) continue;
            ++b.answered;
            b.correct += out[i]->answer == truth[b.nodes[i]] ? 1 : 0;
        }
        rep.buckets.push_back(std::move(b));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradcheckOptions {
    std::size_t instances = 20;
    std::uint64_t seed = 0;
    double step = 1e-4;
    double tolerance = 1e-4;
    bool corrupt = false;  // negative control: perturbs the analytic W1 gradient
};

struct GradcheckReport {
    std::size_t instances = 0;
    double max_rel_error = 0.0;
    std::map<std::string, double> per_parameter;  // W0, b0, W1, b1
    bool passed = false;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["instances"] = instances;
        j["max_rel_error"] = max_rel_error;
        for (const auto& [k, v] : per_parameter) j["per_parameter"][k] = v;
        j["passed"] = passed;
        return j;
    }
};

/// |a - n| / max(|a|, |n|, 1e-6).
inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

struct GradcheckInstance {
    TextGraph graph;
    GcnModel model;
    TrainBundle bundle;
};

/// Random small problem: d_emb=4, d_hidden=3, C in {2,3}, 3..6 nodes.
/// Instances with a hidden pre-activation within `kink_margin` of zero are
/// redrawn, since central differences straddling the ReLU kink are not
/// derivatives.
inline GradcheckInstance random_gradcheck_instance(Rng& rng, double kink_margin = 1e-3);

namespace detail {

inline GradcheckInstance draw_gradcheck_instance(Rng& rng) {
    const std::size_t n = 3 + rng.below(4);
    const std::size_t c = 2 + rng.below(2);
    const std::size_t d = 4;
    Matrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    std::vector<Edge> edges;
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = a + 1; b < n; ++b) {
            if (rng.bernoulli(0.5)) edges.push_back({a, b});
        }
    }
    std::vector<std::string> names;
    for (std::size_t k = 0; k < c; ++k) names.push_back("c" + std::to_string(k));
    std::vector<std::optional<ClassId>> labels(n);
    for (auto& l : labels) l = static_cast<ClassId>(rng.below(c));
    TextGraph g(names, edges, x, labels);

    GcnHyper hyper{3, 0.0};
    GcnModel m = GcnModel::zeros(d, c, hyper);
    for (auto* w : {&m.w0, &m.w1}) {
        for (Eigen::Index i = 0; i < w->size(); ++i) w->data()[i] = rng.normal();
    }
    for (auto* b : {&m.b0, &m.b1}) {
        for (Eigen::Index i = 0; i < b->size(); ++i) b->data()[i] = 0.5 * rng.normal();
    }

    TrainBundle bundle;
    const std::size_t k = 1 + rng.below(n);
    std::vector<NodeId> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span<NodeId>(perm));
    bundle.nodes.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
    for (std::size_t i = 0; i < k; ++i) bundle.hard_labels.push_back(static_cast<ClassId>(rng.below(c)));
    Matrix p(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c));
    Matrix r(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c));
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        for (Eigen::Index j = 0; j < p.cols(); ++j) {
            p(i, j) = rng.uniform(0.01, 1.0);
            r(i, j) = rng.normal();
        }
        p.row(i) /= p.row(i).sum();
    }
    bundle.teacher_probs = p;
    bundle.rationale_targets = r;
    const double alpha = rng.uniform(0.0, 0.6);
    bundle.weights = {alpha, rng.uniform(0.0, 0.9 - alpha), 3.0};
    return {std::move(g), std::move(m), std::move(bundle)};
}

} // namespace detail

inline GradcheckInstance random_gradcheck_instance(Rng& rng, double kink_margin) {
    for (;;) {
        GradcheckInstance inst = detail::draw_gradcheck_instance(rng);
        const auto fr = forward(inst.model, Propagation::of(inst.graph), Mode::Eval);
        if (fr.cache.h1_pre.cwiseAbs().minCoeff() >= kink_margin) return inst;
    }
}

inline GradcheckReport gradcheck(const GradcheckOptions& opt) {
    Rng rng(derive_seed(opt.seed, "gradcheck"));
    GradcheckReport rep;
    rep.per_parameter = {{"W0", 0.0}, {"b0", 0.0}, {"W1", 0.0}, {"b1", 0.0}};
    for (std::size_t t = 0; t < opt.instances; ++t) {
        GradcheckInstance inst = random_gradcheck_instance(rng);
        const Propagation prop = Propagation::of(inst.graph);
        GcnModel& m = inst.model;
        const ForwardResult fr = forward(m, prop, Mode::Train);
        Gradients g = backward(m, prop, fr, inst.bundle);
        if (opt.corrupt) g.w1 *= 1.01;

        auto loss_at = [&]() { return compute_losses(forward(m, prop, Mode::Eval), inst.bundle).total; };
        auto check = [&](const char* name, auto& param, const auto& grad) {
            for (Eigen::Index i = 0; i < param.size(); ++i) {
                const double orig = param.data()[i];
                param.data()[i] = orig + opt.step;
                const double up = loss_at();
                param.data()[i] = orig - opt.step;
                const double down = loss_at();
                param.data()[i] = orig;
                const double err = relative_error(grad.data()[i], (up - down) / (2.0 * opt.step));
                rep.per_parameter[name] = std::max(rep.per_parameter[name], err);
                rep.max_rel_error = std::max(rep.max_rel_error, err);
            }
        };
        check("W0", m.w0, g.w0);
        check("b0", m.b0, g.b0);
        check("W1", m.w1, g.w1);
        check("b1", m.b1, g.b1);
        ++rep.instances;
    }
    rep.passed = rep.max_rel_error < opt.tolerance;
    return rep;
}

} // namespace graphkd
