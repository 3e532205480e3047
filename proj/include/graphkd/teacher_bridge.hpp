#pragma once

// Everything between the student and the LLM teacher: prompt rendering,
// response parsing, the teacher abstraction with mock implementations, the
// append-only response cache, and the rationale alignment step.

#include <graphkd/error.hpp>
#include <graphkd/gnn_engine.hpp>
#include <graphkd/graph_store.hpp>
#include <graphkd/random.hpp>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

namespace graphkd {

// ---------------------------------------------------------------------------
// Prompts

inline constexpr std::string_view kTextSlot = "<Paper Information>";
inline constexpr std::string_view kCategoriesSlot = "<categories>";
inline constexpr std::string_view kGuessesSlot = "<k>";

inline constexpr std::string_view kDefaultLogitsTemplate =
    "Paper: <Paper Information>. Task: For the following categories: <categories>, which categories does "
    "this paper belong to? Provide your <k> best guesses within the given categories: <categories> and a "
    "confidence score that each is correct (0 to 1). The sum of all confidence should be 1. Outputs must be "
    "in the given categories. For example: \"answer\": <your first answer>, \"confidence\": <confidence for "
    "first answer>, ...";

inline constexpr std::string_view kDefaultRationaleTemplate =
    "Paper: <Paper Information>. Task: For the following categories: <categories>, which categories does "
    "this paper belong to? Think step by step. Explain your decision in detail.";

class PromptConfig {
public:
    /// `k_guesses == 0` selects min(3, C).
    explicit PromptConfig(std::vector<std::string> class_names, std::size_t k_guesses = 0,
                          std::string logits_template = std::string(kDefaultLogitsTemplate),
                          std::string rationale_template = std::string(kDefaultRationaleTemplate))
        : class_names_(std::move(class_names)),
          k_guesses_(k_guesses == 0 ? std::min<std::size_t>(3, class_names_.size()) : k_guesses),
          logits_template_(std::move(logits_template)),
          rationale_template_(std::move(rationale_template)) {
        if (class_names_.empty()) fail(ErrorCode::InvalidTemplate, "no categories");
        if (k_guesses_ < 1 || k_guesses_ > class_names_.size()) {
            fail(ErrorCode::InvalidTemplate, "k_guesses must be in [1, C]");
        }
        for (std::string_view slot : {kTextSlot, kCategoriesSlot, kGuessesSlot}) {
            if (logits_template_.find(slot) == std::string::npos) {
                fail(ErrorCode::InvalidTemplate, "logits template lacks " + std::string(slot));
            }
        }
        for (std::string_view slot : {kTextSlot, kCategoriesSlot}) {
            if (rationale_template_.find(slot) == std::string::npos) {
                fail(ErrorCode::InvalidTemplate, "rationale template lacks " + std::string(slot));
            }
        }
    }

    const std::vector<std::string>& class_names() const { return class_names_; }
    std::size_t k_guesses() const { return k_guesses_; }
    const std::string& logits_template() const { return logits_template_; }
    const std::string& rationale_template() const { return rationale_template_; }

    std::string categories() const {
        std::string out;
        for (std::size_t i = 0; i < class_names_.size(); ++i) {
            if (i) out += ", ";
            out += class_names_[i];
        }
        return out;
    }

private:
    std::vector<std::string> class_names_;
    std::size_t k_guesses_;
    std::string logits_template_;
    std::string rationale_template_;
};

struct Prompts {
    std::string logits;
    std::string rationale;

    std::string hash() const { return hex64(fnv1a(rationale, fnv1a(std::string(1, '\x1f'), fnv1a(logits)))); }
};

namespace detail {

/// Single left-to-right pass, so substituted text is never re-scanned.
inline std::string substitute(std::string_view tmpl, std::string_view text, std::string_view categories,
                              std::string_view k) {
    std::string out;
    out.reserve(tmpl.size() + text.size() + 2 * categories.size());
    std::size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl.substr(i).starts_with(kTextSlot)) {
            out += text;
            i += kTextSlot.size();
        } else if (tmpl.substr(i).starts_with(kCategoriesSlot)) {
            out += categories;
            i += kCategoriesSlot.size();
        } else if (tmpl.substr(i).starts_with(kGuessesSlot)) {
            out += k;
            i += kGuessesSlot.size();
        } else {
            out += tmpl[i++];
        }
    }
    return out;
}

} // namespace detail

inline Prompts render_prompts(const PromptConfig& cfg, std::string_view node_text) {
    if (std::all_of(node_text.begin(), node_text.end(), [](unsigned char c) { return std::isspace(c); })) {
        fail(ErrorCode::EmptyText, "node text is empty");
    }
    const std::string cats = cfg.categories();
    const std::string k = std::to_string(cfg.k_guesses());
    return {detail::substitute(cfg.logits_template(), node_text, cats, k),
            detail::substitute(cfg.rationale_template(), node_text, cats, k)};
}

// ---------------------------------------------------------------------------
// Response parsing

struct ParsedConfidences {
    ClassId answer = 0;
    Vector confidences;
};

namespace detail {

inline std::string fold(std::string_view s) {
    std::string out;
    for (unsigned char c : s) {
        if (std::isalnum(c)) out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

inline std::optional<std::size_t> match_class(std::string_view answer, const std::vector<std::string>& folded) {
    const std::string a = fold(answer);
    if (a.empty()) return std::nullopt;
    for (std::size_t k = 0; k < folded.size(); ++k) {
        if (folded[k] == a) return k;
    }
    std::optional<std::size_t> hit;
    for (std::size_t k = 0; k < folded.size(); ++k) {
        if (!folded[k].empty() && a.find(folded[k]) != std::string::npos) {
            if (hit) return std::nullopt;  // ambiguous
            hit = k;
        }
    }
    return hit;
}

} // namespace detail

/// Extracts `"answer": X, "confidence": p` pairs. Answers are matched to class
/// names ignoring case, whitespace and punctuation; unmatched answers are
/// dropped, repeated classes keep their largest confidence, and the result is
/// renormalised to sum to one.
inline ParsedConfidences parse_confidences(std::string_view raw, const std::vector<std::string>& class_names) {
    static const std::regex pair_re(
        R"re("?answer"?\s*[:=]\s*(?:"([^"]*)"|([^,\n}"]*))\s*[,;]?\s*"?confidence"?\s*[:=]\s*"?([-+]?(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:[eE][-+]?[0-9]+)?))re",
        std::regex::icase | std::regex::ECMAScript);
    std::vector<std::string> folded;
    folded.reserve(class_names.size());
    for (const auto& c : class_names) folded.push_back(detail::fold(c));

    Vector conf = Vector::Zero(static_cast<Eigen::Index>(class_names.size()));
    bool matched = false;
    const std::string text(raw);
    for (auto it = std::sregex_iterator(text.begin(), text.end(), pair_re); it != std::sregex_iterator(); ++it) {
        const auto& m = *it;
        const std::string answer = m[1].matched ? m[1].str() : m[2].str();
        const auto k = detail::match_class(answer, folded);
        if (!k) continue;
        double value = 0.0;
        try {
            value = std::stod(m[3].str());
        } catch (const std::exception&) {
            continue;
        }
        if (!std::isfinite(value)) continue;
        matched = true;
        const auto idx = static_cast<Eigen::Index>(*k);
        conf(idx) = std::max(conf(idx), std::max(value, 0.0));
    }
    if (!matched) fail(ErrorCode::TeacherResponseInvalid, "no answer matched a known category");
    const double total = conf.sum();
    if (!(total > 0.0)) fail(ErrorCode::TeacherResponseInvalid, "all matched confidences are zero");
    conf /= total;
    return {argmax(conf), conf};
}

inline constexpr double kConfidenceFloor = 1e-6;

/// Teacher logits as log-confidences, floored at 1e-6.
inline Vector confidences_to_logits(const Vector& confidences) {
    return confidences.unaryExpr([](double c) { return std::log(std::max(c, kConfidenceFloor)); });
}

// ---------------------------------------------------------------------------
// Teacher records and cache

struct TeacherRecord {
    NodeId node_id = 0;
    ClassId answer = 0;
    Vector confidences;
    std::string rationale_text;
    std::optional<std::vector<double>> rationale_embedding;
    std::string teacher_name;
    std::string prompt_hash;
    std::string timestamp;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["node_id"] = node_id;
        j["prompt_hash"] = prompt_hash;
        j["answer"] = answer;
        j["confidences"] = std::vector<double>(confidences.data(), confidences.data() + confidences.size());
        j["rationale_text"] = rationale_text;
        j["rationale_embedding"] =
            rationale_embedding ? nlohmann::ordered_json(*rationale_embedding) : nlohmann::ordered_json(nullptr);
        j["teacher_name"] = teacher_name;
        j["timestamp"] = timestamp;
        return j;
    }

    static TeacherRecord from_json(const nlohmann::json& j) {
        TeacherRecord r;
        r.node_id = j.at("node_id").get<NodeId>();
        r.prompt_hash = j.at("prompt_hash").get<std::string>();
        r.answer = j.at("answer").get<ClassId>();
        const auto c = j.at("confidences").get<std::vector<double>>();
        r.confidences = Eigen::Map<const Vector>(c.data(), static_cast<Eigen::Index>(c.size()));
        r.rationale_text = j.value("rationale_text", std::string{});
        if (j.contains("rationale_embedding") && !j.at("rationale_embedding").is_null()) {
            r.rationale_embedding = j.at("rationale_embedding").get<std::vector<double>>();
        }
        r.teacher_name = j.value("teacher_name", std::string{});
        r.timestamp = j.value("timestamp", std::string{});
        return r;
    }
};

inline std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Append-only JSONL cache keyed by (teacher, node, prompt hash). With an
/// empty path the cache lives in memory only.
class TeacherCache {
public:
    TeacherCache() = default;

    explicit TeacherCache(fs::path path) : path_(std::move(path)) {
        if (path_.empty() || !fs::exists(path_)) return;
        std::ifstream in(path_);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            TeacherRecord r = TeacherRecord::from_json(nlohmann::json::parse(line));
            records_[key(r.teacher_name, r.node_id, r.prompt_hash)] = std::move(r);
        }
    }

    std::optional<TeacherRecord> find(const std::string& teacher, NodeId node, const std::string& hash) const {
        std::lock_guard lock(mu_);
        const auto it = records_.find(key(teacher, node, hash));
        if (it == records_.end()) return std::nullopt;
        return it->second;
    }

    void put(const TeacherRecord& r) {
        std::lock_guard lock(mu_);
        records_[key(r.teacher_name, r.node_id, r.prompt_hash)] = r;
        if (path_.empty()) return;
        if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
        std::ofstream out(path_, std::ios::app);
        if (!out) fail(ErrorCode::Io, "cannot append to " + path_.string());
        out << r.to_json().dump() << '\n';
    }

    std::size_t size() const {
        std::lock_guard lock(mu_);
        return records_.size();
    }

    const fs::path& path() const { return path_; }

private:
    using Key = std::tuple<std::string, NodeId, std::string>;
    static Key key(const std::string& t, NodeId n, const std::string& h) { return {t, n, h}; }

    fs::path path_;
    mutable std::mutex mu_;
    std::map<Key, TeacherRecord> records_;
};

// ---------------------------------------------------------------------------
// Teachers

enum class PromptKind { Logits, Rationale };

struct TeacherRequest {
    NodeId node = 0;
    PromptKind kind = PromptKind::Logits;
    std::string_view prompt;
};

/// Retryable failure (timeouts, rate limits, 5xx).
class TransientTeacherError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A teacher answers prompts with free text. Implementations must tolerate
/// concurrent calls.
class Teacher {
public:
    virtual ~Teacher() = default;
    virtual std::string name() const = 0;
    virtual std::string complete(const TeacherRequest& request) = 0;
    /// Embedding of the rationale, when the teacher can supply one directly.
    virtual std::optional<std::vector<double>> rationale_embedding(NodeId, ClassId) const { return std::nullopt; }
};

/// Per-class mean embedding over ground-truth labeled nodes.
inline Matrix class_prototypes(const TextGraph& g) {
    const auto c = static_cast<Eigen::Index>(g.num_classes());
    Matrix proto = Matrix::Zero(c, static_cast<Eigen::Index>(g.emb_dim()));
    Vector count = Vector::Zero(c);
    for (NodeId v = 0; v < g.num_nodes(); ++v) {
        if (const auto l = g.labels()[v]) {
            proto.row(*l) += g.embeddings().row(static_cast<Eigen::Index>(v));
            count(*l) += 1.0;
        }
    }
    for (Eigen::Index k = 0; k < c; ++k) {
        if (count(k) > 0) proto.row(k) /= count(k);
    }
    return proto;
}

/// Shared machinery for offline teachers that know the ground truth: they
/// answer in the same textual grammar an LLM is asked for, and attach a
/// rationale embedding drawn around the prototype of the class they chose.
class MockTeacher : public Teacher {
public:
    struct Decision {
        ClassId answer = 0;
        Vector confidences;
    };

    MockTeacher(const TextGraph& g, std::uint64_t seed, double embedding_noise)
        : class_names_(g.class_names()),
          truth_(g.labels()),
          prototypes_(class_prototypes(g)),
          seed_(seed),
          embedding_noise_(embedding_noise) {}

    virtual Decision decide(NodeId node) const = 0;

    std::string complete(const TeacherRequest& request) override {
        if (request.node >= truth_.size()) fail(ErrorCode::InvalidNode, "mock teacher: unknown node");
        const Decision d = decide(request.node);
        if (request.kind == PromptKind::Logits) {
            std::string out;
            char buf[64];
            for (std::size_t k = 0; k < class_names_.size(); ++k) {
                std::snprintf(buf, sizeof buf, "%.6g", d.confidences(static_cast<Eigen::Index>(k)));
                if (k) out += ", ";
                out += "\"answer\": \"" + class_names_[k] + "\", \"confidence\": " + buf;
            }
            return out;
        }
        const std::string& cls = class_names_[static_cast<std::size_t>(d.answer)];
        return "Step 1: the text discusses themes typical of " + cls + ". Step 2: its vocabulary and "
               "citations align with that category more than with the alternatives. Conclusion: " + cls + ".";
    }

    std::optional<std::vector<double>> rationale_embedding(NodeId node, ClassId answer) const override {
        Rng rng(derive_seed(seed_, "rationale-embedding", node));
        std::vector<double> e(static_cast<std::size_t>(prototypes_.cols()));
        for (std::size_t j = 0; j < e.size(); ++j) {
            e[j] = prototypes_(answer, static_cast<Eigen::Index>(j)) + embedding_noise_ * rng.normal();
        }
        return e;
    }

    std::size_t num_classes() const { return class_names_.size(); }

protected:
    ClassId truth(NodeId node) const {
        const auto l = truth_.at(node);
        if (!l) fail(ErrorCode::UnlabeledNode, "mock teacher needs a ground-truth label for node " + std::to_string(node));
        return *l;
    }

    /// `main` on the answer, the rest spread evenly.
    Vector peaked(ClassId answer, double main) const {
        const auto c = static_cast<Eigen::Index>(class_names_.size());
        if (c == 1) return Vector::Ones(1);
        Vector v = Vector::Constant(c, (1.0 - main) / static_cast<double>(c - 1));
        v(answer) = main;
        return v;
    }

    std::vector<std::string> class_names_;
    std::vector<std::optional<ClassId>> truth_;
    Matrix prototypes_;
    std::uint64_t seed_;
    double embedding_noise_;
};

/// Always answers the ground-truth class with confidence 0.9.
class OracleTeacher final : public MockTeacher {
public:
    explicit OracleTeacher(const TextGraph& g, std::uint64_t seed = 0, double embedding_noise = 0.1)
        : MockTeacher(g, seed, embedding_noise) {}

    std::string name() const override { return "oracle"; }

    Decision decide(NodeId node) const override {
        const ClassId y = truth(node);
        return {y, peaked(y, 0.9)};
    }
};

/// Correctness probability per homophily tertile (lowest, middle, highest).
struct NoiseProfile {
    std::array<double, 3> bucket_accuracy{0.40, 0.60, 0.75};
    double stated_confidence = 0.7;
};

/// Answers correctly with a probability that grows with the node's
/// ground-truth homophily ratio. Nodes are ordered by (HR, degree, id) and
/// split into tertiles; wrong answers are uniform over the other classes.
/// Every draw is seeded by (seed, node), so answers do not depend on query
/// order.
class NoisyTeacher final : public MockTeacher {
public:
    NoisyTeacher(const TextGraph& g, NoiseProfile profile, std::uint64_t seed, double embedding_noise = 0.1)
        : MockTeacher(g, seed, embedding_noise), profile_(profile), bucket_(g.num_nodes(), 0) {
        const auto labels = dense_labels(g);
        std::vector<std::tuple<double, std::size_t, NodeId>> order;
        order.reserve(g.num_nodes());
        for (NodeId v = 0; v < g.num_nodes(); ++v) order.emplace_back(homophily_ratio(g, v, labels), degree(g, v), v);
        std::sort(order.begin(), order.end());
        const std::size_t n = order.size();
        for (std::size_t rank = 0; rank < n; ++rank) bucket_[std::get<2>(order[rank])] = (3 * rank) / n;
    }

    std::string name() const override { return "noisy"; }

    double correctness_probability(NodeId node) const { return profile_.bucket_accuracy[bucket_.at(node)]; }
    std::size_t bucket(NodeId node) const { return bucket_.at(node); }

    Decision decide(NodeId node) const override {
        const ClassId y = truth(node);
        Rng rng(derive_seed(seed_, "noisy-teacher", node));
        ClassId answer = y;
        const auto c = static_cast<ClassId>(num_classes());
        if (c > 1 && !rng.bernoulli(correctness_probability(node))) {
            answer = static_cast<ClassId>(rng.below(static_cast<std::uint64_t>(c - 1)));
            if (answer >= y) ++answer;
        }
        return {answer, peaked(answer, profile_.stated_confidence)};
    }

private:
    NoiseProfile profile_;
    std::vector<std::size_t> bucket_;
};

// ---------------------------------------------------------------------------
// Query session

struct QueryOptions {
    std::size_t max_attempts = 3;
    std::chrono::milliseconds backoff{200};  // doubled after every failed attempt
    std::optional<std::size_t> query_cap;    // cache misses allowed
    std::size_t max_in_flight = 4;
};

/// Issues the two prompts per node, parses, caches. Counts cache misses
/// (`queries`) and raw teacher calls (`requests`).
class TeacherSession {
public:
    TeacherSession(Teacher& teacher, PromptConfig prompts, TeacherCache& cache, QueryOptions options = {})
        : teacher_(teacher), prompts_(std::move(prompts)), cache_(cache), options_(options) {}

    TeacherRecord query(NodeId node, std::string_view text) {
        const Prompts p = render_prompts(prompts_, text);
        const std::string hash = p.hash();
        const std::string name = teacher_.name();
        if (auto hit = cache_.find(name, node, hash)) {
            if (!hit->rationale_embedding) hit->rationale_embedding = teacher_.rationale_embedding(node, hit->answer);
            return *hit;
        }

        {
            std::lock_guard lock(mu_);
            if (options_.query_cap && queries_ >= *options_.query_cap) {
                fail(ErrorCode::BudgetExhausted, "teacher query cap of " + std::to_string(*options_.query_cap) + " reached");
            }
            ++queries_;
        }

        TeacherRecord r;
        r.node_id = node;
        r.teacher_name = name;
        r.prompt_hash = hash;
        const ParsedConfidences parsed = with_retries([&] {
            return parse_confidences(call({node, PromptKind::Logits, p.logits}), prompts_.class_names());
        });
        r.answer = parsed.answer;
        r.confidences = parsed.confidences;
        r.rationale_text = with_retries([&] {
            std::string text = call({node, PromptKind::Rationale, p.rationale});
            if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
                fail(ErrorCode::TeacherResponseInvalid, "empty rationale");
            }
            return text;
        });
        r.rationale_embedding = teacher_.rationale_embedding(node, r.answer);
        r.timestamp = utc_timestamp();
        cache_.put(r);
        return r;
    }

    /// Concurrent lookup of many nodes, at most `max_in_flight` at a time.
    /// Nodes whose responses stay unparseable come back empty; any other
    /// failure is rethrown after all workers finish.
    std::vector<std::optional<TeacherRecord>> query_many(std::span<const NodeId> nodes,
                                                         std::span<const std::string> texts) {
        if (nodes.size() != texts.size()) fail(ErrorCode::ShapeMismatch, "one text per queried node");
        std::vector<std::optional<TeacherRecord>> out(nodes.size());
        std::atomic<std::size_t> next{0};
        std::exception_ptr first_error;
        std::mutex err_mu;
        auto worker = [&] {
            for (std::size_t i = next++; i < nodes.size(); i = next++) {
                try {
                    out[i] = query(nodes[i], texts[i]);
                } catch (const Error& e) {
                    if (e.code() == ErrorCode::TeacherResponseInvalid) continue;
                    std::lock_guard lock(err_mu);
                    if (!first_error) first_error = std::current_exception();
                } catch (...) {
                    std::lock_guard lock(err_mu);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        };
        const std::size_t workers = std::max<std::size_t>(1, std::min(options_.max_in_flight, nodes.size()));
        if (workers == 1) {
            worker();
        } else {
            std::vector<std::jthread> pool;
            for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
        }
        if (first_error) std::rethrow_exception(first_error);
        return out;
    }

    std::size_t queries() const {
        std::lock_guard lock(mu_);
        return queries_;
    }
    std::size_t requests() const { return requests_.load(); }
    const PromptConfig& prompts() const { return prompts_; }
    Teacher& teacher() const { return teacher_; }

private:
    std::string call(const TeacherRequest& req) {
        ++requests_;
        return teacher_.complete(req);
    }

    template <class F>
    auto with_retries(F&& attempt) -> decltype(attempt()) {
        auto delay = options_.backoff;
        for (std::size_t k = 1;; ++k) {
            try {
                return attempt();
            } catch (const TransientTeacherError& e) {
                if (k >= options_.max_attempts) {
                    fail(ErrorCode::TeacherUnavailable, std::string(e.what()) + " (after " + std::to_string(k) + " attempts)");
                }
            } catch (const Error& e) {
                if (e.code() != ErrorCode::TeacherResponseInvalid || k >= options_.max_attempts) throw;
            }
            if (delay.count() > 0) std::this_thread::sleep_for(delay);
            delay *= 2;
        }
    }

    Teacher& teacher_;
    PromptConfig prompts_;
    TeacherCache& cache_;
    QueryOptions options_;
    mutable std::mutex mu_;
    std::size_t queries_ = 0;
    std::atomic<std::size_t> requests_{0};
};

// ---------------------------------------------------------------------------
// Rationale embedding exchange with the offline encoder
//
//   rationales_pending.jsonl     {"node_id","rationale_text"} per line
//   rationale_embeddings.f32le   row-major float32
//   index.json                   {"<node_id>": row, ...} or {"emb_dim": d, "index": {...}}

class RationaleEmbeddings {
public:
    static std::optional<RationaleEmbeddings> load(const fs::path& dir) {
        const fs::path index_path = dir / "index.json";
        const fs::path data_path = dir / "rationale_embeddings.f32le";
        if (!fs::is_regular_file(index_path) || !fs::is_regular_file(data_path)) return std::nullopt;
        const auto j = nlohmann::json::parse(detail::read_text(index_path));
        const auto& idx = j.contains("index") ? j.at("index") : j;
        RationaleEmbeddings out;
        std::size_t rows = 0;
        for (const auto& [k, v] : idx.items()) {
            if (k == "emb_dim") continue;
            const auto row = v.get<std::size_t>();
            out.row_of_[static_cast<NodeId>(std::stoull(k))] = row;
            rows = std::max(rows, row + 1);
        }
        const auto bytes = fs::file_size(data_path);
        if (rows == 0) return out;
        std::size_t dim = 0;
        if (j.contains("emb_dim")) {
            // Explicit width: the file may hold rows the index does not list.
            dim = j.at("emb_dim").get<std::size_t>();
            if (dim == 0 || bytes % (4 * dim) != 0 || bytes / (4 * dim) < rows) {
                fail(ErrorCode::ShapeMismatch, "index.json emb_dim disagrees with rationale_embeddings.f32le");
            }
            rows = bytes / (4 * dim);
        } else {
            if (bytes % (4 * rows) != 0) fail(ErrorCode::ShapeMismatch, "rationale embedding file size is not rows x dim x 4");
            dim = bytes / (4 * rows);
        }
        out.data_ = detail::read_f32_matrix(data_path, rows, dim);
        return out;
    }

    std::optional<std::vector<double>> find(NodeId node) const {
        const auto it = row_of_.find(node);
        if (it == row_of_.end()) return std::nullopt;
        const auto row = data_.row(static_cast<Eigen::Index>(it->second));
        return std::vector<double>(row.begin(), row.end());
    }

    std::size_t dim() const { return static_cast<std::size_t>(data_.cols()); }

private:
    std::map<NodeId, std::size_t> row_of_;
    Matrix data_;
};

/// Appends records without embeddings to the pending file, skipping node ids
/// already listed. Returns the number of lines added.
inline std::size_t write_pending_rationales(const fs::path& path, std::span<const TeacherRecord> records) {
    std::set<NodeId> listed;
    if (fs::exists(path)) {
        std::ifstream in(path);
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty()) listed.insert(nlohmann::json::parse(line).at("node_id").get<NodeId>());
        }
    }
    std::ofstream out(path, std::ios::app);
    if (!out) fail(ErrorCode::Io, "cannot append to " + path.string());
    std::size_t added = 0;
    for (const auto& r : records) {
        if (r.rationale_embedding || !listed.insert(r.node_id).second) continue;
        nlohmann::ordered_json j;
        j["node_id"] = r.node_id;
        j["rationale_text"] = r.rationale_text;
        out << j.dump() << '\n';
        ++added;
    }
    return added;
}

// ---------------------------------------------------------------------------
// Rationale alignment

/// One-hidden-layer ReLU MLP mapping rationale embeddings to C outputs.
struct AlignMlp {
    Matrix wa;  // d_emb x hidden
    Vector ba;
    Matrix wb;  // hidden x C
    Vector bb;
    std::string trained_on;

    std::size_t d_in() const { return static_cast<std::size_t>(wa.rows()); }
    std::size_t num_classes() const { return static_cast<std::size_t>(wb.cols()); }

    Matrix forward(const Matrix& x) const {
        const Matrix h = ((x * wa).rowwise() + ba.transpose()).cwiseMax(0.0);
        return (h * wb).rowwise() + bb.transpose();
    }
};

struct AlignHyper {
    std::size_t hidden = 64;
    std::size_t epochs = 200;
    AdamConfig adam{};
    std::uint64_t seed = 0;
};

inline AlignMlp train_align_mlp(const Matrix& x_l, std::span<const ClassId> y_l, std::size_t num_classes,
                                const AlignHyper& hyper) {
    const auto m = x_l.rows();
    if (static_cast<std::size_t>(m) != y_l.size()) fail(ErrorCode::ShapeMismatch, "one label per embedding row");
    if (static_cast<std::size_t>(m) < num_classes) {
        fail(ErrorCode::InsufficientClassSupport, "alignment MLP needs at least C labeled nodes");
    }
    for (ClassId y : y_l) {
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes) fail(ErrorCode::BadLabel, "label out of range");
    }
    const auto h = static_cast<Eigen::Index>(hyper.hidden);
    const auto c = static_cast<Eigen::Index>(num_classes);
    AlignMlp mlp{Matrix::Zero(x_l.cols(), h), Vector::Zero(h), Matrix::Zero(h, c), Vector::Zero(c), {}};
    Rng rng(derive_seed(hyper.seed, "align-init"));
    GcnModel::xavier_fill(mlp.wa, rng);
    GcnModel::xavier_fill(mlp.wb, rng);
    {
        std::uint64_t fp = fnv1a(detail::f32_matrix_bytes(x_l));
        for (ClassId y : y_l) fp = fnv1a(std::to_string(y) + ",", fp);
        mlp.trained_on = hex64(fp);
    }

    Adam adam(hyper.adam);
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        const Matrix pre = (x_l * mlp.wa).rowwise() + mlp.ba.transpose();
        const Matrix hid = pre.cwiseMax(0.0);
        const Matrix logits = (hid * mlp.wb).rowwise() + mlp.bb.transpose();
        Matrix g = softmax_rows(logits);
        for (Eigen::Index i = 0; i < m; ++i) g(i, y_l[static_cast<std::size_t>(i)]) -= 1.0;
        g *= inv_m;
        const Matrix g_wb = hid.transpose() * g;
        const Vector g_bb = g.colwise().sum().transpose();
        const Matrix g_pre = (g * mlp.wb.transpose()).cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
        const Matrix g_wa = x_l.transpose() * g_pre;
        const Vector g_ba = g_pre.colwise().sum().transpose();
        adam.begin_step();
        adam.update(0, mlp.wa, g_wa, true);
        adam.update(1, mlp.ba, g_ba, false);
        adam.update(2, mlp.wb, g_wb, true);
        adam.update(3, mlp.bb, g_bb, false);
        if (!mlp.wa.allFinite() || !mlp.wb.allFinite()) {
            fail(ErrorCode::Diverged, "alignment MLP diverged at epoch " + std::to_string(epoch + 1));
        }
    }
    return mlp;
}

/// Pre-softmax C-dimensional image of a rationale embedding.
inline Vector align_rationale(const AlignMlp& mlp, const Vector& embedding) {
    if (static_cast<std::size_t>(embedding.size()) != mlp.d_in()) {
        fail(ErrorCode::DimMismatch, "rationale embedding has dim " + std::to_string(embedding.size()) +
                                         ", alignment expects " + std::to_string(mlp.d_in()));
    }
    return mlp.forward(embedding.transpose()).row(0).transpose();
}

/// Max over C contiguous chunks; the last chunk absorbs the remainder.
inline Vector max_pool_align(const Vector& embedding, std::size_t num_classes) {
    const auto d = static_cast<std::size_t>(embedding.size());
    if (num_classes == 0 || d < num_classes) {
        fail(ErrorCode::DimTooSmall, "cannot pool " + std::to_string(d) + " dims into " + std::to_string(num_classes));
    }
    const std::size_t chunk = d / num_classes;
    Vector out(static_cast<Eigen::Index>(num_classes));
    for (std::size_t k = 0; k < num_classes; ++k) {
        const std::size_t lo = k * chunk;
        const std::size_t hi = k + 1 == num_classes ? d : lo + chunk;
        out(static_cast<Eigen::Index>(k)) =
            embedding.segment(static_cast<Eigen::Index>(lo), static_cast<Eigen::Index>(hi - lo)).maxCoeff();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Turning teacher knowledge into training targets

enum class AlignMode { Mlp, MaxPool };

struct DistillConfig {
    double alpha = 0.3;
    double beta = 0.1;
    double tau = 3.0;
    bool use_soft_labels = true;
    bool use_rationales = true;
    AlignMode align = AlignMode::Mlp;

    double effective_alpha() const { return use_soft_labels ? alpha : 0.0; }
    double effective_beta() const { return use_rationales ? beta : 0.0; }
    bool needs_teacher() const { return use_soft_labels || use_rationales; }
};

/// Builds the bundle for V_S. `records` holds teacher output per node; a
/// labeled node without a usable record falls back to its own label (soft
/// target) and its own text embedding (rationale target).
inline TrainBundle assemble_bundle(const TextGraph& g, std::span<const NodeId> nodes, std::span<const ClassId> hard_labels,
                                   const std::map<NodeId, TeacherRecord>& records, const DistillConfig& cfg,
                                   const AlignMlp* mlp) {
    TrainBundle b;
    b.nodes.assign(nodes.begin(), nodes.end());
    b.hard_labels.assign(hard_labels.begin(), hard_labels.end());
    b.weights = {cfg.effective_alpha(), cfg.effective_beta(), cfg.tau};
    const auto c = static_cast<Eigen::Index>(g.num_classes());
    const auto m = static_cast<Eigen::Index>(nodes.size());
    if (cfg.use_soft_labels) {
        Matrix p(m, c);
        for (Eigen::Index i = 0; i < m; ++i) {
            const auto it = records.find(nodes[static_cast<std::size_t>(i)]);
            Vector conf;
            if (it != records.end()) {
                conf = it->second.confidences;
            } else {
                conf = Vector::Zero(c);
                conf(hard_labels[static_cast<std::size_t>(i)]) = 1.0;
            }
            p.row(i) = teacher_distribution(confidences_to_logits(conf), cfg.tau).transpose();
        }
        b.teacher_probs = std::move(p);
    }
    if (cfg.use_rationales) {
        if (cfg.align == AlignMode::Mlp && mlp == nullptr) {
            fail(ErrorCode::InvalidConfig, "MLP alignment requested without a trained MLP");
        }
        Matrix r(m, c);
        for (Eigen::Index i = 0; i < m; ++i) {
            const NodeId v = nodes[static_cast<std::size_t>(i)];
            const auto it = records.find(v);
            Vector emb;
            if (it != records.end()) {
                if (!it->second.rationale_embedding) {
                    fail(ErrorCode::MissingRationaleTarget,
                         "no rationale embedding for node " + std::to_string(v) +
                             "; run the embedding tool on rationales_pending.jsonl");
                }
                const auto& e = *it->second.rationale_embedding;
                emb = Eigen::Map<const Vector>(e.data(), static_cast<Eigen::Index>(e.size()));
            } else {
                emb = g.embeddings().row(static_cast<Eigen::Index>(v)).transpose();
            }
            r.row(i) = (cfg.align == AlignMode::Mlp ? align_rationale(*mlp, emb)
                                                    : max_pool_align(emb, g.num_classes()))
                           .transpose();
        }
        b.rationale_targets = std::move(r);
    }
    return b;
}

} // namespace graphkd
