#pragma once

// Text-attributed graph storage: dataset directory I/O, few-shot splits and
// the per-node structural metrics used by the selector and the bucket analysis.

#include <graphkd/error.hpp>
#include <graphkd/random.hpp>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace graphkd {

namespace fs = std::filesystem;

using NodeId = std::size_t;
using ClassId = int;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Edge {
    NodeId a = 0;
    NodeId b = 0;
    friend bool operator==(const Edge&, const Edge&) = default;
    friend auto operator<=>(const Edge&, const Edge&) = default;
};

/// Immutable undirected text-attributed graph. Edges are stored once as
/// (min, max) pairs, deduplicated and without self-loops.
class TextGraph {
public:
    TextGraph(std::vector<std::string> class_names, std::vector<Edge> edges, Matrix embeddings,
              std::vector<std::optional<ClassId>> labels,
              std::vector<std::optional<std::string>> texts = {}, std::string encoder_name = {})
        : class_names_(std::move(class_names)),
          embeddings_(std::move(embeddings)),
          labels_(std::move(labels)),
          texts_(std::move(texts)),
          encoder_name_(std::move(encoder_name)) {
        const auto n = static_cast<std::size_t>(embeddings_.rows());
        if (labels_.size() != n) {
            fail(ErrorCode::ShapeMismatch, "label count " + std::to_string(labels_.size()) +
                                               " != embedding rows " + std::to_string(n));
        }
        if (texts_.empty()) texts_.resize(n);
        if (texts_.size() != n) fail(ErrorCode::ShapeMismatch, "text count does not match node count");
        if (embeddings_.cols() == 0) fail(ErrorCode::ShapeMismatch, "embedding dimension must be positive");
        if (!embeddings_.allFinite()) fail(ErrorCode::NonFiniteInput, "embeddings contain non-finite values");
        if (class_names_.empty()) fail(ErrorCode::BadLabel, "at least one class is required");
        {
            std::vector<std::string> sorted = class_names_;
            std::sort(sorted.begin(), sorted.end());
            if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
                fail(ErrorCode::BadLabel, "class names must be distinct");
            }
        }
        const auto c = static_cast<ClassId>(class_names_.size());
        for (std::size_t v = 0; v < n; ++v) {
            if (labels_[v] && (*labels_[v] < 0 || *labels_[v] >= c)) {
                fail(ErrorCode::BadLabel, "node " + std::to_string(v) + " has label " +
                                              std::to_string(*labels_[v]) + " outside [0," +
                                              std::to_string(c) + ")");
            }
        }

        edges_.reserve(edges.size());
        for (const Edge& e : edges) {
            if (e.a >= n || e.b >= n) {
                fail(ErrorCode::DanglingEdge, "edge " + std::to_string(e.a) + "," + std::to_string(e.b) +
                                                  " references a node outside [0," + std::to_string(n) + ")");
            }
            if (e.a == e.b) continue;
            edges_.push_back({std::min(e.a, e.b), std::max(e.a, e.b)});
        }
        std::sort(edges_.begin(), edges_.end());
        edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());

        // CSR adjacency
        offsets_.assign(n + 1, 0);
        for (const Edge& e : edges_) {
            ++offsets_[e.a + 1];
            ++offsets_[e.b + 1];
        }
        for (std::size_t v = 0; v < n; ++v) offsets_[v + 1] += offsets_[v];
        neighbors_.resize(offsets_[n]);
        std::vector<std::size_t> cursor(offsets_.begin(), offsets_.end() - 1);
        for (const Edge& e : edges_) {
            neighbors_[cursor[e.a]++] = e.b;
            neighbors_[cursor[e.b]++] = e.a;
        }
        for (std::size_t v = 0; v < n; ++v) {
            std::sort(neighbors_.begin() + static_cast<std::ptrdiff_t>(offsets_[v]),
                      neighbors_.begin() + static_cast<std::ptrdiff_t>(offsets_[v + 1]));
        }
    }

    std::size_t num_nodes() const { return static_cast<std::size_t>(embeddings_.rows()); }
    std::size_t num_classes() const { return class_names_.size(); }
    std::size_t emb_dim() const { return static_cast<std::size_t>(embeddings_.cols()); }
    std::size_t num_edges() const { return edges_.size(); }

    const std::vector<std::string>& class_names() const { return class_names_; }
    std::span<const Edge> edges() const { return edges_; }
    const Matrix& embeddings() const { return embeddings_; }
    const std::vector<std::optional<ClassId>>& labels() const { return labels_; }
    const std::vector<std::optional<std::string>>& texts() const { return texts_; }
    const std::string& encoder_name() const { return encoder_name_; }

    std::span<const NodeId> neighbors(NodeId v) const {
        check_node(v);
        return std::span<const NodeId>(neighbors_).subspan(offsets_[v], offsets_[v + 1] - offsets_[v]);
    }

    std::optional<ClassId> label(NodeId v) const {
        check_node(v);
        return labels_[v];
    }

    void check_node(NodeId v) const {
        if (v >= num_nodes()) {
            fail(ErrorCode::InvalidNode, "node " + std::to_string(v) + " not in [0," +
                                             std::to_string(num_nodes()) + ")");
        }
    }

    /// Copy of the graph with every edge incident to `v` removed.
    TextGraph without_edges_of(NodeId v) const {
        check_node(v);
        std::vector<Edge> kept;
        kept.reserve(edges_.size());
        for (const Edge& e : edges_) {
            if (e.a != v && e.b != v) kept.push_back(e);
        }
        return TextGraph(class_names_, std::move(kept), embeddings_, labels_, texts_, encoder_name_);
    }

private:
    std::vector<std::string> class_names_;
    std::vector<Edge> edges_;
    Matrix embeddings_;
    std::vector<std::optional<ClassId>> labels_;
    std::vector<std::optional<std::string>> texts_;
    std::string encoder_name_;
    std::vector<std::size_t> offsets_;
    std::vector<NodeId> neighbors_;
};

inline std::size_t degree(const TextGraph& g, NodeId v) { return g.neighbors(v).size(); }

/// Fraction of v's neighbours that share v's label under `label_source`.
/// Isolated nodes score 0.
inline double homophily_ratio(const TextGraph& g, NodeId v, std::span<const ClassId> label_source) {
    if (label_source.size() != g.num_nodes()) {
        fail(ErrorCode::ShapeMismatch, "label source must cover every node");
    }
    const auto nbrs = g.neighbors(v);
    if (nbrs.empty()) return 0.0;
    std::size_t same = 0;
    for (NodeId u : nbrs) same += label_source[u] == label_source[v] ? 1 : 0;
    return static_cast<double>(same) / static_cast<double>(nbrs.size());
}

/// Ground-truth labels as a dense vector; errors if any node is unlabeled.
inline std::vector<ClassId> dense_labels(const TextGraph& g) {
    std::vector<ClassId> out(g.num_nodes());
    for (NodeId v = 0; v < g.num_nodes(); ++v) {
        const auto l = g.labels()[v];
        if (!l) fail(ErrorCode::UnlabeledNode, "node " + std::to_string(v) + " has no label");
        out[v] = *l;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Splits

struct Partition {
    std::vector<NodeId> train_pool;
    std::vector<NodeId> val;
    std::vector<NodeId> test;
};

struct SplitSpec {
    std::vector<NodeId> train_pool;
    std::vector<NodeId> val;
    std::vector<NodeId> test;
    std::vector<NodeId> labeled;  // few-shot set V_l, shots per class
    std::size_t shots_per_class = 0;
    std::uint64_t seed = 0;

    friend bool operator==(const SplitSpec&, const SplitSpec&) = default;
};

struct SplitFractions {
    double train = 0.6;
    double val = 0.2;
    double test = 0.2;
};

namespace detail {

inline void check_partition(const TextGraph& g, const Partition& p) {
    std::vector<char> seen(g.num_nodes(), 0);
    for (const auto* part : {&p.train_pool, &p.val, &p.test}) {
        for (NodeId v : *part) {
            g.check_node(v);
            if (seen[v]) fail(ErrorCode::ShapeMismatch, "split parts overlap at node " + std::to_string(v));
            seen[v] = 1;
        }
    }
}

inline std::vector<NodeId> draw_shots(const TextGraph& g, std::span<const NodeId> ordered_pool,
                                      std::size_t shots) {
    const std::size_t c = g.num_classes();
    std::vector<std::vector<NodeId>> per_class(c);
    for (NodeId v : ordered_pool) {
        const auto l = g.labels()[v];
        if (l && per_class[static_cast<std::size_t>(*l)].size() < shots) {
            per_class[static_cast<std::size_t>(*l)].push_back(v);
        }
    }
    std::vector<NodeId> labeled;
    for (std::size_t k = 0; k < c; ++k) {
        if (per_class[k].size() < shots) {
            fail(ErrorCode::InsufficientClassSupport,
                 "class '" + g.class_names()[k] + "' has " + std::to_string(per_class[k].size()) +
                     " labeled nodes in the train pool, " + std::to_string(shots) + " required");
        }
        labeled.insert(labeled.end(), per_class[k].begin(), per_class[k].end());
    }
    std::sort(labeled.begin(), labeled.end());
    return labeled;
}

} // namespace detail

/// Random train/val/test partition plus an n-shot labeled set drawn from the
/// train pool. Validation and test take floor(fraction * N) nodes each; the
/// remainder goes to the train pool. When `fixed` is given only the shots
/// are sampled.
inline SplitSpec make_split(const TextGraph& g, std::size_t shots, std::uint64_t seed,
                            SplitFractions fractions = {}, const std::optional<Partition>& fixed = {}) {
    if (shots == 0) fail(ErrorCode::InvalidConfig, "shots per class must be at least 1");
    Rng rng(derive_seed(seed, "split"));
    SplitSpec s;
    s.shots_per_class = shots;
    s.seed = seed;

    std::vector<NodeId> pool_order;
    if (fixed) {
        detail::check_partition(g, *fixed);
        s.train_pool = fixed->train_pool;
        s.val = fixed->val;
        s.test = fixed->test;
        pool_order = fixed->train_pool;
        std::sort(pool_order.begin(), pool_order.end());
        rng.shuffle(std::span<NodeId>(pool_order));
    } else {
        const std::size_t n = g.num_nodes();
        std::vector<NodeId> perm(n);
        for (NodeId v = 0; v < n; ++v) perm[v] = v;
        rng.shuffle(std::span<NodeId>(perm));
        const auto n_val = static_cast<std::size_t>(std::floor(fractions.val * static_cast<double>(n)));
        const auto n_test = static_cast<std::size_t>(std::floor(fractions.test * static_cast<double>(n)));
        s.val.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
        s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_val),
                      perm.begin() + static_cast<std::ptrdiff_t>(n_val + n_test));
        pool_order.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_val + n_test), perm.end());
        s.train_pool = pool_order;
    }
    s.labeled = detail::draw_shots(g, pool_order, shots);
    std::sort(s.train_pool.begin(), s.train_pool.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

// ---------------------------------------------------------------------------
// Dataset directory I/O
//
//   meta.json         {"num_nodes","num_classes","emb_dim","class_names","directed":false[,"encoder"]}
//   nodes.jsonl       {"id","label","text"} per line, in id order
//   edges.csv         "src,dst" per line
//   embeddings.f32le  row-major little-endian float32, num_nodes x emb_dim
//   splits.json       optional {"train_pool","val","test"}

namespace detail {

inline fs::path require_file(const fs::path& dir, const char* name) {
    fs::path p = dir / name;
    if (!fs::is_regular_file(p)) fail(ErrorCode::MissingFile, p.string());
    return p;
}

inline std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) fail(ErrorCode::MissingFile, p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text(const fs::path& p, std::string_view content) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot write " + p.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) fail(ErrorCode::Io, "write failed for " + p.string());
}

inline float load_f32le(const unsigned char* p) {
    std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    return std::bit_cast<float>(bits);
}

inline void store_f32le(std::string& out, float f) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline Matrix read_f32_matrix(const fs::path& p, std::size_t rows, std::size_t cols) {
    const std::string bytes = read_text(p);
    const std::size_t expect = rows * cols * 4;
    if (bytes.size() != expect) {
        fail(ErrorCode::ShapeMismatch, p.string() + " holds " + std::to_string(bytes.size()) +
                                           " bytes, expected " + std::to_string(expect));
    }
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    const auto* data = reinterpret_cast<const unsigned char*>(bytes.data());
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                load_f32le(data + 4 * (i * cols + j));
        }
    }
    return m;
}

inline std::string f32_matrix_bytes(const Matrix& m) {
    std::string out;
    out.reserve(static_cast<std::size_t>(m.size()) * 4);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) store_f32le(out, static_cast<float>(m(i, j)));
    }
    return out;
}

inline std::vector<NodeId> json_ids(const nlohmann::json& j, const char* key) {
    std::vector<NodeId> out;
    for (const auto& v : j.at(key)) out.push_back(v.get<NodeId>());
    return out;
}

} // namespace detail

inline TextGraph load_dataset(const fs::path& dir) {
    using nlohmann::json;
    const json meta = json::parse(detail::read_text(detail::require_file(dir, "meta.json")));
    const auto n = meta.at("num_nodes").get<std::size_t>();
    const auto c = meta.at("num_classes").get<std::size_t>();
    const auto d = meta.at("emb_dim").get<std::size_t>();
    auto class_names = meta.at("class_names").get<std::vector<std::string>>();
    if (class_names.size() != c) {
        fail(ErrorCode::ShapeMismatch, "meta.json lists " + std::to_string(class_names.size()) +
                                           " class names for " + std::to_string(c) + " classes");
    }
    if (meta.value("directed", false)) {
        fail(ErrorCode::InvalidConfig, "directed graphs are not supported");
    }
    if (d == 0) fail(ErrorCode::ShapeMismatch, "emb_dim must be positive");

    std::vector<std::optional<ClassId>> labels;
    std::vector<std::optional<std::string>> texts;
    {
        std::istringstream in(detail::read_text(detail::require_file(dir, "nodes.jsonl")));
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const json row = json::parse(line);
            const auto id = row.at("id").get<std::size_t>();
            if (id != labels.size()) {
                fail(ErrorCode::ShapeMismatch, "nodes.jsonl out of order at id " + std::to_string(id));
            }
            const auto& l = row.at("label");
            if (l.is_null()) {
                labels.emplace_back();
            } else {
                const auto lv = l.get<long long>();
                if (lv < 0 || static_cast<std::size_t>(lv) >= c) {
                    fail(ErrorCode::BadLabel, "node " + std::to_string(id) + " has label " + std::to_string(lv));
                }
                labels.emplace_back(static_cast<ClassId>(lv));
            }
            const auto t = row.find("text");
            if (t == row.end() || t->is_null()) {
                texts.emplace_back();
            } else {
                texts.emplace_back(t->get<std::string>());
            }
        }
    }
    if (labels.size() != n) {
        fail(ErrorCode::ShapeMismatch, "nodes.jsonl has " + std::to_string(labels.size()) + " rows for " +
                                           std::to_string(n) + " nodes");
    }

    std::vector<Edge> edges;
    {
        std::istringstream in(detail::read_text(detail::require_file(dir, "edges.csv")));
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            if (lineno == 1 && !std::isdigit(static_cast<unsigned char>(line.front()))) continue;  // header
            const auto comma = line.find(',');
            if (comma == std::string::npos) {
                fail(ErrorCode::ShapeMismatch, "edges.csv line " + std::to_string(lineno) + " lacks a comma");
            }
            long long a = 0, b = 0;
            try {
                a = std::stoll(line.substr(0, comma));
                b = std::stoll(line.substr(comma + 1));
            } catch (const std::exception&) {
                fail(ErrorCode::ShapeMismatch, "edges.csv line " + std::to_string(lineno) + " is not numeric");
            }
            if (a < 0 || b < 0 || static_cast<std::size_t>(a) >= n || static_cast<std::size_t>(b) >= n) {
                fail(ErrorCode::DanglingEdge, "edge " + std::to_string(a) + "," + std::to_string(b) +
                                                  " with num_nodes=" + std::to_string(n));
            }
            edges.push_back({static_cast<NodeId>(a), static_cast<NodeId>(b)});
        }
    }

    Matrix x = detail::read_f32_matrix(detail::require_file(dir, "embeddings.f32le"), n, d);
    return TextGraph(std::move(class_names), std::move(edges), std::move(x), std::move(labels),
                     std::move(texts), meta.value("encoder", std::string{}));
}

inline std::optional<Partition> load_partition(const fs::path& dir) {
    const fs::path p = dir / "splits.json";
    if (!fs::is_regular_file(p)) return std::nullopt;
    const auto j = nlohmann::json::parse(detail::read_text(p));
    return Partition{detail::json_ids(j, "train_pool"), detail::json_ids(j, "val"), detail::json_ids(j, "test")};
}

inline std::string nodes_jsonl(const TextGraph& g) {
    std::string out;
    for (NodeId v = 0; v < g.num_nodes(); ++v) {
        nlohmann::ordered_json row;
        row["id"] = v;
        row["label"] = g.labels()[v] ? nlohmann::ordered_json(*g.labels()[v]) : nlohmann::ordered_json(nullptr);
        row["text"] = g.texts()[v] ? nlohmann::ordered_json(*g.texts()[v]) : nlohmann::ordered_json(nullptr);
        out += row.dump();
        out += '\n';
    }
    return out;
}

inline void write_dataset(const TextGraph& g, const fs::path& dir, const std::optional<Partition>& partition = {}) {
    fs::create_directories(dir);
    nlohmann::ordered_json meta;
    meta["num_nodes"] = g.num_nodes();
    meta["num_classes"] = g.num_classes();
    meta["emb_dim"] = g.emb_dim();
    meta["class_names"] = g.class_names();
    meta["directed"] = false;
    if (!g.encoder_name().empty()) meta["encoder"] = g.encoder_name();
    detail::write_text(dir / "meta.json", meta.dump(2) + "\n");
    detail::write_text(dir / "nodes.jsonl", nodes_jsonl(g));

    std::string edges;
    for (const Edge& e : g.edges()) edges += std::to_string(e.a) + "," + std::to_string(e.b) + "\n";
    detail::write_text(dir / "edges.csv", edges);
    detail::write_text(dir / "embeddings.f32le", detail::f32_matrix_bytes(g.embeddings()));

    if (partition) {
        nlohmann::ordered_json s;
        s["train_pool"] = partition->train_pool;
        s["val"] = partition->val;
        s["test"] = partition->test;
        detail::write_text(dir / "splits.json", s.dump() + "\n");
    }
}

} // namespace graphkd
