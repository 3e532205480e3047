#pragma once

#include <graphkd/gnn_engine.hpp>
#include <graphkd/graph_store.hpp>
#include <graphkd/random.hpp>

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

namespace testutil {

namespace fs = std::filesystem;
using namespace graphkd;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "graphkd") {
        static std::atomic<int> counter{0};
        path_ = fs::temp_directory_path() /
                (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& s) const { return path_ / s; }

private:
    fs::path path_;
};

inline std::vector<std::string> class_names(std::size_t c) {
    std::vector<std::string> out;
    for (std::size_t k = 0; k < c; ++k) out.push_back("class_" + std::to_string(k));
    return out;
}

/// Graph with given labels, standard-normal features and the listed edges.
inline TextGraph make_graph(std::size_t c, const std::vector<ClassId>& labels, const std::vector<Edge>& edges,
                            std::size_t dim = 4, std::uint64_t seed = 7) {
    Rng rng(seed);
    Matrix x(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    std::vector<std::optional<ClassId>> l(labels.begin(), labels.end());
    std::vector<std::optional<std::string>> texts(labels.size());
    for (std::size_t v = 0; v < labels.size(); ++v) texts[v] = "node " + std::to_string(v);
    return TextGraph(class_names(c), edges, std::move(x), std::move(l), std::move(texts));
}

/// Erdos-Renyi graph with random labels and features.
inline TextGraph random_graph(Rng& rng, std::size_t n, std::size_t c, double p, std::size_t dim) {
    std::vector<ClassId> labels(n);
    for (auto& l : labels) l = static_cast<ClassId>(rng.below(c));
    std::vector<Edge> edges;
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = a + 1; b < n; ++b) {
            if (rng.bernoulli(p)) edges.push_back({a, b});
        }
    }
    return make_graph(c, labels, edges, dim, rng.next_u64());
}

inline GcnModel random_model(Rng& rng, std::size_t d, std::size_t h, std::size_t c, double scale = 1.0) {
    GcnModel m = GcnModel::zeros(d, c, GcnHyper{h, 0.0});
    for (auto* w : {&m.w0, &m.w1}) {
        for (Eigen::Index i = 0; i < w->size(); ++i) w->data()[i] = scale * rng.normal();
    }
    for (auto* b : {&m.b0, &m.b1}) {
        for (Eigen::Index i = 0; i < b->size(); ++i) b->data()[i] = 0.5 * scale * rng.normal();
    }
    return m;
}

} // namespace testutil
