#pragma once

// Two-layer GCN student with hand-written forward/backward passes.
//
//   H1  = ReLU(Â X W0 + b0)           (dropout on H1 in training mode)
//   H^f = Â H1 W1 + b1                (num_nodes x C)
//   Z   = softmax(H^f) row-wise
//
// Training minimises (1-α-β)·L_S + α·L_T + β·L_F over the bundle nodes.

#include <graphkd/error.hpp>
#include <graphkd/graph_store.hpp>
#include <graphkd/random.hpp>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace graphkd {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

inline constexpr double kLogClamp = 1e-12;

/// Â = D̃^{-1/2} (A + I) D̃^{-1/2}.
inline SparseMatrix normalized_adjacency(const TextGraph& g) {
    const std::size_t n = g.num_nodes();
    std::vector<double> inv_sqrt(n);
    for (NodeId v = 0; v < n; ++v) inv_sqrt[v] = 1.0 / std::sqrt(static_cast<double>(degree(g, v) + 1));
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(n + 2 * g.num_edges());
    for (NodeId v = 0; v < n; ++v) {
        const auto i = static_cast<Eigen::Index>(v);
        trip.emplace_back(i, i, inv_sqrt[v] * inv_sqrt[v]);
    }
    for (const Edge& e : g.edges()) {
        const double w = inv_sqrt[e.a] * inv_sqrt[e.b];
        trip.emplace_back(static_cast<Eigen::Index>(e.a), static_cast<Eigen::Index>(e.b), w);
        trip.emplace_back(static_cast<Eigen::Index>(e.b), static_cast<Eigen::Index>(e.a), w);
    }
    SparseMatrix a(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    a.setFromTriplets(trip.begin(), trip.end());
    return a;
}

/// Â together with the first propagation Â·X, which does not depend on the
/// parameters and is reused every epoch.
struct Propagation {
    SparseMatrix a_hat;
    Matrix ax;

    Propagation(SparseMatrix a, const Matrix& x) : a_hat(std::move(a)), ax(a_hat * x) {
        if (a_hat.rows() != x.rows()) fail(ErrorCode::ShapeMismatch, "adjacency and features disagree on node count");
    }

    static Propagation of(const TextGraph& g) { return Propagation(normalized_adjacency(g), g.embeddings()); }

    std::size_t num_nodes() const { return static_cast<std::size_t>(a_hat.rows()); }
};

struct GcnHyper {
    std::size_t d_hidden = 64;
    double dropout = 0.5;
};

struct GcnModel {
    Matrix w0;  // d_emb x d_hidden
    Vector b0;
    Matrix w1;  // d_hidden x C
    Vector b1;
    GcnHyper hyper;
    std::uint64_t version = 0;  // bumped whenever parameters change

    std::size_t d_emb() const { return static_cast<std::size_t>(w0.rows()); }
    std::size_t d_hidden() const { return static_cast<std::size_t>(w0.cols()); }
    std::size_t num_classes() const { return static_cast<std::size_t>(w1.cols()); }

    bool all_finite() const { return w0.allFinite() && b0.allFinite() && w1.allFinite() && b1.allFinite(); }

    static GcnModel zeros(std::size_t d_emb, std::size_t c, GcnHyper hyper = {}) {
        const auto h = static_cast<Eigen::Index>(hyper.d_hidden);
        return GcnModel{Matrix::Zero(static_cast<Eigen::Index>(d_emb), h), Vector::Zero(h),
                        Matrix::Zero(h, static_cast<Eigen::Index>(c)), Vector::Zero(static_cast<Eigen::Index>(c)),
                        hyper, 0};
    }

    /// Xavier-uniform weights, zero biases.
    static GcnModel xavier(std::size_t d_emb, std::size_t c, GcnHyper hyper, std::uint64_t seed) {
        GcnModel m = zeros(d_emb, c, hyper);
        Rng rng(derive_seed(seed, "gcn-init"));
        xavier_fill(m.w0, rng);
        xavier_fill(m.w1, rng);
        return m;
    }

    static void xavier_fill(Matrix& w, Rng& rng) {
        const double a = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
        for (Eigen::Index i = 0; i < w.rows(); ++i) {
            for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = rng.uniform(-a, a);
        }
    }
};

enum class Mode { Train, Eval };

struct ForwardCache {
    Matrix h1_pre;
    Matrix mask;  // inverted-dropout scale per entry; empty when no dropout applied
    Matrix h1;
    Matrix ah1;
    std::uint64_t version = 0;
    Mode mode = Mode::Eval;
};

struct ForwardResult {
    Matrix logits;  // H^f
    Matrix probs;   // Z
    ForwardCache cache;
};

inline Matrix softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        double s = 0.0;
        for (Eigen::Index j = 0; j < logits.cols(); ++j) {
            out(i, j) = std::exp(logits(i, j) - mx);
            s += out(i, j);
        }
        out.row(i) /= s;
    }
    return out;
}

/// Index of the largest entry; ties resolve to the lowest index.
template <class Row>
ClassId argmax(const Row& row) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < row.size(); ++j) {
        if (row(j) > row(best)) best = j;
    }
    return static_cast<ClassId>(best);
}

inline std::vector<ClassId> argmax_rows(const Matrix& m) {
    std::vector<ClassId> out(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) out[static_cast<std::size_t>(i)] = argmax(m.row(i));
    return out;
}

inline ForwardResult forward(const GcnModel& model, const Propagation& prop, Mode mode, Rng* rng = nullptr) {
    if (prop.ax.cols() != model.w0.rows()) {
        fail(ErrorCode::ShapeMismatch, "feature dim " + std::to_string(prop.ax.cols()) + " != model input dim " +
                                           std::to_string(model.w0.rows()));
    }
    if (model.w0.cols() != model.w1.rows() || model.b0.size() != model.w0.cols() ||
        model.b1.size() != model.w1.cols()) {
        fail(ErrorCode::ShapeMismatch, "inconsistent GCN parameter shapes");
    }
    ForwardResult r;
    ForwardCache& c = r.cache;
    c.version = model.version;
    c.mode = mode;
    c.h1_pre = (prop.ax * model.w0).rowwise() + model.b0.transpose();
    c.h1 = c.h1_pre.cwiseMax(0.0);
    if (mode == Mode::Train && model.hyper.dropout > 0.0) {
        if (rng == nullptr) fail(ErrorCode::InvalidConfig, "training-mode dropout requires a random stream");
        const double keep = 1.0 - model.hyper.dropout;
        c.mask.resize(c.h1.rows(), c.h1.cols());
        for (Eigen::Index i = 0; i < c.mask.rows(); ++i) {
            for (Eigen::Index j = 0; j < c.mask.cols(); ++j) c.mask(i, j) = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
        }
        c.h1 = c.h1.cwiseProduct(c.mask);
    }
    c.ah1 = prop.a_hat * c.h1;
    r.logits = (c.ah1 * model.w1).rowwise() + model.b1.transpose();
    r.probs = softmax_rows(r.logits);
    return r;
}

inline ForwardResult forward(const GcnModel& model, const SparseMatrix& a_hat, const Matrix& x, Mode mode,
                             Rng* rng = nullptr) {
    return forward(model, Propagation(a_hat, x), mode, rng);
}

// ---------------------------------------------------------------------------
// Losses

inline Vector teacher_distribution(const Vector& logits, double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) fail(ErrorCode::BadWeights, "temperature must be positive and finite");
    if (logits.size() == 0 || !logits.allFinite()) fail(ErrorCode::NonFiniteInput, "teacher logits must be finite");
    const Vector scaled = logits / tau;
    const double mx = scaled.maxCoeff();
    Vector p = (scaled.array() - mx).exp().matrix();
    return p / p.sum();
}

struct LossWeights {
    double alpha = 0.0;
    double beta = 0.0;
    double tau = 1.0;
};

inline void check_weights(double alpha, double beta) {
    if (!(alpha >= 0.0) || !(beta >= 0.0) || !(alpha + beta < 1.0)) {
        fail(ErrorCode::BadWeights, "need alpha >= 0, beta >= 0 and alpha + beta < 1 (got alpha=" +
                                        std::to_string(alpha) + ", beta=" + std::to_string(beta) + ")");
    }
}

/// Supervision for one training run over the working set V_S. Row i of
/// `teacher_probs` / `rationale_targets` belongs to `nodes[i]`.
struct TrainBundle {
    std::vector<NodeId> nodes;
    std::vector<ClassId> hard_labels;
    std::optional<Matrix> teacher_probs;
    std::optional<Matrix> rationale_targets;
    LossWeights weights;

    std::size_t size() const { return nodes.size(); }

    void validate(std::size_t num_nodes, std::size_t num_classes) const {
        check_weights(weights.alpha, weights.beta);
        if (nodes.empty()) fail(ErrorCode::InvalidConfig, "training bundle is empty");
        if (hard_labels.size() != nodes.size()) fail(ErrorCode::ShapeMismatch, "one hard label per bundle node required");
        std::vector<NodeId> sorted = nodes;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
            fail(ErrorCode::InvalidConfig, "bundle node ids must be distinct");
        }
        if (sorted.back() >= num_nodes) fail(ErrorCode::InvalidNode, "bundle node outside graph");
        for (ClassId y : hard_labels) {
            if (y < 0 || static_cast<std::size_t>(y) >= num_classes) fail(ErrorCode::BadLabel, "hard label out of range");
        }
        const auto rows = static_cast<Eigen::Index>(nodes.size());
        const auto c = static_cast<Eigen::Index>(num_classes);
        if (teacher_probs) {
            if (teacher_probs->rows() != rows || teacher_probs->cols() != c) {
                fail(ErrorCode::DimMismatch, "teacher_probs must be |V_S| x C");
            }
            for (Eigen::Index i = 0; i < rows; ++i) {
                if (std::abs(teacher_probs->row(i).sum() - 1.0) > 1e-6 || teacher_probs->row(i).minCoeff() < 0.0) {
                    fail(ErrorCode::NonFiniteInput, "teacher distribution row " + std::to_string(i) + " is not a distribution");
                }
            }
        }
        if (weights.alpha > 0.0 && !teacher_probs) fail(ErrorCode::MissingTeacherProbs, "alpha > 0 without teacher_probs");
        if (rationale_targets) {
            if (rationale_targets->rows() != rows || rationale_targets->cols() != c) {
                fail(ErrorCode::DimMismatch, "rationale_targets must be |V_S| x C");
            }
        }
        if (weights.beta > 0.0 && !rationale_targets) {
            fail(ErrorCode::MissingRationaleTarget, "beta > 0 without rationale_targets");
        }
    }
};

inline double loss_student(const Matrix& probs, const TrainBundle& bundle) {
    if (bundle.hard_labels.size() != bundle.nodes.size()) fail(ErrorCode::ShapeMismatch, "hard labels missing");
    double s = 0.0;
    for (std::size_t i = 0; i < bundle.size(); ++i) {
        const double z = probs(static_cast<Eigen::Index>(bundle.nodes[i]), bundle.hard_labels[i]);
        s -= std::log(std::max(z, kLogClamp));
    }
    return s / static_cast<double>(bundle.size());
}

inline double loss_teacher(const Matrix& probs, const TrainBundle& bundle) {
    if (!bundle.teacher_probs) fail(ErrorCode::MissingTeacherProbs, "bundle carries no teacher distribution");
    const Matrix& p = *bundle.teacher_probs;
    if (p.cols() != probs.cols()) fail(ErrorCode::DimMismatch, "teacher distribution width != C");
    double s = 0.0;
    for (std::size_t i = 0; i < bundle.size(); ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        const auto v = static_cast<Eigen::Index>(bundle.nodes[i]);
        for (Eigen::Index j = 0; j < p.cols(); ++j) {
            if (p(row, j) == 0.0) continue;
            s -= p(row, j) * std::log(std::max(probs(v, j), kLogClamp));
        }
    }
    return s / static_cast<double>(bundle.size());
}

/// Node mean of the per-dimension mean squared difference.
inline double loss_feature(const Matrix& logits, const TrainBundle& bundle) {
    if (!bundle.rationale_targets) fail(ErrorCode::MissingRationaleTarget, "bundle carries no rationale targets");
    const Matrix& r = *bundle.rationale_targets;
    if (r.cols() != logits.cols()) fail(ErrorCode::DimMismatch, "rationale target width != C");
    double s = 0.0;
    for (std::size_t i = 0; i < bundle.size(); ++i) {
        const auto diff = logits.row(static_cast<Eigen::Index>(bundle.nodes[i])) - r.row(static_cast<Eigen::Index>(i));
        s += diff.squaredNorm() / static_cast<double>(logits.cols());
    }
    return s / static_cast<double>(bundle.size());
}

inline double loss_total(double l_s, double l_t, double l_f, double alpha, double beta) {
    check_weights(alpha, beta);
    return (1.0 - alpha - beta) * l_s + alpha * l_t + beta * l_f;
}

struct LossBreakdown {
    double total = 0.0;
    double student = 0.0;
    double teacher = 0.0;
    double feature = 0.0;
};

/// All terms available in the bundle; terms whose weight is zero are still
/// reported when their targets exist.
inline LossBreakdown compute_losses(const ForwardResult& fr, const TrainBundle& bundle) {
    LossBreakdown l;
    l.student = loss_student(fr.probs, bundle);
    if (bundle.teacher_probs) l.teacher = loss_teacher(fr.probs, bundle);
    if (bundle.rationale_targets) l.feature = loss_feature(fr.logits, bundle);
    l.total = loss_total(l.student, l.teacher, l.feature, bundle.weights.alpha, bundle.weights.beta);
    return l;
}

// ---------------------------------------------------------------------------
// Gradients

struct Gradients {
    Matrix w0;
    Vector b0;
    Matrix w1;
    Vector b1;
};

/// d loss_total / d H^f. Rows outside the bundle are zero.
inline Matrix logit_gradient(const ForwardResult& fr, const TrainBundle& bundle) {
    const double alpha = bundle.weights.alpha;
    const double beta = bundle.weights.beta;
    const double m = static_cast<double>(bundle.size());
    const auto c = fr.probs.cols();
    Matrix g = Matrix::Zero(fr.probs.rows(), c);
    for (std::size_t i = 0; i < bundle.size(); ++i) {
        const auto v = static_cast<Eigen::Index>(bundle.nodes[i]);
        const auto row = static_cast<Eigen::Index>(i);
        const auto z = fr.probs.row(v);
        auto out = g.row(v);
        out += ((1.0 - alpha - beta) / m) * z;
        out(bundle.hard_labels[i]) -= (1.0 - alpha - beta) / m;
        if (alpha > 0.0) {
            const auto p = bundle.teacher_probs->row(row);
            out += (alpha / m) * (p.sum() * z - p);
        }
        if (beta > 0.0) {
            out += (beta / m) * (2.0 / static_cast<double>(c)) *
                   (fr.logits.row(v) - bundle.rationale_targets->row(row));
        }
    }
    return g;
}

inline Gradients backward(const GcnModel& model, const Propagation& prop, const ForwardResult& fr,
                          const TrainBundle& bundle) {
    const ForwardCache& c = fr.cache;
    if (c.version != model.version) {
        fail(ErrorCode::StaleCache, "forward cache is from parameter version " + std::to_string(c.version) +
                                        ", model is at " + std::to_string(model.version));
    }
    if (c.h1.rows() != prop.a_hat.rows() || c.h1.cols() != model.w0.cols()) {
        fail(ErrorCode::StaleCache, "forward cache shape does not match model");
    }
    const Matrix g_logits = logit_gradient(fr, bundle);
    Gradients grads;
    grads.w1 = c.ah1.transpose() * g_logits;
    grads.b1 = g_logits.colwise().sum().transpose();
    const Matrix g_ah1 = g_logits * model.w1.transpose();
    Matrix g_h1 = prop.a_hat.transpose() * g_ah1;
    if (c.mask.size() != 0) g_h1 = g_h1.cwiseProduct(c.mask);
    const Matrix g_pre = g_h1.cwiseProduct((c.h1_pre.array() > 0.0).cast<double>().matrix());
    grads.w0 = prop.ax.transpose() * g_pre;
    grads.b0 = g_pre.colwise().sum().transpose();
    return grads;
}

// ---------------------------------------------------------------------------
// Optimiser and training loop

struct AdamConfig {
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 5e-4;
};

/// Adam with coupled L2 decay. Each parameter tensor owns a moment slot.
class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    void begin_step() { ++t_; }

    template <class Param>
    void update(std::size_t slot, Param& p, Param g, bool decay) {
        if (decay && cfg_.weight_decay > 0.0) g += cfg_.weight_decay * p;
        if (slot >= m_.size()) {
            m_.resize(slot + 1);
            v_.resize(slot + 1);
        }
        Matrix& m = m_[slot];
        Matrix& v = v_[slot];
        if (m.size() == 0) {
            m = Matrix::Zero(g.rows(), g.cols());
            v = Matrix::Zero(g.rows(), g.cols());
        }
        m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
        v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        const Matrix step = ((cfg_.lr / c1) * m.array() / ((v.array() / c2).sqrt() + cfg_.eps)).matrix();
        p -= step;
    }

    /// Weight matrices are decayed, biases are not.
    void step(GcnModel& model, const Gradients& grads) {
        begin_step();
        update(0, model.w0, grads.w0, true);
        update(1, model.b0, grads.b0, false);
        update(2, model.w1, grads.w1, true);
        update(3, model.b1, grads.b1, false);
        ++model.version;
    }

private:
    AdamConfig cfg_;
    std::uint64_t t_ = 0;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
};

struct TrainOptions {
    std::size_t epochs = 300;
    std::size_t patience = 30;
    AdamConfig adam;
    std::uint64_t seed = 0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    LossBreakdown loss;
    double val_acc = 0.0;
};

struct TrainResult {
    GcnModel model;  // best-on-validation parameters
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_val_acc = 0.0;
};

inline double accuracy(const Matrix& probs, std::span<const NodeId> nodes, std::span<const ClassId> labels) {
    if (nodes.empty()) return 0.0;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        hit += argmax(probs.row(static_cast<Eigen::Index>(nodes[i]))) == labels[i] ? 1 : 0;
    }
    return static_cast<double>(hit) / static_cast<double>(nodes.size());
}

/// Full-batch Adam training with early stopping on validation accuracy
/// (ties broken by lower validation cross-entropy). Returns the best
/// checkpoint, or the final one when `val_nodes` is empty.
inline TrainResult train(GcnModel model, const Propagation& prop, const TrainBundle& bundle,
                         std::span<const NodeId> val_nodes, std::span<const ClassId> val_labels,
                         const TrainOptions& opt) {
    bundle.validate(prop.num_nodes(), model.num_classes());
    if (val_nodes.size() != val_labels.size()) fail(ErrorCode::ShapeMismatch, "one label per validation node");
    TrainResult result{model, {}, 0, 0.0};
    if (opt.epochs == 0) return result;

    Rng rng(derive_seed(opt.seed, "dropout"));
    Adam adam(opt.adam);
    double best_val_loss = std::numeric_limits<double>::infinity();
    bool have_best = false;
    std::size_t since_best = 0;

    for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
        const ForwardResult fr = forward(model, prop, Mode::Train, &rng);
        const LossBreakdown loss = compute_losses(fr, bundle);
        if (!std::isfinite(loss.total)) {
            fail(ErrorCode::Diverged, "non-finite loss at epoch " + std::to_string(epoch));
        }
        adam.step(model, backward(model, prop, fr, bundle));
        if (!model.all_finite()) fail(ErrorCode::Diverged, "non-finite parameters at epoch " + std::to_string(epoch));

        const ForwardResult ev = forward(model, prop, Mode::Eval);
        const double val_acc = accuracy(ev.probs, val_nodes, val_labels);
        double val_loss = 0.0;
        for (std::size_t i = 0; i < val_nodes.size(); ++i) {
            val_loss -= std::log(std::max(ev.probs(static_cast<Eigen::Index>(val_nodes[i]), val_labels[i]), kLogClamp));
        }
        result.history.push_back({epoch, loss, val_acc});

        if (val_nodes.empty()) {
            result.model = model;
            result.best_epoch = epoch;
            continue;
        }
        if (!have_best || val_acc > result.best_val_acc ||
            (val_acc == result.best_val_acc && val_loss < best_val_loss)) {
            have_best = true;
            result.model = model;
            result.best_epoch = epoch;
            result.best_val_acc = val_acc;
            best_val_loss = val_loss;
            since_best = 0;
        } else if (++since_best >= opt.patience) {
            break;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints and history
//
// Checkpoint layout: "GKDM" magic, then u32le version, d_emb, d_hidden, C,
// followed by W0, b0, W1, b1 as row-major f32le.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const GcnModel& model, const fs::path& path) {
    std::string out = "GKDM";
    auto put_u32 = [&out](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    };
    put_u32(kCheckpointVersion);
    put_u32(static_cast<std::uint32_t>(model.d_emb()));
    put_u32(static_cast<std::uint32_t>(model.d_hidden()));
    put_u32(static_cast<std::uint32_t>(model.num_classes()));
    out += detail::f32_matrix_bytes(model.w0);
    out += detail::f32_matrix_bytes(model.b0.transpose());
    out += detail::f32_matrix_bytes(model.w1);
    out += detail::f32_matrix_bytes(model.b1.transpose());
    detail::write_text(path, out);
}

inline GcnModel load_checkpoint(const fs::path& path) {
    const std::string bytes = detail::read_text(path);
    if (bytes.size() < 20 || bytes.compare(0, 4, "GKDM") != 0) fail(ErrorCode::ShapeMismatch, "not a model checkpoint: " + path.string());
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    auto get_u32 = [p](std::size_t off) {
        return static_cast<std::uint32_t>(p[off]) | (static_cast<std::uint32_t>(p[off + 1]) << 8) |
               (static_cast<std::uint32_t>(p[off + 2]) << 16) | (static_cast<std::uint32_t>(p[off + 3]) << 24);
    };
    if (get_u32(4) != kCheckpointVersion) fail(ErrorCode::ShapeMismatch, "unsupported checkpoint version");
    const std::size_t d = get_u32(8), h = get_u32(12), c = get_u32(16);
    const std::size_t floats = d * h + h + h * c + c;
    if (bytes.size() != 20 + 4 * floats) fail(ErrorCode::ShapeMismatch, "checkpoint payload size mismatch");
    GcnHyper hyper;
    hyper.d_hidden = h;
    GcnModel m = GcnModel::zeros(d, c, hyper);
    std::size_t off = 20;
    auto fill = [&](auto& target, std::size_t rows, std::size_t cols) {
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) {
                target(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = detail::load_f32le(p + off);
                off += 4;
            }
        }
    };
    fill(m.w0, d, h);
    Matrix b0(1, static_cast<Eigen::Index>(h));
    fill(b0, 1, h);
    m.b0 = b0.transpose();
    fill(m.w1, h, c);
    Matrix b1(1, static_cast<Eigen::Index>(c));
    fill(b1, 1, c);
    m.b1 = b1.transpose();
    return m;
}

inline std::string history_csv(std::span<const EpochRecord> history) {
    std::ostringstream out;
    out.precision(17);
    out << "epoch,loss_total,loss_S,loss_T,loss_F,val_acc\n";
    for (const EpochRecord& r : history) {
        out << r.epoch << ',' << r.loss.total << ',' << r.loss.student << ',' << r.loss.teacher << ','
            << r.loss.feature << ',' << r.val_acc << '\n';
    }
    return out.str();
}

} // namespace graphkd
