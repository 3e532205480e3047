#pragma once

// Graph-LLM active learning. Each stage scores the unlabeled pool by
//
//   S = RS(p, desc) + RS(HR, asc) + RS(D, asc) + RS(Δh, asc over V_c)
//
// where p is the student's top-class probability, HR the homophily ratio
// under the student's own labels, D the degree and Δh the change in the
// neighbours' summed predictive entropy when the node's edges are removed.
// The top b nodes per pseudo-class are sent to the teacher, whose answers
// become their training labels.

#include <graphkd/error.hpp>
#include <graphkd/gnn_engine.hpp>
#include <graphkd/graph_store.hpp>
#include <graphkd/random.hpp>
#include <graphkd/teacher_bridge.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace graphkd {

enum class RankOrder { Ascending, Descending };

/// Normalised rank: position i (0-based) in the sorted order scores i/n.
/// Ties are broken by ascending node id in either order. `ids` may be empty,
/// in which case positions act as ids.
inline std::vector<double> rank_score(std::span<const double> values, std::span<const NodeId> ids, RankOrder order) {
    const std::size_t n = values.size();
    if (n == 0) fail(ErrorCode::EmptyPool, "cannot rank an empty pool");
    if (!ids.empty() && ids.size() != n) fail(ErrorCode::ShapeMismatch, "one id per ranked value");
    auto id = [&](std::size_t i) { return ids.empty() ? static_cast<NodeId>(i) : ids[i]; };
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (values[a] != values[b]) return order == RankOrder::Ascending ? values[a] < values[b] : values[a] > values[b];
        return id(a) < id(b);
    });
    std::vector<double> scores(n);
    for (std::size_t r = 0; r < n; ++r) scores[idx[r]] = static_cast<double>(r) / static_cast<double>(n);
    return scores;
}

inline std::vector<double> rank_score(std::span<const double> values, RankOrder order) {
    return rank_score(values, {}, order);
}

struct ScoreRow {
    NodeId node = 0;
    ClassId pseudo_class = 0;
    double p = 0.0;
    double hr = 0.0;
    std::size_t degree = 0;
    double rs_p = 0.0;
    double rs_hr = 0.0;
    double rs_d = 0.0;
    double s_gl = 0.0;
    double entropy_change = 0.0;
    double s_e = 0.0;
    double s_total = 0.0;
    bool candidate = false;
};

using ScoreTable = std::vector<ScoreRow>;

/// S_GL over `pool` (the current V_u).
inline ScoreTable score_gl(const Matrix& probs, const TextGraph& g, std::span<const ClassId> gnn_labels,
                           std::span<const NodeId> pool) {
    if (pool.empty()) fail(ErrorCode::EmptyPool, "unlabeled pool is empty");
    if (static_cast<std::size_t>(probs.rows()) != g.num_nodes() || gnn_labels.size() != g.num_nodes()) {
        fail(ErrorCode::ShapeMismatch, "probabilities and pseudo-labels must cover every node");
    }
    const std::size_t n = pool.size();
    ScoreTable table(n);
    std::vector<double> p(n), hr(n), deg(n);
    for (std::size_t i = 0; i < n; ++i) {
        const NodeId v = pool[i];
        ScoreRow& r = table[i];
        r.node = v;
        r.pseudo_class = gnn_labels[v];
        r.p = probs.row(static_cast<Eigen::Index>(v)).maxCoeff();
        r.hr = homophily_ratio(g, v, gnn_labels);
        r.degree = degree(g, v);
        p[i] = r.p;
        hr[i] = r.hr;
        deg[i] = static_cast<double>(r.degree);
    }
    const auto rs_p = rank_score(p, pool, RankOrder::Descending);
    const auto rs_hr = rank_score(hr, pool, RankOrder::Ascending);
    const auto rs_d = rank_score(deg, pool, RankOrder::Ascending);
    for (std::size_t i = 0; i < n; ++i) {
        table[i].rs_p = rs_p[i];
        table[i].rs_hr = rs_hr[i];
        table[i].rs_d = rs_d[i];
        table[i].s_gl = rs_p[i] + rs_hr[i] + rs_d[i];
        table[i].s_total = table[i].s_gl;
    }
    return table;
}

inline double shannon_entropy(const auto& row) {
    double h = 0.0;
    for (Eigen::Index j = 0; j < row.size(); ++j) {
        if (row(j) > 0.0) h -= row(j) * std::log(row(j));
    }
    return h;
}

/// Evaluates the neighbourhood entropy change of edge ablation locally: only
/// the rows of Â touched by removing v's edges are recomputed, so a probe
/// costs O(two-hop neighbourhood) instead of a full forward pass.
class EntropyProbe {
public:
    /// `probs` must be the eval-mode output of `model` on `g`.
    EntropyProbe(const GcnModel& model, const TextGraph& g, Matrix probs)
        : model_(model), g_(g), probs_(std::move(probs)), xw0_(g.embeddings() * model.w0) {
        if (static_cast<std::size_t>(probs_.rows()) != g.num_nodes()) {
            fail(ErrorCode::ShapeMismatch, "probe probabilities must cover every node");
        }
    }

    EntropyProbe(const GcnModel& model, const TextGraph& g, const Propagation& prop)
        : EntropyProbe(model, g, forward(model, prop, Mode::Eval).probs) {}

    const Matrix& probs() const { return probs_; }

    /// h(neighbours | v's edges removed) - h(neighbours), entropies in nats,
    /// summed over v's neighbours.
    double reduction(NodeId v) const {
        const auto nbrs = g_.neighbors(v);
        if (nbrs.empty()) fail(ErrorCode::IsolatedNode, "node " + std::to_string(v) + " has no neighbours");
        const std::set<NodeId> touched(nbrs.begin(), nbrs.end());

        auto deg_tilde = [&](NodeId w) -> double {
            if (w == v) return 1.0;
            return static_cast<double>(degree(g_, w) - (touched.count(w) ? 1 : 0) + 1);
        };
        std::unordered_map<NodeId, Vector> hidden;
        auto h1 = [&](NodeId w) -> const Vector& {
            auto it = hidden.find(w);
            if (it != hidden.end()) return it->second;
            const double dw = deg_tilde(w);
            Vector acc = xw0_.row(static_cast<Eigen::Index>(w)).transpose() / dw;
            for (NodeId x : g_.neighbors(w)) {
                if (x == v || w == v) continue;
                acc += xw0_.row(static_cast<Eigen::Index>(x)).transpose() / std::sqrt(dw * deg_tilde(x));
            }
            acc = (acc + model_.b0).cwiseMax(0.0);
            return hidden.emplace(w, std::move(acc)).first->second;
        };

        double baseline = 0.0;
        double ablated = 0.0;
        for (NodeId u : nbrs) {
            baseline += shannon_entropy(probs_.row(static_cast<Eigen::Index>(u)));
            const double du = deg_tilde(u);
            Vector agg = h1(u) / du;
            for (NodeId w : g_.neighbors(u)) {
                if (w == v) continue;
                agg += h1(w) / std::sqrt(du * deg_tilde(w));
            }
            const Vector logits = model_.w1.transpose() * agg + model_.b1;
            const Vector z = softmax_rows(logits.transpose()).row(0).transpose();
            ablated += shannon_entropy(z);
        }
        return ablated - baseline;
    }

private:
    const GcnModel& model_;
    const TextGraph& g_;
    Matrix probs_;
    Matrix xw0_;
};

inline double entropy_reduction(const GcnModel& model, const TextGraph& g, const Propagation& prop, NodeId v) {
    return EntropyProbe(model, g, prop).reduction(v);
}

/// Adds S_E. The candidate set V_c is the top `candidate_cap` rows by S_GL
/// among non-isolated rows with `eligible[i]` set; only candidates receive
/// S_E and only candidates may be selected.
inline ScoreTable score_total(ScoreTable table, const TextGraph& g, const EntropyProbe& probe,
                              std::size_t candidate_cap, std::span<const char> eligible = {}) {
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < table.size(); ++i) {
        table[i].candidate = false;
        table[i].s_e = 0.0;
        table[i].s_total = table[i].s_gl;
        if (!eligible.empty() && !eligible[i]) continue;
        if (degree(g, table[i].node) == 0) continue;
        order.push_back(i);
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (table[a].s_gl != table[b].s_gl) return table[a].s_gl > table[b].s_gl;
        return table[a].node < table[b].node;
    });
    if (order.size() > candidate_cap) order.resize(candidate_cap);
    if (order.empty()) return table;

    std::vector<double> change(order.size());
    std::vector<NodeId> ids(order.size());
    for (std::size_t k = 0; k < order.size(); ++k) {
        ScoreRow& r = table[order[k]];
        r.candidate = true;
        r.entropy_change = probe.reduction(r.node);
        change[k] = r.entropy_change;
        ids[k] = r.node;
    }
    const auto s_e = rank_score(change, ids, RankOrder::Ascending);
    for (std::size_t k = 0; k < order.size(); ++k) {
        ScoreRow& r = table[order[k]];
        r.s_e = s_e[k];
        r.s_total = r.s_gl + r.s_e;
    }
    return table;
}

// ---------------------------------------------------------------------------
// Selection state

struct Selection {
    NodeId node = 0;
    ClassId pseudo_class = 0;
    ClassId teacher_answer = 0;
    std::size_t stage = 0;
    ScoreRow scores;
};

struct SelectionState {
    std::vector<NodeId> labeled;     // V_l
    std::vector<NodeId> train_pool;  // nodes eligible for V_u
    std::vector<Selection> selected;
    std::set<NodeId> excluded;  // teacher could not answer
    std::size_t num_classes = 0;
    std::size_t budget = 3;      // B, per class
    std::size_t stage_size = 1;  // b, per class and stage
    std::size_t stage_index = 0;

    std::size_t class_total(ClassId c) const {
        return static_cast<std::size_t>(
            std::count_if(selected.begin(), selected.end(), [c](const Selection& s) { return s.pseudo_class == c; }));
    }

    std::size_t class_in_stage(ClassId c, std::size_t stage) const {
        return static_cast<std::size_t>(std::count_if(selected.begin(), selected.end(), [&](const Selection& s) {
            return s.pseudo_class == c && s.stage == stage;
        }));
    }

    /// Picks class c may still receive in the given stage.
    std::size_t class_room(ClassId c, std::size_t stage) const {
        const std::size_t total = class_total(c);
        const std::size_t taken = class_in_stage(c, stage);
        if (total >= budget || taken >= stage_size) return 0;
        return std::min(stage_size - taken, budget - total);
    }

    bool exhausted() const { return selected.size() >= budget * num_classes; }

    bool contains(NodeId v) const {
        return std::binary_search(labeled.begin(), labeled.end(), v) || excluded.count(v) ||
               std::any_of(selected.begin(), selected.end(), [v](const Selection& s) { return s.node == v; });
    }

    /// Current V_u.
    std::vector<NodeId> unlabeled() const {
        std::vector<NodeId> out;
        for (NodeId v : train_pool) {
            if (!contains(v)) out.push_back(v);
        }
        return out;
    }

    /// V_S = V_l followed by selections in order.
    std::vector<NodeId> working_set() const {
        std::vector<NodeId> out = labeled;
        for (const auto& s : selected) out.push_back(s.node);
        return out;
    }
};

struct StagePick {
    std::size_t row = 0;  // index into the score table
    NodeId node = 0;
    ClassId pseudo_class = 0;
};

/// Top candidates by S per pseudo-class, up to each class's room in the
/// current stage.
inline std::vector<StagePick> select_stage(const SelectionState& state, const ScoreTable& table) {
    if (state.exhausted()) fail(ErrorCode::BudgetExhausted, "selection budget already met");
    std::vector<StagePick> picks;
    for (ClassId c = 0; c < static_cast<ClassId>(state.num_classes); ++c) {
        const std::size_t room = state.class_room(c, state.stage_index);
        if (room == 0) continue;
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < table.size(); ++i) {
            const ScoreRow& r = table[i];
            if (r.candidate && r.pseudo_class == c && !state.contains(r.node)) rows.push_back(i);
        }
        std::sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
            if (table[a].s_total != table[b].s_total) return table[a].s_total > table[b].s_total;
            return table[a].node < table[b].node;
        });
        for (std::size_t k = 0; k < std::min(room, rows.size()); ++k) {
            picks.push_back({rows[k], table[rows[k]].node, c});
        }
    }
    if (picks.empty()) fail(ErrorCode::NoCandidates, "no class with remaining budget has a candidate");
    return picks;
}

// ---------------------------------------------------------------------------
// The iterative loop

enum class AlMode { GraphLlm, Random, AllAtOnce };

struct LoopConfig {
    DistillConfig distill;
    bool use_al = true;
    AlMode mode = AlMode::GraphLlm;
    std::size_t budget = 3;
    std::size_t stage_size = 1;
    std::size_t candidate_factor = 10;  // |V_c| = factor * b * C
    GcnHyper gcn;
    TrainOptions train;
    AlignHyper align;
    std::uint64_t seed = 0;
};

struct StageLog {
    std::size_t stage = 0;
    std::size_t working_set_size = 0;
    double best_val_acc = 0.0;
    std::size_t best_epoch = 0;
};

struct ActiveResult {
    TrainResult final;
    SelectionState state;
    TrainBundle final_bundle;
    std::vector<StageLog> stages;
    std::map<NodeId, TeacherRecord> records;
    std::optional<AlignMlp> align_mlp;
};

namespace detail {

inline std::string node_text(const TextGraph& g, NodeId v) {
    const auto& t = g.texts()[v];
    return t ? *t : std::string{};
}

inline void query_into(TeacherSession& session, const TextGraph& g, std::span<const NodeId> nodes,
                       std::map<NodeId, TeacherRecord>& records, std::vector<NodeId>* failed) {
    std::vector<std::string> texts;
    texts.reserve(nodes.size());
    for (NodeId v : nodes) texts.push_back(node_text(g, v));
    const auto out = session.query_many(nodes, texts);
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (out[i]) {
            records[nodes[i]] = *out[i];
        } else if (failed) {
            failed->push_back(nodes[i]);
        }
    }
}

} // namespace detail

/// Train on V_S, score V_u, query the teacher for the stage picks, add them
/// and repeat until B nodes per class are selected or no candidates remain.
/// The model is re-initialised from the seed for every stage, and the model
/// from the last training run (on the full V_S) is returned.
inline ActiveResult run_active_loop(const TextGraph& g, const Propagation& prop, const SplitSpec& split,
                                    TeacherSession* session, const LoopConfig& cfg) {
    if (cfg.budget < 1 || cfg.stage_size < 1) fail(ErrorCode::InvalidConfig, "budget and stage size must be >= 1");
    check_weights(cfg.distill.alpha, cfg.distill.beta);
    if ((cfg.use_al || cfg.distill.needs_teacher()) && session == nullptr) {
        fail(ErrorCode::InvalidConfig, "teacher required for distillation or active learning");
    }
    const std::size_t c = g.num_classes();

    ActiveResult res;
    SelectionState& state = res.state;
    state.labeled = split.labeled;
    std::sort(state.labeled.begin(), state.labeled.end());
    state.train_pool = split.train_pool;
    state.num_classes = c;
    state.budget = cfg.budget;
    state.stage_size = cfg.mode == AlMode::AllAtOnce ? cfg.budget : cfg.stage_size;

    std::vector<ClassId> val_labels;
    std::vector<NodeId> val_nodes;
    for (NodeId v : split.val) {
        if (const auto l = g.labels()[v]) {
            val_nodes.push_back(v);
            val_labels.push_back(*l);
        }
    }
    std::vector<ClassId> hard;
    for (NodeId v : state.labeled) {
        const auto l = g.labels()[v];
        if (!l) fail(ErrorCode::UnlabeledNode, "few-shot node " + std::to_string(v) + " has no label");
        hard.push_back(*l);
    }

    if (cfg.distill.needs_teacher()) detail::query_into(*session, g, state.labeled, res.records, nullptr);
    if (cfg.distill.use_rationales && cfg.distill.align == AlignMode::Mlp) {
        Matrix x_l(static_cast<Eigen::Index>(state.labeled.size()), static_cast<Eigen::Index>(g.emb_dim()));
        for (std::size_t i = 0; i < state.labeled.size(); ++i) {
            x_l.row(static_cast<Eigen::Index>(i)) = g.embeddings().row(static_cast<Eigen::Index>(state.labeled[i]));
        }
        AlignHyper ah = cfg.align;
        ah.seed = cfg.seed;
        res.align_mlp = train_align_mlp(x_l, hard, c, ah);
    }

    TrainOptions topt = cfg.train;
    topt.seed = cfg.seed;
    Rng random_al(derive_seed(cfg.seed, "random-selection"));

    while (true) {
        const std::vector<NodeId> vs = state.working_set();
        std::vector<ClassId> labels = hard;
        for (const auto& s : state.selected) labels.push_back(s.teacher_answer);
        res.final_bundle = assemble_bundle(g, vs, labels, res.records, cfg.distill,
                                           res.align_mlp ? &*res.align_mlp : nullptr);
        res.final = train(GcnModel::xavier(g.emb_dim(), c, cfg.gcn, cfg.seed), prop, res.final_bundle, val_nodes,
                          val_labels, topt);
        res.stages.push_back({state.stage_index, vs.size(), res.final.best_val_acc, res.final.best_epoch});

        if (!cfg.use_al || state.exhausted()) break;

        const EntropyProbe probe(res.final.model, g, prop);
        const std::vector<ClassId> pseudo = argmax_rows(probe.probs());
        const std::vector<NodeId> pool = state.unlabeled();
        if (pool.empty()) break;
        ScoreTable table = score_gl(probe.probs(), g, pseudo, pool);
        bool progressed = false;

        // Picks whose teacher response is unusable are excluded and replaced
        // by the next-ranked candidate of the same class.
        while (!state.exhausted()) {
            std::vector<char> eligible(table.size(), 0);
            bool any = false;
            for (std::size_t i = 0; i < table.size(); ++i) {
                eligible[i] = !state.contains(table[i].node) && state.class_room(table[i].pseudo_class, state.stage_index) > 0;
                any = any || eligible[i];
            }
            if (!any) break;

            std::vector<StagePick> picks;
            if (cfg.mode == AlMode::Random) {
                for (auto& row : table) row.candidate = false;
                for (ClassId k = 0; k < static_cast<ClassId>(c); ++k) {
                    std::vector<std::size_t> rows;
                    for (std::size_t i = 0; i < table.size(); ++i) {
                        if (eligible[i] && table[i].pseudo_class == k && table[i].degree > 0) rows.push_back(i);
                    }
                    random_al.shuffle(std::span<std::size_t>(rows));
                    const std::size_t room = state.class_room(k, state.stage_index);
                    for (std::size_t j = 0; j < std::min(room, rows.size()); ++j) {
                        table[rows[j]].candidate = true;
                        picks.push_back({rows[j], table[rows[j]].node, k});
                    }
                }
                if (picks.empty()) break;
            } else {
                const std::size_t cap = cfg.candidate_factor * state.stage_size * c;
                table = score_total(std::move(table), g, probe, cap, eligible);
                try {
                    picks = select_stage(state, table);
                } catch (const Error& e) {
                    if (e.code() == ErrorCode::NoCandidates) break;
                    throw;
                }
            }

            std::vector<NodeId> nodes;
            for (const auto& p : picks) nodes.push_back(p.node);
            std::vector<NodeId> failed;
            detail::query_into(*session, g, nodes, res.records, &failed);
            for (const auto& p : picks) {
                if (std::find(failed.begin(), failed.end(), p.node) != failed.end()) {
                    state.excluded.insert(p.node);
                    continue;
                }
                state.selected.push_back(
                    {p.node, p.pseudo_class, res.records.at(p.node).answer, state.stage_index, table[p.row]});
                progressed = true;
            }
            if (failed.empty()) break;
        }
        if (!progressed) break;
        ++state.stage_index;
    }
    return res;
}

inline nlohmann::ordered_json selection_log_entry(const Selection& s) {
    nlohmann::ordered_json j;
    j["stage"] = s.stage;
    j["node_id"] = s.node;
    j["pseudo_class_at_selection"] = s.pseudo_class;
    j["teacher_answer"] = s.teacher_answer;
    j["s_gl"] = s.scores.s_gl;
    j["s_e"] = s.scores.s_e;
    j["s_total"] = s.scores.s_total;
    j["p"] = s.scores.p;
    j["hr"] = s.scores.hr;
    j["degree"] = s.scores.degree;
    return j;
}

} // namespace graphkd
