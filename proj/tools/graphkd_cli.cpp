// graphkd command line: experiments, selection preview, bucket analysis,
// gradient check, synthetic data and checkpoint evaluation.

#include <graphkd/graphkd.hpp>
#include <graphkd/teacher_http.hpp>

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace graphkd;

/// Flags that override fields of a RunConfig loaded from --config.
struct ConfigFlags {
    std::string config_path;
    std::optional<std::string> dataset, output_dir, cache, name;
    std::optional<std::size_t> shots, budget, stage_size, epochs, patience, hidden, k_guesses, query_cap;
    std::optional<std::vector<std::uint64_t>> seeds;
    std::optional<double> alpha, beta, tau, lr, weight_decay, dropout;
    std::optional<std::string> teacher, endpoint, model_name, token_env, al_mode, align;
    std::optional<std::uint64_t> teacher_seed;
    bool no_soft = false, no_rationales = false, no_al = false;

    void attach(CLI::App* app) {
        app->add_option("--config", config_path, "RunConfig JSON file");
        app->add_option("--dataset", dataset, "Dataset directory");
        app->add_option("--output-dir", output_dir, "Directory for report files");
        app->add_option("--cache", cache, "Teacher cache path (default <output-dir>/teacher_cache.jsonl)");
        app->add_option("--name", name, "Row label in the results table");
        app->add_option("--shots", shots, "Labeled nodes per class");
        app->add_option("--seeds", seeds, "Split/initialisation seeds")->delimiter(',');
        app->add_option("--alpha", alpha, "Soft-label loss weight");
        app->add_option("--beta", beta, "Rationale loss weight");
        app->add_option("--tau", tau, "Teacher temperature");
        app->add_option("--budget", budget, "Selected nodes per class (B)");
        app->add_option("--stage-size", stage_size, "Selected nodes per class per stage (b)");
        app->add_option("--epochs", epochs);
        app->add_option("--patience", patience);
        app->add_option("--hidden", hidden);
        app->add_option("--dropout", dropout);
        app->add_option("--lr", lr);
        app->add_option("--weight-decay", weight_decay);
        app->add_option("--teacher", teacher, "http | oracle | noisy");
        app->add_option("--endpoint", endpoint, "Chat-completion URL for the http teacher");
        app->add_option("--model", model_name, "Model name sent to the http teacher");
        app->add_option("--token-env", token_env, "Environment variable holding the bearer token");
        app->add_option("--teacher-seed", teacher_seed);
        app->add_option("--k-guesses", k_guesses);
        app->add_option("--query-cap", query_cap, "Maximum teacher cache misses");
        app->add_option("--al-mode", al_mode, "graph_llm | random | all_at_once");
        app->add_option("--align", align, "mlp | max_pool");
        app->add_flag("--no-soft-labels", no_soft);
        app->add_flag("--no-rationales", no_rationales);
        app->add_flag("--no-al", no_al);
    }

    RunConfig resolve() const {
        RunConfig c = config_path.empty() ? RunConfig{} : load_config(config_path);
        auto set = [](const auto& flag, auto& field) {
            if (flag) field = *flag;
        };
        set(dataset, c.dataset_dir);
        set(output_dir, c.output_dir);
        set(cache, c.cache_path);
        set(name, c.name);
        set(shots, c.shots);
        set(seeds, c.seeds);
        set(alpha, c.alpha);
        set(beta, c.beta);
        set(tau, c.tau);
        set(budget, c.budget);
        set(stage_size, c.stage_size);
        set(epochs, c.train.epochs);
        set(patience, c.train.patience);
        set(hidden, c.gcn.d_hidden);
        set(dropout, c.gcn.dropout);
        set(lr, c.train.adam.lr);
        set(weight_decay, c.train.adam.weight_decay);
        set(endpoint, c.teacher.endpoint);
        set(model_name, c.teacher.model_name);
        set(token_env, c.teacher.token_env);
        set(teacher_seed, c.teacher.seed);
        set(k_guesses, c.teacher.k_guesses);
        set(query_cap, c.teacher.query_cap);
        if (teacher) c.teacher.kind = nlohmann::json(*teacher).get<TeacherKind>();
        if (al_mode) c.ablations.al_mode = nlohmann::json(*al_mode).get<AlMode>();
        if (align) c.ablations.align = nlohmann::json(*align).get<AlignMode>();
        if (no_soft) c.ablations.use_soft_labels = false;
        if (no_rationales) c.ablations.use_rationales = false;
        if (no_al) c.ablations.use_al = false;
        if (c.dataset_dir.empty()) fail(ErrorCode::InvalidConfig, "no dataset directory (--dataset or config)");
        c.validate();
        return c;
    }
};

struct Loaded {
    TextGraph graph;
    Propagation prop;
    std::optional<Partition> partition;
};

Loaded load(const RunConfig& c) {
    TextGraph g = load_dataset(c.dataset_dir);
    Propagation p = Propagation::of(g);
    return {std::move(g), std::move(p), load_partition(c.dataset_dir)};
}

std::unique_ptr<Teacher> teacher_for(const RunConfig& c, const TextGraph& g) {
    return std::make_unique<EmbeddingBackedTeacher>(make_teacher(c.teacher, g), RationaleEmbeddings::load(c.dataset_dir));
}

int cmd_run(const RunConfig& c) {
    const RunReport r = run(c, make_teacher);
    std::cout << results_table(std::span<const RunReport>(&r, 1));
    if (!c.output_dir.empty()) std::cout << "report written to " << c.output_dir << "\n";
    return 0;
}

int cmd_select(const RunConfig& c) {
    const Loaded d = load(c);
    TeacherCache cache(c.resolved_cache_path());
    auto teacher = c.needs_teacher() ? teacher_for(c, d.graph) : nullptr;
    const SelectPreview p = preview_selection({d.graph, d.prop, d.partition}, c, teacher.get(), cache);
    std::printf("%8s %5s %7s %7s %6s %7s %7s %7s %7s\n", "node", "class", "p", "hr", "deg", "s_gl", "dH", "s_e",
                "s_total");
    for (const auto& row : p.table) {
        if (!row.candidate) continue;
        std::printf("%8zu %5d %7.4f %7.4f %6zu %7.4f %7.4f %7.4f %7.4f\n", row.node, row.pseudo_class, row.p, row.hr,
                    row.degree, row.s_gl, row.entropy_change, row.s_e, row.s_total);
    }
    for (const auto& pick : p.picks) {
        nlohmann::ordered_json j{{"node_id", pick.node}, {"pseudo_class", pick.pseudo_class},
                                 {"s_total", p.table[pick.row].s_total}};
        std::cout << j.dump() << "\n";
    }
    return 0;
}

int cmd_prelim(const RunConfig& c, const std::string& metric, std::size_t bucket_size) {
    const TextGraph g = load_dataset(c.dataset_dir);
    TeacherCache cache(c.resolved_cache_path());
    auto teacher = teacher_for(c, g);
    TeacherSession session(*teacher, PromptConfig(g.class_names(), c.teacher.k_guesses), cache, query_options(c.teacher));
    const BucketMetric m = metric == "degree" ? BucketMetric::Degree : BucketMetric::Homophily;
    const PrelimReport r = prelim_analysis(g, session, m, bucket_size);
    std::cout << r.to_json().dump(2) << "\n";
    if (!c.output_dir.empty()) {
        fs::create_directories(c.output_dir);
        detail::write_text(fs::path(c.output_dir) / "prelim.json", r.to_json().dump(2) + "\n");
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Graph node classification with LLM teacher distillation and active selection"};
    app.require_subcommand(1);

    ConfigFlags run_flags, base_flags, select_flags, prelim_flags;
    auto* run_cmd = app.add_subcommand("run", "Full pipeline over all seeds");
    run_flags.attach(run_cmd);
    auto* base_cmd = app.add_subcommand("baseline", "Plain GCN on the few-shot labels");
    base_flags.attach(base_cmd);
    auto* select_cmd = app.add_subcommand("select", "Score one selection stage without querying the picks");
    select_flags.attach(select_cmd);
    auto* prelim_cmd = app.add_subcommand("prelim", "Teacher accuracy by degree or homophily bucket");
    prelim_flags.attach(prelim_cmd);
    std::string metric = "homophily";
    std::size_t bucket_size = 200;
    prelim_cmd->add_option("--metric", metric)->check(CLI::IsMember({"degree", "homophily"}));
    prelim_cmd->add_option("--bucket-size", bucket_size);

    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the loss gradients");
    GradcheckOptions gopt;
    grad_cmd->add_option("--instances", gopt.instances);
    grad_cmd->add_option("--seed", gopt.seed);
    grad_cmd->add_option("--step", gopt.step);
    grad_cmd->add_option("--tolerance", gopt.tolerance);

    auto* synth_cmd = app.add_subcommand("synth", "Write a planted-partition dataset directory");
    SynthConfig sc;
    std::string synth_out;
    synth_cmd->add_option("--out", synth_out, "Output directory")->required();
    synth_cmd->add_option("--classes", sc.classes);
    synth_cmd->add_option("--nodes-per-class", sc.nodes_per_class);
    synth_cmd->add_option("--p-in", sc.p_in);
    synth_cmd->add_option("--p-out", sc.p_out);
    synth_cmd->add_option("--separation", sc.separation);
    synth_cmd->add_option("--dim", sc.dim);
    synth_cmd->add_option("--seed", sc.seed);

    auto* eval_cmd = app.add_subcommand("eval", "Accuracy of a checkpoint on a dataset split");
    std::string ckpt, eval_dataset, eval_split = "test";
    std::size_t eval_shots = 3;
    std::uint64_t eval_seed = 0;
    eval_cmd->add_option("--checkpoint", ckpt)->required();
    eval_cmd->add_option("--dataset", eval_dataset)->required();
    eval_cmd->add_option("--split", eval_split)->check(CLI::IsMember({"test", "val", "all"}));
    eval_cmd->add_option("--shots", eval_shots);
    eval_cmd->add_option("--seed", eval_seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run_cmd) return cmd_run(run_flags.resolve());
        if (*base_cmd) {
            RunConfig c = baseline_of(base_flags.resolve());
            if (!base_flags.name) c.name = "GCN";
            return cmd_run(c);
        }
        if (*select_cmd) return cmd_select(select_flags.resolve());
        if (*prelim_cmd) return cmd_prelim(prelim_flags.resolve(), metric, bucket_size);
        if (*grad_cmd) {
            const GradcheckReport r = gradcheck(gopt);
            std::cout << r.to_json().dump(2) << "\n";
            return r.passed ? 0 : 1;
        }
        if (*synth_cmd) {
            const TextGraph g = planted_partition(sc);
            write_dataset(g, synth_out);
            std::cout << "wrote " << g.num_nodes() << " nodes, " << g.num_edges() << " edges to " << synth_out << "\n";
            return 0;
        }
        if (*eval_cmd) {
            const TextGraph g = load_dataset(eval_dataset);
            const GcnModel m = load_checkpoint(ckpt);
            const Propagation prop = Propagation::of(g);
            std::vector<NodeId> nodes;
            if (eval_split == "all") {
                for (NodeId v = 0; v < g.num_nodes(); ++v) nodes.push_back(v);
            } else {
                const SplitSpec s = make_split(g, eval_shots, eval_seed, {}, load_partition(eval_dataset));
                nodes = eval_split == "test" ? s.test : s.val;
            }
            nodes = labeled_only(g, nodes);
            std::printf("%s accuracy: %.4f (%zu nodes)\n", eval_split.c_str(), evaluate(m, prop, g, nodes), nodes.size());
            return 0;
        }
    } catch (const graphkd::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
