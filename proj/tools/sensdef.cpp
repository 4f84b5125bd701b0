// SPDX-License-Identifier: Apache-2.0
// sensdef: train, attack, evaluate and search attack sensitive matrices.
//
// Exit codes: 0 success, 2 validation error, 3 training divergence,
// 1 anything else (I/O failures and the like).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "sensdef/sensdef.hpp"

namespace fs = std::filesystem;
using namespace sensdef;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitValidation = 2;
constexpr int kExitDivergence = 3;

struct Options {
    std::string config;
    std::string model;
    std::string out;
    std::string objective;
    std::string resume;
    long source = -1;
    long target = -1;
};

struct Run {
    RunConfig cfg;
    fs::path dir;
    RunManifest manifest;
};

Run begin_run(const std::string& command, const Options& opt) {
    Run r{load_run_config(opt.config), {}, {}};
    r.dir = opt.out.empty() ? fs::path(r.cfg.output_dir) : fs::path(opt.out);
    fs::create_directories(r.dir);
    auto& m = r.manifest;
    m.command = command;
    m.config_sha256 = r.cfg.sha256;
    m.started_utc = utc_now();
    m.seeds = {{"data", r.cfg.data.seed},
               {"split", r.cfg.data.split.seed},
               {"init", r.cfg.train.init_seed},
               {"shuffle", r.cfg.train.shuffle_seed},
               {"attack", r.cfg.attack.seed}};
    return r;
}

void write_output(Run& r, const std::string& name, const std::string& content) {
    write_text_file((r.dir / name).string(), content);
    add_output(r.manifest, r.dir, name);
}

void finish_run(Run& r) {
    r.manifest.finished_utc = utc_now();
    write_text_file((r.dir / "manifest.json").string(), manifest_to_json(r.manifest).dump(2) + "\n");
}

Model load_model_for(const RunConfig& cfg, const std::string& path) {
    detail::require(!path.empty(), "--model is required");
    detail::require(fs::is_regular_file(path), "model file not found: " + path);
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw ValidationError("model file " + path + ": " + e.what());
    }
    Model m = model_from_json(j);
    detail::require(m.n_classes == cfg.data.n_classes, "model has " + std::to_string(m.n_classes) +
                                                           " classes, config has " +
                                                           std::to_string(cfg.data.n_classes));
    detail::require(m.input_dim() == cfg.data.dim, "model input dim " + std::to_string(m.input_dim()) +
                                                       " does not match config data.dim " +
                                                       std::to_string(cfg.data.dim));
    return m;
}

json summarize(const RobustnessMatrix& R, const std::optional<WeightMatrix>& w, const Model& model,
               const Dataset& eval) {
    json j = to_json(R);
    const auto lb = lower_bound(R);
    json argmin = json::array();
    for (const auto& [i, k] : lb.argmin) argmin.push_back({i, k});
    j["lower_bound"] = {{"value", lb.value}, {"argmin", argmin}};
    j["legitimate_accuracy"] = legitimate_accuracy(model, eval);
    if (w) j["weighted_average"] = weighted_average(R, *w);
    return j;
}

int cmd_train(const Options& opt) {
    Run r = begin_run("train", opt);
    const auto data = load_data(r.cfg);
    const TrainedModel t = fit(data.train, r.cfg.loss, r.cfg.train, &data.val);
    json metrics = metrics_to_json(t);
    metrics["test_accuracy"] = legitimate_accuracy(t.model, data.test);
    write_output(r, "model.json", model_to_json(t.model).dump(2) + "\n");
    write_output(r, "metrics.json", metrics.dump(2) + "\n");
    finish_run(r);
    std::printf("trained: val accuracy %.4f, test accuracy %.4f -> %s\n", t.clean_val_accuracy,
                metrics["test_accuracy"].get<double>(), r.dir.string().c_str());
    return kExitOk;
}

int cmd_robustness(const Options& opt) {
    Run r = begin_run("robustness", opt);
    const Model model = load_model_for(r.cfg, opt.model);
    r.manifest.flags["model_sha256"] = sha256_file(opt.model);
    const auto data = load_data(r.cfg);
    const Dataset& eval = pick_split(data, r.cfg.robustness.eval_set);
    const auto R = robustness_matrix(model, eval, r.cfg.attack, r.cfg.robustness.options);
    auto w = r.cfg.robustness.weights;
    if (!w && r.cfg.search) w = r.cfg.search->weights;
    json j = summarize(R, w, model, eval);
    j["eval_set"] = r.cfg.robustness.eval_set;
    write_output(r, "robustness.csv", to_csv(R));
    write_output(r, "robustness.json", j.dump(2) + "\n");
    finish_run(r);
    std::printf("lower bound %.4f", j["lower_bound"]["value"].get<double>());
    if (j.contains("weighted_average")) std::printf(", weighted average %.4f", j["weighted_average"].get<double>());
    std::printf("\n");
    return kExitOk;
}

int cmd_attack(const Options& opt) {
    Run r = begin_run("attack", opt);
    const Model model = load_model_for(r.cfg, opt.model);
    r.manifest.flags["model_sha256"] = sha256_file(opt.model);
    const long n = static_cast<long>(model.n_classes);
    detail::require(opt.source >= 0 && opt.source < n, "unknown source class " + std::to_string(opt.source));
    detail::require(opt.target >= 0 && opt.target < n, "unknown target class " + std::to_string(opt.target));
    detail::require(opt.source != opt.target, "source and target classes must differ");
    const auto s = static_cast<ClassIndex>(opt.source), t = static_cast<ClassIndex>(opt.target);
    r.manifest.flags["source"] = s;
    r.manifest.flags["target"] = t;

    const auto data = load_data(r.cfg);
    std::vector<Sample> picked;
    for (const auto& smp : pick_split(data, r.cfg.robustness.eval_set).samples)
        if (smp.label == s && picked.size() < r.cfg.robustness.options.per_pair_cap) picked.push_back(smp);
    const auto results = craft_pairset(model, picked, s, t, r.cfg.attack, r.cfg.attack.seed, r.cfg.threads);

    const std::string name = "attack_" + std::to_string(s) + "_" + std::to_string(t) + ".csv";
    write_output(r, name, results_to_csv(results, s, t));
    finish_run(r);
    double l2 = 0.0;
    std::size_t ok = 0;
    for (const auto& a : results) {
        l2 += a.l2_norm;
        ok += a.success ? 1 : 0;
    }
    std::printf("%zu/%zu succeeded, mean L2 %.6g\n", ok, results.size(), results.empty() ? 0.0 : l2 / results.size());
    return kExitOk;
}

int cmd_search(const Options& opt) {
    Run r = begin_run("search", opt);
    detail::require(r.cfg.search.has_value(), "config has no [search] section");
    const auto& sec = *r.cfg.search;
    detail::require(opt.objective == "weighted" || opt.objective == "lower",
                    "--objective must be weighted or lower");
    detail::require(opt.objective != "weighted" || sec.weights.has_value(),
                    "weighted objective requires search.weights or search.weights_preset");
    r.manifest.flags["objective"] = opt.objective;

    SearchMemo memo;
    if (!opt.resume.empty()) {
        detail::require(fs::is_regular_file(opt.resume), "resume trace not found: " + opt.resume);
        memo = memo_from_trace(trace_from_jsonl(read_text_file(opt.resume), sec.config.m_cap));
    }

    const auto data = load_data(r.cfg);
    RetrainEvaluator eval(data.train, data.val, r.cfg.train, sec.config, r.cfg.attack, sec.inner);

    // Stream the trace so an interrupted run leaves a resumable prefix.
    const fs::path trace_path = r.dir / "trace.jsonl";
    std::ofstream trace(trace_path, std::ios::binary | std::ios::trunc);
    detail::require(trace.good(), "cannot write " + trace_path.string());
    auto sink = [&](const TraceRecord& rec) {
        trace << trace_record_to_json(rec).dump() << '\n';
        trace.flush();
        std::printf("  iter %zu: acc %.4f %s\n", rec.iteration, rec.accuracy, to_string(rec.action).c_str());
    };
    const SearchResult res = opt.objective == "weighted"
                                 ? search_weighted(eval, r.cfg.data.n_classes, *sec.weights, sec.config, memo, sink)
                                 : search_lower_bound(eval, r.cfg.data.n_classes, sec.config, memo, sink);
    trace.close();
    add_output(r.manifest, r.dir, "trace.jsonl");

    const TrainedModel& final_model = eval.trained(res.m);
    write_output(r, "M.csv", to_csv(res.m));
    write_output(r, "model.json", model_to_json(final_model.model).dump(2) + "\n");
    json summary = {{"objective", opt.objective},
                    {"constraint_infeasible", res.infeasible},
                    {"xi", sec.config.xi},
                    {"accuracy", res.accuracy},
                    {"iterations", res.trace.size()},
                    {"metrics", metrics_to_json(final_model)}};
    write_output(r, "search.json", summary.dump(2) + "\n");
    r.manifest.flags["constraint_infeasible"] = res.infeasible;
    finish_run(r);
    std::printf("%s search done: %zu iterations, accuracy %.4f%s\n", opt.objective.c_str(), res.trace.size(),
                res.accuracy, res.infeasible ? " (constraint-infeasible)" : "");
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Attack sensitive training, robustness evaluation and matrix search"};
    app.require_subcommand(1);
    Options opt;

    auto* train = app.add_subcommand("train", "Train a model from the config");
    auto* robust = app.add_subcommand("robustness", "Measure the pairwise robustness matrix of a model");
    auto* attack = app.add_subcommand("attack", "Craft targeted adversarial examples for one class pair");
    auto* search = app.add_subcommand("search", "Search the attack sensitive matrix");
    for (auto* sc : {train, robust, attack, search}) {
        sc->add_option("--config", opt.config, "Run config (INI)")->required();
        sc->add_option("--out", opt.out, "Output directory (overrides output.dir)");
    }
    for (auto* sc : {robust, attack}) sc->add_option("--model", opt.model, "Model JSON")->required();
    attack->add_option("--source", opt.source, "Source class")->required();
    attack->add_option("--target", opt.target, "Target class")->required();
    search->add_option("--objective", opt.objective, "weighted or lower")->required();
    search->add_option("--resume", opt.resume, "Trace JSON-lines from an earlier run");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (*train) return cmd_train(opt);
        if (*robust) return cmd_robustness(opt);
        if (*attack) return cmd_attack(opt);
        if (*search) return cmd_search(opt);
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitDivergence;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitValidation;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitFailure;
    }
    return kExitFailure;
}
