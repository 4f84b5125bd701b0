// SPDX-License-Identifier: Apache-2.0
// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
// usage: acceptance [criterion ...]   (default: all)

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>

#include "support.hpp"

using namespace sensdef;
using namespace sensdef::testing;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// 1. Analytic gradients against central differences on random small cases.
Verdict gradient_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(2024);
    double worst = 0.0;
    std::size_t coords = 0;
    const LossVariant kinds[] = {LossVariant::cross, LossVariant::v1, LossVariant::v2, LossVariant::combined_v1,
                                 LossVariant::combined_v2};
    for (int c = 0; c < 20; ++c) {
        const std::size_t dim = 1 + rng.below(16), n = 2 + rng.below(4);
        std::vector<std::size_t> widths{dim};
        for (std::size_t h = rng.below(3); h > 0; --h) widths.push_back(2 + rng.below(10));
        widths.push_back(n);
        const auto model = build_model(mlp_spec(widths), n, rng.next_u64());
        std::vector<Sample> batch;
        do {
            batch = random_batch(3, dim, n, rng);
        } while (near_relu_kink(model, batch, 1e-3));
        const auto variant = kinds[c % 5];
        const LossSpec loss = variant == LossVariant::cross ? LossSpec::cross_entropy()
                                                            : LossSpec{variant, 1.0, random_matrix(n, rng)};
        const auto r = finite_difference_check(model, batch, loss);
        worst = std::max({worst, r.max_param_rel, r.max_input_rel});
        coords += r.coords;
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-4 && secs < 60.0,
            fmt("20 cases, %zu coordinates, max rel err %.2e (< 1e-4), %.1fs (< 60s)", coords, worst, secs)};
}

// 2. Exact loss identities on random distributions.
Verdict loss_identities() {
    Rng rng(7);
    std::size_t bad_lambda0 = 0, bad_onehot = 0, bad_homog = 0;
    double worst_closed = 0.0;
    for (int rep = 0; rep < 2000; ++rep) {
        const std::size_t n = 2 + rng.below(8);
        std::vector<double> p(n);
        double s = 0.0;
        for (auto& v : p) s += (v = rng.uniform(1e-6, 1.0));
        for (auto& v : p) v /= s;
        const auto t = static_cast<ClassIndex>(rng.below(n));
        const auto m = random_matrix(n, rng, 10.0);
        for (auto var : {LossVariant::combined_v1, LossVariant::combined_v2})
            bad_lambda0 += combined(t, p, LossSpec{var, 0.0, m}) == cross_entropy(t, p) ? 0 : 1;

        const double c = rng.uniform(0.1, 10.0);
        auto uniform = AttackSensitiveMatrix::ones(n, 100.0).scaled(c);
        worst_closed = std::max(worst_closed, std::abs(sensitive_v2(t, p, uniform) - c * (1.0 - n * p[t])));

        // Power-of-two scales are exact in binary floating point; k <= 8 keeps M under its cap.
        const double k = std::ldexp(1.0, static_cast<int>(rng.below(7)) - 3);
        bad_homog += sensitive_v1(t, p, m.scaled(k)) == k * sensitive_v1(t, p, m) ? 0 : 1;

        std::vector<double> onehot(n, 0.0);
        onehot[t] = 1.0;
        bad_onehot += sensitive_v1(t, onehot, m) == 0.0 ? 0 : 1;
    }
    return {bad_lambda0 == 0 && bad_onehot == 0 && bad_homog == 0 && worst_closed <= 1e-12,
            fmt("2000 draws: lambda=0 mismatches %zu, v2 closed-form err %.1e (<= 1e-12), v1 homogeneity "
                "mismatches %zu, one-hot v1 nonzero %zu",
                bad_lambda0, worst_closed, bad_homog, bad_onehot)};
}

// 3. Attack contracts.
Verdict attack_contracts() {
    const auto sweep = attack_contract_sweep(500, 99);
    Rng rng(3);
    std::size_t identity_bad = 0;
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t dim = 1 + rng.below(10), n = 2 + rng.below(3);
        const auto m = build_model(mlp_spec({dim, 6, n}), n, rng.next_u64());
        const auto x = random_batch(1, dim, n, rng)[0].x;
        const auto target = static_cast<ClassIndex>(rng.below(n));
        AttackBudget zero_steps;
        zero_steps.steps = 0;
        AttackBudget zero_eps;
        zero_eps.epsilon = 0.0;
        zero_eps.steps = 1 + rng.below(20);
        for (const auto& b : {zero_steps, zero_eps}) {
            identity_bad += ifgsm_targeted(m, x.view(), target, b).x_adv == x ? 0 : 1;
            identity_bad += pgd_targeted(m, x.view(), target, b, rng.next_u64()).x_adv == x ? 0 : 1;
        }
    }
    CWConfig cw;
    cw.c = 10.0;
    cw.steps = 500;
    double worst_gap = std::numeric_limits<double>::infinity();
    for (int rep = 0; rep < 20; ++rep) {
        const auto hc = hyperplane_case(rng);
        const auto r = cw_l2_targeted(hc.model, hc.x, hc.target, cw);
        worst_gap = std::min(worst_gap, r.l2_norm - hc.distance);
    }
    const bool ok = sweep.box_violations == 0 && sweep.ball_violations == 0 && identity_bad == 0 && worst_gap >= -1e-3;
    return {ok, fmt("500 runs: box violations %zu, ball violations %zu, worst linf excess %.1e; "
                    "steps=0/eps=0 non-identity %zu of 400; C&W min (L2 - distance) %.2e (>= -1e-3)",
                    sweep.box_violations, sweep.ball_violations, sweep.worst_linf_excess, identity_bad, worst_gap)};
}

// 4. Robustness matrix against a hand-counted oracle.
Verdict robustness_oracle() {
    const auto r = eq2_robustness();
    const auto want = eq2_hand_counts();
    std::size_t bad = 0;
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            if (i != j) bad += r.at(i, j) == static_cast<double>(want[i][j]) / 4.0 && r.crafted(i, j) == 4 ? 0 : 1;
    return {bad == 0, fmt("%zu of 6 cells differ from the hand count", bad)};
}

// 5. R_{0,1} rises with M_{0,1}.
Verdict m01_sweep() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto exp = blob_experiment(3, 300, 1000, 8, std::vector<double>(3, 0.05), 1, {0.8, 0.1, 0.1, 3});
    const double eps = margin_epsilon(exp.data.train, 0, 1);
    const auto attack = pgd_attack(eps, 20, 4.0, 5);
    TrainConfig cfg;
    cfg.layers = mlp_spec({8, 64, 3});
    cfg.epochs = 100;
    cfg.lr = 0.05;
    cfg.augmentation = Augmentation::pgd;
    cfg.augment_attacks = {attack};
    const auto pts = sweep_m01(exp.data.train, exp.held_out, cfg, attack, {1, 25, 50, 100});
    std::size_t inversions = 0;
    bool large_inversion = false;
    for (std::size_t k = 1; k < pts.size(); ++k)
        if (pts[k].r01 < pts[k - 1].r01) {
            ++inversions;
            large_inversion = large_inversion || pts[k - 1].r01 - pts[k].r01 > 0.02 + 1e-12;
        }
    const double gain = pts.back().r01 - pts.front().r01;
    const double drop = pts.front().clean_acc - pts.back().clean_acc;
    const double secs = seconds_since(t0);
    const bool ok = inversions <= 1 && !large_inversion && gain >= 0.10 && drop <= 0.05 && secs < 600;
    return {ok, fmt("eps %.3f; R01 %.3f/%.3f/%.3f/%.3f; inversions %zu; gain %+.1f pts (>= 10); "
                    "clean acc %.3f -> %.3f, drop %.1f pts (<= 5); %.0fs (< 600s)",
                    eps, pts[0].r01, pts[1].r01, pts[2].r01, pts[3].r01, inversions, 100 * gain, pts.front().clean_acc,
                    pts.back().clean_acc, 100 * drop, secs)};
}

// Shared setup for the two searches and the C&W comparison: four classes so
// the six-weight scheme applies, PGD adversarial training throughout.
struct DeskSearch {
    BlobExperiment exp;
    double eps = 0.0;
    AttackConfig train_attack, eval_attack;
    TrainConfig train;
    WeightMatrix weights;
    SearchConfig search;
    RobustnessOptions inner, held;
    TrainedModel baseline;
    RobustnessMatrix baseline_r;
    double setup_seconds = 0.0;

    DeskSearch() : weights(six_weight_preset(4, 17)) {
        const auto t0 = std::chrono::steady_clock::now();
        exp = blob_experiment(4, 400, 500, 8, std::vector<double>(4, 0.08), 1, {0.6, 0.2, 0.2, 3});
        eps = median_margin_epsilon(exp.data.train);
        train_attack = pgd_attack(eps, 20, 4.0, 5);
        eval_attack = pgd_attack(eps, 50, 20.0, 5);
        train.layers = mlp_spec({8, 16, 4});
        train.epochs = 100;
        train.lr = 0.05;
        train.grad_clip = 1.0;
        train.augmentation = Augmentation::pgd;
        train.augment_attacks = {train_attack};
        inner.per_pair_cap = 30;
        held.per_pair_cap = exp.held_out.size();
        baseline = fit(exp.data.train, LossSpec::cross_entropy(), train, &exp.data.val);
        baseline_r = robustness_matrix(baseline.model, exp.held_out, eval_attack, held);
        search.xi = baseline.clean_val_accuracy - 0.01;
        search.delta = 5;
        search.batch_t = 3;
        search.max_outer_iters = 40;
        setup_seconds = seconds_since(t0);
    }

    struct Outcome {
        SearchResult result;
        TrainedModel model;
        RobustnessMatrix r;
        double seconds = 0.0;
    };

    Outcome run(bool weighted) const {
        const auto t0 = std::chrono::steady_clock::now();
        RetrainEvaluator ev(exp.data.train, exp.data.val, train, search, train_attack, inner);
        auto res = weighted ? search_weighted(ev, 4, weights, search) : search_lower_bound(ev, 4, search);
        const TrainedModel model = ev.trained(res.m);
        const auto r = robustness_matrix(model.model, exp.held_out, eval_attack, held);
        return {std::move(res), model, r, seconds_since(t0) + setup_seconds};
    }
};

const DeskSearch& desk() {
    static const DeskSearch d;
    return d;
}

const DeskSearch::Outcome& weighted_outcome() {
    static const auto o = desk().run(true);
    return o;
}

std::string m_summary(const AttackSensitiveMatrix& m) {
    std::string s;
    for (std::size_t i = 0; i < m.n(); ++i)
        for (std::size_t j = 0; j < m.n(); ++j)
            if (i != j && m.at(i, j) != 1.0) s += fmt("M%zu%zu=%g ", i, j, m.at(i, j));
    return s.empty() ? "M unchanged" : s.substr(0, s.size() - 1);
}

// 6. Algorithm 1 raises the weighted average.
Verdict weighted_search() {
    const auto& d = desk();
    const auto& o = weighted_outcome();
    const double base = weighted_average(d.baseline_r, d.weights), got = weighted_average(o.r, d.weights);
    const bool ok = got - base >= 0.05 && o.model.clean_val_accuracy > d.search.xi && o.seconds < 1800;
    return {ok, fmt("Rbar %.4f -> %.4f (%+.1f pts, need >= 5); clean acc %.4f > xi %.4f; %s; %zu steps; %.0fs (< 1800s)",
                    base, got, 100 * (got - base), o.model.clean_val_accuracy, d.search.xi,
                    m_summary(o.result.m).c_str(), o.result.trace.size(), o.seconds)};
}

// 7. Algorithm 2 raises the lower bound.
Verdict lower_bound_search() {
    const auto& d = desk();
    const auto o = d.run(false);
    const double base = lower_bound(d.baseline_r).value, got = lower_bound(o.r).value;
    const bool ok = got - base >= 0.05 && o.model.clean_val_accuracy > d.search.xi && o.seconds < 1800;
    return {ok, fmt("min R %.4f -> %.4f (%+.1f pts, need >= 5); clean acc %.4f > xi %.4f; %s; %zu steps; %.0fs (< 1800s)",
                    base, got, 100 * (got - base), o.model.clean_val_accuracy, d.search.xi,
                    m_summary(o.result.m).c_str(), o.result.trace.size(), o.seconds)};
}

// 8. C&W needs more L2 against the Algorithm 1 model on its top-weight pair.
Verdict cw_distance() {
    const auto& d = desk();
    const auto& o = weighted_outcome();
    const Cell top = weight_order(d.weights).front();
    std::vector<Sample> picked;
    for (const auto* s : d.exp.held_out.of_class(top.first))
        if (predict(d.baseline.model, s->x) == top.first && predict(o.model.model, s->x) == top.first &&
            picked.size() < 40)
            picked.push_back(*s);
    AttackConfig cw;
    cw.kind = AttackKind::cw;
    cw.cw.c = 1.0;
    cw.cw.steps = 300;
    cw.cw.binary_search_steps = 6;
    const auto mean_l2 = [&](const Model& m, std::size_t& ok) {
        double s = 0.0;
        for (const auto& r : craft_pairset(m, picked, top.first, top.second, cw, 0)) {
            s += r.l2_norm;
            ok += r.success ? 1 : 0;
        }
        return picked.empty() ? 0.0 : s / static_cast<double>(picked.size());
    };
    std::size_t ok_base = 0, ok_def = 0;
    const double base = mean_l2(d.baseline.model, ok_base), def = mean_l2(o.model.model, ok_def);
    return {picked.size() >= 25 && def > base,
            fmt("pair (%zu,%zu), %zu samples: mean L2 baseline %.4f (%zu succeeded), defended %.4f (%zu succeeded)",
                top.first, top.second, picked.size(), base, ok_base, def, ok_def)};
}

// 9. Reruns of every command reproduce the manifest content hashes.
Verdict cli_determinism() {
    const fs::path dir = unique_temp_dir("acceptance_cli");
    const auto config = (dir / "run.ini").string();
    write_text_file(config, tiny_run_config());
    const std::string cli = SENSDEF_CLI_PATH;
    const auto base = " --config " + config + " --out ";
    const auto model = (dir / "train0" / "model.json").string();
    const std::vector<std::pair<std::string, std::string>> cmds{
        {"train", "train" + base},
        {"robustness", "robustness --model " + model + base},
        {"attack", "attack --model " + model + " --source 1 --target 2" + base},
        {"search-weighted", "search --objective weighted" + base},
        {"search-lower", "search --objective lower" + base}};
    std::size_t same = 0;
    std::string failures;
    for (const auto& [name, args] : cmds) {
        std::map<std::string, std::string> hashes[2];
        bool ran = true;
        for (int k = 0; k < 2; ++k) {
            const auto out = dir / (name + std::to_string(k));
            const auto r = run_cli(cli, args + out.string());
            ran = ran && r.code == 0;
            if (r.code == 0) hashes[k] = content_hashes(json::parse(read_text_file((out / "manifest.json").string())));
        }
        if (ran && !hashes[0].empty() && hashes[0] == hashes[1])
            ++same;
        else
            failures += " " + name;
    }
    fs::remove_all(dir);
    return {same == cmds.size(), fmt("%zu of %zu commands reproduce their output hashes%s", same, cmds.size(),
                                     failures.empty() ? "" : (";  differing:" + failures).c_str())};
}

// 10. Searches driven by stub functions follow the hand-executed traces.
Verdict stub_traces() {
    auto ev1 = stub_evaluator();
    const auto w = search_weighted(ev1, 3, stub_weights(), [] {
        SearchConfig c;
        c.xi = 0.855;
        c.delta = 3;
        return c;
    }());
    auto ev2 = stub_evaluator();
    const auto l = search_lower_bound(ev2, 3, [] {
        SearchConfig c;
        c.xi = 0.855;
        c.delta = 2;
        c.batch_t = 2;
        return c;
    }());
    const auto dw = compare_trace(w.trace, hand_trace_weighted());
    const auto dl = compare_trace(l.trace, hand_trace_lower());
    return {dw.empty() && dl.empty(),
            fmt("weighted: %zu steps %s; lower bound: %zu steps %s", w.trace.size(), dw.empty() ? "match" : dw.c_str(),
                l.trace.size(), dl.empty() ? "match" : dl.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
        {"gradients match finite differences", gradient_suite},
        {"loss identities", loss_identities},
        {"attack contracts", attack_contracts},
        {"robustness matrix hand-count oracle", robustness_oracle},
        {"R01 rises with M01", m01_sweep},
        {"weighted search raises Rbar", weighted_search},
        {"lower-bound search raises min R", lower_bound_search},
        {"C&W distance grows on the top-weight pair", cw_distance},
        {"command reruns are deterministic", cli_determinism},
        {"stubbed searches follow hand traces", stub_traces},
    };
    std::set<int> only;
    for (int a = 1; a < argc; ++a) only.insert(std::atoi(argv[a]));
    int failed = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        const int id = static_cast<int>(k) + 1;
        if (!only.empty() && !only.count(id)) continue;
        Verdict v;
        try {
            v = criteria[k].second();
        } catch (const std::exception& e) {
            v = {false, std::string("threw: ") + e.what()};
        }
        failed += v.pass ? 0 : 1;
        std::printf("criterion %2d: %s  %s: %s\n", id, v.pass ? "PASS" : "FAIL", criteria[k].first, v.detail.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
