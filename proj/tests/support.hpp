// SPDX-License-Identifier: Apache-2.0
#pragma once

// Test-side oracles shared by the unit tests and the acceptance binary.
// Nothing here calls the library's gradient code.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "sensdef/sensdef.hpp"

namespace sensdef::testing {

/// |a - b| / max(|a|, |b|, floor): relative error that stays meaningful
/// near zero.
inline double rel_err(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Mean loss over a batch, computed by forward passes only.
inline double batch_loss(const Model& m, const std::vector<Sample>& batch, const LossSpec& loss) {
    double s = 0.0;
    for (const auto& smp : batch) s += combined(smp.label, forward(m, smp.x).probs.data, loss);
    return s / static_cast<double>(batch.size());
}

/// True when some relu input sits within `margin` of its kink, where a
/// central difference of step h would straddle it.
inline bool near_relu_kink(const Model& m, const std::vector<Sample>& batch, double margin) {
    for (const auto& smp : batch) {
        const auto tr = forward(m, smp.x);
        for (std::size_t k = 0; k < m.layers.size(); ++k)
            if (m.layers[k].kind == LayerKind::relu)
                for (double v : tr.layer_inputs[k])
                    if (std::abs(v) < margin) return true;
    }
    return false;
}

struct GradCheck {
    double max_param_rel = 0.0;
    double max_input_rel = 0.0;
    std::size_t coords = 0;
};

/// Central differences of the mean batch loss against loss_grad_params and
/// of the single-sample loss against loss_grad_input.
inline GradCheck finite_difference_check(const Model& m, const std::vector<Sample>& batch, const LossSpec& loss,
                                         double h = 1e-4) {
    GradCheck out;
    std::vector<LabeledRef> refs;
    for (const auto& s : batch) refs.push_back({s.x.view(), s.label});
    const auto analytic = loss_grad_params(m, refs, loss);
    Model probe = m;
    for (std::size_t k = 0; k < m.params.size(); ++k) {
        for (int which = 0; which < 2; ++which) {
            auto& target = which == 0 ? probe.params[k].weight.data : probe.params[k].bias.data;
            const auto& a = which == 0 ? analytic[k].weight.data : analytic[k].bias.data;
            for (std::size_t i = 0; i < target.size(); ++i) {
                const double keep = target[i];
                target[i] = keep + h;
                const double up = batch_loss(probe, batch, loss);
                target[i] = keep - h;
                const double down = batch_loss(probe, batch, loss);
                target[i] = keep;
                out.max_param_rel = std::max(out.max_param_rel, rel_err(a[i], (up - down) / (2 * h)));
                ++out.coords;
            }
        }
    }
    for (const auto& smp : batch) {
        const auto g = loss_grad_input(m, smp.x.view(), smp.label, loss);
        auto x = smp.x.data;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double keep = x[i];
            x[i] = keep + h;
            const double up = combined(smp.label, forward(m, x).probs.data, loss);
            x[i] = keep - h;
            const double down = combined(smp.label, forward(m, x).probs.data, loss);
            x[i] = keep;
            out.max_input_rel = std::max(out.max_input_rel, rel_err(g[i], (up - down) / (2 * h)));
            ++out.coords;
        }
    }
    return out;
}

inline AttackSensitiveMatrix random_matrix(std::size_t n, Rng& rng, double hi = 5.0) {
    AttackSensitiveMatrix m(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) m.set(i, j, rng.uniform(0.0, hi));
    return m;
}

inline std::vector<Sample> random_batch(std::size_t k, std::size_t dim, std::size_t n, Rng& rng) {
    std::vector<Sample> out;
    for (std::size_t s = 0; s < k; ++s) {
        Tensor x = Tensor::vector(std::vector<double>(dim, 0.0));
        for (auto& v : x.data) v = rng.uniform01();
        out.push_back({std::move(x), static_cast<ClassIndex>(rng.below(n))});
    }
    return out;
}

/// Affine layer with explicit weight rows and bias.
inline AffineParams affine_params(const std::vector<std::vector<double>>& w, const std::vector<double>& b) {
    AffineParams p;
    p.weight = Tensor::zeros({w.size(), w.empty() ? 0 : w[0].size()});
    for (std::size_t o = 0; o < w.size(); ++o)
        for (std::size_t i = 0; i < w[o].size(); ++i) p.weight.data[o * w[o].size() + i] = w[o][i];
    p.bias = Tensor::zeros({b.size()});
    p.bias.data = b;
    return p;
}

/// Single affine layer model: logits = W x + b.
inline Model linear_model(const std::vector<std::vector<double>>& w, const std::vector<double>& b) {
    Model m = build_model({LayerSpec::affine(w[0].size(), w.size())}, w.size(), 0);
    m.params[0] = affine_params(w, b);
    return m;
}

struct ContractSweep {
    std::size_t runs = 0;
    std::size_t box_violations = 0;
    std::size_t ball_violations = 0;
    double worst_linf_excess = -1.0;  // max(linf - eps) over runs
};

/// Randomized PGD/IFGSM runs on random small models; counts results that
/// leave [0,1] or exceed the L-inf budget by more than 1e-9.
inline ContractSweep attack_contract_sweep(std::size_t runs, std::uint64_t seed) {
    ContractSweep out;
    Rng rng(seed);
    for (std::size_t r = 0; r < runs; ++r) {
        const std::size_t dim = 1 + rng.below(16), n = 2 + rng.below(4);
        std::vector<std::size_t> widths{dim};
        for (std::size_t h = rng.below(3); h > 0; --h) widths.push_back(1 + rng.below(12));
        widths.push_back(n);
        const auto m = build_model(mlp_spec(widths), n, rng.next_u64());
        auto x = random_batch(1, dim, n, rng)[0].x;
        // Push some coordinates onto the box faces, where clipping matters.
        for (auto& v : x.data)
            if (rng.uniform01() < 0.2) v = rng.uniform01() < 0.5 ? 0.0 : 1.0;
        AttackBudget b;
        b.epsilon = rng.uniform(0.0, 0.5);
        b.alpha = rng.uniform(1e-3, 0.2);
        b.steps = rng.below(30);
        b.random_start = rng.uniform01() < 0.5;
        const auto target = static_cast<ClassIndex>(rng.below(n));
        const auto res = (r % 2 == 0) ? pgd_targeted(m, x.view(), target, b, rng.next_u64())
                                      : ifgsm_targeted(m, x.view(), target, b);
        ++out.runs;
        bool box_ok = true;
        for (double v : res.x_adv.data) box_ok = box_ok && v >= 0.0 && v <= 1.0;
        const double linf = linf_distance(res.x_adv.view(), x.view());
        out.box_violations += box_ok ? 0 : 1;
        out.ball_violations += linf <= b.epsilon + 1e-9 ? 0 : 1;
        out.worst_linf_excess = std::max(out.worst_linf_excess, linf - b.epsilon);
    }
    return out;
}

/// Two-class 2-D linear model and a point; the analytic L2 distance from x
/// to the set where the target logit wins.
struct HyperplaneCase {
    Model model;
    std::vector<double> x;
    ClassIndex target;
    double distance;
};

inline HyperplaneCase hyperplane_case(Rng& rng) {
    for (;;) {
        const std::vector<std::vector<double>> w{{rng.uniform(-3, 3), rng.uniform(-3, 3)},
                                                 {rng.uniform(-3, 3), rng.uniform(-3, 3)}};
        const std::vector<double> b{rng.uniform(-1, 1), rng.uniform(-1, 1)};
        const std::vector<double> x{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
        const auto m = linear_model(w, b);
        const ClassIndex src = predict(m, x);
        const ClassIndex tgt = 1 - src;
        const double d0 = w[tgt][0] - w[src][0], d1 = w[tgt][1] - w[src][1];
        const double norm = std::hypot(d0, d1);
        if (norm < 0.5) continue;
        const double margin = d0 * x[0] + d1 * x[1] + (b[tgt] - b[src]);  // < 0 on the source side
        const double dist = -margin / norm;
        // Keep cases whose closest boundary point lies inside the box.
        const double px = x[0] + dist * d0 / norm, py = x[1] + dist * d1 / norm;
        if (dist <= 1e-3 || px < 0.05 || px > 0.95 || py < 0.05 || py > 0.95) continue;
        return {m, x, tgt, dist};
    }
}

/// Frozen 3-class 2-D linear model: z0 = 0, z1 = 4*x0 - 2, z2 = 4*x1 - 2.
/// Class 1 wins when x0 > 0.5 and x0 > x1, class 2 when x1 > 0.5 and
/// x1 > x0, class 0 otherwise (ties go to the lower index).
inline Model eq2_model() { return linear_model({{0, 0}, {4, 0}, {0, 4}}, {0, -2, -2}); }

/// Four precomputed "perturbed" points per cell (i, j), keyed row-major.
inline std::map<Cell, std::vector<std::vector<double>>> eq2_points() {
    return {
        {{0, 1}, {{0.2, 0.2}, {0.7, 0.1}, {0.4, 0.3}, {0.9, 0.6}}},     // 0,1,0,1
        {{0, 2}, {{0.1, 0.8}, {0.3, 0.3}, {0.2, 0.4}, {0.45, 0.45}}},   // 2,0,0,0
        {{1, 0}, {{0.8, 0.2}, {0.3, 0.2}, {0.6, 0.55}, {0.5, 0.1}}},    // 1,0,1,0(tie)
        {{1, 2}, {{0.9, 0.95}, {0.7, 0.6}, {0.2, 0.9}, {0.55, 0.8}}},   // 2,1,2,2
        {{2, 0}, {{0.1, 0.9}, {0.2, 0.7}, {0.6, 0.9}, {0.3, 0.4}}},     // 2,2,2,0
        {{2, 1}, {{0.9, 0.2}, {0.8, 0.7}, {0.7, 0.9}, {0.95, 0.94}}},   // 1,1,2,1
    };
}

/// Hand count of how many of each cell's points still land in class i.
inline std::vector<std::vector<std::size_t>> eq2_hand_counts() { return {{0, 2, 3}, {2, 0, 1}, {3, 1, 0}}; }

/// Four clean samples per class; their values are irrelevant to the
/// oracle because the craft function ignores them.
inline Dataset eq2_eval_set() {
    Dataset ds{{}, 3, 2};
    const std::vector<std::vector<double>> centers{{0.2, 0.2}, {0.8, 0.3}, {0.3, 0.8}};
    for (ClassIndex c = 0; c < 3; ++c)
        for (int k = 0; k < 4; ++k) ds.samples.push_back({Tensor::vector(centers[c]), c});
    return ds;
}

inline RobustnessMatrix eq2_robustness() {
    const auto model = eq2_model();
    const auto points = eq2_points();
    RobustnessOptions opt;
    opt.per_pair_cap = 4;
    return robustness_matrix_with(
        model, eq2_eval_set(),
        [&](const Tensor&, std::size_t i, std::size_t j, std::size_t k) {
            return Tensor::vector(points.at({i, j}).at(k));
        },
        opt);
}

/// Deterministic stand-in for retraining: accuracy and robustness are plain
/// functions of M. Counts calls so memo behaviour can be checked.
struct StubEvaluator {
    std::function<double(const AttackSensitiveMatrix&)> acc;
    std::function<RobustnessMatrix(const AttackSensitiveMatrix&)> rob;
    std::size_t accuracy_calls = 0;
    std::size_t robustness_calls = 0;

    double accuracy(const AttackSensitiveMatrix& m) {
        ++accuracy_calls;
        return acc(m);
    }
    RobustnessMatrix robustness(const AttackSensitiveMatrix& m) {
        ++robustness_calls;
        return rob(m);
    }
};

/// Accuracy 1 - sum(M)/100: with xi = 0.855 a matrix is feasible exactly
/// when its off-diagonal sum is at most 14.
inline double stub_accuracy(const AttackSensitiveMatrix& m) { return 1.0 - m.off_diagonal_sum() / 100.0; }

/// R[i][j] = base[i][j] + 0.01 * M[i][j].
inline RobustnessMatrix stub_robustness(const AttackSensitiveMatrix& m) {
    const std::vector<std::vector<double>> base{{0, 0.30, 0.50}, {0.20, 0, 0.60}, {0.40, 0.33, 0}};
    std::vector<std::vector<double>> v(3, std::vector<double>(3, 0.0));
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            if (i != j) v[i][j] = std::min(1.0, base[i][j] + 0.01 * m.at(i, j));
    return RobustnessMatrix::from_values(v);
}

inline StubEvaluator stub_evaluator() { return {stub_accuracy, stub_robustness}; }

/// W with (1,2) = 0.5, (0,1) = 0.3 and 0.05 on the other four cells.
inline WeightMatrix stub_weights() { return weights_with_remainder(3, {{{1, 2}, 0.5}, {{0, 1}, 0.3}}); }

struct ExpectedStep {
    SearchAction action;
    std::vector<Cell> cells;
    double sum_before;  // off-diagonal sum of the evaluated M
    std::vector<std::vector<double>> m_after;
};

inline std::vector<std::vector<double>> with_cells(std::vector<std::pair<Cell, double>> set) {
    std::vector<std::vector<double>> m{{0, 1, 1}, {1, 0, 1}, {1, 1, 0}};
    for (const auto& [c, v] : set) m[c.first][c.second] = v;
    return m;
}

/// Algorithm 1 executed by hand against stub_accuracy with xi = 0.855 and
/// delta = 3. Visit order is (1,2), (0,1), then the 0.05 cells row-major.
/// (1,2) climbs 1 -> 4 -> 7 -> 10, sum 15 fails, back to 7. Every later
/// cell: sum 12 passes, +3 gives 15, fails, reverted.
inline std::vector<ExpectedStep> hand_trace_weighted() {
    using A = SearchAction;
    std::vector<ExpectedStep> t{
        {A::increment, {{1, 2}}, 6, with_cells({{{1, 2}, 4}})},
        {A::increment, {{1, 2}}, 9, with_cells({{{1, 2}, 7}})},
        {A::increment, {{1, 2}}, 12, with_cells({{{1, 2}, 10}})},
        {A::revert, {{1, 2}}, 15, with_cells({{{1, 2}, 7}})},
    };
    for (Cell c : std::vector<Cell>{{0, 1}, {0, 2}, {1, 0}, {2, 0}, {2, 1}}) {
        t.push_back({A::increment, {c}, 12, with_cells({{{1, 2}, 7}, {c, 4}})});
        t.push_back({A::revert, {c}, 15, with_cells({{{1, 2}, 7}})});
    }
    return t;
}

/// Algorithm 2 executed by hand against the stubs with xi = 0.855, t = 2,
/// delta = 2.
///   sum 6:  R(1,0)=.21 R(0,1)=.31 lowest -> both +2
///   sum 10: R(1,0)=.23 R(0,1)=.33 R(2,1)=.34 -> (1,0),(0,1) +2
///   sum 14: R(1,0)=.25 R(2,1)=.34 R(0,1)=.35 -> (1,0),(2,1) +2
///   sum 18: infeasible, revert (1,0),(2,1)
inline std::vector<ExpectedStep> hand_trace_lower() {
    using A = SearchAction;
    return {
        {A::increment, {{1, 0}, {0, 1}}, 6, with_cells({{{1, 0}, 3}, {{0, 1}, 3}})},
        {A::increment, {{1, 0}, {0, 1}}, 10, with_cells({{{1, 0}, 5}, {{0, 1}, 5}})},
        {A::increment, {{1, 0}, {2, 1}}, 14, with_cells({{{1, 0}, 7}, {{0, 1}, 5}, {{2, 1}, 3}})},
        {A::revert, {{1, 0}, {2, 1}}, 18, with_cells({{{1, 0}, 5}, {{0, 1}, 5}})},
    };
}

/// Empty string when the trace matches step for step, else a description
/// of the first mismatch.
inline std::string compare_trace(const std::vector<TraceRecord>& got, const std::vector<ExpectedStep>& want) {
    if (got.size() != want.size())
        return "trace has " + std::to_string(got.size()) + " records, expected " + std::to_string(want.size());
    for (std::size_t k = 0; k < want.size(); ++k) {
        const auto& g = got[k];
        const auto& w = want[k];
        const auto where = "step " + std::to_string(k) + ": ";
        if (g.action != w.action) return where + "action " + to_string(g.action) + ", expected " + to_string(w.action);
        if (g.cells != w.cells) return where + "cells differ";
        if (g.m_evaluated.off_diagonal_sum() != w.sum_before) return where + "evaluated M differs";
        if (g.m != AttackSensitiveMatrix::from_rows(w.m_after)) return where + "resulting M differs";
    }
    return {};
}

inline std::string unique_temp_dir(const std::string& stem) {
    const auto base = std::filesystem::temp_directory_path() /
                      (stem + "_" + std::to_string(std::hash<std::string>{}(std::filesystem::current_path().string())) +
                       "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(base);
    std::filesystem::create_directories(base);
    return base.string();
}

struct CliRun {
    int code = -1;
    std::string output;  // stdout and stderr interleaved
};

/// Runs the command-line tool with `args` (already shell-quoted).
inline CliRun run_cli(const std::string& cli, const std::string& args) {
    CliRun r;
    FILE* p = ::popen((cli + " " + args + " 2>&1").c_str(), "r");
    if (!p) return r;
    char buf[4096];
    std::size_t got;
    while ((got = std::fread(buf, 1, sizeof buf, p)) > 0) r.output.append(buf, got);
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

/// A small, fast three-class run config for exercising the tool end to end.
inline std::string tiny_run_config(double epsilon = 0.08, std::size_t attack_steps = 10) {
    return "[run]\nthreads = 1\n"
           "[data]\nsource = blobs\nn_classes = 3\nper_class = 40\ndim = 4\nspread = 0.05\nseed = 4\n"
           "split_train = 0.6\nsplit_val = 0.2\nsplit_test = 0.2\nsplit_seed = 2\n"
           "[model]\nhidden = 12\nseed = 3\n"
           "[loss]\nvariant = combined_v2\nmatrix_ones = true\n"
           "[train]\nepochs = 8\nbatch_size = 16\nlr = 0.1\nshuffle_seed = 5\naugmentation = pgd\n"
           "augment_ratio = 0.5\nrefresh_every = 4\n"
           "[attack]\nkind = pgd\nepsilon = " +
           format_double(epsilon) + "\nalpha = 0.02\nsteps = " + std::to_string(attack_steps) +
           "\nseed = 7\n"
           "[robustness]\nper_pair_cap = 8\neval_set = test\nweights_preset = critical:0:0.5\n"
           "[search]\nxi = 0.5\ndelta = 20\nmax_outer_iters = 2\nbatch_t = 2\ninner_per_pair_cap = 4\n"
           "weights_preset = critical:1:0.6\n";
}

}  // namespace sensdef::testing
