// SPDX-License-Identifier: Apache-2.0
#pragma once

// Desk-scale experiment scaffolding on synthetic blobs: data with a large
// held-out draw, attack budgets calibrated to the class geometry, and the
// M_{0,1} sweep.

#include <algorithm>
#include <cmath>
#include <vector>

#include "sensdef/dataio.hpp"
#include "sensdef/robustness.hpp"
#include "sensdef/training.hpp"

namespace sensdef {

struct BlobExperiment {
    SplitResult data;  // train / val / test from the first per_class draws
    Dataset held_out;  // further draws from the same class distributions
};

/// Draws per_class + held_per_class samples per class and splits the first
/// per_class of each class. `train_counts`, when given, keeps only that many
/// samples of each class before splitting (class imbalance).
inline BlobExperiment blob_experiment(std::size_t n_classes, std::size_t per_class, std::size_t held_per_class,
                                      std::size_t dim, const std::vector<double>& spreads, std::uint64_t seed,
                                      const SplitSpec& spec, const std::vector<std::size_t>& train_counts = {}) {
    detail::require(train_counts.empty() || train_counts.size() == n_classes,
                    "blob_experiment: need one train count per class");
    const auto all = gen_blobs(n_classes, per_class + held_per_class, dim, spreads, seed);
    Dataset fit{{}, n_classes, dim}, held{{}, n_classes, dim};
    std::vector<std::size_t> seen(n_classes, 0);
    for (const auto& s : all.samples) {
        const std::size_t k = seen[s.label]++;
        if (k >= per_class)
            held.samples.push_back(s);
        else if (train_counts.empty() || k < train_counts[s.label])
            fit.samples.push_back(s);
    }
    return {split(fit, spec), std::move(held)};
}

/// L-inf distance from the class-i mean to the hyperplane bisecting the
/// class-i and class-j means: ||d||_2^2 / (2 ||d||_1) with d the mean gap.
inline double margin_epsilon(const Dataset& ds, ClassIndex i, ClassIndex j) {
    std::vector<double> mi(ds.feature_dim, 0.0), mj(ds.feature_dim, 0.0);
    std::size_t ni = 0, nj = 0;
    for (const auto& s : ds.samples) {
        if (s.label != i && s.label != j) continue;
        auto& m = s.label == i ? mi : mj;
        (s.label == i ? ni : nj) += 1;
        for (std::size_t d = 0; d < ds.feature_dim; ++d) m[d] += s.x[d];
    }
    detail::require(ni > 0 && nj > 0, "margin_epsilon: both classes need samples");
    double l1 = 0.0, l2 = 0.0;
    for (std::size_t d = 0; d < ds.feature_dim; ++d) {
        const double g = mj[d] / static_cast<double>(nj) - mi[d] / static_cast<double>(ni);
        l1 += std::abs(g);
        l2 += g * g;
    }
    detail::require(l1 > 0.0, "margin_epsilon: class means coincide");
    return l2 / (2.0 * l1);
}

/// Median of margin_epsilon over unordered class pairs.
inline double median_margin_epsilon(const Dataset& ds) {
    std::vector<double> e;
    for (ClassIndex i = 0; i < ds.n_classes; ++i)
        for (ClassIndex j = i + 1; j < ds.n_classes; ++j) e.push_back(margin_epsilon(ds, i, j));
    std::sort(e.begin(), e.end());
    const std::size_t h = e.size() / 2;
    return e.size() % 2 ? e[h] : 0.5 * (e[h - 1] + e[h]);
}

/// PGD with alpha = epsilon / alpha_div.
inline AttackConfig pgd_attack(double epsilon, std::size_t steps, double alpha_div, std::uint64_t seed) {
    AttackConfig a;
    a.kind = AttackKind::pgd;
    a.budget.epsilon = epsilon;
    a.budget.alpha = epsilon / alpha_div;
    a.budget.steps = steps;
    a.seed = seed;
    return a;
}

struct SweepPoint {
    double m01 = 0.0;
    double r01 = 0.0;        // R_{0,1} under the evaluation attack
    double clean_acc = 0.0;  // accuracy on the evaluation set
};

/// Trains one model per value of M_{0,1} (other off-diagonal entries 1)
/// with the combined v2 loss and reports R_{0,1} and clean accuracy on `eval`.
inline std::vector<SweepPoint> sweep_m01(const Dataset& train_set, const Dataset& eval, const TrainConfig& train_cfg,
                                         const AttackConfig& eval_attack, const std::vector<double>& values,
                                         double lambda = 1.0) {
    RobustnessOptions ro;
    ro.per_pair_cap = eval.size();
    ro.threads = train_cfg.threads;
    std::vector<SweepPoint> out;
    for (double v : values) {
        auto m = AttackSensitiveMatrix::ones(train_set.n_classes);
        m.set(0, 1, v);
        const auto t = fit(train_set, LossSpec::combined(LossVariant::v2, lambda, m), train_cfg, &eval);
        const auto r = robustness_matrix(t.model, eval, eval_attack, ro);
        out.push_back({v, r.at(0, 1), t.clean_val_accuracy});
    }
    return out;
}

}  // namespace sensdef
