// SPDX-License-Identifier: Apache-2.0
#pragma once

// Targeted attacks against a fixed model: iterative FGSM, PGD with a random
// start, and Carlini-Wagner L2. Inputs and outputs live in [0, 1]^d.
//
// IFGSM and PGD descend the cross entropy toward the target label:
//
//   x <- clip_box(clip_ball(x - alpha * sign(grad_x CE(x, target))))
//
// C&W optimizes w in tanh space, x_adv = (tanh(w) + 1) / 2, minimizing
// |x_adv - x|_2^2 + c * max(max_{i != t} z_i - z_t, -kappa) with Adam.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "sensdef/dataio.hpp"
#include "sensdef/error.hpp"
#include "sensdef/nncore.hpp"
#include "sensdef/parallel.hpp"
#include "sensdef/rng.hpp"

namespace sensdef {

struct AttackBudget {
    double epsilon = 0.05;
    double alpha = 0.005;
    std::size_t steps = 20;
    bool random_start = true;

    void validate() const {
        detail::require(std::isfinite(epsilon) && epsilon >= 0.0, "attack budget: epsilon must be >= 0");
        detail::require(steps == 0 || (std::isfinite(alpha) && alpha > 0.0),
                        "attack budget: alpha must be > 0 when steps > 0");
    }
};

struct CWConfig {
    double c = 1.0;
    double kappa = 0.0;
    std::size_t steps = 200;
    double step_size = 0.01;
    /// Rounds of binary search over c; 0 keeps c fixed.
    std::size_t binary_search_steps = 0;

    void validate() const {
        detail::require(std::isfinite(c) && c > 0.0, "cw: c must be > 0");
        detail::require(std::isfinite(kappa) && kappa >= 0.0, "cw: kappa must be >= 0");
        detail::require(steps > 0, "cw: steps must be > 0");
        detail::require(std::isfinite(step_size) && step_size > 0.0, "cw: step_size must be > 0");
    }
};

enum class AttackKind { ifgsm, pgd, cw };

inline std::string to_string(AttackKind k) {
    switch (k) {
        case AttackKind::ifgsm: return "ifgsm";
        case AttackKind::pgd: return "pgd";
        case AttackKind::cw: return "cw";
    }
    return "?";
}

inline AttackKind parse_attack_kind(const std::string& s) {
    if (s == "ifgsm") return AttackKind::ifgsm;
    if (s == "pgd") return AttackKind::pgd;
    if (s == "cw") return AttackKind::cw;
    throw ValidationError("unknown attack kind '" + s + "'");
}

struct AttackConfig {
    AttackKind kind = AttackKind::pgd;
    AttackBudget budget;
    CWConfig cw;
    std::uint64_t seed = 0;

    void validate() const {
        if (kind == AttackKind::cw)
            cw.validate();
        else
            budget.validate();
    }
};

struct AdversarialResult {
    Tensor x_adv;
    ClassIndex predicted = 0;
    bool success = false;
    double linf_norm = 0.0;
    double l2_norm = 0.0;
    std::size_t steps_used = 0;
};

namespace detail {

inline void check_attack_input(const Model& m, std::span<const double> x, ClassIndex target) {
    check_input(m, x);
    require(target < m.n_classes, "attack: target " + std::to_string(target) + " out of range");
    for (double v : x) require(v >= 0.0 && v <= 1.0, "attack: input outside [0,1]");
}

inline AdversarialResult finish(const Model& m, std::span<const double> x, std::vector<double> x_adv,
                                ClassIndex target, std::size_t steps_used) {
    AdversarialResult r;
    r.linf_norm = linf_distance(x_adv, x);
    r.l2_norm = l2_distance(x_adv, x);
    r.predicted = predict(m, x_adv);
    r.success = r.predicted == target;
    r.steps_used = steps_used;
    r.x_adv = Tensor::vector(std::move(x_adv));
    return r;
}

/// Projects onto the L-inf ball around x intersected with the unit box.
inline void project(std::span<double> x_adv, std::span<const double> x, double eps) {
    for (std::size_t i = 0; i < x_adv.size(); ++i) {
        const double lo = std::max(0.0, x[i] - eps);
        const double hi = std::min(1.0, x[i] + eps);
        x_adv[i] = std::clamp(x_adv[i], lo, hi);
    }
}

inline AdversarialResult linf_descent(const Model& m, std::span<const double> x, std::vector<double> start,
                                      ClassIndex target, const AttackBudget& budget) {
    const LossSpec ce = LossSpec::cross_entropy();
    std::vector<double> cur = std::move(start);
    for (std::size_t s = 0; s < budget.steps; ++s) {
        const auto g = loss_grad_input(m, cur, target, ce);
        for (std::size_t i = 0; i < cur.size(); ++i) {
            const double sg = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
            cur[i] -= budget.alpha * sg;
        }
        project(cur, x, budget.epsilon);
    }
    return finish(m, x, std::move(cur), target, budget.steps);
}

}  // namespace detail

inline AdversarialResult ifgsm_targeted(const Model& m, std::span<const double> x, ClassIndex target,
                                        const AttackBudget& budget) {
    detail::check_attack_input(m, x, target);
    budget.validate();
    return detail::linf_descent(m, x, std::vector<double>(x.begin(), x.end()), target, budget);
}

/// PGD; with random_start (and steps > 0) the first iterate is
/// clip_box(x + U(-eps, eps)).
inline AdversarialResult pgd_targeted(const Model& m, std::span<const double> x, ClassIndex target,
                                      const AttackBudget& budget, std::uint64_t rng_seed) {
    detail::check_attack_input(m, x, target);
    budget.validate();
    std::vector<double> start(x.begin(), x.end());
    // No iterations means no attack, so the random start is skipped too.
    if (budget.random_start && budget.epsilon > 0.0 && budget.steps > 0) {
        Rng rng(rng_seed);
        for (auto& v : start) v = std::clamp(v + rng.uniform(-budget.epsilon, budget.epsilon), 0.0, 1.0);
    }
    return detail::linf_descent(m, x, std::move(start), target, budget);
}

namespace detail {

struct CWRun {
    std::vector<double> best;  // empty when no successful iterate
    double best_l2 = std::numeric_limits<double>::infinity();
    std::vector<double> last;
};

inline CWRun cw_single(const Model& m, std::span<const double> x, ClassIndex target, const CWConfig& cfg, double c) {
    const std::size_t d = x.size();
    // Shrink toward the center so atanh stays finite at the box edges.
    constexpr double kShrink = 1.0 - 1e-9;
    std::vector<double> w(d), x_adv(d), mom(d, 0.0), vel(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) w[i] = std::atanh((2.0 * x[i] - 1.0) * kShrink);

    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;
    double beta1_pow = 1.0, beta2_pow = 1.0;
    CWRun run;
    for (std::size_t s = 0;; ++s) {
        for (std::size_t i = 0; i < d; ++i) x_adv[i] = (std::tanh(w[i]) + 1.0) / 2.0;
        const auto tr = forward(m, x_adv);
        const auto& z = tr.logits.data;
        const auto& p = tr.probs.data;
        const auto pred = static_cast<ClassIndex>(std::max_element(p.begin(), p.end()) - p.begin());
        if (pred == target) {
            const double l2 = l2_distance(x_adv, x);
            if (l2 < run.best_l2) {
                run.best_l2 = l2;
                run.best = x_adv;
            }
        }
        if (s == cfg.steps) break;

        std::size_t other = target == 0 ? 1 : 0;
        for (std::size_t i = 0; i < z.size(); ++i)
            if (i != target && z[i] > z[other]) other = i;
        const double margin = z[other] - z[target];

        std::vector<double> gx(d);
        for (std::size_t i = 0; i < d; ++i) gx[i] = 2.0 * (x_adv[i] - x[i]);
        if (margin > -cfg.kappa) {
            std::vector<double> dz(z.size(), 0.0);
            dz[other] = c;
            dz[target] = -c;
            const auto gm = backward_from_logits(m, tr, dz, nullptr, true);
            for (std::size_t i = 0; i < d; ++i) gx[i] += gm[i];
        }
        beta1_pow *= kBeta1;
        beta2_pow *= kBeta2;
        for (std::size_t i = 0; i < d; ++i) {
            const double th = std::tanh(w[i]);
            const double gw = gx[i] * (1.0 - th * th) / 2.0;
            mom[i] = kBeta1 * mom[i] + (1.0 - kBeta1) * gw;
            vel[i] = kBeta2 * vel[i] + (1.0 - kBeta2) * gw * gw;
            const double mhat = mom[i] / (1.0 - beta1_pow);
            const double vhat = vel[i] / (1.0 - beta2_pow);
            w[i] -= cfg.step_size * mhat / (std::sqrt(vhat) + kAdamEps);
        }
    }
    run.last = x_adv;
    return run;
}

}  // namespace detail

/// Returns the smallest-L2 successful iterate, else the final iterate with
/// success = false.
inline AdversarialResult cw_l2_targeted(const Model& m, std::span<const double> x, ClassIndex target,
                                        const CWConfig& cfg) {
    detail::check_attack_input(m, x, target);
    cfg.validate();
    if (cfg.binary_search_steps == 0) {
        auto run = detail::cw_single(m, x, target, cfg, cfg.c);
        return detail::finish(m, x, run.best.empty() ? std::move(run.last) : std::move(run.best), target, cfg.steps);
    }
    double lo = 0.0, hi = std::numeric_limits<double>::infinity(), c = cfg.c;
    std::vector<double> best, last;
    double best_l2 = std::numeric_limits<double>::infinity();
    for (std::size_t round = 0; round < cfg.binary_search_steps; ++round) {
        auto run = detail::cw_single(m, x, target, cfg, c);
        if (!run.best.empty()) {
            if (run.best_l2 < best_l2) {
                best_l2 = run.best_l2;
                best = std::move(run.best);
            }
            hi = std::min(hi, c);
            c = (lo + hi) / 2.0;
        } else {
            lo = std::max(lo, c);
            c = std::isinf(hi) ? c * 10.0 : (lo + hi) / 2.0;
        }
        last = std::move(run.last);
    }
    return detail::finish(m, x, best.empty() ? std::move(last) : std::move(best), target,
                          cfg.steps * cfg.binary_search_steps);
}

/// Dispatches on cfg.kind; `sample_seed` drives the PGD random start.
inline AdversarialResult craft(const Model& m, std::span<const double> x, ClassIndex target, const AttackConfig& cfg,
                               std::uint64_t sample_seed) {
    switch (cfg.kind) {
        case AttackKind::ifgsm: return ifgsm_targeted(m, x, target, cfg.budget);
        case AttackKind::pgd: return pgd_targeted(m, x, target, cfg.budget, sample_seed);
        case AttackKind::cw: return cw_l2_targeted(m, x, target, cfg.cw);
    }
    return {};
}

/// One result per sample, in input order. Sample k uses the seed
/// derive_seed(seed, k), so the output does not depend on `threads`.
inline std::vector<AdversarialResult> craft_pairset(const Model& m, std::span<const Sample> samples, ClassIndex source,
                                                    ClassIndex target, const AttackConfig& cfg, std::uint64_t seed,
                                                    std::size_t threads = 1) {
    detail::require(source != target, "craft_pairset: source and target must differ");
    detail::require(source < m.n_classes && target < m.n_classes, "craft_pairset: class out of range");
    cfg.validate();
    for (std::size_t k = 0; k < samples.size(); ++k)
        detail::require(samples[k].label == source, "craft_pairset: sample " + std::to_string(k) + " has label " +
                                                        std::to_string(samples[k].label) + ", expected " +
                                                        std::to_string(source));
    std::vector<AdversarialResult> out(samples.size());
    parallel_for(samples.size(), threads,
                 [&](std::size_t k) { out[k] = craft(m, samples[k].x.view(), target, cfg, derive_seed(seed, k)); });
    return out;
}

inline std::vector<AdversarialResult> craft_pairset(const Model& m, std::span<const Sample> samples, ClassIndex source,
                                                    ClassIndex target, const AttackConfig& cfg) {
    return craft_pairset(m, samples, source, target, cfg, cfg.seed, 1);
}

/// CSV rows: sample_index,source,target,success,linf,l2,steps_used.
inline std::string results_to_csv(std::span<const AdversarialResult> results, ClassIndex source, ClassIndex target) {
    std::string out = "sample_index,source,target,success,linf,l2,steps_used\n";
    for (std::size_t k = 0; k < results.size(); ++k) {
        const auto& r = results[k];
        out += std::to_string(k) + ',' + std::to_string(source) + ',' + std::to_string(target) + ',' +
               (r.success ? "1" : "0") + ',' + format_double(r.linf_norm) + ',' + format_double(r.l2_norm) + ',' +
               std::to_string(r.steps_used) + '\n';
    }
    return out;
}

}  // namespace sensdef
