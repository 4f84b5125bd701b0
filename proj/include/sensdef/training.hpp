// SPDX-License-Identifier: Apache-2.0
#pragma once

// Mini-batch SGD on any LossSpec, plus two adversarial training schemes:
// PGD augmentation and ensemble augmentation (IFGSM + PGD + C&W). Augmented
// samples keep the label of the clean sample they came from.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "sensdef/attacks.hpp"
#include "sensdef/dataio.hpp"
#include "sensdef/error.hpp"
#include "sensdef/hash.hpp"
#include "sensdef/losses.hpp"
#include "sensdef/nncore.hpp"
#include "sensdef/parallel.hpp"
#include "sensdef/robustness.hpp"

namespace sensdef {

enum class Augmentation { none, pgd, ensemble };

inline std::string to_string(Augmentation a) {
    switch (a) {
        case Augmentation::none: return "none";
        case Augmentation::pgd: return "pgd";
        case Augmentation::ensemble: return "ensemble";
    }
    return "?";
}

inline Augmentation parse_augmentation(const std::string& s) {
    if (s == "none") return Augmentation::none;
    if (s == "pgd") return Augmentation::pgd;
    if (s == "ensemble") return Augmentation::ensemble;
    throw ValidationError("unknown augmentation '" + s + "'");
}

struct TrainConfig {
    std::vector<LayerSpec> layers;
    std::size_t epochs = 50;
    std::size_t batch_size = 32;
    double lr = 0.1;
    /// Rescale each batch gradient to at most this global L2 norm; 0 disables.
    double grad_clip = 0.0;
    std::uint64_t init_seed = 1;
    std::uint64_t shuffle_seed = 2;
    Augmentation augmentation = Augmentation::none;
    /// pgd uses the first entry; ensemble cycles through all of them.
    std::vector<AttackConfig> augment_attacks;
    double augment_ratio = 0.5;
    std::size_t refresh_every = 5;
    std::size_t threads = 1;

    void validate() const {
        detail::require(batch_size >= 1, "train: batch_size must be >= 1");
        detail::require(std::isfinite(lr) && lr > 0.0, "train: lr must be > 0");
        detail::require(std::isfinite(grad_clip) && grad_clip >= 0.0, "train: grad_clip must be >= 0");
        detail::require(augment_ratio >= 0.0 && augment_ratio <= 1.0, "train: augment_ratio must be in [0,1]");
        detail::require(refresh_every >= 1, "train: refresh_every must be >= 1");
        if (augmentation != Augmentation::none) {
            detail::require(!augment_attacks.empty(), "train: augmentation needs at least one attack config");
            for (const auto& a : augment_attacks) a.validate();
        }
    }
};

struct TrainedModel {
    Model model;
    double final_train_loss = 0.0;
    double clean_val_accuracy = 0.0;
    std::vector<double> loss_curve;
    std::string fingerprint;
    std::string canonical_config;
};

inline nlohmann::json attack_to_json(const AttackConfig& a) {
    return {{"kind", to_string(a.kind)},
            {"epsilon", a.budget.epsilon},
            {"alpha", a.budget.alpha},
            {"steps", a.budget.steps},
            {"random_start", a.budget.random_start},
            {"cw_c", a.cw.c},
            {"cw_kappa", a.cw.kappa},
            {"cw_steps", a.cw.steps},
            {"cw_step_size", a.cw.step_size},
            {"cw_binary_search_steps", a.cw.binary_search_steps},
            {"seed", a.seed}};
}

/// Canonical JSON (sorted keys) for a training run; its SHA-256 is the fingerprint.
inline std::string canonical_train_config(const TrainConfig& cfg, const LossSpec& loss) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : cfg.layers)
        layers.push_back(l.kind == LayerKind::affine ? nlohmann::json{{"affine", {l.in_dim, l.out_dim}}}
                                                     : nlohmann::json("relu"));
    nlohmann::json attacks = nlohmann::json::array();
    for (const auto& a : cfg.augment_attacks) attacks.push_back(attack_to_json(a));
    nlohmann::json j = {{"layers", layers},
                        {"epochs", cfg.epochs},
                        {"batch_size", cfg.batch_size},
                        {"lr", cfg.lr},
                        {"grad_clip", cfg.grad_clip},
                        {"init_seed", cfg.init_seed},
                        {"shuffle_seed", cfg.shuffle_seed},
                        {"augmentation", to_string(cfg.augmentation)},
                        {"augment_attacks", attacks},
                        {"augment_ratio", cfg.augment_ratio},
                        {"refresh_every", cfg.refresh_every},
                        {"loss_variant", to_string(loss.variant)},
                        {"lambda", loss.lambda},
                        {"matrix", loss.matrix ? nlohmann::json(loss.matrix->entries()) : nlohmann::json(nullptr)}};
    return j.dump();
}

namespace detail {

/// Rotating wrong-label target for the s-th augmented sample.
inline ClassIndex rotation_target(ClassIndex label, std::size_t s, std::size_t n_classes) {
    return (label + 1 + s % (n_classes - 1)) % n_classes;
}

inline std::vector<std::size_t> augment_subsample(std::size_t k, double ratio, std::uint64_t seed) {
    std::vector<std::size_t> idx(k);
    for (std::size_t i = 0; i < k; ++i) idx[i] = i;
    Rng rng(seed);
    rng.shuffle(idx);
    idx.resize(static_cast<std::size_t>(std::llround(ratio * static_cast<double>(k))));
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline Dataset augment_with(const Model& m, const Dataset& train_set, const std::vector<AttackConfig>& attacks,
                            double ratio, std::uint64_t seed, std::size_t threads) {
    detail::require(ratio >= 0.0 && ratio <= 1.0, "augment: ratio must be in [0,1]");
    detail::require(!attacks.empty(), "augment: no attack configs");
    for (const auto& a : attacks) a.validate();
    const auto picked = augment_subsample(train_set.size(), ratio, seed);
    std::vector<Sample> extra(picked.size());
    parallel_for(picked.size(), threads, [&](std::size_t s) {
        const Sample& src = train_set.samples[picked[s]];
        const auto target = rotation_target(src.label, s, m.n_classes);
        const auto& attack = attacks[s % attacks.size()];
        extra[s] = {craft(m, src.x.view(), target, attack, derive_seed(seed, s)).x_adv, src.label};
    });
    Dataset out = train_set;
    out.samples.insert(out.samples.end(), std::make_move_iterator(extra.begin()), std::make_move_iterator(extra.end()));
    return out;
}

}  // namespace detail

/// Appends round(ratio*k) PGD examples crafted from a seeded subsample.
inline Dataset augment_pgd(const Model& m, const Dataset& train_set, const AttackConfig& attack, double ratio,
                           std::uint64_t seed, std::size_t threads = 1) {
    return detail::augment_with(m, train_set, {attack}, ratio, seed, threads);
}

/// Like augment_pgd, but the s-th selected sample is attacked with
/// attacks[s % attacks.size()].
inline Dataset augment_ensemble(const Model& m, const Dataset& train_set, const std::vector<AttackConfig>& attacks,
                                double ratio, std::uint64_t seed, std::size_t threads = 1) {
    return detail::augment_with(m, train_set, attacks, ratio, seed, threads);
}

inline double gradient_norm(const ParamGradients& g) {
    double s = 0.0;
    for (const auto& p : g) {
        for (double v : p.weight.data) s += v * v;
        for (double v : p.bias.data) s += v * v;
    }
    return std::sqrt(s);
}

inline void clip_gradients(ParamGradients& g, double max_norm) {
    const double norm = gradient_norm(g);
    if (!(norm > max_norm)) return;
    const double scale = max_norm / norm;
    for (auto& p : g) {
        for (double& v : p.weight.data) v *= scale;
        for (double& v : p.bias.data) v *= scale;
    }
}

namespace detail {

/// One epoch of mini-batch SGD; returns the mean per-sample loss.
inline double run_epoch(Model& m, const Dataset& data, const LossSpec& loss, const TrainConfig& cfg, std::size_t epoch) {
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg.shuffle_seed, epoch));
    rng.shuffle(order);
    double total = 0.0;
    std::vector<LabeledRef> batch;
    for (std::size_t start = 0, b = 0; start < order.size(); start += cfg.batch_size, ++b) {
        batch.clear();
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        for (std::size_t p = start; p < end; ++p) batch.push_back({data.samples[order[p]].x.view(), data.samples[order[p]].label});
        double batch_loss = 0.0;
        auto grads = loss_grad_params(m, batch, loss, &batch_loss);
        if (!std::isfinite(batch_loss))
            throw DivergenceError(epoch, b, "training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                                                ", batch " + std::to_string(b));
        if (cfg.grad_clip > 0.0) clip_gradients(grads, cfg.grad_clip);
        sgd_step(m, grads, cfg.lr);
        total += batch_loss * static_cast<double>(end - start);
    }
    return total / static_cast<double>(data.size());
}

inline TrainedModel finish_training(Model m, std::vector<double> curve, const Dataset& train_set, const Dataset* val,
                                    const TrainConfig& cfg, const LossSpec& loss) {
    TrainedModel out;
    out.clean_val_accuracy = legitimate_accuracy(m, val ? *val : train_set);
    out.model = std::move(m);
    out.final_train_loss = curve.empty() ? 0.0 : curve.back();
    out.loss_curve = std::move(curve);
    out.canonical_config = canonical_train_config(cfg, loss);
    out.fingerprint = sha256_hex(out.canonical_config);
    return out;
}

}  // namespace detail

/// Plain training from a fresh initialization. Accuracy is measured on
/// `val` when given, otherwise on the training set.
inline TrainedModel train(const Dataset& train_set, const LossSpec& loss, const TrainConfig& cfg,
                          const Dataset* val = nullptr) {
    detail::require(!train_set.empty(), "train: empty training set");
    cfg.validate();
    loss.validate(train_set.n_classes);
    Model m = build_model(cfg.layers, train_set.n_classes, cfg.init_seed);
    detail::require(m.input_dim() == train_set.feature_dim, "train: model input dim does not match dataset");
    std::vector<double> curve;
    for (std::size_t e = 0; e < cfg.epochs; ++e) curve.push_back(detail::run_epoch(m, train_set, loss, cfg, e));
    return detail::finish_training(std::move(m), std::move(curve), train_set, val, cfg, loss);
}

/// Training with adversarial examples regenerated against the current
/// model every cfg.refresh_every epochs (round r uses seed derive_seed(shuffle_seed ^ 0xA5, r)).
inline TrainedModel adversarial_train(const Dataset& train_set, const LossSpec& loss, const TrainConfig& cfg,
                                      const Dataset* val = nullptr) {
    detail::require(cfg.augmentation != Augmentation::none, "adversarial_train: augmentation must be pgd or ensemble");
    detail::require(!train_set.empty(), "train: empty training set");
    cfg.validate();
    loss.validate(train_set.n_classes);
    Model m = build_model(cfg.layers, train_set.n_classes, cfg.init_seed);
    detail::require(m.input_dim() == train_set.feature_dim, "train: model input dim does not match dataset");
    std::vector<double> curve;
    Dataset augmented;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        if (e % cfg.refresh_every == 0) {
            const std::uint64_t seed = derive_seed(cfg.shuffle_seed ^ 0xA5, e / cfg.refresh_every);
            augmented = cfg.augmentation == Augmentation::pgd
                            ? augment_pgd(m, train_set, cfg.augment_attacks.front(), cfg.augment_ratio, seed, cfg.threads)
                            : augment_ensemble(m, train_set, cfg.augment_attacks, cfg.augment_ratio, seed, cfg.threads);
        }
        curve.push_back(detail::run_epoch(m, augmented, loss, cfg, e));
    }
    return detail::finish_training(std::move(m), std::move(curve), train_set, val, cfg, loss);
}

/// Dispatches on cfg.augmentation.
inline TrainedModel fit(const Dataset& train_set, const LossSpec& loss, const TrainConfig& cfg,
                        const Dataset* val = nullptr) {
    return cfg.augmentation == Augmentation::none ? train(train_set, loss, cfg, val)
                                                  : adversarial_train(train_set, loss, cfg, val);
}

inline nlohmann::json metrics_to_json(const TrainedModel& t) {
    return {{"fingerprint", t.fingerprint},
            {"config", nlohmann::json::parse(t.canonical_config)},
            {"final_train_loss", t.final_train_loss},
            {"clean_val_accuracy", t.clean_val_accuracy},
            {"loss_curve", t.loss_curve}};
}

}  // namespace sensdef
