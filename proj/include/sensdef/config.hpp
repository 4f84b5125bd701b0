// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration: one INI file with [run], [data], [model], [loss],
// [train], [attack] (plus optional [attack.NAME]), [robustness], [search]
// and [output] sections. Commands ignore sections they do not use.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "sensdef/attacks.hpp"
#include "sensdef/dataio.hpp"
#include "sensdef/error.hpp"
#include "sensdef/hash.hpp"
#include "sensdef/losses.hpp"
#include "sensdef/robustness.hpp"
#include "sensdef/search.hpp"
#include "sensdef/training.hpp"

namespace sensdef {

enum class DataSource { blobs, csv, idx };

struct DataSection {
    DataSource source = DataSource::blobs;
    std::size_t n_classes = 3;
    // blobs
    std::size_t per_class = 300;
    std::size_t dim = 8;
    double spread = 0.05;
    std::uint64_t seed = 1;
    // csv
    std::string path;
    // idx
    std::string images, labels;
    std::optional<std::size_t> downsample;
    SplitSpec split;
};

struct RobustnessSection {
    RobustnessOptions options;
    /// Which split the matrix is measured on: train, val or test.
    std::string eval_set = "test";
    std::optional<WeightMatrix> weights;
};

struct SearchSection {
    SearchConfig config;
    std::optional<WeightMatrix> weights;
    RobustnessOptions inner;
};

struct RunConfig {
    std::string path;
    std::string sha256;  // of the raw file bytes
    std::size_t threads = 1;
    DataSection data;
    std::vector<std::size_t> hidden{64};
    LossSpec loss;
    TrainConfig train;
    AttackConfig attack;
    RobustnessSection robustness;
    std::optional<SearchSection> search;
    std::string output_dir = "out";

    std::size_t input_dim() const { return data.dim; }
};

namespace detail {

using boost::property_tree::ptree;

inline std::string field(const std::string& section, const std::string& key) { return section + "." + key; }

template <class T>
T get_or(const ptree& pt, const std::string& section, const std::string& key, T fallback) {
    const auto node = pt.get_child_optional(ptree::path_type(section + "/" + key, '/'));
    if (!node) return fallback;
    const std::string raw(trim(node->data()));
    if constexpr (std::is_same_v<T, std::string>) {
        return raw;
    } else if constexpr (std::is_same_v<T, bool>) {
        if (raw == "true" || raw == "1" || raw == "yes") return true;
        if (raw == "false" || raw == "0" || raw == "no") return false;
        throw ValidationError("config: " + field(section, key) + " must be a boolean, got '" + raw + "'");
    } else if constexpr (std::is_floating_point_v<T>) {
        double v = 0.0;
        if (!parse_double(raw, v))
            throw ValidationError("config: " + field(section, key) + " must be a number, got '" + raw + "'");
        return v;
    } else {
        T v{};
        const auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
        if (ec != std::errc{} || p != raw.data() + raw.size())
            throw ValidationError("config: " + field(section, key) + " must be a nonnegative integer, got '" + raw +
                                  "'");
        return v;
    }
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) {
        cur = std::string(trim(cur));
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}

/// Relative paths in the config resolve against the config file's directory.
inline std::string resolve(const std::filesystem::path& base, const std::string& p) {
    if (p.empty()) return p;
    const std::filesystem::path q(p);
    return q.is_absolute() ? p : (base / q).lexically_normal().string();
}

inline std::string require_file(const std::filesystem::path& base, const std::string& section, const std::string& key,
                                const std::string& value) {
    require(!value.empty(), "config: " + field(section, key) + " is required");
    const std::string p = resolve(base, value);
    require(std::filesystem::is_regular_file(p), "config: " + field(section, key) + " file not found: " + p);
    return p;
}

inline AttackSensitiveMatrix parse_inline_matrix(const std::string& text, const std::string& what) {
    std::string csv = text;
    for (auto& ch : csv)
        if (ch == ';') ch = '\n';
    return parse_matrix_csv(csv, what);
}

inline AttackConfig parse_attack_section(const ptree& pt, const std::string& section, const AttackConfig& base) {
    AttackConfig a = base;
    a.kind = parse_attack_kind(get_or<std::string>(pt, section, "kind", to_string(base.kind)));
    a.budget.epsilon = get_or(pt, section, "epsilon", base.budget.epsilon);
    a.budget.alpha = get_or(pt, section, "alpha", base.budget.alpha);
    a.budget.steps = get_or(pt, section, "steps", base.budget.steps);
    a.budget.random_start = get_or(pt, section, "random_start", base.budget.random_start);
    a.cw.c = get_or(pt, section, "cw_c", base.cw.c);
    a.cw.kappa = get_or(pt, section, "cw_kappa", base.cw.kappa);
    a.cw.steps = get_or(pt, section, "cw_steps", base.cw.steps);
    a.cw.step_size = get_or(pt, section, "cw_step_size", base.cw.step_size);
    a.cw.binary_search_steps = get_or(pt, section, "cw_binary_search_steps", base.cw.binary_search_steps);
    a.seed = get_or(pt, section, "seed", base.seed);
    try {
        a.validate();
    } catch (const ValidationError& e) {
        throw ValidationError("config [" + section + "]: " + e.what());
    }
    return a;
}

inline bool has_weights(const ptree& pt, const std::string& section) {
    return pt.get_child_optional(ptree::path_type(section + "/weights", '/')) ||
           pt.get_child_optional(ptree::path_type(section + "/weights_preset", '/'));
}

inline WeightMatrix parse_weights(const ptree& pt, const std::filesystem::path& base, std::size_t n,
                                  const std::string& section) {
    const auto file = get_or<std::string>(pt, section, "weights", "");
    const auto preset = get_or<std::string>(pt, section, "weights_preset", "");
    require(file.empty() || preset.empty(), "config: " + section + ".weights and " + section + ".weights_preset are exclusive");
    if (!file.empty()) {
        auto w = load_weight_csv(require_file(base, section, "weights", file));
        require(w.n() == n, "config: " + section + ".weights has " + std::to_string(w.n()) + " classes, data has " +
                                std::to_string(n));
        return w;
    }
    // "six:SEED" or "critical:CLASS:WEIGHT"
    const auto parts = split_list(preset, ':');
    require(!parts.empty(), "config: " + section + ".weights is empty");
    if (parts[0] == "six") {
        const std::uint64_t seed = parts.size() > 1 ? std::stoull(parts[1]) : 0;
        return six_weight_preset(n, seed);
    }
    double w = 0.0;
    if (parts[0] == "critical" && parts.size() == 3 && parse_double(parts[2], w))
        return critical_class_preset(n, std::stoul(parts[1]), w);
    throw ValidationError("config: unknown " + section + ".weights_preset '" + preset + "'");
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir,
                                  const std::string& source = "<config>") {
    using detail::get_or;
    boost::property_tree::ptree pt;
    try {
        std::istringstream in(text);
        boost::property_tree::ini_parser::read_ini(in, pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ValidationError(source + ":" + std::to_string(e.line()) + ": " + e.message());
    }

    RunConfig cfg;
    cfg.path = source;
    cfg.sha256 = sha256_hex(text);
    cfg.threads = get_or<std::size_t>(pt, "run", "threads", 1);
    detail::require(cfg.threads >= 1, "config: run.threads must be >= 1");

    auto& d = cfg.data;
    const auto src = get_or<std::string>(pt, "data", "source", "blobs");
    if (src == "blobs")
        d.source = DataSource::blobs;
    else if (src == "csv")
        d.source = DataSource::csv;
    else if (src == "idx")
        d.source = DataSource::idx;
    else
        throw ValidationError("config: data.source must be blobs, csv or idx, got '" + src + "'");
    d.n_classes = get_or(pt, "data", "n_classes", d.n_classes);
    d.per_class = get_or(pt, "data", "per_class", d.per_class);
    d.dim = get_or(pt, "data", "dim", d.dim);
    d.spread = get_or(pt, "data", "spread", d.spread);
    d.seed = get_or(pt, "data", "seed", d.seed);
    if (d.source == DataSource::csv) d.path = detail::require_file(base_dir, "data", "path", get_or<std::string>(pt, "data", "path", ""));
    if (d.source == DataSource::idx) {
        d.images = detail::require_file(base_dir, "data", "images", get_or<std::string>(pt, "data", "images", ""));
        d.labels = detail::require_file(base_dir, "data", "labels", get_or<std::string>(pt, "data", "labels", ""));
        const std::size_t ds = get_or<std::size_t>(pt, "data", "downsample", 0);
        if (ds > 0) d.downsample = ds;
    }
    d.split.train = get_or(pt, "data", "split_train", d.split.train);
    d.split.val = get_or(pt, "data", "split_val", d.split.val);
    d.split.test = get_or(pt, "data", "split_test", d.split.test);
    d.split.seed = get_or(pt, "data", "split_seed", d.split.seed);
    detail::require(d.n_classes >= 2, "config: data.n_classes must be >= 2");
    detail::require(d.dim >= 1, "config: data.dim must be >= 1");

    std::vector<std::size_t> hidden;
    for (const auto& w : detail::split_list(get_or<std::string>(pt, "model", "hidden", "64"))) {
        std::size_t v = 0;
        const auto [ptr, ec] = std::from_chars(w.data(), w.data() + w.size(), v);
        detail::require(ec == std::errc{} && ptr == w.data() + w.size(), "config: model.hidden must be a comma list of integers");
        hidden.push_back(v);
        detail::require(hidden.back() > 0, "config: model.hidden widths must be positive integers");
    }
    cfg.hidden = hidden;

    auto& t = cfg.train;
    t.init_seed = get_or(pt, "model", "seed", t.init_seed);
    t.epochs = get_or(pt, "train", "epochs", t.epochs);
    t.batch_size = get_or(pt, "train", "batch_size", t.batch_size);
    t.lr = get_or(pt, "train", "lr", t.lr);
    t.grad_clip = get_or(pt, "train", "grad_clip", t.grad_clip);
    t.shuffle_seed = get_or(pt, "train", "shuffle_seed", t.shuffle_seed);
    t.augmentation = parse_augmentation(get_or<std::string>(pt, "train", "augmentation", "none"));
    t.augment_ratio = get_or(pt, "train", "augment_ratio", t.augment_ratio);
    t.refresh_every = get_or(pt, "train", "refresh_every", t.refresh_every);
    t.threads = cfg.threads;

    cfg.attack = detail::parse_attack_section(pt, "attack", AttackConfig{});
    if (t.augmentation != Augmentation::none) {
        for (const auto& name : detail::split_list(get_or<std::string>(pt, "train", "augment_attacks", "attack"))) {
            detail::require(name == "attack" || pt.get_child_optional(boost::property_tree::ptree::path_type(name, '/')),
                            "config: train.augment_attacks names missing section [" + name + "]");
            t.augment_attacks.push_back(detail::parse_attack_section(pt, name, cfg.attack));
        }
    }

    auto& l = cfg.loss;
    l.variant = parse_loss_variant(get_or<std::string>(pt, "loss", "variant", "cross"));
    l.lambda = get_or(pt, "loss", "lambda", 1.0);
    const auto mfile = get_or<std::string>(pt, "loss", "matrix", "");
    const auto minline = get_or<std::string>(pt, "loss", "matrix_inline", "");
    const double mcap = get_or(pt, "loss", "m_cap", AttackSensitiveMatrix::kDefaultCap);
    if (l.needs_matrix()) {
        if (!minline.empty())
            l.matrix = detail::parse_inline_matrix(minline, "loss.matrix_inline");
        else if (get_or<bool>(pt, "loss", "matrix_ones", false))
            l.matrix = AttackSensitiveMatrix::ones(d.n_classes, mcap);
        else
            l.matrix = load_matrix_csv(detail::require_file(base_dir, "loss", "matrix", mfile), mcap);
    }
    try {
        l.validate(d.n_classes);
    } catch (const ValidationError& e) {
        throw ValidationError(std::string("config [loss]: ") + e.what());
    }

    auto& r = cfg.robustness;
    r.options.per_pair_cap = get_or(pt, "robustness", "per_pair_cap", r.options.per_pair_cap);
    r.options.only_clean_correct = get_or(pt, "robustness", "only_clean_correct", false);
    r.options.threads = cfg.threads;
    r.eval_set = get_or<std::string>(pt, "robustness", "eval_set", r.eval_set);
    detail::require(r.eval_set == "train" || r.eval_set == "val" || r.eval_set == "test",
                    "config: robustness.eval_set must be train, val or test");

    if (detail::has_weights(pt, "robustness"))
        r.weights = detail::parse_weights(pt, base_dir, d.n_classes, "robustness");

    if (pt.get_child_optional("search")) {
        SearchSection s;
        auto& sc = s.config;
        sc.xi = get_or(pt, "search", "xi", sc.xi);
        sc.delta = get_or(pt, "search", "delta", sc.delta);
        sc.batch_t = get_or(pt, "search", "batch_t", sc.batch_t);
        sc.m_cap = get_or(pt, "search", "m_cap", sc.m_cap);
        sc.max_outer_iters = get_or(pt, "search", "max_outer_iters", sc.max_outer_iters);
        sc.loss_variant = parse_loss_variant(get_or<std::string>(pt, "search", "loss_variant", "v2"));
        sc.lambda = get_or(pt, "search", "lambda", sc.lambda);
        try {
            sc.validate();
        } catch (const ValidationError& e) {
            throw ValidationError(std::string("config [search]: ") + e.what());
        }
        if (detail::has_weights(pt, "search")) s.weights = detail::parse_weights(pt, base_dir, d.n_classes, "search");
        s.inner.per_pair_cap = get_or(pt, "search", "inner_per_pair_cap", s.inner.per_pair_cap);
        s.inner.threads = cfg.threads;
        cfg.search = std::move(s);
    }

    cfg.output_dir = detail::resolve(base_dir, get_or<std::string>(pt, "output", "dir", "out"));
    t.layers = [&] {
        std::vector<std::size_t> widths{d.dim};
        widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
        widths.push_back(d.n_classes);
        return mlp_spec(widths);
    }();
    try {
        t.validate();
    } catch (const ValidationError& e) {
        throw ValidationError(std::string("config [train]: ") + e.what());
    }
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    detail::require(std::filesystem::is_regular_file(path), "config file not found: " + path);
    const auto base = std::filesystem::absolute(path).parent_path();
    return parse_run_config(read_text_file(path), base, path);
}

/// Materializes the configured dataset and its stratified split.
inline SplitResult load_data(const RunConfig& cfg) {
    const auto& d = cfg.data;
    Dataset ds;
    switch (d.source) {
        case DataSource::blobs: ds = gen_blobs(d.n_classes, d.per_class, d.dim, d.spread, d.seed); break;
        case DataSource::csv: ds = load_csv(d.path, d.n_classes); break;
        case DataSource::idx: ds = load_idx(d.images, d.labels, d.downsample); break;
    }
    detail::require(ds.n_classes == d.n_classes, "config: data.n_classes is " + std::to_string(d.n_classes) +
                                                     " but the dataset has " + std::to_string(ds.n_classes));
    detail::require(ds.feature_dim == d.dim, "config: data.dim is " + std::to_string(d.dim) +
                                                 " but the dataset has " + std::to_string(ds.feature_dim));
    return split(ds, d.split);
}

inline const Dataset& pick_split(const SplitResult& s, const std::string& name) {
    if (name == "train") return s.train;
    if (name == "val") return s.val;
    return s.test;
}

}  // namespace sensdef
