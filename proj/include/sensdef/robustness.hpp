// SPDX-License-Identifier: Apache-2.0
#pragma once

// Per-pair robustness R[i][j]: the fraction of adversarial examples crafted
// from class i toward class j that the model still labels i. Cells with no
// crafted examples are empty, never zero.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sensdef/attacks.hpp"
#include "sensdef/csv.hpp"
#include "sensdef/dataio.hpp"
#include "sensdef/error.hpp"
#include "sensdef/nncore.hpp"
#include "sensdef/parallel.hpp"

namespace sensdef {

using Cell = std::pair<std::size_t, std::size_t>;

class RobustnessMatrix {
  public:
    RobustnessMatrix() = default;
    explicit RobustnessMatrix(std::size_t n) : n_(n), correct_(n * n, 0), crafted_(n * n, 0) {}

    /// Builds a matrix directly from values; every off-diagonal cell gets a
    /// single pseudo-count so it reads as non-empty. Used for stubs and tests.
    static RobustnessMatrix from_values(const std::vector<std::vector<double>>& rows) {
        const std::size_t n = rows.size();
        RobustnessMatrix r(n);
        r.override_.assign(n * n, std::numeric_limits<double>::quiet_NaN());
        for (std::size_t i = 0; i < n; ++i) {
            detail::require(rows[i].size() == n, "robustness matrix: ragged rows");
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) continue;
                const double v = rows[i][j];
                if (std::isnan(v)) continue;
                detail::require(v >= 0.0 && v <= 1.0, "robustness matrix: value outside [0,1]");
                r.crafted_[i * n + j] = 1;
                r.override_[i * n + j] = v;
            }
        }
        return r;
    }

    std::size_t n() const noexcept { return n_; }

    void set_counts(std::size_t i, std::size_t j, std::size_t correct, std::size_t crafted) {
        detail::require(i != j && i < n_ && j < n_, "robustness matrix: bad cell");
        detail::require(correct <= crafted, "robustness matrix: correct count exceeds crafted");
        correct_[i * n_ + j] = correct;
        crafted_[i * n_ + j] = crafted;
    }

    std::size_t correct(std::size_t i, std::size_t j) const { return correct_[i * n_ + j]; }
    std::size_t crafted(std::size_t i, std::size_t j) const { return crafted_[i * n_ + j]; }
    bool empty(std::size_t i, std::size_t j) const { return i == j || crafted_[i * n_ + j] == 0; }

    /// R[i][j], or nullopt on the diagonal and for empty cells.
    std::optional<double> value(std::size_t i, std::size_t j) const {
        if (empty(i, j)) return std::nullopt;
        if (!override_.empty()) return override_[i * n_ + j];
        return static_cast<double>(correct(i, j)) / static_cast<double>(crafted(i, j));
    }

    double at(std::size_t i, std::size_t j) const {
        const auto v = value(i, j);
        detail::require(v.has_value(), "robustness matrix: cell (" + std::to_string(i) + "," + std::to_string(j) +
                                           ") is empty");
        return *v;
    }

    friend bool operator==(const RobustnessMatrix&, const RobustnessMatrix&) = default;

  private:
    std::size_t n_ = 0;
    std::vector<std::size_t> correct_;
    std::vector<std::size_t> crafted_;
    std::vector<double> override_;
};

class WeightMatrix {
  public:
    WeightMatrix() = default;

    static WeightMatrix from_rows(const std::vector<std::vector<double>>& rows) {
        WeightMatrix w;
        w.n_ = rows.size();
        detail::require(w.n_ >= 2, "weight matrix: need at least 2 classes");
        double sum = 0.0;
        for (std::size_t i = 0; i < w.n_; ++i) {
            detail::require(rows[i].size() == w.n_, "weight matrix: row " + std::to_string(i) + " has wrong length");
            for (std::size_t j = 0; j < w.n_; ++j) {
                const double v = rows[i][j];
                detail::require(std::isfinite(v) && v >= 0.0, "weight matrix: negative or non-finite entry at (" +
                                                                  std::to_string(i) + "," + std::to_string(j) + ")");
                if (i == j) detail::require(v == 0.0, "weight matrix: diagonal entry " + std::to_string(i) + " must be 0");
                w.entries_.push_back(v);
                sum += v;
            }
        }
        detail::require(std::abs(sum - 1.0) <= 1e-9, "weight matrix: entries sum to " + format_double(sum) + ", not 1");
        return w;
    }

    std::size_t n() const noexcept { return n_; }
    double at(std::size_t i, std::size_t j) const { return entries_[i * n_ + j]; }

  private:
    std::size_t n_ = 0;
    std::vector<double> entries_;
};

/// Designated cells get their given weight; the remaining mass is spread
/// uniformly over every other off-diagonal cell.
inline WeightMatrix weights_with_remainder(std::size_t n, const std::vector<std::pair<Cell, double>>& designated) {
    detail::require(n >= 2, "weights: need at least 2 classes");
    std::vector<std::vector<double>> rows(n, std::vector<double>(n, 0.0));
    std::vector<std::vector<bool>> fixed(n, std::vector<bool>(n, false));
    double mass = 0.0;
    for (const auto& [cell, w] : designated) {
        const auto [i, j] = cell;
        detail::require(i < n && j < n && i != j, "weights: designated cell must be off-diagonal and in range");
        detail::require(!fixed[i][j], "weights: cell designated twice");
        fixed[i][j] = true;
        rows[i][j] = w;
        mass += w;
    }
    const std::size_t free_cells = n * (n - 1) - designated.size();
    const double rest = 1.0 - mass;
    detail::require(rest >= -1e-12, "weights: designated weights exceed 1");
    if (free_cells == 0) {
        detail::require(std::abs(rest) <= 1e-9, "weights: no free cells left for remaining mass " + format_double(rest));
    } else {
        const double each = std::max(rest, 0.0) / static_cast<double>(free_cells);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (i != j && !fixed[i][j]) rows[i][j] = each;
    }
    return WeightMatrix::from_rows(rows);
}

/// Six randomly chosen cells weighted 0.4, 0.2, 0.08, 0.06, 0.04, 0.02 with
/// the rest uniform. Needs n*(n-1) > 6 so the remaining 0.2 has somewhere to go.
inline std::vector<double> six_weight_scheme() { return {0.4, 0.2, 0.08, 0.06, 0.04, 0.02}; }

inline WeightMatrix six_weight_preset(std::size_t n, std::uint64_t seed) {
    const auto weights = six_weight_scheme();
    detail::require(n * (n - 1) > weights.size(), "six-weight preset needs more than 6 off-diagonal cells (n >= 4)");
    std::vector<Cell> cells;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) cells.emplace_back(i, j);
    Rng rng(seed);
    rng.shuffle(cells);
    std::vector<std::pair<Cell, double>> designated;
    for (std::size_t k = 0; k < weights.size(); ++k) designated.emplace_back(cells[k], weights[k]);
    return weights_with_remainder(n, designated);
}

/// Mass w spread uniformly over row k (attacks from the critical class);
/// the remaining 1 - w spread uniformly over every other off-diagonal cell.
inline WeightMatrix critical_class_preset(std::size_t n, std::size_t k, double w) {
    detail::require(k < n && n >= 3, "critical class preset: need n >= 3 and k < n");
    detail::require(w > 0.0 && w < 1.0, "critical class preset: mass must be in (0,1)");
    std::vector<std::vector<double>> rows(n, std::vector<double>(n, 0.0));
    const double row_each = w / static_cast<double>(n - 1);
    const double rest_each = (1.0 - w) / static_cast<double>((n - 1) * (n - 1));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) rows[i][j] = i == k ? row_each : rest_each;
    return WeightMatrix::from_rows(rows);
}

inline WeightMatrix load_weight_csv(const std::string& path) {
    const auto rows = parse_csv_matrix(read_text_file(path), path);
    try {
        return WeightMatrix::from_rows(rows);
    } catch (const ValidationError& e) {
        throw ValidationError(path + ": " + e.what());
    }
}

struct RobustnessOptions {
    std::size_t per_pair_cap = 25;
    /// Attack only samples the clean model already classifies correctly.
    bool only_clean_correct = false;
    std::size_t threads = 1;
};

/// Generic form: `craft(x, source, target, k)` returns the adversarial input
/// for the k-th selected class-`source` sample. Cells are filled in
/// row-major order; cells may be crafted concurrently.
template <class CraftFn>
RobustnessMatrix robustness_matrix_with(const Model& m, const Dataset& eval_set, CraftFn&& craft_fn,
                                        const RobustnessOptions& opt) {
    detail::require(!eval_set.empty(), "robustness: empty evaluation set");
    detail::require(opt.per_pair_cap >= 1, "robustness: per_pair_cap must be >= 1");
    detail::require(eval_set.n_classes == m.n_classes, "robustness: dataset has " +
                                                           std::to_string(eval_set.n_classes) + " classes, model has " +
                                                           std::to_string(m.n_classes));
    const std::size_t n = m.n_classes;
    std::vector<std::vector<const Sample*>> pools(n);
    for (ClassIndex c = 0; c < n; ++c) {
        for (const Sample* s : eval_set.of_class(c)) {
            if (pools[c].size() == opt.per_pair_cap) break;
            if (opt.only_clean_correct && predict(m, s->x) != c) continue;
            pools[c].push_back(s);
        }
    }
    std::vector<Cell> cells;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) cells.emplace_back(i, j);
    std::vector<std::size_t> correct(cells.size(), 0);
    parallel_for(cells.size(), opt.threads, [&](std::size_t c) {
        const auto [i, j] = cells[c];
        for (std::size_t k = 0; k < pools[i].size(); ++k) {
            const Tensor x_adv = craft_fn(pools[i][k]->x, i, j, k);
            if (predict(m, x_adv) == i) ++correct[c];
        }
    });
    RobustnessMatrix r(n);
    for (std::size_t c = 0; c < cells.size(); ++c)
        r.set_counts(cells[c].first, cells[c].second, correct[c], pools[cells[c].first].size());
    return r;
}

/// Sample k of cell (i, j) is attacked with seed derive_seed(attack.seed, (i*n + j)*per_pair_cap + k).
inline RobustnessMatrix robustness_matrix(const Model& m, const Dataset& eval_set, const AttackConfig& attack,
                                          const RobustnessOptions& opt = {}) {
    attack.validate();
    const std::size_t n = m.n_classes;
    return robustness_matrix_with(
        m, eval_set,
        [&](const Tensor& x, std::size_t i, std::size_t j, std::size_t k) {
            const std::uint64_t s = derive_seed(attack.seed, (i * n + j) * opt.per_pair_cap + k);
            return craft(m, x.view(), j, attack, s).x_adv;
        },
        opt);
}

/// Weighted average over off-diagonal cells. Any cell carrying positive
/// weight must be non-empty.
inline double weighted_average(const RobustnessMatrix& r, const WeightMatrix& w) {
    detail::require(r.n() == w.n(), "weighted_average: dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < r.n(); ++i)
        for (std::size_t j = 0; j < r.n(); ++j) {
            if (i == j || w.at(i, j) == 0.0) continue;
            const auto v = r.value(i, j);
            if (!v)
                throw ValidationError("weighted_average: cell (" + std::to_string(i) + "," + std::to_string(j) +
                                      ") has weight " + format_double(w.at(i, j)) + " but no crafted examples");
            s += *v * w.at(i, j);
        }
    return s;
}

struct LowerBound {
    double value = 0.0;
    std::vector<Cell> argmin;
};

/// Minimum over non-empty cells with every attaining cell, row-major.
inline LowerBound lower_bound(const RobustnessMatrix& r) {
    LowerBound lb{std::numeric_limits<double>::infinity(), {}};
    for (std::size_t i = 0; i < r.n(); ++i)
        for (std::size_t j = 0; j < r.n(); ++j) {
            const auto v = r.value(i, j);
            if (!v) continue;
            if (*v < lb.value) {
                lb.value = *v;
                lb.argmin.clear();
            }
            if (*v == lb.value) lb.argmin.emplace_back(i, j);
        }
    detail::require(!lb.argmin.empty(), "lower_bound: every cell is empty");
    return lb;
}

inline double legitimate_accuracy(const Model& m, const Dataset& ds) {
    detail::require(!ds.empty(), "legitimate_accuracy: empty dataset");
    std::size_t hits = 0;
    for (const auto& s : ds.samples)
        if (predict(m, s.x) == s.label) ++hits;
    return static_cast<double>(hits) / static_cast<double>(ds.size());
}

/// U+2014, the diagonal placeholder in exported CSV.
inline constexpr const char* kDiagonalMark = "\u2014";

/// CSV export: n x n, "NA" for empty cells, kDiagonalMark on the diagonal.
inline std::string to_csv(const RobustnessMatrix& r) {
    std::string out;
    for (std::size_t i = 0; i < r.n(); ++i) {
        for (std::size_t j = 0; j < r.n(); ++j) {
            if (j) out += ',';
            if (i == j)
                out += kDiagonalMark;
            else if (const auto v = r.value(i, j))
                out += format_double(*v);
            else
                out += "NA";
        }
        out += '\n';
    }
    return out;
}

inline nlohmann::json to_json(const RobustnessMatrix& r) {
    nlohmann::json values = nlohmann::json::array(), correct = nlohmann::json::array(),
                   crafted = nlohmann::json::array();
    for (std::size_t i = 0; i < r.n(); ++i) {
        nlohmann::json vrow = nlohmann::json::array(), crow = nlohmann::json::array(), krow = nlohmann::json::array();
        for (std::size_t j = 0; j < r.n(); ++j) {
            const auto v = r.value(i, j);
            vrow.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
            crow.push_back(r.correct(i, j));
            krow.push_back(r.crafted(i, j));
        }
        values.push_back(vrow);
        correct.push_back(crow);
        crafted.push_back(krow);
    }
    return {{"n", r.n()}, {"values", values}, {"num_correct", correct}, {"num_crafted", crafted}};
}

/// Inverse of to_json. Counts are restored exactly; matrices built with
/// from_values (whose values are not count ratios) come back via values.
inline RobustnessMatrix robustness_from_json(const nlohmann::json& j) {
    const auto n = j.at("n").get<std::size_t>();
    RobustnessMatrix r(n);
    std::vector<std::vector<double>> values(n, std::vector<double>(n, std::numeric_limits<double>::quiet_NaN()));
    bool ratios = true;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k) {
            if (i == k) continue;
            r.set_counts(i, k, j.at("num_correct")[i][k].get<std::size_t>(),
                         j.at("num_crafted")[i][k].get<std::size_t>());
            const auto& v = j.at("values")[i][k];
            if (!v.is_null()) values[i][k] = v.get<double>();
            const auto got = r.value(i, k);
            if (v.is_null() != !got.has_value() || (got && *got != values[i][k])) ratios = false;
        }
    return ratios ? r : RobustnessMatrix::from_values(values);
}

}  // namespace sensdef
