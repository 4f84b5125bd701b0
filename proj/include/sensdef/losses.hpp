// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training losses over a probability vector:
//
//   cross      -log p_t
//   v1         sum_i (1 - y_i) p_i M[t][i]
//   v2         sum_i (p_i - p_t) M[t][i]
//   combined   cross + lambda * (v1 | v2)
//
// Only row t (the true label) of the attack sensitive matrix M enters a
// sample's loss. Diagonal terms vanish in both sensitive forms and are
// skipped outright, so M[t][t] can never influence a value.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sensdef/csv.hpp"
#include "sensdef/error.hpp"

namespace sensdef {

using ClassIndex = std::size_t;

/// Square, nonnegative, zero-diagonal cost matrix with entries capped at `cap`.
class AttackSensitiveMatrix {
  public:
    static constexpr double kDefaultCap = 100.0;

    AttackSensitiveMatrix() = default;

    explicit AttackSensitiveMatrix(std::size_t n, double cap = kDefaultCap)
        : n_(n), cap_(cap), entries_(n * n, 0.0) {}

    /// All ones off the diagonal: the starting point of both search algorithms.
    static AttackSensitiveMatrix ones(std::size_t n, double cap = kDefaultCap) {
        AttackSensitiveMatrix m(n, cap);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (i != j) m.entries_[i * n + j] = 1.0;
        return m;
    }

    static AttackSensitiveMatrix from_rows(const std::vector<std::vector<double>>& rows, double cap = kDefaultCap) {
        const std::size_t n = rows.size();
        detail::require(n >= 2, "attack sensitive matrix: need at least 2 classes");
        AttackSensitiveMatrix m(n, cap);
        for (std::size_t i = 0; i < n; ++i) {
            detail::require(rows[i].size() == n, "attack sensitive matrix: row " + std::to_string(i) +
                                                     " has " + std::to_string(rows[i].size()) + " entries, expected " +
                                                     std::to_string(n));
            for (std::size_t j = 0; j < n; ++j) m.set(i, j, rows[i][j]);
        }
        return m;
    }

    std::size_t n() const noexcept { return n_; }
    double cap() const noexcept { return cap_; }
    double at(std::size_t i, std::size_t j) const { return entries_[i * n_ + j]; }
    std::span<const double> row(std::size_t t) const { return {entries_.data() + t * n_, n_}; }
    const std::vector<double>& entries() const noexcept { return entries_; }

    void set(std::size_t i, std::size_t j, double v) {
        detail::require(i < n_ && j < n_, "attack sensitive matrix: index out of range");
        detail::require(std::isfinite(v), "attack sensitive matrix: non-finite entry");
        if (i == j) {
            detail::require(v == 0.0, "attack sensitive matrix: diagonal entry (" + std::to_string(i) + "," +
                                          std::to_string(j) + ") must be 0");
            return;
        }
        detail::require(v >= 0.0, "attack sensitive matrix: negative entry at (" + std::to_string(i) + "," +
                                      std::to_string(j) + ")");
        detail::require(v <= cap_, "attack sensitive matrix: entry at (" + std::to_string(i) + "," +
                                       std::to_string(j) + ") exceeds cap " + format_double(cap_));
        entries_[i * n_ + j] = v;
    }

    AttackSensitiveMatrix scaled(double k) const {
        AttackSensitiveMatrix out(n_, cap_);
        for (std::size_t i = 0; i < n_; ++i)
            for (std::size_t j = 0; j < n_; ++j)
                if (i != j) out.set(i, j, k * at(i, j));
        return out;
    }

    double off_diagonal_sum() const {
        double s = 0.0;
        for (std::size_t i = 0; i < n_; ++i)
            for (std::size_t j = 0; j < n_; ++j)
                if (i != j) s += at(i, j);
        return s;
    }

    friend bool operator==(const AttackSensitiveMatrix& a, const AttackSensitiveMatrix& b) {
        return a.n_ == b.n_ && a.entries_ == b.entries_;
    }

  private:
    std::size_t n_ = 0;
    double cap_ = kDefaultCap;
    std::vector<double> entries_;
};

inline std::string to_csv(const AttackSensitiveMatrix& m) {
    std::string out;
    for (std::size_t i = 0; i < m.n(); ++i) {
        for (std::size_t j = 0; j < m.n(); ++j) {
            if (j) out += ',';
            out += format_double(m.at(i, j));
        }
        out += '\n';
    }
    return out;
}

inline AttackSensitiveMatrix parse_matrix_csv(const std::string& text, const std::string& source,
                                              double cap = AttackSensitiveMatrix::kDefaultCap) {
    const auto rows = parse_csv_matrix(text, source);
    detail::require(!rows.empty(), source + ": empty matrix file");
    try {
        return AttackSensitiveMatrix::from_rows(rows, cap);
    } catch (const ValidationError& e) {
        throw ValidationError(source + ": " + e.what());
    }
}

inline AttackSensitiveMatrix load_matrix_csv(const std::string& path,
                                             double cap = AttackSensitiveMatrix::kDefaultCap) {
    return parse_matrix_csv(read_text_file(path), path, cap);
}

enum class LossVariant { cross, v1, v2, combined_v1, combined_v2 };

inline std::string to_string(LossVariant v) {
    switch (v) {
        case LossVariant::cross: return "cross";
        case LossVariant::v1: return "v1";
        case LossVariant::v2: return "v2";
        case LossVariant::combined_v1: return "combined_v1";
        case LossVariant::combined_v2: return "combined_v2";
    }
    return "?";
}

inline LossVariant parse_loss_variant(const std::string& s) {
    if (s == "cross") return LossVariant::cross;
    if (s == "v1") return LossVariant::v1;
    if (s == "v2") return LossVariant::v2;
    if (s == "combined_v1") return LossVariant::combined_v1;
    if (s == "combined_v2") return LossVariant::combined_v2;
    throw ValidationError("unknown loss variant '" + s + "'");
}

struct LossSpec {
    LossVariant variant = LossVariant::cross;
    double lambda = 1.0;
    std::optional<AttackSensitiveMatrix> matrix;

    static LossSpec cross_entropy() { return {}; }

    static LossSpec combined(LossVariant sensitive, double lambda, AttackSensitiveMatrix m) {
        detail::require(sensitive == LossVariant::v1 || sensitive == LossVariant::v2,
                        "combined loss needs sensitive variant v1 or v2");
        return {sensitive == LossVariant::v1 ? LossVariant::combined_v1 : LossVariant::combined_v2, lambda,
                std::move(m)};
    }

    bool needs_matrix() const noexcept { return variant != LossVariant::cross; }

    void validate(std::size_t n_classes) const {
        detail::require(std::isfinite(lambda) && lambda >= 0.0, "loss: lambda must be a nonnegative real");
        if (!needs_matrix()) return;
        detail::require(matrix.has_value(), "loss: variant " + to_string(variant) + " requires an attack sensitive matrix");
        detail::require(matrix->n() == n_classes, "loss: matrix has " + std::to_string(matrix->n()) +
                                                      " classes, model has " + std::to_string(n_classes));
    }
};

inline constexpr double kProbFloor = 1e-12;

namespace detail {

inline void check_label(ClassIndex t, std::size_t n) {
    require(t < n, "label " + std::to_string(t) + " out of range for " + std::to_string(n) + " classes");
}

inline void check_row(ClassIndex t, std::span<const double> probs, std::span<const double> m_row) {
    check_label(t, probs.size());
    require(m_row.size() == probs.size(), "loss: matrix row length " + std::to_string(m_row.size()) +
                                              " does not match " + std::to_string(probs.size()) + " classes");
}

}  // namespace detail

inline double cross_entropy(ClassIndex t, std::span<const double> probs) {
    detail::check_label(t, probs.size());
    return -std::log(std::clamp(probs[t], kProbFloor, 1.0));
}

/// v1 against one row of M (the true label's row).
inline double sensitive_v1_row(ClassIndex t, std::span<const double> probs, std::span<const double> m_row) {
    detail::check_row(t, probs, m_row);
    double s = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i)
        if (i != t) s += probs[i] * m_row[i];
    return s;
}

inline double sensitive_v2_row(ClassIndex t, std::span<const double> probs, std::span<const double> m_row) {
    detail::check_row(t, probs, m_row);
    double s = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i)
        if (i != t) s += (probs[i] - probs[t]) * m_row[i];
    return s;
}

inline double sensitive_v1(ClassIndex t, std::span<const double> probs, const AttackSensitiveMatrix& m) {
    detail::require(m.n() == probs.size(), "loss: matrix dimension mismatch");
    detail::check_label(t, probs.size());
    return sensitive_v1_row(t, probs, m.row(t));
}

inline double sensitive_v2(ClassIndex t, std::span<const double> probs, const AttackSensitiveMatrix& m) {
    detail::require(m.n() == probs.size(), "loss: matrix dimension mismatch");
    detail::check_label(t, probs.size());
    return sensitive_v2_row(t, probs, m.row(t));
}

/// Value of the configured loss for one sample.
inline double combined(ClassIndex t, std::span<const double> probs, const LossSpec& spec) {
    spec.validate(probs.size());
    switch (spec.variant) {
        case LossVariant::cross: return cross_entropy(t, probs);
        case LossVariant::v1: return sensitive_v1(t, probs, *spec.matrix);
        case LossVariant::v2: return sensitive_v2(t, probs, *spec.matrix);
        case LossVariant::combined_v1: return cross_entropy(t, probs) + spec.lambda * sensitive_v1(t, probs, *spec.matrix);
        case LossVariant::combined_v2: return cross_entropy(t, probs) + spec.lambda * sensitive_v2(t, probs, *spec.matrix);
    }
    return 0.0;
}

namespace detail {

inline void add_cross_grad(ClassIndex t, std::span<const double> probs, std::span<double> g) {
    g[t] += -1.0 / std::clamp(probs[t], kProbFloor, 1.0);
}

inline void add_v1_grad(ClassIndex t, std::span<const double> m_row, double scale, std::span<double> g) {
    for (std::size_t i = 0; i < g.size(); ++i)
        if (i != t) g[i] += scale * m_row[i];
}

inline void add_v2_grad(ClassIndex t, std::span<const double> m_row, double scale, std::span<double> g) {
    double row_sum = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (i == t) continue;
        g[i] += scale * m_row[i];
        row_sum += m_row[i];
    }
    g[t] += -scale * row_sum;
}

}  // namespace detail

/// dL/dp for the configured loss. v1 and v2 are linear in p, so their
/// gradients depend only on row t of M.
inline std::vector<double> loss_grad_probs(ClassIndex t, std::span<const double> probs, const LossSpec& spec) {
    spec.validate(probs.size());
    detail::check_label(t, probs.size());
    std::vector<double> g(probs.size(), 0.0);
    switch (spec.variant) {
        case LossVariant::cross: detail::add_cross_grad(t, probs, g); break;
        case LossVariant::v1: detail::add_v1_grad(t, spec.matrix->row(t), 1.0, g); break;
        case LossVariant::v2: detail::add_v2_grad(t, spec.matrix->row(t), 1.0, g); break;
        case LossVariant::combined_v1:
            detail::add_cross_grad(t, probs, g);
            detail::add_v1_grad(t, spec.matrix->row(t), spec.lambda, g);
            break;
        case LossVariant::combined_v2:
            detail::add_cross_grad(t, probs, g);
            detail::add_v2_grad(t, spec.matrix->row(t), spec.lambda, g);
            break;
    }
    return g;
}

}  // namespace sensdef
