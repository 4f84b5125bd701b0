// SPDX-License-Identifier: Apache-2.0
#pragma once

// Greedy searches over the attack sensitive matrix M.
//
// search_weighted: walk the off-diagonal cells in descending weight order.
// For each cell keep retraining and adding delta while validation accuracy
// stays above xi; on the first violation undo the last addition and move on.
//
// search_lower_bound: retrain, and while accuracy stays above xi add delta
// to the batch_t cells with the lowest robustness. On violation undo the
// last batch and stop.
//
// Both start from M = 1 off the diagonal, cap entries at m_cap, and call the
// evaluator only through a memo keyed by M. Retraining is a deterministic
// function of M, so re-evaluating an M that was already checked returns the
// recorded result.

#include <algorithm>
#include <concepts>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sensdef/dataio.hpp"
#include "sensdef/error.hpp"
#include "sensdef/losses.hpp"
#include "sensdef/robustness.hpp"
#include "sensdef/training.hpp"

namespace sensdef {

struct SearchConfig {
    double xi = 0.9;
    double delta = 5.0;
    std::size_t batch_t = 3;
    double m_cap = AttackSensitiveMatrix::kDefaultCap;
    std::size_t max_outer_iters = 40;
    LossVariant loss_variant = LossVariant::v2;
    double lambda = 1.0;

    void validate() const {
        detail::require(std::isfinite(xi), "search: xi must be finite");
        detail::require(std::isfinite(delta) && delta > 0.0, "search: delta must be > 0");
        detail::require(m_cap >= 1.0 && m_cap <= AttackSensitiveMatrix::kDefaultCap,
                        "search: m_cap must be in [1, 100]");
        detail::require(delta <= m_cap, "search: delta must not exceed m_cap");
        detail::require(batch_t >= 1, "search: batch_t must be >= 1");
        detail::require(loss_variant == LossVariant::v1 || loss_variant == LossVariant::v2,
                        "search: loss_variant must be v1 or v2");
        detail::require(std::isfinite(lambda) && lambda >= 0.0, "search: lambda must be >= 0");
    }
};

/// What a search step did after checking accuracy.
enum class SearchAction {
    increment,   // accuracy above xi; delta added to `cells`
    revert,      // accuracy at or below xi; last addition to `cells` undone
    advance,     // accuracy at or below xi with nothing to undo for this cell
    cap,         // accuracy above xi but every candidate cell is at m_cap
    max_iters,   // accuracy above xi but the iteration bound is reached
    infeasible,  // the initial matrix already violates the constraint
};

inline std::string to_string(SearchAction a) {
    switch (a) {
        case SearchAction::increment: return "increment";
        case SearchAction::revert: return "revert";
        case SearchAction::advance: return "advance";
        case SearchAction::cap: return "cap";
        case SearchAction::max_iters: return "max_iters";
        case SearchAction::infeasible: return "infeasible";
    }
    return "?";
}

inline SearchAction parse_search_action(const std::string& s) {
    for (auto a : {SearchAction::increment, SearchAction::revert, SearchAction::advance, SearchAction::cap,
                   SearchAction::max_iters, SearchAction::infeasible})
        if (to_string(a) == s) return a;
    throw ValidationError("unknown search action '" + s + "'");
}

struct TraceRecord {
    std::size_t iteration = 0;
    AttackSensitiveMatrix m_evaluated;  // matrix the model was trained with
    double accuracy = 0.0;
    bool feasible = false;              // accuracy > xi
    std::optional<RobustnessMatrix> robustness;
    SearchAction action = SearchAction::increment;
    std::vector<Cell> cells;
    std::vector<double> amounts;        // per-cell change applied (negative on revert)
    AttackSensitiveMatrix m;            // matrix after the action
};

struct SearchResult {
    AttackSensitiveMatrix m;
    std::vector<TraceRecord> trace;
    bool infeasible = false;
    double accuracy = 0.0;  // validation accuracy of the returned M
};

/// accuracy(M): validation accuracy after retraining with M.
/// robustness(M): robustness matrix of that retrained model.
template <class E>
concept SearchEvaluator = requires(E& e, const AttackSensitiveMatrix& m) {
    { e.accuracy(m) } -> std::convertible_to<double>;
    { e.robustness(m) } -> std::convertible_to<RobustnessMatrix>;
};

struct MemoEntry {
    double accuracy = 0.0;
    std::optional<RobustnessMatrix> robustness;
};

using SearchMemo = std::map<std::vector<double>, MemoEntry>;

/// Rebuilds a memo from a (possibly truncated) trace so a search can resume.
inline SearchMemo memo_from_trace(const std::vector<TraceRecord>& trace) {
    SearchMemo memo;
    for (const auto& r : trace) {
        auto& e = memo[r.m_evaluated.entries()];
        e.accuracy = r.accuracy;
        if (r.robustness) e.robustness = r.robustness;
    }
    return memo;
}

namespace detail {

template <SearchEvaluator E>
class MemoEvaluator {
  public:
    MemoEvaluator(E& inner, SearchMemo memo) : inner_(inner), memo_(std::move(memo)) {}

    double accuracy(const AttackSensitiveMatrix& m) {
        auto it = memo_.find(m.entries());
        if (it != memo_.end()) return it->second.accuracy;
        const double acc = inner_.accuracy(m);
        memo_[m.entries()].accuracy = acc;
        return acc;
    }

    RobustnessMatrix robustness(const AttackSensitiveMatrix& m) {
        auto& e = memo_[m.entries()];
        if (!e.robustness) e.robustness = inner_.robustness(m);
        return *e.robustness;
    }

  private:
    E& inner_;
    SearchMemo memo_;
};

class TraceSink {
  public:
    explicit TraceSink(std::function<void(const TraceRecord&)> cb) : cb_(std::move(cb)) {}

    void emit(SearchResult& res, TraceRecord r) {
        r.iteration = res.trace.size();
        if (cb_) cb_(r);
        res.trace.push_back(std::move(r));
    }

  private:
    std::function<void(const TraceRecord&)> cb_;
};

inline std::vector<Cell> off_diagonal_cells(std::size_t n) {
    std::vector<Cell> cells;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) cells.emplace_back(i, j);
    return cells;
}

}  // namespace detail

/// Cells sorted by weight, descending; ties keep row-major order.
inline std::vector<Cell> weight_order(const WeightMatrix& w) {
    auto cells = detail::off_diagonal_cells(w.n());
    std::stable_sort(cells.begin(), cells.end(),
                     [&](const Cell& a, const Cell& b) { return w.at(a.first, a.second) > w.at(b.first, b.second); });
    return cells;
}

/// The t non-empty cells with the lowest robustness among those still
/// below the cap; ties keep row-major order.
inline std::vector<Cell> lowest_cells(const RobustnessMatrix& r, const AttackSensitiveMatrix& m, std::size_t t,
                                      double cap) {
    std::vector<Cell> cells;
    for (const auto& c : detail::off_diagonal_cells(r.n()))
        if (r.value(c.first, c.second) && m.at(c.first, c.second) < cap) cells.push_back(c);
    std::stable_sort(cells.begin(), cells.end(),
                     [&](const Cell& a, const Cell& b) { return r.at(a.first, a.second) < r.at(b.first, b.second); });
    if (cells.size() > t) cells.resize(t);
    return cells;
}

template <SearchEvaluator E>
SearchResult search_weighted(E& evaluator, std::size_t n_classes, const WeightMatrix& w, const SearchConfig& cfg,
                             SearchMemo memo = {}, std::function<void(const TraceRecord&)> on_record = {}) {
    cfg.validate();
    detail::require(w.n() == n_classes, "search_weighted: weight matrix has " + std::to_string(w.n()) +
                                            " classes, expected " + std::to_string(n_classes));
    detail::MemoEvaluator<E> eval(evaluator, std::move(memo));
    detail::TraceSink sink(std::move(on_record));
    SearchResult res;
    res.m = AttackSensitiveMatrix::ones(n_classes, cfg.m_cap);
    bool first_check = true;

    for (const auto& cell : weight_order(w)) {
        const auto [i, j] = cell;
        double last_add = 0.0;
        std::size_t increments = 0;
        while (true) {
            TraceRecord rec;
            rec.m_evaluated = res.m;
            rec.accuracy = eval.accuracy(res.m);
            rec.feasible = rec.accuracy > cfg.xi;
            rec.cells = {cell};
            if (rec.feasible) {
                res.accuracy = rec.accuracy;
                first_check = false;
                const double cur = res.m.at(i, j);
                if (cur >= cfg.m_cap) {
                    rec.action = SearchAction::cap;
                } else if (increments == cfg.max_outer_iters) {
                    rec.action = SearchAction::max_iters;
                } else {
                    last_add = std::min(cfg.delta, cfg.m_cap - cur);
                    res.m.set(i, j, cur + last_add);
                    ++increments;
                    rec.action = SearchAction::increment;
                    rec.amounts = {last_add};
                }
            } else if (first_check) {
                res.infeasible = true;
                rec.action = SearchAction::infeasible;
                rec.cells.clear();
            } else if (increments > 0) {
                res.m.set(i, j, res.m.at(i, j) - last_add);
                rec.action = SearchAction::revert;
                rec.amounts = {-last_add};
            } else {
                rec.action = SearchAction::advance;
            }
            rec.m = res.m;
            const auto action = rec.action;
            sink.emit(res, std::move(rec));
            if (action == SearchAction::infeasible) return res;
            if (action != SearchAction::increment) break;
        }
    }
    return res;
}

template <SearchEvaluator E>
SearchResult search_lower_bound(E& evaluator, std::size_t n_classes, const SearchConfig& cfg, SearchMemo memo = {},
                                std::function<void(const TraceRecord&)> on_record = {}) {
    cfg.validate();
    detail::MemoEvaluator<E> eval(evaluator, std::move(memo));
    detail::TraceSink sink(std::move(on_record));
    SearchResult res;
    res.m = AttackSensitiveMatrix::ones(n_classes, cfg.m_cap);
    std::vector<Cell> last_cells;
    std::vector<double> last_amounts;
    std::size_t rounds = 0;

    while (true) {
        TraceRecord rec;
        rec.m_evaluated = res.m;
        rec.accuracy = eval.accuracy(res.m);
        rec.feasible = rec.accuracy > cfg.xi;
        if (rec.feasible) {
            res.accuracy = rec.accuracy;
            rec.robustness = eval.robustness(res.m);
            const auto picked = lowest_cells(*rec.robustness, res.m, cfg.batch_t, cfg.m_cap);
            if (picked.empty()) {
                rec.action = SearchAction::cap;
            } else if (rounds == cfg.max_outer_iters) {
                rec.action = SearchAction::max_iters;
            } else {
                last_cells = picked;
                last_amounts.clear();
                for (const auto& [i, j] : picked) {
                    const double add = std::min(cfg.delta, cfg.m_cap - res.m.at(i, j));
                    res.m.set(i, j, res.m.at(i, j) + add);
                    last_amounts.push_back(add);
                }
                ++rounds;
                rec.action = SearchAction::increment;
                rec.cells = last_cells;
                rec.amounts = last_amounts;
            }
        } else if (last_cells.empty()) {
            res.infeasible = true;
            rec.action = SearchAction::infeasible;
        } else {
            for (std::size_t k = 0; k < last_cells.size(); ++k) {
                const auto [i, j] = last_cells[k];
                res.m.set(i, j, res.m.at(i, j) - last_amounts[k]);
                rec.amounts.push_back(-last_amounts[k]);
            }
            rec.action = SearchAction::revert;
            rec.cells = last_cells;
        }
        rec.m = res.m;
        const auto action = rec.action;
        sink.emit(res, std::move(rec));
        if (action != SearchAction::increment) break;
    }
    return res;
}

/// Retrains from scratch (fixed seeds) with loss = cross + lambda * sensitive(M)
/// and measures clean accuracy on the validation set. The trained model for
/// each distinct M is kept so the final one can be exported.
class RetrainEvaluator {
  public:
    RetrainEvaluator(const Dataset& train_set, const Dataset& val_set, TrainConfig trainer, SearchConfig search,
                     AttackConfig inner_attack, RobustnessOptions inner_options)
        : train_(train_set),
          val_(val_set),
          trainer_(std::move(trainer)),
          search_(search),
          attack_(inner_attack),
          options_(inner_options) {
        detail::require(!train_.empty() && !val_.empty(), "search: training and validation sets must be nonempty");
    }

    const TrainedModel& trained(const AttackSensitiveMatrix& m) {
        auto it = models_.find(m.entries());
        if (it != models_.end()) return it->second;
        const LossSpec loss = LossSpec::combined(search_.loss_variant, search_.lambda, m);
        return models_.emplace(m.entries(), fit(train_, loss, trainer_, &val_)).first->second;
    }

    double accuracy(const AttackSensitiveMatrix& m) { return trained(m).clean_val_accuracy; }

    RobustnessMatrix robustness(const AttackSensitiveMatrix& m) {
        return robustness_matrix(trained(m).model, val_, attack_, options_);
    }

    std::size_t trainings() const noexcept { return models_.size(); }

  private:
    const Dataset& train_;
    const Dataset& val_;
    TrainConfig trainer_;
    SearchConfig search_;
    AttackConfig attack_;
    RobustnessOptions options_;
    std::map<std::vector<double>, TrainedModel> models_;
};

namespace detail {

inline nlohmann::json matrix_rows(const AttackSensitiveMatrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < m.n(); ++i) {
        const auto r = m.row(i);
        rows.push_back(std::vector<double>(r.begin(), r.end()));
    }
    return rows;
}

}  // namespace detail

inline nlohmann::json trace_record_to_json(const TraceRecord& r) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& [i, j] : r.cells) cells.push_back({i, j});
    return {{"iteration", r.iteration},
            {"m_evaluated", detail::matrix_rows(r.m_evaluated)},
            {"accuracy", r.accuracy},
            {"feasible", r.feasible},
            {"robustness", r.robustness ? to_json(*r.robustness) : nlohmann::json(nullptr)},
            {"action", to_string(r.action)},
            {"cells", cells},
            {"amounts", r.amounts},
            {"m", detail::matrix_rows(r.m)}};
}

inline TraceRecord trace_record_from_json(const nlohmann::json& j, double cap) {
    try {
        TraceRecord r;
        r.iteration = j.at("iteration").get<std::size_t>();
        r.m_evaluated = AttackSensitiveMatrix::from_rows(j.at("m_evaluated").get<std::vector<std::vector<double>>>(), cap);
        r.accuracy = j.at("accuracy").get<double>();
        r.feasible = j.at("feasible").get<bool>();
        if (!j.at("robustness").is_null()) r.robustness = robustness_from_json(j.at("robustness"));
        r.action = parse_search_action(j.at("action").get<std::string>());
        for (const auto& c : j.at("cells")) r.cells.emplace_back(c.at(0).get<std::size_t>(), c.at(1).get<std::size_t>());
        r.amounts = j.at("amounts").get<std::vector<double>>();
        r.m = AttackSensitiveMatrix::from_rows(j.at("m").get<std::vector<std::vector<double>>>(), cap);
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("trace record: ") + e.what());
    }
}

inline std::string trace_to_jsonl(const std::vector<TraceRecord>& trace) {
    std::string out;
    for (const auto& r : trace) out += trace_record_to_json(r).dump() + '\n';
    return out;
}

/// Parses JSON lines; a trailing partial line (interrupted write) is dropped.
inline std::vector<TraceRecord> trace_from_jsonl(const std::string& text, double cap) {
    std::vector<TraceRecord> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (detail::trim(line).empty()) continue;
        const auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            if (in.peek() == std::char_traits<char>::eof()) break;
            throw ValidationError("trace: malformed line " + std::to_string(out.size() + 1));
        }
        out.push_back(trace_record_from_json(j, cap));
    }
    return out;
}

}  // namespace sensdef
