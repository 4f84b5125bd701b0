// SPDX-License-Identifier: Apache-2.0
#pragma once

// Multilayer perceptron with reverse-mode gradients.
//
// All reductions run sequentially over the flat index, so for a fixed
// (spec, seed, data, op sequence) the parameters are bit-identical across
// runs. Loss gradients enter at the probability layer and are pulled back
// through the softmax Jacobian dp_k/dz_j = p_k (delta_kj - p_j), which lets
// every loss variant share one backward path.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "sensdef/error.hpp"
#include "sensdef/losses.hpp"
#include "sensdef/rng.hpp"
#include "sensdef/tensor.hpp"

namespace sensdef {

enum class LayerKind { affine, relu };

struct LayerSpec {
    LayerKind kind = LayerKind::affine;
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;

    static LayerSpec affine(std::size_t in, std::size_t out) { return {LayerKind::affine, in, out}; }
    static LayerSpec relu() { return {LayerKind::relu, 0, 0}; }

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Weight is [out, in], bias is [out].
struct AffineParams {
    Tensor weight;
    Tensor bias;

    friend bool operator==(const AffineParams&, const AffineParams&) = default;
};

using ParamGradients = std::vector<AffineParams>;

struct Model {
    std::vector<LayerSpec> layers;
    std::vector<AffineParams> params;  // one entry per affine layer, in order
    std::size_t n_classes = 0;
    std::uint64_t seed = 0;

    std::size_t input_dim() const {
        for (const auto& l : layers)
            if (l.kind == LayerKind::affine) return l.in_dim;
        return 0;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& p : params) n += p.weight.size() + p.bias.size();
        return n;
    }

    friend bool operator==(const Model&, const Model&) = default;
};

struct ForwardTrace {
    /// layer_inputs[k] is the input to layers[k]; the final entry is the logits.
    std::vector<std::vector<double>> layer_inputs;
    Tensor logits;
    Tensor probs;
};

/// {8, 32, 4} -> affine 8->32, relu, affine 32->4.
inline std::vector<LayerSpec> mlp_spec(const std::vector<std::size_t>& widths) {
    detail::require(widths.size() >= 2, "mlp spec needs at least input and output widths");
    std::vector<LayerSpec> spec;
    for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
        if (k > 0) spec.push_back(LayerSpec::relu());
        spec.push_back(LayerSpec::affine(widths[k], widths[k + 1]));
    }
    return spec;
}

inline void validate_spec(const std::vector<LayerSpec>& spec, std::size_t n_classes) {
    detail::require(n_classes >= 2, "model: n_classes must be at least 2");
    std::size_t prev_out = 0;
    bool seen_affine = false;
    for (std::size_t k = 0; k < spec.size(); ++k) {
        if (spec[k].kind != LayerKind::affine) continue;
        detail::require(spec[k].in_dim > 0 && spec[k].out_dim > 0,
                        "model: zero dimension at layer " + std::to_string(k));
        if (seen_affine && spec[k].in_dim != prev_out)
            throw ValidationError("dim mismatch at layer " + std::to_string(k) + ": expected in_dim " +
                                  std::to_string(prev_out) + ", got " + std::to_string(spec[k].in_dim));
        prev_out = spec[k].out_dim;
        seen_affine = true;
    }
    detail::require(seen_affine, "model: spec has no affine layer");
    detail::require(prev_out == n_classes, "model: final affine out_dim " + std::to_string(prev_out) +
                                               " != n_classes " + std::to_string(n_classes));
}

/// Uniform init in [-s, s], s = sqrt(6 / (in + out)); biases start at zero.
inline Model build_model(const std::vector<LayerSpec>& spec, std::size_t n_classes, std::uint64_t seed) {
    validate_spec(spec, n_classes);
    Model m{spec, {}, n_classes, seed};
    Rng rng(seed);
    for (const auto& l : spec) {
        if (l.kind != LayerKind::affine) continue;
        const double s = std::sqrt(6.0 / static_cast<double>(l.in_dim + l.out_dim));
        AffineParams p{Tensor::zeros({l.out_dim, l.in_dim}), Tensor::zeros({l.out_dim})};
        for (auto& w : p.weight.data) w = rng.uniform(-s, s);
        m.params.push_back(std::move(p));
    }
    return m;
}

inline ParamGradients zero_gradients(const Model& m) {
    ParamGradients g;
    g.reserve(m.params.size());
    for (const auto& p : m.params) g.push_back({Tensor::zeros(p.weight.shape), Tensor::zeros(p.bias.shape)});
    return g;
}

inline std::vector<double> softmax(std::span<const double> z) {
    const double zmax = *std::max_element(z.begin(), z.end());
    std::vector<double> p(z.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        p[i] = std::exp(z[i] - zmax);
        sum += p[i];
    }
    for (auto& v : p) v /= sum;
    return p;
}

namespace detail {

inline void check_input(const Model& m, std::span<const double> x) {
    require(x.size() == m.input_dim(), "input length " + std::to_string(x.size()) + " != model input dim " +
                                           std::to_string(m.input_dim()));
}

}  // namespace detail

inline ForwardTrace forward(const Model& m, std::span<const double> x) {
    detail::check_input(m, x);
    ForwardTrace tr;
    tr.layer_inputs.reserve(m.layers.size() + 1);
    tr.layer_inputs.emplace_back(x.begin(), x.end());
    std::size_t affine_idx = 0;
    for (const auto& l : m.layers) {
        const auto& in = tr.layer_inputs.back();
        std::vector<double> out;
        if (l.kind == LayerKind::affine) {
            const auto& p = m.params[affine_idx++];
            out.resize(l.out_dim);
            for (std::size_t o = 0; o < l.out_dim; ++o) {
                double acc = p.bias[o];
                const double* w = p.weight.data.data() + o * l.in_dim;
                for (std::size_t i = 0; i < l.in_dim; ++i) acc += w[i] * in[i];
                out[o] = acc;
            }
        } else {
            out = in;
            for (auto& v : out) v = v > 0.0 ? v : 0.0;
        }
        tr.layer_inputs.push_back(std::move(out));
    }
    tr.logits = Tensor::vector(tr.layer_inputs.back());
    tr.probs = Tensor::vector(softmax(tr.logits.data));
    return tr;
}

inline ForwardTrace forward(const Model& m, const Tensor& x) { return forward(m, x.view()); }

/// argmax of the probabilities, ties to the lowest index.
inline ClassIndex predict(const Model& m, std::span<const double> x) {
    const auto tr = forward(m, x);
    const auto& p = tr.probs.data;
    return static_cast<ClassIndex>(std::max_element(p.begin(), p.end()) - p.begin());
}

inline ClassIndex predict(const Model& m, const Tensor& x) { return predict(m, x.view()); }

/// Pulls dL/dp back through the softmax to dL/dz.
inline std::vector<double> softmax_backward(std::span<const double> probs, std::span<const double> dprobs) {
    double dot = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) dot += dprobs[k] * probs[k];
    std::vector<double> dz(probs.size());
    for (std::size_t j = 0; j < probs.size(); ++j) dz[j] = probs[j] * (dprobs[j] - dot);
    return dz;
}

/// Backpropagates dL/dlogits through the layers. Parameter gradients (if
/// requested) are accumulated into `param_grads`; returns dL/dx when
/// `want_input` is set, otherwise an empty vector.
inline std::vector<double> backward_from_logits(const Model& m, const ForwardTrace& tr, std::span<const double> dlogits,
                                                ParamGradients* param_grads, bool want_input) {
    std::vector<double> g(dlogits.begin(), dlogits.end());
    std::size_t affine_idx = m.params.size();
    for (std::size_t k = m.layers.size(); k-- > 0;) {
        const auto& l = m.layers[k];
        const auto& in = tr.layer_inputs[k];
        if (l.kind == LayerKind::relu) {
            for (std::size_t i = 0; i < g.size(); ++i)
                if (!(in[i] > 0.0)) g[i] = 0.0;
            continue;
        }
        const auto& p = m.params[--affine_idx];
        if (param_grads) {
            auto& pg = (*param_grads)[affine_idx];
            for (std::size_t o = 0; o < l.out_dim; ++o) {
                double* dw = pg.weight.data.data() + o * l.in_dim;
                for (std::size_t i = 0; i < l.in_dim; ++i) dw[i] += g[o] * in[i];
                pg.bias[o] += g[o];
            }
        }
        const bool need_below = want_input || affine_idx > 0;
        if (!need_below) break;
        std::vector<double> gin(l.in_dim, 0.0);
        for (std::size_t o = 0; o < l.out_dim; ++o) {
            const double* w = p.weight.data.data() + o * l.in_dim;
            for (std::size_t i = 0; i < l.in_dim; ++i) gin[i] += w[i] * g[o];
        }
        g = std::move(gin);
    }
    if (!want_input) return {};
    return g;
}

struct LabeledRef {
    std::span<const double> x;
    ClassIndex label;
};

/// Mean-over-batch gradient of the configured loss w.r.t. every parameter.
/// Also returns the mean loss through `mean_loss` when non-null.
inline ParamGradients loss_grad_params(const Model& m, std::span<const LabeledRef> batch, const LossSpec& loss,
                                       double* mean_loss = nullptr) {
    detail::require(!batch.empty(), "loss_grad_params: empty batch");
    loss.validate(m.n_classes);
    ParamGradients grads = zero_gradients(m);
    double loss_sum = 0.0;
    for (const auto& s : batch) {
        detail::check_label(s.label, m.n_classes);
        const auto tr = forward(m, s.x);
        if (mean_loss) loss_sum += combined(s.label, tr.probs.data, loss);
        const auto dp = loss_grad_probs(s.label, tr.probs.data, loss);
        const auto dz = softmax_backward(tr.probs.data, dp);
        backward_from_logits(m, tr, dz, &grads, false);
    }
    const double inv = static_cast<double>(batch.size());
    for (auto& p : grads) {
        for (auto& v : p.weight.data) v /= inv;
        for (auto& v : p.bias.data) v /= inv;
    }
    if (mean_loss) *mean_loss = loss_sum / inv;
    return grads;
}

inline std::vector<double> loss_grad_input(const Model& m, std::span<const double> x, ClassIndex label,
                                           const LossSpec& loss) {
    loss.validate(m.n_classes);
    detail::check_label(label, m.n_classes);
    const auto tr = forward(m, x);
    const auto dp = loss_grad_probs(label, tr.probs.data, loss);
    const auto dz = softmax_backward(tr.probs.data, dp);
    return backward_from_logits(m, tr, dz, nullptr, true);
}

inline void sgd_step(Model& m, const ParamGradients& grads, double lr) {
    detail::require(std::isfinite(lr) && lr >= 0.0, "sgd_step: learning rate must be a nonnegative real");
    detail::require(grads.size() == m.params.size(), "sgd_step: gradient layer count mismatch");
    for (std::size_t k = 0; k < grads.size(); ++k) {
        detail::require(grads[k].weight.shape == m.params[k].weight.shape &&
                            grads[k].bias.shape == m.params[k].bias.shape,
                        "sgd_step: gradient shape mismatch at affine layer " + std::to_string(k));
    }
    for (std::size_t k = 0; k < grads.size(); ++k) {
        auto& p = m.params[k];
        for (std::size_t i = 0; i < p.weight.size(); ++i) p.weight[i] -= lr * grads[k].weight[i];
        for (std::size_t i = 0; i < p.bias.size(); ++i) p.bias[i] -= lr * grads[k].bias[i];
    }
}

// Serialization. nlohmann emits the shortest decimal that parses back to
// the same double, so the round trip is value-exact.

inline nlohmann::json model_to_json(const Model& m) {
    nlohmann::json spec = nlohmann::json::array();
    for (const auto& l : m.layers) {
        if (l.kind == LayerKind::affine)
            spec.push_back({{"kind", "affine"}, {"in_dim", l.in_dim}, {"out_dim", l.out_dim}});
        else
            spec.push_back({{"kind", "relu"}});
    }
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : m.params) {
        nlohmann::json w = nlohmann::json::array();
        const std::size_t out = p.weight.shape[0], in = p.weight.shape[1];
        for (std::size_t o = 0; o < out; ++o)
            w.push_back(std::vector<double>(p.weight.data.begin() + o * in, p.weight.data.begin() + (o + 1) * in));
        params.push_back({{"weight", w}, {"bias", p.bias.data}});
    }
    return {{"spec", spec}, {"n_classes", m.n_classes}, {"seed", m.seed}, {"params", params}};
}

inline Model model_from_json(const nlohmann::json& j) {
    try {
        std::vector<LayerSpec> spec;
        for (const auto& l : j.at("spec")) {
            const auto kind = l.at("kind").get<std::string>();
            if (kind == "affine")
                spec.push_back(LayerSpec::affine(l.at("in_dim").get<std::size_t>(), l.at("out_dim").get<std::size_t>()));
            else if (kind == "relu")
                spec.push_back(LayerSpec::relu());
            else
                throw ValidationError("model json: unknown layer kind '" + kind + "'");
        }
        const auto n_classes = j.at("n_classes").get<std::size_t>();
        validate_spec(spec, n_classes);
        Model m{spec, {}, n_classes, j.at("seed").get<std::uint64_t>()};
        const auto& params = j.at("params");
        std::size_t k = 0;
        for (const auto& l : spec) {
            if (l.kind != LayerKind::affine) continue;
            detail::require(k < params.size(), "model json: missing params for affine layer " + std::to_string(k));
            const auto& pj = params[k++];
            AffineParams p{Tensor::zeros({l.out_dim, l.in_dim}), Tensor::zeros({l.out_dim})};
            const auto& w = pj.at("weight");
            detail::require(w.size() == l.out_dim, "model json: weight row count mismatch");
            for (std::size_t o = 0; o < l.out_dim; ++o) {
                const auto row = w[o].get<std::vector<double>>();
                detail::require(row.size() == l.in_dim, "model json: weight column count mismatch");
                std::copy(row.begin(), row.end(), p.weight.data.begin() + o * l.in_dim);
            }
            const auto b = pj.at("bias").get<std::vector<double>>();
            detail::require(b.size() == l.out_dim, "model json: bias length mismatch");
            p.bias.data = b;
            detail::require(p.weight.all_finite() && p.bias.all_finite(), "model json: non-finite parameter");
            m.params.push_back(std::move(p));
        }
        detail::require(k == params.size(), "model json: extra parameter blocks");
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("model json: ") + e.what());
    }
}

}  // namespace sensdef
