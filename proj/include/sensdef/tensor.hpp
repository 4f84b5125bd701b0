// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sensdef/error.hpp"

namespace sensdef {

/// Dense row-major array of doubles.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    Tensor(std::vector<std::size_t> shape_, std::vector<double> data_)
        : shape(std::move(shape_)), data(std::move(data_)) {
        detail::require(numel(shape) == data.size(), "tensor: shape does not match data length");
    }

    static Tensor zeros(std::vector<std::size_t> shape_) {
        const std::size_t n = numel(shape_);
        return Tensor(std::move(shape_), std::vector<double>(n, 0.0));
    }

    static Tensor vector(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor({n}, std::move(values));
    }

    static std::size_t numel(const std::vector<std::size_t>& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
    }

    std::size_t size() const noexcept { return data.size(); }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    std::span<const double> view() const noexcept { return data; }
    std::span<double> view() noexcept { return data; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline double linf_distance(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double l2_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

}  // namespace sensdef
