// SPDX-License-Identifier: Apache-2.0
#pragma once

// Datasets: synthetic Gaussian blobs, CSV feature files, IDX image files,
// and stratified splits. Every feature lives in [0, 1]; loaders reject
// out-of-range values instead of clamping them.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "sensdef/csv.hpp"
#include "sensdef/error.hpp"
#include "sensdef/losses.hpp"
#include "sensdef/rng.hpp"
#include "sensdef/tensor.hpp"

namespace sensdef {

struct Sample {
    Tensor x;
    ClassIndex label = 0;

    friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
    std::vector<Sample> samples;
    std::size_t n_classes = 0;
    std::size_t feature_dim = 0;

    std::size_t size() const noexcept { return samples.size(); }
    bool empty() const noexcept { return samples.empty(); }

    /// Samples of one class, in dataset order.
    std::vector<const Sample*> of_class(ClassIndex c) const {
        std::vector<const Sample*> out;
        for (const auto& s : samples)
            if (s.label == c) out.push_back(&s);
        return out;
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(n_classes, 0);
        for (const auto& s : samples) ++counts[s.label];
        return counts;
    }

    void validate() const {
        detail::require(n_classes >= 2, "dataset: n_classes must be at least 2");
        for (std::size_t k = 0; k < samples.size(); ++k) {
            const auto& s = samples[k];
            detail::require(s.label < n_classes, "dataset: sample " + std::to_string(k) + " label " +
                                                     std::to_string(s.label) + " out of range");
            detail::require(s.x.size() == feature_dim, "dataset: sample " + std::to_string(k) + " has dim " +
                                                           std::to_string(s.x.size()) + ", expected " +
                                                           std::to_string(feature_dim));
            for (double v : s.x.data)
                detail::require(v >= 0.0 && v <= 1.0, "dataset: sample " + std::to_string(k) +
                                                          " has feature outside [0,1]");
        }
    }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Class centers uniform in [0.2, 0.8]^d; each class-c sample is its center
/// plus N(0, spreads[c]^2) noise, clipped to [0, 1]. Samples are grouped by
/// class.
inline Dataset gen_blobs(std::size_t n_classes, std::size_t per_class, std::size_t feature_dim,
                         const std::vector<double>& spreads, std::uint64_t seed) {
    detail::require(n_classes >= 2 && per_class > 0 && feature_dim > 0, "gen_blobs: arguments must be positive");
    detail::require(spreads.size() == n_classes, "gen_blobs: need one spread per class");
    for (double s : spreads) detail::require(std::isfinite(s) && s >= 0.0, "gen_blobs: spread must be nonnegative");
    Rng rng(seed);
    std::vector<std::vector<double>> centers(n_classes, std::vector<double>(feature_dim));
    for (auto& c : centers)
        for (auto& v : c) v = rng.uniform(0.2, 0.8);
    Dataset ds{{}, n_classes, feature_dim};
    ds.samples.reserve(n_classes * per_class);
    for (std::size_t c = 0; c < n_classes; ++c) {
        for (std::size_t k = 0; k < per_class; ++k) {
            std::vector<double> x(feature_dim);
            for (std::size_t d = 0; d < feature_dim; ++d)
                x[d] = std::clamp(centers[c][d] + spreads[c] * rng.normal(), 0.0, 1.0);
            ds.samples.push_back({Tensor::vector(std::move(x)), c});
        }
    }
    return ds;
}

inline Dataset gen_blobs(std::size_t n_classes, std::size_t per_class, std::size_t feature_dim, double spread,
                         std::uint64_t seed) {
    return gen_blobs(n_classes, per_class, feature_dim, std::vector<double>(n_classes, spread), seed);
}

/// CSV: comma-separated features then the integer label; no header.
inline Dataset parse_csv_dataset(const std::string& text, std::size_t n_classes, const std::string& source) {
    detail::require(n_classes >= 2, "load_csv: n_classes must be at least 2");
    Dataset ds{{}, n_classes, 0};
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        const auto fields = detail::split_fields(line);
        const auto where = detail::location(source, lineno);
        if (fields.size() < 2) throw ValidationError(where + ": need at least one feature and a label");
        std::vector<double> x(fields.size() - 1);
        for (std::size_t k = 0; k + 1 < fields.size(); ++k) {
            if (!detail::parse_double(fields[k], x[k]))
                throw ValidationError(where + ": malformed feature '" + std::string(fields[k]) + "'");
            if (!(x[k] >= 0.0 && x[k] <= 1.0))
                throw ValidationError(where + ": feature " + std::to_string(k) + " = " + std::string(fields[k]) +
                                      " outside [0,1]");
        }
        double label_value;
        if (!detail::parse_double(fields.back(), label_value) || label_value < 0 ||
            label_value != std::floor(label_value))
            throw ValidationError(where + ": malformed label '" + std::string(fields.back()) + "'");
        if (label_value >= static_cast<double>(n_classes))
            throw ValidationError(where + ": label " + std::string(fields.back()) + " out of range");
        if (ds.samples.empty())
            ds.feature_dim = x.size();
        else if (x.size() != ds.feature_dim)
            throw ValidationError(where + ": expected " + std::to_string(ds.feature_dim) + " features, got " +
                                  std::to_string(x.size()));
        ds.samples.push_back({Tensor::vector(std::move(x)), static_cast<ClassIndex>(label_value)});
    }
    return ds;
}

inline Dataset load_csv(const std::string& path, std::size_t n_classes) {
    return parse_csv_dataset(read_text_file(path), n_classes, path);
}

inline std::string to_csv(const Dataset& ds) {
    std::string out;
    for (const auto& s : ds.samples) {
        for (double v : s.x.data) {
            out += format_double(v);
            out += ',';
        }
        out += std::to_string(s.label);
        out += '\n';
    }
    return out;
}

inline void save_csv(const Dataset& ds, const std::string& path) { write_text_file(path, to_csv(ds)); }

inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;

namespace detail {

inline std::uint32_t read_be32(const std::string& bytes, std::size_t offset, const std::string& source) {
    require(offset + 4 <= bytes.size(), source + ": truncated IDX header");
    return (std::uint32_t(std::uint8_t(bytes[offset])) << 24) | (std::uint32_t(std::uint8_t(bytes[offset + 1])) << 16) |
           (std::uint32_t(std::uint8_t(bytes[offset + 2])) << 8) | std::uint32_t(std::uint8_t(bytes[offset + 3]));
}

}  // namespace detail

/// Parses IDX image and label files. Pixels scale by 1/255. With
/// `downsample_to`, each image is area-averaged to side x side, which
/// requires rows == cols divisible by side.
inline Dataset parse_idx(const std::string& image_bytes, const std::string& label_bytes,
                         std::optional<std::size_t> downsample_to, const std::string& image_source = "images",
                         const std::string& label_source = "labels") {
    const auto image_magic = detail::read_be32(image_bytes, 0, image_source);
    if (image_magic != kIdxImageMagic)
        throw ValidationError(image_source + ": bad IDX image magic " + std::to_string(image_magic));
    const auto label_magic = detail::read_be32(label_bytes, 0, label_source);
    if (label_magic != kIdxLabelMagic)
        throw ValidationError(label_source + ": bad IDX label magic " + std::to_string(label_magic));
    const std::size_t count = detail::read_be32(image_bytes, 4, image_source);
    const std::size_t rows = detail::read_be32(image_bytes, 8, image_source);
    const std::size_t cols = detail::read_be32(image_bytes, 12, image_source);
    const std::size_t label_count = detail::read_be32(label_bytes, 4, label_source);
    if (count != label_count)
        throw ValidationError("IDX count mismatch: " + std::to_string(count) + " images vs " +
                              std::to_string(label_count) + " labels");
    detail::require(rows > 0 && cols > 0, image_source + ": zero image dimension");
    const std::size_t pixels = rows * cols;
    detail::require(image_bytes.size() == 16 + count * pixels, image_source + ": payload size does not match header");
    detail::require(label_bytes.size() == 8 + count, label_source + ": payload size does not match header");

    std::size_t side_r = rows, side_c = cols, block = 1;
    if (downsample_to) {
        const std::size_t side = *downsample_to;
        detail::require(side > 0 && rows == cols && rows % side == 0,
                        "IDX downsample: image " + std::to_string(rows) + "x" + std::to_string(cols) +
                            " is not divisible into " + std::to_string(side) + "x" + std::to_string(side));
        block = rows / side;
        side_r = side_c = side;
    }

    std::size_t max_label = 0;
    for (std::size_t k = 0; k < count; ++k) max_label = std::max<std::size_t>(max_label, std::uint8_t(label_bytes[8 + k]));
    Dataset ds{{}, std::max<std::size_t>(2, max_label + 1), side_r * side_c};
    ds.samples.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
        const auto* img = reinterpret_cast<const std::uint8_t*>(image_bytes.data()) + 16 + k * pixels;
        std::vector<double> x(side_r * side_c);
        if (block == 1) {
            for (std::size_t p = 0; p < pixels; ++p) x[p] = img[p] / 255.0;
        } else {
            const double area = static_cast<double>(block * block);
            for (std::size_t r = 0; r < side_r; ++r)
                for (std::size_t c = 0; c < side_c; ++c) {
                    double acc = 0.0;
                    for (std::size_t dr = 0; dr < block; ++dr)
                        for (std::size_t dc = 0; dc < block; ++dc)
                            acc += img[(r * block + dr) * cols + (c * block + dc)] / 255.0;
                    x[r * side_c + c] = acc / area;
                }
        }
        ds.samples.push_back({Tensor::vector(std::move(x)), std::uint8_t(label_bytes[8 + k])});
    }
    return ds;
}

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        std::optional<std::size_t> downsample_to = std::nullopt) {
    return parse_idx(read_text_file(images_path), read_text_file(labels_path), downsample_to, images_path,
                     labels_path);
}

struct SplitSpec {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
    std::uint64_t seed = 0;
};

struct SplitResult {
    Dataset train, val, test;
};

/// Stratified split: each class is shuffled by seed and cut into
/// round(f_train*k) / round(f_val*k) / rest, with every part kept nonempty.
inline SplitResult split(const Dataset& ds, const SplitSpec& spec) {
    detail::require(spec.train > 0 && spec.val > 0 && spec.test > 0, "split: fractions must be positive");
    detail::require(std::abs(spec.train + spec.val + spec.test - 1.0) < 1e-9, "split: fractions must sum to 1");
    SplitResult out{{{}, ds.n_classes, ds.feature_dim}, {{}, ds.n_classes, ds.feature_dim}, {{}, ds.n_classes, ds.feature_dim}};
    for (ClassIndex c = 0; c < ds.n_classes; ++c) {
        std::vector<std::size_t> idx;
        for (std::size_t k = 0; k < ds.samples.size(); ++k)
            if (ds.samples[k].label == c) idx.push_back(k);
        if (idx.empty()) continue;
        detail::require(idx.size() >= 3, "split: class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                                             " samples; need at least 3 to stratify");
        Rng rng(derive_seed(spec.seed, c));
        rng.shuffle(idx);
        const auto k = static_cast<double>(idx.size());
        std::size_t n_train = static_cast<std::size_t>(std::llround(spec.train * k));
        std::size_t n_val = static_cast<std::size_t>(std::llround(spec.val * k));
        n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 2);
        n_val = std::clamp<std::size_t>(n_val, 1, idx.size() - n_train - 1);
        for (std::size_t p = 0; p < idx.size(); ++p) {
            auto& part = p < n_train ? out.train : (p < n_train + n_val ? out.val : out.test);
            part.samples.push_back(ds.samples[idx[p]]);
        }
    }
    return out;
}

}  // namespace sensdef
