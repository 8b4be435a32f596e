#pragma once

// Synthetic datasets: long stationary 1D signals and small images of Gaussian bumps with
// position annotations.

#include "dde/random.hpp"
#include "dde/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

namespace dde {

/// A position in the unit square; x runs along image columns, y along rows.
struct Position {
    double x = 0.5;
    double y = 0.5;

    friend bool operator==(const Position&, const Position&) = default;
};

/// std::nullopt is the null (masked-out) conditioning.
using Conditioning = std::optional<Position>;

inline long nearest_index(double coord, long size) {
    return std::clamp(static_cast<long>(std::floor(coord * static_cast<double>(size))), 0L, size - 1);
}

inline Position pixel_center(long row, long col, long height, long width) {
    return {(static_cast<double>(col) + 0.5) / static_cast<double>(width),
            (static_cast<double>(row) + 0.5) / static_cast<double>(height)};
}

struct BumpConfig {
    long height = 16;
    long width = 16;
    int min_bumps = 1;
    int max_bumps = 3;
    double bump_width = 1.0;  // Gaussian std in pixels
};

struct BumpDataset {
    BumpConfig config;
    MatD images;                              // one flattened image per row
    std::vector<std::vector<Position>> bumps;  // all bump centers per image
    std::vector<Position> annotated;           // the single annotated center per image
    double sigma_data = 1.0;

    long size() const { return images.rows(); }
    long dim() const { return config.height * config.width; }
};

struct SignalConfig {
    long length = 640;
    int components = 4;
    double min_freq = 1.0 / 96.0;  // cycles per sample
    double max_freq = 1.0 / 6.0;
};

struct SignalDataset {
    SignalConfig config;
    MatD signals;             // one normalized signal per row
    double scale = 1.0;       // multiplier applied to the raw sum of sinusoids
    double sigma_data = 1.0;  // empirical std after normalization

    long size() const { return signals.rows(); }
};

inline void render_bump(MatD& images, long row, const BumpConfig& cfg, long r0, long c0) {
    const double inv = 1.0 / (2.0 * cfg.bump_width * cfg.bump_width);
    for (long r = 0; r < cfg.height; ++r)
        for (long c = 0; c < cfg.width; ++c) {
            const double d2 = static_cast<double>((r - r0) * (r - r0) + (c - c0) * (c - c0));
            images(row, r * cfg.width + c) += std::exp(-d2 * inv);
        }
}

/// Images with a random number of unit-peak bumps centered on pixel centers.
inline BumpDataset make_bump_dataset(long size, std::uint64_t seed, const BumpConfig& cfg = {}) {
    require(size >= 1, "make_bump_dataset: size must be positive");
    require(cfg.min_bumps >= 1 && cfg.max_bumps >= cfg.min_bumps, "make_bump_dataset: invalid bump count range");
    Rng rng(seed);
    BumpDataset ds;
    ds.config = cfg;
    ds.images = MatD::Zero(size, cfg.height * cfg.width);
    for (long i = 0; i < size; ++i) {
        const int n = static_cast<int>(rng.integer(cfg.min_bumps, cfg.max_bumps));
        std::vector<Position> centers;
        for (int b = 0; b < n; ++b) {
            const long r0 = rng.integer(0, cfg.height - 1);
            const long c0 = rng.integer(0, cfg.width - 1);
            render_bump(ds.images, i, cfg, r0, c0);
            centers.push_back(pixel_center(r0, c0, cfg.height, cfg.width));
        }
        ds.annotated.push_back(centers[rng.integer(0, n - 1)]);
        ds.bumps.push_back(std::move(centers));
    }
    const double mean = ds.images.mean();
    ds.sigma_data = std::sqrt((ds.images.array() - mean).square().mean());
    return ds;
}

/// Sums of random-phase sinusoids with 1/f amplitudes, normalized to unit dataset std.
inline SignalDataset make_signal_dataset(long size, std::uint64_t seed, const SignalConfig& cfg = {}) {
    require(size >= 1, "make_signal_dataset: size must be positive");
    require(cfg.components >= 1 && cfg.min_freq > 0.0 && cfg.max_freq >= cfg.min_freq,
            "make_signal_dataset: invalid spectrum");
    Rng rng(seed);
    SignalDataset ds;
    ds.config = cfg;
    ds.signals = MatD::Zero(size, cfg.length);
    const double lo = std::log(cfg.min_freq), hi = std::log(cfg.max_freq);
    for (long i = 0; i < size; ++i) {
        for (int k = 0; k < cfg.components; ++k) {
            const double f = std::exp(rng.uniform(lo, hi));
            const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
            const double amp = cfg.min_freq / f;
            for (long n = 0; n < cfg.length; ++n)
                ds.signals(i, n) += amp * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(n) + phase);
        }
    }
    const double mean = ds.signals.mean();
    const double std = std::sqrt((ds.signals.array() - mean).square().mean());
    ds.scale = 1.0 / std;
    ds.signals *= ds.scale;
    ds.sigma_data = std::sqrt((ds.signals.array() - ds.signals.mean()).square().mean());
    return ds;
}

/// Random length-`window` slices of the dataset's signals, one per row.
inline MatD slice_windows(const SignalDataset& ds, long window, long count, Rng& rng) {
    require(window >= 1 && window <= ds.config.length, "slice_windows: window longer than signals");
    MatD out(count, window);
    for (long i = 0; i < count; ++i) {
        const long s = rng.integer(0, ds.size() - 1);
        const long o = rng.integer(0, ds.config.length - window);
        out.row(i) = ds.signals.row(s).segment(o, window);
    }
    return out;
}

}  // namespace dde
