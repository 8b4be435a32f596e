#pragma once

// Training-free coordination baselines: independent per-patch sampling (concatenation),
// MultiDiffusion overlap averaging, and RRR composition of conditional outputs.

#include "dde/coordinator.hpp"
#include "dde/decomposition.hpp"
#include "dde/diffusion.hpp"

#include <span>
#include <vector>

namespace dde {

/// recompose_average of the base outputs on every patch of X.
template <class T, class Base>
Mat<T> multidiffusion_denoise(const Base& base, const Mat<T>& X, std::span<const Conditioning> conds, double sigma,
                              const PatchLayout& layout) {
    auto d = decompose(X, layout);
    require(conds.empty() || static_cast<long>(conds.size()) == d.patches.rows(),
            "multidiffusion_denoise: need " + std::to_string(d.patches.rows()) + " conditionings, got " +
                std::to_string(conds.size()));
    Mat<T> out = base(d.patches, sigma, conds);
    require_same_shape(out, d.patches.rows(), d.patches.cols(), "multidiffusion_denoise: base output");
    return recompose_average(out, layout, X.rows());
}

/// MultiDiffusion as an expanded-domain denoiser, with optional classifier-free guidance.
template <class T, class Base>
struct MultiDiffusionDenoiser {
    const Base* base = nullptr;
    PatchLayout layout;
    std::vector<Conditioning> conds;  // layout.count() per sample row, or empty
    double guidance = 0.0;

    Mat<T> operator()(const Mat<T>& x, double sigma) const {
        Mat<T> c = multidiffusion_denoise<T>(*base, x, conds, sigma, layout);
        if (guidance == 0.0 || conds.empty()) return c;
        const auto null = null_like(conds);
        return cfg_combine(c, multidiffusion_denoise<T>(*base, x, null, sigma, layout), guidance);
    }
};

/// True when every object position is covered by exactly one patch.
inline bool is_partition(const PatchLayout& layout) {
    for (int c : coverage_counts(layout))
        if (c != 1) return false;
    return true;
}

/// Samples every patch independently with the base model and writes it into its region.
/// Running the sampler on the whole object with a per-patch denoiser is the same computation,
/// and shares the initial noise with the other methods for equal row seeds.
template <class T, class Base>
Mat<T> concat_sample(const Base& base, std::span<const Conditioning> conds, const SamplerConfig& sampler,
                     const PatchLayout& layout, std::span<const std::uint64_t> row_seeds, double guidance = 0.0) {
    require(is_partition(layout), "concat_sample: patches must tile the object without overlap (stride = patch size)");
    MultiDiffusionDenoiser<T, Base> den{&base, layout, std::vector<Conditioning>(conds.begin(), conds.end()), guidance};
    return ode_sample<T>(den, sampler, layout.object_size(), row_seeds);
}

/// D(x, null) + w * sum_i (D(x, c_i) - D(x, null)). `conds` holds L conditionings per row of x.
template <class T, class Base>
Mat<T> rrr_denoise(const Base& base, const Mat<T>& x, std::span<const Conditioning> conds, long L, double sigma,
                   double w) {
    require(L >= 1, "rrr_denoise: need at least one conditioning");
    require(static_cast<long>(conds.size()) == x.rows() * L,
            "rrr_denoise: need " + std::to_string(x.rows() * L) + " conditionings, got " + std::to_string(conds.size()));
    const long n = x.rows();
    Mat<T> stacked(n * (L + 1), x.cols());
    std::vector<Conditioning> c(n * (L + 1));
    for (long r = 0; r < n; ++r)
        for (long i = 0; i <= L; ++i) {
            stacked.row(r * (L + 1) + i) = x.row(r);
            if (i > 0) c[r * (L + 1) + i] = conds[r * L + i - 1];
        }
    Mat<T> out = base(stacked, sigma, std::span<const Conditioning>(c));
    require_same_shape(out, stacked.rows(), stacked.cols(), "rrr_denoise: base output");
    Mat<T> res(n, x.cols());
    const T wt = static_cast<T>(w);
    for (long r = 0; r < n; ++r) {
        const auto u = out.row(r * (L + 1));
        Mat<T> acc = Mat<T>::Zero(1, x.cols());
        for (long i = 1; i <= L; ++i) acc += out.row(r * (L + 1) + i) - u;
        res.row(r) = u + wt * acc;
    }
    return res;
}

template <class T, class Base>
struct RrrDenoiser {
    const Base* base = nullptr;
    long L = 1;
    std::vector<Conditioning> conds;  // L per sample row
    double w = 4.0;

    Mat<T> operator()(const Mat<T>& x, double sigma) const { return rrr_denoise<T>(*base, x, conds, L, sigma, w); }
};

}  // namespace dde
