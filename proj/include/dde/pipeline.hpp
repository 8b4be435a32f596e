#pragma once

// Task wiring shared by the CLI and the acceptance suite: training sets for the bump and
// signal tasks, and sampling with every coordination method.

#include "dde/base_model.hpp"
#include "dde/baselines.hpp"
#include "dde/coordinator.hpp"
#include "dde/datasets.hpp"
#include "dde/eval.hpp"
#include "dde/recurrent.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

namespace dde {

enum class Method { dde, multidiffusion, concat, rrr, rnn };

inline std::string method_name(Method m) {
    switch (m) {
        case Method::dde: return "dde";
        case Method::multidiffusion: return "multidiffusion";
        case Method::concat: return "concat";
        case Method::rrr: return "rrr";
        case Method::rnn: return "rnn";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    for (Method m : {Method::dde, Method::multidiffusion, Method::concat, Method::rrr, Method::rnn})
        if (method_name(m) == s) return m;
    throw std::invalid_argument("unknown method '" + s + "' (expected dde, multidiffusion, concat, rrr or rnn)");
}

/// The base model as a PatchDenoiser.
template <class T>
struct BaseAdapter {
    const BaseDenoiser<T>* model = nullptr;
    Mat<T> operator()(const Mat<T>& x, double sigma, std::span<const Conditioning> conds) const {
        return (*model)(x, sigma, conds);
    }
};

// ------------------------------------------------------------------- bump task

inline BaseTrainingSet<float> bump_base_set(const BumpDataset& ds) {
    BaseTrainingSet<float> s{ds.images.cast<float>(), {}};
    for (const auto& p : ds.annotated) s.conds.emplace_back(p);
    return s;
}

/// Each example draws L ~ Uniform{1..L_train} distinct bump centers of the image (fewer if the
/// image has fewer bumps) and expands the image into that many conditioning slots.
inline CoordTrainingSet<float> bump_coord_set(const BumpDataset& ds, long L_train) {
    require(L_train >= 1, "bump_coord_set: L_train must be positive");
    const long h = ds.config.height, w = ds.config.width;
    auto bumps = std::make_shared<const std::vector<std::vector<Position>>>(ds.bumps);
    return {ds.images.cast<float>(), [bumps, L_train, h, w](long item, Rng& rng) {
                std::vector<Position> pool = (*bumps)[item];
                std::shuffle(pool.begin(), pool.end(), rng.engine());
                const long L = std::min<long>(rng.integer(1, L_train), static_cast<long>(pool.size()));
                CoordExample ex{PatchLayout::replicated(L, h, w), {}};
                for (long i = 0; i < L; ++i) ex.conds.emplace_back(pool[i]);
                return ex;
            }};
}

struct BumpSampleRequest {
    Method method = Method::dde;
    long L = 1;
    double w = 0.0;  // guidance weight (RRR weight for Method::rrr)
    SamplerConfig sampler;
    std::vector<std::vector<Position>> conds;  // L positions per sample
    std::vector<std::uint64_t> seeds;          // one per sample
};

inline Mat<float> sample_bump(const BaseDenoiser<float>& base, const Coordinator<float>* coord,
                              const BumpSampleRequest& req, long height = 16, long width = 16) {
    require(req.conds.size() == req.seeds.size() && !req.seeds.empty(), "sample_bump: need one seed per conditioning set");
    std::vector<Conditioning> flat;
    for (const auto& set : req.conds) {
        require(static_cast<long>(set.size()) == req.L, "sample_bump: conditioning set size != L");
        for (const auto& p : set) flat.emplace_back(p);
    }
    BaseAdapter<float> b{&base};
    const auto layout = PatchLayout::replicated(req.L, height, width);
    const long dim = height * width;
    switch (req.method) {
        case Method::dde: {
            require(coord != nullptr, "sample_bump: method dde needs a coordinator checkpoint");
            CompositeDenoiser<float, BaseAdapter<float>, Coordinator<float>> d{&b, coord, layout, flat, req.w};
            return ode_sample<float>(d, req.sampler, dim, req.seeds);
        }
        case Method::multidiffusion: {
            MultiDiffusionDenoiser<float, BaseAdapter<float>> d{&b, layout, flat, req.w};
            return ode_sample<float>(d, req.sampler, dim, req.seeds);
        }
        case Method::rrr: {
            RrrDenoiser<float, BaseAdapter<float>> d{&b, req.L, flat, req.w};
            return ode_sample<float>(d, req.sampler, dim, req.seeds);
        }
        default:
            throw std::invalid_argument("sample_bump: method " + method_name(req.method) +
                                        " is not defined for the bump task");
    }
}

// ------------------------------------------------------------------- signal task

struct SignalGeometry {
    long patch = 64;
    long stride = 48;  // overlap of a quarter patch

    PatchLayout overlapping(long k) const { return PatchLayout::from(PatchGrid1D::from_count(patch, stride, k)); }
    long length(long k) const { return patch + stride * (k - 1); }
    /// Non-overlapping tiling of the same length, for concatenation.
    PatchLayout disjoint(long total) const {
        require(total % patch == 0, "SignalGeometry: length " + std::to_string(total) +
                                        " is not a multiple of the patch length " + std::to_string(patch));
        return PatchLayout::from(PatchGrid1D::from_total(total, patch, patch));
    }
};

inline BaseTrainingSet<float> signal_base_set(const SignalDataset& ds, long patch, long count, std::uint64_t seed) {
    Rng rng(seed);
    return {slice_windows(ds, patch, count, rng).cast<float>(), {}};
}

inline CoordTrainingSet<float> signal_coord_set(const SignalDataset& ds, const SignalGeometry& g, long L_train,
                                                long count, std::uint64_t seed) {
    Rng rng(seed);
    const auto layout = g.overlapping(L_train);
    return {slice_windows(ds, layout.object_size(), count, rng).cast<float>(),
            [layout](long, Rng&) { return CoordExample{layout, {}}; }};
}

/// Unconditional long-signal sampling with k overlapping patches (concat tiles the same length
/// without overlap).
inline Mat<float> sample_signal(Method method, const BaseDenoiser<float>& base, const Coordinator<float>* coord,
                                const RecurrentCoordinator<float>* rnn, const SignalGeometry& g, long k,
                                const SamplerConfig& sampler, std::span<const std::uint64_t> seeds) {
    BaseAdapter<float> b{&base};
    const auto layout = g.overlapping(k);
    const long dim = layout.object_size();
    switch (method) {
        case Method::dde: {
            require(coord != nullptr, "sample_signal: method dde needs a coordinator checkpoint");
            CompositeDenoiser<float, BaseAdapter<float>, Coordinator<float>> d{&b, coord, layout, {}, 0.0};
            return ode_sample<float>(d, sampler, dim, seeds);
        }
        case Method::rnn: {
            require(rnn != nullptr, "sample_signal: method rnn needs a recurrent coordinator checkpoint");
            CompositeDenoiser<float, BaseAdapter<float>, RecurrentCoordinator<float>> d{&b, rnn, layout, {}, 0.0};
            return ode_sample<float>(d, sampler, dim, seeds);
        }
        case Method::multidiffusion: {
            MultiDiffusionDenoiser<float, BaseAdapter<float>> d{&b, layout, {}, 0.0};
            return ode_sample<float>(d, sampler, dim, seeds);
        }
        case Method::concat:
            return concat_sample<float>(b, {}, sampler, g.disjoint(dim), seeds);
        default:
            throw std::invalid_argument("sample_signal: method " + method_name(method) +
                                        " is not defined for the signal task");
    }
}

}  // namespace dde
