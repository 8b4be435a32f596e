#pragma once

// Recurrent coordinator baseline for ordered 1D patches: (h_{i+1}, x'_i) = f(h_i, x_i) with
// h_0 = 0, where f is two kernel-3 convolutions over the patch axis. Outputs replace the base
// outputs (no residual) and overlaps are averaged afterwards.

#include "dde/autodiff.hpp"
#include "dde/coordinator.hpp"
#include "dde/params.hpp"

#include <string>
#include <vector>

namespace dde {

struct RecurrentConfig {
    long patch_len = 64;
    long hidden_channels = 16;
    long width = 32;  // channels between the two convolutions
    double sigma_data = 1.0;

    void validate() const {
        require(patch_len >= 1 && hidden_channels >= 0 && width >= 1, "RecurrentConfig: invalid sizes");
        require(sigma_data > 0.0, "RecurrentConfig: sigma_data must be positive");
    }
};

namespace detail {
/// im2col index for a kernel-3, zero-padded convolution over `batch` sequences of length n with c channels.
inline ad::Index conv3_index(long batch, long n, long c) {
    std::vector<long> idx;
    idx.reserve(batch * n * 3 * c);
    for (long b = 0; b < batch; ++b)
        for (long t = 0; t < n; ++t)
            for (long d = -1; d <= 1; ++d)
                for (long ch = 0; ch < c; ++ch) {
                    const long src = t + d;
                    idx.push_back(src >= 0 && src < n ? (b * n + src) * c + ch : -1);
                }
    return ad::make_index(std::move(idx));
}
}  // namespace detail

template <class T>
class RecurrentCoordinator {
public:
    RecurrentCoordinator() = default;
    RecurrentCoordinator(RecurrentConfig cfg, ParamSet<T> params) : cfg_(cfg), params_(std::move(params)) {}

    static RecurrentCoordinator init(const RecurrentConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Rng rng(seed);
        const long c = cfg.hidden_channels + 1;
        ParamSet<T> p;
        p.add("f.c1.w", rng.normal_matrix<T>(3 * c, cfg.width, std::sqrt(1.0 / (3.0 * c))));
        p.add("f.c1.b", Mat<T>::Zero(1, cfg.width));
        p.add("f.c2.w", rng.normal_matrix<T>(3 * cfg.width, c, std::sqrt(1.0 / (3.0 * cfg.width))));
        p.add("f.c2.b", Mat<T>::Zero(1, c));
        return RecurrentCoordinator(cfg, std::move(p));
    }

    const RecurrentConfig& config() const { return cfg_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }

    /// Corrected patches. Every example must use the same 1D layout so that the recurrence runs
    /// over patch index in lockstep.
    ad::Var<T> forward_patches(ad::Tape<T>& tape, const CoordinatorBatch<T>& in) const {
        in.validate();
        const auto& lay = in.layouts.front();
        for (const auto& l : in.layouts)
            require(l.offsets == lay.offsets, "RecurrentCoordinator: examples must share one layout");
        require(lay.patch_h == 1 && lay.patch_w == cfg_.patch_len,
                "RecurrentCoordinator: expected 1D patches of length " + std::to_string(cfg_.patch_len));
        const long nb = in.batch(), k = lay.count(), n = cfg_.patch_len, hc = cfg_.hidden_channels, c = hc + 1;
        auto idx1 = detail::conv3_index(nb, n, c), idx2 = detail::conv3_index(nb, n, cfg_.width);
        auto P = [&](const char* name) { return bind(tape, name); };
        auto w1 = P("f.c1.w"), b1 = P("f.c1.b"), w2 = P("f.c2.w"), b2 = P("f.c2.b");

        std::vector<std::pair<ad::Var<T>, ad::Index>> outs;
        ad::Var<T> h = tape.constant(Mat<T>::Zero(nb * n, hc));
        for (long i = 0; i < k; ++i) {
            Mat<T> xi(nb * n, 1);
            for (long b = 0; b < nb; ++b) xi.middleRows(b * n, n) = in.base_outputs.row(b * k + i).transpose();
            auto z = hc > 0 ? ad::concat_cols(h, tape.constant(std::move(xi))) : tape.constant(std::move(xi));
            auto a = ad::silu(ad::linear(ad::gather(z, idx1, nb * n, 3 * c), w1, b1));
            auto o = ad::linear(ad::gather(a, idx2, nb * n, 3 * cfg_.width), w2, b2);
            if (hc > 0) h = ad::slice_cols(o, 0, hc);
            // (nb*n x 1) column -> rows b*k + i of the (nb*k x n) patch matrix
            std::vector<long> dst(nb * n);
            for (long b = 0; b < nb; ++b)
                for (long t = 0; t < n; ++t) dst[b * n + t] = (b * k + i) * n + t;
            outs.push_back({ad::slice_cols(o, hc, 1), ad::make_index(std::move(dst))});
        }
        ad::Var<T> acc = ad::scatter_add(outs.front().first, outs.front().second, nb * k, n);
        for (std::size_t i = 1; i < outs.size(); ++i)
            acc = ad::add(acc, ad::scatter_add(outs[i].first, outs[i].second, nb * k, n));
        return acc;
    }

    ad::Var<T> forward_objects(ad::Tape<T>& tape, const CoordinatorBatch<T>& in) const {
        return recompose_on_tape(forward_patches(tape, in), in.layouts);
    }

    Mat<T> corrected_patches(const CoordinatorBatch<T>& in) const {
        ad::Tape<T> tape(false);
        return forward_patches(tape, in).value();
    }

    Mat<T> composite(const CoordinatorBatch<T>& in) const { return recompose_batch(corrected_patches(in), in.layouts); }

    Metadata metadata(const Metadata& extra = {}) const {
        Metadata m = extra;
        m["kind"] = "recurrent";
        m["patch_len"] = std::to_string(cfg_.patch_len);
        m["hidden_channels"] = std::to_string(cfg_.hidden_channels);
        m["width"] = std::to_string(cfg_.width);
        m["sigma_data"] = BaseDenoiser<T>::format_double(cfg_.sigma_data);
        return m;
    }

    static RecurrentCoordinator from_checkpoint(const Checkpoint<T>& ck) {
        auto get = [&](const char* k) {
            auto it = ck.meta.find(k);
            if (it == ck.meta.end()) throw std::runtime_error(std::string("checkpoint: missing metadata ") + k);
            return it->second;
        };
        if (get("kind") != "recurrent") throw std::runtime_error("checkpoint: not a recurrent coordinator checkpoint");
        RecurrentConfig c{std::stol(get("patch_len")), std::stol(get("hidden_channels")), std::stol(get("width")),
                          std::stod(get("sigma_data"))};
        auto m = init(c, 0);
        require(m.params_.same_structure(ck.params), "checkpoint: parameter table does not match recurrent architecture");
        m.params_ = ck.params.template cast<T>();
        return m;
    }

private:
    ad::Var<T> bind(ad::Tape<T>& tape, const std::string& name) const {
        auto& p = const_cast<ad::Parameter<T>&>(params_[name]);
        return tape.recording() ? tape.param(p) : tape.constant(p.value);
    }

    RecurrentConfig cfg_;
    ParamSet<T> params_;
};

}  // namespace dde
