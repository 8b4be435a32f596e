#pragma once

// Small conditional base denoiser: a residual MLP over the flattened sample with Gaussian
// Fourier embeddings of the noise level and of the conditioning position, wrapped in the
// EDM output reparametrization.

#include "dde/autodiff.hpp"
#include "dde/datasets.hpp"
#include "dde/diffusion.hpp"
#include "dde/params.hpp"
#include "dde/training.hpp"

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

namespace dde {

struct EdmCoefficients {
    double c_skip = 1.0;
    double c_out = 0.0;
    double c_in = 1.0;
    double c_noise = 0.0;
};

inline EdmCoefficients edm_coefficients(double sigma, double sigma_data) {
    require(sigma > 0.0, "precondition: sigma must be positive");
    require(sigma_data > 0.0, "precondition: sigma_data must be positive");
    const double s2 = sigma * sigma, d2 = sigma_data * sigma_data;
    return {d2 / (s2 + d2), sigma * sigma_data / std::sqrt(s2 + d2), 1.0 / std::sqrt(s2 + d2), 0.25 * std::log(sigma)};
}

/// c_skip x + c_out raw(c_in x, c_noise).
template <class T, class Raw>
Mat<T> precondition(Raw&& raw, const Mat<T>& x, double sigma, double sigma_data) {
    const auto c = edm_coefficients(sigma, sigma_data);
    Mat<T> inner = x * static_cast<T>(c.c_in);
    Mat<T> f = raw(inner, c.c_noise);
    require_same_shape(f, x.rows(), x.cols(), "precondition: raw network output");
    return static_cast<T>(c.c_skip) * x + static_cast<T>(c.c_out) * f;
}

struct BaseModelConfig {
    long dim = 256;
    long hidden = 128;
    int blocks = 2;
    int time_freqs = 16;
    double time_scale = 1.0;
    int cond_freqs = 32;
    double cond_scale = 4.0;
    bool conditional = true;
    double sigma_data = 1.0;
};

/// Gaussian Fourier features [sin(2 pi f v), cos(2 pi f v)] for each column of `values`.
template <class T>
Mat<T> fourier_features(const Mat<T>& values, const Mat<T>& freqs) {
    const long n = values.rows(), k = freqs.cols();
    Mat<T> out(n, 2 * k * values.cols());
    const T two_pi = static_cast<T>(2.0 * std::numbers::pi);
    for (long r = 0; r < n; ++r)
        for (long c = 0; c < values.cols(); ++c)
            for (long j = 0; j < k; ++j) {
                const T a = two_pi * freqs(0, j) * values(r, c);
                out(r, c * 2 * k + j) = std::sin(a);
                out(r, c * 2 * k + k + j) = std::cos(a);
            }
    return out;
}

template <class T>
class BaseDenoiser {
public:
    BaseDenoiser() = default;
    BaseDenoiser(BaseModelConfig cfg, ParamSet<T> params) : cfg_(cfg), params_(std::move(params)) {}

    static BaseDenoiser init(const BaseModelConfig& cfg, std::uint64_t seed) {
        require(cfg.dim >= 1 && cfg.hidden >= 1 && cfg.blocks >= 0, "BaseModelConfig: invalid sizes");
        Rng rng(seed);
        ParamSet<T> p;
        const long h = cfg.hidden, tf = 2 * cfg.time_freqs, cf = 4 * cfg.cond_freqs;
        auto he = [&](long in, long out) { return rng.normal_matrix<T>(in, out, std::sqrt(1.0 / in)); };
        p.add("time.freq", rng.normal_matrix<T>(1, cfg.time_freqs, cfg.time_scale), false);
        p.add("time.w1", he(tf, h));
        p.add("time.b1", Mat<T>::Zero(1, h));
        p.add("time.w2", he(h, h));
        p.add("time.b2", Mat<T>::Zero(1, h));
        if (cfg.conditional) {
            p.add("cond.freq", rng.normal_matrix<T>(1, cfg.cond_freqs, cfg.cond_scale), false);
            p.add("cond.w", Mat<T>::Zero(cf, h));
        }
        p.add("in.w", he(cfg.dim, h));
        p.add("in.b", Mat<T>::Zero(1, h));
        for (int b = 0; b < cfg.blocks; ++b) {
            const std::string k = "block" + std::to_string(b);
            p.add(k + ".w1", he(h, h));
            p.add(k + ".b1", Mat<T>::Zero(1, h));
            p.add(k + ".emb", he(h, h));
            p.add(k + ".w2", Mat<T>(he(h, h) * T(0.1)));
            p.add(k + ".b2", Mat<T>::Zero(1, h));
        }
        p.add("out.w", Mat<T>::Zero(h, cfg.dim));
        p.add("out.b", Mat<T>::Zero(1, cfg.dim));
        return BaseDenoiser(cfg, std::move(p));
    }

    const BaseModelConfig& config() const { return cfg_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }

    /// Denoised estimate on a tape; row r has noise level sigmas[r] and conditioning conds[r].
    ad::Var<T> forward(ad::Tape<T>& tape, const Mat<T>& x, const Vec<T>& sigmas,
                       std::span<const Conditioning> conds) const {
        const long n = x.rows();
        require(x.cols() == cfg_.dim, "BaseDenoiser: sample width " + std::to_string(x.cols()) + " != " +
                                          std::to_string(cfg_.dim));
        require(sigmas.size() == n, "BaseDenoiser: sigma count mismatch");
        require(conds.empty() || static_cast<long>(conds.size()) == n, "BaseDenoiser: conditioning count mismatch");

        Vec<T> c_skip(n), c_out(n), c_in(n);
        Mat<T> c_noise(n, 1);
        for (long r = 0; r < n; ++r) {
            const auto c = edm_coefficients(static_cast<double>(sigmas[r]), cfg_.sigma_data);
            c_skip[r] = static_cast<T>(c.c_skip);
            c_out[r] = static_cast<T>(c.c_out);
            c_in[r] = static_cast<T>(c.c_in);
            c_noise(r, 0) = static_cast<T>(c.c_noise);
        }
        auto P = [&](const char* name) { return bind(tape, name); };

        auto tfeat = tape.constant(fourier_features(c_noise, params_["time.freq"].value));
        auto emb = ad::linear(ad::silu(ad::linear(tfeat, P("time.w1"), P("time.b1"))), P("time.w2"), P("time.b2"));
        if (cfg_.conditional && !conds.empty()) {
            Mat<T> pos(n, 2);
            std::vector<bool> present(n, false);
            for (long r = 0; r < n; ++r) {
                if (conds[r]) {
                    pos(r, 0) = static_cast<T>(conds[r]->x);
                    pos(r, 1) = static_cast<T>(conds[r]->y);
                    present[r] = true;
                } else {
                    pos.row(r).setZero();
                }
            }
            Mat<T> cfeat = fourier_features(pos, params_["cond.freq"].value);
            for (long r = 0; r < n; ++r)
                if (!present[r]) cfeat.row(r).setZero();
            emb = ad::add(emb, ad::matmul(tape.constant(std::move(cfeat)), P("cond.w")));
        }

        auto xin = tape.constant(c_in.asDiagonal() * x);
        auto h = ad::add(ad::linear(xin, P("in.w"), P("in.b")), emb);
        auto act_emb = ad::silu(emb);
        for (int b = 0; b < cfg_.blocks; ++b) {
            const std::string k = "block" + std::to_string(b);
            auto z = ad::add(ad::linear(ad::silu(h), bind(tape, k + ".w1"), bind(tape, k + ".b1")),
                             ad::matmul(act_emb, bind(tape, k + ".emb")));
            h = ad::add(h, ad::linear(ad::silu(z), bind(tape, k + ".w2"), bind(tape, k + ".b2")));
        }
        auto raw = ad::linear(ad::silu(h), P("out.w"), P("out.b"));
        auto skip = tape.constant(c_skip.asDiagonal() * x);
        return ad::add(skip, ad::rowscale(raw, c_out));
    }

    /// Batched inference at a shared noise level.
    Mat<T> operator()(const Mat<T>& x, double sigma, std::span<const Conditioning> conds = {}) const {
        ad::Tape<T> tape(false);
        Vec<T> s = Vec<T>::Constant(x.rows(), static_cast<T>(sigma));
        auto out = forward(tape, x, s, conds);
        return out.value();
    }

    /// Same conditioning for every row.
    Mat<T> denoise_all(const Mat<T>& x, double sigma, const Conditioning& cond) const {
        std::vector<Conditioning> c(x.rows(), cond);
        return (*this)(x, sigma, c);
    }

    Metadata metadata() const {
        return {{"kind", "base"},
                {"dim", std::to_string(cfg_.dim)},
                {"hidden", std::to_string(cfg_.hidden)},
                {"blocks", std::to_string(cfg_.blocks)},
                {"time_freqs", std::to_string(cfg_.time_freqs)},
                {"cond_freqs", std::to_string(cfg_.cond_freqs)},
                {"conditional", cfg_.conditional ? "1" : "0"},
                {"sigma_data", format_double(cfg_.sigma_data)}};
    }

    static BaseDenoiser from_checkpoint(const Checkpoint<T>& ck) {
        auto get = [&](const char* k) {
            auto it = ck.meta.find(k);
            if (it == ck.meta.end()) throw std::runtime_error(std::string("checkpoint: missing metadata ") + k);
            return it->second;
        };
        if (get("kind") != "base") throw std::runtime_error("checkpoint: not a base model checkpoint");
        BaseModelConfig cfg;
        cfg.dim = std::stol(get("dim"));
        cfg.hidden = std::stol(get("hidden"));
        cfg.blocks = std::stoi(get("blocks"));
        cfg.time_freqs = std::stoi(get("time_freqs"));
        cfg.cond_freqs = std::stoi(get("cond_freqs"));
        cfg.conditional = get("conditional") == "1";
        cfg.sigma_data = std::stod(get("sigma_data"));
        BaseDenoiser m = init(cfg, 0);
        require(m.params_.same_structure(ck.params), "checkpoint: parameter table does not match base architecture");
        m.params_ = ck.params.template cast<T>();
        return m;
    }

    static std::string format_double(double v) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return buf;
    }

private:
    ad::Var<T> bind(ad::Tape<T>& tape, const std::string& name) const {
        auto& p = const_cast<ad::Parameter<T>&>(params_[name]);
        return tape.recording() ? tape.param(p) : tape.constant(p.value);
    }

    BaseModelConfig cfg_;
    ParamSet<T> params_;
};

/// D(x) = x W + b at one fixed noise level. The closed-form optimum for Gaussian data is known,
/// which makes this the reference check for the training loop.
template <class T>
struct AffineDenoiser {
    Mat<T> weight;  // d x d
    Mat<T> bias;    // 1 x d

    Mat<T> operator()(const Mat<T>& x, double) const {
        Mat<T> out = x * weight;
        out.rowwise() += bias.row(0);
        return out;
    }
};

/// Fits an affine denoiser at noise level `sigma` by minimizing the squared denoising error
/// with fresh noise every visit. Starts from the identity map.
template <class T>
TrainResult<T> train_affine_denoiser(AffineDenoiser<T>& model, const Mat<T>& samples, double sigma,
                                     const TrainConfig& cfg) {
    require(sigma > 0.0, "train_affine_denoiser: sigma must be positive");
    require(model.weight.rows() == samples.cols() && model.weight.cols() == samples.cols() &&
                model.bias.rows() == 1 && model.bias.cols() == samples.cols(),
            "train_affine_denoiser: model does not match the sample width");
    ParamSet<T> params;
    params.add("w", model.weight);
    params.add("b", model.bias);
    auto loss = [&](ad::Tape<T>& tape, std::span<const long> idx, Rng& rng) {
        const long n = static_cast<long>(idx.size());
        Mat<T> clean(n, samples.cols());
        for (long i = 0; i < n; ++i) clean.row(i) = samples.row(idx[i]);
        Mat<T> noisy = add_noise(clean, sigma, rng);
        auto pred = ad::linear(tape.constant(noisy), tape.param(params["w"]), tape.param(params["b"]));
        return ad::weighted_sq_error(pred, clean, Vec<T>(Vec<T>::Ones(n)));
    };
    auto res = run_training(params, samples.rows(), cfg, loss);
    model.weight = res.ema["w"].value;
    model.bias = res.ema["b"].value;
    return res;
}

/// Training set for the base model: one sample per row with its conditioning.
template <class T>
struct BaseTrainingSet {
    Mat<T> samples;
    std::vector<Conditioning> conds;  // empty for unconditional data
};

/// Minimizes the EDM-weighted denoising loss; conditionings are replaced by the null
/// conditioning with probability cfg.cond_dropout. Updates `model` in place and returns the
/// EMA weights plus the per-epoch loss log.
template <class T>
TrainResult<T> train_base(BaseDenoiser<T>& model, const BaseTrainingSet<T>& data, const TrainConfig& cfg) {
    require(data.samples.rows() >= 1, "train_base: empty dataset");
    require(data.conds.empty() || static_cast<long>(data.conds.size()) == data.samples.rows(),
            "train_base: conditioning count mismatch");
    const EdmWeighting weight{model.config().sigma_data};
    auto loss = [&](ad::Tape<T>& tape, std::span<const long> idx, Rng& rng) {
        const long n = static_cast<long>(idx.size());
        Mat<T> clean(n, data.samples.cols());
        Vec<T> sig(n), w(n);
        std::vector<Conditioning> conds(n);
        for (long i = 0; i < n; ++i) {
            clean.row(i) = data.samples.row(idx[i]);
            const double s = sample_sigma(cfg.sigma, rng);
            sig[i] = static_cast<T>(s);
            w[i] = static_cast<T>(weight(s));
            if (!data.conds.empty() && rng.uniform() >= cfg.cond_dropout) conds[i] = data.conds[idx[i]];
        }
        Mat<T> noisy = clean;
        for (long i = 0; i < n; ++i)
            for (long j = 0; j < clean.cols(); ++j) noisy(i, j) += static_cast<T>(sig[i] * rng.normal());
        auto out = model.forward(tape, noisy, sig, conds);
        return ad::weighted_sq_error(out, clean, w);
    };
    return run_training(model.params(), data.samples.rows(), cfg, loss);
}

}  // namespace dde
