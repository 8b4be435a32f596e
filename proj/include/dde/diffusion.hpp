#pragma once

// Variance-exploding diffusion with sigma(t) = t: noising, the denoiser/score identity,
// Karras noise levels, probability-flow samplers, and the Monte-Carlo denoising loss.

#include "dde/random.hpp"
#include "dde/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace dde {

/// A positive noise standard deviation. Identified with diffusion time.
class NoiseLevel {
public:
    explicit NoiseLevel(double sigma) : sigma_(sigma) {
        require(sigma > 0.0 && std::isfinite(sigma), "NoiseLevel: sigma must be positive and finite");
    }
    double value() const noexcept { return sigma_; }
    operator double() const noexcept { return sigma_; }

private:
    double sigma_;
};

struct SigmaScheduleConfig {
    double sigma_min = 1e-4;
    double sigma_max = 80.0;
    double rho = 7.0;
    int n_steps = 100;

    void validate() const {
        require(sigma_min > 0.0, "schedule: sigma_min must be positive");
        require(sigma_min < sigma_max, "schedule: sigma_min must be below sigma_max");
        require(rho > 0.0, "schedule: rho must be positive");
        require(n_steps >= 2, "schedule: n_steps must be at least 2");
    }
};

struct SamplerConfig {
    SigmaScheduleConfig schedule;
    int order = 2;  // 1 = Euler, 2 = Heun
    double s_churn = 0.0;
    double s_noise = 1.0;
    std::uint64_t seed = 0;

    void validate() const {
        schedule.validate();
        require(order == 1 || order == 2, "sampler: order must be 1 (Euler) or 2 (Heun)");
        require(s_churn >= 0.0, "sampler: s_churn must be nonnegative");
    }
};

/// Log-normal distribution over noise levels used during training.
struct SigmaSampler {
    double log_mean = -1.0;
    double log_std = 1.6;
};

inline double sample_sigma(const SigmaSampler& s, Rng& rng) {
    return std::exp(s.log_mean + s.log_std * rng.normal());
}

/// lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2
struct EdmWeighting {
    double sigma_data = 1.0;
    double operator()(double sigma) const {
        return (sigma * sigma + sigma_data * sigma_data) / ((sigma * sigma_data) * (sigma * sigma_data));
    }
};

struct UnitWeighting {
    double operator()(double) const { return 1.0; }
};

/// A batched denoiser: rows of `x` are independent samples sharing noise level `sigma`.
template <class F, class T>
concept Denoiser = requires(F f, const Mat<T>& x, double sigma) {
    { f(x, sigma) } -> std::convertible_to<Mat<T>>;
};

template <class T>
using DenoiseFn = std::function<Mat<T>(const Mat<T>& x, double sigma)>;

template <class T>
Mat<T> add_noise(const Mat<T>& x0, double sigma, Rng& rng) {
    require(sigma >= 0.0, "add_noise: sigma must be nonnegative");
    require(all_finite(x0), "add_noise: input contains non-finite values");
    if (sigma == 0.0) return x0;
    Mat<T> out = x0;
    for (long i = 0; i < out.size(); ++i) out.data()[i] += static_cast<T>(sigma * rng.normal());
    return out;
}

/// score = (D(x) - x) / sigma^2
template <class T>
Mat<T> denoiser_to_score(const Mat<T>& d_out, const Mat<T>& x, double sigma) {
    require(sigma > 0.0, "denoiser_to_score: sigma must be positive");
    require_same_shape(d_out, x.rows(), x.cols(), "denoiser_to_score");
    return (d_out - x) / static_cast<T>(sigma * sigma);
}

/// D(x) = x + sigma^2 * score
template <class T>
Mat<T> score_to_denoiser(const Mat<T>& score, const Mat<T>& x, double sigma) {
    require_same_shape(score, x.rows(), x.cols(), "score_to_denoiser");
    return x + static_cast<T>(sigma * sigma) * score;
}

/// n_steps levels from sigma_max down to sigma_min, power-law spaced in sigma^(1/rho).
inline std::vector<double> karras_sigmas(const SigmaScheduleConfig& cfg) {
    cfg.validate();
    const double inv_rho = 1.0 / cfg.rho;
    const double lo = std::pow(cfg.sigma_min, inv_rho);
    const double hi = std::pow(cfg.sigma_max, inv_rho);
    const int n = cfg.n_steps;
    std::vector<double> out(n);
    for (int i = 0; i < n; ++i) {
        out[i] = std::pow(hi + (static_cast<double>(i) / (n - 1)) * (lo - hi), cfg.rho);
    }
    out.front() = cfg.sigma_max;
    out.back() = cfg.sigma_min;
    return out;
}

/// Integrates dx = -sigma * score(x, sigma) dsigma from sigma_max to 0 along the Karras levels
/// (the last step, sigma_min -> 0, is a plain Euler step). Row r draws its prior sample and
/// churn noise from Rng(row_seeds[r]), so results do not depend on how rows are batched.
/// Denoiser evaluations are confined to [sigma_min, sigma_max].
template <class T, class D>
    requires Denoiser<D, T>
Mat<T> ode_sample(D&& denoiser, const SamplerConfig& cfg, long dim, std::span<const std::uint64_t> row_seeds,
                  const Mat<T>* x_init = nullptr) {
    cfg.validate();
    const long rows = static_cast<long>(row_seeds.size());
    require(rows >= 1, "ode_sample: need at least one row");
    std::vector<Rng> rngs;
    rngs.reserve(rows);
    for (auto s : row_seeds) rngs.emplace_back(s);

    std::vector<double> sigmas = karras_sigmas(cfg.schedule);
    sigmas.push_back(0.0);
    const int n = cfg.schedule.n_steps;
    const double sigma_max = cfg.schedule.sigma_max;

    Mat<T> x(rows, dim);
    if (x_init != nullptr) {
        require_same_shape(*x_init, rows, dim, "ode_sample: x_init");
        x = *x_init;
    } else {
        for (long r = 0; r < rows; ++r)
            for (long j = 0; j < dim; ++j) x(r, j) = static_cast<T>(sigma_max * rngs[r].normal());
    }

    const double gamma_cap = std::sqrt(2.0) - 1.0;
    for (int i = 0; i < n; ++i) {
        const double s_cur = sigmas[i];
        const double s_next = sigmas[i + 1];

        double s_hat = s_cur;
        if (cfg.s_churn > 0.0) {
            const double gamma = std::min(cfg.s_churn / n, gamma_cap);
            s_hat = std::min(s_cur * (1.0 + gamma), sigma_max);
            if (s_hat > s_cur) {
                const double extra = std::sqrt(s_hat * s_hat - s_cur * s_cur) * cfg.s_noise;
                for (long r = 0; r < rows; ++r)
                    for (long j = 0; j < dim; ++j) x(r, j) += static_cast<T>(extra * rngs[r].normal());
            }
        }

        Mat<T> den = denoiser(x, s_hat);
        Mat<T> d = (x - den) / static_cast<T>(s_hat);
        Mat<T> x_next = x + static_cast<T>(s_next - s_hat) * d;
        if (cfg.order == 2 && i < n - 1) {
            Mat<T> den2 = denoiser(x_next, s_next);
            Mat<T> d2 = (x_next - den2) / static_cast<T>(s_next);
            x_next = x + static_cast<T>(0.5 * (s_next - s_hat)) * (d + d2);
        }
        if (!all_finite(x_next)) throw NumericalError("ode_sample: non-finite state", i);
        x = std::move(x_next);
    }
    return x;
}

/// Single-chain convenience: uses cfg.seed as the row seed.
template <class T, class D>
    requires Denoiser<D, T>
Mat<T> ode_sample(D&& denoiser, const SamplerConfig& cfg, long dim, const Mat<T>* x_init = nullptr) {
    const std::uint64_t seed = cfg.seed;
    return ode_sample<T>(std::forward<D>(denoiser), cfg, dim, std::span<const std::uint64_t>(&seed, 1), x_init);
}

/// Monte-Carlo estimate of E[lambda(sigma) ||D(x + eps, sigma) - x||^2] with one (sigma, eps)
/// draw per element. Element i's draws come from Rng(derive_seed(seed, ids[i])), so the
/// estimate is invariant under permutations of (rows, ids).
/// `denoise(noisy_row, sigma, i)` returns the denoised 1 x d row for batch element i.
template <class T, class F, class W>
double denoising_loss(F&& denoise, const Mat<T>& batch, std::span<const std::uint64_t> ids,
                      const SigmaSampler& sampler, W&& weighting, std::uint64_t seed) {
    require(batch.rows() > 0, "denoising_loss: empty batch");
    require(static_cast<long>(ids.size()) == batch.rows(), "denoising_loss: ids must match batch rows");
    double total = 0.0;
    for (long i = 0; i < batch.rows(); ++i) {
        Rng rng(derive_seed(seed, ids[i]));
        const double sigma = sample_sigma(sampler, rng);
        Mat<T> clean = batch.row(i);
        Mat<T> noisy = add_noise(clean, sigma, rng);
        Mat<T> den = denoise(noisy, sigma, i);
        require_same_shape(den, 1, batch.cols(), "denoising_loss: denoiser output");
        total += weighting(sigma) * (den - clean).template cast<double>().squaredNorm();
    }
    return total / static_cast<double>(batch.rows());
}

template <class T, class F, class W>
double denoising_loss(F&& denoise, const Mat<T>& batch, const SigmaSampler& sampler, W&& weighting,
                      std::uint64_t seed) {
    std::vector<std::uint64_t> ids(batch.rows());
    std::iota(ids.begin(), ids.end(), std::uint64_t{0});
    return denoising_loss<T>(std::forward<F>(denoise), batch, std::span<const std::uint64_t>(ids), sampler,
                             std::forward<W>(weighting), seed);
}

}  // namespace dde
