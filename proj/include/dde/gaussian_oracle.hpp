#pragma once

// Closed-form diffusion quantities for diagonal Gaussian data.

#include "dde/random.hpp"
#include "dde/tensor.hpp"

#include <cmath>

namespace dde {

struct GaussianData {
    VecD mean;
    VecD variances;

    GaussianData(VecD m, VecD v) : mean(std::move(m)), variances(std::move(v)) {
        require(mean.size() == variances.size(), "GaussianData: mean and variances differ in length");
        require((variances.array() > 0.0).all(), "GaussianData: variances must be positive");
    }

    long dim() const { return mean.size(); }

    template <class T = double>
    Mat<T> sample(long n, Rng& rng) const {
        Mat<T> out(n, dim());
        for (long r = 0; r < n; ++r)
            for (long j = 0; j < dim(); ++j)
                out(r, j) = static_cast<T>(mean[j] + std::sqrt(variances[j]) * rng.normal());
        return out;
    }
};

/// N(mu, Sigma + sigma^2 I).
inline GaussianData gaussian_marginal(const GaussianData& data, double sigma) {
    return GaussianData(data.mean, (data.variances.array() + sigma * sigma).matrix());
}

/// Posterior mean E[x0 | x]: D_i(x) = x_i - sigma^2 / (Sigma_ii + sigma^2) * (x_i - mu_i).
struct GaussianOptimalDenoiser {
    GaussianData data;

    template <class T>
    Mat<T> operator()(const Mat<T>& x, double sigma) const {
        require(x.cols() == data.dim(), "GaussianOptimalDenoiser: dimension mismatch");
        Mat<T> out(x.rows(), x.cols());
        const double s2 = sigma * sigma;
        for (long j = 0; j < x.cols(); ++j) {
            const double shrink = s2 / (data.variances[j] + s2);
            for (long r = 0; r < x.rows(); ++r)
                out(r, j) = static_cast<T>(x(r, j) - shrink * (x(r, j) - data.mean[j]));
        }
        return out;
    }

    /// Coefficients of the affine map D_i(x) = slope_i * x_i + intercept_i at `sigma`.
    VecD slope(double sigma) const {
        return (data.variances.array() / (data.variances.array() + sigma * sigma)).matrix();
    }
    VecD intercept(double sigma) const {
        return (sigma * sigma * data.mean.array() / (data.variances.array() + sigma * sigma)).matrix();
    }
};

inline GaussianOptimalDenoiser gaussian_optimal_denoiser(const GaussianData& data) { return {data}; }

/// Exact probability-flow solution from sigma_max to sigma_min under the optimal score:
/// mu_i + (x_i - mu_i) * sqrt((Sigma_ii + sigma_min^2) / (Sigma_ii + sigma_max^2)).
template <class T>
Mat<T> gaussian_flow_endpoint(const GaussianData& data, const Mat<T>& x_at_sigma_max, double sigma_max,
                              double sigma_min) {
    require(sigma_min <= sigma_max, "gaussian_flow_endpoint: sigma_min must not exceed sigma_max");
    require(x_at_sigma_max.cols() == data.dim(), "gaussian_flow_endpoint: dimension mismatch");
    Mat<T> out(x_at_sigma_max.rows(), x_at_sigma_max.cols());
    for (long j = 0; j < data.dim(); ++j) {
        const double v = data.variances[j];
        const double ratio = std::sqrt((v + sigma_min * sigma_min) / (v + sigma_max * sigma_max));
        for (long r = 0; r < out.rows(); ++r)
            out(r, j) = static_cast<T>(data.mean[j] + (x_at_sigma_max(r, j) - data.mean[j]) * ratio);
    }
    return out;
}

}  // namespace dde
