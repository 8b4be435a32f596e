#pragma once

// Evaluation: analytic presence oracle for the bump task, conditioning sampling, Frechet
// distance between Gaussian fits of projected features, and the seam-to-interior ratio.

#include "dde/datasets.hpp"
#include "dde/gaussian_oracle.hpp"
#include "dde/random.hpp"
#include "dde/tensor.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

namespace dde {

struct ConstraintOracle {
    double radius = 1.0;  // pixels
    double tau = 0.5;

    void validate() const {
        require(radius >= 1.0, "ConstraintOracle: radius must be at least 1 pixel");
        require(tau > 0.0 && tau < 1.0, "ConstraintOracle: tau must lie in (0, 1)");
    }
};

/// True iff some pixel within `radius` of the pixel nearest to c exceeds tau.
/// `image` is one flattened (height x width) row.
template <class Row>
bool constraint_satisfied(const Row& image, long height, long width, Position c, const ConstraintOracle& o) {
    o.validate();
    const long r0 = nearest_index(c.y, height), c0 = nearest_index(c.x, width);
    const long R = static_cast<long>(std::floor(o.radius));
    for (long dr = -R; dr <= R; ++dr)
        for (long dc = -R; dc <= R; ++dc) {
            if (static_cast<double>(dr * dr + dc * dc) > o.radius * o.radius) continue;
            const long r = r0 + dr, cc = c0 + dc;
            if (r < 0 || r >= height || cc < 0 || cc >= width) continue;
            if (static_cast<double>(image(r * width + cc)) > o.tau) return true;
        }
    return false;
}

/// Fraction of images for which every one of their conditionings is satisfied.
template <class T>
double accuracy_eval(const Mat<T>& images, long height, long width, const std::vector<std::vector<Position>>& conds,
                     const ConstraintOracle& o) {
    require(images.rows() >= 1, "accuracy_eval: no samples");
    require(static_cast<long>(conds.size()) == images.rows(), "accuracy_eval: conditioning sets != samples");
    require(images.cols() == height * width, "accuracy_eval: image size mismatch");
    long ok = 0;
    for (long i = 0; i < images.rows(); ++i) {
        const auto row = images.row(i);
        bool all = true;
        for (const auto& c : conds[i]) all = all && constraint_satisfied(row, height, width, c, o);
        ok += all;
    }
    return static_cast<double>(ok) / static_cast<double>(images.rows());
}

struct ConditioningSampler {
    double lo = 0.3;
    double hi = 0.7;
    double min_distance = 0.15;
    bool squared = false;  // compare squared distance with min_distance instead
    long max_attempts = 1000000;
};

inline bool far_enough(Position a, Position b, const ConditioningSampler& s) {
    const double d2 = (a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y);
    return s.squared ? d2 >= s.min_distance : std::sqrt(d2) >= s.min_distance;
}

/// L positions uniform in [lo, hi]^2, redrawn as a whole until all pairs are far enough.
inline std::vector<Position> sample_conditionings(long L, Rng& rng, const ConditioningSampler& s = {}) {
    require(L >= 1, "sample_conditionings: L must be positive");
    require(s.hi > s.lo, "sample_conditionings: empty box");
    std::vector<Position> out(L);
    for (long attempt = 0; attempt < s.max_attempts; ++attempt) {
        for (auto& p : out) {
            p.x = rng.uniform(s.lo, s.hi);
            p.y = rng.uniform(s.lo, s.hi);
        }
        bool ok = true;
        for (long i = 0; i < L && ok; ++i)
            for (long j = i + 1; j < L && ok; ++j) ok = far_enough(out[i], out[j], s);
        if (ok) return out;
    }
    throw std::invalid_argument("sample_conditionings: no valid set of " + std::to_string(L) + " positions after " +
                                std::to_string(s.max_attempts) + " attempts");
}

/// Fixed random projection with orthonormal rows.
class FeatureProjector {
public:
    FeatureProjector(long input_dim, std::uint64_t seed, long feature_dim = 64) {
        require(input_dim >= feature_dim && feature_dim >= 1, "FeatureProjector: input_dim must be >= feature_dim");
        Rng rng(seed);
        MatD g = rng.normal_matrix<double>(input_dim, feature_dim, 1.0);
        Eigen::HouseholderQR<MatD> qr(g);
        MatD q = qr.householderQ() * MatD::Identity(input_dim, feature_dim);
        proj_ = q.transpose();
    }
    long feature_dim() const { return proj_.rows(); }
    long input_dim() const { return proj_.cols(); }
    const MatD& matrix() const { return proj_; }
    template <class T>
    MatD project(const Mat<T>& x) const {
        require(x.cols() == input_dim(), "FeatureProjector: input width mismatch");
        return x.template cast<double>() * proj_.transpose();
    }

private:
    MatD proj_;
};

struct FrechetResult {
    double distance = 0.0;
    bool regularized = false;
    double epsilon = 0.0;
};

namespace detail {
inline MatD psd_sqrt(const MatD& m) {
    Eigen::SelfAdjointEigenSolver<MatD> es(m);
    VecD ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}
inline bool lex_less(const MatD& a, const MatD& b) {
    return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
}
}  // namespace detail

/// Frechet distance between Gaussians (mean, covariance) fitted to the projected sets.
template <class T>
FrechetResult frechet_feature_distance(const Mat<T>& a, const Mat<T>& b, const FeatureProjector& proj,
                                       double eps = 1e-6) {
    const long f = proj.feature_dim();
    require(a.rows() >= 2 * f && b.rows() >= 2 * f,
            "frechet_feature_distance: each set needs at least " + std::to_string(2 * f) + " samples");
    auto fit = [&](const Mat<T>& x, MatD& mu, MatD& cov) {
        MatD z = proj.project(x);
        mu = z.colwise().mean();
        MatD c = z.rowwise() - mu.row(0);
        cov = (c.transpose() * c) / static_cast<double>(z.rows() - 1);
        cov = 0.5 * (cov + cov.transpose()).eval();
    };
    MatD m1, c1, m2, c2;
    fit(a, m1, c1);
    fit(b, m2, c2);
    // evaluate in a canonical argument order so the result is exactly symmetric
    if (detail::lex_less(m2, m1) || (m1 == m2 && detail::lex_less(c2, c1))) {
        std::swap(m1, m2);
        std::swap(c1, c2);
    }
    FrechetResult r;
    auto min_ev = [](const MatD& c) { return Eigen::SelfAdjointEigenSolver<MatD>(c, Eigen::EigenvaluesOnly).eigenvalues().minCoeff(); };
    if (std::min(min_ev(c1), min_ev(c2)) < eps) {
        c1 += eps * MatD::Identity(f, f);
        c2 += eps * MatD::Identity(f, f);
        r.regularized = true;
        r.epsilon = eps;
    }
    const MatD s1 = detail::psd_sqrt(c1);
    const MatD cross = detail::psd_sqrt(s1 * c2 * s1);
    r.distance = std::max(0.0, (m1 - m2).squaredNorm() + c1.trace() + c2.trace() - 2.0 * cross.trace());
    return r;
}

/// Mean squared second difference at positions straddling multiples of `block`, divided by
/// the mean over all other positions. Signals are rows.
template <class T>
double seam_ratio(const Mat<T>& signals, long block) {
    const long n = signals.cols();
    require(block >= 2 && n >= 2 * block, "seam_ratio: need at least two blocks");
    double seam = 0.0, inner = 0.0;
    long ns = 0, ni = 0;
    for (long r = 0; r < signals.rows(); ++r)
        for (long t = 1; t + 1 < n; ++t) {
            const double d = static_cast<double>(signals(r, t - 1)) - 2.0 * static_cast<double>(signals(r, t)) +
                             static_cast<double>(signals(r, t + 1));
            const bool at_seam = (t % block == 0) || ((t + 1) % block == 0);
            if (at_seam) {
                seam += d * d;
                ++ns;
            } else {
                inner += d * d;
                ++ni;
            }
        }
    require(inner > 0.0, "seam_ratio: signals have no interior curvature");
    return (seam / static_cast<double>(ns)) / (inner / static_cast<double>(ni));
}

struct MomentErrors {
    double max_mean_abs = 0.0;
    double max_var_rel = 0.0;
};

template <class T>
MomentErrors moment_errors(const Mat<T>& samples, const GaussianData& target) {
    require(samples.cols() == target.mean.size() && samples.rows() >= 2, "moment_errors: shape mismatch");
    MomentErrors e;
    for (long j = 0; j < samples.cols(); ++j) {
        const VecD col = samples.col(j).template cast<double>();
        const double m = col.mean();
        const double v = (col.array() - m).square().sum() / static_cast<double>(col.size() - 1);
        e.max_mean_abs = std::max(e.max_mean_abs, std::abs(m - target.mean[j]));
        e.max_var_rel = std::max(e.max_var_rel, std::abs(v / target.variances[j] - 1.0));
    }
    return e;
}

/// One metrics CSV row: method, L, seed, metric, value.
struct MetricRow {
    std::string method;
    long L = 0;
    std::uint64_t seed = 0;
    std::string metric;
    double value = 0.0;
};

inline std::string format_value(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::ostringstream os;
    os << "method,L,seed,metric,value\n";
    for (const auto& r : rows) os << r.method << ',' << r.L << ',' << r.seed << ',' << r.metric << ',' << format_value(r.value) << '\n';
    return os.str();
}

}  // namespace dde
