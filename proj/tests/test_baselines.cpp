#include "dde/baselines.hpp"
#include "dde/gaussian_oracle.hpp"

#include <gtest/gtest.h>

namespace {

using dde::MatD;

// Stand-in whose output depends only on the conditioning: null -> 0, otherwise c.x.
struct ConstantBase {
    MatD operator()(const MatD& x, double, std::span<const dde::Conditioning> conds) const {
        MatD out = MatD::Zero(x.rows(), x.cols());
        for (std::size_t r = 0; r < conds.size(); ++r)
            if (conds[r]) out.row(r).setConstant(conds[r]->x);
        return out;
    }
};

struct AffineBase {
    MatD operator()(const MatD& x, double sigma, std::span<const dde::Conditioning> conds) const {
        MatD out = 0.5 * x;
        out.array() += 1.0 / (1.0 + sigma);
        for (std::size_t r = 0; r < conds.size(); ++r)
            if (conds[r]) out.row(r).array() += conds[r]->x * x.row(r).array() - conds[r]->y;
        return out;
    }
};

dde::Conditioning at(double x, double y = 0.0) { return dde::Position{x, y}; }

TEST(Rrr, ScalarStandIns) {
    ConstantBase base;
    MatD x = MatD::Zero(1, 1);
    std::vector<dde::Conditioning> c{at(1.0), at(2.0)};
    EXPECT_DOUBLE_EQ(dde::rrr_denoise(base, x, c, 2, 1.0, 4.0)(0, 0), 12.0);
}

TEST(Rrr, AlgebraicIdentities) {
    AffineBase base;
    dde::Rng rng(1);
    MatD x = rng.normal_matrix<double>(3, 5, 1.0);
    std::vector<dde::Conditioning> one{at(0.3, 0.1), at(0.7, 0.2), at(0.5, 0.9)};
    MatD direct = base(x, 0.8, one);
    EXPECT_LT((dde::rrr_denoise(base, x, one, 1, 0.8, 1.0) - direct).cwiseAbs().maxCoeff(), 1e-10);

    std::vector<dde::Conditioning> two;
    for (int r = 0; r < 3; ++r) {
        two.push_back(at(rng.uniform(), rng.uniform()));
        two.push_back(at(rng.uniform(), rng.uniform()));
    }
    MatD uncond = base(x, 0.8, std::vector<dde::Conditioning>(3));
    EXPECT_LT((dde::rrr_denoise(base, x, two, 2, 0.8, 0.0) - uncond).cwiseAbs().maxCoeff(), 1e-10);

    for (long L : {2, 3, 5}) {
        std::vector<dde::Conditioning> same;
        for (int r = 0; r < 3; ++r)
            for (long i = 0; i < L; ++i) same.push_back(one[r]);
        MatD a = dde::rrr_denoise(base, x, same, L, 0.8, 4.0);
        MatD b = dde::rrr_denoise(base, x, one, 1, 0.8, 4.0 * L);
        EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(Rrr, PermutationInvariant) {
    AffineBase base;
    dde::Rng rng(2);
    MatD x = rng.normal_matrix<double>(1, 4, 1.0);
    std::vector<dde::Conditioning> c{at(0.1, 0.2), at(0.5, 0.6), at(0.9, 0.3)};
    MatD a = dde::rrr_denoise(base, x, c, 3, 2.0, 4.0);
    std::swap(c[0], c[2]);
    std::swap(c[1], c[2]);
    EXPECT_LT((dde::rrr_denoise(base, x, c, 3, 2.0, 4.0) - a).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_THROW(dde::rrr_denoise(base, x, c, 2, 2.0, 4.0), std::invalid_argument);
}

TEST(MultiDiffusion, SinglePatchIsBase) {
    AffineBase base;
    dde::Rng rng(3);
    MatD x = rng.normal_matrix<double>(2, 6, 1.0);
    auto layout = dde::PatchLayout::from(dde::PatchGrid1D::from_count(6, 6, 1));
    EXPECT_EQ(dde::multidiffusion_denoise(base, x, {}, 0.4, layout), base(x, 0.4, {}));
}

TEST(MultiDiffusion, AveragingDenoisersEqualsAveragingScores) {
    AffineBase base;
    dde::Rng rng(4);
    auto layout = dde::PatchLayout::from(dde::PatchGrid1D::from_count(6, 4, 4));
    MatD x = rng.normal_matrix<double>(2, layout.object_size(), 3.0);
    const double sigma = 1.7;
    MatD via_denoiser = dde::multidiffusion_denoise(base, x, {}, sigma, layout);
    auto d = dde::decompose(x, layout);
    MatD scores = dde::denoiser_to_score(MatD(base(d.patches, sigma, {})), d.patches, sigma);
    MatD mean_score = dde::recompose_average(scores, layout, 2);
    MatD via_score = dde::score_to_denoiser(mean_score, x, sigma);
    EXPECT_LT((via_denoiser - via_score).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(MultiDiffusion, LinearInBaseOutputs) {
    dde::Rng rng(5);
    auto layout = dde::PatchLayout::from(dde::PatchGrid2D::square(4, 2, 3));
    MatD x = rng.normal_matrix<double>(2, layout.object_size(), 1.0);
    MatD pa = rng.normal_matrix<double>(2 * layout.count(), 16, 1.0);
    MatD pb = rng.normal_matrix<double>(2 * layout.count(), 16, 1.0);
    auto fixed = [](const MatD& v) { return [v](const MatD&, double, std::span<const dde::Conditioning>) { return v; }; };
    MatD combo = dde::multidiffusion_denoise(fixed(MatD(2.0 * pa - 3.0 * pb)), x, {}, 1.0, layout);
    MatD sep = 2.0 * dde::multidiffusion_denoise(fixed(pa), x, {}, 1.0, layout) -
               3.0 * dde::multidiffusion_denoise(fixed(pb), x, {}, 1.0, layout);
    EXPECT_LT((combo - sep).cwiseAbs().maxCoeff(), 1e-12);
}

struct GaussianBase {
    dde::GaussianOptimalDenoiser d;
    MatD operator()(const MatD& x, double s, std::span<const dde::Conditioning>) const { return d(x, s); }
};

TEST(Concat, RejectsOverlapAndMatchesBaseForOnePatch) {
    GaussianBase base{dde::GaussianData(dde::VecD::Constant(4, 0.3), dde::VecD::Constant(4, 0.8))};
    dde::SamplerConfig sc;
    sc.schedule.n_steps = 20;
    std::vector<std::uint64_t> seeds{11, 12};
    EXPECT_THROW(dde::concat_sample<double>(base, {}, sc, dde::PatchLayout::from(dde::PatchGrid1D::from_count(4, 2, 3)), seeds),
                 std::invalid_argument);
    MatD one = dde::concat_sample<double>(base, {}, sc, dde::PatchLayout::from(dde::PatchGrid1D::from_count(4, 4, 1)), seeds);
    EXPECT_EQ(one, dde::ode_sample<double>(base.d, sc, 4, seeds));
}

TEST(Concat, PatchesIndependentWithBaseMarginals) {
    const dde::GaussianData g(dde::VecD::LinSpaced(3, -0.5, 0.5), dde::VecD::LinSpaced(3, 0.5, 1.5));
    GaussianBase base{g};
    dde::SamplerConfig sc;
    sc.schedule.n_steps = 40;
    auto layout = dde::PatchLayout::from(dde::PatchGrid1D::from_count(3, 3, 2));
    const long n = 4000;
    MatD s = dde::concat_sample<double>(base, {}, sc, layout, dde::row_seeds(77, n));
    for (long j = 0; j < 6; ++j) {
        const double m = s.col(j).mean();
        const double v = (s.col(j).array() - m).square().sum() / (n - 1);
        EXPECT_NEAR(m, g.mean[j % 3], 0.06);
        EXPECT_NEAR(v / g.variances[j % 3], 1.0, 0.1);
    }
    // cross-patch correlation of matching coordinates ~ 0
    for (long j = 0; j < 3; ++j) {
        const auto a = s.col(j).array() - s.col(j).mean(), b = s.col(3 + j).array() - s.col(3 + j).mean();
        const double corr = (a * b).sum() / std::sqrt(a.square().sum() * b.square().sum());
        EXPECT_LT(std::abs(corr), 4.0 / std::sqrt(static_cast<double>(n)));
    }
}

}  // namespace
