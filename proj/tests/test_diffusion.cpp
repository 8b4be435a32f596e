#include "dde/diffusion.hpp"
#include "dde/gaussian_oracle.hpp"
#include "dde/params.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

namespace {

using dde::MatD;

dde::GaussianData make_gaussian(long dim, std::uint64_t seed, double min_var = 0.5) {
    dde::Rng rng(seed);
    dde::VecD mean(dim), var(dim);
    for (long i = 0; i < dim; ++i) {
        mean[i] = rng.uniform(-1.0, 1.0);
        var[i] = rng.uniform(min_var, 2.0);
    }
    return {mean, var};
}

TEST(AddNoise, ZeroSigmaIsIdentity) {
    dde::Rng rng(1);
    MatD x = rng.normal_matrix<double>(3, 7);
    dde::Rng rng2(2);
    EXPECT_EQ(dde::add_noise(x, 0.0, rng2), x);
}

TEST(AddNoise, EmpiricalStdMatchesSigma) {
    dde::Rng rng(3);
    MatD zeros = MatD::Zero(1, 10000);
    MatD noisy = dde::add_noise(zeros, 2.0, rng);
    const double std = std::sqrt(noisy.array().square().mean());
    EXPECT_GE(std, 1.9);
    EXPECT_LE(std, 2.1);
}

TEST(AddNoise, DeterministicGivenSeed) {
    MatD x = MatD::Ones(2, 50);
    dde::Rng a(42), b(42);
    MatD ya = dde::add_noise(x, 0.7, a);
    MatD yb = dde::add_noise(x, 0.7, b);
    EXPECT_EQ(0, std::memcmp(ya.data(), yb.data(), sizeof(double) * ya.size()));
}

TEST(AddNoise, RejectsNonFiniteInput) {
    MatD x = MatD::Zero(1, 3);
    x(0, 1) = std::numeric_limits<double>::quiet_NaN();
    dde::Rng rng(0);
    EXPECT_THROW(dde::add_noise(x, 1.0, rng), std::invalid_argument);
}

TEST(Score, FixedPointAndScalar) {
    MatD x = MatD::Constant(2, 2, 0.3);
    EXPECT_TRUE(dde::denoiser_to_score(x, x, 0.8).isZero());
    MatD d = MatD::Constant(1, 1, 1.0), xs = MatD::Constant(1, 1, 2.0);
    EXPECT_DOUBLE_EQ(dde::denoiser_to_score(d, xs, 1.0)(0, 0), -1.0);
    EXPECT_DOUBLE_EQ(dde::score_to_denoiser(MatD(MatD::Constant(1, 1, -1.0)), xs, 1.0)(0, 0), 1.0);
    EXPECT_EQ(dde::score_to_denoiser(MatD(MatD::Zero(1, 1)), xs, 3.0), xs);
}

TEST(Score, ZeroSigmaRejected) {
    MatD x = MatD::Ones(1, 2);
    EXPECT_THROW(dde::denoiser_to_score(x, x, 0.0), std::invalid_argument);
    EXPECT_THROW(dde::denoiser_to_score(x, MatD(MatD::Ones(1, 3)), 1.0), std::invalid_argument);
}

TEST(Score, RoundTripIsIdentity) {
    dde::Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        MatD d = rng.normal_matrix<double>(4, 16), x = rng.normal_matrix<double>(4, 16, 3.0);
        const double sigma = std::exp(rng.uniform(-4.0, 4.0));
        MatD back = dde::score_to_denoiser(dde::denoiser_to_score(d, x, sigma), x, sigma);
        EXPECT_LT((back - d).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(SigmaSampler, LogMeanMatches) {
    dde::Rng rng(5);
    dde::SigmaSampler s{-1.0, 1.6};
    double acc = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) acc += std::log(dde::sample_sigma(s, rng));
    EXPECT_GE(acc / n, -1.02);
    EXPECT_LE(acc / n, -0.98);
}

TEST(SigmaSampler, DegenerateAndSignalConfig) {
    dde::Rng rng(6);
    for (int i = 0; i < 10; ++i) EXPECT_DOUBLE_EQ(dde::sample_sigma({-1.0, 0.0}, rng), std::exp(-1.0));
    dde::SigmaSampler signal{-3.0, 1.0};
    for (int i = 0; i < 100; ++i) EXPECT_GT(dde::sample_sigma(signal, rng), 0.0);
}

TEST(Karras, EndpointsAndMonotone) {
    auto two = dde::karras_sigmas({1e-4, 80.0, 7.0, 2});
    ASSERT_EQ(two.size(), 2u);
    EXPECT_EQ(two[0], 80.0);
    EXPECT_EQ(two[1], 1e-4);

    auto s = dde::karras_sigmas({1e-4, 80.0, 7.0, 100});
    ASSERT_EQ(s.size(), 100u);
    for (std::size_t i = 1; i < s.size(); ++i) EXPECT_LT(s[i] - s[i - 1], 0.0);
    EXPECT_EQ(s.front(), 80.0);
    EXPECT_EQ(s.back(), 1e-4);
}

TEST(Karras, MiddleValueMatchesIndependentEvaluation) {
    // ((80^(1/7) + (1e-4)^(1/7)) / 2)^7, evaluated at 40 digits.
    auto s = dde::karras_sigmas({1e-4, 80.0, 7.0, 3});
    EXPECT_NEAR(s[1], 1.597353508620684060675, 1e-12);
}

TEST(Karras, InvalidConfigRejected) {
    EXPECT_THROW(dde::karras_sigmas({1e-4, 80.0, 7.0, 1}), std::invalid_argument);
    EXPECT_THROW(dde::karras_sigmas({1.0, 0.5, 7.0, 10}), std::invalid_argument);
}

TEST(OdeSample, PointMassConvergesToMean) {
    const long dim = 5;
    MatD mu = MatD::Constant(1, dim, 0.25);
    auto constant = [&](const MatD& x, double) -> MatD { return mu.replicate(x.rows(), 1); };
    dde::SamplerConfig cfg;
    cfg.schedule = {1e-4, 80.0, 7.0, 30};
    cfg.order = 2;
    dde::Rng rng(1);
    MatD init = rng.normal_matrix<double>(1, dim, 80.0);
    MatD out = dde::ode_sample<double>(constant, cfg, dim, &init);
    const double bound = 1e-4 * init.norm() / 80.0 + 1e-12;
    EXPECT_LE((out - mu).norm(), bound);
}

TEST(OdeSample, HeunMatchesGaussianFlow) {
    auto data = make_gaussian(8, 3, 1.0);
    auto oracle = dde::gaussian_optimal_denoiser(data);
    dde::SamplerConfig cfg;
    cfg.schedule = {1e-4, 80.0, 7.0, 150};
    cfg.order = 2;
    dde::Rng rng(4);
    for (int t = 0; t < 10; ++t) {
        MatD init = rng.normal_matrix<double>(1, 8, 80.0);
        MatD out = dde::ode_sample<double>(oracle, cfg, 8, &init);
        MatD truth = dde::gaussian_flow_endpoint(data, init, 80.0, 1e-4);
        EXPECT_LT((out - truth).norm() / truth.norm(), 1e-3);
    }
}

TEST(OdeSample, HeunIsSecondOrder) {
    auto data = make_gaussian(8, 5);
    auto oracle = dde::gaussian_optimal_denoiser(data);
    dde::Rng rng(8);
    MatD init = rng.normal_matrix<double>(1, 8, 80.0);
    MatD truth = dde::gaussian_flow_endpoint(data, init, 80.0, 0.0);
    auto err = [&](int steps) {
        dde::SamplerConfig cfg;
        cfg.schedule = {1e-4, 80.0, 7.0, steps};
        return (dde::ode_sample<double>(oracle, cfg, 8, &init) - truth).norm();
    };
    EXPECT_GE(err(20) / err(40), 3.5);
}

TEST(OdeSample, SignalTaskConfigWithChurnIsDeterministic) {
    auto data = make_gaussian(6, 9);
    auto oracle = dde::gaussian_optimal_denoiser(data);
    dde::SamplerConfig cfg;
    cfg.schedule = {1e-4, 20.0, 7.0, 150};
    cfg.s_churn = 20.0;
    cfg.seed = 77;
    MatD a = dde::ode_sample<double>(oracle, cfg, 6);
    MatD b = dde::ode_sample<double>(oracle, cfg, 6);
    EXPECT_TRUE(a.allFinite());
    EXPECT_EQ(0, std::memcmp(a.data(), b.data(), sizeof(double) * a.size()));
}

TEST(OdeSample, RowsIndependentOfBatching) {
    auto data = make_gaussian(4, 10);
    auto oracle = dde::gaussian_optimal_denoiser(data);
    dde::SamplerConfig cfg;
    cfg.schedule = {1e-3, 10.0, 7.0, 12};
    cfg.s_churn = 5.0;
    std::vector<std::uint64_t> seeds{3, 9, 27};
    MatD batch = dde::ode_sample<double>(oracle, cfg, 4, seeds);
    for (std::size_t r = 0; r < seeds.size(); ++r) {
        cfg.seed = seeds[r];
        MatD single = dde::ode_sample<double>(oracle, cfg, 4);
        EXPECT_EQ(single.row(0), batch.row(static_cast<long>(r)));
    }
}

TEST(OdeSample, NonFiniteReportsStep) {
    int calls = 0;
    auto bad = [&](const MatD& x, double) -> MatD {
        ++calls;
        if (calls >= 4) return MatD::Constant(x.rows(), x.cols(), std::numeric_limits<double>::infinity());
        return x;
    };
    dde::SamplerConfig cfg;
    cfg.schedule = {1e-3, 10.0, 7.0, 10};
    cfg.order = 1;
    try {
        dde::ode_sample<double>(bad, cfg, 3);
        FAIL() << "expected NumericalError";
    } catch (const dde::NumericalError& e) {
        EXPECT_EQ(e.index(), 3);
    }
}

TEST(DenoisingLoss, PointMassExactRecovery) {
    MatD batch = MatD::Constant(20, 3, 1.5);
    auto exact = [](const MatD& noisy, double, long) -> MatD { return MatD::Constant(1, noisy.cols(), 1.5); };
    EXPECT_EQ(dde::denoising_loss<double>(exact, batch, dde::SigmaSampler{}, dde::EdmWeighting{}, 1), 0.0);
}

TEST(DenoisingLoss, IdentityDenoiserGivesSigmaSquaredTimesDim) {
    const long d = 8;
    const double sigma = 0.7;
    MatD batch = MatD::Zero(20000, d);
    auto identity = [](const MatD& noisy, double, long) -> MatD { return noisy; };
    const double loss =
        dde::denoising_loss<double>(identity, batch, dde::SigmaSampler{std::log(sigma), 0.0}, dde::UnitWeighting{}, 2);
    EXPECT_NEAR(loss / (sigma * sigma * d), 1.0, 0.05);
}

TEST(DenoisingLoss, OptimalBeatsPerturbedOnPairedDraws) {
    auto data = make_gaussian(4, 12);
    auto oracle = dde::gaussian_optimal_denoiser(data);
    dde::Rng rng(13);
    MatD batch = data.sample(2000, rng);
    dde::SigmaSampler s{0.0, 1.0};
    auto opt = [&](const MatD& x, double sigma, long) -> MatD { return oracle(x, sigma); };
    const double base = dde::denoising_loss<double>(opt, batch, s, dde::EdmWeighting{}, 99);
    for (double eps : {0.05, -0.05, 0.2}) {
        auto pert = [&](const MatD& x, double sigma, long) -> MatD { return MatD(oracle(x, sigma).array() * (1 + eps)); };
        EXPECT_LT(base, dde::denoising_loss<double>(pert, batch, s, dde::EdmWeighting{}, 99));
    }
}

TEST(DenoisingLoss, EmptyBatchRejected) {
    auto identity = [](const MatD& noisy, double, long) -> MatD { return noisy; };
    EXPECT_THROW(dde::denoising_loss<double>(identity, MatD(0, 3), dde::SigmaSampler{}, dde::UnitWeighting{}, 0),
                 std::invalid_argument);
}

TEST(DenoisingLoss, InvariantUnderKeyedPermutation) {
    dde::Rng rng(21);
    MatD batch = rng.normal_matrix<double>(16, 5);
    std::vector<std::uint64_t> ids(16);
    for (int i = 0; i < 16; ++i) ids[i] = 100 + i;
    auto shrink = [](const MatD& x, double sigma, long) -> MatD { return x / (1.0 + sigma * sigma); };
    const double a = dde::denoising_loss<double>(shrink, batch, ids, dde::SigmaSampler{}, dde::EdmWeighting{}, 4);
    std::vector<int> perm{3, 0, 15, 7, 1, 2, 14, 13, 4, 5, 6, 8, 9, 10, 11, 12};
    MatD pb(16, 5);
    std::vector<std::uint64_t> pid(16);
    for (int i = 0; i < 16; ++i) {
        pb.row(i) = batch.row(perm[i]);
        pid[i] = ids[perm[i]];
    }
    const double b = dde::denoising_loss<double>(shrink, pb, pid, dde::SigmaSampler{}, dde::EdmWeighting{}, 4);
    EXPECT_NEAR(a, b, 1e-12 * std::abs(a));
}

TEST(EdmWeighting, Positive) {
    dde::EdmWeighting w{0.5};
    for (double s : {1e-4, 0.1, 1.0, 80.0}) EXPECT_GT(w(s), 0.0);
    EXPECT_DOUBLE_EQ(w(1.0), (1.0 + 0.25) / 0.25);
}

dde::ParamSet<double> small_params(double fill) {
    dde::ParamSet<double> p;
    p.add("a", MatD::Constant(2, 3, fill));
    p.add("b", MatD::Constant(1, 4, -fill));
    return p;
}

TEST(Ema, DecayEdgeCases) {
    auto ema = small_params(1.0), params = small_params(3.0);
    auto copy = dde::ema_update(ema, params, 0.0);
    EXPECT_EQ(copy["a"].value, params["a"].value);
    auto same = dde::ema_update(ema, params, 1.0);
    EXPECT_EQ(same["b"].value, ema["b"].value);
}

TEST(Ema, GeometricConvergence) {
    auto ema = small_params(1.0), params = small_params(3.0);
    const double d0 = (ema["a"].value - params["a"].value).norm();
    const double decay = 0.9;
    for (int k = 1; k <= 20; ++k) {
        ema = dde::ema_update(ema, params, decay);
        EXPECT_NEAR((ema["a"].value - params["a"].value).norm(), std::pow(decay, k) * d0, 1e-12);
    }
}

TEST(Ema, StructureMismatchRejected) {
    auto a = small_params(1.0);
    dde::ParamSet<double> b;
    b.add("a", MatD::Zero(2, 3));
    EXPECT_THROW(dde::ema_update(a, b, 0.5), std::invalid_argument);
}

}  // namespace
