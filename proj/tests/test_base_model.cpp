#include "dde/base_model.hpp"
#include "dde/gaussian_oracle.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

namespace {

using dde::MatD;
using dde::VecD;

dde::BaseModelConfig tiny(bool conditional = true) {
    dde::BaseModelConfig c;
    c.dim = 6;
    c.hidden = 8;
    c.blocks = 1;
    c.time_freqs = 3;
    c.cond_freqs = 2;
    c.conditional = conditional;
    c.sigma_data = 0.5;
    return c;
}

void randomize(dde::ParamSet<double>& p, std::uint64_t seed, double scale) {
    dde::Rng rng(seed);
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p.at(i).trainable) p.at(i).value += rng.normal_matrix<double>(p.at(i).value.rows(), p.at(i).value.cols(), scale);
}

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("dde_test_" + name);
}

TEST(Preconditioning, CoefficientsAtUnitSigma) {
    const auto c = dde::edm_coefficients(1.0, 0.5);
    EXPECT_NEAR(c.c_skip, 0.2, 1e-15);
    EXPECT_NEAR(c.c_out, 0.4472135954999579, 1e-15);
    EXPECT_NEAR(c.c_in, 0.8944271909999159, 1e-15);
    EXPECT_EQ(c.c_noise, 0.0);
    EXPECT_THROW(dde::edm_coefficients(0.0, 0.5), std::invalid_argument);
    EXPECT_THROW(dde::edm_coefficients(1.0, 0.0), std::invalid_argument);
}

TEST(Preconditioning, LimitsOfSkipAndOutput) {
    // small sigma: the input passes through; large sigma: the network output dominates
    const auto lo = dde::edm_coefficients(1e-4, 1.0), hi = dde::edm_coefficients(1e4, 1.0);
    EXPECT_NEAR(lo.c_skip, 1.0, 1e-7);
    EXPECT_NEAR(lo.c_out, 1e-4, 1e-10);
    EXPECT_NEAR(hi.c_skip, 0.0, 1e-7);
    EXPECT_NEAR(hi.c_out, 1.0, 1e-7);
    // c_out^2 = c_skip sigma^2
    for (double s : {0.01, 0.3, 1.0, 7.0, 80.0}) {
        const auto c = dde::edm_coefficients(s, 0.7);
        EXPECT_NEAR(c.c_out * c.c_out, c.c_skip * s * s, 1e-12 * (1 + s * s));
    }
}

TEST(BaseDenoiser, UntrainedOutputIsSkipScaledInput) {
    auto m = dde::BaseDenoiser<double>::init(tiny(), 1);
    dde::Rng rng(2);
    MatD x = rng.normal_matrix<double>(5, 6, 2.0);
    for (double s : {0.1, 1.0, 10.0}) {
        const double skip = dde::edm_coefficients(s, 0.5).c_skip;
        std::vector<dde::Conditioning> conds(5, dde::Position{0.3, 0.6});
        EXPECT_LT((m(x, s, conds) - skip * x).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT((m(x, s) - skip * x).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(BaseDenoiser, ShapeContract) {
    auto m = dde::BaseDenoiser<double>::init(tiny(), 1);
    EXPECT_EQ(m(MatD::Zero(3, 6), 1.0).rows(), 3);
    EXPECT_THROW(m(MatD::Zero(3, 5), 1.0), std::invalid_argument);
    std::vector<dde::Conditioning> two(2);
    EXPECT_THROW(m(MatD::Zero(3, 6), 1.0, two), std::invalid_argument);
    EXPECT_THROW(m(MatD::Zero(3, 6), 0.0), std::invalid_argument);
}

TEST(BaseDenoiser, NullAndPresentConditioningDifferOnceTrained) {
    auto m = dde::BaseDenoiser<double>::init(tiny(), 3);
    randomize(m.params(), 4, 0.3);
    dde::Rng rng(5);
    MatD x = rng.normal_matrix<double>(2, 6, 1.0);
    std::vector<dde::Conditioning> present(2, dde::Position{0.4, 0.4}), null(2);
    EXPECT_GT((m(x, 1.0, present) - m(x, 1.0, null)).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_EQ(m(x, 1.0, null), m(x, 1.0));
}

TEST(BaseDenoiser, LossGradientMatchesFiniteDifferences) {
    auto m = dde::BaseDenoiser<double>::init(tiny(), 6);
    randomize(m.params(), 7, 0.3);
    dde::Rng rng(8);
    MatD clean = rng.normal_matrix<double>(4, 6, 0.5);
    VecD sig(4);
    sig << 0.05, 0.4, 1.3, 9.0;
    MatD noisy = clean + sig.asDiagonal() * rng.normal_matrix<double>(4, 6, 1.0);
    VecD w(4);
    for (long i = 0; i < 4; ++i) w[i] = dde::EdmWeighting{0.5}(sig[i]);
    std::vector<dde::Conditioning> conds{dde::Position{0.1, 0.9}, std::nullopt, dde::Position{0.5, 0.5},
                                         dde::Position{0.8, 0.2}};
    auto loss_on = [&](dde::ad::Tape<double>& tape) {
        return dde::ad::weighted_sq_error(m.forward(tape, noisy, sig, conds), clean, w);
    };
    m.params().zero_grad();
    {
        dde::ad::Tape<double> tape;
        tape.backward(loss_on(tape));
    }
    std::vector<std::pair<std::size_t, long>> slots;
    for (std::size_t i = 0; i < m.params().size(); ++i)
        if (m.params().at(i).trainable)
            for (long j = 0; j < m.params().at(i).value.size(); ++j) slots.emplace_back(i, j);
    std::shuffle(slots.begin(), slots.end(), rng.engine());
    double worst = 0.0;
    for (int s = 0; s < 10; ++s) {
        auto& p = m.params().at(slots[s].first);
        const long j = slots[s].second;
        const double orig = p.value.data()[j], h = 1e-6;
        auto value = [&] {
            dde::ad::Tape<double> tape(false);
            return loss_on(tape).value()(0, 0);
        };
        p.value.data()[j] = orig + h;
        const double up = value();
        p.value.data()[j] = orig - h;
        const double dn = value();
        p.value.data()[j] = orig;
        const double fd = (up - dn) / (2 * h), an = p.grad.data()[j];
        worst = std::max(worst, std::abs(fd - an) / std::max(std::abs(fd), 1e-3));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(AffineDenoiser, RecoversGaussianOptimalCoefficients) {
    VecD mean(4), var(4);
    mean << -1.0, 0.0, 0.5, 2.0;
    var << 0.25, 1.0, 2.0, 4.0;
    dde::GaussianData data(mean, var);
    dde::Rng rng(9);
    MatD samples = data.sample<double>(100000, rng);
    const double sigma = 1.0;
    dde::AffineDenoiser<double> model{MatD::Identity(4, 4), MatD::Zero(1, 4)};
    dde::TrainConfig cfg;
    cfg.lr = 1e-3;
    cfg.batch_size = 64;
    cfg.epochs = 5;
    cfg.ema_decay = 0.995;
    cfg.seed = 10;
    dde::train_affine_denoiser(model, samples, sigma, cfg);

    const auto oracle = dde::gaussian_optimal_denoiser(data);
    const VecD slope = oracle.slope(sigma), intercept = oracle.intercept(sigma);
    MatD expected_w = slope.asDiagonal();
    EXPECT_LT((model.weight - expected_w).cwiseAbs().maxCoeff(), 1e-2);
    EXPECT_LT((model.bias.row(0).transpose() - intercept).cwiseAbs().maxCoeff(), 1e-2);
}

TEST(AffineDenoiser, RejectsMismatchedModel) {
    dde::AffineDenoiser<double> model{MatD::Identity(3, 3), MatD::Zero(1, 3)};
    EXPECT_THROW(dde::train_affine_denoiser(model, MatD(MatD::Zero(10, 4)), 1.0, dde::TrainConfig{}), std::invalid_argument);
    EXPECT_THROW(dde::train_affine_denoiser(model, MatD(MatD::Zero(10, 3)), 0.0, dde::TrainConfig{}), std::invalid_argument);
}

TEST(TrainBase, FullDropoutLeavesConditioningUnused) {
    auto m = dde::BaseDenoiser<double>::init(tiny(), 11);
    dde::Rng rng(12);
    dde::BaseTrainingSet<double> set{rng.normal_matrix<double>(64, 6, 0.5), {}};
    for (int i = 0; i < 64; ++i) set.conds.emplace_back(dde::Position{rng.uniform(), rng.uniform()});
    dde::TrainConfig cfg;
    cfg.cond_dropout = 1.0;
    cfg.epochs = 3;
    cfg.lr = 1e-2;
    dde::train_base(m, set, cfg);
    MatD x = rng.normal_matrix<double>(3, 6, 1.0);
    std::vector<dde::Conditioning> present(3, dde::Position{0.2, 0.7});
    EXPECT_EQ(m(x, 0.8, present), m(x, 0.8));
    EXPECT_GT((m(x, 0.8) - dde::edm_coefficients(0.8, 0.5).c_skip * x).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(TrainBase, LossDecreasesAndIsDeterministic) {
    // samples concentrated on two points: easy to learn
    MatD samples(2048, 6);
    for (long i = 0; i < 2048; ++i) samples.row(i).setConstant(i % 2 ? 0.5 : -0.5);
    dde::BaseTrainingSet<double> set{samples, {}};
    dde::TrainConfig cfg;
    cfg.lr = 3e-3;
    cfg.epochs = 12;
    cfg.seed = 14;
    auto a = dde::BaseDenoiser<double>::init(tiny(false), 15);
    auto b = a;
    auto ra = dde::train_base(a, set, cfg);
    auto rb = dde::train_base(b, set, cfg);
    ASSERT_EQ(ra.log.size(), 12u);
    for (std::size_t e = 0; e < ra.log.size(); ++e) {
        EXPECT_EQ(ra.log[e].epoch, static_cast<int>(e));
        EXPECT_EQ(ra.log[e].mean_loss, rb.log[e].mean_loss);
    }
    EXPECT_LT(ra.log.back().mean_loss, 0.7 * ra.log.front().mean_loss);
}

TEST(TrainBase, DivergenceReportsEpoch) {
    auto m = dde::BaseDenoiser<double>::init(tiny(false), 16);
    MatD samples = MatD::Constant(8, 6, 1e200);
    dde::TrainConfig cfg;
    cfg.epochs = 2;
    try {
        dde::train_base(m, dde::BaseTrainingSet<double>{samples, {}}, cfg);
        FAIL() << "expected divergence";
    } catch (const dde::NumericalError& e) {
        EXPECT_EQ(e.index(), 0);
    }
}

TEST(Checkpoint, RoundTripPreservesOutputs) {
    auto m = dde::BaseDenoiser<float>::init(tiny(), 17);
    dde::Rng rng(18);
    for (std::size_t i = 0; i < m.params().size(); ++i)
        if (m.params().at(i).trainable)
            m.params().at(i).value += rng.normal_matrix<float>(m.params().at(i).value.rows(), m.params().at(i).value.cols(), 0.1);
    const auto path = temp_file("base.ckpt");
    dde::save_checkpoint(path, m.params(), m.metadata());
    auto back = dde::BaseDenoiser<float>::from_checkpoint(dde::load_checkpoint<float>(path));
    dde::MatF x = rng.normal_matrix<float>(3, 6, 1.0);
    std::vector<dde::Conditioning> c(3, dde::Position{0.5, 0.25});
    EXPECT_EQ(back(x, 0.7, c), m(x, 0.7, c));
    EXPECT_EQ(back.config().sigma_data, 0.5);
    EXPECT_FALSE(std::filesystem::exists(path.string() + ".tmp"));
    std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
    const auto path = temp_file("bad.ckpt");
    {
        std::ofstream os(path, std::ios::binary);
        os << "NOTACKPT........";
    }
    EXPECT_THROW(dde::load_checkpoint<float>(path), std::runtime_error);

    auto m = dde::BaseDenoiser<float>::init(tiny(), 19);
    dde::save_checkpoint(path, m.params(), m.metadata());
    const auto full = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, full / 2);
    EXPECT_THROW(dde::load_checkpoint<float>(path), std::runtime_error);
    EXPECT_THROW(dde::load_checkpoint<float>(temp_file("missing.ckpt")), std::runtime_error);

    // a valid file for a different architecture
    auto other = dde::BaseDenoiser<float>::init(tiny(false), 19);
    dde::save_checkpoint(path, other.params(), m.metadata());
    EXPECT_THROW(dde::BaseDenoiser<float>::from_checkpoint(dde::load_checkpoint<float>(path)), std::invalid_argument);
    std::filesystem::remove(path);
}

TEST(Datasets, BumpImagesAreDeterministicAndPeakAtAnnotation) {
    auto a = dde::make_bump_dataset(50, 20), b = dde::make_bump_dataset(50, 20);
    EXPECT_EQ(a.images, b.images);
    EXPECT_NE(a.images, dde::make_bump_dataset(50, 21).images);
    for (long i = 0; i < 50; ++i) {
        const auto& p = a.annotated[i];
        const long r = dde::nearest_index(p.y, 16), c = dde::nearest_index(p.x, 16);
        EXPECT_GE(a.images(i, r * 16 + c), 0.9);
        EXPECT_NE(std::find(a.bumps[i].begin(), a.bumps[i].end(), p), a.bumps[i].end());
    }
    EXPECT_GT(a.sigma_data, 0.0);
}

TEST(Datasets, SignalsHaveUnitStdAndSlicesComeFromSignals) {
    auto ds = dde::make_signal_dataset(40, 22);
    EXPECT_NEAR(ds.sigma_data, 1.0, 1e-9);
    EXPECT_EQ(ds.signals, dde::make_signal_dataset(40, 22).signals);
    dde::Rng rng(23);
    MatD w = dde::slice_windows(ds, 64, 10, rng);
    for (long i = 0; i < 10; ++i) {
        bool found = false;
        for (long s = 0; s < ds.size() && !found; ++s)
            for (long o = 0; o + 64 <= ds.config.length && !found; ++o)
                found = ds.signals.row(s).segment(o, 64) == w.row(i);
        EXPECT_TRUE(found);
    }
    EXPECT_THROW(dde::slice_windows(ds, 641, 1, rng), std::invalid_argument);
}

}  // namespace
