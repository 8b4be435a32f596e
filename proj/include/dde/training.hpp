#pragma once

#include "dde/autodiff.hpp"
#include "dde/diffusion.hpp"
#include "dde/params.hpp"
#include "dde/random.hpp"

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

namespace dde {

struct TrainConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    long batch_size = 32;
    int epochs = 10;
    SigmaSampler sigma{-1.0, 1.6};
    double cond_dropout = 0.10;
    double ema_decay = 0.999;
    std::uint64_t seed = 0;

    void validate() const {
        require(lr > 0.0, "TrainConfig: lr must be positive");
        require(batch_size >= 1 && epochs >= 1, "TrainConfig: batch_size and epochs must be positive");
        require(cond_dropout >= 0.0 && cond_dropout <= 1.0, "TrainConfig: cond_dropout must lie in [0, 1]");
        require(ema_decay >= 0.0 && ema_decay <= 1.0, "TrainConfig: ema_decay must lie in [0, 1]");
    }
};

struct EpochLog {
    int epoch = 0;
    double mean_loss = 0.0;
};

template <class T>
struct TrainResult {
    ParamSet<T> ema;
    std::vector<EpochLog> log;
};

/// Minibatch Adam over `n_items` items with weight EMA. `loss(tape, batch_indices, rng)` must
/// build a scalar loss on `tape` using `params` as tape parameters. Each epoch visits a fresh
/// permutation. Throws NumericalError carrying the epoch index when the loss stops being finite.
template <class T, class LossFn>
TrainResult<T> run_training(ParamSet<T>& params, long n_items, const TrainConfig& cfg, LossFn&& loss) {
    cfg.validate();
    require(n_items >= 1, "run_training: empty dataset");
    Rng rng(derive_seed(cfg.seed, 0x7472616eULL));
    Adam<T> opt(params, AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
    TrainResult<T> result{params.template cast<T>(), {}};
    std::vector<long> order(n_items);
    std::iota(order.begin(), order.end(), 0L);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        double total = 0.0;
        long batches = 0;
        for (long start = 0; start < n_items; start += cfg.batch_size) {
            const long n = std::min(cfg.batch_size, n_items - start);
            std::span<const long> idx(order.data() + start, static_cast<std::size_t>(n));
            params.zero_grad();
            ad::Tape<T> tape;
            ad::Var<T> l = loss(tape, idx, rng);
            const double lv = static_cast<double>(l.value()(0, 0));
            if (!std::isfinite(lv)) throw NumericalError("training loss diverged", epoch);
            tape.backward(l);
            opt.step(params);
            ema_update_inplace(result.ema, params, cfg.ema_decay);
            total += lv;
            ++batches;
        }
        result.log.push_back({epoch, total / static_cast<double>(batches)});
        if (!params.all_finite()) throw NumericalError("training parameters diverged", epoch);
    }
    return result;
}

}  // namespace dde
