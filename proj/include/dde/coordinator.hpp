#pragma once

// Coordinator: a small transformer over sub-patch tokens of the base-denoiser outputs, with
// 2D rotary positions in global token units, optional conditioning tokens and one-hot
// conditioning channels, and a zero-initialized output projection added to the base outputs.
// Corrected patches are reconciled by overlap averaging.

#include "dde/autodiff.hpp"
#include "dde/base_model.hpp"
#include "dde/datasets.hpp"
#include "dde/decomposition.hpp"
#include "dde/diffusion.hpp"
#include "dde/params.hpp"
#include "dde/training.hpp"

#include <algorithm>
#include <array>
#include <concepts>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace dde {

struct RopeConfig {
    long head_dim = 32;
    double theta_base = 1e4;

    void validate() const {
        require(head_dim >= 4 && head_dim % 4 == 0, "RopeConfig: head_dim must be a positive multiple of 4");
        require(theta_base > 0.0, "RopeConfig: theta_base must be positive");
    }
    long pairs_per_axis() const { return head_dim / 4; }
    double frequency(long j) const {
        return std::pow(theta_base, -static_cast<double>(j) / static_cast<double>(pairs_per_axis()));
    }
};

struct TokenPos {
    long row = 0;
    long col = 0;
};

/// Rotates adjacent pairs of the first half of `v` by row * theta_j and of the second half by
/// col * theta_j.
inline VecD rope_rotate(const VecD& v, TokenPos pos, const RopeConfig& cfg) {
    cfg.validate();
    require(v.size() == cfg.head_dim, "rope_rotate: vector length != head_dim");
    VecD out(v.size());
    const long q = cfg.pairs_per_axis();
    for (long half = 0; half < 2; ++half) {
        const double p = static_cast<double>(half == 0 ? pos.row : pos.col);
        for (long j = 0; j < q; ++j) {
            const long i = half * 2 * q + 2 * j;
            const double a = p * cfg.frequency(j);
            const double c = std::cos(a), s = std::sin(a);
            out[i] = v[i] * c - v[i + 1] * s;
            out[i + 1] = v[i] * s + v[i + 1] * c;
        }
    }
    return out;
}

/// Angle table (tokens x head_dim/2) for ad::rotary, laid out like rope_rotate.
template <class T>
Mat<T> rope_angles(const std::vector<TokenPos>& pos, const RopeConfig& cfg) {
    cfg.validate();
    const long q = cfg.pairs_per_axis();
    Mat<T> out(static_cast<long>(pos.size()), 2 * q);
    for (std::size_t r = 0; r < pos.size(); ++r)
        for (long j = 0; j < q; ++j) {
            out(r, j) = static_cast<T>(static_cast<double>(pos[r].row) * cfg.frequency(j));
            out(r, q + j) = static_cast<T>(static_cast<double>(pos[r].col) * cfg.frequency(j));
        }
    return out;
}

struct CoordinatorConfig {
    long patch_h = 16;  // base-domain patch shape
    long patch_w = 16;
    long token_h = 4;
    long token_w = 4;
    long hidden = 128;
    int depth = 4;
    int heads = 4;
    double mlp_ratio = 4.0;
    int time_freqs = 16;
    bool cond_channels = false;
    bool cond_tokens = false;
    int cond_freqs = 16;
    double cond_scale = 4.0;
    double rope_base = 1e4;
    double sigma_data = 1.0;

    void validate() const {
        require(patch_h >= 1 && patch_w >= 1 && token_h >= 1 && token_w >= 1, "CoordinatorConfig: sizes must be positive");
        require(patch_h % token_h == 0 && patch_w % token_w == 0,
                "CoordinatorConfig: token shape must divide the patch shape");
        require(hidden >= 1 && depth >= 0 && heads >= 1 && hidden % heads == 0,
                "CoordinatorConfig: hidden must be divisible by heads");
        rope().validate();
        require(mlp_ratio > 0.0 && sigma_data > 0.0, "CoordinatorConfig: invalid mlp_ratio or sigma_data");
    }
    RopeConfig rope() const { return {hidden / heads, rope_base}; }
    long token_size() const { return token_h * token_w; }
    long tokens_per_patch() const { return (patch_h / token_h) * (patch_w / token_w); }
    long feature_size() const { return token_size() * (cond_channels ? 2 : 1); }
    long mlp_hidden() const { return std::max(1L, static_cast<long>(std::lround(mlp_ratio * hidden))); }
};

/// A batch of expanded-domain examples. Every example has its own layout (patch counts may
/// differ) but all share the object and patch shapes.
template <class T>
struct CoordinatorBatch {
    std::vector<PatchLayout> layouts;
    Mat<T> base_outputs;              // stacked patches, example-major
    std::vector<Conditioning> conds;  // one per patch row, or empty
    Vec<T> sigmas;                    // one per example

    long batch() const { return static_cast<long>(layouts.size()); }
    long patch_rows() const {
        long n = 0;
        for (const auto& l : layouts) n += l.count();
        return n;
    }
    void validate() const {
        require(!layouts.empty(), "CoordinatorBatch: empty batch");
        for (const auto& l : layouts) {
            l.validate();
            require(l.object_size() == layouts.front().object_size() && l.patch_h == layouts.front().patch_h &&
                        l.patch_w == layouts.front().patch_w,
                    "CoordinatorBatch: examples must share object and patch shapes");
        }
        require_same_shape(base_outputs, patch_rows(), layouts.front().patch_size(), "CoordinatorBatch: base_outputs");
        require(conds.empty() || static_cast<long>(conds.size()) == patch_rows(),
                "CoordinatorBatch: conditioning count mismatch");
        require(sigmas.size() == batch(), "CoordinatorBatch: sigma count mismatch");
    }
};

template <class T>
CoordinatorBatch<T> uniform_batch(const PatchLayout& layout, Mat<T> base_outputs, std::vector<Conditioning> conds,
                                  double sigma) {
    require(base_outputs.rows() % layout.count() == 0, "uniform_batch: rows not a multiple of the patch count");
    const long b = base_outputs.rows() / layout.count();
    return {std::vector<PatchLayout>(b, layout), std::move(base_outputs), std::move(conds),
            Vec<T>::Constant(b, static_cast<T>(sigma))};
}

/// Overlap averaging on a tape: patches (stacked as in `layouts`) -> (batch x object_size).
template <class T>
ad::Var<T> recompose_on_tape(ad::Var<T> patches, const std::vector<PatchLayout>& layouts) {
    const long n_obj = layouts.front().object_size(), p = layouts.front().patch_size();
    std::vector<long> idx;
    idx.reserve(patches.value().size());
    Mat<T> inv(static_cast<long>(layouts.size()), n_obj);
    for (std::size_t b = 0; b < layouts.size(); ++b) {
        const auto g = layouts[b].gather_index();
        for (long e : g) idx.push_back(static_cast<long>(b) * n_obj + e);
        const auto counts = coverage_counts(layouts[b]);
        for (long n = 0; n < n_obj; ++n) inv(b, n) = T(1) / static_cast<T>(counts[n]);
    }
    require(static_cast<long>(idx.size()) == patches.rows() * p, "recompose_on_tape: patch count mismatch");
    auto sum = ad::scatter_add(patches, ad::make_index(std::move(idx)), static_cast<long>(layouts.size()), n_obj);
    return ad::hadamard(sum, patches.tape->constant(std::move(inv)));
}

/// Per-example overlap averaging of plain matrices.
template <class T>
Mat<T> recompose_batch(const Mat<T>& patches, const std::vector<PatchLayout>& layouts) {
    Mat<T> out(static_cast<long>(layouts.size()), layouts.front().object_size());
    long row = 0;
    for (std::size_t b = 0; b < layouts.size(); ++b) {
        const long k = layouts[b].count();
        out.row(b) = recompose_average(Mat<T>(patches.middleRows(row, k)), layouts[b], 1).row(0);
        row += k;
    }
    return out;
}

template <class T>
class Coordinator {
public:
    Coordinator() = default;
    Coordinator(CoordinatorConfig cfg, ParamSet<T> params) : cfg_(cfg), params_(std::move(params)) {}

    static Coordinator init(const CoordinatorConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Rng rng(seed);
        ParamSet<T> p;
        const long h = cfg.hidden, m = cfg.mlp_hidden();
        auto he = [&](long in, long out) { return rng.normal_matrix<T>(in, out, std::sqrt(1.0 / in)); };
        p.add("time.freq", rng.normal_matrix<T>(1, cfg.time_freqs, 1.0), false);
        p.add("time.w1", he(2 * cfg.time_freqs, h));
        p.add("time.b1", Mat<T>::Zero(1, h));
        p.add("time.w2", he(h, h));
        p.add("time.b2", Mat<T>::Zero(1, h));
        p.add("sample.in.w", he(cfg.feature_size(), h));
        p.add("sample.in.b", Mat<T>::Zero(1, h));
        if (cfg.cond_tokens) {
            p.add("cond.freq", rng.normal_matrix<T>(1, cfg.cond_freqs, cfg.cond_scale), false);
            p.add("cond.in.w", he(4 * cfg.cond_freqs, h));
            p.add("cond.in.b", Mat<T>::Zero(1, h));
            p.add("cond.null", rng.normal_matrix<T>(1, h, 1.0));
        }
        for (int b = 0; b < cfg.depth; ++b) {
            const std::string k = "block" + std::to_string(b);
            p.add(k + ".ln1.g", Mat<T>::Ones(1, h));
            p.add(k + ".ln1.b", Mat<T>::Zero(1, h));
            for (const char* n : {".q", ".k", ".v", ".o"}) {
                p.add(k + n + ".w", he(h, h));
                p.add(k + n + ".b", Mat<T>::Zero(1, h));
            }
            p.add(k + ".ln2.g", Mat<T>::Ones(1, h));
            p.add(k + ".ln2.b", Mat<T>::Zero(1, h));
            for (const char* type : {".sample", ".cond"}) {
                if (std::string(type) == ".cond" && !cfg.cond_tokens) continue;
                p.add(k + type + ".w1", he(h, m));
                p.add(k + type + ".b1", Mat<T>::Zero(1, m));
                p.add(k + type + ".w2", Mat<T>(he(m, h) * T(0.5)));
                p.add(k + type + ".b2", Mat<T>::Zero(1, h));
            }
        }
        p.add("final.ln.g", Mat<T>::Ones(1, h));
        p.add("final.ln.b", Mat<T>::Zero(1, h));
        p.add("out.w", Mat<T>::Zero(h, cfg.token_size()));
        p.add("out.b", Mat<T>::Zero(1, cfg.token_size()));
        return Coordinator(cfg, std::move(p));
    }

    const CoordinatorConfig& config() const { return cfg_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }

    /// Corrected patches (same stacking as in.base_outputs) on a tape.
    ad::Var<T> forward_patches(ad::Tape<T>& tape, const CoordinatorBatch<T>& in) const {
        in.validate();
        const auto& l0 = in.layouts.front();
        require(l0.patch_h == cfg_.patch_h && l0.patch_w == cfg_.patch_w,
                "Coordinator: patch shape " + shape_str(l0.patch_h, l0.patch_w) + " does not match configured " +
                    shape_str(cfg_.patch_h, cfg_.patch_w));
        Plan plan = make_plan(in);
        auto P = [&](const std::string& name) { return bind(tape, name); };

        // time embedding per example, broadcast to that example's tokens
        Mat<T> c_noise(in.batch(), 1);
        for (long b = 0; b < in.batch(); ++b)
            c_noise(b, 0) = static_cast<T>(0.25 * std::log(static_cast<double>(in.sigmas[b])));
        auto tfeat = tape.constant(fourier_features(c_noise, params_["time.freq"].value));
        auto temb = ad::linear(ad::silu(ad::linear(tfeat, P("time.w1"), P("time.b1"))), P("time.w2"), P("time.b2"));

        auto sample_h = ad::linear(tape.constant(std::move(plan.sample_features)), P("sample.in.w"), P("sample.in.b"));
        std::vector<std::pair<ad::Var<T>, ad::Index>> parts{{sample_h, plan.sample_rows}};
        if (plan.n_cond > 0) {
            std::vector<std::pair<ad::Var<T>, ad::Index>> cparts;
            if (!plan.present_cond_rows->empty()) {
                auto cf = tape.constant(fourier_features(plan.cond_values, params_["cond.freq"].value));
                cparts.push_back({ad::linear(cf, P("cond.in.w"), P("cond.in.b")), plan.present_cond_rows});
            }
            if (!plan.null_cond_rows->empty()) {
                auto zeros = ad::make_index(std::vector<long>(plan.null_cond_rows->size(), 0));
                cparts.push_back({ad::gather_rows(P("cond.null"), zeros), plan.null_cond_rows});
            }
            parts.push_back({ad::merge_rows(cparts, plan.n_cond), plan.cond_rows});
        }
        auto x = ad::add(ad::merge_rows(parts, plan.n_tokens), ad::gather_rows(temb, plan.token_example));

        for (int b = 0; b < cfg_.depth; ++b) {
            const std::string k = "block" + std::to_string(b);
            auto a = ad::layer_norm(x, P(k + ".ln1.g"), P(k + ".ln1.b"));
            auto q = ad::rotary(ad::linear(a, P(k + ".q.w"), P(k + ".q.b")), plan.angles, cfg_.heads);
            auto kk = ad::rotary(ad::linear(a, P(k + ".k.w"), P(k + ".k.b")), plan.angles, cfg_.heads);
            auto v = ad::linear(a, P(k + ".v.w"), P(k + ".v.b"));
            auto att = ad::attention(q, kk, v, cfg_.heads, plan.segments);
            x = ad::add(x, ad::linear(att, P(k + ".o.w"), P(k + ".o.b")));
            a = ad::layer_norm(x, P(k + ".ln2.g"), P(k + ".ln2.b"));
            auto mlp = [&](const std::string& t, ad::Index rows) {
                auto s = ad::gather_rows(a, rows);
                return ad::linear(ad::silu(ad::linear(s, P(k + t + ".w1"), P(k + t + ".b1"))), P(k + t + ".w2"),
                                  P(k + t + ".b2"));
            };
            std::vector<std::pair<ad::Var<T>, ad::Index>> m{{mlp(".sample", plan.sample_rows), plan.sample_rows}};
            if (plan.n_cond > 0) m.push_back({mlp(".cond", plan.cond_rows), plan.cond_rows});
            x = ad::add(x, ad::merge_rows(m, plan.n_tokens));
        }
        auto fin = ad::gather_rows(ad::layer_norm(x, P("final.ln.g"), P("final.ln.b")), plan.sample_rows);
        // c_out(sigma) scaling keeps the EDM loss weight from amplifying the correction at small sigma
        Vec<T> c_out(plan.sample_example->size());
        for (std::size_t i = 0; i < plan.sample_example->size(); ++i)
            c_out[i] = static_cast<T>(
                edm_coefficients(static_cast<double>(in.sigmas[(*plan.sample_example)[i]]), cfg_.sigma_data).c_out);
        auto delta = ad::rowscale(ad::linear(fin, P("out.w"), P("out.b")), c_out);
        auto scattered =
            ad::scatter_add(delta, plan.token_elements, in.base_outputs.rows(), in.base_outputs.cols());
        return ad::add(tape.constant(in.base_outputs), scattered);
    }

    /// Composite estimate of the clean expanded objects on a tape.
    ad::Var<T> forward_objects(ad::Tape<T>& tape, const CoordinatorBatch<T>& in) const {
        return recompose_on_tape(forward_patches(tape, in), in.layouts);
    }

    Mat<T> corrected_patches(const CoordinatorBatch<T>& in) const {
        ad::Tape<T> tape(false);
        return forward_patches(tape, in).value();
    }

    /// Inference: corrected patches reconciled with recompose_average.
    Mat<T> composite(const CoordinatorBatch<T>& in) const { return recompose_batch(corrected_patches(in), in.layouts); }

    Metadata metadata(const Metadata& extra = {}) const {
        Metadata m = extra;
        auto f = BaseDenoiser<T>::format_double;
        m["kind"] = "coordinator";
        m["patch_h"] = std::to_string(cfg_.patch_h);
        m["patch_w"] = std::to_string(cfg_.patch_w);
        m["token_h"] = std::to_string(cfg_.token_h);
        m["token_w"] = std::to_string(cfg_.token_w);
        m["hidden"] = std::to_string(cfg_.hidden);
        m["depth"] = std::to_string(cfg_.depth);
        m["heads"] = std::to_string(cfg_.heads);
        m["mlp_ratio"] = f(cfg_.mlp_ratio);
        m["time_freqs"] = std::to_string(cfg_.time_freqs);
        m["cond_channels"] = cfg_.cond_channels ? "1" : "0";
        m["cond_tokens"] = cfg_.cond_tokens ? "1" : "0";
        m["cond_freqs"] = std::to_string(cfg_.cond_freqs);
        m["cond_scale"] = f(cfg_.cond_scale);
        m["rope_base"] = f(cfg_.rope_base);
        m["sigma_data"] = f(cfg_.sigma_data);
        return m;
    }

    static Coordinator from_checkpoint(const Checkpoint<T>& ck) {
        auto get = [&](const char* k) {
            auto it = ck.meta.find(k);
            if (it == ck.meta.end()) throw std::runtime_error(std::string("checkpoint: missing metadata ") + k);
            return it->second;
        };
        if (get("kind") != "coordinator") throw std::runtime_error("checkpoint: not a coordinator checkpoint");
        CoordinatorConfig c;
        c.patch_h = std::stol(get("patch_h"));
        c.patch_w = std::stol(get("patch_w"));
        c.token_h = std::stol(get("token_h"));
        c.token_w = std::stol(get("token_w"));
        c.hidden = std::stol(get("hidden"));
        c.depth = std::stoi(get("depth"));
        c.heads = std::stoi(get("heads"));
        c.mlp_ratio = std::stod(get("mlp_ratio"));
        c.time_freqs = std::stoi(get("time_freqs"));
        c.cond_channels = get("cond_channels") == "1";
        c.cond_tokens = get("cond_tokens") == "1";
        c.cond_freqs = std::stoi(get("cond_freqs"));
        c.cond_scale = std::stod(get("cond_scale"));
        c.rope_base = std::stod(get("rope_base"));
        c.sigma_data = std::stod(get("sigma_data"));
        Coordinator m = init(c, 0);
        require(m.params_.same_structure(ck.params), "checkpoint: parameter table does not match coordinator architecture");
        m.params_ = ck.params.template cast<T>();
        return m;
    }

    /// Global token positions of the sample tokens of one layout, patch-major.
    std::vector<TokenPos> sample_positions(const PatchLayout& layout) const {
        std::vector<TokenPos> pos;
        for (auto [r0, c0] : layout.offsets) {
            require(r0 % cfg_.token_h == 0 && c0 % cfg_.token_w == 0,
                    "Coordinator: patch offset (" + std::to_string(r0) + ", " + std::to_string(c0) +
                        ") not aligned to the token grid");
            for (long i = 0; i < cfg_.patch_h / cfg_.token_h; ++i)
                for (long j = 0; j < cfg_.patch_w / cfg_.token_w; ++j)
                    pos.push_back({r0 / cfg_.token_h + i, c0 / cfg_.token_w + j});
        }
        return pos;
    }

private:
    struct Plan {
        long n_tokens = 0;
        long n_cond = 0;
        Mat<T> sample_features;
        Mat<T> cond_values;  // (present conds x 2): x, y
        ad::Index sample_rows, cond_rows, present_cond_rows, null_cond_rows, token_example, token_elements, sample_example;
        std::shared_ptr<const std::vector<long>> segments;
        Mat<T> angles;
    };

    Plan make_plan(const CoordinatorBatch<T>& in) const {
        const long tpp = cfg_.tokens_per_patch(), ts = cfg_.token_size(), P = in.layouts.front().patch_size();
        const long n_sample = in.patch_rows() * tpp;
        const bool conds = !in.conds.empty();
        const bool ctok = cfg_.cond_tokens && conds;
        Plan plan;
        plan.n_cond = ctok ? in.patch_rows() : 0;
        plan.n_tokens = n_sample + plan.n_cond;
        plan.sample_features = Mat<T>::Zero(n_sample, cfg_.feature_size());
        std::vector<long> srows, crows, prows, nrows, tex, sex, elems(n_sample * ts), seg{0};
        std::vector<TokenPos> pos;
        std::vector<std::array<T, 2>> cvals;
        const long tr = cfg_.patch_h / cfg_.token_h, tc = cfg_.patch_w / cfg_.token_w;

        long prow = 0, token = 0, stok = 0;
        for (long b = 0; b < in.batch(); ++b) {
            const auto& lay = in.layouts[b];
            auto spos = sample_positions(lay);
            for (long p = 0; p < lay.count(); ++p, ++prow) {
                const auto [r0, c0] = lay.offsets[p];
                long hot_r = -1, hot_c = -1;
                if (conds && in.conds[prow] && cfg_.cond_channels) {
                    const long R = nearest_index(in.conds[prow]->y, lay.height);
                    const long C = nearest_index(in.conds[prow]->x, lay.width);
                    if (R >= r0 && R < r0 + lay.patch_h && C >= c0 && C < c0 + lay.patch_w) {
                        hot_r = R - r0;
                        hot_c = C - c0;
                    }
                }
                for (long i = 0; i < tr; ++i)
                    for (long j = 0; j < tc; ++j, ++token, ++stok) {
                        srows.push_back(token);
                        tex.push_back(b);
                        sex.push_back(b);
                        pos.push_back(spos[p * tpp + i * tc + j]);
                        for (long a = 0; a < cfg_.token_h; ++a)
                            for (long c = 0; c < cfg_.token_w; ++c) {
                                const long lr = i * cfg_.token_h + a, lc = j * cfg_.token_w + c;
                                const long e = a * cfg_.token_w + c;
                                elems[stok * ts + e] = prow * P + lr * lay.patch_w + lc;
                                plan.sample_features(stok, e) = in.base_outputs(prow, lr * lay.patch_w + lc);
                                if (lr == hot_r && lc == hot_c) plan.sample_features(stok, ts + e) = T(1);
                            }
                    }
            }
            if (ctok) {
                const long first = prow - lay.count();
                for (long p = 0; p < lay.count(); ++p, ++token) {
                    const auto& c = in.conds[first + p];
                    const long ci = first + p;
                    crows.push_back(token);
                    tex.push_back(b);
                    if (c) {
                        const long R = nearest_index(c->y, lay.height), C = nearest_index(c->x, lay.width);
                        pos.push_back({R / cfg_.token_h, C / cfg_.token_w});
                        prows.push_back(ci);
                        cvals.push_back({static_cast<T>(c->x), static_cast<T>(c->y)});
                    } else {
                        pos.push_back({0, 0});
                        nrows.push_back(ci);
                    }
                }
            }
            seg.push_back(token);
        }
        plan.cond_values.resize(static_cast<long>(cvals.size()), 2);
        for (std::size_t i = 0; i < cvals.size(); ++i) {
            plan.cond_values(i, 0) = cvals[i][0];
            plan.cond_values(i, 1) = cvals[i][1];
        }
        plan.sample_rows = ad::make_index(std::move(srows));
        plan.cond_rows = ad::make_index(std::move(crows));
        plan.present_cond_rows = ad::make_index(std::move(prows));
        plan.null_cond_rows = ad::make_index(std::move(nrows));
        plan.token_example = ad::make_index(std::move(tex));
        plan.sample_example = ad::make_index(std::move(sex));
        plan.token_elements = ad::make_index(std::move(elems));
        plan.segments = std::make_shared<const std::vector<long>>(std::move(seg));
        plan.angles = rope_angles<T>(pos, cfg_.rope());
        return plan;
    }

    ad::Var<T> bind(ad::Tape<T>& tape, const std::string& name) const {
        auto& p = const_cast<ad::Parameter<T>&>(params_[name]);
        return tape.recording() ? tape.param(p) : tape.constant(p.value);
    }

    CoordinatorConfig cfg_;
    ParamSet<T> params_;
};

/// (1 + w) cond_out - w uncond_out.
template <class T>
Mat<T> cfg_combine(const Mat<T>& cond_out, const Mat<T>& uncond_out, double w) {
    require_same_shape(uncond_out, cond_out.rows(), cond_out.cols(), "cfg_combine: unconditional output");
    require(std::isfinite(w), "cfg_combine: guidance weight must be finite");
    return static_cast<T>(1.0 + w) * cond_out - static_cast<T>(w) * uncond_out;
}

/// Base denoiser applied to stacked patches: base(patches, sigma, conds) -> patches, where
/// conds is empty or holds one conditioning per patch row.
template <class F, class T>
concept PatchDenoiser = requires(const F& f, const Mat<T>& x, double sigma, std::span<const Conditioning> c) {
    { f(x, sigma, c) } -> std::convertible_to<Mat<T>>;
};

/// D_[L](X, Y, sigma): decompose, evaluate the base per patch, correct, average overlaps.
/// `conds` holds layout.count() conditionings per row of X, or is empty.
template <class T, class Base, class Coord>
Mat<T> composite_denoise(const Base& base, const Coord& coord, const Mat<T>& X, std::span<const Conditioning> conds,
                         double sigma, const PatchLayout& layout) {
    auto d = decompose(X, layout);
    require(conds.empty() || static_cast<long>(conds.size()) == d.patches.rows(),
            "composite_denoise: need " + std::to_string(d.patches.rows()) + " conditionings, got " +
                std::to_string(conds.size()));
    Mat<T> out = base(d.patches, sigma, conds);
    require_same_shape(out, d.patches.rows(), d.patches.cols(), "composite_denoise: base output");
    return coord.composite(
        uniform_batch(layout, std::move(out), std::vector<Conditioning>(conds.begin(), conds.end()), sigma));
}

inline std::vector<Conditioning> null_like(std::span<const Conditioning> conds) {
    return std::vector<Conditioning>(conds.size(), std::nullopt);
}

/// Expanded-domain denoiser for ode_sample, with optional classifier-free guidance whose
/// unconditional branch feeds the null conditioning to every base call and coordinator slot.
template <class T, class Base, class Coord>
struct CompositeDenoiser {
    const Base* base = nullptr;
    const Coord* coord = nullptr;
    PatchLayout layout;
    std::vector<Conditioning> conds;  // layout.count() per sample row, or empty
    double guidance = 0.0;

    Mat<T> operator()(const Mat<T>& x, double sigma) const {
        Mat<T> c = composite_denoise<T>(*base, *coord, x, conds, sigma, layout);
        if (guidance == 0.0 || conds.empty()) return c;
        const auto null = null_like(conds);
        return cfg_combine(c, composite_denoise<T>(*base, *coord, x, null, sigma, layout), guidance);
    }
};

// ------------------------------------------------------------------- training

/// One training example: how the clean expanded object is decomposed and conditioned.
struct CoordExample {
    PatchLayout layout;
    std::vector<Conditioning> conds;  // one per patch, or empty
};

template <class T>
struct CoordTrainingSet {
    Mat<T> objects;  // clean expanded objects, one per row
    std::function<CoordExample(long item, Rng& rng)> example;
};

/// Noises `clean` (row b at sigmas[b]) with `noise`, runs the frozen base on every patch, and
/// stacks the coordinator input.
template <class T, class Base>
CoordinatorBatch<T> prepare_coord_batch(const Base& base, const Mat<T>& clean, const std::vector<CoordExample>& ex,
                                        const Vec<T>& sigmas, const Mat<T>& noise) {
    require(static_cast<long>(ex.size()) == clean.rows() && sigmas.size() == clean.rows(),
            "prepare_coord_batch: example count mismatch");
    require_same_shape(noise, clean.rows(), clean.cols(), "prepare_coord_batch: noise");
    CoordinatorBatch<T> batch;
    batch.sigmas = sigmas;
    const bool any_conds = std::any_of(ex.begin(), ex.end(), [](const CoordExample& e) { return !e.conds.empty(); });
    std::vector<Mat<T>> outs;
    long rows = 0;
    for (long b = 0; b < clean.rows(); ++b) {
        Mat<T> noisy = clean.row(b) + static_cast<T>(sigmas[b]) * noise.row(b);
        auto d = decompose(noisy, ex[b].layout);
        std::vector<Conditioning> c = ex[b].conds;
        if (any_conds && c.empty()) c.assign(ex[b].layout.count(), std::nullopt);
        Mat<T> out = base(d.patches, static_cast<double>(sigmas[b]), std::span<const Conditioning>(c));
        require_same_shape(out, d.patches.rows(), d.patches.cols(), "prepare_coord_batch: base output");
        rows += out.rows();
        outs.push_back(std::move(out));
        batch.layouts.push_back(ex[b].layout);
        if (any_conds) batch.conds.insert(batch.conds.end(), c.begin(), c.end());
    }
    batch.base_outputs.resize(rows, outs.front().cols());
    long r = 0;
    for (auto& o : outs) {
        batch.base_outputs.middleRows(r, o.rows()) = o;
        r += o.rows();
    }
    return batch;
}

/// EDM-weighted denoising loss of the composite estimate against the clean objects.
template <class T, class Coord>
ad::Var<T> coordinator_loss(ad::Tape<T>& tape, const Coord& coord, const CoordinatorBatch<T>& batch,
                            const Mat<T>& clean) {
    const EdmWeighting weight{coord.config().sigma_data};
    Vec<T> w(batch.batch());
    for (long b = 0; b < batch.batch(); ++b) w[b] = static_cast<T>(weight(static_cast<double>(batch.sigmas[b])));
    return ad::weighted_sq_error(coord.forward_objects(tape, batch), clean, w);
}

/// Trains the coordinator against a frozen base. With probability cfg.cond_dropout an
/// example's whole conditioning set is replaced by the null conditioning, which makes the
/// coordinator input identical to the unconditional guidance branch.
template <class T, class Coord, class Base>
TrainResult<T> train_coordinator(Coord& coord, const Base& base, const CoordTrainingSet<T>& data,
                                 const TrainConfig& cfg) {
    require(data.objects.rows() >= 1, "train_coordinator: empty dataset");
    require(static_cast<bool>(data.example), "train_coordinator: missing example generator");
    auto loss = [&](ad::Tape<T>& tape, std::span<const long> idx, Rng& rng) {
        const long n = static_cast<long>(idx.size());
        Mat<T> clean(n, data.objects.cols());
        Vec<T> sig(n);
        std::vector<CoordExample> ex;
        for (long i = 0; i < n; ++i) {
            clean.row(i) = data.objects.row(idx[i]);
            ex.push_back(data.example(idx[i], rng));
            if (!ex.back().conds.empty() && rng.uniform() < cfg.cond_dropout)
                ex.back().conds.assign(ex.back().conds.size(), std::nullopt);
            sig[i] = static_cast<T>(sample_sigma(cfg.sigma, rng));
        }
        Mat<T> noise = rng.normal_matrix<T>(n, clean.cols(), 1.0);
        auto batch = prepare_coord_batch(base, clean, ex, sig, noise);
        return coordinator_loss(tape, coord, batch, clean);
    };
    return run_training(coord.params(), data.objects.rows(), cfg, loss);
}

}  // namespace dde
