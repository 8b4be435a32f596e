// Command-line front end: training, sampling, evaluation and comparison for the bump2d,
// signal1d and gaussian-oracle tasks.

#include "dde/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct RunConfig {
    std::string task = "bump2d";
    std::string stage;
    std::uint64_t seed = 0;
    std::string out;

    // data
    std::uint64_t data_seed = 1;
    long data_size = 0;     // bump images, signals or Gaussian samples
    long train_items = 0;   // signal windows per epoch
    long signal_length = 640;
    long dim = 64;          // gaussian-oracle dimension

    // patch grid (signal1d)
    long patch = 64;
    long stride = 48;
    long N = 0;             // object length; when set, L is derived from it

    long L_train = 0;
    long L = 0;

    // models
    long base_hidden = 128;
    long base_blocks = 2;
    std::string coord_arch = "transformer";
    long coord_hidden = 64;
    long coord_depth = 2;
    long coord_heads = 4;
    double coord_mlp_ratio = 2.0;
    long coord_token = 0;

    // training
    double lr = 1e-3;
    long epochs = 0;
    long batch_size = 0;
    double ema_decay = 0.999;
    double cond_dropout = 0.1;

    // sampling
    std::string method = "dde";
    double w = -1.0;
    long steps = 32;
    double churn = 0.0;
    double sigma_min = dde::SigmaScheduleConfig{}.sigma_min;
    double sigma_max = dde::SigmaScheduleConfig{}.sigma_max;
    long n_samples = 256;
    std::string cond_distance = "euclidean";
    std::string base_ckpt;
    std::string coord_ckpt;

    // eval / compare
    std::vector<std::string> runs;
    std::vector<std::string> inputs;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, task, stage, seed, out, data_seed, data_size, train_items,
                                                signal_length, dim, patch, stride, N, L_train, L, base_hidden,
                                                base_blocks, coord_arch, coord_hidden, coord_depth, coord_heads,
                                                coord_mlp_ratio, coord_token, lr, epochs, batch_size, ema_decay,
                                                cond_dropout, method, w, steps, churn, sigma_min, sigma_max, n_samples,
                                                cond_distance, base_ckpt, coord_ckpt, runs, inputs)

struct Failure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void check(bool ok, const std::string& msg) {
    if (!ok) throw Failure(msg);
}

// ------------------------------------------------------------------- files

void write_atomic(const fs::path& path, const std::string& content) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        check(static_cast<bool>(os), "cannot write " + tmp.string());
        os << content;
        check(static_cast<bool>(os), "write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    check(static_cast<bool>(is), "cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::string format_float(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

template <class T>
std::string matrix_csv(const dde::Mat<T>& m) {
    std::string s;
    for (long r = 0; r < m.rows(); ++r) {
        for (long c = 0; c < m.cols(); ++c) {
            if (c) s += ',';
            s += format_float(static_cast<double>(m(r, c)));
        }
        s += '\n';
    }
    return s;
}

dde::MatD read_matrix_csv(const fs::path& path) {
    std::istringstream is(read_file(path));
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
        check(rows.empty() || row.size() == rows[0].size(), path.string() + ": ragged rows");
        rows.push_back(std::move(row));
    }
    check(!rows.empty(), path.string() + ": no samples");
    dde::MatD m(static_cast<long>(rows.size()), static_cast<long>(rows[0].size()));
    for (long r = 0; r < m.rows(); ++r)
        for (long c = 0; c < m.cols(); ++c) m(r, c) = rows[r][c];
    return m;
}

/// Binary graymap; values are clamped to [0, 1] and scaled to [0, 255].
std::string pgm(const dde::MatF& images, long row, long h, long w) {
    std::string s = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (long i = 0; i < h * w; ++i) {
        const double v = std::clamp(static_cast<double>(images(row, i)), 0.0, 1.0);
        s += static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
    }
    return s;
}

fs::path output_root() {
    const char* env = std::getenv("DDE_OUTPUT_ROOT");
    return env && *env ? fs::path(env) : fs::current_path();
}

fs::path resolve_out(const RunConfig& c) {
    const fs::path p(c.out.empty() ? c.stage : c.out);
    return p.is_absolute() ? p : output_root() / p;
}

// ------------------------------------------------------------------- config

void resolve_defaults(RunConfig& c) {
    const bool bump = c.task == "bump2d", signal = c.task == "signal1d", gauss = c.task == "gaussian-oracle";
    check(bump || signal || gauss, "unknown task '" + c.task + "' (expected signal1d, bump2d or gaussian-oracle)");
    if (c.data_size == 0) c.data_size = bump ? 20000 : signal ? 2000 : 20000;
    if (c.train_items == 0) c.train_items = 20000;
    if (c.L_train == 0) c.L_train = bump ? 2 : 5;
    if (signal && c.N > 0) {
        const auto grid = dde::PatchGrid1D::from_total(c.N, c.patch, c.stride);
        c.L = grid.count;
    }
    if (c.L == 0) c.L = bump ? 3 : signal ? 13 : 1;
    if (c.coord_token == 0) c.coord_token = bump ? 4 : 8;
    const bool coord_stage = c.stage == "train-coord";
    if (c.epochs == 0) c.epochs = bump ? (coord_stage ? 3 : 40) : signal ? (coord_stage ? 4 : 20) : 20;
    if (c.batch_size == 0) c.batch_size = coord_stage ? 32 : 64;
    if (c.w < 0.0) c.w = !bump ? 0.0 : c.method == "rrr" ? 4.0 : 20.0;
    check(c.cond_distance == "euclidean" || c.cond_distance == "squared",
          "cond_distance must be euclidean or squared");
    check(c.coord_arch == "transformer" || c.coord_arch == "rnn", "coord_arch must be transformer or rnn");
    check(c.L >= 1 && c.L_train >= 1 && c.n_samples >= 1 && c.steps >= 2, "L, L_train, n_samples and steps must be positive");
    if (signal) {
        (void)dde::PatchGrid1D::from_count(c.patch, c.stride, c.L);  // validates the grid
        check(c.patch % c.coord_token == 0, "patch length must be a multiple of coord_token");
    }
}

dde::TrainConfig train_config(const RunConfig& c, std::uint64_t stream) {
    dde::TrainConfig t;
    t.lr = c.lr;
    t.epochs = static_cast<int>(c.epochs);
    t.batch_size = c.batch_size;
    t.ema_decay = c.ema_decay;
    t.cond_dropout = c.cond_dropout;
    t.seed = dde::derive_seed(c.seed, stream);
    return t;
}

dde::SamplerConfig sampler_config(const RunConfig& c) {
    dde::SamplerConfig s;
    s.schedule.n_steps = static_cast<int>(c.steps);
    s.schedule.sigma_min = c.sigma_min;
    s.schedule.sigma_max = c.sigma_max;
    s.s_churn = c.churn;
    s.validate();
    return s;
}

dde::GaussianData oracle_data(const RunConfig& c) {
    dde::Rng rng(c.data_seed);
    dde::VecD mean(c.dim), var(c.dim);
    for (long j = 0; j < c.dim; ++j) {
        mean[j] = rng.uniform(-1.0, 1.0);
        var[j] = rng.uniform(0.5, 2.0);
    }
    return {mean, var};
}

dde::SignalDataset signal_data(const RunConfig& c) {
    dde::SignalConfig sc;
    sc.length = c.signal_length;
    return dde::make_signal_dataset(c.data_size, c.data_seed, sc);
}

std::string loss_csv(const std::vector<dde::EpochLog>& log) {
    std::string s = "epoch,loss\n";
    for (const auto& e : log) s += std::to_string(e.epoch) + "," + dde::format_value(e.mean_loss) + "\n";
    return s;
}

// ------------------------------------------------------------------- stages

void run_train_base(const RunConfig& c, const fs::path& out) {
    dde::BaseModelConfig bc;
    bc.hidden = c.base_hidden;
    bc.blocks = static_cast<int>(c.base_blocks);
    dde::BaseTrainingSet<float> set;
    if (c.task == "bump2d") {
        auto ds = dde::make_bump_dataset(c.data_size, c.data_seed);
        bc.dim = ds.dim();
        bc.sigma_data = ds.sigma_data;
        set = dde::bump_base_set(ds);
    } else if (c.task == "signal1d") {
        auto ds = signal_data(c);
        bc.dim = c.patch;
        bc.conditional = false;
        bc.sigma_data = ds.sigma_data;
        set = dde::signal_base_set(ds, c.patch, c.train_items, dde::derive_seed(c.data_seed, 1));
    } else {
        auto data = oracle_data(c);
        dde::Rng rng(dde::derive_seed(c.data_seed, 1));
        bc.dim = c.dim;
        bc.conditional = false;
        bc.sigma_data = std::sqrt(data.variances.mean() + data.mean.squaredNorm() / static_cast<double>(c.dim));
        set.samples = data.sample<float>(c.data_size, rng);
    }
    auto model = dde::BaseDenoiser<float>::init(bc, dde::derive_seed(c.seed, 1));
    auto res = dde::train_base(model, set, train_config(c, 2));
    dde::save_checkpoint(out / "base.ckpt", model.params(), model.metadata());
    dde::save_checkpoint(out / "base_ema.ckpt", res.ema, model.metadata());
    write_atomic(out / "loss.csv", loss_csv(res.log));
}

dde::BaseDenoiser<float> load_base(const RunConfig& c) {
    check(!c.base_ckpt.empty(), "this stage needs --base-ckpt");
    return dde::BaseDenoiser<float>::from_checkpoint(dde::load_checkpoint<float>(c.base_ckpt));
}

void run_train_coord(const RunConfig& c, const fs::path& out) {
    check(!c.base_ckpt.empty(), "train-coord refuses to run without --base-ckpt");
    check(c.task != "gaussian-oracle", "train-coord is not defined for the gaussian-oracle task");
    const auto base = load_base(c);
    dde::BaseAdapter<float> adapter{&base};
    const auto tc = train_config(c, 4);
    const dde::Metadata extra{{"L_train", std::to_string(c.L_train)}};

    dde::CoordTrainingSet<float> set;
    dde::CoordinatorConfig cc;
    cc.hidden = c.coord_hidden;
    cc.depth = static_cast<int>(c.coord_depth);
    cc.heads = static_cast<int>(c.coord_heads);
    cc.mlp_ratio = c.coord_mlp_ratio;
    cc.sigma_data = base.config().sigma_data;
    if (c.task == "bump2d") {
        check(c.coord_arch == "transformer", "the bump2d task needs the transformer coordinator");
        auto ds = dde::make_bump_dataset(c.data_size, c.data_seed);
        check(ds.dim() == base.config().dim, "base checkpoint does not match the bump images");
        cc.patch_h = ds.config.height;
        cc.patch_w = ds.config.width;
        cc.token_h = cc.token_w = c.coord_token;
        cc.cond_channels = cc.cond_tokens = true;
        set = dde::bump_coord_set(ds, c.L_train);
    } else {
        check(base.config().dim == c.patch, "base checkpoint patch length does not match --patch");
        auto ds = signal_data(c);
        dde::SignalGeometry g{c.patch, c.stride};
        set = dde::signal_coord_set(ds, g, c.L_train, c.train_items / c.L_train, dde::derive_seed(c.data_seed, 2));
        if (c.coord_arch == "rnn") {
            auto rnn = dde::RecurrentCoordinator<float>::init({c.patch, 16, 32, base.config().sigma_data},
                                                              dde::derive_seed(c.seed, 3));
            auto res = dde::train_coordinator(rnn, adapter, set, tc);
            dde::save_checkpoint(out / "coord.ckpt", rnn.params(), rnn.metadata(extra));
            dde::save_checkpoint(out / "coord_ema.ckpt", res.ema, rnn.metadata(extra));
            write_atomic(out / "loss.csv", loss_csv(res.log));
            return;
        }
        cc.patch_h = 1;
        cc.patch_w = c.patch;
        cc.token_h = 1;
        cc.token_w = c.coord_token;
    }
    auto coord = dde::Coordinator<float>::init(cc, dde::derive_seed(c.seed, 3));
    auto res = dde::train_coordinator(coord, adapter, set, tc);
    dde::save_checkpoint(out / "coord.ckpt", coord.params(), coord.metadata(extra));
    dde::save_checkpoint(out / "coord_ema.ckpt", res.ema, coord.metadata(extra));
    write_atomic(out / "loss.csv", loss_csv(res.log));
}

void run_sample(const RunConfig& c, const fs::path& out) {
    const auto sampler = sampler_config(c);
    const auto seeds = dde::row_seeds(c.seed, c.n_samples);
    json manifest;
    manifest["task"] = c.task;
    manifest["L"] = c.L;
    manifest["w"] = c.w;
    manifest["steps"] = c.steps;
    manifest["churn"] = c.churn;
    manifest["n_samples"] = c.n_samples;
    manifest["seed"] = c.seed;
    manifest["seeds"] = seeds;
    manifest["base_ckpt"] = c.base_ckpt;
    manifest["coord_ckpt"] = c.coord_ckpt;
    manifest["data_seed"] = c.data_seed;
    manifest["data_size"] = c.data_size;

    dde::MatF samples;
    if (c.task == "gaussian-oracle") {
        auto data = oracle_data(c);
        if (c.base_ckpt.empty()) {
            manifest["method"] = "analytic";
            samples = dde::ode_sample<float>(dde::gaussian_optimal_denoiser(data), sampler, c.dim, seeds);
        } else {
            const auto base = load_base(c);
            check(base.config().dim == c.dim, "base checkpoint dimension does not match --dim");
            manifest["method"] = "base";
            samples = dde::ode_sample<float>([&](const dde::MatF& x, double s) { return base(x, s); }, sampler, c.dim,
                                             seeds);
        }
        manifest["dim"] = c.dim;
    } else {
        const auto method = dde::parse_method(c.method);
        manifest["method"] = dde::method_name(method);
        const auto base = load_base(c);
        std::optional<dde::Coordinator<float>> coord;
        std::optional<dde::RecurrentCoordinator<float>> rnn;
        if (method == dde::Method::dde || method == dde::Method::rnn) {
            check(!c.coord_ckpt.empty(), "method " + c.method + " needs --coord-ckpt");
            auto ck = dde::load_checkpoint<float>(c.coord_ckpt);
            if (ck.meta.count("kind") && ck.meta.at("kind") == "recurrent")
                rnn = dde::RecurrentCoordinator<float>::from_checkpoint(ck);
            else
                coord = dde::Coordinator<float>::from_checkpoint(ck);
            if (ck.meta.count("L_train")) manifest["L_train"] = std::stol(ck.meta.at("L_train"));
        }
        if (c.task == "bump2d") {
            check(!rnn, "the recurrent coordinator is only defined for the signal1d task");
            dde::ConditioningSampler cs;
            cs.squared = c.cond_distance == "squared";
            dde::Rng rng(dde::derive_seed(c.seed, 0x636f6e64ULL));
            dde::BumpSampleRequest req;
            req.method = method;
            req.L = c.L;
            req.w = c.w;
            req.sampler = sampler;
            req.seeds = seeds;
            json conds = json::array();
            for (long i = 0; i < c.n_samples; ++i) {
                req.conds.push_back(dde::sample_conditionings(c.L, rng, cs));
                json set = json::array();
                for (const auto& p : req.conds.back()) set.push_back({p.x, p.y});
                conds.push_back(set);
            }
            manifest["conditionings"] = conds;
            manifest["height"] = 16;
            manifest["width"] = 16;
            samples = dde::sample_bump(base, coord ? &*coord : nullptr, req);
            fs::create_directories(out / "images");
            for (long i = 0; i < samples.rows(); ++i) {
                char name[32];
                std::snprintf(name, sizeof name, "sample_%04ld.pgm", i);
                write_atomic(out / "images" / name, pgm(samples, i, 16, 16));
            }
        } else {
            const dde::SignalGeometry g{c.patch, c.stride};
            const long len = g.length(c.L);
            if (method == dde::Method::concat) (void)g.disjoint(len);  // reject before sampling
            check(method != dde::Method::rrr, "method rrr is not defined for the signal1d task");
            check(base.config().dim == c.patch, "base checkpoint patch length does not match --patch");
            manifest["patch"] = c.patch;
            manifest["stride"] = c.stride;
            manifest["signal_length"] = c.signal_length;
            const auto m = rnn ? dde::Method::rnn : method;
            samples = dde::sample_signal(m, base, coord ? &*coord : nullptr, rnn ? &*rnn : nullptr, g, c.L, sampler,
                                         seeds);
        }
    }
    write_atomic(out / "samples.csv", matrix_csv(samples));
    write_atomic(out / "manifest.json", manifest.dump(2) + "\n");
}

std::vector<dde::MetricRow> eval_run(const fs::path& dir) {
    const json m = json::parse(read_file(dir / "manifest.json"));
    const dde::MatD s = read_matrix_csv(dir / "samples.csv");
    const long n = m.at("n_samples").get<long>();
    check(s.rows() == n, dir.string() + ": manifest lists " + std::to_string(n) + " samples, samples.csv has " +
                             std::to_string(s.rows()));
    const std::string task = m.at("task"), method = m.at("method");
    const long L = m.at("L").get<long>();
    const auto seed = m.at("seed").get<std::uint64_t>();
    std::vector<dde::MetricRow> rows;
    auto add = [&](const std::string& metric, double v) { rows.push_back({method, L, seed, metric, v}); };
    if (task == "bump2d") {
        const long h = m.at("height").get<long>(), w = m.at("width").get<long>();
        check(s.cols() == h * w, dir.string() + ": sample width does not match the image size");
        std::vector<std::vector<dde::Position>> conds;
        for (const auto& set : m.at("conditionings")) {
            std::vector<dde::Position> v;
            for (const auto& p : set) v.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
            check(static_cast<long>(v.size()) == L, dir.string() + ": conditioning set size != L");
            conds.push_back(std::move(v));
        }
        check(static_cast<long>(conds.size()) == n, dir.string() + ": conditioning count != samples");
        add("accuracy", dde::accuracy_eval(s, h, w, conds, dde::ConstraintOracle{}));
    } else if (task == "signal1d") {
        const long patch = m.at("patch").get<long>();
        add("seam_ratio", dde::seam_ratio(s, patch));
        RunConfig rc;
        rc.data_seed = m.at("data_seed").get<std::uint64_t>();
        rc.data_size = m.at("data_size").get<long>();
        rc.signal_length = m.at("signal_length").get<long>();
        const dde::FeatureProjector proj(s.cols(), 0x66656174ULL);
        if (s.cols() <= rc.signal_length && n >= 2 * proj.feature_dim()) {
            const auto ds = signal_data(rc);
            dde::Rng rng(dde::derive_seed(rc.data_seed, 3));
            const dde::MatD ref = dde::slice_windows(ds, s.cols(), n, rng);
            const auto fr = dde::frechet_feature_distance(s, ref, proj);
            add("frechet", fr.distance);
            add("frechet_regularized", fr.regularized ? 1.0 : 0.0);
        } else {
            std::cerr << "eval: skipping frechet for " << dir << " (needs >= " << 2 * proj.feature_dim()
                      << " samples no longer than the reference signals)\n";
        }
    } else {
        RunConfig rc;
        rc.data_seed = m.at("data_seed").get<std::uint64_t>();
        rc.dim = m.at("dim").get<long>();
        check(s.cols() == rc.dim, dir.string() + ": sample width does not match dim");
        const auto e = dde::moment_errors(s, oracle_data(rc));
        add("mean_abs_err", e.max_mean_abs);
        add("var_rel_err", e.max_var_rel);
    }
    return rows;
}

void run_eval(const RunConfig& c, const fs::path& out) {
    check(!c.runs.empty(), "eval needs at least one --run directory");
    std::vector<dde::MetricRow> rows;
    for (const auto& r : c.runs) {
        auto more = eval_run(r);
        rows.insert(rows.end(), more.begin(), more.end());
    }
    write_atomic(out / "metrics.csv", dde::metrics_csv(rows));
}

void run_compare(const RunConfig& c, const fs::path& out) {
    check(!c.inputs.empty(), "compare needs at least one --input metrics CSV");
    // (L, metric) -> method -> (sum, count)
    std::map<std::pair<long, std::string>, std::map<std::string, std::pair<double, long>>> table;
    std::set<std::string> methods;
    for (const auto& path : c.inputs) {
        std::istringstream is(read_file(path));
        std::string line;
        std::getline(is, line);
        check(line == "method,L,seed,metric,value", path + ": not a metrics CSV");
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            std::stringstream ls(line);
            std::string method, L, seed, metric, value;
            std::getline(ls, method, ',');
            std::getline(ls, L, ',');
            std::getline(ls, seed, ',');
            std::getline(ls, metric, ',');
            std::getline(ls, value, ',');
            auto& cell = table[{std::stol(L), metric}][method];
            cell.first += std::stod(value);
            cell.second += 1;
            methods.insert(method);
        }
    }
    std::string s = "L,metric";
    for (const auto& m : methods) s += "," + m;
    s += "\n";
    for (const auto& [key, row] : table) {
        s += std::to_string(key.first) + "," + key.second;
        for (const auto& m : methods) {
            s += ",";
            auto it = row.find(m);
            if (it != row.end()) s += dde::format_value(it->second.first / static_cast<double>(it->second.second));
        }
        s += "\n";
    }
    write_atomic(out / "compare.csv", s);
    std::cout << s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Coordinated patch diffusion: train, sample, evaluate"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::string> task, out, method, base_ckpt, coord_ckpt, coord_arch, cond_distance;
    std::optional<std::uint64_t> seed, data_seed;
    std::optional<long> L, L_train, steps, n_samples, epochs, N, data_size;
    std::optional<double> w, churn, lr;
    std::vector<std::string> runs, inputs;

    for (const char* name : {"train-base", "train-coord", "sample", "eval", "compare"}) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "JSON config file; flags override its values");
        sub->add_option("--task", task, "signal1d | bump2d | gaussian-oracle");
        sub->add_option("--seed", seed, "run seed");
        sub->add_option("--data-seed", data_seed, "dataset seed");
        sub->add_option("--data-size", data_size, "dataset size");
        sub->add_option("--out", out, "output directory (relative paths resolve against $DDE_OUTPUT_ROOT)");
        sub->add_option("--method", method, "dde | multidiffusion | concat | rrr | rnn");
        sub->add_option("--L", L, "conditionings (bump2d) or patches (signal1d) at sampling time");
        sub->add_option("--N", N, "signal length at sampling time; overrides --L");
        sub->add_option("--L-train", L_train, "conditionings or patches per training example");
        sub->add_option("--w", w, "guidance weight (RRR weight for --method rrr)");
        sub->add_option("--steps", steps, "sampler steps");
        sub->add_option("--churn", churn, "sampler churn");
        sub->add_option("--n-samples", n_samples, "samples to draw");
        sub->add_option("--epochs", epochs, "training epochs");
        sub->add_option("--lr", lr, "learning rate");
        sub->add_option("--base-ckpt", base_ckpt, "base model checkpoint");
        sub->add_option("--coord-ckpt", coord_ckpt, "coordinator checkpoint");
        sub->add_option("--coord-arch", coord_arch, "transformer | rnn");
        sub->add_option("--cond-distance", cond_distance, "euclidean | squared");
        sub->add_option("--run", runs, "sample directory to evaluate (repeatable)");
        sub->add_option("--input", inputs, "metrics CSV to compare (repeatable)");
    }
    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig c;
        if (!config_path.empty()) c = nlohmann::json::parse(read_file(config_path)).get<RunConfig>();
        c.stage = app.get_subcommands().front()->get_name();
        if (task) c.task = *task;
        if (seed) c.seed = *seed;
        if (data_seed) c.data_seed = *data_seed;
        if (data_size) c.data_size = *data_size;
        if (out) c.out = *out;
        if (method) c.method = *method;
        if (L) c.L = *L;
        if (N) c.N = *N;
        if (L_train) c.L_train = *L_train;
        if (w) c.w = *w;
        if (steps) c.steps = *steps;
        if (churn) c.churn = *churn;
        if (n_samples) c.n_samples = *n_samples;
        if (epochs) c.epochs = *epochs;
        if (lr) c.lr = *lr;
        if (base_ckpt) c.base_ckpt = *base_ckpt;
        if (coord_ckpt) c.coord_ckpt = *coord_ckpt;
        if (coord_arch) c.coord_arch = *coord_arch;
        if (cond_distance) c.cond_distance = *cond_distance;
        if (!runs.empty()) c.runs = runs;
        if (!inputs.empty()) c.inputs = inputs;
        resolve_defaults(c);
        if (c.stage == "train-coord") check(!c.base_ckpt.empty(), "train-coord refuses to run without --base-ckpt");

        const fs::path dir = resolve_out(c);
        fs::create_directories(dir);
        write_atomic(dir / "config.json", nlohmann::json(c).dump(2) + "\n");

        if (c.stage == "train-base") run_train_base(c, dir);
        else if (c.stage == "train-coord") run_train_coord(c, dir);
        else if (c.stage == "sample") run_sample(c, dir);
        else if (c.stage == "eval") run_eval(c, dir);
        else run_compare(c, dir);
        std::cerr << c.stage << ": wrote " << dir.string() << "\n";
        return 0;
    } catch (const dde::NumericalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
