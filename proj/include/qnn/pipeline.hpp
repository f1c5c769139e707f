#pragma once

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qnn/bitkernel.hpp"
#include "qnn/dataset.hpp"
#include "qnn/distill.hpp"
#include "qnn/model_io.hpp"
#include "qnn/slim.hpp"
#include "qnn/trainer.hpp"

namespace qnn::pipeline {

namespace fs = std::filesystem;

// ---- configuration ----

struct DatasetConfig {
    std::string id = "stripes";  // stripes | blobs | spirals | idx | csv
    std::string path;            // csv file, or idx file prefix
    std::string train_images, train_labels, test_images, test_labels;  // explicit idx files
    std::size_t classes = 4;
    std::size_t train_n = 1024, test_n = 1024;
    std::size_t image_size = 8;
    double noise = 0.6;
    double spread = 0.25;
    double test_fraction = 0.25;  // csv split
    std::uint64_t seed = 7;
    std::size_t crop_pad = 0;
    bool mirror = false;
    std::size_t limit = 0;  // idx: cap sample count
};

struct ModelConfig {
    std::string template_id = "toy_resnet";  // toy_resnet | small_cnn
    std::size_t base_width = 4;
    std::size_t blocks_per_stage = 2;
    int weight_bits = 1;
    int act_bits = 1;
    double bn_gamma_init = 0.5;
};

struct TrainSettings {
    std::size_t epochs = 20;
    std::size_t batch = 32;
    double lr = 0.1;
    double weight_decay = 5e-5;
    double momentum = 0.9;
    std::vector<std::size_t> lr_drops;
    bool freeze_except_bn = false;
};

struct DistillSettings {
    bool enabled = false;
    double tau = 10.0;
    double mu = 0.2;
    std::string teacher;  // model file; empty means train a full-precision teacher
};

struct ExperimentConfig {
    DatasetConfig dataset;
    ModelConfig model;
    std::vector<double> widths = {1, 2};
    std::vector<int> bits = {1};           // sweep bit-widths (weights and activations)
    std::vector<double> lambdas = {1e-4, 1e-3, 1e-2};
    double lambda = 1e-3;                  // full-pipeline sparsity weight
    double threshold = 0.01;
    DistillSettings distill;
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    TrainSettings train;
    TrainSettings retrain_settings;
    std::string out_dir = "qnn_out";

    void validate() const {
        if (seeds.empty()) throw ConfigError("config: seeds must be non-empty");
        if (widths.empty()) throw ConfigError("config: widths must be non-empty");
        if (dataset.id == "csv" && !fs::exists(dataset.path))
            throw ConfigError("config: csv file does not exist: " + dataset.path);
        if (dataset.id == "idx") {
            for (const std::string& p : {dataset.train_images, dataset.train_labels,
                                         dataset.test_images, dataset.test_labels})
                if (!fs::exists(p)) throw ConfigError("config: idx file does not exist: " + p);
        }
        if (!distill.teacher.empty() && !fs::exists(distill.teacher))
            throw ConfigError("config: teacher model does not exist: " + distill.teacher);
    }
};

namespace detail {

template <typename T>
void opt(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline TrainSettings train_from_json(const nlohmann::json& j, TrainSettings base) {
    opt(j, "epochs", base.epochs);
    opt(j, "batch", base.batch);
    opt(j, "lr", base.lr);
    opt(j, "weight_decay", base.weight_decay);
    opt(j, "momentum", base.momentum);
    opt(j, "lr_drops", base.lr_drops);
    opt(j, "freeze_except_bn", base.freeze_except_bn);
    return base;
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        detail::opt(d, "id", c.dataset.id);
        detail::opt(d, "path", c.dataset.path);
        detail::opt(d, "train_images", c.dataset.train_images);
        detail::opt(d, "train_labels", c.dataset.train_labels);
        detail::opt(d, "test_images", c.dataset.test_images);
        detail::opt(d, "test_labels", c.dataset.test_labels);
        detail::opt(d, "classes", c.dataset.classes);
        detail::opt(d, "train_n", c.dataset.train_n);
        detail::opt(d, "test_n", c.dataset.test_n);
        detail::opt(d, "image_size", c.dataset.image_size);
        detail::opt(d, "noise", c.dataset.noise);
        detail::opt(d, "spread", c.dataset.spread);
        detail::opt(d, "test_fraction", c.dataset.test_fraction);
        detail::opt(d, "seed", c.dataset.seed);
        detail::opt(d, "crop_pad", c.dataset.crop_pad);
        detail::opt(d, "mirror", c.dataset.mirror);
        detail::opt(d, "limit", c.dataset.limit);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::opt(m, "template", c.model.template_id);
        detail::opt(m, "base_width", c.model.base_width);
        detail::opt(m, "blocks_per_stage", c.model.blocks_per_stage);
        detail::opt(m, "weight_bits", c.model.weight_bits);
        detail::opt(m, "act_bits", c.model.act_bits);
        detail::opt(m, "bn_gamma_init", c.model.bn_gamma_init);
    }
    detail::opt(j, "widths", c.widths);
    detail::opt(j, "bits", c.bits);
    detail::opt(j, "lambdas", c.lambdas);
    detail::opt(j, "lambda", c.lambda);
    detail::opt(j, "threshold", c.threshold);
    if (j.contains("distill")) {
        const auto& d = j.at("distill");
        detail::opt(d, "enabled", c.distill.enabled);
        detail::opt(d, "tau", c.distill.tau);
        detail::opt(d, "mu", c.distill.mu);
        detail::opt(d, "teacher", c.distill.teacher);
    }
    detail::opt(j, "seeds", c.seeds);
    if (j.contains("train")) c.train = detail::train_from_json(j.at("train"), c.train);
    c.retrain_settings = c.train;
    if (j.contains("retrain")) c.retrain_settings = detail::train_from_json(j.at("retrain"), c.train);
    detail::opt(j, "out_dir", c.out_dir);
    // environment override for the output root
    if (const char* root = std::getenv("QNN_OUT_ROOT"))
        c.out_dir = (fs::path(root) / fs::path(c.out_dir).filename()).string();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse: " + std::string(e.what()));
    }
    ExperimentConfig c = config_from_json(j);
    c.validate();
    return c;
}

// ---- dataset ingestion ----

inline Dataset load_dataset(const DatasetConfig& d) {
    Dataset out;
    if (d.id == "blobs") {
        out = make_blobs(d.classes, d.train_n, d.test_n, static_cast<real>(d.spread), d.seed);
    } else if (d.id == "spirals") {
        out = make_spirals(d.train_n, d.test_n, static_cast<real>(d.noise), d.seed);
    } else if (d.id == "stripes") {
        out = make_stripes(d.classes, d.train_n, d.test_n, d.image_size,
                           static_cast<real>(d.noise), d.seed);
    } else if (d.id == "idx") {
        out.train_x = load_idx_images(d.train_images, d.limit);
        out.train_y = load_idx_labels(d.train_labels, d.limit);
        out.test_x = load_idx_images(d.test_images, d.limit);
        out.test_y = load_idx_labels(d.test_labels, d.limit);
        out.images = true;
        int mx = 0;
        for (int y : out.train_y) mx = std::max(mx, y);
        out.classes = static_cast<std::size_t>(mx) + 1;
        // standardize per channel with train-split statistics
        const std::size_t c = out.train_x.dim(1);
        const std::size_t spatial = out.train_x.dim(2) * out.train_x.dim(3);
        out.norm_mean = Tensor({c}, 0);
        out.norm_std = Tensor({c}, 1);
        for (std::size_t ic = 0; ic < c; ++ic) {
            double mu = 0, var = 0;
            const std::size_t n = out.train_x.dim(0);
            for (std::size_t in = 0; in < n; ++in)
                for (std::size_t s = 0; s < spatial; ++s)
                    mu += out.train_x[(in * c + ic) * spatial + s];
            mu /= static_cast<double>(n * spatial);
            for (std::size_t in = 0; in < n; ++in)
                for (std::size_t s = 0; s < spatial; ++s) {
                    const double dv = out.train_x[(in * c + ic) * spatial + s] - mu;
                    var += dv * dv;
                }
            var /= static_cast<double>(n * spatial);
            out.norm_mean[ic] = static_cast<real>(mu);
            out.norm_std[ic] = static_cast<real>(std::sqrt(var) > 1e-8 ? std::sqrt(var) : 1.0);
        }
        auto apply = [&](Tensor& x) {
            const std::size_t n = x.dim(0);
            for (std::size_t in = 0; in < n; ++in)
                for (std::size_t ic = 0; ic < c; ++ic)
                    for (std::size_t s = 0; s < spatial; ++s) {
                        real& v = x[(in * c + ic) * spatial + s];
                        v = (v - out.norm_mean[ic]) / out.norm_std[ic];
                    }
        };
        apply(out.train_x);
        apply(out.test_x);
    } else if (d.id == "csv") {
        Tensor x;
        std::vector<int> y;
        std::size_t classes = 0;
        load_csv(d.path, x, y, classes);
        // deterministic shuffled split
        Rng rng(derive_seed(d.seed, "csv-split"));
        std::vector<std::size_t> order(y.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size() - 1; i > 0; --i)
            std::swap(order[i], order[rng.below(i + 1)]);
        const std::size_t test_n =
            static_cast<std::size_t>(static_cast<double>(y.size()) * d.test_fraction);
        const std::size_t train_n = y.size() - test_n;
        const std::size_t cols = x.dim(1);
        out.train_x = Tensor({train_n, cols});
        out.test_x = Tensor({test_n, cols});
        out.train_y.resize(train_n);
        out.test_y.resize(test_n);
        for (std::size_t i = 0; i < train_n; ++i) {
            for (std::size_t c = 0; c < cols; ++c) out.train_x(i, c) = x(order[i], c);
            out.train_y[i] = y[order[i]];
        }
        for (std::size_t i = 0; i < test_n; ++i) {
            for (std::size_t c = 0; c < cols; ++c) out.test_x(i, c) = x(order[train_n + i], c);
            out.test_y[i] = y[order[train_n + i]];
        }
        out.classes = classes;
    } else {
        throw ConfigError("unknown dataset id: " + d.id);
    }
    out.crop_pad = d.crop_pad;
    out.mirror = d.mirror;
    out.check();
    return out;
}

inline ModelSpec build_template(const ModelConfig& m, std::size_t in_channels, std::size_t classes,
                                double width, int weight_bits, int act_bits) {
    const auto base = static_cast<std::size_t>(
        std::max<long long>(1, std::llround(m.base_width * width)));
    if (m.template_id == "small_cnn")
        return small_cnn_spec(in_channels, classes, base, weight_bits, act_bits);
    if (m.template_id == "toy_resnet")
        return toy_resnet_spec(in_channels, classes, base, weight_bits, act_bits,
                               m.blocks_per_stage);
    throw ConfigError("unknown model template: " + m.template_id);
}

inline TrainConfig to_train_config(const TrainSettings& t, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.epochs = t.epochs;
    cfg.batch = t.batch;
    cfg.sgd.lr = static_cast<real>(t.lr);
    cfg.sgd.weight_decay = static_cast<real>(t.weight_decay);
    cfg.sgd.momentum = static_cast<real>(t.momentum);
    cfg.lr_drops = t.lr_drops;
    cfg.freeze_except_bn = t.freeze_except_bn;
    cfg.seed = seed;
    return cfg;
}

// ---- width sweep (Table-2-style grid) ----

struct SweepRow {
    int bits = 32;
    double width = 1;
    std::size_t params = 0;
    std::vector<double> accs;  // one per seed

    double mean_acc() const {
        double s = 0;
        for (double a : accs) s += a;
        return accs.empty() ? 0 : s / static_cast<double>(accs.size());
    }
};

inline std::vector<SweepRow> run_width_sweep(const ExperimentConfig& cfg,
                                             std::ostream* log = nullptr) {
    Dataset data = load_dataset(cfg.dataset);
    const std::size_t in_c = data.train_x.dim(1);
    std::vector<SweepRow> rows;
    for (int bits : cfg.bits)
        for (double width : cfg.widths) {
            SweepRow row;
            row.bits = bits;
            row.width = width;
            ModelSpec spec = build_template(cfg.model, in_c, data.classes, width, bits, bits);
            row.params = count_params(spec);
            for (std::uint64_t seed : cfg.seeds) {
                const std::uint64_t cell_seed = derive_seed(
                    seed, "sweep/bits=" + std::to_string(bits) + "/w=" + std::to_string(width));
                Model model(spec, ModelInit{cell_seed, static_cast<real>(cfg.model.bn_gamma_init)});
                train(model, data, to_train_config(cfg.train, cell_seed));
                const double acc = evaluate(model, data.test_x, data.test_y);
                row.accs.push_back(acc);
                if (log)
                    *log << "sweep bits=" << bits << " width=" << width << " seed=" << seed
                         << " acc=" << acc << "\n";
            }
            rows.push_back(std::move(row));
        }
    return rows;
}

inline void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot open " + path + " for writing");
    os << "bits,width,paras(M),accuracy\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%g,%.6f,%.4f\n", r.bits, r.width, r.params / 1e6,
                      100.0 * r.mean_acc());
        os << buf;
    }
}

// ---- full pipeline: widen -> sparse train -> prune -> reconcile -> retrain ----

namespace detail {

// Failures halt with the stage name attached; state already written to the
// stage directories is what a rerun resumes from.
template <typename F>
void run_stage(const char* name, F&& body) {
    try {
        body();
    } catch (const NumericError& e) {
        throw NumericError("stage " + std::string(name) + ": " + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError("stage " + std::string(name) + ": " + e.what());
    } catch (const std::exception& e) {
        throw Error("stage " + std::string(name) + ": " + e.what());
    }
}

inline bool stage_done(const fs::path& dir) { return fs::exists(dir / "done"); }

inline void mark_done(const fs::path& dir) {
    std::ofstream os(dir / "done");
    os << "ok\n";
}

inline void write_text(const fs::path& p, const std::string& text) {
    std::ofstream os(p);
    if (!os) throw ConfigError("cannot open " + p.string() + " for writing");
    os << text;
}

inline nlohmann::json read_json(const fs::path& p) {
    std::ifstream is(p);
    if (!is) throw ConfigError("cannot open " + p.string());
    nlohmann::json j;
    is >> j;
    return j;
}

}  // namespace detail

struct SeedOutcome {
    std::uint64_t seed = 0;
    double acc_baseline = -1;  // width-1 full-precision reference (teacher when KD is on)
    slim::PruneReport report;
    nlohmann::json bench;
};

struct PipelineResult {
    std::vector<SeedOutcome> outcomes;
    nlohmann::json report;
    std::string report_json_path, report_csv_path;
};

// Per-layer packed-vs-float benchmark of the 1-bit convolutions. Memory
// numbers are exact and deterministic; wall-clock timings are returned
// separately so deterministic artifacts stay byte-stable.
struct BenchOutcome {
    nlohmann::json memory;   // deterministic
    std::string timing_text; // measured, excluded from reports
};

inline BenchOutcome run_bench(Model& model, Shape input_shape, std::size_t repeats) {
    BenchOutcome out;
    out.memory["layers"] = nlohmann::json::array();
    std::ostringstream timing;
    timing << "layer  repeats  float_ms  packed_ms  speedup  Mops_float  Mops_packed\n";

    Rng rng(123);
    std::size_t h = input_shape.at(2), w = input_shape.at(3);
    std::size_t chans = input_shape.at(1);
    std::size_t total_packed = 0, total_float32 = 0;

    const auto& units = model.units();
    for (std::size_t i = 0; i < units.size(); ++i) {
        const auto& u = units[i];
        const LayerSpec& l = u.spec;
        struct ConvSite {
            const ConvUnit* cu;
            std::size_t in_c, out_c, kernel, stride, pad;
        };
        std::vector<ConvSite> sites;
        if (l.kind == LayerKind::Conv && u.conv)
            sites.push_back({&*u.conv, l.in_channels, l.out_channels, l.kernel, l.stride, l.pad});
        if (l.kind == LayerKind::ResidualBlock) {
            sites.push_back({&*u.conv1, l.in_channels, l.mid(), l.kernel, l.stride, l.pad});
            sites.push_back({&*u.conv2, l.mid(), l.out_channels, l.kernel, 1, l.pad});
        }
        for (const auto& site : sites) {
            if (l.weight_bits != 1) {
                timing << "layer " << i << ": skipped (weight_bits=" << l.weight_bits << ")\n";
                continue;
            }
            ConvGeom g{site.in_c, h, w, site.kernel, site.stride, site.pad};
            auto bin = quant::binarize_weights(site.cu->w.value, quant::Granularity::PerFilter);
            auto packed = bitkernel::pack_filters(bin.codes, bin.alpha);
            auto fp = bitkernel::footprint(site.out_c, g.patch_len());
            total_packed += fp.packed_bytes;
            total_float32 += fp.float32_bytes;
            out.memory["layers"].push_back({{"layer", i},
                                            {"out_channels", site.out_c},
                                            {"patch_len", g.patch_len()},
                                            {"packed_bytes", fp.packed_bytes},
                                            {"float32_bytes", fp.float32_bytes}});
            if (repeats > 0) {
                Tensor x({1, site.in_c, h, w});
                for (std::size_t k = 0; k < x.size(); ++k) x[k] = rng.coin() ? real(1) : real(-1);
                Tensor scaled = bin.codes;
                for (std::size_t f = 0; f < site.out_c; ++f)
                    for (std::size_t k = 0; k < scaled.size() / site.out_c; ++k)
                        scaled[f * (scaled.size() / site.out_c) + k] *= bin.alpha[f];
                const std::size_t macs = g.out_h() * g.out_w() * site.out_c * g.patch_len();

                auto t0 = std::chrono::steady_clock::now();
                for (std::size_t r = 0; r < repeats; ++r) {
                    Tensor cols = im2col(x, g);
                    Tensor f2 = scaled.reshaped({site.out_c, g.patch_len()});
                    Tensor y = matmul(cols, transpose(f2));
                    (void)y;
                }
                auto t1 = std::chrono::steady_clock::now();
                for (std::size_t r = 0; r < repeats; ++r) {
                    Tensor y = bitkernel::binary_conv2d(x, packed, g,
                                                        bitkernel::ActDomain::PlusMinusOne);
                    (void)y;
                }
                auto t2 = std::chrono::steady_clock::now();
                const double ms_f = std::chrono::duration<double, std::milli>(t1 - t0).count();
                const double ms_p = std::chrono::duration<double, std::milli>(t2 - t1).count();
                char buf[256];
                std::snprintf(buf, sizeof buf, "%-6zu %-8zu %-9.3f %-10.3f %-8.2f %-11.1f %-11.1f\n",
                              i, repeats, ms_f, ms_p, ms_p > 0 ? ms_f / ms_p : 0.0,
                              2.0 * macs * repeats / (ms_f * 1e3),
                              2.0 * macs * repeats / (ms_p * 1e3));
                timing << buf;
            }
        }
        // propagate spatial dims
        if (l.kind == LayerKind::Conv || l.kind == LayerKind::ResidualBlock) {
            ConvGeom g{l.in_channels, h, w, l.kernel, l.stride, l.pad};
            h = g.out_h();
            w = g.out_w();
            chans = l.out_channels;
        } else if (l.kind == LayerKind::Pool) {
            if (l.kernel == 0) {
                h = w = 1;
            } else {
                h /= l.kernel;
                w /= l.kernel;
            }
        }
    }
    (void)chans;
    out.memory["total_packed_bytes"] = total_packed;
    out.memory["total_float32_bytes"] = total_float32;
    out.memory["compression_vs_float32"] =
        total_packed ? static_cast<double>(total_float32) / static_cast<double>(total_packed) : 0.0;
    out.timing_text = timing.str();
    return out;
}

inline PipelineResult run_full_pipeline(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
    cfg.validate();
    const fs::path root(cfg.out_dir);
    fs::create_directories(root);
    Dataset data = load_dataset(cfg.dataset);
    const std::size_t in_c = data.train_x.dim(1);

    PipelineResult result;
    auto say = [&](const std::string& s) {
        if (log) *log << s << "\n";
    };

    for (std::uint64_t seed : cfg.seeds) {
        SeedOutcome outcome;
        outcome.seed = seed;
        const fs::path sdir = root / ("seed_" + std::to_string(seed));
        fs::create_directories(sdir);

        // -- stage 1: widen --
        const fs::path d1 = sdir / "01_widen";
        ModelSpec widened;
        detail::run_stage("widen", [&] {
            fs::create_directories(d1);
            const double width = cfg.widths.back();
            if (!detail::stage_done(d1)) {
                ModelSpec base = build_template(cfg.model, in_c, data.classes, 1.0,
                                                cfg.model.weight_bits, cfg.model.act_bits);
                widened = slim::widen(base, width);
                detail::write_text(d1 / "spec.json", widened.to_json().dump(2));
                detail::mark_done(d1);
                say("stage widen: done (width=" + std::to_string(width) + ")");
            } else {
                widened = ModelSpec::from_json(detail::read_json(d1 / "spec.json"));
                say("stage widen: resumed");
            }
        });

        // -- stage 2: sparse training --
        const fs::path d2 = sdir / "02_train_sparse";
        Model sparse_model;
        double acc_before = -1;
        detail::run_stage("train_sparse", [&] {
            fs::create_directories(d2);
            if (!detail::stage_done(d2)) {
                Model model(widened, ModelInit{derive_seed(seed, "init"),
                                               static_cast<real>(cfg.model.bn_gamma_init)});
                TrainConfig tc = to_train_config(cfg.train, derive_seed(seed, "train_sparse"));
                slim::train_sparse(model, data, static_cast<real>(cfg.lambda), tc);
                acc_before = evaluate(model, data.test_x, data.test_y);
                save_model(model, (d2 / "model.qnnf").string());
                detail::write_text(d2 / "metrics.json",
                                   nlohmann::json{{"acc_before", acc_before}}.dump(2));
                detail::mark_done(d2);
                sparse_model = std::move(model);
                say("stage train_sparse: done (acc_O=" + std::to_string(acc_before) + ")");
            } else {
                sparse_model = load_model((d2 / "model.qnnf").string());
                acc_before = detail::read_json(d2 / "metrics.json").at("acc_before").get<double>();
                say("stage train_sparse: resumed");
            }
        });

        // -- stage 3: prune + acc_P --
        const fs::path d3 = sdir / "03_prune";
        slim::PruneResult pruned;
        detail::run_stage("prune", [&] {
            fs::create_directories(d3);
            if (!detail::stage_done(d3)) {
                pruned = slim::prune(sparse_model, static_cast<real>(cfg.threshold));
                pruned.report.acc_before = acc_before;
                Model zeroed = slim::zero_pruned(sparse_model, pruned.report);
                pruned.report.acc_zeroed = evaluate(zeroed, data.test_x, data.test_y);
                detail::write_text(d3 / "pruned_spec.json", pruned.spec.to_json().dump(2));
                detail::write_text(d3 / "prune_report.json", pruned.report.to_json().dump(2));
                detail::mark_done(d3);
                say("stage prune: done (ratio=" + std::to_string(pruned.report.ratio) + ")");
            } else {
                pruned.spec = ModelSpec::from_json(detail::read_json(d3 / "pruned_spec.json"));
                pruned.report =
                    slim::PruneReport::from_json(detail::read_json(d3 / "prune_report.json"));
                say("stage prune: resumed");
            }
        });

        // -- stage 4: residual reconciliation --
        const fs::path d4 = sdir / "04_reconcile";
        ModelSpec reconciled;
        detail::run_stage("reconcile", [&] {
            fs::create_directories(d4);
            if (!detail::stage_done(d4)) {
                reconciled = slim::reconcile_residual(pruned.spec, widened, pruned.report);
                detail::write_text(d4 / "reconciled_spec.json", reconciled.to_json().dump(2));
                detail::write_text(d4 / "prune_report.json", pruned.report.to_json().dump(2));
                detail::mark_done(d4);
                say("stage reconcile: done");
            } else {
                reconciled =
                    ModelSpec::from_json(detail::read_json(d4 / "reconciled_spec.json"));
                pruned.report =
                    slim::PruneReport::from_json(detail::read_json(d4 / "prune_report.json"));
                say("stage reconcile: resumed");
            }
        });

        // -- stage 5: teacher (only when distilling) --
        const fs::path d5 = sdir / "05_teacher";
        Tensor teacher_logits;
        if (cfg.distill.enabled) detail::run_stage("teacher", [&] {
            fs::create_directories(d5);
            if (!detail::stage_done(d5)) {
                Model teacher;
                if (!cfg.distill.teacher.empty()) {
                    teacher = load_model(cfg.distill.teacher);
                } else {
                    ModelSpec tspec =
                        build_template(cfg.model, in_c, data.classes, 1.0, 32, 32);
                    teacher = Model(tspec, ModelInit{derive_seed(seed, "teacher-init"), real(1)});
                    TrainConfig tc = to_train_config(cfg.train, derive_seed(seed, "teacher"));
                    train(teacher, data, tc);
                }
                outcome.acc_baseline = evaluate(teacher, data.test_x, data.test_y);
                teacher_logits = predict_logits(teacher, data.train_x);
                save_model(teacher, (d5 / "teacher.qnnf").string());
                distill::save_logits((d5 / "teacher_logits.bin").string(), teacher_logits);
                detail::write_text(d5 / "metrics.json",
                                   nlohmann::json{{"acc_teacher", outcome.acc_baseline}}.dump(2));
                detail::mark_done(d5);
                say("stage teacher: done (acc=" + std::to_string(outcome.acc_baseline) + ")");
            } else {
                teacher_logits = distill::load_logits((d5 / "teacher_logits.bin").string());
                outcome.acc_baseline =
                    detail::read_json(d5 / "metrics.json").at("acc_teacher").get<double>();
                say("stage teacher: resumed");
            }
        });

        // -- stage 6: retrain (fresh init, mandatory after reconciliation) --
        const fs::path d6 = sdir / "06_retrain";
        Model final_model;
        detail::run_stage("retrain", [&] {
            fs::create_directories(d6);
            if (!detail::stage_done(d6)) {
                TrainConfig tc = to_train_config(cfg.retrain_settings, derive_seed(seed, "retrain"));
                if (cfg.distill.enabled) {
                    tc.teacher_logits = &teacher_logits;
                    tc.tau = static_cast<real>(cfg.distill.tau);
                    tc.mu = static_cast<real>(cfg.distill.mu);
                }
                auto [model, acc] = slim::retrain(reconciled, data, tc,
                                                  static_cast<real>(cfg.model.bn_gamma_init));
                pruned.report.acc_retrained = acc;
                save_model(model, (d6 / "model.qnnf").string());
                detail::write_text(d6 / "metrics.json",
                                   nlohmann::json{{"acc_retrained", acc}}.dump(2));
                detail::mark_done(d6);
                final_model = std::move(model);
                say("stage retrain: done (acc_R=" + std::to_string(acc) + ")");
            } else {
                final_model = load_model((d6 / "model.qnnf").string());
                pruned.report.acc_retrained =
                    detail::read_json(d6 / "metrics.json").at("acc_retrained").get<double>();
                say("stage retrain: resumed");
            }
        });

        // -- stage 7: bench --
        const fs::path d7 = sdir / "07_bench";
        detail::run_stage("bench", [&] {
            fs::create_directories(d7);
            if (!detail::stage_done(d7)) {
                Shape in_shape = data.images
                                     ? Shape{1, data.train_x.dim(1), data.train_x.dim(2),
                                             data.train_x.dim(3)}
                                     : Shape{1, data.train_x.dim(1), 1, 1};
                BenchOutcome bench = data.images
                                         ? run_bench(final_model, in_shape, 3)
                                         : BenchOutcome{};
                detail::write_text(d7 / "bench.json", bench.memory.dump(2));
                detail::write_text(d7 / "bench_timing.txt", bench.timing_text);
                detail::mark_done(d7);
                outcome.bench = bench.memory;
                say("stage bench: done");
            } else {
                outcome.bench = detail::read_json(d7 / "bench.json");
                say("stage bench: resumed");
            }
        });

        outcome.report = pruned.report;
        result.outcomes.push_back(std::move(outcome));
    }

    // -- consolidated report --
    nlohmann::json per_seed = nlohmann::json::array();
    double mean_o = 0, mean_p = 0, mean_r = 0, mean_ratio = 0;
    for (const auto& oc : result.outcomes) {
        per_seed.push_back({{"seed", oc.seed},
                            {"acc_before", oc.report.acc_before},
                            {"acc_zeroed", oc.report.acc_zeroed},
                            {"acc_retrained", oc.report.acc_retrained},
                            {"ratio", oc.report.ratio},
                            {"params_before", oc.report.params_before},
                            {"params_after", oc.report.params_after},
                            {"acc_teacher", oc.acc_baseline},
                            {"bench", oc.bench}});
        mean_o += oc.report.acc_before;
        mean_p += oc.report.acc_zeroed;
        mean_r += oc.report.acc_retrained;
        mean_ratio += oc.report.ratio;
    }
    const double ns = static_cast<double>(result.outcomes.size());
    char summary[256];
    const auto& first = result.outcomes.front().report;
    std::snprintf(summary, sizeof summary,
                  "pruned %d-bit model keeps %.1f%% of the widened parameters and reaches "
                  "%.2f%% after retraining (%.2f%% before pruning, %.2f%% with pruned channels "
                  "zeroed)",
                  cfg.model.weight_bits,
                  100.0 * static_cast<double>(first.params_after) /
                      static_cast<double>(first.params_before),
                  100 * mean_r / ns, 100 * mean_o / ns, 100 * mean_p / ns);
    result.report = {{"lambda", cfg.lambda},
                     {"threshold", cfg.threshold},
                     {"width", cfg.widths.back()},
                     {"weight_bits", cfg.model.weight_bits},
                     {"act_bits", cfg.model.act_bits},
                     {"distill", cfg.distill.enabled},
                     {"summary", summary},
                     {"seeds", per_seed},
                     {"mean", {{"acc_before", mean_o / ns},
                               {"acc_zeroed", mean_p / ns},
                               {"acc_retrained", mean_r / ns},
                               {"ratio", mean_ratio / ns}}}};

    result.report_json_path = (root / "report.json").string();
    detail::write_text(result.report_json_path, result.report.dump(2));

    std::ostringstream csv;
    csv << "seed,lambda,threshold,acc_O,ratio,paras_before(M),paras_after(M),acc_P,acc_R\n";
    char buf[256];
    for (const auto& oc : result.outcomes) {
        std::snprintf(buf, sizeof buf, "%llu,%g,%g,%.4f,%.4f,%.6f,%.6f,%.4f,%.4f\n",
                      static_cast<unsigned long long>(oc.seed), cfg.lambda, cfg.threshold,
                      100 * oc.report.acc_before, 100 * oc.report.ratio,
                      oc.report.params_before / 1e6, oc.report.params_after / 1e6,
                      100 * oc.report.acc_zeroed, 100 * oc.report.acc_retrained);
        csv << buf;
    }
    result.report_csv_path = (root / "report.csv").string();
    detail::write_text(result.report_csv_path, csv.str());
    return result;
}

}  // namespace qnn::pipeline
