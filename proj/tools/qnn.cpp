// qnn: train, slim, prune, retrain, distill, evaluate, bench and sweep
// quantized networks, plus the binary feature-embedding solver.
//
// Exit codes: 0 success, 2 configuration/parse error, 3 numeric failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "qnn/qnn.hpp"

namespace fs = std::filesystem;
using namespace qnn;

namespace {

pipeline::ExperimentConfig need_config(const std::string& path) {
    if (path.empty()) throw ConfigError("--config is required");
    return pipeline::load_config(path);
}

void save_spec(const ModelSpec& spec, const fs::path& p) {
    std::ofstream os(p);
    os << spec.to_json().dump(2);
}

ModelSpec load_spec(const fs::path& p) {
    std::ifstream is(p);
    if (!is) throw ConfigError("cannot open " + p.string());
    nlohmann::json j;
    is >> j;
    return ModelSpec::from_json(j);
}

int run(int argc, char** argv) {
    CLI::App app{"quantized network toolkit"};
    app.require_subcommand(1);

    std::string config_path, model_path, spec_path, out_path, teacher_path, features_path;
    std::string input_shape = "1,1,8,8";
    double threshold = -1, tau = 10, mu = 0.2, gamma = 1.0, beta = 1e-2;
    std::size_t repeats = 5, m_dim = 0, rounds = 8;

    auto* c_train = app.add_subcommand("train", "train a model from the config template");
    c_train->add_option("--config", config_path)->required();

    auto* c_slim = app.add_subcommand("slim", "sparsity-regularized training (widened model)");
    c_slim->add_option("--config", config_path)->required();

    auto* c_prune = app.add_subcommand("prune", "threshold-prune BN channels of a trained model");
    c_prune->add_option("--config", config_path)->required();
    c_prune->add_option("--model", model_path, "model file (default: out_dir/model_sparse.qnnf)");
    c_prune->add_option("--threshold", threshold, "override config threshold");

    auto* c_retrain = app.add_subcommand("retrain", "retrain a reconciled spec from scratch");
    c_retrain->add_option("--config", config_path)->required();
    c_retrain->add_option("--spec", spec_path, "spec file (default: out_dir/reconciled_spec.json)");

    auto* c_distill = app.add_subcommand("distill", "retrain with knowledge distillation");
    c_distill->add_option("--config", config_path)->required();
    c_distill->add_option("--teacher", teacher_path, "teacher model file")->required();
    c_distill->add_option("--tau", tau, "temperature");
    c_distill->add_option("--mu", mu, "distillation balance weight");
    c_distill->add_option("--spec", spec_path, "student spec (default: out_dir/reconciled_spec.json)");

    auto* c_eval = app.add_subcommand("eval", "evaluate a model on the config dataset");
    c_eval->add_option("--config", config_path)->required();
    c_eval->add_option("--model", model_path)->required();

    std::string pack_out;
    auto* c_bench = app.add_subcommand("bench", "packed vs float kernel benchmark");
    c_bench->add_option("--model", model_path)->required();
    c_bench->add_option("--input-shape", input_shape, "N,C,H,W (default 1,1,8,8)");
    c_bench->add_option("--repeats", repeats, "timing repeats; 0 = memory report only");
    c_bench->add_option("--out", out_path, "write bench json here");
    c_bench->add_option("--pack-out", pack_out,
                        "re-save the model here with a BPK1 packed-weights section");

    auto* c_sweep = app.add_subcommand("sweep", "width x bits accuracy grid");
    c_sweep->add_option("--config", config_path)->required();

    auto* c_embed = app.add_subcommand("embed", "binary feature embedding solver");
    c_embed->add_option("--features", features_path, "feature matrix file")->required();
    c_embed->add_option("--out", out_path, "output prefix (default: features path)");
    c_embed->add_option("--m", m_dim, "embedding width (default 8n)");
    c_embed->add_option("--gamma", gamma, "orthogonality weight");
    c_embed->add_option("--beta", beta, "mask sparsity weight");
    c_embed->add_option("--rounds", rounds, "alternating rounds");

    auto* c_pipe = app.add_subcommand("pipeline", "widen-train-prune-retrain end to end");
    c_pipe->add_option("--config", config_path)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;  // bad invocation is a config error
    }

    if (c_train->parsed()) {
        auto cfg = need_config(config_path);
        Dataset data = pipeline::load_dataset(cfg.dataset);
        ModelSpec spec = pipeline::build_template(cfg.model, data.train_x.dim(1), data.classes,
                                                  cfg.widths.front(), cfg.model.weight_bits,
                                                  cfg.model.act_bits);
        Model model(spec, ModelInit{derive_seed(cfg.seeds.front(), "init"),
                                    static_cast<real>(cfg.model.bn_gamma_init)});
        train(model, data, pipeline::to_train_config(cfg.train, cfg.seeds.front()));
        const double acc = evaluate(model, data.test_x, data.test_y);
        fs::create_directories(cfg.out_dir);
        save_model(model, (fs::path(cfg.out_dir) / "model.qnnf").string());
        std::cout << "accuracy " << 100 * acc << "%  params " << model.param_count() << "\n";
        std::cout << "saved " << (fs::path(cfg.out_dir) / "model.qnnf").string() << "\n";
    } else if (c_slim->parsed()) {
        auto cfg = need_config(config_path);
        Dataset data = pipeline::load_dataset(cfg.dataset);
        ModelSpec base = pipeline::build_template(cfg.model, data.train_x.dim(1), data.classes,
                                                  1.0, cfg.model.weight_bits, cfg.model.act_bits);
        ModelSpec wide = slim::widen(base, cfg.widths.back());
        Model model(wide, ModelInit{derive_seed(cfg.seeds.front(), "init"),
                                    static_cast<real>(cfg.model.bn_gamma_init)});
        slim::train_sparse(model, data, static_cast<real>(cfg.lambda),
                           pipeline::to_train_config(cfg.train, cfg.seeds.front()));
        const double acc = evaluate(model, data.test_x, data.test_y);
        fs::create_directories(cfg.out_dir);
        save_model(model, (fs::path(cfg.out_dir) / "model_sparse.qnnf").string());
        std::cout << "acc_O " << 100 * acc << "%  lambda " << cfg.lambda << "\n";
        std::cout << "saved " << (fs::path(cfg.out_dir) / "model_sparse.qnnf").string() << "\n";
    } else if (c_prune->parsed()) {
        auto cfg = need_config(config_path);
        Dataset data = pipeline::load_dataset(cfg.dataset);
        if (model_path.empty())
            model_path = (fs::path(cfg.out_dir) / "model_sparse.qnnf").string();
        Model model = load_model(model_path);
        const real th = static_cast<real>(threshold >= 0 ? threshold : cfg.threshold);
        slim::PruneResult pr = slim::prune(model, th);
        pr.report.acc_before = evaluate(model, data.test_x, data.test_y);
        Model zeroed = slim::zero_pruned(model, pr.report);
        pr.report.acc_zeroed = evaluate(zeroed, data.test_x, data.test_y);
        ModelSpec reconciled = slim::reconcile_residual(pr.spec, model.spec(), pr.report);
        fs::create_directories(cfg.out_dir);
        save_spec(pr.spec, fs::path(cfg.out_dir) / "pruned_spec.json");
        save_spec(reconciled, fs::path(cfg.out_dir) / "reconciled_spec.json");
        std::ofstream rep(fs::path(cfg.out_dir) / "prune_report.json");
        rep << pr.report.to_json().dump(2);
        std::cout << pr.report.table(cfg.lambda);
        for (const auto& l : pr.report.layers)
            if (l.slot == "bn1" || l.slot == "bn2")
                std::cout << "  layer " << l.layer << " " << (l.slot == "bn1" ? "conv1" : "conv2")
                          << ": kept " << l.kept.size() << "/" << l.total
                          << (l.empty_guard ? " (guard)" : "") << "\n";
        std::cout << "saved pruned_spec.json, reconciled_spec.json, prune_report.json in "
                  << cfg.out_dir << "\n";
    } else if (c_retrain->parsed() || c_distill->parsed()) {
        auto cfg = need_config(config_path);
        Dataset data = pipeline::load_dataset(cfg.dataset);
        if (spec_path.empty())
            spec_path = (fs::path(cfg.out_dir) / "reconciled_spec.json").string();
        ModelSpec spec = load_spec(spec_path);
        TrainConfig tc = pipeline::to_train_config(cfg.retrain_settings,
                                                   derive_seed(cfg.seeds.front(), "retrain"));
        Tensor teacher_logits;
        if (c_distill->parsed()) {
            Model teacher = load_model(teacher_path);
            teacher_logits = predict_logits(teacher, data.train_x);
            tc.teacher_logits = &teacher_logits;
            tc.tau = static_cast<real>(tau);
            tc.mu = static_cast<real>(mu);
        }
        auto [model, acc] =
            slim::retrain(spec, data, tc, static_cast<real>(cfg.model.bn_gamma_init));
        fs::create_directories(cfg.out_dir);
        const char* name = c_distill->parsed() ? "model_distilled.qnnf" : "model_retrained.qnnf";
        save_model(model, (fs::path(cfg.out_dir) / name).string());
        std::cout << "acc_R " << 100 * acc << "%\n";
        std::cout << "saved " << (fs::path(cfg.out_dir) / name).string() << "\n";
    } else if (c_eval->parsed()) {
        auto cfg = need_config(config_path);
        Dataset data = pipeline::load_dataset(cfg.dataset);
        Model model = load_model(model_path);
        std::cout << "accuracy " << 100 * evaluate(model, data.test_x, data.test_y) << "%\n";
    } else if (c_bench->parsed()) {
        Model model = load_model(model_path);
        Shape shape;
        std::stringstream ss(input_shape);
        std::string tok;
        while (std::getline(ss, tok, ',')) shape.push_back(std::stoul(tok));
        if (shape.size() != 4) throw ConfigError("--input-shape needs N,C,H,W");
        pipeline::BenchOutcome bench = pipeline::run_bench(model, shape, repeats);
        std::cout << bench.memory.dump(2) << "\n" << bench.timing_text;
        if (!out_path.empty()) {
            std::ofstream os(out_path);
            os << bench.memory.dump(2);
        }
        if (!pack_out.empty()) {
            PackedSection section;
            const auto& units = model.units();
            for (std::size_t i = 0; i < units.size(); ++i) {
                if (units[i].spec.weight_bits != 1) continue;
                auto add = [&](const ConvUnit* cu, std::uint8_t slot) {
                    if (!cu) return;
                    auto bin = quant::binarize_weights(cu->w.value,
                                                       quant::Granularity::PerFilter);
                    PackedSection::Entry e;
                    e.unit = static_cast<std::uint32_t>(i);
                    e.slot = slot;
                    e.packed = bitkernel::pack_filters(bin.codes, bin.alpha);
                    section.entries.push_back(std::move(e));
                };
                add(units[i].conv ? &*units[i].conv : nullptr, 0);
                add(units[i].conv1 ? &*units[i].conv1 : nullptr, 1);
                add(units[i].conv2 ? &*units[i].conv2 : nullptr, 2);
                add(units[i].conv_sc ? &*units[i].conv_sc : nullptr, 3);
            }
            save_model(model, pack_out, &section);
            std::cout << "packed " << section.entries.size() << " filter banks into " << pack_out
                      << "\n";
        }
    } else if (c_sweep->parsed()) {
        auto cfg = need_config(config_path);
        auto rows = pipeline::run_width_sweep(cfg, &std::cout);
        fs::create_directories(cfg.out_dir);
        const std::string csv = (fs::path(cfg.out_dir) / "sweep.csv").string();
        pipeline::write_sweep_csv(csv, rows);
        std::cout << "bits width paras(M)  accuracy\n";
        for (const auto& r : rows) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "%-4d %-5g %-9.6f %.2f\n", r.bits, r.width,
                          r.params / 1e6, 100 * r.mean_acc());
            std::cout << buf;
        }
        std::cout << "saved " << csv << "\n";
    } else if (c_embed->parsed()) {
        Tensor Y = embed::load_features(features_path);
        embed::EmbedConfig ecfg;
        ecfg.m = m_dim;
        ecfg.gamma = static_cast<real>(gamma);
        ecfg.beta = static_cast<real>(beta);
        ecfg.rounds = rounds;
        embed::EmbedState st = embed::alternate(Y, ecfg);
        if (out_path.empty()) out_path = features_path;
        embed::save_state(out_path + ".embed", st);
        std::ofstream trace(out_path + ".trace.csv");
        trace << "round,objective\n";
        for (std::size_t r = 0; r < st.objective_trace.size(); ++r)
            trace << r + 1 << "," << st.objective_trace[r] << "\n";
        std::cout << "kept " << st.kept_count() << " of " << st.m << " columns; final objective "
                  << st.objective_trace.back() << "\n";
        std::cout << "saved " << out_path << ".embed and " << out_path << ".trace.csv\n";
    } else if (c_pipe->parsed()) {
        auto cfg = need_config(config_path);
        pipeline::PipelineResult res = pipeline::run_full_pipeline(cfg, &std::cout);
        std::cout << res.report.at("mean").dump(2) << "\n";
        std::cout << "report: " << res.report_json_path << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
