// encofa: data generation, noise injection, training, evaluation and reports.

#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "encofa/backbone.hpp"
#include "encofa/dataset.hpp"
#include "encofa/metrics.hpp"
#include "encofa/report.hpp"
#include "encofa/trainer.hpp"

namespace fs = std::filesystem;
using namespace encofa;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitRuntime = 4;

std::optional<std::string> env(const char* name) {
    const char* v = std::getenv(name);
    if (!v || !*v) return std::nullopt;
    return std::string(v);
}

std::uint64_t seed_or_env(const std::optional<std::uint64_t>& flag, std::uint64_t fallback) {
    if (flag) return *flag;
    if (const auto v = env("ENCOFA_SEED")) {
        try {
            std::size_t used = 0;
            const auto parsed = std::stoull(*v, &used);
            if (used == v->size()) return parsed;
        } catch (const std::exception&) {
        }
        throw ConfigError("ENCOFA_SEED", "not an unsigned integer: " + *v);
    }
    return fallback;
}

fs::path run_dir_or_env(const std::string& flag, const fs::path& fallback) {
    if (!flag.empty()) return flag;
    if (const auto v = env("ENCOFA_RUN_DIR")) return *v;
    return fallback;
}

nlohmann::ordered_json noise_provenance(const DatasetSplits& splits, double alpha, double beta, std::uint64_t seed,
                                        InstanceProfile profile) {
    auto realized = [](const std::vector<Sample>& samples) {
        std::size_t closed = 0, open = 0;
        for (const auto& s : samples) {
            closed += s.true_type == NoiseType::closed;
            open += s.true_type == NoiseType::open;
        }
        const double noisy = static_cast<double>(closed + open);
        return nlohmann::ordered_json{
            {"n", samples.size()},
            {"n_closed", closed},
            {"n_open", open},
            {"alpha", samples.empty() ? 0.0 : noisy / static_cast<double>(samples.size())},
            {"beta", noisy > 0 ? static_cast<double>(open) / noisy : 0.0},
        };
    };
    return {
        {"alpha", alpha},
        {"beta", beta},
        {"seed", seed},
        {"instance_profile", to_string(profile)},
        {"train", realized(splits.train)},
        {"val", realized(splits.val)},
    };
}

int cmd_generate(const fs::path& out, const BlobParams& params) {
    const Dataset d = generate_blobs(params);
    save_dataset(d, out);
    std::cout << "wrote " << d.splits.train.size() << " train, " << d.splits.val.size() << " val, "
              << d.splits.test.size() << " test, " << d.ood_pool.size() << " ood samples to " << out.string() << "\n";
    return 0;
}

int cmd_inject(const fs::path& data, const fs::path& out, NoiseSpec spec) {
    Dataset d = load_dataset(data);
    spec.id_class_count = d.splits.num_classes;
    spec.ood_class_count = d.splits.num_ood_classes;
    d.splits = inject_noise(d.splits, d.ood_pool, spec);
    save_dataset(d, out);
    const auto prov = noise_provenance(d.splits, spec.alpha, spec.beta, spec.seed, spec.instance_profile);
    std::ofstream(out / "noise.json") << prov.dump(2) << '\n';
    std::cout << prov.dump(2) << '\n';
    return 0;
}

int cmd_train(RunConfig cfg) {
    const Dataset d = build_dataset(cfg);
    Trainer trainer(cfg, d.splits);
    const FitResult r = trainer.fit(cfg.output_dir);
    std::cout << "method " << to_string(cfg.method) << " seed " << cfg.seed << ": acc_test " << r.acc_test_final
              << " (best-val epoch " << r.best_val_epoch << ": " << r.acc_test_best_val << "), run dir "
              << cfg.output_dir.string() << "\n";
    return 0;
}

int cmd_evaluate(const fs::path& checkpoint, const fs::path& data, const std::string& split_name) {
    const Backbone model = load_checkpoint(checkpoint);
    const Dataset d = load_dataset(data);
    const std::vector<Sample>* split = nullptr;
    if (split_name == "train") split = &d.splits.train;
    if (split_name == "val") split = &d.splits.val;
    if (split_name == "test") split = &d.splits.test;
    if (!split) throw ConfigError("split", "expected train, val or test");
    if (!(model.spec().input == d.splits.shape) || model.spec().num_classes != d.splits.num_classes)
        throw DataError("checkpoint architecture does not match the dataset");
    const nlohmann::ordered_json j = {
        {"split", split_name},
        {"n", split->size()},
        {"accuracy", classification_accuracy(model, *split, false)},
        {"accuracy_observed", classification_accuracy(model, *split, true)},
    };
    std::cout << j.dump(2) << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Training on data with mixed closed-set and open-set label noise"};
    app.require_subcommand(1);

    // generate-data
    auto* gen = app.add_subcommand("generate-data", "Write a clean Gaussian-blob dataset");
    std::string gen_out;
    BlobParams blobs;
    std::optional<std::uint64_t> gen_seed;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--n-per-class", blobs.n_per_class, "Samples per class")->capture_default_str();
    gen->add_option("--classes", blobs.num_classes, "In-distribution classes")->capture_default_str();
    gen->add_option("--ood-classes", blobs.num_ood_classes, "Out-of-distribution classes")->capture_default_str();
    gen->add_option("--dim", blobs.dim, "Input dimension")->capture_default_str();
    gen->add_option("--separation", blobs.separation, "Minimum distance between class centers")->capture_default_str();
    gen->add_option("--seed", gen_seed, "Random seed (env ENCOFA_SEED)");

    // inject-noise
    auto* inj = app.add_subcommand("inject-noise", "Corrupt the train and val splits of a saved dataset");
    std::string inj_data, inj_out, inj_profile = "probe_confusion";
    NoiseSpec noise;
    std::optional<std::uint64_t> inj_seed;
    inj->add_option("--data", inj_data, "Clean dataset directory")->required();
    inj->add_option("--out", inj_out, "Output directory")->required();
    inj->add_option("--alpha", noise.alpha, "Fraction of corrupted samples")->required();
    inj->add_option("--beta", noise.beta, "Open-set share of the corrupted samples")->required();
    inj->add_option("--profile", inj_profile, "probe_confusion or truncated_gaussian")->capture_default_str();
    inj->add_option("--seed", inj_seed, "Random seed (env ENCOFA_SEED)");

    // train
    auto* train = app.add_subcommand("train", "Train from a TOML config");
    std::string train_config, train_run_dir, train_method;
    std::optional<std::uint64_t> train_seed;
    std::optional<int> train_epochs;
    train->add_option("--config", train_config, "Run configuration (TOML)")->required();
    train->add_option("--seed", train_seed, "Override run.seed (env ENCOFA_SEED)");
    train->add_option("--run-dir", train_run_dir, "Override run.output_dir (env ENCOFA_RUN_DIR)");
    train->add_option("--method", train_method, "Override run.method");
    train->add_option("--epochs", train_epochs, "Override run.epochs");

    // evaluate
    auto* eval = app.add_subcommand("evaluate", "Accuracy of a checkpoint on a saved dataset split");
    std::string eval_ckpt, eval_data, eval_split = "test";
    eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
    eval->add_option("--data", eval_data, "Dataset directory")->required();
    eval->add_option("--split", eval_split, "train, val or test")->capture_default_str();

    // report
    auto* rep = app.add_subcommand("report", "Summaries and plots from finished runs");
    std::vector<std::string> rep_dirs;
    std::string rep_out, rep_projection = "pca";
    std::optional<std::uint64_t> rep_seed;
    rep->add_option("--run-dir", rep_dirs, "Run directories; the first one is plotted (env ENCOFA_RUN_DIR)");
    rep->add_option("--out", rep_out, "Output directory (default <run-dir>/report)");
    rep->add_option("--projection", rep_projection, "pca or random")->capture_default_str();
    rep->add_option("--seed", rep_seed, "Seed of the random projection");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return kExitConfig;
    }

    try {
        if (*gen) {
            blobs.seed = seed_or_env(gen_seed, 0);
            return cmd_generate(gen_out, blobs);
        }
        if (*inj) {
            noise.seed = seed_or_env(inj_seed, 0);
            noise.instance_profile = parse_instance_profile(inj_profile);
            return cmd_inject(inj_data, inj_out, noise);
        }
        if (*train) {
            RunConfig cfg = load_config(train_config);
            cfg.seed = seed_or_env(train_seed, cfg.seed);
            cfg.output_dir = run_dir_or_env(train_run_dir, cfg.output_dir);
            if (!train_method.empty()) cfg.method = parse_method(train_method);
            if (train_epochs) cfg.epochs = *train_epochs;
            cfg.validate();
            return cmd_train(std::move(cfg));
        }
        if (*eval) return cmd_evaluate(eval_ckpt, eval_data, eval_split);
        if (*rep) {
            std::vector<fs::path> dirs(rep_dirs.begin(), rep_dirs.end());
            if (dirs.empty()) {
                const auto d = env("ENCOFA_RUN_DIR");
                if (!d) throw ConfigError("run_dir", "pass --run-dir or set ENCOFA_RUN_DIR");
                dirs.emplace_back(*d);
            }
            ReportOptions opt;
            opt.out_dir = rep_out;
            opt.projection = parse_projection(rep_projection);
            opt.seed = seed_or_env(rep_seed, 0);
            write_report(dirs, opt);
            const auto out = opt.out_dir.empty() ? dirs.front() / "report" : opt.out_dir;
            std::cout << "wrote " << (out / "summary.json").string() << "\n";
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return 0;
}
