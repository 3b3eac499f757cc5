// volnet command-line driver: train / evaluate / gradcam / synth-gen / inspect.
//
// Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
// 4 non-finite loss abort.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "volnet/data.hpp"
#include "volnet/gradcam.hpp"
#include "volnet/metrics.hpp"
#include "volnet/model.hpp"
#include "volnet/train.hpp"

namespace {

using namespace volnet;

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNan = 4;

struct ConfigFileError : std::runtime_error {
    explicit ConfigFileError(const std::string& msg) : std::runtime_error(msg) {}
};

// Flat key=value run configuration covering the model, the training recipe,
// the synthetic generator and the I/O paths. Unknown keys are rejected.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    SynthSpec synth;
    std::string manifest;
    std::string out_dir = "out";
    bool crossed_eval = true;
    bool deterministic = true;
};

std::vector<size_t> parse_size_list(const std::string& v) {
    std::vector<size_t> out;
    std::istringstream is(v);
    std::string item;
    while (std::getline(is, item, ',')) out.push_back(std::stoul(item));
    return out;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path);
    RunConfig cfg;
    std::map<std::string, std::function<void(const std::string&)>> keys = {
        {"stage_channels", [&](const std::string& v) { cfg.model.stage_channels = parse_size_list(v); }},
        {"blocks_per_stage", [&](const std::string& v) { cfg.model.blocks_per_stage = std::stoul(v); }},
        {"num_classes", [&](const std::string& v) { cfg.model.num_classes = std::stoul(v); }},
        {"reduction", [&](const std::string& v) { cfg.model.reduction = std::stoul(v); }},
        {"batch_size", [&](const std::string& v) { cfg.train.batch_size = std::stoul(v); }},
        {"base_lr", [&](const std::string& v) { cfg.train.base_lr = std::stod(v); }},
        {"lr_floor", [&](const std::string& v) { cfg.train.lr_floor = std::stod(v); }},
        {"warm_epochs", [&](const std::string& v) { cfg.train.warm_epochs = std::stoul(v); }},
        {"halve_every", [&](const std::string& v) { cfg.train.halve_every = std::stoul(v); }},
        {"total_epochs", [&](const std::string& v) { cfg.train.total_epochs = std::stoul(v); }},
        {"weight_decay", [&](const std::string& v) { cfg.train.weight_decay = std::stod(v); }},
        {"grad_clip", [&](const std::string& v) { cfg.train.grad_clip = std::stod(v); }},
        {"seed", [&](const std::string& v) { cfg.train.seed = std::stoull(v); cfg.synth.seed = std::stoull(v); }},
        {"task", [&](const std::string& v) { cfg.train.task = v; }},
        {"manifest", [&](const std::string& v) { cfg.manifest = v; }},
        {"out_dir", [&](const std::string& v) { cfg.out_dir = v; }},
        {"crossed_eval", [&](const std::string& v) { cfg.crossed_eval = std::stoi(v) != 0; }},
        {"deterministic", [&](const std::string& v) { cfg.deterministic = std::stoi(v) != 0; }},
        {"synth_size", [&](const std::string& v) { cfg.synth.size = std::stoul(v); }},
        {"synth_per_class", [&](const std::string& v) { cfg.synth.per_class = std::stoul(v); }},
        {"synth_amplitude", [&](const std::string& v) { cfg.synth.amplitude = std::stod(v); }},
        {"synth_delta", [&](const std::string& v) { cfg.synth.delta = std::stod(v); }},
        {"synth_noise_sigma", [&](const std::string& v) { cfg.synth.noise_sigma = std::stod(v); }},
        {"synth_base_amplitude", [&](const std::string& v) { cfg.synth.base_amplitude = std::stod(v); }},
        {"synth_jitter", [&](const std::string& v) { cfg.synth.jitter = std::stod(v); }},
    };

    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            if (line.find_first_not_of(" \t\r") != std::string::npos) {
                throw ConfigFileError(path + ":" + std::to_string(lineno) + ": expected key=value");
            }
            continue;
        }
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        auto it = keys.find(key);
        if (it == keys.end()) {
            throw ConfigFileError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
        }
        try {
            it->second(value);
        } catch (const std::invalid_argument&) {
            throw ConfigFileError(path + ":" + std::to_string(lineno) + ": bad value for '" + key + "'");
        }
    }
    return cfg;
}

std::vector<TrainSample> load_split(const Manifest& m, const std::string& split) {
    std::vector<TrainSample> out;
    for (const auto& r : m.rows) {
        if (r.split != split) continue;
        TrainSample s;
        s.volume = normalize_volume(load_volume(r.path));
        s.label = static_cast<size_t>(r.label);
        out.push_back(std::move(s));
    }
    if (out.empty()) throw EmptySplitError("split '" + split + "' is empty");
    return out;
}

EvalReport eval_split(ModelParams& model, const Manifest& m, const std::string& split,
                      size_t batch_size) {
    auto samples = load_split(m, split);
    auto [scores, labels] = score_samples(model, samples, batch_size);
    return evaluate_scores(scores, labels);
}

int cmd_train(const std::string& config_path, std::optional<uint64_t> seed_override) {
    RunConfig cfg = load_run_config(config_path);
    if (seed_override) cfg.train.seed = *seed_override;
    cfg.model.validate();
    cfg.train.validate();
    if (cfg.manifest.empty()) throw ConfigFileError(config_path + ": 'manifest' is required for train");

    std::filesystem::create_directories(cfg.out_dir);
    const Manifest base = load_manifest(cfg.manifest);
    std::vector<Manifest> runs{base};
    if (cfg.crossed_eval) runs.push_back(swap_val_test(base));

    std::vector<EvalReport> test_reports;
    for (size_t run = 0; run < runs.size(); ++run) {
        const char tag = static_cast<char>('a' + run);
        Dataset ds;
        ds.train = load_split(runs[run], "train");
        ds.val = load_split(runs[run], "val");

        auto model = build_model(cfg.model, cfg.train.seed);
        auto history = fit(model, ds, cfg.train, {[&](const EpochRecord& e) {
            std::cerr << "run " << tag << " epoch " << e.epoch << " lr " << e.lr << " loss "
                      << e.train_loss << " val_acc " << e.val_acc << "\n";
        }});

        std::ofstream hist(cfg.out_dir + "/history_" + tag + ".csv");
        hist << history_csv(history);
        save_checkpoint(history.best, cfg.out_dir + "/best_" + tag + ".vnck");

        ModelParams best = build_model(cfg.model, cfg.train.seed);
        load_into(history.best, best);
        EvalReport report = eval_split(best, runs[run], "test", cfg.train.batch_size);
        std::cout << "test report, run " << tag << "\n" << format_report(report);
        std::ofstream rep(cfg.out_dir + "/report_" + tag + ".csv");
        rep << report_csv(report);
        test_reports.push_back(report);
    }

    // final report: the mean of the crossed test runs
    double acc = 0, sen = 0, spe = 0, auc_sum = 0;
    for (const auto& r : test_reports) {
        acc += r.summary.acc;
        sen += r.summary.sen.value_or(0.0);
        spe += r.summary.spe.value_or(0.0);
        auc_sum += r.auc;
    }
    const double n = static_cast<double>(test_reports.size());
    std::ofstream final_rep(cfg.out_dir + "/report.csv");
    final_rep << "acc,sen,spe,auc\n"
              << std::setprecision(10) << acc / n << "," << sen / n << "," << spe / n << ","
              << auc_sum / n << "\n";
    std::cout << "mean test acc " << acc / n << " auc " << auc_sum / n << "\n";
    return 0;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& manifest_path,
                 const std::string& split, size_t batch_size, const std::string& out_dir) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    ModelParams model = build_model(ckpt.params.config, 0);
    load_into(ckpt, model);
    const Manifest m = load_manifest(manifest_path);
    EvalReport report = eval_split(model, m, split, batch_size);
    std::cout << format_report(report);
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::ofstream rep(out_dir + "/report.csv");
        rep << report_csv(report);
    }
    return 0;
}

int cmd_gradcam(const std::string& ckpt_path, const std::string& volume_path, size_t stage,
                size_t target_class, bool attended, const std::string& out_prefix) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    ModelParams model = build_model(ckpt.params.config, 0);
    load_into(ckpt, model);
    Tensor volume = normalize_volume(load_volume(volume_path));
    Heatmap hm = compute_gradcam(model, volume, stage, target_class, attended);
    const auto parent = std::filesystem::path(out_prefix).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    export_heatmap(hm, volume, out_prefix);
    std::cout << "stage " << stage << " class " << target_class << " pre_norm_max "
              << hm.pre_norm_max << "\n";
    return 0;
}

int cmd_synth_gen(const std::string& config_path, const std::string& out_dir,
                  std::optional<uint64_t> seed_override) {
    SynthSpec spec;
    if (!config_path.empty()) spec = load_run_config(config_path).synth;
    if (seed_override) spec.seed = *seed_override;
    auto ds = synth_generate(spec);
    write_synth_dataset(ds, out_dir);
    std::cout << "wrote " << ds.samples.size() << " volumes to " << out_dir << "\n";
    return 0;
}

int cmd_inspect(const std::string& ckpt_path) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    const auto& cfg = ckpt.params.config;
    std::cout << "epoch " << ckpt.epoch << " seed " << ckpt.seed << " task " << ckpt.task << "\n";
    std::cout << "stage_channels";
    for (size_t c : cfg.stage_channels) std::cout << " " << c;
    std::cout << "\nblocks_per_stage " << cfg.blocks_per_stage << "\nnum_classes "
              << cfg.num_classes << "\nreduction " << cfg.reduction << "\n";
    std::cout << parameter_manifest(ckpt.params);
    std::cout << "optimizer_state " << (ckpt.optimizer ? "present" : "absent") << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"volumetric attention-CNN training and inspection"};
    app.require_subcommand(1);

    std::string config_path, ckpt_path, manifest_path, volume_path, out, split = "test";
    size_t stage = 1, target_class = 0, batch_size = 6;
    bool attended = false, deterministic = false;
    std::optional<uint64_t> seed;

    auto* train = app.add_subcommand("train", "train with crossed val/test evaluation");
    train->add_option("--config", config_path, "run configuration file")->required();
    train->add_option("--seed", seed, "override the config seed");
    train->add_flag("--deterministic", deterministic, "seeded single-threaded execution");

    auto* evaluate = app.add_subcommand("evaluate", "score a manifest split with a checkpoint");
    evaluate->add_option("--checkpoint", ckpt_path)->required();
    evaluate->add_option("--manifest", manifest_path)->required();
    evaluate->add_option("--split", split, "train | val | test");
    evaluate->add_option("--batch-size", batch_size);
    evaluate->add_option("--out", out, "directory for report.csv");

    auto* gradcam = app.add_subcommand("gradcam", "export a class activation heatmap");
    gradcam->add_option("--checkpoint", ckpt_path)->required();
    gradcam->add_option("--volume", volume_path)->required();
    gradcam->add_option("--stage", stage, "stage 1..4");
    gradcam->add_option("--class", target_class, "target class index");
    gradcam->add_flag("--attended", attended, "map the attention-scaled activations");
    gradcam->add_option("--out", out, "output path prefix")->required();

    auto* synth = app.add_subcommand("synth-gen", "generate a synthetic dataset");
    synth->add_option("--config", config_path, "optional synth_* configuration");
    synth->add_option("--seed", seed, "override the config seed");
    synth->add_flag("--deterministic", deterministic);
    synth->add_option("--out", out, "dataset directory")->required();

    auto* inspect = app.add_subcommand("inspect", "print a checkpoint's namespace and config");
    inspect->add_option("--checkpoint", ckpt_path)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (train->parsed()) return cmd_train(config_path, seed);
        if (evaluate->parsed()) return cmd_evaluate(ckpt_path, manifest_path, split, batch_size, out);
        if (gradcam->parsed()) return cmd_gradcam(ckpt_path, volume_path, stage, target_class, attended, out);
        if (synth->parsed()) return cmd_synth_gen(config_path, out, seed);
        if (inspect->parsed()) return cmd_inspect(ckpt_path);
    } catch (const NanLossError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNan;
    } catch (const ConfigFileError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const InvalidConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const InvalidStageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const EpochRangeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ArchitectureMismatchError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const CheckpointError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const EmptySplitError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
