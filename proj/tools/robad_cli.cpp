// Command-line front end: corpus generation, cross-validated training,
// evaluation, attack evaluation, ablation and sweeps.
//
// Exit codes: 0 ok, 2 configuration, 3 data, 4 missing or unusable artifact.

#include <robad/robad.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace robad;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitArtifact = 4;

// Failures that must map to a specific exit code regardless of type.
struct ExitError : std::runtime_error {
    ExitError(int code, const std::string &what) : std::runtime_error(what), code(code) {}
    int code;
};

struct CommonOptions {
    std::string config;
    std::string data;
    std::vector<std::string> overrides;
    std::optional<std::size_t> jobs;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App *cmd, CommonOptions &o, bool seed_flag = true) {
    cmd->add_option("--config", o.config, "Run configuration (flat JSON object)");
    cmd->add_option("--data", o.data, "Corpus file, one JSON user record per line")->required();
    cmd->add_option("--set", o.overrides, "Override a config key, KEY=VALUE (repeatable)");
    cmd->add_option("--jobs", o.jobs, "Folds trained in parallel");
    if (seed_flag)
        cmd->add_option("--seed", o.seed, "Training seed");
}

nlohmann::json parse_override_value(const std::string &text) {
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error &) {
        return text; // bare strings such as variant names
    }
}

RunConfig resolve_config(const CommonOptions &o) {
    nlohmann::json doc = nlohmann::json::object();
    if (!o.config.empty()) {
        try {
            doc = read_json_file(o.config);
        } catch (const IoError &e) {
            throw ConfigError("config", e.what());
        }
        if (!doc.is_object())
            throw ConfigError("config", "config file must hold a flat JSON object");
    }
    for (const auto &kv : o.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError(kv, "--set expects KEY=VALUE, got \"" + kv + "\"");
        doc[kv.substr(0, eq)] = parse_override_value(kv.substr(eq + 1));
    }
    if (o.jobs)
        doc["jobs"] = *o.jobs;
    if (o.seed)
        doc["seed"] = *o.seed;
    return parse_run_config(doc);
}

std::vector<RawUser> read_corpus(const std::string &path) {
    try {
        return load_corpus(path);
    } catch (const IoError &e) {
        throw ExitError(kExitData, e.what());
    }
}

void write_text(const fs::path &path, const std::string &text) {
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot write " + path.string());
    out << text;
    if (!out)
        throw IoError("write failed for " + path.string());
}

std::string metrics_text(const MetricsReport &r) { return r.to_json().dump(2) + "\n"; }

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

fs::path fold_file(const std::string &dir, std::size_t f, const char *ext) {
    return fs::path(dir) / ("fold_" + std::to_string(f) + ext);
}

/// Loads the fold models written by `train` and evaluates them on the
/// re-derived test folds with the given attacks.
MetricsReport evaluate_saved(const RunConfig &cfg, const std::vector<RawUser> &raw,
                             const std::string &ckpt_dir) {
    const auto plan = plan_cross_validation(cfg, raw);
    MetricsReport report;
    for (std::size_t f = 0; f < plan.folds.size(); ++f) {
        const auto ckpt = fold_file(ckpt_dir, f, ".ckpt");
        const auto vocab_path = fold_file(ckpt_dir, f, ".vocab");
        if (!fs::exists(ckpt) || !fs::exists(vocab_path))
            throw ExitError(kExitArtifact, "missing checkpoint " + ckpt.string() + " or " +
                                               vocab_path.string());
        Vocab vocab;
        ModelParams params;
        try {
            vocab = Vocab::load(vocab_path.string());
        } catch (const DataError &e) {
            throw ExitError(kExitArtifact, e.what());
        }
        auto data = prepare_fold(cfg, plan, f, &vocab);
        try {
            params = load_checkpoint(ckpt.string(), data.model);
        } catch (const FormatError &e) {
            throw ExitError(kExitArtifact, e.what());
        } catch (const CompatibilityError &e) {
            throw ExitError(kExitArtifact, e.what());
        }
        report.per_fold.push_back(evaluate_fold(cfg, data, params));
        std::cerr << "fold " << f << ": f1=" << fixed(report.per_fold.back().scores.f1, 4) << "\n";
    }
    report.aggregate();
    return report;
}

int cmd_gen_synth(const std::string &out, std::size_t users, double sep, std::uint64_t seed) {
    if (users < 10)
        throw ConfigError("users", "--users must be at least 10, got " + std::to_string(users));
    if (!(sep >= 0.0 && sep <= 1.0))
        throw ConfigError("sep", "--sep must lie in [0, 1]");
    save_corpus(out, gen_synthetic(users, sep, seed));
    std::cerr << "wrote " << users << " users to " << out << "\n";
    return 0;
}

int cmd_train(const CommonOptions &o, const std::string &out_dir, const std::string &csv) {
    const auto cfg = resolve_config(o);
    const auto raw = read_corpus(o.data);
    CvHooks hooks;
    hooks.on_fold = [&](const FoldRun &run) {
        fs::create_directories(out_dir);
        save_checkpoint(run.result.params, run.data.model,
                        fold_file(out_dir, run.data.fold, ".ckpt").string());
        run.data.vocab.save(fold_file(out_dir, run.data.fold, ".vocab").string());
        for (const auto &e : run.result.log)
            std::cerr << "fold=" << run.data.fold << ' ' << format_log_line(e) << "\n";
        std::cerr << "fold " << run.data.fold << ": best_epoch=" << run.result.best_epoch
                  << " f1=" << fixed(run.metrics.scores.f1, 4) << "\n";
    };
    auto result = cross_validate(cfg, raw, hooks);
    write_text(fs::path(out_dir) / "metrics.json", metrics_text(result.report));
    if (!csv.empty())
        write_text(csv, result.report.to_csv());
    std::cout << "f1=" << fixed(result.report.f1, 6) << "\n";
    return 0;
}

int cmd_eval(const CommonOptions &o, const std::string &ckpt_dir, const std::string &out) {
    const auto cfg = resolve_config(o);
    const auto raw = read_corpus(o.data);
    const auto report = evaluate_saved(cfg, raw, ckpt_dir);
    if (out.empty())
        std::cout << metrics_text(report);
    else
        write_text(out, metrics_text(report));
    return 0;
}

int cmd_attack_eval(const CommonOptions &o, const std::string &ckpt_dir, const std::string &attack,
                    std::uint64_t attack_seed, const std::string &out) {
    auto cfg = resolve_config(o);
    try {
        cfg.attacks = {parse_attack_kind(attack)};
    } catch (const ConfigError &e) {
        throw ConfigError("attack", e.what());
    }
    cfg.attack_seed = attack_seed;
    const auto raw = read_corpus(o.data);
    const auto report = evaluate_saved(cfg, raw, ckpt_dir);
    if (!out.empty())
        write_text(out, metrics_text(report));
    const auto kind = to_string(cfg.attacks.front());
    std::cout << "pre_f1=" << fixed(report.f1, 6) << "\n";
    std::cout << "post_f1[" << kind << "]=" << fixed(report.f1_after_attack.at(kind), 6) << "\n";
    std::cout << "relative_drop=" << fixed(report.relative_drop_pct.at(kind), 3) << "%\n";
    return 0;
}

int cmd_ablate(const CommonOptions &o, const std::string &out_dir) {
    const auto cfg = resolve_config(o);
    const auto raw = read_corpus(o.data);
    const auto rows = ablate(cfg, raw);
    const auto table = ablation_table(rows);
    if (!out_dir.empty()) {
        for (const auto &r : rows)
            write_text(fs::path(out_dir) / (std::string("metrics_") + to_string(r.variant) + ".json"),
                       metrics_text(r.report));
        write_text(fs::path(out_dir) / "ablation.csv", table);
    }
    std::cout << table;
    return 0;
}

int cmd_sweep(const CommonOptions &o, const std::string &grid_path, const std::string &out) {
    const auto base = resolve_config(o);
    nlohmann::ordered_json grid;
    {
        std::ifstream in(grid_path);
        if (!in)
            throw ConfigError("grid", "cannot open grid file " + grid_path);
        try {
            grid = nlohmann::ordered_json::parse(in);
        } catch (const nlohmann::json::parse_error &e) {
            throw ConfigError("grid", std::string("invalid grid JSON: ") + e.what());
        }
    }
    const auto points = expand_grid(grid, base);
    const auto raw = read_corpus(o.data);
    const auto table = sweep_table(sweep(points, raw));
    if (!out.empty())
        write_text(out, table);
    std::cout << table;
    return 0;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Robust bad-actor detection: training and robustness evaluation"};
    app.require_subcommand(1);

    std::string out, csv, ckpt_dir, attack = "copy", grid;
    std::size_t users = 200;
    double sep = 0.9;
    std::uint64_t seed = 0;
    CommonOptions common;

    auto *gen = app.add_subcommand("gen-synth", "Write a synthetic two-topic corpus");
    gen->add_option("--out", out, "Output corpus path")->required();
    gen->add_option("--users", users, "Number of users (at least 10)");
    gen->add_option("--sep", sep, "Class separation in [0, 1]");
    gen->add_option("--seed", seed, "Generator seed");

    auto *train_cmd = app.add_subcommand("train", "Cross-validated training");
    add_common(train_cmd, common);
    train_cmd->add_option("--out", out, "Directory for fold checkpoints and metrics.json")
        ->required();
    train_cmd->add_option("--csv", csv, "Also write the metrics table as CSV");

    auto *eval_cmd = app.add_subcommand("eval", "Evaluate saved fold checkpoints");
    add_common(eval_cmd, common);
    eval_cmd->add_option("--ckpt", ckpt_dir, "Directory written by train")->required();
    eval_cmd->add_option("--out", out, "Metrics output path (default: stdout)");

    auto *attack_cmd = app.add_subcommand("attack-eval", "F1 before and after one attack");
    add_common(attack_cmd, common, false);
    attack_cmd->add_option("--ckpt", ckpt_dir, "Directory written by train")->required();
    attack_cmd->add_option("--attack", attack, "copy | foreign | ngram | identity");
    attack_cmd->add_option("--seed", seed, "Attack seed");
    attack_cmd->add_option("--train-seed", common.seed, "Training seed used by train");
    attack_cmd->add_option("--out", out, "Metrics output path");

    auto *ablate_cmd = app.add_subcommand("ablate", "Compare the model variants");
    add_common(ablate_cmd, common);
    ablate_cmd->add_option("--out", out, "Directory for per-variant metrics and ablation.csv");

    auto *sweep_cmd = app.add_subcommand("sweep", "Hyperparameter grid search");
    add_common(sweep_cmd, common);
    sweep_cmd->add_option("--grid", grid, "Grid file {\"key\": [values...]}")->required();
    sweep_cmd->add_option("--out", out, "Table output path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        if (*gen)
            return cmd_gen_synth(out, users, sep, seed);
        if (*train_cmd)
            return cmd_train(common, out, csv);
        if (*eval_cmd)
            return cmd_eval(common, ckpt_dir, out);
        if (*attack_cmd)
            return cmd_attack_eval(common, ckpt_dir, attack, seed, out);
        if (*ablate_cmd)
            return cmd_ablate(common, out);
        if (*sweep_cmd)
            return cmd_sweep(common, grid, out);
    } catch (const ExitError &e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.code;
    } catch (const ConfigError &e) {
        std::cerr << "config error";
        if (!e.key().empty())
            std::cerr << " [" << e.key() << "]";
        std::cerr << ": " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError &e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const Error &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
