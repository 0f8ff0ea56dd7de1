#include "fedsim/cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "fedsim/config.hpp"
#include "fedsim/errors.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

namespace fs = std::filesystem;

namespace {

// seed tags per pipeline stage
constexpr std::uint64_t kTagData = 0xD0;
constexpr std::uint64_t kTagPseudo = 0xD1;
constexpr std::uint64_t kTagSsl = 0x55;
constexpr std::uint64_t kTagTrain = 0xF7;
constexpr std::uint64_t kTagEval = 0xE7;

struct CommonArgs {
    std::string config_path;
    std::string out_dir = ".";
    std::optional<std::uint64_t> seed_override;
};

ExperimentConfig load_and_validate(const CommonArgs& args) {
    if (args.config_path.empty()) throw ConfigError("--config is required");
    ExperimentConfig cfg = load_config(args.config_path);
    if (args.seed_override) cfg.master_seed = *args.seed_override;
    cfg.validate();
    return cfg;
}

fs::path data_dir(const ExperimentConfig& cfg, const CommonArgs& args) {
    return fs::path(args.out_dir) / cfg.paths.data;
}
fs::path ckpt_dir(const ExperimentConfig& cfg, const CommonArgs& args) {
    return fs::path(args.out_dir) / cfg.paths.checkpoints;
}
fs::path report_dir(const ExperimentConfig& cfg, const CommonArgs& args) {
    return fs::path(args.out_dir) / cfg.paths.reports;
}

fs::path center_archive(const fs::path& dir, int center_id) {
    return dir / ("center_" + std::to_string(center_id) + ".bin");
}
fs::path pseudo_archive(const fs::path& dir, int center_id) {
    return dir / ("pseudo_" + std::to_string(center_id) + ".bin");
}

std::vector<CenterDataset> load_center_datasets(const ExperimentConfig& cfg,
                                                const CommonArgs& args) {
    std::vector<CenterDataset> out;
    const fs::path dir = data_dir(cfg, args);
    for (const auto& center : cfg.centers) {
        const fs::path path = center_archive(dir, center.center_id);
        if (!fs::exists(path)) {
            throw DataError("missing dataset archive '" + path.string() +
                            "'; run gen-data first");
        }
        out.push_back(load_dataset(path.string()));
    }
    return out;
}

std::vector<std::vector<PseudoSample>> load_pseudo_sets(const ExperimentConfig& cfg,
                                                        const CommonArgs& args) {
    std::vector<std::vector<PseudoSample>> out;
    const fs::path dir = data_dir(cfg, args);
    for (const auto& center : cfg.centers) {
        const fs::path path = pseudo_archive(dir, center.center_id);
        if (!fs::exists(path)) {
            throw DataError("missing pseudo archive '" + path.string() + "'; run gen-data first");
        }
        out.push_back(load_pseudo(path.string()));
    }
    return out;
}

int cmd_gen_data(const CommonArgs& args) {
    const ExperimentConfig cfg = load_and_validate(args);
    const fs::path dir = data_dir(cfg, args);
    fs::create_directories(dir);

    for (std::size_t i = 0; i < cfg.centers.size(); ++i) {
        const CenterSpec spec = cfg.center_spec(i);
        const CenterDataset dataset = generate_center_dataset(
            spec, cfg.model.height, cfg.model.width, derive_seed(cfg.master_seed, {kTagData}));
        save_dataset(dataset, center_archive(dir, spec.center_id).string());

        const auto pseudo = generate_pseudo_images(dataset, cfg.pseudo_n,
                                                   derive_seed(cfg.master_seed, {kTagPseudo}));
        save_pseudo(pseudo, dataset.n_classes, pseudo_archive(dir, spec.center_id).string());

        std::cerr << "center " << spec.center_id << ": " << dataset.samples.size()
                  << " samples, " << pseudo.size() << " pseudo images\n";
    }
    return 0;
}

int cmd_pretrain(const CommonArgs& args, const std::string& pretext) {
    ExperimentConfig cfg = load_and_validate(args);
    if (!pretext.empty()) cfg.ssl.pretext = pretext_from_string(pretext);

    const auto pseudo_sets = load_pseudo_sets(cfg, args);
    const auto t0 = std::chrono::steady_clock::now();
    PretrainResult result =
        pretrain(pseudo_sets, cfg.model, cfg.ssl, derive_seed(cfg.master_seed, {kTagSsl}));
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    fs::create_directories(ckpt_dir(cfg, args));
    fs::create_directories(report_dir(cfg, args));
    const fs::path ckpt = ckpt_dir(cfg, args) / "ssl_pretrained.ckpt";
    save_params(result.weights, ckpt.string());
    save_ssl_report(result.report, (report_dir(cfg, args) / "ssl_report.jsonl").string());

    if (!result.report.epochs.empty()) {
        const auto& last = result.report.epochs.back();
        std::cerr << "pretrained " << cfg.ssl.epochs << " epochs in " << secs
                  << "s; final l_ssl=" << last.l_ssl << " holdout_acc=" << last.holdout_acc
                  << "\n";
    }
    std::cout << ckpt.string() << "\n";
    return 0;
}

// resolves the three initialization sources: --ssl-init path, --pretext
// in-process pretraining, or the config's fl.ssl_init path
std::optional<ParamSet> resolve_ssl_init(const ExperimentConfig& cfg, const CommonArgs& args,
                                         const std::string& ssl_init_flag,
                                         const std::string& pretext_flag) {
    if (!ssl_init_flag.empty() && !pretext_flag.empty()) {
        throw ConfigError("--ssl-init and --pretext are mutually exclusive");
    }
    if (!pretext_flag.empty()) {
        ExperimentConfig ssl_cfg = cfg;
        ssl_cfg.ssl.pretext = pretext_from_string(pretext_flag);
        const auto pseudo_sets = load_pseudo_sets(ssl_cfg, args);
        PretrainResult result = pretrain(pseudo_sets, ssl_cfg.model, ssl_cfg.ssl,
                                         derive_seed(ssl_cfg.master_seed, {kTagSsl}));
        return std::move(result.weights);
    }
    std::string path = ssl_init_flag;
    if (path.empty()) path = cfg.fl.ssl_init;
    if (path.empty()) return std::nullopt;
    return load_params(path);
}

std::vector<ClientData> build_clients(const ExperimentConfig& cfg,
                                      const std::vector<CenterDataset>& datasets) {
    std::vector<ClientData> clients;
    for (const auto& dataset : datasets) {
        ClientData client;
        client.center_id = dataset.center_id;
        client.m_original = dataset.samples.size();
        client.train = augment_samples(dataset.samples);
        clients.push_back(std::move(client));
    }
    return clients;
}

int cmd_train(const CommonArgs& args, const std::string& algorithm,
              const std::string& ssl_init_flag, const std::string& pretext_flag,
              bool round_checkpoints) {
    ExperimentConfig cfg = load_and_validate(args);
    if (!algorithm.empty()) cfg.fl.algorithm = algorithm_from_string(algorithm);
    cfg.fl.seed = derive_seed(cfg.master_seed, {kTagTrain});

    const auto datasets = load_center_datasets(cfg, args);
    const auto ssl_init = resolve_ssl_init(cfg, args, ssl_init_flag, pretext_flag);
    const auto clients = build_clients(cfg, datasets);

    fs::create_directories(ckpt_dir(cfg, args));
    fs::create_directories(report_dir(cfg, args));
    const std::string algo = algorithm_name(cfg.fl.algorithm);

    RoundSink sink;
    if (round_checkpoints) {
        sink = [&](std::size_t round, const ParamSet& global) {
            save_params(global, (ckpt_dir(cfg, args) /
                                 ("round_" + std::to_string(round + 1) + "_" + algo + ".ckpt"))
                                    .string());
        };
    }

    const auto t0 = std::chrono::steady_clock::now();
    FederationResult result = run_federation(cfg.model, clients, cfg.fl,
                                             ssl_init ? &*ssl_init : nullptr, nullptr, sink);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    save_params(result.global, (ckpt_dir(cfg, args) / ("global_" + algo + ".ckpt")).string());
    if (cfg.fl.algorithm == Algorithm::LocalOnly) {
        // per_client follows the federation's center-sorted client order
        std::vector<int> sorted_centers;
        for (const auto& c : clients) sorted_centers.push_back(c.center_id);
        std::sort(sorted_centers.begin(), sorted_centers.end());
        for (std::size_t i = 0; i < result.per_client.size(); ++i) {
            save_params(result.per_client[i],
                        (ckpt_dir(cfg, args) /
                         ("local_" + algo + "_center" + std::to_string(sorted_centers[i]) +
                          ".ckpt"))
                            .string());
        }
    }
    save_history(result.history,
                 (report_dir(cfg, args) / ("history_" + algo + ".jsonl")).string());

    std::cerr << algo << ": " << cfg.fl.rounds << " rounds in " << secs << "s\n";
    return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::string& algorithm,
                 const std::string& ssl_init_flag, const std::string& pretext_flag,
                 std::size_t jobs) {
    ExperimentConfig cfg = load_and_validate(args);
    if (!algorithm.empty()) cfg.fl.algorithm = algorithm_from_string(algorithm);
    cfg.fl.eval_every = 0;  // fold metrics come from the fold harness itself

    const auto datasets = load_center_datasets(cfg, args);
    const auto ssl_init = resolve_ssl_init(cfg, args, ssl_init_flag, pretext_flag);

    const auto t0 = std::chrono::steady_clock::now();
    FoldReport report =
        cross_validate(cfg.model, datasets, cfg.fl, cfg.k_folds,
                       derive_seed(cfg.master_seed, {kTagEval}),
                       ssl_init ? &*ssl_init : nullptr, jobs == 0 ? 1 : jobs);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    fs::create_directories(report_dir(cfg, args));
    const std::string algo = algorithm_name(cfg.fl.algorithm);
    save_fold_report(report, (report_dir(cfg, args) / ("foldreport_" + algo + ".json")).string());
    for (std::size_t f = 0; f < report.folds.size(); ++f) {
        for (std::size_t c = 0; c < report.folds[f].per_center_pr.size(); ++c) {
            const fs::path path =
                report_dir(cfg, args) / ("pr_" + algo + "_fold" + std::to_string(f) + "_center" +
                                         std::to_string(report.center_ids[c]) + ".txt");
            save_pr_points(report.folds[f].per_center_pr[c], path.string());
        }
    }

    char line[160];
    std::snprintf(line, sizeof(line), "%s: GTA accuracy %.2f+-%.2f%% over %zu folds (%.1fs)\n",
                  algo.c_str(), 100.0 * report.gta_stats[0].mean, 100.0 * report.gta_stats[0].sd,
                  report.folds.size(), secs);
    std::cout << line;
    return 0;
}

std::string render_comparison(const std::vector<FoldReport>& reports) {
    static const char* kMetricNames[4] = {"Accuracy", "Precision", "Recall", "F1-score"};
    std::ostringstream os;

    auto render_block = [&](const std::string& title, auto stat_of) {
        os << title << "\n";
        char header[160];
        std::snprintf(header, sizeof(header), "%-12s", "Algorithm");
        os << header;
        for (const char* name : kMetricNames) {
            std::snprintf(header, sizeof(header), "  %-13s", name);
            os << header;
        }
        os << "\n";
        for (const auto& report : reports) {
            char cell[64];
            std::snprintf(cell, sizeof(cell), "%-12s", report.algorithm.c_str());
            os << cell;
            for (std::size_t m = 0; m < 4; ++m) {
                const MetricStat s = stat_of(report, m);
                std::snprintf(cell, sizeof(cell), "  %5.2f±%-5.2f ", 100.0 * s.mean,
                              100.0 * s.sd);
                os << cell;
            }
            os << "\n";
        }
        os << "\n";
    };

    // recompute aggregates from the per-fold values rather than trusting the
    // stored stats
    auto center_stat = [](const FoldReport& r, std::size_t center_idx, std::size_t metric) {
        std::vector<double> values;
        for (const auto& fold : r.folds) {
            const MetricSet& m = fold.per_center[center_idx];
            const double v = metric == 0   ? m.accuracy
                             : metric == 1 ? m.precision
                             : metric == 2 ? m.recall
                                           : m.f1;
            values.push_back(v);
        }
        return mean_sd(values);
    };

    if (reports.empty()) return "(no fold reports found)\n";
    const auto& centers = reports.front().center_ids;
    for (std::size_t c = 0; c < centers.size(); ++c) {
        render_block("Center C" + std::to_string(centers[c]),
                     [&](const FoldReport& r, std::size_t m) { return center_stat(r, c, m); });
    }
    render_block("Global test average (GTA)", [&](const FoldReport& r, std::size_t m) {
        std::vector<double> values;
        for (const auto& fold : r.folds) {
            const MetricSet& g = fold.gta;
            values.push_back(m == 0 ? g.accuracy : m == 1 ? g.precision : m == 2 ? g.recall : g.f1);
        }
        return mean_sd(values);
    });
    return os.str();
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out_file) {
    std::vector<FoldReport> reports;
    for (const auto& input : inputs) {
        fs::path p(input);
        if (fs::is_directory(p)) {
            std::vector<fs::path> found;
            for (const auto& entry : fs::recursive_directory_iterator(p)) {
                const std::string name = entry.path().filename().string();
                if (name.rfind("foldreport_", 0) == 0 && entry.path().extension() == ".json") {
                    found.push_back(entry.path());
                }
            }
            std::sort(found.begin(), found.end());
            if (found.empty()) {
                throw DataError("report: no foldreport_*.json under '" + input + "'");
            }
            for (const auto& f : found) reports.push_back(load_fold_report(f.string()));
        } else if (fs::exists(p)) {
            reports.push_back(load_fold_report(p.string()));
        } else {
            throw DataError("report: no such file or directory '" + input + "'");
        }
    }
    for (std::size_t i = 1; i < reports.size(); ++i) {
        if (reports[i].center_ids != reports.front().center_ids) {
            throw DataError("report: runs cover different centers; cannot tabulate together");
        }
    }
    const std::string table = render_comparison(reports);
    std::cout << table;
    if (!out_file.empty()) {
        std::ofstream os(out_file);
        if (!os) throw DataError("report: cannot open '" + out_file + "' for writing");
        os << table;
    }
    return 0;
}

int cmd_print_config() {
    std::cout << config_to_json_text(ExperimentConfig::defaults());
    return 0;
}

int dispatch(int argc, const char* const* argv) {
    CLI::App app{"multi-center federated learning simulator"};
    app.require_subcommand(1);

    CommonArgs args;
    auto add_common = [&args](CLI::App* cmd) {
        cmd->add_option("--config", args.config_path, "experiment config file (JSON)");
        cmd->add_option("--out", args.out_dir, "run directory for artifacts");
        cmd->add_option("--seed", args.seed_override, "override the config's master seed");
    };

    auto* gen = app.add_subcommand("gen-data", "generate per-center dataset and pseudo archives");
    add_common(gen);

    std::string pretrain_pretext;
    auto* pre = app.add_subcommand("pretrain", "multi-task pretraining on the pooled pseudo data");
    add_common(pre);
    pre->add_option("--pretext", pretrain_pretext, "pretext tasks: both|ce|mse");

    std::string train_algorithm, train_ssl_init, train_pretext;
    bool train_round_ckpts = false;
    auto* train = app.add_subcommand("train", "run the federated training loop");
    add_common(train);
    train->add_option("--algorithm", train_algorithm, "local_only|fedavg|fedprox|fl_bt");
    train->add_option("--ssl-init", train_ssl_init, "pretrained checkpoint for the encoder");
    train->add_option("--pretext", train_pretext,
                      "pretrain in-process with these pretext tasks first (both|ce|mse)");
    train->add_flag("--round-checkpoints", train_round_ckpts,
                    "also write the global model after every round");

    std::string eval_algorithm, eval_ssl_init, eval_pretext;
    std::size_t eval_jobs = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    auto* eval = app.add_subcommand("evaluate", "k-fold cross-validated evaluation");
    add_common(eval);
    eval->add_option("--algorithm", eval_algorithm, "local_only|fedavg|fedprox|fl_bt");
    eval->add_option("--ssl-init", eval_ssl_init, "pretrained checkpoint for the encoder");
    eval->add_option("--pretext", eval_pretext,
                     "pretrain in-process with these pretext tasks first (both|ce|mse)");
    eval->add_option("--jobs", eval_jobs, "folds to run concurrently");

    std::vector<std::string> report_inputs;
    std::string report_out;
    auto* report = app.add_subcommand("report", "tabulate fold reports from one or more runs");
    report->add_option("inputs", report_inputs, "run directories or foldreport files")
        ->required();
    report->add_option("--out", report_out, "also write the table to this file");

    auto* print_cfg = app.add_subcommand("print-config", "write the default config to stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints help text or the usage error
        return code == 0 ? 0 : 2;
    }

    if (gen->parsed()) return cmd_gen_data(args);
    if (pre->parsed()) return cmd_pretrain(args, pretrain_pretext);
    if (train->parsed()) {
        return cmd_train(args, train_algorithm, train_ssl_init, train_pretext, train_round_ckpts);
    }
    if (eval->parsed()) {
        return cmd_evaluate(args, eval_algorithm, eval_ssl_init, eval_pretext, eval_jobs);
    }
    if (report->parsed()) return cmd_report(report_inputs, report_out);
    if (print_cfg->parsed()) return cmd_print_config();
    return 2;
}

} // namespace

int run_cli(int argc, const char* const* argv) {
    try {
        return dispatch(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const StructuralError& e) {
        std::cerr << "structural error: " << e.what() << "\n";
        return 4;
    } catch (const ContractError& e) {
        std::cerr << "contract error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace fedsim
