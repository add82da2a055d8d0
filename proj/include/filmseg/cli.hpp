#pragma once

// film-seg command-line driver. run() is the whole program; main() only
// forwards to it, so tests can drive every subcommand in-process.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "filmseg/checkpoint.hpp"
#include "filmseg/config.hpp"
#include "filmseg/dataset_io.hpp"
#include "filmseg/gradcheck.hpp"
#include "filmseg/metrics.hpp"
#include "filmseg/train.hpp"

namespace filmseg::cli {

namespace fs = std::filesystem;

struct Globals {
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
    std::string out;
};

inline void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    io::write_file(path, text);
}

inline std::string fixed(double v, int digits) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
}

inline RunConfig load_config(const std::string& path, const Globals& g) {
    if (path.empty()) throw UsageError("--config is required");
    RunConfig cfg = RunConfig::load(path);
    if (g.seed) cfg.seed = *g.seed;
    if (g.threads) cfg.threads = *g.threads;
    if (!g.out.empty()) cfg.output_dir = g.out;
    cfg.validate();
    return cfg;
}

inline Dataset load_data(const std::string& dir) {
    if (dir.empty()) throw ConfigError("no data directory given");
    if (!fs::exists(fs::path(dir) / "manifest.json")) throw ConfigError("'" + dir + "' has no manifest.json");
    return read_dataset(dir);
}

// Trains and writes final.ckpt, best.ckpt, run_config.json and train_log.csv.
inline TrainResult train_to_dir(const RunConfig& cfg, const Dataset& ds, std::ostream& out, bool verbose = true) {
    if (cfg.output_dir.empty()) throw ConfigError("no output directory (set output_dir or --out)");
    const RunConfig resolved = resolve_config(cfg);
    check_dataset(resolved, ds);
    const fs::path dir = cfg.output_dir;
    fs::create_directories(dir);
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult r = train_model(resolved, ds, [&](const EpochLog& e) {
        if (!verbose) return;
        const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out << "epoch " << e.epoch << "  loss " << fixed(e.train_loss, 4) << "  val_dice " << fixed(e.val_dice, 4)
            << "  lr " << e.lr << "  (" << fixed(t, 1) << "s)\n";
        out.flush();
    });
    write_checkpoint(dir / "final.ckpt", make_checkpoint(r.final_params, r.final_state, r.fingerprint));
    write_checkpoint(dir / "best.ckpt", make_checkpoint(r.best_params, r.best_state, r.fingerprint));
    write_text(dir / "run_config.json", resolved.to_json().dump(2) + "\n");
    write_text(dir / "train_log.csv", log_csv(r.log));
    return r;
}

inline void write_report(const fs::path& dir, const EvalReport& r) {
    write_text(dir / "eval_report.json", r.to_json().dump(2) + "\n");
    write_text(dir / "eval_samples.csv", r.to_csv());
}

inline void print_report(std::ostream& out, const EvalReport& r) {
    out << "overall dice " << fixed(r.overall_mean, 4) << " over " << r.total() << " samples\n";
    for (const auto& [c, s] : r.per_contrast) {
        out << "  " << c << ": n=" << s.count << " mean " << fixed(s.mean, 4) << " std " << fixed(s.std, 4) << "\n";
    }
}

inline int cmd_gen_data(const Globals& g, const std::string& mode, std::size_t phantoms,
                        const std::vector<std::string>& contrasts, const std::vector<std::string>& vocabulary,
                        bool force, std::ostream& out) {
    if (g.out.empty()) throw UsageError("gen-data needs --out");
    const fs::path dir = g.out;
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!force) throw UsageError("refusing to write into non-empty '" + dir.string() + "' (use --force)");
        fs::remove_all(dir);
    }
    if (phantoms < 2) throw ConfigError("need at least 2 phantoms");
    Dataset ds{Vocabulary(vocabulary), mode_name(parse_mode(mode)), {}};
    std::optional<std::vector<std::string>> keep;
    if (!contrasts.empty()) keep = contrasts;
    ds.samples = generate_dataset(parse_mode(mode), phantoms, g.seed.value_or(0), ds.vocabulary, keep);
    write_dataset(dir, ds);
    std::map<std::string, std::size_t> per;
    for (const auto& s : ds.samples) ++per[s.contrast];
    out << "wrote " << ds.samples.size() << " samples (" << ds.mode << ") to " << dir.string() << "\n";
    for (const auto& c : ds.vocabulary.names()) out << "  " << c << ": " << per[c] << "\n";
    return 0;
}

inline int cmd_train(const Globals& g, const std::string& config, std::ostream& out) {
    const RunConfig cfg = load_config(config, g);
    const Dataset ds = load_data(cfg.data_dir);
    const auto r = train_to_dir(cfg, ds, out);
    out << "best val dice " << fixed(r.best_val_dice, 4) << " at epoch " << r.best_epoch << "; checkpoints in "
        << cfg.output_dir << "\n";
    return 0;
}

inline int cmd_eval(const Globals& g, const std::string& checkpoint, std::string data, std::string config,
                    const std::string& partition_name, bool allow_train_eval, std::ostream& out) {
    if (checkpoint.empty()) throw UsageError("eval needs --checkpoint");
    if (partition_name != "test" && partition_name != "val" && partition_name != "train") {
        throw UsageError("--partition must be test, val or train");
    }
    if (partition_name == "train" && !allow_train_eval) {
        throw UsageError("refusing to evaluate on the training partition without --allow-train-eval");
    }
    const Checkpoint ck = read_checkpoint(checkpoint);
    if (config.empty()) config = (fs::path(checkpoint).parent_path() / "run_config.json").string();
    RunConfig cfg = RunConfig::load(config);
    if (data.empty()) data = cfg.data_dir;
    const std::string fp = fingerprint(cfg);
    if (fp != ck.fingerprint) {
        throw ConfigError("config fingerprint mismatch: checkpoint " + ck.fingerprint + ", config " + fp);
    }
    const Dataset ds = load_data(data);
    require_vocabulary(ds, cfg.vocab(), "eval");
    const UNet<float> model(cfg.model());
    const auto [params, state] = unpack_checkpoint(ck, model);
    const Partitions parts = partition(ds, cfg.seed);
    const auto& chosen = partition_name == "test" ? parts.test : partition_name == "val" ? parts.val : parts.train;
    const EvalReport r = evaluate_model(model, params, Dataset{ds.vocabulary, ds.mode, chosen}, cfg);
    const fs::path dir = g.out.empty() ? fs::path(checkpoint).parent_path() : fs::path(g.out);
    write_report(dir, r);
    out << partition_name << " partition, ";
    print_report(out, r);
    return 0;
}

struct GridCell {
    double lr0;
    std::size_t depth;
    std::size_t batch;
};

inline int cmd_gridsearch(const Globals& g, const std::string& config, std::vector<double> lrs,
                          std::vector<std::size_t> depths, std::vector<std::size_t> batches,
                          std::optional<std::size_t> inject_failure, std::ostream& out, std::ostream& err) {
    const RunConfig base = load_config(config, g);
    if (base.output_dir.empty()) throw ConfigError("gridsearch needs an output directory");
    if (lrs.empty()) lrs = {1e-3, 5e-4, 1e-4};
    if (depths.empty()) depths = {2, 3};
    if (batches.empty()) batches = {base.batch_size};
    const Dataset ds = load_data(base.data_dir);
    const fs::path root = base.output_dir;
    fs::create_directories(root);

    std::vector<GridCell> cells;
    for (double lr : lrs)
        for (std::size_t d : depths)
            for (std::size_t b : batches) cells.push_back({lr, d, b});

    std::ostringstream rows, failures;
    rows.precision(9);
    rows << "lr0,depth,batch,best_val_dice\n";
    failures << "lr0,depth,batch,error\n";
    std::optional<std::size_t> winner;
    std::vector<double> scores(cells.size(), -1);
    std::size_t failed = 0;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const GridCell& c = cells[i];
        RunConfig cfg = base;
        cfg.lr0 = c.lr0;
        cfg.lr_min = std::min(cfg.lr_min, c.lr0);
        cfg.depth = c.depth;
        cfg.batch_size = c.batch;
        cfg.output_dir = (root / ("cell_" + std::to_string(i))).string();
        try {
            if (inject_failure && *inject_failure == i) throw Error("injected failure");
            const auto r = train_to_dir(cfg, ds, out, false);
            scores[i] = r.best_val_dice;
            rows << c.lr0 << ',' << c.depth << ',' << c.batch << ',' << r.best_val_dice << '\n';
            out << "cell " << i << ": lr0 " << c.lr0 << " depth " << c.depth << " batch " << c.batch << " -> val dice "
                << fixed(r.best_val_dice, 4) << "\n";
            // Higher val Dice; ties go to smaller depth, then larger batch.
            const auto better = [&](std::size_t a, std::size_t b) {
                if (scores[a] != scores[b]) return scores[a] > scores[b];
                if (cells[a].depth != cells[b].depth) return cells[a].depth < cells[b].depth;
                return cells[a].batch > cells[b].batch;
            };
            if (!winner || better(i, *winner)) winner = i;
        } catch (const std::exception& e) {
            ++failed;
            std::string msg = e.what();
            std::replace(msg.begin(), msg.end(), ',', ';');
            std::replace(msg.begin(), msg.end(), '\n', ' ');
            failures << c.lr0 << ',' << c.depth << ',' << c.batch << ',' << msg << '\n';
            err << "cell " << i << " failed: " << e.what() << "\n";
        }
    }
    write_text(root / "grid.csv", rows.str());
    write_text(root / "grid_failures.csv", failures.str());
    if (!winner) throw Error("all " + std::to_string(cells.size()) + " grid cells failed");

    const GridCell& w = cells[*winner];
    const fs::path wdir = root / ("cell_" + std::to_string(*winner));
    const RunConfig wcfg = RunConfig::load(wdir / "run_config.json");
    const UNet<float> model(wcfg.model());
    const auto [params, state] = unpack_checkpoint(read_checkpoint(wdir / "best.ckpt"), model);
    const auto test = partition(ds, wcfg.seed).test;
    const EvalReport rep = evaluate_model(model, params, Dataset{ds.vocabulary, ds.mode, test}, wcfg);
    write_report(wdir, rep);
    nlohmann::ordered_json j{{"cell", *winner},         {"lr0", w.lr0},
                             {"depth", w.depth},        {"batch", w.batch},
                             {"best_val_dice", scores[*winner]}, {"test_dice", rep.overall_mean},
                             {"failed_cells", failed}};
    write_text(root / "winner.json", j.dump(2) + "\n");
    out << "winner: lr0 " << w.lr0 << " depth " << w.depth << " batch " << w.batch << " val "
        << fixed(scores[*winner], 4) << " test " << fixed(rep.overall_mean, 4) << "\n";
    return 0;
}

struct CompareRow {
    std::string label;
    std::vector<double> dice; // one per seed
    double median() const {
        std::vector<double> v = dice;
        std::sort(v.begin(), v.end());
        const std::size_t n = v.size();
        return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    }
};

// Trains and test-evaluates one configuration; returns the test Dice.
inline double train_and_test(RunConfig cfg, const Dataset& ds, const fs::path& dir, std::ostream& out) {
    cfg.output_dir = dir.string();
    const TrainResult r = train_to_dir(cfg, ds, out, false);
    const UNet<float> model(cfg.model());
    const RunConfig resolved = resolve_config(cfg);
    const auto test = partition(ds, resolved.seed).test;
    const EvalReport rep = evaluate_model(model, r.best_params, Dataset{ds.vocabulary, ds.mode, test}, resolved);
    write_report(dir, rep);
    return rep.overall_mean;
}

inline std::vector<CompareRow> run_compare(const RunConfig& base, const Dataset& t2, const Dataset& t2star,
                                           const Dataset& both, std::size_t seeds, std::ostream& out) {
    if (!(t2.vocabulary == both.vocabulary) || !(t2star.vocabulary == both.vocabulary)) {
        throw VocabularyError("compare: dataset vocabularies differ: [" + t2.vocabulary.joined() + "], [" +
                              t2star.vocabulary.joined() + "], [" + both.vocabulary.joined() + "]");
    }
    struct Variant {
        std::string label;
        const Dataset* data;
        bool conditioning;
        bool standardize;
    };
    const std::vector<Variant> variants{{"U-Net T2w only", &t2, false, false},
                                        {"U-Net T2*w only", &t2star, false, false},
                                        {"U-Net T2w + T2*w", &both, false, false},
                                        {"FiLMed-Unet T2w + T2*w", &both, true, false},
                                        {"U-Net contrast-blind T2w + T2*w", &both, false, true}};
    std::vector<CompareRow> rows;
    const fs::path root = base.output_dir;
    for (std::size_t v = 0; v < variants.size(); ++v) {
        CompareRow row{variants[v].label, {}};
        for (std::size_t k = 0; k < seeds; ++k) {
            RunConfig cfg = base;
            cfg.mode = variants[v].data->mode;
            cfg.vocabulary = variants[v].data->vocabulary.names();
            cfg.conditioning = variants[v].conditioning;
            cfg.standardize_input = variants[v].standardize;
            cfg.seed = base.seed + k;
            const double d =
                train_and_test(cfg, *variants[v].data,
                               root / ("row_" + std::to_string(v)) / ("seed_" + std::to_string(cfg.seed)), out);
            row.dice.push_back(d);
            out << variants[v].label << " seed " << cfg.seed << ": test dice " << fixed(d, 4) << "\n";
            out.flush();
        }
        rows.push_back(row);
    }
    return rows;
}

inline std::string format_compare(const std::vector<CompareRow>& rows) {
    std::ostringstream s;
    std::size_t w = 6;
    for (const auto& r : rows) w = std::max(w, r.label.size());
    s << std::left << std::setw(static_cast<int>(w)) << "Method" << "  Dice\n";
    for (const auto& r : rows) s << std::left << std::setw(static_cast<int>(w)) << r.label << "  " << fixed(r.median(), 2) << "\n";
    return s.str();
}

inline int cmd_compare(const Globals& g, const std::string& config, const std::string& d2, const std::string& d2s,
                       const std::string& dboth, std::size_t seeds, std::ostream& out) {
    RunConfig base = load_config(config, g);
    if (base.output_dir.empty()) throw ConfigError("compare needs an output directory");
    if (seeds == 0) throw UsageError("--seeds must be positive");
    const Dataset t2 = load_data(d2), t2s = load_data(d2s), both = load_data(dboth);
    const auto rows = run_compare(base, t2, t2s, both, seeds, out);
    const std::string table = format_compare(rows);
    std::ostringstream csv;
    csv.precision(9);
    csv << "method,median_dice";
    for (std::size_t k = 0; k < seeds; ++k) csv << ",seed_" << base.seed + k;
    csv << "\n";
    for (const auto& r : rows) {
        csv << '"' << r.label << "\"," << r.median();
        for (double d : r.dice) csv << ',' << d;
        csv << "\n";
    }
    write_text(fs::path(base.output_dir) / "compare.csv", csv.str());
    write_text(fs::path(base.output_dir) / "compare.txt", table);
    out << table;
    return 0;
}

inline int cmd_gradcheck(const std::string& corrupt, std::ostream& out) {
    GradCheckOptions opt;
    opt.fault_op = corrupt;
    const auto results = run_gradcheck_suite(opt);
    bool ok = true;
    std::size_t w = 4;
    for (const auto& r : results) w = std::max(w, r.name.size());
    for (const auto& r : results) {
        out << std::left << std::setw(static_cast<int>(w)) << r.name << "  max_rel_error " << std::scientific
            << std::setprecision(3) << r.max_rel_error << std::defaultfloat << "  " << (r.passed ? "ok" : "FAIL")
            << "\n";
        ok = ok && r.passed;
    }
    out << (ok ? "all gradient checks passed\n" : "gradient check FAILED\n");
    return ok ? 0 : 1;
}

inline int cmd_calibrate(const Globals& g, const std::string& data, double target, std::size_t draws, int max_radius,
                         double tol, std::ostream& out) {
    const Dataset ds = load_data(data);
    const auto masks = lesion_masks(ds.samples);
    if (masks.empty()) throw ValidationError("dataset has no lesion masks to calibrate on");
    RaterPerturbConfig tmpl;
    tmpl.max_radius = max_radius;
    const std::uint64_t seed = g.seed.value_or(0);
    const auto r = calibrate_rater_strength(target, masks, tmpl, draws, seed, tol);
    std::ostringstream s;
    s.precision(9);
    s << "strength " << r.strength << "\nachieved " << r.estimate.mean << "\nstd_error " << r.estimate.std_error
      << "\ntarget " << target << "\nmax_radius " << max_radius << "\ndraws " << draws << "\nmasks " << masks.size()
      << "\nseed " << seed << "\nconverged " << (r.converged ? 1 : 0) << "\n";
    const fs::path dir = g.out.empty() ? fs::path(data) : fs::path(g.out);
    write_text(dir / "rater_strength.txt", s.str());
    out << "strength " << fixed(r.strength, 4) << " gives inter-rater dice " << fixed(r.estimate.mean, 4) << " +/- "
        << fixed(r.estimate.std_error, 4) << " (target " << target << ", " << r.iterations << " iterations)\n";
    return r.converged ? 0 : 1;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"FiLM-conditioned U-Net lesion segmentation on synthetic two-contrast phantoms", "film-seg"};
    app.require_subcommand(1);
    Globals g;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    auto* seed_opt = app.add_option("--seed", seed, "Global random seed")->configurable(false);
    auto* threads_opt = app.add_option("--threads", threads, "Worker threads");
    app.add_option("--out", g.out, "Output directory");
    bool help_config = false;
    app.add_flag("--help-config", help_config, "Print the run-config schema and exit");
    app.fallthrough();

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic phantom dataset");
    std::string mode = "natural";
    std::size_t phantoms = 100;
    std::vector<std::string> contrasts, vocabulary{"T2w", "T2star"};
    bool force = false;
    gen->add_option("--mode", mode, "natural or contrast_flip")->capture_default_str();
    gen->add_option("--phantoms", phantoms, "Number of phantoms (4 slices each)")->capture_default_str();
    gen->add_option("--contrasts", contrasts, "Keep only these contrast labels")->delimiter(',');
    gen->add_option("--vocabulary", vocabulary, "Contrast vocabulary")->delimiter(',');
    gen->add_flag("--force", force, "Overwrite a non-empty output directory");

    auto* train = app.add_subcommand("train", "Train one model");
    std::string config;
    train->add_option("--config", config, "Run config (JSON)")->required();

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test partition");
    std::string checkpoint, data, partition_name = "test";
    bool allow_train_eval = false;
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    eval->add_option("--data", data, "Dataset directory (default: from run config)");
    eval->add_option("--config", config, "Run config (default: run_config.json next to the checkpoint)");
    eval->add_option("--partition", partition_name, "test, val or train")->capture_default_str();
    eval->add_flag("--allow-train-eval", allow_train_eval, "Permit evaluating on the training partition");

    auto* grid = app.add_subcommand("gridsearch", "Grid search over lr0 x depth x batch");
    std::vector<double> lrs;
    std::vector<std::size_t> depths, batches;
    std::optional<std::size_t> inject;
    grid->add_option("--config", config, "Base run config (JSON)")->required();
    grid->add_option("--lr", lrs, "Learning rates")->delimiter(',');
    grid->add_option("--depth", depths, "Depths")->delimiter(',');
    grid->add_option("--batch", batches, "Batch sizes")->delimiter(',');
    grid->add_option("--inject-failure", inject, "Make the given cell index fail")->group("");

    auto* cmp = app.add_subcommand("compare", "Train and report the comparison table");
    std::string d2, d2s, dboth;
    std::size_t seeds = 1;
    cmp->add_option("--config", config, "Base run config (JSON)")->required();
    cmp->add_option("--data-t2", d2, "T2w-only dataset")->required();
    cmp->add_option("--data-t2star", d2s, "T2*w-only dataset")->required();
    cmp->add_option("--data-both", dboth, "Two-contrast dataset")->required();
    cmp->add_option("--seeds", seeds, "Seeds per row; rows report the median")->capture_default_str();

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check of every op");
    std::string corrupt;
    gc->add_option("--corrupt", corrupt, "Corrupt the backward rule of this op")->group("");

    auto* cal = app.add_subcommand("calibrate-raters", "Calibrate rater strength to a target inter-rater Dice");
    double target = 0.61, tol = 0.01;
    std::size_t draws = 8;
    int max_radius = 3;
    cal->add_option("--data", data, "Dataset directory")->required();
    cal->add_option("--target", target, "Target inter-rater Dice")->capture_default_str();
    cal->add_option("--draws", draws, "Raters per mask")->capture_default_str();
    cal->add_option("--max-radius", max_radius, "Disk radius at full strength")->capture_default_str();
    cal->add_option("--tol", tol, "Tolerance on the estimate")->capture_default_str();

    // --help-config works without a subcommand.
    for (int i = 1; i < argc; ++i) {
        if (std::string(argv[i]) == "--help-config") {
            out << config_schema();
            return 0;
        }
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }
    if (seed_opt->count()) g.seed = seed;
    if (threads_opt->count()) g.threads = threads;

    try {
        if (*gen) return cmd_gen_data(g, mode, phantoms, contrasts, vocabulary, force, out);
        if (*train) return cmd_train(g, config, out);
        if (*eval) return cmd_eval(g, checkpoint, data, config, partition_name, allow_train_eval, out);
        if (*grid) return cmd_gridsearch(g, config, lrs, depths, batches, inject, out, err);
        if (*cmp) return cmd_compare(g, config, d2, d2s, dboth, seeds, out);
        if (*gc) return cmd_gradcheck(corrupt, out);
        if (*cal) return cmd_calibrate(g, data, target, draws, max_radius, tol, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

} // namespace filmseg::cli
