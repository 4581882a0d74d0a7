#include "costdet/cli.hpp"

#include "costdet/errors.hpp"
#include "costdet/evaluator.hpp"
#include "costdet/experiment.hpp"
#include "costdet/syndata.hpp"
#include "costdet/trainer.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>

namespace costdet::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct CostFlags {
    std::optional<double> alpha_lesion;
    std::optional<double> beta_lesion;
    std::optional<double> alpha_slice;
    std::optional<double> beta_slice;
    bool use_slice_loss = false;

    void add(CLI::App* cmd)
    {
        cmd->add_option("--alpha-lesion", alpha_lesion, "weight on lesion-level positives");
        cmd->add_option("--beta-lesion", beta_lesion, "weight on lesion-level negatives");
        cmd->add_option("--alpha-slice", alpha_slice, "weight on slice-level positives");
        cmd->add_option("--beta-slice", beta_slice, "weight on slice-level negatives");
        cmd->add_flag("--use-slice-loss", use_slice_loss, "add the slice-level cost loss");
    }

    void apply(losses::CostConfig& c) const
    {
        if (alpha_lesion) c.alpha_lesion = *alpha_lesion;
        if (beta_lesion) c.beta_lesion = *beta_lesion;
        if (alpha_slice) c.alpha_slice = *alpha_slice;
        if (beta_slice) c.beta_slice = *beta_slice;
        c.use_slice_loss = c.use_slice_loss || use_slice_loss;
    }
};

json read_json_file(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config " + path);
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("malformed config " + path + ": " + e.what());
    }
}

std::vector<syndata::SyntheticSlice> load_data(const std::string& path)
{
    if (path.empty() || !fs::exists(fs::path(path) / "manifest.json")) {
        throw ConfigError("dataset not found: " + (path.empty() ? std::string("(none)") : path));
    }
    return syndata::load_dataset(path);
}

std::vector<syndata::SyntheticSlice> pick_split(const std::vector<syndata::SyntheticSlice>& data,
                                                const std::string& split)
{
    auto s = syndata::filter_split(data, syndata::split_from_string(split));
    if (s.empty()) {
        throw EvaluationError("empty split: " + split);
    }
    return s;
}

void check_threshold(double t)
{
    if (!(t > 0.0 && t < 1.0)) {
        throw ConfigError("--threshold must be in (0, 1)");
    }
}

void write_file(const fs::path& p, const std::string& text)
{
    if (p.has_parent_path()) {
        fs::create_directories(p.parent_path());
    }
    std::ofstream out(p, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + p.string());
    }
    out << text;
}

// Column label for a checkpoint: its cost tag, plus the seed when the tag
// alone is ambiguous.
std::vector<std::string> column_names(const std::vector<trainer::LoadedCheckpoint>& cks)
{
    std::map<std::string, int> count;
    for (const auto& c : cks) {
        ++count[c.meta.cost.tag()];
    }
    std::vector<std::string> names;
    for (const auto& c : cks) {
        auto tag = c.model.kind == detector::ModelKind::Oracle ? std::string("oracle") : c.meta.cost.tag();
        if (count[c.meta.cost.tag()] > 1) {
            tag += "/seed" + std::to_string(c.meta.seed);
        }
        names.push_back(tag);
    }
    return names;
}

} // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Cost-sensitive two-stage lesion detector on synthetic slices"};
    app.require_subcommand(1);

    // generate
    auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
    std::string gen_config;
    std::optional<int> gen_n;
    std::optional<double> gen_pf;
    std::optional<std::uint64_t> gen_seed;
    std::string gen_out;
    gen->add_option("--config", gen_config, "JSON generator config");
    gen->add_option("--n", gen_n, "number of slices");
    gen->add_option("--positive-fraction", gen_pf, "fraction of slices with lesions");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--out", gen_out, "output directory")->required();

    // train
    auto* tr = app.add_subcommand("train", "train one model per seed");
    std::string tr_data, tr_out = "runs", tr_config;
    std::vector<std::uint64_t> tr_seeds;
    std::optional<int> tr_epochs, tr_ckpt_every;
    std::optional<double> tr_lr;
    bool tr_augment = false;
    CostFlags tr_cost;
    tr->add_option("--data", tr_data, "dataset directory");
    tr->add_option("--out", tr_out, "output directory");
    tr->add_option("--config", tr_config, "JSON training config");
    tr->add_option("--seed", tr_seeds, "training seed (repeatable)");
    tr->add_option("--epochs", tr_epochs, "epochs");
    tr->add_option("--lr", tr_lr, "learning rate");
    tr->add_option("--checkpoint-every", tr_ckpt_every, "save a checkpoint every N epochs");
    tr->add_flag("--augment", tr_augment, "random affine augmentation");
    tr_cost.add(tr);

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "metrics table for one or more checkpoints");
    std::string ev_data, ev_split = "test", ev_out;
    std::vector<std::string> ev_ckpts;
    double ev_threshold = 0.7;
    int ev_max_det = 6;
    ev->add_option("--data", ev_data, "dataset directory");
    ev->add_option("--checkpoint", ev_ckpts, "checkpoint (repeatable)")->required();
    ev->add_option("--split", ev_split, "train, val or test");
    ev->add_option("--threshold", ev_threshold, "detection threshold");
    ev->add_option("--max-det", ev_max_det, "detections kept per slice");
    ev->add_option("--out", ev_out, "directory for metrics.json and metrics.csv");

    // sweep
    auto* sw = app.add_subcommand("sweep", "metrics over a threshold grid");
    std::string sw_data, sw_ckpt, sw_split = "test", sw_out;
    double sw_lo = 0.05, sw_hi = 0.95, sw_step = 0.05;
    int sw_max_det = 6;
    sw->add_option("--data", sw_data, "dataset directory");
    sw->add_option("--checkpoint", sw_ckpt, "checkpoint")->required();
    sw->add_option("--split", sw_split, "train, val or test");
    sw->add_option("--lo", sw_lo, "first threshold");
    sw->add_option("--hi", sw_hi, "last threshold");
    sw->add_option("--step", sw_step, "grid step");
    sw->add_option("--max-det", sw_max_det, "detections kept per slice");
    sw->add_option("--out", sw_out, "CSV path (stdout when omitted)");

    // compare
    auto* cmp = app.add_subcommand("compare", "cost-trained model vs baseline threshold adjustment");
    std::string cmp_data, cmp_base, cmp_cost, cmp_split = "test", cmp_out = "compare", cmp_level = "lesion";
    double cmp_threshold = 0.7, cmp_lo = 0.05, cmp_hi = 0.95, cmp_step = 0.05;
    int cmp_max_det = 6;
    cmp->add_option("--data", cmp_data, "dataset directory");
    cmp->add_option("--baseline", cmp_base, "baseline checkpoint")->required();
    cmp->add_option("--cost", cmp_cost, "cost-trained checkpoint")->required();
    cmp->add_option("--split", cmp_split, "train, val or test");
    cmp->add_option("--threshold", cmp_threshold, "operating threshold of the cost model");
    cmp->add_option("--level", cmp_level, "FNR used for matching: lesion or slice");
    cmp->add_option("--lo", cmp_lo, "first baseline threshold");
    cmp->add_option("--hi", cmp_hi, "last baseline threshold");
    cmp->add_option("--step", cmp_step, "baseline grid step");
    cmp->add_option("--max-det", cmp_max_det, "detections kept per slice");
    cmp->add_option("--out", cmp_out, "directory for comparison.json and comparison.svg");

    // experiment
    auto* ex = app.add_subcommand("experiment", "all regimes x seeds, tables and comparisons");
    std::string ex_config, ex_out, ex_data;
    std::vector<std::uint64_t> ex_seeds;
    std::optional<double> ex_threshold;
    std::optional<int> ex_max_det, ex_epochs;
    std::optional<double> ex_lr;
    ex->add_option("--config", ex_config, "JSON experiment config");
    ex->add_option("--data", ex_data, "dataset directory (overrides generation)");
    ex->add_option("--out", ex_out, "output directory");
    ex->add_option("--seed", ex_seeds, "seed (repeatable)");
    ex->add_option("--threshold", ex_threshold, "detection threshold");
    ex->add_option("--max-det", ex_max_det, "detections kept per slice");
    ex->add_option("--epochs", ex_epochs, "epochs");
    ex->add_option("--lr", ex_lr, "learning rate");

    // oracle
    auto* orc = app.add_subcommand("oracle", "write a checkpoint that returns ground-truth boxes (testing stub)");
    std::string orc_out;
    int orc_channels = 3;
    orc->add_option("--out", orc_out, "checkpoint path")->required();
    orc->add_option("--channels", orc_channels, "input channels");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*gen) {
            syndata::GenConfig g;
            if (!gen_config.empty()) {
                const auto j = read_json_file(gen_config);
                g = (j.contains("gen") ? j.at("gen") : j).get<syndata::GenConfig>();
            }
            if (gen_n) g.n_slices = *gen_n;
            if (gen_pf) g.positive_fraction = *gen_pf;
            if (gen_seed) g.seed = *gen_seed;
            g.validate();
            const auto data = syndata::generate(g);
            const auto m = syndata::save_dataset(data, gen_out);
            write_file(fs::path(gen_out) / "gen_config.json", json(g).dump(2) + "\n");
            std::size_t positives = 0;
            for (const auto& s : data) {
                positives += s.lesions.empty() ? 0 : 1;
            }
            out << "wrote " << data.size() << " slices to " << gen_out << "\n"
                << "split counts: train " << m.train_count << ", val " << m.val_count << ", test " << m.test_count
                << "\n"
                << "positive slices: " << positives << "\n"
                << "dataset sha256: " << syndata::dataset_digest(data) << "\n";
        } else if (*tr) {
            trainer::TrainConfig tc;
            if (!tr_config.empty()) {
                const auto j = read_json_file(tr_config);
                tc = (j.contains("train") ? j.at("train") : j).get<trainer::TrainConfig>();
            }
            if (tr_epochs) tc.epochs = *tr_epochs;
            if (tr_lr) tc.lr = *tr_lr;
            if (tr_ckpt_every) tc.checkpoint_every = *tr_ckpt_every;
            tc.augment = tc.augment || tr_augment;
            tr_cost.apply(tc.cost);
            tc.validate();
            const auto data = load_data(tr_data);
            if (tr_seeds.empty()) {
                tr_seeds.push_back(tc.seed);
            }
            for (const auto seed : tr_seeds) {
                auto cfg = tc;
                cfg.seed = seed;
                const auto dir = experiment::run_dir(tr_out, cfg.cost, seed);
                const trainer::CheckpointMeta meta{seed, cfg.cost, json(cfg)};
                trainer::TrainHooks hooks;
                hooks.on_epoch = [&](const trainer::EpochRow& r) {
                    out << cfg.cost.tag() << " seed " << seed << " epoch " << r.epoch << " loss " << r.total << "\n";
                };
                hooks.on_checkpoint = [&](int epoch, const detector::Model& m) {
                    trainer::save_checkpoint(dir / ("epoch" + std::to_string(epoch) + ".ckpt"), m, meta);
                };
                const auto result = trainer::train(data, cfg, hooks);
                trainer::save_checkpoint(dir / "model.ckpt", result.model, meta);
                write_file(dir / "trainlog.csv", result.log.csv());
                out << "checkpoint " << (dir / "model.ckpt").string() << "\n";
            }
        } else if (*ev) {
            check_threshold(ev_threshold);
            const auto data = load_data(ev_data);
            const auto split = pick_split(data, ev_split);
            std::vector<trainer::LoadedCheckpoint> cks;
            for (const auto& p : ev_ckpts) {
                cks.push_back(trainer::load_checkpoint(p));
            }
            const auto names = column_names(cks);
            std::vector<std::pair<std::string, eval::MetricsReport>> columns;
            json reports = json::array();
            std::string csv = "column," + eval::metrics_csv_header() + "\n";
            for (std::size_t i = 0; i < cks.size(); ++i) {
                auto m = eval::evaluate(cks[i].model, split, ev_threshold, ev_max_det);
                reports.push_back({{"column", names[i]}, {"checkpoint", ev_ckpts[i]}, {"metrics", eval::to_json(m)}});
                csv += names[i] + "," + eval::metrics_csv_row(m) + "\n";
                columns.emplace_back(names[i], std::move(m));
            }
            out << eval::format_table(columns);
            if (!ev_out.empty()) {
                write_file(fs::path(ev_out) / "metrics.json", reports.dump(2) + "\n");
                write_file(fs::path(ev_out) / "metrics.csv", csv);
                write_file(fs::path(ev_out) / "table.txt", eval::format_table(columns));
            }
        } else if (*sw) {
            const auto grid = eval::threshold_grid(sw_lo, sw_hi, sw_step);
            const auto data = load_data(sw_data);
            const auto split = pick_split(data, sw_split);
            const auto ck = trainer::load_checkpoint(sw_ckpt);
            const auto csv = eval::sweep_csv(eval::threshold_sweep(ck.model, split, grid, sw_max_det));
            if (sw_out.empty()) {
                out << csv;
            } else {
                write_file(sw_out, csv);
                out << "wrote " << grid.size() << " rows to " << sw_out << "\n";
            }
        } else if (*cmp) {
            check_threshold(cmp_threshold);
            if (cmp_level != "lesion" && cmp_level != "slice") {
                throw ConfigError("--level must be lesion or slice");
            }
            const auto grid = eval::threshold_grid(cmp_lo, cmp_hi, cmp_step);
            const auto data = load_data(cmp_data);
            const auto split = pick_split(data, cmp_split);
            const auto base = trainer::load_checkpoint(cmp_base);
            const auto cost = trainer::load_checkpoint(cmp_cost);
            const auto r = eval::compare_cost_vs_threshold(
                base.model, cost.model, split, grid, cmp_threshold, cmp_max_det,
                cmp_level == "slice" ? eval::FnrLevel::Slice : eval::FnrLevel::Lesion);
            write_file(fs::path(cmp_out) / "comparison.json", eval::to_json(r).dump(2) + "\n");
            write_file(fs::path(cmp_out) / "comparison.svg", eval::comparison_svg(r));
            out << std::setprecision(6) << "cost model @" << cmp_threshold
                << ": FP/slice " << r.cost.metrics.lesion_fp_per_slice << ", target FNR " << r.target_fnr << "\n"
                << "baseline @" << r.baseline_matched.threshold << ": FP/slice "
                << r.baseline_matched.metrics.lesion_fp_per_slice << "\n"
                << "delta FP/slice " << r.delta_fp_per_slice << (r.cost_fp_not_worse ? " (cost not worse)" : "")
                << "\n";
        } else if (*ex) {
            experiment::ExperimentConfig cfg;
            if (!ex_config.empty()) {
                cfg = experiment::load_config(ex_config);
            }
            if (!ex_data.empty()) {
                if (!fs::exists(fs::path(ex_data) / "manifest.json")) {
                    throw ConfigError("dataset not found: " + ex_data);
                }
                cfg.dataset_path = ex_data;
            }
            if (!ex_out.empty()) cfg.out_dir = ex_out;
            if (!ex_seeds.empty()) cfg.seeds = ex_seeds;
            if (ex_threshold) cfg.eval_threshold = *ex_threshold;
            if (ex_max_det) cfg.max_det = *ex_max_det;
            if (ex_epochs) cfg.train.epochs = *ex_epochs;
            if (ex_lr) cfg.train.lr = *ex_lr;
            cfg.validate();
            const auto r = experiment::run(cfg, [&](const std::string& msg) { out << msg << "\n" << std::flush; });
            std::ifstream table(fs::path(cfg.out_dir) / "table.txt");
            out << "median over " << cfg.seeds.size() << " seeds:\n" << table.rdbuf();
            for (const auto& s : r.summary) {
                if (s.tag != cfg.regimes.front().tag()) {
                    out << s.tag << " FP/slice not worse than FNR-matched baseline in " << s.comparison_wins << "/"
                        << cfg.seeds.size() << " seeds\n";
                }
            }
        } else if (*orc) {
            const auto model = detector::make_oracle_model(orc_channels);
            trainer::save_checkpoint(orc_out, model, trainer::CheckpointMeta{});
            out << "wrote oracle checkpoint " << orc_out << "\n";
        }
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}

} // namespace costdet::cli
