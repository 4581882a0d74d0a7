#include "costdet/experiment.hpp"

#include "costdet/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace costdet::experiment {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::vector<losses::CostConfig> ExperimentConfig::default_regimes()
{
    losses::CostConfig base;
    losses::CostConfig fnr = base;
    fnr.alpha_lesion = 3.0;
    losses::CostConfig fp = base;
    fp.beta_lesion = 3.0;
    losses::CostConfig slice = base;
    slice.use_slice_loss = true;
    slice.alpha_slice = 3.0;
    return {base, fnr, fp, slice};
}

trainer::TrainConfig ExperimentConfig::default_train()
{
    trainer::TrainConfig t;
    t.lr = 0.003;
    t.epochs = 30;
    return t;
}

void ExperimentConfig::validate() const
{
    if (!dataset_path) {
        gen.validate();
    }
    train.validate();
    if (!(eval_threshold > 0.0 && eval_threshold < 1.0)) {
        throw ConfigError("eval_threshold must be in (0, 1)");
    }
    if (max_det < 1) {
        throw ConfigError("max_det must be >= 1");
    }
    if (seeds.empty()) {
        throw ConfigError("seeds list is empty");
    }
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
        throw ConfigError("seeds must be distinct");
    }
    if (regimes.empty()) {
        throw ConfigError("regimes list is empty");
    }
    std::set<std::string> tags;
    for (const auto& r : regimes) {
        r.validate();
        if (!tags.insert(r.tag()).second) {
            throw ConfigError("duplicate regime " + r.tag());
        }
    }
    for (std::size_t i = 0; i < sweep_grid.size(); ++i) {
        if (!(sweep_grid[i] > 0.0 && sweep_grid[i] < 1.0) || (i > 0 && !(sweep_grid[i] > sweep_grid[i - 1]))) {
            throw ConfigError("sweep_grid must be strictly increasing inside (0, 1)");
        }
    }
    if (out_dir.empty()) {
        throw ConfigError("out_dir is empty");
    }
}

void to_json(json& j, const ExperimentConfig& c)
{
    j = json{{"gen", c.gen},
             {"dataset_per_seed", c.dataset_per_seed},
             {"train", c.train},
             {"eval_threshold", c.eval_threshold},
             {"max_det", c.max_det},
             {"sweep_grid", c.sweep_grid},
             {"out_dir", c.out_dir},
             {"seeds", c.seeds},
             {"regimes", c.regimes}};
    j["dataset_path"] = c.dataset_path ? json(*c.dataset_path) : json(nullptr);
}

void from_json(const json& j, ExperimentConfig& c)
{
    ExperimentConfig d;
    if (j.contains("dataset_path") && !j.at("dataset_path").is_null()) {
        d.dataset_path = j.at("dataset_path").get<std::string>();
    }
    if (j.contains("gen")) {
        d.gen = j.at("gen").get<syndata::GenConfig>();
    }
    d.dataset_per_seed = j.value("dataset_per_seed", d.dataset_per_seed);
    if (j.contains("train")) {
        d.train = j.at("train").get<trainer::TrainConfig>();
    }
    d.eval_threshold = j.value("eval_threshold", d.eval_threshold);
    d.max_det = j.value("max_det", d.max_det);
    d.sweep_grid = j.value("sweep_grid", d.sweep_grid);
    d.out_dir = j.value("out_dir", d.out_dir);
    d.seeds = j.value("seeds", d.seeds);
    if (j.contains("regimes")) {
        d.regimes = j.at("regimes").get<std::vector<losses::CostConfig>>();
    }
    c = std::move(d);
}

ExperimentConfig load_config(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config " + path.string());
    }
    try {
        auto cfg = json::parse(in).get<ExperimentConfig>();
        cfg.validate();
        return cfg;
    } catch (const json::exception& e) {
        throw ConfigError("malformed config " + path.string() + ": " + e.what());
    }
}

double median(std::vector<double> values)
{
    std::erase_if(values, [](double v) { return !std::isfinite(v); });
    if (values.empty()) {
        return eval::kNaN;
    }
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

fs::path run_dir(const fs::path& out, const losses::CostConfig& cost, std::uint64_t seed)
{
    return out / cost.tag() / ("seed" + std::to_string(seed));
}

namespace {

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

json comparison_summary(const eval::ComparisonReport& c)
{
    return {{"cost_fp_per_slice", c.cost.metrics.lesion_fp_per_slice},
            {"baseline_threshold", c.baseline_matched.threshold},
            {"baseline_fp_per_slice", c.baseline_matched.metrics.lesion_fp_per_slice},
            {"cost_fp_not_worse", c.cost_fp_not_worse}};
}

eval::MetricsReport median_report(const std::vector<SeedResult>& seeds, std::size_t regime, double threshold)
{
    std::vector<double> fp, fnr, sfpr, sfnr, acc;
    for (const auto& s : seeds) {
        const auto& m = s.runs[regime].test;
        fp.push_back(m.lesion_fp_per_slice);
        fnr.push_back(m.lesion_fnr);
        sfpr.push_back(m.slice_fpr);
        sfnr.push_back(m.slice_fnr);
        acc.push_back(m.slice_acc);
    }
    eval::MetricsReport r;
    r.threshold = threshold;
    r.lesion_fp_per_slice = median(fp);
    r.lesion_fnr = median(fnr);
    r.slice_fpr = median(sfpr);
    r.slice_fnr = median(sfnr);
    r.slice_acc = median(acc);
    return r;
}

} // namespace

ExperimentResult run(const ExperimentConfig& cfg, const Progress& progress)
{
    cfg.validate();
    const auto say = [&](const std::string& msg) {
        if (progress) {
            progress(msg);
        }
    };
    const fs::path out = cfg.out_dir;
    fs::create_directories(out);
    write_file(out / "config.json", json(cfg).dump(2) + "\n");

    std::vector<double> grid = cfg.sweep_grid;
    ExperimentResult result;

    std::vector<syndata::SyntheticSlice> shared;
    if (cfg.dataset_path) {
        shared = syndata::load_dataset(*cfg.dataset_path);
    } else if (!cfg.dataset_per_seed) {
        shared = syndata::generate(cfg.gen);
    }

    for (const auto seed : cfg.seeds) {
        std::vector<syndata::SyntheticSlice> own;
        if (!cfg.dataset_path && cfg.dataset_per_seed) {
            auto g = cfg.gen;
            g.seed = cfg.gen.seed + seed;
            own = syndata::generate(g);
        }
        const auto& data = own.empty() ? shared : own;
        const auto test = syndata::filter_split(data, syndata::Split::Test);
        if (test.empty()) {
            throw EvaluationError("empty split: test");
        }

        SeedResult sr;
        sr.seed = seed;
        sr.dataset_sha256 = syndata::dataset_digest(data);
        std::vector<detector::Model> models;
        for (const auto& cost : cfg.regimes) {
            auto tc = cfg.train;
            tc.seed = seed;
            tc.cost = cost;
            const fs::path dir = run_dir(out, cost, seed);
            fs::create_directories(dir);
            const trainer::CheckpointMeta meta{seed, cost, json(tc)};
            trainer::TrainHooks hooks;
            hooks.on_checkpoint = [&](int epoch, const detector::Model& m) {
                trainer::save_checkpoint(dir / ("epoch" + std::to_string(epoch) + ".ckpt"), m, meta);
            };
            say("train " + cost.tag() + " seed " + std::to_string(seed));
            auto trained = trainer::train(data, tc, hooks);

            RegimeRun rr;
            rr.cost = cost;
            rr.seed = seed;
            rr.checkpoint = dir / "model.ckpt";
            rr.log = std::move(trained.log);
            trainer::save_checkpoint(rr.checkpoint, trained.model, meta);
            write_file(dir / "trainlog.csv", rr.log.csv());
            rr.test = eval::evaluate(trained.model, test, cfg.eval_threshold, cfg.max_det);
            write_file(dir / "metrics.json", eval::to_json(rr.test).dump(2) + "\n");
            write_file(dir / "metrics.csv", eval::metrics_csv_header() + "\n" + eval::metrics_csv_row(rr.test) + "\n");
            sr.runs.push_back(std::move(rr));
            models.push_back(std::move(trained.model));
        }

        const fs::path seed_dir = out / ("seed" + std::to_string(seed));
        std::vector<std::pair<std::string, eval::MetricsReport>> columns;
        for (const auto& rr : sr.runs) {
            columns.emplace_back(rr.cost.tag(), rr.test);
        }
        write_file(seed_dir / "table.txt", eval::format_table(columns));

        for (std::size_t i = 1; i < models.size(); ++i) {
            auto cmp = eval::compare_cost_vs_threshold(models[0], models[i], test, grid, cfg.eval_threshold,
                                                       cfg.max_det);
            const auto tag = sr.runs[i].cost.tag();
            write_file(seed_dir / ("compare_" + tag + ".json"), eval::to_json(cmp).dump(2) + "\n");
            write_file(seed_dir / ("compare_" + tag + ".svg"), eval::comparison_svg(cmp));
            if (i == 1) {
                write_file(seed_dir / "sweep_baseline.csv", eval::sweep_csv(cmp.baseline_sweep));
            }
            sr.comparisons.push_back(std::move(cmp));
        }
        if (models.size() == 1) {
            write_file(seed_dir / "sweep_baseline.csv",
                       eval::sweep_csv(eval::threshold_sweep(models[0], test, grid, cfg.max_det)));
        }
        result.seeds.push_back(std::move(sr));
    }

    std::vector<std::pair<std::string, eval::MetricsReport>> columns;
    for (std::size_t k = 0; k < cfg.regimes.size(); ++k) {
        const auto m = median_report(result.seeds, k, cfg.eval_threshold);
        RegimeSummary rs;
        rs.tag = cfg.regimes[k].tag();
        rs.median_lesion_fp_per_slice = m.lesion_fp_per_slice;
        rs.median_lesion_fnr = m.lesion_fnr;
        rs.median_slice_fpr = m.slice_fpr;
        rs.median_slice_fnr = m.slice_fnr;
        rs.median_slice_acc = m.slice_acc;
        if (k > 0) {
            for (const auto& s : result.seeds) {
                rs.comparison_wins += s.comparisons[k - 1].cost_fp_not_worse ? 1 : 0;
            }
        }
        result.summary.push_back(rs);
        columns.emplace_back(rs.tag, m);
    }
    write_file(out / "table.txt", eval::format_table(columns));
    write_file(out / "summary.json", to_json(result).dump(2) + "\n");
    return result;
}

namespace {

json number(double v)
{
    return std::isfinite(v) ? json(v) : json(nullptr);
}

} // namespace

json to_json(const ExperimentResult& r)
{
    json seeds = json::array();
    for (const auto& s : r.seeds) {
        json runs = json::array();
        for (const auto& rr : s.runs) {
            runs.push_back({{"tag", rr.cost.tag()},
                            // Relative to out_dir so reports do not depend on where they were written.
                            {"checkpoint", (run_dir("", rr.cost, rr.seed) / "model.ckpt").generic_string()},
                            {"test", eval::to_json(rr.test)}});
        }
        json cmps = json::array();
        for (std::size_t i = 0; i < s.comparisons.size(); ++i) {
            auto c = comparison_summary(s.comparisons[i]);
            c["tag"] = s.runs[i + 1].cost.tag();
            cmps.push_back(std::move(c));
        }
        seeds.push_back({{"seed", s.seed},
                         {"dataset_sha256", s.dataset_sha256},
                         {"runs", std::move(runs)},
                         {"comparisons", std::move(cmps)}});
    }
    json summary = json::array();
    for (const auto& s : r.summary) {
        summary.push_back({{"tag", s.tag},
                           {"median_lesion_fp_per_slice", number(s.median_lesion_fp_per_slice)},
                           {"median_lesion_fnr", number(s.median_lesion_fnr)},
                           {"median_slice_fpr", number(s.median_slice_fpr)},
                           {"median_slice_fnr", number(s.median_slice_fnr)},
                           {"median_slice_acc", number(s.median_slice_acc)},
                           {"comparison_wins", s.comparison_wins}});
    }
    return {{"seeds", std::move(seeds)}, {"summary", std::move(summary)}};
}

} // namespace costdet::experiment
