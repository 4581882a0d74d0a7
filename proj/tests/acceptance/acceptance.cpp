// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero
// if any criterion fails.

#include "costdet/detector.hpp"
#include "costdet/evaluator.hpp"
#include "costdet/experiment.hpp"
#include "costdet/hashing.hpp"
#include "costdet/losses.hpp"
#include "costdet/rng.hpp"
#include "costdet/syndata.hpp"
#include "costdet/trainer.hpp"

#include "brute_match.hpp"
#include "gradcheck.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

using namespace costdet;
namespace fs = std::filesystem;

namespace {

// Tolerances and sizes pinned here.
constexpr int kGradConfigs = 100;
constexpr std::size_t kGradEntriesPerTerm = 24;
constexpr double kBceIdentityTol = 1e-12;
constexpr double kHandValueTol = 5e-7;  // values are quoted to 6 decimals
constexpr int kOracleInstances = 1000;
constexpr int kComparisonWinsNeeded = 4;

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const Outcome& o, double seconds)
{
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " " << name << ": " << o.detail << " ("
              << std::fixed << std::setprecision(1) << seconds << "s)\n"
              << std::defaultfloat << std::flush;
    failures += o.pass ? 0 : 1;
}

void run_criterion(int id, const std::string& name, const std::function<Outcome()>& body)
{
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    report(id, name, o, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
}

std::string fmt(double v, int prec = 4)
{
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

// ---- 1: gradients ----------------------------------------------------------

using TermFn = std::function<ad::Value(const losses::LossBreakdown&)>;

const std::vector<std::pair<std::string, TermFn>>& loss_terms()
{
    static const std::vector<std::pair<std::string, TermFn>> terms{
        {"rpn_reg", [](const losses::LossBreakdown& b) { return b.rpn_reg; }},
        {"rpn_cls", [](const losses::LossBreakdown& b) { return b.rpn_cls; }},
        {"box", [](const losses::LossBreakdown& b) { return b.box; }},
        {"mask", [](const losses::LossBreakdown& b) { return b.mask; }},
        {"cost_cls", [](const losses::LossBreakdown& b) { return b.cost_cls; }},
        {"slice_cls", [](const losses::LossBreakdown& b) { return b.slice_cls; }},
        {"total", [](const losses::LossBreakdown& b) { return b.total; }},
    };
    return terms;
}

losses::CostConfig random_cost(Rng& rng)
{
    losses::CostConfig c;
    c.alpha_lesion = rng.uniform(0.2, 5.0);
    c.beta_lesion = rng.uniform(0.2, 5.0);
    c.alpha_slice = rng.uniform(0.2, 5.0);
    c.beta_slice = rng.uniform(0.2, 5.0);
    c.use_slice_loss = true;
    return c;
}

std::vector<double> random_vector(Rng& rng, std::size_t n, double scale)
{
    std::vector<double> v(n);
    for (auto& x : v) {
        x = rng.uniform(-scale, scale);
    }
    return v;
}

// Entries for one term: half where the term has a nonzero analytic gradient,
// the rest uniformly over all leaves (mostly zeros, which must stay zero).
std::vector<std::pair<std::size_t, std::size_t>> pick_entries(std::vector<ad::Value>& leaves,
                                                              const std::function<ad::Value()>& f, Rng& rng)
{
    for (auto& l : leaves) {
        l.zero_grad();
    }
    ad::backward(f());
    std::vector<std::pair<std::size_t, std::size_t>> active, all;
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        for (std::size_t i = 0; i < leaves[k].size(); ++i) {
            all.emplace_back(k, i);
            if (leaves[k].grad()[i] != 0.0) {
                active.emplace_back(k, i);
            }
        }
    }
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t n = 0; n < kGradEntriesPerTerm / 2 && !active.empty(); ++n) {
        out.push_back(active[rng.below(active.size())]);
    }
    while (out.size() < kGradEntriesPerTerm) {
        out.push_back(all[rng.below(all.size())]);
    }
    return out;
}

Outcome gradient_correctness()
{
    Rng rng(1001);
    std::map<std::string, double> worst;
    std::map<std::string, int> active_configs;
    std::size_t checked = 0;
    for (int t = 0; t < kGradConfigs; ++t) {
        syndata::GenConfig g;
        g.n_slices = 1;
        g.positive_fraction = t % 4 == 3 ? 0.0 : 1.0;
        g.seed = 5000 + t;
        const auto slice = syndata::generate(g).front();
        const auto model = detector::make_model(slice.channels, {}, 9000 + t);
        Rng fw(t);
        const auto base = detector::forward_train(slice, model, fw);
        const auto cfg = random_cost(rng);

        // Network outputs become leaves; probabilities go through a sigmoid
        // so finite differences stay inside (0, 1).
        const std::size_t a = base.rpn_objectness.rows(), n = base.roi_probs.rows();
        const std::size_t m2 = static_cast<std::size_t>(base.mask_grid * base.mask_grid);
        std::vector<ad::Value> leaves{
            ad::Value::parameter({a, 1}, random_vector(rng, a, 3.0)),
            ad::Value::parameter({a, 4}, random_vector(rng, a * 4, 1.5)),
            ad::Value::parameter({n, 1}, random_vector(rng, n, 3.0)),
            ad::Value::parameter({n, 4}, random_vector(rng, n * 4, 1.5)),
            ad::Value::parameter({n, m2}, random_vector(rng, n * m2, 3.0)),
        };
        const auto breakdown = [&] {
            auto s = base;
            s.rpn_objectness = ad::sigmoid(leaves[0]);
            s.rpn_deltas = leaves[1];
            s.roi_probs = ad::sigmoid(leaves[2]);
            s.roi_deltas = leaves[3];
            s.roi_masks = ad::sigmoid(leaves[4]);
            return losses::total_loss(s, cfg);
        };
        for (const auto& [name, term] : loss_terms()) {
            const auto f = [&, &term = term] { return term(breakdown()); };
            if (!f().requires_grad()) {
                continue;  // routed off for this slice (e.g. box/mask on a negative slice)
            }
            ++active_configs[name];
            const auto entries = pick_entries(leaves, f, rng);
            const auto r = testing::gradcheck_entries(leaves, f, entries);
            worst[name] = std::max(worst[name], r.max_rel_err);
            checked += r.checked;
        }

        // End to end: total loss against RoI-head parameters through the real
        // forward pass, with every layer randomized so all terms are live.
        auto live = model;
        live.params = model.params.clone();
        for (const auto& [pname, v] : model.params.items()) {
            auto d = live.params.get(pname).mutable_data();
            for (auto& x : d) {
                x = rng.uniform(-0.5, 0.5);
            }
        }
        std::vector<std::pair<std::string, std::size_t>> entries;
        for (const char* pname : {"roi_cls.l1.w", "roi_cls.l2.w", "roi_box.l2.w", "roi_mask.l2.w", "roi_mask.l1.b"}) {
            const auto sz = live.params.get(pname).size();
            entries.emplace_back(pname, rng.below(sz));
            entries.emplace_back(pname, rng.below(sz));
        }
        const auto r = testing::gradcheck_params(
            live.params,
            [&] {
                Rng again(t);
                return losses::total_loss(detector::forward_train(slice, live, again), cfg).total;
            },
            entries);
        worst["total(params)"] = std::max(worst["total(params)"], r.max_rel_err);
        ++active_configs["total(params)"];
        checked += r.checked;
    }
    bool ok = true;
    std::string detail;
    for (const auto& [name, err] : worst) {
        const bool enough = active_configs[name] >= kGradConfigs * 3 / 4;
        ok = ok && err <= testing::kGradRelTol && enough;
        detail += name + " " + fmt(err, 2) + "/" + std::to_string(active_configs[name]) + " ";
    }
    detail += "(max rel err / configs, " + std::to_string(checked) + " entries, tol " + fmt(testing::kGradRelTol) + ")";
    return {ok, detail};
}

// ---- 2: loss identities ----------------------------------------------------

Outcome loss_identities()
{
    Rng rng(2002);
    double worst_bce = 0.0;
    bool homogeneous = true;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 1 + rng.below(12);
        std::vector<double> p(n);
        std::vector<int> y(n);
        double plain = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = rng.uniform(0.01, 0.99);
            y[i] = rng.bernoulli(0.5) ? 1 : 0;
            plain += y[i] == 1 ? -std::log(p[i]) : -std::log(1.0 - p[i]);
        }
        plain /= static_cast<double>(n);
        losses::CostConfig unit;
        const auto probs = ad::Value::constant({n, 1}, p);
        worst_bce = std::max(worst_bce, std::abs(losses::lesion_cost_loss(probs, y, unit).item() - plain));

        const std::vector<int> pos(n, 1);
        const double base = losses::lesion_cost_loss(probs, pos, unit).item();
        losses::CostConfig scaled;
        scaled.alpha_lesion = static_cast<double>(1 + rng.below(9));
        scaled.beta_lesion = rng.uniform(0.1, 9.0);
        homogeneous = homogeneous && losses::lesion_cost_loss(probs, pos, scaled).item() == scaled.alpha_lesion * base;
    }
    const auto single = [](double p, int y, double a, double b) {
        losses::CostConfig c;
        c.alpha_lesion = a;
        c.beta_lesion = b;
        const std::vector<int> labels{y};
        return losses::lesion_cost_loss(ad::Value::constant({1, 1}, {p}), labels, c).item();
    };
    const double h1 = single(0.5, 1, 1, 1), h2 = single(0.5, 1, 3, 1), h3 = single(0.9, 0, 1, 3);
    const bool hand = std::abs(h1 - 0.693147) <= kHandValueTol && std::abs(h2 - 2.079442) <= kHandValueTol &&
                      std::abs(h3 - 6.907755) <= kHandValueTol;
    return {worst_bce <= kBceIdentityTol && homogeneous && hand,
            "bce max diff " + fmt(worst_bce, 3) + ", homogeneity " + (homogeneous ? "exact" : "broken") +
                ", hand values " + fmt(h1, 7) + " " + fmt(h2, 7) + " " + fmt(h3, 7)};
}

// ---- 3: metric oracle ------------------------------------------------------

Box random_box(Rng& rng)
{
    const double x = std::round(rng.uniform(0, 20)), y = std::round(rng.uniform(0, 20));
    return {x, y, x + std::round(rng.uniform(2, 10)), y + std::round(rng.uniform(2, 10))};
}

Outcome metric_oracle()
{
    Rng rng(3003);
    int agree = 0;
    for (int t = 0; t < kOracleInstances; ++t) {
        std::vector<Box> gt;
        for (std::size_t i = 0, n = rng.below(6); i < n; ++i) {
            gt.push_back(random_box(rng));
        }
        std::vector<detector::Detection> dets;
        for (std::size_t i = 0, n = rng.below(7); i < n; ++i) {
            dets.push_back({random_box(rng), rng.uniform(), {}});
        }
        const auto got = eval::match_lesions(dets, gt);
        const auto want = testing::brute_force_match(dets, gt);
        agree += got.tp.size() == want.tp && got.fp.size() == want.fp && got.fn.size() == want.fn ? 1 : 0;
    }

    // Hand-counted: 4 positive slices (3 detected), 6 negative (2 with detections).
    const std::vector<std::size_t> dets{1, 2, 1, 0, 1, 3, 0, 0, 0, 0};
    const std::vector<std::size_t> gts{1, 1, 2, 1, 0, 0, 0, 0, 0, 0};
    const auto c = eval::slice_confusion(dets, gts);
    std::vector<eval::SliceOutcome> outs(dets.size());
    for (std::size_t i = 0; i < outs.size(); ++i) {
        outs[i].n_detections = dets[i];
        outs[i].n_gt = gts[i];
    }
    const auto m = eval::aggregate(outs, 0.7);
    const bool hand = c.fpr() == 2.0 / 6.0 && c.fnr() == 0.25 && c.acc() == 0.7 && m.slice_fpr == 2.0 / 6.0 &&
                      m.slice_fnr == 0.25 && m.slice_acc == 0.7;
    return {agree == kOracleInstances && hand, std::to_string(agree) + "/" + std::to_string(kOracleInstances) +
                                                   " instances agree; hand example FPR " + fmt(m.slice_fpr) +
                                                   " FNR " + fmt(m.slice_fnr) + " ACC " + fmt(m.slice_acc)};
}

// ---- 4: routing ------------------------------------------------------------

Outcome routing_invariant()
{
    syndata::GenConfig g;
    g.n_slices = 20;
    g.positive_fraction = 0.0;
    g.seed = 4004;
    const auto data = syndata::generate(g);
    trainer::TrainConfig c;
    c.epochs = 1;
    c.lr = 0.01;
    c.seed = 4;
    c.validate_each_epoch = false;
    c.cost.use_slice_loss = true;
    const auto r = trainer::train(data, c);
    const auto init = detector::make_model(data.front().channels, c.detector, c.seed);
    bool ok = true;
    std::string changed;
    for (const char* name : {"roi_box.l2.w", "roi_box.l2.b", "roi_mask.l2.w", "roi_mask.l2.b"}) {
        const auto a = r.model.params.get(name).data();
        const auto b = init.params.get(name).data();
        if (!std::equal(a.begin(), a.end(), b.begin(), b.end())) {
            ok = false;
            changed += std::string(" ") + name;
        }
    }
    // Proposal-delta outputs: every column of rpn.l2 except objectness (0).
    const auto& w = r.model.params.get("rpn.l2.w");
    const auto& w0 = init.params.get("rpn.l2.w");
    const auto& b = r.model.params.get("rpn.l2.b");
    const auto& b0 = init.params.get("rpn.l2.b");
    bool objectness_moved = false;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (i % w.cols() == 0) {
            objectness_moved = objectness_moved || w[i] != w0[i];
        } else if (w[i] != w0[i]) {
            ok = false;
            changed += " rpn.l2.w[" + std::to_string(i) + "]";
        }
    }
    for (std::size_t i = 1; i < b.size(); ++i) {
        if (b[i] != b0[i]) {
            ok = false;
            changed += " rpn.l2.b[" + std::to_string(i) + "]";
        }
    }
    return {ok && objectness_moved && r.updates == 16,
            std::to_string(r.updates) + " updates on negative slices; box/mask/rpn_reg output layers " +
                (changed.empty() ? "bit-unchanged" : "changed:" + changed) +
                (objectness_moved ? "; objectness trained" : "; objectness did not move")};
}

// ---- 5-8: trends -----------------------------------------------------------

const experiment::RegimeSummary& regime(const experiment::ExperimentResult& r, const std::string& tag)
{
    for (const auto& s : r.summary) {
        if (s.tag == tag) {
            return s;
        }
    }
    throw std::runtime_error("regime " + tag + " missing from the summary");
}

std::vector<double> per_seed(const experiment::ExperimentResult& r, std::size_t regime_index,
                             double eval::MetricsReport::*field)
{
    std::vector<double> v;
    for (const auto& s : r.seeds) {
        v.push_back(s.runs[regime_index].test.*field);
    }
    return v;
}

std::string join(const std::vector<double>& v)
{
    std::string out = "[";
    for (std::size_t i = 0; i < v.size(); ++i) {
        out += (i ? " " : "") + fmt(v[i], 3);
    }
    return out + "]";
}

// ---- 9: determinism --------------------------------------------------------

std::map<std::string, std::string> report_hashes(const fs::path& dir)
{
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        // Train logs carry wall-clock time and are excluded.
        if (e.is_regular_file() && e.path().filename() != "trainlog.csv") {
            out[fs::relative(e.path(), dir).generic_string()] = sha256_file(e.path().string());
        }
    }
    return out;
}

// Two full runs into the same directory: dataset, checkpoints, reports.
Outcome determinism(const fs::path& dir)
{
    experiment::ExperimentConfig cfg;
    cfg.seeds = {3};
    cfg.train.epochs = 2;
    cfg.train.checkpoint_every = 1;
    cfg.out_dir = (dir / "out").string();
    cfg.dataset_path = (dir / "data").string();
    std::map<std::string, std::string> hashes[2];
    std::string dataset_sha[2];
    for (int i = 0; i < 2; ++i) {
        fs::remove_all(dir);
        syndata::save_dataset(syndata::generate(cfg.gen), dir / "data");
        dataset_sha[i] = syndata::dataset_digest(syndata::load_dataset(dir / "data"));
        experiment::run(cfg);
        hashes[i] = report_hashes(dir);
    }
    std::size_t same = 0, checkpoints = 0;
    std::string differ;
    for (const auto& [f, h] : hashes[0]) {
        const auto it = hashes[1].find(f);
        const bool eq = it != hashes[1].end() && it->second == h;
        same += eq ? 1 : 0;
        checkpoints += fs::path(f).extension() == ".ckpt" ? 1 : 0;
        if (!eq) {
            differ += " " + f;
        }
    }
    const bool ok = same == hashes[0].size() && hashes[0].size() == hashes[1].size() &&
                    dataset_sha[0] == dataset_sha[1] && checkpoints > 0;
    return {ok, std::to_string(same) + "/" + std::to_string(hashes[0].size()) + " files byte-identical (" +
                    std::to_string(checkpoints) + " checkpoints, dataset " + dataset_sha[0].substr(0, 12) + ")" +
                    (differ.empty() ? "" : "; differ:" + differ)};
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"costdet acceptance suite"};
    std::string out = "acceptance_runs";
    bool skip_trends = false;
    app.add_option("--out", out, "scratch directory for experiment outputs");
    app.add_flag("--skip-trends", skip_trends, "skip the multi-seed training criteria 5-8");
    CLI11_PARSE(app, argc, argv);
    const fs::path root(out);
    fs::create_directories(root);

    run_criterion(1, "gradient correctness", gradient_correctness);
    run_criterion(2, "loss identities", loss_identities);
    run_criterion(3, "metric oracle equivalence", metric_oracle);
    run_criterion(4, "routing invariant", routing_invariant);

    if (!skip_trends) {
        std::optional<experiment::ExperimentResult> result;
        std::string run_error;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            experiment::ExperimentConfig cfg;
            cfg.out_dir = (root / "experiment").string();
            fs::remove_all(cfg.out_dir);
            result = experiment::run(cfg, [](const std::string& msg) { std::cerr << msg << "\n"; });
        } catch (const std::exception& e) {
            run_error = e.what();
        }
        const double train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << "experiment: 5 seeds x 4 regimes in " << std::fixed << std::setprecision(1) << train_seconds
                  << "s\n"
                  << std::defaultfloat;
        const auto trend = [&](int id, const std::string& name, const std::function<Outcome()>& body) {
            run_criterion(id, name, [&] { return result ? body() : Outcome{false, "experiment failed: " + run_error}; });
        };
        trend(5, "FNR-control trend", [&] {
            const auto& base = regime(*result, "a1b1");
            const auto& fnr = regime(*result, "a3b1");
            return Outcome{fnr.median_lesion_fnr < base.median_lesion_fnr,
                           "median lesion FNR a3b1 " + fmt(fnr.median_lesion_fnr) + " vs a1b1 " +
                               fmt(base.median_lesion_fnr) + "; per seed a3b1 " +
                               join(per_seed(*result, 1, &eval::MetricsReport::lesion_fnr)) + " a1b1 " +
                               join(per_seed(*result, 0, &eval::MetricsReport::lesion_fnr))};
        });
        trend(6, "FP-control trend", [&] {
            const auto& base = regime(*result, "a1b1");
            const auto& fp = regime(*result, "a1b3");
            return Outcome{fp.median_lesion_fp_per_slice < base.median_lesion_fp_per_slice,
                           "median FP/slice a1b3 " + fmt(fp.median_lesion_fp_per_slice) + " vs a1b1 " +
                               fmt(base.median_lesion_fp_per_slice) + "; lesion FNR a1b3 " +
                               fmt(fp.median_lesion_fnr) + " vs " + fmt(base.median_lesion_fnr) +
                               " (recorded); per seed a1b3 " +
                               join(per_seed(*result, 2, &eval::MetricsReport::lesion_fp_per_slice)) + " a1b1 " +
                               join(per_seed(*result, 0, &eval::MetricsReport::lesion_fp_per_slice))};
        });
        trend(7, "slice-loss benefit trend", [&] {
            const auto& base = regime(*result, "a1b1");
            const auto& slice = regime(*result, "a1b1_sa3sb1");
            return Outcome{slice.median_slice_fnr <= base.median_slice_fnr,
                           "median slice FNR with slice loss " + fmt(slice.median_slice_fnr) + " vs without " +
                               fmt(base.median_slice_fnr) + "; per seed " +
                               join(per_seed(*result, 3, &eval::MetricsReport::slice_fnr)) + " vs " +
                               join(per_seed(*result, 0, &eval::MetricsReport::slice_fnr))};
        });
        trend(8, "cost-vs-threshold comparison", [&] {
            const auto& fnr = regime(*result, "a3b1");
            std::string seeds;
            for (const auto& s : result->seeds) {
                const auto& c = s.comparisons.front();
                seeds += " seed" + std::to_string(s.seed) + " " + fmt(c.cost.metrics.lesion_fp_per_slice, 3) + "<=" +
                         fmt(c.baseline_matched.metrics.lesion_fp_per_slice, 3) + "@" +
                         fmt(c.baseline_matched.threshold, 2) + (c.cost_fp_not_worse ? "" : "(no)");
            }
            return Outcome{fnr.comparison_wins >= kComparisonWinsNeeded,
                           "a3b1 FP/slice not worse than FNR-matched baseline in " +
                               std::to_string(fnr.comparison_wins) + "/" + std::to_string(result->seeds.size()) +
                               " seeds (need " + std::to_string(kComparisonWinsNeeded) + "):" + seeds};
        });
    }

    run_criterion(9, "determinism", [&] { return determinism(root / "determinism"); });

    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << "\n";
    return failures == 0 ? 0 : 1;
}
