#include "costdet/evaluator.hpp"

#include "costdet/errors.hpp"
#include "costdet/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>
#include <tuple>

namespace costdet::eval {

using nlohmann::json;

namespace {

double ratio(std::size_t num, std::size_t den)
{
    return den == 0 ? kNaN : static_cast<double>(num) / static_cast<double>(den);
}

} // namespace

double SliceCounts::fpr() const { return ratio(fp, fp + tn); }
double SliceCounts::fnr() const { return ratio(fn, fn + tp); }
double SliceCounts::acc() const { return ratio(tp + tn, total()); }

LesionMatchResult match_lesions(std::span<const detector::Detection> detections, std::span<const Box> gt,
                                double iou_thresh)
{
    const std::size_t nd = detections.size(), ng = gt.size();
    std::vector<double> overlap(nd * ng);
    for (std::size_t d = 0; d < nd; ++d) {
        for (std::size_t g = 0; g < ng; ++g) {
            overlap[d * ng + g] = iou(detections[d].box, gt[g]);
        }
    }

    // Candidate lesions per detection, best IoU first.
    std::vector<std::vector<std::size_t>> edges(nd);
    for (std::size_t d = 0; d < nd; ++d) {
        for (std::size_t g = 0; g < ng; ++g) {
            if (overlap[d * ng + g] >= iou_thresh) {
                edges[d].push_back(g);
            }
        }
        std::stable_sort(edges[d].begin(), edges[d].end(),
                         [&](std::size_t a, std::size_t b) { return overlap[d * ng + a] > overlap[d * ng + b]; });
    }

    std::vector<std::size_t> order(nd);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return detections[a].class_prob > detections[b].class_prob;
    });

    constexpr auto kNone = static_cast<std::size_t>(-1);
    std::vector<std::size_t> gt_owner(ng, kNone), det_match(nd, kNone);
    for (auto d : order) {
        for (auto g : edges[d]) {
            if (gt_owner[g] == kNone) {
                gt_owner[g] = d;
                det_match[d] = g;
                break;
            }
        }
    }

    std::vector<bool> visited(ng);
    std::function<bool(std::size_t)> augment = [&](std::size_t d) {
        for (auto g : edges[d]) {
            if (visited[g]) {
                continue;
            }
            visited[g] = true;
            if (gt_owner[g] == kNone || augment(gt_owner[g])) {
                gt_owner[g] = d;
                det_match[d] = g;
                return true;
            }
        }
        return false;
    };
    for (auto d : order) {
        if (det_match[d] == kNone && !edges[d].empty()) {
            std::fill(visited.begin(), visited.end(), false);
            augment(d);
        }
    }

    LesionMatchResult out;
    for (std::size_t g = 0; g < ng; ++g) {
        if (gt_owner[g] != kNone) {
            out.tp.emplace_back(g, gt_owner[g]);
        } else {
            out.fn.push_back(g);
        }
    }
    for (std::size_t d = 0; d < nd; ++d) {
        if (edges[d].empty()) {
            out.fp.push_back(d);
        }
    }
    return out;
}

SliceCounts slice_confusion(std::span<const std::size_t> detections_per_slice,
                            std::span<const std::size_t> gt_per_slice)
{
    if (detections_per_slice.size() != gt_per_slice.size()) {
        throw DimensionError("slice_confusion: " + std::to_string(detections_per_slice.size()) +
                             " detection counts vs " + std::to_string(gt_per_slice.size()) + " ground-truth counts");
    }
    SliceCounts c;
    for (std::size_t i = 0; i < gt_per_slice.size(); ++i) {
        const bool has_gt = gt_per_slice[i] > 0;
        const bool detected = detections_per_slice[i] > 0;
        if (has_gt) {
            ++(detected ? c.tp : c.fn);
        } else {
            ++(detected ? c.fp : c.tn);
        }
    }
    return c;
}

SliceOutcome score_slice(std::span<const detector::Detection> detections, const syndata::SyntheticSlice& slice)
{
    std::vector<Box> gt;
    for (const auto& l : slice.lesions) {
        gt.push_back(l.bbox);
    }
    return {gt.size(), detections.size(), match_lesions(detections, gt)};
}

MetricsReport aggregate(std::span<const SliceOutcome> outcomes, double threshold, FpDenominator fp_denominator)
{
    if (outcomes.empty()) {
        throw EvaluationError("empty split");
    }
    MetricsReport m;
    m.threshold = threshold;
    m.n_slices = outcomes.size();
    std::vector<std::size_t> dets, gts;
    std::size_t positive_slices = 0;
    for (const auto& o : outcomes) {
        m.n_gt_lesions += o.n_gt;
        m.lesion_tp += o.match.tp.size();
        m.lesion_fp += o.match.fp.size();
        m.lesion_fn += o.match.fn.size();
        dets.push_back(o.n_detections);
        gts.push_back(o.n_gt);
        positive_slices += o.n_gt > 0 ? 1 : 0;
    }
    m.lesion_fp_per_slice =
        ratio(m.lesion_fp, fp_denominator == FpDenominator::AllSlices ? m.n_slices : positive_slices);
    m.lesion_fnr = ratio(m.lesion_fn, m.n_gt_lesions);
    m.slice = slice_confusion(dets, gts);
    m.slice_fpr = m.slice.fpr();
    m.slice_fnr = m.slice.fnr();
    m.slice_acc = m.slice.acc();
    return m;
}

std::vector<std::vector<detector::Candidate>> score_split(const detector::Model& model,
                                                          std::span<const syndata::SyntheticSlice> slices)
{
    std::vector<std::vector<detector::Candidate>> out(slices.size());
    parallel_for(slices.size(), evaluation_threads(),
                 [&](std::size_t i) { out[i] = detector::score_candidates(slices[i], model); });
    return out;
}

MetricsReport evaluate(const detector::Model& model, std::span<const syndata::SyntheticSlice> slices, double threshold,
                       int max_det, FpDenominator fp_denominator)
{
    if (slices.empty()) {
        throw EvaluationError("empty split");
    }
    const auto candidates = score_split(model, slices);
    std::vector<SliceOutcome> outcomes;
    for (std::size_t i = 0; i < slices.size(); ++i) {
        const auto dets = detector::postprocess(candidates[i], threshold, model.config.nms_iou, max_det);
        outcomes.push_back(score_slice(dets, slices[i]));
    }
    return aggregate(outcomes, threshold, fp_denominator);
}

std::vector<SweepRow> sweep_candidates(const std::vector<std::vector<detector::Candidate>>& candidates,
                                       std::span<const syndata::SyntheticSlice> slices,
                                       std::span<const double> thresholds, double nms_iou, int max_det,
                                       FpDenominator fp_denominator)
{
    if (slices.empty()) {
        throw EvaluationError("empty split");
    }
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
        if (!(thresholds[i] > 0.0 && thresholds[i] < 1.0)) {
            throw ConfigError("sweep thresholds must lie in (0, 1)");
        }
        if (i > 0 && !(thresholds[i] > thresholds[i - 1])) {
            throw ConfigError("sweep thresholds must be strictly increasing");
        }
    }
    std::vector<SweepRow> rows;
    for (double t : thresholds) {
        std::vector<SliceOutcome> outcomes;
        for (std::size_t i = 0; i < slices.size(); ++i) {
            const auto dets = detector::postprocess(candidates[i], t, nms_iou, max_det);
            outcomes.push_back(score_slice(dets, slices[i]));
        }
        rows.push_back({t, aggregate(outcomes, t, fp_denominator)});
    }
    return rows;
}

std::vector<SweepRow> threshold_sweep(const detector::Model& model, std::span<const syndata::SyntheticSlice> slices,
                                      std::span<const double> thresholds, int max_det, FpDenominator fp_denominator)
{
    if (slices.empty()) {
        throw EvaluationError("empty split");
    }
    return sweep_candidates(score_split(model, slices), slices, thresholds, model.config.nms_iou, max_det,
                            fp_denominator);
}

std::vector<double> threshold_grid(double lo, double hi, double step)
{
    if (!(step > 0.0) || hi < lo) {
        throw ConfigError("threshold grid needs step > 0 and lo <= hi");
    }
    std::vector<double> out;
    const auto n = static_cast<long long>(std::floor((hi - lo) / step + 1e-9));
    for (long long k = 0; k <= n; ++k) {
        out.push_back(std::round((lo + static_cast<double>(k) * step) * 1e9) / 1e9);
    }
    return out;
}

namespace {

double fnr_of(const MetricsReport& m, FnrLevel level) { return level == FnrLevel::Lesion ? m.lesion_fnr : m.slice_fnr; }

} // namespace

std::size_t match_fnr_row(std::span<const SweepRow> rows, double target, FnrLevel level, double prefer_threshold,
                          bool* reachable)
{
    if (rows.empty()) {
        throw EvaluationError("empty sweep");
    }
    // Lexicographic key: (not reachable, FNR distance, threshold distance, threshold).
    auto key = [&](const SweepRow& r) {
        const double f = fnr_of(r.metrics, level);
        const bool below = !std::isnan(f) && !std::isnan(target) && f <= target;
        const double dist = std::isnan(f) || std::isnan(target) ? std::numeric_limits<double>::infinity()
                                                                : std::abs(f - target);
        return std::tuple{!below, dist, std::abs(r.threshold - prefer_threshold), r.threshold};
    };
    std::size_t best = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (key(rows[i]) < key(rows[best])) {
            best = i;
        }
    }
    if (reachable) {
        *reachable = !std::get<0>(key(rows[best]));
    }
    return best;
}

ComparisonReport compare_cost_vs_threshold(const detector::Model& baseline, const detector::Model& cost_trained,
                                           std::span<const syndata::SyntheticSlice> slices,
                                           std::span<const double> grid, double operating_threshold, int max_det,
                                           FnrLevel level)
{
    ComparisonReport r;
    r.level = level;
    r.cost = {operating_threshold, evaluate(cost_trained, slices, operating_threshold, max_det)};
    r.target_fnr = fnr_of(r.cost.metrics, level);

    std::vector<double> thresholds(grid.begin(), grid.end());
    thresholds.push_back(operating_threshold);
    std::sort(thresholds.begin(), thresholds.end());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
    r.baseline_sweep = threshold_sweep(baseline, slices, thresholds, max_det);

    bool reachable = false;
    const auto idx = match_fnr_row(r.baseline_sweep, r.target_fnr, level, operating_threshold, &reachable);
    r.baseline_matched = {r.baseline_sweep[idx].threshold, r.baseline_sweep[idx].metrics};
    r.target_reachable = reachable;
    r.exact_match = fnr_of(r.baseline_matched.metrics, level) == r.target_fnr;

    const auto& c = r.cost.metrics;
    const auto& b = r.baseline_matched.metrics;
    r.delta_fp_per_slice = c.lesion_fp_per_slice - b.lesion_fp_per_slice;
    r.delta_slice_fpr = c.slice_fpr - b.slice_fpr;
    r.delta_lesion_fnr = c.lesion_fnr - b.lesion_fnr;
    r.delta_slice_fnr = c.slice_fnr - b.slice_fnr;
    r.cost_fp_not_worse = c.lesion_fp_per_slice <= b.lesion_fp_per_slice;
    return r;
}

// -- serialization ------------------------------------------------------------------

namespace {

json number(double v)
{
    if (std::isnan(v)) {
        return nullptr;
    }
    return v;
}

std::string fmt(double v, int precision = 6)
{
    if (std::isnan(v)) {
        return "nan";
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", precision, v);
    return buf;
}

} // namespace

json to_json(const MetricsReport& m)
{
    return json{{"threshold", m.threshold},
                {"n_slices", m.n_slices},
                {"lesion",
                 {{"n_gt", m.n_gt_lesions},
                  {"tp", m.lesion_tp},
                  {"fp", m.lesion_fp},
                  {"fn", m.lesion_fn},
                  {"fp_per_slice", number(m.lesion_fp_per_slice)},
                  {"fnr", number(m.lesion_fnr)}}},
                {"slice",
                 {{"tp", m.slice.tp},
                  {"fp", m.slice.fp},
                  {"fn", m.slice.fn},
                  {"tn", m.slice.tn},
                  {"fpr", number(m.slice_fpr)},
                  {"fnr", number(m.slice_fnr)},
                  {"acc", number(m.slice_acc)}}}};
}

json to_json(const ComparisonReport& r)
{
    json sweep = json::array();
    for (const auto& row : r.baseline_sweep) {
        sweep.push_back(to_json(row.metrics));
    }
    return json{{"fnr_level", r.level == FnrLevel::Lesion ? "lesion" : "slice"},
                {"target_fnr", number(r.target_fnr)},
                {"cost_trained", to_json(r.cost.metrics)},
                {"baseline_matched", to_json(r.baseline_matched.metrics)},
                {"exact_match", r.exact_match},
                {"target_reachable", r.target_reachable},
                {"delta",
                 {{"fp_per_slice", number(r.delta_fp_per_slice)},
                  {"slice_fpr", number(r.delta_slice_fpr)},
                  {"lesion_fnr", number(r.delta_lesion_fnr)},
                  {"slice_fnr", number(r.delta_slice_fnr)}}},
                {"cost_fp_not_worse", r.cost_fp_not_worse},
                {"summary",
                 "cost-trained FP per slice " + fmt(r.cost.metrics.lesion_fp_per_slice, 4) + " at threshold " +
                     fmt(r.cost.threshold, 2) + " vs threshold-matched baseline FP per slice " +
                     fmt(r.baseline_matched.metrics.lesion_fp_per_slice, 4) + " at threshold " +
                     fmt(r.baseline_matched.threshold, 2)},
                {"baseline_sweep", std::move(sweep)}};
}

std::string metrics_csv_header()
{
    return "threshold,n_slices,n_gt_lesions,lesion_tp,lesion_fp,lesion_fn,lesion_fp_per_slice,lesion_fnr,"
           "slice_tp,slice_fp,slice_fn,slice_tn,slice_fpr,slice_fnr,slice_acc";
}

std::string metrics_csv_row(const MetricsReport& m)
{
    std::ostringstream os;
    os << fmt(m.threshold) << ',' << m.n_slices << ',' << m.n_gt_lesions << ',' << m.lesion_tp << ',' << m.lesion_fp
       << ',' << m.lesion_fn << ',' << fmt(m.lesion_fp_per_slice) << ',' << fmt(m.lesion_fnr) << ',' << m.slice.tp
       << ',' << m.slice.fp << ',' << m.slice.fn << ',' << m.slice.tn << ',' << fmt(m.slice_fpr) << ','
       << fmt(m.slice_fnr) << ',' << fmt(m.slice_acc);
    return os.str();
}

std::string sweep_csv(std::span<const SweepRow> rows)
{
    std::string out = metrics_csv_header() + "\n";
    for (const auto& r : rows) {
        out += metrics_csv_row(r.metrics) + "\n";
    }
    return out;
}

std::string format_table(std::span<const std::pair<std::string, MetricsReport>> columns)
{
    const std::vector<std::pair<std::string, double MetricsReport::*>> rows{
        {"Lesion-level FP", &MetricsReport::lesion_fp_per_slice},
        {"Lesion-level FNR", &MetricsReport::lesion_fnr},
        {"Slice-level FPR", &MetricsReport::slice_fpr},
        {"Slice-level FNR", &MetricsReport::slice_fnr},
        {"ACC", &MetricsReport::slice_acc}};
    std::size_t label_w = 16;
    std::vector<std::size_t> widths;
    for (const auto& [name, m] : columns) {
        widths.push_back(std::max<std::size_t>(name.size(), 8));
    }
    auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w > s.size() ? w - s.size() : 0, ' '); };
    std::string out = pad("", label_w);
    for (std::size_t c = 0; c < columns.size(); ++c) {
        out += " | " + pad(columns[c].first, widths[c]);
    }
    out += "\n" + std::string(out.size() - 1, '-') + "\n";
    for (const auto& [label, field] : rows) {
        out += pad(label, label_w);
        for (std::size_t c = 0; c < columns.size(); ++c) {
            out += " | " + pad(fmt(columns[c].second.*field, 4), widths[c]);
        }
        out += "\n";
    }
    return out;
}

std::string comparison_svg(const ComparisonReport& r)
{
    constexpr double kW = 480, kH = 360, kLeft = 60, kRight = 20, kTop = 20, kBottom = 50;
    double max_fp = 0.0;
    auto consider = [&](double v) {
        if (!std::isnan(v)) {
            max_fp = std::max(max_fp, v);
        }
    };
    for (const auto& row : r.baseline_sweep) {
        consider(row.metrics.lesion_fp_per_slice);
    }
    consider(r.cost.metrics.lesion_fp_per_slice);
    max_fp = max_fp > 0.0 ? max_fp * 1.1 : 1.0;
    auto px = [&](double fnr) { return kLeft + (std::isnan(fnr) ? 0.0 : fnr) * (kW - kLeft - kRight); };
    auto py = [&](double fp) { return kH - kBottom - (std::isnan(fp) ? 0.0 : fp / max_fp) * (kH - kTop - kBottom); };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 "
       << kW << ' ' << kH << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<line x1=\"" << kLeft << "\" y1=\"" << kH - kBottom << "\" x2=\"" << kW - kRight << "\" y2=\""
       << kH - kBottom << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kH - kBottom
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << (kW / 2) << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
       << "lesion-level FNR</text>\n";
    os << "<text x=\"16\" y=\"" << kH / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
       << kH / 2 << ")\">lesion FP per slice</text>\n";
    for (int k = 0; k <= 4; ++k) {
        const double f = k / 4.0;
        os << "<text x=\"" << fmt(px(f), 1) << "\" y=\"" << kH - kBottom + 14
           << "\" text-anchor=\"middle\" font-size=\"10\">" << fmt(f, 2) << "</text>\n";
        os << "<text x=\"" << kLeft - 4 << "\" y=\"" << fmt(py(max_fp * f), 1)
           << "\" text-anchor=\"end\" font-size=\"10\">" << fmt(max_fp * f, 2) << "</text>\n";
    }
    os << "<polyline fill=\"none\" stroke=\"#4477aa\" points=\"";
    for (const auto& row : r.baseline_sweep) {
        os << fmt(px(row.metrics.lesion_fnr), 2) << ',' << fmt(py(row.metrics.lesion_fp_per_slice), 2) << ' ';
    }
    os << "\"/>\n";
    for (const auto& row : r.baseline_sweep) {
        os << "<circle cx=\"" << fmt(px(row.metrics.lesion_fnr), 2) << "\" cy=\""
           << fmt(py(row.metrics.lesion_fp_per_slice), 2) << "\" r=\"2.5\" fill=\"#4477aa\"><title>threshold "
           << fmt(row.threshold, 3) << "</title></circle>\n";
    }
    const auto& b = r.baseline_matched.metrics;
    os << "<circle cx=\"" << fmt(px(b.lesion_fnr), 2) << "\" cy=\"" << fmt(py(b.lesion_fp_per_slice), 2)
       << "\" r=\"6\" fill=\"none\" stroke=\"#4477aa\" stroke-width=\"2\"/>\n";
    const auto& c = r.cost.metrics;
    os << "<circle cx=\"" << fmt(px(c.lesion_fnr), 2) << "\" cy=\"" << fmt(py(c.lesion_fp_per_slice), 2)
       << "\" r=\"5\" fill=\"#cc3311\"/>\n";
    os << "<text x=\"" << kW - kRight << "\" y=\"" << kTop + 10
       << "\" text-anchor=\"end\" font-size=\"11\" fill=\"#4477aa\">baseline threshold sweep</text>\n";
    os << "<text x=\"" << kW - kRight << "\" y=\"" << kTop + 26
       << "\" text-anchor=\"end\" font-size=\"11\" fill=\"#cc3311\">cost-trained @ " << fmt(r.cost.threshold, 2)
       << "</text>\n";
    os << "</svg>\n";
    return os.str();
}

} // namespace costdet::eval
