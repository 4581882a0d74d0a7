#pragma once

// Lesion- and slice-level detection metrics, threshold sweeps, and the
// comparison between cost-aware training and post-training thresholding.

#include "costdet/box.hpp"
#include "costdet/detector.hpp"
#include "costdet/syndata.hpp"

#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace costdet::eval {

inline constexpr double kLesionIou = 0.2;
inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct LesionMatchResult {
    std::vector<std::pair<std::size_t, std::size_t>> tp;  // (gt index, detection index)
    std::vector<std::size_t> fp;                          // detection indices
    std::vector<std::size_t> fn;                          // gt indices
};

/// One-to-one lesion matching at box IoU >= iou_thresh.
///
/// Detections are visited by descending score and claim the highest-IoU
/// unclaimed lesion; augmenting paths then extend the assignment to a
/// maximum matching. A detection is a false positive only when its IoU is
/// below the threshold against every lesion, so a duplicate on an already
/// claimed lesion is neither TP nor FP.
LesionMatchResult match_lesions(std::span<const detector::Detection> detections, std::span<const Box> gt,
                                double iou_thresh = kLesionIou);

struct SliceCounts {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
    std::size_t tn = 0;

    std::size_t total() const { return tp + fp + fn + tn; }
    double fpr() const;  // NaN when there are no negative slices
    double fnr() const;  // NaN when there are no positive slices
    double acc() const;
};

/// A slice with lesions is TP if it has any detection, FN otherwise; a slice
/// without lesions is FP if it has any detection, TN otherwise.
SliceCounts slice_confusion(std::span<const std::size_t> detections_per_slice,
                            std::span<const std::size_t> gt_per_slice);

enum class FpDenominator { AllSlices, PositiveSlices };

struct MetricsReport {
    double threshold = 0.0;
    std::size_t n_slices = 0;
    std::size_t n_gt_lesions = 0;
    std::size_t lesion_tp = 0;
    std::size_t lesion_fp = 0;
    std::size_t lesion_fn = 0;
    double lesion_fp_per_slice = kNaN;
    double lesion_fnr = kNaN;
    SliceCounts slice;
    double slice_fpr = kNaN;
    double slice_fnr = kNaN;
    double slice_acc = kNaN;
};

struct SliceOutcome {
    std::size_t n_gt = 0;
    std::size_t n_detections = 0;
    LesionMatchResult match;
};

SliceOutcome score_slice(std::span<const detector::Detection> detections, const syndata::SyntheticSlice& slice);

/// Throws EvaluationError on an empty split.
MetricsReport aggregate(std::span<const SliceOutcome> outcomes, double threshold,
                        FpDenominator fp_denominator = FpDenominator::AllSlices);

/// Candidates for every slice, computed in parallel (see COSTDET_THREADS).
std::vector<std::vector<detector::Candidate>> score_split(const detector::Model& model,
                                                          std::span<const syndata::SyntheticSlice> slices);

MetricsReport evaluate(const detector::Model& model, std::span<const syndata::SyntheticSlice> slices,
                       double threshold = 0.7, int max_det = 6,
                       FpDenominator fp_denominator = FpDenominator::AllSlices);

struct SweepRow {
    double threshold = 0.0;
    MetricsReport metrics;
};

/// Thresholds must be strictly increasing and inside (0, 1).
std::vector<SweepRow> sweep_candidates(const std::vector<std::vector<detector::Candidate>>& candidates,
                                       std::span<const syndata::SyntheticSlice> slices,
                                       std::span<const double> thresholds, double nms_iou, int max_det,
                                       FpDenominator fp_denominator = FpDenominator::AllSlices);

/// One inference pass, then metrics at every threshold.
std::vector<SweepRow> threshold_sweep(const detector::Model& model, std::span<const syndata::SyntheticSlice> slices,
                                      std::span<const double> thresholds, int max_det = 6,
                                      FpDenominator fp_denominator = FpDenominator::AllSlices);

/// Inclusive grid lo, lo+step, ... <= hi, rounded to 1e-9 to avoid drift.
std::vector<double> threshold_grid(double lo, double hi, double step);

enum class FnrLevel { Lesion, Slice };

struct OperatingPoint {
    double threshold = 0.0;
    MetricsReport metrics;
};

struct ComparisonReport {
    FnrLevel level = FnrLevel::Lesion;
    double target_fnr = kNaN;
    OperatingPoint cost;
    OperatingPoint baseline_matched;
    bool exact_match = false;
    bool target_reachable = true;  // some baseline row has FNR <= target
    double delta_fp_per_slice = 0.0;  // cost minus baseline
    double delta_slice_fpr = 0.0;
    double delta_lesion_fnr = 0.0;
    double delta_slice_fnr = 0.0;
    bool cost_fp_not_worse = false;  // cost FP-per-slice <= matched baseline FP-per-slice
    std::vector<SweepRow> baseline_sweep;
};

/// Index of the sweep row whose FNR is closest to the target from below,
/// or closest overall (reachable = false) when none is <= target. Among
/// equal FNRs the threshold nearest `prefer_threshold` wins, then the lower.
std::size_t match_fnr_row(std::span<const SweepRow> rows, double target, FnrLevel level, double prefer_threshold,
                          bool* reachable);

/// Evaluates the cost-trained model at `operating_threshold`, sweeps the
/// baseline over `grid` (plus the operating threshold) and pairs the cost
/// model with the baseline row matching its FNR.
ComparisonReport compare_cost_vs_threshold(const detector::Model& baseline, const detector::Model& cost_trained,
                                           std::span<const syndata::SyntheticSlice> slices,
                                           std::span<const double> grid, double operating_threshold = 0.7,
                                           int max_det = 6, FnrLevel level = FnrLevel::Lesion);

// -- serialization --------------------------------------------------------------

nlohmann::json to_json(const MetricsReport& m);
nlohmann::json to_json(const ComparisonReport& r);
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsReport& m);
std::string sweep_csv(std::span<const SweepRow> rows);

/// Rows: lesion FP, lesion FNR, slice FPR, slice FNR, ACC; one column per regime.
std::string format_table(std::span<const std::pair<std::string, MetricsReport>> columns);

/// Static scatter of lesion FNR (x) against FP per slice (y).
std::string comparison_svg(const ComparisonReport& r);

} // namespace costdet::eval
