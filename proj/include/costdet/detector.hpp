#pragma once

// Simplified two-stage detector: an anchor-based proposal stage and a RoI
// stage (classification, box refinement, mask grid), both small dense
// networks over fixed per-box image statistics.

#include "costdet/autodiff.hpp"
#include "costdet/box.hpp"
#include "costdet/rng.hpp"
#include "costdet/syndata.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

namespace costdet::detector {

inline constexpr int kAnchorStride = 8;
inline constexpr std::array<double, 3> kAnchorSizes{8.0, 16.0, 24.0};

struct Anchor {
    Box box;
    int row = 0;
    int col = 0;
    int size_index = 0;
};

/// Square anchors of each size centered on every stride cell, clipped to the
/// image. Ordered by (row, col, size). Throws ConfigError unless H and W are
/// positive multiples of the stride.
std::vector<Anchor> build_anchors(int height, int width);

/// Per-box statistics: for every channel mean, std, min, max and
/// inside-minus-ring contrast (2 px ring), then cx/W, cy/H, w/W, h/H.
class FeatureExtractor {
public:
    explicit FeatureExtractor(const syndata::SyntheticSlice& slice);

    static std::size_t feature_dim(int channels) { return 5 * static_cast<std::size_t>(channels) + 4; }
    std::size_t dim() const { return feature_dim(channels_); }

    /// Throws FeatureError for zero-area boxes.
    std::vector<double> box_features(const Box& box) const;
    /// Stacked features as a constant [n x dim] value.
    ad::Value matrix(std::span<const Box> boxes) const;

private:
    struct Region {
        int x0, y0, x1, y1;  // half-open pixel range
    };
    Region pixel_region(const Box& b) const;
    double region_sum(const std::vector<double>& integral, int c, const Region& r) const;

    const syndata::SyntheticSlice& slice_;
    int channels_, height_, width_;
    std::vector<double> sum_;    // per-channel (H+1) x (W+1) integral images
    std::vector<double> sumsq_;
};

struct DetectorConfig {
    int hidden = 32;
    int mask_grid = 8;
    int k_pre = 64;
    double nms_iou = 0.5;
    int k_post = 16;
    double pos_iou = 0.5;
    double neg_iou = 0.2;
    int rpn_batch = 64;
    double max_positive_fraction = 0.5;
    // Training only: ground-truth boxes join the RoI proposals.
    bool add_gt_proposals = true;
};

void to_json(nlohmann::json& j, const DetectorConfig& c);
void from_json(const nlohmann::json& j, DetectorConfig& c);

enum class ModelKind { Learned, Oracle };

/// Network weights plus the dimensions they were built for. The Oracle kind
/// has no weights and reproduces ground truth; it exists for testing the
/// evaluation path end to end.
struct Model {
    ModelKind kind = ModelKind::Learned;
    int channels = 3;
    DetectorConfig config;
    ad::ParamStore params;
    // Fixed input standardization (x - shift) * scale applied to raw box
    // features before both stages. Empty means identity.
    std::vector<double> feature_shift;
    std::vector<double> feature_scale;
};

/// Per-feature mean and inverse standard deviation over every anchor of the
/// given slices.
void fit_feature_normalization(Model& model, std::span<const syndata::SyntheticSlice> slices);

/// Raw features of `boxes`, standardized with the model's normalization.
ad::Value model_features(const Model& model, const FeatureExtractor& fx, std::span<const Box> boxes);

inline constexpr int kRpnOutputs = 5;  // objectness + 4 deltas

/// Seeded init: hidden layers Xavier-uniform, output layers zero.
Model make_model(int channels, const DetectorConfig& config, std::uint64_t seed);
Model make_oracle_model(int channels);

struct RpnOutput {
    ad::Value objectness;  // [A x 1], sigmoid
    ad::Value deltas;      // [A x 4]
};

RpnOutput rpn_forward(const ad::Value& anchor_features, const ad::ParamStore& params);

struct Proposal {
    Box box;
    double objectness = 0.0;
    std::size_t anchor_index = 0;
};

struct ProposalConfig {
    int k_pre = 64;
    double nms_iou = 0.5;
    int k_post = 16;
};

/// Top-k_pre anchors by objectness, decoded and clipped, greedy NMS, then
/// top-k_post. Output is sorted by descending objectness, ties by anchor index.
std::vector<Proposal> select_proposals(std::span<const Anchor> anchors, std::span<const double> objectness,
                                       std::span<const double> deltas, int height, int width,
                                       const ProposalConfig& cfg);

struct ProposalLabel {
    int label = -1;  // 1 positive, 0 negative, -1 excluded
    std::optional<std::size_t> gt_index;
};

/// IoU >= pos_iou with some lesion -> 1 (argmax lesion); IoU < neg_iou with
/// all -> 0; otherwise excluded. On slices without lesions every box is 0.
std::vector<ProposalLabel> assign_labels(std::span<const Box> boxes, std::span<const syndata::Lesion> lesions,
                                         double pos_iou = 0.5, double neg_iou = 0.2);

struct RoiOutput {
    ad::Value class_prob;  // [N x 1]
    ad::Value deltas;      // [N x 4]
    ad::Value mask_prob;   // [N x M*M]
};

RoiOutput roi_forward(const ad::Value& roi_features, const ad::ParamStore& params);

/// Lesion bitmap cropped to `box` and nearest-neighbour resampled to M x M.
std::vector<double> mask_target(const syndata::Mask& mask, const Box& box, int grid);

struct Detection {
    Box box;
    double class_prob = 0.0;
    std::vector<double> mask_grid;  // M x M in [0, 1]
};

using DetectionSet = std::vector<Detection>;

/// Per-proposal second-stage outputs before thresholding. Threshold sweeps
/// reuse these instead of re-running the networks.
struct Candidate {
    Box box;  // refined
    double class_prob = 0.0;
    std::vector<double> mask_grid;
};

std::vector<Candidate> score_candidates(const syndata::SyntheticSlice& slice, const Model& model);

/// Keep p >= threshold, NMS, then the top max_det by probability.
DetectionSet postprocess(std::span<const Candidate> candidates, double threshold, double nms_iou, int max_det);

DetectionSet infer(const syndata::SyntheticSlice& slice, const Model& model, double threshold = 0.7, int max_det = 6);

/// Everything the multi-task loss needs from one training forward pass.
struct StageOutputs {
    bool slice_positive = false;

    ad::Value rpn_objectness;  // [A x 1]
    ad::Value rpn_deltas;      // [A x 4]
    std::vector<int> anchor_labels;  // sampled: 1 / 0, -1 unused
    std::vector<BoxDeltas> anchor_targets;

    ad::Value roi_probs;   // [N x 1]
    ad::Value roi_deltas;  // [N x 4]
    ad::Value roi_masks;   // [N x M*M]
    std::vector<int> roi_labels;  // after balanced sampling: 1 / 0, -1 unused
    // Leading RoI rows that came from the proposal stage; the rest are
    // ground-truth boxes added for training.
    std::size_t n_proposals = 0;
    std::vector<BoxDeltas> roi_box_targets;
    std::vector<std::vector<double>> roi_mask_targets;
    int mask_grid = 8;
};

StageOutputs forward_train(const syndata::SyntheticSlice& slice, const Model& model, Rng& rng);

} // namespace costdet::detector
