#include "costdet/losses.hpp"

#include "costdet/errors.hpp"

#include <array>
#include <cmath>
#include <numeric>
#include <sstream>

namespace costdet::losses {

using nlohmann::json;

void CostConfig::validate() const
{
    for (double w : {alpha_lesion, beta_lesion, alpha_slice, beta_slice}) {
        if (!(w >= 0.0) || !std::isfinite(w)) {
            throw ConfigError("cost weights must be finite and non-negative");
        }
    }
}

namespace {

std::string compact(double v)
{
    std::ostringstream os;
    os << v;
    return os.str();
}

ad::Value zero() { return ad::Value::scalar(0.0); }

std::vector<std::size_t> indices_with(std::span<const int> labels, int wanted)
{
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == wanted) {
            out.push_back(i);
        }
    }
    return out;
}

} // namespace

std::string CostConfig::tag() const
{
    std::string t = "a" + compact(alpha_lesion) + "b" + compact(beta_lesion);
    if (use_slice_loss) {
        t += "_sa" + compact(alpha_slice) + "sb" + compact(beta_slice);
    }
    return t;
}

void to_json(json& j, const CostConfig& c)
{
    j = json{{"alpha_lesion", c.alpha_lesion},
             {"beta_lesion", c.beta_lesion},
             {"alpha_slice", c.alpha_slice},
             {"beta_slice", c.beta_slice},
             {"use_slice_loss", c.use_slice_loss}};
}

void from_json(const json& j, CostConfig& c)
{
    const CostConfig d;
    c.alpha_lesion = j.value("alpha_lesion", d.alpha_lesion);
    c.beta_lesion = j.value("beta_lesion", d.beta_lesion);
    c.alpha_slice = j.value("alpha_slice", d.alpha_slice);
    c.beta_slice = j.value("beta_slice", d.beta_slice);
    c.use_slice_loss = j.value("use_slice_loss", d.use_slice_loss);
}

ad::Value lesion_cost_loss(const ad::Value& probs, std::span<const int> labels, const CostConfig& cfg)
{
    if (labels.size() != probs.size()) {
        throw DimensionError("lesion_cost_loss: " + std::to_string(probs.size()) + " probabilities vs " +
                             std::to_string(labels.size()) + " labels");
    }
    std::vector<std::size_t> idx;
    std::vector<double> targets;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == 0 || labels[i] == 1) {
            idx.push_back(i);
            targets.push_back(labels[i]);
        }
    }
    if (idx.empty()) {
        return zero();
    }
    const auto selected = ad::gather(probs, idx);
    // Weights are applied after the mean so alpha-scaling is exact.
    const double inv_n = 1.0 / static_cast<double>(idx.size());
    const auto pos = ad::scale(ad::weighted_bce(selected, targets, 1.0, 0.0), inv_n);
    const auto neg = ad::scale(ad::weighted_bce(selected, targets, 0.0, 1.0), inv_n);
    return ad::add(ad::scale(pos, cfg.alpha_lesion), ad::scale(neg, cfg.beta_lesion));
}

SliceTargets slice_targets(const ad::Value& probs, std::span<const int> labels, bool slice_has_lesions)
{
    if (!probs.valid() || probs.size() == 0) {
        return {slice_has_lesions ? 1.0 : 0.0, ad::Value::scalar(ad::kProbEpsilon)};
    }
    bool any_labeled = false;
    double star = 0.0;
    for (int l : labels) {
        if (l >= 0) {
            any_labeled = true;
            star = std::max(star, static_cast<double>(l));
        }
    }
    if (!any_labeled) {
        star = slice_has_lesions ? 1.0 : 0.0;
    }
    return {star, ad::max_reduce(probs)};
}

ad::Value slice_cost_loss(double p_slice_star, const ad::Value& p_slice, const CostConfig& cfg)
{
    return ad::weighted_bce(p_slice, p_slice_star, cfg.alpha_slice, cfg.beta_slice);
}

LossBreakdown total_loss(const detector::StageOutputs& stage, const CostConfig& cfg)
{
    LossBreakdown out{zero(), zero(), zero(), zero(), zero(), zero(), zero()};

    // Anchor-level classification, plain cross entropy over the sampled anchors.
    const auto sampled = [&] {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < stage.anchor_labels.size(); ++i) {
            if (stage.anchor_labels[i] >= 0) {
                idx.push_back(i);
            }
        }
        return idx;
    }();
    if (!sampled.empty()) {
        std::vector<double> t;
        for (auto i : sampled) {
            t.push_back(stage.anchor_labels[i]);
        }
        out.rpn_cls = ad::scale(ad::weighted_bce(ad::gather(stage.rpn_objectness, sampled), t, 1.0, 1.0),
                                1.0 / static_cast<double>(sampled.size()));
    }

    const bool has_rois = stage.roi_probs.valid() && stage.roi_probs.size() > 0;
    if (has_rois) {
        out.cost_cls = lesion_cost_loss(stage.roi_probs, stage.roi_labels, cfg);
    }

    if (stage.slice_positive) {
        const auto pos_anchors = indices_with(stage.anchor_labels, 1);
        if (!pos_anchors.empty()) {
            std::vector<double> targets;
            for (auto i : pos_anchors) {
                targets.insert(targets.end(), stage.anchor_targets[i].begin(), stage.anchor_targets[i].end());
            }
            out.rpn_reg = ad::scale(ad::smooth_l1(ad::select_rows(stage.rpn_deltas, pos_anchors), targets),
                                    1.0 / static_cast<double>(pos_anchors.size()));
        }
        const auto pos_rois = has_rois ? indices_with(stage.roi_labels, 1) : std::vector<std::size_t>{};
        if (!pos_rois.empty()) {
            std::vector<double> box_t, mask_t;
            for (auto i : pos_rois) {
                box_t.insert(box_t.end(), stage.roi_box_targets[i].begin(), stage.roi_box_targets[i].end());
                mask_t.insert(mask_t.end(), stage.roi_mask_targets[i].begin(), stage.roi_mask_targets[i].end());
            }
            const double n = static_cast<double>(pos_rois.size());
            out.box = ad::scale(ad::smooth_l1(ad::select_rows(stage.roi_deltas, pos_rois), box_t), 1.0 / n);
            out.mask = ad::scale(ad::weighted_bce(ad::select_rows(stage.roi_masks, pos_rois), mask_t, 1.0, 1.0),
                                 1.0 / static_cast<double>(mask_t.size()));
        }
    }

    if (cfg.use_slice_loss) {
        // p_slice is the max over detector proposals only: appended ground-truth
        // boxes are not detected regions. Those boxes carry label 1, so the
        // max over labels is exactly the slice label.
        const std::size_t n_prop = has_rois ? std::min(stage.n_proposals, stage.roi_probs.rows()) : 0;
        std::vector<std::size_t> rows(n_prop);
        std::iota(rows.begin(), rows.end(), std::size_t{0});
        const auto targets = n_prop > 0 ? slice_targets(ad::select_rows(stage.roi_probs, rows), {}, stage.slice_positive)
                                        : slice_targets(ad::Value(), {}, stage.slice_positive);
        out.slice_cls = slice_cost_loss(targets.p_slice_star, targets.p_slice, cfg);
    }

    const std::array terms{out.rpn_reg, out.rpn_cls, out.box, out.mask, out.cost_cls, out.slice_cls};
    out.total = ad::add_scalars(terms);
    return out;
}

} // namespace costdet::losses
