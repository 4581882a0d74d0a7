#pragma once

// Six-term multi-task loss with cost-sensitive lesion-level and slice-level
// classification terms, routed by whether the slice contains lesions.

#include "costdet/autodiff.hpp"
#include "costdet/detector.hpp"

#include <span>
#include <string>

#include <nlohmann/json.hpp>

namespace costdet::losses {

struct CostConfig {
    double alpha_lesion = 1.0;
    double beta_lesion = 1.0;
    double alpha_slice = 1.0;
    double beta_slice = 1.0;
    bool use_slice_loss = false;

    void validate() const;
    /// Short name such as "a3b1", or "a1b1_sa3sb1" with the slice loss on.
    std::string tag() const;
};

void to_json(nlohmann::json& j, const CostConfig& c);
void from_json(const nlohmann::json& j, CostConfig& c);

struct LossBreakdown {
    ad::Value rpn_reg;
    ad::Value rpn_cls;
    ad::Value box;
    ad::Value mask;
    ad::Value cost_cls;
    ad::Value slice_cls;
    ad::Value total;
};

/// Mean over labeled proposals (label 0/1; -1 is skipped) of
/// -alpha * p* * log p - beta * (1 - p*) * log(1 - p).
/// With no labeled proposals the result is a detached zero.
ad::Value lesion_cost_loss(const ad::Value& probs, std::span<const int> labels, const CostConfig& cfg);

struct SliceTargets {
    double p_slice_star = 0.0;
    ad::Value p_slice;
};

/// Lesion-to-slice mapping: max over proposal labels and probabilities.
/// Without proposals the label comes from `slice_has_lesions` and the
/// probability is the clamp epsilon ("no detection").
SliceTargets slice_targets(const ad::Value& probs, std::span<const int> labels, bool slice_has_lesions);

ad::Value slice_cost_loss(double p_slice_star, const ad::Value& p_slice, const CostConfig& cfg);

/// Positive slices: rpn_reg + rpn_cls + box + mask + cost_cls (+ slice_cls).
/// Negative slices: rpn_cls + cost_cls (+ slice_cls); the regression and mask
/// terms are detached zeros. Terms are summed in that fixed order.
LossBreakdown total_loss(const detector::StageOutputs& stage, const CostConfig& cfg);

} // namespace costdet::losses
