#include "costdet/detector.hpp"

#include "costdet/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace costdet::detector {

using nlohmann::json;

std::vector<Anchor> build_anchors(int height, int width)
{
    if (height <= 0 || width <= 0 || height % kAnchorStride != 0 || width % kAnchorStride != 0) {
        throw ConfigError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                          " is not a positive multiple of the anchor stride " + std::to_string(kAnchorStride));
    }
    std::vector<Anchor> anchors;
    anchors.reserve(kAnchorSizes.size() * static_cast<std::size_t>(height / kAnchorStride) * (width / kAnchorStride));
    for (int i = 0; i < height / kAnchorStride; ++i) {
        for (int j = 0; j < width / kAnchorStride; ++j) {
            const double cx = (j + 0.5) * kAnchorStride;
            const double cy = (i + 0.5) * kAnchorStride;
            for (int k = 0; k < static_cast<int>(kAnchorSizes.size()); ++k) {
                const double half = kAnchorSizes[k] / 2.0;
                anchors.push_back({clip_box({cx - half, cy - half, cx + half, cy + half}, width, height), i, j, k});
            }
        }
    }
    return anchors;
}

// -- features ------------------------------------------------------------------

FeatureExtractor::FeatureExtractor(const syndata::SyntheticSlice& slice)
    : slice_(slice), channels_(slice.channels), height_(slice.height), width_(slice.width)
{
    const std::size_t stride = static_cast<std::size_t>(height_ + 1) * (width_ + 1);
    sum_.assign(stride * channels_, 0.0);
    sumsq_.assign(stride * channels_, 0.0);
    for (int c = 0; c < channels_; ++c) {
        double* s = &sum_[c * stride];
        double* q = &sumsq_[c * stride];
        for (int r = 0; r < height_; ++r) {
            double row_s = 0.0, row_q = 0.0;
            for (int x = 0; x < width_; ++x) {
                const double v = slice.at(c, r, x);
                row_s += v;
                row_q += v * v;
                const std::size_t idx = static_cast<std::size_t>(r + 1) * (width_ + 1) + (x + 1);
                s[idx] = s[idx - (width_ + 1)] + row_s;
                q[idx] = q[idx - (width_ + 1)] + row_q;
            }
        }
    }
}

FeatureExtractor::Region FeatureExtractor::pixel_region(const Box& b) const
{
    const int x0 = std::clamp(static_cast<int>(std::floor(b.x1)), 0, width_ - 1);
    const int y0 = std::clamp(static_cast<int>(std::floor(b.y1)), 0, height_ - 1);
    const int x1 = std::clamp(static_cast<int>(std::ceil(b.x2)), x0 + 1, width_);
    const int y1 = std::clamp(static_cast<int>(std::ceil(b.y2)), y0 + 1, height_);
    return {x0, y0, x1, y1};
}

double FeatureExtractor::region_sum(const std::vector<double>& integral, int c, const Region& r) const
{
    const std::size_t stride = static_cast<std::size_t>(height_ + 1) * (width_ + 1);
    const double* s = &integral[c * stride];
    auto at = [&](int y, int x) { return s[static_cast<std::size_t>(y) * (width_ + 1) + x]; };
    return at(r.y1, r.x1) - at(r.y0, r.x1) - at(r.y1, r.x0) + at(r.y0, r.x0);
}

std::vector<double> FeatureExtractor::box_features(const Box& box) const
{
    if (box.degenerate()) {
        throw FeatureError("cannot extract features from a zero-area box");
    }
    const Region in = pixel_region(box);
    const Region out{std::max(in.x0 - 2, 0), std::max(in.y0 - 2, 0), std::min(in.x1 + 2, width_),
                     std::min(in.y1 + 2, height_)};
    const double n_in = static_cast<double>(in.x1 - in.x0) * (in.y1 - in.y0);
    const double n_ring = static_cast<double>(out.x1 - out.x0) * (out.y1 - out.y0) - n_in;

    const auto C = static_cast<std::size_t>(channels_);
    std::vector<double> f(dim(), 0.0);
    for (int c = 0; c < channels_; ++c) {
        const double s = region_sum(sum_, c, in);
        const double q = region_sum(sumsq_, c, in);
        const double mean = s / n_in;
        const double var = std::max(q / n_in - mean * mean, 0.0);
        double lo = std::numeric_limits<double>::infinity();
        double hi = -lo;
        for (int r = in.y0; r < in.y1; ++r) {
            for (int x = in.x0; x < in.x1; ++x) {
                const double v = slice_.at(c, r, x);
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
        }
        double contrast = 0.0;
        if (n_ring > 0.0) {
            const double ring_mean = (region_sum(sum_, c, out) - s) / n_ring;
            contrast = mean - ring_mean;
        }
        f[c] = mean;
        f[C + c] = std::sqrt(var);
        f[2 * C + c] = lo;
        f[3 * C + c] = hi;
        f[4 * C + c] = contrast;
    }
    f[5 * C + 0] = box.center_x() / width_;
    f[5 * C + 1] = box.center_y() / height_;
    f[5 * C + 2] = box.width() / width_;
    f[5 * C + 3] = box.height() / height_;
    return f;
}

ad::Value FeatureExtractor::matrix(std::span<const Box> boxes) const
{
    const std::size_t d = dim();
    std::vector<double> data;
    data.reserve(boxes.size() * d);
    for (const auto& b : boxes) {
        const auto f = box_features(b);
        data.insert(data.end(), f.begin(), f.end());
    }
    return ad::Value::constant({boxes.size(), d}, std::move(data));
}

// -- config --------------------------------------------------------------------

void to_json(json& j, const DetectorConfig& c)
{
    j = json{{"hidden", c.hidden},
             {"mask_grid", c.mask_grid},
             {"k_pre", c.k_pre},
             {"nms_iou", c.nms_iou},
             {"k_post", c.k_post},
             {"pos_iou", c.pos_iou},
             {"neg_iou", c.neg_iou},
             {"rpn_batch", c.rpn_batch},
             {"max_positive_fraction", c.max_positive_fraction},
             {"add_gt_proposals", c.add_gt_proposals}};
}

void from_json(const json& j, DetectorConfig& c)
{
    const DetectorConfig d;
    c.hidden = j.value("hidden", d.hidden);
    c.mask_grid = j.value("mask_grid", d.mask_grid);
    c.k_pre = j.value("k_pre", d.k_pre);
    c.nms_iou = j.value("nms_iou", d.nms_iou);
    c.k_post = j.value("k_post", d.k_post);
    c.pos_iou = j.value("pos_iou", d.pos_iou);
    c.neg_iou = j.value("neg_iou", d.neg_iou);
    c.rpn_batch = j.value("rpn_batch", d.rpn_batch);
    c.max_positive_fraction = j.value("max_positive_fraction", d.max_positive_fraction);
    c.add_gt_proposals = j.value("add_gt_proposals", d.add_gt_proposals);
}

// -- networks ------------------------------------------------------------------

namespace {

void add_mlp(ad::ParamStore& store, const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out,
             Rng& rng)
{
    const double limit = std::sqrt(6.0 / static_cast<double>(in + hidden));
    std::vector<double> w1(in * hidden);
    for (auto& v : w1) {
        v = rng.uniform(-limit, limit);
    }
    store.add(prefix + ".l1.w", {in, hidden}, std::move(w1));
    store.add(prefix + ".l1.b", {hidden}, std::vector<double>(hidden, 0.0));
    store.add(prefix + ".l2.w", {hidden, out}, std::vector<double>(hidden * out, 0.0));
    store.add(prefix + ".l2.b", {out}, std::vector<double>(out, 0.0));
}

ad::Value mlp(const ad::ParamStore& store, const std::string& prefix, const ad::Value& x)
{
    const auto h = ad::tanh(ad::add_row_bias(ad::matmul(x, store.get(prefix + ".l1.w")), store.get(prefix + ".l1.b")));
    return ad::add_row_bias(ad::matmul(h, store.get(prefix + ".l2.w")), store.get(prefix + ".l2.b"));
}

} // namespace

Model make_model(int channels, const DetectorConfig& config, std::uint64_t seed)
{
    if (channels <= 0 || config.hidden <= 0 || config.mask_grid <= 0) {
        throw ConfigError("model dimensions must be positive");
    }
    Model m;
    m.kind = ModelKind::Learned;
    m.channels = channels;
    m.config = config;
    m.params = ad::ParamStore(seed);
    const auto f = FeatureExtractor::feature_dim(channels);
    const auto h = static_cast<std::size_t>(config.hidden);
    const auto grid = static_cast<std::size_t>(config.mask_grid);
    // Each head draws from its own stream so adding a head never shifts another's init.
    Rng rpn_rng(derive_seed(seed, {1}));
    Rng cls_rng(derive_seed(seed, {2}));
    Rng box_rng(derive_seed(seed, {3}));
    Rng mask_rng(derive_seed(seed, {4}));
    add_mlp(m.params, "rpn", f, h, kRpnOutputs, rpn_rng);
    add_mlp(m.params, "roi_cls", f, h, 1, cls_rng);
    add_mlp(m.params, "roi_box", f, h, 4, box_rng);
    add_mlp(m.params, "roi_mask", f, h, grid * grid, mask_rng);
    return m;
}

Model make_oracle_model(int channels)
{
    Model m;
    m.kind = ModelKind::Oracle;
    m.channels = channels;
    return m;
}

void fit_feature_normalization(Model& model, std::span<const syndata::SyntheticSlice> slices)
{
    const auto dim = FeatureExtractor::feature_dim(model.channels);
    std::vector<double> sum(dim, 0.0), sumsq(dim, 0.0);
    std::size_t n = 0;
    for (const auto& s : slices) {
        const FeatureExtractor fx(s);
        for (const auto& a : build_anchors(s.height, s.width)) {
            const auto f = fx.box_features(a.box);
            for (std::size_t k = 0; k < dim; ++k) {
                sum[k] += f[k];
                sumsq[k] += f[k] * f[k];
            }
            ++n;
        }
    }
    model.feature_shift.assign(dim, 0.0);
    model.feature_scale.assign(dim, 1.0);
    if (n == 0) {
        return;
    }
    for (std::size_t k = 0; k < dim; ++k) {
        const double mean = sum[k] / static_cast<double>(n);
        const double var = std::max(sumsq[k] / static_cast<double>(n) - mean * mean, 0.0);
        model.feature_shift[k] = mean;
        model.feature_scale[k] = 1.0 / std::max(std::sqrt(var), 1e-6);
    }
}

ad::Value model_features(const Model& model, const FeatureExtractor& fx, std::span<const Box> boxes)
{
    auto raw = fx.matrix(boxes);
    if (model.feature_shift.empty()) {
        return raw;
    }
    const std::size_t dim = fx.dim();
    if (model.feature_shift.size() != dim || model.feature_scale.size() != dim) {
        throw DimensionError("feature normalization has the wrong dimension");
    }
    auto data = raw.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const std::size_t k = i % dim;
        data[i] = (data[i] - model.feature_shift[k]) * model.feature_scale[k];
    }
    return raw;
}

RpnOutput rpn_forward(const ad::Value& anchor_features, const ad::ParamStore& params)
{
    const auto out = mlp(params, "rpn", anchor_features);
    return {ad::sigmoid(ad::columns(out, 0, 1)), ad::columns(out, 1, kRpnOutputs)};
}

RoiOutput roi_forward(const ad::Value& roi_features, const ad::ParamStore& params)
{
    return {ad::sigmoid(mlp(params, "roi_cls", roi_features)), mlp(params, "roi_box", roi_features),
            ad::sigmoid(mlp(params, "roi_mask", roi_features))};
}

// -- proposals -------------------------------------------------------------------

std::vector<Proposal> select_proposals(std::span<const Anchor> anchors, std::span<const double> objectness,
                                       std::span<const double> deltas, int height, int width,
                                       const ProposalConfig& cfg)
{
    std::vector<std::size_t> order(anchors.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return objectness[a] > objectness[b]; });
    order.resize(std::min(order.size(), static_cast<std::size_t>(std::max(cfg.k_pre, 0))));

    std::vector<Proposal> pre;
    pre.reserve(order.size());
    for (auto idx : order) {
        const BoxDeltas d{deltas[idx * 4], deltas[idx * 4 + 1], deltas[idx * 4 + 2], deltas[idx * 4 + 3]};
        Box b = clip_box(decode_box(anchors[idx].box, d), width, height);
        if (b.degenerate()) {
            b = anchors[idx].box;
        }
        pre.push_back({b, objectness[idx], idx});
    }

    std::vector<Box> boxes;
    std::vector<double> scores;
    for (const auto& p : pre) {
        boxes.push_back(p.box);
        scores.push_back(p.objectness);
    }
    auto keep = nms(boxes, scores, cfg.nms_iou);
    std::vector<Proposal> out;
    for (auto k : keep) {
        out.push_back(pre[k]);
    }
    std::stable_sort(out.begin(), out.end(), [](const Proposal& a, const Proposal& b) {
        if (a.objectness != b.objectness) {
            return a.objectness > b.objectness;
        }
        return a.anchor_index < b.anchor_index;
    });
    out.resize(std::min(out.size(), static_cast<std::size_t>(std::max(cfg.k_post, 0))));
    return out;
}

std::vector<ProposalLabel> assign_labels(std::span<const Box> boxes, std::span<const syndata::Lesion> lesions,
                                         double pos_iou, double neg_iou)
{
    std::vector<ProposalLabel> labels(boxes.size());
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        double best = 0.0;
        std::optional<std::size_t> best_gt;
        for (std::size_t g = 0; g < lesions.size(); ++g) {
            const double v = iou(boxes[i], lesions[g].bbox);
            if (v > best) {
                best = v;
                best_gt = g;
            }
        }
        if (best_gt && best >= pos_iou) {
            labels[i] = {1, best_gt};
        } else if (best < neg_iou) {
            labels[i] = {0, std::nullopt};
        }
    }
    return labels;
}

std::vector<double> mask_target(const syndata::Mask& mask, const Box& box, int grid)
{
    std::vector<double> out(static_cast<std::size_t>(grid) * grid, 0.0);
    for (int v = 0; v < grid; ++v) {
        for (int u = 0; u < grid; ++u) {
            const double x = box.x1 + (u + 0.5) * box.width() / grid;
            const double y = box.y1 + (v + 0.5) * box.height() / grid;
            const int px = static_cast<int>(std::floor(x));
            const int py = static_cast<int>(std::floor(y));
            if (px >= 0 && px < mask.width && py >= 0 && py < mask.height && mask.at(py, px)) {
                out[static_cast<std::size_t>(v) * grid + u] = 1.0;
            }
        }
    }
    return out;
}

// -- inference -------------------------------------------------------------------

namespace {

std::vector<Proposal> run_proposal_stage(const syndata::SyntheticSlice& slice, const Model& model,
                                         const FeatureExtractor& fx, const std::vector<Anchor>& anchors,
                                         RpnOutput* rpn_out)
{
    std::vector<Box> anchor_boxes;
    anchor_boxes.reserve(anchors.size());
    for (const auto& a : anchors) {
        anchor_boxes.push_back(a.box);
    }
    RpnOutput rpn = rpn_forward(model_features(model, fx, anchor_boxes), model.params);
    const auto finite = [](std::span<const double> v) {
        return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    };
    if (!finite(rpn.objectness.data()) || !finite(rpn.deltas.data())) {
        throw FeatureError("non-finite proposal scores on slice " + slice.slice_id);
    }
    const ProposalConfig pc{model.config.k_pre, model.config.nms_iou, model.config.k_post};
    auto proposals = select_proposals(anchors, rpn.objectness.data(), rpn.deltas.data(), slice.height, slice.width, pc);
    if (rpn_out) {
        *rpn_out = std::move(rpn);
    }
    return proposals;
}

} // namespace

std::vector<Candidate> score_candidates(const syndata::SyntheticSlice& slice, const Model& model)
{
    if (model.kind == ModelKind::Oracle) {
        std::vector<Candidate> out;
        for (const auto& l : slice.lesions) {
            out.push_back({l.bbox, 1.0, mask_target(l.mask, l.bbox, model.config.mask_grid)});
        }
        return out;
    }
    const auto anchors = build_anchors(slice.height, slice.width);
    const FeatureExtractor fx(slice);
    const auto proposals = run_proposal_stage(slice, model, fx, anchors, nullptr);
    if (proposals.empty()) {
        return {};
    }
    std::vector<Box> boxes;
    for (const auto& p : proposals) {
        boxes.push_back(p.box);
    }
    const auto roi = roi_forward(model_features(model, fx, boxes), model.params);
    const auto cells = static_cast<std::size_t>(model.config.mask_grid) * model.config.mask_grid;
    std::vector<Candidate> out;
    out.reserve(boxes.size());
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const BoxDeltas d{roi.deltas[i * 4], roi.deltas[i * 4 + 1], roi.deltas[i * 4 + 2], roi.deltas[i * 4 + 3]};
        Box refined = clip_box(decode_box(boxes[i], d), slice.width, slice.height);
        if (refined.degenerate()) {
            refined = boxes[i];
        }
        const auto m = roi.mask_prob.data().subspan(i * cells, cells);
        out.push_back({refined, roi.class_prob[i], std::vector<double>(m.begin(), m.end())});
    }
    return out;
}

DetectionSet postprocess(std::span<const Candidate> candidates, double threshold, double nms_iou, int max_det)
{
    std::vector<std::size_t> passing;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (candidates[i].class_prob >= threshold) {
            passing.push_back(i);
        }
    }
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (auto i : passing) {
        boxes.push_back(candidates[i].box);
        scores.push_back(candidates[i].class_prob);
    }
    const auto keep = nms(boxes, scores, nms_iou);
    DetectionSet out;
    for (auto k : keep) {
        if (static_cast<int>(out.size()) >= max_det) {
            break;
        }
        const auto& c = candidates[passing[k]];
        out.push_back({c.box, c.class_prob, c.mask_grid});
    }
    return out;
}

DetectionSet infer(const syndata::SyntheticSlice& slice, const Model& model, double threshold, int max_det)
{
    const auto candidates = score_candidates(slice, model);
    return postprocess(candidates, threshold, model.config.nms_iou, max_det);
}

// -- training forward --------------------------------------------------------------

namespace {

// Keeps at most `max_pos` positives and `total - kept positives` negatives,
// chosen uniformly at random; the rest become -1.
void subsample(std::vector<int>& labels, std::size_t max_pos, std::size_t total, Rng& rng)
{
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == 1) {
            pos.push_back(i);
        } else if (labels[i] == 0) {
            neg.push_back(i);
        }
    }
    auto trim = [&](std::vector<std::size_t>& idx, std::size_t keep) {
        if (idx.size() <= keep) {
            return;
        }
        rng.shuffle(idx.begin(), idx.end());
        for (std::size_t i = keep; i < idx.size(); ++i) {
            labels[idx[i]] = -1;
        }
        idx.resize(keep);
    };
    trim(pos, max_pos);
    trim(neg, total > pos.size() ? total - pos.size() : 0);
}

} // namespace

StageOutputs forward_train(const syndata::SyntheticSlice& slice, const Model& model, Rng& rng)
{
    if (model.kind != ModelKind::Learned) {
        throw ContractError("forward_train requires a learned model");
    }
    const auto& cfg = model.config;
    StageOutputs out;
    out.slice_positive = slice.positive();
    out.mask_grid = cfg.mask_grid;

    const auto anchors = build_anchors(slice.height, slice.width);
    const FeatureExtractor fx(slice);
    RpnOutput rpn;
    auto proposals = run_proposal_stage(slice, model, fx, anchors, &rpn);
    out.rpn_objectness = rpn.objectness;
    out.rpn_deltas = rpn.deltas;

    // Anchor labels, with each lesion's best anchor forced positive.
    std::vector<Box> anchor_boxes;
    for (const auto& a : anchors) {
        anchor_boxes.push_back(a.box);
    }
    const auto anchor_assign = assign_labels(anchor_boxes, slice.lesions, cfg.pos_iou, cfg.neg_iou);
    out.anchor_labels.resize(anchors.size());
    out.anchor_targets.assign(anchors.size(), BoxDeltas{});
    std::vector<std::optional<std::size_t>> anchor_gt(anchors.size());
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        out.anchor_labels[i] = anchor_assign[i].label;
        anchor_gt[i] = anchor_assign[i].gt_index;
    }
    for (std::size_t g = 0; g < slice.lesions.size(); ++g) {
        std::size_t best = 0;
        double best_iou = -1.0;
        for (std::size_t i = 0; i < anchors.size(); ++i) {
            const double v = iou(anchor_boxes[i], slice.lesions[g].bbox);
            if (v > best_iou) {
                best_iou = v;
                best = i;
            }
        }
        if (best_iou > 0.0) {
            out.anchor_labels[best] = 1;
            anchor_gt[best] = g;
        }
    }
    const auto rpn_batch = static_cast<std::size_t>(std::max(cfg.rpn_batch, 1));
    subsample(out.anchor_labels, static_cast<std::size_t>(cfg.max_positive_fraction * rpn_batch), rpn_batch, rng);
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        if (out.anchor_labels[i] == 1) {
            out.anchor_targets[i] = encode_box(anchor_boxes[i], slice.lesions[*anchor_gt[i]].bbox);
        }
    }

    // RoI stage.
    std::vector<Box> roi_boxes;
    for (const auto& p : proposals) {
        roi_boxes.push_back(p.box);
    }
    out.n_proposals = roi_boxes.size();
    if (cfg.add_gt_proposals) {
        for (const auto& l : slice.lesions) {
            roi_boxes.push_back(l.bbox);
        }
    }
    if (roi_boxes.empty()) {
        return out;
    }
    const auto roi_assign = assign_labels(roi_boxes, slice.lesions, cfg.pos_iou, cfg.neg_iou);
    out.roi_labels.resize(roi_boxes.size());
    for (std::size_t i = 0; i < roi_boxes.size(); ++i) {
        out.roi_labels[i] = roi_assign[i].label;
    }
    const auto k_post = static_cast<std::size_t>(std::max(cfg.k_post, 1));
    subsample(out.roi_labels, static_cast<std::size_t>(cfg.max_positive_fraction * k_post), roi_boxes.size(), rng);

    const auto roi = roi_forward(model_features(model, fx, roi_boxes), model.params);
    out.roi_probs = roi.class_prob;
    out.roi_deltas = roi.deltas;
    out.roi_masks = roi.mask_prob;
    out.roi_box_targets.assign(roi_boxes.size(), BoxDeltas{});
    out.roi_mask_targets.assign(roi_boxes.size(), {});
    for (std::size_t i = 0; i < roi_boxes.size(); ++i) {
        if (out.roi_labels[i] == 1) {
            const auto& gt = slice.lesions[*roi_assign[i].gt_index];
            out.roi_box_targets[i] = encode_box(roi_boxes[i], gt.bbox);
            out.roi_mask_targets[i] = mask_target(gt.mask, roi_boxes[i], cfg.mask_grid);
        }
    }
    return out;
}

} // namespace costdet::detector
