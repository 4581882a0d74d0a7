#include "costdet/trainer.hpp"

#include "costdet/errors.hpp"
#include "costdet/hashing.hpp"
#include "costdet/rng.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace costdet::trainer {

using nlohmann::json;
namespace fs = std::filesystem;

void TrainConfig::validate() const
{
    if (epochs < 1) {
        throw ConfigError("epochs must be at least 1");
    }
    if (!(lr >= 0.0) || !std::isfinite(lr)) {
        throw ConfigError("learning rate must be finite and non-negative");
    }
    if (checkpoint_every < 0) {
        throw ConfigError("checkpoint_every must be non-negative");
    }
    cost.validate();
}

void to_json(json& j, const TrainConfig& c)
{
    j = json{{"epochs", c.epochs},
             {"lr", c.lr},
             {"seed", c.seed},
             {"cost", c.cost},
             {"augment", c.augment},
             {"checkpoint_every", c.checkpoint_every},
             {"detector", c.detector},
             {"eval_threshold", c.eval_threshold},
             {"validate_each_epoch", c.validate_each_epoch}};
}

void from_json(const json& j, TrainConfig& c)
{
    const TrainConfig d;
    c.epochs = j.value("epochs", d.epochs);
    c.lr = j.value("lr", d.lr);
    c.seed = j.value("seed", d.seed);
    c.cost = j.value("cost", d.cost);
    c.augment = j.value("augment", d.augment);
    c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
    c.detector = j.value("detector", d.detector);
    c.eval_threshold = j.value("eval_threshold", d.eval_threshold);
    c.validate_each_epoch = j.value("validate_each_epoch", d.validate_each_epoch);
}

std::string TrainLog::csv() const
{
    std::string out = "epoch,rpn_reg,rpn_cls,box,mask,cost_cls,slice_cls,total,val_lesion_fnr,"
                      "val_lesion_fp_per_slice,val_slice_fnr,val_slice_fpr,wall_seconds\n";
    char buf[512];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.6g,%.6g,%.6g,%.6g,%.3f\n", r.epoch,
                      r.rpn_reg, r.rpn_cls, r.box, r.mask, r.cost_cls, r.slice_cls, r.total, r.val_lesion_fnr,
                      r.val_lesion_fp_per_slice, r.val_slice_fnr, r.val_slice_fpr, r.wall_seconds);
        out += buf;
    }
    return out;
}

std::array<double, 7> train_step(detector::Model& model, const syndata::SyntheticSlice& slice,
                                 const losses::CostConfig& cost, double lr, Rng& rng)
{
    detector::StageOutputs stage;
    try {
        stage = detector::forward_train(slice, model, rng);
    } catch (const FeatureError& e) {
        throw TrainingError(std::string("non-finite loss on slice ") + slice.slice_id + ": " + e.what());
    }
    const auto loss = losses::total_loss(stage, cost);
    const std::array<double, 7> values{loss.rpn_reg.item(),  loss.rpn_cls.item(),  loss.box.item(),
                                       loss.mask.item(),     loss.cost_cls.item(), loss.slice_cls.item(),
                                       loss.total.item()};
    if (!std::isfinite(values[6])) {
        throw TrainingError("non-finite loss on slice " + slice.slice_id);
    }
    model.params.zero_grad();
    ad::backward(loss.total);
    model.params.sgd_step(lr);
    return values;
}

eval::MetricsReport evaluate_epoch(const detector::Model& model, std::span<const syndata::SyntheticSlice> val,
                                   double threshold)
{
    if (val.empty()) {
        throw EvaluationError("empty split");
    }
    return eval::evaluate(model, val, threshold, 6);
}

TrainResult train(const std::vector<syndata::SyntheticSlice>& dataset, const TrainConfig& cfg, const TrainHooks& hooks)
{
    cfg.validate();
    const auto train_split = syndata::filter_split(dataset, syndata::Split::Train);
    const auto val_split = syndata::filter_split(dataset, syndata::Split::Val);
    if (train_split.empty()) {
        throw ConfigError("dataset has an empty train split");
    }
    const int channels = train_split.front().channels;

    TrainResult result{detector::make_model(channels, cfg.detector, cfg.seed), {}, 0};
    detector::fit_feature_normalization(result.model, train_split);
    std::vector<std::size_t> order(train_split.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        Rng shuffle_rng(derive_seed(cfg.seed, {0xe90c4ULL, static_cast<std::uint64_t>(epoch)}));
        shuffle_rng.shuffle(order.begin(), order.end());

        EpochRow row;
        row.epoch = epoch;
        std::array<double, 7> sums{};
        for (std::size_t k = 0; k < order.size(); ++k) {
            const auto& base = train_split[order[k]];
            Rng step_rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), order[k]}));
            const auto values = cfg.augment
                                    ? train_step(result.model, syndata::augment_affine(base, step_rng.next_u64()),
                                                 cfg.cost, cfg.lr, step_rng)
                                    : train_step(result.model, base, cfg.cost, cfg.lr, step_rng);
            for (std::size_t t = 0; t < sums.size(); ++t) {
                sums[t] += values[t];
            }
            ++result.updates;
        }
        const double n = static_cast<double>(order.size());
        row.rpn_reg = sums[0] / n;
        row.rpn_cls = sums[1] / n;
        row.box = sums[2] / n;
        row.mask = sums[3] / n;
        row.cost_cls = sums[4] / n;
        row.slice_cls = sums[5] / n;
        row.total = sums[6] / n;

        if (cfg.validate_each_epoch && !val_split.empty()) {
            const auto m = evaluate_epoch(result.model, val_split, cfg.eval_threshold);
            row.val_lesion_fnr = m.lesion_fnr;
            row.val_lesion_fp_per_slice = m.lesion_fp_per_slice;
            row.val_slice_fnr = m.slice_fnr;
            row.val_slice_fpr = m.slice_fpr;
        }
        row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.log.rows.push_back(row);
        if (hooks.on_epoch) {
            hooks.on_epoch(row);
        }
        if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
            hooks.on_checkpoint(epoch, result.model);
        }
    }
    return result;
}

// -- checkpoints ------------------------------------------------------------------

namespace {

void append_double(std::vector<char>& blob, double x)
{
    const auto bits = std::bit_cast<std::uint64_t>(x);
    for (int b = 0; b < 8; ++b) {
        blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
    }
}

// Parameters in store order, then the normalization shift and scale.
std::vector<char> encode_blob(const detector::Model& model)
{
    std::vector<char> blob;
    blob.reserve((model.params.parameter_count() + 2 * model.feature_shift.size()) * 8);
    for (const auto& [name, v] : model.params.items()) {
        for (double x : v.data()) {
            append_double(blob, x);
        }
    }
    for (double x : model.feature_shift) {
        append_double(blob, x);
    }
    for (double x : model.feature_scale) {
        append_double(blob, x);
    }
    return blob;
}

double decode_double(const char* p)
{
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[b])) << (8 * b);
    }
    return std::bit_cast<double>(bits);
}

} // namespace

void save_checkpoint(const fs::path& path, const detector::Model& model, const CheckpointMeta& meta)
{
    if (model.feature_shift.size() != model.feature_scale.size()) {
        throw DimensionError("feature normalization shift/scale size mismatch");
    }
    const auto blob = encode_blob(model);
    json params = json::array();
    for (const auto& [name, v] : model.params.items()) {
        params.push_back({{"name", name}, {"shape", v.shape()}});
    }
    const json header{
        {"format", "costdet-checkpoint"},
        {"version", 1},
        {"kind", model.kind == detector::ModelKind::Oracle ? "oracle" : "learned"},
        {"arch",
         {{"channels", model.channels},
          {"feature_dim", detector::FeatureExtractor::feature_dim(model.channels)},
          {"detector", model.config}}},
        {"seed", meta.seed},
        {"cost", meta.cost},
        {"train", meta.train},
        {"params", std::move(params)},
        {"normalization_dim", model.feature_shift.size()},
        {"blob_bytes", blob.size()},
        {"blob_sha256", sha256_hex(std::as_bytes(std::span(blob)))}};

    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write checkpoint " + path.string());
    }
    const std::string line = header.dump() + "\n";
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) {
        throw IoError("failed writing checkpoint " + path.string());
    }
}

LoadedCheckpoint load_checkpoint(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("missing checkpoint " + path.string());
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw IoError("empty checkpoint " + path.string());
    }
    std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    LoadedCheckpoint out;
    try {
        const json header = json::parse(line);
        if (header.at("format") != "costdet-checkpoint") {
            throw IoError("not a checkpoint: " + path.string());
        }
        if (blob.size() != header.at("blob_bytes").get<std::size_t>()) {
            throw IoError("truncated checkpoint " + path.string());
        }
        if (sha256_hex(std::as_bytes(std::span(blob))) != header.at("blob_sha256").get<std::string>()) {
            throw IoError("checksum mismatch in checkpoint " + path.string());
        }
        out.meta.seed = header.at("seed").get<std::uint64_t>();
        out.meta.cost = header.at("cost").get<losses::CostConfig>();
        out.meta.train = header.value("train", json::object());

        const auto& arch = header.at("arch");
        auto& model = out.model;
        model.kind = header.at("kind") == "oracle" ? detector::ModelKind::Oracle : detector::ModelKind::Learned;
        model.channels = arch.at("channels").get<int>();
        model.config = arch.at("detector").get<detector::DetectorConfig>();
        model.params = ad::ParamStore(out.meta.seed);
        std::size_t offset = 0;
        for (const auto& p : header.at("params")) {
            const auto shape = p.at("shape").get<ad::Shape>();
            const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
            if (offset + n * 8 > blob.size()) {
                throw IoError("parameter table exceeds blob in " + path.string());
            }
            std::vector<double> data(n);
            for (std::size_t i = 0; i < n; ++i) {
                data[i] = decode_double(&blob[offset + i * 8]);
            }
            offset += n * 8;
            model.params.add(p.at("name").get<std::string>(), shape, std::move(data));
        }
        const auto norm_dim = header.value("normalization_dim", std::size_t{0});
        if (offset + 2 * norm_dim * 8 != blob.size()) {
            throw IoError("normalization table does not match blob in " + path.string());
        }
        for (auto* target : {&model.feature_shift, &model.feature_scale}) {
            target->resize(norm_dim);
            for (std::size_t i = 0; i < norm_dim; ++i) {
                (*target)[i] = decode_double(&blob[offset + i * 8]);
            }
            offset += norm_dim * 8;
        }
        if (offset != blob.size()) {
            throw IoError("unused bytes in checkpoint " + path.string());
        }
    } catch (const json::exception& e) {
        throw IoError("malformed checkpoint header in " + path.string() + ": " + e.what());
    }
    return out;
}

} // namespace costdet::trainer
