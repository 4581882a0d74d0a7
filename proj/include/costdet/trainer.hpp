#pragma once

// Per-slice SGD over the multi-task loss, plus checkpoint I/O.

#include "costdet/detector.hpp"
#include "costdet/evaluator.hpp"
#include "costdet/losses.hpp"
#include "costdet/syndata.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace costdet::trainer {

struct TrainConfig {
    int epochs = 30;
    double lr = 0.001;
    std::uint64_t seed = 0;
    losses::CostConfig cost;
    bool augment = false;
    int checkpoint_every = 0;  // 0 disables periodic checkpoints
    detector::DetectorConfig detector;
    double eval_threshold = 0.7;
    // Run validation metrics after every epoch (skipped when val is empty).
    bool validate_each_epoch = true;

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochRow {
    int epoch = 0;
    double rpn_reg = 0.0;
    double rpn_cls = 0.0;
    double box = 0.0;
    double mask = 0.0;
    double cost_cls = 0.0;
    double slice_cls = 0.0;
    double total = 0.0;
    double val_lesion_fnr = eval::kNaN;
    double val_lesion_fp_per_slice = eval::kNaN;
    double val_slice_fnr = eval::kNaN;
    double val_slice_fpr = eval::kNaN;
    double wall_seconds = 0.0;
};

struct TrainLog {
    std::vector<EpochRow> rows;
    std::string csv() const;
};

struct TrainHooks {
    std::function<void(const EpochRow&)> on_epoch;
    std::function<void(int epoch, const detector::Model&)> on_checkpoint;
};

struct TrainResult {
    detector::Model model;
    TrainLog log;
    std::size_t updates = 0;
};

/// Trains on the train split. Throws ConfigError for an invalid config or an
/// empty train split and TrainingError (naming the slice) on a non-finite loss.
TrainResult train(const std::vector<syndata::SyntheticSlice>& dataset, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

/// One forward/backward/update on a single slice. Returns the loss terms
/// before the update, in breakdown order.
std::array<double, 7> train_step(detector::Model& model, const syndata::SyntheticSlice& slice,
                                 const losses::CostConfig& cost, double lr, Rng& rng);

/// Validation metrics; never mutates the model. Throws on an empty split.
eval::MetricsReport evaluate_epoch(const detector::Model& model, std::span<const syndata::SyntheticSlice> val,
                                   double threshold = 0.7);

// -- checkpoints ------------------------------------------------------------------

struct CheckpointMeta {
    std::uint64_t seed = 0;
    losses::CostConfig cost;
    nlohmann::json train = nlohmann::json::object();
};

/// One line of JSON (architecture, seed, cost config, parameter table and the
/// SHA-256 of the blob) followed by the raw little-endian float64 blob.
void save_checkpoint(const std::filesystem::path& path, const detector::Model& model, const CheckpointMeta& meta);

struct LoadedCheckpoint {
    detector::Model model;
    CheckpointMeta meta;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

} // namespace costdet::trainer
