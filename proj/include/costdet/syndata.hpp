#pragma once

// Synthetic multi-channel slices with elliptical lesions, plus the on-disk
// dataset format (manifest.json, annotations.json, raw float32 buffers).

#include "costdet/box.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace costdet::syndata {

enum class Split { Train, Val, Test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

/// Row-major H x W binary bitmap.
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> bits;

    Mask() = default;
    Mask(int h, int w) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, 0) {}

    std::uint8_t at(int row, int col) const { return bits[static_cast<std::size_t>(row) * width + col]; }
    void set(int row, int col, std::uint8_t v = 1) { bits[static_cast<std::size_t>(row) * width + col] = v; }
    bool empty() const;
    /// Tight half-open bounding box of the set pixels; degenerate when empty.
    Box tight_box() const;

    bool operator==(const Mask&) const = default;
};

struct Lesion {
    Box bbox;  // integer coordinates, half-open
    Mask mask;
    bool significant = true;

    bool operator==(const Lesion&) const = default;
};

struct SyntheticSlice {
    std::string slice_id;
    Split split = Split::Train;
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> pixels;  // C x H x W, values in [0, 1]
    std::vector<Lesion> lesions;

    bool positive() const { return !lesions.empty(); }
    float at(int c, int row, int col) const
    {
        return pixels[(static_cast<std::size_t>(c) * height + row) * width + col];
    }
    float& at(int c, int row, int col) { return pixels[(static_cast<std::size_t>(c) * height + row) * width + col]; }

    bool operator==(const SyntheticSlice&) const = default;
};

struct SplitRatios {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
};

struct GenConfig {
    int n_slices = 200;
    double positive_fraction = 0.4;
    int channels = 3;
    int height = 64;
    int width = 64;
    double radius_min = 3.0;
    double radius_max = 7.0;
    double contrast_min = 0.08;
    double contrast_max = 0.30;
    double noise_sigma = 0.04;
    // Expected number of lesion-like distractors per slice. Distractors are
    // never annotated; they are what the detector has to learn to reject.
    double mimic_rate = 2.0;
    std::uint64_t seed = 0;
    SplitRatios splits;

    /// Throws ConfigError on invalid settings.
    void validate() const;
};

void to_json(nlohmann::json& j, const GenConfig& cfg);
void from_json(const nlohmann::json& j, GenConfig& cfg);

std::vector<SyntheticSlice> generate(const GenConfig& cfg);

/// Slices of the given split, in dataset order.
std::vector<SyntheticSlice> filter_split(const std::vector<SyntheticSlice>& slices, Split split);

struct ManifestEntry {
    std::string slice_id;
    Split split = Split::Train;
    std::string file;
    std::string sha256;
};

struct Manifest {
    std::vector<ManifestEntry> entries;
    std::size_t train_count = 0;
    std::size_t val_count = 0;
    std::size_t test_count = 0;
};

Manifest save_dataset(const std::vector<SyntheticSlice>& slices, const std::filesystem::path& dir);
std::vector<SyntheticSlice> load_dataset(const std::filesystem::path& dir);

/// SHA-256 over ids, splits, annotations and pixel buffers, in order.
std::string dataset_digest(const std::vector<SyntheticSlice>& slices);

/// Alternating (skip, run) counts over the row-major bitmap, starting with a skip.
std::vector<std::int64_t> rle_encode(const Mask& mask);
Mask rle_decode(const std::vector<std::int64_t>& counts, int height, int width);

struct AffineParams {
    double rotation_deg = 0.0;
    double tx = 0.0;
    double ty = 0.0;
    double scale = 1.0;
};

/// Warps channels (bilinear) and masks (nearest) about the image center.
/// Boxes are recomputed from the warped masks; lesions that leave the frame
/// entirely are dropped.
SyntheticSlice apply_affine(const SyntheticSlice& slice, const AffineParams& params);

/// Random rotation in +-15 deg, translation in +-4 px, scale in [0.9, 1.1].
AffineParams sample_affine(std::uint64_t seed);
SyntheticSlice augment_affine(const SyntheticSlice& slice, std::uint64_t seed);

} // namespace costdet::syndata
