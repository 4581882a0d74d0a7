#include "costdet/syndata.hpp"

#include "costdet/errors.hpp"
#include "costdet/hashing.hpp"
#include "costdet/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>

namespace costdet::syndata {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Split s)
{
    switch (s) {
    case Split::Train:
        return "train";
    case Split::Val:
        return "val";
    case Split::Test:
        return "test";
    }
    return "train";
}

Split split_from_string(const std::string& s)
{
    if (s == "train") {
        return Split::Train;
    }
    if (s == "val") {
        return Split::Val;
    }
    if (s == "test") {
        return Split::Test;
    }
    throw ConfigError("unknown split '" + s + "'");
}

bool Mask::empty() const
{
    return std::none_of(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; });
}

Box Mask::tight_box() const
{
    int x1 = width, y1 = height, x2 = 0, y2 = 0;
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            if (at(r, c)) {
                x1 = std::min(x1, c);
                y1 = std::min(y1, r);
                x2 = std::max(x2, c + 1);
                y2 = std::max(y2, r + 1);
            }
        }
    }
    if (x2 <= x1 || y2 <= y1) {
        return {};
    }
    return {double(x1), double(y1), double(x2), double(y2)};
}

void GenConfig::validate() const
{
    if (n_slices < 0) {
        throw ConfigError("n_slices must be non-negative");
    }
    if (channels <= 0 || height <= 0 || width <= 0) {
        throw ConfigError("channels, height and width must be positive");
    }
    if (!(positive_fraction >= 0.0 && positive_fraction <= 1.0)) {
        throw ConfigError("positive_fraction must lie in [0, 1]");
    }
    if (!(radius_min > 0.0) || !(radius_max >= radius_min)) {
        throw ConfigError("lesion radius range is empty");
    }
    if (2.0 * radius_max + 4.0 >= std::min(height, width)) {
        throw ConfigError("lesion radius range does not fit the image");
    }
    if (!(contrast_min >= 0.0) || !(contrast_max >= contrast_min)) {
        throw ConfigError("contrast range is empty");
    }
    if (!(noise_sigma >= 0.0) || !(mimic_rate >= 0.0)) {
        throw ConfigError("noise_sigma and mimic_rate must be non-negative");
    }
    const double total = splits.train + splits.val + splits.test;
    if (splits.train < 0 || splits.val < 0 || splits.test < 0 || std::abs(total - 1.0) > 1e-9) {
        throw ConfigError("split ratios must be non-negative and sum to 1");
    }
}

void to_json(json& j, const GenConfig& c)
{
    j = json{{"n_slices", c.n_slices},       {"positive_fraction", c.positive_fraction},
             {"channels", c.channels},       {"height", c.height},
             {"width", c.width},             {"radius_min", c.radius_min},
             {"radius_max", c.radius_max},   {"contrast_min", c.contrast_min},
             {"contrast_max", c.contrast_max}, {"noise_sigma", c.noise_sigma},
             {"mimic_rate", c.mimic_rate},   {"seed", c.seed},
             {"splits", {c.splits.train, c.splits.val, c.splits.test}}};
}

void from_json(const json& j, GenConfig& c)
{
    const GenConfig d;
    c.n_slices = j.value("n_slices", d.n_slices);
    c.positive_fraction = j.value("positive_fraction", d.positive_fraction);
    c.channels = j.value("channels", d.channels);
    c.height = j.value("height", d.height);
    c.width = j.value("width", d.width);
    c.radius_min = j.value("radius_min", d.radius_min);
    c.radius_max = j.value("radius_max", d.radius_max);
    c.contrast_min = j.value("contrast_min", d.contrast_min);
    c.contrast_max = j.value("contrast_max", d.contrast_max);
    c.noise_sigma = j.value("noise_sigma", d.noise_sigma);
    c.mimic_rate = j.value("mimic_rate", d.mimic_rate);
    c.seed = j.value("seed", d.seed);
    if (j.contains("splits")) {
        const auto& s = j.at("splits");
        if (!s.is_array() || s.size() != 3) {
            throw ConfigError("splits must be a 3-element array");
        }
        c.splits = {s[0].get<double>(), s[1].get<double>(), s[2].get<double>()};
    }
}

namespace {

struct Ellipse {
    double cx, cy, rx, ry, angle;
};

Mask rasterize(const Ellipse& e, int height, int width)
{
    Mask m(height, width);
    const double ca = std::cos(e.angle), sa = std::sin(e.angle);
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            const double dx = c + 0.5 - e.cx;
            const double dy = r + 0.5 - e.cy;
            const double u = (dx * ca + dy * sa) / e.rx;
            const double v = (-dx * sa + dy * ca) / e.ry;
            if (u * u + v * v <= 1.0) {
                m.set(r, c);
            }
        }
    }
    return m;
}

Ellipse sample_ellipse(Rng& rng, const GenConfig& cfg)
{
    const double rx = rng.uniform(cfg.radius_min, cfg.radius_max);
    const double ry = rng.uniform(cfg.radius_min, cfg.radius_max);
    const double margin = std::max(rx, ry) + 2.0;
    return {rng.uniform(margin, cfg.width - margin), rng.uniform(margin, cfg.height - margin), rx, ry,
            rng.uniform(0.0, std::numbers::pi)};
}

bool overlaps(const Box& a, const std::vector<Box>& taken, double gap)
{
    const Box grown{a.x1 - gap, a.y1 - gap, a.x2 + gap, a.y2 + gap};
    return std::any_of(taken.begin(), taken.end(), [&](const Box& b) { return iou(grown, b) > 0.0; });
}

// Lesion signature: darker on T2 (0) and ADC (1), brighter on DWI (2).
double lesion_sign(int channel)
{
    switch (channel) {
    case 0:
        return -0.5;
    case 1:
        return -1.0;
    case 2:
        return 1.0;
    default:
        return channel % 2 == 0 ? 0.5 : -0.5;
    }
}

void paint(SyntheticSlice& s, const Mask& m, const std::vector<double>& per_channel)
{
    for (int c = 0; c < s.channels; ++c) {
        const float delta = static_cast<float>(per_channel[c]);
        for (int r = 0; r < s.height; ++r) {
            for (int x = 0; x < s.width; ++x) {
                if (m.at(r, x)) {
                    s.at(c, r, x) += delta;
                }
            }
        }
    }
}

// Separable box blur with edge replication.
std::vector<double> box_blur(const std::vector<double>& in, int h, int w, int radius)
{
    std::vector<double> tmp(in.size()), out(in.size());
    const double norm = 1.0 / (2 * radius + 1);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                acc += in[static_cast<std::size_t>(r) * w + std::clamp(c + k, 0, w - 1)];
            }
            tmp[static_cast<std::size_t>(r) * w + c] = acc * norm;
        }
    }
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                acc += tmp[static_cast<std::size_t>(std::clamp(r + k, 0, h - 1)) * w + c];
            }
            out[static_cast<std::size_t>(r) * w + c] = acc * norm;
        }
    }
    return out;
}

std::string make_slice_id(std::size_t i)
{
    std::ostringstream os;
    os << 's' << std::setw(5) << std::setfill('0') << i;
    return os.str();
}

SyntheticSlice generate_one(const GenConfig& cfg, std::size_t index)
{
    Rng rng(derive_seed(cfg.seed, {0x511ceULL, index}));
    SyntheticSlice s;
    s.slice_id = make_slice_id(index);
    s.channels = cfg.channels;
    s.height = cfg.height;
    s.width = cfg.width;
    const std::size_t plane = static_cast<std::size_t>(cfg.height) * cfg.width;
    s.pixels.assign(plane * cfg.channels, 0.0f);

    // Background: per-channel base level, smooth low-frequency texture and
    // white pixel noise.
    std::vector<std::vector<double>> background(cfg.channels);
    for (int c = 0; c < cfg.channels; ++c) {
        const double base = rng.uniform(0.35, 0.55);
        std::vector<double> field(plane);
        for (auto& v : field) {
            v = rng.normal() * cfg.noise_sigma * 4.0;
        }
        field = box_blur(field, cfg.height, cfg.width, 3);
        for (std::size_t i = 0; i < plane; ++i) {
            field[i] += base;
        }
        background[c] = std::move(field);
    }
    for (int c = 0; c < cfg.channels; ++c) {
        for (std::size_t i = 0; i < plane; ++i) {
            s.pixels[c * plane + i] = static_cast<float>(background[c][i]);
        }
    }

    std::vector<Box> taken;
    auto place = [&](Mask& out) {
        for (int attempt = 0; attempt < 50; ++attempt) {
            Mask m = rasterize(sample_ellipse(rng, cfg), cfg.height, cfg.width);
            const Box b = m.tight_box();
            if (b.degenerate() || overlaps(b, taken, 2.0)) {
                continue;
            }
            taken.push_back(b);
            out = std::move(m);
            return true;
        }
        return false;
    };

    if (rng.bernoulli(cfg.positive_fraction)) {
        const int n_lesions = 1 + static_cast<int>(rng.below(3));
        for (int k = 0; k < n_lesions; ++k) {
            Mask m;
            if (!place(m)) {
                break;
            }
            const double contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max);
            std::vector<double> delta(cfg.channels);
            for (int c = 0; c < cfg.channels; ++c) {
                delta[c] = contrast * lesion_sign(c);
            }
            paint(s, m, delta);
            Lesion lesion;
            lesion.bbox = m.tight_box();
            lesion.mask = std::move(m);
            s.lesions.push_back(std::move(lesion));
        }
    }

    // Distractors share the DWI brightening but have a variable signature on
    // the other channels, so some are indistinguishable from faint lesions.
    int n_mimics = 0;
    {
        double budget = cfg.mimic_rate;
        while (budget > 0.0 && n_mimics < 4) {
            if (rng.uniform() < std::min(budget, 1.0)) {
                ++n_mimics;
            }
            budget -= 1.0;
        }
    }
    for (int k = 0; k < n_mimics; ++k) {
        Mask m;
        if (!place(m)) {
            break;
        }
        const double contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max);
        const double adc_factor = rng.uniform(-0.2, 1.0);
        const double t2_factor = rng.uniform(-0.5, 0.5);
        std::vector<double> delta(cfg.channels);
        for (int c = 0; c < cfg.channels; ++c) {
            switch (c) {
            case 0:
                delta[c] = contrast * t2_factor;
                break;
            case 1:
                delta[c] = -contrast * adc_factor;
                break;
            default:
                delta[c] = contrast * lesion_sign(c);
            }
        }
        paint(s, m, delta);
    }

    for (auto& v : s.pixels) {
        const double noisy = v + rng.normal() * cfg.noise_sigma;
        v = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
    }
    return s;
}

} // namespace

std::vector<SyntheticSlice> generate(const GenConfig& cfg)
{
    cfg.validate();
    const auto n = static_cast<std::size_t>(cfg.n_slices);
    std::vector<SyntheticSlice> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(generate_one(cfg, i));
    }

    // Exact split sizes from the ratios, assigned over a seeded permutation.
    const auto n_train = static_cast<std::size_t>(std::llround(cfg.splits.train * static_cast<double>(n)));
    const auto n_val =
        std::min(n - std::min(n, n_train), static_cast<std::size_t>(std::llround(cfg.splits.val * static_cast<double>(n))));
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng split_rng(derive_seed(cfg.seed, {0x5b1175ULL}));
    split_rng.shuffle(perm.begin(), perm.end());
    for (std::size_t k = 0; k < n; ++k) {
        auto& s = out[perm[k]];
        s.split = k < n_train ? Split::Train : (k < n_train + n_val ? Split::Val : Split::Test);
    }
    return out;
}

std::vector<SyntheticSlice> filter_split(const std::vector<SyntheticSlice>& slices, Split split)
{
    std::vector<SyntheticSlice> out;
    std::copy_if(slices.begin(), slices.end(), std::back_inserter(out),
                 [split](const SyntheticSlice& s) { return s.split == split; });
    return out;
}

// -- serialization -------------------------------------------------------------

std::vector<std::int64_t> rle_encode(const Mask& mask)
{
    std::vector<std::int64_t> counts;
    std::uint8_t current = 0;
    std::int64_t run = 0;
    for (auto b : mask.bits) {
        const std::uint8_t v = b ? 1 : 0;
        if (v == current) {
            ++run;
        } else {
            counts.push_back(run);
            current = v;
            run = 1;
        }
    }
    // A trailing skip carries no information.
    if (current == 1) {
        counts.push_back(run);
    }
    return counts;
}

Mask rle_decode(const std::vector<std::int64_t>& counts, int height, int width)
{
    Mask m(height, width);
    std::size_t pos = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        if (counts[i] < 0 || pos + static_cast<std::size_t>(counts[i]) > m.bits.size()) {
            throw IoError("run-length counts exceed the mask size");
        }
        if (i % 2 == 1) {
            std::fill_n(m.bits.begin() + static_cast<std::ptrdiff_t>(pos), counts[i], std::uint8_t{1});
        }
        pos += static_cast<std::size_t>(counts[i]);
    }
    return m;
}

namespace {

std::vector<char> encode_pixels(const std::vector<float>& pixels)
{
    std::vector<char> buf(pixels.size() * 4);
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        auto bits = std::bit_cast<std::uint32_t>(pixels[i]);
        for (int b = 0; b < 4; ++b) {
            buf[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
        }
    }
    return buf;
}

std::vector<float> decode_pixels(const std::vector<char>& buf)
{
    std::vector<float> out(buf.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
            bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[i * 4 + b])) << (8 * b);
        }
        out[i] = std::bit_cast<float>(bits);
    }
    return out;
}

void write_text(const fs::path& p, const std::string& text)
{
    std::ofstream out(p, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + p.string());
    }
    out << text;
}

json read_json(const fs::path& p, const std::string& what)
{
    std::ifstream in(p);
    if (!in) {
        throw IoError("missing " + what + " at " + p.string());
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw IoError("malformed " + what + ": " + e.what());
    }
}

} // namespace

Manifest save_dataset(const std::vector<SyntheticSlice>& slices, const fs::path& dir)
{
    std::error_code ec;
    fs::create_directories(dir / "channels", ec);
    if (ec) {
        throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
    }
    Manifest manifest;
    json entries = json::array();
    json annotations = json::object();
    for (const auto& s : slices) {
        const auto buf = encode_pixels(s.pixels);
        const std::string rel = "channels/" + s.slice_id + ".f32";
        {
            std::ofstream out(dir / rel, std::ios::binary);
            if (!out) {
                throw IoError("cannot write channel buffer for slice " + s.slice_id);
            }
            out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        }
        ManifestEntry e{s.slice_id, s.split, rel, sha256_hex(std::as_bytes(std::span(buf)))};
        entries.push_back({{"slice_id", e.slice_id},
                           {"split", to_string(e.split)},
                           {"channels", s.channels},
                           {"height", s.height},
                           {"width", s.width},
                           {"file", e.file},
                           {"sha256", e.sha256}});
        switch (s.split) {
        case Split::Train:
            ++manifest.train_count;
            break;
        case Split::Val:
            ++manifest.val_count;
            break;
        case Split::Test:
            ++manifest.test_count;
            break;
        }
        manifest.entries.push_back(std::move(e));

        json lesions = json::array();
        for (const auto& l : s.lesions) {
            lesions.push_back({{"bbox",
                                {std::llround(l.bbox.x1), std::llround(l.bbox.y1), std::llround(l.bbox.x2),
                                 std::llround(l.bbox.y2)}},
                               {"significant", l.significant},
                               {"mask_rle", rle_encode(l.mask)}});
        }
        annotations[s.slice_id] = {{"lesions", std::move(lesions)}};
    }
    const json doc{{"format", "costdet-dataset"},
                   {"version", 1},
                   {"n_slices", slices.size()},
                   {"split_counts",
                    {{"train", manifest.train_count}, {"val", manifest.val_count}, {"test", manifest.test_count}}},
                   {"entries", std::move(entries)}};
    write_text(dir / "manifest.json", doc.dump(2) + "\n");
    write_text(dir / "annotations.json", json{{"slices", std::move(annotations)}}.dump(2) + "\n");
    return manifest;
}

std::string dataset_digest(const std::vector<SyntheticSlice>& slices)
{
    std::string acc;
    for (const auto& s : slices) {
        const auto buf = encode_pixels(s.pixels);
        json lesions = json::array();
        for (const auto& l : s.lesions) {
            lesions.push_back({{"bbox", {l.bbox.x1, l.bbox.y1, l.bbox.x2, l.bbox.y2}},
                               {"significant", l.significant},
                               {"mask_rle", rle_encode(l.mask)}});
        }
        const json head{{"slice_id", s.slice_id}, {"split", to_string(s.split)}, {"channels", s.channels},
                        {"height", s.height},     {"width", s.width},             {"lesions", std::move(lesions)}};
        acc += head.dump();
        acc += sha256_hex(std::as_bytes(std::span(buf)));
        acc += '\n';
    }
    return sha256_hex(std::string_view(acc));
}

std::vector<SyntheticSlice> load_dataset(const fs::path& dir)
{
    const json manifest = read_json(dir / "manifest.json", "manifest");
    const json annotations = read_json(dir / "annotations.json", "annotations");
    std::vector<SyntheticSlice> out;
    try {
        for (const auto& e : manifest.at("entries")) {
            SyntheticSlice s;
            s.slice_id = e.at("slice_id").get<std::string>();
            s.split = split_from_string(e.at("split").get<std::string>());
            s.channels = e.at("channels").get<int>();
            s.height = e.at("height").get<int>();
            s.width = e.at("width").get<int>();

            const fs::path file = dir / e.at("file").get<std::string>();
            std::ifstream in(file, std::ios::binary);
            if (!in) {
                throw IoError("missing channel buffer for slice " + s.slice_id);
            }
            std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
            const std::size_t expected = static_cast<std::size_t>(s.channels) * s.height * s.width * 4;
            if (buf.size() != expected) {
                throw IoError("truncated channel buffer for slice " + s.slice_id + " (" + std::to_string(buf.size()) +
                              " of " + std::to_string(expected) + " bytes)");
            }
            if (sha256_hex(std::as_bytes(std::span(buf))) != e.at("sha256").get<std::string>()) {
                throw IoError("checksum mismatch for slice " + s.slice_id);
            }
            s.pixels = decode_pixels(buf);

            if (!annotations.at("slices").contains(s.slice_id)) {
                throw IoError("no annotations for slice " + s.slice_id);
            }
            for (const auto& l : annotations.at("slices").at(s.slice_id).at("lesions")) {
                Lesion lesion;
                const auto b = l.at("bbox").get<std::vector<std::int64_t>>();
                if (b.size() != 4) {
                    throw IoError("bad bbox for slice " + s.slice_id);
                }
                lesion.bbox = {double(b[0]), double(b[1]), double(b[2]), double(b[3])};
                lesion.significant = l.at("significant").get<bool>();
                lesion.mask = rle_decode(l.at("mask_rle").get<std::vector<std::int64_t>>(), s.height, s.width);
                s.lesions.push_back(std::move(lesion));
            }
            out.push_back(std::move(s));
        }
    } catch (const json::exception& ex) {
        throw IoError(std::string("malformed dataset: ") + ex.what());
    }
    return out;
}

// -- augmentation ----------------------------------------------------------------

SyntheticSlice apply_affine(const SyntheticSlice& slice, const AffineParams& p)
{
    SyntheticSlice out = slice;
    const double theta = p.rotation_deg * std::numbers::pi / 180.0;
    const double ca = std::cos(theta), sa = std::sin(theta);
    const double cx = slice.width / 2.0, cy = slice.height / 2.0;
    const int h = slice.height, w = slice.width;

    // Inverse map from an output pixel center to source coordinates.
    auto source = [&](int row, int col) {
        const double qx = col + 0.5 - cx - p.tx;
        const double qy = row + 0.5 - cy - p.ty;
        const double sx = (ca * qx + sa * qy) / p.scale + cx;
        const double sy = (-sa * qx + ca * qy) / p.scale + cy;
        return std::pair{sx, sy};
    };

    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const auto [sx, sy] = source(r, c);
            const double fx = sx - 0.5, fy = sy - 0.5;
            const double x0f = std::floor(fx), y0f = std::floor(fy);
            const double ax = fx - x0f, ay = fy - y0f;
            const int x0 = static_cast<int>(x0f), y0 = static_cast<int>(y0f);
            const int xa = std::clamp(x0, 0, w - 1), xb = std::clamp(x0 + 1, 0, w - 1);
            const int ya = std::clamp(y0, 0, h - 1), yb = std::clamp(y0 + 1, 0, h - 1);
            for (int ch = 0; ch < slice.channels; ++ch) {
                if (ax == 0.0 && ay == 0.0) {
                    out.at(ch, r, c) = slice.at(ch, ya, xa);
                    continue;
                }
                const double v = (1 - ax) * (1 - ay) * slice.at(ch, ya, xa) + ax * (1 - ay) * slice.at(ch, ya, xb) +
                                 (1 - ax) * ay * slice.at(ch, yb, xa) + ax * ay * slice.at(ch, yb, xb);
                out.at(ch, r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }

    out.lesions.clear();
    for (const auto& lesion : slice.lesions) {
        Lesion moved;
        moved.significant = lesion.significant;
        moved.mask = Mask(h, w);
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                const auto [sx, sy] = source(r, c);
                const int px = static_cast<int>(std::floor(sx));
                const int py = static_cast<int>(std::floor(sy));
                if (px >= 0 && px < w && py >= 0 && py < h && lesion.mask.at(py, px)) {
                    moved.mask.set(r, c);
                }
            }
        }
        if (moved.mask.empty()) {
            continue;
        }
        moved.bbox = moved.mask.tight_box();
        out.lesions.push_back(std::move(moved));
    }
    return out;
}

AffineParams sample_affine(std::uint64_t seed)
{
    Rng rng(derive_seed(seed, {0xaff1eULL}));
    AffineParams p;
    p.rotation_deg = rng.uniform(-15.0, 15.0);
    p.tx = rng.uniform(-4.0, 4.0);
    p.ty = rng.uniform(-4.0, 4.0);
    p.scale = rng.uniform(0.9, 1.1);
    return p;
}

SyntheticSlice augment_affine(const SyntheticSlice& slice, std::uint64_t seed)
{
    return apply_affine(slice, sample_affine(seed));
}

} // namespace costdet::syndata
