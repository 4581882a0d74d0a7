#include "costdet/errors.hpp"
#include "costdet/hashing.hpp"
#include "costdet/rng.hpp"
#include "costdet/syndata.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace costdet;
using namespace costdet::syndata;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name)
{
    auto p = fs::temp_directory_path() / ("costdet_unit_" + name);
    fs::remove_all(p);
    return p;
}

GenConfig small(int n, double pf, std::uint64_t seed = 3)
{
    GenConfig g;
    g.n_slices = n;
    g.positive_fraction = pf;
    g.seed = seed;
    return g;
}

SyntheticSlice square_lesion_slice()
{
    SyntheticSlice s;
    s.slice_id = "s00000";
    s.channels = 1;
    s.height = 32;
    s.width = 32;
    s.pixels.assign(32 * 32, 0.25f);
    Lesion l;
    l.mask = Mask(32, 32);
    for (int r = 10; r < 20; ++r) {
        for (int c = 10; c < 20; ++c) {
            l.mask.set(r, c);
            s.at(0, r, c) = 0.75f;
        }
    }
    l.bbox = l.mask.tight_box();
    s.lesions.push_back(l);
    return s;
}

} // namespace

TEST_CASE("degenerate positive fractions")
{
    for (const auto& s : generate(small(20, 0.0))) {
        CHECK(s.lesions.empty());
    }
    for (const auto& s : generate(small(10, 1.0))) {
        CHECK(s.lesions.size() >= 1);
        CHECK(s.lesions.size() <= 3);
    }
}

TEST_CASE("generation is deterministic")
{
    const auto a = generate(small(30, 0.4, 9));
    const auto b = generate(small(30, 0.4, 9));
    CHECK(a == b);
    CHECK(dataset_digest(a) == dataset_digest(b));
    CHECK(dataset_digest(a) != dataset_digest(generate(small(30, 0.4, 10))));
}

TEST_CASE("generated slices satisfy the data invariants")
{
    const auto data = generate(small(60, 0.5, 4));
    for (const auto& s : data) {
        for (float v : s.pixels) {
            REQUIRE(v >= 0.0f);
            REQUIRE(v <= 1.0f);
        }
        for (const auto& l : s.lesions) {
            CHECK(l.mask.tight_box() == l.bbox);
            CHECK(l.bbox.x1 >= 0);
            CHECK(l.bbox.y1 >= 0);
            CHECK(l.bbox.x2 <= s.width);
            CHECK(l.bbox.y2 <= s.height);
        }
    }
}

TEST_CASE("default split counts are 8:1:1")
{
    const auto data = generate(GenConfig{});
    CHECK(data.size() == 200);
    CHECK(filter_split(data, Split::Train).size() == 160);
    CHECK(filter_split(data, Split::Val).size() == 20);
    CHECK(filter_split(data, Split::Test).size() == 20);
}

TEST_CASE("positive fraction within two binomial standard deviations")
{
    int inside = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto data = generate(small(400, 0.4, seed));
        double pos = 0;
        for (const auto& s : data) {
            pos += s.positive() ? 1 : 0;
        }
        const double sd = std::sqrt(400 * 0.4 * 0.6);
        inside += std::abs(pos - 160.0) <= 2 * sd ? 1 : 0;
    }
    // ~95% coverage per draw; 20 seeds should almost never see more than 3 misses.
    CHECK(inside >= 17);
}

TEST_CASE("invalid configs are rejected")
{
    auto g = small(10, 1.5);
    CHECK_THROWS_AS(g.validate(), ConfigError);
    g = small(10, 0.4);
    g.radius_min = 8;
    g.radius_max = 4;
    CHECK_THROWS_AS(g.validate(), ConfigError);
    g = small(10, 0.4);
    g.height = 0;
    CHECK_THROWS_AS(g.validate(), ConfigError);
}

TEST_CASE("rle round trip")
{
    Rng rng(8);
    for (int t = 0; t < 100; ++t) {
        const int h = 1 + static_cast<int>(rng.below(20)), w = 1 + static_cast<int>(rng.below(20));
        Mask m(h, w);
        for (auto& b : m.bits) {
            b = rng.bernoulli(0.3) ? 1 : 0;
        }
        CHECK(rle_decode(rle_encode(m), h, w) == m);
    }
    Mask m(2, 3);
    m.set(0, 1);
    m.set(0, 2);
    CHECK(rle_encode(m) == std::vector<std::int64_t>{1, 2});
}

TEST_CASE("save/load round trip")
{
    const auto dir = scratch_dir("roundtrip");
    const auto data = generate(small(12, 0.5, 2));
    const auto manifest = save_dataset(data, dir);
    CHECK(manifest.entries.size() == 12);
    CHECK(load_dataset(dir) == data);

    const std::vector<SyntheticSlice> one{data.front()};
    const auto dir1 = scratch_dir("one");
    save_dataset(one, dir1);
    CHECK(load_dataset(dir1) == one);

    const auto empty_dir = scratch_dir("empty");
    CHECK(save_dataset({}, empty_dir).entries.empty());
    CHECK(load_dataset(empty_dir).empty());
}

TEST_CASE("save is byte-stable")
{
    const auto data = generate(small(8, 0.5, 6));
    const auto a = scratch_dir("stable_a"), b = scratch_dir("stable_b");
    save_dataset(data, a);
    save_dataset(data, b);
    CHECK(sha256_file((a / "manifest.json").string()) == sha256_file((b / "manifest.json").string()));
    CHECK(sha256_file((a / "annotations.json").string()) == sha256_file((b / "annotations.json").string()));
}

TEST_CASE("corrupted or missing data fails naming the slice")
{
    const auto data = generate(small(4, 0.5, 1));
    const auto dir = scratch_dir("corrupt");
    save_dataset(data, dir);
    const auto file = dir / "channels" / (data[2].slice_id + ".f32");
    {
        std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(17);
        char c = 0;
        f.read(&c, 1);
        f.seekp(17);
        c = static_cast<char>(c ^ 0x5a);
        f.write(&c, 1);
    }
    try {
        load_dataset(dir);
        FAIL("expected checksum failure");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find(data[2].slice_id) != std::string::npos);
        CHECK(std::string(e.what()).find("checksum") != std::string::npos);
    }

    fs::resize_file(file, 100);
    CHECK_THROWS_AS(load_dataset(dir), IoError);
    fs::remove(file);
    CHECK_THROWS_WITH_AS(load_dataset(dir), doctest::Contains(data[2].slice_id.c_str()), IoError);
    CHECK_THROWS_AS(load_dataset(scratch_dir("nothing_here")), IoError);
}

TEST_CASE("affine identity and translation")
{
    const auto s = square_lesion_slice();
    CHECK(apply_affine(s, AffineParams{}) == s);

    AffineParams shift;
    shift.tx = 2;
    const auto moved = apply_affine(s, shift);
    REQUIRE(moved.lesions.size() == 1);
    CHECK(moved.lesions[0].bbox == Box{12, 10, 22, 20});
    CHECK(moved.at(0, 10, 12) == 0.75f);
}

TEST_CASE("affine drops lesions pushed out of the frame")
{
    const auto s = square_lesion_slice();
    AffineParams far;
    far.tx = 40;
    const auto out = apply_affine(s, far);
    CHECK(out.lesions.empty());
    CHECK_FALSE(out.positive());
}

TEST_CASE("random augmentation preserves invariants")
{
    const auto data = generate(small(20, 0.8, 12));
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto a = augment_affine(data[i], 100 + i);
        for (float v : a.pixels) {
            REQUIRE(v >= 0.0f);
            REQUIRE(v <= 1.0f);
        }
        for (const auto& l : a.lesions) {
            CHECK(l.mask.tight_box() == l.bbox);
        }
        const auto p = sample_affine(100 + i);
        CHECK(std::abs(p.rotation_deg) <= 15.0);
        CHECK(std::abs(p.tx) <= 4.0);
        CHECK(std::abs(p.ty) <= 4.0);
        CHECK(p.scale >= 0.9);
        CHECK(p.scale <= 1.1);
    }
}
