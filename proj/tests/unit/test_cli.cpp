#include "costdet/cli.hpp"
#include "costdet/hashing.hpp"
#include "costdet/trainer.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace costdet;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = 0;
    std::string out;
    std::string err;
};

Run costdet_cli(std::vector<std::string> args)
{
    args.insert(args.begin(), "costdet");
    std::vector<const char*> argv;
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path tmp(const std::string& name)
{
    auto p = fs::temp_directory_path() / ("costdet_cli_" + name);
    fs::remove_all(p);
    return p;
}

std::string read(const fs::path& p)
{
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Small dataset shared by the train/evaluate cases.
const fs::path& small_data()
{
    static const fs::path dir = [] {
        auto d = tmp("small_data");
        REQUIRE(costdet_cli({"generate", "--n", "40", "--seed", "3", "--out", d.string()}).code == 0);
        return d;
    }();
    return dir;
}

} // namespace

TEST_CASE("generate default benchmark")
{
    const auto a = tmp("gen_a"), b = tmp("gen_b");
    const auto r = costdet_cli({"generate", "--n", "200", "--positive-fraction", "0.4", "--seed", "7", "--out", a.string()});
    CHECK(r.code == 0);
    CHECK(r.out.find("wrote 200 slices") != std::string::npos);
    CHECK(r.out.find("train 160, val 20, test 20") != std::string::npos);
    CHECK(costdet_cli({"generate", "--n", "200", "--positive-fraction", "0.4", "--seed", "7", "--out", b.string()}).code == 0);
    CHECK(sha256_file((a / "manifest.json").string()) == sha256_file((b / "manifest.json").string()));
    CHECK(sha256_file((a / "annotations.json").string()) == sha256_file((b / "annotations.json").string()));
}

TEST_CASE("config errors exit with 2")
{
    CHECK(costdet_cli({"generate", "--positive-fraction", "1.5", "--out", tmp("bad").string()}).code == 2);
    const auto missing = costdet_cli({"train", "--data", tmp("no_such_dataset").string()});
    CHECK(missing.code == 2);
    CHECK(missing.err.find("dataset not found") != std::string::npos);
    CHECK(costdet_cli({"frobnicate"}).code == 2);
    CHECK(costdet_cli({"evaluate", "--data", small_data().string(), "--checkpoint", "x.ckpt", "--threshold", "1.5"}).code ==
          2);
}

TEST_CASE("runtime errors exit with 3")
{
    const auto r = costdet_cli({"evaluate", "--data", small_data().string(), "--checkpoint", tmp("none.ckpt").string()});
    CHECK(r.code == 3);
}

TEST_CASE("train names checkpoints by cost tag")
{
    const auto out = tmp("train_out");
    const auto r = costdet_cli({"train", "--data", small_data().string(), "--out", out.string(), "--epochs", "1",
                                "--alpha-lesion", "3", "--beta-lesion", "1", "--seed", "4", "--seed", "5"});
    CHECK(r.code == 0);
    CHECK(fs::exists(out / "a3b1" / "seed4" / "model.ckpt"));
    CHECK(fs::exists(out / "a3b1" / "seed5" / "model.ckpt"));
    CHECK(fs::exists(out / "a3b1" / "seed4" / "trainlog.csv"));
    CHECK(trainer::load_checkpoint(out / "a3b1" / "seed4" / "model.ckpt").meta.cost.alpha_lesion == 3.0);
}

TEST_CASE("train with the slice loss logs a nonzero slice term")
{
    const auto out = tmp("train_slice");
    REQUIRE(costdet_cli({"train", "--data", small_data().string(), "--out", out.string(), "--epochs", "1",
                         "--use-slice-loss", "--alpha-slice", "3"})
                .code == 0);
    std::istringstream log(read(out / "a1b1_sa3sb1" / "seed0" / "trainlog.csv"));
    std::string header, row;
    std::getline(log, header);
    std::getline(log, row);
    // epoch,rpn_reg,rpn_cls,box,mask,cost_cls,slice_cls,...
    std::vector<std::string> cells;
    std::stringstream ss(row);
    for (std::string c; std::getline(ss, c, ',');) {
        cells.push_back(c);
    }
    REQUIRE(cells.size() > 6);
    CHECK(std::stod(cells[6]) > 0.0);
}

TEST_CASE("evaluate an oracle checkpoint")
{
    const auto ck = tmp("oracle.ckpt");
    REQUIRE(costdet_cli({"oracle", "--out", ck.string()}).code == 0);
    const auto out = tmp("eval_out");
    const auto r = costdet_cli({"evaluate", "--data", small_data().string(), "--checkpoint", ck.string(), "--split",
                                "train", "--out", out.string()});
    CHECK(r.code == 0);
    CHECK(r.out.find("Lesion-level FNR") != std::string::npos);
    CHECK(r.out.find("0.0000") != std::string::npos);
    const auto j = nlohmann::json::parse(read(out / "metrics.json"));
    CHECK(j[0]["metrics"]["lesion"]["fnr"] == 0.0);
    CHECK(j[0]["metrics"]["lesion"]["fp_per_slice"] == 0.0);
    CHECK(fs::exists(out / "metrics.csv"));
}

TEST_CASE("sweep emits one row per threshold")
{
    const auto ck = tmp("sweep_oracle.ckpt");
    REQUIRE(costdet_cli({"oracle", "--out", ck.string()}).code == 0);
    const auto csv = tmp("sweep.csv");
    REQUIRE(costdet_cli({"sweep", "--data", small_data().string(), "--checkpoint", ck.string(), "--lo", "0.1", "--hi",
                         "0.9", "--step", "0.1", "--out", csv.string()})
                .code == 0);
    std::istringstream in(read(csv));
    std::string line;
    std::getline(in, line);
    double prev = 0.0;
    int rows = 0;
    while (std::getline(in, line)) {
        const double t = std::stod(line.substr(0, line.find(',')));
        CHECK(t > prev);
        prev = t;
        ++rows;
    }
    CHECK(rows == 9);
}

TEST_CASE("compare identical checkpoints")
{
    const auto out = tmp("cmp_train");
    REQUIRE(costdet_cli({"train", "--data", small_data().string(), "--out", out.string(), "--epochs", "1"}).code == 0);
    const auto ck = (out / "a1b1" / "seed0" / "model.ckpt").string();
    const auto dir = tmp("cmp_out");
    const auto r = costdet_cli({"compare", "--data", small_data().string(), "--baseline", ck, "--cost", ck, "--out",
                                dir.string(), "--split", "train"});
    CHECK(r.code == 0);
    const auto j = nlohmann::json::parse(read(dir / "comparison.json"));
    CHECK(j["delta"]["fp_per_slice"] == 0.0);
    CHECK(j["delta"]["lesion_fnr"] == 0.0);
    CHECK(j["delta"]["slice_fpr"] == 0.0);
    CHECK(fs::exists(dir / "comparison.svg"));
}
