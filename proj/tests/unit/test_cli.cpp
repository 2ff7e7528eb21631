#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <unistd.h>

#include "cli.hpp"
#include "doctest.h"

using namespace vxda;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run vx(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path work() {
    static const fs::path root = [] {
        auto p = fs::temp_directory_path() / ("vxda_test_cli_" + std::to_string(::getpid()));
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return root;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f);
    return {std::istreambuf_iterator<char>(f), {}};
}

void write(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    f << text;
}

// 2 classes x 4 instances x 4 views, 16 px, 8^3: small enough for the train path.
const fs::path& toy_data() {
    static const fs::path p = [] {
        auto dir = work() / "toy";
        auto r = vx({"gen-data", "--out", dir.string(), "--seed", "2", "--classes", "2", "--instances", "4", "--views", "4",
                     "--voxel-size", "8", "--image-size", "16", "--threads", "1"});
        REQUIRE(r.code == 0);
        return dir;
    }();
    return p;
}

const fs::path& toy_run() {
    static const fs::path p = [] {
        auto cfg = work() / "toy_run.json";
        write(cfg, R"({"command": "train", "data": "toy", "out": "toy_run",
                      "train": {"epochs": 1, "batch_size": 8, "method": "dann+class",
                                "network": {"latent_dim": 16, "encoder_widths": [4, 8], "decoder_widths": [8, 4],
                                            "refiner_width": 4, "domain_hidden": 8}}})");
        toy_data();
        auto r = vx({"train", "--config", cfg.string()});
        INFO(r.err);
        REQUIRE(r.code == 0);
        return work() / "toy_run";
    }();
    return p;
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("help exits 0 and documents the flags") {
    auto top = vx({"--help"});
    CHECK(top.code == 0);
    for (const char* cmd : {"gen-data", "train", "eval", "embed"}) CHECK(top.out.find(cmd) != std::string::npos);

    struct Expect {
        std::string cmd;
        std::vector<std::string> flags;
    };
    const std::vector<Expect> expect{
        {"gen-data", {"--out", "--seed", "--classes", "--instances", "--views", "--target-profile", "--voxel-size",
                      "--image-size", "--force", "--config"}},
        {"train", {"--data", "--method", "--epochs", "--seed", "--out", "--config"}},
        {"eval", {"--checkpoint", "--data", "--threshold", "--split", "--domain", "--config"}},
        {"embed", {"--checkpoint", "--data", "--out", "--svg", "--config"}},
    };
    for (const auto& e : expect) {
        CAPTURE(e.cmd);
        auto r = vx({e.cmd, "--help"});
        CHECK(r.code == 0);
        for (const auto& f : e.flags) {
            CAPTURE(f);
            CHECK(r.out.find(f) != std::string::npos);
        }
    }
}

TEST_CASE("usage errors exit 2") {
    CHECK(vx({}).code == 2);
    CHECK(vx({"frobnicate"}).code == 2);
    CHECK(vx({"gen-data", "--bogus"}).code == 2);
    CHECK(vx({"gen-data", "--out", (work() / "x").string(), "--target-profile", "moon"}).code == 2);
    CHECK(vx({"gen-data"}).code == 2);

    auto bad_method = vx({"train", "--data", toy_data().string(), "--out", (work() / "bad").string(), "--method", "dann++"});
    CHECK(bad_method.code == 2);
    CHECK(bad_method.err.find("dann++") != std::string::npos);

    auto missing = vx({"train", "--data", (work() / "no_such_dir").string(), "--out", (work() / "r").string()});
    CHECK(missing.code == 2);
    CHECK(missing.err.find("no_such_dir") != std::string::npos);
}

TEST_CASE("gen-data") {
    const auto dir = toy_data();
    CHECK(fs::exists(dir / "manifest.json"));
    auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
    CHECK(manifest.at("records").size() == 64);
    std::set<int> az;
    for (const auto& r : manifest.at("records")) az.insert(r.at("azimuth").get<int>());
    CHECK(az == std::set<int>{0, 90, 180, 270});

    SUBCASE("refuses a non-empty directory without --force") {
        auto r = vx({"gen-data", "--out", dir.string(), "--seed", "2", "--classes", "2", "--instances", "4", "--views", "4",
                     "--voxel-size", "8", "--image-size", "16"});
        CHECK(r.code == 2);
        CHECK(r.err.find("--force") != std::string::npos);
    }
    SUBCASE("same flags and seed give an identical manifest") {
        auto again = work() / "toy_again";
        fs::remove_all(again);
        auto r = vx({"gen-data", "--out", again.string(), "--seed", "2", "--classes", "2", "--instances", "4", "--views",
                     "4", "--voxel-size", "8", "--image-size", "16", "--threads", "2"});
        CHECK(r.code == 0);
        CHECK(r.out.find("64 records") != std::string::npos);
        CHECK(slurp(again / "manifest.json") == slurp(dir / "manifest.json"));
        auto forced = vx({"gen-data", "--out", again.string(), "--seed", "3", "--classes", "2", "--instances", "4",
                          "--views", "4", "--voxel-size", "8", "--image-size", "16", "--force"});
        CHECK(forced.code == 0);
        CHECK(slurp(again / "manifest.json") != slurp(dir / "manifest.json"));
    }
}

TEST_CASE("gen-data defaults write 960 records on the 45 degree grid") {
    const auto dir = work() / "defaults";
    auto r = vx({"gen-data", "--out", dir.string(), "--seed", "5"});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("wrote 960 records") != std::string::npos);
    auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
    std::set<int> az;
    for (const auto& rec : manifest.at("records")) az.insert(rec.at("azimuth").get<int>());
    CHECK(az == std::set<int>{0, 45, 90, 135, 180, 225, 270, 315});
}

TEST_CASE("config files") {
    SUBCASE("unknown keys are rejected") {
        auto cfg = work() / "bad_key.json";
        write(cfg, R"({"command": "gen-data", "out": "z", "gen": {"clases": 2}})");
        auto r = vx({"gen-data", "--config", cfg.string()});
        CHECK(r.code == 2);
        CHECK(r.err.find("clases") != std::string::npos);
        write(cfg, R"({"outdir": "z"})");
        CHECK(vx({"gen-data", "--config", cfg.string()}).code == 2);
        write(cfg, R"({"train": {"epochz": 1}})");
        CHECK(vx({"train", "--config", cfg.string()}).code == 2);
    }
    SUBCASE("command must match") {
        auto cfg = work() / "wrong_cmd.json";
        write(cfg, R"({"command": "train"})");
        CHECK(vx({"gen-data", "--config", cfg.string()}).code == 2);
    }
    SUBCASE("paths resolve against the config file and flags override") {
        fs::create_directories(work() / "nested");
        auto cfg = work() / "nested" / "gen.json";
        write(cfg, R"({"command": "gen-data", "out": "ds", "threads": 1,
                      "gen": {"classes": 1, "instances": 2, "views": 2, "voxel_size": 8, "image_size": 16,
                              "target_profile": "lab"}})");
        auto r = vx({"gen-data", "--config", cfg.string(), "--views", "4"});
        INFO(r.err);
        CHECK(r.code == 0);
        auto m = nlohmann::json::parse(slurp(work() / "nested" / "ds" / "manifest.json"));
        CHECK(m.at("records").size() == 16);
        CHECK(m.at("config").at("target_profile").at("name") == "lab");
    }
    SUBCASE("malformed json") {
        auto cfg = work() / "broken.json";
        write(cfg, "{\"out\": ");
        CHECK(vx({"gen-data", "--config", cfg.string()}).code == 2);
    }
}

TEST_CASE("train writes checkpoint and log") {
    const auto run = toy_run();
    CHECK(fs::exists(run / "checkpoint.bin"));
    CHECK(fs::exists(run / "train_config.json"));
    const auto log = slurp(run / "train_log.csv");
    CHECK(log.rfind("epoch,loss_recon,loss_domain,loss_class,loss_coral,loss_mmd,iou_source,iou_target,domain_acc\n", 0) ==
          0);
    CHECK(lines(log) == 2);
    auto cfg = nlohmann::json::parse(slurp(run / "train_config.json"));
    CHECK(cfg.at("weights").at("domain") == 0.1);
    CHECK(cfg.at("weights").at("cls") == 0.1);

    auto none_cfg = work() / "none.json";
    write(none_cfg, R"({"train": {"network": {"latent_dim": 16, "encoder_widths": [4, 8], "decoder_widths": [8, 4],
                                               "refiner_width": 4, "domain_hidden": 8}, "batch_size": 8}})");
    auto r = vx({"train", "--config", none_cfg.string(), "--data", toy_data().string(), "--out", (work() / "none_run").string(),
                 "--method", "none", "--epochs", "1", "--seed", "4"});
    CHECK(r.code == 0);
    auto none = nlohmann::json::parse(slurp(work() / "none_run" / "train_config.json"));
    for (const char* k : {"domain", "cls", "coral", "mmd"}) CHECK(none.at("weights").at(k) == 0.0);
    CHECK(none.at("seed") == 4);
}

TEST_CASE("numerical failure exits 3") {
    auto cfg = work() / "nan.json";
    write(cfg, R"({"train": {"epochs": 1, "batch_size": 8, "lr": 1e308, "method": "none",
                             "network": {"latent_dim": 16, "encoder_widths": [4, 8], "decoder_widths": [8, 4],
                                         "refiner_width": 4, "domain_hidden": 8}}})");
    auto r = vx({"train", "--config", cfg.string(), "--data", toy_data().string(), "--out", (work() / "nan_run").string()});
    CHECK(r.code == 3);
    CHECK(r.err.find("numerical failure") != std::string::npos);
}

TEST_CASE("eval") {
    const auto run = toy_run();
    const auto ck = (run / "checkpoint.bin").string();
    const auto out = work() / "eval_both";
    auto r = vx({"eval", "--checkpoint", ck, "--data", toy_data().string(), "--out", out.string()});
    REQUIRE(r.code == 0);
    const auto report = slurp(out / "iou_report.csv");
    CHECK(report.rfind("# domain=source\nclass,method,iou,count,threshold\n", 0) == 0);
    CHECK(report.find("# domain=target\nclass,method,iou,count,threshold\n") != std::string::npos);
    CHECK(report.find(",dann+class,") != std::string::npos);
    CHECK(report.find(",0.40\n") != std::string::npos);
    CHECK(r.out.find("source: overall,") != std::string::npos);
    CHECK(r.out.find("domain_acc:") != std::string::npos);

    // repeated invocation gives identical bytes
    auto again = vx({"eval", "--checkpoint", ck, "--data", toy_data().string(), "--out", out.string()});
    CHECK(again.code == 0);
    CHECK(slurp(out / "iou_report.csv") == report);

    auto single = vx({"eval", "--checkpoint", ck, "--data", toy_data().string(), "--out", (work() / "eval_src").string(),
                      "--domain", "source", "--threshold", "0.5", "--split", "all"});
    CHECK(single.code == 0);
    const auto src = slurp(work() / "eval_src" / "iou_report.csv");
    CHECK(src.rfind("class,method,iou,count,threshold\n", 0) == 0);
    CHECK(src.find(",0.50\n") != std::string::npos);
    CHECK(lines(src) == 4);

    CHECK(vx({"eval", "--checkpoint", ck, "--data", toy_data().string(), "--threshold", "1.5"}).code == 2);
    CHECK(vx({"eval", "--checkpoint", ck, "--data", toy_data().string(), "--domain", "all"}).code == 2);

    SUBCASE("incompatible checkpoint") {
        auto other = work() / "other16";
        fs::remove_all(other);
        REQUIRE(vx({"gen-data", "--out", other.string(), "--classes", "2", "--instances", "2", "--views", "2",
                    "--image-size", "16", "--voxel-size", "16"})
                    .code == 0);
        auto bad = vx({"eval", "--checkpoint", ck, "--data", other.string(), "--out", (work() / "eval_bad").string()});
        CHECK(bad.code == 2);
        CHECK(bad.err.find("incompatible") != std::string::npos);
    }
    SUBCASE("corrupt checkpoint is an I/O failure") {
        auto corrupt = work() / "corrupt.bin";
        auto bytes = slurp(ck);
        write(corrupt, bytes.substr(0, bytes.size() / 2));
        CHECK(vx({"eval", "--checkpoint", corrupt.string(), "--data", toy_data().string()}).code == 4);
    }
}

TEST_CASE("embed") {
    const auto ck = (toy_run() / "checkpoint.bin").string();
    const auto out = work() / "emb" / "embedding.csv";
    auto r = vx({"embed", "--checkpoint", ck, "--data", toy_data().string(), "--out", out.string(), "--svg", "--count", "5"});
    REQUIRE(r.code == 0);
    const auto csv = slurp(out);
    CHECK(csv.rfind("x,y,domain,class\n", 0) == 0);
    CHECK(lines(csv) == 11);
    std::set<std::string> domains;
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        std::vector<std::string> cols;
        std::stringstream ls(line);
        for (std::string c; std::getline(ls, c, ',');) cols.push_back(c);
        REQUIRE(cols.size() == 4);
        domains.insert(cols[2]);
    }
    CHECK(domains == std::set<std::string>{"source", "target"});

    const auto svg = slurp(work() / "emb" / "embedding.svg");
    CHECK(svg.rfind("<?xml", 0) == 0);
    CHECK(svg.find("</svg>") != std::string::npos);
    std::set<std::string> fills;
    for (auto p = svg.find("<circle"); p != std::string::npos; p = svg.find("<circle", p + 1)) {
        const auto f = svg.find("fill=\"", p) + 6;
        fills.insert(svg.substr(f, svg.find('"', f) - f));
    }
    CHECK(fills.size() == 2);

    auto again = vx({"embed", "--checkpoint", ck, "--data", toy_data().string(), "--out", out.string(), "--count", "5"});
    CHECK(again.code == 0);
    CHECK(slurp(out) == csv);

    auto tiny = vx({"embed", "--checkpoint", ck, "--data", toy_data().string(), "--out", (work() / "t.csv").string(),
                    "--count", "1"});
    CHECK(tiny.code == 2);
}

TEST_CASE("VXDA_THREADS caps generation threads") {
    ::setenv("VXDA_THREADS", "1", 1);
    CHECK(cli::generation_threads(8) == 1);
    CHECK(cli::generation_threads(0) == 1);
    ::setenv("VXDA_THREADS", "3", 1);
    CHECK(cli::generation_threads(2) == 2);
    ::setenv("VXDA_THREADS", "zero", 1);
    CHECK_THROWS_AS(cli::generation_threads(2), cli::UsageError);
    ::unsetenv("VXDA_THREADS");
    CHECK(cli::generation_threads(5) == 5);
}
