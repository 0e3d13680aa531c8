#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "usis/datakit.hpp"
#include "usis/evalkit.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
    int status = -1;
    std::string output; // stdout and stderr
};

Run run(const std::string& args)
{
    const std::string cmd = std::string(USIS_CLI_PATH) + " " + args + " 2>&1";
    Run r;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::array<char, 4096> buf{};
    while (fgets(buf.data(), static_cast<int>(buf.size()), pipe)) {
        r.output += buf.data();
    }
    const int raw = pclose(pipe);
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    return r;
}

nlohmann::json read_json(const fs::path& p)
{
    std::ifstream in(p);
    return nlohmann::json::parse(in);
}

fs::path fresh_dir(const std::string& name)
{
    const auto d = fs::temp_directory_path() / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

} // namespace

TEST_SUITE("cli")
{
    TEST_CASE("synth, stats, split and eval from detections")
    {
        const auto dir = fresh_dir("usis_cli_data");
        const auto synth = run("synth --out " + dir.string() + " --count 12 --seed 1");
        REQUIRE(synth.status == 0);
        CHECK(fs::exists(dir / "annotations.json"));
        CHECK(fs::exists(dir / "images" / "scene_00000.png"));

        const auto stats = run("stats --annotations " + (dir / "annotations.json").string() + " --images " +
                               (dir / "images").string() + " --out " + (dir / "stats").string());
        REQUIRE(stats.status == 0);
        const auto report = read_json(dir / "stats" / "report.json");
        CHECK(report["images"] == 12);
        CHECK(report["skipped"].empty());

        const auto split = run("split --annotations " + (dir / "annotations.json").string() + " --out " +
                               (dir / "splits").string() + " --seed 2");
        REQUIRE(split.status == 0);
        CHECK(split.output.find("train 10, val 1, test 1") != std::string::npos);
        CHECK(read_json(dir / "splits" / "val.json")["split"] == "val");

        // Ground truth submitted as detections scores 1 everywhere.
        const auto d = usis::load_coco(dir / "annotations.json");
        auto images = usis::ground_truth_images(d);
        for (auto& img : images)
            for (const auto& g : img.ground_truth) img.detections.push_back({g.mask, 1.0, g.category_id});
        std::ofstream(dir / "dets.json") << usis::detections_to_coco(d, images).dump();
        for (const char* mode : {"multi-class", "class-agnostic"}) {
            const auto ev = run("eval --annotations " + (dir / "annotations.json").string() + " --detections " +
                                (dir / "dets.json").string() + " --mode " + mode + " --out " +
                                (dir / "metrics.json").string());
            REQUIRE(ev.status == 0);
            const auto m = read_json(dir / "metrics.json");
            CHECK(m["mAP"] == 1.0);
            CHECK(m["mode"] == mode);
        }
        fs::remove_all(dir);
    }

    TEST_CASE("train then evaluate the checkpoint")
    {
        const auto dir = fresh_dir("usis_cli_run");
        const auto cfg = (fs::path(USIS_SOURCE_DIR) / "configs" / "tiny.yaml").string();
        const auto tr = run("train --config " + cfg + " --out " + dir.string());
        REQUIRE_MESSAGE(tr.status == 0, tr.output);
        for (const char* f : {"run_config.json", "initial.ckpt", "checkpoint.ckpt", "train_log.jsonl",
                              "data/train.json", "data/val.json", "data/test.json"}) {
            CHECK_MESSAGE(fs::exists(dir / f), f);
        }
        std::ifstream log(dir / "train_log.jsonl");
        int lines = 0;
        for (std::string line; std::getline(log, line); ++lines) {
            CHECK(nlohmann::json::parse(line).contains("total"));
        }
        CHECK(lines == 6);

        const auto ev = run("eval --annotations " + (dir / "data" / "test.json").string() + " --checkpoint " +
                            (dir / "checkpoint.ckpt").string() + " --images " + (dir / "data" / "images").string());
        REQUIRE_MESSAGE(ev.status == 0, ev.output);
        const auto j = nlohmann::json::parse(ev.output);
        CHECK(j["ap_per_threshold"].size() == 10);
        fs::remove_all(dir);
    }

    TEST_CASE("usage and input errors")
    {
        CHECK(run("").status != 0);
        CHECK(run("frobnicate").status != 0);
        const auto dir = fresh_dir("usis_cli_errors");
        std::ofstream(dir / "empty.json").close();
        const auto empty = run("stats --annotations " + (dir / "empty.json").string() + " --images " +
                               dir.string() + " --out " + (dir / "r").string());
        CHECK(empty.status == 0);
        CHECK(empty.output.find("warning") != std::string::npos);

        std::ofstream(dir / "broken.json") << "{\"images\": [";
        const auto broken = run("split --annotations " + (dir / "broken.json").string() + " --out " + dir.string());
        CHECK(broken.status == 1);
        CHECK(broken.output.find("error:") != std::string::npos);

        std::ofstream(dir / "gt.json") << R"({"images": [{"id": 1, "height": 4, "width": 4}], "annotations": []})";
        // A model and a detections file cannot both be given.
        CHECK(run("eval --annotations " + (dir / "gt.json").string() + " --detections " +
                  (dir / "gt.json").string() + " --checkpoint " + (dir / "gt.json").string())
                  .status != 0);
        std::ofstream(dir / "none.json") << "[]";
        const auto no_gt = run("eval --annotations " + (dir / "gt.json").string() + " --detections " +
                               (dir / "none.json").string());
        CHECK(no_gt.status == 1);
        fs::remove_all(dir);
    }
}
