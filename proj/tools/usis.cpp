// usis: dataset statistics, splitting, synthetic data, training and
// evaluation from the command line.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "usis/checkpoint.hpp"
#include "usis/config.hpp"
#include "usis/datakit.hpp"
#include "usis/error.hpp"
#include "usis/evalkit.hpp"
#include "usis/kernels.hpp"
#include "usis/model.hpp"
#include "usis/stats.hpp"
#include "usis/train.hpp"

namespace fs = std::filesystem;

namespace {

struct Options {
    std::string annotations;
    std::string images;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string config;
    std::string mode = "multi-class";
    std::string checkpoint;
    std::string detections;
    int count = 20;
};

void write_json(const fs::path& path, const nlohmann::json& j)
{
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path);
    if (!out) {
        throw usis::IoError("cannot write " + path.string());
    }
    out << j.dump(2) << '\n';
}

std::vector<usis::RgbImage> load_images(const usis::Dataset& d, const std::string& dir)
{
    std::vector<usis::RgbImage> out;
    out.reserve(d.images.size());
    for (const auto& rec : d.images) {
        out.push_back(usis::read_image(fs::path(dir) / rec.file_name));
    }
    return out;
}

void write_corpus(const usis::Dataset& d, const std::vector<usis::RgbImage>& images, const fs::path& dir,
                  const std::string& json_name)
{
    fs::create_directories(dir / "images");
    for (std::size_t i = 0; i < images.size(); ++i) {
        usis::write_png(dir / "images" / d.images[i].file_name, images[i]);
    }
    usis::save_coco(d, dir / json_name);
}

int cmd_stats(const Options& o)
{
    const bool empty_file = fs::exists(o.annotations) && fs::file_size(o.annotations) == 0;
    usis::Dataset d;
    if (!empty_file) {
        d = usis::load_coco(o.annotations);
    }
    for (const auto& w : d.warnings) {
        std::cerr << "warning: " << w << '\n';
    }
    if (d.images.empty()) {
        std::cerr << "warning: annotation file has no images; writing an empty report\n";
    }
    const auto stats = usis::corpus_statistics(d, usis::directory_loader(o.images));
    for (const auto& s : stats.skipped) {
        std::cerr << "warning: skipped image " << s.image_id << ": " << s.reason << '\n';
    }
    usis::write_stats_report(stats, o.out);
    std::cout << usis::stats_report_json(stats).dump(2) << '\n';
    return 0;
}

int cmd_split(const Options& o)
{
    const auto d = usis::load_coco(o.annotations);
    const auto s = usis::split_dataset(d, usis::SplitRatios{}, o.seed);
    fs::create_directories(o.out);
    usis::save_coco(s.train, fs::path(o.out) / "train.json");
    usis::save_coco(s.val, fs::path(o.out) / "val.json");
    usis::save_coco(s.test, fs::path(o.out) / "test.json");
    std::cout << "train " << s.train.images.size() << ", val " << s.val.images.size() << ", test "
              << s.test.images.size() << '\n';
    return 0;
}

usis::RunConfig run_config(const Options& o)
{
    usis::RunConfig cfg = o.config.empty() ? usis::RunConfig{} : usis::load_run_config(o.config);
    if (o.seed_given || o.config.empty()) {
        cfg.apply_seed(o.seed);
    }
    return cfg;
}

int cmd_synth(const Options& o)
{
    const auto cfg = run_config(o);
    const auto corpus = usis::generate_synthetic_corpus(cfg.data.synth, o.count, cfg.seed);
    write_corpus(corpus.dataset, corpus.images, o.out, "annotations.json");
    std::cout << "wrote " << corpus.images.size() << " scenes with " << corpus.dataset.annotations.size()
              << " instances to " << o.out << '\n';
    return 0;
}

int cmd_train(const Options& o)
{
    auto cfg = run_config(o);
    const fs::path out(o.out);
    fs::create_directories(out);
    write_json(out / "run_config.json", usis::run_config_to_json(cfg));

    usis::Dataset train_set;
    std::vector<usis::RgbImage> train_images;
    const std::string annotations = o.annotations.empty() ? cfg.data.annotations : o.annotations;
    if (!annotations.empty()) {
        train_set = usis::load_coco(annotations);
        train_images = load_images(train_set, o.images.empty() ? cfg.data.images : o.images);
    } else {
        auto corpus = usis::generate_synthetic_corpus(cfg.data.synth, cfg.data.synthetic_count, cfg.seed);
        const auto splits = usis::split_dataset(corpus.dataset, usis::SplitRatios{}, cfg.seed);
        auto images_of = [&](const usis::Dataset& part) {
            std::vector<usis::RgbImage> v;
            for (const auto& rec : part.images) {
                v.push_back(corpus.images[static_cast<std::size_t>(rec.id - 1)]);
            }
            return v;
        };
        write_corpus(splits.val, images_of(splits.val), out / "data", "val.json");
        write_corpus(splits.test, images_of(splits.test), out / "data", "test.json");
        train_set = splits.train;
        train_images = images_of(splits.train);
        usis::save_coco(train_set, out / "data" / "train.json");
    }

    usis::UsisSam model(cfg.model);
    usis::save_checkpoint(model, out / "initial.ckpt");
    const auto samples = usis::prepare_samples(model, train_set, train_images);
    std::ofstream log(out / "train_log.jsonl");
    if (!log) {
        throw usis::IoError("cannot write " + (out / "train_log.jsonl").string());
    }
    const auto result = usis::train(model, samples, cfg.train, [&](const usis::StepLog& s) {
        log << usis::step_log_json(s).dump() << '\n';
        log.flush();
    });
    usis::save_checkpoint(model, out / "checkpoint.ckpt");
    if (!result.history.empty()) {
        std::cout << "steps " << result.history.size() << ", first loss " << result.history.front().loss.total
                  << ", last loss " << result.history.back().loss.total << '\n';
    }
    std::cout << "checkpoint written to " << (out / "checkpoint.ckpt").string() << '\n';
    return 0;
}

int cmd_eval(const Options& o)
{
    const auto mode = usis::parse_eval_mode(o.mode);
    const auto d = usis::load_coco(o.annotations);
    auto evals = usis::ground_truth_images(d);
    if (!o.detections.empty()) {
        std::ifstream in(o.detections);
        if (!in) {
            throw usis::IoError("cannot read " + o.detections);
        }
        nlohmann::json results;
        try {
            results = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw usis::ParseError(std::string("detections: ") + e.what());
        }
        usis::attach_coco_detections(d, results, evals);
    } else {
        const auto model = usis::load_checkpoint(o.checkpoint);
        const auto images = load_images(d, o.images);
        auto dets = usis::model_forward(model, images);
        for (std::size_t i = 0; i < evals.size(); ++i) {
            evals[i].detections = std::move(dets[i]);
        }
    }
    const auto result = usis::summarize(evals, mode);
    if (!o.out.empty()) {
        write_json(o.out, result.to_json());
    }
    std::cout << result.to_json().dump(2) << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    usis::kernels::configure_workers_from_env();
    CLI::App app{"Underwater salient instance segmentation toolkit"};
    app.require_subcommand(1);
    Options o;

    auto add_seed = [&](CLI::App* c) {
        c->add_option("--seed", o.seed, "random seed (default 0)")->each([&](const std::string&) {
            o.seed_given = true;
        });
    };

    auto* stats = app.add_subcommand("stats", "dataset statistics report");
    stats->add_option("--annotations", o.annotations, "COCO annotation file")->required()->check(CLI::ExistingFile);
    stats->add_option("--images", o.images, "image directory")->required();
    stats->add_option("--out", o.out, "report directory")->required();

    auto* split = app.add_subcommand("split", "7:1.5:1.5 train/val/test split");
    split->add_option("--annotations", o.annotations, "COCO annotation file")->required()->check(CLI::ExistingFile);
    split->add_option("--out", o.out, "output directory")->required();
    add_seed(split);

    auto* synth = app.add_subcommand("synth", "generate synthetic underwater scenes");
    synth->add_option("--out", o.out, "output directory")->required();
    synth->add_option("--count", o.count, "number of scenes")->check(CLI::PositiveNumber);
    synth->add_option("--config", o.config, "YAML config (data.synthetic section)")->check(CLI::ExistingFile);
    add_seed(synth);

    auto* train = app.add_subcommand("train", "train adapters, prompt generator and heads");
    train->add_option("--config", o.config, "YAML config")->required()->check(CLI::ExistingFile);
    train->add_option("--out", o.out, "run directory")->required();
    train->add_option("--annotations", o.annotations, "COCO training annotations (default: synthetic data)");
    train->add_option("--images", o.images, "image directory for --annotations");
    add_seed(train);

    auto* eval = app.add_subcommand("eval", "mask AP evaluation");
    eval->add_option("--annotations", o.annotations, "COCO ground truth")->required()->check(CLI::ExistingFile);
    eval->add_option("--mode", o.mode, "class-agnostic or multi-class")
        ->check(CLI::IsMember({"class-agnostic", "multi-class"}));
    auto* ck = eval->add_option("--checkpoint", o.checkpoint, "model checkpoint")->check(CLI::ExistingFile);
    auto* det = eval->add_option("--detections", o.detections, "COCO results file instead of a model")
                    ->check(CLI::ExistingFile);
    ck->excludes(det);
    eval->add_option("--images", o.images, "image directory (with --checkpoint)");
    eval->add_option("--out", o.out, "metrics JSON path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(stats)) {
            return cmd_stats(o);
        }
        if (app.got_subcommand(split)) {
            return cmd_split(o);
        }
        if (app.got_subcommand(synth)) {
            return cmd_synth(o);
        }
        if (app.got_subcommand(train)) {
            return cmd_train(o);
        }
        if (app.got_subcommand(eval)) {
            if (o.checkpoint.empty() && o.detections.empty()) {
                std::cerr << "error: eval needs --checkpoint or --detections\n";
                return 2;
            }
            if (!o.checkpoint.empty() && o.images.empty()) {
                std::cerr << "error: --checkpoint needs --images\n";
                return 2;
            }
            return cmd_eval(o);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
