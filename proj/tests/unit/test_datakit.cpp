#include <doctest.h>

#include <filesystem>
#include <set>

#include "usis/datakit.hpp"
#include "usis/error.hpp"

using namespace usis;
using nlohmann::json;

namespace {

json tiny_coco()
{
    return json::parse(R"({
      "images": [{"id": 1, "file_name": "a.png", "height": 8, "width": 8},
                 {"id": 2, "file_name": "b.png", "height": 8, "width": 8}],
      "annotations": [
        {"id": 10, "image_id": 1, "category_id": 1, "segmentation": [[1, 1, 5, 1, 5, 5, 1, 5]], "area": 16},
        {"id": 11, "image_id": 2, "category_id": 7,
         "segmentation": {"size": [8, 8], "counts": [9, 2, 6, 2, 45]}}
      ]
    })");
}

} // namespace

TEST_SUITE("datakit")
{
    TEST_CASE("taxonomy")
    {
        const auto& cats = underwater_categories();
        REQUIRE(cats.size() == 7);
        for (int i = 0; i < 7; ++i) {
            CHECK(cats[i].id == i + 1);
        }
        CHECK(cats.front().name == "fish");
    }

    TEST_CASE("COCO parsing with polygons and RLE")
    {
        const auto d = parse_coco(tiny_coco());
        CHECK(d.categories == underwater_categories());
        REQUIRE(d.annotations.size() == 2);
        CHECK(d.annotations[0].area == 16.0);
        CHECK(d.annotations[0].box == Box{1, 1, 5, 5});
        CHECK(d.warnings.empty());
        const auto m = d.annotations[1].segmentation.rasterize(8, 8);
        CHECK(m.area() == 4);
        CHECK(m.at(1, 1));
        CHECK(m.at(1, 2));
        CHECK(d.annotations[1].area == 4.0);
        CHECK(d.annotations_for(2).size() == 1);
        CHECK(d.find_image(3) == nullptr);
    }

    TEST_CASE("inconsistent stored area is corrected with a warning")
    {
        auto j = tiny_coco();
        j["annotations"][0]["area"] = 30;
        const auto d = parse_coco(j);
        CHECK(d.annotations[0].area == 16.0);
        CHECK(d.warnings.size() == 1);
    }

    TEST_CASE("integrity errors")
    {
        auto j = tiny_coco();
        j["annotations"][0]["category_id"] = 9;
        CHECK_THROWS_AS(parse_coco(j), IntegrityError);
        j = tiny_coco();
        j["annotations"][0]["image_id"] = 5;
        CHECK_THROWS_AS(parse_coco(j), IntegrityError);
        j = tiny_coco();
        j["images"][1]["id"] = 1;
        CHECK_THROWS_AS(parse_coco(j), IntegrityError);
        j = tiny_coco();
        j["annotations"][0]["segmentation"] = "nope";
        CHECK_THROWS_AS(parse_coco(j), ParseError);
        j = tiny_coco();
        j["annotations"][1]["segmentation"]["counts"] = json::array({9, 2});
        CHECK_THROWS_AS(parse_coco(j), CorruptEncodingError);
        CHECK_THROWS_AS(parse_coco(json::array()), ParseError);
    }

    TEST_CASE("COCO round trip through a file")
    {
        const auto d = parse_coco(tiny_coco());
        const auto path = std::filesystem::temp_directory_path() / "usis_datakit_roundtrip.json";
        save_coco(d, path);
        const auto e = load_coco(path);
        std::filesystem::remove(path);
        REQUIRE(e.annotations.size() == d.annotations.size());
        for (std::size_t i = 0; i < d.annotations.size(); ++i) {
            CHECK(e.annotations[i].segmentation.rasterize(8, 8) == d.annotations[i].segmentation.rasterize(8, 8));
            CHECK(e.annotations[i].box == d.annotations[i].box);
        }
        CHECK(e.images == d.images);
        CHECK_THROWS_AS(load_coco("/nonexistent/usis.json"), IoError);
    }

    TEST_CASE("split sizes, disjointness and determinism")
    {
        SynthConfig cfg;
        const auto corpus = generate_synthetic_corpus(cfg, 41, 3);
        const auto s1 = split_dataset(corpus.dataset, {}, 99);
        const auto s2 = split_dataset(corpus.dataset, {}, 99);
        // floor(41 * 0.15) = 6 for val and test.
        CHECK(s1.val.images.size() == 6);
        CHECK(s1.test.images.size() == 6);
        CHECK(s1.train.images.size() == 29);
        CHECK(s1.train.images == s2.train.images);
        std::set<std::int64_t> ids;
        for (const auto* part : {&s1.train, &s1.val, &s1.test}) {
            for (const auto& im : part->images) {
                CHECK(ids.insert(im.id).second);
            }
            for (const auto& a : part->annotations) {
                CHECK(part->find_image(a.image_id) != nullptr);
            }
        }
        CHECK(s1.train.annotations.size() + s1.val.annotations.size() + s1.test.annotations.size() ==
              corpus.dataset.annotations.size());
        const auto s3 = split_dataset(corpus.dataset, {}, 100);
        CHECK_FALSE(s3.train.images == s1.train.images);
        CHECK_THROWS_AS(split_dataset(Dataset{}, {}, 1), std::invalid_argument);
    }

    TEST_CASE("synthetic scenes")
    {
        SynthConfig cfg;
        const auto a = generate_synthetic_scene(cfg, 17);
        const auto b = generate_synthetic_scene(cfg, 17);
        CHECK(a.image == b.image);
        REQUIRE(a.annotations.size() == b.annotations.size());
        CHECK(a.annotations.size() >= 1);
        CHECK(a.annotations.size() <= 3);
        for (const auto& ann : a.annotations) {
            const auto m = ann.segmentation.rasterize(cfg.height, cfg.width);
            CHECK(m.area() >= cfg.min_area);
            CHECK(static_cast<double>(m.area()) == ann.area);
            CHECK(ann.category_id >= 1);
            CHECK(ann.category_id <= 7);
        }
        // Instances do not overlap once occlusion is applied.
        for (std::size_t i = 0; i < a.annotations.size(); ++i) {
            for (std::size_t j = i + 1; j < a.annotations.size(); ++j) {
                CHECK(mask_intersection(a.annotations[i].segmentation.rasterize(64, 64),
                                        a.annotations[j].segmentation.rasterize(64, 64)) == 0);
            }
        }
        const auto corpus = generate_synthetic_corpus(cfg, 5, 1);
        CHECK(corpus.images.size() == 5);
        CHECK(corpus.dataset.images[0].file_name == "scene_00000.png");
    }

    TEST_CASE("synth config validation")
    {
        SynthConfig cfg;
        cfg.attenuation = {0.9, 0.5, 0.5};
        CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
        cfg = {};
        cfg.min_instances = 4;
        CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
        cfg = {};
        cfg.shapes.clear();
        CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    }
}
