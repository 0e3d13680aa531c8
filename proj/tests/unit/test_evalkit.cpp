#include <doctest.h>

#include "oracles.hpp"
#include "usis/error.hpp"
#include "usis/evalkit.hpp"

using namespace usis;

namespace {

BinaryMask row_mask(int width, int from, int to)
{
    BinaryMask m(1, width);
    for (int c = from; c < to; ++c) m.set(0, c);
    return m;
}

} // namespace

TEST_SUITE("evalkit")
{
    TEST_CASE("thresholds")
    {
        CHECK(iou_threshold(0) == 0.5);
        CHECK(iou_threshold(5) == 0.75);
        CHECK(iou_threshold(9) == 0.95);
    }

    TEST_CASE("average precision hand cases")
    {
        const std::vector<char> one{1};
        CHECK(average_precision(one, 1) == doctest::Approx(1.0));
        CHECK(average_precision(one, 2) == doctest::Approx(51.0 / 101.0));
        CHECK(average_precision(std::vector<char>{}, 3) == 0.0);
        // FP then TP: precision 1/2 everywhere after interpolation.
        CHECK(average_precision(std::vector<char>{0, 1}, 1) == doctest::Approx(0.5));
        CHECK_THROWS_AS(average_precision(one, 0), UndefinedMetricError);
    }

    TEST_CASE("greedy matching: score order and best IoU")
    {
        const std::vector<GroundTruth> gts{{row_mask(10, 0, 4), 1}, {row_mask(10, 0, 5), 1}};
        // Higher-scored detection takes the gt it overlaps best (IoU 1 with gt 1).
        const std::vector<Detection> dets{{row_mask(10, 0, 4), 0.3, 1}, {row_mask(10, 0, 5), 0.9, 1}};
        const auto m = match_detections(dets, gts, 0.5);
        CHECK(m.matched_gt == std::vector<int>{0, 1});
        CHECK(m.iou[1] == doctest::Approx(1.0));
        // Labels must agree.
        const std::vector<Detection> wrong{{row_mask(10, 0, 4), 0.3, 2}};
        CHECK(match_detections(wrong, gts, 0.5).true_positive == std::vector<char>{0});
        const std::vector<Detection> bad{{BinaryMask(2, 2), 0.3, 1}};
        CHECK_THROWS_AS(match_detections(bad, gts, 0.5), ShapeError);
    }

    TEST_CASE("equal IoU goes to the lower gt index")
    {
        const std::vector<GroundTruth> gts{{row_mask(10, 0, 4), 1}, {row_mask(10, 2, 6), 1}};
        const std::vector<Detection> dets{{row_mask(10, 1, 5), 0.5, 1}};
        CHECK(match_detections(dets, gts, 0.5).matched_gt == std::vector<int>{0});
    }

    TEST_CASE("perfect predictions score one")
    {
        auto images = oracle::random_eval_images(3, 10);
        for (auto& img : images) {
            img.detections.clear();
            for (const auto& g : img.ground_truth) img.detections.push_back({g.mask, 0.9, g.category_id});
        }
        for (auto mode : {EvalMode::ClassAgnostic, EvalMode::MultiClass}) {
            const auto r = summarize(images, mode);
            CHECK(r.map == doctest::Approx(1.0));
            CHECK(r.ap50 == doctest::Approx(1.0));
            CHECK(r.ap75 == doctest::Approx(1.0));
        }
    }

    TEST_CASE("IoU 0.6 case")
    {
        // 8-pixel masks overlapping in 6 pixels.
        ImageEval img;
        img.ground_truth.push_back({row_mask(12, 0, 8), 1});
        img.detections.push_back({row_mask(12, 2, 10), 0.8, 1});
        REQUIRE(mask_iou(img.ground_truth[0].mask, img.detections[0].mask) == doctest::Approx(0.6));
        const auto r = summarize(std::vector<ImageEval>{img}, EvalMode::MultiClass);
        CHECK(r.ap50 == 1.0);
        CHECK(r.ap75 == 0.0);
        CHECK(r.ap_per_threshold[2] == 1.0); // 0.60 inclusive
        CHECK(r.ap_per_threshold[3] == 0.0);
    }

    TEST_CASE("summarize agrees with the brute-force oracle")
    {
        for (std::uint64_t seed : {1u, 2u, 3u}) {
            const auto images = oracle::random_eval_images(seed, 30);
            for (bool agnostic : {true, false}) {
                const auto r = summarize(images, agnostic ? EvalMode::ClassAgnostic : EvalMode::MultiClass);
                const auto [a50, a75] = oracle::brute_force_ap50_ap75(images, agnostic);
                CHECK(r.ap50 == a50);
                CHECK(r.ap75 == a75);
            }
        }
    }

    TEST_CASE("detections beyond 100 per image are dropped")
    {
        ImageEval img;
        img.ground_truth.push_back({row_mask(4, 0, 2), 1});
        for (int i = 0; i < 100; ++i) img.detections.push_back({row_mask(4, 2, 4), 0.9, 1});
        img.detections.push_back({row_mask(4, 0, 2), 0.1, 1});
        CHECK(summarize(std::vector<ImageEval>{img}, EvalMode::MultiClass).ap50 == 0.0);
        img.detections.pop_back();
        img.detections.back() = {row_mask(4, 0, 2), 0.1, 1};
        CHECK(summarize(std::vector<ImageEval>{img}, EvalMode::MultiClass).ap50 > 0.0);
    }

    TEST_CASE("modes differ on label confusion")
    {
        ImageEval img;
        img.ground_truth.push_back({row_mask(4, 0, 2), 1});
        img.detections.push_back({row_mask(4, 0, 2), 0.9, 2});
        const std::vector<ImageEval> v{img};
        CHECK(summarize(v, EvalMode::ClassAgnostic).ap50 == 1.0);
        CHECK(summarize(v, EvalMode::MultiClass).ap50 == 0.0);
        CHECK(summarize(v, EvalMode::MultiClass).per_category.size() == 1);
        CHECK_THROWS_AS(summarize(std::vector<ImageEval>{ImageEval{}}, EvalMode::MultiClass), UndefinedMetricError);
        CHECK(parse_eval_mode("class-agnostic") == EvalMode::ClassAgnostic);
        CHECK_THROWS_AS(parse_eval_mode("both"), std::invalid_argument);
    }

    TEST_CASE("COCO detection files round trip")
    {
        const auto corpus = generate_synthetic_corpus(SynthConfig{}, 4, 8);
        auto images = ground_truth_images(corpus.dataset);
        for (auto& img : images) {
            for (const auto& g : img.ground_truth) img.detections.push_back({g.mask, 0.7, g.category_id});
        }
        const auto results = detections_to_coco(corpus.dataset, images);
        auto fresh = ground_truth_images(corpus.dataset);
        attach_coco_detections(corpus.dataset, results, fresh);
        for (std::size_t i = 0; i < images.size(); ++i) {
            REQUIRE(fresh[i].detections.size() == images[i].detections.size());
            for (std::size_t j = 0; j < images[i].detections.size(); ++j) {
                CHECK(fresh[i].detections[j].mask == images[i].detections[j].mask);
                CHECK(fresh[i].detections[j].score == 0.7);
            }
        }
        auto bad = results;
        bad[0]["image_id"] = 999999;
        CHECK_THROWS_AS(attach_coco_detections(corpus.dataset, bad, fresh), IntegrityError);
        CHECK_THROWS_AS(attach_coco_detections(corpus.dataset, nlohmann::json::object(), fresh), ParseError);
    }
}
