#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "usis/error.hpp"
#include "usis/stats.hpp"

using namespace usis;

namespace {

RgbImage random_image(Rng& rng, int h, int w)
{
    RgbImage img(h, w);
    for (auto& v : img.data) {
        v = static_cast<std::uint8_t>(rng.below(256));
    }
    return img;
}

BinaryMask rect(int h, int w, int r0, int c0, int r1, int c1)
{
    BinaryMask m(h, w);
    for (int r = r0; r < r1; ++r) {
        for (int c = c0; c < c1; ++c) {
            m.set(r, c);
        }
    }
    return m;
}

} // namespace

TEST_SUITE("stats")
{
    TEST_CASE("histogram matches a naive count")
    {
        Rng rng(1);
        for (int bins : {1, 7, 64, 256}) {
            const auto img = random_image(rng, 12, 9);
            const auto m = rect(12, 9, 2, 1, 10, 6);
            const auto h = rgb_histogram(img, m, bins);
            const auto ref = oracle::naive_histogram(img, m, bins);
            REQUIRE(h.values.size() == ref.size());
            for (std::size_t i = 0; i < ref.size(); ++i) {
                REQUIRE(h.values[i] == doctest::Approx(ref[i]));
            }
        }
        CHECK_THROWS_AS(rgb_histogram(RgbImage(3, 3), BinaryMask(3, 3)), EmptyRegionError);
        CHECK_THROWS_AS(rgb_histogram(RgbImage(3, 3), BinaryMask(2, 3)), ShapeError);
    }

    TEST_CASE("Bhattacharyya distance values")
    {
        const std::vector<double> p{0.9, 0.1}, q{0.1, 0.9};
        CHECK(bhattacharyya_distance(p, p) == doctest::Approx(0.0));
        CHECK(bhattacharyya_distance(p, q) == doctest::Approx(-std::log(0.6)).epsilon(1e-12));
        const std::vector<double> a{1, 0}, b{0, 1};
        CHECK(bhattacharyya_distance(a, b) == doctest::Approx(-std::log(1e-12)));
        CHECK_THROWS_AS(bhattacharyya_distance(std::vector<double>{1}, b), ShapeError);
    }

    TEST_CASE("global contrast on a two-color scene")
    {
        RgbImage img(10, 10);
        const auto fg = rect(10, 10, 2, 2, 6, 6);
        for (int r = 0; r < 10; ++r) {
            for (int c = 0; c < 10; ++c) {
                const bool in = fg.at(r, c);
                img.at(r, c, 0) = in ? 200 : 10;
                img.at(r, c, 1) = 50;
                img.at(r, c, 2) = in ? 10 : 200;
            }
        }
        const std::vector<BinaryMask> all{fg};
        // Shared G bin gives coefficient 1/3 over the 3 marginals.
        CHECK(global_contrast(img, fg, all) == doctest::Approx(std::log(3.0)));
        const std::vector<BinaryMask> everything{rect(10, 10, 0, 0, 10, 10)};
        CHECK_THROWS_AS(global_contrast(img, everything[0], everything), EmptyRegionError);
    }

    TEST_CASE("local contrast is zero on a flat image")
    {
        RgbImage img(12, 12);
        for (auto& v : img.data) {
            v = 90;
        }
        const auto m = rect(12, 12, 3, 3, 9, 9);
        CHECK(local_contrast(img, m) == doctest::Approx(0.0));
        CHECK_THROWS_AS(local_contrast(img, BinaryMask(12, 12)), EmptyRegionError);
    }

    TEST_CASE("channel intensity")
    {
        RgbImage img(2, 2);
        for (int i = 0; i < 4; ++i) {
            img.data[i * 3 + 0] = static_cast<std::uint8_t>(10 * i);
            img.data[i * 3 + 1] = 100;
            img.data[i * 3 + 2] = 255;
        }
        const auto m = channel_intensity(img);
        CHECK(m.r == doctest::Approx(15.0));
        CHECK(m.g == doctest::Approx(100.0));
        CHECK(m.b == doctest::Approx(255.0));
    }

    TEST_CASE("corpus statistics on synthetic scenes")
    {
        SynthConfig cfg;
        const auto corpus = generate_synthetic_corpus(cfg, 30, 5);
        const auto& imgs = corpus.images;
        const auto& d = corpus.dataset;
        ImageLoader loader = [&](const ImageRecord& rec, std::string&) -> std::optional<RgbImage> {
            for (std::size_t i = 0; i < d.images.size(); ++i) {
                if (d.images[i].id == rec.id) {
                    return imgs[i];
                }
            }
            return std::nullopt;
        };
        const auto s = corpus_statistics(d, loader);
        CHECK(s.instance_count == static_cast<std::int64_t>(d.annotations.size()));
        CHECK(s.size_buckets.total() == s.instance_count);
        std::int64_t images = 0, instances = 0;
        for (std::size_t k = 0; k < s.count_histogram.size(); ++k) {
            images += s.count_histogram[k];
            instances += static_cast<std::int64_t>(k) * s.count_histogram[k];
        }
        CHECK(images == 30);
        CHECK(instances == s.instance_count);
        for (const auto& row : s.channel_density) {
            double sum = 0;
            for (double v : row) sum += v;
            CHECK(sum == doctest::Approx(1.0));
        }
        double mr = 0, mg = 0, mb = 0;
        for (const auto& c : s.channel_means) {
            mr += c.r;
            mg += c.g;
            mb += c.b;
        }
        CHECK(mr < mg);
        CHECK(mr < mb);
        CHECK(s.global_contrast.size() == static_cast<std::size_t>(s.instance_count));
        CHECK(s.skipped.empty());
        std::int64_t heat = 0;
        for (auto v : s.center_bias) heat += v;
        CHECK(heat > 0);

        const auto dir = std::filesystem::temp_directory_path() / "usis_stats_report";
        std::filesystem::remove_all(dir);
        write_stats_report(s, dir.string());
        CHECK(std::filesystem::exists(dir / "report.json"));
        CHECK(std::filesystem::exists(dir / "size_buckets.csv"));
        CHECK(stats_report_json(s)["instances"] == s.instance_count);
        std::filesystem::remove_all(dir);
    }

    TEST_CASE("unreadable images are skipped, not fatal")
    {
        const auto corpus = generate_synthetic_corpus(SynthConfig{}, 3, 2);
        ImageLoader none = [](const ImageRecord&, std::string& err) -> std::optional<RgbImage> {
            err = "missing";
            return std::nullopt;
        };
        const auto s = corpus_statistics(corpus.dataset, none);
        CHECK(s.skipped.size() == 3);
        CHECK(s.instance_count == 0);
    }
}
