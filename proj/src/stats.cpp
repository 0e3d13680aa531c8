#include "usis/stats.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "usis/error.hpp"

namespace usis {

namespace {

int bin_of(std::uint8_t v, int bins)
{
    return static_cast<int>(v) * bins / 256;
}

void add_pixel(std::vector<double>& counts, const RgbImage& image, int r, int c, int bins)
{
    for (int ch = 0; ch < 3; ++ch) {
        counts[static_cast<std::size_t>(ch * bins + bin_of(image.at(r, c, ch), bins))] += 1.0;
    }
}

Histogram normalized(std::vector<double> counts, int bins)
{
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    for (auto& v : counts) {
        v /= total;
    }
    return Histogram{bins, std::move(counts)};
}

void check_same_shape(const RgbImage& image, const BinaryMask& mask)
{
    if (image.height != mask.height() || image.width != mask.width()) {
        throw ShapeError("mask " + std::to_string(mask.height()) + "x" + std::to_string(mask.width()) +
                         " does not match image " + std::to_string(image.height) + "x" + std::to_string(image.width));
    }
}

double median_of(std::vector<double> v)
{
    if (v.empty()) {
        return 0.0;
    }
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean_of(const std::vector<double>& v)
{
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

} // namespace

Histogram rgb_histogram(const RgbImage& image, const BinaryMask& mask, int bins_per_channel)
{
    check_same_shape(image, mask);
    if (bins_per_channel < 1 || bins_per_channel > 256) {
        throw std::invalid_argument("bins per channel must lie in [1, 256]");
    }
    std::vector<double> counts(static_cast<std::size_t>(3 * bins_per_channel), 0.0);
    std::int64_t n = 0;
    for (int r = 0; r < image.height; ++r) {
        for (int c = 0; c < image.width; ++c) {
            if (mask.at(r, c)) {
                add_pixel(counts, image, r, c, bins_per_channel);
                ++n;
            }
        }
    }
    if (n == 0) {
        throw EmptyRegionError("rgb_histogram: mask selects no pixels");
    }
    return normalized(std::move(counts), bins_per_channel);
}

double bhattacharyya_distance(std::span<const double> p, std::span<const double> q, double epsilon)
{
    if (p.size() != q.size()) {
        throw ShapeError("bhattacharyya_distance: histograms have " + std::to_string(p.size()) + " and " +
                         std::to_string(q.size()) + " bins");
    }
    double bc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        bc += std::sqrt(p[i] * q[i]);
    }
    // Rounding can push the coefficient of identical histograms past 1.
    bc = std::clamp(bc, epsilon, 1.0);
    return -std::log(bc);
}

double bhattacharyya_distance(const Histogram& p, const Histogram& q, double epsilon)
{
    if (p.bins_per_channel != q.bins_per_channel) {
        throw ShapeError("bhattacharyya_distance: bin layouts differ");
    }
    return bhattacharyya_distance(std::span<const double>(p.values), std::span<const double>(q.values), epsilon);
}

double global_contrast(const RgbImage& image, const BinaryMask& instance, std::span<const BinaryMask> all_instances)
{
    check_same_shape(image, instance);
    BinaryMask background(image.height, image.width);
    auto bg = background.bits();
    std::fill(bg.begin(), bg.end(), 1);
    auto clear = [&](const BinaryMask& m) {
        check_same_shape(image, m);
        const auto bits = m.bits();
        for (std::size_t i = 0; i < bits.size(); ++i) {
            if (bits[i]) {
                bg[i] = 0;
            }
        }
    };
    clear(instance);
    for (const auto& m : all_instances) {
        clear(m);
    }
    if (background.area() == 0) {
        throw EmptyRegionError("global_contrast: salient masks cover the whole image");
    }
    return bhattacharyya_distance(rgb_histogram(image, instance), rgb_histogram(image, background));
}

double local_contrast(const RgbImage& image, const BinaryMask& mask, int patch)
{
    check_same_shape(image, mask);
    const int h = image.height;
    const int w = image.width;
    const int half = patch / 2;
    const int bins = kDefaultHistogramBins;
    double total = 0.0;
    std::int64_t patches = 0;
    std::vector<double> inside(static_cast<std::size_t>(3 * bins));
    std::vector<double> outside(static_cast<std::size_t>(3 * bins));
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            if (!mask.at(r, c)) {
                continue;
            }
            const bool boundary = (r > 0 && !mask.at(r - 1, c)) || (r + 1 < h && !mask.at(r + 1, c)) ||
                                  (c > 0 && !mask.at(r, c - 1)) || (c + 1 < w && !mask.at(r, c + 1));
            if (!boundary) {
                continue;
            }
            std::fill(inside.begin(), inside.end(), 0.0);
            std::fill(outside.begin(), outside.end(), 0.0);
            int n_in = 0;
            int n_out = 0;
            for (int y = std::max(0, r - half); y <= std::min(h - 1, r + half); ++y) {
                for (int x = std::max(0, c - half); x <= std::min(w - 1, c + half); ++x) {
                    if (mask.at(y, x)) {
                        add_pixel(inside, image, y, x, bins);
                        ++n_in;
                    } else {
                        add_pixel(outside, image, y, x, bins);
                        ++n_out;
                    }
                }
            }
            if (n_in == 0 || n_out == 0) {
                continue;
            }
            total += bhattacharyya_distance(normalized(inside, bins), normalized(outside, bins));
            ++patches;
        }
    }
    if (patches == 0) {
        throw EmptyRegionError("local_contrast: mask has no boundary patch with both inside and outside pixels");
    }
    return total / static_cast<double>(patches);
}

ChannelMeans channel_intensity(const RgbImage& image)
{
    if (image.empty()) {
        throw EmptyRegionError("channel_intensity: empty image");
    }
    std::array<double, 3> acc{0.0, 0.0, 0.0};
    for (std::size_t i = 0; i < image.data.size(); i += 3) {
        acc[0] += image.data[i];
        acc[1] += image.data[i + 1];
        acc[2] += image.data[i + 2];
    }
    const double n = static_cast<double>(image.height) * image.width;
    return {acc[0] / n, acc[1] / n, acc[2] / n};
}

ImageLoader directory_loader(const std::string& dir)
{
    return [dir](const ImageRecord& rec, std::string& error) -> std::optional<RgbImage> {
        try {
            return read_image(std::filesystem::path(dir) / rec.file_name);
        } catch (const std::exception& e) {
            error = e.what();
            return std::nullopt;
        }
    };
}

namespace {

struct ImageStats {
    bool ok = false;
    std::string reason;
    ChannelMeans means;
    std::vector<double> areas;
    std::vector<double> fractions;
    std::vector<double> global;
    std::vector<double> local;
    std::vector<BinaryMask> resampled;
    std::int64_t instances = 0;
};

ImageStats image_statistics(const Dataset& dataset, const ImageRecord& rec, const ImageLoader& load)
{
    ImageStats out;
    std::string error;
    const auto image = load(rec, error);
    if (!image) {
        out.reason = error.empty() ? "unreadable image" : error;
        return out;
    }
    if (image->height != rec.height || image->width != rec.width) {
        out.reason = "image size " + std::to_string(image->height) + "x" + std::to_string(image->width) +
                     " differs from annotation " + std::to_string(rec.height) + "x" + std::to_string(rec.width);
        return out;
    }
    std::vector<BinaryMask> masks;
    for (const auto* ann : dataset.annotations_for(rec.id)) {
        masks.push_back(ann->segmentation.rasterize(rec.height, rec.width));
    }
    out.ok = true;
    out.instances = static_cast<std::int64_t>(masks.size());
    out.means = channel_intensity(*image);
    const double image_area = static_cast<double>(rec.height) * rec.width;
    for (const auto& m : masks) {
        const auto area = static_cast<double>(m.area());
        out.areas.push_back(area);
        out.fractions.push_back(area / image_area);
        out.resampled.push_back(resize_nearest(m, kCenterBiasCanvas, kCenterBiasCanvas));
        if (area == 0.0) {
            continue;
        }
        try {
            out.global.push_back(global_contrast(*image, m, masks));
        } catch (const EmptyRegionError&) {
        }
        try {
            out.local.push_back(local_contrast(*image, m));
        } catch (const EmptyRegionError&) {
        }
    }
    return out;
}

} // namespace

CorpusStats corpus_statistics(const Dataset& dataset, const ImageLoader& load)
{
    const auto n = static_cast<std::int64_t>(dataset.images.size());
    std::vector<ImageStats> per_image(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t i = 0; i < n; ++i) {
        try {
            per_image[i] = image_statistics(dataset, dataset.images[i], load);
        } catch (const std::exception& e) {
            per_image[i].ok = false;
            per_image[i].reason = e.what();
        }
    }

    // Ordered reduction keeps the report independent of the worker count.
    CorpusStats s;
    s.center_bias.assign(static_cast<std::size_t>(kCenterBiasCanvas) * kCenterBiasCanvas, 0);
    for (auto& row : s.channel_density) {
        row.assign(256, 0.0);
    }
    for (std::int64_t i = 0; i < n; ++i) {
        auto& st = per_image[i];
        const auto& rec = dataset.images[i];
        if (!st.ok) {
            s.skipped.push_back({rec.id, st.reason});
            continue;
        }
        s.image_ids.push_back(rec.id);
        s.channel_means.push_back(st.means);
        const std::array<double, 3> m{st.means.r, st.means.g, st.means.b};
        for (int ch = 0; ch < 3; ++ch) {
            s.channel_density[ch][static_cast<std::size_t>(std::clamp(static_cast<int>(m[ch]), 0, 255))] += 1.0;
        }
        if (s.count_histogram.size() <= static_cast<std::size_t>(st.instances)) {
            s.count_histogram.resize(static_cast<std::size_t>(st.instances) + 1, 0);
        }
        ++s.count_histogram[static_cast<std::size_t>(st.instances)];
        if (st.instances > 3) {
            ++s.images_with_more_than_3;
        }
        s.instance_count += st.instances;
        for (std::size_t k = 0; k < st.fractions.size(); ++k) {
            const double f = st.fractions[k];
            s.area_fractions.push_back(f);
            s.instance_areas.push_back(st.areas[k]);
            if (f < 0.01) {
                ++s.size_buckets.below_1pct;
            } else if (f > 0.30) {
                ++s.size_buckets.above_30pct;
            } else {
                ++s.size_buckets.between;
            }
            const auto bits = st.resampled[k].bits();
            for (std::size_t p = 0; p < bits.size(); ++p) {
                s.center_bias[p] += bits[p];
            }
        }
        s.global_contrast.insert(s.global_contrast.end(), st.global.begin(), st.global.end());
        s.local_contrast.insert(s.local_contrast.end(), st.local.begin(), st.local.end());
    }
    if (!s.channel_means.empty()) {
        for (auto& row : s.channel_density) {
            for (auto& v : row) {
                v /= static_cast<double>(s.channel_means.size());
            }
        }
    }
    return s;
}

nlohmann::json stats_report_json(const CorpusStats& s)
{
    nlohmann::json j;
    j["schema_version"] = 1;
    j["images"] = s.image_ids.size();
    j["instances"] = s.instance_count;
    ChannelMeans avg;
    for (const auto& m : s.channel_means) {
        avg.r += m.r;
        avg.g += m.g;
        avg.b += m.b;
    }
    if (!s.channel_means.empty()) {
        const auto n = static_cast<double>(s.channel_means.size());
        avg = {avg.r / n, avg.g / n, avg.b / n};
    }
    j["channel_intensity"] = {{"mean_r", avg.r}, {"mean_g", avg.g}, {"mean_b", avg.b}};
    j["size"] = {
        {"mean_area_px", mean_of(s.instance_areas)},
        {"mean_area_fraction", mean_of(s.area_fractions)},
        {"below_1pct", s.size_buckets.below_1pct},
        {"between_1_and_30pct", s.size_buckets.between},
        {"above_30pct", s.size_buckets.above_30pct},
    };
    j["count"] = {{"histogram", s.count_histogram}, {"images_with_more_than_3", s.images_with_more_than_3}};
    j["contrast"] = {
        {"global", {{"n", s.global_contrast.size()}, {"mean", mean_of(s.global_contrast)}, {"median", median_of(s.global_contrast)}}},
        {"local", {{"n", s.local_contrast.size()}, {"mean", mean_of(s.local_contrast)}, {"median", median_of(s.local_contrast)}}},
    };
    std::int64_t bias_total = 0;
    std::int64_t bias_max = 0;
    std::size_t bias_argmax = 0;
    for (std::size_t p = 0; p < s.center_bias.size(); ++p) {
        bias_total += s.center_bias[p];
        if (s.center_bias[p] > bias_max) {
            bias_max = s.center_bias[p];
            bias_argmax = p;
        }
    }
    j["center_bias"] = {{"canvas", kCenterBiasCanvas},
                        {"total", bias_total},
                        {"max", bias_max},
                        {"argmax_row", bias_argmax / kCenterBiasCanvas},
                        {"argmax_col", bias_argmax % kCenterBiasCanvas}};
    j["skipped"] = nlohmann::json::array();
    for (const auto& sk : s.skipped) {
        j["skipped"].push_back({{"image_id", sk.image_id}, {"reason", sk.reason}});
    }
    return j;
}

namespace {

std::ofstream open_csv(const std::filesystem::path& path)
{
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out.precision(10);
    return out;
}

} // namespace

void write_stats_report(const CorpusStats& s, const std::string& dir)
{
    const std::filesystem::path root(dir);
    std::filesystem::create_directories(root);
    {
        std::ofstream out(root / "report.json");
        if (!out) {
            throw IoError("cannot write " + (root / "report.json").string());
        }
        out << stats_report_json(s).dump(2) << '\n';
    }
    {
        auto out = open_csv(root / "global_contrast.csv");
        out << "distance\n";
        for (double v : s.global_contrast) {
            out << v << '\n';
        }
    }
    {
        auto out = open_csv(root / "local_contrast.csv");
        out << "distance\n";
        for (double v : s.local_contrast) {
            out << v << '\n';
        }
    }
    {
        auto out = open_csv(root / "channel_intensity.csv");
        out << "image_id,mean_r,mean_g,mean_b\n";
        for (std::size_t i = 0; i < s.channel_means.size(); ++i) {
            const auto& m = s.channel_means[i];
            out << s.image_ids[i] << ',' << m.r << ',' << m.g << ',' << m.b << '\n';
        }
    }
    {
        auto out = open_csv(root / "channel_density.csv");
        out << "intensity,density_r,density_g,density_b\n";
        for (int b = 0; b < 256; ++b) {
            out << b << ',' << s.channel_density[0][b] << ',' << s.channel_density[1][b] << ','
                << s.channel_density[2][b] << '\n';
        }
    }
    {
        auto out = open_csv(root / "size_buckets.csv");
        out << "bucket,count\n";
        out << "below_1pct," << s.size_buckets.below_1pct << '\n';
        out << "between_1_and_30pct," << s.size_buckets.between << '\n';
        out << "above_30pct," << s.size_buckets.above_30pct << '\n';
    }
    {
        auto out = open_csv(root / "area_fractions.csv");
        out << "area_px,fraction\n";
        for (std::size_t i = 0; i < s.area_fractions.size(); ++i) {
            out << s.instance_areas[i] << ',' << s.area_fractions[i] << '\n';
        }
    }
    {
        auto out = open_csv(root / "count_histogram.csv");
        out << "instances,images\n";
        for (std::size_t k = 0; k < s.count_histogram.size(); ++k) {
            out << k << ',' << s.count_histogram[k] << '\n';
        }
    }
    {
        auto out = open_csv(root / "center_bias.csv");
        for (int r = 0; r < kCenterBiasCanvas; ++r) {
            for (int c = 0; c < kCenterBiasCanvas; ++c) {
                out << s.center_bias[static_cast<std::size_t>(r) * kCenterBiasCanvas + c]
                    << (c + 1 < kCenterBiasCanvas ? ',' : '\n');
            }
        }
    }
}

} // namespace usis
