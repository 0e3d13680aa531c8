// stats.hpp
//
// Dataset characterization: foreground/background color contrast,
// boundary-patch contrast, channel intensities, instance size and count
// distributions and the center-bias heat map.

#pragma once

#include <array>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "usis/datakit.hpp"
#include "usis/geometry.hpp"
#include "usis/image.hpp"

namespace usis {

inline constexpr int kDefaultHistogramBins = 64;
inline constexpr double kBhattacharyyaEpsilon = 1e-12;
inline constexpr int kCenterBiasCanvas = 256;

/// Marginal per-channel histograms concatenated (R bins, G bins, B bins) and
/// normalized to sum 1 over all 3 * bins_per_channel entries.
struct Histogram {
    int bins_per_channel = 0;
    std::vector<double> values;
};

Histogram rgb_histogram(const RgbImage& image, const BinaryMask& mask, int bins_per_channel = kDefaultHistogramBins);

/// -ln(sum_i sqrt(p_i q_i)), coefficient clamped to >= epsilon.
double bhattacharyya_distance(std::span<const double> p, std::span<const double> q,
                              double epsilon = kBhattacharyyaEpsilon);
double bhattacharyya_distance(const Histogram& p, const Histogram& q, double epsilon = kBhattacharyyaEpsilon);

/// Instance histogram vs. background histogram, where background is the
/// complement of the union of `all_instances` (which should include `instance`).
double global_contrast(const RgbImage& image, const BinaryMask& instance, std::span<const BinaryMask> all_instances);

/// Mean Bhattacharyya distance between inside/outside pixels of the 5x5
/// patch around each boundary pixel (set pixel with an unset 4-neighbor).
double local_contrast(const RgbImage& image, const BinaryMask& mask, int patch = 5);

struct ChannelMeans {
    double r = 0.0;
    double g = 0.0;
    double b = 0.0;
};

ChannelMeans channel_intensity(const RgbImage& image);

struct SizeBuckets {
    std::int64_t below_1pct = 0;
    std::int64_t between = 0;
    std::int64_t above_30pct = 0;

    std::int64_t total() const { return below_1pct + between + above_30pct; }
};

struct SkippedItem {
    std::int64_t image_id = 0;
    std::string reason;
};

struct CorpusStats {
    std::vector<std::int64_t> image_ids;
    std::vector<ChannelMeans> channel_means;
    /// Density of per-image channel means over 256 unit-width bins, one row
    /// per channel (R, G, B); each row sums to 1.
    std::array<std::vector<double>, 3> channel_density;
    /// Per-instance area / image area.
    std::vector<double> area_fractions;
    std::vector<double> instance_areas;
    SizeBuckets size_buckets;
    /// count_histogram[k] = number of images with k instances.
    std::vector<std::int64_t> count_histogram;
    std::int64_t images_with_more_than_3 = 0;
    std::vector<double> global_contrast;
    std::vector<double> local_contrast;
    /// kCenterBiasCanvas^2 accumulated resampled masks, row-major.
    std::vector<std::int64_t> center_bias;
    std::vector<SkippedItem> skipped;
    std::int64_t instance_count = 0;
};

using ImageLoader = std::function<std::optional<RgbImage>(const ImageRecord&, std::string& error)>;

/// Loader reading `<dir>/<file_name>`.
ImageLoader directory_loader(const std::string& dir);

CorpusStats corpus_statistics(const Dataset& dataset, const ImageLoader& load);

nlohmann::json stats_report_json(const CorpusStats& s);
/// Writes report.json plus CSV tables into `dir`.
void write_stats_report(const CorpusStats& s, const std::string& dir);

} // namespace usis
