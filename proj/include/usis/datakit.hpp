// datakit.hpp
//
// COCO-style annotation ingestion, the seven-category underwater taxonomy,
// deterministic image-level splitting and a synthetic underwater scene
// generator for desk-scale training and tests.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "usis/geometry.hpp"
#include "usis/image.hpp"

namespace usis {

struct Category {
    int id = 0;
    std::string name;
    bool operator==(const Category&) const = default;
};

/// fish, reefs, aquatic plants, wrecks/ruins, human divers, robots, sea-floor
/// with ids 1..7.
const std::vector<Category>& underwater_categories();

struct ImageRecord {
    std::int64_t id = 0;
    std::string file_name;
    int height = 0;
    int width = 0;
    bool operator==(const ImageRecord&) const = default;
};

/// Either a list of polygons or one run-length mask.
struct Segmentation {
    std::vector<Polygon> polygons;
    std::optional<RunLength> rle;

    BinaryMask rasterize(int height, int width) const;
};

/// COCO segmentation field: polygon list or uncompressed run-length object.
Segmentation parse_segmentation(const nlohmann::json& j);
nlohmann::json segmentation_json(const Segmentation& seg);

struct InstanceAnnotation {
    std::int64_t id = 0;
    std::int64_t image_id = 0;
    int category_id = 0;
    Segmentation segmentation;
    Box box;
    double area = 0.0;
};

enum class SplitTag { None, Train, Val, Test };

std::string to_string(SplitTag tag);

struct Dataset {
    std::vector<Category> categories;
    std::vector<ImageRecord> images;
    std::vector<InstanceAnnotation> annotations;
    SplitTag split = SplitTag::None;
    /// Non-fatal notes collected while loading (e.g. corrected areas).
    std::vector<std::string> warnings;

    const ImageRecord* find_image(std::int64_t id) const;
    /// Annotations of one image, in file order.
    std::vector<const InstanceAnnotation*> annotations_for(std::int64_t image_id) const;
};

Dataset parse_coco(const nlohmann::json& j);
Dataset load_coco(const std::filesystem::path& path);
nlohmann::json to_coco_json(const Dataset& d);
void save_coco(const Dataset& d, const std::filesystem::path& path);

struct SplitRatios {
    double train = 7.0;
    double val = 1.5;
    double test = 1.5;
};

struct DatasetSplits {
    Dataset train;
    Dataset val;
    Dataset test;
};

/// Image-level shuffle then slice. Val and test sizes are floored, train
/// takes the remainder.
DatasetSplits split_dataset(const Dataset& d, const SplitRatios& ratios, std::uint64_t seed);

enum class ShapeKind { Ellipse, PolygonBlob };

struct SynthConfig {
    int height = 64;
    int width = 64;
    int min_instances = 1;
    int max_instances = 3;
    std::vector<ShapeKind> shapes{ShapeKind::Ellipse, ShapeKind::PolygonBlob};
    /// Per-channel water attenuation (R, G, B), each in (0, 1], red lowest.
    std::array<double, 3> attenuation{0.55, 0.85, 0.95};
    /// Standard deviation of additive pixel noise, in 8-bit units.
    double noise = 4.0;
    /// Instance extent range in pixels.
    int min_extent = 10;
    int max_extent = 30;
    /// Instances whose visible area drops below this after occlusion are dropped.
    int min_area = 12;

    /// Throws std::invalid_argument on violated invariants.
    void validate() const;
};

struct SynthScene {
    RgbImage image;
    std::vector<InstanceAnnotation> annotations;
};

SynthScene generate_synthetic_scene(const SynthConfig& cfg, std::uint64_t seed);

struct SynthCorpus {
    Dataset dataset;
    /// Parallel to dataset.images.
    std::vector<RgbImage> images;
};

/// `count` scenes, scene i seeded from (seed, i). Images are named
/// scene_NNNNN.png.
SynthCorpus generate_synthetic_corpus(const SynthConfig& cfg, int count, std::uint64_t seed);

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

} // namespace usis
