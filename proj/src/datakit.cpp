#include "usis/datakit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <stdexcept>
#include <unordered_set>

#include "usis/error.hpp"
#include "usis/random.hpp"

namespace usis {

const std::vector<Category>& underwater_categories()
{
    static const std::vector<Category> categories{
        {1, "fish"},         {2, "reefs"},  {3, "aquatic plants"}, {4, "wrecks/ruins"},
        {5, "human divers"}, {6, "robots"}, {7, "sea-floor"},
    };
    return categories;
}

BinaryMask Segmentation::rasterize(int height, int width) const
{
    if (rle) {
        if (rle->height != height || rle->width != width) {
            throw ShapeError("RLE size " + std::to_string(rle->height) + "x" + std::to_string(rle->width) +
                             " does not match image " + std::to_string(height) + "x" + std::to_string(width));
        }
        return decode_rle(*rle);
    }
    return rasterize_polygons(polygons, height, width);
}

std::string to_string(SplitTag tag)
{
    switch (tag) {
    case SplitTag::Train:
        return "train";
    case SplitTag::Val:
        return "val";
    case SplitTag::Test:
        return "test";
    case SplitTag::None:
        break;
    }
    return "none";
}

namespace {

SplitTag split_from_string(const std::string& s)
{
    if (s == "train") {
        return SplitTag::Train;
    }
    if (s == "val") {
        return SplitTag::Val;
    }
    if (s == "test") {
        return SplitTag::Test;
    }
    return SplitTag::None;
}

} // namespace

Segmentation parse_segmentation(const nlohmann::json& j)
{
    Segmentation seg;
    if (j.is_object()) {
        seg.rle = rle_from_json(j);
        return seg;
    }
    if (!j.is_array()) {
        throw ParseError("segmentation must be a polygon list or an RLE object");
    }
    for (const auto& flat : j) {
        if (!flat.is_array() || flat.size() % 2 != 0) {
            throw ParseError("polygon must be a flat [x0, y0, x1, y1, ...] list");
        }
        Polygon poly;
        for (std::size_t i = 0; i < flat.size(); i += 2) {
            poly.vertices.push_back({flat[i].get<double>(), flat[i + 1].get<double>()});
        }
        seg.polygons.push_back(std::move(poly));
    }
    return seg;
}

nlohmann::json segmentation_json(const Segmentation& seg)
{
    if (seg.rle) {
        return rle_to_json(*seg.rle);
    }
    auto out = nlohmann::json::array();
    for (const auto& poly : seg.polygons) {
        auto flat = nlohmann::json::array();
        for (const auto& v : poly.vertices) {
            flat.push_back(v.x);
            flat.push_back(v.y);
        }
        out.push_back(std::move(flat));
    }
    return out;
}

const ImageRecord* Dataset::find_image(std::int64_t id) const
{
    for (const auto& img : images) {
        if (img.id == id) {
            return &img;
        }
    }
    return nullptr;
}

std::vector<const InstanceAnnotation*> Dataset::annotations_for(std::int64_t image_id) const
{
    std::vector<const InstanceAnnotation*> out;
    for (const auto& a : annotations) {
        if (a.image_id == image_id) {
            out.push_back(&a);
        }
    }
    return out;
}

Dataset parse_coco(const nlohmann::json& j)
{
    Dataset d;
    try {
        if (!j.is_object()) {
            throw ParseError("COCO annotation file must be a JSON object");
        }
        if (j.contains("categories") && !j["categories"].empty()) {
            for (const auto& c : j["categories"]) {
                d.categories.push_back({c.at("id").get<int>(), c.value("name", std::string{})});
            }
        } else {
            d.categories = underwater_categories();
        }
        if (j.contains("split")) {
            d.split = split_from_string(j["split"].get<std::string>());
        }
        std::map<std::int64_t, std::size_t> image_index;
        for (const auto& im : j.value("images", nlohmann::json::array())) {
            ImageRecord rec;
            rec.id = im.at("id").get<std::int64_t>();
            rec.file_name = im.value("file_name", std::string{});
            rec.height = im.at("height").get<int>();
            rec.width = im.at("width").get<int>();
            if (rec.height <= 0 || rec.width <= 0) {
                throw ParseError("image " + std::to_string(rec.id) + " has non-positive size");
            }
            if (!image_index.emplace(rec.id, d.images.size()).second) {
                throw IntegrityError("duplicate image id " + std::to_string(rec.id));
            }
            d.images.push_back(std::move(rec));
        }
        std::unordered_set<int> category_ids;
        for (const auto& c : d.categories) {
            category_ids.insert(c.id);
        }
        for (const auto& a : j.value("annotations", nlohmann::json::array())) {
            InstanceAnnotation ann;
            ann.id = a.at("id").get<std::int64_t>();
            ann.image_id = a.at("image_id").get<std::int64_t>();
            ann.category_id = a.at("category_id").get<int>();
            if (!category_ids.contains(ann.category_id)) {
                throw IntegrityError("annotation " + std::to_string(ann.id) + " cites unknown category " +
                                     std::to_string(ann.category_id));
            }
            const auto it = image_index.find(ann.image_id);
            if (it == image_index.end()) {
                throw IntegrityError("annotation " + std::to_string(ann.id) + " cites unknown image " +
                                     std::to_string(ann.image_id));
            }
            const auto& img = d.images[it->second];
            ann.segmentation = parse_segmentation(a.at("segmentation"));
            const BinaryMask mask = ann.segmentation.rasterize(img.height, img.width);
            const auto raster_area = static_cast<double>(mask.area());
            if (a.contains("area")) {
                ann.area = a["area"].get<double>();
                if (std::abs(ann.area - raster_area) > 1.0) {
                    d.warnings.push_back("annotation " + std::to_string(ann.id) + ": stored area " +
                                         std::to_string(ann.area) + " differs from rasterized area " +
                                         std::to_string(raster_area) + "; using rasterized value");
                    ann.area = raster_area;
                }
            } else {
                ann.area = raster_area;
            }
            if (a.contains("bbox")) {
                const auto& b = a["bbox"];
                const double x = b.at(0).get<double>();
                const double y = b.at(1).get<double>();
                ann.box = {x, y, x + b.at(2).get<double>(), y + b.at(3).get<double>()};
            } else if (mask.area() > 0) {
                ann.box = bbox_from_mask(mask);
            }
            d.annotations.push_back(std::move(ann));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed COCO annotation: ") + e.what());
    }
    return d;
}

Dataset load_coco(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return parse_coco(j);
}

nlohmann::json to_coco_json(const Dataset& d)
{
    nlohmann::json j;
    j["schema_version"] = 1;
    j["split"] = to_string(d.split);
    j["categories"] = nlohmann::json::array();
    for (const auto& c : d.categories) {
        j["categories"].push_back({{"id", c.id}, {"name", c.name}});
    }
    j["images"] = nlohmann::json::array();
    for (const auto& im : d.images) {
        j["images"].push_back({{"id", im.id}, {"file_name", im.file_name}, {"height", im.height}, {"width", im.width}});
    }
    j["annotations"] = nlohmann::json::array();
    for (const auto& a : d.annotations) {
        j["annotations"].push_back({
            {"id", a.id},
            {"image_id", a.image_id},
            {"category_id", a.category_id},
            {"segmentation", segmentation_json(a.segmentation)},
            {"bbox", {a.box.x_min, a.box.y_min, a.box.width(), a.box.height()}},
            {"area", a.area},
            {"iscrowd", 0},
        });
    }
    return j;
}

void save_coco(const Dataset& d, const std::filesystem::path& path)
{
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << to_coco_json(d).dump(1) << '\n';
}

DatasetSplits split_dataset(const Dataset& d, const SplitRatios& ratios, std::uint64_t seed)
{
    if (!(ratios.train > 0.0 && ratios.val > 0.0 && ratios.test > 0.0)) {
        throw std::invalid_argument("split ratios must be positive");
    }
    if (d.images.empty()) {
        throw std::invalid_argument("cannot split an empty dataset");
    }
    const std::size_t n = d.images.size();
    const double total = ratios.train + ratios.val + ratios.test;
    const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios.val / total));
    const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios.test / total));

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    Rng rng(seed);
    rng.shuffle(order.begin(), order.end());

    // position in `order` -> which split
    std::vector<SplitTag> assignment(n, SplitTag::Train);
    for (std::size_t k = 0; k < n_val; ++k) {
        assignment[order[k]] = SplitTag::Val;
    }
    for (std::size_t k = n_val; k < n_val + n_test; ++k) {
        assignment[order[k]] = SplitTag::Test;
    }

    DatasetSplits out;
    out.train.split = SplitTag::Train;
    out.val.split = SplitTag::Val;
    out.test.split = SplitTag::Test;
    std::map<std::int64_t, Dataset*> owner;
    for (auto* part : {&out.train, &out.val, &out.test}) {
        part->categories = d.categories;
    }
    for (std::size_t i = 0; i < n; ++i) {
        Dataset* dst = assignment[i] == SplitTag::Val ? &out.val : assignment[i] == SplitTag::Test ? &out.test : &out.train;
        dst->images.push_back(d.images[i]);
        owner[d.images[i].id] = dst;
    }
    for (const auto& a : d.annotations) {
        owner.at(a.image_id)->annotations.push_back(a);
    }
    return out;
}

void SynthConfig::validate() const
{
    if (height <= 0 || width <= 0) {
        throw std::invalid_argument("synthetic image size must be positive");
    }
    if (min_instances < 0 || max_instances < min_instances) {
        throw std::invalid_argument("invalid synthetic instance count range");
    }
    if (shapes.empty()) {
        throw std::invalid_argument("synthetic shape vocabulary is empty");
    }
    for (double a : attenuation) {
        if (!(a > 0.0 && a <= 1.0)) {
            throw std::invalid_argument("attenuation factors must lie in (0, 1]");
        }
    }
    if (attenuation[0] > attenuation[1] || attenuation[0] > attenuation[2]) {
        throw std::invalid_argument("red attenuation must not exceed green or blue attenuation");
    }
    if (min_extent < 2 || max_extent < min_extent) {
        throw std::invalid_argument("invalid synthetic extent range");
    }
    if (noise < 0.0) {
        throw std::invalid_argument("noise level must be non-negative");
    }
}

namespace {

struct ShapeVariant {
    int category;
    ShapeKind kind;
    std::array<double, 3> color;
};

// Shape vocabulary mapped onto the taxonomy (fixed, arbitrary).
const std::array<ShapeVariant, 7>& variants()
{
    static const std::array<ShapeVariant, 7> table{{
        {1, ShapeKind::Ellipse, {235, 150, 40}},     // fish: wide ellipse
        {2, ShapeKind::PolygonBlob, {215, 80, 130}}, // reefs: irregular blob
        {3, ShapeKind::Ellipse, {70, 210, 70}},      // aquatic plants: tall ellipse
        {4, ShapeKind::PolygonBlob, {140, 105, 70}}, // wrecks/ruins: tilted rectangle
        {5, ShapeKind::PolygonBlob, {245, 235, 60}}, // human divers: triangle
        {6, ShapeKind::Ellipse, {240, 240, 240}},    // robots: circle
        {7, ShapeKind::PolygonBlob, {200, 175, 120}},// sea-floor: flat trapezoid
    }};
    return table;
}

Polygon make_shape(int category, double cx, double cy, double extent, Rng& rng)
{
    Polygon poly;
    const double r = extent / 2.0;
    const double tilt = rng.uniform(-0.4, 0.4);
    auto rotated = [&](double dx, double dy) {
        const double c = std::cos(tilt);
        const double s = std::sin(tilt);
        return Point{cx + c * dx - s * dy, cy + s * dx + c * dy};
    };
    auto ellipse = [&](double rx, double ry) {
        constexpr int kSegments = 32;
        for (int i = 0; i < kSegments; ++i) {
            const double t = 2.0 * std::numbers::pi * i / kSegments;
            poly.vertices.push_back(rotated(rx * std::cos(t), ry * std::sin(t)));
        }
    };
    switch (category) {
    case 1:
        ellipse(r, r * 0.5);
        break;
    case 3:
        ellipse(r * 0.4, r);
        break;
    case 6:
        ellipse(r * 0.8, r * 0.8);
        break;
    case 2: {
        constexpr int kVertices = 12;
        for (int i = 0; i < kVertices; ++i) {
            const double t = 2.0 * std::numbers::pi * i / kVertices;
            const double rr = r * rng.uniform(0.6, 1.0);
            poly.vertices.push_back(rotated(rr * std::cos(t), rr * std::sin(t)));
        }
        break;
    }
    case 4:
        poly.vertices = {rotated(-r, -0.6 * r), rotated(r, -0.6 * r), rotated(r, 0.6 * r), rotated(-r, 0.6 * r)};
        break;
    case 5:
        poly.vertices = {rotated(0.0, -r), rotated(0.9 * r, 0.8 * r), rotated(-0.9 * r, 0.8 * r)};
        break;
    default:
        poly.vertices = {rotated(-0.7 * r, -0.35 * r), rotated(0.7 * r, -0.35 * r), rotated(r, 0.35 * r),
                         rotated(-r, 0.35 * r)};
        break;
    }
    return poly;
}

} // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index)
{
    // splitmix64 finalizer over the combined value
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

SynthScene generate_synthetic_scene(const SynthConfig& cfg, std::uint64_t seed)
{
    cfg.validate();
    Rng rng(seed);
    const int h = cfg.height;
    const int w = cfg.width;

    // Unattenuated radiance, filled background first.
    std::vector<double> raw(static_cast<std::size_t>(h) * w * 3);
    const std::array<double, 3> water{rng.uniform(60, 90), rng.uniform(140, 170), rng.uniform(170, 210)};
    for (int r = 0; r < h; ++r) {
        const double depth = 1.0 - 0.35 * r / std::max(1, h - 1);
        for (int c = 0; c < w; ++c) {
            for (int ch = 0; ch < 3; ++ch) {
                raw[(static_cast<std::size_t>(r) * w + c) * 3 + ch] = water[ch] * depth;
            }
        }
    }

    std::vector<const ShapeVariant*> allowed;
    for (const auto& v : variants()) {
        if (std::find(cfg.shapes.begin(), cfg.shapes.end(), v.kind) != cfg.shapes.end()) {
            allowed.push_back(&v);
        }
    }

    struct Drawn {
        int category;
        BinaryMask mask;
    };
    std::vector<Drawn> drawn;
    const int count = rng.uniform_int(cfg.min_instances, cfg.max_instances);
    for (int i = 0; i < count; ++i) {
        const ShapeVariant& v = *allowed[rng.below(allowed.size())];
        const double extent = rng.uniform(cfg.min_extent, cfg.max_extent);
        const double margin = extent / 3.0;
        const double cx = rng.uniform(margin, std::max(margin, w - margin));
        const double cy = rng.uniform(margin, std::max(margin, h - margin));
        const Polygon poly = make_shape(v.category, cx, cy, extent, rng);
        BinaryMask mask = rasterize_polygon(poly, h, w);
        std::array<double, 3> color{};
        for (int ch = 0; ch < 3; ++ch) {
            color[ch] = std::clamp(v.color[ch] + rng.uniform(-20.0, 20.0), 0.0, 255.0);
        }
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                if (!mask.at(r, c)) {
                    continue;
                }
                const double shade = 1.0 - 0.15 * (r - cy) / std::max(1.0, extent);
                for (int ch = 0; ch < 3; ++ch) {
                    raw[(static_cast<std::size_t>(r) * w + c) * 3 + ch] = color[ch] * shade;
                }
                // Later instances occlude earlier ones.
                for (auto& prev : drawn) {
                    prev.mask.set(r, c, false);
                }
            }
        }
        drawn.push_back({v.category, std::move(mask)});
    }

    SynthScene scene;
    scene.image = RgbImage(h, w);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            for (int ch = 0; ch < 3; ++ch) {
                const double v = raw[(static_cast<std::size_t>(r) * w + c) * 3 + ch] * cfg.attenuation[ch] +
                                 cfg.noise * rng.normal();
                scene.image.at(r, c, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    std::int64_t next_id = 1;
    for (auto& d : drawn) {
        const auto area = d.mask.area();
        if (area < std::max(1, cfg.min_area)) {
            continue;
        }
        InstanceAnnotation ann;
        ann.id = next_id++;
        ann.category_id = d.category;
        ann.box = bbox_from_mask(d.mask);
        ann.area = static_cast<double>(area);
        ann.segmentation.rle = encode_rle(d.mask);
        scene.annotations.push_back(std::move(ann));
    }
    return scene;
}

SynthCorpus generate_synthetic_corpus(const SynthConfig& cfg, int count, std::uint64_t seed)
{
    SynthCorpus corpus;
    corpus.dataset.categories = underwater_categories();
    std::int64_t ann_id = 1;
    for (int i = 0; i < count; ++i) {
        SynthScene scene = generate_synthetic_scene(cfg, mix_seed(seed, static_cast<std::uint64_t>(i)));
        ImageRecord rec;
        rec.id = i + 1;
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%05d.png", i);
        rec.file_name = name;
        rec.height = cfg.height;
        rec.width = cfg.width;
        for (auto& a : scene.annotations) {
            a.id = ann_id++;
            a.image_id = rec.id;
            corpus.dataset.annotations.push_back(std::move(a));
        }
        corpus.dataset.images.push_back(std::move(rec));
        corpus.images.push_back(std::move(scene.image));
    }
    return corpus;
}

} // namespace usis
