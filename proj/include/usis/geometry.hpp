// geometry.hpp
//
// Mask representations (binary grid, polygon, uncompressed run-length) and
// the IoU / box primitives the rest of the toolkit builds on.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

namespace usis {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

/// Closed polygon in continuous pixel coordinates (pixel (c, r) covers
/// [c, c+1) x [r, r+1), so its center is (c + 0.5, r + 0.5)).
struct Polygon {
    std::vector<Point> vertices;
};

/// Axis-aligned box, half-open in pixel units: a single pixel at column 2,
/// row 3 is (2, 3, 3, 4).
struct Box {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 0.0;
    double y_max = 0.0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const;
    bool operator==(const Box&) const = default;
};

class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(int height, int width);
    BinaryMask(int height, int width, std::vector<std::uint8_t> bits);

    int height() const { return height_; }
    int width() const { return width_; }
    bool empty_shape() const { return height_ == 0 || width_ == 0; }

    bool at(int row, int col) const { return bits_[index(row, col)] != 0; }
    void set(int row, int col, bool value = true) { bits_[index(row, col)] = value ? 1 : 0; }

    std::span<const std::uint8_t> bits() const { return bits_; }
    std::span<std::uint8_t> bits() { return bits_; }

    std::int64_t area() const;
    bool same_shape(const BinaryMask& other) const
    {
        return height_ == other.height_ && width_ == other.width_;
    }

    bool operator==(const BinaryMask&) const = default;

private:
    std::size_t index(int row, int col) const
    {
        return static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) +
               static_cast<std::size_t>(col);
    }

    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint8_t> bits_;
};

/// COCO uncompressed RLE: column-major scan, alternating runs starting with
/// a (possibly empty) run of zeros.
struct RunLength {
    int height = 0;
    int width = 0;
    std::vector<std::uint32_t> counts;

    bool operator==(const RunLength&) const = default;
};

/// Sets every pixel whose center lies inside the polygon (even-odd rule).
BinaryMask rasterize_polygon(const Polygon& poly, int height, int width);

/// Union of several polygons (a COCO segmentation may hold more than one).
BinaryMask rasterize_polygons(std::span<const Polygon> polys, int height, int width);

double mask_iou(const BinaryMask& a, const BinaryMask& b);

/// Number of pixels set in both masks. Shapes must agree.
std::int64_t mask_intersection(const BinaryMask& a, const BinaryMask& b);

RunLength encode_rle(const BinaryMask& mask);
BinaryMask decode_rle(const RunLength& rle);

Box bbox_from_mask(const BinaryMask& mask);

double box_iou(const Box& a, const Box& b);

/// Nearest-neighbor resample; target pixel (r, c) reads source pixel
/// floor((r + 0.5) * src_h / dst_h), likewise for columns.
BinaryMask resize_nearest(const BinaryMask& mask, int height, int width);

nlohmann::json rle_to_json(const RunLength& rle);
RunLength rle_from_json(const nlohmann::json& j);

} // namespace usis
