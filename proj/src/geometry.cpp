#include "usis/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "usis/error.hpp"
#include "usis/kernels.hpp"

namespace usis {

double Box::area() const
{
    return std::max(0.0, width()) * std::max(0.0, height());
}

BinaryMask::BinaryMask(int height, int width)
    : height_(height), width_(width),
      bits_(static_cast<std::size_t>(std::max(height, 0)) * static_cast<std::size_t>(std::max(width, 0)), 0)
{
    if (height < 0 || width < 0) {
        throw ShapeError("BinaryMask: negative dimensions");
    }
}

BinaryMask::BinaryMask(int height, int width, std::vector<std::uint8_t> bits)
    : height_(height), width_(width), bits_(std::move(bits))
{
    if (height < 0 || width < 0 ||
        bits_.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
        throw ShapeError("BinaryMask: bit count does not match height x width");
    }
    for (auto& b : bits_) {
        b = b ? 1 : 0;
    }
}

std::int64_t BinaryMask::area() const
{
    return kernels::count_set(bits_);
}

namespace {

void check_polygon(const Polygon& poly)
{
    if (poly.vertices.size() < 3) {
        throw DegeneratePolygonError("polygon needs at least 3 vertices, got " +
                                     std::to_string(poly.vertices.size()));
    }
    for (const auto& v : poly.vertices) {
        if (!std::isfinite(v.x) || !std::isfinite(v.y)) {
            throw DegeneratePolygonError("polygon vertex is not finite");
        }
    }
}

// Sets the row's pixels whose centers have an odd number of edge crossings
// strictly to their right.
void fill_scanline(const Polygon& poly, int row, std::span<std::uint8_t> out_row,
                   std::vector<double>& xs)
{
    const double py = row + 0.5;
    const auto& v = poly.vertices;
    const std::size_t n = v.size();
    xs.clear();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        if ((v[i].y > py) != (v[j].y > py)) {
            xs.push_back((v[j].x - v[i].x) * (py - v[i].y) / (v[j].y - v[i].y) + v[i].x);
        }
    }
    if (xs.empty()) {
        return;
    }
    std::sort(xs.begin(), xs.end());
    std::size_t idx = 0;
    const int width = static_cast<int>(out_row.size());
    for (int c = 0; c < width; ++c) {
        const double px = c + 0.5;
        while (idx < xs.size() && xs[idx] <= px) {
            ++idx;
        }
        if (((xs.size() - idx) & 1U) != 0U) {
            out_row[c] ^= 1;
        }
    }
}

} // namespace

BinaryMask rasterize_polygon(const Polygon& poly, int height, int width)
{
    return rasterize_polygons(std::span<const Polygon>(&poly, 1), height, width);
}

BinaryMask rasterize_polygons(std::span<const Polygon> polys, int height, int width)
{
    if (height <= 0 || width <= 0) {
        throw ShapeError("rasterize_polygon: height and width must be positive");
    }
    for (const auto& p : polys) {
        check_polygon(p);
    }
    BinaryMask mask(height, width);
    auto bits = mask.bits();
    // Union of polygons: rasterize each into a scratch row and OR it in.
#pragma omp parallel
    {
        std::vector<double> xs;
        std::vector<std::uint8_t> scratch(static_cast<std::size_t>(width));
#pragma omp for schedule(static)
        for (int r = 0; r < height; ++r) {
            auto out_row = bits.subspan(static_cast<std::size_t>(r) * width, width);
            for (const auto& p : polys) {
                std::fill(scratch.begin(), scratch.end(), 0);
                fill_scanline(p, r, scratch, xs);
                for (int c = 0; c < width; ++c) {
                    out_row[c] |= scratch[c];
                }
            }
        }
    }
    return mask;
}

std::int64_t mask_intersection(const BinaryMask& a, const BinaryMask& b)
{
    if (!a.same_shape(b)) {
        throw ShapeError("mask shapes differ");
    }
    return kernels::count_overlap(a.bits(), b.bits()).intersection;
}

double mask_iou(const BinaryMask& a, const BinaryMask& b)
{
    if (!a.same_shape(b)) {
        throw ShapeError("mask_iou: mask shapes differ (" + std::to_string(a.height()) + "x" +
                         std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                         std::to_string(b.width()) + ")");
    }
    const auto ov = kernels::count_overlap(a.bits(), b.bits());
    if (ov.union_ == 0) {
        return 0.0;
    }
    return static_cast<double>(ov.intersection) / static_cast<double>(ov.union_);
}

RunLength encode_rle(const BinaryMask& mask)
{
    RunLength rle{mask.height(), mask.width(), {}};
    std::uint8_t current = 0;
    std::uint32_t run = 0;
    for (int c = 0; c < mask.width(); ++c) {
        for (int r = 0; r < mask.height(); ++r) {
            const std::uint8_t bit = mask.at(r, c) ? 1 : 0;
            if (bit != current) {
                rle.counts.push_back(run);
                run = 0;
                current = bit;
            }
            ++run;
        }
    }
    rle.counts.push_back(run);
    return rle;
}

BinaryMask decode_rle(const RunLength& rle)
{
    if (rle.height < 0 || rle.width < 0) {
        throw CorruptEncodingError("RLE has negative size");
    }
    const std::uint64_t total = static_cast<std::uint64_t>(rle.height) * static_cast<std::uint64_t>(rle.width);
    std::uint64_t sum = 0;
    for (std::size_t i = 0; i < rle.counts.size(); ++i) {
        if (i > 0 && rle.counts[i] == 0) {
            throw CorruptEncodingError("RLE run " + std::to_string(i) + " is empty");
        }
        sum += rle.counts[i];
    }
    if (sum != total) {
        throw CorruptEncodingError("RLE counts sum to " + std::to_string(sum) + ", expected " +
                                   std::to_string(total));
    }
    BinaryMask mask(rle.height, rle.width);
    std::uint64_t pos = 0;
    for (std::size_t i = 0; i < rle.counts.size(); ++i) {
        const bool value = (i & 1U) != 0U;
        for (std::uint32_t k = 0; k < rle.counts[i]; ++k, ++pos) {
            if (value) {
                const int c = static_cast<int>(pos / rle.height);
                const int r = static_cast<int>(pos % rle.height);
                mask.set(r, c);
            }
        }
    }
    return mask;
}

Box bbox_from_mask(const BinaryMask& mask)
{
    int r0 = mask.height(), r1 = -1, c0 = mask.width(), c1 = -1;
    for (int r = 0; r < mask.height(); ++r) {
        for (int c = 0; c < mask.width(); ++c) {
            if (mask.at(r, c)) {
                r0 = std::min(r0, r);
                r1 = std::max(r1, r);
                c0 = std::min(c0, c);
                c1 = std::max(c1, c);
            }
        }
    }
    if (r1 < 0) {
        throw EmptyMaskError("bbox_from_mask: mask has no set pixels");
    }
    return Box{static_cast<double>(c0), static_cast<double>(r0), static_cast<double>(c1 + 1),
               static_cast<double>(r1 + 1)};
}

double box_iou(const Box& a, const Box& b)
{
    const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    if (iw <= 0.0 || ih <= 0.0) {
        return 0.0;
    }
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

BinaryMask resize_nearest(const BinaryMask& mask, int height, int width)
{
    if (height <= 0 || width <= 0 || mask.empty_shape()) {
        throw ShapeError("resize_nearest: empty shape");
    }
    BinaryMask out(height, width);
    for (int r = 0; r < height; ++r) {
        const int sr = std::min(mask.height() - 1,
                                static_cast<int>((r + 0.5) * mask.height() / height));
        for (int c = 0; c < width; ++c) {
            const int sc = std::min(mask.width() - 1,
                                    static_cast<int>((c + 0.5) * mask.width() / width));
            if (mask.at(sr, sc)) {
                out.set(r, c);
            }
        }
    }
    return out;
}

nlohmann::json rle_to_json(const RunLength& rle)
{
    return nlohmann::json{{"size", {rle.height, rle.width}}, {"counts", rle.counts}};
}

RunLength rle_from_json(const nlohmann::json& j)
{
    try {
        const auto& size = j.at("size");
        if (!size.is_array() || size.size() != 2) {
            throw CorruptEncodingError("RLE 'size' must be [height, width]");
        }
        if (j.at("counts").is_string()) {
            throw CorruptEncodingError("compressed RLE strings are not supported");
        }
        RunLength rle;
        rle.height = size[0].get<int>();
        rle.width = size[1].get<int>();
        for (const auto& c : j.at("counts")) {
            const auto v = c.get<std::int64_t>();
            if (v < 0) {
                throw CorruptEncodingError("RLE count is negative");
            }
            rle.counts.push_back(static_cast<std::uint32_t>(v));
        }
        return rle;
    } catch (const nlohmann::json::exception& e) {
        throw CorruptEncodingError(std::string("malformed RLE object: ") + e.what());
    }
}

} // namespace usis
