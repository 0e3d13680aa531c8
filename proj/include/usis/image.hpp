#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace usis {

/// 8-bit RGB image, interleaved row-major (HWC).
struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;

    RgbImage() = default;
    RgbImage(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, 0) {}

    std::uint8_t at(int row, int col, int channel) const
    {
        return data[(static_cast<std::size_t>(row) * width + col) * 3 + channel];
    }
    std::uint8_t& at(int row, int col, int channel)
    {
        return data[(static_cast<std::size_t>(row) * width + col) * 3 + channel];
    }
    std::array<std::uint8_t, 3> pixel(int row, int col) const
    {
        const auto* p = &data[(static_cast<std::size_t>(row) * width + col) * 3];
        return {p[0], p[1], p[2]};
    }
    bool empty() const { return height == 0 || width == 0; }
    bool operator==(const RgbImage&) const = default;
};

/// Reads PNG or JPEG. Throws IoError when the file cannot be decoded.
RgbImage read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RgbImage& image);

} // namespace usis
