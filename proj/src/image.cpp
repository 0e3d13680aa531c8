#include "usis/image.hpp"

#include <opencv2/imgcodecs.hpp>

#include "usis/error.hpp"

namespace usis {

RgbImage read_image(const std::filesystem::path& path)
{
    const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) {
        throw IoError("cannot read image " + path.string());
    }
    RgbImage img(bgr.rows, bgr.cols);
    for (int r = 0; r < bgr.rows; ++r) {
        const auto* row = bgr.ptr<cv::Vec3b>(r);
        for (int c = 0; c < bgr.cols; ++c) {
            img.at(r, c, 0) = row[c][2];
            img.at(r, c, 1) = row[c][1];
            img.at(r, c, 2) = row[c][0];
        }
    }
    return img;
}

void write_png(const std::filesystem::path& path, const RgbImage& image)
{
    cv::Mat bgr(image.height, image.width, CV_8UC3);
    for (int r = 0; r < image.height; ++r) {
        auto* row = bgr.ptr<cv::Vec3b>(r);
        for (int c = 0; c < image.width; ++c) {
            row[c] = cv::Vec3b(image.at(r, c, 2), image.at(r, c, 1), image.at(r, c, 0));
        }
    }
    if (!cv::imwrite(path.string(), bgr)) {
        throw IoError("cannot write image " + path.string());
    }
}

} // namespace usis
