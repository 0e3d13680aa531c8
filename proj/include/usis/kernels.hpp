// kernels.hpp
//
// Dense numeric kernels behind the tensor ops and mask geometry. The
// functions in `usis::kernels` are OpenMP-parallel; `usis::kernels::reference`
// holds straightforward serial versions of the same contracts, kept for
// equivalence tests and the benchmark.
//
// All arrays are dense row-major. Every parallel kernel partitions output
// elements across threads, so results do not depend on the thread count.

#pragma once

#include <cstdint>
#include <span>

namespace usis::kernels {

enum class Trans { No, Yes };

struct OverlapCounts {
    std::int64_t intersection = 0;
    std::int64_t union_ = 0;
};

/// Geometry of a stride-1 square convolution with symmetric zero padding.
struct ConvShape {
    int batch = 1;
    int in_channels = 0;
    int out_channels = 0;
    int height = 0;
    int width = 0;
    int kernel = 1;
    int pad = 0;

    int out_height() const { return height + 2 * pad - kernel + 1; }
    int out_width() const { return width + 2 * pad - kernel + 1; }
};

/// Geometry of a transposed convolution whose kernel equals its stride
/// (non-overlapping upsampling by `factor`).
struct UpsampleShape {
    int batch = 1;
    int in_channels = 0;
    int out_channels = 0;
    int height = 0;
    int width = 0;
    int factor = 2;
};

std::int64_t count_set(std::span<const std::uint8_t> bits);
OverlapCounts count_overlap(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

/// c = op(a) * op(b) (+ c when accumulate). op(a) is m x k, op(b) is k x n.
void gemm(Trans ta, Trans tb, int m, int n, int k, std::span<const double> a,
          std::span<const double> b, std::span<double> c, bool accumulate = false);

/// x: [B, Cin, H, W], w: [Cout, Cin, k, k], bias: [Cout] or empty.
void conv2d_forward(const ConvShape& s, std::span<const double> x, std::span<const double> w,
                    std::span<const double> bias, std::span<double> y);
/// Accumulates into dx.
void conv2d_backward_input(const ConvShape& s, std::span<const double> dy,
                           std::span<const double> w, std::span<double> dx);
/// Accumulates into dw and dbias (dbias may be empty).
void conv2d_backward_weight(const ConvShape& s, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw,
                            std::span<double> dbias);

/// x: [B, Cin, H, W], w: [Cin, Cout, f, f], bias: [Cout] or empty,
/// y: [B, Cout, H*f, W*f].
void upsample_forward(const UpsampleShape& s, std::span<const double> x, std::span<const double> w,
                      std::span<const double> bias, std::span<double> y);
void upsample_backward_input(const UpsampleShape& s, std::span<const double> dy,
                             std::span<const double> w, std::span<double> dx);
void upsample_backward_weight(const UpsampleShape& s, std::span<const double> x,
                              std::span<const double> dy, std::span<double> dw,
                              std::span<double> dbias);

namespace reference {

std::int64_t count_set(std::span<const std::uint8_t> bits);
OverlapCounts count_overlap(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);
void gemm(Trans ta, Trans tb, int m, int n, int k, std::span<const double> a,
          std::span<const double> b, std::span<double> c, bool accumulate = false);
void conv2d_forward(const ConvShape& s, std::span<const double> x, std::span<const double> w,
                    std::span<const double> bias, std::span<double> y);
void conv2d_backward_input(const ConvShape& s, std::span<const double> dy,
                           std::span<const double> w, std::span<double> dx);
void conv2d_backward_weight(const ConvShape& s, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw,
                            std::span<double> dbias);
void upsample_forward(const UpsampleShape& s, std::span<const double> x, std::span<const double> w,
                      std::span<const double> bias, std::span<double> y);
void upsample_backward_input(const UpsampleShape& s, std::span<const double> dy,
                             std::span<const double> w, std::span<double> dx);
void upsample_backward_weight(const UpsampleShape& s, std::span<const double> x,
                              std::span<const double> dy, std::span<double> dw,
                              std::span<double> dbias);

} // namespace reference

/// Worker count for the parallel kernels; reads USIS_NUM_WORKERS once.
void configure_workers_from_env();

} // namespace usis::kernels
