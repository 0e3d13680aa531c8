#include <omp.h>

#include <algorithm>
#include <cstdlib>
#include <string>
#include <vector>

#include "usis/error.hpp"
#include "usis/kernels.hpp"

namespace usis::kernels {

namespace {

constexpr int kRowBlock = 16;
constexpr int kDepthBlock = 128;
constexpr int kColBlock = 512;

std::vector<double> transposed(std::span<const double> src, int rows, int cols)
{
    std::vector<double> out(static_cast<std::size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            out[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
        }
    }
    return out;
}

// c[m,n] += a[m,k] * b[k,n], all contiguous row-major.
void gemm_nn_accumulate(int m, int n, int k, const double* a, const double* b, double* c)
{
    const int row_blocks = (m + kRowBlock - 1) / kRowBlock;
#pragma omp parallel for schedule(static)
    for (int rb = 0; rb < row_blocks; ++rb) {
        const int i0 = rb * kRowBlock;
        const int i1 = std::min(m, i0 + kRowBlock);
        for (int j0 = 0; j0 < n; j0 += kColBlock) {
            const int j1 = std::min(n, j0 + kColBlock);
            for (int k0 = 0; k0 < k; k0 += kDepthBlock) {
                const int k1 = std::min(k, k0 + kDepthBlock);
                for (int i = i0; i < i1; ++i) {
                    double* crow = c + static_cast<std::size_t>(i) * n;
                    const double* arow = a + static_cast<std::size_t>(i) * k;
                    for (int kk = k0; kk < k1; ++kk) {
                        const double aik = arow[kk];
                        if (aik == 0.0) {
                            continue;
                        }
                        const double* brow = b + static_cast<std::size_t>(kk) * n;
#pragma omp simd
                        for (int j = j0; j < j1; ++j) {
                            crow[j] += aik * brow[j];
                        }
                    }
                }
            }
        }
    }
}

void im2col(const ConvShape& s, const double* x, double* col)
{
    const int ho = s.out_height();
    const int wo = s.out_width();
    const int kk = s.kernel * s.kernel;
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < s.in_channels; ++ci) {
        const double* xc = x + static_cast<std::size_t>(ci) * s.height * s.width;
        for (int ky = 0; ky < s.kernel; ++ky) {
            for (int kx = 0; kx < s.kernel; ++kx) {
                double* dst = col + (static_cast<std::size_t>(ci) * kk + ky * s.kernel + kx) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy + ky - s.pad;
                    double* drow = dst + static_cast<std::size_t>(oy) * wo;
                    if (iy < 0 || iy >= s.height) {
                        std::fill(drow, drow + wo, 0.0);
                        continue;
                    }
                    const double* srow = xc + static_cast<std::size_t>(iy) * s.width;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox + kx - s.pad;
                        drow[ox] = (ix >= 0 && ix < s.width) ? srow[ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_accumulate(const ConvShape& s, const double* col, double* dx)
{
    const int ho = s.out_height();
    const int wo = s.out_width();
    const int kk = s.kernel * s.kernel;
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < s.in_channels; ++ci) {
        double* xc = dx + static_cast<std::size_t>(ci) * s.height * s.width;
        for (int ky = 0; ky < s.kernel; ++ky) {
            for (int kx = 0; kx < s.kernel; ++kx) {
                const double* src = col + (static_cast<std::size_t>(ci) * kk + ky * s.kernel + kx) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy + ky - s.pad;
                    if (iy < 0 || iy >= s.height) {
                        continue;
                    }
                    double* xrow = xc + static_cast<std::size_t>(iy) * s.width;
                    const double* srow = src + static_cast<std::size_t>(oy) * wo;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox + kx - s.pad;
                        if (ix >= 0 && ix < s.width) {
                            xrow[ix] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

void check_conv(const ConvShape& s)
{
    if (s.kernel < 1 || s.pad < 0 || s.out_height() < 1 || s.out_width() < 1) {
        throw ShapeError("conv2d: invalid geometry (kernel " + std::to_string(s.kernel) + ", input " +
                         std::to_string(s.height) + "x" + std::to_string(s.width) + ")");
    }
}

// Gathers dy [Cout, H*f, W*f] of one image into z [H*W, Cout*f*f].
void gather_upsampled(const UpsampleShape& s, const double* dy, double* z)
{
    const int f = s.factor;
    const int ff = f * f;
    const int wo = s.width * f;
    const std::size_t plane = static_cast<std::size_t>(s.height) * f * wo;
#pragma omp parallel for schedule(static)
    for (int h = 0; h < s.height; ++h) {
        for (int w = 0; w < s.width; ++w) {
            double* zrow = z + (static_cast<std::size_t>(h) * s.width + w) * s.out_channels * ff;
            for (int co = 0; co < s.out_channels; ++co) {
                for (int i = 0; i < f; ++i) {
                    for (int j = 0; j < f; ++j) {
                        zrow[co * ff + i * f + j] =
                            dy[co * plane + static_cast<std::size_t>(h * f + i) * wo + (w * f + j)];
                    }
                }
            }
        }
    }
}

} // namespace

std::int64_t count_set(std::span<const std::uint8_t> bits)
{
    std::int64_t total = 0;
    const auto n = static_cast<std::int64_t>(bits.size());
#pragma omp parallel for reduction(+ : total) schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        total += bits[i] != 0 ? 1 : 0;
    }
    return total;
}

OverlapCounts count_overlap(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b)
{
    if (a.size() != b.size()) {
        throw ShapeError("count_overlap: size mismatch");
    }
    std::int64_t inter = 0;
    std::int64_t uni = 0;
    const auto n = static_cast<std::int64_t>(a.size());
    const std::uint8_t* pa = a.data();
    const std::uint8_t* pb = b.data();
#pragma omp parallel for simd reduction(+ : inter, uni) schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        const int x = pa[i] != 0;
        const int y = pb[i] != 0;
        inter += x & y;
        uni += x | y;
    }
    return {inter, uni};
}

void gemm(Trans ta, Trans tb, int m, int n, int k, std::span<const double> a,
          std::span<const double> b, std::span<double> c, bool accumulate)
{
    if (a.size() < static_cast<std::size_t>(m) * k || b.size() < static_cast<std::size_t>(k) * n ||
        c.size() < static_cast<std::size_t>(m) * n) {
        throw ShapeError("gemm: buffer too small for " + std::to_string(m) + "x" + std::to_string(n) +
                         "x" + std::to_string(k));
    }
    if (!accumulate) {
        std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(m) * n, 0.0);
    }
    if (m == 0 || n == 0 || k == 0) {
        return;
    }
    std::vector<double> at;
    std::vector<double> bt;
    const double* pa = a.data();
    const double* pb = b.data();
    if (ta == Trans::Yes) {
        at = transposed(a, k, m);
        pa = at.data();
    }
    if (tb == Trans::Yes) {
        bt = transposed(b, n, k);
        pb = bt.data();
    }
    gemm_nn_accumulate(m, n, k, pa, pb, c.data());
}

void conv2d_forward(const ConvShape& s, std::span<const double> x, std::span<const double> w,
                    std::span<const double> bias, std::span<double> y)
{
    check_conv(s);
    const int ho = s.out_height();
    const int wo = s.out_width();
    const int ckk = s.in_channels * s.kernel * s.kernel;
    const std::size_t in_plane = static_cast<std::size_t>(s.in_channels) * s.height * s.width;
    const std::size_t out_plane = static_cast<std::size_t>(s.out_channels) * ho * wo;
    std::vector<double> col(static_cast<std::size_t>(ckk) * ho * wo);
    for (int b = 0; b < s.batch; ++b) {
        im2col(s, x.data() + b * in_plane, col.data());
        auto yb = y.subspan(b * out_plane, out_plane);
        if (!bias.empty()) {
            for (int co = 0; co < s.out_channels; ++co) {
                std::fill_n(yb.begin() + static_cast<std::ptrdiff_t>(co) * ho * wo, ho * wo, bias[co]);
            }
        }
        gemm(Trans::No, Trans::No, s.out_channels, ho * wo, ckk, w, col, yb, !bias.empty());
    }
}

void conv2d_backward_input(const ConvShape& s, std::span<const double> dy,
                           std::span<const double> w, std::span<double> dx)
{
    check_conv(s);
    const int ho = s.out_height();
    const int wo = s.out_width();
    const int ckk = s.in_channels * s.kernel * s.kernel;
    const std::size_t in_plane = static_cast<std::size_t>(s.in_channels) * s.height * s.width;
    const std::size_t out_plane = static_cast<std::size_t>(s.out_channels) * ho * wo;
    std::vector<double> col(static_cast<std::size_t>(ckk) * ho * wo);
    for (int b = 0; b < s.batch; ++b) {
        gemm(Trans::Yes, Trans::No, ckk, ho * wo, s.out_channels, w, dy.subspan(b * out_plane, out_plane),
             col);
        col2im_accumulate(s, col.data(), dx.data() + b * in_plane);
    }
}

void conv2d_backward_weight(const ConvShape& s, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw,
                            std::span<double> dbias)
{
    check_conv(s);
    const int ho = s.out_height();
    const int wo = s.out_width();
    const int ckk = s.in_channels * s.kernel * s.kernel;
    const std::size_t in_plane = static_cast<std::size_t>(s.in_channels) * s.height * s.width;
    const std::size_t out_plane = static_cast<std::size_t>(s.out_channels) * ho * wo;
    std::vector<double> col(static_cast<std::size_t>(ckk) * ho * wo);
    for (int b = 0; b < s.batch; ++b) {
        im2col(s, x.data() + b * in_plane, col.data());
        const auto dyb = dy.subspan(b * out_plane, out_plane);
        gemm(Trans::No, Trans::Yes, s.out_channels, ckk, ho * wo, dyb, col, dw, true);
        if (!dbias.empty()) {
            for (int co = 0; co < s.out_channels; ++co) {
                double acc = 0.0;
                const double* p = dyb.data() + static_cast<std::size_t>(co) * ho * wo;
                for (int i = 0; i < ho * wo; ++i) {
                    acc += p[i];
                }
                dbias[co] += acc;
            }
        }
    }
}

void upsample_forward(const UpsampleShape& s, std::span<const double> x, std::span<const double> w,
                      std::span<const double> bias, std::span<double> y)
{
    const int f = s.factor;
    const int ff = f * f;
    const int hw = s.height * s.width;
    const int wo = s.width * f;
    const std::size_t in_plane = static_cast<std::size_t>(s.in_channels) * hw;
    const std::size_t plane = static_cast<std::size_t>(s.height) * f * wo;
    const std::size_t out_plane = static_cast<std::size_t>(s.out_channels) * plane;
    std::vector<double> z(static_cast<std::size_t>(hw) * s.out_channels * ff);
    for (int b = 0; b < s.batch; ++b) {
        gemm(Trans::Yes, Trans::No, hw, s.out_channels * ff, s.in_channels,
             x.subspan(b * in_plane, in_plane), w, z);
        double* yb = y.data() + b * out_plane;
#pragma omp parallel for schedule(static)
        for (int co = 0; co < s.out_channels; ++co) {
            const double bco = bias.empty() ? 0.0 : bias[co];
            for (int h = 0; h < s.height; ++h) {
                for (int wi = 0; wi < s.width; ++wi) {
                    const double* zrow = z.data() + (static_cast<std::size_t>(h) * s.width + wi) * s.out_channels * ff;
                    for (int i = 0; i < f; ++i) {
                        for (int j = 0; j < f; ++j) {
                            yb[co * plane + static_cast<std::size_t>(h * f + i) * wo + (wi * f + j)] =
                                zrow[co * ff + i * f + j] + bco;
                        }
                    }
                }
            }
        }
    }
}

void upsample_backward_input(const UpsampleShape& s, std::span<const double> dy,
                             std::span<const double> w, std::span<double> dx)
{
    const int ff = s.factor * s.factor;
    const int hw = s.height * s.width;
    const std::size_t in_plane = static_cast<std::size_t>(s.in_channels) * hw;
    const std::size_t out_plane = static_cast<std::size_t>(s.out_channels) * hw * ff;
    std::vector<double> z(static_cast<std::size_t>(hw) * s.out_channels * ff);
    for (int b = 0; b < s.batch; ++b) {
        gather_upsampled(s, dy.data() + b * out_plane, z.data());
        gemm(Trans::No, Trans::Yes, s.in_channels, hw, s.out_channels * ff, w, z,
             dx.subspan(b * in_plane, in_plane), true);
    }
}

void upsample_backward_weight(const UpsampleShape& s, std::span<const double> x,
                              std::span<const double> dy, std::span<double> dw,
                              std::span<double> dbias)
{
    const int ff = s.factor * s.factor;
    const int hw = s.height * s.width;
    const std::size_t in_plane = static_cast<std::size_t>(s.in_channels) * hw;
    const std::size_t out_plane = static_cast<std::size_t>(s.out_channels) * hw * ff;
    std::vector<double> z(static_cast<std::size_t>(hw) * s.out_channels * ff);
    for (int b = 0; b < s.batch; ++b) {
        gather_upsampled(s, dy.data() + b * out_plane, z.data());
        gemm(Trans::No, Trans::No, s.in_channels, s.out_channels * ff, hw, x.subspan(b * in_plane, in_plane),
             z, dw, true);
        if (!dbias.empty()) {
            for (int co = 0; co < s.out_channels; ++co) {
                double acc = 0.0;
                const double* p = dy.data() + b * out_plane + static_cast<std::size_t>(co) * hw * ff;
                for (int i = 0; i < hw * ff; ++i) {
                    acc += p[i];
                }
                dbias[co] += acc;
            }
        }
    }
}

void configure_workers_from_env()
{
    if (const char* env = std::getenv("USIS_NUM_WORKERS")) {
        const int n = std::atoi(env);
        if (n > 0) {
            omp_set_num_threads(n);
        }
    }
}

} // namespace usis::kernels
