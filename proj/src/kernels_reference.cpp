#include <algorithm>

#include "usis/error.hpp"
#include "usis/kernels.hpp"

namespace usis::kernels::reference {

std::int64_t count_set(std::span<const std::uint8_t> bits)
{
    std::int64_t total = 0;
    for (auto b : bits) {
        total += b != 0 ? 1 : 0;
    }
    return total;
}

OverlapCounts count_overlap(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b)
{
    if (a.size() != b.size()) {
        throw ShapeError("count_overlap: size mismatch");
    }
    OverlapCounts out;
    for (std::size_t i = 0; i < a.size(); ++i) {
        out.intersection += (a[i] && b[i]) ? 1 : 0;
        out.union_ += (a[i] || b[i]) ? 1 : 0;
    }
    return out;
}

void gemm(Trans ta, Trans tb, int m, int n, int k, std::span<const double> a,
          std::span<const double> b, std::span<double> c, bool accumulate)
{
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) {
                const double av = ta == Trans::No ? a[static_cast<std::size_t>(i) * k + p]
                                                  : a[static_cast<std::size_t>(p) * m + i];
                const double bv = tb == Trans::No ? b[static_cast<std::size_t>(p) * n + j]
                                                  : b[static_cast<std::size_t>(j) * k + p];
                acc += av * bv;
            }
            auto& out = c[static_cast<std::size_t>(i) * n + j];
            out = accumulate ? out + acc : acc;
        }
    }
}

void conv2d_forward(const ConvShape& s, std::span<const double> x, std::span<const double> w,
                    std::span<const double> bias, std::span<double> y)
{
    const int ho = s.out_height();
    const int wo = s.out_width();
    for (int b = 0; b < s.batch; ++b) {
        for (int co = 0; co < s.out_channels; ++co) {
            for (int oy = 0; oy < ho; ++oy) {
                for (int ox = 0; ox < wo; ++ox) {
                    double acc = bias.empty() ? 0.0 : bias[co];
                    for (int ci = 0; ci < s.in_channels; ++ci) {
                        for (int ky = 0; ky < s.kernel; ++ky) {
                            for (int kx = 0; kx < s.kernel; ++kx) {
                                const int iy = oy + ky - s.pad;
                                const int ix = ox + kx - s.pad;
                                if (iy < 0 || iy >= s.height || ix < 0 || ix >= s.width) {
                                    continue;
                                }
                                acc += x[((static_cast<std::size_t>(b) * s.in_channels + ci) * s.height + iy) * s.width + ix] *
                                       w[((static_cast<std::size_t>(co) * s.in_channels + ci) * s.kernel + ky) * s.kernel + kx];
                            }
                        }
                    }
                    y[((static_cast<std::size_t>(b) * s.out_channels + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
}

void conv2d_backward_input(const ConvShape& s, std::span<const double> dy,
                           std::span<const double> w, std::span<double> dx)
{
    const int ho = s.out_height();
    const int wo = s.out_width();
    for (int b = 0; b < s.batch; ++b) {
        for (int co = 0; co < s.out_channels; ++co) {
            for (int oy = 0; oy < ho; ++oy) {
                for (int ox = 0; ox < wo; ++ox) {
                    const double g = dy[((static_cast<std::size_t>(b) * s.out_channels + co) * ho + oy) * wo + ox];
                    for (int ci = 0; ci < s.in_channels; ++ci) {
                        for (int ky = 0; ky < s.kernel; ++ky) {
                            for (int kx = 0; kx < s.kernel; ++kx) {
                                const int iy = oy + ky - s.pad;
                                const int ix = ox + kx - s.pad;
                                if (iy < 0 || iy >= s.height || ix < 0 || ix >= s.width) {
                                    continue;
                                }
                                dx[((static_cast<std::size_t>(b) * s.in_channels + ci) * s.height + iy) * s.width + ix] +=
                                    g * w[((static_cast<std::size_t>(co) * s.in_channels + ci) * s.kernel + ky) * s.kernel + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv2d_backward_weight(const ConvShape& s, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw,
                            std::span<double> dbias)
{
    const int ho = s.out_height();
    const int wo = s.out_width();
    for (int b = 0; b < s.batch; ++b) {
        for (int co = 0; co < s.out_channels; ++co) {
            for (int oy = 0; oy < ho; ++oy) {
                for (int ox = 0; ox < wo; ++ox) {
                    const double g = dy[((static_cast<std::size_t>(b) * s.out_channels + co) * ho + oy) * wo + ox];
                    if (!dbias.empty()) {
                        dbias[co] += g;
                    }
                    for (int ci = 0; ci < s.in_channels; ++ci) {
                        for (int ky = 0; ky < s.kernel; ++ky) {
                            for (int kx = 0; kx < s.kernel; ++kx) {
                                const int iy = oy + ky - s.pad;
                                const int ix = ox + kx - s.pad;
                                if (iy < 0 || iy >= s.height || ix < 0 || ix >= s.width) {
                                    continue;
                                }
                                dw[((static_cast<std::size_t>(co) * s.in_channels + ci) * s.kernel + ky) * s.kernel + kx] +=
                                    g * x[((static_cast<std::size_t>(b) * s.in_channels + ci) * s.height + iy) * s.width + ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

namespace {

std::size_t up_index(const UpsampleShape& s, int b, int co, int y, int x)
{
    const int ho = s.height * s.factor;
    const int wo = s.width * s.factor;
    return ((static_cast<std::size_t>(b) * s.out_channels + co) * ho + y) * wo + x;
}

std::size_t in_index(const UpsampleShape& s, int b, int ci, int y, int x)
{
    return ((static_cast<std::size_t>(b) * s.in_channels + ci) * s.height + y) * s.width + x;
}

std::size_t w_index(const UpsampleShape& s, int ci, int co, int i, int j)
{
    return ((static_cast<std::size_t>(ci) * s.out_channels + co) * s.factor + i) * s.factor + j;
}

} // namespace

void upsample_forward(const UpsampleShape& s, std::span<const double> x, std::span<const double> w,
                      std::span<const double> bias, std::span<double> y)
{
    const int f = s.factor;
    for (int b = 0; b < s.batch; ++b) {
        for (int co = 0; co < s.out_channels; ++co) {
            for (int oy = 0; oy < s.height * f; ++oy) {
                for (int ox = 0; ox < s.width * f; ++ox) {
                    double acc = bias.empty() ? 0.0 : bias[co];
                    for (int ci = 0; ci < s.in_channels; ++ci) {
                        acc += x[in_index(s, b, ci, oy / f, ox / f)] * w[w_index(s, ci, co, oy % f, ox % f)];
                    }
                    y[up_index(s, b, co, oy, ox)] = acc;
                }
            }
        }
    }
}

void upsample_backward_input(const UpsampleShape& s, std::span<const double> dy,
                             std::span<const double> w, std::span<double> dx)
{
    const int f = s.factor;
    for (int b = 0; b < s.batch; ++b) {
        for (int co = 0; co < s.out_channels; ++co) {
            for (int oy = 0; oy < s.height * f; ++oy) {
                for (int ox = 0; ox < s.width * f; ++ox) {
                    const double g = dy[up_index(s, b, co, oy, ox)];
                    for (int ci = 0; ci < s.in_channels; ++ci) {
                        dx[in_index(s, b, ci, oy / f, ox / f)] += g * w[w_index(s, ci, co, oy % f, ox % f)];
                    }
                }
            }
        }
    }
}

void upsample_backward_weight(const UpsampleShape& s, std::span<const double> x,
                              std::span<const double> dy, std::span<double> dw,
                              std::span<double> dbias)
{
    const int f = s.factor;
    for (int b = 0; b < s.batch; ++b) {
        for (int co = 0; co < s.out_channels; ++co) {
            for (int oy = 0; oy < s.height * f; ++oy) {
                for (int ox = 0; ox < s.width * f; ++ox) {
                    const double g = dy[up_index(s, b, co, oy, ox)];
                    if (!dbias.empty()) {
                        dbias[co] += g;
                    }
                    for (int ci = 0; ci < s.in_channels; ++ci) {
                        dw[w_index(s, ci, co, oy % f, ox % f)] += g * x[in_index(s, b, ci, oy / f, ox / f)];
                    }
                }
            }
        }
    }
}

} // namespace usis::kernels::reference
