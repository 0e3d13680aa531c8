#include <doctest.h>

#include <vector>

#include "usis/kernels.hpp"
#include "usis/random.hpp"

using namespace usis;
namespace k = usis::kernels;

namespace {

std::vector<double> randv(Rng& rng, std::size_t n)
{
    std::vector<double> v(n);
    for (auto& x : v) {
        x = rng.normal();
    }
    return v;
}

void check_close(const std::vector<double>& a, const std::vector<double>& b)
{
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
    }
}

} // namespace

TEST_SUITE("kernels")
{
    TEST_CASE("gemm matches the serial reference for every transpose")
    {
        Rng rng(1);
        const int m = 7, n = 5, kk = 9;
        for (auto ta : {k::Trans::No, k::Trans::Yes}) {
            for (auto tb : {k::Trans::No, k::Trans::Yes}) {
                const auto a = randv(rng, m * kk);
                const auto b = randv(rng, kk * n);
                auto c1 = randv(rng, m * n);
                auto c2 = c1;
                k::gemm(ta, tb, m, n, kk, a, b, c1, true);
                k::reference::gemm(ta, tb, m, n, kk, a, b, c2, true);
                check_close(c1, c2);
            }
        }
    }

    TEST_CASE("gemm reference on a hand example")
    {
        const std::vector<double> a{1, 2, 3, 4};
        const std::vector<double> b{5, 6, 7, 8};
        std::vector<double> c(4);
        k::reference::gemm(k::Trans::No, k::Trans::No, 2, 2, 2, a, b, c);
        CHECK(c == std::vector<double>{19, 22, 43, 50});
    }

    TEST_CASE("conv2d forward and backward match the reference")
    {
        Rng rng(2);
        k::ConvShape s{2, 3, 4, 6, 5, 3, 1};
        const auto x = randv(rng, 2 * 3 * 6 * 5);
        const auto w = randv(rng, 4 * 3 * 9);
        const auto bias = randv(rng, 4);
        const std::size_t ny = 2 * 4 * s.out_height() * s.out_width();
        std::vector<double> y1(ny), y2(ny);
        k::conv2d_forward(s, x, w, bias, y1);
        k::reference::conv2d_forward(s, x, w, bias, y2);
        check_close(y1, y2);

        const auto dy = randv(rng, ny);
        std::vector<double> dx1(x.size()), dx2(x.size()), dw1(w.size()), dw2(w.size()), db1(4), db2(4);
        k::conv2d_backward_input(s, dy, w, dx1);
        k::reference::conv2d_backward_input(s, dy, w, dx2);
        check_close(dx1, dx2);
        k::conv2d_backward_weight(s, x, dy, dw1, db1);
        k::reference::conv2d_backward_weight(s, x, dy, dw2, db2);
        check_close(dw1, dw2);
        check_close(db1, db2);
    }

    TEST_CASE("1x1 conv equals a per-pixel matrix product")
    {
        k::ConvShape s{1, 2, 1, 2, 2, 1, 0};
        const std::vector<double> x{1, 2, 3, 4, 10, 20, 30, 40};
        const std::vector<double> w{0.5, -1};
        std::vector<double> y(4);
        k::reference::conv2d_forward(s, x, w, {}, y);
        CHECK(y == std::vector<double>{-9.5, -19, -28.5, -38});
    }

    TEST_CASE("upsample forward and backward match the reference")
    {
        Rng rng(3);
        k::UpsampleShape s{2, 3, 2, 4, 3, 2};
        const auto x = randv(rng, 2 * 3 * 4 * 3);
        const auto w = randv(rng, 3 * 2 * 4);
        const auto bias = randv(rng, 2);
        const std::size_t ny = 2 * 2 * 8 * 6;
        std::vector<double> y1(ny), y2(ny);
        k::upsample_forward(s, x, w, bias, y1);
        k::reference::upsample_forward(s, x, w, bias, y2);
        check_close(y1, y2);
        const auto dy = randv(rng, ny);
        std::vector<double> dx1(x.size()), dx2(x.size()), dw1(w.size()), dw2(w.size()), db1(2), db2(2);
        k::upsample_backward_input(s, dy, w, dx1);
        k::reference::upsample_backward_input(s, dy, w, dx2);
        check_close(dx1, dx2);
        k::upsample_backward_weight(s, x, dy, dw1, db1);
        k::reference::upsample_backward_weight(s, x, dy, dw2, db2);
        check_close(dw1, dw2);
        check_close(db1, db2);
    }

    TEST_CASE("bit counting matches the reference")
    {
        Rng rng(4);
        std::vector<std::uint8_t> a(10007), b(10007);
        for (std::size_t i = 0; i < a.size(); ++i) {
            a[i] = rng.uniform() < 0.3;
            b[i] = rng.uniform() < 0.6;
        }
        CHECK(k::count_set(a) == k::reference::count_set(a));
        const auto o1 = k::count_overlap(a, b);
        const auto o2 = k::reference::count_overlap(a, b);
        CHECK(o1.intersection == o2.intersection);
        CHECK(o1.union_ == o2.union_);
        std::int64_t inter = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            inter += a[i] && b[i];
        }
        CHECK(o2.intersection == inter);
    }
}
