// Parallel kernels vs. their serial references on shapes taken from the toy
// model (patch embedding gemm, SFPG convs, decoder upsampling, mask IoU).

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "usis/kernels.hpp"

namespace k = usis::kernels;

namespace {

std::vector<double> filled(std::size_t n, unsigned seed)
{
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = dist(gen);
    return v;
}

template <bool Parallel>
void bm_gemm(benchmark::State& state)
{
    const int m = static_cast<int>(state.range(0));
    const int n = 192, kk = 192;
    const auto a = filled(static_cast<std::size_t>(m) * kk, 1);
    const auto b = filled(static_cast<std::size_t>(kk) * n, 2);
    std::vector<double> c(static_cast<std::size_t>(m) * n);
    for (auto _ : state) {
        if constexpr (Parallel) {
            k::gemm(k::Trans::No, k::Trans::Yes, m, n, kk, a, b, c);
        } else {
            k::reference::gemm(k::Trans::No, k::Trans::Yes, m, n, kk, a, b, c);
        }
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * 2LL * m * n * kk);
}

template <bool Parallel>
void bm_conv(benchmark::State& state)
{
    k::ConvShape s;
    s.batch = 2;
    s.in_channels = 32;
    s.out_channels = 32;
    s.height = s.width = static_cast<int>(state.range(0));
    s.kernel = static_cast<int>(state.range(1));
    s.pad = s.kernel / 2;
    const auto x = filled(static_cast<std::size_t>(s.batch) * s.in_channels * s.height * s.width, 3);
    const auto w = filled(static_cast<std::size_t>(s.out_channels) * s.in_channels * s.kernel * s.kernel, 4);
    const auto bias = filled(static_cast<std::size_t>(s.out_channels), 5);
    std::vector<double> y(static_cast<std::size_t>(s.batch) * s.out_channels * s.out_height() * s.out_width());
    for (auto _ : state) {
        if constexpr (Parallel) {
            k::conv2d_forward(s, x, w, bias, y);
        } else {
            k::reference::conv2d_forward(s, x, w, bias, y);
        }
        benchmark::DoNotOptimize(y.data());
    }
}

template <bool Parallel>
void bm_upsample(benchmark::State& state)
{
    k::UpsampleShape s;
    s.batch = 2;
    s.in_channels = 64;
    s.out_channels = 16;
    s.height = s.width = static_cast<int>(state.range(0));
    s.factor = 2;
    const auto x = filled(static_cast<std::size_t>(s.batch) * s.in_channels * s.height * s.width, 6);
    const auto w = filled(static_cast<std::size_t>(s.in_channels) * s.out_channels * 4, 7);
    std::vector<double> y(static_cast<std::size_t>(s.batch) * s.out_channels * s.height * s.width * 4);
    for (auto _ : state) {
        if constexpr (Parallel) {
            k::upsample_forward(s, x, w, {}, y);
        } else {
            k::reference::upsample_forward(s, x, w, {}, y);
        }
        benchmark::DoNotOptimize(y.data());
    }
}

template <bool Parallel>
void bm_overlap(benchmark::State& state)
{
    const auto n = static_cast<std::size_t>(state.range(0));
    std::mt19937 gen(8);
    std::vector<std::uint8_t> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
        a[i] = static_cast<std::uint8_t>(gen() & 1U);
        b[i] = static_cast<std::uint8_t>(gen() & 1U);
    }
    for (auto _ : state) {
        const auto r = Parallel ? k::count_overlap(a, b) : k::reference::count_overlap(a, b);
        benchmark::DoNotOptimize(r);
    }
    state.SetBytesProcessed(state.iterations() * 2 * static_cast<std::int64_t>(n));
}

} // namespace

BENCHMARK(bm_gemm<true>)->Name("gemm/parallel")->Arg(64)->Arg(256);
BENCHMARK(bm_gemm<false>)->Name("gemm/reference")->Arg(64)->Arg(256);
BENCHMARK(bm_conv<true>)->Name("conv2d/parallel")->Args({16, 3})->Args({16, 7});
BENCHMARK(bm_conv<false>)->Name("conv2d/reference")->Args({16, 3})->Args({16, 7});
BENCHMARK(bm_upsample<true>)->Name("upsample/parallel")->Arg(16)->Arg(32);
BENCHMARK(bm_upsample<false>)->Name("upsample/reference")->Arg(16)->Arg(32);
BENCHMARK(bm_overlap<true>)->Name("count_overlap/parallel")->Arg(64 * 64)->Arg(1 << 20);
BENCHMARK(bm_overlap<false>)->Name("count_overlap/reference")->Arg(64 * 64)->Arg(1 << 20);

int main(int argc, char** argv)
{
    k::configure_workers_from_env();
    benchmark::Initialize(&argc, argv);
    if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
    benchmark::RunSpecifiedBenchmarks();
    benchmark::Shutdown();
    return 0;
}
