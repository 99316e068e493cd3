// Compares the OpenMP kernels against the serial reference implementations.
// Usage: fedsim_bench [repeats]

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "fedsim/fractal.hpp"
#include "fedsim/kernels.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

namespace {

double time_ms(const std::function<void()>& fn, int repeats) {
    fn();  // warm up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < repeats; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / repeats;
}

void report(const char* name, double serial_ms, double omp_ms) {
    std::printf("%-28s serial %9.3f ms   omp %9.3f ms   speedup %5.2fx\n", name, serial_ms,
                omp_ms, serial_ms / omp_ms);
}

std::vector<double> random_vec(std::size_t n, fedsim::Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

}  // namespace

int main(int argc, char** argv) {
    const int repeats = argc > 1 ? std::atoi(argv[1]) : 5;
#ifdef _OPENMP
    std::printf("OpenMP enabled, max threads %d\n", omp_get_max_threads());
#else
    std::printf("built without OpenMP; both columns run the same code\n");
#endif

    fedsim::Rng rng(42);
    namespace k = fedsim::kernels;

    {
        const std::size_t B = 256, M = 512, N = 512;
        const auto x = random_vec(B * M, rng);
        const auto w = random_vec(N * M, rng);
        const auto bias = random_vec(N, rng);
        std::vector<double> y(B * N);
        report("gemm_nt 256x512x512",
               time_ms([&] { k::serial::gemm_nt(x.data(), w.data(), bias.data(), y.data(), B, M, N); },
                       repeats),
               time_ms([&] { k::gemm_nt(x.data(), w.data(), bias.data(), y.data(), B, M, N); },
                       repeats));

        const auto g = random_vec(B * N, rng);
        std::vector<double> gw(N * M);
        report("gemm_tn 256x512x512",
               time_ms([&] { k::serial::gemm_tn(g.data(), x.data(), gw.data(), B, N, M); }, repeats),
               time_ms([&] { k::gemm_tn(g.data(), x.data(), gw.data(), B, N, M); }, repeats));
    }

    {
        const std::size_t B = 32, CI = 16, CO = 32, S = 32;
        const auto in = random_vec(B * CI * S * S, rng);
        const auto w = random_vec(CO * CI * 9, rng);
        const auto bias = random_vec(CO, rng);
        std::vector<double> out(B * CO * S * S);
        report("conv3x3 fwd 32x16->32@32px",
               time_ms([&] { k::serial::conv3x3_forward(in.data(), w.data(), bias.data(),
                                                        out.data(), B, CI, CO, S, S); },
                       repeats),
               time_ms([&] { k::conv3x3_forward(in.data(), w.data(), bias.data(), out.data(), B,
                                                CI, CO, S, S); },
                       repeats));

        std::vector<double> gw(CO * CI * 9), gb(CO);
        report("conv3x3 wgrad",
               time_ms([&] { k::serial::conv3x3_weight_grad(out.data(), in.data(), gw.data(),
                                                            gb.data(), B, CI, CO, S, S); },
                       repeats),
               time_ms([&] { k::conv3x3_weight_grad(out.data(), in.data(), gw.data(), gb.data(),
                                                    B, CI, CO, S, S); },
                       repeats));
    }

    {
        // fractal rendering scales across images inside build_pretrain_dataset;
        // time a fixed batch of renders through the public entry point
        fedsim::Rng crng(7);
        const auto code = fedsim::sample_ifs(3, crng);
        auto render_n = [&](int n) {
            for (int i = 0; i < n; ++i) {
                fedsim::Rng r(static_cast<std::uint64_t>(i));
                fedsim::render_fractal(code, 32, 20000, r);
            }
        };
        const double serial_ms = time_ms([&] { render_n(8); }, repeats);
        const double par_ms = time_ms(
            [&] {
#pragma omp parallel for schedule(dynamic)
                for (int i = 0; i < 8; ++i) {
                    fedsim::Rng r(static_cast<std::uint64_t>(i));
                    fedsim::render_fractal(code, 32, 20000, r);
                }
            },
            repeats);
        report("render_fractal x8 @20k it", serial_ms, par_ms);
    }

    return 0;
}
