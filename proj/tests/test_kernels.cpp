#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "fedsim/kernels.hpp"
#include "fedsim/rng.hpp"

using namespace fedsim;
namespace k = fedsim::kernels;

namespace {

std::vector<double> rand_vec(std::size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

// independent dense oracle, index arithmetic written out directly
void naive_gemm_nt(const std::vector<double>& x, const std::vector<double>& w,
                   const std::vector<double>& bias, std::vector<double>& y, std::size_t B,
                   std::size_t M, std::size_t N) {
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < N; ++j) {
            double acc = bias.empty() ? 0.0 : bias[j];
            for (std::size_t m = 0; m < M; ++m) acc += x[i * M + m] * w[j * M + m];
            y[i * N + j] = acc;
        }
}

}  // namespace

TEST_CASE("gemm_nt matches the naive oracle") {
    Rng rng(1);
    const std::size_t B = 7, M = 5, N = 9;
    const auto x = rand_vec(B * M, rng);
    const auto w = rand_vec(N * M, rng);
    const auto bias = rand_vec(N, rng);
    std::vector<double> got(B * N), want(B * N);
    k::gemm_nt(x.data(), w.data(), bias.data(), got.data(), B, M, N);
    naive_gemm_nt(x, w, bias, want, B, M, N);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-14));
}

TEST_CASE("omp kernels are bit-identical to the serial reference") {
    Rng rng(2);
    for (const auto [B, M, N] : {std::tuple<std::size_t, std::size_t, std::size_t>{1, 1, 1},
                                 {3, 17, 5},
                                 {64, 33, 20},
                                 {128, 8, 100}}) {
        const auto x = rand_vec(B * M, rng);
        const auto w = rand_vec(N * M, rng);
        const auto bias = rand_vec(N, rng);
        const auto g = rand_vec(B * N, rng);
        std::vector<double> a(B * N), b(B * N);
        k::serial::gemm_nt(x.data(), w.data(), bias.data(), a.data(), B, M, N);
        k::gemm_nt(x.data(), w.data(), bias.data(), b.data(), B, M, N);
        CHECK(a == b);

        std::vector<double> ga(B * M), gb(B * M);
        k::serial::gemm_nn(g.data(), w.data(), ga.data(), B, N, M);
        k::gemm_nn(g.data(), w.data(), gb.data(), B, N, M);
        CHECK(ga == gb);

        std::vector<double> wa(N * M), wb(N * M);
        k::serial::gemm_tn(g.data(), x.data(), wa.data(), B, N, M);
        k::gemm_tn(g.data(), x.data(), wb.data(), B, N, M);
        CHECK(wa == wb);

        std::vector<double> ca(N), cb(N);
        k::serial::colsum(g.data(), ca.data(), B, N);
        k::colsum(g.data(), cb.data(), B, N);
        CHECK(ca == cb);
    }
}

TEST_CASE("conv3x3 center-delta kernel reproduces the input") {
    Rng rng(3);
    const std::size_t B = 2, C = 3, S = 8;
    const auto in = rand_vec(B * C * S * S, rng);
    // one output channel per input channel, delta at the kernel center
    std::vector<double> w(C * C * 9, 0.0);
    for (std::size_t c = 0; c < C; ++c) w[(c * C + c) * 9 + 4] = 1.0;
    std::vector<double> out(B * C * S * S);
    k::conv3x3_forward(in.data(), w.data(), nullptr, out.data(), B, C, C, S, S);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == in[i]);
}

TEST_CASE("conv3x3 hand case with padding") {
    // 1x1 channel, 2x2 image, all-ones kernel: each output sums the in-range
    // 3x3 neighborhood, so every output equals the full image sum
    const std::vector<double> in = {1.0, 2.0, 3.0, 4.0};
    const std::vector<double> w(9, 1.0);
    std::vector<double> out(4);
    k::conv3x3_forward(in.data(), w.data(), nullptr, out.data(), 1, 1, 1, 2, 2);
    for (double v : out) CHECK(v == doctest::Approx(10.0));
}

TEST_CASE("conv kernels: omp equals serial") {
    Rng rng(4);
    const std::size_t B = 5, CI = 4, CO = 6, S = 8;
    const auto in = rand_vec(B * CI * S * S, rng);
    const auto w = rand_vec(CO * CI * 9, rng);
    const auto bias = rand_vec(CO, rng);
    const auto gout = rand_vec(B * CO * S * S, rng);

    std::vector<double> oa(B * CO * S * S), ob(oa.size());
    k::serial::conv3x3_forward(in.data(), w.data(), bias.data(), oa.data(), B, CI, CO, S, S);
    k::conv3x3_forward(in.data(), w.data(), bias.data(), ob.data(), B, CI, CO, S, S);
    CHECK(oa == ob);

    std::vector<double> ia(B * CI * S * S), ib(ia.size());
    k::serial::conv3x3_input_grad(gout.data(), w.data(), ia.data(), B, CI, CO, S, S);
    k::conv3x3_input_grad(gout.data(), w.data(), ib.data(), B, CI, CO, S, S);
    CHECK(ia == ib);

    std::vector<double> wa(CO * CI * 9), wb(wa.size()), ba(CO), bb(CO);
    k::serial::conv3x3_weight_grad(gout.data(), in.data(), wa.data(), ba.data(), B, CI, CO, S, S);
    k::conv3x3_weight_grad(gout.data(), in.data(), wb.data(), bb.data(), B, CI, CO, S, S);
    CHECK(wa == wb);
    CHECK(ba == bb);

    std::vector<double> pa(B * CO * (S / 2) * (S / 2)), pb(pa.size());
    k::serial::avgpool2_forward(oa.data(), pa.data(), B * CO, S, S);
    k::avgpool2_forward(oa.data(), pb.data(), B * CO, S, S);
    CHECK(pa == pb);

    std::vector<double> fa(B * CO), fb(B * CO);
    k::serial::gap_forward(pa.data(), fa.data(), B, CO, (S / 2) * (S / 2));
    k::gap_forward(pa.data(), fb.data(), B, CO, (S / 2) * (S / 2));
    CHECK(fa == fb);
}

TEST_CASE("pooling forward/backward are consistent adjoints") {
    // <pool(x), g> == <x, pool_backward(g)> for linear pooling
    Rng rng(5);
    const std::size_t P = 3, S = 6;
    const auto x = rand_vec(P * S * S, rng);
    const auto g = rand_vec(P * (S / 2) * (S / 2), rng);
    std::vector<double> y(g.size()), gx(x.size());
    k::avgpool2_forward(x.data(), y.data(), P, S, S);
    k::avgpool2_backward(g.data(), gx.data(), P, S, S);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) lhs += y[i] * g[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * gx[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}
