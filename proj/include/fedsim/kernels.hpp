#pragma once

#include <cstddef>

namespace fedsim::kernels {

// Dense and convolution kernels used by the model forward/backward passes.
// The default entry points are OpenMP-parallel; fedsim::kernels::serial holds
// the plain-loop reference implementations. Both compute every output element
// with the same fixed-order inner reduction, so results are bit-identical
// across thread counts and against the serial reference. Tests assert this;
// the bench tool compares their throughput.
//
// Shapes are row-major:
//   gemm_nt : Y[B,N]  = X[B,M] * W[N,M]^T (+ bias[N] if bias != nullptr)
//   gemm_nn : Y[B,M]  = G[B,N] * W[N,M]
//   gemm_tn : Y[N,M]  = G[B,N]^T * X[B,M]
//   colsum  : y[N]    = sum_b G[b,N]
// Conv layout is [B,C,H,W]; weights [Co,Ci,3,3], stride 1, zero padding 1.

void gemm_nt(const double* x, const double* w, const double* bias, double* y,
             std::size_t b, std::size_t m, std::size_t n);
void gemm_nn(const double* g, const double* w, double* y, std::size_t b,
             std::size_t n, std::size_t m);
void gemm_tn(const double* g, const double* x, double* y, std::size_t b,
             std::size_t n, std::size_t m);
void colsum(const double* g, double* y, std::size_t b, std::size_t n);

void conv3x3_forward(const double* in, const double* w, const double* bias,
                     double* out, std::size_t b, std::size_t ci, std::size_t co,
                     std::size_t h, std::size_t wd);
void conv3x3_input_grad(const double* gout, const double* w, double* gin,
                        std::size_t b, std::size_t ci, std::size_t co,
                        std::size_t h, std::size_t wd);
void conv3x3_weight_grad(const double* gout, const double* in, double* gw,
                         double* gbias, std::size_t b, std::size_t ci,
                         std::size_t co, std::size_t h, std::size_t wd);

void avgpool2_forward(const double* in, double* out, std::size_t bc,
                      std::size_t h, std::size_t wd);
void avgpool2_backward(const double* gout, double* gin, std::size_t bc,
                       std::size_t h, std::size_t wd);

// Global average pool over H*W per (batch, channel).
void gap_forward(const double* in, double* out, std::size_t b, std::size_t c,
                 std::size_t hw);
void gap_backward(const double* gout, double* gin, std::size_t b, std::size_t c,
                  std::size_t hw);

namespace serial {

void gemm_nt(const double* x, const double* w, const double* bias, double* y,
             std::size_t b, std::size_t m, std::size_t n);
void gemm_nn(const double* g, const double* w, double* y, std::size_t b,
             std::size_t n, std::size_t m);
void gemm_tn(const double* g, const double* x, double* y, std::size_t b,
             std::size_t n, std::size_t m);
void colsum(const double* g, double* y, std::size_t b, std::size_t n);

void conv3x3_forward(const double* in, const double* w, const double* bias,
                     double* out, std::size_t b, std::size_t ci, std::size_t co,
                     std::size_t h, std::size_t wd);
void conv3x3_input_grad(const double* gout, const double* w, double* gin,
                        std::size_t b, std::size_t ci, std::size_t co,
                        std::size_t h, std::size_t wd);
void conv3x3_weight_grad(const double* gout, const double* in, double* gw,
                         double* gbias, std::size_t b, std::size_t ci,
                         std::size_t co, std::size_t h, std::size_t wd);

void avgpool2_forward(const double* in, double* out, std::size_t bc,
                      std::size_t h, std::size_t wd);
void avgpool2_backward(const double* gout, double* gin, std::size_t bc,
                       std::size_t h, std::size_t wd);

void gap_forward(const double* in, double* out, std::size_t b, std::size_t c,
                 std::size_t hw);
void gap_backward(const double* gout, double* gin, std::size_t b, std::size_t c,
                  std::size_t hw);

}  // namespace serial

}  // namespace fedsim::kernels
