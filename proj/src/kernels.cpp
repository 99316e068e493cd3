#include "fedsim/kernels.hpp"

#include <cstdint>

namespace fedsim::kernels {

namespace serial {

void gemm_nt(const double* x, const double* w, const double* bias, double* y,
             std::size_t b, std::size_t m, std::size_t n) {
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = bias ? bias[j] : 0.0;
            const double* xi = x + i * m;
            const double* wj = w + j * m;
            for (std::size_t k = 0; k < m; ++k) acc += xi[k] * wj[k];
            y[i * n + j] = acc;
        }
    }
}

void gemm_nn(const double* g, const double* w, double* y, std::size_t b,
             std::size_t n, std::size_t m) {
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t k = 0; k < m; ++k) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * w[j * m + k];
            y[i * m + k] = acc;
        }
    }
}

void gemm_tn(const double* g, const double* x, double* y, std::size_t b,
             std::size_t n, std::size_t m) {
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = 0; k < m; ++k) {
            double acc = 0.0;
            for (std::size_t i = 0; i < b; ++i) acc += g[i * n + j] * x[i * m + k];
            y[j * m + k] = acc;
        }
    }
}

void colsum(const double* g, double* y, std::size_t b, std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < b; ++i) acc += g[i * n + j];
        y[j] = acc;
    }
}

void conv3x3_forward(const double* in, const double* w, const double* bias,
                     double* out, std::size_t b, std::size_t ci, std::size_t co,
                     std::size_t h, std::size_t wd) {
    const std::size_t hw = h * wd;
    for (std::size_t img = 0; img < b; ++img) {
        for (std::size_t oc = 0; oc < co; ++oc) {
            double* o = out + (img * co + oc) * hw;
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < wd; ++x) {
                    double acc = bias ? bias[oc] : 0.0;
                    for (std::size_t ic = 0; ic < ci; ++ic) {
                        const double* ip = in + (img * ci + ic) * hw;
                        const double* wp = w + ((oc * ci + ic) * 9);
                        for (int ky = -1; ky <= 1; ++ky) {
                            const std::int64_t yy = static_cast<std::int64_t>(y) + ky;
                            if (yy < 0 || yy >= static_cast<std::int64_t>(h)) continue;
                            for (int kx = -1; kx <= 1; ++kx) {
                                const std::int64_t xx = static_cast<std::int64_t>(x) + kx;
                                if (xx < 0 || xx >= static_cast<std::int64_t>(wd)) continue;
                                acc += ip[yy * wd + xx] * wp[(ky + 1) * 3 + (kx + 1)];
                            }
                        }
                    }
                    o[y * wd + x] = acc;
                }
            }
        }
    }
}

void conv3x3_input_grad(const double* gout, const double* w, double* gin,
                        std::size_t b, std::size_t ci, std::size_t co,
                        std::size_t h, std::size_t wd) {
    const std::size_t hw = h * wd;
    for (std::size_t img = 0; img < b; ++img) {
        for (std::size_t ic = 0; ic < ci; ++ic) {
            double* gi = gin + (img * ci + ic) * hw;
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < wd; ++x) {
                    double acc = 0.0;
                    for (std::size_t oc = 0; oc < co; ++oc) {
                        const double* gp = gout + (img * co + oc) * hw;
                        const double* wp = w + ((oc * ci + ic) * 9);
                        // out[y-ky, x-kx] consumed in[y, x] with weight [ky+1, kx+1]
                        for (int ky = -1; ky <= 1; ++ky) {
                            const std::int64_t oy = static_cast<std::int64_t>(y) - ky;
                            if (oy < 0 || oy >= static_cast<std::int64_t>(h)) continue;
                            for (int kx = -1; kx <= 1; ++kx) {
                                const std::int64_t ox = static_cast<std::int64_t>(x) - kx;
                                if (ox < 0 || ox >= static_cast<std::int64_t>(wd)) continue;
                                acc += gp[oy * wd + ox] * wp[(ky + 1) * 3 + (kx + 1)];
                            }
                        }
                    }
                    gi[y * wd + x] = acc;
                }
            }
        }
    }
}

void conv3x3_weight_grad(const double* gout, const double* in, double* gw,
                         double* gbias, std::size_t b, std::size_t ci,
                         std::size_t co, std::size_t h, std::size_t wd) {
    const std::size_t hw = h * wd;
    for (std::size_t oc = 0; oc < co; ++oc) {
        for (std::size_t ic = 0; ic < ci; ++ic) {
            double* gwp = gw + ((oc * ci + ic) * 9);
            for (int ky = -1; ky <= 1; ++ky) {
                for (int kx = -1; kx <= 1; ++kx) {
                    double acc = 0.0;
                    for (std::size_t img = 0; img < b; ++img) {
                        const double* gp = gout + (img * co + oc) * hw;
                        const double* ip = in + (img * ci + ic) * hw;
                        for (std::size_t y = 0; y < h; ++y) {
                            const std::int64_t yy = static_cast<std::int64_t>(y) + ky;
                            if (yy < 0 || yy >= static_cast<std::int64_t>(h)) continue;
                            for (std::size_t x = 0; x < wd; ++x) {
                                const std::int64_t xx = static_cast<std::int64_t>(x) + kx;
                                if (xx < 0 || xx >= static_cast<std::int64_t>(wd)) continue;
                                acc += gp[y * wd + x] * ip[yy * wd + xx];
                            }
                        }
                    }
                    gwp[(ky + 1) * 3 + (kx + 1)] = acc;
                }
            }
        }
        if (gbias) {
            double acc = 0.0;
            for (std::size_t img = 0; img < b; ++img) {
                const double* gp = gout + (img * co + oc) * hw;
                for (std::size_t i = 0; i < hw; ++i) acc += gp[i];
            }
            gbias[oc] = acc;
        }
    }
}

void avgpool2_forward(const double* in, double* out, std::size_t bc,
                      std::size_t h, std::size_t wd) {
    const std::size_t oh = h / 2, ow = wd / 2;
    for (std::size_t p = 0; p < bc; ++p) {
        const double* ip = in + p * h * wd;
        double* op = out + p * oh * ow;
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x)
                op[y * ow + x] = 0.25 * (ip[(2 * y) * wd + 2 * x] +
                                         ip[(2 * y) * wd + 2 * x + 1] +
                                         ip[(2 * y + 1) * wd + 2 * x] +
                                         ip[(2 * y + 1) * wd + 2 * x + 1]);
    }
}

void avgpool2_backward(const double* gout, double* gin, std::size_t bc,
                       std::size_t h, std::size_t wd) {
    const std::size_t oh = h / 2, ow = wd / 2;
    for (std::size_t p = 0; p < bc; ++p) {
        const double* gp = gout + p * oh * ow;
        double* gi = gin + p * h * wd;
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                const double g = 0.25 * gp[y * ow + x];
                gi[(2 * y) * wd + 2 * x] = g;
                gi[(2 * y) * wd + 2 * x + 1] = g;
                gi[(2 * y + 1) * wd + 2 * x] = g;
                gi[(2 * y + 1) * wd + 2 * x + 1] = g;
            }
    }
}

void gap_forward(const double* in, double* out, std::size_t b, std::size_t c,
                 std::size_t hw) {
    for (std::size_t i = 0; i < b * c; ++i) {
        const double* ip = in + i * hw;
        double acc = 0.0;
        for (std::size_t k = 0; k < hw; ++k) acc += ip[k];
        out[i] = acc / static_cast<double>(hw);
    }
}

void gap_backward(const double* gout, double* gin, std::size_t b, std::size_t c,
                  std::size_t hw) {
    for (std::size_t i = 0; i < b * c; ++i) {
        const double g = gout[i] / static_cast<double>(hw);
        double* gp = gin + i * hw;
        for (std::size_t k = 0; k < hw; ++k) gp[k] = g;
    }
}

}  // namespace serial

// OpenMP variants. Each output element is owned by exactly one thread and its
// reduction runs in the same order as the serial reference, so the results
// match bit for bit.

void gemm_nt(const double* x, const double* w, const double* bias, double* y,
             std::size_t b, std::size_t m, std::size_t n) {
    const std::int64_t rows = static_cast<std::int64_t>(b);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < rows; ++i)
        serial::gemm_nt(x + i * static_cast<std::int64_t>(m), w, bias,
                        y + i * static_cast<std::int64_t>(n), 1, m, n);
}

void gemm_nn(const double* g, const double* w, double* y, std::size_t b,
             std::size_t n, std::size_t m) {
    const std::int64_t rows = static_cast<std::int64_t>(b);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < rows; ++i)
        serial::gemm_nn(g + i * static_cast<std::int64_t>(n), w,
                        y + i * static_cast<std::int64_t>(m), 1, n, m);
}

void gemm_tn(const double* g, const double* x, double* y, std::size_t b,
             std::size_t n, std::size_t m) {
    const std::int64_t rows = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t j = 0; j < rows; ++j) {
        for (std::size_t k = 0; k < m; ++k) {
            double acc = 0.0;
            for (std::size_t i = 0; i < b; ++i)
                acc += g[i * n + static_cast<std::size_t>(j)] * x[i * m + k];
            y[static_cast<std::size_t>(j) * m + k] = acc;
        }
    }
}

void colsum(const double* g, double* y, std::size_t b, std::size_t n) {
    const std::int64_t cols = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t j = 0; j < cols; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < b; ++i) acc += g[i * n + static_cast<std::size_t>(j)];
        y[static_cast<std::size_t>(j)] = acc;
    }
}

void conv3x3_forward(const double* in, const double* w, const double* bias,
                     double* out, std::size_t b, std::size_t ci, std::size_t co,
                     std::size_t h, std::size_t wd) {
    const std::int64_t imgs = static_cast<std::int64_t>(b);
    const std::size_t hw = h * wd;
#pragma omp parallel for schedule(static)
    for (std::int64_t img = 0; img < imgs; ++img)
        serial::conv3x3_forward(in + img * static_cast<std::int64_t>(ci * hw), w, bias,
                                out + img * static_cast<std::int64_t>(co * hw), 1, ci,
                                co, h, wd);
}

void conv3x3_input_grad(const double* gout, const double* w, double* gin,
                        std::size_t b, std::size_t ci, std::size_t co,
                        std::size_t h, std::size_t wd) {
    const std::int64_t imgs = static_cast<std::int64_t>(b);
    const std::size_t hw = h * wd;
#pragma omp parallel for schedule(static)
    for (std::int64_t img = 0; img < imgs; ++img)
        serial::conv3x3_input_grad(gout + img * static_cast<std::int64_t>(co * hw), w,
                                   gin + img * static_cast<std::int64_t>(ci * hw), 1,
                                   ci, co, h, wd);
}

void conv3x3_weight_grad(const double* gout, const double* in, double* gw,
                         double* gbias, std::size_t b, std::size_t ci,
                         std::size_t co, std::size_t h, std::size_t wd) {
    const std::int64_t ocs = static_cast<std::int64_t>(co);
    const std::size_t hw = h * wd;
#pragma omp parallel for schedule(static)
    for (std::int64_t oc = 0; oc < ocs; ++oc) {
        for (std::size_t ic = 0; ic < ci; ++ic) {
            double* gwp = gw + ((static_cast<std::size_t>(oc) * ci + ic) * 9);
            for (int ky = -1; ky <= 1; ++ky) {
                for (int kx = -1; kx <= 1; ++kx) {
                    double acc = 0.0;
                    for (std::size_t img = 0; img < b; ++img) {
                        const double* gp = gout + (img * co + static_cast<std::size_t>(oc)) * hw;
                        const double* ip = in + (img * ci + ic) * hw;
                        for (std::size_t y = 0; y < h; ++y) {
                            const std::int64_t yy = static_cast<std::int64_t>(y) + ky;
                            if (yy < 0 || yy >= static_cast<std::int64_t>(h)) continue;
                            for (std::size_t x = 0; x < wd; ++x) {
                                const std::int64_t xx = static_cast<std::int64_t>(x) + kx;
                                if (xx < 0 || xx >= static_cast<std::int64_t>(wd)) continue;
                                acc += gp[y * wd + x] * ip[yy * wd + xx];
                            }
                        }
                    }
                    gwp[(ky + 1) * 3 + (kx + 1)] = acc;
                }
            }
        }
        if (gbias) {
            double acc = 0.0;
            for (std::size_t img = 0; img < b; ++img) {
                const double* gp = gout + (img * co + static_cast<std::size_t>(oc)) * hw;
                for (std::size_t i = 0; i < hw; ++i) acc += gp[i];
            }
            gbias[static_cast<std::size_t>(oc)] = acc;
        }
    }
}

void avgpool2_forward(const double* in, double* out, std::size_t bc,
                      std::size_t h, std::size_t wd) {
    const std::int64_t planes = static_cast<std::int64_t>(bc);
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < planes; ++p)
        serial::avgpool2_forward(in + p * static_cast<std::int64_t>(h * wd),
                                 out + p * static_cast<std::int64_t>((h / 2) * (wd / 2)),
                                 1, h, wd);
}

void avgpool2_backward(const double* gout, double* gin, std::size_t bc,
                       std::size_t h, std::size_t wd) {
    const std::int64_t planes = static_cast<std::int64_t>(bc);
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < planes; ++p)
        serial::avgpool2_backward(gout + p * static_cast<std::int64_t>((h / 2) * (wd / 2)),
                                  gin + p * static_cast<std::int64_t>(h * wd), 1, h, wd);
}

void gap_forward(const double* in, double* out, std::size_t b, std::size_t c,
                 std::size_t hw) {
    const std::int64_t planes = static_cast<std::int64_t>(b * c);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < planes; ++i) {
        const double* ip = in + i * static_cast<std::int64_t>(hw);
        double acc = 0.0;
        for (std::size_t k = 0; k < hw; ++k) acc += ip[k];
        out[i] = acc / static_cast<double>(hw);
    }
}

void gap_backward(const double* gout, double* gin, std::size_t b, std::size_t c,
                  std::size_t hw) {
    const std::int64_t planes = static_cast<std::int64_t>(b * c);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < planes; ++i) {
        const double g = gout[i] / static_cast<double>(hw);
        double* gp = gin + i * static_cast<std::int64_t>(hw);
        for (std::size_t k = 0; k < hw; ++k) gp[k] = g;
    }
}

}  // namespace fedsim::kernels
