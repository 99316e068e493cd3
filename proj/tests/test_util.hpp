// Shared oracles for the test suites: central finite differences over model
// parameters and norm-based relative error. Kept independent of the library's
// backward path on purpose.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "fedsim/nn.hpp"

namespace testutil {

// d loss / d params via central differences, laid out like GradientSet.
inline fedsim::GradientSet finite_diff(
    fedsim::ModelParams params, const std::function<double(const fedsim::ModelParams&)>& loss,
    double step = 1e-5) {
    fedsim::GradientSet g = fedsim::zeros_like(params);
    auto pts = params.tensors();
    auto gts = g.tensors();
    for (std::size_t t = 0; t < pts.size(); ++t) {
        for (std::size_t i = 0; i < pts[t]->size(); ++i) {
            const double keep = (*pts[t])[i];
            (*pts[t])[i] = keep + step;
            const double up = loss(params);
            (*pts[t])[i] = keep - step;
            const double down = loss(params);
            (*pts[t])[i] = keep;
            (*gts[t])[i] = (up - down) / (2.0 * step);
        }
    }
    return g;
}

// ||a - b|| / max(||a|| + ||b||, floor)
inline double rel_error(const fedsim::GradientSet& a, const fedsim::GradientSet& b,
                        double floor = 1e-12) {
    auto at = a.tensors();
    auto bt = b.tensors();
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t t = 0; t < at.size(); ++t)
        for (std::size_t i = 0; i < at[t]->size(); ++i) {
            const double d = (*at[t])[i] - (*bt[t])[i];
            diff += d * d;
            na += (*at[t])[i] * (*at[t])[i];
            nb += (*bt[t])[i] * (*bt[t])[i];
        }
    return std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nb), floor);
}

// gradient restricted to feature inputs, for feature-space losses
inline fedsim::Tensor finite_diff_features(
    fedsim::Tensor features, const std::function<double(const fedsim::Tensor&)>& loss,
    double step = 1e-5) {
    fedsim::Tensor g(features.shape);
    for (std::size_t i = 0; i < features.size(); ++i) {
        const double keep = features[i];
        features[i] = keep + step;
        const double up = loss(features);
        features[i] = keep - step;
        const double down = loss(features);
        features[i] = keep;
        g[i] = (up - down) / (2.0 * step);
    }
    return g;
}

inline double rel_error_tensor(const fedsim::Tensor& a, const fedsim::Tensor& b,
                               double floor = 1e-12) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        diff += d * d;
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nb), floor);
}

}  // namespace testutil
