#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fedsim/dataset.hpp"
#include "fedsim/nn.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

// One affine contraction p -> A p + b of the plane.
struct AffineMap {
    std::array<double, 4> a;  // row-major 2x2
    std::array<double, 2> b;

    double det() const { return a[0] * a[3] - a[1] * a[2]; }
    double max_singular_value() const;
    bool operator==(const AffineMap&) const = default;
};

struct IfsCode {
    std::vector<AffineMap> maps;
    std::vector<double> probs;  // nonnegative, sums to 1

    bool operator==(const IfsCode&) const = default;
};

struct IfsSamplerConfig {
    double contraction_lo = 0.4;   // band for the prob-weighted mean top
    double contraction_hi = 0.8;   // singular value of the code
    double map_singular_cap = 0.9; // per-map top singular value bound
    double det_floor = 0.02;       // maps with |det| below this are resampled
    std::size_t budget = 10000;    // rejection attempts before giving up
};

IfsCode sample_ifs(int num_maps, Rng& rng, const IfsSamplerConfig& cfg = {});

// Chaos-game rendering: iterate the maps, drop a burn-in prefix, histogram
// the orbit on a size x size grid after a bounding-box fit, normalize to
// [0,1]. Pure function of (code, size, iterations, rng state).
Tensor render_fractal(const IfsCode& code, std::size_t size, std::size_t iterations,
                      Rng& rng);

struct FractalDataset {
    std::vector<IfsCode> classes;
    int images_per_class = 10;
    std::size_t image_size = 32;
    std::uint64_t seed = 0;
    LabeledDataset images;  // rendered, grayscale {1, size, size}
};

struct FractalBuildConfig {
    std::size_t render_iterations = 50000;
    double jitter = 0.02;               // per-image relative map perturbation
    double min_fill = 0.05;             // accepted nonzero-pixel fraction band
    double max_fill = 0.95;
    IfsSamplerConfig sampler;
};

FractalDataset build_pretrain_dataset(int num_classes, int images_per_class,
                                      std::size_t size, std::uint64_t seed,
                                      const FractalBuildConfig& cfg = {});

// Cross-entropy pre-training pass over the fractal images; returns the model
// after `epochs` epochs. Head must be at least as wide as the class count.
ModelParams pretrain(const ModelParams& model, const LabeledDataset& data, int epochs,
                     std::size_t batch, const LrSchedule& schedule, std::uint64_t seed,
                     std::vector<double>* loss_trace = nullptr);

// Keep the encoder, truncate the classifier to the first target_classes rows.
ModelParams slice_head(const ModelParams& pretrained, std::size_t target_classes);

// Versioned binary of float32 planes plus a JSON sidecar with the IFS codes.
void save_fractal_dataset(const std::string& path, const FractalDataset& ds);
LabeledDataset load_fractal_images(const std::string& path);
FractalDataset load_fractal_dataset(const std::string& path);  // reads sidecar too

}  // namespace fedsim
