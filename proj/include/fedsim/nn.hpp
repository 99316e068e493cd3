#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim {

enum class Activation { Tanh, Relu };

// Encoder E: either a small MLP for vector data or a 3-block conv net for
// images. Features are the output of the last linear/pooling stage.
struct EncoderConfig {
    enum class Kind { Mlp, Conv };
    Kind kind = Kind::Mlp;

    // Mlp: input_dim -> hidden[0] -> ... -> feature_dim, activation between
    // layers, last layer linear. hidden may be empty (single linear map).
    std::size_t input_dim = 16;
    std::vector<std::size_t> hidden = {64};
    std::size_t mlp_feature_dim = 32;
    Activation act = Activation::Tanh;

    // Conv: in_channels x image_size^2 -> 3x [conv3x3, relu, avgpool2]
    // -> global average pool. Feature dim equals channels[2].
    std::size_t in_channels = 1;
    std::size_t image_size = 32;
    std::array<std::size_t, 3> channels = {16, 32, 64};

    std::size_t feature_dim() const {
        return kind == Kind::Mlp ? mlp_feature_dim : channels[2];
    }
    std::vector<std::size_t> input_shape() const {
        if (kind == Kind::Mlp) return {input_dim};
        return {in_channels, image_size, image_size};
    }
    bool operator==(const EncoderConfig&) const = default;
};

struct ModelConfig {
    EncoderConfig encoder;
    std::size_t num_outputs = 10;  // classifier head width
    bool operator==(const ModelConfig&) const = default;
};

// theta = {encoder xi, head psi}. Head is a single affine map d -> num_outputs.
struct ModelParams {
    ModelConfig config;
    std::vector<NamedTensor> encoder;
    Tensor head_w;  // [num_outputs, d]
    Tensor head_b;  // [num_outputs]

    std::size_t feature_dim() const { return config.encoder.feature_dim(); }
    std::vector<Tensor*> tensors();                // encoder..., head_w, head_b
    std::vector<const Tensor*> tensors() const;
    bool finite() const;
};

bool operator==(const ModelParams& a, const ModelParams& b);

// Gradients (and any per-tensor state) mirror the parameter list order.
struct GradientSet {
    std::vector<NamedTensor> encoder;
    Tensor head_w;
    Tensor head_b;

    std::vector<Tensor*> tensors();
    std::vector<const Tensor*> tensors() const;
};

ModelParams init_params(const ModelConfig& config, std::uint64_t seed);
GradientSet zeros_like(const ModelParams& params);
void add_scaled(GradientSet& acc, const GradientSet& g, double s);

struct InputBatch {
    Tensor x;                // {B, input_shape...}
    std::vector<int> labels;
    std::size_t batch_size() const { return labels.size(); }
};

struct FeatureBatch {
    Tensor features;  // {B, d}
    std::vector<int> labels;
};

// Activations recorded by encode() for the matching backward pass.
struct ForwardCache {
    Tensor input;
    std::vector<Tensor> pre;   // pre-activation per layer (mlp) / per conv (conv)
    std::vector<Tensor> post;  // layer inputs: post[i] feeds layer i+1
};

FeatureBatch encode(const ModelParams& params, const InputBatch& batch,
                    ForwardCache* cache = nullptr);
Tensor classify(const ModelParams& params, const Tensor& features);  // logits {B, n_out}

enum class Reduction { Mean, Sum };
double cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     Reduction red = Reduction::Mean);
Tensor cross_entropy_grad(const Tensor& logits, const std::vector<int>& labels,
                          Reduction red = Reduction::Mean);

// Accumulates head gradients for a recorded classify() on `features`; when
// dfeatures is non-null also emits the gradient w.r.t. the features.
void head_backward(const ModelParams& params, const Tensor& features,
                   const Tensor& dlogits, GradientSet& acc, Tensor* dfeatures);

// Reverse pass through the encoder recorded in `cache`.
void encoder_backward(const ModelParams& params, const ForwardCache& cache,
                      const Tensor& dfeatures, GradientSet& acc);

// Full reverse-mode pass for a loss that consumed classify(encode(x)) logits
// plus an optional extra gradient injected directly on the features (used by
// feature-space losses). Throws NumericError naming the offending tensor if a
// gradient turns non-finite.
GradientSet backward(const ModelParams& params, const ForwardCache& cache,
                     const Tensor& features, const Tensor& dlogits,
                     const Tensor* dfeatures_extra = nullptr);

struct LrSchedule {
    double base = 1e-3;
    std::size_t halve_every = 1000;  // rounds; 0 disables decay
    double at_round(std::size_t round) const;
};

struct OptimizerState {
    std::vector<Tensor> m;  // first moments, parameter order
    std::vector<Tensor> v;  // second moments
    std::size_t step = 0;
    LrSchedule schedule;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

OptimizerState make_optimizer(const ModelParams& params, const LrSchedule& schedule);
void adam_step(ModelParams& params, const GradientSet& grads, OptimizerState& state,
               std::size_t round);

// Self-supervised label augmentation: each square image is emitted at
// 0/90/180/270 degrees with label 4*y + rotation. Head width must be 4*|C|.
InputBatch label_augment(const InputBatch& batch);
Tensor rotate90(const Tensor& image);  // {C,H,W}, counterclockwise

// Versioned binary checkpoint; load(save(p)) == p exactly.
void save_params(const std::string& path, const ModelParams& params);
ModelParams load_params(const std::string& path);

}  // namespace fedsim
