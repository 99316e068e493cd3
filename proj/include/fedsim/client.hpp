#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "fedsim/dataset.hpp"
#include "fedsim/nn.hpp"
#include "fedsim/prototypes.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

// A view of the samples a client trains on during one stage.
struct StageData {
    const LabeledDataset* dataset = nullptr;
    std::vector<std::size_t> indices;

    std::size_t size() const { return indices.size(); }
};

enum class RadiusMode {
    PerClassMean,  // mean over classes of Tr(Sigma_c)/d
    DatasetSize,   // sum over classes divided by the stage sample count
};

enum class NegativesMode {
    PerVector,     // one term per opposing pooled vector
    PerClassMean,  // one term per opposing class, against its pooled mean
};

struct ClientConfig {
    double lambda_p = 1e-2;
    double lambda_r = 1e-2;
    int epochs = 1;
    std::size_t batch = 64;
    LrSchedule schedule;
    RadiusMode radius_mode = RadiusMode::PerClassMean;
    NegativesMode negatives = NegativesMode::PerVector;
    bool label_augment = false;  // images only; head width must be 4*|C|
};

struct LossTrace {
    std::vector<double> ce;
    std::vector<double> lp;
    std::vector<double> lr;
};

struct ClientRoundResult {
    ModelParams params;
    std::vector<Prototype> prototypes;  // sorted by class id
    RadiusStat radius;
    std::map<int, std::size_t> class_counts;
    LossTrace trace;
};

// Per-class mean encoder features under the given (downloaded) parameters.
std::vector<Prototype> compute_prototypes(const StageData& data, const ModelParams& params);

RadiusStat compute_radius(const StageData& data, const ModelParams& params,
                          RadiusMode mode = RadiusMode::PerClassMean);

// e + r * z with z a standard normal vector from the stream.
std::vector<double> augment_prototype(const std::vector<double>& e, double r, Rng& rng);

// Sum of per-entry cross-entropies over a batch-sized vector of augmented
// prototypes whose classes are drawn uniformly (with replacement) from the
// globally discovered classes outside the active task. Zero when that set is
// empty. label_stride maps class c to head unit c*stride.
double proto_loss(const GlobalPrototypeStore& store, const std::set<int>& active_classes,
                  const ModelParams& params, std::size_t batch_size, Rng& rng,
                  std::size_t label_stride = 1);

// Contrastive representation loss over current-batch features pooled with one
// augmented prototype per discovered class. When dfeatures is non-null it
// receives dL/dfeatures for the batch rows (prototype rows are constants).
double repr_loss(const FeatureBatch& batch_features,
                 const std::vector<std::pair<int, std::vector<double>>>& augmented_old,
                 const std::set<int>& active_classes, Tensor* dfeatures = nullptr,
                 NegativesMode mode = NegativesMode::PerVector);

// One client round: adopt the global model, compute prototypes/radius with it,
// then optimize CE + lambda_p*Lp + lambda_r*Lr for the configured epochs.
ClientRoundResult local_train(const ModelParams& global, const GlobalPrototypeStore& store,
                              const StageData& stage, std::size_t round,
                              const ClientConfig& config, Rng& rng);

}  // namespace fedsim
