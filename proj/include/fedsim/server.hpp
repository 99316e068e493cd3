#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedsim/nn.hpp"
#include "fedsim/prototypes.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

struct ServerState {
    ModelParams params;
    GlobalPrototypeStore store;
    std::size_t round = 0;
};

// Uniform sample of k distinct client ids, sorted ascending.
std::vector<int> sample_clients(int n_clients, int k, Rng& rng);

// One client's upload as seen by the aggregation step.
struct ClientUpload {
    const ModelParams* params = nullptr;
    std::size_t num_samples = 0;  // current-stage sample count
};

// theta = rho * weighted_mean(clients) + (1 - rho) * prev. Weights are
// num_samples normalized over the round's uploads; an empty upload list
// returns prev unchanged. literal_prefix_norm switches the weight denominator
// to the running prefix sum_{i<=k} |D_i| (non-convex; off by default).
ModelParams aggregate_models(const std::vector<ClientUpload>& clients,
                             const ModelParams& prev, double rho,
                             bool literal_prefix_norm = false);

struct PrototypeUpload {
    int client_id = 0;
    std::vector<Prototype> prototypes;
    RadiusStat radius;
};

// Count-weighted mean per reported class; new classes enter the registry
// as-is, known classes are blended with moving-average weight beta. The
// radius follows the same rule, weighted by total stage counts.
void aggregate_prototypes(const std::vector<PrototypeUpload>& uploads,
                          GlobalPrototypeStore& store, double beta, std::size_t round);

inline std::set<int> discovered_classes(const GlobalPrototypeStore& store) {
    return store.discovered();
}

// Versioned binary: round counter + model + prototype store. Resumable.
void save_server_state(const std::string& path, const ServerState& state);
ServerState load_server_state(const std::string& path);

}  // namespace fedsim
